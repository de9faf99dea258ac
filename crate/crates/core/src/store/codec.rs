//! Canonical length-prefixed encoding for stored values.
//!
//! Layout: one tag byte, a big-endian `u32` payload length, then the payload.
//! Integers are 8-byte big-endian two's complement; lists are the
//! concatenation of their encoded elements.

use thiserror::Error;

const TAG_INT: u8 = 1;
const TAG_TEXT: u8 = 2;
const TAG_BYTES: u8 = 3;
const TAG_LIST: u8 = 4;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Value {
    Int(i64),
    Text(String),
    Bytes(Vec<u8>),
    List(Vec<Value>),
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CodecError {
    #[error("truncated input at offset {0}")]
    Truncated(usize),
    #[error("unknown tag {tag:#04x} at offset {offset}")]
    UnknownTag { tag: u8, offset: usize },
    #[error("integer payload must be 8 bytes, got {0}")]
    BadIntLength(u32),
    #[error("text payload is not valid utf-8")]
    BadUtf8,
    #[error("{0} trailing bytes after value")]
    Trailing(usize),
}

impl Value {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.encode_into(&mut out);
        out
    }

    fn encode_into(&self, out: &mut Vec<u8>) {
        let (tag, start) = match self {
            Value::Int(_) => (TAG_INT, out.len()),
            Value::Text(_) => (TAG_TEXT, out.len()),
            Value::Bytes(_) => (TAG_BYTES, out.len()),
            Value::List(_) => (TAG_LIST, out.len()),
        };
        out.push(tag);
        out.extend_from_slice(&[0; 4]);
        match self {
            Value::Int(i) => out.extend_from_slice(&i.to_be_bytes()),
            Value::Text(s) => out.extend_from_slice(s.as_bytes()),
            Value::Bytes(b) => out.extend_from_slice(b),
            Value::List(items) => items.iter().for_each(|v| v.encode_into(out)),
        }
        let len = (out.len() - start - 5) as u32;
        out[start + 1..start + 5].copy_from_slice(&len.to_be_bytes());
    }

    pub fn decode(bytes: &[u8]) -> Result<Value, CodecError> {
        let (v, used) = Self::decode_at(bytes, 0)?;
        if used != bytes.len() {
            return Err(CodecError::Trailing(bytes.len() - used));
        }
        Ok(v)
    }

    fn decode_at(bytes: &[u8], offset: usize) -> Result<(Value, usize), CodecError> {
        let header = bytes
            .get(offset..offset + 5)
            .ok_or(CodecError::Truncated(offset))?;
        let tag = header[0];
        let len = u32::from_be_bytes([header[1], header[2], header[3], header[4]]);
        let start = offset + 5;
        let end = start + len as usize;
        let payload = bytes.get(start..end).ok_or(CodecError::Truncated(start))?;
        let value = match tag {
            TAG_INT => {
                let arr: [u8; 8] = payload.try_into().map_err(|_| CodecError::BadIntLength(len))?;
                Value::Int(i64::from_be_bytes(arr))
            }
            TAG_TEXT => Value::Text(
                String::from_utf8(payload.to_vec()).map_err(|_| CodecError::BadUtf8)?,
            ),
            TAG_BYTES => Value::Bytes(payload.to_vec()),
            TAG_LIST => {
                let mut items = Vec::new();
                let mut at = start;
                while at < end {
                    let (v, next) = Self::decode_at(&bytes[..end], at)?;
                    items.push(v);
                    at = next;
                }
                Value::List(items)
            }
            tag => return Err(CodecError::UnknownTag { tag, offset }),
        };
        Ok((value, end))
    }

    pub fn as_int(&self) -> Option<i64> {
        match self {
            Value::Int(i) => Some(*i),
            _ => None,
        }
    }
}
