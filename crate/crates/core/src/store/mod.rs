//! Strongly consistent in-memory key-value store with named locks.
//!
//! One authoritative map; every access is serialized, which makes get/put
//! linearizable per key. Values live for the lifetime of the process.

mod codec;
mod field;
mod locks;
mod shared;

use std::collections::HashMap;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use thiserror::Error;

pub use codec::{CodecError, Value};
pub use field::{invoke_on_shared_field, FieldDescriptor, FieldError, FieldKind, RemoteDispatch};
pub use locks::{Acquire, LockError, LockHolder, LockTable};
pub use shared::{LockOutcome, SharedStore};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum StoreError {
    #[error("invalid store key {0:?}: class names must be non-empty and contain no '$'")]
    InvalidKey(String),
}

/// Key of a shared field: rendered as `Class$field`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct StoreKey {
    class: String,
    field: String,
}

impl StoreKey {
    pub fn new(class: impl Into<String>, field: impl Into<String>) -> Result<Self, StoreError> {
        let class = class.into();
        if class.is_empty() || class.contains('$') {
            return Err(StoreError::InvalidKey(class));
        }
        Ok(Self {
            class,
            field: field.into(),
        })
    }

    pub fn class(&self) -> &str {
        &self.class
    }

    pub fn field(&self) -> &str {
        &self.field
    }

    pub fn render(&self) -> String {
        format!("{}${}", self.class, self.field)
    }
}

impl fmt::Display for StoreKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}${}", self.class, self.field)
    }
}

impl FromStr for StoreKey {
    type Err = StoreError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (class, field) = s
            .split_once('$')
            .ok_or_else(|| StoreError::InvalidKey(s.to_owned()))?;
        StoreKey::new(class, field)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StoredValue {
    pub bytes: Vec<u8>,
    pub version: u64,
}

impl StoredValue {
    pub fn decode(&self) -> Result<Value, CodecError> {
        Value::decode(&self.bytes)
    }
}

#[derive(Debug, Default, Clone)]
pub struct Store {
    data: HashMap<String, StoredValue>,
    locks: LockTable,
}

impl Store {
    pub fn new() -> Self {
        Self::default()
    }

    /// `None` is the absent marker for keys never written.
    pub fn get(&self, key: &StoreKey) -> Option<&StoredValue> {
        self.get_rendered(&key.render())
    }

    pub fn get_rendered(&self, key: &str) -> Option<&StoredValue> {
        self.data.get(key)
    }

    /// Stores `bytes` and returns the new version (1 for the first put).
    pub fn put(&mut self, key: &StoreKey, bytes: Vec<u8>) -> u64 {
        self.put_rendered(key.render(), bytes)
    }

    pub fn put_rendered(&mut self, key: String, bytes: Vec<u8>) -> u64 {
        let slot = self.data.entry(key).or_insert(StoredValue {
            bytes: Vec::new(),
            version: 0,
        });
        slot.version += 1;
        slot.bytes = bytes;
        slot.version
    }

    pub fn get_value(&self, key: &StoreKey) -> Option<Value> {
        self.get(key).and_then(|v| v.decode().ok())
    }

    pub fn put_value(&mut self, key: &StoreKey, value: &Value) -> u64 {
        self.put(key, value.encode())
    }

    pub fn locks(&self) -> &LockTable {
        &self.locks
    }

    pub fn locks_mut(&mut self) -> &mut LockTable {
        &mut self.locks
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Debug dump: `key,version` rows sorted by key.
    pub fn dump_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut keys: Vec<&String> = self.data.keys().collect();
        keys.sort();
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["key", "version"])?;
        for k in keys {
            w.write_record([k.as_str(), &self.data[k].version.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}
