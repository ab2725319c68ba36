//! Transactional key-value store holding all filesystem metadata.
//!
//! Values are either opaque byte strings or lists of opaque items carrying an
//! auxiliary `end` counter (the region end offset). Transactions are
//! optimistic: reads record the version they observed, writes are buffered
//! client-side, and the store validates the read set and applies the write set
//! atomically at commit. The first committer wins; later committers whose
//! reads went stale get [`Error::Conflict`] and nothing is applied.

mod store;
mod txn;
mod wal;

pub use store::{MetaCounters, MetadataStore};
pub use txn::{Txn, TxnStatus};

use std::sync::Arc;

use crate::codec::{Decoder, Encoder};
use crate::error::{Error, Result};

pub const SPACE_PATHS: &str = "paths";
pub const SPACE_INODES: &str = "inodes";
pub const SPACE_REGIONS: &str = "regions";
pub const SPACE_CONFIG: &str = "config";

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ListValue {
    pub end: u64,
    pub items: Vec<Vec<u8>>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Value {
    Bytes(Vec<u8>),
    List(ListValue),
}

impl Value {
    pub fn as_bytes(&self) -> Result<&[u8]> {
        match self {
            Value::Bytes(b) => Ok(b),
            Value::List(_) => Err(Error::TypeMismatch),
        }
    }

    pub fn as_list(&self) -> Result<&ListValue> {
        match self {
            Value::List(l) => Ok(l),
            Value::Bytes(_) => Err(Error::TypeMismatch),
        }
    }

    pub fn encode_into(&self, e: &mut Encoder) {
        match self {
            Value::Bytes(b) => {
                e.u8(0).bytes32(b);
            }
            Value::List(l) => {
                e.u8(1).u64(l.end).u32(l.items.len() as u32);
                for item in &l.items {
                    e.bytes32(item);
                }
            }
        }
    }

    pub fn decode_from(d: &mut Decoder<'_>) -> Result<Self> {
        match d.u8()? {
            0 => Ok(Value::Bytes(d.bytes32()?.to_vec())),
            1 => {
                let end = d.u64()?;
                let n = d.u32()? as usize;
                let mut items = Vec::with_capacity(n.min(1 << 16));
                for _ in 0..n {
                    items.push(d.bytes32()?.to_vec());
                }
                Ok(Value::List(ListValue { end, items }))
            }
            t => Err(Error::corrupt(format!("bad value tag {t}"))),
        }
    }
}

/// A committed value with its per-key version.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Versioned {
    pub value: Value,
    pub version: u64,
}

/// What a reader observed for a key: a version (0 if never written; deleted
/// keys keep counting) and the value if present.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Snapshot {
    pub version: u64,
    pub value: Option<Value>,
}

/// Guard for conditional list appends: applies iff `end + len <= limit`,
/// advancing `end` by `len`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AppendGuard {
    pub len: u64,
    pub limit: u64,
}

impl AppendGuard {
    pub fn holds(&self, end: u64) -> bool {
        end.checked_add(self.len).is_some_and(|e| e <= self.limit)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Mutation {
    Put(Value),
    Delete,
    /// Append, raising `end` to at least `end_at_least`.
    ListAppend { item: Vec<u8>, end_at_least: u64 },
    /// Guarded append; inside a transaction a failed guard fails the commit.
    CondListAppend { item: Vec<u8>, guard: AppendGuard },
    /// Put that only applies if the key is still at `expected_version`.
    CondPut { expected_version: u64, value: Value },
}

impl Mutation {
    pub fn encode_into(&self, e: &mut Encoder) {
        match self {
            Mutation::Put(v) => {
                e.u8(0);
                v.encode_into(e);
            }
            Mutation::Delete => {
                e.u8(1);
            }
            Mutation::ListAppend { item, end_at_least } => {
                e.u8(2).bytes32(item).u64(*end_at_least);
            }
            Mutation::CondListAppend { item, guard } => {
                e.u8(3).bytes32(item).u64(guard.len).u64(guard.limit);
            }
            Mutation::CondPut { expected_version, value } => {
                e.u8(4).u64(*expected_version);
                value.encode_into(e);
            }
        }
    }

    pub fn decode_from(d: &mut Decoder<'_>) -> Result<Self> {
        Ok(match d.u8()? {
            0 => Mutation::Put(Value::decode_from(d)?),
            1 => Mutation::Delete,
            2 => Mutation::ListAppend { item: d.bytes32()?.to_vec(), end_at_least: d.u64()? },
            3 => {
                let item = d.bytes32()?.to_vec();
                Mutation::CondListAppend { item, guard: AppendGuard { len: d.u64()?, limit: d.u64()? } }
            }
            4 => {
                let expected_version = d.u64()?;
                Mutation::CondPut { expected_version, value: Value::decode_from(d)? }
            }
            t => return Err(Error::corrupt(format!("bad mutation tag {t}"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WriteOp {
    pub space: String,
    pub key: Vec<u8>,
    pub mutation: Mutation,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReadStamp {
    pub space: String,
    pub key: Vec<u8>,
    pub version: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CondAppend {
    /// `prev_end` is where an end-relative item placed by this append lands.
    Applied { version: u64, prev_end: u64 },
    GuardFailed,
}

/// Outcome of applying one mutation to a slot.
pub(crate) enum Applied {
    Value(Option<Value>),
    GuardFailed,
    VersionMismatch,
}

/// Applies `m` to the current contents of a key at `version`.
pub(crate) fn apply_mutation(current: Option<&Value>, version: u64, m: &Mutation) -> Result<Applied> {
    let list_or_empty = |current: Option<&Value>| -> Result<ListValue> {
        match current {
            None => Ok(ListValue::default()),
            Some(Value::List(l)) => Ok(l.clone()),
            Some(Value::Bytes(_)) => Err(Error::TypeMismatch),
        }
    };
    Ok(match m {
        Mutation::Put(v) => Applied::Value(Some(v.clone())),
        Mutation::Delete => Applied::Value(None),
        Mutation::ListAppend { item, end_at_least } => {
            let mut l = list_or_empty(current)?;
            l.items.push(item.clone());
            l.end = l.end.max(*end_at_least);
            Applied::Value(Some(Value::List(l)))
        }
        Mutation::CondListAppend { item, guard } => {
            let mut l = list_or_empty(current)?;
            if !guard.holds(l.end) {
                return Ok(Applied::GuardFailed);
            }
            l.items.push(item.clone());
            l.end += guard.len;
            Applied::Value(Some(Value::List(l)))
        }
        Mutation::CondPut { expected_version, value } => {
            if *expected_version != version {
                Applied::VersionMismatch
            } else {
                Applied::Value(Some(value.clone()))
            }
        }
    })
}

/// The operations every metadata store (local or remote) offers. Transaction
/// state lives client-side in [`Txn`]; the store only sees a validated
/// read set and write set at [`MetaStore::commit`].
pub trait MetaStore: Send + Sync {
    fn read(&self, space: &str, key: &[u8]) -> Result<Snapshot>;
    fn put(&self, space: &str, key: &[u8], value: Value) -> Result<u64>;
    fn list_append(&self, space: &str, key: &[u8], item: Vec<u8>, end_at_least: u64) -> Result<u64>;
    fn cond_list_append(&self, space: &str, key: &[u8], item: Vec<u8>, guard: AppendGuard) -> Result<CondAppend>;
    /// Applies `writes` atomically iff every read stamp is still current.
    /// Returns, for each guarded append in `writes`, the list end it was
    /// placed at.
    fn commit(&self, reads: &[ReadStamp], writes: &[WriteOp]) -> Result<Vec<u64>>;
    fn scan(&self, space: &str) -> Result<Vec<(Vec<u8>, Versioned)>>;
    fn counters(&self) -> MetaCounters;

    fn get(&self, space: &str, key: &[u8]) -> Result<Versioned> {
        let s = self.read(space, key)?;
        match s.value {
            Some(value) => Ok(Versioned { value, version: s.version }),
            None => Err(Error::NotFound),
        }
    }
}

pub fn begin(store: &Arc<dyn MetaStore>) -> Txn {
    Txn::new(store.clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn value_and_mutation_encodings_round_trip() {
        let muts = vec![
            Mutation::Put(Value::Bytes(b"abc".to_vec())),
            Mutation::Delete,
            Mutation::ListAppend { item: vec![1, 2], end_at_least: 9 },
            Mutation::CondListAppend { item: vec![3], guard: AppendGuard { len: 4, limit: 10 } },
            Mutation::CondPut {
                expected_version: 3,
                value: Value::List(ListValue { end: 5, items: vec![vec![], vec![7]] }),
            },
        ];
        for m in muts {
            let mut e = Encoder::new();
            m.encode_into(&mut e);
            let b = e.finish();
            let mut d = Decoder::new(&b);
            assert_eq!(Mutation::decode_from(&mut d).unwrap(), m);
            d.finish().unwrap();
        }
    }

    #[test]
    fn guard_arithmetic() {
        let g = AppendGuard { len: 4, limit: 10 };
        assert!(g.holds(6));
        assert!(!g.holds(7));
        assert!(!AppendGuard { len: u64::MAX, limit: u64::MAX }.holds(1));
    }
}
