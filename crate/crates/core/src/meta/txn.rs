use std::collections::HashMap;
use std::sync::Arc;

use super::{apply_mutation, Applied, AppendGuard, MetaStore, Mutation, ReadStamp, Value, WriteOp};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TxnStatus {
    Open,
    Committed,
    Aborted,
}

type Key = (String, Vec<u8>);

/// Client-side transaction context: read set, cached committed snapshots and
/// buffered writes. Buffered writes are visible to this transaction's own
/// reads and to nobody else until [`Txn::commit`].
pub struct Txn {
    store: Arc<dyn MetaStore>,
    reads: HashMap<Key, u64>,
    cache: HashMap<Key, Option<Value>>,
    writes: Vec<WriteOp>,
    landed: Vec<u64>,
    status: TxnStatus,
}

impl Txn {
    pub fn new(store: Arc<dyn MetaStore>) -> Self {
        Txn { store, reads: HashMap::new(), cache: HashMap::new(), writes: Vec::new(), landed: Vec::new(), status: TxnStatus::Open }
    }

    pub fn status(&self) -> TxnStatus {
        self.status
    }

    pub fn store(&self) -> &Arc<dyn MetaStore> {
        &self.store
    }

    fn check_open(&self) -> Result<()> {
        match self.status {
            TxnStatus::Open => Ok(()),
            _ => Err(Error::UseAfterClose),
        }
    }

    /// Reads a key as this transaction sees it: the committed value observed
    /// on first access, with this transaction's own buffered writes applied.
    pub fn get(&mut self, space: &str, key: &[u8]) -> Result<Option<Value>> {
        self.check_open()?;
        let k = (space.to_string(), key.to_vec());
        let base = match self.cache.get(&k) {
            Some(v) => v.clone(),
            None => {
                let snap = self.store.read(space, key)?;
                self.reads.insert(k.clone(), snap.version);
                self.cache.insert(k.clone(), snap.value.clone());
                snap.value
            }
        };
        let mut version = self.reads[&k];
        let mut value = base;
        for w in self.writes.iter().filter(|w| w.space == space && w.key == key) {
            match apply_mutation(value.as_ref(), version, &w.mutation)? {
                Applied::Value(v) => {
                    value = v;
                    version += 1;
                }
                // The commit will fail; report what is committed so far.
                Applied::GuardFailed | Applied::VersionMismatch => {}
            }
        }
        Ok(value)
    }

    /// Version of `key` as first observed by this transaction, reading it if
    /// necessary.
    pub fn observed_version(&mut self, space: &str, key: &[u8]) -> Result<u64> {
        self.get(space, key)?;
        Ok(self.reads[&(space.to_string(), key.to_vec())])
    }

    fn push(&mut self, space: &str, key: &[u8], mutation: Mutation) -> Result<()> {
        self.check_open()?;
        self.writes.push(WriteOp { space: space.to_string(), key: key.to_vec(), mutation });
        Ok(())
    }

    pub fn put(&mut self, space: &str, key: &[u8], value: Value) -> Result<()> {
        self.push(space, key, Mutation::Put(value))
    }

    pub fn delete(&mut self, space: &str, key: &[u8]) -> Result<()> {
        self.push(space, key, Mutation::Delete)
    }

    pub fn list_append(&mut self, space: &str, key: &[u8], item: Vec<u8>, end_at_least: u64) -> Result<()> {
        self.push(space, key, Mutation::ListAppend { item, end_at_least })
    }

    /// Guarded append evaluated at commit; a failing guard fails the commit
    /// with [`Error::Conflict`].
    pub fn cond_list_append(&mut self, space: &str, key: &[u8], item: Vec<u8>, guard: AppendGuard) -> Result<()> {
        self.push(space, key, Mutation::CondListAppend { item, guard })
    }

    pub fn cond_put(&mut self, space: &str, key: &[u8], expected_version: u64, value: Value) -> Result<()> {
        self.push(space, key, Mutation::CondPut { expected_version, value })
    }

    pub fn is_read_only(&self) -> bool {
        self.writes.is_empty()
    }

    pub fn write_count(&self) -> usize {
        self.writes.len()
    }

    /// Commits iff nothing this transaction read has changed since.
    pub fn commit(&mut self) -> Result<()> {
        self.check_open()?;
        if self.reads.is_empty() && self.writes.is_empty() {
            self.status = TxnStatus::Committed;
            return Ok(());
        }
        let reads: Vec<ReadStamp> = self
            .reads
            .iter()
            .map(|((space, key), &version)| ReadStamp { space: space.clone(), key: key.clone(), version })
            .collect();
        match self.store.commit(&reads, &self.writes) {
            Ok(landed) => {
                self.landed = landed;
                self.status = TxnStatus::Committed;
                Ok(())
            }
            Err(e) => {
                self.status = TxnStatus::Aborted;
                Err(e)
            }
        }
    }

    /// After a successful commit: the list end each guarded append landed at,
    /// in the order the appends were issued.
    pub fn landed(&self) -> &[u64] {
        &self.landed
    }

    pub fn abort(&mut self) {
        if self.status == TxnStatus::Open {
            self.status = TxnStatus::Aborted;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::meta::{ListValue, MetadataStore};

    fn store() -> Arc<dyn MetaStore> {
        Arc::new(MetadataStore::in_memory())
    }

    fn counter(t: &mut Txn) -> u64 {
        match t.get("c", b"n").unwrap() {
            Some(Value::Bytes(b)) => u64::from_be_bytes(b.try_into().unwrap()),
            _ => 0,
        }
    }

    #[test]
    fn first_committer_wins() {
        let s = store();
        s.put("c", b"n", Value::Bytes(5u64.to_be_bytes().to_vec())).unwrap();
        let mut t1 = Txn::new(s.clone());
        let mut t2 = Txn::new(s.clone());
        let a = counter(&mut t1);
        let b = counter(&mut t2);
        t1.put("c", b"n", Value::Bytes((a + 1).to_be_bytes().to_vec())).unwrap();
        t2.put("c", b"n", Value::Bytes((b + 1).to_be_bytes().to_vec())).unwrap();
        t1.commit().unwrap();
        assert_eq!(t2.commit(), Err(Error::Conflict));
        assert_eq!(t2.status(), TxnStatus::Aborted);
        assert_eq!(s.get("c", b"n").unwrap().version, 2);
        assert_eq!(t2.put("c", b"n", Value::Bytes(vec![])), Err(Error::UseAfterClose));
    }

    #[test]
    fn empty_transaction_commits() {
        let mut t = Txn::new(store());
        t.commit().unwrap();
        assert_eq!(t.status(), TxnStatus::Committed);
        assert_eq!(t.commit(), Err(Error::UseAfterClose));
    }

    #[test]
    fn reads_see_own_buffered_writes_only() {
        let s = store();
        let mut t = Txn::new(s.clone());
        t.list_append("regions", b"r", vec![1], 10).unwrap();
        t.list_append("regions", b"r", vec![2], 4).unwrap();
        assert_eq!(
            t.get("regions", b"r").unwrap(),
            Some(Value::List(ListValue { end: 10, items: vec![vec![1], vec![2]] }))
        );
        assert_eq!(Txn::new(s.clone()).get("regions", b"r").unwrap(), None);
        t.commit().unwrap();
        assert_eq!(s.get("regions", b"r").unwrap().value.as_list().unwrap().items.len(), 2);
    }

    #[test]
    fn failed_guard_fails_commit_atomically() {
        let s = store();
        let mut t = Txn::new(s.clone());
        t.put("x", b"a", Value::Bytes(vec![1])).unwrap();
        t.cond_list_append("regions", b"r", vec![1], AppendGuard { len: 11, limit: 10 }).unwrap();
        assert_eq!(t.commit(), Err(Error::Conflict));
        assert_eq!(s.get("x", b"a"), Err(Error::NotFound));
    }

    #[test]
    fn cond_put_checks_version() {
        let s = store();
        s.put("x", b"a", Value::Bytes(vec![1])).unwrap();
        let mut t = Txn::new(s.clone());
        t.cond_put("x", b"a", 0, Value::Bytes(vec![2])).unwrap();
        assert_eq!(t.commit(), Err(Error::Conflict));
        let mut t = Txn::new(s.clone());
        t.cond_put("x", b"a", 1, Value::Bytes(vec![2])).unwrap();
        t.commit().unwrap();
    }

    #[test]
    fn counter_under_contention_has_no_lost_updates() {
        let s = store();
        let threads: Vec<_> = (0..16)
            .map(|_| {
                let s = s.clone();
                std::thread::spawn(move || {
                    for _ in 0..50 {
                        loop {
                            let mut t = Txn::new(s.clone());
                            let n = counter(&mut t);
                            t.put("c", b"n", Value::Bytes((n + 1).to_be_bytes().to_vec())).unwrap();
                            match t.commit() {
                                Ok(()) => break,
                                Err(Error::Conflict) => continue,
                                Err(e) => panic!("{e}"),
                            }
                        }
                    }
                })
            })
            .collect();
        threads.into_iter().for_each(|t| t.join().unwrap());
        let mut t = Txn::new(s);
        assert_eq!(counter(&mut t), 800);
    }
}
