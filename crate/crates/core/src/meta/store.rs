use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use parking_lot::Mutex;

use super::wal::{Wal, WalRecord};
use super::{
    apply_mutation, Applied, AppendGuard, CondAppend, MetaStore, Mutation, ReadStamp, Snapshot, Value,
    Versioned, WriteOp,
};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Default)]
struct Slot {
    version: u64,
    value: Option<Value>,
}

#[derive(Default)]
struct State {
    spaces: HashMap<String, BTreeMap<Vec<u8>, Slot>>,
}

impl State {
    fn slot(&self, space: &str, key: &[u8]) -> Option<&Slot> {
        self.spaces.get(space).and_then(|s| s.get(key))
    }

    fn version(&self, space: &str, key: &[u8]) -> u64 {
        self.slot(space, key).map_or(0, |s| s.version)
    }

    fn install(&mut self, space: &str, key: &[u8], version: u64, value: Option<Value>) {
        let slots = self.spaces.entry(space.to_string()).or_default();
        slots.insert(key.to_vec(), Slot { version, value });
    }
}

/// Operation counters, all monotone.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MetaCounters {
    pub gets: u64,
    pub puts: u64,
    pub appends: u64,
    pub commits: u64,
    pub conflicts: u64,
    pub scans: u64,
}

#[derive(Default)]
struct AtomicCounters {
    gets: AtomicU64,
    puts: AtomicU64,
    appends: AtomicU64,
    commits: AtomicU64,
    conflicts: AtomicU64,
    scans: AtomicU64,
}

impl AtomicCounters {
    fn bump(c: &AtomicU64) {
        c.fetch_add(1, Ordering::Relaxed);
    }

    fn snapshot(&self) -> MetaCounters {
        MetaCounters {
            gets: self.gets.load(Ordering::Relaxed),
            puts: self.puts.load(Ordering::Relaxed),
            appends: self.appends.load(Ordering::Relaxed),
            commits: self.commits.load(Ordering::Relaxed),
            conflicts: self.conflicts.load(Ordering::Relaxed),
            scans: self.scans.load(Ordering::Relaxed),
        }
    }
}

/// Single-node metadata store. All mutations go through one lock, which is
/// also the commit validation point; an optional log makes commits durable.
pub struct MetadataStore {
    state: Mutex<State>,
    wal: Option<Mutex<Wal>>,
    counters: AtomicCounters,
}

impl MetadataStore {
    pub fn in_memory() -> Self {
        MetadataStore { state: Mutex::new(State::default()), wal: None, counters: AtomicCounters::default() }
    }

    /// Opens a durable store backed by the log at `path`, replaying it.
    pub fn open(path: &Path, sync: bool) -> Result<Self> {
        let (wal, commits) = Wal::open(path, sync)?;
        let mut state = State::default();
        for records in commits {
            for r in records {
                let current = state.slot(&r.space, &r.key).and_then(|s| s.value.clone());
                let value = match apply_mutation(current.as_ref(), r.version - 1, &r.mutation)? {
                    Applied::Value(v) => v,
                    _ => return Err(Error::corrupt("log replay guard failure")),
                };
                state.install(&r.space, &r.key, r.version, value);
            }
        }
        Ok(MetadataStore { state: Mutex::new(state), wal: Some(Mutex::new(wal)), counters: AtomicCounters::default() })
    }

    /// Validates and applies a batch under the state lock. Returns the log
    /// records that were installed.
    fn apply_batch(&self, state: &mut State, reads: &[ReadStamp], writes: &[WriteOp]) -> Result<Vec<u64>> {
        for r in reads {
            if state.version(&r.space, &r.key) != r.version {
                return Err(Error::Conflict);
            }
        }
        // Stage every mutation against a private overlay first so a failure
        // part-way through leaves the state untouched.
        let mut staged: HashMap<(&str, &[u8]), Slot> = HashMap::new();
        let mut records = Vec::with_capacity(writes.len());
        let mut landed = Vec::new();
        for w in writes {
            let cur = match staged.get(&(w.space.as_str(), w.key.as_slice())) {
                Some(s) => s.clone(),
                None => state.slot(&w.space, &w.key).cloned().unwrap_or_default(),
            };
            if let Mutation::CondListAppend { .. } = w.mutation {
                landed.push(match &cur.value {
                    Some(Value::List(l)) => l.end,
                    _ => 0,
                });
            }
            let new_value = match apply_mutation(cur.value.as_ref(), cur.version, &w.mutation)? {
                Applied::Value(v) => v,
                Applied::GuardFailed | Applied::VersionMismatch => return Err(Error::Conflict),
            };
            let version = cur.version + 1;
            records.push(WalRecord {
                space: w.space.clone(),
                key: w.key.clone(),
                version,
                mutation: resolved(&w.mutation, new_value.as_ref()),
            });
            staged.insert((w.space.as_str(), w.key.as_slice()), Slot { version, value: new_value });
        }
        if let Some(wal) = &self.wal {
            if !records.is_empty() {
                wal.lock().append(&records)?;
            }
        }
        for ((space, key), slot) in staged {
            state.install(space, key, slot.version, slot.value);
        }
        Ok(landed)
    }

    fn single(&self, space: &str, key: &[u8], mutation: Mutation) -> Result<(u64, Option<Value>)> {
        let mut state = self.state.lock();
        let op = WriteOp { space: space.to_string(), key: key.to_vec(), mutation };
        self.apply_batch(&mut state, &[], std::slice::from_ref(&op))?;
        let slot = state.slot(space, key).expect("just installed");
        Ok((slot.version, slot.value.clone()))
    }

    /// Number of live keys in `space`.
    pub fn len(&self, space: &str) -> usize {
        let state = self.state.lock();
        state.spaces.get(space).map_or(0, |s| s.values().filter(|v| v.value.is_some()).count())
    }
}

fn resolved(m: &Mutation, new_value: Option<&Value>) -> Mutation {
    match m {
        Mutation::Put(_) | Mutation::Delete => m.clone(),
        Mutation::CondPut { value, .. } => Mutation::Put(value.clone()),
        Mutation::ListAppend { item, .. } | Mutation::CondListAppend { item, .. } => {
            let end = match new_value {
                Some(Value::List(l)) => l.end,
                _ => 0,
            };
            Mutation::ListAppend { item: item.clone(), end_at_least: end }
        }
    }
}

impl MetaStore for MetadataStore {
    fn read(&self, space: &str, key: &[u8]) -> Result<Snapshot> {
        AtomicCounters::bump(&self.counters.gets);
        let state = self.state.lock();
        Ok(match state.slot(space, key) {
            Some(s) => Snapshot { version: s.version, value: s.value.clone() },
            None => Snapshot { version: 0, value: None },
        })
    }

    fn put(&self, space: &str, key: &[u8], value: Value) -> Result<u64> {
        AtomicCounters::bump(&self.counters.puts);
        Ok(self.single(space, key, Mutation::Put(value))?.0)
    }

    fn list_append(&self, space: &str, key: &[u8], item: Vec<u8>, end_at_least: u64) -> Result<u64> {
        AtomicCounters::bump(&self.counters.appends);
        Ok(self.single(space, key, Mutation::ListAppend { item, end_at_least })?.0)
    }

    fn cond_list_append(&self, space: &str, key: &[u8], item: Vec<u8>, guard: AppendGuard) -> Result<CondAppend> {
        AtomicCounters::bump(&self.counters.appends);
        let mut state = self.state.lock();
        let prev_end = match state.slot(space, key).and_then(|s| s.value.as_ref()) {
            None => 0,
            Some(Value::List(l)) => l.end,
            Some(Value::Bytes(_)) => return Err(Error::TypeMismatch),
        };
        if !guard.holds(prev_end) {
            return Ok(CondAppend::GuardFailed);
        }
        let op = WriteOp {
            space: space.to_string(),
            key: key.to_vec(),
            mutation: Mutation::CondListAppend { item, guard },
        };
        self.apply_batch(&mut state, &[], std::slice::from_ref(&op))?;
        Ok(CondAppend::Applied { version: state.version(space, key), prev_end })
    }

    fn commit(&self, reads: &[ReadStamp], writes: &[WriteOp]) -> Result<Vec<u64>> {
        let mut state = self.state.lock();
        match self.apply_batch(&mut state, reads, writes) {
            Ok(landed) => {
                AtomicCounters::bump(&self.counters.commits);
                Ok(landed)
            }
            Err(e) => {
                if e == Error::Conflict {
                    AtomicCounters::bump(&self.counters.conflicts);
                }
                Err(e)
            }
        }
    }

    fn scan(&self, space: &str) -> Result<Vec<(Vec<u8>, Versioned)>> {
        AtomicCounters::bump(&self.counters.scans);
        let state = self.state.lock();
        Ok(state
            .spaces
            .get(space)
            .map(|slots| {
                slots
                    .iter()
                    .filter_map(|(k, s)| {
                        s.value.clone().map(|value| (k.clone(), Versioned { value, version: s.version }))
                    })
                    .collect()
            })
            .unwrap_or_default())
    }

    fn counters(&self) -> MetaCounters {
        self.counters.snapshot()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::meta::ListValue;
    use std::sync::Arc;

    fn bytes(s: &str) -> Value {
        Value::Bytes(s.as_bytes().to_vec())
    }

    #[test]
    fn get_absent_then_put() {
        let s = MetadataStore::in_memory();
        assert_eq!(s.get("inodes", b"k"), Err(Error::NotFound));
        assert_eq!(s.put("inodes", b"k", bytes("v")).unwrap(), 1);
        assert_eq!(s.get("inodes", b"k").unwrap(), Versioned { value: bytes("v"), version: 1 });
    }

    #[test]
    fn deleted_keys_keep_their_version() {
        let s = MetadataStore::in_memory();
        s.put("paths", b"a", bytes("1")).unwrap();
        s.commit(&[], &[WriteOp { space: "paths".into(), key: b"a".to_vec(), mutation: Mutation::Delete }])
            .unwrap();
        assert_eq!(s.read("paths", b"a").unwrap(), Snapshot { version: 2, value: None });
        assert_eq!(s.put("paths", b"a", bytes("2")).unwrap(), 3);
    }

    #[test]
    fn list_append_to_absent_key_and_type_mismatch() {
        let s = MetadataStore::in_memory();
        s.list_append("regions", b"r", vec![1], 0).unwrap();
        let v = s.get("regions", b"r").unwrap();
        assert_eq!(v.value, Value::List(ListValue { end: 0, items: vec![vec![1]] }));
        s.put("regions", b"b", bytes("x")).unwrap();
        assert_eq!(s.list_append("regions", b"b", vec![1], 0), Err(Error::TypeMismatch));
        assert_eq!(s.get("regions", b"b").unwrap().version, 1);
    }

    #[test]
    fn cond_append_guard() {
        let s = MetadataStore::in_memory();
        let g = AppendGuard { len: 60, limit: 100 };
        assert_eq!(
            s.cond_list_append("regions", b"r", vec![1], g).unwrap(),
            CondAppend::Applied { version: 1, prev_end: 0 }
        );
        assert_eq!(s.cond_list_append("regions", b"r", vec![2], g).unwrap(), CondAppend::GuardFailed);
        let v = s.get("regions", b"r").unwrap();
        assert_eq!(v.version, 1);
        assert_eq!(v.value.as_list().unwrap().end, 60);
    }

    #[test]
    fn failed_batch_applies_nothing() {
        let s = MetadataStore::in_memory();
        s.put("x", b"bytes", bytes("v")).unwrap();
        let writes = vec![
            WriteOp { space: "x".into(), key: b"a".to_vec(), mutation: Mutation::Put(bytes("a")) },
            WriteOp { space: "x".into(), key: b"bytes".to_vec(), mutation: Mutation::ListAppend { item: vec![], end_at_least: 0 } },
        ];
        assert_eq!(s.commit(&[], &writes), Err(Error::TypeMismatch));
        assert_eq!(s.get("x", b"a"), Err(Error::NotFound));
    }

    #[test]
    fn concurrent_appenders_lose_nothing() {
        let s = Arc::new(MetadataStore::in_memory());
        let threads: Vec<_> = (0..64u32)
            .map(|t| {
                let s = s.clone();
                std::thread::spawn(move || {
                    for i in 0..100u32 {
                        let item = [t.to_be_bytes(), i.to_be_bytes()].concat();
                        s.list_append("regions", b"hot", item, 0).unwrap();
                    }
                })
            })
            .collect();
        threads.into_iter().for_each(|t| t.join().unwrap());
        let v = s.get("regions", b"hot").unwrap();
        let mut items = v.value.as_list().unwrap().items.clone();
        assert_eq!(v.version, 6400);
        items.sort();
        let mut want: Vec<Vec<u8>> =
            (0..64u32).flat_map(|t| (0..100u32).map(move |i| [t.to_be_bytes(), i.to_be_bytes()].concat())).collect();
        want.sort();
        assert_eq!(items, want);
    }

    #[test]
    fn concurrent_conditional_appends_respect_bound() {
        let region = 64 * 1024u64;
        let s = Arc::new(MetadataStore::in_memory());
        let applied = Arc::new(AtomicU64::new(0));
        let threads: Vec<_> = (0..32)
            .map(|_| {
                let (s, applied) = (s.clone(), applied.clone());
                std::thread::spawn(move || {
                    for _ in 0..4 {
                        let g = AppendGuard { len: region / 64, limit: region };
                        if let CondAppend::Applied { .. } = s.cond_list_append("regions", b"r", vec![0], g).unwrap() {
                            applied.fetch_add(1, Ordering::Relaxed);
                        }
                    }
                })
            })
            .collect();
        threads.into_iter().for_each(|t| t.join().unwrap());
        assert_eq!(applied.load(Ordering::Relaxed), 64);
        let l = s.get("regions", b"r").unwrap().value.as_list().unwrap().clone();
        assert_eq!(l.items.len(), 64);
        assert_eq!(l.end, region);
    }

    #[test]
    fn interleaved_writers_versions_match_write_counts() {
        let s = Arc::new(MetadataStore::in_memory());
        let threads: Vec<_> = (0..100u64)
            .map(|t| {
                let s = s.clone();
                std::thread::spawn(move || {
                    for i in 0..(t % 7 + 1) {
                        s.put("c", &t.to_be_bytes(), Value::Bytes(i.to_be_bytes().to_vec())).unwrap();
                    }
                })
            })
            .collect();
        threads.into_iter().for_each(|t| t.join().unwrap());
        for t in 0..100u64 {
            assert_eq!(s.get("c", &t.to_be_bytes()).unwrap().version, t % 7 + 1);
        }
    }

    #[test]
    fn log_replays_after_reopen_and_drops_torn_tail() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("meta.wal");
        {
            let s = MetadataStore::open(&path, false).unwrap();
            s.put("inodes", b"1", bytes("one")).unwrap();
            s.list_append("regions", b"r", vec![9], 5).unwrap();
            let g = AppendGuard { len: 10, limit: 100 };
            s.cond_list_append("regions", b"r", vec![8], g).unwrap();
            s.commit(&[], &[WriteOp { space: "inodes".into(), key: b"1".to_vec(), mutation: Mutation::Delete }])
                .unwrap();
        }
        // Simulate a torn write at the tail.
        std::fs::OpenOptions::new().append(true).open(&path).unwrap().write_all(&[0, 0, 0, 99, 1]).unwrap();
        let s = MetadataStore::open(&path, false).unwrap();
        assert_eq!(s.read("inodes", b"1").unwrap(), Snapshot { version: 2, value: None });
        let r = s.get("regions", b"r").unwrap();
        assert_eq!(r.version, 2);
        assert_eq!(r.value, Value::List(ListValue { end: 15, items: vec![vec![9], vec![8]] }));
        s.put("inodes", b"2", bytes("two")).unwrap();
        drop(s);
        let s = MetadataStore::open(&path, false).unwrap();
        assert_eq!(s.get("inodes", b"2").unwrap().value, bytes("two"));
    }

    use std::io::Write;
}
