//! In-process cluster bootstrap and fault injection.
//!
//! Everything runs in one process: a metadata store, a coordinator and N
//! storage servers, each rooted in its own directory. Clients reach the
//! services through wrappers that can simulate a dead server or dropped
//! request messages. Drops happen before the request is processed, so a
//! dropped call never takes effect.

use std::collections::{HashMap, HashSet};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use parking_lot::{Mutex, RwLock};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use crate::client::{self, Client, ClientOptions, Connector, FsConfig};
use crate::error::{Error, Result};
use crate::meta::{
    AppendGuard, CondAppend, MetaCounters, MetaStore, MetadataStore, ReadStamp, Snapshot, Value, Versioned, WriteOp,
};
use crate::placement::{Coordinator, Registry, ServerInfo, DEFAULT_VNODES};
use crate::slice::{ServerId, SlicePointer};
use crate::storage::{GcReport, InUseList, RegionHint, SliceService, StorageConfig, StorageCounters, StorageServer};

/// Shared fault state consulted by every wrapped call.
pub struct Faults {
    killed: RwLock<HashSet<ServerId>>,
    drops: Mutex<Vec<(String, f64)>>,
    rng: Mutex<StdRng>,
    dropped: Mutex<u64>,
}

impl Faults {
    pub fn new(seed: u64) -> Self {
        Faults {
            killed: RwLock::new(HashSet::new()),
            drops: Mutex::new(Vec::new()),
            rng: Mutex::new(StdRng::seed_from_u64(seed)),
            dropped: Mutex::new(0),
        }
    }

    pub fn kill(&self, id: ServerId) {
        self.killed.write().insert(id);
    }

    pub fn revive(&self, id: ServerId) {
        self.killed.write().remove(&id);
    }

    pub fn is_killed(&self, id: ServerId) -> bool {
        self.killed.read().contains(&id)
    }

    /// Drops request messages whose type matches `pattern` (an exact
    /// message name, a `PREFIX*` glob, or `*`) with the given probability.
    pub fn drop_messages(&self, pattern: &str, probability: f64) {
        let mut d = self.drops.lock();
        d.retain(|(p, _)| p != pattern);
        if probability > 0.0 {
            d.push((pattern.to_string(), probability));
        }
    }

    pub fn clear(&self) {
        self.drops.lock().clear();
        self.killed.write().clear();
    }

    pub fn dropped(&self) -> u64 {
        *self.dropped.lock()
    }

    fn matches(pattern: &str, msg: &str) -> bool {
        match pattern.strip_suffix('*') {
            Some(prefix) => msg.starts_with(prefix),
            None => pattern == msg,
        }
    }

    fn gate(&self, msg: &str) -> Result<()> {
        let p = {
            let d = self.drops.lock();
            d.iter().filter(|(pat, _)| Self::matches(pat, msg)).map(|(_, p)| *p).fold(0.0, f64::max)
        };
        if p > 0.0 && self.rng.lock().gen_bool(p.min(1.0)) {
            *self.dropped.lock() += 1;
            return Err(Error::Unavailable(format!("{msg} dropped")));
        }
        Ok(())
    }
}

/// A storage server as seen through the fault layer.
pub struct FaultySlice {
    id: ServerId,
    inner: Arc<dyn SliceService>,
    faults: Arc<Faults>,
}

impl FaultySlice {
    pub fn new(id: ServerId, inner: Arc<dyn SliceService>, faults: Arc<Faults>) -> Self {
        FaultySlice { id, inner, faults }
    }

    fn gate(&self, msg: &str) -> Result<()> {
        if self.faults.is_killed(self.id) {
            return Err(Error::Unavailable(format!("server {} is down", self.id)));
        }
        self.faults.gate(msg)
    }
}

impl SliceService for FaultySlice {
    fn create_slice(&self, hint: RegionHint, data: &[u8]) -> Result<SlicePointer> {
        self.gate("CREATE_SLICE")?;
        self.inner.create_slice(hint, data)
    }

    fn read_slice(&self, ptr: &SlicePointer) -> Result<Vec<u8>> {
        self.gate("READ_SLICE")?;
        self.inner.read_slice(ptr)
    }

    fn begin_scan(&self, scan_id: u64) -> Result<()> {
        self.gate("BEGIN_SCAN")?;
        self.inner.begin_scan(scan_id)
    }

    fn apply_in_use_list(&self, list: &InUseList) -> Result<GcReport> {
        self.gate("APPLY_IN_USE")?;
        self.inner.apply_in_use_list(list)
    }

    fn collect_backing_file(&self, name: &str) -> Result<u64> {
        self.gate("COLLECT")?;
        self.inner.collect_backing_file(name)
    }

    fn counters(&self) -> Result<StorageCounters> {
        self.gate("COUNTERS")?;
        self.inner.counters()
    }
}

/// The metadata store as seen through the fault layer.
pub struct FaultyMeta {
    inner: Arc<dyn MetaStore>,
    faults: Arc<Faults>,
}

impl FaultyMeta {
    pub fn new(inner: Arc<dyn MetaStore>, faults: Arc<Faults>) -> Self {
        FaultyMeta { inner, faults }
    }
}

impl MetaStore for FaultyMeta {
    fn read(&self, space: &str, key: &[u8]) -> Result<Snapshot> {
        self.faults.gate("MDS_GET")?;
        self.inner.read(space, key)
    }

    fn put(&self, space: &str, key: &[u8], value: Value) -> Result<u64> {
        self.faults.gate("MDS_PUT")?;
        self.inner.put(space, key, value)
    }

    fn list_append(&self, space: &str, key: &[u8], item: Vec<u8>, end_at_least: u64) -> Result<u64> {
        self.faults.gate("MDS_LIST_APPEND")?;
        self.inner.list_append(space, key, item, end_at_least)
    }

    fn cond_list_append(&self, space: &str, key: &[u8], item: Vec<u8>, guard: AppendGuard) -> Result<CondAppend> {
        self.faults.gate("MDS_COND_APPEND")?;
        self.inner.cond_list_append(space, key, item, guard)
    }

    fn commit(&self, reads: &[ReadStamp], writes: &[WriteOp]) -> Result<Vec<u64>> {
        self.faults.gate("MDS_TXN_COMMIT")?;
        self.inner.commit(reads, writes)
    }

    fn scan(&self, space: &str) -> Result<Vec<(Vec<u8>, Versioned)>> {
        self.faults.gate("MDS_SCAN")?;
        self.inner.scan(space)
    }

    fn counters(&self) -> MetaCounters {
        self.inner.counters()
    }
}

/// Connects to in-process servers by id.
#[derive(Default)]
pub struct LocalConnector {
    services: RwLock<HashMap<ServerId, Arc<dyn SliceService>>>,
}

impl LocalConnector {
    pub fn insert(&self, id: ServerId, svc: Arc<dyn SliceService>) {
        self.services.write().insert(id, svc);
    }
}

impl Connector for LocalConnector {
    fn connect(&self, server: &ServerInfo) -> Result<Arc<dyn SliceService>> {
        self.services.read().get(&server.id).cloned().ok_or(Error::UnknownServer)
    }
}

#[derive(Debug, Clone)]
pub struct ClusterConfig {
    pub servers: usize,
    pub fs: FsConfig,
    pub storage: StorageConfig,
    pub vnodes: u32,
    /// Persist metadata to a log under the cluster directory.
    pub durable_meta: bool,
    pub fault_seed: u64,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        ClusterConfig {
            servers: 4,
            fs: FsConfig::default(),
            storage: StorageConfig::default(),
            vnodes: DEFAULT_VNODES,
            durable_meta: false,
            fault_seed: 0x5eed,
        }
    }
}

pub struct LocalCluster {
    _tmp: Option<tempfile::TempDir>,
    root: PathBuf,
    store: Arc<MetadataStore>,
    meta: Arc<dyn MetaStore>,
    coord: Arc<Coordinator>,
    servers: Vec<Arc<StorageServer>>,
    faults: Arc<Faults>,
    connector: Arc<LocalConnector>,
}

impl LocalCluster {
    /// A fresh, formatted cluster in a temporary directory.
    pub fn start(cfg: ClusterConfig) -> Result<LocalCluster> {
        let tmp = tempfile::Builder::new().prefix("slicefs-").tempdir()?;
        let root = tmp.path().to_path_buf();
        let mut c = Self::open(&root, cfg.clone())?;
        client::format(&c.meta, cfg.fs)?;
        c._tmp = Some(tmp);
        Ok(c)
    }

    /// Opens (creating as needed) a cluster rooted at `root`. Servers keep
    /// their persisted ids across restarts. The filesystem is not formatted.
    pub fn open(root: &Path, cfg: ClusterConfig) -> Result<LocalCluster> {
        std::fs::create_dir_all(root)?;
        let store = Arc::new(if cfg.durable_meta {
            MetadataStore::open(&root.join("meta.log"), false)?
        } else {
            MetadataStore::in_memory()
        });
        let faults = Arc::new(Faults::new(cfg.fault_seed));
        let meta: Arc<dyn MetaStore> = Arc::new(FaultyMeta::new(store.clone(), faults.clone()));
        let coord = Arc::new(Coordinator::new(cfg.vnodes, None));
        let connector = Arc::new(LocalConnector::default());
        let mut servers = Vec::with_capacity(cfg.servers);
        for i in 0..cfg.servers {
            let dir = root.join(format!("storage-{i}"));
            let server = Arc::new(StorageServer::open(&dir, cfg.storage.clone())?);
            let (id, _) = coord.register_server(&format!("local:{i}"), server.id())?;
            if server.id() != Some(id) {
                server.set_id(id)?;
            }
            connector.insert(id, Arc::new(FaultySlice::new(id, server.clone(), faults.clone())));
            servers.push(server);
        }
        Ok(LocalCluster { _tmp: None, root: root.to_path_buf(), store, meta, coord, servers, faults, connector })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn client(&self, opts: ClientOptions) -> Result<Arc<Client>> {
        Client::new(self.meta.clone(), self.coord.clone(), self.connector.clone(), opts)
    }

    pub fn default_client(&self) -> Result<Arc<Client>> {
        self.client(ClientOptions::default())
    }

    /// The metadata store behind the fault layer, for direct inspection.
    pub fn store(&self) -> &Arc<MetadataStore> {
        &self.store
    }

    pub fn meta(&self) -> &Arc<dyn MetaStore> {
        &self.meta
    }

    pub fn coordinator(&self) -> &Arc<Coordinator> {
        &self.coord
    }

    pub fn faults(&self) -> &Arc<Faults> {
        &self.faults
    }

    pub fn servers(&self) -> &[Arc<StorageServer>] {
        &self.servers
    }

    pub fn server_ids(&self) -> Vec<ServerId> {
        self.servers.iter().filter_map(|s| s.id()).collect()
    }

    pub fn server(&self, id: ServerId) -> Option<&Arc<StorageServer>> {
        self.servers.iter().find(|s| s.id() == Some(id))
    }

    /// Makes a server unreachable. Its data stays on disk and it stays in
    /// the membership until the coordinator notices.
    pub fn kill_server(&self, id: ServerId) {
        self.faults.kill(id);
    }

    pub fn revive_server(&self, id: ServerId) {
        self.faults.revive(id);
    }

    pub fn drop_messages(&self, pattern: &str, probability: f64) {
        self.faults.drop_messages(pattern, probability);
    }

    /// Storage counters summed over every server.
    pub fn storage_counters(&self) -> StorageCounters {
        let mut t = StorageCounters::default();
        for s in &self.servers {
            let c = s.counters().expect("local counters");
            t.bytes_written += c.bytes_written;
            t.bytes_read += c.bytes_read;
            t.slices_created += c.slices_created;
            t.slices_read += c.slices_read;
            t.gc_bytes_rewritten += c.gc_bytes_rewritten;
            t.gc_bytes_reclaimed += c.gc_bytes_reclaimed;
        }
        t
    }

    pub fn physical_bytes(&self) -> Result<u64> {
        self.servers.iter().map(|s| s.physical_bytes()).sum()
    }
}
