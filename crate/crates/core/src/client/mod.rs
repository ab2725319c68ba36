//! Client library: namespace, file handles, the slicing calls and the
//! replicated data path.
//!
//! Every operation runs inside a metadata transaction. Data is written to
//! storage servers first and published by the metadata commit, so an aborted
//! transaction leaves only unreferenced slices behind for the collector.

mod file;
pub mod layout;
pub(crate) mod ops;

pub use file::{File, OpenFlags, Stat, Yanked};

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use parking_lot::{Mutex, RwLock};
use rand::Rng;

use crate::codec::{Decoder, Encoder, FORMAT_V1};
use crate::error::{Error, Result};
use crate::meta::{MetaStore, Value, SPACE_CONFIG, SPACE_INODES, SPACE_PATHS};
use crate::placement::{Membership, Registry, ServerInfo};
use crate::retry::Transaction;
use crate::slice::{ServerId, SlicePointer};
use crate::storage::{RegionHint, SliceService, MIB};
use layout::{encode_path_record, inode_key, Inode, KIND_DIR, ROOT_INODE};

/// Largest slice a client asks a server to create.
pub const MAX_SLICE: u64 = 64 * MIB;
pub const DEFAULT_REGION_SIZE: u64 = 64 * MIB;
const CONFIG_KEY: &[u8] = b"fs";

/// Filesystem-wide settings written once at format time.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FsConfig {
    pub region_size: u64,
    pub replication: u8,
}

impl Default for FsConfig {
    fn default() -> Self {
        FsConfig { region_size: DEFAULT_REGION_SIZE, replication: 1 }
    }
}

impl FsConfig {
    pub fn encode(&self) -> Vec<u8> {
        let mut e = Encoder::with_version(FORMAT_V1);
        e.u64(self.region_size).u8(self.replication);
        e.finish()
    }

    pub fn decode(b: &[u8]) -> Result<FsConfig> {
        let mut d = Decoder::versioned(b, FORMAT_V1)?;
        let c = FsConfig { region_size: d.u64()?, replication: d.u8()? };
        d.finish()?;
        Ok(c)
    }
}

/// Per-client knobs.
#[derive(Debug, Clone)]
pub struct ClientOptions {
    /// Replication for files this client creates; defaults to the filesystem's.
    pub replication: Option<u8>,
    pub uid: u32,
    pub gid: u32,
    /// Replays allowed before a transaction gives up with `RetryExhausted`.
    pub retry_cap: u32,
    /// Fresh placements tried before a write fails with `ReplicaWriteFailed`.
    pub write_attempts: u32,
}

impl Default for ClientOptions {
    fn default() -> Self {
        ClientOptions { replication: None, uid: 0, gid: 0, retry_cap: 16, write_attempts: 4 }
    }
}

/// Resolves a registered server to something that can serve slices.
pub trait Connector: Send + Sync {
    fn connect(&self, server: &ServerInfo) -> Result<Arc<dyn SliceService>>;
}

/// Data bytes moved by this client, as opposed to metadata traffic.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ClientCounters {
    pub bytes_sent: u64,
    pub bytes_fetched: u64,
    pub slices_created: u64,
    pub slices_fetched: u64,
}

#[derive(Default)]
struct AtomicClientCounters {
    bytes_sent: AtomicU64,
    bytes_fetched: AtomicU64,
    slices_created: AtomicU64,
    slices_fetched: AtomicU64,
}

pub struct Client {
    meta: Arc<dyn MetaStore>,
    registry: Arc<dyn Registry>,
    connector: Arc<dyn Connector>,
    membership: RwLock<Arc<Membership>>,
    conns: Mutex<HashMap<ServerId, Arc<dyn SliceService>>>,
    latency: Mutex<HashMap<ServerId, f64>>,
    fs: FsConfig,
    opts: ClientOptions,
    counters: AtomicClientCounters,
}

pub(crate) fn now_millis() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis() as u64)
}

/// Writes the filesystem config and root directory into an empty store.
pub fn format(meta: &Arc<dyn MetaStore>, config: FsConfig) -> Result<()> {
    if config.region_size == 0 || config.replication == 0 {
        return Err(Error::invalid("region size and replication must be positive"));
    }
    let mut t = crate::meta::begin(meta);
    if t.get(SPACE_CONFIG, CONFIG_KEY)?.is_some() {
        return Err(Error::Exists);
    }
    let root = Inode {
        id: ROOT_INODE,
        kind: KIND_DIR,
        link_count: 1,
        mtime: now_millis(),
        mode: 0o777,
        uid: 0,
        gid: 0,
        highest_region: 0,
        region_size: config.region_size,
        replication: config.replication,
    };
    t.put(SPACE_CONFIG, CONFIG_KEY, Value::Bytes(config.encode()))?;
    t.put(SPACE_INODES, &inode_key(ROOT_INODE), Value::Bytes(root.encode()))?;
    t.put(SPACE_PATHS, b"/", Value::Bytes(encode_path_record(ROOT_INODE)))?;
    t.commit()
}

pub fn read_config(meta: &dyn MetaStore) -> Result<FsConfig> {
    match meta.get(SPACE_CONFIG, CONFIG_KEY) {
        Ok(v) => FsConfig::decode(v.value.as_bytes()?),
        Err(Error::NotFound) => Err(Error::invalid("filesystem is not formatted")),
        Err(e) => Err(e),
    }
}

impl Client {
    pub fn new(
        meta: Arc<dyn MetaStore>,
        registry: Arc<dyn Registry>,
        connector: Arc<dyn Connector>,
        opts: ClientOptions,
    ) -> Result<Arc<Client>> {
        let fs = read_config(meta.as_ref())?;
        let membership = registry.fetch_membership()?;
        Ok(Arc::new(Client {
            meta,
            registry,
            connector,
            membership: RwLock::new(Arc::new(membership)),
            conns: Mutex::new(HashMap::new()),
            latency: Mutex::new(HashMap::new()),
            fs,
            opts,
            counters: AtomicClientCounters::default(),
        }))
    }

    pub fn meta(&self) -> &Arc<dyn MetaStore> {
        &self.meta
    }

    pub fn fs_config(&self) -> FsConfig {
        self.fs
    }

    pub fn options(&self) -> &ClientOptions {
        &self.opts
    }

    pub fn membership(&self) -> Arc<Membership> {
        self.membership.read().clone()
    }

    /// Re-fetches membership; connections to servers whose address changed
    /// or that left are dropped.
    pub fn refresh_membership(&self) -> Result<Arc<Membership>> {
        let m = Arc::new(self.registry.fetch_membership()?);
        let mut cur = self.membership.write();
        if m.epoch != cur.epoch {
            let mut conns = self.conns.lock();
            conns.retain(|id, _| m.address(*id).is_some() && m.address(*id) == cur.address(*id));
            *cur = m.clone();
        }
        Ok(cur.clone())
    }

    pub fn counters(&self) -> ClientCounters {
        let c = &self.counters;
        ClientCounters {
            bytes_sent: c.bytes_sent.load(Ordering::Relaxed),
            bytes_fetched: c.bytes_fetched.load(Ordering::Relaxed),
            slices_created: c.slices_created.load(Ordering::Relaxed),
            slices_fetched: c.slices_fetched.load(Ordering::Relaxed),
        }
    }

    pub fn service(&self, id: ServerId) -> Result<Arc<dyn SliceService>> {
        if let Some(s) = self.conns.lock().get(&id) {
            return Ok(s.clone());
        }
        let m = self.membership();
        let info = match m.servers.iter().find(|s| s.id == id) {
            Some(i) => i.clone(),
            None => self
                .refresh_membership()?
                .servers
                .iter()
                .find(|s| s.id == id)
                .cloned()
                .ok_or(Error::UnknownServer)?,
        };
        let svc = self.connector.connect(&info)?;
        self.conns.lock().insert(id, svc.clone());
        Ok(svc)
    }

    /// Creates `replication` copies of `data` on the servers responsible for
    /// the hinted region. A failure re-places the whole set on fresh
    /// membership; partial copies are left for the collector.
    pub fn store_slice(&self, hint: RegionHint, data: &[u8], replication: usize) -> Result<Vec<SlicePointer>> {
        let mut last_err = Error::ReplicaWriteFailed;
        for attempt in 0..self.opts.write_attempts.max(1) {
            let m = if attempt == 0 { self.membership() } else { self.refresh_membership()? };
            let servers = m.place_region(hint.file_id, hint.region_index, replication)?;
            let mut ptrs = Vec::with_capacity(servers.len());
            let mut failed = None;
            for id in servers {
                match self.service(id).and_then(|s| s.create_slice(hint, data)) {
                    Ok(p) => ptrs.push(p),
                    Err(e @ (Error::OutOfSpace | Error::InvalidArgument(_))) => return Err(e),
                    Err(e) => {
                        log::debug!("create on {id} failed: {e}");
                        failed = Some(e);
                        break;
                    }
                }
            }
            match failed {
                None => {
                    let c = &self.counters;
                    c.bytes_sent.fetch_add(data.len() as u64 * ptrs.len() as u64, Ordering::Relaxed);
                    c.slices_created.fetch_add(ptrs.len() as u64, Ordering::Relaxed);
                    return Ok(ptrs);
                }
                Some(e) => last_err = e,
            }
            if attempt > 0 {
                std::thread::sleep(Duration::from_millis(2 << attempt.min(6)));
            }
        }
        log::warn!("giving up on slice write: {last_err}");
        Err(Error::ReplicaWriteFailed)
    }

    fn replica_order(&self, replicas: &[SlicePointer]) -> Vec<usize> {
        let lat = self.latency.lock();
        let mut rng = rand::thread_rng();
        let mut keyed: Vec<(f64, u32, usize)> = replicas
            .iter()
            .enumerate()
            .map(|(i, p)| (lat.get(&p.server_id).copied().unwrap_or(0.0), rng.gen(), i))
            .collect();
        keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        keyed.into_iter().map(|k| k.2).collect()
    }

    /// Reads one extent from the fastest replica that has it. Transient
    /// failures get a few rounds before the read fails.
    pub fn fetch(&self, replicas: &[SlicePointer]) -> Result<Vec<u8>> {
        const ROUNDS: u32 = 4;
        let mut last = None;
        for round in 0..ROUNDS {
            let mut transient = false;
            for i in self.replica_order(replicas) {
                let p = &replicas[i];
                let start = Instant::now();
                match self.service(p.server_id).and_then(|s| s.read_slice(p)) {
                    Ok(data) => {
                        let us = start.elapsed().as_secs_f64() * 1e6;
                        let mut lat = self.latency.lock();
                        let e = lat.entry(p.server_id).or_insert(us);
                        *e = 0.8 * *e + 0.2 * us;
                        drop(lat);
                        self.counters.bytes_fetched.fetch_add(data.len() as u64, Ordering::Relaxed);
                        self.counters.slices_fetched.fetch_add(1, Ordering::Relaxed);
                        return Ok(data);
                    }
                    Err(e) => {
                        log::debug!("read from {} failed: {e}", p.server_id);
                        transient |= e.is_transient();
                        self.latency.lock().insert(p.server_id, f64::INFINITY);
                        last = Some(e);
                    }
                }
            }
            if !transient {
                break;
            }
            std::thread::sleep(Duration::from_millis(1 << round));
            let _ = self.refresh_membership();
            // Give failed servers another chance on the next round.
            self.latency.lock().retain(|_, v| v.is_finite());
        }
        Err(Error::Io(format!("all replicas failed: {}", last.map_or("no replicas".into(), |e| e.to_string()))))
    }

    /// Starts an explicit transaction.
    pub fn begin(self: &Arc<Self>) -> Transaction {
        Transaction::new(self.clone(), false)
    }

    pub(crate) fn replication_for_new_files(&self) -> u8 {
        self.opts.replication.unwrap_or(self.fs.replication)
    }
}

impl std::fmt::Debug for Client {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Client").field("fs", &self.fs).field("opts", &self.opts).finish()
    }
}
