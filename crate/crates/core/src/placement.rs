//! Consistent-hash placement and the coordinator's server registry.
//!
//! Placement is two-level: a cluster ring maps a region to an ordered set of
//! distinct servers, and each server runs its own ring (with a different
//! seed) mapping the same region to one of its backing files.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use parking_lot::Mutex;
use rand::Rng;
use xxhash_rust::xxh64::xxh64;

use crate::error::{Error, Result};
use crate::slice::ServerId;

pub const DEFAULT_VNODES: u32 = 64;
/// Seed of the cluster-level ring.
pub const CLUSTER_SEED: u64 = 0x0511_cef5;
/// Seed of the per-server backing-file ring; differs from the cluster seed so
/// regions that share a server still spread across its files.
pub const BACKING_SEED: u64 = 0xbac4_f11e;

pub fn stable_hash(seed: u64, parts: &[u64]) -> u64 {
    let mut buf = Vec::with_capacity(parts.len() * 8);
    for p in parts {
        buf.extend_from_slice(&p.to_be_bytes());
    }
    xxh64(&buf, seed)
}

/// A consistent-hash ring over integer node ids.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Ring {
    points: Vec<(u64, u64)>,
    seed: u64,
}

impl Ring {
    pub fn new(nodes: impl IntoIterator<Item = u64>, vnodes: u32, seed: u64) -> Ring {
        let mut points: Vec<(u64, u64)> = nodes
            .into_iter()
            .flat_map(|n| (0..vnodes as u64).map(move |v| (stable_hash(seed, &[n, v]), n)))
            .collect();
        points.sort_unstable();
        Ring { points, seed }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Distinct nodes in ring order starting at the successor of `hash`.
    pub fn walk(&self, hash: u64) -> impl Iterator<Item = u64> + '_ {
        let start = self.points.partition_point(|&(h, _)| h < hash);
        let n = self.points.len();
        let mut seen = Vec::new();
        (0..n).filter_map(move |i| {
            let node = self.points[(start + i) % n].1;
            if seen.contains(&node) {
                None
            } else {
                seen.push(node);
                Some(node)
            }
        })
    }

    pub fn locate(&self, parts: &[u64]) -> Option<u64> {
        self.walk(stable_hash(self.seed, parts)).next()
    }

    pub fn count(&self, node: u64) -> usize {
        self.points.iter().filter(|&&(_, n)| n == node).count()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ServerInfo {
    pub id: ServerId,
    pub address: String,
}

/// A snapshot of cluster membership, cached by clients and refreshed when
/// its epoch falls behind.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Membership {
    pub epoch: u64,
    pub servers: Vec<ServerInfo>,
    pub vnodes: u32,
    ring: Ring,
}

impl Membership {
    pub fn new(epoch: u64, servers: Vec<ServerInfo>, vnodes: u32) -> Membership {
        let ring = Ring::new(servers.iter().map(|s| s.id.0), vnodes, CLUSTER_SEED);
        Membership { epoch, servers, vnodes, ring }
    }

    pub fn empty() -> Membership {
        Membership::new(0, Vec::new(), DEFAULT_VNODES)
    }

    pub fn ring(&self) -> &Ring {
        &self.ring
    }

    pub fn address(&self, id: ServerId) -> Option<&str> {
        self.servers.iter().find(|s| s.id == id).map(|s| s.address.as_str())
    }

    /// The `replication` distinct servers responsible for a region, primary
    /// first.
    pub fn place_region(&self, file_id: u64, region_index: u64, replication: usize) -> Result<Vec<ServerId>> {
        if replication == 0 {
            return Err(Error::invalid("replication factor must be positive"));
        }
        if self.servers.len() < replication {
            return Err(Error::InsufficientServers);
        }
        let h = stable_hash(CLUSTER_SEED, &[file_id, region_index]);
        Ok(self.ring.walk(h).take(replication).map(ServerId).collect())
    }
}

/// The coordinator-side view shared by in-process and remote registries.
pub trait Registry: Send + Sync {
    /// Registers a server, reusing `existing` if the server already has an id.
    fn register_server(&self, address: &str, existing: Option<ServerId>) -> Result<(ServerId, u64)>;
    fn heartbeat(&self, id: ServerId) -> Result<u64>;
    fn fetch_membership(&self) -> Result<Membership>;
}

struct Entry {
    address: String,
    last_seen: Instant,
}

struct CoordState {
    epoch: u64,
    servers: BTreeMap<ServerId, Entry>,
    cached: Option<Membership>,
}

/// Single-process coordinator. Its whole state is rebuildable from server
/// re-registration.
pub struct Coordinator {
    state: Mutex<CoordState>,
    vnodes: u32,
    timeout: Option<Duration>,
}

impl Coordinator {
    /// `timeout` is the silence after which a server is declared dead
    /// (missed-heartbeat count × interval); `None` disables expiry.
    pub fn new(vnodes: u32, timeout: Option<Duration>) -> Self {
        Coordinator {
            state: Mutex::new(CoordState { epoch: 0, servers: BTreeMap::new(), cached: None }),
            vnodes,
            timeout,
        }
    }

    fn expire(&self, st: &mut CoordState) {
        let Some(timeout) = self.timeout else { return };
        let now = Instant::now();
        let before = st.servers.len();
        st.servers.retain(|id, e| {
            let alive = now.duration_since(e.last_seen) <= timeout;
            if !alive {
                log::info!("server {id} missed heartbeats, removing");
            }
            alive
        });
        if st.servers.len() != before {
            st.epoch += 1;
            st.cached = None;
        }
    }

    /// Drops a server immediately (operator removal or fault injection).
    pub fn remove_server(&self, id: ServerId) -> Result<u64> {
        let mut st = self.state.lock();
        if st.servers.remove(&id).is_none() {
            return Err(Error::UnknownServer);
        }
        st.epoch += 1;
        st.cached = None;
        Ok(st.epoch)
    }
}

impl Registry for Coordinator {
    fn register_server(&self, address: &str, existing: Option<ServerId>) -> Result<(ServerId, u64)> {
        let mut st = self.state.lock();
        let id = match existing {
            Some(id) => id,
            None => loop {
                let candidate = ServerId(rand::thread_rng().gen_range(1..u64::MAX));
                if !st.servers.contains_key(&candidate) {
                    break candidate;
                }
            },
        };
        st.servers.insert(id, Entry { address: address.to_string(), last_seen: Instant::now() });
        st.epoch += 1;
        st.cached = None;
        Ok((id, st.epoch))
    }

    fn heartbeat(&self, id: ServerId) -> Result<u64> {
        let mut st = self.state.lock();
        self.expire(&mut st);
        match st.servers.get_mut(&id) {
            Some(e) => {
                e.last_seen = Instant::now();
                Ok(st.epoch)
            }
            None => Err(Error::UnknownServer),
        }
    }

    fn fetch_membership(&self) -> Result<Membership> {
        let mut st = self.state.lock();
        self.expire(&mut st);
        if st.cached.is_none() {
            let servers =
                st.servers.iter().map(|(id, e)| ServerInfo { id: *id, address: e.address.clone() }).collect();
            st.cached = Some(Membership::new(st.epoch, servers, self.vnodes));
        }
        Ok(st.cached.clone().unwrap())
    }
}
