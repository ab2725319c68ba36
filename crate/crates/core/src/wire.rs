//! Length-prefixed binary protocol over TCP.
//!
//! Every frame is `u32 length | u8 type | payload`, big-endian, where the
//! length covers the type byte and payload. Responses use type `RESP_OK`
//! with the call's payload or `RESP_ERR` with `u16 code | str16 message`.
//! One request is outstanding per connection; clients pool connections.

use std::collections::HashMap;
use std::io::{BufReader, BufWriter, Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::Duration;

use parking_lot::Mutex;

use crate::client::Connector;
use crate::codec::{Decoder, Encoder};
use crate::error::{Error, Result};
use crate::meta::{
    AppendGuard, CondAppend, MetaCounters, MetaStore, Mutation, ReadStamp, Snapshot, Value, Versioned, WriteOp,
};
use crate::placement::{Membership, Registry, ServerInfo};
use crate::slice::{ServerId, SlicePointer};
use crate::storage::{GcReport, InUseList, RegionHint, SliceService, StorageCounters};

pub const MAX_FRAME: usize = 256 << 20;

pub mod msg {
    pub const CREATE_SLICE: u8 = 1;
    pub const READ_SLICE: u8 = 2;
    pub const BEGIN_SCAN: u8 = 3;
    pub const APPLY_IN_USE: u8 = 4;
    pub const COLLECT: u8 = 5;
    pub const COUNTERS: u8 = 6;

    pub const MDS_GET: u8 = 16;
    pub const MDS_PUT: u8 = 17;
    pub const MDS_LIST_APPEND: u8 = 18;
    pub const MDS_COND_APPEND: u8 = 19;
    pub const MDS_TXN_COMMIT: u8 = 20;
    pub const MDS_SCAN: u8 = 21;
    pub const MDS_COUNTERS: u8 = 22;

    pub const COORD_REGISTER: u8 = 32;
    pub const COORD_HEARTBEAT: u8 = 33;
    pub const COORD_MEMBERSHIP: u8 = 34;

    pub const RESP_OK: u8 = 0x80;
    pub const RESP_ERR: u8 = 0x81;
}

pub fn write_frame(w: &mut impl Write, ty: u8, payload: &[u8]) -> std::io::Result<()> {
    let len = u32::try_from(payload.len() + 1).map_err(|_| std::io::Error::other("frame too large"))?;
    w.write_all(&len.to_be_bytes())?;
    w.write_all(&[ty])?;
    w.write_all(payload)?;
    w.flush()
}

/// Reads one frame. `Ok(None)` on clean EOF before a frame starts.
pub fn read_frame(r: &mut impl Read) -> std::io::Result<Option<(u8, Vec<u8>)>> {
    let mut len = [0u8; 4];
    match r.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e),
    }
    let len = u32::from_be_bytes(len) as usize;
    if len == 0 || len > MAX_FRAME {
        return Err(std::io::Error::new(std::io::ErrorKind::InvalidData, format!("bad frame length {len}")));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    let ty = buf[0];
    buf.remove(0);
    Ok(Some((ty, buf)))
}

fn encode_error(e: &Error) -> Vec<u8> {
    let mut enc = Encoder::new();
    let msg = match e {
        Error::InvalidArgument(m)
        | Error::Io(m)
        | Error::Unavailable(m)
        | Error::Corrupt(m)
        | Error::Protocol(m)
        | Error::VerificationFailed(m) => m.clone(),
        _ => String::new(),
    };
    enc.u16(e.code()).str16(&msg);
    enc.finish()
}

fn decode_error(payload: &[u8]) -> Error {
    let mut d = Decoder::new(payload);
    match (d.u16(), d.str16()) {
        (Ok(code), Ok(msg)) => Error::from_code(code, msg),
        _ => Error::Protocol("malformed error frame".into()),
    }
}

/// Server-side dispatch for one message type.
pub trait Handler: Send + Sync + 'static {
    fn handle(&self, ty: u8, payload: &[u8]) -> Result<Vec<u8>>;
}

/// A running accept loop. Dropping the handle stops accepting; open
/// connections finish their current request and close.
pub struct ServerHandle {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    thread: Option<JoinHandle<()>>,
}

impl ServerHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn shutdown(&mut self) {
        if self.stop.swap(true, Ordering::SeqCst) {
            return;
        }
        let _ = TcpStream::connect_timeout(&self.addr, Duration::from_secs(1));
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        self.shutdown();
    }
}

pub fn serve(addr: impl ToSocketAddrs, handler: Arc<dyn Handler>) -> Result<ServerHandle> {
    let listener = TcpListener::bind(addr)?;
    let addr = listener.local_addr()?;
    let stop = Arc::new(AtomicBool::new(false));
    let stop2 = stop.clone();
    let thread = thread::Builder::new().name(format!("accept-{addr}")).spawn(move || {
        for conn in listener.incoming() {
            if stop2.load(Ordering::SeqCst) {
                break;
            }
            match conn {
                Ok(stream) => {
                    let handler = handler.clone();
                    let stop = stop2.clone();
                    let _ = thread::Builder::new().name("conn".into()).spawn(move || {
                        if let Err(e) = serve_conn(stream, handler.as_ref(), &stop) {
                            log::debug!("connection closed: {e}");
                        }
                    });
                }
                Err(e) => log::warn!("accept failed: {e}"),
            }
        }
    })?;
    Ok(ServerHandle { addr, stop, thread: Some(thread) })
}

fn serve_conn(stream: TcpStream, handler: &dyn Handler, stop: &AtomicBool) -> std::io::Result<()> {
    stream.set_nodelay(true)?;
    let mut r = BufReader::new(stream.try_clone()?);
    let mut w = BufWriter::new(stream);
    while let Some((ty, payload)) = read_frame(&mut r)? {
        match handler.handle(ty, &payload) {
            Ok(out) => write_frame(&mut w, msg::RESP_OK, &out)?,
            Err(e) => write_frame(&mut w, msg::RESP_ERR, &encode_error(&e))?,
        }
        if stop.load(Ordering::SeqCst) {
            break;
        }
    }
    let _ = w.get_ref().shutdown(Shutdown::Both);
    Ok(())
}

/// A pool of connections to one address.
pub struct Conn {
    addr: String,
    pool: Mutex<Vec<TcpStream>>,
    timeout: Duration,
}

impl Conn {
    pub fn new(addr: impl Into<String>) -> Conn {
        Conn { addr: addr.into(), pool: Mutex::new(Vec::new()), timeout: Duration::from_secs(60) }
    }

    pub fn addr(&self) -> &str {
        &self.addr
    }

    fn dial(&self) -> Result<TcpStream> {
        let unavailable = |e: std::io::Error| Error::Unavailable(format!("{}: {e}", self.addr));
        let s = TcpStream::connect(&self.addr).map_err(unavailable)?;
        s.set_nodelay(true).map_err(unavailable)?;
        s.set_read_timeout(Some(self.timeout)).map_err(unavailable)?;
        Ok(s)
    }

    /// Sends one request and waits for its response. Transport failures
    /// surface as `Unavailable`.
    pub fn call(&self, ty: u8, payload: &[u8]) -> Result<Vec<u8>> {
        let pooled = self.pool.lock().pop();
        let mut stream = match pooled {
            Some(s) => s,
            None => self.dial()?,
        };
        let res = (|| -> std::io::Result<Option<(u8, Vec<u8>)>> {
            let mut w = BufWriter::new(&stream);
            write_frame(&mut w, ty, payload)?;
            drop(w);
            read_frame(&mut stream)
        })();
        match res {
            Ok(Some((msg::RESP_OK, out))) => {
                self.pool.lock().push(stream);
                Ok(out)
            }
            Ok(Some((msg::RESP_ERR, out))) => {
                self.pool.lock().push(stream);
                Err(decode_error(&out))
            }
            Ok(Some((t, _))) => Err(Error::Protocol(format!("unexpected response type {t}"))),
            Ok(None) => Err(Error::Unavailable(format!("{}: connection closed", self.addr))),
            Err(e) => Err(Error::Unavailable(format!("{}: {e}", self.addr))),
        }
    }
}

fn finish(e: Encoder) -> Vec<u8> {
    e.finish()
}

// ---- storage ----

fn encode_counters(c: &StorageCounters) -> Vec<u8> {
    let mut e = Encoder::new();
    e.u64(c.bytes_written)
        .u64(c.bytes_read)
        .u64(c.slices_created)
        .u64(c.slices_read)
        .u64(c.gc_bytes_rewritten)
        .u64(c.gc_bytes_reclaimed);
    finish(e)
}

fn decode_counters(b: &[u8]) -> Result<StorageCounters> {
    let mut d = Decoder::new(b);
    let c = StorageCounters {
        bytes_written: d.u64()?,
        bytes_read: d.u64()?,
        slices_created: d.u64()?,
        slices_read: d.u64()?,
        gc_bytes_rewritten: d.u64()?,
        gc_bytes_reclaimed: d.u64()?,
    };
    d.finish()?;
    Ok(c)
}

pub struct StorageHandler(pub Arc<dyn SliceService>);

impl Handler for StorageHandler {
    fn handle(&self, ty: u8, payload: &[u8]) -> Result<Vec<u8>> {
        let svc = &self.0;
        let mut d = Decoder::new(payload);
        let mut e = Encoder::new();
        match ty {
            msg::CREATE_SLICE => {
                let hint = RegionHint { file_id: d.u64()?, region_index: d.u64()? };
                let data = d.rest();
                svc.create_slice(hint, data)?.encode_into(&mut e);
            }
            msg::READ_SLICE => {
                let ptr = SlicePointer::decode_from(&mut d)?;
                d.finish()?;
                return svc.read_slice(&ptr);
            }
            msg::BEGIN_SCAN => {
                let scan = d.u64()?;
                d.finish()?;
                svc.begin_scan(scan)?;
            }
            msg::APPLY_IN_USE => {
                let server = ServerId(d.u64()?);
                let list = InUseList::decode(server, d.rest())?;
                let report = svc.apply_in_use_list(&list)?;
                e.u32(report.candidates.len() as u32);
                for (name, n) in &report.candidates {
                    e.str16(name).u64(*n);
                }
            }
            msg::COLLECT => {
                let name = d.str16()?;
                d.finish()?;
                e.u64(svc.collect_backing_file(&name)?);
            }
            msg::COUNTERS => return Ok(encode_counters(&svc.counters()?)),
            t => return Err(Error::Protocol(format!("storage: unknown message {t}"))),
        }
        Ok(finish(e))
    }
}

/// A storage server reached over TCP.
pub struct RemoteSlice {
    conn: Conn,
}

impl RemoteSlice {
    pub fn new(addr: impl Into<String>) -> RemoteSlice {
        RemoteSlice { conn: Conn::new(addr) }
    }
}

impl SliceService for RemoteSlice {
    fn create_slice(&self, hint: RegionHint, data: &[u8]) -> Result<SlicePointer> {
        let mut e = Encoder::new();
        e.u64(hint.file_id).u64(hint.region_index).raw(data);
        let out = self.conn.call(msg::CREATE_SLICE, &e.finish())?;
        let mut d = Decoder::new(&out);
        let p = SlicePointer::decode_from(&mut d)?;
        d.finish()?;
        Ok(p)
    }

    fn read_slice(&self, ptr: &SlicePointer) -> Result<Vec<u8>> {
        let mut e = Encoder::new();
        ptr.encode_into(&mut e);
        self.conn.call(msg::READ_SLICE, &e.finish())
    }

    fn begin_scan(&self, scan_id: u64) -> Result<()> {
        let mut e = Encoder::new();
        e.u64(scan_id);
        self.conn.call(msg::BEGIN_SCAN, &e.finish()).map(|_| ())
    }

    fn apply_in_use_list(&self, list: &InUseList) -> Result<GcReport> {
        let mut e = Encoder::new();
        e.u64(list.server_id.0).raw(&list.encode());
        let out = self.conn.call(msg::APPLY_IN_USE, &e.finish())?;
        let mut d = Decoder::new(&out);
        let n = d.u32()?;
        let mut candidates = Vec::with_capacity(n.min(1024) as usize);
        for _ in 0..n {
            candidates.push((d.str16()?, d.u64()?));
        }
        d.finish()?;
        Ok(GcReport { candidates })
    }

    fn collect_backing_file(&self, name: &str) -> Result<u64> {
        let mut e = Encoder::new();
        e.str16(name);
        let out = self.conn.call(msg::COLLECT, &e.finish())?;
        let mut d = Decoder::new(&out);
        let n = d.u64()?;
        d.finish()?;
        Ok(n)
    }

    fn counters(&self) -> Result<StorageCounters> {
        decode_counters(&self.conn.call(msg::COUNTERS, &[])?)
    }
}

/// Connects to storage servers at their registered addresses, one pooled
/// connection set per server.
#[derive(Default)]
pub struct TcpConnector {
    cache: Mutex<HashMap<(ServerId, String), Arc<RemoteSlice>>>,
}

impl Connector for TcpConnector {
    fn connect(&self, server: &ServerInfo) -> Result<Arc<dyn SliceService>> {
        let mut cache = self.cache.lock();
        let svc = cache
            .entry((server.id, server.address.clone()))
            .or_insert_with(|| Arc::new(RemoteSlice::new(server.address.clone())))
            .clone();
        Ok(svc)
    }
}

// ---- metadata ----

fn encode_meta_counters(c: &MetaCounters) -> Vec<u8> {
    let mut e = Encoder::new();
    e.u64(c.gets).u64(c.puts).u64(c.appends).u64(c.commits).u64(c.conflicts).u64(c.scans);
    finish(e)
}

fn decode_meta_counters(b: &[u8]) -> Result<MetaCounters> {
    let mut d = Decoder::new(b);
    let c = MetaCounters {
        gets: d.u64()?,
        puts: d.u64()?,
        appends: d.u64()?,
        commits: d.u64()?,
        conflicts: d.u64()?,
        scans: d.u64()?,
    };
    d.finish()?;
    Ok(c)
}

fn encode_snapshot(e: &mut Encoder, s: &Snapshot) {
    e.u64(s.version);
    match &s.value {
        Some(v) => {
            e.u8(1);
            v.encode_into(e);
        }
        None => {
            e.u8(0);
        }
    }
}

fn decode_snapshot(d: &mut Decoder<'_>) -> Result<Snapshot> {
    let version = d.u64()?;
    let value = match d.u8()? {
        0 => None,
        1 => Some(Value::decode_from(d)?),
        t => return Err(Error::corrupt(format!("bad snapshot tag {t}"))),
    };
    Ok(Snapshot { version, value })
}

pub struct MetaHandler(pub Arc<dyn MetaStore>);

impl Handler for MetaHandler {
    fn handle(&self, ty: u8, payload: &[u8]) -> Result<Vec<u8>> {
        let store = &self.0;
        let mut d = Decoder::new(payload);
        let mut e = Encoder::new();
        match ty {
            msg::MDS_GET => {
                let (space, key) = (d.str16()?, d.bytes32()?);
                encode_snapshot(&mut e, &store.read(&space, key)?);
            }
            msg::MDS_PUT => {
                let (space, key) = (d.str16()?, d.bytes32()?.to_vec());
                let v = Value::decode_from(&mut d)?;
                e.u64(store.put(&space, &key, v)?);
            }
            msg::MDS_LIST_APPEND => {
                let (space, key, item) = (d.str16()?, d.bytes32()?.to_vec(), d.bytes32()?.to_vec());
                let end = d.u64()?;
                e.u64(store.list_append(&space, &key, item, end)?);
            }
            msg::MDS_COND_APPEND => {
                let (space, key, item) = (d.str16()?, d.bytes32()?.to_vec(), d.bytes32()?.to_vec());
                let guard = AppendGuard { len: d.u64()?, limit: d.u64()? };
                match store.cond_list_append(&space, &key, item, guard)? {
                    CondAppend::Applied { version, prev_end } => {
                        e.u8(0).u64(version).u64(prev_end);
                    }
                    CondAppend::GuardFailed => {
                        e.u8(1);
                    }
                }
            }
            msg::MDS_TXN_COMMIT => {
                let nr = d.u32()?;
                let mut reads = Vec::with_capacity(nr.min(4096) as usize);
                for _ in 0..nr {
                    reads.push(ReadStamp { space: d.str16()?, key: d.bytes32()?.to_vec(), version: d.u64()? });
                }
                let nw = d.u32()?;
                let mut writes = Vec::with_capacity(nw.min(4096) as usize);
                for _ in 0..nw {
                    let (space, key) = (d.str16()?, d.bytes32()?.to_vec());
                    writes.push(WriteOp { space, key, mutation: Mutation::decode_from(&mut d)? });
                }
                let landed = store.commit(&reads, &writes)?;
                e.u32(landed.len() as u32);
                for x in landed {
                    e.u64(x);
                }
            }
            msg::MDS_SCAN => {
                let space = d.str16()?;
                let rows = store.scan(&space)?;
                e.u32(rows.len() as u32);
                for (k, v) in rows {
                    e.bytes32(&k).u64(v.version);
                    v.value.encode_into(&mut e);
                }
            }
            msg::MDS_COUNTERS => return Ok(encode_meta_counters(&store.counters())),
            t => return Err(Error::Protocol(format!("meta: unknown message {t}"))),
        }
        d.finish()?;
        Ok(finish(e))
    }
}

/// The metadata store reached over TCP.
pub struct RemoteMeta {
    conn: Conn,
}

impl RemoteMeta {
    pub fn new(addr: impl Into<String>) -> RemoteMeta {
        RemoteMeta { conn: Conn::new(addr) }
    }
}

impl MetaStore for RemoteMeta {
    fn read(&self, space: &str, key: &[u8]) -> Result<Snapshot> {
        let mut e = Encoder::new();
        e.str16(space).bytes32(key);
        let out = self.conn.call(msg::MDS_GET, &e.finish())?;
        let mut d = Decoder::new(&out);
        let s = decode_snapshot(&mut d)?;
        d.finish()?;
        Ok(s)
    }

    fn put(&self, space: &str, key: &[u8], value: Value) -> Result<u64> {
        let mut e = Encoder::new();
        e.str16(space).bytes32(key);
        value.encode_into(&mut e);
        let out = self.conn.call(msg::MDS_PUT, &e.finish())?;
        Decoder::new(&out).u64()
    }

    fn list_append(&self, space: &str, key: &[u8], item: Vec<u8>, end_at_least: u64) -> Result<u64> {
        let mut e = Encoder::new();
        e.str16(space).bytes32(key).bytes32(&item).u64(end_at_least);
        let out = self.conn.call(msg::MDS_LIST_APPEND, &e.finish())?;
        Decoder::new(&out).u64()
    }

    fn cond_list_append(&self, space: &str, key: &[u8], item: Vec<u8>, guard: AppendGuard) -> Result<CondAppend> {
        let mut e = Encoder::new();
        e.str16(space).bytes32(key).bytes32(&item).u64(guard.len).u64(guard.limit);
        let out = self.conn.call(msg::MDS_COND_APPEND, &e.finish())?;
        let mut d = Decoder::new(&out);
        Ok(match d.u8()? {
            0 => CondAppend::Applied { version: d.u64()?, prev_end: d.u64()? },
            _ => CondAppend::GuardFailed,
        })
    }

    fn commit(&self, reads: &[ReadStamp], writes: &[WriteOp]) -> Result<Vec<u64>> {
        let mut e = Encoder::new();
        e.u32(reads.len() as u32);
        for r in reads {
            e.str16(&r.space).bytes32(&r.key).u64(r.version);
        }
        e.u32(writes.len() as u32);
        for w in writes {
            e.str16(&w.space).bytes32(&w.key);
            w.mutation.encode_into(&mut e);
        }
        let out = self.conn.call(msg::MDS_TXN_COMMIT, &e.finish())?;
        let mut d = Decoder::new(&out);
        let n = d.u32()?;
        (0..n).map(|_| d.u64()).collect()
    }

    fn scan(&self, space: &str) -> Result<Vec<(Vec<u8>, Versioned)>> {
        let mut e = Encoder::new();
        e.str16(space);
        let out = self.conn.call(msg::MDS_SCAN, &e.finish())?;
        let mut d = Decoder::new(&out);
        let n = d.u32()?;
        let mut rows = Vec::with_capacity(n.min(1 << 16) as usize);
        for _ in 0..n {
            let key = d.bytes32()?.to_vec();
            let version = d.u64()?;
            rows.push((key, Versioned { version, value: Value::decode_from(&mut d)? }));
        }
        d.finish()?;
        Ok(rows)
    }

    fn counters(&self) -> MetaCounters {
        self.conn.call(msg::MDS_COUNTERS, &[]).and_then(|b| decode_meta_counters(&b)).unwrap_or_default()
    }
}

// ---- coordinator ----

fn encode_membership(m: &Membership) -> Vec<u8> {
    let mut e = Encoder::new();
    e.u64(m.epoch).u32(m.vnodes).u32(m.servers.len() as u32);
    for s in &m.servers {
        e.u64(s.id.0).str16(&s.address);
    }
    finish(e)
}

fn decode_membership(b: &[u8]) -> Result<Membership> {
    let mut d = Decoder::new(b);
    let epoch = d.u64()?;
    let vnodes = d.u32()?;
    let n = d.u32()?;
    let mut servers = Vec::with_capacity(n.min(4096) as usize);
    for _ in 0..n {
        servers.push(ServerInfo { id: ServerId(d.u64()?), address: d.str16()? });
    }
    d.finish()?;
    Ok(Membership::new(epoch, servers, vnodes))
}

pub struct CoordHandler(pub Arc<dyn Registry>);

impl Handler for CoordHandler {
    fn handle(&self, ty: u8, payload: &[u8]) -> Result<Vec<u8>> {
        let mut d = Decoder::new(payload);
        let mut e = Encoder::new();
        match ty {
            msg::COORD_REGISTER => {
                let address = d.str16()?;
                let existing = match d.u64()? {
                    0 => None,
                    id => Some(ServerId(id)),
                };
                let (id, epoch) = self.0.register_server(&address, existing)?;
                e.u64(id.0).u64(epoch);
            }
            msg::COORD_HEARTBEAT => {
                e.u64(self.0.heartbeat(ServerId(d.u64()?))?);
            }
            msg::COORD_MEMBERSHIP => return Ok(encode_membership(&self.0.fetch_membership()?)),
            t => return Err(Error::Protocol(format!("coord: unknown message {t}"))),
        }
        d.finish()?;
        Ok(finish(e))
    }
}

/// The coordinator reached over TCP.
pub struct RemoteRegistry {
    conn: Conn,
}

impl RemoteRegistry {
    pub fn new(addr: impl Into<String>) -> RemoteRegistry {
        RemoteRegistry { conn: Conn::new(addr) }
    }
}

impl Registry for RemoteRegistry {
    fn register_server(&self, address: &str, existing: Option<ServerId>) -> Result<(ServerId, u64)> {
        let mut e = Encoder::new();
        e.str16(address).u64(existing.map_or(0, |s| s.0));
        let out = self.conn.call(msg::COORD_REGISTER, &e.finish())?;
        let mut d = Decoder::new(&out);
        Ok((ServerId(d.u64()?), d.u64()?))
    }

    fn heartbeat(&self, id: ServerId) -> Result<u64> {
        let mut e = Encoder::new();
        e.u64(id.0);
        let out = self.conn.call(msg::COORD_HEARTBEAT, &e.finish())?;
        Decoder::new(&out).u64()
    }

    fn fetch_membership(&self) -> Result<Membership> {
        decode_membership(&self.conn.call(msg::COORD_MEMBERSHIP, &[])?)
    }
}
