//! Storage server: creates and retrieves immutable slices in a handful of
//! append-only backing files, and reclaims unreferenced bytes by rewriting
//! backing files as sparse files.
//!
//! The server keeps no index of slices. Pointers are self-describing, so a
//! read is just a positioned read of the named backing file. What is garbage
//! is learned only from in-use lists produced by the filesystem-wide scan.

use std::fs::{self, File, OpenOptions};
use std::os::unix::fs::{FileExt, MetadataExt};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use parking_lot::{Mutex, RwLock};

use crate::codec::{Decoder, Encoder, FORMAT_V1};
use crate::error::{Error, Result};
use crate::placement::{Ring, BACKING_SEED, DEFAULT_VNODES};
use crate::slice::{ServerId, SlicePointer};

pub const MIB: u64 = 1 << 20;

/// Which region a slice belongs to; drives backing-file selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RegionHint {
    pub file_id: u64,
    pub region_index: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlushPolicy {
    /// Bytes are handed to the OS before the pointer is returned.
    Write,
    /// Bytes are on stable storage before the pointer is returned.
    Sync,
}

#[derive(Debug, Clone)]
pub struct StorageConfig {
    pub backing_files: usize,
    pub max_slice: u64,
    pub flush: FlushPolicy,
    /// Optional cap on logical bytes stored.
    pub capacity: Option<u64>,
    pub gc_high: f64,
    pub gc_low: f64,
}

impl Default for StorageConfig {
    fn default() -> Self {
        StorageConfig {
            backing_files: 8,
            max_slice: 64 * MIB,
            flush: FlushPolicy::Write,
            capacity: None,
            gc_high: 0.40,
            gc_low: 0.20,
        }
    }
}

/// Per-server inventory of referenced extents produced by one scan.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InUseList {
    pub server_id: ServerId,
    pub scan_id: u64,
    /// `(backing_file, offset, length)`, sorted and non-overlapping.
    pub extents: Vec<(String, u64, u64)>,
}

impl InUseList {
    /// Builds a normalized list from arbitrary (possibly overlapping) extents.
    pub fn from_extents(server_id: ServerId, scan_id: u64, mut raw: Vec<(String, u64, u64)>) -> InUseList {
        raw.sort();
        let mut extents: Vec<(String, u64, u64)> = Vec::with_capacity(raw.len());
        for (name, off, len) in raw {
            match extents.last_mut() {
                Some((n, o, l)) if *n == name && off <= *o + *l => {
                    *l = (*l).max(off + len - *o);
                }
                _ => extents.push((name, off, len)),
            }
        }
        InUseList { server_id, scan_id, extents }
    }

    /// File layout: `u8 format | u64 scan_id | u64 count | (str16 name, u64 offset, u64 length)*`.
    pub fn encode(&self) -> Vec<u8> {
        let mut e = Encoder::with_version(FORMAT_V1);
        e.u64(self.scan_id).u64(self.extents.len() as u64);
        for (name, off, len) in &self.extents {
            e.str16(name).u64(*off).u64(*len);
        }
        e.finish()
    }

    pub fn decode(server_id: ServerId, bytes: &[u8]) -> Result<InUseList> {
        let mut d = Decoder::versioned(bytes, FORMAT_V1)?;
        let scan_id = d.u64()?;
        let n = d.u64()?;
        let mut extents = Vec::with_capacity(n.min(1 << 16) as usize);
        for _ in 0..n {
            extents.push((d.str16()?, d.u64()?, d.u64()?));
        }
        d.finish()?;
        Ok(InUseList { server_id, scan_id, extents })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct GcReport {
    /// Backing files with collectible bytes, most garbage first.
    pub candidates: Vec<(String, u64)>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct StorageCounters {
    pub bytes_written: u64,
    pub bytes_read: u64,
    pub slices_created: u64,
    pub slices_read: u64,
    pub gc_bytes_rewritten: u64,
    pub gc_bytes_reclaimed: u64,
}

#[derive(Default)]
struct AtomicStorageCounters {
    bytes_written: AtomicU64,
    bytes_read: AtomicU64,
    slices_created: AtomicU64,
    slices_read: AtomicU64,
    gc_bytes_rewritten: AtomicU64,
    gc_bytes_reclaimed: AtomicU64,
}

/// What every slice service (local or remote) answers.
pub trait SliceService: Send + Sync {
    fn create_slice(&self, hint: RegionHint, data: &[u8]) -> Result<SlicePointer>;
    fn read_slice(&self, ptr: &SlicePointer) -> Result<Vec<u8>>;
    /// Marks the start of a scan: anything created after this point is never
    /// collected on the strength of this scan or the next.
    fn begin_scan(&self, scan_id: u64) -> Result<()>;
    fn apply_in_use_list(&self, list: &InUseList) -> Result<GcReport>;
    fn collect_backing_file(&self, name: &str) -> Result<u64>;
    fn counters(&self) -> Result<StorageCounters>;
}

type Ranges = Vec<(u64, u64)>;

struct FileState {
    file: File,
    cursor: u64,
    /// Reclaimed byte ranges, half-open, sorted, disjoint.
    holes: Ranges,
}

struct BackingFile {
    name: String,
    path: PathBuf,
    state: RwLock<FileState>,
}

#[derive(Default, Debug, PartialEq, Eq)]
struct GcState {
    last_applied: u64,
    /// Per-file cursors captured at `begin_scan`.
    watermarks: Vec<(u64, Vec<u64>)>,
    previous: Option<(u64, Vec<Ranges>)>,
    collectible: Vec<Ranges>,
}

const GC_STATE: &str = "gc.state";

fn encode_ranges(e: &mut Encoder, r: &Ranges) {
    e.u32(r.len() as u32);
    for &(a, b) in r {
        e.u64(a).u64(b);
    }
}

fn decode_ranges(d: &mut Decoder<'_>) -> Result<Ranges> {
    let n = d.u32()?;
    (0..n).map(|_| Ok((d.u64()?, d.u64()?))).collect()
}

impl GcState {
    fn encode(&self) -> Vec<u8> {
        let mut e = Encoder::with_version(FORMAT_V1);
        e.u64(self.last_applied).u32(self.watermarks.len() as u32);
        for (scan, marks) in &self.watermarks {
            e.u64(*scan).u32(marks.len() as u32);
            for m in marks {
                e.u64(*m);
            }
        }
        match &self.previous {
            Some((scan, refs)) => {
                e.u8(1).u64(*scan).u32(refs.len() as u32);
                refs.iter().for_each(|r| encode_ranges(&mut e, r));
            }
            None => {
                e.u8(0);
            }
        }
        e.u32(self.collectible.len() as u32);
        self.collectible.iter().for_each(|r| encode_ranges(&mut e, r));
        e.finish()
    }

    fn decode(b: &[u8]) -> Result<GcState> {
        let mut d = Decoder::versioned(b, FORMAT_V1)?;
        let last_applied = d.u64()?;
        let nw = d.u32()?;
        let mut watermarks = Vec::new();
        for _ in 0..nw {
            let scan = d.u64()?;
            let n = d.u32()?;
            watermarks.push((scan, (0..n).map(|_| d.u64()).collect::<Result<Vec<_>>>()?));
        }
        let previous = match d.u8()? {
            0 => None,
            _ => {
                let scan = d.u64()?;
                let n = d.u32()?;
                Some((scan, (0..n).map(|_| decode_ranges(&mut d)).collect::<Result<Vec<_>>>()?))
            }
        };
        let n = d.u32()?;
        let collectible = (0..n).map(|_| decode_ranges(&mut d)).collect::<Result<Vec<_>>>()?;
        d.finish()?;
        Ok(GcState { last_applied, watermarks, previous, collectible })
    }
}

pub struct StorageServer {
    id: AtomicU64,
    dir: PathBuf,
    config: StorageConfig,
    files: Vec<BackingFile>,
    ring: Ring,
    gc: Mutex<GcState>,
    counters: AtomicStorageCounters,
}

fn overlaps(ranges: &[(u64, u64)], start: u64, end: u64) -> bool {
    let i = ranges.partition_point(|&(_, e)| e <= start);
    i < ranges.len() && ranges[i].0 < end
}

fn normalize(mut r: Ranges) -> Ranges {
    r.retain(|&(s, e)| s < e);
    r.sort_unstable();
    let mut out: Ranges = Vec::with_capacity(r.len());
    for (s, e) in r {
        match out.last_mut() {
            Some(last) if s <= last.1 => last.1 = last.1.max(e),
            _ => out.push((s, e)),
        }
    }
    out
}

/// `[0, limit)` minus the union of `minus`.
fn complement(limit: u64, minus: &[&Ranges]) -> Ranges {
    let all = normalize(minus.iter().flat_map(|r| r.iter().copied()).collect());
    let mut out = Vec::new();
    let mut pos = 0;
    for (s, e) in all {
        if s >= limit {
            break;
        }
        if s > pos {
            out.push((pos, s));
        }
        pos = pos.max(e);
    }
    if pos < limit {
        out.push((pos, limit));
    }
    out
}

fn total(r: &[(u64, u64)]) -> u64 {
    r.iter().map(|(s, e)| e - s).sum()
}

fn read_holes(path: &Path) -> Result<Ranges> {
    match fs::read(path) {
        Ok(bytes) => {
            let mut d = Decoder::versioned(&bytes, FORMAT_V1)?;
            let n = d.u64()?;
            let mut out = Vec::new();
            for _ in 0..n {
                out.push((d.u64()?, d.u64()?));
            }
            Ok(out)
        }
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(Vec::new()),
        Err(e) => Err(e.into()),
    }
}

fn write_holes(path: &Path, holes: &[(u64, u64)]) -> Result<()> {
    let mut e = Encoder::with_version(FORMAT_V1);
    e.u64(holes.len() as u64);
    for (s, end) in holes {
        e.u64(*s).u64(*end);
    }
    let tmp = path.with_extension("holes.tmp");
    fs::write(&tmp, e.finish())?;
    fs::rename(tmp, path)?;
    Ok(())
}

impl StorageServer {
    /// Opens (or initializes) a server rooted at `dir`. Existing backing
    /// files, reclaimed-hole maps and the persisted server id are reloaded.
    pub fn open(dir: impl Into<PathBuf>, config: StorageConfig) -> Result<StorageServer> {
        let dir = dir.into();
        if config.backing_files == 0 {
            return Err(Error::invalid("need at least one backing file"));
        }
        fs::create_dir_all(&dir)?;
        let mut files = Vec::with_capacity(config.backing_files);
        for i in 0..config.backing_files {
            let name = format!("b{i}");
            let path = dir.join(&name);
            let file = OpenOptions::new().read(true).write(true).create(true).truncate(false).open(&path)?;
            let cursor = file.metadata()?.len();
            let holes = read_holes(&path.with_extension("holes"))?;
            files.push(BackingFile { name, path, state: RwLock::new(FileState { file, cursor, holes }) });
        }
        let id = match fs::read_to_string(dir.join("server.id")) {
            Ok(s) => s.trim().parse::<u64>().map_err(|_| Error::corrupt("bad server.id"))?,
            Err(_) => 0,
        };
        let ring = Ring::new(0..config.backing_files as u64, DEFAULT_VNODES, BACKING_SEED);
        let n = files.len();
        let gc = match fs::read(dir.join(GC_STATE)) {
            Ok(b) => {
                let st = GcState::decode(&b)?;
                if st.collectible.len() != n || st.previous.as_ref().is_some_and(|(_, r)| r.len() != n) {
                    return Err(Error::corrupt("gc state does not match backing file count"));
                }
                st
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                GcState { collectible: vec![Vec::new(); n], ..Default::default() }
            }
            Err(e) => return Err(e.into()),
        };
        Ok(StorageServer {
            id: AtomicU64::new(id),
            dir,
            config,
            files,
            ring,
            gc: Mutex::new(gc),
            counters: AtomicStorageCounters::default(),
        })
    }

    /// Persists scan bookkeeping so scans stay consecutive across restarts.
    fn save_gc(&self, gc: &GcState) -> Result<()> {
        let tmp = self.dir.join("gc.state.tmp");
        fs::write(&tmp, gc.encode())?;
        fs::rename(&tmp, self.dir.join(GC_STATE))?;
        Ok(())
    }

    pub fn id(&self) -> Option<ServerId> {
        match self.id.load(Ordering::Acquire) {
            0 => None,
            v => Some(ServerId(v)),
        }
    }

    /// Records the id assigned by the coordinator, persisting it.
    pub fn set_id(&self, id: ServerId) -> Result<()> {
        fs::write(self.dir.join("server.id"), id.0.to_string())?;
        self.id.store(id.0, Ordering::Release);
        Ok(())
    }

    pub fn config(&self) -> &StorageConfig {
        &self.config
    }

    fn require_id(&self) -> Result<ServerId> {
        self.id().ok_or_else(|| Error::Unavailable("server not registered".into()))
    }

    fn file(&self, name: &str) -> Option<(usize, &BackingFile)> {
        self.files.iter().enumerate().find(|(_, f)| f.name == name)
    }

    pub fn backing_file_for(&self, hint: RegionHint) -> &str {
        let idx = self.ring.locate(&[hint.file_id, hint.region_index]).unwrap_or(0) as usize;
        &self.files[idx].name
    }

    /// Sum of `bytes_total` over backing files, reclaimed holes excluded.
    pub fn logical_bytes(&self) -> u64 {
        self.files
            .iter()
            .map(|f| {
                let st = f.state.read();
                st.cursor - total(&st.holes)
            })
            .sum()
    }

    /// Disk blocks actually allocated to backing files.
    pub fn physical_bytes(&self) -> Result<u64> {
        let mut sum = 0;
        for f in &self.files {
            sum += fs::metadata(&f.path)?.blocks() * 512;
        }
        Ok(sum)
    }

    pub fn collectible_bytes(&self) -> u64 {
        self.gc.lock().collectible.iter().map(|r| total(r)).sum()
    }

    /// Applies the watermark policy: when collectible garbage exceeds the
    /// high fraction of logical bytes, collects files most-garbage-first until
    /// it drops below the low fraction. `force` collects every candidate.
    pub fn run_gc(&self, force: bool) -> Result<Vec<(String, u64)>> {
        let mut candidates: Vec<(String, u64)> = {
            let gc = self.gc.lock();
            self.files.iter().zip(&gc.collectible).map(|(f, r)| (f.name.clone(), total(r))).collect()
        };
        candidates.retain(|(_, b)| *b > 0);
        candidates.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let mut garbage: u64 = candidates.iter().map(|c| c.1).sum();
        let fraction = |g: u64| {
            let live = self.logical_bytes();
            if live == 0 {
                0.0
            } else {
                g as f64 / live as f64
            }
        };
        if !force && fraction(garbage) <= self.config.gc_high {
            return Ok(Vec::new());
        }
        let mut done = Vec::new();
        for (name, _) in candidates {
            if !force && fraction(garbage) < self.config.gc_low {
                break;
            }
            let reclaimed = self.collect_backing_file(&name)?;
            garbage = garbage.saturating_sub(reclaimed);
            done.push((name, reclaimed));
        }
        Ok(done)
    }
}

impl SliceService for StorageServer {
    fn create_slice(&self, hint: RegionHint, data: &[u8]) -> Result<SlicePointer> {
        let server_id = self.require_id()?;
        let len = data.len() as u64;
        if len == 0 {
            return Err(Error::invalid("empty slice"));
        }
        if len > self.config.max_slice {
            return Err(Error::invalid(format!("slice of {len} bytes exceeds limit {}", self.config.max_slice)));
        }
        if let Some(cap) = self.config.capacity {
            if self.logical_bytes() + len > cap {
                return Err(Error::OutOfSpace);
            }
        }
        let idx = self.ring.locate(&[hint.file_id, hint.region_index]).unwrap_or(0) as usize;
        let bf = &self.files[idx];
        let offset = {
            let mut st = bf.state.write();
            let offset = st.cursor;
            st.file.write_all_at(data, offset)?;
            if self.config.flush == FlushPolicy::Sync {
                st.file.sync_data()?;
            }
            st.cursor += len;
            offset
        };
        self.counters.bytes_written.fetch_add(len, Ordering::Relaxed);
        self.counters.slices_created.fetch_add(1, Ordering::Relaxed);
        Ok(SlicePointer::new(server_id, bf.name.clone(), offset, len))
    }

    fn read_slice(&self, ptr: &SlicePointer) -> Result<Vec<u8>> {
        if Some(ptr.server_id) != self.id() {
            return Err(Error::WrongServer);
        }
        let (_, bf) = self.file(&ptr.backing_file).ok_or(Error::NotFound)?;
        let st = bf.state.read();
        let end = ptr.file_offset.checked_add(ptr.length).ok_or(Error::NotFound)?;
        if end > st.cursor || overlaps(&st.holes, ptr.file_offset, end) {
            return Err(Error::NotFound);
        }
        let mut buf = vec![0u8; ptr.length as usize];
        st.file.read_exact_at(&mut buf, ptr.file_offset)?;
        drop(st);
        self.counters.bytes_read.fetch_add(ptr.length, Ordering::Relaxed);
        self.counters.slices_read.fetch_add(1, Ordering::Relaxed);
        Ok(buf)
    }

    fn begin_scan(&self, scan_id: u64) -> Result<()> {
        let cursors: Vec<u64> = self.files.iter().map(|f| f.state.read().cursor).collect();
        let mut gc = self.gc.lock();
        if scan_id <= gc.last_applied {
            return Err(Error::StaleScan);
        }
        gc.watermarks.retain(|(s, _)| *s != scan_id);
        gc.watermarks.push((scan_id, cursors));
        let keep_from = gc.watermarks.len().saturating_sub(4);
        gc.watermarks.drain(..keep_from);
        self.save_gc(&gc)
    }

    /// An extent becomes collectible once it is unreferenced in two
    /// consecutive scans `s-1` and `s` and was written before scan `s-1`
    /// began, so a slice that is created and published between scans is
    /// never reclaimed from under its writer.
    fn apply_in_use_list(&self, list: &InUseList) -> Result<GcReport> {
        if Some(list.server_id) != self.id() {
            return Err(Error::WrongServer);
        }
        let mut gc = self.gc.lock();
        if list.scan_id <= gc.last_applied {
            return Err(Error::StaleScan);
        }
        let mut referenced: Vec<Ranges> = vec![Vec::new(); self.files.len()];
        for (name, off, len) in &list.extents {
            if let Some((i, _)) = self.file(name) {
                referenced[i].push((*off, off + len));
            }
        }
        let referenced: Vec<Ranges> = referenced.into_iter().map(normalize).collect();

        let prev = gc.previous.take().filter(|(s, _)| *s + 1 == list.scan_id);
        let watermark = gc.watermarks.iter().find(|(s, _)| *s + 1 == list.scan_id).map(|(_, w)| w.clone());
        let mut collectible = vec![Vec::new(); self.files.len()];
        if let (Some((_, prev_refs)), Some(marks)) = (&prev, &watermark) {
            for (i, bf) in self.files.iter().enumerate() {
                let st = bf.state.read();
                let limit = marks[i].min(st.cursor);
                collectible[i] = complement(limit, &[&st.holes, &prev_refs[i], &referenced[i]]);
            }
        }
        let mut candidates: Vec<(String, u64)> = self
            .files
            .iter()
            .zip(&collectible)
            .map(|(f, r)| (f.name.clone(), total(r)))
            .filter(|(_, b)| *b > 0)
            .collect();
        candidates.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));

        gc.collectible = collectible;
        gc.previous = Some((list.scan_id, referenced));
        gc.last_applied = list.scan_id;
        self.save_gc(&gc)?;
        Ok(GcReport { candidates })
    }

    /// Rewrites the file with every live byte at its original offset and
    /// seeks past collectible ranges, leaving a sparse file. Only live bytes
    /// are written.
    fn collect_backing_file(&self, name: &str) -> Result<u64> {
        let (idx, bf) = self.file(name).ok_or(Error::NotFound)?;
        let mut gc = self.gc.lock();
        let mut st = bf.state.write();
        let garbage = std::mem::take(&mut gc.collectible[idx]);
        let garbage = complement(st.cursor, &[&st.holes])
            .into_iter()
            .flat_map(|(s, e)| garbage.iter().filter_map(move |&(gs, ge)| {
                let (a, b) = (gs.max(s), ge.min(e));
                (a < b).then_some((a, b))
            }))
            .collect::<Ranges>();
        let reclaimed = total(&garbage);
        if reclaimed == 0 {
            return Ok(0);
        }
        let live = complement(st.cursor, &[&st.holes, &garbage]);
        let tmp_path = bf.path.with_extension("gc");
        let tmp = OpenOptions::new().read(true).write(true).create(true).truncate(true).open(&tmp_path)?;
        let mut buf = vec![0u8; MIB as usize];
        let mut rewritten = 0u64;
        for &(s, e) in &live {
            let mut pos = s;
            while pos < e {
                let n = ((e - pos) as usize).min(buf.len());
                st.file.read_exact_at(&mut buf[..n], pos)?;
                tmp.write_all_at(&buf[..n], pos)?;
                pos += n as u64;
                rewritten += n as u64;
            }
        }
        tmp.set_len(st.cursor)?;
        tmp.sync_all()?;
        let holes = normalize(st.holes.iter().chain(garbage.iter()).copied().collect());
        // Holes are recorded before the swap: a crash in between only hides
        // garbage, it never exposes stale bytes as live.
        write_holes(&bf.path.with_extension("holes"), &holes)?;
        fs::rename(&tmp_path, &bf.path)?;
        st.file = tmp;
        st.holes = holes;
        self.save_gc(&gc)?;
        self.counters.gc_bytes_rewritten.fetch_add(rewritten, Ordering::Relaxed);
        self.counters.gc_bytes_reclaimed.fetch_add(reclaimed, Ordering::Relaxed);
        log::debug!("collected {name}: reclaimed {reclaimed} bytes, rewrote {rewritten}");
        Ok(reclaimed)
    }

    fn counters(&self) -> Result<StorageCounters> {
        let c = &self.counters;
        Ok(StorageCounters {
            bytes_written: c.bytes_written.load(Ordering::Relaxed),
            bytes_read: c.bytes_read.load(Ordering::Relaxed),
            slices_created: c.slices_created.load(Ordering::Relaxed),
            slices_read: c.slices_read.load(Ordering::Relaxed),
            gc_bytes_rewritten: c.gc_bytes_rewritten.load(Ordering::Relaxed),
            gc_bytes_reclaimed: c.gc_bytes_reclaimed.load(Ordering::Relaxed),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::slice::subrange_pointer;
    use rand::rngs::StdRng;
    use rand::{Rng, RngCore, SeedableRng};

    fn server(dir: &Path) -> StorageServer {
        let s = StorageServer::open(dir, StorageConfig::default()).unwrap();
        s.set_id(ServerId(7)).unwrap();
        s
    }

    fn hint(f: u64, r: u64) -> RegionHint {
        RegionHint { file_id: f, region_index: r }
    }

    fn list_for(s: &StorageServer, scan: u64, ptrs: &[&SlicePointer]) -> InUseList {
        InUseList::from_extents(
            s.id().unwrap(),
            scan,
            ptrs.iter().map(|p| (p.backing_file.clone(), p.file_offset, p.length)).collect(),
        )
    }

    #[test]
    fn create_then_read_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let s = server(dir.path());
        let mut data = vec![0u8; MIB as usize];
        StdRng::seed_from_u64(1).fill_bytes(&mut data);
        let p = s.create_slice(hint(1, 0), &data).unwrap();
        assert_eq!(p.length, MIB);
        assert_eq!(s.read_slice(&p).unwrap(), data);
        let sub = subrange_pointer(&p, 1000, 5000).unwrap();
        assert_eq!(s.read_slice(&sub).unwrap(), &data[1000..6000]);
    }

    #[test]
    fn same_hint_same_backing_file_and_contiguous() {
        let dir = tempfile::tempdir().unwrap();
        let s = server(dir.path());
        let a = s.create_slice(hint(3, 9), b"hello").unwrap();
        let b = s.create_slice(hint(3, 9), b"world").unwrap();
        assert_eq!(a.backing_file, b.backing_file);
        assert!(a.is_followed_by(&b));
    }

    #[test]
    fn rejects_bad_requests() {
        let dir = tempfile::tempdir().unwrap();
        let s = server(dir.path());
        assert!(matches!(s.create_slice(hint(1, 1), b""), Err(Error::InvalidArgument(_))));
        let p = s.create_slice(hint(1, 1), b"abc").unwrap();
        let mut other = p.clone();
        other.server_id = ServerId(8);
        assert_eq!(s.read_slice(&other), Err(Error::WrongServer));
        let mut beyond = p.clone();
        beyond.length = 100;
        assert_eq!(s.read_slice(&beyond), Err(Error::NotFound));
        let mut missing = p;
        missing.backing_file = "nope".into();
        assert_eq!(s.read_slice(&missing), Err(Error::NotFound));
    }

    #[test]
    fn capacity_limit() {
        let dir = tempfile::tempdir().unwrap();
        let s = StorageServer::open(dir.path(), StorageConfig { capacity: Some(10), ..Default::default() }).unwrap();
        s.set_id(ServerId(1)).unwrap();
        s.create_slice(hint(0, 0), &[1; 8]).unwrap();
        assert_eq!(s.create_slice(hint(0, 0), &[1; 8]), Err(Error::OutOfSpace));
    }

    #[test]
    fn reopen_preserves_pointers_and_id() {
        let dir = tempfile::tempdir().unwrap();
        let p = server(dir.path()).create_slice(hint(5, 5), b"durable").unwrap();
        let s = StorageServer::open(dir.path(), StorageConfig::default()).unwrap();
        assert_eq!(s.id(), Some(ServerId(7)));
        assert_eq!(s.read_slice(&p).unwrap(), b"durable");
        let q = s.create_slice(hint(5, 5), b"more").unwrap();
        assert!(p.is_followed_by(&q));
    }

    #[test]
    fn scan_state_survives_reopen() {
        let dir = tempfile::tempdir().unwrap();
        let s = server(dir.path());
        let dead = s.create_slice(hint(1, 0), &[1; 4096]).unwrap();
        s.begin_scan(1).unwrap();
        s.apply_in_use_list(&list_for(&s, 1, &[])).unwrap();
        s.begin_scan(2).unwrap();
        let before = s.gc.lock().encode();
        drop(s);
        let s = StorageServer::open(dir.path(), StorageConfig::default()).unwrap();
        assert_eq!(s.gc.lock().encode(), before);
        assert!(matches!(s.begin_scan(1), Err(Error::StaleScan)));
        let r = s.apply_in_use_list(&list_for(&s, 2, &[])).unwrap();
        assert_eq!(r.candidates, vec![(dead.backing_file.clone(), 4096)]);
        drop(s);
        let s = StorageServer::open(dir.path(), StorageConfig::default()).unwrap();
        assert_eq!(s.collect_backing_file(&dead.backing_file).unwrap(), 4096);
        assert!(s.read_slice(&dead).is_err());
    }

    #[test]
    fn random_hints_spread_over_files() {
        let dir = tempfile::tempdir().unwrap();
        let s = server(dir.path());
        let mut rng = StdRng::seed_from_u64(99);
        let mut counts = std::collections::HashMap::new();
        for _ in 0..1000 {
            let p = s.create_slice(hint(rng.gen(), rng.gen_range(0..16)), &[1]).unwrap();
            *counts.entry(p.backing_file).or_insert(0usize) += 1;
        }
        assert_eq!(counts.len(), 8);
        for c in counts.values() {
            let c = *c as f64;
            assert!(c < 3.0 * 125.0 && c > 125.0 / 3.0, "{counts:?}");
        }
    }

    #[test]
    fn two_scan_rule_protects_recent_slices() {
        let dir = tempfile::tempdir().unwrap();
        let s = server(dir.path());
        let old = s.create_slice(hint(1, 0), &[1; 100]).unwrap();
        s.begin_scan(1).unwrap();
        // Created after scan 1 began and never referenced by either scan.
        let fresh = s.create_slice(hint(1, 0), &[2; 100]).unwrap();
        assert!(s.apply_in_use_list(&list_for(&s, 1, &[])).unwrap().candidates.is_empty());
        s.begin_scan(2).unwrap();
        let report = s.apply_in_use_list(&list_for(&s, 2, &[])).unwrap();
        assert_eq!(report.candidates, vec![(old.backing_file.clone(), 100)]);
        assert_eq!(s.collect_backing_file(&old.backing_file).unwrap(), 100);
        assert_eq!(s.read_slice(&old), Err(Error::NotFound));
        assert_eq!(s.read_slice(&fresh).unwrap(), vec![2; 100]);
        assert_eq!(s.apply_in_use_list(&list_for(&s, 2, &[])), Err(Error::StaleScan));
    }

    #[test]
    fn referenced_in_either_scan_is_kept() {
        let dir = tempfile::tempdir().unwrap();
        let s = server(dir.path());
        let a = s.create_slice(hint(1, 0), &[1; 10]).unwrap();
        let b = s.create_slice(hint(1, 0), &[2; 10]).unwrap();
        s.begin_scan(1).unwrap();
        s.apply_in_use_list(&list_for(&s, 1, &[&a])).unwrap();
        s.begin_scan(2).unwrap();
        let r = s.apply_in_use_list(&list_for(&s, 2, &[&b])).unwrap();
        assert!(r.candidates.is_empty());
        s.begin_scan(3).unwrap();
        let r = s.apply_in_use_list(&list_for(&s, 3, &[&b])).unwrap();
        assert_eq!(r.candidates, vec![(a.backing_file.clone(), 10)]);
        s.collect_backing_file(&a.backing_file).unwrap();
        assert_eq!(s.read_slice(&b).unwrap(), vec![2; 10]);
    }

    #[test]
    fn most_garbage_first_and_io_proportional_to_live() {
        let dir = tempfile::tempdir().unwrap();
        let s = server(dir.path());
        // Find two hints that land in different backing files.
        let h1 = hint(1, 0);
        let h2 = (2..).map(|f| hint(f, 0)).find(|h| s.backing_file_for(*h) != s.backing_file_for(h1)).unwrap();
        let chunk = vec![5u8; 64 * 1024];
        let mut f1 = Vec::new();
        let mut f2 = Vec::new();
        for _ in 0..10 {
            f1.push(s.create_slice(h1, &chunk).unwrap());
            f2.push(s.create_slice(h2, &chunk).unwrap());
        }
        // f1 keeps 1 of 10 (90% garbage), f2 keeps 9 of 10.
        let live: Vec<&SlicePointer> = std::iter::once(&f1[3]).chain(f2.iter().skip(1)).collect();
        s.begin_scan(1).unwrap();
        s.apply_in_use_list(&list_for(&s, 1, &live)).unwrap();
        s.begin_scan(2).unwrap();
        let r = s.apply_in_use_list(&list_for(&s, 2, &live)).unwrap();
        assert_eq!(r.candidates[0], (f1[0].backing_file.clone(), 9 * 65536));
        assert_eq!(r.candidates[1], (f2[0].backing_file.clone(), 65536));

        let before = s.counters().unwrap().gc_bytes_rewritten;
        assert_eq!(s.collect_backing_file(&f1[0].backing_file).unwrap(), 9 * 65536);
        let rewritten = s.counters().unwrap().gc_bytes_rewritten - before;
        assert_eq!(rewritten, 65536);
        for p in &live {
            assert_eq!(s.read_slice(p).unwrap(), chunk);
        }
        // Nothing collectible left in a fully live file.
        assert_eq!(s.collect_backing_file(&f1[0].backing_file).unwrap(), 0);
    }

    #[test]
    fn collection_makes_file_sparse() {
        let dir = tempfile::tempdir().unwrap();
        let s = server(dir.path());
        let h = hint(4, 4);
        let mut ptrs = Vec::new();
        for i in 0..100u8 {
            ptrs.push(s.create_slice(h, &vec![i; MIB as usize]).unwrap());
        }
        let before = s.physical_bytes().unwrap();
        assert!(before >= 100 * MIB);
        let keep: Vec<&SlicePointer> = ptrs.iter().step_by(10).collect();
        for scan in 1..=2 {
            s.begin_scan(scan).unwrap();
            s.apply_in_use_list(&list_for(&s, scan, &keep)).unwrap();
        }
        let reclaimed = s.collect_backing_file(&ptrs[0].backing_file).unwrap();
        assert_eq!(reclaimed, 90 * MIB);
        let after = s.physical_bytes().unwrap();
        assert!(after <= 11 * MIB, "physical after collection {after}");
        assert!(s.counters().unwrap().gc_bytes_rewritten <= 10 * MIB);
        for p in keep {
            assert_eq!(s.read_slice(p).unwrap()[0] as usize, ptrs.iter().position(|q| q == p).unwrap());
        }
        // Holes survive a restart.
        drop(s);
        let s = StorageServer::open(dir.path(), StorageConfig::default()).unwrap();
        assert_eq!(s.read_slice(&ptrs[1]), Err(Error::NotFound));
        assert_eq!(s.read_slice(&ptrs[10]).unwrap()[0], 10);
    }

    #[test]
    fn gc_policy_watermarks() {
        let dir = tempfile::tempdir().unwrap();
        let s = server(dir.path());
        let ptrs: Vec<_> = (0..10).map(|i| s.create_slice(hint(i, 0), &[1; 1000]).unwrap()).collect();
        // 30% garbage: below the 40% high-water mark, nothing happens.
        let keep: Vec<&SlicePointer> = ptrs.iter().skip(3).collect();
        for scan in 1..=2 {
            s.begin_scan(scan).unwrap();
            s.apply_in_use_list(&list_for(&s, scan, &keep)).unwrap();
        }
        assert!(s.run_gc(false).unwrap().is_empty());
        // 80% garbage: collect until below 20%.
        let keep: Vec<&SlicePointer> = ptrs.iter().skip(8).collect();
        for scan in 3..=4 {
            s.begin_scan(scan).unwrap();
            s.apply_in_use_list(&list_for(&s, scan, &keep)).unwrap();
        }
        let done = s.run_gc(false).unwrap();
        assert!(!done.is_empty());
        assert!((s.collectible_bytes() as f64) < 0.2 * s.logical_bytes() as f64 + 1.0);
    }

    #[test]
    fn in_use_list_encoding() {
        let l = InUseList::from_extents(
            ServerId(3),
            9,
            vec![("b1".into(), 10, 5), ("b0".into(), 0, 4), ("b1".into(), 12, 10), ("b1".into(), 40, 1)],
        );
        assert_eq!(l.extents, vec![("b0".into(), 0, 4), ("b1".into(), 10, 12), ("b1".into(), 40, 1)]);
        assert_eq!(InUseList::decode(ServerId(3), &l.encode()).unwrap(), l);
    }
}
