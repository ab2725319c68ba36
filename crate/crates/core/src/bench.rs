//! Three-stage external sort used to compare conventional read/write I/O
//! against yank/paste/concat on the same cluster.
//!
//! Stages: bucketing (partition records by key prefix into per-bucket
//! files), sorting (order each bucket), merging (join the buckets). In
//! conventional mode every stage reads and writes record data. In slicing
//! mode the data is read to find keys but only pointers are written, and the
//! merge is a metadata-only concat.

use std::fmt;
use std::io::SeekFrom;
use std::sync::Arc;
use std::time::{Duration, Instant};

use parking_lot::Mutex;
use rand::rngs::StdRng;
use rand::{RngCore, SeedableRng};

use crate::client::{Client, OpenFlags};
use crate::error::{Error, Result};
use crate::slice::{Placement, SliceEntry};
use crate::storage::StorageCounters;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SortMode {
    Conventional,
    Slicing,
}

impl fmt::Display for SortMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SortMode::Conventional => "conventional",
            SortMode::Slicing => "slicing",
        })
    }
}

impl std::str::FromStr for SortMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "conventional" => Ok(SortMode::Conventional),
            "slicing" => Ok(SortMode::Slicing),
            _ => Err(Error::invalid(format!("unknown sort mode {s:?}"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SortParams {
    pub size: u64,
    pub record: u64,
    pub key_len: usize,
    pub mode: SortMode,
    pub buckets: usize,
    pub workers: usize,
    pub seed: u64,
    /// Working directory inside the filesystem.
    pub dir: String,
}

impl Default for SortParams {
    fn default() -> Self {
        SortParams {
            size: 64 << 20,
            record: 64 << 10,
            key_len: 10,
            mode: SortMode::Slicing,
            buckets: 16,
            workers: 4,
            seed: 1,
            dir: "/sort".into(),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct StageReport {
    pub name: &'static str,
    pub elapsed: Duration,
    pub bytes_read: u64,
    pub bytes_written: u64,
}

#[derive(Debug, Clone)]
pub struct SortReport {
    pub mode: SortMode,
    pub size: u64,
    pub stages: Vec<StageReport>,
    pub verified: bool,
}

impl SortReport {
    pub fn bytes_read(&self) -> u64 {
        self.stages.iter().map(|s| s.bytes_read).sum()
    }

    pub fn bytes_written(&self) -> u64 {
        self.stages.iter().map(|s| s.bytes_written).sum()
    }

    pub fn elapsed(&self) -> Duration {
        self.stages.iter().map(|s| s.elapsed).sum()
    }
}

impl fmt::Display for SortReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "mode {} input {} bytes", self.mode, self.size)?;
        for s in &self.stages {
            writeln!(
                f,
                "  {:<9} {:>9.3}s  read {:>12}  written {:>12}",
                s.name,
                s.elapsed.as_secs_f64(),
                s.bytes_read,
                s.bytes_written
            )?;
        }
        write!(
            f,
            "  total     {:>9.3}s  read {:>12}  written {:>12}  verified {}",
            self.elapsed().as_secs_f64(),
            self.bytes_read(),
            self.bytes_written(),
            self.verified
        )
    }
}

/// Data bytes served and stored by every registered server.
pub fn cluster_counters(client: &Client) -> Result<StorageCounters> {
    let mut total = StorageCounters::default();
    for s in &client.refresh_membership()?.servers {
        let c = client.service(s.id)?.counters()?;
        total.bytes_written += c.bytes_written;
        total.bytes_read += c.bytes_read;
        total.slices_created += c.slices_created;
        total.slices_read += c.slices_read;
        total.gc_bytes_rewritten += c.gc_bytes_rewritten;
        total.gc_bytes_reclaimed += c.gc_bytes_reclaimed;
    }
    Ok(total)
}

fn bucket_of(key: &[u8], buckets: usize) -> usize {
    let mut k = [0u8; 8];
    let n = key.len().min(8);
    k[..n].copy_from_slice(&key[..n]);
    ((u64::from_be_bytes(k) as u128 * buckets as u128) >> 64) as usize
}

/// Entries covering `[start, start + len)` of a compacted, absolute entry
/// list, re-based to 0.
fn sub_entries(entries: &[SliceEntry], start: u64, len: u64) -> Result<Vec<SliceEntry>> {
    let end = start + len;
    let mut out = Vec::new();
    for e in entries {
        let off = e.offset().ok_or_else(|| Error::invalid("expected absolute entries"))?;
        let (a, b) = (off.max(start), (off + e.length).min(end));
        if a < b {
            out.push(e.subrange(a - off, b - a, Placement::Absolute(a - start))?);
        }
    }
    Ok(out)
}

struct Layout {
    input: String,
    buckets: Vec<String>,
    sorted: Vec<String>,
    output: String,
}

impl Layout {
    fn new(p: &SortParams) -> Layout {
        let d = p.dir.trim_end_matches('/');
        Layout {
            input: format!("{d}/input"),
            buckets: (0..p.buckets).map(|i| format!("{d}/bucket-{i}")).collect(),
            sorted: (0..p.buckets).map(|i| format!("{d}/sorted-{i}")).collect(),
            output: format!("{d}/output"),
        }
    }
}

fn create_r1(client: &Arc<Client>, path: &str) -> Result<()> {
    if client.exists(path)? {
        client.unlink(path)?;
    }
    client.open(path, OpenFlags::create_new().with_replication(1)).map(|_| ())
}

/// Generates the input and pre-creates every file the stages touch, so the
/// stages themselves only move record data.
fn setup(client: &Arc<Client>, p: &SortParams, l: &Layout) -> Result<()> {
    if p.record == 0 || !p.size.is_multiple_of(p.record) || p.key_len == 0 || p.key_len as u64 > p.record {
        return Err(Error::invalid("size must be a multiple of record, key_len within record"));
    }
    if p.buckets == 0 || p.workers == 0 {
        return Err(Error::invalid("buckets and workers must be positive"));
    }
    client.mkdir_all(&p.dir)?;
    for path in std::iter::once(&l.input).chain(&l.buckets).chain(&l.sorted).chain(std::iter::once(&l.output)) {
        create_r1(client, path)?;
    }
    let mut rng = StdRng::seed_from_u64(p.seed);
    let mut f = client.open(&l.input, OpenFlags::read_write())?;
    let chunk = (8 << 20) / p.record * p.record;
    let chunk = chunk.max(p.record);
    let mut left = p.size;
    while left > 0 {
        let n = left.min(chunk);
        let mut buf = vec![0u8; n as usize];
        rng.fill_bytes(&mut buf);
        f.write(&buf)?;
        left -= n;
    }
    Ok(())
}

/// Splits `n` records into `workers` contiguous ranges.
fn ranges(n: u64, workers: usize) -> Vec<(u64, u64)> {
    let w = workers as u64;
    (0..w).map(|i| (n * i / w, n * (i + 1) / w)).filter(|(a, b)| a < b).collect()
}

fn stage<F: FnOnce() -> Result<()>>(client: &Client, name: &'static str, f: F) -> Result<StageReport> {
    let before = cluster_counters(client)?;
    let t = Instant::now();
    f()?;
    let elapsed = t.elapsed();
    let after = cluster_counters(client)?;
    Ok(StageReport {
        name,
        elapsed,
        bytes_read: after.bytes_read - before.bytes_read,
        bytes_written: after.bytes_written - before.bytes_written,
    })
}

/// Bytes moved per read or write call.
const READ_CHUNK: u64 = 4 << 20;

fn conventional(client: &Arc<Client>, p: &SortParams, l: &Layout) -> Result<Vec<StageReport>> {
    let rec = p.record;
    let n = p.size / rec;
    let per_chunk = (READ_CHUNK / rec).max(1);
    let s1 = stage(client, "bucketing", || {
        std::thread::scope(|s| {
            let handles: Vec<_> = ranges(n, p.workers)
                .into_iter()
                .map(|(a, b)| {
                    s.spawn(move || -> Result<()> {
                        let input = client.open(&l.input, OpenFlags::read_only())?;
                        let mut outs = Vec::with_capacity(p.buckets);
                        for path in &l.buckets {
                            outs.push(client.open(path, OpenFlags::read_write())?);
                        }
                        let mut i = a;
                        while i < b {
                            let k = per_chunk.min(b - i);
                            let data = input.pread(i * rec, k * rec)?;
                            let mut batches = vec![Vec::new(); p.buckets];
                            for r in data.chunks(rec as usize) {
                                batches[bucket_of(&r[..p.key_len], p.buckets)].extend_from_slice(r);
                            }
                            for (bi, batch) in batches.iter().enumerate() {
                                if !batch.is_empty() {
                                    outs[bi].append(batch)?;
                                }
                            }
                            i += k;
                        }
                        Ok(())
                    })
                })
                .collect();
            handles.into_iter().try_for_each(|h| h.join().expect("worker panicked"))
        })
    })?;
    let next = Mutex::new(0usize);
    let s2 = stage(client, "sorting", || {
        std::thread::scope(|s| {
            let handles: Vec<_> = (0..p.workers)
                .map(|_| {
                    s.spawn(|| -> Result<()> {
                        loop {
                            let bi = {
                                let mut g = next.lock();
                                *g += 1;
                                *g - 1
                            };
                            if bi >= p.buckets {
                                return Ok(());
                            }
                            let data = client.read_file(&l.buckets[bi])?;
                            if data.is_empty() {
                                continue;
                            }
                            let mut recs: Vec<&[u8]> = data.chunks(rec as usize).collect();
                            recs.sort_by(|x, y| x[..p.key_len].cmp(&y[..p.key_len]));
                            let mut out = client.open(&l.sorted[bi], OpenFlags::read_write())?;
                            for group in recs.chunks(per_chunk as usize) {
                                out.write(&group.concat())?;
                            }
                        }
                    })
                })
                .collect();
            handles.into_iter().try_for_each(|h| h.join().expect("worker panicked"))
        })
    })?;
    let s3 = stage(client, "merging", || {
        let mut out = client.open(&l.output, OpenFlags::read_write())?;
        for path in &l.sorted {
            let f = client.open(path, OpenFlags::read_only())?;
            let len = f.len()?;
            let mut off = 0;
            while off < len {
                let data = f.pread(off, READ_CHUNK.min(len - off))?;
                out.write(&data)?;
                off += data.len() as u64;
            }
        }
        Ok(())
    })?;
    Ok(vec![s1, s2, s3])
}

fn slicing(client: &Arc<Client>, p: &SortParams, l: &Layout) -> Result<Vec<StageReport>> {
    let rec = p.record;
    let n = p.size / rec;
    let per_chunk = (READ_CHUNK / rec).max(1);
    let s1 = stage(client, "bucketing", || {
        // Each worker reads its share and yanks it; records are then
        // routed to buckets as pointer lists.
        let routed: Vec<Vec<Vec<SliceEntry>>> = std::thread::scope(|s| {
            let handles: Vec<_> = ranges(n, p.workers)
                .into_iter()
                .map(|(a, b)| {
                    s.spawn(move || -> Result<Vec<Vec<SliceEntry>>> {
                        let mut input = client.open(&l.input, OpenFlags::read_only())?;
                        let mut per_bucket = vec![Vec::new(); p.buckets];
                        let mut fill = vec![0u64; p.buckets];
                        let mut i = a;
                        while i < b {
                            let k = per_chunk.min(b - i);
                            input.seek(SeekFrom::Start(i * rec))?;
                            let y = input.yank(k * rec, true)?;
                            let data = y.data.as_deref().unwrap_or_default();
                            for j in 0..k {
                                let r = &data[(j * rec) as usize..((j + 1) * rec) as usize];
                                let bi = bucket_of(&r[..p.key_len], p.buckets);
                                for mut e in sub_entries(&y.entries, j * rec, rec)? {
                                    let off = e.offset().unwrap_or(0);
                                    e.placement = Placement::Absolute(fill[bi] + off);
                                    per_bucket[bi].push(e);
                                }
                                fill[bi] += rec;
                            }
                            i += k;
                        }
                        Ok(per_bucket)
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("worker panicked")).collect::<Result<Vec<_>>>()
        })?;
        for bi in 0..p.buckets {
            let mut out = client.open(&l.buckets[bi], OpenFlags::read_write())?;
            for worker in &routed {
                let entries = &worker[bi];
                if entries.is_empty() {
                    continue;
                }
                out.paste(entries)?;
            }
        }
        Ok(())
    })?;
    let next = Mutex::new(0usize);
    let s2 = stage(client, "sorting", || {
        std::thread::scope(|s| {
            let handles: Vec<_> = (0..p.workers)
                .map(|_| {
                    s.spawn(|| -> Result<()> {
                        loop {
                            let bi = {
                                let mut g = next.lock();
                                *g += 1;
                                *g - 1
                            };
                            if bi >= p.buckets {
                                return Ok(());
                            }
                            let mut f = client.open(&l.buckets[bi], OpenFlags::read_only())?;
                            let len = f.len()?;
                            if len == 0 {
                                continue;
                            }
                            let y = f.yank(len, true)?;
                            let data = y.data.as_deref().unwrap_or_default();
                            let mut order: Vec<u64> = (0..len / rec).collect();
                            order.sort_by(|&x, &y| {
                                let kx = &data[(x * rec) as usize..][..p.key_len];
                                let ky = &data[(y * rec) as usize..][..p.key_len];
                                kx.cmp(ky)
                            });
                            let mut sorted = Vec::with_capacity(y.entries.len());
                            for (pos, &r) in order.iter().enumerate() {
                                for mut e in sub_entries(&y.entries, r * rec, rec)? {
                                    let off = e.offset().unwrap_or(0);
                                    e.placement = Placement::Absolute(pos as u64 * rec + off);
                                    sorted.push(e);
                                }
                            }
                            client.open(&l.sorted[bi], OpenFlags::read_write())?.paste(&sorted)?;
                        }
                    })
                })
                .collect();
            handles.into_iter().try_for_each(|h| h.join().expect("worker panicked"))
        })
    })?;
    let s3 = stage(client, "merging", || {
        let srcs: Vec<&str> = l.sorted.iter().map(String::as_str).collect();
        client.concat(&srcs, &l.output, true)
    })?;
    Ok(vec![s1, s2, s3])
}

fn verify(client: &Arc<Client>, p: &SortParams, l: &Layout) -> Result<()> {
    let input = client.read_file(&l.input)?;
    let output = client.read_file(&l.output)?;
    if output.len() != input.len() {
        return Err(Error::VerificationFailed(format!("output has {} bytes, input {}", output.len(), input.len())));
    }
    let rec = p.record as usize;
    let out: Vec<&[u8]> = output.chunks(rec).collect();
    if out.windows(2).any(|w| w[0][..p.key_len] > w[1][..p.key_len]) {
        return Err(Error::VerificationFailed("output is not sorted".into()));
    }
    let mut a: Vec<&[u8]> = input.chunks(rec).collect();
    let mut b = out;
    a.sort_unstable();
    b.sort_unstable();
    if a != b {
        return Err(Error::VerificationFailed("output is not a permutation of the input".into()));
    }
    Ok(())
}

/// Runs the benchmark end to end and verifies the output.
pub fn sort(client: &Arc<Client>, p: &SortParams) -> Result<SortReport> {
    let l = Layout::new(p);
    setup(client, p, &l)?;
    let stages = match p.mode {
        SortMode::Conventional => conventional(client, p, &l)?,
        SortMode::Slicing => slicing(client, p, &l)?,
    };
    verify(client, p, &l)?;
    Ok(SortReport { mode: p.mode, size: p.size, stages, verified: true })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cluster::{ClusterConfig, LocalCluster};
    use crate::slice::{ServerId, SlicePointer};

    #[test]
    fn buckets_partition_key_space_in_order() {
        assert_eq!(bucket_of(&[0; 10], 16), 0);
        assert_eq!(bucket_of(&[0xff; 10], 16), 15);
        assert_eq!(bucket_of(&[0x80, 0], 16), 8);
        let mut prev = 0;
        for b in 0..=255u8 {
            let x = bucket_of(&[b, 0x12, 0x34], 7);
            assert!(x >= prev && x < 7);
            prev = x;
        }
    }

    #[test]
    fn sub_entries_rebase() {
        let p = |off, len| SlicePointer::new(ServerId(1), "b0", off, len);
        let es = vec![SliceEntry::at(vec![p(0, 100)], 0).unwrap(), SliceEntry::at(vec![p(500, 50)], 100).unwrap()];
        let got = sub_entries(&es, 90, 20).unwrap();
        assert_eq!(got, vec![SliceEntry::at(vec![p(90, 10)], 0).unwrap(), SliceEntry::at(vec![p(500, 10)], 10).unwrap()]);
    }

    #[test]
    fn single_record_sort_is_identity() {
        let c = LocalCluster::start(ClusterConfig::default()).unwrap();
        let client = c.default_client().unwrap();
        for mode in [SortMode::Conventional, SortMode::Slicing] {
            let p = SortParams { size: 4096, record: 4096, mode, dir: format!("/s-{mode}"), ..Default::default() };
            let r = sort(&client, &p).unwrap();
            assert!(r.verified);
            assert_eq!(
                client.read_file(&format!("/s-{mode}/output")).unwrap(),
                client.read_file(&format!("/s-{mode}/input")).unwrap()
            );
        }
    }

    #[test]
    fn small_sort_accounting() {
        let c = LocalCluster::start(ClusterConfig::default()).unwrap();
        let client = c.default_client().unwrap();
        let size = 4 << 20;
        for mode in [SortMode::Conventional, SortMode::Slicing] {
            let p = SortParams { size, record: 16 << 10, mode, dir: format!("/s-{mode}"), ..Default::default() };
            let r = sort(&client, &p).unwrap();
            match mode {
                SortMode::Slicing => {
                    assert_eq!(r.bytes_written(), 0);
                    assert_eq!(r.bytes_read(), 2 * size);
                    assert_eq!(r.stages[2].bytes_read, 0);
                }
                SortMode::Conventional => {
                    assert_eq!(r.bytes_written(), 3 * size);
                    assert_eq!(r.bytes_read(), 3 * size);
                }
            }
        }
    }

    #[test]
    fn rejects_ragged_sizes() {
        let c = LocalCluster::start(ClusterConfig::default()).unwrap();
        let client = c.default_client().unwrap();
        let p = SortParams { size: 1000, record: 300, ..Default::default() };
        assert!(matches!(sort(&client, &p), Err(Error::InvalidArgument(_))));
    }
}
