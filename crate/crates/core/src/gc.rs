//! Garbage collection orchestration.
//!
//! Three tiers: compacting a region's metadata list in place, spilling an
//! oversized compacted list into a slice, and the filesystem-wide scan that
//! tells each storage server which of its bytes are still referenced.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::client::layout::{encode_entry_list, inode_key, parse_region_key, region_key, Inode, RegionItem};
use crate::client::Client;
use crate::error::{Error, Result};
use crate::meta::{ListValue, Mutation, Value, WriteOp, SPACE_CONFIG, SPACE_INODES, SPACE_REGIONS};
use crate::slice::{compact, ServerId, SlicePointer};
use crate::storage::{GcReport, InUseList, RegionHint};

/// Reserved directory holding the per-server in-use lists.
pub const GC_DIR: &str = "/.slicefs-gc";
pub const DEFAULT_SPILL_THRESHOLD: usize = 1024;
const SCAN_COUNTER_KEY: &[u8] = b"gc.scan";
const PUBLISHED_KEY: &[u8] = b"gc.published";
/// Scans whose list files are kept; older ones are unlinked.
const KEEP_SCANS: u64 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CompactionStats {
    pub entries_before: usize,
    pub entries_after: usize,
    pub changed: bool,
}

struct RegionSnapshot {
    version: u64,
    list: ListValue,
    ino: Inode,
}

fn snapshot(client: &Client, inode: u64, region: u64) -> Result<RegionSnapshot> {
    let meta = client.meta();
    let ino = Inode::decode(meta.get(SPACE_INODES, &inode_key(inode))?.value.as_bytes()?)?;
    let snap = meta.read(SPACE_REGIONS, &region_key(inode, region))?;
    let list = snap.value.ok_or(Error::NotFound)?.as_list()?.clone();
    Ok(RegionSnapshot { version: snap.version, list, ino })
}

fn is_spilled(list: &ListValue) -> Result<bool> {
    for raw in &list.items {
        if let RegionItem::Spill { .. } = RegionItem::decode(raw)? {
            return Ok(true);
        }
    }
    Ok(false)
}

fn replace_list(client: &Client, inode: u64, region: u64, expected: u64, list: ListValue) -> Result<()> {
    let write = WriteOp {
        space: SPACE_REGIONS.into(),
        key: region_key(inode, region),
        mutation: Mutation::CondPut { expected_version: expected, value: Value::List(list) },
    };
    client.meta().commit(&[], &[write]).map(|_| ())
}

/// Replaces a region's list with its compacted form. Touches metadata only
/// (unless the region was spilled). A concurrent writer makes this return
/// `Conflict` and leave the region alone.
pub fn compact_region(client: &Client, inode: u64, region: u64) -> Result<CompactionStats> {
    let s = snapshot(client, inode, region)?;
    let entries = client.expand_items(&s.list.items)?;
    let compacted = compact(&entries, s.ino.region_size)?;
    let before = entries.len();
    let after = compacted.len();
    if !is_spilled(&s.list)? && compacted == entries {
        return Ok(CompactionStats { entries_before: before, entries_after: after, changed: false });
    }
    let items = compacted.into_iter().map(|e| RegionItem::Entry(e).encode()).collect();
    replace_list(client, inode, region, s.version, ListValue { end: s.list.end, items })?;
    Ok(CompactionStats { entries_before: before, entries_after: after, changed: true })
}

/// When the compacted list is longer than `threshold`, stores it in a slice
/// and leaves a single indirection item. Returns whether it spilled.
pub fn spill_region(client: &Client, inode: u64, region: u64, threshold: usize) -> Result<bool> {
    let s = snapshot(client, inode, region)?;
    let entries = client.expand_items(&s.list.items)?;
    let compacted = compact(&entries, s.ino.region_size)?;
    if compacted.len() <= threshold {
        return Ok(false);
    }
    let bytes = encode_entry_list(&compacted);
    let hint = RegionHint { file_id: inode, region_index: region };
    let replicas = client.store_slice(hint, &bytes, s.ino.replication as usize)?;
    let item = RegionItem::Spill { replicas, count: compacted.len() as u64 };
    replace_list(client, inode, region, s.version, ListValue { end: s.list.end, items: vec![item.encode()] })?;
    Ok(true)
}

/// Compacts (and spills where needed) every region with at least
/// `min_entries` items, longest lists first. Conflicts are skipped.
pub fn sweep(client: &Client, min_entries: usize, spill_threshold: usize) -> Result<Vec<(u64, u64, CompactionStats)>> {
    let mut regions: Vec<(usize, u64, u64)> = Vec::new();
    for (key, v) in client.meta().scan(SPACE_REGIONS)? {
        let n = v.value.as_list()?.items.len();
        if n >= min_entries {
            let (inode, region) = parse_region_key(&key)?;
            regions.push((n, inode, region));
        }
    }
    regions.sort_by_key(|r| std::cmp::Reverse(r.0));
    let mut out = Vec::new();
    for (_, inode, region) in regions {
        match compact_region(client, inode, region) {
            Ok(stats) => {
                if stats.entries_after > spill_threshold {
                    match spill_region(client, inode, region, spill_threshold) {
                        Ok(_) | Err(Error::Conflict) | Err(Error::NotFound) => {}
                        Err(e) => return Err(e),
                    }
                }
                out.push((inode, region, stats));
            }
            Err(Error::Conflict) | Err(Error::NotFound) => {}
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Default)]
pub struct ScanReport {
    pub scan_id: u64,
    /// Servers that took part, with what they reported collectible.
    pub reports: Vec<(ServerId, GcReport)>,
    /// Referenced bytes per server.
    pub referenced: BTreeMap<ServerId, u64>,
}

fn next_scan_id(client: &Client) -> Result<u64> {
    let meta = client.meta();
    loop {
        let snap = meta.read(SPACE_CONFIG, SCAN_COUNTER_KEY)?;
        let cur = match &snap.value {
            Some(v) => u64::from_be_bytes(v.as_bytes()?.try_into().map_err(|_| Error::corrupt("scan counter"))?),
            None => 0,
        };
        let write = WriteOp {
            space: SPACE_CONFIG.into(),
            key: SCAN_COUNTER_KEY.to_vec(),
            mutation: Mutation::CondPut {
                expected_version: snap.version,
                value: Value::Bytes((cur + 1).to_be_bytes().to_vec()),
            },
        };
        match meta.commit(&[], &[write]) {
            Ok(_) => return Ok(cur + 1),
            Err(Error::Conflict) => continue,
            Err(e) => return Err(e),
        }
    }
}

/// The last scan whose lists were delivered to servers.
pub fn last_published_scan(client: &Client) -> Result<Option<u64>> {
    match client.meta().read(SPACE_CONFIG, PUBLISHED_KEY)?.value {
        Some(v) => Ok(Some(u64::from_be_bytes(v.as_bytes()?.try_into().map_err(|_| Error::corrupt("scan id"))?))),
        None => Ok(None),
    }
}

fn add_pointers(lists: &mut BTreeMap<ServerId, Vec<(String, u64, u64)>>, ptrs: &[SlicePointer]) {
    for p in ptrs {
        if let Some(l) = lists.get_mut(&p.server_id) {
            l.push((p.backing_file.clone(), p.file_offset, p.length));
        }
    }
}

/// Runs one filesystem-wide scan: announces it to every server, walks all
/// region lists (spilled ones included) collecting the visible extents of
/// each, stores each server's in-use list
/// as a file under [`GC_DIR`], then hands the lists to the servers. If any
/// step before hand-off fails, no server sees this scan.
pub fn global_scan(client: &Arc<Client>) -> Result<ScanReport> {
    let scan_id = next_scan_id(client)?;
    let membership = client.refresh_membership()?;
    let mut lists: BTreeMap<ServerId, Vec<(String, u64, u64)>> = BTreeMap::new();
    for s in &membership.servers {
        match client.service(s.id).and_then(|svc| svc.begin_scan(scan_id)) {
            Ok(()) => {
                lists.insert(s.id, Vec::new());
            }
            Err(e) => log::warn!("server {} skipped in scan {scan_id}: {e}", s.id),
        }
    }

    let mut region_sizes: BTreeMap<u64, u64> = BTreeMap::new();
    for (key, v) in client.meta().scan(SPACE_INODES)? {
        let ino = Inode::decode(v.value.as_bytes()?)?;
        if key == inode_key(ino.id) {
            region_sizes.insert(ino.id, ino.region_size);
        }
    }
    for (key, v) in client.meta().scan(SPACE_REGIONS)? {
        let (inode, _) = parse_region_key(&key)?;
        let items = &v.value.as_list()?.items;
        for raw in items {
            if let RegionItem::Spill { replicas, .. } = RegionItem::decode(raw)? {
                add_pointers(&mut lists, &replicas);
            }
        }
        let entries = client.expand_items(items)?;
        // Only what a reader can still see is live; overwritten and
        // punched bytes are garbage.
        let live = match region_sizes.get(&inode) {
            Some(&rs) => compact(&entries, rs)?,
            None => entries,
        };
        for e in &live {
            add_pointers(&mut lists, e.replicas());
        }
    }

    let mut report = ScanReport { scan_id, ..Default::default() };
    let mut encoded = Vec::with_capacity(lists.len());
    for (id, extents) in lists {
        let list = InUseList::from_extents(id, scan_id, extents);
        report.referenced.insert(id, list.extents.iter().map(|e| e.2).sum());
        let dir = format!("{GC_DIR}/{}", id.0);
        client.mkdir_all(&dir)?;
        client.write_file(&format!("{dir}/{scan_id}"), &list.encode(), true)?;
        encoded.push(list);
    }
    client.meta().put(SPACE_CONFIG, PUBLISHED_KEY, Value::Bytes(scan_id.to_be_bytes().to_vec()))?;

    for list in &encoded {
        match client.service(list.server_id).and_then(|svc| svc.apply_in_use_list(list)) {
            Ok(r) => report.reports.push((list.server_id, r)),
            Err(e) => log::warn!("server {} did not take scan {scan_id}: {e}", list.server_id),
        }
    }

    for list in &encoded {
        let dir = format!("{GC_DIR}/{}", list.server_id.0);
        for name in client.readdir(&dir)? {
            if let Ok(old) = name.parse::<u64>() {
                if old + KEEP_SCANS <= scan_id {
                    match client.unlink(&format!("{dir}/{name}")) {
                        Ok(()) | Err(Error::NotFound) => {}
                        Err(e) => return Err(e),
                    }
                }
            }
        }
    }
    Ok(report)
}

/// Reads back a stored in-use list.
pub fn read_in_use_list(client: &Arc<Client>, server: ServerId, scan_id: u64) -> Result<InUseList> {
    let bytes = client.read_file(&format!("{GC_DIR}/{}/{scan_id}", server.0))?;
    InUseList::decode(server, &bytes)
}

/// Collects every candidate in each report, most garbage first. Returns
/// `(server, backing_file, bytes_reclaimed)` per collection.
pub fn collect(client: &Client, report: &ScanReport) -> Result<Vec<(ServerId, String, u64)>> {
    let mut out = Vec::new();
    for (id, r) in &report.reports {
        let svc = client.service(*id)?;
        for (name, _) in &r.candidates {
            let n = svc.collect_backing_file(name)?;
            out.push((*id, name.clone(), n));
        }
    }
    Ok(out)
}
