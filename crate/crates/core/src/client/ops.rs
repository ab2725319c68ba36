//! Filesystem operations expressed against one metadata transaction.
//!
//! Nothing here commits. Callers (the retry layer) decide when to commit and
//! how to replay.

use std::collections::BTreeMap;

use rand::Rng;

use super::layout::{
    decode_entry_list, decode_path_record, encode_dir_record, encode_path_record, inode_key, normalize,
    parse_dir, region_key, split_parent, Inode, RegionItem, KIND_DIR, KIND_FILE, PERM_W, ROOT_INODE,
};
use super::{now_millis, Client, MAX_SLICE};
use crate::error::{Error, Result};
use crate::meta::{ListValue, Txn, Value, SPACE_INODES, SPACE_PATHS, SPACE_REGIONS};
use crate::slice::{
    coalesce, region_split, resolve_entries, subrange_pointer, ExtentSource, Placement, ResolvedExtent, SliceEntry,
};
use crate::storage::RegionHint;

/// Side effects of the first execution that a replay must reuse rather than
/// redo: allocated inode ids and entry lists for data already stored.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub(crate) struct Memo {
    pub ids: Vec<u64>,
    pub stored: Vec<Vec<SliceEntry>>,
    ids_used: usize,
    stored_used: usize,
}

impl Memo {
    pub fn rewind(&mut self) {
        self.ids_used = 0;
        self.stored_used = 0;
    }

    fn next_id(&mut self) -> u64 {
        if let Some(&id) = self.ids.get(self.ids_used) {
            self.ids_used += 1;
            return id;
        }
        let id = rand::thread_rng().gen_range(ROOT_INODE + 1..u64::MAX);
        self.ids.push(id);
        self.ids_used += 1;
        id
    }
}

/// File-level extent: `region_offset` holds the absolute file offset.
pub(crate) type FileExtent = ResolvedExtent;

pub(crate) struct Ops<'a> {
    pub c: &'a Client,
    pub t: &'a mut Txn,
    pub memo: &'a mut Memo,
}

fn shift(entries: Vec<SliceEntry>, by: u64) -> Vec<SliceEntry> {
    entries
        .into_iter()
        .map(|e| {
            let off = e.offset().expect("absolute entry");
            e.with_placement(Placement::Absolute(off + by))
        })
        .collect()
}

fn extent_entry(ext: &FileExtent, base: u64) -> SliceEntry {
    let placement = Placement::Absolute(ext.region_offset - base);
    match &ext.source {
        ExtentSource::Zeros => SliceEntry::hole(0, ext.length).unwrap().with_placement(placement),
        ExtentSource::Slice(r) => SliceEntry::data(r.clone(), placement).unwrap(),
    }
}

impl<'a> Ops<'a> {
    pub fn new(c: &'a Client, t: &'a mut Txn, memo: &'a mut Memo) -> Self {
        Ops { c, t, memo }
    }

    // ---- metadata records ----

    pub fn inode(&mut self, id: u64) -> Result<Inode> {
        match self.t.get(SPACE_INODES, &inode_key(id))? {
            Some(v) => Inode::decode(v.as_bytes()?),
            None => Err(Error::NotFound),
        }
    }

    fn put_inode(&mut self, ino: &Inode) -> Result<()> {
        self.t.put(SPACE_INODES, &inode_key(ino.id), Value::Bytes(ino.encode()))
    }

    /// One metadata read, whatever the path depth.
    pub fn lookup(&mut self, path: &str) -> Result<u64> {
        match self.t.get(SPACE_PATHS, path.as_bytes())? {
            Some(v) => decode_path_record(v.as_bytes()?),
            None => Err(Error::NotFound),
        }
    }

    fn region_list(&mut self, ino: &Inode, idx: u64) -> Result<Option<ListValue>> {
        match self.t.get(SPACE_REGIONS, &region_key(ino.id, idx))? {
            Some(v) => Ok(Some(v.as_list()?.clone())),
            None => Ok(None),
        }
    }

    /// A region's entries in replay order, spilled lists dereferenced.
    pub fn region_entries(&mut self, ino: &Inode, idx: u64) -> Result<Vec<SliceEntry>> {
        match self.region_list(ino, idx)? {
            None => Ok(Vec::new()),
            Some(l) => self.c.expand_items(&l.items),
        }
    }

    pub fn length(&mut self, ino: &Inode) -> Result<u64> {
        let end = self.region_list(ino, ino.highest_region)?.map_or(0, |l| l.end);
        Ok(ino.highest_region * ino.region_size + end)
    }

    // ---- data ----

    /// Extents covering exactly `[off, off + len)`, gaps as zeros.
    pub fn extents(&mut self, ino: &Inode, off: u64, len: u64) -> Result<Vec<FileExtent>> {
        let rs = ino.region_size;
        let mut out = Vec::new();
        for piece in region_split(off, len, rs) {
            let base = piece.region_index * rs;
            let lo = piece.offset_in_region;
            let hi = lo + piece.length;
            let resolved = if piece.region_index > ino.highest_region {
                Vec::new()
            } else {
                let entries = self.region_entries(ino, piece.region_index)?;
                resolve_entries(&entries, rs)?.extents
            };
            let mut pos = lo;
            let first = resolved.partition_point(|e| e.region_offset + e.length <= lo);
            for ext in &resolved[first..] {
                let s = ext.region_offset.max(lo);
                let e = (ext.region_offset + ext.length).min(hi);
                if s >= hi {
                    break;
                }
                if s >= e {
                    continue;
                }
                if s > pos {
                    out.push(FileExtent { region_offset: base + pos, length: s - pos, source: ExtentSource::Zeros });
                }
                let source = match &ext.source {
                    ExtentSource::Zeros => ExtentSource::Zeros,
                    ExtentSource::Slice(r) => ExtentSource::Slice(
                        r.iter()
                            .map(|p| subrange_pointer(p, s - ext.region_offset, e - s))
                            .collect::<Result<_>>()?,
                    ),
                };
                out.push(FileExtent { region_offset: base + s, length: e - s, source });
                pos = e;
            }
            if pos < hi {
                out.push(FileExtent { region_offset: base + pos, length: hi - pos, source: ExtentSource::Zeros });
            }
        }
        Ok(coalesce(out))
    }

    /// Reads up to `len` bytes at `off`; short at end of file. Also returns
    /// the extents the bytes came from.
    pub fn read(&mut self, ino: &Inode, off: u64, len: u64) -> Result<(Vec<u8>, Vec<FileExtent>)> {
        let flen = self.length(ino)?;
        if off >= flen || len == 0 {
            return Ok((Vec::new(), Vec::new()));
        }
        let len = len.min(flen - off);
        let extents = self.extents(ino, off, len)?;
        let mut buf = Vec::with_capacity(len as usize);
        for ext in &extents {
            match &ext.source {
                ExtentSource::Zeros => buf.resize(buf.len() + ext.length as usize, 0),
                ExtentSource::Slice(r) => {
                    let data = self.c.fetch(r)?;
                    if data.len() as u64 != ext.length {
                        return Err(Error::corrupt("short slice read"));
                    }
                    buf.extend_from_slice(&data);
                }
            }
        }
        Ok((buf, extents))
    }

    /// Stores `data` (destined for `off`) on storage servers and returns
    /// entries relative to the start of the data. A replay gets the
    /// memoized entries back and needs no data.
    pub fn store(&mut self, ino: &Inode, off: u64, data: Option<&[u8]>) -> Result<Vec<SliceEntry>> {
        if let Some(e) = self.memo.stored.get(self.memo.stored_used) {
            self.memo.stored_used += 1;
            return Ok(e.clone());
        }
        let data = data.ok_or_else(|| Error::Protocol("replayed write has no memoized slices".into()))?;
        let mut entries = Vec::new();
        for piece in region_split(off, data.len() as u64, ino.region_size) {
            let piece_start = piece.region_index * ino.region_size + piece.offset_in_region - off;
            let mut done = 0;
            while done < piece.length {
                let n = (piece.length - done).min(MAX_SLICE);
                let rel = piece_start + done;
                let hint = RegionHint { file_id: ino.id, region_index: piece.region_index };
                let ptrs =
                    self.c.store_slice(hint, &data[rel as usize..(rel + n) as usize], ino.replication as usize)?;
                entries.push(SliceEntry::at(ptrs, rel)?);
                done += n;
            }
        }
        self.memo.stored.push(entries.clone());
        self.memo.stored_used += 1;
        Ok(entries)
    }

    /// Lays entries (absolute offsets relative to `off`) onto the file's
    /// region lists. Metadata only. Returns the extent covered.
    pub fn paste(&mut self, ino_id: u64, off: u64, entries: &[SliceEntry]) -> Result<u64> {
        let mut ino = self.inode(ino_id)?;
        let rs = ino.region_size;
        let mut total = 0u64;
        let mut highest = None;
        for entry in entries {
            entry.validate()?;
            let rel = match entry.placement {
                Placement::Absolute(x) => x,
                Placement::RelativeToEnd => return Err(Error::invalid("paste needs absolute entries")),
            };
            let start = off.checked_add(rel).ok_or(Error::OutOfRange)?;
            total = total.max(rel + entry.length);
            let mut consumed = 0;
            for piece in region_split(start, entry.length, rs) {
                let sub = entry.subrange(consumed, piece.length, Placement::Absolute(piece.offset_in_region))?;
                self.t.list_append(
                    SPACE_REGIONS,
                    &region_key(ino.id, piece.region_index),
                    RegionItem::Entry(sub).encode(),
                    piece.offset_in_region + piece.length,
                )?;
                consumed += piece.length;
                highest = highest.max(Some(piece.region_index));
            }
        }
        if let Some(h) = highest {
            if h > ino.highest_region {
                ino.highest_region = h;
                ino.mtime = now_millis();
                self.put_inode(&ino)?;
            }
        }
        Ok(total)
    }

    pub fn write(&mut self, ino_id: u64, off: u64, data: Option<&[u8]>) -> Result<u64> {
        let ino = self.inode(ino_id)?;
        let entries = self.store(&ino, off, data)?;
        self.paste(ino_id, off, &entries)
    }

    pub fn punch(&mut self, ino_id: u64, off: u64, len: u64) -> Result<()> {
        if len == 0 {
            return Err(Error::invalid("punch of zero bytes"));
        }
        self.paste(ino_id, off, &[SliceEntry::hole(0, len)?])?;
        Ok(())
    }

    /// Compacted entries describing `[off, off + len)`, offsets relative to
    /// `off`, gaps as holes. Metadata only.
    pub fn yank(&mut self, ino: &Inode, off: u64, len: u64) -> Result<Vec<SliceEntry>> {
        let flen = self.length(ino)?;
        if off.checked_add(len).is_none_or(|end| end > flen) {
            return Err(Error::OutOfRange);
        }
        Ok(self.extents(ino, off, len)?.iter().map(|e| extent_entry(e, off)).collect())
    }

    /// Replaces the whole content of a file with `entries` laid from offset
    /// 0, and sets its length to `total`.
    pub fn replace(&mut self, ino_id: u64, entries: &[SliceEntry], total: u64) -> Result<()> {
        let mut ino = self.inode(ino_id)?;
        let rs = ino.region_size;
        let new_h = if total == 0 { 0 } else { (total - 1) / rs };
        let mut lists: BTreeMap<u64, Vec<Vec<u8>>> = BTreeMap::new();
        for entry in entries {
            let start = entry.offset().ok_or_else(|| Error::invalid("replace needs absolute entries"))?;
            let mut consumed = 0;
            for piece in region_split(start, entry.length.min(total.saturating_sub(start)), rs) {
                let sub = entry.subrange(consumed, piece.length, Placement::Absolute(piece.offset_in_region))?;
                lists.entry(piece.region_index).or_default().push(RegionItem::Entry(sub).encode());
                consumed += piece.length;
            }
        }
        for i in 0..=ino.highest_region.max(new_h) {
            let key = region_key(ino.id, i);
            if i <= new_h {
                let end = rs.min(total.saturating_sub(i * rs));
                let items = lists.remove(&i).unwrap_or_default();
                self.t.put(SPACE_REGIONS, &key, Value::List(ListValue { end, items }))?;
            } else {
                self.t.delete(SPACE_REGIONS, &key)?;
            }
        }
        ino.highest_region = new_h;
        ino.mtime = now_millis();
        self.put_inode(&ino)
    }

    // ---- namespace ----

    fn writable_dir(&mut self, id: u64) -> Result<Inode> {
        let dir = self.inode(id)?;
        if !dir.is_dir() {
            return Err(Error::NotADirectory);
        }
        if !dir.allows(self.c.options().uid, self.c.options().gid, PERM_W) {
            return Err(Error::PermissionDenied);
        }
        Ok(dir)
    }

    fn parent_dir(&mut self, path: &str) -> Result<(u64, String)> {
        let (parent, name) = split_parent(path)?;
        let pid = self.lookup(parent)?;
        self.writable_dir(pid)?;
        Ok((pid, name.to_string()))
    }

    fn ensure_absent(&mut self, path: &str) -> Result<()> {
        if path == "/" || self.t.get(SPACE_PATHS, path.as_bytes())?.is_some() {
            return Err(Error::Exists);
        }
        Ok(())
    }

    fn dir_add(&mut self, dir_id: u64, name: &str, id: u64) -> Result<()> {
        let dir = self.inode(dir_id)?;
        let eof = self.length(&dir)?;
        let rec = encode_dir_record(name, id);
        let entries = self.store(&dir, eof, Some(&rec))?;
        self.paste(dir_id, eof, &entries)?;
        Ok(())
    }

    /// Drops a name's record by rebuilding the directory from the pieces on
    /// either side of it. Metadata only, apart from reading the records.
    fn dir_remove(&mut self, dir_id: u64, name: &str) -> Result<()> {
        let dir = self.inode(dir_id)?;
        let len = self.length(&dir)?;
        let (bytes, _) = self.read(&dir, 0, len)?;
        let (_, _, start, rlen) = parse_dir(&bytes)?
            .into_iter()
            .rev()
            .find(|r| r.0 == name)
            .ok_or_else(|| Error::corrupt(format!("directory has no record for {name:?}")))?;
        let mut entries = if start > 0 { self.yank(&dir, 0, start)? } else { Vec::new() };
        let tail = len - start - rlen;
        if tail > 0 {
            entries.extend(shift(self.yank(&dir, start + rlen, tail)?, start));
        }
        self.replace(dir_id, &entries, len - rlen)
    }

    pub fn create_node(&mut self, path: &str, kind: u8, mode: u32, replication: Option<u8>) -> Result<Inode> {
        let path = normalize(path)?;
        self.ensure_absent(&path)?;
        let (pid, name) = self.parent_dir(&path)?;
        let id = loop {
            let id = self.memo.next_id();
            if self.t.get(SPACE_INODES, &inode_key(id))?.is_none() {
                break id;
            }
        };
        let opts = self.c.options();
        let ino = Inode {
            id,
            kind,
            link_count: 1,
            mtime: now_millis(),
            mode,
            uid: opts.uid,
            gid: opts.gid,
            highest_region: 0,
            region_size: self.c.fs_config().region_size,
            replication: replication.unwrap_or_else(|| self.c.replication_for_new_files()),
        };
        if ino.replication == 0 {
            return Err(Error::invalid("replication must be positive"));
        }
        self.put_inode(&ino)?;
        self.t.put(SPACE_PATHS, path.as_bytes(), Value::Bytes(encode_path_record(id)))?;
        self.dir_add(pid, &name, id)?;
        Ok(ino)
    }

    pub fn mkdir(&mut self, path: &str, mode: u32) -> Result<()> {
        self.create_node(path, KIND_DIR, mode, None).map(|_| ())
    }

    pub fn create_file(&mut self, path: &str, mode: u32, replication: Option<u8>) -> Result<Inode> {
        self.create_node(path, KIND_FILE, mode, replication)
    }

    pub fn link(&mut self, existing: &str, new: &str) -> Result<()> {
        let existing = normalize(existing)?;
        let new = normalize(new)?;
        let id = self.lookup(&existing)?;
        let mut ino = self.inode(id)?;
        if ino.is_dir() {
            return Err(Error::IsADirectory);
        }
        self.ensure_absent(&new)?;
        let (pid, name) = self.parent_dir(&new)?;
        self.t.put(SPACE_PATHS, new.as_bytes(), Value::Bytes(encode_path_record(id)))?;
        self.dir_add(pid, &name, id)?;
        ino.link_count += 1;
        self.put_inode(&ino)
    }

    pub fn unlink(&mut self, path: &str) -> Result<()> {
        let path = normalize(path)?;
        if path == "/" {
            return Err(Error::invalid("cannot remove the root directory"));
        }
        let id = self.lookup(&path)?;
        let mut ino = self.inode(id)?;
        let (pid, name) = self.parent_dir(&path)?;
        if ino.is_dir() && !self.list_dir(&ino)?.is_empty() {
            return Err(Error::DirectoryNotEmpty);
        }
        self.t.delete(SPACE_PATHS, path.as_bytes())?;
        self.dir_remove(pid, &name)?;
        ino.link_count -= 1;
        if ino.link_count == 0 {
            // The slices become garbage for the next two scans to find.
            for i in 0..=ino.highest_region {
                self.t.delete(SPACE_REGIONS, &region_key(id, i))?;
            }
            self.t.delete(SPACE_INODES, &inode_key(id))
        } else {
            self.put_inode(&ino)
        }
    }

    pub fn list_dir(&mut self, dir: &Inode) -> Result<Vec<(String, u64)>> {
        if !dir.is_dir() {
            return Err(Error::NotADirectory);
        }
        let len = self.length(dir)?;
        let (bytes, _) = self.read(dir, 0, len)?;
        Ok(parse_dir(&bytes)?.into_iter().map(|(n, id, _, _)| (n, id)).collect())
    }

    pub fn readdir(&mut self, path: &str) -> Result<Vec<String>> {
        let id = self.lookup(&normalize(path)?)?;
        let dir = self.inode(id)?;
        Ok(self.list_dir(&dir)?.into_iter().map(|(n, _)| n).collect())
    }

    /// Builds `dest` from the sources' contents end to end, moving no data.
    pub fn concat(&mut self, sources: &[String], dest: &str, overwrite: bool) -> Result<()> {
        let dest = normalize(dest)?;
        let mut entries = Vec::new();
        let mut pos = 0u64;
        for src in sources {
            let id = self.lookup(&normalize(src)?)?;
            let ino = self.inode(id)?;
            if ino.is_dir() {
                return Err(Error::IsADirectory);
            }
            let len = self.length(&ino)?;
            if len > 0 {
                entries.extend(shift(self.yank(&ino, 0, len)?, pos));
            }
            pos += len;
        }
        let dest_id = match self.lookup(&dest) {
            Ok(id) => {
                if !overwrite {
                    return Err(Error::Exists);
                }
                let ino = self.inode(id)?;
                if ino.is_dir() {
                    return Err(Error::IsADirectory);
                }
                if !ino.allows(self.c.options().uid, self.c.options().gid, PERM_W) {
                    return Err(Error::PermissionDenied);
                }
                id
            }
            Err(Error::NotFound) => self.create_file(&dest, 0o644, None)?.id,
            Err(e) => return Err(e),
        };
        self.replace(dest_id, &entries, pos)
    }
}

impl Client {
    /// Expands raw region items into entries, following spill indirections.
    pub(crate) fn expand_items(&self, items: &[Vec<u8>]) -> Result<Vec<SliceEntry>> {
        let mut out = Vec::with_capacity(items.len());
        for raw in items {
            match RegionItem::decode(raw)? {
                RegionItem::Entry(e) => out.push(e),
                RegionItem::Spill { replicas, count } => {
                    let list = decode_entry_list(&self.fetch(&replicas)?)?;
                    if list.len() as u64 != count {
                        return Err(Error::corrupt("spilled list length mismatch"));
                    }
                    out.extend(list);
                }
            }
        }
        Ok(out)
    }
}
