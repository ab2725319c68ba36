//! Standalone handles and path-level calls. Each call runs as its own
//! implicit transaction; appends take a lock-free fast path.

use std::io::SeekFrom;
use std::sync::Arc;
use std::time::Duration;

use rand::Rng;

use super::layout::{inode_key, region_key, Inode, RegionItem};
use super::ops::{Memo, Ops};
use super::Client;
use crate::error::{Error, Result};
use crate::meta::{AppendGuard, Mutation, ReadStamp, Txn, WriteOp, SPACE_INODES, SPACE_REGIONS};
use crate::retry::{Fd, Op, Ret, Transaction};
use crate::slice::{Placement, SliceEntry};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OpenFlags {
    pub read: bool,
    pub write: bool,
    pub create: bool,
    /// With `create`: fail if the path exists.
    pub exclusive: bool,
    /// Plain writes go to end of file.
    pub append: bool,
    /// Mode for a newly created file.
    pub mode: u32,
    /// Replication for a newly created file; the client default otherwise.
    pub replication: Option<u8>,
}

impl OpenFlags {
    pub fn read_only() -> Self {
        OpenFlags { read: true, write: false, create: false, exclusive: false, append: false, mode: 0o644, replication: None }
    }

    pub fn read_write() -> Self {
        OpenFlags { write: true, ..Self::read_only() }
    }

    pub fn create() -> Self {
        OpenFlags { create: true, ..Self::read_write() }
    }

    pub fn create_new() -> Self {
        OpenFlags { exclusive: true, ..Self::create() }
    }

    pub fn with_replication(mut self, r: u8) -> Self {
        self.replication = Some(r);
        self
    }

    pub fn with_mode(mut self, mode: u32) -> Self {
        self.mode = mode;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Stat {
    pub inode: u64,
    pub is_dir: bool,
    pub link_count: u32,
    pub mtime: u64,
    pub mode: u32,
    pub uid: u32,
    pub gid: u32,
    pub length: u64,
    pub region_size: u64,
    pub replication: u8,
}

/// Result of a yank: entries relative to the yanked range's start, plus
/// the bytes when asked for.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Yanked {
    pub entries: Vec<SliceEntry>,
    pub data: Option<Vec<u8>>,
}

impl Yanked {
    pub fn len(&self) -> u64 {
        self.entries.iter().map(|e| e.offset().unwrap_or(0) + e.length).max().unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// A single-caller file handle.
#[derive(Debug)]
pub struct File {
    client: Arc<Client>,
    inode: u64,
    offset: u64,
    flags: OpenFlags,
}

const TRANSIENT_ATTEMPTS: u32 = 8;
const APPEND_ATTEMPTS: u32 = 100_000;

fn pause(attempt: u32) {
    let cap = 50u64 << attempt.min(8);
    std::thread::sleep(Duration::from_micros(rand::thread_rng().gen_range(0..=cap)));
}

impl Client {
    /// Runs `op` (with the handle attached as descriptor 0 when given) as an
    /// implicit transaction, returning its final result and the
    /// descriptor's final offset.
    fn implicit(
        self: &Arc<Self>,
        file: Option<&File>,
        op: impl Fn(Fd) -> Op,
        data: Option<&[u8]>,
    ) -> Result<(Ret, Option<u64>)> {
        let mut attempt = 0;
        loop {
            let mut t = Transaction::new(self.clone(), true);
            let res = (|| -> Result<(Ret, Option<u64>)> {
                let fd = match file {
                    Some(f) => t.attach(f)?,
                    None => 0,
                };
                t.run(op(fd), data)?;
                t.commit()?;
                let ret = t.result(t.log_len() - 1).cloned().expect("committed call has a result");
                let offset = match file {
                    Some(_) => Some(t.fd_offset(fd)?),
                    None => None,
                };
                Ok((ret, offset))
            })();
            match res {
                Err(e) if e.is_transient() && attempt < TRANSIENT_ATTEMPTS => {
                    attempt += 1;
                    pause(attempt);
                }
                r => return r,
            }
        }
    }

    pub fn open(self: &Arc<Self>, path: &str, flags: OpenFlags) -> Result<File> {
        let mut attempt = 0;
        loop {
            let mut t = Transaction::new(self.clone(), true);
            let res = (|| -> Result<u64> {
                let fd = t.open(path, flags)?;
                t.commit()?;
                t.fd_inode(fd)
            })();
            match res {
                Ok(inode) => return Ok(File { client: self.clone(), inode, offset: 0, flags }),
                Err(e) if e.is_transient() && attempt < TRANSIENT_ATTEMPTS => {
                    attempt += 1;
                    pause(attempt);
                }
                Err(e) => return Err(e),
            }
        }
    }

    pub fn create(self: &Arc<Self>, path: &str) -> Result<File> {
        self.open(path, OpenFlags::create_new())
    }

    pub fn mkdir(self: &Arc<Self>, path: &str) -> Result<()> {
        self.implicit(None, |_| Op::Mkdir { path: path.to_string(), mode: 0o755 }, None).map(|_| ())
    }

    /// Creates every missing directory along `path`.
    pub fn mkdir_all(self: &Arc<Self>, path: &str) -> Result<()> {
        let path = super::layout::normalize(path)?;
        let mut cur = String::new();
        for comp in path.split('/').filter(|c| !c.is_empty()) {
            cur.push('/');
            cur.push_str(comp);
            match self.mkdir(&cur) {
                Ok(()) | Err(Error::Exists) => {}
                Err(e) => return Err(e),
            }
        }
        Ok(())
    }

    pub fn link(self: &Arc<Self>, existing: &str, new: &str) -> Result<()> {
        self.implicit(None, |_| Op::Link { existing: existing.to_string(), new: new.to_string() }, None).map(|_| ())
    }

    pub fn unlink(self: &Arc<Self>, path: &str) -> Result<()> {
        self.implicit(None, |_| Op::Unlink { path: path.to_string() }, None).map(|_| ())
    }

    pub fn readdir(self: &Arc<Self>, path: &str) -> Result<Vec<String>> {
        match self.implicit(None, |_| Op::Readdir { path: path.to_string() }, None)?.0 {
            Ret::Names(n) => Ok(n),
            _ => unreachable!(),
        }
    }

    pub fn stat(self: &Arc<Self>, path: &str) -> Result<Stat> {
        match self.implicit(None, |_| Op::Stat { path: path.to_string() }, None)?.0 {
            Ret::Stat(s) => Ok(s),
            _ => unreachable!(),
        }
    }

    pub fn exists(self: &Arc<Self>, path: &str) -> Result<bool> {
        match self.stat(path) {
            Ok(_) => Ok(true),
            Err(Error::NotFound) => Ok(false),
            Err(e) => Err(e),
        }
    }

    pub fn concat(self: &Arc<Self>, sources: &[&str], dest: &str, overwrite: bool) -> Result<()> {
        let sources: Vec<String> = sources.iter().map(|s| s.to_string()).collect();
        self.implicit(None, |_| Op::Concat { sources: sources.clone(), dest: dest.to_string(), overwrite }, None)
            .map(|_| ())
    }

    pub fn copy(self: &Arc<Self>, source: &str, dest: &str, overwrite: bool) -> Result<()> {
        self.concat(&[source], dest, overwrite)
    }

    /// Whole-file read.
    pub fn read_file(self: &Arc<Self>, path: &str) -> Result<Vec<u8>> {
        let f = self.open(path, OpenFlags::read_only())?;
        f.pread(0, u64::MAX >> 1)
    }

    /// Creates (or, with `overwrite`, replaces) a file holding `data`.
    pub fn write_file(self: &Arc<Self>, path: &str, data: &[u8], overwrite: bool) -> Result<()> {
        let mut attempt = 0;
        loop {
            let mut t = Transaction::new(self.clone(), true);
            let res = (|| -> Result<()> {
                if overwrite {
                    match t.unlink(path) {
                        Ok(()) | Err(Error::NotFound) => {}
                        Err(e) => return Err(e),
                    }
                }
                let fd = t.open(path, OpenFlags::create_new())?;
                if !data.is_empty() {
                    t.write(fd, data)?;
                }
                t.commit()
            })();
            match res {
                Err(e) if e.is_transient() && attempt < TRANSIENT_ATTEMPTS => {
                    attempt += 1;
                    pause(attempt);
                }
                r => return r,
            }
        }
    }

    /// Appends `data` at end of file and returns where it landed.
    ///
    /// Fast path: a guarded end-relative append to the last region,
    /// validated only against the inode, so concurrent appenders do not
    /// conflict. When the data does not fit in the last region, a
    /// transaction reads the end of file and writes there instead.
    pub fn append_to(self: &Arc<Self>, inode_id: u64, data: &[u8]) -> Result<u64> {
        if data.is_empty() {
            return Err(Error::invalid("zero-length append"));
        }
        let len = data.len() as u64;
        let mut memo = Memo::default();
        let mut slow_conflicts = 0;
        for attempt in 0..APPEND_ATTEMPTS {
            let snap = match self.meta().read(SPACE_INODES, &inode_key(inode_id)) {
                Ok(s) => s,
                Err(e) if e.is_transient() => {
                    pause(attempt.min(6));
                    continue;
                }
                Err(e) => return Err(e),
            };
            let ino = Inode::decode(snap.value.as_ref().ok_or(Error::NotFound)?.as_bytes()?)?;
            let rs = ino.region_size;
            let h = ino.highest_region;
            let mut scratch = Txn::new(self.meta().clone());
            let entries = {
                let mut ops = Ops::new(self, &mut scratch, &mut memo);
                ops.store(&ino, h * rs, Some(data))?
            };
            memo.rewind();
            let key = region_key(ino.id, h);
            let end = match self.meta().read(SPACE_REGIONS, &key) {
                Ok(s) => s.value.map_or(Ok(0), |v| v.as_list().map(|l| l.end))?,
                Err(e) if e.is_transient() => continue,
                Err(e) => return Err(e),
            };
            let res = if entries.len() == 1 && end + len <= rs && slow_conflicts == 0 {
                let item = RegionItem::Entry(SliceEntry::data(entries[0].replicas().to_vec(), Placement::RelativeToEnd)?);
                let stamp = ReadStamp { space: SPACE_INODES.into(), key: inode_key(inode_id).to_vec(), version: snap.version };
                let write = WriteOp {
                    space: SPACE_REGIONS.into(),
                    key,
                    mutation: Mutation::CondListAppend { item: item.encode(), guard: AppendGuard { len, limit: rs } },
                };
                self.meta().commit(&[stamp], &[write]).map(|landed| h * rs + landed[0])
            } else {
                let mut txn = Txn::new(self.meta().clone());
                let mut ops = Ops::new(self, &mut txn, &mut memo);
                let ino = ops.inode(inode_id)?;
                let at = ops.length(&ino)?;
                ops.paste(inode_id, at, &entries)?;
                memo.rewind();
                let r = txn.commit().map(|_| at);
                if r.is_err() {
                    slow_conflicts += 1;
                }
                r
            };
            match res {
                Ok(at) => return Ok(at),
                Err(e) if e == Error::Conflict || e.is_transient() => pause(attempt.min(6)),
                Err(e) => return Err(e),
            }
            if slow_conflicts > 0 && attempt % 4 == 3 {
                // The region may have moved on; let the fast path try again.
                slow_conflicts = 0;
            }
        }
        Err(Error::RetryExhausted)
    }
}

impl File {
    pub fn inode(&self) -> u64 {
        self.inode
    }

    pub fn offset(&self) -> u64 {
        self.offset
    }

    pub(crate) fn set_offset(&mut self, off: u64) {
        self.offset = off;
    }

    pub fn flags(&self) -> OpenFlags {
        self.flags
    }

    pub fn client(&self) -> &Arc<Client> {
        &self.client
    }

    fn call(&self, op: impl Fn(Fd) -> Op, data: Option<&[u8]>) -> Result<(Ret, u64)> {
        let (ret, off) = self.client.implicit(Some(self), op, data)?;
        Ok((ret, off.expect("attached descriptor")))
    }

    pub fn read(&mut self, len: u64) -> Result<Vec<u8>> {
        let (ret, off) = self.call(|fd| Op::Read { fd, len }, None)?;
        self.offset = off;
        match ret {
            Ret::Bytes(b) => Ok(b),
            _ => unreachable!(),
        }
    }

    pub fn pread(&self, off: u64, len: u64) -> Result<Vec<u8>> {
        match self.call(|fd| Op::Pread { fd, off, len }, None)?.0 {
            Ret::Bytes(b) => Ok(b),
            _ => unreachable!(),
        }
    }

    pub fn write(&mut self, data: &[u8]) -> Result<u64> {
        let len = data.len() as u64;
        let (_, off) = self.call(|fd| Op::Write { fd, len }, Some(data))?;
        self.offset = off;
        Ok(len)
    }

    pub fn pwrite(&self, off: u64, data: &[u8]) -> Result<u64> {
        let len = data.len() as u64;
        self.call(|fd| Op::Pwrite { fd, off, len }, Some(data))?;
        Ok(len)
    }

    pub fn seek(&mut self, pos: SeekFrom) -> Result<u64> {
        let new = match pos {
            SeekFrom::Start(o) => Some(o),
            SeekFrom::Current(d) => self.offset.checked_add_signed(d),
            SeekFrom::End(d) => self.len()?.checked_add_signed(d),
        }
        .ok_or_else(|| Error::invalid("seek before start of file"))?;
        self.offset = new;
        Ok(new)
    }

    pub fn tell(&self) -> u64 {
        self.offset
    }

    pub fn len(&self) -> Result<u64> {
        match self.call(|fd| Op::Len { fd }, None)?.0 {
            Ret::U64(n) => Ok(n),
            _ => unreachable!(),
        }
    }

    pub fn is_empty(&self) -> Result<bool> {
        Ok(self.len()? == 0)
    }

    /// Appends at end of file, returning the offset the data landed at.
    pub fn append(&mut self, data: &[u8]) -> Result<u64> {
        if !self.flags.write {
            return Err(Error::PermissionDenied);
        }
        let at = self.client.append_to(self.inode, data)?;
        self.offset = at + data.len() as u64;
        Ok(at)
    }

    pub fn yank(&mut self, len: u64, with_data: bool) -> Result<Yanked> {
        let (ret, off) = self.call(|fd| Op::Yank { fd, len, with_data }, None)?;
        self.offset = off;
        match ret {
            Ret::Yanked(y) => Ok(y),
            _ => unreachable!(),
        }
    }

    pub fn paste(&mut self, entries: &[SliceEntry]) -> Result<u64> {
        if entries.is_empty() {
            return Ok(0);
        }
        let (ret, off) = self.call(|fd| Op::Paste { fd, entries: entries.to_vec() }, None)?;
        self.offset = off;
        match ret {
            Ret::U64(n) => Ok(n),
            _ => unreachable!(),
        }
    }

    pub fn punch(&mut self, len: u64) -> Result<()> {
        self.call(|fd| Op::Punch { fd, len }, None).map(|_| ())
    }
}
