//! Transaction retry layer.
//!
//! Every call made through a [`Transaction`] is logged with its arguments
//! (never its data), the side effects it produced (inode ids, stored slices)
//! and a digest of what the application was shown. When the metadata commit
//! reports a conflict, the whole log is replayed against fresh state: stored
//! slices are pasted again instead of rewritten, and if any shown outcome
//! comes out differently the transaction aborts with
//! [`Error::DivergenceAbort`]. Otherwise the replay commits and the
//! application never learns there was a conflict.

use std::io::SeekFrom;
use std::sync::Arc;
use std::time::Duration;

use rand::Rng;

use crate::client::layout::{normalize, Inode, PERM_R, PERM_W};
use crate::client::ops::{FileExtent, Memo, Ops};
use crate::client::{Client, File, OpenFlags, Stat, Yanked};
use crate::codec::Encoder;
use crate::error::{Error, Result};
use crate::meta::{Txn, TxnStatus};
use crate::slice::{ExtentSource, SliceEntry};

/// Index into a transaction's descriptor table.
pub type Fd = usize;

#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) enum Op {
    Open { path: String, flags: OpenFlags },
    Attach { inode: u64, offset: u64, flags: OpenFlags },
    Close { fd: Fd },
    Mkdir { path: String, mode: u32 },
    Link { existing: String, new: String },
    Unlink { path: String },
    Readdir { path: String },
    Stat { path: String },
    Read { fd: Fd, len: u64 },
    Pread { fd: Fd, off: u64, len: u64 },
    Write { fd: Fd, len: u64 },
    Pwrite { fd: Fd, off: u64, len: u64 },
    Seek { fd: Fd, pos: SeekFrom },
    Tell { fd: Fd },
    Len { fd: Fd },
    Append { fd: Fd, len: u64 },
    Yank { fd: Fd, len: u64, with_data: bool },
    Paste { fd: Fd, entries: Vec<SliceEntry> },
    Punch { fd: Fd, len: u64 },
    Concat { sources: Vec<String>, dest: String, overwrite: bool },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) enum Ret {
    Unit,
    Fd(Fd),
    U64(u64),
    Bytes(Vec<u8>),
    Names(Vec<String>),
    Stat(Stat),
    Yanked(Yanked),
}

/// What the application observed from one call. Reads are digested as the
/// extents (pointer set) they came from, never as bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) enum Digest {
    Hidden,
    Unit,
    Fd(Fd),
    U64(u64),
    Extents(u64, Vec<FileExtent>),
    Names(Vec<String>),
    Stat(Stat),
    Entries(Vec<SliceEntry>),
    Err(u16),
}

#[derive(Debug, Clone)]
pub(crate) struct Record {
    op: Op,
    memo: Memo,
    digest: Digest,
    ret: Option<Ret>,
}

impl Record {
    /// Size of the record in a compact binary form; data never appears.
    fn encoded_len(&self) -> usize {
        let mut e = Encoder::new();
        let op = format!("{:?}", std::mem::discriminant(&self.op));
        e.str16(&op);
        match &self.op {
            Op::Paste { entries, .. } => {
                for x in entries {
                    x.encode_into(&mut e);
                }
            }
            Op::Open { path, .. } | Op::Mkdir { path, .. } | Op::Unlink { path } | Op::Readdir { path } | Op::Stat { path } => {
                e.str16(path);
            }
            Op::Link { existing, new } => {
                e.str16(existing).str16(new);
            }
            Op::Concat { sources, dest, .. } => {
                for s in sources {
                    e.str16(s);
                }
                e.str16(dest);
            }
            _ => {
                e.u64(0).u64(0).u64(0);
            }
        }
        for id in &self.memo.ids {
            e.u64(*id);
        }
        for list in &self.memo.stored {
            for x in list {
                x.encode_into(&mut e);
            }
        }
        match &self.digest {
            Digest::Extents(_, exts) => {
                for x in exts {
                    e.u64(x.region_offset).u64(x.length);
                    if let ExtentSource::Slice(r) = &x.source {
                        for p in r {
                            p.encode_into(&mut e);
                        }
                    }
                }
            }
            Digest::Entries(list) => {
                for x in list {
                    x.encode_into(&mut e);
                }
            }
            _ => {
                e.u64(0);
            }
        }
        e.len()
    }
}

#[derive(Debug, Clone, Copy)]
struct FdState {
    inode: u64,
    offset: u64,
    flags: OpenFlags,
}

/// A filesystem transaction with automatic conflict resolution.
///
/// Not to be shared between concurrent callers.
pub struct Transaction {
    client: Arc<Client>,
    txn: Txn,
    log: Vec<Record>,
    fds: Vec<Option<FdState>>,
    implicit: bool,
    attempts: u32,
}

fn digest_of(op: &Op, res: &Result<(Ret, Digest)>) -> Digest {
    match res {
        Err(e) => Digest::Err(e.code()),
        Ok((_, d)) => match op {
            // Where a seek lands is only seen through a later `tell`.
            Op::Seek { .. } => Digest::Hidden,
            _ => d.clone(),
        },
    }
}

fn fd_state(fds: &[Option<FdState>], fd: Fd) -> Result<FdState> {
    fds.get(fd).copied().flatten().ok_or_else(|| Error::invalid(format!("bad descriptor {fd}")))
}

fn check(c: &Client, ino: &Inode, flags: OpenFlags) -> Result<()> {
    let want = if flags.read { PERM_R } else { 0 } | if flags.write { PERM_W } else { 0 };
    if ino.allows(c.options().uid, c.options().gid, want) {
        Ok(())
    } else {
        Err(Error::PermissionDenied)
    }
}

fn stat_of(ops: &mut Ops<'_>, ino: &Inode) -> Result<Stat> {
    Ok(Stat {
        inode: ino.id,
        is_dir: ino.is_dir(),
        link_count: ino.link_count,
        mtime: ino.mtime,
        mode: ino.mode,
        uid: ino.uid,
        gid: ino.gid,
        length: ops.length(ino)?,
        region_size: ino.region_size,
        replication: ino.replication,
    })
}

/// Executes one logged operation. `data` is present on first execution of
/// data-carrying calls only.
fn exec(
    c: &Client,
    txn: &mut Txn,
    fds: &mut Vec<Option<FdState>>,
    op: &Op,
    data: Option<&[u8]>,
    memo: &mut Memo,
) -> Result<(Ret, Digest)> {
    let mut ops = Ops::new(c, txn, memo);
    let writable = |st: &FdState| if st.flags.write { Ok(()) } else { Err(Error::PermissionDenied) };
    let readable = |st: &FdState| if st.flags.read { Ok(()) } else { Err(Error::PermissionDenied) };
    match op {
        Op::Open { path, flags } => {
            let path = normalize(path)?;
            let ino = match ops.lookup(&path) {
                Ok(id) => {
                    if flags.exclusive {
                        return Err(Error::Exists);
                    }
                    let ino = ops.inode(id)?;
                    check(c, &ino, *flags)?;
                    ino
                }
                Err(Error::NotFound) if flags.create => ops.create_file(&path, flags.mode, flags.replication)?,
                Err(e) => return Err(e),
            };
            if ino.is_dir() && flags.write {
                return Err(Error::IsADirectory);
            }
            fds.push(Some(FdState { inode: ino.id, offset: 0, flags: *flags }));
            Ok((Ret::Fd(fds.len() - 1), Digest::Fd(fds.len() - 1)))
        }
        Op::Attach { inode, offset, flags } => {
            fds.push(Some(FdState { inode: *inode, offset: *offset, flags: *flags }));
            Ok((Ret::Fd(fds.len() - 1), Digest::Fd(fds.len() - 1)))
        }
        Op::Close { fd } => {
            fd_state(fds, *fd)?;
            fds[*fd] = None;
            Ok((Ret::Unit, Digest::Unit))
        }
        Op::Mkdir { path, mode } => ops.mkdir(path, *mode).map(|_| (Ret::Unit, Digest::Unit)),
        Op::Link { existing, new } => ops.link(existing, new).map(|_| (Ret::Unit, Digest::Unit)),
        Op::Unlink { path } => ops.unlink(path).map(|_| (Ret::Unit, Digest::Unit)),
        Op::Readdir { path } => {
            let names = ops.readdir(path)?;
            Ok((Ret::Names(names.clone()), Digest::Names(names)))
        }
        Op::Stat { path } => {
            let id = ops.lookup(&normalize(path)?)?;
            let ino = ops.inode(id)?;
            let st = stat_of(&mut ops, &ino)?;
            Ok((Ret::Stat(st.clone()), Digest::Stat(st)))
        }
        Op::Read { fd, len } | Op::Pread { fd, len, .. } => {
            let st = fd_state(fds, *fd)?;
            readable(&st)?;
            let off = match op {
                Op::Pread { off, .. } => *off,
                _ => st.offset,
            };
            let ino = ops.inode(st.inode)?;
            let (bytes, extents) = ops.read(&ino, off, *len)?;
            if let Op::Read { .. } = op {
                fds[*fd].as_mut().unwrap().offset += bytes.len() as u64;
            }
            let n = bytes.len() as u64;
            Ok((Ret::Bytes(bytes), Digest::Extents(n, extents)))
        }
        Op::Write { fd, len } | Op::Pwrite { fd, len, .. } => {
            let st = fd_state(fds, *fd)?;
            writable(&st)?;
            if *len == 0 {
                return Err(Error::invalid("zero-length write"));
            }
            let ino = ops.inode(st.inode)?;
            let off = match op {
                Op::Pwrite { off, .. } => *off,
                _ if st.flags.append => ops.length(&ino)?,
                _ => st.offset,
            };
            ops.write(st.inode, off, data)?;
            if let Op::Write { .. } = op {
                fds[*fd].as_mut().unwrap().offset = off + len;
            }
            Ok((Ret::U64(*len), Digest::U64(*len)))
        }
        Op::Seek { fd, pos } => {
            let st = fd_state(fds, *fd)?;
            let new = match *pos {
                SeekFrom::Start(o) => Some(o),
                SeekFrom::Current(d) => st.offset.checked_add_signed(d),
                SeekFrom::End(d) => {
                    let ino = ops.inode(st.inode)?;
                    ops.length(&ino)?.checked_add_signed(d)
                }
            }
            .ok_or_else(|| Error::invalid("seek before start of file"))?;
            fds[*fd].as_mut().unwrap().offset = new;
            Ok((Ret::U64(new), Digest::Hidden))
        }
        Op::Tell { fd } => {
            let st = fd_state(fds, *fd)?;
            Ok((Ret::U64(st.offset), Digest::U64(st.offset)))
        }
        Op::Len { fd } => {
            let st = fd_state(fds, *fd)?;
            let ino = ops.inode(st.inode)?;
            let n = ops.length(&ino)?;
            Ok((Ret::U64(n), Digest::U64(n)))
        }
        Op::Append { fd, len } => {
            let st = fd_state(fds, *fd)?;
            writable(&st)?;
            if *len == 0 {
                return Err(Error::invalid("zero-length append"));
            }
            let ino = ops.inode(st.inode)?;
            let at = ops.length(&ino)?;
            ops.write(st.inode, at, data)?;
            Ok((Ret::U64(at), Digest::U64(at)))
        }
        Op::Yank { fd, len, with_data } => {
            let st = fd_state(fds, *fd)?;
            readable(&st)?;
            if *len == 0 {
                return Err(Error::invalid("zero-length yank"));
            }
            let ino = ops.inode(st.inode)?;
            let entries = ops.yank(&ino, st.offset, *len)?;
            let data = if *with_data { Some(ops.read(&ino, st.offset, *len)?.0) } else { None };
            fds[*fd].as_mut().unwrap().offset += len;
            Ok((Ret::Yanked(Yanked { entries: entries.clone(), data }), Digest::Entries(entries)))
        }
        Op::Paste { fd, entries } => {
            let st = fd_state(fds, *fd)?;
            writable(&st)?;
            let n = ops.paste(st.inode, st.offset, entries)?;
            fds[*fd].as_mut().unwrap().offset += n;
            Ok((Ret::U64(n), Digest::U64(n)))
        }
        Op::Punch { fd, len } => {
            let st = fd_state(fds, *fd)?;
            writable(&st)?;
            ops.punch(st.inode, st.offset, *len)?;
            Ok((Ret::Unit, Digest::Unit))
        }
        Op::Concat { sources, dest, overwrite } => {
            ops.concat(sources, dest, *overwrite).map(|_| (Ret::Unit, Digest::Unit))
        }
    }
}

impl Transaction {
    pub(crate) fn new(client: Arc<Client>, implicit: bool) -> Transaction {
        let txn = Txn::new(client.meta().clone());
        Transaction { client, txn, log: Vec::new(), fds: Vec::new(), implicit, attempts: 0 }
    }

    pub fn client(&self) -> &Arc<Client> {
        &self.client
    }

    /// Number of replays performed so far.
    pub fn attempts(&self) -> u32 {
        self.attempts
    }

    pub fn log_len(&self) -> usize {
        self.log.len()
    }

    /// Bytes the log would occupy in a compact binary form.
    pub fn log_bytes(&self) -> usize {
        self.log.iter().map(Record::encoded_len).sum()
    }

    /// Encoded size of the most recent record.
    pub fn last_record_bytes(&self) -> usize {
        self.log.last().map_or(0, Record::encoded_len)
    }

    pub(crate) fn run(&mut self, op: Op, data: Option<&[u8]>) -> Result<Ret> {
        if self.txn.status() != TxnStatus::Open {
            return Err(Error::UseAfterClose);
        }
        let mut memo = Memo::default();
        let res = exec(&self.client, &mut self.txn, &mut self.fds, &op, data, &mut memo);
        let digest = digest_of(&op, &res);
        let ret = res.as_ref().ok().map(|(r, _)| r.clone());
        self.log.push(Record { op, memo, digest, ret });
        res.map(|(r, _)| r)
    }

    /// Result of the `i`th logged call as of the latest execution.
    pub(crate) fn result(&self, i: usize) -> Option<&Ret> {
        self.log.get(i).and_then(|r| r.ret.as_ref())
    }

    fn replay(&mut self) -> Result<()> {
        self.txn = Txn::new(self.client.meta().clone());
        self.fds.clear();
        for rec in &mut self.log {
            rec.memo.rewind();
            let res = exec(&self.client, &mut self.txn, &mut self.fds, &rec.op, None, &mut rec.memo);
            if let Err(e) = &res {
                if e.is_transient() {
                    return Err(e.clone());
                }
            }
            let digest = digest_of(&rec.op, &res);
            if self.implicit {
                // Nothing was shown yet; the latest outcome is the outcome.
                let (ret, _) = res?;
                rec.ret = Some(ret);
                continue;
            }
            if rec.digest != Digest::Hidden && digest != rec.digest {
                log::debug!("replay of {:?} diverged", rec.op);
                self.txn.abort();
                return Err(Error::DivergenceAbort);
            }
            rec.ret = res.ok().map(|(r, _)| r);
        }
        Ok(())
    }

    /// Commits, replaying on conflict until the commit succeeds, an outcome
    /// diverges, or the retry cap is reached.
    pub fn commit(&mut self) -> Result<()> {
        loop {
            match self.txn.commit() {
                Ok(()) => return Ok(()),
                Err(e) if e == Error::Conflict || e.is_transient() => self.replay_until_built()?,
                Err(e) => return Err(e),
            }
        }
    }

    fn replay_until_built(&mut self) -> Result<()> {
        loop {
            if self.attempts >= self.client.options().retry_cap {
                self.txn.abort();
                return Err(Error::RetryExhausted);
            }
            self.attempts += 1;
            let base = 1u64 << self.attempts.min(6);
            let jitter = rand::thread_rng().gen_range(0..=base * 500);
            std::thread::sleep(Duration::from_micros(base * 250 + jitter));
            match self.replay() {
                Ok(()) => return Ok(()),
                // A transient failure mid-replay just costs another attempt.
                Err(e) if e.is_transient() => continue,
                Err(e) => {
                    self.txn.abort();
                    return Err(e);
                }
            }
        }
    }

    /// Abandons the transaction. Slices it stored are left for the
    /// collector.
    pub fn abort(&mut self) {
        self.txn.abort();
    }

    // ---- calls ----

    pub fn open(&mut self, path: &str, flags: OpenFlags) -> Result<Fd> {
        match self.run(Op::Open { path: path.to_string(), flags }, None)? {
            Ret::Fd(fd) => Ok(fd),
            _ => unreachable!(),
        }
    }

    /// Brings a standalone handle into the transaction at its current offset.
    pub fn attach(&mut self, file: &File) -> Result<Fd> {
        match self.run(Op::Attach { inode: file.inode(), offset: file.offset(), flags: file.flags() }, None)? {
            Ret::Fd(fd) => Ok(fd),
            _ => unreachable!(),
        }
    }

    pub fn fd_offset(&self, fd: Fd) -> Result<u64> {
        Ok(fd_state(&self.fds, fd)?.offset)
    }

    pub fn fd_inode(&self, fd: Fd) -> Result<u64> {
        Ok(fd_state(&self.fds, fd)?.inode)
    }

    /// Copies a descriptor's position back to a handle, e.g. after commit.
    pub fn sync_offset(&self, fd: Fd, file: &mut File) -> Result<()> {
        file.set_offset(fd_state(&self.fds, fd)?.offset);
        Ok(())
    }

    pub fn close(&mut self, fd: Fd) -> Result<()> {
        self.run(Op::Close { fd }, None).map(|_| ())
    }

    pub fn mkdir(&mut self, path: &str, mode: u32) -> Result<()> {
        self.run(Op::Mkdir { path: path.to_string(), mode }, None).map(|_| ())
    }

    pub fn link(&mut self, existing: &str, new: &str) -> Result<()> {
        self.run(Op::Link { existing: existing.to_string(), new: new.to_string() }, None).map(|_| ())
    }

    pub fn unlink(&mut self, path: &str) -> Result<()> {
        self.run(Op::Unlink { path: path.to_string() }, None).map(|_| ())
    }

    pub fn readdir(&mut self, path: &str) -> Result<Vec<String>> {
        match self.run(Op::Readdir { path: path.to_string() }, None)? {
            Ret::Names(n) => Ok(n),
            _ => unreachable!(),
        }
    }

    pub fn stat(&mut self, path: &str) -> Result<Stat> {
        match self.run(Op::Stat { path: path.to_string() }, None)? {
            Ret::Stat(s) => Ok(s),
            _ => unreachable!(),
        }
    }

    pub fn read(&mut self, fd: Fd, len: u64) -> Result<Vec<u8>> {
        self.bytes(Op::Read { fd, len })
    }

    pub fn pread(&mut self, fd: Fd, off: u64, len: u64) -> Result<Vec<u8>> {
        self.bytes(Op::Pread { fd, off, len })
    }

    fn bytes(&mut self, op: Op) -> Result<Vec<u8>> {
        match self.run(op, None)? {
            Ret::Bytes(b) => Ok(b),
            _ => unreachable!(),
        }
    }

    fn num(&mut self, op: Op, data: Option<&[u8]>) -> Result<u64> {
        match self.run(op, data)? {
            Ret::U64(n) => Ok(n),
            _ => unreachable!(),
        }
    }

    pub fn write(&mut self, fd: Fd, data: &[u8]) -> Result<u64> {
        self.num(Op::Write { fd, len: data.len() as u64 }, Some(data))
    }

    pub fn pwrite(&mut self, fd: Fd, off: u64, data: &[u8]) -> Result<u64> {
        self.num(Op::Pwrite { fd, off, len: data.len() as u64 }, Some(data))
    }

    /// Moves the descriptor. The resulting position is deliberately not
    /// returned; use [`Transaction::tell`] to observe it.
    pub fn seek(&mut self, fd: Fd, pos: SeekFrom) -> Result<()> {
        self.run(Op::Seek { fd, pos }, None).map(|_| ())
    }

    pub fn tell(&mut self, fd: Fd) -> Result<u64> {
        self.num(Op::Tell { fd }, None)
    }

    pub fn len(&mut self, fd: Fd) -> Result<u64> {
        self.num(Op::Len { fd }, None)
    }

    /// Writes at end of file and returns where the data landed.
    pub fn append(&mut self, fd: Fd, data: &[u8]) -> Result<u64> {
        self.num(Op::Append { fd, len: data.len() as u64 }, Some(data))
    }

    pub fn yank(&mut self, fd: Fd, len: u64, with_data: bool) -> Result<Yanked> {
        match self.run(Op::Yank { fd, len, with_data }, None)? {
            Ret::Yanked(y) => Ok(y),
            _ => unreachable!(),
        }
    }

    pub fn paste(&mut self, fd: Fd, entries: &[SliceEntry]) -> Result<u64> {
        self.num(Op::Paste { fd, entries: entries.to_vec() }, None)
    }

    pub fn punch(&mut self, fd: Fd, len: u64) -> Result<()> {
        self.run(Op::Punch { fd, len }, None).map(|_| ())
    }

    pub fn concat(&mut self, sources: &[&str], dest: &str, overwrite: bool) -> Result<()> {
        let sources = sources.iter().map(|s| s.to_string()).collect();
        self.run(Op::Concat { sources, dest: dest.to_string(), overwrite }, None).map(|_| ())
    }

    pub fn copy(&mut self, source: &str, dest: &str, overwrite: bool) -> Result<()> {
        self.concat(&[source], dest, overwrite)
    }
}
