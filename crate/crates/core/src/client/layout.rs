//! Canonical encodings of the filesystem's metadata records and the keys
//! they are stored under.

use crate::codec::{Decoder, Encoder, FORMAT_V1};
use crate::error::{Error, Result};
use crate::slice::{SliceEntry, SlicePointer};

pub const ROOT_INODE: u64 = 1;
pub const KIND_FILE: u8 = 0;
pub const KIND_DIR: u8 = 1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Inode {
    pub id: u64,
    pub kind: u8,
    pub link_count: u32,
    /// Milliseconds since the Unix epoch.
    pub mtime: u64,
    pub mode: u32,
    pub uid: u32,
    pub gid: u32,
    pub highest_region: u64,
    pub region_size: u64,
    pub replication: u8,
}

impl Inode {
    pub fn is_dir(&self) -> bool {
        self.kind == KIND_DIR
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut e = Encoder::with_version(FORMAT_V1);
        e.u64(self.id)
            .u8(self.kind)
            .u32(self.link_count)
            .u64(self.mtime)
            .u32(self.mode)
            .u32(self.uid)
            .u32(self.gid)
            .u64(self.highest_region)
            .u64(self.region_size)
            .u8(self.replication);
        e.finish()
    }

    pub fn decode(bytes: &[u8]) -> Result<Inode> {
        let mut d = Decoder::versioned(bytes, FORMAT_V1)?;
        let ino = Inode {
            id: d.u64()?,
            kind: d.u8()?,
            link_count: d.u32()?,
            mtime: d.u64()?,
            mode: d.u32()?,
            uid: d.u32()?,
            gid: d.u32()?,
            highest_region: d.u64()?,
            region_size: d.u64()?,
            replication: d.u8()?,
        };
        d.finish()?;
        if ino.region_size == 0 || ino.replication == 0 {
            return Err(Error::corrupt("inode with zero region size or replication"));
        }
        Ok(ino)
    }

    /// Permission check against the owner/group/other bits. Uid 0 passes.
    pub fn allows(&self, uid: u32, gid: u32, want: u32) -> bool {
        if uid == 0 {
            return true;
        }
        let bits = if uid == self.uid {
            self.mode >> 6
        } else if gid == self.gid {
            self.mode >> 3
        } else {
            self.mode
        };
        bits & want == want
    }
}

pub const PERM_R: u32 = 4;
pub const PERM_W: u32 = 2;

pub fn inode_key(id: u64) -> [u8; 8] {
    id.to_be_bytes()
}

pub fn region_key(inode: u64, region: u64) -> Vec<u8> {
    let mut k = Vec::with_capacity(16);
    k.extend_from_slice(&inode.to_be_bytes());
    k.extend_from_slice(&region.to_be_bytes());
    k
}

pub fn parse_region_key(key: &[u8]) -> Result<(u64, u64)> {
    if key.len() != 16 {
        return Err(Error::corrupt("bad region key"));
    }
    Ok((u64::from_be_bytes(key[..8].try_into().unwrap()), u64::from_be_bytes(key[8..].try_into().unwrap())))
}

pub fn encode_path_record(inode: u64) -> Vec<u8> {
    let mut e = Encoder::with_version(FORMAT_V1);
    e.u64(inode);
    e.finish()
}

pub fn decode_path_record(bytes: &[u8]) -> Result<u64> {
    let mut d = Decoder::versioned(bytes, FORMAT_V1)?;
    let id = d.u64()?;
    d.finish()?;
    Ok(id)
}

/// One item of a region's metadata list.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RegionItem {
    Entry(SliceEntry),
    /// Indirection to a slice holding an encoded entry list.
    Spill { replicas: Vec<SlicePointer>, count: u64 },
}

impl RegionItem {
    pub fn encode(&self) -> Vec<u8> {
        let mut e = Encoder::with_version(FORMAT_V1);
        match self {
            RegionItem::Entry(entry) => {
                e.u8(0);
                entry.encode_into(&mut e);
            }
            RegionItem::Spill { replicas, count } => {
                e.u8(1).u8(replicas.len() as u8);
                for p in replicas {
                    p.encode_into(&mut e);
                }
                e.u64(*count);
            }
        }
        e.finish()
    }

    pub fn decode(bytes: &[u8]) -> Result<RegionItem> {
        let mut d = Decoder::versioned(bytes, FORMAT_V1)?;
        let item = match d.u8()? {
            0 => RegionItem::Entry(SliceEntry::decode_from(&mut d)?),
            1 => {
                let n = d.u8()?;
                let replicas = (0..n).map(|_| SlicePointer::decode_from(&mut d)).collect::<Result<Vec<_>>>()?;
                RegionItem::Spill { replicas, count: d.u64()? }
            }
            t => return Err(Error::corrupt(format!("bad region item tag {t}"))),
        };
        d.finish()?;
        Ok(item)
    }
}

/// Serialized form of a spilled entry list: `u8 format | u64 count | entry*`.
pub fn encode_entry_list(entries: &[SliceEntry]) -> Vec<u8> {
    let mut e = Encoder::with_version(FORMAT_V1);
    e.u64(entries.len() as u64);
    for entry in entries {
        entry.encode_into(&mut e);
    }
    e.finish()
}

pub fn decode_entry_list(bytes: &[u8]) -> Result<Vec<SliceEntry>> {
    let mut d = Decoder::versioned(bytes, FORMAT_V1)?;
    let n = d.u64()?;
    let mut out = Vec::with_capacity(n.min(1 << 16) as usize);
    for _ in 0..n {
        out.push(SliceEntry::decode_from(&mut d)?);
    }
    d.finish()?;
    Ok(out)
}

/// Directory content record: `u16 name_len | name | u64 inode`.
pub fn encode_dir_record(name: &str, inode: u64) -> Vec<u8> {
    let mut e = Encoder::new();
    e.str16(name).u64(inode);
    e.finish()
}

/// Parses directory content into `(name, inode, byte_offset, byte_len)`.
pub fn parse_dir(bytes: &[u8]) -> Result<Vec<(String, u64, u64, u64)>> {
    let mut d = Decoder::new(bytes);
    let mut out = Vec::new();
    while !d.is_empty() {
        let start = (bytes.len() - d.remaining()) as u64;
        let name = d.str16()?;
        let inode = d.u64()?;
        let end = (bytes.len() - d.remaining()) as u64;
        out.push((name, inode, start, end - start));
    }
    Ok(out)
}

/// Normalizes an absolute path: collapses repeated separators and drops a
/// trailing one. `.` and `..` components are rejected.
pub fn normalize(path: &str) -> Result<String> {
    if !path.starts_with('/') {
        return Err(Error::invalid(format!("path must be absolute: {path:?}")));
    }
    let mut out = String::with_capacity(path.len());
    for comp in path.split('/').filter(|c| !c.is_empty()) {
        if comp == "." || comp == ".." {
            return Err(Error::invalid(format!("relative component in {path:?}")));
        }
        if comp.len() > u16::MAX as usize {
            return Err(Error::invalid("path component too long"));
        }
        out.push('/');
        out.push_str(comp);
    }
    if out.is_empty() {
        out.push('/');
    }
    Ok(out)
}

/// Splits a normalized non-root path into `(parent, name)`.
pub fn split_parent(path: &str) -> Result<(&str, &str)> {
    if path == "/" {
        return Err(Error::invalid("root has no parent"));
    }
    let i = path.rfind('/').unwrap();
    Ok((if i == 0 { "/" } else { &path[..i] }, &path[i + 1..]))
}
