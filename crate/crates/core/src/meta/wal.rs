use std::fs::{File, OpenOptions};
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::Path;

use crate::codec::{Decoder, Encoder, FORMAT_V1};
use crate::error::{Error, Result};
use crate::meta::Mutation;

/// One applied mutation. Conditional mutations are logged in their resolved
/// form so replay never re-evaluates a guard.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct WalRecord {
    pub space: String,
    pub key: Vec<u8>,
    pub version: u64,
    pub mutation: Mutation,
}

/// Append-only log. Each frame holds every record of one commit, so a torn
/// tail drops whole commits only:
///
/// ```text
/// u32 payload_len | u32 crc32(payload) | payload
/// payload = u8 format | u32 count | (str16 space, bytes32 key, u64 version, mutation)*
/// ```
pub(crate) struct Wal {
    file: File,
    sync: bool,
}

impl Wal {
    /// Opens (or creates) the log, returning the commits that replay
    /// cleanly. A corrupt or truncated tail is cut off.
    pub fn open(path: &Path, sync: bool) -> Result<(Wal, Vec<Vec<WalRecord>>)> {
        let mut file = OpenOptions::new().read(true).append(true).create(true).open(path)?;
        let mut buf = Vec::new();
        file.read_to_end(&mut buf)?;
        let mut commits = Vec::new();
        let mut pos = 0usize;
        while buf.len() - pos >= 8 {
            let len = u32::from_be_bytes(buf[pos..pos + 4].try_into().unwrap()) as usize;
            let crc = u32::from_be_bytes(buf[pos + 4..pos + 8].try_into().unwrap());
            if buf.len() - pos - 8 < len {
                break;
            }
            let payload = &buf[pos + 8..pos + 8 + len];
            if crc32fast::hash(payload) != crc {
                break;
            }
            match decode_payload(payload) {
                Ok(records) => commits.push(records),
                Err(_) => break,
            }
            pos += 8 + len;
        }
        if pos != buf.len() {
            log::warn!("metadata log {}: discarding {} trailing bytes", path.display(), buf.len() - pos);
            file.set_len(pos as u64)?;
        }
        file.seek(SeekFrom::End(0))?;
        Ok((Wal { file, sync }, commits))
    }

    pub fn append(&mut self, records: &[WalRecord]) -> Result<()> {
        let mut e = Encoder::with_version(FORMAT_V1);
        e.u32(records.len() as u32);
        for r in records {
            e.str16(&r.space).bytes32(&r.key).u64(r.version);
            r.mutation.encode_into(&mut e);
        }
        let payload = e.finish();
        let mut frame = Vec::with_capacity(payload.len() + 8);
        frame.extend_from_slice(&(payload.len() as u32).to_be_bytes());
        frame.extend_from_slice(&crc32fast::hash(&payload).to_be_bytes());
        frame.extend_from_slice(&payload);
        self.file.write_all(&frame)?;
        if self.sync {
            self.file.sync_data()?;
        }
        Ok(())
    }
}

fn decode_payload(payload: &[u8]) -> Result<Vec<WalRecord>> {
    let mut d = Decoder::versioned(payload, FORMAT_V1)?;
    let n = d.u32()? as usize;
    let mut out = Vec::with_capacity(n.min(4096));
    for _ in 0..n {
        let space = d.str16()?;
        let key = d.bytes32()?.to_vec();
        let version = d.u64()?;
        let mutation = Mutation::decode_from(&mut d)?;
        match mutation {
            Mutation::Put(_) | Mutation::Delete | Mutation::ListAppend { .. } => {}
            _ => return Err(Error::corrupt("unresolved mutation in log")),
        }
        out.push(WalRecord { space, key, version, mutation });
    }
    d.finish()?;
    Ok(out)
}
