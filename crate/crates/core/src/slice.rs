//! Slice overlay algebra.
//!
//! A region's bytes are defined by replaying its entry list in order: each
//! entry paints its byte range over whatever earlier entries left there, data
//! entries with the bytes named by their slice pointers and hole entries with
//! zeros. Entries placed relative to the end are positioned at the running
//! end-of-region at the moment they are replayed.
//!
//! Everything in this module is pure; the metadata store, the client and the
//! garbage collector all defer to [`resolve_entries`] for what a region holds.

use std::collections::BTreeMap;
use std::fmt;
use std::ops::Range;

use crate::codec::{Decoder, Encoder};
use crate::error::{Error, Result};

/// Opaque 64-bit storage server identity handed out at registration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ServerId(pub u64);

impl fmt::Display for ServerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Location of an immutable byte sequence on a storage server.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SlicePointer {
    pub server_id: ServerId,
    pub backing_file: String,
    pub file_offset: u64,
    pub length: u64,
}

impl SlicePointer {
    pub fn new(server_id: ServerId, backing_file: impl Into<String>, file_offset: u64, length: u64) -> Self {
        SlicePointer { server_id, backing_file: backing_file.into(), file_offset, length }
    }

    pub fn end(&self) -> u64 {
        self.file_offset + self.length
    }

    /// True when `next` starts on disk exactly where `self` ends.
    pub fn is_followed_by(&self, next: &SlicePointer) -> bool {
        self.server_id == next.server_id
            && self.backing_file == next.backing_file
            && self.end() == next.file_offset
    }

    pub fn encode_into(&self, e: &mut Encoder) {
        e.u64(self.server_id.0)
            .str16(&self.backing_file)
            .u64(self.file_offset)
            .u64(self.length);
    }

    pub fn decode_from(d: &mut Decoder<'_>) -> Result<Self> {
        let server_id = ServerId(d.u64()?);
        let backing_file = d.str16()?;
        let file_offset = d.u64()?;
        let length = d.u64()?;
        if length == 0 {
            return Err(Error::corrupt("zero-length slice pointer"));
        }
        Ok(SlicePointer { server_id, backing_file, file_offset, length })
    }
}

/// Narrows `p` to `[start, start + len)` of the bytes it names.
pub fn subrange_pointer(p: &SlicePointer, start: u64, len: u64) -> Result<SlicePointer> {
    if len == 0 || start.checked_add(len).is_none_or(|end| end > p.length) {
        return Err(Error::OutOfRange);
    }
    Ok(SlicePointer {
        server_id: p.server_id,
        backing_file: p.backing_file.clone(),
        file_offset: p.file_offset + start,
        length: len,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Placement {
    Absolute(u64),
    RelativeToEnd,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Content {
    /// Replica pointers, all of the entry's length.
    Data(Vec<SlicePointer>),
    Hole,
}

/// One overlay write in a region's metadata list.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SliceEntry {
    pub content: Content,
    pub placement: Placement,
    pub length: u64,
}

impl SliceEntry {
    pub fn data(replicas: Vec<SlicePointer>, placement: Placement) -> Result<Self> {
        let length = match replicas.first() {
            Some(p) => p.length,
            None => return Err(Error::invalid("data entry needs at least one replica")),
        };
        let e = SliceEntry { content: Content::Data(replicas), placement, length };
        e.validate()?;
        Ok(e)
    }

    pub fn at(replicas: Vec<SlicePointer>, offset: u64) -> Result<Self> {
        Self::data(replicas, Placement::Absolute(offset))
    }

    pub fn hole(offset: u64, length: u64) -> Result<Self> {
        let e = SliceEntry { content: Content::Hole, placement: Placement::Absolute(offset), length };
        e.validate()?;
        Ok(e)
    }

    pub fn validate(&self) -> Result<()> {
        if self.length == 0 {
            return Err(Error::invalid("zero-length entry"));
        }
        match &self.content {
            Content::Data(replicas) => {
                if replicas.is_empty() {
                    return Err(Error::invalid("data entry needs at least one replica"));
                }
                if replicas.iter().any(|p| p.length != self.length) {
                    return Err(Error::invalid("replica lengths disagree with entry"));
                }
            }
            Content::Hole => {
                if self.placement == Placement::RelativeToEnd {
                    return Err(Error::invalid("hole entries must be absolute"));
                }
            }
        }
        Ok(())
    }

    pub fn is_hole(&self) -> bool {
        matches!(self.content, Content::Hole)
    }

    pub fn replicas(&self) -> &[SlicePointer] {
        match &self.content {
            Content::Data(r) => r,
            Content::Hole => &[],
        }
    }

    pub fn offset(&self) -> Option<u64> {
        match self.placement {
            Placement::Absolute(o) => Some(o),
            Placement::RelativeToEnd => None,
        }
    }

    /// The same bytes narrowed to `[start, start + len)`, placed at `offset`.
    pub fn subrange(&self, start: u64, len: u64, placement: Placement) -> Result<SliceEntry> {
        if len == 0 || start + len > self.length {
            return Err(Error::OutOfRange);
        }
        let content = match &self.content {
            Content::Data(r) => {
                Content::Data(r.iter().map(|p| subrange_pointer(p, start, len)).collect::<Result<_>>()?)
            }
            Content::Hole => Content::Hole,
        };
        Ok(SliceEntry { content, placement, length: len })
    }

    pub fn with_placement(mut self, placement: Placement) -> SliceEntry {
        self.placement = placement;
        self
    }

    pub fn encode_into(&self, e: &mut Encoder) {
        match &self.content {
            Content::Data(_) => e.u8(0),
            Content::Hole => e.u8(1),
        };
        match self.placement {
            Placement::Absolute(o) => e.u8(0).u64(o),
            Placement::RelativeToEnd => e.u8(1),
        };
        e.u64(self.length);
        let replicas = self.replicas();
        e.u8(u8::try_from(replicas.len()).expect("at most 255 replicas"));
        for p in replicas {
            p.encode_into(e);
        }
    }

    pub fn decode_from(d: &mut Decoder<'_>) -> Result<Self> {
        let kind = d.u8()?;
        let placement = match d.u8()? {
            0 => Placement::Absolute(d.u64()?),
            1 => Placement::RelativeToEnd,
            t => return Err(Error::corrupt(format!("bad placement tag {t}"))),
        };
        let length = d.u64()?;
        let n = d.u8()? as usize;
        let mut replicas = Vec::with_capacity(n);
        for _ in 0..n {
            replicas.push(SlicePointer::decode_from(d)?);
        }
        let content = match kind {
            0 => Content::Data(replicas),
            1 if n == 0 => Content::Hole,
            _ => return Err(Error::corrupt(format!("bad entry kind {kind}"))),
        };
        let entry = SliceEntry { content, placement, length };
        entry.validate().map_err(|e| Error::corrupt(e.to_string()))?;
        Ok(entry)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum ExtentSource {
    /// Replica pointers already narrowed to exactly this extent.
    Slice(Vec<SlicePointer>),
    Zeros,
}

/// A maximal piece of a region supplied by a single entry.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ResolvedExtent {
    pub region_offset: u64,
    pub length: u64,
    pub source: ExtentSource,
}

impl ResolvedExtent {
    pub fn range(&self) -> Range<u64> {
        self.region_offset..self.region_offset + self.length
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Resolved {
    pub extents: Vec<ResolvedExtent>,
    pub end_offset: u64,
}

#[derive(Debug, Clone, Copy)]
struct Piece {
    end: u64,
    entry: usize,
    /// Offset of the piece start inside the entry's bytes.
    inner: u64,
}

/// Non-overlapping interval map painted in entry order.
#[derive(Default)]
struct Canvas {
    pieces: BTreeMap<u64, Piece>,
}

impl Canvas {
    fn paint(&mut self, start: u64, end: u64, entry: usize) {
        // Split the piece straddling `start`, if any.
        if let Some((&s, &p)) = self.pieces.range(..start).next_back() {
            if p.end > start {
                self.pieces.insert(s, Piece { end: start, ..p });
                self.pieces.insert(start, Piece { end: p.end, entry: p.entry, inner: p.inner + (start - s) });
            }
        }
        // Remove everything starting inside [start, end), keeping any tail.
        let covered: Vec<u64> = self.pieces.range(start..end).map(|(&s, _)| s).collect();
        for s in covered {
            let p = self.pieces.remove(&s).unwrap();
            if p.end > end {
                self.pieces.insert(end, Piece { end: p.end, entry: p.entry, inner: p.inner + (end - s) });
            }
        }
        self.pieces.insert(start, Piece { end, entry, inner: 0 });
    }
}

fn effective_range(entry: &SliceEntry, end: u64, region_size: u64) -> Result<(u64, u64)> {
    entry.validate()?;
    let start = match entry.placement {
        Placement::Absolute(o) => o,
        Placement::RelativeToEnd => end,
    };
    let stop = start.checked_add(entry.length).ok_or(Error::EntryOutOfBounds)?;
    if stop > region_size {
        return Err(Error::EntryOutOfBounds);
    }
    Ok((start, stop))
}

/// Replays `entries` in order and returns the minimal non-overlapping extent
/// list plus the resulting end-of-region offset. Regions never written by
/// any entry are absent from the extent list; holes appear as
/// [`ExtentSource::Zeros`].
pub fn resolve_entries(entries: &[SliceEntry], region_size: u64) -> Result<Resolved> {
    let mut canvas = Canvas::default();
    let mut end = 0u64;
    for (i, entry) in entries.iter().enumerate() {
        let (start, stop) = effective_range(entry, end, region_size)?;
        canvas.paint(start, stop, i);
        end = end.max(stop);
    }
    let mut extents = Vec::with_capacity(canvas.pieces.len());
    for (start, piece) in canvas.pieces {
        let entry = &entries[piece.entry];
        let length = piece.end - start;
        let source = match &entry.content {
            Content::Hole => ExtentSource::Zeros,
            Content::Data(replicas) => ExtentSource::Slice(
                replicas
                    .iter()
                    .map(|p| subrange_pointer(p, piece.inner, length))
                    .collect::<Result<_>>()?,
            ),
        };
        extents.push(ResolvedExtent { region_offset: start, length, source });
    }
    Ok(Resolved { extents, end_offset: end })
}

fn mergeable(a: &ResolvedExtent, b: &ResolvedExtent) -> bool {
    if a.region_offset + a.length != b.region_offset {
        return false;
    }
    match (&a.source, &b.source) {
        (ExtentSource::Slice(ra), ExtentSource::Slice(rb)) => {
            ra.len() == rb.len() && ra.iter().zip(rb).all(|(x, y)| x.is_followed_by(y))
        }
        _ => false,
    }
}

/// Folds adjacent extents whose every replica pair is contiguous on disk.
pub fn coalesce(extents: impl IntoIterator<Item = ResolvedExtent>) -> Vec<ResolvedExtent> {
    let mut out: Vec<ResolvedExtent> = Vec::new();
    for ext in extents {
        match out.last_mut() {
            Some(last) if mergeable(last, &ext) => {
                last.length += ext.length;
                if let (ExtentSource::Slice(ra), ExtentSource::Slice(rb)) = (&mut last.source, &ext.source) {
                    for (x, y) in ra.iter_mut().zip(rb) {
                        x.length += y.length;
                    }
                }
            }
            Some(last)
                if last.source == ExtentSource::Zeros
                    && ext.source == ExtentSource::Zeros
                    && last.region_offset + last.length == ext.region_offset =>
            {
                last.length += ext.length;
            }
            _ => out.push(ext),
        }
    }
    out
}

pub fn extent_to_entry(ext: &ResolvedExtent) -> SliceEntry {
    let content = match &ext.source {
        ExtentSource::Slice(r) => Content::Data(r.clone()),
        ExtentSource::Zeros => Content::Hole,
    };
    SliceEntry { content, placement: Placement::Absolute(ext.region_offset), length: ext.length }
}

/// Rewrites an entry list into the minimal all-absolute list describing the
/// same bytes and the same end offset.
pub fn compact(entries: &[SliceEntry], region_size: u64) -> Result<Vec<SliceEntry>> {
    let resolved = resolve_entries(entries, region_size)?;
    Ok(compact_resolved(&resolved))
}

pub fn compact_resolved(resolved: &Resolved) -> Vec<SliceEntry> {
    let data = resolved
        .extents
        .iter()
        .filter(|e| e.source != ExtentSource::Zeros)
        .cloned();
    let mut out: Vec<SliceEntry> = coalesce(data).iter().map(extent_to_entry).collect();
    let data_end = out.last().map_or(0, |e| e.offset().unwrap() + e.length);
    if data_end < resolved.end_offset {
        // Preserve the end offset of a region whose tail reads as zeros.
        out.push(SliceEntry {
            content: Content::Hole,
            placement: Placement::Absolute(data_end),
            length: resolved.end_offset - data_end,
        });
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RegionPiece {
    pub region_index: u64,
    pub offset_in_region: u64,
    pub length: u64,
}

/// Cuts `[file_offset, file_offset + length)` at region boundaries.
pub fn region_split(file_offset: u64, length: u64, region_size: u64) -> Vec<RegionPiece> {
    assert!(region_size > 0, "region size must be positive");
    let mut out = Vec::new();
    let mut pos = file_offset;
    let end = file_offset + length;
    while pos < end {
        let region_index = pos / region_size;
        let offset_in_region = pos % region_size;
        let take = (region_size - offset_in_region).min(end - pos);
        out.push(RegionPiece { region_index, offset_in_region, length: take });
        pos += take;
    }
    out
}
