//! Half-precision embedding caches.
//!
//! ```text
//! header   "EBCN" | u16 version=1 | u8 dtype=1 (binary16) | u32 dim | u64 count
//! record   u16 id_len | id | u8 label | u16 pair_len | pair_id | u16 tag_len | tag
//!          | u32 positions | positions × dim × f16
//! footer   u64 FNV-1a over all record bytes
//! ```
//!
//! Everything is little-endian. Labels: 0 coherent, 1 corrupted, 2 unlabeled.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use half::f16;

use crate::corruption::ContrastivePair;
use crate::error::{Error, Result};
use crate::sequence::{EmbeddingSequence, Label};

pub const CACHE_MAGIC: &[u8; 4] = b"EBCN";
pub const CACHE_VERSION: u16 = 1;
pub const DTYPE_F16: u8 = 1;
pub const HEADER_LEN: usize = 4 + 2 + 1 + 4 + 8;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CacheRecord {
    pub id: String,
    pub label: Label,
    pub pair_id: String,
    pub kind: String,
    pub positions: usize,
    /// Raw binary16 bit patterns, row-major.
    pub payload: Vec<u16>,
}

impl CacheRecord {
    /// Rounds `seq` to binary16 (round-to-nearest-even).
    pub fn from_sequence(seq: &EmbeddingSequence, pair_id: &str, kind: &str) -> Result<Self> {
        let mut payload = Vec::with_capacity(seq.data().len());
        for (i, &v) in seq.data().iter().enumerate() {
            let h = f16::from_f64(v);
            if !v.is_finite() || !h.is_finite() {
                return Err(Error::data(format!(
                    "record `{}` value {v} at index {i} is not representable in binary16",
                    seq.id
                )));
            }
            payload.push(h.to_bits());
        }
        Ok(CacheRecord {
            id: seq.id.clone(),
            label: seq.label,
            pair_id: pair_id.to_string(),
            kind: kind.to_string(),
            positions: seq.positions(),
            payload,
        })
    }

    pub fn dim(&self) -> usize {
        self.payload.len().checked_div(self.positions).unwrap_or(0)
    }

    pub fn to_sequence(&self) -> EmbeddingSequence {
        let data = self.payload.iter().map(|&b| f16::from_bits(b).to_f64()).collect();
        EmbeddingSequence::new(self.id.clone(), self.positions, self.dim(), data)
            .expect("record payload sized positions × dim")
            .with_label(self.label)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CacheFile {
    pub dim: usize,
    pub records: Vec<CacheRecord>,
}

fn put_str(out: &mut Vec<u8>, s: &str, what: &str) -> Result<()> {
    let len: u16 = s
        .len()
        .try_into()
        .map_err(|_| Error::data(format!("{what} `{s}` longer than 65535 bytes")))?;
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

pub fn encode_cache(file: &CacheFile) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(CACHE_MAGIC);
    out.extend_from_slice(&CACHE_VERSION.to_le_bytes());
    out.push(DTYPE_F16);
    let dim: u32 = file.dim.try_into().map_err(|_| Error::data("dim exceeds u32"))?;
    out.extend_from_slice(&dim.to_le_bytes());
    out.extend_from_slice(&(file.records.len() as u64).to_le_bytes());
    for r in &file.records {
        if r.positions == 0 || r.payload.len() != r.positions * file.dim {
            return Err(Error::data(format!(
                "record `{}` payload has {} values, expected {} × {}",
                r.id,
                r.payload.len(),
                r.positions,
                file.dim
            )));
        }
        put_str(&mut out, &r.id, "id")?;
        out.push(r.label.code());
        put_str(&mut out, &r.pair_id, "pair id")?;
        put_str(&mut out, &r.kind, "kind tag")?;
        let p: u32 = r
            .positions
            .try_into()
            .map_err(|_| Error::data("position count exceeds u32"))?;
        out.extend_from_slice(&p.to_le_bytes());
        for &b in &r.payload {
            out.extend_from_slice(&b.to_le_bytes());
        }
    }
    let sum = crate::fnv1a64(&out[HEADER_LEN..]);
    out.extend_from_slice(&sum.to_le_bytes());
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let left = self.buf.len() - self.pos;
        if left < n {
            return Err(Error::Truncated {
                offset: self.pos as u64,
                needed: n - left,
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let at = self.pos;
        let n = self.u16()? as usize;
        let bytes = self.take(n)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| Error::data(format!("{what} at byte offset {at} is not UTF-8")))
    }
}

fn bad(field: &'static str, detail: impl Into<String>) -> Error {
    Error::BadHeader {
        field,
        detail: detail.into(),
    }
}

fn parse_records(bytes: &[u8], start: usize, dim: usize, count: u64) -> Result<(Vec<CacheRecord>, usize)> {
    let mut c = Cursor { buf: bytes, pos: start };
    let mut records = Vec::new();
    for _ in 0..count {
        let id = c.string("id")?;
        let label_at = c.pos;
        let code = c.u8()?;
        let label = Label::from_code(code)
            .ok_or_else(|| Error::data(format!("label {code} at byte offset {label_at} is not 0, 1 or 2")))?;
        let pair_id = c.string("pair id")?;
        let kind = c.string("kind tag")?;
        let positions = c.u32()? as usize;
        if positions == 0 {
            return Err(Error::data(format!("record `{id}` has zero positions")));
        }
        let n = positions
            .checked_mul(dim)
            .and_then(|v| v.checked_mul(2))
            .ok_or_else(|| Error::data(format!("record `{id}` payload size overflows")))?;
        let raw = c.take(n)?;
        let payload = raw.chunks_exact(2).map(|b| u16::from_le_bytes([b[0], b[1]])).collect();
        records.push(CacheRecord {
            id,
            label,
            pair_id,
            kind,
            positions,
            payload,
        });
    }
    Ok((records, c.pos))
}

/// Parses and verifies a cache. A file shorter than its header's record
/// count allows is reported as truncated; otherwise the checksum is
/// verified before records are interpreted, so any damage to record bytes
/// surfaces as a checksum mismatch.
pub fn decode_cache(bytes: &[u8]) -> Result<CacheFile> {
    let mut c = Cursor { buf: bytes, pos: 0 };
    if c.take(4)? != CACHE_MAGIC {
        return Err(bad("magic", "expected \"EBCN\""));
    }
    let version = c.u16()?;
    if version != CACHE_VERSION {
        return Err(bad("version", format!("unsupported version {version}")));
    }
    let dtype = c.u8()?;
    if dtype != DTYPE_F16 {
        return Err(bad("dtype", format!("unsupported dtype code {dtype}")));
    }
    let dim = c.u32()? as usize;
    if dim == 0 {
        return Err(bad("dim", "must be positive"));
    }
    let count = c.u64()?;
    // smallest file the header allows: every record with empty strings and
    // a single position
    let min_record = 2 + 1 + 2 + 2 + 4 + 2 * dim as u64;
    let min_len = count
        .checked_mul(min_record)
        .and_then(|v| v.checked_add((HEADER_LEN + 8) as u64))
        .unwrap_or(u64::MAX);
    if (bytes.len() as u64) < min_len {
        return Err(Error::Truncated {
            offset: bytes.len() as u64,
            needed: usize::try_from(min_len - bytes.len() as u64).unwrap_or(usize::MAX),
        });
    }
    let body_end = bytes.len() - 8;
    let stored = u64::from_le_bytes(bytes[body_end..].try_into().unwrap());
    let computed = crate::fnv1a64(&bytes[HEADER_LEN..body_end]);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }
    let (records, end) = parse_records(&bytes[..body_end], HEADER_LEN, dim, count)?;
    if end != body_end {
        return Err(Error::data(format!(
            "{} unexpected bytes after record {count} at byte offset {end}",
            body_end - end
        )));
    }
    Ok(CacheFile { dim, records })
}

pub fn write_cache(file: &CacheFile, path: &Path) -> Result<()> {
    let bytes = encode_cache(file)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_cache(path: &Path) -> Result<CacheFile> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_cache(&bytes)
}

/// Stores coherent sequences as label-0 records without pair ids.
pub fn corpus_to_cache(seqs: &[EmbeddingSequence]) -> Result<CacheFile> {
    let dim = seqs.first().map_or(0, |s| s.dim());
    if let Some(s) = seqs.iter().find(|s| s.dim() != dim) {
        return Err(Error::DimMismatch {
            expected: dim,
            actual: s.dim(),
        });
    }
    let records = seqs
        .iter()
        .map(|s| CacheRecord::from_sequence(s, "", ""))
        .collect::<Result<_>>()?;
    Ok(CacheFile { dim, records })
}

/// Stores pairs as label-0/label-1 record twins sharing a pair id.
pub fn pairs_to_cache(pairs: &[ContrastivePair]) -> Result<CacheFile> {
    let dim = pairs.first().map_or(0, |p| p.positive.dim());
    let mut records = Vec::with_capacity(pairs.len() * 2);
    for (i, p) in pairs.iter().enumerate() {
        if p.positive.dim() != dim {
            return Err(Error::DimMismatch {
                expected: dim,
                actual: p.positive.dim(),
            });
        }
        let pair_id = format!("pair-{i:06}");
        let pos = p.positive.clone().with_label(Label::Coherent);
        let mut neg = p.negative.clone().with_label(Label::Corrupted);
        neg.id = format!("{}~{}", p.positive.id, p.kind);
        records.push(CacheRecord::from_sequence(&pos, &pair_id, "")?);
        records.push(CacheRecord::from_sequence(&neg, &pair_id, &p.kind)?);
    }
    Ok(CacheFile { dim, records })
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairedDataset {
    pub pairs: Vec<ContrastivePair>,
    /// Ids of corrupted records that found no coherent partner.
    pub dropped: Vec<String>,
}

impl PairedDataset {
    /// Distinct kind tags, sorted.
    pub fn kinds(&self) -> Vec<String> {
        let mut k: Vec<String> = self.pairs.iter().map(|p| p.kind.clone()).collect();
        k.sort();
        k.dedup();
        k
    }
}

/// Matches each corrupted record to its coherent partner: the label-0
/// record whose id equals the corrupted record's pair id, or failing that
/// the label-0 record carrying the same pair id. Validity is recomputed from
/// the payloads.
pub fn pair_records(file: &CacheFile) -> Result<PairedDataset> {
    let mut by_id: HashMap<&str, &CacheRecord> = HashMap::new();
    let mut by_pair: HashMap<&str, &CacheRecord> = HashMap::new();
    for r in file.records.iter().filter(|r| r.label == Label::Coherent) {
        by_id.insert(&r.id, r);
        if !r.pair_id.is_empty() {
            by_pair.entry(&r.pair_id).or_insert(r);
        }
    }
    let mut pairs = Vec::new();
    let mut dropped = Vec::new();
    for r in file.records.iter().filter(|r| r.label == Label::Corrupted) {
        let partner = (!r.pair_id.is_empty())
            .then(|| {
                by_id
                    .get(r.pair_id.as_str())
                    .or_else(|| by_pair.get(r.pair_id.as_str()))
            })
            .flatten();
        match partner {
            Some(pos) if pos.positions == r.positions => {
                pairs.push(ContrastivePair::from_twins(
                    pos.to_sequence(),
                    r.to_sequence(),
                    r.kind.clone(),
                )?);
            }
            _ => {
                log::warn!("corrupted record `{}` has no matching coherent record; dropped", r.id);
                dropped.push(r.id.clone());
            }
        }
    }
    if pairs.is_empty() {
        return Err(Error::data("dataset has no pairs"));
    }
    Ok(PairedDataset { pairs, dropped })
}

pub fn ingest_paired(path: &Path) -> Result<PairedDataset> {
    pair_records(&read_cache(path)?)
}

/// Human-readable summary: header, one line per record, per-kind counts and
/// any corrupted records without a partner.
pub fn inspect(file: &CacheFile) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "magic EBCN  version {CACHE_VERSION}  dtype binary16");
    let _ = writeln!(s, "dim {}  records {}", file.dim, file.records.len());
    let _ = writeln!(
        s,
        "{:<5} {:<28} {:>5} {:<16} {:<16} {:>9}",
        "#", "id", "label", "pair", "kind", "positions"
    );
    for (i, r) in file.records.iter().enumerate() {
        let _ = writeln!(
            s,
            "{:<5} {:<28} {:>5} {:<16} {:<16} {:>9}",
            i,
            r.id,
            r.label.code(),
            r.pair_id,
            r.kind,
            r.positions
        );
    }
    let mut per_kind: BTreeMap<(&str, u8), usize> = BTreeMap::new();
    for r in &file.records {
        *per_kind.entry((r.kind.as_str(), r.label.code())).or_default() += 1;
    }
    s.push_str("counts by kind/label:\n");
    for ((k, l), n) in per_kind {
        let name = if k.is_empty() { "-" } else { k };
        let _ = writeln!(s, "  {name:<16} label {l}: {n}");
    }
    match pair_records(file) {
        Ok(ds) => {
            let _ = writeln!(s, "pairs: {} matched, {} unmatched", ds.pairs.len(), ds.dropped.len());
        }
        Err(_) => s.push_str("pairs: none\n"),
    }
    s
}
