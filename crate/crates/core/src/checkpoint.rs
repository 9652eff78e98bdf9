//! Versioned binary checkpoints.
//!
//! ```text
//! "EBCK" | u16 version | u32 header length | header text
//!        | u64 payload length | payload (f32 LE) | u64 FNV-1a(payload)
//! ```
//!
//! The header is UTF-8: a `[config]` section holding the canonical
//! key-value network config, then a `[params]` section with one
//! `name shape byte_offset` line per tensor (shape as `AxB`).

use std::path::Path;

use ebcn_diff::Tensor;

use crate::config::NetworkConfig;
use crate::error::{Error, Result};
use crate::kv::KvMap;
use crate::network::{ConstraintNetwork, Param};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"EBCK";
pub const CHECKPOINT_VERSION: u16 = 1;

pub fn encode(net: &ConstraintNetwork) -> Vec<u8> {
    let mut header = String::from("[config]\n");
    header.push_str(&net.config().to_kv().to_text());
    header.push_str("[params]\n");
    let mut payload = Vec::with_capacity(net.param_count() * 4);
    for p in net.params() {
        let shape: Vec<String> = p.value.shape().iter().map(|s| s.to_string()).collect();
        header.push_str(&format!("{} {} {}\n", p.name, shape.join("x"), payload.len()));
        for &v in p.value.data() {
            payload.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let mut out = Vec::with_capacity(payload.len() + header.len() + 32);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(&payload);
    out.extend_from_slice(&crate::fnv1a64(&payload).to_le_bytes());
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Truncated {
                offset: self.pos as u64,
                needed: n - (self.buf.len() - self.pos),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
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
}

fn bad(field: &'static str, detail: impl Into<String>) -> Error {
    Error::BadHeader {
        field,
        detail: detail.into(),
    }
}

pub fn decode(bytes: &[u8]) -> Result<ConstraintNetwork> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(bad("magic", "not a checkpoint"));
    }
    let version = r.u16()?;
    if version != CHECKPOINT_VERSION {
        return Err(bad("version", format!("unsupported version {version}")));
    }
    let hlen = r.u32()? as usize;
    let header = std::str::from_utf8(r.take(hlen)?).map_err(|e| bad("header", e.to_string()))?;
    let plen = r.u64()? as usize;
    let payload = r.take(plen)?;
    let stored = r.u64()?;
    let computed = crate::fnv1a64(payload);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }
    if r.pos != bytes.len() {
        return Err(bad("payload", "trailing bytes after checksum"));
    }

    let rest = header
        .strip_prefix("[config]\n")
        .ok_or_else(|| bad("header", "missing [config] section"))?;
    let (cfg_text, manifest) = rest
        .split_once("[params]\n")
        .ok_or_else(|| bad("header", "missing [params] section"))?;
    let config = NetworkConfig::from_kv(&KvMap::parse(cfg_text)?)?;
    let mut params = Vec::new();
    for line in manifest.lines() {
        let mut it = line.split(' ');
        let (Some(name), Some(shape), Some(off), None) = (it.next(), it.next(), it.next(), it.next()) else {
            return Err(bad("params", format!("malformed manifest line `{line}`")));
        };
        let shape: Vec<usize> = shape
            .split('x')
            .map(|s| s.parse().map_err(|_| bad("params", format!("bad shape in `{line}`"))))
            .collect::<Result<_>>()?;
        let off: usize = off
            .parse()
            .map_err(|_| bad("params", format!("bad offset in `{line}`")))?;
        let n: usize = shape.iter().product();
        let end = off
            .checked_add(n * 4)
            .filter(|&e| e <= payload.len())
            .ok_or_else(|| bad("params", format!("`{name}` extends past payload")))?;
        let data = payload[off..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        params.push(Param {
            name: name.to_string(),
            value: Tensor::new(shape, data)?,
        });
    }
    ConstraintNetwork::from_params(config, params)
}

pub fn save(net: &ConstraintNetwork, path: &Path) -> Result<()> {
    std::fs::write(path, encode(net)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<ConstraintNetwork> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

/// The network as it will be after a save/load cycle (parameters rounded
/// to f32).
pub fn round_trip(net: &ConstraintNetwork) -> ConstraintNetwork {
    decode(&encode(net)).expect("freshly encoded checkpoint decodes")
}
