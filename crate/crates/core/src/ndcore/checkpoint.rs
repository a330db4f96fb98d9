//! Portable checkpoint container.
//!
//! Byte layout, all integers little-endian:
//!
//! ```text
//! magic          8 bytes   "SPMCKPT1"
//! format         u32       CHECKPOINT_VERSION
//! init_seed      u64
//! arch_hash      32 bytes  SHA-256 of the canonical architecture config
//! param_version  u32
//! entry_count    u32
//! entries        entry_count × {
//!     kind       u8        0 weight, 1 bias, 2 norm, 3 buffer
//!     name_len   u32
//!     name       name_len bytes, UTF-8
//!     ndim       u32
//!     dims       ndim × u64
//!     payload    prod(dims) × f64
//! }
//! ```
//!
//! Batch-norm running statistics are stored as buffers named
//! `<layer>.running_mean`, `<layer>.running_var` and `<layer>.updates`.
//! Entries are written in name order, so equal parameter sets produce
//! identical bytes.

use std::io::{Read, Write};

use super::{ParamKind, ParameterSet, RunningStats, Tensor};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SPMCKPT1";
pub const CHECKPOINT_VERSION: u32 = 1;

const BUFFER_KIND: u8 = 3;
const MEAN_SUFFIX: &str = ".running_mean";
const VAR_SUFFIX: &str = ".running_var";
const UPDATES_SUFFIX: &str = ".updates";

/// Parameters plus the hash of the architecture they belong to.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ParameterSet,
    pub arch_hash: [u8; 32],
}

fn put_u32(w: &mut impl Write, v: u32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn put_u64(w: &mut impl Write, v: u64) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn put_entry(w: &mut impl Write, kind: u8, name: &str, shape: &[usize], data: &[f64]) -> std::io::Result<()> {
    w.write_all(&[kind])?;
    put_u32(w, name.len() as u32)?;
    w.write_all(name.as_bytes())?;
    put_u32(w, shape.len() as u32)?;
    for &d in shape {
        put_u64(w, d as u64)?;
    }
    for v in data {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn write_checkpoint(w: &mut impl Write, ckpt: &Checkpoint) -> Result<()> {
    let p = &ckpt.params;
    let entries = p.len() + 3 * p.running_iter().count();
    let io = |e| Error::Checkpoint(format!("write failed: {e}"));
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    put_u32(&mut buf, CHECKPOINT_VERSION).map_err(io)?;
    put_u64(&mut buf, p.seed).map_err(io)?;
    buf.extend_from_slice(&ckpt.arch_hash);
    put_u32(&mut buf, p.version).map_err(io)?;
    put_u32(&mut buf, entries as u32).map_err(io)?;
    for (name, param) in p.iter() {
        put_entry(
            &mut buf,
            param.kind.code(),
            name,
            param.value.shape(),
            param.value.data(),
        )
        .map_err(io)?;
    }
    for (name, rs) in p.running_iter() {
        let c = rs.mean.len();
        put_entry(&mut buf, BUFFER_KIND, &format!("{name}{MEAN_SUFFIX}"), &[c], &rs.mean).map_err(io)?;
        put_entry(&mut buf, BUFFER_KIND, &format!("{name}{VAR_SUFFIX}"), &[c], &rs.var).map_err(io)?;
        put_entry(
            &mut buf,
            BUFFER_KIND,
            &format!("{name}{UPDATES_SUFFIX}"),
            &[1],
            &[rs.updates as f64],
        )
        .map_err(io)?;
    }
    w.write_all(&buf).map_err(io)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Checkpoint(format!(
                "truncated while reading {what} at byte {}",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

#[derive(Default)]
struct PartialStats {
    mean: Option<Vec<f64>>,
    var: Option<Vec<f64>>,
    updates: Option<u64>,
}

pub fn read_checkpoint(r: &mut impl Read) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)
        .map_err(|e| Error::Checkpoint(format!("read failed: {e}")))?;
    let mut c = Cursor { bytes: &bytes, pos: 0 };
    if c.take(8, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
    }
    let format = c.u32("format version")?;
    if format != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {format}")));
    }
    let seed = c.u64("seed")?;
    let arch_hash: [u8; 32] = c.take(32, "architecture hash")?.try_into().expect("32 bytes");
    let version = c.u32("parameter version")?;
    let count = c.u32("entry count")?;

    let mut params = ParameterSet::new(seed);
    params.version = version;
    let mut stats: std::collections::BTreeMap<String, PartialStats> = Default::default();
    for _ in 0..count {
        let kind = c.u8("entry kind")?;
        let name_len = c.u32("name length")? as usize;
        let name = std::str::from_utf8(c.take(name_len, "name")?)
            .map_err(|_| Error::Checkpoint("entry name is not UTF-8".into()))?
            .to_string();
        let ndim = c.u32("ndim")? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(c.u64("dimension")? as usize);
        }
        let n: usize = shape.iter().product();
        let payload = c.take(
            n.checked_mul(8)
                .ok_or_else(|| Error::Checkpoint("payload too large".into()))?,
            &name,
        )?;
        let data: Vec<f64> = payload
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        if kind == BUFFER_KIND {
            let (layer, field) = [MEAN_SUFFIX, VAR_SUFFIX, UPDATES_SUFFIX]
                .iter()
                .find_map(|s| name.strip_suffix(s).map(|l| (l.to_string(), *s)))
                .ok_or_else(|| Error::Checkpoint(format!("unknown buffer `{name}`")))?;
            let entry = stats.entry(layer).or_default();
            match field {
                MEAN_SUFFIX => entry.mean = Some(data),
                VAR_SUFFIX => entry.var = Some(data),
                _ => entry.updates = Some(data.first().copied().unwrap_or(0.0) as u64),
            }
        } else {
            let kind =
                ParamKind::from_code(kind).ok_or_else(|| Error::Checkpoint(format!("unknown entry kind {kind}")))?;
            params.insert(name, kind, Tensor::new(shape, data)?)?;
        }
    }
    if c.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - c.pos)));
    }
    for (layer, s) in stats {
        match (s.mean, s.var, s.updates) {
            (Some(mean), Some(var), Some(updates)) if mean.len() == var.len() => {
                params.insert_running(layer, RunningStats { mean, var, updates });
            }
            _ => {
                return Err(Error::Checkpoint(format!(
                    "incomplete running statistics for `{layer}`"
                )))
            }
        }
    }
    Ok(Checkpoint { params, arch_hash })
}
