//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic     8 bytes  "REVFFNCK"
//! version   u32
//! header    u64 length + JSON (config, next_step, optimizer metadata)
//! count     u64
//! tensors   count x { name_len u32, name, dtype u8, rank u32, dims u64*, data }
//! checksum  u64 FNV-1a over every preceding byte
//! ```
//!
//! dtype 0 stores `f64`, dtype 1 stores `f32`. Single-precision tensors hold
//! only f32-representable values, so both round-trip bit for bit.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::params::{named_tensors, named_tensors_mut};
use crate::tensor::{Precision, Tensor};
use crate::train::{AdamConfig, AdamState};

pub const MAGIC: &[u8; 8] = b"REVFFNCK";
pub const VERSION: u32 = 1;

/// 64-bit FNV-1a.
#[derive(Debug, Clone, Copy)]
pub struct Fnv64(u64);

impl Fnv64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;

    pub fn new() -> Self {
        Self(Self::OFFSET)
    }

    pub fn update(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(Self::PRIME);
        }
    }

    pub fn finish(&self) -> u64 {
        self.0
    }

    pub fn hash(bytes: &[u8]) -> u64 {
        let mut h = Self::new();
        h.update(bytes);
        h.finish()
    }
}

impl Default for Fnv64 {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: ModelConfig,
    next_step: usize,
    optimizer: Option<OptimizerMeta>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct OptimizerMeta {
    step: u64,
    config: AdamConfig,
}

/// Everything needed to resume a run.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    /// Next global training step.
    pub next_step: usize,
    pub params: ModelParams,
    pub optimizer: Option<AdamState>,
}

fn write_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor) {
    out.extend((name.len() as u32).to_le_bytes());
    out.extend(name.as_bytes());
    out.push(match t.precision() {
        Precision::Double => 0,
        Precision::Single => 1,
    });
    out.extend((t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend((d as u64).to_le_bytes());
    }
    for &v in t.data() {
        match t.precision() {
            Precision::Double => out.extend(v.to_le_bytes()),
            Precision::Single => out.extend((v as f32).to_le_bytes()),
        }
    }
}

/// Serialize a checkpoint to bytes.
pub fn encode(ck: &Checkpoint) -> Result<Vec<u8>> {
    let header = Header {
        config: ck.config.clone(),
        next_step: ck.next_step,
        optimizer: ck.optimizer.as_ref().map(|s| OptimizerMeta {
            step: s.step,
            config: s.config,
        }),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::new();
    out.extend(MAGIC);
    out.extend(VERSION.to_le_bytes());
    out.extend((json.len() as u64).to_le_bytes());
    out.extend(&json);

    let mut records: Vec<(String, &Tensor)> = named_tensors(&ck.params).into_iter().map(|(n, _, t)| (n, t)).collect();
    if let Some(s) = &ck.optimizer {
        records.extend(named_tensors(&s.m).into_iter().map(|(n, _, t)| (format!("adam.m.{n}"), t)));
        records.extend(named_tensors(&s.v).into_iter().map(|(n, _, t)| (format!("adam.v.{n}"), t)));
    }
    out.extend((records.len() as u64).to_le_bytes());
    for (name, t) in &records {
        write_tensor(&mut out, name, t);
    }
    let sum = Fnv64::hash(&out);
    out.extend(sum.to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::MalformedCheckpoint(format!("unexpected end at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::MalformedCheckpoint("length overflows usize".into()))
    }
}

struct Record {
    name: String,
    precision: Precision,
    shape: Vec<usize>,
    data: Vec<f64>,
}

fn read_record(r: &mut Reader<'_>) -> Result<Record> {
    let name_len = r.u32()? as usize;
    let name = String::from_utf8(r.take(name_len)?.to_vec())
        .map_err(|_| Error::MalformedCheckpoint("tensor name is not UTF-8".into()))?;
    let precision = match r.u8()? {
        0 => Precision::Double,
        1 => Precision::Single,
        t => return Err(Error::MalformedCheckpoint(format!("`{name}` has unknown dtype tag {t}"))),
    };
    let rank = r.u32()? as usize;
    let shape = (0..rank).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
    let n = shape
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .ok_or_else(|| Error::MalformedCheckpoint(format!("`{name}` dims overflow")))?;
    let width = if precision == Precision::Double { 8 } else { 4 };
    let bytes = r.take(n.checked_mul(width).ok_or_else(|| Error::MalformedCheckpoint("size overflow".into()))?)?;
    let data = match precision {
        Precision::Double => bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect(),
        Precision::Single => bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect(),
    };
    Ok(Record {
        name,
        precision,
        shape,
        data,
    })
}

/// Fill every tensor of `target` from `records` by name, checking shapes and precision.
fn fill(
    target: &mut ModelParams,
    prefix: &str,
    records: &mut std::collections::BTreeMap<String, Record>,
    precision: Precision,
) -> Result<()> {
    for (name, _, t) in named_tensors_mut(target) {
        let key = format!("{prefix}{name}");
        let rec = records
            .remove(&key)
            .ok_or_else(|| Error::MalformedCheckpoint(format!("missing tensor `{key}`")))?;
        if rec.shape != t.shape() {
            return Err(Error::CheckpointShape {
                name: key,
                expected: t.shape().to_vec(),
                found: rec.shape,
            });
        }
        if rec.precision != precision {
            return Err(Error::MalformedCheckpoint(format!(
                "`{key}` is stored as {}, config expects {}",
                rec.precision.as_str(),
                precision.as_str()
            )));
        }
        *t = Tensor::from_vec(rec.shape, rec.data, precision)?;
    }
    Ok(())
}

/// Parse bytes against `expected`, which fixes every tensor shape. The
/// checksum is verified before anything else is interpreted.
pub fn decode(bytes: &[u8], expected: &ModelConfig) -> Result<Checkpoint> {
    if bytes.len() < MAGIC.len() + 4 + 8 {
        return Err(Error::ChecksumMismatch);
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 8);
    if Fnv64::hash(body) != u64::from_le_bytes(trailer.try_into().expect("8 bytes")) {
        return Err(Error::ChecksumMismatch);
    }
    let mut r = Reader { buf: body, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::MalformedCheckpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: VERSION,
        });
    }
    let header_len = r.len()?;
    let header: Header = serde_json::from_slice(r.take(header_len)?)?;
    let count = r.len()?;
    let mut records = std::collections::BTreeMap::new();
    for _ in 0..count {
        let rec = read_record(&mut r)?;
        if records.contains_key(&rec.name) {
            return Err(Error::MalformedCheckpoint(format!("duplicate tensor `{}`", rec.name)));
        }
        records.insert(rec.name.clone(), rec);
    }
    if r.pos != body.len() {
        return Err(Error::MalformedCheckpoint("trailing bytes after tensor records".into()));
    }

    expected.validate()?;
    let template = ModelParams::init(expected)?.zeros_like();
    let prec = expected.precision;
    let mut params = template.clone();
    fill(&mut params, "", &mut records, prec)?;
    let optimizer = match header.optimizer {
        Some(meta) => {
            let mut st = AdamState::new(&template, meta.config);
            st.step = meta.step;
            fill(&mut st.m, "adam.m.", &mut records, prec)?;
            fill(&mut st.v, "adam.v.", &mut records, prec)?;
            Some(st)
        }
        None => None,
    };
    if let Some(name) = records.keys().next() {
        return Err(Error::MalformedCheckpoint(format!("unexpected tensor `{name}`")));
    }
    Ok(Checkpoint {
        config: header.config,
        next_step: header.next_step,
        params,
        optimizer,
    })
}

/// Write `bytes` to `path` atomically: a sibling temp file, fsync, rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::config("path", format!("`{}` has no file name", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp", file_name.to_string_lossy()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    write_atomic(path, &encode(ck)?)
}

pub fn load_checkpoint(path: &Path, expected: &ModelConfig) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::CheckpointMissing(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    decode(&bytes, expected)
}
