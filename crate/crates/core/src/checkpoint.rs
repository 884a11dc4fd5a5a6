//! Binary model checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   4 bytes  "SBFM"
//! version u32      currently 1
//! header  u32 length, then that many bytes of UTF-8 JSON (config + metadata)
//! records repeated until EOF:
//!   name  u32 length, then that many bytes of UTF-8
//!   rank  u8
//!   dims  rank x u64
//!   data  product(dims) x f64
//! ```
//!
//! Records hold every model parameter by name, then optionally the optimizer
//! momentum buffers under `optim.momentum.<param>`. A round trip restores
//! every parameter bitwise; loading rejects wrong magic, version, unknown or
//! missing names, and shape mismatches.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{build_model, FusedModel, ModelConfig};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"SBFM";
pub const VERSION: u32 = 1;

const MOMENTUM_PREFIX: &str = "optim.momentum.";

/// Training provenance stored in the header.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub epoch: usize,
    pub seed: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: u32,
    model: ModelConfig,
    meta: CheckpointMeta,
    momentum_records: usize,
}

/// A checkpoint read back from disk.
pub struct LoadedCheckpoint {
    pub model: FusedModel,
    pub meta: CheckpointMeta,
    /// Momentum buffers in parameter order, when they were saved.
    pub momentum: Vec<(String, Tensor)>,
}

fn write_record<W: Write>(w: &mut W, name: &str, tensor: &Tensor) -> Result<()> {
    w.write_all(&(name.len() as u32).to_le_bytes())?;
    w.write_all(name.as_bytes())?;
    w.write_all(&[tensor.shape().len() as u8])?;
    for &d in tensor.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    for &v in tensor.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

/// Saves the model (and optionally momentum buffers aligned with its
/// parameter order) atomically: temp file then rename.
pub fn save_checkpoint(
    model: &FusedModel,
    meta: &CheckpointMeta,
    momentum: Option<&[Tensor]>,
    path: &Path,
) -> Result<()> {
    let params = model.named_params();
    if let Some(m) = momentum {
        if m.len() != params.len() {
            return Err(Error::Contract(format!(
                "{} momentum buffers for {} params",
                m.len(),
                params.len()
            )));
        }
    }
    let header = Header {
        format: VERSION,
        model: model.config().clone(),
        meta: meta.clone(),
        momentum_records: momentum.map_or(0, |m| m.len()),
    };
    let tmp = path.with_extension("ckpt.tmp");
    {
        let mut w = BufWriter::new(File::create(&tmp)?);
        w.write_all(&MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        let json = serde_json::to_vec(&header)?;
        w.write_all(&(json.len() as u32).to_le_bytes())?;
        w.write_all(&json)?;
        for (name, tensor) in &params {
            write_record(&mut w, name, tensor)?;
        }
        if let Some(buffers) = momentum {
            for ((name, _), buf) in params.iter().zip(buffers) {
                write_record(&mut w, &format!("{MOMENTUM_PREFIX}{name}"), buf)?;
            }
        }
        w.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

struct RecordReader<R: Read> {
    inner: R,
    offset: u64,
}

impl<R: Read> RecordReader<R> {
    fn read_exact(&mut self, buf: &mut [u8], what: &str) -> Result<()> {
        self.inner.read_exact(buf).map_err(|e| {
            Error::Checkpoint(format!(
                "truncated while reading {what} at byte {}: {e}",
                self.offset
            ))
        })?;
        self.offset += buf.len() as u64;
        Ok(())
    }

    fn read_u32(&mut self, what: &str) -> Result<u32> {
        let mut b = [0u8; 4];
        self.read_exact(&mut b, what)?;
        Ok(u32::from_le_bytes(b))
    }

    /// Returns `None` at clean EOF before a record starts.
    fn read_record(&mut self) -> Result<Option<(String, Tensor)>> {
        let mut len_buf = [0u8; 4];
        match self.inner.read_exact(&mut len_buf) {
            Ok(()) => self.offset += 4,
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => return Ok(None),
            Err(e) => return Err(Error::Checkpoint(format!("read error: {e}"))),
        }
        let name_len = u32::from_le_bytes(len_buf) as usize;
        if name_len > 4096 {
            return Err(Error::Checkpoint(format!(
                "implausible name length {name_len} at byte {}",
                self.offset
            )));
        }
        let mut name = vec![0u8; name_len];
        self.read_exact(&mut name, "record name")?;
        let name = String::from_utf8(name)
            .map_err(|e| Error::Checkpoint(format!("record name is not UTF-8: {e}")))?;
        let mut rank = [0u8; 1];
        self.read_exact(&mut rank, "record rank")?;
        let mut shape = Vec::with_capacity(rank[0] as usize);
        for _ in 0..rank[0] {
            let mut d = [0u8; 8];
            self.read_exact(&mut d, "record dims")?;
            shape.push(u64::from_le_bytes(d) as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        let mut chunk = vec![0u8; 8 * 1024.min(numel.max(1))];
        let mut remaining = numel;
        while remaining > 0 {
            let take = remaining.min(chunk.len() / 8);
            let buf = &mut chunk[..take * 8];
            self.read_exact(buf, &format!("data of `{name}`"))?;
            for b in buf.chunks_exact(8) {
                data.push(f64::from_le_bytes([
                    b[0], b[1], b[2], b[3], b[4], b[5], b[6], b[7],
                ]));
            }
            remaining -= take;
        }
        Ok(Some((name, Tensor::new(shape, data)?)))
    }
}

/// Loads a checkpoint, rebuilding the model from its stored config and
/// overwriting every parameter from the records.
pub fn load_checkpoint(path: &Path) -> Result<LoadedCheckpoint> {
    let file = File::open(path)
        .map_err(|e| Error::Checkpoint(format!("cannot open {}: {e}", path.display())))?;
    let mut r = RecordReader {
        inner: BufReader::new(file),
        offset: 0,
    };
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic, "magic")?;
    if magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "bad magic {magic:?}; not a checkpoint file"
        )));
    }
    let version = r.read_u32("version")?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version {version}, expected {VERSION}"
        )));
    }
    let header_len = r.read_u32("header length")? as usize;
    let mut header_bytes = vec![0u8; header_len];
    r.read_exact(&mut header_bytes, "header")?;
    let header: Header = serde_json::from_slice(&header_bytes)
        .map_err(|e| Error::Checkpoint(format!("invalid header JSON: {e}")))?;
    if header.format != version {
        return Err(Error::Checkpoint(format!(
            "header format {} disagrees with container version {version}",
            header.format
        )));
    }

    let mut model = build_model(&header.model, 0)?;
    let expected: Vec<String> = model
        .named_params()
        .iter()
        .map(|(n, _)| n.clone())
        .collect();
    let mut filled = vec![false; expected.len()];
    let mut momentum = Vec::new();
    while let Some((name, tensor)) = r.read_record()? {
        if let Some(stripped) = name.strip_prefix(MOMENTUM_PREFIX) {
            if !expected.iter().any(|n| n == stripped) {
                return Err(Error::Checkpoint(format!(
                    "momentum record `{name}` matches no parameter"
                )));
            }
            momentum.push((stripped.to_string(), tensor));
            continue;
        }
        let Some(idx) = expected.iter().position(|n| *n == name) else {
            return Err(Error::Checkpoint(format!(
                "record `{name}` matches no parameter of the stored architecture"
            )));
        };
        if filled[idx] {
            return Err(Error::Checkpoint(format!("duplicate record `{name}`")));
        }
        let mut params = model.params_mut();
        if params[idx].shape() != tensor.shape() {
            return Err(Error::Checkpoint(format!(
                "shape mismatch for `{name}`: file has {:?}, architecture needs {:?}",
                tensor.shape(),
                params[idx].shape()
            )));
        }
        *params[idx] = tensor;
        filled[idx] = true;
    }
    if let Some(missing) = filled.iter().position(|&f| !f) {
        return Err(Error::Checkpoint(format!(
            "missing record for parameter `{}`",
            expected[missing]
        )));
    }
    if momentum.len() != header.momentum_records {
        return Err(Error::Checkpoint(format!(
            "header promises {} momentum records, found {}",
            header.momentum_records,
            momentum.len()
        )));
    }
    Ok(LoadedCheckpoint {
        model,
        meta: header.meta,
        momentum,
    })
}
