//! Binary checkpoints.
//!
//! ```text
//! magic  b"SWRMCKPT"
//! u32    format version (1)
//! u32    precision in bits (32 or 64)
//! u64    config hash
//! u32    length, then JSON {spec, epoch, adam_t, adam_skipped}
//! u64    learning rate as f64 bits
//! u32    tensor count, then per tensor:
//!          u32 name length, name (UTF-8)
//!          u32 rank, u64 × rank dims
//!          elements, little-endian at the stored precision
//! u32    CRC32 of everything above
//! ```
//!
//! Tensors are named `param/<name>`, `adam_m/<name>` and `adam_v/<name>`
//! and appear in the model's canonical parameter order.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::array::Array;
use crate::error::{Error, Result};
use crate::model::{Model, ModelParams, ModelSpec};
use crate::params::Tensors;
use crate::scalar::Scalar;
use crate::taskgen::Cursor;
use crate::trainer::AdamState;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SWRMCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<F> {
    pub spec: ModelSpec,
    pub params: ModelParams<Array<F>>,
    pub adam: AdamState<F>,
    pub lr: f64,
    pub epoch: u64,
    pub config_hash: u64,
}

impl<F: Scalar> Checkpoint<F> {
    pub fn model(&self) -> Model<F> {
        Model {
            spec: self.spec.clone(),
            params: self.params.clone(),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct Meta {
    spec: ModelSpec,
    epoch: u64,
    adam_t: u64,
    adam_skipped: u64,
}

fn put_tensor<F: Scalar>(out: &mut Vec<u8>, name: &str, a: &Array<F>) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(a.rank() as u32).to_le_bytes());
    for &d in a.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in a.data() {
        v.write_le(out);
    }
}

pub fn encode_checkpoint<F: Scalar>(ck: &Checkpoint<F>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&F::BITS.to_le_bytes());
    out.extend_from_slice(&ck.config_hash.to_le_bytes());
    let meta = serde_json::to_vec(&Meta {
        spec: ck.spec.clone(),
        epoch: ck.epoch,
        adam_t: ck.adam.t,
        adam_skipped: ck.adam.skipped,
    })
    .map_err(|e| Error::Format(e.to_string()))?;
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(&meta);
    out.extend_from_slice(&ck.lr.to_bits().to_le_bytes());
    let names = ck.params.names();
    if ck.adam.m.len() != names.len() || ck.adam.v.len() != names.len() {
        return Err(Error::Contract(
            "optimizer moments do not match the parameters".into(),
        ));
    }
    out.extend_from_slice(&(3 * names.len() as u32).to_le_bytes());
    for (name, a) in names.iter().zip(ck.params.tensors()) {
        put_tensor(&mut out, &format!("param/{name}"), a);
    }
    for (name, a) in names.iter().zip(&ck.adam.m) {
        put_tensor(&mut out, &format!("adam_m/{name}"), a);
    }
    for (name, a) in names.iter().zip(&ck.adam.v) {
        put_tensor(&mut out, &format!("adam_v/{name}"), a);
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

fn read_header(bytes: &[u8]) -> Result<(Cursor<'_>, u32)> {
    if bytes.len() < 4 {
        return Err(Error::Truncated {
            what: "checkpoint".into(),
        });
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 4);
    let mut cur = Cursor::new(body);
    if cur.take(8, "magic").ok() != Some(CHECKPOINT_MAGIC.as_slice()) {
        return Err(Error::BadMagic {
            expected: "checkpoint",
        });
    }
    let version = cur.u32("header")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    if crc32fast::hash(body) != u32::from_le_bytes(trailer.try_into().expect("4 bytes")) {
        return Err(Error::Checksum {
            what: "checkpoint".into(),
        });
    }
    let bits = cur.u32("header")?;
    Ok((cur, bits))
}

/// Stored precision (32 or 64) of an encoded checkpoint.
pub fn checkpoint_precision(bytes: &[u8]) -> Result<u32> {
    Ok(read_header(bytes)?.1)
}

pub fn decode_checkpoint<F: Scalar>(bytes: &[u8]) -> Result<Checkpoint<F>> {
    let (mut cur, bits) = read_header(bytes)?;
    if bits != F::BITS {
        return Err(Error::Incompatible(format!(
            "checkpoint stores {bits}-bit values, {}-bit requested",
            F::BITS
        )));
    }
    let config_hash = cur.u64("header")?;
    let len = cur.u32("meta")? as usize;
    let meta: Meta = serde_json::from_slice(cur.take(len, "meta")?)
        .map_err(|e| Error::Format(format!("checkpoint meta: {e}")))?;
    meta.spec.validate()?;
    let lr = f64::from_bits(cur.u64("learning rate")?);
    let count = cur.u32("tensor table")? as usize;
    let width = (F::BITS / 8) as usize;
    let mut tensors = HashMap::with_capacity(count);
    for _ in 0..count {
        let n = cur.u32("tensor name")? as usize;
        let name = std::str::from_utf8(cur.take(n, "tensor name")?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = cur.u32(&name)? as usize;
        let shape = (0..rank)
            .map(|_| cur.u64(&name).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let len = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .filter(|&l| l.saturating_mul(width) <= cur.remaining())
            .ok_or_else(|| Error::Truncated { what: name.clone() })?;
        let raw = cur.take(len * width, &name)?;
        let data = raw.chunks_exact(width).map(F::read_le).collect();
        tensors.insert(name, Array::new(&shape, data)?);
    }
    if cur.remaining() != 0 {
        return Err(Error::Format("trailing bytes in checkpoint".into()));
    }

    // Lay the stored tensors onto a freshly shaped parameter structure.
    let template = Model::<F>::init(&meta.spec, &mut crate::taskgen::task_rng(0, 0))?;
    let mut take = |prefix: &str, name: &str, like: &Array<F>| -> Result<Array<F>> {
        let key = format!("{prefix}/{name}");
        let a = tensors
            .remove(&key)
            .ok_or_else(|| Error::Incompatible(format!("checkpoint lacks tensor {key}")))?;
        if a.shape() != like.shape() {
            return Err(Error::Incompatible(format!(
                "tensor {key} has shape {:?}, model expects {:?}",
                a.shape(),
                like.shape()
            )));
        }
        Ok(a)
    };
    let names = template.params.names();
    let likes: Vec<Array<F>> = template.params.tensors().into_iter().cloned().collect();
    let mut params = template.params.clone();
    let mut loaded = Vec::with_capacity(names.len());
    for (n, like) in names.iter().zip(&likes) {
        loaded.push(take("param", n, like)?);
    }
    let mut it = loaded.into_iter();
    params.visit_mut(&mut |slot| *slot = it.next().expect("one tensor per slot"));
    let m = names
        .iter()
        .zip(&likes)
        .map(|(n, l)| take("adam_m", n, l))
        .collect::<Result<Vec<_>>>()?;
    let v = names
        .iter()
        .zip(&likes)
        .map(|(n, l)| take("adam_v", n, l))
        .collect::<Result<Vec<_>>>()?;
    if let Some(extra) = tensors.keys().next() {
        return Err(Error::Incompatible(format!(
            "unexpected tensor {extra} in checkpoint"
        )));
    }
    Ok(Checkpoint {
        spec: meta.spec,
        params,
        adam: AdamState {
            m,
            v,
            t: meta.adam_t,
            skipped: meta.adam_skipped,
        },
        lr,
        epoch: meta.epoch,
        config_hash,
    })
}

pub fn save_checkpoint<F: Scalar>(path: &Path, ck: &Checkpoint<F>) -> Result<()> {
    let bytes = encode_checkpoint(ck)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<F: Scalar>(path: &Path) -> Result<Checkpoint<F>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
