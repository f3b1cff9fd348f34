//! `MTCK` checkpoint files: magic, `u32` version, `u32` record count, then
//! per parameter `name_len, name, rank, dims…, f32 payload`, all
//! little-endian.

use std::path::Path;

use super::model::SharedBackboneModel;
use crate::codec::{Reader, Writer};
use crate::error::{Error, FormatError, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MTCK";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn encode_checkpoint(model: &SharedBackboneModel) -> Vec<u8> {
    let mut w = Writer::new(CHECKPOINT_MAGIC, CHECKPOINT_VERSION);
    w.u32(model.params().len() as u32);
    for p in model.params() {
        w.str(&p.name);
        w.u32(p.value.rank() as u32);
        for &d in p.value.shape() {
            w.u32(d as u32);
        }
        for &v in p.value.data() {
            w.f32(v as f32);
        }
    }
    w.finish()
}

/// Decodes named tensors in file order.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<Vec<(String, Tensor)>, FormatError> {
    let mut r = Reader::open(bytes, CHECKPOINT_MAGIC, CHECKPOINT_VERSION)?;
    let count = r.u32("record count")?;
    let mut out = Vec::new();
    for i in 0..count {
        let name = r.str(&format!("name of record {i}"))?;
        let rank = r.u32(&format!("rank of `{name}`"))? as usize;
        let dims = (0..rank)
            .map(|_| r.u32(&format!("dims of `{name}`")).map(|d| d as usize))
            .collect::<Result<Vec<_>, _>>()?;
        let numel: usize = dims.iter().product();
        let data = r.f32_vec(numel, &format!("payload of `{name}`"))?;
        let t = Tensor::new(dims, data).map_err(|e| FormatError::Malformed(e.to_string()))?;
        out.push((name, t));
    }
    r.finish()?;
    Ok(out)
}

/// Overwrites `model`'s parameters from checkpoint bytes; names and
/// shapes must match exactly.
pub fn load_checkpoint_bytes(model: &mut SharedBackboneModel, bytes: &[u8]) -> Result<()> {
    let records = decode_checkpoint(bytes)?;
    if records.len() != model.params().len() {
        return Err(Error::invalid(format!(
            "checkpoint has {} parameters, model has {}",
            records.len(),
            model.params().len()
        )));
    }
    for (p, (name, t)) in model.params_mut().iter_mut().zip(records) {
        if p.name != name || p.value.shape() != t.shape() {
            return Err(Error::invalid(format!(
                "checkpoint record `{name}` {:?} does not match parameter `{}` {:?}",
                t.shape(),
                p.name,
                p.value.shape()
            )));
        }
        p.value = t;
        p.grad = None;
    }
    Ok(())
}

pub fn save_checkpoint(model: &SharedBackboneModel, path: &Path) -> Result<()> {
    std::fs::write(path, encode_checkpoint(model)).map_err(FormatError::from)?;
    Ok(())
}

pub fn load_checkpoint(model: &mut SharedBackboneModel, path: &Path) -> Result<()> {
    let bytes = std::fs::read(path).map_err(FormatError::from)?;
    load_checkpoint_bytes(model, &bytes)
}
