//! `.trck` checkpoints: a JSON header followed by named f64 tensors.
//!
//! Layout (little-endian): `"TRCK"`, u16 version, u32 header length, UTF-8
//! JSON header, u32 tensor count, then per tensor: u16 name length, name,
//! u8 rank, `rank` × u32 extents, f64 payload.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::bytes::{put_f64s, put_u16, put_u32, read_file, u32_of, write_file, ByteReader};
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::scalar::Scalar;
use crate::vit::{AdapterConfig, ModelState, ViTConfig};

pub const TRCK_MAGIC: &[u8; 4] = b"TRCK";
pub const TRCK_VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: serde_json::Value,
    pub tensors: Vec<(String, Tensor<f64>)>,
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(TRCK_MAGIC);
    put_u16(&mut out, TRCK_VERSION);
    let header = serde_json::to_vec(&ck.header)?;
    put_u32(&mut out, u32_of(header.len(), "header length")?);
    out.extend_from_slice(&header);
    put_u32(&mut out, u32_of(ck.tensors.len(), "tensor count")?);
    for (name, t) in &ck.tensors {
        let n = name.as_bytes();
        let len = u16::try_from(n.len())
            .map_err(|_| Error::invalid(format!("tensor name `{name}` too long")))?;
        put_u16(&mut out, len);
        out.extend_from_slice(n);
        let rank = u8::try_from(t.shape().len())
            .map_err(|_| Error::invalid(format!("`{name}` rank too large")))?;
        out.push(rank);
        for &e in t.shape() {
            put_u32(&mut out, u32_of(e, "extent")?);
        }
        put_f64s(&mut out, t.data().iter().copied());
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = ByteReader::new(bytes);
    r.header(TRCK_MAGIC, TRCK_VERSION, "checkpoint")?;
    let hl = r.u32("header length")? as usize;
    let at = r.offset();
    let header = serde_json::from_slice(r.take(hl, "header")?).map_err(|e| Error::Format {
        offset: at,
        detail: format!("header JSON: {e}"),
    })?;
    let count = r.u32("tensor count")? as usize;
    let mut tensors = Vec::with_capacity(count.min(4096));
    for k in 0..count {
        let nl = r.u16("name length")? as usize;
        let at = r.offset();
        let name = std::str::from_utf8(r.take(nl, "name")?)
            .map_err(|_| Error::Format {
                offset: at,
                detail: format!("tensor {k} name is not UTF-8"),
            })?
            .to_string();
        let rank = r.u8("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("extent")? as usize);
        }
        let n: usize = shape.iter().product();
        let data = r.f64s(n, &format!("payload of `{name}`"))?;
        tensors.push((name, Tensor::new(shape, data)?));
    }
    if !r.is_done() {
        return Err(r.fail(format!(
            "{} trailing bytes after the last tensor",
            r.remaining()
        )));
    }
    Ok(Checkpoint { header, tensors })
}

pub fn write_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    write_file(path, &encode_checkpoint(ck)?)
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&read_file(path)?)
}

#[derive(Serialize, Deserialize)]
struct ModelHeader {
    vit: ViTConfig,
    adapter: Option<AdapterConfig>,
    #[serde(default)]
    extra: serde_json::Value,
}

fn to_f64<T: Scalar>(t: &Tensor<T>) -> Tensor<f64> {
    Tensor::new(
        t.shape().to_vec(),
        t.data().iter().map(|v| v.as_f64()).collect(),
    )
    .expect("same shape")
}

/// Model weights plus caller-defined metadata and extra tensors (e.g.
/// optimizer moments).
pub fn model_checkpoint<T: Scalar>(
    model: &ModelState<T>,
    extra: serde_json::Value,
    extra_tensors: Vec<(String, Tensor<f64>)>,
) -> Result<Checkpoint> {
    let header = serde_json::to_value(ModelHeader {
        vit: model.config.clone(),
        adapter: model.adapters.as_ref().map(|a| a.config.clone()),
        extra,
    })?;
    let mut tensors: Vec<(String, Tensor<f64>)> = model
        .named_tensors()
        .iter()
        .map(|(n, t)| (n.clone(), to_f64(t)))
        .collect();
    tensors.extend(extra_tensors);
    Ok(Checkpoint { header, tensors })
}

/// Splits a checkpoint into the model and the leftover metadata/tensors
/// (those whose names do not belong to the model).
pub fn model_from_checkpoint(
    ck: Checkpoint,
) -> Result<(
    ModelState<f64>,
    serde_json::Value,
    Vec<(String, Tensor<f64>)>,
)> {
    let h: ModelHeader = serde_json::from_value(ck.header)?;
    let is_model = |n: &str| {
        n.starts_with("patch.")
            || n == "pos_bias"
            || n.starts_with("blocks.")
            || n.starts_with("norm.")
            || n.starts_with("adapters.")
    };
    let (model_t, rest): (Vec<_>, Vec<_>) = ck.tensors.into_iter().partition(|(n, _)| is_model(n));
    let model = ModelState::from_named(h.vit, h.adapter, model_t)?;
    Ok((model, h.extra, rest))
}

pub fn save_model<T: Scalar>(path: &Path, model: &ModelState<T>) -> Result<()> {
    write_checkpoint(
        path,
        &model_checkpoint(model, serde_json::Value::Null, Vec::new())?,
    )
}

pub fn load_model(path: &Path) -> Result<ModelState<f64>> {
    Ok(model_from_checkpoint(read_checkpoint(path)?)?.0)
}
