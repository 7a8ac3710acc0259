//! Checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "NESTORCK"
//! version  u32      1
//! width    u8       4 (f32 values) or 8 (f64 values)
//! hlen     u64      length of the JSON header
//! header   hlen bytes of UTF-8 JSON: spec, vocabularies, step, and the
//!          name and shape of every parameter in storage order
//! values   every parameter's values in header order, little-endian
//! ```

use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

use crate::config::Precision;
use crate::error::{Error, Result};
use crate::model::{Model, ModelSpec};
use crate::vocab::Vocabularies;

pub const MAGIC: &[u8; 8] = b"NESTORCK";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    spec: ModelSpec,
    vocab: Vocabularies,
    step: u64,
    params: Vec<ParamEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

/// Serialize the model. With `Precision::F32` values are stored as `f32`
/// (lossless when the parameters are already `f32`-rounded).
pub fn to_bytes(model: &Model, step: u64, precision: Precision) -> Result<Vec<u8>> {
    let header = Header {
        spec: model.spec.clone(),
        vocab: model.vocab.clone(),
        step,
        params: model
            .store
            .iter()
            .map(|(_, p)| ParamEntry {
                name: p.name.clone(),
                shape: p.tensor.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let width: u8 = match precision {
        Precision::F32 => 4,
        Precision::F64 => 8,
    };
    let mut out = Vec::with_capacity(21 + json.len() + model.store.num_values() * width as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(width);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, p) in model.store.iter() {
        for &v in p.tensor.data() {
            match precision {
                Precision::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
                Precision::F64 => out.extend_from_slice(&v.to_le_bytes()),
            }
        }
    }
    Ok(out)
}

pub fn save(path: impl AsRef<Path>, model: &Model, step: u64, precision: Precision) -> Result<()> {
    let path = path.as_ref();
    let bytes = to_bytes(model, step, precision)?;
    let tmp = path.with_extension("tmp");
    let mut f = std::fs::File::create(&tmp).map_err(|e| Error::file(&tmp, e))?;
    f.write_all(&bytes).map_err(|e| Error::file(&tmp, e))?;
    f.sync_all().map_err(|e| Error::file(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::file(path, e))
}

fn take<'a>(buf: &mut &'a [u8], n: usize, what: &str) -> Result<&'a [u8]> {
    if buf.len() < n {
        return Err(Error::Checkpoint(format!("truncated while reading {what}")));
    }
    let (head, rest) = buf.split_at(n);
    *buf = rest;
    Ok(head)
}

/// Rebuild a model from bytes. Returns the model and its step counter.
pub fn from_bytes(bytes: &[u8]) -> Result<(Model, u64)> {
    let mut buf = bytes;
    if take(&mut buf, 8, "magic")? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let version = u32::from_le_bytes(take(&mut buf, 4, "version")?.try_into().unwrap());
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let width = take(&mut buf, 1, "value width")?[0];
    if width != 4 && width != 8 {
        return Err(Error::Checkpoint(format!("unsupported value width {width}")));
    }
    let hlen = u64::from_le_bytes(take(&mut buf, 8, "header length")?.try_into().unwrap()) as usize;
    let header: Header = serde_json::from_slice(take(&mut buf, hlen, "header")?)
        .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
    let mut model = Model::new(header.spec, header.vocab, 0, None, None)?;
    if model.store.len() != header.params.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} parameters, architecture has {}",
            header.params.len(),
            model.store.len()
        )));
    }
    for entry in &header.params {
        let id = model
            .store
            .id(&entry.name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {:?}", entry.name)))?;
        let t = model.store.tensor_mut(id);
        if t.shape() != entry.shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "parameter {:?}: stored shape {:?}, expected {:?}",
                entry.name,
                entry.shape,
                t.shape()
            )));
        }
        let raw = take(&mut buf, t.len() * width as usize, &entry.name)?;
        for (v, chunk) in t.data_mut().iter_mut().zip(raw.chunks_exact(width as usize)) {
            *v = if width == 4 {
                f32::from_le_bytes(chunk.try_into().unwrap()) as f64
            } else {
                f64::from_le_bytes(chunk.try_into().unwrap())
            };
        }
    }
    if !buf.is_empty() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", buf.len())));
    }
    Ok((model, header.step))
}

pub fn load(path: impl AsRef<Path>) -> Result<(Model, u64)> {
    let path = path.as_ref();
    let mut bytes = vec![];
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::file(path, e))?;
    from_bytes(&bytes)
}
