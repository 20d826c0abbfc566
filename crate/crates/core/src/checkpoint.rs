//! Binary checkpoint format.
//!
//! ```text
//! "SRCK"                      4 bytes
//! version                     u32 LE (currently 1)
//! descriptor length           u32 LE
//! descriptor                  UTF-8 JSON {"spec": ModelSpec, "seed": u64}
//! per parameter tensor:
//!   rank                      u32 LE
//!   dims                      rank × u32 LE
//!   payload                   prod(dims) × f64 LE
//! ```
//!
//! Tensor count and order follow the spec's parameter layout; trailing bytes
//! are rejected.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelParams, ModelSpec};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"SRCK";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Descriptor {
    spec: ModelSpec,
    seed: u64,
}

pub fn encode(model: &Model) -> Result<Vec<u8>> {
    model.params.check_against(&model.spec)?;
    let descriptor = serde_json::to_vec(&Descriptor {
        spec: model.spec.clone(),
        seed: model.params.seed,
    })?;
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(descriptor.len() as u32).to_le_bytes());
    out.extend_from_slice(&descriptor);
    for t in &model.params.tensors {
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Truncated {
                what: "checkpoint",
                detail: format!(
                    "needed {n} bytes for {what} at offset {}, only {} left",
                    self.pos,
                    self.buf.len() - self.pos
                ),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Model> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::BadMagic {
            what: "checkpoint",
            expected: u32::from_be_bytes(MAGIC),
            found: u32::from_be_bytes(magic.try_into().expect("4 bytes")),
        });
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::UnsupportedVersion {
            what: "checkpoint",
            found: version,
        });
    }
    let desc_len = r.u32("descriptor length")? as usize;
    let desc: Descriptor = serde_json::from_slice(r.take(desc_len, "descriptor")?)?;
    desc.spec.validate()?;

    let expected = desc.spec.param_shapes();
    let mut tensors = Vec::with_capacity(expected.len());
    for shape in &expected {
        let rank = r.u32("tensor rank")? as usize;
        let dims = (0..rank)
            .map(|_| r.u32("tensor dims").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        if &dims != shape {
            return Err(Error::shape("checkpoint tensor", shape, &dims));
        }
        let n: usize = dims.iter().product();
        let payload = r.take(n * 8, "tensor payload")?;
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        tensors.push(Tensor::new(dims, data)?);
    }
    if r.pos != bytes.len() {
        return Err(Error::CountMismatch(format!(
            "{} unexpected trailing bytes after the last tensor",
            bytes.len() - r.pos
        )));
    }
    Model::new(
        desc.spec,
        ModelParams {
            tensors,
            seed: desc.seed,
        },
    )
}

pub fn save_checkpoint(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(model)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

/// Loads a checkpoint and checks that it was written for `spec`.
pub fn load_checkpoint_for(path: impl AsRef<Path>, spec: &ModelSpec) -> Result<Model> {
    let model = load_checkpoint(path)?;
    if &model.spec != spec {
        let got = model.spec.param_shapes().concat();
        let want = spec.param_shapes().concat();
        return Err(Error::shape("checkpoint spec", &want, &got));
    }
    Ok(model)
}
