//! Binary checkpoint format (little-endian):
//!
//! ```text
//! magic "TTAC" | version u32 = 1 | entry_count u32
//! per entry: name_len u16 | name (UTF-8) | ndim u8 | dims u32 × ndim | f32 × numel
//! ```
//!
//! Entries are the model parameters in model order, then batch-norm running
//! statistics (batch-norm models only), then a `meta.norm` entry holding
//! `[kind, groups]` with kind 0 = batch, 1 = group, 2 = layer.

use super::model::{Model, ModelConfig, Param};
use super::norm::{NormKind, RunningStats};
use crate::autograd::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"TTAC";
pub const VERSION: u32 = 1;
const META_NORM: &str = "meta.norm";

pub fn save_checkpoint(model: &Model) -> Vec<u8> {
    let mut entries: Vec<(String, Vec<usize>, Vec<f64>)> = model
        .params()
        .iter()
        .map(|p| (p.name.clone(), p.value.shape().to_vec(), p.value.data().to_vec()))
        .collect();
    if model.norm_kind() == NormKind::Batch {
        for (i, rs) in model.running_stats().iter().enumerate() {
            entries.push((format!("block{i}.norm.running_mean"), vec![rs.mean.len()], rs.mean.clone()));
            entries.push((format!("block{i}.norm.running_var"), vec![rs.var.len()], rs.var.clone()));
        }
    }
    let (code, groups) = match model.norm_kind() {
        NormKind::Batch => (0.0, 0.0),
        NormKind::Group(g) => (1.0, g as f64),
        NormKind::Layer => (2.0, 0.0),
    };
    entries.push((META_NORM.into(), vec![2], vec![code, groups]));

    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, dims, data) in &entries {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(dims.len() as u8);
        for &d in dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in data {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Parse {
                offset: self.pos,
                detail: format!("truncated while reading {what}"),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn f32(&mut self, what: &str) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn fail<T>(&self, offset: usize, detail: impl Into<String>) -> Result<T> {
        Err(Error::Parse {
            offset,
            detail: detail.into(),
        })
    }
}

pub fn load_checkpoint(bytes: &[u8]) -> Result<Model> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return r.fail(0, "bad magic");
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return r.fail(4, format!("unsupported version {version}"));
    }
    let count = r.u32("entry count")? as usize;

    let mut entries: Vec<(String, Tensor)> = Vec::with_capacity(count);
    for _ in 0..count {
        let start = r.pos;
        let name_len = r.u16("name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|_| Error::Parse {
                offset: start + 2,
                detail: "name is not UTF-8".into(),
            })?
            .to_string();
        let ndim = r.u8("ndim")? as usize;
        let dims = (0..ndim)
            .map(|_| r.u32("dim").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel: usize = dims.iter().product();
        if numel > (bytes.len() - r.pos.min(bytes.len())) / 4 {
            return r.fail(r.pos, format!("payload of {name} exceeds remaining bytes"));
        }
        let data = (0..numel)
            .map(|_| r.f32("payload").map(f64::from))
            .collect::<Result<Vec<_>>>()?;
        entries.push((name, Tensor::new(dims, data)?));
    }
    if r.pos != bytes.len() {
        return r.fail(r.pos, "trailing bytes after last entry");
    }

    let take = |name: &str| -> Result<Tensor> {
        entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t.clone())
            .ok_or_else(|| Error::Parse {
                offset: bytes.len(),
                detail: format!("missing entry {name}"),
            })
    };

    let meta = take(META_NORM)?;
    let norm = match (meta.data().first().copied(), meta.data().get(1).copied()) {
        (Some(c), _) if c == 0.0 => NormKind::Batch,
        (Some(c), Some(g)) if c == 1.0 => NormKind::Group(g as usize),
        (Some(c), _) if c == 2.0 => NormKind::Layer,
        _ => return r.fail(bytes.len(), "invalid meta.norm entry"),
    };

    let mut params = Vec::new();
    let mut running = Vec::new();
    let mut widths = Vec::new();
    let mut input_dim = 0;
    let mut i = 0;
    while let Ok(weight) = take(&format!("block{i}.linear.weight")) {
        if weight.ndim() != 2 {
            return r.fail(bytes.len(), format!("block{i} weight is not 2-D"));
        }
        if i == 0 {
            input_dim = weight.shape()[0];
        }
        let width = weight.shape()[1];
        widths.push(width);
        for (suffix, value) in [
            ("linear.weight", weight),
            ("linear.bias", take(&format!("block{i}.linear.bias"))?),
            ("norm.weight", take(&format!("block{i}.norm.weight"))?),
            ("norm.bias", take(&format!("block{i}.norm.bias"))?),
        ] {
            params.push(Param {
                name: format!("block{i}.{suffix}"),
                value,
            });
        }
        running.push(if norm == NormKind::Batch {
            RunningStats {
                mean: take(&format!("block{i}.norm.running_mean"))?.into_data(),
                var: take(&format!("block{i}.norm.running_var"))?.into_data(),
            }
        } else {
            RunningStats::new(width)
        });
        i += 1;
    }
    let head_weight = take("head.weight")?;
    let head_bias = take("head.bias")?;
    if widths.is_empty() || head_weight.ndim() != 2 {
        return r.fail(bytes.len(), "checkpoint holds no complete architecture");
    }
    let classes = head_weight.shape()[1];
    params.push(Param {
        name: "head.weight".into(),
        value: head_weight,
    });
    params.push(Param {
        name: "head.bias".into(),
        value: head_bias,
    });
    let feature_dim = widths.pop().expect("non-empty");
    let config = ModelConfig {
        input_dim,
        hidden: widths,
        feature_dim,
        classes,
        norm,
    };
    let model = Model::from_parts(config, params, running)?;
    check_shapes(&model)?;
    Ok(model)
}

fn check_shapes(model: &Model) -> Result<()> {
    let fresh = Model::new(model.config().clone(), 0)?;
    for (a, b) in model.params().iter().zip(fresh.params()) {
        if a.value.shape() != b.value.shape() {
            return Err(Error::Parse {
                offset: 0,
                detail: format!("entry {} has shape {:?}, expected {:?}", a.name, a.value.shape(), b.value.shape()),
            });
        }
    }
    Ok(())
}
