//! `TFCKPT01` tensor container used for model and optimizer checkpoints.
//!
//! Layout (little-endian): magic, `u32` tensor count, then per tensor a `u32`
//! name length, the UTF-8 name, `u32` rank, `u32` dims and `f32` data in
//! row-major order.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::Models;
use crate::nn::{Adam, Scalar};

pub const MAGIC: &[u8; 8] = b"TFCKPT01";

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new<S: Scalar>(name: &str, dims: &[usize], data: &[S]) -> Self {
        Self {
            name: name.to_string(),
            dims: dims.to_vec(),
            data: data.iter().map(|v| v.as_f64() as f32).collect(),
        }
    }
}

pub fn to_bytes(tensors: &[Tensor]) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in tensors {
        buf.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
        buf.extend_from_slice(t.name.as_bytes());
        buf.extend_from_slice(&(t.dims.len() as u32).to_le_bytes());
        for &d in &t.dims {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in &t.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf
}

fn parse(buf: &[u8]) -> std::result::Result<Vec<Tensor>, String> {
    let mut pos = 0usize;
    let mut take = |n: usize| -> std::result::Result<&[u8], String> {
        if buf.len() - pos < n {
            return Err(format!("truncated at byte {pos}"));
        }
        pos += n;
        Ok(&buf[pos - n..pos])
    };
    if take(8)? != MAGIC {
        return Err("bad magic".into());
    }
    let u32_at = |b: &[u8]| u32::from_le_bytes(b.try_into().unwrap()) as usize;
    let count = u32_at(take(4)?);
    let mut out = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let len = u32_at(take(4)?);
        let name = std::str::from_utf8(take(len)?).map_err(|_| "tensor name is not UTF-8")?.to_string();
        let rank = u32_at(take(4)?);
        let mut dims = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            dims.push(u32_at(take(4)?));
        }
        let numel = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or("size overflow")?;
        let bytes = take(numel.checked_mul(4).ok_or("size overflow")?)?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push(Tensor { name, dims, data });
    }
    if pos != buf.len() {
        return Err(format!("{} trailing bytes", buf.len() - pos));
    }
    Ok(out)
}

pub fn save_tensors(path: &Path, tensors: &[Tensor]) -> Result<()> {
    fs::write(path, to_bytes(tensors))?;
    Ok(())
}

pub fn load_tensors(path: &Path) -> Result<Vec<Tensor>> {
    parse(&fs::read(path)?).map_err(|reason| Error::Format {
        path: path.to_path_buf(),
        reason,
    })
}

/// Every parameter of both models, by name.
pub fn model_tensors<S: Scalar>(models: &Models<S>) -> Vec<Tensor> {
    let mut out = Vec::new();
    for m in models.modules() {
        m.params(&mut |name, p| out.push(Tensor::new(name, &p.shape, &p.value)));
    }
    out
}

pub fn save_models<S: Scalar>(models: &Models<S>, path: &Path) -> Result<()> {
    save_tensors(path, &model_tensors(models))
}

/// Overwrite the parameters of `models` from a checkpoint.
///
/// The checkpoint must contain exactly the model's parameters with matching
/// shapes; on any mismatch nothing is modified.
pub fn load_models<S: Scalar>(models: &mut Models<S>, path: &Path) -> Result<()> {
    let tensors = load_tensors(path)?;
    let fail = |reason: String| Error::Format {
        path: path.to_path_buf(),
        reason,
    };
    let mut by_name: BTreeMap<&str, &Tensor> = BTreeMap::new();
    for t in &tensors {
        if by_name.insert(&t.name, t).is_some() {
            return Err(fail(format!("duplicate tensor {}", t.name)));
        }
    }
    let mut problems = Vec::new();
    let mut seen = 0;
    for m in models.modules() {
        m.params(&mut |name, p| match by_name.get(name) {
            Some(t) if t.dims == p.shape => seen += 1,
            Some(t) => problems.push(format!("{name}: checkpoint {:?} vs model {:?}", t.dims, p.shape)),
            None => problems.push(format!("{name}: missing")),
        });
    }
    if seen != by_name.len() && problems.is_empty() {
        problems.push(format!("{} tensors do not belong to the model", by_name.len() - seen));
    }
    if !problems.is_empty() {
        return Err(fail(problems.join("; ")));
    }
    for m in models.modules_mut() {
        m.params_mut(&mut |name, p| {
            p.value = by_name[name].data.iter().map(|&v| S::lit(v as f64)).collect();
        });
    }
    Ok(())
}

/// Adam moments as `m:<param>` / `v:<param>` tensors plus an `adam.step` scalar.
pub fn optimizer_tensors<S: Scalar>(opt: &Adam<S>) -> Vec<Tensor> {
    let mut out = vec![Tensor {
        name: "adam.step".into(),
        dims: vec![1],
        data: vec![opt.step as f32],
    }];
    for (name, (m, v)) in &opt.state {
        out.push(Tensor::new(&format!("m:{name}"), &[m.len()], m));
        out.push(Tensor::new(&format!("v:{name}"), &[v.len()], v));
    }
    out
}

pub fn restore_optimizer<S: Scalar>(opt: &mut Adam<S>, tensors: &[Tensor]) -> Result<()> {
    let conv = |d: &[f32]| d.iter().map(|&x| S::lit(x as f64)).collect::<Vec<S>>();
    let mut state: BTreeMap<String, (Vec<S>, Vec<S>)> = BTreeMap::new();
    let mut step = None;
    for t in tensors {
        if t.name == "adam.step" {
            step = t.data.first().map(|&s| s as u64);
        } else if let Some(n) = t.name.strip_prefix("m:") {
            state.entry(n.to_string()).or_default().0 = conv(&t.data);
        } else if let Some(n) = t.name.strip_prefix("v:") {
            state.entry(n.to_string()).or_default().1 = conv(&t.data);
        } else {
            return Err(Error::invalid(format!("unexpected optimizer tensor {}", t.name)));
        }
    }
    if state.values().any(|(m, v)| m.len() != v.len()) {
        return Err(Error::invalid("optimizer moments have mismatched sizes"));
    }
    opt.step = step.ok_or_else(|| Error::invalid("optimizer state lacks adam.step"))?;
    opt.state = state;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bytes_round_trip_and_reject_corruption() {
        let ts = vec![
            Tensor::new::<f32>("a.weight", &[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, -6.5]),
            Tensor::new::<f32>("b", &[1], &[f32::MIN_POSITIVE]),
        ];
        let bytes = to_bytes(&ts);
        assert_eq!(&bytes[..8], MAGIC);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 2);
        assert_eq!(parse(&bytes).unwrap(), ts);
        let mut bad = bytes.clone();
        bad[3] ^= 1;
        assert!(parse(&bad).is_err());
        assert!(parse(&bytes[..bytes.len() - 2]).is_err());
    }
}
