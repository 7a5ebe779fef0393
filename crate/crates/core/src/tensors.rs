//! Small tensor helpers shared by the model-side modules.

use candle_core::{DType, Device, Tensor, D};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::Result;

/// Normal(0, std) tensor drawn from `rng` on the host, so values depend only on the seed.
pub fn normal(rng: &mut ChaCha8Rng, shape: &[usize], std: f64, dtype: DType) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let dist = Normal::new(0.0, std).expect("std is positive");
    let vals: Vec<f64> = (0..n).map(|_| dist.sample(rng)).collect();
    Ok(Tensor::from_vec(vals, shape, &Device::Cpu)?.to_dtype(dtype)?)
}

/// Inverted dropout mask with keep-probability `1 - p`, scaled by `1/(1-p)`.
pub fn dropout_mask(rng: &mut ChaCha8Rng, shape: &[usize], p: f64, dtype: DType) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let scale = 1.0 / (1.0 - p);
    let vals: Vec<f64> = (0..n)
        .map(|_| if rng.random::<f64>() < p { 0.0 } else { scale })
        .collect();
    Ok(Tensor::from_vec(vals, shape, &Device::Cpu)?.to_dtype(dtype)?)
}

/// Flattened values as f64, whatever the float dtype.
pub fn to_f64_vec(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?)
}

pub fn to_f64_rows(t: &Tensor) -> Result<Vec<Vec<f64>>> {
    Ok(t.to_dtype(DType::F64)?.to_vec2::<f64>()?)
}

/// Feed a tensor's exact bytes (dtype, shape, values) into a hasher.
pub fn hash_tensor(h: &mut Sha256, t: &Tensor) -> Result<()> {
    h.update(format!("{:?}{:?}", t.dtype(), t.dims()).as_bytes());
    let flat = t.flatten_all()?;
    match t.dtype() {
        DType::F64 => {
            for v in flat.to_vec1::<f64>()? {
                h.update(v.to_le_bytes());
            }
        }
        _ => {
            for v in flat.to_dtype(DType::F32)?.to_vec1::<f32>()? {
                h.update(v.to_le_bytes());
            }
        }
    }
    Ok(())
}

pub fn hash_named<'a>(tensors: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> Result<String> {
    let mut h = Sha256::new();
    for (name, t) in tensors {
        h.update(name.as_bytes());
        hash_tensor(&mut h, t)?;
    }
    Ok(hex::encode(h.finalize()))
}

/// Row-wise softmax over the last dim, shifted by the detached row max.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let m = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&m)?.exp()?;
    let s = e.sum_keepdim(D::Minus1)?;
    Ok(e.broadcast_div(&s)?)
}

pub fn log_softmax_last(x: &Tensor) -> Result<Tensor> {
    let m = x.max_keepdim(D::Minus1)?.detach();
    let shifted = x.broadcast_sub(&m)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

/// Layer norm over the last dim with affine parameters.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    let mean = x.mean_keepdim(D::Minus1)?;
    let centered = x.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
    let normed = centered.broadcast_div(&(var + eps)?.sqrt()?)?;
    Ok(normed.broadcast_mul(gamma)?.broadcast_add(beta)?)
}

/// Column mask of shape (n, 1) with ones at `positions`.
pub fn row_mask(n: usize, positions: &[usize], dtype: DType) -> Result<Tensor> {
    let mut v = vec![0f64; n];
    for &p in positions {
        v[p] = 1.0;
    }
    Ok(Tensor::from_vec(v, (n, 1), &Device::Cpu)?.to_dtype(dtype)?)
}
