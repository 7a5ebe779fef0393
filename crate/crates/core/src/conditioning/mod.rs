//! Temporal–label conditioning: four per-token feature embeddings,
//! concatenated, passed through an MLP and added to token embeddings.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LiftError, Result};
use crate::tensors::normal;
use crate::tokenspace::EncodedExample;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditioningConfig {
    pub d_e: usize,
    pub d_h: usize,
    pub p_max: usize,
    pub r_buckets: usize,
    pub n_labels: usize,
    pub t_max: usize,
    pub d_model: usize,
}

impl ConditioningConfig {
    pub fn new(d_model: usize, n_labels: usize) -> Self {
        Self {
            d_e: 32,
            d_h: 128,
            p_max: 2048,
            r_buckets: 64,
            n_labels,
            t_max: 512,
            d_model,
        }
    }

    /// Log-spaced bucket of a position-to-end distance over `[0, p_max)`.
    pub fn rel_bucket(&self, r: usize) -> u32 {
        let top = self.r_buckets - 1;
        let b = (top as f64 * (1.0 + r as f64).ln() / (self.p_max as f64).ln()).floor() as usize;
        b.min(top) as u32
    }
}

/// Per-token table indices, already clamped to table bounds.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemporalFeatures {
    pub abs: Vec<u32>,
    pub rel: Vec<u32>,
    pub label: Vec<u32>,
    pub time: Vec<u32>,
}

impl TemporalFeatures {
    pub fn len(&self) -> usize {
        self.abs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.abs.is_empty()
    }
}

pub fn temporal_features(enc: &EncodedExample, cfg: &ConditioningConfig) -> TemporalFeatures {
    let l = enc.len();
    let tau = enc.timestep_id.min(cfg.t_max - 1) as u32;
    TemporalFeatures {
        abs: (0..l).map(|t| t.min(cfg.p_max - 1) as u32).collect(),
        rel: (0..l).map(|t| cfg.rel_bucket(l - 1 - t)).collect(),
        label: enc
            .label_stamp
            .iter()
            .map(|&z| z.min(cfg.n_labels as u32 - 1))
            .collect(),
        time: vec![tau; l],
    }
}

pub struct Conditioning {
    cfg: ConditioningConfig,
    vars: BTreeMap<String, Var>,
}

const TABLES: [&str; 4] = ["cond.abs", "cond.rel", "cond.label", "cond.time"];

impl Conditioning {
    pub fn new(cfg: ConditioningConfig, seed: u64, dtype: DType) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dev = Device::Cpu;
        let mut vars = BTreeMap::new();
        let sizes = [cfg.p_max, cfg.r_buckets, cfg.n_labels, cfg.t_max];
        for (name, rows) in TABLES.iter().zip(sizes) {
            vars.insert(
                name.to_string(),
                Var::from_tensor(&normal(&mut rng, &[rows, cfg.d_e], 0.02, dtype)?)?,
            );
        }
        let d_in = 4 * cfg.d_e;
        vars.insert(
            "cond.mlp1.weight".into(),
            Var::from_tensor(&normal(&mut rng, &[cfg.d_h, d_in], 0.02, dtype)?)?,
        );
        vars.insert("cond.mlp1.bias".into(), Var::zeros(cfg.d_h, dtype, &dev)?);
        vars.insert(
            "cond.mlp2.weight".into(),
            Var::from_tensor(&normal(&mut rng, &[cfg.d_model, cfg.d_h], 0.02, dtype)?)?,
        );
        vars.insert(
            "cond.mlp2.bias".into(),
            Var::zeros(cfg.d_model, dtype, &dev)?,
        );
        vars.insert(
            "cond.w".into(),
            Var::zeros((cfg.d_model, cfg.d_model), dtype, &dev)?,
        );
        Ok(Self { cfg, vars })
    }

    pub fn config(&self) -> &ConditioningConfig {
        &self.cfg
    }

    pub fn vars(&self) -> &BTreeMap<String, Var> {
        &self.vars
    }

    pub fn var(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    /// Overwrite parameters from a name → tensor map; unknown names are ignored.
    pub fn load_tensors(&self, map: &std::collections::HashMap<String, Tensor>) -> Result<()> {
        for (name, var) in &self.vars {
            if let Some(t) = map.get(name) {
                var.set(&t.to_dtype(var.dtype())?)?;
            }
        }
        Ok(())
    }

    /// The conditioning vector `u_t` before the output map, (L, d_model).
    fn features_mlp(&self, f: &TemporalFeatures) -> Result<Tensor> {
        let dev = Device::Cpu;
        let cols = [&f.abs, &f.rel, &f.label, &f.time];
        let mut parts = Vec::with_capacity(4);
        for (name, idx) in TABLES.iter().zip(cols) {
            let ids = Tensor::from_vec(idx.clone(), idx.len(), &dev)?;
            parts.push(self.vars[*name].as_tensor().index_select(&ids, 0)?);
        }
        let cat = Tensor::cat(&parts, 1)?;
        let h = cat
            .matmul(&self.vars["cond.mlp1.weight"].as_tensor().t()?)?
            .broadcast_add(self.vars["cond.mlp1.bias"].as_tensor())?
            .gelu()?;
        Ok(h.matmul(&self.vars["cond.mlp2.weight"].as_tensor().t()?)?
            .broadcast_add(self.vars["cond.mlp2.bias"].as_tensor())?)
    }

    /// `x'_t = x_t + W·u_t`.
    pub fn inject(&self, x: &Tensor, f: &TemporalFeatures) -> Result<Tensor> {
        let dims = x.dims();
        if dims.len() != 2 || dims[1] != self.cfg.d_model || dims[0] != f.len() {
            return Err(LiftError::DimMismatch(format!(
                "embeddings {:?}, expected [{}, {}]",
                dims,
                f.len(),
                self.cfg.d_model
            )));
        }
        let u = self.features_mlp(f)?;
        Ok((x + u.matmul(&self.vars["cond.w"].as_tensor().t()?)?)?)
    }
}

#[cfg(test)]
mod tests;
