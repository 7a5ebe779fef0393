//! Low-rank adapters on named projections, with staged rank growth.

use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap};

use candle_core::{DType, Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LiftError, Result};
use crate::tensors::{dropout_mask, normal};
use crate::toylm::{LanguageModel, ProjectionHook};

pub const DEFAULT_TARGETS: [&str; 6] = [
    "attn.q_proj",
    "attn.k_proj",
    "attn.v_proj",
    "attn.o_proj",
    "mlp.up_proj",
    "mlp.down_proj",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterConfig {
    pub rank: usize,
    /// Defaults to `2 * rank` when absent.
    pub alpha: Option<f64>,
    pub dropout: f64,
    /// Projection-name suffixes to adapt.
    pub targets: Vec<String>,
    pub frozen_rank_prefix: usize,
}

impl AdapterConfig {
    pub fn new(rank: usize) -> Self {
        Self {
            rank,
            alpha: None,
            dropout: 0.05,
            targets: DEFAULT_TARGETS.iter().map(|s| s.to_string()).collect(),
            frozen_rank_prefix: 0,
        }
    }

    pub fn alpha(&self) -> f64 {
        self.alpha.unwrap_or(2.0 * self.rank as f64)
    }

    pub fn scaling(&self) -> f64 {
        self.alpha() / self.rank as f64
    }
}

pub struct LoraPair {
    /// (r, d_in), small random init.
    pub a: Var,
    /// (d_out, r), zero init.
    pub b: Var,
}

pub struct AdapterSet {
    cfg: AdapterConfig,
    pairs: BTreeMap<String, LoraPair>,
}

const A_STD: f64 = 0.02;

/// Attach zero-effect adapters to every matching projection of `model`.
pub fn attach(model: &impl LanguageModel, cfg: AdapterConfig, seed: u64) -> Result<AdapterSet> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dtype = model.dtype();
    let mut pairs = BTreeMap::new();
    for p in model.projections() {
        if !cfg.targets.iter().any(|t| p.name.ends_with(t.as_str())) {
            continue;
        }
        let a = Var::from_tensor(&normal(&mut rng, &[cfg.rank, p.d_in], A_STD, dtype)?)?;
        let b = Var::zeros((p.d_out, cfg.rank), dtype, &Device::Cpu)?;
        pairs.insert(p.name.clone(), LoraPair { a, b });
    }
    if pairs.is_empty() {
        return Err(LiftError::NoTargetsFound);
    }
    Ok(AdapterSet { cfg, pairs })
}

impl AdapterSet {
    pub fn config(&self) -> &AdapterConfig {
        &self.cfg
    }

    pub fn rank(&self) -> usize {
        self.cfg.rank
    }

    pub fn frozen_rank_prefix(&self) -> usize {
        self.cfg.frozen_rank_prefix
    }

    pub fn pairs(&self) -> &BTreeMap<String, LoraPair> {
        &self.pairs
    }

    /// `(name.lora_a | name.lora_b, var)` for every adapter tensor.
    pub fn named_vars(&self) -> Vec<(String, &Var)> {
        self.pairs
            .iter()
            .flat_map(|(n, p)| [(format!("{n}.lora_a"), &p.a), (format!("{n}.lora_b"), &p.b)])
            .collect()
    }

    pub fn trainable_params(&self) -> usize {
        self.pairs
            .values()
            .map(|p| p.a.as_tensor().elem_count() + p.b.as_tensor().elem_count())
            .sum()
    }

    /// Gradient mask zeroing the frozen rank slice of a tensor, or `None` if nothing is frozen.
    pub fn grad_mask(&self, var_name: &str) -> Result<Option<Tensor>> {
        let k = self.cfg.frozen_rank_prefix;
        if k == 0 {
            return Ok(None);
        }
        let r = self.cfg.rank;
        let (target, is_a) = match (
            var_name.strip_suffix(".lora_a"),
            var_name.strip_suffix(".lora_b"),
        ) {
            (Some(t), _) => (t, true),
            (_, Some(t)) => (t, false),
            _ => return Ok(None),
        };
        let Some(pair) = self.pairs.get(target) else {
            return Ok(None);
        };
        let dtype = pair.a.dtype();
        let rank_keep: Vec<f64> = (0..r).map(|i| if i < k { 0.0 } else { 1.0 }).collect();
        let keep = Tensor::from_vec(rank_keep, r, &Device::Cpu)?.to_dtype(dtype)?;
        let mask = if is_a {
            let d_in = pair.a.dims()[1];
            keep.reshape((r, 1))?
                .broadcast_as((r, d_in))?
                .contiguous()?
        } else {
            let d_out = pair.b.dims()[0];
            keep.reshape((1, r))?
                .broadcast_as((d_out, r))?
                .contiguous()?
        };
        Ok(Some(mask))
    }

    /// Enlarge every adapter to `r_new`, copying old slices and freezing them.
    ///
    /// New A rows are drawn with std 0.02 and new B columns are zero, so the
    /// adapted function is unchanged. Alpha is rescaled with the rank so the
    /// `alpha / r` scaling stays constant.
    pub fn grow_rank(&self, r_new: usize, seed: u64) -> Result<AdapterSet> {
        let r_old = self.cfg.rank;
        if r_new <= r_old {
            return Err(LiftError::RankShrink {
                from: r_old,
                to: r_new,
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pairs = BTreeMap::new();
        for (name, p) in &self.pairs {
            let dtype = p.a.dtype();
            let (d_in, d_out) = (p.a.dims()[1], p.b.dims()[0]);
            let extra_a = normal(&mut rng, &[r_new - r_old, d_in], A_STD, dtype)?;
            let a = Tensor::cat(&[p.a.as_tensor().detach(), extra_a], 0)?;
            let extra_b = Tensor::zeros((d_out, r_new - r_old), dtype, &Device::Cpu)?;
            let b = Tensor::cat(&[p.b.as_tensor().detach(), extra_b], 1)?;
            pairs.insert(
                name.clone(),
                LoraPair {
                    a: Var::from_tensor(&a)?,
                    b: Var::from_tensor(&b)?,
                },
            );
        }
        let cfg = AdapterConfig {
            rank: r_new,
            alpha: self.cfg.alpha.map(|a| a * r_new as f64 / r_old as f64),
            frozen_rank_prefix: r_old,
            ..self.cfg.clone()
        };
        Ok(AdapterSet { cfg, pairs })
    }

    /// Rebuild from saved tensors; rank is read from the tensors.
    pub fn from_tensors(cfg: AdapterConfig, map: &HashMap<String, Tensor>) -> Result<AdapterSet> {
        let mut pairs = BTreeMap::new();
        for (key, a) in map {
            let Some(name) = key.strip_suffix(".lora_a") else {
                continue;
            };
            let b = map
                .get(&format!("{name}.lora_b"))
                .ok_or_else(|| LiftError::MissingField(format!("{name}.lora_b")))?;
            if a.dims()[0] != cfg.rank || b.dims()[1] != cfg.rank {
                return Err(LiftError::DimMismatch(format!(
                    "{name}: adapter rank {} does not match config rank {}",
                    a.dims()[0],
                    cfg.rank
                )));
            }
            pairs.insert(
                name.to_string(),
                LoraPair {
                    a: Var::from_tensor(a)?,
                    b: Var::from_tensor(b)?,
                },
            );
        }
        if pairs.is_empty() {
            return Err(LiftError::NoTargetsFound);
        }
        Ok(AdapterSet { cfg, pairs })
    }

    pub fn to_dtype(&self, dtype: DType) -> Result<AdapterSet> {
        let mut pairs = BTreeMap::new();
        for (n, p) in &self.pairs {
            pairs.insert(
                n.clone(),
                LoraPair {
                    a: Var::from_tensor(&p.a.as_tensor().to_dtype(dtype)?)?,
                    b: Var::from_tensor(&p.b.as_tensor().to_dtype(dtype)?)?,
                },
            );
        }
        Ok(AdapterSet {
            cfg: self.cfg.clone(),
            pairs,
        })
    }

    /// Forward hook; pass an RNG to enable training-time dropout.
    pub fn hook(&self, dropout_rng: Option<ChaCha8Rng>) -> AdapterHook<'_> {
        AdapterHook {
            set: self,
            rng: dropout_rng.map(RefCell::new),
        }
    }
}

pub struct AdapterHook<'a> {
    set: &'a AdapterSet,
    rng: Option<RefCell<ChaCha8Rng>>,
}

impl AdapterHook<'_> {
    /// Hand back the dropout RNG so its state can be carried across steps.
    pub fn into_rng(self) -> Option<ChaCha8Rng> {
        self.rng.map(RefCell::into_inner)
    }
}

impl ProjectionHook for AdapterHook<'_> {
    fn delta(&self, name: &str, x: &Tensor) -> Result<Option<Tensor>> {
        let Some(pair) = self.set.pairs.get(name) else {
            return Ok(None);
        };
        let p = self.set.cfg.dropout;
        let x = match &self.rng {
            Some(rng) if p > 0.0 => {
                let m = dropout_mask(&mut rng.borrow_mut(), x.dims(), p, x.dtype())?;
                (x * m)?
            }
            _ => x.clone(),
        };
        let h = x.matmul(&pair.a.as_tensor().t()?)?;
        let y = h.matmul(&pair.b.as_tensor().t()?)?;
        Ok(Some((y * self.set.cfg.scaling())?))
    }
}
