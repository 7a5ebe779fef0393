//! The four loss terms and their weighted sum.

use candle_core::{DType, Device, Tensor, Var, D};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LiftError, Result};
use crate::tensors::{log_softmax_last, normal};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub ce: f64,
    pub out: f64,
    pub cls: f64,
    pub hist: f64,
    pub gamma: f64,
    /// Per global label id; `None` disables class weighting.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_weights: Option<Vec<f64>>,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            ce: 1.0,
            out: 1.0,
            cls: 0.5,
            hist: 0.25,
            gamma: 2.0,
            class_weights: None,
        }
    }
}

impl LossWeights {
    pub fn only(ce: f64, out: f64, cls: f64, hist: f64) -> Self {
        Self {
            ce,
            out,
            cls,
            hist,
            ..Self::default()
        }
    }
}

/// Inverse label frequency, scaled so the weighted mean over `labels` is 1.
/// Labels that never occur get weight 1.
pub fn inverse_frequency_weights(labels: &[u32], n_labels: usize) -> Vec<f64> {
    let mut counts = vec![0usize; n_labels];
    for &l in labels {
        counts[l as usize] += 1;
    }
    let present = counts.iter().filter(|c| **c > 0).count().max(1);
    let n = labels.len() as f64;
    counts
        .iter()
        .map(|&c| {
            if c == 0 {
                1.0
            } else {
                n / (present as f64 * c as f64)
            }
        })
        .collect()
}

/// A linear map from hidden states to global label logits.
pub struct LinearHead {
    pub weight: Var,
    pub bias: Var,
}

impl LinearHead {
    pub fn new(
        d_model: usize,
        n_labels: usize,
        rng: &mut ChaCha8Rng,
        dtype: DType,
    ) -> Result<Self> {
        Ok(Self {
            weight: Var::from_tensor(&normal(rng, &[n_labels, d_model], 0.02, dtype)?)?,
            bias: Var::zeros(n_labels, dtype, &Device::Cpu)?,
        })
    }

    /// `x` is (d_model,) or (n, d_model).
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let x2 = if x.rank() == 1 {
            x.unsqueeze(0)?
        } else {
            x.clone()
        };
        let y = x2
            .matmul(&self.weight.as_tensor().t()?)?
            .broadcast_add(self.bias.as_tensor())?;
        Ok(if x.rank() == 1 { y.squeeze(0)? } else { y })
    }
}

/// Global classification head and history head.
pub struct Heads {
    pub global: LinearHead,
    /// `None` means the history objective shares the global head.
    pub history: Option<LinearHead>,
}

impl Heads {
    pub fn new(
        d_model: usize,
        n_labels: usize,
        separate_history: bool,
        seed: u64,
        dtype: DType,
    ) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let global = LinearHead::new(d_model, n_labels, &mut rng, dtype)?;
        let history = if separate_history {
            Some(LinearHead::new(d_model, n_labels, &mut rng, dtype)?)
        } else {
            None
        };
        Ok(Self { global, history })
    }

    pub fn history_head(&self) -> &LinearHead {
        self.history.as_ref().unwrap_or(&self.global)
    }

    pub fn named_vars(&self) -> Vec<(String, &Var)> {
        let mut v = vec![
            ("head.global.weight".to_string(), &self.global.weight),
            ("head.global.bias".to_string(), &self.global.bias),
        ];
        if let Some(h) = &self.history {
            v.push(("head.history.weight".to_string(), &h.weight));
            v.push(("head.history.bias".to_string(), &h.bias));
        }
        v
    }
}

fn zero(dtype: DType) -> Result<Tensor> {
    Ok(Tensor::zeros((), dtype, &Device::Cpu)?)
}

/// Per-target log-probabilities: entry `j-1` is `log p(ids[j] | ids[..j])`.
fn target_logprobs(logits: &Tensor, ids: &[u32]) -> Result<Tensor> {
    let l = ids.len();
    let logp = log_softmax_last(&logits.narrow(0, 0, l - 1)?)?;
    let targets = Tensor::from_vec(ids[1..].to_vec(), (l - 1, 1), &Device::Cpu)?;
    Ok(logp.gather(&targets, 1)?.squeeze(1)?)
}

/// Normalized weights over target positions 1..L selected by `mask`.
fn target_weights(mask: &[bool], dtype: DType) -> Result<Option<Tensor>> {
    let n = mask[1..].iter().filter(|m| **m).count();
    if n == 0 {
        return Ok(None);
    }
    let w: Vec<f64> = mask[1..]
        .iter()
        .map(|&m| if m { 1.0 / n as f64 } else { 0.0 })
        .collect();
    Ok(Some(
        Tensor::from_vec(w, mask.len() - 1, &Device::Cpu)?.to_dtype(dtype)?,
    ))
}

/// Focal modulation `(1-p)^γ · (−log p)`; γ = 0 is plain NLL.
fn focal_nll(logp: &Tensor, gamma: f64) -> Result<Tensor> {
    let nll = logp.neg()?;
    if gamma == 0.0 {
        return Ok(nll);
    }
    let one_minus_p = logp.exp()?.affine(-1.0, 1.0)?.clamp(0.0, 1.0)?;
    Ok((one_minus_p.powf(gamma)? * nll)?)
}

/// Mean next-token CE over target positions where `mask` is set.
/// Returns a zero scalar when nothing is supervised.
pub fn prompt_ce(logits: &Tensor, ids: &[u32], mask: &[bool]) -> Result<Tensor> {
    focal_lm(logits, ids, mask, 0.0)
}

/// Mean focal LM loss over target positions where `mask` is set.
pub fn focal_lm(logits: &Tensor, ids: &[u32], mask: &[bool], gamma: f64) -> Result<Tensor> {
    if ids.len() < 2 {
        return zero(logits.dtype());
    }
    let Some(w) = target_weights(mask, logits.dtype())? else {
        return zero(logits.dtype());
    };
    let per = focal_nll(&target_logprobs(logits, ids)?, gamma)?;
    Ok((per * w)?.sum_all()?)
}

/// Focal CE of one logit row against `gold`, scaled by its class weight.
pub fn focal_from_logits(
    logits: &Tensor,
    gold: u32,
    gamma: f64,
    class_weight: f64,
) -> Result<Tensor> {
    let logp = log_softmax_last(logits)?;
    let g = logp
        .narrow(D::Minus1, gold as usize, 1)?
        .squeeze(D::Minus1)?;
    Ok((focal_nll(&g, gamma)? * class_weight)?)
}

fn class_weight(weights: Option<&[f64]>, gold: u32) -> f64 {
    weights
        .and_then(|w| w.get(gold as usize))
        .copied()
        .unwrap_or(1.0)
}

/// Focal classification at the last stamped (output) position.
pub fn focal_cls(
    hidden: &Tensor,
    output_mask: &[bool],
    head: &LinearHead,
    gold: u32,
    gamma: f64,
    class_weights: Option<&[f64]>,
) -> Result<Tensor> {
    let pos = output_mask
        .iter()
        .rposition(|m| *m)
        .ok_or(LiftError::NoStampedPosition)?;
    let logits = head.forward(&hidden.get(pos)?)?;
    focal_from_logits(&logits, gold, gamma, class_weight(class_weights, gold))
}

/// Mean of the rows of `hidden` selected by `mask`, or `None` if the mask is empty.
pub fn masked_mean(hidden: &Tensor, mask: &[bool]) -> Result<Option<Tensor>> {
    let n = mask.iter().filter(|m| **m).count();
    if n == 0 {
        return Ok(None);
    }
    let w: Vec<f64> = mask
        .iter()
        .map(|&m| if m { 1.0 / n as f64 } else { 0.0 })
        .collect();
    let w = Tensor::from_vec(w, (1, mask.len()), &Device::Cpu)?.to_dtype(hidden.dtype())?;
    Ok(Some(w.matmul(hidden)?.squeeze(0)?))
}

/// Focal classification from the mean hidden state over history tokens.
/// `None` when the example has no history (a counted skip for the caller).
pub fn hist_cls(
    hidden: &Tensor,
    hist_mask: &[bool],
    head: &LinearHead,
    gold: u32,
    gamma: f64,
) -> Result<Option<Tensor>> {
    let Some(pooled) = masked_mean(hidden, hist_mask)? else {
        return Ok(None);
    };
    Ok(Some(focal_from_logits(
        &head.forward(&pooled)?,
        gold,
        gamma,
        1.0,
    )?))
}

/// The four term values of one example.
#[derive(Debug, Clone)]
pub struct LossTerms {
    pub ce: Tensor,
    pub focal_lm: Tensor,
    pub focal_cls: Tensor,
    pub hist_cls: Tensor,
    pub hist_skipped: bool,
    pub ce_empty: bool,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct TermValues {
    pub ce: f64,
    pub focal_lm: f64,
    pub focal_cls: f64,
    pub hist_cls: f64,
    pub total: f64,
}

impl LossTerms {
    pub fn values(&self, total: &Tensor) -> Result<TermValues> {
        let f = |t: &Tensor| -> Result<f64> { Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?) };
        Ok(TermValues {
            ce: f(&self.ce)?,
            focal_lm: f(&self.focal_lm)?,
            focal_cls: f(&self.focal_cls)?,
            hist_cls: f(&self.hist_cls)?,
            total: f(total)?,
        })
    }
}

/// `λ_CE·L_CE + λ_out·L_focalLM + λ_cls·L_focalCls + λ_hist·L_histCls`.
pub fn total_loss(terms: &LossTerms, w: &LossWeights) -> Result<Tensor> {
    for (name, t) in [
        ("ce", &terms.ce),
        ("focal_lm", &terms.focal_lm),
        ("focal_cls", &terms.focal_cls),
        ("hist_cls", &terms.hist_cls),
    ] {
        let v = t.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if !v.is_finite() {
            return Err(LiftError::NonFinite(format!("{name} = {v}")));
        }
    }
    let mut total = zero(terms.ce.dtype())?;
    for (lambda, t) in [
        (w.ce, &terms.ce),
        (w.out, &terms.focal_lm),
        (w.cls, &terms.focal_cls),
        (w.hist, &terms.hist_cls),
    ] {
        if lambda != 0.0 {
            total = (total + (t * lambda)?)?;
        }
    }
    Ok(total)
}

#[cfg(test)]
mod tests;
