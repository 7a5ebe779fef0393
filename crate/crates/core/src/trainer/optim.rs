use std::collections::BTreeMap;

use candle_core::{DType, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Decoupled-weight-decay Adam over named variables. A per-variable 0/1 mask
/// blocks both the gradient step and the decay, leaving masked entries
/// bit-identical.
pub struct AdamW {
    cfg: AdamWConfig,
    vars: BTreeMap<String, Var>,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
    step: u64,
}

impl AdamW {
    pub fn new(vars: BTreeMap<String, Var>, cfg: AdamWConfig) -> Result<Self> {
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        for (n, var) in &vars {
            m.insert(n.clone(), var.as_tensor().zeros_like()?);
            v.insert(n.clone(), var.as_tensor().zeros_like()?);
        }
        Ok(Self {
            cfg,
            vars,
            m,
            v,
            step: 0,
        })
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn vars(&self) -> &BTreeMap<String, Var> {
        &self.vars
    }

    /// Apply one update. Variables without a gradient are left untouched.
    pub fn step(
        &mut self,
        grads: &BTreeMap<String, Tensor>,
        lr: f64,
        masks: &BTreeMap<String, Tensor>,
    ) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (name, var) in &self.vars {
            let Some(g) = grads.get(name) else { continue };
            let mask = masks.get(name);
            let g = match mask {
                Some(mk) => (g * mk)?,
                None => g.clone(),
            };
            let m = ((&self.m[name] * c.beta1)? + (&g * (1.0 - c.beta1))?)?;
            let v = ((&self.v[name] * c.beta2)? + (g.sqr()? * (1.0 - c.beta2))?)?;
            let mhat = (&m / bc1)?;
            let vhat = (&v / bc2)?;
            let theta = var.as_tensor();
            let update = ((mhat / (vhat.sqrt()? + c.eps)?)? + (theta * c.weight_decay)?)?;
            let proposed = (theta - (update * lr)?)?;
            let next = match mask {
                Some(mk) => mk.to_dtype(DType::U8)?.where_cond(&proposed, theta)?,
                None => proposed,
            };
            var.set(&next)?;
            self.m.insert(name.clone(), m);
            self.v.insert(name.clone(), v);
        }
        Ok(())
    }
}

/// Global L2 norm of all gradients.
pub fn global_norm(grads: &BTreeMap<String, Tensor>) -> Result<f64> {
    let mut s = 0.0;
    for g in grads.values() {
        s += g
            .to_dtype(DType::F64)?
            .sqr()?
            .sum_all()?
            .to_scalar::<f64>()?;
    }
    Ok(s.sqrt())
}

/// Scale gradients so their global norm is at most `max_norm`; returns the pre-clip norm.
pub fn clip_grad_norm(grads: &mut BTreeMap<String, Tensor>, max_norm: f64) -> Result<f64> {
    let norm = global_norm(grads)?;
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for g in grads.values_mut() {
            *g = (&*g * scale)?;
        }
    }
    Ok(norm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    fn var(vals: &[f64]) -> Var {
        Var::from_tensor(&Tensor::new(vals, &Device::Cpu).unwrap()).unwrap()
    }

    #[test]
    fn first_step_matches_hand_computation() {
        let w = var(&[1.0, -2.0]);
        let mut opt = AdamW::new(
            BTreeMap::from([("w".to_string(), w.clone())]),
            AdamWConfig::default(),
        )
        .unwrap();
        let g = Tensor::new(&[0.5f64, -0.1], &Device::Cpu).unwrap();
        opt.step(
            &BTreeMap::from([("w".to_string(), g)]),
            0.1,
            &BTreeMap::new(),
        )
        .unwrap();
        let got = w.as_tensor().to_vec1::<f64>().unwrap();
        // After one step mhat = g and vhat = g², so the Adam term is sign(g)·|g|/(|g|+eps).
        for (i, (theta, gi)) in [(1.0f64, 0.5f64), (-2.0, -0.1)].iter().enumerate() {
            let adam = gi / (gi.abs() + 1e-8);
            let want = theta - 0.1 * (adam + 0.01 * theta);
            assert!((got[i] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn masked_entries_are_bit_identical() {
        let w = var(&[0.3, 0.7, -1.1]);
        let mut opt = AdamW::new(
            BTreeMap::from([("w".to_string(), w.clone())]),
            AdamWConfig::default(),
        )
        .unwrap();
        let mask = Tensor::new(&[0.0f64, 1.0, 0.0], &Device::Cpu).unwrap();
        for _ in 0..5 {
            let g = Tensor::new(&[1.0f64, 1.0, 1.0], &Device::Cpu).unwrap();
            opt.step(
                &BTreeMap::from([("w".to_string(), g)]),
                0.5,
                &BTreeMap::from([("w".to_string(), mask.clone())]),
            )
            .unwrap();
        }
        let got = w.as_tensor().to_vec1::<f64>().unwrap();
        assert_eq!(got[0].to_bits(), 0.3f64.to_bits());
        assert_eq!(got[2].to_bits(), (-1.1f64).to_bits());
        assert!(got[1] < 0.7);
    }

    #[test]
    fn clipping_caps_global_norm() {
        let mut grads = BTreeMap::from([
            (
                "a".to_string(),
                Tensor::new(&[3.0f64], &Device::Cpu).unwrap(),
            ),
            (
                "b".to_string(),
                Tensor::new(&[4.0f64], &Device::Cpu).unwrap(),
            ),
        ]);
        let pre = clip_grad_norm(&mut grads, 1.0).unwrap();
        assert!((pre - 5.0).abs() < 1e-12);
        assert!((global_norm(&grads).unwrap() - 1.0).abs() < 1e-12);
        let pre2 = clip_grad_norm(&mut grads, 10.0).unwrap();
        assert!((pre2 - 1.0).abs() < 1e-12);
    }
}
