use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{RegionReps, RepRegion};
use crate::error::{LiftError, Result};
use crate::evalharness::{per_class_f1, LabelConvention};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeCell {
    pub layer: usize,
    pub region: RepRegion,
    pub accuracy: f64,
    pub macro_f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub folds: usize,
    pub seed: u64,
    pub n: usize,
    pub cells: Vec<ProbeCell>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeDelta {
    pub layer: usize,
    pub region: RepRegion,
    pub delta_accuracy: f64,
    pub delta_macro_f1: f64,
}

/// Cell-wise `lift − base`.
pub fn probe_deltas(lift: &ProbeReport, base: &ProbeReport) -> Vec<ProbeDelta> {
    lift.cells
        .iter()
        .filter_map(|c| {
            let b = base
                .cells
                .iter()
                .find(|b| b.layer == c.layer && b.region == c.region)?;
            Some(ProbeDelta {
                layer: c.layer,
                region: c.region,
                delta_accuracy: c.accuracy - b.accuracy,
                delta_macro_f1: c.macro_f1 - b.macro_f1,
            })
        })
        .collect()
}

/// Fold index per example: each class shuffled with the seed, then dealt round-robin.
pub fn stratified_folds(labels: &[usize], folds: usize, seed: u64) -> Vec<usize> {
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &y) in labels.iter().enumerate() {
        by_class.entry(y).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fold = vec![0; labels.len()];
    let mut next = 0;
    for idx in by_class.values_mut() {
        idx.shuffle(&mut rng);
        for &i in idx.iter() {
            fold[i] = next % folds;
            next += 1;
        }
    }
    fold
}

const EPOCHS: usize = 300;
const LR: f64 = 0.5;
const L2: f64 = 1e-3;

/// Multinomial logistic regression, full-batch gradient descent on
/// class-weighted cross-entropy. Returns `(W: C×d, b: C)`.
fn fit_logistic(x: &[Vec<f64>], y: &[usize], n_classes: usize) -> (Vec<Vec<f64>>, Vec<f64>) {
    let d = x.first().map_or(0, |r| r.len());
    let mut counts = vec![0usize; n_classes];
    y.iter().for_each(|&c| counts[c] += 1);
    let present = counts.iter().filter(|&&c| c > 0).count() as f64;
    let cw: Vec<f64> = counts
        .iter()
        .map(|&c| {
            if c == 0 {
                0.0
            } else {
                y.len() as f64 / (present * c as f64)
            }
        })
        .collect();
    let norm: f64 = y.iter().map(|&c| cw[c]).sum();
    let mut w = vec![vec![0.0; d]; n_classes];
    let mut b = vec![0.0; n_classes];
    for _ in 0..EPOCHS {
        let mut gw = vec![vec![0.0; d]; n_classes];
        let mut gb = vec![0.0; n_classes];
        for (xi, &yi) in x.iter().zip(y) {
            let p = softmax(&logits(&w, &b, xi));
            let s = cw[yi] / norm;
            for c in 0..n_classes {
                let g = s * (p[c] - (c == yi) as u8 as f64);
                gb[c] += g;
                for (gwj, xj) in gw[c].iter_mut().zip(xi) {
                    *gwj += g * xj;
                }
            }
        }
        for c in 0..n_classes {
            b[c] -= LR * gb[c];
            for j in 0..d {
                w[c][j] -= LR * (gw[c][j] + L2 * w[c][j]);
            }
        }
    }
    (w, b)
}

fn logits(w: &[Vec<f64>], b: &[f64], x: &[f64]) -> Vec<f64> {
    w.iter()
        .zip(b)
        .map(|(wc, bc)| bc + wc.iter().zip(x).map(|(a, v)| a * v).sum::<f64>())
        .collect()
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

fn argmax(z: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in z.iter().enumerate() {
        if *v > z[best] {
            best = i;
        }
    }
    best
}

/// Standardize with the training rows' mean and std (zero std → 1).
fn standardize(train: &[Vec<f64>], rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let d = train.first().map_or(0, |r| r.len());
    let n = train.len() as f64;
    let mean: Vec<f64> = (0..d)
        .map(|j| train.iter().map(|r| r[j]).sum::<f64>() / n)
        .collect();
    let std: Vec<f64> = (0..d)
        .map(|j| {
            let v = train.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n;
            if v > 1e-24 {
                v.sqrt()
            } else {
                1.0
            }
        })
        .collect();
    rows.iter()
        .map(|r| {
            r.iter()
                .enumerate()
                .map(|(j, v)| (v - mean[j]) / std[j])
                .collect()
        })
        .collect()
}

/// Out-of-fold predictions of a standardized logistic probe.
pub fn cross_validate(
    x: &[Vec<f64>],
    y: &[usize],
    n_classes: usize,
    folds: usize,
    seed: u64,
) -> Vec<usize> {
    let fold = stratified_folds(y, folds, seed);
    let mut pred = vec![0; y.len()];
    for f in 0..folds {
        let train: Vec<usize> = (0..y.len()).filter(|&i| fold[i] != f).collect();
        let test: Vec<usize> = (0..y.len()).filter(|&i| fold[i] == f).collect();
        if test.is_empty() {
            continue;
        }
        let xtr_raw: Vec<Vec<f64>> = train.iter().map(|&i| x[i].clone()).collect();
        let xte_raw: Vec<Vec<f64>> = test.iter().map(|&i| x[i].clone()).collect();
        let xtr = standardize(&xtr_raw, &xtr_raw);
        let xte = standardize(&xtr_raw, &xte_raw);
        let ytr: Vec<usize> = train.iter().map(|&i| y[i]).collect();
        let (w, b) = fit_logistic(&xtr, &ytr, n_classes);
        for (k, &i) in test.iter().enumerate() {
            pred[i] = argmax(&logits(&w, &b, &xte[k]));
        }
    }
    pred
}

/// 5-fold (or `folds`) stratified probe for every (layer, region) cell.
pub fn probe(reps: &[RegionReps], gold: &[u32], folds: usize, seed: u64) -> Result<ProbeReport> {
    let mut classes: BTreeMap<u32, usize> = BTreeMap::new();
    for &g in gold {
        *classes.entry(g).or_default() += 1;
    }
    if let Some((&class, &support)) = classes.iter().find(|(_, &n)| n < folds) {
        return Err(LiftError::InsufficientClassSupport {
            class,
            support,
            needed: folds,
        });
    }
    let index: BTreeMap<u32, usize> = classes.keys().enumerate().map(|(i, &c)| (c, i)).collect();
    let y: Vec<usize> = gold.iter().map(|g| index[g]).collect();
    let names: Vec<String> = gold.iter().map(|g| g.to_string()).collect();
    let mut cells = Vec::new();
    let Some(first) = reps.first() else {
        return Err(LiftError::EmptyShard);
    };
    for (li, lr) in first.layers.iter().enumerate() {
        for region in RepRegion::ALL {
            let x: Vec<Vec<f64>> = reps
                .iter()
                .map(|r| r.layers[li].get(region).to_vec())
                .collect();
            let pred = cross_validate(&x, &y, classes.len(), folds, seed);
            let keys: Vec<u32> = classes.keys().copied().collect();
            let pred_names: Vec<Option<String>> =
                pred.iter().map(|&p| Some(keys[p].to_string())).collect();
            let accuracy =
                pred.iter().zip(&y).filter(|(a, b)| a == b).count() as f64 / y.len() as f64;
            let (_, macro_f1) = per_class_f1(&names, &pred_names, &[], LabelConvention::Union);
            cells.push(ProbeCell {
                layer: lr.layer,
                region,
                accuracy,
                macro_f1,
            });
        }
    }
    Ok(ProbeReport {
        folds,
        seed,
        n: gold.len(),
        cells,
    })
}
