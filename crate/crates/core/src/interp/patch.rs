use std::collections::BTreeMap;

use candle_core::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::builder::{mix_seed, PromptExample};
use crate::corpus::DatasetId;
use crate::error::{LiftError, Result};
use crate::evalharness::{label_logprob, macro_f1, pick_best, EvalPrompt};
use crate::model::{LiftModel, RunOptions};
use crate::tokenspace::{encode_with_spans, EncodeOptions, EncodedExample, Region, Tokenizer};
use crate::toylm::{HiddenPatch, LanguageModel};

/// What gets written into the clean run's history rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatchSource {
    /// Activations of the same prompt with its history posts permuted.
    Shuffled,
    /// The clean run's own activations (a no-op control).
    Clean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerPatch {
    pub layer: usize,
    pub delta_macro_f1: f64,
    pub mean_delta_gold: f64,
    pub mean_delta_margin: f64,
    pub flip_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchReport {
    pub seed: u64,
    pub n: usize,
    pub source: PatchSource,
    pub clean_macro_f1: f64,
    pub layers: Vec<LayerPatch>,
}

/// Up to `n` indices balanced over gold labels: classes are visited
/// round-robin, each in seeded order. Result is sorted.
pub fn stratified_indices(gold: &[String], n: usize, seed: u64) -> Vec<usize> {
    let mut by_class: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, g) in gold.iter().enumerate() {
        by_class.entry(g).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for v in by_class.values_mut() {
        v.shuffle(&mut rng);
    }
    let mut out = Vec::new();
    let mut round = 0;
    while out.len() < n.min(gold.len()) {
        for v in by_class.values() {
            if let Some(&i) = v.get(round) {
                if out.len() < n {
                    out.push(i);
                }
            }
        }
        round += 1;
    }
    out.sort_unstable();
    out
}

/// Permute the history posts (text, label, role) over the fixed `t-k` slots
/// with a seeded single-cycle permutation, so no post stays in place when
/// there are two or more.
pub fn shuffle_history(example: &PromptExample, seed: u64) -> PromptExample {
    let n = example.history_lines.len();
    let mut perm: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Sattolo's algorithm.
    for i in (1..n).rev() {
        let j = rng.random_range(0..i);
        perm.swap(i, j);
    }
    let mut out = example.clone();
    for (slot, &src) in perm.iter().enumerate() {
        let from = &example.history_lines[src];
        let to = &mut out.history_lines[slot];
        to.text = from.text.clone();
        to.label = from.label.clone();
        to.role = from.role.clone();
    }
    out.rerender();
    out
}

fn hist_positions(enc: &EncodedExample) -> Vec<usize> {
    (0..enc.len())
        .filter(|&i| enc.region_id[i] == Region::Hist)
        .collect()
}

struct Scored {
    gold_idx: usize,
    /// Per candidate: clean score, then per layer patched score.
    clean: Vec<f64>,
    patched: Vec<Vec<f64>>,
}

fn patch_one<M: LanguageModel>(
    model: &LiftModel<M>,
    tok: &impl Tokenizer,
    p: &EvalPrompt,
    candidates: &[&str],
    layers: &[usize],
    source: PatchSource,
    seed: u64,
) -> Result<Scored> {
    let corrupt = shuffle_history(&p.example, seed);
    let mut clean = Vec::new();
    let mut patched = vec![Vec::new(); layers.len()];
    for cand in candidates {
        let enc = encode_with_spans(
            &p.example.with_response(cand),
            tok,
            EncodeOptions::default(),
        )?;
        let run = model.run(
            &enc,
            RunOptions {
                capture_hidden: true,
                ..Default::default()
            },
        )?;
        clean.push(label_logprob(&enc, &run.out.logits)?);
        let positions = hist_positions(&enc);
        let donor: Vec<Tensor> = match source {
            PatchSource::Clean => run.out.block_inputs.clone(),
            PatchSource::Shuffled => {
                let cenc =
                    encode_with_spans(&corrupt.with_response(cand), tok, EncodeOptions::default())?;
                if cenc.len() != enc.len() || hist_positions(&cenc) != positions {
                    return Err(LiftError::DimMismatch(format!(
                        "shuffled history changes the history span of {}",
                        p.example.sequence_key
                    )));
                }
                model
                    .run(
                        &cenc,
                        RunOptions {
                            capture_hidden: true,
                            ..Default::default()
                        },
                    )?
                    .out
                    .block_inputs
            }
        };
        for (k, &layer) in layers.iter().enumerate() {
            let hp = HiddenPatch {
                layer,
                positions: positions.clone(),
                source: donor[layer].clone(),
            };
            let out = model.run(
                &enc,
                RunOptions {
                    patch: Some(&hp),
                    ..Default::default()
                },
            )?;
            patched[k].push(label_logprob(&enc, &out.out.logits)?);
        }
    }
    let gold_idx = candidates.iter().position(|c| *c == p.gold).unwrap_or(0);
    Ok(Scored {
        gold_idx,
        clean,
        patched,
    })
}

fn margin(scores: &[f64], gold: usize) -> f64 {
    let other = scores
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != gold)
        .map(|(_, s)| *s)
        .fold(f64::NEG_INFINITY, f64::max);
    scores[gold] - other
}

/// Patch history rows at each layer and measure the effect on rank decoding
/// of `n_examples` stratified prompts.
pub fn activation_patch<M: LanguageModel>(
    model: &LiftModel<M>,
    tok: &impl Tokenizer,
    prompts: &[EvalPrompt],
    dataset: DatasetId,
    layers: &[usize],
    seed: u64,
    n_examples: usize,
    source: PatchSource,
) -> Result<PatchReport> {
    if let Some(&layer) = layers.iter().find(|&&l| l >= model.base.n_layers()) {
        return Err(LiftError::LayerOutOfRange {
            layer,
            layers: model.base.n_layers(),
        });
    }
    if prompts.is_empty() {
        return Err(LiftError::EmptyShard);
    }
    let candidates = dataset.declared_labels();
    let gold: Vec<String> = prompts.iter().map(|p| p.gold.clone()).collect();
    let chosen = stratified_indices(&gold, n_examples, seed);
    let scored = chosen
        .iter()
        .map(|&i| {
            let p = &prompts[i];
            let s = mix_seed(seed, &p.example.sequence_key, p.example.timestep_id);
            patch_one(model, tok, p, candidates, layers, source, s)
        })
        .collect::<Result<Vec<_>>>()?;
    let golds: Vec<String> = scored
        .iter()
        .map(|s| candidates[s.gold_idx].to_string())
        .collect();
    let clean_pred: Vec<Option<String>> = scored
        .iter()
        .map(|s| Some(pick_best(candidates, &s.clean)))
        .collect();
    let clean_f1 = macro_f1(&golds, &clean_pred);
    let n = scored.len() as f64;
    let mut out = Vec::new();
    for (k, &layer) in layers.iter().enumerate() {
        let pred: Vec<Option<String>> = scored
            .iter()
            .map(|s| Some(pick_best(candidates, &s.patched[k])))
            .collect();
        let flips = pred.iter().zip(&clean_pred).filter(|(a, b)| a != b).count();
        out.push(LayerPatch {
            layer,
            delta_macro_f1: macro_f1(&golds, &pred) - clean_f1,
            mean_delta_gold: scored
                .iter()
                .map(|s| s.patched[k][s.gold_idx] - s.clean[s.gold_idx])
                .sum::<f64>()
                / n,
            mean_delta_margin: scored
                .iter()
                .map(|s| margin(&s.patched[k], s.gold_idx) - margin(&s.clean, s.gold_idx))
                .sum::<f64>()
                / n,
            flip_rate: flips as f64 / n,
        });
    }
    Ok(PatchReport {
        seed,
        n: scored.len(),
        source,
        clean_macro_f1: clean_f1,
        layers: out,
    })
}
