//! In-context evaluation: prompt construction with k demonstrations, label
//! decoding and macro-F1 reports.

mod context;
pub mod metrics;

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use context::{context_source_select, ContextMode, ItemRef};
pub use metrics::{
    confusion, macro_f1, per_class_f1, ClassMetrics, Confusion, LabelConvention, INVALID,
};

use crate::builder::{mix_seed, sample_demos, BuilderConfig, Demo, PromptBuilder, PromptExample};
use crate::corpus::{DatasetId, Timeline, NULL_LABEL};
use crate::error::{LiftError, Result};
use crate::model::{LiftModel, RunOptions};
use crate::tensors::{log_softmax_last, to_f64_rows};
use crate::tokenspace::{encode_with_spans, EncodeOptions, EncodedExample, Region, Tokenizer};
use crate::toylm::LanguageModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeMode {
    /// Score every candidate label by log-likelihood; highest wins.
    #[default]
    Rank,
    /// Greedy generation, then map the text onto a candidate.
    Generate,
}

impl std::str::FromStr for DecodeMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "rank" => Ok(Self::Rank),
            "generate" => Ok(Self::Generate),
            other => Err(format!("unknown decode mode {other}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub shots: usize,
    pub seed: u64,
    pub mode: DecodeMode,
    pub convention: LabelConvention,
    /// CMV demo selection; `None` samples from the whole demo pool.
    pub context: Option<ContextMode>,
    pub max_examples: Option<usize>,
    pub max_new_tokens: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            shots: 0,
            seed: 17,
            mode: DecodeMode::Rank,
            convention: LabelConvention::Union,
            context: None,
            max_examples: None,
            max_new_tokens: 8,
        }
    }
}

/// A rendered evaluation query. `example.response_text` holds the gold label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalPrompt {
    pub example: PromptExample,
    pub gold: String,
    /// Demonstrations were requested but the pool was empty.
    pub zero_shot_fallback: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub sequence_key: String,
    pub timestep_id: usize,
    pub gold: String,
    pub pred: Option<String>,
    /// Candidate log-likelihoods in candidate order (rank mode).
    pub scores: Vec<f64>,
    pub generated: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceTarget {
    pub backbone: String,
    pub variant: String,
    pub macro_f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset: DatasetId,
    pub shots: usize,
    pub decode_mode: DecodeMode,
    pub demo_seed: u64,
    pub label_convention: LabelConvention,
    pub model_tag: String,
    pub n: usize,
    pub macro_f1: f64,
    pub per_class: Vec<ClassMetrics>,
    pub confusion: Confusion,
    pub invalid: usize,
    pub zero_shot_fallbacks: usize,
    pub dropped: usize,
    pub prompt_hash: String,
    pub predictions: Vec<Prediction>,
    /// Published full-scale scores for the same (dataset, shots) cell.
    pub reference_targets: Vec<ReferenceTarget>,
}

const TABLE1: &str = include_str!("../../references/table1.csv");

#[derive(Debug, Deserialize)]
struct Table1Row {
    backbone: String,
    variant: String,
    dataset: DatasetId,
    shots: usize,
    macro_f1: f64,
}

/// Published Table-1 cells for a dataset and shot count.
pub fn reference_targets(dataset: DatasetId, shots: usize) -> Vec<ReferenceTarget> {
    let mut rdr = csv::Reader::from_reader(TABLE1.as_bytes());
    rdr.deserialize::<Table1Row>()
        .map(|r| r.expect("bundled reference table parses"))
        .filter(|r| r.dataset == dataset && r.shots == shots)
        .map(|r| ReferenceTarget {
            backbone: r.backbone,
            variant: r.variant,
            macro_f1: r.macro_f1,
        })
        .collect()
}

/// Candidate whose token count is largest (ties: lexicographically smallest).
fn longest_candidate(dataset: DatasetId, tok: &impl Tokenizer) -> &'static str {
    let mut c: Vec<&'static str> = dataset.declared_labels().to_vec();
    c.sort_by(|a, b| tok.count(b).cmp(&tok.count(a)).then(a.cmp(b)));
    c[0]
}

/// Render evaluation prompts for every labeled item of `test`.
///
/// Demos come from `demo_source`: uniformly from all its labeled items
/// (excluding the query's own sequence), or through
/// [`context_source_select`] when a context mode is set. Budget fitting uses
/// the longest candidate label so the prompt never depends on the gold label.
pub fn build_eval_prompts(
    tok: &impl Tokenizer,
    bcfg: &BuilderConfig,
    test: &[Timeline],
    demo_source: &[Timeline],
    opts: &EvalOptions,
) -> Result<(Vec<EvalPrompt>, usize)> {
    let builder = PromptBuilder::new(tok, bcfg.clone());
    let pool = builder.demo_pool(demo_source);
    let mut out = Vec::new();
    let mut dropped = 0;
    'outer: for tl in test {
        let placeholder = longest_candidate(tl.dataset_id, tok);
        for (i, item) in tl.items.iter().enumerate() {
            if !item.is_labeled() {
                continue;
            }
            if opts.max_examples.is_some_and(|m| out.len() >= m) {
                break 'outer;
            }
            let seed = mix_seed(opts.seed, &tl.sequence_key, i);
            let demos: Vec<Demo> = match opts.context {
                None => sample_demos(
                    &pool,
                    opts.shots,
                    seed,
                    &tl.sequence_key,
                    bcfg.demo_sampling,
                ),
                Some(mode) => {
                    let ctx_pool: Vec<Demo> = context_source_select(demo_source, item, mode)
                        .into_iter()
                        .map(|(ti, ii)| {
                            Demo::from_window(&demo_source[ti].items, ii, bcfg.demo_context)
                        })
                        .collect();
                    sample_demos(&ctx_pool, opts.shots, seed, "", bcfg.demo_sampling)
                }
            };
            let mut masked = tl.clone();
            masked.items[i].local_label = placeholder.to_string();
            match builder.build_example(0, &masked, i, opts.shots, &demos)? {
                Some((ex, _)) => out.push(EvalPrompt {
                    example: ex.with_response(&item.local_label),
                    gold: item.local_label.clone(),
                    zero_shot_fallback: opts.shots > 0 && demos.is_empty(),
                }),
                None => dropped += 1,
            }
        }
    }
    Ok((out, dropped))
}

/// SHA-256 over the prompt texts in order.
pub fn prompt_hash(prompts: &[EvalPrompt]) -> String {
    let mut h = Sha256::new();
    for p in prompts {
        h.update(p.example.prompt.as_bytes());
        h.update([0u8]);
    }
    hex::encode(h.finalize())
}

/// Total log-probability of the candidate tokens (eos excluded).
pub fn score_candidate<M: LanguageModel>(
    model: &LiftModel<M>,
    tok: &impl Tokenizer,
    example: &PromptExample,
    candidate: &str,
) -> Result<f64> {
    let ex = example.with_response(candidate);
    let enc = encode_with_spans(&ex, tok, EncodeOptions::default())?;
    let run = model.run(&enc, RunOptions::default())?;
    label_logprob(&enc, &run.out.logits)
}

/// Sum of next-token log-probabilities over the response tokens of `enc`,
/// excluding the trailing eos.
pub fn label_logprob(enc: &EncodedExample, logits: &candle_core::Tensor) -> Result<f64> {
    let lp = to_f64_rows(&log_softmax_last(logits)?)?;
    let last = enc.len() - 1;
    Ok((enc.prompt_len..last)
        .filter(|&j| enc.output_mask[j])
        .map(|j| lp[j - 1][enc.input_ids[j] as usize])
        .sum())
}

/// Highest score wins; exact ties go to the lexicographically smallest label.
pub fn pick_best(candidates: &[&str], scores: &[f64]) -> String {
    let mut best = 0;
    for i in 1..candidates.len() {
        let better = scores[i] > scores[best]
            || (scores[i] == scores[best] && candidates[i] < candidates[best]);
        if better {
            best = i;
        }
    }
    candidates[best].to_string()
}

/// Longest candidate occurring in `text` (ties: lexicographically smallest).
pub fn parse_generated(text: &str, candidates: &[&str]) -> Option<String> {
    candidates
        .iter()
        .filter(|c| !c.is_empty() && text.contains(**c))
        .min_by(|a, b| b.len().cmp(&a.len()).then(a.cmp(b)))
        .map(|c| c.to_string())
}

/// Greedy continuation of the prompt until eos or `max_new` tokens.
pub fn generate<M: LanguageModel>(
    model: &LiftModel<M>,
    tok: &impl Tokenizer,
    example: &PromptExample,
    max_new: usize,
) -> Result<String> {
    let full = encode_with_spans(example, tok, EncodeOptions::default())?;
    let mut enc: EncodedExample = full.prompt_only();
    let mut produced = Vec::new();
    for _ in 0..max_new {
        let run = model.run(&enc, RunOptions::default())?;
        let row = run.out.logits.get(enc.len() - 1)?;
        let v: Vec<f64> = row.to_dtype(candle_core::DType::F64)?.to_vec1()?;
        let mut best = 0;
        for (i, x) in v.iter().enumerate() {
            if *x > v[best] {
                best = i;
            }
        }
        let id = best as u32;
        if id == tok.eos_id() {
            break;
        }
        produced.push(id);
        enc.input_ids.push(id);
        enc.prompt_ce_mask.push(false);
        enc.output_mask.push(true);
        enc.hist_mask.push(false);
        enc.region_id.push(Region::Output);
        enc.label_stamp.push(NULL_LABEL);
        enc.hist_rel.push(0);
    }
    Ok(tok.decode(&produced))
}

/// Decode each prompt and assemble the report.
pub fn evaluate_prompts<M: LanguageModel>(
    model: &LiftModel<M>,
    tok: &impl Tokenizer,
    prompts: &[EvalPrompt],
    dataset: DatasetId,
    opts: &EvalOptions,
    model_tag: &str,
) -> Result<EvalReport> {
    if prompts.is_empty() {
        return Err(LiftError::EmptyShard);
    }
    let candidates = dataset.declared_labels();
    let mut predictions = Vec::with_capacity(prompts.len());
    for p in prompts {
        let (pred, scores, generated) = match opts.mode {
            DecodeMode::Rank => {
                let scores = candidates
                    .iter()
                    .map(|c| score_candidate(model, tok, &p.example, c))
                    .collect::<Result<Vec<_>>>()?;
                (Some(pick_best(candidates, &scores)), scores, None)
            }
            DecodeMode::Generate => {
                let text = generate(model, tok, &p.example, opts.max_new_tokens)?;
                (parse_generated(&text, candidates), Vec::new(), Some(text))
            }
        };
        predictions.push(Prediction {
            sequence_key: p.example.sequence_key.clone(),
            timestep_id: p.example.timestep_id,
            gold: p.gold.clone(),
            pred,
            scores,
            generated,
        });
    }
    let gold: Vec<String> = predictions.iter().map(|p| p.gold.clone()).collect();
    let pred: Vec<Option<String>> = predictions.iter().map(|p| p.pred.clone()).collect();
    let declared: Vec<String> = candidates.iter().map(|s| s.to_string()).collect();
    let (per_class, macro_f1) = per_class_f1(&gold, &pred, &declared, opts.convention);
    Ok(EvalReport {
        dataset,
        shots: opts.shots,
        decode_mode: opts.mode,
        demo_seed: opts.seed,
        label_convention: opts.convention,
        model_tag: model_tag.to_string(),
        n: predictions.len(),
        macro_f1,
        per_class,
        confusion: confusion(&gold, &pred),
        invalid: pred.iter().filter(|p| p.is_none()).count(),
        zero_shot_fallbacks: prompts.iter().filter(|p| p.zero_shot_fallback).count(),
        dropped: 0,
        prompt_hash: prompt_hash(prompts),
        predictions,
        reference_targets: reference_targets(dataset, opts.shots),
    })
}

/// Build prompts for `test` and evaluate them.
pub fn evaluate<M: LanguageModel>(
    model: &LiftModel<M>,
    tok: &impl Tokenizer,
    bcfg: &BuilderConfig,
    test: &[Timeline],
    demo_source: &[Timeline],
    opts: &EvalOptions,
    model_tag: &str,
) -> Result<EvalReport> {
    let dataset = test.first().ok_or(LiftError::EmptyShard)?.dataset_id;
    let (prompts, dropped) = build_eval_prompts(tok, bcfg, test, demo_source, opts)?;
    let mut report = evaluate_prompts(model, tok, &prompts, dataset, opts, model_tag)?;
    report.dropped = dropped;
    Ok(report)
}

impl EvalReport {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        crate::corpus::write_json(path, self)
    }

    /// One row per class plus a `MACRO` row.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| LiftError::io(path, e))?;
        let mut w = csv::Writer::from_writer(f);
        w.write_record([
            "model",
            "dataset",
            "shots",
            "decode_mode",
            "class",
            "precision",
            "recall",
            "f1",
            "support",
        ])?;
        let shots = self.shots.to_string();
        let mode = match self.decode_mode {
            DecodeMode::Rank => "rank",
            DecodeMode::Generate => "generate",
        };
        for c in &self.per_class {
            w.write_record([
                self.model_tag.as_str(),
                self.dataset.as_str(),
                &shots,
                mode,
                &c.label,
                &format!("{:.6}", c.precision),
                &format!("{:.6}", c.recall),
                &format!("{:.6}", c.f1),
                &c.support.to_string(),
            ])?;
        }
        w.write_record([
            self.model_tag.as_str(),
            self.dataset.as_str(),
            &shots,
            mode,
            "MACRO",
            "",
            "",
            &format!("{:.6}", self.macro_f1),
            &self.n.to_string(),
        ])?;
        w.flush().map_err(|e| LiftError::io(path, e))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests;
