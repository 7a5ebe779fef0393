//! Glue from timelines to encoded stage shards.

use serde::{Deserialize, Serialize};

use std::collections::BTreeMap;

use crate::builder::{
    assign_stage, split_timelines, BuilderConfig, PromptBuilder, PromptExample, StageBuildStats,
};
use crate::corpus::{DatasetId, Timeline};
use crate::error::{LiftError, Result};
use crate::tokenspace::{
    encode_with_spans, extend_vocab, EncodeOptions, EncodedExample, WordTokenizer,
};
use crate::trainer::{split_validation, StageData, TrainConfig};

/// Rendered examples of one curriculum stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageShard {
    pub stage: u8,
    pub dataset: DatasetId,
    pub shots: usize,
    pub examples: Vec<PromptExample>,
    pub stats: StageBuildStats,
}

/// Fit a word tokenizer on item texts plus the prompts they render into, so
/// instructions and prompt scaffolding get whole-word tokens.
pub fn fit_tokenizer(
    groups: &[(u8, usize, &[Timeline])],
    cfg: &BuilderConfig,
    max_words: usize,
) -> Result<WordTokenizer> {
    let bytes_only = extend_vocab(WordTokenizer::new(Vec::<String>::new()));
    let mut wide = cfg.clone();
    wide.budget = usize::MAX / 4;
    let b = PromptBuilder::new(&bytes_only, wide);
    let mut corpus: Vec<String> = Vec::new();
    for (stage, shots, tls) in groups {
        for tl in tls.iter() {
            corpus.extend(tl.items.iter().map(|i| i.text.clone()));
        }
        let (examples, _) = b.build_stage(*stage, *shots, tls)?;
        corpus.extend(examples.into_iter().map(|e| e.full_text()));
    }
    Ok(extend_vocab(WordTokenizer::fit(
        corpus.iter().map(|s| s.as_str()),
        1,
        max_words,
    )))
}

/// Build one shard per `(stage, shots, timelines)` group.
pub fn build_shards(
    tok: &WordTokenizer,
    cfg: &BuilderConfig,
    groups: &[(u8, usize, &[Timeline])],
) -> Result<Vec<StageShard>> {
    let b = PromptBuilder::new(tok, cfg.clone());
    groups
        .iter()
        .map(|(stage, shots, tls)| {
            let (examples, stats) = b.build_stage(*stage, *shots, tls)?;
            Ok(StageShard {
                stage: *stage,
                dataset: tls
                    .first()
                    .map(|t| t.dataset_id)
                    .unwrap_or(DatasetId::Annomi),
                shots: *shots,
                examples,
                stats,
            })
        })
        .collect()
}

pub fn encode_examples(
    examples: &[PromptExample],
    tok: &WordTokenizer,
    opts: EncodeOptions,
) -> Result<Vec<EncodedExample>> {
    examples
        .iter()
        .map(|e| encode_with_spans(e, tok, opts))
        .collect()
}

/// Short instruction for the synthetic history task.
pub const SYNTH_INSTRUCTION: &str =
    "Read the timeline. Answer Sw if the mood word of the current post differs from the mood word of the post before it, otherwise N-Sw.";

pub fn synthetic_builder_config(seed: u64, include_history: bool) -> BuilderConfig {
    BuilderConfig {
        budget: 512,
        seed,
        include_history,
        instruction_override: Some(SYNTH_INSTRUCTION.to_string()),
        ..BuilderConfig::default()
    }
}

/// Prompt-builder settings implied by a run configuration.
pub fn builder_config(cfg: &TrainConfig) -> BuilderConfig {
    BuilderConfig {
        budget: cfg.max_tokens,
        seed: cfg.seed,
        history_labels: cfg.history_labels,
        include_history: cfg.include_history,
        ..BuilderConfig::default()
    }
}

/// Held-out fraction for curriculum datasets.
pub const TEST_FRACTION: f64 = 0.2;
/// Evaluation-only datasets are split evenly into a demo pool and a test set.
pub const DEMO_FRACTION: f64 = 0.5;

/// Train (or demo pool) and test timelines of one dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSplit {
    pub dataset: DatasetId,
    /// Training timelines; for evaluation-only datasets, the demo pool.
    pub train: Vec<Timeline>,
    pub test: Vec<Timeline>,
}

/// Timeline-level split: 80/20 for curriculum datasets, 50/50 demo/test otherwise.
pub fn split_corpus(dataset: DatasetId, timelines: &[Timeline], seed: u64) -> CorpusSplit {
    let fraction = if dataset.is_training() {
        TEST_FRACTION
    } else {
        DEMO_FRACTION
    };
    let (train, test) = split_timelines(timelines, fraction, seed);
    CorpusSplit {
        dataset,
        train,
        test,
    }
}

/// Fit the tokenizer over every split and render one shard per curriculum dataset present.
pub fn build_run(
    splits: &[CorpusSplit],
    cfg: &TrainConfig,
) -> Result<(WordTokenizer, Vec<StageShard>)> {
    let bcfg = builder_config(cfg);
    let mut train_groups: Vec<(u8, usize, &[Timeline])> = Vec::new();
    let mut fit_groups: Vec<(u8, usize, &[Timeline])> = Vec::new();
    for sp in splits {
        if sp.dataset.is_training() {
            let (stage, _) = assign_stage(sp.dataset)?;
            let shots = cfg.stage(stage)?.shots;
            train_groups.push((stage, shots, &sp.train));
            fit_groups.push((stage, shots, &sp.train));
        } else {
            fit_groups.push((0, 1, &sp.train));
        }
        fit_groups.push((0, 1, &sp.test));
    }
    if train_groups.is_empty() {
        return Err(LiftError::EmptyShard);
    }
    train_groups.sort_by_key(|g| g.0);
    let tok = fit_tokenizer(&fit_groups, &bcfg, cfg.vocab_words)?;
    let shards = build_shards(&tok, &bcfg, &train_groups)?;
    Ok((tok, shards))
}

/// Encode shards and hold out whole timelines for validation.
pub fn stage_data(
    shards: &[StageShard],
    tok: &WordTokenizer,
    cfg: &TrainConfig,
) -> Result<BTreeMap<u8, StageData>> {
    let opts = EncodeOptions {
        fewshot_in_prompt_ce: cfg.fewshot_in_prompt_ce,
    };
    shards
        .iter()
        .map(|sh| {
            let enc = encode_examples(&sh.examples, tok, opts)?;
            Ok((sh.stage, split_validation(enc, cfg.val_fraction, cfg.seed)))
        })
        .collect()
}
