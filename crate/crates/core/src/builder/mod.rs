//! Curriculum construction: rolling histories, budget truncation, stage
//! assignment, demonstration sampling and prompt rendering.

mod render;
pub mod templates;

use std::collections::{BTreeMap, HashMap};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use render::{
    neutralize, render, uncovered_residue, Demo, HistoryLine, PromptParts, Rendered, Span, Spans,
};

use crate::corpus::{DatasetId, Timeline};
use crate::error::{LiftError, Result};
use crate::tokenspace::Tokenizer;

pub const DEFAULT_MAX_TOKENS: usize = 2048;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    Cosine,
    Constant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurriculumStage {
    pub stage: u8,
    pub dataset: DatasetId,
    pub shots: usize,
    pub rank: usize,
    pub lr: f64,
    pub schedule: LrSchedule,
}

impl CurriculumStage {
    pub fn defaults() -> [CurriculumStage; 3] {
        [
            CurriculumStage {
                stage: 1,
                dataset: DatasetId::Annomi,
                shots: 1,
                rank: 4,
                lr: 2e-4,
                schedule: LrSchedule::Cosine,
            },
            CurriculumStage {
                stage: 2,
                dataset: DatasetId::Lrs,
                shots: 2,
                rank: 8,
                lr: 1e-4,
                schedule: LrSchedule::Cosine,
            },
            CurriculumStage {
                stage: 3,
                dataset: DatasetId::Talklife,
                shots: 3,
                rank: 16,
                lr: 5e-5,
                schedule: LrSchedule::Constant,
            },
        ]
    }
}

/// `(stage, shots)` for a training dataset.
pub fn assign_stage(dataset: DatasetId) -> Result<(u8, usize)> {
    CurriculumStage::defaults()
        .iter()
        .find(|s| s.dataset == dataset)
        .map(|s| (s.stage, s.shots))
        .ok_or(LiftError::NotACurriculumDataset(dataset))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptExample {
    pub stage: u8,
    pub dataset: DatasetId,
    pub sequence_key: String,
    pub k_requested: usize,
    pub k_actual: usize,
    pub instruction_text: String,
    pub demo_texts: Vec<String>,
    pub history_lines: Vec<HistoryLine>,
    pub current_text: String,
    pub response_text: String,
    pub prompt: String,
    pub spans: Spans,
    pub hist_line_spans: Vec<(usize, Span)>,
    pub global_label_id: u32,
    pub timestep_id: usize,
    /// Rendering switch for history labels, kept so re-rendering is faithful.
    #[serde(default = "yes")]
    pub history_labels: bool,
}

fn yes() -> bool {
    true
}

impl PromptExample {
    /// `prompt ⊕ " " ⊕ response`, the text all spans index into.
    pub fn full_text(&self) -> String {
        format!("{} {}", self.prompt, self.response_text)
    }

    pub(crate) fn rerender(&mut self) {
        let lines: Vec<String> = self
            .history_lines
            .iter()
            .map(|l| l.render(self.history_labels))
            .collect();
        let rels: Vec<usize> = self.history_lines.iter().map(|l| l.rel).collect();
        let r = render(
            &PromptParts {
                instruction: &self.instruction_text,
                demos: &self.demo_texts,
                history: &lines,
                current: &self.current_text,
                response: &self.response_text,
            },
            &rels,
        );
        self.prompt = r.prompt;
        self.spans = r.spans;
        self.hist_line_spans = r.hist_lines;
        self.k_actual = self.demo_texts.len();
    }

    /// Copy with a different response string.
    pub fn with_response(&self, response: &str) -> PromptExample {
        let mut e = self.clone();
        e.response_text = response.to_string();
        e.rerender();
        e
    }

    /// Tokens of the encoded sequence `prompt ⊕ response ⊕ [eos]`.
    pub fn sequence_len(&self, tok: &impl Tokenizer) -> usize {
        tok.count(&self.prompt) + tok.count(&self.response_text) + 1
    }
}

/// Items `[0, index)` of the timeline as history lines, newest last, with
/// relative indices `t-index … t-1`.
pub fn build_history(timeline: &Timeline, index: usize) -> Result<Vec<HistoryLine>> {
    if index >= timeline.len() {
        return Err(LiftError::IndexOutOfRange {
            index,
            len: timeline.len(),
        });
    }
    Ok(timeline.items[..index]
        .iter()
        .enumerate()
        .map(|(i, it)| HistoryLine {
            rel: index - i,
            text: it.text.clone(),
            label: it.is_labeled().then(|| it.local_label.clone()),
            role: it.speaker_role.clone(),
        })
        .collect())
}

/// Longest suffix of `history` with
/// `len(header) + Σ len(line) + len(current) ≤ budget`, dropping oldest first.
///
/// `token_len` must be additive over whitespace-joined strings (true for
/// every tokenizer whose tokens never span whitespace).
pub fn truncate_to_budget<'h, S: AsRef<str>>(
    header: &str,
    history: &'h [S],
    current: &str,
    budget: usize,
    token_len: impl Fn(&str) -> usize,
) -> Result<&'h [S]> {
    let fixed = token_len(header) + token_len(current);
    if fixed > budget {
        return Err(LiftError::BudgetTooSmall {
            needed: fixed,
            budget,
        });
    }
    let costs: Vec<usize> = history.iter().map(|h| token_len(h.as_ref())).collect();
    let mut total = fixed + costs.iter().sum::<usize>();
    let mut start = 0;
    while total > budget {
        total -= costs[start];
        start += 1;
    }
    Ok(&history[start..])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DemoSampling {
    #[default]
    Uniform,
    Stratified,
}

/// Up to `k` demos from `pool`, none from `exclude_sequence_key`.
/// Uniform sampling without replacement; the result is in sampling order.
pub fn sample_demos(
    pool: &[Demo],
    k: usize,
    seed: u64,
    exclude_sequence_key: &str,
    mode: DemoSampling,
) -> Vec<Demo> {
    if k == 0 {
        return Vec::new();
    }
    let eligible: Vec<&Demo> = pool
        .iter()
        .filter(|d| d.sequence_key != exclude_sequence_key)
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match mode {
        DemoSampling::Uniform => eligible
            .choose_multiple(&mut rng, k)
            .map(|d| (*d).clone())
            .collect(),
        DemoSampling::Stratified => {
            let mut by_class: BTreeMap<u32, Vec<&Demo>> = BTreeMap::new();
            for d in eligible {
                by_class.entry(d.global_label_id).or_default().push(d);
            }
            for v in by_class.values_mut() {
                v.shuffle(&mut rng);
            }
            let mut classes: Vec<u32> = by_class.keys().copied().collect();
            classes.shuffle(&mut rng);
            let mut out = Vec::with_capacity(k);
            let mut round = 0;
            while out.len() < k {
                let mut took = false;
                for c in &classes {
                    if let Some(d) = by_class[c].get(round) {
                        out.push((*d).clone());
                        took = true;
                        if out.len() == k {
                            break;
                        }
                    }
                }
                if !took {
                    break;
                }
                round += 1;
            }
            out
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum FitOutcome {
    Kept(PromptExample),
    Dropped,
}

/// Remove demos (most recently sampled first) until the example fits.
pub fn fit_demos(mut example: PromptExample, budget: usize, tok: &impl Tokenizer) -> FitOutcome {
    while example.sequence_len(tok) > budget && !example.demo_texts.is_empty() {
        example.demo_texts.pop();
        example.rerender();
    }
    if example.sequence_len(tok) <= budget {
        FitOutcome::Kept(example)
    } else {
        FitOutcome::Dropped
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuilderConfig {
    pub budget: usize,
    pub seed: u64,
    pub history_labels: bool,
    /// Off renders every query with an empty history (ablation).
    pub include_history: bool,
    pub demo_sampling: DemoSampling,
    /// Items of context shown before each demo's labeled target.
    pub demo_context: usize,
    pub nested_demo_hist: bool,
    /// Replaces the dataset instruction (used by the synthetic task).
    pub instruction_override: Option<String>,
}

impl Default for BuilderConfig {
    fn default() -> Self {
        Self {
            budget: DEFAULT_MAX_TOKENS,
            seed: 17,
            history_labels: true,
            include_history: true,
            demo_sampling: DemoSampling::Uniform,
            demo_context: 3,
            nested_demo_hist: false,
            instruction_override: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageBuildStats {
    pub stage: u8,
    pub dataset: Option<DatasetId>,
    pub examples: usize,
    pub dropped: usize,
    pub truncated_histories: usize,
    pub demos_removed: usize,
    pub mean_tokens: f64,
    pub max_tokens: usize,
    pub k_histogram: BTreeMap<usize, usize>,
}

/// Turns timelines into rendered prompt examples.
pub struct PromptBuilder<'t, T: Tokenizer> {
    pub tok: &'t T,
    pub cfg: BuilderConfig,
}

/// Derive a sub-seed from a base seed, a string key and an index; stable across builds.
pub fn mix_seed(seed: u64, key: &str, index: usize) -> u64 {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(key.as_bytes());
    h.update((index as u64).to_le_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("digest has 8 bytes"))
}

impl<'t, T: Tokenizer> PromptBuilder<'t, T> {
    pub fn new(tok: &'t T, cfg: BuilderConfig) -> Self {
        Self { tok, cfg }
    }

    /// Every labeled item of `timelines` as a demonstration window.
    pub fn demo_pool(&self, timelines: &[Timeline]) -> Vec<Demo> {
        timelines
            .iter()
            .flat_map(|tl| {
                tl.items
                    .iter()
                    .enumerate()
                    .filter(|(_, it)| it.is_labeled())
                    .map(|(i, _)| Demo::from_window(&tl.items, i, self.cfg.demo_context))
            })
            .collect()
    }

    fn instruction(&self, dataset: DatasetId) -> String {
        self.cfg
            .instruction_override
            .clone()
            .unwrap_or_else(|| templates::instruction(dataset).trim().to_string())
    }

    fn render_demos(&self, dataset: DatasetId, demos: &[Demo]) -> Vec<String> {
        demos
            .iter()
            .enumerate()
            .map(|(i, d)| {
                let heading = if demos.len() == 1 {
                    "Example Timeline:".to_string()
                } else {
                    format!("Example {}:", i + 1)
                };
                d.render(dataset, &heading, self.cfg.nested_demo_hist)
            })
            .collect()
    }

    /// Render the example for `timeline.items[index]` with the given demos,
    /// truncating history to the budget first.
    ///
    /// Returns `Ok(None)` when the example cannot fit even without history and
    /// demos; the second value reports whether history was truncated.
    pub fn build_example(
        &self,
        stage: u8,
        timeline: &Timeline,
        index: usize,
        k_requested: usize,
        demos: &[Demo],
    ) -> Result<Option<(PromptExample, bool)>> {
        let item = &timeline.items[index];
        let dataset = timeline.dataset_id;
        let instruction_text = self.instruction(dataset);
        let mut history = if self.cfg.include_history {
            build_history(timeline, index)?
        } else {
            Vec::new()
        };
        let rendered_lines: Vec<String> = history
            .iter()
            .map(|l| l.render(self.cfg.history_labels))
            .collect();
        // Everything except the history lines, demos excluded.
        let skeleton = render(
            &PromptParts {
                instruction: &instruction_text,
                demos: &[],
                history: &[],
                current: &item.text,
                response: &item.local_label,
            },
            &[],
        );
        let header = format!("{} {}", skeleton.prompt, item.local_label);
        // One slot is reserved for [eos].
        let budget = self.cfg.budget.saturating_sub(1);
        let kept =
            match truncate_to_budget(&header, &rendered_lines, "", budget, |s| self.tok.count(s)) {
                Ok(kept) => kept.len(),
                Err(LiftError::BudgetTooSmall { .. }) => return Ok(None),
                Err(e) => return Err(e),
            };
        let truncated = kept < history.len();
        history.drain(..history.len() - kept);

        let mut example = PromptExample {
            stage,
            dataset,
            sequence_key: timeline.sequence_key.clone(),
            k_requested,
            k_actual: demos.len(),
            instruction_text,
            demo_texts: self.render_demos(dataset, demos),
            history_lines: history,
            current_text: item.text.clone(),
            response_text: item.local_label.clone(),
            prompt: String::new(),
            spans: Spans {
                instruction: Span { start: 0, end: 0 },
                fewshot: Span { start: 0, end: 0 },
                hist: Span { start: 0, end: 0 },
                curr: Span { start: 0, end: 0 },
                output: Span { start: 0, end: 0 },
            },
            hist_line_spans: Vec::new(),
            global_label_id: item.global_label_id,
            timestep_id: item.index_in_timeline,
            history_labels: self.cfg.history_labels,
        };
        example.rerender();
        match fit_demos(example, self.cfg.budget, self.tok) {
            FitOutcome::Kept(e) => Ok(Some((e, truncated))),
            FitOutcome::Dropped => Ok(None),
        }
    }

    /// Build all examples for one stage from its training timelines.
    pub fn build_stage(
        &self,
        stage: u8,
        shots: usize,
        timelines: &[Timeline],
    ) -> Result<(Vec<PromptExample>, StageBuildStats)> {
        let pool = self.demo_pool(timelines);
        let mut stats = StageBuildStats {
            stage,
            dataset: timelines.first().map(|t| t.dataset_id),
            ..Default::default()
        };
        let mut out = Vec::new();
        let mut token_sum = 0usize;
        for tl in timelines {
            for (i, item) in tl.items.iter().enumerate() {
                if !item.is_labeled() {
                    continue;
                }
                let demos = sample_demos(
                    &pool,
                    shots,
                    mix_seed(self.cfg.seed, &tl.sequence_key, i),
                    &tl.sequence_key,
                    self.cfg.demo_sampling,
                );
                match self.build_example(stage, tl, i, shots, &demos)? {
                    Some((ex, truncated)) => {
                        let len = ex.sequence_len(self.tok);
                        token_sum += len;
                        stats.max_tokens = stats.max_tokens.max(len);
                        stats.truncated_histories += truncated as usize;
                        stats.demos_removed += demos.len() - ex.k_actual;
                        *stats.k_histogram.entry(ex.k_actual).or_default() += 1;
                        out.push(ex);
                    }
                    None => stats.dropped += 1,
                }
            }
        }
        stats.examples = out.len();
        stats.mean_tokens = token_sum as f64 / out.len().max(1) as f64;
        Ok((out, stats))
    }
}

/// Timeline-level split: a seeded shuffle of sequence keys, the first
/// `test_fraction` of them held out.
pub fn split_timelines(
    timelines: &[Timeline],
    test_fraction: f64,
    seed: u64,
) -> (Vec<Timeline>, Vec<Timeline>) {
    let mut keys: Vec<&str> = timelines.iter().map(|t| t.sequence_key.as_str()).collect();
    keys.sort_unstable();
    keys.dedup();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    keys.shuffle(&mut rng);
    let n_test = ((keys.len() as f64) * test_fraction).round() as usize;
    let test: HashMap<&str, ()> = keys[..n_test].iter().map(|k| (*k, ())).collect();
    let (mut train, mut held) = (Vec::new(), Vec::new());
    for tl in timelines {
        if test.contains_key(tl.sequence_key.as_str()) {
            held.push(tl.clone());
        } else {
            train.push(tl.clone());
        }
    }
    (train, held)
}
