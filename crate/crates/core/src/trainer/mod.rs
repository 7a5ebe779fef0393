//! Sequential stage training with per-stage schedules, validation and
//! checkpointing.

mod config;
mod optim;

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::{Device, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use config::TrainConfig;
pub use optim::{clip_grad_norm, global_norm, AdamW, AdamWConfig};

use crate::adapters::{attach, AdapterConfig, AdapterSet};
use crate::builder::{mix_seed, CurriculumStage, LrSchedule};
use crate::conditioning::{Conditioning, ConditioningConfig};
use crate::error::{LiftError, Result};
use crate::model::{LiftModel, RunOptions};
use crate::objectives::{inverse_frequency_weights, total_loss, Heads, LossWeights, TermValues};
use crate::tensors::to_f64_vec;
use crate::tokenspace::EncodedExample;
use crate::toylm::{LanguageModel, ToyLm, ToyLmConfig};

/// Fresh model: seeded toy LM, conditioning (if enabled) and heads; no adapters yet.
pub fn init_model(cfg: &TrainConfig, vocab: usize, n_labels: usize) -> Result<LiftModel<ToyLm>> {
    let lm_cfg = ToyLmConfig {
        layers: cfg.model_layers,
        d_model: cfg.model_d,
        heads: cfg.model_heads,
        ffn: cfg.model_ffn,
        ..ToyLmConfig::new(vocab, cfg.seed)
    };
    let base = ToyLm::new(lm_cfg)?;
    let dtype = base.dtype();
    let conditioning = if cfg.conditioning {
        Some(Conditioning::new(
            ConditioningConfig::new(cfg.model_d, n_labels),
            mix_seed(cfg.seed, "conditioning", 0),
            dtype,
        )?)
    } else {
        None
    };
    let heads = Heads::new(
        cfg.model_d,
        n_labels,
        cfg.separate_history_head,
        mix_seed(cfg.seed, "heads", 0),
        dtype,
    )?;
    Ok(LiftModel {
        base,
        adapters: None,
        conditioning,
        heads,
    })
}

/// Training and validation examples of one stage.
#[derive(Debug, Clone, Default)]
pub struct StageData {
    pub train: Vec<EncodedExample>,
    pub val: Vec<EncodedExample>,
}

/// Hold out whole timelines (by sequence key) for validation.
pub fn split_validation(examples: Vec<EncodedExample>, fraction: f64, seed: u64) -> StageData {
    let mut keys: Vec<String> = examples.iter().map(|e| e.sequence_key.clone()).collect();
    keys.sort();
    keys.dedup();
    keys.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut n_val = ((keys.len() as f64) * fraction).round() as usize;
    if fraction > 0.0 && n_val == 0 && keys.len() > 1 {
        n_val = 1;
    }
    let val_keys: std::collections::HashSet<&str> =
        keys[..n_val].iter().map(|s| s.as_str()).collect();
    let (val, train) = examples
        .into_iter()
        .partition(|e| val_keys.contains(e.sequence_key.as_str()));
    StageData { train, val }
}

/// Learning rate before optimizer step `step` (0-based) of `total`.
pub fn lr_at(schedule: LrSchedule, base: f64, step: usize, total: usize, warmup: usize) -> f64 {
    if step < warmup {
        return base * (step + 1) as f64 / warmup as f64;
    }
    match schedule {
        LrSchedule::Constant => base,
        LrSchedule::Cosine => {
            let span = total.saturating_sub(warmup).max(1) as f64;
            let progress = (step - warmup) as f64 / span;
            base * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub stage: u8,
    pub step: usize,
    pub rank: usize,
    pub alpha: f64,
    pub lora_dropout: f64,
    pub frozen_rank_prefix: usize,
    pub label_space_hash: String,
    pub base_hash: String,
    pub params_hash: String,
    pub parent: Option<String>,
    pub val_loss: Option<f64>,
    pub lr: f64,
    pub schedule: LrSchedule,
    pub dropout_seed: u64,
    /// Word position of the dropout RNG stream, as a decimal string.
    pub dropout_word_pos: String,
    /// Directory relative to the run root.
    pub dir: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub stage: u8,
    pub ce: f64,
    pub focal_lm: f64,
    pub focal_cls: f64,
    pub hist_cls: f64,
    pub total: f64,
    pub lr: f64,
    pub grad_norm: f64,
    pub hist_skipped: usize,
    pub ce_empty: usize,
    pub val_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageOutcome {
    pub schedule: CurriculumStage,
    pub grad_accum: usize,
    pub grad_clip: f64,
    pub epochs: usize,
    pub steps: usize,
    pub checkpoints: Vec<CheckpointMeta>,
    pub best: CheckpointMeta,
    pub metrics: Vec<StepMetrics>,
    /// Max abs logit change on a probe example across the rank growth before this stage.
    pub growth_logit_diff: Option<f64>,
}

/// Where a run writes checkpoints and metrics.
#[derive(Debug, Clone)]
pub struct RunContext {
    pub run_dir: PathBuf,
    pub label_space_hash: String,
    pub n_labels: usize,
}

impl RunContext {
    fn metrics_path(&self) -> PathBuf {
        self.run_dir.join("metrics.jsonl")
    }
}

/// Mean total loss over `examples` without dropout.
pub fn validation_loss<M: LanguageModel>(
    model: &LiftModel<M>,
    examples: &[EncodedExample],
    w: &LossWeights,
) -> Result<Option<f64>> {
    if examples.is_empty() {
        return Ok(None);
    }
    let mut sum = 0.0;
    for e in examples {
        let (terms, _) = model.loss_terms(e, w, None)?;
        sum += terms.values(&total_loss(&terms, w)?)?.total;
    }
    Ok(Some(sum / examples.len() as f64))
}

fn adapter_config(cfg: &TrainConfig, rank: usize) -> AdapterConfig {
    AdapterConfig {
        dropout: cfg.lora_dropout,
        ..AdapterConfig::new(rank)
    }
}

fn save_checkpoint<M: LanguageModel>(
    model: &LiftModel<M>,
    meta: &CheckpointMeta,
    ctx: &RunContext,
) -> Result<()> {
    let dir = ctx.run_dir.join(&meta.dir);
    std::fs::create_dir_all(&dir).map_err(|e| LiftError::io(&dir, e))?;
    candle_core::safetensors::save(&model.trainable_tensors(), dir.join("params.safetensors"))?;
    crate::corpus::write_json(&dir.join("meta.json"), meta)
}

/// Load a checkpoint directory (containing `meta.json` and `params.safetensors`) into `model`.
pub fn load_checkpoint<M: LanguageModel>(
    model: &mut LiftModel<M>,
    dir: &Path,
) -> Result<CheckpointMeta> {
    let meta: CheckpointMeta = crate::corpus::read_json(&dir.join("meta.json"))?;
    let base = model.base.weights_hash()?;
    if meta.base_hash != base {
        return Err(LiftError::CheckpointMismatch {
            field: "base_hash",
            found: meta.base_hash,
            expected: base,
        });
    }
    let map: HashMap<String, Tensor> =
        candle_core::safetensors::load(dir.join("params.safetensors"), &Device::Cpu)?;
    let acfg = AdapterConfig {
        rank: meta.rank,
        alpha: Some(meta.alpha),
        dropout: meta.lora_dropout,
        frozen_rank_prefix: meta.frozen_rank_prefix,
        ..AdapterConfig::new(meta.rank)
    };
    model.adapters = Some(AdapterSet::from_tensors(acfg, &map)?.to_dtype(model.base.dtype())?);
    model.load_non_adapter(&map)?;
    Ok(meta)
}

fn append_metrics(path: &Path, m: &StepMetrics) -> Result<()> {
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| LiftError::io(path, e))?;
    writeln!(f, "{}", serde_json::to_string(m)?).map_err(|e| LiftError::io(path, e))
}

/// Train one stage: `epochs` passes with gradient accumulation, clipping and
/// periodic checkpoints; leaves the lowest-validation-loss checkpoint loaded.
pub fn run_stage<M: LanguageModel>(
    model: &mut LiftModel<M>,
    data: &StageData,
    sched: &CurriculumStage,
    cfg: &TrainConfig,
    ctx: &RunContext,
    parent: Option<String>,
) -> Result<StageOutcome> {
    if data.train.is_empty() {
        return Err(LiftError::EmptyShard);
    }
    let adapters = model.adapters.as_ref().ok_or(LiftError::NoTargetsFound)?;
    let (rank, alpha, frozen) = (
        adapters.rank(),
        adapters.config().alpha(),
        adapters.frozen_rank_prefix(),
    );
    let stage = sched.stage;
    let mut w = cfg.loss_weights();
    if cfg.class_weighting {
        let labels: Vec<u32> = data.train.iter().map(|e| e.global_label_id).collect();
        w.class_weights = Some(inverse_frequency_weights(&labels, ctx.n_labels));
    }
    let vars = model.trainable_vars();
    let masks = model.grad_masks()?;
    let mut opt = AdamW::new(
        vars.clone(),
        AdamWConfig {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            weight_decay: cfg.weight_decay,
        },
    )?;
    let n = data.train.len();
    let micro_total = cfg.epochs * n;
    let total_steps = micro_total.div_ceil(cfg.grad_accum);
    let mut order_rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, "order", stage as usize));
    let dropout_seed = mix_seed(cfg.seed, "dropout", stage as usize);
    let mut dropout_rng = Some(ChaCha8Rng::seed_from_u64(dropout_seed));
    let base_hash = model.base.weights_hash()?;
    let stage_dir = format!("stage{stage}");

    let mut acc: BTreeMap<String, Tensor> = BTreeMap::new();
    let mut acc_n = 0usize;
    let mut acc_vals = TermValues::default();
    let mut acc_skips = (0usize, 0usize);
    let mut step = 0usize;
    let mut micro = 0usize;
    let mut checkpoints = Vec::new();
    let mut metrics = Vec::new();

    for _epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut order_rng);
        for idx in order {
            let ex = &data.train[idx];
            let (terms, run) = model.loss_terms(ex, &w, dropout_rng.take())?;
            dropout_rng = run.dropout_rng;
            let total = match total_loss(&terms, &w) {
                Ok(t) => t,
                Err(LiftError::NonFinite(what)) => {
                    let dump = ctx.run_dir.join(&stage_dir).join("nonfinite.json");
                    crate::corpus::write_json(
                        &dump,
                        &serde_json::json!({
                            "stage": stage, "step": step, "sequence_key": ex.sequence_key,
                            "timestep_id": ex.timestep_id, "term": what,
                        }),
                    )?;
                    return Err(LiftError::NonFiniteLoss {
                        stage,
                        step,
                        dump: Some(dump),
                    });
                }
                Err(e) => return Err(e),
            };
            let v = terms.values(&total)?;
            acc_vals.ce += v.ce;
            acc_vals.focal_lm += v.focal_lm;
            acc_vals.focal_cls += v.focal_cls;
            acc_vals.hist_cls += v.hist_cls;
            acc_vals.total += v.total;
            acc_skips.0 += terms.hist_skipped as usize;
            acc_skips.1 += terms.ce_empty as usize;
            let grads = total.backward()?;
            for (name, var) in &vars {
                if let Some(g) = grads.get(var.as_tensor()) {
                    let g = g.detach();
                    let next = match acc.remove(name) {
                        Some(prev) => (prev + g)?,
                        None => g,
                    };
                    acc.insert(name.clone(), next);
                }
            }
            acc_n += 1;
            micro += 1;
            if acc_n < cfg.grad_accum && micro < micro_total {
                continue;
            }
            // Optimizer step on the mean gradient of the accumulated micro-batches.
            let mut grads: BTreeMap<String, Tensor> = BTreeMap::new();
            for (k, g) in std::mem::take(&mut acc) {
                grads.insert(k, (g / acc_n as f64)?);
            }
            for (k, m) in &masks {
                if let Some(g) = grads.get_mut(k) {
                    *g = (&*g * m)?;
                }
            }
            let grad_norm = clip_grad_norm(&mut grads, cfg.grad_clip)?;
            let lr = lr_at(
                sched.schedule,
                sched.lr,
                step,
                total_steps,
                cfg.warmup_steps,
            );
            opt.step(&grads, lr, &masks)?;
            step += 1;
            let k = acc_n as f64;
            let mut m = StepMetrics {
                step,
                stage,
                ce: acc_vals.ce / k,
                focal_lm: acc_vals.focal_lm / k,
                focal_cls: acc_vals.focal_cls / k,
                hist_cls: acc_vals.hist_cls / k,
                total: acc_vals.total / k,
                lr,
                grad_norm,
                hist_skipped: acc_skips.0,
                ce_empty: acc_skips.1,
                val_loss: None,
            };
            acc_n = 0;
            acc_vals = TermValues::default();
            acc_skips = (0, 0);
            if step % cfg.checkpoint_every == 0 || step == total_steps {
                let val_loss = validation_loss(model, &data.val, &w)?;
                m.val_loss = val_loss;
                let meta = CheckpointMeta {
                    stage,
                    step,
                    rank,
                    alpha,
                    lora_dropout: cfg.lora_dropout,
                    frozen_rank_prefix: frozen,
                    label_space_hash: ctx.label_space_hash.clone(),
                    base_hash: base_hash.clone(),
                    params_hash: model.trainable_hash()?,
                    parent: parent.clone(),
                    val_loss,
                    lr,
                    schedule: sched.schedule,
                    dropout_seed,
                    dropout_word_pos: dropout_rng
                        .as_ref()
                        .map(|r| r.get_word_pos())
                        .unwrap_or(0)
                        .to_string(),
                    dir: format!("{stage_dir}/step{step}"),
                };
                save_checkpoint(model, &meta, ctx)?;
                checkpoints.push(meta);
            }
            append_metrics(&ctx.metrics_path(), &m)?;
            metrics.push(m);
        }
    }

    // Lowest validation loss wins; the earliest checkpoint breaks ties. Without a
    // validation split the final checkpoint is kept.
    let best = checkpoints
        .iter()
        .filter(|c| c.val_loss.is_some())
        .min_by(|a, b| {
            a.val_loss
                .partial_cmp(&b.val_loss)
                .expect("finite val loss")
        })
        .or(checkpoints.last())
        .cloned()
        .expect("at least one checkpoint per stage");
    load_checkpoint(model, &ctx.run_dir.join(&best.dir))?;
    crate::corpus::write_json(&ctx.run_dir.join(&stage_dir).join("best.json"), &best)?;
    Ok(StageOutcome {
        schedule: sched.clone(),
        grad_accum: cfg.grad_accum,
        grad_clip: cfg.grad_clip,
        epochs: cfg.epochs,
        steps: step,
        checkpoints,
        best,
        metrics,
        growth_logit_diff: None,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurriculumOutcome {
    pub stages: Vec<StageOutcome>,
    pub base_hash_before: String,
    pub base_hash_after: String,
}

fn probe_logits<M: LanguageModel>(model: &LiftModel<M>, ex: &EncodedExample) -> Result<Vec<f64>> {
    let run = model.run(
        ex,
        RunOptions {
            stamps: true,
            ..Default::default()
        },
    )?;
    to_f64_vec(&run.out.logits)
}

/// Attach, or grow, the adapters for `sched.rank`. Returns the max abs logit
/// change on `probe` caused by a growth.
fn prepare_adapters<M: LanguageModel>(
    model: &mut LiftModel<M>,
    sched: &CurriculumStage,
    cfg: &TrainConfig,
    probe: &EncodedExample,
) -> Result<Option<f64>> {
    let seed = mix_seed(cfg.seed, "adapters", sched.stage as usize);
    match &model.adapters {
        None => {
            model.adapters = Some(attach(&model.base, adapter_config(cfg, sched.rank), seed)?);
            Ok(None)
        }
        Some(a) if a.rank() == sched.rank => Ok(None),
        Some(a) => {
            let grown = a.grow_rank(sched.rank, seed)?;
            let before = probe_logits(model, probe)?;
            model.adapters = Some(grown);
            let after = probe_logits(model, probe)?;
            Ok(Some(
                before
                    .iter()
                    .zip(&after)
                    .map(|(x, y)| (x - y).abs())
                    .fold(0.0, f64::max),
            ))
        }
    }
}

/// Run stages `start..=3` in order, growing adapter rank between stages.
/// Starting after stage 1 requires the previous stage's best checkpoint in `ctx.run_dir`.
pub fn run_curriculum<M: LanguageModel>(
    model: &mut LiftModel<M>,
    shards: &BTreeMap<u8, StageData>,
    cfg: &TrainConfig,
    ctx: &RunContext,
    start: u8,
) -> Result<CurriculumOutcome> {
    let base_hash_before = model.base.weights_hash()?;
    let mut parent = None;
    if start > 1 {
        let prev = ctx
            .run_dir
            .join(format!("stage{}", start - 1))
            .join("best.json");
        if !prev.exists() {
            return Err(LiftError::MissingStageShard(start - 1));
        }
        let best: CheckpointMeta = crate::corpus::read_json(&prev)?;
        load_checkpoint(model, &ctx.run_dir.join(&best.dir))?;
        parent = Some(best.params_hash);
    }
    for k in start..=3 {
        if !shards.contains_key(&k) {
            return Err(LiftError::MissingStageShard(k));
        }
    }
    let mut stages = Vec::new();
    for k in start..=3 {
        let data = &shards[&k];
        let sched = cfg.stage(k)?;
        let probe = data.train.first().ok_or(LiftError::EmptyShard)?;
        let growth = prepare_adapters(model, &sched, cfg, probe)?;
        let mut outcome = run_stage(model, data, &sched, cfg, ctx, parent.clone())?;
        outcome.growth_logit_diff = growth;
        parent = Some(outcome.best.params_hash.clone());
        stages.push(outcome);
    }
    let out = CurriculumOutcome {
        stages,
        base_hash_before,
        base_hash_after: model.base.weights_hash()?,
    };
    crate::corpus::write_json(&ctx.run_dir.join("curriculum.json"), &out)?;
    Ok(out)
}

#[cfg(test)]
mod tests;
