use super::*;
use crate::corpus::{synth, GlobalLabelSpace};
use crate::pipeline::{build_shards, encode_examples, fit_tokenizer, synthetic_builder_config};
use crate::tokenspace::{EncodeOptions, Tokenizer};

fn small_cfg() -> TrainConfig {
    TrainConfig {
        model_layers: 2,
        model_d: 32,
        model_heads: 2,
        model_ffn: 64,
        grad_accum: 4,
        ..TrainConfig::default()
    }
}

/// Encoded synthetic examples for `stages` (each from its own seed) plus the vocab size.
fn shards(
    stages: &[u8],
    timelines: usize,
    posts: usize,
) -> (BTreeMap<u8, Vec<EncodedExample>>, usize) {
    let bcfg = synthetic_builder_config(3, true);
    let tls: Vec<Vec<_>> = stages
        .iter()
        .map(|&s| synth::history_task(timelines, posts, 100 + s as u64))
        .collect();
    let groups: Vec<(u8, usize, &[crate::corpus::Timeline])> = stages
        .iter()
        .zip(&tls)
        .map(|(&s, t)| (s, 0, t.as_slice()))
        .collect();
    let tok = fit_tokenizer(&groups, &bcfg, 500).unwrap();
    let built = build_shards(&tok, &bcfg, &groups).unwrap();
    let mut out = BTreeMap::new();
    for sh in built {
        out.insert(
            sh.stage,
            encode_examples(&sh.examples, &tok, EncodeOptions::default()).unwrap(),
        );
    }
    (out, tok.vocab_size())
}

fn ctx(dir: &Path) -> RunContext {
    let labels = GlobalLabelSpace::standard();
    RunContext {
        run_dir: dir.to_path_buf(),
        label_space_hash: labels.hash(),
        n_labels: labels.len(),
    }
}

#[test]
fn lr_schedules() {
    assert_eq!(lr_at(LrSchedule::Constant, 5e-5, 7, 10, 0), 5e-5);
    assert_eq!(lr_at(LrSchedule::Cosine, 2e-4, 0, 10, 0), 2e-4);
    assert!((lr_at(LrSchedule::Cosine, 2e-4, 5, 10, 0) - 1e-4).abs() < 1e-18);
    assert!(lr_at(LrSchedule::Cosine, 2e-4, 9, 10, 0) < 1e-5);
    assert_eq!(lr_at(LrSchedule::Constant, 1.0, 0, 10, 4), 0.25);
}

#[test]
fn validation_split_holds_out_whole_timelines() {
    let (s, _) = shards(&[2], 20, 4);
    let data = split_validation(s[&2].clone(), 0.1, 7);
    let val_keys: std::collections::HashSet<_> = data.val.iter().map(|e| &e.sequence_key).collect();
    assert_eq!(val_keys.len(), 2);
    assert!(data
        .train
        .iter()
        .all(|e| !val_keys.contains(&e.sequence_key)));
    assert_eq!(data.train.len() + data.val.len(), 80);
    let again = split_validation(s[&2].clone(), 0.1, 7);
    assert_eq!(again.val, data.val);
}

fn one_stage(cfg: &TrainConfig, dir: &Path) -> (StageOutcome, String) {
    let (s, vocab) = shards(&[2], 40, 4);
    let data = split_validation(s[&2].clone(), 0.1, cfg.seed);
    assert_eq!(data.train.len(), 144);
    let c = ctx(dir);
    let mut model = init_model(cfg, vocab, c.n_labels).unwrap();
    let sched = cfg.stage(2).unwrap();
    model.adapters = Some(attach(&model.base, adapter_config(cfg, sched.rank), 1).unwrap());
    let out = run_stage(&mut model, &data, &sched, cfg, &c, None).unwrap();
    (out, model.trainable_hash().unwrap())
}

#[test]
fn stage_training_halves_loss_checkpoints_on_cadence_and_is_deterministic() {
    let cfg = TrainConfig {
        stage2_lr: 3e-3,
        ..small_cfg()
    };
    let d1 = tempfile::tempdir().unwrap();
    let d2 = tempfile::tempdir().unwrap();
    let (a, hash_a) = one_stage(&cfg, d1.path());
    let (b, hash_b) = one_stage(&cfg, d2.path());

    // 144 examples × 2 epochs / 4 = 72 steps; checkpoints at 25, 50 and the stage end.
    assert_eq!(a.steps, 72);
    let steps: Vec<usize> = a.checkpoints.iter().map(|c| c.step).collect();
    assert_eq!(steps, vec![25, 50, 72]);
    for c in &a.checkpoints {
        assert!(d1.path().join(&c.dir).join("params.safetensors").exists());
        assert!(c.val_loss.unwrap() >= a.best.val_loss.unwrap());
    }
    let first = a.metrics.first().unwrap().total;
    let last = a.metrics.last().unwrap().total;
    assert!(last < 0.5 * first, "loss {first} -> {last}");

    assert_eq!(a.best.val_loss, b.best.val_loss);
    assert_eq!(hash_a, hash_b);
    let lines = std::fs::read_to_string(d1.path().join("metrics.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 72);
    let m: StepMetrics = serde_json::from_str(lines.lines().nth(24).unwrap()).unwrap();
    assert_eq!((m.step, m.stage), (25, 2));
    assert!(m.val_loss.is_some());
}

#[test]
fn curriculum_grows_ranks_and_keeps_base_frozen() {
    let cfg = TrainConfig {
        epochs: 1,
        grad_accum: 8,
        checkpoint_every: 2,
        ..small_cfg()
    };
    let (s, vocab) = shards(&[1, 2, 3], 6, 4);
    let data: BTreeMap<u8, StageData> = s
        .into_iter()
        .map(|(k, v)| (k, split_validation(v, 0.2, 1)))
        .collect();
    let dir = tempfile::tempdir().unwrap();
    let c = ctx(dir.path());
    let mut model = init_model(&cfg, vocab, c.n_labels).unwrap();
    let out = run_curriculum(&mut model, &data, &cfg, &c, 1).unwrap();
    let ranks: Vec<usize> = out.stages.iter().map(|s| s.best.rank).collect();
    assert_eq!(ranks, vec![4, 8, 16]);
    let frozen: Vec<usize> = out
        .stages
        .iter()
        .map(|s| s.best.frozen_rank_prefix)
        .collect();
    assert_eq!(frozen, vec![0, 4, 8]);
    assert_eq!(out.stages[0].growth_logit_diff, None);
    for s in &out.stages[1..] {
        assert!(s.growth_logit_diff.unwrap() <= 1e-6);
    }
    assert_eq!(out.base_hash_before, out.base_hash_after);
    assert_eq!(
        out.stages[1].best.parent.as_ref(),
        Some(&out.stages[0].best.params_hash)
    );
    assert_eq!(
        out.stages[2].best.parent.as_ref(),
        Some(&out.stages[1].best.params_hash)
    );

    // Resuming at stage 3 from the saved stage-2 checkpoint works.
    let mut fresh = init_model(&cfg, vocab, c.n_labels).unwrap();
    let resumed = run_curriculum(&mut fresh, &data, &cfg, &c, 3).unwrap();
    assert_eq!(resumed.stages.len(), 1);
    assert_eq!(resumed.stages[0].best.rank, 16);
}

#[test]
fn missing_stage_inputs_are_reported() {
    let cfg = small_cfg();
    let dir = tempfile::tempdir().unwrap();
    let c = ctx(dir.path());
    let mut model = init_model(&cfg, 600, c.n_labels).unwrap();
    assert!(matches!(
        run_curriculum(&mut model, &BTreeMap::new(), &cfg, &c, 2),
        Err(LiftError::MissingStageShard(1))
    ));
    let (s, vocab) = shards(&[1], 3, 3);
    let mut model = init_model(&cfg, vocab, c.n_labels).unwrap();
    let only1 = BTreeMap::from([(1u8, split_validation(s[&1].clone(), 0.0, 0))]);
    assert!(matches!(
        run_curriculum(&mut model, &only1, &cfg, &c, 1),
        Err(LiftError::MissingStageShard(2))
    ));
}

#[test]
fn empty_shard_and_non_finite_loss() {
    let cfg = small_cfg();
    let dir = tempfile::tempdir().unwrap();
    let c = ctx(dir.path());
    let (s, vocab) = shards(&[1], 3, 3);
    let mut model = init_model(&cfg, vocab, c.n_labels).unwrap();
    model.adapters = Some(attach(&model.base, AdapterConfig::new(4), 0).unwrap());
    let sched = cfg.stage(1).unwrap();
    assert!(matches!(
        run_stage(&mut model, &StageData::default(), &sched, &cfg, &c, None),
        Err(LiftError::EmptyShard)
    ));
    let w = model.heads.global.weight.as_tensor().clone();
    model
        .heads
        .global
        .weight
        .set(&(w.ones_like().unwrap() * f64::NAN).unwrap())
        .unwrap();
    let data = split_validation(s[&1].clone(), 0.0, 0);
    match run_stage(&mut model, &data, &sched, &cfg, &c, None) {
        Err(LiftError::NonFiniteLoss {
            stage: 1,
            step: 0,
            dump,
        }) => assert!(dump.unwrap().exists()),
        other => panic!("expected NonFiniteLoss, got {:?}", other.err()),
    }
}

#[test]
fn checkpoints_reload_only_onto_their_base() {
    let cfg = TrainConfig {
        epochs: 1,
        grad_accum: 100,
        ..small_cfg()
    };
    let (s, vocab) = shards(&[2], 4, 3);
    let data = split_validation(s[&2].clone(), 0.0, cfg.seed);
    let dir = tempfile::tempdir().unwrap();
    let c = ctx(dir.path());
    let mut model = init_model(&cfg, vocab, c.n_labels).unwrap();
    let sched = cfg.stage(2).unwrap();
    model.adapters = Some(attach(&model.base, adapter_config(&cfg, sched.rank), 1).unwrap());
    let out = run_stage(&mut model, &data, &sched, &cfg, &c, None).unwrap();
    let ckpt = dir.path().join(&out.best.dir);

    let mut same = init_model(&cfg, vocab, c.n_labels).unwrap();
    load_checkpoint(&mut same, &ckpt).unwrap();
    assert_eq!(
        same.trainable_hash().unwrap(),
        model.trainable_hash().unwrap()
    );

    let other_cfg = TrainConfig {
        seed: cfg.seed + 1,
        ..cfg
    };
    let mut other = init_model(&other_cfg, vocab, c.n_labels).unwrap();
    assert!(matches!(
        load_checkpoint(&mut other, &ckpt),
        Err(LiftError::CheckpointMismatch {
            field: "base_hash",
            ..
        })
    ));
}
