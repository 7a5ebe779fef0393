use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::*;
use crate::builder::BuilderConfig;
use crate::corpus::{synth, DatasetId, Timeline};
use crate::evalharness::{build_eval_prompts, EvalOptions, EvalPrompt};
use crate::pipeline::{fit_tokenizer, synthetic_builder_config};
use crate::tokenspace::{encode_with_spans, EncodeOptions, Tokenizer, WordTokenizer};
use crate::trainer::{init_model, TrainConfig};

fn rand_rows(rng: &mut ChaCha8Rng, l: usize, d: usize) -> Vec<Vec<f64>> {
    (0..l)
        .map(|_| (0..d).map(|_| StandardNormal.sample(&mut *rng)).collect())
        .collect()
}

#[test]
fn region_means_match_explicit_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    use Region::*;
    let regions = [
        Instruction,
        Instruction,
        Fewshot,
        Hist,
        Hist,
        Hist,
        Curr,
        Curr,
        Other,
    ];
    let hidden: Vec<_> = (0..3)
        .map(|_| rand_rows(&mut rng, regions.len(), 8))
        .collect();
    let reps = reps_from_hidden(&hidden, &regions, &[0, 2]).unwrap();
    assert!(reps.has_hist && reps.has_fewshot && reps.has_curr);
    for lr in &reps.layers {
        let rows = &hidden[lr.layer];
        // Explicit oracle via candle row selection and mean.
        let t = candle_core::Tensor::new(rows.clone(), &candle_core::Device::Cpu).unwrap();
        let idx = candle_core::Tensor::new(&[3u32, 4, 5], &candle_core::Device::Cpu).unwrap();
        let want: Vec<f64> = t
            .index_select(&idx, 0)
            .unwrap()
            .mean(0)
            .unwrap()
            .to_vec1()
            .unwrap();
        for (a, b) in lr.hist_mean.iter().zip(&want) {
            assert!((a - b).abs() < 1e-6);
        }
        assert_eq!(lr.last_curr, rows[7]);
        assert_eq!(lr.fewshot_mean, rows[2]);
    }
}

#[test]
fn absent_regions_are_zero_and_flagged() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let regions = [Region::Instruction, Region::Hist, Region::Curr];
    let hidden = vec![rand_rows(&mut rng, 3, 4)];
    let reps = reps_from_hidden(&hidden, &regions, &[0]).unwrap();
    assert!(!reps.has_fewshot);
    assert_eq!(reps.layers[0].fewshot_mean, vec![0.0; 4]);
    assert_eq!(reps.layers[0].hist_mean, hidden[0][1]);
    assert!(matches!(
        reps_from_hidden(&hidden, &regions, &[1]),
        Err(LiftError::LayerOutOfRange {
            layer: 1,
            layers: 1
        })
    ));
}

fn separable(n_per: usize, seed: u64, scale: f64) -> (Vec<RegionReps>, Vec<u32>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reps = Vec::new();
    let mut gold = Vec::new();
    for i in 0..3 * n_per {
        let class = (i % 3) as u32;
        let mut v: Vec<f64> = (0..6).map(|_| StandardNormal.sample(&mut rng)).collect();
        v[class as usize] += 6.0;
        let v: Vec<f64> = v.iter().map(|x| x * scale).collect();
        reps.push(RegionReps {
            has_hist: true,
            has_fewshot: true,
            has_curr: true,
            layers: vec![LayerReps {
                layer: 0,
                hist_mean: v.clone(),
                fewshot_mean: v.clone(),
                curr_mean: v.clone(),
                last_curr: v,
            }],
        });
        gold.push(class + 6);
    }
    (reps, gold)
}

#[test]
fn probe_recovers_linear_separator() {
    let (reps, gold) = separable(30, 3, 1.0);
    let r = probe(&reps, &gold, 5, 11).unwrap();
    assert_eq!(r.cells.len(), 4);
    for c in &r.cells {
        assert!(c.accuracy >= 0.99, "{c:?}");
    }
}

#[test]
fn probe_on_shuffled_labels_is_near_chance() {
    let (reps, mut gold) = separable(60, 4, 1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    use rand::seq::SliceRandom;
    gold.shuffle(&mut rng);
    let r = probe(&reps, &gold, 5, 11).unwrap();
    for c in &r.cells {
        assert!((c.accuracy - 1.0 / 3.0).abs() <= 0.1, "{c:?}");
    }
}

#[test]
fn probe_is_seeded_and_scale_invariant() {
    let (reps, gold) = separable(12, 5, 1.0);
    let (scaled, _) = separable(12, 5, 7.5);
    let a = probe(&reps, &gold, 5, 3).unwrap();
    let b = probe(&reps, &gold, 5, 3).unwrap();
    let c = probe(&scaled, &gold, 5, 3).unwrap();
    assert_eq!(a, b);
    for (x, y) in a.cells.iter().zip(&c.cells) {
        assert_eq!(x.accuracy, y.accuracy);
    }
    let f1 = probe::stratified_folds(&[0, 0, 0, 1, 1, 1], 3, 8);
    assert_eq!(f1, probe::stratified_folds(&[0, 0, 0, 1, 1, 1], 3, 8));
}

#[test]
fn probe_requires_class_support() {
    let (reps, mut gold) = separable(6, 6, 1.0);
    gold[0] = 99;
    assert!(matches!(
        probe(&reps, &gold, 5, 1),
        Err(LiftError::InsufficientClassSupport {
            class: 99,
            support: 1,
            needed: 5
        })
    ));
}

fn fixture() -> (WordTokenizer, BuilderConfig, Vec<Timeline>) {
    let bcfg = synthetic_builder_config(3, true);
    let tls = synth::history_task(8, 5, 21);
    let tok = fit_tokenizer(&[(2, 1, tls.as_slice())], &bcfg, 300).unwrap();
    (tok, bcfg, tls)
}

fn model(vocab: usize, conditioning: bool) -> crate::model::LiftModel {
    let cfg = TrainConfig {
        model_layers: 2,
        model_d: 16,
        model_heads: 2,
        model_ffn: 32,
        conditioning,
        ..TrainConfig::default()
    };
    init_model(&cfg, vocab, 14).unwrap()
}

fn prompts(
    tok: &WordTokenizer,
    bcfg: &BuilderConfig,
    tls: &[Timeline],
    shots: usize,
) -> Vec<EvalPrompt> {
    let opts = EvalOptions {
        shots,
        ..Default::default()
    };
    build_eval_prompts(tok, bcfg, &tls[..4], &tls[4..], &opts)
        .unwrap()
        .0
}

#[test]
fn extracted_reps_follow_encoding_regions() {
    let (tok, bcfg, tls) = fixture();
    let m = model(tok.vocab_size(), true);
    let ps = prompts(&tok, &bcfg, &tls, 0);
    let enc = encode_with_spans(&ps[0].example, &tok, EncodeOptions::default()).unwrap();
    let r = extract_region_reps(&m, &enc, &[0, 1]).unwrap();
    assert!(!r.has_fewshot && !r.has_hist && r.has_curr);
    assert!(r.layers[1].fewshot_mean.iter().all(|v| *v == 0.0));
    assert_eq!(r.layers[0].curr_mean.len(), 16);
    assert!(matches!(
        extract_region_reps(&m, &enc, &[2]),
        Err(LiftError::LayerOutOfRange { .. })
    ));
}

#[test]
fn routing_masses_partition_the_row() {
    let (tok, bcfg, tls) = fixture();
    let m = model(tok.vocab_size(), true);
    let ps = prompts(&tok, &bcfg, &tls, 1);
    for p in &ps[..5] {
        let enc = encode_with_spans(&p.example, &tok, EncodeOptions::default()).unwrap();
        let routes = attention_routing(&m, &enc).unwrap();
        assert_eq!(routes.len(), 2);
        for r in &routes {
            let total = r.instruction + r.fewshot + r.hist + r.curr + r.other;
            assert!((total - 1.0).abs() < 1e-6, "{total}");
            if p.example.history_lines.is_empty() {
                assert_eq!(r.hist, 0.0);
                assert!(r.recency.is_empty());
            } else {
                assert_eq!(r.recency.len(), RECENCY_BINS);
                assert!((r.recency.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }
    }
    let mean = mean_routing(&[
        vec![route_row(
            &[0.5, 0.5],
            &[Region::Instruction, Region::Curr],
            &[0, 0],
            0,
        )],
        vec![route_row(
            &[1.0, 0.0],
            &[Region::Instruction, Region::Curr],
            &[0, 0],
            0,
        )],
    ]);
    assert_eq!(mean[0].instruction, 0.75);
}

#[test]
fn recency_bins_collect_the_tail() {
    let regions = vec![Region::Hist; 10];
    let rel: Vec<u32> = (1..=10).rev().collect();
    let row = vec![0.1; 10];
    let r = route_row(&row, &regions, &rel, 0);
    assert_eq!(r.recency.len(), 9);
    assert!((r.recency[8] - 0.2).abs() < 1e-12);
    assert!((r.recency[0] - 0.1).abs() < 1e-12);
}

#[test]
fn shuffle_is_a_derangement_that_keeps_the_span_length() {
    let (tok, bcfg, tls) = fixture();
    let ps = prompts(&tok, &bcfg, &tls, 0);
    let p = ps
        .iter()
        .find(|p| p.example.history_lines.len() >= 3)
        .unwrap();
    let s = shuffle_history(&p.example, 4);
    for (a, b) in p.example.history_lines.iter().zip(&s.history_lines) {
        assert_eq!(a.rel, b.rel);
    }
    let mut orig: Vec<_> = p
        .example
        .history_lines
        .iter()
        .map(|l| l.text.clone())
        .collect();
    let mut shuf: Vec<_> = s.history_lines.iter().map(|l| l.text.clone()).collect();
    assert!(
        orig.iter().zip(&shuf).all(|(a, b)| a != b)
            || orig.iter().collect::<std::collections::HashSet<_>>().len() < orig.len()
    );
    orig.sort();
    shuf.sort();
    assert_eq!(orig, shuf);
    assert_eq!(tok.count(&p.example.prompt), tok.count(&s.prompt));
}

#[test]
fn clean_patch_is_a_no_op_and_model_is_untouched() {
    let (tok, bcfg, tls) = fixture();
    let m = model(tok.vocab_size(), true);
    let ps = prompts(&tok, &bcfg, &tls, 0);
    let before = (m.base.weights_hash().unwrap(), m.trainable_hash().unwrap());
    let r = activation_patch(
        &m,
        &tok,
        &ps,
        DatasetId::Lrs,
        &[0, 1],
        7,
        150,
        PatchSource::Clean,
    )
    .unwrap();
    assert_eq!(r.n, ps.len());
    for l in &r.layers {
        assert_eq!(
            (
                l.delta_macro_f1,
                l.mean_delta_gold,
                l.mean_delta_margin,
                l.flip_rate
            ),
            (0.0, 0.0, 0.0, 0.0)
        );
    }
    let after = (m.base.weights_hash().unwrap(), m.trainable_hash().unwrap());
    assert_eq!(before, after);
}

#[test]
fn single_post_history_patch_is_a_no_op() {
    let (tok, bcfg, tls) = fixture();
    let m = model(tok.vocab_size(), false);
    let ps: Vec<EvalPrompt> = prompts(&tok, &bcfg, &tls, 0)
        .into_iter()
        .filter(|p| p.example.history_lines.len() <= 1)
        .collect();
    assert!(!ps.is_empty());
    let r = activation_patch(
        &m,
        &tok,
        &ps,
        DatasetId::Lrs,
        &[0, 1],
        7,
        150,
        PatchSource::Shuffled,
    )
    .unwrap();
    for l in &r.layers {
        assert_eq!(l.flip_rate, 0.0);
        assert_eq!(l.mean_delta_gold, 0.0);
    }
}

#[test]
fn patch_touches_only_history_rows_at_its_layer() {
    let (tok, bcfg, tls) = fixture();
    let m = model(tok.vocab_size(), true);
    let ps = prompts(&tok, &bcfg, &tls, 0);
    let p = ps
        .iter()
        .find(|p| p.example.history_lines.len() >= 2)
        .unwrap();
    let enc = encode_with_spans(&p.example, &tok, EncodeOptions::default()).unwrap();
    let cenc = encode_with_spans(
        &shuffle_history(&p.example, 1).with_response(&p.gold),
        &tok,
        EncodeOptions::default(),
    )
    .unwrap();
    let cap = |e: &crate::tokenspace::EncodedExample, patch: Option<&crate::toylm::HiddenPatch>| {
        m.run(
            e,
            crate::model::RunOptions {
                capture_hidden: true,
                patch,
                ..Default::default()
            },
        )
        .unwrap()
        .out
        .block_inputs
    };
    let clean = cap(&enc, None);
    let donor = cap(&cenc, None);
    let hist: Vec<usize> = (0..enc.len())
        .filter(|&i| enc.region_id[i] == Region::Hist)
        .collect();
    let hp = crate::toylm::HiddenPatch {
        layer: 0,
        positions: hist.clone(),
        source: donor[0].clone(),
    };
    let patched = cap(&enc, Some(&hp));
    let c0 = crate::tensors::to_f64_rows(&clean[0]).unwrap();
    let p0 = crate::tensors::to_f64_rows(&patched[0]).unwrap();
    let d0 = crate::tensors::to_f64_rows(&donor[0]).unwrap();
    for i in 0..enc.len() {
        if hist.contains(&i) {
            assert_eq!(p0[i], d0[i]);
        } else {
            assert_eq!(p0[i], c0[i]);
        }
    }
}

#[test]
fn patch_rejects_bad_layers_and_empty_input() {
    let (tok, bcfg, tls) = fixture();
    let m = model(tok.vocab_size(), false);
    let ps = prompts(&tok, &bcfg, &tls, 0);
    assert!(matches!(
        activation_patch(
            &m,
            &tok,
            &ps,
            DatasetId::Lrs,
            &[5],
            1,
            10,
            PatchSource::Shuffled
        ),
        Err(LiftError::LayerOutOfRange { .. })
    ));
    assert!(matches!(
        activation_patch(
            &m,
            &tok,
            &[],
            DatasetId::Lrs,
            &[0],
            1,
            10,
            PatchSource::Shuffled
        ),
        Err(LiftError::EmptyShard)
    ));
}

#[test]
fn stratified_selection_balances_classes() {
    let gold: Vec<String> = (0..100)
        .map(|i| if i < 80 { "a".into() } else { "b".into() })
        .collect();
    let idx = stratified_indices(&gold, 30, 2);
    assert_eq!(idx.len(), 30);
    assert_eq!(idx.iter().filter(|&&i| gold[i] == "b").count(), 15);
    assert_eq!(idx, stratified_indices(&gold, 30, 2));
}
