use super::*;
use crate::tensors::{to_f64_rows, to_f64_vec};

fn scalar(t: &Tensor) -> f64 {
    t.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
}

fn t2(rows: Vec<Vec<f64>>) -> Tensor {
    let (r, c) = (rows.len(), rows[0].len());
    Tensor::from_vec(rows.concat(), (r, c), &Device::Cpu).unwrap()
}

#[test]
fn uniform_logits_give_ln_vocab() {
    let logits = Tensor::zeros((5, 8), DType::F64, &Device::Cpu).unwrap();
    let ids = [0, 1, 2, 3, 4];
    let l = scalar(&prompt_ce(&logits, &ids, &[true; 5]).unwrap());
    assert!((l - 8f64.ln()).abs() < 1e-12);
}

#[test]
fn confident_targets_give_zero_loss() {
    let ids = [0u32, 2, 1];
    let mut rows = vec![vec![-1e4; 3]; 3];
    rows[0][2] = 0.0;
    rows[1][1] = 0.0;
    let l = scalar(&prompt_ce(&t2(rows), &ids, &[true; 3]).unwrap());
    assert!(l.abs() < 1e-12);
}

#[test]
fn empty_mask_is_zero() {
    let logits = Tensor::ones((4, 6), DType::F64, &Device::Cpu).unwrap();
    assert_eq!(
        scalar(&prompt_ce(&logits, &[1, 2, 3, 4], &[false; 4]).unwrap()),
        0.0
    );
    // The first token is never a target.
    assert_eq!(
        scalar(&prompt_ce(&logits, &[1, 2, 3, 4], &[true, false, false, false]).unwrap()),
        0.0
    );
}

#[test]
fn focal_single_position_formula() {
    // Two-way logits with p(target) = 0.6.
    let ids = [0u32, 0];
    let logits = t2(vec![vec![0.6f64.ln(), 0.4f64.ln()], vec![0.0, 0.0]]);
    let l = scalar(&focal_lm(&logits, &ids, &[false, true], 2.0).unwrap());
    let want = 0.4f64.powi(2) * -(0.6f64.ln());
    assert!((l - want).abs() < 1e-12);
    assert!((want - 0.0817).abs() < 1e-4);
}

#[test]
fn focal_gamma_zero_is_ce_on_random_logits() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for trial in 0..20u32 {
        let l = 3 + trial as usize % 7;
        let logits = normal(&mut rng, &[l, 11], 3.0, DType::F64).unwrap();
        let ids: Vec<u32> = (0..l as u32).map(|i| (i * 5 + trial) % 11).collect();
        let mask: Vec<bool> = (0..l).map(|i| (i + trial as usize) % 3 != 0).collect();
        let a = scalar(&focal_lm(&logits, &ids, &mask, 0.0).unwrap());
        let b = scalar(&prompt_ce(&logits, &ids, &mask).unwrap());
        // Brute force CE from softmax rows.
        let rows = to_f64_rows(&logits).unwrap();
        let mut s = 0.0;
        let mut n = 0;
        for j in 1..l {
            if mask[j] {
                let row = &rows[j - 1];
                let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
                s += lse - row[ids[j] as usize];
                n += 1;
            }
        }
        let want = if n == 0 { 0.0 } else { s / n as f64 };
        assert!((a - want).abs() < 1e-9 && (b - want).abs() < 1e-9);
    }
}

#[test]
fn focal_tends_to_zero_as_p_tends_to_one() {
    let logits = t2(vec![vec![30.0, 0.0], vec![0.0, 0.0]]);
    let l = scalar(&focal_lm(&logits, &[0, 0], &[false, true], 2.0).unwrap());
    assert!(l < 1e-20);
}

#[test]
fn cls_uniform_head_gives_ln_k_and_weight_scales_linearly() {
    let logits = Tensor::zeros(12, DType::F64, &Device::Cpu).unwrap();
    let a = scalar(&focal_from_logits(&logits, 3, 0.0, 1.0).unwrap());
    assert!((a - 12f64.ln()).abs() < 1e-12);
    let b = scalar(&focal_from_logits(&logits, 3, 0.0, 2.0).unwrap());
    assert_eq!(b, 2.0 * a);
}

fn head(d: usize, k: usize) -> LinearHead {
    LinearHead::new(d, k, &mut ChaCha8Rng::seed_from_u64(5), DType::F64).unwrap()
}

#[test]
fn focal_cls_reads_last_stamped_position() {
    let h = head(4, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let hidden = normal(&mut rng, &[5, 4], 1.0, DType::F64).unwrap();
    let mask = [false, false, true, true, false];
    let got = scalar(&focal_cls(&hidden, &mask, &h, 1, 2.0, None).unwrap());
    let direct = scalar(
        &focal_from_logits(&h.forward(&hidden.get(3).unwrap()).unwrap(), 1, 2.0, 1.0).unwrap(),
    );
    assert_eq!(got, direct);
    assert!(matches!(
        focal_cls(&hidden, &[false; 5], &h, 1, 2.0, None),
        Err(LiftError::NoStampedPosition)
    ));
}

#[test]
fn focal_cls_confident_gold_is_near_zero() {
    let h = head(2, 3);
    h.weight
        .set(&t2(vec![vec![0.0, 0.0], vec![50.0, 0.0], vec![0.0, 0.0]]))
        .unwrap();
    let hidden = t2(vec![vec![1.0, 0.0]]);
    let l = scalar(&focal_cls(&hidden, &[true], &h, 1, 2.0, None).unwrap());
    assert!(l < 1e-12);
}

#[test]
fn hist_pool_matches_explicit_mean_and_empty_is_skip() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let hidden = normal(&mut rng, &[6, 5], 1.0, DType::F64).unwrap();
    let mask = [false, true, true, false, true, false];
    let pooled = to_f64_vec(&masked_mean(&hidden, &mask).unwrap().unwrap()).unwrap();
    let rows = to_f64_rows(&hidden).unwrap();
    for c in 0..5 {
        let want = (rows[1][c] + rows[2][c] + rows[4][c]) / 3.0;
        assert!((pooled[c] - want).abs() < 1e-6);
    }
    let one = [false, false, false, true, false, false];
    assert_eq!(
        to_f64_vec(&masked_mean(&hidden, &one).unwrap().unwrap()).unwrap(),
        rows[3]
    );
    assert!(hist_cls(&hidden, &[false; 6], &head(5, 3), 0, 2.0)
        .unwrap()
        .is_none());
}

fn terms(vals: [f64; 4]) -> LossTerms {
    let s = |v: f64| Tensor::new(v, &Device::Cpu).unwrap();
    LossTerms {
        ce: s(vals[0]),
        focal_lm: s(vals[1]),
        focal_cls: s(vals[2]),
        hist_cls: s(vals[3]),
        hist_skipped: false,
        ce_empty: false,
    }
}

#[test]
fn total_loss_is_linear_in_weights() {
    let t = terms([1.5, 0.25, 2.0, 0.75]);
    assert_eq!(
        scalar(&total_loss(&t, &LossWeights::only(1.0, 0.0, 0.0, 0.0)).unwrap()),
        1.5
    );
    assert_eq!(
        scalar(&total_loss(&t, &LossWeights::only(0.0, 0.0, 0.0, 0.0)).unwrap()),
        0.0
    );
    let w = LossWeights::default();
    let w2 = LossWeights::only(2.0 * w.ce, 2.0 * w.out, 2.0 * w.cls, 2.0 * w.hist);
    let a = scalar(&total_loss(&t, &w).unwrap());
    let b = scalar(&total_loss(&t, &w2).unwrap());
    assert!((b - 2.0 * a).abs() < 1e-12);
    assert!((a - (1.5 + 0.25 + 1.0 + 0.1875)).abs() < 1e-12);
}

#[test]
fn total_loss_rejects_non_finite() {
    let t = terms([1.0, f64::NAN, 0.0, 0.0]);
    assert!(matches!(
        total_loss(&t, &LossWeights::default()),
        Err(LiftError::NonFinite(_))
    ));
}

#[test]
fn inverse_frequency_weights_balance_classes() {
    let labels = [4u32, 4, 4, 5];
    let w = inverse_frequency_weights(&labels, 14);
    assert!((w[4] - 4.0 / 6.0).abs() < 1e-12);
    assert!((w[5] - 2.0).abs() < 1e-12);
    let mean: f64 = labels.iter().map(|&l| w[l as usize]).sum::<f64>() / 4.0;
    assert!((mean - 1.0).abs() < 1e-12);
    assert_eq!(w[0], 1.0);
}
