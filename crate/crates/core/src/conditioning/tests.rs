use super::*;
use crate::corpus::DatasetId;
use crate::tensors::to_f64_vec;
use crate::tokenspace::Region;

fn encoded(l: usize, timestep: usize) -> EncodedExample {
    let out_from = l.saturating_sub(2);
    EncodedExample {
        stage: 1,
        dataset: DatasetId::Lrs,
        sequence_key: "k".into(),
        input_ids: vec![1; l],
        prompt_len: out_from,
        prompt_ce_mask: (0..l).map(|i| i < out_from).collect(),
        output_mask: (0..l).map(|i| i >= out_from).collect(),
        hist_mask: vec![false; l],
        region_id: (0..l)
            .map(|i| {
                if i >= out_from {
                    Region::Output
                } else {
                    Region::Other
                }
            })
            .collect(),
        label_stamp: (0..l).map(|i| if i >= out_from { 5 } else { 0 }).collect(),
        hist_rel: vec![0; l],
        global_label_id: 5,
        timestep_id: timestep,
    }
}

fn cfg() -> ConditioningConfig {
    ConditioningConfig::new(16, 14)
}

#[test]
fn feature_examples() {
    let f = temporal_features(&encoded(6, 37), &cfg());
    assert_eq!(f.abs[0], 0);
    assert_eq!(*f.rel.last().unwrap(), 0);
    assert!(f.time.iter().all(|&t| t == 37));
    assert_eq!(f.label, vec![0, 0, 0, 0, 5, 5]);
}

#[test]
fn timestep_clamps_to_last_row() {
    let f = temporal_features(&encoded(3, 10_000), &cfg());
    assert!(f.time.iter().all(|&t| t == 511));
}

#[test]
fn rel_buckets_are_monotone_and_bounded() {
    let c = cfg();
    let mut prev = 0;
    for r in 0..5000 {
        let b = c.rel_bucket(r);
        assert!(b >= prev && b < 64);
        prev = b;
    }
    assert_eq!(c.rel_bucket(0), 0);
    assert_eq!(c.rel_bucket(2047), 63);
}

#[test]
fn zero_w_is_identity_and_shape_preserved() {
    let c = Conditioning::new(cfg(), 0, DType::F32).unwrap();
    for l in [1, 7, 33] {
        let x = normal(
            &mut ChaCha8Rng::seed_from_u64(l as u64),
            &[l, 16],
            1.0,
            DType::F32,
        )
        .unwrap();
        let f = temporal_features(&encoded(l, 3), c.config());
        let y = c.inject(&x, &f).unwrap();
        assert_eq!(y.dims(), x.dims());
        assert_eq!(to_f64_vec(&y).unwrap(), to_f64_vec(&x).unwrap());
    }
}

#[test]
fn wrong_width_is_dim_mismatch() {
    let c = Conditioning::new(cfg(), 0, DType::F32).unwrap();
    let x = Tensor::zeros((4, 8), DType::F32, &Device::Cpu).unwrap();
    let f = temporal_features(&encoded(4, 0), c.config());
    assert!(matches!(c.inject(&x, &f), Err(LiftError::DimMismatch(_))));
}

fn scalar_loss(c: &Conditioning, x: &Tensor, f: &TemporalFeatures, probe: &Tensor) -> Tensor {
    c.inject(x, f)
        .unwrap()
        .mul(probe)
        .unwrap()
        .sum_all()
        .unwrap()
}

#[test]
fn table_gradients_match_central_differences() {
    let mut small = cfg();
    small.p_max = 16;
    small.t_max = 8;
    let c = Conditioning::new(small, 1, DType::F64).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    c.var("cond.w")
        .unwrap()
        .set(&normal(&mut rng, &[16, 16], 0.5, DType::F64).unwrap())
        .unwrap();
    let x = normal(&mut rng, &[5, 16], 1.0, DType::F64).unwrap();
    let probe = normal(&mut rng, &[5, 16], 1.0, DType::F64).unwrap();
    let f = temporal_features(&encoded(5, 2), c.config());
    let grads = scalar_loss(&c, &x, &f, &probe).backward().unwrap();
    let eps = 1e-5;
    for table in TABLES {
        let var = c.var(table).unwrap();
        let g = to_f64_vec(grads.get(var.as_tensor()).unwrap()).unwrap();
        let base = to_f64_vec(var.as_tensor()).unwrap();
        let shape = var.as_tensor().dims().to_vec();
        // Check every entry that receives a nonzero gradient plus a few zero ones.
        let mut checked = 0;
        for i in (0..base.len()).filter(|&i| g[i] != 0.0 || i % 97 == 0) {
            let eval = |delta: f64| {
                let mut v = base.clone();
                v[i] += delta;
                var.set(&Tensor::from_vec(v, shape.as_slice(), &Device::Cpu).unwrap())
                    .unwrap();
                scalar_loss(&c, &x, &f, &probe).to_scalar::<f64>().unwrap()
            };
            let fd = (eval(eps) - eval(-eps)) / (2.0 * eps);
            var.set(&Tensor::from_vec(base.clone(), shape.as_slice(), &Device::Cpu).unwrap())
                .unwrap();
            let denom = fd.abs().max(g[i].abs()).max(1e-8);
            assert!(
                (fd - g[i]).abs() / denom < 1e-4 || (fd - g[i]).abs() < 1e-9,
                "{table}[{i}]: fd {fd} vs analytic {}",
                g[i]
            );
            checked += 1;
        }
        assert!(checked > 0);
    }
}

#[test]
fn inject_is_per_instance() {
    let c = Conditioning::new(cfg(), 2, DType::F64).unwrap();
    c.var("cond.w")
        .unwrap()
        .set(
            &normal(
                &mut ChaCha8Rng::seed_from_u64(1),
                &[16, 16],
                0.5,
                DType::F64,
            )
            .unwrap(),
        )
        .unwrap();
    let xa = normal(&mut ChaCha8Rng::seed_from_u64(3), &[4, 16], 1.0, DType::F64).unwrap();
    let xb = normal(&mut ChaCha8Rng::seed_from_u64(4), &[6, 16], 1.0, DType::F64).unwrap();
    let (fa, fb) = (
        temporal_features(&encoded(4, 1), c.config()),
        temporal_features(&encoded(6, 9), c.config()),
    );
    let a1 = to_f64_vec(&c.inject(&xa, &fa).unwrap()).unwrap();
    let _ = c.inject(&xb, &fb).unwrap();
    let a2 = to_f64_vec(&c.inject(&xa, &fa).unwrap()).unwrap();
    assert_eq!(a1, a2);
}
