use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::nn::{Activation, Arch, Inputs, ModelSpec, Targets, TaskHead};

fn with_grad(shape: Vec<usize>, w: Vec<f64>, g: Vec<f64>) -> Tensor {
    let mut t = Tensor::new(shape, w).unwrap();
    t.set_grad(g).unwrap();
    t
}

fn cache(mean: Vec<f64>) -> ActivationCache {
    ActivationCache { mean, token_count: 1 }
}

fn argsort(v: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[b].total_cmp(&v[a]).then(a.cmp(&b)));
    idx
}

#[test]
fn magnitude_scores() {
    let t = Tensor::new(vec![3], vec![-2.0, 0.5, 1.0]).unwrap();
    assert_eq!(score_mag_weight(&t), vec![2.0, 0.5, 1.0]);
    assert_eq!(score_mag_weight(&Tensor::zeros(vec![4])), vec![0.0; 4]);

    let t = with_grad(vec![2], vec![1.0, -2.0], vec![0.1, 0.1]);
    assert_eq!(score_mag_grad(&t).unwrap(), vec![0.1, 0.2]);
    let t = with_grad(vec![2], vec![3.0, -2.0], vec![0.0, 0.5]);
    assert_eq!(score_mag_grad(&t).unwrap()[0], 0.0);
    assert!(matches!(score_mag_grad(&Tensor::zeros(vec![2])), Err(Error::State(_))));
}

#[test]
fn elementwise_oracles_on_random_tensors() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let w: Vec<f64> = (0..9).map(|_| rng.random_range(-1.0..1.0)).collect();
    let g: Vec<f64> = (0..9).map(|_| rng.random_range(-1.0..1.0)).collect();
    let t = with_grad(vec![3, 3], w.clone(), g.clone());
    let by_hand: Vec<f64> = (0..9).map(|i| (w[i] * g[i]).abs()).collect();
    assert_eq!(score_mag_grad(&t).unwrap(), by_hand);
    let abs: Vec<f64> = w.iter().map(|v| v.abs()).collect();
    assert_eq!(score_mag_weight(&t), abs);
}

#[test]
fn gradcam_shift_by_hand() {
    let t = with_grad(vec![1, 2], vec![1.0, 2.0], vec![0.1, -0.2]);
    let s = score_gradcam_shift(&t, Some(&cache(vec![3.0])), 10.0, false).unwrap();
    assert!((s[0] - 1.3).abs() < 1e-12 && (s[1] - 5.2).abs() < 1e-12, "{s:?}");

    let b = with_grad(vec![1], vec![0.5], vec![2.0]);
    let s = score_gradcam_shift(&b, Some(&cache(vec![3.0])), 10.0, false).unwrap();
    assert!((s[0] - 13.0).abs() < 1e-12);

    let s = score_gradcam_shift(&t, Some(&cache(vec![0.0])), 0.0, false).unwrap();
    assert_eq!(s, vec![0.0, 0.0]);

    // ReLU on the activation mean clamps a negative mean before shifting.
    let s = score_gradcam_shift(&t, Some(&cache(vec![-3.0])), 0.0, true).unwrap();
    assert_eq!(s, vec![0.0, 0.0]);

    assert!(matches!(score_gradcam_shift(&t, None, 10.0, false), Err(Error::State(_))));
}

#[test]
fn smoothgrad_averages_before_abs() {
    let w = Tensor::new(vec![1], vec![5.0]).unwrap();
    assert_eq!(score_smoothgrad(&w, &[vec![1.0], vec![-1.0]]).unwrap(), vec![0.0]);
    assert!(matches!(score_smoothgrad(&w, &[]), Err(Error::Argument(_))));
}

#[test]
fn smoothgrad_matches_scripted_average() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let w: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
    let paths: Vec<Vec<f64>> = (0..10).map(|_| (0..6).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let t = Tensor::new(vec![2, 3], w.clone()).unwrap();
    let s = score_smoothgrad(&t, &paths).unwrap();
    for j in 0..6 {
        let mut sum = 0.0;
        for p in &paths {
            sum += p[j];
        }
        let expected = (w[j] * (sum / 10.0)).abs();
        assert!((s[j] - expected).abs() < 1e-15);
    }
    let a = [0.3, -0.7];
    let c = score_smoothgradcam_shift(&t, &paths, Some(&cache(a.to_vec())), 2.0, false).unwrap();
    for j in 0..6 {
        let g: f64 = paths.iter().map(|p| p[j]).sum::<f64>() / 10.0;
        let expected = (w[j] * g * (a[j / 3] + 2.0)).abs();
        assert!((c[j] - expected).abs() < 1e-15);
    }
}

#[test]
fn single_clean_path_degenerates_bitwise() {
    let t = with_grad(vec![2, 2], vec![0.3, -1.7, 2.2, 0.01], vec![0.11, 0.5, -0.25, 3.0]);
    let g = t.grad().unwrap().to_vec();
    assert_eq!(score_smoothgrad(&t, std::slice::from_ref(&g)).unwrap(), score_mag_grad(&t).unwrap());
    let c = cache(vec![0.4, -2.0]);
    assert_eq!(
        score_smoothgradcam_shift(&t, &[g], Some(&c), 10.0, false).unwrap(),
        score_gradcam_shift(&t, Some(&c), 10.0, false).unwrap()
    );
}

proptest! {
    #[test]
    fn gradcam_keeps_row_order(
        w in prop::collection::vec(-3.0f64..3.0, 12),
        g in prop::collection::vec(-3.0f64..3.0, 12),
        a in prop::collection::vec(-20.0f64..20.0, 3),
        lambda in 0.0f64..20.0,
    ) {
        prop_assume!(a.iter().all(|ai| (ai + lambda).abs() > 1e-9));
        let t = with_grad(vec![3, 4], w, g);
        let cam = score_gradcam_shift(&t, Some(&cache(a)), lambda, false).unwrap();
        let base = score_mag_grad(&t).unwrap();
        for r in 0..3 {
            let (x, y) = (&cam[r * 4..r * 4 + 4], &base[r * 4..r * 4 + 4]);
            prop_assert_eq!(argsort(x), argsort(y));
        }
    }

    #[test]
    fn huge_lambda_recovers_mag_grad_ranking(
        w in prop::collection::vec(-3.0f64..3.0, 12),
        g in prop::collection::vec(-3.0f64..3.0, 12),
        a in prop::collection::vec(-1.0f64..1.0, 3),
    ) {
        let t = with_grad(vec![3, 4], w, g);
        let base = score_mag_grad(&t).unwrap();
        // Rank flips need relative gaps below ~1e-9; skip those rare draws.
        let mut sorted = base.clone();
        sorted.sort_by(f64::total_cmp);
        prop_assume!(sorted.windows(2).all(|p| p[1] - p[0] > 1e-6 * p[1].max(1e-300)));
        let cam = score_gradcam_shift(&t, Some(&cache(a.clone())), 1e9, false).unwrap();
        prop_assert_eq!(argsort(&cam), argsort(&base));
        let paths = vec![t.grad().unwrap().to_vec()];
        let sc = score_smoothgradcam_shift(&t, &paths, Some(&cache(a)), 1e9, false).unwrap();
        let sg = score_smoothgrad(&t, &paths).unwrap();
        for r in 0..3 {
            prop_assert_eq!(argsort(&sc[r * 4..r * 4 + 4]), argsort(&sg[r * 4..r * 4 + 4]));
        }
    }
}

fn toy() -> (Model, Vec<Batch>) {
    let spec = ModelSpec {
        arch: Arch::Mlp {
            widths: vec![3, 5],
            activation: Activation::Gelu,
        },
        task_head: TaskHead::Classifier { n_classes: 2 },
        init_std: 0.5,
    };
    let model = Model::new(spec, 7).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let batches = (0..3)
        .map(|_| Batch {
            inputs: Inputs::Features(Tensor::new(vec![4, 3], (0..12).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()),
            targets: Targets::Classes((0..4).map(|_| rng.random_range(0..2)).collect()),
        })
        .collect();
    (model, batches)
}

#[test]
fn magnitude_accumulation_consumes_nothing() {
    let (mut m, batches) = toy();
    let acc = accumulate_scores(&mut m, &batches, &StrategyConfig::new(StrategyKind::LayerMagWeight), 0).unwrap();
    assert_eq!(acc.batches_consumed, 0);
    for (e, p) in acc.entries().iter().zip(m.prunable()) {
        assert_eq!(e.scores, score_mag_weight(&p.tensor));
    }
    let empty: Vec<Batch> = Vec::new();
    assert!(accumulate_scores(&mut m, &empty, &StrategyConfig::new(StrategyKind::GlobalMagWeight), 0).is_ok());
    assert!(matches!(
        accumulate_scores(&mut m, &empty, &StrategyConfig::new(StrategyKind::LayerMagGrad), 0),
        Err(Error::Data(_))
    ));
}

#[test]
fn identical_batches_double_the_score() {
    let (mut m, batches) = toy();
    let cfg = StrategyConfig::new(StrategyKind::LayerMagGrad);
    let one = accumulate_scores(&mut m, &batches[..1], &cfg, 0).unwrap();
    let two = accumulate_scores(&mut m, [&batches[0], &batches[0]], &cfg, 0).unwrap();
    assert_eq!(two.batches_consumed, 2);
    for (a, b) in one.entries().iter().zip(two.entries()) {
        for (x, y) in a.scores.iter().zip(&b.scores) {
            assert_eq!(2.0 * x, *y);
        }
    }
}

#[test]
fn accumulation_matches_scripted_per_batch_sum() {
    let (mut m, batches) = toy();
    let mut cfg = StrategyConfig::new(StrategyKind::LayerGradcamShift);
    cfg.lambda = 2.5;
    let acc = accumulate_scores(&mut m, &batches, &cfg, 0).unwrap();
    assert_eq!(acc.batches_consumed, 3);

    let mut oracle: Vec<Vec<f64>> = m.prunable().map(|p| vec![0.0; p.tensor.len()]).collect();
    let mut script = m.clone();
    for b in &batches {
        script.forward_backward(b, &ForwardOptions::cached()).unwrap();
        for (o, p) in oracle.iter_mut().zip(script.prunable()) {
            let a = &script.activation_cache(&p.path).unwrap().mean;
            let cols = p.tensor.len() / a.len();
            let g = p.tensor.grad().unwrap();
            for (j, s) in o.iter_mut().enumerate() {
                *s += (p.tensor.values()[j] * g[j] * (a[j / cols] + 2.5)).abs();
            }
        }
    }
    for (e, o) in acc.entries().iter().zip(&oracle) {
        for (x, y) in e.scores.iter().zip(o) {
            assert!((x - y).abs() <= 1e-12 * y.abs().max(1.0));
        }
    }
}

#[test]
fn accumulation_is_additive_over_batches() {
    let (mut m, batches) = toy();
    for kind in [StrategyKind::LayerMagGrad, StrategyKind::LayerGradcamShift] {
        let cfg = StrategyConfig::new(kind);
        let all = accumulate_scores(&mut m, &batches, &cfg, 0).unwrap();
        let mut first = accumulate_scores(&mut m, &batches[..1], &cfg, 0).unwrap();
        let rest = accumulate_scores(&mut m, &batches[1..], &cfg, 0).unwrap();
        first.merge(&rest).unwrap();
        assert_eq!(first.batches_consumed, 3);
        for (a, b) in all.entries().iter().zip(first.entries()) {
            for (x, y) in a.scores.iter().zip(&b.scores) {
                assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0));
            }
        }
    }
}

#[test]
fn smooth_degeneration_holds_end_to_end() {
    let (mut m, batches) = toy();
    let mut smooth = StrategyConfig::new(StrategyKind::LayerSmoothgrad);
    smooth.eta = 1;
    smooth.noise_variance = 0.0;
    let plain = accumulate_scores(&mut m, &batches, &StrategyConfig::new(StrategyKind::LayerMagGrad), 5).unwrap();
    let degenerate = accumulate_scores(&mut m, &batches, &smooth, 5).unwrap();
    assert_eq!(plain.entries(), degenerate.entries());

    smooth.kind = StrategyKind::LayerSmoothgradcamShift;
    let cam = accumulate_scores(&mut m, &batches, &StrategyConfig::new(StrategyKind::LayerGradcamShift), 5).unwrap();
    let degenerate = accumulate_scores(&mut m, &batches, &smooth, 5).unwrap();
    assert_eq!(cam.entries(), degenerate.entries());
}

#[test]
fn budget_limits_batches() {
    let (mut m, batches) = toy();
    let mut cfg = StrategyConfig::new(StrategyKind::LayerSmoothgrad);
    cfg.grad_batch_budget = 2;
    cfg.eta = 3;
    let acc = accumulate_scores(&mut m, &batches, &cfg, 1).unwrap();
    assert_eq!(acc.batches_consumed, 2);
}

#[test]
fn seeded_smooth_scores_are_reproducible() {
    let (mut m, batches) = toy();
    let cfg = StrategyConfig::new(StrategyKind::LayerSmoothgradcamShift);
    let a = accumulate_scores(&mut m, &batches, &cfg, 11).unwrap();
    let b = accumulate_scores(&mut m, &batches, &cfg, 11).unwrap();
    let c = accumulate_scores(&mut m, &batches, &cfg, 12).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.entries(), c.entries());
    for e in a.entries() {
        assert!(e.scores.iter().all(|s| s.is_finite() && *s >= 0.0));
    }
}

#[test]
fn parallel_accumulation_matches_serial() {
    let (mut m, batches) = toy();
    for kind in [StrategyKind::LayerMagGrad, StrategyKind::LayerSmoothgrad] {
        let cfg = StrategyConfig::new(kind);
        let serial = accumulate_scores(&mut m, &batches, &cfg, 9).unwrap();
        let parallel = accumulate_scores_parallel(&m, &batches, &cfg, 9, 2).unwrap();
        assert_eq!(serial.batches_consumed, parallel.batches_consumed);
        for (a, b) in serial.entries().iter().zip(parallel.entries()) {
            for (x, y) in a.scores.iter().zip(&b.scores) {
                assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0));
            }
        }
    }
}

#[test]
fn score_file_round_trip() {
    let (mut m, batches) = toy();
    let mut acc = accumulate_scores(&mut m, &batches, &StrategyConfig::new(StrategyKind::LayerGradcamShift), 4).unwrap();
    acc.config_hash = "abc".into();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.dcscore");
    write_scores(&acc, &path).unwrap();
    assert_eq!(read_scores(&path).unwrap(), acc);
    let mut bytes = std::fs::read(&path).unwrap();
    bytes[1] = b'?';
    assert!(matches!(ImportanceAccumulator::from_bytes(&bytes), Err(Error::Format(_))));
}

#[test]
fn config_validation() {
    let mut c = StrategyConfig::new(StrategyKind::LayerSmoothgrad);
    assert_eq!(c.grad_batch_budget, DEFAULT_SMOOTH_BUDGET);
    assert_eq!(StrategyConfig::new(StrategyKind::LayerMagGrad).grad_batch_budget, DEFAULT_GRAD_BUDGET);
    c.eta = 0;
    assert!(c.validate().is_err());
    c.eta = 1;
    c.noise_variance = -1.0;
    assert!(c.validate().is_err());
    for k in StrategyKind::ALL {
        assert_eq!(StrategyKind::parse(k.name()), Some(k));
    }
}
