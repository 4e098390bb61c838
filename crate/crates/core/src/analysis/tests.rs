use std::collections::BTreeSet;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::masking::{MaskEntry, MaskProvenance, MaskScope};
use crate::nn::{Model, TaskHead};

fn mask(entries: &[(&str, Vec<bool>)]) -> PruneMask {
    PruneMask {
        entries: entries
            .iter()
            .map(|(p, bits)| MaskEntry {
                path: p.to_string(),
                kept: bits.iter().filter(|&&b| b).count(),
                bits: bits.clone(),
            })
            .collect(),
        provenance: MaskProvenance {
            strategy: "test".into(),
            ratio: 1.0,
            seed: 0,
            scope: MaskScope::Layerwise,
            kept_fraction: 1.0,
            config_hash: String::new(),
        },
    }
}

fn bits(s: &str) -> Vec<bool> {
    s.chars().map(|c| c == '1').collect()
}

fn set_oracle(a: &[bool], b: &[bool]) -> f64 {
    let sa: BTreeSet<usize> = (0..a.len()).filter(|&i| a[i]).collect();
    let sb: BTreeSet<usize> = (0..b.len()).filter(|&i| b[i]).collect();
    let union = sa.union(&sb).count();
    if union == 0 {
        1.0
    } else {
        sa.intersection(&sb).count() as f64 / union as f64
    }
}

#[test]
fn hand_examples() {
    let a = mask(&[("t", bits("1100"))]);
    let b = mask(&[("t", bits("1010"))]);
    assert_eq!(mask_iou(&a, &b).unwrap()[0].iou(), 1.0 / 3.0);
    assert_eq!(mask_iou(&a, &a).unwrap()[0].iou(), 1.0);
    let empty = mask(&[("t", bits("0000"))]);
    assert_eq!(mask_iou(&empty, &empty).unwrap()[0].iou(), 1.0);
    assert_eq!(mask_iou(&a, &empty).unwrap()[0].iou(), 0.0);
}

#[test]
fn coverage_mismatch_is_an_error() {
    let a = mask(&[("t", bits("1100"))]);
    let b = mask(&[("u", bits("1100"))]);
    let c = mask(&[("t", bits("110"))]);
    assert!(matches!(mask_iou(&a, &b), Err(Error::Consistency(_))));
    assert!(matches!(mask_iou(&a, &c), Err(Error::Consistency(_))));
    assert!(iou_matrix(&[("x".into(), a.clone()), ("y".into(), c)]).is_err());
    assert!(matches!(iou_matrix(&[("x".into(), a)]), Err(Error::Argument(_))));
}

#[test]
fn random_pairs_match_the_set_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..100 {
        let density_a: f64 = rng.random();
        let density_b: f64 = rng.random();
        let a: Vec<bool> = (0..200).map(|_| rng.random::<f64>() < density_a).collect();
        let b: Vec<bool> = (0..200).map(|_| rng.random::<f64>() < density_b).collect();
        let got = mask_iou(&mask(&[("t", a.clone())]), &mask(&[("t", b.clone())])).unwrap();
        assert_eq!(got[0].iou(), set_oracle(&a, &b));
    }
}

#[test]
fn matrix_hand_aggregation() {
    // Tensor one: IOU 1/2. Tensor two: IOU 9/10.
    let a = mask(&[("one", bits("11")), ("two", bits("1111111111"))]);
    let b = mask(&[("one", bits("10")), ("two", bits("1111111110"))]);
    let m = iou_matrix(&[("a".into(), a), ("b".into(), b)]).unwrap();
    assert!((m.mean[0][1] - 0.7).abs() < 1e-15);
    assert_eq!(m.min[0][1], 0.5);
    assert_eq!(m.mean[1][0], m.mean[0][1]);
    assert_eq!(m.mean[0][0], 1.0);
    assert_eq!(m.min[1][1], 1.0);
}

fn small_spec() -> ModelSpec {
    ModelSpec {
        arch: Arch::Miniformer {
            vocab_size: 10,
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            d_ffn: 12,
            max_seq_len: 6,
        },
        task_head: TaskHead::Classifier { n_classes: 2 },
        init_std: 0.02,
    }
}

#[test]
fn head_slices_match_manual_enumeration() {
    let map = HeadMap::from_spec(&small_spec());
    assert_eq!(map.heads.len(), 4);
    let h = &map.heads[3];
    assert_eq!((h.layer, h.head), (1, 1));
    let find = |name: &str| {
        h.slices
            .iter()
            .find(|s| s.path == format!("encoder.layer1.attn.{name}"))
            .unwrap()
            .indices
            .clone()
    };
    // Head 1 of d_model 8 with 2 heads owns rows 4..8.
    let mut rows = Vec::new();
    for r in 4..8 {
        for c in 0..8 {
            rows.push(r * 8 + c);
        }
    }
    let mut cols = Vec::new();
    for r in 0..8 {
        for c in 4..8 {
            cols.push(r * 8 + c);
        }
    }
    assert_eq!(find("q_proj.weight"), rows);
    assert_eq!(find("k_proj.weight"), rows);
    assert_eq!(find("v_proj.weight"), rows);
    assert_eq!(find("o_proj.weight"), cols);
    assert_eq!(find("q_proj.bias"), vec![4, 5, 6, 7]);
    assert_eq!(find("v_proj.bias"), vec![4, 5, 6, 7]);
    assert!(HeadMap::from_spec(&ModelSpec {
        arch: Arch::Mlp { widths: vec![4], activation: crate::nn::Activation::Relu },
        ..small_spec()
    })
    .heads
    .is_empty());
}

#[test]
fn head_slices_partition_attention_tensors() {
    let spec = small_spec();
    let model = Model::new(spec.clone(), 0).unwrap();
    let map = HeadMap::from_spec(&spec);
    let full = PruneMask::full(&model);
    map.check(&full).unwrap();
    for p in model.params().iter().filter(|p| p.path.contains(".attn.")) {
        if p.path.ends_with("o_proj.bias") {
            continue;
        }
        let mut hits = vec![0usize; p.tensor.len()];
        for h in &map.heads {
            for s in h.slices.iter().filter(|s| s.path == p.path) {
                for &i in &s.indices {
                    hits[i] += 1;
                }
            }
        }
        assert!(hits.iter().all(|&n| n == 1), "{} not partitioned", p.path);
    }
}

fn random_mask(model: &Model, rng: &mut ChaCha8Rng) -> PruneMask {
    let mut m = PruneMask::full(model);
    for e in &mut m.entries {
        e.bits = (0..e.bits.len()).map(|_| rng.random::<bool>()).collect();
        e.kept = e.bits.iter().filter(|&&b| b).count();
    }
    m
}

#[test]
fn head_iou_edge_cases_and_aggregation() {
    let spec = small_spec();
    let model = Model::new(spec.clone(), 0).unwrap();
    let map = HeadMap::from_spec(&spec);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a = random_mask(&model, &mut rng);
    let b = random_mask(&model, &mut rng);

    assert!(head_iou(&a, &a, &map).unwrap().iter().all(|h| h.iou() == 1.0));

    // Disjoint within head (0, 0): a keeps every slice element, b none.
    let (mut x, mut y) = (a.clone(), a.clone());
    for s in &map.heads[0].slices {
        let xe = x.entries.iter_mut().find(|e| e.path == s.path).unwrap();
        let ye = y.entries.iter_mut().find(|e| e.path == s.path).unwrap();
        for &i in &s.indices {
            xe.bits[i] = true;
            ye.bits[i] = false;
        }
    }
    let heads = head_iou(&x, &y, &map).unwrap();
    assert_eq!(heads[0].iou(), 0.0);
    assert_eq!(heads[1].iou(), 1.0);

    // Summing counts over every head equals the pooled IOU of the covered tensors.
    let heads = head_iou(&a, &b, &map).unwrap();
    let (i, u) = heads.iter().fold((0, 0), |(i, u), h| (i + h.intersection, u + h.union));
    let covered: BTreeSet<&str> = map.heads.iter().flat_map(|h| h.slices.iter().map(|s| s.path.as_str())).collect();
    let (ti, tu) = mask_iou(&a, &b)
        .unwrap()
        .iter()
        .filter(|t| covered.contains(t.path.as_str()))
        .fold((0, 0), |(i, u), t| (i + t.intersection, u + t.union));
    assert_eq!((i, u), (ti, tu));
}

#[test]
fn inconsistent_head_map_is_rejected() {
    let spec = small_spec();
    let model = Model::new(spec.clone(), 0).unwrap();
    let mut map = HeadMap::from_spec(&spec);
    map.heads[0].slices[0].indices.push(10_000);
    let full = PruneMask::full(&model);
    assert!(matches!(head_iou(&full, &full, &map), Err(Error::Consistency(_))));
    map.heads[0].slices[0].path = "nowhere".into();
    assert!(head_iou(&full, &full, &map).is_err());
}

#[test]
fn comparison_aggregates_are_bounded() {
    let spec = small_spec();
    let model = Model::new(spec.clone(), 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let a = random_mask(&model, &mut rng);
    let b = random_mask(&model, &mut rng);
    let c = compare_masks(&a, &b, &HeadMap::from_spec(&spec)).unwrap();
    assert!(c.min_iou <= c.mean_iou);
    assert_eq!(c.per_layer.len(), 2);
    assert_eq!(c.per_layer[0].0, "encoder.layer0");
    assert_eq!(c.per_head.len(), 4);
    let all = c
        .per_tensor
        .iter()
        .map(TensorIou::iou)
        .chain(c.per_layer.iter().map(|l| l.1))
        .chain(c.per_head.iter().map(HeadIou::iou));
    for v in all {
        assert!((0.0..=1.0).contains(&v));
    }
    let layer0: Vec<f64> = c
        .per_tensor
        .iter()
        .filter(|t| t.path.starts_with("encoder.layer0."))
        .map(TensorIou::iou)
        .collect();
    assert!((c.per_layer[0].1 - layer0.iter().sum::<f64>() / layer0.len() as f64).abs() < 1e-15);
}

fn report(strategy: &str, ratio: f64, seed: u64, final_metric: f64) -> RunReport {
    RunReport {
        task: "planted_classify".into(),
        strategy: strategy.into(),
        ratio,
        seed,
        metric: crate::lth::EvalMetric::Accuracy,
        pre_metric: 0.1 + 0.2,
        post_metric: 1.0 / 3.0,
        final_metric,
        kept_fraction: 0.029411764705882353,
        epochs_run: 4,
        batches_scored: 7,
        wall_seconds: 0.125,
        mask_path: format!("seed{seed}/masks/{strategy}_r{ratio}.dcmask"),
        rewind: crate::lth::RewindPoint::PreFinetune,
        teacher_support_overlap: None,
        config_hash: "abc".into(),
    }
}

fn read(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap()
}

#[test]
fn empty_comparisons_give_header_only_csvs() {
    let dir = tempfile::tempdir().unwrap();
    emit_report(&[], &[], dir.path()).unwrap();
    assert_eq!(read(&dir.path().join("runs.csv")), format!("{RUNS_CSV_HEADER}\n"));
    assert_eq!(read(&dir.path().join("iou_matrix.csv")), format!("{IOU_MATRIX_HEADER}\n"));
    assert_eq!(read(&dir.path().join("head_iou.csv")), format!("{HEAD_IOU_HEADER}\n"));
    assert_eq!(read(&dir.path().join("layer_iou.csv")), format!("{LAYER_IOU_HEADER}\n"));
}

#[test]
fn csvs_follow_schema_and_round_trip_floats() {
    let spec = small_spec();
    let model = Model::new(spec.clone(), 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = random_mask(&model, &mut rng);
    let b = random_mask(&model, &mut rng);
    let result = compare_masks(&a, &b, &HeadMap::from_spec(&spec)).unwrap();
    let comparisons = vec![Comparison {
        ratio: 3.5,
        seed: 0,
        strategy_a: "mag_grad".into(),
        strategy_b: "smoothgrad".into(),
        result: result.clone(),
    }];
    let reports = vec![report("mag_grad", 2.0, 0, 0.7), report("mag_grad", 4.0, 0, 0.6), report("mag_grad", 2.0, 1, 0.9)];
    let dir = tempfile::tempdir().unwrap();
    emit_report(&reports, &comparisons, dir.path()).unwrap();

    for (file, header, rows) in [
        ("runs.csv", RUNS_CSV_HEADER, 3),
        ("iou_matrix.csv", IOU_MATRIX_HEADER, 1),
        ("head_iou.csv", HEAD_IOU_HEADER, 4),
        ("layer_iou.csv", LAYER_IOU_HEADER, 2),
    ] {
        let text = read(&dir.path().join(file));
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some(header));
        let width = header.split(',').count();
        let body: Vec<&str> = lines.collect();
        assert_eq!(body.len(), rows, "{file}");
        assert!(body.iter().all(|l| l.split(',').count() == width), "{file}");
    }

    let runs = read(&dir.path().join("runs.csv"));
    let first: Vec<&str> = runs.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(first[4].parse::<f64>().unwrap(), reports[0].pre_metric);
    assert_eq!(first[5].parse::<f64>().unwrap(), reports[0].post_metric);
    assert_eq!(first[7].parse::<f64>().unwrap(), reports[0].kept_fraction);
    let matrix = read(&dir.path().join("iou_matrix.csv"));
    let row: Vec<&str> = matrix.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(row[4].parse::<f64>().unwrap(), result.mean_iou);
    assert_eq!(row[5].parse::<f64>().unwrap(), result.min_iou);

    let plot = read(&dir.path().join("plots/metric_vs_ratio_planted_classify_mag_grad.txt"));
    let data: Vec<&str> = plot.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(data, vec!["ratio accuracy", "2 0.8", "4 0.6"]);
    assert!(plot.contains("# strategy: mag_grad"));
    let curve = read(&dir.path().join("plots/layer_iou_mag_grad_vs_smoothgrad_r3.5.txt"));
    assert!(curve.contains("# ratio: 3.5"));
    assert_eq!(curve.lines().filter(|l| !l.starts_with('#')).count(), 3);
}

#[test]
fn unwritable_directory_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    std::fs::write(&blocker, b"x").unwrap();
    assert!(matches!(emit_report(&[], &[], &blocker.join("out")), Err(Error::Io { .. })));
}

proptest! {
    #[test]
    fn iou_is_symmetric_reflexive_and_bounded(
        pair in (1usize..300).prop_flat_map(|n| (prop::collection::vec(any::<bool>(), n), prop::collection::vec(any::<bool>(), n)))
    ) {
        let (a, b) = pair;
        let ma = mask(&[("t", a.clone())]);
        let mb = mask(&[("t", b.clone())]);
        let ab = mask_iou(&ma, &mb).unwrap()[0].iou();
        prop_assert_eq!(ab, mask_iou(&mb, &ma).unwrap()[0].iou());
        prop_assert_eq!(mask_iou(&ma, &ma).unwrap()[0].iou(), 1.0);
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert_eq!(ab, set_oracle(&a, &b));
    }
}
