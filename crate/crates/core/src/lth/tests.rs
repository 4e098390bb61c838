use super::*;
use crate::nn::{Activation, ForwardOptions, BYTE_VOCAB};
use crate::strategies::StrategyKind;
use crate::tasks::{collate, make_planted_task};

fn planted_mlp(kind: StrategyKind, ratio: f64, seed: u64, n_train: usize) -> PipelineConfig {
    PipelineConfig {
        task: TaskSpec {
            n_train,
            n_val: 200,
            seed,
            teacher_sparsity: 0.5,
            ..TaskSpec::new(TaskKind::PlantedClassify)
        },
        model: ModelSpec {
            arch: Arch::Mlp {
                widths: vec![BYTE_VOCAB, 10],
                activation: Activation::Gelu,
            },
            task_head: TaskHead::Classifier { n_classes: 2 },
            init_std: 0.5,
        },
        strategy: StrategyConfig::new(kind),
        ratio,
        schedule: TrainSchedule {
            learning_rate: 2e-3,
            ..TrainSchedule::classification()
        },
        seed,
        rewind: RewindPoint::PreFinetune,
        config_hash: "test".into(),
    }
}

fn tiny_model() -> Model {
    Model::new(
        ModelSpec {
            arch: Arch::Miniformer {
                vocab_size: BYTE_VOCAB,
                d_model: 8,
                n_layers: 1,
                n_heads: 2,
                d_ffn: 16,
                max_seq_len: 32,
            },
            task_head: TaskHead::Classifier { n_classes: 2 },
            init_std: 0.1,
        },
        3,
    )
    .unwrap()
}

#[test]
fn rewind_restores_values_and_outputs() {
    let mut model = tiny_model();
    let data = make_task(&TaskSpec {
        n_train: 6,
        ..TaskSpec::new(TaskKind::PlantedClassify)
    })
    .unwrap();
    let batch = collate(&data.train).unwrap();
    let before = model.forward(&batch.inputs, &ForwardOptions::plain()).unwrap();
    let snap = snapshot(&model, 7);
    assert!(snap.optimizer_reset);
    assert_eq!(snap.seed, 7);

    for p in model.params_mut() {
        for v in p.tensor.values_mut() {
            *v += 0.25;
        }
    }
    assert_ne!(model.forward(&batch.inputs, &ForwardOptions::plain()).unwrap(), before);

    rewind(&mut model, &snap).unwrap();
    assert_eq!(snapshot(&model, 7), snap);
    rewind(&mut model, &snap).unwrap();
    assert_eq!(snapshot(&model, 7), snap);
    let after = model.forward(&batch.inputs, &ForwardOptions::plain()).unwrap();
    assert_eq!(after.values(), before.values());

    let other = Model::new(planted_mlp(StrategyKind::LayerMagGrad, 2.0, 0, 10).model, 0).unwrap();
    let mut tiny = tiny_model();
    assert!(matches!(rewind(&mut tiny, &snapshot(&other, 0)), Err(Error::Consistency(_))));
}

#[test]
fn zero_epochs_are_rejected() {
    let config = planted_mlp(StrategyKind::LayerMagGrad, 2.0, 0, 50);
    let data = make_task(&config.task).unwrap();
    let splits = split_dataset(&data, 0);
    let mut model = Model::new(config.model.clone(), 0).unwrap();
    let err = finetune(&mut model, &splits, &config.schedule, 0, None, 0).unwrap_err();
    assert!(matches!(err, Error::Validation(_)));
    let bad = TrainSchedule {
        early_stopping_patience: 0,
        ..config.schedule
    };
    assert!(bad.validate().is_err());
}

#[test]
fn split_holds_out_a_tenth() {
    let config = planted_mlp(StrategyKind::LayerMagGrad, 2.0, 0, 95);
    let data = make_task(&config.task).unwrap();
    let s = split_dataset(&data, 1);
    assert_eq!(s.early_stop.len(), 9);
    assert_eq!(s.train.len(), 86);
    assert_eq!(s.eval, data.val);
    let mut all: Vec<_> = s.train.iter().chain(&s.early_stop).cloned().collect();
    let mut expected = data.train.clone();
    let key = |e: &Example| e.token_ids.clone();
    all.sort_by_key(key);
    expected.sort_by_key(key);
    assert_eq!(all, expected);
}

#[test]
fn default_miniformer_learns_the_planted_task_within_five_epochs() {
    let dataset = make_planted_task(&TaskSpec::new(TaskKind::PlantedClassify)).unwrap();
    let splits = split_dataset(&dataset, 0);
    let mut model = Model::new(ModelSpec::miniformer_default(TaskHead::Classifier { n_classes: 2 }), 0).unwrap();
    let schedule = TrainSchedule {
        early_stopping_patience: 5,
        ..TrainSchedule::classification()
    };
    finetune(&mut model, &splits, &schedule, 5, None, 0).unwrap();
    let acc = evaluate(&mut model, &splits.train, EvalMetric::Accuracy, 64).unwrap();
    assert!(acc >= 0.95, "train accuracy {acc}");
}

#[test]
fn masked_finetune_keeps_masked_weights_at_zero() {
    let config = planted_mlp(StrategyKind::LayerMagWeight, 3.0, 1, 400);
    let data = make_task(&config.task).unwrap();
    let splits = split_dataset(&data, 0);
    let mut model = Model::new(config.model.clone(), 0).unwrap();
    let acc = ImportanceAccumulator::from_entries(
        model
            .prunable()
            .map(|p| crate::strategies::ScoreEntry {
                path: p.path.clone(),
                kind: p.kind,
                shape: p.tensor.shape().to_vec(),
                scores: crate::strategies::score_mag_weight(&p.tensor),
            })
            .collect(),
        config.strategy,
        0,
        model.n_total(),
    )
    .unwrap();
    let mask = build_mask(&acc, &CompressionSpec::for_model(&model, 3.0)).unwrap();
    let schedule = TrainSchedule {
        early_stopping_patience: 8,
        ..config.schedule
    };
    let out = finetune(&mut model, &splits, &schedule, 4, Some(&mask), 0).unwrap();
    assert_eq!(out.history.len(), 4);
    assert!(out.history.iter().all(|r| r.masked_linf == 0.0));
    assert_eq!(masked_linf(&model, &mask), 0.0);
}

#[test]
fn divergence_reports_epoch_and_batch() {
    let mut config = planted_mlp(StrategyKind::LayerMagGrad, 2.0, 0, 60);
    config.schedule.learning_rate = 1e300;
    let data = make_task(&config.task).unwrap();
    let splits = split_dataset(&data, 0);
    let mut model = Model::new(config.model.clone(), 0).unwrap();
    let err = finetune(&mut model, &splits, &config.schedule, 2, None, 0).unwrap_err();
    let Error::Training { epoch, batch, detail } = &err else {
        panic!("{err}")
    };
    assert_eq!(*epoch, 1);
    assert!(*batch >= 1, "{batch}");
    assert!(detail.contains("numeric"), "{detail}");
    assert_eq!(err.exit_code(), 4);
}

#[test]
fn pipeline_runs_stages_in_order_and_keeps_the_mask() {
    let config = planted_mlp(StrategyKind::LayerGradcamShift, 3.5, 2, 300);
    let out = single_shot_prune(&config, None).unwrap();
    assert_eq!(out.stages, STAGES.to_vec());
    assert!(out.final_finetune.history.iter().all(|r| r.masked_linf == 0.0));
    let r = &out.report;
    assert!(r.batches_scored > 0);
    assert!([r.pre_metric, r.post_metric, r.final_metric].iter().all(|m| (0.0..=1.0).contains(m)));
    assert!(r.kept_fraction > 0.0 && r.kept_fraction < 1.0);
    assert_eq!(r.mask_path, "seed2/masks/layer_gradcam_shift_r3.5.dcmask");
    assert!(r.teacher_support_overlap.is_some());

    let again = single_shot_prune(&config, None).unwrap();
    assert_eq!(again.mask, out.mask);
    assert_eq!(
        RunReport {
            wall_seconds: 0.0,
            ..again.report
        },
        RunReport {
            wall_seconds: 0.0,
            ..out.report.clone()
        }
    );
}

#[test]
fn ratio_one_matches_an_unpruned_finetune() {
    let config = planted_mlp(StrategyKind::LayerMagWeight, 1.0, 3, 300);
    let out = single_shot_prune(&config, None).unwrap();
    assert!(out.mask.entries.iter().all(|e| e.bits.iter().all(|&b| b)));
    assert_eq!(out.report.kept_fraction, 1.0);

    // Same rewind and schedule without any mask.
    let trained = prepare(&config, None).unwrap();
    let mut model = trained.model.clone();
    rewind(&mut model, &trained.snapshot).unwrap();
    finetune(&mut model, &trained.splits, &config.schedule, config.schedule.final_epochs, None, mix(3, 5)).unwrap();
    let dense = evaluate(&mut model, &trained.splits.eval, EvalMetric::Accuracy, 64).unwrap();
    assert_eq!(out.report.final_metric, dense);
}

#[test]
fn post_finetune_rewind_starts_from_trained_weights() {
    let mut config = planted_mlp(StrategyKind::LayerMagGrad, 2.0, 4, 300);
    config.rewind = RewindPoint::PostFinetune;
    let trained = prepare(&config, None).unwrap();
    assert_eq!(trained.snapshot, snapshot(&trained.model, 4));
    let out = single_shot_prune(&config, None).unwrap();
    assert_eq!(out.report.rewind, RewindPoint::PostFinetune);

    config.rewind = RewindPoint::PreFinetune;
    let pre = prepare(&config, None).unwrap();
    assert_eq!(pre.snapshot, snapshot(&Model::new(config.model.clone(), init_seed(4)).unwrap(), 4));
}

#[test]
fn gradient_scores_cover_the_teacher_better_than_magnitude() {
    let mag = single_shot_prune(&planted_mlp(StrategyKind::LayerMagWeight, 4.0, 0, 2000), None).unwrap();
    let cam = single_shot_prune(&planted_mlp(StrategyKind::LayerGradcamShift, 4.0, 0, 2000), None).unwrap();
    let (m, c) = (
        mag.report.teacher_support_overlap.unwrap(),
        cam.report.teacher_support_overlap.unwrap(),
    );
    assert!(c > m, "gradcam {c} vs magnitude {m}");
}

#[test]
fn stage_errors_are_labelled() {
    let mut config = planted_mlp(StrategyKind::LayerMagGrad, 1000.0, 0, 100);
    config.schedule.initial_epochs = 1;
    let err = single_shot_prune(&config, None).unwrap_err();
    let Error::Stage { stage, .. } = &err else { panic!("{err}") };
    assert_eq!(*stage, "build_mask");
    assert!(matches!(err.root(), Error::Infeasible { .. }));
    assert_eq!(err.exit_code(), 5);

    let mut config = planted_mlp(StrategyKind::LayerMagGrad, 2.0, 0, 100);
    config.model.task_head = TaskHead::ScaledSigmoidRegressor;
    assert!(matches!(config.validate(), Err(Error::Validation(_))));
}

#[test]
fn failed_runs_leave_earlier_artifacts_behind() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = planted_mlp(StrategyKind::LayerMagGrad, 1000.0, 0, 100);
    config.schedule.initial_epochs = 1;
    assert!(single_shot_prune(&config, Some(dir.path())).is_err());
    assert!(layout::init_checkpoint(dir.path(), 0).exists());
    assert!(layout::trained_checkpoint(dir.path(), 0).exists());
    assert!(layout::scores(dir.path(), 0, StrategyKind::LayerMagGrad).exists());
}

#[test]
fn report_record_round_trips() {
    let config = planted_mlp(StrategyKind::LayerSmoothgrad, 2.0, 1, 200);
    let dir = tempfile::tempdir().unwrap();
    let out = single_shot_prune(&config, Some(dir.path())).unwrap();
    let text = std::fs::read_to_string(layout::report(dir.path(), 1, StrategyKind::LayerSmoothgrad, 2.0)).unwrap();
    assert_eq!(RunReport::from_record(&text).unwrap(), out.report);
    assert!(dir.path().join(&out.report.mask_path).exists());
    assert_eq!(out.report.csv_row().split(',').count(), RUNS_CSV_HEADER.split(',').count());
    assert!(RunReport::from_record("task = x\n").is_err());
}
