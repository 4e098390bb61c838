//! Single-shot lottery-ticket pipeline:
//! snapshot → initial fine-tune → score → mask → rewind → apply mask →
//! final fine-tune → evaluate.

use std::path::Path;
use std::time::Instant;

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, StageExt};
use crate::masking::{apply_mask, build_mask, masked_linf, write_mask, CompressionSpec, PruneMask};
use crate::nn::{
    read_checkpoint, regression_prediction, write_checkpoint, AdamConfig, AdamState, Arch, Model, ModelSpec, TaskHead,
};
use crate::strategies::{accumulate_scores, write_scores, ImportanceAccumulator, StrategyConfig};
use crate::tasks::{batches, make_task, Dataset, Example, TaskKind, TaskSpec, Teacher, TOKEN_OFFSET};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMetric {
    Accuracy,
    Mse,
}

impl EvalMetric {
    pub fn name(self) -> &'static str {
        match self {
            EvalMetric::Accuracy => "accuracy",
            EvalMetric::Mse => "mse",
        }
    }

    fn better(self, a: f64, b: f64) -> bool {
        match self {
            EvalMetric::Accuracy => a > b,
            EvalMetric::Mse => a < b,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainSchedule {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub initial_epochs: usize,
    pub final_epochs: usize,
    pub early_stopping_patience: usize,
    pub eval_metric: EvalMetric,
}

impl TrainSchedule {
    pub fn classification() -> Self {
        Self {
            batch_size: 16,
            learning_rate: 1e-4,
            initial_epochs: 3,
            final_epochs: 8,
            early_stopping_patience: 3,
            eval_metric: EvalMetric::Accuracy,
        }
    }

    pub fn regression() -> Self {
        Self {
            initial_epochs: 8,
            final_epochs: 10,
            eval_metric: EvalMetric::Mse,
            ..Self::classification()
        }
    }

    pub fn for_task(kind: TaskKind) -> Self {
        if kind.is_regression() {
            Self::regression()
        } else {
            Self::classification()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Validation("batch_size must be >= 1".into()));
        }
        if self.initial_epochs == 0 || self.final_epochs == 0 {
            return Err(Error::Validation("epoch counts must be >= 1".into()));
        }
        if self.early_stopping_patience == 0 {
            return Err(Error::Validation("early_stopping_patience must be >= 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Validation(format!(
                "learning rate {} must be positive",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

/// Which weights the masked network restarts from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewindPoint {
    /// The initialisation, before the first fine-tune.
    #[default]
    PreFinetune,
    /// The fine-tuned weights the scores were computed on.
    PostFinetune,
}

impl RewindPoint {
    pub fn name(self) -> &'static str {
        match self {
            RewindPoint::PreFinetune => "pre_finetune",
            RewindPoint::PostFinetune => "post_finetune",
        }
    }
}

/// Parameter values at a rewind point.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    paths: Vec<String>,
    values: Vec<Vec<f64>>,
    /// Restoring always starts the optimiser from scratch.
    pub optimizer_reset: bool,
    pub seed: u64,
}

pub fn snapshot(model: &Model, seed: u64) -> Snapshot {
    Snapshot {
        paths: model.params().iter().map(|p| p.path.clone()).collect(),
        values: model.flat_values(),
        optimizer_reset: true,
        seed,
    }
}

/// Restores the snapshot values bitwise. Optimiser state lives with each
/// fine-tune call, so every fine-tune after a rewind starts fresh.
pub fn rewind(model: &mut Model, snap: &Snapshot) -> Result<()> {
    if snap.paths.len() != model.params().len() || snap.paths.iter().zip(model.params()).any(|(a, p)| *a != p.path) {
        return Err(Error::Consistency("snapshot was taken from a different model".into()));
    }
    model.load_flat_values(&snap.values)?;
    model.clear_caches();
    Ok(())
}

/// Train / early-stopping / evaluation examples of one run.
#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Vec<Example>,
    pub early_stop: Vec<Example>,
    pub eval: Vec<Example>,
}

/// Holds out 10% of the training set (at least one example) for early stopping.
pub fn split_dataset(dataset: &Dataset, seed: u64) -> Splits {
    let mut order: Vec<usize> = (0..dataset.train.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let held = if dataset.train.len() > 1 {
        (dataset.train.len() / 10).max(1)
    } else {
        0
    };
    let early_stop = order[..held].iter().map(|&i| dataset.train[i].clone()).collect();
    let mut rest: Vec<usize> = order[held..].to_vec();
    rest.sort_unstable();
    let train = rest.iter().map(|&i| dataset.train[i].clone()).collect();
    let eval = if dataset.val.is_empty() {
        dataset.train.clone()
    } else {
        dataset.val.clone()
    };
    Splits {
        train,
        early_stop: if held == 0 { dataset.train.clone() } else { early_stop },
        eval,
    }
}

/// Accuracy in `[0, 1]` or mean squared error of the `[0, 5]` prediction.
pub fn evaluate(model: &mut Model, examples: &[Example], metric: EvalMetric, batch_size: usize) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::Data("nothing to evaluate".into()));
    }
    let mut total = 0.0;
    for batch in batches(examples, batch_size.max(1), None)? {
        let out = model.predict(&batch.inputs)?;
        let cols = out.shape()[1];
        for (i, row) in out.values().chunks(cols).enumerate() {
            total += match (metric, &batch.targets) {
                (EvalMetric::Accuracy, crate::nn::Targets::Classes(labels)) => {
                    let argmax = row
                        .iter()
                        .enumerate()
                        .fold(0, |best, (c, v)| if *v > row[best] { c } else { best });
                    f64::from(u8::from(argmax == labels[i]))
                }
                (EvalMetric::Mse, crate::nn::Targets::Scores(t)) => {
                    let d = regression_prediction(row[0]) - t[i];
                    d * d
                }
                _ => return Err(Error::Validation("metric does not fit the task labels".into())),
            };
        }
    }
    Ok(total / examples.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_metric: f64,
    /// Largest magnitude among masked parameters after the epoch.
    pub masked_linf: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneOutcome {
    pub best_metric: f64,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub history: Vec<EpochRecord>,
}

fn mix(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Adam fine-tuning with early stopping on `splits.early_stop`. The model is
/// left at its best-scoring epoch. Masked elements stay exactly zero.
pub fn finetune(
    model: &mut Model,
    splits: &Splits,
    schedule: &TrainSchedule,
    epochs: usize,
    mask: Option<&PruneMask>,
    seed: u64,
) -> Result<FinetuneOutcome> {
    schedule.validate()?;
    if epochs == 0 {
        return Err(Error::Validation("fine-tuning needs at least one epoch".into()));
    }
    if let Some(mask) = mask {
        apply_mask(model, mask)?;
    }
    let adam = AdamConfig::with_lr(schedule.learning_rate);
    let mut state = AdamState::new(model);
    let metric = schedule.eval_metric;
    let mut best = (evaluate(model, &splits.early_stop, metric, 64)?, 0usize, model.flat_values());
    let mut history = Vec::new();
    let mut since_best = 0;
    for epoch in 1..=epochs {
        let mut loss_sum = 0.0;
        let stream = batches(&splits.train, schedule.batch_size, Some(mix(seed, epoch as u64)))?;
        if stream.is_empty() {
            return Err(Error::Data("empty training split".into()));
        }
        for (b, batch) in stream.iter().enumerate() {
            let loss = model
                .forward_backward(batch, &Default::default())
                .map_err(|e| Error::Training {
                    epoch,
                    batch: b,
                    detail: e.to_string(),
                })?;
            loss_sum += loss;
            state.step(model, &adam, mask)?;
        }
        let val = evaluate(model, &splits.early_stop, metric, 64)?;
        history.push(EpochRecord {
            epoch,
            train_loss: loss_sum / stream.len() as f64,
            val_metric: val,
            masked_linf: mask.map_or(0.0, |m| masked_linf(model, m)),
        });
        if metric.better(val, best.0) || best.1 == 0 {
            best = (val, epoch, model.flat_values());
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= schedule.early_stopping_patience {
                break;
            }
        }
    }
    model.load_flat_values(&best.2)?;
    model.zero_grads();
    Ok(FinetuneOutcome {
        best_metric: best.0,
        best_epoch: best.1,
        epochs_run: history.len(),
        history,
    })
}

/// Everything one pipeline execution needs.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub task: TaskSpec,
    pub model: ModelSpec,
    pub strategy: StrategyConfig,
    pub ratio: f64,
    pub schedule: TrainSchedule,
    pub seed: u64,
    pub rewind: RewindPoint,
    pub config_hash: String,
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        self.model.validate()?;
        self.strategy.validate()?;
        self.schedule.validate()?;
        if !(self.ratio.is_finite() && self.ratio >= 1.0) {
            return Err(Error::Validation(format!("ratio {} must be >= 1", self.ratio)));
        }
        let want_regression = self.task.kind.is_regression();
        let has_regression = matches!(self.model.task_head, TaskHead::ScaledSigmoidRegressor);
        if want_regression != has_regression {
            return Err(Error::Validation(format!(
                "task {} is incompatible with the model head",
                self.task.kind.name()
            )));
        }
        let metric_ok = match self.schedule.eval_metric {
            EvalMetric::Accuracy => !want_regression,
            EvalMetric::Mse => want_regression,
        };
        if !metric_ok {
            return Err(Error::Validation(format!(
                "{} cannot score task {}",
                self.schedule.eval_metric.name(),
                self.task.kind.name()
            )));
        }
        Ok(())
    }
}

/// Metrics of one pipeline execution.
#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub task: String,
    pub strategy: String,
    pub ratio: f64,
    pub seed: u64,
    pub metric: EvalMetric,
    pub pre_metric: f64,
    pub post_metric: f64,
    pub final_metric: f64,
    pub kept_fraction: f64,
    pub epochs_run: usize,
    pub batches_scored: usize,
    pub wall_seconds: f64,
    pub mask_path: String,
    pub rewind: RewindPoint,
    /// Share of first-layer weights reading teacher-support tokens that
    /// survive the mask (MLP models on the planted task only).
    pub teacher_support_overlap: Option<f64>,
    pub config_hash: String,
}

pub const RUNS_CSV_HEADER: &str =
    "task,strategy,ratio,seed,pre_metric,post_metric,final_metric,kept_fraction,wall_seconds,mask_path";

impl RunReport {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.task,
            self.strategy,
            self.ratio,
            self.seed,
            self.pre_metric,
            self.post_metric,
            self.final_metric,
            self.kept_fraction,
            self.wall_seconds,
            self.mask_path
        )
    }

    /// Flat `key = value` record.
    pub fn to_record(&self) -> String {
        let mut lines = vec![
            format!("task = {}", self.task),
            format!("strategy = {}", self.strategy),
            format!("ratio = {}", self.ratio),
            format!("seed = {}", self.seed),
            format!("metric = {}", self.metric.name()),
            format!("pre_metric = {}", self.pre_metric),
            format!("post_metric = {}", self.post_metric),
            format!("final_metric = {}", self.final_metric),
            format!("kept_fraction = {}", self.kept_fraction),
            format!("epochs_run = {}", self.epochs_run),
            format!("batches_scored = {}", self.batches_scored),
            format!("wall_seconds = {}", self.wall_seconds),
            format!("mask_path = {}", self.mask_path),
            format!("rewind = {}", self.rewind.name()),
            format!("config_hash = {}", self.config_hash),
        ];
        if let Some(o) = self.teacher_support_overlap {
            lines.push(format!("teacher_support_overlap = {o}"));
        }
        lines.join("\n") + "\n"
    }

    pub fn from_record(text: &str) -> Result<Self> {
        let get = |key: &str| -> Result<&str> {
            text.lines()
                .filter_map(|l| l.split_once('='))
                .find(|(k, _)| k.trim() == key)
                .map(|(_, v)| v.trim())
                .ok_or_else(|| Error::Format(format!("report record lacks `{key}`")))
        };
        let num = |key: &str| -> Result<f64> {
            get(key)?
                .parse()
                .map_err(|_| Error::Format(format!("report field `{key}` is not a number")))
        };
        let metric = match get("metric")? {
            "accuracy" => EvalMetric::Accuracy,
            "mse" => EvalMetric::Mse,
            other => return Err(Error::Format(format!("unknown metric {other}"))),
        };
        let rewind = match get("rewind")? {
            "pre_finetune" => RewindPoint::PreFinetune,
            "post_finetune" => RewindPoint::PostFinetune,
            other => return Err(Error::Format(format!("unknown rewind point {other}"))),
        };
        Ok(Self {
            task: get("task")?.to_string(),
            strategy: get("strategy")?.to_string(),
            ratio: num("ratio")?,
            seed: num("seed")? as u64,
            metric,
            pre_metric: num("pre_metric")?,
            post_metric: num("post_metric")?,
            final_metric: num("final_metric")?,
            kept_fraction: num("kept_fraction")?,
            epochs_run: num("epochs_run")? as usize,
            batches_scored: num("batches_scored")? as usize,
            wall_seconds: num("wall_seconds")?,
            mask_path: get("mask_path")?.to_string(),
            rewind,
            teacher_support_overlap: get("teacher_support_overlap").ok().and_then(|v| v.parse().ok()),
            config_hash: get("config_hash")?.to_string(),
        })
    }
}

/// Result of [`single_shot_prune`]: the report plus the artefacts and the
/// ordered stage trail.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub report: RunReport,
    pub mask: PruneMask,
    pub stages: Vec<&'static str>,
    pub final_finetune: FinetuneOutcome,
    /// The pruned model after the final fine-tune.
    pub model: Model,
}

pub const STAGES: [&str; 8] = [
    "snapshot",
    "initial_finetune",
    "score",
    "build_mask",
    "rewind",
    "apply_mask",
    "final_finetune",
    "evaluate",
];

struct StageLog {
    stages: Vec<&'static str>,
    label: String,
}

impl StageLog {
    fn enter(&mut self, stage: &'static str) {
        info!(target: "deepcuts::stage", "{} stage={stage}", self.label);
        self.stages.push(stage);
    }
}

/// Artefact locations below an output directory.
pub mod layout {
    use std::path::{Path, PathBuf};

    use crate::strategies::StrategyKind;

    pub fn seed_dir(out: &Path, seed: u64) -> PathBuf {
        out.join(format!("seed{seed}"))
    }
    pub fn init_checkpoint(out: &Path, seed: u64) -> PathBuf {
        seed_dir(out, seed).join("init.dcmodel")
    }
    pub fn trained_checkpoint(out: &Path, seed: u64) -> PathBuf {
        seed_dir(out, seed).join("finetuned.dcmodel")
    }
    pub fn scores(out: &Path, seed: u64, kind: StrategyKind) -> PathBuf {
        seed_dir(out, seed).join("scores").join(format!("{kind}.dcscore"))
    }
    /// Relative to the output directory, as recorded in reports.
    pub fn mask_rel(seed: u64, kind: StrategyKind, ratio: f64) -> PathBuf {
        PathBuf::from(format!("seed{seed}")).join("masks").join(format!("{kind}_r{ratio}.dcmask"))
    }
    pub fn report(out: &Path, seed: u64, kind: StrategyKind, ratio: f64) -> PathBuf {
        seed_dir(out, seed).join("reports").join(format!("{kind}_r{ratio}.txt"))
    }
}

/// State shared by every (strategy, ratio) cell of one seed: the data, the
/// rewind snapshot and the fine-tuned model.
#[derive(Debug, Clone)]
pub struct Trained {
    pub splits: Splits,
    pub teacher: Teacher,
    pub snapshot: Snapshot,
    pub model: Model,
    pub pre_metric: f64,
    pub seconds: f64,
}

pub(crate) fn init_seed(seed: u64) -> u64 {
    mix(seed, 1)
}

/// Stages one and two: build the data and model, snapshot, fine-tune.
/// The snapshot follows `config.rewind`.
pub fn prepare(config: &PipelineConfig, out: Option<&Path>) -> Result<Trained> {
    let started = Instant::now();
    config.validate()?;
    let dataset = make_task(&config.task).stage("data")?;
    let splits = split_dataset(&dataset, mix(config.seed, 2));
    let mut model = Model::new(config.model.clone(), init_seed(config.seed)).stage("snapshot")?;
    let init = snapshot(&model, config.seed);
    let provenance = checkpoint_provenance(config);
    if let Some(out) = out {
        write_checkpoint(&model, &layout::init_checkpoint(out, config.seed), &provenance).stage("snapshot")?;
    }
    let ft = finetune(
        &mut model,
        &splits,
        &config.schedule,
        config.schedule.initial_epochs,
        None,
        mix(config.seed, 3),
    )
    .stage("initial_finetune")?;
    if let Some(out) = out {
        write_checkpoint(&model, &layout::trained_checkpoint(out, config.seed), &provenance)
            .stage("initial_finetune")?;
    }
    let pre_metric = evaluate(&mut model, &splits.eval, config.schedule.eval_metric, 64).stage("initial_finetune")?;
    info!(
        target: "deepcuts::stage",
        "seed={} initial fine-tune: best epoch {} of {}, eval {}={pre_metric}",
        config.seed,
        ft.best_epoch,
        ft.epochs_run,
        config.schedule.eval_metric.name()
    );
    let snapshot = match config.rewind {
        RewindPoint::PreFinetune => init,
        RewindPoint::PostFinetune => snapshot(&model, config.seed),
    };
    Ok(Trained {
        splits,
        teacher: dataset.teacher,
        snapshot,
        model,
        pre_metric,
        seconds: started.elapsed().as_secs_f64(),
    })
}

/// Rebuilds the state [`prepare`] produced from the checkpoints it wrote.
/// `trained_path` overrides the fine-tuned checkpoint location. Both files
/// must carry `config.config_hash`.
pub fn restore(config: &PipelineConfig, out: &Path, trained_path: Option<&Path>) -> Result<Trained> {
    config.validate()?;
    let load = |path: &Path| -> Result<Model> {
        let ckpt = read_checkpoint(path)?;
        let hash = serde_json::from_str::<serde_json::Value>(&ckpt.provenance)
            .ok()
            .and_then(|v| v.get("config_hash").and_then(|h| h.as_str()).map(str::to_string));
        if hash.as_deref() != Some(config.config_hash.as_str()) {
            return Err(Error::Consistency(format!(
                "{} was written under a different configuration",
                path.display()
            )));
        }
        let mut model = Model::new(config.model.clone(), init_seed(config.seed))?;
        ckpt.apply_to(&mut model)?;
        Ok(model)
    };
    let dataset = make_task(&config.task).stage("data")?;
    let splits = split_dataset(&dataset, mix(config.seed, 2));
    let init = load(&layout::init_checkpoint(out, config.seed)).stage("snapshot")?;
    let default_trained = layout::trained_checkpoint(out, config.seed);
    let mut model = load(trained_path.unwrap_or(&default_trained)).stage("initial_finetune")?;
    let pre_metric = evaluate(&mut model, &splits.eval, config.schedule.eval_metric, 64).stage("initial_finetune")?;
    let snapshot = match config.rewind {
        RewindPoint::PreFinetune => snapshot(&init, config.seed),
        RewindPoint::PostFinetune => snapshot(&model, config.seed),
    };
    Ok(Trained {
        splits,
        teacher: dataset.teacher,
        snapshot,
        model,
        pre_metric,
        seconds: 0.0,
    })
}

fn checkpoint_provenance(config: &PipelineConfig) -> String {
    serde_json::json!({
        "model": config.model,
        "seed": config.seed,
        "config_hash": config.config_hash,
    })
    .to_string()
}

/// Stage three: score the fine-tuned model over the training stream.
pub fn score(trained: &Trained, config: &PipelineConfig) -> Result<ImportanceAccumulator> {
    let mut model = trained.model.clone();
    let stream = batches(&trained.splits.train, config.schedule.batch_size, Some(mix(config.seed, 4)))?;
    let mut acc = accumulate_scores(&mut model, &stream, &config.strategy, config.seed)?;
    acc.config_hash = config.config_hash.clone();
    Ok(acc)
}

/// Remaining stages for one ratio, given precomputed scores.
pub fn finish(
    trained: &Trained,
    acc: &ImportanceAccumulator,
    config: &PipelineConfig,
    out: Option<&Path>,
    mut log: Vec<&'static str>,
) -> Result<RunOutcome> {
    let started = Instant::now();
    let mut stages = StageLog {
        stages: std::mem::take(&mut log),
        label: format!(
            "seed={} strategy={} ratio={}",
            config.seed, config.strategy.kind, config.ratio
        ),
    };
    let mut model = trained.model.clone();

    stages.enter("build_mask");
    let spec = CompressionSpec::for_model(&model, config.ratio);
    let mut mask = build_mask(acc, &spec).stage("build_mask")?;
    mask.provenance.seed = config.seed;
    let mask_rel = layout::mask_rel(config.seed, config.strategy.kind, config.ratio);
    if let Some(out) = out {
        write_mask(&mask, &out.join(&mask_rel)).stage("build_mask")?;
    }

    stages.enter("rewind");
    rewind(&mut model, &trained.snapshot).stage("rewind")?;

    stages.enter("apply_mask");
    apply_mask(&mut model, &mask).stage("apply_mask")?;
    let metric = config.schedule.eval_metric;
    let post_metric = evaluate(&mut model, &trained.splits.eval, metric, 64).stage("apply_mask")?;

    stages.enter("final_finetune");
    let ft = finetune(
        &mut model,
        &trained.splits,
        &config.schedule,
        config.schedule.final_epochs,
        Some(&mask),
        mix(config.seed, 5),
    )
    .stage("final_finetune")?;

    stages.enter("evaluate");
    let final_metric = evaluate(&mut model, &trained.splits.eval, metric, 64).stage("evaluate")?;
    let residual = masked_linf(&model, &mask);
    if residual != 0.0 {
        return Err(Error::Consistency(format!("masked parameters drifted to {residual}"))).stage("evaluate");
    }

    let report = RunReport {
        task: config.task.kind.name().to_string(),
        strategy: config.strategy.kind.name().to_string(),
        ratio: config.ratio,
        seed: config.seed,
        metric,
        pre_metric: trained.pre_metric,
        post_metric,
        final_metric,
        kept_fraction: mask.provenance.kept_fraction,
        epochs_run: ft.epochs_run,
        batches_scored: acc.batches_consumed,
        wall_seconds: trained.seconds + started.elapsed().as_secs_f64(),
        mask_path: mask_rel.to_string_lossy().replace('\\', "/"),
        rewind: config.rewind,
        teacher_support_overlap: teacher_support_overlap(&model, &mask, &trained.teacher),
        config_hash: config.config_hash.clone(),
    };
    if let Some(out) = out {
        crate::container::write_atomic(
            &layout::report(out, config.seed, config.strategy.kind, config.ratio),
            report.to_record().as_bytes(),
        )
        .stage("evaluate")?;
    }
    Ok(RunOutcome {
        report,
        mask,
        stages: stages.stages,
        final_finetune: ft,
        model,
    })
}

/// Runs the whole single-shot pipeline for one strategy and ratio. With an
/// output directory, checkpoints, scores, the mask and the report are
/// written as each stage completes.
pub fn single_shot_prune(config: &PipelineConfig, out: Option<&Path>) -> Result<RunOutcome> {
    let mut log = StageLog {
        stages: Vec::new(),
        label: format!("seed={} strategy={}", config.seed, config.strategy.kind),
    };
    log.enter("snapshot");
    log.enter("initial_finetune");
    let trained = prepare(config, out)?;
    log.enter("score");
    let acc = score(&trained, config).stage("score")?;
    if let Some(out) = out {
        write_scores(&acc, &layout::scores(out, config.seed, config.strategy.kind)).stage("score")?;
    }
    finish(&trained, &acc, config, out, log.stages)
}

/// For an MLP over bag-of-token features: the share of first-layer weights
/// reading a teacher-support token that the mask keeps.
pub fn teacher_support_overlap(model: &Model, mask: &PruneMask, teacher: &Teacher) -> Option<f64> {
    let Arch::Mlp { widths, .. } = &model.spec().arch else {
        return None;
    };
    if widths.len() < 2 || !matches!(teacher, Teacher::SparseLinear { .. }) {
        return None;
    }
    let bits = mask.bits("encoder.layer0.dense.weight")?;
    let d_in = widths[0];
    let support: Vec<usize> = teacher
        .support()
        .into_iter()
        .map(|s| (b'a' as usize + s) + TOKEN_OFFSET as usize)
        .filter(|&t| t < d_in)
        .collect();
    let on_support: Vec<bool> = bits
        .iter()
        .enumerate()
        .filter(|(i, _)| support.contains(&(i % d_in)))
        .map(|(_, &b)| b)
        .collect();
    if on_support.is_empty() {
        return None;
    }
    Some(on_support.iter().filter(|&&b| b).count() as f64 / on_support.len() as f64)
}

#[cfg(test)]
mod tests;
