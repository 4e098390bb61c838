//! Run configuration: flat `key = value` text with dotted keys.
//!
//! ```text
//! # planted task, bag-of-tokens MLP
//! task.kind = planted_classify
//! model.arch = mlp
//! model.widths = 259, 10
//! strategies = all
//! ratios = 2, 3, 3.5, 4
//! seeds = 0..5
//! ```
//!
//! Blank lines and `#` comments are ignored. Every key may appear once;
//! `--set key=value` overrides are applied afterwards. Unset keys take the
//! defaults listed in [`KEYS`].

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::lth::{EvalMetric, PipelineConfig, RewindPoint, TrainSchedule};
use crate::nn::{Activation, Arch, ModelSpec, NoiseMode, TaskHead, BYTE_VOCAB};
use crate::strategies::{StrategyConfig, StrategyKind, DEFAULT_GRAD_BUDGET, DEFAULT_SMOOTH_BUDGET};
use crate::tasks::{TaskKind, TaskSpec};

/// Environment variable supplying the seed list when `seeds` is unset.
pub const SEED_ENV: &str = "DEEPCUTS_SEED";

/// Every accepted key.
pub const KEYS: &[&str] = &[
    "task.kind",
    "task.n_train",
    "task.n_val",
    "task.seed",
    "task.alphabet",
    "task.min_len",
    "task.max_len",
    "task.teacher_sparsity",
    "task.max_seq_len",
    "model.arch",
    "model.widths",
    "model.activation",
    "model.vocab_size",
    "model.d_model",
    "model.n_layers",
    "model.n_heads",
    "model.d_ffn",
    "model.max_seq_len",
    "model.init_std",
    "model.n_classes",
    "strategies",
    "strategy.lambda",
    "strategy.eta",
    "strategy.noise_variance",
    "strategy.noise_mode",
    "strategy.grad_batch_budget",
    "strategy.smooth_batch_budget",
    "strategy.relu_cam",
    "ratios",
    "train.batch_size",
    "train.learning_rate",
    "train.initial_epochs",
    "train.final_epochs",
    "train.early_stopping_patience",
    "train.eval_metric",
    "seeds",
    "out",
    "rewind",
];

/// A whole sweep: every strategy × ratio × seed cell shares the task,
/// model and schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub task: TaskSpec,
    /// Fixed data seed; `None` draws the data from each run seed.
    pub task_seed: Option<u64>,
    pub model: ModelSpec,
    pub strategies: Vec<StrategyConfig>,
    pub ratios: Vec<f64>,
    pub schedule: TrainSchedule,
    pub seeds: Vec<u64>,
    pub out: PathBuf,
    pub rewind: RewindPoint,
}

struct Raw {
    values: BTreeMap<String, (usize, String)>,
}

impl Raw {
    fn get(&self, key: &str) -> Option<&(usize, String)> {
        self.values.get(key)
    }

    fn parse<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.get(key) {
            None => Ok(None),
            Some((line, v)) => v.parse().map(Some).map_err(|_| Error::Config {
                line: *line,
                field: key.to_string(),
                detail: format!("cannot parse `{v}`"),
            }),
        }
    }

    fn list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>> {
        let Some((line, v)) = self.get(key) else { return Ok(None) };
        v.split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse().map_err(|_| Error::Config {
                    line: *line,
                    field: key.to_string(),
                    detail: format!("cannot parse list item `{s}`"),
                })
            })
            .collect::<Result<Vec<T>>>()
            .map(Some)
    }

    fn fail(&self, key: &str, detail: impl Into<String>) -> Error {
        Error::Config {
            line: self.get(key).map_or(0, |(l, _)| *l),
            field: key.to_string(),
            detail: detail.into(),
        }
    }
}

fn read_lines(text: &str) -> Result<BTreeMap<String, (usize, String)>> {
    let mut values = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let (k, v) = content.split_once('=').ok_or_else(|| Error::Config {
            line,
            field: content.to_string(),
            detail: "expected `key = value`".into(),
        })?;
        let key = k.trim().to_string();
        if !KEYS.contains(&key.as_str()) {
            return Err(Error::Config {
                line,
                field: key,
                detail: "unknown key".into(),
            });
        }
        if let Some((first, _)) = values.insert(key.clone(), (line, v.trim().to_string())) {
            return Err(Error::Config {
                line,
                field: key,
                detail: format!("already set on line {first}"),
            });
        }
    }
    Ok(values)
}

fn parse_seeds(raw: &Raw, key: &str) -> Result<Option<Vec<u64>>> {
    let Some((_, v)) = raw.get(key) else { return Ok(None) };
    if let Some((a, b)) = v.split_once("..") {
        let (a, b): (u64, u64) = (
            a.trim().parse().map_err(|_| raw.fail(key, format!("bad range start in `{v}`")))?,
            b.trim().parse().map_err(|_| raw.fail(key, format!("bad range end in `{v}`")))?,
        );
        if a >= b {
            return Err(raw.fail(key, format!("empty seed range `{v}`")));
        }
        return Ok(Some((a..b).collect()));
    }
    raw.list(key)
}

fn parse_enum<T>(raw: &Raw, key: &str, parse: impl Fn(&str) -> Option<T>, accepted: &str) -> Result<Option<T>> {
    match raw.get(key) {
        None => Ok(None),
        Some((_, v)) => parse(v)
            .map(Some)
            .ok_or_else(|| raw.fail(key, format!("`{v}` is not one of {accepted}"))),
    }
}

macro_rules! set {
    ($raw:expr, $key:expr, $target:expr) => {
        if let Some(v) = $raw.parse($key)? {
            $target = v;
        }
    };
}

impl RunConfig {
    /// Parses `text`, applies `overrides` (`key=value` strings) and falls
    /// back to `env_seed` for an unset seed list.
    pub fn parse_with(text: &str, overrides: &[String], env_seed: Option<&str>) -> Result<Self> {
        let mut values = read_lines(text)?;
        for o in overrides {
            let (k, v) = o.split_once('=').ok_or_else(|| Error::Config {
                line: 0,
                field: o.clone(),
                detail: "--set expects key=value".into(),
            })?;
            let key = k.trim().to_string();
            if !KEYS.contains(&key.as_str()) {
                return Err(Error::Config {
                    line: 0,
                    field: key,
                    detail: "unknown key in --set".into(),
                });
            }
            values.insert(key, (0, v.trim().to_string()));
        }
        if !values.contains_key("seeds") {
            if let Some(s) = env_seed {
                values.insert("seeds".into(), (0, s.trim().to_string()));
            }
        }
        Self::build(&Raw { values })
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::parse_with(text, &[], None)
    }

    /// Reads a config file, honouring [`SEED_ENV`].
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let env = std::env::var(SEED_ENV).ok();
        Self::parse_with(&text, overrides, env.as_deref())
    }

    fn build(raw: &Raw) -> Result<Self> {
        let kind = parse_enum(raw, "task.kind", TaskKind::parse, "planted_classify, toy_acceptability, toy_pair_regression")?
            .unwrap_or(TaskKind::PlantedClassify);
        let mut task = TaskSpec::new(kind);
        set!(raw, "task.n_train", task.n_train);
        set!(raw, "task.n_val", task.n_val);
        set!(raw, "task.alphabet", task.alphabet);
        set!(raw, "task.min_len", task.min_len);
        set!(raw, "task.max_len", task.max_len);
        set!(raw, "task.teacher_sparsity", task.teacher_sparsity);
        set!(raw, "task.max_seq_len", task.max_seq_len);
        let task_seed: Option<u64> = raw.parse("task.seed")?;
        task.validate().map_err(|e| raw.fail("task.kind", e.to_string()))?;

        let mut n_classes = 2usize;
        set!(raw, "model.n_classes", n_classes);
        let head = if kind.is_regression() {
            TaskHead::ScaledSigmoidRegressor
        } else {
            TaskHead::Classifier { n_classes }
        };
        let arch_name = raw.get("model.arch").map_or("miniformer", |(_, v)| v.as_str());
        let mut model = ModelSpec::miniformer_default(head);
        set!(raw, "model.init_std", model.init_std);
        model.arch = match arch_name {
            "miniformer" => {
                for key in ["model.widths", "model.activation"] {
                    if raw.get(key).is_some() {
                        return Err(raw.fail(key, "only applies to model.arch = mlp"));
                    }
                }
                let Arch::Miniformer {
                    mut vocab_size,
                    mut d_model,
                    mut n_layers,
                    mut n_heads,
                    mut d_ffn,
                    mut max_seq_len,
                } = model.arch
                else {
                    unreachable!()
                };
                set!(raw, "model.vocab_size", vocab_size);
                set!(raw, "model.d_model", d_model);
                set!(raw, "model.n_layers", n_layers);
                set!(raw, "model.n_heads", n_heads);
                set!(raw, "model.d_ffn", d_ffn);
                set!(raw, "model.max_seq_len", max_seq_len);
                if max_seq_len < task.max_seq_len {
                    return Err(raw.fail(
                        "model.max_seq_len",
                        format!("{max_seq_len} is shorter than task.max_seq_len {}", task.max_seq_len),
                    ));
                }
                if vocab_size < BYTE_VOCAB {
                    return Err(raw.fail("model.vocab_size", format!("byte inputs need at least {BYTE_VOCAB} ids")));
                }
                Arch::Miniformer {
                    vocab_size,
                    d_model,
                    n_layers,
                    n_heads,
                    d_ffn,
                    max_seq_len,
                }
            }
            "mlp" => {
                for key in ["model.vocab_size", "model.d_model", "model.n_layers", "model.n_heads", "model.d_ffn", "model.max_seq_len"] {
                    if raw.get(key).is_some() {
                        return Err(raw.fail(key, "only applies to model.arch = miniformer"));
                    }
                }
                let widths: Vec<usize> = raw.list("model.widths")?.unwrap_or_else(|| vec![BYTE_VOCAB, 64]);
                if widths.first() != Some(&BYTE_VOCAB) {
                    return Err(raw.fail(
                        "model.widths",
                        format!("the first width is the bag-of-tokens input and must be {BYTE_VOCAB}"),
                    ));
                }
                let activation = parse_enum(
                    raw,
                    "model.activation",
                    |s| match s {
                        "gelu" => Some(Activation::Gelu),
                        "relu" => Some(Activation::Relu),
                        "identity" => Some(Activation::Identity),
                        _ => None,
                    },
                    "gelu, relu, identity",
                )?
                .unwrap_or(Activation::Gelu);
                Arch::Mlp { widths, activation }
            }
            other => return Err(raw.fail("model.arch", format!("`{other}` is not one of miniformer, mlp"))),
        };
        model.validate().map_err(|e| raw.fail("model.arch", e.to_string()))?;

        let kinds: Vec<StrategyKind> = match raw.get("strategies") {
            None => StrategyKind::ALL.to_vec(),
            Some((_, v)) if v == "all" => StrategyKind::ALL.to_vec(),
            Some((_, v)) => v
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|s| StrategyKind::parse(s).ok_or_else(|| raw.fail("strategies", format!("unknown strategy `{s}`"))))
                .collect::<Result<_>>()?,
        };
        if kinds.is_empty() {
            return Err(raw.fail("strategies", "at least one strategy is required"));
        }
        let mut template = StrategyConfig::new(StrategyKind::LayerMagGrad);
        set!(raw, "strategy.lambda", template.lambda);
        set!(raw, "strategy.eta", template.eta);
        set!(raw, "strategy.noise_variance", template.noise_variance);
        set!(raw, "strategy.relu_cam", template.relu_cam);
        template.noise_mode = parse_enum(
            raw,
            "strategy.noise_mode",
            |s| match s {
                "per_feature" => Some(NoiseMode::PerFeature),
                "per_element" => Some(NoiseMode::PerElement),
                _ => None,
            },
            "per_feature, per_element",
        )?
        .unwrap_or_default();
        let mut grad_budget = DEFAULT_GRAD_BUDGET;
        let mut smooth_budget = DEFAULT_SMOOTH_BUDGET;
        set!(raw, "strategy.grad_batch_budget", grad_budget);
        set!(raw, "strategy.smooth_batch_budget", smooth_budget);
        let strategies: Vec<StrategyConfig> = kinds
            .into_iter()
            .map(|kind| StrategyConfig {
                kind,
                grad_batch_budget: if kind.is_smooth() { smooth_budget } else { grad_budget },
                ..template
            })
            .collect();
        for s in &strategies {
            s.validate().map_err(|e| raw.fail("strategies", e.to_string()))?;
        }

        let ratios: Vec<f64> = raw.list("ratios")?.unwrap_or_else(|| vec![2.0, 3.0, 3.5, 4.0]);
        if ratios.is_empty() {
            return Err(raw.fail("ratios", "at least one ratio is required"));
        }
        if let Some(bad) = ratios.iter().find(|r| !(r.is_finite() && **r >= 1.0)) {
            return Err(raw.fail("ratios", format!("compression ratio {bad} must be >= 1")));
        }

        let mut schedule = TrainSchedule::for_task(kind);
        set!(raw, "train.batch_size", schedule.batch_size);
        set!(raw, "train.learning_rate", schedule.learning_rate);
        set!(raw, "train.initial_epochs", schedule.initial_epochs);
        set!(raw, "train.final_epochs", schedule.final_epochs);
        set!(raw, "train.early_stopping_patience", schedule.early_stopping_patience);
        if let Some(m) = parse_enum(
            raw,
            "train.eval_metric",
            |s| match s {
                "accuracy" => Some(EvalMetric::Accuracy),
                "mse" => Some(EvalMetric::Mse),
                _ => None,
            },
            "accuracy, mse",
        )? {
            schedule.eval_metric = m;
        }
        schedule.validate().map_err(|e| raw.fail("train.batch_size", e.to_string()))?;

        let seeds = parse_seeds(raw, "seeds")?.unwrap_or_else(|| vec![0]);
        if seeds.is_empty() {
            return Err(raw.fail("seeds", "at least one seed is required"));
        }
        let out = raw.get("out").map_or_else(|| PathBuf::from("runs"), |(_, v)| PathBuf::from(v));
        let rewind = parse_enum(
            raw,
            "rewind",
            |s| match s {
                "pre_finetune" => Some(RewindPoint::PreFinetune),
                "post_finetune" => Some(RewindPoint::PostFinetune),
                _ => None,
            },
            "pre_finetune, post_finetune",
        )?
        .unwrap_or_default();

        let config = Self {
            task,
            task_seed,
            model,
            strategies,
            ratios,
            schedule,
            seeds,
            out,
            rewind,
        };
        config
            .pipeline(&config.strategies[0], config.ratios[0], config.seeds[0])
            .validate()
            .map_err(|e| raw.fail("train.eval_metric", e.to_string()))?;
        Ok(config)
    }

    /// Resolved settings as sorted `key = value` lines, the output path
    /// excluded. Parsing this text gives back an equal config.
    pub fn canonical(&self) -> String {
        let mut lines: BTreeMap<&str, String> = BTreeMap::new();
        let t = &self.task;
        lines.insert("task.kind", t.kind.name().into());
        lines.insert("task.n_train", t.n_train.to_string());
        lines.insert("task.n_val", t.n_val.to_string());
        if let Some(s) = self.task_seed {
            lines.insert("task.seed", s.to_string());
        }
        lines.insert("task.alphabet", t.alphabet.to_string());
        lines.insert("task.min_len", t.min_len.to_string());
        lines.insert("task.max_len", t.max_len.to_string());
        lines.insert("task.teacher_sparsity", t.teacher_sparsity.to_string());
        lines.insert("task.max_seq_len", t.max_seq_len.to_string());
        lines.insert("model.init_std", self.model.init_std.to_string());
        if let TaskHead::Classifier { n_classes } = self.model.task_head {
            lines.insert("model.n_classes", n_classes.to_string());
        }
        match &self.model.arch {
            Arch::Mlp { widths, activation } => {
                lines.insert("model.arch", "mlp".into());
                lines.insert("model.widths", join(widths));
                let act = match activation {
                    Activation::Gelu => "gelu",
                    Activation::Relu => "relu",
                    Activation::Identity => "identity",
                };
                lines.insert("model.activation", act.into());
            }
            Arch::Miniformer {
                vocab_size,
                d_model,
                n_layers,
                n_heads,
                d_ffn,
                max_seq_len,
            } => {
                lines.insert("model.arch", "miniformer".into());
                lines.insert("model.vocab_size", vocab_size.to_string());
                lines.insert("model.d_model", d_model.to_string());
                lines.insert("model.n_layers", n_layers.to_string());
                lines.insert("model.n_heads", n_heads.to_string());
                lines.insert("model.d_ffn", d_ffn.to_string());
                lines.insert("model.max_seq_len", max_seq_len.to_string());
            }
        }
        let s = &self.strategies[0];
        let names: Vec<&str> = self.strategies.iter().map(|s| s.kind.name()).collect();
        lines.insert("strategies", names.join(", "));
        lines.insert("strategy.lambda", s.lambda.to_string());
        lines.insert("strategy.eta", s.eta.to_string());
        lines.insert("strategy.noise_variance", s.noise_variance.to_string());
        let mode = match s.noise_mode {
            NoiseMode::PerFeature => "per_feature",
            NoiseMode::PerElement => "per_element",
        };
        lines.insert("strategy.noise_mode", mode.into());
        lines.insert("strategy.relu_cam", s.relu_cam.to_string());
        let budget = |smooth: bool, default: usize| {
            self.strategies
                .iter()
                .find(|s| s.kind.is_smooth() == smooth)
                .map_or(default, |s| s.grad_batch_budget)
                .to_string()
        };
        lines.insert("strategy.grad_batch_budget", budget(false, DEFAULT_GRAD_BUDGET));
        lines.insert("strategy.smooth_batch_budget", budget(true, DEFAULT_SMOOTH_BUDGET));
        lines.insert("ratios", join(&self.ratios));
        let sc = &self.schedule;
        lines.insert("train.batch_size", sc.batch_size.to_string());
        lines.insert("train.learning_rate", sc.learning_rate.to_string());
        lines.insert("train.initial_epochs", sc.initial_epochs.to_string());
        lines.insert("train.final_epochs", sc.final_epochs.to_string());
        lines.insert("train.early_stopping_patience", sc.early_stopping_patience.to_string());
        lines.insert("train.eval_metric", sc.eval_metric.name().into());
        lines.insert("seeds", join(&self.seeds));
        lines.insert("rewind", self.rewind.name().into());
        let mut text = String::new();
        for (k, v) in lines {
            let _ = writeln!(text, "{k} = {v}");
        }
        text
    }

    /// SHA-256 of [`canonical`](Self::canonical), hex encoded.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.canonical().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Hash of everything one seed's shared stages depend on: the config
    /// minus the strategy, ratio and seed lists.
    pub fn cell_hash(&self) -> String {
        let text: String = self
            .canonical()
            .lines()
            .filter(|l| !(l.starts_with("strategies ") || l.starts_with("ratios ") || l.starts_with("seeds ")))
            .map(|l| format!("{l}\n"))
            .collect();
        Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn strategy(&self, kind: StrategyKind) -> Option<&StrategyConfig> {
        self.strategies.iter().find(|s| s.kind == kind)
    }

    pub fn pipeline(&self, strategy: &StrategyConfig, ratio: f64, seed: u64) -> PipelineConfig {
        PipelineConfig {
            task: TaskSpec {
                seed: self.task_seed.unwrap_or(seed),
                ..self.task.clone()
            },
            model: self.model.clone(),
            strategy: *strategy,
            ratio,
            schedule: self.schedule,
            seed,
            rewind: self.rewind,
            config_hash: self.cell_hash(),
        }
    }
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(ToString::to_string).collect::<Vec<_>>().join(", ")
}
