//! Importance scores.
//!
//! | strategy                      | per-batch score                          |
//! |-------------------------------|------------------------------------------|
//! | `global_mag_weight`           | `|w|` (no batches)                       |
//! | `layer_mag_weight`            | `|w|` (no batches)                       |
//! | `layer_mag_grad`              | `|w · g|`                                |
//! | `layer_gradcam_shift`         | `|w · g · (a + λ)|`                      |
//! | `layer_smoothgrad`            | `|w · mean_η(g_noisy)|`                  |
//! | `layer_smoothgradcam_shift`   | `|w · mean_η(g_noisy) · (a + λ)|`        |
//!
//! `a` is the mean pre-activation output of the dense layer that owns the
//! parameter, taken from a noise-free cached forward pass. For a weight of
//! shape `out × in` the factor for element `(i, j)` is `a[i] + λ`; biases use
//! the same formulas with `w := b`. Per-batch scores are summed over the
//! batch budget.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::container::{decode_tensors, encode_tensors, read_file, write_atomic, TensorRecord};
use crate::error::{Error, Result};
use crate::nn::{ActivationCache, Batch, ForwardOptions, Model, NoiseMode, NoiseSpec, ParamKind};
use crate::tensor::Tensor;

pub const SCORE_MAGIC: &[u8] = b"DCSCORE";

pub const DEFAULT_LAMBDA: f64 = 10.0;
pub const DEFAULT_ETA: usize = 10;
pub const DEFAULT_NOISE_VARIANCE: f64 = 0.01;
pub const DEFAULT_GRAD_BUDGET: usize = 1000;
pub const DEFAULT_SMOOTH_BUDGET: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    GlobalMagWeight,
    LayerMagWeight,
    LayerMagGrad,
    LayerGradcamShift,
    LayerSmoothgrad,
    LayerSmoothgradcamShift,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 6] = [
        StrategyKind::GlobalMagWeight,
        StrategyKind::LayerMagWeight,
        StrategyKind::LayerMagGrad,
        StrategyKind::LayerGradcamShift,
        StrategyKind::LayerSmoothgrad,
        StrategyKind::LayerSmoothgradcamShift,
    ];

    pub fn name(self) -> &'static str {
        match self {
            StrategyKind::GlobalMagWeight => "global_mag_weight",
            StrategyKind::LayerMagWeight => "layer_mag_weight",
            StrategyKind::LayerMagGrad => "layer_mag_grad",
            StrategyKind::LayerGradcamShift => "layer_gradcam_shift",
            StrategyKind::LayerSmoothgrad => "layer_smoothgrad",
            StrategyKind::LayerSmoothgradcamShift => "layer_smoothgradcam_shift",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }

    pub fn uses_gradients(self) -> bool {
        !matches!(self, StrategyKind::GlobalMagWeight | StrategyKind::LayerMagWeight)
    }

    pub fn is_smooth(self) -> bool {
        matches!(self, StrategyKind::LayerSmoothgrad | StrategyKind::LayerSmoothgradcamShift)
    }

    pub fn uses_cam(self) -> bool {
        matches!(self, StrategyKind::LayerGradcamShift | StrategyKind::LayerSmoothgradcamShift)
    }
}

impl std::fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StrategyConfig {
    pub kind: StrategyKind,
    /// Shift added to the activation mean (CAM kinds only).
    pub lambda: f64,
    /// Noisy paths per batch (smooth kinds only).
    pub eta: usize,
    pub noise_variance: f64,
    #[serde(default)]
    pub noise_mode: NoiseMode,
    pub grad_batch_budget: usize,
    /// Clamp the activation mean at zero before shifting (ReLU-CAM ablation).
    #[serde(default)]
    pub relu_cam: bool,
}

impl StrategyConfig {
    pub fn new(kind: StrategyKind) -> Self {
        Self {
            kind,
            lambda: DEFAULT_LAMBDA,
            eta: DEFAULT_ETA,
            noise_variance: DEFAULT_NOISE_VARIANCE,
            noise_mode: NoiseMode::PerFeature,
            grad_batch_budget: if kind.is_smooth() {
                DEFAULT_SMOOTH_BUDGET
            } else {
                DEFAULT_GRAD_BUDGET
            },
            relu_cam: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.eta == 0 {
            return Err(Error::Validation("eta must be >= 1".into()));
        }
        if self.grad_batch_budget == 0 {
            return Err(Error::Validation("grad_batch_budget must be >= 1".into()));
        }
        if !(self.noise_variance.is_finite() && self.noise_variance >= 0.0) {
            return Err(Error::Validation(format!(
                "noise variance {} must be >= 0",
                self.noise_variance
            )));
        }
        if !self.lambda.is_finite() {
            return Err(Error::Validation("lambda must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreEntry {
    pub path: String,
    pub kind: ParamKind,
    pub shape: Vec<usize>,
    pub scores: Vec<f64>,
}

/// Running sum of importance scores over the prunable parameters of a model.
#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceAccumulator {
    entries: Vec<ScoreEntry>,
    pub batches_consumed: usize,
    pub strategy: StrategyConfig,
    pub seed: u64,
    /// Parameter count of the scored model, prunable or not.
    pub n_total: usize,
    pub config_hash: String,
}

#[derive(Serialize, Deserialize)]
struct ScoreTrailer {
    strategy: StrategyConfig,
    batches_consumed: usize,
    seed: u64,
    n_total: usize,
    #[serde(default)]
    config_hash: String,
}

impl ImportanceAccumulator {
    /// Zero scores for every prunable parameter of `model`.
    pub fn zeros(model: &Model, strategy: StrategyConfig, seed: u64) -> Self {
        Self {
            entries: model
                .prunable()
                .map(|p| ScoreEntry {
                    path: p.path.clone(),
                    kind: p.kind,
                    shape: p.tensor.shape().to_vec(),
                    scores: vec![0.0; p.tensor.len()],
                })
                .collect(),
            batches_consumed: 0,
            strategy,
            seed,
            n_total: model.n_total(),
            config_hash: String::new(),
        }
    }

    /// Wraps precomputed score tensors; scores must be finite and non-negative.
    pub fn from_entries(entries: Vec<ScoreEntry>, strategy: StrategyConfig, seed: u64, n_total: usize) -> Result<Self> {
        for e in &entries {
            if e.shape.iter().product::<usize>() != e.scores.len() {
                return Err(Error::Dimension(format!("{}: shape does not match score count", e.path)));
            }
        }
        let acc = Self {
            entries,
            batches_consumed: 0,
            strategy,
            seed,
            n_total,
            config_hash: String::new(),
        };
        if acc.n_prunable() > n_total {
            return Err(Error::Validation("more scored elements than model parameters".into()));
        }
        acc.validate()?;
        Ok(acc)
    }

    pub fn entries(&self) -> &[ScoreEntry] {
        &self.entries
    }

    pub fn scores(&self, path: &str) -> Option<&[f64]> {
        self.entries.iter().find(|e| e.path == path).map(|e| e.scores.as_slice())
    }

    pub fn n_prunable(&self) -> usize {
        self.entries.iter().map(|e| e.scores.len()).sum()
    }

    /// Elementwise sum with another accumulator over the same tensors.
    pub fn merge(&mut self, other: &ImportanceAccumulator) -> Result<()> {
        if self.entries.len() != other.entries.len()
            || self
                .entries
                .iter()
                .zip(&other.entries)
                .any(|(a, b)| a.path != b.path || a.scores.len() != b.scores.len())
        {
            return Err(Error::Consistency("accumulators cover different tensors".into()));
        }
        for (a, b) in self.entries.iter_mut().zip(&other.entries) {
            for (x, y) in a.scores.iter_mut().zip(&b.scores) {
                *x += y;
            }
        }
        self.batches_consumed += other.batches_consumed;
        Ok(())
    }

    /// Checks the accumulator invariants: finite, non-negative scores.
    pub fn validate(&self) -> Result<()> {
        for e in &self.entries {
            if let Some(bad) = e.scores.iter().find(|s| !(s.is_finite() && **s >= 0.0)) {
                return Err(Error::Numeric {
                    layer: e.path.clone(),
                    detail: format!("importance score {bad}"),
                });
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let records: Vec<TensorRecord> = self
            .entries
            .iter()
            .map(|e| TensorRecord {
                path: e.path.clone(),
                kind: e.kind.code(),
                dims: e.shape.clone(),
                values: e.scores.clone(),
            })
            .collect();
        let trailer = serde_json::to_string(&ScoreTrailer {
            strategy: self.strategy,
            batches_consumed: self.batches_consumed,
            seed: self.seed,
            n_total: self.n_total,
            config_hash: self.config_hash.clone(),
        })
        .map_err(|e| Error::Format(e.to_string()))?;
        encode_tensors(SCORE_MAGIC, &records, &trailer)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (records, trailer) = decode_tensors(SCORE_MAGIC, bytes)?;
        let t: ScoreTrailer = serde_json::from_str(&trailer)
            .map_err(|e| Error::Format(format!("score trailer: {e}")))?;
        let entries = records
            .into_iter()
            .map(|r| {
                Ok(ScoreEntry {
                    kind: ParamKind::from_code(r.kind)
                        .ok_or_else(|| Error::Format(format!("unknown kind byte {}", r.kind)))?,
                    path: r.path,
                    shape: r.dims,
                    scores: r.values,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let acc = Self {
            entries,
            batches_consumed: t.batches_consumed,
            strategy: t.strategy,
            seed: t.seed,
            n_total: t.n_total,
            config_hash: t.config_hash,
        };
        acc.validate()?;
        Ok(acc)
    }
}

pub fn write_scores(acc: &ImportanceAccumulator, path: &Path) -> Result<()> {
    write_atomic(path, &acc.to_bytes()?)
}

pub fn read_scores(path: &Path) -> Result<ImportanceAccumulator> {
    ImportanceAccumulator::from_bytes(&read_file(path)?)
}

/// `|w|`.
pub fn score_mag_weight(param: &Tensor) -> Vec<f64> {
    param.values().iter().map(|w| w.abs()).collect()
}

fn grad_of(param: &Tensor) -> Result<&[f64]> {
    param
        .grad()
        .ok_or_else(|| Error::State("parameter has no gradient; run backward first".into()))
}

/// `|w · g|` using the gradient buffer of `param`.
pub fn score_mag_grad(param: &Tensor) -> Result<Vec<f64>> {
    let g = grad_of(param)?;
    Ok(param.values().iter().zip(g).map(|(w, g)| (w * g).abs()).collect())
}

/// Per-output-row CAM factor `a[i] + λ` (or `max(a[i], 0) + λ`).
fn cam_factors(param: &Tensor, cache: Option<&ActivationCache>, lambda: f64, relu: bool) -> Result<Vec<f64>> {
    let cache = cache.ok_or_else(|| {
        Error::State("no activation cache for this layer; run a cached forward pass".into())
    })?;
    let out = param.shape()[0];
    if cache.mean.len() != out {
        return Err(Error::Dimension(format!(
            "activation cache has {} features for a parameter with {out} output rows",
            cache.mean.len()
        )));
    }
    Ok(cache
        .mean
        .iter()
        .map(|&a| if relu { a.max(0.0) } else { a } + lambda)
        .collect())
}

fn cam_product(values: &[f64], grad: &[f64], factors: &[f64]) -> Vec<f64> {
    let cols = values.len() / factors.len();
    values
        .iter()
        .zip(grad)
        .enumerate()
        .map(|(idx, (w, g))| ((w * g) * factors[idx / cols]).abs())
        .collect()
}

/// `|w · g · (a + λ)|`, row `i` of a weight scaled by the cached mean of output `i`.
pub fn score_gradcam_shift(
    param: &Tensor,
    cache: Option<&ActivationCache>,
    lambda: f64,
    relu: bool,
) -> Result<Vec<f64>> {
    let g = grad_of(param)?;
    let factors = cam_factors(param, cache, lambda, relu)?;
    Ok(cam_product(param.values(), g, &factors))
}

/// Unweighted mean of the noisy-path gradients.
pub fn mean_gradient(noisy_grads: &[Vec<f64>]) -> Result<Vec<f64>> {
    let (first, rest) = noisy_grads
        .split_first()
        .ok_or_else(|| Error::Argument("at least one gradient path is required".into()))?;
    let mut sum = first.clone();
    for g in rest {
        if g.len() != sum.len() {
            return Err(Error::Dimension("gradient paths differ in length".into()));
        }
        for (s, v) in sum.iter_mut().zip(g) {
            *s += v;
        }
    }
    let eta = noisy_grads.len() as f64;
    sum.iter_mut().for_each(|s| *s /= eta);
    Ok(sum)
}

fn check_len(param: &Tensor, g: &[f64]) -> Result<()> {
    if g.len() != param.len() {
        return Err(Error::Dimension(format!(
            "gradient of length {} for a parameter of {} elements",
            g.len(),
            param.len()
        )));
    }
    Ok(())
}

/// `|w · mean(g_1..g_η)|`: paths are averaged before the product and the
/// absolute value, so opposing gradients cancel.
pub fn score_smoothgrad(param: &Tensor, noisy_grads: &[Vec<f64>]) -> Result<Vec<f64>> {
    let g = mean_gradient(noisy_grads)?;
    check_len(param, &g)?;
    Ok(param.values().iter().zip(&g).map(|(w, g)| (w * g).abs()).collect())
}

/// `|w · mean(g_1..g_η) · (a + λ)|` with `a` from a noise-free cached pass.
pub fn score_smoothgradcam_shift(
    param: &Tensor,
    noisy_grads: &[Vec<f64>],
    cache: Option<&ActivationCache>,
    lambda: f64,
    relu: bool,
) -> Result<Vec<f64>> {
    let g = mean_gradient(noisy_grads)?;
    check_len(param, &g)?;
    let factors = cam_factors(param, cache, lambda, relu)?;
    Ok(cam_product(param.values(), &g, &factors))
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of the noise drawn for `path` of batch `batch`.
pub fn noise_seed(seed: u64, batch: usize, path: usize) -> u64 {
    splitmix(splitmix(seed ^ 0x005E_ED0F_5A17) ^ splitmix(batch as u64).rotate_left(17) ^ path as u64)
}

/// Gradients of the prunable parameters from the last backward pass.
fn prunable_grads(model: &Model) -> Result<Vec<Vec<f64>>> {
    model.prunable().map(|p| grad_of(&p.tensor).map(<[f64]>::to_vec)).collect()
}

/// Score contribution of one batch, in prunable-parameter order.
fn batch_scores(model: &mut Model, batch: &Batch, config: &StrategyConfig, seed: u64, index: usize) -> Result<Vec<Vec<f64>>> {
    let relu = config.relu_cam;
    match config.kind {
        StrategyKind::GlobalMagWeight | StrategyKind::LayerMagWeight => {
            Ok(model.prunable().map(|p| score_mag_weight(&p.tensor)).collect())
        }
        StrategyKind::LayerMagGrad => {
            model.forward_backward(batch, &ForwardOptions::plain())?;
            model.prunable().map(|p| score_mag_grad(&p.tensor)).collect()
        }
        StrategyKind::LayerGradcamShift => {
            model.forward_backward(batch, &ForwardOptions::cached())?;
            model
                .prunable()
                .map(|p| score_gradcam_shift(&p.tensor, model.activation_cache(&p.path), config.lambda, relu))
                .collect()
        }
        StrategyKind::LayerSmoothgrad | StrategyKind::LayerSmoothgradcamShift => {
            if config.kind.uses_cam() {
                model.clear_caches();
                model.forward(&batch.inputs, &ForwardOptions::cached())?;
            }
            let mut paths: Vec<Vec<Vec<f64>>> = Vec::with_capacity(config.eta);
            for path in 0..config.eta {
                let opts = ForwardOptions {
                    cache: false,
                    noise: NoiseSpec {
                        enabled: true,
                        variance: config.noise_variance,
                        seed: noise_seed(seed, index, path),
                        mode: config.noise_mode,
                    },
                };
                model.forward_backward(batch, &opts)?;
                paths.push(prunable_grads(model)?);
            }
            model
                .prunable()
                .enumerate()
                .map(|(i, p)| {
                    let grads: Vec<Vec<f64>> = paths.iter().map(|per_param| per_param[i].clone()).collect();
                    if config.kind.uses_cam() {
                        score_smoothgradcam_shift(&p.tensor, &grads, model.activation_cache(&p.path), config.lambda, relu)
                    } else {
                        score_smoothgrad(&p.tensor, &grads)
                    }
                })
                .collect()
        }
    }
}

/// Accumulates per-batch scores over the first `grad_batch_budget` batches.
/// Magnitude strategies read the weights once and consume no batches.
pub fn accumulate_scores<'a, I>(
    model: &mut Model,
    batches: I,
    config: &StrategyConfig,
    seed: u64,
) -> Result<ImportanceAccumulator>
where
    I: IntoIterator<Item = &'a Batch>,
{
    accumulate_from(model, batches, config, seed, 0)
}

fn accumulate_from<'a, I>(
    model: &mut Model,
    batches: I,
    config: &StrategyConfig,
    seed: u64,
    first_index: usize,
) -> Result<ImportanceAccumulator>
where
    I: IntoIterator<Item = &'a Batch>,
{
    config.validate()?;
    let mut acc = ImportanceAccumulator::zeros(model, *config, seed);
    if !config.kind.uses_gradients() {
        for (e, p) in acc.entries.iter_mut().zip(model.prunable()) {
            e.scores = score_mag_weight(&p.tensor);
        }
        return Ok(acc);
    }
    for (offset, batch) in batches.into_iter().take(config.grad_batch_budget).enumerate() {
        let per_param = batch_scores(model, batch, config, seed, first_index + offset)?;
        for (e, s) in acc.entries.iter_mut().zip(per_param) {
            for (a, v) in e.scores.iter_mut().zip(s) {
                *a += v;
            }
        }
        acc.batches_consumed += 1;
    }
    if acc.batches_consumed == 0 {
        return Err(Error::Data(format!(
            "{} needs at least one batch of training data",
            config.kind
        )));
    }
    model.zero_grads();
    acc.validate()?;
    Ok(acc)
}

/// Splits the batch budget across `workers` threads, each scoring a
/// contiguous share on its own model clone; partial sums are merged in
/// worker order.
pub fn accumulate_scores_parallel(
    model: &Model,
    batches: &[Batch],
    config: &StrategyConfig,
    seed: u64,
    workers: usize,
) -> Result<ImportanceAccumulator> {
    let workers = workers.max(1);
    let usable = &batches[..batches.len().min(config.grad_batch_budget)];
    if !config.kind.uses_gradients() || workers == 1 || usable.len() < 2 {
        return accumulate_scores(&mut model.clone(), usable, config, seed);
    }
    let share = usable.len().div_ceil(workers);
    let partials: Vec<Result<ImportanceAccumulator>> = std::thread::scope(|s| {
        let handles: Vec<_> = usable
            .chunks(share)
            .enumerate()
            .map(|(w, chunk)| {
                let mut local = model.clone();
                s.spawn(move || accumulate_from(&mut local, chunk, config, seed, w * share))
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("scoring worker panicked")).collect()
    });
    let mut iter = partials.into_iter();
    let mut total = iter.next().expect("at least one worker")?;
    for part in iter {
        total.merge(&part?)?;
    }
    Ok(total)
}

#[cfg(test)]
mod tests;
