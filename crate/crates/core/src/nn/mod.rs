//! Minimal neural core: parameter store, the two architectures (an MLP and a
//! small post-norm transformer encoder), losses, Adam, and gradient checking.

mod checkpoint;
mod gradcheck;
mod loss;
mod optim;
pub(crate) mod tape;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{check_finite, Tensor};
use tape::{NodeId, RowLayout, Tape};

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint};
pub use gradcheck::{finite_diff_check, FINITE_DIFF_MAX_PARAMS};
pub use loss::{
    cross_entropy_loss, regression_prediction, scaled_sigmoid_regression_grad,
    scaled_sigmoid_regression_loss, REGRESSION_SCALE,
};
pub use optim::{AdamConfig, AdamState};

/// Reserved token ids shared by every tokenizer and model.
pub const PAD_ID: u32 = 0;
pub const CLS_ID: u32 = 1;
pub const SEP_ID: u32 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    DenseWeight,
    DenseBias,
    Embedding,
    LayernormScale,
    LayernormShift,
    HeadWeight,
    HeadBias,
}

impl ParamKind {
    pub const ALL: [ParamKind; 7] = [
        ParamKind::DenseWeight,
        ParamKind::DenseBias,
        ParamKind::Embedding,
        ParamKind::LayernormScale,
        ParamKind::LayernormShift,
        ParamKind::HeadWeight,
        ParamKind::HeadBias,
    ];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }

}

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub path: String,
    pub kind: ParamKind,
    pub tensor: Tensor,
    pub prunable: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Gelu,
    Relu,
    Identity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "arch", rename_all = "snake_case")]
pub enum Arch {
    /// Dense stack over `widths[0]` input features; token inputs are
    /// featurised as length-normalised bag-of-tokens counts.
    Mlp {
        widths: Vec<usize>,
        activation: Activation,
    },
    Miniformer {
        vocab_size: usize,
        d_model: usize,
        n_layers: usize,
        n_heads: usize,
        d_ffn: usize,
        max_seq_len: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "head", rename_all = "snake_case")]
pub enum TaskHead {
    Classifier { n_classes: usize },
    ScaledSigmoidRegressor,
}

impl TaskHead {
    pub fn outputs(&self) -> usize {
        match self {
            TaskHead::Classifier { n_classes } => *n_classes,
            TaskHead::ScaledSigmoidRegressor => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    #[serde(flatten)]
    pub arch: Arch,
    pub task_head: TaskHead,
    /// Standard deviation of the truncated-normal weight initialiser.
    pub init_std: f64,
}

/// Byte-level vocabulary: 256 byte values after the reserved ids.
pub const BYTE_VOCAB: usize = 256 + 3;

impl ModelSpec {
    pub fn miniformer_default(task_head: TaskHead) -> Self {
        Self {
            arch: Arch::Miniformer {
                vocab_size: BYTE_VOCAB,
                d_model: 32,
                n_layers: 2,
                n_heads: 2,
                d_ffn: 256,
                max_seq_len: 32,
            },
            task_head,
            init_std: 0.02,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.init_std.is_finite() && self.init_std >= 0.0) {
            return Err(Error::Validation(format!("init_std {} must be >= 0", self.init_std)));
        }
        if let TaskHead::Classifier { n_classes } = self.task_head {
            if n_classes < 2 {
                return Err(Error::Validation("a classifier needs at least 2 classes".into()));
            }
        }
        match &self.arch {
            Arch::Mlp { widths, .. } => {
                if widths.is_empty() || widths.contains(&0) {
                    return Err(Error::Validation(format!(
                        "mlp widths must be non-empty and positive, got {widths:?}"
                    )));
                }
            }
            Arch::Miniformer {
                vocab_size,
                d_model,
                n_layers,
                n_heads,
                d_ffn,
                max_seq_len,
            } => {
                let sizes = [*vocab_size, *d_model, *n_layers, *n_heads, *d_ffn, *max_seq_len];
                if sizes.contains(&0) {
                    return Err(Error::Validation(format!(
                        "miniformer sizes must be >= 1, got {sizes:?}"
                    )));
                }
                if d_model % n_heads != 0 {
                    return Err(Error::Validation(format!(
                        "d_model {d_model} is not divisible by n_heads {n_heads}"
                    )));
                }
                if *vocab_size <= SEP_ID as usize {
                    return Err(Error::Validation("vocabulary must include the reserved ids".into()));
                }
            }
        }
        Ok(())
    }

    pub fn max_seq_len(&self) -> Option<usize> {
        match self.arch {
            Arch::Miniformer { max_seq_len, .. } => Some(max_seq_len),
            Arch::Mlp { .. } => None,
        }
    }
}

/// Model input for one batch.
#[derive(Debug, Clone, PartialEq)]
pub enum Inputs {
    /// Padded token ids, `lengths.len() * seq_len` entries, row-major.
    Tokens {
        ids: Vec<u32>,
        segments: Vec<u8>,
        lengths: Vec<usize>,
        seq_len: usize,
    },
    /// Dense features, `batch × features`; each row is a one-token sequence.
    Features(Tensor),
}

impl Inputs {
    pub fn batch_size(&self) -> usize {
        match self {
            Inputs::Tokens { lengths, .. } => lengths.len(),
            Inputs::Features(t) => t.shape()[0],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    Classes(Vec<usize>),
    Scores(Vec<f64>),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Classes(v) => v.len(),
            Targets::Scores(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Inputs,
    pub targets: Targets,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseMode {
    /// One sample per output feature, shared by every token in the batch.
    #[default]
    PerFeature,
    /// One sample per output element (token × feature).
    PerElement,
}

/// Gaussian noise added to every dense layer's output during a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct NoiseSpec {
    pub enabled: bool,
    pub variance: f64,
    pub seed: u64,
    pub mode: NoiseMode,
}

impl NoiseSpec {
    pub fn off() -> Self {
        Self::default()
    }

    pub fn gaussian(variance: f64, seed: u64) -> Self {
        Self {
            enabled: true,
            variance,
            seed,
            mode: NoiseMode::PerFeature,
        }
    }

    fn is_active(&self) -> bool {
        self.enabled && self.variance > 0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ForwardOptions {
    pub cache: bool,
    pub noise: NoiseSpec,
}

impl ForwardOptions {
    pub fn plain() -> Self {
        Self::default()
    }

    pub fn cached() -> Self {
        Self {
            cache: true,
            ..Self::default()
        }
    }
}

/// Mean pre-activation output of one dense layer over the last cached pass:
/// averaged over the real tokens of each sequence, then over the batch.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationCache {
    pub mean: Vec<f64>,
    pub token_count: usize,
}

#[derive(Debug, Clone)]
struct DenseLayer {
    weight: usize,
    bias: Option<usize>,
}

#[derive(Debug, Clone)]
struct EncoderLayer {
    q: DenseLayer,
    k: DenseLayer,
    v: DenseLayer,
    o: DenseLayer,
    attn_norm: (usize, usize),
    ffn_in: DenseLayer,
    ffn_out: DenseLayer,
    ffn_norm: (usize, usize),
}

#[derive(Debug, Clone)]
enum Layout {
    Mlp {
        hidden: Vec<DenseLayer>,
    },
    Miniformer {
        token: usize,
        position: usize,
        segment: usize,
        emb_norm: (usize, usize),
        layers: Vec<EncoderLayer>,
    },
}

/// Scalar loss recorded on the live tape.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Loss {
    pub value: f64,
    node: NodeId,
    generation: u64,
}

#[derive(Debug, Clone)]
pub struct Model {
    spec: ModelSpec,
    params: Vec<Parameter>,
    layout: Layout,
    head: DenseLayer,
    dense_order: Vec<usize>,
    caches: Vec<Option<ActivationCache>>,
    tape: Option<(Tape, NodeId)>,
    generation: u64,
}

struct Builder {
    params: Vec<Parameter>,
    rng: ChaCha8Rng,
    std: f64,
}

impl Builder {
    fn add(&mut self, path: String, kind: ParamKind, shape: Vec<usize>, prunable: bool) -> usize {
        let n: usize = shape.iter().product();
        let values = match kind {
            ParamKind::DenseWeight | ParamKind::HeadWeight | ParamKind::Embedding => {
                (0..n).map(|_| truncated_normal(&mut self.rng, self.std)).collect()
            }
            ParamKind::LayernormScale => vec![1.0; n],
            _ => vec![0.0; n],
        };
        let tensor = Tensor::new(shape, values).expect("builder shapes are positive");
        self.params.push(Parameter {
            path,
            kind,
            tensor,
            prunable,
        });
        self.params.len() - 1
    }

    fn dense(&mut self, prefix: &str, d_in: usize, d_out: usize, head: bool) -> DenseLayer {
        let (wk, bk) = if head {
            (ParamKind::HeadWeight, ParamKind::HeadBias)
        } else {
            (ParamKind::DenseWeight, ParamKind::DenseBias)
        };
        DenseLayer {
            weight: self.add(format!("{prefix}.weight"), wk, vec![d_out, d_in], !head),
            bias: Some(self.add(format!("{prefix}.bias"), bk, vec![d_out], !head)),
        }
    }

    /// Dense layer without a bias. Used for the key projection, whose bias
    /// only shifts every attention logit of a query equally and so has no
    /// effect on the output.
    fn dense_unbiased(&mut self, prefix: &str, d_in: usize, d_out: usize) -> DenseLayer {
        DenseLayer {
            weight: self.add(format!("{prefix}.weight"), ParamKind::DenseWeight, vec![d_out, d_in], true),
            bias: None,
        }
    }

    fn norm(&mut self, prefix: &str, d: usize) -> (usize, usize) {
        (
            self.add(format!("{prefix}.weight"), ParamKind::LayernormScale, vec![d], false),
            self.add(format!("{prefix}.bias"), ParamKind::LayernormShift, vec![d], false),
        )
    }
}

/// Gaussian(0, std) resampled until it lies within two standard deviations.
fn truncated_normal(rng: &mut ChaCha8Rng, std: f64) -> f64 {
    if std == 0.0 {
        return 0.0;
    }
    let normal = Normal::new(0.0, std).expect("std is finite and positive");
    loop {
        let v = normal.sample(rng);
        if v.abs() <= 2.0 * std {
            return v;
        }
    }
}

impl Model {
    /// Builds a freshly initialised model. Initialisation is fully determined by `seed`.
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut b = Builder {
            params: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            std: spec.init_std,
        };
        let out = spec.task_head.outputs();
        let (layout, head) = match &spec.arch {
            Arch::Mlp { widths, .. } => {
                let hidden = widths
                    .windows(2)
                    .enumerate()
                    .map(|(i, w)| b.dense(&format!("encoder.layer{i}.dense"), w[0], w[1], false))
                    .collect();
                let head = b.dense("head", *widths.last().unwrap(), out, true);
                (Layout::Mlp { hidden }, head)
            }
            Arch::Miniformer {
                vocab_size,
                d_model,
                n_layers,
                d_ffn,
                max_seq_len,
                ..
            } => {
                let d = *d_model;
                let token = b.add("embeddings.token.weight".into(), ParamKind::Embedding, vec![*vocab_size, d], false);
                let position = b.add("embeddings.position.weight".into(), ParamKind::Embedding, vec![*max_seq_len, d], false);
                let segment = b.add("embeddings.segment.weight".into(), ParamKind::Embedding, vec![2, d], false);
                let emb_norm = b.norm("embeddings.layernorm", d);
                let layers = (0..*n_layers)
                    .map(|l| {
                        let p = format!("encoder.layer{l}");
                        EncoderLayer {
                            q: b.dense(&format!("{p}.attn.q_proj"), d, d, false),
                            k: b.dense_unbiased(&format!("{p}.attn.k_proj"), d, d),
                            v: b.dense(&format!("{p}.attn.v_proj"), d, d, false),
                            o: b.dense(&format!("{p}.attn.o_proj"), d, d, false),
                            attn_norm: b.norm(&format!("{p}.attn_norm"), d),
                            ffn_in: b.dense(&format!("{p}.ffn.in_proj"), d, *d_ffn, false),
                            ffn_out: b.dense(&format!("{p}.ffn.out_proj"), *d_ffn, d, false),
                            ffn_norm: b.norm(&format!("{p}.ffn_norm"), d),
                        }
                    })
                    .collect();
                let head = b.dense("head", d, out, true);
                (
                    Layout::Miniformer {
                        token,
                        position,
                        segment,
                        emb_norm,
                        layers,
                    },
                    head,
                )
            }
        };
        let dense_order: Vec<usize> = b
            .params
            .iter()
            .enumerate()
            .filter(|(_, p)| matches!(p.kind, ParamKind::DenseWeight | ParamKind::HeadWeight))
            .map(|(i, _)| i)
            .collect();
        let n_dense = dense_order.len();
        Ok(Self {
            spec,
            params: b.params,
            layout,
            head,
            dense_order,
            caches: vec![None; n_dense],
            tape: None,
            generation: 0,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &[Parameter] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter] {
        &mut self.params
    }

    pub fn param(&self, path: &str) -> Option<&Parameter> {
        self.params.iter().find(|p| p.path == path)
    }

    pub fn param_index(&self, path: &str) -> Option<usize> {
        self.params.iter().position(|p| p.path == path)
    }

    pub fn n_total(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    pub fn n_prunable(&self) -> usize {
        self.params.iter().filter(|p| p.prunable).map(|p| p.tensor.len()).sum()
    }

    pub fn prunable(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter().filter(|p| p.prunable)
    }

    /// Cached activation mean for the dense layer owning `param_path`
    /// (either its weight or its bias).
    pub fn activation_cache(&self, param_path: &str) -> Option<&ActivationCache> {
        let layer_prefix = param_path
            .strip_suffix(".weight")
            .or_else(|| param_path.strip_suffix(".bias"))?;
        let slot = self
            .dense_order
            .iter()
            .position(|&w| self.params[w].path.strip_suffix(".weight") == Some(layer_prefix))?;
        self.caches[slot].as_ref()
    }

    pub fn clear_caches(&mut self) {
        self.caches.iter_mut().for_each(|c| *c = None);
    }

    pub fn zero_grads(&mut self) {
        self.params.iter_mut().for_each(|p| p.tensor.clear_grad());
    }

    /// Runs the network on `inputs`, recording the graph for a later
    /// [`Model::loss`] / [`Model::backward`]. Returns `batch × outputs`.
    pub fn forward(&mut self, inputs: &Inputs, opts: &ForwardOptions) -> Result<Tensor> {
        self.tape = None;
        self.generation += 1;
        let mut tape = Tape::new();
        let mut noise_rng = opts
            .noise
            .is_active()
            .then(|| ChaCha8Rng::seed_from_u64(opts.noise.seed));
        let mut ctx = PassCtx {
            tape: &mut tape,
            params: &self.params,
            dense_order: &self.dense_order,
            caches: &mut self.caches,
            cache: opts.cache,
            noise: &opts.noise,
            noise_rng: noise_rng.as_mut(),
            param_nodes: vec![None; self.params.len()],
        };
        let out = match &self.layout {
            Layout::Mlp { hidden } => {
                let Arch::Mlp { widths, activation } = &self.spec.arch else {
                    unreachable!()
                };
                let (x, layout) = mlp_input(ctx.tape, inputs, widths[0])?;
                let mut h = x;
                for layer in hidden {
                    let y = ctx.dense(h, layer, &layout)?;
                    h = match activation {
                        Activation::Gelu => ctx.tape.gelu(y),
                        Activation::Relu => ctx.tape.relu(y),
                        Activation::Identity => y,
                    };
                }
                ctx.dense(h, &self.head, &layout)?
            }
            Layout::Miniformer {
                token,
                position,
                segment,
                emb_norm,
                layers,
            } => {
                let Arch::Miniformer {
                    vocab_size,
                    n_heads,
                    max_seq_len,
                    ..
                } = self.spec.arch
                else {
                    unreachable!()
                };
                let Inputs::Tokens {
                    ids,
                    segments,
                    lengths,
                    seq_len,
                } = inputs
                else {
                    return Err(Error::Dimension("the miniformer consumes token inputs".into()));
                };
                let seq_len = *seq_len;
                if seq_len > max_seq_len {
                    return Err(Error::Dimension(format!(
                        "sequence length {seq_len} exceeds max_seq_len {max_seq_len}"
                    )));
                }
                let rows = lengths.len() * seq_len;
                if ids.len() != rows || segments.len() != rows || lengths.iter().any(|&l| l == 0 || l > seq_len) {
                    return Err(Error::Dimension("token batch is inconsistent with its lengths".into()));
                }
                if let Some(&bad) = ids.iter().find(|&&t| t as usize >= vocab_size) {
                    return Err(Error::Dimension(format!("token id {bad} >= vocab size {vocab_size}")));
                }
                if segments.iter().any(|&s| s > 1) {
                    return Err(Error::Dimension("segment ids must be 0 or 1".into()));
                }
                let layout = RowLayout {
                    seq_len,
                    lengths: lengths.clone(),
                };
                let tok = ctx.node(*token);
                let pos = ctx.node(*position);
                let seg = ctx.node(*segment);
                let e_tok = ctx.tape.gather(tok, ids.iter().map(|&t| t as usize).collect())?;
                let e_pos = ctx.tape.gather(pos, (0..rows).map(|r| r % seq_len).collect())?;
                let e_seg = ctx.tape.gather(seg, segments.iter().map(|&s| s as usize).collect())?;
                let e = ctx.tape.add(e_tok, e_pos)?;
                let e = ctx.tape.add(e, e_seg)?;
                let mut h = ctx.norm(e, *emb_norm)?;
                for layer in layers {
                    let q = ctx.dense(h, &layer.q, &layout)?;
                    let k = ctx.dense(h, &layer.k, &layout)?;
                    let v = ctx.dense(h, &layer.v, &layout)?;
                    let a = ctx.tape.attention(q, k, v, n_heads, layout.clone())?;
                    let o = ctx.dense(a, &layer.o, &layout)?;
                    let r = ctx.tape.add(h, o)?;
                    h = ctx.norm(r, layer.attn_norm)?;
                    let f = ctx.dense(h, &layer.ffn_in, &layout)?;
                    let f = ctx.tape.gelu(f);
                    let f = ctx.dense(f, &layer.ffn_out, &layout)?;
                    let r = ctx.tape.add(h, f)?;
                    h = ctx.norm(r, layer.ffn_norm)?;
                }
                let cls_rows = (0..lengths.len()).map(|b| b * seq_len).collect();
                let pooled = ctx.tape.gather(h, cls_rows)?;
                let pooled_layout = RowLayout {
                    seq_len: 1,
                    lengths: vec![1; lengths.len()],
                };
                ctx.dense(pooled, &self.head, &pooled_layout)?
            }
        };
        let (rows, cols) = tape.dims(out);
        let output = Tensor::new(vec![rows, cols], tape.value(out).to_vec())?;
        self.tape = Some((tape, out));
        Ok(output)
    }

    /// Appends the task loss for `targets` to the recorded pass.
    pub fn loss(&mut self, targets: &Targets) -> Result<Loss> {
        let head = self.spec.task_head;
        let generation = self.generation;
        let (tape, out) = self
            .tape
            .as_mut()
            .ok_or_else(|| Error::State("loss requested before a forward pass".into()))?;
        let node = match (head, targets) {
            (TaskHead::Classifier { .. }, Targets::Classes(labels)) => tape.cross_entropy(*out, labels)?,
            (TaskHead::ScaledSigmoidRegressor, Targets::Scores(t)) => tape.scaled_sigmoid_mse(*out, t)?,
            _ => return Err(Error::Validation("targets do not match the model's task head".into())),
        };
        let value = tape.value(node)[0];
        if !value.is_finite() {
            return Err(Error::Numeric {
                layer: "loss".into(),
                detail: format!("loss is {value}"),
            });
        }
        Ok(Loss {
            value,
            node,
            generation,
        })
    }

    /// Fills every parameter's gradient buffer with ∂loss/∂parameter and
    /// consumes the recorded graph.
    pub fn backward(&mut self, loss: &Loss) -> Result<()> {
        if loss.generation != self.generation {
            return Err(Error::State("loss belongs to an earlier forward pass".into()));
        }
        let (tape, _) = self
            .tape
            .take()
            .ok_or_else(|| Error::State("backward without a recorded forward pass".into()))?;
        let grads = tape.backward(loss.node)?;
        for p in &mut self.params {
            let n = p.tensor.len();
            p.tensor.set_grad(vec![0.0; n])?;
        }
        for (index, g) in grads {
            let dst = self.params[index].tensor.grad_mut();
            for (d, v) in dst.iter_mut().zip(&g) {
                *d += v;
            }
        }
        Ok(())
    }

    /// Forward + loss + backward on one batch; returns the loss value.
    pub fn forward_backward(&mut self, batch: &Batch, opts: &ForwardOptions) -> Result<f64> {
        self.forward(&batch.inputs, opts)?;
        let loss = self.loss(&batch.targets)?;
        self.backward(&loss)?;
        Ok(loss.value)
    }

    /// Forward pass whose graph is discarded immediately.
    pub fn predict(&mut self, inputs: &Inputs) -> Result<Tensor> {
        let out = self.forward(inputs, &ForwardOptions::plain())?;
        self.tape = None;
        Ok(out)
    }

    /// Flat copy of every parameter value in model order.
    pub fn flat_values(&self) -> Vec<Vec<f64>> {
        self.params.iter().map(|p| p.tensor.values().to_vec()).collect()
    }

    pub fn load_flat_values(&mut self, values: &[Vec<f64>]) -> Result<()> {
        if values.len() != self.params.len()
            || values.iter().zip(&self.params).any(|(v, p)| v.len() != p.tensor.len())
        {
            return Err(Error::Consistency("parameter values do not match the model".into()));
        }
        for (p, v) in self.params.iter_mut().zip(values) {
            p.tensor.values_mut().copy_from_slice(v);
            p.tensor.clear_grad();
        }
        self.tape = None;
        Ok(())
    }
}

struct PassCtx<'a> {
    tape: &'a mut Tape,
    params: &'a [Parameter],
    dense_order: &'a [usize],
    caches: &'a mut [Option<ActivationCache>],
    cache: bool,
    noise: &'a NoiseSpec,
    noise_rng: Option<&'a mut ChaCha8Rng>,
    param_nodes: Vec<Option<NodeId>>,
}

impl PassCtx<'_> {
    fn node(&mut self, index: usize) -> NodeId {
        if let Some(id) = self.param_nodes[index] {
            return id;
        }
        let t = &self.params[index].tensor;
        let (rows, cols) = match t.shape() {
            [n] => (1, *n),
            [r, c] => (*r, *c),
            _ => unreachable!("parameters are rank 1 or 2"),
        };
        let id = self.tape.param(index, rows, cols, t.values().to_vec());
        self.param_nodes[index] = Some(id);
        id
    }

    fn dense(&mut self, x: NodeId, layer: &DenseLayer, layout: &RowLayout) -> Result<NodeId> {
        let w = self.node(layer.weight);
        let d_out = self.params[layer.weight].tensor.shape()[0];
        let b = match layer.bias {
            Some(i) => self.node(i),
            None => self.tape.input(1, d_out, vec![0.0; d_out]),
        };
        let rows = self.tape.dims(x).0;
        let noise = match self.noise_rng.as_deref_mut() {
            Some(rng) => {
                let n = match self.noise.mode {
                    NoiseMode::PerFeature => d_out,
                    NoiseMode::PerElement => rows * d_out,
                };
                let normal = Normal::new(0.0, self.noise.variance.sqrt())
                    .map_err(|e| Error::Validation(format!("noise variance: {e}")))?;
                Some((0..n).map(|_| normal.sample(rng)).collect::<Vec<f64>>())
            }
            None => None,
        };
        let y = self.tape.linear(x, w, b, noise.as_deref())?;
        let path = &self.params[layer.weight].path;
        check_finite(self.tape.value(y), path.strip_suffix(".weight").unwrap_or(path))?;
        if self.cache {
            let slot = self
                .dense_order
                .iter()
                .position(|&i| i == layer.weight)
                .expect("dense layers are registered");
            self.caches[slot] = Some(sequence_mean(self.tape.value(y), d_out, layout));
        }
        Ok(y)
    }

    fn norm(&mut self, x: NodeId, (g, b): (usize, usize)) -> Result<NodeId> {
        let g = self.node(g);
        let b = self.node(b);
        self.tape.layer_norm(x, g, b)
    }
}

/// Per-sequence mean over real tokens, then mean over sequences.
fn sequence_mean(y: &[f64], d: usize, layout: &RowLayout) -> ActivationCache {
    let mut mean = vec![0.0; d];
    let batch = layout.lengths.len();
    for (b, &len) in layout.lengths.iter().enumerate() {
        let mut seq = vec![0.0; d];
        for t in 0..len {
            let row = &y[(b * layout.seq_len + t) * d..(b * layout.seq_len + t + 1) * d];
            for (s, v) in seq.iter_mut().zip(row) {
                *s += v;
            }
        }
        for (m, s) in mean.iter_mut().zip(&seq) {
            *m += s / len as f64;
        }
    }
    mean.iter_mut().for_each(|m| *m /= batch as f64);
    ActivationCache {
        mean,
        token_count: layout.lengths.iter().sum(),
    }
}

fn mlp_input(tape: &mut Tape, inputs: &Inputs, features: usize) -> Result<(NodeId, RowLayout)> {
    match inputs {
        Inputs::Features(t) => {
            let [rows, cols] = t.shape() else {
                return Err(Error::Dimension("feature inputs must be rank 2".into()));
            };
            if *cols != features {
                return Err(Error::Dimension(format!(
                    "mlp expects {features} features, got {cols}"
                )));
            }
            t.validate_finite()?;
            let layout = RowLayout {
                seq_len: 1,
                lengths: vec![1; *rows],
            };
            Ok((tape.input(*rows, *cols, t.values().to_vec()), layout))
        }
        Inputs::Tokens {
            ids,
            lengths,
            seq_len,
            ..
        } => {
            let batch = lengths.len();
            if ids.len() != batch * seq_len {
                return Err(Error::Dimension("token batch is inconsistent with its lengths".into()));
            }
            let mut x = vec![0.0; batch * features];
            for (b, &len) in lengths.iter().enumerate() {
                for &id in &ids[b * seq_len..b * seq_len + len] {
                    let id = id as usize;
                    if id >= features {
                        return Err(Error::Dimension(format!(
                            "token id {id} does not fit {features} bag-of-token features"
                        )));
                    }
                    x[b * features + id] += 1.0 / len as f64;
                }
            }
            let layout = RowLayout {
                seq_len: 1,
                lengths: vec![1; batch],
            };
            Ok((tape.input(batch, features, x), layout))
        }
    }
}
