//! Desk-scale tasks with known ground truth, and the byte-level tokenizer.
//!
//! Three task shapes are generated from a seed:
//!
//! * `planted_classify`: random letter strings labelled by a sparse linear
//!   teacher over symbol counts,
//! * `toy_acceptability`: strings that are acceptable unless they contain a
//!   forbidden bigram,
//! * `toy_pair_regression`: string pairs scored by `5 × Jaccard` overlap of
//!   their symbol sets.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Batch, Inputs, Targets, CLS_ID, PAD_ID, REGRESSION_SCALE, SEP_ID};

/// Byte `b` is token `b + TOKEN_OFFSET`.
pub const TOKEN_OFFSET: u32 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    PlantedClassify,
    ToyAcceptability,
    ToyPairRegression,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::PlantedClassify => "planted_classify",
            TaskKind::ToyAcceptability => "toy_acceptability",
            TaskKind::ToyPairRegression => "toy_pair_regression",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [
            TaskKind::PlantedClassify,
            TaskKind::ToyAcceptability,
            TaskKind::ToyPairRegression,
        ]
        .into_iter()
        .find(|k| k.name() == s)
    }

    pub fn is_regression(self) -> bool {
        self == TaskKind::ToyPairRegression
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub n_train: usize,
    pub n_val: usize,
    pub seed: u64,
    /// Number of distinct symbols (`'a'..`), at most 26.
    pub alphabet: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Fraction of symbols (planted) or bigrams (acceptability) the teacher uses.
    pub teacher_sparsity: f64,
    /// Token budget per example, including special tokens.
    pub max_seq_len: usize,
}

impl TaskSpec {
    pub fn new(kind: TaskKind) -> Self {
        Self {
            kind,
            n_train: 2000,
            n_val: 400,
            seed: 0,
            alphabet: 16,
            min_len: 6,
            max_len: 14,
            teacher_sparsity: 0.25,
            max_seq_len: 32,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.alphabet == 0 || self.alphabet > 26 {
            return Err(Error::Validation(format!(
                "alphabet of {} symbols; need 1..=26",
                self.alphabet
            )));
        }
        if !(self.teacher_sparsity > 0.0 && self.teacher_sparsity <= 1.0) {
            return Err(Error::Validation(format!(
                "teacher sparsity {} must lie in (0, 1]",
                self.teacher_sparsity
            )));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::Validation(format!(
                "need 1 <= min_len <= max_len, got {}..{}",
                self.min_len, self.max_len
            )));
        }
        if self.n_train == 0 {
            return Err(Error::Validation("n_train must be >= 1".into()));
        }
        if self.max_seq_len < 2 {
            return Err(Error::Validation("max_seq_len must be >= 2".into()));
        }
        if self.kind == TaskKind::ToyAcceptability && self.alphabet < 2 {
            return Err(Error::Validation("acceptability needs at least 2 symbols".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Label {
    Class(usize),
    Score(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub token_ids: Vec<u32>,
    pub segment_ids: Vec<u8>,
    pub label: Label,
}

/// The rule that produced the labels of a generated dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Teacher {
    /// Label 1 iff the summed symbol weights are positive. Zero weights are
    /// off-support.
    SparseLinear { weights: Vec<f64> },
    /// Label 1 iff no forbidden `(first, second)` symbol bigram occurs.
    Bigram { forbidden: Vec<(usize, usize)> },
    /// Label is `5 × |A ∩ B| / |A ∪ B|` over the symbol sets.
    Overlap,
}

impl Teacher {
    /// Symbols with nonzero teacher weight.
    pub fn support(&self) -> Vec<usize> {
        match self {
            Teacher::SparseLinear { weights } => weights
                .iter()
                .enumerate()
                .filter(|(_, w)| **w != 0.0)
                .map(|(s, _)| s)
                .collect(),
            Teacher::Bigram { forbidden } => {
                let mut s: Vec<usize> = forbidden.iter().flat_map(|&(a, b)| [a, b]).collect();
                s.sort_unstable();
                s.dedup();
                s
            }
            Teacher::Overlap => Vec::new(),
        }
    }

    /// Label the teacher assigns to an example.
    pub fn label(&self, example: &Example) -> Label {
        let symbols = |seg: u8| -> Vec<usize> {
            example
                .token_ids
                .iter()
                .zip(&example.segment_ids)
                .filter(|(&t, &s)| s == seg && t >= TOKEN_OFFSET && t != SEP_ID)
                .filter_map(|(&t, _)| symbol_of_token(t))
                .collect()
        };
        match self {
            Teacher::SparseLinear { weights } => {
                let score: f64 = symbols(0).iter().map(|&s| weights[s]).sum();
                Label::Class(usize::from(score > 0.0))
            }
            Teacher::Bigram { forbidden } => {
                let seq = symbols(0);
                let bad = seq.windows(2).any(|w| forbidden.contains(&(w[0], w[1])));
                Label::Class(usize::from(!bad))
            }
            Teacher::Overlap => Label::Score(overlap_score(&symbols(0), &symbols(1))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: TaskSpec,
    pub train: Vec<Example>,
    pub val: Vec<Example>,
    pub teacher: Teacher,
}

fn symbol_byte(s: usize) -> u8 {
    b'a' + s as u8
}

fn symbol_of_token(t: u32) -> Option<usize> {
    let byte = t.checked_sub(TOKEN_OFFSET)?;
    (b'a' as u32..=b'z' as u32)
        .contains(&byte)
        .then(|| (byte - b'a' as u32) as usize)
}

fn overlap_score(a: &[usize], b: &[usize]) -> f64 {
    let set = |v: &[usize]| v.iter().fold(0u32, |m, &s| m | (1 << s));
    let (sa, sb) = (set(a), set(b));
    let union = (sa | sb).count_ones();
    if union == 0 {
        return REGRESSION_SCALE;
    }
    REGRESSION_SCALE * (sa & sb).count_ones() as f64 / union as f64
}

fn to_text(symbols: &[usize]) -> String {
    symbols.iter().map(|&s| symbol_byte(s) as char).collect()
}

/// `[CLS] bytes…`, truncated to `max_seq_len` tokens.
pub fn tokenize_single(text: &str, max_seq_len: usize) -> Example {
    let mut ids = vec![CLS_ID];
    ids.extend(
        text.bytes()
            .take(max_seq_len.saturating_sub(1))
            .map(|b| b as u32 + TOKEN_OFFSET),
    );
    Example {
        segment_ids: vec![0; ids.len()],
        token_ids: ids,
        label: Label::Class(0),
    }
}

/// `[CLS] a [SEP] b [SEP]` with segment 0 through the first separator and
/// segment 1 after it. The longer side is trimmed first when the pair does
/// not fit `max_seq_len`.
pub fn tokenize_pair(a: &str, b: &str, max_seq_len: usize) -> Result<Example> {
    if a.is_empty() && b.is_empty() {
        return Err(Error::Validation("both sides of the pair are empty".into()));
    }
    if max_seq_len < 3 {
        return Err(Error::Validation("a pair needs at least 3 tokens".into()));
    }
    let (mut la, mut lb) = (a.len(), b.len());
    while la + lb + 3 > max_seq_len {
        if la >= lb {
            la -= 1;
        } else {
            lb -= 1;
        }
    }
    let mut ids = vec![CLS_ID];
    ids.extend(a.bytes().take(la).map(|x| x as u32 + TOKEN_OFFSET));
    ids.push(SEP_ID);
    let first_segment = ids.len();
    ids.extend(b.bytes().take(lb).map(|x| x as u32 + TOKEN_OFFSET));
    ids.push(SEP_ID);
    let mut segments = vec![0u8; ids.len()];
    segments[first_segment..].iter_mut().for_each(|s| *s = 1);
    Ok(Example {
        token_ids: ids,
        segment_ids: segments,
        label: Label::Score(0.0),
    })
}

/// Bytes of the non-special tokens of an example.
pub fn detokenize(example: &Example) -> Vec<u8> {
    example
        .token_ids
        .iter()
        .filter(|&&t| t >= TOKEN_OFFSET)
        .map(|&t| (t - TOKEN_OFFSET) as u8)
        .collect()
}

fn random_symbols(rng: &mut ChaCha8Rng, spec: &TaskSpec) -> Vec<usize> {
    let len = rng.random_range(spec.min_len..=spec.max_len);
    (0..len).map(|_| rng.random_range(0..spec.alphabet)).collect()
}

fn planted_teacher(rng: &mut ChaCha8Rng, spec: &TaskSpec) -> Teacher {
    let k = ((spec.teacher_sparsity * spec.alphabet as f64).round() as usize).clamp(1, spec.alphabet);
    let mut symbols: Vec<usize> = (0..spec.alphabet).collect();
    symbols.shuffle(rng);
    let normal = Normal::<f64>::new(0.0, 1.0).expect("unit normal");
    let mut weights = vec![0.0; spec.alphabet];
    for (i, &s) in symbols[..k].iter().enumerate() {
        let magnitude = 0.5 + normal.sample(rng).abs();
        weights[s] = if i % 2 == 0 { magnitude } else { -magnitude };
    }
    Teacher::SparseLinear { weights }
}

fn bigram_teacher(rng: &mut ChaCha8Rng, spec: &TaskSpec) -> Teacher {
    let n = spec.alphabet;
    let mut all: Vec<(usize, usize)> = (0..n).flat_map(|a| (0..n).map(move |b| (a, b))).collect();
    all.shuffle(rng);
    let k = ((spec.teacher_sparsity * (n * n) as f64).round() as usize).clamp(1, n * n);
    let mut forbidden = Vec::new();
    for (a, b) in all {
        if forbidden.len() == k {
            break;
        }
        // every symbol keeps at least one allowed successor
        let blocked = forbidden.iter().filter(|&&(x, _)| x == a).count();
        if blocked + 1 < n {
            forbidden.push((a, b));
        }
    }
    forbidden.sort_unstable();
    Teacher::Bigram { forbidden }
}

fn acceptable_sequence(rng: &mut ChaCha8Rng, spec: &TaskSpec, forbidden: &[(usize, usize)]) -> Vec<usize> {
    let len = rng.random_range(spec.min_len..=spec.max_len);
    let mut seq = vec![rng.random_range(0..spec.alphabet)];
    while seq.len() < len {
        let prev = *seq.last().unwrap();
        let allowed: Vec<usize> = (0..spec.alphabet)
            .filter(|&s| !forbidden.contains(&(prev, s)))
            .collect();
        seq.push(allowed[rng.random_range(0..allowed.len())]);
    }
    seq
}

fn generate_example(rng: &mut ChaCha8Rng, spec: &TaskSpec, teacher: &Teacher) -> Result<Example> {
    let body = spec.max_seq_len - 1;
    let mut ex = match teacher {
        Teacher::SparseLinear { .. } => {
            let mut s = random_symbols(rng, spec);
            s.truncate(body);
            tokenize_single(&to_text(&s), spec.max_seq_len)
        }
        Teacher::Bigram { forbidden } => {
            let mut s = acceptable_sequence(rng, spec, forbidden);
            s.truncate(body);
            if rng.random_bool(0.5) && s.len() >= 2 {
                let (a, b) = forbidden[rng.random_range(0..forbidden.len())];
                let at = rng.random_range(0..s.len() - 1);
                s[at] = a;
                s[at + 1] = b;
            }
            tokenize_single(&to_text(&s), spec.max_seq_len)
        }
        Teacher::Overlap => {
            let a = random_symbols(rng, spec);
            let change = rng.random::<f64>();
            let mut b: Vec<usize> = a
                .iter()
                .map(|&s| {
                    if rng.random_bool(change) {
                        rng.random_range(0..spec.alphabet)
                    } else {
                        s
                    }
                })
                .collect();
            b.shuffle(rng);
            tokenize_pair(&to_text(&a), &to_text(&b), spec.max_seq_len)?
        }
    };
    ex.label = teacher.label(&ex);
    Ok(ex)
}

/// Generates the train and validation splits of a task. Output is a pure
/// function of `spec`.
pub fn make_task(spec: &TaskSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let teacher = match spec.kind {
        TaskKind::PlantedClassify => planted_teacher(&mut rng, spec),
        TaskKind::ToyAcceptability => bigram_teacher(&mut rng, spec),
        TaskKind::ToyPairRegression => Teacher::Overlap,
    };
    let mut gen = |n: usize| -> Result<Vec<Example>> {
        (0..n).map(|_| generate_example(&mut rng, spec, &teacher)).collect()
    };
    let train = gen(spec.n_train)?;
    let val = gen(spec.n_val)?;
    Ok(Dataset {
        spec: spec.clone(),
        train,
        val,
        teacher,
    })
}

/// Planted classification task; errors unless `spec.kind` is `planted_classify`.
pub fn make_planted_task(spec: &TaskSpec) -> Result<Dataset> {
    if spec.kind != TaskKind::PlantedClassify {
        return Err(Error::Validation(format!(
            "make_planted_task called with a {} spec",
            spec.kind.name()
        )));
    }
    make_task(spec)
}

/// Splits `examples` into batches of `batch_size`, shuffled by
/// `shuffle_seed` when given. The final batch may be short; each batch is
/// padded to its longest example.
pub fn batches(examples: &[Example], batch_size: usize, shuffle_seed: Option<u64>) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::Validation("batch_size must be >= 1".into()));
    }
    let mut order: Vec<usize> = (0..examples.len()).collect();
    if let Some(seed) = shuffle_seed {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    order
        .chunks(batch_size)
        .map(|chunk| collate(chunk.iter().map(|&i| &examples[i])))
        .collect()
}

/// Pads a group of examples into one batch.
pub fn collate<'a>(examples: impl IntoIterator<Item = &'a Example>) -> Result<Batch> {
    let examples: Vec<&Example> = examples.into_iter().collect();
    let seq_len = examples.iter().map(|e| e.token_ids.len()).max().unwrap_or(0);
    if examples.is_empty() || seq_len == 0 {
        return Err(Error::Data("cannot collate an empty batch".into()));
    }
    let mut ids = Vec::with_capacity(examples.len() * seq_len);
    let mut segments = Vec::with_capacity(examples.len() * seq_len);
    for e in &examples {
        if e.token_ids.len() != e.segment_ids.len() {
            return Err(Error::Data("token and segment ids differ in length".into()));
        }
        ids.extend_from_slice(&e.token_ids);
        ids.resize(ids.len() + seq_len - e.token_ids.len(), PAD_ID);
        segments.extend_from_slice(&e.segment_ids);
        segments.resize(segments.len() + seq_len - e.segment_ids.len(), 0);
    }
    let targets = match examples[0].label {
        Label::Class(_) => Targets::Classes(
            examples
                .iter()
                .map(|e| match e.label {
                    Label::Class(c) => Ok(c),
                    Label::Score(_) => Err(Error::Data("mixed label types in one batch".into())),
                })
                .collect::<Result<_>>()?,
        ),
        Label::Score(_) => Targets::Scores(
            examples
                .iter()
                .map(|e| match e.label {
                    Label::Score(s) => Ok(s),
                    Label::Class(_) => Err(Error::Data("mixed label types in one batch".into())),
                })
                .collect::<Result<_>>()?,
        ),
    };
    Ok(Batch {
        inputs: Inputs::Tokens {
            ids,
            segments,
            lengths: examples.iter().map(|e| e.token_ids.len()).collect(),
            seq_len,
        },
        targets,
    })
}

/// One record per line: `ids<TAB>segments<TAB>label`, ids and segments
/// space-separated.
pub fn export_examples(examples: &[Example]) -> String {
    let mut out = String::new();
    for e in examples {
        let join = |v: Vec<String>| v.join(" ");
        let label = match e.label {
            Label::Class(c) => c.to_string(),
            Label::Score(s) => format!("{s:?}"),
        };
        out.push_str(&join(e.token_ids.iter().map(u32::to_string).collect()));
        out.push('\t');
        out.push_str(&join(e.segment_ids.iter().map(u8::to_string).collect()));
        out.push('\t');
        out.push_str(&label);
        out.push('\n');
    }
    out
}

/// Parses [`export_examples`] output; `regression` selects score labels.
pub fn import_examples(text: &str, regression: bool) -> Result<Vec<Example>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, line)| {
            let bad = |what: &str| Error::Data(format!("line {}: {what}", n + 1));
            let mut fields = line.split('\t');
            let (Some(ids), Some(segs), Some(label), None) =
                (fields.next(), fields.next(), fields.next(), fields.next())
            else {
                return Err(bad("expected three tab-separated fields"));
            };
            let token_ids = ids
                .split_whitespace()
                .map(|t| t.parse().map_err(|_| bad("bad token id")))
                .collect::<Result<Vec<u32>>>()?;
            let segment_ids = segs
                .split_whitespace()
                .map(|t| t.parse().map_err(|_| bad("bad segment id")))
                .collect::<Result<Vec<u8>>>()?;
            if token_ids.len() != segment_ids.len() {
                return Err(bad("token and segment counts differ"));
            }
            let label = if regression {
                Label::Score(label.trim().parse().map_err(|_| bad("bad score label"))?)
            } else {
                Label::Class(label.trim().parse().map_err(|_| bad("bad class label"))?)
            };
            Ok(Example {
                token_ids,
                segment_ids,
                label,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests;
