//! Mask overlap analytics: per-tensor intersection-over-union, per-layer and
//! per-attention-head views, cross-strategy matrices, and CSV / plot-data
//! emission.
//!
//! Output schemas (all files comma separated with a header row):
//!
//! ```text
//! runs.csv        task,strategy,ratio,seed,pre_metric,post_metric,final_metric,kept_fraction,wall_seconds,mask_path
//! iou_matrix.csv  ratio,seed,strategy_a,strategy_b,mean_iou,min_iou
//! head_iou.csv    ratio,seed,strategy_a,strategy_b,layer,head,iou
//! layer_iou.csv   ratio,seed,strategy_a,strategy_b,layer,iou
//! ```
//!
//! Plot data lives under `plots/` as two-column `x y` text files whose
//! leading `#` lines name the strategy, ratio and the kind of figure.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::container::write_atomic;
use crate::error::{Error, Result};
use crate::lth::{RunReport, RUNS_CSV_HEADER};
use crate::masking::PruneMask;
use crate::nn::{Arch, ModelSpec};

/// Intersection and union sizes of one tensor's kept sets.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorIou {
    pub path: String,
    pub intersection: usize,
    pub union: usize,
}

impl TensorIou {
    /// `|A ∩ B| / |A ∪ B|`, taken as 1 when both kept sets are empty.
    pub fn iou(&self) -> f64 {
        if self.union == 0 {
            1.0
        } else {
            self.intersection as f64 / self.union as f64
        }
    }
}

fn counts(a: &[bool], b: &[bool]) -> (usize, usize) {
    a.iter().zip(b).fold((0, 0), |(i, u), (&x, &y)| (i + usize::from(x && y), u + usize::from(x || y)))
}

fn check_same_coverage(a: &PruneMask, b: &PruneMask) -> Result<()> {
    if a.entries.len() != b.entries.len()
        || a
            .entries
            .iter()
            .zip(&b.entries)
            .any(|(x, y)| x.path != y.path || x.bits.len() != y.bits.len())
    {
        return Err(Error::Consistency("masks cover different tensors".into()));
    }
    Ok(())
}

/// Per-tensor IOU of two masks over the same tensors, in mask order.
pub fn mask_iou(a: &PruneMask, b: &PruneMask) -> Result<Vec<TensorIou>> {
    check_same_coverage(a, b)?;
    Ok(a.entries
        .iter()
        .zip(&b.entries)
        .map(|(x, y)| {
            let (intersection, union) = counts(&x.bits, &y.bits);
            TensorIou {
                path: x.path.clone(),
                intersection,
                union,
            }
        })
        .collect())
}

/// Flat element indices of one tensor owned by a head.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadSlice {
    pub path: String,
    pub indices: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadSlices {
    pub layer: usize,
    pub head: usize,
    pub slices: Vec<HeadSlice>,
}

/// Which parameter elements belong to each attention head. Head `h` owns
/// rows `h·d_h .. (h+1)·d_h` of the query/key/value weights and the query
/// and value biases, and the same range of columns of the output
/// projection weight. The output projection bias mixes all heads and is
/// left out.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct HeadMap {
    pub heads: Vec<HeadSlices>,
}

impl HeadMap {
    pub fn from_spec(spec: &ModelSpec) -> Self {
        let Arch::Miniformer {
            d_model,
            n_layers,
            n_heads,
            ..
        } = spec.arch
        else {
            return Self::default();
        };
        let dh = d_model / n_heads;
        let mut heads = Vec::new();
        for layer in 0..n_layers {
            let p = |name: &str| format!("encoder.layer{layer}.attn.{name}");
            for head in 0..n_heads {
                let rows = head * dh..(head + 1) * dh;
                let row_block: Vec<usize> = rows.clone().flat_map(|r| r * d_model..(r + 1) * d_model).collect();
                let col_block: Vec<usize> = (0..d_model).flat_map(|r| rows.clone().map(move |c| r * d_model + c)).collect();
                let slices = vec![
                    HeadSlice { path: p("q_proj.weight"), indices: row_block.clone() },
                    HeadSlice { path: p("q_proj.bias"), indices: rows.clone().collect() },
                    HeadSlice { path: p("k_proj.weight"), indices: row_block.clone() },
                    HeadSlice { path: p("v_proj.weight"), indices: row_block },
                    HeadSlice { path: p("v_proj.bias"), indices: rows.clone().collect() },
                    HeadSlice { path: p("o_proj.weight"), indices: col_block },
                ];
                heads.push(HeadSlices { layer, head, slices });
            }
        }
        Self { heads }
    }

    /// Errors if a slice names an unknown tensor or an out-of-range index.
    pub fn check(&self, mask: &PruneMask) -> Result<()> {
        for h in &self.heads {
            for s in &h.slices {
                let bits = mask.bits(&s.path).ok_or_else(|| {
                    Error::Consistency(format!("head map names {} which the mask lacks", s.path))
                })?;
                if let Some(&bad) = s.indices.iter().find(|&&i| i >= bits.len()) {
                    return Err(Error::Consistency(format!(
                        "head map index {bad} is outside {} ({} elements)",
                        s.path,
                        bits.len()
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadIou {
    pub layer: usize,
    pub head: usize,
    pub intersection: usize,
    pub union: usize,
}

impl HeadIou {
    pub fn iou(&self) -> f64 {
        if self.union == 0 {
            1.0
        } else {
            self.intersection as f64 / self.union as f64
        }
    }
}

/// IOU over the union of each head's slices.
pub fn head_iou(a: &PruneMask, b: &PruneMask, map: &HeadMap) -> Result<Vec<HeadIou>> {
    check_same_coverage(a, b)?;
    map.check(a)?;
    Ok(map
        .heads
        .iter()
        .map(|h| {
            let (mut intersection, mut union) = (0, 0);
            for s in &h.slices {
                let (x, y) = (a.bits(&s.path).unwrap(), b.bits(&s.path).unwrap());
                for &i in &s.indices {
                    intersection += usize::from(x[i] && y[i]);
                    union += usize::from(x[i] || y[i]);
                }
            }
            HeadIou {
                layer: h.layer,
                head: h.head,
                intersection,
                union,
            }
        })
        .collect())
}

/// Layer key of a parameter path: `encoder.layer3` for everything under it.
fn layer_of(path: &str) -> String {
    let mut parts = path.split('.');
    match (parts.next(), parts.next()) {
        (Some(a), Some(b)) if a == "encoder" => format!("{a}.{b}"),
        (Some(a), _) => a.to_string(),
        _ => path.to_string(),
    }
}

/// Everything derived from one pair of masks.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskComparison {
    pub per_tensor: Vec<TensorIou>,
    /// Mean tensor IOU per encoder layer, in layer order.
    pub per_layer: Vec<(String, f64)>,
    pub per_head: Vec<HeadIou>,
    pub mean_iou: f64,
    pub min_iou: f64,
}

pub fn compare_masks(a: &PruneMask, b: &PruneMask, heads: &HeadMap) -> Result<MaskComparison> {
    let per_tensor = mask_iou(a, b)?;
    if per_tensor.is_empty() {
        return Err(Error::Consistency("masks cover no tensors".into()));
    }
    let per_head = if heads.heads.is_empty() {
        Vec::new()
    } else {
        head_iou(a, b, heads)?
    };
    let mut layers: Vec<(String, f64, usize)> = Vec::new();
    for t in &per_tensor {
        let key = layer_of(&t.path);
        match layers.iter_mut().find(|(k, _, _)| *k == key) {
            Some(entry) => {
                entry.1 += t.iou();
                entry.2 += 1;
            }
            None => layers.push((key, t.iou(), 1)),
        }
    }
    let ious: Vec<f64> = per_tensor.iter().map(TensorIou::iou).collect();
    Ok(MaskComparison {
        mean_iou: ious.iter().sum::<f64>() / ious.len() as f64,
        min_iou: ious.iter().copied().fold(f64::INFINITY, f64::min),
        per_layer: layers.into_iter().map(|(k, s, n)| (k, s / n as f64)).collect(),
        per_head,
        per_tensor,
    })
}

/// Symmetric strategy × strategy matrices of mean and min tensor IOU.
#[derive(Debug, Clone, PartialEq)]
pub struct IouMatrix {
    pub names: Vec<String>,
    pub mean: Vec<Vec<f64>>,
    pub min: Vec<Vec<f64>>,
}

pub fn iou_matrix(masks: &[(String, PruneMask)]) -> Result<IouMatrix> {
    if masks.len() < 2 {
        return Err(Error::Argument("an IOU matrix needs at least two masks".into()));
    }
    let n = masks.len();
    let mut mean = vec![vec![1.0; n]; n];
    let mut min = vec![vec![1.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let c = compare_masks(&masks[i].1, &masks[j].1, &HeadMap::default())?;
            mean[i][j] = c.mean_iou;
            mean[j][i] = c.mean_iou;
            min[i][j] = c.min_iou;
            min[j][i] = c.min_iou;
        }
    }
    Ok(IouMatrix {
        names: masks.iter().map(|(n, _)| n.clone()).collect(),
        mean,
        min,
    })
}

/// One strategy pair compared at one ratio and seed.
#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub ratio: f64,
    pub seed: u64,
    pub strategy_a: String,
    pub strategy_b: String,
    pub result: MaskComparison,
}

pub const IOU_MATRIX_HEADER: &str = "ratio,seed,strategy_a,strategy_b,mean_iou,min_iou";
pub const HEAD_IOU_HEADER: &str = "ratio,seed,strategy_a,strategy_b,layer,head,iou";
pub const LAYER_IOU_HEADER: &str = "ratio,seed,strategy_a,strategy_b,layer,iou";

pub fn runs_csv(reports: &[RunReport]) -> String {
    let mut out = format!("{RUNS_CSV_HEADER}\n");
    for r in reports {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

fn safe(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '_' || c == '.' { c } else { '-' })
        .collect()
}

/// Writes the three comparison tables below `out_dir`.
pub fn write_comparisons(comparisons: &[Comparison], out_dir: &Path) -> Result<()> {
    let mut matrix = format!("{IOU_MATRIX_HEADER}\n");
    let mut heads = format!("{HEAD_IOU_HEADER}\n");
    let mut layers = format!("{LAYER_IOU_HEADER}\n");
    for c in comparisons {
        let key = format!("{},{},{},{}", c.ratio, c.seed, c.strategy_a, c.strategy_b);
        let _ = writeln!(matrix, "{key},{},{}", c.result.mean_iou, c.result.min_iou);
        for h in &c.result.per_head {
            let _ = writeln!(heads, "{key},{},{},{}", h.layer, h.head, h.iou());
        }
        for (layer, iou) in &c.result.per_layer {
            let _ = writeln!(layers, "{key},{layer},{iou}");
        }
    }
    write_atomic(&out_dir.join("iou_matrix.csv"), matrix.as_bytes())?;
    write_atomic(&out_dir.join("head_iou.csv"), heads.as_bytes())?;
    write_atomic(&out_dir.join("layer_iou.csv"), layers.as_bytes())
}

/// Writes `runs.csv`, the comparison tables and the `plots/` directory
/// below `out_dir`.
pub fn emit_report(reports: &[RunReport], comparisons: &[Comparison], out_dir: &Path) -> Result<()> {
    write_atomic(&out_dir.join("runs.csv"), runs_csv(reports).as_bytes())?;
    write_comparisons(comparisons, out_dir)?;

    let plots = out_dir.join("plots");
    // Final metric against compression ratio, averaged over seeds.
    let mut by_strategy: BTreeMap<(String, String), BTreeMap<u64, Vec<f64>>> = BTreeMap::new();
    for r in reports {
        by_strategy
            .entry((r.task.clone(), r.strategy.clone()))
            .or_default()
            .entry(r.ratio.to_bits())
            .or_default()
            .push(r.final_metric);
    }
    for ((task, strategy), points) in &by_strategy {
        let metric = reports
            .iter()
            .find(|r| r.task == *task)
            .map_or("metric", |r| r.metric.name());
        let mut text = format!("# figure: final {metric} vs compression ratio\n# task: {task}\n# strategy: {strategy}\nratio {metric}\n");
        let mut rows: Vec<(f64, f64)> = points
            .iter()
            .map(|(bits, v)| (f64::from_bits(*bits), v.iter().sum::<f64>() / v.len() as f64))
            .collect();
        rows.sort_by(|a, b| a.0.total_cmp(&b.0));
        for (x, y) in rows {
            let _ = writeln!(text, "{x} {y}");
        }
        write_atomic(
            &plots.join(format!("metric_vs_ratio_{}_{}.txt", safe(task), safe(strategy))),
            text.as_bytes(),
        )?;
    }
    // Per-layer IOU curves for each strategy pair and ratio, averaged over seeds.
    let mut curves: BTreeMap<(String, String, u64), Vec<&Comparison>> = BTreeMap::new();
    for c in comparisons {
        curves
            .entry((c.strategy_a.clone(), c.strategy_b.clone(), c.ratio.to_bits()))
            .or_default()
            .push(c);
    }
    for ((a, b, ratio_bits), group) in &curves {
        let ratio = f64::from_bits(*ratio_bits);
        let mut text = format!(
            "# figure: per-layer mask IOU\n# strategies: {a} vs {b}\n# ratio: {ratio}\nlayer iou\n"
        );
        let layers = &group[0].result.per_layer;
        for (i, (name, _)) in layers.iter().enumerate() {
            let vals: Vec<f64> = group
                .iter()
                .filter_map(|c| c.result.per_layer.iter().find(|(n, _)| n == name).map(|(_, v)| *v))
                .collect();
            let _ = writeln!(text, "{i} {}", vals.iter().sum::<f64>() / vals.len() as f64);
        }
        write_atomic(
            &plots.join(format!("layer_iou_{}_vs_{}_r{ratio}.txt", safe(a), safe(b))),
            text.as_bytes(),
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests;
