//! Compression ratios, score-to-mask conversion, and mask files.
//!
//! Mask file layout (little-endian):
//!
//! ```text
//! "DCMASK"  version u16  tensor count u32
//! per tensor: path (u16 length + UTF-8), element count u64, kept count u64,
//!             bits packed LSB-first, padded to a whole byte
//! trailer: provenance JSON text up to end of file
//! ```

use std::cmp::Ordering;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::container::{put_str, read_file, write_atomic, Reader, FORMAT_VERSION};
use crate::error::{Error, Result};
use crate::nn::Model;
use crate::strategies::{ImportanceAccumulator, StrategyKind};

pub const MASK_MAGIC: &[u8] = b"DCMASK";

/// Target compression: `ratio` is total parameters before pruning over
/// total parameters after, counting the non-prunable ones on both sides.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CompressionSpec {
    pub ratio: f64,
    pub n_total: usize,
    pub n_prunable: usize,
}

impl CompressionSpec {
    pub fn new(ratio: f64, n_total: usize, n_prunable: usize) -> Self {
        Self {
            ratio,
            n_total,
            n_prunable,
        }
    }

    pub fn for_model(model: &Model, ratio: f64) -> Self {
        Self::new(ratio, model.n_total(), model.n_prunable())
    }

    /// Ratio reached by pruning every prunable parameter.
    pub fn max_ratio(&self) -> f64 {
        let fixed = self.n_total - self.n_prunable;
        if fixed == 0 {
            f64::INFINITY
        } else {
            self.n_total as f64 / fixed as f64
        }
    }

    pub fn kept_fraction(&self) -> Result<f64> {
        compression_to_kept_fraction(self)
    }
}

/// Fraction of prunable parameters that survive at the requested ratio.
pub fn compression_to_kept_fraction(spec: &CompressionSpec) -> Result<f64> {
    if !(spec.ratio.is_finite() && spec.ratio >= 1.0) {
        return Err(Error::Validation(format!(
            "compression ratio {} must be a finite number >= 1",
            spec.ratio
        )));
    }
    if spec.n_prunable == 0 || spec.n_prunable > spec.n_total {
        return Err(Error::Validation(format!(
            "need 0 < n_prunable <= n_total, got {} of {}",
            spec.n_prunable, spec.n_total
        )));
    }
    let fixed = (spec.n_total - spec.n_prunable) as f64;
    let target_total = spec.n_total as f64 / spec.ratio;
    if target_total <= fixed {
        return Err(Error::Infeasible {
            ratio: spec.ratio,
            max_ratio: spec.max_ratio(),
        });
    }
    Ok(((target_total - fixed) / spec.n_prunable as f64).min(1.0))
}

/// `round(f * n)` with halves rounded up.
pub fn kept_count(fraction: f64, n: usize) -> usize {
    ((fraction * n as f64 + 0.5).floor() as usize).min(n)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskScope {
    /// One pooled threshold over every prunable tensor.
    Global,
    /// The same kept fraction inside each tensor.
    Layerwise,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskProvenance {
    pub strategy: String,
    pub ratio: f64,
    pub seed: u64,
    pub scope: MaskScope,
    pub kept_fraction: f64,
    #[serde(default)]
    pub config_hash: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskEntry {
    pub path: String,
    pub bits: Vec<bool>,
    pub kept: usize,
}

/// Keep/prune bit per element of every prunable parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct PruneMask {
    pub entries: Vec<MaskEntry>,
    pub provenance: MaskProvenance,
}

impl PruneMask {
    /// Keeps everything.
    pub fn full(model: &Model) -> Self {
        Self {
            entries: model
                .prunable()
                .map(|p| MaskEntry {
                    path: p.path.clone(),
                    bits: vec![true; p.tensor.len()],
                    kept: p.tensor.len(),
                })
                .collect(),
            provenance: MaskProvenance {
                strategy: "none".into(),
                ratio: 1.0,
                seed: 0,
                scope: MaskScope::Layerwise,
                kept_fraction: 1.0,
                config_hash: String::new(),
            },
        }
    }

    pub fn bits(&self, path: &str) -> Option<&[bool]> {
        self.entries.iter().find(|e| e.path == path).map(|e| e.bits.as_slice())
    }

    pub fn entry(&self, path: &str) -> Option<&MaskEntry> {
        self.entries.iter().find(|e| e.path == path)
    }

    pub fn set_bits(&mut self, path: &str, bits: Vec<bool>) -> Result<()> {
        let e = self
            .entries
            .iter_mut()
            .find(|e| e.path == path)
            .ok_or_else(|| Error::Consistency(format!("mask has no tensor {path}")))?;
        if e.bits.len() != bits.len() {
            return Err(Error::Consistency(format!(
                "{path}: {} bits for {} elements",
                bits.len(),
                e.bits.len()
            )));
        }
        e.kept = bits.iter().filter(|&&b| b).count();
        e.bits = bits;
        Ok(())
    }

    pub fn kept_total(&self) -> usize {
        self.entries.iter().map(|e| e.kept).sum()
    }

    pub fn element_total(&self) -> usize {
        self.entries.iter().map(|e| e.bits.len()).sum()
    }

    /// Checks `popcount == kept` for every tensor.
    pub fn validate(&self) -> Result<()> {
        for e in &self.entries {
            let pop = e.bits.iter().filter(|&&b| b).count();
            if pop != e.kept {
                return Err(Error::Consistency(format!(
                    "{}: kept count {} but {pop} bits set",
                    e.path, e.kept
                )));
            }
        }
        Ok(())
    }

    /// Errors unless the mask covers exactly the model's prunable tensors.
    pub fn check_coverage(&self, model: &Model) -> Result<()> {
        let prunable: Vec<_> = model.prunable().collect();
        if prunable.len() != self.entries.len() {
            return Err(Error::Consistency(format!(
                "mask covers {} tensors, model has {} prunable",
                self.entries.len(),
                prunable.len()
            )));
        }
        for (p, e) in prunable.iter().zip(&self.entries) {
            if p.path != e.path || p.tensor.len() != e.bits.len() {
                return Err(Error::Consistency(format!(
                    "mask tensor {} ({} elements) does not match model tensor {} ({} elements)",
                    e.path,
                    e.bits.len(),
                    p.path,
                    p.tensor.len()
                )));
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MASK_MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            put_str(&mut out, &e.path)?;
            out.extend_from_slice(&(e.bits.len() as u64).to_le_bytes());
            out.extend_from_slice(&(e.kept as u64).to_le_bytes());
            for chunk in e.bits.chunks(8) {
                let byte = chunk
                    .iter()
                    .enumerate()
                    .fold(0u8, |acc, (i, &b)| acc | ((b as u8) << i));
                out.push(byte);
            }
        }
        let trailer = serde_json::to_string(&self.provenance)
            .map_err(|e| Error::Format(format!("provenance: {e}")))?;
        out.extend_from_slice(trailer.as_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.magic(MASK_MAGIC)?;
        let count = r.u32()? as usize;
        let mut entries = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let path = r.string()?;
            let n = r.u64()? as usize;
            let kept = r.u64()? as usize;
            let packed = r.take(n.div_ceil(8))?;
            let bits = (0..n).map(|i| packed[i / 8] >> (i % 8) & 1 == 1).collect();
            entries.push(MaskEntry { path, bits, kept });
        }
        let trailer = r.rest_utf8()?;
        let provenance = serde_json::from_str(&trailer)
            .map_err(|e| Error::Format(format!("mask provenance trailer: {e}")))?;
        let mask = Self { entries, provenance };
        mask.validate().map_err(|e| Error::Format(e.to_string()))?;
        Ok(mask)
    }
}

fn by_score_then_index(a: &(f64, usize), b: &(f64, usize)) -> Ordering {
    b.0.total_cmp(&a.0).then(a.1.cmp(&b.1))
}

fn check_scores(acc: &ImportanceAccumulator, spec: &CompressionSpec) -> Result<f64> {
    let n: usize = acc.entries().iter().map(|e| e.scores.len()).sum();
    if n != spec.n_prunable {
        return Err(Error::Consistency(format!(
            "scores cover {n} elements but the compression spec counts {} prunable",
            spec.n_prunable
        )));
    }
    for e in acc.entries() {
        if e.shape.iter().product::<usize>() != e.scores.len() {
            return Err(Error::Consistency(format!("{}: score/shape mismatch", e.path)));
        }
        if let Some(bad) = e.scores.iter().find(|s| !s.is_finite()) {
            return Err(Error::Numeric {
                layer: e.path.clone(),
                detail: format!("score {bad}"),
            });
        }
    }
    compression_to_kept_fraction(spec)
}

fn provenance(acc: &ImportanceAccumulator, spec: &CompressionSpec, scope: MaskScope, f: f64) -> MaskProvenance {
    MaskProvenance {
        strategy: acc.strategy.kind.name().to_string(),
        ratio: spec.ratio,
        seed: acc.seed,
        scope,
        kept_fraction: f,
        config_hash: acc.config_hash.clone(),
    }
}

/// Keeps the top `round(f * n)` scores of every tensor independently.
/// Equal scores keep the lower flat index first.
pub fn build_mask_layerwise(acc: &ImportanceAccumulator, spec: &CompressionSpec) -> Result<PruneMask> {
    let f = check_scores(acc, spec)?;
    let entries = acc
        .entries()
        .iter()
        .map(|e| {
            let k = kept_count(f, e.scores.len());
            let mut order: Vec<(f64, usize)> = e.scores.iter().copied().zip(0..).collect();
            order.sort_unstable_by(by_score_then_index);
            let mut bits = vec![false; e.scores.len()];
            for &(_, i) in &order[..k] {
                bits[i] = true;
            }
            MaskEntry {
                path: e.path.clone(),
                bits,
                kept: k,
            }
        })
        .collect();
    Ok(PruneMask {
        entries,
        provenance: provenance(acc, spec, MaskScope::Layerwise, f),
    })
}

/// Keeps the top `round(f * n_prunable)` scores pooled over all tensors.
/// Ties go to the earlier tensor, then the lower flat index.
pub fn build_mask_global(acc: &ImportanceAccumulator, spec: &CompressionSpec) -> Result<PruneMask> {
    let f = check_scores(acc, spec)?;
    let k = kept_count(f, spec.n_prunable);
    let mut pooled: Vec<(f64, usize)> = acc
        .entries()
        .iter()
        .flat_map(|e| e.scores.iter().copied())
        .zip(0..)
        .collect();
    pooled.sort_unstable_by(by_score_then_index);
    let mut flat = vec![false; spec.n_prunable];
    for &(_, i) in &pooled[..k] {
        flat[i] = true;
    }
    let mut offset = 0;
    let entries = acc
        .entries()
        .iter()
        .map(|e| {
            let bits = flat[offset..offset + e.scores.len()].to_vec();
            offset += e.scores.len();
            let kept = bits.iter().filter(|&&b| b).count();
            MaskEntry {
                path: e.path.clone(),
                bits,
                kept,
            }
        })
        .collect();
    Ok(PruneMask {
        entries,
        provenance: provenance(acc, spec, MaskScope::Global, f),
    })
}

/// Scope used by each strategy: only the global magnitude baseline pools.
pub fn scope_for(kind: StrategyKind) -> MaskScope {
    match kind {
        StrategyKind::GlobalMagWeight => MaskScope::Global,
        _ => MaskScope::Layerwise,
    }
}

pub fn build_mask(acc: &ImportanceAccumulator, spec: &CompressionSpec) -> Result<PruneMask> {
    match scope_for(acc.strategy.kind) {
        MaskScope::Global => build_mask_global(acc, spec),
        MaskScope::Layerwise => build_mask_layerwise(acc, spec),
    }
}

/// Zeroes every pruned element of `model`.
pub fn apply_mask(model: &mut Model, mask: &PruneMask) -> Result<()> {
    mask.check_coverage(model)?;
    for p in model.params_mut().iter_mut().filter(|p| p.prunable) {
        let bits = mask.bits(&p.path).expect("coverage checked");
        for (v, &keep) in p.tensor.values_mut().iter_mut().zip(bits) {
            if !keep {
                *v = 0.0;
            }
        }
    }
    Ok(())
}

/// Largest absolute value among pruned elements; zero for a respected mask.
pub fn masked_linf(model: &Model, mask: &PruneMask) -> f64 {
    model
        .prunable()
        .filter_map(|p| mask.bits(&p.path).map(|bits| (p, bits)))
        .flat_map(|(p, bits)| {
            p.tensor
                .values()
                .iter()
                .zip(bits)
                .filter(|(_, &keep)| !keep)
                .map(|(v, _)| v.abs())
        })
        .fold(0.0, f64::max)
}

pub fn write_mask(mask: &PruneMask, path: &Path) -> Result<()> {
    write_atomic(path, &mask.to_bytes()?)
}

pub fn read_mask(path: &Path) -> Result<PruneMask> {
    PruneMask::from_bytes(&read_file(path)?)
}
