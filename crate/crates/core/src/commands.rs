//! Subcommand implementations behind the `deepcuts` binary. Each stage
//! command persists its artifact under the run's output directory using
//! the [`layout`] paths, so `train` → `score` → `prune` → `run --resume`
//! produces the same files as a single `run`.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use log::info;

use crate::analysis::{compare_masks, emit_report, write_comparisons, Comparison, HeadMap};
use crate::config::RunConfig;
use crate::error::{Error, Result, StageExt};
use crate::lth::{finish, layout, prepare, restore, score, PipelineConfig, RunReport, Trained};
use crate::masking::{build_mask, read_mask, write_mask, CompressionSpec, PruneMask};
use crate::nn::{read_checkpoint, ModelSpec};
use crate::strategies::{read_scores, write_scores, ImportanceAccumulator, StrategyKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunOptions {
    /// Worker threads for independent cells.
    pub jobs: usize,
    /// Reuse artifacts whose embedded config hash matches.
    pub resume: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self { jobs: 1, resume: false }
    }
}

/// Maps `f` over `items` on up to `jobs` threads, keeping input order.
/// The first error wins.
fn par_map<T, R, F>(items: Vec<T>, jobs: usize, f: F) -> Result<Vec<R>>
where
    T: Send,
    R: Send,
    F: Fn(T) -> Result<R> + Sync,
{
    if jobs <= 1 || items.len() <= 1 {
        return items.into_iter().map(f).collect();
    }
    let n = items.len();
    let slots: Vec<Mutex<Option<T>>> = items.into_iter().map(|t| Mutex::new(Some(t))).collect();
    let results: Vec<Mutex<Option<Result<R>>>> = (0..n).map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    std::thread::scope(|scope| {
        for _ in 0..jobs.min(n) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= n {
                    break;
                }
                let item = slots[i].lock().unwrap().take().unwrap();
                *results[i].lock().unwrap() = Some(f(item));
            });
        }
    });
    results.into_iter().map(|r| r.into_inner().unwrap().unwrap()).collect()
}

fn any_strategy(config: &RunConfig, ratio: f64, seed: u64) -> PipelineConfig {
    config.pipeline(&config.strategies[0], ratio, seed)
}

fn trained_for(config: &RunConfig, seed: u64, resume: bool) -> Result<Trained> {
    let pc = any_strategy(config, config.ratios[0], seed);
    let out = &config.out;
    if resume && layout::init_checkpoint(out, seed).exists() && layout::trained_checkpoint(out, seed).exists() {
        match restore(&pc, out, None) {
            Ok(t) => {
                info!("seed={seed}: reusing checkpoints");
                return Ok(t);
            }
            Err(e) => info!("seed={seed}: checkpoints not reusable ({e}); retraining"),
        }
    }
    prepare(&pc, Some(out))
}

/// Builds and fine-tunes one model per seed, writing the initial and
/// fine-tuned checkpoints.
pub fn cmd_train(config: &RunConfig, jobs: usize) -> Result<Vec<PathBuf>> {
    let paths = par_map(config.seeds.clone(), jobs, |seed| {
        prepare(&any_strategy(config, config.ratios[0], seed), Some(&config.out))?;
        Ok(layout::trained_checkpoint(&config.out, seed))
    })?;
    Ok(paths)
}

/// Scores one seed's fine-tuned checkpoint with one strategy.
pub fn cmd_score(config: &RunConfig, kind: StrategyKind, seed: u64, checkpoint: Option<&Path>) -> Result<PathBuf> {
    let strategy = config
        .strategy(kind)
        .ok_or_else(|| Error::Argument(format!("strategy {kind} is not listed in the config")))?;
    let pc = config.pipeline(strategy, config.ratios[0], seed);
    let trained = restore(&pc, &config.out, checkpoint)?;
    let acc = score(&trained, &pc).stage("score")?;
    let path = layout::scores(&config.out, seed, kind);
    write_scores(&acc, &path).stage("score")?;
    Ok(path)
}

fn mask_from_scores(acc: &ImportanceAccumulator, ratio: f64) -> Result<PruneMask> {
    let n_prunable = acc.n_prunable();
    let spec = CompressionSpec::new(ratio, acc.n_total, n_prunable);
    let mut mask = build_mask(acc, &spec)?;
    mask.provenance.seed = acc.seed;
    Ok(mask)
}

/// Turns a score file into a mask at `ratio`, written below `out` at the
/// path a full run would use.
pub fn cmd_prune(scores: &Path, ratio: f64, out: &Path) -> Result<PathBuf> {
    let acc = read_scores(scores)?;
    let mask = mask_from_scores(&acc, ratio).stage("build_mask")?;
    let path = out.join(layout::mask_rel(acc.seed, acc.strategy.kind, ratio));
    write_mask(&mask, &path).stage("build_mask")?;
    Ok(path)
}

fn completed_report(pc: &PipelineConfig, out: &Path) -> Option<RunReport> {
    let text = std::fs::read_to_string(layout::report(out, pc.seed, pc.strategy.kind, pc.ratio)).ok()?;
    let report = RunReport::from_record(&text).ok()?;
    let done = report.config_hash == pc.config_hash && out.join(&report.mask_path).exists();
    done.then_some(report)
}

fn scores_for(trained: &Trained, pc: &PipelineConfig, out: &Path, resume: bool) -> Result<ImportanceAccumulator> {
    let path = layout::scores(out, pc.seed, pc.strategy.kind);
    if resume {
        if let Ok(acc) = read_scores(&path) {
            if acc.config_hash == pc.config_hash && acc.strategy == pc.strategy && acc.seed == pc.seed {
                info!("seed={} strategy={}: reusing scores", pc.seed, pc.strategy.kind);
                return Ok(acc);
            }
        }
    }
    let acc = score(trained, pc).stage("score")?;
    write_scores(&acc, &path).stage("score")?;
    Ok(acc)
}

/// Runs every strategy × ratio × seed cell. Data, the initial fine-tune
/// and scoring are shared across the cells that depend on them. Writes
/// per-cell reports, `runs.csv`, the IOU tables and plot data.
pub fn cmd_run(config: &RunConfig, opts: RunOptions) -> Result<Vec<RunReport>> {
    let out = config.out.as_path();
    let jobs = opts.jobs.max(1);
    let mut reports = Vec::new();
    for &seed in &config.seeds {
        let cells: Vec<PipelineConfig> = config
            .strategies
            .iter()
            .flat_map(|s| config.ratios.iter().map(move |&r| config.pipeline(s, r, seed)))
            .collect();
        let done: Vec<Option<RunReport>> = cells
            .iter()
            .map(|pc| if opts.resume { completed_report(pc, out) } else { None })
            .collect();
        if done.iter().all(Option::is_some) {
            info!("seed={seed}: all cells complete");
            reports.extend(done.into_iter().flatten());
            continue;
        }
        let trained = trained_for(config, seed, opts.resume)?;
        let todo: Vec<&PipelineConfig> = config
            .strategies
            .iter()
            .filter(|s| cells.iter().zip(&done).any(|(pc, d)| pc.strategy == **s && d.is_none()))
            .map(|s| cells.iter().find(|pc| pc.strategy == *s).unwrap())
            .collect();
        let scored = par_map(todo, jobs, |pc| Ok((pc.strategy.kind, scores_for(&trained, pc, out, opts.resume)?)))?;
        let pending: Vec<(usize, &PipelineConfig)> = cells.iter().enumerate().filter(|(i, _)| done[*i].is_none()).collect();
        let finished = par_map(pending, jobs, |(i, pc)| {
            let acc = &scored.iter().find(|(k, _)| *k == pc.strategy.kind).unwrap().1;
            Ok((i, finish(&trained, acc, pc, Some(out), Vec::new())?.report))
        })?;
        let mut row: Vec<Option<RunReport>> = done;
        for (i, r) in finished {
            row[i] = Some(r);
        }
        reports.extend(row.into_iter().flatten());
    }
    let comparisons = compare_run(config, &reports)?;
    emit_report(&reports, &comparisons, out)?;
    Ok(reports)
}

/// All strategy pairs at each (seed, ratio) of a finished run.
fn compare_run(config: &RunConfig, reports: &[RunReport]) -> Result<Vec<Comparison>> {
    compare_reports(reports, &config.out, &HeadMap::from_spec(&config.model))
}

fn compare_reports(reports: &[RunReport], out: &Path, heads: &HeadMap) -> Result<Vec<Comparison>> {
    let mut comparisons = Vec::new();
    for (i, a) in reports.iter().enumerate() {
        for b in &reports[i + 1..] {
            if a.seed != b.seed || a.ratio != b.ratio || a.strategy == b.strategy {
                continue;
            }
            let (ma, mb) = (read_mask(&out.join(&a.mask_path))?, read_mask(&out.join(&b.mask_path))?);
            comparisons.push(Comparison {
                ratio: a.ratio,
                seed: a.seed,
                strategy_a: a.strategy.clone(),
                strategy_b: b.strategy.clone(),
                result: compare_masks(&ma, &mb, heads)?,
            });
        }
    }
    comparisons.sort_by(|x, y| {
        (x.seed, x.ratio, &x.strategy_a, &x.strategy_b)
            .partial_cmp(&(y.seed, y.ratio, &y.strategy_a, &y.strategy_b))
            .unwrap()
    });
    Ok(comparisons)
}

/// Compares every pair of the given masks and writes the IOU tables to
/// `out_dir`. With a model spec, per-head IOUs are included.
pub fn cmd_analyze(masks: &[PathBuf], spec: Option<&ModelSpec>, out_dir: &Path) -> Result<Vec<Comparison>> {
    if masks.len() < 2 {
        return Err(Error::Argument("analyze needs at least two mask files".into()));
    }
    let heads = spec.map(HeadMap::from_spec).unwrap_or_default();
    let loaded: Vec<(String, PruneMask)> = masks
        .iter()
        .map(|p| {
            let m = read_mask(p)?;
            let label = p.file_stem().map_or_else(|| m.provenance.strategy.clone(), |s| s.to_string_lossy().into_owned());
            Ok((label, m))
        })
        .collect::<Result<_>>()?;
    let mut comparisons = Vec::new();
    for (i, (la, a)) in loaded.iter().enumerate() {
        for (lb, b) in &loaded[i + 1..] {
            comparisons.push(Comparison {
                ratio: a.provenance.ratio,
                seed: a.provenance.seed,
                strategy_a: la.clone(),
                strategy_b: lb.clone(),
                result: compare_masks(a, b, &heads)?,
            });
        }
    }
    write_comparisons(&comparisons, out_dir)?;
    Ok(comparisons)
}

/// Model spec recorded in a seed's initial checkpoint, if readable.
fn recorded_spec(out: &Path, seed: u64) -> Option<ModelSpec> {
    let ckpt = read_checkpoint(&layout::init_checkpoint(out, seed)).ok()?;
    let v: serde_json::Value = serde_json::from_str(&ckpt.provenance).ok()?;
    serde_json::from_value(v.get("model")?.clone()).ok()
}

/// Collects every report below `out_dir` and regenerates the aggregated
/// tables and plot data from them.
pub fn cmd_report(out_dir: &Path) -> Result<(Vec<RunReport>, Vec<Comparison>)> {
    let mut reports = Vec::new();
    let entries = std::fs::read_dir(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut seed_dirs: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir() && p.file_name().is_some_and(|n| n.to_string_lossy().starts_with("seed")))
        .collect();
    seed_dirs.sort();
    for dir in seed_dirs {
        let Ok(files) = std::fs::read_dir(dir.join("reports")) else { continue };
        for f in files.filter_map(|e| e.ok().map(|e| e.path())) {
            if f.extension().is_some_and(|x| x == "txt") {
                let text = std::fs::read_to_string(&f).map_err(|e| Error::io(&f, e))?;
                reports.push(RunReport::from_record(&text)?);
            }
        }
    }
    if reports.is_empty() {
        return Err(Error::Data(format!("no run reports under {}", out_dir.display())));
    }
    let order = |name: &str| StrategyKind::parse(name).map_or(usize::MAX, |k| k as usize);
    reports.sort_by(|a, b| {
        (a.seed, order(&a.strategy), a.ratio)
            .partial_cmp(&(b.seed, order(&b.strategy), b.ratio))
            .unwrap()
    });
    let heads = recorded_spec(out_dir, reports[0].seed)
        .map(|s| HeadMap::from_spec(&s))
        .unwrap_or_default();
    let comparisons = compare_reports(&reports, out_dir, &heads)?;
    emit_report(&reports, &comparisons, out_dir)?;
    Ok((reports, comparisons))
}
