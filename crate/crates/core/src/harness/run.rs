//! Pipeline stages writing into run directories.

use std::fs;
use std::path::{Path, PathBuf};

use super::bench::{bench_inputs, depth_table, latency_table, measure_latency, LatencyRow};
use super::checkpoint::{lineage_of, load_checkpoint, save_checkpoint, Stage};
use super::config::RunConfig;
use super::io::write_atomic;
use super::report::{emit_report, DEPTH_FILE, LATENCY_FILE, METRICS_FILE};
use super::sweep::SweepGrid;
use crate::corpus::{preprocess_file, InteractionDataset, Split, SplitInstance, Splits};
use crate::error::{Error, Result};
use crate::evalrank::{evaluate, rank_of, MetricsReport, DEFAULT_KS, EVAL_SEED};
use crate::posttrain::{train_rpt, RptOutcome};
use crate::pretrain::{curves_csv, train_spt, CurveRow, SptOutcome, TrainHooks};
use crate::reasoner::{batch_logits, ModelParameters};
use crate::rng::derive_seed;

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const CONFIG_FILE: &str = "config.cfg";
pub const RL_FILE: &str = "rl_diagnostics.csv";
pub const SWEEP_FILE: &str = "sweep.csv";
/// Default output root when neither `--out` nor `out` is given.
pub const RUN_DIR_ENV: &str = "LARES_RUN_DIR";

/// Per-epoch progress callback.
pub type Progress<'a> = Option<Box<dyn FnMut(&CurveRow) + 'a>>;

#[derive(Debug, Clone)]
pub struct LoadedData {
    pub dataset: InteractionDataset,
    pub splits: Splits,
}

impl LoadedData {
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dataset = InteractionDataset::load(dir)?;
        let splits = dataset.splits()?;
        Ok(Self { dataset, splits })
    }

    pub fn split(&self, split: Split) -> &[SplitInstance] {
        match split {
            Split::Train => &self.splits.train,
            Split::Valid => &self.splits.valid,
            Split::Test => &self.splits.test,
        }
    }
}

/// `explicit`, else the config's `out`, else `$LARES_RUN_DIR/<name>`.
pub fn resolve_out(explicit: Option<&Path>, cfg: &RunConfig, name: &str) -> Result<PathBuf> {
    if let Some(p) = explicit.or(cfg.out.as_deref()) {
        return Ok(p.to_path_buf());
    }
    match std::env::var_os(RUN_DIR_ENV) {
        Some(root) => Ok(PathBuf::from(root).join(name)),
        None => Err(Error::Config(format!("no output directory: pass --out, set `out`, or set {RUN_DIR_ENV}"))),
    }
}

pub fn preprocess(input: &Path, out: &Path, cfg: &RunConfig, delimiter: char) -> Result<InteractionDataset> {
    preprocess_file(input, out, delimiter, cfg.kcore, cfg.arch.max_len)
}

fn check_data_fits(cfg: &RunConfig, data: &LoadedData) -> Result<()> {
    if data.dataset.max_len > cfg.arch.max_len {
        return Err(Error::Config(format!(
            "dataset keeps {} items per sequence but arch.max_len is {}",
            data.dataset.max_len, cfg.arch.max_len
        )));
    }
    Ok(())
}

fn write_metrics(out: &Path, report: &MetricsReport) -> Result<()> {
    write_atomic(out.join(METRICS_FILE), report.to_json().as_bytes())
}

fn hooks<'a>(progress: Progress<'a>) -> TrainHooks<'a> {
    TrainHooks { validator: None, on_epoch: progress }
}

/// Pre-trains from scratch and writes checkpoint, curves, metrics and plots.
pub fn run_train_spt(cfg: &RunConfig, data: &LoadedData, out: &Path, progress: Progress<'_>) -> Result<SptOutcome> {
    cfg.validate()?;
    check_data_fits(cfg, data)?;
    write_atomic(out.join(CONFIG_FILE), cfg.to_text().as_bytes())?;
    let s = &data.splits;
    let outcome = train_spt(&s.train, &s.valid, data.dataset.num_items, &cfg.arch, &cfg.spt_config(), hooks(progress))?;
    let ckpt = out.join(CHECKPOINT_FILE);
    save_checkpoint(&ckpt, &outcome.best, Stage::Spt, &cfg.hash(), outcome.best_epoch, outcome.best_valid.metrics.clone(), None)?;
    write_atomic(out.join("curves.csv"), curves_csv(&outcome.curves).as_bytes())?;
    let mut report = outcome.best_valid.clone();
    report.checkpoint = Some(ckpt.display().to_string());
    write_metrics(out, &report)?;
    emit_report(out)?;
    Ok(outcome)
}

/// Post-trains from an SPT checkpoint, which becomes the frozen reference.
pub fn run_train_rpt(
    cfg: &RunConfig,
    data: &LoadedData,
    spt_checkpoint: &Path,
    out: &Path,
    progress: Progress<'_>,
) -> Result<RptOutcome> {
    cfg.validate()?;
    check_data_fits(cfg, data)?;
    let spt = load_checkpoint(spt_checkpoint, Some((&cfg.arch, data.dataset.num_items)))?;
    let lineage = lineage_of(spt_checkpoint)?;
    write_atomic(out.join(CONFIG_FILE), cfg.to_text().as_bytes())?;
    let s = &data.splits;
    let outcome = train_rpt(&spt, &s.train, &s.valid, &cfg.rpt_config(), hooks(progress))?;
    let ckpt = out.join(CHECKPOINT_FILE);
    save_checkpoint(
        &ckpt,
        &outcome.best,
        Stage::Rpt,
        &cfg.hash(),
        outcome.best_epoch,
        outcome.best_valid.metrics.clone(),
        Some(lineage),
    )?;
    write_atomic(out.join("curves.csv"), curves_csv(&outcome.curves).as_bytes())?;
    write_atomic(out.join(RL_FILE), curves_csv(&outcome.iterations).replacen("epoch", "iteration", 1).as_bytes())?;
    let mut report = outcome.best_valid.clone();
    report.checkpoint = Some(ckpt.display().to_string());
    write_metrics(out, &report)?;
    emit_report(out)?;
    Ok(outcome)
}

/// Loads a checkpoint whose catalog must match the dataset.
pub fn load_for(checkpoint: &Path, data: &LoadedData) -> Result<ModelParameters> {
    let params = load_checkpoint(checkpoint, None)?;
    if params.num_items != data.dataset.num_items {
        return Err(Error::ShapeMismatch {
            expected: format!("num_items={} (dataset)", data.dataset.num_items),
            found: format!("num_items={} ({})", params.num_items, checkpoint.display()),
        });
    }
    Ok(params)
}

/// Full-ranking evaluation of a checkpoint; `depth` defaults to the
/// checkpoint's inference depth.
pub fn run_evaluate(checkpoint: &Path, data: &LoadedData, split: Split, depth: Option<usize>) -> Result<MetricsReport> {
    let params = load_for(checkpoint, data)?;
    let depth = depth.unwrap_or_else(|| params.config.inference_depth());
    let mut report = evaluate(&params, data.split(split), &DEFAULT_KS, depth)?;
    report.checkpoint = Some(checkpoint.display().to_string());
    Ok(report)
}

/// Writes `depth.csv` for a checkpoint evaluated at each depth.
pub fn run_depth_table(checkpoint: &Path, data: &LoadedData, split: Split, depths: &[usize], out: &Path) -> Result<()> {
    let params = load_for(checkpoint, data)?;
    let table = depth_table(&params, data.split(split), depths, &DEFAULT_KS)?;
    write_atomic(out.join(DEPTH_FILE), table.to_csv().as_bytes())
}

/// Forward latency per depth on a checkpoint, or a fresh model when none
/// is given; writes `latency.csv`.
pub fn run_bench(
    cfg: &RunConfig,
    data: &LoadedData,
    checkpoint: Option<&Path>,
    depths: &[usize],
    batch: usize,
    repeats: usize,
    out: &Path,
) -> Result<Vec<LatencyRow>> {
    let params = match checkpoint {
        Some(p) => load_for(p, data)?,
        None => ModelParameters::init(&cfg.arch, data.dataset.num_items, cfg.seed)?,
    };
    let source = if data.splits.test.is_empty() { &data.splits.train } else { &data.splits.test };
    let rows = measure_latency(&params, &bench_inputs(source, batch), depths, repeats)?;
    write_atomic(out.join(LATENCY_FILE), latency_table(&rows).to_csv().as_bytes())?;
    Ok(rows)
}

/// Top-`n` item ids for a user's full history, scored at inference depth.
pub fn run_infer(checkpoint: &Path, data: &LoadedData, user_key: &str, n: usize) -> Result<Vec<(String, f64)>> {
    let params = load_for(checkpoint, data)?;
    let ds = &data.dataset;
    let user = ds
        .user_ids
        .iter()
        .position(|u| u == user_key)
        .ok_or_else(|| Error::Config(format!("unknown user `{user_key}`")))?;
    let seq = &ds.sequences[user];
    let input: Vec<usize> = seq[seq.len().saturating_sub(params.config.max_len)..].to_vec();
    if input.is_empty() {
        return Err(Error::contract(format!("user `{user_key}` has no history")));
    }
    let seed = derive_seed(EVAL_SEED, &[user as u64]);
    let logits = batch_logits(&params, &[input], params.config.inference_depth(), &[seed])?;
    let row = logits.row(0);
    let mut order: Vec<usize> = (0..row.len()).collect();
    order.sort_by_key(|&i| rank_of(row, i));
    Ok(order.into_iter().take(n).map(|i| (ds.item_ids[i].clone(), row[i])).collect())
}

/// One pre-training run per grid cell under `out/<cell>/`, then a summary
/// table `out/sweep.csv`.
pub fn run_sweep(
    base: &RunConfig,
    grid: &SweepGrid,
    data: &LoadedData,
    spt_checkpoint: Option<&Path>,
    out: &Path,
) -> Result<Vec<(String, f64)>> {
    let cells = grid.configs(base)?;
    if cells.is_empty() {
        return Err(Error::Config("empty sweep grid".into()));
    }
    let mut summary = String::from("cell,best_epoch,valid_NDCG@10,valid_Recall@10\n");
    let mut results = Vec::with_capacity(cells.len());
    for (name, cfg) in cells {
        let dir = out.join(&name);
        let (best_epoch, report) = match spt_checkpoint {
            None => {
                let o = run_train_spt(&cfg, data, &dir, None)?;
                (o.best_epoch, o.best_valid)
            }
            Some(ckpt) => {
                let o = run_train_rpt(&cfg, data, ckpt, &dir, None)?;
                (o.best_epoch, o.best_valid)
            }
        };
        let r10 = report.get(crate::evalrank::MetricName::Recall(10)).unwrap_or(f64::NAN);
        summary.push_str(&format!("{name},{best_epoch},{},{r10}\n", report.ndcg10()));
        results.push((name, report.ndcg10()));
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_atomic(out.join(SWEEP_FILE), summary.as_bytes())?;
    Ok(results)
}
