use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use lares_core::corpus::Split;
use lares_core::harness::config::parse_override;
use lares_core::harness::run::{
    preprocess, resolve_out, run_bench, run_depth_table, run_evaluate, run_infer, run_sweep, run_train_rpt,
    run_train_spt, LoadedData, Progress,
};
use lares_core::harness::{emit_report, linear_fit, RunConfig, SweepGrid};
use lares_core::pretrain::CurveRow;

#[derive(Parser)]
#[command(name = "lares", version, about = "Latent-reasoning sequential recommender")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Ingest a raw interaction log, k-core filter it and write sequences.txt + meta.json.
    Preprocess {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Field separator of the raw log.
        #[arg(long, default_value = "\t")]
        delimiter: char,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Pre-train a model from scratch.
    TrainSpt {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Post-train from a pre-trained checkpoint.
    TrainRpt {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Full-ranking evaluation of a checkpoint.
    Evaluate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Reasoning depth; defaults to the checkpoint's inference depth.
        #[arg(long)]
        depth: Option<usize>,
        /// Evaluate at each depth and write depth.csv into --out.
        #[arg(long, value_delimiter = ',')]
        depths: Option<Vec<usize>>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Top-N recommendations for one user.
    Infer {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        user: String,
        #[arg(long, default_value_t = 10)]
        top: usize,
    },
    /// Forward latency across reasoning depths.
    Bench {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3,4")]
        depths: Vec<usize>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 1024)]
        batch: usize,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train one run per grid cell.
    Sweep {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Grid axis `key=v1,v2,...`; repeatable. Defaults to the stage's standard grid.
        #[arg(long = "grid")]
        grid: Vec<String>,
        /// Post-train from this checkpoint in every cell instead of pre-training.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Regenerate report.json and plots for a run directory.
    Report {
        #[arg(long)]
        run: PathBuf,
    },
}

/// Config file plus per-key overrides; later sources win.
#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Any config key, as `key=value`; repeatable.
    #[arg(long = "set")]
    set: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    k_bar: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    epsilon: Option<f64>,
    /// Reward metric, e.g. Recall@10.
    #[arg(long)]
    reward: Option<String>,
    #[arg(long)]
    group_size: Option<usize>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        let mut overrides = Vec::new();
        for s in &self.set {
            overrides.push(parse_override(s)?);
        }
        let named: [(&str, Option<String>); 8] = [
            ("seed", self.seed.map(|v| v.to_string())),
            ("arch.k_bar", self.k_bar.map(|v| v.to_string())),
            ("spt.alpha", self.alpha.map(|v| v.to_string())),
            ("spt.gamma", self.gamma.map(|v| v.to_string())),
            ("rpt.beta", self.beta.map(|v| v.to_string())),
            ("rpt.epsilon", self.epsilon.map(|v| v.to_string())),
            ("rpt.reward_metric", self.reward.clone()),
            ("rpt.group_size", self.group_size.map(|v| v.to_string())),
        ];
        overrides.extend(named.into_iter().filter_map(|(k, v)| v.map(|v| (k.to_string(), v))));
        cfg.apply(&overrides)?;
        Ok(cfg)
    }
}

fn data_dir(flag: Option<PathBuf>, cfg: &RunConfig) -> Result<PathBuf> {
    match flag.or_else(|| cfg.data.clone()) {
        Some(p) => Ok(p),
        None => bail!("no dataset: pass --data or set `data`"),
    }
}

fn load(dir: &Path) -> Result<LoadedData> {
    LoadedData::load(dir).with_context(|| format!("loading dataset from {}", dir.display()))
}

fn parse_split(s: &str) -> Result<Split> {
    match s {
        "train" => Ok(Split::Train),
        "valid" => Ok(Split::Valid),
        "test" => Ok(Split::Test),
        _ => bail!("unknown split `{s}` (expected train, valid or test)"),
    }
}

fn progress<'a>(stage: &'a str) -> Progress<'a> {
    Some(Box::new(move |row: &CurveRow| {
        let ndcg = row.get("valid_NDCG@10").unwrap_or(f64::NAN);
        eprintln!("[{stage}] epoch {:>3}  valid NDCG@10 {ndcg:.4}", row.epoch);
    }))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Preprocess { input, out, delimiter, cfg } => {
            let cfg = cfg.resolve()?;
            let ds = preprocess(&input, &out, &cfg, delimiter)?;
            println!(
                "users {}  items {}  interactions {}  avg length {:.2}",
                ds.num_users,
                ds.num_items,
                ds.num_interactions(),
                ds.average_length()
            );
        }
        Command::TrainSpt { data, out, cfg } => {
            let cfg = cfg.resolve()?;
            let data = load(&data_dir(data, &cfg)?)?;
            let out = resolve_out(out.as_deref(), &cfg, "spt")?;
            let o = run_train_spt(&cfg, &data, &out, progress("spt"))?;
            println!("best epoch {}  valid NDCG@10 {:.4}  -> {}", o.best_epoch, o.best_valid.ndcg10(), out.display());
        }
        Command::TrainRpt { data, checkpoint, out, cfg } => {
            let cfg = cfg.resolve()?;
            let data = load(&data_dir(data, &cfg)?)?;
            let out = resolve_out(out.as_deref(), &cfg, "rpt")?;
            let o = run_train_rpt(&cfg, &data, &checkpoint, &out, progress("rpt"))?;
            println!(
                "kept {}/{} instances  start NDCG@10 {:.4}  best epoch {}  valid NDCG@10 {:.4}  -> {}",
                o.trainable,
                o.pool,
                o.initial_valid.ndcg10(),
                o.best_epoch,
                o.best_valid.ndcg10(),
                out.display()
            );
        }
        Command::Evaluate { data, checkpoint, split, depth, depths, out } => {
            let data = load(&data)?;
            let split = parse_split(&split)?;
            if let Some(depths) = depths {
                let Some(out) = out else { bail!("--depths needs --out") };
                run_depth_table(&checkpoint, &data, split, &depths, &out)?;
                println!("{}", std::fs::read_to_string(out.join("depth.csv"))?.trim_end());
                if out.join("curves.csv").is_file() {
                    emit_report(&out)?;
                }
            } else {
                let report = run_evaluate(&checkpoint, &data, split, depth)?;
                let json = report.to_json();
                if let Some(out) = out {
                    let name = format!("metrics_{}.json", split_name(split));
                    lares_core::harness::io::write_atomic(out.join(name), json.as_bytes())?;
                }
                println!("{json}");
            }
        }
        Command::Infer { data, checkpoint, user, top } => {
            let data = load(&data)?;
            for (rank, (item, score)) in run_infer(&checkpoint, &data, &user, top)?.into_iter().enumerate() {
                println!("{}\t{item}\t{score:.6}", rank + 1);
            }
        }
        Command::Bench { data, depths, checkpoint, batch, repeats, out, cfg } => {
            let cfg = cfg.resolve()?;
            let data = load(&data_dir(data, &cfg)?)?;
            let out = resolve_out(out.as_deref(), &cfg, "bench")?;
            let rows = run_bench(&cfg, &data, checkpoint.as_deref(), &depths, batch, repeats, &out)?;
            println!("depth\tsecs\tratio");
            for r in &rows {
                println!("{}\t{:.4}\t{:.2}", r.depth, r.secs, r.ratio);
            }
            if rows.len() >= 2 {
                let xs: Vec<f64> = rows.iter().map(|r| r.depth as f64).collect();
                let ys: Vec<f64> = rows.iter().map(|r| r.secs).collect();
                let (a, b, r2) = linear_fit(&xs, &ys)?;
                println!("fit: secs = {a:.4} + {b:.4} * depth  (r^2 = {r2:.4})");
            }
        }
        Command::Sweep { data, out, grid, checkpoint, cfg } => {
            let cfg = cfg.resolve()?;
            let data = load(&data_dir(data, &cfg)?)?;
            let out = resolve_out(out.as_deref(), &cfg, "sweep")?;
            let grid = if grid.is_empty() {
                if checkpoint.is_some() {
                    SweepGrid::rpt_default()
                } else {
                    SweepGrid::spt_default()
                }
            } else {
                SweepGrid { axes: grid.iter().map(|s| SweepGrid::parse_axis(s)).collect::<Result<_, _>>()? }
            };
            for (name, ndcg) in run_sweep(&cfg, &grid, &data, checkpoint.as_deref(), &out)? {
                println!("{name}\t{ndcg:.4}");
            }
        }
        Command::Report { run } => {
            for p in emit_report(&run)? {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}

fn split_name(s: Split) -> &'static str {
    match s {
        Split::Train => "train",
        Split::Valid => "valid",
        Split::Test => "test",
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", format!("{e:#}").replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
