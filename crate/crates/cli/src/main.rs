use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sata_core::experiment::{
    evaluate, export_attention_report, grid_search, load_data, train, RunConfig, CHECKPOINT_FILE,
    GRID_FILE,
};
use sata_core::{Error, Result};

#[derive(Debug, Parser)]
#[command(
    name = "sata",
    version,
    about = "Train and inspect small ViTs with trivial-attention suppression"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train one model; writes report.csv, s_trajectory.csv, checkpoint.json, run_config.txt.
    Train(Common),
    /// Train one model per (t, s) cell plus a suppression-off baseline; writes grid.csv.
    Grid(Common),
    /// Top-1 accuracy of a checkpoint on the validation split.
    Eval(Common),
    /// Per-layer, per-head attention statistics of a checkpoint.
    AttnReport(Common),
}

#[derive(Debug, Args)]
struct Common {
    /// Run configuration (`key = value` per line, `#` comments).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    t: Option<f64>,
    #[arg(long)]
    s: Option<f64>,
    #[arg(long)]
    lr1: Option<f64>,
    #[arg(long)]
    lr2: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Dataset directory; falls back to $SATA_DATA_DIR.
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Checkpoint for `eval` and `attn-report` (default: <out>/checkpoint.json).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Any other configuration key, as KEY=VALUE. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got `{kv}`")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        let num = |v: Option<f64>| v.map(|x| x.to_string());
        let overrides = [
            ("t", num(self.t)),
            ("s", num(self.s)),
            ("lr1", num(self.lr1)),
            ("lr2", num(self.lr2)),
            ("seed", self.seed.map(|x| x.to_string())),
            ("epochs", self.epochs.map(|x| x.to_string())),
            (
                "data_dir",
                self.data_dir.as_ref().map(|p| p.display().to_string()),
            ),
            ("out", self.out.as_ref().map(|p| p.display().to_string())),
            (
                "checkpoint",
                self.checkpoint.as_ref().map(|p| p.display().to_string()),
            ),
        ];
        for (key, value) in overrides {
            if let Some(value) = value {
                cfg.set(key, &value)?;
            }
        }
        Ok(cfg)
    }
}

fn checkpoint_path(cfg: &RunConfig) -> Result<PathBuf> {
    cfg.checkpoint
        .clone()
        .or_else(|| cfg.out_dir.as_ref().map(|d| d.join(CHECKPOINT_FILE)))
        .ok_or_else(|| Error::Config("no checkpoint given (use --checkpoint or --out)".into()))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(common) => {
            let cfg = common.resolve()?;
            let report = train(&cfg)?;
            let acc = |v: Option<f64>| v.map_or("n/a".to_string(), |a| format!("{a:.4}"));
            println!(
                "epochs={} train_acc={} val_acc={} wall_time_secs={:.2}",
                report.epochs.len(),
                acc(report.final_train_acc()),
                acc(report.final_val_acc()),
                report.wall_time_secs
            );
            if let Some(s) = report.s_trajectory.last() {
                println!("s={s:?}");
            }
            if let Some(path) = &report.checkpoint {
                println!("checkpoint={}", path.display());
            }
        }
        Command::Grid(common) => {
            let cfg = common.resolve()?;
            let result = grid_search(&cfg, &cfg.grid_s, &cfg.grid_t)?;
            print!("{}", result.to_csv()?);
            if let Some(dir) = &cfg.out_dir {
                println!("grid={}", dir.join(GRID_FILE).display());
            }
        }
        Command::Eval(common) => {
            let cfg = common.resolve()?;
            let checkpoint = checkpoint_path(&cfg)?;
            let (_, val) = load_data(&cfg)?;
            let acc = evaluate(&checkpoint, &val)?;
            println!("top1={acc:.6} examples={}", val.len());
        }
        Command::AttnReport(common) => {
            let cfg = common.resolve()?;
            let checkpoint = checkpoint_path(&cfg)?;
            let out = cfg
                .out_dir
                .clone()
                .ok_or_else(|| Error::Config("attn-report needs --out".into()))?;
            let (_, val) = load_data(&cfg)?;
            let n = cfg.attn_images.clamp(1, val.len());
            let (images, _) = val.batch(&(0..n).collect::<Vec<_>>())?;
            let report = export_attention_report(
                &checkpoint,
                &images,
                cfg.attn_threshold,
                cfg.attn_bin_width,
                Some(&out),
            )?;
            println!(
                "tables={} rows_per_table={} within_bound={} out={}",
                report.tables.len(),
                report.tables.first().map_or(0, |t| t.rows.len()),
                report.all_rows_within_bound(),
                out.display()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error[{}]: {msg}", e.category());
            ExitCode::FAILURE
        }
    }
}
