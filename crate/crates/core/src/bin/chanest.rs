use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use chanest::config::ExperimentConfig;
use chanest::generator::{read_checkpoint, train, write_loss_curve, FlowEstimator, TrainHooks};
use chanest::harness::{report, sweep, write_records, EvalConfig, EvalSet};
use chanest::simulator::{read_dataset, write_dataset, Dataset};

#[global_allocator]
static ALLOC: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[derive(Parser)]
#[command(name = "chanest", about = "Multimodal flow-matching channel estimation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a dataset split and write it as an MCFD file.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        /// train, test or ood
        #[arg(long, default_value = "train")]
        split: String,
        /// Override the number of scenes (each yields ten frames).
        #[arg(long)]
        frames: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write its checkpoint.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Pre-generated training set; simulated from the config otherwise.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Loss curve CSV (defaults to `<out>.loss.csv`).
        #[arg(long)]
        loss_csv: Option<PathBuf>,
    },
    /// Evaluate one grid cell of the flow estimator.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, allow_hyphen_values = true)]
        snr: f64,
        #[arg(long)]
        spacing: usize,
        #[arg(long)]
        w: f64,
        #[arg(long, default_value_t = 1)]
        steps: usize,
        /// Dropped modalities, e.g. `camera,lidar`.
        #[arg(long, default_value = "none")]
        mask: String,
        /// Also evaluate LS and LMMSE on the same observations.
        #[arg(long)]
        baselines: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate the configured grid and write `sweep.csv`.
    Sweep {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pivot result CSVs in a directory into per-figure tables.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value_t = 8)]
        spacing: usize,
    },
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    Ok(match path {
        Some(p) => ExperimentConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => ExperimentConfig::from_toml("")?,
    })
}

fn split_of(scenario: &str) -> Result<&'static str> {
    Ok(match scenario {
        "urban" => "test",
        "ood-rural" => "ood",
        other => bail!("unknown scenario '{other}'"),
    })
}

fn dataset(cfg: &ExperimentConfig, data: Option<&Path>, split: &str) -> Result<Dataset> {
    match data {
        Some(p) => Ok(read_dataset(p).with_context(|| format!("reading {}", p.display()))?),
        None => {
            let t = Instant::now();
            let ds = cfg.data.generate(split)?;
            eprintln!("simulated {split} split: {} samples in {:.1}s", ds.len(), t.elapsed().as_secs_f64());
            Ok(ds)
        }
    }
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::GenData { config, split, frames, out } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(n) = frames {
                match split.as_str() {
                    "train" => cfg.data.train_scenes = n,
                    "test" => cfg.data.test_scenes = n,
                    _ => cfg.data.ood_scenes = n,
                }
            }
            let ds = dataset(&cfg, None, &split)?;
            write_dataset(&out, &ds)?;
            eprintln!("wrote {} samples to {}", ds.len(), out.display());
        }
        Command::Train { config, out, data, loss_csv } => {
            let cfg = load_config(config.as_deref())?;
            let ds = dataset(&cfg, data.as_deref(), "train")?;
            let start = Instant::now();
            let total = cfg.train.steps;
            let mut progress = |l: &chanest::generator::StepLog| {
                eprintln!("step {:>6}/{total} loss {:.5} lr {:.2e} |g| {:.3} ({:.0}s)", l.step, l.loss, l.lr, l.grad_norm, start.elapsed().as_secs_f64());
            };
            let hooks = TrainHooks { out: Some(out.clone()), progress: Some(&mut progress) };
            let outcome = train(&cfg.model, &cfg.train, &ds, hooks)?;
            let curve = loss_csv.unwrap_or_else(|| out.with_extension("loss.csv"));
            write_loss_curve(&curve, &outcome.losses)?;
            eprintln!("wrote {} and {}", out.display(), curve.display());
        }
        Command::Eval { ckpt, config, data, snr, spacing, w, steps, mask, baselines, out } => {
            let cfg = load_config(config.as_deref())?;
            let ds = dataset(&cfg, data.as_deref(), "test")?;
            let flow = FlowEstimator::new(read_checkpoint(&ckpt)?, ds.delta_f)?;
            let mut methods = vec![format!("flow:{w}")];
            if baselines {
                methods.splice(0..0, ["ls".to_string(), "lmmse".to_string()]);
            }
            let eval = EvalConfig { snrs: vec![snr], spacings: vec![spacing], methods, steps: vec![steps], masks: vec![mask], ..cfg.eval.clone() };
            let set = EvalSet { scenario: ds.tag.as_str().to_string(), data: &ds };
            let records = sweep(&eval, std::slice::from_ref(&set), Some(&flow))?;
            for r in &records {
                println!("{r}");
            }
            write_records(&out, &records)?;
        }
        Command::Sweep { config, ckpt, out } => {
            let cfg = load_config(config.as_deref())?;
            std::fs::create_dir_all(&out)?;
            let sets_data = cfg.eval.scenarios.iter().map(|s| Ok((s.clone(), dataset(&cfg, None, split_of(s)?)?))).collect::<Result<Vec<_>>>()?;
            let sets: Vec<EvalSet<'_>> = sets_data.iter().map(|(s, d)| EvalSet { scenario: s.clone(), data: d }).collect();
            let flow = match &ckpt {
                Some(p) => Some(FlowEstimator::new(read_checkpoint(p)?, cfg.data.rf.delta_f)?),
                None => None,
            };
            let records = sweep(&cfg.eval, &sets, flow.as_ref())?;
            let path = out.join("sweep.csv");
            write_records(&path, &records)?;
            eprintln!("wrote {} records to {}", records.len(), path.display());
        }
        Command::Report { input, spacing } => {
            for p in report(&input, spacing)? {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}
