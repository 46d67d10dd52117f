use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use xmamba_core::bench::{scan_bench, timings_csv};
use xmamba_core::checkpoint::Checkpoint;
use xmamba_core::config::ExperimentConfig;
use xmamba_core::data::{generate_synthetic, split_indices, Dataset};
use xmamba_core::gradcheck::run_suites;
use xmamba_core::model::Classifier;
use xmamba_core::report::{build_comparison_table, format_table_tsv, parse_results_csv};
use xmamba_core::train::{evaluate, train};

const GRAD_TOLERANCE: f64 = 1e-5;
const MODEL_STEM: &str = "model";
const DATA_STEM: &str = "data";

#[derive(Parser)]
#[command(
    name = "xmamba",
    version,
    about = "Cross-modal selective state-space classifier"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every finite-difference suite; exit 1 if any exceeds 1e-5.
    Gradcheck {
        #[arg(long, default_value_t = 10)]
        seeds: u64,
    },
    /// Time the selective scan across sequence lengths; prints CSV.
    ScanBench {
        #[arg(long, value_delimiter = ',', default_values_t = [512usize, 1024, 2048, 4096])]
        lengths: Vec<usize>,
        #[arg(long, default_value_t = 64)]
        d_model: usize,
        #[arg(long, default_value_t = 16)]
        d_state: usize,
        #[arg(long, default_value_t = 5)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write the CSV here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate the synthetic dataset described by a config's `data` section.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; writes the best checkpoint, history.csv and config.json.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Directory written by `gen-data`; generated from the config if absent.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Top-1 of a trained checkpoint on one split.
    Eval {
        /// Directory written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value_t = Split::Val)]
        split: Split,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Baseline comparison table from a `method,top1` CSV; prints TSV.
    Table {
        #[arg(long)]
        results: PathBuf,
        #[arg(long, default_value = "VideoMamba")]
        video: String,
        #[arg(long, default_value = "Skeleton Mamba")]
        skeleton: String,
        /// Snap Top-1 values to multiples of 1/N before differencing.
        #[arg(long)]
        eval_size: Option<usize>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Val,
    All,
}

/// A check ran to completion and found a failure (exit 1); errors are bad input (exit 2).
struct ValidationFailed;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(ValidationFailed)) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            let validation = matches!(
                e.downcast_ref::<xmamba_core::Error>(),
                Some(xmamba_core::Error::NonFiniteLoss { .. })
            );
            ExitCode::from(if validation { 1 } else { 2 })
        }
    }
}

fn load_config(path: &Path) -> anyhow::Result<ExperimentConfig> {
    ExperimentConfig::load(path).with_context(|| format!("reading config {}", path.display()))
}

fn dataset(cfg: &ExperimentConfig, dir: Option<&Path>) -> anyhow::Result<Dataset> {
    let data = match dir {
        Some(d) => Dataset::load(d, DATA_STEM)
            .with_context(|| format!("loading dataset from {}", d.display()))?,
        None => generate_synthetic(&cfg.data)?,
    };
    if data.num_classes != cfg.model.num_classes {
        bail!(
            "dataset has {} classes, model expects {}",
            data.num_classes,
            cfg.model.num_classes
        );
    }
    Ok(data)
}

fn run(command: Command) -> anyhow::Result<Result<(), ValidationFailed>> {
    match command {
        Command::Gradcheck { seeds } => {
            if seeds == 0 {
                bail!("--seeds must be >= 1");
            }
            let seeds: Vec<u64> = (0..seeds).collect();
            let mut failed = false;
            println!("suite\tmax_rel_err\tprobes\tstatus");
            for s in run_suites(&seeds)? {
                let ok = s.max_rel_err <= GRAD_TOLERANCE;
                failed |= !ok;
                println!(
                    "{}\t{:.3e}\t{}\t{}",
                    s.name,
                    s.max_rel_err,
                    s.probes,
                    if ok { "PASS" } else { "FAIL" }
                );
            }
            return Ok(if failed {
                Err(ValidationFailed)
            } else {
                Ok(())
            });
        }
        Command::ScanBench {
            lengths,
            d_model,
            d_state,
            trials,
            seed,
            out,
        } => {
            let csv = timings_csv(&scan_bench(&lengths, d_model, d_state, trials, seed)?);
            print!("{csv}");
            if let Some(path) = out {
                fs::write(&path, csv).with_context(|| format!("writing {}", path.display()))?;
            }
        }
        Command::GenData { config, out } => {
            let cfg = match config {
                Some(p) => load_config(&p)?,
                None => ExperimentConfig::default(),
            };
            let data = generate_synthetic(&cfg.data)?;
            fs::create_dir_all(&out)?;
            data.save(&out, DATA_STEM)?;
            println!(
                "wrote {} samples ({} classes) to {}",
                data.len(),
                data.num_classes,
                out.display()
            );
        }
        Command::Train { config, out, data } => {
            let cfg = load_config(&config)?;
            let data = dataset(&cfg, data.as_deref())?;
            let mut model = Classifier::new(&cfg.model, cfg.arch, cfg.strategy, cfg.init_seed)?;
            let outcome = train(&mut model, &data, &cfg.train)?;
            fs::create_dir_all(&out)?;
            Checkpoint::from_store(&outcome.best).save_dir(&out, MODEL_STEM)?;
            fs::write(out.join("history.csv"), outcome.history.to_csv())?;
            fs::write(out.join("config.json"), cfg.to_json()?)?;
            let best = outcome.history.best();
            println!(
                "{} parameters; {} epochs ({:?}); best epoch {} val top-1 {:.2}",
                model.num_parameters(),
                outcome.history.records.len(),
                outcome.history.stop,
                best.epoch,
                best.val_top1
            );
        }
        Command::Eval {
            checkpoint,
            split,
            data,
        } => {
            let cfg = load_config(&checkpoint.join("config.json"))?;
            let data = dataset(&cfg, data.as_deref())?;
            let mut model = Classifier::new(&cfg.model, cfg.arch, cfg.strategy, cfg.init_seed)?;
            Checkpoint::load_dir(&checkpoint, MODEL_STEM)
                .and_then(|ck| ck.apply_to(&mut model.store))
                .with_context(|| format!("loading checkpoint from {}", checkpoint.display()))?;
            let (train_idx, val_idx) =
                split_indices(data.len(), cfg.train.val_fraction, cfg.train.seed)?;
            let indices = match split {
                Split::Train => train_idx,
                Split::Val => val_idx,
                Split::All => (0..data.len()).collect(),
            };
            if indices.is_empty() {
                bail!("selected split is empty");
            }
            println!("{:.4}", evaluate(&model, &data, &indices)?);
        }
        Command::Table {
            results,
            video,
            skeleton,
            eval_size,
        } => {
            let text = fs::read_to_string(&results)
                .with_context(|| format!("reading {}", results.display()))?;
            let rows =
                build_comparison_table(&parse_results_csv(&text)?, &video, &skeleton, eval_size)?;
            print!("{}", format_table_tsv(&rows));
        }
    }
    Ok(Ok(()))
}
