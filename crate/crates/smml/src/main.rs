use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use smml::config::RunConfig;
use smml::dataset::{generate_dataset, read_manifest};
use smml::driver::{ablate, evaluate_checkpoint, prepare, train, TrainOptions};
use smml::error::Result;
use smml::priors::{build_priors, default_prior_seed};
use smml::report::{ablation_csv, ablation_markdown, emit_report, report_markdown, ReportFormat};

#[derive(Parser)]
#[command(name = "smml", version, about = "Dual-branch mutual learning for segmentation with missing modalities")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a phantom dataset.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Cache synthetic per-modality priors next to a dataset.
    BuildPriors {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0.3)]
        noise: f64,
        /// Defaults to the dataset's generator seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a model; resumes from `<out>/checkpoint` when present.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        lr0: Option<f64>,
        /// One of baseline, dual_branch, dual_pbc, dual_frc, dual_srn, full.
        #[arg(long)]
        variant: Option<String>,
        /// Start over even if a checkpoint exists.
        #[arg(long)]
        fresh: bool,
    },
    /// Evaluate a checkpoint on every modality subset of the test split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
        #[arg(long, value_enum, default_value_t = ReportFormat::Markdown)]
        format: ReportFormat,
    },
    /// Train and compare the configured variants.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => {
            let mut cfg = RunConfig::default();
            cfg.apply_env()?;
            Ok(cfg)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { config, out } => {
            let cfg = load_config(config.as_deref())?;
            let m = generate_dataset(&out, &cfg.data.phantom, &cfg.data.fractions, cfg.data.split_seed)?;
            println!("wrote {} subjects to {}", m.subjects.len(), out.display());
        }
        Command::BuildPriors { data, noise, seed } => {
            let manifest = read_manifest(&data)?;
            let seed = seed.unwrap_or_else(|| default_prior_seed(&manifest));
            let n = build_priors(&data, &manifest, noise, seed)?;
            println!("wrote priors for {n} subjects");
        }
        Command::Train { config, data, out, epochs, seed, lr0, variant, fresh } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            if let Some(lr) = lr0 {
                cfg.train.lr0 = lr;
            }
            if let Some(v) = variant {
                let v = smml_core::objective::Variant::parse(&v)
                    .ok_or_else(|| smml::Error::config("variant", format!("unknown variant {v:?}")))?;
                cfg.train = v.configure(&cfg.train);
            }
            cfg.validate()?;
            let prepared = prepare(&data, &cfg.train)?;
            let opts = TrainOptions { out: out.clone(), checkpoint_every: cfg.run.checkpoint_every, resume: !fresh, stop_after: None };
            let outcome = train(&cfg.train, &prepared.train, &opts)?;
            println!("checkpoint {}\nloss log {}", outcome.checkpoint.display(), outcome.loss_log.display());
        }
        Command::Eval { checkpoint, data, report, format } => {
            let r = evaluate_checkpoint(&checkpoint, &data)?;
            emit_report(&r, format, &report)?;
            print!("{}", report_markdown(&r));
        }
        Command::Ablate { config, data, out } => {
            let cfg = load_config(config.as_deref())?;
            let prepared = prepare(&data, &cfg.train)?;
            let rows = ablate(&cfg.train, &prepared, &cfg.run.variants, &out, cfg.run.checkpoint_every)?;
            let md = ablation_markdown(&rows);
            smml::error::write_file(&out.join("ablation.md"), &md)?;
            smml::error::write_file(&out.join("ablation.csv"), ablation_csv(&rows))?;
            print!("{md}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error: category={} message={msg}", e.category());
            ExitCode::FAILURE
        }
    }
}
