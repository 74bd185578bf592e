use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use particul::config::RunConfig;
use particul::pipeline::{self, Rebuild};
use particul::{Error, Result};

#[derive(Parser)]
#[command(
    name = "particul",
    version,
    about = "Pattern-detector OoD confidence benchmarks"
)]
struct Cli {
    /// JSON run configuration; missing fields take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Base seed, overriding the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory, overriding the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic train, test and OoD sets as PPM files with manifests.
    GenData,
    /// Train one classifier per seed.
    TrainClassifier,
    /// Train the detector banks, reusing matching classifiers.
    TrainDetectors,
    /// Fit the logistic calibration of every bank.
    Calibrate,
    /// Cross-dataset benchmark (images or feature archives).
    EvalCross,
    /// Perturbation benchmark with SVG plots.
    EvalPerturb,
    /// Render pattern references with saliency overlays.
    Explain,
    /// Every stage from scratch.
    All,
    /// Print the effective configuration.
    PrintConfig,
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.base_seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn needs_images(cfg: &RunConfig, what: &str) -> Result<()> {
    if cfg.archives.is_some() {
        return Err(Error::Config(format!(
            "{what} needs images, not feature archives"
        )));
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    match cli.command {
        Command::PrintConfig => println!("{}", cfg.to_json()),
        Command::GenData => {
            let data = pipeline::generate_data(&cfg.data)?;
            pipeline::write_datasets(&cfg.out.join("data"), &data)?;
            println!("wrote {}", cfg.out.join("data").display());
        }
        Command::TrainClassifier | Command::TrainDetectors | Command::Calibrate => {
            needs_images(&cfg, "training")?;
            let rebuild = match cli.command {
                Command::TrainClassifier => Rebuild::Classifier,
                Command::TrainDetectors => Rebuild::Detectors,
                _ => Rebuild::Calibration,
            };
            let data = pipeline::load_data(&cfg)?;
            for sm in pipeline::prepare_all(&cfg, &data, rebuild)? {
                println!(
                    "seed {}: {}",
                    sm.seed,
                    pipeline::seed_dir(&cfg, sm.seed).display()
                );
            }
        }
        Command::EvalCross => {
            let rows = if cfg.archives.is_some() {
                pipeline::run_cross_archives(&cfg)?
            } else {
                let data = pipeline::load_data(&cfg)?;
                let models = pipeline::prepare_all(&cfg, &data, Rebuild::Nothing)?;
                pipeline::run_cross(&cfg, &data, &models)?
            };
            for r in rows.iter().filter(|r| r.metric == "auroc") {
                println!("{:<6} auroc {:.4} ± {}", r.measure, r.mean, fmt_std(r.std));
            }
        }
        Command::EvalPerturb => {
            needs_images(&cfg, "eval-perturb")?;
            let data = pipeline::load_data(&cfg)?;
            let models = pipeline::prepare_all(&cfg, &data, Rebuild::Nothing)?;
            let rep = pipeline::run_perturb(&cfg, &data, &models)?;
            for r in &rep.ranks {
                let rs = r
                    .r_s
                    .map_or_else(|| "undefined".into(), |v| format!("{v:+.3}"));
                println!(
                    "{:<6} {:<15} seed {} r_s {rs}",
                    r.measure, r.perturbation, r.seed
                );
            }
        }
        Command::Explain => {
            needs_images(&cfg, "explain")?;
            let data = pipeline::load_data(&cfg)?;
            let models = pipeline::prepare_all(&cfg, &data, Rebuild::Nothing)?;
            let refs = pipeline::run_explain(&cfg, &data, &models)?;
            println!(
                "{} detectors rendered to {}",
                refs.len(),
                cfg.out.join("explain").display()
            );
        }
        Command::All => {
            let outcome = pipeline::run_all(&cfg)?;
            for r in outcome.cross.iter().filter(|r| r.metric == "auroc") {
                println!("{:<6} auroc {:.4} ± {}", r.measure, r.mean, fmt_std(r.std));
            }
        }
    }
    Ok(())
}

fn fmt_std(std: Option<f64>) -> String {
    std.map_or_else(|| "-".into(), |s| format!("{s:.4}"))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Config(_) => 2,
                Error::Artifact(_) | Error::Format { .. } | Error::Io(_) => 3,
                _ => 1,
            })
        }
    }
}
