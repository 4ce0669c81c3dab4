use std::fs::File;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use spoil_core::bmac::{score_batch, AttributeWeights};
use spoil_core::dataset::synth::{generate, SynthConfig};
use spoil_core::dataset::{load_manifest, make_folds, split_manifest, standardise, Target, DEFAULT_INPUT_SIZE};
use spoil_core::eval::{format_mean_std, TTestKind};
use spoil_core::experiment::{self, Baseline, ExperimentConfig, Overrides};
use spoil_core::ErrorKind;

/// Coal spoil image classification experiments.
#[derive(Parser)]
#[command(name = "spoil", version)]
struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate a manifest and print class counts per target.
    Ingest {
        manifest: PathBuf,
        /// Also decode and standardise every image.
        #[arg(long)]
        decode: bool,
    },
    /// Write a stratified train/test split and fold plan.
    Split {
        manifest: PathBuf,
        #[arg(long)]
        target: Target,
        #[arg(long, default_value_t = 0.8)]
        ratio: f64,
        #[arg(long, default_value_t = 5)]
        folds: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Directory receiving split.json and folds.json.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one experiment from a TOML config.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Results root, overriding `output_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Tabulate runs for one target and test every model against the baseline.
    Compare {
        results: PathBuf,
        /// `best` or a model name.
        #[arg(long, default_value = "best")]
        baseline: Baseline,
        /// Pooled-variance t-test instead of Welch.
        #[arg(long)]
        student: bool,
        /// Defaults to `<results>/comparison`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Emit learning-curve, accuracy, precision/recall and MPCA figures with data tables.
    Report {
        results: PathBuf,
        /// Defaults to `<results>/report`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a CSV of attribute categories into BMAC categories.
    BmacScore {
        input: PathBuf,
        /// Output CSV; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Append the shear-strength parameters of the assigned category.
        #[arg(long)]
        strength: bool,
    },
    /// Compose BMAC categories from per-attribute run predictions.
    Compose {
        results: PathBuf,
        /// Model name to use for every target; the most accurate per target otherwise.
        #[arg(long)]
        model: Option<String>,
        /// JSON report path; stdout summary only when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a synthetic long-tailed texture dataset with manifest.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        samples: usize,
        #[arg(long, default_value_t = DEFAULT_INPUT_SIZE)]
        size: u32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Relative frequencies of Cat-1..Cat-4.
        #[arg(long, value_delimiter = ',', default_values_t = [0.4, 0.3, 0.2, 0.1])]
        class_weights: Vec<f64>,
        #[arg(long, default_value_t = 0.15)]
        noise: f64,
        #[arg(long, default_value_t = 0.0)]
        combined_rate: f64,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let kind = err.chain().find_map(|e| e.downcast_ref::<spoil_core::Error>()).map(|e| e.kind());
    match kind {
        Some(ErrorKind::Config) => 2,
        Some(ErrorKind::Data) => 3,
        Some(ErrorKind::Training) => 4,
        Some(ErrorKind::Other) | None => 1,
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Ingest { manifest, decode } => {
            let m = load_manifest(&manifest).with_context(|| format!("loading {}", manifest.display()))?;
            println!("{} records", m.records.len());
            for t in Target::ALL {
                let counts = m.class_counts(t);
                let cells: Vec<String> = counts.iter().map(|(c, n)| format!("{c}: {n}")).collect();
                println!("{t}: {}", cells.join(", "));
            }
            if decode {
                for r in &m.records {
                    standardise(r, DEFAULT_INPUT_SIZE).with_context(|| format!("image `{}`", r.id))?;
                }
                println!("all images decoded");
            }
        }
        Command::Split { manifest, target, ratio, folds, seed, out } => {
            let m = load_manifest(&manifest).with_context(|| format!("loading {}", manifest.display()))?;
            let split = split_manifest(&m, ratio, target, seed)?;
            let plan = make_folds(&split, folds, seed)?;
            std::fs::create_dir_all(&out)?;
            split.save(&out.join("split.json"))?;
            plan.save(&out.join("folds.json"))?;
            println!("train {} / test {}; {} folds written to {}", split.train.len(), split.test.len(), folds, out.display());
        }
        Command::Run { config, seed, out } => {
            let cfg = ExperimentConfig::load(&config)
                .with_context(|| format!("reading config {}", config.display()))?
                .with_overrides(Overrides { seed, output_dir: out });
            let outcome = experiment::run(&cfg).context("experiment failed")?;
            let agg = &outcome.bundle.aggregate;
            println!("{}", outcome.dir.display());
            println!(
                "{} on {}: accuracy {}, MPCA {}",
                outcome.bundle.model_name,
                outcome.bundle.target,
                format_mean_std(&agg.overall_accuracy),
                format_mean_std(&agg.mpca)
            );
        }
        Command::Compare { results, baseline, student, out } => {
            let kind = if student { TTestKind::Student } else { TTestKind::Welch };
            let cmp = experiment::compare(&results, &baseline, kind)?;
            print!("{}", cmp.table());
            let dir = out.unwrap_or_else(|| results.join("comparison"));
            cmp.write(&dir)?;
            println!("best: {}; artifacts in {}", cmp.best, dir.display());
        }
        Command::Report { results, out } => {
            let dir = out.unwrap_or_else(|| results.join("report"));
            let index = experiment::report(&results, &dir)?;
            println!("{} figures for {} target(s) in {}", index.figure_count(), index.targets.len(), dir.display());
        }
        Command::BmacScore { input, out, strength } => {
            let reader = BufReader::new(File::open(&input).with_context(|| format!("opening {}", input.display()))?);
            let weights = AttributeWeights::default();
            let n = match out {
                Some(path) => score_batch(reader, BufWriter::new(File::create(&path)?), &weights, strength)?,
                None => score_batch(reader, io::stdout().lock(), &weights, strength)?,
            };
            eprintln!("scored {n} rows");
        }
        Command::Compose { results, model, out } => {
            let report = experiment::compose_results(&results, model.as_deref(), &AttributeWeights::default())?;
            println!("{}", report.note);
            println!("composed {} samples, excluded {}", report.composed, report.excluded);
            for (label, n) in &report.unmappable_labels {
                println!("  unmappable `{label}`: {n}");
            }
            if let Some(a) = &report.agreement {
                println!("agreement with direct predictions: {}/{} = {:.4}", a.matches, a.compared, a.rate);
            }
            if let Some(path) = out {
                let mut f = BufWriter::new(File::create(&path)?);
                serde_json::to_writer_pretty(&mut f, &report)?;
                f.flush()?;
            }
        }
        Command::Synth { out, samples, size, seed, class_weights, noise, combined_rate } => {
            let class_weights: [f64; 4] = class_weights
                .try_into()
                .map_err(|w: Vec<f64>| anyhow::anyhow!("--class-weights needs 4 values, got {}", w.len()))?;
            let config = SynthConfig {
                samples,
                size,
                seed,
                class_weights,
                attribute_noise: noise,
                combined_label_rate: combined_rate,
            };
            let path = generate(&out, &config)?;
            println!("{}", path.display());
        }
    }
    Ok(())
}
