use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use dicoop::data::{read_features, synth_generate, write_features, SynthConfig, DEFAULT_FEATURE_FILE};
use dicoop::error::Error;
use dicoop::harness::{
    build_report, gradcheck, reevaluate, run_experiment, run_single, write_artifacts, write_csv, DataSpec,
    ExperimentConfig, GradcheckOptions, RunArtifact,
};
use dicoop::prompt::Layout;

const EXIT_VALIDATION: u8 = 1;
const EXIT_NUMERICAL: u8 = 2;

#[derive(Parser)]
#[command(name = "dicoop", version, about = "Domain-invariant prompt tuning lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-domain feature store.
    Synth {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on one held-out domain and write a run artifact.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "dfp")]
        layout: Layout,
        #[arg(long = "lambda", default_value_t = 1.0)]
        lambda: f64,
        #[arg(long, default_value_t = 16)]
        m: usize,
        /// Token embedding width (defaults to the feature width).
        #[arg(long)]
        d: Option<usize>,
        #[arg(long, default_value_t = 0.07)]
        tau: f64,
        #[arg(long, default_value_t = 0.05)]
        lr: f64,
        #[arg(long, default_value_t = 200)]
        epochs: usize,
        #[arg(long, default_value_t = 32)]
        batch: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        holdout: String,
        /// Records per class per source domain; all records when omitted.
        #[arg(long)]
        shots: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Re-evaluate a run artifact on the held-out domain.
    Eval {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Finite-difference check of the analytic gradients.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-6)]
        eps: f64,
    },
    /// Run every (layout, holdout) pair of an experiment config.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Aggregate run artifacts into a per-domain x method table.
    Report {
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
        #[arg(long, default_value = "report.csv")]
        csv: PathBuf,
    },
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<(), Error> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Json {
        context: "output".into(),
        source: e,
    })?;
    println!("{text}");
    Ok(())
}

fn summary_line(a: &RunArtifact) -> String {
    format!(
        "{} holdout={} accuracy={:.4} ({}/{}) domain_probe={:.4}",
        a.method,
        a.holdout(),
        a.eval.accuracy.value,
        a.eval.accuracy.correct,
        a.eval.accuracy.total,
        a.domain_probe.value
    )
}

fn run(cli: Cli) -> Result<u8, Error> {
    match cli.command {
        Command::Synth { config, out } => {
            let cfg = match config {
                Some(path) => {
                    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
                    serde_json::from_str::<SynthConfig>(&text).map_err(|e| Error::Json {
                        context: path.display().to_string(),
                        source: e,
                    })?
                }
                None => SynthConfig::default(),
            };
            let store = synth_generate(&cfg)?;
            std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            let path = out.join(DEFAULT_FEATURE_FILE);
            write_features(&store, &path)?;
            println!("wrote {} records (D = {}) to {}", store.len(), store.dim(), path.display());
        }
        Command::Train {
            data,
            layout,
            lambda,
            m,
            d,
            tau,
            lr,
            epochs,
            batch,
            seed,
            holdout,
            shots,
            out,
        } => {
            let store = read_features(&data)?;
            let config = ExperimentConfig {
                data: DataSpec::Path(data),
                shots,
                layouts: vec![layout],
                holdouts: vec![holdout.clone()],
                m,
                d: d.unwrap_or(store.dim()),
                temperature: tau,
                lambda_max: lambda,
                lr,
                epochs,
                batch_size: batch,
                seed,
                ..ExperimentConfig::default()
            };
            let artifact = run_single(&config, &store, layout, &holdout)?;
            artifact.write(&out)?;
            println!("{}", summary_line(&artifact));
        }
        Command::Eval { run, data } => {
            let artifact = RunArtifact::from_file(&run)?;
            let report = reevaluate(&artifact, data.as_deref())?;
            print_json(&report)?;
            if report.accuracy != artifact.eval.accuracy {
                eprintln!(
                    "accuracy {} differs from the stored {}",
                    report.accuracy.value, artifact.eval.accuracy.value
                );
                return Ok(EXIT_NUMERICAL);
            }
        }
        Command::Gradcheck { seed, eps } => {
            let report = gradcheck(&GradcheckOptions {
                eps,
                ..GradcheckOptions::new(seed)
            })?;
            print_json(&report)?;
            if !report.passed {
                for s in &report.suites {
                    if let Some(w) = s.worst.as_ref().filter(|w| w.rel_error > report.threshold) {
                        eprintln!(
                            "{:?} case {} entry ({}, {}): analytic {} vs numeric {} (rel {:e})",
                            s.suite, w.case, w.row, w.col, w.analytic, w.numeric, w.rel_error
                        );
                    }
                }
                return Ok(EXIT_NUMERICAL);
            }
        }
        Command::Run { config, out } => {
            let config = ExperimentConfig::from_file(&config)?;
            let artifacts = run_experiment(&config)?;
            let paths = write_artifacts(&artifacts, &out)?;
            for (a, p) in artifacts.iter().zip(&paths) {
                println!("{} -> {}", summary_line(a), p.display());
            }
        }
        Command::Report { runs, csv } => {
            let artifacts = runs
                .iter()
                .map(|p| RunArtifact::from_file(p))
                .collect::<Result<Vec<_>, _>>()?;
            let report = build_report(&artifacts)?;
            print_json(&report)?;
            eprint!("{}", report.render());
            write_csv(&report, &csv)?;
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_VALIDATION)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            let code = match e.root() {
                Error::DegenerateFeature { .. } => EXIT_NUMERICAL,
                _ => EXIT_VALIDATION,
            };
            ExitCode::from(code)
        }
    }
}
