//! Thin command-line wrapper around [`czsl_lab::expcli`]. All logic lives
//! in the library; this binary only parses arguments and prints results.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use czsl_lab::expcli::{
    cmd_confusions, cmd_eval, cmd_gen, cmd_increment, cmd_report, cmd_train, ConfusionsOptions,
    EvalOptions, ExpConfig, IncrementOptions, ReportOptions, Toggles, TrainOptions,
};
use czsl_lab::incrementer::{PromptComponents, Regime};

#[derive(Parser)]
#[command(
    name = "czsl-lab",
    about = "Desk-scale laboratory for compositional zero-shot detection experiments",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArg {
    /// Path to the experiment configuration JSON.
    #[arg(long, short)]
    config: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the pretraining and test datasets.
    Gen {
        #[command(flatten)]
        config: ConfigArg,
        /// Overwrite existing datasets.
        #[arg(long)]
        force: bool,
    },
    /// Train a model with a chosen component combination and evaluate it.
    Train {
        #[command(flatten)]
        config: ConfigArg,
        /// All three components off (plain auxiliary-token fine-tuning).
        #[arg(long, conflicts_with_all = ["ca", "smoothing", "separation", "decorrelation"])]
        baseline_csp: bool,
        /// All three components on (the default).
        #[arg(long, conflicts_with_all = ["smoothing", "separation", "decorrelation"])]
        ca: bool,
        /// Enable compositional smoothing only (combine freely).
        #[arg(long)]
        smoothing: bool,
        /// Enable the separation losses only (combine freely).
        #[arg(long)]
        separation: bool,
        /// Enable the decorrelation loss only (combine freely).
        #[arg(long)]
        decorrelation: bool,
        /// Run seeds 0..N-1 instead of the config seed.
        #[arg(long)]
        seeds: Option<u64>,
        /// Overwrite existing run directories.
        #[arg(long)]
        force: bool,
    },
    /// Score a checkpoint (or a detections file) against a dataset.
    Eval {
        #[command(flatten)]
        config: ConfigArg,
        /// Checkpoint file to load.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory (annotations.json + images/).
        #[arg(long)]
        data: PathBuf,
        /// Score these detections (JSON list) instead of running the model.
        #[arg(long)]
        detections: Option<PathBuf>,
        /// Write the report JSON here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Mine a run's confusion matrix into an increment plan.
    Confusions {
        /// Run directory to mine.
        #[arg(long)]
        run: PathBuf,
        /// Minimum row-normalized confusion rate to mine.
        #[arg(long)]
        threshold: Option<f64>,
        /// Where to write the plan (default: plan.json inside the run).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Execute an increment plan against a training run.
    Increment {
        /// Source training run directory.
        #[arg(long)]
        run: PathBuf,
        /// Plan file produced by `confusions`.
        #[arg(long)]
        plan: PathBuf,
        /// Tuning regime: all-tokens, subset-tokens, or prompt-only.
        #[arg(long, value_parser = parse_regime)]
        regime: Option<Regime>,
        /// Prompt components: both, negation, or affirmation.
        #[arg(long, value_parser = parse_components)]
        components: Option<PromptComponents>,
        /// Seed for the round (default: the source run's seed).
        #[arg(long)]
        seed: Option<u64>,
        /// Override the configured increment epoch budget.
        #[arg(long)]
        epochs: Option<usize>,
        /// Override the configured increment learning rate.
        #[arg(long)]
        lr: Option<f64>,
        /// Overwrite an existing run directory.
        #[arg(long)]
        force: bool,
    },
    /// Aggregate run directories into mean ± std tables.
    Report {
        /// Run directories to aggregate.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        /// Write the CSV view here.
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Write the text view here.
        #[arg(long)]
        text: Option<PathBuf>,
    },
}

fn parse_regime(s: &str) -> Result<Regime, String> {
    match s {
        "all-tokens" => Ok(Regime::AllTokens),
        "subset-tokens" => Ok(Regime::SubsetTokens),
        "prompt-only" => Ok(Regime::PromptOnly),
        other => Err(format!(
            "unknown regime {other:?}; expected all-tokens, subset-tokens, or prompt-only"
        )),
    }
}

fn parse_components(s: &str) -> Result<PromptComponents, String> {
    match s {
        "both" => Ok(PromptComponents::Both),
        "negation" => Ok(PromptComponents::Negation),
        "affirmation" => Ok(PromptComponents::Affirmation),
        other => Err(format!(
            "unknown components {other:?}; expected both, negation, or affirmation"
        )),
    }
}

fn run() -> czsl_lab::Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Gen { config, force } => {
            let config = ExpConfig::from_file(&config.config)?;
            let summary = cmd_gen(&config, force)?;
            println!(
                "pretrain: {} images, {} instances -> {}",
                summary.pretrain.images,
                summary.pretrain.instances,
                config.data_dir("pretrain").display()
            );
            println!(
                "test:     {} images, {} instances -> {}",
                summary.test.images,
                summary.test.instances,
                config.data_dir("test").display()
            );
        }
        Command::Train {
            config,
            baseline_csp,
            ca: _,
            smoothing,
            separation,
            decorrelation,
            seeds,
            force,
        } => {
            let config = ExpConfig::from_file(&config.config)?;
            let toggles = if baseline_csp {
                Toggles::baseline()
            } else if smoothing || separation || decorrelation {
                Toggles {
                    smoothing,
                    separation,
                    decorrelation,
                }
            } else {
                Toggles::full()
            };
            let opts = TrainOptions {
                toggles,
                seeds: seeds.map(|n| (0..n).collect()).unwrap_or_default(),
                force,
            };
            let records = cmd_train(&config, &opts)?;
            for r in &records {
                let dir = config.runs_dir().join(&r.config_hash);
                println!("{} seed {} -> {}", r.variant, r.seed, dir.display());
            }
        }
        Command::Eval {
            config,
            checkpoint,
            data,
            detections,
            out,
        } => {
            let config = ExpConfig::from_file(&config.config)?;
            let report = cmd_eval(
                &config,
                &EvalOptions {
                    checkpoint,
                    data_dir: data,
                    detections,
                    out,
                },
            )?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Confusions {
            run,
            threshold,
            out,
        } => {
            let plan = cmd_confusions(&ConfusionsOptions {
                run,
                threshold,
                out,
            })?;
            for note in &plan.notes {
                eprintln!("{note}");
            }
            println!(
                "mined {} pairs, selected {} for prompting",
                plan.mined.len(),
                plan.selected.len()
            );
            for p in &plan.selected {
                println!(
                    "  {} <- {} (rate {:.2}): \"{}\"",
                    p.target, p.distractor, p.rate, p.init_text
                );
            }
        }
        Command::Increment {
            run,
            plan,
            regime,
            components,
            seed,
            epochs,
            lr,
            force,
        } => {
            let (record, report) = cmd_increment(&IncrementOptions {
                run,
                plan,
                regime,
                components,
                seed,
                epochs,
                lr,
                force,
            })?;
            println!("added: {}", report.added.join(", "));
            print!("{}", report.delta_table());
            println!("run -> {}", record.config_hash);
        }
        Command::Report { runs, csv, text } => {
            let tables = cmd_report(&ReportOptions {
                runs,
                out_csv: csv,
                out_text: text,
            })?;
            print!("{}", tables.text);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
