use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use seqrank::harness::{self, emit_reports, EvaluationSplit, ExperimentConfig, HarnessError, RankingReport, SweepMode};
use seqrank::metrics::MetricSpec;
use seqrank::ranking::{consistency, from_ranks, kendall_tau_a, SweepEta};
use seqrank::targetset::{Strategy, TargetSetSpec};

/// Full vs. sampled evaluation of sequential recommenders.
#[derive(Parser)]
#[command(name = "seqrank", version)]
struct Cli {
    /// Log progress at info level (debug when repeated).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build (or reuse) the dataset bundle and print its statistics.
    Preprocess(Overrides),
    /// Train every neural model, reusing cached checkpoints.
    Train(Overrides),
    /// Run the whole pipeline and write the reports.
    Evaluate {
        #[command(flatten)]
        overrides: Overrides,
        /// Skip the sample-size sweep even if the config has one.
        #[arg(long)]
        no_sweep: bool,
    },
    /// Run the pipeline with a sample-size sweep.
    Sweep {
        #[command(flatten)]
        overrides: Overrides,
        /// Sample sizes, `full` allowed.
        #[arg(long, value_delimiter = ',')]
        etas: Option<Vec<SweepEta>>,
        #[arg(long)]
        strategy: Option<Strategy>,
        #[arg(long)]
        metric: Option<MetricSpec>,
    },
    /// Kendall's Tau-a and consistency of two rank vectors.
    Compare {
        /// Model names, in the order of the rank vectors.
        #[arg(long, value_delimiter = ',', required = true)]
        models: Vec<String>,
        #[arg(long, value_delimiter = ',', required = true)]
        first: Vec<usize>,
        #[arg(long, value_delimiter = ',', required = true)]
        second: Vec<usize>,
    },
    /// Re-emit tables and CSVs from a stored report.json.
    Report {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output_dir: PathBuf,
    },
}

/// Config file plus command-line overrides of its fields.
#[derive(Args)]
struct Overrides {
    #[arg(long, short)]
    config: PathBuf,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    runs: Option<usize>,
    #[arg(long)]
    eta: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    strategies: Option<Vec<Strategy>>,
    #[arg(long, value_delimiter = ',')]
    metrics: Option<Vec<MetricSpec>>,
    /// `test` or `validation`.
    #[arg(long)]
    split: Option<String>,
}

impl Overrides {
    fn load(&self) -> Result<ExperimentConfig, HarnessError> {
        let mut c = ExperimentConfig::load(&self.config)?;
        if let Some(v) = &self.output_dir {
            c.output_dir = v.clone();
        }
        if let Some(v) = self.seed {
            c.seed = v;
        }
        if let Some(v) = self.runs {
            c.runs = v;
        }
        if let Some(v) = self.eta {
            c.eta = v;
        }
        if let Some(v) = &self.strategies {
            c.strategies = v.clone();
        }
        if let Some(v) = &self.metrics {
            c.metrics = v.clone();
        }
        if let Some(v) = &self.split {
            c.split = match v.as_str() {
                "test" => EvaluationSplit::Test,
                "validation" => EvaluationSplit::Validation,
                _ => return Err(HarnessError::Config(format!("unknown split `{v}`"))),
            };
        }
        c.validate()?;
        Ok(c)
    }
}

fn print_summary(report: &RankingReport) {
    print!("{}", harness::text_table(report));
}

fn run(cli: Cli) -> Result<(), HarnessError> {
    harness::configure_workers()?;
    match cli.command {
        Command::Preprocess(o) => {
            let config = o.load()?;
            let data = harness::prepare_dataset(&config)?;
            let s = data.dataset.stats();
            println!(
                "{}: {} users, {} items, {} actions, avg length {:.2}, density {:.4}%",
                data.label,
                s.users,
                s.items,
                s.actions,
                s.avg_length,
                100.0 * s.density
            );
            println!("bundle: {}", config.output_dir.join(&data.bundle).display());
        }
        Command::Train(o) => {
            let config = o.load()?;
            let data = harness::prepare_dataset(&config)?;
            for m in harness::prepare_models(&config, &data)? {
                match m.training {
                    Some(t) => println!(
                        "{}: {} epochs, best epoch {}, validation HR@10 {}",
                        m.name,
                        t.epochs_run,
                        t.best_epoch,
                        t.best_validation_hr10.map_or("-".into(), |v| format!("{v:.4}"))
                    ),
                    None => println!("{}: fitted baseline", m.name),
                }
            }
        }
        Command::Evaluate { overrides, no_sweep } => {
            let config = overrides.load()?;
            let mode = if no_sweep {
                SweepMode::Skip
            } else {
                SweepMode::AsConfigured
            };
            print_summary(&harness::run_experiment(&config, mode)?);
        }
        Command::Sweep {
            overrides,
            etas,
            strategy,
            metric,
        } => {
            let mut config = overrides.load()?;
            let mut section = config.sweep.clone().unwrap_or_default();
            if let Some(v) = etas {
                section.etas = v;
            }
            if let Some(v) = strategy {
                section.strategy = v;
            }
            if let Some(v) = metric {
                section.metric = v;
            }
            config.sweep = Some(section);
            config.validate()?;
            let report = harness::run_experiment(&config, SweepMode::Force)?;
            if let Some(s) = &report.sweep {
                for p in &s.points {
                    println!(
                        "{:>8}  tau {:>5.2}  {}",
                        p.eta,
                        p.tau_vs_full.tau,
                        p.ranking.models().join(" > ")
                    );
                }
            }
        }
        Command::Compare { models, first, second } => {
            if models.len() != first.len() || models.len() != second.len() {
                return Err(HarnessError::Config("models and rank vectors differ in length".into()));
            }
            let metric = MetricSpec::hr(10);
            let build = |ranks: &[usize]| {
                let pairs: Vec<(&str, usize)> = models.iter().map(|m| m.as_str()).zip(ranks.iter().copied()).collect();
                from_ranks(&pairs, metric, TargetSetSpec::full()).map_err(|e| HarnessError::Config(e.to_string()))
            };
            let (a, b) = (build(&first)?, build(&second)?);
            let tau = kendall_tau_a(&a, &b).map_err(|e| HarnessError::Config(e.to_string()))?;
            let verdict = consistency(&a, &b).map_err(|e| HarnessError::Config(e.to_string()))?;
            let (num, den) = tau.reduced();
            println!(
                "tau = {:.4} ({num}/{den}); concordant {}, discordant {}; {}",
                tau.tau,
                tau.concordant,
                tau.discordant,
                if verdict.consistent {
                    "consistent"
                } else {
                    "inconsistent"
                }
            );
        }
        Command::Report { input, output_dir } => {
            let text = std::fs::read_to_string(&input)
                .map_err(|e| HarnessError::Config(format!("{}: {e}", input.display())))?;
            let report = RankingReport::from_json(&text)?;
            report.check_taus()?;
            emit_reports(&report, &output_dir)?;
            print_summary(&report);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
