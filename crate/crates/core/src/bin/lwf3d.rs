use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use lwf3d::harness::{
    gen_synth, parse_grid, parse_modes, report, Checkpoint, Experiment, ExperimentConfig, SplitName, TEMPLATE,
};
use lwf3d::pointcloud::SyntheticCorpus;
use lwf3d::training::Mode;
use lwf3d::{Error, Result};

#[derive(Parser)]
#[command(name = "lwf3d", version, about = "Class-incremental point cloud classification without forgetting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the 8-class synthetic corpus as XYZ files plus manifest.csv.
    GenSynth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 256)]
        points: usize,
    },
    /// Train and evaluate one or more modes.
    #[command(after_help = config_help())]
    Run {
        #[arg(long)]
        config: PathBuf,
        /// baseline1, lwf, baseline2, ours, a comma list or `all`
        /// (default: the config's train.mode).
        #[arg(long)]
        mode: Option<String>,
        /// Tune on a 4:1 split of the old classes instead of the real task.
        #[arg(long)]
        validate: bool,
        /// Output directory (default: the config's output.dir).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Print one line per epoch to stderr.
        #[arg(long)]
        progress: bool,
    },
    /// One-at-a-time sweeps over lambda and tau.
    #[command(after_help = config_help())]
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Grid such as `lambda=1,3,5;tau=1,3`; overrides the [sweep] section.
        #[arg(long)]
        grid: Vec<String>,
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        validate: bool,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        progress: bool,
    },
    /// Write projected features F(g) and class semantics H(e) as CSV.
    DumpFeatures {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Config describing the data the checkpoint was trained on.
        #[arg(long)]
        config: PathBuf,
        /// old-train, old-test, new-train or new-test.
        #[arg(long, default_value = "new-test")]
        split: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Task-aware metrics of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: PathBuf,
        /// Reference old-task accuracy (default: recorded in the checkpoint).
        #[arg(long)]
        acc_old_star: Option<f64>,
    },
}

fn config_help() -> String {
    format!("Config file keys and defaults:\n\n{TEMPLATE}")
}

fn load(config: &Path, validate: bool, out: Option<PathBuf>, progress: bool) -> Result<ExperimentConfig> {
    let mut c = ExperimentConfig::load(config)?;
    c.validate |= validate;
    c.train.progress = progress;
    if let Some(out) = out {
        c.output_dir = out;
    }
    Ok(c)
}

fn modes(text: Option<&str>, default: &[Mode]) -> Result<Vec<Mode>> {
    match text {
        None => Ok(default.to_vec()),
        Some(t) => {
            let m = parse_modes(t).map_err(|e| Error::Config(vec![e]))?;
            if m.is_empty() {
                return Err(Error::Config(vec!["--mode names no mode".into()]));
            }
            Ok(m)
        }
    }
}

fn print_metrics_header() {
    println!("{}", report::REPORT_HEADER.join(","));
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenSynth { out, seed, points } => {
            let corpus = SyntheticCorpus {
                seed,
                points,
                ..SyntheticCorpus::default()
            };
            let n = gen_synth(&out, &corpus)?;
            println!("wrote {n} instances and {}", out.join("manifest.csv").display());
        }
        Command::Run {
            config,
            mode,
            validate,
            out,
            progress,
        } => {
            let c = load(&config, validate, out, progress)?;
            let modes = modes(mode.as_deref(), &c.modes)?;
            let exp = Experiment::prepare(c)?;
            let report = exp.run(&modes)?;
            print_metrics_header();
            for r in report.rows() {
                let m = r.metrics;
                println!("{},{},{},{},{},{}", r.mode, r.seed, m.acc_old_star, m.acc_old, m.acc_new, m.delta);
            }
            eprintln!(
                "reports in {} ({:.1} s)",
                exp.config.output_dir.display(),
                report.wall_clock.as_secs_f64()
            );
        }
        Command::Sweep {
            config,
            grid,
            mode,
            validate,
            out,
            progress,
        } => {
            let mut c = load(&config, validate, out, progress)?;
            for spec in &grid {
                let (lambda, tau) = parse_grid(spec)?;
                if let Some(l) = lambda {
                    c.lambda_grid = l;
                }
                if let Some(t) = tau {
                    c.tau_grid = t;
                }
            }
            let problems = c.problems();
            if !problems.is_empty() {
                return Err(Error::Config(problems));
            }
            let picked = modes(mode.as_deref(), &c.modes[..1])?;
            if picked.len() != 1 {
                return Err(Error::Config(vec!["sweep runs exactly one mode".into()]));
            }
            let exp = Experiment::prepare(c)?;
            println!("param,value,lambda,tau,acc_old_star,acc_old,acc_new,delta");
            for r in exp.sweep(picked[0])? {
                let m = r.metrics;
                println!(
                    "{},{},{},{},{},{},{},{}",
                    r.param, r.value, r.lambda, r.tau, m.acc_old_star, m.acc_old, m.acc_new, m.delta
                );
            }
        }
        Command::DumpFeatures {
            checkpoint,
            config,
            split,
            out,
        } => {
            let which: SplitName = split.parse()?;
            let exp = Experiment::prepare(ExperimentConfig::load(&config)?)?;
            let ck = Checkpoint::load(&checkpoint)?;
            let rows = exp.dump_features(&ck, which, &out)?;
            println!("wrote {rows} rows to {}", out.display());
        }
        Command::Eval {
            checkpoint,
            config,
            acc_old_star,
        } => {
            let exp = Experiment::prepare(ExperimentConfig::load(&config)?)?;
            let ck = Checkpoint::load(&checkpoint)?;
            let m = exp.evaluate_checkpoint(&ck, acc_old_star)?;
            print_metrics_header();
            println!(
                "{},{},{},{},{},{}",
                ck.meta("mode").unwrap_or(""),
                ck.meta("seed").unwrap_or(""),
                m.acc_old_star,
                m.acc_old,
                m.acc_new,
                m.delta
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
