//! Command-line runner for synthetic open-class experiments.
//!
//! On failure prints one line, `error: <category>: <message>`, and exits 2.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ttpt::archive::Archive;
use ttpt::fusion::Predictor;
use ttpt::harness::pipeline::{build_model, evaluate_predictor, train_on, write_reports};
use ttpt::harness::{generate_synthetic_task, run_shot_sweep, run_temperature_sweep, RunConfig, SyntheticTask, World};
use ttpt::math::Temperature;
use ttpt::tuning::ContextBlock;
use ttpt::{Error, Result};

#[derive(Parser)]
#[command(name = "ttpt", version, about = "Test-time prompt fusion on synthetic open-class tasks")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (`key = value` lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// dynamic, fixed:<alpha> or combo.
    #[arg(long, global = true)]
    alpha_mode: Option<String>,
    #[arg(long, global = true)]
    tau: Option<f64>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic task and write it as an archive.
    SynthData,
    /// Few-shot tune a context on a task archive; writes a context archive.
    Train {
        #[arg(long)]
        task: PathBuf,
    },
    /// Evaluate predictors on a task with a trained context; writes reports.
    Eval {
        #[arg(long)]
        task: PathBuf,
        #[arg(long)]
        context: PathBuf,
    },
    /// Evaluate the fixed-alpha and classifier-combo ablations.
    Ablate {
        #[arg(long)]
        task: PathBuf,
        #[arg(long)]
        context: PathBuf,
    },
    /// Sweep the stage-1 temperature or the shot count from a config.
    Sweep {
        /// Comma-separated temperatures, e.g. 1,0.1,0.01.
        #[arg(long, value_delimiter = ',', conflicts_with = "shots", required_unless_present = "shots")]
        temperatures: Vec<f64>,
        /// Comma-separated shot counts, e.g. 1,2,4,8,16.
        #[arg(long, value_delimiter = ',')]
        shots: Vec<usize>,
    },
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(tau) = common.tau {
        cfg.tau = Temperature::new(tau)?;
    }
    if let Some(mode) = &common.alpha_mode {
        let p = Predictor::parse(mode)?;
        if !matches!(p, Predictor::Dynamic | Predictor::FixedAlpha(_) | Predictor::ClassifierCombo) {
            return Err(Error::Config(format!("alpha mode must be dynamic, fixed:<v> or combo, got {mode:?}")));
        }
        cfg.predictors = vec![p];
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_path(common: &Common, default: &str) -> PathBuf {
    common.out.clone().unwrap_or_else(|| PathBuf::from(default))
}

fn load_task(path: &Path) -> Result<SyntheticTask> {
    SyntheticTask::from_archive(&Archive::load(path)?)
}

fn evaluate(task: &Path, context: &Path, cfg: &RunConfig, predictors: &[Predictor], out: &Path) -> Result<()> {
    let task = load_task(task)?;
    let context = ContextBlock::from_archive(&Archive::load(context)?)?;
    let world = World::build(&task, &cfg.world_config())?;
    let model = build_model(&task, &world, &context, cfg)?;
    let reports = predictors
        .iter()
        .map(|&p| evaluate_predictor(&model, p, &task, &world, cfg))
        .collect::<Result<Vec<_>>>()?;
    for r in &reports {
        println!("{}: base {:.1} new {:.1} h {:.1}", r.echo.predictor, r.base_acc, r.new_acc, r.h);
    }
    for path in write_reports(&reports, out)? {
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli.common)?;
    match cli.command {
        Command::SynthData => {
            let task = generate_synthetic_task(&cfg.task_spec())?;
            let out = out_path(&cli.common, "task.ttpt");
            task.to_archive()?.save(&out)?;
            println!("wrote {}", out.display());
        }
        Command::Train { task } => {
            let trained = train_on(load_task(&task)?, &cfg)?;
            let out = out_path(&cli.common, "context.ttpt");
            trained.context.to_archive()?.save(&out)?;
            let last = trained.losses.last().copied().unwrap_or(f64::NAN);
            println!("final loss {last:.6}");
            println!("wrote {}", out.display());
        }
        Command::Eval { task, context } => {
            evaluate(&task, &context, &cfg, &cfg.predictors, &out_path(&cli.common, "reports"))?;
        }
        Command::Ablate { task, context } => {
            // `--alpha-mode fixed:<v>` picks the ablated alpha; 0.5 otherwise.
            let fixed = match cfg.predictors.as_slice() {
                [p @ Predictor::FixedAlpha(_)] if cli.common.alpha_mode.is_some() => *p,
                _ => Predictor::FixedAlpha(0.5),
            };
            let predictors = [fixed, Predictor::ClassifierCombo];
            evaluate(&task, &context, &cfg, &predictors, &out_path(&cli.common, "reports"))?;
        }
        Command::Sweep { temperatures, shots } => {
            let out = out_path(&cli.common, "sweep");
            let (reports, names): (Vec<_>, Vec<String>) = if shots.is_empty() {
                let taus = temperatures.iter().map(|&t| Temperature::new(t)).collect::<Result<Vec<_>>>()?;
                let reports = run_temperature_sweep(&cfg, &taus)?;
                let names = reports.iter().map(|r| format!("report_tau_{}.txt", r.echo.stage1_tau)).collect();
                (reports, names)
            } else {
                let reports = run_shot_sweep(&cfg, &shots)?;
                let names = reports.iter().map(|r| format!("report_shots_{}.txt", r.echo.shots)).collect();
                (reports, names)
            };
            std::fs::create_dir_all(&out)?;
            for (r, name) in reports.iter().zip(names) {
                let path = out.join(name);
                ttpt::harness::emit_report(r, &path)?;
                println!("{}: base {:.1} new {:.1} h {:.1}", path.display(), r.base_acc, r.new_acc, r.h);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            eprintln!("error: usage_error: {first}");
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}: {}", e.category(), e.to_string().replace('\n', " "));
            ExitCode::from(2)
        }
    }
}
