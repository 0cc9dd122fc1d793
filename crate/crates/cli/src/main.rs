use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use layertie::ablations::{Permutation, ReplaySchedule};
use layertie::config::{RunConfig, RunLayout};
use layertie::report::{self, ReportKind};
use layertie::run::run_to_dir;
use layertie::trainer::{read_trajectory, Mode};

#[derive(Parser)]
#[command(name = "layertie", version, about = "Train transformers with dynamic layer tying")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct RunArgs {
    /// JSON config with `model`, `trainer` and `data` sections.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted override such as `trainer.steps=300`; repeatable, applied in order.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Seeds both the model initialization and the trainer.
    #[arg(long)]
    seed: Option<u64>,
    /// Root directory for run directories.
    #[arg(long, default_value = "runs")]
    out: PathBuf,
    /// Run directory name; derived from mode and seed when omitted.
    #[arg(long)]
    name: Option<String>,
    /// Overwrite an existing run directory.
    #[arg(long)]
    force: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write a run directory.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// dynamic, conventional, fixed_pattern or replay.
        #[arg(long)]
        mode: Option<String>,
        /// cycle, cycle_rev or sequence (implies fixed_pattern mode).
        #[arg(long)]
        pattern: Option<String>,
    },
    /// Re-run training applying the tying states recorded by another run.
    Replay {
        /// A run directory or a trajectory JSON-lines file.
        source: PathBuf,
        /// JSON integer array mapping layer i to layer p[i].
        #[arg(long)]
        permutation: Option<PathBuf>,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Write analysis files next to a finished run.
    Report {
        run_dir: PathBuf,
        /// map, events, hist, corr, summary or all.
        #[arg(default_value = "all")]
        which: String,
    },
}

fn seed_overrides(seed: Option<u64>) -> Vec<String> {
    seed.map(|s| vec![format!("trainer.seed={s}"), format!("model.seed={s}")])
        .unwrap_or_default()
}

fn load_config(base: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    Ok(match base {
        Some(p) => RunConfig::load(p, overrides)?,
        None => RunConfig::from_json_with_overrides(b"", overrides)?,
    })
}

fn prepare_dir(run: &RunArgs, cfg: &RunConfig) -> Result<RunLayout> {
    let name = run.name.clone().unwrap_or_else(|| {
        let mode = serde_json::to_value(cfg.trainer.mode)
            .ok()
            .and_then(|v| v.as_str().map(str::to_string))
            .unwrap_or_default();
        format!("{mode}-seed{}", cfg.trainer.seed)
    });
    let layout = RunLayout::new(run.out.join(name));
    if layout.summary().exists() && !run.force {
        bail!(
            "{} already holds a finished run (use --force to overwrite)",
            layout.root().display()
        );
    }
    Ok(layout)
}

fn finish(layout: &RunLayout, summary: &layertie::trainer::RunSummary) {
    println!(
        "{}: best val ppl {:.3} at step {}, final {:.3}; mean independent layers {:.2}, final state {:?}",
        layout.root().display(),
        summary.best_val_ppl,
        summary.best_val_step,
        summary.final_val_ppl,
        summary.mean_independent_layers,
        summary.final_state.as_slice(),
    );
}

fn cmd_train(run: RunArgs, mode: Option<String>, pattern: Option<String>) -> Result<()> {
    let mut overrides = run.overrides.clone();
    overrides.extend(seed_overrides(run.seed));
    if let Some(p) = &pattern {
        layertie::ablations::PatternSpec::parse_kind(p)?;
        overrides.push(format!("trainer.pattern={{\"kind\":\"{p}\"}}"));
        if mode.is_none() {
            overrides.push("trainer.mode=fixed_pattern".into());
        }
    }
    if let Some(m) = &mode {
        m.parse::<Mode>()?;
        overrides.push(format!("trainer.mode={m}"));
    }
    let cfg = load_config(run.config.as_deref(), &overrides)?;
    if cfg.trainer.mode == Mode::Replay {
        bail!(layertie::Error::Config {
            field: "trainer.mode".into(),
            message: "use the replay subcommand for replay runs".into(),
        });
    }
    let layout = prepare_dir(&run, &cfg)?;
    let outcome = run_to_dir(&cfg, &layout, None)?;
    finish(&layout, &outcome.summary);
    Ok(())
}

fn cmd_replay(source: PathBuf, permutation: Option<PathBuf>, run: RunArgs) -> Result<()> {
    let (trajectory, source_cfg) = if source.is_dir() {
        let l = RunLayout::new(&source);
        (l.trajectory(), Some(l.config()))
    } else {
        (source.clone(), None)
    };
    let mut overrides = run.overrides.clone();
    overrides.extend(seed_overrides(run.seed));
    overrides.push("trainer.mode=replay".into());
    let base = run.config.clone().or(source_cfg);
    let cfg = load_config(base.as_deref(), &overrides)?;

    let file = fs::File::open(&trajectory)
        .with_context(|| format!("reading trajectory {}", trajectory.display()))?;
    let records = read_trajectory(BufReader::new(file))?;
    let perm = match &permutation {
        Some(p) => {
            let bytes = fs::read(p).with_context(|| format!("reading permutation {}", p.display()))?;
            Some(Permutation::from_json(&bytes)?)
        }
        None => None,
    };
    let schedule = ReplaySchedule::from_trajectory(&records, cfg.model.n_layers, perm.as_ref())?;

    let layout = prepare_dir(&run, &cfg)?;
    let outcome = run_to_dir(&cfg, &layout, Some(&schedule))?;
    finish(&layout, &outcome.summary);
    Ok(())
}

fn cmd_report(run_dir: PathBuf, which: String) -> Result<()> {
    let kinds = ReportKind::parse_list(&which)?;
    let layout = RunLayout::new(run_dir);
    for path in report::generate(&layout, &kinds)? {
        println!("{}", path.display());
    }
    Ok(())
}

/// 1 for configuration and input validation problems, 2 for everything
/// else.
fn exit_code(err: &anyhow::Error) -> u8 {
    use layertie::Error as E;
    match err.downcast_ref::<E>() {
        Some(E::Config { .. } | E::InvalidInput(_) | E::LengthMismatch { .. } | E::InvalidState(_)) => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Train { run, mode, pattern } => cmd_train(run, mode, pattern),
        Command::Replay {
            source,
            permutation,
            run,
        } => cmd_replay(source, permutation, run),
        Command::Report { run_dir, which } => cmd_report(run_dir, which),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
