//! Executing a configured run into a self-describing directory.

use std::fs;
use std::io::BufWriter;

use crate::ablations::ReplaySchedule;
use crate::config::{RunConfig, RunLayout};
use crate::data::Corpus;
use crate::error::{Error, Result};
use crate::model::checkpoint;
use crate::trainer::{train, JsonlSink, Mode, RunOutcome};

fn write_json<S: serde::Serialize>(path: &std::path::Path, value: &S) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Trains according to `cfg` and writes the config snapshot, split
/// metadata, trajectory log, summary and checkpoints under `layout`.
///
/// In replay mode the schedule is also stored as `replay.json` so the
/// directory alone reproduces the run.
pub fn run_to_dir(
    cfg: &RunConfig,
    layout: &RunLayout,
    replay: Option<&ReplaySchedule>,
) -> Result<RunOutcome> {
    cfg.validate()?;
    let corpus = Corpus::load(&cfg.data.path, cfg.data.val_fraction)?;
    let ckpt = layout.checkpoints();
    fs::create_dir_all(&ckpt).map_err(|e| Error::io(&ckpt, e))?;
    write_json(&layout.config(), cfg)?;
    write_json(&layout.split(), &corpus.metadata())?;
    if let Some(r) = replay {
        write_json(&layout.root().join("replay.json"), &r.entries)?;
    }

    let tpath = layout.trajectory();
    let file = fs::File::create(&tpath).map_err(|e| Error::io(&tpath, e))?;
    let mut sink = JsonlSink::new(BufWriter::new(file));
    let outcome = train(&cfg.trainer, &cfg.model, &corpus, replay, &mut sink)?;

    write_json(&layout.summary(), &outcome.summary)?;
    let step = outcome.summary.steps as u64;
    checkpoint::save(&outcome.final_model, step, &ckpt, "final")?;
    checkpoint::save(&outcome.best_model, outcome.summary.best_val_step as u64, &ckpt, "best")?;
    if let (Mode::Dynamic, Some(c)) = (cfg.trainer.mode, outcome.controller.as_ref()) {
        let path = layout.qnet();
        fs::write(&path, c.net.encode_checkpoint(step)).map_err(|e| Error::io(&path, e))?;
    }
    Ok(outcome)
}
