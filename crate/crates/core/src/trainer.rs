//! The training loop: gradient steps on the decoder, a tying decision every
//! `controller_period` steps, validation-based model selection and a
//! trajectory log with one record per controller invocation.

use std::io::{BufRead, Write};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ablations::{pattern_state, PatternSpec, ReplaySchedule};
use crate::data::{Batch, Corpus};
use crate::error::{Error, Result};
use crate::model::{
    perplexity_from_loss, ModelConfig, ParameterStore, StartMode, TransitionOptions,
    DEFAULT_PPL_CEILING,
};
use crate::qcontroller::{bellman_target, Controller, ControllerConfig};
use crate::tying::{canonicalize, count_independent, ActionVector, TyingState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Dynamic,
    Conventional,
    FixedPattern,
    Replay,
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|_| {
            Error::config(
                "trainer.mode",
                format!("unknown mode {s:?} (expected dynamic, conventional, fixed_pattern or replay)"),
            )
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardKind {
    /// `-exp(cross_entropy)`
    NegPpl,
    /// `-cross_entropy`
    NegLogPpl,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerConfig {
    /// Total optimizer steps.
    pub steps: usize,
    /// Steps between controller invocations.
    pub controller_period: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Seeds the batch sampler and the controller. Model initialization uses
    /// `model.seed`.
    pub seed: u64,
    pub mode: Mode,
    pub controller: ControllerConfig,
    pub reward: RewardKind,
    pub pattern: Option<PatternSpec>,
    pub no_tie: bool,
    pub all_trainable_init: bool,
    pub literal_first_transition: bool,
    /// Validation cadence in steps; one epoch when unset.
    pub eval_every: Option<usize>,
    /// Evaluate on at most this many validation batches.
    pub max_val_batches: Option<usize>,
    pub ppl_ceiling: f64,
    /// Adds elapsed seconds to every trajectory record. Off by default so
    /// logs of identical runs compare byte-equal.
    pub record_wall_time: bool,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            steps: 3000,
            controller_period: 15,
            batch_size: 16,
            learning_rate: 1e-4,
            seed: 0,
            mode: Mode::Dynamic,
            controller: ControllerConfig::default(),
            reward: RewardKind::NegPpl,
            pattern: None,
            no_tie: false,
            all_trainable_init: false,
            literal_first_transition: false,
            eval_every: None,
            max_val_batches: None,
            ppl_ceiling: DEFAULT_PPL_CEILING,
            record_wall_time: false,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.controller_period == 0 {
            return Err(Error::config("trainer.controller_period", "must be >= 1"));
        }
        if self.steps < self.controller_period {
            return Err(Error::config(
                "trainer.steps",
                format!(
                    "{} steps is fewer than the controller period {}",
                    self.steps, self.controller_period
                ),
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::config("trainer.batch_size", "must be >= 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("trainer.learning_rate", "must be positive"));
        }
        if self.eval_every == Some(0) {
            return Err(Error::config("trainer.eval_every", "must be >= 1"));
        }
        if self.max_val_batches == Some(0) {
            return Err(Error::config("trainer.max_val_batches", "must be >= 1"));
        }
        // also rejects NaN
        if self.ppl_ceiling.partial_cmp(&1.0) != Some(std::cmp::Ordering::Greater) {
            return Err(Error::config("trainer.ppl_ceiling", "must exceed 1"));
        }
        if self.mode == Mode::FixedPattern && self.pattern.is_none() {
            return Err(Error::config(
                "trainer.pattern",
                "fixed_pattern mode needs a pattern",
            ));
        }
        self.controller.validate()
    }

    fn transition_options(&self) -> TransitionOptions {
        TransitionOptions {
            replicate_only: self.no_tie,
            literal_first_transition: self.literal_first_transition,
        }
    }
}

/// One controller invocation (or one replayed transition).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectoryRecord {
    /// Completed optimizer steps when the invocation ran.
    pub step: usize,
    /// State after the transition.
    #[serde(rename = "s")]
    pub state: TyingState,
    #[serde(rename = "a")]
    pub action: ActionVector,
    pub reward: f64,
    /// Absent for replayed transitions, which have no controller.
    pub predicted_q: Option<f64>,
    pub bellman_target: Option<f64>,
    pub q_loss: Option<f64>,
    /// The exploration rate the action was drawn with.
    pub epsilon: Option<f64>,
    pub tied_count: usize,
    pub untied_count: usize,
    pub independent_layers: usize,
    pub trainable_params: usize,
    pub train_ppl: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_time: Option<f64>,
}

/// Points in the loop at which sinks may inspect the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepEvent {
    /// After the optimizer update of the given step.
    OptimizerStep(usize),
    /// After the tying transition at the given step.
    Transition(usize),
}

/// Receives trajectory records as they are produced.
pub trait TrajectorySink {
    fn record(&mut self, rec: &TrajectoryRecord) -> Result<()>;

    fn observe(&mut self, _event: StepEvent, _store: &ParameterStore<f32>) -> Result<()> {
        Ok(())
    }
}

impl TrajectorySink for Vec<TrajectoryRecord> {
    fn record(&mut self, rec: &TrajectoryRecord) -> Result<()> {
        self.push(rec.clone());
        Ok(())
    }
}

/// Writes one JSON document per line.
pub struct JsonlSink<W: Write> {
    out: W,
}

impl<W: Write> JsonlSink<W> {
    pub fn new(out: W) -> Self {
        JsonlSink { out }
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

impl<W: Write> TrajectorySink for JsonlSink<W> {
    fn record(&mut self, rec: &TrajectoryRecord) -> Result<()> {
        let line = serde_json::to_string(rec)?;
        writeln!(self.out, "{line}")
            .and_then(|_| self.out.flush())
            .map_err(|e| Error::io("trajectory log", e))
    }
}

/// Forwards to several sinks.
pub struct Tee<'a>(pub Vec<&'a mut dyn TrajectorySink>);

impl TrajectorySink for Tee<'_> {
    fn record(&mut self, rec: &TrajectoryRecord) -> Result<()> {
        for s in self.0.iter_mut() {
            s.record(rec)?;
        }
        Ok(())
    }

    fn observe(&mut self, event: StepEvent, store: &ParameterStore<f32>) -> Result<()> {
        for s in self.0.iter_mut() {
            s.observe(event, store)?;
        }
        Ok(())
    }
}

/// Parses a JSON-lines trajectory. Blank lines are skipped.
pub fn read_trajectory<R: BufRead>(reader: R) -> Result<Vec<TrajectoryRecord>> {
    let mut out = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io("trajectory log", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: TrajectoryRecord = serde_json::from_str(&line)
            .map_err(|e| Error::format("trajectory", format!("line {}: {e}", n + 1)))?;
        if canonicalize(&rec.action) != rec.state {
            return Err(Error::format(
                "trajectory",
                format!("line {}: state is not the canonical form of the action", n + 1),
            ));
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn read_trajectory_bytes(bytes: &[u8]) -> Result<Vec<TrajectoryRecord>> {
    read_trajectory(bytes)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValPoint {
    pub step: usize,
    pub ppl: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub mode: Mode,
    pub n_layers: usize,
    pub steps: usize,
    pub controller_invocations: usize,
    /// Averaged over optimizer steps, using the state each step trained with.
    pub mean_independent_layers: f64,
    pub final_independent_layers: usize,
    pub mean_trainable_params: f64,
    pub final_trainable_params: usize,
    pub final_trainable_block_params: usize,
    pub total_tied_events: usize,
    pub total_untied_events: usize,
    pub best_val_ppl: f64,
    pub best_val_step: usize,
    pub final_val_ppl: f64,
    pub final_state: TyingState,
    pub validation: Vec<ValPoint>,
    pub wall_time_secs: f64,
}

/// Everything a finished run hands back.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub summary: RunSummary,
    pub final_model: ParameterStore<f32>,
    pub best_model: ParameterStore<f32>,
    pub controller: Option<Controller>,
}

/// `-perplexity` (or `-cross_entropy`) of the model on `batch`.
pub fn reward(
    store: &ParameterStore<f32>,
    batch: &Batch,
    kind: RewardKind,
    ceiling: f64,
) -> Result<f64> {
    let ce = store.loss(batch)?;
    Ok(match kind {
        RewardKind::NegPpl => -perplexity_from_loss(ce, ceiling),
        RewardKind::NegLogPpl => -ce,
    })
}

/// Mean perplexity over `batches`.
pub fn evaluate(store: &ParameterStore<f32>, batches: &[Batch], ceiling: f64) -> Result<f64> {
    if batches.is_empty() {
        return Err(Error::InsufficientData("no validation batches".into()));
    }
    let mut total = 0.0;
    for b in batches {
        total += perplexity_from_loss(store.loss(b)?, ceiling);
    }
    Ok(total / batches.len() as f64)
}

/// Steps needed to see the training stream once.
pub fn steps_per_epoch(corpus: &Corpus, batch_size: usize, context: usize) -> usize {
    let per_step = (batch_size * context).max(1);
    corpus.train_tokens().len().div_ceil(per_step).max(1)
}

fn start_mode(cfg: &TrainerConfig, n_layers: usize) -> Result<StartMode> {
    Ok(match cfg.mode {
        Mode::Conventional => StartMode::Static(TyingState::identity(n_layers)),
        Mode::FixedPattern => {
            let spec = cfg.pattern.as_ref().expect("validated");
            StartMode::Static(pattern_state(spec, n_layers)?)
        }
        Mode::Dynamic | Mode::Replay if cfg.all_trainable_init => StartMode::AllTrainable,
        Mode::Dynamic | Mode::Replay => StartMode::FrozenTail,
    })
}

/// Runs training to completion.
///
/// `replay` must be given exactly when `cfg.mode` is [`Mode::Replay`]. Batch
/// sampling uses `cfg.seed`, the controller's exploration `cfg.seed + 1`
/// and its network initialization `cfg.seed + 2`.
pub fn train(
    cfg: &TrainerConfig,
    model_cfg: &ModelConfig,
    corpus: &Corpus,
    replay: Option<&ReplaySchedule>,
    sink: &mut dyn TrajectorySink,
) -> Result<RunOutcome> {
    cfg.validate()?;
    model_cfg.validate()?;
    let n_layers = model_cfg.n_layers;
    let context = model_cfg.context_length;
    corpus.ensure_window(context)?;
    match (cfg.mode, replay) {
        (Mode::Replay, None) => {
            return Err(Error::config("trainer.mode", "replay mode needs a trajectory"))
        }
        (Mode::Replay, Some(r)) => {
            if let Some(e) = r.entries.iter().find(|e| e.state.n_layers() != n_layers) {
                return Err(Error::LengthMismatch {
                    expected: n_layers,
                    actual: e.state.n_layers(),
                    context: "replayed state vs model layers",
                });
            }
        }
        (_, Some(_)) => {
            return Err(Error::config("trainer.mode", "a trajectory was given outside replay mode"))
        }
        _ => {}
    }

    let started = Instant::now();
    let mut val_batches = corpus.validation_batches(cfg.batch_size, context)?;
    if let Some(m) = cfg.max_val_batches {
        val_batches.truncate(m);
    }
    let eval_every = cfg
        .eval_every
        .unwrap_or_else(|| steps_per_epoch(corpus, cfg.batch_size, context));

    let mut store = ParameterStore::<f32>::init_with(model_cfg, start_mode(cfg, n_layers)?)?;
    let mut controller = match cfg.mode {
        Mode::Dynamic => Some(Controller::new(
            n_layers,
            cfg.controller,
            cfg.seed.wrapping_add(2),
        )?),
        _ => None,
    };
    let mut data_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut policy_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let opts = cfg.transition_options();
    let replay_entries = replay.map(|r| r.entries.as_slice()).unwrap_or(&[]);
    let mut next_replay = 0;

    let mut sum_independent = 0usize;
    let mut sum_trainable = 0usize;
    let mut invocations = 0usize;
    let (mut tied_total, mut untied_total) = (0usize, 0usize);
    let mut validation = Vec::new();
    let mut best: Option<(f64, usize, ParameterStore<f32>)> = None;

    for step in 1..=cfg.steps {
        let batch = corpus.sample_batch(cfg.batch_size, context, &mut data_rng)?;
        let (loss, grads) = store.loss_and_grads(&batch)?;
        if !loss.is_finite() || !grads.all_finite() {
            return Err(Error::NonFinite(format!(
                "training loss {loss} at step {step} with tying state {:?}",
                store.tying().as_slice()
            )));
        }
        store.optimizer_step(&grads, cfg.learning_rate)?;
        sink.observe(StepEvent::OptimizerStep(step), &store)?;
        sum_independent += count_independent(store.tying());
        sum_trainable += store.trainable_param_count();

        let transition = match cfg.mode {
            Mode::Dynamic if step % cfg.controller_period == 0 => true,
            Mode::Replay => replay_entries
                .get(next_replay)
                .is_some_and(|e| e.step == step),
            _ => false,
        };
        if transition {
            let s = store.tying().clone();
            let (action, target_state) = match controller.as_ref() {
                Some(c) => {
                    let a = c.act(&s, &mut policy_rng)?;
                    let s_next = canonicalize(&a);
                    (a, s_next)
                }
                None => {
                    let st = replay_entries[next_replay].state.clone();
                    next_replay += 1;
                    (st.to_action(), st)
                }
            };
            let diff = store.apply_state(&target_state, opts)?;
            sink.observe(StepEvent::Transition(step), &store)?;
            tied_total += diff.tied_events.len();
            untied_total += diff.untied_events.len();

            let reward_batch = corpus.sample_batch(cfg.batch_size, context, &mut data_rng)?;
            let r = reward(&store, &reward_batch, cfg.reward, cfg.ppl_ceiling)?;

            let (mut predicted_q, mut target, mut q_loss, mut epsilon) = (None, None, None, None);
            if let Some(c) = controller.as_mut() {
                epsilon = Some(c.cfg.epsilon);
                let pred = c.net.q_value(&s, &action)?;
                predicted_q = Some(pred);
                match bellman_target(r, &c.cfg, &c.net, &target_state) {
                    Ok(t) => {
                        target = Some(t);
                        match c.q_update(&s, &action, t, c.cfg.learning_rate) {
                            Ok(l) => q_loss = Some(l),
                            Err(e) => log::warn!("step {step}: skipped controller update: {e}"),
                        }
                    }
                    Err(e) => log::warn!("step {step}: skipped controller update: {e}"),
                }
                c.decay_epsilon();
            }
            invocations += 1;

            let rec = TrajectoryRecord {
                step,
                state: target_state.clone(),
                action,
                reward: r,
                predicted_q,
                bellman_target: target,
                q_loss,
                epsilon,
                tied_count: diff.tied_events.len(),
                untied_count: diff.untied_events.len(),
                independent_layers: count_independent(&target_state),
                trainable_params: store.trainable_param_count(),
                train_ppl: perplexity_from_loss(loss, cfg.ppl_ceiling),
                wall_time: cfg
                    .record_wall_time
                    .then(|| started.elapsed().as_secs_f64()),
            };
            sink.record(&rec)?;
        }

        if step % eval_every == 0 || step == cfg.steps {
            let ppl = evaluate(&store, &val_batches, cfg.ppl_ceiling)?;
            log::info!("step {step}: validation ppl {ppl:.3}, train ppl {:.3}", loss.exp());
            validation.push(ValPoint { step, ppl });
            if best.as_ref().is_none_or(|(b, _, _)| ppl < *b) {
                best = Some((ppl, step, store.clone()));
            }
        }
    }

    let (best_val_ppl, best_val_step, best_model) = best.expect("at least one evaluation");
    let final_val_ppl = validation.last().expect("evaluated at the last step").ppl;
    let summary = RunSummary {
        mode: cfg.mode,
        n_layers,
        steps: cfg.steps,
        controller_invocations: invocations,
        mean_independent_layers: sum_independent as f64 / cfg.steps as f64,
        final_independent_layers: count_independent(store.tying()),
        mean_trainable_params: sum_trainable as f64 / cfg.steps as f64,
        final_trainable_params: store.trainable_param_count(),
        final_trainable_block_params: store.trainable_block_param_count(),
        total_tied_events: tied_total,
        total_untied_events: untied_total,
        best_val_ppl,
        best_val_step,
        final_val_ppl,
        final_state: store.tying().clone(),
        validation,
        wall_time_secs: started.elapsed().as_secs_f64(),
    };
    Ok(RunOutcome {
        summary,
        final_model: store,
        best_model,
        controller,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_model() -> ModelConfig {
        ModelConfig {
            n_layers: 4,
            d_model: 16,
            n_heads: 2,
            d_ffn: 32,
            vocab_size: 256,
            context_length: 8,
            seed: 3,
            tie_embedding_to_head: false,
        }
    }

    fn corpus() -> Corpus {
        let text: Vec<u8> = b"the quick brown fox jumps over the lazy dog. "
            .iter()
            .cycle()
            .take(4000)
            .copied()
            .collect();
        Corpus::from_bytes(text, 0.1).unwrap()
    }

    fn cfg(mode: Mode) -> TrainerConfig {
        TrainerConfig {
            steps: 30,
            controller_period: 5,
            batch_size: 4,
            learning_rate: 1e-3,
            mode,
            eval_every: Some(10),
            max_val_batches: Some(2),
            ..TrainerConfig::default()
        }
    }

    #[test]
    fn config_invariants() {
        let mut c = cfg(Mode::Dynamic);
        c.controller_period = 0;
        assert!(c.validate().is_err());
        let mut c = cfg(Mode::Dynamic);
        c.steps = 4;
        assert!(c.validate().is_err());
        assert!(cfg(Mode::FixedPattern).validate().is_err());
        assert!("replay".parse::<Mode>().is_ok());
        assert!("sideways".parse::<Mode>().is_err());
    }

    #[test]
    fn dynamic_invocation_count_and_steps() {
        let mut log = Vec::new();
        let out = train(&cfg(Mode::Dynamic), &tiny_model(), &corpus(), None, &mut log).unwrap();
        assert_eq!(out.summary.controller_invocations, 6);
        let steps: Vec<usize> = log.iter().map(|r| r.step).collect();
        assert_eq!(steps, vec![5, 10, 15, 20, 25, 30]);
        for r in &log {
            assert_eq!(canonicalize(&r.action), r.state);
            assert!(r.epsilon.is_some() && r.q_loss.is_some());
        }
        assert!(out.summary.best_val_ppl <= out.summary.final_val_ppl);
    }

    #[test]
    fn conventional_has_no_invocations() {
        let mut log = Vec::new();
        let out = train(&cfg(Mode::Conventional), &tiny_model(), &corpus(), None, &mut log).unwrap();
        assert!(log.is_empty());
        assert_eq!(out.summary.mean_independent_layers, 4.0);
        assert_eq!(out.summary.final_state, TyingState::identity(4));
    }

    #[test]
    fn replay_requires_schedule() {
        let r = train(&cfg(Mode::Replay), &tiny_model(), &corpus(), None, &mut Vec::new());
        assert!(matches!(r, Err(Error::Config { .. })));
    }

    #[test]
    fn reward_definitions() {
        let store = ParameterStore::<f32>::init(&tiny_model()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = corpus().sample_batch(2, 8, &mut rng).unwrap();
        let ce = store.loss(&b).unwrap();
        let r = reward(&store, &b, RewardKind::NegLogPpl, 1e9).unwrap();
        assert_eq!(r, -ce);
        let r = reward(&store, &b, RewardKind::NegPpl, 1e9).unwrap();
        assert_eq!(r, -ce.exp());
    }

    #[test]
    fn jsonl_round_trip() {
        let mut log = Vec::new();
        train(&cfg(Mode::Dynamic), &tiny_model(), &corpus(), None, &mut log).unwrap();
        let mut sink = JsonlSink::new(Vec::new());
        for r in &log {
            sink.record(r).unwrap();
        }
        let bytes = sink.into_inner();
        assert_eq!(read_trajectory_bytes(&bytes).unwrap(), log);
        assert!(read_trajectory_bytes(b"{\"step\":1}\n").is_err());
    }
}
