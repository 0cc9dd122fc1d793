//! Post-hoc analysis of finished runs as plot-ready CSV and JSON.
//!
//! File schemas (version 1):
//!
//! | report  | file                    | content |
//! |---------|-------------------------|---------|
//! | map     | `<run>.map.json`        | `{"schema":1,"n_layers","state","edges":[[i,s_i],..]}` |
//! | events  | `<run>.events.csv`      | `step,tied,untied`, one row per trajectory record |
//! | hist    | `<run>.hist.csv`        | `layer,trainable_steps`, one row per layer |
//! | corr    | `<run>.corr.json`       | `{"schema":1,"layers":[..],"matrix":[[..],..]}` |
//! | summary | `<run>.summary.json`    | run summary plus trajectory aggregates |
//!
//! FFN weights for correlations are flattened as `w_up` (row-major
//! `d_model x d_ffn`) followed by `w_down` (row-major `d_ffn x d_model`);
//! biases are excluded.

use std::fs;
use std::io::BufReader;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, RunLayout};
use crate::error::{Error, Result};
use crate::model::{checkpoint, ParameterStore, Scalar};
use crate::trainer::{read_trajectory, RunSummary, TrajectoryRecord};
use crate::tying::{count_independent, TyingState};

pub const SCHEMA_VERSION: u32 = 1;

/// Edges `i -> s[i]`; self-loops mark group representatives.
pub fn replication_map(state: &TyingState) -> Vec<(usize, usize)> {
    state.as_slice().iter().copied().enumerate().collect()
}

pub fn self_loops(edges: &[(usize, usize)]) -> usize {
    edges.iter().filter(|(a, b)| a == b).count()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventCurves {
    pub steps: Vec<usize>,
    pub tied: Vec<usize>,
    pub untied: Vec<usize>,
}

impl EventCurves {
    pub fn totals(&self) -> (usize, usize) {
        (self.tied.iter().sum(), self.untied.iter().sum())
    }
}

pub fn event_curves(records: &[TrajectoryRecord]) -> EventCurves {
    EventCurves {
        steps: records.iter().map(|r| r.step).collect(),
        tied: records.iter().map(|r| r.tied_count).collect(),
        untied: records.iter().map(|r| r.untied_count).collect(),
    }
}

/// Per layer, the number of steps in which it was its own representative;
/// each record stands for `period` steps.
pub fn trainability_histogram(records: &[TrajectoryRecord], n_layers: usize, period: usize) -> Result<Vec<usize>> {
    let mut hist = vec![0; n_layers];
    for r in records {
        if r.state.n_layers() != n_layers {
            return Err(Error::LengthMismatch {
                expected: n_layers,
                actual: r.state.n_layers(),
                context: "trajectory state vs histogram width",
            });
        }
        for (i, h) in hist.iter_mut().enumerate() {
            if r.state.is_independent(i) {
                *h += period;
            }
        }
    }
    Ok(hist)
}

/// Aggregates over trajectory records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySummary {
    pub records: usize,
    pub mean_independent_layers: f64,
    pub final_independent_layers: usize,
    pub mean_trainable_params: f64,
    pub final_trainable_params: usize,
    pub total_tied_events: usize,
    pub total_untied_events: usize,
}

pub fn run_summary(records: &[TrajectoryRecord]) -> Result<TrajectorySummary> {
    let last = records
        .last()
        .ok_or_else(|| Error::InsufficientData("empty trajectory".into()))?;
    let n = records.len() as f64;
    Ok(TrajectorySummary {
        records: records.len(),
        mean_independent_layers: records.iter().map(|r| r.independent_layers as f64).sum::<f64>() / n,
        final_independent_layers: last.independent_layers,
        mean_trainable_params: records.iter().map(|r| r.trainable_params as f64).sum::<f64>() / n,
        final_trainable_params: last.trainable_params,
        total_tied_events: records.iter().map(|r| r.tied_count).sum(),
        total_untied_events: records.iter().map(|r| r.untied_count).sum(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationMatrix {
    pub schema: u32,
    /// Independent layers, ascending.
    pub layers: Vec<usize>,
    pub matrix: Vec<Vec<f64>>,
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    (sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0)
}

/// Pearson correlations between the FFN weights of every pair of
/// independent layers.
pub fn ffn_correlation<T: Scalar>(store: &ParameterStore<T>) -> Result<CorrelationMatrix> {
    let state = store.tying();
    let layers: Vec<usize> = (0..state.n_layers()).filter(|&i| state.is_independent(i)).collect();
    if layers.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "correlation needs at least 2 independent layers, found {}",
            layers.len()
        )));
    }
    let layout = store.layer_layout();
    let vectors: Vec<Vec<f64>> = layers
        .iter()
        .map(|&i| {
            let (up, down) = layout.ffn_weights(store.layer_params(i));
            up.iter().chain(down).map(|x| x.as_f64()).collect()
        })
        .collect();
    for (v, &l) in vectors.iter().zip(&layers) {
        let first = v[0];
        if v.iter().all(|&x| x == first) {
            return Err(Error::InvalidInput(format!("layer {l} FFN weights have zero variance")));
        }
    }
    let m = layers.len();
    let mut matrix = vec![vec![0.0; m]; m];
    for i in 0..m {
        matrix[i][i] = 1.0;
        for j in i + 1..m {
            let c = pearson(&vectors[i], &vectors[j]);
            matrix[i][j] = c;
            matrix[j][i] = c;
        }
    }
    Ok(CorrelationMatrix {
        schema: SCHEMA_VERSION,
        layers,
        matrix,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportKind {
    Map,
    Events,
    Hist,
    Corr,
    Summary,
}

impl ReportKind {
    pub const ALL: [ReportKind; 5] = [
        ReportKind::Map,
        ReportKind::Events,
        ReportKind::Hist,
        ReportKind::Corr,
        ReportKind::Summary,
    ];

    /// Parses one kind, or `all`.
    pub fn parse_list(name: &str) -> Result<Vec<ReportKind>> {
        Ok(match name {
            "map" => vec![ReportKind::Map],
            "events" => vec![ReportKind::Events],
            "hist" => vec![ReportKind::Hist],
            "corr" => vec![ReportKind::Corr],
            "summary" => vec![ReportKind::Summary],
            "all" => Self::ALL.to_vec(),
            other => {
                return Err(Error::InvalidInput(format!(
                    "unknown report {other:?} (expected map, events, hist, corr, summary or all)"
                )))
            }
        })
    }
}

#[derive(Serialize)]
struct MapFile<'a> {
    schema: u32,
    n_layers: usize,
    state: &'a TyingState,
    edges: Vec<(usize, usize)>,
}

#[derive(Serialize)]
struct SummaryFile<'a> {
    schema: u32,
    run: &'a RunSummary,
    trajectory: Option<TrajectorySummary>,
}

#[derive(Serialize)]
struct EventRow {
    step: usize,
    tied: usize,
    untied: usize,
}

#[derive(Serialize)]
struct HistRow {
    layer: usize,
    trainable_steps: usize,
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &std::path::Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_slice(&bytes)?)
}

/// Header is written even when there are no rows.
fn write_csv<R: Serialize>(
    path: &std::path::Path,
    header: &[&str],
    rows: impl IntoIterator<Item = R>,
) -> Result<()> {
    let csv_err = |e: csv::Error| Error::format("csv", e.to_string());
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(csv_err)?;
    w.write_record(header).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn write_json<S: Serialize>(path: &std::path::Path, value: &S) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn load_trajectory(layout: &RunLayout) -> Result<Vec<TrajectoryRecord>> {
    let path = layout.trajectory();
    let file = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
    read_trajectory(BufReader::new(file))
}

/// Writes the requested reports into the run directory and returns their
/// paths. Every file is a pure function of the run's saved artifacts. When
/// several kinds are requested, `corr` is skipped for runs that end with
/// fewer than two independent layers.
pub fn generate(layout: &RunLayout, kinds: &[ReportKind]) -> Result<Vec<PathBuf>> {
    let cfg: RunConfig = read_json(&layout.config())?;
    let summary: RunSummary = read_json(&layout.summary())?;
    let n_layers = cfg.model.n_layers;
    let mut written = Vec::new();
    for &kind in kinds {
        let path = match kind {
            ReportKind::Map => {
                let path = layout.report("map", "json");
                write_json(
                    &path,
                    &MapFile {
                        schema: SCHEMA_VERSION,
                        n_layers,
                        state: &summary.final_state,
                        edges: replication_map(&summary.final_state),
                    },
                )?;
                path
            }
            ReportKind::Events => {
                let curves = event_curves(&load_trajectory(layout)?);
                let path = layout.report("events", "csv");
                let rows = (0..curves.steps.len()).map(|i| EventRow {
                    step: curves.steps[i],
                    tied: curves.tied[i],
                    untied: curves.untied[i],
                });
                write_csv(&path, &["step", "tied", "untied"], rows)?;
                path
            }
            ReportKind::Hist => {
                let hist = trainability_histogram(
                    &load_trajectory(layout)?,
                    n_layers,
                    cfg.trainer.controller_period,
                )?;
                let path = layout.report("hist", "csv");
                let rows = hist.iter().enumerate().map(|(layer, &c)| HistRow {
                    layer,
                    trainable_steps: c,
                });
                write_csv(&path, &["layer", "trainable_steps"], rows)?;
                path
            }
            ReportKind::Corr => {
                let (store, _) = checkpoint::load::<f32>(&layout.checkpoints(), "final")?;
                let matrix = match ffn_correlation(&store) {
                    // Several kinds requested: skip what this run cannot support.
                    Err(Error::InsufficientData(msg)) if kinds.len() > 1 => {
                        log::warn!("skipping corr report: {msg}");
                        continue;
                    }
                    other => other?,
                };
                let path = layout.report("corr", "json");
                write_json(&path, &matrix)?;
                path
            }
            ReportKind::Summary => {
                let records = load_trajectory(layout)?;
                let trajectory = if records.is_empty() {
                    None
                } else {
                    Some(run_summary(&records)?)
                };
                let path = layout.report("summary", "json");
                write_json(
                    &path,
                    &SummaryFile {
                        schema: SCHEMA_VERSION,
                        run: &summary,
                        trajectory,
                    },
                )?;
                path
            }
        };
        written.push(path);
    }
    Ok(written)
}

/// Counts the independent layers implied by each record's state; used to
/// cross-check logged counts.
pub fn recount_independent(records: &[TrajectoryRecord]) -> Vec<usize> {
    records.iter().map(|r| count_independent(&r.state)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tying::ActionVector;

    fn rec(step: usize, s: &[usize], tied: usize, untied: usize) -> TrajectoryRecord {
        let state = TyingState::new(s.to_vec()).unwrap();
        TrajectoryRecord {
            step,
            action: ActionVector::new(s.to_vec()).unwrap(),
            independent_layers: count_independent(&state),
            state,
            reward: -1.0,
            predicted_q: None,
            bellman_target: None,
            q_loss: None,
            epsilon: None,
            tied_count: tied,
            untied_count: untied,
            trainable_params: 10,
            train_ppl: 2.0,
            wall_time: None,
        }
    }

    #[test]
    fn map_example() {
        let s = TyingState::new(vec![0, 1, 1, 1]).unwrap();
        let edges = replication_map(&s);
        assert_eq!(edges, vec![(0, 0), (1, 1), (2, 1), (3, 1)]);
        assert_eq!(self_loops(&edges), 2);
        assert_eq!(self_loops(&replication_map(&TyingState::identity(5))), 5);
    }

    #[test]
    fn histogram_identities() {
        let records = vec![rec(15, &[0, 0, 2], 2, 1), rec(30, &[0, 1, 1], 1, 1), rec(45, &[0, 1, 2], 0, 2)];
        let hist = trainability_histogram(&records, 3, 15).unwrap();
        assert_eq!(hist[0], 45);
        let total: usize = records.iter().map(|r| r.independent_layers * 15).sum();
        assert_eq!(hist.iter().sum::<usize>(), total);
        assert!(trainability_histogram(&records, 4, 15).is_err());
    }

    #[test]
    fn summary_and_curves() {
        let records = vec![rec(15, &[0, 0, 2], 2, 1), rec(30, &[0, 1, 1], 1, 1)];
        let s = run_summary(&records).unwrap();
        let curves = event_curves(&records);
        assert_eq!(curves.totals(), (s.total_tied_events, s.total_untied_events));
        assert_eq!(s.mean_independent_layers, 2.0);
        let one = run_summary(&records[..1]).unwrap();
        assert_eq!(one.mean_independent_layers, one.final_independent_layers as f64);
        assert!(run_summary(&[]).is_err());
        assert_eq!(ReportKind::parse_list("all").unwrap().len(), 5);
        assert!(ReportKind::parse_list("pie").is_err());
    }
}
