//! Federated training with equal-weight FedAvg and gradient capture.
//!
//! Every round each client takes one local step on one window (batch 1). In
//! round `t` (1-based) a client trains on points `[t-1, t-1+W)` and predicts
//! the grid cell of point `t-1+W`, so consecutive rounds slide the window by
//! one point and every point is seen in up to `W` rounds.

use std::io::{BufRead, Write};

use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::{GeoPoint, GridIndex, StampedPoint};
use crate::model::{loss, one_hot, softmax, GradVector, Model, ParamVector};
use crate::rng::{stream_rng, Stream};

/// Converts between geographic windows and model inputs / labels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Encoder {
    pub grid: GridIndex,
    pub window: usize,
}

impl Encoder {
    pub fn encode(&self, points: &[GeoPoint]) -> Vec<f64> {
        points
            .iter()
            .flat_map(|p| {
                let (a, b) = self.grid.bbox.normalize(*p);
                [a, b]
            })
            .collect()
    }

    pub fn decode(&self, x: &[f64]) -> Vec<GeoPoint> {
        x.chunks_exact(2)
            .map(|c| self.grid.bbox.denormalize(c[0], c[1]))
            .collect()
    }

    pub fn label(&self, p: GeoPoint) -> usize {
        self.grid.cell_of(p)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Client {
    pub user_id: String,
    pub points: Vec<StampedPoint>,
}

impl Client {
    /// Index of the first window point used in `round` (1-based rounds).
    pub fn window_start(round: usize) -> usize {
        round - 1
    }

    /// The `W` window points plus the label point for `round`, or `None` once
    /// the trajectory is exhausted.
    pub fn sample_points(&self, round: usize, window: usize) -> Option<Vec<GeoPoint>> {
        let s = Self::window_start(round);
        self.points
            .get(s..s + window + 1)
            .map(|pts| pts.iter().map(|sp| sp.point).collect())
    }
}

/// One captured client update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientEntry {
    pub client: usize,
    pub user_id: String,
    /// Trajectory index of the first window point.
    pub point_index: usize,
    /// The gradient the server observes.
    pub gradient: GradVector,
    /// Normalized window the gradient was computed on (after any obfuscation).
    pub input: Vec<f64>,
    /// Label cell the gradient was computed with.
    pub label: usize,
    /// Clean window points followed by the clean label point.
    pub true_points: Vec<GeoPoint>,
    pub true_label: usize,
    /// Timestamps of `true_points`.
    pub times: Vec<i64>,
    pub update_norm: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundLog {
    pub round: usize,
    /// Global parameters the clients started this round from.
    pub params: ParamVector,
    pub epsilon: Option<f64>,
    pub entries: Vec<ClientEntry>,
}

impl RoundLog {
    pub fn mean_loss(&self) -> f64 {
        if self.entries.is_empty() {
            return f64::NAN;
        }
        self.entries.iter().map(|e| e.loss).sum::<f64>() / self.entries.len() as f64
    }
}

/// Hooks a defense uses to obfuscate training data or gradients.
pub trait TrainingHooks: Sync {
    fn begin_round(&mut self, _round: usize) -> Result<()> {
        Ok(())
    }

    /// Obfuscates the `W + 1` sample points of one client in place.
    fn perturb_sample(
        &self,
        _client: usize,
        _round: usize,
        _points: &mut [GeoPoint],
        _rng: &mut ChaCha8Rng,
    ) -> Result<()> {
        Ok(())
    }

    fn perturb_gradient(&self, _round: usize, _g: &mut GradVector, _rng: &mut ChaCha8Rng) {}

    fn round_epsilon(&self) -> Option<f64> {
        None
    }

    fn end_round(&mut self, _log: &RoundLog) -> Result<()> {
        Ok(())
    }
}

pub struct NoDefense;

impl TrainingHooks for NoDefense {}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FedConfig {
    pub rounds: usize,
    pub lr: f64,
    pub seed: u64,
}

/// One SGD step: returns the updated parameters and the gradient.
pub fn local_update(
    model: &dyn Model,
    params: &ParamVector,
    x: &[f64],
    label: usize,
    lr: f64,
) -> Result<(ParamVector, GradVector)> {
    let g = model.param_grad(params, x, &one_hot(label, model.classes()))?;
    let new = params.iter().zip(g.iter()).map(|(p, d)| p - lr * d).collect::<Vec<_>>();
    Ok((ParamVector(new), g))
}

/// Unweighted mean of client parameter vectors.
pub fn aggregate(updates: &[ParamVector]) -> Result<ParamVector> {
    let first = updates.first().ok_or(Error::Empty("aggregate updates"))?;
    let n = first.len();
    let mut sum = vec![0.0; n];
    for u in updates {
        if u.len() != n {
            return Err(Error::Shape { expected: n, got: u.len() });
        }
        for (s, v) in sum.iter_mut().zip(u.iter()) {
            *s += v;
        }
    }
    let k = updates.len() as f64;
    Ok(ParamVector(sum.into_iter().map(|s| s / k).collect()))
}

/// Runs `cfg.rounds` rounds of FedAvg from `init`, calling `hooks` around
/// every round. Returns the round logs and the final global parameters.
pub fn run_training(
    model: &dyn Model,
    encoder: &Encoder,
    clients: &[Client],
    init: ParamVector,
    cfg: &FedConfig,
    hooks: &mut dyn TrainingHooks,
) -> Result<(Vec<RoundLog>, ParamVector)> {
    if cfg.rounds < 1 {
        return Err(Error::invalid("need at least one round"));
    }
    let mut params = init;
    let mut logs = Vec::with_capacity(cfg.rounds);
    for round in 1..=cfg.rounds {
        hooks.begin_round(round)?;
        let hooks_ref: &dyn TrainingHooks = hooks;
        let results: Vec<Option<(ParamVector, ClientEntry)>> = clients
            .par_iter()
            .enumerate()
            .map(|(ci, client)| client_round(model, encoder, ci, client, &params, round, cfg, hooks_ref))
            .collect::<Result<_>>()?;
        let (updates, entries): (Vec<_>, Vec<_>) = results.into_iter().flatten().unzip();
        let log = RoundLog {
            round,
            params: params.clone(),
            epsilon: hooks.round_epsilon(),
            entries,
        };
        if !updates.is_empty() {
            params = aggregate(&updates)?;
        }
        hooks.end_round(&log)?;
        logs.push(log);
    }
    Ok((logs, params))
}

#[allow(clippy::too_many_arguments)]
fn client_round(
    model: &dyn Model,
    encoder: &Encoder,
    ci: usize,
    client: &Client,
    params: &ParamVector,
    round: usize,
    cfg: &FedConfig,
    hooks: &dyn TrainingHooks,
) -> Result<Option<(ParamVector, ClientEntry)>> {
    let w = encoder.window;
    let Some(true_points) = client.sample_points(round, w) else {
        log::debug!("client {} has no window for round {round}; skipping", client.user_id);
        return Ok(None);
    };
    let start = Client::window_start(round);
    let mut rng = stream_rng(cfg.seed, Stream::Defense, ci as u64, round as u64);
    let mut points = true_points.clone();
    hooks.perturb_sample(ci, round, &mut points, &mut rng)?;
    let input = encoder.encode(&points[..w]);
    let label = encoder.label(points[w]);

    let y = one_hot(label, model.classes());
    let sample_loss = loss(&model.forward(params, &input)?, &y)?;
    let mut g = model.param_grad(params, &input, &y)?;
    hooks.perturb_gradient(round, &mut g, &mut rng);
    let new: Vec<f64> = params.iter().zip(g.iter()).map(|(p, d)| p - cfg.lr * d).collect();
    let entry = ClientEntry {
        client: ci,
        user_id: client.user_id.clone(),
        point_index: start,
        update_norm: cfg.lr * g.norm(),
        gradient: g,
        input,
        label,
        true_label: encoder.label(true_points[w]),
        true_points,
        times: client.points[start..start + w + 1].iter().map(|sp| sp.t).collect(),
        loss: sample_loss,
    };
    Ok(Some((ParamVector(new), entry)))
}

/// Top-`k` predicted cells for every clean window of every client under
/// `params`, paired with the true next cell.
pub fn predict_all(
    model: &dyn Model,
    encoder: &Encoder,
    clients: &[Client],
    params: &ParamVector,
    k: usize,
) -> Result<Vec<(Vec<usize>, usize)>> {
    let w = encoder.window;
    let mut out = Vec::new();
    for c in clients {
        for s in 0..c.points.len().saturating_sub(w) {
            let pts: Vec<GeoPoint> = c.points[s..=s + w].iter().map(|sp| sp.point).collect();
            let probs = softmax(&model.forward(params, &encoder.encode(&pts[..w]))?);
            let mut order: Vec<usize> = (0..probs.len()).collect();
            order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
            order.truncate(k);
            out.push((order, encoder.label(pts[w])));
        }
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum LogLine {
    Global {
        round: usize,
        params: ParamVector,
        epsilon: Option<f64>,
    },
    Update {
        round: usize,
        #[serde(flatten)]
        entry: ClientEntry,
    },
}

/// Writes a round as JSON lines: one `global` record carrying the round's
/// parameters, then one `update` record per client.
pub fn write_round_log(w: &mut impl Write, log: &RoundLog) -> Result<()> {
    let g = LogLine::Global {
        round: log.round,
        params: log.params.clone(),
        epsilon: log.epsilon,
    };
    serde_json::to_writer(&mut *w, &g)?;
    w.write_all(b"\n")?;
    for e in &log.entries {
        serde_json::to_writer(&mut *w, &LogLine::Update {
            round: log.round,
            entry: e.clone(),
        })?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_round_logs(r: impl BufRead) -> Result<Vec<RoundLog>> {
    let mut logs: Vec<RoundLog> = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<LogLine>(&line)? {
            LogLine::Global { round, params, epsilon } => logs.push(RoundLog {
                round,
                params,
                epsilon,
                entries: Vec::new(),
            }),
            LogLine::Update { round, entry } => match logs.last_mut() {
                Some(l) if l.round == round => l.entries.push(entry),
                _ => {
                    return Err(Error::Format(format!(
                        "round log line {}: update for round {round} without its global record",
                        i + 1
                    )))
                }
            },
        }
    }
    Ok(logs)
}
