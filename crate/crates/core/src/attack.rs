//! ST-GIA: gradient matching against captured client updates, with
//! spatiotemporal initialization, road-network mapping and calibration of
//! repeated recoveries of the same point.
//!
//! With the sliding schedule every trajectory point sits in up to `W`
//! consecutive windows, so the attacker recovers it several times. The
//! attacker's estimate of a point combines those recoveries according to
//! [`Calibration`], and the next round's dummy input starts from the current
//! estimates.

use std::collections::BTreeMap;
use std::io::Write;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fed::{ClientEntry, Encoder, RoundLog};
use crate::geo::{distance_m, planar_project, planar_unproject, GeoPoint};
use crate::model::{infer_label_analytic, one_hot, softmax, softmax_vjp, DummyState, Model};
use crate::network::RoadNetwork;
use crate::predictor::{
    map_to_candidate, similarity_calibrate, CandidatePredictor, CandidateSet, PredictionQuery, Stay,
};
use crate::rng::{stream_rng, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    Gaussian,
    StBased,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mapping {
    Off,
    RoadNetwork,
    /// Road mapping inside the iterations, then the final position is moved
    /// to the nearest predicted candidate.
    CandidateSet,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Calibration {
    Off,
    Mean,
    Similarity,
}

/// How the dummy label is handled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelMode {
    /// Fixed to the one-hot label read off the output-bias gradient.
    Analytic,
    /// Free logits optimized jointly with the input.
    Joint,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttackConfig {
    pub max_iters: usize,
    pub step: f64,
    pub init: InitMode,
    pub mapping: Mapping,
    pub calibration: Calibration,
    /// Stop once the dummy input moves less than this in one iteration.
    pub tol: f64,
    /// Map every window position each iteration instead of only the last.
    pub map_all_positions: bool,
    pub label: LabelMode,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self::st_gia()
    }
}

impl AttackConfig {
    pub fn st_gia() -> Self {
        AttackConfig {
            max_iters: 200,
            step: 0.1,
            init: InitMode::StBased,
            mapping: Mapping::RoadNetwork,
            calibration: Calibration::Mean,
            tol: 1e-6,
            map_all_positions: false,
            label: LabelMode::Analytic,
            seed: 0,
        }
    }

    pub fn st_gia_plus() -> Self {
        AttackConfig {
            mapping: Mapping::CandidateSet,
            calibration: Calibration::Similarity,
            ..Self::st_gia()
        }
    }

    /// Gaussian initialization, no mapping, no calibration.
    pub fn baseline() -> Self {
        AttackConfig {
            init: InitMode::Gaussian,
            mapping: Mapping::Off,
            calibration: Calibration::Off,
            ..Self::st_gia()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_iters < 1 {
            return Err(Error::invalid("attack needs at least one iteration"));
        }
        if !(self.step > 0.0 && self.step.is_finite()) {
            return Err(Error::invalid(format!("attack step must be positive, got {}", self.step)));
        }
        if !(self.tol > 0.0) {
            return Err(Error::invalid(format!("attack tolerance must be positive, got {}", self.tol)));
        }
        Ok(())
    }
}

/// Objective before a step and right after it, before any mapping.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepTrace {
    pub before: f64,
    pub after: f64,
}

/// Result of one gradient-matching run.
#[derive(Debug, Clone, PartialEq)]
pub struct Reconstruction {
    pub state: DummyState,
    pub iterations: usize,
    /// Euclidean matching distance at the returned state.
    pub final_distance: f64,
    pub converged: bool,
    pub diverged: bool,
    pub trace: Vec<StepTrace>,
}

/// Dummy state for one attack. Window positions with a prior estimate start
/// there (ST-based mode); anything else is drawn from N(0, 1).
pub fn init_dummy(
    cfg: &AttackConfig,
    encoder: &Encoder,
    classes: usize,
    prior: &[Option<GeoPoint>],
    rng: &mut impl Rng,
) -> DummyState {
    let w = encoder.window;
    let mut x = crate::model::standard_normal_vec(rng, 2 * w);
    let y = crate::model::standard_normal_vec(rng, classes);
    if cfg.init == InitMode::StBased && prior.iter().any(Option::is_some) {
        let mut last = None;
        for k in 0..w {
            let seed = prior.get(k).copied().flatten().or(last);
            if let Some(p) = seed {
                let v = encoder.encode(&[p]);
                x[2 * k..2 * k + 2].copy_from_slice(&v);
                last = Some(p);
            }
        }
    }
    DummyState { x, y }
}

/// Moves the selected window positions of a normalized input onto their
/// nearest road nodes.
pub fn map_to_road(x: &mut [f64], encoder: &Encoder, net: &RoadNetwork, all_positions: bool) -> Result<()> {
    let w = encoder.window;
    let first = if all_positions { 0 } else { w - 1 };
    for k in first..w {
        let p = encoder.decode(&x[2 * k..2 * k + 2])[0];
        let node = net.nearest_node(p, net.origin())?;
        let v = encoder.encode(&[net.point(node)?]);
        x[2 * k..2 * k + 2].copy_from_slice(&v);
    }
    Ok(())
}

/// Plain gradient descent on the squared gradient distance, starting from
/// `init`. The descent runs on the unmapped iterate: snapping it to a node
/// every step would pin it, since single steps are far shorter than the node
/// spacing. Road mapping (when enabled) is applied to the returned state.
#[allow(clippy::too_many_arguments)]
pub fn gia_round(
    model: &dyn Model,
    params: &[f64],
    g_true: &[f64],
    cfg: &AttackConfig,
    encoder: &Encoder,
    net: &RoadNetwork,
    init: DummyState,
    trace: bool,
) -> Result<Reconstruction> {
    cfg.validate()?;
    model.check_shapes(params, &init.x)?;
    if g_true.len() != model.param_len() {
        return Err(Error::Shape {
            expected: model.param_len(),
            got: g_true.len(),
        });
    }
    let fixed_label = match cfg.label {
        LabelMode::Analytic => Some(one_hot(infer_label_analytic(model, g_true), model.classes())),
        LabelMode::Joint => None,
    };
    let mapped = cfg.mapping != Mapping::Off;
    let label_of = |y: &[f64]| fixed_label.clone().unwrap_or_else(|| softmax(y));

    let mut state = init;
    let mut out = Reconstruction {
        state: state.clone(),
        iterations: cfg.max_iters,
        final_distance: f64::NAN,
        converged: false,
        diverged: false,
        trace: Vec::new(),
    };
    for i in 1..=cfg.max_iters {
        let q = label_of(&state.y);
        let m = model.matching_grad_unchecked(params, &state.x, &q, g_true);
        if !m.value.is_finite() || m.dx.iter().any(|v| !v.is_finite()) {
            out.diverged = true;
            out.iterations = i;
            break;
        }
        let mut next = state.clone();
        for (xv, d) in next.x.iter_mut().zip(&m.dx) {
            *xv -= cfg.step * d;
        }
        if fixed_label.is_none() {
            for (yv, d) in next.y.iter_mut().zip(softmax_vjp(&q, &m.dq)) {
                *yv -= cfg.step * d;
            }
        }
        if trace {
            let after = model
                .matching_grad_unchecked(params, &next.x, &label_of(&next.y), g_true)
                .value;
            out.trace.push(StepTrace { before: m.value, after });
        }
        let moved = next
            .x
            .iter()
            .zip(&state.x)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        state = next;
        if moved < cfg.tol {
            out.converged = true;
            out.iterations = i;
            break;
        }
    }
    if state.x.iter().all(|v| v.is_finite()) {
        out.state = state;
    } else {
        out.diverged = true;
    }
    out.final_distance = model
        .matching_grad_unchecked(params, &out.state.x, &label_of(&out.state.y), g_true)
        .value
        .sqrt();
    if mapped {
        map_to_road(&mut out.state.x, encoder, net, cfg.map_all_positions)?;
    }
    Ok(out)
}

/// Mean of the most recent `ts` reconstructions of one point, taken in the
/// projected plane about `origin`.
pub fn calibrate_mean(recoveries: &[GeoPoint], ts: usize, origin: GeoPoint) -> Result<GeoPoint> {
    if recoveries.is_empty() {
        return Err(Error::Empty("recoveries"));
    }
    let used = &recoveries[recoveries.len().saturating_sub(ts.max(1))..];
    let (mut sx, mut sy) = (0.0, 0.0);
    for p in used {
        let (x, y) = planar_project(*p, origin);
        sx += x;
        sy += y;
    }
    let n = used.len() as f64;
    Ok(planar_unproject((sx / n, sy / n), origin))
}

/// One attacked client update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackRecord {
    pub round: usize,
    pub client: usize,
    pub user_id: String,
    /// Trajectory index of the first window point.
    pub point_index: usize,
    /// This round's reconstruction of the window.
    pub window: Vec<GeoPoint>,
    /// Attacker's estimates of the window points after this round.
    pub estimate: Vec<GeoPoint>,
    /// True (clean) window points.
    pub truth: Vec<GeoPoint>,
    pub times: Vec<i64>,
    pub iterations: usize,
    pub final_distance: f64,
    pub converged: bool,
    pub diverged: bool,
    /// Candidate cells used for the final position, if any.
    pub candidates: Vec<usize>,
}

impl AttackRecord {
    /// Reconstruction of the final window position.
    pub fn reconstructed(&self) -> GeoPoint {
        *self.window.last().expect("window is non-empty")
    }

    /// Mean distance in meters between estimates and truth over the window.
    pub fn attack_distance(&self, origin: GeoPoint) -> f64 {
        let n = self.truth.len().min(self.estimate.len());
        (0..n)
            .map(|k| distance_m(self.estimate[k], self.truth[k], origin))
            .sum::<f64>()
            / n as f64
    }
}

#[derive(Debug, Default, Clone)]
struct ClientState {
    recoveries: BTreeMap<usize, Vec<GeoPoint>>,
    estimates: BTreeMap<usize, GeoPoint>,
    times: BTreeMap<usize, i64>,
}

/// Stateful attacker over a stream of round logs.
pub struct Attacker<'a> {
    model: &'a dyn Model,
    encoder: Encoder,
    net: &'a RoadNetwork,
    cfg: AttackConfig,
    predictor: Option<&'a dyn CandidatePredictor>,
    clients: BTreeMap<usize, ClientState>,
}

impl<'a> Attacker<'a> {
    pub fn new(model: &'a dyn Model, encoder: Encoder, net: &'a RoadNetwork, cfg: AttackConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Attacker {
            model,
            encoder,
            net,
            cfg,
            predictor: None,
            clients: BTreeMap::new(),
        })
    }

    pub fn with_predictor(mut self, predictor: &'a dyn CandidatePredictor) -> Self {
        self.predictor = Some(predictor);
        self
    }

    pub fn config(&self) -> &AttackConfig {
        &self.cfg
    }

    /// Attacks every update of one round and folds the recoveries into the
    /// per-point estimates.
    pub fn attack_round(&mut self, log: &RoundLog) -> Result<Vec<AttackRecord>> {
        let outcomes: Vec<(Reconstruction, Vec<GeoPoint>, Vec<usize>)> = log
            .entries
            .par_iter()
            .map(|e| self.attack_entry(log, e))
            .collect::<Result<_>>()?;
        let w = self.encoder.window;
        let mut records = Vec::with_capacity(outcomes.len());
        for (e, (rec, window, candidates)) in log.entries.iter().zip(outcomes) {
            let st = self.clients.entry(e.client).or_default();
            for k in 0..w {
                let idx = e.point_index + k;
                st.times.insert(idx, e.times[k]);
                let list = st.recoveries.entry(idx).or_default();
                list.push(window[k]);
                let est = calibrate(list, self.cfg.calibration, w, self.net.origin())?;
                st.estimates.insert(idx, est);
            }
            let estimate = (0..w).map(|k| st.estimates[&(e.point_index + k)]).collect();
            records.push(AttackRecord {
                round: log.round,
                client: e.client,
                user_id: e.user_id.clone(),
                point_index: e.point_index,
                window,
                estimate,
                truth: e.true_points[..w].to_vec(),
                times: e.times[..w].to_vec(),
                iterations: rec.iterations,
                final_distance: rec.final_distance,
                converged: rec.converged,
                diverged: rec.diverged,
                candidates,
            });
        }
        Ok(records)
    }

    fn attack_entry(&self, log: &RoundLog, e: &ClientEntry) -> Result<(Reconstruction, Vec<GeoPoint>, Vec<usize>)> {
        let w = self.encoder.window;
        let st = self.clients.get(&e.client);
        let prior: Vec<Option<GeoPoint>> = (0..w)
            .map(|k| st.and_then(|s| s.estimates.get(&(e.point_index + k)).copied()))
            .collect();
        let mut rng = stream_rng(self.cfg.seed, Stream::Attack, e.client as u64, log.round as u64);
        let init = init_dummy(&self.cfg, &self.encoder, self.model.classes(), &prior, &mut rng);
        let rec = gia_round(
            self.model,
            &log.params,
            &e.gradient,
            &self.cfg,
            &self.encoder,
            self.net,
            init,
            false,
        )?;
        let mut window = self.encoder.decode(&rec.state.x);
        let mut candidates = Vec::new();
        if let (Mapping::CandidateSet, Some(pred), Some(st)) = (self.cfg.mapping, self.predictor, st) {
            let target = e.point_index + w - 1;
            let history: Vec<Stay> = st
                .estimates
                .range(..target)
                .map(|(i, p)| Stay {
                    cell: self.encoder.label(*p),
                    t: st.times.get(i).copied().unwrap_or_default(),
                })
                .collect();
            if !history.is_empty() {
                let query = PredictionQuery {
                    client: e.client,
                    point_index: target,
                    target_time: e.times[w - 1],
                    history: &history,
                };
                candidates = pred.predict(&query)?;
                if !candidates.is_empty() {
                    let set = CandidateSet::from_cells(&candidates, &self.encoder.grid, self.net)?;
                    window[w - 1] = map_to_candidate(window[w - 1], &set, self.net.origin());
                }
            }
        }
        Ok((rec, window, candidates))
    }

    /// Current estimate of every recovered point, per client.
    pub fn trajectories(&self) -> BTreeMap<usize, Vec<(usize, GeoPoint)>> {
        self.clients
            .iter()
            .map(|(c, s)| (*c, s.estimates.iter().map(|(i, p)| (*i, *p)).collect()))
            .collect()
    }
}

fn calibrate(recoveries: &[GeoPoint], mode: Calibration, ts: usize, origin: GeoPoint) -> Result<GeoPoint> {
    match mode {
        Calibration::Off => recoveries.last().copied().ok_or(Error::Empty("recoveries")),
        Calibration::Mean => calibrate_mean(recoveries, ts, origin),
        Calibration::Similarity => {
            let used = &recoveries[recoveries.len().saturating_sub(ts.max(1))..];
            let flat: Vec<Vec<f64>> = used
                .iter()
                .map(|p| {
                    let (x, y) = planar_project(*p, origin);
                    vec![x, y]
                })
                .collect();
            let out = similarity_calibrate(&flat)?;
            Ok(planar_unproject((out[0], out[1]), origin))
        }
    }
}

/// Records and reconstructed trajectories of a whole attack run.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackOutput {
    pub records: Vec<AttackRecord>,
    pub trajectories: BTreeMap<usize, Vec<(usize, GeoPoint)>>,
}

/// ST-GIA over every round of `logs`, in order.
pub fn run_st_gia(
    model: &dyn Model,
    encoder: Encoder,
    logs: &[RoundLog],
    cfg: &AttackConfig,
    net: &RoadNetwork,
) -> Result<AttackOutput> {
    run_with(Attacker::new(model, encoder, net, *cfg)?, logs)
}

/// ST-GIA+ with candidate sets from `predictor`.
pub fn run_st_gia_plus(
    model: &dyn Model,
    encoder: Encoder,
    logs: &[RoundLog],
    cfg: &AttackConfig,
    net: &RoadNetwork,
    predictor: &dyn CandidatePredictor,
) -> Result<AttackOutput> {
    run_with(Attacker::new(model, encoder, net, *cfg)?.with_predictor(predictor), logs)
}

fn run_with(mut attacker: Attacker<'_>, logs: &[RoundLog]) -> Result<AttackOutput> {
    if logs.is_empty() {
        return Err(Error::Empty("round logs"));
    }
    let mut records = Vec::new();
    for log in logs {
        records.extend(attacker.attack_round(log)?);
    }
    Ok(AttackOutput {
        records,
        trajectories: attacker.trajectories(),
    })
}

#[derive(Serialize)]
struct ReconLine<'a> {
    client: usize,
    user_id: &'a str,
    round: usize,
    point_index: usize,
    recon_lat: f64,
    recon_lon: f64,
    true_lat: f64,
    true_lon: f64,
    ait: usize,
    final_distance: f64,
}

/// One JSON line per record, describing the final window position.
pub fn write_reconstructions(w: &mut impl Write, records: &[AttackRecord]) -> Result<()> {
    for r in records {
        let last = r.truth.len() - 1;
        let line = ReconLine {
            client: r.client,
            user_id: &r.user_id,
            round: r.round,
            point_index: r.point_index + last,
            recon_lat: r.estimate[last].lat,
            recon_lon: r.estimate[last].lon,
            true_lat: r.truth[last].lat,
            true_lon: r.truth[last].lon,
            ait: r.iterations,
            final_distance: r.final_distance,
        };
        serde_json::to_writer(&mut *w, &line)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}
