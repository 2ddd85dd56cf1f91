//! Location-privacy defenses applied during federated training.
//!
//! Distances inside the mechanisms are measured in a configurable unit
//! (`unit_m` meters, default 1), so a privacy budget `epsilon` is per unit:
//! with `unit_m = 1000`, `epsilon = 2` means 2 per kilometer.
//!
//! * PGEM: exponential mechanism over a user's constraint domain, scored by
//!   road-network shortest-path distance. Paired with the risk-adaptive
//!   budget allocation it forms the `adaptive` defense.
//! * GeoI: planar Laplace noise on each point.
//! * GeoGI: exponential mechanism over every reachable road node.
//! * DP-SGD: clipped gradients with Gaussian noise.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::{Arc, Mutex};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::attack::{AttackRecord, Attacker};
use crate::error::{Error, Result};
use crate::fed::{RoundLog, TrainingHooks};
use crate::geo::{planar_project, planar_unproject, GeoPoint};
use crate::model::GradVector;
use crate::network::{NodeId, RoadNetwork};

/// Floor added to the importance denominator.
pub const IMPORTANCE_FLOOR: f64 = 1e-6;
/// Failure probability used to turn a per-round epsilon into a DP-SGD
/// noise multiplier.
pub const DPSGD_DELTA: f64 = 1e-5;

/// Nodes a user may plausibly be at.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConstraintDomain {
    pub user_id: String,
    nodes: BTreeSet<NodeId>,
}

impl ConstraintDomain {
    pub fn new(user_id: impl Into<String>, nodes: impl IntoIterator<Item = NodeId>, net: &RoadNetwork) -> Result<Self> {
        let nodes: BTreeSet<NodeId> = nodes.into_iter().collect();
        if nodes.is_empty() {
            return Err(Error::Empty("constraint domain"));
        }
        if let Some(bad) = nodes.iter().find(|n| !net.contains(**n)) {
            return Err(Error::UnknownNode(*bad));
        }
        Ok(ConstraintDomain {
            user_id: user_id.into(),
            nodes,
        })
    }

    /// Every node within `radius_m` of `center`, or the nearest node if none is.
    pub fn around(user_id: impl Into<String>, center: GeoPoint, radius_m: f64, net: &RoadNetwork) -> Result<Self> {
        let mut nodes = net.nodes_within(center, radius_m);
        if nodes.is_empty() {
            nodes.push(net.nearest_node(center, net.origin())?);
        }
        Self::new(user_id, nodes, net)
    }

    pub fn nodes(&self) -> &BTreeSet<NodeId> {
        &self.nodes
    }

    pub fn contains(&self, id: NodeId) -> bool {
        self.nodes.contains(&id)
    }
}

/// Parses a domain file: one line per user, `<user_id> <node_id> ...`.
pub fn parse_domains(text: &str, path: &Path, net: &RoadNetwork) -> Result<BTreeMap<String, ConstraintDomain>> {
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let mut f = line.split_whitespace();
        let user = f.next().expect("non-empty line");
        let ids = f
            .map(|s| s.parse::<NodeId>().map_err(|_| err(format!("bad node id `{s}`"))))
            .collect::<Result<Vec<_>>>()?;
        let dom = ConstraintDomain::new(user, ids, net).map_err(|e| err(e.to_string()))?;
        out.insert(user.to_string(), dom);
    }
    Ok(out)
}

pub fn load_domains(path: &Path, net: &RoadNetwork) -> Result<BTreeMap<String, ConstraintDomain>> {
    parse_domains(&std::fs::read_to_string(path)?, path, net)
}

/// Shadow-attack outcome of one round.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RiskSignal {
    /// Mean attack distance, meters.
    pub ad: f64,
    /// Mean attack iterations.
    pub ait: f64,
}

/// Privacy budget bookkeeping for the adaptive defense.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetLedger {
    pub total: f64,
    consumed: Vec<f64>,
    /// Weight of the distance term; the iteration term gets `1 - alpha`.
    pub alpha: f64,
    /// Attack distance that counts as neutral risk, meters.
    pub rho_ad: f64,
    /// Attack iterations that count as neutral risk.
    pub n_max: f64,
}

impl BudgetLedger {
    pub fn new(total: f64, alpha: f64, rho_ad: f64, n_max: f64) -> Result<Self> {
        if !(total > 0.0 && total.is_finite()) {
            return Err(Error::invalid(format!("total budget must be positive, got {total}")));
        }
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::invalid(format!("alpha must be in [0, 1], got {alpha}")));
        }
        if !(rho_ad > 0.0 && n_max > 0.0) {
            return Err(Error::invalid("risk scales must be positive"));
        }
        Ok(BudgetLedger {
            total,
            consumed: Vec::new(),
            alpha,
            rho_ad,
            n_max,
        })
    }

    pub fn beta(&self) -> f64 {
        1.0 - self.alpha
    }

    pub fn consumed(&self) -> &[f64] {
        &self.consumed
    }

    pub fn spent(&self) -> f64 {
        self.consumed.iter().sum()
    }

    pub fn remaining(&self) -> f64 {
        self.total - self.spent()
    }

    /// Risk at which the importance is exactly 1.
    pub fn neutral_risk(&self) -> RiskSignal {
        RiskSignal {
            ad: self.rho_ad,
            ait: self.n_max,
        }
    }
}

/// Importance of a round: large when the last attack came close (small AD)
/// and quickly (small AIT).
pub fn round_importance(risk: RiskSignal, ledger: &BudgetLedger) -> f64 {
    let f1 = risk.ad.max(0.0) / ledger.rho_ad;
    let f2 = risk.ait.max(0.0) / ledger.n_max;
    1.0 / (ledger.alpha * f1 + ledger.beta() * f2 + IMPORTANCE_FLOOR)
}

/// Spends `exp(-importance)` of the remaining budget and returns it.
pub fn allocate_budget(ledger: &mut BudgetLedger, importance: f64) -> Result<f64> {
    let rest = ledger.remaining();
    if !(rest > 0.0) {
        return Err(Error::BudgetExhausted(rest));
    }
    let eps = (-importance).exp() * rest;
    if !(eps > 0.0 && eps < rest) {
        return Err(Error::invalid(format!("importance {importance} gives no usable budget share")));
    }
    ledger.consumed.push(eps);
    Ok(eps)
}

/// Memoized single-source shortest paths.
#[derive(Debug, Default)]
pub struct DistanceCache {
    rows: Mutex<BTreeMap<NodeId, Arc<BTreeMap<NodeId, f64>>>>,
}

impl DistanceCache {
    pub fn from(&self, net: &RoadNetwork, source: NodeId) -> Result<Arc<BTreeMap<NodeId, f64>>> {
        if let Some(row) = self.rows.lock().unwrap_or_else(|e| e.into_inner()).get(&source) {
            return Ok(row.clone());
        }
        let row = Arc::new(net.distances_from(source)?);
        self.rows
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .insert(source, row.clone());
        Ok(row)
    }
}

/// Output distribution of PGEM for true node `x`, in domain order.
/// `dist` maps nodes to their shortest-path distance from `x` in units.
pub fn pgem_probabilities(dom: &BTreeSet<NodeId>, epsilon: f64, dist: impl Fn(NodeId) -> f64) -> Vec<(NodeId, f64)> {
    let scores: Vec<(NodeId, f64)> = dom.iter().map(|&c| (c, -0.5 * epsilon * dist(c))).collect();
    let max = scores.iter().map(|s| s.1).fold(f64::NEG_INFINITY, f64::max);
    let lse = max + scores.iter().map(|s| (s.1 - max).exp()).sum::<f64>().ln();
    scores.into_iter().map(|(c, s)| (c, (s - lse).exp())).collect()
}

/// Inverse-CDF draw from `(node, probability)` pairs.
fn draw(probs: &[(NodeId, f64)], rng: &mut impl Rng) -> NodeId {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for &(c, p) in probs {
        acc += p;
        if u < acc {
            return c;
        }
    }
    // rounding left the total a hair below 1
    probs.iter().rev().find(|(_, p)| *p > 0.0).map_or(probs[0].0, |(c, _)| *c)
}

/// Road-network exponential mechanism over a constraint domain. A true node
/// outside the domain is first replaced by the nearest domain member.
pub fn pgem(
    x: NodeId,
    dom: &ConstraintDomain,
    epsilon: f64,
    unit_m: f64,
    net: &RoadNetwork,
    cache: &DistanceCache,
    rng: &mut impl Rng,
) -> Result<NodeId> {
    if !(epsilon >= 0.0) {
        return Err(Error::invalid(format!("epsilon must be non-negative, got {epsilon}")));
    }
    let x = if dom.contains(x) {
        x
    } else {
        let p = net.point(x)?;
        let nearest = dom
            .nodes
            .iter()
            .map(|&c| Ok((crate::geo::distance_m(p, net.point(c)?, net.origin()), c)))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
            .map(|(_, c)| c)
            .ok_or(Error::Empty("constraint domain"))?;
        log::debug!("node {x} outside the domain of {}; using {nearest}", dom.user_id);
        nearest
    };
    let row = cache.from(net, x)?;
    let probs = pgem_probabilities(&dom.nodes, epsilon, |c| row[&c] / unit_m);
    Ok(draw(&probs, rng))
}

/// Exponential mechanism over every node reachable from `x`.
pub fn graph_exp_mech(
    x: NodeId,
    net: &RoadNetwork,
    epsilon: f64,
    unit_m: f64,
    cache: &DistanceCache,
    rng: &mut impl Rng,
) -> Result<NodeId> {
    let row = cache.from(net, x)?;
    let reachable = row.iter().filter(|(_, d)| d.is_finite()).map(|(c, _)| *c);
    let dom = ConstraintDomain::new("", reachable, net)?;
    pgem(x, &dom, epsilon, unit_m, net, cache, rng)
}

/// Lower branch `W_{-1}` of the Lambert W function on `[-1/e, 0)`.
pub fn lambert_w_m1(z: f64) -> f64 {
    let branch = -(-1.0f64).exp();
    if z <= branch {
        return -1.0;
    }
    if z >= 0.0 {
        return f64::NEG_INFINITY;
    }
    let mut w = if z < -0.25 {
        -1.0 - (2.0 * (1.0 + std::f64::consts::E * z)).sqrt()
    } else {
        let l1 = (-z).ln();
        l1 - (-l1).ln()
    };
    for _ in 0..100 {
        let ew = w.exp();
        let f = w * ew - z;
        let fp = ew * (w + 1.0);
        if fp == 0.0 {
            break;
        }
        // Halley step
        let step = f / (fp - (w + 2.0) * f / (2.0 * (w + 1.0)));
        w -= step;
        if step.abs() <= 1e-12 * w.abs().max(1.0) {
            break;
        }
    }
    w
}

/// Radius quantile of the planar Laplace distribution (Gamma(2, 1/epsilon)).
pub fn laplace_radius(p: f64, epsilon: f64) -> f64 {
    -(lambert_w_m1((p - 1.0) / std::f64::consts::E) + 1.0) / epsilon
}

/// Planar Laplace noise: uniform angle, Gamma(2, 1/epsilon) radius in units,
/// applied in the projected plane about `origin`.
pub fn planar_laplace(x: GeoPoint, epsilon: f64, unit_m: f64, origin: GeoPoint, rng: &mut impl Rng) -> Result<GeoPoint> {
    if !(epsilon > 0.0) {
        return Err(Error::invalid(format!("epsilon must be positive, got {epsilon}")));
    }
    let theta = rng.random_range(0.0..std::f64::consts::TAU);
    let r = laplace_radius(rng.random(), epsilon) * unit_m;
    let (px, py) = planar_project(x, origin);
    Ok(planar_unproject((px + r * theta.cos(), py + r * theta.sin()), origin))
}

/// Clips `g` to norm `clip` and adds N(0, (sigma * clip)^2) per coordinate.
pub fn dpsgd_perturb(g: &mut GradVector, clip: f64, sigma: f64, rng: &mut impl Rng) {
    let norm = g.norm();
    if norm > clip {
        let s = clip / norm;
        g.0.iter_mut().for_each(|v| *v *= s);
    }
    if sigma > 0.0 {
        let noise = Normal::new(0.0, sigma * clip).expect("finite std");
        g.0.iter_mut().for_each(|v| *v += noise.sample(rng));
    }
}

/// Gaussian-mechanism noise multiplier for one release at `(epsilon, delta)`.
pub fn dpsgd_sigma(epsilon: f64, delta: f64) -> f64 {
    (2.0 * (1.25 / delta).ln()).sqrt() / epsilon
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DefenseKind {
    None,
    Dpsgd,
    Geoi,
    Geogi,
    Adaptive,
}

impl std::str::FromStr for DefenseKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "none" => DefenseKind::None,
            "dpsgd" => DefenseKind::Dpsgd,
            "geoi" => DefenseKind::Geoi,
            "geogi" => DefenseKind::Geogi,
            "adaptive" => DefenseKind::Adaptive,
            _ => return Err(Error::invalid(format!("unknown defense `{s}`"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DefenseConfig {
    pub kind: DefenseKind,
    pub epsilon_total: f64,
    pub unit_m: f64,
    pub alpha: f64,
    pub rho_ad_m: f64,
    /// Radius of the default constraint domain around a trajectory centroid.
    pub domain_radius_m: f64,
    pub clip: f64,
    pub delta: f64,
}

impl Default for DefenseConfig {
    fn default() -> Self {
        DefenseConfig {
            kind: DefenseKind::None,
            epsilon_total: 10.0,
            unit_m: 1.0,
            alpha: 0.5,
            rho_ad_m: 500.0,
            domain_radius_m: 1000.0,
            clip: 1.0,
            delta: DPSGD_DELTA,
        }
    }
}

/// Per-round budget record of a defended run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BudgetEntry {
    pub round: usize,
    pub epsilon: f64,
    pub importance: Option<f64>,
    pub risk: Option<RiskSignal>,
}

/// Training hooks for every defense kind. The adaptive kind runs a shadow
/// attack on each finished round and feeds its risk into the next round's
/// budget.
pub struct Defense<'a> {
    cfg: DefenseConfig,
    net: &'a RoadNetwork,
    rounds: usize,
    domains: Vec<ConstraintDomain>,
    cache: DistanceCache,
    ledger: Option<BudgetLedger>,
    shadow: Option<Attacker<'a>>,
    risk: Option<RiskSignal>,
    epsilon: Option<f64>,
    history: Vec<BudgetEntry>,
    shadow_records: Vec<AttackRecord>,
}

impl<'a> Defense<'a> {
    /// `domains` holds one constraint domain per client (used by PGEM).
    pub fn new(
        cfg: DefenseConfig,
        net: &'a RoadNetwork,
        rounds: usize,
        domains: Vec<ConstraintDomain>,
        shadow: Option<Attacker<'a>>,
    ) -> Result<Self> {
        if rounds == 0 {
            return Err(Error::invalid("defense needs at least one round"));
        }
        if !(cfg.unit_m > 0.0) {
            return Err(Error::invalid("distance unit must be positive"));
        }
        let ledger = match cfg.kind {
            DefenseKind::Adaptive => {
                let n_max = shadow.as_ref().map_or(200.0, |a| a.config().max_iters as f64);
                Some(BudgetLedger::new(cfg.epsilon_total, cfg.alpha, cfg.rho_ad_m, n_max)?)
            }
            DefenseKind::None => None,
            _ => {
                if !(cfg.epsilon_total > 0.0) {
                    return Err(Error::invalid("epsilon must be positive"));
                }
                None
            }
        };
        Ok(Defense {
            cfg,
            net,
            rounds,
            domains,
            cache: DistanceCache::default(),
            ledger,
            shadow,
            risk: None,
            epsilon: None,
            history: Vec::new(),
            shadow_records: Vec::new(),
        })
    }

    pub fn ledger(&self) -> Option<&BudgetLedger> {
        self.ledger.as_ref()
    }

    pub fn history(&self) -> &[BudgetEntry] {
        &self.history
    }

    /// Records of the shadow attack, in round order.
    pub fn take_shadow_records(&mut self) -> Vec<AttackRecord> {
        std::mem::take(&mut self.shadow_records)
    }

    fn perturb_point(&self, client: usize, p: GeoPoint, eps: f64, rng: &mut ChaCha8Rng) -> Result<GeoPoint> {
        let origin = self.net.origin();
        match self.cfg.kind {
            DefenseKind::Geoi => planar_laplace(p, eps, self.cfg.unit_m, origin, rng),
            DefenseKind::Geogi => {
                let x = self.net.nearest_node(p, origin)?;
                self.net
                    .point(graph_exp_mech(x, self.net, eps, self.cfg.unit_m, &self.cache, rng)?)
            }
            DefenseKind::Adaptive => {
                let dom = self
                    .domains
                    .get(client)
                    .ok_or_else(|| Error::invalid(format!("no constraint domain for client {client}")))?;
                let x = self.net.nearest_node(p, origin)?;
                self.net
                    .point(pgem(x, dom, eps, self.cfg.unit_m, self.net, &self.cache, rng)?)
            }
            DefenseKind::None | DefenseKind::Dpsgd => Ok(p),
        }
    }
}

impl TrainingHooks for Defense<'_> {
    fn begin_round(&mut self, round: usize) -> Result<()> {
        let (eps, importance, risk) = match (&mut self.ledger, self.cfg.kind) {
            (Some(ledger), _) => {
                let risk = self.risk.unwrap_or_else(|| ledger.neutral_risk());
                let gamma = round_importance(risk, ledger);
                (Some(allocate_budget(ledger, gamma)?), Some(gamma), Some(risk))
            }
            (None, DefenseKind::None) => (None, None, None),
            (None, _) => (Some(self.cfg.epsilon_total / self.rounds as f64), None, None),
        };
        self.epsilon = eps;
        if let Some(epsilon) = eps {
            self.history.push(BudgetEntry {
                round,
                epsilon,
                importance,
                risk,
            });
        }
        Ok(())
    }

    fn perturb_sample(&self, client: usize, _round: usize, points: &mut [GeoPoint], rng: &mut ChaCha8Rng) -> Result<()> {
        let Some(eps) = self.epsilon else {
            return Ok(());
        };
        for p in points.iter_mut() {
            *p = self.perturb_point(client, *p, eps, rng)?;
        }
        Ok(())
    }

    fn perturb_gradient(&self, _round: usize, g: &mut GradVector, rng: &mut ChaCha8Rng) {
        if let (DefenseKind::Dpsgd, Some(eps)) = (self.cfg.kind, self.epsilon) {
            dpsgd_perturb(g, self.cfg.clip, dpsgd_sigma(eps, self.cfg.delta), rng);
        }
    }

    fn round_epsilon(&self) -> Option<f64> {
        self.epsilon
    }

    fn end_round(&mut self, log: &RoundLog) -> Result<()> {
        let Some(shadow) = self.shadow.as_mut() else {
            return Ok(());
        };
        let records = shadow.attack_round(log)?;
        if !records.is_empty() {
            let n = records.len() as f64;
            let origin = self.net.origin();
            self.risk = Some(RiskSignal {
                ad: records.iter().map(|r| r.attack_distance(origin)).sum::<f64>() / n,
                ait: records.iter().map(|r| r.iterations as f64).sum::<f64>() / n,
            });
        }
        self.shadow_records.extend(records);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn ledger(total: f64) -> BudgetLedger {
        BudgetLedger::new(total, 0.5, 500.0, 200.0).unwrap()
    }

    #[test]
    fn neutral_importance_is_one() {
        let l = ledger(10.0);
        let g = round_importance(l.neutral_risk(), &l);
        assert!((g - 1.0).abs() < 1e-5, "{g}");
        let top = round_importance(RiskSignal { ad: 0.0, ait: 0.0 }, &l);
        assert!((top - 1e6).abs() < 1e-6);
    }

    #[test]
    fn doubling_distance_halves_importance() {
        let l = BudgetLedger::new(10.0, 1.0, 500.0, 200.0).unwrap();
        let a = round_importance(RiskSignal { ad: 300.0, ait: 50.0 }, &l);
        let b = round_importance(RiskSignal { ad: 600.0, ait: 50.0 }, &l);
        assert!((a / b - 2.0).abs() < 1e-5);
    }

    #[test]
    fn allocation_example_and_safety() {
        let mut l = ledger(10.0);
        let e = allocate_budget(&mut l, 1.0).unwrap();
        assert!((e - 3.678_794_411_714_423).abs() < 1e-12);
        for g in [0.1, 0.5, 3.0, 0.01, 2.0] {
            allocate_budget(&mut l, g).unwrap();
            assert!(l.spent() < l.total);
        }
        assert!(allocate_budget(&mut ledger(1.0), 1e6).is_err());
    }

    #[test]
    fn ledger_validation() {
        assert!(BudgetLedger::new(0.0, 0.5, 500.0, 200.0).is_err());
        assert!(BudgetLedger::new(1.0, 1.5, 500.0, 200.0).is_err());
        assert!(BudgetLedger::new(1.0, 0.5, 0.0, 200.0).is_err());
    }

    #[test]
    fn pgem_hand_probabilities() {
        let dom: BTreeSet<NodeId> = [0, 1, 2].into();
        let d = [0.0, 100.0, 200.0];
        let p = pgem_probabilities(&dom, 0.02, |c| d[c as usize]);
        let want = [0.665_240_955_8, 0.244_728_471_1, 0.090_030_573_2];
        for (got, w) in p.iter().zip(want) {
            assert!((got.1 - w).abs() < 1e-9, "{got:?} vs {w}");
        }
    }

    #[test]
    fn pgem_singleton_and_disconnected() {
        let mut nodes = BTreeMap::new();
        for i in 0..3 {
            nodes.insert(i, GeoPoint { lat: 35.0, lon: 139.0 + 0.001 * i as f64 });
        }
        let net = RoadNetwork::new(nodes, vec![(0, 1, None)]).unwrap();
        let cache = DistanceCache::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let single = ConstraintDomain::new("u", [1], &net).unwrap();
        let isolated = ConstraintDomain::new("u", [0, 2], &net).unwrap();
        for _ in 0..50 {
            assert_eq!(pgem(1, &single, 0.5, 1.0, &net, &cache, &mut rng).unwrap(), 1);
            assert_eq!(pgem(2, &isolated, 0.001, 1.0, &net, &cache, &mut rng).unwrap(), 2);
        }
        assert!(ConstraintDomain::new("u", [], &net).is_err());
        assert!(ConstraintDomain::new("u", [7], &net).is_err());
    }

    #[test]
    fn domain_file() {
        let mut nodes = BTreeMap::new();
        for i in 0..4 {
            nodes.insert(i, GeoPoint { lat: 35.0, lon: 139.0 + 0.001 * i as f64 });
        }
        let net = RoadNetwork::new(nodes, vec![(0, 1, None), (1, 2, None)]).unwrap();
        let p = Path::new("domains.txt");
        let d = parse_domains("# header\nu1 0 1\nu2 3\n", p, &net).unwrap();
        assert_eq!(d["u1"].nodes().len(), 2);
        assert!(parse_domains("u1 0 x\n", p, &net).is_err());
        assert!(parse_domains("u1\n", p, &net).is_err());
    }

    #[test]
    fn lambert_branch() {
        for z in [-0.367_879, -0.3, -0.1, -1e-3, -1e-9] {
            let w = lambert_w_m1(z);
            assert!(w <= -1.0);
            assert!((w * w.exp() - z).abs() < 1e-12 * z.abs().max(1e-3), "{z}: {w}");
        }
        assert_eq!(lambert_w_m1(-1.0), -1.0);
    }

    #[test]
    fn laplace_radius_median() {
        let eps = 0.01;
        let m = laplace_radius(0.5, eps);
        assert!((m * eps - 1.678_346_990_016_661).abs() < 1e-9, "{}", m * eps);
        assert!(laplace_radius(0.0, eps).abs() < 1e-9);
    }

    #[test]
    fn dpsgd_clipping() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut g = GradVector(vec![0.3, 0.4]);
        dpsgd_perturb(&mut g, 1.0, 0.0, &mut rng);
        assert_eq!(g.0, vec![0.3, 0.4]);
        let mut g = GradVector(vec![1.2, 1.6]);
        dpsgd_perturb(&mut g, 1.0, 0.0, &mut rng);
        assert!((g.norm() - 1.0).abs() < 1e-12);
        let sigma = dpsgd_sigma(1.0, 1e-5);
        assert!((sigma - (2.0 * 125_000f64.ln()).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn dpsgd_noise_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (clip, sigma) = (0.5, 1.3);
        let n = 10_000;
        let mut sum = 0.0;
        let mut sq = 0.0;
        for _ in 0..n {
            let mut g = GradVector(vec![0.0; 1]);
            dpsgd_perturb(&mut g, clip, sigma, &mut rng);
            sum += g[0];
            sq += g[0] * g[0];
        }
        let mean = sum / n as f64;
        let var = sq / n as f64 - mean * mean;
        let want = (sigma * clip).powi(2);
        assert!((var / want - 1.0).abs() < 0.05, "{var} vs {want}");
    }

    #[test]
    fn defense_kind_parses() {
        assert_eq!("adaptive".parse::<DefenseKind>().unwrap(), DefenseKind::Adaptive);
        assert!("pgem2".parse::<DefenseKind>().is_err());
    }
}
