//! Attack distance, attack iterations, attack risk and recall@k, aggregated
//! per round into `metrics.csv` and `summary.json`.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::attack::AttackRecord;
use crate::error::{Error, Result};
use crate::geo::{distance_m, GeoPoint};

/// Distance under which a reconstruction counts as a successful attack.
pub const RISK_THRESHOLD_M: f64 = 500.0;

pub fn attack_distance(truth: GeoPoint, recon: GeoPoint, origin: GeoPoint) -> f64 {
    distance_m(truth, recon, origin)
}

/// Fraction of pairs reconstructed strictly closer than `threshold_m`.
pub fn attack_risk(pairs: &[(GeoPoint, GeoPoint)], threshold_m: f64, origin: GeoPoint) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Empty("attack pairs"));
    }
    let hits = pairs
        .iter()
        .filter(|(t, r)| attack_distance(*t, *r, origin) < threshold_m)
        .count();
    Ok(hits as f64 / pairs.len() as f64)
}

/// Fraction of instances whose true cell is among the first `k` predictions.
pub fn recall_at_k(predicted: &[Vec<usize>], truth: &[usize], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    if predicted.len() != truth.len() {
        return Err(Error::Shape {
            expected: truth.len(),
            got: predicted.len(),
        });
    }
    if truth.is_empty() {
        return Ok(0.0);
    }
    let hits = predicted
        .iter()
        .zip(truth)
        .filter(|(p, t)| p.iter().take(k).any(|c| c == *t))
        .count();
    Ok(hits as f64 / truth.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRow {
    pub round: usize,
    pub mean_ad_m: f64,
    /// Mean iterations over all records, non-converged ones counted as N.
    pub mean_ait: f64,
    /// Mean iterations over converged records only.
    pub mean_ait_converged: Option<f64>,
    pub attack_risk: f64,
    pub recall_at_5: Option<f64>,
    pub epsilon_t: Option<f64>,
    pub n_records: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean_ad_m: f64,
    pub mean_ait: f64,
    pub mean_ait_converged: Option<f64>,
    pub attack_risk: f64,
    /// Recall@5 of the final global model.
    pub recall_at_5: Option<f64>,
    pub epsilon_spent: Option<f64>,
    pub epsilon_total: Option<f64>,
    pub n_records: usize,
    pub rounds: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<RoundRow>,
    pub summary: Summary,
}

/// Inputs to [`build_report`] besides the attack records.
#[derive(Debug, Clone, Default)]
pub struct ReportInputs {
    /// Recall@5 of the global model at each round.
    pub recall: BTreeMap<usize, f64>,
    pub final_recall: Option<f64>,
    /// Budget spent in each round, for defended runs.
    pub epsilon: BTreeMap<usize, f64>,
    pub epsilon_total: Option<f64>,
}

struct Acc {
    ad: f64,
    ait: f64,
    conv_ait: f64,
    conv: usize,
    hits: usize,
    points: usize,
    n: usize,
}

impl Acc {
    fn new() -> Self {
        Acc {
            ad: 0.0,
            ait: 0.0,
            conv_ait: 0.0,
            conv: 0,
            hits: 0,
            points: 0,
            n: 0,
        }
    }

    fn add(&mut self, r: &AttackRecord, origin: GeoPoint) -> Result<()> {
        if r.truth.len() != r.estimate.len() || r.truth.is_empty() {
            return Err(Error::Shape {
                expected: r.truth.len(),
                got: r.estimate.len(),
            });
        }
        self.ad += r.attack_distance(origin);
        self.ait += r.iterations as f64;
        if r.converged {
            self.conv_ait += r.iterations as f64;
            self.conv += 1;
        }
        for (t, e) in r.truth.iter().zip(&r.estimate) {
            self.points += 1;
            if attack_distance(*t, *e, origin) < RISK_THRESHOLD_M {
                self.hits += 1;
            }
        }
        self.n += 1;
        Ok(())
    }

    fn means(&self) -> (f64, f64, Option<f64>, f64) {
        let n = self.n as f64;
        (
            self.ad / n,
            self.ait / n,
            (self.conv > 0).then(|| self.conv_ait / self.conv as f64),
            self.hits as f64 / self.points as f64,
        )
    }
}

/// Per-round and overall aggregation. Records are summed in (round, client)
/// order, so the result does not depend on the input order.
pub fn build_report(records: &[AttackRecord], origin: GeoPoint, inputs: &ReportInputs) -> Result<EvalReport> {
    if records.is_empty() {
        return Err(Error::Empty("attack records"));
    }
    let mut sorted: Vec<&AttackRecord> = records.iter().collect();
    sorted.sort_by_key(|r| (r.round, r.client, r.point_index));
    if sorted.windows(2).any(|w| (w[0].round, w[0].client) == (w[1].round, w[1].client)) {
        return Err(Error::invalid("duplicate (round, client) record; records from different runs?"));
    }
    let mut per_round: BTreeMap<usize, Acc> = BTreeMap::new();
    let mut all = Acc::new();
    for r in sorted {
        per_round.entry(r.round).or_insert_with(Acc::new).add(r, origin)?;
        all.add(r, origin)?;
    }
    if let Some(r) = inputs.epsilon.keys().find(|r| !per_round.contains_key(r)) {
        log::debug!("budget entry for round {r} has no attack records");
    }
    let rows = per_round
        .iter()
        .map(|(&round, acc)| {
            let (ad, ait, conv, risk) = acc.means();
            RoundRow {
                round,
                mean_ad_m: ad,
                mean_ait: ait,
                mean_ait_converged: conv,
                attack_risk: risk,
                recall_at_5: inputs.recall.get(&round).copied(),
                epsilon_t: inputs.epsilon.get(&round).copied(),
                n_records: acc.n,
            }
        })
        .collect();
    let (ad, ait, conv, risk) = all.means();
    let summary = Summary {
        mean_ad_m: ad,
        mean_ait: ait,
        mean_ait_converged: conv,
        attack_risk: risk,
        recall_at_5: inputs.final_recall,
        epsilon_spent: (!inputs.epsilon.is_empty()).then(|| inputs.epsilon.values().sum()),
        epsilon_total: inputs.epsilon_total,
        n_records: all.n,
        rounds: per_round.len(),
    };
    Ok(EvalReport { rows, summary })
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("round,mean_AD_m,mean_AIT,attack_risk,recall_at_5,epsilon_t,n_records\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                r.round,
                r.mean_ad_m,
                r.mean_ait,
                r.attack_risk,
                opt(r.recall_at_5),
                opt(r.epsilon_t),
                r.n_records
            );
        }
        s
    }

    pub fn row(&self, round: usize) -> Option<&RoundRow> {
        self.rows.iter().find(|r| r.round == round)
    }
}
