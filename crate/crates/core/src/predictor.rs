//! Candidate next-location prediction for ST-GIA+: a first-order Markov
//! predictor over grid cells, a remote text-completion predictor, mapping of
//! reconstructions onto the candidate set, and similarity-based calibration.
//!
//! # Remote predictor protocol
//!
//! The endpoint is read from `GEOLEAK_PREDICTOR_URL` and an optional bearer
//! token from `GEOLEAK_PREDICTOR_TOKEN`. Each prediction is one HTTP POST
//! with a JSON body
//!
//! ```json
//! {"prompt": "<text>", "temperature": 0.0, "n_candidates": 5}
//! ```
//!
//! and the reply must be a JSON object with a `"text"` string field. The
//! text is parsed by [`parse_ranked_cells`]: the first `[...]` list of
//! comma-separated non-negative integers is read as ranked cell ids.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::{planar_project, GeoPoint, GridIndex};
use crate::network::{NodeId, RoadNetwork};

/// Number of candidates per prediction (recall@5).
pub const CANDIDATES: usize = 5;
pub const HISTORY_LEN: usize = 40;
pub const CONTEXT_LEN: usize = 5;

pub const URL_ENV: &str = "GEOLEAK_PREDICTOR_URL";
pub const TOKEN_ENV: &str = "GEOLEAK_PREDICTOR_TOKEN";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub cell: usize,
    pub node: Option<NodeId>,
    pub point: GeoPoint,
    pub rank: usize,
}

/// Up to five ranked candidate locations, best first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSet {
    candidates: Vec<Candidate>,
}

impl CandidateSet {
    pub fn new(mut candidates: Vec<Candidate>) -> Result<Self> {
        if candidates.is_empty() || candidates.len() > CANDIDATES {
            return Err(Error::invalid(format!(
                "candidate set must hold 1..={CANDIDATES} entries, got {}",
                candidates.len()
            )));
        }
        candidates.sort_by_key(|c| c.rank);
        if candidates.windows(2).any(|w| w[0].rank == w[1].rank) {
            return Err(Error::invalid("candidate ranks must be unique"));
        }
        Ok(CandidateSet { candidates })
    }

    /// Candidates at the road node nearest to each cell's centroid, ranked in
    /// the given order.
    pub fn from_cells(cells: &[usize], grid: &GridIndex, net: &RoadNetwork) -> Result<Self> {
        let mut out = Vec::with_capacity(cells.len());
        for (rank, &cell) in cells.iter().enumerate() {
            let node = net.nearest_node(grid.cell_center(cell), net.origin())?;
            out.push(Candidate {
                cell,
                node: Some(node),
                point: net.point(node)?,
                rank,
            });
        }
        CandidateSet::new(out)
    }

    pub fn candidates(&self) -> &[Candidate] {
        &self.candidates
    }

    pub fn cells(&self) -> Vec<usize> {
        self.candidates.iter().map(|c| c.cell).collect()
    }
}

/// A reconstructed or observed visit: grid cell and unix time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stay {
    pub cell: usize,
    pub t: i64,
}

/// What a predictor is asked: the next location of `client` at
/// `target_time`, given earlier stays in time order.
#[derive(Debug, Clone, Copy)]
pub struct PredictionQuery<'a> {
    pub client: usize,
    pub point_index: usize,
    pub target_time: i64,
    pub history: &'a [Stay],
}

pub trait CandidatePredictor: Sync {
    /// Ranked candidate cells, at most [`CANDIDATES`], best first.
    fn predict(&self, query: &PredictionQuery<'_>) -> Result<Vec<usize>>;
}

/// Removes repeated cells keeping the first occurrence.
pub fn dedup_ranked(cells: impl IntoIterator<Item = usize>) -> Vec<usize> {
    let mut seen = BTreeSet::new();
    cells.into_iter().filter(|c| seen.insert(*c)).collect()
}

/// First-order transition counts between grid cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarkovTable {
    classes: usize,
    counts: Vec<u32>,
    marginal: Vec<u64>,
}

impl MarkovTable {
    pub fn new(classes: usize) -> Self {
        MarkovTable {
            classes,
            counts: vec![0; classes * classes],
            marginal: vec![0; classes],
        }
    }

    pub fn fit<'a>(classes: usize, sequences: impl IntoIterator<Item = &'a [usize]>) -> Result<Self> {
        let mut t = MarkovTable::new(classes);
        for seq in sequences {
            if let Some(&bad) = seq.iter().find(|c| **c >= classes) {
                return Err(Error::invalid(format!("cell {bad} out of range")));
            }
            for &c in seq {
                t.marginal[c] += 1;
            }
            for w in seq.windows(2) {
                t.counts[w[0] * classes + w[1]] += 1;
            }
        }
        Ok(t)
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn add_transition(&mut self, from: usize, to: usize) {
        self.counts[from * self.classes + to] += 1;
        self.marginal[to] += 1;
    }

    /// Add-one smoothed transition probability.
    pub fn probability(&self, from: usize, to: usize) -> f64 {
        let row = &self.counts[from * self.classes..(from + 1) * self.classes];
        let total: u64 = row.iter().map(|&c| c as u64).sum();
        (row[to] as f64 + 1.0) / (total as f64 + self.classes as f64)
    }

    fn top(scores: impl Iterator<Item = u64>, k: usize) -> Vec<usize> {
        let mut v: Vec<(usize, u64)> = scores.enumerate().collect();
        v.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        v.into_iter().take(k).map(|(c, _)| c).collect()
    }

    /// Top cells after the last visited cell; ties go to the smaller id. An
    /// empty history or a never-left last cell falls back to the marginal.
    pub fn top_cells(&self, history: &[usize], k: usize) -> Vec<usize> {
        if let Some(&last) = history.last().filter(|c| **c < self.classes) {
            let row = &self.counts[last * self.classes..(last + 1) * self.classes];
            if row.iter().any(|&c| c > 0) {
                return Self::top(row.iter().map(|&c| c as u64), k);
            }
        }
        Self::top(self.marginal.iter().copied(), k)
    }
}

/// The five most likely next cells under a Markov table.
pub fn markov_candidates(history: &[usize], table: &MarkovTable) -> Vec<usize> {
    table.top_cells(history, CANDIDATES)
}

pub struct MarkovPredictor {
    pub table: MarkovTable,
}

impl CandidatePredictor for MarkovPredictor {
    fn predict(&self, query: &PredictionQuery<'_>) -> Result<Vec<usize>> {
        let cells: Vec<usize> = query.history.iter().map(|s| s.cell).collect();
        Ok(markov_candidates(&cells, &self.table))
    }
}

fn clock(t: i64) -> String {
    let m = t.rem_euclid(86_400) / 60;
    format!("{:02}:{:02}", m / 60, m % 60)
}

fn write_stays(out: &mut String, stays: &[Stay]) {
    let items: Vec<String> = stays
        .iter()
        .map(|s| format!("({}, {})", s.cell, clock(s.t)))
        .collect();
    let _ = writeln!(out, "{}", items.join(" "));
}

/// Builds the predictor prompt from the `HISTORY_LEN` stays before the most
/// recent `CONTEXT_LEN` stays (the context), plus the target time.
pub fn build_prompt(stays: &[Stay], target_time: i64) -> String {
    let split = stays.len().saturating_sub(CONTEXT_LEN);
    let (history, context) = stays.split_at(split);
    let history = &history[history.len().saturating_sub(HISTORY_LEN)..];
    let mut s = String::new();
    s.push_str("You predict the next grid cell a person will visit.\n");
    s.push_str("Stays are written as (cell_id, HH:MM) in time order.\n");
    s.push_str("<history>\n");
    write_stays(&mut s, history);
    s.push_str("</history>\n<context>\n");
    write_stays(&mut s, context);
    s.push_str("</context>\n");
    let _ = writeln!(s, "<target_time>{}</target_time>", clock(target_time));
    let _ = writeln!(
        s,
        "Answer with exactly {CANDIDATES} distinct cell ids ranked from most to least likely, \
         as a list such as [3, 17, 4, 9, 21]."
    );
    s
}

/// Recovers `(cell, minute_of_day)` tuples of the history and context
/// sections of a prompt made by [`build_prompt`].
pub fn parse_prompt(prompt: &str) -> Result<(Vec<(usize, u32)>, Vec<(usize, u32)>)> {
    let section = |tag: &str| -> Result<Vec<(usize, u32)>> {
        let open = format!("<{tag}>\n");
        let close = format!("</{tag}>");
        let start = prompt
            .find(&open)
            .ok_or_else(|| Error::Format(format!("prompt has no <{tag}> section")))?
            + open.len();
        let end = prompt[start..]
            .find(&close)
            .ok_or_else(|| Error::Format(format!("prompt has no </{tag}>")))?
            + start;
        prompt[start..end]
            .split(')')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|item| {
                let item = item.trim_start_matches('(');
                let (c, hm) = item
                    .split_once(", ")
                    .ok_or_else(|| Error::Format(format!("bad stay `{item}`")))?;
                let (h, m) = hm
                    .split_once(':')
                    .ok_or_else(|| Error::Format(format!("bad time `{hm}`")))?;
                let num = |s: &str| s.parse::<u32>().map_err(|_| Error::Format(format!("bad number `{s}`")));
                Ok((num(c)? as usize, num(h)? * 60 + num(m)?))
            })
            .collect()
    };
    Ok((section("history")?, section("context")?))
}

/// Parses the first bracketed list of integers in `text` as ranked cells,
/// deduplicated in order and truncated to [`CANDIDATES`].
pub fn parse_ranked_cells(text: &str, classes: usize) -> Result<Vec<usize>> {
    let start = text
        .find('[')
        .ok_or_else(|| Error::Format("reply has no `[` list".into()))?;
    let end = text[start..]
        .find(']')
        .ok_or_else(|| Error::Format("reply list is not closed".into()))?
        + start;
    let mut cells = Vec::new();
    for tok in text[start + 1..end].split(',') {
        let tok = tok.trim();
        if tok.is_empty() {
            continue;
        }
        let c: usize = tok
            .parse()
            .map_err(|_| Error::Format(format!("`{tok}` is not a cell id")))?;
        if c >= classes {
            return Err(Error::Format(format!("cell {c} out of range")));
        }
        cells.push(c);
    }
    let mut cells = dedup_ranked(cells);
    if cells.is_empty() {
        return Err(Error::Format("reply list is empty".into()));
    }
    cells.truncate(CANDIDATES);
    Ok(cells)
}

/// Sends one request body and returns the reply body.
pub trait Transport: Send + Sync {
    fn post(&self, url: &str, token: Option<&str>, body: &serde_json::Value) -> Result<String>;
}

pub struct HttpTransport {
    client: reqwest::blocking::Client,
}

impl HttpTransport {
    pub fn new(timeout: Duration) -> Result<Self> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| Error::PredictorUnavailable(e.to_string()))?;
        Ok(HttpTransport { client })
    }
}

impl Transport for HttpTransport {
    fn post(&self, url: &str, token: Option<&str>, body: &serde_json::Value) -> Result<String> {
        let mut req = self.client.post(url).json(body);
        if let Some(t) = token {
            req = req.bearer_auth(t);
        }
        let resp = req
            .send()
            .and_then(|r| r.error_for_status())
            .map_err(|e| Error::PredictorUnavailable(e.to_string()))?;
        resp.text().map_err(|e| Error::PredictorUnavailable(e.to_string()))
    }
}

struct Semaphore {
    free: Mutex<usize>,
    cv: Condvar,
}

impl Semaphore {
    fn new(n: usize) -> Self {
        Semaphore {
            free: Mutex::new(n.max(1)),
            cv: Condvar::new(),
        }
    }

    fn run<T>(&self, f: impl FnOnce() -> T) -> T {
        {
            let mut free = self.free.lock().unwrap_or_else(|e| e.into_inner());
            while *free == 0 {
                free = self.cv.wait(free).unwrap_or_else(|e| e.into_inner());
            }
            *free -= 1;
        }
        let out = f();
        *self.free.lock().unwrap_or_else(|e| e.into_inner()) += 1;
        self.cv.notify_one();
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RemoteSettings {
    pub endpoint: String,
    /// Name of the environment variable holding the bearer token.
    pub token_env: String,
    pub temperature: f64,
    pub history_len: usize,
    pub context_len: usize,
    pub max_in_flight: usize,
    pub timeout_secs: u64,
    pub fallback: bool,
}

impl Default for RemoteSettings {
    fn default() -> Self {
        RemoteSettings {
            endpoint: String::new(),
            token_env: TOKEN_ENV.to_string(),
            temperature: 0.0,
            history_len: HISTORY_LEN,
            context_len: CONTEXT_LEN,
            max_in_flight: 4,
            timeout_secs: 30,
            fallback: true,
        }
    }
}

impl RemoteSettings {
    /// Settings with the endpoint taken from `GEOLEAK_PREDICTOR_URL`.
    pub fn from_env() -> Result<Self> {
        let endpoint = std::env::var(URL_ENV)
            .map_err(|_| Error::PredictorUnavailable(format!("{URL_ENV} is not set")))?;
        Ok(RemoteSettings {
            endpoint,
            ..Default::default()
        })
    }
}

/// Remote predictor with one retry and optional Markov fallback.
pub struct RemotePredictor {
    settings: RemoteSettings,
    classes: usize,
    transport: Box<dyn Transport>,
    fallback: Option<MarkovTable>,
    gate: Semaphore,
    degradations: AtomicUsize,
}

impl RemotePredictor {
    pub fn new(
        settings: RemoteSettings,
        classes: usize,
        transport: Box<dyn Transport>,
        fallback: Option<MarkovTable>,
    ) -> Self {
        let gate = Semaphore::new(settings.max_in_flight);
        let fallback = fallback.filter(|_| settings.fallback);
        RemotePredictor {
            settings,
            classes,
            transport,
            fallback,
            gate,
            degradations: AtomicUsize::new(0),
        }
    }

    pub fn http(settings: RemoteSettings, classes: usize, fallback: Option<MarkovTable>) -> Result<Self> {
        let transport = HttpTransport::new(Duration::from_secs(settings.timeout_secs))?;
        Ok(Self::new(settings, classes, Box::new(transport), fallback))
    }

    /// Number of predictions answered by the fallback instead of the remote.
    pub fn degradations(&self) -> usize {
        self.degradations.load(Ordering::Relaxed)
    }

    fn request(&self, body: &serde_json::Value) -> Result<Vec<usize>> {
        let token = std::env::var(&self.settings.token_env).ok();
        let reply = self
            .gate
            .run(|| self.transport.post(&self.settings.endpoint, token.as_deref(), body))?;
        let v: serde_json::Value = serde_json::from_str(&reply)
            .map_err(|e| Error::Format(format!("reply is not JSON: {e}")))?;
        let text = v
            .get("text")
            .and_then(|t| t.as_str())
            .ok_or_else(|| Error::Format("reply has no `text` field".into()))?;
        parse_ranked_cells(text, self.classes)
    }
}

impl CandidatePredictor for RemotePredictor {
    fn predict(&self, query: &PredictionQuery<'_>) -> Result<Vec<usize>> {
        let keep = self.settings.history_len + self.settings.context_len;
        let stays = &query.history[query.history.len().saturating_sub(keep)..];
        let body = serde_json::json!({
            "prompt": build_prompt(stays, query.target_time),
            "temperature": self.settings.temperature,
            "n_candidates": CANDIDATES,
        });
        let err = match self.request(&body) {
            Ok(c) => return Ok(c),
            Err(first) => {
                log::debug!("remote predictor failed once: {first}");
                match self.request(&body) {
                    Ok(c) => return Ok(c),
                    Err(e) => e,
                }
            }
        };
        match &self.fallback {
            Some(table) => {
                self.degradations.fetch_add(1, Ordering::Relaxed);
                log::warn!("remote predictor unavailable ({err}); using Markov fallback");
                let cells: Vec<usize> = query.history.iter().map(|s| s.cell).collect();
                Ok(markov_candidates(&cells, table))
            }
            None => Err(Error::PredictorUnavailable(err.to_string())),
        }
    }
}

/// How the attacker obtains candidate sets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PredictorBinding {
    Markov,
    Remote(RemoteSettings),
}

/// The candidate closest to `r` in the projected plane; ties go to the
/// better-ranked candidate.
pub fn map_to_candidate(r: GeoPoint, cands: &CandidateSet, origin: GeoPoint) -> GeoPoint {
    let mut best = cands.candidates[0];
    let mut best_d = f64::INFINITY;
    for c in &cands.candidates {
        let d = crate::geo::distance_m(r, c.point, origin);
        if d < best_d {
            best = *c;
            best_d = d;
        }
    }
    best.point
}

/// Cosine similarity of two flattened coordinate sequences. A zero vector
/// has similarity 0 with everything.
pub fn traj_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape {
            expected: a.len(),
            got: b.len(),
        });
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Ok(0.0);
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Pairwise similarities of the recoveries after centering them on their
/// pointwise mean.
pub fn similarity_matrix(recoveries: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let n = recoveries.len();
    let len = recoveries.first().map_or(0, Vec::len);
    if let Some(r) = recoveries.iter().find(|r| r.len() != len) {
        return Err(Error::Shape { expected: len, got: r.len() });
    }
    let mean: Vec<f64> = (0..len)
        .map(|k| recoveries.iter().map(|r| r[k]).sum::<f64>() / n as f64)
        .collect();
    let dev: Vec<Vec<f64>> = recoveries
        .iter()
        .map(|r| r.iter().zip(&mean).map(|(a, m)| a - m).collect())
        .collect();
    let mut s = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            s[i][j] = if i == j { 1.0 } else { traj_similarity(&dev[i], &dev[j])? };
        }
    }
    Ok(s)
}

pub fn mean_pairwise(s: &[Vec<f64>], subset: &[usize]) -> f64 {
    let mut sum = 0.0;
    let mut pairs = 0usize;
    for (a, &i) in subset.iter().enumerate() {
        for &j in &subset[a + 1..] {
            sum += s[i][j];
            pairs += 1;
        }
    }
    if pairs == 0 {
        0.0
    } else {
        sum / pairs as f64
    }
}

/// Greedy choice of `ceil(n / 2)` recoveries with high mean pairwise
/// similarity, seeded from the most similar pair and refined by single
/// swaps. Not guaranteed optimal.
pub fn select_similar(s: &[Vec<f64>]) -> Vec<usize> {
    let n = s.len();
    let k = n.div_ceil(2);
    if n <= 2 {
        return (0..n).collect();
    }
    let mut seed = (0, 1);
    for i in 0..n {
        for j in i + 1..n {
            if s[i][j] > s[seed.0][seed.1] {
                seed = (i, j);
            }
        }
    }
    let mut chosen = vec![seed.0, seed.1];
    while chosen.len() < k {
        let next = (0..n)
            .filter(|c| !chosen.contains(c))
            .max_by(|&a, &b| {
                let sa: f64 = chosen.iter().map(|&m| s[a][m]).sum();
                let sb: f64 = chosen.iter().map(|&m| s[b][m]).sum();
                sa.total_cmp(&sb).then(b.cmp(&a))
            })
            .expect("k <= n");
        chosen.push(next);
    }
    // single swaps until none raises the mean similarity
    let mut current = mean_pairwise(s, &chosen);
    loop {
        let mut best: Option<(usize, usize, f64)> = None;
        for slot in 0..chosen.len() {
            for c in (0..n).filter(|c| !chosen.contains(c)) {
                let mut trial = chosen.clone();
                trial[slot] = c;
                let v = mean_pairwise(s, &trial);
                if v > best.map_or(current, |b| b.2) + 1e-12 {
                    best = Some((slot, c, v));
                }
            }
        }
        match best {
            Some((slot, c, v)) => {
                chosen[slot] = c;
                current = v;
            }
            None => break,
        }
    }
    chosen.sort_unstable();
    chosen
}

/// Calibrates several recoveries of the same trajectory (flattened projected
/// coordinates): outlying recoveries are screened by selecting the most
/// mutually similar half, whose pointwise mean is returned. With at most two
/// recoveries this is the plain mean.
pub fn similarity_calibrate(recoveries: &[Vec<f64>]) -> Result<Vec<f64>> {
    if recoveries.is_empty() {
        return Err(Error::Empty("recoveries"));
    }
    let s = similarity_matrix(recoveries)?;
    let chosen = select_similar(&s);
    let len = recoveries[0].len();
    Ok((0..len)
        .map(|k| chosen.iter().map(|&i| recoveries[i][k]).sum::<f64>() / chosen.len() as f64)
        .collect())
}

/// Projects points about `origin` and flattens them to `[x0, y0, x1, y1, ..]`.
pub fn flatten_projected(points: &[GeoPoint], origin: GeoPoint) -> Vec<f64> {
    points
        .iter()
        .flat_map(|p| {
            let (x, y) = planar_project(*p, origin);
            [x, y]
        })
        .collect()
}
