//! Check-in ingestion and synthetic trajectories.
//!
//! Check-in files are tab separated, one visit per line:
//!
//! ```text
//! <user_id>\t<time>\t<lat>\t<lon>
//! ```
//!
//! where `<time>` is RFC 3339 (`2012-04-03T18:00:09Z`) or a naive
//! `YYYY-MM-DDTHH:MM:SS` read as UTC. Blank lines and lines starting with `#`
//! are ignored.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use chrono::{DateTime, NaiveDateTime};
use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fed::Client;
use crate::geo::{GeoPoint, StampedPoint, Trajectory};
use crate::network::{NodeId, RoadNetwork};
use crate::rng::{stream_rng, Stream};

/// Seconds between resampled points.
pub const RESAMPLE_SECS: i64 = 600;

/// Base timestamp of synthetic trajectories (2023-11-14 22:13:20 UTC).
pub const SYNTHETIC_EPOCH: i64 = 1_700_000_000;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestSummary {
    pub lines: usize,
    pub malformed: usize,
    pub users: usize,
    pub points: usize,
}

fn parse_time(s: &str) -> Option<i64> {
    if let Ok(t) = DateTime::parse_from_rfc3339(s) {
        return Some(t.timestamp());
    }
    NaiveDateTime::parse_from_str(s, "%Y-%m-%dT%H:%M:%S")
        .ok()
        .map(|t| t.and_utc().timestamp())
}

fn parse_line(line: &str) -> Option<(String, StampedPoint)> {
    let mut f = line.split('\t');
    let user = f.next()?.trim();
    let t = parse_time(f.next()?.trim())?;
    let lat: f64 = f.next()?.trim().parse().ok()?;
    let lon: f64 = f.next()?.trim().parse().ok()?;
    if f.next().is_some() || user.is_empty() || t < 0 {
        return None;
    }
    let point = GeoPoint::new(lat, lon).ok()?;
    Some((user.to_string(), StampedPoint { t, point }))
}

/// Keeps one point per `RESAMPLE_SECS` slot counted from the first point:
/// the one closest to the slot start (earlier wins ties).
pub fn decimate(points: &[StampedPoint]) -> Vec<StampedPoint> {
    let Some(first) = points.first() else {
        return Vec::new();
    };
    let t0 = first.t;
    let mut out: Vec<(i64, StampedPoint)> = Vec::new();
    for sp in points {
        let slot = (sp.t - t0).div_euclid(RESAMPLE_SECS);
        let gap = sp.t - (t0 + slot * RESAMPLE_SECS);
        match out.last_mut() {
            Some((s, kept)) if *s == slot => {
                if gap < kept.t - (t0 + slot * RESAMPLE_SECS) {
                    *kept = *sp;
                }
            }
            _ => out.push((slot, *sp)),
        }
    }
    out.into_iter().map(|(_, sp)| sp).collect()
}

/// Parses check-in text into per-user trajectories, sorted by user id.
pub fn parse_checkins(text: &str) -> Result<(Vec<Trajectory>, IngestSummary)> {
    let mut summary = IngestSummary::default();
    let mut by_user: BTreeMap<String, Vec<StampedPoint>> = BTreeMap::new();
    for line in text.lines() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        summary.lines += 1;
        match parse_line(line) {
            Some((user, sp)) => by_user.entry(user).or_default().push(sp),
            None => summary.malformed += 1,
        }
    }
    if summary.malformed * 2 > summary.lines {
        return Err(Error::Format(format!(
            "{} of {} check-in lines are malformed",
            summary.malformed, summary.lines
        )));
    }
    if summary.malformed > 0 {
        log::warn!("skipped {} malformed check-in lines of {}", summary.malformed, summary.lines);
    }
    let mut out = Vec::with_capacity(by_user.len());
    for (user, mut pts) in by_user {
        pts.sort_by_key(|sp| sp.t);
        pts.dedup_by_key(|sp| sp.t);
        let pts = decimate(&pts);
        summary.points += pts.len();
        out.push(Trajectory::new(user, pts)?);
    }
    summary.users = out.len();
    Ok((out, summary))
}

pub fn ingest_checkins(path: &Path) -> Result<(Vec<Trajectory>, IngestSummary)> {
    parse_checkins(&std::fs::read_to_string(path)?)
}

/// Serializes trajectories in the check-in format with UTC times.
pub fn format_checkins(trajs: &[Trajectory]) -> String {
    let mut s = String::new();
    for tr in trajs {
        for sp in tr.points() {
            let t = DateTime::from_timestamp(sp.t, 0).unwrap_or_default();
            let _ = writeln!(
                s,
                "{}\t{}\t{}\t{}",
                tr.user_id,
                t.format("%Y-%m-%dT%H:%M:%SZ"),
                sp.point.lat,
                sp.point.lon
            );
        }
    }
    s
}

pub fn write_checkins(path: &Path, trajs: &[Trajectory]) -> Result<()> {
    std::fs::write(path, format_checkins(trajs))?;
    Ok(())
}

/// Random walks on `net`: start at a uniform node of a component with at least
/// `len` nodes, move to a uniform neighbor, never straight back unless the
/// node is a dead end. Points are `RESAMPLE_SECS` apart.
pub fn gen_synthetic(net: &RoadNetwork, n_users: usize, len: usize, seed: u64) -> Result<Vec<Trajectory>> {
    if len == 0 {
        return Err(Error::invalid("walk length must be positive"));
    }
    let starts: Vec<NodeId> = net
        .components()
        .into_iter()
        .filter(|c| c.len() >= len)
        .flatten()
        .collect();
    if starts.is_empty() {
        return Err(Error::invalid(format!(
            "no connected component has {len} nodes for a walk of that length"
        )));
    }
    let mut out = Vec::with_capacity(n_users);
    for u in 0..n_users {
        let mut rng = stream_rng(seed, Stream::Data, u as u64, 0);
        let mut node = *starts.choose(&mut rng).expect("non-empty");
        let mut prev: Option<NodeId> = None;
        let t0 = SYNTHETIC_EPOCH + RESAMPLE_SECS * rng.random_range(0..144);
        let mut pts = Vec::with_capacity(len);
        for i in 0..len {
            pts.push(StampedPoint {
                t: t0 + RESAMPLE_SECS * i as i64,
                point: net.point(node)?,
            });
            let nbrs: Vec<NodeId> = net.neighbors(node)?.map(|(v, _)| v).collect();
            let forward: Vec<NodeId> = nbrs.iter().copied().filter(|v| Some(*v) != prev).collect();
            let pool = if forward.is_empty() { &nbrs } else { &forward };
            let Some(&next) = pool.choose(&mut rng) else {
                if i + 1 < len {
                    return Err(Error::invalid(format!("walk stuck at isolated node {node}")));
                }
                break;
            };
            prev = Some(node);
            node = next;
        }
        out.push(Trajectory::new(format!("u{u:04}"), pts)?);
    }
    Ok(out)
}

pub fn to_clients(trajs: &[Trajectory]) -> Vec<Client> {
    trajs
        .iter()
        .map(|t| Client {
            user_id: t.user_id.clone(),
            points: t.points().to_vec(),
        })
        .collect()
}
