//! Trip demand: the request model, epoch batching, and the seeded sampler
//! that builds elevated-ridership days from a pool of preceding days.

use crate::ids::{RequestId, StopId, UserId};
use crate::network::{nearest_idle_stop, Network, NetworkError};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;
use thiserror::Error;

/// Lifecycle of a request inside the simulation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RequestState {
    Pending,
    Assigned,
    PickedUp,
    Completed,
}

/// A trip demand: pickup, dropoff, nearest idle stop to the pickup, and the
/// earliest pickup time, with a rider count of one to four.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Request {
    pub id: RequestId,
    pub user_id: UserId,
    pub p: StopId,
    pub d: StopId,
    pub p_idle: StopId,
    /// Earliest pickup time in seconds since service start.
    pub e: f64,
    pub riders: u32,
}

/// Provenance of a request within a (possibly scaled) demand day.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum SourceTag {
    Base,
    /// Sampled from the pool day at this index.
    Pool(usize),
}

impl SourceTag {
    pub fn as_string(&self) -> String {
        match self {
            SourceTag::Base => "base".to_string(),
            SourceTag::Pool(i) => format!("pool:{i}"),
        }
    }

    pub fn parse(s: &str) -> Option<SourceTag> {
        if s == "base" {
            return Some(SourceTag::Base);
        }
        s.strip_prefix("pool:").and_then(|i| i.parse().ok().map(SourceTag::Pool))
    }
}

/// A day of demand, time-ordered by earliest pickup time (ties by id).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemandDay {
    requests: Vec<Request>,
    tags: Vec<SourceTag>,
}

#[derive(Debug, Error)]
pub enum DemandError {
    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("parse error in {path} line {line}: {message}")]
    Parse { path: String, line: usize, message: String },
    #[error("request {id}: {message}")]
    InvalidRequest { id: RequestId, message: String },
    #[error("duplicate request id {0}")]
    DuplicateId(RequestId),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error("ridership multiplier must be in 1..=3, got {0}")]
    BadMultiplier(u32),
    #[error("multiplier {0} needs a non-empty pool of preceding days")]
    EmptyPool(u32),
}

impl DemandDay {
    /// Builds a day from requests, validating invariants and sorting by
    /// (e, id). `p_idle` is recomputed against the network's idle stops.
    pub fn new(
        mut requests: Vec<Request>,
        tags: Vec<SourceTag>,
        net: &Network,
        day_end_s: f64,
    ) -> Result<DemandDay, DemandError> {
        assert_eq!(requests.len(), tags.len(), "one tag per request");
        let mut seen = BTreeMap::new();
        for r in &mut requests {
            if r.p == r.d {
                return Err(DemandError::InvalidRequest {
                    id: r.id,
                    message: format!("pickup equals dropoff ({})", r.p),
                });
            }
            if !(1..=4).contains(&r.riders) {
                return Err(DemandError::InvalidRequest {
                    id: r.id,
                    message: format!("riders {} outside 1..=4", r.riders),
                });
            }
            if !(0.0..=day_end_s).contains(&r.e) {
                return Err(DemandError::InvalidRequest {
                    id: r.id,
                    message: format!("earliest pickup {} outside the service day", r.e),
                });
            }
            r.p_idle = nearest_idle_stop(net, r.p, net.idle_stops())?;
            // Dropoff must exist too; pickup was checked by nearest_idle_stop.
            if !net.contains(r.d) {
                return Err(DemandError::Network(NetworkError::UnknownStop(r.d)));
            }
            if seen.insert(r.id, ()).is_some() {
                return Err(DemandError::DuplicateId(r.id));
            }
        }
        let mut order: Vec<usize> = (0..requests.len()).collect();
        order.sort_by(|&a, &b| {
            (requests[a].e, requests[a].id).partial_cmp(&(requests[b].e, requests[b].id)).unwrap()
        });
        let requests: Vec<Request> = order.iter().map(|&i| requests[i].clone()).collect();
        let tags: Vec<SourceTag> = order.iter().map(|&i| tags[i].clone()).collect();
        Ok(DemandDay { requests, tags })
    }

    pub fn requests(&self) -> &[Request] {
        &self.requests
    }

    pub fn tags(&self) -> &[SourceTag] {
        &self.tags
    }

    pub fn len(&self) -> usize {
        self.requests.len()
    }

    pub fn is_empty(&self) -> bool {
        self.requests.is_empty()
    }

    /// Total riders across all requests.
    pub fn users(&self) -> u64 {
        self.requests.iter().map(|r| r.riders as u64).sum()
    }
}

/// Requests whose earliest pickup falls in epoch `tau`, i.e. in the
/// half-open interval [tau*l, (tau+1)*l). Every request belongs to exactly
/// one epoch.
pub fn batch_epoch(day: &DemandDay, tau: u64, epoch_len_s: f64) -> Vec<&Request> {
    assert!(epoch_len_s > 0.0);
    let lo = tau as f64 * epoch_len_s;
    let hi = (tau + 1) as f64 * epoch_len_s;
    day.requests.iter().filter(|r| r.e >= lo && r.e < hi).collect()
}

/// Outcome of ridership scaling; `shortfall` is set when the pool ran out
/// before the target trip count was reached.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaledDay {
    pub day: DemandDay,
    pub shortfall: Option<Shortfall>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Shortfall {
    pub target_trips: usize,
    pub achieved_trips: usize,
    pub rejected_overlaps: usize,
}

/// A user's temporal footprint: [e, e + direct travel time + slack].
fn window(net: &Network, r: &Request, slack_s: f64) -> (f64, f64) {
    (r.e, r.e + net.time(r.p, r.d) + slack_s)
}

fn overlaps(a: (f64, f64), b: (f64, f64)) -> bool {
    a.0 <= b.1 && b.0 <= a.1
}

/// Scales a base day to `multiplier` times its trip count by sampling trips
/// from preceding days, keeping original times-of-day.
///
/// A sampled trip for a user already holding accepted trips is taken only
/// if its time window does not overlap any of that user's accepted windows.
/// Sampling order is a seeded uniform draw without replacement over the
/// whole pool. Sampled requests receive fresh ids above the base day's
/// maximum; user ids are kept as-is.
pub fn scale_ridership(
    base: &DemandDay,
    pool: &[DemandDay],
    multiplier: u32,
    seed: u64,
    net: &Network,
    day_end_s: f64,
    overlap_slack_s: f64,
) -> Result<ScaledDay, DemandError> {
    if !(1..=3).contains(&multiplier) {
        return Err(DemandError::BadMultiplier(multiplier));
    }
    if multiplier == 1 {
        return Ok(ScaledDay { day: base.clone(), shortfall: None });
    }
    if pool.is_empty() {
        return Err(DemandError::EmptyPool(multiplier));
    }

    let target = multiplier as usize * base.len();
    let mut windows: BTreeMap<UserId, Vec<(f64, f64)>> = BTreeMap::new();
    for r in base.requests() {
        windows.entry(r.user_id).or_default().push(window(net, r, overlap_slack_s));
    }

    // Deterministic candidate order: pool day index, then position in day,
    // shuffled by the seeded rng.
    let mut candidates: Vec<(usize, usize)> = pool
        .iter()
        .enumerate()
        .flat_map(|(di, day)| (0..day.len()).map(move |ri| (di, ri)))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    candidates.shuffle(&mut rng);

    let mut requests: Vec<Request> = base.requests().to_vec();
    let mut tags: Vec<SourceTag> = base.tags().to_vec();
    let mut next_id = base.requests().iter().map(|r| r.id.0).max().map_or(0, |m| m + 1);
    let mut rejected = 0usize;

    for (di, ri) in candidates {
        if requests.len() >= target {
            break;
        }
        let candidate = &pool[di].requests()[ri];
        let w = window(net, candidate, overlap_slack_s);
        let user_windows = windows.entry(candidate.user_id).or_default();
        if user_windows.iter().any(|&existing| overlaps(w, existing)) {
            rejected += 1;
            continue;
        }
        user_windows.push(w);
        let mut r = candidate.clone();
        r.id = RequestId(next_id);
        next_id += 1;
        requests.push(r);
        tags.push(SourceTag::Pool(di));
    }

    let achieved = requests.len();
    let shortfall = if achieved < target {
        Some(Shortfall { target_trips: target, achieved_trips: achieved, rejected_overlaps: rejected })
    } else {
        None
    };
    let day = DemandDay::new(requests, tags, net, day_end_s)?;
    Ok(ScaledDay { day, shortfall })
}

// ---------------------------------------------------------------------------
// Requests file I/O
// ---------------------------------------------------------------------------

fn io_err(path: &Path, source: std::io::Error) -> DemandError {
    DemandError::Io { path: path.display().to_string(), source }
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> DemandError {
    DemandError::Parse { path: path.display().to_string(), line, message: message.into() }
}

/// Reads a requests CSV with header `id,user_id,p,d,e_seconds,riders` and an
/// optional trailing `source_tag` column.
pub fn read_requests_csv(
    path: &Path,
    net: &Network,
    day_end_s: f64,
) -> Result<DemandDay, DemandError> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => io_err(path, io),
        other => parse_err(path, 0, format!("{other:?}")),
    })?;
    let has_tag = rdr
        .headers()
        .map_err(|e| parse_err(path, 1, e.to_string()))?
        .iter()
        .any(|h| h == "source_tag");
    let mut requests = Vec::new();
    let mut tags = Vec::new();
    for (i, record) in rdr.records().enumerate() {
        let line = i + 2;
        let r = record.map_err(|e| parse_err(path, line, e.to_string()))?;
        let expected = if has_tag { 7 } else { 6 };
        if r.len() != expected {
            return Err(parse_err(
                path,
                line,
                format!("expected {expected} fields, got {}", r.len()),
            ));
        }
        let parse_u64 = |idx: usize, what: &str| -> Result<u64, DemandError> {
            r[idx].parse().map_err(|_| parse_err(path, line, format!("bad {what} {:?}", &r[idx])))
        };
        let id = RequestId(parse_u64(0, "id")?);
        let user = UserId(parse_u64(1, "user_id")?);
        let p: u32 =
            r[2].parse().map_err(|_| parse_err(path, line, format!("bad p {:?}", &r[2])))?;
        let d: u32 =
            r[3].parse().map_err(|_| parse_err(path, line, format!("bad d {:?}", &r[3])))?;
        let e: f64 = r[4]
            .parse()
            .map_err(|_| parse_err(path, line, format!("bad e_seconds {:?}", &r[4])))?;
        let riders: u32 =
            r[5].parse().map_err(|_| parse_err(path, line, format!("bad riders {:?}", &r[5])))?;
        let tag = if has_tag {
            SourceTag::parse(&r[6])
                .ok_or_else(|| parse_err(path, line, format!("bad source_tag {:?}", &r[6])))?
        } else {
            SourceTag::Base
        };
        requests.push(Request {
            id,
            user_id: user,
            p: StopId(p),
            d: StopId(d),
            p_idle: StopId(p), // recomputed by DemandDay::new
            e,
            riders,
        });
        tags.push(tag);
    }
    DemandDay::new(requests, tags, net, day_end_s)
}

/// Writes a demand day, including the provenance column.
pub fn write_requests_csv(path: &Path, day: &DemandDay) -> Result<(), DemandError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => io_err(path, io),
        other => parse_err(path, 0, format!("{other:?}")),
    })?;
    w.write_record(["id", "user_id", "p", "d", "e_seconds", "riders", "source_tag"])
        .map_err(|e| parse_err(path, 0, e.to_string()))?;
    for (r, tag) in day.requests().iter().zip(day.tags()) {
        w.write_record([
            r.id.to_string(),
            r.user_id.to_string(),
            r.p.to_string(),
            r.d.to_string(),
            format!("{}", r.e),
            r.riders.to_string(),
            tag.as_string(),
        ])
        .map_err(|e| parse_err(path, 0, e.to_string()))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{CalibrationModel, Matrix, Stop, StopKind};

    fn grid_net(n: usize) -> Network {
        let stops: Vec<Stop> = (0..n)
            .map(|i| Stop {
                id: StopId(i as u32),
                lat: i as f64 * 0.01,
                lon: 0.0,
                kind: StopKind::ReachVirtual,
                is_idle: i == 0,
            })
            .collect();
        let mut time = Matrix::zeros(n);
        let mut dist = Matrix::zeros(n);
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    let v = 60.0 * (i as f64 - j as f64).abs();
                    time.set(i, j, v);
                    dist.set(i, j, v / 120.0);
                }
            }
        }
        Network::new(stops, time, dist, CalibrationModel::identity()).unwrap()
    }

    fn req(id: u64, user: u64, p: u32, d: u32, e: f64) -> Request {
        Request {
            id: RequestId(id),
            user_id: UserId(user),
            p: StopId(p),
            d: StopId(d),
            p_idle: StopId(0),
            e,
            riders: 1,
        }
    }

    fn day(net: &Network, requests: Vec<Request>) -> DemandDay {
        let tags = vec![SourceTag::Base; requests.len()];
        DemandDay::new(requests, tags, net, 46_800.0).unwrap()
    }

    #[test]
    fn batch_by_half_open_interval() {
        let net = grid_net(4);
        let d = day(&net, vec![req(0, 0, 1, 2, 45.0), req(1, 1, 2, 3, 30.0), req(2, 2, 1, 3, 29.9)]);
        // e=45 lands in epoch 1 ([30,60)); e=30 exactly on the boundary also
        // belongs to epoch 1, not epoch 0.
        let by_epoch: Vec<Vec<u64>> = (0..3)
            .map(|tau| batch_epoch(&d, tau, 30.0).iter().map(|r| r.id.0).collect())
            .collect();
        assert_eq!(by_epoch[0], vec![2]);
        assert_eq!(by_epoch[1], vec![1, 0]);
        assert!(by_epoch[2].is_empty());
    }

    #[test]
    fn empty_day_batches_empty() {
        let net = grid_net(3);
        let d = day(&net, vec![]);
        for tau in 0..10 {
            assert!(batch_epoch(&d, tau, 30.0).is_empty());
        }
    }

    #[test]
    fn epochs_partition_the_day() {
        let net = grid_net(6);
        let mut rs = Vec::new();
        for i in 0..50u64 {
            rs.push(req(i, i, 1 + (i % 4) as u32, 5, (i as f64 * 97.3) % 46_000.0));
        }
        let d = day(&net, rs);
        let mut seen = Vec::new();
        for tau in 0..=(46_800.0 / 30.0) as u64 {
            for r in batch_epoch(&d, tau, 30.0) {
                seen.push(r.id);
            }
        }
        seen.sort();
        let mut all: Vec<RequestId> = d.requests().iter().map(|r| r.id).collect();
        all.sort();
        assert_eq!(seen, all);
    }

    #[test]
    fn multiplier_one_returns_base() {
        let net = grid_net(4);
        let base = day(&net, vec![req(0, 0, 1, 2, 100.0)]);
        let out = scale_ridership(&base, &[], 1, 7, &net, 46_800.0, 600.0).unwrap();
        assert_eq!(out.day, base);
        assert!(out.shortfall.is_none());
    }

    #[test]
    fn scaling_doubles_and_triples_trip_counts() {
        let net = grid_net(8);
        // 39-trip base day mirrors the smaller pilot zone's base ridership.
        let base_reqs: Vec<Request> =
            (0..39).map(|i| req(i, i, 1 + (i % 6) as u32, 7, 600.0 * i as f64)).collect();
        let base = day(&net, base_reqs);
        let pool: Vec<DemandDay> = (0..3)
            .map(|p| {
                let rs: Vec<Request> = (0..39)
                    .map(|i| {
                        req(1000 + p * 100 + i, 1000 + p * 100 + i, 1 + ((i + p) % 6) as u32, 7, 550.0 * i as f64 + 13.0)
                    })
                    .collect();
                day(&net, rs)
            })
            .collect();
        let two = scale_ridership(&base, &pool, 2, 42, &net, 46_800.0, 600.0).unwrap();
        assert_eq!(two.day.len(), 78);
        assert!(two.shortfall.is_none());
        let three = scale_ridership(&base, &pool, 3, 42, &net, 46_800.0, 600.0).unwrap();
        assert_eq!(three.day.len(), 117);
        assert!(three.shortfall.is_none());
    }

    #[test]
    fn overlapping_candidate_for_same_user_is_rejected() {
        let net = grid_net(4);
        // Base user 5 holds window [300, 300 + t(1,2)=60 + 600] = [300, 960].
        let base = day(&net, vec![req(0, 5, 1, 2, 300.0)]);
        // Candidate window [100, 100+60+600=760] overlaps [300,960].
        let pool = vec![day(&net, vec![req(10, 5, 2, 3, 100.0), req(11, 9, 2, 3, 100.0)])];
        let out = scale_ridership(&base, &pool, 2, 1, &net, 46_800.0, 600.0).unwrap();
        assert_eq!(out.day.len(), 2);
        let sampled: Vec<&Request> = out
            .day
            .requests()
            .iter()
            .zip(out.day.tags())
            .filter(|(_, t)| **t != SourceTag::Base)
            .map(|(r, _)| r)
            .collect();
        assert_eq!(sampled.len(), 1);
        assert_eq!(sampled[0].user_id, UserId(9));
    }

    #[test]
    fn pool_exhaustion_reports_shortfall() {
        let net = grid_net(4);
        let base = day(&net, vec![req(0, 0, 1, 2, 100.0), req(1, 1, 1, 2, 200.0)]);
        let pool = vec![day(&net, vec![req(10, 7, 2, 3, 400.0)])];
        let out = scale_ridership(&base, &pool, 2, 3, &net, 46_800.0, 600.0).unwrap();
        assert_eq!(out.day.len(), 3);
        let s = out.shortfall.expect("shortfall expected");
        assert_eq!(s.target_trips, 4);
        assert_eq!(s.achieved_trips, 3);
    }

    #[test]
    fn same_seed_is_reproducible() {
        let net = grid_net(8);
        let base_reqs: Vec<Request> =
            (0..10).map(|i| req(i, i, 1 + (i % 6) as u32, 7, 600.0 * i as f64)).collect();
        let base = day(&net, base_reqs);
        let pool: Vec<DemandDay> = (0..2)
            .map(|p| {
                let rs: Vec<Request> = (0..30)
                    .map(|i| req(1000 + p * 100 + i, 2000 + i, 1 + ((i + p) % 6) as u32, 7, 700.0 * i as f64))
                    .collect();
                day(&net, rs)
            })
            .collect();
        let a = scale_ridership(&base, &pool, 2, 99, &net, 46_800.0, 600.0).unwrap();
        let b = scale_ridership(&base, &pool, 2, 99, &net, 46_800.0, 600.0).unwrap();
        assert_eq!(a, b);
        let c = scale_ridership(&base, &pool, 2, 100, &net, 46_800.0, 600.0).unwrap();
        assert!(c.day.len() == a.day.len());
    }

    #[test]
    fn scaled_day_user_windows_are_disjoint() {
        let net = grid_net(8);
        let base_reqs: Vec<Request> =
            (0..20).map(|i| req(i, i % 5, 1 + (i % 6) as u32, 7, 2000.0 * i as f64)).collect();
        let base = day(&net, base_reqs);
        let pool: Vec<DemandDay> = (0..2)
            .map(|p| {
                let rs: Vec<Request> = (0..40)
                    .map(|i| req(1000 + p * 100 + i, (i % 7) as u64, 1 + ((i + p) % 6) as u32, 7, 997.0 * i as f64))
                    .collect();
                day(&net, rs)
            })
            .collect();
        let out = scale_ridership(&base, &pool, 3, 5, &net, 46_800.0, 600.0).unwrap();
        let mut per_user: BTreeMap<UserId, Vec<(f64, f64)>> = BTreeMap::new();
        for r in out.day.requests() {
            per_user.entry(r.user_id).or_default().push(window(&net, r, 600.0));
        }
        for (_, mut ws) in per_user {
            ws.sort_by(|a, b| a.partial_cmp(b).unwrap());
            for pair in ws.windows(2) {
                assert!(pair[0].1 < pair[1].0, "windows overlap: {pair:?}");
            }
        }
    }

    #[test]
    fn requests_csv_roundtrip() {
        let net = grid_net(4);
        let d = day(&net, vec![req(3, 9, 1, 2, 45.5), req(1, 4, 2, 3, 30.0)]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("day.csv");
        write_requests_csv(&path, &d).unwrap();
        let back = read_requests_csv(&path, &net, 46_800.0).unwrap();
        assert_eq!(d, back);
    }

    #[test]
    fn rejects_p_equals_d_and_bad_riders() {
        let net = grid_net(4);
        let mut r = req(0, 0, 1, 1, 10.0);
        let e = DemandDay::new(vec![r.clone()], vec![SourceTag::Base], &net, 46_800.0);
        assert!(matches!(e, Err(DemandError::InvalidRequest { .. })));
        r = req(0, 0, 1, 2, 10.0);
        r.riders = 5;
        let e = DemandDay::new(vec![r], vec![SourceTag::Base], &net, 46_800.0);
        assert!(matches!(e, Err(DemandError::InvalidRequest { .. })));
    }
}
