//! Spatial substrate of a service zone: virtual stops, idle stops,
//! pairwise travel time/distance matrices, and the congestion calibration
//! regression applied on top of baseline travel times.

use crate::ids::StopId;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

/// Stop category as recorded in the stops file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StopKind {
    /// Pre-existing fixed-route transit stop or station.
    FixedTransit,
    /// Virtual stop introduced for the on-demand service.
    ReachVirtual,
}

impl StopKind {
    pub fn as_str(self) -> &'static str {
        match self {
            StopKind::FixedTransit => "fixed-transit",
            StopKind::ReachVirtual => "reach-virtual",
        }
    }

    pub fn parse(s: &str) -> Option<StopKind> {
        match s {
            "fixed-transit" => Some(StopKind::FixedTransit),
            "reach-virtual" => Some(StopKind::ReachVirtual),
            _ => None,
        }
    }
}

/// A pickup/dropoff location within the zone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stop {
    pub id: StopId,
    pub lat: f64,
    pub lon: f64,
    pub kind: StopKind,
    pub is_idle: bool,
}

/// Dense row-major square matrix keyed by stop index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    n: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(n: usize) -> Matrix {
        Matrix { n, data: vec![0.0; n * n] }
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Matrix {
        let n = rows.len();
        let mut data = Vec::with_capacity(n * n);
        for row in rows {
            assert_eq!(row.len(), n, "matrix rows must be square");
            data.extend(row);
        }
        Matrix { n, data }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, from: usize, to: usize) -> f64 {
        self.data[from * self.n + to]
    }

    #[inline]
    pub fn set(&mut self, from: usize, to: usize, v: f64) {
        self.data[from * self.n + to] = v;
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix { n: self.n, data: self.data.iter().map(|&v| f(v)).collect() }
    }
}

/// Linear rescaling of baseline travel times toward observed congested times.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationModel {
    pub slope: f64,
    pub intercept: f64,
    /// Descriptor of the exclusion rule applied before fitting.
    pub outlier_rule: String,
    /// Number of points removed by the exclusion rule.
    pub excluded: usize,
}

impl CalibrationModel {
    /// Identity model: calibrated time equals baseline time.
    pub fn identity() -> CalibrationModel {
        CalibrationModel {
            slope: 1.0,
            intercept: 0.0,
            outlier_rule: "none".to_string(),
            excluded: 0,
        }
    }

    /// Applies the model to a baseline time. Zero stays zero (a stop has no
    /// travel cost to itself) and results are clamped at zero.
    pub fn apply(&self, baseline_s: f64) -> f64 {
        if baseline_s == 0.0 {
            0.0
        } else {
            (self.slope * baseline_s + self.intercept).max(0.0)
        }
    }
}

/// A shuttle position: at a stop, or partway along the edge between two
/// stops. `frac` is the traversed share of the edge's travel time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Loc {
    Stop(StopId),
    Edge { from: StopId, to: StopId, frac: f64 },
}

impl fmt::Display for Loc {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Loc::Stop(s) => write!(f, "stop {s}"),
            Loc::Edge { from, to, frac } => write!(f, "edge {from}->{to} @{frac:.3}"),
        }
    }
}

/// First hop a mid-edge shuttle takes to leave its current edge.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EdgeExit {
    /// Continue to the edge's destination stop.
    Continue,
    /// Return to the edge's origin stop.
    TurnBack,
}

/// Travel cost from an arbitrary location to a stop, together with the
/// pivot stop through which a mid-edge start leaves its edge.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TravelFrom {
    pub time_s: f64,
    pub dist_km: f64,
    /// Set when the origin is mid-edge: (exit branch, pivot stop, time and
    /// distance spent reaching the pivot).
    pub via: Option<(EdgeExit, StopId, f64, f64)>,
}

/// One validation problem discovered while loading a zone.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum ValidationIssue {
    #[error("duplicate stop id {0}")]
    DuplicateStopId(StopId),
    #[error("zone has no idle stops")]
    NoIdleStops,
    #[error("matrix {name} is {rows}x{cols}, expected {expected}x{expected}")]
    DimensionMismatch { name: &'static str, rows: usize, cols: usize, expected: usize },
    #[error("matrix {name} entry ({from},{to}) is {value}, expected finite and non-negative")]
    BadEntry { name: &'static str, from: StopId, to: StopId, value: f64 },
    #[error("matrix {name} diagonal entry ({id},{id}) is {value}, expected 0")]
    NonZeroDiagonal { name: &'static str, id: StopId, value: f64 },
    #[error("matrix {name} references unknown stop id {0}", name = .1)]
    UnknownMatrixStop(StopId, &'static str),
}

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("parse error in {path} line {line}: {message}")]
    Parse { path: String, line: usize, message: String },
    #[error("zone validation failed with {} issue(s):\n{}", .0.len(), format_issues(.0))]
    Invalid(Vec<ValidationIssue>),
    #[error("unknown stop id {0}")]
    UnknownStop(StopId),
    #[error("calibration needs at least 2 retained points with varying baselines, got {retained}")]
    Calibration { retained: usize },
    #[error("calibration fit produced non-positive slope {0}; travel scaling must be increasing")]
    CalibrationSlope(f64),
    #[error("bad binary matrix container: {0}")]
    BadContainer(String),
}

fn format_issues(issues: &[ValidationIssue]) -> String {
    issues.iter().map(|i| format!("  - {i}")).collect::<Vec<_>>().join("\n")
}

/// Immutable zone network: stops, idle stops, and calibrated travel data.
///
/// Travel times are calibrated at construction; distances stay as loaded.
/// Safe to share read-only across concurrently running scenarios.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    stops: Vec<Stop>,
    index: BTreeMap<StopId, usize>,
    idle: Vec<StopId>,
    baseline_time: Matrix,
    time: Matrix,
    dist: Matrix,
    calibration: CalibrationModel,
}

impl Network {
    /// Builds a validated network. All validation failures are collected and
    /// reported together rather than stopping at the first.
    pub fn new(
        stops: Vec<Stop>,
        time: Matrix,
        dist: Matrix,
        calibration: CalibrationModel,
    ) -> Result<Network, NetworkError> {
        let mut issues = Vec::new();
        let mut index = BTreeMap::new();
        for (i, stop) in stops.iter().enumerate() {
            if index.insert(stop.id, i).is_some() {
                issues.push(ValidationIssue::DuplicateStopId(stop.id));
            }
        }
        let idle: Vec<StopId> = {
            let mut v: Vec<StopId> =
                stops.iter().filter(|s| s.is_idle).map(|s| s.id).collect();
            v.sort();
            v
        };
        if idle.is_empty() {
            issues.push(ValidationIssue::NoIdleStops);
        }
        let n = stops.len();
        for (name, m) in [("time", &time), ("distance", &dist)] {
            if m.n() != n {
                issues.push(ValidationIssue::DimensionMismatch {
                    name,
                    rows: m.n(),
                    cols: m.n(),
                    expected: n,
                });
                continue;
            }
            for from in 0..n {
                for to in 0..n {
                    let v = m.get(from, to);
                    if !v.is_finite() || v < 0.0 {
                        issues.push(ValidationIssue::BadEntry {
                            name,
                            from: stops[from].id,
                            to: stops[to].id,
                            value: v,
                        });
                    } else if from == to && v != 0.0 {
                        issues.push(ValidationIssue::NonZeroDiagonal {
                            name,
                            id: stops[from].id,
                            value: v,
                        });
                    }
                }
            }
        }
        if !issues.is_empty() {
            return Err(NetworkError::Invalid(issues));
        }
        let calibrated = time.map(|v| calibration.apply(v));
        Ok(Network {
            stops,
            index,
            idle,
            baseline_time: time,
            time: calibrated,
            dist,
            calibration,
        })
    }

    pub fn stops(&self) -> &[Stop] {
        &self.stops
    }

    /// Idle stop ids in ascending order.
    pub fn idle_stops(&self) -> &[StopId] {
        &self.idle
    }

    pub fn calibration(&self) -> &CalibrationModel {
        &self.calibration
    }

    pub fn contains(&self, id: StopId) -> bool {
        self.index.contains_key(&id)
    }

    fn idx(&self, id: StopId) -> Result<usize, NetworkError> {
        self.index.get(&id).copied().ok_or(NetworkError::UnknownStop(id))
    }

    /// Calibrated travel time in seconds between stops.
    pub fn time(&self, from: StopId, to: StopId) -> f64 {
        self.time.get(self.index[&from], self.index[&to])
    }

    /// Travel distance in kilometers between stops.
    pub fn dist(&self, from: StopId, to: StopId) -> f64 {
        self.dist.get(self.index[&from], self.index[&to])
    }

    /// Baseline (uncalibrated) travel time in seconds.
    pub fn baseline_time(&self, from: StopId, to: StopId) -> f64 {
        self.baseline_time.get(self.index[&from], self.index[&to])
    }

    /// Travel cost from any location to a stop.
    ///
    /// A mid-edge shuttle has two ways off its edge: continue to the edge
    /// destination, or turn back to the edge origin; the cheaper branch by
    /// time wins, ties going to Continue. Reverse travel along an edge is
    /// costed at the traversed share of the forward leg.
    pub fn travel_from(&self, loc: Loc, to: StopId) -> TravelFrom {
        match loc {
            Loc::Stop(s) => TravelFrom {
                time_s: self.time(s, to),
                dist_km: self.dist(s, to),
                via: None,
            },
            Loc::Edge { from, to: head, frac } => {
                let leg_t = self.time(from, head);
                let leg_d = self.dist(from, head);
                let cont_pivot_t = (1.0 - frac) * leg_t;
                let cont_pivot_d = (1.0 - frac) * leg_d;
                let cont_t = cont_pivot_t + self.time(head, to);
                let back_pivot_t = frac * leg_t;
                let back_pivot_d = frac * leg_d;
                let back_t = back_pivot_t + self.time(from, to);
                if cont_t <= back_t {
                    TravelFrom {
                        time_s: cont_t,
                        dist_km: cont_pivot_d + self.dist(head, to),
                        via: Some((EdgeExit::Continue, head, cont_pivot_t, cont_pivot_d)),
                    }
                } else {
                    TravelFrom {
                        time_s: back_t,
                        dist_km: back_pivot_d + self.dist(from, to),
                        via: Some((EdgeExit::TurnBack, from, back_pivot_t, back_pivot_d)),
                    }
                }
            }
        }
    }
}

/// Returns the idle stop closest to `p` by travel time from the idle stop
/// to `p`; ties break toward the smallest stop id.
pub fn nearest_idle_stop(
    net: &Network,
    p: StopId,
    idle: &[StopId],
) -> Result<StopId, NetworkError> {
    net.idx(p)?;
    assert!(!idle.is_empty(), "idle stop set must be non-empty");
    let mut best: Option<(f64, StopId)> = None;
    for &s in idle {
        net.idx(s)?;
        let t = net.time(s, p);
        let better = match best {
            None => true,
            Some((bt, bs)) => t < bt || (t == bt && s < bs),
        };
        if better {
            best = Some((t, s));
        }
    }
    Ok(best.expect("non-empty idle set").1)
}

// ---------------------------------------------------------------------------
// Calibration regression
// ---------------------------------------------------------------------------

/// Options for the travel-time calibration fit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrateOptions {
    /// Fit an intercept alongside the slope.
    pub with_intercept: bool,
}

impl Default for CalibrateOptions {
    fn default() -> Self {
        CalibrateOptions { with_intercept: true }
    }
}

/// Fits calibrated = slope * baseline (+ intercept) by ordinary least
/// squares after a robust outlier exclusion pass.
///
/// The first pass is an exhaustive least-median-of-squares line (over all
/// point pairs, or all single-point slopes in intercept-free mode); points
/// whose absolute residual against it exceeds 3 * 1.4826 * MAD of the
/// residuals are excluded, then OLS is fit once on the remainder. When the
/// MAD is zero (at least half the points lie exactly on the LMS line), any
/// point off the line is excluded.
pub fn calibrate(
    points: &[(f64, f64)],
    opts: CalibrateOptions,
) -> Result<CalibrationModel, NetworkError> {
    if points.len() < 2 {
        return Err(NetworkError::Calibration { retained: points.len() });
    }
    let (s0, i0) = lms_line(points, opts.with_intercept);
    let residuals: Vec<f64> =
        points.iter().map(|&(x, y)| (y - (s0 * x + i0)).abs()).collect();
    let mad = median(&mut residuals.clone());
    let cutoff = 3.0 * 1.4826 * mad;
    let retained: Vec<(f64, f64)> = points
        .iter()
        .zip(residuals.iter())
        .filter(|&(_, &r)| r <= cutoff)
        .map(|(&p, _)| p)
        .collect();
    let excluded = points.len() - retained.len();

    let varying = retained.len() >= 2 && retained.iter().any(|&(x, _)| x != retained[0].0);
    if retained.len() < 2 || !varying {
        return Err(NetworkError::Calibration { retained: retained.len() });
    }

    let (slope, intercept) = if opts.with_intercept {
        ols(&retained)
    } else {
        (ols_through_origin(&retained), 0.0)
    };
    if !(slope > 0.0) {
        return Err(NetworkError::CalibrationSlope(slope));
    }
    let rule = if opts.with_intercept {
        "lms first pass; drop |residual| > 3*1.4826*MAD; refit OLS once"
    } else {
        "lms first pass (through origin); drop |residual| > 3*1.4826*MAD; refit OLS once"
    };
    Ok(CalibrationModel { slope, intercept, outlier_rule: rule.to_string(), excluded })
}

fn ols(points: &[(f64, f64)]) -> (f64, f64) {
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let slope = sxy / sxx;
    (slope, my - slope * mx)
}

fn ols_through_origin(points: &[(f64, f64)]) -> f64 {
    let sxy: f64 = points.iter().map(|p| p.0 * p.1).sum();
    let sxx: f64 = points.iter().map(|p| p.0 * p.0).sum();
    sxy / sxx
}

/// Exhaustive least-median-of-squares line. Candidates are all two-point
/// lines (or one-point slopes through the origin); the score is the median
/// absolute residual. Positive-slope candidates are preferred (the
/// calibration is an increasing rescaling, and with three points every
/// pair-line has median residual zero, so the sign carries the decision);
/// remaining ties break by (score, slope, intercept), which keeps the
/// result invariant under permutation of the input.
fn lms_line(points: &[(f64, f64)], with_intercept: bool) -> (f64, f64) {
    // (prefers-negative-or-zero-slope flag, score, slope, intercept)
    let mut best: Option<(bool, f64, f64, f64)> = None;
    let mut consider = |slope: f64, intercept: f64| {
        if !slope.is_finite() || !intercept.is_finite() {
            return;
        }
        let mut res: Vec<f64> =
            points.iter().map(|&(x, y)| (y - (slope * x + intercept)).abs()).collect();
        let score = median(&mut res);
        let cand = (!(slope > 0.0), score, slope, intercept);
        let better = match best {
            None => true,
            Some(b) => {
                (cand.0, cand.1) < (b.0, b.1)
                    || ((cand.0, cand.1) == (b.0, b.1) && (cand.2, cand.3) < (b.2, b.3))
            }
        };
        if better {
            best = Some(cand);
        }
    };
    if with_intercept {
        for i in 0..points.len() {
            for j in 0..points.len() {
                if i == j {
                    continue;
                }
                let (x1, y1) = points[i];
                let (x2, y2) = points[j];
                if x1 == x2 {
                    continue;
                }
                let slope = (y2 - y1) / (x2 - x1);
                consider(slope, y1 - slope * x1);
            }
        }
        // Degenerate input: all x equal. Fall back to a flat line.
        if best.is_none() {
            let mut ys: Vec<f64> = points.iter().map(|p| p.1).collect();
            consider(0.0, median(&mut ys));
        }
    } else {
        for &(x, y) in points {
            if x != 0.0 {
                consider(y / x, 0.0);
            }
        }
        if best.is_none() {
            consider(0.0, 0.0);
        }
    }
    let (_, _, slope, intercept) = best.expect("at least one candidate line");
    (slope, intercept)
}

fn median(values: &mut [f64]) -> f64 {
    assert!(!values.is_empty());
    values.sort_by(|a, b| a.partial_cmp(b).expect("finite residuals"));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

// ---------------------------------------------------------------------------
// File formats
// ---------------------------------------------------------------------------

const CONTAINER_MAGIC: &[u8; 4] = b"ZTMX";
const CONTAINER_VERSION: u8 = 1;

/// Where the travel matrices come from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MatrixSource {
    /// Two CSV files with a header row/column of stop ids.
    Csv { time: String, dist: String },
    /// Single binary container with both matrices.
    Binary { bin: String },
}

/// Loads and validates a zone from a stops CSV and travel matrices.
pub fn load_zone(
    stops_path: &Path,
    matrix: &MatrixSource,
    calibration: CalibrationModel,
) -> Result<Network, NetworkError> {
    let stops = read_stops_csv(stops_path)?;
    let order: Vec<StopId> = stops.iter().map(|s| s.id).collect();
    let (time, dist) = match matrix {
        MatrixSource::Csv { time, dist } => {
            let t = read_matrix_csv(Path::new(time), &order, "time")?;
            let d = read_matrix_csv(Path::new(dist), &order, "distance")?;
            (t, d)
        }
        MatrixSource::Binary { bin } => read_matrix_container(Path::new(bin), &order)?,
    };
    Network::new(stops, time, dist, calibration)
}

/// Writes a zone back out (stops CSV plus both matrix representations are
/// supported; the baseline time matrix is what gets serialized).
pub fn save_zone(
    net: &Network,
    stops_path: &Path,
    matrix: &MatrixSource,
) -> Result<(), NetworkError> {
    write_stops_csv(stops_path, net.stops())?;
    let order: Vec<StopId> = net.stops().iter().map(|s| s.id).collect();
    match matrix {
        MatrixSource::Csv { time, dist } => {
            write_matrix_csv(Path::new(time), &order, |f, t| net.baseline_time(f, t))?;
            write_matrix_csv(Path::new(dist), &order, |f, t| net.dist(f, t))?;
        }
        MatrixSource::Binary { bin } => {
            write_matrix_container(Path::new(bin), net)?;
        }
    }
    Ok(())
}

fn io_err(path: &Path, source: std::io::Error) -> NetworkError {
    NetworkError::Io { path: path.display().to_string(), source }
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> NetworkError {
    NetworkError::Parse { path: path.display().to_string(), line, message: message.into() }
}

/// Reads the stops file: CSV with header `id,lat,lon,kind,is_idle`.
pub fn read_stops_csv(path: &Path) -> Result<Vec<Stop>, NetworkError> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => io_err(path, io),
        other => parse_err(path, 0, format!("{other:?}")),
    })?;
    let mut stops = Vec::new();
    for (i, record) in rdr.records().enumerate() {
        let line = i + 2;
        let r = record.map_err(|e| parse_err(path, line, e.to_string()))?;
        if r.len() != 5 {
            return Err(parse_err(path, line, format!("expected 5 fields, got {}", r.len())));
        }
        let id: u32 =
            r[0].parse().map_err(|_| parse_err(path, line, format!("bad stop id {:?}", &r[0])))?;
        let lat: f64 =
            r[1].parse().map_err(|_| parse_err(path, line, format!("bad lat {:?}", &r[1])))?;
        let lon: f64 =
            r[2].parse().map_err(|_| parse_err(path, line, format!("bad lon {:?}", &r[2])))?;
        let kind = StopKind::parse(&r[3])
            .ok_or_else(|| parse_err(path, line, format!("bad kind {:?}", &r[3])))?;
        let is_idle: bool = r[4]
            .parse()
            .map_err(|_| parse_err(path, line, format!("bad is_idle {:?}", &r[4])))?;
        stops.push(Stop { id: StopId(id), lat, lon, kind, is_idle });
    }
    Ok(stops)
}

pub fn write_stops_csv(path: &Path, stops: &[Stop]) -> Result<(), NetworkError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => io_err(path, io),
        other => parse_err(path, 0, format!("{other:?}")),
    })?;
    w.write_record(["id", "lat", "lon", "kind", "is_idle"])
        .map_err(|e| parse_err(path, 0, e.to_string()))?;
    for s in stops {
        w.write_record([
            s.id.0.to_string(),
            format!("{}", s.lat),
            format!("{}", s.lon),
            s.kind.as_str().to_string(),
            s.is_idle.to_string(),
        ])
        .map_err(|e| parse_err(path, 0, e.to_string()))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

/// Reads one matrix CSV whose first row and column carry stop ids. Rows are
/// travel origins; columns destinations. The id order must match the stops
/// file.
fn read_matrix_csv(
    path: &Path,
    order: &[StopId],
    name: &'static str,
) -> Result<Matrix, NetworkError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => io_err(path, io),
            other => parse_err(path, 0, format!("{other:?}")),
        })?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut header: Vec<StopId> = Vec::new();
    for (i, record) in rdr.records().enumerate() {
        let line = i + 1;
        let r = record.map_err(|e| parse_err(path, line, e.to_string()))?;
        if i == 0 {
            if r.len() != order.len() + 1 {
                return Err(parse_err(
                    path,
                    line,
                    format!("header has {} columns, expected {}", r.len(), order.len() + 1),
                ));
            }
            for field in r.iter().skip(1) {
                let id: u32 = field
                    .parse()
                    .map_err(|_| parse_err(path, line, format!("bad header id {field:?}")))?;
                header.push(StopId(id));
            }
            if header != order {
                return Err(parse_err(
                    path,
                    line,
                    format!("{name} matrix column ids do not match the stops file order"),
                ));
            }
            continue;
        }
        let row_idx = i - 1;
        if row_idx >= order.len() {
            return Err(parse_err(path, line, format!("{name} matrix has too many rows")));
        }
        let row_id: u32 =
            r[0].parse().map_err(|_| parse_err(path, line, format!("bad row id {:?}", &r[0])))?;
        if StopId(row_id) != order[row_idx] {
            return Err(parse_err(
                path,
                line,
                format!("{name} matrix row id {row_id} out of order"),
            ));
        }
        let mut row = Vec::with_capacity(order.len());
        for field in r.iter().skip(1) {
            let v: f64 = field
                .parse()
                .map_err(|_| parse_err(path, line, format!("bad value {field:?}")))?;
            row.push(v);
        }
        if row.len() != order.len() {
            return Err(parse_err(
                path,
                line,
                format!("row has {} values, expected {}", row.len(), order.len()),
            ));
        }
        rows.push(row);
    }
    if rows.len() != order.len() {
        return Err(parse_err(
            path,
            0,
            format!("{name} matrix has {} rows, expected {}", rows.len(), order.len()),
        ));
    }
    Ok(Matrix::from_rows(rows))
}

fn write_matrix_csv(
    path: &Path,
    order: &[StopId],
    value: impl Fn(StopId, StopId) -> f64,
) -> Result<(), NetworkError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => io_err(path, io),
        other => parse_err(path, 0, format!("{other:?}")),
    })?;
    let mut header = vec!["id".to_string()];
    header.extend(order.iter().map(|s| s.0.to_string()));
    w.write_record(&header).map_err(|e| parse_err(path, 0, e.to_string()))?;
    for &from in order {
        let mut row = vec![from.0.to_string()];
        row.extend(order.iter().map(|&to| format!("{}", value(from, to))));
        w.write_record(&row).map_err(|e| parse_err(path, 0, e.to_string()))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

/// Reads the binary matrix container: magic, version byte, stop count,
/// stop ids, then time and distance matrices as little-endian f64.
fn read_matrix_container(path: &Path, order: &[StopId]) -> Result<(Matrix, Matrix), NetworkError> {
    let mut f = std::fs::File::open(path).map_err(|e| io_err(path, e))?;
    let mut buf = Vec::new();
    f.read_to_end(&mut buf).map_err(|e| io_err(path, e))?;
    let bad = |m: &str| NetworkError::BadContainer(m.to_string());
    if buf.len() < 9 {
        return Err(bad("truncated header"));
    }
    if &buf[0..4] != CONTAINER_MAGIC {
        return Err(bad("wrong magic"));
    }
    if buf[4] != CONTAINER_VERSION {
        return Err(NetworkError::BadContainer(format!("unsupported version {}", buf[4])));
    }
    let n = u32::from_le_bytes(buf[5..9].try_into().unwrap()) as usize;
    let ids_end = 9 + 4 * n;
    let expected_len = ids_end + 2 * n * n * 8;
    if buf.len() != expected_len {
        return Err(NetworkError::BadContainer(format!(
            "length {} does not match stop count {n} (expected {expected_len})",
            buf.len()
        )));
    }
    let mut ids = Vec::with_capacity(n);
    for i in 0..n {
        let off = 9 + 4 * i;
        ids.push(StopId(u32::from_le_bytes(buf[off..off + 4].try_into().unwrap())));
    }
    if ids != order {
        return Err(bad("container stop ids do not match the stops file order"));
    }
    let read_matrix = |offset: usize| {
        let mut m = Matrix::zeros(n);
        for i in 0..n * n {
            let off = offset + 8 * i;
            let v = f64::from_le_bytes(buf[off..off + 8].try_into().unwrap());
            m.data[i] = v;
        }
        m
    };
    let time = read_matrix(ids_end);
    let dist = read_matrix(ids_end + n * n * 8);
    Ok((time, dist))
}

pub fn write_matrix_container(path: &Path, net: &Network) -> Result<(), NetworkError> {
    let order: Vec<StopId> = net.stops().iter().map(|s| s.id).collect();
    let n = order.len();
    let mut buf = Vec::with_capacity(9 + 4 * n + 16 * n * n);
    buf.extend_from_slice(CONTAINER_MAGIC);
    buf.push(CONTAINER_VERSION);
    buf.extend_from_slice(&(n as u32).to_le_bytes());
    for id in &order {
        buf.extend_from_slice(&id.0.to_le_bytes());
    }
    for &from in &order {
        for &to in &order {
            buf.extend_from_slice(&net.baseline_time(from, to).to_le_bytes());
        }
    }
    for &from in &order {
        for &to in &order {
            buf.extend_from_slice(&net.dist(from, to).to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| io_err(path, e))?;
    f.write_all(&buf).map_err(|e| io_err(path, e))
}

/// Reads a calibration samples CSV with header `baseline_seconds,observed_seconds`.
pub fn read_calibration_csv(path: &Path) -> Result<Vec<(f64, f64)>, NetworkError> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => io_err(path, io),
        other => parse_err(path, 0, format!("{other:?}")),
    })?;
    let mut points = Vec::new();
    for (i, record) in rdr.records().enumerate() {
        let line = i + 2;
        let r = record.map_err(|e| parse_err(path, line, e.to_string()))?;
        let x: f64 = r[0]
            .parse()
            .map_err(|_| parse_err(path, line, format!("bad baseline {:?}", &r[0])))?;
        let y: f64 = r[1]
            .parse()
            .map_err(|_| parse_err(path, line, format!("bad observed {:?}", &r[1])))?;
        points.push((x, y));
    }
    Ok(points)
}

pub fn write_calibration_csv(path: &Path, points: &[(f64, f64)]) -> Result<(), NetworkError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => io_err(path, io),
        other => parse_err(path, 0, format!("{other:?}")),
    })?;
    w.write_record(["baseline_seconds", "observed_seconds"])
        .map_err(|e| parse_err(path, 0, e.to_string()))?;
    for &(x, y) in points {
        w.write_record([format!("{x}"), format!("{y}")])
            .map_err(|e| parse_err(path, 0, e.to_string()))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_net() -> Network {
        // Stops 0,1,2; idle = {0, 1}.
        let stops = vec![
            Stop { id: StopId(0), lat: 0.0, lon: 0.0, kind: StopKind::ReachVirtual, is_idle: true },
            Stop { id: StopId(1), lat: 0.1, lon: 0.0, kind: StopKind::FixedTransit, is_idle: true },
            Stop { id: StopId(2), lat: 0.0, lon: 0.1, kind: StopKind::ReachVirtual, is_idle: false },
        ];
        let time = Matrix::from_rows(vec![
            vec![0.0, 120.0, 90.0],
            vec![120.0, 0.0, 60.0],
            vec![90.0, 60.0, 0.0],
        ]);
        let dist = Matrix::from_rows(vec![
            vec![0.0, 2.0, 1.5],
            vec![2.0, 0.0, 1.0],
            vec![1.5, 1.0, 0.0],
        ]);
        Network::new(stops, time, dist, CalibrationModel::identity()).unwrap()
    }

    #[test]
    fn nearest_idle_self_when_idle() {
        let net = small_net();
        let idle = net.idle_stops().to_vec();
        assert_eq!(nearest_idle_stop(&net, StopId(0), &idle).unwrap(), StopId(0));
    }

    #[test]
    fn nearest_idle_singleton() {
        let net = small_net();
        assert_eq!(nearest_idle_stop(&net, StopId(2), &[StopId(1)]).unwrap(), StopId(1));
    }

    #[test]
    fn nearest_idle_argmin_over_two() {
        // time(a,p)=120, time(b,p)=90 -> b.
        let net = small_net();
        let got = nearest_idle_stop(&net, StopId(2), &[StopId(0), StopId(1)]).unwrap();
        assert_eq!(net.time(StopId(0), StopId(2)), 90.0);
        assert_eq!(net.time(StopId(1), StopId(2)), 60.0);
        assert_eq!(got, StopId(1));

        // Force the distances of the spec example with a custom matrix.
        let stops = vec![
            Stop { id: StopId(0), lat: 0.0, lon: 0.0, kind: StopKind::ReachVirtual, is_idle: true },
            Stop { id: StopId(1), lat: 0.0, lon: 0.0, kind: StopKind::ReachVirtual, is_idle: true },
            Stop { id: StopId(2), lat: 0.0, lon: 0.0, kind: StopKind::ReachVirtual, is_idle: false },
        ];
        let time = Matrix::from_rows(vec![
            vec![0.0, 50.0, 120.0],
            vec![50.0, 0.0, 90.0],
            vec![120.0, 90.0, 0.0],
        ]);
        let dist = Matrix::zeros(3);
        let mut dist_fixed = dist.clone();
        for i in 0..3 {
            for j in 0..3 {
                if i != j {
                    dist_fixed.set(i, j, 1.0);
                }
            }
        }
        let net = Network::new(stops, time, dist_fixed, CalibrationModel::identity()).unwrap();
        assert_eq!(
            nearest_idle_stop(&net, StopId(2), &[StopId(0), StopId(1)]).unwrap(),
            StopId(1)
        );
    }

    #[test]
    fn nearest_idle_tie_breaks_to_smaller_id() {
        let stops = vec![
            Stop { id: StopId(3), lat: 0.0, lon: 0.0, kind: StopKind::ReachVirtual, is_idle: true },
            Stop { id: StopId(7), lat: 0.0, lon: 0.0, kind: StopKind::ReachVirtual, is_idle: true },
            Stop { id: StopId(9), lat: 0.0, lon: 0.0, kind: StopKind::ReachVirtual, is_idle: false },
        ];
        let mut time = Matrix::zeros(3);
        let mut dist = Matrix::zeros(3);
        for i in 0..3 {
            for j in 0..3 {
                if i != j {
                    time.set(i, j, 100.0);
                    dist.set(i, j, 1.0);
                }
            }
        }
        let net = Network::new(stops, time, dist, CalibrationModel::identity()).unwrap();
        assert_eq!(
            nearest_idle_stop(&net, StopId(9), &[StopId(3), StopId(7)]).unwrap(),
            StopId(3)
        );
    }

    #[test]
    fn nearest_idle_unknown_stop_errors() {
        let net = small_net();
        let idle = net.idle_stops().to_vec();
        assert!(matches!(
            nearest_idle_stop(&net, StopId(99), &idle),
            Err(NetworkError::UnknownStop(StopId(99)))
        ));
    }

    #[test]
    fn calibrate_identity_data() {
        let pts = vec![(100.0, 100.0), (200.0, 200.0), (350.0, 350.0)];
        let m = calibrate(&pts, CalibrateOptions::default()).unwrap();
        assert_eq!(m.slope, 1.0);
        assert_eq!(m.intercept, 0.0);
        assert_eq!(m.excluded, 0);
    }

    #[test]
    fn calibrate_two_point_exact() {
        let pts = vec![(100.0, 150.0), (200.0, 300.0)];
        let m = calibrate(&pts, CalibrateOptions::default()).unwrap();
        assert!((m.slope - 1.5).abs() < 1e-12);
        assert!(m.intercept.abs() < 1e-9);
    }

    #[test]
    fn calibrate_excludes_glitch_then_two_point_fit() {
        let pts = vec![(100.0, 150.0), (200.0, 300.0), (10.0, 100_000.0)];
        let m = calibrate(&pts, CalibrateOptions::default()).unwrap();
        assert_eq!(m.excluded, 1);
        assert!((m.slope - 1.5).abs() < 1e-12, "slope {}", m.slope);
        assert!(m.intercept.abs() < 1e-9, "intercept {}", m.intercept);
    }

    #[test]
    fn calibrate_too_few_points() {
        assert!(matches!(
            calibrate(&[(10.0, 12.0)], CalibrateOptions::default()),
            Err(NetworkError::Calibration { retained: 1 })
        ));
        // Constant baselines cannot identify a slope.
        assert!(calibrate(&[(10.0, 12.0), (10.0, 14.0)], CalibrateOptions::default()).is_err());
    }

    #[test]
    fn calibrate_without_intercept() {
        let pts = vec![(100.0, 150.0), (200.0, 300.0), (400.0, 600.0)];
        let m = calibrate(&pts, CalibrateOptions { with_intercept: false }).unwrap();
        assert!((m.slope - 1.5).abs() < 1e-12);
        assert_eq!(m.intercept, 0.0);
    }

    #[test]
    fn calibration_keeps_zero_at_zero_and_clamps() {
        let m = CalibrationModel {
            slope: 1.2,
            intercept: -100.0,
            outlier_rule: "none".into(),
            excluded: 0,
        };
        assert_eq!(m.apply(0.0), 0.0);
        assert_eq!(m.apply(50.0), 0.0); // 60 - 100 clamps to 0
        assert!((m.apply(200.0) - 140.0).abs() < 1e-12);
    }

    #[test]
    fn validation_lists_all_issues() {
        let stops = vec![
            Stop { id: StopId(0), lat: 0.0, lon: 0.0, kind: StopKind::ReachVirtual, is_idle: false },
            Stop { id: StopId(0), lat: 0.0, lon: 0.0, kind: StopKind::ReachVirtual, is_idle: false },
        ];
        let mut time = Matrix::zeros(2);
        time.set(0, 1, -5.0);
        let dist = Matrix::zeros(3);
        let err = Network::new(stops, time, dist, CalibrationModel::identity()).unwrap_err();
        match err {
            NetworkError::Invalid(issues) => {
                assert!(issues.iter().any(|i| matches!(i, ValidationIssue::DuplicateStopId(_))));
                assert!(issues.iter().any(|i| matches!(i, ValidationIssue::NoIdleStops)));
                assert!(issues
                    .iter()
                    .any(|i| matches!(i, ValidationIssue::BadEntry { name: "time", .. })));
                assert!(issues
                    .iter()
                    .any(|i| matches!(i, ValidationIssue::DimensionMismatch { .. })));
            }
            other => panic!("expected Invalid, got {other:?}"),
        }
    }

    #[test]
    fn negative_entry_names_the_cell() {
        let stops = vec![
            Stop { id: StopId(4), lat: 0.0, lon: 0.0, kind: StopKind::ReachVirtual, is_idle: true },
            Stop { id: StopId(8), lat: 0.0, lon: 0.0, kind: StopKind::ReachVirtual, is_idle: false },
        ];
        let mut time = Matrix::zeros(2);
        time.set(0, 1, -1.0);
        time.set(1, 0, 10.0);
        let mut dist = Matrix::zeros(2);
        dist.set(0, 1, 1.0);
        dist.set(1, 0, 1.0);
        let err = Network::new(stops, time, dist, CalibrationModel::identity()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("(4,8)"), "message should name the cell: {msg}");
    }

    #[test]
    fn mid_edge_travel_picks_cheaper_branch() {
        let net = small_net();
        // On edge 0->1 (120 s leg), 25% in. To stop 2:
        //   continue: 0.75*120 + time(1,2)=60 -> 150
        //   turn back: 0.25*120 + time(0,2)=90 -> 120
        let loc = Loc::Edge { from: StopId(0), to: StopId(1), frac: 0.25 };
        let tf = net.travel_from(loc, StopId(2));
        assert_eq!(tf.time_s, 120.0);
        match tf.via {
            Some((EdgeExit::TurnBack, pivot, t, d)) => {
                assert_eq!(pivot, StopId(0));
                assert_eq!(t, 30.0);
                assert_eq!(d, 0.5);
            }
            other => panic!("expected turn-back via stop 0, got {other:?}"),
        }
        // 75% in, continuing is cheaper.
        let loc = Loc::Edge { from: StopId(0), to: StopId(1), frac: 0.75 };
        let tf = net.travel_from(loc, StopId(2));
        assert_eq!(tf.time_s, 0.25 * 120.0 + 60.0);
        assert!(matches!(tf.via, Some((EdgeExit::Continue, StopId(1), _, _))));
    }

    #[test]
    fn zone_roundtrip_csv_and_binary() {
        let net = small_net();
        let dir = tempfile::tempdir().unwrap();
        let stops = dir.path().join("stops.csv");
        let time = dir.path().join("time.csv");
        let dist = dir.path().join("dist.csv");
        let csv_src = MatrixSource::Csv {
            time: time.display().to_string(),
            dist: dist.display().to_string(),
        };
        save_zone(&net, &stops, &csv_src).unwrap();
        let back = load_zone(&stops, &csv_src, CalibrationModel::identity()).unwrap();
        assert_eq!(net, back);

        let bin = dir.path().join("matrix.bin");
        let bin_src = MatrixSource::Binary { bin: bin.display().to_string() };
        save_zone(&net, &stops, &bin_src).unwrap();
        let back = load_zone(&stops, &bin_src, CalibrationModel::identity()).unwrap();
        assert_eq!(net, back);
    }
}
