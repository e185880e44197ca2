use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

/// Shuttle functionality level: the capability axis of the scenario grid.
///
/// Levels differ in three derived flags only: whether idle drivers respond
/// with a sampled delay (I), whether shuttles may be re-routed mid-leg
/// (III, IV), and whether idle stops are relocated at shift starts (IV).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Sfl {
    I,
    II,
    III,
    IV,
}

impl Sfl {
    pub const ALL: [Sfl; 4] = [Sfl::I, Sfl::II, Sfl::III, Sfl::IV];

    /// Idle drivers act on instructions after a uniformly sampled delay.
    pub fn driver_delay(self) -> bool {
        matches!(self, Sfl::I)
    }

    /// Shuttles may be diverted between stops instead of completing plans.
    pub fn mid_leg_reroute(self) -> bool {
        matches!(self, Sfl::III | Sfl::IV)
    }

    /// Idle stops move to the most frequent trip origins at each shift start.
    pub fn relocates_idle_stops(self) -> bool {
        matches!(self, Sfl::IV)
    }
}

impl fmt::Display for Sfl {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Sfl::I => "I",
            Sfl::II => "II",
            Sfl::III => "III",
            Sfl::IV => "IV",
        };
        write!(f, "{s}")
    }
}

impl FromStr for Sfl {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_uppercase().as_str() {
            "I" | "1" => Ok(Sfl::I),
            "II" | "2" => Ok(Sfl::II),
            "III" | "3" => Ok(Sfl::III),
            "IV" | "4" => Ok(Sfl::IV),
            other => Err(format!(
                "unknown shuttle functionality level {other:?}; allowed: I, II, III, IV"
            )),
        }
    }
}

/// Which count divides fleet cost in the cost-per-trip tables.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CostDenominator {
    /// Completed trip requests.
    Trips,
    /// Riders served (a request may carry up to four riders).
    Riders,
}

impl fmt::Display for CostDenominator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CostDenominator::Trips => write!(f, "trips"),
            CostDenominator::Riders => write!(f, "riders"),
        }
    }
}

impl FromStr for CostDenominator {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "trips" => Ok(CostDenominator::Trips),
            "riders" => Ok(CostDenominator::Riders),
            other => Err(format!("unknown cost denominator {other:?}; allowed: trips, riders")),
        }
    }
}

/// All tunable simulation parameters with their default operating values.
///
/// Times are seconds since service start (06:00). The default service day
/// runs 13 hours to 19:00 with a driver shift boundary at 13:00.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimParams {
    /// Epoch length l in seconds.
    pub epoch_len_s: f64,
    /// Penalty incentivization parameter delta in seconds.
    pub delta_s: f64,
    /// Rolling consideration window L for recent-demand counts, seconds.
    pub window_s: f64,
    /// Driver response time threshold in seconds; samples are clamped here.
    pub response_threshold_s: f64,
    /// Rider capacity per shuttle.
    pub capacity: u32,
    /// End of the service day in seconds since service start.
    pub service_end_s: f64,
    /// Shift start offsets in seconds since service start.
    pub shift_starts_s: Vec<f64>,
    /// Cap on pickup delay a candidate route may add beyond the earliest
    /// achievable pickup for that shuttle, seconds.
    pub wait_slack_cap_s: f64,
    /// Onboard time cap: detour_factor * direct + detour_slack_s.
    pub detour_factor: f64,
    /// Additive part of the onboard time cap, seconds.
    pub detour_slack_s: f64,
    /// Slack appended to a trip's time window in the ridership sampler.
    pub overlap_slack_s: f64,
    /// Maximum requests pooled into one candidate route.
    pub pooling_depth: usize,
    /// Candidate routes kept per shuttle per pooling level.
    pub beam_width: usize,
    /// Node budget for the exact master-problem search.
    pub node_budget: u64,
    /// Hourly shuttle cost rates for the cost table, currency per hour.
    pub cost_rates: Vec<f64>,
    /// Hours of operation used in the cost table.
    pub cost_hours: f64,
    /// Denominator of the cost-per-trip figure.
    pub cost_denominator: CostDenominator,
}

impl Default for SimParams {
    fn default() -> Self {
        SimParams {
            epoch_len_s: 30.0,
            delta_s: 420.0,
            window_s: 3600.0,
            response_threshold_s: 300.0,
            capacity: 6,
            service_end_s: 13.0 * 3600.0,
            shift_starts_s: vec![0.0, 7.0 * 3600.0],
            wait_slack_cap_s: 1800.0,
            detour_factor: 1.5,
            detour_slack_s: 300.0,
            overlap_slack_s: 600.0,
            pooling_depth: 4,
            beam_width: 12,
            node_budget: 1_000_000,
            cost_rates: vec![20.0, 25.0, 30.0, 35.0, 40.0, 45.0, 50.0],
            cost_hours: 13.0,
            cost_denominator: CostDenominator::Riders,
        }
    }
}

impl SimParams {
    /// Basic sanity checks; returns human-readable problems.
    pub fn validate(&self) -> Result<(), Vec<String>> {
        let mut problems = Vec::new();
        if !(self.epoch_len_s > 0.0) {
            problems.push("epoch_len_s must be positive".to_string());
        }
        if !(self.delta_s > 0.0) {
            problems.push("delta_s must be positive".to_string());
        }
        if !(self.window_s > 0.0) {
            problems.push("window_s must be positive".to_string());
        }
        if self.capacity == 0 {
            problems.push("capacity must be at least 1".to_string());
        }
        if !(self.service_end_s > 0.0) {
            problems.push("service_end_s must be positive".to_string());
        }
        if self.pooling_depth == 0 {
            problems.push("pooling_depth must be at least 1".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(problems)
        }
    }
}
