//! Arbiter uptime bounds, the depositor's safe-exit check, and a simulated
//! dispute against a given uptime schedule.

use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{run_scenario, ArbiterConfig, HarnessError, ScenarioConfig};
use crate::actors::{Downtime, EnvEvent, OperatorBehavior, World};
use crate::digest::Hash32;
use crate::keys::SigScheme;
use crate::registry::Timelocks;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AvailabilityParams {
    pub t1: Duration,
    pub t2: Duration,
    pub t3: Duration,
    pub t_op: Duration,
    pub t_check: Duration,
    pub wsp: Duration,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AvailabilityReport {
    /// T3 − (T1 + T2).
    pub delta: Duration,
    /// Fraction of any T3 window the arbiter must be online to act inside
    /// every dispute window.
    pub uptime_dispute: f64,
    /// Fraction needed to check in once per weak subjectivity period.
    pub uptime_wsp: f64,
    pub uptime: f64,
}

pub fn compute_availability(p: &AvailabilityParams) -> Result<AvailabilityReport, HarnessError> {
    let all = [p.t1, p.t2, p.t3, p.t_op, p.t_check, p.wsp];
    if all.iter().any(Duration::is_zero) {
        return Err(HarnessError::InvalidParams("every duration must be positive".into()));
    }
    if p.t_op >= p.t2 {
        return Err(HarnessError::InvalidParams("t_op must be shorter than T2".into()));
    }
    let delta = p
        .t3
        .checked_sub(p.t1 + p.t2)
        .filter(|d| !d.is_zero())
        .ok_or_else(|| HarnessError::InvalidParams("T3 must exceed T1 + T2".into()))?;
    let t3 = p.t3.as_secs_f64();
    let uptime_dispute = (t3 - (p.t2 - p.t_op).as_secs_f64()) / t3;
    let uptime_wsp = p.t_check.as_secs_f64() / p.wsp.as_secs_f64();
    Ok(AvailabilityReport { delta, uptime_dispute, uptime_wsp, uptime: uptime_dispute.max(uptime_wsp) })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExitWindow {
    /// T1 + T2 + T_op < T3.
    pub fits_operational_window: bool,
    /// now + T1 + T2 + T_op < version expiry.
    pub before_version_expiry: bool,
    pub can_exit: bool,
    /// Last slot at which an unbond can start and still finish before the
    /// arbiter version expires.
    pub hard_deadline: Option<u64>,
}

/// All arguments in slots except `tl`'s T1 and T2, which are in blocks.
pub fn exit_window(tl: &Timelocks, t_op: u64, now: u64, expiry: Option<u64>) -> ExitWindow {
    let need = tl.t1_t2_slots() + t_op;
    let fits_operational_window = need < tl.t3;
    let before_version_expiry = expiry.is_none_or(|e| now + need < e);
    ExitWindow {
        fits_operational_window,
        before_version_expiry,
        can_exit: fits_operational_window && before_version_expiry,
        hard_deadline: expiry.map(|e| e.saturating_sub(tl.t1_t2_slots())),
    }
}

/// Exit window for the live instance against the arbiter version `pcr0`.
pub fn check_depositor_exit_window(w: &World, pcr0: &Hash32, t_op: u64) -> ExitWindow {
    let now = w.slot();
    exit_window(&w.timelocks(), t_op, now, w.registry().get_version_expiry(pcr0))
}

/// Online ticks in `[from, from + len)`.
pub fn online_ticks(schedule: &Downtime, from: u64, len: u64) -> u64 {
    (from..from + len).filter(|t| !schedule.offline_at(*t)).count() as u64
}

/// A dispute whose challenge may confirm at any tick in `[first, last]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DisputeWindow {
    pub t1: u32,
    pub t2: u32,
    pub t_op: u64,
    pub first: u64,
    pub last: u64,
}

/// Every challenge window `[c, c + T2)` with `c` in range holds at least
/// `t_op` online ticks.
pub fn window_condition_holds(schedule: &Downtime, d: &DisputeWindow) -> bool {
    (d.first..=d.last).all(|c| online_ticks(schedule, c, d.t2 as u64) >= d.t_op)
}

/// The challenge tick leaving the arbiter the least online time.
pub fn worst_case_challenge(schedule: &Downtime, d: &DisputeWindow) -> u64 {
    (d.first..=d.last).min_by_key(|c| (online_ticks(schedule, *c, d.t2 as u64), *c)).unwrap_or(d.first)
}

/// Runs an honest exit against an operator that challenges it, timed so the
/// challenge confirms at the worst tick for `schedule`. Returns whether the
/// depositor got the coins back.
pub fn availability_simulation(d: &DisputeWindow, schedule: &Downtime) -> Result<bool, HarnessError> {
    if d.first < 2 || d.last < d.first {
        return Err(HarnessError::ConfigInvalid("challenge range must start at tick 2 or later".into()));
    }
    let c = worst_case_challenge(schedule, d);
    let spb = 50;
    let mut cfg = ScenarioConfig {
        name: format!("dispute at tick {c}"),
        seed: c,
        scheme: SigScheme::Mock,
        t1: d.t1,
        t2: d.t2,
        t3: (d.t1 + d.t2 + 1) as u64 * spb,
        slots_per_block: spb,
        horizon: Some((c + (d.t1 + d.t2) as u64 + 10) * spb),
        amounts: vec![100_000],
        arbiters: vec![ArbiterConfig { downtime: schedule.clone(), t_op: d.t_op, ..ArbiterConfig::default() }],
        ..ScenarioConfig::default()
    };
    cfg.operator.behavior = OperatorBehavior::MaliciousFalseChallenge;
    let cfg = cfg.with_event(c - 1, EnvEvent::Exit);
    Ok(run_scenario(&cfg)?.dep_safe)
}
