//! Dense and terminal rewards for the tracker and the opponent.
//!
//! Both agents share the same structure (Gaussian distance term, facing term,
//! persistence bonus, terminal reward). They differ in the optimal standoff
//! distance, and only the tracker pays the inter-agent safety penalty.

use serde::{Deserialize, Serialize};

use crate::arena::{ArenaState, Role, TerminationCause};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardConfig {
    pub d_opt_trk: f64,
    pub d_opt_cmp: f64,
    pub sigma: f64,
    pub w_distance: f64,
    pub w_facing: f64,
    pub w_persist: f64,
    pub persist_zone: [f64; 2],
    pub persist_min_run: u32,
    pub w_safety: f64,
    pub d_safe_int: f64,
    pub r_success: f64,
    pub r_target_lost: f64,
    pub r_collision: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            d_opt_trk: 2.25,
            d_opt_cmp: 1.25,
            sigma: 0.75,
            w_distance: 1.0,
            w_facing: 0.5,
            w_persist: 0.25,
            persist_zone: [1.0, 3.0],
            persist_min_run: 5,
            w_safety: 1.0,
            d_safe_int: 1.0,
            r_success: 10.0,
            r_target_lost: -5.0,
            r_collision: -10.0,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("rewards: {m}")));
        if !(self.sigma > 0.0) {
            return bad("sigma must be > 0");
        }
        if !(self.d_opt_trk > 0.0 && self.d_opt_cmp > 0.0) {
            return bad("d_opt values must be > 0");
        }
        if !(self.persist_zone[0] < self.persist_zone[1]) {
            return bad("persist_zone lower bound must be below the upper bound");
        }
        if !(self.d_safe_int > 0.0) {
            return bad("d_safe_int must be > 0");
        }
        if !(self.r_success > 0.0) {
            return bad("r_success must be > 0");
        }
        if !(self.r_target_lost < 0.0 && self.r_collision < 0.0) {
            return bad("failure rewards must be < 0");
        }
        Ok(())
    }

    pub fn in_zone(&self, d: f64) -> bool {
        d >= self.persist_zone[0] && d <= self.persist_zone[1]
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub distance: f64,
    pub facing: f64,
    pub persistence: f64,
    pub safety: f64,
    pub terminal: f64,
    pub total: f64,
}

impl RewardBreakdown {
    fn new(distance: f64, facing: f64, persistence: f64, safety: f64, terminal: f64) -> Self {
        Self {
            distance,
            facing,
            persistence,
            safety,
            terminal,
            total: distance + facing + persistence + safety + terminal,
        }
    }
}

/// `w · exp(-½((d − d_opt)/σ)²)`.
pub fn distance_reward(d: f64, d_opt: f64, sigma: f64, w: f64) -> Result<f64> {
    if !(sigma > 0.0) {
        return Err(Error::Config(format!("sigma must be > 0, got {sigma}")));
    }
    let z = (d - d_opt) / sigma;
    Ok((-0.5 * z * z).exp() * w)
}

/// `w_facing · max(0, cos(bearing))` when the target is visible, else 0.
pub fn facing_reward(state: &ArenaState, viewer: Role, cfg: &RewardConfig) -> Result<f64> {
    if !state.target_visible(viewer)? {
        return Ok(0.0);
    }
    let bearing = state.target_bearing(viewer)?;
    Ok(cfg.w_facing * bearing.cos().max(0.0))
}

pub fn persistence_bonus(zone_run_length: u32, cfg: &RewardConfig) -> f64 {
    if zone_run_length >= cfg.persist_min_run {
        cfg.w_persist
    } else {
        0.0
    }
}

pub fn terminal_reward(cause: TerminationCause, cfg: &RewardConfig) -> f64 {
    match cause {
        TerminationCause::Success => cfg.r_success,
        TerminationCause::TargetLost => cfg.r_target_lost,
        TerminationCause::Collision => cfg.r_collision,
        TerminationCause::None | TerminationCause::Timeout => 0.0,
    }
}

/// Tracker reward; adds `−w_safety · max(0, 1 − d_int/d_safe_int)` when an opponent is present.
pub fn tracker_reward(
    state: &ArenaState,
    run_length: u32,
    cause: TerminationCause,
    cfg: &RewardConfig,
) -> Result<RewardBreakdown> {
    let d = state.distances();
    let distance = distance_reward(d.d_trk, cfg.d_opt_trk, cfg.sigma, cfg.w_distance)?;
    let facing = facing_reward(state, Role::Tracker, cfg)?;
    let safety = d
        .d_int
        .map_or(0.0, |di| -cfg.w_safety * (1.0 - di / cfg.d_safe_int).max(0.0));
    Ok(RewardBreakdown::new(
        distance,
        facing,
        persistence_bonus(run_length, cfg),
        safety,
        terminal_reward(cause, cfg),
    ))
}

/// Opponent reward: same structure, nearer optimum, no safety term.
pub fn opponent_reward(
    state: &ArenaState,
    run_length: u32,
    cause: TerminationCause,
    cfg: &RewardConfig,
) -> Result<RewardBreakdown> {
    let d_cmp = state
        .distances()
        .d_cmp
        .ok_or_else(|| Error::Usage("opponent reward requested without an opponent".into()))?;
    let distance = distance_reward(d_cmp, cfg.d_opt_cmp, cfg.sigma, cfg.w_distance)?;
    let facing = facing_reward(state, Role::Opponent, cfg)?;
    Ok(RewardBreakdown::new(
        distance,
        facing,
        persistence_bonus(run_length, cfg),
        0.0,
        terminal_reward(cause, cfg),
    ))
}

/// Terminal cause as seen by the opponent after a step.
///
/// Its own collision always counts; at the horizon it succeeds on its own
/// tracked fraction. Episode ends caused by the tracker alone are neutral.
pub fn opponent_cause(state: &ArenaState) -> TerminationCause {
    let ev = state.events;
    if ev.opponent_collided {
        return TerminationCause::Collision;
    }
    match ev.cause {
        TerminationCause::Success | TerminationCause::Timeout => {
            let tracked = state.memory.opponent.map_or(0, |m| m.tracked_steps);
            if tracked as f64 / state.spec.max_steps as f64 >= state.spec.success_tr_threshold {
                TerminationCause::Success
            } else {
                TerminationCause::Timeout
            }
        }
        _ => TerminationCause::None,
    }
}
