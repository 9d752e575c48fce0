//! Episode stepping shared by training and evaluation.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::arena::{ActionPlan, ArenaState, Pose, Role, StepEvents, Waypoint};
use crate::bc::{expert_policy, ExpertConfig};
use crate::error::{Error, Result};
use crate::geometry::{normalize_angle, Vec2};
use crate::policy::{sample_action, Observation, PolicyParams};
use crate::rewards::{opponent_cause, opponent_reward, tracker_reward, RewardBreakdown, RewardConfig};
use crate::seeds::derive_seed;

/// How an agent picks its plan each control step.
#[derive(Clone, Copy, Debug)]
pub enum Actor<'a> {
    /// Samples from the policy distribution; the only actor that yields log-probs.
    Sampled(&'a PolicyParams),
    /// Policy mean, no noise.
    Mean(&'a PolicyParams),
    /// Never moves.
    Static,
    /// Constant speed along a world heading redrawn every `resample_every` steps.
    RandomWalk {
        motion_seed: u64,
        speed_m: f64,
        resample_every: u32,
    },
    Expert(&'a ExpertConfig),
    Fixed(ActionPlan),
}

/// Action taken by a [`Actor::Sampled`] actor.
#[derive(Clone, Debug, PartialEq)]
pub struct SampledAction {
    pub observation: Observation,
    pub action: Vec<f64>,
    pub log_prob: f64,
}

impl Actor<'_> {
    pub fn is_sampled(&self) -> bool {
        matches!(self, Actor::Sampled(_))
    }

    /// Plan for `role`; the sample record is present only for sampled actors.
    pub fn act(
        &self,
        state: &ArenaState,
        role: Role,
        rng: &mut impl Rng,
    ) -> Result<(ActionPlan, Option<SampledAction>)> {
        match *self {
            Actor::Sampled(p) => {
                let observation = state.observe(role)?;
                let s = sample_action(p, &observation, rng);
                let plan = ActionPlan::from_flat(&s.action)?;
                Ok((
                    plan,
                    Some(SampledAction {
                        observation,
                        action: s.action,
                        log_prob: s.log_prob,
                    }),
                ))
            }
            Actor::Mean(p) => {
                let (mean, _) = p.forward(&state.observe(role)?);
                Ok((ActionPlan::from_flat(&mean)?, None))
            }
            Actor::Static => Ok((ActionPlan::zero(), None)),
            Actor::RandomWalk {
                motion_seed,
                speed_m,
                resample_every,
            } => {
                let pose = state.viewer(role)?.pose;
                Ok((random_walk_plan(&pose, state.step, motion_seed, speed_m, resample_every), None))
            }
            Actor::Expert(cfg) => Ok((expert_policy(state, role, cfg)?, None)),
            Actor::Fixed(plan) => Ok((plan, None)),
        }
    }
}

/// World heading of a random-walk agent at `step`; a pure function of the seed
/// and the resample window.
pub fn random_walk_heading(step: u32, motion_seed: u64, resample_every: u32) -> f64 {
    let window = step / resample_every.max(1);
    let u = derive_seed(motion_seed, &[window as u64]) >> 11;
    let unit = u as f64 / (1u64 << 53) as f64;
    normalize_angle(unit * 2.0 * std::f64::consts::PI)
}

/// Heads toward the current random heading while translating along it.
pub fn random_walk_plan(pose: &Pose, step: u32, motion_seed: u64, speed_m: f64, resample_every: u32) -> ActionPlan {
    let h = random_walk_heading(step, motion_seed, resample_every);
    let local = Vec2::from_angle(h).rotate(-pose.heading) * speed_m;
    ActionPlan::repeat(Waypoint::new(local.x, local.y, normalize_angle(h - pose.heading)))
}

/// Rewards and events of one joint step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepOutcome {
    pub events: StepEvents,
    pub tracker: RewardBreakdown,
    pub opponent: Option<RewardBreakdown>,
}

/// Arena state plus the in-zone run counters that the persistence bonus needs.
#[derive(Clone, Debug)]
pub struct EpisodeContext {
    pub state: ArenaState,
    pub run_tracker: u32,
    pub run_opponent: u32,
}

impl EpisodeContext {
    pub fn new(state: ArenaState) -> Self {
        Self {
            state,
            run_tracker: 0,
            run_opponent: 0,
        }
    }

    pub fn advance(
        &mut self,
        tracker_plan: &ActionPlan,
        opponent_plan: Option<&ActionPlan>,
        rewards: &RewardConfig,
    ) -> Result<StepOutcome> {
        let events = self.state.step(tracker_plan, opponent_plan)?;
        let d = self.state.distances();
        self.run_tracker = if rewards.in_zone(d.d_trk) { self.run_tracker + 1 } else { 0 };
        let tracker = tracker_reward(&self.state, self.run_tracker, events.cause, rewards)?;
        let opponent = match d.d_cmp {
            Some(dc) => {
                self.run_opponent = if rewards.in_zone(dc) { self.run_opponent + 1 } else { 0 };
                let cause = opponent_cause(&self.state);
                Some(opponent_reward(&self.state, self.run_opponent, cause, rewards)?)
            }
            None => None,
        };
        Ok(StepOutcome {
            events,
            tracker,
            opponent,
        })
    }

    /// Lets both actors choose plans and advances one step.
    pub fn step_with(
        &mut self,
        tracker: &Actor,
        opponent: &Actor,
        rewards: &RewardConfig,
        rng_tracker: &mut impl Rng,
        rng_opponent: &mut impl Rng,
    ) -> Result<(StepOutcome, Option<SampledAction>, Option<SampledAction>)> {
        let (tp, ts) = tracker.act(&self.state, Role::Tracker, rng_tracker)?;
        let (op, os) = if self.state.opponent.is_some() {
            let (p, s) = opponent.act(&self.state, Role::Opponent, rng_opponent)?;
            (Some(p), s)
        } else {
            (None, None)
        };
        let out = self.advance(&tp, op.as_ref(), rewards)?;
        Ok((out, ts, os))
    }
}

/// Errors if the actor needs an opponent that the arena lacks.
pub fn require_opponent(state: &ArenaState) -> Result<()> {
    if state.opponent.is_none() {
        return Err(Error::Usage("this rollout needs an arena with an opponent".into()));
    }
    Ok(())
}
