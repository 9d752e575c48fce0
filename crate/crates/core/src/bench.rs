//! Seeded episode suites with interfering opponents, episode execution and
//! SR/TR/CR scoring.
//!
//! Metric definitions (version [`METRICS_VERSION`]):
//! * SR: fraction of episodes ending with [`TerminationCause::Success`].
//! * TR: mean over episodes of tracked steps / executed steps.
//! * CR: fraction of episodes in which the tracker collided (scenery or opponent).

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::arena::{build_arena, ArenaSpec, Obstacle, Pose, TargetScript, TerminationCause};
use crate::error::{Error, Result};
use crate::geometry::{Aabb, Vec2};
use crate::policy::PolicyParams;
use crate::rewards::{RewardBreakdown, RewardConfig};
use crate::rollout::{Actor, EpisodeContext};
use crate::seeds::{derive_seed, rng_from, SimRng};

pub const SUITE_SCHEMA_VERSION: u32 = 1;
pub const METRICS_VERSION: u32 = 1;
pub const OPPONENT_AHEAD_M: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BehaviorKind {
    Static,
    Random,
    Competitive,
}

impl BehaviorKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            BehaviorKind::Static => "static",
            BehaviorKind::Random => "random",
            BehaviorKind::Competitive => "competitive",
        }
    }
}

impl std::str::FromStr for BehaviorKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "static" => Ok(BehaviorKind::Static),
            "random" => Ok(BehaviorKind::Random),
            "competitive" => Ok(BehaviorKind::Competitive),
            other => Err(Error::Usage(format!("unknown behavior `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OpponentBehavior {
    pub kind: BehaviorKind,
    /// Random kind only; zero otherwise.
    pub motion_seed: u64,
    pub speed_m: f64,
    pub resample_every: u32,
    /// Competitive kind only: key of the opponent checkpoint.
    pub checkpoint: Option<String>,
}

impl OpponentBehavior {
    pub fn still() -> Self {
        Self {
            kind: BehaviorKind::Static,
            motion_seed: 0,
            speed_m: 0.0,
            resample_every: 0,
            checkpoint: None,
        }
    }

    pub fn random(motion_seed: u64, speed_m: f64, resample_every: u32) -> Self {
        Self {
            kind: BehaviorKind::Random,
            motion_seed,
            speed_m,
            resample_every,
            checkpoint: None,
        }
    }

    pub fn competitive(checkpoint: impl Into<String>) -> Self {
        Self {
            kind: BehaviorKind::Competitive,
            checkpoint: Some(checkpoint.into()),
            ..Self::still()
        }
    }

    /// Actor for this behavior, resolving competitive checkpoints in `policies`.
    pub fn actor<'a>(&self, policies: &'a OpponentPolicies) -> Result<Actor<'a>> {
        Ok(match self.kind {
            BehaviorKind::Static => Actor::Static,
            BehaviorKind::Random => Actor::RandomWalk {
                motion_seed: self.motion_seed,
                speed_m: self.speed_m,
                resample_every: self.resample_every,
            },
            BehaviorKind::Competitive => {
                let key = self
                    .checkpoint
                    .as_deref()
                    .ok_or_else(|| Error::Load("competitive opponent without a checkpoint".into()))?;
                let p = policies
                    .get(key)
                    .ok_or_else(|| Error::Load(format!("opponent checkpoint `{key}` is not loaded")))?;
                Actor::Mean(p.as_ref())
            }
        })
    }
}

/// Opponent checkpoints by reference key.
pub type OpponentPolicies = BTreeMap<String, Arc<PolicyParams>>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpisodeSpec {
    pub episode_id: u32,
    pub suite_seed: u64,
    pub arena: ArenaSpec,
    pub opponent: Option<OpponentBehavior>,
}

impl EpisodeSpec {
    pub fn behavior(&self) -> Option<BehaviorKind> {
        self.opponent.as_ref().map(|o| o.kind)
    }
}

/// Ranges from which episodes are drawn.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArenaTemplate {
    pub width_m: f64,
    pub height_m: f64,
    pub obstacle_count: [u32; 2],
    pub obstacle_size_m: [f64; 2],
    pub target_speed_m: [f64; 2],
    pub target_distance_m: [f64; 2],
    /// Half-width of the initial target bearing window (rad).
    pub target_bearing_rad: f64,
    pub target_waypoints: u32,
    pub max_steps: u32,
    pub random_speed_m: f64,
    pub random_resample_every: u32,
    pub attempts: u32,
}

impl Default for ArenaTemplate {
    fn default() -> Self {
        Self {
            width_m: 14.0,
            height_m: 14.0,
            obstacle_count: [2, 5],
            obstacle_size_m: [0.3, 0.9],
            target_speed_m: [0.08, 0.2],
            target_distance_m: [2.0, 3.0],
            target_bearing_rad: 0.5,
            target_waypoints: 3,
            max_steps: 300,
            random_speed_m: 0.2,
            random_resample_every: 10,
            attempts: 200,
        }
    }
}

impl ArenaTemplate {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("arena template: {m}")));
        if !(self.width_m > 0.0 && self.height_m > 0.0) {
            return bad("width_m and height_m must be > 0");
        }
        if self.obstacle_count[0] > self.obstacle_count[1] {
            return bad("obstacle_count must be an ordered range");
        }
        let ordered = |r: [f64; 2]| r[0] >= 0.0 && r[0] <= r[1];
        if !ordered(self.obstacle_size_m) || !ordered(self.target_speed_m) || !ordered(self.target_distance_m) {
            return bad("ranges must be non-negative and ordered");
        }
        if self.max_steps == 0 || self.target_waypoints == 0 || self.attempts == 0 {
            return bad("max_steps, target_waypoints and attempts must be >= 1");
        }
        if self.random_resample_every == 0 {
            return bad("random_resample_every must be >= 1");
        }
        Ok(())
    }
}

fn uniform(rng: &mut SimRng, r: [f64; 2]) -> f64 {
    if r[1] > r[0] {
        rng.random_range(r[0]..r[1])
    } else {
        r[0]
    }
}

fn try_layout(t: &ArenaTemplate, rng: &mut SimRng, with_opponent: bool) -> Option<ArenaSpec> {
    let mut spec = ArenaSpec::open(t.width_m, t.height_m);
    spec.max_steps = t.max_steps;
    let b = spec.bounds;
    let margin = 1.0;
    if b.max.x - b.min.x <= 2.0 * margin || b.max.y - b.min.y <= 2.0 * margin {
        return None;
    }
    let heading = rng.random_range(-PI..PI);
    let tracker = Vec2::new(
        rng.random_range(b.min.x + margin..b.max.x - margin),
        rng.random_range(b.min.y + margin..b.max.y - margin),
    );
    spec.tracker_spawn = Pose::new(tracker.x, tracker.y, heading);
    let bearing = heading + rng.random_range(-t.target_bearing_rad..=t.target_bearing_rad);
    let target = tracker + Vec2::from_angle(bearing) * uniform(rng, t.target_distance_m);
    spec.target_spawn = Pose::new(target.x, target.y, bearing);
    if with_opponent {
        let o = tracker + Vec2::from_angle(heading) * OPPONENT_AHEAD_M;
        spec.opponent_spawn = Some(Pose::new(o.x, o.y, heading));
    }

    let n_obs = rng.random_range(t.obstacle_count[0]..=t.obstacle_count[1]);
    let keep_clear: Vec<(Vec2, f64)> = [Some(tracker), Some(target), spec.opponent_spawn.map(|p| p.position())]
        .into_iter()
        .flatten()
        .map(|p| (p, 0.8))
        .collect();
    for _ in 0..n_obs {
        for _ in 0..20 {
            let c = Vec2::new(rng.random_range(b.min.x..b.max.x), rng.random_range(b.min.y..b.max.y));
            let s = uniform(rng, t.obstacle_size_m);
            let ob = if rng.random_bool(0.5) {
                Obstacle::Circle { center: c, radius: s / 2.0 }
            } else {
                let h = Vec2::new(s / 2.0, uniform(rng, t.obstacle_size_m) / 2.0);
                Obstacle::Rect { min: c - h, max: c + h }
            };
            let clear = keep_clear.iter().all(|&(p, r)| ob.distance_to(p) > r)
                && !crate::geometry::segment_hits_box(tracker, target, &ob.aabb().expanded(0.3));
            if clear {
                spec.obstacles.push(ob);
                break;
            }
        }
    }

    let mut waypoints = Vec::new();
    let mut from = target;
    let mut dir = bearing;
    for _ in 0..t.target_waypoints {
        let mut found = None;
        for _ in 0..50 {
            let ang = dir + rng.random_range(-1.0..1.0);
            let p = from + Vec2::from_angle(ang) * rng.random_range(2.0..5.0);
            let inner = Aabb::new(b.min, b.max).expanded(-1.0);
            if inner.contains(p) && spec.segment_clear(from, p, spec.target_radius + 0.3) {
                found = Some((p, ang));
                break;
            }
        }
        let (p, ang) = found?;
        waypoints.push(p);
        from = p;
        dir = ang;
    }
    spec.target_script = TargetScript {
        waypoints,
        speed: uniform(rng, t.target_speed_m),
        looped: false,
    };
    spec.seed = rng.random();
    spec.validate().ok()?;
    Some(spec)
}

/// Deterministic arena for one episode id.
pub fn generate_arena(template: &ArenaTemplate, seed: u64, episode_id: u32, with_opponent: bool) -> Result<ArenaSpec> {
    template.validate()?;
    let mut rng = rng_from(seed, &[episode_id as u64]);
    for _ in 0..template.attempts {
        if let Some(spec) = try_layout(template, &mut rng, with_opponent) {
            return Ok(spec);
        }
    }
    Err(Error::Generation {
        episode_id,
        reason: format!("no valid layout in {} attempts", template.attempts),
    })
}

/// Arenas without an opponent, e.g. for demonstration collection.
pub fn generate_arenas(template: &ArenaTemplate, seed: u64, count: u32) -> Result<Vec<ArenaSpec>> {
    (0..count).map(|i| generate_arena(template, seed, i, false)).collect()
}

/// Benchmark suite: base episodes with the opponent injected 0.5 m ahead of
/// the tracker. Competitive suites need the opponent checkpoint key.
pub fn generate_suite(
    seed: u64,
    count: u32,
    kind: BehaviorKind,
    template: &ArenaTemplate,
    checkpoint: Option<&str>,
) -> Result<Vec<EpisodeSpec>> {
    if count == 0 {
        return Err(Error::Usage("suite count must be >= 1".into()));
    }
    if kind == BehaviorKind::Competitive && checkpoint.is_none() {
        return Err(Error::Usage("competitive suites need an opponent checkpoint".into()));
    }
    (0..count)
        .map(|id| {
            let arena = generate_arena(template, seed, id, true)?;
            let opponent = match kind {
                BehaviorKind::Static => OpponentBehavior::still(),
                BehaviorKind::Random => OpponentBehavior::random(
                    derive_seed(seed, &[id as u64, 0x6d6f_7469_6f6e]),
                    template.random_speed_m,
                    template.random_resample_every,
                ),
                BehaviorKind::Competitive => OpponentBehavior::competitive(checkpoint.unwrap_or_default()),
            };
            Ok(EpisodeSpec {
                episode_id: id,
                suite_seed: seed,
                arena,
                opponent: Some(opponent),
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub d_trk: f64,
    pub visible: bool,
    pub tracker: Pose,
    pub opponent: Option<Pose>,
    pub tracker_reward: RewardBreakdown,
    pub opponent_reward: Option<RewardBreakdown>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub episode_id: u32,
    pub behavior: Option<BehaviorKind>,
    pub cause: TerminationCause,
    pub steps: u32,
    pub tracked_steps: u32,
    pub collision: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace: Option<Vec<TraceStep>>,
}

impl EpisodeRecord {
    pub fn tracking_rate(&self) -> f64 {
        if self.steps == 0 {
            0.0
        } else {
            self.tracked_steps as f64 / self.steps as f64
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Sample tracker actions instead of using the policy mean.
    pub stochastic: bool,
    pub seed: u64,
    pub record_trace: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            stochastic: false,
            seed: 0,
            record_trace: false,
        }
    }
}

/// Runs one episode to termination with the given tracker actor.
pub fn run_episode(
    spec: &EpisodeSpec,
    tracker: &Actor,
    policies: &OpponentPolicies,
    rewards: &RewardConfig,
    cfg: &EvalConfig,
) -> Result<EpisodeRecord> {
    let opponent = match &spec.opponent {
        Some(b) => b.actor(policies)?,
        None => Actor::Static,
    };
    if spec.opponent.is_some() != spec.arena.opponent_spawn.is_some() {
        return Err(Error::Input(format!(
            "episode {}: opponent behavior and opponent spawn must both be present or absent",
            spec.episode_id
        )));
    }
    let mut ctx = EpisodeContext::new(build_arena(spec.arena.clone())?);
    let mut rng_t = rng_from(cfg.seed, &[spec.episode_id as u64, 0]);
    let mut rng_o = rng_from(cfg.seed, &[spec.episode_id as u64, 1]);
    let mut collision = false;
    let mut trace = cfg.record_trace.then(Vec::new);
    while !ctx.state.is_terminated() {
        let (out, _, _) = ctx.step_with(tracker, &opponent, rewards, &mut rng_t, &mut rng_o)?;
        collision |= out.events.tracker_collided;
        if let Some(tr) = trace.as_mut() {
            tr.push(TraceStep {
                d_trk: ctx.state.distances().d_trk,
                visible: out.events.target_visible_tracker,
                tracker: ctx.state.tracker.pose,
                opponent: ctx.state.opponent.map(|o| o.pose),
                tracker_reward: out.tracker,
                opponent_reward: out.opponent,
            });
        }
    }
    Ok(EpisodeRecord {
        episode_id: spec.episode_id,
        behavior: spec.behavior(),
        cause: ctx.state.events.cause,
        steps: ctx.state.step,
        tracked_steps: ctx.state.memory.tracker.tracked_steps,
        collision,
        trace,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateSummary {
    pub episodes: usize,
    pub sr: f64,
    pub tr: f64,
    pub cr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub metrics_version: u32,
    pub episodes: usize,
    pub sr: f64,
    pub tr: f64,
    pub cr: f64,
    pub per_behavior: BTreeMap<String, RateSummary>,
    pub checkpoint_hash: Option<String>,
}

fn summarize<'a>(records: impl Iterator<Item = &'a EpisodeRecord>) -> RateSummary {
    let (mut n, mut s, mut t, mut c) = (0usize, 0usize, 0.0, 0usize);
    for r in records {
        n += 1;
        s += (r.cause == TerminationCause::Success) as usize;
        t += r.tracking_rate();
        c += r.collision as usize;
    }
    let nf = n as f64;
    RateSummary {
        episodes: n,
        sr: s as f64 / nf,
        tr: t / nf,
        cr: c as f64 / nf,
    }
}

pub fn compute_metrics(records: &[EpisodeRecord]) -> Result<MetricsReport> {
    if records.is_empty() {
        return Err(Error::Usage("compute_metrics needs at least one record".into()));
    }
    let all = summarize(records.iter());
    let mut kinds: Vec<BehaviorKind> = records.iter().filter_map(|r| r.behavior).collect();
    kinds.sort();
    kinds.dedup();
    let per_behavior = kinds
        .into_iter()
        .map(|k| (k.as_str().to_string(), summarize(records.iter().filter(|r| r.behavior == Some(k)))))
        .collect();
    Ok(MetricsReport {
        metrics_version: METRICS_VERSION,
        episodes: all.episodes,
        sr: all.sr,
        tr: all.tr,
        cr: all.cr,
        per_behavior,
        checkpoint_hash: None,
    })
}

/// Runs every episode with the tracker policy (mean actions unless configured
/// otherwise) and aggregates in episode order.
pub fn evaluate(
    params: &PolicyParams,
    suite: &[EpisodeSpec],
    policies: &OpponentPolicies,
    rewards: &RewardConfig,
    cfg: &EvalConfig,
) -> Result<(MetricsReport, Vec<EpisodeRecord>)> {
    evaluate_actor(
        &if cfg.stochastic { Actor::Sampled(params) } else { Actor::Mean(params) },
        suite,
        policies,
        rewards,
        cfg,
    )
}

pub fn evaluate_actor(
    tracker: &Actor,
    suite: &[EpisodeSpec],
    policies: &OpponentPolicies,
    rewards: &RewardConfig,
    cfg: &EvalConfig,
) -> Result<(MetricsReport, Vec<EpisodeRecord>)> {
    if suite.is_empty() {
        return Err(Error::Usage("cannot evaluate an empty suite".into()));
    }
    let records = suite
        .par_iter()
        .map(|spec| run_episode(spec, tracker, policies, rewards, cfg))
        .collect::<Result<Vec<_>>>()?;
    Ok((compute_metrics(&records)?, records))
}
