//! Group-relative policy optimization.
//!
//! A group is `G` short segments rolled out from copies of one start context
//! with independent noise streams. Each segment's undiscounted return is
//! standardized against its group and broadcast to every step of the segment.
//! The minimized loss is `−surrogate − λ_ent·H + λ_KL·KL(π‖π_ref)`.

use std::time::Instant;

use rand::{Rng, RngCore};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::arena::{build_arena_shared, Pose, Role};
use crate::bench::{EpisodeSpec, OpponentPolicies};
use crate::checkpoint::{Checkpoint, Phase};
use crate::error::{Error, Result};
use crate::geometry::Vec2;
use crate::io::FileHeader;
use crate::optim::{update, AdamConfig, AdamState};
use crate::policy::{gaussian_entropy, gaussian_kl, Gradient, LossAdjoints, Observation, PolicyParams};
use crate::rewards::RewardConfig;
use crate::rollout::{Actor, EpisodeContext};
use crate::seeds::{derive_seed, rng_from};

pub const DIAGNOSTICS_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GrpoConfig {
    pub group_size: usize,
    pub t_group: usize,
    pub epsilon: f64,
    pub lambda_kl: f64,
    pub lambda_ent: f64,
    pub learning_rate: f64,
    pub iterations: usize,
    /// Start contexts (groups) per iteration.
    pub segments_per_iteration: usize,
    pub advantage_std_floor: f64,
    /// Start contexts are drawn after a uniform number of steps in `[0, max_start_step]`.
    pub max_start_step: u32,
    /// Global gradient-norm cap (0 disables).
    pub max_grad_norm: f64,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        Self {
            group_size: 8,
            t_group: 10,
            epsilon: 0.2,
            lambda_kl: 0.05,
            lambda_ent: 0.01,
            learning_rate: 3e-4,
            iterations: 100,
            segments_per_iteration: 16,
            advantage_std_floor: 1e-8,
            max_start_step: 200,
            max_grad_norm: 0.0,
        }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("grpo: {m}")));
        if self.group_size < 2 {
            return bad("group_size must be >= 2");
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return bad("epsilon must be in (0, 1)");
        }
        if self.t_group < 1 || self.segments_per_iteration < 1 {
            return bad("t_group and segments_per_iteration must be >= 1");
        }
        if !(self.lambda_kl >= 0.0 && self.lambda_ent >= 0.0 && self.learning_rate >= 0.0) {
            return bad("lambda_kl, lambda_ent and learning_rate must be >= 0");
        }
        if !(self.advantage_std_floor >= 0.0 && self.max_grad_norm >= 0.0) {
            return bad("advantage_std_floor and max_grad_norm must be >= 0");
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            max_grad_norm: self.max_grad_norm,
            ..AdamConfig::with_lr(self.learning_rate)
        }
    }
}

/// Positions of all bodies before a step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointPose {
    pub step: u32,
    pub tracker: Pose,
    pub opponent: Option<Pose>,
    pub target: Vec2,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RolloutSegment {
    pub context_id: u64,
    pub observations: Vec<Observation>,
    pub actions: Vec<Vec<f64>>,
    pub old_log_probs: Vec<f64>,
    pub rewards: Vec<f64>,
    pub segment_return: f64,
    pub states: Vec<JointPose>,
}

impl RolloutSegment {
    fn empty(context_id: u64) -> Self {
        Self {
            context_id,
            observations: Vec::new(),
            actions: Vec::new(),
            old_log_probs: Vec::new(),
            rewards: Vec::new(),
            segment_return: 0.0,
            states: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupBatch {
    pub context_id: u64,
    pub segments: Vec<RolloutSegment>,
    pub advantages: Vec<f64>,
}

impl GroupBatch {
    pub fn from_segments(context_id: u64, segments: Vec<RolloutSegment>, floor: f64) -> Result<Self> {
        let returns: Vec<f64> = segments.iter().map(|s| s.segment_return).collect();
        let advantages = group_advantages(&returns, floor)?;
        Ok(Self {
            context_id,
            segments,
            advantages,
        })
    }

    pub fn returns(&self) -> Vec<f64> {
        self.segments.iter().map(|s| s.segment_return).collect()
    }

    pub fn num_steps(&self) -> usize {
        self.segments.iter().map(|s| s.len()).sum()
    }
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// `(R_i − mean) / (population std + floor)`; all zeros when the returns are equal.
pub fn group_advantages(returns: &[f64], floor: f64) -> Result<Vec<f64>> {
    if returns.len() < 2 {
        return Err(Error::Usage(format!("a group needs at least 2 returns, got {}", returns.len())));
    }
    let (mean, std) = mean_std(returns);
    if returns.iter().all(|&r| r == returns[0]) {
        return Ok(vec![0.0; returns.len()]);
    }
    Ok(returns.iter().map(|r| (r - mean) / (std + floor)).collect())
}

/// `min(r·A, clip(r, 1−ε, 1+ε)·A)`.
pub fn clipped_surrogate(ratio: f64, advantage: f64, epsilon: f64) -> f64 {
    let unclipped = ratio * advantage;
    let clipped = ratio.clamp(1.0 - epsilon, 1.0 + epsilon) * advantage;
    unclipped.min(clipped)
}

/// Per-agent segments of a joint group; `None` for agents that are not sampled.
pub struct JointGroup {
    pub tracker: Option<GroupBatch>,
    pub opponent: Option<GroupBatch>,
}

/// Rolls out one segment per member seed from copies of `start`, with both
/// actors acting every step. Member `i` draws tracker noise from
/// `rng_from(seeds[i], [0])` and opponent noise from `rng_from(seeds[i], [1])`.
pub fn rollout_group(
    start: &EpisodeContext,
    tracker: &Actor,
    opponent: &Actor,
    rewards: &RewardConfig,
    cfg: &GrpoConfig,
    member_seeds: &[u64],
    context_id: u64,
) -> Result<JointGroup> {
    if start.state.is_terminated() {
        return Err(Error::Usage("cannot roll out a group from a terminated state".into()));
    }
    let has_opp = start.state.opponent.is_some();
    let members: Vec<(RolloutSegment, RolloutSegment)> = member_seeds
        .par_iter()
        .map(|&s| {
            let mut ctx = start.clone();
            let mut rt = rng_from(s, &[0]);
            let mut ro = rng_from(s, &[1]);
            let mut trk = RolloutSegment::empty(context_id);
            let mut opp = RolloutSegment::empty(context_id);
            for _ in 0..cfg.t_group {
                if ctx.state.is_terminated() {
                    break;
                }
                let st = &ctx.state;
                let pose = JointPose {
                    step: st.step,
                    tracker: st.tracker.pose,
                    opponent: st.opponent.map(|o| o.pose),
                    target: st.target.position(),
                };
                let (out, ts, os) = ctx.step_with(tracker, opponent, rewards, &mut rt, &mut ro)?;
                if let Some(a) = ts {
                    trk.observations.push(a.observation);
                    trk.actions.push(a.action);
                    trk.old_log_probs.push(a.log_prob);
                    trk.rewards.push(out.tracker.total);
                    trk.states.push(pose);
                }
                if let (Some(a), Some(r)) = (os, out.opponent) {
                    opp.observations.push(a.observation);
                    opp.actions.push(a.action);
                    opp.old_log_probs.push(a.log_prob);
                    opp.rewards.push(r.total);
                    opp.states.push(pose);
                }
            }
            trk.segment_return = trk.rewards.iter().sum();
            opp.segment_return = opp.rewards.iter().sum();
            Ok((trk, opp))
        })
        .collect::<Result<Vec<_>>>()?;
    let (trk, opp): (Vec<_>, Vec<_>) = members.into_iter().unzip();
    let floor = cfg.advantage_std_floor;
    Ok(JointGroup {
        tracker: if tracker.is_sampled() {
            Some(GroupBatch::from_segments(context_id, trk, floor)?)
        } else {
            None
        },
        opponent: if has_opp && opponent.is_sampled() {
            Some(GroupBatch::from_segments(context_id, opp, floor)?)
        } else {
            None
        },
    })
}

pub fn member_seeds(seed: u64, group_size: usize) -> Vec<u64> {
    (0..group_size).map(|i| derive_seed(seed, &[i as u64])).collect()
}

/// Tracker group against a scripted or frozen opponent actor.
pub fn collect_group(
    start: &EpisodeContext,
    params: &PolicyParams,
    opponent: &Actor,
    rewards: &RewardConfig,
    cfg: &GrpoConfig,
    seed: u64,
    context_id: u64,
) -> Result<GroupBatch> {
    collect_group_seeded(start, params, opponent, rewards, cfg, &member_seeds(seed, cfg.group_size), context_id)
}

pub fn collect_group_seeded(
    start: &EpisodeContext,
    params: &PolicyParams,
    opponent: &Actor,
    rewards: &RewardConfig,
    cfg: &GrpoConfig,
    seeds: &[u64],
    context_id: u64,
) -> Result<GroupBatch> {
    let g = rollout_group(start, &Actor::Sampled(params), opponent, rewards, cfg, seeds, context_id)?;
    Ok(g.tracker.expect("sampled tracker yields a batch"))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossDiagnostics {
    pub loss: f64,
    pub surrogate: f64,
    pub mean_ratio: f64,
    pub clip_fraction: f64,
    pub kl: f64,
    pub entropy: f64,
    pub steps: usize,
}

struct StepRef<'a> {
    obs: &'a Observation,
    action: &'a [f64],
    old_log_prob: f64,
    advantage: f64,
}

#[derive(Default)]
struct Partial {
    surrogate: f64,
    ratio: f64,
    clipped: usize,
    kl: f64,
}

/// Loss, gradient and diagnostics over every step of every batch.
pub fn grpo_loss(
    params: &PolicyParams,
    reference: &PolicyParams,
    batches: &[GroupBatch],
    cfg: &GrpoConfig,
) -> Result<(f64, Gradient, LossDiagnostics)> {
    params.check_compatible(reference)?;
    let mut steps = Vec::new();
    for b in batches {
        if b.advantages.len() != b.segments.len() {
            return Err(Error::Usage("group advantages do not match its segments".into()));
        }
        for (seg, &adv) in b.segments.iter().zip(&b.advantages) {
            if seg.observations.len() != seg.len() || seg.old_log_probs.len() != seg.len() {
                return Err(Error::Usage("segment lists have unequal lengths".into()));
            }
            for t in 0..seg.len() {
                steps.push(StepRef {
                    obs: &seg.observations[t],
                    action: &seg.actions[t],
                    old_log_prob: seg.old_log_probs[t],
                    advantage: adv,
                });
            }
        }
    }
    let n = steps.len();
    let h = gaussian_entropy(params.log_std());
    let mut grad = Gradient::zeros_like(params);
    let off = params.shape.log_std_offset();
    for g in &mut grad.data[off..] {
        *g -= cfg.lambda_ent;
    }
    if n == 0 {
        let loss = -cfg.lambda_ent * h;
        return Ok((loss, grad, LossDiagnostics { loss, entropy: h, ..Default::default() }));
    }
    let inv_n = 1.0 / n as f64;
    const CHUNK: usize = 32;
    let parts = steps
        .par_chunks(CHUNK)
        .enumerate()
        .map(|(c, chunk)| {
            let mut g = Gradient::zeros_like(params);
            let mut p = Partial::default();
            for (k, s) in chunk.iter().enumerate() {
                let (mean, ls) = params.forward(s.obs);
                let lp = crate::policy::gaussian_log_prob(&mean, &ls, s.action);
                let ratio = (lp - s.old_log_prob).exp();
                if !ratio.is_finite() {
                    return Err(Error::Training(format!(
                        "non-finite probability ratio at step {}",
                        c * CHUNK + k
                    )));
                }
                let unclipped = ratio * s.advantage;
                let surr = clipped_surrogate(ratio, s.advantage, cfg.epsilon);
                let clip_active = surr < unclipped;
                let (mr, lsr) = reference.forward(s.obs);
                p.kl += gaussian_kl(&mean, &ls, &mr, &lsr);
                p.surrogate += surr;
                p.ratio += ratio;
                p.clipped += clip_active as usize;
                let adj = LossAdjoints {
                    log_prob: if clip_active { 0.0 } else { -unclipped * inv_n },
                    entropy: 0.0,
                    kl: cfg.lambda_kl * inv_n,
                };
                crate::policy::accumulate_backward(params, s.obs, s.action, adj, Some(reference), &mut g)?;
            }
            Ok((p, g))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut tot = Partial::default();
    for (p, g) in &parts {
        tot.surrogate += p.surrogate;
        tot.ratio += p.ratio;
        tot.clipped += p.clipped;
        tot.kl += p.kl;
        grad.add_assign(g);
    }
    let surrogate = tot.surrogate * inv_n;
    let kl = tot.kl * inv_n;
    let loss = -surrogate - cfg.lambda_ent * h + cfg.lambda_kl * kl;
    Ok((
        loss,
        grad,
        LossDiagnostics {
            loss,
            surrogate,
            mean_ratio: tot.ratio * inv_n,
            clip_fraction: tot.clipped as f64 * inv_n,
            kl,
            entropy: h,
            steps: n,
        },
    ))
}

/// One record of the diagnostics stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationDiagnostics {
    pub agent: Role,
    pub round: usize,
    pub iteration: usize,
    pub mean_return: f64,
    /// Mean over groups of the population std of segment returns.
    pub return_std: f64,
    /// Mean over groups of the advantage std (1 or 0 per group).
    pub advantage_std: f64,
    pub clip_fraction: f64,
    pub mean_ratio: f64,
    pub kl: f64,
    pub entropy: f64,
    pub loss: f64,
    pub steps: usize,
    /// Excluded from reproducibility comparisons.
    pub wall_time_ms: f64,
}

impl IterationDiagnostics {
    /// Copy with the wall clock zeroed, for determinism checks.
    pub fn without_time(&self) -> Self {
        Self {
            wall_time_ms: 0.0,
            ..self.clone()
        }
    }
}

/// Header line of a diagnostics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiagnosticsHeader {
    pub format: String,
    pub schema_version: u32,
    pub header: FileHeader,
}

impl DiagnosticsHeader {
    pub fn new(header: FileHeader) -> Self {
        Self {
            format: "trackarena.diagnostics".into(),
            schema_version: DIAGNOSTICS_SCHEMA_VERSION,
            header,
        }
    }
}

/// Loss, update and diagnostics for one agent's batches.
pub(crate) fn apply_update(
    params: &PolicyParams,
    reference: &PolicyParams,
    batches: &[GroupBatch],
    opt: &mut AdamState,
    cfg: &GrpoConfig,
    agent: Role,
    round: usize,
    iteration: usize,
    started: Instant,
) -> Result<(PolicyParams, IterationDiagnostics)> {
    let (_, grad, d) = grpo_loss(params, reference, batches, cfg)?;
    let next = update(params, &grad, opt, &cfg.adam())?;
    let g = batches.len().max(1) as f64;
    let mut ret = 0.0;
    let mut rstd = 0.0;
    let mut astd = 0.0;
    for b in batches {
        let r = b.returns();
        let (m, s) = mean_std(&r);
        ret += m;
        rstd += s;
        astd += mean_std(&b.advantages).1;
    }
    Ok((
        next,
        IterationDiagnostics {
            agent,
            round,
            iteration,
            mean_return: ret / g,
            return_std: rstd / g,
            advantage_std: astd / g,
            clip_fraction: d.clip_fraction,
            mean_ratio: d.mean_ratio,
            kl: d.kl,
            entropy: d.entropy,
            loss: d.loss,
            steps: d.steps,
            wall_time_ms: started.elapsed().as_secs_f64() * 1e3,
        },
    ))
}

/// Opponent used while collecting one iteration.
#[derive(Clone, Copy)]
pub(crate) enum OpponentSource<'a> {
    /// Each episode's own behavior.
    Suite(&'a OpponentPolicies),
    Static,
    Random { speed_m: f64, resample_every: u32 },
    /// A policy that learns (sampled) or is frozen (mean).
    Policy { params: &'a PolicyParams, learning: bool },
}

/// Samples start contexts and collects one group per context.
///
/// The start context is reached by running the current tracker (sampled) and
/// the iteration's opponent for a random number of steps from a suite episode.
pub(crate) fn collect_iteration(
    suite: &[EpisodeSpec],
    tracker: &PolicyParams,
    opponent: OpponentSource,
    rewards: &RewardConfig,
    cfg: &GrpoConfig,
    iter_seed: u64,
) -> Result<(Vec<GroupBatch>, Vec<GroupBatch>)> {
    if suite.is_empty() {
        return Err(Error::Usage("training needs a non-empty suite".into()));
    }
    let mut rng = rng_from(iter_seed, &[]);
    let picks: Vec<(usize, u64, u32)> = (0..cfg.segments_per_iteration)
        .map(|_| {
            let e = rng.random_range(0..suite.len());
            let s = rng.next_u64();
            let k = rng.random_range(0..=cfg.max_start_step);
            (e, s, k)
        })
        .collect();
    let groups = picks
        .par_iter()
        .enumerate()
        .map(|(g, &(e, s, k))| {
            let spec = &suite[e];
            let opp_actor = match opponent {
                OpponentSource::Suite(p) => match &spec.opponent {
                    Some(b) => b.actor(p)?,
                    None => Actor::Static,
                },
                OpponentSource::Static => Actor::Static,
                OpponentSource::Random { speed_m, resample_every } => Actor::RandomWalk {
                    motion_seed: derive_seed(s, &[2]),
                    speed_m,
                    resample_every,
                },
                OpponentSource::Policy { params, learning: true } => Actor::Sampled(params),
                OpponentSource::Policy { params, learning: false } => Actor::Mean(params),
            };
            let ctx = start_context(spec, tracker, &opp_actor, rewards, k, derive_seed(s, &[0]))?;
            rollout_group(
                &ctx,
                &Actor::Sampled(tracker),
                &opp_actor,
                rewards,
                cfg,
                &member_seeds(derive_seed(s, &[1]), cfg.group_size),
                ((iter_seed & 0xffff_ffff) << 16) | g as u64,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let mut trk = Vec::new();
    let mut opp = Vec::new();
    for j in groups {
        trk.extend(j.tracker);
        opp.extend(j.opponent);
    }
    Ok((trk, opp))
}

/// Latest non-terminal state within `steps` anchor steps of an episode.
pub fn start_context(
    spec: &EpisodeSpec,
    tracker: &PolicyParams,
    opponent: &Actor,
    rewards: &RewardConfig,
    steps: u32,
    seed: u64,
) -> Result<EpisodeContext> {
    let mut ctx = EpisodeContext::new(build_arena_shared(std::sync::Arc::new(spec.arena.clone()))?);
    let mut rt = rng_from(seed, &[0]);
    let mut ro = rng_from(seed, &[1]);
    for _ in 0..steps {
        let mut next = ctx.clone();
        next.step_with(&Actor::Sampled(tracker), opponent, rewards, &mut rt, &mut ro)?;
        if next.state.is_terminated() {
            break;
        }
        ctx = next;
    }
    Ok(ctx)
}

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub diagnostics: Vec<IterationDiagnostics>,
}

pub(crate) fn require_phase(ck: &Checkpoint, phase: Phase) -> Result<PolicyParams> {
    if ck.phase != phase {
        return Err(Error::Usage(format!(
            "init checkpoint has phase {:?}, expected {:?}",
            ck.phase, phase
        )));
    }
    ck.params()
}

/// Tracker GRPO against each suite episode's own opponent behavior, regularized
/// toward the BC checkpoint.
pub fn train_single_agent(
    bc: &Checkpoint,
    suite: &[EpisodeSpec],
    policies: &OpponentPolicies,
    rewards: &RewardConfig,
    cfg: &GrpoConfig,
    seed: u64,
    header: FileHeader,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    rewards.validate()?;
    let reference = require_phase(bc, Phase::Bc)?;
    let mut params = reference.clone();
    let mut opt = AdamState::new(params.data.len());
    let mut diagnostics = Vec::with_capacity(cfg.iterations);
    for it in 0..cfg.iterations {
        let started = Instant::now();
        let wrap = |e: Error| match e {
            Error::Training(m) => Error::Training(format!("iteration {it}: {m}")),
            other => other,
        };
        let (batches, _) = collect_iteration(
            suite,
            &params,
            OpponentSource::Suite(policies),
            rewards,
            cfg,
            derive_seed(seed, &[it as u64]),
        )
        .map_err(wrap)?;
        let (next, d) = apply_update(&params, &reference, &batches, &mut opt, cfg, Role::Tracker, 0, it, started)
            .map_err(wrap)?;
        params = next;
        diagnostics.push(d);
    }
    Ok(TrainOutcome {
        checkpoint: Checkpoint::new(&params, Phase::SingleRl, header),
        diagnostics,
    })
}
