//! Scripted expert, demonstration collection and waypoint regression.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::arena::{build_arena, ActionPlan, ArenaSpec, ArenaState, Role, Waypoint, NUM_RAYS};
use crate::error::{Error, Result};
use crate::geometry::{normalize_angle, segment_hits_disc, Vec2};
use crate::optim::{update, AdamConfig, AdamState};
use crate::policy::{Gradient, Observation, PolicyParams, ACTION_DIM};
use crate::seeds::{derive_seed, rng_from};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpertConfig {
    pub pursuit_gain: f64,
    pub standoff_m: f64,
    pub avoid_weight: f64,
    /// Clearance (beyond the body radius) below which rays push the expert away.
    pub avoid_range_m: f64,
    pub max_speed_m: f64,
    /// Repulsion from the other agent inside `agent_avoid_range_m` (center distance).
    pub agent_avoid_weight: f64,
    pub agent_avoid_range_m: f64,
    /// Sidestep speed when the other agent blocks the view of the target.
    pub sidestep_m: f64,
    /// Std of Gaussian noise added to executed expert waypoints during collection.
    pub execution_noise: f64,
}

impl Default for ExpertConfig {
    fn default() -> Self {
        Self {
            pursuit_gain: 0.5,
            standoff_m: 2.25,
            avoid_weight: 0.4,
            avoid_range_m: 0.6,
            max_speed_m: 0.5,
            agent_avoid_weight: 0.6,
            agent_avoid_range_m: 1.2,
            sidestep_m: 0.25,
            execution_noise: 0.1,
        }
    }
}

impl ExpertConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("expert: {m}")));
        if !(self.standoff_m > 0.0) {
            return bad("standoff_m must be > 0");
        }
        if !(self.pursuit_gain > 0.0 && self.max_speed_m > 0.0) {
            return bad("pursuit_gain and max_speed_m must be > 0");
        }
        let non_neg = [
            self.avoid_weight,
            self.avoid_range_m,
            self.agent_avoid_weight,
            self.agent_avoid_range_m,
            self.sidestep_m,
            self.execution_noise,
        ];
        if !non_neg.iter().all(|v| *v >= 0.0) {
            return bad("avoidance and noise settings must be >= 0");
        }
        Ok(())
    }
}

/// Privileged pursuit controller.
///
/// Each of the five waypoints is planned from the pose reached by the previous
/// one, against the current target position. The controller uses no target
/// velocity, so its behavior is a function of what the observation exposes.
pub fn expert_policy(state: &ArenaState, viewer: Role, cfg: &ExpertConfig) -> Result<ActionPlan> {
    let body = *state.viewer(viewer)?;
    let spec = &state.spec;
    let target = state.target.position();
    let other = match viewer {
        Role::Tracker => state.opponent,
        _ => Some(state.tracker),
    };
    let mut pose = body.pose;
    let mut plan = ActionPlan::zero();
    let tk = target;
    for slot in plan.waypoints.iter_mut() {
        let pos = pose.position();
        let away = pos - tk;
        let dist = away.norm();
        let dir = if dist > 1e-9 { away * (1.0 / dist) } else { Vec2::from_angle(pose.heading + PI) };
        let goal = tk + dir * cfg.standoff_m;
        let mut mv = (goal - pos) * cfg.pursuit_gain;
        if cfg.avoid_weight > 0.0 && cfg.avoid_range_m > 0.0 {
            for j in 0..NUM_RAYS {
                let ray = Vec2::from_angle(pose.heading + j as f64 * 2.0 * PI / NUM_RAYS as f64);
                let clearance = state.cast_ray(pos, ray, viewer) - body.radius;
                if clearance < cfg.avoid_range_m {
                    let push = cfg.avoid_weight * (cfg.avoid_range_m - clearance.max(0.0)) / cfg.avoid_range_m;
                    mv = mv - ray * push;
                }
            }
        }
        if let Some(o) = other {
            let op = o.position();
            let d = pos.distance(op);
            if d < cfg.agent_avoid_range_m && d > 1e-9 {
                let push = cfg.agent_avoid_weight * (cfg.agent_avoid_range_m - d) / cfg.agent_avoid_range_m;
                mv = mv + (pos - op) * (push / d);
            }
            let sight = tk - pos;
            if sight.norm_sq() > 1e-18 && segment_hits_disc(pos, tk, op, o.radius + 0.1) {
                let side = sight.x * (op.y - pos.y) - sight.y * (op.x - pos.x);
                let normal = Vec2::new(-sight.y, sight.x) * (1.0 / sight.norm());
                mv = mv + normal * if side > 0.0 { -cfg.sidestep_m } else { cfg.sidestep_m };
            }
        }
        let speed = mv.norm();
        if speed > cfg.max_speed_m {
            mv = mv * (cfg.max_speed_m / speed);
        }
        let local = mv.rotate(-pose.heading);
        let look = tk - (pos + mv);
        let dtheta = if look.norm_sq() > 1e-18 { normalize_angle(look.angle() - pose.heading) } else { 0.0 };
        let w = Waypoint::new(local.x, local.y, dtheta).clamped(spec.step_cap_m, spec.turn_cap_rad);
        *slot = w;
        pose = pose.compose(&w);
    }
    Ok(plan)
}

/// One regression pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Demo {
    pub observation: Observation,
    pub expert_plan: ActionPlan,
}

/// Rolls out the expert (with execution noise) on every spec and records one
/// demo per control step. Any opponent present in a spec stays still.
pub fn collect_demos(
    specs: &[ArenaSpec],
    episodes_per_spec: usize,
    cfg: &ExpertConfig,
    seed: u64,
) -> Result<Vec<Demo>> {
    cfg.validate()?;
    for s in specs {
        s.validate()?;
    }
    let jobs: Vec<(usize, usize)> = (0..specs.len())
        .flat_map(|i| (0..episodes_per_spec).map(move |e| (i, e)))
        .collect();
    let episodes: Vec<Result<Vec<Demo>>> = jobs
        .par_iter()
        .map(|&(i, e)| {
            let mut spec = specs[i].clone();
            if episodes_per_spec > 1 {
                spec.seed = derive_seed(spec.seed, &[e as u64]);
            }
            expert_episode(spec, cfg, derive_seed(seed, &[i as u64, e as u64]))
        })
        .collect();
    let mut out = Vec::new();
    for ep in episodes {
        out.extend(ep?);
    }
    Ok(out)
}

fn expert_episode(spec: ArenaSpec, cfg: &ExpertConfig, noise_seed: u64) -> Result<Vec<Demo>> {
    let mut state = build_arena(spec)?;
    let mut rng = rng_from(noise_seed, &[]);
    let mut demos = Vec::new();
    while !state.is_terminated() {
        let plan = expert_policy(&state, Role::Tracker, cfg)?;
        demos.push(Demo {
            observation: state.observe(Role::Tracker)?,
            expert_plan: plan,
        });
        let mut exec = plan;
        if cfg.execution_noise > 0.0 {
            for w in &mut exec.waypoints {
                let n: [f64; 3] = [rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal)];
                *w = Waypoint::new(
                    w.dx + cfg.execution_noise * n[0],
                    w.dy + cfg.execution_noise * n[1],
                    w.dtheta + cfg.execution_noise * n[2],
                );
            }
        }
        state.step(&exec, None)?;
    }
    Ok(demos)
}

/// Mean over the batch of the summed squared error between the policy mean
/// and the flattened expert plan, with its gradient.
pub fn bc_loss(params: &PolicyParams, batch: &[Demo]) -> Result<(f64, Gradient)> {
    if batch.is_empty() {
        return Err(Error::Usage("bc_loss needs a non-empty batch".into()));
    }
    const CHUNK: usize = 16;
    let scale = 1.0 / batch.len() as f64;
    let parts: Vec<(f64, Gradient)> = batch
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut g = Gradient::zeros_like(params);
            let mut loss = 0.0;
            for d in chunk {
                let cache = params.forward_cached(&d.observation);
                let target = d.expert_plan.to_flat();
                let mut d_mean = [0.0; ACTION_DIM];
                for j in 0..ACTION_DIM {
                    let e = cache.mean[j] - target[j];
                    loss += e * e;
                    d_mean[j] = 2.0 * e * scale;
                }
                params.backward_mean(&cache, &d_mean, &mut g);
            }
            (loss, g)
        })
        .collect();
    let mut grad = Gradient::zeros_like(params);
    let mut loss = 0.0;
    for (l, g) in &parts {
        loss += l;
        grad.add_assign(g);
    }
    Ok((loss * scale, grad))
}

fn mean_loss(params: &PolicyParams, demos: &[Demo]) -> f64 {
    demos
        .par_chunks(256)
        .map(|c| {
            c.iter()
                .map(|d| {
                    let (m, _) = params.forward(&d.observation);
                    m.iter().zip(d.expert_plan.to_flat()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
                })
                .sum::<f64>()
        })
        .collect::<Vec<_>>()
        .iter()
        .sum::<f64>()
        / demos.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BcConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub holdout_fraction: f64,
}

impl Default for BcConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 64,
            epochs: 20,
            holdout_fraction: 0.1,
        }
    }
}

impl BcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("bc.batch_size must be >= 1".into()));
        }
        if !(self.learning_rate >= 0.0) {
            return Err(Error::Config("bc.learning_rate must be >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return Err(Error::Config("bc.holdout_fraction must be in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BcReport {
    pub train_size: usize,
    pub holdout_size: usize,
    pub initial_holdout_loss: f64,
    /// Holdout loss after each epoch.
    pub holdout_losses: Vec<f64>,
    /// Mean minibatch loss within each epoch.
    pub train_losses: Vec<f64>,
}

impl BcReport {
    pub fn final_holdout_loss(&self) -> f64 {
        self.holdout_losses.last().copied().unwrap_or(self.initial_holdout_loss)
    }
}

/// Minibatch Adam on the regression loss. The log-std block receives no
/// gradient and is returned unchanged.
pub fn train_bc(
    params_init: &PolicyParams,
    demos: &[Demo],
    cfg: &BcConfig,
    seed: u64,
) -> Result<(PolicyParams, BcReport)> {
    cfg.validate()?;
    if demos.is_empty() {
        return Err(Error::Usage("train_bc needs demonstrations".into()));
    }
    let mut rng = rng_from(seed, &[]);
    let mut idx: Vec<usize> = (0..demos.len()).collect();
    idx.shuffle(&mut rng);
    let n_hold = ((demos.len() as f64) * cfg.holdout_fraction).floor() as usize;
    let n_hold = if demos.len() > 1 { n_hold.min(demos.len() - 1) } else { 0 };
    let holdout: Vec<Demo> = idx[..n_hold].iter().map(|&i| demos[i].clone()).collect();
    let mut train: Vec<Demo> = idx[n_hold..].iter().map(|&i| demos[i].clone()).collect();
    let eval_set: &[Demo] = if holdout.is_empty() { demos } else { &holdout };

    let mut params = params_init.clone();
    let adam = AdamConfig::with_lr(cfg.learning_rate);
    let mut opt = AdamState::new(params.data.len());
    let mut report = BcReport {
        train_size: train.len(),
        holdout_size: holdout.len(),
        initial_holdout_loss: mean_loss(&params, eval_set),
        holdout_losses: Vec::new(),
        train_losses: Vec::new(),
    };
    for epoch in 0..cfg.epochs {
        train.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0usize;
        for batch in train.chunks(cfg.batch_size) {
            let (loss, grad) = bc_loss(&params, batch)?;
            if !loss.is_finite() {
                return Err(Error::Training(format!("bc loss diverged in epoch {epoch} batch {batches}")));
            }
            params = update(&params, &grad, &mut opt, &adam)
                .map_err(|e| Error::Training(format!("bc epoch {epoch} batch {batches}: {e}")))?;
            total += loss;
            batches += 1;
        }
        let hold = mean_loss(&params, eval_set);
        if !hold.is_finite() {
            return Err(Error::Training(format!("bc holdout loss diverged in epoch {epoch}")));
        }
        report.train_losses.push(total / batches as f64);
        report.holdout_losses.push(hold);
    }
    Ok((params, report))
}
