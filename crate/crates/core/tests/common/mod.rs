//! Independent oracles shared by the property tests and the acceptance harness.
#![allow(dead_code)]

use std::f64::consts::PI;
use std::sync::Arc;

use trackarena::arena::{build_arena, ActionPlan, ArenaSpec, ArenaState, Obstacle, Pose, Role, TerminationCause, Waypoint};
use trackarena::bc::{bc_loss, Demo};
use trackarena::geometry::Vec2;
use trackarena::grpo::{grpo_loss, GroupBatch, GrpoConfig, RolloutSegment};
use trackarena::policy::{
    backward, entropy, kl_reference, log_prob, sample_action, LossAdjoints, Observation, PolicyParams, ACTION_DIM,
    OBS_DIM,
};
use trackarena::seeds::{rng_from, SimRng};
use rand::Rng;

pub const FD_STEP: f64 = 1e-5;
pub const GRAD_REL_TOL: f64 = 1e-4;
pub const GRAD_ABS_FLOOR: f64 = 1e-8;
pub const OVERLAP_TOL: f64 = 1e-9;

// ---------------------------------------------------------------- policies

pub fn rand_obs(rng: &mut SimRng) -> Observation {
    let mut x = [0.0; OBS_DIM];
    for v in &mut x {
        *v = rng.random_range(-2.0..2.0);
    }
    Observation::new(x).unwrap()
}

/// Small random network with non-trivial biases and per-dimension log-stds.
pub fn rand_params(rng: &mut SimRng) -> PolicyParams {
    let shapes: [&[usize]; 4] = [&[6], &[8, 5], &[5, 7], &[10]];
    let hidden = shapes[rng.random_range(0..shapes.len())];
    let mut p = PolicyParams::init(hidden, 0.0, rng);
    for v in p.data.iter_mut() {
        *v += rng.random_range(-0.2..0.2);
    }
    for v in p.log_std_mut() {
        *v = rng.random_range(-1.5..-0.1);
    }
    p
}

fn same_shape(p: &PolicyParams, rng: &mut SimRng) -> PolicyParams {
    let mut q = p.clone();
    for v in q.data.iter_mut() {
        *v += rng.random_range(-0.3..0.3);
    }
    for v in q.log_std_mut() {
        *v = rng.random_range(-1.5..-0.1);
    }
    q
}

pub fn central_difference(p: &PolicyParams, f: impl Fn(&PolicyParams) -> f64) -> Vec<f64> {
    let mut q = p.clone();
    (0..p.data.len())
        .map(|i| {
            let x = p.data[i];
            q.data[i] = x + FD_STEP;
            let up = f(&q);
            q.data[i] = x - FD_STEP;
            let down = f(&q);
            q.data[i] = x;
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}

/// `‖a − b‖ / max(‖a‖, ‖b‖, floor)`.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    norm(&diff) / norm(a).max(norm(b)).max(GRAD_ABS_FLOOR)
}

#[derive(Clone, Copy, Debug)]
pub enum GradTarget {
    BcLoss,
    LogProb,
    Entropy,
    KlReference,
    GrpoLoss,
}

pub const GRAD_TARGETS: [GradTarget; 5] = [
    GradTarget::BcLoss,
    GradTarget::LogProb,
    GradTarget::Entropy,
    GradTarget::KlReference,
    GradTarget::GrpoLoss,
];

/// Analytic-vs-numeric relative error for one random instance.
pub fn gradient_check(target: GradTarget, seed: u64) -> f64 {
    let mut rng = rng_from(seed, &[target as u64]);
    let p = rand_params(&mut rng);
    match target {
        GradTarget::BcLoss => {
            let n = rng.random_range(1..6);
            let batch: Vec<Demo> = (0..n)
                .map(|_| {
                    let flat: Vec<f64> = (0..ACTION_DIM).map(|_| rng.random_range(-0.5..0.5)).collect();
                    Demo {
                        observation: rand_obs(&mut rng),
                        expert_plan: ActionPlan::from_flat(&flat).unwrap(),
                    }
                })
                .collect();
            // Loss recomputed from the forward pass only.
            let loss = |q: &PolicyParams| {
                batch
                    .iter()
                    .map(|d| {
                        let (m, _) = q.forward(&d.observation);
                        m.iter().zip(d.expert_plan.to_flat()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
                    })
                    .sum::<f64>()
                    / batch.len() as f64
            };
            let (l, g) = bc_loss(&p, &batch).unwrap();
            assert!((l - loss(&p)).abs() <= 1e-12 * l.abs().max(1.0), "bc loss value");
            relative_error(&g.data, &central_difference(&p, loss))
        }
        GradTarget::LogProb => {
            let obs = rand_obs(&mut rng);
            let a = sample_action(&p, &obs, &mut rng).action;
            let g = backward(&p, &obs, &a, LossAdjoints { log_prob: 1.0, ..Default::default() }, None).unwrap();
            relative_error(&g.data, &central_difference(&p, |q| log_prob(q, &obs, &a)))
        }
        GradTarget::Entropy => {
            let obs = rand_obs(&mut rng);
            let g = backward(&p, &obs, &[0.0; ACTION_DIM], LossAdjoints { entropy: 1.0, ..Default::default() }, None)
                .unwrap();
            relative_error(&g.data, &central_difference(&p, entropy))
        }
        GradTarget::KlReference => {
            let obs = rand_obs(&mut rng);
            let r = same_shape(&p, &mut rng);
            let g = backward(&p, &obs, &[0.0; ACTION_DIM], LossAdjoints { kl: 1.0, ..Default::default() }, Some(&r))
                .unwrap();
            relative_error(&g.data, &central_difference(&p, |q| kl_reference(q, &r, &obs)))
        }
        GradTarget::GrpoLoss => {
            let reference = same_shape(&p, &mut rng);
            let cfg = GrpoConfig {
                epsilon: 0.2,
                lambda_kl: rng.random_range(0.0..0.2),
                lambda_ent: rng.random_range(0.0..0.05),
                ..GrpoConfig::default()
            };
            let batches = random_batches(&p, &mut rng, cfg.epsilon);
            let (_, g, _) = grpo_loss(&p, &reference, &batches, &cfg).unwrap();
            let f = |q: &PolicyParams| grpo_loss(q, &reference, &batches, &cfg).unwrap().0;
            relative_error(&g.data, &central_difference(&p, f))
        }
    }
}

/// Groups whose old log-probs put every ratio at least 0.05 away from a clip
/// boundary, so the loss is smooth within the finite-difference stencil.
fn random_batches(p: &PolicyParams, rng: &mut SimRng, eps: f64) -> Vec<GroupBatch> {
    (0..2)
        .map(|g| {
            let segments: Vec<RolloutSegment> = (0..3)
                .map(|_| {
                    let mut seg = RolloutSegment {
                        context_id: g,
                        observations: Vec::new(),
                        actions: Vec::new(),
                        old_log_probs: Vec::new(),
                        rewards: Vec::new(),
                        segment_return: 0.0,
                        states: Vec::new(),
                    };
                    for _ in 0..3 {
                        let obs = rand_obs(rng);
                        let s = sample_action(p, &obs, rng);
                        let ratio = match rng.random_range(0..3) {
                            0 => rng.random_range(0.5..1.0 - eps - 0.05),
                            1 => rng.random_range(1.0 - eps + 0.05..1.0 + eps - 0.05),
                            _ => rng.random_range(1.0 + eps + 0.05..1.6),
                        };
                        seg.old_log_probs.push(s.log_prob - f64::ln(ratio));
                        seg.observations.push(obs);
                        seg.actions.push(s.action);
                        seg.rewards.push(0.0);
                    }
                    seg
                })
                .collect();
            let advantages = (0..segments.len()).map(|_| rng.random_range(-1.5..1.5)).collect();
            GroupBatch {
                context_id: g,
                segments,
                advantages,
            }
        })
        .collect()
}

// ---------------------------------------------------------------- arena

/// Random cluttered arena: mixed circle and box obstacles, optional opponent,
/// moving target.
pub fn random_arena(rng: &mut SimRng) -> ArenaSpec {
    loop {
        let w = rng.random_range(5.0..12.0);
        let h = rng.random_range(5.0..12.0);
        let mut spec = ArenaSpec::open(w, h);
        spec.seed = rng.random();
        let inner = |rng: &mut SimRng, m: f64| {
            Vec2::new(rng.random_range(-w / 2.0 + m..w / 2.0 - m), rng.random_range(-h / 2.0 + m..h / 2.0 - m))
        };
        for _ in 0..rng.random_range(0..9) {
            let c = inner(rng, 0.5);
            let o = if rng.random_bool(0.5) {
                Obstacle::Circle {
                    center: c,
                    radius: rng.random_range(0.1..0.8),
                }
            } else {
                let hx = rng.random_range(0.05..0.8);
                let hy = rng.random_range(0.05..0.8);
                Obstacle::Rect {
                    min: Vec2::new(c.x - hx, c.y - hy),
                    max: Vec2::new(c.x + hx, c.y + hy),
                }
            };
            spec.obstacles.push(o);
        }
        let pose = |rng: &mut SimRng| {
            let p = inner(rng, 0.4);
            Pose::new(p.x, p.y, rng.random_range(-PI..PI))
        };
        spec.tracker_spawn = pose(rng);
        spec.target_spawn = pose(rng);
        if rng.random_bool(0.6) {
            spec.opponent_spawn = Some(pose(rng));
        }
        spec.target_script.waypoints = (0..3).map(|_| inner(rng, 0.4)).collect();
        spec.target_script.speed = rng.random_range(0.0..0.3);
        spec.target_script.looped = rng.random_bool(0.5);
        spec.max_steps = rng.random_range(20..80);
        if build_arena(spec.clone()).is_ok() {
            return spec;
        }
    }
}

/// Random plan; with `scale` 1 the first waypoint often exceeds the caps.
pub fn random_plan(rng: &mut SimRng, scale: f64) -> ActionPlan {
    let flat: Vec<f64> = (0..ACTION_DIM)
        .map(|i| scale * if i % 3 == 2 { rng.random_range(-1.5..1.5) } else { rng.random_range(-0.8..0.8) })
        .collect();
    ActionPlan::from_flat(&flat).unwrap()
}

fn wall_clearance(spec: &ArenaSpec, p: Vec2, r: f64) -> f64 {
    let b = &spec.bounds;
    (p.x - r - b.min.x).min(b.max.x - p.x - r).min(p.y - r - b.min.y).min(b.max.y - p.y - r)
}

fn obstacle_clearance(o: &Obstacle, p: Vec2, r: f64) -> f64 {
    match *o {
        Obstacle::Circle { center, radius } => (p - center).norm() - radius - r,
        Obstacle::Rect { min, max } => {
            let q = Vec2::new(p.x.clamp(min.x, max.x), p.y.clamp(min.y, max.y));
            if q == p {
                // Inside: negative depth to the nearest face.
                -((p.x - min.x).min(max.x - p.x).min(p.y - min.y).min(max.y - p.y)) - r
            } else {
                (p - q).norm() - r
            }
        }
    }
}

pub fn check_collision_soundness(s: &ArenaState) -> Result<(), String> {
    let agents: Vec<_> = [Some(s.tracker), s.opponent].into_iter().flatten().collect();
    for a in &agents {
        let p = a.position();
        let w = wall_clearance(&s.spec, p, a.radius);
        if w < -OVERLAP_TOL {
            return Err(format!("{:?} crosses a wall by {}", a.role, -w));
        }
        for (i, o) in s.spec.obstacles.iter().enumerate() {
            let c = obstacle_clearance(o, p, a.radius);
            if c < -OVERLAP_TOL {
                return Err(format!("{:?} overlaps obstacle {i} by {}", a.role, -c));
            }
        }
        let t = s.target;
        let c = (p - t.position()).norm() - a.radius - t.radius;
        if c < -OVERLAP_TOL {
            return Err(format!("{:?} overlaps the target by {}", a.role, -c));
        }
    }
    if let [a, b] = agents.as_slice() {
        let c = (a.position() - b.position()).norm() - a.radius - b.radius;
        if c < -OVERLAP_TOL {
            return Err(format!("agents overlap by {}", -c));
        }
    }
    Ok(())
}

pub fn check_headings(s: &ArenaState) -> Result<(), String> {
    for b in [Some(s.tracker), s.opponent, Some(s.target)].into_iter().flatten() {
        let h = b.pose.heading;
        if !(h > -PI && h <= PI) {
            return Err(format!("{:?} heading {h} outside (-pi, pi]", b.role));
        }
    }
    Ok(())
}

/// The cause must agree with exactly one of the mutually exclusive conditions.
pub fn check_termination(s: &ArenaState) -> Result<(), String> {
    let e = s.events;
    let m = s.memory.tracker;
    let spec = &s.spec;
    let collided = e.tracker_collided;
    let lost = !collided && m.untracked_run >= spec.lost_patience;
    let at_end = !collided && !lost && s.step >= spec.max_steps;
    let good = m.tracked_steps as f64 / spec.max_steps as f64 >= spec.success_tr_threshold;
    let expected = if collided {
        TerminationCause::Collision
    } else if lost {
        TerminationCause::TargetLost
    } else if at_end && good {
        TerminationCause::Success
    } else if at_end {
        TerminationCause::Timeout
    } else {
        TerminationCause::None
    };
    if e.cause != expected {
        return Err(format!("cause {:?}, expected {expected:?}", e.cause));
    }
    if e.terminated != (e.cause != TerminationCause::None) {
        return Err("terminated flag disagrees with cause".into());
    }
    Ok(())
}

/// Removing any single obstacle never hides a visible target.
pub fn check_visibility_monotone(s: &ArenaState) -> Result<(), String> {
    let viewers: Vec<Role> = if s.opponent.is_some() { vec![Role::Tracker, Role::Opponent] } else { vec![Role::Tracker] };
    for v in viewers {
        if !s.target_visible(v).unwrap() {
            continue;
        }
        for i in 0..s.spec.obstacles.len() {
            let mut spec = (*s.spec).clone();
            spec.obstacles.remove(i);
            let mut t = s.clone();
            t.spec = Arc::new(spec);
            if !t.target_visible(v).unwrap() {
                return Err(format!("removing obstacle {i} hid the target from {v:?}"));
            }
        }
    }
    Ok(())
}

/// Waypoint then its inverse in an empty arena returns to the start pose.
pub fn check_frame_round_trip(rng: &mut SimRng) -> Result<(), String> {
    let mut spec = ArenaSpec::open(40.0, 40.0);
    let start = Pose::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(-PI..PI));
    spec.tracker_spawn = start;
    spec.target_spawn = Pose::new(15.0, 15.0, 0.0);
    let mut s = build_arena(spec).map_err(|e| e.to_string())?;
    let r = rng.random_range(0.0..0.5);
    let a = rng.random_range(-PI..PI);
    let (dx, dy, dt) = (r * a.cos(), r * a.sin(), rng.random_range(-PI / 4.0..PI / 4.0));
    let inverse = Waypoint::new(-dx * dt.cos() - dy * dt.sin(), dx * dt.sin() - dy * dt.cos(), -dt);
    s.step(&ActionPlan::repeat(Waypoint::new(dx, dy, dt)), None).map_err(|e| e.to_string())?;
    s.step(&ActionPlan::repeat(inverse), None).map_err(|e| e.to_string())?;
    let end = s.tracker.pose;
    let dpos = end.position().distance(start.position());
    let dh = trackarena::geometry::normalize_angle(end.heading - start.heading).abs();
    if dpos > 1e-9 || dh > 1e-9 {
        return Err(format!("round trip off by {dpos} m, {dh} rad"));
    }
    Ok(())
}

/// One randomized physics scenario: every invariant checked after every step.
pub fn physics_scenario(seed: u64) -> Result<(), String> {
    let mut rng = rng_from(seed, &[0x7068_7973]);
    check_frame_round_trip(&mut rng)?;
    let spec = random_arena(&mut rng);
    let mut s = build_arena(spec).map_err(|e| e.to_string())?;
    check_collision_soundness(&s)?;
    check_visibility_monotone(&s)?;
    // Half the scenarios wander gently so episodes run longer.
    let scale = if rng.random_bool(0.5) { 1.0 } else { 0.2 };
    while !s.is_terminated() {
        let tp = random_plan(&mut rng, scale);
        let op = s.opponent.map(|_| random_plan(&mut rng, scale));
        s.step(&tp, op.as_ref()).map_err(|e| e.to_string())?;
        let ctx = |e: String| format!("seed {seed} step {}: {e}", s.step);
        check_collision_soundness(&s).map_err(ctx)?;
        check_headings(&s).map_err(ctx)?;
        check_termination(&s).map_err(ctx)?;
        check_visibility_monotone(&s).map_err(ctx)?;
    }
    if s.step(&ActionPlan::zero(), None).is_ok() {
        return Err(format!("seed {seed}: stepping a terminated episode succeeded"));
    }
    Ok(())
}
