//! Deterministic 2D tracking arena.
//!
//! Bodies are discs moving kinematically. Each control step executes only the
//! first waypoint of every agent's five-waypoint plan (receding horizon), then
//! the scripted target advances. Motion is swept against walls, obstacles and
//! the other bodies; an agent that would penetrate something stops at contact.
//!
//! Update order within a step is fixed: tracker, opponent, target.

use std::f64::consts::PI;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    normalize_angle, ray_box, ray_disc, ray_walls, segment_hits_box, segment_hits_disc,
    toi_disc, toi_rounded_box, toi_walls, Aabb, Vec2,
};
use crate::policy::{Observation, OBS_DIM};
use crate::seeds::SimRng;
use rand::SeedableRng;

pub const ARENA_SCHEMA_VERSION: u32 = 1;
pub const PLAN_LEN: usize = 5;
pub const NUM_RAYS: usize = 8;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
}

impl Pose {
    pub fn new(x: f64, y: f64, heading: f64) -> Self {
        Self {
            x,
            y,
            heading: normalize_angle(heading),
        }
    }

    pub fn position(&self) -> Vec2 {
        Vec2::new(self.x, self.y)
    }

    /// Expresses a world point in this pose's frame (x forward, y left).
    pub fn to_local(&self, p: Vec2) -> Vec2 {
        (p - self.position()).rotate(-self.heading)
    }

    pub fn to_world_dir(&self, v: Vec2) -> Vec2 {
        v.rotate(self.heading)
    }

    /// Pose after applying a waypoint expressed in this pose's frame.
    pub fn compose(&self, w: &Waypoint) -> Pose {
        let d = self.to_world_dir(Vec2::new(w.dx, w.dy));
        Pose::new(self.x + d.x, self.y + d.y, self.heading + w.dtheta)
    }
}

/// Relative motion command in the agent frame.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Waypoint {
    pub dx: f64,
    pub dy: f64,
    pub dtheta: f64,
}

impl Waypoint {
    pub fn new(dx: f64, dy: f64, dtheta: f64) -> Self {
        Self { dx, dy, dtheta }
    }

    pub fn clamped(&self, step_cap: f64, turn_cap: f64) -> Waypoint {
        let c = |v: f64, cap: f64| if v.is_finite() { v.clamp(-cap, cap) } else { 0.0 };
        Waypoint::new(c(self.dx, step_cap), c(self.dy, step_cap), c(self.dtheta, turn_cap))
    }

    pub fn to_array(&self) -> [f64; 3] {
        [self.dx, self.dy, self.dtheta]
    }
}

/// Exactly five waypoints; only the first is executed per control step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ActionPlan {
    pub waypoints: [Waypoint; PLAN_LEN],
}

impl ActionPlan {
    pub fn zero() -> Self {
        Self::default()
    }

    /// Plan repeating the same waypoint five times.
    pub fn repeat(w: Waypoint) -> Self {
        Self {
            waypoints: [w; PLAN_LEN],
        }
    }

    pub fn from_flat(v: &[f64]) -> Result<Self> {
        if v.len() != 3 * PLAN_LEN {
            return Err(Error::Usage(format!(
                "action plan needs {} values, got {}",
                3 * PLAN_LEN,
                v.len()
            )));
        }
        let mut waypoints = [Waypoint::default(); PLAN_LEN];
        for (i, w) in waypoints.iter_mut().enumerate() {
            *w = Waypoint::new(v[3 * i], v[3 * i + 1], v[3 * i + 2]);
        }
        Ok(Self { waypoints })
    }

    pub fn to_flat(&self) -> [f64; 3 * PLAN_LEN] {
        let mut out = [0.0; 3 * PLAN_LEN];
        for (i, w) in self.waypoints.iter().enumerate() {
            out[3 * i..3 * i + 3].copy_from_slice(&w.to_array());
        }
        out
    }

    pub fn first(&self) -> Waypoint {
        self.waypoints[0]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Tracker,
    Opponent,
    Target,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentBody {
    pub pose: Pose,
    pub radius: f64,
    pub role: Role,
}

impl AgentBody {
    pub fn position(&self) -> Vec2 {
        self.pose.position()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case")]
pub enum Obstacle {
    Circle { center: Vec2, radius: f64 },
    Rect { min: Vec2, max: Vec2 },
}

impl Obstacle {
    /// Distance from a point to the obstacle boundary (0 when inside).
    pub fn distance_to(&self, p: Vec2) -> f64 {
        match self {
            Obstacle::Circle { center, radius } => (p.distance(*center) - radius).max(0.0),
            Obstacle::Rect { min, max } => Aabb::new(*min, *max).distance_to(p),
        }
    }

    /// Penetration-free test for a disc (touching counts as free).
    pub fn overlaps_disc(&self, p: Vec2, r: f64) -> bool {
        match self {
            Obstacle::Circle { center, radius } => p.distance(*center) < radius + r,
            Obstacle::Rect { min, max } => Aabb::new(*min, *max).distance_to(p) < r,
        }
    }

    pub fn aabb(&self) -> Aabb {
        match self {
            Obstacle::Circle { center, radius } => Aabb::new(
                Vec2::new(center.x - radius, center.y - radius),
                Vec2::new(center.x + radius, center.y + radius),
            ),
            Obstacle::Rect { min, max } => Aabb::new(*min, *max),
        }
    }

    fn toi(&self, start: Vec2, disp: Vec2, r: f64) -> Option<f64> {
        match self {
            Obstacle::Circle { center, radius } => toi_disc(start, disp, *center, radius + r),
            Obstacle::Rect { min, max } => toi_rounded_box(start, disp, &Aabb::new(*min, *max), r),
        }
    }

    fn blocks_segment(&self, a: Vec2, b: Vec2) -> bool {
        match self {
            Obstacle::Circle { center, radius } => segment_hits_disc(a, b, *center, *radius),
            Obstacle::Rect { min, max } => segment_hits_box(a, b, &Aabb::new(*min, *max)),
        }
    }

    fn ray(&self, origin: Vec2, dir: Vec2) -> Option<f64> {
        match self {
            Obstacle::Circle { center, radius } => ray_disc(origin, dir, *center, *radius),
            Obstacle::Rect { min, max } => ray_box(origin, dir, &Aabb::new(*min, *max)),
        }
    }
}

/// Piecewise-linear target route at constant speed.
///
/// With `looped` the route cycles; otherwise, once the last waypoint is
/// reached, new waypoints are drawn from the arena RNG.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetScript {
    pub waypoints: Vec<Vec2>,
    pub speed: f64,
    #[serde(rename = "loop")]
    pub looped: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArenaSpec {
    pub schema_version: u32,
    pub bounds: Aabb,
    pub obstacles: Vec<Obstacle>,
    pub tracker_spawn: Pose,
    pub opponent_spawn: Option<Pose>,
    pub target_spawn: Pose,
    pub target_script: TargetScript,
    pub fov_half_angle: f64,
    pub step_cap_m: f64,
    pub turn_cap_rad: f64,
    pub max_steps: u32,
    pub seed: u64,
    pub agent_radius: f64,
    pub target_radius: f64,
    pub lost_patience: u32,
    pub success_tr_threshold: f64,
    /// Inclusive distance band `[lo, hi]` of the tracked condition.
    pub track_band_m: [f64; 2],
    pub ray_range_m: f64,
}

impl ArenaSpec {
    /// Empty arena with default kinematics; callers fill in obstacles/spawns.
    pub fn open(width: f64, height: f64) -> Self {
        Self {
            schema_version: ARENA_SCHEMA_VERSION,
            bounds: Aabb::new(Vec2::new(-width / 2.0, -height / 2.0), Vec2::new(width / 2.0, height / 2.0)),
            obstacles: Vec::new(),
            tracker_spawn: Pose::new(0.0, 0.0, 0.0),
            opponent_spawn: None,
            target_spawn: Pose::new(2.25, 0.0, 0.0),
            target_script: TargetScript {
                waypoints: vec![Vec2::new(5.0, 0.0)],
                speed: 0.0,
                looped: true,
            },
            fov_half_angle: PI / 3.0,
            step_cap_m: 0.5,
            turn_cap_rad: PI / 4.0,
            max_steps: 300,
            seed: 0,
            agent_radius: 0.2,
            target_radius: 0.25,
            lost_patience: 20,
            success_tr_threshold: 0.5,
            track_band_m: [1.0, 3.0],
            ray_range_m: 5.0,
        }
    }

    fn disc_inside(&self, p: Vec2, r: f64) -> bool {
        p.x - r >= self.bounds.min.x
            && p.x + r <= self.bounds.max.x
            && p.y - r >= self.bounds.min.y
            && p.y + r <= self.bounds.max.y
    }

    /// Index of the first obstacle overlapping the disc, if any.
    pub fn obstacle_overlap(&self, p: Vec2, r: f64) -> Option<usize> {
        self.obstacles.iter().position(|o| o.overlaps_disc(p, r))
    }

    /// True when a disc can sweep from `a` to `b` without touching obstacles.
    pub fn segment_clear(&self, a: Vec2, b: Vec2, r: f64) -> bool {
        self.obstacles.iter().all(|o| o.toi(a, b - a, r).is_none())
            && self.obstacle_overlap(a, r).is_none()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Construction(m));
        let b = &self.bounds;
        if !(b.max.x > b.min.x && b.max.y > b.min.y) || !b.min.is_finite() || !b.max.is_finite() {
            return bad("bounds must have positive, finite extent".into());
        }
        if !(self.fov_half_angle > 0.0 && self.fov_half_angle <= PI) {
            return bad(format!("fov_half_angle {} outside (0, pi]", self.fov_half_angle));
        }
        for (name, v) in [
            ("step_cap_m", self.step_cap_m),
            ("turn_cap_rad", self.turn_cap_rad),
            ("agent_radius", self.agent_radius),
            ("target_radius", self.target_radius),
            ("ray_range_m", self.ray_range_m),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        if self.max_steps == 0 || self.lost_patience == 0 {
            return bad("max_steps and lost_patience must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.success_tr_threshold) {
            return bad("success_tr_threshold outside [0, 1]".into());
        }
        if !(self.track_band_m[0] >= 0.0 && self.track_band_m[0] < self.track_band_m[1]) {
            return bad("track_band_m must satisfy 0 <= lo < hi".into());
        }
        for (i, o) in self.obstacles.iter().enumerate() {
            let ok = match o {
                Obstacle::Circle { center, radius } => *radius > 0.0 && center.is_finite(),
                Obstacle::Rect { min, max } => max.x > min.x && max.y > min.y,
            };
            if !ok {
                return bad(format!("obstacle {i} is degenerate"));
            }
            let bb = o.aabb();
            if !(bb.min.x > b.min.x && bb.min.y > b.min.y && bb.max.x < b.max.x && bb.max.y < b.max.y) {
                return bad(format!("obstacle {i} is not strictly inside the bounds"));
            }
        }
        let mut spawns = vec![("tracker spawn", self.tracker_spawn, self.agent_radius)];
        if let Some(p) = self.opponent_spawn {
            spawns.push(("opponent spawn", p, self.agent_radius));
        }
        spawns.push(("target spawn", self.target_spawn, self.target_radius));
        for (name, pose, r) in &spawns {
            if !(pose.x.is_finite() && pose.y.is_finite() && pose.heading.is_finite()) {
                return bad(format!("{name} is not finite"));
            }
            if !self.disc_inside(pose.position(), *r) {
                return bad(format!("{name} is outside the bounds"));
            }
            if let Some(i) = self.obstacle_overlap(pose.position(), *r) {
                return bad(format!("{name} overlaps obstacle {i}"));
            }
        }
        for i in 0..spawns.len() {
            for j in i + 1..spawns.len() {
                let (ni, pi, ri) = spawns[i];
                let (nj, pj, rj) = spawns[j];
                if pi.position().distance(pj.position()) < ri + rj {
                    return bad(format!("{ni} overlaps {nj}"));
                }
            }
        }
        let s = &self.target_script;
        if !(s.speed >= 0.0 && s.speed.is_finite()) {
            return bad("target script speed must be >= 0".into());
        }
        if s.waypoints.is_empty() {
            return bad("target script needs at least one waypoint".into());
        }
        for (i, w) in s.waypoints.iter().enumerate() {
            if !self.disc_inside(*w, self.target_radius) {
                return bad(format!("target waypoint {i} is outside the bounds"));
            }
            if let Some(k) = self.obstacle_overlap(*w, self.target_radius) {
                return bad(format!("target waypoint {i} overlaps obstacle {k}"));
            }
            if i > 0 && s.waypoints[i - 1] == *w {
                return bad(format!("target waypoints {} and {i} coincide", i - 1));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminationCause {
    #[default]
    None,
    Success,
    TargetLost,
    Collision,
    Timeout,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepEvents {
    pub tracker_collided: bool,
    pub opponent_collided: bool,
    pub target_visible_tracker: bool,
    pub target_visible_opponent: bool,
    pub terminated: bool,
    pub cause: TerminationCause,
}

/// Per-viewer memory carried alongside the physics state.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewerMemory {
    /// World position where the target was last seen.
    pub last_seen: Vec2,
    /// Steps since the target was last visible.
    pub age: u32,
    /// Executed (clamped) first waypoint of the previous step.
    pub prev_waypoint: Waypoint,
    pub tracked_steps: u32,
    pub untracked_run: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObserverMemory {
    pub tracker: ViewerMemory,
    pub opponent: Option<ViewerMemory>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScriptCursor {
    /// Index of the next scripted waypoint (may run past the list when not looping).
    pub next: usize,
    pub goal: Vec2,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArenaState {
    pub spec: Arc<ArenaSpec>,
    pub step: u32,
    pub tracker: AgentBody,
    pub opponent: Option<AgentBody>,
    pub target: AgentBody,
    pub cursor: ScriptCursor,
    pub rng: SimRng,
    pub events: StepEvents,
    pub memory: ObserverMemory,
}

/// Center-to-center distances: tracker-target, opponent-target, tracker-opponent.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Distances {
    pub d_trk: f64,
    pub d_cmp: Option<f64>,
    pub d_int: Option<f64>,
}

pub fn build_arena(spec: ArenaSpec) -> Result<ArenaState> {
    build_arena_shared(Arc::new(spec))
}

pub fn build_arena_shared(spec: Arc<ArenaSpec>) -> Result<ArenaState> {
    spec.validate()?;
    let body = |pose: Pose, radius: f64, role: Role| AgentBody { pose, radius, role };
    let target_pos = spec.target_spawn.position();
    let fresh = ViewerMemory {
        last_seen: target_pos,
        age: 0,
        prev_waypoint: Waypoint::default(),
        tracked_steps: 0,
        untracked_run: 0,
    };
    let mut state = ArenaState {
        step: 0,
        tracker: body(spec.tracker_spawn, spec.agent_radius, Role::Tracker),
        opponent: spec.opponent_spawn.map(|p| body(p, spec.agent_radius, Role::Opponent)),
        target: body(spec.target_spawn, spec.target_radius, Role::Target),
        cursor: ScriptCursor {
            next: 0,
            goal: spec.target_script.waypoints[0],
        },
        rng: SimRng::seed_from_u64(spec.seed),
        events: StepEvents::default(),
        memory: ObserverMemory {
            tracker: fresh,
            opponent: spec.opponent_spawn.map(|_| fresh),
        },
        spec,
    };
    state.events.target_visible_tracker = state.target_visible(Role::Tracker)?;
    if state.opponent.is_some() {
        state.events.target_visible_opponent = state.target_visible(Role::Opponent)?;
    }
    Ok(state)
}

impl ArenaState {
    pub fn is_terminated(&self) -> bool {
        self.events.terminated
    }

    pub fn body(&self, role: Role) -> Option<&AgentBody> {
        match role {
            Role::Tracker => Some(&self.tracker),
            Role::Opponent => self.opponent.as_ref(),
            Role::Target => Some(&self.target),
        }
    }

    pub fn viewer(&self, role: Role) -> Result<&AgentBody> {
        match role {
            Role::Target => Err(Error::Usage("the target is not a viewer".into())),
            _ => self
                .body(role)
                .ok_or_else(|| Error::Usage(format!("{role:?} is not present in this arena"))),
        }
    }

    pub fn viewer_memory(&self, role: Role) -> Option<&ViewerMemory> {
        match role {
            Role::Tracker => Some(&self.memory.tracker),
            Role::Opponent => self.memory.opponent.as_ref(),
            Role::Target => None,
        }
    }

    pub fn distances(&self) -> Distances {
        let t = self.target.position();
        let k = self.tracker.position();
        Distances {
            d_trk: k.distance(t),
            d_cmp: self.opponent.map(|o| o.position().distance(t)),
            d_int: self.opponent.map(|o| o.position().distance(k)),
        }
    }

    /// Current target velocity (world frame, meters per step) from its script.
    pub fn target_velocity(&self) -> Vec2 {
        let to_goal = self.cursor.goal - self.target.position();
        let n = to_goal.norm();
        if n < 1e-12 {
            Vec2::ZERO
        } else {
            to_goal * (self.spec.target_script.speed.min(n) / n)
        }
    }

    /// Bearing of the target in the viewer frame, in (-π, π].
    pub fn target_bearing(&self, viewer: Role) -> Result<f64> {
        let v = self.viewer(viewer)?;
        Ok(v.pose.to_local(self.target.position()).angle())
    }

    /// True iff the open segment `from → to` meets no obstacle and no agent
    /// disc other than one centred exactly at an endpoint.
    pub fn line_of_sight(&self, from: Vec2, to: Vec2) -> bool {
        if self.spec.obstacles.iter().any(|o| o.blocks_segment(from, to)) {
            return false;
        }
        let bodies = [Some(&self.tracker), self.opponent.as_ref(), Some(&self.target)];
        !bodies.into_iter().flatten().any(|b| {
            let c = b.position();
            c != from && c != to && segment_hits_disc(from, to, c, b.radius)
        })
    }

    pub fn target_visible(&self, viewer: Role) -> Result<bool> {
        let v = self.viewer(viewer)?;
        let bearing = v.pose.to_local(self.target.position()).angle();
        Ok(bearing.abs() <= self.spec.fov_half_angle
            && self.line_of_sight(v.position(), self.target.position()))
    }

    /// Tracked condition for a viewer: inside the distance band and visible.
    pub fn is_tracked(&self, viewer: Role) -> Result<bool> {
        let v = self.viewer(viewer)?;
        let d = v.position().distance(self.target.position());
        let [lo, hi] = self.spec.track_band_m;
        Ok(d >= lo && d <= hi && self.target_visible(viewer)?)
    }

    /// Distance from `origin` along `dir` to walls, obstacles, and agent
    /// bodies other than `exclude` and the target.
    pub fn cast_ray(&self, origin: Vec2, dir: Vec2, exclude: Role) -> f64 {
        let mut t = ray_walls(origin, dir, &self.spec.bounds);
        for o in &self.spec.obstacles {
            if let Some(h) = o.ray(origin, dir) {
                t = t.min(h);
            }
        }
        for b in [Some(&self.tracker), self.opponent.as_ref()].into_iter().flatten() {
            if b.role != exclude {
                if let Some(h) = ray_disc(origin, dir, b.position(), b.radius) {
                    t = t.min(h);
                }
            }
        }
        t
    }

    /// Normalized ray distances from a pose, equiangular starting at its heading.
    pub fn ray_scan(&self, pose: &Pose, exclude: Role) -> [f64; NUM_RAYS] {
        let range = self.spec.ray_range_m;
        let mut out = [0.0; NUM_RAYS];
        for (k, o) in out.iter_mut().enumerate() {
            let dir = Vec2::from_angle(pose.heading + k as f64 * 2.0 * PI / NUM_RAYS as f64);
            *o = (self.cast_ray(pose.position(), dir, exclude) / range).clamp(0.0, 1.0);
        }
        out
    }

    /// Fixed-layout observation for a viewer; see [`crate::policy::Observation`].
    pub fn observe(&self, viewer: Role) -> Result<Observation> {
        let v = *self.viewer(viewer)?;
        let mem = *self.viewer_memory(viewer).expect("viewer memory exists for present viewers");
        let visible = match viewer {
            Role::Tracker => self.events.target_visible_tracker,
            _ => self.events.target_visible_opponent,
        };
        let rel = v.pose.to_local(mem.last_seen);
        let mut x = [0.0; OBS_DIM];
        x[0] = rel.x;
        x[1] = rel.y;
        x[2] = if visible { 1.0 } else { 0.0 };
        x[3] = rel.norm();
        x[4] = if rel.norm_sq() > 0.0 { rel.angle() } else { 0.0 };
        x[5] = (mem.age as f64 / self.spec.lost_patience as f64).min(1.0);
        let other = match viewer {
            Role::Tracker => self.opponent,
            _ => Some(self.tracker),
        };
        if let Some(o) = other {
            let r = v.pose.to_local(o.position());
            x[6] = r.x;
            x[7] = r.y;
            x[8] = 1.0;
            x[9] = r.norm();
        }
        x[10..10 + NUM_RAYS].copy_from_slice(&self.ray_scan(&v.pose, viewer));
        x[18..21].copy_from_slice(&mem.prev_waypoint.to_array());
        Observation::new(x)
    }

    /// Earliest blocking fraction for a disc sweep and what blocked it.
    fn sweep(&self, start: Vec2, disp: Vec2, r: f64, mover: Role) -> Option<(f64, Blocker)> {
        let mut best: Option<(f64, Blocker)> = None;
        let mut consider = |t: Option<f64>, who: Blocker| {
            if let Some(t) = t {
                if best.is_none_or(|(b, _)| t < b) {
                    best = Some((t, who));
                }
            }
        };
        consider(toi_walls(start, disp, &self.spec.bounds, r), Blocker::Scenery);
        for o in &self.spec.obstacles {
            consider(o.toi(start, disp, r), Blocker::Scenery);
        }
        for b in [Some(&self.tracker), self.opponent.as_ref(), Some(&self.target)]
            .into_iter()
            .flatten()
        {
            if b.role != mover {
                consider(toi_disc(start, disp, b.position(), b.radius + r), Blocker::Body(b.role));
            }
        }
        best
    }

    /// Moves one body by a world displacement, stopping at first contact.
    fn move_body(&mut self, role: Role, disp: Vec2, new_heading: f64) -> Option<Blocker> {
        let body = *self.body(role).expect("moving body exists");
        let start = body.position();
        let hit = self.sweep(start, disp, body.radius, role);
        let t = hit.map_or(1.0, |(t, _)| t);
        let end = start + disp * t;
        let pose = Pose::new(end.x, end.y, new_heading);
        match role {
            Role::Tracker => self.tracker.pose = pose,
            Role::Opponent => self.opponent.as_mut().expect("opponent exists").pose = pose,
            Role::Target => self.target.pose = pose,
        }
        hit.map(|(_, b)| b)
    }

    fn advance_target(&mut self) {
        let speed = self.spec.target_script.speed;
        if speed <= 0.0 {
            return;
        }
        let pos = self.target.position();
        if pos.distance(self.cursor.goal) < 1e-9 {
            self.next_goal();
        }
        let to_goal = self.cursor.goal - self.target.position();
        let dist = to_goal.norm();
        if dist < 1e-12 {
            return;
        }
        let disp = to_goal * (speed.min(dist) / dist);
        self.move_body(Role::Target, disp, to_goal.angle());
        if self.target.position().distance(self.cursor.goal) < 1e-9 {
            self.next_goal();
        }
    }

    fn next_goal(&mut self) {
        let script = &self.spec.target_script;
        let n = script.waypoints.len();
        self.cursor.next += 1;
        if script.looped {
            self.cursor.goal = script.waypoints[self.cursor.next % n];
        } else if self.cursor.next < n {
            self.cursor.goal = script.waypoints[self.cursor.next];
        } else {
            self.cursor.goal = self.resample_goal();
        }
    }

    /// Draws a new reachable target goal; stays put if none is found.
    fn resample_goal(&mut self) -> Vec2 {
        let spec = Arc::clone(&self.spec);
        let r = spec.target_radius;
        let b = spec.bounds;
        let from = self.target.position();
        for _ in 0..64 {
            let p = Vec2::new(
                self.rng.random_range(b.min.x + 2.0 * r..b.max.x - 2.0 * r),
                self.rng.random_range(b.min.y + 2.0 * r..b.max.y - 2.0 * r),
            );
            if p.distance(from) > 1.0 && spec.segment_clear(from, p, r) {
                return p;
            }
        }
        from
    }

    fn update_memory(&mut self, role: Role, executed: Waypoint) -> Result<()> {
        let visible = self.target_visible(role)?;
        let tracked = self.is_tracked(role)?;
        let target = self.target.position();
        let mem = match role {
            Role::Tracker => &mut self.memory.tracker,
            _ => self.memory.opponent.as_mut().expect("opponent memory exists"),
        };
        if visible {
            mem.last_seen = target;
            mem.age = 0;
        } else {
            mem.age += 1;
        }
        mem.prev_waypoint = executed;
        if tracked {
            mem.tracked_steps += 1;
            mem.untracked_run = 0;
        } else {
            mem.untracked_run += 1;
        }
        match role {
            Role::Tracker => self.events.target_visible_tracker = visible,
            _ => self.events.target_visible_opponent = visible,
        }
        Ok(())
    }

    /// Advances the arena by one control step.
    ///
    /// Only the first waypoint of each plan is executed, clamped to the
    /// kinematic caps. A present opponent without a plan stays still.
    pub fn step(&mut self, tracker_plan: &ActionPlan, opponent_plan: Option<&ActionPlan>) -> Result<StepEvents> {
        if self.events.terminated {
            return Err(Error::Usage("step called on a terminated episode".into()));
        }
        if opponent_plan.is_some() && self.opponent.is_none() {
            return Err(Error::Usage("opponent plan given but the arena has no opponent".into()));
        }
        let (cap, turn) = (self.spec.step_cap_m, self.spec.turn_cap_rad);
        let mut events = StepEvents::default();

        let w_trk = tracker_plan.first().clamped(cap, turn);
        let pose = self.tracker.pose;
        let disp = pose.to_world_dir(Vec2::new(w_trk.dx, w_trk.dy));
        match self.move_body(Role::Tracker, disp, pose.heading + w_trk.dtheta) {
            Some(Blocker::Body(Role::Opponent)) => {
                events.tracker_collided = true;
                events.opponent_collided = true;
            }
            Some(_) => events.tracker_collided = true,
            None => {}
        }

        let mut w_opp = Waypoint::default();
        if let Some(opp) = self.opponent {
            w_opp = opponent_plan.map_or_else(Waypoint::default, |p| p.first().clamped(cap, turn));
            let disp = opp.pose.to_world_dir(Vec2::new(w_opp.dx, w_opp.dy));
            match self.move_body(Role::Opponent, disp, opp.pose.heading + w_opp.dtheta) {
                Some(Blocker::Body(Role::Tracker)) => {
                    events.tracker_collided = true;
                    events.opponent_collided = true;
                }
                Some(_) => events.opponent_collided = true,
                None => {}
            }
        }

        self.advance_target();
        self.step += 1;

        self.events = events;
        self.update_memory(Role::Tracker, w_trk)?;
        if self.opponent.is_some() {
            self.update_memory(Role::Opponent, w_opp)?;
        }
        let mut events = self.events;

        let mem = self.memory.tracker;
        let cause = if events.tracker_collided {
            TerminationCause::Collision
        } else if mem.untracked_run >= self.spec.lost_patience {
            TerminationCause::TargetLost
        } else if self.step >= self.spec.max_steps {
            if mem.tracked_steps as f64 / self.spec.max_steps as f64 >= self.spec.success_tr_threshold {
                TerminationCause::Success
            } else {
                TerminationCause::Timeout
            }
        } else {
            TerminationCause::None
        };
        events.cause = cause;
        events.terminated = cause != TerminationCause::None;
        self.events = events;
        Ok(events)
    }
}

/// What stopped a sweep.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Blocker {
    Scenery,
    Body(Role),
}

pub fn line_of_sight(state: &ArenaState, from: Vec2, to: Vec2) -> bool {
    state.line_of_sight(from, to)
}

pub fn target_visible(state: &ArenaState, viewer: Role) -> Result<bool> {
    state.target_visible(viewer)
}

pub fn distances(state: &ArenaState) -> Distances {
    state.distances()
}

pub fn observe(state: &ArenaState, viewer: Role) -> Result<Observation> {
    state.observe(viewer)
}

pub fn step(
    state: &mut ArenaState,
    tracker_plan: &ActionPlan,
    opponent_plan: Option<&ActionPlan>,
) -> Result<StepEvents> {
    state.step(tracker_plan, opponent_plan)
}
