//! Planar vector math, sweeps and ray casts used by the arena.
//!
//! Contact convention: shapes are treated as open sets. A disc that only
//! grazes another shape (distance exactly equal to the sum of radii) is not
//! in collision, and a sight line tangent to a disc is not blocked.

use serde::{Deserialize, Serialize};
use std::f64::consts::{PI, TAU};
use std::ops::{Add, Mul, Neg, Sub};

/// Sweeps stop this far outside the exact contact surface so that float
/// rounding never leaves a body inside another one.
pub const CONTACT_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Vec2 {
    pub x: f64,
    pub y: f64,
}

impl Vec2 {
    pub const ZERO: Vec2 = Vec2 { x: 0.0, y: 0.0 };

    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn from_angle(theta: f64) -> Self {
        Self::new(theta.cos(), theta.sin())
    }

    pub fn dot(self, o: Vec2) -> f64 {
        self.x * o.x + self.y * o.y
    }

    pub fn norm_sq(self) -> f64 {
        self.dot(self)
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn distance(self, o: Vec2) -> f64 {
        (self - o).norm()
    }

    /// Counter-clockwise rotation by `theta`.
    pub fn rotate(self, theta: f64) -> Vec2 {
        let (s, c) = theta.sin_cos();
        Vec2::new(c * self.x - s * self.y, s * self.x + c * self.y)
    }

    pub fn angle(self) -> f64 {
        self.y.atan2(self.x)
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

impl Add for Vec2 {
    type Output = Vec2;
    fn add(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x + o.x, self.y + o.y)
    }
}

impl Sub for Vec2 {
    type Output = Vec2;
    fn sub(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x - o.x, self.y - o.y)
    }
}

impl Mul<f64> for Vec2 {
    type Output = Vec2;
    fn mul(self, k: f64) -> Vec2 {
        Vec2::new(self.x * k, self.y * k)
    }
}

impl Neg for Vec2 {
    type Output = Vec2;
    fn neg(self) -> Vec2 {
        Vec2::new(-self.x, -self.y)
    }
}

/// Wraps an angle into (-π, π].
pub fn normalize_angle(theta: f64) -> f64 {
    let r = theta.rem_euclid(TAU);
    if r > PI {
        r - TAU
    } else {
        r
    }
}

/// Axis-aligned rectangle `[min, max]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: Vec2,
    pub max: Vec2,
}

impl Aabb {
    pub fn new(min: Vec2, max: Vec2) -> Self {
        Self { min, max }
    }

    pub fn contains(&self, p: Vec2) -> bool {
        p.x >= self.min.x && p.x <= self.max.x && p.y >= self.min.y && p.y <= self.max.y
    }

    /// Euclidean distance from `p` to the closed rectangle (0 inside).
    pub fn distance_to(&self, p: Vec2) -> f64 {
        let dx = (self.min.x - p.x).max(0.0).max(p.x - self.max.x);
        let dy = (self.min.y - p.y).max(0.0).max(p.y - self.max.y);
        dx.hypot(dy)
    }

    pub fn expanded(&self, r: f64) -> Aabb {
        Aabb::new(
            Vec2::new(self.min.x - r, self.min.y - r),
            Vec2::new(self.max.x + r, self.max.y + r),
        )
    }
}

/// Distance from `p` to the closed segment `[a, b]`.
pub fn point_segment_distance(a: Vec2, b: Vec2, p: Vec2) -> f64 {
    let ab = b - a;
    let len_sq = ab.norm_sq();
    if len_sq == 0.0 {
        return p.distance(a);
    }
    let t = ((p - a).dot(ab) / len_sq).clamp(0.0, 1.0);
    p.distance(a + ab * t)
}

/// Earliest fraction `t ∈ [0, 1]` at which a point moving `start → start + disp`
/// enters the open disc `(center, radius)`.
pub fn toi_disc(start: Vec2, disp: Vec2, center: Vec2, radius: f64) -> Option<f64> {
    let rho = radius - CONTACT_EPS;
    let w = start - center;
    let a = disp.norm_sq();
    if a == 0.0 {
        return None;
    }
    let b = w.dot(disp);
    let c = w.norm_sq() - rho * rho;
    if c <= 0.0 {
        // already touching: blocked only when moving inward
        return (b < 0.0).then_some(0.0);
    }
    if b >= 0.0 {
        return None;
    }
    let disc = b * b - a * c;
    if disc <= 0.0 {
        return None;
    }
    let t = (-b - disc.sqrt()) / a;
    (t <= 1.0).then_some(t.max(0.0))
}

/// Slab entry time for a point moving into the open box `b`.
fn toi_open_box(start: Vec2, disp: Vec2, b: &Aabb) -> Option<f64> {
    let mut t_enter = f64::NEG_INFINITY;
    let mut t_exit = f64::INFINITY;
    for (s, d, lo, hi) in [
        (start.x, disp.x, b.min.x, b.max.x),
        (start.y, disp.y, b.min.y, b.max.y),
    ] {
        if d == 0.0 {
            if s <= lo || s >= hi {
                return None;
            }
        } else {
            let (t0, t1) = if d > 0.0 {
                ((lo - s) / d, (hi - s) / d)
            } else {
                ((hi - s) / d, (lo - s) / d)
            };
            t_enter = t_enter.max(t0);
            t_exit = t_exit.min(t1);
        }
    }
    if t_enter >= t_exit || t_exit <= 0.0 || t_enter > 1.0 {
        return None;
    }
    Some(t_enter.max(0.0))
}

/// Earliest fraction at which a disc of radius `r` moving from `start`
/// by `disp` touches the rectangle `rect` (Minkowski rounded box).
pub fn toi_rounded_box(start: Vec2, disp: Vec2, rect: &Aabb, r: f64) -> Option<f64> {
    if disp.norm_sq() == 0.0 {
        return None;
    }
    let rr = r - CONTACT_EPS;
    let horiz = Aabb::new(
        Vec2::new(rect.min.x - rr, rect.min.y),
        Vec2::new(rect.max.x + rr, rect.max.y),
    );
    let vert = Aabb::new(
        Vec2::new(rect.min.x, rect.min.y - rr),
        Vec2::new(rect.max.x, rect.max.y + rr),
    );
    let corners = [
        rect.min,
        Vec2::new(rect.max.x, rect.min.y),
        rect.max,
        Vec2::new(rect.min.x, rect.max.y),
    ];
    let mut best: Option<f64> = None;
    let mut consider = |t: Option<f64>| {
        if let Some(t) = t {
            best = Some(best.map_or(t, |b| b.min(t)));
        }
    };
    consider(toi_open_box(start, disp, &horiz));
    consider(toi_open_box(start, disp, &vert));
    for c in corners {
        consider(toi_disc(start, disp, c, r));
    }
    best
}

/// Earliest fraction at which a disc of radius `r` centred at `start` leaves
/// the region where it fits inside `bounds`.
pub fn toi_walls(start: Vec2, disp: Vec2, bounds: &Aabb, r: f64) -> Option<f64> {
    let lo = Vec2::new(bounds.min.x + r - CONTACT_EPS, bounds.min.y + r - CONTACT_EPS);
    let hi = Vec2::new(bounds.max.x - r + CONTACT_EPS, bounds.max.y - r + CONTACT_EPS);
    let mut best: Option<f64> = None;
    for (s, d, l, h) in [(start.x, disp.x, lo.x, hi.x), (start.y, disp.y, lo.y, hi.y)] {
        let t = if d < 0.0 && s + d < l {
            Some(((l - s) / d).max(0.0))
        } else if d > 0.0 && s + d > h {
            Some(((h - s) / d).max(0.0))
        } else {
            None
        };
        if let Some(t) = t {
            best = Some(best.map_or(t, |b: f64| b.min(t)));
        }
    }
    best
}

/// Does the open segment `(a, b)` pass through the open disc?
pub fn segment_hits_disc(a: Vec2, b: Vec2, center: Vec2, radius: f64) -> bool {
    point_segment_distance(a, b, center) < radius
}

/// Does the open segment `(a, b)` pass through the interior of `rect`?
pub fn segment_hits_box(a: Vec2, b: Vec2, rect: &Aabb) -> bool {
    let d = b - a;
    let mut t0 = 0.0_f64;
    let mut t1 = 1.0_f64;
    for (s, dv, lo, hi) in [
        (a.x, d.x, rect.min.x, rect.max.x),
        (a.y, d.y, rect.min.y, rect.max.y),
    ] {
        if dv == 0.0 {
            if s <= lo || s >= hi {
                return false;
            }
        } else {
            let (e, x) = if dv > 0.0 {
                ((lo - s) / dv, (hi - s) / dv)
            } else {
                ((hi - s) / dv, (lo - s) / dv)
            };
            t0 = t0.max(e);
            t1 = t1.min(x);
        }
    }
    t0 < t1
}

/// Distance along a unit ray to the boundary of a disc, if hit ahead.
pub fn ray_disc(origin: Vec2, dir: Vec2, center: Vec2, radius: f64) -> Option<f64> {
    let w = origin - center;
    let b = w.dot(dir);
    let c = w.norm_sq() - radius * radius;
    if c <= 0.0 {
        return Some(0.0);
    }
    let disc = b * b - c;
    if disc < 0.0 {
        return None;
    }
    let t = -b - disc.sqrt();
    (t >= 0.0).then_some(t)
}

/// Distance along a unit ray to a closed rectangle, if hit ahead.
pub fn ray_box(origin: Vec2, dir: Vec2, rect: &Aabb) -> Option<f64> {
    if rect.contains(origin) {
        return Some(0.0);
    }
    let mut t0 = f64::NEG_INFINITY;
    let mut t1 = f64::INFINITY;
    for (s, d, lo, hi) in [
        (origin.x, dir.x, rect.min.x, rect.max.x),
        (origin.y, dir.y, rect.min.y, rect.max.y),
    ] {
        if d == 0.0 {
            if s < lo || s > hi {
                return None;
            }
        } else {
            let (e, x) = if d > 0.0 {
                ((lo - s) / d, (hi - s) / d)
            } else {
                ((hi - s) / d, (lo - s) / d)
            };
            t0 = t0.max(e);
            t1 = t1.min(x);
        }
    }
    (t0 <= t1 && t0 >= 0.0).then_some(t0)
}

/// Distance along a unit ray from inside `bounds` to the enclosing walls.
pub fn ray_walls(origin: Vec2, dir: Vec2, bounds: &Aabb) -> f64 {
    let mut t = f64::INFINITY;
    if dir.x > 0.0 {
        t = t.min((bounds.max.x - origin.x) / dir.x);
    } else if dir.x < 0.0 {
        t = t.min((bounds.min.x - origin.x) / dir.x);
    }
    if dir.y > 0.0 {
        t = t.min((bounds.max.y - origin.y) / dir.y);
    } else if dir.y < 0.0 {
        t = t.min((bounds.min.y - origin.y) / dir.y);
    }
    t.max(0.0)
}
