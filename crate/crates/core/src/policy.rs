//! Diagonal-Gaussian MLP policy with hand-written reverse-mode gradients.
//!
//! Parameters live in one flat vector so that optimizers, finite-difference
//! probes and checkpoints all see the same layout:
//! for every dense layer `W (out × in, row-major)` then `b (out)`, followed by
//! the state-independent `log_std (ACTION_DIM)`.

use std::f64::consts::{E, PI};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Observation layout:
///
/// | index  | content                                                   |
/// |--------|-----------------------------------------------------------|
/// | 0..2   | last-seen target position in the viewer frame (m)         |
/// | 2      | target visible flag                                       |
/// | 3      | distance to last-seen target position (m)                 |
/// | 4      | bearing of last-seen target position (rad)                |
/// | 5      | steps since last sighting / lost_patience, capped at 1    |
/// | 6..8   | other agent position in the viewer frame (m)              |
/// | 8      | other agent present flag                                  |
/// | 9      | inter-agent distance (m)                                  |
/// | 10..18 | 8 equiangular ray distances / ray range, from the heading |
/// | 18..21 | previous executed waypoint (dx, dy, dθ)                   |
pub const OBS_DIM: usize = 21;
pub const OBS_LAYOUT_VERSION: u32 = 1;
pub const ACTION_DIM: usize = 15;
pub const LOG_STD_MIN: f64 = -6.907_755_278_982_137; // ln 1e-3
pub const LOG_STD_MAX: f64 = 0.0;

fn half_log_two_pi() -> f64 {
    0.5 * (2.0 * PI).ln()
}

fn half_log_two_pi_e() -> f64 {
    0.5 * (2.0 * PI * E).ln()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observation(pub [f64; OBS_DIM]);

impl Observation {
    pub fn new(values: [f64; OBS_DIM]) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Input(format!("observation entry {i} is not finite")));
        }
        Ok(Self(values))
    }

    pub fn from_slice(values: &[f64]) -> Result<Self> {
        let arr: [f64; OBS_DIM] = values
            .try_into()
            .map_err(|_| Error::Input(format!("observation needs {OBS_DIM} entries, got {}", values.len())))?;
        Self::new(arr)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Dense layer sizes of the network, input to output.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpShape {
    pub sizes: Vec<usize>,
}

impl MlpShape {
    pub fn new(hidden: &[usize]) -> Self {
        let mut sizes = vec![OBS_DIM];
        sizes.extend_from_slice(hidden);
        sizes.push(ACTION_DIM);
        Self { sizes }
    }

    pub fn hidden(&self) -> &[usize] {
        &self.sizes[1..self.sizes.len() - 1]
    }

    pub fn num_layers(&self) -> usize {
        self.sizes.len() - 1
    }

    /// Offsets of (weights, biases) for every layer.
    fn offsets(&self) -> Vec<(usize, usize)> {
        let mut off = 0;
        let mut out = Vec::with_capacity(self.num_layers());
        for l in 0..self.num_layers() {
            let (i, o) = (self.sizes[l], self.sizes[l + 1]);
            out.push((off, off + i * o));
            off += i * o + o;
        }
        out
    }

    pub fn log_std_offset(&self) -> usize {
        (0..self.num_layers())
            .map(|l| self.sizes[l] * self.sizes[l + 1] + self.sizes[l + 1])
            .sum()
    }

    pub fn num_params(&self) -> usize {
        self.log_std_offset() + ACTION_DIM
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub shape: MlpShape,
    pub data: Vec<f64>,
}

/// Same layout as [`PolicyParams::data`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradient {
    pub data: Vec<f64>,
}

impl Gradient {
    pub fn zeros(n: usize) -> Self {
        Self { data: vec![0.0; n] }
    }

    pub fn zeros_like(p: &PolicyParams) -> Self {
        Self::zeros(p.data.len())
    }

    pub fn add_assign(&mut self, other: &Gradient) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, k: f64) {
        for a in &mut self.data {
            *a *= k;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Activations kept from a forward pass for the backward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    /// `acts[0]` is the input; `acts[l]` the tanh output of layer `l - 1`.
    acts: Vec<Vec<f64>>,
    pub mean: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ActionSample {
    pub action: Vec<f64>,
    pub log_prob: f64,
    pub entropy: f64,
}

/// Coefficients of the scalar whose gradient [`backward`] returns:
/// `log_prob · logπ(a|s) + entropy · H(π) + kl · KL(π(·|s) ‖ π_ref(·|s))`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossAdjoints {
    pub log_prob: f64,
    pub entropy: f64,
    pub kl: f64,
}

impl PolicyParams {
    /// Uniform(±1/√fan_in) weights, zero biases, constant log-std.
    pub fn init(hidden: &[usize], init_log_std: f64, rng: &mut impl Rng) -> Self {
        let shape = MlpShape::new(hidden);
        let mut data = vec![0.0; shape.num_params()];
        for (l, (w_off, _)) in shape.offsets().into_iter().enumerate() {
            let (fan_in, fan_out) = (shape.sizes[l], shape.sizes[l + 1]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            for w in &mut data[w_off..w_off + fan_in * fan_out] {
                *w = rng.random_range(-bound..bound);
            }
        }
        let ls = shape.log_std_offset();
        for v in &mut data[ls..] {
            *v = init_log_std.clamp(LOG_STD_MIN, LOG_STD_MAX);
        }
        Self { shape, data }
    }

    pub fn zeros(hidden: &[usize], log_std: f64) -> Self {
        let shape = MlpShape::new(hidden);
        let mut data = vec![0.0; shape.num_params()];
        let ls = shape.log_std_offset();
        for v in &mut data[ls..] {
            *v = log_std;
        }
        Self { shape, data }
    }

    pub fn log_std(&self) -> &[f64] {
        &self.data[self.shape.log_std_offset()..]
    }

    pub fn log_std_mut(&mut self) -> &mut [f64] {
        let off = self.shape.log_std_offset();
        &mut self.data[off..]
    }

    pub fn clamp_log_std(&mut self) {
        for v in self.log_std_mut() {
            *v = v.clamp(LOG_STD_MIN, LOG_STD_MAX);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn check_compatible(&self, other: &PolicyParams) -> Result<()> {
        if self.shape != other.shape || self.data.len() != other.data.len() {
            return Err(Error::Usage(format!(
                "parameter shapes differ: {:?} vs {:?}",
                self.shape.sizes, other.shape.sizes
            )));
        }
        Ok(())
    }

    pub fn forward_cached(&self, obs: &Observation) -> ForwardCache {
        let offsets = self.shape.offsets();
        let n = offsets.len();
        let mut acts = Vec::with_capacity(n);
        let mut x = obs.0.to_vec();
        for (l, &(w_off, b_off)) in offsets.iter().enumerate() {
            let (fi, fo) = (self.shape.sizes[l], self.shape.sizes[l + 1]);
            let w = &self.data[w_off..w_off + fi * fo];
            let b = &self.data[b_off..b_off + fo];
            let mut z: Vec<f64> = b.to_vec();
            for (j, zj) in z.iter_mut().enumerate() {
                let row = &w[j * fi..(j + 1) * fi];
                *zj += row.iter().zip(&x).map(|(a, c)| a * c).sum::<f64>();
            }
            if l + 1 < n {
                for v in &mut z {
                    *v = v.tanh();
                }
            }
            acts.push(std::mem::replace(&mut x, z));
        }
        ForwardCache { acts, mean: x }
    }

    /// Mean and log-std of the action distribution at `obs`.
    pub fn forward(&self, obs: &Observation) -> (Vec<f64>, Vec<f64>) {
        let cache = self.forward_cached(obs);
        (cache.mean, self.log_std().to_vec())
    }

    /// Backpropagates `d_mean` (dL/dmean) through the network, accumulating into `grad`.
    pub fn backward_mean(&self, cache: &ForwardCache, d_mean: &[f64], grad: &mut Gradient) {
        let offsets = self.shape.offsets();
        let mut delta = d_mean.to_vec();
        for l in (0..offsets.len()).rev() {
            let (w_off, b_off) = offsets[l];
            let (fi, fo) = (self.shape.sizes[l], self.shape.sizes[l + 1]);
            let input = &cache.acts[l];
            for j in 0..fo {
                let dj = delta[j];
                if dj == 0.0 {
                    continue;
                }
                grad.data[b_off + j] += dj;
                let g = &mut grad.data[w_off + j * fi..w_off + (j + 1) * fi];
                for (gi, xi) in g.iter_mut().zip(input) {
                    *gi += dj * xi;
                }
            }
            if l > 0 {
                let w = &self.data[w_off..w_off + fi * fo];
                let mut prev = vec![0.0; fi];
                for j in 0..fo {
                    let dj = delta[j];
                    if dj == 0.0 {
                        continue;
                    }
                    for (p, wij) in prev.iter_mut().zip(&w[j * fi..(j + 1) * fi]) {
                        *p += dj * wij;
                    }
                }
                // input to layer l is tanh output of layer l-1
                for (p, a) in prev.iter_mut().zip(input) {
                    *p *= 1.0 - a * a;
                }
                delta = prev;
            }
        }
    }
}

/// Closed-form diagonal-Gaussian log density.
pub fn gaussian_log_prob(mean: &[f64], log_std: &[f64], action: &[f64]) -> f64 {
    mean.iter()
        .zip(log_std)
        .zip(action)
        .map(|((m, ls), a)| {
            let z = (a - m) * (-ls).exp();
            -0.5 * z * z - ls - half_log_two_pi()
        })
        .sum()
}

pub fn gaussian_entropy(log_std: &[f64]) -> f64 {
    log_std.iter().map(|ls| ls + half_log_two_pi_e()).sum()
}

/// `KL(N(mean_p, σ_p) ‖ N(mean_q, σ_q))` summed over dimensions.
pub fn gaussian_kl(mean_p: &[f64], ls_p: &[f64], mean_q: &[f64], ls_q: &[f64]) -> f64 {
    (0..mean_p.len())
        .map(|i| {
            let var_ratio = (2.0 * (ls_p[i] - ls_q[i])).exp();
            let dm = mean_p[i] - mean_q[i];
            let dm_term = dm * dm * (-2.0 * ls_q[i]).exp();
            ls_q[i] - ls_p[i] + 0.5 * (var_ratio + dm_term) - 0.5
        })
        .sum()
}

pub fn forward(params: &PolicyParams, obs: &Observation) -> (Vec<f64>, Vec<f64>) {
    params.forward(obs)
}

/// Draws `mean + exp(log_std) ⊙ z` with `z` standard normal. Sampling is
/// unclamped; the arena clamps waypoints when executing them.
pub fn sample_action(params: &PolicyParams, obs: &Observation, rng: &mut impl Rng) -> ActionSample {
    let (mean, log_std) = params.forward(obs);
    let action: Vec<f64> = mean
        .iter()
        .zip(&log_std)
        .map(|(m, ls)| {
            let z: f64 = rng.sample(StandardNormal);
            m + ls.exp() * z
        })
        .collect();
    ActionSample {
        log_prob: gaussian_log_prob(&mean, &log_std, &action),
        entropy: gaussian_entropy(&log_std),
        action,
    }
}

pub fn log_prob(params: &PolicyParams, obs: &Observation, action: &[f64]) -> f64 {
    let (mean, log_std) = params.forward(obs);
    gaussian_log_prob(&mean, &log_std, action)
}

pub fn entropy(params: &PolicyParams) -> f64 {
    gaussian_entropy(params.log_std())
}

pub fn kl_reference(params: &PolicyParams, reference: &PolicyParams, obs: &Observation) -> f64 {
    let (m, ls) = params.forward(obs);
    let (mr, lsr) = reference.forward(obs);
    gaussian_kl(&m, &ls, &mr, &lsr)
}

/// Gradient of the adjoint-weighted scalar (see [`LossAdjoints`]) with respect
/// to every parameter, accumulated into `grad`.
pub fn accumulate_backward(
    params: &PolicyParams,
    obs: &Observation,
    action: &[f64],
    adj: LossAdjoints,
    reference: Option<&PolicyParams>,
    grad: &mut Gradient,
) -> Result<()> {
    if action.len() != ACTION_DIM {
        return Err(Error::Usage(format!("action needs {ACTION_DIM} entries, got {}", action.len())));
    }
    if grad.data.len() != params.data.len() {
        return Err(Error::Usage("gradient and parameter sizes differ".into()));
    }
    let cache = params.forward_cached(obs);
    let log_std = params.log_std();
    let mut d_mean = vec![0.0; ACTION_DIM];
    let mut d_ls = vec![adj.entropy; ACTION_DIM];
    if adj.log_prob != 0.0 {
        for i in 0..ACTION_DIM {
            let inv_var = (-2.0 * log_std[i]).exp();
            let diff = action[i] - cache.mean[i];
            d_mean[i] += adj.log_prob * diff * inv_var;
            d_ls[i] += adj.log_prob * (diff * diff * inv_var - 1.0);
        }
    }
    if adj.kl != 0.0 {
        let reference =
            reference.ok_or_else(|| Error::Usage("KL adjoint requires reference parameters".into()))?;
        params.check_compatible(reference)?;
        let (mr, lsr) = reference.forward(obs);
        for i in 0..ACTION_DIM {
            let inv_var_q = (-2.0 * lsr[i]).exp();
            d_mean[i] += adj.kl * (cache.mean[i] - mr[i]) * inv_var_q;
            d_ls[i] += adj.kl * ((2.0 * (log_std[i] - lsr[i])).exp() - 1.0);
        }
    }
    params.backward_mean(&cache, &d_mean, grad);
    let off = params.shape.log_std_offset();
    for (g, d) in grad.data[off..].iter_mut().zip(&d_ls) {
        *g += d;
    }
    Ok(())
}

pub fn backward(
    params: &PolicyParams,
    obs: &Observation,
    action: &[f64],
    adj: LossAdjoints,
    reference: Option<&PolicyParams>,
) -> Result<Gradient> {
    let mut g = Gradient::zeros_like(params);
    accumulate_backward(params, obs, action, adj, reference, &mut g)?;
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeds::rng_from;

    fn rand_obs(seed: u64) -> Observation {
        let mut rng = rng_from(seed, &[]);
        let mut x = [0.0; OBS_DIM];
        for v in &mut x {
            *v = rng.random_range(-2.0..2.0);
        }
        Observation::new(x).unwrap()
    }

    #[test]
    fn zero_params_give_zero_mean() {
        let p = PolicyParams::zeros(&[64, 64], 0.0);
        let (m, _) = p.forward(&rand_obs(1));
        assert!(m.iter().all(|&v| v == 0.0));
        assert_eq!(p.shape.num_params(), 21 * 64 + 64 + 64 * 64 + 64 + 64 * 15 + 15 + 15);
    }

    #[test]
    fn non_finite_observation_rejected() {
        let mut x = [0.0; OBS_DIM];
        x[3] = f64::NAN;
        assert!(matches!(Observation::new(x), Err(Error::Input(_))));
    }

    #[test]
    fn log_prob_at_mode_and_one_sigma() {
        let mut rng = rng_from(2, &[]);
        let p = PolicyParams::init(&[8], 0.3f64.ln(), &mut rng);
        let obs = rand_obs(3);
        let (mean, ls) = p.forward(&obs);
        let mode: f64 = ls.iter().map(|l| -l - half_log_two_pi()).sum();
        assert!((log_prob(&p, &obs, &mean) - mode).abs() < 1e-12);
        let mut a = mean.clone();
        a[4] += ls[4].exp();
        assert!((log_prob(&p, &obs, &a) - (mode - 0.5)).abs() < 1e-12);
    }

    #[test]
    fn entropy_is_monotone_in_log_std() {
        let mut p = PolicyParams::zeros(&[4], -1.0);
        let h0 = entropy(&p);
        p.log_std_mut()[7] += 0.1;
        assert!(entropy(&p) > h0);
    }

    #[test]
    fn mean_gradient_vanishes_at_mode() {
        let mut rng = rng_from(5, &[]);
        let p = PolicyParams::init(&[8, 8], -0.5, &mut rng);
        let obs = rand_obs(6);
        let (mean, _) = p.forward(&obs);
        let g = backward(&p, &obs, &mean, LossAdjoints { log_prob: 1.0, ..Default::default() }, None).unwrap();
        let off = p.shape.log_std_offset();
        assert!(g.data[..off].iter().all(|&v| v.abs() < 1e-15));
        // d logπ / d log_std = -1 at the mode
        assert!(g.data[off..].iter().all(|&v| (v + 1.0).abs() < 1e-15));
    }

    #[test]
    fn entropy_gradient_only_touches_log_std() {
        let mut rng = rng_from(7, &[]);
        let p = PolicyParams::init(&[8], -0.5, &mut rng);
        let obs = rand_obs(8);
        let g = backward(&p, &obs, &[0.0; ACTION_DIM], LossAdjoints { entropy: 1.0, ..Default::default() }, None)
            .unwrap();
        let off = p.shape.log_std_offset();
        assert!(g.data[..off].iter().all(|&v| v == 0.0));
        assert!(g.data[off..].iter().all(|&v| v == 1.0));
    }

    #[test]
    fn kl_without_reference_is_a_usage_error() {
        let p = PolicyParams::zeros(&[4], 0.0);
        let r = backward(&p, &rand_obs(1), &[0.0; ACTION_DIM], LossAdjoints { kl: 1.0, ..Default::default() }, None);
        assert!(matches!(r, Err(Error::Usage(_))));
        let r = backward(&p, &rand_obs(1), &[0.0; 3], LossAdjoints::default(), None);
        assert!(matches!(r, Err(Error::Usage(_))));
    }
}
