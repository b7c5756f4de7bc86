//! Diagonal-Gaussian policy over continuous actions.
//!
//! The mean comes from an MLP; the log standard deviation is a free,
//! state-independent parameter block appended to the flat parameter vector
//! and clipped into `[log_std_min, log_std_max]` before exponentiation.
//! Natural-parameter conversion treats each action dimension as a univariate
//! two-parameter Gaussian family.

use crate::error::{Error, Result};
use crate::linalg;
use crate::nn::{self, MlpSpec, ParamVector};
use crate::rng::RngStream;
use serde::{Deserialize, Serialize};

pub const DEFAULT_LOG_STD_MIN: f64 = -20.0;
pub const DEFAULT_LOG_STD_MAX: f64 = 2.0;

/// Floor applied to standard deviations so degenerate dists stay usable.
pub const STD_FLOOR: f64 = 1e-8;

const LN_2PI: f64 = 1.8378770664093453;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianPolicy {
    pub mean_net: MlpSpec,
    pub action_dim: usize,
    pub log_std_min: f64,
    pub log_std_max: f64,
}

impl GaussianPolicy {
    pub fn new(obs_dim: usize, hidden: &[usize], action_dim: usize) -> Self {
        GaussianPolicy {
            mean_net: MlpSpec::new(obs_dim, hidden, action_dim),
            action_dim,
            log_std_min: DEFAULT_LOG_STD_MIN,
            log_std_max: DEFAULT_LOG_STD_MAX,
        }
    }

    pub fn obs_dim(&self) -> usize {
        self.mean_net.input_dim
    }

    /// Total parameter count: mean network plus one log-std per action dim.
    pub fn param_count(&self) -> usize {
        self.mean_net.param_count() + self.action_dim
    }

    /// Orthogonal-initialized parameters: `hidden_gain` on hidden layers,
    /// `head_gain` on the final mean layer, every log-std at `log_std_init`.
    pub fn init_params(
        &self,
        hidden_gain: f64,
        head_gain: f64,
        log_std_init: f64,
        seed: u64,
    ) -> ParamVector {
        let mut gains = vec![hidden_gain; self.mean_net.num_layers()];
        *gains.last_mut().expect("at least one layer") = head_gain;
        let mut params = nn::orthogonal_init(&self.mean_net, &gains, seed);
        params.0.extend(vec![log_std_init; self.action_dim]);
        params
    }

    pub fn check_params(&self, params: &ParamVector) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::ShapeMismatch {
                context: "policy params",
                expected: self.param_count(),
                got: params.len(),
            });
        }
        Ok(())
    }

    pub fn mlp_params<'a>(&self, params: &'a ParamVector) -> &'a [f64] {
        &params.as_slice()[..self.mean_net.param_count()]
    }

    pub fn log_std<'a>(&self, params: &'a ParamVector) -> &'a [f64] {
        &params.as_slice()[self.mean_net.param_count()..]
    }

    pub fn std_from_log(&self, log_std: f64) -> f64 {
        log_std.clamp(self.log_std_min, self.log_std_max).exp()
    }

    /// Derivative mask of `clip(log_std)`: zero outside the clip interval.
    pub fn log_std_grad_mask(&self, log_std: f64) -> f64 {
        if log_std > self.log_std_min && log_std < self.log_std_max {
            1.0
        } else {
            0.0
        }
    }

    /// Per-state action distribution.
    pub fn dist_at(&self, params: &ParamVector, state: &[f64]) -> Result<GaussianDist> {
        self.check_params(params)?;
        let mean = nn::mlp_forward(&self.mean_net, self.mlp_params(params), state)?;
        let std = self
            .log_std(params)
            .iter()
            .map(|&ls| self.std_from_log(ls))
            .collect();
        Ok(GaussianDist::new(mean, std))
    }

    pub fn dists_for(&self, params: &ParamVector, states: &[Vec<f64>]) -> Result<Vec<GaussianDist>> {
        states.iter().map(|s| self.dist_at(params, s)).collect()
    }
}

/// A per-state diagonal Gaussian: mean and std per action dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianDist {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl GaussianDist {
    pub fn new(mean: Vec<f64>, std: Vec<f64>) -> Self {
        assert_eq!(mean.len(), std.len());
        debug_assert!(std.iter().all(|s| *s >= 0.0));
        GaussianDist { mean, std }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn standard(dim: usize) -> Self {
        GaussianDist::new(vec![0.0; dim], vec![1.0; dim])
    }
}

/// Sum over dimensions of the univariate Gaussian log-density.
pub fn log_prob(dist: &GaussianDist, action: &[f64]) -> f64 {
    debug_assert_eq!(dist.dim(), action.len());
    let mut lp = 0.0;
    for ((a, mu), sigma) in action.iter().zip(&dist.mean).zip(&dist.std) {
        let z = (a - mu) / sigma;
        lp += -0.5 * LN_2PI - sigma.ln() - 0.5 * z * z;
    }
    lp
}

/// Differential entropy: `sum_d 0.5 ln(2 pi e sigma_d^2)`.
pub fn entropy(dist: &GaussianDist) -> f64 {
    dist.std
        .iter()
        .map(|s| 0.5 * (LN_2PI + 1.0) + s.ln())
        .sum()
}

/// Analytic KL divergence between diagonal Gaussians, in nats.
pub fn kl_diag_gaussian(p: &GaussianDist, q: &GaussianDist) -> f64 {
    debug_assert_eq!(p.dim(), q.dim());
    let mut kl = 0.0;
    for d in 0..p.dim() {
        let (sp, sq) = (p.std[d], q.std[d]);
        let dm = p.mean[d] - q.mean[d];
        kl += (sq / sp).ln() + (sp * sp + dm * dm) / (2.0 * sq * sq) - 0.5;
    }
    kl
}

/// Arithmetic mean of per-state KLs over paired lists of distributions.
pub fn mean_kl_over_states(old: &[GaussianDist], new: &[GaussianDist]) -> Result<f64> {
    if old.is_empty() {
        return Err(Error::Empty("state distributions"));
    }
    if old.len() != new.len() {
        return Err(Error::ShapeMismatch {
            context: "mean KL state lists",
            expected: old.len(),
            got: new.len(),
        });
    }
    let sum = linalg::kahan_sum(old.iter().zip(new).map(|(p, q)| kl_diag_gaussian(p, q)));
    Ok(sum / old.len() as f64)
}

/// Sample `mean + std ⊙ z` with `z` standard normal from the given stream.
/// Std is floored at [`STD_FLOOR`] so the degenerate limit collapses onto
/// the mean instead of producing an ill-defined draw.
pub fn sample_action(dist: &GaussianDist, rng: &mut RngStream) -> Vec<f64> {
    (0..dist.dim())
        .map(|d| dist.mean[d] + dist.std[d].max(STD_FLOOR) * rng.normal())
        .collect()
}

/// Natural parameters of the dimension-wise Gaussian family:
/// `eta1 = mu / sigma^2`, `eta2 = -1 / (2 sigma^2)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NaturalParams {
    pub eta1: Vec<f64>,
    pub eta2: Vec<f64>,
}

impl NaturalParams {
    pub fn dim(&self) -> usize {
        self.eta1.len()
    }
}

pub fn to_natural(dist: &GaussianDist) -> NaturalParams {
    let mut eta1 = Vec::with_capacity(dist.dim());
    let mut eta2 = Vec::with_capacity(dist.dim());
    for d in 0..dist.dim() {
        let var = dist.std[d] * dist.std[d];
        eta1.push(dist.mean[d] / var);
        eta2.push(-0.5 / var);
    }
    NaturalParams { eta1, eta2 }
}

pub fn from_natural(eta: &NaturalParams) -> Result<GaussianDist> {
    let mut mean = Vec::with_capacity(eta.dim());
    let mut std = Vec::with_capacity(eta.dim());
    for d in 0..eta.dim() {
        if eta.eta2[d] >= 0.0 {
            return Err(Error::InvalidFamily(d));
        }
        let var = -0.5 / eta.eta2[d];
        mean.push(eta.eta1[d] * var);
        std.push(var.sqrt());
    }
    Ok(GaussianDist { mean, std })
}

/// Per-dimension gradients of `log N(action; mean, std)` with respect to the
/// mean and to the (unclipped) log-std.
pub fn log_prob_grads(dist: &GaussianDist, action: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let dim = dist.dim();
    let mut d_mean = vec![0.0; dim];
    let mut d_log_std = vec![0.0; dim];
    for d in 0..dim {
        let var = dist.std[d] * dist.std[d];
        let diff = action[d] - dist.mean[d];
        d_mean[d] = diff / var;
        d_log_std[d] = diff * diff / var - 1.0;
    }
    (d_mean, d_log_std)
}

/// Per-dimension gradients of `KL(p ‖ q)` with respect to q's mean and
/// log-std, with p held fixed (the distillation objective direction).
pub fn kl_grads_wrt_q(p: &GaussianDist, q: &GaussianDist) -> (Vec<f64>, Vec<f64>) {
    let dim = p.dim();
    let mut d_mean = vec![0.0; dim];
    let mut d_log_std = vec![0.0; dim];
    for d in 0..dim {
        let var_q = q.std[d] * q.std[d];
        let diff = q.mean[d] - p.mean[d];
        d_mean[d] = diff / var_q;
        d_log_std[d] = 1.0 - (p.std[d] * p.std[d] + diff * diff) / var_q;
    }
    (d_mean, d_log_std)
}
