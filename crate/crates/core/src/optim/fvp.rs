//! Matrix-free Fisher-vector products for the diagonal-Gaussian policy.
//!
//! The Fisher at the incumbent equals the Hessian of the mean KL to the
//! incumbent (Gauss-Newton form): with per-state distribution parameters
//! `(mu(s), log sigma)`, `F = mean_s J(s)^T M(s) J(s)` where `J` is the
//! parameter Jacobian and `M = diag(1/sigma^2, ..., 2, ...)` is the exact
//! per-state Gaussian Fisher. `F v` is one forward-mode sweep (J v), a
//! diagonal reweighting, and one reverse-mode sweep (J^T u) per state; no
//! matrix is ever formed.

use crate::error::Result;
use crate::linalg::axpy;
use crate::nn::{self, ForwardTrace, ParamVector};
use crate::policy::GaussianPolicy;

pub struct FisherVectorProduct<'a> {
    policy: &'a GaussianPolicy,
    mlp_params: Vec<f64>,
    traces: Vec<ForwardTrace>,
    inv_var: Vec<f64>,
    log_std_masks: Vec<f64>,
    damping: f64,
}

impl<'a> FisherVectorProduct<'a> {
    /// Freeze the Fisher at `params` over the given states.
    pub fn new(
        policy: &'a GaussianPolicy,
        params: &ParamVector,
        states: &[Vec<f64>],
        damping: f64,
    ) -> Result<Self> {
        policy.check_params(params)?;
        let mlp_params = policy.mlp_params(params).to_vec();
        let traces: Vec<ForwardTrace> = states
            .iter()
            .map(|s| nn::forward_traced(&policy.mean_net, &mlp_params, s))
            .collect::<Result<_>>()?;
        let log_std = policy.log_std(params);
        let inv_var = log_std
            .iter()
            .map(|&ls| {
                let sigma = policy.std_from_log(ls);
                1.0 / (sigma * sigma)
            })
            .collect();
        let log_std_masks = log_std
            .iter()
            .map(|&ls| policy.log_std_grad_mask(ls))
            .collect();
        Ok(FisherVectorProduct {
            policy,
            mlp_params,
            traces,
            inv_var,
            log_std_masks,
            damping,
        })
    }

    pub fn dim(&self) -> usize {
        self.policy.param_count()
    }

    pub fn num_states(&self) -> usize {
        self.traces.len()
    }

    pub fn damping(&self) -> f64 {
        self.damping
    }

    /// `(F + damping I) v`.
    pub fn apply(&self, v: &[f64]) -> Result<Vec<f64>> {
        let mlp = &self.policy.mean_net;
        let mlp_len = mlp.param_count();
        if v.len() != self.dim() {
            return Err(crate::error::Error::ShapeMismatch {
                context: "fisher-vector product",
                expected: self.dim(),
                got: v.len(),
            });
        }
        let v_mlp = &v[..mlp_len];
        let mut out = vec![0.0; self.dim()];
        for trace in &self.traces {
            let mut u = nn::jvp(mlp, &self.mlp_params, trace, v_mlp)?;
            for (ud, iv) in u.iter_mut().zip(&self.inv_var) {
                *ud *= iv;
            }
            nn::backward_traced(mlp, &self.mlp_params, trace, &u, &mut out[..mlp_len])?;
        }
        let inv_n = 1.0 / self.traces.len().max(1) as f64;
        for o in &mut out[..mlp_len] {
            *o *= inv_n;
        }
        // The log-std block is exact and state-independent: Fisher 2 per dim,
        // masked to zero at the clip boundary.
        for d in 0..self.policy.action_dim {
            out[mlp_len + d] = 2.0 * v[mlp_len + d] * self.log_std_masks[d];
        }
        axpy(&mut out, self.damping, v);
        Ok(out)
    }

    /// `v^T (F + damping I) v` via one product.
    pub fn quad_form(&self, v: &[f64]) -> Result<f64> {
        Ok(crate::linalg::dot(v, &self.apply(v)?))
    }
}
