//! Dense Fisher oracle for small test instances (at most a few hundred
//! parameters).
//!
//! Builds the full matrix `F = mean_s J(s)^T M(s) J(s)` with the per-state
//! Jacobian of the distribution parameters `(mu(s), log sigma)` taken by
//! central finite differences, so it shares no code path with the analytic
//! forward/reverse sweeps it is used to check. Not for production-size
//! nets.

use super::FisherOp;
use crate::error::{Error, Result};
use crate::nn::ParamVector;
use crate::policy::GaussianPolicy;

/// Row-major symmetric matrix with a pivoted Gaussian-elimination solver.
#[derive(Debug, Clone)]
pub struct DenseMatrix {
    pub n: usize,
    pub a: Vec<f64>,
}

impl DenseMatrix {
    pub fn new(n: usize, a: Vec<f64>) -> Self {
        assert_eq!(a.len(), n * n);
        DenseMatrix { n, a }
    }

    pub fn matvec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(v.len(), self.n);
        (0..self.n)
            .map(|i| crate::linalg::dot(&self.a[i * self.n..(i + 1) * self.n], v))
            .collect()
    }

    /// Solve `A x = b` by Gaussian elimination with partial pivoting.
    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>> {
        let n = self.n;
        assert_eq!(b.len(), n);
        let mut m = self.a.clone();
        let mut x = b.to_vec();
        for col in 0..n {
            let pivot_row = (col..n)
                .max_by(|&r, &s| {
                    m[r * n + col]
                        .abs()
                        .partial_cmp(&m[s * n + col].abs())
                        .expect("finite pivots")
                })
                .expect("nonempty");
            if m[pivot_row * n + col].abs() < 1e-14 {
                return Err(Error::Config("dense solve: singular matrix".into()));
            }
            if pivot_row != col {
                for k in 0..n {
                    m.swap(col * n + k, pivot_row * n + k);
                }
                x.swap(col, pivot_row);
            }
            let pivot = m[col * n + col];
            for row in col + 1..n {
                let factor = m[row * n + col] / pivot;
                if factor == 0.0 {
                    continue;
                }
                for k in col..n {
                    m[row * n + k] -= factor * m[col * n + k];
                }
                x[row] -= factor * x[col];
            }
        }
        for col in (0..n).rev() {
            x[col] /= m[col * n + col];
            for row in 0..col {
                x[row] -= m[row * n + col] * x[col];
            }
        }
        Ok(x)
    }

    /// Solve with iterative refinement; ill-conditioned Fishers need the
    /// residual cleanup before first-order identities hold tightly.
    pub fn solve_refined(&self, b: &[f64], refinements: usize) -> Result<Vec<f64>> {
        let mut x = self.solve(b)?;
        for _ in 0..refinements {
            let r = crate::linalg::sub(b, &self.matvec(&x));
            let dx = self.solve(&r)?;
            crate::linalg::axpy(&mut x, 1.0, &dx);
        }
        Ok(x)
    }

    /// `||A x - b|| / ||b||`.
    pub fn relative_residual(&self, x: &[f64], b: &[f64]) -> f64 {
        crate::linalg::norm2(&crate::linalg::sub(&self.matvec(x), b)) / crate::linalg::norm2(b)
    }
}

impl FisherOp for DenseMatrix {
    fn apply_vec(&self, v: &[f64]) -> Vec<f64> {
        self.matvec(v)
    }
    fn len(&self) -> usize {
        self.n
    }
}

/// Distribution parameters `(mu_1..mu_A, log sigma_1..log sigma_A)` at one
/// state — the coordinates the per-state Gaussian Fisher is diagonal in.
fn dist_params(policy: &GaussianPolicy, params: &ParamVector, state: &[f64]) -> Result<Vec<f64>> {
    let dist = policy.dist_at(params, state)?;
    let mut out = dist.mean;
    out.extend(dist.std.iter().map(|s| s.ln()));
    Ok(out)
}

/// Exact-expectation dense Fisher over the given states: per-state Jacobians
/// by central finite differences with step `h`, per-state metric
/// `diag(1/sigma^2, ..., 2, ...)`, plus `damping I`.
pub fn dense_fisher(
    policy: &GaussianPolicy,
    params: &ParamVector,
    states: &[Vec<f64>],
    damping: f64,
    h: f64,
) -> Result<DenseMatrix> {
    policy.check_params(params)?;
    if states.is_empty() {
        return Err(Error::Empty("states for dense fisher"));
    }
    let n = policy.param_count();
    let a_dim = policy.action_dim;
    let rows = 2 * a_dim;
    // Jacobian columns for all states at once: jac[s][r][j].
    let mut jac = vec![vec![vec![0.0; n]; rows]; states.len()];
    #[allow(clippy::needless_range_loop)]
    for j in 0..n {
        let mut plus = params.clone();
        plus.0[j] += h;
        let mut minus = params.clone();
        minus.0[j] -= h;
        for (s, state) in states.iter().enumerate() {
            let fp = dist_params(policy, &plus, state)?;
            let fm = dist_params(policy, &minus, state)?;
            for r in 0..rows {
                jac[s][r][j] = (fp[r] - fm[r]) / (2.0 * h);
            }
        }
    }
    let mut a = vec![0.0; n * n];
    for (s, state) in states.iter().enumerate() {
        let dist = policy.dist_at(params, state)?;
        let metric: Vec<f64> = (0..rows)
            .map(|r| {
                if r < a_dim {
                    1.0 / (dist.std[r] * dist.std[r])
                } else {
                    2.0
                }
            })
            .collect();
        for r in 0..rows {
            let w = metric[r];
            let row = &jac[s][r];
            for i in 0..n {
                let wi = w * row[i];
                if wi == 0.0 {
                    continue;
                }
                for j in i..n {
                    a[i * n + j] += wi * row[j];
                }
            }
        }
    }
    let inv_n = 1.0 / states.len() as f64;
    for i in 0..n {
        for j in i..n {
            let v = a[i * n + j] * inv_n + if i == j { damping } else { 0.0 };
            a[i * n + j] = v;
            a[j * n + i] = v;
        }
    }
    Ok(DenseMatrix::new(n, a))
}
