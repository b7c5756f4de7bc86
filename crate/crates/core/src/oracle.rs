//! Standalone analytic verifier for consensus aggregation in exponential
//! families.
//!
//! Works entirely in the natural parameters of diagonal Gaussians with
//! closed forms (no sampling, no networks), so every certification holds at
//! machine-precision tolerances: the Bregman form of the KL, linearity of
//! the surrogate under averaging, the Jensen contraction of the KL, the
//! penalized-score improvement, and sublevel-set convexity.

use crate::error::{Error, Result};
use crate::linalg::kahan_sum;
use crate::policy::{from_natural, GaussianDist, NaturalParams};
use crate::rng::RngStream;
use serde::{Deserialize, Serialize};

/// A point of the d-dimensional diagonal-Gaussian exponential family.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpFamPoint {
    pub eta: NaturalParams,
}

impl ExpFamPoint {
    pub fn new(eta1: Vec<f64>, eta2: Vec<f64>) -> Result<Self> {
        assert_eq!(eta1.len(), eta2.len());
        for (d, &e2) in eta2.iter().enumerate() {
            if e2 >= 0.0 {
                return Err(Error::InvalidFamily(d));
            }
        }
        Ok(ExpFamPoint {
            eta: NaturalParams { eta1, eta2 },
        })
    }

    pub fn from_mean_std(mean: &[f64], std: &[f64]) -> Self {
        let dist = GaussianDist::new(mean.to_vec(), std.to_vec());
        ExpFamPoint {
            eta: crate::policy::to_natural(&dist),
        }
    }

    pub fn dim(&self) -> usize {
        self.eta.dim()
    }

    pub fn to_dist(&self) -> Result<GaussianDist> {
        from_natural(&self.eta)
    }

    /// Packed coordinates `[eta1..., eta2...]` of length `2d`.
    pub fn coords(&self) -> Vec<f64> {
        let mut v = self.eta.eta1.clone();
        v.extend_from_slice(&self.eta.eta2);
        v
    }

    pub fn from_coords(coords: &[f64]) -> Result<Self> {
        let d = coords.len() / 2;
        ExpFamPoint::new(coords[..d].to_vec(), coords[d..].to_vec())
    }
}

/// Gaussian log-partition `A(eta) = sum_d [-eta1^2/(4 eta2) - ln(-2 eta2)/2]`.
pub fn log_partition(p: &ExpFamPoint) -> f64 {
    kahan_sum((0..p.dim()).map(|d| {
        let (e1, e2) = (p.eta.eta1[d], p.eta.eta2[d]);
        -e1 * e1 / (4.0 * e2) - 0.5 * (-2.0 * e2).ln()
    }))
}

/// `∇A(eta)`, packed like [`ExpFamPoint::coords`]: the mean parameters
/// `(mu_d, mu_d^2 + sigma_d^2)`.
pub fn grad_log_partition(p: &ExpFamPoint) -> Vec<f64> {
    let d = p.dim();
    let mut out = vec![0.0; 2 * d];
    for i in 0..d {
        let (e1, e2) = (p.eta.eta1[i], p.eta.eta2[i]);
        let mu = -e1 / (2.0 * e2);
        let var = -0.5 / e2;
        out[i] = mu;
        out[d + i] = mu * mu + var;
    }
    out
}

/// Bregman divergence of the log-partition:
/// `D_A(eta, eta_t) = A(eta) - A(eta_t) - ∇A(eta_t)·(eta - eta_t)`,
/// which equals `KL(pi_{eta_t} || pi_eta)`.
pub fn bregman_kl(eta: &ExpFamPoint, eta_t: &ExpFamPoint) -> f64 {
    let grad_t = grad_log_partition(eta_t);
    let (c, ct) = (eta.coords(), eta_t.coords());
    let inner = kahan_sum(grad_t.iter().zip(c.iter().zip(&ct)).map(|(g, (a, b))| g * (a - b)));
    log_partition(eta) - log_partition(eta_t) - inner
}

/// The linearized surrogate `g·(eta - eta_t)`, the exact KL, and the
/// KL-penalized score `J_lambda = surrogate - lambda * KL`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PenalizedScore {
    pub surrogate_lin: f64,
    pub kl: f64,
    pub j_lambda: f64,
    pub lambda: f64,
}

pub fn penalized_score(
    eta: &ExpFamPoint,
    eta_t: &ExpFamPoint,
    g: &[f64],
    lambda: f64,
) -> PenalizedScore {
    let (c, ct) = (eta.coords(), eta_t.coords());
    let surrogate_lin = kahan_sum(g.iter().zip(c.iter().zip(&ct)).map(|(gi, (a, b))| gi * (a - b)));
    let kl = bregman_kl(eta, eta_t);
    PenalizedScore {
        surrogate_lin,
        kl,
        j_lambda: surrogate_lin - lambda * kl,
        lambda,
    }
}

fn mean_point(experts: &[ExpFamPoint]) -> Result<ExpFamPoint> {
    let first = experts.first().ok_or(Error::Empty("expert points"))?;
    let d = first.dim();
    let k = experts.len() as f64;
    let mut eta1 = vec![0.0; d];
    let mut eta2 = vec![0.0; d];
    for e in experts {
        for i in 0..d {
            eta1[i] += e.eta.eta1[i] / k;
            eta2[i] += e.eta.eta2[i] / k;
        }
    }
    ExpFamPoint::new(eta1, eta2)
}

#[derive(Debug, Clone, Serialize)]
pub struct ClauseCheck {
    pub name: &'static str,
    pub holds: bool,
    /// Signed slack; negative means violated by that much.
    pub margin: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct TheoremReport {
    pub clauses: Vec<ClauseCheck>,
    pub all_hold: bool,
    pub consensus_kl: f64,
    pub mean_expert_kl: f64,
}

pub const THEOREM_TOL: f64 = 1e-12;

/// Certify the four consensus-improvement clauses on one instance:
/// (a) the linear surrogate averages exactly, (b) the KL of the mean is at
/// most the mean KL, (c) the penalized score of the mean is at least the
/// mean penalized score, (d) the mean stays in any `delta`-sublevel set
/// containing all experts.
pub fn verify_consensus_theorem(
    eta_t: &ExpFamPoint,
    experts: &[ExpFamPoint],
    g: &[f64],
    lambda: f64,
    delta: f64,
) -> Result<TheoremReport> {
    if experts.len() < 2 {
        return Err(Error::Config("theorem check needs at least 2 experts".into()));
    }
    if g.len() != 2 * eta_t.dim() {
        return Err(Error::ShapeMismatch {
            context: "surrogate gradient",
            expected: 2 * eta_t.dim(),
            got: g.len(),
        });
    }
    let mean = mean_point(experts)?;
    let k = experts.len() as f64;
    let scores: Vec<PenalizedScore> = experts
        .iter()
        .map(|e| penalized_score(e, eta_t, g, lambda))
        .collect();
    let mean_score = penalized_score(&mean, eta_t, g, lambda);

    let mean_surrogate = kahan_sum(scores.iter().map(|s| s.surrogate_lin)) / k;
    let mean_kl = kahan_sum(scores.iter().map(|s| s.kl)) / k;
    let mean_j = kahan_sum(scores.iter().map(|s| s.j_lambda)) / k;

    let a_err = (mean_score.surrogate_lin - mean_surrogate).abs();
    let b_margin = mean_kl - mean_score.kl;
    let c_margin = mean_score.j_lambda - mean_j;
    let all_feasible = scores.iter().all(|s| s.kl <= delta);
    let d_margin = if all_feasible {
        delta - mean_score.kl
    } else {
        f64::INFINITY // vacuous: premise not met
    };

    let clauses = vec![
        ClauseCheck {
            name: "a_linear_surrogate_averages",
            holds: a_err <= THEOREM_TOL,
            margin: THEOREM_TOL - a_err,
        },
        ClauseCheck {
            name: "b_kl_contraction",
            holds: b_margin >= -THEOREM_TOL,
            margin: b_margin,
        },
        ClauseCheck {
            name: "c_penalized_improvement",
            holds: c_margin >= -THEOREM_TOL,
            margin: c_margin,
        },
        ClauseCheck {
            name: "d_trust_region_membership",
            holds: d_margin >= -THEOREM_TOL,
            margin: d_margin,
        },
    ];
    let all_hold = clauses.iter().all(|c| c.holds);
    Ok(TheoremReport {
        clauses,
        all_hold,
        consensus_kl: mean_score.kl,
        mean_expert_kl: mean_kl,
    })
}

/// Aggregate of a randomized certification sweep.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepReport {
    pub instances: usize,
    pub violations: usize,
    /// Worst (smallest) margin seen per clause, in clause order a-d.
    pub worst_margins: Vec<f64>,
    pub elapsed_seconds: f64,
}

impl SweepReport {
    pub fn passed(&self) -> bool {
        self.violations == 0
    }
}

fn random_point(rng: &mut RngStream, dim: usize) -> ExpFamPoint {
    let mean: Vec<f64> = (0..dim).map(|_| rng.range(-2.0, 2.0)).collect();
    let std: Vec<f64> = (0..dim).map(|_| rng.range(0.3, 3.0)).collect();
    ExpFamPoint::from_mean_std(&mean, &std)
}

/// How the sweep draws the linear surrogate gradient. The certified clauses
/// hold for any linear functional; the toy mode grounds `g` in a concrete
/// objective (steepest ascent of `-0.5 ||eta - eta*||^2` at `eta_t` for a
/// random target point) for end-to-end illustration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradientMode {
    Random,
    QuadraticToy,
}

/// Randomized certification of the theorem clauses. Draws `(eta_t, experts,
/// g, lambda)` with `delta` at or above the worst expert KL so the
/// trust-region clause is always exercised.
pub fn theorem_sweep(instances: usize, seed: u64) -> SweepReport {
    theorem_sweep_with(instances, seed, GradientMode::Random)
}

pub fn theorem_sweep_with(instances: usize, seed: u64, mode: GradientMode) -> SweepReport {
    let start = std::time::Instant::now();
    let mut rng = RngStream::named(seed, "theorem-sweep");
    let mut violations = 0;
    let mut worst = vec![f64::INFINITY; 4];
    for i in 0..instances {
        let dim = 1 + (rng.below(6) as usize);
        let k = 2 + (rng.below(5) as usize);
        let eta_t = random_point(&mut rng, dim);
        let experts: Vec<ExpFamPoint> = if i % 17 == 0 {
            // Occasionally degenerate: all experts identical (equality case).
            let e = random_point(&mut rng, dim);
            vec![e; k]
        } else {
            (0..k).map(|_| random_point(&mut rng, dim)).collect()
        };
        let g: Vec<f64> = match mode {
            GradientMode::Random => (0..2 * dim).map(|_| rng.range(-1.0, 1.0)).collect(),
            GradientMode::QuadraticToy => {
                let target = random_point(&mut rng, dim);
                target
                    .coords()
                    .iter()
                    .zip(eta_t.coords())
                    .map(|(t, c)| t - c)
                    .collect()
            }
        };
        let lambda = rng.range(0.1, 5.0);
        let max_kl = experts
            .iter()
            .map(|e| bregman_kl(e, &eta_t))
            .fold(0.0f64, f64::max);
        let delta = max_kl * rng.range(1.0, 1.5) + 1e-9;
        let report = verify_consensus_theorem(&eta_t, &experts, &g, lambda, delta)
            .expect("well-formed instance");
        if !report.all_hold {
            violations += 1;
        }
        for (w, c) in worst.iter_mut().zip(&report.clauses) {
            if c.margin < *w {
                *w = c.margin;
            }
        }
    }
    SweepReport {
        instances,
        violations,
        worst_margins: worst,
        elapsed_seconds: start.elapsed().as_secs_f64(),
    }
}
