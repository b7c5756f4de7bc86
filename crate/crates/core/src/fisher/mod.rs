//! Fisher geometry of policy updates: natural-gradient direction,
//! signal/waste decomposition, and cross-expert diagnostics.
//!
//! Every inner product here is taken with the SAME (damped) operator that
//! produced the unit natural-gradient direction, so the KL-additivity
//! identity holds by construction under damping; oracle tests use the
//! undamped dense operator. The operator is always frozen at the incumbent:
//! all experts and the consensus of one generation are decomposed against
//! the incumbent's geometry.

pub mod dense;

use crate::error::{Error, Result};
use crate::linalg::{add_scaled, dot, mean, norm2};
use crate::optim::conjugate_gradient;
use serde::{Deserialize, Serialize};

/// A symmetric PSD operator available only through matrix-vector products.
pub trait FisherOp {
    fn apply_vec(&self, v: &[f64]) -> Vec<f64>;
    fn len(&self) -> usize;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl FisherOp for crate::optim::FisherVectorProduct<'_> {
    fn apply_vec(&self, v: &[f64]) -> Vec<f64> {
        self.apply(v).expect("fisher-vector product")
    }
    fn len(&self) -> usize {
        self.dim()
    }
}

/// The unit natural-gradient direction `d_hat = F^{-1} g / ||F^{-1} g||_F`,
/// with `F d_hat` cached for decompositions.
#[derive(Debug, Clone)]
pub struct NatGradDirection {
    pub d_hat: Vec<f64>,
    pub f_d_hat: Vec<f64>,
    /// `||F^{-1} g||_F`.
    pub nat_grad_norm: f64,
}

pub fn natural_gradient_direction(
    op: &dyn FisherOp,
    g: &[f64],
    cg_iters: usize,
    tol: f64,
) -> Result<NatGradDirection> {
    if norm2(g) == 0.0 {
        return Err(Error::ZeroGradient);
    }
    let x = conjugate_gradient(|v| op.apply_vec(v), g, cg_iters, tol);
    let fx = op.apply_vec(&x);
    let norm_sq = dot(&x, &fx);
    let positive = norm_sq.is_finite() && norm_sq > 0.0;
    if !positive {
        return Err(Error::ZeroGradient);
    }
    let norm = norm_sq.sqrt();
    let inv = 1.0 / norm;
    Ok(NatGradDirection {
        d_hat: x.iter().map(|v| v * inv).collect(),
        f_d_hat: fx.iter().map(|v| v * inv).collect(),
        nat_grad_norm: norm,
    })
}

/// One update's Fisher geometry: the signal coefficient, the Fisher-norm of
/// the waste residual, the KL split, and the alignment measures.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Decomposition {
    /// Signal coefficient `c = <delta, d_hat>_F` (Fisher-norm units).
    pub c: f64,
    /// `||eps||_F^2` of the Fisher-orthogonal residual.
    pub waste_norm_sq: f64,
    /// `c^2 / 2`.
    pub signal_kl: f64,
    /// `||eps||_F^2 / 2`.
    pub waste_kl: f64,
    /// `delta^T F delta / 2`, computed directly (not from the split).
    pub total_kl_quad: f64,
    /// Fraction of the quadratic KL budget spent on signal.
    pub alpha: f64,
    /// Fisher cosine `<delta, d_hat>_F / ||delta||_F`.
    pub cos_f: f64,
    /// `||F^{-1} g||_F` of the direction used.
    pub nat_grad_norm: f64,
}

/// Decompose `delta = c d_hat + eps` against a Fisher-normalized direction.
pub fn decompose_update(
    op: &dyn FisherOp,
    dir: &NatGradDirection,
    delta: &[f64],
) -> Decomposition {
    let f_delta = op.apply_vec(delta);
    let c = dot(delta, &dir.f_d_hat);
    let total_quad = dot(delta, &f_delta);
    let eps = add_scaled(delta, -c, &dir.d_hat);
    // eps^T F eps = eps^T (F delta - c F d_hat); reuses both products.
    let waste = (dot(&eps, &f_delta) - c * dot(&eps, &dir.f_d_hat)).max(0.0);
    let c_sq = c * c;
    let denom = c_sq + waste;
    Decomposition {
        c,
        waste_norm_sq: waste,
        signal_kl: 0.5 * c_sq,
        waste_kl: 0.5 * waste,
        total_kl_quad: 0.5 * total_quad,
        alpha: if denom > 0.0 { c_sq / denom } else { 0.0 },
        cos_f: if total_quad > 0.0 {
            c / total_quad.sqrt()
        } else {
            0.0
        },
        nat_grad_norm: dir.nat_grad_norm,
    }
}

/// `||eps_consensus||_F^2 / mean_k ||eps_k||_F^2`; below one means the
/// consensus carries less waste than the average expert.
pub fn waste_reduction_ratio(
    expert_decomps: &[Decomposition],
    consensus: &Decomposition,
) -> Result<f64> {
    if expert_decomps.len() < 2 {
        return Err(Error::Config(
            "waste reduction needs at least two experts".into(),
        ));
    }
    let mean_waste = mean(
        &expert_decomps
            .iter()
            .map(|d| d.waste_norm_sq)
            .collect::<Vec<_>>(),
    );
    if mean_waste <= 0.0 {
        return Err(Error::ZeroWaste);
    }
    Ok(consensus.waste_norm_sq / mean_waste)
}

/// Mean pairwise Fisher cosines across experts of the signal vectors, the
/// waste residuals, and the full updates.
pub fn cross_expert_correlations(
    op: &dyn FisherOp,
    dir: &NatGradDirection,
    expert_updates: &[Vec<f64>],
) -> Result<(f64, f64, f64)> {
    if expert_updates.len() < 2 {
        return Err(Error::Config(
            "correlations need at least two experts".into(),
        ));
    }
    let k = expert_updates.len();
    let f_deltas: Vec<Vec<f64>> = expert_updates.iter().map(|d| op.apply_vec(d)).collect();
    let cs: Vec<f64> = expert_updates
        .iter()
        .map(|d| dot(d, &dir.f_d_hat))
        .collect();
    let epss: Vec<Vec<f64>> = expert_updates
        .iter()
        .zip(&cs)
        .map(|(d, &c)| add_scaled(d, -c, &dir.d_hat))
        .collect();
    let eps_norm_sq: Vec<f64> = (0..k)
        .map(|i| (dot(&epss[i], &f_deltas[i]) - cs[i] * dot(&epss[i], &dir.f_d_hat)).max(0.0))
        .collect();
    let total_norm_sq: Vec<f64> = (0..k)
        .map(|i| dot(&expert_updates[i], &f_deltas[i]).max(0.0))
        .collect();

    let pairwise = |value: &dyn Fn(usize, usize) -> Option<f64>| -> Result<f64> {
        let mut acc = 0.0;
        let mut count = 0usize;
        for i in 0..k {
            for j in i + 1..k {
                if let Some(v) = value(i, j) {
                    acc += v;
                    count += 1;
                }
            }
        }
        if count == 0 {
            return Err(Error::NoValidPairs);
        }
        Ok(acc / count as f64)
    };

    // Signal vectors are c_k d_hat: parallel, so each pair contributes the
    // sign of c_i c_j (the cosine definition, reported as such).
    let rho_c = pairwise(&|i, j| {
        if cs[i] == 0.0 || cs[j] == 0.0 {
            None
        } else {
            Some((cs[i] * cs[j]).signum())
        }
    })?;
    let rho_eps = pairwise(&|i, j| {
        let denom = (eps_norm_sq[i] * eps_norm_sq[j]).sqrt();
        if denom <= 0.0 {
            return None;
        }
        // <eps_i, eps_j>_F via F delta_j and F d_hat.
        let inner = dot(&epss[i], &f_deltas[j]) - cs[j] * dot(&epss[i], &dir.f_d_hat);
        Some(inner / denom)
    })?;
    let rho_total = pairwise(&|i, j| {
        let denom = (total_norm_sq[i] * total_norm_sq[j]).sqrt();
        if denom <= 0.0 {
            return None;
        }
        Some(dot(&expert_updates[i], &f_deltas[j]) / denom)
    })?;
    Ok((rho_c, rho_eps, rho_total))
}

/// Per-generation diagnostics row set: every expert's decomposition, the
/// consensus decomposition, and the cross-expert aggregates.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiagnosticsRecord {
    pub generation: usize,
    pub experts: Vec<Decomposition>,
    pub consensus: Decomposition,
    pub waste_reduction_ratio: Option<f64>,
    pub rho_c: Option<f64>,
    pub rho_eps: Option<f64>,
    pub rho_total: Option<f64>,
    /// `c_consensus / mean_k c_k`.
    pub signal_preservation: Option<f64>,
}

/// Assemble the full record for one generation against the incumbent's
/// geometry. Single-expert methods pass their one update as both the expert
/// list and the consensus; the cross-expert fields stay empty.
pub fn generation_diagnostics(
    op: &dyn FisherOp,
    dir: &NatGradDirection,
    generation: usize,
    expert_updates: &[Vec<f64>],
    consensus_update: &[f64],
) -> Result<DiagnosticsRecord> {
    if expert_updates.is_empty() {
        return Err(Error::Empty("expert updates"));
    }
    let experts: Vec<Decomposition> = expert_updates
        .iter()
        .map(|d| decompose_update(op, dir, d))
        .collect();
    let consensus = decompose_update(op, dir, consensus_update);
    let multi = expert_updates.len() >= 2;
    let ratio = if multi {
        waste_reduction_ratio(&experts, &consensus).ok()
    } else {
        None
    };
    let (rho_c, rho_eps, rho_total) = if multi {
        match cross_expert_correlations(op, dir, expert_updates) {
            Ok((a, b, c)) => (Some(a), Some(b), Some(c)),
            Err(_) => (None, None, None),
        }
    } else {
        (None, None, None)
    };
    let mean_c = mean(&experts.iter().map(|d| d.c).collect::<Vec<_>>());
    let signal_preservation = if multi && mean_c != 0.0 {
        Some(consensus.c / mean_c)
    } else {
        None
    };
    Ok(DiagnosticsRecord {
        generation,
        experts,
        consensus,
        waste_reduction_ratio: ratio,
        rho_c,
        rho_eps,
        rho_total,
        signal_preservation,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use dense::DenseMatrix;

    fn diag_op(entries: &[f64]) -> DenseMatrix {
        let n = entries.len();
        let mut a = vec![0.0; n * n];
        for (i, &e) in entries.iter().enumerate() {
            a[i * n + i] = e;
        }
        DenseMatrix::new(n, a)
    }

    #[test]
    fn identity_fisher_direction_is_normalized_gradient() {
        let op = diag_op(&[1.0, 1.0]);
        let dir = natural_gradient_direction(&op, &[3.0, 4.0], 10, 1e-12).unwrap();
        assert!((dir.d_hat[0] - 0.6).abs() < 1e-10);
        assert!((dir.d_hat[1] - 0.8).abs() < 1e-10);
        assert!((dir.nat_grad_norm - 5.0).abs() < 1e-10);
    }

    #[test]
    fn diag_fisher_hand_algebra() {
        // F = diag(1,4), g = (1,0): F^{-1} g = (1,0), ||.||_F = 1, d_hat = (1,0).
        let op = diag_op(&[1.0, 4.0]);
        let dir = natural_gradient_direction(&op, &[1.0, 0.0], 10, 1e-12).unwrap();
        assert!((dir.d_hat[0] - 1.0).abs() < 1e-10);
        assert!(dir.d_hat[1].abs() < 1e-12);
        assert!((dir.nat_grad_norm - 1.0).abs() < 1e-10);

        // delta = (0.5, 0.25): c = 0.5, eps = (0, 0.25), ||eps||_F^2 = 0.25,
        // alpha = 0.5, cos_F = 0.5/sqrt(0.5).
        let d = decompose_update(&op, &dir, &[0.5, 0.25]);
        assert!((d.c - 0.5).abs() < 1e-10);
        assert!((d.waste_norm_sq - 0.25).abs() < 1e-10);
        assert!((d.alpha - 0.5).abs() < 1e-10);
        assert!((d.cos_f - 0.5 / 0.5f64.sqrt()).abs() < 1e-10);
        assert!((d.total_kl_quad - 0.25).abs() < 1e-10);
        assert!((d.signal_kl + d.waste_kl - d.total_kl_quad).abs() < 1e-10);
    }

    #[test]
    fn pure_signal_and_pure_waste() {
        let op = diag_op(&[2.0, 3.0]);
        let dir = natural_gradient_direction(&op, &[1.0, 1.0], 10, 1e-12).unwrap();
        // delta parallel to d_hat.
        let delta: Vec<f64> = dir.d_hat.iter().map(|x| 2.0 * x).collect();
        let d = decompose_update(&op, &dir, &delta);
        assert!((d.c - 2.0).abs() < 1e-10);
        assert!(d.waste_norm_sq < 1e-12);
        assert!((d.alpha - 1.0).abs() < 1e-10);
        assert!((d.cos_f - 1.0).abs() < 1e-10);

        // delta Fisher-orthogonal to d_hat: c = 0, alpha = 0.
        let f_d = &dir.f_d_hat;
        let orth = vec![f_d[1], -f_d[0]]; // dot with f_d_hat = 0
        let d = decompose_update(&op, &dir, &orth);
        assert!(d.c.abs() < 1e-10);
        assert!((d.alpha - 0.0).abs() < 1e-10);
    }

    #[test]
    fn unit_direction_has_unit_fisher_norm() {
        let op = diag_op(&[0.5, 2.5, 7.0]);
        let dir = natural_gradient_direction(&op, &[0.2, -1.0, 0.4], 20, 1e-12).unwrap();
        let quad = dot(&dir.d_hat, &op.apply_vec(&dir.d_hat));
        assert!((quad - 1.0).abs() < 1e-8);
        // Fisher-orthogonality of the residual after decomposition.
        let d = decompose_update(&op, &dir, &[1.0, 2.0, -0.5]);
        let eps = add_scaled(&[1.0, 2.0, -0.5], -d.c, &dir.d_hat);
        assert!(dot(&eps, &dir.f_d_hat).abs() < 1e-8);
    }

    #[test]
    fn zero_gradient_is_rejected() {
        let op = diag_op(&[1.0, 1.0]);
        assert!(matches!(
            natural_gradient_direction(&op, &[0.0, 0.0], 10, 1e-12),
            Err(Error::ZeroGradient)
        ));
    }

    #[test]
    fn ratio_trivial_cases() {
        let op = diag_op(&[1.0, 4.0]);
        let dir = natural_gradient_direction(&op, &[1.0, 0.3], 10, 1e-12).unwrap();
        let delta = vec![0.4, 0.2];
        let d = decompose_update(&op, &dir, &delta);
        // Identical experts -> ratio 1.
        let ratio = waste_reduction_ratio(&[d.clone(), d.clone()], &d).unwrap();
        assert!((ratio - 1.0).abs() < 1e-12);

        // Opposite waste, equal signal -> consensus waste 0, ratio 0.
        let eps = add_scaled(&delta, -d.c, &dir.d_hat);
        let d1 = delta.clone();
        let d2 = add_scaled(&add_scaled(&delta, -1.0, &eps), -1.0, &eps); // c d_hat - eps
        let dec1 = decompose_update(&op, &dir, &d1);
        let dec2 = decompose_update(&op, &dir, &d2);
        let consensus: Vec<f64> = d1.iter().zip(&d2).map(|(a, b)| 0.5 * (a + b)).collect();
        let dec_c = decompose_update(&op, &dir, &consensus);
        let ratio = waste_reduction_ratio(&[dec1, dec2], &dec_c).unwrap();
        assert!(ratio < 1e-9, "ratio {ratio}");
    }

    #[test]
    fn ratio_undefined_for_zero_waste() {
        let op = diag_op(&[1.0, 1.0]);
        let dir = natural_gradient_direction(&op, &[1.0, 0.0], 10, 1e-12).unwrap();
        let pure = decompose_update(&op, &dir, &dir.d_hat.clone());
        assert!(matches!(
            waste_reduction_ratio(&[pure.clone(), pure.clone()], &pure),
            Err(Error::ZeroWaste)
        ));
    }

    #[test]
    fn correlation_trivial_cases() {
        let op = diag_op(&[1.0, 4.0]);
        let dir = natural_gradient_direction(&op, &[1.0, 0.5], 10, 1e-12).unwrap();
        let delta = vec![0.4, 0.2];
        // Identical experts: all three correlations are 1.
        let (rc, re, rt) =
            cross_expert_correlations(&op, &dir, &[delta.clone(), delta.clone()]).unwrap();
        assert!((rc - 1.0).abs() < 1e-10);
        assert!((re - 1.0).abs() < 1e-9);
        assert!((rt - 1.0).abs() < 1e-9);

        // Opposite waste, same-sign signal: rho_c = 1, rho_eps = -1.
        let dec = decompose_update(&op, &dir, &delta);
        let eps = add_scaled(&delta, -dec.c, &dir.d_hat);
        let mirrored = add_scaled(&add_scaled(&delta, -1.0, &eps), -1.0, &eps);
        let (rc, re, _) = cross_expert_correlations(&op, &dir, &[delta.clone(), mirrored]).unwrap();
        assert!((rc - 1.0).abs() < 1e-10);
        assert!((re + 1.0).abs() < 1e-8, "rho_eps {re}");
    }

    /// Penalized-score identity on the quadratic model:
    /// `J(mean) - mean J = (lambda/2) [Var(c_k) + mean ||eps_k - eps_bar||_F^2]`.
    #[test]
    fn quadratic_penalized_score_identity() {
        use crate::rng::RngStream;
        let mut rng = RngStream::named(8, "remark-identity");
        for case in 0..50 {
            let n = 3 + (rng.below(5) as usize);
            // Random SPD matrix.
            let b: Vec<f64> = (0..n * n).map(|_| rng.normal()).collect();
            let mut a = vec![0.0; n * n];
            for i in 0..n {
                for j in 0..n {
                    let mut acc = 0.0;
                    for l in 0..n {
                        acc += b[l * n + i] * b[l * n + j];
                    }
                    a[i * n + j] = acc / n as f64 + if i == j { 0.2 } else { 0.0 };
                }
            }
            let op = DenseMatrix::new(n, a);
            let g: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
            let dir = natural_gradient_direction(&op, &g, 20 * n, 1e-12).unwrap();
            let k = 4;
            let updates: Vec<Vec<f64>> =
                (0..k).map(|_| (0..n).map(|_| rng.normal()).collect()).collect();
            let lambda = rng.range(0.2, 3.0);
            let j_of = |d: &[f64]| dot(&g, d) - lambda * 0.5 * dot(d, &op.apply_vec(d));
            let avg: Vec<f64> = (0..n)
                .map(|j| updates.iter().map(|u| u[j]).sum::<f64>() / k as f64)
                .collect();
            let lhs = j_of(&avg) - updates.iter().map(|u| j_of(u)).sum::<f64>() / k as f64;

            let decs: Vec<Decomposition> =
                updates.iter().map(|u| decompose_update(&op, &dir, u)).collect();
            let mean_c = decs.iter().map(|d| d.c).sum::<f64>() / k as f64;
            let var_c = decs.iter().map(|d| (d.c - mean_c) * (d.c - mean_c)).sum::<f64>()
                / k as f64;
            let epss: Vec<Vec<f64>> = updates
                .iter()
                .zip(&decs)
                .map(|(u, d)| add_scaled(u, -d.c, &dir.d_hat))
                .collect();
            let eps_bar: Vec<f64> = (0..n)
                .map(|j| epss.iter().map(|e| e[j]).sum::<f64>() / k as f64)
                .collect();
            let mean_spread = epss
                .iter()
                .map(|e| {
                    let diff = crate::linalg::sub(e, &eps_bar);
                    dot(&diff, &op.apply_vec(&diff))
                })
                .sum::<f64>()
                / k as f64;
            let rhs = lambda * 0.5 * (var_c + mean_spread);
            let rel = (lhs - rhs).abs() / rhs.abs().max(1e-12);
            assert!(rel < 1e-6, "case {case}: lhs {lhs} rhs {rhs} rel {rel}");
        }
    }

    /// Ratio and correlations against plain inline dense algebra.
    #[test]
    fn ratio_and_correlations_match_dense_algebra() {
        use crate::rng::RngStream;
        let mut rng = RngStream::named(9, "ratio-dense");
        let n = 6;
        let b: Vec<f64> = (0..n * n).map(|_| rng.normal()).collect();
        let mut a = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                let mut acc = 0.0;
                for l in 0..n {
                    acc += b[l * n + i] * b[l * n + j];
                }
                a[i * n + j] = acc / n as f64 + if i == j { 0.3 } else { 0.0 };
            }
        }
        let op = DenseMatrix::new(n, a.clone());
        let g: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
        let dir = natural_gradient_direction(&op, &g, 20 * n, 1e-12).unwrap();
        let k = 4;
        let updates: Vec<Vec<f64>> =
            (0..k).map(|_| (0..n).map(|_| rng.normal()).collect()).collect();
        let consensus: Vec<f64> = (0..n)
            .map(|j| updates.iter().map(|u| u[j]).sum::<f64>() / k as f64)
            .collect();

        // Inline algebra, sharing no code with decompose_update.
        let matvec = |v: &[f64]| -> Vec<f64> {
            (0..n).map(|i| dot(&a[i * n..(i + 1) * n], v)).collect()
        };
        let inner_f = |u: &[f64], v: &[f64]| dot(u, &matvec(v));
        let eps_of = |u: &[f64]| {
            let c = inner_f(u, &dir.d_hat);
            add_scaled(u, -c, &dir.d_hat)
        };
        let expert_eps: Vec<Vec<f64>> = updates.iter().map(|u| eps_of(u)).collect();
        let mean_waste: f64 =
            expert_eps.iter().map(|e| inner_f(e, e)).sum::<f64>() / k as f64;
        let cons_eps = eps_of(&consensus);
        let ratio_oracle = inner_f(&cons_eps, &cons_eps) / mean_waste;

        let decs: Vec<Decomposition> =
            updates.iter().map(|u| decompose_update(&op, &dir, u)).collect();
        let cons_dec = decompose_update(&op, &dir, &consensus);
        let ratio = waste_reduction_ratio(&decs, &cons_dec).unwrap();
        assert!((ratio - ratio_oracle).abs() < 1e-8, "{ratio} vs {ratio_oracle}");

        let mut eps_pairs = Vec::new();
        let mut total_pairs = Vec::new();
        for i in 0..k {
            for j in i + 1..k {
                eps_pairs.push(
                    inner_f(&expert_eps[i], &expert_eps[j])
                        / (inner_f(&expert_eps[i], &expert_eps[i])
                            * inner_f(&expert_eps[j], &expert_eps[j]))
                            .sqrt(),
                );
                total_pairs.push(
                    inner_f(&updates[i], &updates[j])
                        / (inner_f(&updates[i], &updates[i])
                            * inner_f(&updates[j], &updates[j]))
                            .sqrt(),
                );
            }
        }
        let (rho_c, rho_eps, rho_total) =
            cross_expert_correlations(&op, &dir, &updates).unwrap();
        let mean_of = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        assert!((rho_eps - mean_of(&eps_pairs)).abs() < 1e-8);
        assert!((rho_total - mean_of(&total_pairs)).abs() < 1e-8);
        assert!(rho_c.abs() <= 1.0 + 1e-12);
    }

    #[test]
    fn consensus_linearity_of_the_decomposition() {
        // c and eps of the average update are the averages of the experts'.
        let op = diag_op(&[1.5, 0.7, 3.0]);
        let dir = natural_gradient_direction(&op, &[0.3, 1.0, -0.2], 30, 1e-12).unwrap();
        let updates = [
            vec![0.5, -0.1, 0.2],
            vec![-0.3, 0.4, 0.1],
            vec![0.2, 0.2, -0.6],
        ];
        let decs: Vec<Decomposition> =
            updates.iter().map(|u| decompose_update(&op, &dir, u)).collect();
        let avg: Vec<f64> = (0..3)
            .map(|j| updates.iter().map(|u| u[j]).sum::<f64>() / 3.0)
            .collect();
        let dec_avg = decompose_update(&op, &dir, &avg);
        let mean_c = decs.iter().map(|d| d.c).sum::<f64>() / 3.0;
        assert!((dec_avg.c - mean_c).abs() < 1e-12);
    }
}
