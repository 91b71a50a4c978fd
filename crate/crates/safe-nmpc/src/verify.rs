//! Executable property checks: each offline certificate and in-text
//! inequality becomes a numeric assertion with a quantified tolerance.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::model::{BoxSet, Polytope, ReferenceTrajectory, SystemModel};
use crate::sim::SimTrace;
use crate::synthesis::{DesignArtifact, Variant};
use crate::tube::{feedback_kappa, sqrt_vdelta, tube_size_from};
use crate::{Error, Result};

/// Descent / convergence report of a closed-loop trace.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DescentReport {
    /// Tracking variant: worst per-step residual of
    /// `J*_{t+Ts} − J*_t ≤ −(first-interval stage cost)`, scaled by
    /// `1 + |J*_t|`. Tube variants: NaN.
    pub worst_descent_residual: f64,
    /// Mean `‖x − x^r‖²_Q` over the tail half of the run.
    pub tail_average_error: f64,
    /// Final over initial tracking-error ratio.
    pub error_ratio: f64,
    pub pass: bool,
}

/// Check the per-step cost decrease (tracking variant) or report the
/// tail-average tracking error (tube variants).
pub fn verify_descent(
    trace: &SimTrace,
    artifact: &DesignArtifact,
    reference: &ReferenceTrajectory,
) -> DescentReport {
    let q = &artifact.q_weight;
    let err_at = |rec: &crate::sim::FineRecord| -> f64 {
        let x = DVector::from_vec(rec.x.clone());
        let d = x - reference.x_at(rec.t);
        (q * &d).dot(&d)
    };
    let n = trace.fine.len();
    let tail_average_error = if n == 0 {
        f64::NAN
    } else {
        trace.fine[n / 2..].iter().map(&err_at).sum::<f64>() / (n - n / 2) as f64
    };
    let error_ratio = match (trace.fine.first(), trace.fine.last()) {
        (Some(a), Some(b)) => (err_at(b) / err_at(a).max(1e-300)).sqrt(),
        _ => f64::NAN,
    };
    match artifact.variant {
        Variant::Tmpc => {
            let mut worst = f64::NEG_INFINITY;
            for pair in trace.steps.windows(2) {
                let (a, b) = (&pair[0], &pair[1]);
                let residual =
                    (b.objective - a.objective + a.first_interval_cost) / (1.0 + a.objective.abs());
                worst = worst.max(residual);
            }
            DescentReport {
                worst_descent_residual: worst,
                tail_average_error,
                error_ratio,
                pass: worst <= 1e-4,
            }
        }
        _ => DescentReport {
            worst_descent_residual: f64::NAN,
            tail_average_error,
            error_ratio,
            pass: tail_average_error.is_finite(),
        },
    }
}

/// Recursive-feasibility report: the logged warm-start candidates are the
/// constructive feasibility proofs, realized numerically.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeasibilityReport {
    pub worst_candidate_margin: f64,
    pub steps_checked: usize,
    pub pass: bool,
}

pub fn verify_recursive_feasibility(trace: &SimTrace, tol: f64) -> FeasibilityReport {
    let margins: Vec<f64> =
        trace.steps.iter().map(|s| s.candidate_margin).filter(|m| m.is_finite()).collect();
    let worst = margins.iter().copied().fold(f64::INFINITY, f64::min);
    FeasibilityReport {
        worst_candidate_margin: worst,
        steps_checked: margins.len(),
        pass: margins.iter().all(|m| *m >= -tol),
    }
}

/// Terminal-set invariance report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InvarianceReport {
    /// Minimum over samples of the membership-margin change over one
    /// sampling interval.
    pub min_margin_delta: f64,
    /// Samples whose margin decreased by more than the tolerance.
    pub violations: usize,
    pub samples: usize,
    pub pass: bool,
}

/// Sample terminal-set boundary points, run the terminal law for one
/// sampling interval with `w ≡ w^b`, and check that the membership margin
/// does not decrease (within 1e-6).
///
/// `alpha` overrides the artifact's scaling (for negative tests); `t_ref` is
/// the reference time of the terminal point; `s_test` is the tube size the
/// membership is evaluated at (boundary points start at
/// `√V = alpha − s_test − ε`).
#[allow(clippy::too_many_arguments)]
pub fn verify_terminal_invariance(
    artifact: &DesignArtifact,
    model: &SystemModel,
    reference: &ReferenceTrajectory,
    t_ref: f64,
    ts: f64,
    alpha: f64,
    s_test: f64,
    n_samples: usize,
    seed: u64,
) -> Result<InvarianceReport> {
    if artifact.variant == Variant::Tmpc {
        return Err(Error::Config(
            "terminal invariance check applies to the tube variants".into(),
        ));
    }
    let pdelta = artifact.metric().clone();
    let law = artifact.feedback_law();
    let eps = if artifact.variant == Variant::Rompc { artifact.epsilon } else { 0.0 };
    let radius = alpha - s_test - eps;
    if radius <= 0.0 {
        return Err(Error::Config(format!(
            "terminal boundary empty: alpha {alpha} ≤ s_test {s_test} + epsilon {eps}"
        )));
    }
    let p_inv_sqrt = sym_inv_sqrt(&pdelta)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_x = model.n_x;
    let substeps = 50;
    let dt = ts / substeps as f64;
    let mut min_delta = f64::INFINITY;
    let mut violations = 0usize;
    for _ in 0..n_samples {
        let dir = sphere_sample(n_x, &mut rng);
        let mut x = reference.x_at(t_ref) + &p_inv_sqrt * dir * radius;
        let mut s = s_test;
        let margin0 = alpha - sqrt_vdelta(&pdelta, &x, &reference.x_at(t_ref)) - s - eps;
        for i in 0..substeps {
            let t = t_ref + i as f64 * dt;
            let u = feedback_kappa(&law, &x, &reference.x_at(t), &reference.u_at(t));
            x = model.integrate_step(&x, &u, Some(&model.w_bias.clone()), dt, 1)?;
        }
        s = tube_size_from(artifact.rho, artifact.wbar, s, ts);
        let margin1 = alpha - sqrt_vdelta(&pdelta, &x, &reference.x_at(t_ref + ts)) - s - eps;
        let delta = margin1 - margin0;
        min_delta = min_delta.min(delta);
        if delta < -1e-6 {
            violations += 1;
        }
    }
    Ok(InvarianceReport {
        min_margin_delta: min_delta,
        violations,
        samples: n_samples,
        pass: violations == 0,
    })
}

/// Sampled incremental-stability report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LipschitzReport {
    /// Worst slack factor of the system-row Lipschitz bounds (≤ 1 means the
    /// synthesized constants hold).
    pub worst_row_factor: f64,
    /// Worst slack factor of the obstacle Lipschitz bound.
    pub worst_obstacle_factor: f64,
    /// Worst residual of `d/dt √V ≤ −ρ √V` under the tube feedback with
    /// `w = w^b` (finite differences, scale-relative).
    pub worst_contraction_residual: f64,
    /// Worst residual of `d/dt √V ≤ −ρ √V + w̄` with the disturbance at the
    /// worst-case vertex.
    pub worst_disturbed_residual: f64,
    pub samples: usize,
    pub pass: bool,
}

/// Monte-Carlo check of the sampled Lipschitz bounds, the contraction rate,
/// and the disturbed tube-growth inequality.
#[allow(clippy::too_many_arguments)]
pub fn verify_lipschitz_and_contraction(
    artifact: &DesignArtifact,
    model: &SystemModel,
    system_rows: &Polytope,
    x_box: &BoxSet,
    u_box: &BoxSet,
    w_box: &BoxSet,
    n_samples: usize,
    seed: u64,
) -> Result<LipschitzReport> {
    if artifact.variant == Variant::Tmpc {
        return Err(Error::Config("incremental-stability check needs a tube artifact".into()));
    }
    let pdelta = artifact.metric().clone();
    let law = artifact.feedback_law();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n_u, _n_x) = (model.n_u, model.n_x);
    let wc_vertex = w_box
        .vertices()
        .into_iter()
        .max_by(|a, b| {
            let na = (&pdelta * (&model.e_mat * a)).dot(&(&model.e_mat * a));
            let nb = (&pdelta * (&model.e_mat * b)).dot(&(&model.e_mat * b));
            na.total_cmp(&nb)
        })
        .unwrap_or_else(|| DVector::zeros(model.n_w));
    let dt = 1e-5;
    let mut worst_row = f64::NEG_INFINITY;
    let mut worst_obs = f64::NEG_INFINITY;
    let mut worst_contract = f64::NEG_INFINITY;
    let mut worst_disturbed = f64::NEG_INFINITY;
    for _ in 0..n_samples {
        let x = x_box.sample(&mut rng);
        let z = x_box.sample(&mut rng);
        let v = u_box.sample(&mut rng);
        let sv = sqrt_vdelta(&pdelta, &x, &z);
        let kappa = feedback_kappa(&law, &x, &z, &v);
        // Row Lipschitz bounds: g_j(x, κ) − g_j(z, v) ≤ c_j √V.
        for (j, (l, _)) in system_rows.rows.iter().enumerate() {
            let lhs: f64 = l[..n_u]
                .iter()
                .zip(kappa.iter().zip(v.iter()))
                .map(|(c, (a, b))| c * (a - b))
                .sum::<f64>()
                + l[n_u..].iter().zip(x.iter().zip(z.iter())).map(|(c, (a, b))| c * (a - b)).sum::<f64>();
            if sv > 1e-12 {
                worst_row = worst_row.max(lhs / (artifact.c_s[j].max(1e-300) * sv));
            }
        }
        // Obstacle Lipschitz bound along a random unit direction in
        // position space: d·M(x − z) ≤ c^o √V.
        let dir = sphere_sample(model.n_p, &mut rng);
        let lhs = dir.dot(&(&model.m_mat * (&x - &z)));
        if sv > 1e-12 {
            worst_obs = worst_obs.max(lhs / (artifact.c_o.max(1e-300) * sv));
        }
        // Contraction and disturbed growth by finite differences.
        if sv > 1e-8 {
            let x1 = model.integrate_step(&x, &kappa, Some(&model.w_bias.clone()), dt, 1)?;
            let z1 = model.integrate_step(&z, &v, Some(&model.w_bias.clone()), dt, 1)?;
            let rate = (sqrt_vdelta(&pdelta, &x1, &z1) - sv) / dt;
            worst_contract = worst_contract.max((rate + artifact.rho * sv) / (1.0 + sv));
            let w = &model.w_bias + &wc_vertex;
            let x1w = model.integrate_step(&x, &kappa, Some(&w), dt, 1)?;
            let rate_w = (sqrt_vdelta(&pdelta, &x1w, &z1) - sv) / dt;
            worst_disturbed =
                worst_disturbed.max((rate_w + artifact.rho * sv - artifact.wbar) / (1.0 + sv));
        }
    }
    let pass = worst_row <= 1.0 + 1e-6
        && worst_obs <= 1.0 + 1e-6
        && worst_contract <= 1e-4
        && worst_disturbed <= 1e-4;
    Ok(LipschitzReport {
        worst_row_factor: worst_row,
        worst_obstacle_factor: worst_obs,
        worst_contraction_residual: worst_contract,
        worst_disturbed_residual: worst_disturbed,
        samples: n_samples,
        pass,
    })
}

/// Independent sampling oracle for the terminal-set scaling: the largest
/// `α` such that every sampled boundary point of the `α`-ellipsoid satisfies
/// the rows under `u = u^r + K δ`, minimized over the reference points.
pub fn brute_force_alpha(
    p: &DMatrix<f64>,
    k: &DMatrix<f64>,
    system_rows: &Polytope,
    reference_points: &[DVector<f64>],
    n_samples: usize,
    seed: u64,
) -> Result<f64> {
    let n_x = p.nrows();
    let n_u = k.nrows();
    let p_inv_sqrt = sym_inv_sqrt(p)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Per (row, reference) the binding scaling is
    // (l_j − L_j r) / max_direction (L^u K + L^x) P^{−1/2} u; sampling the
    // unit sphere under-estimates the max, so the α estimate is an upper
    // bound converging from above as samples grow.
    let dirs: Vec<DVector<f64>> =
        (0..n_samples).map(|_| &p_inv_sqrt * sphere_sample(n_x, &mut rng)).collect();
    let mut alpha = f64::INFINITY;
    for (l, off) in &system_rows.rows {
        let lu = DVector::from_column_slice(&l[..n_u]);
        let lx = DVector::from_column_slice(&l[n_u..]);
        let row_dir = k.transpose() * &lu + &lx;
        let denom = dirs.iter().map(|d| row_dir.dot(d)).fold(0.0_f64, f64::max);
        if denom <= 1e-12 {
            continue;
        }
        for r in reference_points {
            let slack = off - DVector::from_column_slice(l).dot(r);
            if slack < 0.0 {
                return Err(Error::Config("reference point violates a raw row".into()));
            }
            alpha = alpha.min(slack / denom);
        }
    }
    if !alpha.is_finite() {
        return Err(Error::Config("alpha unbounded: no row constrains the ellipsoid".into()));
    }
    Ok(alpha)
}

fn sphere_sample<R: Rng>(n: usize, rng: &mut R) -> DVector<f64> {
    loop {
        let v = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
        let norm = v.norm();
        if norm > 1e-3 {
            return v / norm;
        }
    }
}

fn sym_inv_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let se = m.clone().symmetric_eigen();
    if se.eigenvalues.min() <= 0.0 {
        return Err(Error::Numeric("matrix not positive definite".into()));
    }
    let d = DMatrix::from_diagonal(&se.eigenvalues.map(|l| 1.0 / l.sqrt()));
    Ok(&se.eigenvectors * d * se.eigenvectors.transpose())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{constant_reference, scalar_integrator, system_rows_from_boxes};
    use crate::synthesis::{compute_alpha_lp, Multipliers};
    use crate::tube::GainTable;

    fn eye(n: usize) -> DMatrix<f64> {
        DMatrix::identity(n, n)
    }

    fn scalar_tube_artifact(wbar: f64, alpha: f64) -> DesignArtifact {
        DesignArtifact {
            schema: 1,
            variant: Variant::Rmpc,
            model: "scalar_integrator".into(),
            p: eye(1),
            k: Some(DMatrix::from_element(1, 1, -1.0)),
            pdelta: Some(eye(1)),
            kdelta: Some(GainTable::constant(&DMatrix::from_element(1, 1, -1.0))),
            rho: 1.0,
            wbar,
            c_s: vec![1.0, 1.0, 1.0, 1.0],
            c_s_o: vec![0.0; 4],
            c_o: 1.0,
            alpha,
            l_gain: None,
            epsilon: 0.0,
            multipliers: Multipliers::default(),
            q_weight: eye(1),
            r_weight: eye(1),
            eps_reg: 0.0,
            n_u: 1,
            validation: Default::default(),
        }
    }

    #[test]
    fn terminal_invariance_scalar() {
        // ẋ = u, κ^f drives ẋ = −(x − x^r): contraction rate exactly 1.
        let wbar = 0.3;
        let artifact = scalar_tube_artifact(wbar, wbar / 1.0);
        let model = scalar_integrator();
        let reference = constant_reference(DVector::zeros(1), DVector::zeros(1), 10.0);
        let s_test = 0.25 * wbar;
        let report = verify_terminal_invariance(
            &artifact, &model, &reference, 1.0, 0.25, artifact.alpha, s_test, 100, 11,
        )
        .unwrap();
        assert!(report.pass, "min delta {}", report.min_margin_delta);
        // Halved α must be caught.
        let report = verify_terminal_invariance(
            &artifact,
            &model,
            &reference,
            1.0,
            0.25,
            0.5 * artifact.alpha,
            0.5 * s_test,
            100,
            11,
        )
        .unwrap();
        assert!(!report.pass);
        assert!(report.violations >= 1);
    }

    #[test]
    fn lipschitz_and_contraction_scalar() {
        // For the scalar integrator under κ = v − (x − z): row constants
        // 1 are exact for the normalized state rows, the contraction rate
        // is exactly ρ = 1.
        let artifact = scalar_tube_artifact(0.2, 0.4);
        let model = scalar_integrator();
        let rows = system_rows_from_boxes(
            &BoxSet::symmetric(vec![2.0]),
            &BoxSet::symmetric(vec![3.0]),
        );
        // Input rows have Lipschitz factor 1 as well here (|κ−v| = |x−z|).
        let report = verify_lipschitz_and_contraction(
            &artifact,
            &model,
            &rows,
            &BoxSet::symmetric(vec![3.0]),
            &BoxSet::symmetric(vec![2.0]),
            &BoxSet::symmetric(vec![0.2]),
            2000,
            5,
        )
        .unwrap();
        assert!(report.pass, "{report:?}");
        assert!(report.worst_row_factor <= 1.0 + 1e-6);
        assert!(report.worst_row_factor > 0.9, "bounds should be near-tight");
    }

    #[test]
    fn brute_force_alpha_matches_lp_scalar() {
        let p = eye(1);
        let k = DMatrix::from_element(1, 1, -1.0);
        let rows = system_rows_from_boxes(
            &BoxSet::symmetric(vec![1.0]),
            &BoxSet::symmetric(vec![2.0]),
        );
        let refs = vec![DVector::zeros(2)];
        let lp = compute_alpha_lp(&p, &k, &refs, &rows).unwrap();
        let bf = brute_force_alpha(&p, &k, &rows, &refs, 20_000, 3).unwrap();
        assert!((bf - lp).abs() / lp <= 0.02, "bf {bf} vs lp {lp}");
    }

    #[test]
    fn brute_force_alpha_scaling_law() {
        let p = eye(1);
        let k = DMatrix::from_element(1, 1, -0.5);
        let rows = system_rows_from_boxes(
            &BoxSet::symmetric(vec![1.0]),
            &BoxSet::symmetric(vec![2.0]),
        );
        let refs = vec![DVector::zeros(2)];
        let a1 = brute_force_alpha(&p, &k, &rows, &refs, 5_000, 3).unwrap();
        let a2 = brute_force_alpha(&(&p * 4.0), &k, &rows, &refs, 5_000, 3).unwrap();
        assert!((a2 / a1 - 2.0).abs() <= 1e-6, "a1 {a1} a2 {a2}");
    }

    #[test]
    fn unconstrained_alpha_reported_unbounded() {
        let p = eye(1);
        let k = DMatrix::zeros(1, 1);
        let rows = Polytope::new(vec![]);
        let refs = vec![DVector::zeros(2)];
        assert!(brute_force_alpha(&p, &k, &rows, &refs, 100, 3).is_err());
    }
}
