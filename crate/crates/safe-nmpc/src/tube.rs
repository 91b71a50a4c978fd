//! Tube dynamics, incremental Lyapunov evaluation, the tube feedback law,
//! terminal-set membership, and constraint-row tightening.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::model::Polytope;
use crate::{Error, Result};

/// Size of the error tube at time `t` started from zero:
/// `s(t) = (1 − e^{−ρt})·w̄/ρ`, the solution of `ṡ = −ρs + w̄`, `s(0) = 0`.
pub fn tube_size(rho: f64, wbar: f64, t: f64) -> f64 {
    debug_assert!(rho > 0.0 && t >= 0.0);
    (1.0 - (-rho * t).exp()) * wbar / rho
}

/// General tube solution with initial size `s0`.
pub fn tube_size_from(rho: f64, wbar: f64, s0: f64, t: f64) -> f64 {
    (-rho * t).exp() * s0 + tube_size(rho, wbar, t)
}

/// Precomputed tube profile over a horizon.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TubeProfile {
    pub rho: f64,
    pub wbar: f64,
    pub s0: f64,
    pub times: Vec<f64>,
    pub sizes: Vec<f64>,
}

impl TubeProfile {
    pub fn new(rho: f64, wbar: f64, s0: f64, times: Vec<f64>) -> Self {
        let sizes = times.iter().map(|&t| tube_size_from(rho, wbar, s0, t)).collect();
        TubeProfile { rho, wbar, s0, times, sizes }
    }

    /// Exact size at an arbitrary time (closed form, not interpolation).
    pub fn size_at(&self, t: f64) -> f64 {
        tube_size_from(self.rho, self.wbar, self.s0, t)
    }

    /// Asymptotic maximum tube size `w̄/ρ`.
    pub fn supremum(&self) -> f64 {
        self.wbar / self.rho
    }
}

/// Incremental Lyapunov function `V^δ(a, b) = (a−b)ᵀ P^δ (a−b)`.
pub fn vdelta(pdelta: &DMatrix<f64>, a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    let d = a - b;
    (pdelta * &d).dot(&d)
}

/// `√V^δ(a, b)`, the metric distance between two states.
pub fn sqrt_vdelta(pdelta: &DMatrix<f64>, a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    vdelta(pdelta, a, b).max(0.0).sqrt()
}

/// Feedback gain table `K(x)` over a rectangular state grid with multilinear
/// interpolation (clamped outside the grid). Axes with a single point are
/// treated as constant in that coordinate.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GainTable {
    /// Strictly increasing sample coordinates per state dimension.
    pub axes: Vec<Vec<f64>>,
    /// Gains in lexicographic grid order with the last axis fastest;
    /// each gain is `n_u × n_x` stored row-major.
    pub gains: Vec<Vec<f64>>,
    pub n_u: usize,
    pub n_x: usize,
}

impl GainTable {
    pub fn new(axes: Vec<Vec<f64>>, gains: Vec<DMatrix<f64>>, n_u: usize, n_x: usize) -> Result<Self> {
        let expected: usize = axes.iter().map(|a| a.len()).product();
        if gains.len() != expected {
            return Err(Error::Config(format!(
                "gain table needs {expected} entries for its axes, got {}",
                gains.len()
            )));
        }
        for a in &axes {
            if a.is_empty() || a.windows(2).any(|w| w[1] <= w[0]) {
                return Err(Error::Config("gain table axes must be nonempty and strictly increasing".into()));
            }
        }
        let gains = gains
            .into_iter()
            .map(|g| {
                assert_eq!((g.nrows(), g.ncols()), (n_u, n_x));
                g.transpose().as_slice().to_vec() // row-major
            })
            .collect();
        Ok(GainTable { axes, gains, n_u, n_x })
    }

    /// Constant-gain table (one grid point per axis).
    pub fn constant(k: &DMatrix<f64>) -> Self {
        let (n_u, n_x) = (k.nrows(), k.ncols());
        GainTable {
            axes: vec![vec![0.0]; n_x],
            gains: vec![k.transpose().as_slice().to_vec()],
            n_u,
            n_x,
        }
    }

    fn gain_at_index(&self, flat: usize) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.n_u, self.n_x, &self.gains[flat])
    }

    /// Multilinearly interpolated gain at a state.
    pub fn value_at(&self, x: &DVector<f64>) -> DMatrix<f64> {
        assert_eq!(x.len(), self.n_x);
        // Per axis: bracketing index and interpolation weight.
        let mut lo = vec![0usize; self.n_x];
        let mut w = vec![0.0f64; self.n_x];
        for d in 0..self.n_x {
            let ax = &self.axes[d];
            if ax.len() == 1 {
                continue;
            }
            let v = x[d].clamp(ax[0], *ax.last().unwrap());
            let mut i = ax.partition_point(|&a| a <= v).saturating_sub(1);
            i = i.min(ax.len() - 2);
            lo[d] = i;
            w[d] = (v - ax[i]) / (ax[i + 1] - ax[i]);
        }
        // Accumulate over the 2^k corners of the active axes.
        let active: Vec<usize> = (0..self.n_x).filter(|&d| self.axes[d].len() > 1).collect();
        let strides = {
            let mut s = vec![1usize; self.n_x];
            for d in (0..self.n_x.saturating_sub(1)).rev() {
                s[d] = s[d + 1] * self.axes[d + 1].len();
            }
            s
        };
        let base: usize = (0..self.n_x).map(|d| lo[d] * strides[d]).sum();
        let mut out = DMatrix::zeros(self.n_u, self.n_x);
        for corner in 0..(1usize << active.len()) {
            let mut weight = 1.0;
            let mut flat = base;
            for (bit, &d) in active.iter().enumerate() {
                if corner >> bit & 1 == 1 {
                    weight *= w[d];
                    flat += strides[d];
                } else {
                    weight *= 1.0 - w[d];
                }
            }
            if weight != 0.0 {
                out += self.gain_at_index(flat) * weight;
            }
        }
        out
    }
}

/// Feedback law used by the tube controllers: either a constant gain about
/// the reference (tracking MPC) or a state-scheduled gain table averaged
/// along the straight-line geodesic.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum FeedbackLaw {
    Constant { k: GainTable },
    Geodesic { k: GainTable },
}

/// 8-point Gauss–Legendre nodes and weights on [0, 1].
const GL8: [(f64, f64); 8] = [
    (0.019855071751231856, 0.05061426814518813),
    (0.10166676129318664, 0.11119051722668724),
    (0.2372337950418355, 0.15685332293894364),
    (0.40828267875217511, 0.18134189168918099),
    (0.59171732124782489, 0.18134189168918099),
    (0.7627662049581645, 0.15685332293894364),
    (0.89833323870681336, 0.11119051722668724),
    (0.98014492824876814, 0.05061426814518813),
];

/// Mean feedback gain along the straight line from `z` to `x`:
/// `∫₀¹ K(z + s(x−z)) ds` by 8-point Gauss–Legendre quadrature. Exact for
/// gains that are (multi)linear along the segment.
pub fn mean_gain(law: &FeedbackLaw, x: &DVector<f64>, z: &DVector<f64>) -> DMatrix<f64> {
    match law {
        FeedbackLaw::Constant { k } => k.gain_at_index(0),
        FeedbackLaw::Geodesic { k } => {
            let diff = x - z;
            let mut acc = DMatrix::zeros(k.n_u, k.n_x);
            for (s, w) in GL8 {
                acc += k.value_at(&(z + &diff * s)) * w;
            }
            acc
        }
    }
}

/// Tube feedback `κ(x, z, v) = v + (mean gain)·(x − z)`.
pub fn feedback_kappa(law: &FeedbackLaw, x: &DVector<f64>, z: &DVector<f64>, v: &DVector<f64>) -> DVector<f64> {
    v + mean_gain(law, x, z) * (x - z)
}

/// Terminal-set margin for the quadratic (tracking) terminal set:
/// `α² − (z − x^r)ᵀ P (z − x^r)`; membership iff the margin is ≥ 0.
pub fn terminal_margin_quadratic(p: &DMatrix<f64>, alpha: f64, z: &DVector<f64>, x_ref: &DVector<f64>) -> f64 {
    alpha * alpha - vdelta(p, z, x_ref)
}

/// Terminal-set margin for the tube terminal sets:
/// `α − √V^δ(z, x^r) − s_T − ε`; membership iff the margin is ≥ 0.
/// Pass `epsilon = 0` for the state-feedback variant.
pub fn terminal_margin_tube(
    pdelta: &DMatrix<f64>,
    alpha: f64,
    z: &DVector<f64>,
    x_ref: &DVector<f64>,
    s_t: f64,
    epsilon: f64,
) -> f64 {
    alpha - sqrt_vdelta(pdelta, z, x_ref) - s_t - epsilon
}

/// Worst (minimum) residual of the tube shift bound
/// `s_{Ts+τ} − e^{−ρτ} s_{Ts} − s_τ ≥ 0` over a grid of τ values.
/// For the closed-form tube this residual is identically zero.
pub fn check_s_bound(rho: f64, wbar: f64, ts: f64, tau_grid: &[f64]) -> f64 {
    assert!(rho > 0.0 && ts >= 0.0);
    let s_ts = tube_size(rho, wbar, ts);
    tau_grid
        .iter()
        .map(|&tau| tube_size(rho, wbar, ts + tau) - (-rho * tau).exp() * s_ts - tube_size(rho, wbar, tau))
        .fold(f64::INFINITY, f64::min)
}

/// Tighten polytope offsets: `l_j ↦ l_j − c_j·s − extra_j`, rows unchanged.
/// Returns the tightened rows and the indices whose offset went negative
/// (a warning sign that the tightened set may be empty).
pub fn tighten_rows(rows: &Polytope, c: &[f64], s: f64, extra: &[f64]) -> (Polytope, Vec<usize>) {
    assert_eq!(rows.rows.len(), c.len());
    assert_eq!(rows.rows.len(), extra.len());
    let mut suspect = Vec::new();
    let tightened = rows
        .rows
        .iter()
        .enumerate()
        .map(|(j, (l, off))| {
            let new_off = off - c[j] * s - extra[j];
            if new_off < 0.0 {
                suspect.push(j);
            }
            (l.clone(), new_off)
        })
        .collect();
    (Polytope::new(tightened), suspect)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::rk4_ode;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn tube_size_examples() {
        assert_eq!(tube_size(1.0, 0.5, 0.0), 0.0);
        assert_abs_diff_eq!(tube_size(1.0, 0.5, 1e3), 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(tube_size(1.0, 0.5, 1.0), 0.5 * (1.0 - (-1.0f64).exp()), epsilon = 1e-12);
        assert_abs_diff_eq!(tube_size(1.0, 0.5, 1.0), 0.316060, epsilon = 1e-6);
    }

    #[test]
    fn tube_matches_rk4() {
        // ṡ = −ρs + w̄ integrated with RK4 vs the closed form over [0, 5/ρ].
        let (rho, wbar) = (0.7, 0.3);
        let t_end = 5.0 / rho;
        let steps = 2000;
        let dt = t_end / steps as f64;
        let mut worst = 0.0f64;
        for k in 0..=steps {
            let t = k as f64 * dt;
            let s_num = rk4_ode(
                |_, s| DVector::from_vec(vec![-rho * s[0] + wbar]),
                0.0,
                &DVector::zeros(1),
                t / 200.0,
                if k == 0 { 0 } else { 200 },
            )[0];
            worst = worst.max((s_num - tube_size(rho, wbar, t)).abs());
        }
        assert!(worst <= 1e-8, "worst deviation {worst:.3e}");
    }

    #[test]
    fn profile_monotone_and_bounded() {
        let times: Vec<f64> = (0..=100).map(|k| k as f64 * 0.1).collect();
        let p = TubeProfile::new(2.0, 0.4, 0.0, times);
        assert!(p.sizes.windows(2).all(|w| w[1] >= w[0]));
        assert!(p.sizes.iter().all(|&s| s <= p.supremum() + 1e-12));
        assert_abs_diff_eq!(p.size_at(0.5), tube_size(2.0, 0.4, 0.5), epsilon = 1e-15);
        // Nonzero initial size decays toward the same limit.
        assert_abs_diff_eq!(tube_size_from(2.0, 0.4, 1.0, 50.0), 0.2, epsilon = 1e-12);
    }

    #[test]
    fn vdelta_examples() {
        let a = DVector::from_vec(vec![3.0, 4.0]);
        let b = DVector::zeros(2);
        assert_eq!(vdelta(&DMatrix::identity(2, 2), &a, &a), 0.0);
        assert_abs_diff_eq!(vdelta(&DMatrix::identity(2, 2), &a, &b), 25.0, epsilon = 1e-14);
        let p = DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 1.0]));
        let one = DVector::from_vec(vec![1.0, 1.0]);
        assert_abs_diff_eq!(vdelta(&p, &one, &b), 3.0, epsilon = 1e-14);
    }

    #[test]
    fn sqrt_vdelta_triangle_and_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        // Random PD metric.
        let m = DMatrix::from_fn(3, 3, |_, _| rng.gen_range(-1.0..1.0));
        let p = &m * m.transpose() + DMatrix::identity(3, 3) * 0.5;
        let eigs = p.symmetric_eigenvalues();
        let (lmin, lmax) = (eigs.min(), eigs.max());
        for _ in 0..10_000 {
            let a = DVector::from_fn(3, |_, _| rng.gen_range(-5.0..5.0));
            let b = DVector::from_fn(3, |_, _| rng.gen_range(-5.0..5.0));
            let c = DVector::from_fn(3, |_, _| rng.gen_range(-5.0..5.0));
            let (ab, bc, ac) = (sqrt_vdelta(&p, &a, &b), sqrt_vdelta(&p, &b, &c), sqrt_vdelta(&p, &a, &c));
            assert!(ac <= ab + bc + 1e-12);
            let d2 = (&a - &b).norm_squared();
            let v = vdelta(&p, &a, &b);
            assert!(v >= lmin * d2 - 1e-9 && v <= lmax * d2 + 1e-9);
        }
    }

    #[test]
    fn feedback_constant_and_identity() {
        let k = DMatrix::from_row_slice(1, 2, &[-1.0, -2.0]);
        let law = FeedbackLaw::Constant { k: GainTable::constant(&k) };
        let z = DVector::from_vec(vec![0.5, -0.5]);
        let v = DVector::from_vec(vec![0.3]);
        // x = z returns v exactly.
        assert_eq!(feedback_kappa(&law, &z, &z, &v), v);
        let x = DVector::from_vec(vec![1.5, 0.5]);
        let u = feedback_kappa(&law, &x, &z, &v);
        assert_abs_diff_eq!(u[0], 0.3 + (-1.0 * 1.0 - 2.0 * 1.0), epsilon = 1e-14);
    }

    #[test]
    fn geodesic_quadrature_exact_for_linear_gain() {
        // Gain linear in x[0] over one cell: K(x) = K0 + x0·(K1 − K0).
        let k0 = DMatrix::from_row_slice(1, 2, &[-1.0, 0.0]);
        let k1 = DMatrix::from_row_slice(1, 2, &[-3.0, 1.0]);
        let table = GainTable::new(
            vec![vec![0.0, 1.0], vec![0.0]],
            vec![k0.clone(), k1.clone()],
            1,
            2,
        )
        .unwrap();
        let law = FeedbackLaw::Geodesic { k: table };
        let z = DVector::from_vec(vec![0.1, 0.0]);
        let x = DVector::from_vec(vec![0.9, 0.0]);
        // Analytic line integral: mean of the endpoint gains.
        let expected = (k0.clone() + (&k1 - &k0) * 0.1 + k0.clone() + (&k1 - &k0) * 0.9) * 0.5;
        let got = mean_gain(&law, &x, &z);
        assert!((got - expected).amax() <= 1e-12);
        // Constant table through the geodesic path reduces to constant K.
        let law_c = FeedbackLaw::Geodesic { k: GainTable::constant(&k0) };
        assert!((mean_gain(&law_c, &x, &z) - &k0).amax() <= 1e-13);
    }

    #[test]
    fn gain_table_interpolation() {
        // 2×2 grid; value at nodes exact, at center the average.
        let gains: Vec<DMatrix<f64>> = (0..4).map(|i| DMatrix::from_element(1, 2, i as f64)).collect();
        let t = GainTable::new(vec![vec![0.0, 1.0], vec![0.0, 1.0]], gains, 1, 2).unwrap();
        assert_abs_diff_eq!(t.value_at(&DVector::from_vec(vec![0.0, 1.0]))[(0, 0)], 1.0, epsilon = 1e-14);
        assert_abs_diff_eq!(t.value_at(&DVector::from_vec(vec![1.0, 0.0]))[(0, 0)], 2.0, epsilon = 1e-14);
        assert_abs_diff_eq!(t.value_at(&DVector::from_vec(vec![0.5, 0.5]))[(0, 0)], 1.5, epsilon = 1e-14);
        // Clamped outside the grid.
        assert_abs_diff_eq!(t.value_at(&DVector::from_vec(vec![2.0, 2.0]))[(0, 0)], 3.0, epsilon = 1e-14);
    }

    #[test]
    fn terminal_margins() {
        let p = DMatrix::identity(2, 2);
        let z = DVector::zeros(2);
        // z = x_ref, s_T = ε = 0 → margin α.
        assert_abs_diff_eq!(terminal_margin_tube(&p, 0.7, &z, &z, 0.0, 0.0), 0.7, epsilon = 1e-15);
        // Boundary: √V^δ = α − s_T → margin 0.
        let x = DVector::from_vec(vec![0.5, 0.0]);
        assert_abs_diff_eq!(terminal_margin_tube(&p, 0.7, &x, &z, 0.2, 0.0), 0.0, epsilon = 1e-14);
        // Quadratic set.
        assert_abs_diff_eq!(terminal_margin_quadratic(&p, 1.0, &x, &z), 0.75, epsilon = 1e-14);
        // Randomized points vs direct recomputation.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let a = DVector::from_fn(2, |_, _| rng.gen_range(-2.0..2.0));
            let direct = 0.9 - ((&a - &z).norm_squared()).sqrt() - 0.1 - 0.05;
            assert!((terminal_margin_tube(&p, 0.9, &a, &z, 0.1, 0.05) - direct).abs() <= 1e-14);
        }
    }

    #[test]
    fn s_bound_identity() {
        // Closed-form tube: the shift bound holds with equality.
        let taus: Vec<f64> = (0..10_000).map(|k| k as f64 * 5.0 / 9_999.0).collect();
        let worst = check_s_bound(1.0, 1.0, 0.1, &taus);
        assert!(worst.abs() <= 1e-12, "worst residual {worst:.3e}");
        assert_abs_diff_eq!(check_s_bound(1.0, 1.0, 0.1, &[0.0]), 0.0, epsilon = 1e-15);
        // RK4-integrated tube in place of the closed form stays within 1e-8.
        let (rho, wbar, ts_shift) = (1.0, 1.0, 0.1);
        let s_num = |t: f64| -> f64 {
            let steps = ((t / 1e-3).ceil() as usize).max(1);
            if t == 0.0 {
                return 0.0;
            }
            rk4_ode(
                |_, s| DVector::from_vec(vec![-rho * s[0] + wbar]),
                0.0,
                &DVector::zeros(1),
                t / steps as f64,
                steps,
            )[0]
        };
        let mut worst_abs = 0.0f64;
        for k in 0..200 {
            let tau = k as f64 * 5.0 / 199.0;
            let r = s_num(ts_shift + tau) - (-rho * tau).exp() * s_num(ts_shift) - s_num(tau);
            worst_abs = worst_abs.max(r.abs());
        }
        assert!(worst_abs <= 1e-8, "worst |residual| {worst_abs:.3e}");
    }

    #[test]
    fn tighten_rows_examples() {
        let p = Polytope::new(vec![(vec![1.0, 0.0], 1.0), (vec![-1.0, 0.0], 1.0)]);
        let (same, warn) = tighten_rows(&p, &[2.0, 2.0], 0.0, &[0.0, 0.0]);
        assert_eq!(same.rows, p.rows);
        assert!(warn.is_empty());
        let (t, warn) = tighten_rows(&p, &[2.0, 2.0], 0.25, &[0.0, 0.0]);
        assert_abs_diff_eq!(t.rows[0].1, 0.5, epsilon = 1e-15);
        assert!(warn.is_empty());
        // Over-tightened rows are flagged.
        let (_, warn) = tighten_rows(&p, &[2.0, 2.0], 0.75, &[0.0, 0.0]);
        assert_eq!(warn, vec![0, 1]);
        // Extra offsets apply per row.
        let (t, _) = tighten_rows(&p, &[1.0, 1.0], 0.1, &[0.2, 0.0]);
        assert_abs_diff_eq!(t.rows[0].1, 0.7, epsilon = 1e-15);
        assert_abs_diff_eq!(t.rows[1].1, 0.9, epsilon = 1e-15);
    }
}
