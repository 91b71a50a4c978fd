//! Offline design pipelines: terminal ingredients for tracking MPC, a
//! contraction metric + tube + tightening constants for robust MPC, and the
//! observer-coupled design for output-feedback MPC. The result is a
//! serializable [`DesignArtifact`] consumed by the online controllers.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::conic::{
    bisect_multiplier, check_lmi, solve_sdp, DecisionLayout, FeasibilitySolver, LmiBlock, SdpProblem,
    SdpStatus, Sense, SolveOptions,
};
use crate::model::{cartesian_grid, grid_axes, BoxSet, Polytope, SystemModel};
use crate::tube::{FeedbackLaw, GainTable};
use crate::{Error, Result};

/// Controller variant an artifact was designed for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Tmpc,
    Rmpc,
    Rompc,
}

/// Row-major JSON encoding for matrices with explicit dimensions.
pub mod matrix_json {
    use nalgebra::DMatrix;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    pub struct MatrixData {
        pub rows: usize,
        pub cols: usize,
        pub data: Vec<f64>,
    }

    pub fn pack(m: &DMatrix<f64>) -> MatrixData {
        MatrixData {
            rows: m.nrows(),
            cols: m.ncols(),
            data: m.transpose().as_slice().to_vec(),
        }
    }

    pub fn unpack(d: MatrixData) -> Result<DMatrix<f64>, String> {
        if d.data.len() != d.rows * d.cols {
            return Err(format!("matrix data length {} != {}×{}", d.data.len(), d.rows, d.cols));
        }
        Ok(DMatrix::from_row_slice(d.rows, d.cols, &d.data))
    }

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
        pack(m).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
        unpack(MatrixData::deserialize(d)?).map_err(serde::de::Error::custom)
    }

    pub mod option {
        use super::*;

        pub fn serialize<S: Serializer>(m: &Option<DMatrix<f64>>, s: S) -> Result<S::Ok, S::Error> {
            m.as_ref().map(pack).serialize(s)
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<DMatrix<f64>>, D::Error> {
            Option::<MatrixData>::deserialize(d)?
                .map(|x| unpack(x).map_err(serde::de::Error::custom))
                .transpose()
        }
    }
}

/// Multipliers entering the invariance LMIs.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct Multipliers {
    pub lambda: f64,
    pub lambda_delta: f64,
    pub lambda_delta_eps: f64,
    pub lambda_eps: f64,
}

/// Worst residual per LMI family on the dense validation grid.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ValidationReport {
    pub families: Vec<(String, f64)>,
}

impl ValidationReport {
    pub fn worst(&self) -> f64 {
        self.families.iter().map(|(_, r)| *r).fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.families.iter().all(|(_, r)| *r <= tol)
    }
}

/// The serialized output of an offline design run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DesignArtifact {
    pub schema: u32,
    pub variant: Variant,
    pub model: String,
    /// Terminal cost matrix.
    #[serde(with = "matrix_json")]
    pub p: DMatrix<f64>,
    /// Terminal tracking feedback (tracking variant only).
    #[serde(with = "matrix_json::option")]
    pub k: Option<DMatrix<f64>>,
    /// Contraction metric.
    #[serde(with = "matrix_json::option")]
    pub pdelta: Option<DMatrix<f64>>,
    /// State-scheduled tube feedback gains.
    pub kdelta: Option<GainTable>,
    pub rho: f64,
    pub wbar: f64,
    pub c_s: Vec<f64>,
    pub c_s_o: Vec<f64>,
    pub c_o: f64,
    pub alpha: f64,
    /// Observer gain (output-feedback variant only).
    #[serde(with = "matrix_json::option")]
    pub l_gain: Option<DMatrix<f64>>,
    pub epsilon: f64,
    pub multipliers: Multipliers,
    /// Stage weights the terminal ingredients were designed against.
    #[serde(with = "matrix_json")]
    pub q_weight: DMatrix<f64>,
    #[serde(with = "matrix_json")]
    pub r_weight: DMatrix<f64>,
    pub eps_reg: f64,
    pub n_u: usize,
    pub validation: ValidationReport,
}

impl DesignArtifact {
    /// Feedback law used by the online controller.
    pub fn feedback_law(&self) -> FeedbackLaw {
        match self.variant {
            Variant::Tmpc => FeedbackLaw::Constant {
                k: GainTable::constant(self.k.as_ref().expect("tracking artifact without gain")),
            },
            _ => FeedbackLaw::Geodesic {
                k: self.kdelta.clone().expect("tube artifact without gain table"),
            },
        }
    }

    /// The metric defining the tube / terminal distance for this variant.
    pub fn metric(&self) -> &DMatrix<f64> {
        match self.variant {
            Variant::Tmpc => &self.p,
            _ => self.pdelta.as_ref().expect("tube artifact without metric"),
        }
    }

    pub fn check_invariants(&self) -> Result<()> {
        if self.schema != 1 {
            return Err(Error::Config(format!("unsupported artifact schema {}", self.schema)));
        }
        let pd = |m: &DMatrix<f64>, name: &str| -> Result<()> {
            if m.nrows() != m.ncols() || m.symmetric_eigenvalues().min() <= 0.0 {
                return Err(Error::Config(format!("{name} must be symmetric positive definite")));
            }
            Ok(())
        };
        pd(&self.p, "p")?;
        if let Some(pd_mat) = &self.pdelta {
            pd(pd_mat, "pdelta")?;
        }
        match self.variant {
            Variant::Tmpc => {}
            Variant::Rmpc => {
                if self.alpha < self.wbar / self.rho - 1e-12 {
                    return Err(Error::Config("alpha below the invariance bound wbar/rho".into()));
                }
            }
            Variant::Rompc => {
                if self.alpha < self.wbar / self.rho + self.epsilon - 1e-12 {
                    return Err(Error::Config("alpha below the invariance bound wbar/rho + epsilon".into()));
                }
            }
        }
        for (j, (&cso, &cs)) in self.c_s_o.iter().zip(self.c_s.iter()).enumerate() {
            if j < 2 * self.n_u && cso != 0.0 {
                return Err(Error::Config(format!("input row {j} must have zero observer tightening")));
            }
            if cso != 0.0 && (cso - cs).abs() > 1e-12 {
                return Err(Error::Config(format!("state row {j} observer tightening must equal c_s")));
            }
        }
        if !self.validation.families.is_empty() && !self.validation.passes(1e-6) {
            return Err(Error::Config(format!(
                "validation residual {:.3e} exceeds 1e-6",
                self.validation.worst()
            )));
        }
        Ok(())
    }

    pub fn to_json_string(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let artifact: DesignArtifact = serde_json::from_str(s)?;
        artifact.check_invariants()?;
        Ok(artifact)
    }
}

/// Linearization grid: per-dimension state sample coordinates (the gain
/// table lives on this grid) together with the input points at which the
/// Jacobians are additionally evaluated.
#[derive(Debug, Clone)]
pub struct SynthGrid {
    pub state_axes: Vec<Vec<f64>>,
    pub input_points: Vec<DVector<f64>>,
}

impl SynthGrid {
    /// Build the grid from the Jacobian dependence pattern of the model.
    pub fn for_model(model: &SystemModel, x_box: &BoxSet, u_box: &BoxSet, points_per_dim: usize) -> Result<Self> {
        Ok(SynthGrid {
            state_axes: grid_axes(x_box, points_per_dim, &model.state_roles)?,
            input_points: crate::model::grid_domain(u_box, points_per_dim, &model.input_roles)?,
        })
    }

    pub fn state_points(&self) -> Vec<DVector<f64>> {
        cartesian_grid(&self.state_axes)
    }

    /// Densify multi-point axes by the given factor (validation grid).
    pub fn densified_state_points(&self, factor: usize) -> Vec<DVector<f64>> {
        let axes: Vec<Vec<f64>> = self
            .state_axes
            .iter()
            .map(|ax| {
                if ax.len() < 2 {
                    ax.clone()
                } else {
                    let (lo, hi) = (ax[0], *ax.last().unwrap());
                    let m = (ax.len() - 1) * factor + 1;
                    (0..m).map(|i| lo + (hi - lo) * i as f64 / (m - 1) as f64).collect()
                }
            })
            .collect();
        cartesian_grid(&axes)
    }
}

/// Objective weights for the tightening-constant synthesis, defaulting to
/// the inverse squared constraint interval per row.
#[derive(Debug, Clone)]
pub struct CostWeights {
    pub rows: Vec<f64>,
    pub obstacle: f64,
}

impl CostWeights {
    pub fn from_rows(system_rows: &Polytope, obstacle_span: f64) -> Self {
        let rows = system_rows
            .rows
            .iter()
            .map(|(_, l)| {
                let width = 2.0 * l.abs().max(1e-6);
                1.0 / (width * width)
            })
            .collect();
        CostWeights { rows, obstacle: 1.0 / (obstacle_span * obstacle_span).max(1e-12) }
    }
}

/// Symmetric positive (semi)definite square root.
fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let se = ((m + m.transpose()) * 0.5).symmetric_eigen();
    let d = se.eigenvalues.map(|l| l.max(0.0).sqrt());
    &se.eigenvectors * DMatrix::from_diagonal(&d) * se.eigenvectors.transpose()
}

/// Symmetric positive definite inverse square root.
fn sym_inv_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let se = ((m + m.transpose()) * 0.5).symmetric_eigen();
    if se.eigenvalues.min() <= 0.0 {
        return Err(Error::Numeric("inverse square root of a non-PD matrix".into()));
    }
    let d = se.eigenvalues.map(|l| 1.0 / l.sqrt());
    Ok(&se.eigenvectors * DMatrix::from_diagonal(&d) * se.eigenvectors.transpose())
}

fn sym_inverse(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let inv = nalgebra::Cholesky::new((m + m.transpose()) * 0.5)
        .ok_or_else(|| Error::Numeric("matrix inverse of a non-PD matrix".into()))?
        .inverse();
    Ok((inv.clone() + inv.transpose()) * 0.5)
}

fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0.0;
    }
    m.clone().svd(false, false).singular_values.max()
}

/// All (state, input) Jacobian pairs of a grid.
fn jacobian_points(model: &SystemModel, grid: &SynthGrid) -> Vec<(usize, DMatrix<f64>, DMatrix<f64>)> {
    let mut out = Vec::new();
    for (i, xs) in grid.state_points().iter().enumerate() {
        for us in &grid.input_points {
            let (a, b) = model.jacobians(xs, us);
            out.push((i, a, b));
        }
    }
    out
}

/// Terminal ingredients for the tracking controller: a constant `(P, K)`
/// solving the tracking LMI (in Schur-complement form) at every grid point,
/// with `P` as close to the stabilizing Riccati solution as the sublevel
/// parameterization allows. Returns `(P, K, worst grid residual)`.
pub fn synth_tmpc_terminal(
    model: &SystemModel,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    epsilon_reg: f64,
    grid: &SynthGrid,
) -> Result<(DMatrix<f64>, DMatrix<f64>, f64)> {
    let (n_x, n_u) = (model.n_x, model.n_u);
    let q_eps = q + DMatrix::identity(n_x, n_x) * epsilon_reg;
    let q_sqrt = sym_sqrt(&q_eps);
    let r_sqrt = sym_sqrt(r);
    let mut layout = DecisionLayout::new();
    layout.add_sym("X", n_x);
    layout.add_rect("Y", n_u, n_x);

    let jacs = jacobian_points(model, grid);
    let base_blocks = |extra_floor: f64| -> Vec<LmiBlock> {
        let mut blocks = Vec::new();
        for (idx, (_, a, b)) in jacs.iter().enumerate() {
            let (a, b) = (a.clone(), b.clone());
            let (qs, rs) = (q_sqrt.clone(), r_sqrt.clone());
            let layout_ref = &layout;
            blocks.push(LmiBlock::from_affine(
                layout_ref,
                Sense::NegSemidef,
                &format!("tracking grid point {idx}"),
                move |t| {
                    let x = layout_ref.get_sym(t, "X");
                    let y = layout_ref.get_rect(t, "Y");
                    let top = &a * &x + &b * &y;
                    let top = &top + top.transpose();
                    let xq = &x * &qs; // (Q^{ε1/2} X)ᵀ
                    let yr = y.transpose() * &rs; // (R^{1/2} Y)ᵀ
                    let dim = n_x + n_x + n_u;
                    let mut m = DMatrix::zeros(dim, dim);
                    m.view_mut((0, 0), (n_x, n_x)).copy_from(&top);
                    m.view_mut((0, n_x), (n_x, n_x)).copy_from(&xq);
                    m.view_mut((n_x, 0), (n_x, n_x)).copy_from(&xq.transpose());
                    m.view_mut((0, 2 * n_x), (n_x, n_u)).copy_from(&yr);
                    m.view_mut((2 * n_x, 0), (n_u, n_x)).copy_from(&yr.transpose());
                    m.view_mut((n_x, n_x), (n_x, n_x))
                        .copy_from(&(-DMatrix::<f64>::identity(n_x, n_x)));
                    m.view_mut((2 * n_x, 2 * n_x), (n_u, n_u))
                        .copy_from(&(-DMatrix::<f64>::identity(n_u, n_u)));
                    m
                },
            ));
        }
        let lref = &layout;
        blocks.push(LmiBlock::from_affine(lref, Sense::PosSemidef, "X lower bound", move |t| {
            lref.get_sym(t, "X") - DMatrix::identity(n_x, n_x) * extra_floor
        }));
        blocks
    };

    let opts = SolveOptions::default();
    // Stage 1: maximize the smallest eigenvalue of X (bisection on the floor).
    let floor_zero = base_blocks(1e-9);
    let solver = FeasibilitySolver::new(layout.len(), &floor_zero)?;
    let (theta0, _, _, ok) = solver.solve(&DVector::zeros(layout.len()), &opts);
    if !ok {
        let (m, tag) = solver.worst_margin(&theta0);
        return Err(Error::Infeasible(format!(
            "tracking terminal synthesis infeasible: '{tag}' margin {m:.3e}"
        )));
    }
    let probe = |t: f64| -> bool {
        let blocks = base_blocks(t);
        match FeasibilitySolver::new(layout.len(), &blocks) {
            Ok(s) => s.solve(&theta0, &opts).3,
            Err(_) => false,
        }
    };
    // Bracket an infeasible upper floor by doubling, then bisect.
    let mut hi = 1.0;
    for _ in 0..60 {
        if !probe(hi) {
            break;
        }
        hi *= 2.0;
    }
    let t_star = bisect_multiplier((0.0, hi), probe, 45)?;

    // Stage 2: at the achieved eigenvalue floor, maximize trace(X) to pin the
    // remaining directions against the Riccati-optimal solution. The optimum
    // sits at a tangency of the trace level set and the LMI cone, where
    // alternating projections slow down, so this stage gets a larger budget.
    let floor = t_star * (1.0 - 1e-9) - 1e-12;
    let problem = SdpProblem {
        objective: layout.sym_diag_indices("X").into_iter().map(|i| (i, -1.0)).collect(),
        blocks: base_blocks(floor),
        layout: layout.clone(),
    };
    let opts = SolveOptions { max_iter: 200_000, stall: 20_000, ..opts };
    let sol = solve_sdp(&problem, &opts)?;
    if sol.status != SdpStatus::Optimal && sol.status != SdpStatus::Feasible {
        return Err(Error::Infeasible("tracking terminal synthesis: trace stage failed".into()));
    }
    let x = layout.get_sym(&sol.values, "X");
    let y = layout.get_rect(&sol.values, "Y");
    let p = sym_inverse(&x)?;
    let k = &y * &p;

    // Residual of the tracking inequality in (P, K) coordinates.
    let mut worst = f64::NEG_INFINITY;
    for (_, a, b) in &jacs {
        let acl = a + b * &k;
        let m = acl.transpose() * &p + &p * acl + &q_eps + k.transpose() * r * &k;
        let (_, margin) = check_lmi(&m, Sense::NegSemidef, 0.0)?;
        worst = worst.max(margin);
    }
    Ok((p, k, worst))
}

/// Tightening constant of one joint `(u, x)` constraint row under a gain:
/// `‖P^{-1/2} (L^u K + L^x)ᵀ‖`.
fn row_constant(p_inv_sqrt: &DMatrix<f64>, k: &DMatrix<f64>, row: &[f64], n_u: usize) -> f64 {
    let n_x = k.ncols();
    let lu = DMatrix::from_row_slice(1, n_u, &row[..n_u]);
    let lx = DMatrix::from_row_slice(1, n_x, &row[n_u..]);
    let combined = &lu * k + lx; // 1 × n_x
    (p_inv_sqrt * combined.transpose()).norm()
}

/// Largest terminal-set scaling `α` such that every tightened constraint row
/// holds throughout the sublevel set, over a set of candidate reference
/// points `r = (u^r, x^r)`. Solved as a one-variable linear program over the
/// per-row ratios.
pub fn compute_alpha_lp(
    p: &DMatrix<f64>,
    k: &DMatrix<f64>,
    reference_points: &[DVector<f64>],
    system_rows: &Polytope,
) -> Result<f64> {
    let n_u = k.nrows();
    let p_inv_sqrt = sym_inv_sqrt(p)?;
    let mut a_rows = Vec::new();
    let mut b_vals = Vec::new();
    for (row, l) in &system_rows.rows {
        let c = row_constant(&p_inv_sqrt, k, row, n_u);
        for r in reference_points {
            let numer = l - DVector::from_row_slice(row).dot(r);
            if numer < -1e-12 {
                return Err(Error::Config(format!(
                    "reference point violates constraint row (margin {numer:.3e}); design inconsistency"
                )));
            }
            if c > 1e-12 {
                a_rows.push(c);
                b_vals.push(numer.max(0.0));
            }
        }
    }
    if a_rows.is_empty() {
        return Err(Error::Config("no constraint row limits the terminal set scaling".into()));
    }
    let a = DMatrix::from_iterator(a_rows.len(), 1, a_rows.iter().copied());
    let b = DVector::from_vec(b_vals);
    let (status, alpha, _) = crate::conic::solve_lp(&DVector::from_vec(vec![1.0]), &a, &b);
    match status {
        crate::conic::LpStatus::Optimal => Ok(alpha.max(0.0)),
        _ => Err(Error::Infeasible("terminal scaling LP did not solve".into())),
    }
}

/// Tightening constants for all system rows (max over the gain table) and
/// the obstacle rows (`‖P^{-1/2} Mᵀ‖`, spectral norm).
pub fn compute_tightening_constants(
    p: &DMatrix<f64>,
    gains: &[DMatrix<f64>],
    system_rows: &Polytope,
    m: &DMatrix<f64>,
) -> Result<(Vec<f64>, f64)> {
    assert!(!gains.is_empty());
    let n_u = gains[0].nrows();
    let p_inv_sqrt = sym_inv_sqrt(p)?;
    let c_s = system_rows
        .rows
        .iter()
        .map(|(row, _)| {
            gains
                .iter()
                .map(|k| row_constant(&p_inv_sqrt, k, row, n_u))
                .fold(0.0, f64::max)
        })
        .collect();
    let c_o = spectral_norm(&(&p_inv_sqrt * m.transpose()));
    Ok((c_s, c_o))
}

/// Metric-weighted disturbance bound `w̄ = max over vertices ‖E w⁰‖_{P^δ}`.
pub fn compute_wbar(pdelta: &DMatrix<f64>, e: &DMatrix<f64>, w: &BoxSet) -> f64 {
    w.vertices()
        .iter()
        .map(|v| {
            let ew = e * v;
            (pdelta * &ew).dot(&ew).max(0.0).sqrt()
        })
        .fold(0.0, f64::max)
}

/// Output of the contraction-metric synthesis.
#[derive(Debug, Clone)]
pub struct CcmResult {
    pub pdelta: DMatrix<f64>,
    pub kdelta: GainTable,
    pub c_s: Vec<f64>,
    pub c_o: f64,
    pub lambda: f64,
    pub objective: f64,
}

/// Contraction-metric synthesis: constant metric `X`, per-grid-point gains
/// `Y_i`, and tightening constants minimizing the weighted squared-constant
/// objective subject to contraction, the split invariance LMI, and both
/// Lipschitz LMIs. `lambda = None` selects the multiplier automatically.
pub fn synth_ccm(
    model: &SystemModel,
    rho: f64,
    lambda: Option<f64>,
    grid: &SynthGrid,
    w_box: &BoxSet,
    system_rows: &Polytope,
    weights: &CostWeights,
) -> Result<CcmResult> {
    let (n_x, n_u) = (model.n_x, model.n_u);
    let n_rows = system_rows.rows.len();
    let state_points = grid.state_points();
    let n_pts = state_points.len();
    let mut layout = DecisionLayout::new();
    layout.add_sym("X", n_x);
    for i in 0..n_pts {
        layout.add_rect(&format!("Y{i}"), n_u, n_x);
    }
    layout.add_sym("Wbar", n_x + 1);
    for j in 0..n_rows {
        layout.add_scalar(&format!("cs2_{j}"));
    }
    layout.add_scalar("co2");

    let jacs = jacobian_points(model, grid);
    let w_vertices = w_box.vertices();
    let e = model.e_mat.clone();
    let m_mat = model.m_mat.clone();

    let build = |lam: f64| -> Vec<LmiBlock> {
        let mut blocks = Vec::new();
        let lref = &layout;
        // Contraction and the grid part of the split invariance LMI.
        for (idx, (i, a, b)) in jacs.iter().enumerate() {
            let yname = format!("Y{i}");
            {
                let (a, b, yname) = (a.clone(), b.clone(), yname.clone());
                blocks.push(LmiBlock::from_affine(lref, Sense::NegSemidef, &format!("contraction {idx}"), move |t| {
                    let x = lref.get_sym(t, "X");
                    let y = lref.get_rect(t, &yname);
                    let top = &a * &x + &b * &y;
                    &top + top.transpose() + x * (2.0 * rho)
                }));
            }
            let (a, b) = (a.clone(), b.clone());
            blocks.push(LmiBlock::from_affine(lref, Sense::NegSemidef, &format!("invariance grid {idx}"), move |t| {
                let x = lref.get_sym(t, "X");
                let y = lref.get_rect(t, &yname);
                let top = &a * &x + &b * &y;
                let top = &top + top.transpose() + x * lam;
                let mut m = lref.get_sym(t, "Wbar");
                let nx = top.nrows();
                {
                    let mut v = m.view_mut((0, 0), (nx, nx));
                    v += top;
                }
                m[(nx, nx)] -= lam; // δ normalized to 1
                m
            }));
        }
        // Vertex part of the split invariance LMI.
        for (vi, w) in w_vertices.iter().enumerate() {
            let ew = &e * w;
            blocks.push(LmiBlock::from_affine(lref, Sense::NegSemidef, &format!("invariance vertex {vi}"), move |t| {
                let mut m = -lref.get_sym(t, "Wbar");
                let nx = ew.len();
                for i in 0..nx {
                    m[(i, nx)] += ew[i];
                    m[(nx, i)] += ew[i];
                }
                m
            }));
        }
        // Lipschitz LMIs for the system rows, per grid point.
        for (j, (row, _)) in system_rows.rows.iter().enumerate() {
            let lu = DMatrix::from_row_slice(1, n_u, &row[..n_u]);
            let lx = DMatrix::from_row_slice(1, n_x, &row[n_u..]);
            for i in 0..n_pts {
                let yname = format!("Y{i}");
                let (lu, lx) = (lu.clone(), lx.clone());
                let cname = format!("cs2_{j}");
                blocks.push(LmiBlock::from_affine(lref, Sense::PosSemidef, &format!("lipschitz row {j} point {i}"), move |t| {
                    let x = lref.get_sym(t, "X");
                    let y = lref.get_rect(t, &yname);
                    let top = &lu * y + &lx * &x; // 1 × n_x
                    let mut m = DMatrix::zeros(n_x + 1, n_x + 1);
                    m[(0, 0)] = lref.get_scalar(t, &cname);
                    m.view_mut((0, 1), (1, n_x)).copy_from(&top);
                    m.view_mut((1, 0), (n_x, 1)).copy_from(&top.transpose());
                    m.view_mut((1, 1), (n_x, n_x)).copy_from(&x);
                    m
                }));
            }
        }
        // Obstacle Lipschitz LMI.
        {
            let m_mat = m_mat.clone();
            let p_dim = m_mat.nrows();
            blocks.push(LmiBlock::from_affine(lref, Sense::PosSemidef, "lipschitz obstacle", move |t| {
                let x = lref.get_sym(t, "X");
                let mx = &m_mat * &x;
                let mut m = DMatrix::zeros(p_dim + n_x, p_dim + n_x);
                let co2 = lref.get_scalar(t, "co2");
                for i in 0..p_dim {
                    m[(i, i)] = co2;
                }
                m.view_mut((0, p_dim), (p_dim, n_x)).copy_from(&mx);
                m.view_mut((p_dim, 0), (n_x, p_dim)).copy_from(&mx.transpose());
                m.view_mut((p_dim, p_dim), (n_x, n_x)).copy_from(&x);
                m
            }));
        }
        blocks.push(LmiBlock::from_affine(lref, Sense::PosSemidef, "X lower bound", move |t| {
            lref.get_sym(t, "X") - DMatrix::identity(n_x, n_x) * 1e-6
        }));
        blocks
    };

    let mut objective: Vec<(usize, f64)> = (0..n_rows)
        .map(|j| (layout.scalar_index(&format!("cs2_{j}")), weights.rows[j]))
        .collect();
    objective.push((layout.scalar_index("co2"), weights.obstacle));

    let opts = SolveOptions::default();
    let solve_at = |lam: f64| -> Result<(f64, DVector<f64>)> {
        let problem = SdpProblem { layout: layout.clone(), objective: objective.clone(), blocks: build(lam) };
        let sol = solve_sdp(&problem, &opts)?;
        match sol.status {
            SdpStatus::Optimal | SdpStatus::Feasible => Ok((sol.objective, sol.values)),
            _ => Err(Error::Infeasible(format!(
                "contraction synthesis infeasible at lambda {lam:.4}, residual {:.3e}",
                sol.worst_residual
            ))),
        }
    };

    let (lam_used, values, objective_value) = match lambda {
        Some(lam) => {
            let (obj, vals) = solve_at(lam)?;
            (lam, vals, obj)
        }
        None => {
            // Largest feasible multiplier by bisection, then evaluate the
            // objective at a few interior fractions of it and keep the best.
            let feasible = |lam: f64| -> bool {
                let blocks = build(lam);
                FeasibilitySolver::new(layout.len(), &blocks)
                    .map(|s| s.solve(&DVector::zeros(layout.len()), &opts).3)
                    .unwrap_or(false)
            };
            let lam_hi = bisect_multiplier((1e-4 * rho, 2.0 * rho), feasible, 30)?;
            let mut best: Option<(f64, f64, DVector<f64>)> = None;
            for frac in [0.4, 0.6, 0.8] {
                let lam = frac * lam_hi;
                if let Ok((obj, vals)) = solve_at(lam) {
                    if best.as_ref().map_or(true, |(o, _, _)| obj < *o) {
                        best = Some((obj, lam, vals));
                    }
                }
            }
            let (obj, lam, vals) =
                best.ok_or_else(|| Error::Infeasible("contraction synthesis infeasible at all multipliers".into()))?;
            (lam, vals, obj)
        }
    };

    let x = layout.get_sym(&values, "X");
    let pdelta = sym_inverse(&x)?;
    let gains: Vec<DMatrix<f64>> = (0..n_pts)
        .map(|i| layout.get_rect(&values, &format!("Y{i}")) * &pdelta)
        .collect();
    // Recompute the tightening constants exactly from the returned design
    // rather than trusting the solver's squared surrogates.
    let (c_s, c_o) = compute_tightening_constants(&pdelta, &gains, system_rows, &model.m_mat)?;
    let kdelta = GainTable::new(grid.state_axes.clone(), gains, n_u, n_x)?;
    Ok(CcmResult { pdelta, kdelta, c_s, c_o, lambda: lam_used, objective: objective_value })
}

/// Terminal cost for the tube controllers: the trace-minimal `P` such that
/// the tube feedback renders the stage cost a Lyapunov decrease certificate
/// at every grid point.
pub fn synth_terminal_cost(
    model: &SystemModel,
    kdelta: &GainTable,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    grid: &SynthGrid,
) -> Result<(DMatrix<f64>, f64)> {
    let n_x = model.n_x;
    let mut layout = DecisionLayout::new();
    layout.add_sym("P", n_x);
    let mut blocks = Vec::new();
    let mut closed_loops = Vec::new();
    for xs in grid.state_points() {
        for us in &grid.input_points {
            let (a, b) = model.jacobians(&xs, us);
            let k = kdelta.value_at(&xs);
            let acl = &a + &b * &k;
            let constant = q + k.transpose() * r * &k;
            closed_loops.push((acl.clone(), constant.clone()));
            let lref = &layout;
            blocks.push(LmiBlock::from_affine(lref, Sense::NegSemidef, "terminal cost", move |t| {
                let p = lref.get_sym(t, "P");
                acl.transpose() * &p + &p * &acl + &constant
            }));
        }
    }
    blocks.push(LmiBlock::from_affine(&layout, Sense::PosSemidef, "P lower bound", |t| {
        layout.get_sym(t, "P") - DMatrix::identity(n_x, n_x) * 1e-9
    }));
    let problem = SdpProblem {
        objective: layout.sym_diag_indices("P").into_iter().map(|i| (i, 1.0)).collect(),
        blocks,
        layout: layout.clone(),
    };
    let sol = solve_sdp(&problem, &SolveOptions::default())?;
    if sol.status != SdpStatus::Optimal && sol.status != SdpStatus::Feasible {
        return Err(Error::Infeasible(
            "terminal cost synthesis infeasible: closed loop insufficiently contractive for Q, R".into(),
        ));
    }
    let p = layout.get_sym(&sol.values, "P");
    let mut worst = f64::NEG_INFINITY;
    for (acl, constant) in &closed_loops {
        let m = acl.transpose() * &p + &p * acl + constant;
        let (_, margin) = check_lmi(&m, Sense::NegSemidef, 0.0)?;
        worst = worst.max(margin);
    }
    Ok((p, worst))
}

/// Output of the output-feedback synthesis.
#[derive(Debug, Clone)]
pub struct RompcResult {
    pub pdelta: DMatrix<f64>,
    pub kdelta: GainTable,
    pub c_s: Vec<f64>,
    pub c_s_o: Vec<f64>,
    pub c_o: f64,
    pub objective: f64,
}

/// Output-feedback contraction synthesis: like [`synth_ccm`] but with the
/// observer-coupled split invariance LMIs (the tube LMI driven by the
/// estimation error, and the estimation-error LMI driven by disturbance and
/// noise) and the ε-weighted objective.
#[allow(clippy::too_many_arguments)]
pub fn synth_rompc(
    model: &SystemModel,
    l_gain: &DMatrix<f64>,
    rho: f64,
    mult: &Multipliers,
    epsilon: f64,
    grid: &SynthGrid,
    w_box: &BoxSet,
    h_box: &BoxSet,
    system_rows: &Polytope,
    weights: &CostWeights,
) -> Result<RompcResult> {
    let (n_x, n_u) = (model.n_x, model.n_u);
    let (lam_d, lam_de, lam_e) = (mult.lambda_delta, mult.lambda_delta_eps, mult.lambda_eps);
    let eps2 = epsilon * epsilon;
    if lam_d < lam_de * eps2 - 1e-12 {
        return Err(Error::Config(format!(
            "multiplier inequality violated: lambda_delta ({lam_d}) < lambda_delta_eps·eps² ({})",
            lam_de * eps2
        )));
    }
    let n_rows = system_rows.rows.len();
    let state_points = grid.state_points();
    let n_pts = state_points.len();
    let mut layout = DecisionLayout::new();
    layout.add_sym("X", n_x);
    for i in 0..n_pts {
        layout.add_rect(&format!("Y{i}"), n_u, n_x);
    }
    layout.add_sym("Hbar", 2 * n_x + 1);
    layout.add_sym("Wbar1", n_x + 1);
    layout.add_sym("Hbar1", n_x + 1);
    for j in 0..n_rows {
        layout.add_scalar(&format!("cs2_{j}"));
    }
    layout.add_scalar("co2");

    let jacs = jacobian_points(model, grid);
    let lc = l_gain * &model.c_mat;
    let lf = l_gain * &model.f_mat;
    let e = model.e_mat.clone();
    let m_mat = model.m_mat.clone();
    let lref = &layout;

    let mut blocks = Vec::new();
    for (idx, (i, a, b)) in jacs.iter().enumerate() {
        let yname = format!("Y{i}");
        {
            let (a, b, yname) = (a.clone(), b.clone(), yname.clone());
            blocks.push(LmiBlock::from_affine(lref, Sense::NegSemidef, &format!("contraction {idx}"), move |t| {
                let x = lref.get_sym(t, "X");
                let y = lref.get_rect(t, &yname);
                let top = &a * &x + &b * &y;
                &top + top.transpose() + x * (2.0 * rho)
            }));
        }
        // Grid part of the split tube LMI.
        {
            let (a, b, yname, lc) = (a.clone(), b.clone(), yname.clone(), lc.clone());
            blocks.push(LmiBlock::from_affine(lref, Sense::NegSemidef, &format!("tube invariance grid {idx}"), move |t| {
                let x = lref.get_sym(t, "X");
                let y = lref.get_rect(t, &yname);
                let top = &a * &x + &b * &y;
                let top = &top + top.transpose() + &x * lam_d;
                let lcx = &lc * &x;
                let mut m = lref.get_sym(t, "Hbar");
                {
                    let mut v = m.view_mut((0, 0), (n_x, n_x));
                    v += top;
                }
                {
                    let mut v = m.view_mut((0, n_x), (n_x, n_x));
                    v += &lcx;
                }
                {
                    let mut v = m.view_mut((n_x, 0), (n_x, n_x));
                    v += lcx.transpose();
                }
                {
                    let mut v = m.view_mut((n_x, n_x), (n_x, n_x));
                    v += &x * (-lam_de);
                }
                m[(2 * n_x, 2 * n_x)] += lam_de * eps2 - lam_d; // δ normalized to 1
                m
            }));
        }
        // Grid part of the split estimation-error LMI.
        {
            let (a, lc) = (a.clone(), lc.clone());
            blocks.push(LmiBlock::from_affine(lref, Sense::NegSemidef, &format!("error invariance grid {idx}"), move |t| {
                let x = lref.get_sym(t, "X");
                let acl = &a - &lc;
                let top = &x * acl.transpose() + acl * &x + &x * lam_e;
                let mut m = lref.get_sym(t, "Wbar1") + lref.get_sym(t, "Hbar1");
                {
                    let mut v = m.view_mut((0, 0), (n_x, n_x));
                    v += top;
                }
                m[(n_x, n_x)] -= lam_e * eps2;
                m
            }));
        }
    }
    // Noise-vertex parts.
    for (vi, eta) in h_box.vertices().iter().enumerate() {
        let lfe = &lf * eta;
        {
            let lfe = lfe.clone();
            blocks.push(LmiBlock::from_affine(lref, Sense::NegSemidef, &format!("tube invariance vertex {vi}"), move |t| {
                let mut m = -lref.get_sym(t, "Hbar");
                for i in 0..n_x {
                    m[(i, 2 * n_x)] += lfe[i];
                    m[(2 * n_x, i)] += lfe[i];
                }
                m
            }));
        }
        blocks.push(LmiBlock::from_affine(lref, Sense::NegSemidef, &format!("error invariance noise vertex {vi}"), move |t| {
            let mut m = -lref.get_sym(t, "Hbar1");
            for i in 0..n_x {
                m[(i, n_x)] -= lfe[i];
                m[(n_x, i)] -= lfe[i];
            }
            m
        }));
    }
    for (vi, w) in w_box.vertices().iter().enumerate() {
        let ew = &e * w;
        blocks.push(LmiBlock::from_affine(lref, Sense::NegSemidef, &format!("error invariance disturbance vertex {vi}"), move |t| {
            let mut m = -lref.get_sym(t, "Wbar1");
            for i in 0..n_x {
                m[(i, n_x)] += ew[i];
                m[(n_x, i)] += ew[i];
            }
            m
        }));
    }
    // Lipschitz LMIs, identical to the state-feedback synthesis.
    for (j, (row, _)) in system_rows.rows.iter().enumerate() {
        let lu = DMatrix::from_row_slice(1, n_u, &row[..n_u]);
        let lx = DMatrix::from_row_slice(1, n_x, &row[n_u..]);
        for i in 0..n_pts {
            let yname = format!("Y{i}");
            let (lu, lx) = (lu.clone(), lx.clone());
            let cname = format!("cs2_{j}");
            blocks.push(LmiBlock::from_affine(lref, Sense::PosSemidef, &format!("lipschitz row {j} point {i}"), move |t| {
                let x = lref.get_sym(t, "X");
                let y = lref.get_rect(t, &yname);
                let top = &lu * y + &lx * &x;
                let mut m = DMatrix::zeros(n_x + 1, n_x + 1);
                m[(0, 0)] = lref.get_scalar(t, &cname);
                m.view_mut((0, 1), (1, n_x)).copy_from(&top);
                m.view_mut((1, 0), (n_x, 1)).copy_from(&top.transpose());
                m.view_mut((1, 1), (n_x, n_x)).copy_from(&x);
                m
            }));
        }
    }
    {
        let m_mat = m_mat.clone();
        let p_dim = m_mat.nrows();
        blocks.push(LmiBlock::from_affine(lref, Sense::PosSemidef, "lipschitz obstacle", move |t| {
            let x = lref.get_sym(t, "X");
            let mx = &m_mat * &x;
            let mut m = DMatrix::zeros(p_dim + n_x, p_dim + n_x);
            let co2 = lref.get_scalar(t, "co2");
            for i in 0..p_dim {
                m[(i, i)] = co2;
            }
            m.view_mut((0, p_dim), (p_dim, n_x)).copy_from(&mx);
            m.view_mut((p_dim, 0), (n_x, p_dim)).copy_from(&mx.transpose());
            m.view_mut((p_dim, p_dim), (n_x, n_x)).copy_from(&x);
            m
        }));
    }
    blocks.push(LmiBlock::from_affine(lref, Sense::PosSemidef, "X lower bound", move |t| {
        lref.get_sym(t, "X") - DMatrix::identity(n_x, n_x) * 1e-6
    }));

    // ε-weighted objective: state-dependent rows and the obstacle constant
    // are tightened by the estimation error too, hence the (1 + ε²) factor.
    let mut objective: Vec<(usize, f64)> = Vec::new();
    for (j, (row, _)) in system_rows.rows.iter().enumerate() {
        let input_row = row[n_u..].iter().all(|&v| v == 0.0);
        let factor = if input_row { 1.0 } else { 1.0 + eps2 };
        objective.push((layout.scalar_index(&format!("cs2_{j}")), weights.rows[j] * factor));
    }
    objective.push((layout.scalar_index("co2"), weights.obstacle * (1.0 + eps2)));

    let problem = SdpProblem { layout: layout.clone(), objective, blocks };
    let sol = solve_sdp(&problem, &SolveOptions::default())?;
    if sol.status != SdpStatus::Optimal && sol.status != SdpStatus::Feasible {
        return Err(Error::Infeasible(format!(
            "output-feedback synthesis infeasible, residual {:.3e}",
            sol.worst_residual
        )));
    }
    let x = layout.get_sym(&sol.values, "X");
    let pdelta = sym_inverse(&x)?;
    let gains: Vec<DMatrix<f64>> = (0..n_pts)
        .map(|i| layout.get_rect(&sol.values, &format!("Y{i}")) * &pdelta)
        .collect();
    let (c_s, c_o) = compute_tightening_constants(&pdelta, &gains, system_rows, &model.m_mat)?;
    let c_s_o = system_rows
        .rows
        .iter()
        .zip(c_s.iter())
        .map(|((row, _), &c)| if row[n_u..].iter().all(|&v| v == 0.0) { 0.0 } else { c })
        .collect();
    let kdelta = GainTable::new(grid.state_axes.clone(), gains, n_u, n_x)?;
    Ok(RompcResult { pdelta, kdelta, c_s, c_s_o, c_o, objective: sol.objective })
}

/// Metric-weighted bound on the effective disturbance seen by the estimated
/// state: `max_η ‖LFη‖_{P^δ} + ‖P^{δ1/2} L C P^{δ−1/2}‖ ε`.
pub fn compute_wbar_o(
    pdelta: &DMatrix<f64>,
    l_gain: &DMatrix<f64>,
    c: &DMatrix<f64>,
    f: &DMatrix<f64>,
    h: &BoxSet,
    epsilon: f64,
) -> Result<f64> {
    let lf = l_gain * f;
    let noise_part = h
        .vertices()
        .iter()
        .map(|eta| {
            let v = &lf * eta;
            (pdelta * &v).dot(&v).max(0.0).sqrt()
        })
        .fold(0.0, f64::max);
    let p_sqrt = sym_sqrt(pdelta);
    let p_inv_sqrt = sym_inv_sqrt(pdelta)?;
    let gain_part = spectral_norm(&(&p_sqrt * l_gain * c * &p_inv_sqrt));
    Ok(noise_part + gain_part * epsilon)
}

/// Output of the observer-gain optimization.
#[derive(Debug, Clone)]
pub struct ObserverResult {
    pub l_gain: DMatrix<f64>,
    pub l_bound: f64,
    pub delta2: f64,
    pub epsilon2: f64,
}

/// Optimize the observer gain at a fixed metric and tube feedback:
/// minimize `λ^{δ,ε}ε² + λ^δδ² + c^l·l²` over `(L, δ², ε², l²)` subject to
/// the tube and estimation-error invariance LMIs (direct vertex × grid
/// enumeration) and the norm-bound LMI certifying
/// `‖P^{δ1/2} L C P^{δ−1/2}‖ ≤ l`.
#[allow(clippy::too_many_arguments)]
pub fn optimize_observer_gain(
    pdelta: &DMatrix<f64>,
    kdelta: &GainTable,
    model: &SystemModel,
    mult: &Multipliers,
    grid: &SynthGrid,
    w_box: &BoxSet,
    h_box: &BoxSet,
    penalty: f64,
) -> Result<ObserverResult> {
    let (n_x, n_y) = (model.n_x, model.n_y);
    let (lam_d, lam_de, lam_e) = (mult.lambda_delta, mult.lambda_delta_eps, mult.lambda_eps);
    let x_fixed = sym_inverse(pdelta)?;
    let p = pdelta.clone();
    let mut layout = DecisionLayout::new();
    layout.add_rect("L", n_x, n_y);
    layout.add_scalar("l2");
    layout.add_scalar("d2");
    layout.add_scalar("e2");
    let lref = &layout;

    let c_mat = model.c_mat.clone();
    let f_mat = model.f_mat.clone();
    let e_mat = model.e_mat.clone();
    let w_vertices = w_box.vertices();
    let h_vertices = h_box.vertices();

    let mut blocks = Vec::new();
    for xs in grid.state_points() {
        for us in &grid.input_points {
            let (a, b) = model.jacobians(&xs, us);
            let k = kdelta.value_at(&xs);
            let y_fixed = &k * &x_fixed;
            let tube_top = {
                let t = &a * &x_fixed + &b * &y_fixed;
                &t + t.transpose() + &x_fixed * lam_d
            };
            // Tube invariance: one block per noise vertex.
            for eta in &h_vertices {
                let (tube_top, c_mat, f_mat, x_fixed, eta) =
                    (tube_top.clone(), c_mat.clone(), f_mat.clone(), x_fixed.clone(), eta.clone());
                blocks.push(LmiBlock::from_affine(lref, Sense::NegSemidef, "tube invariance", move |t| {
                    let l = lref.get_rect(t, "L");
                    let lcx = &l * &c_mat * &x_fixed;
                    let lfe = &l * &f_mat * &eta;
                    let dim = 2 * n_x + 1;
                    let mut m = DMatrix::zeros(dim, dim);
                    m.view_mut((0, 0), (n_x, n_x)).copy_from(&tube_top);
                    m.view_mut((0, n_x), (n_x, n_x)).copy_from(&lcx);
                    m.view_mut((n_x, 0), (n_x, n_x)).copy_from(&lcx.transpose());
                    m.view_mut((n_x, n_x), (n_x, n_x)).copy_from(&(&x_fixed * (-lam_de)));
                    for i in 0..n_x {
                        m[(i, 2 * n_x)] = lfe[i];
                        m[(2 * n_x, i)] = lfe[i];
                    }
                    m[(2 * n_x, 2 * n_x)] = lam_de * lref.get_scalar(t, "e2") - lam_d * lref.get_scalar(t, "d2");
                    m
                }));
            }
            // Estimation-error invariance: disturbance × noise vertices.
            for w in &w_vertices {
                let ew = &e_mat * w;
                for eta in &h_vertices {
                    let (a, c_mat, f_mat, x_fixed, ew, eta) =
                        (a.clone(), c_mat.clone(), f_mat.clone(), x_fixed.clone(), ew.clone(), eta.clone());
                    blocks.push(LmiBlock::from_affine(lref, Sense::NegSemidef, "error invariance", move |t| {
                        let l = lref.get_rect(t, "L");
                        let acl = &a - &l * &c_mat;
                        let top = &x_fixed * acl.transpose() + &acl * &x_fixed + &x_fixed * lam_e;
                        let corner = &ew - &l * &f_mat * &eta;
                        let mut m = DMatrix::zeros(n_x + 1, n_x + 1);
                        m.view_mut((0, 0), (n_x, n_x)).copy_from(&top);
                        for i in 0..n_x {
                            m[(i, n_x)] = corner[i];
                            m[(n_x, i)] = corner[i];
                        }
                        m[(n_x, n_x)] = -lam_e * lref.get_scalar(t, "e2");
                        m
                    }));
                }
            }
        }
    }
    // Norm bound: [[P, P L C],[·, l² P]] ⪰ 0.
    {
        let (p, c_mat) = (p.clone(), c_mat.clone());
        blocks.push(LmiBlock::from_affine(lref, Sense::PosSemidef, "gain norm bound", move |t| {
            let l = lref.get_rect(t, "L");
            let plc = &p * &l * &c_mat;
            let mut m = DMatrix::zeros(2 * n_x, 2 * n_x);
            m.view_mut((0, 0), (n_x, n_x)).copy_from(&p);
            m.view_mut((0, n_x), (n_x, n_x)).copy_from(&plc);
            m.view_mut((n_x, 0), (n_x, n_x)).copy_from(&plc.transpose());
            m.view_mut((n_x, n_x), (n_x, n_x)).copy_from(&(&p * lref.get_scalar(t, "l2")));
            m
        }));
    }
    // Multiplier validity: λ^δ δ² ≥ λ^{δ,ε} ε².
    blocks.push(LmiBlock::from_affine(lref, Sense::PosSemidef, "multiplier validity", move |t| {
        DMatrix::from_element(1, 1, lam_d * lref.get_scalar(t, "d2") - lam_de * lref.get_scalar(t, "e2"))
    }));

    let objective = vec![
        (layout.scalar_index("e2"), lam_de),
        (layout.scalar_index("d2"), lam_d),
        (layout.scalar_index("l2"), penalty),
    ];
    let problem = SdpProblem { layout: layout.clone(), objective, blocks };
    let sol = solve_sdp(&problem, &SolveOptions::default())?;
    if sol.status != SdpStatus::Optimal && sol.status != SdpStatus::Feasible {
        return Err(Error::Infeasible(format!(
            "observer gain optimization infeasible, residual {:.3e}",
            sol.worst_residual
        )));
    }
    let l_gain = layout.get_rect(&sol.values, "L");
    let certified = layout.get_scalar(&sol.values, "l2").max(0.0).sqrt();
    // The certificate must dominate the actual weighted norm up to solver
    // tolerance; the returned bound is the tighter of the two views.
    let actual = spectral_norm(&(sym_sqrt(pdelta) * &l_gain * &model.c_mat * sym_inv_sqrt(pdelta)?));
    if actual > certified + 1e-3 {
        return Err(Error::Numeric(format!(
            "norm bound violated after solve: {actual:.6e} > {certified:.6e}"
        )));
    }
    let l_bound = certified.max(actual);
    Ok(ObserverResult {
        l_gain,
        l_bound,
        delta2: layout.get_scalar(&sol.values, "d2"),
        epsilon2: layout.get_scalar(&sol.values, "e2"),
    })
}

/// Context shared by the design pipelines and validation.
#[derive(Debug, Clone)]
pub struct SynthContext {
    pub model: SystemModel,
    pub grid: SynthGrid,
    pub system_rows: Polytope,
    pub w_box: BoxSet,
    pub h_box: Option<BoxSet>,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub eps_reg: f64,
    pub weights: CostWeights,
}

/// Re-assemble every LMI family of an artifact on a densified grid and
/// record the worst residual per family.
pub fn validate_design(artifact: &DesignArtifact, ctx: &SynthContext, dense_grid_factor: usize) -> Result<ValidationReport> {
    let model = &ctx.model;
    let dense_points = ctx.grid.densified_state_points(dense_grid_factor.max(1));
    let mut families: Vec<(String, f64)> = Vec::new();
    let mut record = |name: &str, value: f64| {
        match families.iter_mut().find(|(n, _)| n == name) {
            Some((_, v)) => *v = v.max(value),
            None => families.push((name.to_string(), value)),
        }
    };
    let q_eps = &ctx.q + DMatrix::identity(model.n_x, model.n_x) * artifact.eps_reg;
    match artifact.variant {
        Variant::Tmpc => {
            let k = artifact.k.as_ref().ok_or_else(|| Error::Config("tmpc artifact missing gain".into()))?;
            for xs in &dense_points {
                for us in &ctx.grid.input_points {
                    let (a, b) = model.jacobians(xs, us);
                    let acl = &a + &b * k;
                    let m = acl.transpose() * &artifact.p + &artifact.p * &acl + &q_eps + k.transpose() * &ctx.r * k;
                    let (_, margin) = check_lmi(&m, Sense::NegSemidef, 0.0)?;
                    record("tracking", margin);
                }
            }
        }
        Variant::Rmpc | Variant::Rompc => {
            let pdelta = artifact.pdelta.as_ref().ok_or_else(|| Error::Config("tube artifact missing metric".into()))?;
            let kdelta = artifact.kdelta.as_ref().ok_or_else(|| Error::Config("tube artifact missing gain table".into()))?;
            let p_inv_sqrt = sym_inv_sqrt(pdelta)?;
            let m0 = &model.m_mat;
            for xs in &dense_points {
                let k = kdelta.value_at(xs);
                for us in &ctx.grid.input_points {
                    let (a, b) = model.jacobians(xs, us);
                    let acl = &a + &b * &k;
                    let contraction =
                        acl.transpose() * pdelta + pdelta * &acl + pdelta * (2.0 * artifact.rho);
                    record("contraction", check_lmi(&contraction, Sense::NegSemidef, 0.0)?.1);
                    // Terminal cost decrease.
                    let jf = acl.transpose() * &artifact.p + &artifact.p * &acl
                        + &ctx.q
                        + k.transpose() * &ctx.r * &k;
                    record("terminal cost", check_lmi(&jf, Sense::NegSemidef, 0.0)?.1);
                    match artifact.variant {
                        Variant::Rmpc => {
                            let lam = artifact.multipliers.lambda;
                            for w in ctx.w_box.vertices() {
                                let ew = &model.e_mat * &w;
                                let mut m = DMatrix::zeros(model.n_x + 1, model.n_x + 1);
                                let top = acl.transpose() * pdelta + pdelta * &acl + pdelta * lam;
                                m.view_mut((0, 0), (model.n_x, model.n_x)).copy_from(&top);
                                let pe = pdelta * &ew;
                                for i in 0..model.n_x {
                                    m[(i, model.n_x)] = pe[i];
                                    m[(model.n_x, i)] = pe[i];
                                }
                                m[(model.n_x, model.n_x)] = -lam;
                                record("invariance", check_lmi(&m, Sense::NegSemidef, 0.0)?.1);
                            }
                        }
                        Variant::Rompc => {
                            let l = artifact.l_gain.as_ref().ok_or_else(|| Error::Config("rompc artifact missing observer gain".into()))?;
                            let h_box = ctx.h_box.as_ref().ok_or_else(|| Error::Config("rompc validation needs a noise box".into()))?;
                            let (lam_d, lam_de, lam_e) = (
                                artifact.multipliers.lambda_delta,
                                artifact.multipliers.lambda_delta_eps,
                                artifact.multipliers.lambda_eps,
                            );
                            let eps2 = artifact.epsilon * artifact.epsilon;
                            let lc = l * &model.c_mat;
                            let plc = pdelta * &lc;
                            // Tube invariance at each noise vertex.
                            for eta in h_box.vertices() {
                                let plfe = pdelta * l * &model.f_mat * &eta;
                                let dim = 2 * model.n_x + 1;
                                let mut m = DMatrix::zeros(dim, dim);
                                let top = acl.transpose() * pdelta + pdelta * &acl + pdelta * lam_d;
                                m.view_mut((0, 0), (model.n_x, model.n_x)).copy_from(&top);
                                m.view_mut((0, model.n_x), (model.n_x, model.n_x)).copy_from(&plc);
                                m.view_mut((model.n_x, 0), (model.n_x, model.n_x)).copy_from(&plc.transpose());
                                m.view_mut((model.n_x, model.n_x), (model.n_x, model.n_x))
                                    .copy_from(&(pdelta * (-lam_de)));
                                for i in 0..model.n_x {
                                    m[(i, 2 * model.n_x)] = plfe[i];
                                    m[(2 * model.n_x, i)] = plfe[i];
                                }
                                m[(2 * model.n_x, 2 * model.n_x)] = lam_de * eps2 - lam_d;
                                record("tube invariance", check_lmi(&m, Sense::NegSemidef, 0.0)?.1);
                            }
                            // Estimation-error invariance.
                            let aobs = &a - &lc;
                            for w in ctx.w_box.vertices() {
                                let ew = &model.e_mat * &w;
                                for eta in h_box.vertices() {
                                    let corner = pdelta * (&ew - l * &model.f_mat * &eta);
                                    let mut m = DMatrix::zeros(model.n_x + 1, model.n_x + 1);
                                    let top = aobs.transpose() * pdelta + pdelta * &aobs + pdelta * lam_e;
                                    m.view_mut((0, 0), (model.n_x, model.n_x)).copy_from(&top);
                                    for i in 0..model.n_x {
                                        m[(i, model.n_x)] = corner[i];
                                        m[(model.n_x, i)] = corner[i];
                                    }
                                    m[(model.n_x, model.n_x)] = -lam_e * eps2;
                                    record("error invariance", check_lmi(&m, Sense::NegSemidef, 0.0)?.1);
                                }
                            }
                        }
                        Variant::Tmpc => unreachable!(),
                    }
                }
                // Lipschitz constants: recomputed at the dense point must not
                // exceed the artifact's recorded constants.
                for (j, (row, _)) in ctx.system_rows.rows.iter().enumerate() {
                    let c = row_constant(&p_inv_sqrt, &k, row, model.n_u);
                    record("lipschitz rows", c - artifact.c_s[j]);
                }
                record("lipschitz obstacle", spectral_norm(&(&p_inv_sqrt * m0.transpose())) - artifact.c_o);
            }
        }
    }
    Ok(ValidationReport { families })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{double_integrator_2d, scalar_integrator, system_rows_from_boxes};
    use approx::assert_abs_diff_eq;
    use std::sync::Arc;

    /// Continuous-time algebraic Riccati solution by Kleinman–Newton
    /// iteration; Lyapunov equations solved via Kronecker vectorization.
    fn riccati(a: &DMatrix<f64>, b: &DMatrix<f64>, q: &DMatrix<f64>, r: &DMatrix<f64>, k0: &DMatrix<f64>) -> DMatrix<f64> {
        let n = a.nrows();
        let r_inv = sym_inverse(r).unwrap();
        let mut k = k0.clone();
        let mut p = DMatrix::zeros(n, n);
        for _ in 0..60 {
            let acl = a - b * &k;
            // Solve aclᵀP + P·acl = −(Q + KᵀRK).
            let rhs_mat = -(q + k.transpose() * r * &k);
            let eye = DMatrix::<f64>::identity(n, n);
            let lhs = acl.transpose().kronecker(&eye) + eye.kronecker(&acl.transpose());
            let rhs = DVector::from_column_slice(rhs_mat.as_slice());
            let sol = lhs.lu().solve(&rhs).unwrap();
            p = DMatrix::from_column_slice(n, n, sol.as_slice());
            p = (&p + p.transpose()) * 0.5;
            let k_new = &r_inv * b.transpose() * &p;
            if (&k_new - &k).amax() < 1e-13 {
                k = k_new;
                break;
            }
            k = k_new;
        }
        let _ = k;
        p
    }

    fn eye(n: usize) -> DMatrix<f64> {
        DMatrix::identity(n, n)
    }

    fn full_box(model: &SystemModel) -> (BoxSet, BoxSet) {
        (
            BoxSet::symmetric(vec![1.0; model.n_x]),
            BoxSet::symmetric(vec![1.0; model.n_u]),
        )
    }

    #[test]
    fn tmpc_terminal_scalar_integrator() {
        let model = scalar_integrator();
        let (xb, ub) = full_box(&model);
        let grid = SynthGrid::for_model(&model, &xb, &ub, 2).unwrap();
        let (p, k, residual) = synth_tmpc_terminal(&model, &eye(1), &eye(1), 0.0, &grid).unwrap();
        // Riccati: P² = Q·R → P = 1, K = −R⁻¹BᵀP = −1.
        assert_abs_diff_eq!(p[(0, 0)], 1.0, epsilon = 1e-4);
        assert_abs_diff_eq!(k[(0, 0)], -1.0, epsilon = 1e-3);
        assert!(residual <= 1e-6, "residual {residual:.3e}");
    }

    #[test]
    fn tmpc_terminal_double_integrator_matches_riccati() {
        let model = double_integrator_2d();
        let (xb, ub) = full_box(&model);
        let grid = SynthGrid::for_model(&model, &xb, &ub, 2).unwrap();
        let (p, _k, residual) = synth_tmpc_terminal(&model, &eye(4), &eye(2), 0.0, &grid).unwrap();
        let (a, b) = model.jacobians(&DVector::zeros(4), &DVector::zeros(2));
        // Stabilizing initial gain for the Kleinman iteration.
        let k0 = DMatrix::from_row_slice(2, 4, &[1.0, 0.0, 1.5, 0.0, 0.0, 1.0, 0.0, 1.5]);
        let p_are = riccati(&a, &(-(&b)), &eye(4), &eye(2), &(-(&k0)));
        // Sign convention: with acl = a − b·(−k0) the iteration above expects
        // the standard (A, B); rebuild directly.
        let p_are2 = riccati(&a, &b, &eye(4), &eye(2), &k0);
        let _ = p_are;
        let err = (&p - &p_are2).norm();
        assert!(err <= 1e-4, "Frobenius error vs Riccati {err:.3e}\np={p}\np_are={p_are2}");
        assert!(residual <= 1e-6);
    }

    #[test]
    fn alpha_lp_examples() {
        // Scalar integrator rows over (u, x): |u| ≤ 1, |x| ≤ 1.
        let rows = system_rows_from_boxes(&BoxSet::symmetric(vec![1.0]), &BoxSet::symmetric(vec![1.0]));
        let origin = vec![DVector::zeros(2)];
        // P = 1, K = −0.5: input rows c = 0.5, state rows c = 1 → α = 1.
        let alpha = compute_alpha_lp(&eye(1), &DMatrix::from_element(1, 1, -0.5), &origin, &rows).unwrap();
        assert_abs_diff_eq!(alpha, 1.0, epsilon = 1e-10);
        // K = 0, only the state box binds → α = 1.
        let alpha = compute_alpha_lp(&eye(1), &DMatrix::zeros(1, 1), &origin, &rows).unwrap();
        assert_abs_diff_eq!(alpha, 1.0, epsilon = 1e-10);
        // P = 4 scales the ratio by ‖P^{-1/2}‖ = 1/2 → α = 2.
        let rows_x = system_rows_from_boxes(&BoxSet::symmetric(vec![f64::INFINITY]), &BoxSet::symmetric(vec![1.0]));
        let alpha = compute_alpha_lp(&DMatrix::from_element(1, 1, 4.0), &DMatrix::zeros(1, 1), &origin, &rows_x).unwrap();
        assert_abs_diff_eq!(alpha, 2.0, epsilon = 1e-10);
        // Reference point outside its own constraint is a design error.
        let bad_ref = vec![DVector::from_vec(vec![0.0, 2.0])];
        assert!(compute_alpha_lp(&eye(1), &DMatrix::zeros(1, 1), &bad_ref, &rows).is_err());
    }

    #[test]
    fn tightening_constant_examples() {
        // P = I, K = 0, row selecting x₁ → c = 1.
        let rows = system_rows_from_boxes(&BoxSet::symmetric(vec![1.0]), &BoxSet::symmetric(vec![1.0]));
        let (c_s, _) = compute_tightening_constants(&eye(1), &[DMatrix::zeros(1, 1)], &rows, &DMatrix::zeros(0, 1)).unwrap();
        // Rows: +u, −u, +x, −x → input rows 0, state rows 1.
        assert_eq!(c_s, vec![0.0, 0.0, 1.0, 1.0]);
        // P = I, K = −I, input row → c = ‖K row‖ = 1.
        let (c_s, _) = compute_tightening_constants(&eye(1), &[DMatrix::from_element(1, 1, -1.0)], &rows, &DMatrix::zeros(0, 1)).unwrap();
        assert_abs_diff_eq!(c_s[0], 1.0, epsilon = 1e-14);
        // P = diag(4, 1), M = [1 0] → c^o = 0.5.
        let p = DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 1.0]));
        let m = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
        let rows2 = system_rows_from_boxes(&BoxSet::symmetric(vec![1.0]), &BoxSet::symmetric(vec![1.0, 1.0]));
        let (_, c_o) = compute_tightening_constants(&p, &[DMatrix::zeros(1, 2)], &rows2, &m).unwrap();
        assert_abs_diff_eq!(c_o, 0.5, epsilon = 1e-12);
    }

    #[test]
    fn wbar_examples() {
        let p2 = eye(2);
        let e2 = eye(2);
        assert_eq!(compute_wbar(&p2, &e2, &BoxSet::symmetric(vec![0.0, 0.0])), 0.0);
        assert_abs_diff_eq!(
            compute_wbar(&p2, &e2, &BoxSet::symmetric(vec![0.1, 0.1])),
            0.02f64.sqrt(),
            epsilon = 1e-12
        );
        let p1 = DMatrix::from_element(1, 1, 4.0);
        assert_abs_diff_eq!(compute_wbar(&p1, &eye(1), &BoxSet::symmetric(vec![0.5])), 1.0, epsilon = 1e-12);
        // Homogeneity: scaling W scales w̄ exactly.
        let w1 = compute_wbar(&p2, &e2, &BoxSet::symmetric(vec![0.3, 0.2]));
        let w3 = compute_wbar(&p2, &e2, &BoxSet::symmetric(vec![0.9, 0.6]));
        assert_abs_diff_eq!(w3, 3.0 * w1, epsilon = 1e-14);
    }

    #[test]
    fn ccm_scalar_integrator() {
        let model = scalar_integrator();
        let rows = system_rows_from_boxes(&BoxSet::symmetric(vec![1.0]), &BoxSet::symmetric(vec![1.0]));
        let (xb, ub) = full_box(&model);
        let grid = SynthGrid::for_model(&model, &xb, &ub, 2).unwrap();
        let weights = CostWeights::from_rows(&rows, 2.0);
        let w_box = BoxSet::symmetric(vec![0.1]);
        let res = synth_ccm(&model, 1.0, Some(1.0), &grid, &w_box, &rows, &weights).unwrap();
        let p = res.pdelta[(0, 0)];
        let k = res.kdelta.value_at(&DVector::zeros(1))[(0, 0)];
        // Contraction 2kX + 2ρX ⪯ 0 forces k ≤ −ρ = −1.
        assert!(k <= -1.0 + 1e-6, "gain {k}");
        // Input-row tightening constant equals |k|·P^{-1/2}.
        assert_abs_diff_eq!(res.c_s[0], k.abs() / p.sqrt(), epsilon = 1e-10);
        // Contraction residual in metric coordinates.
        let resid = 2.0 * k * p + 2.0 * 1.0 * p;
        assert!(resid <= 1e-6);
    }

    #[test]
    fn ccm_zero_disturbance_multiplier_sweep() {
        // With W = {0} the invariance LMI reduces to a contraction-type
        // feasibility condition for any λ in (0, 2ρ].
        let model = scalar_integrator();
        let rows = system_rows_from_boxes(&BoxSet::symmetric(vec![1.0]), &BoxSet::symmetric(vec![1.0]));
        let (xb, ub) = full_box(&model);
        let grid = SynthGrid::for_model(&model, &xb, &ub, 2).unwrap();
        let weights = CostWeights::from_rows(&rows, 2.0);
        let w_box = BoxSet::symmetric(vec![0.0]);
        for lam in [0.2, 1.0, 2.0] {
            assert!(
                synth_ccm(&model, 1.0, Some(lam), &grid, &w_box, &rows, &weights).is_ok(),
                "lambda {lam} should be feasible with zero disturbance"
            );
        }
    }

    #[test]
    fn terminal_cost_scalar_and_scaling() {
        let model = scalar_integrator();
        let (xb, ub) = full_box(&model);
        let grid = SynthGrid::for_model(&model, &xb, &ub, 2).unwrap();
        let k = GainTable::constant(&DMatrix::from_element(1, 1, -1.0));
        // −2P + Q + K²R = −2P + 2 ⪯ 0 → trace-minimal P = 1.
        let (p, residual) = synth_terminal_cost(&model, &k, &eye(1), &eye(1), &grid).unwrap();
        assert_abs_diff_eq!(p[(0, 0)], 1.0, epsilon = 1e-6);
        assert!(residual <= 1e-6);
        // Scaling Q, R by 4 scales P by 4.
        let (p4, _) = synth_terminal_cost(&model, &k, &(eye(1) * 4.0), &(eye(1) * 4.0), &grid).unwrap();
        assert_abs_diff_eq!(p4[(0, 0)], 4.0 * p[(0, 0)], epsilon = 1e-5);
    }

    /// Stable scalar system with no control authority: with L = 0 and no
    /// noise the output-feedback LMIs coincide family-by-family with the
    /// state-feedback ones.
    fn stable_scalar() -> SystemModel {
        let mut m = scalar_integrator();
        m.name = "stable-scalar".into();
        m.f = Arc::new(|x: &DVector<f64>, _u: &DVector<f64>| DVector::from_vec(vec![-x[0]]));
        m.jac = Arc::new(|_x: &DVector<f64>, _u: &DVector<f64>| {
            (DMatrix::from_element(1, 1, -1.0), DMatrix::zeros(1, 1))
        });
        m
    }

    #[test]
    fn rompc_reduces_to_ccm_without_observer_coupling() {
        let model = stable_scalar();
        let rows = system_rows_from_boxes(&BoxSet::symmetric(vec![1.0]), &BoxSet::symmetric(vec![1.0]));
        let (xb, ub) = full_box(&model);
        let grid = SynthGrid::for_model(&model, &xb, &ub, 2).unwrap();
        let weights = CostWeights::from_rows(&rows, 2.0);
        let w_box = BoxSet::symmetric(vec![0.05]);
        let h_box = BoxSet::symmetric(vec![0.0]);
        let rho = 0.5;
        let lam = 0.8;
        let ccm = synth_ccm(&model, rho, Some(lam), &grid, &w_box, &rows, &weights).unwrap();
        let mult = Multipliers { lambda: 0.0, lambda_delta: lam, lambda_delta_eps: lam, lambda_eps: lam };
        let rompc = synth_rompc(
            &model,
            &DMatrix::zeros(1, 1),
            rho,
            &mult,
            1.0,
            &grid,
            &w_box,
            &h_box,
            &rows,
            &weights,
        )
        .unwrap();
        // The two problems are solved through differently shaped block
        // splittings, so the numerical optima agree only to solver accuracy.
        let rel = (rompc.pdelta[(0, 0)] - ccm.pdelta[(0, 0)]).abs() / ccm.pdelta[(0, 0)];
        assert!(rel < 1e-2, "metric mismatch: rel {rel:.3e}");
        let obj_rel = (rompc.objective - ccm.objective).abs() / ccm.objective.abs().max(1.0);
        assert!(obj_rel < 1e-2, "objective mismatch: rel {obj_rel:.3e}");
        // Input rows carry no observer tightening.
        assert_eq!(rompc.c_s_o[0], 0.0);
        assert_eq!(rompc.c_s_o[1], 0.0);
        assert_abs_diff_eq!(rompc.c_s_o[2], rompc.c_s[2], epsilon = 1e-15);
    }

    #[test]
    fn rompc_multiplier_precondition() {
        let model = scalar_integrator();
        let rows = system_rows_from_boxes(&BoxSet::symmetric(vec![1.0]), &BoxSet::symmetric(vec![1.0]));
        let (xb, ub) = full_box(&model);
        let grid = SynthGrid::for_model(&model, &xb, &ub, 2).unwrap();
        let weights = CostWeights::from_rows(&rows, 2.0);
        let mult = Multipliers { lambda: 0.0, lambda_delta: 0.1, lambda_delta_eps: 1.0, lambda_eps: 0.5 };
        // λ^δ δ² < λ^{δ,ε} ε² must be rejected before solving.
        let err = synth_rompc(
            &model,
            &eye(1),
            1.0,
            &mult,
            1.0,
            &grid,
            &BoxSet::symmetric(vec![0.05]),
            &BoxSet::symmetric(vec![0.01]),
            &rows,
            &weights,
        );
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn wbar_o_examples() {
        let p = eye(2);
        let c = eye(2);
        let f = eye(2);
        let h = BoxSet::symmetric(vec![0.1, 0.1]);
        assert_eq!(compute_wbar_o(&p, &DMatrix::zeros(2, 2), &c, &f, &h, 0.5).unwrap(), 0.0);
        assert_abs_diff_eq!(
            compute_wbar_o(&p, &eye(2), &c, &f, &h, 0.0).unwrap(),
            0.02f64.sqrt(),
            epsilon = 1e-12
        );
        let h0 = BoxSet::symmetric(vec![0.0, 0.0]);
        assert_abs_diff_eq!(compute_wbar_o(&p, &eye(2), &c, &f, &h0, 0.3).unwrap(), 0.3, epsilon = 1e-12);
    }

    #[test]
    fn observer_norm_lmi_cases() {
        // P = I, LC = I, l = 1: block matrix PSD with min eigenvalue 0.
        let n = 2;
        let mut m = DMatrix::zeros(2 * n, 2 * n);
        m.view_mut((0, 0), (n, n)).copy_from(&eye(n));
        m.view_mut((0, n), (n, n)).copy_from(&eye(n));
        m.view_mut((n, 0), (n, n)).copy_from(&eye(n));
        m.view_mut((n, n), (n, n)).copy_from(&eye(n));
        let (ok, margin) = check_lmi(&m, Sense::PosSemidef, 1e-12).unwrap();
        assert!(ok);
        assert_abs_diff_eq!(margin, 0.0, epsilon = 1e-12);
        // l strictly below the norm makes the block infeasible.
        let mut m2 = m.clone();
        m2.view_mut((n, n), (n, n)).copy_from(&(eye(n) * 0.81)); // l = 0.9 < 1
        let (ok, _) = check_lmi(&m2, Sense::PosSemidef, 1e-9).unwrap();
        assert!(!ok);
    }

    #[test]
    fn observer_gain_scalar() {
        // Scalar stable system: the SDP must return a gain whose certified
        // norm bound dominates the true weighted norm.
        let model = stable_scalar();
        let (xb, ub) = full_box(&model);
        let grid = SynthGrid::for_model(&model, &xb, &ub, 2).unwrap();
        let pdelta = eye(1);
        let kdelta = GainTable::constant(&DMatrix::zeros(1, 1));
        let mult = Multipliers { lambda: 0.0, lambda_delta: 0.8, lambda_delta_eps: 0.8, lambda_eps: 0.8 };
        let res = optimize_observer_gain(
            &pdelta,
            &kdelta,
            &model,
            &mult,
            &grid,
            &BoxSet::symmetric(vec![0.05]),
            &BoxSet::symmetric(vec![0.01]),
            1.0,
        )
        .unwrap();
        let actual = (res.l_gain[(0, 0)]).abs(); // P = I, C = 1
        assert!(actual <= res.l_bound + 1e-8);
        assert!(res.epsilon2 >= 0.0 && res.delta2 >= 0.0);
        // The multiplier validity constraint holds at the solution.
        assert!(mult.lambda_delta * res.delta2 >= mult.lambda_delta_eps * res.epsilon2 - 1e-8);
    }

    #[test]
    fn artifact_roundtrip_and_invariants() {
        let artifact = DesignArtifact {
            schema: 1,
            variant: Variant::Rmpc,
            model: "scalar-integrator".into(),
            p: eye(1),
            k: None,
            pdelta: Some(eye(1) * 2.0),
            kdelta: Some(GainTable::constant(&DMatrix::from_element(1, 1, -1.0))),
            rho: 1.0,
            wbar: 0.5,
            c_s: vec![1.0, 1.0, 0.5, 0.5],
            c_s_o: vec![0.0; 4],
            c_o: 0.5,
            alpha: 0.5,
            l_gain: None,
            epsilon: 0.0,
            multipliers: Multipliers { lambda: 1.0, ..Default::default() },
            q_weight: eye(1),
            r_weight: eye(1),
            eps_reg: 0.0,
            n_u: 1,
            validation: ValidationReport { families: vec![("contraction".into(), -0.1)] },
        };
        let json = artifact.to_json_string().unwrap();
        let back = DesignArtifact::from_json_str(&json).unwrap();
        assert_eq!(back.variant, Variant::Rmpc);
        assert_abs_diff_eq!(back.pdelta.unwrap()[(0, 0)], 2.0, epsilon = 1e-15);
        // Alpha below the invariance bound is rejected on load.
        let mut bad = artifact.clone();
        bad.alpha = 0.4;
        let json = bad.to_json_string().unwrap();
        assert!(DesignArtifact::from_json_str(&json).is_err());
        // Non-PD metric is rejected.
        let mut bad = artifact.clone();
        bad.pdelta = Some(eye(1) * -1.0);
        assert!(DesignArtifact::from_json_str(&bad.to_json_string().unwrap()).is_err());
    }
}
