//! Plant dynamics, reference trajectories, constraint sets, and numerical
//! integration.
//!
//! Models are registered by name (`"double_integrator_2d"`, `"unicycle"`,
//! `"scalar_integrator"`) and carry their structural matrices `E` (disturbance
//! selection), `C` (observation), `F` (noise selection), and `M` (position
//! selector) alongside the dynamics and Jacobian evaluators.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::{Error, Result};

/// How a state or input dimension enters the dynamics Jacobians.
///
/// Dimensions absent from the Jacobians can be fixed to zero when gridding,
/// dimensions entering linearly only need their extreme values, and
/// nonlinear dimensions need a uniform grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DimRole {
    /// The Jacobians do not depend on this dimension at all.
    Absent,
    /// The Jacobians are affine in this dimension.
    Linear,
    /// The Jacobians depend nonlinearly on this dimension.
    Nonlinear,
}

pub type DynFn = dyn Fn(&DVector<f64>, &DVector<f64>) -> DVector<f64> + Send + Sync;
pub type JacFn = dyn Fn(&DVector<f64>, &DVector<f64>) -> (DMatrix<f64>, DMatrix<f64>) + Send + Sync;

/// A continuous-time control-affine plant with its structural matrices.
#[derive(Clone)]
pub struct SystemModel {
    pub name: String,
    pub n_x: usize,
    pub n_u: usize,
    pub n_w: usize,
    pub n_y: usize,
    pub n_eta: usize,
    pub n_p: usize,
    /// State derivative map `f(x, u)`.
    pub f: Arc<DynFn>,
    /// Jacobians `(∂f/∂x, ∂f/∂u)` at a point.
    pub jac: Arc<JacFn>,
    /// Disturbance selection matrix (`n_x × n_w`).
    pub e_mat: DMatrix<f64>,
    /// Observation matrix (`n_y × n_x`).
    pub c_mat: DMatrix<f64>,
    /// Noise selection matrix (`n_y × n_eta`).
    pub f_mat: DMatrix<f64>,
    /// Position selector (`n_p × n_x`).
    pub m_mat: DMatrix<f64>,
    /// Constant disturbance offset `w^b`.
    pub w_bias: DVector<f64>,
    /// Jacobian dependence of each state dimension.
    pub state_roles: Vec<DimRole>,
    /// Jacobian dependence of each input dimension.
    pub input_roles: Vec<DimRole>,
}

impl std::fmt::Debug for SystemModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SystemModel")
            .field("name", &self.name)
            .field("n_x", &self.n_x)
            .field("n_u", &self.n_u)
            .finish()
    }
}

impl SystemModel {
    /// State derivative `f(x, u)`, optionally with an additive disturbance
    /// `E·w`.
    pub fn eval_dynamics(
        &self,
        x: &DVector<f64>,
        u: &DVector<f64>,
        w: Option<&DVector<f64>>,
    ) -> Result<DVector<f64>> {
        if x.len() != self.n_x || u.len() != self.n_u {
            return Err(Error::Config(format!(
                "dynamics argument dims ({}, {}) do not match model {} ({}, {})",
                x.len(),
                u.len(),
                self.name,
                self.n_x,
                self.n_u
            )));
        }
        let mut dx = (self.f)(x, u);
        if let Some(w) = w {
            if w.len() != self.n_w {
                return Err(Error::Config(format!(
                    "disturbance dim {} does not match model {} (n_w = {})",
                    w.len(),
                    self.name,
                    self.n_w
                )));
            }
            dx += &self.e_mat * w;
        }
        Ok(dx)
    }

    /// Dynamics Jacobians `(A, B) = (∂f/∂x, ∂f/∂u)` at a state-input point.
    pub fn jacobians(&self, x: &DVector<f64>, u: &DVector<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
        (self.jac)(x, u)
    }

    /// Measured output `y = Cx + Fη`.
    pub fn output_measure(&self, x: &DVector<f64>, eta: &DVector<f64>) -> Result<DVector<f64>> {
        if x.len() != self.n_x || eta.len() != self.n_eta {
            return Err(Error::Config(format!(
                "output argument dims ({}, {}) do not match model {} ({}, {})",
                x.len(),
                eta.len(),
                self.name,
                self.n_x,
                self.n_eta
            )));
        }
        Ok(&self.c_mat * x + &self.f_mat * eta)
    }

    /// Replace the constant disturbance offset.
    pub fn with_w_bias(mut self, w_bias: DVector<f64>) -> Self {
        assert_eq!(w_bias.len(), self.n_w);
        self.w_bias = w_bias;
        self
    }

    /// One fixed-step RK4 integration step of the disturbed dynamics with the
    /// input and disturbance held constant, subdivided into `substeps`
    /// internal steps.
    pub fn integrate_step(
        &self,
        x: &DVector<f64>,
        u: &DVector<f64>,
        w: Option<&DVector<f64>>,
        dt: f64,
        substeps: usize,
    ) -> Result<DVector<f64>> {
        assert!(dt > 0.0, "integrate_step requires dt > 0");
        let n = substeps.max(1);
        let h = dt / n as f64;
        let mut state = x.clone();
        for _ in 0..n {
            let k1 = self.eval_dynamics(&state, u, w)?;
            let k2 = self.eval_dynamics(&(&state + &k1 * (h / 2.0)), u, w)?;
            let k3 = self.eval_dynamics(&(&state + &k2 * (h / 2.0)), u, w)?;
            let k4 = self.eval_dynamics(&(&state + &k3 * h), u, w)?;
            state += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        }
        if let Some(i) = state.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite state component {i} after integration step"
            )));
        }
        Ok(state)
    }
}

/// Generic fixed-step RK4 integration of `ẋ = f(t, x)` over `steps` steps of
/// size `dt`, returning the final state.
pub fn rk4_ode<F>(f: F, t0: f64, x0: &DVector<f64>, dt: f64, steps: usize) -> DVector<f64>
where
    F: Fn(f64, &DVector<f64>) -> DVector<f64>,
{
    let mut x = x0.clone();
    let mut t = t0;
    for _ in 0..steps {
        let k1 = f(t, &x);
        let k2 = f(t + dt / 2.0, &(&x + &k1 * (dt / 2.0)));
        let k3 = f(t + dt / 2.0, &(&x + &k2 * (dt / 2.0)));
        let k4 = f(t + dt, &(&x + &k3 * dt));
        x += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0);
        t += dt;
    }
    x
}

/// Look up a registered model by name.
pub fn model_by_name(name: &str) -> Result<SystemModel> {
    match name {
        "scalar_integrator" => Ok(scalar_integrator()),
        "double_integrator_2d" => Ok(double_integrator_2d()),
        "unicycle" => Ok(unicycle()),
        other => Err(Error::Config(format!("unknown model '{other}'"))),
    }
}

/// `ẋ = u` with full-state output; the smallest sanity-check plant.
pub fn scalar_integrator() -> SystemModel {
    SystemModel {
        name: "scalar_integrator".into(),
        n_x: 1,
        n_u: 1,
        n_w: 1,
        n_y: 1,
        n_eta: 1,
        n_p: 1,
        f: Arc::new(|_x, u| u.clone()),
        jac: Arc::new(|_x, _u| (DMatrix::zeros(1, 1), DMatrix::identity(1, 1))),
        e_mat: DMatrix::identity(1, 1),
        c_mat: DMatrix::identity(1, 1),
        f_mat: DMatrix::identity(1, 1),
        m_mat: DMatrix::identity(1, 1),
        w_bias: DVector::zeros(1),
        state_roles: vec![DimRole::Absent],
        input_roles: vec![DimRole::Absent],
    }
}

/// Planar double integrator: state `(p_x, p_y, v_x, v_y)`, input
/// `(a_x, a_y)`, disturbances entering on the accelerations, full-state
/// output.
pub fn double_integrator_2d() -> SystemModel {
    let a = {
        let mut a = DMatrix::zeros(4, 4);
        a[(0, 2)] = 1.0;
        a[(1, 3)] = 1.0;
        a
    };
    let b = {
        let mut b = DMatrix::zeros(4, 2);
        b[(2, 0)] = 1.0;
        b[(3, 1)] = 1.0;
        b
    };
    let e = b.clone();
    let m = {
        let mut m = DMatrix::zeros(2, 4);
        m[(0, 0)] = 1.0;
        m[(1, 1)] = 1.0;
        m
    };
    let (fa, fb) = (a.clone(), b.clone());
    SystemModel {
        name: "double_integrator_2d".into(),
        n_x: 4,
        n_u: 2,
        n_w: 2,
        n_y: 4,
        n_eta: 4,
        n_p: 2,
        f: Arc::new(move |x, u| &fa * x + &fb * u),
        jac: Arc::new(move |_x, _u| (a.clone(), b.clone())),
        e_mat: e,
        c_mat: DMatrix::identity(4, 4),
        f_mat: DMatrix::identity(4, 4),
        m_mat: m,
        w_bias: DVector::zeros(2),
        state_roles: vec![DimRole::Absent; 4],
        input_roles: vec![DimRole::Absent; 2],
    }
}

/// Kinematic unicycle: state `(p_x, p_y, θ)`, input `(v, ω)`; the Jacobians
/// depend nonlinearly on the heading and linearly on the speed.
pub fn unicycle() -> SystemModel {
    let m = {
        let mut m = DMatrix::zeros(2, 3);
        m[(0, 0)] = 1.0;
        m[(1, 1)] = 1.0;
        m
    };
    SystemModel {
        name: "unicycle".into(),
        n_x: 3,
        n_u: 2,
        n_w: 3,
        n_y: 3,
        n_eta: 3,
        n_p: 2,
        f: Arc::new(|x, u| {
            DVector::from_vec(vec![u[0] * x[2].cos(), u[0] * x[2].sin(), u[1]])
        }),
        jac: Arc::new(|x, u| {
            let (s, c) = x[2].sin_cos();
            let mut a = DMatrix::zeros(3, 3);
            a[(0, 2)] = -u[0] * s;
            a[(1, 2)] = u[0] * c;
            let mut b = DMatrix::zeros(3, 2);
            b[(0, 0)] = c;
            b[(1, 0)] = s;
            b[(2, 1)] = 1.0;
            (a, b)
        }),
        e_mat: DMatrix::identity(3, 3),
        c_mat: DMatrix::identity(3, 3),
        f_mat: DMatrix::identity(3, 3),
        m_mat: m,
        w_bias: DVector::zeros(3),
        state_roles: vec![DimRole::Absent, DimRole::Absent, DimRole::Nonlinear],
        input_roles: vec![DimRole::Linear, DimRole::Absent],
    }
}

/// An axis-aligned box `{v : lower ≤ v ≤ upper}` (elementwise).
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct BoxSet {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl BoxSet {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(Error::Config("box bound lengths differ".into()));
        }
        if lower.iter().zip(&upper).any(|(l, u)| l > u) {
            return Err(Error::Config("box has lower > upper".into()));
        }
        Ok(BoxSet { lower, upper })
    }

    /// Symmetric box `±half` in each dimension.
    pub fn symmetric(half: Vec<f64>) -> Self {
        let lower = half.iter().map(|h| -h).collect();
        BoxSet { lower, upper: half }
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    /// All `2^d` corner points in a deterministic (lexicographic) order.
    /// Degenerate dimensions (`lower == upper`) contribute a single value.
    pub fn vertices(&self) -> Vec<DVector<f64>> {
        let mut verts = vec![Vec::<f64>::new()];
        for d in 0..self.dim() {
            let vals = if self.lower[d] == self.upper[d] {
                vec![self.lower[d]]
            } else {
                vec![self.lower[d], self.upper[d]]
            };
            let mut next = Vec::with_capacity(verts.len() * vals.len());
            for prefix in &verts {
                for v in &vals {
                    let mut p = prefix.clone();
                    p.push(*v);
                    next.push(p);
                }
            }
            verts = next;
        }
        verts.into_iter().map(DVector::from_vec).collect()
    }

    pub fn contains(&self, v: &DVector<f64>, tol: f64) -> bool {
        v.iter()
            .enumerate()
            .all(|(i, x)| *x >= self.lower[i] - tol && *x <= self.upper[i] + tol)
    }

    /// Uniform sample from the box using the supplied RNG.
    pub fn sample<R: rand::Rng>(&self, rng: &mut R) -> DVector<f64> {
        DVector::from_iterator(
            self.dim(),
            (0..self.dim()).map(|d| {
                if self.lower[d] == self.upper[d] {
                    self.lower[d]
                } else {
                    rng.gen_range(self.lower[d]..=self.upper[d])
                }
            }),
        )
    }
}

/// A conjunction of half-spaces `L_j · v ≤ l_j`.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct Polytope {
    pub rows: Vec<(Vec<f64>, f64)>,
}

impl Polytope {
    pub fn new(rows: Vec<(Vec<f64>, f64)>) -> Self {
        Polytope { rows }
    }

    /// Construct with every row scaled to unit norm (required for obstacle
    /// polytopes so the tightening constants apply uniformly).
    pub fn normalized(rows: Vec<(Vec<f64>, f64)>) -> Result<Self> {
        let mut out = Vec::with_capacity(rows.len());
        for (l, b) in rows {
            let norm = l.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(Error::Config("zero polytope row".into()));
            }
            out.push((l.iter().map(|v| v / norm).collect(), b / norm));
        }
        Ok(Polytope { rows: out })
    }

    pub fn dim(&self) -> usize {
        self.rows.first().map_or(0, |(l, _)| l.len())
    }

    /// Per-row margins `l_j − L_j·v` (nonnegative means satisfied).
    pub fn margins(&self, v: &DVector<f64>) -> Vec<f64> {
        self.rows
            .iter()
            .map(|(l, b)| b - l.iter().zip(v.iter()).map(|(a, x)| a * x).sum::<f64>())
            .collect()
    }

    /// Minimum margin over all rows; `+∞` for an empty row set.
    pub fn min_margin(&self, v: &DVector<f64>) -> f64 {
        self.margins(v).into_iter().fold(f64::INFINITY, f64::min)
    }

    /// For polytopes made of axis-aligned row pairs, an interior seed point
    /// (per-dimension interval midpoints), or `None` if some interval is
    /// empty or rows are not axis-aligned.
    pub fn interior_point(&self) -> Option<DVector<f64>> {
        let d = self.dim();
        let mut lo = vec![f64::NEG_INFINITY; d];
        let mut hi = vec![f64::INFINITY; d];
        for (l, b) in &self.rows {
            let nz: Vec<usize> = (0..d).filter(|&i| l[i] != 0.0).collect();
            if nz.len() != 1 {
                return None;
            }
            let i = nz[0];
            if l[i] > 0.0 {
                hi[i] = hi[i].min(b / l[i]);
            } else {
                lo[i] = lo[i].max(b / l[i]);
            }
        }
        if (0..d).any(|i| lo[i] > hi[i]) {
            return None;
        }
        Some(DVector::from_iterator(
            d,
            (0..d).map(|i| {
                let (l, h) = (lo[i].max(-1e12), hi[i].min(1e12));
                0.5 * (l + h)
            }),
        ))
    }
}

/// Joint input/state constraint rows over the stacked vector `(u, x)` with
/// the input coordinates first. Each finite box bound yields one unit row:
/// all input rows precede all state rows.
pub fn system_rows_from_boxes(u_box: &BoxSet, x_box: &BoxSet) -> Polytope {
    let (n_u, n_x) = (u_box.dim(), x_box.dim());
    let d = n_u + n_x;
    let mut rows = Vec::new();
    let push_box = |b: &BoxSet, shift: usize, rows: &mut Vec<(Vec<f64>, f64)>| {
        for i in 0..b.dim() {
            if b.upper[i].is_finite() {
                let mut l = vec![0.0; d];
                l[shift + i] = 1.0;
                rows.push((l, b.upper[i]));
            }
            if b.lower[i].is_finite() {
                let mut l = vec![0.0; d];
                l[shift + i] = -1.0;
                rows.push((l, -b.lower[i]));
            }
        }
    };
    push_box(u_box, 0, &mut rows);
    push_box(x_box, n_u, &mut rows);
    Polytope::new(rows)
}

/// Per-stage convex polytopes bounding free space over a prediction horizon,
/// piecewise constant over each sampling interval.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ObstacleSchedule {
    pub stages: Vec<Polytope>,
}

impl ObstacleSchedule {
    /// Polytope valid at stage `k`, clamped to the last stage beyond the end.
    pub fn stage(&self, k: usize) -> &Polytope {
        let i = k.min(self.stages.len().saturating_sub(1));
        &self.stages[i]
    }
}

/// Build a per-stage corridor of axis-aligned boxes around a path.
///
/// Stage `k` covers the path segment from point `k` to point `k+1` with
/// `half_width` margin in every position dimension, so the generating path is
/// contained in its own corridor by construction; regenerating from a shifted
/// previously-optimal path therefore keeps that old path feasible in the new
/// corridor.
pub fn build_corridor(path: &[DVector<f64>], half_width: f64, n_stages: usize) -> Result<ObstacleSchedule> {
    if path.len() < n_stages + 1 {
        return Err(Error::Config(format!(
            "corridor path needs at least {} points, got {}",
            n_stages + 1,
            path.len()
        )));
    }
    if half_width <= 0.0 {
        return Err(Error::Config("corridor half_width must be positive".into()));
    }
    let d = path[0].len();
    let mut stages = Vec::with_capacity(n_stages);
    for k in 0..n_stages {
        let (a, b) = (&path[k], &path[k + 1]);
        let mut rows = Vec::with_capacity(2 * d);
        for i in 0..d {
            let (lo, hi) = (a[i].min(b[i]) - half_width, a[i].max(b[i]) + half_width);
            let mut e = vec![0.0; d];
            e[i] = 1.0;
            rows.push((e.clone(), hi));
            e[i] = -1.0;
            rows.push((e, -lo));
        }
        let poly = Polytope::normalized(rows)?;
        debug_assert!(poly.interior_point().is_some());
        stages.push(poly);
    }
    Ok(ObstacleSchedule { stages })
}

/// Deterministic grid over a box following the Jacobian-dependence rule:
/// absent dimensions are fixed to zero, linear dimensions contribute their
/// two extreme values, and nonlinear dimensions contribute a uniform grid of
/// `points_per_nonlinear_dim ≥ 2` values.
pub fn grid_domain(
    bounds: &BoxSet,
    points_per_nonlinear_dim: usize,
    roles: &[DimRole],
) -> Result<Vec<DVector<f64>>> {
    let axes = grid_axes(bounds, points_per_nonlinear_dim, roles)?;
    Ok(cartesian_grid(&axes))
}

/// The per-dimension sample coordinates underlying [`grid_domain`].
pub fn grid_axes(
    bounds: &BoxSet,
    points_per_nonlinear_dim: usize,
    roles: &[DimRole],
) -> Result<Vec<Vec<f64>>> {
    if bounds.dim() != roles.len() {
        return Err(Error::Config("grid_domain: box/roles length mismatch".into()));
    }
    if roles.contains(&DimRole::Nonlinear) && points_per_nonlinear_dim < 2 {
        return Err(Error::Config(
            "grid_domain: nonlinear dimensions need at least 2 points".into(),
        ));
    }
    let mut axes: Vec<Vec<f64>> = Vec::with_capacity(roles.len());
    for (d, role) in roles.iter().enumerate() {
        let (lo, hi) = (bounds.lower[d], bounds.upper[d]);
        let vals = match role {
            DimRole::Absent => vec![0.0],
            DimRole::Linear => {
                if lo == hi {
                    vec![lo]
                } else {
                    vec![lo, hi]
                }
            }
            DimRole::Nonlinear => {
                let m = points_per_nonlinear_dim;
                (0..m)
                    .map(|i| lo + (hi - lo) * i as f64 / (m - 1) as f64)
                    .collect()
            }
        };
        axes.push(vals);
    }
    Ok(axes)
}

/// Cartesian product of per-dimension coordinates in lexicographic order
/// with the last axis varying fastest.
pub fn cartesian_grid(axes: &[Vec<f64>]) -> Vec<DVector<f64>> {
    let mut points = vec![Vec::<f64>::new()];
    for axis in axes {
        let mut next = Vec::with_capacity(points.len() * axis.len());
        for p in &points {
            for v in axis {
                let mut q = p.clone();
                q.push(*v);
                next.push(q);
            }
        }
        points = next;
    }
    points.into_iter().map(DVector::from_vec).collect()
}

/// Default reference sample spacing: dense enough that the cubic Hermite
/// interpolant stays dynamically feasible to well below 1e-6.
pub const REF_DT: f64 = 0.001;

/// A sampled reference trajectory with cubic Hermite interpolation for the
/// states (using stored derivatives) and linear interpolation for the
/// inputs; held constant outside the sampled range.
#[derive(Debug, Clone)]
pub struct ReferenceTrajectory {
    pub ts: Vec<f64>,
    pub xs: Vec<DVector<f64>>,
    pub us: Vec<DVector<f64>>,
    pub xdots: Vec<DVector<f64>>,
}

impl ReferenceTrajectory {
    fn segment(&self, t: f64) -> (usize, f64) {
        let n = self.ts.len();
        if t <= self.ts[0] {
            return (0, 0.0);
        }
        if t >= self.ts[n - 1] {
            return (n - 2, 1.0);
        }
        let mut i = self.ts.partition_point(|&s| s <= t);
        i = i.clamp(1, n - 1);
        let (t0, t1) = (self.ts[i - 1], self.ts[i]);
        (i - 1, (t - t0) / (t1 - t0))
    }

    /// Reference state at time `t`.
    pub fn x_at(&self, t: f64) -> DVector<f64> {
        if self.ts.len() == 1 {
            return self.xs[0].clone();
        }
        let (i, s) = self.segment(t);
        let h = self.ts[i + 1] - self.ts[i];
        let (x0, x1, d0, d1) = (&self.xs[i], &self.xs[i + 1], &self.xdots[i], &self.xdots[i + 1]);
        let (s2, s3) = (s * s, s * s * s);
        x0 * (2.0 * s3 - 3.0 * s2 + 1.0)
            + d0 * (h * (s3 - 2.0 * s2 + s))
            + x1 * (-2.0 * s3 + 3.0 * s2)
            + d1 * (h * (s3 - s2))
    }

    /// Reference input at time `t`.
    pub fn u_at(&self, t: f64) -> DVector<f64> {
        if self.ts.len() == 1 {
            return self.us[0].clone();
        }
        let (i, s) = self.segment(t);
        &self.us[i] * (1.0 - s) + &self.us[i + 1] * s
    }

    /// Combined reference point `r = (u^r, x^r)` at time `t` in the
    /// constraint-space ordering (inputs first).
    pub fn r_at(&self, t: f64) -> DVector<f64> {
        let u = self.u_at(t);
        let x = self.x_at(t);
        DVector::from_iterator(u.len() + x.len(), u.iter().chain(x.iter()).copied())
    }

    /// Worst dynamic-feasibility residual `‖ẋ^r − f(x^r, u^r) − E w^b‖` over
    /// all sample midpoints, with `ẋ^r` from the interpolant's finite
    /// difference.
    pub fn feasibility_residual(&self, model: &SystemModel) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..self.ts.len().saturating_sub(1) {
            let tm = 0.5 * (self.ts[i] + self.ts[i + 1]);
            let h = 1e-5 * (self.ts[i + 1] - self.ts[i]).max(1e-6);
            let xdot = (self.x_at(tm + h) - self.x_at(tm - h)) / (2.0 * h);
            let f = model
                .eval_dynamics(&self.x_at(tm), &self.u_at(tm), Some(&model.w_bias))
                .expect("reference dims match model");
            worst = worst.max((xdot - f).norm());
        }
        worst
    }
}

/// Constant reference at an equilibrium point `(x_eq, u_eq)` with
/// `f(x_eq, u_eq) + E w^b = 0`.
pub fn constant_reference(x_eq: DVector<f64>, u_eq: DVector<f64>, t_end: f64) -> ReferenceTrajectory {
    let n = 2.max((t_end / 0.5).ceil() as usize + 1);
    let ts: Vec<f64> = (0..n).map(|i| t_end * i as f64 / (n - 1) as f64).collect();
    ReferenceTrajectory {
        xs: vec![x_eq.clone(); n],
        us: vec![u_eq; n],
        xdots: vec![DVector::zeros(x_eq.len()); n],
        ts,
    }
}

/// Quintic coefficients for the smooth-step `10s³ − 15s⁴ + 6s⁵` profile:
/// returns `(σ, σ̇, σ̈)` at normalized time `s ∈ [0, 1]`.
fn smooth_step(s: f64) -> (f64, f64, f64) {
    let s = s.clamp(0.0, 1.0);
    let (s2, s3, s4, s5) = (s * s, s * s * s, s * s * s * s, s * s * s * s * s);
    (
        10.0 * s3 - 15.0 * s4 + 6.0 * s5,
        30.0 * s2 - 60.0 * s3 + 30.0 * s4,
        60.0 * s - 180.0 * s2 + 120.0 * s3,
    )
}

/// Rest-to-rest polynomial reference for the planar double integrator: a
/// quintic position profile from `p0` to `pf` over `duration` seconds,
/// stationary afterwards, sampled at `dt` up to `t_end`.
pub fn polynomial_reference_2d(
    p0: [f64; 2],
    pf: [f64; 2],
    duration: f64,
    t_end: f64,
    dt: f64,
) -> ReferenceTrajectory {
    let n = (t_end / dt).ceil() as usize + 1;
    let mut ts = Vec::with_capacity(n);
    let mut xs = Vec::with_capacity(n);
    let mut us = Vec::with_capacity(n);
    let mut xdots = Vec::with_capacity(n);
    for i in 0..n {
        let t = dt * i as f64;
        let (sig, dsig, ddsig) = smooth_step(t / duration);
        let dsig = dsig / duration;
        let ddsig = ddsig / (duration * duration);
        let mut x = DVector::zeros(4);
        let mut u = DVector::zeros(2);
        let mut xd = DVector::zeros(4);
        for d in 0..2 {
            let delta = pf[d] - p0[d];
            x[d] = p0[d] + delta * sig;
            x[2 + d] = delta * dsig;
            u[d] = delta * ddsig;
            xd[d] = x[2 + d];
            xd[2 + d] = u[d];
        }
        ts.push(t);
        xs.push(x);
        us.push(u);
        xdots.push(xd);
    }
    ReferenceTrajectory { ts, xs, us, xdots }
}

/// Rest-to-rest quintic ramp for the scalar integrator from `x0` to `xf`.
pub fn polynomial_reference_scalar(
    x0: f64,
    xf: f64,
    duration: f64,
    t_end: f64,
    dt: f64,
) -> ReferenceTrajectory {
    let n = (t_end / dt).ceil() as usize + 1;
    let mut ts = Vec::with_capacity(n);
    let mut xs = Vec::with_capacity(n);
    let mut us = Vec::with_capacity(n);
    let mut xdots = Vec::with_capacity(n);
    for i in 0..n {
        let t = dt * i as f64;
        let (sig, dsig, _) = smooth_step(t / duration);
        let dsig = dsig / duration;
        let delta = xf - x0;
        ts.push(t);
        xs.push(DVector::from_vec(vec![x0 + delta * sig]));
        us.push(DVector::from_vec(vec![delta * dsig]));
        xdots.push(DVector::from_vec(vec![delta * dsig]));
    }
    ReferenceTrajectory { ts, xs, us, xdots }
}

/// Constant-speed circular reference for the unicycle: center `c`, radius
/// `radius`, angular rate `omega`, starting angle `phi0`.
pub fn circle_reference(
    c: [f64; 2],
    radius: f64,
    omega: f64,
    phi0: f64,
    t_end: f64,
    dt: f64,
) -> ReferenceTrajectory {
    let n = (t_end / dt).ceil() as usize + 1;
    let mut ts = Vec::with_capacity(n);
    let mut xs = Vec::with_capacity(n);
    let mut us = Vec::with_capacity(n);
    let mut xdots = Vec::with_capacity(n);
    for i in 0..n {
        let t = dt * i as f64;
        let phi = phi0 + omega * t;
        let theta = phi + std::f64::consts::FRAC_PI_2;
        let v = radius * omega;
        ts.push(t);
        xs.push(DVector::from_vec(vec![
            c[0] + radius * phi.cos(),
            c[1] + radius * phi.sin(),
            theta,
        ]));
        us.push(DVector::from_vec(vec![v, omega]));
        xdots.push(DVector::from_vec(vec![
            -radius * omega * phi.sin(),
            radius * omega * phi.cos(),
            omega,
        ]));
    }
    ReferenceTrajectory { ts, xs, us, xdots }
}
