//! Small-scale LMI assembly and conic solving.
//!
//! All offline design problems in this crate are semidefinite feasibility
//! problems over a few dozen decision entries with linear objectives. They
//! are solved by alternating projections between the affine space spanned by
//! the decision variables and the product of per-block semidefinite cones
//! (eigenvalue clipping), with linear objectives handled by bisection on the
//! objective level set. Linear programs are solved by a dense two-phase
//! simplex. This needs nothing beyond symmetric eigendecomposition and is
//! adequate for the problem sizes at hand.

use nalgebra::{DMatrix, DVector};

use crate::{Error, Result};

/// Sign convention of an LMI: `M ⪯ 0` or `M ⪰ 0`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sense {
    NegSemidef,
    PosSemidef,
}

/// Check a symmetric matrix against a semidefiniteness requirement.
///
/// The margin is the largest eigenvalue for `⪯ 0` (negated smallest for
/// `⪰ 0`), so the constraint is satisfied iff `margin ≤ tol`.
pub fn check_lmi(matrix: &DMatrix<f64>, sense: Sense, tol: f64) -> Result<(bool, f64)> {
    let asym = (matrix - matrix.transpose()).amax();
    if asym > 1e-10 * (1.0 + matrix.amax()) {
        return Err(Error::Numeric(format!(
            "check_lmi: matrix asymmetry {asym:.3e} exceeds tolerance"
        )));
    }
    let sym = (matrix + matrix.transpose()) * 0.5;
    let eigs = sym.symmetric_eigenvalues();
    let margin = match sense {
        Sense::NegSemidef => eigs.max(),
        Sense::PosSemidef => -eigs.min(),
    };
    Ok((margin <= tol, margin))
}

/// A named block of decision entries.
#[derive(Debug, Clone)]
enum VarBlock {
    /// Symmetric matrix variable; stores the upper triangle row-major.
    Sym { name: String, dim: usize, offset: usize },
    /// Rectangular matrix variable, row-major.
    Rect { name: String, rows: usize, cols: usize, offset: usize },
    /// A single scalar.
    Scalar { name: String, offset: usize },
}

impl VarBlock {
    fn name(&self) -> &str {
        match self {
            VarBlock::Sym { name, .. } | VarBlock::Rect { name, .. } | VarBlock::Scalar { name, .. } => name,
        }
    }
}

/// Layout of named symmetric / rectangular / scalar decision variables over
/// one flattened vector.
#[derive(Debug, Clone, Default)]
pub struct DecisionLayout {
    blocks: Vec<VarBlock>,
    total: usize,
}

impl DecisionLayout {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_sym(&mut self, name: &str, dim: usize) {
        self.blocks.push(VarBlock::Sym { name: name.into(), dim, offset: self.total });
        self.total += dim * (dim + 1) / 2;
    }

    pub fn add_rect(&mut self, name: &str, rows: usize, cols: usize) {
        self.blocks.push(VarBlock::Rect { name: name.into(), rows, cols, offset: self.total });
        self.total += rows * cols;
    }

    pub fn add_scalar(&mut self, name: &str) {
        self.blocks.push(VarBlock::Scalar { name: name.into(), offset: self.total });
        self.total += 1;
    }

    /// Total flattened length.
    pub fn len(&self) -> usize {
        self.total
    }

    pub fn is_empty(&self) -> bool {
        self.total == 0
    }

    fn block(&self, name: &str) -> &VarBlock {
        self.blocks
            .iter()
            .find(|b| b.name() == name)
            .unwrap_or_else(|| panic!("unknown decision variable '{name}'"))
    }

    /// Flattened indices of the diagonal of a symmetric variable (used for
    /// trace objectives).
    pub fn sym_diag_indices(&self, name: &str) -> Vec<usize> {
        match self.block(name) {
            VarBlock::Sym { dim, offset, .. } => {
                // Upper triangle row-major: row i starts after
                // (dim + dim-1 + ... + dim-i+1) entries; the diagonal entry
                // is first in its row.
                let mut idx = Vec::with_capacity(*dim);
                let mut pos = *offset;
                for i in 0..*dim {
                    idx.push(pos);
                    pos += dim - i;
                }
                idx
            }
            _ => panic!("'{name}' is not a symmetric variable"),
        }
    }

    /// Flattened index of a scalar variable.
    pub fn scalar_index(&self, name: &str) -> usize {
        match self.block(name) {
            VarBlock::Scalar { offset, .. } => *offset,
            _ => panic!("'{name}' is not a scalar variable"),
        }
    }

    /// Pack a full symmetric matrix into the flattened vector.
    pub fn set_sym(&self, theta: &mut DVector<f64>, name: &str, value: &DMatrix<f64>) {
        match self.block(name) {
            VarBlock::Sym { dim, offset, .. } => {
                assert_eq!(value.nrows(), *dim);
                let mut pos = *offset;
                for i in 0..*dim {
                    for j in i..*dim {
                        theta[pos] = 0.5 * (value[(i, j)] + value[(j, i)]);
                        pos += 1;
                    }
                }
            }
            _ => panic!("'{name}' is not a symmetric variable"),
        }
    }

    /// Pack a rectangular matrix into the flattened vector.
    pub fn set_rect(&self, theta: &mut DVector<f64>, name: &str, value: &DMatrix<f64>) {
        match self.block(name) {
            VarBlock::Rect { rows, cols, offset, .. } => {
                assert_eq!((value.nrows(), value.ncols()), (*rows, *cols));
                let mut pos = *offset;
                for i in 0..*rows {
                    for j in 0..*cols {
                        theta[pos] = value[(i, j)];
                        pos += 1;
                    }
                }
            }
            _ => panic!("'{name}' is not a rectangular variable"),
        }
    }

    pub fn set_scalar(&self, theta: &mut DVector<f64>, name: &str, value: f64) {
        theta[self.scalar_index(name)] = value;
    }

    /// Unpack a symmetric variable from the flattened vector.
    pub fn get_sym(&self, theta: &DVector<f64>, name: &str) -> DMatrix<f64> {
        match self.block(name) {
            VarBlock::Sym { dim, offset, .. } => {
                let mut m = DMatrix::zeros(*dim, *dim);
                let mut pos = *offset;
                for i in 0..*dim {
                    for j in i..*dim {
                        m[(i, j)] = theta[pos];
                        m[(j, i)] = theta[pos];
                        pos += 1;
                    }
                }
                m
            }
            _ => panic!("'{name}' is not a symmetric variable"),
        }
    }

    /// Unpack a rectangular variable from the flattened vector.
    pub fn get_rect(&self, theta: &DVector<f64>, name: &str) -> DMatrix<f64> {
        match self.block(name) {
            VarBlock::Rect { rows, cols, offset, .. } => {
                let mut m = DMatrix::zeros(*rows, *cols);
                let mut pos = *offset;
                for i in 0..*rows {
                    for j in 0..*cols {
                        m[(i, j)] = theta[pos];
                        pos += 1;
                    }
                }
                m
            }
            _ => panic!("'{name}' is not a rectangular variable"),
        }
    }

    pub fn get_scalar(&self, theta: &DVector<f64>, name: &str) -> f64 {
        theta[self.scalar_index(name)]
    }
}

/// One affine LMI `C + Σ θ_i G_i  (⪯ or ⪰) 0` with a provenance tag.
#[derive(Debug, Clone)]
pub struct LmiBlock {
    pub constant: DMatrix<f64>,
    pub terms: Vec<(usize, DMatrix<f64>)>,
    pub sense: Sense,
    pub tag: String,
}

impl LmiBlock {
    /// Build a block from any affine symmetric-matrix-valued expression of
    /// the decision vector by probing it with basis vectors. Exact for
    /// affine maps; coefficient matrices are symmetrized and near-zero
    /// coefficients dropped.
    pub fn from_affine<F>(layout: &DecisionLayout, sense: Sense, tag: &str, expr: F) -> Self
    where
        F: Fn(&DVector<f64>) -> DMatrix<f64>,
    {
        let n = layout.len();
        let zero = DVector::zeros(n);
        let constant = symmetrize(&expr(&zero));
        let scale = 1.0 + constant.amax();
        let mut terms = Vec::new();
        let mut probe = DVector::zeros(n);
        for i in 0..n {
            probe[i] = 1.0;
            let gi = symmetrize(&expr(&probe)) - &constant;
            probe[i] = 0.0;
            if gi.amax() > 1e-14 * scale.max(1.0 + gi.amax()) {
                terms.push((i, gi));
            }
        }
        LmiBlock { constant, terms, sense, tag: tag.into() }
    }

    /// Evaluate the block at a decision vector.
    pub fn eval(&self, theta: &DVector<f64>) -> DMatrix<f64> {
        let mut m = self.constant.clone();
        for (i, g) in &self.terms {
            m += g * theta[*i];
        }
        m
    }

    /// Feasibility margin at a decision vector (`≤ 0` means satisfied).
    pub fn margin(&self, theta: &DVector<f64>) -> f64 {
        let eigs = self.eval(theta).symmetric_eigenvalues();
        match self.sense {
            Sense::NegSemidef => eigs.max(),
            Sense::PosSemidef => -eigs.min(),
        }
    }
}

fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    debug_assert_eq!(m.nrows(), m.ncols());
    debug_assert!(
        (m - m.transpose()).amax() <= 1e-12 * (1.0 + m.amax()),
        "LMI expression produced a non-symmetric matrix"
    );
    (m + m.transpose()) * 0.5
}

/// Termination status of an SDP solve.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum SdpStatus {
    Optimal,
    Feasible,
    Infeasible,
    MaxIter,
}

/// An SDP: minimize a linear functional of the flattened decision vector over
/// an intersection of affine LMIs.
pub struct SdpProblem {
    pub layout: DecisionLayout,
    /// Linear objective as `(flattened index, coefficient)` pairs; minimized.
    pub objective: Vec<(usize, f64)>,
    pub blocks: Vec<LmiBlock>,
}

/// SDP solve result.
#[derive(Debug, Clone)]
pub struct SdpSolution {
    pub values: DVector<f64>,
    pub objective: f64,
    pub worst_residual: f64,
    pub iterations: usize,
    pub status: SdpStatus,
}

/// Options for the feasibility / SDP solvers.
#[derive(Debug, Clone, Copy)]
pub struct SolveOptions {
    /// A point is accepted as feasible when its worst block margin is below
    /// this value.
    pub feas_tol: f64,
    /// Eigenvalue clipping targets at least this much strictly inside the
    /// cone, so accepted points have a little slack.
    pub strengthen: f64,
    /// Maximum splitting iterations per feasibility solve.
    pub max_iter: usize,
    /// Iterations without best-margin improvement before giving up.
    pub stall: usize,
    /// Absolute + relative width at which objective bisection stops.
    pub obj_tol: f64,
    /// Bisection steps for objective level search.
    pub obj_bisections: usize,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions {
            feas_tol: 1e-8,
            strengthen: 1e-9,
            max_iter: 30_000,
            stall: 2_500,
            obj_tol: 1e-8,
            obj_bisections: 60,
        }
    }
}

/// Douglas–Rachford feasibility solver over a set of LMI blocks.
///
/// Returns `Ok((theta, worst_margin, iterations))` when a point with worst
/// margin `≤ opts.feas_tol` is found; otherwise the best point reached and
/// its margin, flagged infeasible.
pub struct FeasibilitySolver<'a> {
    blocks: &'a [LmiBlock],
    n: usize,
    /// Cholesky factor of the Gram matrix of the affine map.
    gram_chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
}

impl<'a> FeasibilitySolver<'a> {
    pub fn new(n: usize, blocks: &'a [LmiBlock]) -> Result<Self> {
        assert!(!blocks.is_empty(), "feasibility solve needs at least one LMI");
        let mut gram = DMatrix::zeros(n, n);
        for b in blocks {
            for (i, gi) in &b.terms {
                for (j, gj) in &b.terms {
                    if j < i {
                        continue;
                    }
                    let dot = gi.dot(gj);
                    gram[(*i, *j)] += dot;
                    if i != j {
                        gram[(*j, *i)] += dot;
                    }
                }
            }
        }
        // Ridge keeps the factorization well-posed when some entries are
        // unused or coefficients are nearly dependent.
        let ridge = 1e-10 * (1.0 + gram.diagonal().max());
        for i in 0..n {
            gram[(i, i)] += ridge;
        }
        let gram_chol = nalgebra::Cholesky::new(gram)
            .ok_or_else(|| Error::Numeric("gram matrix factorization failed".into()))?;
        Ok(FeasibilitySolver { blocks, n, gram_chol })
    }

    /// Worst margin and its tag at a point.
    pub fn worst_margin(&self, theta: &DVector<f64>) -> (f64, &str) {
        let mut worst = f64::NEG_INFINITY;
        let mut tag = "";
        for b in self.blocks {
            let m = b.margin(theta);
            if m > worst {
                worst = m;
                tag = &b.tag;
            }
        }
        (worst, tag)
    }

    /// Find a point satisfying all blocks by Douglas–Rachford splitting
    /// between the affine image manifold of the decision vector and the
    /// product of semidefinite cones.
    pub fn solve(&self, theta0: &DVector<f64>, opts: &SolveOptions) -> (DVector<f64>, f64, usize, bool) {
        let mut theta = theta0.clone();
        assert_eq!(theta.len(), self.n);
        let (w0, _) = self.worst_margin(&theta);
        if w0 <= opts.feas_tol {
            return (theta, w0, 0, true);
        }
        // Governing (dual) iterate: one symmetric matrix per block.
        let mut z: Vec<DMatrix<f64>> = self.blocks.iter().map(|b| b.eval(&theta)).collect();
        let mut best = theta.clone();
        let mut best_margin = w0;
        let mut stall = 0usize;
        for it in 0..opts.max_iter {
            // Cone projection of the governing iterate, plus the two affine
            // least-squares right-hand sides (for the reflection step and
            // for the primal candidate).
            let mut rhs_reflect = DVector::zeros(self.n);
            let mut rhs_primal = DVector::zeros(self.n);
            let mut cone_pts = Vec::with_capacity(z.len());
            for (b, zb) in self.blocks.iter().zip(&z) {
                let se = zb.clone().symmetric_eigen();
                let clipped: DVector<f64> = se.eigenvalues.map(|l| match b.sense {
                    Sense::NegSemidef => l.min(-opts.strengthen),
                    Sense::PosSemidef => l.max(opts.strengthen),
                });
                let pb = &se.eigenvectors * DMatrix::from_diagonal(&clipped) * se.eigenvectors.transpose();
                let reflected = &pb * 2.0 - zb;
                for (i, gi) in &b.terms {
                    rhs_reflect[*i] += gi.dot(&(&reflected - &b.constant));
                    rhs_primal[*i] += gi.dot(&(&pb - &b.constant));
                }
                cone_pts.push(pb);
            }
            // Primal candidate: affine projection of the cone point.
            theta = self.gram_chol.solve(&rhs_primal);
            let (worst, _) = self.worst_margin(&theta);
            if worst < best_margin - 1e-14 {
                best_margin = worst;
                best = theta.clone();
                stall = 0;
            } else {
                stall += 1;
            }
            if worst <= opts.feas_tol {
                return (theta, worst, it, true);
            }
            if stall > opts.stall {
                break;
            }
            // Governing update: z += P_affine(reflection) − P_cone(z).
            let theta_reflect = self.gram_chol.solve(&rhs_reflect);
            for ((b, zb), pb) in self.blocks.iter().zip(z.iter_mut()).zip(cone_pts.iter()) {
                let mut affine = b.constant.clone();
                for (i, gi) in &b.terms {
                    affine += gi * theta_reflect[*i];
                }
                *zb += affine - pb;
            }
        }
        let (worst, _) = self.worst_margin(&best);
        (best, worst, opts.max_iter, worst <= opts.feas_tol)
    }
}

/// Solve an SDP: find a feasible point, then bisect the objective level.
pub fn solve_sdp(problem: &SdpProblem, opts: &SolveOptions) -> Result<SdpSolution> {
    let n = problem.layout.len();
    if problem.blocks.is_empty() {
        return Err(Error::Config("SDP has no LMI blocks".into()));
    }
    let solver = FeasibilitySolver::new(n, &problem.blocks)?;
    let (mut theta, mut worst, mut iters, ok) = solver.solve(&DVector::zeros(n), opts);
    if !ok {
        return Ok(SdpSolution {
            values: theta,
            objective: f64::NAN,
            worst_residual: worst,
            iterations: iters,
            status: SdpStatus::Infeasible,
        });
    }
    let obj = |t: &DVector<f64>| -> f64 { problem.objective.iter().map(|(i, c)| c * t[*i]).sum() };
    if problem.objective.is_empty() {
        return Ok(SdpSolution {
            values: theta.clone(),
            objective: 0.0,
            worst_residual: worst,
            iterations: iters,
            status: SdpStatus::Feasible,
        });
    }

    // Level-set bisection: append the half-space `cᵀθ ≤ level` as a 1×1
    // block and shrink the level while it stays feasible.
    let probe = |level: f64, start: &DVector<f64>| -> (DVector<f64>, f64, usize, bool) {
        let mut blocks = problem.blocks.to_vec();
        let mut terms = Vec::with_capacity(problem.objective.len());
        for (i, c) in &problem.objective {
            terms.push((*i, DMatrix::from_element(1, 1, -*c)));
        }
        blocks.push(LmiBlock {
            constant: DMatrix::from_element(1, 1, level),
            terms,
            sense: Sense::PosSemidef,
            tag: "objective level".into(),
        });
        match FeasibilitySolver::new(n, &blocks) {
            Ok(s) => s.solve(start, opts),
            Err(_) => (start.clone(), f64::INFINITY, 0, false),
        }
    };

    let mut hi = obj(&theta); // known feasible level
    let scale = 1.0 + hi.abs();
    let mut step = 0.5 * scale;
    let mut lo = hi;
    let mut bracketed = false;
    for _ in 0..60 {
        let level = lo - step;
        let (t, w, it, ok) = probe(level, &theta);
        iters += it;
        if ok {
            theta = t;
            worst = w;
            lo = level;
            hi = hi.min(obj(&theta));
            step *= 2.0;
        } else {
            bracketed = true;
            lo = level;
            break;
        }
    }
    if !bracketed {
        // Objective appears unbounded below within the search budget.
        return Ok(SdpSolution {
            objective: obj(&theta),
            values: theta,
            worst_residual: worst,
            iterations: iters,
            status: SdpStatus::MaxIter,
        });
    }
    // Bisect between infeasible `lo` and feasible `hi`.
    for _ in 0..opts.obj_bisections {
        if hi - lo <= opts.obj_tol * (1.0 + hi.abs()) {
            break;
        }
        let mid = 0.5 * (lo + hi);
        let (t, w, it, ok) = probe(mid, &theta);
        iters += it;
        if ok {
            theta = t;
            worst = w;
            hi = obj(&theta).min(mid);
        } else {
            lo = mid;
        }
    }
    Ok(SdpSolution {
        objective: obj(&theta),
        values: theta,
        worst_residual: worst,
        iterations: iters,
        status: SdpStatus::Optimal,
    })
}

/// LP termination status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LpStatus {
    Optimal,
    Unbounded,
    Infeasible,
}

/// Maximize `cᵀx` subject to `A x ≤ b` (free variables) with a dense
/// two-phase simplex using Bland's rule. Single-variable problems reduce to
/// a scan over row ratios.
pub fn solve_lp(c: &DVector<f64>, a: &DMatrix<f64>, b: &DVector<f64>) -> (LpStatus, f64, DVector<f64>) {
    let n = c.len();
    let m = a.nrows();
    assert_eq!(a.ncols(), n);
    assert_eq!(b.len(), m);
    if n == 1 {
        // max c x s.t. a_i x ≤ b_i.
        let cdir = c[0];
        if cdir == 0.0 {
            return (LpStatus::Optimal, 0.0, DVector::zeros(1));
        }
        // Transform to max y with y = c x: a_i/c y ≤ b_i.
        let mut ub = f64::INFINITY;
        let mut lb = f64::NEG_INFINITY;
        for i in 0..m {
            let coef = a[(i, 0)] / cdir;
            if coef > 0.0 {
                ub = ub.min(b[i] / coef);
            } else if coef < 0.0 {
                lb = lb.max(b[i] / coef);
            } else if b[i] < 0.0 {
                return (LpStatus::Infeasible, f64::NAN, DVector::zeros(1));
            }
        }
        if lb > ub {
            return (LpStatus::Infeasible, f64::NAN, DVector::zeros(1));
        }
        if ub.is_infinite() {
            return (LpStatus::Unbounded, f64::INFINITY, DVector::zeros(1));
        }
        return (LpStatus::Optimal, ub, DVector::from_vec(vec![ub / cdir]));
    }

    // General case: z = [x⁺, x⁻, slack, artificial] ≥ 0.
    // Rows normalized to b ≥ 0.
    let cols = 2 * n + m + m;
    let mut tab = DMatrix::zeros(m, cols);
    let mut rhs = DVector::zeros(m);
    for i in 0..m {
        let sgn = if b[i] < 0.0 { -1.0 } else { 1.0 };
        for j in 0..n {
            tab[(i, j)] = sgn * a[(i, j)];
            tab[(i, n + j)] = -sgn * a[(i, j)];
        }
        tab[(i, 2 * n + i)] = sgn; // slack
        tab[(i, 2 * n + m + i)] = 1.0; // artificial
        rhs[i] = sgn * b[i];
    }
    let mut basis: Vec<usize> = (0..m).map(|i| 2 * n + m + i).collect();

    let pivot = |tab: &mut DMatrix<f64>, rhs: &mut DVector<f64>, basis: &mut Vec<usize>, r: usize, col: usize| {
        let piv = tab[(r, col)];
        for j in 0..tab.ncols() {
            tab[(r, j)] /= piv;
        }
        rhs[r] /= piv;
        for i in 0..tab.nrows() {
            if i != r && tab[(i, col)].abs() > 0.0 {
                let f = tab[(i, col)];
                for j in 0..tab.ncols() {
                    tab[(i, j)] -= f * tab[(r, j)];
                }
                rhs[i] -= f * rhs[r];
            }
        }
        basis[r] = col;
    };

    // Generic simplex loop for a given cost vector (minimization).
    let run = |tab: &mut DMatrix<f64>, rhs: &mut DVector<f64>, basis: &mut Vec<usize>, cost: &DVector<f64>, allowed: usize| -> bool {
        for _ in 0..10_000 {
            // Reduced costs.
            let mut y = DVector::zeros(m);
            for i in 0..m {
                y[i] = cost[basis[i]];
            }
            let mut entering = None;
            for j in 0..allowed {
                if basis.contains(&j) {
                    continue;
                }
                let mut red = cost[j];
                for i in 0..m {
                    red -= y[i] * tab[(i, j)];
                }
                if red < -1e-11 {
                    entering = Some(j); // Bland's rule: first index
                    break;
                }
            }
            let Some(col) = entering else { return true };
            // Ratio test (Bland: smallest basis index ties).
            let mut row = None;
            let mut best = f64::INFINITY;
            for i in 0..m {
                if tab[(i, col)] > 1e-12 {
                    let ratio = rhs[i] / tab[(i, col)];
                    if ratio < best - 1e-15 || (ratio < best + 1e-15 && row.map_or(true, |r: usize| basis[i] < basis[r])) {
                        best = ratio;
                        row = Some(i);
                    }
                }
            }
            let Some(r) = row else { return false }; // unbounded
            pivot(tab, rhs, basis, r, col);
        }
        true
    };

    // Phase 1: minimize the sum of artificials.
    let mut cost1 = DVector::zeros(cols);
    for j in 2 * n + m..cols {
        cost1[j] = 1.0;
    }
    run(&mut tab, &mut rhs, &mut basis, &cost1, cols);
    let phase1: f64 = (0..m).map(|i| cost1[basis[i]] * rhs[i]).sum();
    if phase1 > 1e-8 {
        return (LpStatus::Infeasible, f64::NAN, DVector::zeros(n));
    }
    // Phase 2: minimize −cᵀx over columns excluding artificials.
    let mut cost2 = DVector::zeros(cols);
    for j in 0..n {
        cost2[j] = -c[j];
        cost2[n + j] = c[j];
    }
    let bounded = run(&mut tab, &mut rhs, &mut basis, &cost2, 2 * n + m);
    if !bounded {
        return (LpStatus::Unbounded, f64::INFINITY, DVector::zeros(n));
    }
    let mut x = DVector::zeros(n);
    for i in 0..m {
        if basis[i] < n {
            x[basis[i]] += rhs[i];
        } else if basis[i] < 2 * n {
            x[basis[i] - n] -= rhs[i];
        }
    }
    (LpStatus::Optimal, c.dot(&x), x)
}

/// Bisection for the largest multiplier in `[lo, hi]` accepted by a monotone
/// feasibility probe (feasible below the transition, infeasible above). If
/// neither endpoint is feasible a coarse scan looks for a feasible seed.
pub fn bisect_multiplier<F>(range: (f64, f64), mut probe: F, iters: usize) -> Result<f64>
where
    F: FnMut(f64) -> bool,
{
    let (mut lo, mut hi) = range;
    assert!(lo <= hi);
    if probe(hi) {
        return Ok(hi);
    }
    if !probe(lo) {
        // Coarse scan for a feasible seed.
        let mut found = None;
        for k in 1..32 {
            let t = lo + (hi - lo) * k as f64 / 32.0;
            if probe(t) {
                found = Some(t);
                break;
            }
        }
        match found {
            Some(t) => lo = t,
            None => {
                return Err(Error::Infeasible(format!(
                    "no feasible multiplier in [{:.4e}, {:.4e}]",
                    range.0, range.1
                )))
            }
        }
    }
    for _ in 0..iters {
        let mid = 0.5 * (lo + hi);
        if probe(mid) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(lo)
}

/// Coarse sweep plus local refinement for the multiplier maximizing a
/// feasibility margin (used when the feasible multiplier set is an interior
/// interval rather than one-sided).
pub fn best_multiplier<F>(range: (f64, f64), mut margin: F, coarse: usize, refine: usize) -> f64
where
    F: FnMut(f64) -> f64,
{
    let (lo, hi) = range;
    let coarse = coarse.max(3);
    let mut best_t = lo;
    let mut best_m = f64::INFINITY;
    for k in 0..=coarse {
        let t = lo + (hi - lo) * k as f64 / coarse as f64;
        let m = margin(t);
        if m < best_m {
            best_m = m;
            best_t = t;
        }
    }
    // Golden-section refinement around the coarse winner.
    let span = (hi - lo) / coarse as f64;
    let (mut a, mut b) = ((best_t - span).max(lo), (best_t + span).min(hi));
    let phi = 0.5 * (3.0 - 5.0f64.sqrt());
    for _ in 0..refine {
        let x1 = a + phi * (b - a);
        let x2 = b - phi * (b - a);
        if margin(x1) <= margin(x2) {
            b = x2;
        } else {
            a = x1;
        }
    }
    0.5 * (a + b)
}
