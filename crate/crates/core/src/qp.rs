//! Convex quadratic programs with dual extraction.
//!
//! Problems have the form
//!
//! ```text
//! minimize    ½ xᵀQx + qᵀx
//! subject to  E x  = e        (duals_eq, free)
//!             G x <= h        (duals_ineq >= 0)
//!             l <= x <= u     (duals_lower, duals_upper >= 0)
//! ```
//!
//! Every multiplier returned satisfies the project-wide convention
//! `Qx + q + Eᵀ·duals_eq + Gᵀ·duals_ineq − duals_lower + duals_upper = 0`.
//!
//! The default backend is an interior-point solve followed by an active-set
//! polish: the active constraints are guessed from the interior solution, the
//! equality-constrained KKT system on that set is solved directly, and the
//! polished point replaces the interior one only if it re-verifies as a KKT
//! point. Polished solutions are vertex-exact up to rounding.

use clarabel::algebra::CscMatrix;
use clarabel::solver::{
    DefaultSettingsBuilder, DefaultSolver, IPSolver, SolverStatus, SupportedConeT,
};
use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct QpSpec {
    pub quad: DMatrix<f64>,
    pub lin: DVector<f64>,
    pub eq_mat: DMatrix<f64>,
    pub eq_rhs: DVector<f64>,
    pub ineq_mat: DMatrix<f64>,
    pub ineq_rhs: DVector<f64>,
    /// `-inf` where a variable has no lower bound.
    pub lower: DVector<f64>,
    /// `+inf` where a variable has no upper bound.
    pub upper: DVector<f64>,
}

impl QpSpec {
    /// An unconstrained problem in `n` variables with zero objective.
    pub fn new(n: usize) -> Self {
        QpSpec {
            quad: DMatrix::zeros(n, n),
            lin: DVector::zeros(n),
            eq_mat: DMatrix::zeros(0, n),
            eq_rhs: DVector::zeros(0),
            ineq_mat: DMatrix::zeros(0, n),
            ineq_rhs: DVector::zeros(0),
            lower: DVector::from_element(n, f64::NEG_INFINITY),
            upper: DVector::from_element(n, f64::INFINITY),
        }
    }

    pub fn num_vars(&self) -> usize {
        self.lin.len()
    }

    pub fn with_equalities(mut self, mat: DMatrix<f64>, rhs: DVector<f64>) -> Self {
        self.eq_mat = mat;
        self.eq_rhs = rhs;
        self
    }

    pub fn with_inequalities(mut self, mat: DMatrix<f64>, rhs: DVector<f64>) -> Self {
        self.ineq_mat = mat;
        self.ineq_rhs = rhs;
        self
    }

    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.quad * x)) + self.lin.dot(x)
    }

    /// Dimension and symmetry checks. PSD-ness is checked separately by
    /// [`QpSpec::check_psd`] since it costs an eigendecomposition.
    pub fn check_shape(&self) -> Result<()> {
        let n = self.num_vars();
        let dims_ok = self.quad.shape() == (n, n)
            && self.eq_mat.ncols() == n
            && self.eq_mat.nrows() == self.eq_rhs.len()
            && self.ineq_mat.ncols() == n
            && self.ineq_mat.nrows() == self.ineq_rhs.len()
            && self.lower.len() == n
            && self.upper.len() == n;
        if !dims_ok {
            return Err(Error::Schema("inconsistent QP dimensions".into()));
        }
        let scale = 1.0 + self.quad.amax();
        if (&self.quad - self.quad.transpose()).amax() > 1e-12 * scale {
            return Err(Error::Schema("quadratic term is not symmetric".into()));
        }
        Ok(())
    }

    pub fn check_psd(&self) -> Result<()> {
        if self.num_vars() == 0 || self.quad.amax() == 0.0 {
            return Ok(());
        }
        let eig = self.quad.clone().symmetric_eigen();
        let floor = eig.eigenvalues.min();
        if floor < -1e-8 {
            return Err(Error::Schema(format!(
                "quadratic term is not positive semidefinite (min eigenvalue {floor:e})"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpStatus {
    Optimal,
    Infeasible,
    Unbounded,
    NumericalFailure,
}

impl std::fmt::Display for QpStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            QpStatus::Optimal => "optimal",
            QpStatus::Infeasible => "infeasible",
            QpStatus::Unbounded => "unbounded",
            QpStatus::NumericalFailure => "numerical_failure",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub x: DVector<f64>,
    pub duals_eq: DVector<f64>,
    pub duals_ineq: DVector<f64>,
    pub duals_lower: DVector<f64>,
    pub duals_upper: DVector<f64>,
    pub status: QpStatus,
    pub objective: f64,
    /// Whether the active-set polish replaced the interior-point point.
    pub polished: bool,
    /// Backend status text for anything other than a clean solve.
    pub diagnostics: Option<String>,
}

impl QpSolution {
    fn failed(spec: &QpSpec, status: QpStatus, diagnostics: String) -> Self {
        let n = spec.num_vars();
        QpSolution {
            x: DVector::zeros(n),
            duals_eq: DVector::zeros(spec.eq_rhs.len()),
            duals_ineq: DVector::zeros(spec.ineq_rhs.len()),
            duals_lower: DVector::zeros(n),
            duals_upper: DVector::zeros(n),
            status,
            objective: f64::NAN,
            polished: false,
            diagnostics: Some(diagnostics),
        }
    }

    pub fn is_optimal(&self) -> bool {
        self.status == QpStatus::Optimal
    }

    /// Converts a non-optimal status into an error.
    pub fn into_optimal(self) -> Result<Self> {
        match self.status {
            QpStatus::Optimal => Ok(self),
            QpStatus::Infeasible => Err(Error::Infeasible(
                self.diagnostics.unwrap_or_else(|| "convex program".into()),
            )),
            QpStatus::Unbounded => Err(Error::Numerical(format!(
                "unbounded: {}",
                self.diagnostics.unwrap_or_default()
            ))),
            QpStatus::NumericalFailure => {
                Err(Error::Numerical(self.diagnostics.unwrap_or_default()))
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct QpTolerances {
    pub feas: f64,
    pub gap: f64,
    pub max_iter: u32,
    pub polish: bool,
    /// Run the eigenvalue PSD check before solving.
    pub check_psd: bool,
}

impl Default for QpTolerances {
    fn default() -> Self {
        QpTolerances {
            feas: 1e-9,
            gap: 1e-9,
            max_iter: 200,
            polish: true,
            check_psd: true,
        }
    }
}

/// A convex QP solver honouring the sign convention of this module.
pub trait QpBackend: Send + Sync {
    fn solve(&self, spec: &QpSpec, tol: &QpTolerances) -> QpSolution;

    fn supports_warm_start(&self) -> bool {
        false
    }
}

/// Interior point (Clarabel) plus active-set polish.
#[derive(Debug, Default, Clone, Copy)]
pub struct ClarabelBackend;

pub fn solve_qp(spec: &QpSpec, tol: &QpTolerances) -> QpSolution {
    ClarabelBackend.solve(spec, tol)
}

impl QpBackend for ClarabelBackend {
    fn solve(&self, spec: &QpSpec, tol: &QpTolerances) -> QpSolution {
        if let Err(e) = spec.check_shape() {
            return QpSolution::failed(spec, QpStatus::NumericalFailure, e.to_string());
        }
        if tol.check_psd {
            if let Err(e) = spec.check_psd() {
                return QpSolution::failed(spec, QpStatus::NumericalFailure, e.to_string());
            }
        }
        if spec.lower.iter().zip(spec.upper.iter()).any(|(l, u)| l > u) {
            return QpSolution::failed(
                spec,
                QpStatus::Infeasible,
                "crossed variable bounds".into(),
            );
        }
        let mut sol = interior_point(spec, tol);
        if sol.status == QpStatus::Optimal && tol.polish {
            if let Some(p) = polish(spec, &sol) {
                sol = p;
            }
        }
        sol
    }
}

/// Row-major triplet accumulator for the stacked constraint matrix.
struct Triplets {
    rows: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
    nrows: usize,
}

impl Triplets {
    fn push_row(&mut self, entries: impl Iterator<Item = (usize, f64)>) {
        for (j, v) in entries {
            if v != 0.0 {
                self.rows.push(self.nrows);
                self.cols.push(j);
                self.vals.push(v);
            }
        }
        self.nrows += 1;
    }
}

fn interior_point(spec: &QpSpec, tol: &QpTolerances) -> QpSolution {
    let n = spec.num_vars();
    let m_eq = spec.eq_rhs.len();
    let m_in = spec.ineq_rhs.len();

    let mut p_rows = Vec::new();
    let mut p_cols = Vec::new();
    let mut p_vals = Vec::new();
    for j in 0..n {
        for i in 0..=j {
            let v = spec.quad[(i, j)];
            if v != 0.0 {
                p_rows.push(i);
                p_cols.push(j);
                p_vals.push(v);
            }
        }
    }
    let p = CscMatrix::new_from_triplets(n, n, p_rows, p_cols, p_vals);

    let mut a = Triplets {
        rows: Vec::new(),
        cols: Vec::new(),
        vals: Vec::new(),
        nrows: 0,
    };
    let mut b = Vec::with_capacity(m_eq + m_in + 2 * n);
    for i in 0..m_eq {
        a.push_row(spec.eq_mat.row(i).iter().copied().enumerate());
        b.push(spec.eq_rhs[i]);
    }
    for i in 0..m_in {
        a.push_row(spec.ineq_mat.row(i).iter().copied().enumerate());
        b.push(spec.ineq_rhs[i]);
    }
    let lower_idx: Vec<usize> = (0..n).filter(|&j| spec.lower[j].is_finite()).collect();
    let upper_idx: Vec<usize> = (0..n).filter(|&j| spec.upper[j].is_finite()).collect();
    for &j in &lower_idx {
        a.push_row(std::iter::once((j, -1.0)));
        b.push(-spec.lower[j]);
    }
    for &j in &upper_idx {
        a.push_row(std::iter::once((j, 1.0)));
        b.push(spec.upper[j]);
    }
    let m = a.nrows;
    let a_csc = CscMatrix::new_from_triplets(m, n, a.rows, a.cols, a.vals);

    let mut cones = Vec::new();
    if m_eq > 0 {
        cones.push(SupportedConeT::ZeroConeT(m_eq));
    }
    if m > m_eq {
        cones.push(SupportedConeT::NonnegativeConeT(m - m_eq));
    }

    let settings = match DefaultSettingsBuilder::default()
        .verbose(false)
        .max_iter(tol.max_iter)
        .tol_feas(tol.feas)
        .tol_gap_abs(tol.gap)
        .tol_gap_rel(tol.gap)
        .presolve_enable(false)
        .max_threads(1)
        .build()
    {
        Ok(s) => s,
        Err(e) => return QpSolution::failed(spec, QpStatus::NumericalFailure, e.to_string()),
    };
    let q: Vec<f64> = spec.lin.iter().copied().collect();
    let mut solver = match DefaultSolver::new(&p, &q, &a_csc, &b, &cones, settings) {
        Ok(s) => s,
        Err(e) => return QpSolution::failed(spec, QpStatus::NumericalFailure, format!("{e:?}")),
    };
    solver.solve();
    let raw = &solver.solution;

    let status = match raw.status {
        SolverStatus::Solved | SolverStatus::AlmostSolved => QpStatus::Optimal,
        SolverStatus::PrimalInfeasible | SolverStatus::AlmostPrimalInfeasible => {
            QpStatus::Infeasible
        }
        SolverStatus::DualInfeasible | SolverStatus::AlmostDualInfeasible => QpStatus::Unbounded,
        _ => QpStatus::NumericalFailure,
    };
    if status != QpStatus::Optimal {
        return QpSolution::failed(spec, status, format!("interior point: {:?}", raw.status));
    }

    let mut x = DVector::from_column_slice(&raw.x);
    for j in 0..n {
        x[j] = x[j].clamp(spec.lower[j], spec.upper[j]);
    }
    let duals_eq = DVector::from_column_slice(&raw.z[..m_eq]);
    let duals_ineq = DVector::from_column_slice(&raw.z[m_eq..m_eq + m_in]);
    let mut duals_lower = DVector::zeros(n);
    let mut duals_upper = DVector::zeros(n);
    let mut k = m_eq + m_in;
    for &j in &lower_idx {
        duals_lower[j] = raw.z[k];
        k += 1;
    }
    for &j in &upper_idx {
        duals_upper[j] = raw.z[k];
        k += 1;
    }
    let objective = spec.objective(&x);
    let mut sol = QpSolution {
        x,
        duals_eq,
        duals_ineq,
        duals_lower,
        duals_upper,
        status,
        objective,
        polished: false,
        diagnostics: (raw.status == SolverStatus::AlmostSolved).then(|| "reduced accuracy".into()),
    };
    if raw.status == SolverStatus::AlmostSolved && kkt_residuals(spec, &sol).max() > 1e-6 {
        sol.status = QpStatus::NumericalFailure;
    }
    sol
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Fix {
    Free,
    Lower,
    Upper,
    /// `lower == upper`; the bound multiplier takes either sign.
    Both,
}

/// Active-set polish. `None` when the guessed active set does not yield a
/// verified KKT point.
fn polish(spec: &QpSpec, ipm: &QpSolution) -> Option<QpSolution> {
    let n = spec.num_vars();
    let slack = &spec.ineq_rhs - &spec.ineq_mat * &ipm.x;
    let fixes: Vec<Fix> = (0..n)
        .map(|j| {
            let at_lower =
                spec.lower[j].is_finite() && ipm.duals_lower[j] > ipm.x[j] - spec.lower[j];
            let at_upper =
                spec.upper[j].is_finite() && ipm.duals_upper[j] > spec.upper[j] - ipm.x[j];
            match (at_lower, at_upper) {
                _ if spec.lower[j] == spec.upper[j] => Fix::Both,
                (true, _) => Fix::Lower,
                (false, true) => Fix::Upper,
                _ => Fix::Free,
            }
        })
        .collect();
    let active: Vec<usize> = (0..slack.len())
        .filter(|&i| ipm.duals_ineq[i] > slack[i])
        .collect();
    polish_on(spec, ipm, &fixes, &active)
}

fn polish_on(
    spec: &QpSpec,
    ipm: &QpSolution,
    fixes: &[Fix],
    active: &[usize],
) -> Option<QpSolution> {
    let n = spec.num_vars();
    let m_eq = spec.eq_rhs.len();
    let free: Vec<usize> = (0..n).filter(|&j| fixes[j] == Fix::Free).collect();
    let nf = free.len();
    let na = active.len();
    let dim = nf + m_eq + na;

    let mut x = ipm.x.clone();
    for j in 0..n {
        match fixes[j] {
            Fix::Lower | Fix::Both => x[j] = spec.lower[j],
            Fix::Upper => x[j] = spec.upper[j],
            Fix::Free => {}
        }
    }

    // Unknowns: free x, equality duals, active inequality duals.
    let constraint_row = |r: usize| -> (Vec<f64>, f64) {
        if r < m_eq {
            (spec.eq_mat.row(r).iter().copied().collect(), spec.eq_rhs[r])
        } else {
            let i = active[r - m_eq];
            (
                spec.ineq_mat.row(i).iter().copied().collect(),
                spec.ineq_rhs[i],
            )
        }
    };
    let mut kkt = DMatrix::zeros(dim, dim);
    let mut rhs = DVector::zeros(dim);
    let mut w0 = DVector::zeros(dim);
    for (a, &ja) in free.iter().enumerate() {
        for (b, &jb) in free.iter().enumerate() {
            kkt[(a, b)] = spec.quad[(ja, jb)];
        }
        let mut r = -spec.lin[ja];
        for j in 0..n {
            if fixes[j] != Fix::Free {
                r -= spec.quad[(ja, j)] * x[j];
            }
        }
        rhs[a] = r;
        w0[a] = ipm.x[ja];
    }
    for r in 0..m_eq + na {
        let (row, bound) = constraint_row(r);
        let k = nf + r;
        let mut target = bound;
        for j in 0..n {
            if fixes[j] != Fix::Free {
                target -= row[j] * x[j];
            }
        }
        for (a, &ja) in free.iter().enumerate() {
            kkt[(k, a)] = row[ja];
            kkt[(a, k)] = row[ja];
        }
        rhs[k] = target;
        w0[k] = if r < m_eq {
            ipm.duals_eq[r]
        } else {
            ipm.duals_ineq[active[r - m_eq]]
        };
    }

    let residual = &rhs - &kkt * &w0;
    let delta = if dim == 0 {
        DVector::zeros(0)
    } else {
        match kkt.clone().lu().solve(&residual) {
            Some(d) if (&kkt * &d - &residual).amax() <= 1e-10 * (1.0 + residual.amax()) => d,
            _ => {
                let svd = kkt.svd(true, true);
                let eps = 1e-12 * svd.singular_values.max().max(1.0);
                svd.solve(&residual, eps).ok()?
            }
        }
    };
    let w = w0 + delta;

    for (a, &ja) in free.iter().enumerate() {
        x[ja] = w[a];
    }
    let duals_eq = w.rows(nf, m_eq).into_owned();
    let mut duals_ineq = DVector::zeros(spec.ineq_rhs.len());
    for (r, &i) in active.iter().enumerate() {
        duals_ineq[i] = w[nf + m_eq + r];
    }
    let grad = &spec.quad * &x
        + &spec.lin
        + spec.eq_mat.tr_mul(&duals_eq)
        + spec.ineq_mat.tr_mul(&duals_ineq);
    let mut duals_lower = DVector::zeros(n);
    let mut duals_upper = DVector::zeros(n);
    for j in 0..n {
        match fixes[j] {
            Fix::Lower => duals_lower[j] = grad[j],
            Fix::Upper => duals_upper[j] = -grad[j],
            Fix::Both => {
                duals_lower[j] = grad[j].max(0.0);
                duals_upper[j] = (-grad[j]).max(0.0);
            }
            Fix::Free => {}
        }
    }

    let scale_p = 1.0 + spec.eq_rhs.amax().max(spec.ineq_rhs.amax()) + x.amax();
    let scale_d = 1.0 + spec.lin.amax() + spec.quad.amax() * x.amax();
    let tol_p = 1e-9 * scale_p;
    let tol_d = 1e-9 * scale_d;
    let eq_ok = m_eq == 0 || (&spec.eq_mat * &x - &spec.eq_rhs).amax() <= tol_p;
    let ineq_ok = spec.ineq_rhs.is_empty() || (&spec.ineq_mat * &x - &spec.ineq_rhs).max() <= tol_p;
    let bounds_ok = (0..n).all(|j| x[j] >= spec.lower[j] - tol_p && x[j] <= spec.upper[j] + tol_p);
    let sign_ok = duals_ineq.iter().all(|&z| z >= -tol_d)
        && (0..n).all(|j| duals_lower[j] >= -tol_d && duals_upper[j] >= -tol_d);
    if !(eq_ok && ineq_ok && bounds_ok && sign_ok) {
        return None;
    }
    for j in 0..n {
        x[j] = x[j].clamp(spec.lower[j], spec.upper[j]);
        duals_lower[j] = duals_lower[j].max(0.0);
        duals_upper[j] = duals_upper[j].max(0.0);
    }
    duals_ineq.iter_mut().for_each(|z| *z = z.max(0.0));

    let sol = QpSolution {
        objective: spec.objective(&x),
        x,
        duals_eq,
        duals_ineq,
        duals_lower,
        duals_upper,
        status: QpStatus::Optimal,
        polished: true,
        diagnostics: None,
    };
    (kkt_residuals(spec, &sol).max() <= 1e-8 * scale_d.max(scale_p)).then_some(sol)
}

/// Infinity-norm KKT residuals of a candidate solution, computed from the
/// problem data only.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct KktResiduals {
    pub stationarity: f64,
    pub primal_eq: f64,
    pub primal_ineq: f64,
    pub bounds: f64,
    pub dual_sign: f64,
    pub complementarity: f64,
}

impl KktResiduals {
    pub fn max(&self) -> f64 {
        [
            self.stationarity,
            self.primal_eq,
            self.primal_ineq,
            self.bounds,
            self.dual_sign,
            self.complementarity,
        ]
        .into_iter()
        .fold(0.0, f64::max)
    }
}

pub fn kkt_residuals(spec: &QpSpec, sol: &QpSolution) -> KktResiduals {
    let n = spec.num_vars();
    let x = &sol.x;
    let grad = &spec.quad * x
        + &spec.lin
        + spec.eq_mat.tr_mul(&sol.duals_eq)
        + spec.ineq_mat.tr_mul(&sol.duals_ineq)
        - &sol.duals_lower
        + &sol.duals_upper;
    let eq = &spec.eq_mat * x - &spec.eq_rhs;
    let slack = &spec.ineq_rhs - &spec.ineq_mat * x;
    let mut r = KktResiduals {
        stationarity: grad.amax(),
        primal_eq: if eq.is_empty() { 0.0 } else { eq.amax() },
        ..Default::default()
    };
    for (i, s) in slack.iter().enumerate() {
        let z = sol.duals_ineq[i];
        r.primal_ineq = r.primal_ineq.max(-s);
        r.dual_sign = r.dual_sign.max(-z);
        r.complementarity = r.complementarity.max((z * s).abs());
    }
    for j in 0..n {
        let (l, u) = (spec.lower[j], spec.upper[j]);
        r.bounds = r.bounds.max(l - x[j]).max(x[j] - u);
        r.dual_sign = r
            .dual_sign
            .max(-sol.duals_lower[j])
            .max(-sol.duals_upper[j]);
        if l.is_finite() {
            r.complementarity = r
                .complementarity
                .max((sol.duals_lower[j] * (x[j] - l)).abs());
        } else {
            r.complementarity = r.complementarity.max(sol.duals_lower[j].abs());
        }
        if u.is_finite() {
            r.complementarity = r
                .complementarity
                .max((sol.duals_upper[j] * (u - x[j])).abs());
        } else {
            r.complementarity = r.complementarity.max(sol.duals_upper[j].abs());
        }
    }
    r
}
