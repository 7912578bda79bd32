//! Difference-of-convex algorithm for the bilinear penalty problem
//!
//! ```text
//! minimize  cᵀy + ρ yᵀv   over the network equalities, A d >= f, y, v >= 0.
//! ```
//!
//! The objective splits as `f = f1 − f2` with `f1 = cᵀy + ρ/4 ‖y + v‖²` and
//! `f2 = ρ/4 ‖y − v‖²`. Each iteration replaces `f2` by its linearization at
//! the current iterate and solves the resulting convex QP; the objective
//! sequence is therefore non-increasing.

use std::collections::VecDeque;
use std::io::Write;

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::formulation::{stack_trace, GeneralForm, InputDomain, StackedPoint};
use crate::network::ReluNetwork;
use crate::qp::{ClarabelBackend, QpBackend, QpSpec, QpTolerances};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopRule {
    /// `f(k) − f(k+1) <= eps_tol`.
    Absolute,
    /// `(f(k) − f(k+1)) / (1 + |f(k+1)|) <= eps_tol`.
    Relative,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DcaConfig {
    pub rho: f64,
    pub eps_tol: f64,
    pub max_iters: usize,
    pub comp_tol: f64,
    /// Trajectory CSV stride; the final iterate is always written.
    pub log_every: usize,
    pub stop_rule: StopRule,
    /// Number of trailing iterates retained for restarts.
    pub history: usize,
}

impl Default for DcaConfig {
    fn default() -> Self {
        DcaConfig {
            rho: 1.0,
            eps_tol: 1e-8,
            max_iters: 200_000,
            comp_tol: 1e-6,
            log_every: 1,
            stop_rule: StopRule::Absolute,
            history: 10,
        }
    }
}

impl DcaConfig {
    pub fn with_rho(&self, rho: f64) -> Self {
        DcaConfig {
            rho,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.rho > 0.0
            && self.rho.is_finite()
            && self.eps_tol > 0.0
            && self.comp_tol > 0.0
            && self.max_iters > 0;
        if ok {
            Ok(())
        } else {
            Err(Error::Schema(format!(
                "DCA needs rho > 0, eps_tol > 0, comp_tol > 0 and max_iters > 0 (got {self:?})"
            )))
        }
    }
}

/// Objective split at one point. `f = objective + penalty = f1 − f2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DcValues {
    pub f: f64,
    pub f1: f64,
    pub f2: f64,
    /// `cᵀy` without the constant offset.
    pub objective: f64,
    /// `ρ yᵀv`.
    pub penalty: f64,
}

pub fn dc_objective(gf: &GeneralForm, rho: f64, y: &DVector<f64>, v: &DVector<f64>) -> DcValues {
    let objective = gf.c.dot(y);
    let penalty = rho * y.dot(v);
    let sum = y + v;
    let diff = y - v;
    let f2 = 0.25 * rho * diff.norm_squared();
    DcValues {
        f: objective + penalty,
        f1: objective + 0.25 * rho * sum.norm_squared(),
        f2,
        objective,
        penalty,
    }
}

/// The convex subproblem at `(y_k, v_k)`: `f1` minus the linearization of
/// `f2`, over the feasible set of the general form.
pub fn build_subproblem(
    gf: &GeneralForm,
    rho: f64,
    y_k: &DVector<f64>,
    v_k: &DVector<f64>,
) -> Result<QpSpec> {
    let h = gf.hidden_count();
    Error::check_len("y_k", h, y_k.len())?;
    Error::check_len("v_k", h, v_k.len())?;
    let lay = gf.layout();
    let mut spec = gf.feasible_set_qp();
    // ½xᵀQx = ρ/4 ‖y + v‖²
    let half = 0.5 * rho;
    for i in 0..h {
        let (yi, vi) = (lay.y(i), lay.v(i));
        spec.quad[(yi, yi)] = half;
        spec.quad[(vi, vi)] = half;
        spec.quad[(yi, vi)] = half;
        spec.quad[(vi, yi)] = half;
        let slope = half * (y_k[i] - v_k[i]);
        spec.lin[yi] = gf.c[i] - slope;
        spec.lin[vi] = slope;
    }
    Ok(spec)
}

/// A feasible starting point: `d` drawn from the domain, `(y, v)` from the
/// network trace, so complementarity holds as well.
pub fn initial_guess(net: &ReluNetwork, dom: &InputDomain, seed: u64) -> Result<StackedPoint> {
    dom.validate()?;
    Error::check_len("domain", net.input_dim(), dom.dim())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = dom.sample(&mut rng);
    Ok(stack_trace(&net.trace(&d)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DcaStatus {
    ConvergedComplementary,
    ConvergedNoncomplementary,
    IterationCap,
    SubproblemFailure,
}

impl DcaStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            DcaStatus::ConvergedComplementary => "converged_complementary",
            DcaStatus::ConvergedNoncomplementary => "converged_noncomplementary",
            DcaStatus::IterationCap => "iteration_cap",
            DcaStatus::SubproblemFailure => "subproblem_failure",
        }
    }
}

impl std::fmt::Display for DcaStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DcaRecord {
    pub iter: usize,
    pub values: DcValues,
    pub max_comp: f64,
}

/// Lowest network-consistent objective seen along the run.
#[derive(Debug, Clone, PartialEq)]
pub struct BestIterate {
    pub iter: usize,
    pub d: DVector<f64>,
    /// True network objective at `d`, offset included.
    pub objective: f64,
}

#[derive(Debug, Clone)]
pub struct SubproblemFailure {
    pub iteration: usize,
    pub status: String,
}

#[derive(Debug, Clone)]
pub struct DcaResult {
    pub d_star: DVector<f64>,
    pub y: DVector<f64>,
    pub v: DVector<f64>,
    /// `cᵀy + offset` at the final iterate.
    pub objective: f64,
    /// `max_i y_i v_i` at the final iterate.
    pub penalty_residual: f64,
    /// `penalty_residual / (1 + ‖y‖∞ ‖v‖∞)`.
    pub scaled_residual: f64,
    pub iterations: usize,
    pub status: DcaStatus,
    pub rho: f64,
    /// Record 0 is the starting point; record k follows the k-th subproblem.
    pub trace: Vec<DcaRecord>,
    pub best: Option<BestIterate>,
    pub failure: Option<SubproblemFailure>,
    /// Trailing iterates, oldest first, ending with the final one.
    pub history: VecDeque<StackedPoint>,
}

impl DcaResult {
    pub fn point(&self) -> StackedPoint {
        StackedPoint {
            d: self.d_star.clone(),
            y: self.y.clone(),
            v: self.v.clone(),
        }
    }

    /// Largest increase `f(k+1) − f(k)` along the trace (negative if the
    /// sequence strictly decreased).
    pub fn worst_ascent(&self) -> f64 {
        self.trace
            .windows(2)
            .map(|w| w[1].values.f - w[0].values.f)
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// Iterate `steps` before the final one, clamped to the retained history.
    pub fn stepped_back(&self, steps: usize) -> &StackedPoint {
        let idx = self.history.len().saturating_sub(1 + steps);
        &self.history[idx]
    }

    /// Writes `iter,f,objective_part,penalty_part,max_comp_residual` rows.
    /// `f` and `objective_part` include the constant offset.
    pub fn write_trajectory(
        &self,
        mut out: impl Write,
        offset: f64,
        log_every: usize,
    ) -> std::io::Result<()> {
        writeln!(out, "iter,f,objective_part,penalty_part,max_comp_residual")?;
        let stride = log_every.max(1);
        let last = self.trace.len().saturating_sub(1);
        for (k, r) in self.trace.iter().enumerate() {
            if k % stride == 0 || k == last {
                writeln!(
                    out,
                    "{},{:?},{:?},{:?},{:?}",
                    r.iter,
                    r.values.f + offset,
                    r.values.objective + offset,
                    r.values.penalty,
                    r.max_comp
                )?;
            }
        }
        Ok(())
    }
}

fn feasibility_violation(gf: &GeneralForm, p: &StackedPoint) -> f64 {
    let net = gf.network_residual(p).amax();
    let dom = gf.domain_slack(&p.d).min().min(0.0).abs();
    let sign = p.y.min().min(p.v.min()).min(0.0).abs();
    net.max(dom).max(sign)
}

pub fn dca_solve(gf: &GeneralForm, cfg: &DcaConfig, init: &StackedPoint) -> Result<DcaResult> {
    dca_solve_with(&ClarabelBackend, gf, cfg, init)
}

pub fn dca_solve_with(
    backend: &dyn QpBackend,
    gf: &GeneralForm,
    cfg: &DcaConfig,
    init: &StackedPoint,
) -> Result<DcaResult> {
    cfg.validate()?;
    let h = gf.hidden_count();
    Error::check_len("initial d", gf.input_dim(), init.d.len())?;
    Error::check_len("initial y", h, init.y.len())?;
    Error::check_len("initial v", h, init.v.len())?;
    let infeas = feasibility_violation(gf, init);
    if infeas > 1e-7 {
        return Err(Error::Infeasible(format!(
            "initial point violates the constraints by {infeas:e}"
        )));
    }

    let lay = gf.layout();
    let tol = QpTolerances {
        check_psd: false,
        ..QpTolerances::default()
    };
    let mut current = init.clone();
    let mut values = dc_objective(gf, cfg.rho, &current.y, &current.v);
    let mut trace = vec![DcaRecord {
        iter: 0,
        values,
        max_comp: current.complementarity(),
    }];
    let keep = cfg.history.max(1) + 1;
    let mut history = VecDeque::with_capacity(keep);
    history.push_back(current.clone());
    let mut best = None;
    track_best(gf, cfg, 0, &current, &mut best);

    let mut status = DcaStatus::IterationCap;
    let mut failure = None;
    for k in 1..=cfg.max_iters {
        let spec = build_subproblem(gf, cfg.rho, &current.y, &current.v)?;
        let sol = backend.solve(&spec, &tol);
        if !sol.is_optimal() {
            status = DcaStatus::SubproblemFailure;
            failure = Some(SubproblemFailure {
                iteration: k,
                status: format!(
                    "{}{}",
                    sol.status,
                    sol.diagnostics
                        .map(|d| format!(" ({d})"))
                        .unwrap_or_default()
                ),
            });
            break;
        }
        let next = lay.unpack(&sol.x);
        let next_values = dc_objective(gf, cfg.rho, &next.y, &next.v);
        let decrease = values.f - next_values.f;
        trace.push(DcaRecord {
            iter: k,
            values: next_values,
            max_comp: next.complementarity(),
        });
        track_best(gf, cfg, k, &next, &mut best);
        if history.len() == keep {
            history.pop_front();
        }
        history.push_back(next.clone());
        current = next;
        values = next_values;

        let stop = match cfg.stop_rule {
            StopRule::Absolute => decrease <= cfg.eps_tol,
            StopRule::Relative => decrease / (1.0 + values.f.abs()) <= cfg.eps_tol,
        };
        if stop {
            status = DcaStatus::ConvergedNoncomplementary;
            break;
        }
    }

    let penalty_residual = current.complementarity();
    if status == DcaStatus::ConvergedNoncomplementary && penalty_residual <= cfg.comp_tol {
        status = DcaStatus::ConvergedComplementary;
    }
    let scale = 1.0 + current.y.amax() * current.v.amax();
    Ok(DcaResult {
        objective: gf.c.dot(&current.y) + gf.obj_offset,
        penalty_residual,
        scaled_residual: penalty_residual / scale,
        iterations: trace.len() - 1,
        status,
        rho: cfg.rho,
        trace,
        best,
        failure,
        history,
        d_star: current.d,
        y: current.y,
        v: current.v,
    })
}

fn track_best(
    gf: &GeneralForm,
    cfg: &DcaConfig,
    iter: usize,
    p: &StackedPoint,
    best: &mut Option<BestIterate>,
) {
    if p.complementarity() > cfg.comp_tol {
        return;
    }
    let Ok((_, objective)) = gf.evaluate(&p.d) else {
        return;
    };
    if best.as_ref().is_none_or(|b| objective < b.objective) {
        *best = Some(BestIterate {
            iter,
            d: p.d.clone(),
            objective,
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::formulation::{assemble, CostSpec};
    use crate::testutil::{one_neuron, random_net};
    use rand::Rng;

    fn one_neuron_problem() -> (ReluNetwork, InputDomain, GeneralForm) {
        let net = one_neuron(2.0, 1.0);
        let dom = InputDomain::boxed(vec![-1.0], vec![1.0]).unwrap();
        let gf = assemble(&net, &dom, &CostSpec::minimize_output()).unwrap();
        (net, dom, gf)
    }

    #[test]
    fn penalty_identity_by_hand() {
        let (_, _, gf) = one_neuron_problem();
        let y = DVector::from_element(1, 2.0);
        let v = DVector::from_element(1, 3.0);
        let vals = dc_objective(&gf, 4.0, &y, &v);
        assert_eq!(vals.penalty, 24.0);
        assert_eq!(vals.f1 - vals.objective, 25.0);
        assert_eq!(vals.f2, 1.0);
        assert_eq!(vals.f, vals.f1 - vals.f2);
        let vals = dc_objective(&gf, 4.0, &y, &DVector::zeros(1));
        assert_eq!(vals.f, gf.c.dot(&y));
    }

    #[test]
    fn subproblem_coefficients() {
        let (_, _, gf) = one_neuron_problem();
        let lay = gf.layout();
        let spec =
            build_subproblem(&gf, 4.0, &DVector::from_element(1, 2.0), &DVector::zeros(1)).unwrap();
        assert_eq!(spec.lin[lay.y(0)], gf.c[0] - 4.0);
        assert_eq!(spec.lin[lay.v(0)], 4.0);
        let x = DVector::from_vec(vec![0.0, 1.0, 1.0]);
        assert_eq!(0.5 * x.dot(&(&spec.quad * &x)), 4.0);

        let same = DVector::from_element(1, 1.5);
        let spec = build_subproblem(&gf, 4.0, &same, &same).unwrap();
        assert_eq!(spec.lin[lay.y(0)], gf.c[0]);
        assert_eq!(spec.lin[lay.v(0)], 0.0);
        assert!(build_subproblem(&gf, 4.0, &DVector::zeros(2), &DVector::zeros(1)).is_err());
    }

    #[test]
    fn initial_guess_is_feasible_and_seeded() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = random_net(&mut rng, 2, &[3], 1);
        let dom = InputDomain::new(vec![0.0; 2], vec![1.0; 2], Some(1.0)).unwrap();
        let p = initial_guess(&net, &dom, 5).unwrap();
        assert!((p.d.sum() - 1.0).abs() < 1e-12);
        assert!(p.d.iter().all(|x| (0.0..=1.0).contains(x)));
        assert!(p.y.iter().zip(p.v.iter()).all(|(y, v)| y.min(*v) == 0.0));
        let q = initial_guess(&net, &dom, 6).unwrap();
        assert_ne!(p.d, q.d);
    }

    #[test]
    fn one_neuron_reaches_zero() {
        let (net, dom, gf) = one_neuron_problem();
        for seed in 0..10 {
            let init = initial_guess(&net, &dom, seed).unwrap();
            let res = dca_solve(&gf, &DcaConfig::default().with_rho(2.0), &init).unwrap();
            assert_eq!(res.status, DcaStatus::ConvergedComplementary, "seed {seed}");
            assert!(
                res.objective.abs() <= 1e-9,
                "seed {seed}: {}",
                res.objective
            );
            assert!(res.penalty_residual <= 1e-12);
            assert!(res.worst_ascent() <= 1e-8);
            assert!(res.best.as_ref().unwrap().objective <= 1e-9);
        }
    }

    #[test]
    fn fixed_point_stops_after_one_iteration() {
        let (net, _, gf) = one_neuron_problem();
        // d = -1 is inactive with y = 0: the subproblem optimum stays there.
        let init = stack_trace(&net.trace(&[-1.0]).unwrap());
        let res = dca_solve(&gf, &DcaConfig::default().with_rho(2.0), &init).unwrap();
        assert_eq!(res.iterations, 1);
        assert_eq!(res.trace[0].values.f, res.trace[1].values.f);
    }

    #[test]
    fn rejects_infeasible_start_and_bad_config() {
        let (_, _, gf) = one_neuron_problem();
        let bad = StackedPoint {
            d: DVector::from_element(1, 0.0),
            y: DVector::from_element(1, 5.0),
            v: DVector::zeros(1),
        };
        assert!(matches!(
            dca_solve(&gf, &DcaConfig::default(), &bad),
            Err(Error::Infeasible(_))
        ));
        let ok = StackedPoint {
            d: DVector::from_element(1, 0.0),
            y: DVector::from_element(1, 1.0),
            v: DVector::zeros(1),
        };
        assert!(dca_solve(&gf, &DcaConfig::default().with_rho(0.0), &ok).is_err());
    }

    #[test]
    fn descent_on_random_networks() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for trial in 0..10 {
            let net = random_net(&mut rng, 2, &[4, 4], 1);
            let dom = InputDomain::boxed(vec![-1.0; 2], vec![1.0; 2]).unwrap();
            let gf = assemble(&net, &dom, &CostSpec::minimize_output()).unwrap();
            let init = initial_guess(&net, &dom, trial).unwrap();
            let rho = rng.gen_range(0.5..5.0);
            let res = dca_solve(&gf, &DcaConfig::default().with_rho(rho), &init).unwrap();
            assert_ne!(res.status, DcaStatus::SubproblemFailure);
            assert!(
                res.worst_ascent() <= 1e-8,
                "trial {trial}: {}",
                res.worst_ascent()
            );
            for p in &res.history {
                assert!(feasibility_violation(&gf, p) <= 1e-7);
            }
            if res.status == DcaStatus::ConvergedComplementary {
                let lam = net.forward(res.d_star.as_slice()).unwrap()[0];
                assert!((lam - res.objective).abs() <= 1e-6 * (1.0 + lam.abs()));
            }
        }
    }

    #[test]
    fn trajectory_csv_stride() {
        let (net, dom, gf) = one_neuron_problem();
        let init = initial_guess(&net, &dom, 3).unwrap();
        let res = dca_solve(&gf, &DcaConfig::default().with_rho(2.0), &init).unwrap();
        let mut buf = Vec::new();
        res.write_trajectory(&mut buf, gf.obj_offset, 1000).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(
            lines[0],
            "iter,f,objective_part,penalty_part,max_comp_residual"
        );
        assert!(lines[1].starts_with("0,"));
        assert!(lines
            .last()
            .unwrap()
            .starts_with(&format!("{},", res.iterations)));
    }
}

#[cfg(test)]
mod props {
    use super::*;
    use crate::formulation::{assemble, CostSpec};
    use crate::testutil::one_neuron;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn bilinear_and_quarter_squares_forms_agree(
            y in 0.0f64..100.0,
            v in 0.0f64..100.0,
            rho in 1e-3f64..1e3,
        ) {
            let net = one_neuron(1.0, 0.0);
            let dom = InputDomain::boxed(vec![0.0], vec![1.0]).unwrap();
            let gf = assemble(&net, &dom, &CostSpec::minimize_output()).unwrap();
            let y = DVector::from_element(1, y);
            let v = DVector::from_element(1, v);
            let vals = dc_objective(&gf, rho, &y, &v);
            let scale = 1.0 + vals.f1.abs().max(vals.f2.abs());
            prop_assert!((vals.f - (vals.f1 - vals.f2)).abs() <= 1e-10 * scale);
        }
    }
}
