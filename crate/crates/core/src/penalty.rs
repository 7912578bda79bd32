//! Penalty selection.
//!
//! A non-degenerate feasible point fixes every neuron as active or inactive.
//! The LP over that activation pattern gives a strongly stationary point; its
//! multipliers bound the smallest penalty `ρ̄` for which the point is also
//! stationary for the bilinear problem. DCA is then run over a short schedule
//! of multiples of `ρ̄` until it returns a complementary solution.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dca::{dca_solve, initial_guess, DcaConfig, DcaResult, DcaStatus};
use crate::error::{Error, Result};
use crate::formulation::{stack_trace, GeneralForm, InputDomain, StackedPoint};
use crate::network::{ReluNetwork, DEGENERACY_TOL};
use crate::qp::{solve_qp, QpSpec, QpTolerances};

/// Primal values at or below this are treated as zero when reading off
/// active constraints at the stationary point.
pub const ACTIVE_TOL: f64 = 1e-8;

/// Denominators at or below this contribute no ratio to `ρ̄`.
pub const RATIO_TOL: f64 = 1e-9;

/// Tolerance on the relaxation KKT residual for accepting multipliers.
pub const KKT_TOL: f64 = 1e-6;
/// Multipliers at or below this magnitude are treated as zero when bounding ρ.
pub const MULTIPLIER_TOL: f64 = 1e-12;
/// Mixed into the certification seed to draw DCA starts from their own stream.
pub const STARTS_SALT: u64 = 0x5_eed0_fd0a;

pub const DEFAULT_SCHEDULE: [f64; 8] = [1.2, 1.5, 2.0, 4.0, 8.0, 16.0, 32.0, 64.0];

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct IndexSets {
    /// Inactive: `y_i = 0 < v_i`.
    pub i_y: Vec<usize>,
    /// Active: `y_i > 0 = v_i`.
    pub i_v: Vec<usize>,
    /// Degenerate: `y_i = 0 = v_i`.
    pub i_0: Vec<usize>,
}

impl IndexSets {
    /// Classifies by pre-activation `y_i − v_i` under the degeneracy tolerance.
    pub fn classify(p: &StackedPoint) -> Self {
        let mut sets = IndexSets::default();
        for (i, (y, v)) in p.y.iter().zip(p.v.iter()).enumerate() {
            let a = y - v;
            if a > DEGENERACY_TOL {
                sets.i_v.push(i);
            } else if a < -DEGENERACY_TOL {
                sets.i_y.push(i);
            } else {
                sets.i_0.push(i);
            }
        }
        sets
    }

    pub fn len(&self) -> usize {
        self.i_y.len() + self.i_v.len() + self.i_0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone)]
pub struct Sample {
    pub point: StackedPoint,
    pub sets: IndexSets,
    pub tries: usize,
}

pub fn sample_nondegenerate(
    net: &ReluNetwork,
    dom: &InputDomain,
    max_tries: usize,
    seed: u64,
) -> Result<Sample> {
    dom.validate()?;
    Error::check_len("domain", net.input_dim(), dom.dim())?;
    if max_tries == 0 {
        return Err(Error::Schema("max_tries must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut stuck_counts = vec![0usize; net.hidden_count()];
    for tries in 1..=max_tries {
        let d = dom.sample(&mut rng);
        let trace = net.trace(&d)?;
        let degenerate = trace.degenerate();
        if degenerate.is_empty() {
            let point = stack_trace(&trace);
            let sets = IndexSets::classify(&point);
            return Ok(Sample { point, sets, tries });
        }
        for i in degenerate {
            stuck_counts[i] += 1;
        }
    }
    let stuck = (0..stuck_counts.len())
        .filter(|&i| stuck_counts[i] == max_tries)
        .collect();
    Err(Error::DegenerateNetwork {
        tries: max_tries,
        stuck,
    })
}

/// Multipliers of the relaxation under the Lagrangian
/// `cᵀy − λᵀ(Ad − f) − μᵀ(Vd + Wy + b − v) − μʸᵀy − μᵛᵀv`.
/// Stationarity in `v` forces `μᵛ = μ`, so one vector serves both roles.
#[derive(Debug, Clone, PartialEq)]
pub struct RelaxationDuals {
    pub lambda: DVector<f64>,
    pub mu_v: DVector<f64>,
    pub mu_y: DVector<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DualSource {
    Backend,
    FeasibilityLp,
}

#[derive(Debug, Clone)]
pub struct Relaxation {
    pub point: StackedPoint,
    pub duals: RelaxationDuals,
    pub source: DualSource,
    pub kkt: RelaxationResidual,
}

fn relaxation_lp(gf: &GeneralForm, sets: &IndexSets) -> QpSpec {
    let lay = gf.layout();
    let mut spec = gf.feasible_set_qp();
    for i in 0..lay.h {
        spec.lin[lay.y(i)] = gf.c[i];
    }
    for &i in &sets.i_y {
        spec.upper[lay.y(i)] = 0.0;
    }
    for &i in &sets.i_v {
        spec.upper[lay.v(i)] = 0.0;
    }
    spec
}

enum RelaxOutcome {
    Certified(Relaxation),
    /// LP optimum whose multipliers fail the sign conditions.
    NotStationary {
        point: StackedPoint,
        backend: RelaxationDuals,
    },
}

fn relax(gf: &GeneralForm, sets: &IndexSets) -> Result<RelaxOutcome> {
    check_sets(gf, sets)?;
    if !sets.i_0.is_empty() {
        return Err(Error::RelaxationFailed(format!(
            "degenerate neurons {:?} in the index sets",
            sets.i_0
        )));
    }
    let lay = gf.layout();
    let spec = relaxation_lp(gf, sets);
    let sol = solve_qp(&spec, &QpTolerances::default());
    if !sol.is_optimal() {
        return Err(Error::RelaxationFailed(format!("LP status {}", sol.status)));
    }
    let point = lay.unpack(&sol.x);
    let mut mu_y = DVector::zeros(lay.h);
    for i in 0..lay.h {
        mu_y[i] = sol.duals_lower[lay.y(i)] - sol.duals_upper[lay.y(i)];
    }
    let backend = RelaxationDuals {
        lambda: gf.domain_duals(&sol),
        mu_v: gf.network_duals(&sol),
        mu_y,
    };
    let kkt = relaxation_residual(gf, sets, &point, &backend);
    if kkt.max() <= KKT_TOL {
        return Ok(RelaxOutcome::Certified(Relaxation {
            point,
            duals: backend,
            source: DualSource::Backend,
            kkt,
        }));
    }
    match recover_duals_via_kkt(gf, sets, &point) {
        Ok(duals) => {
            let kkt = relaxation_residual(gf, sets, &point, &duals);
            Ok(RelaxOutcome::Certified(Relaxation {
                point,
                duals,
                source: DualSource::FeasibilityLp,
                kkt,
            }))
        }
        Err(Error::StationarityViolation(_)) => Ok(RelaxOutcome::NotStationary { point, backend }),
        Err(e) => Err(e),
    }
}

/// Solves the LP over the activation pattern fixed by `sets` and returns its
/// optimum with multipliers satisfying the relaxation KKT system.
///
/// Neurons that end with `y_i = v_i = 0` must carry nonnegative multipliers
/// on both sides; when no such multipliers exist the optimum lies on the
/// boundary of a pattern that still descends, and a stationarity error is
/// returned.
pub fn solve_relaxation(gf: &GeneralForm, sets: &IndexSets) -> Result<Relaxation> {
    match relax(gf, sets)? {
        RelaxOutcome::Certified(r) => Ok(r),
        RelaxOutcome::NotStationary { point, .. } => Err(Error::StationarityViolation(format!(
            "relaxed optimum has neurons {:?} at y = v = 0 with descent across the boundary",
            biactive(&point)
        ))),
    }
}

/// Moves boundary neurons whose multiplier signals descent into the
/// neighbouring pattern. Returns false when nothing moved.
fn flip_descending(sets: &mut IndexSets, point: &StackedPoint, duals: &RelaxationDuals) -> bool {
    let mut moved = false;
    for i in biactive(point) {
        if let Some(k) = sets.i_y.iter().position(|&j| j == i) {
            if duals.mu_y[i] < -KKT_TOL {
                sets.i_y.remove(k);
                sets.i_v.push(i);
                moved = true;
            }
        } else if let Some(k) = sets.i_v.iter().position(|&j| j == i) {
            if duals.mu_v[i] < -KKT_TOL {
                sets.i_v.remove(k);
                sets.i_y.push(i);
                moved = true;
            }
        }
    }
    sets.i_y.sort_unstable();
    sets.i_v.sort_unstable();
    moved
}

fn check_sets(gf: &GeneralForm, sets: &IndexSets) -> Result<()> {
    let h = gf.hidden_count();
    let mut seen = vec![false; h];
    for &i in sets.i_y.iter().chain(&sets.i_v).chain(&sets.i_0) {
        if i >= h || seen[i] {
            return Err(Error::Schema(format!(
                "index sets do not partition 0..{h} (offending index {i})"
            )));
        }
        seen[i] = true;
    }
    if seen.iter().any(|s| !s) {
        return Err(Error::Schema(format!("index sets do not cover 0..{h}")));
    }
    Ok(())
}

/// Neurons where both `y` and `v` vanish at the given point.
fn biactive(p: &StackedPoint) -> Vec<usize> {
    (0..p.y.len())
        .filter(|&i| p.y[i] <= ACTIVE_TOL && p.v[i] <= ACTIVE_TOL)
        .collect()
}

/// Solves the relaxation KKT system for multipliers with the primal point
/// fixed. Among feasible multipliers the one of least Euclidean norm is
/// returned. Neurons with `y_i = v_i = 0` at `primal` get both sign
/// conditions, which is what makes the point stationary for the bilinear
/// problem as well.
pub fn recover_duals_via_kkt(
    gf: &GeneralForm,
    sets: &IndexSets,
    primal: &StackedPoint,
) -> Result<RelaxationDuals> {
    check_sets(gf, sets)?;
    let (n, h, m) = (gf.input_dim(), gf.hidden_count(), gf.a.nrows());
    // Variables [λ (m), μ (h), μʸ (h)].
    let nv = m + 2 * h;
    let (lam0, mu0, muy0) = (0, m, m + h);
    let mut eq = DMatrix::zeros(n + h, nv);
    let mut rhs = DVector::zeros(n + h);
    // Aᵀλ + Vᵀμ = 0
    eq.view_mut((0, lam0), (n, m)).copy_from(&gf.a.transpose());
    eq.view_mut((0, mu0), (n, h)).copy_from(&gf.v.transpose());
    // Wᵀμ + μʸ = c
    eq.view_mut((n, mu0), (h, h)).copy_from(&gf.w.transpose());
    eq.view_mut((n, muy0), (h, h)).fill_with_identity();
    rhs.rows_mut(n, h).copy_from(&gf.c);

    let mut spec = QpSpec::new(nv).with_equalities(eq, rhs);
    spec.quad.fill_with_identity();
    let slack = gf.domain_slack(&primal.d);
    for k in 0..m {
        spec.lower[lam0 + k] = 0.0;
        if slack[k] > ACTIVE_TOL {
            spec.upper[lam0 + k] = 0.0;
        }
    }
    let mut fix_zero = |idx: usize| {
        spec.lower[idx] = 0.0;
        spec.upper[idx] = 0.0;
    };
    for i in 0..h {
        if primal.y[i] > ACTIVE_TOL {
            fix_zero(muy0 + i);
        }
        if primal.v[i] > ACTIVE_TOL {
            fix_zero(mu0 + i);
        }
    }
    for &i in &sets.i_v {
        spec.lower[muy0 + i] = spec.lower[muy0 + i].max(0.0);
    }
    for &i in &sets.i_y {
        spec.lower[mu0 + i] = spec.lower[mu0 + i].max(0.0);
    }
    for i in biactive(primal) {
        spec.lower[muy0 + i] = spec.lower[muy0 + i].max(0.0);
        spec.lower[mu0 + i] = spec.lower[mu0 + i].max(0.0);
    }

    let sol = solve_qp(&spec, &QpTolerances::default());
    if !sol.is_optimal() {
        return Err(Error::StationarityViolation(format!(
            "multiplier system has status {}",
            sol.status
        )));
    }
    let duals = RelaxationDuals {
        lambda: sol.x.rows(lam0, m).into_owned(),
        mu_v: sol.x.rows(mu0, h).into_owned(),
        mu_y: sol.x.rows(muy0, h).into_owned(),
    };
    let res = relaxation_residual(gf, sets, primal, &duals);
    if res.max() > KKT_TOL {
        return Err(Error::StationarityViolation(format!(
            "best multipliers leave residual {:e}",
            res.max()
        )));
    }
    Ok(duals)
}

/// Infinity-norm residuals of the relaxation KKT system, including primal
/// feasibility and the pattern fixings.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RelaxationResidual {
    /// `Aᵀλ + Vᵀμ = 0`.
    pub stationarity_d: f64,
    /// `Wᵀμ + μʸ = c`.
    pub stationarity_y: f64,
    pub primal: f64,
    /// `λ ⊥ Ad − f`, `y ∘ μʸ`, `v ∘ μᵛ`.
    pub complementarity: f64,
    /// `λ >= 0`, `μʸ_i >= 0` on active, `μᵛ_i >= 0` on inactive and on
    /// neurons with `y_i = v_i = 0`.
    pub sign: f64,
}

impl RelaxationResidual {
    pub fn max(&self) -> f64 {
        self.stationarity_d
            .max(self.stationarity_y)
            .max(self.primal)
            .max(self.complementarity)
            .max(self.sign)
    }
}

fn neg(x: f64) -> f64 {
    (-x).max(0.0)
}

fn primal_violation(gf: &GeneralForm, p: &StackedPoint) -> f64 {
    let net = gf.network_residual(p).amax();
    let dom = gf
        .domain_slack(&p.d)
        .iter()
        .copied()
        .map(neg)
        .fold(0.0, f64::max);
    let sign =
        p.y.iter()
            .chain(p.v.iter())
            .copied()
            .map(neg)
            .fold(0.0, f64::max);
    net.max(dom).max(sign)
}

pub fn relaxation_residual(
    gf: &GeneralForm,
    sets: &IndexSets,
    p: &StackedPoint,
    duals: &RelaxationDuals,
) -> RelaxationResidual {
    let slack = gf.domain_slack(&p.d);
    let stat_d = gf.a.tr_mul(&duals.lambda) + gf.v.tr_mul(&duals.mu_v);
    let stat_y = gf.w.tr_mul(&duals.mu_v) + &duals.mu_y - &gf.c;

    let mut primal = primal_violation(gf, p);
    for &i in &sets.i_y {
        primal = primal.max(p.y[i].abs());
    }
    for &i in &sets.i_v {
        primal = primal.max(p.v[i].abs());
    }

    let mut comp: f64 = 0.0;
    for k in 0..slack.len() {
        comp = comp.max((duals.lambda[k] * slack[k]).abs());
    }
    for i in 0..p.y.len() {
        comp = comp.max((p.y[i] * duals.mu_y[i]).abs());
        comp = comp.max((p.v[i] * duals.mu_v[i]).abs());
    }

    let mut sign = duals.lambda.iter().copied().map(neg).fold(0.0, f64::max);
    for &i in &sets.i_v {
        sign = sign.max(neg(duals.mu_y[i]));
    }
    for &i in &sets.i_y {
        sign = sign.max(neg(duals.mu_v[i]));
    }
    for i in biactive(p) {
        sign = sign.max(neg(duals.mu_y[i])).max(neg(duals.mu_v[i]));
    }

    RelaxationResidual {
        stationarity_d: stat_d.amax(),
        stationarity_y: stat_y.amax(),
        primal,
        complementarity: comp,
        sign,
    }
}

/// Largest violation of the bilinear-problem KKT conditions at `p` with
/// multipliers `λ`, `μ` and penalty `ρ`:
///
/// ```text
/// Aᵀλ + Vᵀμ = 0
/// 0 <= y ⊥ c + ρv − Wᵀμ >= 0
/// 0 <= λ ⊥ Ad − f >= 0
/// 0 <= v ⊥ ρy + μ >= 0
/// ```
pub fn bilinear_residual(
    gf: &GeneralForm,
    p: &StackedPoint,
    lambda: &DVector<f64>,
    mu: &DVector<f64>,
    rho: f64,
) -> f64 {
    let stat_d = (gf.a.tr_mul(lambda) + gf.v.tr_mul(mu)).amax();
    let alpha = &gf.c + rho * &p.v - gf.w.tr_mul(mu);
    let beta = rho * &p.y + mu;
    let slack = gf.domain_slack(&p.d);
    let mut worst = stat_d.max(primal_violation(gf, p));
    for i in 0..p.y.len() {
        worst = worst
            .max(neg(alpha[i]))
            .max((alpha[i] * p.y[i]).abs())
            .max(neg(beta[i]))
            .max((beta[i] * p.v[i]).abs());
    }
    for k in 0..slack.len() {
        worst = worst.max(neg(lambda[k])).max((lambda[k] * slack[k]).abs());
    }
    worst
}

/// `max{0, −μʸ_i / v_i for v_i > 0, −μᵛ_i / y_i for y_i > 0}`.
pub fn compute_rho_bar(p: &StackedPoint, duals: &RelaxationDuals) -> f64 {
    let mut rho: f64 = 0.0;
    for i in 0..p.y.len() {
        if p.v[i] > RATIO_TOL && -duals.mu_y[i] > MULTIPLIER_TOL {
            rho = rho.max(-duals.mu_y[i] / p.v[i]);
        }
        if p.y[i] > RATIO_TOL && -duals.mu_v[i] > MULTIPLIER_TOL {
            rho = rho.max(-duals.mu_v[i] / p.y[i]);
        }
    }
    rho
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FineTuneEntry {
    pub start: usize,
    pub rho: f64,
    pub status: DcaStatus,
    pub iterations: usize,
    /// Objective at the final iterate, offset included.
    pub objective: f64,
}

#[derive(Debug, Clone)]
pub struct FineTuned {
    pub rho_star: f64,
    /// Start that produced `result`.
    pub start: usize,
    pub log: Vec<FineTuneEntry>,
    pub result: DcaResult,
}

/// Candidate penalties in the order they are tried.
pub fn candidate_penalties(rho_bar: f64, schedule: &[f64], floor: f64) -> Vec<f64> {
    let base = if rho_bar > 0.0 { rho_bar } else { floor };
    schedule.iter().map(|m| m * base).collect()
}

/// Walks the candidate penalties from one start, warm-starting each DCA run
/// at the final iterate of the previous one, until a run ends complementary.
fn walk_schedule(
    gf: &GeneralForm,
    cfg_base: &DcaConfig,
    rhos: &[f64],
    start: usize,
    init: &StackedPoint,
) -> Result<(Vec<FineTuneEntry>, Option<DcaResult>)> {
    let mut log = Vec::new();
    let mut current = init.clone();
    for &rho in rhos {
        let res = dca_solve(gf, &cfg_base.with_rho(rho), &current)?;
        log.push(FineTuneEntry {
            start,
            rho,
            status: res.status,
            iterations: res.iterations,
            objective: res.objective,
        });
        if res.status == DcaStatus::ConvergedComplementary {
            return Ok((log, Some(res)));
        }
        current = res.point();
    }
    Ok((log, None))
}

/// Raises the penalty through `schedule × ρ̄` from every start until DCA
/// returns a complementary point. The complementary result with the lowest
/// objective wins (ties to the earlier start) and its penalty is `ρ⋆`.
pub fn fine_tune(
    gf: &GeneralForm,
    cfg_base: &DcaConfig,
    rho_bar: f64,
    schedule: &[f64],
    floor: f64,
    starts: &[StackedPoint],
) -> Result<FineTuned> {
    if rho_bar.is_nan() || rho_bar < 0.0 || floor.is_nan() || floor <= 0.0 {
        return Err(Error::Schema(format!(
            "need rho_bar >= 0 and floor > 0, got {rho_bar} and {floor}"
        )));
    }
    if starts.is_empty() || schedule.is_empty() {
        return Err(Error::Schema(
            "fine-tuning needs starts and a schedule".into(),
        ));
    }
    let rhos = candidate_penalties(rho_bar, schedule, floor);
    let walks: Vec<(Vec<FineTuneEntry>, Option<DcaResult>)> = starts
        .par_iter()
        .enumerate()
        .map(|(k, s)| walk_schedule(gf, cfg_base, &rhos, k, s))
        .collect::<Result<_>>()?;
    let mut log = Vec::new();
    let mut best: Option<(usize, DcaResult)> = None;
    for (k, (entries, res)) in walks.into_iter().enumerate() {
        log.extend(entries);
        if let Some(r) = res {
            if best.as_ref().is_none_or(|(_, b)| r.objective < b.objective) {
                best = Some((k, r));
            }
        }
    }
    match best {
        Some((start, result)) => Ok(FineTuned {
            rho_star: result.rho,
            start,
            log,
            result,
        }),
        None => Err(Error::FineTuneFailed { log }),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CertifyConfig {
    pub seed: u64,
    /// Draws per non-degenerate sample.
    pub max_tries: usize,
    /// New samples tried when the relaxation does not certify.
    pub max_resamples: usize,
    /// Boundary flips per sample.
    pub max_flips: usize,
    pub schedule: Vec<f64>,
    /// Base penalty used when `ρ̄ = 0`.
    pub rho_floor: f64,
    /// DCA starts per candidate penalty.
    pub starts: usize,
}

impl Default for CertifyConfig {
    fn default() -> Self {
        CertifyConfig {
            seed: 0,
            max_tries: 1000,
            max_resamples: 20,
            max_flips: 64,
            schedule: DEFAULT_SCHEDULE.to_vec(),
            rho_floor: 1.0,
            starts: 8,
        }
    }
}

/// A strongly stationary point with its multipliers and penalty bound.
#[derive(Debug, Clone)]
pub struct StationaryCertificate {
    pub sample: Sample,
    /// Pattern of the certified relaxation; differs from the sample's when
    /// boundary neurons were flipped.
    pub sets: IndexSets,
    pub relaxation: Relaxation,
    pub rho_bar: f64,
    /// Samples discarded before this one certified.
    pub resamples: usize,
    pub flips: usize,
}

/// Samples, solves the relaxation and computes `ρ̄`. When the relaxed optimum
/// sits on a pattern boundary with descent across it, the descending neurons
/// are flipped and the relaxation re-solved; after `max_flips` such steps a
/// fresh sample is drawn.
pub fn stationary_certificate(
    net: &ReluNetwork,
    gf: &GeneralForm,
    dom: &InputDomain,
    cfg: &CertifyConfig,
) -> Result<StationaryCertificate> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut last_err = None;
    for resamples in 0..=cfg.max_resamples {
        let sample = sample_nondegenerate(net, dom, cfg.max_tries, rng.gen())?;
        let mut sets = sample.sets.clone();
        for flips in 0..=cfg.max_flips {
            match relax(gf, &sets) {
                Ok(RelaxOutcome::Certified(relaxation)) => {
                    if relaxation.point.complementarity() > ACTIVE_TOL {
                        last_err = Some(Error::RelaxationFailed(
                            "relaxed optimum is not complementary".into(),
                        ));
                        break;
                    }
                    let rho_bar = compute_rho_bar(&relaxation.point, &relaxation.duals);
                    return Ok(StationaryCertificate {
                        sample,
                        sets,
                        relaxation,
                        rho_bar,
                        resamples,
                        flips,
                    });
                }
                Ok(RelaxOutcome::NotStationary { point, backend }) => {
                    last_err = Some(Error::StationarityViolation(format!(
                        "no certifiable pattern within {} flips",
                        cfg.max_flips
                    )));
                    if !flip_descending(&mut sets, &point, &backend) {
                        break;
                    }
                }
                Err(e @ Error::RelaxationFailed(_)) => {
                    last_err = Some(e);
                    break;
                }
                Err(e) => return Err(e),
            }
        }
    }
    Err(last_err.unwrap_or_else(|| Error::RelaxationFailed("no samples drawn".into())))
}

/// DCA starts for fine-tuning: traces of points drawn from the domain.
pub fn dca_starts(
    net: &ReluNetwork,
    dom: &InputDomain,
    count: usize,
    seed: u64,
) -> Result<Vec<StackedPoint>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count.max(1))
        .map(|_| initial_guess(net, dom, rng.gen()))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointDocument {
    pub d: Vec<f64>,
    pub y: Vec<f64>,
    pub v: Vec<f64>,
}

impl From<&StackedPoint> for PointDocument {
    fn from(p: &StackedPoint) -> Self {
        PointDocument {
            d: p.d.as_slice().to_vec(),
            y: p.y.as_slice().to_vec(),
            v: p.v.as_slice().to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualsDocument {
    pub lambda: Vec<f64>,
    pub mu_v: Vec<f64>,
    pub mu_y: Vec<f64>,
}

impl From<&RelaxationDuals> for DualsDocument {
    fn from(d: &RelaxationDuals) -> Self {
        DualsDocument {
            lambda: d.lambda.as_slice().to_vec(),
            mu_v: d.mu_v.as_slice().to_vec(),
            mu_y: d.mu_y.as_slice().to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PenaltyCertificate {
    pub sampled_point: PointDocument,
    pub index_sets: IndexSets,
    pub stationary_point: PointDocument,
    pub duals: DualsDocument,
    pub dual_source: DualSource,
    pub kkt_residual: f64,
    pub resamples: usize,
    pub flips: usize,
    pub rho_bar: f64,
    pub rho_star: f64,
    pub fine_tune_log: Vec<FineTuneEntry>,
    /// Best complementary DCA solution at `rho_star`.
    pub d_star: Vec<f64>,
    pub objective: f64,
}

#[derive(Debug, Clone)]
pub struct Certified {
    pub stationary: StationaryCertificate,
    pub tuned: FineTuned,
}

impl Certified {
    pub fn rho_bar(&self) -> f64 {
        self.stationary.rho_bar
    }

    pub fn rho_star(&self) -> f64 {
        self.tuned.rho_star
    }

    pub fn certificate(&self) -> PenaltyCertificate {
        let st = &self.stationary;
        PenaltyCertificate {
            sampled_point: (&st.sample.point).into(),
            index_sets: st.sets.clone(),
            stationary_point: (&st.relaxation.point).into(),
            duals: (&st.relaxation.duals).into(),
            dual_source: st.relaxation.source,
            kkt_residual: st.relaxation.kkt.max(),
            resamples: st.resamples,
            flips: st.flips,
            rho_bar: st.rho_bar,
            rho_star: self.tuned.rho_star,
            fine_tune_log: self.tuned.log.clone(),
            d_star: self.tuned.result.d_star.as_slice().to_vec(),
            objective: self.tuned.result.objective,
        }
    }
}

/// Full penalty selection: stationary certificate, then fine-tuning.
pub fn certify(
    net: &ReluNetwork,
    gf: &GeneralForm,
    dom: &InputDomain,
    cfg: &CertifyConfig,
    dca: &DcaConfig,
) -> Result<Certified> {
    let stationary = stationary_certificate(net, gf, dom, cfg)?;
    let starts = dca_starts(net, dom, cfg.starts, cfg.seed ^ STARTS_SALT)?;
    let tuned = fine_tune(
        gf,
        dca,
        stationary.rho_bar,
        &cfg.schedule,
        cfg.rho_floor,
        &starts,
    )?;
    Ok(Certified { stationary, tuned })
}
