//! Data-center demand allocation over a trained price surrogate.
//!
//! A surrogate maps data-center demands to their total charge. The allocation
//! problem minimizes that surrogate subject to per-site bounds and a fixed
//! total, the penalty is certified, DCA is run, and the allocation is
//! re-priced by the OPF model itself and compared with a random allocation.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dca::{dca_solve, DcaConfig, DcaResult, DcaStatus};
use crate::error::{Error, Result};
use crate::formulation::{assemble, CostSpec, GeneralForm, InputDomain};
use crate::network::ReluNetwork;
use crate::opf::{evaluate_allocation, generate_dataset, GeneratedData, GridCase};
use crate::penalty::{
    candidate_penalties, dca_starts, fine_tune, stationary_certificate, CertifyConfig, STARTS_SALT,
};
use crate::trainer::{train, TrainConfig};

/// Stream of the per-case generator reserved for baseline draws.
const BASELINE_STREAM: u64 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AllocationSpec {
    /// Total demand `Δ` (MW).
    pub delta: f64,
    pub d_min: Vec<f64>,
    pub d_max: Vec<f64>,
    /// `Δ / Σ d_max`, when `Δ` was given that way.
    #[serde(default)]
    pub forecast_fraction: Option<f64>,
}

impl AllocationSpec {
    pub fn new(delta: f64, d_min: Vec<f64>, d_max: Vec<f64>) -> Result<Self> {
        let spec = AllocationSpec {
            delta,
            d_min,
            d_max,
            forecast_fraction: None,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// The grid's data-center bounds with `Δ = fraction · Σ d_max`.
    pub fn from_fraction(grid: &GridCase, fraction: f64) -> Result<Self> {
        let delta = fraction * grid.d_max.iter().sum::<f64>();
        let mut spec = Self::new(delta, grid.d_min.clone(), grid.d_max.clone())?;
        spec.forecast_fraction = Some(fraction);
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        Error::check_len("d_max", self.d_min.len(), self.d_max.len())?;
        self.domain().map(|_| ())
    }

    pub fn domain(&self) -> Result<InputDomain> {
        InputDomain::new(self.d_min.clone(), self.d_max.clone(), Some(self.delta))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub certify: CertifyConfig,
    pub dca: DcaConfig,
    /// The baseline is the cheapest of this many random allocations.
    pub baseline_samples: usize,
    /// Largest relative surrogate-vs-OPF charge gap counted as a success.
    pub gap_tol: f64,
    /// Iterates stepped back before the single penalty escalation.
    pub step_back: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            certify: CertifyConfig::default(),
            dca: DcaConfig::default(),
            baseline_samples: 1,
            gap_tol: 0.05,
            step_back: 10,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub seed: u64,
    /// Surrogate charge at `d_star`.
    pub dca_objective: f64,
    /// OPF charge at `d_star`.
    pub validated_charge: f64,
    pub baseline_charge: f64,
    pub d_star: Vec<f64>,
    pub baseline_d: Vec<f64>,
    pub rho_bar: f64,
    pub rho_star: f64,
    pub iterations: usize,
    pub status: DcaStatus,
    /// Whether the single penalty escalation was needed.
    pub escalated: bool,
    /// `|dca_objective − validated_charge| / |validated_charge|`.
    pub gap: f64,
    /// `max π − min π` over all buses at the baseline allocation.
    pub lmp_spread: f64,
    pub trajectory: Option<PathBuf>,
}

impl RunReport {
    pub fn succeeded(&self, gap_tol: f64) -> bool {
        self.status == DcaStatus::ConvergedComplementary && self.gap <= gap_tol
    }
}

/// Generates `n_samples` OPF-labelled demands and fits a surrogate to them.
pub fn train_surrogate(
    grid: &GridCase,
    n_samples: usize,
    data_seed: u64,
    cfg: &TrainConfig,
) -> Result<(ReluNetwork, GeneratedData)> {
    let data = generate_dataset(grid, n_samples, data_seed).map_err(Error::at("datagen"))?;
    let trained = train(&data.dataset, cfg).map_err(Error::at("train"))?;
    Ok((trained.network, data))
}

fn lmp_spread(pi: &[f64]) -> f64 {
    let hi = pi.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lo = pi.iter().copied().fold(f64::INFINITY, f64::min);
    hi - lo
}

/// Cheapest of `k` allocations drawn like the training inputs, rescaled onto
/// the total. Returns the allocation, its charge and its LMP spread.
fn baseline(
    grid: &GridCase,
    dom: &InputDomain,
    k: usize,
    seed: u64,
) -> Result<(Vec<f64>, f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(BASELINE_STREAM);
    let mut best: Option<(Vec<f64>, f64, f64)> = None;
    for _ in 0..k.max(1) {
        let d = dom.sample(&mut rng);
        let (sol, c) = evaluate_allocation(grid, &d)?;
        if best.as_ref().is_none_or(|b| c < b.1) {
            best = Some((d, c, lmp_spread(&sol.pi)));
        }
    }
    Ok(best.expect("at least one draw"))
}

struct Solved {
    result: DcaResult,
    rho_bar: f64,
    escalated: bool,
}

fn solve_allocation(
    net: &ReluNetwork,
    gf: &GeneralForm,
    dom: &InputDomain,
    cfg: &PipelineConfig,
    seed: u64,
) -> Result<Solved> {
    let ccfg = CertifyConfig {
        seed,
        ..cfg.certify.clone()
    };
    let stationary = stationary_certificate(net, gf, dom, &ccfg).map_err(Error::at("penalty"))?;
    let rho_bar = stationary.rho_bar;
    let starts =
        dca_starts(net, dom, ccfg.starts, seed ^ STARTS_SALT).map_err(Error::at("penalty"))?;
    match fine_tune(
        gf,
        &cfg.dca,
        rho_bar,
        &ccfg.schedule,
        ccfg.rho_floor,
        &starts,
    ) {
        Ok(tuned) => Ok(Solved {
            result: tuned.result,
            rho_bar,
            escalated: false,
        }),
        Err(Error::FineTuneFailed { .. }) => {
            // Rerun the top of the schedule, step back and double the penalty once.
            let rhos = candidate_penalties(rho_bar, &ccfg.schedule, ccfg.rho_floor);
            let top = *rhos.last().expect("schedule is non-empty");
            let last =
                dca_solve(gf, &cfg.dca.with_rho(top), &starts[0]).map_err(Error::at("dca"))?;
            let restart = last.stepped_back(cfg.step_back).clone();
            let result =
                dca_solve(gf, &cfg.dca.with_rho(2.0 * top), &restart).map_err(Error::at("dca"))?;
            Ok(Solved {
                result,
                rho_bar,
                escalated: true,
            })
        }
        Err(e) => Err(Error::at("penalty")(e)),
    }
}

/// Certifies a penalty, runs DCA on the surrogate allocation problem, and
/// re-prices the allocation and a random baseline through the OPF. With
/// `trajectory_dir` set, the DCA trajectory is written there.
pub fn run_allocation(
    grid: &GridCase,
    net: &ReluNetwork,
    spec: &AllocationSpec,
    cfg: &PipelineConfig,
    seed: u64,
    trajectory_dir: Option<&Path>,
) -> Result<RunReport> {
    if net.input_dim() != grid.data_centers() {
        return Err(Error::Shape {
            what: "surrogate input",
            expected: grid.data_centers(),
            found: net.input_dim(),
        });
    }
    let dom = spec.domain()?;
    let gf = assemble(net, &dom, &CostSpec::minimize_output())?;
    let solved = solve_allocation(net, &gf, &dom, cfg, seed)?;
    let r = &solved.result;

    // Interior-point round-off can leave bounds violated by ~1e-12.
    let priced: Vec<f64> = (0..r.d_star.len())
        .map(|j| r.d_star[j].clamp(spec.d_min[j], spec.d_max[j]))
        .collect();
    let (_, validated_charge) =
        evaluate_allocation(grid, &priced).map_err(Error::at("validate"))?;
    let (baseline_d, baseline_charge, spread) =
        baseline(grid, &dom, cfg.baseline_samples, seed).map_err(Error::at("baseline"))?;

    let trajectory = match trajectory_dir {
        Some(dir) => {
            let path = dir.join(format!("trajectory_{seed}.csv"));
            let f = File::create(&path).map_err(|e| Error::io(&path, e))?;
            let mut w = BufWriter::new(f);
            r.write_trajectory(&mut w, gf.obj_offset, cfg.dca.log_every)
                .and_then(|_| w.flush())
                .map_err(|e| Error::io(&path, e))?;
            Some(path)
        }
        None => None,
    };

    Ok(RunReport {
        seed,
        dca_objective: r.objective,
        validated_charge,
        baseline_charge,
        d_star: r.d_star.as_slice().to_vec(),
        baseline_d,
        rho_bar: solved.rho_bar,
        rho_star: r.rho,
        iterations: r.iterations,
        status: r.status,
        escalated: solved.escalated,
        gap: (r.objective - validated_charge).abs() / validated_charge.abs(),
        lmp_spread: spread,
        trajectory,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct CaseRow {
    pub case_id: usize,
    pub report: Option<RunReport>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchmarkSummary {
    /// Sorted by baseline charge; failed cases last.
    pub rows: Vec<CaseRow>,
    pub success_rate: f64,
    pub gap_tol: f64,
}

impl BenchmarkSummary {
    pub fn write_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "case_id",
            "baseline_charge",
            "dca_charge",
            "validated_charge",
            "rho_bar",
            "rho_star",
            "iterations",
            "status",
            "gap",
            "lmp_spread",
            "success",
        ])?;
        for row in &self.rows {
            let id = row.case_id.to_string();
            match (&row.report, &row.error) {
                (Some(r), _) => w.write_record([
                    id,
                    format!("{:?}", r.baseline_charge),
                    format!("{:?}", r.dca_objective),
                    format!("{:?}", r.validated_charge),
                    format!("{:?}", r.rho_bar),
                    format!("{:?}", r.rho_star),
                    r.iterations.to_string(),
                    r.status.to_string(),
                    format!("{:?}", r.gap),
                    format!("{:?}", r.lmp_spread),
                    r.succeeded(self.gap_tol).to_string(),
                ])?,
                (None, err) => {
                    let status = format!("error: {}", err.as_deref().unwrap_or("unknown"));
                    w.write_record([
                        id.as_str(),
                        "",
                        "",
                        "",
                        "",
                        "",
                        "",
                        &status,
                        "",
                        "",
                        "false",
                    ])?
                }
            }
        }
        w.flush().map_err(|e| Error::io("<summary>", e))?;
        Ok(())
    }
}

/// Runs `n_cases` allocations with seeds `seed_base + k` concurrently.
/// Failures become rows.
pub fn benchmark(
    grid: &GridCase,
    net: &ReluNetwork,
    spec: &AllocationSpec,
    cfg: &PipelineConfig,
    n_cases: usize,
    seed_base: u64,
    trajectory_dir: Option<&Path>,
) -> BenchmarkSummary {
    let mut rows: Vec<CaseRow> = (0..n_cases)
        .into_par_iter()
        .map(
            |k| match run_allocation(grid, net, spec, cfg, seed_base + k as u64, trajectory_dir) {
                Ok(r) => CaseRow {
                    case_id: k,
                    report: Some(r),
                    error: None,
                },
                Err(e) => CaseRow {
                    case_id: k,
                    report: None,
                    error: Some(e.to_string()),
                },
            },
        )
        .collect();
    rows.sort_by(|a, b| {
        let key = |r: &CaseRow| {
            r.report
                .as_ref()
                .map_or(f64::INFINITY, |r| r.baseline_charge)
        };
        key(a).total_cmp(&key(b)).then(a.case_id.cmp(&b.case_id))
    });
    let ok = rows
        .iter()
        .filter(|r| r.report.as_ref().is_some_and(|r| r.succeeded(cfg.gap_tol)))
        .count();
    BenchmarkSummary {
        success_rate: if rows.is_empty() {
            0.0
        } else {
            ok as f64 / rows.len() as f64
        },
        rows,
        gap_tol: cfg.gap_tol,
    }
}

/// Forward pass of the surrogate at an allocation.
pub fn surrogate_charge(net: &ReluNetwork, d: &[f64]) -> Result<f64> {
    Ok(net.forward(d)?[0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::opf::fixtures;
    use std::sync::OnceLock;

    fn surrogate(grid: &GridCase) -> ReluNetwork {
        let cfg = TrainConfig {
            hidden: vec![10, 10],
            epochs: 100,
            ..TrainConfig::default()
        };
        train_surrogate(grid, 1500, 3, &cfg).unwrap().0
    }

    fn congested() -> &'static (GridCase, ReluNetwork) {
        static CELL: OnceLock<(GridCase, ReluNetwork)> = OnceLock::new();
        CELL.get_or_init(|| {
            let g = fixtures::congested8();
            let net = surrogate(&g);
            (g, net)
        })
    }

    #[test]
    fn spec_from_fraction() {
        let g = fixtures::pjm5();
        let s = AllocationSpec::from_fraction(&g, 0.9).unwrap();
        assert!((s.delta - 900.0).abs() < 1e-9);
        assert!(AllocationSpec::from_fraction(&g, 0.5).is_err());
        assert!(AllocationSpec::new(10.0, vec![0.0], vec![5.0]).is_err());
    }

    #[test]
    fn congested_run_is_consistent() {
        let (g, net) = congested();
        let spec = AllocationSpec::from_fraction(g, 0.5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let r = run_allocation(
            g,
            net,
            &spec,
            &PipelineConfig::default(),
            0,
            Some(dir.path()),
        )
        .unwrap();
        assert_eq!(r.status, DcaStatus::ConvergedComplementary);
        assert!((r.d_star.iter().sum::<f64>() - spec.delta).abs() <= 1e-7);
        for (j, x) in r.d_star.iter().enumerate() {
            assert!(*x >= spec.d_min[j] - 1e-9 && *x <= spec.d_max[j] + 1e-9);
        }
        let fwd = surrogate_charge(net, &r.d_star).unwrap();
        assert!((fwd - r.dca_objective).abs() <= 1e-6 * fwd.abs().max(1.0));
        let expected_gap = (r.dca_objective - r.validated_charge).abs() / r.validated_charge;
        assert_eq!(r.gap, expected_gap);
        let text = std::fs::read_to_string(r.trajectory.as_ref().unwrap()).unwrap();
        assert!(text.starts_with("iter,f,objective_part,penalty_part,max_comp_residual"));
    }

    #[test]
    fn input_dimension_is_checked() {
        let (_, net) = congested();
        let g = fixtures::pjm5();
        let spec = AllocationSpec::from_fraction(&g, 0.9).unwrap();
        assert!(matches!(
            run_allocation(&g, net, &spec, &PipelineConfig::default(), 0, None),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn uncongested_run_matches_baseline() {
        let g = fixtures::uncongested8();
        let net = surrogate(&g);
        let spec = AllocationSpec::from_fraction(&g, 0.5).unwrap();
        let r = run_allocation(&g, &net, &spec, &PipelineConfig::default(), 1, None).unwrap();
        assert!(r.lmp_spread <= 1e-6);
        assert!((r.validated_charge - r.baseline_charge).abs() <= 0.02 * r.baseline_charge);
    }

    #[test]
    fn benchmark_rows_and_success_rate() {
        let (g, net) = congested();
        let spec = AllocationSpec::from_fraction(g, 0.5).unwrap();
        let cfg = PipelineConfig::default();
        let s = benchmark(g, net, &spec, &cfg, 5, 100, None);
        assert_eq!(s.rows.len(), 5);
        let ok = s
            .rows
            .iter()
            .filter(|r| r.report.as_ref().is_some_and(|r| r.succeeded(cfg.gap_tol)))
            .count();
        assert_eq!(s.success_rate, ok as f64 / 5.0);
        let charges: Vec<f64> = s
            .rows
            .iter()
            .filter_map(|r| r.report.as_ref())
            .map(|r| r.baseline_charge)
            .collect();
        assert!(charges.windows(2).all(|w| w[0] <= w[1]));
        let mut buf = Vec::new();
        s.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 6);
        assert!(text.starts_with("case_id,baseline_charge,dca_charge,validated_charge,rho_bar,rho_star,iterations,status"));
    }

    #[test]
    fn baseline_uses_its_own_stream() {
        let g = fixtures::congested8();
        let spec = AllocationSpec::from_fraction(&g, 0.5).unwrap();
        let dom = spec.domain().unwrap();
        let (a, ca, _) = baseline(&g, &dom, 1, 7).unwrap();
        let (b, cb, _) = baseline(&g, &dom, 1, 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(ca, cb);
        let mut plain = ChaCha8Rng::seed_from_u64(7);
        assert_ne!(dom.sample(&mut plain), a);
        let (_, best_of_5, _) = baseline(&g, &dom, 5, 7).unwrap();
        assert!(best_of_5 <= ca);
        assert!((a.iter().sum::<f64>() - spec.delta).abs() < 1e-9);
    }

    #[test]
    fn spec_roundtrip_rejects_unknown_keys() {
        let s: Result<AllocationSpec, _> =
            serde_json::from_str(r#"{"delta":1,"d_min":[0],"d_max":[2],"extra":1}"#);
        assert!(s.is_err());
        let c: Result<PipelineConfig, _> = toml::from_str("gap_tol = 0.1\nbogus = 2");
        assert!(c.is_err());
        let c: PipelineConfig = toml::from_str("gap_tol = 0.1\n[dca]\nrho = 3.0").unwrap();
        assert_eq!(c.dca.rho, 3.0);
    }
}
