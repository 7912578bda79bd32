//! DC optimal power flow with locational marginal prices.
//!
//! ```text
//! minimize    pᵀCp + cᵀp
//! subject to  1ᵀp = 1ᵀ(ℓ + d)                  (λ)
//!             F(p − ℓ − d) <=  f̄              (μ̄)
//!            −F(p − ℓ − d) <=  f̄              (μ̲)
//!             p_min <= p <= p_max
//! ```
//!
//! Generators and loads share bus indexing; buses without a generator have
//! `p_min = p_max = 0`. Prices are `π = 1λ − Fᵀμ̄ + Fᵀμ̲`.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::qp::{solve_qp, QpSpec, QpStatus, QpTolerances};
use crate::trainer::Dataset;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridCase {
    #[serde(default)]
    pub name: String,
    pub buses: usize,
    /// Diagonal of `C`, $/MW²h.
    pub cost_quadratic: Vec<f64>,
    /// $/MWh.
    pub cost_linear: Vec<f64>,
    pub p_min: Vec<f64>,
    pub p_max: Vec<f64>,
    /// Lines × buses.
    pub ptdf: Vec<Vec<f64>>,
    pub f_max: Vec<f64>,
    pub base_load: Vec<f64>,
    pub dc_buses: Vec<usize>,
    pub d_min: Vec<f64>,
    pub d_max: Vec<f64>,
}

impl GridCase {
    pub fn from_json(text: &str) -> Result<Self> {
        let g: GridCase =
            serde_json::from_str(text).map_err(|e| Error::Schema(format!("grid case: {e}")))?;
        g.validate()?;
        Ok(g)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("grid case serializes")
    }

    pub fn lines(&self) -> usize {
        self.f_max.len()
    }

    pub fn data_centers(&self) -> usize {
        self.dc_buses.len()
    }

    pub fn validate(&self) -> Result<()> {
        let nb = self.buses;
        if nb == 0 {
            return Err(Error::Schema("grid has no buses".into()));
        }
        for (what, v) in [
            ("cost_quadratic", &self.cost_quadratic),
            ("cost_linear", &self.cost_linear),
            ("p_min", &self.p_min),
            ("p_max", &self.p_max),
            ("base_load", &self.base_load),
        ] {
            Error::check_len(what, nb, v.len())?;
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(what.into()));
            }
        }
        Error::check_len("ptdf rows", self.lines(), self.ptdf.len())?;
        for row in &self.ptdf {
            Error::check_len("ptdf row", nb, row.len())?;
            if row.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite("ptdf".into()));
            }
        }
        if self.f_max.iter().any(|f| f.is_nan() || *f <= 0.0) {
            return Err(Error::Schema("line capacities must be positive".into()));
        }
        if self.cost_quadratic.iter().any(|c| *c < 0.0) {
            return Err(Error::Schema("quadratic costs must be nonnegative".into()));
        }
        if let Some(g) = (0..nb).find(|&g| self.p_min[g] > self.p_max[g]) {
            return Err(Error::Schema(format!("p_min exceeds p_max at bus {g}")));
        }
        let k = self.dc_buses.len();
        Error::check_len("d_min", k, self.d_min.len())?;
        Error::check_len("d_max", k, self.d_max.len())?;
        let mut seen = vec![false; nb];
        for &b in &self.dc_buses {
            if b >= nb || seen[b] {
                return Err(Error::Schema(format!(
                    "data-center bus {b} is out of range or repeated"
                )));
            }
            seen[b] = true;
        }
        for j in 0..k {
            if !(self.d_min[j] >= 0.0
                && self.d_min[j] <= self.d_max[j]
                && self.d_max[j].is_finite())
            {
                return Err(Error::Schema(format!(
                    "data-center {j} bounds [{}, {}] are invalid",
                    self.d_min[j], self.d_max[j]
                )));
            }
        }
        Ok(())
    }

    pub fn ptdf_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.lines(), self.buses, |l, b| self.ptdf[l][b])
    }

    /// Bus-indexed demand vector with `dc` placed on the data-center buses.
    pub fn place_demand(&self, dc: &[f64]) -> Result<DVector<f64>> {
        Error::check_len("data-center demand", self.data_centers(), dc.len())?;
        let mut d = DVector::zeros(self.buses);
        for (&b, &x) in self.dc_buses.iter().zip(dc) {
            d[b] = x;
        }
        Ok(d)
    }

    /// Prices at the data-center buses.
    pub fn dc_prices(&self, pi: &DVector<f64>) -> Vec<f64> {
        self.dc_buses.iter().map(|&b| pi[b]).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OpfSolution {
    pub p: Vec<f64>,
    pub lambda_sys: f64,
    pub mu_plus: Vec<f64>,
    pub mu_minus: Vec<f64>,
    pub pi: Vec<f64>,
    pub total_cost: f64,
    /// `F(p − ℓ − d)`.
    pub flows: Vec<f64>,
}

fn opf_qp(grid: &GridCase, f: &DMatrix<f64>, load: &DVector<f64>) -> QpSpec {
    let nb = grid.buses;
    let mut spec = QpSpec::new(nb);
    for g in 0..nb {
        spec.quad[(g, g)] = 2.0 * grid.cost_quadratic[g];
        spec.lin[g] = grid.cost_linear[g];
        spec.lower[g] = grid.p_min[g];
        spec.upper[g] = grid.p_max[g];
    }
    let fl = f * load;
    let fmax = DVector::from_column_slice(&grid.f_max);
    let mut g_mat = DMatrix::zeros(2 * grid.lines(), nb);
    g_mat.rows_mut(0, grid.lines()).copy_from(f);
    g_mat.rows_mut(grid.lines(), grid.lines()).copy_from(&(-f));
    let mut h = DVector::zeros(2 * grid.lines());
    h.rows_mut(0, grid.lines()).copy_from(&(&fmax + &fl));
    h.rows_mut(grid.lines(), grid.lines())
        .copy_from(&(&fmax - &fl));
    spec.with_equalities(
        DMatrix::from_element(1, nb, 1.0),
        DVector::from_element(1, load.sum()),
    )
    .with_inequalities(g_mat, h)
}

/// Solves the dispatch for bus-indexed data-center demand `d`.
pub fn solve_opf(grid: &GridCase, d: &DVector<f64>) -> Result<OpfSolution> {
    Error::check_len("demand", grid.buses, d.len())?;
    if d.iter().any(|x| !x.is_finite() || *x < 0.0) {
        return Err(Error::Schema(
            "demand must be finite and nonnegative".into(),
        ));
    }
    let f = grid.ptdf_matrix();
    let load = DVector::from_column_slice(&grid.base_load) + d;
    let tol = QpTolerances {
        check_psd: false,
        ..QpTolerances::default()
    };
    let sol = solve_qp(&opf_qp(grid, &f, &load), &tol);
    match sol.status {
        QpStatus::Optimal => {}
        QpStatus::Infeasible => {
            return Err(Error::Infeasible(format!(
                "demand {:.3} MW cannot be delivered",
                load.sum()
            )))
        }
        status => {
            return Err(Error::Numerical(format!(
                "OPF returned {status}: {}",
                sol.diagnostics.unwrap_or_default()
            )))
        }
    }
    let l = grid.lines();
    let lambda_sys = -sol.duals_eq[0];
    let mu_plus = sol.duals_ineq.rows(0, l).into_owned();
    let mu_minus = sol.duals_ineq.rows(l, l).into_owned();
    let pi = lmp(lambda_sys, &mu_plus, &mu_minus, &f)?;
    let flows = &f * (&sol.x - &load);
    Ok(OpfSolution {
        total_cost: sol.objective,
        p: sol.x.as_slice().to_vec(),
        lambda_sys,
        mu_plus: mu_plus.as_slice().to_vec(),
        mu_minus: mu_minus.as_slice().to_vec(),
        pi: pi.as_slice().to_vec(),
        flows: flows.as_slice().to_vec(),
    })
}

/// `π = 1λ − Fᵀμ̄ + Fᵀμ̲`.
pub fn lmp(
    lambda_sys: f64,
    mu_plus: &DVector<f64>,
    mu_minus: &DVector<f64>,
    ptdf: &DMatrix<f64>,
) -> Result<DVector<f64>> {
    Error::check_len("mu_plus", ptdf.nrows(), mu_plus.len())?;
    Error::check_len("mu_minus", ptdf.nrows(), mu_minus.len())?;
    Ok(DVector::from_element(ptdf.ncols(), lambda_sys) - ptdf.tr_mul(&(mu_plus - mu_minus)))
}

/// `πᵀd` in $/h.
pub fn charge(pi: &[f64], d: &[f64]) -> Result<f64> {
    Error::check_len("demand", pi.len(), d.len())?;
    Ok(pi.iter().zip(d).map(|(p, x)| p * x).sum())
}

/// Solves the OPF for data-center demands `dc` and returns the solution with
/// their charge.
pub fn evaluate_allocation(grid: &GridCase, dc: &[f64]) -> Result<(OpfSolution, f64)> {
    let d = grid.place_demand(dc)?;
    let sol = solve_opf(grid, &d)?;
    let c = charge(&sol.pi, d.as_slice())?;
    Ok((sol, c))
}

#[derive(Debug, Clone)]
pub struct GeneratedData {
    pub dataset: Dataset,
    /// LMPs at the data-center buses, one row per sample.
    pub prices: Vec<Vec<f64>>,
    pub attempted: usize,
    pub discarded: usize,
}

const MIN_BATCH: usize = 256;

/// Uniform demands on `[d_min, d_max]` labelled with their charge. Infeasible
/// draws are discarded and replaced; output depends only on `seed`.
pub fn generate_dataset(grid: &GridCase, n_samples: usize, seed: u64) -> Result<GeneratedData> {
    if n_samples == 0 {
        return Err(Error::EmptyDataset);
    }
    grid.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut inputs = Vec::with_capacity(n_samples);
    let mut labels = Vec::with_capacity(n_samples);
    let mut prices = Vec::with_capacity(n_samples);
    let mut attempted = 0;
    while inputs.len() < n_samples {
        let batch = (2 * (n_samples - inputs.len())).max(MIN_BATCH);
        let draws: Vec<Vec<f64>> = (0..batch)
            .map(|_| {
                (0..grid.data_centers())
                    .map(|j| rng.gen_range(grid.d_min[j]..=grid.d_max[j]))
                    .collect()
            })
            .collect();
        let solved: Vec<Option<(Vec<f64>, f64)>> = draws
            .par_iter()
            .map(|dc| match evaluate_allocation(grid, dc) {
                Ok((sol, c)) => Ok(Some((grid.dc_prices(&DVector::from_vec(sol.pi)), c))),
                Err(Error::Infeasible(_)) => Ok(None),
                Err(e) => Err(e),
            })
            .collect::<Result<_>>()?;
        for (dc, res) in draws.into_iter().zip(solved) {
            attempted += 1;
            let Some((pi, c)) = res else { continue };
            inputs.push(dc);
            labels.push(c);
            prices.push(pi);
            if inputs.len() == n_samples {
                break;
            }
        }
        if 2 * inputs.len() < attempted {
            return Err(Error::DataGeneration {
                feasible: inputs.len(),
                attempted,
            });
        }
    }
    Ok(GeneratedData {
        dataset: Dataset::new(inputs, labels)?,
        prices,
        discarded: attempted - n_samples,
        attempted,
    })
}

/// Grid cases bundled with the crate.
pub mod fixtures {
    use super::GridCase;

    const SINGLE_BUS: &str = include_str!("../fixtures/single_bus.json");
    const TWO_BUS: &str = include_str!("../fixtures/two_bus.json");
    const PJM5: &str = include_str!("../fixtures/pjm5.json");
    const CONGESTED8: &str = include_str!("../fixtures/congested8.json");
    const UNCONGESTED8: &str = include_str!("../fixtures/uncongested8.json");

    pub const NAMES: [&str; 5] = [
        "single_bus",
        "two_bus",
        "pjm5",
        "congested8",
        "uncongested8",
    ];

    pub fn by_name(name: &str) -> Option<GridCase> {
        let text = match name {
            "single_bus" => SINGLE_BUS,
            "two_bus" => TWO_BUS,
            "pjm5" => PJM5,
            "congested8" => CONGESTED8,
            "uncongested8" => UNCONGESTED8,
            _ => return None,
        };
        Some(GridCase::from_json(text).expect("bundled grid case is valid"))
    }

    /// One generator with cost `p² + 10p`.
    pub fn single_bus() -> GridCase {
        by_name("single_bus").unwrap()
    }

    /// Cheap generator at bus 0 behind a 50 MW line, expensive one at the
    /// 100 MW load bus.
    pub fn two_bus() -> GridCase {
        by_name("two_bus").unwrap()
    }

    /// Five buses, six lines, three data centers at 80–100% of nominal load.
    pub fn pjm5() -> GridCase {
        by_name("pjm5").unwrap()
    }

    /// Eight-bus ring with two chords and four data centers in `[0, 100]`.
    pub fn congested8() -> GridCase {
        by_name("congested8").unwrap()
    }

    /// `congested8` with effectively unlimited lines.
    pub fn uncongested8() -> GridCase {
        by_name("uncongested8").unwrap()
    }
}
