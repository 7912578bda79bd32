//! Global optimum of small instances by enumerating activation patterns.
//!
//! With every neuron fixed as active (`v_i = 0`) or inactive (`y_i = 0`) the
//! network is affine and the problem is one LP. Patterns are explored layer
//! by layer; when the constraints up to some layer are already infeasible,
//! all completions are skipped.

use std::cmp::Ordering;
use std::fmt;

use nalgebra::DVector;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::formulation::GeneralForm;
use crate::qp::{solve_qp, QpSpec, QpStatus, QpTolerances};

pub const DEFAULT_H_CAP: usize = 16;

/// One bit per hidden neuron in stacked order; `true` is active.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ActivationPattern(pub Vec<bool>);

impl fmt::Display for ActivationPattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for &b in &self.0 {
            f.write_str(if b { "1" } else { "0" })?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct OracleResult {
    /// Network objective, offset included.
    pub best_objective: f64,
    pub best_d: DVector<f64>,
    pub best_pattern: ActivationPattern,
    pub feasible_pattern_count: usize,
    /// Always `2^H`: pruned completions count as covered.
    pub patterns_enumerated: u64,
    pub lp_solves: usize,
}

/// LP over `[d, y, v]` with the first `prefix.len()` neurons fixed.
fn pattern_lp(gf: &GeneralForm, prefix: &[bool], with_objective: bool) -> QpSpec {
    let lay = gf.layout();
    let mut spec = gf.feasible_set_qp();
    if with_objective {
        for i in 0..lay.h {
            spec.lin[lay.y(i)] = gf.c[i];
        }
    }
    for (i, &active) in prefix.iter().enumerate() {
        if active {
            spec.upper[lay.v(i)] = 0.0;
        } else {
            spec.upper[lay.y(i)] = 0.0;
        }
    }
    spec
}

#[derive(Debug, Clone, Default)]
struct Partial {
    best: Option<(f64, ActivationPattern, DVector<f64>)>,
    feasible: usize,
    lp_solves: usize,
}

fn better(
    a: &(f64, ActivationPattern, DVector<f64>),
    b: &(f64, ActivationPattern, DVector<f64>),
) -> bool {
    match a.0.partial_cmp(&b.0) {
        Some(Ordering::Less) => true,
        Some(Ordering::Equal) => a.1 < b.1,
        _ => false,
    }
}

impl Partial {
    fn merge(mut self, other: Partial) -> Partial {
        self.feasible += other.feasible;
        self.lp_solves += other.lp_solves;
        self.best = match (self.best, other.best) {
            (Some(a), Some(b)) => Some(if better(&b, &a) { b } else { a }),
            (a, b) => a.or(b),
        };
        self
    }
}

fn explore(
    gf: &GeneralForm,
    layer: usize,
    prefix: Vec<bool>,
    tol: &QpTolerances,
) -> Result<Partial> {
    let ranges = gf.layer_ranges();
    let width = ranges[layer].len();
    let last = layer + 1 == ranges.len();
    (0..1u64 << width)
        .into_par_iter()
        .map(|bits| {
            let mut pattern = prefix.clone();
            pattern.extend((0..width).map(|j| bits >> (width - 1 - j) & 1 == 1));
            let sol = solve_qp(&pattern_lp(gf, &pattern, last), tol);
            let mut part = Partial {
                lp_solves: 1,
                ..Partial::default()
            };
            match sol.status {
                QpStatus::Optimal => {}
                QpStatus::Infeasible => return Ok(part),
                status => {
                    return Err(Error::Numerical(format!(
                        "pattern LP {} returned {status}",
                        ActivationPattern(pattern)
                    )))
                }
            }
            if last {
                let d = gf.layout().unpack(&sol.x).d;
                part.feasible = 1;
                part.best = Some((sol.objective + gf.obj_offset, ActivationPattern(pattern), d));
                Ok(part)
            } else {
                Ok(part.merge(explore(gf, layer + 1, pattern, tol)?))
            }
        })
        .try_reduce(Partial::default, |a, b| Ok(a.merge(b)))
}

pub fn enumerate_solve(gf: &GeneralForm, h_cap: usize) -> Result<OracleResult> {
    let h = gf.hidden_count();
    if h > h_cap {
        return Err(Error::SizeCap {
            hidden: h,
            cap: h_cap,
        });
    }
    let tol = QpTolerances {
        check_psd: false,
        ..QpTolerances::default()
    };
    let part = explore(gf, 0, Vec::with_capacity(h), &tol)?;
    let (best_objective, best_pattern, best_d) = part
        .best
        .ok_or_else(|| Error::InfeasibleDomain("no activation pattern is feasible".into()))?;
    Ok(OracleResult {
        best_objective,
        best_d,
        best_pattern,
        feasible_pattern_count: part.feasible,
        patterns_enumerated: 1u64 << h,
        lp_solves: part.lp_solves,
    })
}

/// True network objective at `d` by a forward pass, after checking that `d`
/// lies in the domain within `tol`.
pub fn verify_point(gf: &GeneralForm, d: &DVector<f64>, tol: f64) -> Result<f64> {
    Error::check_len("d", gf.input_dim(), d.len())?;
    let violation = gf.domain_slack(d).iter().fold(0.0f64, |m, s| m.max(-s));
    if violation > tol {
        return Err(Error::Infeasible(format!(
            "point lies outside the domain by {violation:e}"
        )));
    }
    Ok(gf.evaluate(d)?.1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::formulation::{assemble, CostSpec, InputDomain};
    use crate::network::{LayerParams, ReluNetwork};
    use crate::testutil::{one_neuron, random_net};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn one_neuron_by_hand() {
        let net = one_neuron(2.0, 1.0);
        let dom = InputDomain::boxed(vec![-1.0], vec![1.0]).unwrap();
        let gf = assemble(&net, &dom, &CostSpec::minimize_output()).unwrap();
        let res = enumerate_solve(&gf, DEFAULT_H_CAP).unwrap();
        assert!(res.best_objective.abs() < 1e-9);
        assert_eq!(res.feasible_pattern_count, 2);
        assert_eq!(res.patterns_enumerated, 2);
        // Both patterns reach 0; the tie goes to the inactive one.
        assert_eq!(res.best_pattern.to_string(), "0");
        assert!(res.best_d[0] <= -0.5 + 1e-9);
    }

    #[test]
    fn infeasible_pattern_is_not_counted() {
        // Second neuron: relu(d - 2) on d in [0, 1] can never be active.
        let layer = LayerParams::from_rows(&[vec![1.0], vec![1.0]], &[0.0, -2.0]).unwrap();
        let net = ReluNetwork::new(
            vec![layer],
            LayerParams::from_rows(&[vec![1.0, 1.0]], &[0.0]).unwrap(),
        )
        .unwrap();
        let dom = InputDomain::boxed(vec![0.0], vec![1.0]).unwrap();
        let gf = assemble(&net, &dom, &CostSpec::minimize_output()).unwrap();
        let res = enumerate_solve(&gf, DEFAULT_H_CAP).unwrap();
        assert_eq!(res.patterns_enumerated, 4);
        assert_eq!(res.feasible_pattern_count, 2);
    }

    #[test]
    fn pruning_skips_completions() {
        // Layer 1 neuron 2 can never be active, so its two completions in
        // layer 2 are never solved. With neuron 1 inactive (d = 0) the second
        // layer sees -0.5 and only its inactive pattern is feasible.
        let l1 = LayerParams::from_rows(&[vec![1.0], vec![1.0]], &[0.0, -2.0]).unwrap();
        let l2 = LayerParams::from_rows(&[vec![1.0, 1.0]], &[-0.5]).unwrap();
        let net = ReluNetwork::new(
            vec![l1, l2],
            LayerParams::from_rows(&[vec![1.0]], &[0.0]).unwrap(),
        )
        .unwrap();
        let dom = InputDomain::boxed(vec![0.0], vec![1.0]).unwrap();
        let gf = assemble(&net, &dom, &CostSpec::minimize_output()).unwrap();
        let res = enumerate_solve(&gf, DEFAULT_H_CAP).unwrap();
        assert_eq!(res.patterns_enumerated, 8);
        assert_eq!(res.lp_solves, 4 + 2 * 2);
        assert_eq!(res.feasible_pattern_count, 3);
    }

    #[test]
    fn size_cap() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = random_net(&mut rng, 2, &[10, 10], 1);
        let dom = InputDomain::boxed(vec![0.0; 2], vec![1.0; 2]).unwrap();
        let gf = assemble(&net, &dom, &CostSpec::minimize_output()).unwrap();
        assert!(matches!(
            enumerate_solve(&gf, DEFAULT_H_CAP),
            Err(Error::SizeCap {
                hidden: 20,
                cap: 16
            })
        ));
    }

    #[test]
    fn verify_point_matches_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = random_net(&mut rng, 2, &[3, 3], 1);
        let dom = InputDomain::boxed(vec![-1.0; 2], vec![1.0; 2]).unwrap();
        let gf = assemble(&net, &dom, &CostSpec::minimize_output()).unwrap();
        for _ in 0..50 {
            let d = DVector::from_fn(2, |_, _| rng.gen_range(-1.0..1.0));
            let direct = net.forward(d.as_slice()).unwrap()[0];
            assert_eq!(verify_point(&gf, &d, 0.0).unwrap(), direct);
        }
        let outside = DVector::from_vec(vec![1.5, 0.0]);
        assert!(verify_point(&gf, &outside, 1e-6).is_err());
        assert!(verify_point(&gf, &outside, 1.0).is_ok());
    }

    #[test]
    fn no_sample_beats_the_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let widths = [rng.gen_range(1..=6), rng.gen_range(1..=6)];
            let net = random_net(&mut rng, 2, &widths, 1);
            let lo: Vec<f64> = (0..2).map(|_| rng.gen_range(-2.0..0.0)).collect();
            let hi: Vec<f64> = lo.iter().map(|l| l + rng.gen_range(0.1..2.0)).collect();
            let dom = InputDomain::boxed(lo, hi).unwrap();
            let gf = assemble(&net, &dom, &CostSpec::minimize_output()).unwrap();
            let res = enumerate_solve(&gf, 12).unwrap();
            assert!(
                (verify_point(&gf, &res.best_d, 1e-9).unwrap() - res.best_objective).abs() <= 1e-8
            );
            for _ in 0..10_000 {
                let d = dom.sample(&mut rng);
                let val = net.forward(&d).unwrap()[0];
                assert!(val >= res.best_objective - 1e-8);
            }
        }
    }

    #[test]
    fn enumeration_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = random_net(&mut rng, 3, &[4, 4], 1);
        let dom = InputDomain::new(vec![0.0; 3], vec![1.0; 3], Some(1.2)).unwrap();
        let gf = assemble(&net, &dom, &CostSpec::minimize_output()).unwrap();
        let a = enumerate_solve(&gf, DEFAULT_H_CAP).unwrap();
        let b = enumerate_solve(&gf, DEFAULT_H_CAP).unwrap();
        assert_eq!(a.best_objective.to_bits(), b.best_objective.to_bits());
        assert_eq!(a.best_pattern, b.best_pattern);
        assert_eq!(a.lp_solves, b.lp_solves);
        assert!((a.best_d.sum() - 1.2).abs() < 1e-9);
    }
}
