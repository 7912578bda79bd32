//! Stacked general form of optimization over a trained network:
//!
//! ```text
//! minimize    cᵀy (+ offset)
//! subject to  A d >= f
//!             V d + W y + b = v
//!             0 <= y ⊥ v >= 0
//! ```
//!
//! `y` and `v` stack all hidden neurons, layer 1 first. With the slack
//! convention `y − v = pre-activation`, layer `i` rows read
//! `v_i = y_i − W_i y_{i−1} − b_i`, so `W` carries identity diagonal blocks and
//! `−W_i` on the block subdiagonal, `V = −W_1` in layer-1 rows and `b` is the
//! negated stacked bias.

use std::io::Write;
use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::ReluNetwork;
use crate::qp::{QpSolution, QpSpec};

/// Box `lower <= d <= upper`, optionally with `Σd = total`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputDomain {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    #[serde(default)]
    pub total: Option<f64>,
}

impl InputDomain {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>, total: Option<f64>) -> Result<Self> {
        let dom = InputDomain {
            lower,
            upper,
            total,
        };
        dom.validate()?;
        Ok(dom)
    }

    pub fn boxed(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        InputDomain::new(lower, upper, None)
    }

    pub fn validate(&self) -> Result<()> {
        Error::check_len("domain upper bounds", self.lower.len(), self.upper.len())?;
        if self.lower.is_empty() {
            return Err(Error::InfeasibleDomain("zero-dimensional domain".into()));
        }
        let finite = self
            .lower
            .iter()
            .chain(&self.upper)
            .chain(self.total.iter())
            .all(|x| x.is_finite());
        if !finite {
            return Err(Error::NonFinite("input domain".into()));
        }
        if let Some(j) = (0..self.dim()).find(|&j| self.lower[j] > self.upper[j]) {
            return Err(Error::InfeasibleDomain(format!(
                "lower bound {} exceeds upper bound {} at coordinate {j}",
                self.lower[j], self.upper[j]
            )));
        }
        if let Some(total) = self.total {
            let lo: f64 = self.lower.iter().sum();
            let hi: f64 = self.upper.iter().sum();
            let slack = 1e-12 * (1.0 + lo.abs().max(hi.abs()));
            if total < lo - slack || total > hi + slack {
                return Err(Error::InfeasibleDomain(format!(
                    "total {total} outside [{lo}, {hi}]"
                )));
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    /// Largest bound or total violation at `d`.
    pub fn violation(&self, d: &[f64]) -> f64 {
        let mut worst: f64 = 0.0;
        for (j, x) in d.iter().enumerate() {
            worst = worst.max(self.lower[j] - x).max(x - self.upper[j]);
        }
        if let Some(total) = self.total {
            worst = worst.max((d.iter().sum::<f64>() - total).abs());
        }
        worst
    }

    /// Uniform draw from the box. With a total, the draw is rescaled
    /// proportionally towards the total and any overshoot beyond the box is
    /// redistributed over the coordinates that still have room.
    pub fn sample(&self, rng: &mut impl Rng) -> Vec<f64> {
        let n = self.dim();
        let width: Vec<f64> = (0..n).map(|j| self.upper[j] - self.lower[j]).collect();
        let unit: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
        let Some(total) = self.total else {
            return (0..n).map(|j| self.lower[j] + unit[j] * width[j]).collect();
        };

        let mut d = self.lower.clone();
        let mut remaining = total - d.iter().sum::<f64>();
        // Proportional weights; fall back to the widths if the draw is all-zero.
        let mut weight: Vec<f64> = (0..n).map(|j| unit[j] * width[j]).collect();
        if weight.iter().sum::<f64>() <= 0.0 {
            weight = width.clone();
        }
        let mut open: Vec<bool> = width.iter().map(|w| *w > 0.0).collect();
        for _ in 0..=n {
            let mass: f64 = (0..n).filter(|&j| open[j]).map(|j| weight[j]).sum();
            if remaining <= 0.0 || mass <= 0.0 {
                break;
            }
            let mut spilled = 0.0;
            for j in 0..n {
                if !open[j] {
                    continue;
                }
                let want = d[j] + remaining * weight[j] / mass;
                if want >= self.upper[j] {
                    spilled += want - self.upper[j];
                    d[j] = self.upper[j];
                    open[j] = false;
                } else {
                    d[j] = want;
                }
            }
            remaining = spilled;
            if open.iter().all(|o| !o) {
                break;
            }
            // A coordinate with zero draw still has room; let it absorb spill.
            for j in 0..n {
                if open[j] && weight[j] == 0.0 {
                    weight[j] = width[j];
                }
            }
        }
        d
    }
}

/// Affine cost `linearᵀλ + offset` on the network output. A nonzero
/// `on_input` term has no place in the general form and is rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostSpec {
    pub linear: Vec<f64>,
    #[serde(default)]
    pub offset: f64,
    #[serde(default)]
    pub on_input: Vec<f64>,
}

impl CostSpec {
    pub fn new(linear: Vec<f64>, offset: f64) -> Self {
        CostSpec {
            linear,
            offset,
            on_input: Vec::new(),
        }
    }

    /// Minimize the first (scalar) network output.
    pub fn minimize_output() -> Self {
        CostSpec::new(vec![1.0], 0.0)
    }
}

#[derive(Debug, Clone)]
pub struct GeneralForm {
    pub c: DVector<f64>,
    pub a: DMatrix<f64>,
    pub f: DVector<f64>,
    pub v: DMatrix<f64>,
    pub w: DMatrix<f64>,
    pub b: DVector<f64>,
    pub obj_offset: f64,
    layers: Vec<Range<usize>>,
    /// Rows `(k, k+1)` of `A` that together encode `Σd = total`.
    equality_rows: Option<(usize, usize)>,
}

/// A point `(d, y, v)` of the general form, stacked.
#[derive(Debug, Clone, PartialEq)]
pub struct StackedPoint {
    pub d: DVector<f64>,
    pub y: DVector<f64>,
    pub v: DVector<f64>,
}

impl StackedPoint {
    /// `max_i y_i v_i`.
    pub fn complementarity(&self) -> f64 {
        self.y
            .iter()
            .zip(self.v.iter())
            .map(|(y, v)| y * v)
            .fold(0.0, f64::max)
    }
}

pub fn assemble(net: &ReluNetwork, dom: &InputDomain, cost: &CostSpec) -> Result<GeneralForm> {
    dom.validate()?;
    Error::check_len("domain", net.input_dim(), dom.dim())?;
    Error::check_len("cost", net.output_dim(), cost.linear.len())?;
    if cost.on_input.iter().any(|x| *x != 0.0) {
        return Err(Error::UnsupportedCost);
    }
    let n = net.input_dim();
    let h = net.hidden_count();

    let mut layers = Vec::new();
    let mut start = 0;
    for width in net.widths() {
        layers.push(start..start + width);
        start += width;
    }

    let mut v = DMatrix::zeros(h, n);
    let mut w = DMatrix::identity(h, h);
    let mut b = DVector::zeros(h);
    for (i, (layer, rows)) in net.hidden_layers().iter().zip(&layers).enumerate() {
        if i == 0 {
            v.view_mut((rows.start, 0), (rows.len(), n))
                .copy_from(&(-&layer.weights));
        } else {
            let prev = &layers[i - 1];
            w.view_mut((rows.start, prev.start), (rows.len(), prev.len()))
                .copy_from(&(-&layer.weights));
        }
        b.rows_mut(rows.start, rows.len())
            .copy_from(&(-&layer.bias));
    }

    let out = net.output_layer();
    let cost_lin = DVector::from_column_slice(&cost.linear);
    let mut c = DVector::zeros(h);
    let last = layers.last().expect("at least one hidden layer").clone();
    c.rows_mut(last.start, last.len())
        .copy_from(&out.weights.tr_mul(&cost_lin));
    let obj_offset = cost_lin.dot(&out.bias) + cost.offset;

    let rows = 2 * n + if dom.total.is_some() { 2 } else { 0 };
    let mut a = DMatrix::zeros(rows, n);
    let mut f = DVector::zeros(rows);
    for j in 0..n {
        a[(j, j)] = 1.0;
        f[j] = dom.lower[j];
        a[(n + j, j)] = -1.0;
        f[n + j] = -dom.upper[j];
    }
    let equality_rows = dom.total.map(|total| {
        a.row_mut(2 * n).fill(1.0);
        f[2 * n] = total;
        a.row_mut(2 * n + 1).fill(-1.0);
        f[2 * n + 1] = -total;
        (2 * n, 2 * n + 1)
    });

    Ok(GeneralForm {
        c,
        a,
        f,
        v,
        w,
        b,
        obj_offset,
        layers,
        equality_rows,
    })
}

impl GeneralForm {
    pub fn input_dim(&self) -> usize {
        self.v.ncols()
    }

    pub fn hidden_count(&self) -> usize {
        self.c.len()
    }

    /// Stacked index range of every hidden layer.
    pub fn layer_ranges(&self) -> &[Range<usize>] {
        &self.layers
    }

    /// `(layer, position)` of stacked neuron `i`, both zero-based.
    pub fn neuron(&self, i: usize) -> Option<(usize, usize)> {
        self.layers
            .iter()
            .enumerate()
            .find(|(_, r)| r.contains(&i))
            .map(|(l, r)| (l, i - r.start))
    }

    /// Index of the stacked neuron at `(layer, position)`.
    pub fn stacked_index(&self, layer: usize, position: usize) -> Option<usize> {
        let r = self.layers.get(layer)?;
        (position < r.len()).then_some(r.start + position)
    }

    /// Rows of `A` that encode a single equality as two opposing inequalities.
    pub fn equality_rows(&self) -> Option<(usize, usize)> {
        self.equality_rows
    }

    pub fn objective_value(&self, y: &DVector<f64>) -> Result<f64> {
        Error::check_len("stacked y", self.hidden_count(), y.len())?;
        Ok(self.c.dot(y) + self.obj_offset)
    }

    /// `V d + W y + b − v`, the residual of the network equalities.
    pub fn network_residual(&self, p: &StackedPoint) -> DVector<f64> {
        &self.v * &p.d + &self.w * &p.y + &self.b - &p.v
    }

    /// `A d − f`.
    pub fn domain_slack(&self, d: &DVector<f64>) -> DVector<f64> {
        &self.a * d - &self.f
    }

    /// Exact evaluation of the underlying network at `d` using only the
    /// general-form data: returns the complementary point and its objective.
    pub fn evaluate(&self, d: &DVector<f64>) -> Result<(StackedPoint, f64)> {
        Error::check_len("input", self.input_dim(), d.len())?;
        let h = self.hidden_count();
        let mut y = DVector::zeros(h);
        let mut v = DVector::zeros(h);
        let vd = &self.v * d;
        for r in &self.layers {
            for i in r.clone() {
                let mut coupling = 0.0;
                for k in 0..r.start {
                    coupling += self.w[(i, k)] * y[k];
                }
                let pre = -(vd[i] + coupling + self.b[i]);
                y[i] = pre.max(0.0);
                v[i] = (-pre).max(0.0);
            }
        }
        let objective = self.c.dot(&y) + self.obj_offset;
        Ok((StackedPoint { d: d.clone(), y, v }, objective))
    }

    /// Writes every matrix and vector as `name row col value` lines, skipping
    /// zeros.
    pub fn write_coordinate(&self, mut out: impl Write) -> std::io::Result<()> {
        writeln!(
            out,
            "# general form: H={} n={}",
            self.hidden_count(),
            self.input_dim()
        )?;
        writeln!(out, "offset 0 0 {:?}", self.obj_offset)?;
        let mats = [("A", &self.a), ("V", &self.v), ("W", &self.w)];
        for (name, m) in mats {
            for i in 0..m.nrows() {
                for j in 0..m.ncols() {
                    if m[(i, j)] != 0.0 {
                        writeln!(out, "{name} {i} {j} {:?}", m[(i, j)])?;
                    }
                }
            }
        }
        let vecs = [("c", &self.c), ("f", &self.f), ("b", &self.b)];
        for (name, x) in vecs {
            for (i, val) in x.iter().enumerate() {
                if *val != 0.0 {
                    writeln!(out, "{name} {i} 0 {val:?}")?;
                }
            }
        }
        Ok(())
    }
}

/// Variable layout `[d, y, v]` shared by every convex program built from a
/// general form.
#[derive(Debug, Clone, Copy)]
pub struct VarLayout {
    pub n: usize,
    pub h: usize,
}

impl VarLayout {
    pub fn total(&self) -> usize {
        self.n + 2 * self.h
    }

    pub fn d(&self, j: usize) -> usize {
        j
    }

    pub fn y(&self, i: usize) -> usize {
        self.n + i
    }

    pub fn v(&self, i: usize) -> usize {
        self.n + self.h + i
    }

    pub fn unpack(&self, x: &DVector<f64>) -> StackedPoint {
        StackedPoint {
            d: x.rows(0, self.n).into_owned(),
            y: x.rows(self.n, self.h).into_owned(),
            v: x.rows(self.n + self.h, self.h).into_owned(),
        }
    }

    pub fn pack(&self, p: &StackedPoint) -> DVector<f64> {
        let mut x = DVector::zeros(self.total());
        x.rows_mut(0, self.n).copy_from(&p.d);
        x.rows_mut(self.n, self.h).copy_from(&p.y);
        x.rows_mut(self.n + self.h, self.h).copy_from(&p.v);
        x
    }
}

impl GeneralForm {
    pub fn layout(&self) -> VarLayout {
        VarLayout {
            n: self.input_dim(),
            h: self.hidden_count(),
        }
    }

    /// Zero-objective convex program over `[d, y, v]` with the network
    /// equalities, `A d >= f` and `y, v >= 0`. The paired rows encoding
    /// `Σd = total` are passed as one equality, placed after the `H` network
    /// rows.
    pub fn feasible_set_qp(&self) -> QpSpec {
        let lay = self.layout();
        let (n, h) = (lay.n, lay.h);
        let m_eq = h + usize::from(self.equality_rows.is_some());
        let mut eq = DMatrix::zeros(m_eq, lay.total());
        let mut eq_rhs = DVector::zeros(m_eq);
        eq.view_mut((0, 0), (h, n)).copy_from(&self.v);
        eq.view_mut((0, n), (h, h)).copy_from(&self.w);
        eq.view_mut((0, n + h), (h, h))
            .copy_from(&(-DMatrix::<f64>::identity(h, h)));
        eq_rhs.rows_mut(0, h).copy_from(&(-&self.b));
        if let Some((k, _)) = self.equality_rows {
            eq.view_mut((h, 0), (1, n)).copy_from(&self.a.row(k));
            eq_rhs[h] = self.f[k];
        }

        let ineq_rows = self.inequality_rows();
        let mut ineq = DMatrix::zeros(ineq_rows.len(), lay.total());
        let mut ineq_rhs = DVector::zeros(ineq_rows.len());
        for (r, &k) in ineq_rows.iter().enumerate() {
            ineq.view_mut((r, 0), (1, n)).copy_from(&(-self.a.row(k)));
            ineq_rhs[r] = -self.f[k];
        }

        let mut spec = QpSpec::new(lay.total())
            .with_equalities(eq, eq_rhs)
            .with_inequalities(ineq, ineq_rhs);
        for i in 0..h {
            spec.lower[lay.y(i)] = 0.0;
            spec.lower[lay.v(i)] = 0.0;
        }
        spec
    }

    /// Rows of `A` passed to the backend as inequalities.
    fn inequality_rows(&self) -> Vec<usize> {
        (0..self.a.nrows())
            .filter(|k| match self.equality_rows {
                Some((p, q)) => *k != p && *k != q,
                None => true,
            })
            .collect()
    }

    /// Multipliers `λ >= 0` of `A d >= f` recovered from a solution of a
    /// program built on [`GeneralForm::feasible_set_qp`].
    pub fn domain_duals(&self, sol: &QpSolution) -> DVector<f64> {
        let mut lambda = DVector::zeros(self.a.nrows());
        for (r, k) in self.inequality_rows().into_iter().enumerate() {
            lambda[k] = sol.duals_ineq[r];
        }
        if let Some((p, q)) = self.equality_rows {
            // Paired rows contribute −aᵀ(λ_p − λ_q); the backend contributes aᵀz.
            let z = sol.duals_eq[self.hidden_count()];
            lambda[p] = (-z).max(0.0);
            lambda[q] = z.max(0.0);
        }
        lambda
    }

    /// Multipliers `μ` of `V d + W y + b = v` under the Lagrangian
    /// `cᵀy − λᵀ(Ad − f) − μᵀ(Vd + Wy + b − v) − …`.
    pub fn network_duals(&self, sol: &QpSolution) -> DVector<f64> {
        -sol.duals_eq.rows(0, self.hidden_count()).into_owned()
    }
}

/// Stacks a network trace into the general-form variables.
pub fn stack_trace(trace: &crate::network::ActivationTrace) -> StackedPoint {
    StackedPoint {
        d: trace.input.clone(),
        y: trace.stacked_y(),
        v: trace.stacked_v(),
    }
}


#[cfg(test)]
mod props {
    use super::*;
    use crate::testutil::random_net;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    proptest! {
        #[test]
        fn unstacking_a_complementary_point_reproduces_output(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let net = random_net(&mut rng, 2, &[4, 3], 1);
            let dom = InputDomain::boxed(vec![-2.0; 2], vec![2.0; 2]).unwrap();
            let gf = assemble(&net, &dom, &CostSpec::minimize_output()).unwrap();
            let d = dom.sample(&mut rng);
            let p = stack_trace(&net.trace(&d).unwrap());
            // Re-evaluate layer by layer from the stacked values.
            let mut prev = p.d.clone();
            for (l, r) in gf.layer_ranges().iter().enumerate() {
                let y_l = p.y.rows(r.start, r.len()).into_owned();
                let relu = net.hidden_layers()[l].apply(&prev).map(|a| a.max(0.0));
                prop_assert!((&relu - &y_l).amax() <= 1e-8);
                prev = y_l;
            }
            let lam = net.output_layer().apply(&prev)[0];
            prop_assert!((lam - net.forward(&d).unwrap()[0]).abs() <= 1e-8);
        }
    }
}
