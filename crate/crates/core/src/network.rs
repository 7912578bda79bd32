//! Trained feedforward ReLU networks: evaluation, activation traces and the
//! weight-file format.
//!
//! A network with `N` hidden layers computes
//! `λ = W_out · relu(W_N · … relu(W_1 d + b_1) … + b_N) + b_out`.
//! Each hidden neuron with pre-activation `a` is represented by the pair
//! `(y, v) = (max(a, 0), max(-a, 0))`, so that `y - v = a` and `y ⊥ v`.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Pre-activations with magnitude at or below this are flagged degenerate.
pub const DEGENERACY_TOL: f64 = 1e-9;

/// Weights and bias of one affine layer, `rows = neurons`, `cols = inputs`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub weights: DMatrix<f64>,
    pub bias: DVector<f64>,
}

impl LayerParams {
    pub fn new(weights: DMatrix<f64>, bias: DVector<f64>) -> Result<Self> {
        let layer = LayerParams { weights, bias };
        layer.validate("layer")?;
        Ok(layer)
    }

    /// Builds a layer from row-major rows.
    pub fn from_rows(rows: &[Vec<f64>], bias: &[f64]) -> Result<Self> {
        let ncols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != ncols) {
            return Err(Error::Schema("weight rows have unequal lengths".into()));
        }
        let weights = DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]);
        LayerParams::new(weights, DVector::from_column_slice(bias))
    }

    pub fn inputs(&self) -> usize {
        self.weights.ncols()
    }

    pub fn outputs(&self) -> usize {
        self.weights.nrows()
    }

    pub fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.weights * x + &self.bias
    }

    fn validate(&self, name: &str) -> Result<()> {
        if self.weights.nrows() != self.bias.len() {
            return Err(Error::DimensionChain(format!(
                "{name}: {} weight rows but bias of length {}",
                self.weights.nrows(),
                self.bias.len()
            )));
        }
        if self
            .weights
            .iter()
            .chain(self.bias.iter())
            .any(|x| !x.is_finite())
        {
            return Err(Error::NonFinite(name.to_string()));
        }
        Ok(())
    }
}

/// A trained, immutable ReLU network.
#[derive(Debug, Clone, PartialEq)]
pub struct ReluNetwork {
    hidden: Vec<LayerParams>,
    output: LayerParams,
}

/// Per-neuron `(y, v)` pairs of one forward pass, plus the input and output.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTrace {
    pub input: DVector<f64>,
    /// Post-activations, one vector per hidden layer.
    pub y: Vec<DVector<f64>>,
    /// Slacks `max(-a, 0)`, one vector per hidden layer.
    pub v: Vec<DVector<f64>>,
    /// Pre-activations, kept for degeneracy classification.
    pub pre: Vec<DVector<f64>>,
    pub output: DVector<f64>,
}

impl ActivationTrace {
    /// Stacked post-activations, layer 1 first.
    pub fn stacked_y(&self) -> DVector<f64> {
        stack(&self.y)
    }

    pub fn stacked_v(&self) -> DVector<f64> {
        stack(&self.v)
    }

    /// Stacked indices of neurons whose pre-activation is within
    /// [`DEGENERACY_TOL`] of zero.
    pub fn degenerate(&self) -> Vec<usize> {
        self.pre
            .iter()
            .flat_map(|a| a.iter())
            .enumerate()
            .filter(|(_, a)| a.abs() <= DEGENERACY_TOL)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn is_degenerate(&self) -> bool {
        self.pre
            .iter()
            .flat_map(|a| a.iter())
            .any(|a| a.abs() <= DEGENERACY_TOL)
    }
}

fn stack(parts: &[DVector<f64>]) -> DVector<f64> {
    DVector::from_iterator(
        parts.iter().map(|p| p.len()).sum(),
        parts.iter().flat_map(|p| p.iter().copied()),
    )
}

impl ReluNetwork {
    pub fn new(hidden: Vec<LayerParams>, output: LayerParams) -> Result<Self> {
        let net = ReluNetwork { hidden, output };
        net.validate()?;
        Ok(net)
    }

    fn validate(&self) -> Result<()> {
        if self.hidden.is_empty() {
            return Err(Error::DimensionChain(
                "at least one hidden layer is required".into(),
            ));
        }
        if self.hidden[0].inputs() == 0 {
            return Err(Error::DimensionChain(
                "input dimension must be positive".into(),
            ));
        }
        for (i, layer) in self.hidden.iter().enumerate() {
            layer.validate(&format!("hidden layer {}", i + 1))?;
            if layer.outputs() == 0 {
                return Err(Error::DimensionChain(format!(
                    "hidden layer {} is empty",
                    i + 1
                )));
            }
            if i > 0 && layer.inputs() != self.hidden[i - 1].outputs() {
                return Err(Error::DimensionChain(format!(
                    "hidden layer {} expects {} inputs but layer {} has {} neurons",
                    i + 1,
                    layer.inputs(),
                    i,
                    self.hidden[i - 1].outputs()
                )));
            }
        }
        self.output.validate("output layer")?;
        let last = self
            .hidden
            .last()
            .map(LayerParams::outputs)
            .unwrap_or_default();
        if self.output.inputs() != last || self.output.outputs() == 0 {
            return Err(Error::DimensionChain(format!(
                "output layer is {}x{} but the last hidden layer has {last} neurons",
                self.output.outputs(),
                self.output.inputs()
            )));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.hidden[0].inputs()
    }

    pub fn output_dim(&self) -> usize {
        self.output.outputs()
    }

    pub fn hidden_layers(&self) -> &[LayerParams] {
        &self.hidden
    }

    pub fn output_layer(&self) -> &LayerParams {
        &self.output
    }

    /// Neuron count of every hidden layer.
    pub fn widths(&self) -> Vec<usize> {
        self.hidden.iter().map(LayerParams::outputs).collect()
    }

    /// Total number of hidden neurons.
    pub fn hidden_count(&self) -> usize {
        self.hidden.iter().map(LayerParams::outputs).sum()
    }

    fn check_input(&self, d: &[f64]) -> Result<()> {
        Error::check_len("network input", self.input_dim(), d.len())?;
        if d.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("network input".into()));
        }
        Ok(())
    }

    pub fn forward(&self, d: &[f64]) -> Result<DVector<f64>> {
        self.check_input(d)?;
        let mut x = DVector::from_column_slice(d);
        for layer in &self.hidden {
            x = layer.apply(&x).map(|a| a.max(0.0));
        }
        Ok(self.output.apply(&x))
    }

    pub fn trace(&self, d: &[f64]) -> Result<ActivationTrace> {
        self.check_input(d)?;
        let input = DVector::from_column_slice(d);
        let mut y = Vec::with_capacity(self.hidden.len());
        let mut v = Vec::with_capacity(self.hidden.len());
        let mut pre = Vec::with_capacity(self.hidden.len());
        let mut x = input.clone();
        for layer in &self.hidden {
            let a = layer.apply(&x);
            let yi = a.map(|t| t.max(0.0));
            let vi = a.map(|t| (-t).max(0.0));
            x = yi.clone();
            y.push(yi);
            v.push(vi);
            pre.push(a);
        }
        let output = self.output.apply(&x);
        Ok(ActivationTrace {
            input,
            y,
            v,
            pre,
            output,
        })
    }

    pub fn to_document(&self) -> NetworkDocument {
        NetworkDocument {
            input_dim: self.input_dim(),
            output_dim: self.output_dim(),
            hidden_layers: self.hidden.iter().map(LayerDocument::from).collect(),
            output_layer: LayerDocument::from(&self.output),
        }
    }

    pub fn from_document(doc: &NetworkDocument) -> Result<Self> {
        let hidden = doc
            .hidden_layers
            .iter()
            .enumerate()
            .map(|(i, l)| l.to_layer(&format!("hidden layer {}", i + 1)))
            .collect::<Result<Vec<_>>>()?;
        let output = doc.output_layer.to_layer("output layer")?;
        let net = ReluNetwork::new(hidden, output)?;
        if net.input_dim() != doc.input_dim || net.output_dim() != doc.output_dim {
            return Err(Error::DimensionChain(format!(
                "declared {}→{} but layers give {}→{}",
                doc.input_dim,
                doc.output_dim,
                net.input_dim(),
                net.output_dim()
            )));
        }
        Ok(net)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_document()).expect("network document serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: NetworkDocument =
            serde_json::from_str(text).map_err(|e| Error::Schema(e.to_string()))?;
        ReluNetwork::from_document(&doc)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        ReluNetwork::from_json(&text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }
}

/// On-disk weight-file layout. Matrices are row-major nested arrays.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkDocument {
    pub input_dim: usize,
    pub output_dim: usize,
    pub hidden_layers: Vec<LayerDocument>,
    pub output_layer: LayerDocument,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerDocument {
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
}

impl From<&LayerParams> for LayerDocument {
    fn from(layer: &LayerParams) -> Self {
        LayerDocument {
            weights: layer
                .weights
                .row_iter()
                .map(|r| r.iter().copied().collect())
                .collect(),
            bias: layer.bias.iter().copied().collect(),
        }
    }
}

impl LayerDocument {
    fn to_layer(&self, name: &str) -> Result<LayerParams> {
        let ncols = self.weights.first().map_or(0, Vec::len);
        if self.weights.iter().any(|r| r.len() != ncols) {
            return Err(Error::Schema(format!("{name}: ragged weight rows")));
        }
        let layer = LayerParams {
            weights: DMatrix::from_fn(self.weights.len(), ncols, |i, j| self.weights[i][j]),
            bias: DVector::from_column_slice(&self.bias),
        };
        layer.validate(name)?;
        Ok(layer)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{one_neuron, random_net};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Scalar-loop evaluator that shares no code with `forward`.
    fn scalar_forward(net: &ReluNetwork, d: &[f64]) -> Vec<f64> {
        let doc = net.to_document();
        let mut x = d.to_vec();
        for layer in &doc.hidden_layers {
            let mut next = vec![0.0; layer.bias.len()];
            for (i, row) in layer.weights.iter().enumerate() {
                let mut acc = layer.bias[i];
                for (j, w) in row.iter().enumerate() {
                    acc += w * x[j];
                }
                next[i] = if acc > 0.0 { acc } else { 0.0 };
            }
            x = next;
        }
        let out = &doc.output_layer;
        out.weights
            .iter()
            .zip(&out.bias)
            .map(|(row, b)| b + row.iter().zip(&x).map(|(w, xi)| w * xi).sum::<f64>())
            .collect()
    }

    #[test]
    fn zero_weights_pass_biases_through_relu() {
        let net = ReluNetwork::new(
            vec![LayerParams::from_rows(&[vec![0.0, 0.0], vec![0.0, 0.0]], &[-1.0, 2.0]).unwrap()],
            LayerParams::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]], &[0.0, 0.0]).unwrap(),
        )
        .unwrap();
        for d in [[0.0, 0.0], [5.0, -3.0], [-1e6, 1e6]] {
            assert_eq!(net.forward(&d).unwrap().as_slice(), &[0.0, 2.0]);
        }
    }

    #[test]
    fn negative_preactivation_clamps() {
        let net = one_neuron(1.0, 0.0);
        assert_eq!(net.forward(&[-2.0]).unwrap()[0], 0.0);
    }

    #[test]
    fn forward_matches_scalar_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let net = random_net(&mut rng, 3, &[6, 5], 2);
            let d: Vec<f64> = (0..3).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let fast = net.forward(&d).unwrap();
            let slow = scalar_forward(&net, &d);
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()));
            }
        }
    }

    #[test]
    fn trace_pairs_follow_sign_of_preactivation() {
        let net = one_neuron(1.0, 0.0);
        let t = net.trace(&[3.0]).unwrap();
        assert_eq!((t.y[0][0], t.v[0][0]), (3.0, 0.0));
        let t = net.trace(&[-2.0]).unwrap();
        assert_eq!((t.y[0][0], t.v[0][0]), (0.0, 2.0));
        let t = net.trace(&[0.0]).unwrap();
        assert_eq!((t.y[0][0], t.v[0][0]), (0.0, 0.0));
        assert_eq!(t.degenerate(), vec![0]);
        assert!(t.is_degenerate());
    }

    #[test]
    fn input_shape_is_checked() {
        let net = one_neuron(1.0, 0.0);
        assert!(matches!(net.forward(&[1.0, 2.0]), Err(Error::Shape { .. })));
        assert!(matches!(net.forward(&[f64::NAN]), Err(Error::NonFinite(_))));
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = random_net(&mut rng, 2, &[50, 50], 1);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.json");
        net.save(&path).unwrap();
        let back = ReluNetwork::load(&path).unwrap();
        assert_eq!(net, back);
    }

    #[test]
    fn load_rejects_bad_files() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            ReluNetwork::load(dir.path().join("missing.json")),
            Err(Error::Io { .. })
        ));

        let bad_bias = r#"{"input_dim":1,"output_dim":1,
            "hidden_layers":[{"weights":[[1.0],[2.0]],"bias":[0.0]}],
            "output_layer":{"weights":[[1.0,1.0]],"bias":[0.0]}}"#;
        assert!(matches!(
            ReluNetwork::from_json(bad_bias),
            Err(Error::DimensionChain(_))
        ));

        // JSON has no NaN literal; non-finite values arrive as overflowing numbers.
        let overflow = r#"{"input_dim":1,"output_dim":1,
            "hidden_layers":[{"weights":[[1e999]],"bias":[0.0]}],
            "output_layer":{"weights":[[1.0]],"bias":[0.0]}}"#;
        assert!(matches!(
            ReluNetwork::from_json(overflow),
            Err(Error::NonFinite(_)) | Err(Error::Schema(_))
        ));
        let nan_layer = LayerParams::new(DMatrix::from_element(1, 1, f64::NAN), DVector::zeros(1));
        assert!(matches!(nan_layer, Err(Error::NonFinite(_))));

        assert!(matches!(ReluNetwork::from_json("{"), Err(Error::Schema(_))));
        let chain = r#"{"input_dim":2,"output_dim":1,
            "hidden_layers":[{"weights":[[1.0]],"bias":[0.0]}],
            "output_layer":{"weights":[[1.0]],"bias":[0.0]}}"#;
        assert!(matches!(
            ReluNetwork::from_json(chain),
            Err(Error::DimensionChain(_))
        ));
    }
}

#[cfg(test)]
mod props {
    use crate::testutil::random_net;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn trace_is_a_complementary_split(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let net = random_net(&mut rng, 3, &[5, 4], 2);
            let d: Vec<f64> = (0..3).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let t = net.trace(&d).unwrap();
            let mut prev = t.input.clone();
            for (i, layer) in net.hidden_layers().iter().enumerate() {
                let a = layer.apply(&prev);
                for k in 0..a.len() {
                    prop_assert!(t.y[i][k] >= 0.0 && t.v[i][k] >= 0.0);
                    prop_assert_eq!(t.y[i][k] * t.v[i][k], 0.0);
                    prop_assert!((t.y[i][k] - t.v[i][k] - a[k]).abs() <= 1e-12 * (1.0 + a[k].abs()));
                }
                prev = t.y[i].clone();
            }
            let out = net.output_layer().apply(t.y.last().unwrap());
            prop_assert_eq!(&out, &net.forward(&d).unwrap());
            prop_assert_eq!(&t.output, &out);
        }

        #[test]
        fn forward_is_affine_within_a_pattern(seed in any::<u64>(), s in 0.0f64..1.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let net = random_net(&mut rng, 2, &[4, 3], 1);
            let d0: Vec<f64> = (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let d1: Vec<f64> = d0.iter().map(|x| x + rng.gen_range(-1e-3..1e-3)).collect();
            let pattern = |d: &[f64]| -> Vec<bool> {
                net.trace(d).unwrap().pre.iter().flat_map(|a| a.iter().map(|x| *x > 0.0).collect::<Vec<_>>()).collect()
            };
            let mid: Vec<f64> = d0.iter().zip(&d1).map(|(a, b)| (1.0 - s) * a + s * b).collect();
            prop_assume!(pattern(&d0) == pattern(&d1) && pattern(&d0) == pattern(&mid));
            let f0 = net.forward(&d0).unwrap()[0];
            let f1 = net.forward(&d1).unwrap()[0];
            let fm = net.forward(&mid).unwrap()[0];
            prop_assert!((fm - ((1.0 - s) * f0 + s * f1)).abs() <= 1e-10);
        }
    }
}
