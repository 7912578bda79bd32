use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::network::{LayerParams, ReluNetwork};

pub(crate) fn random_net(rng: &mut impl Rng, n: usize, widths: &[usize], m: usize) -> ReluNetwork {
    let mut hidden = Vec::new();
    let mut prev = n;
    for &w in widths {
        hidden.push(LayerParams {
            weights: DMatrix::from_fn(w, prev, |_, _| rng.gen_range(-1.0..1.0)),
            bias: DVector::from_fn(w, |_, _| rng.gen_range(-0.5..0.5)),
        });
        prev = w;
    }
    let output = LayerParams {
        weights: DMatrix::from_fn(m, prev, |_, _| rng.gen_range(-1.0..1.0)),
        bias: DVector::from_fn(m, |_, _| rng.gen_range(-0.5..0.5)),
    };
    ReluNetwork::new(hidden, output).unwrap()
}

/// `y = relu(w·d + b)`, `λ = y`.
pub(crate) fn one_neuron(w: f64, b: f64) -> ReluNetwork {
    ReluNetwork::new(
        vec![LayerParams::from_rows(&[vec![w]], &[b]).unwrap()],
        LayerParams::from_rows(&[vec![1.0]], &[0.0]).unwrap(),
    )
    .unwrap()
}
