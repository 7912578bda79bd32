//! Supervised training of scalar-output ReLU surrogates.
//!
//! Minibatch gradient descent with classical momentum on the mean squared
//! error. Inputs and labels are standardized internally; the exported network
//! maps raw inputs to raw labels.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{LayerParams, ReluNetwork};

pub const LABEL_COLUMN: &str = "charge";

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    inputs: Vec<Vec<f64>>,
    labels: Vec<f64>,
}

impl Dataset {
    pub fn new(inputs: Vec<Vec<f64>>, labels: Vec<f64>) -> Result<Self> {
        Error::check_len("labels", inputs.len(), labels.len())?;
        let dim = inputs.first().map_or(0, Vec::len);
        for (k, row) in inputs.iter().enumerate() {
            Error::check_len("sample", dim, row.len())?;
            if row.iter().any(|x| !x.is_finite()) || !labels[k].is_finite() {
                return Err(Error::NonFinite(format!("sample {k}")));
            }
        }
        Ok(Dataset { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs.first().map_or(0, Vec::len)
    }

    pub fn inputs(&self) -> &[Vec<f64>] {
        &self.inputs
    }

    pub fn labels(&self) -> &[f64] {
        &self.labels
    }

    /// Rows `d_1..d_n,charge` with a header.
    pub fn write_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header: Vec<String> = (1..=self.dim()).map(|j| format!("d_{j}")).collect();
        header.push(LABEL_COLUMN.into());
        w.write_record(&header)?;
        for (row, label) in self.inputs.iter().zip(&self.labels) {
            let mut rec: Vec<String> = row.iter().map(f64::to_string).collect();
            rec.push(label.to_string());
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io("<dataset>", e))?;
        Ok(())
    }

    pub fn read_csv(input: impl Read) -> Result<Self> {
        let mut r = csv::Reader::from_reader(input);
        let header = r.headers()?.clone();
        let n = header
            .len()
            .checked_sub(1)
            .filter(|&n| n > 0)
            .ok_or_else(|| {
                Error::Schema("dataset needs at least one input column and a label".into())
            })?;
        for (j, name) in header.iter().enumerate() {
            let expected = if j < n {
                format!("d_{}", j + 1)
            } else {
                LABEL_COLUMN.into()
            };
            if name.trim() != expected {
                return Err(Error::Schema(format!(
                    "dataset column {} is {name:?}, expected {expected:?}",
                    j + 1
                )));
            }
        }
        let mut inputs = Vec::new();
        let mut labels = Vec::new();
        for (line, rec) in r.records().enumerate() {
            let rec = rec?;
            let vals: Vec<f64> = rec
                .iter()
                .map(|s| s.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Schema(format!("dataset row {}: {e}", line + 1)))?;
            Error::check_len("dataset row", n + 1, vals.len())?;
            labels.push(vals[n]);
            inputs.push(vals[..n].to_vec());
        }
        Dataset::new(inputs, labels)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_csv(std::io::BufReader::new(f))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(f))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub hidden: Vec<usize>,
    pub learning_rate: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub init_scale: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            hidden: vec![20, 20],
            learning_rate: 0.01,
            momentum: 0.9,
            epochs: 200,
            batch_size: 32,
            seed: 0,
            init_scale: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = !self.hidden.is_empty()
            && self.hidden.iter().all(|&w| w > 0)
            && self.learning_rate > 0.0
            && (0.0..1.0).contains(&self.momentum)
            && self.batch_size > 0
            && self.init_scale > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Schema(format!(
                "invalid training configuration {self:?}"
            )))
        }
    }
}

/// Gradient of one affine layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGradient {
    pub weights: DMatrix<f64>,
    pub bias: DVector<f64>,
}

#[derive(Debug, Clone)]
pub struct Trained {
    pub network: ReluNetwork,
    /// Training-set MSE in raw label units after each epoch.
    pub loss_trace: Vec<f64>,
}

impl Trained {
    pub fn write_loss_csv(&self, mut out: impl Write) -> std::io::Result<()> {
        writeln!(out, "epoch,mse")?;
        for (k, l) in self.loss_trace.iter().enumerate() {
            writeln!(out, "{},{}", k + 1, l)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub mse: f64,
    pub max_abs_error: f64,
}

pub fn evaluate(net: &ReluNetwork, data: &Dataset) -> Result<Metrics> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Error::check_len("network output", 1, net.output_dim())?;
    let mut sq = 0.0;
    let mut max_abs: f64 = 0.0;
    for (d, t) in data.inputs.iter().zip(&data.labels) {
        let e = (net.forward(d)?[0] - t).abs();
        sq += e * e;
        max_abs = max_abs.max(e);
    }
    Ok(Metrics {
        mse: sq / data.len() as f64,
        max_abs_error: max_abs,
    })
}

type Layers = Vec<(DMatrix<f64>, DVector<f64>)>;

fn layers_of(net: &ReluNetwork) -> Layers {
    net.hidden_layers()
        .iter()
        .chain(std::iter::once(net.output_layer()))
        .map(|l| (l.weights.clone(), l.bias.clone()))
        .collect()
}

fn network_of(layers: Layers) -> Result<ReluNetwork> {
    let mut params: Vec<LayerParams> = layers
        .into_iter()
        .map(|(w, b)| LayerParams::new(w, b))
        .collect::<Result<_>>()?;
    let output = params.pop().expect("at least one layer");
    ReluNetwork::new(params, output)
}

/// Loss `mean((f(x) − t)²)` over the columns of `x` and its gradient.
fn batch_gradient(
    layers: &Layers,
    x: &DMatrix<f64>,
    t: &DVector<f64>,
) -> (f64, Vec<LayerGradient>) {
    let batch = x.ncols();
    let mut acts = vec![x.clone()];
    let mut pres = Vec::with_capacity(layers.len());
    for (k, (w, b)) in layers.iter().enumerate() {
        let mut z = w * acts.last().unwrap();
        for mut col in z.column_iter_mut() {
            col += b;
        }
        if k + 1 < layers.len() {
            pres.push(z.clone());
            acts.push(z.map(|a| a.max(0.0)));
        } else {
            acts.push(z);
        }
    }
    let out = acts.last().unwrap().row(0).transpose();
    let err = out - t;
    let loss = err.norm_squared() / batch as f64;

    let mut delta = DMatrix::from_row_slice(1, batch, (err * (2.0 / batch as f64)).as_slice());
    let mut grads = Vec::with_capacity(layers.len());
    for k in (0..layers.len()).rev() {
        let gw = &delta * acts[k].transpose();
        let gb = delta.column_sum();
        if k > 0 {
            let mut back = layers[k].0.tr_mul(&delta);
            back.zip_apply(&pres[k - 1], |g, a| {
                if a <= 0.0 {
                    *g = 0.0;
                }
            });
            delta = back;
        }
        grads.push(LayerGradient {
            weights: gw,
            bias: gb,
        });
    }
    grads.reverse();
    (loss, grads)
}

fn matrix_of(data: &Dataset, idx: &[usize]) -> (DMatrix<f64>, DVector<f64>) {
    let n = data.dim();
    let x = DMatrix::from_fn(n, idx.len(), |j, c| data.inputs[idx[c]][j]);
    let t = DVector::from_fn(idx.len(), |c, _| data.labels[idx[c]]);
    (x, t)
}

/// MSE of `net` on `data` and its gradient with respect to every weight and
/// bias, hidden layers first and the output layer last. The ReLU derivative
/// at zero is taken as zero.
pub fn mse_gradient(net: &ReluNetwork, data: &Dataset) -> Result<(f64, Vec<LayerGradient>)> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Error::check_len("dataset inputs", net.input_dim(), data.dim())?;
    Error::check_len("network output", 1, net.output_dim())?;
    let idx: Vec<usize> = (0..data.len()).collect();
    let (x, t) = matrix_of(data, &idx);
    Ok(batch_gradient(&layers_of(net), &x, &t))
}

fn mean_std(values: impl Iterator<Item = f64> + Clone, len: usize) -> (f64, f64) {
    let mean = values.clone().sum::<f64>() / len as f64;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / len as f64;
    let std = var.sqrt();
    (mean, if std > 1e-12 { std } else { 1.0 })
}

pub fn train(data: &Dataset, cfg: &TrainConfig) -> Result<Trained> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let n = data.dim();
    let len = data.len();
    let input_stats: Vec<(f64, f64)> = (0..n)
        .map(|j| mean_std(data.inputs.iter().map(move |r| r[j]), len))
        .collect();
    let (t_mean, t_std) = mean_std(data.labels.iter().copied(), len);
    let standardized = Dataset {
        inputs: data
            .inputs
            .iter()
            .map(|r| {
                r.iter()
                    .zip(&input_stats)
                    .map(|(x, (m, s))| (x - m) / s)
                    .collect()
            })
            .collect(),
        labels: data.labels.iter().map(|t| (t - t_mean) / t_std).collect(),
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut layers: Layers = Vec::new();
    let mut fan_in = n;
    for &w in cfg.hidden.iter().chain(std::iter::once(&1)) {
        let scale = cfg.init_scale / (fan_in as f64).sqrt();
        let weights = DMatrix::from_fn(w, fan_in, |_, _| rng.gen_range(-scale..scale));
        layers.push((weights, DVector::zeros(w)));
        fan_in = w;
    }
    let mut velocity: Layers = layers
        .iter()
        .map(|(w, b)| {
            (
                DMatrix::zeros(w.nrows(), w.ncols()),
                DVector::zeros(b.len()),
            )
        })
        .collect();

    let mut order: Vec<usize> = (0..len).collect();
    let mut loss_trace = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let (x, t) = matrix_of(&standardized, chunk);
            let (_, grads) = batch_gradient(&layers, &x, &t);
            for ((layer, vel), g) in layers.iter_mut().zip(velocity.iter_mut()).zip(&grads) {
                vel.0 = &vel.0 * cfg.momentum - &g.weights * cfg.learning_rate;
                vel.1 = &vel.1 * cfg.momentum - &g.bias * cfg.learning_rate;
                layer.0 += &vel.0;
                layer.1 += &vel.1;
            }
        }
        let (x, t) = matrix_of(&standardized, &(0..len).collect::<Vec<_>>());
        let (loss, _) = batch_gradient(&layers, &x, &t);
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!(
                "training loss diverged at learning rate {}",
                cfg.learning_rate
            )));
        }
        loss_trace.push(loss * t_std * t_std);
    }

    // Fold the standardization into the first and last layers.
    let (w1, b1) = &mut layers[0];
    for (j, &(m, s)) in input_stats.iter().enumerate().take(n) {
        let col = w1.column(j) / s;
        *b1 -= &col * m;
        w1.set_column(j, &col);
    }
    let last = layers.last_mut().unwrap();
    last.0 *= t_std;
    last.1 = last.1.map(|b| b * t_std + t_mean);

    Ok(Trained {
        network: network_of(layers)?,
        loss_trace,
    })
}
