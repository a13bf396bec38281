//! Deep-regression imager: a six-layer perceptron from normalized RSS differences to
//! voxel images, trained with dropout, L2 and Adam, fused as an ensemble median.

use std::io::{Read, Write};
use std::path::Path;

use faer::Mat;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::analytic::ImageFrame;
use crate::preprocess::RssDifferenceVector;
use crate::stats::median;
use crate::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"TSEE";
pub const CHECKPOINT_VERSION: u8 = 1;
/// Default normalization ceiling for RSS differences, dB.
pub const DEFAULT_MAX_RSS_DB: f64 = 30.0;
/// Default label ellipse half-width, voxels.
pub const DEFAULT_LABEL_SEMI_U: f64 = 12.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
    Sigmoid,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
            // same function as 1/(1+e^-z), and much cheaper than exp here
            Activation::Sigmoid => 0.5 + 0.5 * (0.5 * z).tanh(),
        }
    }

    /// Derivative expressed through the activation value `a`.
    fn slope(self, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - a * a,
            Activation::Sigmoid => a * (1.0 - a),
        }
    }

    fn code(self) -> u8 {
        self as u8
    }

    fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(Activation::Relu),
            1 => Ok(Activation::Tanh),
            2 => Ok(Activation::Sigmoid),
            _ => Err(Error::Checkpoint(format!("unknown activation code {c}"))),
        }
    }
}

/// Architecture and training hyper-parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpSpec {
    /// Input width followed by each layer's output width.
    pub dims: Vec<usize>,
    pub activations: Vec<Activation>,
    /// Probability of keeping a hidden unit during training.
    pub retain: f64,
    pub l2: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

pub const STANDARD_ACTIVATIONS: [Activation; 6] = [
    Activation::Relu,
    Activation::Relu,
    Activation::Tanh,
    Activation::Tanh,
    Activation::Sigmoid,
    Activation::Sigmoid,
];

impl MlpSpec {
    /// `K → ⌈3K/2⌉ → 3K → 3K → 2K → 2K → N`.
    pub fn standard(k: usize, n: usize) -> Self {
        Self {
            dims: vec![k, (3 * k).div_ceil(2), 3 * k, 3 * k, 2 * k, 2 * k, n],
            activations: STANDARD_ACTIVATIONS.to_vec(),
            retain: 0.7,
            l2: 1e-5,
            learning_rate: 1e-3,
            batch_size: 32,
            epochs: 200,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.len() != self.activations.len() + 1 || self.activations.is_empty() {
            return Err(Error::Config("need one activation per layer".into()));
        }
        if self.dims.contains(&0) {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        if !(self.retain > 0.0 && self.retain <= 1.0) {
            return Err(Error::Config(format!("retain probability {} outside (0, 1]", self.retain)));
        }
        if !(self.l2 >= 0.0 && self.learning_rate > 0.0) || self.batch_size == 0 {
            return Err(Error::Config("invalid optimizer settings".into()));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().expect("validated spec has layers")
    }

    /// `(in, out)` of every layer.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        self.dims.windows(2).map(|w| (w[0], w[1])).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// `out x in`.
    pub weights: Mat<f64>,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Layer>,
}

/// Parameter gradients, shaped like the network.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub weights: Vec<Mat<f64>>,
    pub bias: Vec<Vec<f64>>,
}

struct Cache {
    /// Pre-dropout activations; `activations[0]` is the input batch.
    activations: Vec<Mat<f64>>,
    /// Post-dropout outputs, present only for layers that drew a mask.
    dropped: Vec<Option<Mat<f64>>>,
    /// Dropout masks already divided by the retain probability.
    masks: Vec<Option<Mat<f64>>>,
}

impl Cache {
    fn output(&self, layer: usize) -> &Mat<f64> {
        self.dropped[layer].as_ref().unwrap_or(&self.activations[layer])
    }

    fn into_last(mut self) -> Mat<f64> {
        let last = self.activations.len() - 1;
        self.dropped[last].take().unwrap_or_else(|| self.activations.pop().expect("has output"))
    }
}

impl Mlp {
    /// Uniform initialization scaled to the activation: He for ReLU, Glorot for tanh and
    /// four times Glorot for sigmoid. Biases start at zero.
    pub fn random(spec: &MlpSpec, rng: &mut ChaCha8Rng) -> Result<Self> {
        spec.validate()?;
        let layers = spec
            .layer_shapes()
            .into_iter()
            .zip(&spec.activations)
            .map(|((fan_in, fan_out), &activation)| {
                let glorot = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let r = match activation {
                    Activation::Relu => (6.0 / fan_in as f64).sqrt(),
                    Activation::Tanh => glorot,
                    Activation::Sigmoid => 4.0 * glorot,
                };
                let weights = Mat::from_fn(fan_out, fan_in, |_, _| rng.gen_range(-r..r));
                let bias = vec![0.0; fan_out];
                Layer {
                    weights,
                    bias,
                    activation,
                }
            })
            .collect();
        Ok(Self { layers })
    }

    pub fn zeros(spec: &MlpSpec) -> Result<Self> {
        spec.validate()?;
        let layers = spec
            .layer_shapes()
            .into_iter()
            .zip(&spec.activations)
            .map(|((i, o), &activation)| Layer {
                weights: Mat::zeros(o, i),
                bias: vec![0.0; o],
                activation,
            })
            .collect();
        Ok(Self { layers })
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.layers[0].weights.ncols()];
        d.extend(self.layers.iter().map(|l| l.weights.nrows()));
        d
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weights.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("network has layers").weights.nrows()
    }

    fn check_input(&self, rows: usize) -> Result<()> {
        if rows != self.input_dim() {
            return Err(Error::DimensionMismatch {
                context: "network input width",
                expected: self.input_dim(),
                actual: rows,
            });
        }
        Ok(())
    }

    /// Forward pass over a batch stored as columns. Dropout applies to hidden layers
    /// only, and only when `dropout` is given.
    fn forward_cached(&self, x: &Mat<f64>, mut dropout: Option<(&mut ChaCha8Rng, f64)>) -> Result<Cache> {
        self.check_input(x.nrows())?;
        let last = self.layers.len() - 1;
        let mut cache = Cache {
            activations: vec![x.clone()],
            dropped: vec![None],
            masks: vec![None],
        };
        for (li, layer) in self.layers.iter().enumerate() {
            let mut a = &layer.weights * cache.output(li);
            for j in 0..a.ncols() {
                for (v, b) in a.col_as_slice_mut(j).iter_mut().zip(&layer.bias) {
                    *v = layer.activation.apply(*v + b);
                }
            }
            let mask = match dropout.as_mut() {
                Some((rng, retain)) if li < last && *retain < 1.0 => {
                    let keep = 1.0 / *retain;
                    let mut m = Mat::zeros(a.nrows(), a.ncols());
                    for j in 0..m.ncols() {
                        for v in m.col_as_slice_mut(j) {
                            if rng.gen::<f64>() < *retain {
                                *v = keep;
                            }
                        }
                    }
                    Some(m)
                }
                _ => None,
            };
            let dropped = mask.as_ref().map(|m| {
                let mut out = a.clone();
                for j in 0..out.ncols() {
                    for (v, k) in out.col_as_slice_mut(j).iter_mut().zip(m.col_as_slice(j)) {
                        *v *= k;
                    }
                }
                out
            });
            cache.activations.push(a);
            cache.masks.push(mask);
            cache.dropped.push(dropped);
        }
        Ok(cache)
    }

    /// Batch inference without dropout; columns are samples.
    pub fn forward_batch(&self, x: &Mat<f64>) -> Result<Mat<f64>> {
        Ok(self.forward_cached(x, None)?.into_last())
    }

    /// Single-sample forward pass. With `training`, inverted dropout is drawn from `rng`.
    pub fn forward(&self, input: &[f64], training: bool, retain: f64, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
        let x = Mat::from_fn(input.len(), 1, |i, _| input[i]);
        let dropout = training.then_some((rng, retain));
        let out = self.forward_cached(&x, dropout)?.into_last();
        Ok((0..out.nrows()).map(|i| out[(i, 0)]).collect())
    }

    /// Mean squared error over all outputs of the batch plus `l2·Σ‖W‖²`.
    pub fn loss(&self, x: &Mat<f64>, t: &Mat<f64>, l2: f64) -> Result<f64> {
        let out = self.forward_batch(x)?;
        Ok(mse(&out, t)? + l2 * self.weight_norm_sq())
    }

    fn weight_norm_sq(&self) -> f64 {
        self.layers
            .iter()
            .map(|l| (0..l.weights.ncols()).flat_map(|j| l.weights.col_as_slice(j)).map(|w| w * w).sum::<f64>())
            .sum()
    }

    /// Loss and its gradient for one batch.
    pub fn loss_and_gradients(
        &self,
        x: &Mat<f64>,
        t: &Mat<f64>,
        l2: f64,
        dropout: Option<(&mut ChaCha8Rng, f64)>,
    ) -> Result<(f64, Gradients)> {
        let mut grads = Gradients::zeros_like(self);
        let loss = self.loss_and_gradients_into(x, t, l2, dropout, &mut grads)?;
        Ok((loss, grads))
    }

    /// Same as `loss_and_gradients`, writing into preallocated buffers.
    pub fn loss_and_gradients_into(
        &self,
        x: &Mat<f64>,
        t: &Mat<f64>,
        l2: f64,
        dropout: Option<(&mut ChaCha8Rng, f64)>,
        grads: &mut Gradients,
    ) -> Result<f64> {
        let cache = self.forward_cached(x, dropout)?;
        let out = cache.output(self.layers.len());
        let data_loss = mse(out, t)?;
        let loss = data_loss + l2 * self.weight_norm_sq();
        let scale = 2.0 / (out.nrows() * out.ncols()) as f64;
        // gradient with respect to the current layer's post-dropout output
        let mut grad_out = out.clone();
        for j in 0..grad_out.ncols() {
            for (g, y) in grad_out.col_as_slice_mut(j).iter_mut().zip(t.col_as_slice(j)) {
                *g = scale * (*g - y);
            }
        }
        let n_layers = self.layers.len();
        for li in (0..n_layers).rev() {
            let layer = &self.layers[li];
            let a = &cache.activations[li + 1];
            let mask = &cache.masks[li + 1];
            let mut delta = grad_out;
            for j in 0..delta.ncols() {
                let act = a.col_as_slice(j);
                let d = delta.col_as_slice_mut(j);
                match mask {
                    Some(m) => {
                        for ((d, &a), &m) in d.iter_mut().zip(act).zip(m.col_as_slice(j)) {
                            *d *= m * layer.activation.slope(a);
                        }
                    }
                    None => {
                        for (d, &a) in d.iter_mut().zip(act) {
                            *d *= layer.activation.slope(a);
                        }
                    }
                }
            }
            let w_grad = &mut grads.weights[li];
            faer::linalg::matmul::matmul(
                w_grad.as_mut(),
                faer::Accum::Replace,
                &delta,
                cache.output(li).transpose(),
                1.0,
                faer::Par::Seq,
            );
            if l2 > 0.0 {
                for j in 0..w_grad.ncols() {
                    for (g, w) in w_grad.col_as_slice_mut(j).iter_mut().zip(layer.weights.col_as_slice(j)) {
                        *g += 2.0 * l2 * w;
                    }
                }
            }
            let bias_grad = &mut grads.bias[li];
            bias_grad.iter_mut().for_each(|b| *b = 0.0);
            for j in 0..delta.ncols() {
                for (b, d) in bias_grad.iter_mut().zip(delta.col_as_slice(j)) {
                    *b += d;
                }
            }
            grad_out = if li > 0 {
                layer.weights.transpose() * &delta
            } else {
                Mat::zeros(0, 0)
            };
        }
        Ok(loss)
    }
}

impl Gradients {
    pub fn zeros_like(net: &Mlp) -> Self {
        Self {
            weights: net
                .layers
                .iter()
                .map(|l| Mat::zeros(l.weights.nrows(), l.weights.ncols()))
                .collect(),
            bias: net.layers.iter().map(|l| vec![0.0; l.bias.len()]).collect(),
        }
    }
}

fn mse(out: &Mat<f64>, t: &Mat<f64>) -> Result<f64> {
    if out.nrows() != t.nrows() || out.ncols() != t.ncols() {
        return Err(Error::DimensionMismatch {
            context: "label shape",
            expected: out.nrows() * out.ncols(),
            actual: t.nrows() * t.ncols(),
        });
    }
    let mut s = 0.0;
    for j in 0..out.ncols() {
        for (o, y) in out.col_as_slice(j).iter().zip(t.col_as_slice(j)) {
            s += (o - y) * (o - y);
        }
    }
    Ok(s / (out.nrows() * out.ncols()) as f64)
}

/// First and second moment estimates for every parameter.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Gradients,
    v: Gradients,
    scratch: Gradients,
}

impl Adam {
    pub fn new(net: &Mlp) -> Self {
        let zeros = || Gradients::zeros_like(net);
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros(),
            v: zeros(),
            scratch: zeros(),
        }
    }

    fn apply(&mut self, net: &mut Mlp, lr: f64) {
        let g = &self.scratch;
        self.step += 1;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        let update = |p: &mut f64, g: f64, m: &mut f64, v: &mut f64| {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
        };
        for (li, layer) in net.layers.iter_mut().enumerate() {
            let (gw, mw, vw) = (&g.weights[li], &mut self.m.weights[li], &mut self.v.weights[li]);
            for j in 0..gw.ncols() {
                let params = layer.weights.col_as_slice_mut(j);
                let (m, v) = (mw.col_as_slice_mut(j), vw.col_as_slice_mut(j));
                for (((p, &g), m), v) in params.iter_mut().zip(gw.col_as_slice(j)).zip(m).zip(v) {
                    update(p, g, m, v);
                }
            }
            for i in 0..layer.bias.len() {
                update(
                    &mut layer.bias[i],
                    g.bias[li][i],
                    &mut self.m.bias[li][i],
                    &mut self.v.bias[li][i],
                );
            }
        }
    }
}

/// One optimizer step on a batch (columns are samples). Returns the pre-update loss.
pub fn train_step(
    net: &mut Mlp,
    opt: &mut Adam,
    x: &Mat<f64>,
    t: &Mat<f64>,
    spec: &MlpSpec,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    if x.ncols() == 0 {
        return Err(Error::InvalidParameter("empty batch".into()));
    }
    let dropout = (spec.retain < 1.0).then_some((rng, spec.retain));
    let loss = net.loss_and_gradients_into(x, t, spec.l2, dropout, &mut opt.scratch)?;
    if !loss.is_finite() {
        return Err(Error::TrainingDiverged { step: opt.step as usize });
    }
    opt.apply(net, spec.learning_rate);
    Ok(loss)
}

/// Paired inputs in `[0,1]^K` and labels in `[0,1]^N`.
#[derive(Debug, Clone, Default)]
pub struct TrainingSet {
    pub inputs: Vec<Vec<f64>>,
    pub labels: Vec<Vec<f64>>,
}

impl TrainingSet {
    pub fn push(&mut self, input: Vec<f64>, label: Vec<f64>) {
        self.inputs.push(input);
        self.labels.push(label);
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn validate(&self, spec: &MlpSpec) -> Result<()> {
        if self.inputs.len() != self.labels.len() {
            return Err(Error::DimensionMismatch {
                context: "training pairs",
                expected: self.inputs.len(),
                actual: self.labels.len(),
            });
        }
        for (x, y) in self.inputs.iter().zip(&self.labels) {
            if x.len() != spec.input_dim() || y.len() != spec.output_dim() {
                return Err(Error::DimensionMismatch {
                    context: "training sample width",
                    expected: spec.input_dim(),
                    actual: x.len(),
                });
            }
            if x.iter().chain(y).any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::InvalidParameter("training values must lie in [0, 1]".into()));
            }
        }
        Ok(())
    }

    fn batch(&self, idx: &[usize]) -> (Mat<f64>, Mat<f64>) {
        let k = self.inputs[0].len();
        let n = self.labels[0].len();
        (
            Mat::from_fn(k, idx.len(), |i, j| self.inputs[idx[j]][i]),
            Mat::from_fn(n, idx.len(), |i, j| self.labels[idx[j]][i]),
        )
    }
}

/// Trains one network; returns it with the mean loss of every epoch.
pub fn train_member(spec: &MlpSpec, set: &TrainingSet, member: u64) -> Result<(Mlp, Vec<f64>)> {
    spec.validate()?;
    set.validate(spec)?;
    if set.is_empty() {
        return Err(Error::InvalidParameter("empty training set".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(member);
    let mut net = Mlp::random(spec, &mut rng)?;
    let mut opt = Adam::new(&net);
    let mut order: Vec<usize> = (0..set.len()).collect();
    let mut history = Vec::with_capacity(spec.epochs);
    for _ in 0..spec.epochs {
        order.shuffle(&mut rng);
        let (mut total, mut count) = (0.0, 0usize);
        for chunk in order.chunks(spec.batch_size) {
            let (x, t) = set.batch(chunk);
            total += train_step(&mut net, &mut opt, &x, &t, spec, &mut rng)? * chunk.len() as f64;
            count += chunk.len();
        }
        history.push(total / count as f64);
    }
    Ok((net, history))
}

/// `D` networks fused by an element-wise median.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpEnsemble {
    pub spec: MlpSpec,
    pub members: Vec<Mlp>,
}

impl MlpEnsemble {
    pub fn train(spec: &MlpSpec, set: &TrainingSet, size: usize) -> Result<Self> {
        if size == 0 {
            return Err(Error::EmptyEnsemble);
        }
        let members = (0..size as u64)
            .map(|m| train_member(spec, set, m).map(|(net, _)| net))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            spec: spec.clone(),
            members,
        })
    }

    /// Element-wise median of the members' dropout-free outputs.
    pub fn predict_vec(&self, input: &[f64]) -> Result<Vec<f64>> {
        let x = Mat::from_fn(input.len(), 1, |i, _| input[i]);
        let outs = self.predict_batch(&x)?;
        Ok((0..outs.nrows()).map(|i| outs[(i, 0)]).collect())
    }

    /// Batched prediction; columns are samples.
    pub fn predict_batch(&self, x: &Mat<f64>) -> Result<Mat<f64>> {
        if self.members.is_empty() {
            return Err(Error::EmptyEnsemble);
        }
        let outs = self
            .members
            .iter()
            .map(|m| m.forward_batch(x))
            .collect::<Result<Vec<_>>>()?;
        if outs.len() == 1 {
            return Ok(outs.into_iter().next().expect("one member"));
        }
        let mut buf = vec![0.0; outs.len()];
        Ok(Mat::from_fn(outs[0].nrows(), outs[0].ncols(), |i, j| {
            for (b, o) in buf.iter_mut().zip(&outs) {
                *b = o[(i, j)];
            }
            median(&buf).expect("non-empty ensemble")
        }))
    }

    pub fn predict(&self, input: &[f64], width: usize, height: usize, timestamp_s: f64) -> Result<ImageFrame> {
        let values = self.predict_vec(input)?;
        if values.len() != width * height {
            return Err(Error::DimensionMismatch {
                context: "image size",
                expected: width * height,
                actual: values.len(),
            });
        }
        Ok(ImageFrame {
            width_vox: width,
            height_vox: height,
            values,
            timestamp_s,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let s = &self.spec;
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.push(CHECKPOINT_VERSION);
        out.extend_from_slice(&(self.members.len() as u32).to_le_bytes());
        out.extend_from_slice(&(s.dims.len() as u32).to_le_bytes());
        for &d in &s.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.extend(s.activations.iter().map(|a| a.code()));
        for v in [s.retain, s.l2, s.learning_rate] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&(s.batch_size as u32).to_le_bytes());
        out.extend_from_slice(&(s.epochs as u32).to_le_bytes());
        out.extend_from_slice(&s.seed.to_le_bytes());
        for m in &self.members {
            for l in &m.layers {
                for i in 0..l.weights.nrows() {
                    for j in 0..l.weights.ncols() {
                        out.extend_from_slice(&l.weights[(i, j)].to_le_bytes());
                    }
                }
                for b in &l.bias {
                    out.extend_from_slice(&b.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader { bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.take(1)?[0];
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let count = r.u32()? as usize;
        let n_dims = r.u32()? as usize;
        if !(2..=64).contains(&n_dims) {
            return Err(Error::Checkpoint(format!("implausible layer count {n_dims}")));
        }
        let dims = (0..n_dims).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let activations = r
            .take(n_dims - 1)?
            .iter()
            .map(|&c| Activation::from_code(c))
            .collect::<Result<Vec<_>>>()?;
        let spec = MlpSpec {
            dims,
            activations,
            retain: r.f64()?,
            l2: r.f64()?,
            learning_rate: r.f64()?,
            batch_size: r.u32()? as usize,
            epochs: r.u32()? as usize,
            seed: r.u64()?,
        };
        spec.validate()?;
        let per_member: usize = spec.layer_shapes().iter().map(|&(i, o)| (i + 1) * o).sum();
        if r.remaining() != count * per_member * 8 {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter bytes for dims {:?}, found {}",
                count * per_member * 8,
                spec.dims,
                r.remaining()
            )));
        }
        let mut members = Vec::with_capacity(count);
        for _ in 0..count {
            let mut net = Mlp::zeros(&spec)?;
            for l in &mut net.layers {
                for i in 0..l.weights.nrows() {
                    for j in 0..l.weights.ncols() {
                        l.weights[(i, j)] = r.f64()?;
                    }
                }
                for b in &mut l.bias {
                    *b = r.f64()?;
                }
            }
            members.push(net);
        }
        Ok(Self { spec, members })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    /// Loads a checkpoint and checks it against the expected input and output widths.
    pub fn load(path: &Path, k: usize, n: usize) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        let e = Self::from_bytes(&bytes)?;
        if e.spec.input_dim() != k || e.spec.output_dim() != n {
            return Err(Error::Checkpoint(format!(
                "model maps {} -> {}, deployment needs {k} -> {n}",
                e.spec.input_dim(),
                e.spec.output_dim()
            )));
        }
        Ok(e)
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        let s = self
            .bytes
            .get(self.pos..end)
            .ok_or_else(|| Error::Checkpoint("truncated checkpoint".into()))?;
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}

/// `min(y_k / max_rss, 1)` per tag.
pub fn normalize_input(y: &RssDifferenceVector, max_rss: f64) -> Result<Vec<f64>> {
    if !(max_rss > 0.0) {
        return Err(Error::InvalidParameter(format!("max_rss must be positive, got {max_rss}")));
    }
    Ok(y.values.iter().map(|&v| (v / max_rss).clamp(0.0, 1.0)).collect())
}

/// Filled ellipse label: 1 where `((u-cu)/a)² + ((v-cv)/b)² ≤ 1`, clipped to the grid.
pub fn rasterize_label(center: (f64, f64), semi: (f64, f64), width: usize, height: usize) -> Result<Vec<f64>> {
    let (cu, cv) = center;
    let (a, b) = semi;
    if !(a > 0.0 && b > 0.0) {
        return Err(Error::InvalidParameter("ellipse semi-axes must be positive".into()));
    }
    if !(cu >= 0.0 && cu <= (width as f64 - 1.0) && cv >= 0.0 && cv <= (height as f64 - 1.0)) {
        return Err(Error::CenterOutsideGrid {
            u: cu,
            v: cv,
            width,
            height,
        });
    }
    let mut out = vec![0.0; width * height];
    let u_lo = (cu - a).floor().max(0.0) as usize;
    let u_hi = ((cu + a).ceil() as usize).min(width - 1);
    let v_lo = (cv - b).floor().max(0.0) as usize;
    let v_hi = ((cv + b).ceil() as usize).min(height - 1);
    for v in v_lo..=v_hi {
        for u in u_lo..=u_hi {
            let du = (u as f64 - cu) / a;
            let dv = (v as f64 - cv) / b;
            if du * du + dv * dv <= 1.0 {
                out[v * width + u] = 1.0;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_spec() -> MlpSpec {
        MlpSpec {
            dims: vec![3, 4, 4, 3, 3, 3, 2],
            activations: STANDARD_ACTIVATIONS.to_vec(),
            retain: 1.0,
            l2: 0.01,
            learning_rate: 1e-3,
            batch_size: 5,
            epochs: 1,
            seed: 3,
        }
    }

    fn toy_batch(rng: &mut ChaCha8Rng, k: usize, n: usize, b: usize) -> (Mat<f64>, Mat<f64>) {
        (
            Mat::from_fn(k, b, |_, _| rng.gen_range(0.0..1.0)),
            Mat::from_fn(n, b, |_, _| rng.gen_range(0.0..1.0)),
        )
    }

    #[test]
    fn standard_dimensions() {
        let spec = MlpSpec::standard(116, crate::geometry::voxel_count(29, 4, 5, 5));
        assert_eq!(spec.dims, vec![116, 174, 348, 348, 232, 232, 2100]);
        assert_eq!(MlpSpec::standard(5, 10).dims[1], 8);
        let net = Mlp::random(&spec, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(net.dims(), spec.dims);
    }

    #[test]
    fn zero_network_outputs_half() {
        let net = Mlp::zeros(&toy_spec()).unwrap();
        let out = net.forward(&[0.3, 0.1, 0.9], false, 1.0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(out, vec![0.5, 0.5]);
        assert!(net.forward(&[0.3], false, 1.0, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn toy_forward_matches_hand_chain() {
        let spec = MlpSpec {
            dims: vec![3; 7],
            ..toy_spec()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let net = Mlp::random(&spec, &mut rng).unwrap();
        let input = [0.2, 0.7, 0.4];
        let mut a = input.to_vec();
        for l in &net.layers {
            a = (0..3)
                .map(|i| {
                    let z: f64 = (0..3).map(|j| l.weights[(i, j)] * a[j]).sum::<f64>() + l.bias[i];
                    match l.activation {
                        Activation::Relu => z.max(0.0),
                        Activation::Tanh => z.tanh(),
                        Activation::Sigmoid => 1.0 / (1.0 + (-z).exp()),
                    }
                })
                .collect();
        }
        let out = net.forward(&input, false, 1.0, &mut rng).unwrap();
        for (x, y) in out.iter().zip(&a) {
            assert!((x - y).abs() < 1e-12);
        }
        assert_eq!(net.forward(&input, false, 1.0, &mut rng).unwrap(), out);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let spec = toy_spec();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let net = Mlp::random(&spec, &mut rng).unwrap();
        let (x, t) = toy_batch(&mut rng, 3, 2, 5);
        let (_, g) = net.loss_and_gradients(&x, &t, spec.l2, None).unwrap();
        let eps = 1e-5;
        let mut worst = 0.0f64;
        let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(1e-7);
        for li in 0..net.layers.len() {
            let (rows, cols) = (net.layers[li].weights.nrows(), net.layers[li].weights.ncols());
            for i in 0..rows {
                for j in 0..cols {
                    let mut p = net.clone();
                    p.layers[li].weights[(i, j)] += eps;
                    let mut m = net.clone();
                    m.layers[li].weights[(i, j)] -= eps;
                    let num = (p.loss(&x, &t, spec.l2).unwrap() - m.loss(&x, &t, spec.l2).unwrap()) / (2.0 * eps);
                    worst = worst.max(rel(g.weights[li][(i, j)], num));
                }
                let mut p = net.clone();
                p.layers[li].bias[i] += eps;
                let mut m = net.clone();
                m.layers[li].bias[i] -= eps;
                let num = (p.loss(&x, &t, spec.l2).unwrap() - m.loss(&x, &t, spec.l2).unwrap()) / (2.0 * eps);
                worst = worst.max(rel(g.bias[li][i], num));
            }
        }
        assert!(worst < 1e-4, "max relative error {worst}");
    }

    #[test]
    fn perfect_fit_is_stationary() {
        let spec = MlpSpec { l2: 0.0, ..toy_spec() };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut net = Mlp::random(&spec, &mut rng).unwrap();
        let (x, _) = toy_batch(&mut rng, 3, 2, 5);
        let t = net.forward_batch(&x).unwrap();
        let before = net.clone();
        let mut opt = Adam::new(&net);
        let loss = train_step(&mut net, &mut opt, &x, &t, &spec, &mut rng).unwrap();
        assert_eq!(loss, 0.0);
        assert_eq!(net, before);
    }

    #[test]
    fn loss_decreases_over_every_window() {
        let spec = MlpSpec {
            dims: vec![4, 6, 12, 12, 8, 8, 5],
            l2: 1e-4,
            learning_rate: 3e-3,
            ..toy_spec()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut net = Mlp::random(&spec, &mut rng).unwrap();
        let (x, t) = toy_batch(&mut rng, 4, 5, 50);
        let mut opt = Adam::new(&net);
        let losses: Vec<f64> = (0..200)
            .map(|_| train_step(&mut net, &mut opt, &x, &t, &spec, &mut rng).unwrap())
            .collect();
        for w in losses.windows(21) {
            assert!(w[20] < w[0]);
        }
    }

    #[test]
    fn dropout_is_unbiased() {
        let spec = MlpSpec {
            dims: vec![3, 4, 4, 3, 3, 3, 2],
            retain: 0.7,
            ..toy_spec()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = Mlp::random(&spec, &mut rng).unwrap();
        // the first hidden layer's output is its activation times an independent mask
        let lin = net;
        let input = Mat::from_fn(3, 1, |i, _| [0.9, 0.4, 0.6][i]);
        let exact = lin.forward_cached(&input, None).unwrap();
        let hidden = exact.output(1);
        let mut mean = vec![0.0; hidden.nrows()];
        let trials = 10_000;
        for _ in 0..trials {
            let c = lin.forward_cached(&input, Some((&mut rng, 0.7))).unwrap();
            for (i, m) in mean.iter_mut().enumerate() {
                *m += c.output(1)[(i, 0)] / trials as f64;
            }
        }
        for (i, m) in mean.iter().enumerate() {
            let want = hidden[(i, 0)];
            assert!((m - want).abs() <= 0.02 * want.abs().max(1e-12), "unit {i}: {m} vs {want}");
        }
    }

    #[test]
    fn ensemble_median() {
        let spec = toy_spec();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = Mlp::random(&spec, &mut rng).unwrap();
        let b = Mlp::random(&spec, &mut rng).unwrap();
        // saturated output layer: every output is ~1.0
        let mut bad = Mlp::zeros(&spec).unwrap();
        bad.layers[5].bias = vec![50.0; 2];
        let input = [0.1, 0.5, 0.9];
        let one = MlpEnsemble {
            spec: spec.clone(),
            members: vec![a.clone()],
        };
        let fa = a.forward(&input, false, 1.0, &mut rng).unwrap();
        let fb = b.forward(&input, false, 1.0, &mut rng).unwrap();
        assert_eq!(one.predict_vec(&input).unwrap(), fa);
        let three = MlpEnsemble {
            spec: spec.clone(),
            members: vec![a.clone(), bad.clone(), b.clone()],
        };
        let p = three.predict_vec(&input).unwrap();
        for i in 0..2 {
            assert_eq!(p[i], fa[i].max(fb[i]));
        }
        let shuffled = MlpEnsemble {
            spec: spec.clone(),
            members: vec![b, a.clone(), bad],
        };
        assert_eq!(shuffled.predict_vec(&input).unwrap(), p);
        let same = MlpEnsemble {
            spec: spec.clone(),
            members: vec![a.clone(), a.clone(), a],
        };
        assert_eq!(same.predict_vec(&input).unwrap(), fa);
        let empty = MlpEnsemble { spec, members: vec![] };
        assert!(matches!(empty.predict_vec(&input), Err(Error::EmptyEnsemble)));
    }

    #[test]
    fn checkpoint_roundtrip() {
        let spec = toy_spec();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let e = MlpEnsemble {
            spec: spec.clone(),
            members: vec![Mlp::random(&spec, &mut rng).unwrap(), Mlp::random(&spec, &mut rng).unwrap()],
        };
        let bytes = e.to_bytes();
        assert_eq!(&bytes[..4], b"TSEE");
        assert_eq!(MlpEnsemble::from_bytes(&bytes).unwrap(), e);
        assert!(MlpEnsemble::from_bytes(&bytes[..bytes.len() - 8]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(MlpEnsemble::from_bytes(&bad).is_err());
        let dir = std::env::temp_dir().join(format!("tsee-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("m.bin");
        e.save(&path).unwrap();
        assert!(MlpEnsemble::load(&path, 3, 2).is_ok());
        assert!(matches!(MlpEnsemble::load(&path, 4, 2), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn normalize_input_examples() {
        let mut y = RssDifferenceVector::zeros(0, 3, 0.0);
        assert_eq!(normalize_input(&y, 30.0).unwrap(), vec![0.0; 3]);
        y.values = vec![15.0, 45.0, 3.0];
        assert_eq!(normalize_input(&y, 30.0).unwrap(), vec![0.5, 1.0, 0.1]);
        assert!(normalize_input(&y, 0.0).is_err());
    }

    #[test]
    fn rasterize_examples() {
        let one = rasterize_label((70.0, 7.0), (0.5, 0.5), 140, 15).unwrap();
        assert_eq!(one.iter().sum::<f64>(), 1.0);
        assert_eq!(one[7 * 140 + 70], 1.0);

        let (cu, cv, a, b) = (69.5, 7.0, 10.0, 7.0);
        let img = rasterize_label((cu, cv), (a, b), 140, 15).unwrap();
        let brute = (0..15)
            .flat_map(|v| (0..140).map(move |u| (u, v)))
            .filter(|&(u, v)| ((u as f64 - cu) / a).powi(2) + ((v as f64 - cv) / b).powi(2) <= 1.0)
            .count();
        assert_eq!(img.iter().sum::<f64>() as usize, brute);

        let edge = rasterize_label((0.0, 0.0), (12.0, 7.5), 140, 15).unwrap();
        assert_eq!(edge.len(), 2100);
        assert_eq!(edge[0], 1.0);
        assert!(matches!(
            rasterize_label((140.0, 7.0), (3.0, 3.0), 140, 15),
            Err(Error::CenterOutsideGrid { .. })
        ));
        assert!(rasterize_label((5.0, 5.0), (0.0, 1.0), 140, 15).is_err());
    }
}
