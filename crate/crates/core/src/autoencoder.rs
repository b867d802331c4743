//! Dense autoencoder with hand-written backpropagation and Adam.
//!
//! Models are generic over the float type: training runs at `f32`, the
//! finite-difference gradient check at `f64`. Loss for one sample is the
//! squared L2 reconstruction error summed over slots; batch loss is its
//! mean over the batch.

use std::fmt;
use std::fs;
use std::io;
use std::iter::Sum;
use std::path::Path;

use num_traits::Float;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const WEIGHT_MAGIC: &[u8; 4] = b"AEWT";
pub const WEIGHT_VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },
    #[error("input contains non-finite values")]
    NonFinite,
    #[error("empty dataset")]
    EmptyDataset,
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("bad weight file: {0}")]
    WeightFormat(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

fn mismatch(expected: impl fmt::Display, got: impl fmt::Display) -> ModelError {
    ModelError::ShapeMismatch { expected: expected.to_string(), got: got.to_string() }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Sigmoid,
}

impl Activation {
    fn code(self) -> u8 {
        match self {
            Activation::Relu => 0,
            Activation::Sigmoid => 1,
        }
    }

    fn from_code(c: u8) -> Option<Activation> {
        match c {
            0 => Some(Activation::Relu),
            1 => Some(Activation::Sigmoid),
            _ => None,
        }
    }

    fn apply<T: Float>(self, z: T) -> T {
        match self {
            Activation::Relu => z.max(T::zero()),
            Activation::Sigmoid => T::one() / (T::one() + (-z).exp()),
        }
    }

    /// Derivative expressed through the activation output `a`.
    fn derivative<T: Float>(self, a: T) -> T {
        match self {
            Activation::Relu => {
                if a > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Sigmoid => a * (T::one() - a),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub units: usize,
    pub activation: Activation,
}

/// Layer dimensions and activations.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub input: usize,
    pub layers: Vec<LayerSpec>,
}

impl Default for Architecture {
    /// 31 → 32 ReLU → 16 ReLU → 32 sigmoid → 31 sigmoid.
    fn default() -> Self {
        let l = |units, activation| LayerSpec { units, activation };
        Architecture {
            input: 31,
            layers: vec![
                l(32, Activation::Relu),
                l(16, Activation::Relu),
                l(32, Activation::Sigmoid),
                l(31, Activation::Sigmoid),
            ],
        }
    }
}

impl Architecture {
    /// Single-layer encoder with an 18-unit latent space.
    pub fn latent18() -> Architecture {
        Architecture {
            input: 31,
            layers: vec![
                LayerSpec { units: 18, activation: Activation::Relu },
                LayerSpec { units: 31, activation: Activation::Sigmoid },
            ],
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.input == 0 || self.layers.is_empty() || self.layers.iter().any(|l| l.units == 0) {
            return Err(ModelError::InvalidConfig(format!("degenerate architecture {self}")));
        }
        if self.layers.last().map(|l| l.units) != Some(self.input) {
            return Err(ModelError::InvalidConfig(format!("{self} does not reconstruct its input")));
        }
        if self.input > u16::MAX as usize || self.layers.iter().any(|l| l.units > u16::MAX as usize) {
            return Err(ModelError::InvalidConfig("layer wider than 65535".into()));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        let mut prev = self.input;
        for l in &self.layers {
            n += prev * l.units + l.units;
            prev = l.units;
        }
        n
    }

    /// Serialized weight-file size in bytes.
    pub fn payload_bytes(&self) -> usize {
        4 + 2 + 2 + self.to_string().len() + 2 + 9 * self.layers.len() + 4 + 4 + 4 * self.param_count()
    }
}

impl fmt::Display for Architecture {
    /// Tag such as `31-32r-16r-32s-31s`.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.input)?;
        for l in &self.layers {
            let a = match l.activation {
                Activation::Relu => 'r',
                Activation::Sigmoid => 's',
            };
            write!(f, "-{}{}", l.units, a)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer<T> {
    pub inputs: usize,
    pub outputs: usize,
    pub activation: Activation,
    /// `outputs × inputs`, row-major.
    pub weights: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Float> Layer<T> {
    fn zeros(inputs: usize, outputs: usize, activation: Activation) -> Layer<T> {
        Layer {
            inputs,
            outputs,
            activation,
            weights: vec![T::zero(); inputs * outputs],
            bias: vec![T::zero(); outputs],
        }
    }

    fn forward(&self, x: &[T]) -> Vec<T> {
        (0..self.outputs)
            .map(|o| {
                let row = &self.weights[o * self.inputs..(o + 1) * self.inputs];
                let z = row.iter().zip(x).fold(self.bias[o], |acc, (w, xi)| acc + *w * *xi);
                self.activation.apply(z)
            })
            .collect()
    }
}

/// Layer stack. Also used, with the same shape, to hold gradients and
/// federated sums.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights<T = f32> {
    layers: Vec<Layer<T>>,
}

/// Per-layer outputs of a forward pass, input first.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardCache<T> {
    pub activations: Vec<Vec<T>>,
}

impl<T: Copy> ForwardCache<T> {
    pub fn output(&self) -> &[T] {
        self.activations.last().expect("cache holds the input at least")
    }

    pub fn latent(&self, layer: usize) -> &[T] {
        &self.activations[layer + 1]
    }
}

impl<T: Float + Sum> ModelWeights<T> {
    pub fn from_layers(layers: Vec<Layer<T>>) -> Result<ModelWeights<T>, ModelError> {
        let m = ModelWeights { layers };
        m.arch().validate()?;
        for (i, l) in m.layers.iter().enumerate() {
            if l.weights.len() != l.inputs * l.outputs || l.bias.len() != l.outputs {
                return Err(mismatch(format!("layer {i} of {}x{}", l.outputs, l.inputs), "wrong buffer length"));
            }
            if i > 0 && m.layers[i - 1].outputs != l.inputs {
                return Err(mismatch(m.layers[i - 1].outputs, l.inputs));
            }
        }
        Ok(m)
    }

    pub fn zeros(arch: &Architecture) -> ModelWeights<T> {
        let mut prev = arch.input;
        let layers = arch
            .layers
            .iter()
            .map(|l| {
                let layer = Layer::zeros(prev, l.units, l.activation);
                prev = l.units;
                layer
            })
            .collect();
        ModelWeights { layers }
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init(arch: &Architecture, seed: u64) -> ModelWeights<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = Self::zeros(arch);
        for l in &mut m.layers {
            let limit = (6.0 / (l.inputs + l.outputs) as f64).sqrt();
            for w in &mut l.weights {
                *w = T::from(rng.random_range(-limit..limit)).expect("float cast");
            }
        }
        m
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer<T>] {
        &mut self.layers
    }

    pub fn arch(&self) -> Architecture {
        Architecture {
            input: self.layers.first().map_or(0, |l| l.inputs),
            layers: self.layers.iter().map(|l| LayerSpec { units: l.outputs, activation: l.activation }).collect(),
        }
    }

    pub fn tag(&self) -> String {
        self.arch().to_string()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    /// Parameters in canonical order: per layer, weights then bias.
    pub fn params(&self) -> impl Iterator<Item = &T> + '_ {
        self.layers.iter().flat_map(|l| l.weights.iter().chain(l.bias.iter()))
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut T> + '_ {
        self.layers.iter_mut().flat_map(|l| l.weights.iter_mut().chain(l.bias.iter_mut()))
    }

    pub fn is_finite(&self) -> bool {
        self.params().all(|p| p.is_finite())
    }

    pub fn same_shape<U>(&self, other: &ModelWeights<U>) -> bool {
        self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.inputs == b.inputs && a.outputs == b.outputs && a.activation == b.activation)
    }

    pub fn cast<U: Float + Sum>(&self) -> ModelWeights<U> {
        let conv = |v: &Vec<T>| v.iter().map(|x| U::from(*x).expect("float cast")).collect();
        ModelWeights {
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    inputs: l.inputs,
                    outputs: l.outputs,
                    activation: l.activation,
                    weights: conv(&l.weights),
                    bias: conv(&l.bias),
                })
                .collect(),
        }
    }

    fn check_input(&self, x: &[T]) -> Result<(), ModelError> {
        if x.len() != self.input_dim() {
            return Err(mismatch(format!("input of {}", self.input_dim()), x.len()));
        }
        if !x.iter().all(|v| v.is_finite()) {
            return Err(ModelError::NonFinite);
        }
        Ok(())
    }

    pub fn forward(&self, x: &[T]) -> Result<ForwardCache<T>, ModelError> {
        self.check_input(x)?;
        Ok(self.forward_unchecked(x))
    }

    fn forward_unchecked(&self, x: &[T]) -> ForwardCache<T> {
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(x.to_vec());
        for l in &self.layers {
            let next = l.forward(activations.last().expect("nonempty"));
            activations.push(next);
        }
        ForwardCache { activations }
    }

    pub fn reconstruct(&self, x: &[T]) -> Result<Vec<T>, ModelError> {
        Ok(self.forward(x)?.activations.pop().expect("nonempty"))
    }

    /// `‖x − x̂‖²` for one sample.
    pub fn sample_loss(&self, x: &[T]) -> Result<T, ModelError> {
        let cache = self.forward(x)?;
        Ok(squared_error(x, cache.output()))
    }

    /// Mean of [`sample_loss`](Self::sample_loss) over the batch.
    pub fn loss<V: AsRef<[T]>>(&self, batch: &[V]) -> Result<T, ModelError> {
        if batch.is_empty() {
            return Err(ModelError::EmptyDataset);
        }
        let mut total = T::zero();
        for x in batch {
            total = total + self.sample_loss(x.as_ref())?;
        }
        Ok(total / T::from(batch.len()).expect("float cast"))
    }

    /// Batch loss and its gradient with respect to every parameter.
    pub fn gradients<V: AsRef<[T]>>(&self, batch: &[V]) -> Result<(T, ModelWeights<T>), ModelError> {
        if batch.is_empty() {
            return Err(ModelError::EmptyDataset);
        }
        for x in batch {
            self.check_input(x.as_ref())?;
        }
        let mut grads = Self::zeros(&self.arch());
        let scale = T::from(2.0 / batch.len() as f64).expect("float cast");
        let mut total = T::zero();
        for x in batch {
            let x = x.as_ref();
            let cache = self.forward_unchecked(x);
            total = total + squared_error(x, cache.output());
            let mut upstream: Vec<T> = cache.output().iter().zip(x).map(|(o, t)| scale * (*o - *t)).collect();
            self.backward(&cache, &mut upstream, &mut grads);
        }
        Ok((total / T::from(batch.len()).expect("float cast"), grads))
    }

    /// Accumulates the gradient of one sample into `grads`, given
    /// `dL/d(output)` in `upstream`.
    pub fn backward(&self, cache: &ForwardCache<T>, upstream: &mut Vec<T>, grads: &mut ModelWeights<T>) {
        for (li, l) in self.layers.iter().enumerate().rev() {
            let input = &cache.activations[li];
            let output = &cache.activations[li + 1];
            let delta: Vec<T> = upstream.iter().zip(output).map(|(g, a)| *g * l.activation.derivative(*a)).collect();
            let g = &mut grads.layers[li];
            for (o, d) in delta.iter().enumerate() {
                g.bias[o] = g.bias[o] + *d;
                let row = &mut g.weights[o * l.inputs..(o + 1) * l.inputs];
                for (gw, xi) in row.iter_mut().zip(input) {
                    *gw = *gw + *d * *xi;
                }
            }
            if li > 0 {
                let mut down = vec![T::zero(); l.inputs];
                for (o, d) in delta.iter().enumerate() {
                    let row = &l.weights[o * l.inputs..(o + 1) * l.inputs];
                    for (acc, w) in down.iter_mut().zip(row) {
                        *acc = *acc + *d * *w;
                    }
                }
                *upstream = down;
            }
        }
    }
}

fn squared_error<T: Float>(x: &[T], y: &[T]) -> T {
    x.iter().zip(y).fold(T::zero(), |acc, (a, b)| acc + (*a - *b) * (*a - *b))
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelError> {
        let end = self.at.checked_add(n).filter(|e| *e <= self.bytes.len());
        let end = end.ok_or_else(|| ModelError::WeightFormat(format!("truncated at byte {}", self.at)))?;
        let out = &self.bytes[self.at..end];
        self.at = end;
        Ok(out)
    }

    fn u16(&mut self) -> Result<u16, ModelError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32, ModelError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

impl ModelWeights<f32> {
    /// Weight file: magic, version, architecture tag, per-layer dims and
    /// activation, parameter count, CRC-32 of the parameter bytes, then
    /// every parameter as little-endian `f32` in canonical order.
    pub fn to_bytes(&self) -> Vec<u8> {
        let arch = self.arch();
        let tag = arch.to_string();
        let mut out = Vec::with_capacity(arch.payload_bytes());
        out.extend_from_slice(WEIGHT_MAGIC);
        out.extend_from_slice(&WEIGHT_VERSION.to_le_bytes());
        out.extend_from_slice(&(tag.len() as u16).to_le_bytes());
        out.extend_from_slice(tag.as_bytes());
        out.extend_from_slice(&(self.layers.len() as u16).to_le_bytes());
        for l in &self.layers {
            out.extend_from_slice(&(l.inputs as u32).to_le_bytes());
            out.extend_from_slice(&(l.outputs as u32).to_le_bytes());
            out.push(l.activation.code());
        }
        let body: Vec<u8> = self.params().flat_map(|p| p.to_le_bytes()).collect();
        out.extend_from_slice(&(self.param_count() as u32).to_le_bytes());
        out.extend_from_slice(&crc32fast::hash(&body).to_le_bytes());
        out.extend_from_slice(&body);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<ModelWeights<f32>, ModelError> {
        let mut r = Reader { bytes, at: 0 };
        if r.take(4)? != WEIGHT_MAGIC {
            return Err(ModelError::WeightFormat("missing magic".into()));
        }
        let version = r.u16()?;
        if version != WEIGHT_VERSION {
            return Err(ModelError::WeightFormat(format!("unsupported version {version}")));
        }
        let tag_len = r.u16()? as usize;
        let tag = String::from_utf8(r.take(tag_len)?.to_vec())
            .map_err(|_| ModelError::WeightFormat("architecture tag is not utf-8".into()))?;
        let count = r.u16()? as usize;
        let mut layers = Vec::with_capacity(count.min(64));
        for _ in 0..count {
            let inputs = r.u32()? as usize;
            let outputs = r.u32()? as usize;
            let act = Activation::from_code(r.take(1)?[0])
                .ok_or_else(|| ModelError::WeightFormat("unknown activation".into()))?;
            if inputs > u16::MAX as usize || outputs > u16::MAX as usize {
                return Err(ModelError::WeightFormat("layer too wide".into()));
            }
            layers.push(Layer::<f32>::zeros(inputs, outputs, act));
        }
        let mut m = ModelWeights { layers };
        if m.tag() != tag {
            return Err(ModelError::WeightFormat(format!("tag {tag} does not match layers {}", m.tag())));
        }
        let params = r.u32()? as usize;
        let crc = r.u32()?;
        if params != m.param_count() {
            return Err(ModelError::WeightFormat(format!("{params} parameters declared for {tag}")));
        }
        let body = r.take(4 * params)?;
        if r.at != bytes.len() {
            return Err(ModelError::WeightFormat("trailing bytes".into()));
        }
        if crc32fast::hash(body) != crc {
            return Err(ModelError::WeightFormat("checksum mismatch".into()));
        }
        for (p, chunk) in m.params_mut().zip(body.chunks_exact(4)) {
            *p = f32::from_le_bytes(chunk.try_into().expect("4-byte chunk"));
        }
        if !m.is_finite() {
            return Err(ModelError::WeightFormat("non-finite parameter".into()));
        }
        ModelWeights::from_layers(m.layers)
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<ModelWeights<f32>, ModelError> {
        Self::from_bytes(&fs::read(path)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam: AdamConfig,
    pub seed: u64,
    pub shuffle: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 32,
            learning_rate: 1e-3,
            adam: AdamConfig::default(),
            seed: 0,
            shuffle: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.epochs == 0 {
            return Err(ModelError::InvalidConfig("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(ModelError::InvalidConfig("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(ModelError::InvalidConfig("learning_rate must be positive".into()));
        }
        let a = &self.adam;
        if !((0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.epsilon > 0.0) {
            return Err(ModelError::InvalidConfig("adam betas must lie in [0, 1) and epsilon be positive".into()));
        }
        Ok(())
    }
}

/// First and second moments per parameter, in canonical parameter order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T = f32> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub t: u64,
}

impl<T: Float + Sum> AdamState<T> {
    pub fn new(model: &ModelWeights<T>) -> AdamState<T> {
        let n = model.param_count();
        AdamState { m: vec![T::zero(); n], v: vec![T::zero(); n], t: 0 }
    }
}

/// One bias-corrected Adam update in place.
pub fn adam_step<T: Float + Sum>(
    weights: &mut ModelWeights<T>,
    grads: &ModelWeights<T>,
    state: &mut AdamState<T>,
    learning_rate: f64,
    cfg: &AdamConfig,
) -> Result<(), ModelError> {
    if !weights.same_shape(grads) || state.m.len() != weights.param_count() {
        return Err(mismatch(weights.tag(), grads.tag()));
    }
    state.t += 1;
    let f = |x: f64| T::from(x).expect("float cast");
    let (b1, b2) = (f(cfg.beta1), f(cfg.beta2));
    let c1 = f(1.0 - cfg.beta1.powi(state.t as i32));
    let c2 = f(1.0 - cfg.beta2.powi(state.t as i32));
    let (lr, eps) = (f(learning_rate), f(cfg.epsilon));
    for (i, (w, g)) in weights.params_mut().zip(grads.params()).enumerate() {
        let m = b1 * state.m[i] + (T::one() - b1) * *g;
        let v = b2 * state.v[i] + (T::one() - b2) * *g * *g;
        state.m[i] = m;
        state.v[i] = v;
        *w = *w - lr * (m / c1) / ((v / c2).sqrt() + eps);
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// Training-set loss before the first update.
    pub initial_loss: f64,
    /// Mean batch loss per epoch, measured during the epoch.
    pub epoch_losses: Vec<f64>,
}

impl TrainReport {
    pub fn final_loss(&self) -> f64 {
        self.epoch_losses.last().copied().unwrap_or(self.initial_loss)
    }
}

/// A model plus the optimizer state that survives between fits.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub weights: ModelWeights<f32>,
    pub state: AdamState<f32>,
    pub cfg: TrainConfig,
}

impl Trainer {
    pub fn new(weights: ModelWeights<f32>, cfg: TrainConfig) -> Result<Trainer, ModelError> {
        cfg.validate()?;
        let state = AdamState::new(&weights);
        Ok(Trainer { weights, state, cfg })
    }

    /// Replaces the weights, keeping the optimizer moments.
    pub fn load_weights(&mut self, weights: ModelWeights<f32>) -> Result<(), ModelError> {
        if !self.weights.same_shape(&weights) {
            return Err(mismatch(self.weights.tag(), weights.tag()));
        }
        self.weights = weights;
        Ok(())
    }

    /// Runs `cfg.epochs` epochs over `data`, shuffling with `seed`.
    pub fn fit<V: AsRef<[f32]>>(&mut self, data: &[V], seed: u64) -> Result<TrainReport, ModelError> {
        if data.is_empty() {
            return Err(ModelError::EmptyDataset);
        }
        let initial_loss = self.weights.loss(data)? as f64;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut epoch_losses = Vec::with_capacity(self.cfg.epochs);
        for _ in 0..self.cfg.epochs {
            if self.cfg.shuffle {
                order.shuffle(&mut rng);
            }
            let mut sum = 0.0;
            for chunk in order.chunks(self.cfg.batch_size) {
                let batch: Vec<&[f32]> = chunk.iter().map(|i| data[*i].as_ref()).collect();
                let (loss, grads) = self.weights.gradients(&batch)?;
                sum += loss as f64 * batch.len() as f64;
                adam_step(&mut self.weights, &grads, &mut self.state, self.cfg.learning_rate, &self.cfg.adam)?;
            }
            epoch_losses.push(sum / data.len() as f64);
        }
        Ok(TrainReport { initial_loss, epoch_losses })
    }
}

/// Trains a copy of `w0` with fresh optimizer state.
pub fn train<V: AsRef<[f32]>>(
    w0: &ModelWeights<f32>,
    data: &[V],
    cfg: &TrainConfig,
) -> Result<(ModelWeights<f32>, TrainReport), ModelError> {
    let mut t = Trainer::new(w0.clone(), cfg.clone())?;
    let report = t.fit(data, cfg.seed)?;
    Ok((t.weights, report))
}

/// Largest relative error between analytic gradients and central finite
/// differences with step `h`. Relative error uses
/// `|a - n| / max(|a|, |n|, floor)` so near-zero gradients do not blow up.
pub fn gradient_check(model: &ModelWeights<f64>, batch: &[Vec<f64>], h: f64, floor: f64) -> Result<f64, ModelError> {
    let (_, analytic) = model.gradients(batch)?;
    let mut probe = model.clone();
    let mut worst: f64 = 0.0;
    let n = model.param_count();
    for (i, a) in analytic.params().copied().enumerate().take(n) {
        let orig = *model.params().nth(i).expect("index in range");
        *probe.params_mut().nth(i).expect("index in range") = orig + h;
        let up = probe.loss(batch)?;
        *probe.params_mut().nth(i).expect("index in range") = orig - h;
        let down = probe.loss(batch)?;
        *probe.params_mut().nth(i).expect("index in range") = orig;
        let numeric = (up - down) / (2.0 * h);
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
        worst = worst.max(rel);
    }
    Ok(worst)
}
