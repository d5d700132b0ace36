//! Index-prediction network: a small MLP applied row-wise, so every arm shares
//! the same parameters. Input rows are one-hot arm identity concatenated with
//! one-hot current state; output rows are the per-action indices.

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{RmabInstance, StateVector};
use crate::textfmt::Document;

/// `N x (N + S)` rows `onehot(n) ++ onehot(s_n)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureEncoding(pub Array2<f64>);

pub fn encode(inst: &RmabInstance, s: &StateVector) -> Result<FeatureEncoding> {
    inst.check_states(s)?;
    let (n, n_states) = (inst.n_arms(), inst.n_states());
    let mut x = Array2::zeros((n, n + n_states));
    for (arm, &state) in s.0.iter().enumerate() {
        x[[arm, arm]] = 1.0;
        x[[arm, n + state]] = 1.0;
    }
    Ok(FeatureEncoding(x))
}

/// Replaces the arm one-hot block with caller-supplied per-arm features.
pub fn encode_with_features(features: ArrayView2<'_, f64>, s: &StateVector, n_states: usize) -> Result<FeatureEncoding> {
    let (n, width) = features.dim();
    if s.len() != n {
        return Err(Error::Shape(format!("{} states for {n} feature rows", s.len())));
    }
    let mut x = Array2::zeros((n, width + n_states));
    for (arm, &state) in s.0.iter().enumerate() {
        if state >= n_states {
            return Err(Error::InvalidArgument(format!("state {state} out of range")));
        }
        x.row_mut(arm).slice_mut(ndarray::s![..width]).assign(&features.row(arm));
        x[[arm, width + state]] = 1.0;
    }
    Ok(FeatureEncoding(x))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Softplus,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Softplus => {
                if z > 30.0 {
                    z
                } else {
                    z.exp().ln_1p()
                }
            }
        }
    }

    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
            Activation::Softplus => 1.0 / (1.0 + (-z).exp()),
        }
    }

    fn name(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Softplus => "softplus",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "tanh" => Ok(Activation::Tanh),
            "softplus" => Ok(Activation::Softplus),
            other => Err(Error::Parse(format!("unknown activation `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NetConfig {
    pub input_width: usize,
    pub hidden: usize,
    pub n_actions: usize,
    pub activation: Activation,
    /// Heavy-ball momentum; 0 means plain gradient descent.
    pub momentum: f64,
    pub seed: u64,
}

impl NetConfig {
    /// Default architecture for an instance with one-hot arm features.
    pub fn for_instance(inst: &RmabInstance, seed: u64) -> Self {
        Self {
            input_width: inst.n_arms() + inst.n_states(),
            hidden: 64,
            n_actions: inst.n_actions(),
            activation: Activation::Tanh,
            momentum: 0.0,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Layer {
    weight: Array2<f64>,
    bias: Array1<f64>,
}

impl Layer {
    fn zeros(out: usize, inp: usize) -> Self {
        Self { weight: Array2::zeros((out, inp)), bias: Array1::zeros(out) }
    }

    fn uniform<R: Rng>(out: usize, inp: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (inp as f64).sqrt();
        Self {
            weight: Array2::from_shape_fn((out, inp), |_| rng.random_range(-bound..bound)),
            bias: Array1::zeros(out),
        }
    }

    fn params(&self) -> impl Iterator<Item = &f64> {
        self.weight.iter().chain(self.bias.iter())
    }

    fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.weight.iter_mut().chain(self.bias.iter_mut())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IndexNetwork {
    pub config: NetConfig,
    layers: [Layer; 3],
    grads: [Layer; 3],
    velocity: [Layer; 3],
    /// Bumped on every parameter change so stale tapes can be detected.
    version: u64,
}

/// Activations kept by [`IndexNetwork::forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardTape {
    version: u64,
    input: Array2<f64>,
    pre: [Array2<f64>; 2],
    post: [Array2<f64>; 2],
}

impl IndexNetwork {
    pub fn new(config: NetConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (d, h, a) = (config.input_width, config.hidden, config.n_actions);
        let layers = [Layer::uniform(h, d, &mut rng), Layer::uniform(h, h, &mut rng), Layer::uniform(a, h, &mut rng)];
        let zeros = || [Layer::zeros(h, d), Layer::zeros(h, h), Layer::zeros(a, h)];
        Self { config, layers, grads: zeros(), velocity: zeros(), version: 0 }
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    pub fn parameters(&self) -> Vec<f64> {
        self.layers.iter().flat_map(|l| l.params().copied()).collect()
    }

    pub fn set_parameters(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.parameter_count() {
            return Err(Error::Shape(format!("{} values for {} parameters", values.len(), self.parameter_count())));
        }
        for (p, v) in self.layers.iter_mut().flat_map(|l| l.params_mut()).zip(values) {
            *p = *v;
        }
        self.version += 1;
        Ok(())
    }

    pub fn gradients(&self) -> Vec<f64> {
        self.grads.iter().flat_map(|l| l.params().copied()).collect()
    }

    pub fn zero_grad(&mut self) {
        for g in self.grads.iter_mut() {
            g.params_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Replaces the final linear layer.
    pub fn set_output_layer(&mut self, weight: Array2<f64>, bias: Array1<f64>) -> Result<()> {
        if weight.dim() != self.layers[2].weight.dim() || bias.len() != self.layers[2].bias.len() {
            return Err(Error::Shape("output layer shape mismatch".into()));
        }
        self.layers[2] = Layer { weight, bias };
        self.version += 1;
        Ok(())
    }

    /// Index matrix `N x A` plus the tape needed by [`IndexNetwork::backward`].
    pub fn forward(&self, feats: &FeatureEncoding) -> Result<(Array2<f64>, ForwardTape)> {
        let x = &feats.0;
        if x.ncols() != self.config.input_width {
            return Err(Error::Shape(format!(
                "feature width {} but network expects {}",
                x.ncols(),
                self.config.input_width
            )));
        }
        let act = self.config.activation;
        let z1 = x.dot(&self.layers[0].weight.t()) + &self.layers[0].bias;
        let h1 = z1.mapv(|z| act.apply(z));
        let z2 = h1.dot(&self.layers[1].weight.t()) + &self.layers[1].bias;
        let h2 = z2.mapv(|z| act.apply(z));
        let out = h2.dot(&self.layers[2].weight.t()) + &self.layers[2].bias;
        let tape = ForwardTape { version: self.version, input: x.clone(), pre: [z1, z2], post: [h1, h2] };
        Ok((out, tape))
    }

    /// Accumulates `dL/dtheta` for the given `dL/dIndex`.
    pub fn backward(&mut self, tape: &ForwardTape, d_index: ArrayView2<'_, f64>) -> Result<()> {
        if tape.version != self.version {
            return Err(Error::InvalidArgument("stale forward tape: parameters changed since forward".into()));
        }
        if d_index.dim() != (tape.input.nrows(), self.config.n_actions) {
            return Err(Error::Shape(format!("upstream gradient has shape {:?}", d_index.dim())));
        }
        let act = self.config.activation;
        let inputs = [&tape.input, &tape.post[0], &tape.post[1]];
        let mut delta = d_index.to_owned();
        for layer in (0..3).rev() {
            self.grads[layer].weight += &delta.t().dot(inputs[layer]);
            self.grads[layer].bias += &delta.sum_axis(Axis(0));
            if layer > 0 {
                let mut back = delta.dot(&self.layers[layer].weight);
                back.zip_mut_with(&tape.pre[layer - 1], |d, &z| *d *= act.derivative(z));
                delta = back;
            }
        }
        Ok(())
    }

    /// `theta -= lr * grad` (or the momentum update), then clears gradients.
    pub fn sgd_step(&mut self, learning_rate: f64) -> Result<()> {
        if self.grads.iter().any(|g| g.params().any(|v| !v.is_finite())) {
            return Err(Error::NonFinite("parameter gradient".into()));
        }
        let mu = self.config.momentum;
        for ((layer, grad), vel) in self.layers.iter_mut().zip(&self.grads).zip(self.velocity.iter_mut()) {
            for ((p, g), v) in layer.params_mut().zip(grad.params()).zip(vel.params_mut()) {
                let step = if mu > 0.0 {
                    *v = mu * *v + g;
                    *v
                } else {
                    *g
                };
                *p -= learning_rate * step;
            }
        }
        self.zero_grad();
        self.version += 1;
        Ok(())
    }

    pub fn to_document(&self) -> Document {
        let c = &self.config;
        let mut doc = Document::new();
        doc.set("kind", "index_network");
        doc.set_int("input_width", c.input_width as u64);
        doc.set_int("hidden", c.hidden as u64);
        doc.set_int("n_actions", c.n_actions as u64);
        doc.set("activation", c.activation.name());
        doc.set_real("momentum", c.momentum);
        doc.set_int("init_seed", c.seed);
        doc.set_reals("parameters", self.parameters().iter());
        if c.momentum > 0.0 {
            let v: Vec<f64> = self.velocity.iter().flat_map(|l| l.params().copied()).collect();
            doc.set_reals("velocity", v.iter());
        }
        doc
    }

    pub fn from_document(doc: &Document) -> Result<Self> {
        doc.expect_kind("index_network")?;
        let config = NetConfig {
            input_width: doc.get("input_width")?,
            hidden: doc.get("hidden")?,
            n_actions: doc.get("n_actions")?,
            activation: Activation::parse(doc.raw("activation")?.trim())?,
            momentum: doc.get("momentum")?,
            seed: doc.get("init_seed")?,
        };
        let mut net = IndexNetwork::new(config);
        net.set_parameters(&doc.get_list::<f64>("parameters")?)?;
        if doc.contains("velocity") {
            let v: Vec<f64> = doc.get_list("velocity")?;
            if v.len() != net.parameter_count() {
                return Err(Error::Shape("velocity length mismatch".into()));
            }
            for (p, x) in net.velocity.iter_mut().flat_map(|l| l.params_mut()).zip(v) {
                *p = x;
            }
        }
        net.version = 0;
        Ok(net)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_document().write(path, "index network checkpoint")
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_document(&Document::read(path)?)
    }
}
