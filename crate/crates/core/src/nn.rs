//! Parameters, dense layers and the Adam optimizer.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autograd::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// The single random source of a run.
pub type Rng = rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Matrix>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Panics on a duplicate name.
    pub fn register(&mut self, name: impl Into<String>, value: Matrix) -> ParamId {
        let name = name.into();
        assert!(!self.names.contains(&name), "parameter {name} registered twice");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.values.len()).map(ParamId)
    }

    pub fn ids_with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = ParamId> + 'a {
        self.ids().filter(move |id| self.names[id.0].starts_with(prefix))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(Matrix::len).sum()
    }

    /// Copies values from `other` by name; every name must be present with
    /// the same shape.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        for (i, name) in self.names.iter().enumerate() {
            let src = other
                .find(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
            let src = other.get(src);
            if src.shape() != self.values[i].shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    src.shape(),
                    self.values[i].shape()
                )));
            }
            self.values[i] = src.clone();
        }
        Ok(())
    }

    /// Registers every parameter of the store as a tape leaf.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound {
            vars: self.values.iter().map(|v| tape.leaf(v.clone())).collect(),
        }
    }
}

/// Tape variables of a bound [`ParamStore`].
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    #[inline]
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Gradients aligned with the store's parameters.
    pub fn collect(&self, grads: &mut Gradients) -> Vec<Option<Matrix>> {
        self.vars.iter().map(|v| grads.take(*v)).collect()
    }
}

/// Forward-pass mode. Training draws dropout masks from the run RNG.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut Rng),
}

impl Mode<'_> {
    pub fn is_train(&self) -> bool {
        matches!(self, Mode::Train(_))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "slope")]
pub enum Activation {
    Identity,
    Gelu,
    Relu,
    LeakyRelu(f64),
    Sigmoid,
}

impl Activation {
    pub fn apply(self, tape: &mut Tape, x: Var) -> Var {
        match self {
            Activation::Identity => x,
            Activation::Gelu => tape.gelu(x),
            Activation::Relu => tape.relu(x),
            Activation::LeakyRelu(s) => tape.leaky_relu(x, s),
            Activation::Sigmoid => tape.sigmoid(x),
        }
    }
}

/// Uniform `U(-1/√fan_in, 1/√fan_in)` initialization.
pub fn uniform_fan_in(rng: &mut Rng, fan_in: usize, rows: usize, cols: usize) -> Matrix {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-bound..bound))
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, in_dim: usize, out_dim: usize, bias: bool) -> Self {
        let weight = store.register(format!("{name}.weight"), uniform_fan_in(rng, in_dim, in_dim, out_dim));
        let bias = bias.then(|| store.register(format!("{name}.bias"), uniform_fan_in(rng, in_dim, 1, out_dim)));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Var {
        let y = tape.matmul(x, p.var(self.weight));
        match self.bias {
            Some(b) => tape.add_row(y, p.var(b)),
            None => y,
        }
    }
}

/// A stack of dense layers with one hidden activation, an output
/// activation and inverted dropout after every hidden layer.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub hidden: Activation,
    pub output: Activation,
    pub dropout: f64,
}

impl Mlp {
    /// `dims` lists the widths from input to output, so `dims.len() - 1`
    /// layers are created.
    pub fn new(
        store: &mut ParamStore,
        rng: &mut Rng,
        name: &str,
        dims: &[usize],
        hidden: Activation,
        output: Activation,
        dropout: f64,
    ) -> Self {
        assert!(dims.len() >= 2, "an MLP needs at least one layer");
        assert!((0.0..1.0).contains(&dropout), "dropout must be in [0, 1)");
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(k, w)| Linear::new(store, rng, &format!("{name}.{k}"), w[0], w[1], true))
            .collect();
        Self {
            layers,
            hidden,
            output,
            dropout,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var, mode: &mut Mode<'_>) -> Var {
        let last = self.layers.len() - 1;
        let mut h = x;
        for (k, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, p, h);
            if k == last {
                h = self.output.apply(tape, h);
            } else {
                h = self.hidden.apply(tape, h);
                h = dropout(tape, h, self.dropout, mode);
            }
        }
        h
    }
}

/// Inverted dropout; identity in eval mode or when `rate == 0`.
pub fn dropout(tape: &mut Tape, x: Var, rate: f64, mode: &mut Mode<'_>) -> Var {
    let Mode::Train(rng) = mode else { return x };
    if rate <= 0.0 {
        return x;
    }
    let (r, c) = tape.value(x).shape();
    let keep = 1.0 / (1.0 - rate);
    let mask = Matrix::from_fn(r, c, |_, _| if rng.random::<f64>() < rate { 0.0 } else { keep });
    let m = tape.constant(mask);
    tape.mul(x, m)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// L2 coefficient added to the gradient.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-5,
        }
    }
}

/// Adam with per-parameter step counts, so disjoint parameter groups can be
/// stepped independently from one state.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub first: Vec<Matrix>,
    pub second: Vec<Matrix>,
    pub steps: Vec<u64>,
}

impl Adam {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        let zeros: Vec<Matrix> = store.iter().map(|(_, v)| Matrix::zeros(v.rows(), v.cols())).collect();
        Self {
            config,
            first: zeros.clone(),
            second: zeros,
            steps: vec![0; store.len()],
        }
    }

    /// Updates every parameter accepted by `select` that has a gradient.
    /// Returns the number of tensors updated.
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &[Option<Matrix>],
        select: impl Fn(ParamId) -> bool,
    ) -> usize {
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let mut updated = 0;
        for (k, grad) in grads.iter().enumerate() {
            let id = ParamId(k);
            let Some(grad) = grad else { continue };
            if !select(id) {
                continue;
            }
            self.steps[k] += 1;
            let t = self.steps[k] as i32;
            let c1 = 1.0 - beta1.powi(t);
            let c2 = 1.0 - beta2.powi(t);
            let theta = store.get_mut(id).as_mut_slice();
            let m = self.first[k].as_mut_slice();
            let v = self.second[k].as_mut_slice();
            for (((w, g), m), v) in theta.iter_mut().zip(grad.as_slice()).zip(m).zip(v) {
                let g = g + weight_decay * *w;
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                *w -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            }
            updated += 1;
        }
        updated
    }
}
