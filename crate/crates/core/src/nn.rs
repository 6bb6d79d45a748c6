//! Layers built from tape primitives: linear maps, MLPs, activations,
//! softmax and layer normalization, plus the named parameter store every
//! model registers its weights in.

use std::ops::Index;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prng::Prng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const LAYERNORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Named, ordered collection of trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    /// Total scalar count over all parameters.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Records every parameter as a leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound {
            vars: self.tensors.iter().map(|t| tape.leaf(t.clone())).collect(),
        }
    }

    /// Records every parameter as a constant (evaluation without gradients).
    pub fn bind_frozen(&self, tape: &mut Tape) -> Bound {
        Bound {
            vars: self.tensors.iter().map(|t| tape.constant(t.clone())).collect(),
        }
    }
}

/// Tape handles for the parameters of one [`ParamStore`], by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}

impl Bound {
    /// Handles in store order, e.g. leaves created by a gradient checker.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Gradients aligned with the store; parameters the loss did not touch
    /// get zeros.
    pub fn grads(&self, tape: &Tape) -> Vec<Tensor> {
        self.vars
            .iter()
            .map(|&v| tape.grad(v).unwrap_or_else(|| Tensor::zeros(tape.shape(v).to_vec())))
            .collect()
    }
}

/// How sine-activation weights are initialized.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SineBound {
    /// `±sqrt(6 / fan_in)`
    #[default]
    Standard,
    /// `±sqrt(fan_in)`, as literally printed in some descriptions of
    /// periodic-activation networks. Diverges quickly for wide layers.
    Literal,
    Fixed(f64),
}

impl SineBound {
    pub fn bound(self, fan_in: usize) -> f64 {
        let f = fan_in.max(1) as f64;
        match self {
            SineBound::Standard => (6.0 / f).sqrt(),
            SineBound::Literal => f.sqrt(),
            SineBound::Fixed(b) => b,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolynomialActivation {
    /// `coeffs[k]` multiplies `x^k`.
    pub coeffs: Vec<f64>,
}

impl PolynomialActivation {
    pub fn new(coeffs: Vec<f64>) -> Result<Self> {
        if coeffs.len() < 2 {
            return Err(Error::invalid("polynomial activation needs order K >= 1"));
        }
        Ok(Self { coeffs })
    }

    pub fn order(&self) -> usize {
        self.coeffs.len() - 1
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    #[default]
    Relu,
    Sine {
        #[serde(default)]
        init: SineBound,
    },
    Polynomial(PolynomialActivation),
}

impl Activation {
    pub fn apply(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        match self {
            Activation::Relu => tape.relu(x),
            Activation::Sine { .. } => tape.sin(x),
            Activation::Polynomial(p) => tape.poly(x, &p.coeffs),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LinearLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl LinearLayer {
    /// Weights uniform on `±sqrt(1/fan_in)`, zero bias.
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, rng: &mut Prng) -> Self {
        let b = (1.0 / in_dim.max(1) as f64).sqrt();
        let w = Tensor::from_fn(vec![out_dim, in_dim], |_| rng.uniform_in(-b, b));
        let weight = store.add(format!("{name}.weight"), w);
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(vec![out_dim]));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    /// `y = x·Wᵀ + b` for `x` of shape `[rows, in]`.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let h = tape.matmul_t(x, p[self.weight])?;
        tape.add_row(h, p[self.bias])
    }

    pub fn param_count(&self) -> usize {
        self.in_dim * self.out_dim + self.out_dim
    }
}

/// Re-draws the layer weights uniform on `±bound.bound(fan_in)`.
pub fn sine_init(store: &mut ParamStore, layer: &LinearLayer, fan_in: usize, bound: SineBound, rng: &mut Prng) {
    let b = bound.bound(fan_in);
    for w in store.get_mut(layer.weight).data_mut() {
        *w = rng.uniform_in(-b, b);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpConfig {
    /// Number of hidden layers.
    pub depth: usize,
    pub width: usize,
    #[serde(default)]
    pub activation: Activation,
    pub output_dim: usize,
}

impl MlpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 {
            return Err(Error::invalid("MLP width must be >= 1"));
        }
        if self.output_dim == 0 {
            return Err(Error::invalid("MLP output_dim must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Mlp {
    pub config: MlpConfig,
    pub layers: Vec<LinearLayer>,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, config: &MlpConfig, rng: &mut Prng) -> Result<Self> {
        config.validate()?;
        let mut layers = Vec::with_capacity(config.depth + 1);
        let mut fan_in = in_dim;
        for i in 0..config.depth {
            let layer = LinearLayer::new(store, &format!("{name}.{i}"), fan_in, config.width, rng);
            if let Activation::Sine { init } = config.activation {
                sine_init(store, &layer, fan_in, init, rng);
            }
            layers.push(layer);
            fan_in = config.width;
        }
        layers.push(LinearLayer::new(
            store,
            &format!("{name}.head"),
            fan_in,
            config.output_dim,
            rng,
        ));
        Ok(Self {
            config: config.clone(),
            layers,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    /// `depth` rounds of linear + activation, then the linear head.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let cols = tape.value(x).last_dim();
        if cols != self.in_dim() || tape.value(x).rank() != 2 {
            return Err(Error::Shape {
                op: "mlp_forward",
                left: tape.shape(x).to_vec(),
                right: vec![self.in_dim()],
            });
        }
        let (head, hidden) = self.layers.split_last().expect("mlp has a head");
        let mut h = x;
        for layer in hidden {
            h = layer.forward(tape, p, h)?;
            h = self.config.activation.apply(tape, h)?;
        }
        head.forward(tape, p, h)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(LinearLayer::param_count).sum()
    }
}

pub fn softmax(tape: &mut Tape, x: Var) -> Result<Var> {
    tape.softmax(x)
}

/// Standardize each row, then apply `gain` and `bias` per feature.
pub fn layernorm(tape: &mut Tape, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
    let n = tape.layernorm(x, eps)?;
    let g = tape.mul_row(n, gain)?;
    tape.add_row(g, bias)
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNormParams {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNormParams {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), Tensor::ones(vec![dim])),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(vec![dim])),
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        layernorm(tape, x, p[self.gain], p[self.bias], LAYERNORM_EPS)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_identity_and_constant() {
        let mut store = ParamStore::new();
        let mut rng = Prng::new(0);
        let layer = LinearLayer::new(&mut store, "l", 3, 3, &mut rng);
        *store.get_mut(layer.weight) =
            Tensor::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]).unwrap();
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let x = tape.constant(Tensor::from_rows(&[vec![1.0, -2.0, 3.0]]).unwrap());
        let y = layer.forward(&mut tape, &p, x).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, -2.0, 3.0]);

        *store.get_mut(layer.weight) = Tensor::zeros(vec![3, 3]);
        *store.get_mut(layer.bias) = Tensor::vector(vec![0.5, 0.25, -1.0]);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let x = tape.constant(Tensor::from_rows(&[vec![7.0, 8.0, 9.0]]).unwrap());
        let y = layer.forward(&mut tape, &p, x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.25, -1.0]);
    }

    #[test]
    fn depth_zero_mlp_is_a_linear_head() {
        let mut store = ParamStore::new();
        let cfg = MlpConfig {
            depth: 0,
            width: 8,
            activation: Activation::Relu,
            output_dim: 2,
        };
        let mlp = Mlp::new(&mut store, "m", 4, &cfg, &mut Prng::new(1)).unwrap();
        assert_eq!(mlp.layers.len(), 1);
        assert_eq!(mlp.param_count(), 4 * 2 + 2);
    }

    #[test]
    fn relu_mlp_on_zero_input_propagates_bias_only() {
        let mut store = ParamStore::new();
        let cfg = MlpConfig {
            depth: 3,
            width: 5,
            activation: Activation::Relu,
            output_dim: 2,
        };
        let mlp = Mlp::new(&mut store, "m", 4, &cfg, &mut Prng::new(2)).unwrap();
        let head_bias = mlp.layers.last().unwrap().bias;
        *store.get_mut(head_bias) = Tensor::vector(vec![0.3, -0.7]);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let x = tape.constant(Tensor::zeros(vec![1, 4]));
        let y = mlp.forward(&mut tape, &p, x).unwrap();
        // hidden biases are zero, so every hidden activation is relu(0) = 0
        assert_eq!(tape.value(y).data(), &[0.3, -0.7]);
    }

    #[test]
    fn mlp_rejects_wrong_input_width() {
        let mut store = ParamStore::new();
        let cfg = MlpConfig {
            depth: 1,
            width: 4,
            activation: Activation::Relu,
            output_dim: 1,
        };
        let mlp = Mlp::new(&mut store, "m", 3, &cfg, &mut Prng::new(0)).unwrap();
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let x = tape.constant(Tensor::zeros(vec![2, 5]));
        assert!(matches!(mlp.forward(&mut tape, &p, x), Err(Error::Shape { .. })));
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![0.0, 0.0, 0.0]));
        let y = softmax(&mut tape, x).unwrap();
        for &v in tape.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = tape.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let y = softmax(&mut tape, x).unwrap();
        // e^k / (e + e^2 + e^3), evaluated independently at high precision
        let expect = [0.090_030_573_170_380_46, 0.244_728_471_054_797_64, 0.665_240_955_774_821_9];
        for (a, b) in tape.value(y).data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_shift_invariance() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![0.3, -1.2, 2.5, 0.0]));
        let xs = tape.add_scalar(x, 123.456).unwrap();
        let a = softmax(&mut tape, x).unwrap();
        let b = softmax(&mut tape, xs).unwrap();
        assert!(tape.value(a).max_abs_diff(tape.value(b)).unwrap() < 1e-12);
    }

    #[test]
    fn layernorm_constant_row_is_zero() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(vec![2, 4], 3.7));
        let y = tape.layernorm(x, LAYERNORM_EPS).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn layernorm_keeps_normalized_row() {
        let row = vec![1.0, -1.0, 1.0, -1.0];
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_rows(&[row.clone()]).unwrap());
        let g = tape.constant(Tensor::ones(vec![4]));
        let b = tape.constant(Tensor::zeros(vec![4]));
        let y = layernorm(&mut tape, x, g, b, LAYERNORM_EPS).unwrap();
        // variance 1, so the only change is the factor 1/sqrt(1 + eps)
        for (a, r) in tape.value(y).data().iter().zip(&row) {
            assert!((a - r).abs() < 1e-5);
        }
    }

    #[test]
    fn sine_init_range_determinism_and_variance() {
        let fan_in = 100;
        let make = |seed| {
            let mut store = ParamStore::new();
            let mut rng = Prng::new(seed);
            let layer = LinearLayer::new(&mut store, "s", fan_in, 100, &mut rng);
            sine_init(&mut store, &layer, fan_in, SineBound::Standard, &mut rng);
            store.get(layer.weight).clone()
        };
        let w = make(11);
        assert_eq!(w, make(11));
        let b = (6.0 / fan_in as f64).sqrt();
        assert!(w.data().iter().all(|v| v.abs() <= b));
        let n = w.numel() as f64;
        let mean = w.data().iter().sum::<f64>() / n;
        let var = w.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        // uniform on ±b has variance b²/3
        let expect = b * b / 3.0;
        assert!((var - expect).abs() / expect < 0.1, "{var} vs {expect}");
    }

    #[test]
    fn polynomial_needs_order_one() {
        assert!(PolynomialActivation::new(vec![1.0]).is_err());
        assert_eq!(PolynomialActivation::new(vec![0.0, 1.0, 0.5]).unwrap().order(), 2);
    }
}
