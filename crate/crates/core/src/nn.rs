//! Feed-forward networks with PReLU activations and optional residual blocks.

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpConfig {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub num_hidden: usize,
    pub output_dim: usize,
    pub prelu_init: f64,
    pub use_skip: bool,
}

impl MlpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 || self.input_dim == 0 || self.output_dim == 0 {
            return Err(Error::Config(format!("MLP dimensions must be positive: {self:?}")));
        }
        if !(self.prelu_init > 0.0 && self.prelu_init < 1.0) {
            return Err(Error::Config(format!(
                "PReLU init {} outside (0, 1)",
                self.prelu_init
            )));
        }
        Ok(())
    }

    fn has_projection(&self) -> bool {
        self.use_skip && self.num_hidden > 0
    }
}

/// Affine map `x W + b` with `W: [in x out]`, `b: [1 x out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> Dense<T> {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[input, output]),
            bias: Tensor::zeros(&[1, output]),
        }
    }

    /// Uniform fan-in init, `U(-1/sqrt(in), 1/sqrt(in))` for weights and biases.
    pub fn init<R: Rng + ?Sized>(input: usize, output: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (input as f64).sqrt();
        let mut draw = |n: usize| -> Vec<T> {
            (0..n)
                .map(|_| T::of(rng.random_range(-bound..bound)))
                .collect()
        };
        let w = draw(input * output);
        let b = draw(output);
        Self {
            weight: Tensor::matrix(input, output, w).expect("sized above"),
            bias: Tensor::matrix(1, output, b).expect("sized above"),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.cols()
    }
}

/// One hidden block: dense layer followed by a PReLU with a single slope.
#[derive(Clone, Debug, PartialEq)]
pub struct HiddenLayer<T> {
    pub dense: Dense<T>,
    pub slope: Tensor<T>,
}

/// Multilayer perceptron.
///
/// Without skips: `num_hidden` blocks of `linear -> PReLU`, then a linear
/// output layer. With skips: a linear projection to `hidden_dim` first,
/// after which every hidden block computes `h + PReLU(W h + b)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp<T> {
    config: MlpConfig,
    projection: Option<Dense<T>>,
    hidden: Vec<HiddenLayer<T>>,
    output: Dense<T>,
}

/// Tape handles of an [`Mlp`]'s parameters, in [`Mlp::params`] order.
#[derive(Clone, Debug)]
pub struct MlpVars {
    vars: Vec<Var>,
}

impl MlpVars {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl<T: Scalar> Mlp<T> {
    pub fn new<R: Rng + ?Sized>(config: MlpConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let h = config.hidden_dim;
        let projection = config
            .has_projection()
            .then(|| Dense::init(config.input_dim, h, rng));
        let mut hidden = Vec::with_capacity(config.num_hidden);
        for l in 0..config.num_hidden {
            let input = if l == 0 && projection.is_none() {
                config.input_dim
            } else {
                h
            };
            hidden.push(HiddenLayer {
                dense: Dense::init(input, h, rng),
                slope: Tensor::scalar(T::of(config.prelu_init)),
            });
        }
        let last = if config.num_hidden == 0 {
            config.input_dim
        } else {
            h
        };
        let output = Dense::init(last, config.output_dim, rng);
        Ok(Self {
            config,
            projection,
            hidden,
            output,
        })
    }

    /// Same architecture as `new` with every weight and bias zero.
    pub fn zeros(config: MlpConfig) -> Result<Self> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut net = Self::new(config, &mut rng)?;
        for p in net.params_mut() {
            if p.0.ends_with("slope") {
                continue;
            }
            p.1.data_mut().iter_mut().for_each(|v| *v = T::zero());
        }
        Ok(net)
    }

    /// Assemble from explicit layers; shapes are validated against `config`.
    pub fn from_parts(
        config: MlpConfig,
        projection: Option<Dense<T>>,
        hidden: Vec<HiddenLayer<T>>,
        output: Dense<T>,
    ) -> Result<Self> {
        let net = Self {
            config,
            projection,
            hidden,
            output,
        };
        net.check_shapes()?;
        Ok(net)
    }

    fn check_shapes(&self) -> Result<()> {
        let c = &self.config;
        let bad = |what: &str| Err(Error::Dimension(format!("MLP layer shapes inconsistent: {what}")));
        if self.hidden.len() != c.num_hidden {
            return bad("hidden layer count");
        }
        if c.has_projection() != self.projection.is_some() {
            return bad("projection presence");
        }
        let mut width = c.input_dim;
        let check = |d: &Dense<T>, out: usize, width: &mut usize| -> bool {
            let ok = d.input_dim() == *width
                && d.output_dim() == out
                && d.bias.len() == out
                && d.weight.shape().len() == 2;
            *width = out;
            ok
        };
        if let Some(p) = &self.projection {
            if !check(p, c.hidden_dim, &mut width) {
                return bad("projection");
            }
        }
        for (i, layer) in self.hidden.iter().enumerate() {
            if !check(&layer.dense, c.hidden_dim, &mut width) || layer.slope.len() != 1 {
                return bad(&format!("hidden layer {i}"));
            }
        }
        if !check(&self.output, c.output_dim, &mut width) {
            return bad("output layer");
        }
        Ok(())
    }

    pub fn config(&self) -> &MlpConfig {
        &self.config
    }

    pub fn projection(&self) -> Option<&Dense<T>> {
        self.projection.as_ref()
    }

    pub fn hidden_layers(&self) -> &[HiddenLayer<T>] {
        &self.hidden
    }

    pub fn output_layer(&self) -> &Dense<T> {
        &self.output
    }

    /// Named parameter tensors in a fixed order.
    pub fn params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        if let Some(p) = &self.projection {
            out.push(("projection.weight".to_string(), &p.weight));
            out.push(("projection.bias".to_string(), &p.bias));
        }
        for (i, l) in self.hidden.iter().enumerate() {
            out.push((format!("hidden{i}.weight"), &l.dense.weight));
            out.push((format!("hidden{i}.bias"), &l.dense.bias));
            out.push((format!("hidden{i}.slope"), &l.slope));
        }
        out.push(("output.weight".to_string(), &self.output.weight));
        out.push(("output.bias".to_string(), &self.output.bias));
        out
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = Vec::new();
        if let Some(p) = &mut self.projection {
            out.push(("projection.weight".to_string(), &mut p.weight));
            out.push(("projection.bias".to_string(), &mut p.bias));
        }
        for (i, l) in self.hidden.iter_mut().enumerate() {
            out.push((format!("hidden{i}.weight"), &mut l.dense.weight));
            out.push((format!("hidden{i}.bias"), &mut l.dense.bias));
            out.push((format!("hidden{i}.slope"), &mut l.slope));
        }
        out.push(("output.weight".to_string(), &mut self.output.weight));
        out.push(("output.bias".to_string(), &mut self.output.bias));
        out
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|(_, t)| t.len()).sum()
    }

    /// Put every parameter on the tape, trainable or frozen.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> MlpVars {
        let vars = self
            .params()
            .into_iter()
            .map(|(_, t)| tape.leaf(t.clone(), trainable))
            .collect();
        MlpVars { vars }
    }

    /// Forward pass of a `[batch x input_dim]` input on the tape.
    pub fn forward(&self, tape: &mut Tape<T>, vars: &MlpVars, input: Var) -> Result<Var> {
        let cols = tape.value(input).cols();
        if cols != self.config.input_dim {
            return Err(Error::Dimension(format!(
                "network expects {} input columns, got {cols}",
                self.config.input_dim
            )));
        }
        let mut it = vars.vars.iter().copied();
        let mut next = || it.next().expect("vars bound from this network");
        let mut h = input;
        if self.projection.is_some() {
            let (w, b) = (next(), next());
            let z = tape.matmul(h, w)?;
            h = tape.add_bias(z, b)?;
        }
        for _ in &self.hidden {
            let (w, b, a) = (next(), next(), next());
            let z = tape.matmul(h, w)?;
            let z = tape.add_bias(z, b)?;
            let act = tape.prelu(z, a)?;
            h = if self.projection.is_some() {
                tape.add(h, act)?
            } else {
                act
            };
        }
        let (w, b) = (next(), next());
        let z = tape.matmul(h, w)?;
        tape.add_bias(z, b)
    }

    /// Tape-free evaluation; numerically identical to [`Mlp::forward`].
    pub fn predict(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let x = tape.constant(input.clone());
        let y = self.forward(&mut tape, &vars, x)?;
        Ok(tape.value(y).clone())
    }

    /// Collect gradients for every parameter after `tape.backward`.
    pub fn grads(&self, tape: &Tape<T>, vars: &MlpVars) -> Vec<Tensor<T>> {
        vars.vars.iter().map(|&v| tape.grad_or_zeros(v)).collect()
    }

    pub fn cast<U: Scalar>(&self) -> Mlp<U> {
        let cd = |d: &Dense<T>| Dense {
            weight: d.weight.cast(),
            bias: d.bias.cast(),
        };
        Mlp {
            config: self.config.clone(),
            projection: self.projection.as_ref().map(cd),
            hidden: self
                .hidden
                .iter()
                .map(|l| HiddenLayer {
                    dense: cd(&l.dense),
                    slope: l.slope.cast(),
                })
                .collect(),
            output: cd(&self.output),
        }
    }
}
