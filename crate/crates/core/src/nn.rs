//! Parameter containers shared by the segmentation backbone and the density
//! estimator.

use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Sine,
    Relu,
}

impl Activation {
    pub fn apply(self, tape: &mut Tape, x: Var) -> Result<Var> {
        match self {
            Activation::Sine => tape.sin(x),
            Activation::Relu => tape.relu(x),
        }
    }

    /// Derivative of the activation evaluated at `x`.
    pub fn derivative(self, tape: &mut Tape, x: Var) -> Result<Var> {
        match self {
            Activation::Sine => tape.cos(x),
            Activation::Relu => tape.step(x),
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "sine" => Ok(Activation::Sine),
            "relu" => Ok(Activation::Relu),
            other => Err(format!(
                "unknown activation `{other}` (expected sine or relu)"
            )),
        }
    }
}

/// Anything with an ordered, named list of trainable tensors.
pub trait Module {
    fn named_params(&self) -> Vec<(String, &Tensor)>;

    fn params_mut(&mut self) -> Vec<&mut Tensor>;

    /// Places every parameter on `tape` as a leaf, in `named_params` order.
    fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.named_params()
            .into_iter()
            .map(|(_, t)| tape.leaf(t.clone()))
            .collect()
    }

    fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }
}

/// Weight and bias of one affine map or convolution.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Layer {
    pub fn uniform(shape: &[usize], out: usize, limit: f64, rng: &mut impl Rng) -> Self {
        let n: usize = shape.iter().product();
        let dist = Uniform::new_inclusive(-limit, limit);
        let data = (0..n).map(|_| dist.sample(rng)).collect();
        Layer {
            weight: Tensor::new(shape.to_vec(), data).expect("shape matches data"),
            bias: Tensor::zeros(&[out]),
        }
    }
}
