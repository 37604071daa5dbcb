//! Tumour cell density estimator: a per-voxel sine network over backbone
//! features concatenated with a constant time channel.
//!
//! Every voxel is an independent column. Feature maps of shape `[C, H, W, D]`
//! are flattened to `[C, N]`, stacked with `C` rows filled with the scalar time
//! `t`, and pushed through
//!
//! ```text
//! u_hat = W_n (g_{n-1} o ... o g_0)(y) + b_n,    g_i(y) = sin(W_i y + b_i)
//! ```
//!
//! The time derivative is carried forward alongside the values as a tangent
//! (the input tangent is 0 on feature rows and 1 on time rows), so the
//! resulting `du/dt` is itself a tape expression and the PDE residual can be
//! differentiated with respect to every weight and every input feature.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::Field3D;
use crate::nn::{Activation, Layer, Module};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SirenConfig {
    /// Feature channels before the time rows are appended.
    pub in_channels: usize,
    pub hidden: Vec<usize>,
    pub omega0: f64,
    pub omega: f64,
    pub activation: Activation,
    /// Clamp the density to `[0, 1]` before it reaches the PDE residual.
    pub clamp_output: bool,
}

impl Default for SirenConfig {
    fn default() -> Self {
        SirenConfig {
            in_channels: 8,
            hidden: vec![16, 16],
            omega0: 30.0,
            omega: 1.0,
            activation: Activation::Sine,
            clamp_output: false,
        }
    }
}

impl SirenConfig {
    pub fn input_width(&self) -> usize {
        2 * self.in_channels
    }

    /// `(fan_in, fan_out)` of every layer, the last one producing the density.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut widths = vec![self.input_width()];
        widths.extend(&self.hidden);
        widths.push(1);
        widths.windows(2).map(|w| (w[0], w[1])).collect()
    }
}

/// The assumed time of one optimisation step, shared by every voxel.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TimeChannel(f64);

impl TimeChannel {
    pub fn new(t: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::invalid(format!("time must lie in [0, 1], got {t}")));
        }
        Ok(TimeChannel(t))
    }

    /// `step / total_steps`.
    pub fn at_step(step: usize, total_steps: usize) -> Self {
        TimeChannel(step as f64 / total_steps.max(1) as f64)
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SirenNet {
    pub layers: Vec<Layer>,
    pub config: SirenConfig,
}

/// Tape outputs of one estimator evaluation, both `[1, N]`.
#[derive(Clone, Copy, Debug)]
pub struct DensityOutput {
    pub u_hat: Var,
    pub du_dt: Var,
}

impl SirenNet {
    /// Sine nets take `U(-1/n, 1/n) * omega0` on the first layer and
    /// `U(-sqrt(6/n)/omega, sqrt(6/n)/omega)` elsewhere. The ReLU ablation
    /// uses `U(-sqrt(6/n), sqrt(6/n))` throughout. Biases start at zero.
    pub fn init(config: SirenConfig, seed: u64) -> Result<Self> {
        if config.in_channels == 0 || config.hidden.contains(&0) {
            return Err(Error::invalid("estimator widths must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dims = config.layer_dims();
        let last = dims.len() - 1;
        let layers = dims
            .iter()
            .enumerate()
            .map(|(i, &(fan_in, fan_out))| {
                let n = fan_in as f64;
                let limit = match config.activation {
                    Activation::Sine if i == 0 && i != last => config.omega0 / n,
                    Activation::Sine => (6.0 / n).sqrt() / config.omega,
                    Activation::Relu => (6.0 / n).sqrt(),
                };
                Layer::uniform(&[fan_out, fan_in], fan_out, limit, &mut rng)
            })
            .collect();
        Ok(SirenNet { layers, config })
    }

    /// Records `u_hat` and `du/dt` for a `[C, ...]` feature tensor. `params`
    /// must come from [`Module::bind`] on this net.
    pub fn eval(
        &self,
        tape: &mut Tape,
        params: &[Var],
        features: Var,
        t: TimeChannel,
    ) -> Result<DensityOutput> {
        let shape = tape.shape(features).to_vec();
        let c = self.config.in_channels;
        if shape.first() != Some(&c) {
            return Err(Error::ShapeMismatch {
                op: "estimator channels",
                lhs: shape,
                rhs: vec![c],
            });
        }
        if params.len() != 2 * self.layers.len() {
            return Err(Error::invalid("estimator parameter count mismatch"));
        }
        let n = shape.iter().product::<usize>() / c;
        let x = tape.reshape(features, &[c, n])?;
        let time = tape.constant(Tensor::full(&[c, n], t.value()));
        let mut h = tape.concat(&[x, time])?;
        let mut tangent = {
            let mut seed = vec![0.0; c * n];
            seed.extend(std::iter::repeat(1.0).take(c * n));
            tape.constant(Tensor::new(vec![2 * c, n], seed)?)
        };
        let act = self.config.activation;
        let last = self.layers.len() - 1;
        for i in 0..last {
            let (w, b) = (params[2 * i], params[2 * i + 1]);
            let z = tape.affine(w, h, b)?;
            let z_dot = tape.matmul(w, tangent)?;
            let slope = act.derivative(tape, z)?;
            h = act.apply(tape, z)?;
            tangent = tape.mul(slope, z_dot)?;
        }
        let (w, b) = (params[2 * last], params[2 * last + 1]);
        let mut u_hat = tape.affine(w, h, b)?;
        let mut du_dt = tape.matmul(w, tangent)?;
        if self.config.clamp_output {
            let inside = tape
                .value(u_hat)
                .map(|u| if u > 0.0 && u < 1.0 { 1.0 } else { 0.0 });
            let inside = tape.constant(inside);
            u_hat = tape.clamp(u_hat, 0.0, 1.0)?;
            du_dt = tape.mul(du_dt, inside)?;
        }
        Ok(DensityOutput { u_hat, du_dt })
    }

    fn run(&self, features: &Tensor, t: TimeChannel) -> Result<(Field3D, Field3D)> {
        let shape = features.shape();
        if shape.len() != 4 {
            return Err(Error::ShapeMismatch {
                op: "estimator features",
                lhs: shape.to_vec(),
                rhs: vec![self.config.in_channels, 0, 0, 0],
            });
        }
        if !features.all_finite() {
            return Err(Error::invalid("estimator features must be finite"));
        }
        let dims = [shape[1], shape[2], shape[3]];
        let mut tape = Tape::new();
        let params = self.bind(&mut tape);
        let f = tape.constant(features.clone());
        let out = self.eval(&mut tape, &params, f, t)?;
        Ok((
            Field3D::from_tensor(tape.value(out.u_hat), dims, 1.0)?,
            Field3D::from_tensor(tape.value(out.du_dt), dims, 1.0)?,
        ))
    }

    /// Density field for `[C, H, W, D]` features.
    pub fn forward(&self, features: &Tensor, t: TimeChannel) -> Result<Field3D> {
        Ok(self.run(features, t)?.0)
    }

    /// Total derivative of the density with respect to the shared time input.
    pub fn du_dt(&self, features: &Tensor, t: TimeChannel) -> Result<Field3D> {
        Ok(self.run(features, t)?.1)
    }
}

impl Module for SirenNet {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| {
                [
                    (format!("estimator.{i}.weight"), &l.weight),
                    (format!("estimator.{i}.bias"), &l.bias),
                ]
            })
            .collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }
}
