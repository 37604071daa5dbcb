//! Small U-shaped 3D encoder-decoder producing class probabilities and the
//! bottleneck feature map read by the density estimator.
//!
//! With `depth = 1`:
//!
//! ```text
//! I -> conv3 -> silu -> e0 ------------------------------- concat -> conv3 -> silu -> 1x1 head -> softmax
//!                        \-> pool -> conv3 -> silu -> b -> upsample -/
//! ```
//!
//! All stages keep `base_features` channels. The decoder convolution is
//! pointwise by default (`decoder_kernel = 1`); `3` gives a full 3x3x3 stage.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Layer, Module};
use crate::tape::{Tape, Var};
use crate::tensor::{Boundary, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegNetConfig {
    pub in_channels: usize,
    pub base_features: usize,
    pub depth: usize,
    pub classes: usize,
    /// Decoder convolution size, 1 or 3.
    pub decoder_kernel: usize,
}

impl Default for SegNetConfig {
    fn default() -> Self {
        SegNetConfig {
            in_channels: 4,
            base_features: 8,
            depth: 1,
            classes: 4,
            decoder_kernel: 1,
        }
    }
}

impl SegNetConfig {
    pub fn bottleneck_dims(&self, dims: [usize; 3]) -> Result<[usize; 3]> {
        let f = 1usize << self.depth;
        if dims.iter().any(|&n| n % f != 0 || n == 0) {
            return Err(Error::ShapeMismatch {
                op: "segnet input (extents must be divisible by 2^depth)",
                lhs: dims.to_vec(),
                rhs: vec![f],
            });
        }
        Ok([dims[0] / f, dims[1] / f, dims[2] / f])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegNet {
    pub config: SegNetConfig,
    /// `depth + 1` encoder convolutions, the last one producing the bottleneck.
    pub encoder: Vec<Layer>,
    /// `depth` decoder convolutions, coarsest first.
    pub decoder: Vec<Layer>,
    pub head: Layer,
}

#[derive(Clone, Copy, Debug)]
pub struct SegOutput {
    /// `[classes, H, W, D]`, summing to one over classes at every voxel.
    pub probs: Var,
    /// `[base_features, H/2^depth, W/2^depth, D/2^depth]`.
    pub features: Var,
}

impl SegNet {
    pub fn init(config: SegNetConfig, seed: u64) -> Result<Self> {
        if config.in_channels == 0 || config.base_features == 0 || config.classes == 0 {
            return Err(Error::invalid("segnet widths must be positive"));
        }
        if config.decoder_kernel != 1 && config.decoder_kernel != 3 {
            return Err(Error::invalid(format!(
                "decoder kernel must be 1 or 3, got {}",
                config.decoder_kernel
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = config.base_features;
        let conv = |c_in: usize, c_out: usize, rng: &mut ChaCha8Rng| {
            let limit = (6.0 / (27 * c_in) as f64).sqrt();
            Layer::uniform(&[c_out, c_in, 3, 3, 3], c_out, limit, rng)
        };
        let mut encoder = vec![conv(config.in_channels, f, &mut rng)];
        for _ in 0..config.depth {
            encoder.push(conv(f, f, &mut rng));
        }
        let decoder = (0..config.depth)
            .map(|_| match config.decoder_kernel {
                3 => conv(2 * f, f, &mut rng),
                _ => Layer::uniform(&[f, 2 * f], f, (6.0 / (2 * f) as f64).sqrt(), &mut rng),
            })
            .collect();
        let head = Layer::uniform(
            &[config.classes, f],
            config.classes,
            (6.0 / f as f64).sqrt(),
            &mut rng,
        );
        Ok(SegNet {
            config,
            encoder,
            decoder,
            head,
        })
    }

    /// Records the forward pass for a `[in_channels, H, W, D]` input. `params`
    /// must come from [`Module::bind`] on this net.
    pub fn forward(&self, tape: &mut Tape, params: &[Var], input: Var) -> Result<SegOutput> {
        let shape = tape.shape(input).to_vec();
        if shape.len() != 4 || shape[0] != self.config.in_channels {
            return Err(Error::ShapeMismatch {
                op: "segnet input",
                lhs: shape,
                rhs: vec![self.config.in_channels, 0, 0, 0],
            });
        }
        let dims = [shape[1], shape[2], shape[3]];
        self.config.bottleneck_dims(dims)?;
        if params.len() != self.named_params().len() {
            return Err(Error::invalid("segnet parameter count mismatch"));
        }
        let mut p = params.iter().copied();
        let mut next = || p.next().expect("parameter count checked");

        let mut skips = Vec::with_capacity(self.config.depth);
        let (w, b) = (next(), next());
        let mut x = conv_silu(tape, input, w, b)?;
        for _ in 0..self.config.depth {
            skips.push(x);
            let pooled = tape.avg_pool2(x)?;
            let (w, b) = (next(), next());
            x = conv_silu(tape, pooled, w, b)?;
        }
        let features = x;
        for skip in skips.into_iter().rev() {
            let up = tape.upsample2(x)?;
            let cat = tape.concat(&[up, skip])?;
            let (w, b) = (next(), next());
            x = if self.config.decoder_kernel == 3 {
                conv_silu(tape, cat, w, b)?
            } else {
                pointwise_silu(tape, cat, w, b)?
            };
        }
        let (w, b) = (next(), next());
        let logits = tape.affine(w, x, b)?;
        let probs = tape.softmax0(logits)?;
        Ok(SegOutput { probs, features })
    }

    /// Value-only forward: `(probs, bottleneck features)`.
    pub fn predict(&self, input: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut tape = Tape::new();
        let params = self.bind(&mut tape);
        let x = tape.constant(input.clone());
        let out = self.forward(&mut tape, &params, x)?;
        Ok((
            tape.value(out.probs).clone(),
            tape.value(out.features).clone(),
        ))
    }
}

fn conv_silu(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.conv3d(x, w, Some(b), Boundary::Zero)?;
    tape.silu(y)
}

fn pointwise_silu(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.affine(w, x, b)?;
    tape.silu(y)
}

impl Module for SegNet {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, l) in self.encoder.iter().enumerate() {
            out.push((format!("segnet.enc{i}.weight"), &l.weight));
            out.push((format!("segnet.enc{i}.bias"), &l.bias));
        }
        for (i, l) in self.decoder.iter().enumerate() {
            out.push((format!("segnet.dec{i}.weight"), &l.weight));
            out.push((format!("segnet.dec{i}.bias"), &l.bias));
        }
        out.push(("segnet.head.weight".into(), &self.head.weight));
        out.push(("segnet.head.bias".into(), &self.head.bias));
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for l in self.encoder.iter_mut().chain(self.decoder.iter_mut()) {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        out.push(&mut self.head.weight);
        out.push(&mut self.head.bias);
        out
    }
}
