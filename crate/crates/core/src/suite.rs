//! Gradient checks over every differentiable component, as run by the
//! `gradcheck` command.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::Result;
use crate::estimator::{SirenConfig, SirenNet, TimeChannel};
use crate::gradcheck::{grad_check_many, Coverage};
use crate::loss::{
    bc_loss, dice_loss, pde_loss, sample_coefficients, total_loss, CoefficientRanges, LossWeights,
};
use crate::nn::{Activation, Module};
use crate::segnet::{SegNet, SegNetConfig};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const EPSILON: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteEntry {
    pub name: &'static str,
    pub max_rel_error: f64,
}

fn normal(shape: &[usize], scale: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            scale * z
        })
        .collect::<Vec<f64>>();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

fn one_hot(dims: [usize; 3], classes: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = dims.iter().product();
    let mut data = vec![0.0; classes * n];
    for i in 0..n {
        data[rng.gen_range(0..classes) * n + i] = 1.0;
    }
    Tensor::new(vec![classes, dims[0], dims[1], dims[2]], data).expect("shape matches data")
}

fn with_params<M: Module>(module: &M) -> Vec<Tensor> {
    module
        .named_params()
        .into_iter()
        .map(|(_, t)| t.clone())
        .collect()
}

/// Smallest `|z|` over every hidden pre-activation of `net` at time `t`.
fn hidden_margin(net: &SirenNet, features: &Tensor, t: f64) -> f64 {
    let c = net.config.in_channels;
    let n = features.numel() / c;
    let mut h: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let mut col: Vec<f64> = (0..c).map(|k| features.data()[k * n + i]).collect();
            col.extend(std::iter::repeat(t).take(c));
            col
        })
        .collect();
    let mut margin = f64::INFINITY;
    for layer in &net.layers[..net.layers.len() - 1] {
        let (w, b) = (layer.weight.data(), layer.bias.data());
        let k = layer.weight.shape()[1];
        for col in h.iter_mut() {
            let z: Vec<f64> = (0..b.len())
                .map(|o| b[o] + (0..k).map(|j| w[o * k + j] * col[j]).sum::<f64>())
                .collect();
            margin = z.iter().fold(margin, |m, v| m.min(v.abs()));
            *col = z.into_iter().map(|v| v.max(0.0)).collect();
        }
    }
    margin
}

const TIME: f64 = 0.3;

/// `sum(u_hat * a) + sum(du_dt * b)` for fixed random `a`, `b`, so both
/// estimator outputs are exercised. ReLU nets are redrawn until no hidden
/// unit sits near its kink.
fn estimator_entry(
    name: &'static str,
    activation: Activation,
    rng: &mut ChaCha8Rng,
) -> Result<SuiteEntry> {
    let config = SirenConfig {
        in_channels: 3,
        hidden: vec![6, 5],
        activation,
        ..SirenConfig::default()
    };
    let dims = [3, 2, 2];
    let (net, features) = loop {
        let net = SirenNet::init(config.clone(), rng.gen())?;
        let features = normal(&[3, dims[0], dims[1], dims[2]], 0.5, rng);
        if activation != Activation::Relu || hidden_margin(&net, &features, TIME) > 1e-3 {
            break (net, features);
        }
    };
    let a = normal(&[1, 12], 1.0, rng);
    let b = normal(&[1, 12], 1.0, rng);
    let mut params = with_params(&net);
    let n_net = params.len();
    params.push(features);
    let err = grad_check_many(
        |tape: &mut Tape, vars: &[Var]| {
            let out = net.eval(tape, &vars[..n_net], vars[n_net], TimeChannel::new(TIME)?)?;
            let (ca, cb) = (tape.constant(a.clone()), tape.constant(b.clone()));
            let x = tape.mul(out.u_hat, ca)?;
            let y = tape.mul(out.du_dt, cb)?;
            let (x, y) = (tape.sum(x)?, tape.sum(y)?);
            tape.add(x, y)
        },
        &params,
        EPSILON,
        Coverage::All,
    )?;
    Ok(SuiteEntry {
        name,
        max_rel_error: err,
    })
}

fn small_segnet() -> SegNetConfig {
    SegNetConfig {
        base_features: 3,
        ..SegNetConfig::default()
    }
}

fn segnet_entry(rng: &mut ChaCha8Rng) -> Result<SuiteEntry> {
    let net = SegNet::init(small_segnet(), rng.gen())?;
    let dims = [8, 8, 8];
    let input = normal(&[4, 8, 8, 8], 1.0, rng);
    let labels = one_hot(dims, 4, rng);
    let err = grad_check_many(
        |tape: &mut Tape, vars: &[Var]| {
            let x = tape.constant(input.clone());
            let out = net.forward(tape, vars, x)?;
            dice_loss(tape, out.probs, &labels)
        },
        &with_params(&net),
        EPSILON,
        Coverage::Sample {
            per_tensor: 12,
            seed: rng.gen(),
        },
    )?;
    Ok(SuiteEntry {
        name: "seg_model",
        max_rel_error: err,
    })
}

fn loss_entries(rng: &mut ChaCha8Rng) -> Result<Vec<SuiteEntry>> {
    let dims = [4, 3, 3];
    let labels = one_hot(dims, 4, rng);
    let logits = normal(&[4, dims[0], dims[1], dims[2]], 1.0, rng);
    let dice = grad_check_many(
        |tape: &mut Tape, v: &[Var]| {
            let p = tape.softmax0(v[0])?;
            dice_loss(tape, p, &labels)
        },
        &[logits],
        EPSILON,
        Coverage::All,
    )?;

    let coeffs = sample_coefficients(dims, CoefficientRanges::default(), rng)?;
    let u = normal(&[1, 36], 0.5, rng);
    let ut = normal(&[1, 36], 0.5, rng);
    let pde = grad_check_many(
        |tape: &mut Tape, v: &[Var]| pde_loss(tape, v[0], v[1], &coeffs),
        &[u.clone(), ut],
        EPSILON,
        Coverage::All,
    )?;
    let bc = grad_check_many(
        |tape: &mut Tape, v: &[Var]| bc_loss(tape, v[0], &coeffs),
        &[u],
        EPSILON,
        Coverage::All,
    )?;
    Ok(vec![
        SuiteEntry {
            name: "dice_loss",
            max_rel_error: dice,
        },
        SuiteEntry {
            name: "pde_loss",
            max_rel_error: pde,
        },
        SuiteEntry {
            name: "bc_loss",
            max_rel_error: bc,
        },
    ])
}

/// Full objective through backbone and estimator.
fn composite_entry(rng: &mut ChaCha8Rng) -> Result<SuiteEntry> {
    let seg = SegNet::init(small_segnet(), rng.gen())?;
    let est = SirenNet::init(
        SirenConfig {
            in_channels: 3,
            hidden: vec![5],
            ..SirenConfig::default()
        },
        rng.gen(),
    )?;
    let dims = [8, 8, 8];
    let input = normal(&[4, 8, 8, 8], 1.0, rng);
    let labels = one_hot(dims, 4, rng);
    let coeffs = sample_coefficients([4, 4, 4], CoefficientRanges::default(), rng)?;
    let mut params = with_params(&seg);
    let n_seg = params.len();
    params.extend(with_params(&est));
    let err = grad_check_many(
        |tape: &mut Tape, vars: &[Var]| {
            let x = tape.constant(input.clone());
            let out = seg.forward(tape, &vars[..n_seg], x)?;
            let dice = dice_loss(tape, out.probs, &labels)?;
            let dens = est.eval(tape, &vars[n_seg..], out.features, TimeChannel::new(0.5)?)?;
            let pde = pde_loss(tape, dens.u_hat, dens.du_dt, &coeffs)?;
            let bc = bc_loss(tape, dens.u_hat, &coeffs)?;
            total_loss(tape, dice, Some(pde), Some(bc), LossWeights::default())
        },
        &params,
        EPSILON,
        Coverage::Sample {
            per_tensor: 8,
            seed: rng.gen(),
        },
    )?;
    Ok(SuiteEntry {
        name: "composite",
        max_rel_error: err,
    })
}

/// Runs every check with inputs drawn from `seed`.
pub fn run(seed: u64) -> Result<Vec<SuiteEntry>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = vec![
        estimator_entry("estimator(sine)", Activation::Sine, &mut rng)?,
        estimator_entry("estimator(relu)", Activation::Relu, &mut rng)?,
        segnet_entry(&mut rng)?,
    ];
    out.extend(loss_entries(&mut rng)?);
    out.push(composite_entry(&mut rng)?);
    Ok(out)
}

pub fn max_error(entries: &[SuiteEntry]) -> f64 {
    entries.iter().map(|e| e.max_rel_error).fold(0.0, f64::max)
}
