//! Training objective: smoothed multi-class Dice, the reaction-diffusion
//! residual, the zero-flux boundary penalty and their weighted sum.

use std::rc::Rc;

use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{face_pairs, laplacian, laplacian_weight, Field3D};
use crate::tape::{Tape, Var};
use crate::tensor::{Boundary, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda1: 1.0,
            lambda2: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CoefficientRanges {
    pub d: (f64, f64),
    pub rho: (f64, f64),
}

impl Default for CoefficientRanges {
    fn default() -> Self {
        CoefficientRanges {
            d: (0.02, 1.5),
            rho: (0.002, 0.2),
        }
    }
}

/// Per-voxel diffusion and proliferation fields.
#[derive(Clone, Debug, PartialEq)]
pub struct BiophysCoefficients {
    pub d: Field3D,
    pub rho: Field3D,
    pub ranges: CoefficientRanges,
}

impl BiophysCoefficients {
    pub fn uniform(dims: [usize; 3], d: f64, rho: f64) -> Self {
        BiophysCoefficients {
            d: Field3D::constant(dims, d),
            rho: Field3D::constant(dims, rho),
            ranges: CoefficientRanges {
                d: (d, d),
                rho: (rho, rho),
            },
        }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.d.dims()
    }
}

/// Independent uniform draws for every voxel of both fields.
pub fn sample_coefficients(
    dims: [usize; 3],
    ranges: CoefficientRanges,
    rng: &mut impl Rng,
) -> Result<BiophysCoefficients> {
    let draw = |(lo, hi): (f64, f64), rng: &mut dyn rand::RngCore| -> Result<Field3D> {
        if !(lo <= hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::invalid(format!(
                "coefficient range ({lo}, {hi}) is not ordered"
            )));
        }
        let n = dims.iter().product();
        let data = if lo == hi {
            vec![lo; n]
        } else {
            let dist = Uniform::new_inclusive(lo, hi);
            (0..n).map(|_| dist.sample(rng)).collect()
        };
        Field3D::new(dims, 1.0, data)
    };
    let d = draw(ranges.d, rng)?;
    let rho = draw(ranges.rho, rng)?;
    Ok(BiophysCoefficients { d, rho, ranges })
}

/// Smoothed Dice over every class:
/// `sum_n 1 - (2 sum(y_n p_n) + 1) / (sum(y_n) + sum(p_n) + 1)`.
///
/// `probs` and `labels` are `[classes, ...]` with identical shapes.
pub fn dice_loss(tape: &mut Tape, probs: Var, labels: &Tensor) -> Result<Var> {
    let shape = tape.shape(probs).to_vec();
    if shape != labels.shape() {
        return Err(Error::ShapeMismatch {
            op: "dice_loss",
            lhs: shape,
            rhs: labels.shape().to_vec(),
        });
    }
    let k = shape[0];
    let n = labels.numel() / k;
    let p = tape.reshape(probs, &[k, n])?;
    let y = tape.constant(labels.clone().reshape(&[k, n])?);
    let ones = tape.constant(Tensor::ones(&[n, 1]));
    let label_sums: Vec<f64> = labels.data().chunks(n).map(|c| c.iter().sum()).collect();
    let y_sum = tape.constant(Tensor::new(vec![k, 1], label_sums)?);

    let py = tape.mul(p, y)?;
    let inter = tape.matmul(py, ones)?;
    let p_sum = tape.matmul(p, ones)?;
    let num = tape.scale(inter, 2.0)?;
    let num = tape.add_scalar(num, 1.0)?;
    let den = tape.add(y_sum, p_sum)?;
    let den = tape.add_scalar(den, 1.0)?;
    let ratio = tape.div(num, den)?;
    let per_class = tape.neg(ratio)?;
    let per_class = tape.add_scalar(per_class, 1.0)?;
    tape.sum(per_class)
}

/// Mean of [`dice_loss`] over batch elements.
pub fn dice_loss_batch(tape: &mut Tape, batch: &[(Var, &Tensor)]) -> Result<Var> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let mut terms = Vec::with_capacity(batch.len());
    for &(p, y) in batch {
        let l = dice_loss(tape, p, y)?;
        terms.push(tape.reshape(l, &[1])?);
    }
    let all = tape.concat(&terms)?;
    tape.mean(all)
}

/// Mean squared residual of `du/dt = d lap(u) + rho u (1 - u)` over the grid.
///
/// `u_hat` and `du_dt` may have any shape holding `H*W*D` values in row-major
/// voxel order. The Laplacian mirrors at the boundary.
pub fn pde_loss(
    tape: &mut Tape,
    u_hat: Var,
    du_dt: Var,
    coeffs: &BiophysCoefficients,
) -> Result<Var> {
    let dims = coeffs.dims();
    let n: usize = dims.iter().product();
    for v in [u_hat, du_dt] {
        if tape.value(v).numel() != n {
            return Err(Error::ShapeMismatch {
                op: "pde_loss",
                lhs: tape.shape(v).to_vec(),
                rhs: dims.to_vec(),
            });
        }
    }
    let vol = [1, dims[0], dims[1], dims[2]];
    let u = tape.reshape(u_hat, &vol)?;
    let ut = tape.reshape(du_dt, &vol)?;
    let kernel = tape.constant(laplacian_weight(coeffs.d.spacing()));
    let lap = tape.conv3d(u, kernel, None, Boundary::Reflect)?;
    let d = tape.constant(coeffs.d.to_tensor());
    let rho = tape.constant(coeffs.rho.to_tensor());

    let diffusion = tape.mul(d, lap)?;
    let one_minus = tape.neg(u)?;
    let one_minus = tape.add_scalar(one_minus, 1.0)?;
    let logistic = tape.mul(u, one_minus)?;
    let reaction = tape.mul(rho, logistic)?;
    let r = tape.sub(ut, diffusion)?;
    let r = tape.sub(r, reaction)?;
    let sq = tape.square(r)?;
    tape.mean(sq)
}

/// Zero-flux boundary penalty: on each face, the squared outward one-sided
/// difference weighted by the boundary voxel's `d` and divided by the face
/// area, summed over all six faces.
pub fn bc_loss(tape: &mut Tape, u_hat: Var, coeffs: &BiophysCoefficients) -> Result<Var> {
    let dims = coeffs.dims();
    coeffs.d.require_min_extent("bc_loss")?;
    if tape.value(u_hat).numel() != dims.iter().product::<usize>() {
        return Err(Error::ShapeMismatch {
            op: "bc_loss",
            lhs: tape.shape(u_hat).to_vec(),
            rhs: dims.to_vec(),
        });
    }
    let (mut boundary, mut inner, mut weights) = (Vec::new(), Vec::new(), Vec::new());
    for (pairs, area) in face_pairs(dims) {
        for (b, n) in pairs {
            boundary.push(b);
            inner.push(n);
            weights.push(coeffs.d.data()[b] / area as f64);
        }
    }
    let ub = tape.gather(u_hat, Rc::new(boundary))?;
    let un = tape.gather(u_hat, Rc::new(inner))?;
    let diff = tape.sub(ub, un)?;
    let diff = tape.scale(diff, 1.0 / coeffs.d.spacing())?;
    let sq = tape.square(diff)?;
    let w = tape.constant(Tensor::from_vec(weights));
    let weighted = tape.mul(w, sq)?;
    tape.sum(weighted)
}

/// `dice + lambda1 * pde + lambda2 * bc`; absent regularisers contribute nothing.
pub fn total_loss(
    tape: &mut Tape,
    dice: Var,
    pde: Option<Var>,
    bc: Option<Var>,
    weights: LossWeights,
) -> Result<Var> {
    let mut total = dice;
    for (term, lambda) in [(pde, weights.lambda1), (bc, weights.lambda2)] {
        if let Some(term) = term {
            let scaled = tape.scale(term, lambda)?;
            total = tape.add(total, scaled)?;
        }
    }
    Ok(total)
}

/// Value of [`dice_loss`] for plain tensors.
pub fn dice_loss_value(probs: &Tensor, labels: &Tensor) -> Result<f64> {
    let mut tape = Tape::new();
    let p = tape.constant(probs.clone());
    let l = dice_loss(&mut tape, p, labels)?;
    Ok(tape.value(l).item())
}

/// Value of [`pde_loss`] for plain fields.
pub fn pde_loss_value(
    u_hat: &Field3D,
    du_dt: &Field3D,
    coeffs: &BiophysCoefficients,
) -> Result<f64> {
    u_hat.require_same_dims(du_dt, "pde_loss")?;
    u_hat.require_same_dims(&coeffs.d, "pde_loss")?;
    let mut tape = Tape::new();
    let u = tape.constant(u_hat.to_tensor());
    let ut = tape.constant(du_dt.to_tensor());
    let l = pde_loss(&mut tape, u, ut, coeffs)?;
    Ok(tape.value(l).item())
}

/// Value of [`bc_loss`] for a plain field.
pub fn bc_loss_value(u_hat: &Field3D, coeffs: &BiophysCoefficients) -> Result<f64> {
    u_hat.require_same_dims(&coeffs.d, "bc_loss")?;
    let mut tape = Tape::new();
    let u = tape.constant(u_hat.to_tensor());
    let l = bc_loss(&mut tape, u, coeffs)?;
    Ok(tape.value(l).item())
}

/// Pointwise residual field, computed without the tape.
pub fn pde_residual(
    u_hat: &Field3D,
    du_dt: &Field3D,
    coeffs: &BiophysCoefficients,
) -> Result<Field3D> {
    u_hat.require_same_dims(du_dt, "pde_residual")?;
    u_hat.require_same_dims(&coeffs.d, "pde_residual")?;
    let mut r = laplacian(u_hat)?;
    for (i, v) in r.data_mut().iter_mut().enumerate() {
        let u = u_hat.data()[i];
        *v = du_dt.data()[i] - coeffs.d.data()[i] * *v - coeffs.rho.data()[i] * u * (1.0 - u);
    }
    Ok(r)
}
