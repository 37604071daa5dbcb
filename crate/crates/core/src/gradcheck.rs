//! Central-difference verification of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Which coordinates of each parameter tensor to probe.
#[derive(Clone, Copy, Debug)]
pub enum Coverage {
    All,
    /// At most this many coordinates per tensor, chosen by a seeded draw.
    Sample {
        per_tensor: usize,
        seed: u64,
    },
}

/// Max over probed coordinates of `|autodiff - fd| / max(1, |fd|)`.
pub fn grad_check<F>(f: F, point: &Tensor, epsilon: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    grad_check_many(
        |tape: &mut Tape, vars: &[Var]| f(tape, vars[0]),
        std::slice::from_ref(point),
        epsilon,
        Coverage::All,
    )
}

/// As [`grad_check`], for a function of several parameter tensors.
pub fn grad_check_many<F>(f: F, params: &[Tensor], epsilon: f64, coverage: Coverage) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(epsilon > 0.0) {
        return Err(Error::invalid(format!(
            "epsilon must be positive, got {epsilon}"
        )));
    }
    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.leaf(p.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let v = tape.value(out);
        if !v.is_scalar() {
            return Err(Error::NonScalarRoot(v.shape().to_vec()));
        }
        let v = v.item();
        if !v.is_finite() {
            return Err(Error::NonFinite {
                location: "grad_check evaluation".into(),
                value: v,
            });
        }
        Ok(v)
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let root = f(&mut tape, &vars)?;
    let grads = tape.backward(root)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.wrt(v)).collect();

    let mut work = params.to_vec();
    let mut worst: f64 = 0.0;
    for (ti, g) in analytic.iter().enumerate() {
        let n = params[ti].numel();
        let coords: Vec<usize> = match coverage {
            Coverage::All => (0..n).collect(),
            Coverage::Sample { per_tensor, seed } if per_tensor < n => {
                let mut rng = ChaCha8Rng::seed_from_u64(
                    seed ^ (ti as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15),
                );
                let mut c = sample(&mut rng, n, per_tensor).into_vec();
                c.sort_unstable();
                c
            }
            Coverage::Sample { .. } => (0..n).collect(),
        };
        for j in coords {
            let orig = params[ti].data()[j];
            work[ti].data_mut()[j] = orig + epsilon;
            let plus = eval(&work)?;
            work[ti].data_mut()[j] = orig - epsilon;
            let minus = eval(&work)?;
            work[ti].data_mut()[j] = orig;
            let fd = (plus - minus) / (2.0 * epsilon);
            let err = (g.data()[j] - fd).abs() / fd.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
