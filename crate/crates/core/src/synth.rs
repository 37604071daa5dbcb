//! Synthetic labelled cases: a tumour grown by the reaction-diffusion
//! simulator inside an ellipsoidal brain mask, with nested region labels and
//! four noisy pseudo-modalities.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::Field3D;
use crate::growth::{simulate, to_voxel_units, GrowthParams};
use crate::tensor::Tensor;

/// Density thresholds for the three nested regions, `et > tc > wt > 0`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub et: f64,
    pub tc: f64,
    pub wt: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds {
            et: 0.6,
            tc: 0.35,
            wt: 0.1,
        }
    }
}

impl Thresholds {
    pub fn validate(&self) -> Result<()> {
        if self.et > self.tc && self.tc > self.wt && self.wt > 0.0 {
            Ok(())
        } else {
            Err(Error::invalid(format!(
                "thresholds must satisfy et > tc > wt > 0, got {self:?}"
            )))
        }
    }

    /// Class index `(0 normal, 1 core, 2 whole, 3 enhancing)` for a density.
    pub fn classify(&self, u: f64) -> u8 {
        if u > self.et {
            3
        } else if u > self.tc {
            1
        } else if u > self.wt {
            2
        } else {
            0
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub dims: [usize; 3],
    pub thresholds: Thresholds,
    pub noise_sigma: f64,
    /// Diffusion range in mm^2/day.
    pub d_range: (f64, f64),
    /// Proliferation range in 1/day.
    pub rho_range: (f64, f64),
    pub voxel_mm: f64,
    pub days_per_step: f64,
    pub sim_steps: usize,
    pub max_bumps: usize,
    pub bump_sigma: (f64, f64),
    pub bump_amplitude: (f64, f64),
    pub max_retries: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            dims: [32, 32, 32],
            thresholds: Thresholds::default(),
            noise_sigma: 0.1,
            d_range: (0.02, 1.5),
            rho_range: (0.002, 0.2),
            voxel_mm: 4.0,
            days_per_step: 1.0,
            sim_steps: 60,
            max_bumps: 3,
            bump_sigma: (1.5, 3.0),
            bump_amplitude: (0.7, 1.0),
            max_retries: 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseMeta {
    /// Seed requested by the caller.
    pub seed: u64,
    /// Seed of the attempt that produced the case.
    pub attempt_seed: u64,
    pub d: f64,
    pub rho: f64,
    pub thresholds: Thresholds,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthCase {
    pub density: Field3D,
    pub brain: Vec<bool>,
    /// `[4, H, W, D]` standardised channels.
    pub inputs: Tensor,
    /// `[4, H, W, D]` one-hot `(normal, core, whole, enhancing)`.
    pub labels: Tensor,
    pub classes: Vec<u8>,
    pub meta: CaseMeta,
}

impl SynthCase {
    pub fn dims(&self) -> [usize; 3] {
        self.density.dims()
    }
}

/// Ellipsoid filling most of the volume.
pub fn brain_mask(dims: [usize; 3]) -> Vec<bool> {
    let semi = [0.45, 0.40, 0.42];
    let f = Field3D::from_fn(dims, |x, y, z| {
        let p = [x, y, z];
        (0..3)
            .map(|a| {
                let c = (dims[a] as f64 - 1.0) / 2.0;
                ((p[a] as f64 - c) / (semi[a] * dims[a] as f64)).powi(2)
            })
            .sum::<f64>()
    });
    f.data().iter().map(|&r| r <= 1.0).collect()
}

fn seeded_density(
    dims: [usize; 3],
    brain: &[bool],
    config: &SynthConfig,
    rng: &mut impl Rng,
) -> Field3D {
    let n_bumps = rng.gen_range(1..=config.max_bumps.max(1));
    let mut bumps = Vec::with_capacity(n_bumps);
    while bumps.len() < n_bumps {
        // interior positions within the inner half of the ellipsoid
        let p: [f64; 3] = std::array::from_fn(|a| {
            let c = (dims[a] as f64 - 1.0) / 2.0;
            c + rng.gen_range(-0.2..0.2) * dims[a] as f64
        });
        let sigma = rng.gen_range(config.bump_sigma.0..=config.bump_sigma.1);
        let amp = rng.gen_range(config.bump_amplitude.0..=config.bump_amplitude.1);
        bumps.push((p, sigma, amp));
    }
    let mut u = Field3D::from_fn(dims, |x, y, z| {
        let s: f64 = bumps
            .iter()
            .map(|(p, sigma, amp)| {
                let r2 = (x as f64 - p[0]).powi(2)
                    + (y as f64 - p[1]).powi(2)
                    + (z as f64 - p[2]).powi(2);
                amp * (-r2 / (2.0 * sigma * sigma)).exp()
            })
            .sum();
        s.min(1.0)
    });
    for (v, &inside) in u.data_mut().iter_mut().zip(brain) {
        if !inside {
            *v = 0.0;
        }
    }
    u
}

/// Z-scores the non-zero entries of `values` in place.
pub fn standardise_nonzero(values: &mut [f64]) {
    let nz: Vec<usize> = (0..values.len()).filter(|&i| values[i] != 0.0).collect();
    if nz.len() < 2 {
        return;
    }
    let n = nz.len() as f64;
    let mean = nz.iter().map(|&i| values[i]).sum::<f64>() / n;
    let var = nz.iter().map(|&i| (values[i] - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if std == 0.0 {
        return;
    }
    for &i in &nz {
        values[i] = (values[i] - mean) / std;
    }
}

/// Derives labels and pseudo-modalities from a density field. Fails when the
/// whole-tumour region is empty.
pub fn case_from_density(
    density: Field3D,
    brain: Vec<bool>,
    config: &SynthConfig,
    meta: CaseMeta,
    rng: &mut impl Rng,
) -> Result<SynthCase> {
    config.thresholds.validate()?;
    let dims = density.dims();
    let n = density.len();
    let classes: Vec<u8> = density
        .data()
        .iter()
        .map(|&u| config.thresholds.classify(u))
        .collect();
    if classes.iter().all(|&c| c == 0) {
        return Err(Error::EmptyMask("whole tumour"));
    }
    let mut labels = vec![0.0; 4 * n];
    for (i, &c) in classes.iter().enumerate() {
        labels[c as usize * n + i] = 1.0;
    }
    let transforms: [fn(f64) -> f64; 4] = [|u| u, |u| 1.0 - u, |u| u * u, |u| u.max(0.0).sqrt()];
    let mut inputs = vec![0.0; 4 * n];
    for (ch, tf) in transforms.iter().enumerate() {
        let chan = &mut inputs[ch * n..(ch + 1) * n];
        for i in 0..n {
            if brain[i] {
                let noise: f64 = StandardNormal.sample(rng);
                chan[i] = tf(density.data()[i]) + config.noise_sigma * noise;
            }
        }
        standardise_nonzero(chan);
    }
    let shape = vec![4, dims[0], dims[1], dims[2]];
    Ok(SynthCase {
        density,
        brain,
        inputs: Tensor::new(shape.clone(), inputs)?,
        labels: Tensor::new(shape, labels)?,
        classes,
        meta,
    })
}

/// Builds one case; on an empty whole-tumour region the attempt is repeated
/// with a derived seed, up to `max_retries` times.
pub fn generate(seed: u64, config: &SynthConfig) -> Result<SynthCase> {
    config.thresholds.validate()?;
    let dims = config.dims;
    let brain = brain_mask(dims);
    let mut last_err = None;
    for attempt in 0..=config.max_retries {
        let attempt_seed = seed.wrapping_add((attempt as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let mut rng = ChaCha8Rng::seed_from_u64(attempt_seed);
        let d_phys = rng.gen_range(config.d_range.0..=config.d_range.1);
        let rho_phys = rng.gen_range(config.rho_range.0..=config.rho_range.1);
        let (d, rho) = to_voxel_units(d_phys, rho_phys, config.voxel_mm, config.days_per_step);
        let u0 = seeded_density(dims, &brain, config, &mut rng);
        let mask_field = |v: f64| {
            let data = brain.iter().map(|&b| if b { v } else { 0.0 }).collect();
            Field3D::new(dims, 1.0, data)
        };
        let params = GrowthParams {
            d: mask_field(d)?,
            rho: mask_field(rho)?,
            dt: 1.0,
            steps: config.sim_steps,
            snapshot_every: config.sim_steps.max(1),
        };
        let density = simulate(&u0, &params)?
            .final_field
            .with_spacing(config.voxel_mm)?;
        let meta = CaseMeta {
            seed,
            attempt_seed,
            d: d_phys,
            rho: rho_phys,
            thresholds: config.thresholds,
        };
        match case_from_density(density, brain.clone(), config, meta, &mut rng) {
            Ok(case) => return Ok(case),
            Err(e @ Error::EmptyMask(_)) => last_err = Some(e),
            Err(e) => return Err(e),
        }
    }
    Err(last_err.unwrap_or(Error::EmptyMask("whole tumour")))
}

/// Seeds partitioned 7:1:2 into train, validation and test.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<u64>,
    pub val: Vec<u64>,
    pub test: Vec<u64>,
}

pub fn split_seeds(seeds: &[u64]) -> Splits {
    let n = seeds.len();
    let n_train = (n as f64 * 0.7).round() as usize;
    let n_val = ((n as f64 * 0.1).round() as usize).min(n - n_train);
    Splits {
        train: seeds[..n_train].to_vec(),
        val: seeds[n_train..n_train + n_val].to_vec(),
        test: seeds[n_train + n_val..].to_vec(),
    }
}

/// Zeroes the listed input channels.
pub fn drop_channels(inputs: &mut Tensor, channels: &[usize]) -> Result<()> {
    let c = inputs.shape()[0];
    let n = inputs.numel() / c;
    for &ch in channels {
        if ch >= c {
            return Err(Error::invalid(format!(
                "channel {ch} out of range (have {c})"
            )));
        }
        inputs.data_mut()[ch * n..(ch + 1) * n].fill(0.0);
    }
    Ok(())
}
