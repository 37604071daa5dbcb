//! Explicit-Euler solver for logistic reaction-diffusion with zero-flux
//! boundaries:
//!
//! ```text
//! u' = u + dt * (d * lap(u) + rho * u * (1 - u))
//! ```
//!
//! Spatially varying `d` multiplies the Laplacian voxelwise rather than being
//! taken inside the divergence.

use crate::error::{Error, Result};
use crate::field::{laplacian, Field3D};

#[derive(Clone, Debug)]
pub struct GrowthParams {
    pub d: Field3D,
    pub rho: Field3D,
    pub dt: f64,
    pub steps: usize,
    pub snapshot_every: usize,
}

impl GrowthParams {
    pub fn uniform(dims: [usize; 3], d: f64, rho: f64, dt: f64, steps: usize) -> Self {
        GrowthParams {
            d: Field3D::constant(dims, d),
            rho: Field3D::constant(dims, rho),
            dt,
            steps,
            snapshot_every: steps.max(1),
        }
    }

    pub fn validate(&self, u: &Field3D) -> Result<()> {
        u.require_same_dims(&self.d, "growth d")?;
        u.require_same_dims(&self.rho, "growth rho")?;
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return Err(Error::invalid(format!(
                "dt must be positive, got {}",
                self.dt
            )));
        }
        if self.snapshot_every == 0 {
            return Err(Error::invalid("snapshot_every must be positive"));
        }
        if self.d.min() < 0.0 || self.rho.min() < 0.0 {
            return Err(Error::invalid(
                "diffusion and proliferation fields must be non-negative",
            ));
        }
        let bound = cfl_bound(&self.d, u.spacing());
        if self.dt >= bound {
            return Err(Error::Unstable {
                dt: self.dt,
                bound,
                d_max: self.d.max(),
            });
        }
        Ok(())
    }
}

/// Largest stable explicit step, `h^2 / (6 max d)`; infinite when `d == 0`.
pub fn cfl_bound(d: &Field3D, spacing: f64) -> f64 {
    let d_max = d.max();
    if d_max <= 0.0 {
        f64::INFINITY
    } else {
        spacing * spacing / (6.0 * d_max)
    }
}

/// Converts rates quoted in mm^2/day and 1/day to voxel^2/step and 1/step.
pub fn to_voxel_units(
    d_mm2_per_day: f64,
    rho_per_day: f64,
    voxel_mm: f64,
    days_per_step: f64,
) -> (f64, f64) {
    (
        d_mm2_per_day * days_per_step / (voxel_mm * voxel_mm),
        rho_per_day * days_per_step,
    )
}

/// Right-hand side `d * lap(u) + rho * u * (1 - u)`.
pub fn rate(u: &Field3D, d: &Field3D, rho: &Field3D) -> Result<Field3D> {
    let mut lap = laplacian(u)?;
    for (((l, &ui), &di), &ri) in lap
        .data_mut()
        .iter_mut()
        .zip(u.data())
        .zip(d.data())
        .zip(rho.data())
    {
        *l = di * *l + ri * ui * (1.0 - ui);
    }
    Ok(lap)
}

pub fn step(u: &Field3D, params: &GrowthParams) -> Result<Field3D> {
    if let Some((at, value)) = u.first_non_finite() {
        return Err(Error::NonFinite {
            location: format!("input voxel {at:?}"),
            value,
        });
    }
    params.validate(u)?;
    euler_step(u, params)
}

fn euler_step(u: &Field3D, params: &GrowthParams) -> Result<Field3D> {
    let mut next = rate(u, &params.d, &params.rho)?;
    for (n, &ui) in next.data_mut().iter_mut().zip(u.data()) {
        *n = ui + params.dt * *n;
    }
    if let Some((at, value)) = next.first_non_finite() {
        return Err(Error::NonFinite {
            location: format!("voxel {at:?}"),
            value,
        });
    }
    Ok(next)
}

#[derive(Clone, Debug)]
pub struct SimResult {
    /// `(time, field)` pairs starting at `t = 0`.
    pub snapshots: Vec<(f64, Field3D)>,
    pub final_field: Field3D,
}

pub fn simulate(u0: &Field3D, params: &GrowthParams) -> Result<SimResult> {
    params.validate(u0)?;
    if let Some((at, value)) = u0.first_non_finite() {
        return Err(Error::NonFinite {
            location: format!("initial voxel {at:?}"),
            value,
        });
    }
    if u0.min() < 0.0 || u0.max() > 1.0 {
        return Err(Error::invalid("initial density must lie in [0, 1]"));
    }
    let mut u = u0.clone();
    let mut snapshots = vec![(0.0, u.clone())];
    for k in 1..=params.steps {
        u = euler_step(&u, params)?;
        if k % params.snapshot_every == 0 {
            snapshots.push((k as f64 * params.dt, u.clone()));
        }
    }
    Ok(SimResult {
        snapshots,
        final_field: u,
    })
}

/// Closed-form logistic trajectory `1 / (1 + (1-u0)/u0 * exp(-rho t))`.
pub fn logistic(u0: f64, rho: f64, t: f64) -> f64 {
    1.0 / (1.0 + (1.0 - u0) / u0 * (-rho * t).exp())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_and_one_are_fixed_points() {
        let dims = [5, 5, 5];
        let p = GrowthParams::uniform(dims, 0.7, 0.2, 0.1, 1);
        let z = step(&Field3D::zeros(dims), &p).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
        let o = step(&Field3D::constant(dims, 1.0), &p).unwrap();
        assert!(o.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn logistic_without_diffusion() {
        let dims = [3, 3, 3];
        let p = GrowthParams::uniform(dims, 0.0, 0.2, 1e-3, 10_000);
        let r = simulate(&Field3D::constant(dims, 0.1), &p).unwrap();
        let exact = logistic(0.1, 0.2, 10.0);
        assert!((exact - 0.450_853_060_379_283_8).abs() < 1e-12);
        for &v in r.final_field.data() {
            assert!((v - exact).abs() < 1e-4, "{v} vs {exact}");
        }
    }

    #[test]
    fn cfl_values() {
        let dims = [2, 2, 2];
        assert!((cfl_bound(&Field3D::constant(dims, 1.5), 1.0) - 1.0 / 9.0).abs() < 1e-15);
        assert_eq!(cfl_bound(&Field3D::zeros(dims), 1.0), f64::INFINITY);
        assert!(
            (cfl_bound(&Field3D::constant(dims, 0.02), 1.0) - 8.333_333_333_333_334).abs() < 1e-12
        );
    }

    #[test]
    fn unstable_step_rejected() {
        let dims = [4, 4, 4];
        let p = GrowthParams::uniform(dims, 1.5, 0.0, 0.2, 1);
        match simulate(&Field3D::zeros(dims), &p) {
            Err(Error::Unstable { bound, d_max, .. }) => {
                assert_eq!(d_max, 1.5);
                assert!((bound - 1.0 / 9.0).abs() < 1e-15);
            }
            other => panic!("expected instability error, got {other:?}"),
        }
    }

    #[test]
    fn non_finite_input_names_voxel() {
        let dims = [3, 3, 3];
        let mut u = Field3D::zeros(dims);
        let i = u.index(1, 2, 0);
        u.data_mut()[i] = f64::NAN;
        let p = GrowthParams::uniform(dims, 0.1, 0.1, 0.1, 1);
        let err = step(&u, &p).unwrap_err().to_string();
        assert!(err.contains("[1, 2, 0]"), "{err}");
    }

    #[test]
    fn snapshots_strictly_increase() {
        let dims = [4, 4, 4];
        let mut p = GrowthParams::uniform(dims, 0.2, 0.1, 0.1, 10);
        p.snapshot_every = 3;
        let r = simulate(&Field3D::constant(dims, 0.3), &p).unwrap();
        let times: Vec<f64> = r.snapshots.iter().map(|s| s.0).collect();
        assert_eq!(times.len(), 4);
        assert!(times.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn point_source_spreads_and_max_decays() {
        let dims = [9, 9, 9];
        let mut u = Field3D::zeros(dims);
        let c = u.index(4, 4, 4);
        u.data_mut()[c] = 1.0;
        let p = GrowthParams::uniform(dims, 0.5, 0.0, 0.1, 1);
        let mut prev_max = u.max();
        let mut prev_support = 1;
        for _ in 0..20 {
            u = step(&u, &p).unwrap();
            let support = u.data().iter().filter(|&&v| v > 0.0).count();
            assert!(u.max() < prev_max);
            assert!(support >= prev_support);
            prev_max = u.max();
            prev_support = support;
        }
    }

    #[test]
    fn unit_conversion() {
        let (d, rho) = to_voxel_units(1.5, 0.2, 2.0, 0.5);
        assert_eq!(d, 0.1875);
        assert_eq!(rho, 0.1);
    }
}
