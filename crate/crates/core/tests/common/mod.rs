#![allow(dead_code)]

use biophys_core::metrics::BinaryMask;
use rand::Rng;

/// Nonempty mask with at most `max_voxels` set voxels at random positions.
pub fn random_mask(dims: [usize; 3], max_voxels: usize, rng: &mut impl Rng) -> BinaryMask {
    let mut m = BinaryMask::empty(dims);
    let k = rng.gen_range(1..=max_voxels);
    for _ in 0..k {
        m.set(
            rng.gen_range(0..dims[0]),
            rng.gen_range(0..dims[1]),
            rng.gen_range(0..dims[2]),
            true,
        );
    }
    m
}

fn all_pairs_directed(a: &BinaryMask, b: &BinaryMask, spacing: f64) -> Vec<f64> {
    let pb = b.coords();
    a.coords()
        .iter()
        .map(|p| {
            let best = pb
                .iter()
                .map(|q| {
                    (0..3)
                        .map(|i| (p[i] as f64 - q[i] as f64).powi(2))
                        .sum::<f64>()
                })
                .fold(f64::INFINITY, f64::min);
            best.sqrt() * spacing
        })
        .collect()
}

fn percentile_95(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let rank = (0.95 * v.len() as f64).ceil() as usize;
    v[rank.max(1) - 1]
}

/// Exhaustive O(n m) symmetric 95th-percentile Hausdorff distance.
pub fn brute_hd95(a: &BinaryMask, b: &BinaryMask, spacing: f64) -> f64 {
    percentile_95(all_pairs_directed(a, b, spacing))
        .max(percentile_95(all_pairs_directed(b, a, spacing)))
}

pub fn brute_hausdorff(a: &BinaryMask, b: &BinaryMask, spacing: f64) -> f64 {
    all_pairs_directed(a, b, spacing)
        .into_iter()
        .chain(all_pairs_directed(b, a, spacing))
        .fold(0.0, f64::max)
}
