//! Overlap and boundary-distance metrics over binary region masks.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    dims: [usize; 3],
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(dims: [usize; 3], bits: Vec<bool>) -> Result<Self> {
        if bits.len() != dims.iter().product::<usize>() {
            return Err(Error::ShapeMismatch {
                op: "mask",
                lhs: dims.to_vec(),
                rhs: vec![bits.len()],
            });
        }
        Ok(BinaryMask { dims, bits })
    }

    pub fn empty(dims: [usize; 3]) -> Self {
        BinaryMask {
            dims,
            bits: vec![false; dims.iter().product()],
        }
    }

    pub fn from_fn(dims: [usize; 3], f: impl Fn(usize) -> bool) -> Self {
        BinaryMask {
            dims,
            bits: (0..dims.iter().product()).map(f).collect(),
        }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn set(&mut self, x: usize, y: usize, z: usize, v: bool) {
        let i = (x * self.dims[1] + y) * self.dims[2] + z;
        self.bits[i] = v;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    /// Grid coordinates of every set voxel, in flat order.
    pub fn coords(&self) -> Vec<[usize; 3]> {
        let [_, w, d] = self.dims;
        self.bits
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(|(i, _)| [i / (w * d), (i / d) % w, i % d])
            .collect()
    }

    fn check_dims(&self, other: &BinaryMask, op: &'static str) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.dims.to_vec(),
                rhs: other.dims.to_vec(),
            });
        }
        Ok(())
    }
}

/// `2|A ∩ B| / (|A| + |B|)`, defined as 1 when both masks are empty.
pub fn dice_score(pred: &BinaryMask, truth: &BinaryMask) -> Result<f64> {
    pred.check_dims(truth, "dice_score")?;
    let inter = pred
        .bits
        .iter()
        .zip(&truth.bits)
        .filter(|(&a, &b)| a && b)
        .count();
    let total = pred.count() + truth.count();
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / total as f64)
}

const FAR: f64 = 1e20;

/// One pass of the lower-envelope squared distance transform along a line.
fn edt_line(f: &[f64], out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    let intersect = |q: usize, p: usize| {
        ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64))
    };
    for q in 1..n {
        let mut s = intersect(q, v[k]);
        // z[0] is -inf, so this stops at k == 0 at the latest.
        while s <= z[k] {
            k -= 1;
            s = intersect(q, v[k]);
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate().take(n) {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let dq = q as f64 - v[k] as f64;
        *o = dq * dq + f[v[k]];
    }
}

/// Squared Euclidean distance (in voxels) from every voxel to the nearest set
/// voxel of `mask`. Separable exact transform, one axis at a time.
pub fn squared_distance_transform(mask: &BinaryMask) -> Vec<f64> {
    let [h, w, d] = mask.dims;
    let mut g: Vec<f64> = mask
        .bits
        .iter()
        .map(|&b| if b { 0.0 } else { FAR })
        .collect();
    let longest = h.max(w).max(d);
    let (mut line, mut out) = (vec![0.0; longest], vec![0.0; longest]);
    let (mut v, mut z) = (vec![0usize; longest], vec![0.0; longest + 1]);
    // (extent, stride) per axis
    for (len, stride) in [(d, 1), (w, d), (h, w * d)] {
        for start in 0..g.len() {
            if (start / stride) % len != 0 {
                continue;
            }
            for i in 0..len {
                line[i] = g[start + i * stride];
            }
            edt_line(&line[..len], &mut out[..len], &mut v, &mut z);
            for i in 0..len {
                g[start + i * stride] = out[i];
            }
        }
    }
    g
}

/// Nearest-rank percentile (`ceil(q n)`-th smallest) of unsorted values.
pub fn nearest_rank(values: &mut [f64], q: f64) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).expect("distances are finite"));
    let n = values.len();
    let rank = ((q * n as f64).ceil() as usize).clamp(1, n);
    values[rank - 1]
}

fn directed(from: &BinaryMask, to_edt: &[f64], spacing: f64) -> Vec<f64> {
    from.bits
        .iter()
        .zip(to_edt)
        .filter(|(&b, _)| b)
        .map(|(_, &d2)| d2.sqrt() * spacing)
        .collect()
}

/// Symmetric 95th-percentile Hausdorff distance between the foreground voxel
/// sets of two masks, in units of `spacing`.
pub fn hd95(pred: &BinaryMask, truth: &BinaryMask, spacing: f64) -> Result<f64> {
    pred.check_dims(truth, "hd95")?;
    if pred.is_empty() {
        return Err(Error::EmptyMask("prediction"));
    }
    if truth.is_empty() {
        return Err(Error::EmptyMask("ground truth"));
    }
    let mut ab = directed(pred, &squared_distance_transform(truth), spacing);
    let mut ba = directed(truth, &squared_distance_transform(pred), spacing);
    Ok(nearest_rank(&mut ab, 0.95).max(nearest_rank(&mut ba, 0.95)))
}

/// Classic (maximum) Hausdorff distance.
pub fn hausdorff(pred: &BinaryMask, truth: &BinaryMask, spacing: f64) -> Result<f64> {
    pred.check_dims(truth, "hausdorff")?;
    if pred.is_empty() || truth.is_empty() {
        return Err(Error::EmptyMask("hausdorff operand"));
    }
    let ab = directed(pred, &squared_distance_transform(truth), spacing);
    let ba = directed(truth, &squared_distance_transform(pred), spacing);
    Ok(ab.into_iter().chain(ba).fold(0.0, f64::max))
}
