//! Dense row-major `f64` tensors.
//!
//! A [`Tensor`] is a plain value. It only takes part in differentiation once it
//! has been placed on a [`Tape`](crate::tape::Tape) as a leaf, which hands back a
//! [`Var`](crate::tape::Var).

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&s| s == 0) {
            return Err(Error::invalid(format!(
                "tensor extents must be positive, got {shape:?}"
            )));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::ShapeMismatch {
                op: "tensor",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert!(self.is_scalar());
        self.data[0]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape,
                rhs: shape.to_vec(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Padding rule used by [`conv3d`](crate::tape::Tape::conv3d) for neighbours
/// that fall outside the volume.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Boundary {
    /// Out-of-range neighbours read as zero.
    Zero,
    /// Half-sample mirror: the ghost voxel beyond a face repeats the face voxel,
    /// giving a zero normal derivative.
    Reflect,
}

/// Layout of a volume surrounded by a one-voxel ghost shell.
///
/// In the padded layout every 3x3x3 tap is a constant linear offset, so a
/// stencil pass over the interior becomes a handful of long contiguous loops.
/// The working range `start..start + span` runs from the first to the last
/// interior voxel and also visits the ghost voxels in between.
#[derive(Clone, Copy, Debug)]
pub(crate) struct PadGeom {
    pub dims: [usize; 3],
    pub padded: [usize; 3],
    pub len: usize,
    pub start: usize,
    pub span: usize,
}

impl PadGeom {
    pub fn new(dims: [usize; 3]) -> Self {
        let padded = [dims[0] + 2, dims[1] + 2, dims[2] + 2];
        let at = |x: usize, y: usize, z: usize| (x * padded[1] + y) * padded[2] + z;
        let start = at(1, 1, 1);
        PadGeom {
            dims,
            padded,
            len: padded.iter().product(),
            start,
            span: at(dims[0], dims[1], dims[2]) - start + 1,
        }
    }

    /// Linear offset of tap `(kx, ky, kz)`, each in `0..3`.
    #[inline]
    pub fn tap_offset(&self, tap: usize) -> isize {
        let (kx, ky, kz) = (tap / 9, (tap / 3) % 3, tap % 3);
        let [_, pw, pd] = self.padded;
        ((kx as isize - 1) * pw as isize + (ky as isize - 1)) * pd as isize + (kz as isize - 1)
    }

    /// Interior voxel for padded position `(px, py, pz)`, clamping ghosts onto
    /// the nearest face voxel.
    #[inline]
    fn clamped(&self, px: usize, py: usize, pz: usize) -> (usize, bool) {
        let [h, w, d] = self.dims;
        let c = |p: usize, n: usize| p.clamp(1, n) - 1;
        let inside = (1..=h).contains(&px) && (1..=w).contains(&py) && (1..=d).contains(&pz);
        ((c(px, h) * w + c(py, w)) * d + c(pz, d), inside)
    }

    fn for_each_padded(&self, mut f: impl FnMut(usize, usize, bool)) {
        let [ph, pw, pd] = self.padded;
        let mut q = 0;
        for px in 0..ph {
            for py in 0..pw {
                for pz in 0..pd {
                    let (i, inside) = self.clamped(px, py, pz);
                    f(q, i, inside);
                    q += 1;
                }
            }
        }
    }

    /// Writes one channel into padded layout. Ghosts repeat the face voxel
    /// under `Reflect` and are zero under `Zero`.
    pub fn pad(&self, src: &[f64], boundary: Boundary, dst: &mut [f64]) {
        self.for_each_padded(|q, i, inside| {
            dst[q] = if inside || boundary == Boundary::Reflect {
                src[i]
            } else {
                0.0
            };
        });
    }

    /// Adjoint of [`pad`](Self::pad): adds padded values back onto the
    /// interior voxels they were read from.
    pub fn fold(&self, padded: &[f64], boundary: Boundary, dst: &mut [f64]) {
        self.for_each_padded(|q, i, inside| {
            if inside || boundary == Boundary::Reflect {
                dst[i] += padded[q];
            }
        });
    }

    /// Copies the interior of a padded channel.
    pub fn unpad(&self, padded: &[f64], dst: &mut [f64]) {
        let [h, w, d] = self.dims;
        let [_, pw, pd] = self.padded;
        for x in 0..h {
            for y in 0..w {
                let q = ((x + 1) * pw + y + 1) * pd + 1;
                let i = (x * w + y) * d;
                dst[i..i + d].copy_from_slice(&padded[q..q + d]);
            }
        }
    }
}
