//! Scalar volumes, the 7-point Laplacian stencil and boundary-face derivatives.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Scalar field on an `H x W x D` grid, row-major with `z` fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct Field3D {
    dims: [usize; 3],
    spacing: f64,
    data: Vec<f64>,
}

impl Field3D {
    pub fn new(dims: [usize; 3], spacing: f64, data: Vec<f64>) -> Result<Self> {
        if dims.iter().any(|&n| n == 0) {
            return Err(Error::invalid(format!(
                "field extents must be positive, got {dims:?}"
            )));
        }
        if !(spacing > 0.0) || !spacing.is_finite() {
            return Err(Error::invalid(format!(
                "spacing must be positive, got {spacing}"
            )));
        }
        if data.len() != dims.iter().product::<usize>() {
            return Err(Error::ShapeMismatch {
                op: "field",
                lhs: dims.to_vec(),
                rhs: vec![data.len()],
            });
        }
        Ok(Field3D {
            dims,
            spacing,
            data,
        })
    }

    pub fn constant(dims: [usize; 3], value: f64) -> Self {
        Field3D {
            dims,
            spacing: 1.0,
            data: vec![value; dims.iter().product()],
        }
    }

    pub fn zeros(dims: [usize; 3]) -> Self {
        Self::constant(dims, 0.0)
    }

    pub fn from_fn(dims: [usize; 3], f: impl Fn(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(dims.iter().product());
        for x in 0..dims[0] {
            for y in 0..dims[1] {
                for z in 0..dims[2] {
                    data.push(f(x, y, z));
                }
            }
        }
        Field3D {
            dims,
            spacing: 1.0,
            data,
        }
    }

    pub fn with_spacing(mut self, spacing: f64) -> Result<Self> {
        if !(spacing > 0.0) || !spacing.is_finite() {
            return Err(Error::invalid(format!(
                "spacing must be positive, got {spacing}"
            )));
        }
        self.spacing = spacing;
        Ok(self)
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (x * self.dims[1] + y) * self.dims[2] + z
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f64 {
        self.data[self.index(x, y, z)]
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Field3D {
            dims: self.dims,
            spacing: self.spacing,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// `[1, H, W, D]` tensor view.
    pub fn to_tensor(&self) -> Tensor {
        let [h, w, d] = self.dims;
        Tensor::new(vec![1, h, w, d], self.data.clone()).expect("field length matches dims")
    }

    /// Builds a field from any tensor holding exactly `H*W*D` values.
    pub fn from_tensor(t: &Tensor, dims: [usize; 3], spacing: f64) -> Result<Self> {
        Field3D::new(dims, spacing, t.data().to_vec())
    }

    pub fn first_non_finite(&self) -> Option<([usize; 3], f64)> {
        let i = self.data.iter().position(|v| !v.is_finite())?;
        let [_, w, d] = self.dims;
        Some(([i / (w * d), (i / d) % w, i % d], self.data[i]))
    }

    pub(crate) fn require_same_dims(&self, other: &Field3D, op: &'static str) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.dims.to_vec(),
                rhs: other.dims.to_vec(),
            });
        }
        Ok(())
    }

    pub(crate) fn require_min_extent(&self, op: &'static str) -> Result<()> {
        if self.dims.iter().any(|&n| n < 2) {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.dims.to_vec(),
                rhs: vec![2, 2, 2],
            });
        }
        Ok(())
    }
}

/// Seven-point discrete Laplacian as a 3x3x3 weight table indexed `[x][y][z]`.
pub const LAPLACIAN_KERNEL: [[[f64; 3]; 3]; 3] = [
    [[0.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 0.0]],
    [[0.0, 1.0, 0.0], [1.0, -6.0, 1.0], [0.0, 1.0, 0.0]],
    [[0.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 0.0]],
];

/// The kernel as a `[1, 1, 3, 3, 3]` convolution weight, scaled by `1/h^2`.
pub fn laplacian_weight(spacing: f64) -> Tensor {
    let inv_h2 = 1.0 / (spacing * spacing);
    let data = LAPLACIAN_KERNEL
        .iter()
        .flatten()
        .flatten()
        .map(|&w| w * inv_h2)
        .collect();
    Tensor::new(vec![1, 1, 3, 3, 3], data).expect("27 weights")
}

/// Discrete Laplacian with mirrored (zero normal derivative) boundaries.
pub fn laplacian(field: &Field3D) -> Result<Field3D> {
    field.require_min_extent("laplacian")?;
    let [h, w, d] = field.dims;
    let inv_h2 = 1.0 / (field.spacing * field.spacing);
    let u = &field.data;
    let mut out = vec![0.0; u.len()];
    let at = |x: usize, y: usize, z: usize| u[(x * w + y) * d + z];
    for x in 0..h {
        let (xm, xp) = (x.saturating_sub(1), (x + 1).min(h - 1));
        for y in 0..w {
            let (ym, yp) = (y.saturating_sub(1), (y + 1).min(w - 1));
            for z in 0..d {
                let (zm, zp) = (z.saturating_sub(1), (z + 1).min(d - 1));
                let c = at(x, y, z);
                let s = at(xm, y, z)
                    + at(xp, y, z)
                    + at(x, ym, z)
                    + at(x, yp, z)
                    + at(x, y, zm)
                    + at(x, y, zp)
                    - 6.0 * c;
                out[(x * w + y) * d + z] = s * inv_h2;
            }
        }
    }
    Ok(Field3D {
        dims: field.dims,
        spacing: field.spacing,
        data: out,
    })
}

/// One-sided outward normal differences on the six faces of a volume.
///
/// Face arrays are row-major over the two tangential axes: x-faces are
/// `(W, D)`, y-faces `(H, D)`, z-faces `(H, W)`.
#[derive(Clone, Debug, PartialEq)]
pub struct FaceDerivatives {
    pub x_lo: Vec<f64>,
    pub x_hi: Vec<f64>,
    pub y_lo: Vec<f64>,
    pub y_hi: Vec<f64>,
    pub z_lo: Vec<f64>,
    pub z_hi: Vec<f64>,
}

impl FaceDerivatives {
    pub fn faces(&self) -> [&[f64]; 6] {
        [
            &self.x_lo, &self.x_hi, &self.y_lo, &self.y_hi, &self.z_lo, &self.z_hi,
        ]
    }
}

/// The six boundary faces in the order `x_lo, x_hi, y_lo, y_hi, z_lo, z_hi`.
/// Each entry lists `(boundary_index, inward_neighbour_index)` flat voxel
/// pairs and the face area used to normalise it.
pub(crate) fn face_pairs(dims: [usize; 3]) -> Vec<(Vec<(usize, usize)>, usize)> {
    let [h, w, d] = dims;
    let idx = |x: usize, y: usize, z: usize| (x * w + y) * d + z;
    let mut faces = Vec::with_capacity(6);
    for (b, n) in [(0, 1), (h - 1, h - 2)] {
        let pairs = (0..w)
            .flat_map(|y| (0..d).map(move |z| (y, z)))
            .map(|(y, z)| (idx(b, y, z), idx(n, y, z)))
            .collect();
        faces.push((pairs, w * d));
    }
    for (b, n) in [(0, 1), (w - 1, w - 2)] {
        let pairs = (0..h)
            .flat_map(|x| (0..d).map(move |z| (x, z)))
            .map(|(x, z)| (idx(x, b, z), idx(x, n, z)))
            .collect();
        faces.push((pairs, h * d));
    }
    for (b, n) in [(0, 1), (d - 1, d - 2)] {
        let pairs = (0..h)
            .flat_map(|x| (0..w).map(move |y| (x, y)))
            .map(|(x, y)| (idx(x, y, b), idx(x, y, n)))
            .collect();
        faces.push((pairs, h * w));
    }
    faces
}

pub fn face_derivatives(field: &Field3D) -> Result<FaceDerivatives> {
    field.require_min_extent("face_derivatives")?;
    let h = field.spacing;
    let mut faces = face_pairs(field.dims).into_iter().map(|(pairs, _)| {
        pairs
            .iter()
            .map(|&(b, n)| (field.data[b] - field.data[n]) / h)
            .collect()
    });
    let mut next = || faces.next().expect("six faces");
    Ok(FaceDerivatives {
        x_lo: next(),
        x_hi: next(),
        y_lo: next(),
        y_hi: next(),
        z_lo: next(),
        z_hi: next(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernel_table_is_seven_point() {
        let mut total = 0.0;
        for x in 0..3 {
            for y in 0..3 {
                for z in 0..3 {
                    let off = [x, y, z].iter().filter(|&&c| c != 1).count();
                    let expected = match off {
                        0 => -6.0,
                        1 => 1.0,
                        _ => 0.0,
                    };
                    assert_eq!(LAPLACIAN_KERNEL[x][y][z], expected);
                    // axis permutations and reflections
                    assert_eq!(LAPLACIAN_KERNEL[x][y][z], LAPLACIAN_KERNEL[y][z][x]);
                    assert_eq!(LAPLACIAN_KERNEL[x][y][z], LAPLACIAN_KERNEL[2 - x][y][2 - z]);
                    total += LAPLACIAN_KERNEL[x][y][z];
                }
            }
        }
        assert_eq!(total, 0.0);
    }

    #[test]
    fn constant_field_has_zero_laplacian() {
        let f = Field3D::constant([4, 5, 6], 3.5);
        assert!(laplacian(&f).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn linear_ramp_interior_is_zero() {
        let f = Field3D::from_fn([6, 5, 4], |x, _, _| x as f64);
        let l = laplacian(&f).unwrap();
        for x in 1..5 {
            for y in 0..5 {
                for z in 0..4 {
                    assert_eq!(l.get(x, y, z), 0.0);
                }
            }
        }
    }

    #[test]
    fn quadratic_profile_interior_is_two() {
        let f = Field3D::from_fn([7, 3, 3], |x, _, _| (x * x) as f64);
        let l = laplacian(&f).unwrap();
        for x in 1..6 {
            assert_eq!(l.get(x, 1, 1), 2.0);
        }
    }

    #[test]
    fn spacing_scales_by_inverse_square() {
        let f = Field3D::from_fn([7, 3, 3], |x, _, _| (x * x) as f64)
            .with_spacing(0.5)
            .unwrap();
        assert_eq!(laplacian(&f).unwrap().get(3, 1, 1), 8.0);
    }

    #[test]
    fn rejects_thin_axis() {
        let f = Field3D::constant([4, 1, 4], 0.0);
        assert!(laplacian(&f).is_err());
        assert!(face_derivatives(&f).is_err());
    }

    #[test]
    fn ramp_face_derivatives() {
        let f = Field3D::from_fn([4, 4, 4], |x, _, _| x as f64);
        let fd = face_derivatives(&f).unwrap();
        assert!(fd.x_lo.iter().all(|&v| v == -1.0));
        assert!(fd.x_hi.iter().all(|&v| v == 1.0));
        for face in [&fd.y_lo, &fd.y_hi, &fd.z_lo, &fd.z_hi] {
            assert!(face.iter().all(|&v| v == 0.0));
        }
        assert_eq!(fd.x_lo.len(), 16);
    }

    #[test]
    fn face_shapes() {
        let f = Field3D::constant([3, 4, 5], 1.0);
        let fd = face_derivatives(&f).unwrap();
        let lens: Vec<usize> = fd.faces().iter().map(|f| f.len()).collect();
        assert_eq!(lens, vec![20, 20, 15, 15, 12, 12]);
        assert!(fd.faces().iter().all(|f| f.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn face_symmetric_field_has_zero_face_derivatives() {
        // Mirror-symmetric about every mid-plane and flat across each boundary face.
        let p = [1.0, 1.0, 3.0, 3.0, 1.0, 1.0];
        let f = Field3D::from_fn([6, 6, 6], |x, y, z| p[x] * p[y] + p[z]);
        let fd = face_derivatives(&f).unwrap();
        assert!(fd.faces().iter().all(|f| f.iter().all(|&v| v == 0.0)));
    }
}
