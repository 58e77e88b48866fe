//! Dense volumetric grids with voxel-to-world affine geometry.
//!
//! A [`Volume`] stores scalars in `(d, h, w)` row-major order together with a
//! 4x4 homogeneous affine mapping voxel indices (voxel centers) to world
//! coordinates in millimetres. Sampling outside the grid returns 0, matching
//! the background of field-of-view-masked scans.

use alloc::vec;
use alloc::vec::Vec;
use nalgebra::{Matrix3, Matrix4, Vector4};
// Resolves float intrinsics in no_std builds; shadowed by inherent methods otherwise.
#[allow(unused_imports)]
use num_traits::Float;

/// Smallest upper-left 3x3 determinant magnitude treated as invertible.
pub const AFFINE_DET_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum VolumeError {
    #[error("affine matrix is singular (|det| <= {AFFINE_DET_EPS:e})")]
    SingularAffine,
    #[error("data length {got} does not match dims {dims:?} ({want} voxels)")]
    DataLength {
        dims: [usize; 3],
        want: usize,
        got: usize,
    },
    #[error("volume has no voxels")]
    Empty,
    #[error("volume contains a value that is neither 0 nor 1")]
    NotBinary,
}

/// Dense 3-D scalar grid with a voxel-index-to-world affine.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    dims: [usize; 3],
    affine: Matrix4<f64>,
    data: Vec<f64>,
}

impl Volume {
    pub fn new(dims: [usize; 3], affine: Matrix4<f64>, data: Vec<f64>) -> Result<Self, VolumeError> {
        let want = dims[0] * dims[1] * dims[2];
        if want == 0 {
            return Err(VolumeError::Empty);
        }
        if data.len() != want {
            return Err(VolumeError::DataLength {
                dims,
                want,
                got: data.len(),
            });
        }
        let linear: Matrix3<f64> = affine.fixed_view::<3, 3>(0, 0).into_owned();
        if linear.determinant().abs() <= AFFINE_DET_EPS {
            return Err(VolumeError::SingularAffine);
        }
        Ok(Self { dims, affine, data })
    }

    pub fn zeros(dims: [usize; 3], affine: Matrix4<f64>) -> Result<Self, VolumeError> {
        let n = dims[0] * dims[1] * dims[2];
        Self::new(dims, affine, vec![0.0; n])
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn affine(&self) -> &Matrix4<f64> {
        &self.affine
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
    pub fn index(&self, d: usize, h: usize, w: usize) -> usize {
        (d * self.dims[1] + h) * self.dims[2] + w
    }

    #[inline]
    pub fn at(&self, d: usize, h: usize, w: usize) -> f64 {
        self.data[self.index(d, h, w)]
    }

    #[inline]
    pub fn set(&mut self, d: usize, h: usize, w: usize, v: f64) {
        let i = self.index(d, h, w);
        self.data[i] = v;
    }

    /// Maps a (possibly fractional) voxel index to world millimetres.
    pub fn voxel_to_world(&self, idx: [f64; 3]) -> [f64; 3] {
        let p = self.affine * Vector4::new(idx[0], idx[1], idx[2], 1.0);
        [p.x, p.y, p.z]
    }

    /// Maps a world point back to fractional voxel indices.
    pub fn world_to_voxel(&self, pt: [f64; 3]) -> Result<[f64; 3], VolumeError> {
        let inv = self
            .affine
            .try_inverse()
            .ok_or(VolumeError::SingularAffine)?;
        let p = inv * Vector4::new(pt[0], pt[1], pt[2], 1.0);
        Ok([p.x, p.y, p.z])
    }

    #[inline]
    fn in_field(&self, coord: [f64; 3]) -> bool {
        coord
            .iter()
            .zip(self.dims.iter())
            .all(|(&c, &n)| c >= 0.0 && c <= (n - 1) as f64)
    }

    /// Trilinear interpolation at a fractional voxel coordinate.
    ///
    /// Coordinates outside `[0, dim-1]` on any axis return 0.
    pub fn sample_trilinear(&self, coord: [f64; 3]) -> f64 {
        if !self.in_field(coord) {
            return 0.0;
        }
        let mut lo = [0usize; 3];
        let mut hi = [0usize; 3];
        let mut frac = [0.0f64; 3];
        for a in 0..3 {
            let f = coord[a].floor();
            let i = f as usize;
            lo[a] = i;
            hi[a] = (i + 1).min(self.dims[a] - 1);
            frac[a] = coord[a] - f;
        }
        let mut acc = 0.0;
        for (cd, d) in [(1.0 - frac[0], lo[0]), (frac[0], hi[0])] {
            for (ch, h) in [(1.0 - frac[1], lo[1]), (frac[1], hi[1])] {
                for (cw, w) in [(1.0 - frac[2], lo[2]), (frac[2], hi[2])] {
                    acc += cd * ch * cw * self.at(d, h, w);
                }
            }
        }
        acc
    }

    /// Nearest-neighbor sampling; ties round toward the lower index.
    ///
    /// Preserves discrete label values, so it is the required mode for masks.
    pub fn sample_nearest(&self, coord: [f64; 3]) -> f64 {
        if !self.in_field(coord) {
            return 0.0;
        }
        let mut idx = [0usize; 3];
        for a in 0..3 {
            let f = coord[a].floor();
            let lo = f as usize;
            let frac = coord[a] - f;
            idx[a] = if frac <= 0.5 {
                lo
            } else {
                (lo + 1).min(self.dims[a] - 1)
            };
        }
        self.at(idx[0], idx[1], idx[2])
    }

    /// Rescales values to `[0, 1]`; a constant volume maps to all zeros.
    pub fn normalize_minmax(&self) -> Volume {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for &v in &self.data {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        let data = if hi > lo {
            let span = hi - lo;
            self.data.iter().map(|&v| (v - lo) / span).collect()
        } else {
            vec![0.0; self.data.len()]
        };
        Volume {
            dims: self.dims,
            affine: self.affine,
            data,
        }
    }

    /// Reinterprets this volume as a binary mask; every value must be 0 or 1.
    pub fn to_mask(&self) -> Result<BinaryMask, VolumeError> {
        let mut data = Vec::with_capacity(self.data.len());
        for &v in &self.data {
            if v == 0.0 {
                data.push(0);
            } else if v == 1.0 {
                data.push(1);
            } else {
                return Err(VolumeError::NotBinary);
            }
        }
        Ok(BinaryMask {
            dims: self.dims,
            data,
        })
    }
}

/// Binary {0,1} mask over the same grid layout as [`Volume`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    dims: [usize; 3],
    data: Vec<u8>,
}

impl BinaryMask {
    pub fn new(dims: [usize; 3], data: Vec<u8>) -> Result<Self, VolumeError> {
        let want = dims[0] * dims[1] * dims[2];
        if want == 0 {
            return Err(VolumeError::Empty);
        }
        if data.len() != want {
            return Err(VolumeError::DataLength {
                dims,
                want,
                got: data.len(),
            });
        }
        if data.iter().any(|&v| v > 1) {
            return Err(VolumeError::NotBinary);
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: [usize; 3]) -> Result<Self, VolumeError> {
        Self::new(dims, vec![0; dims[0] * dims[1] * dims[2]])
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    #[inline]
    pub fn index(&self, d: usize, h: usize, w: usize) -> usize {
        (d * self.dims[1] + h) * self.dims[2] + w
    }

    #[inline]
    pub fn at(&self, d: usize, h: usize, w: usize) -> u8 {
        self.data[self.index(d, h, w)]
    }

    #[inline]
    pub fn set(&mut self, d: usize, h: usize, w: usize, v: u8) {
        let i = self.index(d, h, w);
        self.data[i] = v;
    }

    /// Lifts the mask to a {0.0, 1.0} volume on the given affine.
    pub fn to_volume(&self, affine: Matrix4<f64>) -> Result<Volume, VolumeError> {
        Volume::new(
            self.dims,
            affine,
            self.data.iter().map(|&v| v as f64).collect(),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Matrix4;

    fn ident_vol(dims: [usize; 3], data: Vec<f64>) -> Volume {
        Volume::new(dims, Matrix4::identity(), data).unwrap()
    }

    #[test]
    fn voxel_to_world_identity() {
        let v = ident_vol([8, 8, 8], vec![0.0; 512]);
        assert_eq!(v.voxel_to_world([3.0, 4.0, 5.0]), [3.0, 4.0, 5.0]);
    }

    #[test]
    fn voxel_to_world_scale_translate() {
        // diag(2,2,2) with translation (1,0,0): (1,1,1) -> (3,2,2)
        let mut a = Matrix4::identity() * 2.0;
        a[(3, 3)] = 1.0;
        a[(0, 3)] = 1.0;
        let v = Volume::new([4, 4, 4], a, vec![0.0; 64]).unwrap();
        assert_eq!(v.voxel_to_world([1.0, 1.0, 1.0]), [3.0, 2.0, 2.0]);
    }

    #[test]
    fn voxel_to_world_rotation_about_z() {
        // 90 deg about the third axis: (1,0,0) -> (0,1,0)
        let mut a = Matrix4::identity();
        a[(0, 0)] = 0.0;
        a[(0, 1)] = -1.0;
        a[(1, 0)] = 1.0;
        a[(1, 1)] = 0.0;
        let v = Volume::new([4, 4, 4], a, vec![0.0; 64]).unwrap();
        let p = v.voxel_to_world([1.0, 0.0, 0.0]);
        assert!((p[0] - 0.0).abs() < 1e-15);
        assert!((p[1] - 1.0).abs() < 1e-15);
        assert!((p[2] - 0.0).abs() < 1e-15);
    }

    #[test]
    fn world_to_voxel_inverts() {
        let mut a = Matrix4::identity() * 2.0;
        a[(3, 3)] = 1.0;
        a[(0, 3)] = 1.0;
        let v = Volume::new([4, 4, 4], a, vec![0.0; 64]).unwrap();
        let idx = v.world_to_voxel([3.0, 2.0, 2.0]).unwrap();
        for (got, want) in idx.iter().zip([1.0, 1.0, 1.0]) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn singular_affine_rejected() {
        let mut a = Matrix4::identity();
        a[(2, 2)] = 0.0;
        assert_eq!(
            Volume::new([2, 2, 2], a, vec![0.0; 8]).unwrap_err(),
            VolumeError::SingularAffine
        );
    }

    #[test]
    fn trilinear_exact_at_lattice() {
        let mut v = ident_vol([4, 5, 6], vec![0.0; 120]);
        v.set(2, 3, 4, 7.25);
        assert_eq!(v.sample_trilinear([2.0, 3.0, 4.0]), 7.25);
    }

    #[test]
    fn trilinear_midpoint_blend() {
        // 0 and 1 neighbors along w, constant elsewhere -> 0.5 at midpoint.
        let mut v = ident_vol([2, 2, 2], vec![0.0; 8]);
        for d in 0..2 {
            for h in 0..2 {
                v.set(d, h, 1, 1.0);
            }
        }
        assert!((v.sample_trilinear([0.0, 0.0, 0.5]) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn trilinear_out_of_field_is_zero() {
        let v = ident_vol([4, 4, 4], vec![1.0; 64]);
        assert_eq!(v.sample_trilinear([-5.0, 0.0, 0.0]), 0.0);
        assert_eq!(v.sample_trilinear([0.0, 3.0001, 0.0]), 0.0);
    }

    #[test]
    fn nearest_rounds_and_breaks_ties_low() {
        let mut v = ident_vol([4, 5, 6], vec![0.0; 120]);
        v.set(2, 3, 4, 9.0);
        assert_eq!(v.sample_nearest([2.4, 3.1, 4.0]), 9.0);
        // tie at .5 goes to the lower index
        v.set(2, 3, 3, 5.0);
        assert_eq!(v.sample_nearest([2.0, 3.0, 3.5]), 5.0);
        assert_eq!(v.sample_nearest([2.0, 3.0, 4.0]), 9.0);
    }

    #[test]
    fn nearest_on_binary_stays_binary() {
        let mut v = ident_vol([3, 3, 3], vec![0.0; 27]);
        v.set(1, 1, 1, 1.0);
        for &c in &[0.3, 1.2, 2.0] {
            let s = v.sample_nearest([c, c, c]);
            assert!(s == 0.0 || s == 1.0);
        }
    }

    #[test]
    fn normalize_constant_is_zero() {
        let v = ident_vol([2, 2, 2], vec![3.0; 8]);
        assert!(v.normalize_minmax().data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn normalize_rescales() {
        let v = ident_vol([1, 1, 3], vec![10.0, 20.0, 30.0]);
        assert_eq!(v.normalize_minmax().data(), &[0.0, 0.5, 1.0]);
    }

    #[test]
    fn normalize_unit_range_fixed_point() {
        let v = ident_vol([1, 1, 3], vec![0.0, 0.25, 1.0]);
        assert_eq!(v.normalize_minmax().data(), &[0.0, 0.25, 1.0]);
    }

    #[test]
    fn mask_roundtrip_and_validation() {
        let v = ident_vol([1, 1, 2], vec![0.0, 1.0]);
        let m = v.to_mask().unwrap();
        assert_eq!(m.data(), &[0, 1]);
        let bad = ident_vol([1, 1, 2], vec![0.0, 0.5]);
        assert_eq!(bad.to_mask().unwrap_err(), VolumeError::NotBinary);
    }
}
