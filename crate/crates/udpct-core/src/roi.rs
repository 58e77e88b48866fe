//! Kidney ROI cropping and ultrasound field-of-view masking.
//!
//! The crop box comes from the US kidney mask, is expanded by a fixed margin
//! (default 5 voxels), and is applied identically to every aligned volume.
//! The FOV mask keeps voxels where the US signal is strictly positive and
//! flood-fills interior cavities so only border-connected background stays 0.

use alloc::collections::VecDeque;
use alloc::vec;
use nalgebra::Vector4;

use crate::vol::{BinaryMask, Volume, VolumeError};

/// Margin in voxels added around the kidney bounding box.
pub const DEFAULT_MARGIN: usize = 5;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum RoiError {
    #[error("mask has no nonzero voxel")]
    EmptyMask,
    #[error("bounding box {bbox:?} exceeds volume dims {dims:?}")]
    BoxOutOfRange { bbox: BoundingBox, dims: [usize; 3] },
    #[error("dims mismatch: {a:?} vs {b:?}")]
    DimsMismatch { a: [usize; 3], b: [usize; 3] },
    #[error(transparent)]
    Volume(#[from] VolumeError),
}

/// Inclusive axis-aligned voxel bounding box.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BoundingBox {
    pub min: [usize; 3],
    pub max: [usize; 3],
}

impl BoundingBox {
    pub fn extent(&self) -> [usize; 3] {
        [
            self.max[0] - self.min[0] + 1,
            self.max[1] - self.min[1] + 1,
            self.max[2] - self.min[2] + 1,
        ]
    }

    fn fits(&self, dims: [usize; 3]) -> bool {
        (0..3).all(|a| self.min[a] <= self.max[a] && self.max[a] < dims[a])
    }
}

/// Tight box around every nonzero mask voxel.
pub fn mask_bounding_box(mask: &BinaryMask) -> Result<BoundingBox, RoiError> {
    let dims = mask.dims();
    let mut min = dims;
    let mut max = [0usize; 3];
    let mut any = false;
    for d in 0..dims[0] {
        for h in 0..dims[1] {
            for w in 0..dims[2] {
                if mask.at(d, h, w) > 0 {
                    any = true;
                    let idx = [d, h, w];
                    for a in 0..3 {
                        min[a] = min[a].min(idx[a]);
                        max[a] = max[a].max(idx[a]);
                    }
                }
            }
        }
    }
    if !any {
        return Err(RoiError::EmptyMask);
    }
    Ok(BoundingBox { min, max })
}

/// Moves each bound outward by `margin`, clamped to `[0, dim-1]`.
pub fn expand_and_clamp(bbox: BoundingBox, margin: usize, dims: [usize; 3]) -> BoundingBox {
    let mut out = bbox;
    for a in 0..3 {
        out.min[a] = bbox.min[a].saturating_sub(margin);
        out.max[a] = (bbox.max[a] + margin).min(dims[a] - 1);
    }
    out
}

/// Extracts the box from a volume, shifting the affine so retained voxels
/// keep their world coordinates.
pub fn crop(vol: &Volume, bbox: BoundingBox) -> Result<Volume, RoiError> {
    let dims = vol.dims();
    if !bbox.fits(dims) {
        return Err(RoiError::BoxOutOfRange { bbox, dims });
    }
    let ext = bbox.extent();
    let mut data = vec![0.0; ext[0] * ext[1] * ext[2]];
    let mut i = 0;
    for d in 0..ext[0] {
        for h in 0..ext[1] {
            for w in 0..ext[2] {
                data[i] = vol.at(bbox.min[0] + d, bbox.min[1] + h, bbox.min[2] + w);
                i += 1;
            }
        }
    }
    // New origin column: world position of the old b_min voxel.
    let mut affine = *vol.affine();
    let origin = affine
        * Vector4::new(
            bbox.min[0] as f64,
            bbox.min[1] as f64,
            bbox.min[2] as f64,
            1.0,
        );
    affine.set_column(3, &origin);
    Ok(Volume::new(ext, affine, data)?)
}

/// Mask crop: direct index copy, no interpolation.
pub fn crop_mask(mask: &BinaryMask, bbox: BoundingBox) -> Result<BinaryMask, RoiError> {
    let dims = mask.dims();
    if !bbox.fits(dims) {
        return Err(RoiError::BoxOutOfRange { bbox, dims });
    }
    let ext = bbox.extent();
    let mut data = vec![0u8; ext[0] * ext[1] * ext[2]];
    let mut i = 0;
    for d in 0..ext[0] {
        for h in 0..ext[1] {
            for w in 0..ext[2] {
                data[i] = mask.at(bbox.min[0] + d, bbox.min[1] + h, bbox.min[2] + w);
                i += 1;
            }
        }
    }
    Ok(BinaryMask::new(ext, data)?)
}

/// Field-of-view mask of an US volume: 1 where `us > 0`, then interior
/// zero-cavities are filled.
///
/// A voxel stays 0 only if it reaches the volume border through a
/// 6-connected path of zero voxels.
pub fn fov_mask(us: &Volume) -> BinaryMask {
    let dims = us.dims();
    let n = dims[0] * dims[1] * dims[2];
    let mut mask = vec![0u8; n];
    for (m, &v) in mask.iter_mut().zip(us.data()) {
        if v > 0.0 {
            *m = 1;
        }
    }

    // Flood the border-connected zero region; everything else is in-FOV.
    let mut outside = vec![false; n];
    let mut queue = VecDeque::new();
    let idx = |d: usize, h: usize, w: usize| (d * dims[1] + h) * dims[2] + w;
    for d in 0..dims[0] {
        for h in 0..dims[1] {
            for w in 0..dims[2] {
                let border = d == 0
                    || h == 0
                    || w == 0
                    || d == dims[0] - 1
                    || h == dims[1] - 1
                    || w == dims[2] - 1;
                let i = idx(d, h, w);
                if border && mask[i] == 0 && !outside[i] {
                    outside[i] = true;
                    queue.push_back([d, h, w]);
                }
            }
        }
    }
    while let Some([d, h, w]) = queue.pop_front() {
        let mut visit = |nd: usize, nh: usize, nw: usize, queue: &mut VecDeque<[usize; 3]>| {
            let i = idx(nd, nh, nw);
            if mask[i] == 0 && !outside[i] {
                outside[i] = true;
                queue.push_back([nd, nh, nw]);
            }
        };
        if d > 0 {
            visit(d - 1, h, w, &mut queue);
        }
        if d + 1 < dims[0] {
            visit(d + 1, h, w, &mut queue);
        }
        if h > 0 {
            visit(d, h - 1, w, &mut queue);
        }
        if h + 1 < dims[1] {
            visit(d, h + 1, w, &mut queue);
        }
        if w > 0 {
            visit(d, h, w - 1, &mut queue);
        }
        if w + 1 < dims[2] {
            visit(d, h, w + 1, &mut queue);
        }
    }
    for (m, &out) in mask.iter_mut().zip(&outside) {
        if *m == 0 && !out {
            *m = 1;
        }
    }
    BinaryMask::new(dims, mask).expect("mask dims match source volume")
}

/// Elementwise product; masked-out voxels become exactly 0.
pub fn apply_mask(vol: &Volume, mask: &BinaryMask) -> Result<Volume, RoiError> {
    if vol.dims() != mask.dims() {
        return Err(RoiError::DimsMismatch {
            a: vol.dims(),
            b: mask.dims(),
        });
    }
    let mut out = vol.clone();
    for (v, &m) in out.data_mut().iter_mut().zip(mask.data()) {
        if m == 0 {
            *v = 0.0;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec::Vec;
    use nalgebra::Matrix4;

    fn mask_with(dims: [usize; 3], on: &[[usize; 3]]) -> BinaryMask {
        let mut m = BinaryMask::zeros(dims).unwrap();
        for &[d, h, w] in on {
            m.set(d, h, w, 1);
        }
        m
    }

    #[test]
    fn bbox_single_voxel() {
        let m = mask_with([8, 8, 8], &[[5, 6, 7]]);
        let b = mask_bounding_box(&m).unwrap();
        assert_eq!(b.min, [5, 6, 7]);
        assert_eq!(b.max, [5, 6, 7]);
    }

    #[test]
    fn bbox_two_point_extremes() {
        let m = mask_with([32, 32, 32], &[[10, 12, 14], [20, 22, 24]]);
        let b = mask_bounding_box(&m).unwrap();
        assert_eq!(b.min, [10, 12, 14]);
        assert_eq!(b.max, [20, 22, 24]);
    }

    #[test]
    fn bbox_full_extent() {
        let m = BinaryMask::new([4, 4, 4], vec![1; 64]).unwrap();
        let b = mask_bounding_box(&m).unwrap();
        assert_eq!(b.min, [0, 0, 0]);
        assert_eq!(b.max, [3, 3, 3]);
    }

    #[test]
    fn bbox_empty_mask_rejected() {
        let m = BinaryMask::zeros([4, 4, 4]).unwrap();
        assert_eq!(mask_bounding_box(&m).unwrap_err(), RoiError::EmptyMask);
    }

    #[test]
    fn expand_margin_arithmetic() {
        let b = BoundingBox {
            min: [10, 10, 10],
            max: [20, 20, 20],
        };
        let e = expand_and_clamp(b, 5, [64, 64, 64]);
        assert_eq!(e.min, [5, 5, 5]);
        assert_eq!(e.max, [25, 25, 25]);
    }

    #[test]
    fn expand_clamps_at_edges() {
        let b = BoundingBox {
            min: [0, 2, 3],
            max: [7, 7, 7],
        };
        let e = expand_and_clamp(b, 5, [8, 8, 8]);
        assert_eq!(e.min, [0, 0, 0]);
        assert_eq!(e.max, [7, 7, 7]);
    }

    #[test]
    fn expand_zero_margin_identity() {
        let b = BoundingBox {
            min: [1, 2, 3],
            max: [4, 5, 6],
        };
        assert_eq!(expand_and_clamp(b, 0, [8, 8, 8]), b);
    }

    #[test]
    fn crop_full_volume_identity() {
        let data: Vec<f64> = (0..27).map(|i| i as f64).collect();
        let v = Volume::new([3, 3, 3], Matrix4::identity(), data).unwrap();
        let b = BoundingBox {
            min: [0, 0, 0],
            max: [2, 2, 2],
        };
        let c = crop(&v, b).unwrap();
        assert_eq!(c, v);
    }

    #[test]
    fn crop_preserves_world_coordinates() {
        let mut a = Matrix4::identity() * 1.5;
        a[(3, 3)] = 1.0;
        a[(1, 3)] = -4.0;
        let data: Vec<f64> = (0..6 * 6 * 6).map(|i| i as f64).collect();
        let v = Volume::new([6, 6, 6], a, data).unwrap();
        let b = BoundingBox {
            min: [1, 2, 3],
            max: [4, 5, 5],
        };
        let c = crop(&v, b).unwrap();
        let w_child = c.voxel_to_world([0.0, 0.0, 0.0]);
        let w_parent = v.voxel_to_world([1.0, 2.0, 3.0]);
        for (a, b) in w_child.iter().zip(w_parent) {
            assert!((a - b).abs() < 1e-9);
        }
        // interior voxel too
        let w_child = c.voxel_to_world([2.0, 1.0, 1.0]);
        let w_parent = v.voxel_to_world([3.0, 3.0, 4.0]);
        for (a, b) in w_child.iter().zip(w_parent) {
            assert!((a - b).abs() < 1e-9);
        }
        assert_eq!(c.at(0, 0, 0), v.at(1, 2, 3));
    }

    #[test]
    fn crop_out_of_range_rejected() {
        let v = Volume::zeros([4, 4, 4], Matrix4::identity()).unwrap();
        let b = BoundingBox {
            min: [0, 0, 0],
            max: [4, 3, 3],
        };
        assert!(matches!(crop(&v, b), Err(RoiError::BoxOutOfRange { .. })));
    }

    #[test]
    fn shared_box_aligns_four_volumes() {
        let us = Volume::zeros([8, 8, 8], Matrix4::identity()).unwrap();
        let ct = us.clone();
        let us_mask = mask_with([8, 8, 8], &[[2, 2, 2], [5, 6, 5]]);
        let ct_mask = us_mask.clone();
        let b = expand_and_clamp(mask_bounding_box(&us_mask).unwrap(), 1, [8, 8, 8]);
        let dims = crop(&us, b).unwrap().dims();
        assert_eq!(crop(&ct, b).unwrap().dims(), dims);
        assert_eq!(crop_mask(&us_mask, b).unwrap().dims(), dims);
        assert_eq!(crop_mask(&ct_mask, b).unwrap().dims(), dims);
    }

    #[test]
    fn fov_all_positive() {
        let v = Volume::new([3, 3, 3], Matrix4::identity(), vec![0.5; 27]).unwrap();
        assert!(fov_mask(&v).data().iter().all(|&m| m == 1));
    }

    #[test]
    fn fov_all_zero() {
        let v = Volume::zeros([3, 3, 3], Matrix4::identity()).unwrap();
        assert!(fov_mask(&v).data().iter().all(|&m| m == 0));
    }

    #[test]
    fn fov_fills_interior_cavity_only() {
        // Solid positive 8^3 block centered in 16^3 zeros, one interior hole.
        let mut v = Volume::zeros([16, 16, 16], Matrix4::identity()).unwrap();
        for d in 4..12 {
            for h in 4..12 {
                for w in 4..12 {
                    v.set(d, h, w, 1.0);
                }
            }
        }
        v.set(8, 8, 8, 0.0);
        let m = fov_mask(&v);
        assert_eq!(m.at(8, 8, 8), 1, "interior cavity must be filled");
        assert_eq!(m.at(0, 0, 0), 0);
        assert_eq!(m.at(3, 8, 8), 0, "exterior stays outside the FOV");
        assert_eq!(m.at(4, 4, 4), 1);
    }

    #[test]
    fn fov_mask_of_masked_volume_covers_original() {
        let mut v = Volume::zeros([8, 8, 8], Matrix4::identity()).unwrap();
        for d in 2..6 {
            for h in 2..6 {
                for w in 2..6 {
                    v.set(d, h, w, (d + h + w) as f64 / 20.0);
                }
            }
        }
        v.set(4, 4, 4, 0.0);
        let m = fov_mask(&v);
        let masked = apply_mask(&v, &m).unwrap();
        let m2 = fov_mask(&masked);
        // support of the refilled mask contains the first mask's support
        for (a, b) in m2.data().iter().zip(m.data()) {
            assert!(a >= b);
        }
    }

    #[test]
    fn apply_mask_identity_and_zero() {
        let data: Vec<f64> = (0..8).map(|i| i as f64).collect();
        let v = Volume::new([2, 2, 2], Matrix4::identity(), data).unwrap();
        let ones = BinaryMask::new([2, 2, 2], vec![1; 8]).unwrap();
        let zeros = BinaryMask::zeros([2, 2, 2]).unwrap();
        assert_eq!(apply_mask(&v, &ones).unwrap(), v);
        assert!(apply_mask(&v, &zeros)
            .unwrap()
            .data()
            .iter()
            .all(|&x| x == 0.0));
    }

    #[test]
    fn apply_mask_idempotent() {
        let data: Vec<f64> = (0..27).map(|i| (i % 5) as f64).collect();
        let v = Volume::new([3, 3, 3], Matrix4::identity(), data).unwrap();
        let mut m = BinaryMask::zeros([3, 3, 3]).unwrap();
        for i in 0..27 {
            if i % 2 == 0 {
                m.data_mut()[i] = 1;
            }
        }
        let once = apply_mask(&v, &m).unwrap();
        let twice = apply_mask(&once, &m).unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn apply_mask_dims_mismatch() {
        let v = Volume::zeros([2, 2, 2], Matrix4::identity()).unwrap();
        let m = BinaryMask::zeros([2, 2, 3]).unwrap();
        assert!(matches!(
            apply_mask(&v, &m),
            Err(RoiError::DimsMismatch { .. })
        ));
    }
}
