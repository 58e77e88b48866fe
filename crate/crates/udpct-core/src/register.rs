//! Closed-form landmark similarity registration and cross-grid resampling.
//!
//! Paired anatomical landmarks in world millimetres drive a least-squares
//! similarity fit (isotropic scale + rotation + translation, solved by the
//! Umeyama SVD construction with reflection correction). The fitted transform
//! is composed with the two volume affines into a single voxel-to-voxel
//! resampling matrix used to pull CT data into the ultrasound grid.

use alloc::vec::Vec;
use nalgebra::{Matrix3, Matrix4, Vector3, Vector4};

use crate::vol::{Volume, VolumeError};

/// Relative singular-value threshold below which the landmark geometry is
/// treated as rank-deficient (collinear or coincident points).
pub const RANK_EPS: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum RegisterError {
    #[error("landmark sets differ in size ({us} vs {ct})")]
    SizeMismatch { us: usize, ct: usize },
    #[error("degenerate landmarks: need >= 3 non-collinear paired points")]
    DegenerateLandmarks,
    #[error("affine matrix is singular")]
    SingularAffine,
}

/// Ordered world-coordinate landmark triples; pairing is by index.
#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkSet {
    pub points: Vec<[f64; 3]>,
}

impl LandmarkSet {
    pub fn new(points: Vec<[f64; 3]>) -> Self {
        Self { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Similarity transform `x -> s R x + t` with `det(R) = +1` and `s > 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityTransform {
    pub scale: f64,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl SimilarityTransform {
    pub fn identity() -> Self {
        Self {
            scale: 1.0,
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let v = self.scale * (self.rotation * Vector3::new(p[0], p[1], p[2])) + self.translation;
        [v.x, v.y, v.z]
    }

    /// Homogeneous form `[[sR, t], [0, 1]]`.
    pub fn homogeneous(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0)
            .copy_from(&(self.rotation * self.scale));
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }
}

/// Single 4x4 map from US voxel indices to CT voxel indices.
#[derive(Debug, Clone, PartialEq)]
pub struct ResampleMatrix {
    pub matrix: Matrix4<f64>,
}

impl ResampleMatrix {
    pub fn identity() -> Self {
        Self {
            matrix: Matrix4::identity(),
        }
    }

    pub fn map_index(&self, idx: [f64; 3]) -> [f64; 3] {
        let p = self.matrix * Vector4::new(idx[0], idx[1], idx[2], 1.0);
        [p.x, p.y, p.z]
    }
}

/// Least-squares similarity fit of `q_i ~ s R p_i + t` over paired landmarks.
///
/// The SVD recomposition carries the determinant-correction diagonal, so a
/// mirrored configuration still yields a proper rotation. Rank < 2 in the
/// cross-covariance (collinear or coincident points) is rejected rather than
/// silently returning an arbitrary rotation.
pub fn estimate_similarity(
    us: &LandmarkSet,
    ct: &LandmarkSet,
) -> Result<SimilarityTransform, RegisterError> {
    if us.len() != ct.len() {
        return Err(RegisterError::SizeMismatch {
            us: us.len(),
            ct: ct.len(),
        });
    }
    let n = us.len();
    if n < 3 {
        return Err(RegisterError::DegenerateLandmarks);
    }
    let nf = n as f64;

    let mut mean_p = Vector3::zeros();
    let mut mean_q = Vector3::zeros();
    for (p, q) in us.points.iter().zip(&ct.points) {
        mean_p += Vector3::new(p[0], p[1], p[2]);
        mean_q += Vector3::new(q[0], q[1], q[2]);
    }
    mean_p /= nf;
    mean_q /= nf;

    let mut cov = Matrix3::zeros();
    let mut var_p = 0.0;
    for (p, q) in us.points.iter().zip(&ct.points) {
        let dp = Vector3::new(p[0], p[1], p[2]) - mean_p;
        let dq = Vector3::new(q[0], q[1], q[2]) - mean_q;
        cov += dq * dp.transpose();
        var_p += dp.norm_squared();
    }
    cov /= nf;
    var_p /= nf;

    let svd = cov.svd(true, true);
    let u = svd.u.ok_or(RegisterError::DegenerateLandmarks)?;
    let v_t = svd.v_t.ok_or(RegisterError::DegenerateLandmarks)?;
    let sv = svd.singular_values;
    if sv[0] <= 0.0 || sv[1] <= RANK_EPS * sv[0] {
        return Err(RegisterError::DegenerateLandmarks);
    }

    let sign = if u.determinant() * v_t.determinant() < 0.0 {
        -1.0
    } else {
        1.0
    };
    let mut s_diag = Matrix3::identity();
    s_diag[(2, 2)] = sign;

    let rotation = u * s_diag * v_t;
    let scale = (sv[0] + sv[1] + sign * sv[2]) / var_p;
    let translation = mean_q - scale * (rotation * mean_p);

    Ok(SimilarityTransform {
        scale,
        rotation,
        translation,
    })
}

/// `M = A_CT^-1 * T * A_US`: US voxel index straight to CT voxel index.
pub fn compose_resample_matrix(
    a_ct: &Matrix4<f64>,
    t_us_to_ct: &Matrix4<f64>,
    a_us: &Matrix4<f64>,
) -> Result<ResampleMatrix, RegisterError> {
    let inv = a_ct.try_inverse().ok_or(RegisterError::SingularAffine)?;
    Ok(ResampleMatrix {
        matrix: inv * t_us_to_ct * a_us,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Interp {
    Trilinear,
    Nearest,
}

/// Pulls `ct` onto a US-shaped grid: `out[i] = sample(ct, M * i)`.
///
/// Out-of-field voxels become 0. Masks must use [`Interp::Nearest`] so label
/// values stay discrete.
pub fn resample_into_us_grid(
    ct: &Volume,
    m: &ResampleMatrix,
    us_dims: [usize; 3],
    us_affine: Matrix4<f64>,
    interp: Interp,
) -> Result<Volume, VolumeError> {
    let mut out = Volume::zeros(us_dims, us_affine)?;
    for d in 0..us_dims[0] {
        for h in 0..us_dims[1] {
            for w in 0..us_dims[2] {
                let src = m.map_index([d as f64, h as f64, w as f64]);
                let v = match interp {
                    Interp::Trilinear => ct.sample_trilinear(src),
                    Interp::Nearest => ct.sample_nearest(src),
                };
                out.set(d, h, w, v);
            }
        }
    }
    Ok(out)
}

/// RMS landmark residual (fiducial registration error) under a transform.
pub fn fiducial_error(
    us: &LandmarkSet,
    ct: &LandmarkSet,
    x: &SimilarityTransform,
) -> Result<f64, RegisterError> {
    if us.len() != ct.len() {
        return Err(RegisterError::SizeMismatch {
            us: us.len(),
            ct: ct.len(),
        });
    }
    if us.is_empty() {
        return Ok(0.0);
    }
    let mut acc = 0.0;
    for (p, q) in us.points.iter().zip(&ct.points) {
        let m = x.apply(*p);
        let dx = q[0] - m[0];
        let dy = q[1] - m[1];
        let dz = q[2] - m[2];
        acc += dx * dx + dy * dy + dz * dz;
    }
    Ok(num_traits::Float::sqrt(acc / us.len() as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::UnitQuaternion;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tetra() -> LandmarkSet {
        LandmarkSet::new(alloc::vec![
            [0.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            [0.0, 0.0, 1.0],
        ])
    }

    fn random_rotation(rng: &mut ChaCha8Rng) -> Matrix3<f64> {
        let q = nalgebra::Quaternion::new(
            rng.random::<f64>() - 0.5,
            rng.random::<f64>() - 0.5,
            rng.random::<f64>() - 0.5,
            rng.random::<f64>() - 0.5,
        );
        UnitQuaternion::from_quaternion(q).to_rotation_matrix().into_inner()
    }

    #[test]
    fn identity_recovery() {
        let p = tetra();
        let x = estimate_similarity(&p, &p).unwrap();
        assert!((x.scale - 1.0).abs() < 1e-12);
        assert!((x.rotation - Matrix3::identity()).norm() < 1e-12);
        assert!(x.translation.norm() < 1e-12);
    }

    #[test]
    fn recovers_known_transform() {
        // s=2, 90 deg about the third axis, t=(1,2,3).
        let p = tetra();
        let q = LandmarkSet::new(alloc::vec![
            [1.0, 2.0, 3.0],
            [1.0, 4.0, 3.0],
            [-1.0, 2.0, 3.0],
            [1.0, 2.0, 5.0],
        ]);
        let x = estimate_similarity(&p, &q).unwrap();
        assert!((x.scale - 2.0).abs() < 1e-9);
        let r_want = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        assert!((x.rotation - r_want).norm() < 1e-9);
        assert!((x.translation - Vector3::new(1.0, 2.0, 3.0)).norm() < 1e-9);
        assert!(fiducial_error(&p, &q, &x).unwrap() < 1e-9);
    }

    #[test]
    fn construct_and_recover_500_trials() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..500 {
            let s = 0.5 + 1.5 * rng.random::<f64>();
            let r = random_rotation(&mut rng);
            let t = Vector3::new(
                rng.random::<f64>() * 20.0 - 10.0,
                rng.random::<f64>() * 20.0 - 10.0,
                rng.random::<f64>() * 20.0 - 10.0,
            );
            let pts: Vec<[f64; 3]> = (0..6)
                .map(|_| {
                    [
                        rng.random::<f64>() * 10.0 - 5.0,
                        rng.random::<f64>() * 10.0 - 5.0,
                        rng.random::<f64>() * 10.0 - 5.0,
                    ]
                })
                .collect();
            let p = LandmarkSet::new(pts.clone());
            let q = LandmarkSet::new(
                pts.iter()
                    .map(|&pt| {
                        let v = s * (r * Vector3::new(pt[0], pt[1], pt[2])) + t;
                        [v.x, v.y, v.z]
                    })
                    .collect(),
            );
            let x = estimate_similarity(&p, &q).unwrap();
            assert!(fiducial_error(&p, &q, &x).unwrap() < 1e-9);
        }
    }

    #[test]
    fn mirrored_configuration_yields_proper_rotation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let pts: Vec<[f64; 3]> = (0..5)
                .map(|_| {
                    [
                        rng.random::<f64>() - 0.5,
                        rng.random::<f64>() - 0.5,
                        rng.random::<f64>() - 0.5,
                    ]
                })
                .collect();
            // Mirror the target set: the correction must still give det(R)=+1.
            let p = LandmarkSet::new(pts.clone());
            let q = LandmarkSet::new(pts.iter().map(|&[x, y, z]| [-x, y, z]).collect());
            let xf = estimate_similarity(&p, &q).unwrap();
            assert!((xf.rotation.determinant() - 1.0).abs() < 1e-9);
            assert!(xf.scale > 0.0);
        }
    }

    #[test]
    fn size_mismatch_rejected() {
        let p = tetra();
        let q = LandmarkSet::new(alloc::vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]);
        assert!(matches!(
            estimate_similarity(&p, &q),
            Err(RegisterError::SizeMismatch { .. })
        ));
    }

    #[test]
    fn collinear_points_rejected() {
        let p = LandmarkSet::new(alloc::vec![
            [0.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [2.0, 0.0, 0.0],
            [3.0, 0.0, 0.0],
        ]);
        assert_eq!(
            estimate_similarity(&p, &p).unwrap_err(),
            RegisterError::DegenerateLandmarks
        );
    }

    #[test]
    fn too_few_points_rejected() {
        let p = LandmarkSet::new(alloc::vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]]);
        assert_eq!(
            estimate_similarity(&p, &p).unwrap_err(),
            RegisterError::DegenerateLandmarks
        );
    }

    #[test]
    fn compose_identity() {
        let i = Matrix4::identity();
        let m = compose_resample_matrix(&i, &i, &i).unwrap();
        assert_eq!(m.matrix, Matrix4::identity());
    }

    #[test]
    fn compose_hand_example() {
        // A_CT = diag(2,2,2,1), T = translate(4,0,0), A_US = I
        // -> M maps origin to (2,0,0) with 0.5 scaling per axis.
        let mut a_ct = Matrix4::identity() * 2.0;
        a_ct[(3, 3)] = 1.0;
        let mut t = Matrix4::identity();
        t[(0, 3)] = 4.0;
        let m = compose_resample_matrix(&a_ct, &t, &Matrix4::identity()).unwrap();
        assert_eq!(m.map_index([0.0, 0.0, 0.0]), [2.0, 0.0, 0.0]);
        assert_eq!(m.map_index([2.0, 0.0, 0.0]), [3.0, 0.0, 0.0]);
    }

    #[test]
    fn compose_matches_step_by_step_chain() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let r = random_rotation(&mut rng);
        let x = SimilarityTransform {
            scale: 1.3,
            rotation: r,
            translation: Vector3::new(2.0, -1.0, 0.5),
        };
        let t = x.homogeneous();
        let mut a_us = Matrix4::identity();
        a_us[(0, 0)] = 0.7;
        a_us[(1, 3)] = 3.0;
        let mut a_ct = Matrix4::identity();
        a_ct[(2, 2)] = 1.9;
        a_ct[(0, 3)] = -2.0;
        let m = compose_resample_matrix(&a_ct, &t, &a_us).unwrap();
        let a_ct_inv = a_ct.try_inverse().unwrap();
        for _ in 0..100 {
            let idx = Vector4::new(
                rng.random::<f64>() * 32.0,
                rng.random::<f64>() * 32.0,
                rng.random::<f64>() * 32.0,
                1.0,
            );
            let direct = m.matrix * idx;
            let chained = a_ct_inv * (t * (a_us * idx));
            assert!((direct - chained).norm() < 1e-9);
        }
    }

    #[test]
    fn singular_ct_affine_rejected() {
        let mut a_ct = Matrix4::identity();
        a_ct[(1, 1)] = 0.0;
        assert_eq!(
            compose_resample_matrix(&a_ct, &Matrix4::identity(), &Matrix4::identity())
                .unwrap_err(),
            RegisterError::SingularAffine
        );
    }

    #[test]
    fn identity_resample_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let data: Vec<f64> = (0..4 * 5 * 6).map(|_| rng.random::<f64>()).collect();
        let ct = Volume::new([4, 5, 6], Matrix4::identity(), data.clone()).unwrap();
        let out = resample_into_us_grid(
            &ct,
            &ResampleMatrix::identity(),
            [4, 5, 6],
            Matrix4::identity(),
            Interp::Trilinear,
        )
        .unwrap();
        assert_eq!(out.data(), data.as_slice());
    }

    #[test]
    fn integer_shift_moves_ramp() {
        // M fetches from index+1 along d: out[d] = in[d+1], last slab zero.
        let dims = [4, 3, 3];
        let data: Vec<f64> = (0..dims[0] * dims[1] * dims[2])
            .map(|i| (i / 9) as f64)
            .collect();
        let ct = Volume::new(dims, Matrix4::identity(), data).unwrap();
        let mut m = Matrix4::identity();
        m[(0, 3)] = 1.0;
        let out = resample_into_us_grid(
            &ct,
            &ResampleMatrix { matrix: m },
            dims,
            Matrix4::identity(),
            Interp::Trilinear,
        )
        .unwrap();
        for d in 0..4 {
            let want = if d < 3 { (d + 1) as f64 } else { 0.0 };
            assert_eq!(out.at(d, 1, 1), want);
        }
    }

    #[test]
    fn nearest_resample_preserves_labels() {
        let mut mask = Volume::zeros([4, 4, 4], Matrix4::identity()).unwrap();
        mask.set(1, 2, 3, 1.0);
        mask.set(2, 2, 2, 1.0);
        let mut m = Matrix4::identity();
        m[(0, 3)] = 0.3;
        m[(1, 3)] = -0.2;
        let out = resample_into_us_grid(
            &mask,
            &ResampleMatrix { matrix: m },
            [4, 4, 4],
            Matrix4::identity(),
            Interp::Nearest,
        )
        .unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0 || v == 1.0));
    }

    #[test]
    fn fre_constant_offset() {
        let p = tetra();
        let q = LandmarkSet::new(p.points.iter().map(|&[x, y, z]| [x + 1.0, y, z]).collect());
        let e = fiducial_error(&p, &q, &SimilarityTransform::identity()).unwrap();
        assert!((e - 1.0).abs() < 1e-12);
    }

    #[test]
    fn estimate_beats_random_transforms() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let pts: Vec<[f64; 3]> = (0..6)
            .map(|_| {
                [
                    rng.random::<f64>() * 4.0,
                    rng.random::<f64>() * 4.0,
                    rng.random::<f64>() * 4.0,
                ]
            })
            .collect();
        let p = LandmarkSet::new(pts);
        let q = LandmarkSet::new(
            p.points
                .iter()
                .map(|&[x, y, z]| [0.9 * y + 0.3, 0.9 * -x + 1.0, 0.9 * z - 0.4])
                .collect(),
        );
        let best = estimate_similarity(&p, &q).unwrap();
        let best_err = fiducial_error(&p, &q, &best).unwrap();
        for _ in 0..100 {
            let alt = SimilarityTransform {
                scale: 0.5 + rng.random::<f64>(),
                rotation: random_rotation(&mut rng),
                translation: Vector3::new(
                    rng.random::<f64>() - 0.5,
                    rng.random::<f64>() - 0.5,
                    rng.random::<f64>() - 0.5,
                ),
            };
            assert!(best_err <= fiducial_error(&p, &q, &alt).unwrap() + 1e-12);
        }
    }
}
