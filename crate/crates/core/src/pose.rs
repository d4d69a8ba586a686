//! SE(3) and quaternion algebra, angular error measures and motion averaging.
//!
//! Every [`Pose`] in this crate is camera-to-world: it maps camera-frame
//! coordinates into the world frame, so its translation is the camera center.

use nalgebra::{Matrix3, Matrix4, Vector3, Vector4};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Tolerance on `|q| - 1` accepted by [`quat_to_matrix`].
pub const UNIT_TOLERANCE: f64 = 1e-6;

/// Translations shorter than this are treated as having no direction.
pub const DIRECTION_EPSILON: f64 = 1e-6;

const POWER_ITERATION_CAP: usize = 100;
const POWER_ITERATION_TOL: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Quaternion {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Quaternion {
    pub const IDENTITY: Quaternion = Quaternion {
        w: 1.0,
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };

    pub fn new(w: f64, x: f64, y: f64, z: f64) -> Self {
        Self { w, x, y, z }
    }

    /// Rotation of `angle` radians about `axis` (need not be unit length).
    pub fn from_axis_angle(axis: &Vector3<f64>, angle: f64) -> Self {
        let n = axis.norm();
        if n == 0.0 {
            return Self::IDENTITY;
        }
        let a = axis / n;
        let (s, c) = (0.5 * angle).sin_cos();
        Self::new(c, s * a.x, s * a.y, s * a.z)
    }

    /// Uniformly distributed unit quaternion, canonical sign.
    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        loop {
            let v: [f64; 4] = std::array::from_fn(|_| rng.sample(StandardNormal));
            let q = Self::new(v[0], v[1], v[2], v[3]);
            if q.norm() > 1e-6 {
                return q.normalize().canonical();
            }
        }
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.w, self.x, self.y, self.z]
    }

    pub fn from_slice(v: &[f64]) -> Self {
        Self::new(v[0], v[1], v[2], v[3])
    }

    pub fn as_vector(&self) -> Vector4<f64> {
        Vector4::new(self.w, self.x, self.y, self.z)
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn dot(&self, other: &Quaternion) -> f64 {
        self.w * other.w + self.x * other.x + self.y * other.y + self.z * other.z
    }

    pub fn normalize(&self) -> Self {
        let n = self.norm();
        Self::new(self.w / n, self.x / n, self.y / n, self.z / n)
    }

    pub fn neg(&self) -> Self {
        Self::new(-self.w, -self.x, -self.y, -self.z)
    }

    /// Representative with `w >= 0`; when `w == 0` the first nonzero of
    /// `x, y, z` is made nonnegative.
    pub fn canonical(&self) -> Self {
        let first_nonzero = [self.w, self.x, self.y, self.z]
            .into_iter()
            .find(|c| *c != 0.0)
            .unwrap_or(0.0);
        if first_nonzero < 0.0 {
            self.neg()
        } else {
            *self
        }
    }

    pub fn is_canonical(&self) -> bool {
        self.canonical() == *self
    }

    pub fn conjugate(&self) -> Self {
        Self::new(self.w, -self.x, -self.y, -self.z)
    }

    /// Hamilton product `self * rhs`.
    pub fn mul(&self, rhs: &Quaternion) -> Self {
        let (a, b) = (self, rhs);
        Self::new(
            a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z,
            a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y,
            a.w * b.y - a.x * b.z + a.y * b.w + a.z * b.x,
            a.w * b.z + a.x * b.y - a.y * b.x + a.z * b.w,
        )
    }

    pub fn rotate(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.matrix_unchecked() * v
    }

    /// Rotation matrix without the unit-norm check.
    pub fn matrix_unchecked(&self) -> Matrix3<f64> {
        let (w, x, y, z) = (self.w, self.x, self.y, self.z);
        Matrix3::new(
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        )
    }
}

/// Rotation matrix of a unit quaternion.
pub fn quat_to_matrix(q: &Quaternion) -> Result<Matrix3<f64>> {
    let n = q.norm();
    if !n.is_finite() || (n - 1.0).abs() > UNIT_TOLERANCE {
        return Err(Error::Precondition(format!(
            "quaternion norm {n} is not unit within {UNIT_TOLERANCE}"
        )));
    }
    Ok(q.matrix_unchecked())
}

/// Canonical unit quaternion of a rotation matrix (Shepperd's method).
pub fn matrix_to_quat(m: &Matrix3<f64>) -> Quaternion {
    let trace = m[(0, 0)] + m[(1, 1)] + m[(2, 2)];
    let q = if trace > 0.0 {
        let s = (trace + 1.0).sqrt() * 2.0;
        Quaternion::new(
            0.25 * s,
            (m[(2, 1)] - m[(1, 2)]) / s,
            (m[(0, 2)] - m[(2, 0)]) / s,
            (m[(1, 0)] - m[(0, 1)]) / s,
        )
    } else if m[(0, 0)] > m[(1, 1)] && m[(0, 0)] > m[(2, 2)] {
        let s = (1.0 + m[(0, 0)] - m[(1, 1)] - m[(2, 2)]).sqrt() * 2.0;
        Quaternion::new(
            (m[(2, 1)] - m[(1, 2)]) / s,
            0.25 * s,
            (m[(0, 1)] + m[(1, 0)]) / s,
            (m[(0, 2)] + m[(2, 0)]) / s,
        )
    } else if m[(1, 1)] > m[(2, 2)] {
        let s = (1.0 + m[(1, 1)] - m[(0, 0)] - m[(2, 2)]).sqrt() * 2.0;
        Quaternion::new(
            (m[(0, 2)] - m[(2, 0)]) / s,
            (m[(0, 1)] + m[(1, 0)]) / s,
            0.25 * s,
            (m[(1, 2)] + m[(2, 1)]) / s,
        )
    } else {
        let s = (1.0 + m[(2, 2)] - m[(0, 0)] - m[(1, 1)]).sqrt() * 2.0;
        Quaternion::new(
            (m[(1, 0)] - m[(0, 1)]) / s,
            (m[(0, 2)] + m[(2, 0)]) / s,
            (m[(1, 2)] + m[(2, 1)]) / s,
            0.25 * s,
        )
    };
    q.normalize().canonical()
}

/// Rigid camera-to-world transform.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub rotation: Quaternion,
    pub translation: Vector3<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: Quaternion::IDENTITY,
            translation: Vector3::zeros(),
        }
    }

    /// Builds a pose, normalizing and canonicalizing the rotation.
    pub fn new(rotation: Quaternion, translation: Vector3<f64>) -> Self {
        Self {
            rotation: rotation.normalize().canonical(),
            translation,
        }
    }

    pub fn from_rotation_matrix(rotation: &Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation: matrix_to_quat(rotation),
            translation,
        }
    }

    pub fn random<R: Rng + ?Sized>(rng: &mut R, translation_scale: f64) -> Self {
        let t: [f64; 3] = std::array::from_fn(|_| rng.sample::<f64, _>(StandardNormal));
        Self::new(
            Quaternion::random(rng),
            Vector3::from(t) * translation_scale,
        )
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.rotation.matrix_unchecked()
    }

    /// 4×4 homogeneous matrix.
    pub fn matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0)
            .copy_from(&self.rotation_matrix());
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    pub fn inverse(&self) -> Self {
        let inv = self.rotation.conjugate();
        Self::new(inv, -inv.rotate(&self.translation))
    }

    /// `self ∘ rhs`, i.e. the homogeneous product `self.matrix() * rhs.matrix()`.
    pub fn compose(&self, rhs: &Pose) -> Self {
        Self::new(
            self.rotation.mul(&rhs.rotation),
            self.rotation.rotate(&rhs.translation) + self.translation,
        )
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.rotate(p) + self.translation
    }

    /// Optical axis (camera +z) in world coordinates.
    pub fn optical_axis(&self) -> Vector3<f64> {
        self.rotation.rotate(&Vector3::z())
    }
}

pub fn compose(a: &Pose, b: &Pose) -> Pose {
    a.compose(b)
}

/// Pose of `target` expressed in the frame of `reference`:
/// `inverse(reference) ∘ target`.
pub fn relative_pose(reference: &Pose, target: &Pose) -> Pose {
    reference.inverse().compose(target)
}

/// Angle of the residual rotation `R_estᵀ R_gt`, in radians within `[0, π]`.
pub fn rotation_geodesic_error(r_est: &Matrix3<f64>, r_gt: &Matrix3<f64>) -> f64 {
    let trace = (r_est.transpose() * r_gt).trace();
    ((trace - 1.0) / 2.0).clamp(-1.0, 1.0).acos()
}

/// Angle of the rotation taking `a` to `b`, from the quaternion residual via
/// `atan2`. Same quantity as [`rotation_geodesic_error`] but without the
/// `arccos` precision floor near zero (about 1e-8 rad).
pub fn rotation_angle_between(a: &Quaternion, b: &Quaternion) -> f64 {
    let r = a.conjugate().mul(b);
    let v = (r.x * r.x + r.y * r.y + r.z * r.z).sqrt();
    2.0 * v.atan2(r.w.abs())
}

/// Angle between two translation directions, in radians within `[0, π]`.
///
/// Both shorter than [`DIRECTION_EPSILON`] gives 0; exactly one gives π.
pub fn translation_angular_error(t_est: &Vector3<f64>, t_gt: &Vector3<f64>) -> f64 {
    let (ne, ng) = (t_est.norm(), t_gt.norm());
    match (ne < DIRECTION_EPSILON, ng < DIRECTION_EPSILON) {
        (true, true) => 0.0,
        (true, false) | (false, true) => std::f64::consts::PI,
        (false, false) => (t_est.dot(t_gt) / (ne * ng)).clamp(-1.0, 1.0).acos(),
    }
}

/// The 9-dim regression target: quaternion, translation (meters) and
/// horizontal/vertical field of view (radians).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraVector {
    pub q: Quaternion,
    pub t: Vector3<f64>,
    pub fov: [f64; 2],
}

impl CameraVector {
    pub const DIM: usize = 9;

    pub fn from_pose(pose: &Pose, fov: [f64; 2]) -> Self {
        Self {
            q: pose.rotation,
            t: pose.translation,
            fov,
        }
    }

    pub fn pose(&self) -> Pose {
        Pose::new(self.q, self.t)
    }

    pub fn to_array(&self) -> [f64; 9] {
        [
            self.q.w, self.q.x, self.q.y, self.q.z, self.t.x, self.t.y, self.t.z, self.fov[0],
            self.fov[1],
        ]
    }

    pub fn from_slice(v: &[f64]) -> Result<Self> {
        if v.len() != Self::DIM {
            return Err(Error::DimensionMismatch {
                context: "camera vector",
                expected: Self::DIM,
                actual: v.len(),
            });
        }
        Ok(Self {
            q: Quaternion::from_slice(&v[0..4]),
            t: Vector3::new(v[4], v[5], v[6]),
            fov: [v[7], v[8]],
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum TranslationAverage {
    #[default]
    Median,
    Mean,
}

/// Fuses absolute-pose candidates into one pose.
///
/// Rotation is the principal eigenvector of `Σ wᵢ qᵢqᵢᵀ` (candidates sign
/// aligned to the first one), found by power iteration on the 16th power of
/// that matrix. Translation is the component-wise weighted median (lower
/// median on ties) or weighted mean.
pub fn motion_average(
    candidates: &[Pose],
    weights: Option<&[f64]>,
    translation: TranslationAverage,
) -> Result<Pose> {
    let first = candidates
        .first()
        .ok_or(Error::Empty("motion_average candidates"))?;
    let uniform;
    let weights = match weights {
        Some(w) => {
            if w.len() != candidates.len() {
                return Err(Error::DimensionMismatch {
                    context: "motion_average weights",
                    expected: candidates.len(),
                    actual: w.len(),
                });
            }
            if w.iter().any(|x| !(*x >= 0.0) || !x.is_finite()) {
                return Err(Error::Precondition("weights must be nonnegative".into()));
            }
            if w.iter().all(|x| *x == 0.0) {
                return Err(Error::Precondition("weights are all zero".into()));
            }
            w
        }
        None => {
            uniform = vec![1.0; candidates.len()];
            &uniform
        }
    };
    if candidates.len() == 1 {
        return Ok(*first);
    }

    let reference = first.rotation;
    let mut scatter = nalgebra::Matrix4::<f64>::zeros();
    let mut seed = Vector4::zeros();
    for (pose, &w) in candidates.iter().zip(weights) {
        let mut q = pose.rotation.as_vector();
        if q.dot(&reference.as_vector()) < 0.0 {
            q = -q;
        }
        scatter += w * q * q.transpose();
        seed += w * q;
    }
    let rotation = principal_eigenvector(&scatter, seed)?;

    let t = match translation {
        TranslationAverage::Median => Vector3::from_fn(|axis, _| {
            let values: Vec<f64> = candidates.iter().map(|p| p.translation[axis]).collect();
            weighted_lower_median(&values, weights)
        }),
        TranslationAverage::Mean => {
            let total: f64 = weights.iter().sum();
            candidates
                .iter()
                .zip(weights)
                .fold(Vector3::zeros(), |acc, (p, &w)| acc + p.translation * w)
                / total
        }
    };
    Ok(Pose::new(
        Quaternion::new(rotation[0], rotation[1], rotation[2], rotation[3]),
        t,
    ))
}

fn principal_eigenvector(
    m: &nalgebra::Matrix4<f64>,
    seed: Vector4<f64>,
) -> Result<Vector4<f64>> {
    let scale = m.trace();
    if !(scale > 0.0) {
        return Err(Error::Precondition("degenerate rotation scatter".into()));
    }
    let m = m / scale;
    let mut accel = m;
    for _ in 0..4 {
        accel = accel * accel;
        accel /= accel.norm();
    }
    let mut v = if seed.norm() > 1e-12 {
        seed.normalize()
    } else {
        Vector4::new(1.0, 0.0, 0.0, 0.0)
    };
    let mut residual = f64::INFINITY;
    for _ in 0..POWER_ITERATION_CAP {
        let next = accel * v;
        let n = next.norm();
        if n == 0.0 {
            break;
        }
        v = next / n;
        let mv = m * v;
        let lambda = v.dot(&mv);
        residual = (mv - v * lambda).norm();
        if residual <= POWER_ITERATION_TOL {
            return Ok(v);
        }
    }
    Err(Error::NoConvergence {
        iterations: POWER_ITERATION_CAP,
        residual,
    })
}

/// Smallest value whose cumulative weight reaches half the total.
pub(crate) fn weighted_lower_median(values: &[f64], weights: &[f64]) -> f64 {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let half = 0.5 * weights.iter().sum::<f64>();
    let mut acc = 0.0;
    for &i in &order {
        acc += weights[i];
        if acc >= half {
            return values[i];
        }
    }
    values[order[order.len() - 1]]
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, PI};

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    fn pose_distance(a: &Pose, b: &Pose) -> (f64, f64) {
        (
            rotation_angle_between(&a.rotation, &b.rotation),
            (a.translation - b.translation).norm(),
        )
    }

    #[test]
    fn identity_quaternion_gives_identity_matrix() {
        let m = quat_to_matrix(&Quaternion::IDENTITY).unwrap();
        assert_eq!(m, Matrix3::identity());
    }

    #[test]
    fn quarter_turn_about_z() {
        let q = Quaternion::new(FRAC_PI_4.cos(), 0.0, 0.0, FRAC_PI_4.sin());
        let m = quat_to_matrix(&q).unwrap();
        assert!((m[(0, 1)] + 1.0).abs() < 1e-12);
        assert!((m[(1, 0)] - 1.0).abs() < 1e-12);
        assert!((m[(2, 2)] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn non_unit_quaternion_rejected() {
        let q = Quaternion::new(1.0, 0.1, 0.0, 0.0);
        assert!(matches!(quat_to_matrix(&q), Err(Error::Precondition(_))));
    }

    #[test]
    fn matrix_round_trip_and_double_cover() {
        let mut rng = rng();
        for _ in 0..1000 {
            let q = Quaternion::random(&mut rng);
            let m = quat_to_matrix(&q).unwrap();
            assert!((m.determinant() - 1.0).abs() < 1e-9);
            assert!((m.transpose() * m - Matrix3::identity()).norm() < 1e-9);
            let back = matrix_to_quat(&m);
            assert!(back.dot(&q).abs() > 1.0 - 1e-12);
            assert!((quat_to_matrix(&q.neg()).unwrap() - m).norm() < 1e-15);
        }
    }

    #[test]
    fn canonical_sign_rule() {
        assert_eq!(
            Quaternion::new(-0.5, 0.5, 0.5, 0.5).canonical(),
            Quaternion::new(0.5, -0.5, -0.5, -0.5)
        );
        assert_eq!(
            Quaternion::new(0.0, 0.0, -1.0, 0.0).canonical(),
            Quaternion::new(0.0, 0.0, 1.0, 0.0)
        );
    }

    #[test]
    fn compose_matches_matrix_product() {
        let mut rng = rng();
        for _ in 0..200 {
            let a = Pose::random(&mut rng, 3.0);
            let b = Pose::random(&mut rng, 3.0);
            let lhs = a.compose(&b).matrix();
            assert!((lhs - a.matrix() * b.matrix()).norm() < 1e-9);
        }
    }

    #[test]
    fn compose_with_identity_and_inverse() {
        let mut rng = rng();
        let p = Pose::random(&mut rng, 2.0);
        let same = p.compose(&Pose::identity());
        assert_eq!(pose_distance(&same, &p), (0.0, 0.0));
        let (r, t) = pose_distance(&p.compose(&p.inverse()), &Pose::identity());
        assert!(r < 1e-9 && t < 1e-9);
    }

    #[test]
    fn relative_pose_examples() {
        let mut rng = rng();
        let p = Pose::random(&mut rng, 1.0);
        let (r, t) = pose_distance(&relative_pose(&p, &p), &Pose::identity());
        assert!(r < 1e-9 && t < 1e-12);

        let target = Pose::new(Quaternion::IDENTITY, Vector3::new(1.0, 0.0, 0.0));
        let rel = relative_pose(&Pose::identity(), &target);
        assert_eq!(rel.translation, Vector3::new(1.0, 0.0, 0.0));
    }

    #[test]
    fn relative_pose_round_trip() {
        let mut rng = rng();
        for _ in 0..500 {
            let reference = Pose::random(&mut rng, 5.0);
            let target = Pose::random(&mut rng, 5.0);
            let back = reference.compose(&relative_pose(&reference, &target));
            let (r, t) = pose_distance(&back, &target);
            assert!(r < 1e-9 && t < 1e-9, "r={r} t={t}");
        }
    }

    #[test]
    fn geodesic_error_closed_forms() {
        let id = Matrix3::identity();
        assert_eq!(rotation_geodesic_error(&id, &id), 0.0);
        let half = Quaternion::from_axis_angle(&Vector3::z(), PI).matrix_unchecked();
        assert!((rotation_geodesic_error(&half, &id) - PI).abs() < 1e-12);
        let quarter = Quaternion::from_axis_angle(&Vector3::z(), FRAC_PI_2).matrix_unchecked();
        assert!((rotation_geodesic_error(&quarter, &id) - FRAC_PI_2).abs() < 1e-12);
    }

    #[test]
    fn geodesic_error_symmetric_and_triangle() {
        let mut rng = rng();
        for _ in 0..200 {
            let [a, b, c] = std::array::from_fn(|_| Quaternion::random(&mut rng).matrix_unchecked());
            let ab = rotation_geodesic_error(&a, &b);
            assert!((ab - rotation_geodesic_error(&b, &a)).abs() < 1e-12);
            let ac = rotation_geodesic_error(&a, &c);
            let cb = rotation_geodesic_error(&c, &b);
            assert!(ab <= ac + cb + 1e-8);
        }
    }

    #[test]
    fn stable_angle_agrees_with_geodesic() {
        let mut rng = rng();
        for _ in 0..200 {
            let a = Quaternion::random(&mut rng);
            let b = Quaternion::random(&mut rng);
            let slow = rotation_geodesic_error(&a.matrix_unchecked(), &b.matrix_unchecked());
            assert!((rotation_angle_between(&a, &b) - slow).abs() < 1e-7);
        }
        let q = Quaternion::random(&mut rng);
        assert!(rotation_angle_between(&q, &q.neg()) < 1e-15);
    }

    #[test]
    fn translation_angle_cases() {
        let x = Vector3::x();
        assert_eq!(translation_angular_error(&x, &x), 0.0);
        assert!((translation_angular_error(&Vector3::y(), &x) - FRAC_PI_2).abs() < 1e-15);
        let tiny = Vector3::new(1e-7, 0.0, 0.0);
        assert_eq!(translation_angular_error(&tiny, &Vector3::zeros()), 0.0);
        assert_eq!(translation_angular_error(&tiny, &x), PI);
        assert_eq!(translation_angular_error(&x, &tiny), PI);
    }

    #[test]
    fn motion_average_basic_cases() {
        let mut rng = rng();
        let p = Pose::random(&mut rng, 1.0);
        assert_eq!(
            motion_average(&[p], None, TranslationAverage::Median).unwrap(),
            p
        );
        let avg = motion_average(&[p; 5], None, TranslationAverage::Median).unwrap();
        let (r, t) = pose_distance(&avg, &p);
        assert!(r < 1e-9 && t == 0.0);

        assert!(matches!(
            motion_average(&[], None, TranslationAverage::Median),
            Err(Error::Empty(_))
        ));
        assert!(motion_average(&[p, p], Some(&[0.0, 0.0]), TranslationAverage::Median).is_err());
        assert!(motion_average(&[p, p], Some(&[-1.0, 2.0]), TranslationAverage::Median).is_err());
    }

    #[test]
    fn symmetric_rotations_average_to_identity() {
        let ten = 10f64.to_radians();
        let a = Pose::new(Quaternion::from_axis_angle(&Vector3::z(), ten), Vector3::zeros());
        let b = Pose::new(Quaternion::from_axis_angle(&Vector3::z(), -ten), Vector3::zeros());
        let avg = motion_average(&[a, b], None, TranslationAverage::Median).unwrap();
        let err = rotation_geodesic_error(&avg.rotation_matrix(), &Matrix3::identity());
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn median_translation_is_lower_median() {
        let poses: Vec<Pose> = [1.0, 4.0, 2.0, 3.0]
            .iter()
            .map(|&x| Pose::new(Quaternion::IDENTITY, Vector3::new(x, 0.0, 0.0)))
            .collect();
        let avg = motion_average(&poses, None, TranslationAverage::Median).unwrap();
        assert_eq!(avg.translation.x, 2.0);
        let mean = motion_average(&poses, None, TranslationAverage::Mean).unwrap();
        assert!((mean.translation.x - 2.5).abs() < 1e-15);
    }

    #[test]
    fn antipodal_candidates_are_aligned() {
        let q = Quaternion::from_axis_angle(&Vector3::new(1.0, 2.0, 3.0), 0.4);
        let a = Pose { rotation: q, translation: Vector3::zeros() };
        let b = Pose { rotation: q.neg(), translation: Vector3::zeros() };
        let avg = motion_average(&[a, b], None, TranslationAverage::Mean).unwrap();
        assert!(avg.rotation.dot(&q).abs() > 1.0 - 1e-12);
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        fn poses(seed: u64, n: usize) -> Vec<Pose> {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..n).map(|_| Pose::random(&mut rng, 10.0)).collect()
        }

        proptest! {
            #[test]
            fn compose_with_inverse_is_identity(seed in any::<u64>()) {
                let p = poses(seed, 1)[0];
                let (r, t) = pose_distance(&p.compose(&p.inverse()), &Pose::identity());
                prop_assert!(r <= 1e-9 && t <= 1e-9);
            }

            #[test]
            fn relative_pose_recovers_target(seed in any::<u64>()) {
                let v = poses(seed, 2);
                let (r, t) = pose_distance(&v[0].compose(&relative_pose(&v[0], &v[1])), &v[1]);
                prop_assert!(r <= 1e-9 && t <= 1e-9);
            }

            #[test]
            fn rotations_stay_unit_and_canonical(seed in any::<u64>()) {
                let v = poses(seed, 2);
                for p in [v[0].compose(&v[1]), v[0].inverse(), relative_pose(&v[0], &v[1])] {
                    prop_assert!((p.rotation.norm() - 1.0).abs() <= 1e-9);
                    prop_assert!(p.rotation.is_canonical());
                }
            }

            #[test]
            fn matrix_round_trip_up_to_sign(seed in any::<u64>()) {
                let q = poses(seed, 1)[0].rotation;
                let back = matrix_to_quat(&quat_to_matrix(&q).unwrap());
                prop_assert!(back.dot(&q).abs() >= 1.0 - 1e-12);
            }

            #[test]
            fn motion_average_ignores_candidate_order(seed in any::<u64>(), n in 1usize..8) {
                let base = poses(seed, 1)[0];
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
                let mut cands: Vec<Pose> = (0..n)
                    .map(|_| {
                        let d = Pose::random(&mut rng, 0.1);
                        let small = Quaternion::new(1.0, 0.05 * d.rotation.x, 0.05 * d.rotation.y, 0.05 * d.rotation.z).normalize();
                        base.compose(&Pose::new(small, d.translation))
                    })
                    .collect();
                let a = motion_average(&cands, None, TranslationAverage::Median).unwrap();
                cands.reverse();
                let b = motion_average(&cands, None, TranslationAverage::Median).unwrap();
                let (r, t) = pose_distance(&a, &b);
                prop_assert!(r <= 1e-9 && t == 0.0);
            }
        }
    }
}
