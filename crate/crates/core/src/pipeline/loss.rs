//! Training losses on camera vectors.
//!
//! The pose loss is the sum of the L1 norms of the quaternion, translation
//! and field-of-view differences. Translations are divided by the scene
//! scale before differencing, and the predicted quaternion is normalized and
//! sign-aligned with the target (flipped when their dot product is negative).

use nalgebra::Matrix3;

use crate::autodiff::pose_loss_row;
use crate::error::{Error, Result};
use crate::pose::{rotation_geodesic_error, CameraVector};

/// Weight of the rotation loss relative to the pose loss.
pub const DEFAULT_BETA: f64 = 1.0;

fn normalized_row(v: &CameraVector, scale: f64) -> [f64; 9] {
    let mut a = v.to_array();
    for x in &mut a[4..7] {
        *x /= scale;
    }
    a
}

fn check_scale(scale: f64) -> Result<()> {
    if scale > 0.0 && scale.is_finite() {
        Ok(())
    } else {
        Err(Error::Precondition(format!("scene scale must be positive, got {scale}")))
    }
}

pub fn pose_loss(pred: &CameraVector, gt: &CameraVector, scene_scale: f64) -> Result<f64> {
    Ok(pose_loss_with_grad(pred, gt, scene_scale)?.0)
}

/// Loss and its gradient with respect to the raw prediction (translation in
/// meters). The L1 terms use the subgradient 0 at exact zeros.
pub fn pose_loss_with_grad(pred: &CameraVector, gt: &CameraVector, scene_scale: f64) -> Result<(f64, [f64; 9])> {
    check_scale(scene_scale)?;
    let (loss, mut grad) = pose_loss_row(&normalized_row(pred, scene_scale), &normalized_row(gt, scene_scale));
    for g in &mut grad[4..7] {
        *g /= scene_scale;
    }
    Ok((loss, grad))
}

/// Geodesic angle between two rotation matrices (clamped arccos).
pub fn rotation_loss(pred: &Matrix3<f64>, gt: &Matrix3<f64>) -> f64 {
    rotation_geodesic_error(pred, gt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::rotation_loss_row;
    use crate::pose::{quat_to_matrix, Quaternion};
    use nalgebra::Vector3;
    use proptest::prelude::*;
    use std::f64::consts::{FRAC_PI_2, PI};

    fn gt() -> CameraVector {
        CameraVector {
            q: Quaternion::from_axis_angle(&Vector3::new(0.3, -1.0, 0.2), 0.7),
            t: Vector3::new(0.4, -1.2, 2.0),
            fov: [1.0, 0.8],
        }
    }

    #[test]
    fn zero_at_ground_truth() {
        assert_eq!(pose_loss(&gt(), &gt(), 2.5).unwrap(), 0.0);
        let r = quat_to_matrix(&gt().q).unwrap();
        assert!(rotation_loss(&r, &r) < 1e-7);
        assert_eq!(rotation_loss(&Matrix3::identity(), &Matrix3::identity()), 0.0);
    }

    #[test]
    fn translation_offset_of_one_scale_unit() {
        let s = 3.7;
        let mut pred = gt();
        pred.t.x += s;
        assert!((pose_loss(&pred, &gt(), s).unwrap() - 1.0).abs() < 1e-12);
        assert!(pose_loss(&pred, &gt(), 0.0).is_err());
        assert!(pose_loss(&pred, &gt(), -1.0).is_err());
    }

    #[test]
    fn rotation_closed_forms() {
        let x90 = quat_to_matrix(&Quaternion::from_axis_angle(&Vector3::x(), FRAC_PI_2)).unwrap();
        assert!((rotation_loss(&x90, &Matrix3::identity()) - FRAC_PI_2).abs() < 1e-12);
        let z180 = Matrix3::from_diagonal(&Vector3::new(-1.0, -1.0, 1.0));
        assert!((rotation_loss(&z180, &Matrix3::identity()) - PI).abs() < 1e-12);
        let y90 = quat_to_matrix(&Quaternion::from_axis_angle(&Vector3::y(), FRAC_PI_2)).unwrap();
        assert!((rotation_loss(&(y90 * y90), &Matrix3::identity()) - PI).abs() < 1e-7);
    }

    fn central_difference(f: impl Fn(&[f64]) -> f64, x: &[f64], i: usize, h: f64) -> f64 {
        let mut a = x.to_vec();
        let mut b = x.to_vec();
        a[i] += h;
        b[i] -= h;
        (f(&a) - f(&b)) / (2.0 * h)
    }

    #[test]
    fn pose_loss_gradient_matches_finite_differences() {
        let scale = 1.7;
        let g = gt();
        let pred = CameraVector {
            q: Quaternion::new(0.8, 0.3, -0.45, 0.25),
            t: g.t + Vector3::new(0.3, -0.2, 0.15),
            fov: [g.fov[0] + 0.05, g.fov[1] - 0.04],
        };
        let (_, grad) = pose_loss_with_grad(&pred, &g, scale).unwrap();
        let f = |v: &[f64]| pose_loss(&CameraVector::from_slice(v).unwrap(), &g, scale).unwrap();
        let x = pred.to_array();
        for i in 0..9 {
            let fd = central_difference(f, &x, i, 1e-6);
            assert!((fd - grad[i]).abs() <= 1e-3 * fd.abs().max(1e-2), "component {i}: {fd} vs {}", grad[i]);
        }
    }

    #[test]
    fn rotation_loss_gradient_at_thirty_degrees() {
        let target = Quaternion::from_axis_angle(&Vector3::new(1.0, 2.0, -0.5), 0.4);
        let offset = Quaternion::from_axis_angle(&Vector3::new(-0.3, 0.1, 1.0), 30f64.to_radians());
        let p = target.mul(&offset);
        let pred = [1.3 * p.w, 1.3 * p.x, 1.3 * p.y, 1.3 * p.z];
        let (value, grad) = rotation_loss_row(&pred, &target);
        assert!((value - 30f64.to_radians()).abs() < 1e-9);
        let f = |v: &[f64]| {
            let q = Quaternion::from_slice(v).normalize();
            rotation_loss(&q.matrix_unchecked(), &target.matrix_unchecked())
        };
        for i in 0..4 {
            let fd = central_difference(f, &pred, i, 1e-6);
            assert!((fd - grad[i]).abs() <= 1e-3 * fd.abs().max(1e-3), "component {i}: {fd} vs {}", grad[i]);
        }
    }

    fn quat() -> impl Strategy<Value = Quaternion> {
        prop::array::uniform4(-1.0f64..1.0)
            .prop_filter("nonzero", |v| v.iter().map(|x| x * x).sum::<f64>() > 1e-2)
            .prop_map(|v| Quaternion::new(v[0], v[1], v[2], v[3]).normalize())
    }

    proptest! {
        #[test]
        fn pose_loss_ignores_quaternion_sign(a in quat(), b in quat(), tx in -2.0f64..2.0) {
            let pred = CameraVector { q: a, t: Vector3::new(tx, 0.0, 1.0), fov: [1.0, 0.9] };
            let truth = CameraVector { q: b.canonical(), ..gt() };
            let flipped = CameraVector { q: a.neg(), ..pred };
            let l1 = pose_loss(&pred, &truth, 2.0).unwrap();
            let l2 = pose_loss(&flipped, &truth, 2.0).unwrap();
            let l3 = pose_loss(&pred, &CameraVector { q: truth.q.neg(), ..truth }, 2.0).unwrap();
            prop_assert!((l1 - l2).abs() < 1e-12);
            prop_assert!((l1 - l3).abs() < 1e-12);
        }

        #[test]
        fn rotation_loss_is_symmetric(a in quat(), b in quat()) {
            let (ra, rb) = (a.matrix_unchecked(), b.matrix_unchecked());
            prop_assert!((rotation_loss(&ra, &rb) - rotation_loss(&rb, &ra)).abs() < 1e-12);
        }
    }
}
