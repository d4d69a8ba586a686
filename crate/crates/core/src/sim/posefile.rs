//! 7-Scenes style pose files: a 4×4 camera-to-world homogeneous matrix,
//! row-major, whitespace-separated decimal text.

use std::fs;
use std::path::Path;

use nalgebra::{Matrix3, Matrix4, Vector3};

use crate::error::{Error, Result};
use crate::pose::Pose;

/// Largest `‖RᵀR − I‖` repaired by re-orthonormalization on read.
pub const MAX_ROTATION_DRIFT: f64 = 1e-3;
pub const LAST_ROW_TOLERANCE: f64 = 1e-6;

pub fn format_pose(pose: &Pose) -> String {
    let m = pose.matrix();
    let mut out = String::new();
    for r in 0..4 {
        let row: Vec<String> = (0..4).map(|c| format!("{:e}", m[(r, c)])).collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    out
}

pub fn parse_pose(text: &str) -> Result<Pose> {
    let values: Vec<f64> = text
        .split_whitespace()
        .map(|tok| {
            tok.parse::<f64>()
                .map_err(|_| Error::PoseFormat(format!("not a number: '{tok}'")))
        })
        .collect::<Result<_>>()?;
    if values.len() != 16 {
        return Err(Error::PoseFormat(format!("expected 16 values, found {}", values.len())));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::PoseFormat("non-finite entry".into()));
    }
    let m = Matrix4::from_row_slice(&values);
    let last = [m[(3, 0)], m[(3, 1)], m[(3, 2)], m[(3, 3)] - 1.0];
    if last.iter().any(|v| v.abs() > LAST_ROW_TOLERANCE) {
        return Err(Error::PoseFormat("last row is not (0, 0, 0, 1)".into()));
    }
    let r: Matrix3<f64> = m.fixed_view::<3, 3>(0, 0).into_owned();
    if r.determinant() <= 0.0 {
        return Err(Error::PoseFormat("rotation block is a reflection".into()));
    }
    let drift = (r.transpose() * r - Matrix3::identity()).norm();
    if drift > MAX_ROTATION_DRIFT {
        return Err(Error::PoseFormat(format!("rotation block is not rigid (drift {drift:e})")));
    }
    let svd = r.svd(true, true);
    let (u, v_t) = (svd.u.expect("svd u"), svd.v_t.expect("svd v"));
    let rotation = u * v_t;
    let t: Vector3<f64> = m.fixed_view::<3, 1>(0, 3).into_owned();
    Ok(Pose::from_rotation_matrix(&rotation, t))
}

pub fn write_pose_file(pose: &Pose, path: &Path) -> Result<()> {
    fs::write(path, format_pose(pose))?;
    Ok(())
}

pub fn read_pose_file(path: &Path) -> Result<Pose> {
    parse_pose(&fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pose::rotation_angle_between;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_file() {
        let text = "1 0 0 0\n0 1 0 0\n0 0 1 0\n0 0 0 1\n";
        assert_eq!(parse_pose(text).unwrap(), Pose::identity());
    }

    #[test]
    fn seven_scenes_layout_parses() {
        let text = "  9.9935108e-001\t-3.3865334e-002\t-1.2006510e-002\t-2.1548700e-001\n\
                     3.3972904e-002\t9.9941743e-001\t8.2483972e-003\t-1.0126300e-001\n\
                     1.1720320e-002\t-8.6411349e-003\t9.9989241e-001\t1.1522000e-001\n\
                     0.0000000e+000\t0.0000000e+000\t0.0000000e+000\t1.0000000e+000\n";
        let p = parse_pose(text).unwrap();
        assert!((p.translation.x + 0.215487).abs() < 1e-12);
    }

    #[test]
    fn round_trip_random_poses() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..100 {
            let p = Pose::random(&mut rng, 4.0);
            let back = parse_pose(&format_pose(&p)).unwrap();
            assert!(rotation_angle_between(&back.rotation, &p.rotation) < 1e-12);
            assert!((back.translation - p.translation).norm() < 1e-12);
        }
    }

    #[test]
    fn rejects_bad_files() {
        let reflection = "-1 0 0 0\n0 1 0 0\n0 0 1 0\n0 0 0 1";
        assert!(matches!(parse_pose(reflection), Err(Error::PoseFormat(_))));
        assert!(parse_pose("1 0 0 0\n0 1 0 0\n0 0 1 0").is_err());
        assert!(parse_pose("1 0 0 0\n0 1 0 0\n0 0 1 0\n0 0 0.5 1").is_err());
        assert!(parse_pose("1 0 0 0\n0 1 0 0\n0 0 1 x\n0 0 0 1").is_err());
        assert!(parse_pose("1.1 0 0 0\n0 1 0 0\n0 0 1 0\n0 0 0 1").is_err());
    }

    #[test]
    fn small_drift_is_repaired() {
        let text = "1.0002 0 0 0\n0 1 0 0\n0 0 1 0\n0 0 0 1";
        let p = parse_pose(text).unwrap();
        assert!(rotation_angle_between(&p.rotation, &Pose::identity().rotation) < 1e-12);
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn text_round_trip(seed in any::<u64>(), scale in 0.01f64..100.0) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let p = Pose::random(&mut rng, scale);
                let back = parse_pose(&format_pose(&p)).unwrap();
                prop_assert!(rotation_angle_between(&back.rotation, &p.rotation) <= 1e-9);
                prop_assert!((back.translation - p.translation).norm() <= 1e-9 * scale.max(1.0));
            }
        }
    }
}
