//! Synthetic posed scenes: landmarks in a unit box and camera trajectories
//! that look toward the landmark centroid.

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pose::{Pose, Quaternion};

pub type FrameId = u32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Trajectory {
    /// Cameras on a sphere around the centroid, spread in azimuth.
    Orbit,
    /// Smoothly perturbed walk at bounded distance from the centroid.
    RandomWalk,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Noise {
    pub rot_deg: f64,
    pub trans_m: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub n_landmarks: usize,
    pub trajectory: Trajectory,
    /// Database frames.
    pub n_frames: usize,
    pub n_queries: usize,
    pub noise: Noise,
    /// Horizontal and vertical field of view, radians.
    pub fov: [f64; 2],
    pub seed: u64,
    /// Orbit radius (horizontal) and camera height above the centroid.
    #[serde(default = "default_radius")]
    pub radius: f64,
    #[serde(default = "default_height")]
    pub height: f64,
}

fn default_radius() -> f64 {
    3.0
}

fn default_height() -> f64 {
    0.6
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            n_landmarks: 300,
            trajectory: Trajectory::Orbit,
            n_frames: 36,
            n_queries: 8,
            noise: Noise {
                rot_deg: 2.0,
                trans_m: 0.05,
            },
            fov: [1.0, 0.8],
            seed: 0,
            radius: default_radius(),
            height: default_height(),
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_frames < 2 {
            return Err(Error::Config("scene needs at least two frames".into()));
        }
        if !(self.noise.rot_deg >= 0.0 && self.noise.trans_m >= 0.0) {
            return Err(Error::Config("noise must be nonnegative".into()));
        }
        if self.fov.iter().any(|f| !(*f > 0.0 && *f < std::f64::consts::PI)) {
            return Err(Error::Config("field of view must lie in (0, π)".into()));
        }
        if !(self.radius > 0.0) {
            return Err(Error::Config("radius must be positive".into()));
        }
        Ok(())
    }
}

/// A posed frame (camera-to-world).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub id: FrameId,
    #[serde(with = "pose_serde")]
    pub pose: Pose,
    pub feature_seed: u64,
    pub fov: [f64; 2],
}

/// Posed database frames; the source of retrieval and ground truth.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct SceneDatabase {
    pub frames: Vec<Frame>,
}

impl SceneDatabase {
    pub fn new(frames: Vec<Frame>) -> Result<Self> {
        let mut ids: Vec<FrameId> = frames.iter().map(|f| f.id).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Precondition("duplicate frame id in database".into()));
        }
        Ok(Self { frames })
    }

    pub fn get(&self, id: FrameId) -> Option<&Frame> {
        self.frames.iter().find(|f| f.id == id)
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Mean camera-center distance to the centroid of all frames.
    pub fn scene_scale(&self) -> f64 {
        mean_distance_to_centroid(self.frames.iter().map(|f| f.pose.translation))
    }
}

pub fn mean_distance_to_centroid(centers: impl Iterator<Item = Vector3<f64>> + Clone) -> f64 {
    let n = centers.clone().count();
    if n == 0 {
        return 0.0;
    }
    let centroid = centers.clone().fold(Vector3::zeros(), |a, c| a + c) / n as f64;
    centers.map(|c| (c - centroid).norm()).sum::<f64>() / n as f64
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub landmarks: Vec<Vector3<f64>>,
    pub db: SceneDatabase,
    /// Query frames with their ground-truth poses.
    pub queries: Vec<Frame>,
}

impl Scene {
    pub fn centroid(&self) -> Vector3<f64> {
        self.landmarks.iter().fold(Vector3::zeros(), |a, p| a + p) / self.landmarks.len().max(1) as f64
    }

    /// Uniformly scales landmarks and camera centers about the origin.
    pub fn scaled(&self, s: f64) -> Scene {
        let scale_frame = |f: &Frame| Frame {
            pose: Pose {
                translation: f.pose.translation * s,
                ..f.pose
            },
            ..f.clone()
        };
        Scene {
            landmarks: self.landmarks.iter().map(|p| p * s).collect(),
            db: SceneDatabase {
                frames: self.db.frames.iter().map(scale_frame).collect(),
            },
            queries: self.queries.iter().map(scale_frame).collect(),
        }
    }
}

/// Camera-to-world rotation whose optical axis (+z) points from `center` to
/// `target`, with image +y pointing down relative to world +z.
pub fn look_at(center: &Vector3<f64>, target: &Vector3<f64>) -> Quaternion {
    let forward = (target - center).normalize();
    let up = if forward.cross(&Vector3::z()).norm() < 1e-9 {
        Vector3::y()
    } else {
        Vector3::z()
    };
    let right = forward.cross(&up).normalize();
    let down = forward.cross(&right);
    let m = Matrix3::from_columns(&[right, down, forward]);
    crate::pose::matrix_to_quat(&m)
}

fn jitter<R: Rng>(rng: &mut R, rot_deg: f64) -> Quaternion {
    if rot_deg == 0.0 {
        return Quaternion::IDENTITY;
    }
    let normal = Normal::new(0.0, rot_deg.to_radians()).expect("finite std");
    let axis = Vector3::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5);
    Quaternion::from_axis_angle(&axis, normal.sample(rng))
}

fn gaussian<R: Rng>(rng: &mut R, std: f64) -> f64 {
    if std == 0.0 {
        0.0
    } else {
        Normal::new(0.0, std).expect("finite std").sample(rng)
    }
}

/// Deterministic scene from a spec.
pub fn generate_scene(spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let landmarks: Vec<Vector3<f64>> = (0..spec.n_landmarks)
        .map(|_| Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
        .collect();
    let centroid = if landmarks.is_empty() {
        Vector3::zeros()
    } else {
        landmarks.iter().fold(Vector3::zeros(), |a, p| a + p) / landmarks.len() as f64
    };

    let total = spec.n_frames + spec.n_queries;
    let centers: Vec<Vector3<f64>> = match spec.trajectory {
        Trajectory::Orbit => orbit_centers(spec, &centroid, &mut rng),
        Trajectory::RandomWalk => walk_centers(spec, &centroid, &mut rng),
    };
    let frames: Vec<Frame> = centers
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let rotation = look_at(c, &centroid).mul(&jitter(&mut rng, spec.noise.rot_deg));
            Frame {
                id: i as FrameId,
                pose: Pose::new(rotation, *c),
                feature_seed: rng.random(),
                fov: spec.fov,
            }
        })
        .collect();
    debug_assert_eq!(frames.len(), total);
    let mut frames = frames;
    let queries = frames.split_off(spec.n_frames);
    Ok(Scene {
        landmarks,
        db: SceneDatabase::new(frames)?,
        queries,
    })
}

/// Database frames evenly spaced in azimuth (with angular jitter that keeps
/// them on the sphere), queries at uniformly random azimuths.
fn orbit_centers<R: Rng>(spec: &SceneSpec, centroid: &Vector3<f64>, rng: &mut R) -> Vec<Vector3<f64>> {
    let distance = spec.radius.hypot(spec.height);
    let base_elevation = spec.height.atan2(spec.radius);
    let angular_noise = spec.noise.trans_m / distance;
    let on_sphere = |azimuth: f64, elevation: f64| {
        centroid
            + distance
                * Vector3::new(
                    elevation.cos() * azimuth.cos(),
                    elevation.cos() * azimuth.sin(),
                    elevation.sin(),
                )
    };
    let step = std::f64::consts::TAU / spec.n_frames as f64;
    let mut out = Vec::with_capacity(spec.n_frames + spec.n_queries);
    for i in 0..spec.n_frames {
        let az = i as f64 * step + gaussian(rng, angular_noise);
        let el = base_elevation + gaussian(rng, angular_noise);
        out.push(on_sphere(az, el));
    }
    for _ in 0..spec.n_queries {
        let az = rng.random_range(0.0..std::f64::consts::TAU);
        let el = base_elevation + gaussian(rng, angular_noise);
        out.push(on_sphere(az, el));
    }
    out
}

/// Smooth walk kept between 0.6× and 1.4× the nominal distance; queries are
/// noisy interpolations between consecutive database centers.
fn walk_centers<R: Rng>(spec: &SceneSpec, centroid: &Vector3<f64>, rng: &mut R) -> Vec<Vector3<f64>> {
    let distance = spec.radius.hypot(spec.height);
    let step_len = distance * std::f64::consts::TAU / spec.n_frames as f64 * 0.5;
    let mut position = centroid + Vector3::new(spec.radius, 0.0, spec.height);
    let mut heading = Vector3::new(0.0, 1.0, 0.0);
    let mut out = Vec::with_capacity(spec.n_frames + spec.n_queries);
    for _ in 0..spec.n_frames {
        out.push(position);
        let turn = Vector3::new(gaussian(rng, 0.3), gaussian(rng, 0.3), gaussian(rng, 0.1));
        heading = (heading + turn).normalize();
        position += heading * step_len;
        let offset = position - centroid;
        let r = offset.norm().clamp(0.6 * distance, 1.4 * distance);
        position = centroid + offset.normalize() * r;
    }
    for _ in 0..spec.n_queries {
        let i = rng.random_range(0..spec.n_frames - 1);
        let f: f64 = rng.random();
        let noise = Vector3::new(
            gaussian(rng, spec.noise.trans_m),
            gaussian(rng, spec.noise.trans_m),
            gaussian(rng, spec.noise.trans_m),
        );
        out.push(out[i] * (1.0 - f) + out[i + 1] * f + noise);
    }
    out
}

pub(crate) mod pose_serde {
    use nalgebra::Vector3;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    use crate::pose::{Pose, Quaternion};

    #[derive(Serialize, Deserialize)]
    struct Raw {
        q: [f64; 4],
        t: [f64; 3],
    }

    pub fn serialize<S: Serializer>(p: &Pose, s: S) -> Result<S::Ok, S::Error> {
        Raw {
            q: p.rotation.as_array(),
            t: [p.translation.x, p.translation.y, p.translation.z],
        }
        .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Pose, D::Error> {
        let r = Raw::deserialize(d)?;
        Ok(Pose::new(Quaternion::from_slice(&r.q), Vector3::from(r.t)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_scene() {
        let spec = SceneSpec {
            seed: 42,
            ..SceneSpec::default()
        };
        assert_eq!(generate_scene(&spec).unwrap(), generate_scene(&spec).unwrap());
        let walk = SceneSpec {
            trajectory: Trajectory::RandomWalk,
            ..spec
        };
        assert_eq!(generate_scene(&walk).unwrap(), generate_scene(&walk).unwrap());
    }

    #[test]
    fn orbit_is_equidistant() {
        let scene = generate_scene(&SceneSpec {
            seed: 3,
            ..SceneSpec::default()
        })
        .unwrap();
        let c = scene.centroid();
        let d0 = (scene.db.frames[0].pose.translation - c).norm();
        for f in scene.db.frames.iter().chain(&scene.queries) {
            assert!(((f.pose.translation - c).norm() - d0).abs() < 1e-9);
        }
    }

    #[test]
    fn cameras_face_the_centroid() {
        let scene = generate_scene(&SceneSpec {
            noise: Noise { rot_deg: 0.0, trans_m: 0.0 },
            ..SceneSpec::default()
        })
        .unwrap();
        let c = scene.centroid();
        for f in &scene.db.frames {
            let dir = (c - f.pose.translation).normalize();
            assert!((f.pose.optical_axis() - dir).norm() < 1e-9);
        }
    }

    #[test]
    fn minimal_scene() {
        let scene = generate_scene(&SceneSpec {
            n_frames: 2,
            n_queries: 0,
            ..SceneSpec::default()
        })
        .unwrap();
        assert_eq!(scene.db.len(), 2);
        assert!(generate_scene(&SceneSpec {
            n_frames: 1,
            ..SceneSpec::default()
        })
        .is_err());
    }

    #[test]
    fn scaling_scales_scene_scale() {
        let scene = generate_scene(&SceneSpec::default()).unwrap();
        let scaled = scene.scaled(2.5);
        assert!((scaled.db.scene_scale() - 2.5 * scene.db.scene_scale()).abs() < 1e-12);
    }

    #[test]
    fn duplicate_ids_rejected() {
        let f = Frame {
            id: 1,
            pose: Pose::identity(),
            feature_seed: 0,
            fov: [1.0, 1.0],
        };
        assert!(SceneDatabase::new(vec![f.clone(), f]).is_err());
    }
}
