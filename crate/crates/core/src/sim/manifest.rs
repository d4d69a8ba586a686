//! Scene manifests: a JSON index of the pose files written for a scene.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pose::Pose;

use super::posefile::{read_pose_file, write_pose_file};
use super::scene::{Frame, FrameId, Scene, SceneDatabase};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Db,
    Query,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestFrame {
    pub id: FrameId,
    /// Relative to the manifest's directory.
    pub pose_path: String,
    pub role: Role,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub scene_scale: f64,
    pub fov: [f64; 2],
    pub frames: Vec<ManifestFrame>,
}

impl Manifest {
    pub fn read(path: &Path) -> Result<Self> {
        let manifest: Manifest = serde_json::from_str(&fs::read_to_string(path)?)?;
        let mut ids: Vec<FrameId> = manifest.frames.iter().map(|f| f.id).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::PoseFormat("duplicate frame id in manifest".into()));
        }
        Ok(manifest)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    /// Reads every referenced pose file, in manifest order.
    pub fn load_poses(&self, dir: &Path) -> Result<Vec<(ManifestFrame, Pose)>> {
        self.frames
            .iter()
            .map(|f| Ok((f.clone(), read_pose_file(&dir.join(&f.pose_path))?)))
            .collect()
    }

    /// Rebuilds the database and the queries from the pose files.
    pub fn load_frames(&self, dir: &Path) -> Result<(SceneDatabase, Vec<Frame>)> {
        let mut db = Vec::new();
        let mut queries = Vec::new();
        for (f, pose) in self.load_poses(dir)? {
            let frame = Frame {
                id: f.id,
                pose,
                feature_seed: u64::from(f.id),
                fov: self.fov,
            };
            match f.role {
                Role::Db => db.push(frame),
                Role::Query => queries.push(frame),
            }
        }
        Ok((SceneDatabase::new(db)?, queries))
    }
}

fn pose_name(role: Role, id: FrameId) -> String {
    match role {
        Role::Db => format!("poses/db-{id:05}.pose.txt"),
        Role::Query => format!("poses/query-{id:05}.pose.txt"),
    }
}

/// Writes a pose file per frame into `dir/poses/` and returns the manifest
/// (not yet written).
pub fn write_frames(dir: &Path, fov: [f64; 2], scene_scale: f64, frames: &[(Role, FrameId, Pose)]) -> Result<Manifest> {
    fs::create_dir_all(dir.join("poses"))?;
    let mut entries = Vec::with_capacity(frames.len());
    for &(role, id, pose) in frames {
        let rel = pose_name(role, id);
        write_pose_file(&pose, &dir.join(&rel))?;
        entries.push(ManifestFrame {
            id,
            pose_path: rel,
            role,
        });
    }
    Ok(Manifest {
        scene_scale,
        fov,
        frames: entries,
    })
}

/// Pose files and manifest for a whole scene. Returns the manifest path.
pub fn write_scene(scene: &Scene, dir: &Path) -> Result<PathBuf> {
    let fov = scene
        .db
        .frames
        .first()
        .map(|f| f.fov)
        .ok_or(Error::Empty("scene database"))?;
    let frames: Vec<(Role, FrameId, Pose)> = scene
        .db
        .frames
        .iter()
        .map(|f| (Role::Db, f.id, f.pose))
        .chain(scene.queries.iter().map(|f| (Role::Query, f.id, f.pose)))
        .collect();
    let manifest = write_frames(dir, fov, scene.db.scene_scale(), &frames)?;
    let path = dir.join(MANIFEST_FILE);
    manifest.write(&path)?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pose::rotation_angle_between;
    use crate::sim::scene::{generate_scene, SceneSpec};

    #[test]
    fn manifest_matches_files() {
        let dir = tempfile::tempdir().unwrap();
        let scene = generate_scene(&SceneSpec::default()).unwrap();
        let path = write_scene(&scene, dir.path()).unwrap();
        let manifest = Manifest::read(&path).unwrap();
        assert_eq!(manifest.frames.len(), scene.db.len() + scene.queries.len());
        for f in &manifest.frames {
            assert!(dir.path().join(&f.pose_path).is_file());
        }
        let (db, queries) = manifest.load_frames(dir.path()).unwrap();
        assert_eq!(db.len(), scene.db.len());
        for (a, b) in queries.iter().zip(&scene.queries) {
            assert_eq!(a.id, b.id);
            assert!(rotation_angle_between(&a.pose.rotation, &b.pose.rotation) < 1e-12);
            assert!((a.pose.translation - b.pose.translation).norm() < 1e-12);
        }
        assert!((manifest.scene_scale - scene.db.scene_scale()).abs() < 1e-12);
    }

    #[test]
    fn missing_pose_file_is_an_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let scene = generate_scene(&SceneSpec::default()).unwrap();
        let path = write_scene(&scene, dir.path()).unwrap();
        let manifest = Manifest::read(&path).unwrap();
        fs::remove_file(dir.path().join(&manifest.frames[2].pose_path)).unwrap();
        assert!(matches!(manifest.load_frames(dir.path()), Err(Error::Io(_))));
    }
}
