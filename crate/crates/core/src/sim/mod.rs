//! Synthetic scenes, patch-feature synthesis, file formats and the attention
//! benchmark.

pub mod bench;
pub mod checkpoint;
pub mod features;
pub mod manifest;
pub mod posefile;
pub mod scene;

pub use scene::{generate_scene, Frame, FrameId, Scene, SceneDatabase, SceneSpec, Trajectory};
