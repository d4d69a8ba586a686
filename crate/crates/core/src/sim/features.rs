//! Geometric stand-in for image patch features.
//!
//! Landmarks are projected through a pinhole camera with field-of-view
//! intrinsics and the principal point at the image center. The image plane
//! is split into a `grid × grid` array of cells; each cell summarizes the
//! landmarks that land in it and a fixed random linear map lifts that summary
//! to model width.

use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::Tensor;
use crate::pose::Pose;

/// Points closer than this along the optical axis are not visible.
pub const NEAR_PLANE: f64 = 0.05;

/// Width of the per-cell summary: mean x, mean y (normalized image
/// coordinates in `[-1, 1]`), mean inverse depth, `ln(1 + count)`, occupancy.
pub const CELL_STATS: usize = 5;

const ENCODING_SEED: u64 = 0x5eed_f00d;

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct CellStats {
    pub mean_x: f64,
    pub mean_y: f64,
    pub mean_inverse_depth: f64,
    pub count: usize,
}

impl CellStats {
    fn summary(&self) -> [f64; CELL_STATS] {
        if self.count == 0 {
            return [0.0; CELL_STATS];
        }
        [
            self.mean_x,
            self.mean_y,
            self.mean_inverse_depth,
            (1.0 + self.count as f64).ln(),
            1.0,
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatchFeatures {
    /// `grid² × d_model`, cells in row-major image order.
    pub tokens: Tensor,
    pub cells: Vec<CellStats>,
    /// False when no landmark is visible; the tokens are then all zero.
    pub any_visible: bool,
}

/// Normalized image coordinates of a world point, if it is in front of the
/// camera and inside the field of view.
pub fn project(pose: &Pose, fov: [f64; 2], point: &Vector3<f64>) -> Option<(f64, f64, f64)> {
    let cam = pose.rotation.conjugate().rotate(&(point - pose.translation));
    if cam.z <= NEAR_PLANE {
        return None;
    }
    let x = cam.x / cam.z / (0.5 * fov[0]).tan();
    let y = cam.y / cam.z / (0.5 * fov[1]).tan();
    ((-1.0..=1.0).contains(&x) && (-1.0..=1.0).contains(&y)).then_some((x, y, cam.z))
}

/// Per-cell landmark statistics for one camera.
pub fn cell_statistics(pose: &Pose, fov: [f64; 2], landmarks: &[Vector3<f64>], grid: usize) -> Vec<CellStats> {
    let mut sums = vec![(0.0, 0.0, 0.0, 0usize); grid * grid];
    for p in landmarks {
        if let Some((x, y, z)) = project(pose, fov, p) {
            let col = (((x + 1.0) * 0.5 * grid as f64) as usize).min(grid - 1);
            let row = (((y + 1.0) * 0.5 * grid as f64) as usize).min(grid - 1);
            let s = &mut sums[row * grid + col];
            s.0 += x;
            s.1 += y;
            s.2 += 1.0 / z;
            s.3 += 1;
        }
    }
    sums.into_iter()
        .map(|(x, y, inv, n)| {
            if n == 0 {
                CellStats::default()
            } else {
                let k = n as f64;
                CellStats {
                    mean_x: x / k,
                    mean_y: y / k,
                    mean_inverse_depth: inv / k,
                    count: n,
                }
            }
        })
        .collect()
}

/// The fixed `CELL_STATS × d_model` lifting matrix (same for every scene).
pub fn encoding_matrix(d_model: usize) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(ENCODING_SEED ^ d_model as u64);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    Tensor::from_fn(CELL_STATS, d_model, |_, _| normal.sample(&mut rng))
}

/// `grid²` patch tokens of width `d_model` for a frame.
pub fn synth_features(
    pose: &Pose,
    fov: [f64; 2],
    landmarks: &[Vector3<f64>],
    d_model: usize,
    grid: usize,
) -> PatchFeatures {
    let cells = cell_statistics(pose, fov, landmarks, grid);
    let summary: Vec<f64> = cells.iter().flat_map(|c| c.summary()).collect();
    let tokens = Tensor::from_vec(cells.len(), CELL_STATS, summary).matmul(&encoding_matrix(d_model));
    PatchFeatures {
        any_visible: cells.iter().any(|c| c.count > 0),
        tokens,
        cells,
    }
}
