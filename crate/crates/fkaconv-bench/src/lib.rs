//! Shared fixtures for the criterion benches.

use fkaconv::synth::{generate, SceneKind, SceneSpec};
use fkaconv::PointCloud;

pub fn uniform_cube(n: usize, seed: u64) -> PointCloud {
    generate(&SceneSpec::new(SceneKind::UniformCube, n, 0.0, seed)).expect("scene generation")
}
