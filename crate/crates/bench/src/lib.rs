//! Shared fixtures for the glomkit benchmarks: a mid-sized disc scene, a
//! perturbed prediction for it, and a default-sized feature dataset.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use glomkit_core::pixmap::Pixmap;
use glomkit_core::synthgen::{
    circle_scene, hierarchy_dataset, HierarchyConfig, SceneSample, SceneSpec, ToyDataset,
};

/// A 128x128 scene with three well-separated discs.
pub fn scene_128() -> SceneSample {
    let spec = SceneSpec {
        width: 128,
        height: 128,
        objects: vec![(32.0, 32.0, 14.0), (88.0, 56.0, 18.0), (60.0, 96.0, 12.0)],
        seed: 7,
    };
    circle_scene(&spec).expect("fixture scene is valid")
}

/// The scene mask blended toward 0.5 with additive noise, clamped to stay
/// strictly inside (0, 1) so every loss sees an interior-valued input.
pub fn noisy_prediction(scene: &SceneSample, seed: u64) -> Pixmap {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = scene.mask.clone();
    for v in p.data_mut() {
        let blended = 0.5 + (*v - 0.5) * 0.6 + rng.gen_range(-0.15..0.15);
        *v = blended.clamp(0.02, 0.98);
    }
    p
}

/// A default-config feature dataset (a few hundred samples).
pub fn dataset() -> ToyDataset {
    hierarchy_dataset(&HierarchyConfig::default(), 42, 0.0).expect("fixture dataset is valid")
}
