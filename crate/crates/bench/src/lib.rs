//! Fixtures shared by the criterion benches.

use efv_core::backbone::{BackboneConfig, BackboneParams};
use efv_core::numerics::Tensor;
use efv_core::patch_embed::FeatureSeq;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Patch features for `frames` frames of a `rows×cols` grid, with markers.
/// Each frame is the previous one plus noise of scale `drift`, so tubes are
/// temporally correlated the way real video features are.
pub fn drifting_clip(frames: usize, rows: usize, cols: usize, dim: usize, drift: f64, seed: u64) -> FeatureSeq {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = rows * cols;
    let mut data = Tensor::randn(&[g, dim], 1.0, &mut rng).into_data();
    for t in 1..frames {
        let noise = Tensor::randn(&[g, dim], drift, &mut rng);
        let prev = data[(t - 1) * g * dim..t * g * dim].to_vec();
        data.extend(prev.iter().zip(noise.data()).map(|(a, b)| a + b));
    }
    let x = Tensor::new(vec![frames * g, dim], data).expect("shape matches");
    FeatureSeq::from_patch_grid(&x, frames, rows, cols, true).expect("valid grid")
}

/// The toy backbone with merging switched on or off, same weights either way.
pub fn toy_backbone(merge: bool, seed: u64) -> BackboneParams {
    let mut p = BackboneParams::init(BackboneConfig::toy(), &mut ChaCha8Rng::seed_from_u64(seed)).expect("toy config is valid");
    p.config.merge.enabled = merge;
    p
}
