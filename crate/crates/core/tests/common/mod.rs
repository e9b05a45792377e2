use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use gta_core::data::LabeledImageSet;
use gta_core::ice::IceResources;
use gta_core::models::build_classifier;

/// Tiny random dataset with pixels kept away from the clip boundaries so
/// finite-difference probes never cross a clamp kink.
pub fn toy_set(name: &str, side: usize, classes: usize, count: usize, seed: u64) -> LabeledImageSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let images = (0..count)
        .map(|_| Array3::from_shape_fn((side, side, 3), |_| rng.gen_range(30.0..225.0)))
        .collect();
    let labels = (0..count).map(|i| i % classes).collect();
    LabeledImageSet::new(name, side, side, classes, images, labels).unwrap()
}

/// One toy dataset with one untrained source classifier.
pub fn toy_resources(side: usize, classes: usize, count: usize, seed: u64) -> IceResources {
    let set = toy_set("toy", side, classes, count, seed);
    let model = build_classifier("plain-mini", classes, (side, side), seed ^ 0xabc).unwrap();
    IceResources::new(vec![set], vec![vec![model]]).unwrap()
}
