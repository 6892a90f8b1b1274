#![allow(dead_code)]

use aqua_core::watermodel::{make_domain_transform, preset_domains};
use aqua_data::scene::{generate_scene, SceneSpec};
use aqua_detector::TrainImage;

/// A rendered scene under source domain `domain`.
pub fn sample(seed: u64, domain: usize) -> TrainImage {
    let scene = generate_scene(&SceneSpec::default(), seed).unwrap();
    let transform = make_domain_transform(&preset_domains()[domain]).unwrap();
    TrainImage {
        image: transform.apply(&scene.image),
        boxes: scene.objects.iter().map(|o| o.bbox).collect(),
        classes: scene.objects.iter().map(|o| o.class_id).collect(),
        domain,
    }
}

pub fn batch(start: u64, n: usize) -> Vec<TrainImage> {
    (0..n as u64).map(|i| sample(start + i, (i % 2) as usize)).collect()
}

/// `batch(start, n)` re-rendered under other domains.
pub fn branch_of(start: u64, n: usize, shift: usize) -> Vec<TrainImage> {
    (0..n as u64).map(|i| sample(start + i, ((i % 2) as usize + shift) % 6)).collect()
}
