#![allow(dead_code)]

use drnet_core::backbone::BackboneConfig;
use drnet_core::data::Sample;
use drnet_core::geometry::{GazeVector, Vec3};
use drnet_core::models::{GazeModel, ModelConfig, ModelVariant};
use drnet_core::synth::{synth_generate, SynthConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn tiny_model(variant: ModelVariant, seed: u64) -> GazeModel {
    let mut cfg = ModelConfig::new(variant);
    cfg.backbone = BackboneConfig::tiny();
    GazeModel::new(cfg, seed)
}

pub fn small_set(seed: u64) -> Vec<Sample> {
    synth_generate(&SynthConfig::new(3, 6, seed)).unwrap()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_vec<R: Rng>(rng: &mut R, scale: f64) -> Vec3 {
    [
        rng.random_range(-scale..scale),
        rng.random_range(-scale..scale),
        rng.random_range(-scale..scale),
    ]
}

pub fn random_unit<R: Rng>(rng: &mut R) -> GazeVector {
    loop {
        let v = random_vec(rng, 1.0);
        if let Ok(g) = GazeVector::from_array(v) {
            if drnet_core::geometry::norm(&v) > 0.1 {
                return g;
            }
        }
    }
}

/// `||a - b|| / max(||a||, ||b||)`, zero when both vanish.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let den = na.max(nb);
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}
