//! Invalid-image simulation for the robustness protocol.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{Sample, SampleFlag};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NoiseMode {
    /// Every pixel zero.
    Blank,
    /// Left or right half zeroed (incomplete capture).
    OccludeHalf,
    /// Central horizontal band painted with lid intensity, hiding the iris.
    #[default]
    Blink,
}

/// Rows `[BAND_TOP, BAND_BOTTOM)` of the image height covered by a blink.
pub const BAND_TOP: f64 = 0.2;
pub const BAND_BOTTOM: f64 = 0.8;

impl NoiseMode {
    pub const ALL: [NoiseMode; 3] = [NoiseMode::Blank, NoiseMode::OccludeHalf, NoiseMode::Blink];

    pub fn name(self) -> &'static str {
        match self {
            NoiseMode::Blank => "blank",
            NoiseMode::OccludeHalf => "occlude_half",
            NoiseMode::Blink => "blink",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        NoiseMode::ALL.into_iter().find(|m| m.name() == s)
    }
}

pub fn blink_band(height: usize) -> (usize, usize) {
    let top = libm::floor(height as f64 * BAND_TOP) as usize;
    let bottom = libm::ceil(height as f64 * BAND_BOTTOM) as usize;
    (top, bottom.min(height))
}

/// Returns a noisy copy; label, subject and side are untouched.
pub fn inject_noise(sample: &Sample, mode: NoiseMode, seed: u64) -> Sample {
    let mut out = sample.clone();
    let (h, w) = (out.image.height(), out.image.width());
    let px = out.image.pixels_mut();
    match mode {
        NoiseMode::Blank => px.fill(0.0),
        NoiseMode::OccludeHalf => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let left = rng.random_bool(0.5);
            let half = w / 2;
            let cols = if left { 0..half } else { half..w };
            for r in 0..h {
                px[r * w + cols.start..r * w + cols.end].fill(0.0);
            }
        }
        NoiseMode::Blink => {
            let (top, bottom) = blink_band(h);
            let outside: alloc::vec::Vec<f64> = px[..top * w].iter().chain(&px[bottom * w..]).copied().collect();
            let lid = if outside.is_empty() {
                0.0
            } else {
                outside.iter().sum::<f64>() / outside.len() as f64
            };
            px[top * w..bottom * w].fill(lid);
        }
    }
    out.flag = SampleFlag::Noisy;
    out
}
