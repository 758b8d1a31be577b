//! Deterministic stylized eye renderer for desk-scale experiments.
//!
//! Each subject gets fixed appearance parameters (eye opening, iris size,
//! intensities). The iris center is displaced from the eye center by
//!
//! ```text
//! col = cx + gain_x * cos(pitch) * sin(yaw)
//! row = cy - gain_y * sin(pitch)
//! ```
//!
//! so the label is exactly recoverable from the iris position
//! ([`Appearance::decode`]). Images are quantized to 8-bit levels, which makes
//! PNG storage lossless.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::data::{DataError, EyeImage, Sample, Side};
use crate::geometry::{Convention, PitchYaw};
use crate::seed::derive_seed;

pub const MIN_HEIGHT: usize = 12;
pub const MIN_WIDTH: usize = 20;
pub const PITCH_RANGE: f64 = 0.4;
pub const YAW_RANGE: f64 = 0.6;
const SUPERSAMPLE: usize = 6;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub n_subjects: usize,
    pub n_per_subject: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    /// Standard deviation of additive per-pixel Gaussian noise.
    pub pixel_noise: f64,
}

impl SynthConfig {
    pub fn new(n_subjects: usize, n_per_subject: usize, seed: u64) -> Self {
        Self {
            n_subjects,
            n_per_subject,
            height: crate::data::DEFAULT_HEIGHT,
            width: crate::data::DEFAULT_WIDTH,
            seed,
            pixel_noise: 0.02,
        }
    }
}

/// Per-subject rendering parameters, in pixels and intensities.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Appearance {
    pub center_row: f64,
    pub center_col: f64,
    /// Horizontal semi-axis of the eye opening.
    pub half_width: f64,
    /// Vertical semi-axis of the eye opening.
    pub half_height: f64,
    pub iris_radius: f64,
    pub pupil_radius: f64,
    pub gain_x: f64,
    pub gain_y: f64,
    pub skin: f64,
    pub sclera: f64,
    pub iris: f64,
    pub pupil: f64,
}

impl Appearance {
    pub fn sample<R: Rng + ?Sized>(height: usize, width: usize, rng: &mut R) -> Self {
        let (h, w) = (height as f64, width as f64);
        let iris_radius = h * rng.random_range(0.14..0.17);
        let iris = rng.random_range(0.15..0.30);
        Self {
            center_row: h / 2.0,
            center_col: w / 2.0,
            half_width: w * rng.random_range(0.36..0.44),
            half_height: h * rng.random_range(0.28..0.36),
            iris_radius,
            pupil_radius: 0.45 * iris_radius,
            gain_x: 0.25 * w,
            gain_y: 0.2 * h,
            skin: rng.random_range(0.45..0.65),
            sclera: rng.random_range(0.80..0.95),
            iris,
            pupil: 0.35 * iris,
        }
    }

    /// Iris center `(row, col)` for a gaze label.
    pub fn iris_center(&self, p: PitchYaw) -> (f64, f64) {
        let row = self.center_row - self.gain_y * libm::sin(p.pitch());
        let col = self.center_col + self.gain_x * libm::cos(p.pitch()) * libm::sin(p.yaw());
        (row, col)
    }

    /// Exact inverse of [`Appearance::iris_center`].
    pub fn decode(&self, row: f64, col: f64) -> PitchYaw {
        let sp = ((self.center_row - row) / self.gain_y).clamp(-1.0, 1.0);
        let pitch = libm::asin(sp);
        let sy = ((col - self.center_col) / (self.gain_x * libm::cos(pitch))).clamp(-1.0, 1.0);
        PitchYaw::new(pitch, libm::asin(sy)).expect("asin output lies in range")
    }

    fn shade(&self, y: f64, x: f64, iris_row: f64, iris_col: f64) -> f64 {
        let ex = (x - self.center_col) / self.half_width;
        let ey = (y - self.center_row) / self.half_height;
        if ex * ex + ey * ey > 1.0 {
            return self.skin;
        }
        let d2 = (x - iris_col) * (x - iris_col) + (y - iris_row) * (y - iris_row);
        if d2 <= self.pupil_radius * self.pupil_radius {
            self.pupil
        } else if d2 <= self.iris_radius * self.iris_radius {
            self.iris
        } else {
            self.sclera
        }
    }

    /// Anti-aliased, noise-free intensities (not quantized).
    pub fn render_clean(&self, p: PitchYaw, height: usize, width: usize) -> Vec<f64> {
        let (ir, ic) = self.iris_center(p);
        let step = 1.0 / SUPERSAMPLE as f64;
        let norm = 1.0 / (SUPERSAMPLE * SUPERSAMPLE) as f64;
        let mut out = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                let mut acc = 0.0;
                for sy in 0..SUPERSAMPLE {
                    let y = r as f64 + (sy as f64 + 0.5) * step;
                    for sx in 0..SUPERSAMPLE {
                        let x = c as f64 + (sx as f64 + 0.5) * step;
                        acc += self.shade(y, x, ir, ic);
                    }
                }
                out.push(acc * norm);
            }
        }
        out
    }

    /// Pixels whose centers fall inside the iris disc.
    pub fn iris_mask(&self, p: PitchYaw, height: usize, width: usize) -> Vec<bool> {
        let (ir, ic) = self.iris_center(p);
        let r2 = self.iris_radius * self.iris_radius;
        (0..height)
            .flat_map(|r| (0..width).map(move |c| (r, c)))
            .map(|(r, c)| {
                let (y, x) = (r as f64 + 0.5, c as f64 + 0.5);
                (x - ic) * (x - ic) + (y - ir) * (y - ir) <= r2
            })
            .collect()
    }

    pub fn render<R: Rng + ?Sized>(
        &self,
        p: PitchYaw,
        height: usize,
        width: usize,
        pixel_noise: f64,
        rng: &mut R,
    ) -> EyeImage {
        let mut px = self.render_clean(p, height, width);
        if pixel_noise > 0.0 {
            let dist = Normal::new(0.0, pixel_noise).expect("positive noise std");
            px.iter_mut().for_each(|v| *v += dist.sample(rng));
        }
        px.iter_mut()
            .for_each(|v| *v = libm::round(v.clamp(0.0, 1.0) * 255.0) / 255.0);
        EyeImage::new(height, width, px).expect("quantized pixels lie in [0, 1]")
    }
}

pub fn subject_id(index: usize) -> String {
    alloc::format!("p{index:02}")
}

/// Renders the dataset and returns each subject's appearance alongside it.
pub fn synth_generate_with_appearance(
    cfg: &SynthConfig,
) -> Result<(Vec<Sample>, BTreeMap<String, Appearance>), DataError> {
    if cfg.n_subjects < 2 {
        return Err(DataError::TooFewSubjects {
            needed: 2,
            got: cfg.n_subjects,
        });
    }
    if cfg.n_per_subject < 4 {
        return Err(DataError::TooFewPerSubject {
            needed: 4,
            got: cfg.n_per_subject,
        });
    }
    if cfg.height < MIN_HEIGHT || cfg.width < MIN_WIDTH {
        return Err(DataError::ResolutionTooSmall {
            height: cfg.height,
            width: cfg.width,
        });
    }
    let mut samples = Vec::with_capacity(cfg.n_subjects * cfg.n_per_subject);
    let mut looks = BTreeMap::new();
    for s in 0..cfg.n_subjects {
        let id = subject_id(s);
        let mut look_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "appearance", s as u64));
        let look = Appearance::sample(cfg.height, cfg.width, &mut look_rng);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "images", s as u64));
        for i in 0..cfg.n_per_subject {
            let label = PitchYaw::new(
                rng.random_range(-PITCH_RANGE..=PITCH_RANGE),
                rng.random_range(-YAW_RANGE..=YAW_RANGE),
            )?;
            let image = look.render(label, cfg.height, cfg.width, cfg.pixel_noise, &mut rng);
            let side = if i % 2 == 0 { Side::Left } else { Side::Right };
            samples.push(Sample::new(image, label, Convention::CameraFacing, &id, side)?);
        }
        looks.insert(id, look);
    }
    Ok((samples, looks))
}

pub fn synth_generate(cfg: &SynthConfig) -> Result<Vec<Sample>, DataError> {
    synth_generate_with_appearance(cfg).map(|(s, _)| s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn centered_gaze_centers_iris() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let look = Appearance::sample(36, 60, &mut rng);
        let (r, c) = look.iris_center(PitchYaw::new(0.0, 0.0).unwrap());
        assert_eq!((r, c), (18.0, 30.0));
        let p = PitchYaw::new(0.3, -0.5).unwrap();
        let (r, c) = look.iris_center(p);
        let q = look.decode(r, c);
        assert!((q.pitch() - 0.3).abs() < 1e-12 && (q.yaw() + 0.5).abs() < 1e-12);
    }

    #[test]
    fn deterministic_and_quantized() {
        let cfg = SynthConfig::new(2, 4, 9);
        let a = synth_generate(&cfg).unwrap();
        let b = synth_generate(&cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 8);
        for s in &a {
            for v in s.image.pixels() {
                let q = v * 255.0;
                assert_eq!(q, libm::round(q));
            }
        }
        let other = synth_generate(&SynthConfig::new(2, 4, 10)).unwrap();
        assert_ne!(a[0].image, other[0].image);
    }

    #[test]
    fn preconditions() {
        assert!(matches!(
            synth_generate(&SynthConfig::new(1, 4, 0)),
            Err(DataError::TooFewSubjects { .. })
        ));
        assert!(matches!(
            synth_generate(&SynthConfig::new(2, 3, 0)),
            Err(DataError::TooFewPerSubject { .. })
        ));
        let mut cfg = SynthConfig::new(2, 4, 0);
        cfg.height = 11;
        assert!(matches!(
            synth_generate(&cfg),
            Err(DataError::ResolutionTooSmall { .. })
        ));
        cfg.height = 12;
        cfg.width = 20;
        assert!(synth_generate(&cfg).is_ok());
    }

    #[test]
    fn iris_is_darker_than_sclera() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let look = Appearance::sample(36, 60, &mut rng);
        let p = PitchYaw::new(0.0, 0.0).unwrap();
        let img = look.render(p, 36, 60, 0.0, &mut rng);
        assert!(img.get(18, 30) < 0.2);
        let mask = look.iris_mask(p, 36, 60);
        assert!(mask[18 * 60 + 30]);
        assert!(!mask[0]);
    }
}
