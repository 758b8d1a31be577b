//! Eye images, labeled samples and same-subject test/guidance pairing.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::geometry::{Convention, GazeVector, PitchYaw};
use crate::seed::derive_seed;

pub const DEFAULT_HEIGHT: usize = 36;
pub const DEFAULT_WIDTH: usize = 60;

#[derive(Debug, Clone, PartialEq)]
pub enum DataError {
    PixelOutOfRange {
        index: usize,
        value: f64,
    },
    PixelCount {
        expected: usize,
        got: usize,
    },
    EmptySubject,
    ResolutionTooSmall {
        height: usize,
        width: usize,
    },
    /// Pair sampling needs at least one subject with two or more samples.
    NoPairableSubjects,
    TooFewSubjects {
        needed: usize,
        got: usize,
    },
    TooFewPerSubject {
        needed: usize,
        got: usize,
    },
    Geometry(crate::geometry::GeometryError),
}

impl fmt::Display for DataError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DataError::PixelOutOfRange { index, value } => {
                write!(f, "pixel {index} = {value} outside [0, 1]")
            }
            DataError::PixelCount { expected, got } => {
                write!(f, "expected {expected} pixels, got {got}")
            }
            DataError::EmptySubject => write!(f, "subject id must be non-empty"),
            DataError::ResolutionTooSmall { height, width } => write!(
                f,
                "resolution {height}x{width} too small to render an iris (minimum 12x20)"
            ),
            DataError::NoPairableSubjects => {
                write!(f, "no subject has at least 2 samples; cannot form same-subject pairs")
            }
            DataError::TooFewSubjects { needed, got } => {
                write!(f, "need at least {needed} subjects, got {got}")
            }
            DataError::TooFewPerSubject { needed, got } => {
                write!(f, "need at least {needed} samples per subject, got {got}")
            }
            DataError::Geometry(e) => write!(f, "{e}"),
        }
    }
}

impl core::error::Error for DataError {}

impl From<crate::geometry::GeometryError> for DataError {
    fn from(e: crate::geometry::GeometryError) -> Self {
        DataError::Geometry(e)
    }
}

/// Grayscale eye crop, row-major, intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct EyeImage {
    height: usize,
    width: usize,
    pixels: Vec<f64>,
}

impl EyeImage {
    pub fn new(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self, DataError> {
        if pixels.len() != height * width {
            return Err(DataError::PixelCount {
                expected: height * width,
                got: pixels.len(),
            });
        }
        if let Some((index, &value)) = pixels.iter().enumerate().find(|(_, v)| !(0.0..=1.0).contains(*v)) {
            return Err(DataError::PixelOutOfRange { index, value });
        }
        Ok(Self { height, width, pixels })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            pixels: alloc::vec![0.0; height * width],
        }
    }

    /// Builds an image from 8-bit intensities (`v / 255`).
    pub fn from_u8(height: usize, width: usize, bytes: &[u8]) -> Result<Self, DataError> {
        Self::new(height, width, bytes.iter().map(|&b| b as f64 / 255.0).collect())
    }

    /// Rounds to the nearest 8-bit level.
    pub fn to_u8(&self) -> Vec<u8> {
        self.pixels
            .iter()
            .map(|v| libm::round(v.clamp(0.0, 1.0) * 255.0) as u8)
            .collect()
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub(crate) fn pixels_mut(&mut self) -> &mut [f64] {
        &mut self.pixels
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.pixels[row * self.width + col]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Side {
    Left,
    Right,
}

impl Side {
    pub fn name(self) -> &'static str {
        match self {
            Side::Left => "left",
            Side::Right => "right",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "left" => Some(Side::Left),
            "right" => Some(Side::Right),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SampleFlag {
    #[default]
    Normal,
    Noisy,
}

/// One labeled eye image.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: EyeImage,
    label: PitchYaw,
    gaze: GazeVector,
    subject: String,
    pub side: Side,
    pub flag: SampleFlag,
}

impl Sample {
    pub fn new(
        image: EyeImage,
        label: PitchYaw,
        convention: Convention,
        subject: &str,
        side: Side,
    ) -> Result<Self, DataError> {
        if subject.is_empty() {
            return Err(DataError::EmptySubject);
        }
        Ok(Self {
            image,
            label,
            gaze: convention.to_vector(label),
            subject: subject.to_string(),
            side,
            flag: SampleFlag::Normal,
        })
    }

    /// Unit gaze direction.
    pub fn gaze(&self) -> GazeVector {
        self.gaze
    }

    /// The (pitch, yaw) label the gaze vector was derived from.
    pub fn label(&self) -> PitchYaw {
        self.label
    }

    pub fn subject(&self) -> &str {
        &self.subject
    }
}

/// Test image plus a same-subject guidance image.
#[derive(Debug, Clone, Copy)]
pub struct Pair<'a> {
    pub test: &'a Sample,
    pub guidance: &'a Sample,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PairMode {
    /// Fresh guidance draw per epoch, test order shuffled.
    Train,
    /// One seeded guidance per test image, dataset order.
    Eval,
}

/// Index pair into the sampler's sample slice.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PairIndex {
    pub test: usize,
    pub guidance: usize,
}

/// Seeded same-subject pairing over a sample slice.
#[derive(Debug, Clone)]
pub struct PairSampler<'a> {
    samples: &'a [Sample],
    /// For each sample, the other indices of its subject (empty when unpairable).
    partners: Vec<Vec<usize>>,
    pairable: Vec<usize>,
    skipped: Vec<String>,
    seed: u64,
}

impl<'a> PairSampler<'a> {
    pub fn new(samples: &'a [Sample], seed: u64) -> Result<Self, DataError> {
        let groups = group_by_subject(samples);
        let mut partners = alloc::vec![Vec::new(); samples.len()];
        let mut skipped = Vec::new();
        for (subject, idx) in &groups {
            if idx.len() < 2 {
                log::warn!("subject {subject} has a single sample; skipped for pairing");
                skipped.push(subject.to_string());
                continue;
            }
            for &i in idx {
                partners[i] = idx.iter().copied().filter(|&j| j != i).collect();
            }
        }
        let pairable: Vec<usize> = (0..samples.len()).filter(|&i| !partners[i].is_empty()).collect();
        if pairable.is_empty() {
            return Err(DataError::NoPairableSubjects);
        }
        Ok(Self {
            samples,
            partners,
            pairable,
            skipped,
            seed,
        })
    }

    pub fn skipped_subjects(&self) -> &[String] {
        &self.skipped
    }

    /// Number of pairs per pass.
    pub fn len(&self) -> usize {
        self.pairable.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairable.is_empty()
    }

    pub fn indices(&self, mode: PairMode, epoch: u64) -> Vec<PairIndex> {
        match mode {
            PairMode::Train => {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, "train-pairs", epoch));
                let mut order = self.pairable.clone();
                order.shuffle(&mut rng);
                order
                    .into_iter()
                    .map(|t| PairIndex {
                        test: t,
                        guidance: self.draw(t, &mut rng),
                    })
                    .collect()
            }
            PairMode::Eval => {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, "eval-pairs", 0));
                self.pairable
                    .iter()
                    .map(|&t| PairIndex {
                        test: t,
                        guidance: self.draw(t, &mut rng),
                    })
                    .collect()
            }
        }
    }

    pub fn pairs(&self, mode: PairMode, epoch: u64) -> impl Iterator<Item = Pair<'a>> + '_ {
        self.indices(mode, epoch).into_iter().map(move |p| Pair {
            test: &self.samples[p.test],
            guidance: &self.samples[p.guidance],
        })
    }

    fn draw(&self, test: usize, rng: &mut ChaCha8Rng) -> usize {
        let c = &self.partners[test];
        c[rng.random_range(0..c.len())]
    }
}

/// Sample indices per subject, subjects in lexicographic order.
pub fn group_by_subject(samples: &[Sample]) -> BTreeMap<&str, Vec<usize>> {
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        groups.entry(s.subject()).or_default().push(i);
    }
    groups
}

/// Sample count per subject.
pub fn subject_histogram(samples: &[Sample]) -> BTreeMap<String, usize> {
    group_by_subject(samples)
        .into_iter()
        .map(|(k, v)| (k.to_string(), v.len()))
        .collect()
}

/// Splits samples into (kept, held out) by subject id.
pub fn split_by_subjects(samples: &[Sample], held_out: &[&str]) -> (Vec<Sample>, Vec<Sample>) {
    samples.iter().cloned().partition(|s| !held_out.contains(&s.subject()))
}
