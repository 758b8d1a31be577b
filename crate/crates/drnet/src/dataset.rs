//! On-disk dataset layout: `<root>/<subject>/*.png` plus `<root>/labels.csv`
//! with header `image,side,pitch,yaw` (radians).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use drnet_core::data::{subject_histogram, EyeImage, Sample, Side};
use drnet_core::geometry::{Convention, PitchYaw};
use image::{GrayImage, ImageFormat};
use rayon::prelude::*;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::fsutil::write_atomic;

pub const LABELS_FILE: &str = "labels.csv";
pub const HEADER: [&str; 4] = ["image", "side", "pitch", "yaw"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SideFilter {
    Left,
    Right,
    #[default]
    All,
}

impl SideFilter {
    pub fn name(self) -> &'static str {
        match self {
            SideFilter::Left => "left",
            SideFilter::Right => "right",
            SideFilter::All => "all",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "left" => Some(SideFilter::Left),
            "right" => Some(SideFilter::Right),
            "all" => Some(SideFilter::All),
            _ => None,
        }
    }

    pub fn keeps(self, side: Side) -> bool {
        match self {
            SideFilter::All => true,
            SideFilter::Left => side == Side::Left,
            SideFilter::Right => side == Side::Right,
        }
    }
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("dataset directory {0} does not exist")]
    MissingRoot(PathBuf),
    #[error("label file {0} not found")]
    MissingLabels(PathBuf),
    #[error("{file}:{line}: {message}")]
    Row { file: PathBuf, line: u64, message: String },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{0}")]
    Invalid(String),
}

impl DatasetError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        DatasetError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LoadedDataset {
    pub samples: Vec<Sample>,
    /// SHA-256 over the label file and every referenced image, in row order.
    pub fingerprint: String,
    /// Label rows dropped by the side filter.
    pub filtered_out: usize,
}

struct Row {
    line: u64,
    image: String,
    subject: String,
    side: Side,
    label: PitchYaw,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().fold(String::with_capacity(bytes.len() * 2), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

fn parse_rows(labels: &Path, text: &[u8]) -> Result<Vec<Row>, DatasetError> {
    let row_err = |line: u64, message: String| DatasetError::Row {
        file: labels.to_path_buf(),
        line,
        message,
    };
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).from_reader(text);
    let mut records = rdr.records();
    let header = match records.next() {
        None => return Ok(Vec::new()),
        Some(r) => r.map_err(|e| row_err(1, e.to_string()))?,
    };
    if header.iter().map(str::trim).ne(HEADER) {
        return Err(row_err(1, format!("expected header `{}`", HEADER.join(","))));
    }
    let mut rows = Vec::new();
    for rec in records {
        let rec = rec.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            row_err(line, e.to_string())
        })?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        if rec.len() != 4 {
            return Err(row_err(line, format!("expected 4 fields, found {}", rec.len())));
        }
        let image = rec[0].trim().to_string();
        let subject = match image.split_once('/') {
            Some((s, f)) if !s.is_empty() && !f.is_empty() && !f.contains('/') => s.to_string(),
            _ => return Err(row_err(line, format!("image path {image:?} is not <subject>/<file>"))),
        };
        let side = Side::parse(rec[1].trim())
            .ok_or_else(|| row_err(line, format!("side {:?} is not left or right", &rec[1])))?;
        let num = |i: usize, name: &str| {
            rec[i]
                .trim()
                .parse::<f64>()
                .map_err(|_| row_err(line, format!("{name} {:?} is not a number", &rec[i])))
        };
        let (pitch, yaw) = (num(2, "pitch")?, num(3, "yaw")?);
        let label = PitchYaw::new(pitch, yaw).map_err(|e| row_err(line, format!("label ({pitch}, {yaw}): {e}")))?;
        rows.push(Row {
            line,
            image,
            subject,
            side,
            label,
        });
    }
    Ok(rows)
}

/// Loads the labeled images under `root`, converting labels with `convention`.
pub fn load_dataset(root: &Path, convention: Convention, side: SideFilter) -> Result<LoadedDataset, DatasetError> {
    if !root.is_dir() {
        return Err(DatasetError::MissingRoot(root.to_path_buf()));
    }
    let labels = root.join(LABELS_FILE);
    if !labels.is_file() {
        return Err(DatasetError::MissingLabels(labels));
    }
    let text = std::fs::read(&labels).map_err(|e| DatasetError::io(&labels, e))?;
    let rows = parse_rows(&labels, &text)?;
    if rows.is_empty() {
        log::warn!("{} has no rows; the dataset is empty", labels.display());
    }
    let row_err = |line: u64, message: String| DatasetError::Row {
        file: labels.clone(),
        line,
        message,
    };
    let decoded: Vec<Result<(Vec<u8>, GrayImage), DatasetError>> = rows
        .par_iter()
        .map(|r| {
            let path = root.join(&r.image);
            let bytes = std::fs::read(&path).map_err(|e| row_err(r.line, format!("{}: {e}", path.display())))?;
            let img = image::load_from_memory_with_format(&bytes, ImageFormat::Png)
                .map_err(|e| row_err(r.line, format!("{}: {e}", path.display())))?
                .to_luma8();
            Ok((bytes, img))
        })
        .collect();

    let mut hasher = Sha256::new();
    hasher.update(&text);
    let mut samples = Vec::with_capacity(rows.len());
    let mut shape: Option<(u32, u32)> = None;
    let mut filtered_out = 0;
    for (r, d) in rows.iter().zip(decoded) {
        let (bytes, img) = d?;
        hasher.update(&bytes);
        let dims = (img.height(), img.width());
        match shape {
            None => shape = Some(dims),
            Some(s) if s != dims => {
                return Err(row_err(
                    r.line,
                    format!("image is {}x{}, earlier images are {}x{}", dims.0, dims.1, s.0, s.1),
                ))
            }
            _ => {}
        }
        if !side.keeps(r.side) {
            filtered_out += 1;
            continue;
        }
        let eye = EyeImage::from_u8(dims.0 as usize, dims.1 as usize, img.as_raw())
            .map_err(|e| row_err(r.line, e.to_string()))?;
        let sample =
            Sample::new(eye, r.label, convention, &r.subject, r.side).map_err(|e| row_err(r.line, e.to_string()))?;
        samples.push(sample);
    }
    warn_unlabeled(root, &rows);
    let hist = subject_histogram(&samples);
    log::info!(
        "loaded {} samples from {} ({} subjects: {})",
        samples.len(),
        root.display(),
        hist.len(),
        hist.iter()
            .map(|(k, v)| format!("{k}={v}"))
            .collect::<Vec<_>>()
            .join(" ")
    );
    Ok(LoadedDataset {
        samples,
        fingerprint: hex(&hasher.finalize()),
        filtered_out,
    })
}

fn warn_unlabeled(root: &Path, rows: &[Row]) {
    let listed: std::collections::BTreeSet<&str> = rows.iter().map(|r| r.image.as_str()).collect();
    let Ok(dirs) = std::fs::read_dir(root) else { return };
    let mut unlabeled = 0usize;
    for d in dirs.flatten().filter(|d| d.path().is_dir()) {
        let subject = d.file_name().to_string_lossy().into_owned();
        for f in std::fs::read_dir(d.path()).into_iter().flatten().flatten() {
            let name = f.file_name().to_string_lossy().into_owned();
            if name.ends_with(".png") && !listed.contains(format!("{subject}/{name}").as_str()) {
                unlabeled += 1;
            }
        }
    }
    if unlabeled > 0 {
        log::warn!(
            "{unlabeled} image(s) under {} have no label row and were ignored",
            root.display()
        );
    }
}

/// Writes samples in the dataset layout. Images are named `img_NNNN.png` per subject, in input order.
pub fn save_dataset(root: &Path, samples: &[Sample]) -> Result<(), DatasetError> {
    let mut counters: BTreeMap<&str, usize> = BTreeMap::new();
    let mut rows = Vec::with_capacity(samples.len());
    for s in samples {
        let k = counters.entry(s.subject()).or_default();
        rows.push((format!("{}/img_{:04}.png", s.subject(), k), s));
        *k += 1;
    }
    for subject in counters.keys() {
        let dir = root.join(subject);
        std::fs::create_dir_all(&dir).map_err(|e| DatasetError::io(&dir, e))?;
    }
    rows.par_iter().try_for_each(|(name, s)| {
        let img = GrayImage::from_raw(s.image.width() as u32, s.image.height() as u32, s.image.to_u8())
            .ok_or_else(|| DatasetError::Invalid(format!("{name}: pixel buffer does not match its shape")))?;
        let mut buf = std::io::Cursor::new(Vec::new());
        img.write_to(&mut buf, ImageFormat::Png)
            .map_err(|e| DatasetError::Invalid(format!("{name}: {e}")))?;
        let path = root.join(name);
        write_atomic(&path, buf.get_ref()).map_err(|e| DatasetError::io(&path, e))
    })?;
    let mut csv = String::from("image,side,pitch,yaw\n");
    for (name, s) in &rows {
        let l = s.label();
        let _ = writeln!(csv, "{name},{},{},{}", s.side.name(), l.pitch(), l.yaw());
    }
    let labels = root.join(LABELS_FILE);
    write_atomic(&labels, csv.as_bytes()).map_err(|e| DatasetError::io(&labels, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use drnet_core::synth::{synth_generate, SynthConfig};

    #[test]
    fn save_then_load_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let s = synth_generate(&SynthConfig::new(3, 4, 2)).unwrap();
        save_dataset(dir.path(), &s).unwrap();
        let loaded = load_dataset(dir.path(), Convention::CameraFacing, SideFilter::All).unwrap();
        assert_eq!(loaded.samples, s);
        assert_eq!(loaded.fingerprint.len(), 64);
        let left = load_dataset(dir.path(), Convention::CameraFacing, SideFilter::Left).unwrap();
        assert_eq!(left.samples.len(), 6);
        assert_eq!(left.filtered_out, 6);
        assert_eq!(left.fingerprint, loaded.fingerprint);
    }

    #[test]
    fn row_errors_carry_file_and_line() {
        let dir = tempfile::tempdir().unwrap();
        let s = synth_generate(&SynthConfig::new(2, 4, 2)).unwrap();
        save_dataset(dir.path(), &s).unwrap();
        let labels = dir.path().join(LABELS_FILE);
        let mut text = std::fs::read_to_string(&labels).unwrap();
        text.push_str("p00/img_0001.png,up,0.0,0.0\n");
        std::fs::write(&labels, &text).unwrap();
        let err = load_dataset(dir.path(), Convention::CameraFacing, SideFilter::All).unwrap_err();
        assert!(
            err.to_string().ends_with(":10: side \"up\" is not left or right"),
            "{err}"
        );

        text = text.replace("p00/img_0001.png,up,0.0,0.0\n", "p00/missing.png,left,0.0,0.0\n");
        std::fs::write(&labels, &text).unwrap();
        let err = load_dataset(dir.path(), Convention::CameraFacing, SideFilter::All).unwrap_err();
        assert!(err.to_string().contains("labels.csv:10:"), "{err}");

        text = text.replace("p00/missing.png,left,0.0,0.0\n", "p00/img_0001.png,left,abc,0.0\n");
        std::fs::write(&labels, &text).unwrap();
        let err = load_dataset(dir.path(), Convention::CameraFacing, SideFilter::All).unwrap_err();
        assert!(err.to_string().contains(":10: pitch \"abc\""), "{err}");

        text = text.replace("abc", "2.0");
        std::fs::write(&labels, &text).unwrap();
        assert!(load_dataset(dir.path(), Convention::CameraFacing, SideFilter::All).is_err());
    }

    #[test]
    fn empty_label_file_is_an_empty_dataset() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join(LABELS_FILE), "image,side,pitch,yaw\n").unwrap();
        let d = load_dataset(dir.path(), Convention::CameraFacing, SideFilter::All).unwrap();
        assert!(d.samples.is_empty());
        std::fs::write(dir.path().join(LABELS_FILE), "").unwrap();
        assert!(load_dataset(dir.path(), Convention::CameraFacing, SideFilter::All)
            .unwrap()
            .samples
            .is_empty());
    }

    #[test]
    fn missing_paths_are_named() {
        let dir = tempfile::tempdir().unwrap();
        let err = load_dataset(&dir.path().join("nope"), Convention::CameraFacing, SideFilter::All).unwrap_err();
        assert!(matches!(err, DatasetError::MissingRoot(_)));
        let err = load_dataset(dir.path(), Convention::CameraFacing, SideFilter::All).unwrap_err();
        assert!(err.to_string().contains("labels.csv"));
    }

    #[test]
    fn forward_label_loads_as_negative_z() {
        let dir = tempfile::tempdir().unwrap();
        let s = synth_generate(&SynthConfig::new(2, 4, 2)).unwrap();
        save_dataset(dir.path(), &s).unwrap();
        std::fs::write(
            dir.path().join(LABELS_FILE),
            "image,side,pitch,yaw\np00/img_0001.png,left,0.0,0.0\n",
        )
        .unwrap();
        let d = load_dataset(dir.path(), Convention::CameraFacing, SideFilter::All).unwrap();
        let g = d.samples[0].gaze();
        assert_eq!((g.x(), g.y(), g.z()), (-0.0, -0.0, -1.0));
    }
}
