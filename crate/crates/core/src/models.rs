//! The differential-residual gaze head and its comparison variants.
//!
//! All variants share one feature extractor for the test and guidance images.
//! On top of it:
//!
//! | variant      | output                                             |
//! |--------------|----------------------------------------------------|
//! | `Drnet`      | `sc(f_t) + ad(diff(f_t, f_g))`                     |
//! | `TwoStream`  | `fuse(f_t, f_g)`                                   |
//! | `DiffNn`     | `diff(f_t, f_g) + guidance_label`                  |
//! | `NoAd`       | `gamma * sc(f_t) + (1 - gamma) * diff(f_t, f_g)`   |
//! | `NoSc`       | `ad(diff(f_t, f_g))`                               |
//! | `NoDiff`     | `sc(f_t) + ad(f_t)`                                |
//!
//! `diff` and `fuse` consume the concatenation `[f_t | f_g]`. Only `DiffNn`
//! takes a guidance label at inference; every other forward entry point has
//! no label parameter at all.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{BackboneConfig, ExtractorCache, FeatureExtractor};
use crate::data::EyeImage;
use crate::geometry::{GazeVector, Vec3};
use crate::nn::{Grads, Init, Linear, Mlp, MlpCache, ParamId, ParamStore};
use crate::seed::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ModelVariant {
    Drnet,
    TwoStream,
    DiffNn,
    NoAd,
    NoSc,
    NoDiff,
}

impl ModelVariant {
    /// Every variant, in comparison-table order.
    pub const ALL: [ModelVariant; 6] = [
        ModelVariant::Drnet,
        ModelVariant::DiffNn,
        ModelVariant::NoSc,
        ModelVariant::NoAd,
        ModelVariant::NoDiff,
        ModelVariant::TwoStream,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelVariant::Drnet => "drnet",
            ModelVariant::TwoStream => "two_stream",
            ModelVariant::DiffNn => "diff_nn",
            ModelVariant::NoAd => "no_ad",
            ModelVariant::NoSc => "no_sc",
            ModelVariant::NoDiff => "no_diff",
        }
    }

    /// Display label used in report tables.
    pub fn label(self) -> &'static str {
        match self {
            ModelVariant::Drnet => "DRNet",
            ModelVariant::TwoStream => "Two-stream",
            ModelVariant::DiffNn => "Diff-Nn",
            ModelVariant::NoAd => "DRNet_NoAD",
            ModelVariant::NoSc => "DRNet_NoSC",
            ModelVariant::NoDiff => "DRNet_NoDIFF",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        let lower = s.to_ascii_lowercase();
        ModelVariant::ALL.into_iter().find(|v| v.name() == lower)
    }

    /// Whether the guidance image enters the forward pass.
    pub fn uses_guidance_image(self) -> bool {
        !matches!(self, ModelVariant::NoDiff)
    }

    /// Whether inference needs the guidance image's ground-truth label.
    pub fn requires_guidance_label(self) -> bool {
        matches!(self, ModelVariant::DiffNn)
    }

    /// Whether training adds the differential supervision term (LA).
    pub fn trains_with_la(self) -> bool {
        matches!(self, ModelVariant::Drnet | ModelVariant::NoAd | ModelVariant::NoSc)
    }
}

impl fmt::Display for ModelVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// What the adjustment head consumes in `Drnet` / `NoSc`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AdInput {
    /// The 3-vector differential output.
    #[default]
    DiffVector,
    /// The differential head's last hidden activation.
    DiffHidden,
}

impl AdInput {
    pub fn name(self) -> &'static str {
        match self {
            AdInput::DiffVector => "diff_vector",
            AdInput::DiffHidden => "diff_hidden",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "diff_vector" => Some(AdInput::DiffVector),
            "diff_hidden" => Some(AdInput::DiffHidden),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub variant: ModelVariant,
    pub backbone: BackboneConfig,
    pub diff_hidden: usize,
    pub ad_hidden: usize,
    /// Hidden width of the two-stream regressor.
    pub fuse_hidden: usize,
    pub ad_input: AdInput,
}

impl ModelConfig {
    pub fn new(variant: ModelVariant) -> Self {
        Self {
            variant,
            backbone: BackboneConfig::default(),
            diff_hidden: 32,
            ad_hidden: 16,
            fuse_hidden: 32,
            ad_input: AdInput::DiffVector,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ModelError {
    ImageShape {
        expected: (usize, usize),
        got: (usize, usize),
    },
    FeatureDim {
        expected: usize,
        got: usize,
    },
    MissingGuidanceLabel,
    VariantMismatch {
        expected: ModelVariant,
        found: ModelVariant,
    },
    /// The variant has no such sub-module.
    NoSuchModule(&'static str),
    BatchMismatch {
        tests: usize,
        guidance: usize,
    },
    /// Parameter set does not fit the declared architecture.
    ParamLayout(String),
}

impl fmt::Display for ModelError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelError::ImageShape { expected, got } => write!(
                f,
                "image shape mismatch: expected {}x{}, received {}x{}",
                expected.0, expected.1, got.0, got.1
            ),
            ModelError::FeatureDim { expected, got } => {
                write!(f, "feature dimension mismatch: expected {expected}, received {got}")
            }
            ModelError::MissingGuidanceLabel => {
                write!(f, "diff_nn inference requires the guidance image's ground-truth label")
            }
            ModelError::VariantMismatch { expected, found } => {
                write!(f, "variant mismatch: expected {expected}, found {found}")
            }
            ModelError::NoSuchModule(m) => write!(f, "this variant has no {m} module"),
            ModelError::BatchMismatch { tests, guidance } => {
                write!(f, "{tests} test images but {guidance} guidance inputs")
            }
            ModelError::ParamLayout(m) => write!(f, "parameter layout mismatch: {m}"),
        }
    }
}

impl core::error::Error for ModelError {}

/// Guidance input for one prediction. Only `DiffNn` reads the label.
#[derive(Debug, Clone, Copy)]
pub enum Guidance<'a> {
    Image(&'a EyeImage),
    Labeled { image: &'a EyeImage, label: GazeVector },
}

impl<'a> Guidance<'a> {
    pub fn image(&self) -> &'a EyeImage {
        match self {
            Guidance::Image(i) => i,
            Guidance::Labeled { image, .. } => image,
        }
    }
}

/// Fixed-dimension backbone output.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector(Vec<f64>);

impl FeatureVector {
    pub fn new(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Full DRNet output: gaze is exactly `sc + aux`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DrnetOutput {
    pub gaze: Vec3,
    pub diff: Vec3,
    pub sc: Vec3,
    pub aux: Vec3,
}

/// Per-pair output of any variant; absent sub-module outputs are `None`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairOutput {
    pub gaze: Vec3,
    pub diff: Option<Vec3>,
    pub sc: Option<Vec3>,
    pub aux: Option<Vec3>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GazeModel {
    config: ModelConfig,
    params: ParamStore,
    extractor: FeatureExtractor,
    sc: Option<Linear>,
    diff: Option<Mlp>,
    ad: Option<Mlp>,
    fuse: Option<Mlp>,
    gamma: Option<ParamId>,
}

struct HeadCache {
    n: usize,
    /// Extractor output, `n` or `2n` rows.
    feats: Vec<f64>,
    sc_out: Vec<f64>,
    diff_out: Vec<f64>,
    diff: Option<MlpCache>,
    ad: Option<MlpCache>,
    fuse: Option<MlpCache>,
}

/// Everything the backward pass needs from one training forward.
pub struct TrainCache {
    ext: ExtractorCache,
    heads: HeadCache,
}

fn vec3_rows(v: &[f64]) -> impl Iterator<Item = Vec3> + '_ {
    v.chunks_exact(3).map(|c| [c[0], c[1], c[2]])
}

impl GazeModel {
    /// Freshly initialized model; all randomness derives from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "init", 0));
        let mut p = ParamStore::new();
        let extractor = FeatureExtractor::new(&mut p, &config.backbone, &mut rng);
        let d = config.backbone.feature_dim;
        let v = config.variant;
        let sc = matches!(v, ModelVariant::Drnet | ModelVariant::NoAd | ModelVariant::NoDiff)
            .then(|| Linear::new(&mut p, "sc", d, 3, Init::Lecun, &mut rng));
        let diff = matches!(
            v,
            ModelVariant::Drnet | ModelVariant::DiffNn | ModelVariant::NoAd | ModelVariant::NoSc
        )
        .then(|| Mlp::new(&mut p, "diff", &[2 * d, config.diff_hidden, 3], Init::Lecun, &mut rng));
        let ad_in = match (v, config.ad_input) {
            (ModelVariant::NoDiff, _) => d,
            (_, AdInput::DiffVector) => 3,
            (_, AdInput::DiffHidden) => config.diff_hidden,
        };
        // With a shortcut present, the adjustment starts at zero so gaze = sc initially.
        // Without one (NoSc) a zero start would be a degenerate all-zero prediction.
        let ad_last = if v == ModelVariant::NoSc {
            Init::Lecun
        } else {
            Init::Zero
        };
        let ad = matches!(v, ModelVariant::Drnet | ModelVariant::NoSc | ModelVariant::NoDiff)
            .then(|| Mlp::new(&mut p, "ad", &[ad_in, config.ad_hidden, 3], ad_last, &mut rng));
        let fuse = (v == ModelVariant::TwoStream)
            .then(|| Mlp::new(&mut p, "fuse", &[2 * d, config.fuse_hidden, 3], Init::Lecun, &mut rng));
        let gamma = (v == ModelVariant::NoAd).then(|| p.add("gamma", &[1], vec![0.5], true));
        Self {
            config,
            params: p,
            extractor,
            sc,
            diff,
            ad,
            fuse,
            gamma,
        }
    }

    /// Rebuilds a model from stored parameters. Names and shapes must match the config.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self, ModelError> {
        let mut model = Self::new(config, 0);
        let expected = model.params.entries();
        if expected.len() != params.len() {
            return Err(ModelError::ParamLayout(alloc::format!(
                "expected {} arrays, found {}",
                expected.len(),
                params.len()
            )));
        }
        for (e, g) in expected.iter().zip(params.entries()) {
            if e.name != g.name || e.shape != g.shape || e.trainable != g.trainable {
                return Err(ModelError::ParamLayout(alloc::format!(
                    "expected {} {:?}, found {} {:?}",
                    e.name,
                    e.shape,
                    g.name,
                    g.shape
                )));
            }
        }
        model.params = params;
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn variant(&self) -> ModelVariant {
        self.config.variant
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Learned mixing weight of `NoAd`.
    pub fn gamma(&self) -> Option<f64> {
        self.gamma.map(|id| self.params.get(id)[0])
    }

    pub fn set_gamma(&mut self, value: f64) -> Result<(), ModelError> {
        let id = self.gamma.ok_or(ModelError::NoSuchModule("gamma"))?;
        self.params.get_mut(id)[0] = value;
        Ok(())
    }

    /// Sets every adjustment-head weight and bias to zero.
    pub fn zero_ad(&mut self) -> Result<(), ModelError> {
        let ad = self.ad.as_ref().ok_or(ModelError::NoSuchModule("ad"))?;
        let ids: Vec<ParamId> = ad.layers.iter().flat_map(|l| [l.w, l.b]).collect();
        for id in ids {
            self.params.get_mut(id).fill(0.0);
        }
        Ok(())
    }

    /// Parameter ids belonging to the shortcut head.
    pub fn sc_param_ids(&self) -> Vec<ParamId> {
        self.sc.iter().flat_map(|l| [l.w, l.b]).collect()
    }

    fn check_image(&self, img: &EyeImage) -> Result<(), ModelError> {
        let b = &self.config.backbone;
        if img.height() != b.height || img.width() != b.width {
            return Err(ModelError::ImageShape {
                expected: (b.height, b.width),
                got: (img.height(), img.width()),
            });
        }
        Ok(())
    }

    fn stack(&self, tests: &[&EyeImage], guidance: &[&EyeImage]) -> Result<(Vec<f64>, usize), ModelError> {
        if tests.len() != guidance.len() {
            return Err(ModelError::BatchMismatch {
                tests: tests.len(),
                guidance: guidance.len(),
            });
        }
        let use_g = self.variant().uses_guidance_image();
        let mut x = Vec::new();
        for img in tests {
            self.check_image(img)?;
            x.extend_from_slice(img.pixels());
        }
        if use_g {
            for img in guidance {
                self.check_image(img)?;
                x.extend_from_slice(img.pixels());
            }
        }
        let rows = if use_g { 2 * tests.len() } else { tests.len() };
        Ok((x, rows))
    }

    fn concat(&self, feats: &[f64], n: usize) -> Vec<f64> {
        let d = self.extractor.feature_dim();
        let mut cat = Vec::with_capacity(n * 2 * d);
        for i in 0..n {
            cat.extend_from_slice(&feats[i * d..(i + 1) * d]);
            cat.extend_from_slice(&feats[(n + i) * d..(n + i + 1) * d]);
        }
        cat
    }

    fn heads_forward(
        &self,
        feats: Vec<f64>,
        n: usize,
        labels: Option<&[GazeVector]>,
    ) -> Result<(Vec<PairOutput>, HeadCache), ModelError> {
        let d = self.extractor.feature_dim();
        let p = &self.params;
        let f_t = &feats[..n * d];
        let mut cache = HeadCache {
            n,
            feats: Vec::new(),
            sc_out: Vec::new(),
            diff_out: Vec::new(),
            diff: None,
            ad: None,
            fuse: None,
        };
        if let Some(sc) = &self.sc {
            cache.sc_out = sc.forward(p, f_t, n);
        }
        if let Some(diff) = &self.diff {
            let cat = self.concat(&feats, n);
            let (out, c) = diff.forward(p, &cat, n);
            cache.diff_out = out;
            cache.diff = Some(c);
        }
        let mut aux = Vec::new();
        if let Some(ad) = &self.ad {
            let input: Vec<f64> = match (self.variant(), self.config.ad_input) {
                (ModelVariant::NoDiff, _) => f_t.to_vec(),
                (_, AdInput::DiffVector) => cache.diff_out.clone(),
                (_, AdInput::DiffHidden) => {
                    let dm = self.diff.as_ref().expect("diff head present");
                    dm.penultimate(cache.diff.as_ref().expect("diff cache")).to_vec()
                }
            };
            let (out, c) = ad.forward(p, &input, n);
            aux = out;
            cache.ad = Some(c);
        }
        let mut outs = Vec::with_capacity(n);
        let row = |v: &Vec<f64>, i: usize| -> Option<Vec3> {
            (!v.is_empty()).then(|| [v[3 * i], v[3 * i + 1], v[3 * i + 2]])
        };
        match self.variant() {
            ModelVariant::TwoStream => {
                let fuse = self.fuse.as_ref().expect("fuse head");
                let cat = self.concat(&feats, n);
                let (out, c) = fuse.forward(p, &cat, n);
                cache.fuse = Some(c);
                outs.extend(vec3_rows(&out).map(|gaze| PairOutput {
                    gaze,
                    diff: None,
                    sc: None,
                    aux: None,
                }));
            }
            ModelVariant::DiffNn => {
                let labels = labels.ok_or(ModelError::MissingGuidanceLabel)?;
                if labels.len() != n {
                    return Err(ModelError::BatchMismatch {
                        tests: n,
                        guidance: labels.len(),
                    });
                }
                for (i, l) in labels.iter().enumerate() {
                    let dv = row(&cache.diff_out, i).expect("diff output");
                    let l = l.to_array();
                    outs.push(PairOutput {
                        gaze: [dv[0] + l[0], dv[1] + l[1], dv[2] + l[2]],
                        diff: Some(dv),
                        sc: None,
                        aux: None,
                    });
                }
            }
            ModelVariant::NoAd => {
                let g = self.gamma().expect("gamma");
                for i in 0..n {
                    let s = row(&cache.sc_out, i).expect("sc output");
                    let dv = row(&cache.diff_out, i).expect("diff output");
                    let mut gaze = [0.0; 3];
                    for k in 0..3 {
                        gaze[k] = g * s[k] + (1.0 - g) * dv[k];
                    }
                    outs.push(PairOutput {
                        gaze,
                        diff: Some(dv),
                        sc: Some(s),
                        aux: None,
                    });
                }
            }
            ModelVariant::Drnet | ModelVariant::NoSc | ModelVariant::NoDiff => {
                for i in 0..n {
                    let s = row(&cache.sc_out, i);
                    let a = row(&aux, i).expect("ad output");
                    let gaze = match s {
                        Some(s) => [s[0] + a[0], s[1] + a[1], s[2] + a[2]],
                        None => a,
                    };
                    outs.push(PairOutput {
                        gaze,
                        diff: row(&cache.diff_out, i),
                        sc: s,
                        aux: Some(a),
                    });
                }
            }
        }
        cache.feats = feats;
        Ok((outs, cache))
    }

    fn heads_backward(&self, grads: &mut Grads, cache: &HeadCache, d_gaze: &[Vec3], d_diff: &[Vec3]) -> Vec<f64> {
        let n = cache.n;
        let d = self.extractor.feature_dim();
        let p = &self.params;
        let rows = cache.feats.len() / d;
        let mut dfeat = vec![0.0; rows * d];
        let dg: Vec<f64> = d_gaze.iter().flatten().copied().collect();
        let mut dd: Vec<f64> = d_diff.iter().flatten().copied().collect();
        let f_t = &cache.feats[..n * d];

        let add_to = |dst: &mut [f64], src: &[f64]| {
            for (a, b) in dst.iter_mut().zip(src) {
                *a += b;
            }
        };

        let mut d_sc = Vec::new();
        let mut d_ad = Vec::new();
        match self.variant() {
            ModelVariant::Drnet | ModelVariant::NoDiff => {
                d_sc = dg.clone();
                d_ad = dg.clone();
            }
            ModelVariant::NoSc => d_ad = dg.clone(),
            ModelVariant::NoAd => {
                let g = self.gamma().expect("gamma");
                d_sc = dg.iter().map(|v| g * v).collect();
                for (a, b) in dd.iter_mut().zip(&dg) {
                    *a += (1.0 - g) * b;
                }
                let dgamma: f64 = (0..n * 3).map(|j| dg[j] * (cache.sc_out[j] - cache.diff_out[j])).sum();
                grads.slot(self.gamma.expect("gamma"))[0] += dgamma;
            }
            ModelVariant::DiffNn => {
                for (a, b) in dd.iter_mut().zip(&dg) {
                    *a += b;
                }
            }
            ModelVariant::TwoStream => {
                let fuse = self.fuse.as_ref().expect("fuse head");
                let dcat = fuse.backward(p, grads, cache.fuse.as_ref().expect("fuse cache"), &dg, true);
                self.split_cat(&dcat, n, &mut dfeat);
            }
        }

        if let Some(sc) = &self.sc {
            if !d_sc.is_empty() {
                let dx = sc.backward(p, grads, f_t, &d_sc, n, true);
                add_to(&mut dfeat[..n * d], &dx);
            }
        }
        let mut d_hidden = None;
        if let Some(ad) = &self.ad {
            let d_in = ad.backward(p, grads, cache.ad.as_ref().expect("ad cache"), &d_ad, true);
            match (self.variant(), self.config.ad_input) {
                (ModelVariant::NoDiff, _) => add_to(&mut dfeat[..n * d], &d_in),
                (_, AdInput::DiffVector) => add_to(&mut dd, &d_in),
                (_, AdInput::DiffHidden) => d_hidden = Some(d_in),
            }
        }
        if let Some(diff) = &self.diff {
            let dcat = diff.backward_with_hidden(
                p,
                grads,
                cache.diff.as_ref().expect("diff cache"),
                &dd,
                d_hidden.as_deref(),
                true,
            );
            self.split_cat(&dcat, n, &mut dfeat);
        }
        dfeat
    }

    fn split_cat(&self, dcat: &[f64], n: usize, dfeat: &mut [f64]) {
        let d = self.extractor.feature_dim();
        for i in 0..n {
            let row = &dcat[i * 2 * d..(i + 1) * 2 * d];
            for k in 0..d {
                dfeat[i * d + k] += row[k];
                dfeat[(n + i) * d + k] += row[d + k];
            }
        }
    }

    /// Training-mode forward (batch statistics in batch norm).
    ///
    /// `guidance_labels` is consumed only by `DiffNn`.
    pub fn forward_train(
        &self,
        tests: &[&EyeImage],
        guidance: &[&EyeImage],
        guidance_labels: Option<&[GazeVector]>,
    ) -> Result<(Vec<PairOutput>, TrainCache), ModelError> {
        let (x, rows) = self.stack(tests, guidance)?;
        let (feats, ext) = self.extractor.forward_train(&self.params, &x, rows);
        let labels = if self.variant().requires_guidance_label() {
            guidance_labels
        } else {
            None
        };
        let (outs, heads) = self.heads_forward(feats, tests.len(), labels)?;
        self.debug_check_shortcut(&outs);
        Ok((outs, TrainCache { ext, heads }))
    }

    /// Gradients of a loss whose derivatives with respect to each pair's gaze
    /// output and differential output are `d_gaze` and `d_diff`.
    pub fn backward(&self, cache: &TrainCache, d_gaze: &[Vec3], d_diff: &[Vec3]) -> Grads {
        let mut grads = self.params.zero_grads();
        let dfeat = self.heads_backward(&mut grads, &cache.heads, d_gaze, d_diff);
        self.extractor.backward(&self.params, &mut grads, &cache.ext, &dfeat);
        grads
    }

    pub fn update_running_stats(&mut self, cache: &TrainCache) {
        let ext = &self.extractor;
        ext.update_running(&mut self.params, &cache.ext);
    }

    /// Inference-mode forward over a batch.
    pub fn infer_batch(&self, tests: &[&EyeImage], guidance: &[Guidance<'_>]) -> Result<Vec<PairOutput>, ModelError> {
        let images: Vec<&EyeImage> = guidance.iter().map(|g| g.image()).collect();
        let (x, rows) = self.stack(tests, &images)?;
        let labels: Option<Vec<GazeVector>> = if self.variant().requires_guidance_label() {
            let mut ls = Vec::with_capacity(guidance.len());
            for g in guidance {
                match g {
                    Guidance::Labeled { label, .. } => ls.push(*label),
                    Guidance::Image(_) => return Err(ModelError::MissingGuidanceLabel),
                }
            }
            Some(ls)
        } else {
            None
        };
        let feats = self.extractor.forward_eval(&self.params, &x, rows);
        let (outs, _) = self.heads_forward(feats, tests.len(), labels.as_deref())?;
        self.debug_check_shortcut(&outs);
        Ok(outs)
    }

    pub fn predict(&self, test: &EyeImage, guidance: Guidance<'_>) -> Result<Vec3, ModelError> {
        Ok(self.infer_batch(&[test], &[guidance])?[0].gaze)
    }

    fn debug_check_shortcut(&self, outs: &[PairOutput]) {
        if cfg!(debug_assertions) && matches!(self.variant(), ModelVariant::Drnet | ModelVariant::NoDiff) {
            for o in outs {
                let (s, a) = (o.sc.expect("sc"), o.aux.expect("aux"));
                if !(0..3).all(|k| o.gaze[k].is_finite()) {
                    continue;
                }
                debug_assert!((0..3).all(|k| o.gaze[k] == s[k] + a[k]), "shortcut additivity violated");
            }
        }
    }

    fn expect_variant(&self, v: ModelVariant) -> Result<(), ModelError> {
        if self.variant() == v {
            Ok(())
        } else {
            Err(ModelError::VariantMismatch {
                expected: v,
                found: self.variant(),
            })
        }
    }

    pub fn drnet_forward(&self, test: &EyeImage, guidance: &EyeImage) -> Result<DrnetOutput, ModelError> {
        self.expect_variant(ModelVariant::Drnet)?;
        let o = self.infer_batch(&[test], &[Guidance::Image(guidance)])?[0];
        Ok(DrnetOutput {
            gaze: o.gaze,
            diff: o.diff.expect("diff"),
            sc: o.sc.expect("sc"),
            aux: o.aux.expect("aux"),
        })
    }

    pub fn two_stream_forward(&self, test: &EyeImage, guidance: &EyeImage) -> Result<Vec3, ModelError> {
        self.expect_variant(ModelVariant::TwoStream)?;
        self.predict(test, Guidance::Image(guidance))
    }

    /// Difference prediction added to the guidance label; `None` is an error.
    pub fn diffnn_forward(
        &self,
        test: &EyeImage,
        guidance: &EyeImage,
        guidance_label: Option<GazeVector>,
    ) -> Result<Vec3, ModelError> {
        self.expect_variant(ModelVariant::DiffNn)?;
        let label = guidance_label.ok_or(ModelError::MissingGuidanceLabel)?;
        self.predict(test, Guidance::Labeled { image: guidance, label })
    }

    pub fn noad_forward(&self, test: &EyeImage, guidance: &EyeImage) -> Result<Vec3, ModelError> {
        self.expect_variant(ModelVariant::NoAd)?;
        self.predict(test, Guidance::Image(guidance))
    }

    pub fn nosc_forward(&self, test: &EyeImage, guidance: &EyeImage) -> Result<Vec3, ModelError> {
        self.expect_variant(ModelVariant::NoSc)?;
        self.predict(test, Guidance::Image(guidance))
    }

    pub fn nodiff_forward(&self, test: &EyeImage, guidance: &EyeImage) -> Result<Vec3, ModelError> {
        self.expect_variant(ModelVariant::NoDiff)?;
        self.predict(test, Guidance::Image(guidance))
    }

    /// Inference-mode backbone features of one image.
    pub fn features(&self, image: &EyeImage) -> Result<FeatureVector, ModelError> {
        self.check_image(image)?;
        Ok(FeatureVector(self.extractor.forward_eval(
            &self.params,
            image.pixels(),
            1,
        )))
    }

    fn check_feature(&self, f: &FeatureVector) -> Result<(), ModelError> {
        let d = self.extractor.feature_dim();
        if f.len() != d {
            return Err(ModelError::FeatureDim {
                expected: d,
                got: f.len(),
            });
        }
        Ok(())
    }

    pub fn diff_module(&self, f_test: &FeatureVector, f_guidance: &FeatureVector) -> Result<Vec3, ModelError> {
        let diff = self.diff.as_ref().ok_or(ModelError::NoSuchModule("diff"))?;
        self.check_feature(f_test)?;
        self.check_feature(f_guidance)?;
        let mut cat = f_test.0.clone();
        cat.extend_from_slice(&f_guidance.0);
        let (out, _) = diff.forward(&self.params, &cat, 1);
        Ok([out[0], out[1], out[2]])
    }

    /// Adjustment head applied to a 3-vector (the differential output).
    pub fn ad_module(&self, g_diff: &Vec3) -> Result<Vec3, ModelError> {
        let ad = self.ad.as_ref().ok_or(ModelError::NoSuchModule("ad"))?;
        if ad.inputs() != 3 {
            return Err(ModelError::FeatureDim {
                expected: ad.inputs(),
                got: 3,
            });
        }
        let (out, _) = ad.forward(&self.params, g_diff, 1);
        Ok([out[0], out[1], out[2]])
    }

    pub fn sc_module(&self, f_test: &FeatureVector) -> Result<Vec3, ModelError> {
        let sc = self.sc.as_ref().ok_or(ModelError::NoSuchModule("sc"))?;
        self.check_feature(f_test)?;
        let out = sc.forward(&self.params, &f_test.0, 1);
        Ok([out[0], out[1], out[2]])
    }
}
