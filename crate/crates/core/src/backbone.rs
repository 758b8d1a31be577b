//! Convolutional feature extractor shared by the test and guidance streams.
//!
//! `blocks x (3x3 stride-2 conv -> batch norm -> ReLU)`, then one fully
//! connected projection to the feature dimension.

use alloc::vec::Vec;

use rand::Rng;

use crate::nn::{BatchNorm, BnCache, Conv2d, Grads, Init, Linear, ParamStore};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackboneConfig {
    pub height: usize,
    pub width: usize,
    /// Output channels of each conv block.
    pub channels: Vec<usize>,
    pub feature_dim: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            height: crate::data::DEFAULT_HEIGHT,
            width: crate::data::DEFAULT_WIDTH,
            channels: alloc::vec![8, 16, 32],
            feature_dim: 64,
        }
    }
}

impl BackboneConfig {
    /// One conv block and an 8-dimensional feature, for gradient checks.
    pub fn tiny() -> Self {
        Self {
            channels: alloc::vec![4],
            feature_dim: 8,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureExtractor {
    blocks: Vec<(Conv2d, BatchNorm)>,
    /// Input `(h, w)` of each block.
    dims: Vec<(usize, usize)>,
    fc: Linear,
    config: BackboneConfig,
}

struct BlockCache {
    cols: Vec<f64>,
    bn: BnCache,
    /// Post-rectifier output.
    act: Vec<f64>,
}

pub struct ExtractorCache {
    blocks: Vec<BlockCache>,
    n: usize,
}

impl FeatureExtractor {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, config: &BackboneConfig, rng: &mut R) -> Self {
        let mut blocks = Vec::new();
        let mut dims = Vec::new();
        let (mut h, mut w, mut c) = (config.height, config.width, 1);
        for (i, &oc) in config.channels.iter().enumerate() {
            let conv = Conv2d::new(store, &alloc::format!("backbone.conv{i}"), c, oc, 3, 2, 1, rng);
            let bn = BatchNorm::new(store, &alloc::format!("backbone.bn{i}"), oc);
            dims.push((h, w));
            (h, w) = conv.output_dims(h, w);
            c = oc;
            blocks.push((conv, bn));
        }
        let fc = Linear::new(store, "backbone.fc", c * h * w, config.feature_dim, Init::Lecun, rng);
        Self {
            blocks,
            dims,
            fc,
            config: config.clone(),
        }
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn feature_dim(&self) -> usize {
        self.config.feature_dim
    }

    fn block_out(&self, i: usize) -> (usize, usize, usize) {
        let (h, w) = self.dims[i];
        let (ho, wo) = self.blocks[i].0.output_dims(h, w);
        (self.blocks[i].0.out_channels, ho, wo)
    }

    /// `x` holds `n` images of the configured resolution, back to back.
    pub fn forward_eval(&self, store: &ParamStore, x: &[f64], n: usize) -> Vec<f64> {
        let mut act = x.to_vec();
        for (i, (conv, bn)) in self.blocks.iter().enumerate() {
            let (h, w) = self.dims[i];
            let (z, _) = conv.forward(store, &act, n, h, w);
            let (_, ho, wo) = self.block_out(i);
            act = bn.forward_eval(store, &z, n, ho * wo);
            crate::nn::relu(&mut act);
        }
        self.fc.forward(store, &act, n)
    }

    pub fn forward_train(&self, store: &ParamStore, x: &[f64], n: usize) -> (Vec<f64>, ExtractorCache) {
        let mut caches = Vec::with_capacity(self.blocks.len());
        let mut input = x.to_vec();
        for (i, (conv, bn)) in self.blocks.iter().enumerate() {
            let (h, w) = self.dims[i];
            let (z, cols) = conv.forward(store, &input, n, h, w);
            let (_, ho, wo) = self.block_out(i);
            let (mut act, bn_cache) = bn.forward_train(store, &z, n, ho * wo);
            crate::nn::relu(&mut act);
            input = act.clone();
            caches.push(BlockCache {
                cols,
                bn: bn_cache,
                act,
            });
        }
        let feats = self.fc.forward(store, &input, n);
        (feats, ExtractorCache { blocks: caches, n })
    }

    pub fn backward(&self, store: &ParamStore, grads: &mut Grads, cache: &ExtractorCache, dfeat: &[f64]) {
        let n = cache.n;
        let last = cache.blocks.last().expect("at least one block");
        let mut d = self.fc.backward(store, grads, &last.act, dfeat, n, true);
        for i in (0..self.blocks.len()).rev() {
            let (conv, bn) = &self.blocks[i];
            let bc = &cache.blocks[i];
            let (_, ho, wo) = self.block_out(i);
            crate::nn::relu_backward(&bc.act, &mut d);
            let dz = bn.backward(store, grads, &bc.bn, &d, n, ho * wo);
            let (h, w) = self.dims[i];
            d = conv.backward(store, grads, &bc.cols, &dz, n, h, w, i > 0);
        }
    }

    pub fn update_running(&self, store: &mut ParamStore, cache: &ExtractorCache) {
        for ((_, bn), bc) in self.blocks.iter().zip(&cache.blocks) {
            bn.update_running(store, &bc.bn);
        }
    }
}
