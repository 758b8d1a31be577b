//! Minimal layer library with explicit backward passes.
//!
//! All parameters of a model live in one [`ParamStore`]; layers hold
//! [`ParamId`] handles into it. Gradients accumulate into a [`Grads`] value
//! with the same layout, which keeps the optimizer, checkpointing and
//! finite-difference checks uniform over every trainable array.
//!
//! Activations are row-major `f64` buffers. Image batches use `N x C x H x W`.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, Normal};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    /// Buffers such as batch-norm running statistics are stored but never optimized.
    pub trainable: bool,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, shape: &[usize], data: Vec<f64>, trainable: bool) -> ParamId {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.entries.push(ParamEntry {
            name: String::from(name),
            shape: shape.to_vec(),
            data,
            trainable,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.entries[id.0].data
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.entries[id.0].data
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|e| e.data.iter().all(|v| v.is_finite()))
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry] {
        &mut self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.entries.iter().filter(|e| e.trainable).map(|e| e.data.len()).sum()
    }

    pub fn zero_grads(&self) -> Grads {
        Grads {
            data: self.entries.iter().map(|e| vec![0.0; e.data.len()]).collect(),
        }
    }
}

/// Gradient buffers parallel to a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    pub data: Vec<Vec<f64>>,
}

impl Grads {
    pub fn slot(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.data[id.0]
    }

    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.data[id.0]
    }

    pub fn global_norm(&self) -> f64 {
        libm::sqrt(self.data.iter().flatten().map(|g| g * g).sum::<f64>())
    }

    pub fn scale(&mut self, k: f64) {
        self.data.iter_mut().flatten().for_each(|g| *g *= k);
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().flatten().all(|g| g.is_finite())
    }

    /// Rescales so the global norm does not exceed `max_norm`. Returns the pre-clip norm.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let n = self.global_norm();
        if n > max_norm && n.is_finite() {
            self.scale(max_norm / n);
        }
        n
    }
}

/// `c = a * b + beta * c` for row-major slices, `a: m x k`, `b: k x n`.
///
/// `a_t`/`b_t` read the operand transposed from its row-major storage.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, beta: f64, c: &mut [f64]) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserted lengths cover every index addressed by the given strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn normal_init<R: Rng + ?Sized>(rng: &mut R, n: usize, std: f64) -> Vec<f64> {
    let dist = Normal::new(0.0, std).expect("positive std");
    (0..n).map(|_| dist.sample(rng)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    /// `N(0, 2 / fan_in)`, for layers feeding a rectifier.
    He,
    /// `N(0, 1 / fan_in)`, for output projections.
    Lecun,
    Zero,
}

impl Init {
    fn weights<R: Rng + ?Sized>(self, rng: &mut R, n: usize, fan_in: usize) -> Vec<f64> {
        match self {
            Init::He => normal_init(rng, n, libm::sqrt(2.0 / fan_in as f64)),
            Init::Lecun => normal_init(rng, n, libm::sqrt(1.0 / fan_in as f64)),
            Init::Zero => vec![0.0; n],
        }
    }
}

/// Fully connected layer, `y = x W^T + b` with `W: out x in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub inputs: usize,
    pub outputs: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        inputs: usize,
        outputs: usize,
        init: Init,
        rng: &mut R,
    ) -> Self {
        let w = store.add(
            &alloc::format!("{name}.weight"),
            &[outputs, inputs],
            init.weights(rng, inputs * outputs, inputs),
            true,
        );
        let b = store.add(&alloc::format!("{name}.bias"), &[outputs], vec![0.0; outputs], true);
        Self { w, b, inputs, outputs }
    }

    pub fn forward(&self, store: &ParamStore, x: &[f64], n: usize) -> Vec<f64> {
        assert_eq!(x.len(), n * self.inputs, "linear input shape");
        let b = store.get(self.b);
        let mut y: Vec<f64> = (0..n).flat_map(|_| b.iter().copied()).collect();
        gemm(
            n,
            self.inputs,
            self.outputs,
            x,
            false,
            store.get(self.w),
            true,
            1.0,
            &mut y,
        );
        y
    }

    /// Accumulates parameter gradients; returns `dL/dx`.
    pub fn backward(
        &self,
        store: &ParamStore,
        grads: &mut Grads,
        x: &[f64],
        dy: &[f64],
        n: usize,
        need_dx: bool,
    ) -> Vec<f64> {
        gemm(
            self.outputs,
            n,
            self.inputs,
            dy,
            true,
            x,
            false,
            1.0,
            grads.slot(self.w),
        );
        let db = grads.slot(self.b);
        for row in dy.chunks_exact(self.outputs) {
            for (d, v) in db.iter_mut().zip(row) {
                *d += v;
            }
        }
        if !need_dx {
            return Vec::new();
        }
        let mut dx = vec![0.0; n * self.inputs];
        gemm(
            n,
            self.outputs,
            self.inputs,
            dy,
            false,
            store.get(self.w),
            false,
            0.0,
            &mut dx,
        );
        dx
    }
}

pub fn relu(x: &mut [f64]) {
    x.iter_mut().for_each(|v| {
        if *v < 0.0 {
            *v = 0.0
        }
    });
}

/// Multiplies `dy` by the rectifier derivative, using the post-activation values `y`.
pub fn relu_backward(y: &[f64], dy: &mut [f64]) {
    for (d, v) in dy.iter_mut().zip(y) {
        if *v <= 0.0 {
            *d = 0.0;
        }
    }
}

/// Stack of linear layers with rectifiers between them (none after the last).
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

#[derive(Debug, Clone)]
pub struct MlpCache {
    /// Input to each layer; entry 0 is the MLP input.
    inputs: Vec<Vec<f64>>,
    n: usize,
}

impl Mlp {
    /// `widths = [in, hidden.., out]`. The final layer uses `last_init`.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        widths: &[usize],
        last_init: Init,
        rng: &mut R,
    ) -> Self {
        assert!(widths.len() >= 2);
        let depth = widths.len() - 1;
        let layers = (0..depth)
            .map(|i| {
                let init = if i + 1 == depth { last_init } else { Init::He };
                Linear::new(
                    store,
                    &alloc::format!("{name}.{i}"),
                    widths[i],
                    widths[i + 1],
                    init,
                    rng,
                )
            })
            .collect();
        Self { layers }
    }

    pub fn inputs(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn outputs(&self) -> usize {
        self.layers[self.layers.len() - 1].outputs
    }

    pub fn forward(&self, store: &ParamStore, x: &[f64], n: usize) -> (Vec<f64>, MlpCache) {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut h = x.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut y = layer.forward(store, &h, n);
            if i + 1 < self.layers.len() {
                relu(&mut y);
            }
            inputs.push(h);
            h = y;
        }
        (h, MlpCache { inputs, n })
    }

    /// Hidden activation feeding the final layer (the MLP input when there is one layer).
    pub fn penultimate<'c>(&self, cache: &'c MlpCache) -> &'c [f64] {
        &cache.inputs[cache.inputs.len() - 1]
    }

    pub fn backward(
        &self,
        store: &ParamStore,
        grads: &mut Grads,
        cache: &MlpCache,
        dy: &[f64],
        need_dx: bool,
    ) -> Vec<f64> {
        self.backward_with_hidden(store, grads, cache, dy, None, need_dx)
    }

    /// Like [`Mlp::backward`], with an extra gradient arriving at the penultimate activation.
    pub fn backward_with_hidden(
        &self,
        store: &ParamStore,
        grads: &mut Grads,
        cache: &MlpCache,
        dy: &[f64],
        d_hidden: Option<&[f64]>,
        need_dx: bool,
    ) -> Vec<f64> {
        let mut d = dy.to_vec();
        let last = self.layers.len() - 1;
        for i in (0..self.layers.len()).rev() {
            let x = &cache.inputs[i];
            let want = i > 0 || need_dx;
            let mut dx = self.layers[i].backward(store, grads, x, &d, cache.n, want);
            if !want {
                return Vec::new();
            }
            if i == last {
                if let Some(extra) = d_hidden {
                    for (a, b) in dx.iter_mut().zip(extra) {
                        *a += b;
                    }
                }
            }
            if i > 0 {
                relu_backward(x, &mut dx);
            }
            d = dx;
        }
        d
    }
}

/// Square-kernel convolution without bias (a batch norm always follows).
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub w: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let w = store.add(
            &alloc::format!("{name}.weight"),
            &[out_channels, in_channels, kernel, kernel],
            Init::He.weights(rng, out_channels * fan_in, fan_in),
            true,
        );
        Self {
            w,
            in_channels,
            out_channels,
            kernel,
            stride,
            pad,
        }
    }

    pub fn output_dims(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.kernel) / self.stride + 1,
            (w + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }

    fn im2col(&self, x: &[f64], h: usize, w: usize, col: &mut [f64]) {
        let (ho, wo) = self.output_dims(h, w);
        let k = self.kernel;
        let p = ho * wo;
        for c in 0..self.in_channels {
            let plane = &x[c * h * w..(c + 1) * h * w];
            for kh in 0..k {
                for kw in 0..k {
                    let row = &mut col[((c * k + kh) * k + kw) * p..][..p];
                    for oh in 0..ho {
                        let ih = (oh * self.stride + kh) as isize - self.pad as isize;
                        let out = &mut row[oh * wo..(oh + 1) * wo];
                        if ih < 0 || ih >= h as isize {
                            out.fill(0.0);
                            continue;
                        }
                        let src = &plane[ih as usize * w..(ih as usize + 1) * w];
                        for (ow, o) in out.iter_mut().enumerate() {
                            let iw = (ow * self.stride + kw) as isize - self.pad as isize;
                            *o = if iw < 0 || iw >= w as isize {
                                0.0
                            } else {
                                src[iw as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, col: &[f64], h: usize, w: usize, dx: &mut [f64]) {
        let (ho, wo) = self.output_dims(h, w);
        let k = self.kernel;
        let p = ho * wo;
        for c in 0..self.in_channels {
            let plane = &mut dx[c * h * w..(c + 1) * h * w];
            for kh in 0..k {
                for kw in 0..k {
                    let row = &col[((c * k + kh) * k + kw) * p..][..p];
                    for oh in 0..ho {
                        let ih = (oh * self.stride + kh) as isize - self.pad as isize;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        let dst = &mut plane[ih as usize * w..(ih as usize + 1) * w];
                        for (ow, v) in row[oh * wo..(oh + 1) * wo].iter().enumerate() {
                            let iw = (ow * self.stride + kw) as isize - self.pad as isize;
                            if iw >= 0 && iw < w as isize {
                                dst[iw as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    }

    fn col_len(&self, h: usize, w: usize) -> usize {
        let (ho, wo) = self.output_dims(h, w);
        self.in_channels * self.kernel * self.kernel * ho * wo
    }

    /// Returns `(output N x OC x Ho x Wo, im2col buffers for backward)`.
    pub fn forward(&self, store: &ParamStore, x: &[f64], n: usize, h: usize, w: usize) -> (Vec<f64>, Vec<f64>) {
        let in_len = self.in_channels * h * w;
        assert_eq!(x.len(), n * in_len, "conv input shape");
        let (ho, wo) = self.output_dims(h, w);
        let p = ho * wo;
        let ck = self.in_channels * self.kernel * self.kernel;
        let cl = self.col_len(h, w);
        let mut cols = vec![0.0; n * cl];
        let mut out = vec![0.0; n * self.out_channels * p];
        let weight = store.get(self.w);
        for i in 0..n {
            let col = &mut cols[i * cl..(i + 1) * cl];
            self.im2col(&x[i * in_len..(i + 1) * in_len], h, w, col);
            let o = &mut out[i * self.out_channels * p..(i + 1) * self.out_channels * p];
            gemm(self.out_channels, ck, p, weight, false, col, false, 0.0, o);
        }
        (out, cols)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn backward(
        &self,
        store: &ParamStore,
        grads: &mut Grads,
        cols: &[f64],
        dout: &[f64],
        n: usize,
        h: usize,
        w: usize,
        need_dx: bool,
    ) -> Vec<f64> {
        let (ho, wo) = self.output_dims(h, w);
        let p = ho * wo;
        let ck = self.in_channels * self.kernel * self.kernel;
        let cl = self.col_len(h, w);
        let op = self.out_channels * p;
        let in_len = self.in_channels * h * w;
        {
            let dw = grads.slot(self.w);
            for i in 0..n {
                gemm(
                    self.out_channels,
                    p,
                    ck,
                    &dout[i * op..(i + 1) * op],
                    false,
                    &cols[i * cl..(i + 1) * cl],
                    true,
                    1.0,
                    dw,
                );
            }
        }
        if !need_dx {
            return Vec::new();
        }
        let weight = store.get(self.w);
        let mut dx = vec![0.0; n * in_len];
        let mut dcol = vec![0.0; cl];
        for i in 0..n {
            gemm(
                ck,
                self.out_channels,
                p,
                weight,
                true,
                &dout[i * op..(i + 1) * op],
                false,
                0.0,
                &mut dcol,
            );
            self.col2im(&dcol, h, w, &mut dx[i * in_len..(i + 1) * in_len]);
        }
        dx
    }
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Per-channel batch normalization over `N x C x P` activations.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub channels: usize,
}

#[derive(Debug, Clone)]
pub struct BnCache {
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    pub batch_mean: Vec<f64>,
    /// Unbiased batch variance, used for the running estimate.
    pub batch_var_unbiased: Vec<f64>,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        Self {
            gamma: store.add(&alloc::format!("{name}.gamma"), &[channels], vec![1.0; channels], true),
            beta: store.add(&alloc::format!("{name}.beta"), &[channels], vec![0.0; channels], true),
            running_mean: store.add(
                &alloc::format!("{name}.running_mean"),
                &[channels],
                vec![0.0; channels],
                false,
            ),
            running_var: store.add(
                &alloc::format!("{name}.running_var"),
                &[channels],
                vec![1.0; channels],
                false,
            ),
            channels,
        }
    }

    pub fn forward_train(&self, store: &ParamStore, x: &[f64], n: usize, p: usize) -> (Vec<f64>, BnCache) {
        let c = self.channels;
        let m = (n * p) as f64;
        let gamma = store.get(self.gamma);
        let beta = store.get(self.beta);
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for i in 0..n {
            for ch in 0..c {
                mean[ch] += x[(i * c + ch) * p..][..p].iter().sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|v| *v /= m);
        for i in 0..n {
            for ch in 0..c {
                let mu = mean[ch];
                var[ch] += x[(i * c + ch) * p..][..p]
                    .iter()
                    .map(|v| (v - mu) * (v - mu))
                    .sum::<f64>();
            }
        }
        let unbiased: Vec<f64> = var.iter().map(|v| if m > 1.0 { v / (m - 1.0) } else { 0.0 }).collect();
        var.iter_mut().for_each(|v| *v /= m);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / libm::sqrt(v + BN_EPS)).collect();
        let mut xhat = vec![0.0; x.len()];
        let mut y = vec![0.0; x.len()];
        for i in 0..n {
            for ch in 0..c {
                let off = (i * c + ch) * p;
                for j in off..off + p {
                    let h = (x[j] - mean[ch]) * inv_std[ch];
                    xhat[j] = h;
                    y[j] = gamma[ch] * h + beta[ch];
                }
            }
        }
        (
            y,
            BnCache {
                xhat,
                inv_std,
                batch_mean: mean,
                batch_var_unbiased: unbiased,
            },
        )
    }

    pub fn forward_eval(&self, store: &ParamStore, x: &[f64], n: usize, p: usize) -> Vec<f64> {
        let c = self.channels;
        let gamma = store.get(self.gamma);
        let beta = store.get(self.beta);
        let rm = store.get(self.running_mean);
        let rv = store.get(self.running_var);
        let mut y = vec![0.0; x.len()];
        for i in 0..n {
            for ch in 0..c {
                let scale = gamma[ch] / libm::sqrt(rv[ch] + BN_EPS);
                let shift = beta[ch] - rm[ch] * scale;
                let off = (i * c + ch) * p;
                for j in off..off + p {
                    y[j] = x[j] * scale + shift;
                }
            }
        }
        y
    }

    pub fn backward(
        &self,
        store: &ParamStore,
        grads: &mut Grads,
        cache: &BnCache,
        dy: &[f64],
        n: usize,
        p: usize,
    ) -> Vec<f64> {
        let c = self.channels;
        let m = (n * p) as f64;
        let gamma = store.get(self.gamma);
        let mut sum_dy = vec![0.0; c];
        let mut sum_dy_xhat = vec![0.0; c];
        for i in 0..n {
            for ch in 0..c {
                let off = (i * c + ch) * p;
                for (d, x) in dy[off..off + p].iter().zip(&cache.xhat[off..off + p]) {
                    sum_dy[ch] += d;
                    sum_dy_xhat[ch] += d * x;
                }
            }
        }
        for (g, s) in grads.slot(self.gamma).iter_mut().zip(&sum_dy_xhat) {
            *g += s;
        }
        for (g, s) in grads.slot(self.beta).iter_mut().zip(&sum_dy) {
            *g += s;
        }
        let mut dx = vec![0.0; dy.len()];
        for i in 0..n {
            for ch in 0..c {
                let k = gamma[ch] * cache.inv_std[ch] / m;
                let off = (i * c + ch) * p;
                for j in off..off + p {
                    dx[j] = k * (m * dy[j] - sum_dy[ch] - cache.xhat[j] * sum_dy_xhat[ch]);
                }
            }
        }
        dx
    }

    /// Exponential moving update of the running statistics from one training batch.
    pub fn update_running(&self, store: &mut ParamStore, cache: &BnCache) {
        let rm = store.get_mut(self.running_mean);
        for (r, b) in rm.iter_mut().zip(&cache.batch_mean) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
        }
        let rv = store.get_mut(self.running_var);
        for (r, b) in rv.iter_mut().zip(&cache.batch_var_unbiased) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
        }
    }
}
