//! Fully-convolutional conv + PReLU network with hand-written reverse-mode
//! gradients, SGD with momentum, a schedule-driven trainer and a binary
//! checkpoint format.
//!
//! Convolutions keep the spatial size by replicating border samples. Weights
//! are exposed in `out × k × k × in` order; internally they are stored as
//! `[ky][kx][in][out]` so the inner loops run over output channels.
//!
//! # Checkpoint layout
//!
//! All integers are little-endian `u32`, all parameters little-endian `f64`.
//!
//! ```text
//! magic       8 bytes  "IMGLNET1"
//! layer_count u32
//! per layer:
//!   tag       u8       1 = conv, 2 = prelu
//!   conv:     out u32, in u32, k u32, weights (out·k·k·in f64), bias (out f64)
//!   prelu:    channels u32, slopes (channels f64)
//! ```
//!
//! Trailing bytes are an error.

use std::fmt;
use std::fs;
use std::ops::Range;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::image::ImageBuffer;
use crate::loss::{LossFunction, LossKind};
use crate::metrics::{evaluate_corpus, Metric};
use crate::pipeline::TrainingPair;

/// Dense `h × w × c` activation, channel-fastest like [`ImageBuffer`] but
/// without the finiteness guarantee.
#[derive(Debug, Clone, PartialEq)]
struct Act {
    h: usize,
    w: usize,
    c: usize,
    data: Vec<f64>,
}

impl Act {
    fn zeros(h: usize, w: usize, c: usize) -> Self {
        Self {
            h,
            w,
            c,
            data: vec![0.0; h * w * c],
        }
    }

    fn from_image(img: &ImageBuffer) -> Self {
        let (h, w, c) = img.shape();
        Self {
            h,
            w,
            c,
            data: img.as_slice().to_vec(),
        }
    }

    fn pixel(&self, y: usize, x: usize) -> &[f64] {
        let p = (y * self.w + x) * self.c;
        &self.data[p..p + self.c]
    }

    fn pixel_mut(&mut self, y: usize, x: usize) -> &mut [f64] {
        let p = (y * self.w + x) * self.c;
        &mut self.data[p..p + self.c]
    }

    fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn into_image(self) -> Result<ImageBuffer> {
        if !self.is_finite() {
            return Err(Error::InvalidArgument(
                "network produced non-finite values".into(),
            ));
        }
        ImageBuffer::from_vec(self.h, self.w, self.c, self.data)
    }
}

fn pad_replicate(a: &Act, r: usize) -> Act {
    if r == 0 {
        return a.clone();
    }
    let (ph, pw) = (a.h + 2 * r, a.w + 2 * r);
    let mut data = Vec::with_capacity(ph * pw * a.c);
    for py in 0..ph {
        let y = py.saturating_sub(r).min(a.h - 1);
        for px in 0..pw {
            let x = px.saturating_sub(r).min(a.w - 1);
            data.extend_from_slice(a.pixel(y, x));
        }
    }
    Act {
        h: ph,
        w: pw,
        c: a.c,
        data,
    }
}

/// Adjoint of [`pad_replicate`]: each padded sample adds into the clamped
/// source it was copied from.
fn fold_padded(g: &Act, r: usize, h: usize, w: usize) -> Act {
    if r == 0 {
        return g.clone();
    }
    let mut out = Act::zeros(h, w, g.c);
    for py in 0..g.h {
        let y = py.saturating_sub(r).min(h - 1);
        for px in 0..g.w {
            let x = px.saturating_sub(r).min(w - 1);
            let src = g.pixel(py, px);
            for (d, s) in out.pixel_mut(y, x).iter_mut().zip(src) {
                *d += s;
            }
        }
    }
    out
}

/// Layer descriptor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerSpec {
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
    },
    Prelu {
        channels: usize,
    },
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            LayerSpec::Conv {
                in_channels,
                out_channels,
                kernel,
            } => write!(f, "conv {out_channels}x{kernel}x{kernel}x{in_channels}"),
            LayerSpec::Prelu { channels } => write!(f, "prelu {channels}"),
        }
    }
}

/// Ordered layer descriptors.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Architecture {
    pub layers: Vec<LayerSpec>,
}

impl Architecture {
    /// conv 64×9×9×3 → PReLU → conv 64×5×5×64 → PReLU → conv 3×5×5×64.
    pub fn default_net() -> Self {
        Self::three_layer(3, 64)
    }

    /// The default layout with `width` hidden channels.
    pub fn three_layer(channels: usize, width: usize) -> Self {
        Self {
            layers: vec![
                LayerSpec::Conv {
                    in_channels: channels,
                    out_channels: width,
                    kernel: 9,
                },
                LayerSpec::Prelu { channels: width },
                LayerSpec::Conv {
                    in_channels: width,
                    out_channels: width,
                    kernel: 5,
                },
                LayerSpec::Prelu { channels: width },
                LayerSpec::Conv {
                    in_channels: width,
                    out_channels: channels,
                    kernel: 5,
                },
            ],
        }
    }

    /// Two 3×3 convolutions with a PReLU between them.
    pub fn toy(channels: usize, hidden: usize) -> Self {
        Self {
            layers: vec![
                LayerSpec::Conv {
                    in_channels: channels,
                    out_channels: hidden,
                    kernel: 3,
                },
                LayerSpec::Prelu { channels: hidden },
                LayerSpec::Conv {
                    in_channels: hidden,
                    out_channels: channels,
                    kernel: 3,
                },
            ],
        }
    }

    /// One 1×1 convolution.
    pub fn single_conv(channels: usize) -> Self {
        Self {
            layers: vec![LayerSpec::Conv {
                in_channels: channels,
                out_channels: channels,
                kernel: 1,
            }],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.layers.is_empty() {
            return bad("architecture has no layers".into());
        }
        let mut channels: Option<usize> = None;
        for (n, layer) in self.layers.iter().enumerate() {
            let (cin, cout) = match *layer {
                LayerSpec::Conv {
                    in_channels,
                    out_channels,
                    kernel,
                } => {
                    if kernel % 2 == 0 {
                        return bad(format!("layer {n}: kernel size {kernel} is not odd"));
                    }
                    (in_channels, out_channels)
                }
                LayerSpec::Prelu { channels } => (channels, channels),
            };
            if cin == 0 || cout == 0 {
                return bad(format!("layer {n}: zero channels"));
            }
            if let Some(prev) = channels {
                if prev != cin {
                    return bad(format!(
                        "layer {n}: expects {cin} channels, previous layer gives {prev}"
                    ));
                }
            }
            channels = Some(cout);
        }
        Ok(())
    }

    pub fn in_channels(&self) -> usize {
        match self.layers[0] {
            LayerSpec::Conv { in_channels, .. } => in_channels,
            LayerSpec::Prelu { channels } => channels,
        }
    }

    pub fn out_channels(&self) -> usize {
        match *self.layers.last().expect("validated architecture") {
            LayerSpec::Conv { out_channels, .. } => out_channels,
            LayerSpec::Prelu { channels } => channels,
        }
    }

    /// Side of the input square that influences one output pixel.
    pub fn receptive_field(&self) -> usize {
        1 + self
            .layers
            .iter()
            .map(|l| match *l {
                LayerSpec::Conv { kernel, .. } => kernel - 1,
                LayerSpec::Prelu { .. } => 0,
            })
            .sum::<usize>()
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (n, l) in self.layers.iter().enumerate() {
            if n > 0 {
                f.write_str(" -> ")?;
            }
            write!(f, "{l}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    in_channels: usize,
    out_channels: usize,
    kernel: usize,
    /// `[ky][kx][in][out]`
    weights: Vec<f64>,
    bias: Vec<f64>,
    grad_weights: Vec<f64>,
    grad_bias: Vec<f64>,
    vel_weights: Vec<f64>,
    vel_bias: Vec<f64>,
}

impl ConvLayer {
    pub fn zeros(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        let n = kernel * kernel * in_channels * out_channels;
        Self {
            in_channels,
            out_channels,
            kernel,
            weights: vec![0.0; n],
            bias: vec![0.0; out_channels],
            grad_weights: vec![0.0; n],
            grad_bias: vec![0.0; out_channels],
            vel_weights: vec![0.0; n],
            vel_bias: vec![0.0; out_channels],
        }
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn kernel(&self) -> usize {
        self.kernel
    }

    #[inline]
    fn widx(&self, o: usize, ky: usize, kx: usize, i: usize) -> usize {
        ((ky * self.kernel + kx) * self.in_channels + i) * self.out_channels + o
    }

    /// Internal index of the `n`-th weight in `out × k × k × in` order.
    fn canonical_to_internal(&self, n: usize) -> usize {
        let (k, ic) = (self.kernel, self.in_channels);
        let i = n % ic;
        let kx = (n / ic) % k;
        let ky = (n / (ic * k)) % k;
        let o = n / (ic * k * k);
        self.widx(o, ky, kx, i)
    }

    pub fn weight(&self, o: usize, ky: usize, kx: usize, i: usize) -> f64 {
        self.weights[self.widx(o, ky, kx, i)]
    }

    pub fn set_weight(&mut self, o: usize, ky: usize, kx: usize, i: usize, v: f64) {
        let idx = self.widx(o, ky, kx, i);
        self.weights[idx] = v;
    }

    pub fn weight_grad(&self, o: usize, ky: usize, kx: usize, i: usize) -> f64 {
        self.grad_weights[self.widx(o, ky, kx, i)]
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn bias_mut(&mut self) -> &mut [f64] {
        &mut self.bias
    }

    pub fn bias_grad(&self) -> &[f64] {
        &self.grad_bias
    }

    fn num_weights(&self) -> usize {
        self.weights.len()
    }

    /// Rows of output pixels per im2col tile, keeping the column buffer
    /// near `TILE_ELEMS` values.
    fn tile_rows(&self, w: usize) -> usize {
        const TILE_ELEMS: usize = 1 << 21;
        let per_row = w * self.kernel * self.kernel * self.in_channels;
        (TILE_ELEMS / per_row.max(1)).max(1)
    }

    /// im2col for output rows `y0..y1`: one row of `k·k·in` values per pixel,
    /// ordered `(ky, kx, in)` to match the weight layout.
    fn columns(&self, padded: &Act, y0: usize, y1: usize, w: usize, cols: &mut Vec<f64>) {
        let (k, ic) = (self.kernel, self.in_channels);
        cols.clear();
        for y in y0..y1 {
            for x in 0..w {
                for ky in 0..k {
                    let p = ((y + ky) * padded.w + x) * ic;
                    cols.extend_from_slice(&padded.data[p..p + k * ic]);
                }
            }
        }
    }

    fn forward(&self, input: &Act) -> (Act, Act) {
        let (k, oc) = (self.kernel, self.out_channels);
        let kdim = k * k * self.in_channels;
        let padded = pad_replicate(input, k / 2);
        let (h, w) = (input.h, input.w);
        let mut out = Act::zeros(h, w, oc);
        for px in out.data.chunks_exact_mut(oc) {
            px.copy_from_slice(&self.bias);
        }
        let step = self.tile_rows(w);
        let mut cols = Vec::new();
        for y0 in (0..h).step_by(step) {
            let y1 = (y0 + step).min(h);
            self.columns(&padded, y0, y1, w, &mut cols);
            let m = (y1 - y0) * w;
            let dst = &mut out.data[y0 * w * oc..y1 * w * oc];
            // dst (m × oc) += cols (m × kdim) · weights (kdim × oc)
            // SAFETY: dimensions and strides describe the three live buffers.
            unsafe {
                matrixmultiply::dgemm(
                    m,
                    kdim,
                    oc,
                    1.0,
                    cols.as_ptr(),
                    kdim as isize,
                    1,
                    self.weights.as_ptr(),
                    oc as isize,
                    1,
                    1.0,
                    dst.as_mut_ptr(),
                    oc as isize,
                    1,
                );
            }
        }
        (padded, out)
    }

    /// Accumulates parameter gradients; returns the input gradient.
    fn backward(&mut self, padded: &Act, gout: &Act) -> Act {
        let (k, ic, oc) = (self.kernel, self.in_channels, self.out_channels);
        let kdim = k * k * ic;
        let (h, w) = (gout.h, gout.w);
        for g in gout.data.chunks_exact(oc) {
            for (gb, &gv) in self.grad_bias.iter_mut().zip(g) {
                *gb += gv;
            }
        }
        let mut gin = Act::zeros(padded.h, padded.w, ic);
        let step = self.tile_rows(w);
        let mut cols = Vec::new();
        let mut gcols = Vec::new();
        for y0 in (0..h).step_by(step) {
            let y1 = (y0 + step).min(h);
            self.columns(padded, y0, y1, w, &mut cols);
            let m = (y1 - y0) * w;
            let g = &gout.data[y0 * w * oc..y1 * w * oc];
            gcols.clear();
            gcols.resize(m * kdim, 0.0);
            // SAFETY: dimensions and strides describe the live buffers.
            unsafe {
                // grad_weights (kdim × oc) += colsᵀ · g
                matrixmultiply::dgemm(
                    kdim,
                    m,
                    oc,
                    1.0,
                    cols.as_ptr(),
                    1,
                    kdim as isize,
                    g.as_ptr(),
                    oc as isize,
                    1,
                    1.0,
                    self.grad_weights.as_mut_ptr(),
                    oc as isize,
                    1,
                );
                // gcols (m × kdim) = g · weightsᵀ
                matrixmultiply::dgemm(
                    m,
                    oc,
                    kdim,
                    1.0,
                    g.as_ptr(),
                    oc as isize,
                    1,
                    self.weights.as_ptr(),
                    1,
                    oc as isize,
                    0.0,
                    gcols.as_mut_ptr(),
                    kdim as isize,
                    1,
                );
            }
            // col2im
            let mut rows = gcols.chunks_exact(k * ic);
            for y in y0..y1 {
                for x in 0..w {
                    for ky in 0..k {
                        let p = ((y + ky) * padded.w + x) * ic;
                        let src = rows.next().expect("one row per tap line");
                        for (d, s) in gin.data[p..p + k * ic].iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
            }
        }
        fold_padded(&gin, k / 2, h, w)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreluLayer {
    slope: Vec<f64>,
    grad_slope: Vec<f64>,
    vel_slope: Vec<f64>,
}

impl PreluLayer {
    pub const INITIAL_SLOPE: f64 = 0.25;

    pub fn new(channels: usize) -> Self {
        Self::with_slope(channels, Self::INITIAL_SLOPE)
    }

    pub fn with_slope(channels: usize, slope: f64) -> Self {
        Self {
            slope: vec![slope; channels],
            grad_slope: vec![0.0; channels],
            vel_slope: vec![0.0; channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.slope.len()
    }

    pub fn slope(&self) -> &[f64] {
        &self.slope
    }

    pub fn slope_mut(&mut self) -> &mut [f64] {
        &mut self.slope
    }

    pub fn slope_grad(&self) -> &[f64] {
        &self.grad_slope
    }

    fn forward(&self, input: &Act) -> Act {
        let mut out = input.clone();
        for px in out.data.chunks_exact_mut(input.c) {
            for (v, &a) in px.iter_mut().zip(&self.slope) {
                if *v < 0.0 {
                    *v *= a;
                }
            }
        }
        out
    }

    fn backward(&mut self, input: &Act, gout: &Act) -> Act {
        let mut gin = gout.clone();
        let c = input.c;
        for (gpx, xpx) in gin.data.chunks_exact_mut(c).zip(input.data.chunks_exact(c)) {
            for ch in 0..c {
                let x = xpx[ch];
                if x < 0.0 {
                    self.grad_slope[ch] += x * gpx[ch];
                    gpx[ch] *= self.slope[ch];
                }
            }
        }
        gin
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv(ConvLayer),
    Prelu(PreluLayer),
}

impl Layer {
    fn spec(&self) -> LayerSpec {
        match self {
            Layer::Conv(c) => LayerSpec::Conv {
                in_channels: c.in_channels,
                out_channels: c.out_channels,
                kernel: c.kernel,
            },
            Layer::Prelu(p) => LayerSpec::Prelu {
                channels: p.channels(),
            },
        }
    }

    fn param_count(&self) -> usize {
        match self {
            Layer::Conv(c) => c.weights.len() + c.bias.len(),
            Layer::Prelu(p) => p.slope.len(),
        }
    }

    /// `(parameter, gradient, velocity)` slices.
    fn slices_mut(&mut self) -> Vec<(&mut [f64], &mut [f64], &mut [f64])> {
        match self {
            Layer::Conv(c) => vec![
                (
                    &mut c.weights[..],
                    &mut c.grad_weights[..],
                    &mut c.vel_weights[..],
                ),
                (&mut c.bias[..], &mut c.grad_bias[..], &mut c.vel_bias[..]),
            ],
            Layer::Prelu(p) => vec![(
                &mut p.slope[..],
                &mut p.grad_slope[..],
                &mut p.vel_slope[..],
            )],
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum Slot {
    Weight(usize),
    Bias(usize),
    Slope(usize),
}

/// Sequential conv/PReLU network.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvNet {
    layers: Vec<Layer>,
    /// Per-layer inputs of the last cached forward pass (padded for convs).
    cache: Option<Vec<Act>>,
}

impl ConvNet {
    /// He-initialised weights (`N(0, 2/(k·k·in))`, drawn in `out × k × k × in`
    /// order), zero biases, PReLU slopes 0.25.
    pub fn new(arch: &Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(arch.layers.len());
        for spec in &arch.layers {
            layers.push(match *spec {
                LayerSpec::Conv {
                    in_channels,
                    out_channels,
                    kernel,
                } => {
                    let mut c = ConvLayer::zeros(in_channels, out_channels, kernel);
                    let std = (2.0 / (kernel * kernel * in_channels) as f64).sqrt();
                    let normal =
                        Normal::new(0.0, std).map_err(|e| Error::InvalidArgument(e.to_string()))?;
                    for n in 0..c.num_weights() {
                        let idx = c.canonical_to_internal(n);
                        c.weights[idx] = normal.sample(&mut rng);
                    }
                    Layer::Conv(c)
                }
                LayerSpec::Prelu { channels } => Layer::Prelu(PreluLayer::new(channels)),
            });
        }
        Ok(Self {
            layers,
            cache: None,
        })
    }

    /// Network from explicit layers; channel counts must chain.
    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        let net = Self {
            layers,
            cache: None,
        };
        net.architecture().validate()?;
        Ok(net)
    }

    /// One 1×1 convolution with identity weights.
    pub fn identity(channels: usize) -> Self {
        let mut c = ConvLayer::zeros(channels, channels, 1);
        for ch in 0..channels {
            c.set_weight(ch, 0, 0, ch, 1.0);
        }
        Self {
            layers: vec![Layer::Conv(c)],
            cache: None,
        }
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            layers: self.layers.iter().map(Layer::spec).collect(),
        }
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn in_channels(&self) -> usize {
        self.architecture().in_channels()
    }

    fn check_input(&self, input: &ImageBuffer) -> Result<()> {
        let want = self.in_channels();
        if input.channels() != want {
            return Err(Error::ShapeMismatch(format!(
                "network expects {want} input channels, image has {}",
                input.channels()
            )));
        }
        Ok(())
    }

    fn run(&self, input: &ImageBuffer, mut cache: Option<&mut Vec<Act>>) -> Result<Act> {
        self.check_input(input)?;
        let mut a = Act::from_image(input);
        for layer in &self.layers {
            a = match layer {
                Layer::Conv(c) => {
                    let (padded, out) = c.forward(&a);
                    if let Some(cache) = cache.as_deref_mut() {
                        cache.push(padded);
                    }
                    out
                }
                Layer::Prelu(p) => {
                    let out = p.forward(&a);
                    if let Some(cache) = cache.as_deref_mut() {
                        cache.push(a);
                    }
                    out
                }
            };
        }
        Ok(a)
    }

    /// Forward pass that caches activations for [`ConvNet::backward`].
    pub fn forward(&mut self, input: &ImageBuffer) -> Result<ImageBuffer> {
        self.forward_act(input)?.into_image()
    }

    fn forward_act(&mut self, input: &ImageBuffer) -> Result<Act> {
        self.cache = None;
        let mut cache = Vec::with_capacity(self.layers.len());
        let out = self.run(input, Some(&mut cache))?;
        self.cache = Some(cache);
        Ok(out)
    }

    /// Forward pass without caching.
    pub fn predict(&self, input: &ImageBuffer) -> Result<ImageBuffer> {
        self.run(input, None)?.into_image()
    }

    /// Back-propagates `loss_grad` (gradient of the loss with respect to the
    /// cached output), accumulating parameter gradients. Returns the gradient
    /// with respect to the input. Consumes the cache.
    pub fn backward(&mut self, loss_grad: &ImageBuffer) -> Result<ImageBuffer> {
        let cache = self.cache.take().ok_or(Error::NoForwardCache)?;
        let arch = self.architecture();
        let out_c = arch.out_channels();
        let (h, w) = match (&self.layers[0], &cache[0]) {
            (Layer::Conv(c), a) => (a.h - 2 * (c.kernel / 2), a.w - 2 * (c.kernel / 2)),
            (Layer::Prelu(_), a) => (a.h, a.w),
        };
        if loss_grad.shape() != (h, w, out_c) {
            return Err(Error::ShapeMismatch(format!(
                "loss gradient is {:?}, network output is {:?}",
                loss_grad.shape(),
                (h, w, out_c)
            )));
        }
        let mut g = Act::from_image(loss_grad);
        for (layer, input) in self.layers.iter_mut().zip(&cache).rev() {
            g = match layer {
                Layer::Conv(c) => c.backward(input, &g),
                Layer::Prelu(p) => p.backward(input, &g),
            };
        }
        g.into_image()
    }

    pub fn zero_grad(&mut self) {
        for layer in &mut self.layers {
            for (_, g, _) in layer.slices_mut() {
                g.fill(0.0);
            }
        }
    }

    /// `v ← momentum·v − rate·g; p ← p + v`, then clears gradients.
    pub fn sgd_step(&mut self, rate: f64, momentum: f64) {
        for layer in &mut self.layers {
            for (p, g, v) in layer.slices_mut() {
                for ((p, g), v) in p.iter_mut().zip(g.iter_mut()).zip(v.iter_mut()) {
                    *v = momentum * *v - rate * *g;
                    *p += *v;
                    *g = 0.0;
                }
            }
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    /// Locates flat parameter `idx`: per layer, conv weights in
    /// `out × k × k × in` order then biases, PReLU slopes.
    fn locate(&self, mut idx: usize) -> Option<(usize, Slot)> {
        for (n, layer) in self.layers.iter().enumerate() {
            let count = layer.param_count();
            if idx < count {
                return Some(match layer {
                    Layer::Conv(c) if idx < c.num_weights() => {
                        (n, Slot::Weight(c.canonical_to_internal(idx)))
                    }
                    Layer::Conv(c) => (n, Slot::Bias(idx - c.num_weights())),
                    Layer::Prelu(_) => (n, Slot::Slope(idx)),
                });
            }
            idx -= count;
        }
        None
    }

    fn slot_value(&self, layer: usize, slot: Slot, grad: bool) -> f64 {
        match (&self.layers[layer], slot) {
            (Layer::Conv(c), Slot::Weight(i)) => {
                if grad {
                    c.grad_weights[i]
                } else {
                    c.weights[i]
                }
            }
            (Layer::Conv(c), Slot::Bias(i)) => {
                if grad {
                    c.grad_bias[i]
                } else {
                    c.bias[i]
                }
            }
            (Layer::Prelu(p), Slot::Slope(i)) => {
                if grad {
                    p.grad_slope[i]
                } else {
                    p.slope[i]
                }
            }
            _ => unreachable!("slot kind matches layer kind"),
        }
    }

    /// Flat parameter `idx` (see [`ConvNet::parameters`] for the order).
    pub fn parameter(&self, idx: usize) -> f64 {
        let (l, s) = self.locate(idx).expect("parameter index out of range");
        self.slot_value(l, s, false)
    }

    pub fn gradient(&self, idx: usize) -> f64 {
        let (l, s) = self.locate(idx).expect("parameter index out of range");
        self.slot_value(l, s, true)
    }

    pub fn set_parameter(&mut self, idx: usize, v: f64) {
        let (l, s) = self.locate(idx).expect("parameter index out of range");
        match (&mut self.layers[l], s) {
            (Layer::Conv(c), Slot::Weight(i)) => c.weights[i] = v,
            (Layer::Conv(c), Slot::Bias(i)) => c.bias[i] = v,
            (Layer::Prelu(p), Slot::Slope(i)) => p.slope[i] = v,
            _ => unreachable!("slot kind matches layer kind"),
        }
    }

    /// Human-readable name of flat parameter `idx`.
    pub fn parameter_name(&self, idx: usize) -> String {
        let (l, s) = self.locate(idx).expect("parameter index out of range");
        match (&self.layers[l], s) {
            (Layer::Conv(c), Slot::Weight(_)) => {
                let mut n = idx
                    - self.layers[..l]
                        .iter()
                        .map(Layer::param_count)
                        .sum::<usize>();
                let (k, ic) = (c.kernel, c.in_channels);
                let i = n % ic;
                n /= ic;
                let kx = n % k;
                n /= k;
                let ky = n % k;
                let o = n / k;
                format!("layer{l}.weight[{o},{ky},{kx},{i}]")
            }
            (Layer::Conv(_), Slot::Bias(i)) => format!("layer{l}.bias[{i}]"),
            (Layer::Prelu(_), Slot::Slope(i)) => format!("layer{l}.slope[{i}]"),
            _ => unreachable!("slot kind matches layer kind"),
        }
    }

    /// All parameters: per layer, conv weights (`out × k × k × in`) then
    /// biases, or PReLU slopes.
    pub fn parameters(&self) -> Vec<f64> {
        (0..self.parameter_count())
            .map(|i| self.parameter(i))
            .collect()
    }

    pub fn gradients(&self) -> Vec<f64> {
        (0..self.parameter_count())
            .map(|i| self.gradient(i))
            .collect()
    }

    pub fn set_parameters(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.parameter_count() {
            return Err(Error::ShapeMismatch(format!(
                "{} values for {} parameters",
                values.len(),
                self.parameter_count()
            )));
        }
        for (i, &v) in values.iter().enumerate() {
            self.set_parameter(i, v);
        }
        Ok(())
    }
}

/// Full-image restoration: one pass of the network, clamped to `[0, 1]`.
pub fn restore_image(net: &ConvNet, img: &ImageBuffer) -> Result<ImageBuffer> {
    Ok(net.predict(img)?.clamp01())
}

/// Loss designators over contiguous epoch spans starting at epoch 0.
#[derive(Debug, Clone, PartialEq)]
pub struct LossSchedule {
    spans: Vec<(LossKind, Range<usize>)>,
}

impl LossSchedule {
    pub fn new(spans: Vec<(LossKind, Range<usize>)>) -> Result<Self> {
        if spans.is_empty() {
            return Err(Error::InvalidArgument("loss schedule is empty".into()));
        }
        let mut next = 0;
        for (kind, r) in &spans {
            if r.start != next {
                return Err(Error::InvalidArgument(format!(
                    "schedule span for {kind} starts at epoch {} but epoch {next} is next",
                    r.start
                )));
            }
            if r.end <= r.start {
                return Err(Error::InvalidArgument(format!(
                    "schedule span for {kind} is empty"
                )));
            }
            next = r.end;
        }
        Ok(Self { spans })
    }

    pub fn constant(kind: LossKind, epochs: usize) -> Result<Self> {
        Self::new(vec![(kind, 0..epochs)])
    }

    /// `first` for epochs `0..at`, then `second` up to `epochs`.
    pub fn switching(first: LossKind, second: LossKind, at: usize, epochs: usize) -> Result<Self> {
        if at == 0 || at >= epochs {
            return Err(Error::InvalidArgument(format!(
                "switch epoch {at} must lie strictly between 0 and {epochs}"
            )));
        }
        Self::new(vec![(first, 0..at), (second, at..epochs)])
    }

    pub fn epochs(&self) -> usize {
        self.spans.last().map_or(0, |(_, r)| r.end)
    }

    pub fn spans(&self) -> &[(LossKind, Range<usize>)] {
        &self.spans
    }

    pub fn kind_at(&self, epoch: usize) -> Option<&LossKind> {
        self.spans
            .iter()
            .find(|(_, r)| r.contains(&epoch))
            .map(|(k, _)| k)
    }
}

/// 1e-3 for L1/L2, 1e-4 for the SSIM family.
pub fn default_learning_rate(kind: &LossKind) -> f64 {
    if kind.is_structural() {
        1e-4
    } else {
        1e-3
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// `None` picks [`default_learning_rate`] for the active loss.
    pub learning_rate: Option<f64>,
    pub momentum: f64,
    pub batch_size: usize,
    pub schedule: LossSchedule,
    /// Seeds the per-epoch shuffle.
    pub seed: u64,
    /// Validation metrics every this many epochs (and at the last epoch).
    pub validate_every: usize,
}

impl TrainConfig {
    pub fn new(schedule: LossSchedule) -> Self {
        Self {
            learning_rate: None,
            momentum: 0.9,
            batch_size: 4,
            schedule,
            seed: 0,
            validate_every: 1,
        }
    }

    pub fn epochs(&self) -> usize {
        self.schedule.epochs()
    }

    pub fn rate_for(&self, kind: &LossKind) -> f64 {
        self.learning_rate
            .unwrap_or_else(|| default_learning_rate(kind))
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(lr) = self.learning_rate {
            if !(lr >= 0.0 && lr.is_finite()) {
                return Err(Error::InvalidArgument(format!(
                    "learning rate must be finite and >= 0, got {lr}"
                )));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidArgument(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument(
                "batch size must be at least 1".into(),
            ));
        }
        if self.validate_every == 0 {
            return Err(Error::InvalidArgument(
                "validate_every must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss_kind: LossKind,
    /// Mean loss over the epoch's pairs, each taken before its batch update.
    pub train_loss: f64,
    /// Mean validation metrics in [`Metric::ALL`] order.
    pub validation: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainingHistory {
    pub records: Vec<EpochRecord>,
}

impl TrainingHistory {
    pub const CSV_HEADER: &'static str =
        "epoch,loss_kind,train_loss,val_l2_x1000,val_psnr,val_l1_x1000,val_ssim,val_msssim,val_gmsd";

    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::CSV_HEADER);
        s.push('\n');
        for r in &self.records {
            s.push_str(&format!("{},{},{}", r.epoch, r.loss_kind, r.train_loss));
            match &r.validation {
                Some(v) => {
                    for x in v {
                        s.push(',');
                        s.push_str(&format_float(*x));
                    }
                }
                None => s.push_str(&",".repeat(Metric::ALL.len())),
            }
            s.push('\n');
        }
        s
    }
}

fn format_float(v: f64) -> String {
    if v == f64::INFINITY {
        "inf".into()
    } else {
        format!("{v}")
    }
}

/// Mean of every metric in [`Metric::ALL`] for the restored validation inputs.
pub fn validation_metrics(net: &ConvNet, validation: &[TrainingPair]) -> Result<Vec<f64>> {
    let restored = validation
        .iter()
        .map(|p| restore_image(net, &p.input))
        .collect::<Result<Vec<_>>>()?;
    let names: Vec<String> = (0..validation.len()).map(|i| i.to_string()).collect();
    let report = evaluate_corpus(
        names
            .iter()
            .zip(&restored)
            .zip(validation)
            .map(|((n, r), p)| (n.as_str(), r, &p.target)),
        &Metric::ALL,
    )?;
    Ok(Metric::ALL
        .iter()
        .map(|&m| report.mean(m).expect("metric was computed"))
        .collect())
}

/// Trains `net` on `data` following `cfg`. See [`train_with`].
pub fn train(
    net: &mut ConvNet,
    data: &[TrainingPair],
    cfg: &TrainConfig,
    validation: Option<&[TrainingPair]>,
) -> Result<TrainingHistory> {
    train_with(net, data, cfg, validation, |_| {})
}

/// Epochs of seeded-shuffle mini-batches. Each batch averages the per-pair
/// loss gradients and takes one SGD step. `on_epoch` sees each record as it
/// is produced.
pub fn train_with(
    net: &mut ConvNet,
    data: &[TrainingPair],
    cfg: &TrainConfig,
    validation: Option<&[TrainingPair]>,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainingHistory> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    if let Some(v) = validation {
        if v.is_empty() {
            return Err(Error::InvalidArgument("validation set is empty".into()));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = TrainingHistory::default();
    let epochs = cfg.epochs();
    net.zero_grad();
    for epoch in 0..epochs {
        let kind = cfg
            .schedule
            .kind_at(epoch)
            .expect("validated schedule")
            .clone();
        let loss = LossFunction::new(kind.clone());
        let rate = cfg.rate_for(&kind);
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (batch, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let scale = 1.0 / chunk.len() as f64;
            for &i in chunk {
                let pair = &data[i];
                let out = net.forward_act(&pair.input)?;
                let non_finite = |what: String| Error::NonFiniteLoss {
                    epoch,
                    batch,
                    loss: what,
                };
                if !out.is_finite() {
                    return Err(non_finite(format!("{kind}: network output is not finite")));
                }
                let out = out.into_image()?;
                let eval = loss.evaluate(&out, &pair.target)?;
                if !eval.value.is_finite() {
                    return Err(non_finite(format!("{kind} = {}", eval.value)));
                }
                total += eval.value;
                net.backward(&eval.gradient.map(|g| g * scale))?;
            }
            net.sgd_step(rate, cfg.momentum);
        }
        let validation_row = match validation {
            Some(v) if (epoch + 1) % cfg.validate_every == 0 || epoch + 1 == epochs => {
                Some(validation_metrics(net, v)?)
            }
            _ => None,
        };
        let record = EpochRecord {
            epoch,
            loss_kind: kind,
            train_loss: total / data.len() as f64,
            validation: validation_row,
        };
        on_epoch(&record);
        history.records.push(record);
    }
    Ok(history)
}

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"IMGLNET1";
const TAG_CONV: u8 = 1;
const TAG_PRELU: u8 = 2;

pub fn encode_checkpoint(net: &ConvNet) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 8 * net.parameter_count());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(net.layers.len() as u32).to_le_bytes());
    for layer in &net.layers {
        match layer {
            Layer::Conv(c) => {
                out.push(TAG_CONV);
                for v in [c.out_channels, c.in_channels, c.kernel] {
                    out.extend_from_slice(&(v as u32).to_le_bytes());
                }
                for n in 0..c.num_weights() {
                    out.extend_from_slice(&c.weights[c.canonical_to_internal(n)].to_le_bytes());
                }
                for b in &c.bias {
                    out.extend_from_slice(&b.to_le_bytes());
                }
            }
            Layer::Prelu(p) => {
                out.push(TAG_PRELU);
                out.extend_from_slice(&(p.channels() as u32).to_le_bytes());
                for s in &p.slope {
                    out.extend_from_slice(&s.to_le_bytes());
                }
            }
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

fn ckpt_err(field: impl Into<String>, reason: impl Into<String>) -> Error {
    Error::Checkpoint {
        field: field.into(),
        reason: reason.into(),
    }
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8]> {
        let left = self.bytes.len() - self.pos;
        if n > left {
            return Err(ckpt_err(
                field,
                format!("truncated: need {n} bytes, {left} left"),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, field: &str) -> Result<u8> {
        Ok(self.take(1, field)?[0])
    }

    fn u32(&mut self, field: &str) -> Result<usize> {
        let b = self.take(4, field)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
    }

    fn f64s(&mut self, n: usize, field: &str) -> Result<Vec<f64>> {
        let bytes = n
            .checked_mul(8)
            .ok_or_else(|| ckpt_err(field, "parameter count overflows"))?;
        let b = self.take(bytes, field)?;
        let vals: Vec<f64> = b
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        if let Some(i) = vals.iter().position(|v| !v.is_finite()) {
            return Err(ckpt_err(field, format!("value {i} is not finite")));
        }
        Ok(vals)
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ConvNet> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8, "magic")? != CHECKPOINT_MAGIC {
        return Err(ckpt_err("magic", "not a network checkpoint"));
    }
    let count = r.u32("layer_count")?;
    if count == 0 {
        return Err(ckpt_err("layer_count", "zero layers"));
    }
    let mut layers = Vec::new();
    for n in 0..count {
        let field = |f: &str| format!("layer{n}.{f}");
        match r.u8(&field("tag"))? {
            TAG_CONV => {
                let out_c = r.u32(&field("out_channels"))?;
                let in_c = r.u32(&field("in_channels"))?;
                let k = r.u32(&field("kernel"))?;
                if out_c == 0 || in_c == 0 {
                    return Err(ckpt_err(field("out_channels"), "zero channels"));
                }
                if k % 2 == 0 {
                    return Err(ckpt_err(
                        field("kernel"),
                        format!("kernel size {k} is not odd"),
                    ));
                }
                let nw = out_c
                    .checked_mul(k * k)
                    .and_then(|v| v.checked_mul(in_c))
                    .ok_or_else(|| ckpt_err(field("weights"), "size overflows"))?;
                let weights = r.f64s(nw, &field("weights"))?;
                let bias = r.f64s(out_c, &field("bias"))?;
                let mut c = ConvLayer::zeros(in_c, out_c, k);
                for (n, w) in weights.into_iter().enumerate() {
                    let idx = c.canonical_to_internal(n);
                    c.weights[idx] = w;
                }
                c.bias = bias;
                layers.push(Layer::Conv(c));
            }
            TAG_PRELU => {
                let ch = r.u32(&field("channels"))?;
                if ch == 0 {
                    return Err(ckpt_err(field("channels"), "zero channels"));
                }
                let mut p = PreluLayer::new(ch);
                p.slope = r.f64s(ch, &field("slopes"))?;
                layers.push(Layer::Prelu(p));
            }
            t => return Err(ckpt_err(field("tag"), format!("unknown layer tag {t}"))),
        }
    }
    if r.pos != bytes.len() {
        return Err(ckpt_err(
            "end",
            format!("{} trailing bytes", bytes.len() - r.pos),
        ));
    }
    ConvNet::from_layers(layers).map_err(|e| ckpt_err("architecture", e.to_string()))
}

pub fn save_checkpoint(net: &ConvNet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_checkpoint(net)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ConvNet> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::seeded_uniform;

    fn random_image(h: usize, w: usize, c: usize, seed: u64) -> ImageBuffer {
        let mut u = seeded_uniform(seed);
        ImageBuffer::from_fn(h, w, c, |_, _, _| u())
    }

    /// Direct quadruple loop with clamped coordinates.
    fn naive_forward(net: &ConvNet, img: &ImageBuffer) -> Vec<f64> {
        let (h, w, _) = img.shape();
        let mut cur: Vec<f64> = img.as_slice().to_vec();
        let mut ch = img.channels();
        for layer in net.layers() {
            match layer {
                Layer::Conv(c) => {
                    let r = (c.kernel() / 2) as isize;
                    let oc = c.out_channels();
                    let mut next = vec![0.0; h * w * oc];
                    for y in 0..h {
                        for x in 0..w {
                            for o in 0..oc {
                                let mut s = c.bias()[o];
                                for ky in 0..c.kernel() {
                                    for kx in 0..c.kernel() {
                                        let yy = (y as isize + ky as isize - r)
                                            .clamp(0, h as isize - 1)
                                            as usize;
                                        let xx = (x as isize + kx as isize - r)
                                            .clamp(0, w as isize - 1)
                                            as usize;
                                        for i in 0..ch {
                                            s += c.weight(o, ky, kx, i)
                                                * cur[(yy * w + xx) * ch + i];
                                        }
                                    }
                                }
                                next[(y * w + x) * oc + o] = s;
                            }
                        }
                    }
                    cur = next;
                    ch = oc;
                }
                Layer::Prelu(p) => {
                    for (n, v) in cur.iter_mut().enumerate() {
                        if *v < 0.0 {
                            *v *= p.slope()[n % ch];
                        }
                    }
                }
            }
        }
        cur
    }

    #[test]
    fn default_architecture_shape() {
        let arch = Architecture::default_net();
        arch.validate().unwrap();
        assert_eq!(arch.receptive_field(), 17);
        assert_eq!(arch.in_channels(), 3);
        assert_eq!(arch.out_channels(), 3);
        let net = ConvNet::new(&arch, 0).unwrap();
        assert_eq!(
            net.parameter_count(),
            64 * 81 * 3 + 64 + 64 + 64 * 25 * 64 + 64 + 64 + 3 * 25 * 64 + 3
        );
        let bad = Architecture {
            layers: vec![
                LayerSpec::Conv {
                    in_channels: 3,
                    out_channels: 8,
                    kernel: 3,
                },
                LayerSpec::Prelu { channels: 4 },
            ],
        };
        assert!(bad.validate().is_err());
        let even = Architecture {
            layers: vec![LayerSpec::Conv {
                in_channels: 3,
                out_channels: 3,
                kernel: 4,
            }],
        };
        assert!(ConvNet::new(&even, 0).is_err());
    }

    #[test]
    fn zero_and_identity_nets() {
        let img = random_image(7, 6, 3, 1);
        let mut zero = ConvNet::new(&Architecture::toy(3, 4), 2).unwrap();
        let zeros = vec![0.0; zero.parameter_count()];
        zero.set_parameters(&zeros).unwrap();
        assert!(zero
            .predict(&img)
            .unwrap()
            .as_slice()
            .iter()
            .all(|&v| v == 0.0));
        assert_eq!(ConvNet::identity(3).predict(&img).unwrap(), img);
        assert!(ConvNet::identity(1).predict(&img).is_err());
    }

    #[test]
    fn forward_matches_naive_convolution() {
        let net = ConvNet::new(&Architecture::default_net(), 5).unwrap();
        let img = random_image(13, 11, 3, 6);
        let fast = net.predict(&img).unwrap();
        let slow = naive_forward(&net, &img);
        for (a, b) in fast.as_slice().iter().zip(&slow) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }

    fn loss_of(net: &ConvNet, x: &ImageBuffer, y: &ImageBuffer, loss: &LossFunction) -> f64 {
        loss.value(&net.predict(x).unwrap(), y).unwrap()
    }

    #[test]
    fn toy_net_parameter_gradients_match_finite_differences() {
        let x = random_image(5, 5, 3, 10);
        let y = random_image(5, 5, 3, 11);
        let loss = LossFunction::new(LossKind::L2);
        let mut net = ConvNet::new(&Architecture::toy(3, 4), 12).unwrap();
        // keep some pre-activations negative so slopes receive gradient
        for layer in net.layers_mut() {
            if let Layer::Conv(c) = layer {
                c.bias_mut()
                    .iter_mut()
                    .enumerate()
                    .for_each(|(i, b)| *b = 0.1 * i as f64 - 0.15);
            }
        }
        let out = net.forward(&x).unwrap();
        let e = loss.evaluate(&out, &y).unwrap();
        let gin = net.backward(&e.gradient).unwrap();
        let eps = 1e-6;
        for idx in 0..net.parameter_count() {
            let orig = net.parameter(idx);
            let mut probe = net.clone();
            probe.set_parameter(idx, orig + eps);
            let plus = loss_of(&probe, &x, &y, &loss);
            probe.set_parameter(idx, orig - eps);
            let minus = loss_of(&probe, &x, &y, &loss);
            let fd = (plus - minus) / (2.0 * eps);
            let err = crate::loss::relative_error(net.gradient(idx), fd);
            assert!(
                err < 1e-4,
                "{}: analytic {} fd {fd}",
                net.parameter_name(idx),
                net.gradient(idx)
            );
        }
        // input gradient too
        let fd =
            crate::loss::finite_diff_gradient_fn(|p| loss_of(&net, p, &y, &loss), &x, eps).unwrap();
        for (a, n) in gin.as_slice().iter().zip(fd.as_slice()) {
            assert!(crate::loss::relative_error(*a, *n) < 1e-4);
        }
    }

    #[test]
    fn zero_loss_gradient_gives_zero_parameter_gradients() {
        let x = random_image(6, 6, 3, 1);
        let mut net = ConvNet::new(&Architecture::toy(3, 4), 3).unwrap();
        net.forward(&x).unwrap();
        net.backward(&ImageBuffer::zeros(6, 6, 3)).unwrap();
        assert!(net.gradients().iter().all(|&g| g == 0.0));
        assert!(matches!(
            net.backward(&ImageBuffer::zeros(6, 6, 3)),
            Err(Error::NoForwardCache)
        ));
        net.forward(&x).unwrap();
        assert!(matches!(
            net.backward(&ImageBuffer::zeros(5, 6, 3)),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn prelu_slope_gradient_on_negative_branch() {
        let mut conv = ConvLayer::zeros(2, 2, 1);
        conv.set_weight(0, 0, 0, 0, 1.0);
        conv.set_weight(1, 0, 0, 1, 1.0);
        let mut net = ConvNet::from_layers(vec![
            Layer::Conv(conv),
            Layer::Prelu(PreluLayer::with_slope(2, 0.3)),
        ])
        .unwrap();
        let mut u = seeded_uniform(4);
        let x = ImageBuffer::from_fn(3, 4, 2, |_, _, _| -0.1 - u());
        let g = ImageBuffer::from_fn(3, 4, 2, |r, c, k| 0.01 * (r * 8 + c * 2 + k) as f64 - 0.1);
        net.forward(&x).unwrap();
        net.backward(&g).unwrap();
        let Layer::Prelu(p) = &net.layers()[1] else {
            unreachable!()
        };
        for ch in 0..2 {
            let expect: f64 = (0..3)
                .flat_map(|r| (0..4).map(move |c| (r, c)))
                .map(|(r, c)| x.get(r, c, ch) * g.get(r, c, ch))
                .sum();
            assert!((p.slope_grad()[ch] - expect).abs() < 1e-14);
        }
    }

    #[test]
    fn sgd_plain_momentum_and_zero_gradient() {
        let mut net = ConvNet::identity(1);
        let p0 = net.parameter(0);
        // zero gradients: nothing moves
        net.sgd_step(0.1, 0.9);
        assert_eq!(net.parameter(0), p0);

        // plain step
        if let Layer::Conv(c) = &mut net.layers_mut()[0] {
            c.grad_weights[0] = 0.5;
        }
        net.sgd_step(0.1, 0.0);
        assert_eq!(net.parameter(0), p0 - 0.1 * 0.5);
        assert_eq!(net.gradient(0), 0.0);

        // f(p) = (p - t)^2 / 2 for two momentum steps
        let mut net = ConvNet::identity(1);
        let (t, lr, m) = (0.2, 0.1, 0.9);
        let mut p = 1.0;
        let mut v = 0.0;
        for _ in 0..2 {
            let g = net.parameter(0) - t;
            if let Layer::Conv(c) = &mut net.layers_mut()[0] {
                c.grad_weights[0] = g;
            }
            net.sgd_step(lr, m);
            v = m * v - lr * (p - t);
            p += v;
        }
        // hand-iterated: p1 = 1 - 0.1*0.8 = 0.92, v1 = -0.08;
        // v2 = 0.9*(-0.08) - 0.1*0.72 = -0.144, p2 = 0.776
        assert!((net.parameter(0) - 0.776).abs() < 1e-15);
        assert!((p - 0.776).abs() < 1e-15);
    }

    fn toy_pairs(n: usize, size: usize, seed: u64) -> Vec<TrainingPair> {
        (0..n as u64)
            .map(|i| {
                let target = crate::pipeline::synthetic::scene(size, size, seed + i);
                let input =
                    crate::pipeline::apply_noise(&target, 0.005, 0.0001, seed + 100 + i).unwrap();
                TrainingPair { input, target }
            })
            .collect()
    }

    #[test]
    fn zero_rate_freezes_training() {
        let data = toy_pairs(3, 9, 1);
        let mut net = ConvNet::new(&Architecture::toy(3, 4), 1).unwrap();
        let before = net.parameters();
        let mut cfg = TrainConfig::new(LossSchedule::constant(LossKind::L2, 3).unwrap());
        cfg.learning_rate = Some(0.0);
        let h = train(&mut net, &data, &cfg, None).unwrap();
        assert_eq!(net.parameters(), before);
        assert_eq!(h.records[0].train_loss, h.records[2].train_loss);
    }

    #[test]
    fn toy_training_reduces_loss_and_is_deterministic() {
        let data = toy_pairs(10, 12, 2);
        let mut cfg = TrainConfig::new(LossSchedule::constant(LossKind::L2, 50).unwrap());
        cfg.learning_rate = Some(0.01);
        cfg.seed = 9;
        let run = || {
            let mut net = ConvNet::new(&Architecture::toy(3, 4), 3).unwrap();
            let h = train(&mut net, &data, &cfg, Some(&data[..2])).unwrap();
            (h, encode_checkpoint(&net))
        };
        let (h1, c1) = run();
        let (h2, c2) = run();
        assert_eq!(h1.to_csv(), h2.to_csv());
        assert_eq!(c1, c2);
        assert_eq!(h1.records.len(), 50);
        assert!(h1.records[49].train_loss < h1.records[0].train_loss);
        assert!(h1
            .records
            .iter()
            .all(|r| r.validation.as_ref().is_some_and(|v| v.len() == 6)));
    }

    #[test]
    fn schedule_bookkeeping() {
        let s = LossSchedule::switching(LossKind::L1, LossKind::L2, 50, 100).unwrap();
        assert_eq!(s.kind_at(49), Some(&LossKind::L1));
        assert_eq!(s.kind_at(50), Some(&LossKind::L2));
        assert_eq!(s.kind_at(100), None);
        assert!(LossSchedule::new(vec![(LossKind::L1, 0..5), (LossKind::L2, 6..9)]).is_err());
        assert!(LossSchedule::new(vec![(LossKind::L1, 1..5)]).is_err());
        assert!(LossSchedule::switching(LossKind::L1, LossKind::L2, 0, 10).is_err());

        let data = toy_pairs(2, 12, 3);
        let mut cfg =
            TrainConfig::new(LossSchedule::switching(LossKind::L1, LossKind::L2, 2, 4).unwrap());
        cfg.validate_every = 3;
        let mut net = ConvNet::new(&Architecture::toy(3, 2), 0).unwrap();
        let h = train(&mut net, &data, &cfg, Some(&data)).unwrap();
        let kinds: Vec<String> = h.records.iter().map(|r| r.loss_kind.to_string()).collect();
        assert_eq!(kinds, ["l1", "l1", "l2", "l2"]);
        let validated: Vec<bool> = h.records.iter().map(|r| r.validation.is_some()).collect();
        assert_eq!(validated, [false, false, true, true]);
        let csv = h.to_csv();
        assert!(csv.starts_with(TrainingHistory::CSV_HEADER));
        assert_eq!(csv.lines().nth(1).unwrap().split(',').count(), 9);
    }

    #[test]
    fn divergence_aborts_with_diagnostic() {
        let data = toy_pairs(2, 6, 4);
        let mut cfg = TrainConfig::new(LossSchedule::constant(LossKind::L2, 50).unwrap());
        cfg.learning_rate = Some(1e6);
        let mut net = ConvNet::new(&Architecture::toy(3, 4), 0).unwrap();
        match train(&mut net, &data, &cfg, None) {
            Err(Error::NonFiniteLoss { loss, .. }) => assert!(loss.contains("l2")),
            other => panic!("expected NonFiniteLoss, got {other:?}"),
        }
    }

    #[test]
    fn restore_translation_and_patchwise_consistency() {
        let net = ConvNet::new(&Architecture::default_net(), 7).unwrap();
        let img = random_image(52, 50, 3, 8);
        let full = restore_image(&net, &img).unwrap();
        assert!(full.as_slice().iter().all(|&v| (0.0..=1.0).contains(&v)));

        let shifted = img.crop(3, 5, 49, 45).unwrap();
        let restored_shifted = restore_image(&net, &shifted).unwrap();
        let margin = 8;
        for r in margin..49 - margin {
            for c in margin..45 - margin {
                for k in 0..3 {
                    assert!(
                        (restored_shifted.get(r, c, k) - full.get(r + 3, c + 5, k)).abs() < 1e-10
                    );
                }
            }
        }

        for (r0, c0) in [(0, 0), (10, 19), (21, 12)] {
            let patch = img.crop(r0, c0, 31, 31).unwrap();
            let out = restore_image(&net, &patch).unwrap();
            for k in 0..3 {
                assert!((out.get(15, 15, k) - full.get(r0 + 15, c0 + 15, k)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn checkpoint_round_trip_and_errors() {
        let net = ConvNet::new(&Architecture::toy(3, 5), 11).unwrap();
        let bytes = encode_checkpoint(&net);
        let back = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back.parameters(), net.parameters());
        assert_eq!(back.architecture(), net.architecture());

        // canonical weight order on disk
        let Layer::Conv(c) = &net.layers()[0] else {
            unreachable!()
        };
        let first = f64::from_le_bytes(
            bytes[8 + 4 + 1 + 12..8 + 4 + 1 + 12 + 8]
                .try_into()
                .unwrap(),
        );
        assert_eq!(first, c.weight(0, 0, 0, 0));
        let second = f64::from_le_bytes(
            bytes[8 + 4 + 1 + 12 + 8..8 + 4 + 1 + 12 + 16]
                .try_into()
                .unwrap(),
        );
        assert_eq!(second, c.weight(0, 0, 0, 1));

        let field_of = |b: &[u8]| match decode_checkpoint(b) {
            Err(Error::Checkpoint { field, .. }) => field,
            other => panic!("expected checkpoint error, got {other:?}"),
        };
        assert_eq!(field_of(b"NOTANET!\x01\0\0\0"), "magic");
        assert_eq!(field_of(&bytes[..bytes.len() - 3]), "layer2.bias");
        let mut extra = bytes.clone();
        extra.push(0);
        assert_eq!(field_of(&extra), "end");
        let mut bad_tag = bytes.clone();
        bad_tag[12] = 9;
        assert_eq!(field_of(&bad_tag), "layer0.tag");
        let mut nan = bytes.clone();
        nan[25..33].copy_from_slice(&f64::NAN.to_le_bytes());
        assert_eq!(field_of(&nan), "layer0.weights");
        let mut mismatch = bytes.clone();
        // layer 1 (prelu) channel count
        let prelu_at = 13 + 12 + 8 * (5 * 9 * 3 + 5);
        assert_eq!(mismatch[prelu_at], TAG_PRELU);
        mismatch[prelu_at + 1] = 4;
        assert!(decode_checkpoint(&mismatch).is_err());
    }
}
