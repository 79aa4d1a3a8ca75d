//! Clean → corrupted data generation for the restoration tasks.
//!
//! - denoise + demosaick: signal-dependent noise, Bayer sampling, bilinear
//!   demosaicking back to RGB
//! - super-resolution: box downsampling followed by bilinear upsampling
//! - external pairs: corrupted/clean images produced elsewhere (e.g. JPEG)
//!
//! Every random draw comes from a ChaCha generator seeded by the
//! [`CorruptionSpec`], so the same images and spec always produce the same
//! bits.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};

use crate::error::{Error, Result};
use crate::image::{ImageBuffer, PatchGrid};

pub mod synthetic;

/// 2×2 colour filter array layout, named by its top-left row-major sites.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BayerPattern {
    #[default]
    Rggb,
    Bggr,
    Grbg,
    Gbrg,
}

impl BayerPattern {
    /// Colour channel (0 = R, 1 = G, 2 = B) sampled at `(row, col)`.
    #[inline]
    pub fn channel_at(self, row: usize, col: usize) -> usize {
        let cell = match self {
            BayerPattern::Rggb => [0, 1, 1, 2],
            BayerPattern::Bggr => [2, 1, 1, 0],
            BayerPattern::Grbg => [1, 0, 2, 1],
            BayerPattern::Gbrg => [1, 2, 0, 1],
        };
        cell[(row % 2) * 2 + col % 2]
    }
}

impl FromStr for BayerPattern {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "rggb" => Ok(Self::Rggb),
            "bggr" => Ok(Self::Bggr),
            "grbg" => Ok(Self::Grbg),
            "gbrg" => Ok(Self::Gbrg),
            _ => Err(Error::InvalidArgument(format!(
                "unknown Bayer pattern {s:?}"
            ))),
        }
    }
}

impl fmt::Display for BayerPattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Self::Rggb => "rggb",
            Self::Bggr => "bggr",
            Self::Grbg => "grbg",
            Self::Gbrg => "gbrg",
        };
        f.write_str(s)
    }
}

/// How the signal-dependent noise is drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NoiseModel {
    /// `y + sqrt(a·y + b)·n`, `n ~ N(0, 1)`.
    #[default]
    Gaussian,
    /// `a·Poisson(y / a) + sqrt(b)·n`.
    Poisson,
}

/// Signal-dependent noise with variance `a·y + b`, clipped to `[0, 1]`.
pub fn apply_noise(img: &ImageBuffer, a: f64, b: f64, seed: u64) -> Result<ImageBuffer> {
    apply_noise_with(img, a, b, seed, NoiseModel::Gaussian)
}

pub fn apply_noise_with(
    img: &ImageBuffer,
    a: f64,
    b: f64,
    seed: u64,
    model: NoiseModel,
) -> Result<ImageBuffer> {
    if !(a >= 0.0 && b >= 0.0) || !a.is_finite() || !b.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "noise coefficients must be non-negative, got a={a}, b={b}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let out = match model {
        NoiseModel::Gaussian => img.map(|y| {
            let n: f64 = rng_normal(&mut rng);
            (y + (a * y + b).max(0.0).sqrt() * n).clamp(0.0, 1.0)
        }),
        NoiseModel::Poisson => {
            let sb = b.sqrt();
            let mut data = Vec::with_capacity(img.len());
            for &y in img.as_slice() {
                let shot = if a > 0.0 && y > 0.0 {
                    let p =
                        Poisson::new(y / a).map_err(|e| Error::InvalidArgument(e.to_string()))?;
                    a * p.sample(&mut rng)
                } else {
                    y
                };
                let n: f64 = rng_normal(&mut rng);
                data.push((shot + sb * n).clamp(0.0, 1.0));
            }
            let (h, w, c) = img.shape();
            ImageBuffer::from_vec(h, w, c, data)?
        }
    };
    Ok(out)
}

fn rng_normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Samples one colour per pixel according to `pattern`.
pub fn mosaic_bayer(img: &ImageBuffer, pattern: BayerPattern) -> Result<ImageBuffer> {
    if img.channels() != 3 {
        return Err(Error::InvalidArgument(format!(
            "Bayer mosaicking needs 3 channels, image has {}",
            img.channels()
        )));
    }
    check_even(img)?;
    Ok(ImageBuffer::from_fn(
        img.height(),
        img.width(),
        1,
        |r, c, _| img.get(r, c, pattern.channel_at(r, c)),
    ))
}

fn check_even(img: &ImageBuffer) -> Result<()> {
    if !img.height().is_multiple_of(2) || !img.width().is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!(
            "Bayer data needs even dimensions, got {}x{}",
            img.height(),
            img.width()
        )));
    }
    Ok(())
}

/// Mirror coordinate without repeating the edge sample (`-1 → 1`,
/// `n → n-2`), which keeps the Bayer phase.
#[inline]
fn mirror(i: isize, n: usize) -> usize {
    let n = n as isize;
    let m = if i < 0 {
        -i
    } else if i >= n {
        2 * (n - 1) - i
    } else {
        i
    };
    m as usize
}

/// Bilinear demosaicking: each missing colour is the mean of its nearest
/// same-colour neighbours (2 or 4), mirrored across the border.
pub fn demosaic_bilinear(mosaic: &ImageBuffer, pattern: BayerPattern) -> Result<ImageBuffer> {
    if mosaic.channels() != 1 {
        return Err(Error::InvalidArgument(format!(
            "demosaicking needs a 1-channel mosaic, got {} channels",
            mosaic.channels()
        )));
    }
    check_even(mosaic)?;
    let (h, w) = (mosaic.height(), mosaic.width());
    const ORTHO: [(isize, isize); 4] = [(-1, 0), (1, 0), (0, -1), (0, 1)];
    const DIAG: [(isize, isize); 4] = [(-1, -1), (-1, 1), (1, -1), (1, 1)];
    Ok(ImageBuffer::from_fn(h, w, 3, |r, c, k| {
        if pattern.channel_at(r, c) == k {
            return mosaic.get(r, c, 0);
        }
        let average = |offsets: &[(isize, isize)]| {
            let mut sum = 0.0;
            let mut n = 0;
            for &(dr, dc) in offsets {
                let rr = mirror(r as isize + dr, h);
                let cc = mirror(c as isize + dc, w);
                if pattern.channel_at(rr, cc) == k {
                    sum += mosaic.get(rr, cc, 0);
                    n += 1;
                }
            }
            (n > 0).then(|| sum / n as f64)
        };
        average(&ORTHO)
            .or_else(|| average(&DIAG))
            .expect("every Bayer site has same-colour neighbours")
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResampleDirection {
    Down,
    Up,
}

/// `Down`: mean of `scale`×`scale` blocks. `Up`: bilinear interpolation with
/// pixel-centre alignment (output pixel `i` samples input coordinate
/// `(i + 0.5) / scale - 0.5`, clamped to the image).
pub fn resample_bilinear(
    img: &ImageBuffer,
    scale: usize,
    direction: ResampleDirection,
) -> Result<ImageBuffer> {
    if scale < 2 {
        return Err(Error::InvalidArgument(format!(
            "scale must be at least 2, got {scale}"
        )));
    }
    let (h, w, ch) = img.shape();
    match direction {
        ResampleDirection::Down => {
            if h % scale != 0 || w % scale != 0 {
                return Err(Error::InvalidArgument(format!(
                    "{h}x{w} image is not divisible by scale {scale}"
                )));
            }
            let norm = (scale * scale) as f64;
            Ok(ImageBuffer::from_fn(h / scale, w / scale, ch, |r, c, k| {
                let mut s = 0.0;
                for dr in 0..scale {
                    for dc in 0..scale {
                        s += img.get(r * scale + dr, c * scale + dc, k);
                    }
                }
                s / norm
            }))
        }
        ResampleDirection::Up => {
            let coord = |i: usize, n: usize| {
                let u = ((i as f64 + 0.5) / scale as f64 - 0.5).clamp(0.0, (n - 1) as f64);
                let i0 = u.floor() as usize;
                let i1 = (i0 + 1).min(n - 1);
                (i0, i1, u - i0 as f64)
            };
            Ok(ImageBuffer::from_fn(h * scale, w * scale, ch, |r, c, k| {
                let (r0, r1, fr) = coord(r, h);
                let (c0, c1, fc) = coord(c, w);
                let top = img.get(r0, c0, k) * (1.0 - fc) + img.get(r0, c1, k) * fc;
                let bottom = img.get(r1, c0, k) * (1.0 - fc) + img.get(r1, c1, k) * fc;
                top * (1.0 - fr) + bottom * fr
            }))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorruptionKind {
    NoiseBayer,
    SuperRes,
    ExternalPairs,
}

impl FromStr for CorruptionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "noise_bayer" | "denoise_demosaick" => Ok(Self::NoiseBayer),
            "superres" | "super_resolution" => Ok(Self::SuperRes),
            "external_pairs" | "external" => Ok(Self::ExternalPairs),
            _ => Err(Error::InvalidArgument(format!("unknown task {s:?}"))),
        }
    }
}

impl fmt::Display for CorruptionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::NoiseBayer => "denoise_demosaick",
            Self::SuperRes => "superres",
            Self::ExternalPairs => "external_pairs",
        })
    }
}

/// Parameters of a corruption process.
#[derive(Debug, Clone, PartialEq)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    pub a: f64,
    pub b: f64,
    pub pattern: BayerPattern,
    pub scale: usize,
    pub seed: u64,
    pub noise_model: NoiseModel,
}

impl Default for CorruptionSpec {
    fn default() -> Self {
        Self {
            kind: CorruptionKind::NoiseBayer,
            a: 0.005,
            b: 0.0001,
            pattern: BayerPattern::Rggb,
            scale: 2,
            seed: 0,
            noise_model: NoiseModel::Gaussian,
        }
    }
}

impl CorruptionSpec {
    pub fn validate(&self) -> Result<()> {
        match self.kind {
            CorruptionKind::NoiseBayer => {
                if !(self.a >= 0.0 && self.b >= 0.0) {
                    return Err(Error::InvalidArgument(format!(
                        "noise coefficients must be non-negative, got a={}, b={}",
                        self.a, self.b
                    )));
                }
            }
            CorruptionKind::SuperRes => {
                if self.scale < 2 {
                    return Err(Error::InvalidArgument(format!(
                        "super-resolution scale must be at least 2, got {}",
                        self.scale
                    )));
                }
            }
            CorruptionKind::ExternalPairs => {}
        }
        Ok(())
    }

    /// Seed for the `index`-th image of a batch.
    pub fn image_seed(&self, index: usize) -> u64 {
        self.seed ^ index as u64
    }
}

/// Intermediate products of corrupting one clean image.
#[derive(Debug, Clone, PartialEq)]
pub struct Corrupted {
    /// Clean image cropped to the dimensions the task supports.
    pub clean: ImageBuffer,
    /// Noisy RGB before mosaicking (noise task only).
    pub noisy: Option<ImageBuffer>,
    /// Network-input image, same size as `clean`.
    pub input: ImageBuffer,
}

/// Corrupts the `index`-th clean image. The clean image is cropped at the
/// bottom/right to a multiple of 2 (Bayer) or of `scale` (super-resolution).
pub fn corrupt(clean: &ImageBuffer, spec: &CorruptionSpec, index: usize) -> Result<Corrupted> {
    spec.validate()?;
    match spec.kind {
        CorruptionKind::NoiseBayer => {
            if clean.channels() != 3 {
                return Err(Error::InvalidArgument(format!(
                    "denoise+demosaick needs RGB images, got {} channels",
                    clean.channels()
                )));
            }
            let clean = crop_to_multiple(clean, 2)?;
            let noisy = apply_noise_with(
                &clean,
                spec.a,
                spec.b,
                spec.image_seed(index),
                spec.noise_model,
            )?;
            let input = demosaic_bilinear(&mosaic_bayer(&noisy, spec.pattern)?, spec.pattern)?;
            Ok(Corrupted {
                clean,
                noisy: Some(noisy),
                input,
            })
        }
        CorruptionKind::SuperRes => {
            let clean = crop_to_multiple(clean, spec.scale)?;
            let low = resample_bilinear(&clean, spec.scale, ResampleDirection::Down)?;
            let input = resample_bilinear(&low, spec.scale, ResampleDirection::Up)?;
            Ok(Corrupted {
                clean,
                noisy: None,
                input,
            })
        }
        CorruptionKind::ExternalPairs => Err(Error::InvalidArgument(
            "external pairs are corrupted outside this tool; use make_pair_dataset".into(),
        )),
    }
}

fn crop_to_multiple(img: &ImageBuffer, m: usize) -> Result<ImageBuffer> {
    let h = img.height() / m * m;
    let w = img.width() / m * m;
    if h == img.height() && w == img.width() {
        return Ok(img.clone());
    }
    img.crop(0, 0, h, w)
}

/// Aligned corrupted/clean patches.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPair {
    pub input: ImageBuffer,
    pub target: ImageBuffer,
}

/// Corrupts every clean image per `spec` and cuts aligned patch pairs on the
/// stride grid. Pairs are ordered by image, then row-major patch origin.
pub fn make_dataset(
    cleans: &[ImageBuffer],
    spec: &CorruptionSpec,
    patch: usize,
    stride: usize,
) -> Result<Vec<TrainingPair>> {
    let mut out = Vec::new();
    for (i, clean) in cleans.iter().enumerate() {
        let c = corrupt(clean, spec, i)?;
        out.extend(pair_patches(&c.input, &c.clean, patch, stride)?);
    }
    Ok(out)
}

/// Patch pairs from already-corrupted `(input, target)` images.
pub fn make_pair_dataset(
    pairs: &[(ImageBuffer, ImageBuffer)],
    patch: usize,
    stride: usize,
) -> Result<Vec<TrainingPair>> {
    let mut out = Vec::new();
    for (i, (input, target)) in pairs.iter().enumerate() {
        input.check_same_shape(target).map_err(|e| match e {
            Error::ShapeMismatch(m) => Error::ShapeMismatch(format!("pair {i}: {m}")),
            other => other,
        })?;
        out.extend(pair_patches(input, target, patch, stride)?);
    }
    Ok(out)
}

fn pair_patches(
    input: &ImageBuffer,
    target: &ImageBuffer,
    patch: usize,
    stride: usize,
) -> Result<Vec<TrainingPair>> {
    let grid = PatchGrid::new(input.height(), input.width(), patch, stride)?;
    let inputs = grid.extract(input)?;
    let targets = grid.extract(target)?;
    Ok(inputs
        .into_iter()
        .zip(targets)
        .map(|(input, target)| TrainingPair { input, target })
        .collect())
}

/// One manifest line: `input_path<TAB>target_path`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub input: PathBuf,
    pub target: PathBuf,
}

/// Reads a manifest; blank lines and `#` comments are skipped. Relative
/// paths are resolved against the manifest's directory.
pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or_else(|| Path::new(""));
    parse_manifest(&text, base)
}

pub fn parse_manifest(text: &str, base: &Path) -> Result<Vec<ManifestEntry>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.trim_start().starts_with('#') {
            continue;
        }
        let (input, target) = line.split_once('\t').ok_or_else(|| {
            Error::Format(format!("manifest line {} has no TAB separator", n + 1))
        })?;
        if target.contains('\t') {
            return Err(Error::Format(format!(
                "manifest line {} has more than two fields",
                n + 1
            )));
        }
        out.push(ManifestEntry {
            input: base.join(input),
            target: base.join(target),
        });
    }
    Ok(out)
}

pub fn format_manifest(entries: &[ManifestEntry]) -> String {
    entries
        .iter()
        .map(|e| format!("{}\t{}\n", e.input.display(), e.target.display()))
        .collect()
}

/// Uniform draws in `[0, 1)` from a seeded generator; shared by tests and
/// synthetic data.
pub fn seeded_uniform(seed: u64) -> impl FnMut() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    move || rng.random::<f64>()
}
