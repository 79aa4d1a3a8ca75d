//! Full-reference image quality indices and corpus reports.
//!
//! SSIM-family indices are averaged over the valid region only (pixels at
//! least one kernel radius from the border), so no padding enters a score.
//! Colour images are scored per channel and the channel scores averaged.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::filter::{filter_separable, Border, GaussianKernel};
use crate::image::ImageBuffer;
use crate::loss::SsimConstants;

/// Window width used by the SSIM-family metrics.
pub const METRIC_SSIM_SIGMA: f64 = 1.5;
/// Pyramid depth used by corpus reports (clamped to what an image allows).
pub const METRIC_MSSSIM_LEVELS: usize = 5;
/// GMSD stabilizer for unit-range images (170 / 255²).
pub const GMSD_C: f64 = 0.0026;

fn mse(x: &ImageBuffer, y: &ImageBuffer) -> Result<f64> {
    x.check_same_shape(y)?;
    let sum: f64 = x
        .as_slice()
        .iter()
        .zip(y.as_slice())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(sum / x.len() as f64)
}

fn mae(x: &ImageBuffer, y: &ImageBuffer) -> Result<f64> {
    x.check_same_shape(y)?;
    let sum: f64 = x
        .as_slice()
        .iter()
        .zip(y.as_slice())
        .map(|(a, b)| (a - b).abs())
        .sum();
    Ok(sum / x.len() as f64)
}

/// Peak signal-to-noise ratio in dB for unit-range images. Identical images
/// give `f64::INFINITY`.
pub fn psnr(x: &ImageBuffer, y: &ImageBuffer) -> Result<f64> {
    let e = mse(x, y)?;
    if e == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / e).log10())
}

/// Per-pixel SSIM terms of one channel, evaluated everywhere.
struct SsimMaps {
    l: Vec<f64>,
    cs: Vec<f64>,
}

fn ssim_maps(
    x: &ImageBuffer,
    y: &ImageBuffer,
    k: &GaussianKernel,
    c: SsimConstants,
    border: Border,
) -> SsimMaps {
    let (h, w, _) = x.shape();
    let xx = x.zip_map(x, |a, b| a * b).expect("same shape");
    let yy = y.zip_map(y, |a, b| a * b).expect("same shape");
    let xy = x.zip_map(y, |a, b| a * b).expect("same shape");
    let f = |img: &ImageBuffer| filter_separable(img, k, border).into_vec();
    let (mx, my, sxx, syy, sxy) = (f(x), f(y), f(&xx), f(&yy), f(&xy));
    let mut l = Vec::with_capacity(h * w);
    let mut cs = Vec::with_capacity(h * w);
    for i in 0..h * w {
        let (a, b) = (mx[i], my[i]);
        let var_x = sxx[i] - a * a;
        let var_y = syy[i] - b * b;
        let cov = sxy[i] - a * b;
        l.push((2.0 * a * b + c.c1) / (a * a + b * b + c.c1));
        cs.push((2.0 * cov + c.c2) / (var_x + var_y + c.c2));
    }
    SsimMaps { l, cs }
}

fn valid_mean(map: &[f64], h: usize, w: usize, r: usize) -> f64 {
    let mut sum = 0.0;
    for row in r..h - r {
        sum += map[row * w + r..row * w + w - r].iter().sum::<f64>();
    }
    sum / ((h - 2 * r) * (w - 2 * r)) as f64
}

fn check_window_fits(h: usize, w: usize, k: &GaussianKernel) -> Result<()> {
    if h < k.size() || w < k.size() {
        return Err(Error::InvalidArgument(format!(
            "{h}x{w} image is smaller than the {0}x{0} SSIM window",
            k.size()
        )));
    }
    Ok(())
}

/// Mean SSIM over valid pixels and channels.
pub fn ssim_index(x: &ImageBuffer, y: &ImageBuffer, sigma: f64) -> Result<f64> {
    ssim_index_with(x, y, sigma, SsimConstants::default())
}

pub fn ssim_index_with(
    x: &ImageBuffer,
    y: &ImageBuffer,
    sigma: f64,
    c: SsimConstants,
) -> Result<f64> {
    x.check_same_shape(y)?;
    let k = GaussianKernel::new(sigma)?;
    let (h, w, channels) = x.shape();
    check_window_fits(h, w, &k)?;
    let mut total = 0.0;
    for ch in 0..channels {
        let maps = ssim_maps(&x.channel(ch), &y.channel(ch), &k, c, Border::Replicate);
        let ssim: Vec<f64> = maps.l.iter().zip(&maps.cs).map(|(a, b)| a * b).collect();
        total += valid_mean(&ssim, h, w, k.radius());
    }
    Ok(total / channels as f64)
}

/// Per-pixel, per-channel SSIM over the whole image. Windows are clipped at
/// the border and renormalised, matching the loss windows.
pub fn ssim_map(
    x: &ImageBuffer,
    y: &ImageBuffer,
    sigma: f64,
    c: SsimConstants,
) -> Result<ImageBuffer> {
    x.check_same_shape(y)?;
    let k = GaussianKernel::new(sigma)?;
    let (h, w, channels) = x.shape();
    let mut out = ImageBuffer::zeros(h, w, channels);
    for ch in 0..channels {
        let maps = ssim_maps(&x.channel(ch), &y.channel(ch), &k, c, Border::Renormalize);
        for (i, (l, cs)) in maps.l.iter().zip(&maps.cs).enumerate() {
            out.set(i / w, i % w, ch, l * cs);
        }
    }
    Ok(out)
}

/// 2×2 average pooling; an odd trailing row or column is dropped.
pub fn downsample2(img: &ImageBuffer) -> Result<ImageBuffer> {
    let (h, w, ch) = img.shape();
    if h < 2 || w < 2 {
        return Err(Error::InvalidArgument(format!(
            "cannot halve a {h}x{w} image"
        )));
    }
    let (nh, nw) = (h / 2, w / 2);
    Ok(ImageBuffer::from_fn(nh, nw, ch, |r, c, k| {
        0.25 * (img.get(2 * r, 2 * c, k)
            + img.get(2 * r, 2 * c + 1, k)
            + img.get(2 * r + 1, 2 * c, k)
            + img.get(2 * r + 1, 2 * c + 1, k))
    }))
}

/// Largest pyramid depth (at most `wanted`) whose coarsest level still fits
/// the SSIM window.
pub fn feasible_levels(height: usize, width: usize, sigma: f64, wanted: usize) -> usize {
    let size = GaussianKernel::new(sigma)
        .map(|k| k.size())
        .unwrap_or(usize::MAX);
    let (mut h, mut w) = (height, width);
    let mut levels = 0;
    while levels < wanted && h >= size && w >= size {
        levels += 1;
        h /= 2;
        w /= 2;
    }
    levels
}

/// Dyadic-pyramid MS-SSIM with unit exponents: the mean `cs` of every level
/// but the coarsest, times the mean SSIM of the coarsest level.
pub fn msssim_index(x: &ImageBuffer, y: &ImageBuffer, levels: usize) -> Result<f64> {
    msssim_index_with(x, y, levels, METRIC_SSIM_SIGMA, SsimConstants::default())
}

pub fn msssim_index_with(
    x: &ImageBuffer,
    y: &ImageBuffer,
    levels: usize,
    sigma: f64,
    c: SsimConstants,
) -> Result<f64> {
    x.check_same_shape(y)?;
    if levels == 0 {
        return Err(Error::InvalidArgument(
            "MS-SSIM needs at least one level".into(),
        ));
    }
    let k = GaussianKernel::new(sigma)?;
    let (h, w, channels) = x.shape();
    if feasible_levels(h, w, sigma, levels) < levels {
        return Err(Error::InvalidArgument(format!(
            "{h}x{w} image too small for {levels} MS-SSIM levels with a {0}x{0} window",
            k.size()
        )));
    }
    let mut total = 0.0;
    for ch in 0..channels {
        let mut xs = x.channel(ch);
        let mut ys = y.channel(ch);
        let mut product = 1.0;
        for level in 0..levels {
            let maps = ssim_maps(&xs, &ys, &k, c, Border::Replicate);
            let (lh, lw) = (xs.height(), xs.width());
            if level + 1 < levels {
                product *= valid_mean(&maps.cs, lh, lw, k.radius());
                xs = downsample2(&xs)?;
                ys = downsample2(&ys)?;
            } else {
                let ssim: Vec<f64> = maps.l.iter().zip(&maps.cs).map(|(a, b)| a * b).collect();
                product *= valid_mean(&ssim, lh, lw, k.radius());
            }
        }
        total += product;
    }
    Ok(total / channels as f64)
}

fn prewitt_magnitude(lum: &ImageBuffer) -> Vec<f64> {
    let (h, w) = (lum.height() as isize, lum.width() as isize);
    let at =
        |r: isize, c: isize| lum.get(r.clamp(0, h - 1) as usize, c.clamp(0, w - 1) as usize, 0);
    let mut out = Vec::with_capacity((h * w) as usize);
    for r in 0..h {
        for c in 0..w {
            let mut gx = 0.0;
            let mut gy = 0.0;
            for d in -1..=1 {
                gx += at(r + d, c + 1) - at(r + d, c - 1);
                gy += at(r + 1, c + d) - at(r - 1, c + d);
            }
            gx /= 3.0;
            gy /= 3.0;
            out.push((gx * gx + gy * gy).sqrt());
        }
    }
    out
}

/// Gradient magnitude similarity deviation on the channel-mean luminance.
/// Prewitt operators with replicated borders; population standard deviation
/// of the similarity map.
pub fn gmsd(x: &ImageBuffer, y: &ImageBuffer) -> Result<f64> {
    x.check_same_shape(y)?;
    if x.height() < 2 || x.width() < 2 {
        return Err(Error::InvalidArgument(format!(
            "GMSD needs at least 2x2 pixels, got {}x{}",
            x.height(),
            x.width()
        )));
    }
    let mx = prewitt_magnitude(&x.luminance());
    let my = prewitt_magnitude(&y.luminance());
    let sim: Vec<f64> = mx
        .iter()
        .zip(&my)
        .map(|(a, b)| (2.0 * a * b + GMSD_C) / (a * a + b * b + GMSD_C))
        .collect();
    let n = sim.len() as f64;
    let mean = sim.iter().sum::<f64>() / n;
    let var = sim.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / n;
    Ok(var.sqrt())
}

/// Report columns, in their fixed CSV order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Metric {
    /// Mean squared error × 1000.
    L2,
    Psnr,
    /// Mean absolute error × 1000.
    L1,
    Ssim,
    MsSsim,
    Gmsd,
}

impl Metric {
    pub const ALL: [Metric; 6] = [
        Metric::L2,
        Metric::Psnr,
        Metric::L1,
        Metric::Ssim,
        Metric::MsSsim,
        Metric::Gmsd,
    ];

    pub fn column(self) -> &'static str {
        match self {
            Metric::L2 => "l2_x1000",
            Metric::Psnr => "psnr",
            Metric::L1 => "l1_x1000",
            Metric::Ssim => "ssim",
            Metric::MsSsim => "msssim",
            Metric::Gmsd => "gmsd",
        }
    }

    pub fn compute(self, restored: &ImageBuffer, reference: &ImageBuffer) -> Result<f64> {
        match self {
            Metric::L2 => Ok(1000.0 * mse(restored, reference)?),
            Metric::Psnr => psnr(restored, reference),
            Metric::L1 => Ok(1000.0 * mae(restored, reference)?),
            Metric::Ssim => ssim_index(restored, reference, METRIC_SSIM_SIGMA),
            Metric::MsSsim => {
                let levels = feasible_levels(
                    restored.height(),
                    restored.width(),
                    METRIC_SSIM_SIGMA,
                    METRIC_MSSSIM_LEVELS,
                )
                .max(1);
                msssim_index(restored, reference, levels)
            }
            Metric::Gmsd => gmsd(restored, reference),
        }
    }
}

/// Per-image metric values plus corpus means.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    /// Columns present, in [`Metric::ALL`] order.
    pub metrics: Vec<Metric>,
    /// `(image name, values)` with values aligned to `metrics`.
    pub rows: Vec<(String, Vec<f64>)>,
    /// Arithmetic means; PSNR averages finite values only (infinite if none).
    pub means: Vec<f64>,
    /// Names of images whose PSNR was infinite and left out of the mean.
    pub psnr_infinite: Vec<String>,
}

impl MetricReport {
    pub fn mean(&self, metric: Metric) -> Option<f64> {
        let i = self.metrics.iter().position(|&m| m == metric)?;
        Some(self.means[i])
    }

    pub fn value(&self, row: usize, metric: Metric) -> Option<f64> {
        let i = self.metrics.iter().position(|&m| m == metric)?;
        self.rows.get(row).map(|r| r.1[i])
    }

    /// `image,<columns...>` header, one row per image, then a `mean` row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("image");
        for m in &self.metrics {
            out.push(',');
            out.push_str(m.column());
        }
        out.push('\n');
        let mut line = |name: &str, values: &[f64]| {
            out.push_str(name);
            for v in values {
                let _ = write!(out, ",{}", format_value(*v));
            }
            out.push('\n');
        };
        for (name, values) in &self.rows {
            line(name, values);
        }
        line("mean", &self.means);
        out
    }
}

fn format_value(v: f64) -> String {
    if v.is_infinite() && v > 0.0 {
        "inf".to_string()
    } else {
        format!("{v}")
    }
}

/// Scores every `(name, restored, reference)` triple on the requested
/// metrics (deduplicated, reported in fixed column order).
pub fn evaluate_corpus<'a>(
    pairs: impl IntoIterator<Item = (&'a str, &'a ImageBuffer, &'a ImageBuffer)>,
    metrics: &[Metric],
) -> Result<MetricReport> {
    let mut cols: Vec<Metric> = metrics.to_vec();
    cols.sort();
    cols.dedup();
    if cols.is_empty() {
        return Err(Error::InvalidArgument("no metrics requested".into()));
    }
    let mut rows = Vec::new();
    for (name, restored, reference) in pairs {
        restored.check_same_shape(reference).map_err(|e| match e {
            Error::ShapeMismatch(m) => Error::ShapeMismatch(format!("{name}: {m}")),
            other => other,
        })?;
        let values = cols
            .iter()
            .map(|m| m.compute(restored, reference))
            .collect::<Result<Vec<f64>>>()?;
        rows.push((name.to_string(), values));
    }
    if rows.is_empty() {
        return Err(Error::InvalidArgument("empty corpus".into()));
    }
    let mut psnr_infinite = Vec::new();
    let means = cols
        .iter()
        .enumerate()
        .map(|(i, &m)| {
            let finite: Vec<f64> = rows
                .iter()
                .filter(|(name, v)| {
                    let keep = v[i].is_finite();
                    if !keep && m == Metric::Psnr {
                        psnr_infinite.push(name.clone());
                    }
                    keep
                })
                .map(|(_, v)| v[i])
                .collect();
            if finite.is_empty() {
                f64::INFINITY
            } else {
                finite.iter().sum::<f64>() / finite.len() as f64
            }
        })
        .collect();
    Ok(MetricReport {
        metrics: cols,
        rows,
        means,
        psnr_infinite,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::loss::ssim_point;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(h: usize, w: usize, c: usize, seed: u64) -> ImageBuffer {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageBuffer::from_fn(h, w, c, |_, _, _| rng.random::<f64>())
    }

    #[test]
    fn ssim_map_matches_clipped_window_oracle() {
        let x = random_image(20, 17, 2, 41);
        let y = random_image(20, 17, 2, 42);
        let c = SsimConstants::default();
        for sigma in [1.0, 3.0] {
            let map = ssim_map(&x, &y, sigma, c).unwrap();
            for at in [(0, 0), (19, 16), (10, 3), (5, 12)] {
                let p = ssim_point(&x, &y, at, sigma, c).unwrap();
                for ch in 0..2 {
                    assert!((map.get(at.0, at.1, ch) - p.ssim[ch]).abs() < 1e-12);
                }
            }
        }
        let same = ssim_map(&x, &x, 2.0, c).unwrap();
        assert!(same.as_slice().iter().all(|&v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn psnr_cases() {
        let y = random_image(8, 8, 3, 1);
        let x = y.map(|v| v + 0.1);
        assert!((psnr(&x, &y).unwrap() - 20.0).abs() < 1e-9);
        assert_eq!(psnr(&y, &y).unwrap(), f64::INFINITY);
    }

    #[test]
    fn ssim_index_identity_and_constants() {
        let x = random_image(16, 16, 3, 2);
        assert_eq!(ssim_index(&x, &x, 1.5).unwrap(), 1.0);
        let a = ImageBuffer::filled(16, 16, 1, 0.5);
        let b = ImageBuffer::filled(16, 16, 1, 0.6);
        let c = SsimConstants::new(1e-4, 9e-4).unwrap();
        let v = ssim_index_with(&a, &b, 1.5, c).unwrap();
        assert!((v - 0.6001 / 0.6101).abs() < 1e-9);
        assert!(ssim_index(
            &ImageBuffer::zeros(10, 10, 1),
            &ImageBuffer::zeros(10, 10, 1),
            1.5
        )
        .is_err());
    }

    #[test]
    fn ssim_index_matches_per_pixel_brute_force() {
        let x = random_image(17, 19, 2, 3);
        let y = random_image(17, 19, 2, 4);
        let c = SsimConstants::default();
        let r = 5;
        let mut sum = 0.0;
        let mut n = 0;
        for row in r..17 - r {
            for col in r..19 - r {
                let p = ssim_point(&x, &y, (row, col), 1.5, c).unwrap();
                sum += p.ssim.iter().sum::<f64>();
                n += 2;
            }
        }
        let brute = sum / n as f64;
        assert!((ssim_index(&x, &y, 1.5).unwrap() - brute).abs() < 1e-10);
    }

    #[test]
    fn msssim_single_level_and_identity() {
        let x = random_image(32, 32, 3, 5);
        let y = random_image(32, 32, 3, 6);
        let a = msssim_index(&x, &y, 1).unwrap();
        let b = ssim_index(&x, &y, METRIC_SSIM_SIGMA).unwrap();
        assert!((a - b).abs() < 1e-12);
        assert_eq!(msssim_index(&x, &x, 2).unwrap(), 1.0);
        assert!(msssim_index(&x, &y, 3).is_err());
        assert!(msssim_index(&x, &y, 0).is_err());
    }

    #[test]
    fn msssim_matches_literal_pyramid() {
        let x = random_image(64, 64, 1, 7);
        let y = random_image(64, 64, 1, 8);
        let c = SsimConstants::default();
        // literal construction: explicit pooling loops, per-pixel ssim_point
        fn pool(img: &ImageBuffer) -> ImageBuffer {
            let (h, w) = (img.height() / 2, img.width() / 2);
            let mut data = vec![];
            for r in 0..h {
                for col in 0..w {
                    let mut s = 0.0;
                    for dr in 0..2 {
                        for dc in 0..2 {
                            s += img.get(2 * r + dr, 2 * col + dc, 0);
                        }
                    }
                    data.push(s / 4.0);
                }
            }
            ImageBuffer::from_vec(h, w, 1, data).unwrap()
        }
        let mut xs = x.clone();
        let mut ys = y.clone();
        let mut product = 1.0;
        for level in 0..3 {
            let (h, w) = (xs.height(), xs.width());
            let (mut cs_sum, mut ssim_sum, mut n) = (0.0, 0.0, 0.0);
            for row in 5..h - 5 {
                for col in 5..w - 5 {
                    let p = ssim_point(&xs, &ys, (row, col), 1.5, c).unwrap();
                    cs_sum += p.cs[0];
                    ssim_sum += p.ssim[0];
                    n += 1.0;
                }
            }
            if level < 2 {
                product *= cs_sum / n;
                xs = pool(&xs);
                ys = pool(&ys);
            } else {
                product *= ssim_sum / n;
            }
        }
        let v = msssim_index(&x, &y, 3).unwrap();
        assert!((v - product).abs() < 1e-10, "{v} vs {product}");
    }

    #[test]
    fn gmsd_identity_and_step_edge() {
        let x = random_image(12, 12, 3, 9);
        assert_eq!(gmsd(&x, &x).unwrap(), 0.0);
        assert!(gmsd(&ImageBuffer::zeros(1, 1, 1), &ImageBuffer::zeros(1, 1, 1)).is_err());

        // 4x4 step edge vs a blurred step, evaluated by hand with clamped Prewitt
        let step = ImageBuffer::from_fn(4, 4, 1, |_, c, _| if c >= 2 { 1.0 } else { 0.0 });
        let blur_row = [0.0, 0.25, 0.75, 1.0];
        let blurred = ImageBuffer::from_fn(4, 4, 1, |_, c, _| blur_row[c]);
        // vertical structure -> gy = 0; gx = (v[c+1] - v[c-1]) with clamped columns
        let gx = |row: &[f64], c: usize| row[(c + 1).min(3)] - row[c.saturating_sub(1)];
        let step_row = [0.0, 0.0, 1.0, 1.0];
        let mut sims = vec![];
        for _ in 0..4 {
            for c in 0..4 {
                let (a, b) = (gx(&step_row, c), gx(&blur_row, c));
                sims.push((2.0 * a * b + GMSD_C) / (a * a + b * b + GMSD_C));
            }
        }
        let mean = sims.iter().sum::<f64>() / 16.0;
        let sd = (sims.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / 16.0).sqrt();
        let v = gmsd(&blurred, &step).unwrap();
        assert!(v > 0.0);
        assert!((v - sd).abs() < 1e-12);
    }

    #[test]
    fn indices_are_symmetric() {
        let x = random_image(40, 40, 3, 10);
        let y = random_image(40, 40, 3, 11);
        assert_eq!(
            ssim_index(&x, &y, 1.5).unwrap(),
            ssim_index(&y, &x, 1.5).unwrap()
        );
        assert!(
            (msssim_index(&x, &y, 2).unwrap() - msssim_index(&y, &x, 2).unwrap()).abs() < 1e-15
        );
        assert_eq!(gmsd(&x, &y).unwrap(), gmsd(&y, &x).unwrap());
    }

    #[test]
    fn corpus_identical_pairs() {
        let a = random_image(24, 24, 3, 12);
        let b = random_image(24, 24, 3, 13);
        let report = evaluate_corpus([("a", &a, &a), ("b", &b, &b)], &Metric::ALL).unwrap();
        assert_eq!(report.mean(Metric::Ssim), Some(1.0));
        assert_eq!(report.mean(Metric::L1), Some(0.0));
        assert_eq!(report.mean(Metric::L2), Some(0.0));
        assert_eq!(report.mean(Metric::Gmsd), Some(0.0));
        assert_eq!(report.mean(Metric::Psnr), Some(f64::INFINITY));
        assert_eq!(report.psnr_infinite, vec!["a".to_string(), "b".to_string()]);
        assert!(report.to_csv().lines().last().unwrap().contains("inf"));
    }

    #[test]
    fn corpus_singleton_and_errors() {
        let a = random_image(24, 24, 1, 14);
        let b = random_image(24, 24, 1, 15);
        let report = evaluate_corpus([("only", &a, &b)], &[Metric::Gmsd, Metric::L2]).unwrap();
        assert_eq!(report.metrics, vec![Metric::L2, Metric::Gmsd]);
        assert_eq!(report.rows[0].1, report.means);
        let empty: Vec<(&str, &ImageBuffer, &ImageBuffer)> = vec![];
        assert!(evaluate_corpus(empty, &Metric::ALL).is_err());
        let c = random_image(20, 24, 1, 16);
        assert!(evaluate_corpus([("bad", &a, &c)], &Metric::ALL).is_err());
    }

    #[test]
    fn csv_layout() {
        let a = random_image(24, 24, 3, 17);
        let b = random_image(24, 24, 3, 18);
        let csv = evaluate_corpus([("p", &a, &b)], &Metric::ALL)
            .unwrap()
            .to_csv();
        let mut lines = csv.lines();
        assert_eq!(
            lines.next().unwrap(),
            "image,l2_x1000,psnr,l1_x1000,ssim,msssim,gmsd"
        );
        assert!(lines.next().unwrap().starts_with("p,"));
        assert!(lines.next().unwrap().starts_with("mean,"));
        assert!(lines.next().is_none());
    }
}
