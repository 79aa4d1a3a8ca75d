//! Gaussian kernels, separable filtering and Gaussian-weighted local moments.

use crate::error::{Error, Result};
use crate::image::ImageBuffer;

/// Normalized, symmetric 1-D Gaussian truncated at `radius = ceil(3 sigma)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianKernel {
    sigma: f64,
    radius: usize,
    coefficients: Vec<f64>,
}

impl GaussianKernel {
    pub fn new(sigma: f64) -> Result<Self> {
        if !(sigma.is_finite() && sigma > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "gaussian sigma must be positive, got {sigma}"
            )));
        }
        let radius = (3.0 * sigma).ceil() as usize;
        let r = radius as isize;
        let mut coefficients: Vec<f64> = (-r..=r)
            .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
            .collect();
        let sum: f64 = coefficients.iter().sum();
        coefficients.iter_mut().for_each(|c| *c /= sum);
        Ok(Self {
            sigma,
            radius,
            coefficients,
        })
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn radius(&self) -> usize {
        self.radius
    }

    pub fn coefficients(&self) -> &[f64] {
        &self.coefficients
    }

    /// Coefficient at signed offset `d` from the centre; zero beyond the radius.
    #[inline]
    pub fn weight(&self, d: isize) -> f64 {
        let r = self.radius as isize;
        if d < -r || d > r {
            0.0
        } else {
            self.coefficients[(d + r) as usize]
        }
    }

    /// Side length of the full 2-D window.
    pub fn size(&self) -> usize {
        2 * self.radius + 1
    }
}

pub fn gaussian_kernel(sigma: f64) -> Result<GaussianKernel> {
    GaussianKernel::new(sigma)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Border {
    /// Clamp sample coordinates to the image.
    Replicate,
    /// Drop out-of-image taps and rescale the remaining weights to unit sum.
    Renormalize,
}

/// Horizontal then vertical 1-D convolution of every channel.
pub fn filter_separable(img: &ImageBuffer, k: &GaussianKernel, border: Border) -> ImageBuffer {
    let (h, w, ch) = img.shape();
    let horizontal = filter_axis(img.as_slice(), h, w, ch, k, border, Axis::Cols);
    let both = filter_axis(&horizontal, h, w, ch, k, border, Axis::Rows);
    ImageBuffer::from_vec(h, w, ch, both).expect("filtering preserves shape and finiteness")
}

#[derive(Clone, Copy)]
enum Axis {
    Rows,
    Cols,
}

fn filter_axis(
    src: &[f64],
    h: usize,
    w: usize,
    ch: usize,
    k: &GaussianKernel,
    border: Border,
    axis: Axis,
) -> Vec<f64> {
    let r = k.radius() as isize;
    let len = match axis {
        Axis::Rows => h,
        Axis::Cols => w,
    } as isize;
    let mut out = vec![0.0; src.len()];
    for row in 0..h {
        for col in 0..w {
            let pos = match axis {
                Axis::Rows => row,
                Axis::Cols => col,
            } as isize;
            for c in 0..ch {
                let mut acc = 0.0;
                let mut wsum = 0.0;
                for d in -r..=r {
                    let mut p = pos + d;
                    if p < 0 || p >= len {
                        match border {
                            Border::Replicate => p = p.clamp(0, len - 1),
                            Border::Renormalize => continue,
                        }
                    }
                    let (sr, sc) = match axis {
                        Axis::Rows => (p as usize, col),
                        Axis::Cols => (row, p as usize),
                    };
                    let wgt = k.weight(d);
                    acc += wgt * src[(sr * w + sc) * ch + c];
                    wsum += wgt;
                }
                out[(row * w + col) * ch + c] = match border {
                    Border::Replicate => acc,
                    Border::Renormalize => acc / wsum,
                };
            }
        }
    }
    out
}

/// 2-D Gaussian weights around a centre pixel, clipped to the image and
/// renormalized to unit sum. The window is the rectangle
/// `rows × cols` starting at `(row0, col0)`; weights are row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    pub row0: usize,
    pub col0: usize,
    pub rows: usize,
    pub cols: usize,
    pub weights: Vec<f64>,
}

impl Window {
    pub fn centered(k: &GaussianKernel, height: usize, width: usize, at: (usize, usize)) -> Self {
        let r = k.radius();
        let (cr, cc) = at;
        let row0 = cr.saturating_sub(r);
        let col0 = cc.saturating_sub(r);
        let row1 = (cr + r).min(height - 1);
        let col1 = (cc + r).min(width - 1);
        let wr: Vec<f64> = (row0..=row1)
            .map(|i| k.weight(i as isize - cr as isize))
            .collect();
        let wc: Vec<f64> = (col0..=col1)
            .map(|j| k.weight(j as isize - cc as isize))
            .collect();
        let total = wr.iter().sum::<f64>() * wc.iter().sum::<f64>();
        let weights = wr
            .iter()
            .flat_map(|a| wc.iter().map(move |b| a * b / total))
            .collect();
        Self {
            row0,
            col0,
            rows: row1 - row0 + 1,
            cols: col1 - col0 + 1,
            weights,
        }
    }

    /// Iterates `(row, col, weight)` over the window.
    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        self.weights
            .iter()
            .enumerate()
            .map(move |(i, &w)| (self.row0 + i / self.cols, self.col0 + i % self.cols, w))
    }

    /// Weight at an absolute pixel, zero outside the window.
    pub fn weight_at(&self, row: usize, col: usize) -> f64 {
        if row < self.row0 || col < self.col0 {
            return 0.0;
        }
        let (i, j) = (row - self.row0, col - self.col0);
        if i >= self.rows || j >= self.cols {
            return 0.0;
        }
        self.weights[i * self.cols + j]
    }
}

/// Weighted first and second moments of two images around one pixel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalMoments {
    pub mu_x: f64,
    pub mu_y: f64,
    pub var_x: f64,
    pub var_y: f64,
    pub cov_xy: f64,
}

impl LocalMoments {
    /// Moments of channel `channel` under `window`.
    pub fn in_window(x: &ImageBuffer, y: &ImageBuffer, window: &Window, channel: usize) -> Self {
        let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for (r, c, w) in window.iter() {
            let a = x.get(r, c, channel);
            let b = y.get(r, c, channel);
            mx += w * a;
            my += w * b;
            sxx += w * a * a;
            syy += w * b * b;
            sxy += w * a * b;
        }
        Self::from_sums(mx, my, sxx, syy, sxy)
    }

    /// Builds moments from weighted sums `E[x], E[y], E[x²], E[y²], E[xy]`.
    /// Variances that come out slightly negative from cancellation are
    /// clamped to zero.
    pub fn from_sums(mx: f64, my: f64, sxx: f64, syy: f64, sxy: f64) -> Self {
        Self {
            mu_x: mx,
            mu_y: my,
            var_x: (sxx - mx * mx).max(0.0),
            var_y: (syy - my * my).max(0.0),
            cov_xy: sxy - mx * my,
        }
    }
}

pub fn local_moments(
    x: &ImageBuffer,
    y: &ImageBuffer,
    k: &GaussianKernel,
    at: (usize, usize),
    channel: usize,
) -> Result<LocalMoments> {
    x.check_same_shape(y)?;
    if at.0 >= x.height() || at.1 >= x.width() || channel >= x.channels() {
        return Err(Error::InvalidArgument(format!(
            "pixel {at:?} channel {channel} outside {:?} image",
            x.shape()
        )));
    }
    let window = Window::centered(k, x.height(), x.width(), at);
    Ok(LocalMoments::in_window(x, y, &window, channel))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lcg_image(h: usize, w: usize, ch: usize, seed: u64) -> ImageBuffer {
        let mut s = seed;
        ImageBuffer::from_fn(h, w, ch, |_, _, _| {
            s = s
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            (s >> 11) as f64 / (1u64 << 53) as f64
        })
    }

    #[test]
    fn kernel_normalization_and_radius() {
        for sigma in [0.3, 0.5, 1.0, 1.5, 2.0, 4.0, 8.0, 9.0] {
            let k = gaussian_kernel(sigma).unwrap();
            let sum: f64 = k.coefficients().iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
            assert_eq!(k.radius(), (3.0 * sigma).ceil() as usize);
            let c = k.coefficients();
            for i in 0..c.len() {
                assert_eq!(c[i], c[c.len() - 1 - i]);
            }
        }
        let k8 = gaussian_kernel(8.0).unwrap();
        assert_eq!(k8.radius(), 24);
        assert_eq!(k8.coefficients().len(), 49);
    }

    #[test]
    fn kernel_half_sigma_center() {
        // exp(-i^2 / 0.5) for i in -2..=2, normalized by hand
        let terms = [
            (-4.0f64 / 0.5).exp(),
            (-1.0f64 / 0.5).exp(),
            1.0,
            (-1.0f64 / 0.5).exp(),
            (-4.0f64 / 0.5).exp(),
        ];
        let sum: f64 = terms.iter().sum();
        let k = gaussian_kernel(0.5).unwrap();
        assert_eq!(k.radius(), 2);
        assert!((k.coefficients()[2] - 1.0 / sum).abs() < 1e-15);
        assert!((k.coefficients()[2] - 0.7866).abs() < 1e-4);
    }

    #[test]
    fn kernel_rejects_bad_sigma() {
        assert!(gaussian_kernel(0.0).is_err());
        assert!(gaussian_kernel(-1.0).is_err());
        assert!(gaussian_kernel(f64::NAN).is_err());
    }

    #[test]
    fn constant_image_is_fixed_point() {
        let img = ImageBuffer::filled(9, 13, 3, 0.37);
        let k = gaussian_kernel(1.5).unwrap();
        for border in [Border::Replicate, Border::Renormalize] {
            let out = filter_separable(&img, &k, border);
            for &v in out.as_slice() {
                assert!((v - 0.37).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn delta_response_is_outer_product() {
        let mut img = ImageBuffer::zeros(11, 11, 1);
        img.set(5, 5, 0, 1.0);
        let k = gaussian_kernel(1.0).unwrap();
        let out = filter_separable(&img, &k, Border::Replicate);
        let c0 = k.weight(0);
        assert!((out.get(5, 5, 0) - c0 * c0).abs() < 1e-15);
        for dr in -3isize..=3 {
            for dc in -3isize..=3 {
                let v = out.get((5 + dr) as usize, (5 + dc) as usize, 0);
                assert!((v - k.weight(dr) * k.weight(dc)).abs() < 1e-15);
                let mirrored = out.get((5 - dr) as usize, (5 + dc) as usize, 0);
                assert!((v - mirrored).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn ramp_preserved_in_interior_under_renormalize() {
        let img = ImageBuffer::from_fn(20, 20, 1, |r, c, _| 0.01 * r as f64 + 0.02 * c as f64);
        let k = gaussian_kernel(1.0).unwrap();
        let out = filter_separable(&img, &k, Border::Renormalize);
        let r = k.radius();
        for row in r..20 - r {
            for col in r..20 - r {
                assert!((out.get(row, col, 0) - img.get(row, col, 0)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn filter_is_linear_and_range_preserving() {
        let a = lcg_image(12, 10, 2, 1);
        let b = lcg_image(12, 10, 2, 2);
        let k = gaussian_kernel(2.0).unwrap();
        for border in [Border::Replicate, Border::Renormalize] {
            let combo = a.zip_map(&b, |p, q| 0.3 * p - 1.7 * q).unwrap();
            let lhs = filter_separable(&combo, &k, border);
            let fa = filter_separable(&a, &k, border);
            let fb = filter_separable(&b, &k, border);
            for i in 0..lhs.len() {
                let rhs = 0.3 * fa.as_slice()[i] - 1.7 * fb.as_slice()[i];
                assert!((lhs.as_slice()[i] - rhs).abs() < 1e-10);
            }
            let (lo, hi) = a
                .as_slice()
                .iter()
                .fold((f64::MAX, f64::MIN), |(l, h), &v| (l.min(v), h.max(v)));
            assert!(fa
                .as_slice()
                .iter()
                .all(|&v| v >= lo - 1e-12 && v <= hi + 1e-12));
        }
    }

    #[test]
    fn moments_symmetry_and_constant() {
        let x = lcg_image(9, 9, 1, 3);
        let k = gaussian_kernel(1.5).unwrap();
        let m = local_moments(&x, &x, &k, (4, 4), 0).unwrap();
        assert_eq!(m.mu_x, m.mu_y);
        assert!((m.var_x - m.cov_xy).abs() < 1e-10);
        assert_eq!(m.var_x, m.var_y);

        let c = ImageBuffer::filled(9, 9, 1, 0.4);
        let m = local_moments(&c, &x, &k, (2, 7), 0).unwrap();
        assert!((m.mu_x - 0.4).abs() < 1e-14);
        assert!(m.var_x.abs() < 1e-14);
        assert!(m.cov_xy.abs() < 1e-14);
    }

    #[test]
    fn moments_match_brute_force_on_checkerboard() {
        let x = ImageBuffer::from_fn(5, 5, 1, |r, c, _| ((r + c) % 2) as f64);
        let y = lcg_image(5, 5, 1, 11);
        let k = gaussian_kernel(1.0).unwrap();
        let m = local_moments(&x, &y, &k, (2, 2), 0).unwrap();
        // radius 3 exceeds the 5x5 image; weights renormalized over all 25 pixels
        let mut wsum = 0.0;
        let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for r in 0..5 {
            for c in 0..5 {
                let d2 = ((r as f64 - 2.0).powi(2) + (c as f64 - 2.0).powi(2)) / 2.0;
                let w = (-d2).exp();
                wsum += w;
                let (a, b) = (x.get(r, c, 0), y.get(r, c, 0));
                mx += w * a;
                my += w * b;
                sxx += w * a * a;
                syy += w * b * b;
                sxy += w * a * b;
            }
        }
        let (mx, my) = (mx / wsum, my / wsum);
        assert!((m.mu_x - mx).abs() < 1e-14);
        assert!((m.mu_y - my).abs() < 1e-14);
        assert!((m.var_x - (sxx / wsum - mx * mx)).abs() < 1e-14);
        assert!((m.var_y - (syy / wsum - my * my)).abs() < 1e-14);
        assert!((m.cov_xy - (sxy / wsum - mx * my)).abs() < 1e-14);
    }

    #[test]
    fn moments_dimension_mismatch() {
        let k = gaussian_kernel(1.0).unwrap();
        let a = ImageBuffer::zeros(5, 5, 1);
        let b = ImageBuffer::zeros(5, 6, 1);
        assert!(local_moments(&a, &b, &k, (0, 0), 0).is_err());
    }

    #[test]
    fn window_clipped_weights_sum_to_one() {
        let k = gaussian_kernel(8.0).unwrap();
        let w = Window::centered(&k, 31, 31, (15, 15));
        assert_eq!((w.rows, w.cols), (31, 31));
        assert!((w.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(w.weight_at(0, 0), w.weight_at(30, 30));
    }
}
