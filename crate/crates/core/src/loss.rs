//! Loss layers with analytic gradients.
//!
//! Every loss maps a processed patch `x` and a reference patch `y` to a
//! scalar plus `∂loss/∂x(q)` for every sample `q`. The SSIM family is
//! evaluated at the centre pixel of an odd-sized patch by default: the
//! network is fully convolutional, so optimizing the centre response trains
//! the same kernels that are later applied to every pixel of an image.
//! Gradients flow to every pixel inside the Gaussian support around the
//! centre.
//!
//! Local statistics use Gaussian windows truncated at `ceil(3 sigma)` and
//! clipped to the patch, with the surviving weights rescaled to unit sum.
//! The gradient formulas use those same rescaled weights, so they are exact
//! derivatives of the computed value.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::filter::{GaussianKernel, Window};
use crate::image::ImageBuffer;

/// Stabilizing constants of the SSIM ratios.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SsimConstants {
    pub c1: f64,
    pub c2: f64,
    pub dynamic_range: f64,
}

impl SsimConstants {
    /// `C1 = (0.01 L)²`, `C2 = (0.03 L)²`.
    pub fn for_range(dynamic_range: f64) -> Self {
        Self {
            c1: (0.01 * dynamic_range).powi(2),
            c2: (0.03 * dynamic_range).powi(2),
            dynamic_range,
        }
    }

    pub fn new(c1: f64, c2: f64) -> Result<Self> {
        if !(c1 > 0.0 && c2 > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "SSIM constants must be positive, got C1={c1}, C2={c2}"
            )));
        }
        Ok(Self {
            c1,
            c2,
            dynamic_range: 1.0,
        })
    }
}

impl Default for SsimConstants {
    fn default() -> Self {
        Self::for_range(1.0)
    }
}

/// Gaussian widths that stand in for the levels of a dyadic pyramid.
#[derive(Debug, Clone, PartialEq)]
pub struct SigmaBank(Vec<f64>);

impl SigmaBank {
    pub fn new(sigmas: Vec<f64>) -> Result<Self> {
        if sigmas.is_empty() {
            return Err(Error::InvalidArgument("sigma bank is empty".into()));
        }
        if sigmas.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
            return Err(Error::InvalidArgument(format!(
                "sigma bank entries must be positive: {sigmas:?}"
            )));
        }
        if sigmas.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidArgument(format!(
                "sigma bank must be strictly increasing: {sigmas:?}"
            )));
        }
        Ok(Self(sigmas))
    }

    pub fn single(sigma: f64) -> Result<Self> {
        Self::new(vec![sigma])
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.0
    }

    pub fn largest(&self) -> f64 {
        *self.0.last().expect("bank is never empty")
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    fn kernels(&self) -> Vec<GaussianKernel> {
        self.0
            .iter()
            .map(|&s| GaussianKernel::new(s).expect("validated sigma"))
            .collect()
    }
}

impl Default for SigmaBank {
    fn default() -> Self {
        Self(vec![0.5, 1.0, 2.0, 4.0, 8.0])
    }
}

/// Scalar loss and its gradient with respect to the processed patch.
#[derive(Debug, Clone, PartialEq)]
pub struct LossEvaluation {
    pub value: f64,
    pub gradient: ImageBuffer,
}

/// Where the SSIM-family terms are evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Reduction {
    /// Only at the centre pixel of the patch.
    #[default]
    Center,
    /// Averaged over every pixel of the patch (windows clipped at the border).
    PatchMean,
}

pub const DEFAULT_MIX_ALPHA: f64 = 0.84;
pub const DEFAULT_SSIM_SIGMA: f64 = 5.0;

/// Loss designator.
#[derive(Debug, Clone, PartialEq)]
pub enum LossKind {
    L1,
    L2,
    Ssim { sigma: f64 },
    MsSsim { bank: SigmaBank },
    Mix { alpha: f64, bank: SigmaBank },
}

impl LossKind {
    pub fn ssim(sigma: f64) -> Self {
        Self::Ssim { sigma }
    }

    pub fn msssim() -> Self {
        Self::MsSsim {
            bank: SigmaBank::default(),
        }
    }

    pub fn mix() -> Self {
        Self::Mix {
            alpha: DEFAULT_MIX_ALPHA,
            bank: SigmaBank::default(),
        }
    }

    /// `true` for the losses built on SSIM terms.
    pub fn is_structural(&self) -> bool {
        matches!(
            self,
            Self::Ssim { .. } | Self::MsSsim { .. } | Self::Mix { .. }
        )
    }

    /// Evaluates with default constants and centre-pixel reduction.
    pub fn evaluate(&self, x: &ImageBuffer, y: &ImageBuffer) -> Result<LossEvaluation> {
        LossFunction::new(self.clone()).evaluate(x, y)
    }
}

impl fmt::Display for LossKind {
    /// Short names: `l1`, `l2`, `ssim<sigma>`, `msssim`, `mix`. Non-default
    /// parameters are not encoded, except the SSIM sigma.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::L1 => write!(f, "l1"),
            Self::L2 => write!(f, "l2"),
            Self::Ssim { sigma } => write!(f, "ssim{sigma}"),
            Self::MsSsim { .. } => write!(f, "msssim"),
            Self::Mix { .. } => write!(f, "mix"),
        }
    }
}

impl FromStr for LossKind {
    type Err = Error;

    /// Accepts `l1`, `l2`, `ssim` (sigma 5), `ssim<sigma>` such as `ssim9`
    /// or `ssim1.5`, `msssim`/`ms-ssim` and `mix`.
    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase();
        match lower.as_str() {
            "l1" => Ok(Self::L1),
            "l2" => Ok(Self::L2),
            "msssim" | "ms-ssim" | "ms_ssim" => Ok(Self::msssim()),
            "mix" => Ok(Self::mix()),
            "ssim" => Ok(Self::ssim(DEFAULT_SSIM_SIGMA)),
            other => {
                if let Some(rest) = other.strip_prefix("ssim") {
                    let sigma: f64 = rest
                        .trim_start_matches(['_', ':'])
                        .parse()
                        .map_err(|_| Error::InvalidArgument(format!("unknown loss {s:?}")))?;
                    if sigma > 0.0 && sigma.is_finite() {
                        return Ok(Self::ssim(sigma));
                    }
                }
                Err(Error::InvalidArgument(format!(
                    "unknown loss {s:?} (expected l1, l2, ssim[sigma], msssim or mix)"
                )))
            }
        }
    }
}

/// A loss designator together with its SSIM constants and reduction mode.
#[derive(Debug, Clone, PartialEq)]
pub struct LossFunction {
    pub kind: LossKind,
    pub constants: SsimConstants,
    pub reduction: Reduction,
}

impl LossFunction {
    pub fn new(kind: LossKind) -> Self {
        Self {
            kind,
            constants: SsimConstants::default(),
            reduction: Reduction::Center,
        }
    }

    pub fn with_reduction(mut self, reduction: Reduction) -> Self {
        self.reduction = reduction;
        self
    }

    pub fn with_constants(mut self, constants: SsimConstants) -> Self {
        self.constants = constants;
        self
    }

    pub fn evaluate(&self, x: &ImageBuffer, y: &ImageBuffer) -> Result<LossEvaluation> {
        let mut grad = vec![0.0; x.len()];
        let value = self.run(x, y, Some(&mut grad))?;
        let (h, w, c) = x.shape();
        Ok(LossEvaluation {
            value,
            gradient: ImageBuffer::from_vec(h, w, c, grad)?,
        })
    }

    /// Loss value only; skips gradient assembly.
    pub fn value(&self, x: &ImageBuffer, y: &ImageBuffer) -> Result<f64> {
        self.run(x, y, None)
    }

    fn run(&self, x: &ImageBuffer, y: &ImageBuffer, grad: Option<&mut [f64]>) -> Result<f64> {
        x.check_same_shape(y)?;
        match &self.kind {
            LossKind::L1 => Ok(l1_core(x, y, grad)),
            LossKind::L2 => Ok(l2_core(x, y, grad)),
            LossKind::Ssim { sigma } => {
                let kernels = vec![GaussianKernel::new(*sigma)?];
                structural(x, y, &kernels, 1.0, self.constants, self.reduction, grad)
            }
            LossKind::MsSsim { bank } => structural(
                x,
                y,
                &bank.kernels(),
                1.0,
                self.constants,
                self.reduction,
                grad,
            ),
            LossKind::Mix { alpha, bank } => {
                check_alpha(*alpha)?;
                structural(
                    x,
                    y,
                    &bank.kernels(),
                    *alpha,
                    self.constants,
                    self.reduction,
                    grad,
                )
            }
        }
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidArgument(format!(
            "mix alpha must lie in [0, 1], got {alpha}"
        )));
    }
    Ok(())
}

fn l2_core(x: &ImageBuffer, y: &ImageBuffer, grad: Option<&mut [f64]>) -> f64 {
    let n = x.len() as f64;
    let sum: f64 = x
        .as_slice()
        .iter()
        .zip(y.as_slice())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    if let Some(g) = grad {
        for ((g, a), b) in g.iter_mut().zip(x.as_slice()).zip(y.as_slice()) {
            *g = 2.0 * (a - b) / n;
        }
    }
    sum / n
}

/// `sign(0) = 0`.
#[inline]
fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn l1_core(x: &ImageBuffer, y: &ImageBuffer, grad: Option<&mut [f64]>) -> f64 {
    let n = x.len() as f64;
    let sum: f64 = x
        .as_slice()
        .iter()
        .zip(y.as_slice())
        .map(|(a, b)| (a - b).abs())
        .sum();
    if let Some(g) = grad {
        for ((g, a), b) in g.iter_mut().zip(x.as_slice()).zip(y.as_slice()) {
            *g = sign(a - b) / n;
        }
    }
    sum / n
}

pub fn l2_loss(x: &ImageBuffer, y: &ImageBuffer) -> Result<LossEvaluation> {
    LossFunction::new(LossKind::L2).evaluate(x, y)
}

pub fn l1_loss(x: &ImageBuffer, y: &ImageBuffer) -> Result<LossEvaluation> {
    LossFunction::new(LossKind::L1).evaluate(x, y)
}

/// Per-channel SSIM terms at one pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct SsimPoint {
    pub ssim: Vec<f64>,
    pub l: Vec<f64>,
    pub cs: Vec<f64>,
}

pub fn ssim_point(
    x: &ImageBuffer,
    y: &ImageBuffer,
    at: (usize, usize),
    sigma: f64,
    c: SsimConstants,
) -> Result<SsimPoint> {
    x.check_same_shape(y)?;
    if at.0 >= x.height() || at.1 >= x.width() {
        return Err(Error::InvalidArgument(format!(
            "pixel {at:?} outside {}x{} image",
            x.height(),
            x.width()
        )));
    }
    let k = GaussianKernel::new(sigma)?;
    let window = Window::centered(&k, x.height(), x.width(), at);
    let mut out = SsimPoint {
        ssim: Vec::with_capacity(x.channels()),
        l: Vec::with_capacity(x.channels()),
        cs: Vec::with_capacity(x.channels()),
    };
    for ch in 0..x.channels() {
        let t = ScaleTerms::compute(x, y, &window, ch, c);
        out.l.push(t.l);
        out.cs.push(t.cs);
        out.ssim.push(t.l * t.cs);
    }
    Ok(out)
}

pub fn ssim_loss(
    x: &ImageBuffer,
    y: &ImageBuffer,
    sigma: f64,
    c: SsimConstants,
) -> Result<LossEvaluation> {
    LossFunction::new(LossKind::ssim(sigma))
        .with_constants(c)
        .evaluate(x, y)
}

pub fn msssim_loss(
    x: &ImageBuffer,
    y: &ImageBuffer,
    bank: &SigmaBank,
    c: SsimConstants,
) -> Result<LossEvaluation> {
    LossFunction::new(LossKind::MsSsim { bank: bank.clone() })
        .with_constants(c)
        .evaluate(x, y)
}

pub fn mix_loss(
    x: &ImageBuffer,
    y: &ImageBuffer,
    alpha: f64,
    bank: &SigmaBank,
    c: SsimConstants,
) -> Result<LossEvaluation> {
    check_alpha(alpha)?;
    LossFunction::new(LossKind::Mix {
        alpha,
        bank: bank.clone(),
    })
    .with_constants(c)
    .evaluate(x, y)
}

/// Moments and SSIM ratios of one channel under one window. Moments are
/// kept unclamped so the gradient stays the exact derivative of the value.
struct ScaleTerms {
    mu_x: f64,
    mu_y: f64,
    l: f64,
    cs: f64,
    /// `μx² + μy² + C1`
    l_den: f64,
    /// `σx² + σy² + C2`
    cs_den: f64,
}

impl ScaleTerms {
    fn compute(
        x: &ImageBuffer,
        y: &ImageBuffer,
        window: &Window,
        ch: usize,
        c: SsimConstants,
    ) -> Self {
        let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for (r, col, w) in window.iter() {
            let a = x.get(r, col, ch);
            let b = y.get(r, col, ch);
            mx += w * a;
            my += w * b;
            sxx += w * a * a;
            syy += w * b * b;
            sxy += w * a * b;
        }
        let var_x = sxx - mx * mx;
        let var_y = syy - my * my;
        let cov = sxy - mx * my;
        let l_den = mx * mx + my * my + c.c1;
        let cs_den = var_x + var_y + c.c2;
        Self {
            mu_x: mx,
            mu_y: my,
            l: (2.0 * mx * my + c.c1) / l_den,
            cs: (2.0 * cov + c.c2) / cs_den,
            l_den,
            cs_den,
        }
    }
}

/// SSIM / sigma-bank MS-SSIM / Mix evaluation. With `alpha = 1` this is the
/// pure structural loss; `kernels` holds one window per scale, the last one
/// being the widest (it supplies `l_M` and the L1 weighting).
fn structural(
    x: &ImageBuffer,
    y: &ImageBuffer,
    kernels: &[GaussianKernel],
    alpha: f64,
    c: SsimConstants,
    reduction: Reduction,
    mut grad: Option<&mut [f64]>,
) -> Result<f64> {
    let (h, w, _) = x.shape();
    match reduction {
        Reduction::Center => {
            if h % 2 == 0 || w % 2 == 0 {
                return Err(Error::InvalidArgument(format!(
                    "centre-pixel loss needs odd patch sides, got {h}x{w}"
                )));
            }
            Ok(structural_at(
                x,
                y,
                kernels,
                alpha,
                c,
                (h / 2, w / 2),
                1.0,
                grad,
            ))
        }
        Reduction::PatchMean => {
            let scale = 1.0 / (h * w) as f64;
            let mut total = 0.0;
            for r in 0..h {
                for col in 0..w {
                    total += structural_at(
                        x,
                        y,
                        kernels,
                        alpha,
                        c,
                        (r, col),
                        scale,
                        grad.as_deref_mut(),
                    );
                }
            }
            Ok(total * scale)
        }
    }
}

/// Loss contribution at centre `at`; accumulates `scale · ∂/∂x` into `grad`.
#[allow(clippy::too_many_arguments)]
fn structural_at(
    x: &ImageBuffer,
    y: &ImageBuffer,
    kernels: &[GaussianKernel],
    alpha: f64,
    c: SsimConstants,
    at: (usize, usize),
    scale: f64,
    mut grad: Option<&mut [f64]>,
) -> f64 {
    let (h, w, channels) = x.shape();
    let nc = channels as f64;
    let windows: Vec<Window> = kernels
        .iter()
        .map(|k| Window::centered(k, h, w, at))
        .collect();
    let widest = windows.last().expect("at least one scale");
    let m = windows.len();

    let mut structural_sum = 0.0;
    let mut l1_sum = 0.0;
    let mut terms: Vec<ScaleTerms> = Vec::with_capacity(m);
    let mut excl = vec![0.0; m];

    for ch in 0..channels {
        terms.clear();
        terms.extend(
            windows
                .iter()
                .map(|win| ScaleTerms::compute(x, y, win, ch, c)),
        );

        // products of cs excluding index i, without dividing by cs_i
        let mut prefix = 1.0;
        for i in 0..m {
            excl[i] = prefix;
            prefix *= terms[i].cs;
        }
        let cs_prod = prefix;
        let mut suffix = 1.0;
        for i in (0..m).rev() {
            excl[i] *= suffix;
            suffix *= terms[i].cs;
        }

        let lm = &terms[m - 1];
        structural_sum += lm.l * cs_prod;

        if alpha < 1.0 {
            for (r, col, wt) in widest.iter() {
                l1_sum += wt * (x.get(r, col, ch) - y.get(r, col, ch)).abs();
            }
        }

        if let Some(g) = grad.as_deref_mut() {
            // d(loss)/dP = -alpha / channels, P = l_M * prod cs_j
            let outer = -alpha * scale / nc;
            let dl_coef = 2.0 * (lm.mu_y - lm.mu_x * lm.l) / lm.l_den * cs_prod;
            for (r, col, wt) in widest.iter() {
                g[x.index(r, col, ch)] += outer * dl_coef * wt;
            }
            for (i, (win, t)) in windows.iter().zip(&terms).enumerate() {
                let coef = outer * lm.l * excl[i] * 2.0 / t.cs_den;
                for (r, col, wt) in win.iter() {
                    let dx = x.get(r, col, ch) - t.mu_x;
                    let dy = y.get(r, col, ch) - t.mu_y;
                    g[x.index(r, col, ch)] += coef * wt * (dy - t.cs * dx);
                }
            }
            if alpha < 1.0 {
                let l1_coef = (1.0 - alpha) * scale / nc;
                for (r, col, wt) in widest.iter() {
                    let i = x.index(r, col, ch);
                    g[i] += l1_coef * wt * sign(x.as_slice()[i] - y.as_slice()[i]);
                }
            }
        }
    }

    alpha * (1.0 - structural_sum / nc) + (1.0 - alpha) * l1_sum / nc
}

/// Central finite-difference gradient of an arbitrary scalar function of
/// the processed image.
pub fn finite_diff_gradient_fn(
    mut f: impl FnMut(&ImageBuffer) -> f64,
    x: &ImageBuffer,
    eps: f64,
) -> Result<ImageBuffer> {
    if eps.is_nan() || eps <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "eps must be positive, got {eps}"
        )));
    }
    let (h, w, c) = x.shape();
    let mut probe = x.as_slice().to_vec();
    let mut out = Vec::with_capacity(probe.len());
    for i in 0..probe.len() {
        let orig = probe[i];
        probe[i] = orig + eps;
        let plus = f(&ImageBuffer::from_vec(h, w, c, probe.clone())?);
        probe[i] = orig - eps;
        let minus = f(&ImageBuffer::from_vec(h, w, c, probe.clone())?);
        probe[i] = orig;
        out.push((plus - minus) / (2.0 * eps));
    }
    ImageBuffer::from_vec(h, w, c, out)
}

/// Central finite-difference gradient of `loss` with respect to `x`.
pub fn finite_diff_gradient(
    loss: &LossFunction,
    x: &ImageBuffer,
    y: &ImageBuffer,
    eps: f64,
) -> Result<ImageBuffer> {
    x.check_same_shape(y)?;
    // surface configuration errors before the probe loop
    loss.value(x, y)?;
    finite_diff_gradient_fn(|p| loss.value(p, y).expect("validated above"), x, eps)
}

/// Magnitude below which gradient entries are compared absolutely.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-6;

/// `|a - n| / max(|a|, |n|, RELATIVE_ERROR_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let den = analytic.abs().max(numeric.abs()).max(RELATIVE_ERROR_FLOOR);
    (analytic - numeric).abs() / den
}

/// Largest relative error over samples for which `include(i)` holds;
/// returns `(error, index)`.
pub fn max_relative_error(
    analytic: &[f64],
    numeric: &[f64],
    include: impl Fn(usize) -> bool,
) -> (f64, Option<usize>) {
    let mut worst = (0.0, None);
    for (i, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
        if !include(i) {
            continue;
        }
        let e = relative_error(a, n);
        if worst.1.is_none() || e > worst.0 {
            worst = (e, Some(i));
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(h: usize, w: usize, c: usize, seed: u64) -> ImageBuffer {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageBuffer::from_fn(h, w, c, |_, _, _| rng.random::<f64>())
    }

    #[test]
    fn l2_value_and_gradient() {
        let y = random_image(4, 5, 3, 1);
        let x = y.map(|v| v + 0.1);
        let e = l2_loss(&x, &y).unwrap();
        assert!((e.value - 0.01).abs() < 1e-12);
        let n = x.len() as f64;
        for &g in e.gradient.as_slice() {
            assert!((g - 0.2 / n).abs() < 1e-12);
        }
        let same = l2_loss(&y, &y).unwrap();
        assert_eq!(same.value, 0.0);
        assert!(same.gradient.as_slice().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn l1_two_sample_example() {
        let x = ImageBuffer::from_vec(1, 2, 1, vec![0.2, 0.8]).unwrap();
        let y = ImageBuffer::from_vec(1, 2, 1, vec![0.5, 0.5]).unwrap();
        let e = l1_loss(&x, &y).unwrap();
        assert!((e.value - 0.3).abs() < 1e-15);
        assert_eq!(e.gradient.as_slice(), &[-0.5, 0.5]);
        let z = l1_loss(&x, &x).unwrap();
        assert_eq!(z.value, 0.0);
        assert!(z.gradient.as_slice().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let a = ImageBuffer::zeros(3, 3, 1);
        let b = ImageBuffer::zeros(3, 3, 3);
        assert!(matches!(l2_loss(&a, &b), Err(Error::ShapeMismatch(_))));
        assert!(matches!(l1_loss(&a, &b), Err(Error::ShapeMismatch(_))));
        assert!(ssim_loss(&a, &b, 1.0, SsimConstants::default()).is_err());
    }

    #[test]
    fn ssim_point_identity_and_constant_patches() {
        let x = random_image(11, 11, 3, 2);
        let p = ssim_point(&x, &x, (5, 5), 1.5, SsimConstants::default()).unwrap();
        assert!(p.ssim.iter().all(|&s| s == 1.0));

        let a = ImageBuffer::filled(9, 9, 1, 0.5);
        let b = ImageBuffer::filled(9, 9, 1, 0.6);
        let c = SsimConstants::new(1e-4, 9e-4).unwrap();
        let p = ssim_point(&a, &b, (4, 4), 1.5, c).unwrap();
        let expected = (2.0 * 0.5 * 0.6 + 1e-4) / (0.25 + 0.36 + 1e-4);
        assert!((p.cs[0] - 1.0).abs() < 1e-9);
        assert!((p.l[0] - expected).abs() < 1e-12);
        assert!((p.ssim[0] - 0.983609).abs() < 1e-6);
    }

    #[test]
    fn ssim_point_matches_straight_line_evaluation() {
        let x = random_image(11, 11, 1, 5);
        let y = random_image(11, 11, 1, 6);
        let c = SsimConstants::default();
        let p = ssim_point(&x, &y, (5, 5), 1.5, c).unwrap();
        // independent: unnormalized weights, 2-D exponent, window clipped to 11x11
        let (mut ws, mut mx, mut my) = (0.0, 0.0, 0.0);
        let mut wts = vec![];
        for r in 0..11 {
            for col in 0..11 {
                let d2 = (r as f64 - 5.0).powi(2) + (col as f64 - 5.0).powi(2);
                let wt = (-d2 / (2.0 * 1.5 * 1.5)).exp();
                wts.push((r, col, wt));
                ws += wt;
                mx += wt * x.get(r, col, 0);
                my += wt * y.get(r, col, 0);
            }
        }
        mx /= ws;
        my /= ws;
        let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
        for &(r, col, wt) in &wts {
            let a = x.get(r, col, 0) - mx;
            let b = y.get(r, col, 0) - my;
            vx += wt * a * a / ws;
            vy += wt * b * b / ws;
            cxy += wt * a * b / ws;
        }
        let l = (2.0 * mx * my + c.c1) / (mx * mx + my * my + c.c1);
        let cs = (2.0 * cxy + c.c2) / (vx + vy + c.c2);
        assert!((p.l[0] - l).abs() < 1e-12);
        assert!((p.cs[0] - cs).abs() < 1e-12);
        assert!((p.ssim[0] - l * cs).abs() < 1e-12);
    }

    #[test]
    fn ssim_loss_identity_is_exactly_zero() {
        let x = random_image(31, 31, 3, 7);
        for kind in [
            LossKind::ssim(1.5),
            LossKind::ssim(9.0),
            LossKind::msssim(),
            LossKind::mix(),
        ] {
            let e = kind.evaluate(&x, &x).unwrap();
            assert_eq!(e.value, 0.0, "{kind}");
            assert!(e.gradient.as_slice().iter().all(|&g| g == 0.0), "{kind}");
        }
    }

    #[test]
    fn ssim_gradient_vanishes_outside_window() {
        let x = random_image(31, 31, 3, 8);
        let y = random_image(31, 31, 3, 9);
        let e = ssim_loss(&x, &y, 1.5, SsimConstants::default()).unwrap();
        let r: usize = 5; // ceil(4.5)
        for row in 0..31usize {
            for col in 0..31usize {
                let inside = row.abs_diff(15) <= r && col.abs_diff(15) <= r;
                for ch in 0..3 {
                    let g = e.gradient.get(row, col, ch);
                    if !inside {
                        assert_eq!(g, 0.0);
                    }
                }
            }
        }
        assert!(e.gradient.get(15, 15, 0) != 0.0);
    }

    #[test]
    fn even_side_rejected() {
        let x = random_image(30, 31, 1, 1);
        assert!(ssim_loss(&x, &x, 1.0, SsimConstants::default()).is_err());
        assert!(LossKind::msssim().evaluate(&x, &x).is_err());
        // patch-mean mode has no centre requirement
        let f = LossFunction::new(LossKind::ssim(1.0)).with_reduction(Reduction::PatchMean);
        assert!(f.evaluate(&x, &x).is_ok());
    }

    #[test]
    fn bank_validation() {
        assert!(SigmaBank::new(vec![]).is_err());
        assert!(SigmaBank::new(vec![1.0, 1.0]).is_err());
        assert!(SigmaBank::new(vec![2.0, 1.0]).is_err());
        assert!(SigmaBank::new(vec![0.0]).is_err());
        let d = SigmaBank::default();
        assert_eq!(d.sigmas(), &[0.5, 1.0, 2.0, 4.0, 8.0]);
        for w in d.sigmas().windows(2) {
            assert_eq!(w[1], 2.0 * w[0]);
        }
    }

    #[test]
    fn single_sigma_bank_reduces_to_ssim() {
        let x = random_image(31, 31, 3, 10);
        let y = random_image(31, 31, 3, 11);
        let c = SsimConstants::default();
        for sigma in [1.5, 5.0] {
            let a = ssim_loss(&x, &y, sigma, c).unwrap();
            let b = msssim_loss(&x, &y, &SigmaBank::single(sigma).unwrap(), c).unwrap();
            assert!((a.value - b.value).abs() < 1e-12);
            for (p, q) in a.gradient.as_slice().iter().zip(b.gradient.as_slice()) {
                assert!((p - q).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mix_degenerate_alphas() {
        let y = random_image(31, 31, 1, 12);
        let x = random_image(31, 31, 1, 13);
        let bank = SigmaBank::default();
        let c = SsimConstants::default();
        let ms = msssim_loss(&x, &y, &bank, c).unwrap();
        let m1 = mix_loss(&x, &y, 1.0, &bank, c).unwrap();
        assert_eq!(ms, m1);

        let delta = 0.05;
        let shifted = y.map(|v| v + delta);
        let m0 = mix_loss(&shifted, &y, 0.0, &bank, c).unwrap();
        assert!((m0.value - delta).abs() < 1e-12);
        let k = GaussianKernel::new(8.0).unwrap();
        let win = Window::centered(&k, 31, 31, (15, 15));
        for (r, col, wt) in win.iter() {
            assert!((m0.gradient.get(r, col, 0) - wt).abs() < 1e-15);
        }
        assert!(mix_loss(&x, &y, 1.5, &bank, c).is_err());
        assert!(mix_loss(&x, &y, -0.1, &bank, c).is_err());
    }

    #[test]
    fn loss_kind_names_round_trip() {
        for s in ["l1", "l2", "ssim5", "ssim1.5", "msssim", "mix"] {
            let k: LossKind = s.parse().unwrap();
            assert_eq!(k.to_string(), s);
        }
        assert_eq!("ssim".parse::<LossKind>().unwrap(), LossKind::ssim(5.0));
        assert!("ssim0".parse::<LossKind>().is_err());
        assert!("huber".parse::<LossKind>().is_err());
    }

    #[test]
    fn finite_differences_of_quadratic_and_constant() {
        let x = random_image(3, 3, 2, 20);
        let y = random_image(3, 3, 2, 21);
        let fd = finite_diff_gradient(&LossFunction::new(LossKind::L2), &x, &y, 1e-4).unwrap();
        let n = x.len() as f64;
        for i in 0..x.len() {
            let exact = 2.0 * (x.as_slice()[i] - y.as_slice()[i]) / n;
            assert!((fd.as_slice()[i] - exact).abs() < 1e-10);
        }
        let flat = finite_diff_gradient_fn(|_| 3.0, &x, 1e-4).unwrap();
        assert!(flat.as_slice().iter().all(|&g| g == 0.0));
        assert!(finite_diff_gradient_fn(|_| 0.0, &x, 0.0).is_err());
    }

    #[test]
    fn ssim_fd_is_eps_robust() {
        let x = random_image(15, 15, 1, 30);
        let y = random_image(15, 15, 1, 31);
        let f = LossFunction::new(LossKind::ssim(1.5));
        let a = finite_diff_gradient(&f, &x, &y, 1e-4).unwrap();
        let b = finite_diff_gradient(&f, &x, &y, 1e-5).unwrap();
        for (p, q) in a.as_slice().iter().zip(b.as_slice()) {
            assert!((p - q).abs() < 1e-5);
        }
    }

    #[test]
    fn patch_mean_gradient_matches_fd() {
        let x = random_image(9, 9, 2, 40);
        let y = random_image(9, 9, 2, 41);
        for kind in [LossKind::ssim(1.5), LossKind::mix()] {
            let f = LossFunction::new(kind).with_reduction(Reduction::PatchMean);
            let e = f.evaluate(&x, &y).unwrap();
            let fd = finite_diff_gradient(&f, &x, &y, 1e-4).unwrap();
            let near_kink = |i: usize| (x.as_slice()[i] - y.as_slice()[i]).abs() < 1e-3;
            let (err, _) =
                max_relative_error(e.gradient.as_slice(), fd.as_slice(), |i| !near_kink(i));
            assert!(err < 1e-4, "{err}");
        }
    }
}
