//! Finite-difference verification of analytic gradients, at the loss level
//! (gradient with respect to the processed patch) and at the network level
//! (gradient with respect to every parameter).

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::image::ImageBuffer;
use crate::loss::{
    finite_diff_gradient, max_relative_error, relative_error, LossFunction, LossKind,
};
use crate::network::{Architecture, ConvNet};
use crate::pipeline::seeded_uniform;

pub const LOSS_THRESHOLD: f64 = 1e-4;
pub const NETWORK_THRESHOLD: f64 = 1e-3;

/// Outcome of one gradient comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_error: f64,
    /// Where the largest error occurred.
    pub worst: Option<String>,
    pub threshold: f64,
    pub compared: usize,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.threshold
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckConfig {
    pub seed: u64,
    /// Random patch pairs per loss.
    pub patches: usize,
    pub patch_size: usize,
    pub eps: f64,
    /// Debug sabotage: each analytic entry `a` becomes
    /// `a + perturb·max(|a|, 1)`.
    pub perturb_analytic: f64,
    /// Sampled parameters per loss for the default-size network (0 skips it).
    pub net_samples: usize,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            patches: 10,
            patch_size: 31,
            eps: 1e-5,
            perturb_analytic: 0.0,
            net_samples: 24,
        }
    }
}

/// Losses covered by the loss-level check.
pub fn loss_suite() -> Vec<(String, LossKind)> {
    vec![
        ("l1".into(), LossKind::L1),
        ("l2".into(), LossKind::L2),
        ("ssim1.5".into(), LossKind::ssim(1.5)),
        ("ssim5".into(), LossKind::ssim(5.0)),
        ("ssim9".into(), LossKind::ssim(9.0)),
        ("msssim".into(), LossKind::msssim()),
        ("mix".into(), LossKind::mix()),
    ]
}

/// The five training losses (SSIM at its default σ).
pub fn training_losses() -> Vec<LossKind> {
    vec![
        LossKind::L1,
        LossKind::L2,
        LossKind::ssim(5.0),
        LossKind::msssim(),
        LossKind::mix(),
    ]
}

fn random_image(h: usize, w: usize, c: usize, seed: u64) -> ImageBuffer {
    let mut u = seeded_uniform(seed);
    ImageBuffer::from_fn(h, w, c, |_, _, _| u())
}

fn perturb(a: f64, p: f64) -> f64 {
    a + p * a.abs().max(1.0)
}

/// Kind has an absolute-value term whose kink is skipped by the comparison.
fn has_l1_term(kind: &LossKind) -> bool {
    match kind {
        LossKind::L1 => true,
        LossKind::Mix { alpha, .. } => *alpha < 1.0,
        _ => false,
    }
}

/// Analytic vs central-difference gradient with respect to the processed
/// patch, over `cfg.patches` random pairs per loss. Samples where an L1 term
/// is within `10·eps` of its kink are skipped.
pub fn loss_level(cfg: &GradcheckConfig) -> Result<Vec<CheckResult>> {
    let n = cfg.patch_size;
    let mut results = Vec::new();
    for (li, (name, kind)) in loss_suite().into_iter().enumerate() {
        let loss = LossFunction::new(kind.clone());
        let mut worst = CheckResult {
            name,
            max_rel_error: 0.0,
            worst: None,
            threshold: LOSS_THRESHOLD,
            compared: 0,
        };
        for p in 0..cfg.patches {
            let base = cfg
                .seed
                .wrapping_mul(1_000_003)
                .wrapping_add((li * 1000 + p) as u64 * 2);
            let x = random_image(n, n, 3, base);
            let y = random_image(n, n, 3, base + 1);
            let analytic: Vec<f64> = loss
                .evaluate(&x, &y)?
                .gradient
                .as_slice()
                .iter()
                .map(|&a| perturb(a, cfg.perturb_analytic))
                .collect();
            let numeric = finite_diff_gradient(&loss, &x, &y, cfg.eps)?;
            let kink = has_l1_term(&kind);
            let include =
                |i: usize| !kink || (x.as_slice()[i] - y.as_slice()[i]).abs() >= 10.0 * cfg.eps;
            worst.compared += (0..x.len()).filter(|&i| include(i)).count();
            let (err, idx) = max_relative_error(&analytic, numeric.as_slice(), include);
            if worst.worst.is_none() || err > worst.max_rel_error {
                worst.max_rel_error = err;
                worst.worst = idx.map(|i| {
                    let c = i % 3;
                    let px = i / 3;
                    format!("patch {p}, pixel ({}, {}), channel {c}", px / n, px % n)
                });
            }
        }
        results.push(worst);
    }
    Ok(results)
}

/// Compares `∂loss(net(x), y)/∂θ` with central differences for the given
/// parameter indices.
pub fn network_gradient_check(
    net: &ConvNet,
    x: &ImageBuffer,
    y: &ImageBuffer,
    loss: &LossFunction,
    indices: &[usize],
    eps: f64,
    perturb_analytic: f64,
) -> Result<(f64, Option<usize>)> {
    let mut net = net.clone();
    net.zero_grad();
    let out = net.forward(x)?;
    let e = loss.evaluate(&out, y)?;
    net.backward(&e.gradient)?;
    let mut worst = (0.0, None);
    let mut probe = net.clone();
    for &idx in indices {
        let analytic = perturb(net.gradient(idx), perturb_analytic);
        let orig = net.parameter(idx);
        probe.set_parameter(idx, orig + eps);
        let plus = loss.value(&probe.predict(x)?, y)?;
        probe.set_parameter(idx, orig - eps);
        let minus = loss.value(&probe.predict(x)?, y)?;
        probe.set_parameter(idx, orig);
        let err = relative_error(analytic, (plus - minus) / (2.0 * eps));
        if worst.1.is_none() || err > worst.0 {
            worst = (err, Some(idx));
        }
    }
    Ok(worst)
}

/// Network-level checks for each training loss: every parameter of a
/// two-layer toy net (3×3 convs, 5×5 input), then `cfg.net_samples`
/// randomly chosen parameters of the default net on a `patch_size` pair.
pub fn network_level(cfg: &GradcheckConfig) -> Result<Vec<CheckResult>> {
    let mut results = Vec::new();
    let toy = ConvNet::new(&Architecture::toy(3, 4), cfg.seed)?;
    let tx = random_image(5, 5, 3, cfg.seed ^ 0x51);
    let ty = random_image(5, 5, 3, cfg.seed ^ 0x52);
    let all: Vec<usize> = (0..toy.parameter_count()).collect();
    for kind in training_losses() {
        let loss = LossFunction::new(kind.clone());
        let (err, idx) =
            network_gradient_check(&toy, &tx, &ty, &loss, &all, cfg.eps, cfg.perturb_analytic)?;
        results.push(CheckResult {
            name: format!("toy-net/{kind}"),
            max_rel_error: err,
            worst: idx.map(|i| toy.parameter_name(i)),
            threshold: NETWORK_THRESHOLD,
            compared: all.len(),
        });
    }
    if cfg.net_samples > 0 {
        let n = cfg.patch_size;
        let net = ConvNet::new(&Architecture::default_net(), cfg.seed)?;
        let x = random_image(n, n, 3, cfg.seed ^ 0x61);
        let y = random_image(n, n, 3, cfg.seed ^ 0x62);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x63);
        let count = net.parameter_count();
        let mut indices = sample(&mut rng, count, cfg.net_samples.min(count)).into_vec();
        indices.sort_unstable();
        for kind in training_losses() {
            let loss = LossFunction::new(kind.clone());
            let (err, idx) = network_gradient_check(
                &net,
                &x,
                &y,
                &loss,
                &indices,
                cfg.eps,
                cfg.perturb_analytic,
            )?;
            results.push(CheckResult {
                name: format!("default-net/{kind}"),
                max_rel_error: err,
                worst: idx.map(|i| net.parameter_name(i)),
                threshold: NETWORK_THRESHOLD,
                compared: indices.len(),
            });
        }
    }
    Ok(results)
}
