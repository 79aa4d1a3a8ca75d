//! Window-size and uniform-bias behaviour of SSIM on synthetic signals.

use std::fmt::Write;

use imgloss::loss::{ssim_point, SsimConstants};
use imgloss::metrics::ssim_map;
use imgloss::{ImageBuffer, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Noisy vertical step edge: columns left of `width / 2` hold `low`, the rest
/// `high`; each draw adds i.i.d. Gaussian noise to every pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeDemo {
    pub sigmas: Vec<f64>,
    pub height: usize,
    pub width: usize,
    pub low: f64,
    pub high: f64,
    pub noise_sd: f64,
    pub draws: usize,
    pub seed: u64,
}

impl Default for EdgeDemo {
    fn default() -> Self {
        Self {
            sigmas: vec![1.0, 3.0, 9.0],
            height: 128,
            width: 64,
            low: 0.3,
            high: 0.7,
            noise_sd: 0.15,
            draws: 200,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EdgeProfile {
    pub sigmas: Vec<f64>,
    /// Last column of the dark side.
    pub edge_column: usize,
    /// `mean_ssim[col][s]`: SSIM averaged over rows and draws.
    pub mean_ssim: Vec<Vec<f64>>,
}

impl EdgeProfile {
    pub fn at_edge(&self) -> &[f64] {
        &self.mean_ssim[self.edge_column]
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("column,offset");
        for sigma in &self.sigmas {
            let _ = write!(s, ",ssim_sigma{sigma}");
        }
        s.push('\n');
        for (col, row) in self.mean_ssim.iter().enumerate() {
            let _ = write!(s, "{col},{}", col as isize - self.edge_column as isize);
            for v in row {
                let _ = write!(s, ",{v}");
            }
            s.push('\n');
        }
        s
    }
}

/// SSIM map of noisy vs clean step for each σ, averaged over rows and draws.
pub fn edge_profile(cfg: &EdgeDemo) -> Result<EdgeProfile> {
    let edge = cfg.width / 2;
    let clean = ImageBuffer::from_fn(cfg.height, cfg.width, 1, |_, c, _| {
        if c < edge {
            cfg.low
        } else {
            cfg.high
        }
    });
    let mut sums = vec![vec![0.0; cfg.sigmas.len()]; cfg.width];
    let c = SsimConstants::default();
    for d in 0..cfg.draws {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(d as u64));
        let noisy = clean.map(|v| {
            let n: f64 = StandardNormal.sample(&mut rng);
            v + cfg.noise_sd * n
        });
        for (s, &sigma) in cfg.sigmas.iter().enumerate() {
            let map = ssim_map(&noisy, &clean, sigma, c)?;
            for r in 0..cfg.height {
                for (col, acc) in sums.iter_mut().enumerate() {
                    acc[s] += map.get(r, col, 0);
                }
            }
        }
    }
    let n = (cfg.draws * cfg.height) as f64;
    Ok(EdgeProfile {
        sigmas: cfg.sigmas.clone(),
        edge_column: edge - 1,
        mean_ssim: sums
            .into_iter()
            .map(|row| row.into_iter().map(|v| v / n).collect())
            .collect(),
    })
}

/// One point of the bias sweep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BiasPoint {
    pub background: f64,
    /// SSIM between a constant patch at `background` and the same patch
    /// shifted by the bias.
    pub ssim: f64,
    /// `(2c(c+b) + C1) / (c² + (c+b)² + C1)`.
    pub closed_form: f64,
}

/// Backgrounds `0.1, 0.2, …, 0.8`.
pub fn default_backgrounds() -> Vec<f64> {
    (1..=8).map(|i| i as f64 / 10.0).collect()
}

/// SSIM of constant patches against a uniformly biased copy.
pub fn bias_sweep(backgrounds: &[f64], bias: f64, sigma: f64) -> Result<Vec<BiasPoint>> {
    let c = SsimConstants::default();
    let n = 31;
    backgrounds
        .iter()
        .map(|&bg| {
            let x = ImageBuffer::filled(n, n, 1, bg);
            let y = ImageBuffer::filled(n, n, 1, bg + bias);
            let ssim = ssim_point(&y, &x, (n / 2, n / 2), sigma, c)?.ssim[0];
            let shifted = bg + bias;
            let closed_form = (2.0 * bg * shifted + c.c1) / (bg * bg + shifted * shifted + c.c1);
            Ok(BiasPoint {
                background: bg,
                ssim,
                closed_form,
            })
        })
        .collect()
}

pub fn bias_csv(points: &[BiasPoint]) -> String {
    let mut s = String::from("background,ssim,closed_form\n");
    for p in points {
        let _ = writeln!(s, "{},{},{}", p.background, p.ssim, p.closed_form);
    }
    s
}
