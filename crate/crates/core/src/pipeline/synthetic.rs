//! Deterministic procedural RGB scenes for training and tests.
//!
//! A scene is a smooth colour gradient overlaid with a few flat rectangles and
//! discs (hard edges) and a low-amplitude sinusoidal texture. Same seed, same
//! image.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::image::ImageBuffer;

enum Shape {
    Rect { r0: f64, c0: f64, r1: f64, c1: f64 },
    Disc { r: f64, c: f64, radius: f64 },
}

impl Shape {
    fn contains(&self, r: f64, c: f64) -> bool {
        match *self {
            Shape::Rect { r0, c0, r1, c1 } => r >= r0 && r < r1 && c >= c0 && c < c1,
            Shape::Disc {
                r: cr,
                c: cc,
                radius,
            } => (r - cr).powi(2) + (c - cc).powi(2) <= radius * radius,
        }
    }
}

/// Procedural `height`×`width` RGB scene in `[0, 1]`.
pub fn scene(height: usize, width: usize, seed: u64) -> ImageBuffer {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (height as f64, width as f64);
    let color = |rng: &mut ChaCha8Rng| {
        [
            rng.random::<f64>(),
            rng.random::<f64>(),
            rng.random::<f64>(),
        ]
    };

    let corner0 = color(&mut rng);
    let corner1 = color(&mut rng);
    let angle = rng.random::<f64>() * std::f64::consts::TAU;
    let (dr, dc) = (angle.sin(), angle.cos());

    let n_shapes = rng.random_range(3..=7);
    let shapes: Vec<(Shape, [f64; 3])> = (0..n_shapes)
        .map(|_| {
            let shape = if rng.random::<bool>() {
                let r0 = rng.random::<f64>() * h;
                let c0 = rng.random::<f64>() * w;
                let r1 = r0 + (0.15 + 0.45 * rng.random::<f64>()) * h;
                let c1 = c0 + (0.15 + 0.45 * rng.random::<f64>()) * w;
                Shape::Rect { r0, c0, r1, c1 }
            } else {
                Shape::Disc {
                    r: rng.random::<f64>() * h,
                    c: rng.random::<f64>() * w,
                    radius: (0.08 + 0.25 * rng.random::<f64>()) * h.min(w),
                }
            };
            (shape, color(&mut rng))
        })
        .collect();

    let freq = 0.15 + 0.6 * rng.random::<f64>();
    let tex_angle = rng.random::<f64>() * std::f64::consts::TAU;
    let (tr, tc) = (tex_angle.sin() * freq, tex_angle.cos() * freq);
    let amp = 0.03 + 0.07 * rng.random::<f64>();

    ImageBuffer::from_fn(height, width, 3, |r, c, k| {
        let (rf, cf) = (r as f64, c as f64);
        let t = ((rf / h.max(1.0) - 0.5) * dr + (cf / w.max(1.0) - 0.5) * dc + 0.5).clamp(0.0, 1.0);
        let mut v = corner0[k] * (1.0 - t) + corner1[k] * t;
        for (shape, col) in &shapes {
            if shape.contains(rf, cf) {
                v = col[k];
            }
        }
        v += amp * (rf * tr + cf * tc + k as f64).sin();
        v.clamp(0.0, 1.0)
    })
}

/// `count` scenes with seeds `seed, seed + 1, ...`.
pub fn scenes(count: usize, height: usize, width: usize, seed: u64) -> Vec<ImageBuffer> {
    (0..count as u64)
        .map(|i| scene(height, width, seed.wrapping_add(i)))
        .collect()
}
