//! Procedural images used when no dataset is supplied.

use std::f64::consts::PI;

use crate::image::ImageBuffer;
use crate::prng::Prng;

/// Smooth colour ramp overlaid with four random discs and a striped patch in
/// the upper right, so the image has flat regions, hard edges and a band of
/// high frequency content.
pub fn test_image(height: usize, width: usize, seed: u64) -> ImageBuffer {
    let mut rng = Prng::new(seed);
    let discs: Vec<(f64, f64, f64, [f64; 3])> = (0..4)
        .map(|_| {
            let cx = rng.uniform_in(0.2, 0.8);
            let cy = rng.uniform_in(0.2, 0.8);
            let r = rng.uniform_in(0.08, 0.25);
            (cx, cy, r, [rng.uniform(), rng.uniform(), rng.uniform()])
        })
        .collect();
    let mut data = Vec::with_capacity(height * width * 3);
    for i in 0..height {
        for j in 0..width {
            let y = (i as f64 + 0.5) / height as f64;
            let x = (j as f64 + 0.5) / width as f64;
            let mut px = [0.3 + 0.4 * x, 0.2 + 0.5 * y, 0.6 - 0.3 * x * y];
            for (cx, cy, r, col) in &discs {
                if (x - cx).powi(2) + (y - cy).powi(2) < r * r {
                    px = *col;
                }
            }
            if x > 0.55 && y < 0.4 {
                let s = (2.0 * PI * 6.0 * x).sin();
                px = [0.5 + 0.4 * s, 0.5 + 0.2 * s, 0.5 - 0.2 * s];
            }
            data.extend(px);
        }
    }
    ImageBuffer::new(width, height, 3, data).expect("sizes consistent")
}

/// `count` small RGB images: a random linear colour gradient with one disc
/// and one axis-aligned bar of random colours.
pub fn synthetic_dataset(count: usize, size: usize, seed: u64) -> Vec<ImageBuffer> {
    let mut rng = Prng::new(seed);
    (0..count)
        .map(|_| {
            let base: [f64; 3] = [rng.uniform(), rng.uniform(), rng.uniform()];
            let slope: [f64; 3] = [rng.uniform_in(-0.4, 0.4), rng.uniform_in(-0.4, 0.4), rng.uniform_in(-0.4, 0.4)];
            let angle = rng.uniform_in(0.0, 2.0 * PI);
            let (dx, dy) = (angle.cos(), angle.sin());
            let (cx, cy, r) = (rng.uniform_in(0.25, 0.75), rng.uniform_in(0.25, 0.75), rng.uniform_in(0.1, 0.3));
            let disc: [f64; 3] = [rng.uniform(), rng.uniform(), rng.uniform()];
            let horizontal = rng.uniform() < 0.5;
            let (b0, bw) = (rng.uniform_in(0.0, 0.8), rng.uniform_in(0.1, 0.25));
            let bar: [f64; 3] = [rng.uniform(), rng.uniform(), rng.uniform()];
            let mut data = Vec::with_capacity(size * size * 3);
            for i in 0..size {
                for j in 0..size {
                    let y = (i as f64 + 0.5) / size as f64;
                    let x = (j as f64 + 0.5) / size as f64;
                    let t = (x - 0.5) * dx + (y - 0.5) * dy;
                    let mut px = [base[0] + slope[0] * t, base[1] + slope[1] * t, base[2] + slope[2] * t];
                    let along = if horizontal { y } else { x };
                    if along >= b0 && along < b0 + bw {
                        px = bar;
                    }
                    if (x - cx).powi(2) + (y - cy).powi(2) < r * r {
                        px = disc;
                    }
                    data.extend(px);
                }
            }
            ImageBuffer::new(size, size, 3, data).expect("sizes consistent")
        })
        .collect()
}

/// Pixel-wise mean of equally sized images.
pub fn mean_image(images: &[ImageBuffer]) -> Option<ImageBuffer> {
    let first = images.first()?;
    let mut acc = vec![0.0; first.data.len()];
    for img in images {
        for (a, v) in acc.iter_mut().zip(&img.data) {
            *a += v;
        }
    }
    let n = images.len() as f64;
    ImageBuffer::new(first.width, first.height, first.channels, acc.into_iter().map(|a| a / n).collect()).ok()
}
