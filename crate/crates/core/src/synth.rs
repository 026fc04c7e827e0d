//! Synthetic shape scenes with exact boundary labels.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::datapipe::Sample;
use crate::tensor::Tensor;

/// Region label map: 0 is background, shapes are painted in order `1..`.
fn label_map(size: usize, shapes: usize, rng: &mut ChaCha8Rng) -> Vec<u8> {
    let mut labels = vec![0u8; size * size];
    let s = size as f64;
    for k in 1..=shapes as u8 {
        let (cy, cx) = (
            rng.random_range(0.15..0.85) * s,
            rng.random_range(0.15..0.85) * s,
        );
        let (ry, rx) = (
            rng.random_range(0.1..0.3) * s,
            rng.random_range(0.1..0.3) * s,
        );
        let ellipse = rng.random_bool(0.5);
        for y in 0..size {
            for x in 0..size {
                let (dy, dx) = ((y as f64 + 0.5 - cy) / ry, (x as f64 + 0.5 - cx) / rx);
                let inside = if ellipse {
                    dy * dy + dx * dx <= 1.0
                } else {
                    dy.abs() <= 1.0 && dx.abs() <= 1.0
                };
                if inside {
                    labels[y * size + x] = k;
                }
            }
        }
    }
    labels
}

/// A `size × size` scene of `shapes` overlapping rectangles and ellipses,
/// each a flat color. A pixel is a boundary pixel when its right or lower
/// neighbor belongs to a different region.
pub fn shape_scene(size: usize, shapes: usize, seed: u64) -> Sample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels = label_map(size, shapes, &mut rng);
    // Palette entries are spread apart so neighboring regions always contrast.
    let palette: Vec<[f32; 3]> = (0..=shapes)
        .map(|k| {
            let base = (k as f32 + 0.5) / (shapes as f32 + 1.0);
            [0, 1, 2].map(|c| {
                let jitter = rng.random_range(-0.08f32..0.08);
                ((base + 0.37 * c as f32 + jitter).fract() * 0.9 + 0.05).clamp(0.0, 1.0)
            })
        })
        .collect();
    let image = Tensor::from_fn([3, size, size], |i| {
        let (c, p) = (i / (size * size), i % (size * size));
        palette[labels[p] as usize][c]
    });
    let gt = Tensor::from_fn([1, size, size], |p| {
        let (y, x) = (p / size, p % size);
        let l = labels[p];
        let right = x + 1 < size && labels[p + 1] != l;
        let down = y + 1 < size && labels[p + size] != l;
        (right || down) as u8 as f32
    });
    Sample::new(image, gt, format!("shapes{seed}")).expect("consistent shapes")
}

/// `n` scenes with consecutive seeds.
pub fn shape_dataset(n: usize, size: usize, seed: u64) -> Vec<Sample> {
    (0..n as u64)
        .map(|i| shape_scene(size, 3, seed.wrapping_add(i)))
        .collect()
}
