//! Procedural blob segmentation data.

use mdunet::train::{Dataset, Sample};
use mdunet::{Shape, Tensor};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub count: usize,
    /// Square side length.
    pub size: usize,
    /// Amplitude of uniform noise in [-noise, noise].
    pub noise: f32,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            count: 100,
            size: 64,
            noise: 0.1,
            seed: 7,
        }
    }
}

fn render_mask(rng: &mut ChaCha8Rng, size: usize) -> Vec<u8> {
    let mut mask = vec![0u8; size * size];
    let s = size as f32;
    for _ in 0..rng.gen_range(1..=4) {
        let cx = rng.gen_range(0.15 * s..0.85 * s);
        let cy = rng.gen_range(0.15 * s..0.85 * s);
        let rx = rng.gen_range(0.06 * s..0.2 * s);
        let ry = rng.gen_range(0.06 * s..0.2 * s);
        let ellipse = rng.gen_bool(0.5);
        for y in 0..size {
            for x in 0..size {
                let dx = (x as f32 + 0.5 - cx) / rx;
                let dy = (y as f32 + 0.5 - cy) / ry;
                let inside = if ellipse {
                    dx * dx + dy * dy <= 1.0
                } else {
                    dx.abs() <= 1.0 && dy.abs() <= 1.0
                };
                if inside {
                    mask[y * size + x] = 1;
                }
            }
        }
    }
    mask
}

/// Deterministic for a fixed spec.
pub fn synth_dataset(spec: &SynthSpec) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.size;
    let samples = (0..spec.count)
        .map(|_| {
            let mask = render_mask(&mut rng, n);
            let image: Vec<f32> = mask
                .iter()
                .map(|&m| {
                    let noise = if spec.noise > 0.0 {
                        rng.gen_range(-spec.noise..=spec.noise)
                    } else {
                        0.0
                    };
                    (m as f32 * 0.8 + 0.2 + noise).clamp(0.0, 1.0)
                })
                .collect();
            let image = Tensor::from_vec(Shape::new(1, 1, n, n), image).expect("square image");
            Sample::new(image, mask).expect("mask matches image")
        })
        .collect();
    Dataset::new(samples).expect("uniform sample shapes")
}
