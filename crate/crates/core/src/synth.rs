//! Seeded procedural RGB images that can be rendered at any resolution.
//!
//! Each image is a continuous function on the unit square (a colour
//! gradient, a few Gaussian blobs and one soft-edged half-plane), sampled at
//! pixel centres. Rendering the same image at two resolutions therefore
//! gives two consistent views of one scene.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::fmap::FeatureMap;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Blob {
    centre: (f64, f64),
    sigma: f64,
    color: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProceduralImage {
    base: [f64; 3],
    gradient: [[f64; 3]; 2],
    blobs: Vec<Blob>,
    /// Half-plane `n·p > d` tinted with `edge_color`.
    edge_normal: (f64, f64),
    edge_offset: f64,
    edge_width: f64,
    edge_color: [f64; 3],
}

fn color(rng: &mut ChaCha8Rng, amp: f64) -> [f64; 3] {
    [
        rng.gen_range(-amp..amp),
        rng.gen_range(-amp..amp),
        rng.gen_range(-amp..amp),
    ]
}

impl ProceduralImage {
    pub fn from_seed(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let base = [
            rng.gen_range(0.3..0.7),
            rng.gen_range(0.3..0.7),
            rng.gen_range(0.3..0.7),
        ];
        let gradient = [color(&mut rng, 0.25), color(&mut rng, 0.25)];
        let blobs = (0..rng.gen_range(3..=6))
            .map(|_| Blob {
                centre: (rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)),
                sigma: rng.gen_range(0.08..0.25),
                color: color(&mut rng, 0.5),
            })
            .collect();
        let angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        Self {
            base,
            gradient,
            blobs,
            edge_normal: (angle.cos(), angle.sin()),
            edge_offset: rng.gen_range(-0.2..0.2) + 0.5 * (angle.cos() + angle.sin()),
            edge_width: 0.03,
            edge_color: color(&mut rng, 0.4),
        }
    }

    /// Colour at normalized coordinates `(u, v) ∈ [0, 1]²`, clamped to `[0, 1]`.
    pub fn sample(&self, u: f64, v: f64) -> [f64; 3] {
        let mut rgb = self.base;
        for (c, out) in rgb.iter_mut().enumerate() {
            *out += self.gradient[0][c] * (u - 0.5) + self.gradient[1][c] * (v - 0.5);
        }
        for b in &self.blobs {
            let d2 = (u - b.centre.0).powi(2) + (v - b.centre.1).powi(2);
            let w = (-d2 / (2.0 * b.sigma * b.sigma)).exp();
            for (out, c) in rgb.iter_mut().zip(b.color) {
                *out += w * c;
            }
        }
        let s = self.edge_normal.0 * u + self.edge_normal.1 * v - self.edge_offset;
        let w = 1.0 / (1.0 + (-s / self.edge_width).exp());
        for (out, c) in rgb.iter_mut().zip(self.edge_color) {
            *out = (*out + w * c).clamp(0.0, 1.0);
        }
        rgb
    }
}

/// Anything that can produce a square RGB image at a requested resolution.
pub trait ImageSource {
    fn render(&self, res: usize) -> Result<FeatureMap>;
}

impl ImageSource for ProceduralImage {
    fn render(&self, res: usize) -> Result<FeatureMap> {
        if res == 0 {
            return invalid("resolution must be positive");
        }
        let inv = 1.0 / res as f64;
        let mut data = Vec::with_capacity(res * res * 3);
        for y in 0..res {
            for x in 0..res {
                let rgb = self.sample((x as f64 + 0.5) * inv, (y as f64 + 0.5) * inv);
                data.extend_from_slice(&rgb);
            }
        }
        FeatureMap::new(res, res, 3, data)
    }
}

/// Stored images are resampled bilinearly.
impl ImageSource for FeatureMap {
    fn render(&self, res: usize) -> Result<FeatureMap> {
        self.bilinear_resize(res, res)
    }
}

/// `n` images seeded from `seed`.
pub fn corpus(seed: u64, n: usize) -> Vec<ProceduralImage> {
    (0..n as u64)
        .map(|i| ProceduralImage::from_seed(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(i)))
        .collect()
}
