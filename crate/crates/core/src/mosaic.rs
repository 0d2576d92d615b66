//! Mosaic packing: `k × k` low-resolution images share one canvas so a
//! fixed-resolution teacher labels `k²` samples per invocation, and the
//! teacher's feature grid is cropped back into per-image targets.
//!
//! Each cell is `cell` pixels wide; the sub-image sits `pad_before` pixels
//! into it. Padding is split as evenly as the patch grid allows: with a
//! 432-pixel student on a 1024 canvas the 512-pixel cells carry 80 pixels of
//! padding per axis, placed 32 before and 48 after so that crops stay on
//! 16-pixel patch boundaries.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Result};
use crate::fmap::FeatureMap;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MosaicLayout {
    pub canvas: usize,
    pub k: usize,
    pub cell: usize,
    pub sub: usize,
    pub pad_before: usize,
    pub patch: usize,
    /// Pixel offset of each sub-image inside its cell, raster order. All
    /// equal to `(pad_before, pad_before)` unless jittered.
    pub offsets: Vec<(usize, usize)>,
}

impl MosaicLayout {
    pub fn layout_for(student_res: usize, canvas: usize, patch: usize) -> Result<Self> {
        if patch == 0 {
            return invalid("patch size must be positive");
        }
        if student_res == 0 || student_res > canvas {
            return invalid(format!(
                "student resolution {student_res} must lie in 1..={canvas}"
            ));
        }
        if !student_res.is_multiple_of(patch) || !canvas.is_multiple_of(patch) {
            return invalid(format!(
                "resolution {student_res} and canvas {canvas} must be multiples of the {patch}-pixel patch"
            ));
        }
        let k = canvas / student_res;
        let cell = canvas / k / patch * patch;
        let pad_before = (cell - student_res) / 2 / patch * patch;
        Ok(Self {
            canvas,
            k,
            cell,
            sub: student_res,
            pad_before,
            patch,
            offsets: vec![(pad_before, pad_before); k * k],
        })
    }

    /// Re-draws each sub-image's position inside its cell, on the patch grid.
    pub fn with_jitter(mut self, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let slots = (self.cell - self.sub) / self.patch;
        for o in &mut self.offsets {
            let dy = rng.gen_range(0..=slots) * self.patch;
            let dx = rng.gen_range(0..=slots) * self.patch;
            *o = (dy, dx);
        }
        self
    }

    pub fn images_per_canvas(&self) -> usize {
        self.k * self.k
    }

    pub fn total_padding(&self) -> usize {
        self.cell - self.sub
    }

    /// Teacher passes per sub-image relative to padding each image onto its
    /// own canvas.
    pub fn teacher_cost_ratio(&self) -> f64 {
        1.0 / self.images_per_canvas() as f64
    }

    /// Top-left pixel of sub-image `idx` on the canvas.
    pub fn origin(&self, idx: usize) -> (usize, usize) {
        let (oy, ox) = self.offsets[idx];
        ((idx / self.k) * self.cell + oy, (idx % self.k) * self.cell + ox)
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.patch;
        if p == 0 || self.k == 0 || self.sub == 0 {
            return invalid("mosaic layout fields must be positive");
        }
        if self.k * self.cell > self.canvas || self.sub > self.cell {
            return invalid("mosaic cells do not fit the canvas");
        }
        if [self.canvas, self.cell, self.sub, self.pad_before].iter().any(|v| v % p != 0) {
            return invalid("mosaic geometry is not aligned to the patch grid");
        }
        if self.offsets.len() != self.k * self.k {
            return invalid("one offset per cell is required");
        }
        for &(oy, ox) in &self.offsets {
            if oy % p != 0 || ox % p != 0 || oy + self.sub > self.cell || ox + self.sub > self.cell {
                return invalid(format!("offset ({oy}, {ox}) misplaces a sub-image"));
            }
        }
        Ok(())
    }

    /// Places up to `k²` images (raster order) onto a `canvas × canvas`
    /// map filled with `pad_value`.
    pub fn pack(&self, images: &[FeatureMap], pad_value: f64) -> Result<FeatureMap> {
        self.validate()?;
        if images.is_empty() || images.len() > self.images_per_canvas() {
            return invalid(format!(
                "mosaic takes 1..={} images, got {}",
                self.images_per_canvas(),
                images.len()
            ));
        }
        let c = images[0].channels();
        for img in images {
            if img.shape() != (self.sub, self.sub, c) {
                return shape_err(format!(
                    "mosaic images must be {0}x{0}x{c}, got {1:?}",
                    self.sub,
                    img.shape()
                ));
            }
        }
        let mut canvas = FeatureMap::filled(self.canvas, self.canvas, c, pad_value)?;
        for (i, img) in images.iter().enumerate() {
            let (y, x) = self.origin(i);
            canvas.paste(img, y, x)?;
        }
        Ok(canvas)
    }

    /// Crops the `(sub/patch)²` token block of every sub-image out of a
    /// patch-granularity feature grid of the packed canvas.
    pub fn unpack_features(&self, features: &FeatureMap) -> Result<Vec<FeatureMap>> {
        self.validate()?;
        let grid = self.canvas / self.patch;
        if (features.height(), features.width()) != (grid, grid) {
            return shape_err(format!(
                "canvas features must be {grid}x{grid} tokens, got {}x{}",
                features.height(),
                features.width()
            ));
        }
        let side = self.sub / self.patch;
        (0..self.images_per_canvas())
            .map(|i| {
                let (y, x) = self.origin(i);
                features.crop(y / self.patch, x / self.patch, side, side)
            })
            .collect()
    }
}

/// Pads one image onto the top-left of a `canvas × canvas` map.
pub fn pad_to_canvas(image: &FeatureMap, canvas: usize, pad_value: f64) -> Result<FeatureMap> {
    if image.height() > canvas || image.width() > canvas {
        return invalid(format!(
            "image {}x{} does not fit a {canvas} canvas",
            image.height(),
            image.width()
        ));
    }
    let mut out = FeatureMap::filled(canvas, canvas, image.channels(), pad_value)?;
    out.paste(image, 0, 0)?;
    Ok(out)
}

/// Crops the token block covering an unpadded top-left `res × res` image.
pub fn crop_padded_features(features: &FeatureMap, res: usize, patch: usize) -> Result<FeatureMap> {
    if !res.is_multiple_of(patch) {
        return invalid(format!("{res} is not a multiple of the {patch}-pixel patch"));
    }
    features.crop(0, 0, res / patch, res / patch)
}
