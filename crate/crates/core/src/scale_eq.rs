//! Scale-equivariance measure over features of one image computed at several
//! input resolutions.
//!
//! All maps are standardized with the per-channel statistics of a reference
//! map, resampled to the reference grid and compared position by position:
//! the result is the variance across scales averaged over positions and
//! channels. [`Direction::Down`] (the default) uses the smallest map as the
//! reference; [`Direction::Up`] uses the largest.
//!
//! Reference statistics use the population variance; the variance across
//! scales uses the unbiased `n − 1` divisor, so that maps of independent
//! standardized noise score close to 1.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Result};
use crate::fmap::FeatureMap;
use crate::synth::ImageSource;

pub const STD_EPSILON: f64 = 1e-8;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    #[default]
    Down,
    Up,
}

impl std::str::FromStr for Direction {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "down" => Ok(Direction::Down),
            "up" => Ok(Direction::Up),
            other => Err(format!("unknown direction {other:?} (expected up or down)")),
        }
    }
}

pub fn scale_variance(maps: &[FeatureMap], direction: Direction) -> Result<f64> {
    if maps.len() < 2 {
        return invalid(format!("need at least two maps, got {}", maps.len()));
    }
    let c = maps[0].channels();
    if maps.iter().any(|m| m.channels() != c) {
        return shape_err("maps disagree on channel count");
    }

    let size = |m: &FeatureMap| m.data().len();
    let (reference, target_h, target_w) = match direction {
        Direction::Down => {
            let r = maps.iter().reduce(|a, b| if size(b) < size(a) { b } else { a }).unwrap();
            let h = maps.iter().map(FeatureMap::height).min().unwrap();
            let w = maps.iter().map(FeatureMap::width).min().unwrap();
            (r, h, w)
        }
        Direction::Up => {
            let r = maps.iter().reduce(|a, b| if size(b) > size(a) { b } else { a }).unwrap();
            let h = maps.iter().map(FeatureMap::height).max().unwrap();
            let w = maps.iter().map(FeatureMap::width).max().unwrap();
            (r, h, w)
        }
    };

    let stats = reference.channel_stats();
    let denom: Vec<f64> = stats.std().iter().map(|s| s + STD_EPSILON).collect();
    let resized: Vec<FeatureMap> = maps
        .iter()
        .map(|m| {
            let normalized = FeatureMap::new(
                m.height(),
                m.width(),
                c,
                m.data()
                    .iter()
                    .enumerate()
                    .map(|(i, v)| (v - stats.mean[i % c]) / denom[i % c])
                    .collect(),
            )?;
            normalized.bilinear_resize(target_h, target_w)
        })
        .collect::<Result<_>>()?;

    let n = resized.len() as f64;
    let len = target_h * target_w * c;
    let mut total = 0.0;
    for i in 0..len {
        // shifted by the first sample: exact zero for identical values
        let x0 = resized[0].data()[i];
        let (s, ss) = resized.iter().fold((0.0, 0.0), |(s, ss), m| {
            let d = m.data()[i] - x0;
            (s + d, ss + d * d)
        });
        total += (ss - s * s / n).max(0.0) / (n - 1.0);
    }
    Ok(total / len as f64)
}

/// Produces a patch-feature grid from an RGB image.
pub trait FeatureGenerator {
    fn features(&self, image: &FeatureMap) -> Result<FeatureMap>;
}

impl<F> FeatureGenerator for F
where
    F: Fn(&FeatureMap) -> Result<FeatureMap>,
{
    fn features(&self, image: &FeatureMap) -> Result<FeatureMap> {
        self(image)
    }
}

/// Runs the inner generator on `tile × tile` pixel tiles and stitches the
/// feature grids back together, emulating high-resolution inference by tiling.
pub struct Tiled<G> {
    pub inner: G,
    pub tile: usize,
}

impl<G: FeatureGenerator> FeatureGenerator for Tiled<G> {
    fn features(&self, image: &FeatureMap) -> Result<FeatureMap> {
        let t = self.tile;
        if t == 0 || !image.height().is_multiple_of(t) || !image.width().is_multiple_of(t) {
            return invalid(format!(
                "{}x{} image does not split into {t}-pixel tiles",
                image.height(),
                image.width()
            ));
        }
        let (ty, tx) = (image.height() / t, image.width() / t);
        let mut out: Option<FeatureMap> = None;
        for i in 0..ty {
            for j in 0..tx {
                let f = self.inner.features(&image.crop(i * t, j * t, t, t)?)?;
                let canvas = match &mut out {
                    Some(c) => c,
                    None => out.insert(FeatureMap::zeros(
                        f.height() * ty,
                        f.width() * tx,
                        f.channels(),
                    )?),
                };
                canvas.paste(&f, i * f.height(), j * f.width())?;
            }
        }
        Ok(out.expect("at least one tile"))
    }
}

/// Switches between two generators at an input-resolution threshold: images
/// with height `<= threshold` go to `low`, larger ones to `high`.
pub struct ResolutionSwitch<A, B> {
    pub low: A,
    pub high: B,
    pub threshold: usize,
}

impl<A: FeatureGenerator, B: FeatureGenerator> FeatureGenerator for ResolutionSwitch<A, B> {
    fn features(&self, image: &FeatureMap) -> Result<FeatureMap> {
        if image.height() <= self.threshold {
            self.low.features(image)
        } else {
            self.high.features(image)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ladders {
    pub fine: Vec<usize>,
    pub coarse: Vec<usize>,
}

impl Ladders {
    /// Fine: `lo..=hi` in steps of `step`. Coarse: multiples of `lo` up to `coarse_hi`.
    pub fn new(lo: usize, hi: usize, step: usize, coarse_hi: usize) -> Self {
        Self {
            fine: (lo..=hi).step_by(step.max(1)).collect(),
            coarse: (1..=coarse_hi / lo.max(1)).map(|k| k * lo).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteResult {
    /// Corpus mean over the fine ladder; `None` when the ladder is empty.
    pub fine: Option<f64>,
    pub coarse: Option<f64>,
    pub per_image_fine: Vec<f64>,
    pub per_image_coarse: Vec<f64>,
}

/// Scale variance of one image's features across a resolution ladder.
pub fn image_scale_variance<I: ImageSource + ?Sized>(
    generator: &dyn FeatureGenerator,
    image: &I,
    resolutions: &[usize],
    direction: Direction,
) -> Result<f64> {
    let maps = resolutions
        .iter()
        .map(|&r| generator.features(&image.render(r)?))
        .collect::<Result<Vec<_>>>()?;
    scale_variance(&maps, direction)
}

pub fn equivariance_suite<I: ImageSource>(
    generator: &dyn FeatureGenerator,
    images: &[I],
    ladders: &Ladders,
    direction: Direction,
) -> Result<SuiteResult> {
    if images.is_empty() {
        return invalid("empty image corpus");
    }
    let run = |ladder: &[usize]| -> Result<Vec<f64>> {
        if ladder.is_empty() {
            return Ok(Vec::new());
        }
        images
            .iter()
            .map(|img| image_scale_variance(generator, img, ladder, direction))
            .collect()
    };
    let per_image_fine = run(&ladders.fine)?;
    let per_image_coarse = run(&ladders.coarse)?;
    let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
    Ok(SuiteResult {
        fine: mean(&per_image_fine),
        coarse: mean(&per_image_coarse),
        per_image_fine,
        per_image_coarse,
    })
}
