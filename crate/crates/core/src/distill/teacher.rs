//! Procedural stand-ins for pretrained vision teachers.
//!
//! Every teacher reduces each `patch × patch` pixel block to a small
//! descriptor and maps it through a seeded random `tanh` layer:
//!
//! * [`TeacherKind::PatchStatistics`]: patch colour plus a coarse context
//!   colour taken from a fixed 4×4 summary of the whole image. The output
//!   describes image content, not pixel density, so it is consistent across
//!   resolutions.
//! * [`TeacherKind::OrientedGradient`]: patch colour plus signed and absolute
//!   luminance gradients measured in pixels. Gradient statistics depend on
//!   the sampling density, which ties this family to one resolution.
//! * [`TeacherKind::Segment`]: a high-gain map of the patch colour alone,
//!   giving near-piecewise-constant, strictly patch-local features.

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::fmap::{resize_raw, FeatureMap};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TeacherKind {
    PatchStatistics,
    OrientedGradient,
    Segment,
}

impl TeacherKind {
    fn descriptor_dim(self) -> usize {
        match self {
            TeacherKind::PatchStatistics => 6,
            TeacherKind::OrientedGradient => 7,
            TeacherKind::Segment => 3,
        }
    }

    fn gain(self) -> f64 {
        match self {
            TeacherKind::Segment => 6.0,
            _ => 1.0,
        }
    }
}

/// Input resolution a teacher accepts. Serializes as `"any"` or `{"fixed": n}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NativeRes {
    Any,
    Fixed(usize),
}

impl fmt::Display for NativeRes {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NativeRes::Any => f.write_str("any"),
            NativeRes::Fixed(n) => write!(f, "{n}"),
        }
    }
}

fn default_patch() -> usize {
    8
}

fn default_scale() -> f64 {
    1.0
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherSpec {
    pub id: String,
    pub kind: TeacherKind,
    pub native_res: NativeRes,
    pub channels: usize,
    #[serde(default = "default_patch")]
    pub patch: usize,
    #[serde(default = "default_scale")]
    pub variance_scale: f64,
    #[serde(default = "default_true")]
    pub summary: bool,
    #[serde(default)]
    pub seed: u64,
}

impl TeacherSpec {
    pub fn new(id: impl Into<String>, kind: TeacherKind, native_res: NativeRes, channels: usize) -> Self {
        Self {
            id: id.into(),
            kind,
            native_res,
            channels,
            patch: default_patch(),
            variance_scale: 1.0,
            summary: true,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.id.is_empty() {
            return invalid("teacher id must not be empty");
        }
        if !self.channels.is_power_of_two() {
            return invalid(format!(
                "teacher {}: channel count {} is not a power of two",
                self.id, self.channels
            ));
        }
        if self.patch == 0 {
            return invalid(format!("teacher {}: patch size must be positive", self.id));
        }
        if !(self.variance_scale.is_finite() && self.variance_scale > 0.0) {
            return invalid(format!(
                "teacher {}: variance_scale must be positive, got {}",
                self.id, self.variance_scale
            ));
        }
        if let NativeRes::Fixed(n) = self.native_res {
            if n == 0 || n % self.patch != 0 {
                return invalid(format!(
                    "teacher {}: native resolution {n} is not a multiple of the {}-pixel patch",
                    self.id, self.patch
                ));
            }
        }
        Ok(())
    }

    pub fn check_resolution(&self, height: usize, width: usize) -> Result<()> {
        let reject = |reason: String| {
            Err(Error::Resolution {
                teacher: self.id.clone(),
                height,
                width,
                reason,
            })
        };
        match self.native_res {
            NativeRes::Fixed(n) if (height, width) != (n, n) => {
                reject(format!("fixed native resolution is {n}x{n}"))
            }
            _ if height == 0 || width == 0 || !height.is_multiple_of(self.patch) || !width.is_multiple_of(self.patch) => {
                reject(format!("sides must be positive multiples of {}", self.patch))
            }
            _ => Ok(()),
        }
    }

    pub fn accepts(&self, height: usize, width: usize) -> bool {
        self.check_resolution(height, width).is_ok()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TeacherOutput {
    pub patch: FeatureMap,
    pub summary: Option<Vec<f64>>,
}

fn fnv1a(s: &str) -> u64 {
    s.bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// Descriptor → features map `s · (tanh(g · (W d + b)) + o)`.
#[derive(Debug, Clone)]
struct Head {
    w: Vec<f64>,
    b: Vec<f64>,
    o: Vec<f64>,
}

impl Head {
    fn draw(rng: &mut ChaCha8Rng, channels: usize, dim: usize) -> Self {
        let w = Normal::new(0.0, 2.0 / (dim as f64).sqrt()).unwrap();
        let b = Normal::new(0.0, 0.3).unwrap();
        let o = Uniform::new(-0.5, 0.5);
        Self {
            w: (0..channels * dim).map(|_| w.sample(rng)).collect(),
            b: (0..channels).map(|_| b.sample(rng)).collect(),
            o: (0..channels).map(|_| o.sample(rng)).collect(),
        }
    }

    fn apply(&self, d: &[f64], gain: f64, scale: f64, out: &mut Vec<f64>) {
        let dim = d.len();
        for (c, (&b, &o)) in self.b.iter().zip(&self.o).enumerate() {
            let z: f64 = self.w[c * dim..(c + 1) * dim].iter().zip(d).map(|(w, x)| w * x).sum::<f64>() + b;
            out.push(scale * ((gain * z).tanh() + o));
        }
    }
}

/// A teacher with its random weights drawn.
#[derive(Debug, Clone)]
pub struct Teacher {
    spec: TeacherSpec,
    patch_head: Head,
    summary_head: Head,
}

const CONTEXT_GRID: usize = 2;
const CONTEXT_GAIN: f64 = 2.0;
const GRADIENT_GAIN: f64 = 4.0;

impl Teacher {
    pub fn new(spec: TeacherSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ fnv1a(&spec.id));
        let dim = spec.kind.descriptor_dim();
        let patch_head = Head::draw(&mut rng, spec.channels, dim);
        let summary_head = Head::draw(&mut rng, spec.channels, dim);
        Ok(Self {
            spec,
            patch_head,
            summary_head,
        })
    }

    pub fn spec(&self) -> &TeacherSpec {
        &self.spec
    }

    pub fn id(&self) -> &str {
        &self.spec.id
    }

    /// Output grid side for a `res`-pixel input.
    pub fn grid(&self, res: usize) -> usize {
        res / self.spec.patch
    }

    pub fn features(&self, image: &FeatureMap) -> Result<TeacherOutput> {
        let (h, w, c) = image.shape();
        if c != 3 {
            return invalid(format!("teacher input must have 3 channels, got {c}"));
        }
        self.spec.check_resolution(h, w)?;
        let descriptors = self.descriptors(image)?;
        let (gh, gw) = (h / self.spec.patch, w / self.spec.patch);
        let dim = self.spec.kind.descriptor_dim();
        let (gain, scale) = (self.spec.kind.gain(), self.spec.variance_scale);
        let mut data = Vec::with_capacity(gh * gw * self.spec.channels);
        for d in descriptors.chunks_exact(dim) {
            self.patch_head.apply(d, gain, scale, &mut data);
        }
        let patch = FeatureMap::new(gh, gw, self.spec.channels, data)?;
        let summary = self.spec.summary.then(|| {
            let n = (gh * gw) as f64;
            let mean: Vec<f64> = (0..dim)
                .map(|k| descriptors.chunks_exact(dim).map(|d| d[k]).sum::<f64>() / n)
                .collect();
            let mut s = Vec::with_capacity(self.spec.channels);
            self.summary_head.apply(&mean, gain, scale, &mut s);
            s
        });
        Ok(TeacherOutput { patch, summary })
    }

    /// Row-major `gh × gw × dim` descriptors.
    fn descriptors(&self, image: &FeatureMap) -> Result<Vec<f64>> {
        let p = self.spec.patch;
        let colour = image.patch_pool(p)?;
        let (gh, gw) = (colour.height(), colour.width());
        let centred: Vec<f64> = colour.data().iter().map(|v| v - 0.5).collect();
        let dim = self.spec.kind.descriptor_dim();
        let mut out = Vec::with_capacity(gh * gw * dim);
        match self.spec.kind {
            TeacherKind::Segment => out = centred,
            TeacherKind::PatchStatistics => {
                let coarse = area_pool(&centred, gh, gw, 3, CONTEXT_GRID);
                let context = resize_raw(&coarse, CONTEXT_GRID, CONTEXT_GRID, 3, gh, gw);
                for (m, ctx) in centred.chunks_exact(3).zip(context.chunks_exact(3)) {
                    out.extend_from_slice(m);
                    out.extend(ctx.iter().map(|v| v * CONTEXT_GAIN));
                }
            }
            TeacherKind::OrientedGradient => {
                let (h, w) = (image.height(), image.width());
                let lum = |y: usize, x: usize| image.token(y, x).iter().sum::<f64>() / 3.0;
                for gy in 0..gh {
                    for gx in 0..gw {
                        let (mut sx, mut sy, mut ax, mut ay, mut nx, mut ny) = (0.0, 0.0, 0.0, 0.0, 0usize, 0usize);
                        for y in gy * p..(gy + 1) * p {
                            for x in gx * p..(gx + 1) * p {
                                let l = lum(y, x);
                                if x + 1 < (gx + 1) * p && x + 1 < w {
                                    let d = lum(y, x + 1) - l;
                                    sx += d;
                                    ax += d.abs();
                                    nx += 1;
                                }
                                if y + 1 < (gy + 1) * p && y + 1 < h {
                                    let d = lum(y + 1, x) - l;
                                    sy += d;
                                    ay += d.abs();
                                    ny += 1;
                                }
                            }
                        }
                        let kx = GRADIENT_GAIN * p as f64 / nx.max(1) as f64;
                        let ky = GRADIENT_GAIN * p as f64 / ny.max(1) as f64;
                        let i = (gy * gw + gx) * 3;
                        out.extend_from_slice(&centred[i..i + 3]);
                        out.extend_from_slice(&[sx * kx, sy * ky, ax * kx, ay * ky]);
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Overlap weights of `n` unit input cells onto `k` equal output bins.
fn bin_weights(n: usize, k: usize) -> Vec<Vec<(usize, f64)>> {
    let step = n as f64 / k as f64;
    (0..k)
        .map(|j| {
            let (lo, hi) = (j as f64 * step, (j + 1) as f64 * step);
            (lo.floor() as usize..(hi.ceil() as usize).min(n))
                .filter_map(|i| {
                    let w = (hi.min(i as f64 + 1.0) - lo.max(i as f64)) / step;
                    (w > 0.0).then_some((i, w))
                })
                .collect()
        })
        .collect()
}

/// Area-average pooling of an `h × w × c` grid onto `k × k` bins.
fn area_pool(src: &[f64], h: usize, w: usize, c: usize, k: usize) -> Vec<f64> {
    let (wy, wx) = (bin_weights(h, k), bin_weights(w, k));
    let mut out = vec![0.0; k * k * c];
    for (by, ys) in wy.iter().enumerate() {
        for (bx, xs) in wx.iter().enumerate() {
            let dst = &mut out[(by * k + bx) * c..(by * k + bx + 1) * c];
            for &(y, a) in ys {
                for &(x, b) in xs {
                    for (o, v) in dst.iter_mut().zip(&src[(y * w + x) * c..(y * w + x + 1) * c]) {
                        *o += a * b * v;
                    }
                }
            }
        }
    }
    out
}

/// Builds the teacher described by `spec` and runs it on `image`.
pub fn teacher_features(spec: &TeacherSpec, image: &FeatureMap) -> Result<TeacherOutput> {
    Teacher::new(spec.clone())?.features(image)
}
