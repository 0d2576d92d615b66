//! Dense `H × W × C` feature grids and the resampling/statistics shared by
//! every other module.
//!
//! Values are stored row-major in `(h, w, c)` order as `f64`. Variances are
//! population variances (divisor `N`) throughout the crate.

use crate::error::{invalid, shape_err, Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return shape_err(format!(
                "feature map dimensions must be positive, got {height}x{width}x{channels}"
            ));
        }
        let expected = height
            .checked_mul(width)
            .and_then(|n| n.checked_mul(channels))
            .ok_or_else(|| Error::Shape("feature map size overflows".into()))?;
        if data.len() != expected {
            return shape_err(format!(
                "data length {} does not match {height}x{width}x{channels}",
                data.len()
            ));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return invalid(format!("non-finite value {} at flat index {i}", data[i]));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Result<Self> {
        let n = height.saturating_mul(width).saturating_mul(channels);
        Self::new(height, width, channels, vec![value; n])
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Result<Self> {
        Self::filled(height, width, channels, 0.0)
    }

    /// Builds a map by evaluating `f(y, x, c)` at every element.
    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(y, x, c));
                }
            }
        }
        Self::new(height, width, channels, data)
    }

    /// Builds a map from token vectors laid out in raster order.
    pub fn from_tokens(height: usize, width: usize, tokens: &[Vec<f64>]) -> Result<Self> {
        let channels = tokens.first().map_or(0, Vec::len);
        if tokens.iter().any(|t| t.len() != channels) {
            return shape_err("tokens have differing lengths");
        }
        Self::new(height, width, channels, tokens.concat())
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn num_tokens(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    fn offset(&self, y: usize, x: usize) -> usize {
        (y * self.width + x) * self.channels
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[self.offset(y, x) + c]
    }

    pub fn set(&mut self, y: usize, x: usize, c: usize, value: f64) {
        let i = self.offset(y, x) + c;
        self.data[i] = value;
    }

    /// The channel vector at `(y, x)`.
    pub fn token(&self, y: usize, x: usize) -> &[f64] {
        let o = self.offset(y, x);
        &self.data[o..o + self.channels]
    }

    pub fn token_mut(&mut self, y: usize, x: usize) -> &mut [f64] {
        let o = self.offset(y, x);
        let c = self.channels;
        &mut self.data[o..o + c]
    }

    /// Token vectors in raster order.
    pub fn tokens(&self) -> std::slice::ChunksExact<'_, f64> {
        self.data.chunks_exact(self.channels)
    }

    /// Applies `f` elementwise. Panics if `f` produces a non-finite value.
    pub fn map(&self, mut f: impl FnMut(f64) -> f64) -> FeatureMap {
        let data: Vec<f64> = self.data.iter().map(|&v| f(v)).collect();
        assert!(data.iter().all(|v| v.is_finite()), "map produced a non-finite value");
        FeatureMap { data, ..*self }
    }

    pub fn scaled(&self, factor: f64) -> FeatureMap {
        self.map(|v| v * factor)
    }

    /// Elementwise `a·self + b·other`.
    pub fn axpby(&self, a: f64, other: &FeatureMap, b: f64) -> Result<FeatureMap> {
        self.require_same_shape(other)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(x, y)| a * x + b * y)
            .collect();
        FeatureMap::new(self.height, self.width, self.channels, data)
    }

    pub fn require_same_shape(&self, other: &FeatureMap) -> Result<()> {
        if self.shape() != other.shape() {
            return shape_err(format!(
                "expected {:?}, got {:?}",
                self.shape(),
                other.shape()
            ));
        }
        Ok(())
    }

    /// Mean squared difference over every position and channel.
    pub fn mse(&self, other: &FeatureMap) -> Result<f64> {
        self.require_same_shape(other)?;
        let sse: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        Ok(sse / self.data.len() as f64)
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// Copies the `h × w` window whose top-left corner is `(y0, x0)`.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<FeatureMap> {
        if y0 + h > self.height || x0 + w > self.width {
            return shape_err(format!(
                "crop {h}x{w} at ({y0},{x0}) exceeds {}x{}",
                self.height, self.width
            ));
        }
        let mut data = Vec::with_capacity(h * w * self.channels);
        for y in y0..y0 + h {
            let start = self.offset(y, x0);
            data.extend_from_slice(&self.data[start..start + w * self.channels]);
        }
        FeatureMap::new(h, w, self.channels, data)
    }

    /// Writes `src` into `self` with its top-left corner at `(y0, x0)`.
    pub fn paste(&mut self, src: &FeatureMap, y0: usize, x0: usize) -> Result<()> {
        if src.channels != self.channels {
            return shape_err("paste channel mismatch");
        }
        if y0 + src.height > self.height || x0 + src.width > self.width {
            return shape_err(format!(
                "paste {}x{} at ({y0},{x0}) exceeds {}x{}",
                src.height, src.width, self.height, self.width
            ));
        }
        let row = src.width * src.channels;
        for y in 0..src.height {
            let dst = self.offset(y0 + y, x0);
            let s = src.offset(y, 0);
            self.data[dst..dst + row].copy_from_slice(&src.data[s..s + row]);
        }
        Ok(())
    }

    /// Non-overlapping average pooling over `patch × patch` blocks.
    pub fn patch_pool(&self, patch: usize) -> Result<FeatureMap> {
        if patch == 0 || !self.height.is_multiple_of(patch) || !self.width.is_multiple_of(patch) {
            return invalid(format!(
                "{}x{} is not divisible into {patch}-pixel patches",
                self.height, self.width
            ));
        }
        let (gh, gw, c) = (self.height / patch, self.width / patch, self.channels);
        let mut out = vec![0.0; gh * gw * c];
        let norm = 1.0 / (patch * patch) as f64;
        for gy in 0..gh {
            for gx in 0..gw {
                let dst = &mut out[(gy * gw + gx) * c..(gy * gw + gx + 1) * c];
                for y in gy * patch..(gy + 1) * patch {
                    for x in gx * patch..(gx + 1) * patch {
                        for (d, v) in dst.iter_mut().zip(self.token(y, x)) {
                            *d += v;
                        }
                    }
                }
                dst.iter_mut().for_each(|d| *d *= norm);
            }
        }
        FeatureMap::new(gh, gw, c, out)
    }

    pub fn bilinear_resize(&self, out_h: usize, out_w: usize) -> Result<FeatureMap> {
        bilinear_resize(self, out_h, out_w)
    }

    pub fn channel_stats(&self) -> ChannelStats {
        channel_stats(self)
    }
}

/// Per-channel mean and population variance over all spatial positions.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
}

impl ChannelStats {
    pub fn std(&self) -> Vec<f64> {
        self.variance.iter().map(|v| v.sqrt()).collect()
    }

    pub fn total_variance(&self) -> f64 {
        self.variance.iter().sum()
    }
}

pub fn channel_stats(map: &FeatureMap) -> ChannelStats {
    let c = map.channels;
    let n = map.num_tokens() as f64;
    let mut mean = vec![0.0; c];
    for t in map.tokens() {
        for (m, v) in mean.iter_mut().zip(t) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut variance = vec![0.0; c];
    for t in map.tokens() {
        for ((s, v), m) in variance.iter_mut().zip(t).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    variance.iter_mut().for_each(|s| *s /= n);
    ChannelStats { mean, variance }
}

/// Two-tap linear interpolation weights along one axis, half-pixel centres,
/// source coordinates clamped to the valid range.
#[derive(Debug, Clone)]
pub(crate) struct AxisTaps {
    pub lo: Vec<usize>,
    pub hi: Vec<usize>,
    pub w_hi: Vec<f64>,
}

impl AxisTaps {
    pub fn new(src: usize, dst: usize) -> Self {
        let scale = src as f64 / dst as f64;
        let mut lo = Vec::with_capacity(dst);
        let mut hi = Vec::with_capacity(dst);
        let mut w_hi = Vec::with_capacity(dst);
        for i in 0..dst {
            let s = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (s.floor() as usize).min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            lo.push(i0);
            hi.push(i1);
            w_hi.push(if i1 == i0 { 0.0 } else { s - i0 as f64 });
        }
        Self { lo, hi, w_hi }
    }
}

pub fn bilinear_resize(src: &FeatureMap, out_h: usize, out_w: usize) -> Result<FeatureMap> {
    if out_h == 0 || out_w == 0 {
        return invalid(format!("resize target {out_h}x{out_w} must be positive"));
    }
    if src.data.is_empty() {
        return invalid("cannot resize an empty map");
    }
    if (out_h, out_w) == (src.height, src.width) {
        return Ok(src.clone());
    }
    let data = resize_raw(
        &src.data,
        src.height,
        src.width,
        src.channels,
        out_h,
        out_w,
    );
    FeatureMap::new(out_h, out_w, src.channels, data)
}

/// Resizes a raw `(h, w, c)` buffer; shared with the training code, which
/// also needs the adjoint below.
pub(crate) fn resize_raw(
    src: &[f64],
    h: usize,
    w: usize,
    c: usize,
    out_h: usize,
    out_w: usize,
) -> Vec<f64> {
    let ty = AxisTaps::new(h, out_h);
    let tx = AxisTaps::new(w, out_w);
    let mut out = vec![0.0; out_h * out_w * c];
    for y in 0..out_h {
        let (y0, y1, wy) = (ty.lo[y], ty.hi[y], ty.w_hi[y]);
        for x in 0..out_w {
            let (x0, x1, wx) = (tx.lo[x], tx.hi[x], tx.w_hi[x]);
            let p00 = (y0 * w + x0) * c;
            let p01 = (y0 * w + x1) * c;
            let p10 = (y1 * w + x0) * c;
            let p11 = (y1 * w + x1) * c;
            let dst = (y * out_w + x) * c;
            for k in 0..c {
                let top = (1.0 - wx) * src[p00 + k] + wx * src[p01 + k];
                let bottom = (1.0 - wx) * src[p10 + k] + wx * src[p11 + k];
                out[dst + k] = (1.0 - wy) * top + wy * bottom;
            }
        }
    }
    out
}

/// Transpose of [`resize_raw`]: scatters output-space gradients back onto
/// the source grid.
pub(crate) fn resize_adjoint_raw(
    grad_out: &[f64],
    h: usize,
    w: usize,
    c: usize,
    out_h: usize,
    out_w: usize,
) -> Vec<f64> {
    if (h, w) == (out_h, out_w) {
        return grad_out.to_vec();
    }
    let ty = AxisTaps::new(h, out_h);
    let tx = AxisTaps::new(w, out_w);
    let mut grad = vec![0.0; h * w * c];
    for y in 0..out_h {
        let (y0, y1, wy) = (ty.lo[y], ty.hi[y], ty.w_hi[y]);
        for x in 0..out_w {
            let (x0, x1, wx) = (tx.lo[x], tx.hi[x], tx.w_hi[x]);
            let g = (y * out_w + x) * c;
            let taps = [
                ((y0 * w + x0) * c, (1.0 - wy) * (1.0 - wx)),
                ((y0 * w + x1) * c, (1.0 - wy) * wx),
                ((y1 * w + x0) * c, wy * (1.0 - wx)),
                ((y1 * w + x1) * c, wy * wx),
            ];
            for (p, weight) in taps {
                for k in 0..c {
                    grad[p + k] += weight * grad_out[g + k];
                }
            }
        }
    }
    grad
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_map(h: usize, w: usize, c: usize, seed: u64) -> FeatureMap {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FeatureMap::from_fn(h, w, c, |_, _, _| rng.gen_range(-1.0..1.0)).unwrap()
    }

    #[test]
    fn constant_map_survives_resize() {
        let m = FeatureMap::filled(5, 7, 3, 3.5).unwrap();
        for (h, w) in [(1, 1), (3, 9), (10, 14), (5, 7)] {
            let r = m.bilinear_resize(h, w).unwrap();
            assert!(r.data().iter().all(|&v| (v - 3.5).abs() < 1e-12));
        }
    }

    #[test]
    fn identity_resize_is_bit_exact() {
        let m = random_map(6, 4, 2, 1);
        assert_eq!(m.bilinear_resize(6, 4).unwrap(), m);
    }

    #[test]
    fn upsample_2x2_matches_reference() {
        // Reference values from a half-pixel, edge-clamped bilinear resampler
        // evaluated independently.
        let m = FeatureMap::new(2, 2, 1, vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let r = m.bilinear_resize(4, 4).unwrap();
        let expected = [
            0.0, 0.25, 0.75, 1.0, //
            0.5, 0.75, 1.25, 1.5, //
            1.5, 1.75, 2.25, 2.5, //
            2.0, 2.25, 2.75, 3.0,
        ];
        for (a, b) in r.data().iter().zip(expected) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
        assert_eq!(r.get(0, 0, 0), 0.0);
        assert_eq!(r.get(0, 3, 0), 1.0);
        assert_eq!(r.get(3, 0, 0), 2.0);
        assert_eq!(r.get(3, 3, 0), 3.0);
    }

    #[test]
    fn mixed_resize_matches_reference() {
        let m = FeatureMap::from_fn(3, 5, 1, |y, x, _| (y * 5 + x) as f64).unwrap();
        let r = m.bilinear_resize(2, 7).unwrap();
        let expected = [
            1.25,
            1.8214285714285714,
            2.5357142857142856,
            3.25,
            3.9642857142857144,
            4.678571428571429,
            5.25,
            8.75,
            9.321428571428571,
            10.035714285714286,
            10.75,
            11.464285714285715,
            12.178571428571429,
            12.75,
        ];
        for (a, b) in r.data().iter().zip(expected) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
        let r = m.bilinear_resize(5, 3).unwrap();
        let expected = [
            0.33333333333333337,
            2.0,
            3.666666666666667,
            2.333333333333333,
            4.0,
            5.666666666666667,
            5.333333333333333,
            7.0,
            8.666666666666668,
            8.333333333333332,
            10.0,
            11.666666666666666,
            10.333333333333334,
            12.0,
            13.666666666666668,
        ];
        for (a, b) in r.data().iter().zip(expected) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn resize_rejects_zero_target() {
        let m = random_map(2, 2, 1, 0);
        assert!(m.bilinear_resize(0, 3).is_err());
    }

    #[test]
    fn stats_of_constant_and_two_point() {
        let s = FeatureMap::filled(3, 3, 2, 7.0).unwrap().channel_stats();
        assert_eq!(s.mean, vec![7.0, 7.0]);
        assert_eq!(s.variance, vec![0.0, 0.0]);

        let s = FeatureMap::new(1, 2, 1, vec![1.0, 3.0])
            .unwrap()
            .channel_stats();
        assert_eq!(s.mean, vec![2.0]);
        assert_eq!(s.variance, vec![1.0]);
    }

    #[test]
    fn stats_match_two_pass_oracle() {
        let m = random_map(8, 8, 4, 9);
        let s = m.channel_stats();
        for c in 0..4 {
            let vals: Vec<f64> = m.tokens().map(|t| t[c]).collect();
            let n = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / n;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            assert!((s.mean[c] - mean).abs() < 1e-12);
            assert!((s.variance[c] - var).abs() < 1e-12);
        }
    }

    #[test]
    fn adjoint_is_transpose_of_resize() {
        let (h, w, c, oh, ow) = (5, 3, 2, 8, 4);
        let x = random_map(h, w, c, 3);
        let g = random_map(oh, ow, c, 4);
        let fx = resize_raw(x.data(), h, w, c, oh, ow);
        let atg = resize_adjoint_raw(g.data(), h, w, c, oh, ow);
        let lhs: f64 = fx.iter().zip(g.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(&atg).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn patch_pool_averages_blocks() {
        let m = FeatureMap::from_fn(4, 4, 1, |y, x, _| (y * 4 + x) as f64).unwrap();
        let p = m.patch_pool(2).unwrap();
        assert_eq!(p.data(), &[2.5, 4.5, 10.5, 12.5]);
        assert!(m.patch_pool(3).is_err());
    }

    #[test]
    fn rejects_non_finite_and_bad_lengths() {
        assert!(FeatureMap::new(1, 1, 1, vec![f64::NAN]).is_err());
        assert!(FeatureMap::new(2, 1, 1, vec![0.0]).is_err());
        assert!(FeatureMap::new(0, 1, 1, vec![]).is_err());
    }

    #[test]
    fn smooth_resize_keeps_channel_means() {
        let m = FeatureMap::from_fn(32, 32, 2, |y, x, c| {
            let (u, v) = (y as f64 / 32.0, x as f64 / 32.0);
            (3.0 * u).sin() + (2.0 * v).cos() + c as f64
        })
        .unwrap();
        let before = m.channel_stats().mean;
        for (h, w) in [(16, 16), (20, 48), (64, 17)] {
            let after = m.bilinear_resize(h, w).unwrap().channel_stats().mean;
            for (a, b) in before.iter().zip(&after) {
                assert!((a - b).abs() <= 0.02 * a.abs().max(1e-3), "{a} vs {b}");
            }
        }
    }

    proptest! {
        #[test]
        fn resize_is_linear(
            h in 1usize..7, w in 1usize..7, oh in 1usize..9, ow in 1usize..9,
            a in -3.0f64..3.0, b in -3.0f64..3.0, seed in 0u64..1000,
        ) {
            let x = random_map(h, w, 2, seed);
            let y = random_map(h, w, 2, seed + 1);
            let lhs = x.axpby(a, &y, b).unwrap().bilinear_resize(oh, ow).unwrap();
            let rhs = x.bilinear_resize(oh, ow).unwrap()
                .axpby(a, &y.bilinear_resize(oh, ow).unwrap(), b).unwrap();
            for (l, r) in lhs.data().iter().zip(rhs.data()) {
                prop_assert!((l - r).abs() < 1e-9);
            }
        }
    }
}
