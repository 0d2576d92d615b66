//! PCA-Hadamard isotropic standardization of teacher features and the
//! fidelity measure built on it.
//!
//! A fitted transform maps a token `x` to `φ⁻¹ · R · (x − μ)` with
//! `R = H_C · Uᵀ`, where `U` holds the eigenvectors of the token covariance,
//! `H_C` is the normalized Sylvester-Hadamard matrix and
//! `φ = sqrt(mean(λ))`. The Hadamard rotation spreads variance evenly over
//! channels, so every output channel ends up with unit variance.
//!
//! The mean is subtracted before rotating and restored on inversion; the
//! textbook form of the transform omits it, which would leave the output
//! off-centre for teachers with non-zero mean activations.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Error, Result};
use crate::fmap::FeatureMap;
use crate::linalg::{sym_eig, Matrix};
use crate::pca::token_covariance;

/// Eigenvalues below this are treated as exactly zero.
pub const EIGENVALUE_FLOOR: f64 = 1e-12;

/// Normalized Hadamard matrix of order `c` (a power of two), built with
/// Sylvester's recursion. Entries are `±1/√c`.
pub fn hadamard(c: usize) -> Result<Matrix> {
    if c == 0 || !c.is_power_of_two() {
        return invalid(format!("Hadamard order must be a power of two, got {c}"));
    }
    let scale = 1.0 / (c as f64).sqrt();
    // H[i][j] = (-1)^popcount(i & j) is the Sylvester construction unrolled
    Ok(Matrix::from_fn(c, c, |i, j| {
        if (i & j).count_ones() % 2 == 0 {
            scale
        } else {
            -scale
        }
    }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhiSTransform {
    pub channels: usize,
    pub mean: Vec<f64>,
    pub rotation: Matrix,
    pub phi: f64,
    #[serde(default)]
    pub fitted_on: usize,
}

impl PhiSTransform {
    /// Fits on `samples`, a flat row-major `n × channels` buffer.
    pub fn fit(samples: &[f64], channels: usize) -> Result<Self> {
        if channels == 0 || !samples.len().is_multiple_of(channels) {
            return shape_err(format!(
                "{} values do not split into {channels}-channel samples",
                samples.len()
            ));
        }
        let tokens: Vec<&[f64]> = samples.chunks_exact(channels).collect();
        Self::fit_tokens(&tokens, channels)
    }

    /// Fits on every token of every map.
    pub fn fit_maps<'a>(maps: impl IntoIterator<Item = &'a FeatureMap>) -> Result<Self> {
        let mut tokens: Vec<&[f64]> = Vec::new();
        let mut channels = None;
        for m in maps {
            if *channels.get_or_insert(m.channels()) != m.channels() {
                return shape_err("maps disagree on channel count");
            }
            tokens.extend(m.tokens());
        }
        let channels = channels.ok_or_else(|| Error::InvalidArgument("no maps to fit".into()))?;
        Self::fit_tokens(&tokens, channels)
    }

    /// Fits on at most `samples` tokens drawn without replacement (seeded)
    /// from all maps; every token is used when `samples` covers them.
    pub fn fit_maps_sampled(maps: &[FeatureMap], samples: usize, seed: u64) -> Result<Self> {
        let all: Vec<&[f64]> = maps.iter().flat_map(|m| m.tokens()).collect();
        if samples >= all.len() {
            return Self::fit_maps(maps);
        }
        let Some(first) = maps.first() else {
            return invalid("no maps to fit");
        };
        if maps.iter().any(|m| m.channels() != first.channels()) {
            return shape_err("maps disagree on channel count");
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut idx = sample(&mut rng, all.len(), samples).into_vec();
        idx.sort_unstable();
        let picked: Vec<&[f64]> = idx.into_iter().map(|i| all[i]).collect();
        Self::fit_tokens(&picked, first.channels())
    }

    pub fn fit_tokens(tokens: &[&[f64]], channels: usize) -> Result<Self> {
        let hadamard = hadamard(channels)?;
        if tokens.len() < channels + 1 {
            return invalid(format!(
                "need at least {} samples to fit {channels} channels, got {}",
                channels + 1,
                tokens.len()
            ));
        }
        if tokens.iter().any(|t| t.len() != channels) {
            return shape_err("sample length differs from channel count");
        }
        let (mean, cov) = token_covariance(tokens, channels);
        let eig = sym_eig(&cov)?;
        let lambda_mean = eig
            .eigenvalues
            .iter()
            .map(|&l| if l < EIGENVALUE_FLOOR { 0.0 } else { l })
            .sum::<f64>()
            / channels as f64;
        let phi = lambda_mean.sqrt();
        if phi == 0.0 {
            return Err(Error::Degenerate(
                "samples have zero total variance".into(),
            ));
        }
        let rotation = hadamard.matmul(&eig.eigenvectors.transpose())?;
        Ok(Self {
            channels,
            mean,
            rotation,
            phi,
            fitted_on: tokens.len(),
        })
    }

    /// The do-nothing transform (`μ = 0`, `R = I`, `φ = 1`).
    pub fn identity(channels: usize) -> Self {
        Self {
            channels,
            mean: vec![0.0; channels],
            rotation: Matrix::identity(channels),
            phi: 1.0,
            fitted_on: 0,
        }
    }

    pub fn phi_sq(&self) -> f64 {
        self.phi * self.phi
    }

    pub fn apply_token(&self, x: &[f64]) -> Vec<f64> {
        let centered: Vec<f64> = x.iter().zip(&self.mean).map(|(v, m)| v - m).collect();
        let inv = 1.0 / self.phi;
        self.rotation
            .mul_vec(&centered)
            .into_iter()
            .map(|v| v * inv)
            .collect()
    }

    pub fn invert_token(&self, x: &[f64]) -> Vec<f64> {
        let scaled: Vec<f64> = x.iter().map(|v| v * self.phi).collect();
        self.rotation
            .tr_mul_vec(&scaled)
            .into_iter()
            .zip(&self.mean)
            .map(|(v, m)| v + m)
            .collect()
    }

    fn check_channels(&self, map: &FeatureMap) -> Result<()> {
        if map.channels() != self.channels {
            return shape_err(format!(
                "transform has {} channels, map has {}",
                self.channels,
                map.channels()
            ));
        }
        Ok(())
    }

    pub fn apply(&self, map: &FeatureMap) -> Result<FeatureMap> {
        self.check_channels(map)?;
        let tokens: Vec<Vec<f64>> = map.tokens().map(|t| self.apply_token(t)).collect();
        FeatureMap::from_tokens(map.height(), map.width(), &tokens)
    }

    pub fn invert(&self, map: &FeatureMap) -> Result<FeatureMap> {
        self.check_channels(map)?;
        let tokens: Vec<Vec<f64>> = map.tokens().map(|t| self.invert_token(t)).collect();
        FeatureMap::from_tokens(map.height(), map.width(), &tokens)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let t: Self = serde_json::from_str(s)?;
        if t.mean.len() != t.channels
            || t.rotation.rows() != t.channels
            || t.rotation.cols() != t.channels
        {
            return shape_err("transform fields disagree on channel count");
        }
        if !(t.phi > 0.0) {
            return invalid("transform phi must be positive");
        }
        Ok(t)
    }
}

/// `φ² / MSE`; a perfect match (zero error) gives `+∞`.
pub fn fidelity_from_mse(phi_sq: f64, mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        phi_sq / mse
    }
}

/// Fidelity of a student prediction to a teacher, both in the teacher's
/// original feature space.
pub fn fidelity(phi_sq: f64, student: &FeatureMap, teacher: &FeatureMap) -> Result<f64> {
    Ok(fidelity_from_mse(phi_sq, student.mse(teacher)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidelityRow {
    pub teacher: String,
    pub phi_sq: f64,
    pub mse: f64,
    pub fidelity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidelityReport {
    pub per_teacher: Vec<FidelityRow>,
    pub geometric_mean: f64,
}

pub fn geometric_mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let log_sum: f64 = values.iter().map(|v| v.ln()).sum();
    (log_sum / values.len() as f64).exp()
}

/// Builds the per-teacher table from `(teacher, φ², MSE)` triples.
pub fn fidelity_report<S: Into<String>>(
    rows: impl IntoIterator<Item = (S, f64, f64)>,
) -> Result<FidelityReport> {
    let per_teacher: Vec<FidelityRow> = rows
        .into_iter()
        .map(|(teacher, phi_sq, mse)| FidelityRow {
            teacher: teacher.into(),
            phi_sq,
            mse,
            fidelity: fidelity_from_mse(phi_sq, mse),
        })
        .collect();
    if per_teacher.is_empty() {
        return invalid("fidelity report needs at least one teacher");
    }
    if let Some(r) = per_teacher.iter().find(|r| !(r.phi_sq > 0.0) || !(r.mse >= 0.0)) {
        return invalid(format!("teacher {:?} has invalid phi² or MSE", r.teacher));
    }
    let geometric_mean = geometric_mean(&per_teacher.iter().map(|r| r.fidelity).collect::<Vec<_>>());
    Ok(FidelityReport {
        per_teacher,
        geometric_mean,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn flat(points: &[[f64; 2]]) -> Vec<f64> {
        points.iter().flatten().copied().collect()
    }

    fn column_variances(tokens: &[Vec<f64>]) -> Vec<f64> {
        let c = tokens[0].len();
        let n = tokens.len() as f64;
        (0..c)
            .map(|k| {
                let m = tokens.iter().map(|t| t[k]).sum::<f64>() / n;
                tokens.iter().map(|t| (t[k] - m).powi(2)).sum::<f64>() / n
            })
            .collect()
    }

    #[test]
    fn hadamard_small_orders() {
        assert_eq!(hadamard(1).unwrap().to_rows(), vec![vec![1.0]]);
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let h2 = Matrix::from_rows(&[vec![h, h], vec![h, -h]]).unwrap();
        assert!(hadamard(2).unwrap().max_abs_diff(&h2) < 1e-15);
        let h8 = hadamard(8).unwrap();
        assert!(h8.transpose().matmul(&h8).unwrap().max_abs_diff(&Matrix::identity(8)) < 1e-12);
        assert!(hadamard(6).is_err());
        assert!(hadamard(0).is_err());
    }

    #[test]
    fn hadamard_matches_sylvester_recursion() {
        // H_2n = [[H, H], [H, -H]] / √2
        let h4 = hadamard(4).unwrap();
        let h8 = hadamard(8).unwrap();
        let r = std::f64::consts::FRAC_1_SQRT_2;
        for i in 0..8 {
            for j in 0..8 {
                let sign = if i >= 4 && j >= 4 { -1.0 } else { 1.0 };
                assert!((h8[(i, j)] - sign * r * h4[(i % 4, j % 4)]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn four_point_dataset() {
        let samples = flat(&[[1.0, 0.0], [-1.0, 0.0], [0.0, 2.0], [0.0, -2.0]]);
        let t = PhiSTransform::fit(&samples, 2).unwrap();
        assert_eq!(t.mean, vec![0.0, 0.0]);
        assert!((t.phi - 1.25f64.sqrt()).abs() < 1e-12);
        let out: Vec<Vec<f64>> = samples.chunks(2).map(|x| t.apply_token(x)).collect();
        for v in column_variances(&out) {
            assert!((v - 1.0).abs() < 1e-12, "variance {v}");
        }
    }

    #[test]
    fn sampled_fit() {
        let maps: Vec<FeatureMap> = (0..3)
            .map(|k| {
                FeatureMap::from_fn(4, 4, 2, |y, x, c| ((y * 4 + x) as f64 * (c + 1) as f64 + k as f64).sin())
                    .unwrap()
            })
            .collect();
        let all = PhiSTransform::fit_maps(&maps).unwrap();
        assert_eq!(PhiSTransform::fit_maps_sampled(&maps, 1000, 0).unwrap(), all);
        let some = PhiSTransform::fit_maps_sampled(&maps, 20, 0).unwrap();
        assert_eq!(some.fitted_on, 20);
        assert_eq!(some, PhiSTransform::fit_maps_sampled(&maps, 20, 0).unwrap());
        assert_ne!(some, PhiSTransform::fit_maps_sampled(&maps, 20, 1).unwrap());
    }

    #[test]
    fn rank_deficient_covariance() {
        // covariance diag(4, 0)
        let samples = flat(&[[2.0, 1.0], [-2.0, 1.0], [2.0, 1.0], [-2.0, 1.0]]);
        let t = PhiSTransform::fit(&samples, 2).unwrap();
        assert!((t.phi - 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn constant_samples_are_degenerate() {
        let samples = vec![3.0; 10];
        assert!(matches!(PhiSTransform::fit(&samples, 2), Err(Error::Degenerate(_))));
        assert!(PhiSTransform::fit(&[1.0, 2.0, 3.0, 4.0], 2).is_err());
        assert!(PhiSTransform::fit(&[0.0; 12], 3).is_err());
    }

    #[test]
    fn isotropic_input_is_nearly_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let c = 4;
        let samples: Vec<f64> = (0..10_000 * c).map(|_| StandardNormal.sample(&mut rng)).collect();
        let t = PhiSTransform::fit(&samples, c).unwrap();
        assert!((t.phi - 1.0).abs() < 0.05, "phi {}", t.phi);
        let before: Vec<Vec<f64>> = samples.chunks(c).map(|x| x.to_vec()).collect();
        let after: Vec<Vec<f64>> = samples.chunks(c).map(|x| t.apply_token(x)).collect();
        for (a, b) in column_variances(&before).iter().zip(column_variances(&after)) {
            assert!((a - b).abs() / a < 0.05);
        }
    }

    fn correlated_samples(c: usize, n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mix: Vec<f64> = (0..c * c).map(|_| StandardNormal.sample(&mut rng)).collect();
        let mut out = Vec::with_capacity(n * c);
        for _ in 0..n {
            let z: Vec<f64> = (0..c).map(|_| StandardNormal.sample(&mut rng)).collect();
            for i in 0..c {
                let v: f64 = (0..c).map(|j| mix[i * c + j] * z[j] * (j + 1) as f64).sum();
                out.push(v + i as f64);
            }
        }
        out
    }

    #[test]
    fn fit_set_has_unit_diagonal_and_trace_c() {
        let c = 8;
        let samples = correlated_samples(c, 500, 3);
        let t = PhiSTransform::fit(&samples, c).unwrap();
        let out: Vec<Vec<f64>> = samples.chunks(c).map(|x| t.apply_token(x)).collect();
        let vars = column_variances(&out);
        for v in &vars {
            assert!((v - 1.0).abs() < 1e-9);
        }
        assert!((vars.iter().sum::<f64>() - c as f64).abs() < 1e-9);
        assert!(t.apply_token(&t.mean).iter().all(|v| v.abs() < 1e-12));
        assert_eq!(t.invert_token(&vec![0.0; c]), t.mean);
        let rtr = t.rotation.transpose().matmul(&t.rotation).unwrap();
        assert!(rtr.max_abs_diff(&Matrix::identity(c)) < 1e-8);
    }

    #[test]
    fn apply_rejects_channel_mismatch() {
        let t = PhiSTransform::identity(4);
        let m = FeatureMap::filled(2, 2, 3, 0.0).unwrap();
        assert!(t.apply(&m).is_err());
        assert!(t.invert(&m).is_err());
    }

    #[test]
    fn fidelity_examples() {
        assert!((fidelity_from_mse(5.831e-4, 5.100e-4) - 1.143).abs() < 5e-4);
        assert!((fidelity_from_mse(1.729, 0.206) - 8.393).abs() < 5e-4);
        let m = FeatureMap::filled(2, 2, 2, 1.5).unwrap();
        assert_eq!(fidelity(1.0, &m, &m).unwrap(), f64::INFINITY);
    }

    #[test]
    fn report_geometric_means() {
        let base = geometric_mean(&[1.143, 1.438, 7.799, 7.331]);
        let phis = geometric_mean(&[2.411, 1.563, 8.377, 5.132]);
        assert!((base - 3.114).abs() < 0.005, "{base}");
        assert!((phis - 3.568).abs() < 0.005, "{phis}");
        let r = fidelity_report([("only", 4.0, 2.0)]).unwrap();
        assert_eq!(r.geometric_mean, 2.0);
        assert!(fidelity_report(Vec::<(String, f64, f64)>::new()).is_err());
    }

    #[test]
    fn json_shape() {
        let t = PhiSTransform::fit(&flat(&[[1.0, 0.0], [-1.0, 0.0], [0.0, 2.0], [0.0, -2.0]]), 2)
            .unwrap();
        let v: serde_json::Value = serde_json::from_str(&t.to_json().unwrap()).unwrap();
        for key in ["channels", "mean", "rotation", "phi"] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
        assert_eq!(PhiSTransform::from_json(&t.to_json().unwrap()).unwrap(), t);
        assert!(PhiSTransform::from_json(r#"{"channels":2,"mean":[0],"rotation":[[1,0],[0,1]],"phi":1}"#).is_err());
    }

    #[test]
    fn fit_is_deterministic() {
        let s = correlated_samples(4, 64, 8);
        let a = PhiSTransform::fit(&s, 4).unwrap();
        let b = PhiSTransform::fit(&s, 4).unwrap();
        assert_eq!(a, b);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn round_trip_and_isometry(seed in any::<u64>(), c_pow in 1u32..=4) {
            let c = 1usize << c_pow;
            let samples = correlated_samples(c, 4 * c + 8, seed);
            let t = PhiSTransform::fit(&samples, c).unwrap();
            let rows: Vec<&[f64]> = samples.chunks(c).collect();
            for pair in rows.windows(2) {
                let back = t.invert_token(&t.apply_token(pair[0]));
                for (a, b) in back.iter().zip(pair[0]) {
                    prop_assert!((a - b).abs() < 1e-9);
                }
                let d_in: f64 = pair[0].iter().zip(pair[1]).map(|(a, b)| (a - b).powi(2)).sum();
                let (ta, tb) = (t.apply_token(pair[0]), t.apply_token(pair[1]));
                let d_out: f64 = ta.iter().zip(&tb).map(|(a, b)| (a - b).powi(2)).sum();
                prop_assert!((d_out - d_in / t.phi_sq()).abs() < 1e-9 * d_in.max(1.0));
            }
        }

        #[test]
        fn fidelity_ranking_ignores_common_rescaling(
            k in 0.01f64..100.0, e1 in 0.01f64..1.0, e2 in 0.01f64..1.0,
        ) {
            let teacher = FeatureMap::from_fn(3, 3, 2, |y, x, c| (y + 2 * x + c) as f64).unwrap();
            let s1 = teacher.map(|v| v + e1);
            let s2 = teacher.map(|v| v - e2);
            let phi_sq = 2.0;
            let f1 = fidelity(phi_sq, &s1, &teacher).unwrap();
            let f2 = fidelity(phi_sq, &s2, &teacher).unwrap();
            let g1 = fidelity(phi_sq * k * k, &s1.scaled(k), &teacher.scaled(k)).unwrap();
            let g2 = fidelity(phi_sq * k * k, &s2.scaled(k), &teacher.scaled(k)).unwrap();
            prop_assert_eq!(f1 > f2, g1 > g2);
        }
    }
}
