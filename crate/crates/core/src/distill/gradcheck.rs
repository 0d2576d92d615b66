//! Central finite-difference verification of analytic gradients.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::loss::{loss_and_grad, LossWeights, Target};
use super::student::StudentModel;
use crate::error::{invalid, Result};
use crate::fmap::FeatureMap;
use crate::phis::PhiSTransform;

pub const FD_STEP: f64 = 1e-5;
pub const DENOMINATOR_FLOOR: f64 = 1e-8;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(DENOMINATOR_FLOOR)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

/// Compares `analytic` with central differences of `loss` at `samples`
/// randomly chosen coordinates of `params` (all of them if fewer).
pub fn grad_check(
    params: &[f64],
    analytic: &[f64],
    mut loss: impl FnMut(&[f64]) -> Result<f64>,
    samples: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    if params.len() != analytic.len() {
        return invalid(format!(
            "{} parameters but {} gradient entries",
            params.len(),
            analytic.len()
        ));
    }
    if params.is_empty() || samples == 0 {
        return invalid("nothing to check");
    }
    let indices = check_indices(params.len(), samples, seed);
    let mut report = GradCheckReport {
        checked: indices.len(),
        max_rel_error: 0.0,
        worst_index: indices[0],
        worst_analytic: analytic[indices[0]],
        worst_numeric: f64::NAN,
    };
    let mut x = params.to_vec();
    for &i in &indices {
        let orig = x[i];
        x[i] = orig + FD_STEP;
        let up = loss(&x)?;
        x[i] = orig - FD_STEP;
        let down = loss(&x)?;
        x[i] = orig;
        let numeric = (up - down) / (2.0 * FD_STEP);
        let err = relative_error(analytic[i], numeric);
        if err > report.max_rel_error || report.worst_numeric.is_nan() {
            report.max_rel_error = err;
            report.worst_index = i;
            report.worst_analytic = analytic[i];
            report.worst_numeric = numeric;
        }
    }
    Ok(report)
}

/// Sorted coordinates examined by [`grad_check`] for a given seed.
pub fn check_indices(len: usize, samples: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = sample(&mut rng, len, samples.min(len)).into_vec();
    idx.sort_unstable();
    idx
}

/// Loss and gradient of the full student over a fixed batch, each image
/// weighted `1 / batch.len()`.
pub fn batch_loss_and_grad(
    model: &StudentModel,
    batch: &[(FeatureMap, Vec<Target>)],
    transforms: &BTreeMap<String, PhiSTransform>,
    weights: &LossWeights,
    mut grads: Option<&mut [f64]>,
) -> Result<f64> {
    let scale = 1.0 / batch.len() as f64;
    let mut total = 0.0;
    for (img, targets) in batch {
        let trace = model.trace(img)?;
        total += scale * loss_and_grad(model, &trace, targets, transforms, weights, scale, grads.as_deref_mut())?.total;
    }
    Ok(total)
}

/// Gradient check of the student, adaptors and both loss terms. With
/// `mutate`, the sign of the first checked gradient coordinate is flipped
/// before comparison.
pub fn student_grad_check(
    model: &StudentModel,
    batch: &[(FeatureMap, Vec<Target>)],
    transforms: &BTreeMap<String, PhiSTransform>,
    weights: &LossWeights,
    samples: usize,
    seed: u64,
    mutate: bool,
) -> Result<GradCheckReport> {
    if batch.is_empty() {
        return invalid("empty gradient-check batch");
    }
    let mut analytic = vec![0.0; model.num_params()];
    batch_loss_and_grad(model, batch, transforms, weights, Some(&mut analytic))?;
    if mutate {
        let first = check_indices(analytic.len(), samples, seed)[0];
        analytic[first] = -analytic[first];
    }
    let mut probe = model.clone();
    grad_check(
        model.values(),
        &analytic,
        |x| {
            probe.values_mut().copy_from_slice(x);
            batch_loss_and_grad(&probe, batch, transforms, weights, None)
        },
        samples,
        seed,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let p = [0.5, -1.0, 2.0];
        let g: Vec<f64> = p.iter().map(|v| 2.0 * v).collect();
        let r = grad_check(&p, &g, |x| Ok(x.iter().map(|v| v * v).sum()), 10, 0).unwrap();
        assert_eq!(r.checked, 3);
        assert!(r.max_rel_error < 1e-9);
    }

    #[test]
    fn wrong_gradient_detected() {
        let p = [0.5, -1.0];
        let r = grad_check(&p, &[1.0, 2.0], |x| Ok(x.iter().map(|v| v * v).sum()), 2, 0).unwrap();
        assert!((r.max_rel_error - 2.0).abs() < 1e-6);
        assert_eq!(r.worst_index, 1);
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1e-9, 0.0) - 0.1).abs() < 1e-12);
    }

    #[test]
    fn indices_are_distinct_and_sorted() {
        let idx = check_indices(1000, 200, 4);
        assert_eq!(idx.len(), 200);
        assert!(idx.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(idx, check_indices(1000, 200, 4));
    }
}
