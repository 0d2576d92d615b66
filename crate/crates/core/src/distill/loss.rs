//! Distillation objective: per-teacher patch MSE against standardized
//! teacher features plus cosine distance between summary vectors.
//!
//! Student tokens are bilinearly resized to each teacher's grid before the
//! patch adaptor, so a student running above a teacher's resolution is
//! compared at the teacher's granularity.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::student::{StudentModel, Trace};
use super::teacher::TeacherOutput;
use crate::error::{shape_err, Error, Result};
use crate::fmap::{resize_adjoint_raw, resize_raw, FeatureMap};
use crate::phis::{fidelity_from_mse, PhiSTransform};

/// Teacher features after standardization, i.e. what the adaptors regress.
#[derive(Debug, Clone, PartialEq)]
pub struct Target {
    pub teacher: String,
    pub patch: FeatureMap,
    pub summary: Option<Vec<f64>>,
}

fn transform_for<'a>(transforms: &'a BTreeMap<String, PhiSTransform>, id: &str) -> Result<&'a PhiSTransform> {
    transforms.get(id).ok_or_else(|| Error::MissingTransform(id.to_string()))
}

pub fn standardize(id: &str, output: &TeacherOutput, transforms: &BTreeMap<String, PhiSTransform>) -> Result<Target> {
    let t = transform_for(transforms, id)?;
    Ok(Target {
        teacher: id.to_string(),
        patch: t.apply(&output.patch)?,
        summary: output.summary.as_ref().map(|s| t.apply_token(s)),
    })
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    #[serde(default = "one")]
    pub patch: f64,
    #[serde(default = "one")]
    pub summary: f64,
    /// Per-teacher multipliers; unlisted teachers weigh 1.
    #[serde(default)]
    pub teachers: BTreeMap<String, f64>,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            patch: 1.0,
            summary: 1.0,
            teachers: BTreeMap::new(),
        }
    }
}

impl LossWeights {
    pub fn teacher(&self, id: &str) -> f64 {
        self.teachers.get(id).copied().unwrap_or(1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TeacherLoss {
    pub patch_mse: f64,
    pub summary_cosine: Option<f64>,
    /// Fidelity of the adaptor output in the teacher's own feature space.
    pub fidelity: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub per_teacher: BTreeMap<String, TeacherLoss>,
    pub total: f64,
}

pub fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    cosine_distance_grad(a, b).0
}

/// Cosine distance `1 − cos(a, b)` and its gradient with respect to `a`.
/// A zero vector is at distance 1 from everything.
fn cosine_distance_grad(a: &[f64], b: &[f64]) -> (f64, Vec<f64>) {
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return (1.0, vec![0.0; a.len()]);
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let cos = (dot / (na * nb)).clamp(-1.0, 1.0);
    let grad = a
        .iter()
        .zip(b)
        .map(|(x, y)| -(y / (na * nb) - dot * x / (na * na * na * nb)))
        .collect();
    (1.0 - cos, grad)
}

/// Patch adaptor output for `teacher` on a `th × tw` grid.
pub fn predict_patch(model: &StudentModel, trace: &Trace, teacher: &str, th: usize, tw: usize) -> Result<FeatureMap> {
    let ad = model.adaptor(teacher)?;
    let (gh, gw) = trace.grid;
    let resized = resize_raw(trace.tokens(), gh, gw, model.config().width, th, tw);
    let (pred, _) = ad.patch.forward(model.params(), &resized, th * tw);
    FeatureMap::new(th, tw, ad.channels, pred)
}

/// Loss over `targets`; when `grads` is given, `scale ×` its gradient is
/// accumulated there.
pub fn loss_and_grad(
    model: &StudentModel,
    trace: &Trace,
    targets: &[Target],
    transforms: &BTreeMap<String, PhiSTransform>,
    weights: &LossWeights,
    scale: f64,
    mut grads: Option<&mut [f64]>,
) -> Result<LossReport> {
    let (gh, gw) = trace.grid;
    let n = gh * gw;
    let d = model.config().width;
    let p = model.params();
    let summary = trace.summary();
    let mut d_tokens = grads.as_ref().map(|_| vec![0.0; n * d]);
    let mut report = LossReport::default();

    for target in targets {
        let id = target.teacher.as_str();
        let ad = model.adaptor(id)?;
        let phi_sq = transform_for(transforms, id)?.phi_sq();
        let (th, tw, c) = target.patch.shape();
        if c != ad.channels {
            return shape_err(format!(
                "teacher {id} target has {c} channels, adaptor emits {}",
                ad.channels
            ));
        }
        let wt = weights.teacher(id);
        let m = th * tw;
        let resized = resize_raw(trace.tokens(), gh, gw, d, th, tw);
        let (pred, cache) = ad.patch.forward(p, &resized, m);
        let resid: Vec<f64> = pred.iter().zip(target.patch.data()).map(|(a, b)| a - b).collect();
        let mse = resid.iter().map(|r| r * r).sum::<f64>() / (m * c) as f64;
        report.total += wt * weights.patch * mse;

        if let (Some(g), Some(dt)) = (grads.as_deref_mut(), d_tokens.as_mut()) {
            let k = 2.0 * scale * wt * weights.patch / (m * c) as f64;
            let d_pred: Vec<f64> = resid.iter().map(|r| r * k).collect();
            let d_resized = ad.patch.backward(p, &cache, &d_pred, g);
            let back = resize_adjoint_raw(&d_resized, gh, gw, d, th, tw);
            dt.iter_mut().zip(back).for_each(|(a, b)| *a += b);
        }

        let summary_cosine = match &target.summary {
            None => None,
            Some(ts) => {
                if ts.len() != ad.channels {
                    return shape_err(format!("teacher {id} summary has {} channels", ts.len()));
                }
                let (s_pred, s_cache) = ad.summary.forward(p, &summary, 1);
                let (dist, g_cos) = cosine_distance_grad(&s_pred, ts);
                report.total += wt * weights.summary * dist;
                if let (Some(g), Some(dt)) = (grads.as_deref_mut(), d_tokens.as_mut()) {
                    let k = scale * wt * weights.summary;
                    let d_pred: Vec<f64> = g_cos.iter().map(|v| v * k).collect();
                    let d_summary = ad.summary.backward(p, &s_cache, &d_pred, g);
                    for tok in dt.chunks_exact_mut(d) {
                        tok.iter_mut().zip(&d_summary).for_each(|(a, b)| *a += b / n as f64);
                    }
                }
                Some(dist)
            }
        };

        report.per_teacher.insert(
            id.to_string(),
            TeacherLoss {
                patch_mse: mse,
                summary_cosine,
                fidelity: fidelity_from_mse(phi_sq, phi_sq * mse),
            },
        );
    }

    if let (Some(g), Some(dt)) = (grads, d_tokens) {
        model.backward(trace, &dt, g);
    }
    Ok(report)
}

/// Standardizes raw teacher outputs and evaluates the loss for one image.
pub fn distillation_loss(
    model: &StudentModel,
    trace: &Trace,
    outputs: &[(String, TeacherOutput)],
    transforms: &BTreeMap<String, PhiSTransform>,
    weights: &LossWeights,
) -> Result<LossReport> {
    let targets = outputs
        .iter()
        .map(|(id, o)| standardize(id, o, transforms))
        .collect::<Result<Vec<_>>>()?;
    loss_and_grad(model, trace, &targets, transforms, weights, 1.0, None)
}

/// Squared norm of each teacher's parameter gradient taken in isolation.
pub fn gradient_energy(
    model: &StudentModel,
    trace: &Trace,
    targets: &[Target],
    transforms: &BTreeMap<String, PhiSTransform>,
    weights: &LossWeights,
) -> Result<BTreeMap<String, f64>> {
    let mut out = BTreeMap::new();
    for t in targets {
        let mut g = vec![0.0; model.num_params()];
        loss_and_grad(model, trace, std::slice::from_ref(t), transforms, weights, 1.0, Some(&mut g))?;
        out.insert(t.teacher.clone(), g.iter().map(|v| v * v).sum());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_distance_values() {
        assert!((cosine_distance(&[1.0, 0.0], &[2.0, 0.0])).abs() < 1e-15);
        assert!((cosine_distance(&[1.0, 0.0], &[0.0, 3.0]) - 1.0).abs() < 1e-15);
        assert!((cosine_distance(&[1.0, 1.0], &[-1.0, -1.0]) - 2.0).abs() < 1e-15);
        assert_eq!(cosine_distance(&[0.0, 0.0], &[1.0, 0.0]), 1.0);
    }

    #[test]
    fn cosine_gradient() {
        let a = [0.3, -1.2, 0.7];
        let b = [1.0, 0.5, -0.25];
        let (_, g) = cosine_distance_grad(&a, &b);
        for i in 0..3 {
            let mut p = a;
            let mut m = a;
            p[i] += 1e-6;
            m[i] -= 1e-6;
            let num = (cosine_distance(&p, &b) - cosine_distance(&m, &b)) / 2e-6;
            assert!((num - g[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn weights_json_defaults() {
        let w: LossWeights = serde_json::from_str(r#"{"teachers":{"sam":0.5}}"#).unwrap();
        assert_eq!(w.patch, 1.0);
        assert_eq!(w.teacher("sam"), 0.5);
        assert_eq!(w.teacher("clip"), 1.0);
    }
}
