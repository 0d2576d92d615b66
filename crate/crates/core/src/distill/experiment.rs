//! Resolution mode-switch experiment: a student trained with each teacher
//! only at that teacher's own resolution, versus one trained with every
//! teacher at every resolution, compared by the scale variance of its
//! backbone tokens and by per-resolution fidelity curves.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::student::StudentConfig;
use super::teacher::{NativeRes, TeacherKind, TeacherSpec};
use super::train::{HighResMode, PartitionSpec, PhiSConfig, StageSpec, TrainConfig, Trainer};
use crate::error::{invalid, Result};
use crate::fmap::FeatureMap;
use crate::scale_eq::{equivariance_suite, Direction, Ladders, SuiteResult};
use crate::synth::ProceduralImage;

/// Three teachers: an any-resolution scale-consistent one (`dino`), a fixed
/// low-resolution one (`clip`) and a fixed high-resolution patch-local one
/// with ten times the feature scale (`sam`).
pub fn default_roster(low_res: usize, high_res: usize) -> Vec<TeacherSpec> {
    let mut sam = TeacherSpec::new("sam", TeacherKind::Segment, NativeRes::Fixed(high_res), 16);
    sam.variance_scale = 10.0;
    sam.summary = false;
    vec![
        TeacherSpec::new("clip", TeacherKind::OrientedGradient, NativeRes::Fixed(low_res), 8),
        TeacherSpec::new("dino", TeacherKind::PatchStatistics, NativeRes::Any, 8),
        sam,
    ]
}

fn d_iterations() -> usize {
    300
}
fn d_batch() -> usize {
    8
}
fn d_lr() -> f64 {
    1e-2
}
fn d_low() -> usize {
    64
}
fn d_high() -> usize {
    128
}
fn d_eval_res() -> Vec<usize> {
    vec![64, 80, 96, 112, 128]
}
fn d_eval_images() -> usize {
    8
}
fn d_ladders() -> Ladders {
    Ladders {
        fine: (64..=128).step_by(8).collect(),
        coarse: vec![64, 128, 192],
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeSwitchConfig {
    pub seed: u64,
    #[serde(default = "d_iterations")]
    pub iterations: usize,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_lr")]
    pub learning_rate: f64,
    #[serde(default = "d_low")]
    pub low_res: usize,
    #[serde(default = "d_high")]
    pub high_res: usize,
    #[serde(default = "d_eval_res")]
    pub eval_resolutions: Vec<usize>,
    #[serde(default = "d_eval_images")]
    pub eval_images: usize,
    #[serde(default = "d_ladders")]
    pub ladders: Ladders,
    #[serde(default)]
    pub student: StudentConfig,
    #[serde(default)]
    pub teachers: Option<Vec<TeacherSpec>>,
    #[serde(default)]
    pub high_res_mode: HighResMode,
}

impl ModeSwitchConfig {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            iterations: d_iterations(),
            batch_size: d_batch(),
            learning_rate: d_lr(),
            low_res: d_low(),
            high_res: d_high(),
            eval_resolutions: d_eval_res(),
            eval_images: d_eval_images(),
            ladders: d_ladders(),
            student: StudentConfig::default(),
            teachers: None,
            high_res_mode: HighResMode::default(),
        }
    }

    pub fn roster(&self) -> Vec<TeacherSpec> {
        self.teachers
            .clone()
            .unwrap_or_else(|| default_roster(self.low_res, self.high_res))
    }

    fn train_config(&self, stage: StageSpec) -> TrainConfig {
        TrainConfig {
            teachers: self.roster(),
            student: self.student.clone(),
            stages: vec![stage],
            seed: self.seed,
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            weights: Default::default(),
            high_res_mode: self.high_res_mode,
            phis: PhiSConfig {
                fit_resolution: Some(self.low_res),
                ..PhiSConfig::default()
            },
        }
    }

    /// Teachers whose native resolution is at most `low_res` (or any) train
    /// at `low_res`; the rest train at `high_res`. Half the batch each.
    pub fn segregated(&self) -> TrainConfig {
        let (low, high): (Vec<_>, Vec<_>) = self.roster().into_iter().partition(|t| match t.native_res {
            NativeRes::Any => true,
            NativeRes::Fixed(n) => n <= self.low_res,
        });
        let ids = |v: Vec<TeacherSpec>| v.into_iter().map(|t| t.id).collect::<Vec<_>>();
        self.train_config(StageSpec {
            stage: 0,
            resolutions: vec![self.low_res, self.high_res],
            iterations: self.iterations,
            partitions: vec![
                PartitionSpec {
                    teachers: ids(low),
                    resolution: self.low_res,
                    fraction: 0.5,
                },
                PartitionSpec {
                    teachers: ids(high),
                    resolution: self.high_res,
                    fraction: 0.5,
                },
            ],
        })
    }

    /// Every teacher at both resolutions, half the batch each.
    pub fn multi_resolution(&self) -> TrainConfig {
        let all: Vec<String> = self.roster().into_iter().map(|t| t.id).collect();
        self.train_config(StageSpec {
            stage: 0,
            resolutions: vec![self.low_res, self.high_res],
            iterations: self.iterations,
            partitions: [self.low_res, self.high_res]
                .iter()
                .map(|&r| PartitionSpec {
                    teachers: all.clone(),
                    resolution: r,
                    fraction: 0.5,
                })
                .collect(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FidelityPoint {
    pub resolution: usize,
    pub fidelity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StudentReport {
    pub final_loss: Option<f64>,
    pub scale_variance: SuiteResult,
    pub fidelity: BTreeMap<String, Vec<FidelityPoint>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Crossover {
    pub any_res_teacher: String,
    pub high_res_teacher: String,
    /// Rank correlation of fidelity with resolution, at and above the low resolution.
    pub any_res_rho: f64,
    pub high_res_rho: f64,
    pub holds: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModeSwitchReport {
    pub seed: u64,
    pub segregated: StudentReport,
    pub multi_resolution: StudentReport,
    pub crossover: Option<Crossover>,
    /// Multi-resolution student has lower coarse-ladder scale variance.
    pub multi_resolution_more_consistent: bool,
}

/// Ranks with ties averaged, 1-based.
fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            r[idx[k]] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation; `NaN` when either side is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len(), "spearman needs paired samples");
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

fn evaluate(trainer: &Trainer, cfg: &ModeSwitchConfig, final_loss: Option<f64>) -> Result<StudentReport> {
    let data = trainer.data();
    let images: Vec<ProceduralImage> = (0..cfg.eval_images).map(|i| data.held_out(i)).collect();
    let model = trainer.model();
    let generator = |img: &FeatureMap| model.tokens(img);
    let scale_variance = equivariance_suite(&generator, &images, &cfg.ladders, Direction::Down)?;
    let mut fidelity = BTreeMap::new();
    for spec in cfg.roster() {
        let curve = cfg
            .eval_resolutions
            .iter()
            .map(|&r| {
                Ok(FidelityPoint {
                    resolution: r,
                    fidelity: trainer.evaluate_fidelity(&spec.id, &images, r)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        fidelity.insert(spec.id, curve);
    }
    Ok(StudentReport {
        final_loss,
        scale_variance,
        fidelity,
    })
}

fn crossover(cfg: &ModeSwitchConfig, report: &StudentReport) -> Option<Crossover> {
    let roster = cfg.roster();
    let any = roster.iter().find(|t| t.native_res == NativeRes::Any)?;
    let high = roster
        .iter()
        .find(|t| matches!(t.native_res, NativeRes::Fixed(n) if n > cfg.low_res))?;
    let rho = |id: &str| {
        let pts: Vec<&FidelityPoint> = report.fidelity[id].iter().filter(|p| p.resolution >= cfg.low_res).collect();
        let x: Vec<f64> = pts.iter().map(|p| p.resolution as f64).collect();
        let y: Vec<f64> = pts.iter().map(|p| p.fidelity).collect();
        spearman(&x, &y)
    };
    let (a, h) = (rho(&any.id), rho(&high.id));
    Some(Crossover {
        any_res_teacher: any.id.clone(),
        high_res_teacher: high.id.clone(),
        any_res_rho: a,
        high_res_rho: h,
        holds: a < 0.0 && h > 0.0,
    })
}

fn train_and_evaluate(cfg: &ModeSwitchConfig, config: TrainConfig) -> Result<StudentReport> {
    let mut trainer = Trainer::new(config)?;
    let log = trainer.run(&mut |_| {})?;
    let last_iter = log.last().map(|r| r.iter);
    let final_loss = last_iter.map(|it| log.iter().filter(|r| r.iter == it).map(|r| r.total).sum::<f64>());
    evaluate(&trainer, cfg, final_loss)
}

pub fn mode_switch_experiment(cfg: &ModeSwitchConfig) -> Result<ModeSwitchReport> {
    if cfg.low_res >= cfg.high_res {
        return invalid("low resolution must be below high resolution");
    }
    if cfg.eval_images == 0 || cfg.eval_resolutions.is_empty() {
        return invalid("evaluation needs images and resolutions");
    }
    let segregated = train_and_evaluate(cfg, cfg.segregated())?;
    let multi_resolution = train_and_evaluate(cfg, cfg.multi_resolution())?;
    let more_consistent = match (multi_resolution.scale_variance.coarse, segregated.scale_variance.coarse) {
        (Some(b), Some(a)) => b < a,
        _ => false,
    };
    Ok(ModeSwitchReport {
        seed: cfg.seed,
        crossover: crossover(cfg, &segregated),
        segregated,
        multi_resolution,
        multi_resolution_more_consistent: more_consistent,
    })
}
