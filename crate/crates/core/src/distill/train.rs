//! Staged multi-teacher training with plain SGD.
//!
//! Each stage splits every batch into partitions; a partition routes its
//! images to a subset of teachers at one student resolution. Partition `p`
//! walks the stage's image stream with its own cursor, taking `n_p` images
//! per iteration, so configurations that split the same teachers across
//! more partitions visit the same (image, teacher) pairs, only grouped
//! differently. Per-image losses are scaled by `1 / batch_size`, which
//! weights each partition's gradient by its batch fraction.
//!
//! Teacher targets for a student resolution `R`:
//! * any-resolution teachers see the image rendered at `R`;
//! * fixed-resolution teachers with native side `n ≤ R` see the image at
//!   `n`, and the student tokens are downsampled to the teacher grid;
//! * fixed-resolution teachers with `n > R` see the `R`-pixel image either
//!   packed into mosaics or padded onto an `n`-pixel canvas, and the token
//!   block covering the image is cropped out. Their summary vector, when
//!   present, comes from the image rendered at `n`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::loss::{loss_and_grad, predict_patch, standardize, LossWeights, Target};
use super::student::{StudentConfig, StudentModel};
use super::teacher::{NativeRes, Teacher, TeacherOutput, TeacherSpec};
use crate::error::{invalid, Error, Result};
use crate::fmap::FeatureMap;
use crate::mosaic::{crop_padded_features, pad_to_canvas, MosaicLayout};
use crate::phis::{fidelity_from_mse, PhiSTransform};
use crate::synth::{ImageSource, ProceduralImage};

/// Losses above this abort training.
pub const DIVERGENCE_THRESHOLD: f64 = 1e6;
/// Pixel value used to fill mosaic and padded canvases.
pub const PAD_VALUE: f64 = 0.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionSpec {
    pub teachers: Vec<String>,
    pub resolution: usize,
    pub fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSpec {
    #[serde(default)]
    pub stage: usize,
    pub resolutions: Vec<usize>,
    pub iterations: usize,
    pub partitions: Vec<PartitionSpec>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HighResMode {
    #[default]
    Mosaic,
    PadCrop,
}

fn default_true() -> bool {
    true
}
fn default_fit_images() -> usize {
    32
}
fn default_lr() -> f64 {
    1e-2
}
fn default_batch() -> usize {
    8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhiSConfig {
    #[serde(default = "default_true")]
    pub enabled: bool,
    #[serde(default = "default_fit_images")]
    pub fit_images: usize,
    /// Resolution used to sample any-resolution teachers; defaults to the
    /// lowest resolution of the first stage.
    #[serde(default)]
    pub fit_resolution: Option<usize>,
}

impl Default for PhiSConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            fit_images: default_fit_images(),
            fit_resolution: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub teachers: Vec<TeacherSpec>,
    #[serde(default)]
    pub student: StudentConfig,
    pub stages: Vec<StageSpec>,
    pub seed: u64,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub weights: LossWeights,
    #[serde(default)]
    pub high_res_mode: HighResMode,
    #[serde(default)]
    pub phis: PhiSConfig,
}

impl TrainConfig {
    pub fn from_json(s: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(s)?;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.teachers.is_empty() {
            return invalid("at least one teacher is required");
        }
        for t in &self.teachers {
            t.validate()?;
        }
        let mut ids: Vec<&str> = self.teachers.iter().map(|t| t.id.as_str()).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return invalid("teacher ids must be unique");
        }
        self.student.validate()?;
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return invalid(format!("learning rate must be non-negative, got {}", self.learning_rate));
        }
        if self.batch_size == 0 {
            return invalid("batch size must be positive");
        }
        if self.phis.fit_images == 0 {
            return invalid("PHI-S needs at least one fitting image");
        }
        for s in &self.stages {
            self.validate_stage(s)?;
        }
        Ok(())
    }

    fn teacher_spec(&self, id: &str) -> Result<&TeacherSpec> {
        match self.teachers.iter().find(|t| t.id == id) {
            Some(t) => Ok(t),
            None => invalid(format!("unknown teacher {id}")),
        }
    }

    pub fn validate_stage(&self, stage: &StageSpec) -> Result<()> {
        let ctx = |m: String| invalid(format!("stage {}: {m}", stage.stage));
        if stage.partitions.is_empty() {
            return ctx("no partitions".into());
        }
        if stage.resolutions.is_empty() {
            return ctx("no resolutions".into());
        }
        for &r in &stage.resolutions {
            if r == 0 || r % self.student.patch != 0 {
                return ctx(format!("resolution {r} is not a multiple of the student patch"));
            }
        }
        let sum: f64 = stage.partitions.iter().map(|p| p.fraction).sum();
        if (sum - 1.0).abs() > 1e-9 || stage.partitions.iter().any(|p| !(p.fraction > 0.0)) {
            return ctx(format!("batch fractions must be positive and sum to 1, got {sum}"));
        }
        for p in &stage.partitions {
            if !stage.resolutions.contains(&p.resolution) {
                return ctx(format!("partition resolution {} not among the stage resolutions", p.resolution));
            }
            if p.teachers.is_empty() {
                return ctx("partition without teachers".into());
            }
            for (i, id) in p.teachers.iter().enumerate() {
                if p.teachers[..i].contains(id) {
                    return ctx(format!("teacher {id} listed twice in one partition"));
                }
                let t = self.teacher_spec(id)?;
                if p.resolution % t.patch != 0 {
                    return ctx(format!(
                        "resolution {} is not a multiple of teacher {id}'s {}-pixel patch",
                        p.resolution, t.patch
                    ));
                }
            }
        }
        for t in &self.teachers {
            if !stage.partitions.iter().any(|p| p.teachers.contains(&t.id)) {
                return ctx(format!("teacher {} appears in no partition", t.id));
            }
        }
        partition_sizes(stage, self.batch_size)?;
        Ok(())
    }
}

/// Images per partition for one batch, by largest remainder.
pub fn partition_sizes(stage: &StageSpec, batch_size: usize) -> Result<Vec<usize>> {
    let exact: Vec<f64> = stage.partitions.iter().map(|p| p.fraction * batch_size as f64).collect();
    let mut sizes: Vec<usize> = exact.iter().map(|v| v.floor() as usize).collect();
    let mut left = batch_size - sizes.iter().sum::<usize>().min(batch_size);
    let mut order: Vec<usize> = (0..sizes.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    for &i in order.iter().cycle().take(sizes.len() * 2) {
        if left == 0 {
            break;
        }
        sizes[i] += 1;
        left -= 1;
    }
    if let Some(p) = sizes.iter().position(|&s| s == 0) {
        return invalid(format!(
            "batch of {batch_size} leaves partition {p} (fraction {}) without images",
            stage.partitions[p].fraction
        ));
    }
    Ok(sizes)
}

/// One (image, teacher) loss term of a stage.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub struct ScheduledTerm {
    pub iteration: usize,
    pub partition: usize,
    pub image: usize,
    pub teacher: String,
    pub resolution: usize,
}

/// Image indices consumed by partition `p` at `iteration`.
fn partition_images(sizes: &[usize], p: usize, iteration: usize) -> std::ops::Range<usize> {
    let start = iteration * sizes[p];
    start..start + sizes[p]
}

pub fn schedule(stage: &StageSpec, batch_size: usize) -> Result<Vec<ScheduledTerm>> {
    let sizes = partition_sizes(stage, batch_size)?;
    let mut out = Vec::new();
    for it in 0..stage.iterations {
        for (p, part) in stage.partitions.iter().enumerate() {
            for image in partition_images(&sizes, p, it) {
                for t in &part.teachers {
                    out.push(ScheduledTerm {
                        iteration: it,
                        partition: p,
                        image,
                        teacher: t.clone(),
                        resolution: part.resolution,
                    });
                }
            }
        }
    }
    Ok(out)
}

fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic procedural image streams derived from one seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DataStream {
    seed: u64,
}

impl DataStream {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn training(&self, stage: usize, index: usize) -> ProceduralImage {
        ProceduralImage::from_seed(mix(mix(self.seed, 1 + stage as u64), index as u64))
    }

    /// Images used to fit the standardization transforms.
    pub fn fitting(&self, index: usize) -> ProceduralImage {
        ProceduralImage::from_seed(mix(mix(self.seed, 0xF17), index as u64))
    }

    /// Images never used for training or fitting.
    pub fn held_out(&self, index: usize) -> ProceduralImage {
        ProceduralImage::from_seed(mix(mix(self.seed, 0xE7A1), index as u64))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TermLoss {
    pub patch_mse: f64,
    pub summary_cosine: Option<f64>,
}

/// One line of the training log: mean losses of one partition in one iteration.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LogRecord {
    pub iter: usize,
    pub stage: usize,
    pub partition: usize,
    pub resolution: usize,
    pub images: usize,
    pub losses: BTreeMap<String, TermLoss>,
    pub total: f64,
    /// Infinite fidelity serializes as `null`.
    pub fidelity: BTreeMap<String, f64>,
}

pub struct Trainer {
    config: TrainConfig,
    teachers: BTreeMap<String, Teacher>,
    fitted: BTreeMap<String, PhiSTransform>,
    standardizers: BTreeMap<String, PhiSTransform>,
    model: StudentModel,
    data: DataStream,
    iteration: usize,
}

impl Trainer {
    /// Builds teachers, fits one transform per teacher and initializes the student.
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let data = DataStream::new(config.seed);
        let teachers = config
            .teachers
            .iter()
            .map(|s| Ok((s.id.clone(), Teacher::new(s.clone())?)))
            .collect::<Result<BTreeMap<_, _>>>()?;
        let fit_res = config.phis.fit_resolution.unwrap_or_else(|| {
            config
                .stages
                .first()
                .and_then(|s| s.resolutions.iter().min().copied())
                .unwrap_or(64)
        });
        let fit_images: Vec<ProceduralImage> = (0..config.phis.fit_images).map(|i| data.fitting(i)).collect();
        let mut fitted = BTreeMap::new();
        for (id, t) in &teachers {
            let res = match t.spec().native_res {
                NativeRes::Fixed(n) => n,
                NativeRes::Any => fit_res,
            };
            let maps = fit_images
                .iter()
                .map(|img| Ok(t.features(&img.render(res)?)?.patch))
                .collect::<Result<Vec<_>>>()?;
            fitted.insert(id.clone(), PhiSTransform::fit_maps(&maps)?);
        }
        let standardizers = if config.phis.enabled {
            fitted.clone()
        } else {
            fitted
                .iter()
                .map(|(id, t)| (id.clone(), PhiSTransform::identity(t.channels)))
                .collect()
        };
        let roster: Vec<(String, usize)> = config.teachers.iter().map(|t| (t.id.clone(), t.channels)).collect();
        let model = StudentModel::new(config.student.clone(), &roster, mix(config.seed, 0x5EED))?;
        Ok(Self {
            config,
            teachers,
            fitted,
            standardizers,
            model,
            data,
            iteration: 0,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn model(&self) -> &StudentModel {
        &self.model
    }

    pub fn model_mut(&mut self) -> &mut StudentModel {
        &mut self.model
    }

    pub fn data(&self) -> DataStream {
        self.data
    }

    /// Transforms applied to training targets (identity when disabled).
    pub fn standardizers(&self) -> &BTreeMap<String, PhiSTransform> {
        &self.standardizers
    }

    /// Fitted standardizations, always available for fidelity reporting.
    pub fn fitted(&self) -> &BTreeMap<String, PhiSTransform> {
        &self.fitted
    }

    pub fn teacher(&self, id: &str) -> Result<&Teacher> {
        self.teachers
            .get(id)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown teacher {id}")))
    }

    /// Raw teacher outputs aligned with student inputs at resolution `res`.
    pub fn teacher_outputs<I: ImageSource>(&self, id: &str, images: &[I], res: usize) -> Result<Vec<TeacherOutput>> {
        let t = self.teacher(id)?;
        let native = match t.spec().native_res {
            NativeRes::Any => return images.iter().map(|img| t.features(&img.render(res)?)).collect(),
            NativeRes::Fixed(n) if n <= res => {
                return images.iter().map(|img| t.features(&img.render(n)?)).collect();
            }
            NativeRes::Fixed(n) => n,
        };
        let rendered = images.iter().map(|img| img.render(res)).collect::<Result<Vec<_>>>()?;
        let patches = high_res_targets(t, &rendered, native, self.config.high_res_mode)?;
        patches
            .into_iter()
            .zip(images)
            .map(|(patch, img)| {
                let summary = if t.spec().summary {
                    t.features(&img.render(native)?)?.summary
                } else {
                    None
                };
                Ok(TeacherOutput { patch, summary })
            })
            .collect()
    }

    fn targets_for<I: ImageSource>(&self, teachers: &[String], images: &[I], res: usize) -> Result<Vec<Vec<Target>>> {
        let mut per_image: Vec<Vec<Target>> = vec![Vec::with_capacity(teachers.len()); images.len()];
        for id in teachers {
            for (slot, out) in per_image.iter_mut().zip(self.teacher_outputs(id, images, res)?) {
                slot.push(standardize(id, &out, &self.standardizers)?);
            }
        }
        Ok(per_image)
    }

    /// Standardized targets for every image of a batch, as used in training.
    pub fn batch_targets<I: ImageSource>(&self, teachers: &[String], images: &[I], res: usize) -> Result<Vec<(FeatureMap, Vec<Target>)>> {
        let targets = self.targets_for(teachers, images, res)?;
        images
            .iter()
            .zip(targets)
            .map(|(img, t)| Ok((img.render(res)?, t)))
            .collect()
    }

    fn true_fidelity(&self, id: &str, standardized_mse: f64) -> f64 {
        let std_phi_sq = self.standardizers[id].phi_sq();
        fidelity_from_mse(self.fitted[id].phi_sq(), standardized_mse * std_phi_sq)
    }

    /// Runs stage `index` of the configuration, calling `sink` on each record.
    pub fn run_stage(&mut self, index: usize, sink: &mut dyn FnMut(&LogRecord)) -> Result<Vec<LogRecord>> {
        let stage = match self.config.stages.get(index) {
            Some(s) => s.clone(),
            None => return invalid(format!("no stage {index}")),
        };
        let sizes = partition_sizes(&stage, self.config.batch_size)?;
        let scale = 1.0 / self.config.batch_size as f64;
        let lr = self.config.learning_rate;
        let mut log = Vec::new();
        for it in 0..stage.iterations {
            self.iteration += 1;
            let mut grads = vec![0.0; self.model.num_params()];
            for (p, part) in stage.partitions.iter().enumerate() {
                let images: Vec<ProceduralImage> = partition_images(&sizes, p, it)
                    .map(|i| self.data.training(stage.stage, i))
                    .collect();
                let batch = self.batch_targets(&part.teachers, &images, part.resolution)?;
                let mut losses: BTreeMap<String, TermLoss> = BTreeMap::new();
                let mut total = 0.0;
                for (img, targets) in &batch {
                    let trace = self.model.trace(img)?;
                    let r = loss_and_grad(
                        &self.model,
                        &trace,
                        targets,
                        &self.standardizers,
                        &self.config.weights,
                        scale,
                        Some(&mut grads),
                    )?;
                    total += r.total;
                    for (id, tl) in r.per_teacher {
                        let e = losses.entry(id).or_insert(TermLoss {
                            patch_mse: 0.0,
                            summary_cosine: tl.summary_cosine.map(|_| 0.0),
                        });
                        e.patch_mse += tl.patch_mse;
                        if let (Some(a), Some(b)) = (e.summary_cosine.as_mut(), tl.summary_cosine) {
                            *a += b;
                        }
                    }
                }
                let k = batch.len() as f64;
                total /= k;
                for l in losses.values_mut() {
                    l.patch_mse /= k;
                    if let Some(c) = l.summary_cosine.as_mut() {
                        *c /= k;
                    }
                }
                if !total.is_finite() || total > DIVERGENCE_THRESHOLD {
                    return Err(Error::Divergence {
                        iteration: self.iteration,
                        loss: total,
                    });
                }
                let fidelity = losses
                    .iter()
                    .map(|(id, l)| (id.clone(), self.true_fidelity(id, l.patch_mse)))
                    .collect();
                let rec = LogRecord {
                    iter: self.iteration,
                    stage: stage.stage,
                    partition: p,
                    resolution: part.resolution,
                    images: batch.len(),
                    losses,
                    total,
                    fidelity,
                };
                sink(&rec);
                log.push(rec);
            }
            for (v, g) in self.model.values_mut().iter_mut().zip(&grads) {
                *v -= lr * g;
            }
        }
        Ok(log)
    }

    pub fn run(&mut self, sink: &mut dyn FnMut(&LogRecord)) -> Result<Vec<LogRecord>> {
        let mut log = Vec::new();
        for i in 0..self.config.stages.len() {
            log.extend(self.run_stage(i, sink)?);
        }
        Ok(log)
    }

    /// Fidelity of the student to teacher `id` at resolution `res`, measured
    /// in the teacher's own feature space over `images`.
    pub fn evaluate_fidelity<I: ImageSource>(&self, id: &str, images: &[I], res: usize) -> Result<f64> {
        if images.is_empty() {
            return invalid("no evaluation images");
        }
        let outputs = self.teacher_outputs(id, images, res)?;
        let std = &self.standardizers[id];
        let mut mse = 0.0;
        for (img, out) in images.iter().zip(&outputs) {
            let trace = self.model.trace(&img.render(res)?)?;
            let (th, tw, _) = out.patch.shape();
            let pred = std.invert(&predict_patch(&self.model, &trace, id, th, tw)?)?;
            mse += pred.mse(&out.patch)?;
        }
        Ok(fidelity_from_mse(self.fitted[id].phi_sq(), mse / images.len() as f64))
    }
}

/// Patch targets of a fixed-resolution teacher for images smaller than its
/// native side, via mosaics or one padded canvas per image.
pub fn high_res_targets(teacher: &Teacher, images: &[FeatureMap], native: usize, mode: HighResMode) -> Result<Vec<FeatureMap>> {
    let patch = teacher.spec().patch;
    let Some(first) = images.first() else {
        return Ok(Vec::new());
    };
    let res = first.height();
    match mode {
        HighResMode::Mosaic => {
            let layout = MosaicLayout::layout_for(res, native, patch)?;
            let mut out = Vec::with_capacity(images.len());
            for chunk in images.chunks(layout.images_per_canvas()) {
                let canvas = layout.pack(chunk, PAD_VALUE)?;
                let feats = teacher.features(&canvas)?.patch;
                out.extend(layout.unpack_features(&feats)?.into_iter().take(chunk.len()));
            }
            Ok(out)
        }
        HighResMode::PadCrop => images
            .iter()
            .map(|img| {
                let canvas = pad_to_canvas(img, native, PAD_VALUE)?;
                crop_padded_features(&teacher.features(&canvas)?.patch, img.height(), patch)
            })
            .collect(),
    }
}
