//! Training loops, evaluation metrics and the three-network pipeline.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::datapipe::{fit_normalizer, AugmentConfig, DataError, NormalizationStats, Pipeline};
use crate::kinematics::{accumulative_error, angle_error_summary, AngleVector, FingerGeometry, KinematicsError, JOINTS};
use crate::models::{Batch, Model, ModelError, SIZE_CLASSES};
use crate::nn::ops::LossTarget;
use crate::nn::{Adam, LossKind, NnError, Mode, Rng, Tape, Tensor};
use crate::synthgen::{
    render_finger_channels, render_tactile_imprint, sample_pose, Camera, Dataset, DatasetKind, ObjectSpec, SceneConfig,
    Shape, Split, SynthError, SIZES_IN,
};

pub const REPORT_SCHEMA: u32 = 1;
/// Tolerance of the "within" criterion, degrees.
pub const WITHIN_DEG: f64 = 1.0;
const EVAL_BATCH: usize = 64;

#[derive(Debug, thiserror::Error)]
pub enum ExperimentError {
    #[error("config: {0}")]
    Config(String),
    #[error("training diverged at epoch {epoch}, step {step}: loss {loss}")]
    Diverged { epoch: usize, step: usize, loss: f64 },
    #[error("pipeline stage {stage} produced non-finite values")]
    Pipeline { stage: &'static str },
    #[error("leakage: {0}")]
    Leakage(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Kinematics(#[from] KinematicsError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

fn cfg_err<T>(m: impl Into<String>) -> Result<T, ExperimentError> {
    Err(ExperimentError::Config(m.into()))
}

/// Learning rate decays linearly per epoch from `lr_init` to `lr_final`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSchedule {
    pub epochs: usize,
    pub lr_init: f64,
    pub lr_final: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl TrainSchedule {
    /// Degree regression: 50 epochs, 1e-4 to 1e-5.
    pub fn proprio(seed: u64) -> Self {
        Self { epochs: 50, lr_init: 1e-4, lr_final: 1e-5, batch_size: 8, seed }
    }

    /// Size estimation starts at 1e-3.
    pub fn size(seed: u64) -> Self {
        Self { epochs: 50, lr_init: 1e-3, lr_final: 1e-4, batch_size: 32, seed }
    }

    pub fn tactile(seed: u64) -> Self {
        Self { epochs: 15, lr_init: 1e-3, lr_final: 1e-4, batch_size: 32, seed }
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        if self.epochs == 0 {
            return cfg_err("epochs must be >= 1");
        }
        if self.batch_size == 0 {
            return cfg_err("batch size must be >= 1");
        }
        if !(self.lr_final > 0.0 && self.lr_init >= self.lr_final && self.lr_init.is_finite()) {
            return cfg_err(format!("need lr_init >= lr_final > 0, got {} and {}", self.lr_init, self.lr_final));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        if epoch == 0 || self.epochs == 1 {
            return self.lr_init;
        }
        if epoch + 1 >= self.epochs {
            return self.lr_final;
        }
        let t = epoch as f64 / (self.epochs - 1) as f64;
        self.lr_init + (self.lr_final - self.lr_init) * t
    }
}

/// Fails unless every index carries the train tag. Guards every place that
/// fits state (weights, running statistics) from samples.
pub fn ensure_train_only(task: &dyn Task, idx: &[usize]) -> Result<(), ExperimentError> {
    match idx.iter().find(|&&i| task.split(i) != Split::Train) {
        Some(i) => Err(ExperimentError::Leakage(format!("sample {i} is not in the training split"))),
        None => Ok(()),
    }
}

/// A supervised task: turns sample indices into a batch and its target.
pub trait Task {
    fn loss_kind(&self) -> LossKind;
    fn len(&self) -> usize;
    fn split(&self, i: usize) -> Split;
    fn batch(&self, idx: &[usize], pipeline: &Pipeline, rng: &mut Rng) -> (Batch<f32>, LossTarget<f32>);

    fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.split(i) == split).collect()
    }
}

fn stack_images(images: impl Iterator<Item = Tensor<f32>>, n: usize) -> Tensor<f32> {
    let mut shape = Vec::new();
    let mut data = Vec::new();
    for img in images {
        if shape.is_empty() {
            shape = img.shape().to_vec();
        }
        data.extend_from_slice(img.data());
    }
    let mut full = vec![n];
    full.extend(shape);
    Tensor::new(&full, data).expect("images share a shape")
}

/// Camera frames regressed onto normalized joint angles.
pub struct ProprioTask<'a> {
    pub ds: &'a Dataset,
    pub stats: NormalizationStats,
}

impl<'a> ProprioTask<'a> {
    /// Fits the normalizer on the training split only.
    pub fn new(ds: &'a Dataset) -> Result<Self, ExperimentError> {
        if !matches!(ds.manifest.kind, DatasetKind::ProprioSingle | DatasetKind::ProprioDouble) {
            return cfg_err(format!("{:?} dataset cannot train the proprioception network", ds.manifest.kind));
        }
        let train: Vec<AngleVector> = ds.indices(Split::Train).iter().map(|&i| *ds.angles(i)).collect();
        Ok(Self { stats: fit_normalizer(&train)?, ds })
    }

    pub fn cameras(&self) -> usize {
        self.ds.images[0].dim(0)
    }
}

impl Task for ProprioTask<'_> {
    fn loss_kind(&self) -> LossKind {
        LossKind::Mse
    }
    fn len(&self) -> usize {
        self.ds.len()
    }
    fn split(&self, i: usize) -> Split {
        self.ds.manifest.samples[i].split
    }
    fn batch(&self, idx: &[usize], pipeline: &Pipeline, rng: &mut Rng) -> (Batch<f32>, LossTarget<f32>) {
        let x = stack_images(idx.iter().map(|&i| pipeline.image(&self.ds.images[i], rng)), idx.len());
        let t: Vec<f64> = idx.iter().flat_map(|&i| pipeline.target(self.ds.angles(i), &self.stats, rng)).collect();
        let t = Tensor::from_f64(&[idx.len(), JOINTS], &t).expect("targets");
        (Batch { x, labels: None }, LossTarget::Dense(t))
    }
}

/// Contact imprints classified as box or cylinder.
pub struct TactileTask<'a> {
    pub ds: &'a Dataset,
}

impl<'a> TactileTask<'a> {
    pub fn new(ds: &'a Dataset) -> Result<Self, ExperimentError> {
        if ds.manifest.kind != DatasetKind::Tactile {
            return cfg_err(format!("{:?} dataset cannot train the tactile network", ds.manifest.kind));
        }
        Ok(Self { ds })
    }

    fn label(&self, i: usize) -> usize {
        self.ds.manifest.samples[i].shape.expect("tactile samples carry a shape").index()
    }
}

impl Task for TactileTask<'_> {
    fn loss_kind(&self) -> LossKind {
        LossKind::CrossEntropy
    }
    fn len(&self) -> usize {
        self.ds.len()
    }
    fn split(&self, i: usize) -> Split {
        self.ds.manifest.samples[i].split
    }
    fn batch(&self, idx: &[usize], pipeline: &Pipeline, rng: &mut Rng) -> (Batch<f32>, LossTarget<f32>) {
        let x = stack_images(idx.iter().map(|&i| pipeline.image(&self.ds.images[i], rng)), idx.len());
        (Batch { x, labels: None }, LossTarget::Classes(idx.iter().map(|&i| self.label(i)).collect()))
    }
}

/// Where the size network's angle inputs come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AngleSource {
    GroundTruth,
    /// Angles the proprioception network reads off rendered frames.
    Predicted,
}

/// Angles plus shape label classified into one of four sizes. Angles are
/// z-scored with training-split statistics.
pub struct SizeTask {
    pub angles: Vec<AngleVector>,
    pub shapes: Vec<usize>,
    pub sizes: Vec<usize>,
    pub splits: Vec<Split>,
    pub stats: NormalizationStats,
}

impl SizeTask {
    pub fn new(ds: &Dataset, angles: Vec<AngleVector>) -> Result<Self, ExperimentError> {
        if ds.manifest.kind != DatasetKind::Size {
            return cfg_err(format!("{:?} dataset cannot train the size network", ds.manifest.kind));
        }
        if angles.len() != ds.len() {
            return cfg_err("one angle vector per sample required");
        }
        let s = &ds.manifest.samples;
        let splits: Vec<Split> = s.iter().map(|r| r.split).collect();
        let train: Vec<AngleVector> = (0..ds.len()).filter(|&i| splits[i] == Split::Train).map(|i| angles[i]).collect();
        Ok(Self {
            stats: fit_normalizer(&train)?,
            shapes: s.iter().map(|r| r.shape.expect("size samples carry a shape").index()).collect(),
            sizes: s.iter().map(|r| r.size.expect("size samples carry a size")).collect(),
            angles,
            splits,
        })
    }

    pub fn ground_truth(ds: &Dataset) -> Result<Self, ExperimentError> {
        Self::new(ds, ds.manifest.samples.iter().map(|r| r.angles).collect())
    }

    pub fn input(&self, angles: &[AngleVector], shapes: Vec<usize>) -> Batch<f32> {
        let z: Vec<f64> = angles.iter().flat_map(|a| self.stats.to_z(a)).collect();
        Batch { x: Tensor::from_f64(&[angles.len(), JOINTS], &z).expect("angles"), labels: Some(shapes) }
    }
}

impl Task for SizeTask {
    fn loss_kind(&self) -> LossKind {
        LossKind::CrossEntropy
    }
    fn len(&self) -> usize {
        self.angles.len()
    }
    fn split(&self, i: usize) -> Split {
        self.splits[i]
    }
    fn batch(&self, idx: &[usize], _: &Pipeline, _: &mut Rng) -> (Batch<f32>, LossTarget<f32>) {
        let a: Vec<AngleVector> = idx.iter().map(|&i| self.angles[i]).collect();
        let b = self.input(&a, idx.iter().map(|&i| self.shapes[i]).collect());
        (b, LossTarget::Classes(idx.iter().map(|&i| self.sizes[i]).collect()))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epoch_losses: Vec<f64>,
    pub epoch_lrs: Vec<f64>,
    pub steps: usize,
}

/// Minibatch Adam over the training split. Each epoch reshuffles with a
/// stream derived from the schedule seed, so runs are reproducible.
pub fn train(
    model: &mut Model<f32>,
    task: &dyn Task,
    schedule: &TrainSchedule,
    pipeline: &Pipeline,
) -> Result<TrainLog, ExperimentError> {
    schedule.validate()?;
    let train_idx = task.indices(Split::Train);
    if train_idx.is_empty() {
        return cfg_err("training split is empty");
    }
    ensure_train_only(task, &train_idx)?;
    let shapes: Vec<&[usize]> = model.params.iter().map(Tensor::shape).collect();
    let mut adam = Adam::<f32>::new(shapes);
    let root = Rng::new(schedule.seed).split_named("train");
    let mut log = TrainLog::default();
    for epoch in 0..schedule.epochs {
        let lr = schedule.lr_at(epoch);
        let mut erng = root.split(epoch as u64);
        let mut order = train_idx.clone();
        erng.shuffle(&mut order);
        let (mut total, mut count) = (0.0, 0usize);
        for (step, chunk) in order.chunks(schedule.batch_size).enumerate() {
            // Batch statistics of a single sample are degenerate.
            if chunk.len() < 2 && order.len() >= 2 {
                continue;
            }
            let mut brng = erng.split(step as u64 + 1);
            let (batch, target) = task.batch(chunk, pipeline, &mut brng);
            let mut tape = Tape::new();
            let f = match model.forward(&mut tape, &batch, Mode::Train) {
                Err(ModelError::Nn(NnError::NonFinite(_))) => {
                    return Err(ExperimentError::Diverged { epoch, step, loss: f64::NAN })
                }
                r => r?,
            };
            let loss = tape.loss(f.output, target, task.loss_kind()).map_err(ModelError::from)?;
            let value = tape.value(loss).data()[0] as f64;
            if !value.is_finite() {
                return Err(ExperimentError::Diverged { epoch, step, loss: value });
            }
            let g = tape.backward(loss).map_err(ModelError::from)?;
            let grads: Vec<Tensor<f32>> = (0..model.params.len())
                .map(|i| g.param(i).unwrap_or_else(|| Tensor::zeros(model.params[i].shape())))
                .collect();
            adam.step(&mut model.params, &grads, &model.names, lr).map_err(ModelError::from)?;
            total += value * chunk.len() as f64;
            count += chunk.len();
            log.steps += 1;
        }
        log.epoch_losses.push(total / count as f64);
        log.epoch_lrs.push(lr);
    }
    Ok(log)
}

/// Worker threads for evaluation: `GELFLEX_THREADS` if set, else the
/// available parallelism.
pub fn worker_threads() -> usize {
    std::env::var("GELFLEX_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Eval-mode outputs for `idx`, one row per index. Chunks may run on
/// several threads; rows are merged back in index order.
pub fn predict_indices(model: &Model<f32>, task: &dyn TaskSync, idx: &[usize]) -> Result<Vec<Vec<f32>>, ExperimentError> {
    let chunks: Vec<&[usize]> = idx.chunks(EVAL_BATCH).collect();
    let threads = worker_threads().min(chunks.len()).max(1);
    let run = |part: &[&[usize]]| -> Result<Vec<Vec<f32>>, ExperimentError> {
        let mut m = model.clone();
        let eval = Pipeline::eval();
        let mut rng = Rng::new(0);
        let mut out = Vec::new();
        for c in part {
            let (b, _) = task.batch(c, &eval, &mut rng);
            let y = m.predict(&b)?;
            out.extend(y.data().chunks(y.dim(1)).map(<[f32]>::to_vec));
        }
        Ok(out)
    };
    if threads == 1 {
        return run(&chunks);
    }
    let per = chunks.len().div_ceil(threads);
    std::thread::scope(|s| {
        let handles: Vec<_> = chunks.chunks(per).map(|part| s.spawn(move || run(part))).collect();
        let mut out = Vec::with_capacity(idx.len());
        for h in handles {
            out.extend(h.join().expect("evaluation thread panicked")?);
        }
        Ok(out)
    })
}

/// [`Task`] usable from evaluation threads.
pub trait TaskSync: Task + Sync {}
impl<T: Task + Sync> TaskSync for T {}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProprioMetrics {
    pub samples: usize,
    /// Fraction of samples with every joint within one degree.
    pub within_1deg: f64,
    pub mean_sum_abs_err_deg: f64,
    pub mean_max_abs_err_deg: f64,
    pub mean_accumulative_mm: f64,
    pub per_joint_mae_deg: AngleVector,
}

pub fn proprio_metrics(
    pred: &[AngleVector],
    truth: &[AngleVector],
    geom: &FingerGeometry,
) -> Result<ProprioMetrics, ExperimentError> {
    if pred.len() != truth.len() || pred.is_empty() {
        return cfg_err("need equally many predictions and truths, at least one");
    }
    let n = pred.len() as f64;
    let mut m = ProprioMetrics {
        samples: pred.len(),
        within_1deg: 0.0,
        mean_sum_abs_err_deg: 0.0,
        mean_max_abs_err_deg: 0.0,
        mean_accumulative_mm: 0.0,
        per_joint_mae_deg: [0.0; JOINTS],
    };
    let mut within = 0usize;
    for (p, t) in pred.iter().zip(truth) {
        let s = angle_error_summary(p, t);
        within += s.within(WITHIN_DEG) as usize;
        m.mean_sum_abs_err_deg += s.sum_abs_err;
        m.mean_max_abs_err_deg += s.max_abs_err;
        m.mean_accumulative_mm += accumulative_error(p, t, geom)?;
        for j in 0..JOINTS {
            m.per_joint_mae_deg[j] += s.per_joint_abs_err[j];
        }
    }
    m.within_1deg = within as f64 / n;
    m.mean_sum_abs_err_deg /= n;
    m.mean_max_abs_err_deg /= n;
    m.mean_accumulative_mm /= n;
    for v in &mut m.per_joint_mae_deg {
        *v /= n;
    }
    Ok(m)
}

/// Predicted angles in degrees for `idx`.
pub fn predict_angles(model: &Model<f32>, task: &ProprioTask, idx: &[usize]) -> Result<Vec<AngleVector>, ExperimentError> {
    let rows = predict_indices(model, task, idx)?;
    Ok(rows
        .iter()
        .map(|r| {
            let t: [f64; JOINTS] = std::array::from_fn(|j| r[j] as f64);
            crate::datapipe::denormalize(&t, &task.stats)
        })
        .collect())
}

pub fn evaluate_proprio(
    model: &Model<f32>,
    task: &ProprioTask,
    split: Split,
    geom: &FingerGeometry,
) -> Result<ProprioMetrics, ExperimentError> {
    let idx = task.indices(split);
    let pred = predict_angles(model, task, &idx)?;
    let truth: Vec<AngleVector> = idx.iter().map(|&i| *task.ds.angles(i)).collect();
    proprio_metrics(&pred, &truth, geom)
}

/// Copy of `ds` whose `split` frames are scaled by a per-sample gain drawn
/// uniformly from `range`. Other samples are untouched, so normalizer
/// statistics fitted on the training split do not change.
pub fn gain_perturbed(ds: &Dataset, split: Split, range: (f64, f64), seed: u64) -> Dataset {
    let root = Rng::new(seed).split_named("gain");
    let mut out = ds.clone();
    for i in ds.indices(split) {
        let mut rng = root.split(i as u64);
        let img = &out.images[i];
        let gains: Vec<f32> = (0..img.dim(0)).map(|_| rng.uniform_range(range.0, range.1) as f32).collect();
        out.images[i] = crate::datapipe::adjust_image(img, 1.0, &gains);
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierMetrics {
    pub samples: usize,
    pub accuracy: f64,
    /// Rows are true classes, columns predictions.
    pub confusion: Vec<Vec<usize>>,
    pub per_class_accuracy: Vec<f64>,
}

pub fn classifier_metrics(pred: &[usize], truth: &[usize], classes: usize) -> Result<ClassifierMetrics, ExperimentError> {
    if pred.len() != truth.len() || pred.is_empty() {
        return cfg_err("need equally many predictions and labels, at least one");
    }
    if pred.iter().chain(truth).any(|&c| c >= classes) {
        return cfg_err(format!("class index out of range for {classes} classes"));
    }
    let mut confusion = vec![vec![0usize; classes]; classes];
    for (&p, &t) in pred.iter().zip(truth) {
        confusion[t][p] += 1;
    }
    let correct: usize = (0..classes).map(|c| confusion[c][c]).sum();
    let per_class_accuracy = confusion
        .iter()
        .enumerate()
        .map(|(c, row)| {
            let n: usize = row.iter().sum();
            if n == 0 { f64::NAN } else { row[c] as f64 / n as f64 }
        })
        .collect();
    Ok(ClassifierMetrics { samples: pred.len(), accuracy: correct as f64 / pred.len() as f64, confusion, per_class_accuracy })
}

pub fn argmax(row: &[f32]) -> usize {
    row.iter().enumerate().fold(0, |best, (i, &v)| if v > row[best] { i } else { best })
}

/// Class predictions and labels for `idx`.
pub fn predict_classes(model: &Model<f32>, task: &dyn TaskSync, idx: &[usize]) -> Result<(Vec<usize>, Vec<usize>), ExperimentError> {
    let rows = predict_indices(model, task, idx)?;
    let pred = rows.iter().map(|r| argmax(r)).collect();
    let mut rng = Rng::new(0);
    let truth = match task.batch(idx, &Pipeline::eval(), &mut rng).1 {
        LossTarget::Classes(c) => c,
        LossTarget::Dense(_) => return cfg_err("classifier evaluation needs class targets"),
    };
    Ok((pred, truth))
}

pub fn evaluate_classifier(model: &Model<f32>, task: &dyn TaskSync, split: Split) -> Result<ClassifierMetrics, ExperimentError> {
    let idx = task.indices(split);
    let (pred, truth) = predict_classes(model, task, &idx)?;
    classifier_metrics(&pred, &truth, model.spec.outputs)
}

/// Renders the frame of each size-dataset pose and reads the angles back
/// with the proprioception network.
pub fn predicted_size_angles(
    size_ds: &Dataset,
    proprio: &Model<f32>,
    stats: &NormalizationStats,
) -> Result<Vec<AngleVector>, ExperimentError> {
    let cfg = &size_ds.manifest.cfg;
    let cams = cameras_for(proprio)?;
    let mut model = proprio.clone();
    let mut out = Vec::with_capacity(size_ds.len());
    for chunk in size_ds.manifest.samples.chunks(EVAL_BATCH) {
        let x = stack_images(chunk.iter().map(|r| render_finger_channels(&r.angles, cfg, cams)), chunk.len());
        let y = model.predict(&Batch { x, labels: None })?;
        for r in y.data().chunks(JOINTS) {
            let t: [f64; JOINTS] = std::array::from_fn(|j| r[j] as f64);
            out.push(crate::datapipe::denormalize(&t, stats));
        }
    }
    Ok(out)
}

fn cameras_for(proprio: &Model<f32>) -> Result<&'static [Camera], ExperimentError> {
    match proprio.spec.input.first() {
        Some(1) => Ok(&[Camera::Mid]),
        Some(2) => Ok(&[Camera::Mid, Camera::Tip]),
        other => cfg_err(format!("proprioception input with {other:?} channels")),
    }
}

/// The three trained networks and the statistics they were trained with.
#[derive(Clone, Debug)]
pub struct PipelineModels {
    pub proprio: Model<f32>,
    pub proprio_stats: NormalizationStats,
    pub tactile: Model<f32>,
    pub size: Model<f32>,
    /// z-score statistics of the size network's angle inputs.
    pub size_stats: NormalizationStats,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialOutcome {
    pub object: usize,
    pub trial: usize,
    pub shape: Shape,
    pub size: usize,
    pub angles: AngleVector,
    pub predicted_angles: AngleVector,
    pub predicted_shape: Shape,
    pub predicted_size: usize,
    pub shape_confidence: f64,
    pub size_confidence: f64,
}

impl TrialOutcome {
    pub fn shape_correct(&self) -> bool {
        self.shape == self.predicted_shape
    }
    pub fn size_correct(&self) -> bool {
        self.size == self.predicted_size
    }
}

fn finite(t: &Tensor<f32>, stage: &'static str) -> Result<(), ExperimentError> {
    if t.all_finite() { Ok(()) } else { Err(ExperimentError::Pipeline { stage }) }
}

/// One grasp: pose and frame from the object, angles from the frame, shape
/// from the imprint, size from angles and shape.
pub fn run_pipeline(
    models: &PipelineModels,
    scenario: &ObjectSpec,
    cfg: &SceneConfig,
    rng: &mut Rng,
) -> Result<TrialOutcome, ExperimentError> {
    let angles = sample_pose(rng, Some(scenario), cfg).map(|v| v as f32 as f64);
    let frame = render_finger_channels(&angles, cfg, cameras_for(&models.proprio)?);
    finite(&frame, "render")?;
    let mut shape = vec![1];
    shape.extend_from_slice(frame.shape());
    let y = models.proprio.clone().predict(&Batch { x: frame.reshape(&shape).expect("frame"), labels: None })?;
    finite(&y, "proprioception")?;
    let t: [f64; JOINTS] = std::array::from_fn(|j| y.data()[j] as f64);
    let predicted_angles = crate::datapipe::denormalize(&t, &models.proprio_stats);

    let imprint = render_tactile_imprint(scenario, rng, cfg);
    let mut shape = vec![1];
    shape.extend_from_slice(imprint.shape());
    let p = models.tactile.clone().predict(&Batch { x: imprint.reshape(&shape).expect("imprint"), labels: None })?;
    finite(&p, "tactile")?;
    let shape_idx = argmax(p.data());

    let z = models.size_stats.to_z(&predicted_angles);
    let x = Tensor::from_f64(&[1, JOINTS], &z).expect("angles");
    let q = models.size.clone().predict(&Batch { x, labels: Some(vec![shape_idx]) })?;
    finite(&q, "size")?;
    let size_idx = argmax(q.data());
    Ok(TrialOutcome {
        object: scenario.shape.index() * SIZES_IN.len() + scenario.size,
        trial: 0,
        shape: scenario.shape,
        size: scenario.size,
        angles,
        predicted_angles,
        predicted_shape: Shape::from_index(shape_idx).expect("two shape classes"),
        predicted_size: size_idx,
        shape_confidence: p.data()[shape_idx] as f64,
        size_confidence: q.data()[size_idx] as f64,
    })
}

/// Every object (two shapes by four sizes) grasped `trials` times.
pub fn run_protocol(
    models: &PipelineModels,
    cfg: &SceneConfig,
    trials: usize,
    seed: u64,
) -> Result<Vec<TrialOutcome>, ExperimentError> {
    if trials == 0 {
        return cfg_err("trials must be >= 1");
    }
    let root = Rng::new(seed).split_named("pipeline");
    let mut out = Vec::with_capacity(8 * trials);
    for shape in Shape::ALL {
        for size in 0..SIZE_CLASSES {
            let obj = ObjectSpec::new(shape, size);
            let o = shape.index() * SIZE_CLASSES + size;
            for t in 0..trials {
                let mut rng = root.split((o * trials + t) as u64);
                let mut r = run_pipeline(models, &obj, cfg, &mut rng)?;
                r.trial = t;
                out.push(r);
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineSummary {
    pub trials: usize,
    pub shape_correct: usize,
    pub size_correct: usize,
    pub size_confusion: Vec<Vec<usize>>,
    pub shape_confusion: Vec<Vec<usize>>,
}

pub fn summarize_protocol(outcomes: &[TrialOutcome]) -> Result<PipelineSummary, ExperimentError> {
    let sizes = classifier_metrics(
        &outcomes.iter().map(|o| o.predicted_size).collect::<Vec<_>>(),
        &outcomes.iter().map(|o| o.size).collect::<Vec<_>>(),
        SIZE_CLASSES,
    )?;
    let shapes = classifier_metrics(
        &outcomes.iter().map(|o| o.predicted_shape.index()).collect::<Vec<_>>(),
        &outcomes.iter().map(|o| o.shape.index()).collect::<Vec<_>>(),
        2,
    )?;
    Ok(PipelineSummary {
        trials: outcomes.len(),
        shape_correct: outcomes.iter().filter(|o| o.shape_correct()).count(),
        size_correct: outcomes.iter().filter(|o| o.size_correct()).count(),
        size_confusion: sizes.confusion,
        shape_confusion: shapes.confusion,
    })
}

/// Everything a training or evaluation run reports. Wall-clock time is kept
/// out so identical runs serialize identically.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub schema_version: u32,
    pub task: String,
    pub model: String,
    pub model_hash: String,
    pub seed: u64,
    pub config_hash: String,
    /// Split the metrics were computed on.
    pub split: Split,
    pub schedule: Option<TrainSchedule>,
    pub train: Option<TrainLog>,
    pub proprio: Option<ProprioMetrics>,
    pub classifier: Option<ClassifierMetrics>,
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// `report.json`, `losses.csv` and, for classifiers, `confusion.csv`.
    pub fn write(&self, dir: &Path) -> Result<(), ExperimentError> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("report.json"), self.to_json())?;
        if let Some(log) = &self.train {
            let mut f = std::fs::File::create(dir.join("losses.csv"))?;
            writeln!(f, "epoch,lr,loss")?;
            for (e, (l, lr)) in log.epoch_losses.iter().zip(&log.epoch_lrs).enumerate() {
                writeln!(f, "{e},{lr},{l}")?;
            }
        }
        if let Some(c) = &self.classifier {
            std::fs::write(dir.join("confusion.csv"), confusion_csv(&c.confusion))?;
        }
        Ok(())
    }
}

pub fn confusion_csv(m: &[Vec<usize>]) -> String {
    let mut s = String::from("true");
    for j in 0..m.len() {
        s.push_str(&format!(",pred_{j}"));
    }
    s.push('\n');
    for (i, row) in m.iter().enumerate() {
        s.push_str(&i.to_string());
        for v in row {
            s.push_str(&format!(",{v}"));
        }
        s.push('\n');
    }
    s
}

/// Wall-clock timer for the side file that carries runtimes.
pub struct Stopwatch(Instant);

impl Stopwatch {
    pub fn start() -> Self {
        Self(Instant::now())
    }
    pub fn secs(&self) -> f64 {
        self.0.elapsed().as_secs_f64()
    }
}

/// Default augmentation of the proprioception pipeline.
pub fn proprio_pipeline(augment: bool) -> Pipeline {
    if augment { Pipeline::train(AugmentConfig::default()) } else { Pipeline::train(AugmentConfig::identity()) }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Proprio,
    Tactile,
    Size,
}

impl std::str::FromStr for TaskKind {
    type Err = ExperimentError;
    fn from_str(s: &str) -> Result<Self, ExperimentError> {
        match s {
            "proprio" => Ok(Self::Proprio),
            "tactile" => Ok(Self::Tactile),
            "size" => Ok(Self::Size),
            _ => cfg_err(format!("unknown task {s:?} (proprio, tactile, size)")),
        }
    }
}

impl std::fmt::Display for TaskKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Proprio => "proprio",
            Self::Tactile => "tactile",
            Self::Size => "size",
        })
    }
}

/// What a checkpoint needs besides its tensors to be evaluated again.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub task: TaskKind,
    /// Target normalization (proprio) or input z-scores (size).
    pub stats: Option<NormalizationStats>,
    pub angle_source: Option<AngleSource>,
    pub schedule: TrainSchedule,
    pub config_hash: String,
    pub scene: SceneConfig,
}

/// A trained network with its metadata and test-split report.
#[derive(Clone, Debug)]
pub struct Trained {
    pub model: Model<f32>,
    pub meta: CheckpointMeta,
    pub report: MetricsReport,
}

impl Trained {
    pub fn save(&self, path: &Path) -> Result<(), ExperimentError> {
        let extra = serde_json::to_value(&self.meta).expect("meta serializes");
        self.model.to_checkpoint(self.meta.schedule.seed, extra).save(path).map_err(ModelError::from)?;
        Ok(())
    }
}

pub fn load_checkpoint(path: &Path) -> Result<(Model<f32>, CheckpointMeta), ExperimentError> {
    let ck = crate::nn::Checkpoint::load(path).map_err(ModelError::from)?;
    let meta: CheckpointMeta = serde_json::from_value(ck.header.extra.clone())
        .map_err(|e| ExperimentError::Config(format!("checkpoint metadata: {e}")))?;
    Ok((Model::from_checkpoint(&ck)?, meta))
}

fn report_for(
    task: TaskKind,
    model: &Model<f32>,
    schedule: Option<&TrainSchedule>,
    seed: u64,
    config_hash: &str,
    split: Split,
) -> MetricsReport {
    MetricsReport {
        schema_version: REPORT_SCHEMA,
        task: task.to_string(),
        model: model.spec.name.clone(),
        model_hash: model.spec.hash(),
        seed,
        config_hash: config_hash.to_string(),
        split,
        schedule: schedule.cloned(),
        train: None,
        proprio: None,
        classifier: None,
    }
}

/// Replaces every batch-norm buffer with the mean of per-batch statistics
/// over `idx`, computed with the trained weights. Training leaves buffers
/// that trail the weights by the momentum's horizon; this pass removes
/// that lag.
pub fn recalibrate_batchnorm(
    model: &mut Model<f32>,
    task: &dyn Task,
    idx: &[usize],
    batch_size: usize,
) -> Result<(), ExperimentError> {
    ensure_train_only(task, idx)?;
    if model.running.is_empty() {
        return Ok(());
    }
    let eval = Pipeline::eval();
    let mut sums: std::collections::BTreeMap<String, (Vec<f64>, Vec<f64>)> = model
        .running
        .iter()
        .map(|(k, r)| (k.clone(), (vec![0.0; r.mean.len()], vec![0.0; r.mean.len()])))
        .collect();
    let mut batches = 0usize;
    let mut rng = Rng::new(0);
    for chunk in idx.chunks(batch_size).filter(|c| c.len() >= 2) {
        // Zero momentum memory: start each layer from (0, 0) so the update
        // leaves exactly momentum * batch statistic behind.
        for r in model.running.values_mut() {
            r.mean = Tensor::zeros(r.mean.shape());
            r.var = Tensor::zeros(r.var.shape());
        }
        let (b, _) = task.batch(chunk, &eval, &mut rng);
        let mut tape = Tape::new();
        model.forward(&mut tape, &b, Mode::Train)?;
        for (k, r) in &model.running {
            let (m, v) = sums.get_mut(k).expect("same layers");
            for i in 0..m.len() {
                m[i] += r.mean.data()[i] as f64 / crate::nn::ops::BN_MOMENTUM;
                v[i] += r.var.data()[i] as f64 / crate::nn::ops::BN_MOMENTUM;
            }
        }
        batches += 1;
    }
    if batches == 0 {
        return cfg_err("recalibration needs at least one batch of two samples");
    }
    for (k, r) in model.running.iter_mut() {
        let (m, v) = &sums[k];
        let n = batches as f64;
        r.mean = Tensor::from_f64(r.mean.shape(), &m.iter().map(|x| x / n).collect::<Vec<_>>()).map_err(ModelError::from)?;
        r.var = Tensor::from_f64(r.var.shape(), &v.iter().map(|x| x / n).collect::<Vec<_>>()).map_err(ModelError::from)?;
    }
    Ok(())
}

/// Options of a proprioception training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProprioRun {
    pub schedule: TrainSchedule,
    pub augment: AugmentConfig,
    pub geometry: FingerGeometry,
}

pub fn train_proprio(ds: &Dataset, run: &ProprioRun, config_hash: &str) -> Result<Trained, ExperimentError> {
    let task = ProprioTask::new(ds)?;
    let spec = crate::models::build_proprio_cnn(task.cameras(), &ds.manifest.cfg)?;
    let mut model = Model::<f32>::init(&spec, run.schedule.seed)?;
    let log = train(&mut model, &task, &run.schedule, &Pipeline::train(run.augment.clone()))?;
    recalibrate_batchnorm(&mut model, &task, &task.indices(Split::Train), 32)?;
    let mut report = report_for(TaskKind::Proprio, &model, Some(&run.schedule), run.schedule.seed, config_hash, Split::Test);
    report.train = Some(log);
    report.proprio = Some(evaluate_proprio(&model, &task, Split::Test, &run.geometry)?);
    let meta = CheckpointMeta {
        task: TaskKind::Proprio,
        stats: Some(task.stats.clone()),
        angle_source: None,
        schedule: run.schedule.clone(),
        config_hash: config_hash.into(),
        scene: ds.manifest.cfg.clone(),
    };
    Ok(Trained { model, meta, report })
}

pub fn train_tactile(ds: &Dataset, schedule: &TrainSchedule, config_hash: &str) -> Result<Trained, ExperimentError> {
    let task = TactileTask::new(ds)?;
    let spec = crate::models::build_tactile_lenet(ds.manifest.cfg.tactile.window)?;
    let mut model = Model::<f32>::init(&spec, schedule.seed)?;
    let log = train(&mut model, &task, schedule, &Pipeline::eval())?;
    let mut report = report_for(TaskKind::Tactile, &model, Some(schedule), schedule.seed, config_hash, Split::Test);
    report.train = Some(log);
    report.classifier = Some(evaluate_classifier(&model, &task, Split::Test)?);
    let meta = CheckpointMeta {
        task: TaskKind::Tactile,
        stats: None,
        angle_source: None,
        schedule: schedule.clone(),
        config_hash: config_hash.into(),
        scene: ds.manifest.cfg.clone(),
    };
    Ok(Trained { model, meta, report })
}

/// Trains a size network on `angles` (one vector per dataset sample).
pub fn train_size(
    ds: &Dataset,
    arch: crate::models::SizeArch,
    angles: Vec<AngleVector>,
    source: AngleSource,
    schedule: &TrainSchedule,
    config_hash: &str,
) -> Result<Trained, ExperimentError> {
    let task = SizeTask::new(ds, angles)?;
    let spec = crate::models::build_size_estimator(arch)?;
    let mut model = Model::<f32>::init(&spec, schedule.seed)?;
    let log = train(&mut model, &task, schedule, &Pipeline::eval())?;
    let mut report = report_for(TaskKind::Size, &model, Some(schedule), schedule.seed, config_hash, Split::Test);
    report.train = Some(log);
    report.classifier = Some(evaluate_classifier(&model, &task, Split::Test)?);
    let meta = CheckpointMeta {
        task: TaskKind::Size,
        stats: Some(task.stats.clone()),
        angle_source: Some(source),
        schedule: schedule.clone(),
        config_hash: config_hash.into(),
        scene: ds.manifest.cfg.clone(),
    };
    Ok(Trained { model, meta, report })
}

/// Metrics of a stored model on one split of a dataset. Reads only.
pub fn evaluate_checkpoint(
    model: &Model<f32>,
    meta: &CheckpointMeta,
    ds: &Dataset,
    split: Split,
    geometry: &FingerGeometry,
    proprio: Option<(&Model<f32>, &NormalizationStats)>,
) -> Result<MetricsReport, ExperimentError> {
    let mut report = report_for(meta.task, model, None, meta.schedule.seed, &meta.config_hash, split);
    let stats = || meta.stats.clone().ok_or_else(|| ExperimentError::Config("checkpoint lacks statistics".into()));
    match meta.task {
        TaskKind::Proprio => {
            let mut task = ProprioTask::new(ds)?;
            // Targets are denormalized with the statistics fitted at training time.
            task.stats = stats()?;
            report.proprio = Some(evaluate_proprio(model, &task, split, geometry)?);
        }
        TaskKind::Tactile => {
            report.classifier = Some(evaluate_classifier(model, &TactileTask::new(ds)?, split)?);
        }
        TaskKind::Size => {
            let angles = match (meta.angle_source, proprio) {
                (Some(AngleSource::Predicted), Some((p, s))) => predicted_size_angles(ds, p, s)?,
                (Some(AngleSource::Predicted), None) => {
                    return cfg_err("size model was trained on predicted angles; a proprioception checkpoint is required")
                }
                _ => ds.manifest.samples.iter().map(|r| r.angles).collect(),
            };
            let mut task = SizeTask::new(ds, angles)?;
            task.stats = stats()?;
            report.classifier = Some(evaluate_classifier(model, &task, split)?);
        }
    }
    Ok(report)
}

/// Bundles three loaded checkpoints for [`run_protocol`].
pub fn pipeline_models(
    proprio: (Model<f32>, CheckpointMeta),
    tactile: (Model<f32>, CheckpointMeta),
    size: (Model<f32>, CheckpointMeta),
) -> Result<PipelineModels, ExperimentError> {
    let expect = |m: &CheckpointMeta, t: TaskKind| {
        if m.task == t { Ok(()) } else { cfg_err(format!("expected a {t} checkpoint, got {}", m.task)) }
    };
    expect(&proprio.1, TaskKind::Proprio)?;
    expect(&tactile.1, TaskKind::Tactile)?;
    expect(&size.1, TaskKind::Size)?;
    let missing = || ExperimentError::Config("checkpoint lacks statistics".into());
    Ok(PipelineModels {
        proprio_stats: proprio.1.stats.clone().ok_or_else(missing)?,
        size_stats: size.1.stats.clone().ok_or_else(missing)?,
        proprio: proprio.0,
        tactile: tactile.0,
        size: size.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{build_size_estimator, build_tactile_lenet, SizeArch};
    use crate::synthgen::generate_dataset;

    #[test]
    fn schedule_endpoints_are_exact() {
        let s = TrainSchedule::proprio(0);
        assert_eq!(s.lr_at(0), 1e-4);
        assert_eq!(s.lr_at(49), 1e-5);
        assert!(s.lr_at(25) < 1e-4 && s.lr_at(25) > 1e-5);
        let lrs: Vec<f64> = (0..50).map(|e| s.lr_at(e)).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
        assert_eq!(TrainSchedule::size(0).lr_at(0), 1e-3);
        assert!(TrainSchedule { epochs: 0, ..s.clone() }.validate().is_err());
        assert!(TrainSchedule { lr_final: 1e-3, ..s }.validate().is_err());
    }

    #[test]
    fn perfect_and_constant_predictors() {
        let geom = FingerGeometry::default();
        let mut rng = Rng::new(1);
        let truth: Vec<AngleVector> = (0..500).map(|_| crate::synthgen::sample_free_pose(&mut rng, (0.0, 120.0))).collect();
        let m = proprio_metrics(&truth, &truth, &geom).unwrap();
        assert_eq!(m.within_1deg, 1.0);
        assert_eq!(m.mean_accumulative_mm, 0.0);
        let mean: AngleVector = std::array::from_fn(|j| truth.iter().map(|a| a[j]).sum::<f64>() / 500.0);
        let m = proprio_metrics(&vec![mean; 500], &truth, &geom).unwrap();
        assert!(m.within_1deg < 0.01, "{}", m.within_1deg);
    }

    #[test]
    fn metrics_ignore_sample_order() {
        let geom = FingerGeometry::default();
        let mut rng = Rng::new(2);
        let truth: Vec<AngleVector> = (0..50).map(|_| crate::synthgen::sample_free_pose(&mut rng, (0.0, 120.0))).collect();
        let pred: Vec<AngleVector> = truth.iter().map(|a| a.map(|v| v + rng.normal())).collect();
        let a = proprio_metrics(&pred, &truth, &geom).unwrap();
        let (mut p2, mut t2) = (pred.clone(), truth.clone());
        p2.reverse();
        t2.reverse();
        let b = proprio_metrics(&p2, &t2, &geom).unwrap();
        assert!((a.within_1deg - b.within_1deg).abs() == 0.0);
        assert!((a.mean_accumulative_mm - b.mean_accumulative_mm).abs() < 1e-12);
    }

    #[test]
    fn confusion_rows_sum_to_class_counts() {
        let truth = [0, 0, 1, 2, 3, 3, 3];
        let m = classifier_metrics(&truth, &truth, 4).unwrap();
        assert_eq!(m.accuracy, 1.0);
        for (c, row) in m.confusion.iter().enumerate() {
            assert_eq!(row.iter().sum::<usize>(), truth.iter().filter(|&&t| t == c).count());
            assert_eq!(row[c], row.iter().sum::<usize>());
        }
        let pred = [1, 0, 1, 2, 0, 3, 3];
        let m = classifier_metrics(&pred, &truth, 4).unwrap();
        assert!((m.accuracy - 5.0 / 7.0).abs() < 1e-12);
        assert_eq!(m.confusion[3][0], 1);
        assert!(classifier_metrics(&[4], &[0], 4).is_err());
    }

    #[test]
    fn random_predictor_sits_at_chance() {
        let n = 4000;
        let truth: Vec<usize> = (0..n).map(|i| i % 4).collect();
        let ci = 4.0 * (0.25f64 * 0.75 / n as f64).sqrt();
        for seed in 0..10 {
            let mut rng = Rng::new(seed);
            let pred: Vec<usize> = (0..n).map(|_| rng.below(4)).collect();
            let acc = classifier_metrics(&pred, &truth, 4).unwrap().accuracy;
            assert!((acc - 0.25).abs() < ci, "seed {seed}: {acc}");
        }
    }

    #[test]
    fn size_training_is_deterministic_and_learns() {
        let ds = generate_dataset(DatasetKind::Size, 160, 4, &SceneConfig::default()).unwrap();
        let task = SizeTask::ground_truth(&ds).unwrap();
        let spec = build_size_estimator(SizeArch::Incorporator).unwrap();
        let sched = TrainSchedule { epochs: 30, ..TrainSchedule::size(1) };
        let run = || {
            let mut m = Model::<f32>::init(&spec, 1).unwrap();
            let log = train(&mut m, &task, &sched, &Pipeline::eval()).unwrap();
            (log, evaluate_classifier(&m, &task, Split::Train).unwrap())
        };
        let (a, ma) = run();
        let (b, mb) = run();
        assert_eq!(a, b);
        assert_eq!(ma, mb);
        assert!(a.epoch_losses.last().unwrap() < &a.epoch_losses[0]);
        assert!(ma.accuracy > 0.5, "{}", ma.accuracy);
    }

    #[test]
    fn divergence_is_reported_with_position() {
        let ds = generate_dataset(DatasetKind::Tactile, 40, 0, &SceneConfig::default()).unwrap();
        let task = TactileTask::new(&ds).unwrap();
        let spec = build_tactile_lenet(32).unwrap();
        let mut m = Model::<f32>::init(&spec, 0).unwrap();
        m.params[0] = m.params[0].map(|_| f32::NAN);
        let err = train(&mut m, &task, &TrainSchedule::tactile(0), &Pipeline::eval()).unwrap_err();
        assert!(matches!(err, ExperimentError::Diverged { epoch: 0, step: 0, .. }), "{err}");
    }

    #[test]
    fn wrong_dataset_kind_is_rejected() {
        let ds = generate_dataset(DatasetKind::Size, 80, 0, &SceneConfig::default()).unwrap();
        assert!(ProprioTask::new(&ds).is_err());
        assert!(TactileTask::new(&ds).is_err());
    }
}
