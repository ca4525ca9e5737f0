//! Two-stage training: appearance + pose modules first, then temporal
//! layers only, with image/video joint sampling.

use std::fmt;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use candle_nn::optim::{AdamW, Optimizer, ParamsAdamW};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diffusion::{seeded_normal, stage1_loss, stage2_loss, Conditioning, LossBatch, NoiseSchedule};
use crate::error::{config_err, invalid, Result};
use crate::model::{AnimateModel, ModelConfig};
use crate::params::{ParamGroup, ParamStore, TrainMask};
use crate::pose_control::pose_sequence_tensor;
use crate::synthdata::VideoClip;

pub use crate::checkpoint::{
    incompatible_tensors, load_checkpoint, read_manifest, save_checkpoint, CheckpointManifest,
};

#[derive(Debug, Clone, PartialEq)]
pub struct JointTrainingConfig {
    /// Stage 1: probability of an image-reconstruction sample.
    pub tau0: f64,
    /// Stage 2: thresholds splitting reconstruction / pose-image / video cases.
    pub tau1: f64,
    pub tau2: f64,
    /// Clip length for video samples.
    pub k: usize,
    pub stage1_steps: usize,
    pub stage2_steps: usize,
    pub stage1_batch: usize,
    pub stage2_batch: usize,
    pub lr: f64,
    pub seed: u64,
    /// Also fit the denoiser's spatial weights in stage 1.
    pub train_base_in_stage1: bool,
}

impl Default for JointTrainingConfig {
    fn default() -> Self {
        Self {
            tau0: 0.3,
            tau1: 0.1,
            tau2: 0.3,
            k: 8,
            stage1_steps: 200,
            stage2_steps: 300,
            stage1_batch: 4,
            stage2_batch: 1,
            lr: 1e-3,
            seed: 7,
            train_base_in_stage1: true,
        }
    }
}

impl JointTrainingConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !unit(self.tau0) {
            return Err(config_err!("tau0 must lie in [0, 1], got {}", self.tau0));
        }
        if !(unit(self.tau1) && unit(self.tau2) && self.tau1 <= self.tau2) {
            return Err(config_err!("thresholds must satisfy 0 <= tau1 <= tau2 <= 1, got {} and {}", self.tau1, self.tau2));
        }
        if self.k == 0 || self.stage1_batch == 0 || self.stage2_batch == 0 {
            return Err(config_err!("K and batch sizes must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(config_err!("learning rate must be positive, got {}", self.lr));
        }
        Ok(())
    }

    pub fn mask(&self, stage: u8) -> TrainMask {
        match stage {
            1 => TrainMask::Stage1 { include_base: self.train_base_in_stage1 },
            _ => TrainMask::Stage2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TrainingCase {
    /// Single frame, target is the reference itself.
    ImageRecon,
    /// Single frame, target differs from the reference.
    ImagePose,
    /// `K`-frame clip.
    Video,
}

impl fmt::Display for TrainingCase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::ImageRecon => "image_recon",
            Self::ImagePose => "image_pose",
            Self::Video => "video",
        })
    }
}

/// Maps a uniform draw to a case. Ties go to the earlier branch.
pub fn select_training_case(r: f64, cfg: &JointTrainingConfig, stage: u8) -> Result<TrainingCase> {
    if !(0.0..=1.0).contains(&r) {
        return Err(invalid!("case draw must lie in [0, 1], got {r}"));
    }
    Ok(match stage {
        1 if r <= cfg.tau0 => TrainingCase::ImageRecon,
        1 => TrainingCase::ImagePose,
        2 if r <= cfg.tau1 => TrainingCase::ImageRecon,
        2 if r <= cfg.tau2 => TrainingCase::ImagePose,
        2 => TrainingCase::Video,
        s => return Err(invalid!("unknown training stage {s}")),
    })
}

/// Training corpus: videos, and optional stills used for reconstruction
/// samples.
#[derive(Debug, Clone, Default)]
pub struct TrainingData {
    pub videos: Vec<VideoClip>,
    pub stills: Vec<VideoClip>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub stage: u8,
    pub case: TrainingCase,
    pub loss: f64,
}

pub fn write_loss_trace(path: &Path, records: &[LossRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["step", "stage", "case", "loss"])?;
    for r in records {
        w.write_record([r.step.to_string(), r.stage.to_string(), r.case.to_string(), format!("{:.8}", r.loss)])?;
    }
    w.flush()?;
    Ok(())
}

/// Mean loss over the last `window` records (or all, if fewer).
pub fn smoothed_tail(records: &[LossRecord], window: usize) -> f64 {
    let tail = &records[records.len().saturating_sub(window)..];
    tail.iter().map(|r| r.loss).sum::<f64>() / tail.len().max(1) as f64
}

struct Sample {
    target: Tensor,
    reference: Tensor,
    poses: Tensor,
}

fn still_or_frame<'a>(data: &'a TrainingData, rng: &mut ChaCha8Rng) -> (&'a VideoClip, usize) {
    if data.stills.is_empty() {
        let clip = &data.videos[rng.random_range(0..data.videos.len())];
        (clip, rng.random_range(0..clip.len()))
    } else {
        let still = &data.stills[rng.random_range(0..data.stills.len())];
        (still, rng.random_range(0..still.len()))
    }
}

fn draw_sample(
    data: &TrainingData,
    case: TrainingCase,
    k: usize,
    rng: &mut ChaCha8Rng,
    dtype: DType,
    dev: &Device,
) -> Result<Sample> {
    let (clip, ref_idx, start, len) = match case {
        TrainingCase::ImageRecon => {
            let (clip, i) = still_or_frame(data, rng);
            (clip, i, i, 1)
        }
        TrainingCase::ImagePose => {
            let clip = &data.videos[rng.random_range(0..data.videos.len())];
            let r = rng.random_range(0..clip.len());
            let target = if clip.len() > 1 {
                (r + 1 + rng.random_range(0..clip.len() - 1)) % clip.len()
            } else {
                r
            };
            (clip, r, target, 1)
        }
        TrainingCase::Video => {
            let eligible: Vec<&VideoClip> = data.videos.iter().filter(|c| c.len() >= k).collect();
            if eligible.is_empty() {
                return Err(config_err!("no training video has at least K={k} frames"));
            }
            let clip = eligible[rng.random_range(0..eligible.len())];
            let start = rng.random_range(0..=clip.len() - k);
            (clip, rng.random_range(0..clip.len()), start, k)
        }
    };
    Ok(Sample {
        target: clip.segment_tensor(start, len, dtype, dev)?,
        reference: clip.frame_tensor(ref_idx, dtype, dev)?,
        poses: pose_sequence_tensor(&clip.poses[start..start + len], dtype, dev)?,
    })
}

fn draw_batch(
    data: &TrainingData,
    case: TrainingCase,
    k: usize,
    batch: usize,
    sched: &NoiseSchedule,
    rng: &mut ChaCha8Rng,
    dtype: DType,
    dev: &Device,
) -> Result<LossBatch> {
    let samples = (0..batch).map(|_| draw_sample(data, case, k, rng, dtype, dev)).collect::<Result<Vec<_>>>()?;
    let targets = Tensor::stack(&samples.iter().map(|s| s.target.clone()).collect::<Vec<_>>(), 0)?;
    let reference = Tensor::stack(&samples.iter().map(|s| s.reference.clone()).collect::<Vec<_>>(), 0)?;
    let poses = Tensor::stack(&samples.iter().map(|s| s.poses.clone()).collect::<Vec<_>>(), 0)?;
    let t: Vec<usize> = (0..batch).map(|_| rng.random_range(0..sched.len())).collect();
    let noise = seeded_normal(rng, targets.dims(), dtype, dev)?;
    let reference_noise = seeded_normal(rng, reference.dims(), dtype, dev)?;
    Ok(LossBatch { targets, cond: Conditioning { reference, reference_noise, poses }, t, noise })
}

/// Checks that exactly the parameters the stage declares are trainable.
pub fn verify_stage_mask(store: &ParamStore, mask: &TrainMask, stage: u8) -> Result<usize> {
    let trainable = store.trainable_vars(mask);
    if trainable.is_empty() {
        return Err(config_err!("stage {stage} has no trainable parameters"));
    }
    for (name, _) in &trainable {
        let group = ParamGroup::of(name);
        let allowed = match (stage, group) {
            (1, Some(ParamGroup::Appearance | ParamGroup::Pose)) => true,
            (1, Some(ParamGroup::BackboneSpatial)) => matches!(mask, TrainMask::Stage1 { include_base: true }),
            (2, Some(ParamGroup::Temporal)) => true,
            _ => false,
        };
        if !allowed {
            return Err(config_err!("parameter {name} must be frozen in stage {stage}"));
        }
    }
    Ok(trainable.len())
}

/// Callback invoked after every optimizer step.
pub type StepHook<'a> = &'a mut dyn FnMut(&LossRecord);

fn run_stage(
    store: &ParamStore,
    model_cfg: &ModelConfig,
    sched: &NoiseSchedule,
    data: &TrainingData,
    cfg: &JointTrainingConfig,
    stage: u8,
    mut hook: Option<StepHook>,
) -> Result<Vec<LossRecord>> {
    cfg.validate()?;
    if data.videos.is_empty() || data.videos.iter().any(|c| c.is_empty()) {
        return Err(config_err!("training needs at least one non-empty video"));
    }
    let mask = cfg.mask(stage);
    let mut model = AnimateModel::new(store, model_cfg, sched, &mask)?;
    model.set_temporal(stage == 2);
    verify_stage_mask(store, &mask, stage)?;
    let steps = if stage == 1 { cfg.stage1_steps } else { cfg.stage2_steps };
    if steps == 0 {
        return Ok(Vec::new());
    }
    let vars = store.trainable_vars(&mask).into_iter().map(|(_, v)| v).collect();
    let mut opt = AdamW::new(vars, ParamsAdamW { lr: cfg.lr, weight_decay: 0.0, ..Default::default() })?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(0x9E37_79B9).wrapping_add(stage as u64));
    let (dtype, dev) = (store.dtype(), store.device().clone());
    let mut records = Vec::with_capacity(steps);
    for step in 0..steps {
        let case = select_training_case(rng.random::<f64>(), cfg, stage)?;
        let (k, batch) = match case {
            TrainingCase::Video => (cfg.k, cfg.stage2_batch),
            _ if stage == 1 => (1, cfg.stage1_batch),
            _ => (1, cfg.stage2_batch),
        };
        let batch = draw_batch(data, case, k, batch, sched, &mut rng, dtype, &dev)?;
        let loss = if stage == 1 { stage1_loss(&model, sched, &batch)? } else { stage2_loss(&model, sched, &batch, k)? };
        opt.backward_step(&loss)?;
        let rec = LossRecord { step, stage, case, loss: loss.to_dtype(DType::F64)?.to_scalar::<f64>()? };
        if step % 25 == 0 || step + 1 == steps {
            log::info!("stage {stage} step {step}/{steps} {case} loss {:.5}", rec.loss);
        }
        if let Some(h) = hook.as_mut() {
            h(&rec);
        }
        records.push(rec);
    }
    Ok(records)
}

/// Trains the appearance encoder and pose conditioner (and, if configured,
/// the denoiser's spatial weights) on single frames. Temporal layers stay
/// disabled and untouched.
pub fn train_stage1(
    store: &ParamStore,
    model_cfg: &ModelConfig,
    sched: &NoiseSchedule,
    data: &TrainingData,
    cfg: &JointTrainingConfig,
    hook: Option<StepHook>,
) -> Result<Vec<LossRecord>> {
    run_stage(store, model_cfg, sched, data, cfg, 1, hook)
}

/// Trains only the temporal layers with joint image/video sampling.
pub fn train_stage2(
    store: &ParamStore,
    model_cfg: &ModelConfig,
    sched: &NoiseSchedule,
    data: &TrainingData,
    cfg: &JointTrainingConfig,
    hook: Option<StepHook>,
) -> Result<Vec<LossRecord>> {
    run_stage(store, model_cfg, sched, data, cfg, 2, hook)
}

/// Fixed-seed loss of the current parameters on `count` video batches
/// drawn from `data`, with the stage-2 network.
pub fn video_loss_probe(
    store: &ParamStore,
    model_cfg: &ModelConfig,
    sched: &NoiseSchedule,
    data: &TrainingData,
    k: usize,
    count: usize,
    seed: u64,
) -> Result<f64> {
    let model = AnimateModel::new(store, model_cfg, sched, &TrainMask::Frozen)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (dtype, dev) = (store.dtype(), store.device().clone());
    let mut total = 0.0;
    for _ in 0..count {
        let batch = draw_batch(data, TrainingCase::Video, k, 1, sched, &mut rng, dtype, &dev)?;
        total += stage2_loss(&model, sched, &batch, k)?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    }
    Ok(total / count.max(1) as f64)
}
