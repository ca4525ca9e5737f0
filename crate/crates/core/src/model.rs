//! The full noise estimator: appearance encoder + pose conditioner + temporal UNet.

use candle_core::Tensor;

use crate::appearance::{AppearanceEncoder, ReferenceImage};
use crate::backbone::{AppearanceEmbedding, Backbone, BackboneConfig};
use crate::diffusion::{Conditioning, NoisePredictor, NoiseSchedule};
use crate::error::{invalid, Result};
use crate::params::{ParamStore, TrainMask};
use crate::pose_control::{pose_sequence_tensor, PoseConditioner, PoseMap};

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    /// Encode the clean reference instead of the reference noised to `t`.
    pub reference_clean: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { backbone: BackboneConfig::default(), reference_clean: false }
    }
}

/// A `K`-frame noisy latent `[1, 3, K, H, W]` at timestep `t`.
#[derive(Debug, Clone)]
pub struct LatentSegment {
    pub data: Tensor,
    pub t: usize,
}

impl LatentSegment {
    pub fn new(data: Tensor, t: usize) -> Result<Self> {
        let (n, _, k, _, _) = data.dims5()?;
        if n != 1 || k == 0 {
            return Err(invalid!("latent segment must be [1, C, K>=1, H, W], got {:?}", data.dims()));
        }
        Ok(Self { data, t })
    }

    pub fn frames(&self) -> usize {
        self.data.dims()[2]
    }
}

pub struct AnimateModel {
    pub config: ModelConfig,
    pub schedule: NoiseSchedule,
    pub backbone: Backbone,
    pub appearance: AppearanceEncoder,
    pub pose: PoseConditioner,
}

impl AnimateModel {
    /// Binds (and on a fresh store, creates) every parameter. The appearance
    /// encoder and the pose conditioner's trunk start as copies of the UNet.
    pub fn new(
        store: &ParamStore,
        config: &ModelConfig,
        schedule: &NoiseSchedule,
        mask: &TrainMask,
    ) -> Result<Self> {
        let root = store.root(mask);
        let backbone = Backbone::new(&root.pp("backbone"), &config.backbone)?;
        let mut appearance = AppearanceEncoder::new(&root.pp("appearance"), &config.backbone)?;
        appearance.reference_clean = config.reference_clean;
        let pose = PoseConditioner::new(&root.pp("pose"), &config.backbone)?;
        Ok(Self { config: config.clone(), schedule: schedule.clone(), backbone, appearance, pose })
    }

    pub fn set_temporal(&mut self, on: bool) {
        self.backbone.set_temporal(on);
    }

    pub fn encode_reference(
        &self,
        reference: &Tensor,
        t: &[usize],
        noise: &Tensor,
    ) -> Result<AppearanceEmbedding> {
        self.appearance.encode(&self.schedule, reference, t, noise)
    }

    /// Noise prediction with a precomputed appearance embedding.
    pub fn predict_with_embedding(
        &self,
        z: &Tensor,
        t: &[usize],
        y_a: &AppearanceEmbedding,
        poses: &Tensor,
    ) -> Result<Tensor> {
        let y_p = self.pose.residuals(z, poses, t)?;
        self.backbone.forward(z, t, Some(y_a), Some(&y_p))
    }
}

impl NoisePredictor for AnimateModel {
    fn predict_noise(&self, z: &Tensor, t: &[usize], cond: &Conditioning) -> Result<Tensor> {
        let y_a = self.encode_reference(&cond.reference, t, &cond.reference_noise)?;
        self.predict_with_embedding(z, t, &y_a, &cond.poses)
    }
}

/// `ε(z_t, t, I_ref, p^{1:K})` for a single segment; the reference q-sample
/// noise is drawn from `reference_seed`.
pub fn predict_noise(
    model: &AnimateModel,
    z: &LatentSegment,
    i_ref: &ReferenceImage,
    p_seq: &[PoseMap],
    reference_seed: u64,
) -> Result<Tensor> {
    let k = z.frames();
    if p_seq.len() != k {
        return Err(invalid!("{} pose maps for a {k}-frame segment", p_seq.len()));
    }
    model.schedule.check_t(z.t)?;
    let reference = i_ref.tensor().unsqueeze(0)?.to_dtype(z.data.dtype())?;
    let noise = crate::appearance::reference_noise(
        reference_seed,
        reference.dims(),
        reference.dtype(),
        reference.device(),
    )?;
    let poses = pose_sequence_tensor(p_seq, z.data.dtype(), z.data.device())?.unsqueeze(0)?;
    let cond = Conditioning { reference, reference_noise: noise, poses };
    model.predict_noise(&z.data, &[z.t], &cond)
}
