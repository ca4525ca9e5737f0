//! Pose conditioner: a ControlNet-style copy of the UNet's down half and
//! middle block that turns per-frame part maps into residuals for the
//! denoiser's skip connections and middle block.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Module, Tensor};

use crate::backbone::{
    fold_frames, unfold_frames, BackboneConfig, PoseResiduals, SiteHooks, SiteId, TrunkParts,
    UNetTrunk,
};
use crate::error::{invalid, Result};
use crate::nn::Conv2d;
use crate::params::ParamBuilder;

/// Body-part classes: head, torso, left arm, right arm, left leg, right leg.
pub const NUM_PARTS: usize = 6;

/// A dense part map. Pixel codes are `0` (background) or `1..=P` (part
/// `code - 1`), so each pixel has at most one active part channel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PoseMap {
    pub height: usize,
    pub width: usize,
    pub codes: Vec<u8>,
}

impl PoseMap {
    pub fn new(height: usize, width: usize, codes: Vec<u8>) -> Result<Self> {
        if codes.len() != height * width {
            return Err(invalid!("pose map has {} codes for {height}x{width}", codes.len()));
        }
        if let Some(bad) = codes.iter().find(|&&c| c as usize > NUM_PARTS) {
            return Err(invalid!("pose code {bad} exceeds part count {NUM_PARTS}"));
        }
        Ok(Self { height, width, codes })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self { height, width, codes: vec![0; height * width] }
    }

    /// One-hot channels `[P, H, W]`.
    pub fn one_hot(&self, dtype: DType, dev: &Device) -> Result<Tensor> {
        let hw = self.height * self.width;
        let mut data = vec![0f32; NUM_PARTS * hw];
        for (i, &c) in self.codes.iter().enumerate() {
            if c > 0 {
                data[(c as usize - 1) * hw + i] = 1.0;
            }
        }
        Ok(Tensor::from_vec(data, (NUM_PARTS, self.height, self.width), dev)?.to_dtype(dtype)?)
    }

    /// Pixels belonging to any part.
    pub fn foreground(&self) -> Vec<bool> {
        self.codes.iter().map(|&c| c > 0).collect()
    }
}

/// Stacks pose maps into `[P, K, H, W]`.
pub fn pose_sequence_tensor(seq: &[PoseMap], dtype: DType, dev: &Device) -> Result<Tensor> {
    if seq.is_empty() {
        return Err(invalid!("empty pose sequence"));
    }
    let frames = seq.iter().map(|p| p.one_hot(dtype, dev)).collect::<Result<Vec<_>>>()?;
    Ok(Tensor::stack(&frames, 1)?)
}

/// Residuals for a single frame: site -> `[1, C, h, w]`.
#[derive(Debug, Clone)]
pub struct FrameResiduals {
    pub residuals: BTreeMap<SiteId, Tensor>,
}

#[derive(Debug, Clone)]
pub struct PoseConditioner {
    embed: [Conv2d; 3],
    trunk: UNetTrunk,
    zero_convs: Vec<(SiteId, Conv2d)>,
}

impl PoseConditioner {
    pub fn new(vb: &ParamBuilder, cfg: &BackboneConfig) -> Result<Self> {
        let evb = vb.pp("pose_embed");
        let embed = [
            Conv2d::new(&evb.pp("conv0"), NUM_PARTS, 16, 3, 1, 1)?,
            Conv2d::new(&evb.pp("conv1"), 16, 32, 3, 1, 1)?,
            Conv2d::zeroed(&evb.pp("conv2"), 32, cfg.base_channels, 3)?,
        ];
        let parts = TrunkParts { temporal: false, up_levels: 0, output_head: false };
        let trunk = UNetTrunk::new(&vb.mirroring("backbone"), cfg, parts)?;
        let zero_convs = cfg
            .residual_sites()
            .into_iter()
            .map(|s| {
                let conv = Conv2d::zeroed(&vb.pp("zero").pp(&s.id), s.channels, s.channels, 1)?;
                Ok((s.id, conv))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { embed, trunk, zero_convs })
    }

    fn embed_pose(&self, pose: &Tensor) -> Result<Tensor> {
        let h = self.embed[0].forward(pose)?.silu()?;
        let h = self.embed[1].forward(&h)?.silu()?;
        Ok(self.embed[2].forward(&h)?)
    }

    /// Frame-wise residuals: `z` is `[B, 3, H, W]`, `pose` is `[B, P, H, W]`,
    /// `t` has one entry per frame.
    pub fn forward_frames(
        &self,
        z: &Tensor,
        pose: &Tensor,
        t: &[usize],
    ) -> Result<BTreeMap<SiteId, Tensor>> {
        let (b, _, h, w) = z.dims4()?;
        let (pb, pp, ph, pw) = pose.dims4()?;
        if (pb, ph, pw) != (b, h, w) || pp != NUM_PARTS {
            return Err(invalid!(
                "pose maps {:?} do not match latent frames {:?}",
                pose.dims(),
                z.dims()
            ));
        }
        if t.len() != b {
            return Err(invalid!("{} timesteps for {b} frames", t.len()));
        }
        let temb = self.trunk.time_embed.forward(t, 1, z.dtype(), z.device())?;
        let cond = self.embed_pose(pose)?;
        let mut hooks =
            SiteHooks { appearance: None, residuals: None, capture: None, temporal: false, n: b, k: 1 };
        let (h, skips) = self.trunk.down_pass(z, &temb, &mut hooks, Some(&cond))?;
        let mid = self.trunk.mid_pass(&h, &temb, &mut hooks)?;
        let mut out = BTreeMap::new();
        for (id, conv) in &self.zero_convs {
            let src = if id == "mid" {
                &mid
            } else {
                let idx: usize = id
                    .strip_prefix("skip.")
                    .and_then(|i| i.parse().ok())
                    .ok_or_else(|| invalid!("unknown residual site {id}"))?;
                &skips[idx]
            };
            out.insert(id.clone(), conv.forward(src)?);
        }
        Ok(out)
    }

    /// Residuals for a batch of segments: `z` is `[N, 3, K, H, W]`, `poses`
    /// is `[N, P, K, H, W]`, `t` has one entry per segment.
    pub fn residuals(&self, z: &Tensor, poses: &Tensor, t: &[usize]) -> Result<PoseResiduals> {
        let (n, _, k, _, _) = z.dims5()?;
        let (pn, _, pk, _, _) = poses.dims5()?;
        if (pn, pk) != (n, k) {
            return Err(invalid!("pose sequence {:?} does not match segment {:?}", poses.dims(), z.dims()));
        }
        if t.len() != n {
            return Err(invalid!("{} timesteps for batch of {n}", t.len()));
        }
        let per_frame_t: Vec<usize> =
            t.iter().flat_map(|&ti| std::iter::repeat_n(ti, k)).collect();
        let frames = self.forward_frames(&fold_frames(z)?, &fold_frames(poses)?, &per_frame_t)?;
        let residuals = frames
            .into_iter()
            .map(|(id, r)| Ok((id, unfold_frames(&r, n, k)?)))
            .collect::<Result<BTreeMap<_, _>>>()?;
        Ok(PoseResiduals { residuals })
    }
}

/// Residuals for one frame: `z_t_frame` is `[3, H, W]`.
pub fn encode_pose_condition(
    cond: &PoseConditioner,
    p_i: &PoseMap,
    z_t_frame: &Tensor,
    t: usize,
) -> Result<FrameResiduals> {
    let (_, h, w) = z_t_frame.dims3()?;
    if (p_i.height, p_i.width) != (h, w) {
        return Err(invalid!(
            "pose map is {}x{}, latent frame is {h}x{w}",
            p_i.height,
            p_i.width
        ));
    }
    let pose = p_i.one_hot(z_t_frame.dtype(), z_t_frame.device())?.unsqueeze(0)?;
    let residuals = cond.forward_frames(&z_t_frame.unsqueeze(0)?, &pose, &[t])?;
    Ok(FrameResiduals { residuals })
}

/// Frame-wise residuals for a `K`-frame segment `z_t` (`[1, 3, K, H, W]`),
/// stacked along the frame axis.
pub fn stack_pose_sequence(
    cond: &PoseConditioner,
    p_seq: &[PoseMap],
    z_t: &Tensor,
    t: usize,
) -> Result<PoseResiduals> {
    let (n, _, k, h, w) = z_t.dims5()?;
    if n != 1 {
        return Err(invalid!("expected a single segment, got batch {n}"));
    }
    if p_seq.len() != k {
        return Err(invalid!("{} pose maps for a {k}-frame segment", p_seq.len()));
    }
    if p_seq.iter().any(|p| (p.height, p.width) != (h, w)) {
        return Err(invalid!("pose maps must be {h}x{w}"));
    }
    let poses = pose_sequence_tensor(p_seq, z_t.dtype(), z_t.device())?.unsqueeze(0)?;
    cond.residuals(z_t, &poses, &[t])
}
