//! Long-video inference: overlapping windows whose noise predictions are
//! averaged per frame at every denoising step.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::appearance::ReferenceImage;
use crate::backbone::AppearanceEmbedding;
use crate::diffusion::{noise_at, reverse_step_to, seeded_normal, NoiseSchedule, SamplerMode, SamplerSettings};
use crate::error::{invalid, Result};
use crate::model::AnimateModel;
use crate::pose_control::{pose_sequence_tensor, PoseMap};
use crate::synthdata::{write_rgb_png, VideoClip};

/// Window layout over an `N`-frame sequence. Window `w` covers slots
/// `start_w .. start_w + K`; slots past the end wrap to frames `0, 1, …`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentPlan {
    pub n_frames: usize,
    pub k: usize,
    pub s: usize,
    /// Number of windows beyond the first.
    pub n: usize,
    pub starts: Vec<usize>,
    /// Borrowed slots in the last window.
    pub pad_len: usize,
}

pub fn plan_segments(n_frames: usize, k: usize, s: usize) -> Result<SegmentPlan> {
    if n_frames == 0 || k == 0 {
        return Err(invalid!("N and K must be positive, got N={n_frames} K={k}"));
    }
    if k > n_frames {
        return Err(invalid!("segment length K={k} exceeds sequence length N={n_frames}"));
    }
    if s >= k {
        return Err(invalid!("overlap s={s} must be < K={k}"));
    }
    if n_frames == k {
        return Ok(SegmentPlan { n_frames, k, s, n: 0, starts: vec![0], pad_len: 0 });
    }
    if s == 0 {
        return Err(invalid!("overlap s must be positive"));
    }
    Ok(strided(n_frames, k, s))
}

fn strided(n_frames: usize, k: usize, s: usize) -> SegmentPlan {
    let step = k - s;
    let n = (n_frames - k).div_ceil(step);
    let starts: Vec<usize> = (0..=n).map(|g| g * step).collect();
    let pad_len = (starts[n] + k).saturating_sub(n_frames);
    SegmentPlan { n_frames, k, s, n, starts, pad_len }
}

impl SegmentPlan {
    /// Back-to-back windows with no overlap; the tail window is padded.
    pub fn disjoint(n_frames: usize, k: usize) -> Result<Self> {
        if k == 0 || k > n_frames {
            return Err(invalid!("need 0 < K <= N, got N={n_frames} K={k}"));
        }
        Ok(strided(n_frames, k, 0))
    }

    pub fn windows(&self) -> usize {
        self.starts.len()
    }

    /// Frame index feeding `slot` of the window starting at `start`.
    pub fn frame_of(&self, start: usize, slot: usize) -> usize {
        let j = start + slot;
        if j < self.n_frames {
            j
        } else {
            j - self.n_frames
        }
    }

    pub fn is_pad(&self, start: usize, slot: usize) -> bool {
        start + slot >= self.n_frames
    }

    pub fn window_frames(&self, w: usize) -> Vec<usize> {
        (0..self.k).map(|slot| self.frame_of(self.starts[w], slot)).collect()
    }

    /// Frames `i` such that a window edge lies between `i` and `i + 1`.
    pub fn boundaries(&self) -> Vec<usize> {
        let mut out: Vec<usize> = self
            .starts
            .iter()
            .flat_map(|&st| {
                let lead = st.checked_sub(1);
                let end = st + self.k;
                let trail = (end < self.n_frames).then(|| end - 1);
                lead.into_iter().chain(trail)
            })
            .collect();
        out.sort_unstable();
        out.dedup();
        out
    }
}

impl fmt::Display for SegmentPlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "N={} K={} s={} n={} pad_len={}", self.n_frames, self.k, self.s, self.n, self.pad_len)?;
        for (w, &st) in self.starts.iter().enumerate() {
            let frames: Vec<String> = (0..self.k)
                .map(|slot| {
                    let j = self.frame_of(st, slot);
                    if self.is_pad(st, slot) {
                        format!("{j}*")
                    } else {
                        j.to_string()
                    }
                })
                .collect();
            writeln!(f, "window {w}: start {st} frames [{}]", frames.join(" "))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseMode {
    Shared,
    Partitioned,
}

impl FromStr for NoiseMode {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "shared" => Ok(Self::Shared),
            "partitioned" => Ok(Self::Partitioned),
            other => Err(invalid!("unknown noise mode `{other}` (expected shared or partitioned)")),
        }
    }
}

impl fmt::Display for NoiseMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Shared => "shared",
            Self::Partitioned => "partitioned",
        })
    }
}

/// What the first sampling step starts from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StartMode {
    /// The initial noise itself, `z = ε`.
    Noise,
    /// The reference image q-sampled to the first sampling timestep with the
    /// initial noise, `z = √ᾱ I_ref + √(1-ᾱ) ε`. Matches the training
    /// marginal when the schedule leaves signal at its last step.
    Reference,
}

impl FromStr for StartMode {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "noise" => Ok(Self::Noise),
            "reference" => Ok(Self::Reference),
            other => Err(invalid!("unknown start mode `{other}` (expected noise or reference)")),
        }
    }
}

impl fmt::Display for StartMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Noise => "noise",
            Self::Reference => "reference",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionConfig {
    pub noise_mode: NoiseMode,
    pub start: StartMode,
    pub sampler: SamplerSettings,
    pub seed: u64,
    /// Leave pad slots out of the per-frame average.
    pub discard_pad: bool,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self { noise_mode: NoiseMode::Shared, start: StartMode::Reference, sampler: SamplerSettings::default(), seed: 0, discard_pad: false }
    }
}

/// Stream of noise tensors for one run: initial latents, then DDPM step noise.
struct NoiseSource {
    rng: ChaCha8Rng,
    mode: NoiseMode,
    frame: (usize, usize, usize),
    dtype: DType,
    device: Device,
}

impl NoiseSource {
    fn new(cfg: &FusionConfig, frame: (usize, usize, usize), dtype: DType, device: &Device) -> Self {
        Self { rng: ChaCha8Rng::seed_from_u64(cfg.seed), mode: cfg.noise_mode, frame, dtype, device: device.clone() }
    }

    /// One `[1, C, K, H, W]` tensor per window.
    fn per_window(&mut self, plan: &SegmentPlan) -> Result<Vec<Tensor>> {
        let (c, h, w) = self.frame;
        match self.mode {
            NoiseMode::Shared => {
                // period of the window starts, so the copies agree wherever windows overlap
                let period = if plan.windows() == 1 { plan.k } else { plan.k - plan.s };
                let base = seeded_normal(&mut self.rng, &[1, c, period, h, w], self.dtype, &self.device)?;
                let z = gather_frames(&base, &(0..plan.k).map(|i| i % period).collect::<Vec<_>>())?;
                Ok(vec![z; plan.windows()])
            }
            NoiseMode::Partitioned => {
                let z = seeded_normal(&mut self.rng, &[1, c, plan.n_frames, h, w], self.dtype, &self.device)?;
                (0..plan.windows()).map(|win| gather_frames(&z, &plan.window_frames(win))).collect()
            }
        }
    }

    /// The `[1, C, N, H, W]` tensor whose windows are [`Self::per_window`].
    fn sequence(&mut self, plan: &SegmentPlan) -> Result<Tensor> {
        assemble(&self.per_window(plan)?, plan)
    }
}

/// Builds an `N`-frame tensor from per-window tensors, taking each frame from
/// the earliest window that holds it in a non-pad slot.
fn assemble(windows: &[Tensor], plan: &SegmentPlan) -> Result<Tensor> {
    let frames = (0..plan.n_frames)
        .map(|j| {
            let (w, st) = plan.starts.iter().enumerate().find(|(_, &st)| st <= j && j < st + plan.k).expect("plans cover every frame");
            windows[w].narrow(2, j - st, 1)
        })
        .collect::<candle_core::Result<Vec<_>>>()?;
    Ok(Tensor::cat(&frames, 2)?)
}

fn gather_frames(x: &Tensor, frames: &[usize]) -> Result<Tensor> {
    let idx = Tensor::from_vec(frames.iter().map(|&f| f as u32).collect::<Vec<_>>(), frames.len(), x.device())?;
    Ok(x.index_select(&idx, 2)?.contiguous()?)
}

/// Initial noise per window, `[1, C, K, H, W]` each. Shared noise repeats
/// with the window stride `K - s`, so every window receives the same tensor
/// and overlapping windows agree on their common frames.
pub fn assign_initial_noise(
    plan: &SegmentPlan,
    cfg: &FusionConfig,
    frame: (usize, usize, usize),
    dtype: DType,
    device: &Device,
) -> Result<Vec<Tensor>> {
    NoiseSource::new(cfg, frame, dtype, device).per_window(plan)
}

/// The `[1, C, N, H, W]` latent sampling starts from: the initial noise,
/// placed according to `cfg.start` at the sampler's first timestep.
pub fn start_latent(plan: &SegmentPlan, cfg: &FusionConfig, i_ref: &ReferenceImage, sched: &NoiseSchedule) -> Result<Tensor> {
    let reference = i_ref.tensor();
    let (c, h, w) = reference.dims3()?;
    let mut noise = NoiseSource::new(cfg, (c, h, w), reference.dtype(), reference.device());
    let first = cfg.sampler.timesteps(sched)?[0];
    place_start(noise.sequence(plan)?, cfg.start, reference, sched.alpha_bars[first])
}

fn place_start(eps: Tensor, start: StartMode, reference: &Tensor, alpha_bar: f64) -> Result<Tensor> {
    match start {
        StartMode::Noise => Ok(eps),
        StartMode::Reference => {
            let x0 = reference.unsqueeze(1)?.unsqueeze(0)?.broadcast_as(eps.dims())?.contiguous()?;
            noise_at(&x0, &eps, alpha_bar)
        }
    }
}

/// Averages per-window `[B, C, K, H, W]` tensors into `[B, C, N, H, W]`.
pub fn fuse_predictions(preds: &[Tensor], plan: &SegmentPlan) -> Result<Tensor> {
    fuse_predictions_with(preds, plan, false)
}

/// As [`fuse_predictions`]; with `discard_pad` the pad slots are ignored.
/// Contributions to each frame are summed in ascending (start, slot) order,
/// so the result does not depend on the order of the window list.
pub fn fuse_predictions_with(preds: &[Tensor], plan: &SegmentPlan, discard_pad: bool) -> Result<Tensor> {
    if preds.len() != plan.windows() {
        return Err(invalid!("{} predictions for a plan of {} windows", preds.len(), plan.windows()));
    }
    let dims = preds[0].dims().to_vec();
    if dims.len() != 5 || dims[2] != plan.k {
        return Err(invalid!("predictions must be [B, C, K={}, H, W], got {:?}", plan.k, dims));
    }
    if let Some(bad) = preds.iter().find(|p| p.dims() != dims.as_slice()) {
        return Err(invalid!("prediction shape {:?} differs from {:?}", bad.dims(), dims));
    }
    let mut contrib: Vec<Vec<(usize, usize, usize)>> = vec![Vec::new(); plan.n_frames];
    for (w, &st) in plan.starts.iter().enumerate() {
        for slot in 0..plan.k {
            if discard_pad && plan.is_pad(st, slot) {
                continue;
            }
            contrib[plan.frame_of(st, slot)].push((st, slot, w));
        }
    }
    let mut frames = Vec::with_capacity(plan.n_frames);
    for (j, list) in contrib.iter_mut().enumerate() {
        list.sort_unstable();
        let mut it = list.iter();
        let &(_, slot, w) = it.next().ok_or_else(|| invalid!("frame {j} is not covered by any window"))?;
        let mut sum = preds[w].narrow(2, slot, 1)?;
        for &(_, slot, w) in it {
            sum = (sum + preds[w].narrow(2, slot, 1)?)?;
        }
        frames.push(if list.len() > 1 { (sum / list.len() as f64)? } else { sum });
    }
    Ok(Tensor::cat(&frames, 2)?)
}

fn repeat_embedding(y: &AppearanceEmbedding, n: usize) -> Result<AppearanceEmbedding> {
    let states = y
        .states
        .iter()
        .map(|(id, s)| Ok((id.clone(), s.repeat((n, 1, 1))?)))
        .collect::<Result<_>>()?;
    Ok(AppearanceEmbedding { states, timestep: vec![y.timestep[0]; n] })
}

/// Seed for the reference q-sample noise of an animation run.
pub fn reference_seed(cfg: &FusionConfig) -> u64 {
    cfg.seed ^ 0x0005_EED0_F4EF
}

/// Denoises `poses.len()` frames with overlapping windows and returns the
/// clamped video `[1, 3, N, H, W]`.
///
/// One `N`-frame latent, starting from [`start_latent`], is carried through
/// the sampler. At each step every window's slice is denoised in one batch,
/// the window predictions are fused per frame and the whole latent takes a
/// single reverse step.
pub fn animate_long(
    model: &AnimateModel,
    i_ref: &ReferenceImage,
    poses: &[PoseMap],
    plan: &SegmentPlan,
    cfg: &FusionConfig,
) -> Result<Tensor> {
    if poses.len() != plan.n_frames {
        return Err(invalid!("{} pose maps for a {}-frame plan", poses.len(), plan.n_frames));
    }
    let reference = i_ref.tensor().unsqueeze(0)?;
    let (_, c, h, w) = reference.dims4()?;
    if poses.iter().any(|p| (p.height, p.width) != (h, w)) {
        return Err(invalid!("pose maps must match the {h}x{w} reference"));
    }
    let (dtype, dev) = (reference.dtype(), reference.device().clone());
    let sched = &model.schedule;
    let timesteps = cfg.sampler.timesteps(sched)?;
    let windows = plan.windows();
    let frames: Vec<Vec<usize>> = (0..windows).map(|win| plan.window_frames(win)).collect();

    let all_poses = pose_sequence_tensor(poses, dtype, &dev)?.unsqueeze(0)?;
    let window_poses = frames.iter().map(|f| gather_frames(&all_poses, f)).collect::<Result<Vec<_>>>()?;
    let window_poses = Tensor::cat(&window_poses, 0)?;

    let ref_noise = crate::appearance::reference_noise(reference_seed(cfg), reference.dims(), dtype, &dev)?;
    let mut noise = NoiseSource::new(cfg, (c, h, w), dtype, &dev);
    let mut z = place_start(noise.sequence(plan)?, cfg.start, i_ref.tensor(), sched.alpha_bars[timesteps[0]])?;

    for (i, &t) in timesteps.iter().enumerate() {
        let prev = timesteps.get(i + 1).copied();
        let y_a = repeat_embedding(&model.encode_reference(&reference, &[t], &ref_noise)?, windows)?;
        let batch = Tensor::cat(&frames.iter().map(|f| gather_frames(&z, f)).collect::<Result<Vec<_>>>()?, 0)?;
        let eps = model.predict_with_embedding(&batch, &vec![t; windows], &y_a, &window_poses)?;
        let per_window = (0..windows).map(|win| eps.narrow(0, win, 1)).collect::<candle_core::Result<Vec<_>>>()?;
        let fused = fuse_predictions_with(&per_window, plan, cfg.discard_pad)?;
        let step_noise = match (cfg.sampler.mode, t) {
            (SamplerMode::Ddpm, t) if t > 0 => Some(noise.sequence(plan)?),
            _ => None,
        };
        z = reverse_step_to(sched, &z, &fused, t, prev, cfg.sampler.mode, step_noise.as_ref(), cfg.sampler.clip_x0)?;
    }
    Ok(z.clamp(-1.0, 1.0)?)
}

/// Disjoint windows denoised with no overlap; the padded tail is discarded.
pub fn animate_independent(
    model: &AnimateModel,
    i_ref: &ReferenceImage,
    poses: &[PoseMap],
    k: usize,
    cfg: &FusionConfig,
) -> Result<Tensor> {
    let plan = SegmentPlan::disjoint(poses.len(), k)?;
    animate_long(model, i_ref, poses, &plan, &FusionConfig { discard_pad: true, ..cfg.clone() })
}

/// Converts `[1, 3, N, H, W]` into a clip carrying the given pose maps.
pub fn video_to_clip(video: &Tensor, poses: &[PoseMap]) -> Result<VideoClip> {
    let (_, c, n, h, w) = video.dims5()?;
    if c != 3 || poses.len() != n {
        return Err(invalid!("expected [1, 3, {}, H, W] video, got {:?}", poses.len(), video.dims()));
    }
    let frames = (0..n)
        .map(|i| Ok(video.narrow(2, i, 1)?.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?))
        .collect::<Result<Vec<_>>>()?;
    Ok(VideoClip { identity_seed: 0, motion_seed: 0, height: h, width: w, frames, poses: poses.to_vec() })
}

/// Writes `frame_XXXX.png` files plus a manifest describing the run.
pub fn write_video(
    dir: &Path,
    clip: &VideoClip,
    plan: &SegmentPlan,
    cfg: &FusionConfig,
    checkpoint_id: &str,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (i, f) in clip.frames.iter().enumerate() {
        write_rgb_png(&dir.join(format!("frame_{i:04}.png")), f, clip.height, clip.width)?;
    }
    let manifest = format!(
        "frames = {}\nheight = {}\nwidth = {}\nK = {}\ns = {}\nseed = {}\ncheckpoint = {}\nsampler = {}\nsteps = {}\nclip_x0 = {}\nnoise_mode = {}\nstart = {}\ndiscard_pad = {}\n",
        clip.len(),
        clip.height,
        clip.width,
        plan.k,
        plan.s,
        cfg.seed,
        checkpoint_id,
        cfg.sampler.mode,
        cfg.sampler.steps,
        cfg.sampler.clip_x0,
        cfg.noise_mode,
        cfg.start,
        cfg.discard_pad,
    );
    fs::write(dir.join("manifest.txt"), manifest)?;
    Ok(())
}
