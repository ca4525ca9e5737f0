//! Noise schedule, forward noising, ε-prediction losses and reverse samplers.

use candle_core::{Device, Tensor};

use crate::error::{invalid, Result};

/// Linear β schedule with cached ᾱ.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
}

pub fn make_noise_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(invalid!("schedule needs at least one step"));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(invalid!("need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"));
    }
    let betas: Vec<f64> = if steps == 1 {
        vec![beta_start]
    } else {
        (0..steps)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
            .collect()
    };
    Ok(NoiseSchedule::from_betas(betas))
}

impl NoiseSchedule {
    pub fn from_betas(betas: Vec<f64>) -> Self {
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut acc = 1.0;
        let alpha_bars = alphas
            .iter()
            .map(|a| {
                acc *= a;
                acc
            })
            .collect();
        Self { betas, alphas, alpha_bars }
    }

    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    /// ᾱ at `t`; `None` is the position before the first step, where ᾱ = 1.
    pub fn alpha_bar(&self, t: Option<usize>) -> f64 {
        t.map_or(1.0, |t| self.alpha_bars[t])
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t >= self.len() {
            return Err(invalid!("timestep {t} outside [0, {})", self.len()));
        }
        Ok(())
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        make_noise_schedule(100, 1e-4, 0.02).expect("valid default schedule")
    }
}

/// `sqrt(ᾱ) x0 + sqrt(1 - ᾱ) eps` at an explicit ᾱ.
pub fn noise_at(x0: &Tensor, eps: &Tensor, alpha_bar: f64) -> Result<Tensor> {
    if x0.dims() != eps.dims() {
        return Err(invalid!("noise shape {:?} != sample shape {:?}", eps.dims(), x0.dims()));
    }
    Ok(((x0 * alpha_bar.sqrt())? + (eps * (1.0 - alpha_bar).sqrt())?)?)
}

pub fn forward_noise(sched: &NoiseSchedule, x0: &Tensor, t: usize, eps: &Tensor) -> Result<Tensor> {
    sched.check_t(t)?;
    noise_at(x0, eps, sched.alpha_bars[t])
}

/// Forward noising with one timestep per batch element (axis 0).
pub fn forward_noise_batched(
    sched: &NoiseSchedule,
    x0: &Tensor,
    t: &[usize],
    eps: &Tensor,
) -> Result<Tensor> {
    if x0.dims() != eps.dims() {
        return Err(invalid!("noise shape {:?} != sample shape {:?}", eps.dims(), x0.dims()));
    }
    if x0.dim(0)? != t.len() {
        return Err(invalid!("{} timesteps for batch of {}", t.len(), x0.dim(0)?));
    }
    for &ti in t {
        sched.check_t(ti)?;
    }
    let mut shape = vec![1usize; x0.rank()];
    shape[0] = t.len();
    let a: Vec<f64> = t.iter().map(|&ti| sched.alpha_bars[ti].sqrt()).collect();
    let b: Vec<f64> = t.iter().map(|&ti| (1.0 - sched.alpha_bars[ti]).sqrt()).collect();
    let a = Tensor::from_vec(a, shape.clone(), x0.device())?.to_dtype(x0.dtype())?;
    let b = Tensor::from_vec(b, shape, x0.device())?.to_dtype(x0.dtype())?;
    Ok((x0.broadcast_mul(&a)? + eps.broadcast_mul(&b)?)?)
}

/// Inverse of the forward process given the noise.
pub fn predict_x0(sched: &NoiseSchedule, z_t: &Tensor, t: usize, eps: &Tensor) -> Result<Tensor> {
    sched.check_t(t)?;
    let ab = sched.alpha_bars[t];
    Ok(((z_t - (eps * (1.0 - ab).sqrt())?)? / ab.sqrt())?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplerMode {
    Ddpm,
    /// Deterministic DDIM (η = 0).
    Ddim,
}

impl std::str::FromStr for SamplerMode {
    type Err = crate::error::Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ddpm" => Ok(SamplerMode::Ddpm),
            "ddim" => Ok(SamplerMode::Ddim),
            other => Err(invalid!("unknown sampler {other:?}")),
        }
    }
}

impl std::fmt::Display for SamplerMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SamplerMode::Ddpm => "ddpm",
            SamplerMode::Ddim => "ddim",
        })
    }
}

/// One reverse step from `t` to `t - 1`.
pub fn reverse_step(
    sched: &NoiseSchedule,
    z_t: &Tensor,
    eps_pred: &Tensor,
    t: usize,
    mode: SamplerMode,
    step_noise: Option<&Tensor>,
) -> Result<Tensor> {
    let prev = t.checked_sub(1);
    reverse_step_to(sched, z_t, eps_pred, t, prev, mode, step_noise, false)
}

/// Reverse step from `t` to `prev` (`None` = clean sample). DDPM requires
/// `prev == t - 1`; DDIM may skip. With `clip_x0` the implied clean sample
/// is clamped to `[-1, 1]` before taking the step.
#[allow(clippy::too_many_arguments)]
pub fn reverse_step_to(
    sched: &NoiseSchedule,
    z_t: &Tensor,
    eps_pred: &Tensor,
    t: usize,
    prev: Option<usize>,
    mode: SamplerMode,
    step_noise: Option<&Tensor>,
    clip_x0: bool,
) -> Result<Tensor> {
    sched.check_t(t)?;
    if z_t.dims() != eps_pred.dims() {
        return Err(invalid!("eps shape {:?} != latent shape {:?}", eps_pred.dims(), z_t.dims()));
    }
    if let Some(p) = prev {
        if p >= t {
            return Err(invalid!("previous timestep {p} must precede {t}"));
        }
    }
    let ab_t = sched.alpha_bars[t];
    let ab_prev = sched.alpha_bar(prev);
    let mut x0 = predict_x0(sched, z_t, t, eps_pred)?;
    if clip_x0 {
        x0 = x0.clamp(-1.0, 1.0)?;
    }
    match mode {
        SamplerMode::Ddim => {
            // direction recomputed from the (possibly clipped) x0
            let eps = if clip_x0 {
                ((z_t - (&x0 * ab_t.sqrt())?)? / (1.0 - ab_t).sqrt())?
            } else {
                eps_pred.clone()
            };
            Ok(((&x0 * ab_prev.sqrt())? + (eps * (1.0 - ab_prev).sqrt())?)?)
        }
        SamplerMode::Ddpm => {
            if prev != t.checked_sub(1) {
                return Err(invalid!("ddpm steps must be consecutive"));
            }
            let beta = sched.betas[t];
            let alpha = sched.alphas[t];
            let c0 = ab_prev.sqrt() * beta / (1.0 - ab_t);
            let ct = alpha.sqrt() * (1.0 - ab_prev) / (1.0 - ab_t);
            let mean = ((&x0 * c0)? + (z_t * ct)?)?;
            if t == 0 {
                return Ok(mean);
            }
            let noise = step_noise
                .ok_or_else(|| invalid!("ddpm step at t={t} requires step noise"))?;
            if noise.dims() != z_t.dims() {
                return Err(invalid!("step noise shape mismatch"));
            }
            let var = beta * (1.0 - ab_prev) / (1.0 - ab_t);
            Ok((mean + (noise * var.sqrt())?)?)
        }
    }
}

/// Sampler settings used at inference.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplerSettings {
    pub mode: SamplerMode,
    pub steps: usize,
    pub clip_x0: bool,
}

impl Default for SamplerSettings {
    fn default() -> Self {
        Self { mode: SamplerMode::Ddim, steps: 25, clip_x0: true }
    }
}

impl SamplerSettings {
    /// Descending timesteps, evenly strided over the schedule and ending at 0.
    pub fn timesteps(&self, sched: &NoiseSchedule) -> Result<Vec<usize>> {
        let total = sched.len();
        if self.steps == 0 || self.steps > total {
            return Err(invalid!("sampler steps must be in [1, {total}], got {}", self.steps));
        }
        if self.mode == SamplerMode::Ddpm && self.steps != total {
            return Err(invalid!("ddpm sampling visits every timestep; set steps = {total}"));
        }
        let ratio = total / self.steps;
        Ok((0..self.steps).map(|i| i * ratio).rev().collect())
    }
}

/// Conditioning inputs for one batch: references `[N, 3, H, W]`, the noise
/// used to q-sample the references `[N, 3, H, W]`, and one-hot pose maps
/// `[N, P, K, H, W]`.
#[derive(Debug, Clone)]
pub struct Conditioning {
    pub reference: Tensor,
    pub reference_noise: Tensor,
    pub poses: Tensor,
}

/// ε-prediction network `ε_θ(z_t, t, I_ref, p)`.
pub trait NoisePredictor {
    /// `z` is `[N, 3, K, H, W]`; `t` has one entry per batch element.
    fn predict_noise(&self, z: &Tensor, t: &[usize], cond: &Conditioning) -> Result<Tensor>;
}

/// One denoising-training example batch: clean targets `[N, 3, K, H, W]`,
/// their conditioning, timesteps and the noise to add.
#[derive(Debug, Clone)]
pub struct LossBatch {
    pub targets: Tensor,
    pub cond: Conditioning,
    pub t: Vec<usize>,
    pub noise: Tensor,
}

pub fn mse(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.dims() != b.dims() {
        return Err(invalid!("mse shape mismatch {:?} vs {:?}", a.dims(), b.dims()));
    }
    Ok((a - b)?.sqr()?.mean_all()?)
}

fn denoising_loss(model: &dyn NoisePredictor, sched: &NoiseSchedule, batch: &LossBatch) -> Result<Tensor> {
    let z = forward_noise_batched(sched, &batch.targets, &batch.t, &batch.noise)?;
    let pred = model.predict_noise(&z, &batch.t, &batch.cond)?;
    mse(&batch.noise, &pred)
}

/// Single-frame loss `E||ε - ε_θ||²` over a batch of `K = 1` examples.
pub fn stage1_loss(model: &dyn NoisePredictor, sched: &NoiseSchedule, batch: &LossBatch) -> Result<Tensor> {
    let dims = batch.targets.dims();
    if dims.first() == Some(&0) || dims.len() != 5 {
        return Err(invalid!("stage-1 batch must be a nonempty [N, 3, 1, H, W] tensor"));
    }
    if dims[2] != 1 {
        return Err(invalid!("stage-1 examples are single frames, got K={}", dims[2]));
    }
    denoising_loss(model, sched, batch)
}

/// Clip loss over `K`-frame examples.
pub fn stage2_loss(
    model: &dyn NoisePredictor,
    sched: &NoiseSchedule,
    batch: &LossBatch,
    k: usize,
) -> Result<Tensor> {
    let dims = batch.targets.dims();
    if dims.len() != 5 || dims[0] == 0 {
        return Err(invalid!("stage-2 batch must be a nonempty [N, 3, K, H, W] tensor"));
    }
    if dims[2] != k {
        return Err(invalid!("stage-2 clips must have exactly {k} frames, got {}", dims[2]));
    }
    denoising_loss(model, sched, batch)
}

/// Standard-normal tensor from a seeded generator, drawn in row-major order.
pub fn seeded_normal(
    rng: &mut impl rand::Rng,
    shape: &[usize],
    dtype: candle_core::DType,
    dev: &Device,
) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let v: Vec<f32> = (0..n).map(|_| rng.sample::<f32, _>(rand_distr::StandardNormal)).collect();
    Ok(Tensor::from_vec(v, shape, dev)?.to_dtype(dtype)?)
}
