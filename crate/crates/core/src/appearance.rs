//! Appearance encoder: a trainable 2D copy of the UNet that turns the
//! reference image into normalised attention hidden states, one block per
//! middle/up-block spatial attention site of the denoiser.

use std::collections::BTreeMap;

use candle_core::{Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{AppearanceEmbedding, BackboneConfig, SiteHooks, TrunkParts, UNetTrunk};
use crate::diffusion::{forward_noise_batched, seeded_normal, NoiseSchedule};
use crate::error::{invalid, Result};
use crate::nn::layer_norm_tokens;
use crate::params::ParamBuilder;

pub const HIDDEN_NORM_EPS: f64 = 1e-5;

/// A reference image `[3, H, W]` with values in `[-1, 1]`.
#[derive(Debug, Clone)]
pub struct ReferenceImage(Tensor);

impl ReferenceImage {
    pub fn new(pixels: Tensor) -> Result<Self> {
        let (c, h, w) = pixels.dims3()?;
        if c != 3 || h == 0 || w == 0 {
            return Err(invalid!("reference image must be [3, H, W], got {:?}", pixels.dims()));
        }
        let flat = pixels.flatten_all()?.to_dtype(candle_core::DType::F64)?.to_vec1::<f64>()?;
        if flat.iter().any(|v| !v.is_finite() || !(-1.0..=1.0).contains(v)) {
            return Err(invalid!("reference pixels must be finite and within [-1, 1]"));
        }
        Ok(Self(pixels))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }
}

/// Per-token layer normalisation over the channel axis (ε = 1e-5).
pub fn normalize_hidden(h: &Tensor) -> Result<Tensor> {
    if h.dims().last().copied().unwrap_or(0) == 0 {
        return Err(invalid!("hidden block needs a channel axis"));
    }
    Ok(layer_norm_tokens(h, HIDDEN_NORM_EPS)?)
}

#[derive(Debug, Clone)]
pub struct AppearanceEncoder {
    trunk: UNetTrunk,
    site_ids: Vec<String>,
    /// Encode the clean reference (t = 0, no noise) instead of z_t at t.
    pub reference_clean: bool,
}

impl AppearanceEncoder {
    pub fn new(vb: &ParamBuilder, cfg: &BackboneConfig) -> Result<Self> {
        let sites = cfg.appearance_sites();
        // run only as deep into the up path as the last injection site
        let up_levels = sites
            .iter()
            .filter_map(|s| s.id.strip_prefix("up."))
            .filter_map(|s| s.split('.').next()?.parse::<usize>().ok())
            .map(|l| cfg.levels() - l)
            .max()
            .unwrap_or(0);
        let parts = TrunkParts { temporal: false, up_levels, output_head: false };
        let trunk = UNetTrunk::new(&vb.mirroring("backbone"), cfg, parts)?;
        Ok(Self { trunk, site_ids: sites.into_iter().map(|s| s.id).collect(), reference_clean: false })
    }

    pub fn site_ids(&self) -> &[String] {
        &self.site_ids
    }

    /// `noisy_ref` is `[N, 3, H, W]`, already at timestep `t[i]`.
    pub fn encode_noisy(&self, noisy_ref: &Tensor, t: &[usize]) -> Result<AppearanceEmbedding> {
        let n = noisy_ref.dim(0)?;
        if t.len() != n {
            return Err(invalid!("{} timesteps for {n} references", t.len()));
        }
        let temb = self.trunk.time_embed.forward(t, 1, noisy_ref.dtype(), noisy_ref.device())?;
        let mut captured = BTreeMap::new();
        let mut hooks = SiteHooks {
            appearance: None,
            residuals: None,
            capture: Some(&mut captured),
            temporal: false,
            n,
            k: 1,
        };
        let (h, skips) = self.trunk.down_pass(noisy_ref, &temb, &mut hooks, None)?;
        let h = self.trunk.mid_pass(&h, &temb, &mut hooks)?;
        // the unconsumed (shallow) skips are simply dropped
        self.trunk.up_pass(h, skips, &temb, &mut hooks)?;
        let mut states = BTreeMap::new();
        for id in &self.site_ids {
            let h = captured
                .remove(id)
                .ok_or_else(|| invalid!("appearance encoder produced no state for site {id}"))?;
            states.insert(id.clone(), normalize_hidden(&h)?);
        }
        Ok(AppearanceEmbedding { states, timestep: t.to_vec() })
    }

    /// q-samples each reference at its timestep with `noise`, then encodes.
    pub fn encode(
        &self,
        sched: &NoiseSchedule,
        reference: &Tensor,
        t: &[usize],
        noise: &Tensor,
    ) -> Result<AppearanceEmbedding> {
        if self.reference_clean {
            let zeros = vec![0; t.len()];
            return self.encode_noisy(reference, &zeros);
        }
        let noisy = forward_noise_batched(sched, reference, t, noise)?;
        self.encode_noisy(&noisy, t)
    }
}

/// Encodes a single reference image at timestep `t`, drawing the q-sample
/// noise from `noise_seed`.
pub fn encode_appearance(
    encoder: &AppearanceEncoder,
    sched: &NoiseSchedule,
    i_ref: &ReferenceImage,
    t: usize,
    noise_seed: u64,
) -> Result<AppearanceEmbedding> {
    sched.check_t(t)?;
    let x = i_ref.tensor().unsqueeze(0)?;
    let noise = reference_noise(noise_seed, x.dims(), x.dtype(), x.device())?;
    encoder.encode(sched, &x, &[t], &noise)
}

pub fn reference_noise(
    seed: u64,
    shape: &[usize],
    dtype: candle_core::DType,
    dev: &Device,
) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    seeded_normal(&mut rng, shape, dtype, dev)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::DType;

    #[test]
    fn normalize_examples() {
        let dev = Device::Cpu;
        let c = Tensor::new(&[[1.0f64, 1.0, 1.0, 1.0]], &dev).unwrap();
        assert_eq!(normalize_hidden(&c).unwrap().to_vec2::<f64>().unwrap(), vec![vec![0.0; 4]]);
        let t = Tensor::new(&[[1.0f64, -1.0]], &dev).unwrap();
        let y = normalize_hidden(&t).unwrap().to_vec2::<f64>().unwrap();
        let e = 1.0 / (1.0f64 + 1e-5).sqrt();
        assert!((y[0][0] - e).abs() < 1e-15 && (y[0][1] + e).abs() < 1e-15);
        assert!((y[0][0] - 0.999_995).abs() < 1e-6);
    }

    #[test]
    fn normalize_moments() {
        let h = Tensor::randn(0.3f64, 2.0, (5, 16), &Device::Cpu).unwrap();
        let y = normalize_hidden(&h).unwrap().to_vec2::<f64>().unwrap();
        for row in y {
            let m = row.iter().sum::<f64>() / row.len() as f64;
            let v = row.iter().map(|x| (x - m).powi(2)).sum::<f64>() / row.len() as f64;
            assert!(m.abs() <= 1e-6);
            assert!((v - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn reference_range_is_enforced() {
        let dev = Device::Cpu;
        assert!(ReferenceImage::new(Tensor::full(1.5f32, (3, 4, 4), &dev).unwrap()).is_err());
        assert!(ReferenceImage::new(Tensor::zeros((1, 4, 4), DType::F32, &dev).unwrap()).is_err());
        assert!(ReferenceImage::new(Tensor::zeros((3, 4, 4), DType::F32, &dev).unwrap()).is_ok());
    }
}
