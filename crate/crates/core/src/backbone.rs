//! Denoising UNet inflated with temporal attention.
//!
//! Features travel through the 2D layers as `[N*K, C, H, W]` (frames folded
//! into the batch axis); temporal attention unfolds them to `[N*H*W, K, C]`
//! and attends across the `K` frame positions of each spatial location.
//!
//! Every spatial attention layer doubles as an appearance-injection site:
//! when given a block of reference tokens it attends over the concatenation
//! of its own tokens and the reference tokens ("hybrid" attention).

use std::collections::BTreeMap;

use candle_core::{DType, Device, Module, Tensor};

use crate::error::{config_err, invalid, Result};
use crate::nn::{self, Conv2d, Linear};
use crate::params::ParamBuilder;

/// Identifier of an appearance-injection or pose-residual site, e.g. `mid`,
/// `up.1.0` or `skip.2`.
pub type SiteId = String;

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub image_size: usize,
    pub base_channels: usize,
    pub channel_multipliers: Vec<usize>,
    pub num_res_blocks_per_level: usize,
    /// Spatial resolutions (in pixels) that carry attention layers.
    pub attention_resolutions: Vec<usize>,
    pub temporal_pe_max_len: usize,
    pub norm_groups: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            image_size: 32,
            base_channels: 32,
            channel_multipliers: vec![1, 2],
            num_res_blocks_per_level: 1,
            attention_resolutions: vec![16],
            temporal_pe_max_len: 32,
            norm_groups: 8,
        }
    }
}

/// Channel width and spatial size of a feature site.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SiteSpec {
    pub id: SiteId,
    pub channels: usize,
    pub size: usize,
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_channels < 8 {
            return Err(invalid!("base_channels must be >= 8, got {}", self.base_channels));
        }
        if self.channel_multipliers.is_empty() {
            return Err(invalid!("channel_multipliers must not be empty"));
        }
        if self.channel_multipliers.windows(2).any(|w| w[0] > w[1]) {
            return Err(invalid!("channel_multipliers must be nondecreasing"));
        }
        if self.num_res_blocks_per_level == 0 || self.in_channels == 0 {
            return Err(invalid!("num_res_blocks_per_level and in_channels must be positive"));
        }
        let levels = self.channel_multipliers.len();
        if self.image_size % (1 << levels) != 0 {
            return Err(invalid!(
                "image_size {} not divisible by 2^{levels}",
                self.image_size
            ));
        }
        if self.temporal_pe_max_len == 0 {
            return Err(invalid!("temporal_pe_max_len must be positive"));
        }
        for l in 0..levels {
            let c = self.level_channels(l);
            if c % self.norm_groups != 0 {
                return Err(invalid!("norm_groups {} does not divide {c}", self.norm_groups));
            }
        }
        if self.base_channels % self.norm_groups != 0 {
            return Err(invalid!("norm_groups must divide base_channels"));
        }
        Ok(())
    }

    pub fn levels(&self) -> usize {
        self.channel_multipliers.len()
    }

    pub fn level_channels(&self, level: usize) -> usize {
        self.base_channels * self.channel_multipliers[level]
    }

    pub fn level_size(&self, level: usize) -> usize {
        self.image_size >> level
    }

    pub fn mid_size(&self) -> usize {
        self.image_size >> self.levels()
    }

    pub fn mid_channels(&self) -> usize {
        self.level_channels(self.levels() - 1)
    }

    pub fn time_embed_dim(&self) -> usize {
        self.base_channels * 4
    }

    fn has_attention(&self, size: usize) -> bool {
        self.attention_resolutions.contains(&size)
    }

    /// Skip tensors pushed by the down path, in push order.
    fn skip_layout(&self) -> Vec<(usize, usize)> {
        let mut skips = vec![(self.base_channels, self.image_size)];
        let mut ch = self.base_channels;
        for l in 0..self.levels() {
            for _ in 0..self.num_res_blocks_per_level {
                ch = self.level_channels(l);
                skips.push((ch, self.level_size(l)));
            }
            if l + 1 < self.levels() {
                skips.push((ch, self.level_size(l + 1)));
            }
        }
        skips
    }

    /// Sites that receive appearance hidden states: the middle block's and
    /// every up-block's spatial attention.
    pub fn appearance_sites(&self) -> Vec<SiteSpec> {
        let mut sites = vec![SiteSpec {
            id: "mid".into(),
            channels: self.mid_channels(),
            size: self.mid_size(),
        }];
        for l in (0..self.levels()).rev() {
            if self.has_attention(self.level_size(l)) {
                for i in 0..=self.num_res_blocks_per_level {
                    sites.push(SiteSpec {
                        id: format!("up.{l}.{i}"),
                        channels: self.level_channels(l),
                        size: self.level_size(l),
                    });
                }
            }
        }
        sites
    }

    /// Sites that receive pose residuals: every skip connection consumed by
    /// the up blocks plus the middle block output.
    pub fn residual_sites(&self) -> Vec<SiteSpec> {
        let mut sites: Vec<SiteSpec> = self
            .skip_layout()
            .into_iter()
            .enumerate()
            .map(|(i, (channels, size))| SiteSpec { id: format!("skip.{i}"), channels, size })
            .collect();
        sites.push(SiteSpec { id: "mid".into(), channels: self.mid_channels(), size: self.mid_size() });
        sites
    }
}

/// Sinusoidal encoding table `[length, dim]`, f64:
/// `pe[p, 2i] = sin(p / 10000^(2i/dim))`, `pe[p, 2i+1] = cos(...)`.
pub fn sinusoidal_position_encoding(length: usize, dim: usize) -> Result<Tensor> {
    Ok(Tensor::from_vec(pe_rows(0..length, dim)?, (length, dim), &Device::Cpu)?)
}

fn pe_rows(positions: impl Iterator<Item = usize>, dim: usize) -> Result<Vec<f64>> {
    if dim < 2 || dim % 2 != 0 {
        return Err(invalid!("encoding dim must be even and >= 2, got {dim}"));
    }
    let mut out = Vec::new();
    let mut any = false;
    for p in positions {
        any = true;
        for i in 0..dim / 2 {
            let arg = p as f64 / 10000f64.powf(2.0 * i as f64 / dim as f64);
            out.push(arg.sin());
            out.push(arg.cos());
        }
    }
    if !any {
        return Err(invalid!("encoding length must be >= 1"));
    }
    Ok(out)
}

/// A 5D feature map `[batch, channel, frame, height, width]`.
#[derive(Debug, Clone)]
pub struct FeatureMap5D(Tensor);

impl FeatureMap5D {
    pub fn new(data: Tensor) -> Result<Self> {
        let dims = data.dims();
        if dims.len() != 5 || dims.contains(&0) {
            return Err(invalid!("feature map must be 5D with positive dims, got {dims:?}"));
        }
        Ok(Self(data))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn dims5(&self) -> (usize, usize, usize, usize, usize) {
        self.0.dims5().expect("checked at construction")
    }
}

/// `[N, C, K, H, W]` -> `[N*K, C, H, W]`.
pub fn fold_frames(x: &Tensor) -> Result<Tensor> {
    let (n, c, k, h, w) = x.dims5()?;
    Ok(x.permute((0, 2, 1, 3, 4))?.reshape((n * k, c, h, w))?)
}

/// `[N*K, C, H, W]` -> `[N, C, K, H, W]`.
pub fn unfold_frames(x: &Tensor, n: usize, k: usize) -> Result<Tensor> {
    let (_, c, h, w) = x.dims4()?;
    Ok(x.reshape((n, k, c, h, w))?.permute((0, 2, 1, 3, 4))?.contiguous()?)
}

/// Single-head projections `W^Q, W^K, W^V` (no bias) and an output projection.
#[derive(Debug, Clone)]
pub struct AttentionParams {
    pub to_q: Linear,
    pub to_k: Linear,
    pub to_v: Linear,
    pub to_out: Linear,
}

impl AttentionParams {
    pub fn new(vb: &ParamBuilder, channels: usize, zero_out: bool) -> candle_core::Result<Self> {
        let to_out = if zero_out {
            Linear::zeroed(&vb.pp("to_out"), channels, channels, true)?
        } else {
            Linear::new(&vb.pp("to_out"), channels, channels, true)?
        };
        Ok(Self {
            to_q: Linear::new(&vb.pp("to_q"), channels, channels, false)?,
            to_k: Linear::new(&vb.pp("to_k"), channels, channels, false)?,
            to_v: Linear::new(&vb.pp("to_v"), channels, channels, false)?,
            to_out,
        })
    }

    pub fn channels(&self) -> usize {
        self.to_q.in_dim()
    }

    /// Head dimension `d`.
    pub fn head_dim(&self) -> usize {
        self.to_q.out_dim()
    }

    fn check(&self, c: usize) -> Result<()> {
        if self.to_q.in_dim() != c || self.to_k.in_dim() != c || self.to_v.in_dim() != c {
            return Err(invalid!("attention params expect {} channels, got {c}", self.channels()));
        }
        if self.to_out.out_dim() != c {
            return Err(invalid!("attention output projection must map back to {c} channels"));
        }
        Ok(())
    }

    /// Queries from `x`, keys/values from `[x, extra]` along the token axis.
    fn attend(&self, x: &Tensor, extra: Option<&Tensor>) -> Result<Tensor> {
        let kv_in = match extra {
            Some(y) if y.dim(1)? > 0 => Tensor::cat(&[x, y], 1)?,
            _ => x.clone(),
        };
        let q = self.to_q.forward(x)?;
        let k = self.to_k.forward(&kv_in)?;
        let v = self.to_v.forward(&kv_in)?;
        Ok(self.to_out.forward(&nn::scaled_dot_attention(&q, &k, &v)?)?)
    }
}

/// Temporal attention on `[N, C, K, H, W]`: residual, attends over frames at
/// each spatial location after adding the frame-index encoding.
pub fn temporal_attention(f: &FeatureMap5D, params: &AttentionParams) -> Result<FeatureMap5D> {
    let (n, c, k, _, _) = f.dims5();
    params.check(c)?;
    let pe = sinusoidal_position_encoding(k, c)?.to_dtype(f.tensor().dtype())?;
    let folded = fold_frames(f.tensor())?;
    let out = temporal_on_frames(&folded, n, k, params, &pe)?;
    FeatureMap5D::new(unfold_frames(&out, n, k)?)
}

fn temporal_on_frames(
    x: &Tensor,
    n: usize,
    k: usize,
    params: &AttentionParams,
    pe_table: &Tensor,
) -> Result<Tensor> {
    let (_, c, h, w) = x.dims4()?;
    let tokens = x
        .reshape((n, k, c, h, w))?
        .permute((0, 3, 4, 1, 2))?
        .reshape((n * h * w, k, c))?;
    let pe = pe_table.narrow(0, 0, k)?.unsqueeze(0)?;
    let tokens = tokens.broadcast_add(&pe)?;
    let attended = params.attend(&tokens, None)?;
    let attended = attended
        .reshape((n, h, w, k, c))?
        .permute((0, 3, 4, 1, 2))?
        .reshape((n * k, c, h, w))?;
    Ok((x + attended)?)
}

/// Temporal attention layer with its cached encoding table.
#[derive(Debug, Clone)]
pub struct TemporalAttention {
    params: AttentionParams,
    pe: Tensor,
}

impl TemporalAttention {
    pub fn new(vb: &ParamBuilder, channels: usize, max_len: usize) -> Result<Self> {
        let params = AttentionParams::new(vb, channels, true)?;
        let pe = sinusoidal_position_encoding(max_len, channels)?
            .to_dtype(vb.dtype())?
            .to_device(vb.device())?;
        Ok(Self { params, pe })
    }

    pub fn params(&self) -> &AttentionParams {
        &self.params
    }

    /// `x` is `[N*K, C, H, W]`.
    pub fn forward(&self, x: &Tensor, n: usize, k: usize) -> Result<Tensor> {
        if k > self.pe.dim(0)? {
            return Err(invalid!("segment length {k} exceeds temporal_pe_max_len {}", self.pe.dim(0)?));
        }
        temporal_on_frames(x, n, k, &self.params, &self.pe)
    }
}

/// Spatial self-attention with optional appearance tokens.
#[derive(Debug, Clone)]
pub struct SpatialAttention {
    norm: candle_nn::GroupNorm,
    params: AttentionParams,
}

impl SpatialAttention {
    pub fn new(vb: &ParamBuilder, channels: usize, groups: usize) -> Result<Self> {
        Ok(Self {
            norm: nn::group_norm(&vb.pp("norm"), groups, channels)?,
            params: AttentionParams::new(vb, channels, false)?,
        })
    }

    pub fn params(&self) -> &AttentionParams {
        &self.params
    }

    /// Normalised tokens `[B, H*W, C]` entering the attention.
    pub fn hidden_states(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        Ok(self.norm.forward(x)?.reshape((b, c, h * w))?.transpose(1, 2)?)
    }

    /// `x` is `[B, C, H, W]`; `extra`, when given, is `[B, M, C]`.
    pub fn forward(&self, x: &Tensor, extra: Option<&Tensor>) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        self.params.check(c)?;
        if let Some(y) = extra {
            let (yb, _, yc) = y.dims3()?;
            if yc != c {
                return Err(invalid!("appearance block has {yc} channels, site has {c}"));
            }
            if yb != b {
                return Err(invalid!("appearance block batch {yb} != feature batch {b}"));
            }
        }
        let tokens = self.hidden_states(x)?;
        let out = self.params.attend(&tokens, extra)?;
        Ok((x + out.transpose(1, 2)?.reshape((b, c, h, w))?)?)
    }
}

/// The hybrid attention op on its own: `f` is `[B, C, H, W]`, `y_a_slice`
/// is `[B, M, C]`.
pub fn spatial_hybrid_attention(
    f: &Tensor,
    y_a_slice: Option<&Tensor>,
    layer: &SpatialAttention,
) -> Result<Tensor> {
    layer.forward(f, y_a_slice)
}

#[derive(Debug, Clone)]
pub struct ResBlock {
    norm1: candle_nn::GroupNorm,
    conv1: Conv2d,
    time_proj: Linear,
    norm2: candle_nn::GroupNorm,
    conv2: Conv2d,
    shortcut: Option<Conv2d>,
}

impl ResBlock {
    pub fn new(
        vb: &ParamBuilder,
        in_c: usize,
        out_c: usize,
        temb_dim: usize,
        groups: usize,
    ) -> Result<Self> {
        let shortcut = if in_c != out_c {
            Some(Conv2d::new(&vb.pp("shortcut"), in_c, out_c, 1, 1, 0)?)
        } else {
            None
        };
        Ok(Self {
            norm1: nn::group_norm(&vb.pp("norm1"), groups, in_c)?,
            conv1: Conv2d::new(&vb.pp("conv1"), in_c, out_c, 3, 1, 1)?,
            time_proj: Linear::new(&vb.pp("time_proj"), temb_dim, out_c, true)?,
            norm2: nn::group_norm(&vb.pp("norm2"), groups, out_c)?,
            conv2: Conv2d::new(&vb.pp("conv2"), out_c, out_c, 3, 1, 1)?,
            shortcut,
        })
    }

    pub fn forward(&self, x: &Tensor, temb: &Tensor) -> Result<Tensor> {
        let h = self.conv1.forward(&self.norm1.forward(x)?.silu()?)?;
        let t = self.time_proj.forward(&temb.silu()?)?.unsqueeze(2)?.unsqueeze(3)?;
        let h = h.broadcast_add(&t)?;
        let h = self.conv2.forward(&self.norm2.forward(&h)?.silu()?)?;
        let skip = match &self.shortcut {
            Some(s) => s.forward(x)?,
            None => x.clone(),
        };
        Ok((skip + h)?)
    }
}

/// Sinusoidal timestep features followed by a two-layer MLP.
#[derive(Debug, Clone)]
pub struct TimestepEmbedding {
    dim: usize,
    lin1: Linear,
    lin2: Linear,
}

impl TimestepEmbedding {
    pub fn new(vb: &ParamBuilder, dim: usize, out_dim: usize) -> Result<Self> {
        Ok(Self {
            dim,
            lin1: Linear::new(&vb.pp("lin1"), dim, out_dim, true)?,
            lin2: Linear::new(&vb.pp("lin2"), out_dim, out_dim, true)?,
        })
    }

    /// One embedding row per entry of `t`, each repeated `repeat` times.
    pub fn forward(&self, t: &[usize], repeat: usize, dtype: DType, dev: &Device) -> Result<Tensor> {
        let expanded: Vec<usize> =
            t.iter().flat_map(|&ti| std::iter::repeat_n(ti, repeat)).collect();
        let rows = pe_rows(expanded.iter().copied(), self.dim)?;
        let x = Tensor::from_vec(rows, (expanded.len(), self.dim), dev)?.to_dtype(dtype)?;
        let h = self.lin1.forward(&x)?.silu()?;
        Ok(self.lin2.forward(&h)?)
    }
}

/// A spatial attention layer, optionally followed by temporal attention.
#[derive(Debug, Clone)]
pub struct AttentionSite {
    pub spatial: SpatialAttention,
    pub temporal: Option<TemporalAttention>,
}

impl AttentionSite {
    fn new(vb: &ParamBuilder, cfg: &BackboneConfig, channels: usize, temporal: bool) -> Result<Self> {
        let temporal = if temporal {
            Some(TemporalAttention::new(&vb.pp("temporal"), channels, cfg.temporal_pe_max_len)?)
        } else {
            None
        };
        Ok(Self { spatial: SpatialAttention::new(&vb.pp("attn"), channels, cfg.norm_groups)?, temporal })
    }
}

#[derive(Debug, Clone)]
pub struct Block {
    pub id: SiteId,
    pub res: ResBlock,
    pub attn: Option<AttentionSite>,
}

#[derive(Debug, Clone)]
pub struct DownLevel {
    pub blocks: Vec<Block>,
    pub downsample: Conv2d,
}

#[derive(Debug, Clone)]
pub struct UpLevel {
    pub upsample: Conv2d,
    pub blocks: Vec<Block>,
}

#[derive(Debug, Clone)]
pub struct MidBlock {
    pub res0: ResBlock,
    pub attn: AttentionSite,
    pub res1: ResBlock,
}

/// Which parts of the UNet to instantiate.
#[derive(Debug, Clone, Copy)]
pub struct TrunkParts {
    pub temporal: bool,
    /// Number of up levels to build, counted from the deepest.
    pub up_levels: usize,
    pub output_head: bool,
}

/// The shared UNet body used by the denoiser, the appearance encoder and
/// the pose conditioner.
#[derive(Debug, Clone)]
pub struct UNetTrunk {
    pub cfg: BackboneConfig,
    pub time_embed: TimestepEmbedding,
    pub conv_in: Conv2d,
    pub down: Vec<DownLevel>,
    pub mid: MidBlock,
    /// Deepest level first.
    pub up: Vec<(usize, UpLevel)>,
    pub head: Option<(candle_nn::GroupNorm, Conv2d)>,
}

/// Per-site hooks applied while running the trunk.
pub(crate) struct SiteHooks<'a> {
    pub appearance: Option<&'a BTreeMap<SiteId, Tensor>>,
    pub residuals: Option<&'a BTreeMap<SiteId, Tensor>>,
    pub capture: Option<&'a mut BTreeMap<SiteId, Tensor>>,
    pub temporal: bool,
    pub n: usize,
    pub k: usize,
}

impl UNetTrunk {
    pub fn new(vb: &ParamBuilder, cfg: &BackboneConfig, parts: TrunkParts) -> Result<Self> {
        cfg.validate()?;
        let g = cfg.norm_groups;
        let temb_dim = cfg.time_embed_dim();
        let time_embed = TimestepEmbedding::new(&vb.pp("time_embed"), cfg.base_channels, temb_dim)?;
        let conv_in = Conv2d::new(&vb.pp("conv_in"), cfg.in_channels, cfg.base_channels, 3, 1, 1)?;

        let mut ch = cfg.base_channels;
        let mut down = Vec::new();
        for l in 0..cfg.levels() {
            let out_c = cfg.level_channels(l);
            let attn = cfg.has_attention(cfg.level_size(l));
            let mut blocks = Vec::new();
            for i in 0..cfg.num_res_blocks_per_level {
                let bvb = vb.pp(format!("down.{l}.{i}"));
                let res = ResBlock::new(&bvb.pp("res"), ch, out_c, temb_dim, g)?;
                ch = out_c;
                let attn = if attn {
                    Some(AttentionSite::new(&bvb, cfg, ch, parts.temporal)?)
                } else {
                    None
                };
                blocks.push(Block { id: format!("down.{l}.{i}"), res, attn });
            }
            let downsample = Conv2d::new(&vb.pp(format!("down.{l}.downsample")), ch, ch, 3, 2, 1)?;
            down.push(DownLevel { blocks, downsample });
        }

        let mvb = vb.pp("mid");
        let mid = MidBlock {
            res0: ResBlock::new(&mvb.pp("res0"), ch, ch, temb_dim, g)?,
            attn: AttentionSite::new(&mvb, cfg, ch, parts.temporal)?,
            res1: ResBlock::new(&mvb.pp("res1"), ch, ch, temb_dim, g)?,
        };

        let skips = cfg.skip_layout();
        let mut skip_idx = skips.len();
        let mut up = Vec::new();
        for l in (0..cfg.levels()).rev().take(parts.up_levels) {
            let out_c = cfg.level_channels(l);
            let attn = cfg.has_attention(cfg.level_size(l));
            let upsample = Conv2d::new(&vb.pp(format!("up.{l}.upsample")), ch, ch, 3, 1, 1)?;
            let mut blocks = Vec::new();
            for i in 0..=cfg.num_res_blocks_per_level {
                skip_idx -= 1;
                let skip_c = skips[skip_idx].0;
                let bvb = vb.pp(format!("up.{l}.{i}"));
                let res = ResBlock::new(&bvb.pp("res"), ch + skip_c, out_c, temb_dim, g)?;
                ch = out_c;
                let attn = if attn {
                    Some(AttentionSite::new(&bvb, cfg, ch, parts.temporal)?)
                } else {
                    None
                };
                blocks.push(Block { id: format!("up.{l}.{i}"), res, attn });
            }
            up.push((l, UpLevel { upsample, blocks }));
        }

        let head = if parts.output_head {
            if parts.up_levels != cfg.levels() {
                return Err(invalid!("output head requires every up level"));
            }
            Some((
                nn::group_norm(&vb.pp("norm_out"), g, ch)?,
                Conv2d::new(&vb.pp("conv_out"), ch, cfg.in_channels, 3, 1, 1)?,
            ))
        } else {
            None
        };
        Ok(Self { cfg: cfg.clone(), time_embed, conv_in, down, mid, up, head })
    }

    fn site(&self, site: &AttentionSite, id: &str, x: &Tensor, hooks: &mut SiteHooks) -> Result<Tensor> {
        if let Some(cap) = hooks.capture.as_deref_mut() {
            cap.insert(id.to_string(), site.spatial.hidden_states(x)?);
        }
        let extra = match hooks.appearance {
            Some(states) => states.get(id),
            None => None,
        };
        let mut h = site.spatial.forward(x, extra)?;
        if hooks.temporal {
            if let Some(t) = &site.temporal {
                h = t.forward(&h, hooks.n, hooks.k)?;
            }
        }
        Ok(h)
    }

    fn add_residual(&self, x: Tensor, id: &str, hooks: &SiteHooks) -> Result<Tensor> {
        match hooks.residuals.and_then(|r| r.get(id)) {
            Some(r) => Ok((x + r)?),
            None => Ok(x),
        }
    }

    /// Down path; returns the deepest features and the skip stack.
    pub(crate) fn down_pass(
        &self,
        x: &Tensor,
        temb: &Tensor,
        hooks: &mut SiteHooks,
        added: Option<&Tensor>,
    ) -> Result<(Tensor, Vec<Tensor>)> {
        let mut h = self.conv_in.forward(x)?;
        if let Some(a) = added {
            h = (h + a)?;
        }
        let mut skips = vec![h.clone()];
        let last = self.down.len() - 1;
        for (l, level) in self.down.iter().enumerate() {
            for block in &level.blocks {
                h = block.res.forward(&h, temb)?;
                if let Some(site) = &block.attn {
                    h = self.site(site, &block.id, &h, hooks)?;
                }
                skips.push(h.clone());
            }
            h = level.downsample.forward(&h)?;
            if l < last {
                skips.push(h.clone());
            }
        }
        Ok((h, skips))
    }

    pub(crate) fn mid_pass(&self, h: &Tensor, temb: &Tensor, hooks: &mut SiteHooks) -> Result<Tensor> {
        let h = self.mid.res0.forward(h, temb)?;
        let h = self.site(&self.mid.attn, "mid", &h, hooks)?;
        Ok(self.mid.res1.forward(&h, temb)?)
    }

    /// Up path over the built levels; consumes `skips` from the back.
    pub(crate) fn up_pass(
        &self,
        mut h: Tensor,
        mut skips: Vec<Tensor>,
        temb: &Tensor,
        hooks: &mut SiteHooks,
    ) -> Result<Tensor> {
        let residual_ids: Vec<String> =
            (0..skips.len()).map(|i| format!("skip.{i}")).collect();
        for (_, level) in &self.up {
            let (_, _, hh, ww) = h.dims4()?;
            h = level.upsample.forward(&h.upsample_nearest2d(hh * 2, ww * 2)?)?;
            for block in &level.blocks {
                let idx = skips.len() - 1;
                let skip = skips.pop().expect("skip stack matches up blocks");
                let skip = self.add_residual(skip, &residual_ids[idx], hooks)?;
                h = Tensor::cat(&[&h, &skip], 1)?;
                h = block.res.forward(&h, temb)?;
                if let Some(site) = &block.attn {
                    h = self.site(site, &block.id, &h, hooks)?;
                }
            }
        }
        Ok(h)
    }
}

/// Appearance hidden states keyed by injection site; each block is
/// `[N, tokens, C]` with one row per batch element.
#[derive(Debug, Clone)]
pub struct AppearanceEmbedding {
    pub states: BTreeMap<SiteId, Tensor>,
    pub timestep: Vec<usize>,
}

/// Pose residuals keyed by residual site; each tensor is `[N, C, K, h, w]`.
#[derive(Debug, Clone)]
pub struct PoseResiduals {
    pub residuals: BTreeMap<SiteId, Tensor>,
}

/// The temporal denoising UNet.
#[derive(Debug, Clone)]
pub struct Backbone {
    trunk: UNetTrunk,
    use_temporal: bool,
}

impl Backbone {
    pub fn new(vb: &ParamBuilder, cfg: &BackboneConfig) -> Result<Self> {
        let parts = TrunkParts { temporal: true, up_levels: cfg.levels(), output_head: true };
        Ok(Self { trunk: UNetTrunk::new(vb, cfg, parts)?, use_temporal: true })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.trunk.cfg
    }

    pub fn trunk(&self) -> &UNetTrunk {
        &self.trunk
    }

    /// With temporal layers switched off the network is the plain 2D UNet.
    pub fn set_temporal(&mut self, on: bool) {
        self.use_temporal = on;
    }

    pub fn temporal_enabled(&self) -> bool {
        self.use_temporal
    }

    /// `z` is `[N, C, K, H, W]`, `t` holds one timestep per batch element.
    pub fn forward(
        &self,
        z: &Tensor,
        t: &[usize],
        y_a: Option<&AppearanceEmbedding>,
        y_p: Option<&PoseResiduals>,
    ) -> Result<Tensor> {
        let (n, c, k, h, w) = z.dims5()?;
        let cfg = &self.trunk.cfg;
        if c != cfg.in_channels || h != cfg.image_size || w != cfg.image_size {
            return Err(invalid!(
                "backbone expects [*, {}, *, {s}, {s}], got {:?}",
                cfg.in_channels,
                z.dims(),
                s = cfg.image_size
            ));
        }
        if t.len() != n {
            return Err(invalid!("{} timesteps for batch of {n}", t.len()));
        }

        let appearance = match y_a {
            Some(ya) => {
                let missing: Vec<String> = cfg
                    .appearance_sites()
                    .into_iter()
                    .filter(|s| !ya.states.contains_key(&s.id))
                    .map(|s| s.id)
                    .collect();
                if !missing.is_empty() {
                    return Err(config_err!("appearance embedding lacks sites: {}", missing.join(", ")));
                }
                let mut per_frame = BTreeMap::new();
                for (id, s) in &ya.states {
                    let (sb, m, sc) = s.dims3()?;
                    if sb != n {
                        return Err(invalid!("appearance site {id}: batch {sb} != {n}"));
                    }
                    let s = s.unsqueeze(1)?.broadcast_as((n, k, m, sc))?.reshape((n * k, m, sc))?;
                    per_frame.insert(id.clone(), s);
                }
                Some(per_frame)
            }
            None => None,
        };
        let residuals = match y_p {
            Some(yp) => {
                let missing: Vec<String> = cfg
                    .residual_sites()
                    .into_iter()
                    .filter(|s| !yp.residuals.contains_key(&s.id))
                    .map(|s| s.id)
                    .collect();
                if !missing.is_empty() {
                    return Err(config_err!("pose residuals lack sites: {}", missing.join(", ")));
                }
                let mut folded = BTreeMap::new();
                for (id, r) in &yp.residuals {
                    if r.dim(0)? != n || r.dim(2)? != k {
                        return Err(invalid!("pose residual {id} has shape {:?}", r.dims()));
                    }
                    folded.insert(id.clone(), fold_frames(r)?);
                }
                Some(folded)
            }
            None => None,
        };

        let temb = self.trunk.time_embed.forward(t, k, z.dtype(), z.device())?;
        let x = fold_frames(z)?;
        let mut hooks = SiteHooks {
            appearance: appearance.as_ref(),
            residuals: residuals.as_ref(),
            capture: None,
            temporal: self.use_temporal,
            n,
            k,
        };
        let (h, skips) = self.trunk.down_pass(&x, &temb, &mut hooks, None)?;
        let h = self.trunk.mid_pass(&h, &temb, &mut hooks)?;
        let h = self.trunk.add_residual(h, "mid", &hooks)?;
        let h = self.trunk.up_pass(h, skips, &temb, &mut hooks)?;
        let (norm, conv) = self.trunk.head.as_ref().expect("backbone has an output head");
        let out = conv.forward(&norm.forward(&h)?.silu()?)?;
        unfold_frames(&out, n, k)
    }
}
