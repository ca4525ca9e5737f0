//! Small differentiable layers on top of candle tensors.
//!
//! Convolutions are lowered to im2col + batched gemm; the gemm path is
//! several times faster than the direct CPU kernel for the backward pass at
//! the resolutions used here.

use candle_core::backend::BackendStorage;
use candle_core::{CpuStorage, CustomOp1, Layout, Module, Result, Shape, Tensor, D};

use crate::params::{Init, ParamBuilder};

/// Geometry of a convolution window sweep.
#[derive(Debug, Clone, Copy)]
struct Window {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl Window {
    /// Calls `f(col_offset, src_offset)` for every in-bounds tap of one
    /// channels-last image; each call covers a run of `c` channels. Columns are
    /// laid out `[(oy, ox), (dy, dx, c)]`: one row per output pixel.
    fn for_each_run(&self, mut f: impl FnMut(usize, usize)) {
        let Window { c, h, w, k, stride, pad, oh, ow } = *self;
        let row_len = k * k * c;
        for oy in 0..oh {
            for ox in 0..ow {
                let row = (oy * ow + ox) * row_len;
                for dy in 0..k {
                    let iy = (oy * stride + dy) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for dx in 0..k {
                        let ix = (ox * stride + dx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            f(row + (dy * k + dx) * c, (iy as usize * w + ix as usize) * c);
                        }
                    }
                }
            }
        }
    }

    fn col_len(&self) -> usize {
        self.c * self.k * self.k * self.oh * self.ow
    }

    fn img_len(&self) -> usize {
        self.c * self.h * self.w
    }
}

fn contiguous_slice<'a, T>(src: &'a [T], layout: &Layout) -> Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((a, b)) => Ok(&src[a..b]),
        None => candle_core::bail!("expected a contiguous input"),
    }
}

/// Channels-last `[B, H, W, C] -> [B, OH*OW, k*k*C]`.
struct Im2Col(Window);

/// Adjoint of [`Im2Col`]: scatter-adds columns back into a channels-last image.
struct Col2Im(Window);

fn im2col_impl<T: Copy + Default>(win: &Window, src: &[T]) -> Vec<T> {
    let (il, cl, c) = (win.img_len(), win.col_len(), win.c);
    let b = src.len() / il;
    let mut out = vec![T::default(); b * cl];
    for n in 0..b {
        let (x, y) = (&src[n * il..(n + 1) * il], &mut out[n * cl..(n + 1) * cl]);
        win.for_each_run(|col, i| y[col..col + c].copy_from_slice(&x[i..i + c]));
    }
    out
}

fn col2im_impl<T: Copy + Default + std::ops::AddAssign>(win: &Window, src: &[T]) -> Vec<T> {
    let (il, cl, c) = (win.img_len(), win.col_len(), win.c);
    let b = src.len() / cl;
    let mut out = vec![T::default(); b * il];
    for n in 0..b {
        let (x, y) = (&src[n * cl..(n + 1) * cl], &mut out[n * il..(n + 1) * il]);
        win.for_each_run(|col, i| {
            for (d, &v) in y[i..i + c].iter_mut().zip(&x[col..col + c]) {
                *d += v;
            }
        });
    }
    out
}

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> Result<(CpuStorage, Shape)> {
        let win = &self.0;
        let b = layout.dims()[0];
        let shape = Shape::from((b, win.oh * win.ow, win.c * win.k * win.k));
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(im2col_impl(win, contiguous_slice(v, layout)?)),
            CpuStorage::F64(v) => CpuStorage::F64(im2col_impl(win, contiguous_slice(v, layout)?)),
            _ => candle_core::bail!("im2col: unsupported dtype {:?}", storage.dtype()),
        };
        Ok((out, shape))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1(Col2Im(self.0))?))
    }
}

impl CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> Result<(CpuStorage, Shape)> {
        let win = &self.0;
        let b = layout.dims()[0];
        let shape = Shape::from((b, win.h, win.w, win.c));
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(col2im_impl(win, contiguous_slice(v, layout)?)),
            CpuStorage::F64(v) => CpuStorage::F64(col2im_impl(win, contiguous_slice(v, layout)?)),
            _ => candle_core::bail!("col2im: unsupported dtype {:?}", storage.dtype()),
        };
        Ok((out, shape))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1(Im2Col(self.0))?))
    }
}

/// 2D convolution over `[B, C, H, W]` with a square kernel.
pub fn conv2d(
    x: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let (out_c, in_c, kh, kw) = weight.dims4()?;
    if in_c != c {
        candle_core::bail!("conv2d: input has {c} channels, kernel expects {in_c}");
    }
    if kh != kw {
        candle_core::bail!("conv2d: kernel must be square, got {kh}x{kw}");
    }
    if stride == 0 {
        candle_core::bail!("conv2d: stride must be positive");
    }
    if h + 2 * padding < kh || w + 2 * padding < kw {
        candle_core::bail!("conv2d: {h}x{w} input is smaller than the {kh}x{kw} kernel");
    }
    let oh = (h + 2 * padding - kh) / stride + 1;
    let ow = (w + 2 * padding - kw) / stride + 1;

    let wm = weight.reshape((out_c, c * kh * kw))?;
    let y = if kh == 1 && stride == 1 && padding == 0 {
        // the batched gemm mishandles a stride-0 batch axis, so materialise it
        let y = wm.broadcast_left(b)?.contiguous()?.matmul(&x.reshape((b, c, h * w))?)?;
        y.reshape((b, out_c, oh, ow))?
    } else {
        // one tall gemm over every output pixel of the batch
        let win = Window { c, h, w, k: kh, stride, pad: padding, oh, ow };
        let nhwc = x.permute((0, 2, 3, 1))?.contiguous()?;
        let patches = nhwc.apply_op1(Im2Col(win))?.reshape((b * oh * ow, c * kh * kw))?;
        // weight rows in (dy, dx, c) order to match the patch columns
        let wm = weight.permute((0, 2, 3, 1))?.reshape((out_c, kh * kw * c))?;
        patches.matmul(&wm.t()?)?.reshape((b, oh, ow, out_c))?.permute((0, 3, 1, 2))?
    };
    match bias {
        Some(bias) => y.broadcast_add(&bias.reshape((1, out_c, 1, 1))?),
        None => y.contiguous(),
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Option<Tensor>,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    pub fn new(
        vb: &ParamBuilder,
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let bound = 1.0 / ((in_c * kernel * kernel) as f64).sqrt();
        Self::with_init(vb, in_c, out_c, kernel, stride, padding, Init::Uniform(bound))
    }

    /// Convolution whose weight and bias start at exactly zero.
    pub fn zeroed(vb: &ParamBuilder, in_c: usize, out_c: usize, kernel: usize) -> Result<Self> {
        Self::with_init(vb, in_c, out_c, kernel, 1, kernel / 2, Init::Zeros)
    }

    fn with_init(
        vb: &ParamBuilder,
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        init: Init,
    ) -> Result<Self> {
        let weight = vb.get((out_c, in_c, kernel, kernel), "weight", init)?;
        let bias = vb.get(out_c, "bias", init)?;
        Ok(Self { weight, bias: Some(bias), stride, padding })
    }
}

impl Module for Conv2d {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        conv2d(x, &self.weight, self.bias.as_ref(), self.stride, self.padding)
    }
}

/// Dense layer applied to the last axis; weight is stored `[out, in]`.
#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Option<Tensor>,
}

impl Linear {
    pub fn new(vb: &ParamBuilder, in_dim: usize, out_dim: usize, bias: bool) -> Result<Self> {
        let bound = 1.0 / (in_dim as f64).sqrt();
        Self::with_init(vb, in_dim, out_dim, bias, Init::Uniform(bound))
    }

    pub fn zeroed(vb: &ParamBuilder, in_dim: usize, out_dim: usize, bias: bool) -> Result<Self> {
        Self::with_init(vb, in_dim, out_dim, bias, Init::Zeros)
    }

    fn with_init(
        vb: &ParamBuilder,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        init: Init,
    ) -> Result<Self> {
        let weight = vb.get((out_dim, in_dim), "weight", init)?;
        let bias = if bias { Some(vb.get(out_dim, "bias", init)?) } else { None };
        Ok(Self { weight, bias })
    }

    pub fn from_tensors(weight: Tensor, bias: Option<Tensor>) -> Self {
        Self { weight, bias }
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> Option<&Tensor> {
        self.bias.as_ref()
    }

    pub fn in_dim(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.dims()[0]
    }
}

impl Module for Linear {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let (last, lead) = dims.split_last().ok_or_else(|| candle_core::Error::Msg("linear: scalar input".into()))?;
        let rows = lead.iter().product::<usize>();
        let mut out_dims = lead.to_vec();
        out_dims.push(self.out_dim());
        let y = x.reshape((rows, *last))?.matmul(&self.weight.t()?)?.reshape(out_dims)?;
        match &self.bias {
            Some(b) => y.broadcast_add(b),
            None => Ok(y),
        }
    }
}

pub fn group_norm(vb: &ParamBuilder, groups: usize, channels: usize) -> Result<candle_nn::GroupNorm> {
    if channels % groups != 0 {
        candle_core::bail!("group norm: {channels} channels not divisible by {groups} groups");
    }
    let weight = vb.get(channels, "weight", Init::Ones)?;
    let bias = vb.get(channels, "bias", Init::Zeros)?;
    candle_nn::GroupNorm::new(weight, bias, channels, groups, 1e-5)
}

struct SoftmaxLast;

fn softmax_rows<T: candle_core::WithDType + num_traits::Float>(src: &[T], dim: usize) -> Vec<T> {
    let mut out = vec![T::zero(); src.len()];
    for (x, y) in src.chunks_exact(dim).zip(out.chunks_exact_mut(dim)) {
        let max = x.iter().copied().fold(T::neg_infinity(), num_traits::Float::max);
        let mut sum = T::zero();
        for (yi, &xi) in y.iter_mut().zip(x) {
            *yi = (xi - max).exp();
            sum = sum + *yi;
        }
        for yi in y.iter_mut() {
            *yi = *yi / sum;
        }
    }
    out
}

impl CustomOp1 for SoftmaxLast {
    fn name(&self) -> &'static str {
        "softmax-last"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> Result<(CpuStorage, Shape)> {
        let dim = layout.dims().last().copied().unwrap_or(1).max(1);
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(softmax_rows(contiguous_slice(v, layout)?, dim)),
            CpuStorage::F64(v) => CpuStorage::F64(softmax_rows(contiguous_slice(v, layout)?, dim)),
            _ => candle_core::bail!("softmax: unsupported dtype {:?}", storage.dtype()),
        };
        Ok((out, layout.shape().clone()))
    }

    fn bwd(&self, _arg: &Tensor, res: &Tensor, grad: &Tensor) -> Result<Option<Tensor>> {
        let dot = (grad * res)?.sum_keepdim(D::Minus1)?;
        Ok(Some((res * grad.broadcast_sub(&dot)?)?))
    }
}

/// Numerically stable softmax over the last axis.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    x.contiguous()?.apply_op1(SoftmaxLast)
}

/// `softmax(q k^T / sqrt(d)) v` for `q: [B, Lq, d]`, `k, v: [B, Lk, d]`.
pub fn scaled_dot_attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    let d = q.dim(D::Minus1)?;
    let scores = (q.matmul(&k.t()?)? / (d as f64).sqrt())?;
    softmax_last(&scores)?.matmul(v)
}

/// Per-token layer normalisation over the last axis without affine terms.
pub fn layer_norm_tokens(x: &Tensor, eps: f64) -> Result<Tensor> {
    let mean = x.mean_keepdim(D::Minus1)?;
    let centered = x.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
    centered.broadcast_div(&(var + eps)?.sqrt()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    #[test]
    fn im2col_matches_native_conv() -> Result<()> {
        let dev = Device::Cpu;
        let x = Tensor::randn(0f64, 1.0, (2, 3, 9, 8), &dev)?;
        let w = Tensor::randn(0f64, 1.0, (5, 3, 3, 3), &dev)?;
        for (stride, pad) in [(1, 1), (2, 1), (1, 0), (2, 0)] {
            let a = conv2d(&x, &w, None, stride, pad)?;
            let b = x.conv2d(&w, pad, stride, 1, 1)?;
            assert_eq!(a.dims(), b.dims());
            let err = (a - b)?.abs()?.max_all()?.to_scalar::<f64>()?;
            assert!(err < 1e-10, "stride {stride} pad {pad}: {err}");
        }
        let w1 = Tensor::randn(0f64, 1.0, (4, 3, 1, 1), &dev)?;
        let a = conv2d(&x, &w1, None, 1, 0)?;
        let b = x.conv2d(&w1, 0, 1, 1, 1)?;
        assert!((a - b)?.abs()?.max_all()?.to_scalar::<f64>()? < 1e-10);
        Ok(())
    }

    #[test]
    fn im2col_gradients_match_native_conv() -> Result<()> {
        let dev = Device::Cpu;
        let x = candle_core::Var::randn(0f64, 1.0, (2, 3, 7, 7), &dev)?;
        let w = candle_core::Var::randn(0f64, 1.0, (4, 3, 3, 3), &dev)?;
        let probe = Tensor::randn(0f64, 1.0, (2, 4, 4, 4), &dev)?;
        let ga = (conv2d(&x, &w, None, 2, 1)? * &probe)?.sum_all()?.backward()?;
        let gb = (x.conv2d(&w, 1, 2, 1, 1)? * &probe)?.sum_all()?.backward()?;
        for v in [x.as_tensor(), w.as_tensor()] {
            let (a, b) = (ga.get(v).unwrap(), gb.get(v).unwrap());
            assert!((a - b)?.abs()?.max_all()?.to_scalar::<f64>()? < 1e-10);
        }
        Ok(())
    }

    #[test]
    fn softmax_gradient_matches_composed_ops() -> Result<()> {
        let x = candle_core::Var::randn(0f64, 2.0, (3, 5), &Device::Cpu)?;
        let probe = Tensor::randn(0f64, 1.0, (3, 5), &Device::Cpu)?;
        let composed = {
            let e = x.exp()?;
            e.broadcast_div(&e.sum_keepdim(1)?)?
        };
        let ga = (softmax_last(&x)? * &probe)?.sum_all()?.backward()?;
        let gb = (composed * &probe)?.sum_all()?.backward()?;
        let (a, b) = (ga.get(&x).unwrap(), gb.get(&x).unwrap());
        assert!((a - b)?.abs()?.max_all()?.to_scalar::<f64>()? < 1e-12);
        Ok(())
    }

    #[test]
    fn linear_on_batched_tokens() -> Result<()> {
        let dev = Device::Cpu;
        let w = Tensor::randn(0f64, 1.0, (4, 3), &dev)?;
        let b = Tensor::randn(0f64, 1.0, 4, &dev)?;
        let x = Tensor::randn(0f64, 1.0, (2, 5, 3), &dev)?;
        let y = Linear::from_tensors(w.clone(), Some(b.clone())).forward(&x)?;
        let (xv, wv, bv) = (x.to_vec3::<f64>()?, w.to_vec2::<f64>()?, b.to_vec1::<f64>()?);
        let yv = y.to_vec3::<f64>()?;
        for i in 0..2 {
            for j in 0..5 {
                for o in 0..4 {
                    let e = bv[o] + (0..3).map(|c| xv[i][j][c] * wv[o][c]).sum::<f64>();
                    assert!((yv[i][j][o] - e).abs() < 1e-12);
                }
            }
        }
        Ok(())
    }

    #[test]
    fn softmax_rows_sum_to_one() -> Result<()> {
        let x = Tensor::randn(0f32, 3.0, (4, 7), &Device::Cpu)?;
        let s = softmax_last(&x)?.sum(1)?.to_vec1::<f32>()?;
        for v in s {
            assert!((v - 1.0).abs() < 1e-5);
        }
        Ok(())
    }

    #[test]
    fn layer_norm_constant_token_is_zero() -> Result<()> {
        let x = Tensor::ones((1, 4), DType::F64, &Device::Cpu)?;
        let y = layer_norm_tokens(&x, 1e-5)?.to_vec2::<f64>()?;
        assert_eq!(y, vec![vec![0.0; 4]]);
        Ok(())
    }
}
