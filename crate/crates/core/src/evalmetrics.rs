//! Pixel metrics: L1, foreground L1, PSNR, SSIM and a frame-difference
//! flicker score.

use std::fmt;
use std::io::Write;
use std::path::Path;

use crate::error::{invalid, Result};
use crate::synthdata::VideoClip;

/// A video `[N, C, H, W]`, row-major, in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Video {
    pub frames: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Video {
    pub fn new(frames: usize, channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != frames * channels * height * width {
            return Err(invalid!(
                "{} values for a {frames}x{channels}x{height}x{width} video",
                data.len()
            ));
        }
        Ok(Self { frames, channels, height, width, data })
    }

    pub fn from_clip(clip: &VideoClip) -> Self {
        let data = clip.frames.iter().flatten().map(|&v| v as f64).collect();
        Self { frames: clip.len(), channels: 3, height: clip.height, width: clip.width, data }
    }

    fn shape(&self) -> [usize; 4] {
        [self.frames, self.channels, self.height, self.width]
    }

    fn plane(&self, n: usize, c: usize) -> &[f64] {
        let hw = self.height * self.width;
        let start = (n * self.channels + c) * hw;
        &self.data[start..start + hw]
    }

    fn unit(&self) -> Vec<f64> {
        self.data.iter().map(|v| (v + 1.0) * 0.5).collect()
    }
}

fn check_same(a: &Video, b: &Video) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(invalid!("video shapes differ: {:?} vs {:?}", a.shape(), b.shape()));
    }
    Ok(())
}

/// Mean absolute difference. `mask` holds one flag per `(frame, y, x)` and
/// selects pixels (all channels) to include.
pub fn l1(a: &Video, b: &Video, mask: Option<&[bool]>) -> Result<f64> {
    check_same(a, b)?;
    let hw = a.height * a.width;
    if let Some(m) = mask {
        if m.len() != a.frames * hw {
            return Err(invalid!("mask has {} entries, expected {}", m.len(), a.frames * hw));
        }
    }
    let (mut sum, mut count) = (0.0, 0usize);
    for (i, (x, y)) in a.data.iter().zip(&b.data).enumerate() {
        let n = i / (a.channels * hw);
        if mask.is_none_or(|m| m[n * hw + i % hw]) {
            sum += (x - y).abs();
            count += 1;
        }
    }
    Ok(if count == 0 { 0.0 } else { sum / count as f64 })
}

/// PSNR with peak 1 for data already on the unit scale.
pub fn psnr_unit(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(invalid!("psnr inputs must be nonempty and equal length ({} vs {})", a.len(), b.len()));
    }
    let mse = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64;
    Ok(if mse == 0.0 { f64::INFINITY } else { 10.0 * (1.0 / mse).log10() })
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn gaussian_window(size: usize) -> Vec<f64> {
    let mid = (size as f64 - 1.0) / 2.0;
    let g: Vec<f64> =
        (0..size).map(|i| (-((i as f64 - mid).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()).collect();
    let total: f64 = g.iter().sum();
    let mut w = Vec::with_capacity(size * size);
    for gy in &g {
        for gx in &g {
            w.push(gy * gx / (total * total));
        }
    }
    w
}

/// Mean SSIM of one `h x w` plane on the unit scale, over valid window
/// positions. Planes smaller than the window use a window of the plane's
/// shorter side.
pub fn ssim_unit(a: &[f64], b: &[f64], h: usize, w: usize) -> Result<f64> {
    if a.len() != h * w || b.len() != h * w || h == 0 || w == 0 {
        return Err(invalid!("ssim planes must both be {h}x{w}"));
    }
    let size = SSIM_WINDOW.min(h).min(w);
    let win = gaussian_window(size);
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let (mut total, mut count) = (0.0, 0usize);
    for y0 in 0..=h - size {
        for x0 in 0..=w - size {
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for dy in 0..size {
                for dx in 0..size {
                    let g = win[dy * size + dx];
                    let i = (y0 + dy) * w + x0 + dx;
                    ma += g * a[i];
                    mb += g * b[i];
                    saa += g * (a[i] * a[i]);
                    sbb += g * (b[i] * b[i]);
                    sab += g * (a[i] * b[i]);
                }
            }
            let va = saa - ma * ma;
            let vb = sbb - mb * mb;
            let mab = ma * mb;
            let cov = sab - mab;
            let s = ((2.0 * mab + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            total += s.clamp(-1.0, 1.0);
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// PSNR between videos in `[-1, 1]`, rescaled to `[0, 1]`.
pub fn psnr(a: &Video, b: &Video) -> Result<f64> {
    check_same(a, b)?;
    psnr_unit(&a.unit(), &b.unit())
}

/// SSIM between videos in `[-1, 1]`, rescaled to `[0, 1]`, averaged over
/// channels and frames.
pub fn ssim(a: &Video, b: &Video) -> Result<f64> {
    check_same(a, b)?;
    let (mut total, mut count) = (0.0, 0usize);
    for n in 0..a.frames {
        for c in 0..a.channels {
            let pa: Vec<f64> = a.plane(n, c).iter().map(|v| (v + 1.0) * 0.5).collect();
            let pb: Vec<f64> = b.plane(n, c).iter().map(|v| (v + 1.0) * 0.5).collect();
            total += ssim_unit(&pa, &pb, a.height, a.width)?;
            count += 1;
        }
    }
    if count == 0 {
        return Err(invalid!("ssim of an empty video"));
    }
    Ok(total / count as f64)
}

/// Mean over consecutive frame pairs of the mean absolute difference.
pub fn flicker(v: &Video) -> Result<f64> {
    if v.frames < 2 {
        return Err(invalid!("flicker needs at least 2 frames, got {}", v.frames));
    }
    let len = v.channels * v.height * v.width;
    let total: f64 = (1..v.frames)
        .map(|n| {
            let (prev, cur) = (&v.data[(n - 1) * len..n * len], &v.data[n * len..(n + 1) * len]);
            prev.iter().zip(cur).map(|(x, y)| (x - y).abs()).sum::<f64>() / len as f64
        })
        .sum();
    Ok(total / (v.frames - 1) as f64)
}

/// Mean absolute difference across the given frame pairs `(i, i + 1)`.
pub fn boundary_discontinuity(v: &Video, boundaries: &[usize]) -> Result<f64> {
    let len = v.channels * v.height * v.width;
    let pairs: Vec<usize> = boundaries.iter().copied().filter(|&i| i + 1 < v.frames).collect();
    if pairs.is_empty() {
        return Err(invalid!("no frame boundary lies inside a {}-frame video", v.frames));
    }
    let total: f64 = pairs
        .iter()
        .map(|&i| {
            let (a, b) = (&v.data[i * len..(i + 1) * len], &v.data[(i + 1) * len..(i + 2) * len]);
            a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / len as f64
        })
        .sum();
    Ok(total / pairs.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClipMetrics {
    pub name: String,
    pub l1: f64,
    pub l1_fg: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub flicker: f64,
}

/// Scores a generated clip against ground truth. The foreground mask is the
/// union of the ground truth's part channels.
pub fn evaluate_clip(name: &str, generated: &VideoClip, truth: &VideoClip) -> Result<ClipMetrics> {
    let (a, b) = (Video::from_clip(generated), Video::from_clip(truth));
    let mask: Vec<bool> = truth.poses.iter().flat_map(|p| p.foreground()).collect();
    Ok(ClipMetrics {
        name: name.to_string(),
        l1: l1(&a, &b, None)?,
        l1_fg: l1(&a, &b, Some(&mask))?,
        psnr: psnr(&a, &b)?,
        ssim: ssim(&a, &b)?,
        flicker: if a.frames >= 2 { flicker(&a)? } else { 0.0 },
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub clips: Vec<ClipMetrics>,
    pub mean: ClipMetrics,
}

impl MetricReport {
    pub fn new(clips: Vec<ClipMetrics>) -> Result<Self> {
        if clips.is_empty() {
            return Err(invalid!("metric report needs at least one clip"));
        }
        let n = clips.len() as f64;
        let avg = |f: fn(&ClipMetrics) -> f64| clips.iter().map(f).sum::<f64>() / n;
        let mean = ClipMetrics {
            name: "mean".into(),
            l1: avg(|c| c.l1),
            l1_fg: avg(|c| c.l1_fg),
            psnr: avg(|c| c.psnr),
            ssim: avg(|c| c.ssim),
            flicker: avg(|c| c.flicker),
        };
        Ok(Self { clips, mean })
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["clip", "l1", "l1_fg", "psnr", "ssim", "flicker"])?;
        for c in self.clips.iter().chain(std::iter::once(&self.mean)) {
            w.write_record([
                c.name.clone(),
                format!("{:.6}", c.l1),
                format!("{:.6}", c.l1_fg),
                format!("{:.6}", c.psnr),
                format!("{:.6}", c.ssim),
                format!("{:.6}", c.flicker),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn print_table(&self, out: &mut impl Write) -> Result<()> {
        write!(out, "{self}")?;
        Ok(())
    }
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<24} {:>9} {:>9} {:>9} {:>8} {:>9}", "clip", "L1", "L1_fg", "PSNR", "SSIM", "flicker")?;
        for c in self.clips.iter().chain(std::iter::once(&self.mean)) {
            writeln!(
                f,
                "{:<24} {:>9.4} {:>9.4} {:>9.3} {:>8.4} {:>9.4}",
                c.name, c.l1, c.l1_fg, c.psnr, c.ssim, c.flicker
            )?;
        }
        Ok(())
    }
}
