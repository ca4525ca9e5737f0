//! Procedural stick-figure clips with exactly aligned part maps.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use image::{GrayImage, Luma, Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Error, Result};
use crate::pose_control::{PoseMap, NUM_PARTS};

/// Part indices, in code order (`code = index + 1`).
pub const HEAD: usize = 0;
pub const TORSO: usize = 1;
pub const LEFT_ARM: usize = 2;
pub const RIGHT_ARM: usize = 3;
pub const LEFT_LEG: usize = 4;
pub const RIGHT_LEG: usize = 5;

/// Draw priority when capsules overlap.
const PRIORITY: [usize; NUM_PARTS] = [HEAD, TORSO, LEFT_ARM, RIGHT_ARM, LEFT_LEG, RIGHT_LEG];

/// Canonical skeleton in units of the image side: segment length and
/// capsule radius per part. Shared by every identity.
const LENGTH: [f64; NUM_PARTS] = [0.10, 0.26, 0.22, 0.22, 0.27, 0.27];
const RADIUS: [f64; NUM_PARTS] = [0.075, 0.065, 0.04, 0.04, 0.045, 0.045];

/// Resting joint angles. Torso and head are measured from "up", limbs from
/// "down"; positive turns towards +x.
const BASE_ANGLE: [f64; NUM_PARTS] = [0.0, 0.0, -0.6, 0.6, -0.25, 0.25];
const MAX_AMPLITUDE: [f64; NUM_PARTS] = [0.3, 0.15, 1.2, 1.2, 0.5, 0.5];

/// Pose of the figure in one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FigureState {
    /// Hip position, normalised to `[0, 1]`.
    pub root: (f64, f64),
    /// Joint angles in radians, indexed by part.
    pub angles: [f64; NUM_PARTS],
}

/// Appearance of an identity: body and background colours in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Style {
    pub body: [f32; 3],
    pub background: [f32; 3],
}

impl Style {
    pub fn from_seed(identity_seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(identity_seed ^ 0x5EED_1D);
        let color = |rng: &mut ChaCha8Rng| -> [f32; 3] {
            [rng.random_range(-0.9..0.9), rng.random_range(-0.9..0.9), rng.random_range(-0.9..0.9)]
        };
        let background = color(&mut rng);
        loop {
            let body = color(&mut rng);
            let dist: f32 = body.iter().zip(&background).map(|(a, b)| (a - b).abs()).sum();
            if dist >= 0.9 {
                return Self { body, background };
            }
        }
    }
}

/// Smooth periodic joint trajectories drawn from `motion_seed`.
#[derive(Debug, Clone, PartialEq)]
pub struct Motion {
    amplitude: [f64; NUM_PARTS],
    frequency: [f64; NUM_PARTS],
    phase: [f64; NUM_PARTS],
    sway: (f64, f64, f64),
}

impl Motion {
    pub fn from_seed(motion_seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(motion_seed ^ 0x00D0_7105);
        let mut amplitude = [0.0; NUM_PARTS];
        let mut frequency = [0.0; NUM_PARTS];
        let mut phase = [0.0; NUM_PARTS];
        for j in 0..NUM_PARTS {
            amplitude[j] = MAX_AMPLITUDE[j] * rng.random_range(0.4..1.0);
            // cycles per frame
            frequency[j] = rng.random_range(0.03..0.08);
            phase[j] = rng.random_range(0.0..2.0 * PI);
        }
        let sway = (rng.random_range(0.0..0.06), rng.random_range(0.02..0.06), rng.random_range(0.0..2.0 * PI));
        Self { amplitude, frequency, phase, sway }
    }

    pub fn state(&self, frame: usize) -> FigureState {
        let f = frame as f64;
        let mut angles = BASE_ANGLE;
        for (j, a) in angles.iter_mut().enumerate() {
            *a += self.amplitude[j] * (2.0 * PI * self.frequency[j] * f + self.phase[j]).sin();
        }
        let (amp, freq, ph) = self.sway;
        let root = (0.5 + amp * (2.0 * PI * freq * f + ph).sin(), 0.6 + 0.3 * amp * (2.0 * PI * freq * f + ph).cos());
        FigureState { root, angles }
    }
}

fn up(theta: f64) -> (f64, f64) {
    (theta.sin(), -theta.cos())
}

fn down(theta: f64) -> (f64, f64) {
    (theta.sin(), theta.cos())
}

/// Capsule segments `(a, b, radius)` in normalised coordinates, by part.
fn capsules(state: &FigureState) -> [((f64, f64), (f64, f64), f64); NUM_PARTS] {
    let a = &state.angles;
    let hip = state.root;
    let step = |p: (f64, f64), d: (f64, f64), len: f64| (p.0 + d.0 * len, p.1 + d.1 * len);
    let neck = step(hip, up(a[TORSO]), LENGTH[TORSO]);
    let head = step(neck, up(a[TORSO] + a[HEAD]), LENGTH[HEAD]);
    let mut out = [((0.0, 0.0), (0.0, 0.0), 0.0); NUM_PARTS];
    out[HEAD] = (head, head, RADIUS[HEAD]);
    out[TORSO] = (hip, neck, RADIUS[TORSO]);
    for (part, origin) in [(LEFT_ARM, neck), (RIGHT_ARM, neck), (LEFT_LEG, hip), (RIGHT_LEG, hip)] {
        out[part] = (origin, step(origin, down(a[part]), LENGTH[part]), RADIUS[part]);
    }
    out
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let s = if len2 > 0.0 { (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0) } else { 0.0 };
    let (cx, cy) = (a.0 + s * dx, a.1 + s * dy);
    ((p.0 - cx).powi(2) + (p.1 - cy).powi(2)).sqrt()
}

/// Rasterises the figure's part map at `h x w`.
pub fn render_pose_map(state: &FigureState, h: usize, w: usize) -> PoseMap {
    let caps = capsules(state);
    let side = h.min(w) as f64;
    let mut codes = vec![0u8; h * w];
    for y in 0..h {
        for x in 0..w {
            // pixel space, with the skeleton scaled by the shorter side
            let p = (x as f64 + 0.5, y as f64 + 0.5);
            for &part in &PRIORITY {
                let (a, b, r) = caps[part];
                let a = (a.0 * w as f64, a.1 * h as f64);
                let b = (b.0 * w as f64, b.1 * h as f64);
                if segment_distance(p, a, b) <= r * side {
                    codes[y * w + x] = part as u8 + 1;
                    break;
                }
            }
        }
    }
    PoseMap { height: h, width: w, codes }
}

/// Paints a frame `[3, H, W]` (channel-major) from its part map.
pub fn render_frame(pose: &PoseMap, style: &Style) -> Vec<f32> {
    let hw = pose.height * pose.width;
    let mut out = vec![0f32; 3 * hw];
    for (i, &code) in pose.codes.iter().enumerate() {
        let color = if code > 0 { style.body } else { style.background };
        for c in 0..3 {
            out[c * hw + i] = color[c];
        }
    }
    out
}

/// A rendered clip: `frames[i]` is `[3, H, W]` in `[-1, 1]`, channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoClip {
    pub identity_seed: u64,
    pub motion_seed: u64,
    pub height: usize,
    pub width: usize,
    pub frames: Vec<Vec<f32>>,
    pub poses: Vec<PoseMap>,
}

impl VideoClip {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn frame_tensor(&self, i: usize, dtype: DType, dev: &Device) -> Result<Tensor> {
        let f = self.frames.get(i).ok_or_else(|| invalid!("frame {i} out of range"))?;
        Ok(Tensor::from_slice(f, (3, self.height, self.width), dev)?.to_dtype(dtype)?)
    }

    /// Frames `[start, start + k)` as `[3, k, H, W]`.
    pub fn segment_tensor(&self, start: usize, k: usize, dtype: DType, dev: &Device) -> Result<Tensor> {
        if start + k > self.len() {
            return Err(invalid!("segment {start}..{} exceeds clip of {}", start + k, self.len()));
        }
        let frames = (start..start + k).map(|i| self.frame_tensor(i, dtype, dev)).collect::<Result<Vec<_>>>()?;
        Ok(Tensor::stack(&frames, 1)?)
    }
}

pub fn generate_clip(identity_seed: u64, motion_seed: u64, n: usize, h: usize, w: usize) -> Result<VideoClip> {
    if n == 0 || h == 0 || w == 0 {
        return Err(invalid!("clip dimensions must be positive, got N={n} H={h} W={w}"));
    }
    let style = Style::from_seed(identity_seed);
    let motion = Motion::from_seed(motion_seed);
    let poses: Vec<PoseMap> = (0..n).map(|i| render_pose_map(&motion.state(i), h, w)).collect();
    let frames = poses.iter().map(|p| render_frame(p, &style)).collect();
    Ok(VideoClip { identity_seed, motion_seed, height: h, width: w, frames, poses })
}

/// A single still: one frame of `motion_seed` at `frame`.
pub fn generate_still(identity_seed: u64, motion_seed: u64, frame: usize, h: usize, w: usize) -> Result<VideoClip> {
    let style = Style::from_seed(identity_seed);
    let pose = render_pose_map(&Motion::from_seed(motion_seed).state(frame), h, w);
    let frames = vec![render_frame(&pose, &style)];
    Ok(VideoClip { identity_seed, motion_seed, height: h, width: w, frames, poses: vec![pose] })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusConfig {
    pub train_identities: usize,
    pub train_motions: usize,
    pub heldout_identities: usize,
    pub heldout_motions: usize,
    pub stills: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            train_identities: 8,
            train_motions: 4,
            heldout_identities: 2,
            heldout_motions: 2,
            stills: 16,
            frames: 16,
            height: 32,
            width: 32,
            seed: 0,
        }
    }
}

/// Seeds are laid out so that training and held-out identities and motions
/// never collide.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub train: Vec<VideoClip>,
    pub heldout: Vec<VideoClip>,
    pub stills: Vec<VideoClip>,
}

pub fn identity_seed(cfg: &CorpusConfig, i: usize) -> u64 {
    cfg.seed.wrapping_mul(1_000_003).wrapping_add(1000 + i as u64)
}

pub fn motion_seed(cfg: &CorpusConfig, j: usize) -> u64 {
    cfg.seed.wrapping_mul(1_000_003).wrapping_add(2000 + j as u64)
}

pub fn build_corpus(cfg: &CorpusConfig) -> Result<Corpus> {
    let (ti, tm) = (cfg.train_identities, cfg.train_motions);
    let mut train = Vec::new();
    for i in 0..ti {
        for j in 0..tm {
            train.push(generate_clip(identity_seed(cfg, i), motion_seed(cfg, j), cfg.frames, cfg.height, cfg.width)?);
        }
    }
    let mut heldout = Vec::new();
    for i in ti..ti + cfg.heldout_identities {
        for j in tm..tm + cfg.heldout_motions {
            heldout.push(generate_clip(identity_seed(cfg, i), motion_seed(cfg, j), cfg.frames, cfg.height, cfg.width)?);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x57_11_15);
    let first_still = ti + cfg.heldout_identities;
    let stills = (0..cfg.stills)
        .map(|s| {
            let frame = rng.random_range(0..64);
            generate_still(
                identity_seed(cfg, first_still + s),
                motion_seed(cfg, tm + cfg.heldout_motions + s),
                frame,
                cfg.height,
                cfg.width,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Corpus { train, heldout, stills })
}

pub fn to_u8(v: f32) -> u8 {
    (((v.clamp(-1.0, 1.0) + 1.0) * 0.5) * 255.0).round() as u8
}

pub fn from_u8(v: u8) -> f32 {
    v as f32 / 255.0 * 2.0 - 1.0
}

/// Writes `[3, H, W]` channel-major pixels in `[-1, 1]` as an 8-bit RGB PNG.
pub fn write_rgb_png(path: &Path, pixels: &[f32], h: usize, w: usize) -> Result<()> {
    if pixels.len() != 3 * h * w {
        return Err(invalid!("{} values for a 3x{h}x{w} image", pixels.len()));
    }
    let hw = h * w;
    let img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        Rgb([to_u8(pixels[i]), to_u8(pixels[hw + i]), to_u8(pixels[2 * hw + i])])
    });
    img.save(path)?;
    Ok(())
}

pub fn read_rgb_png(path: &Path) -> Result<(Vec<f32>, usize, usize)> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let hw = h * w;
    let mut out = vec![0f32; 3 * hw];
    for (x, y, p) in img.enumerate_pixels() {
        let i = y as usize * w + x as usize;
        for c in 0..3 {
            out[c * hw + i] = from_u8(p[c]);
        }
    }
    Ok((out, h, w))
}

pub fn write_pose_png(path: &Path, pose: &PoseMap) -> Result<()> {
    let img = GrayImage::from_fn(pose.width as u32, pose.height as u32, |x, y| {
        Luma([pose.codes[y as usize * pose.width + x as usize]])
    });
    img.save(path)?;
    Ok(())
}

pub fn read_pose_png(path: &Path) -> Result<PoseMap> {
    let img = image::open(path)?.to_luma8();
    PoseMap::new(img.height() as usize, img.width() as usize, img.into_raw())
}

/// Writes one clip as `frame_XXXX.png` + `pose_XXXX.png` + `manifest.txt`.
pub fn write_clip(dir: &Path, clip: &VideoClip) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (i, (f, p)) in clip.frames.iter().zip(&clip.poses).enumerate() {
        write_rgb_png(&dir.join(format!("frame_{i:04}.png")), f, clip.height, clip.width)?;
        write_pose_png(&dir.join(format!("pose_{i:04}.png")), p)?;
    }
    let manifest = format!(
        "identity_seed = {}\nmotion_seed = {}\nframes = {}\nheight = {}\nwidth = {}\n",
        clip.identity_seed,
        clip.motion_seed,
        clip.len(),
        clip.height,
        clip.width
    );
    fs::write(dir.join("manifest.txt"), manifest)?;
    Ok(())
}

fn manifest_value(text: &str, key: &str) -> Option<u64> {
    text.lines().find_map(|l| {
        let (k, v) = l.split_once('=')?;
        (k.trim() == key).then(|| v.trim().parse().ok()).flatten()
    })
}

/// Reads a clip written by [`write_clip`]. Pixels come back quantised to 8 bits.
pub fn read_clip(dir: &Path) -> Result<VideoClip> {
    let manifest = fs::read_to_string(dir.join("manifest.txt"))?;
    let get = |k: &str| {
        manifest_value(&manifest, k)
            .ok_or_else(|| Error::Config(format!("{}: manifest lacks `{k}`", dir.display())))
    };
    let n = get("frames")? as usize;
    let (mut frames, mut poses) = (Vec::with_capacity(n), Vec::with_capacity(n));
    let (mut h, mut w) = (get("height")? as usize, get("width")? as usize);
    for i in 0..n {
        let (f, fh, fw) = read_rgb_png(&dir.join(format!("frame_{i:04}.png")))?;
        (h, w) = (fh, fw);
        frames.push(f);
        let pose_path = dir.join(format!("pose_{i:04}.png"));
        poses.push(if pose_path.exists() { read_pose_png(&pose_path)? } else { PoseMap::empty(h, w) });
    }
    Ok(VideoClip {
        identity_seed: get("identity_seed").unwrap_or(0),
        motion_seed: get("motion_seed").unwrap_or(0),
        height: h,
        width: w,
        frames,
        poses,
    })
}

/// Exports a corpus under `root/{train,heldout,stills}/clip_XXXX`.
pub fn write_corpus(root: &Path, corpus: &Corpus) -> Result<Vec<PathBuf>> {
    let mut dirs = Vec::new();
    for (split, clips) in [("train", &corpus.train), ("heldout", &corpus.heldout), ("stills", &corpus.stills)] {
        for (i, clip) in clips.iter().enumerate() {
            let dir = root.join(split).join(format!("clip_{i:04}"));
            write_clip(&dir, clip)?;
            dirs.push(dir);
        }
    }
    Ok(dirs)
}

/// Reads every `clip_*` directory of `root/split`, in name order.
pub fn read_split(root: &Path, split: &str) -> Result<Vec<VideoClip>> {
    let dir = root.join(split);
    if !dir.exists() {
        return Ok(Vec::new());
    }
    let mut entries: Vec<PathBuf> = fs::read_dir(&dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    entries.sort();
    entries.iter().map(|p| read_clip(p)).collect()
}
