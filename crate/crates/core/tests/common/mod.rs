//! Reference implementations and fixtures shared by the integration tests.
#![allow(dead_code)]

use std::collections::BTreeMap;

use animlab::backbone::{temporal_attention, AttentionParams, BackboneConfig, FeatureMap5D, SpatialAttention};
use animlab::diffusion::{seeded_normal, stage2_loss, Conditioning, LossBatch, NoiseSchedule};
use animlab::fusion::{fuse_predictions, plan_segments, SegmentPlan};
use animlab::model::{AnimateModel, ModelConfig};
use animlab::nn::Linear;
use animlab::params::{ParamGroup, ParamStore, TrainMask};
use animlab::pose_control::pose_sequence_tensor;
use animlab::synthdata::{generate_clip, VideoClip};
use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn uniform(rng: &mut ChaCha8Rng, n: usize, bound: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-bound..bound)).collect()
}

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(uniform(rng, n, bound), shape, &Device::Cpu).unwrap()
}

/// Largest entry-wise difference divided by the largest reference magnitude.
pub fn rel_err(got: &[f64], want: &[f64]) -> f64 {
    assert_eq!(got.len(), want.len());
    let diff = got.iter().zip(want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let scale = want.iter().map(|v| v.abs()).fold(0.0, f64::max).max(1e-300);
    diff / scale
}

pub fn flat(t: &Tensor) -> Vec<f64> {
    t.flatten_all().unwrap().to_dtype(DType::F64).unwrap().to_vec1().unwrap()
}

fn matrix(l: &Linear) -> Vec<Vec<f64>> {
    l.weight().to_dtype(DType::F64).unwrap().to_vec2().unwrap()
}

fn apply(m: &[Vec<f64>], bias: Option<&[f64]>, x: &[f64]) -> Vec<f64> {
    m.iter()
        .enumerate()
        .map(|(o, row)| row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + bias.map_or(0.0, |b| b[o]))
        .collect()
}

/// `to_out(softmax(q kᵀ / √d) v)` written as explicit loops over tokens.
pub fn naive_attention(queries: &[Vec<f64>], keys: &[Vec<f64>], p: &AttentionParams) -> Vec<Vec<f64>> {
    let (wq, wk, wv, wo) = (matrix(&p.to_q), matrix(&p.to_k), matrix(&p.to_v), matrix(&p.to_out));
    let bo: Option<Vec<f64>> = p.to_out.bias().map(|b| b.to_dtype(DType::F64).unwrap().to_vec1().unwrap());
    let d = wq.len() as f64;
    let ks: Vec<Vec<f64>> = keys.iter().map(|x| apply(&wk, None, x)).collect();
    let vs: Vec<Vec<f64>> = keys.iter().map(|x| apply(&wv, None, x)).collect();
    queries
        .iter()
        .map(|x| {
            let q = apply(&wq, None, x);
            let scores: Vec<f64> = ks.iter().map(|k| q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() / d.sqrt()).collect();
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let z: f64 = e.iter().sum();
            let mut mixed = vec![0.0; vs[0].len()];
            for (w, v) in e.iter().zip(&vs) {
                for (acc, vi) in mixed.iter_mut().zip(v) {
                    *acc += w / z * vi;
                }
            }
            apply(&wo, bo.as_deref(), &mixed)
        })
        .collect()
}

pub fn random_attention_params(rng: &mut ChaCha8Rng, c: usize) -> AttentionParams {
    let lin = |rng: &mut ChaCha8Rng, bias: bool| {
        Linear::from_tensors(rand_tensor(rng, &[c, c], 0.6), bias.then(|| rand_tensor(rng, &[c], 0.3)))
    };
    AttentionParams { to_q: lin(rng, false), to_k: lin(rng, false), to_v: lin(rng, false), to_out: lin(rng, true) }
}

/// `pe[p, 2i] = sin(p / 10000^(2i/dim))`, `pe[p, 2i+1] = cos(..)`.
pub fn naive_pe(p: usize, dim: usize) -> Vec<f64> {
    (0..dim)
        .map(|j| {
            let arg = p as f64 / 10000f64.powf((j - j % 2) as f64 / dim as f64);
            if j % 2 == 0 { arg.sin() } else { arg.cos() }
        })
        .collect()
}

/// Temporal attention on a random `[n, c, k, h, w]` map against a loop over
/// every `(n, h, w)` column.
pub fn temporal_oracle_error(seed: u64, dims: (usize, usize, usize, usize, usize)) -> f64 {
    let (n, c, k, h, w) = dims;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = random_attention_params(&mut rng, c);
    let x = rand_tensor(&mut rng, &[n, c, k, h, w], 1.0);
    let got = flat(temporal_attention(&FeatureMap5D::new(x.clone()).unwrap(), &params).unwrap().tensor());
    let xs = flat(&x);
    let at = |b, ch, f, y, xx| ((((b * c + ch) * k + f) * h + y) * w) + xx;
    let mut want = xs.clone();
    for b in 0..n {
        for y in 0..h {
            for xx in 0..w {
                let tokens: Vec<Vec<f64>> = (0..k)
                    .map(|f| {
                        let pe = naive_pe(f, c);
                        (0..c).map(|ch| xs[at(b, ch, f, y, xx)] + pe[ch]).collect()
                    })
                    .collect();
                let out = naive_attention(&tokens, &tokens, &params);
                for (f, o) in out.iter().enumerate() {
                    for ch in 0..c {
                        want[at(b, ch, f, y, xx)] += o[ch];
                    }
                }
            }
        }
    }
    rel_err(&got, &want)
}

/// A spatial attention layer with random weights, f64.
pub fn random_spatial_layer(seed: u64, c: usize, groups: usize) -> (ParamStore, SpatialAttention) {
    let store = ParamStore::new(seed, DType::F64, &Device::Cpu);
    let mask = TrainMask::All;
    let layer = SpatialAttention::new(&store.root(&mask).pp("attn"), c, groups).unwrap();
    (store, layer)
}

/// Hybrid attention with `m` appearance tokens against an explicit loop over
/// the `h*w + m` keys.
pub fn hybrid_oracle_error(seed: u64, b: usize, c: usize, h: usize, w: usize, m: usize) -> f64 {
    let (_store, layer) = random_spatial_layer(seed, c, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
    let x = rand_tensor(&mut rng, &[b, c, h, w], 1.0);
    let extra = rand_tensor(&mut rng, &[b, m, c], 1.0);
    let got = flat(&layer.forward(&x, Some(&extra)).unwrap());
    // the group norm feeding the attention is not under test here
    let tokens = layer.hidden_states(&x).unwrap().to_vec3::<f64>().unwrap();
    let extra_rows = extra.to_vec3::<f64>().unwrap();
    let xs = flat(&x);
    let mut want = xs.clone();
    for bi in 0..b {
        let keys: Vec<Vec<f64>> = tokens[bi].iter().chain(extra_rows[bi].iter()).cloned().collect();
        assert_eq!(keys.len(), h * w + m);
        let out = naive_attention(&tokens[bi], &keys, layer.params());
        for (tok, o) in out.iter().enumerate() {
            for ch in 0..c {
                want[(bi * c + ch) * h * w + tok] += o[ch];
            }
        }
    }
    rel_err(&got, &want)
}

/// Frames covering each index, computed by walking every window slot.
pub fn brute_coverage(n: usize, k: usize, s: usize) -> (usize, Vec<Vec<usize>>) {
    let stride = k - s;
    let mut windows = Vec::new();
    let mut start = 0;
    loop {
        let slots: Vec<usize> = (0..k).map(|j| if start + j < n { start + j } else { start + j - n }).collect();
        windows.push(slots);
        if start + k >= n {
            break;
        }
        start += stride;
    }
    let mut cover = vec![Vec::new(); n];
    for (g, slots) in windows.iter().enumerate() {
        for &f in slots {
            cover[f].push(g);
        }
    }
    (windows.len(), cover)
}

/// Checks every plan and fusion with `N <= 64`, `K` in {4, 8, 16}, `0 < s < K`.
/// Returns the number of configurations checked, or a description of the
/// first disagreement.
pub fn coverage_and_fusion_oracle() -> Result<usize, String> {
    let mut checked = 0;
    for k in [4usize, 8, 16] {
        for n in k..=64 {
            for s in 1..k {
                let plan = plan_segments(n, k, s).map_err(|e| format!("({n},{k},{s}): {e}"))?;
                check_plan(&plan, n, k, s)?;
                checked += 1;
            }
        }
    }
    Ok(checked)
}

fn check_plan(plan: &SegmentPlan, n: usize, k: usize, s: usize) -> Result<(), String> {
    let tag = format!("({n},{k},{s})");
    let (count, cover) = if n == k { (1, vec![vec![0]; n]) } else { brute_coverage(n, k, s) };
    let expected_n = if n == k { 0 } else { (n - k).div_ceil(k - s) };
    if plan.n != expected_n || plan.windows() != count || plan.starts.len() != expected_n + 1 {
        return Err(format!("{tag}: {} windows, n={}, expected {count} and n={expected_n}", plan.windows(), plan.n));
    }
    for w in 0..plan.windows() {
        let frames = plan.window_frames(w);
        if frames.len() != k {
            return Err(format!("{tag}: window {w} has {} slots", frames.len()));
        }
        if frames.iter().enumerate().any(|(j, &f)| plan.is_pad(plan.starts[w], j) && f >= k) {
            return Err(format!("{tag}: pad slot of window {w} points past the first K frames"));
        }
    }
    if let Some(f) = cover.iter().position(|c| c.is_empty()) {
        return Err(format!("{tag}: frame {f} uncovered"));
    }
    // window g filled with g + 1 at every slot, scaled per slot so pad slots differ
    let preds: Vec<Tensor> = (0..plan.windows())
        .map(|g| {
            let vals: Vec<f64> = (0..k).map(|j| (g + 1) as f64 + 0.01 * j as f64).collect();
            Tensor::from_vec(vals, (1, 1, k, 1, 1), &Device::Cpu).unwrap()
        })
        .collect();
    let fused = flat(&fuse_predictions(&preds, plan).map_err(|e| format!("{tag}: {e}"))?);
    let mut sums = vec![(0.0, 0usize); n];
    for w in 0..plan.windows() {
        for (j, &f) in plan.window_frames(w).iter().enumerate() {
            sums[f].0 += (w + 1) as f64 + 0.01 * j as f64;
            sums[f].1 += 1;
        }
    }
    for (f, (sum, cnt)) in sums.iter().enumerate() {
        if cnt != &cover[f].len() {
            return Err(format!("{tag}: frame {f} covered {cnt} times, brute force says {}", cover[f].len()));
        }
        let want = sum / *cnt as f64;
        if (fused[f] - want).abs() > 1e-12 {
            return Err(format!("{tag}: frame {f} fused to {} instead of {want}", fused[f]));
        }
    }
    Ok(())
}

/// Small enough for finite differences and short training runs.
pub fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        backbone: BackboneConfig {
            in_channels: 3,
            image_size: 16,
            base_channels: 8,
            channel_multipliers: vec![1, 2],
            num_res_blocks_per_level: 1,
            attention_resolutions: vec![8],
            temporal_pe_max_len: 16,
            norm_groups: 4,
        },
        reference_clean: false,
    }
}

pub fn tiny_clips(count: usize, frames: usize) -> Vec<VideoClip> {
    (0..count).map(|i| generate_clip(500 + i as u64, 900 + i as u64, frames, 16, 16).unwrap()).collect()
}

/// Fresh parameters with every zero-initialised tensor replaced by small
/// random values, so that each group has a nonzero gradient.
pub fn randomized_store(cfg: &ModelConfig, dtype: DType, seed: u64) -> ParamStore {
    let store = ParamStore::new(seed, dtype, &Device::Cpu);
    AnimateModel::new(&store, cfg, &NoiseSchedule::default(), &TrainMask::All).unwrap();
    store.seal();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED);
    for (_, var) in store.vars() {
        let t = var.as_tensor();
        if flat(t).iter().all(|v| *v == 0.0) {
            let r = rand_tensor(&mut rng, t.dims(), 0.2).to_dtype(dtype).unwrap();
            var.set(&r).unwrap();
        }
    }
    store
}

/// A fixed clip-loss batch for `clip`.
pub fn fixed_batch(clip: &VideoClip, k: usize, t: usize, seed: u64, dtype: DType) -> LossBatch {
    let dev = Device::Cpu;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let targets = clip.segment_tensor(0, k, dtype, &dev).unwrap().unsqueeze(0).unwrap();
    let reference = clip.frame_tensor(0, dtype, &dev).unwrap().unsqueeze(0).unwrap();
    let poses = pose_sequence_tensor(&clip.poses[..k], dtype, &dev).unwrap().unsqueeze(0).unwrap();
    let noise = seeded_normal(&mut rng, targets.dims(), dtype, &dev).unwrap();
    let reference_noise = seeded_normal(&mut rng, reference.dims(), dtype, &dev).unwrap();
    LossBatch { targets, cond: Conditioning { reference, reference_noise, poses }, t: vec![t], noise }
}

#[derive(Debug, Clone)]
pub struct GradSample {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradSample {
    pub fn rel_error(&self) -> f64 {
        (self.analytic - self.numeric).abs() / self.analytic.abs().max(self.numeric.abs()).max(1e-300)
    }
}

/// Central differences (step `h`) against autograd for `per_group` random
/// entries of each of the temporal, appearance and pose groups, on the clip
/// loss of a tiny f64 model.
pub fn gradient_check(seed: u64, per_group: usize, h: f64) -> Vec<GradSample> {
    let cfg = tiny_model_config();
    let sched = NoiseSchedule::default();
    let store = randomized_store(&cfg, DType::F64, seed);
    let model = AnimateModel::new(&store, &cfg, &sched, &TrainMask::All).unwrap();
    let clip = &tiny_clips(1, 3)[0];
    let batch = fixed_batch(clip, 3, 40, seed, DType::F64);
    let loss_of = || stage2_loss(&model, &sched, &batch, 3).unwrap();
    let grads = loss_of().backward().unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6AD);
    let vars = store.vars();
    let mut samples = Vec::new();
    for group in [ParamGroup::Temporal, ParamGroup::Appearance, ParamGroup::Pose] {
        let members: Vec<_> = vars.iter().filter(|(n, _)| ParamGroup::of(n) == Some(group)).collect();
        assert!(!members.is_empty(), "no parameters in {group:?}");
        for _ in 0..per_group {
            let (name, var) = members[rng.random_range(0..members.len())];
            let base = flat(var.as_tensor());
            let index = rng.random_range(0..base.len());
            let analytic = grads.get(var.as_tensor()).map(|g| flat(g)[index]).unwrap_or(0.0);
            let shape = var.as_tensor().dims().to_vec();
            let eval = |delta: f64| {
                let mut v = base.clone();
                v[index] += delta;
                var.set(&Tensor::from_vec(v, shape.clone(), &Device::Cpu).unwrap()).unwrap();
                let l = loss_of().to_scalar::<f64>().unwrap();
                l
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            var.set(&Tensor::from_vec(base, shape.clone(), &Device::Cpu).unwrap()).unwrap();
            samples.push(GradSample { name: name.clone(), index, analytic, numeric });
        }
    }
    samples
}

/// Every parameter's values, keyed by name.
pub fn snapshot(store: &ParamStore) -> BTreeMap<String, Vec<f64>> {
    store.snapshot().unwrap()
}

/// Names of parameters whose values differ between two snapshots.
pub fn changed(a: &BTreeMap<String, Vec<f64>>, b: &BTreeMap<String, Vec<f64>>) -> Vec<String> {
    a.iter().filter(|(n, v)| b.get(*n) != Some(v)).map(|(n, _)| n.clone()).collect()
}

/// Observed and expected counts of each case over `draws` uniform draws,
/// with the binomial standard deviation.
pub fn case_frequencies(
    cfg: &animlab::training::JointTrainingConfig,
    stage: u8,
    draws: usize,
    seed: u64,
) -> Vec<(animlab::training::TrainingCase, usize, f64, f64)> {
    use animlab::training::{select_training_case, TrainingCase};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut counts = BTreeMap::new();
    for _ in 0..draws {
        *counts.entry(select_training_case(rng.random::<f64>(), cfg, stage).unwrap()).or_insert(0usize) += 1;
    }
    let probs = match stage {
        1 => vec![(TrainingCase::ImageRecon, cfg.tau0), (TrainingCase::ImagePose, 1.0 - cfg.tau0)],
        _ => vec![
            (TrainingCase::ImageRecon, cfg.tau1),
            (TrainingCase::ImagePose, cfg.tau2 - cfg.tau1),
            (TrainingCase::Video, 1.0 - cfg.tau2),
        ],
    };
    probs
        .into_iter()
        .map(|(case, p)| {
            let n = draws as f64;
            (case, counts.get(&case).copied().unwrap_or(0), n * p, (n * p * (1.0 - p)).sqrt())
        })
        .collect()
}
