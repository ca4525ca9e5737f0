mod common;

use animlab::appearance::ReferenceImage;
use animlab::diffusion::{reverse_step_to, NoiseSchedule, SamplerSettings};
use animlab::fusion::{
    animate_independent, animate_long, assign_initial_noise, fuse_predictions, plan_segments, reference_seed,
    start_latent, FusionConfig, NoiseMode, StartMode,
};
use animlab::model::{predict_noise, AnimateModel, LatentSegment};
use animlab::params::TrainMask;
use candle_core::{DType, Device, Tensor};
use common::*;

fn setup() -> (AnimateModel, ReferenceImage, Vec<animlab::pose_control::PoseMap>) {
    let cfg = tiny_model_config();
    let store = randomized_store(&cfg, DType::F32, 21);
    let model = AnimateModel::new(&store, &cfg, &NoiseSchedule::default(), &TrainMask::Frozen).unwrap();
    let clip = &tiny_clips(1, 10)[0];
    let reference = ReferenceImage::new(clip.frame_tensor(0, DType::F32, &Device::Cpu).unwrap()).unwrap();
    (model, reference, clip.poses.clone())
}

fn fusion_cfg(mode: NoiseMode, seed: u64) -> FusionConfig {
    FusionConfig { noise_mode: mode, sampler: SamplerSettings { steps: 4, ..Default::default() }, seed, ..Default::default() }
}

#[test]
fn plans_and_fusion_match_brute_force() {
    let checked = coverage_and_fusion_oracle().unwrap();
    assert!(checked > 1000);
}

#[test]
fn window_order_does_not_matter() {
    let plan = plan_segments(13, 4, 2).unwrap();
    let mut rng = rand::SeedableRng::seed_from_u64(3);
    let preds: Vec<Tensor> = (0..plan.windows()).map(|_| rand_tensor(&mut rng, &[1, 2, 4, 1, 2], 1.0)).collect();
    let base = flat(&fuse_predictions(&preds, &plan).unwrap());
    let mut permuted = plan.clone();
    let order: Vec<usize> = (0..plan.windows()).rev().collect();
    permuted.starts = order.iter().map(|&w| plan.starts[w]).collect();
    let reordered: Vec<Tensor> = order.iter().map(|&w| preds[w].clone()).collect();
    assert_eq!(flat(&fuse_predictions(&reordered, &permuted).unwrap()), base);
}

#[test]
fn single_window_matches_plain_denoising() {
    let (model, reference, poses) = setup();
    let poses = &poses[..8];
    for (mode, start) in [(NoiseMode::Shared, StartMode::Reference), (NoiseMode::Partitioned, StartMode::Noise)] {
        let cfg = FusionConfig { start, ..fusion_cfg(mode, 5) };
        let plan = plan_segments(8, 8, 3).unwrap();
        let video = animate_long(&model, &reference, poses, &plan, &cfg).unwrap();

        let sched = &model.schedule;
        let mut z = start_latent(&plan, &cfg, &reference, &model.schedule).unwrap();
        let steps = cfg.sampler.timesteps(sched).unwrap();
        for (i, &t) in steps.iter().enumerate() {
            let eps = predict_noise(&model, &LatentSegment::new(z.clone(), t).unwrap(), &reference, poses, reference_seed(&cfg)).unwrap();
            z = reverse_step_to(sched, &z, &eps, t, steps.get(i + 1).copied(), cfg.sampler.mode, None, cfg.sampler.clip_x0).unwrap();
        }
        assert_eq!(flat(&video), flat(&z.clamp(-1.0, 1.0).unwrap()), "{mode} {start}");
    }
}

#[test]
fn overlapping_windows_match_a_hand_written_loop() {
    let (model, reference, poses) = setup();
    let plan = plan_segments(10, 8, 4).unwrap();
    assert_eq!(plan.pad_len, 2);
    for mode in [NoiseMode::Shared, NoiseMode::Partitioned] {
        let cfg = fusion_cfg(mode, 6);
        let video = animate_long(&model, &reference, &poses, &plan, &cfg).unwrap();

        let sched = &model.schedule;
        let mut z = start_latent(&plan, &cfg, &reference, sched).unwrap();
        let steps = cfg.sampler.timesteps(sched).unwrap();
        for (i, &t) in steps.iter().enumerate() {
            let preds: Vec<Tensor> = (0..plan.windows())
                .map(|w| {
                    let frames = plan.window_frames(w);
                    let slice = Tensor::cat(&frames.iter().map(|&f| z.narrow(2, f, 1).unwrap()).collect::<Vec<_>>(), 2).unwrap();
                    let p: Vec<_> = frames.iter().map(|&f| poses[f].clone()).collect();
                    predict_noise(&model, &LatentSegment::new(slice, t).unwrap(), &reference, &p, reference_seed(&cfg)).unwrap()
                })
                .collect();
            let eps = fuse_predictions(&preds, &plan).unwrap();
            z = reverse_step_to(sched, &z, &eps, t, steps.get(i + 1).copied(), cfg.sampler.mode, None, cfg.sampler.clip_x0).unwrap();
        }
        let err = rel_err(&flat(&video), &flat(&z.clamp(-1.0, 1.0).unwrap()));
        assert!(err <= 1e-5, "{mode}: relative error {err:e}");
    }
}

#[test]
fn start_latent_follows_the_windows_and_start_mode() {
    let (model, reference, _) = setup();
    // two windows, no padding
    let plan = plan_segments(12, 8, 4).unwrap();
    let sched = &model.schedule;
    for mode in [NoiseMode::Shared, NoiseMode::Partitioned] {
        let cfg = fusion_cfg(mode, 8);
        let eps = assign_initial_noise(&plan, &cfg, (3, 16, 16), DType::F32, &Device::Cpu).unwrap();
        let noise = start_latent(&plan, &FusionConfig { start: StartMode::Noise, ..cfg.clone() }, &reference, sched).unwrap();
        for (w, e) in eps.iter().enumerate() {
            let slice = noise.narrow(2, plan.starts[w], 8).unwrap();
            assert_eq!(flat(&slice), flat(e), "{mode} window {w}");
        }
        let placed = start_latent(&plan, &FusionConfig { start: StartMode::Reference, ..cfg.clone() }, &reference, sched).unwrap();
        // first DDIM-4 timestep over T=100 is 75
        let ab = sched.alpha_bars[75];
        let pixels = flat(reference.tensor());
        let per_frame = 16 * 16;
        for (i, (zv, ev)) in flat(&placed).iter().zip(flat(&noise)).enumerate() {
            let (c, rest) = (i / (12 * per_frame), i % per_frame);
            let want = ab.sqrt() * pixels[c * per_frame + rest] + (1.0 - ab).sqrt() * ev;
            assert!((zv - want).abs() <= 1e-6, "{mode}: element {i}");
        }
    }
}

#[test]
fn animation_is_deterministic_and_seeded() {
    let (model, reference, poses) = setup();
    let plan = plan_segments(10, 8, 4).unwrap();
    let run = |seed, mode| flat(&animate_long(&model, &reference, &poses, &plan, &fusion_cfg(mode, seed)).unwrap());
    let a = run(1, NoiseMode::Shared);
    assert_eq!(a, run(1, NoiseMode::Shared));
    assert_ne!(a, run(2, NoiseMode::Shared));
    assert_ne!(a, run(1, NoiseMode::Partitioned));
    let pure = animate_long(&model, &reference, &poses, &plan, &FusionConfig { start: StartMode::Noise, ..fusion_cfg(NoiseMode::Shared, 1) }).unwrap();
    assert_ne!(a, flat(&pure));
    assert!(a.iter().all(|v| (-1.0..=1.0).contains(v)));
    let independent = animate_independent(&model, &reference, &poses, 8, &fusion_cfg(NoiseMode::Shared, 1)).unwrap();
    assert_eq!(independent.dims(), &[1, 3, 10, 16, 16]);
}

#[test]
fn animation_rejects_mismatched_poses() {
    let (model, reference, poses) = setup();
    let plan = plan_segments(16, 8, 4).unwrap();
    assert!(animate_long(&model, &reference, &poses, &plan, &fusion_cfg(NoiseMode::Shared, 0)).is_err());
}
