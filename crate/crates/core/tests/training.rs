mod common;

use animlab::checkpoint::{load_checkpoint, save_checkpoint, CheckpointManifest};
use animlab::diffusion::NoiseSchedule;
use animlab::model::AnimateModel;
use animlab::params::{ParamGroup, ParamStore, TrainMask};
use animlab::training::{
    smoothed_tail, train_stage1, train_stage2, video_loss_probe, JointTrainingConfig, TrainingCase, TrainingData,
};
use candle_core::{DType, Device};
use common::*;

fn tiny_training(stage1_steps: usize, stage2_steps: usize) -> JointTrainingConfig {
    JointTrainingConfig { k: 4, stage1_steps, stage2_steps, stage1_batch: 2, ..Default::default() }
}

fn fresh_store(seed: u64) -> ParamStore {
    let store = ParamStore::new(seed, DType::F32, &Device::Cpu);
    AnimateModel::new(&store, &tiny_model_config(), &NoiseSchedule::default(), &TrainMask::All).unwrap();
    store.seal();
    store
}

fn data() -> TrainingData {
    TrainingData { videos: tiny_clips(2, 6), stills: tiny_clips(1, 1) }
}

#[test]
fn case_frequencies_within_four_sigma() {
    let cfg = JointTrainingConfig::default();
    for (stage, seed) in [(1, 11), (2, 12)] {
        for (case, observed, expected, sigma) in case_frequencies(&cfg, stage, 10_000, seed) {
            assert!((observed as f64 - expected).abs() <= 4.0 * sigma, "stage {stage} {case}: {observed} vs {expected:.0} ± {sigma:.1}");
        }
    }
    let recon = case_frequencies(&cfg, 1, 10_000, 13)[0].1 as f64 / 10_000.0;
    assert!((recon - 0.3).abs() <= 0.02);
}

#[test]
fn stage_one_touches_only_its_modules() {
    for include_base in [true, false] {
        let store = fresh_store(1);
        let before = snapshot(&store);
        let cfg = JointTrainingConfig { train_base_in_stage1: include_base, ..tiny_training(3, 0) };
        let records = train_stage1(&store, &tiny_model_config(), &NoiseSchedule::default(), &data(), &cfg, None).unwrap();
        assert_eq!(records.len(), 3);
        assert!(records.iter().all(|r| r.case != TrainingCase::Video));
        let moved = changed(&before, &snapshot(&store));
        assert!(!moved.is_empty());
        for name in &moved {
            let group = ParamGroup::of(name);
            let allowed = matches!(group, Some(ParamGroup::Appearance | ParamGroup::Pose))
                || (include_base && group == Some(ParamGroup::BackboneSpatial));
            assert!(allowed, "{name} changed in stage 1 (include_base = {include_base})");
        }
        assert!(moved.iter().any(|n| ParamGroup::of(n) == Some(ParamGroup::Appearance)));
    }
}

#[test]
fn stage_two_touches_only_temporal_layers() {
    let store = fresh_store(2);
    let sched = NoiseSchedule::default();
    let cfg = JointTrainingConfig { tau1: 0.0, tau2: 0.0, ..tiny_training(2, 3) };
    train_stage1(&store, &tiny_model_config(), &sched, &data(), &cfg, None).unwrap();
    let before = snapshot(&store);
    let records = train_stage2(&store, &tiny_model_config(), &sched, &data(), &cfg, None).unwrap();
    assert!(records.iter().all(|r| r.case == TrainingCase::Video));
    let moved = changed(&before, &snapshot(&store));
    assert!(!moved.is_empty());
    for name in &moved {
        assert_eq!(ParamGroup::of(name), Some(ParamGroup::Temporal), "{name} changed in stage 2");
    }
}

#[test]
fn training_is_reproducible() {
    let run = || {
        let store = fresh_store(3);
        let cfg = tiny_training(2, 2);
        let sched = NoiseSchedule::default();
        let a = train_stage1(&store, &tiny_model_config(), &sched, &data(), &cfg, None).unwrap();
        let b = train_stage2(&store, &tiny_model_config(), &sched, &data(), &cfg, None).unwrap();
        (snapshot(&store), a, b)
    };
    assert_eq!(run(), run());
}

#[test]
fn zero_step_checkpoint_equals_initialisation() {
    let dir = tempfile::tempdir().unwrap();
    let store = fresh_store(4);
    let init = snapshot(&store);
    let cfg = tiny_training(0, 0);
    assert!(train_stage1(&store, &tiny_model_config(), &NoiseSchedule::default(), &data(), &cfg, None).unwrap().is_empty());
    save_checkpoint(dir.path(), &store, &CheckpointManifest::new("h", 1, 0, 4)).unwrap();
    let (loaded, manifest) = load_checkpoint(dir.path(), Some("h"), false, &Device::Cpu).unwrap();
    assert_eq!(snapshot(&loaded), init);
    assert_eq!((manifest.stage, manifest.step_count), (1, 0));
}

#[test]
fn empty_dataset_is_a_configuration_error() {
    let store = fresh_store(5);
    let err = train_stage1(&store, &tiny_model_config(), &NoiseSchedule::default(), &TrainingData::default(), &tiny_training(1, 0), None).unwrap_err();
    assert!(matches!(err, animlab::Error::Config(_)), "{err}");
}

#[test]
fn short_clips_cannot_feed_video_batches() {
    let store = fresh_store(6);
    let cfg = JointTrainingConfig { tau1: 0.0, tau2: 0.0, k: 8, ..tiny_training(0, 1) };
    let err = train_stage2(&store, &tiny_model_config(), &NoiseSchedule::default(), &data(), &cfg, None).unwrap_err();
    assert!(matches!(err, animlab::Error::Config(_)), "{err}");
}

fn toy_set() -> TrainingData {
    TrainingData { videos: tiny_clips(4, 8), stills: vec![] }
}

#[test]
fn stage_one_halves_the_loss_on_the_toy_set() {
    let store = fresh_store(7);
    let cfg = JointTrainingConfig { k: 4, ..Default::default() };
    let records = train_stage1(&store, &tiny_model_config(), &NoiseSchedule::default(), &toy_set(), &cfg, None).unwrap();
    assert_eq!(records.len(), 200);
    let (first, tail) = (records[0].loss, smoothed_tail(&records, 20));
    assert!(tail < 0.5 * first, "smoothed loss {tail:.4} vs first {first:.4}");
}

#[test]
fn stage_two_halves_the_video_loss_on_the_toy_set() {
    let (model_cfg, sched, data) = (tiny_model_config(), NoiseSchedule::default(), toy_set());
    let store = fresh_store(7);
    let cfg = JointTrainingConfig { k: 4, ..Default::default() };
    train_stage1(&store, &model_cfg, &sched, &data, &cfg, None).unwrap();
    let before = video_loss_probe(&store, &model_cfg, &sched, &data, cfg.k, 16, 3).unwrap();
    train_stage2(&store, &model_cfg, &sched, &data, &cfg, None).unwrap();
    let after = video_loss_probe(&store, &model_cfg, &sched, &data, cfg.k, 16, 3).unwrap();
    assert!(after < 0.5 * before, "video loss {after:.4} vs {before:.4} before stage 2");
}
