//! Plain-text run configuration.
//!
//! A config file holds one `section.key = value` assignment per line. Blank
//! lines and lines starting with `#` are ignored. Every key has a default, so
//! an empty file is a complete configuration; overrides use the same
//! `section.key=value` form and are applied after the file.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::backbone::BackboneConfig;
use crate::diffusion::{make_noise_schedule, NoiseSchedule, SamplerMode, SamplerSettings};
use crate::error::{config_err, Result};
use crate::fusion::{plan_segments, FusionConfig, NoiseMode, SegmentPlan, StartMode};
use crate::model::ModelConfig;
use crate::synthdata::CorpusConfig;
use crate::training::JointTrainingConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    Int,
    Float,
    Bool,
    /// Comma-separated non-negative integers.
    IntList,
    Choice(&'static [&'static str]),
}

struct KeySpec {
    key: &'static str,
    kind: Kind,
    default: &'static str,
    doc: &'static str,
}

const fn spec(key: &'static str, kind: Kind, default: &'static str, doc: &'static str) -> KeySpec {
    KeySpec { key, kind, default, doc }
}

const SAMPLERS: &[&str] = &["ddim", "ddpm"];
const NOISE_MODES: &[&str] = &["shared", "partitioned"];
const START_MODES: &[&str] = &["reference", "noise"];
const SPLITS: &[&str] = &["train", "heldout"];

const SCHEMA: &[KeySpec] = &[
    spec("model.image_size", Kind::Int, "32", "square frame size in pixels"),
    spec("model.base_channels", Kind::Int, "32", "channel width of the first level"),
    spec("model.channel_multipliers", Kind::IntList, "1,2", "per-level width multipliers"),
    spec("model.res_blocks", Kind::Int, "1", "residual blocks per level"),
    spec("model.attention_resolutions", Kind::IntList, "16", "feature sizes that carry attention"),
    spec("model.temporal_pe_max_len", Kind::Int, "32", "longest clip the temporal encoding covers"),
    spec("model.norm_groups", Kind::Int, "8", "group-norm groups"),
    spec("model.reference_clean", Kind::Bool, "false", "encode the clean reference instead of the noised one"),
    spec("diffusion.timesteps", Kind::Int, "100", "length T of the noise schedule"),
    spec("diffusion.beta_start", Kind::Float, "0.0001", "first beta of the linear schedule"),
    spec("diffusion.beta_end", Kind::Float, "0.02", "last beta of the linear schedule"),
    spec("training.tau0", Kind::Float, "0.3", "stage-1 reconstruction threshold"),
    spec("training.tau1", Kind::Float, "0.1", "stage-2 reconstruction threshold"),
    spec("training.tau2", Kind::Float, "0.3", "stage-2 pose-image threshold"),
    spec("training.k", Kind::Int, "8", "frames per training clip"),
    spec("training.stage1_steps", Kind::Int, "200", "optimizer steps in stage 1"),
    spec("training.stage2_steps", Kind::Int, "300", "optimizer steps in stage 2"),
    spec("training.stage1_batch", Kind::Int, "4", "frames per stage-1 batch"),
    spec("training.stage2_batch", Kind::Int, "1", "samples per stage-2 batch"),
    spec("training.lr", Kind::Float, "0.001", "AdamW learning rate"),
    spec("training.seed", Kind::Int, "7", "training seed"),
    spec("training.train_base_in_stage1", Kind::Bool, "true", "also fit the denoiser's spatial weights in stage 1"),
    spec("fusion.k", Kind::Int, "8", "window length K"),
    spec("fusion.s", Kind::Int, "4", "overlap s between consecutive windows"),
    spec("fusion.noise_mode", Kind::Choice(NOISE_MODES), "shared", "initial-noise assignment"),
    spec("fusion.start", Kind::Choice(START_MODES), "reference", "first latent: the reference noised to the first timestep, or pure noise"),
    spec("fusion.seed", Kind::Int, "0", "sampling seed"),
    spec("fusion.discard_pad", Kind::Bool, "false", "leave pad slots out of the average"),
    spec("fusion.sampler", Kind::Choice(SAMPLERS), "ddim", "reverse process"),
    spec("fusion.sampler_steps", Kind::Int, "25", "denoising steps"),
    spec("fusion.clip_x0", Kind::Bool, "true", "clamp predicted clean frames to [-1, 1]"),
    spec("data.train_identities", Kind::Int, "8", "identities in the training split"),
    spec("data.train_motions", Kind::Int, "4", "motions per training identity"),
    spec("data.heldout_identities", Kind::Int, "2", "identities in the held-out split"),
    spec("data.heldout_motions", Kind::Int, "2", "motions per held-out identity"),
    spec("data.stills", Kind::Int, "16", "single-frame images for joint training"),
    spec("data.frames", Kind::Int, "16", "frames per clip"),
    spec("data.seed", Kind::Int, "0", "corpus seed"),
    spec("eval.split", Kind::Choice(SPLITS), "heldout", "split that animate renders"),
    spec("eval.max_clips", Kind::Int, "0", "cap on rendered clips (0 renders all)"),
];

fn key_spec(key: &str) -> Option<&'static KeySpec> {
    SCHEMA.iter().find(|s| s.key == key)
}

/// Parses `value` as `kind` and returns its canonical spelling.
fn canonical(key: &str, kind: Kind, value: &str) -> Result<String> {
    let v = value.trim();
    let mismatch = |what: &str| config_err!("{key}: expected {what}, got `{v}`");
    match kind {
        Kind::Int => v.parse::<u64>().map(|n| n.to_string()).map_err(|_| mismatch("a non-negative integer")),
        Kind::Float => match v.parse::<f64>() {
            Ok(x) if x.is_finite() => Ok(format!("{x:?}")),
            _ => Err(mismatch("a finite number")),
        },
        Kind::Bool => match v {
            "true" => Ok("true".into()),
            "false" => Ok("false".into()),
            _ => Err(mismatch("true or false")),
        },
        Kind::IntList => {
            let items = v
                .split(',')
                .map(|s| s.trim().parse::<u64>().map_err(|_| mismatch("a comma-separated integer list")))
                .collect::<Result<Vec<_>>>()?;
            Ok(items.iter().map(u64::to_string).collect::<Vec<_>>().join(","))
        }
        Kind::Choice(options) => {
            if options.contains(&v) {
                Ok(v.to_string())
            } else {
                Err(mismatch(&format!("one of {}", options.join(", "))))
            }
        }
    }
}

/// Splits `section.key = value`.
fn split_assignment(line: &str) -> Result<(String, String)> {
    let (k, v) = line.split_once('=').ok_or_else(|| config_err!("expected `section.key = value`, got `{line}`"))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

/// The merged configuration of one run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
    hash: String,
}

impl RunConfig {
    /// Every key at its default.
    pub fn defaults() -> Self {
        Self::from_assignments(std::iter::empty()).expect("defaults are valid")
    }

    /// Reads `path` (if given) and applies `overrides` on top.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| config_err!("cannot read {}: {e}", p.display()))?,
            None => String::new(),
        };
        Self::parse(&text, overrides)
    }

    pub fn parse(text: &str, overrides: &[String]) -> Result<Self> {
        let mut assignments = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = split_assignment(line).map_err(|e| config_err!("line {}: {e}", n + 1))?;
            assignments.push((k, v));
        }
        for o in overrides {
            assignments.push(split_assignment(o)?);
        }
        Self::from_assignments(assignments.into_iter())
    }

    fn from_assignments(assignments: impl Iterator<Item = (String, String)>) -> Result<Self> {
        let mut values: BTreeMap<String, String> =
            SCHEMA.iter().map(|s| (s.key.to_string(), s.default.to_string())).collect();
        for (k, v) in assignments {
            let spec = key_spec(&k).ok_or_else(|| config_err!("unknown key `{k}`"))?;
            values.insert(k, canonical(spec.key, spec.kind, &v)?);
        }
        let hash = digest(values.iter());
        let cfg = Self { values, hash };
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<()> {
        let (k, s) = (self.int("fusion.k"), self.int("fusion.s"));
        if s >= k {
            return Err(config_err!("fusion.s: s must be < K (s = {s}, K = {k})"));
        }
        if k == 0 || self.int("training.k") == 0 {
            return Err(config_err!("clip lengths must be positive"));
        }
        if self.int("data.frames") < k {
            return Err(config_err!("data.frames must be at least fusion.k"));
        }
        if self.int("fusion.sampler_steps") == 0 || self.int("fusion.sampler_steps") > self.int("diffusion.timesteps") {
            return Err(config_err!("fusion.sampler_steps must be in [1, diffusion.timesteps]"));
        }
        self.training().validate().map_err(|e| config_err!("training: {e}"))?;
        self.schedule().map_err(|e| config_err!("diffusion: {e}"))?;
        Ok(())
    }

    /// SHA-256 over the canonical merged key/value map.
    pub fn hash(&self) -> &str {
        &self.hash
    }

    /// Hash over the keys that determine parameter shapes and the noise
    /// schedule; checkpoints record this one.
    pub fn model_hash(&self) -> String {
        digest(self.values.iter().filter(|(k, _)| k.starts_with("model.") || k.starts_with("diffusion.")))
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    fn raw(&self, key: &str) -> &str {
        self.values.get(key).unwrap_or_else(|| panic!("schema key {key} missing"))
    }

    fn int(&self, key: &str) -> u64 {
        self.raw(key).parse().expect("validated integer")
    }

    fn usize(&self, key: &str) -> usize {
        self.int(key) as usize
    }

    fn float(&self, key: &str) -> f64 {
        self.raw(key).parse().expect("validated float")
    }

    fn flag(&self, key: &str) -> bool {
        self.raw(key) == "true"
    }

    fn list(&self, key: &str) -> Vec<usize> {
        self.raw(key).split(',').map(|s| s.parse().expect("validated list")).collect()
    }

    pub fn model(&self) -> ModelConfig {
        let size = self.usize("model.image_size");
        ModelConfig {
            backbone: BackboneConfig {
                in_channels: 3,
                image_size: size,
                base_channels: self.usize("model.base_channels"),
                channel_multipliers: self.list("model.channel_multipliers"),
                num_res_blocks_per_level: self.usize("model.res_blocks"),
                attention_resolutions: self.list("model.attention_resolutions"),
                temporal_pe_max_len: self.usize("model.temporal_pe_max_len"),
                norm_groups: self.usize("model.norm_groups"),
            },
            reference_clean: self.flag("model.reference_clean"),
        }
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        make_noise_schedule(self.usize("diffusion.timesteps"), self.float("diffusion.beta_start"), self.float("diffusion.beta_end"))
    }

    pub fn training(&self) -> JointTrainingConfig {
        JointTrainingConfig {
            tau0: self.float("training.tau0"),
            tau1: self.float("training.tau1"),
            tau2: self.float("training.tau2"),
            k: self.usize("training.k"),
            stage1_steps: self.usize("training.stage1_steps"),
            stage2_steps: self.usize("training.stage2_steps"),
            stage1_batch: self.usize("training.stage1_batch"),
            stage2_batch: self.usize("training.stage2_batch"),
            lr: self.float("training.lr"),
            seed: self.int("training.seed"),
            train_base_in_stage1: self.flag("training.train_base_in_stage1"),
        }
    }

    pub fn fusion(&self) -> FusionConfig {
        FusionConfig {
            noise_mode: self.raw("fusion.noise_mode").parse::<NoiseMode>().expect("validated choice"),
            start: self.raw("fusion.start").parse::<StartMode>().expect("validated choice"),
            sampler: SamplerSettings {
                mode: self.raw("fusion.sampler").parse::<SamplerMode>().expect("validated choice"),
                steps: self.usize("fusion.sampler_steps"),
                clip_x0: self.flag("fusion.clip_x0"),
            },
            seed: self.int("fusion.seed"),
            discard_pad: self.flag("fusion.discard_pad"),
        }
    }

    /// The segment plan for an `n`-frame sequence.
    pub fn plan(&self, n: usize) -> Result<SegmentPlan> {
        plan_segments(n, self.usize("fusion.k"), self.usize("fusion.s"))
    }

    pub fn corpus(&self) -> CorpusConfig {
        let size = self.usize("model.image_size");
        CorpusConfig {
            train_identities: self.usize("data.train_identities"),
            train_motions: self.usize("data.train_motions"),
            heldout_identities: self.usize("data.heldout_identities"),
            heldout_motions: self.usize("data.heldout_motions"),
            stills: self.usize("data.stills"),
            frames: self.usize("data.frames"),
            height: size,
            width: size,
            seed: self.int("data.seed"),
        }
    }

    pub fn eval_split(&self) -> &str {
        self.raw("eval.split")
    }

    /// `None` means every clip.
    pub fn eval_max_clips(&self) -> Option<usize> {
        Some(self.usize("eval.max_clips")).filter(|&n| n > 0)
    }

    /// Documented listing of every key with its default, in config syntax.
    pub fn reference_listing() -> String {
        SCHEMA.iter().map(|s| format!("# {}\n{} = {}\n", s.doc, s.key, s.default)).collect()
    }
}

/// Renders the resolved configuration; parsing it back yields the same hash.
impl fmt::Display for RunConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, v) in &self.values {
            writeln!(f, "{k} = {v}")?;
        }
        Ok(())
    }
}

fn digest<'a>(entries: impl Iterator<Item = (&'a String, &'a String)>) -> String {
    let mut h = Sha256::new();
    for (k, v) in entries {
        h.update(k.as_bytes());
        h.update(b"=");
        h.update(v.as_bytes());
        h.update(b"\n");
    }
    hex::encode(h.finalize())
}
