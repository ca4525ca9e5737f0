//! Command-line surface: config loading, command dispatch and run directories.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device};
use clap::{Parser, Subcommand};

use crate::appearance::ReferenceImage;
use crate::checkpoint::{incompatible_tensors, load_checkpoint, save_checkpoint, CheckpointManifest};
use crate::config::RunConfig;
use crate::error::{config_err, Error, Result};
use crate::evalmetrics::{evaluate_clip, MetricReport};
use crate::fusion::{animate_long, plan_segments, video_to_clip, write_video};
use crate::model::AnimateModel;
use crate::params::{ParamStore, TrainMask};
use crate::synthdata::{build_corpus, read_clip, read_split, write_corpus, VideoClip};
use crate::training::{train_stage1, train_stage2, write_loss_trace, JointTrainingConfig, TrainingData};

/// Environment variable that replaces the default `runs` output root.
pub const RUN_DIR_ENV: &str = "ANIMLAB_RUN_DIR";

#[derive(Debug, Parser)]
#[command(name = "animlab", version, about = "Pose-driven animation of a reference image with a video diffusion model")]
pub struct Cli {
    /// Config file of `section.key = value` lines.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Extra `section.key=value` assignment, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,

    /// Accept a checkpoint whose config hash differs from this config's.
    #[arg(long, global = true)]
    pub allow_hash_mismatch: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render the synthetic corpus (train, heldout and stills splits).
    GenData,
    /// Train the appearance encoder and pose conditioner on single frames.
    TrainStage1 {
        #[arg(long)]
        data: PathBuf,
    },
    /// Train the temporal layers, starting from a stage-1 checkpoint.
    TrainStage2 {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Animate every clip of a split from its first frame and pose sequence.
    Animate {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
    },
    /// Print the sliding-window plan for a sequence.
    PlanSegments {
        #[arg(long = "N")]
        n: usize,
        #[arg(long = "K")]
        k: usize,
        #[arg(long = "s")]
        s: usize,
    },
    /// Score generated clips against ground truth.
    Eval {
        #[arg(long)]
        generated: PathBuf,
        #[arg(long)]
        truth: PathBuf,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::TrainStage1 { .. } => "train-stage1",
            Command::TrainStage2 { .. } => "train-stage2",
            Command::Animate { .. } => "animate",
            Command::PlanSegments { .. } => "plan-segments",
            Command::Eval { .. } => "eval",
        }
    }
}

/// Output root: `$ANIMLAB_RUN_DIR` if set, else `./runs`.
pub fn default_run_root() -> PathBuf {
    std::env::var_os(RUN_DIR_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"))
}

/// Creates `root/<timestamp>-<command>`, adding a counter on collisions.
pub fn create_run_dir(root: &Path, command: &str) -> Result<PathBuf> {
    fs::create_dir_all(root)?;
    let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S");
    for attempt in 0.. {
        let name = match attempt {
            0 => format!("{stamp}-{command}"),
            n => format!("{stamp}-{command}-{n}"),
        };
        let dir = root.join(name);
        match fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(e.into()),
        }
    }
    unreachable!("unbounded counter")
}

/// Parses `args` (program name first) and runs the command under `root`.
/// Returns the process exit status.
pub fn run(args: impl IntoIterator<Item = OsString>, root: &Path) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match dispatch(&cli, root) {
        Ok(dir) => {
            println!("run directory: {}", dir.display());
            0
        }
        Err(e) => {
            eprintln!("error: {}", e.to_string().replace('\n', " "));
            1
        }
    }
}

/// Runs one command and returns its run directory.
pub fn dispatch(cli: &Cli, root: &Path) -> Result<PathBuf> {
    let cfg = RunConfig::load(cli.config.as_deref(), &cli.overrides)?;
    // check inputs before creating anything on disk
    let checkpoint = match &cli.command {
        Command::TrainStage2 { checkpoint, .. } | Command::Animate { checkpoint, .. } => {
            let path = checkpoint.clone().ok_or_else(|| Error::CheckpointNotFound(PathBuf::from("(no --checkpoint given)")))?;
            crate::checkpoint::read_manifest(&path)?;
            path
        }
        _ => PathBuf::new(),
    };
    if let Command::PlanSegments { n, k, s } = &cli.command {
        plan_segments(*n, *k, *s)?;
    }
    let dir = create_run_dir(root, cli.command.name())?;
    fs::write(dir.join("config.txt"), cfg.to_string())?;
    fs::write(dir.join("config_hash.txt"), format!("{}\n", cfg.hash()))?;
    fs::write(dir.join("command.txt"), format!("{:?}\n", cli.command))?;
    match &cli.command {
        Command::GenData => gen_data(&cfg, &dir)?,
        Command::TrainStage1 { data } => stage1(&cfg, data, &dir)?,
        Command::TrainStage2 { data, .. } => stage2(&cfg, data, &checkpoint, cli.allow_hash_mismatch, &dir)?,
        Command::Animate { data, .. } => animate(&cfg, &checkpoint, data, cli.allow_hash_mismatch, &dir)?,
        Command::PlanSegments { n, k, s } => {
            let plan = plan_segments(*n, *k, *s)?;
            let text = format!("starts {:?}, n={}, pad {}\n", plan.starts, plan.n, plan.pad_len);
            print!("{text}");
            fs::write(dir.join("plan.txt"), text)?;
        }
        Command::Eval { generated, truth } => eval(generated, truth, &dir)?,
    }
    Ok(dir)
}

fn gen_data(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let corpus = build_corpus(&cfg.corpus())?;
    let written = write_corpus(&dir.join("data"), &corpus)?;
    log::info!("wrote {} clips to {}", written.len(), dir.join("data").display());
    Ok(())
}

fn training_data(data: &Path) -> Result<TrainingData> {
    let videos = read_split(data, "train")?;
    if videos.is_empty() {
        return Err(config_err!("{} has no training clips", data.display()));
    }
    Ok(TrainingData { videos, stills: read_split(data, "stills")? })
}

fn stage_settings(stage: u8, t: &JointTrainingConfig) -> Vec<(String, String)> {
    let steps = if stage == 1 { t.stage1_steps } else { t.stage2_steps };
    let batch = if stage == 1 { t.stage1_batch } else { t.stage2_batch };
    let mut out = vec![
        ("steps", steps.to_string()),
        ("batch", batch.to_string()),
        ("lr", format!("{:?}", t.lr)),
        ("seed", t.seed.to_string()),
        ("k", t.k.to_string()),
    ];
    if stage == 1 {
        out.push(("tau0", format!("{:?}", t.tau0)));
        out.push(("train_base", t.train_base_in_stage1.to_string()));
    } else {
        out.push(("tau1", format!("{:?}", t.tau1)));
        out.push(("tau2", format!("{:?}", t.tau2)));
    }
    out.into_iter().map(|(k, v)| (format!("stage{stage}.{k}"), v)).collect()
}

fn fresh_store(cfg: &RunConfig, seed: u64) -> Result<ParamStore> {
    let store = ParamStore::new(seed, DType::F32, &Device::Cpu);
    AnimateModel::new(&store, &cfg.model(), &cfg.schedule()?, &TrainMask::All)?;
    store.seal();
    Ok(store)
}

fn stage1(cfg: &RunConfig, data: &Path, dir: &Path) -> Result<()> {
    let data_set = training_data(data)?;
    let t = cfg.training();
    let store = fresh_store(cfg, t.seed)?;
    let records = train_stage1(&store, &cfg.model(), &cfg.schedule()?, &data_set, &t, None)?;
    write_loss_trace(&dir.join("loss.csv"), &records)?;
    let mut manifest = CheckpointManifest::new(cfg.model_hash(), 1, t.stage1_steps, t.seed);
    manifest.settings.extend(stage_settings(1, &t));
    save_checkpoint(&dir.join("checkpoint"), &store, &manifest)?;
    Ok(())
}

/// Loads a checkpoint and checks it against the shapes `cfg` declares.
fn load_compatible(cfg: &RunConfig, checkpoint: &Path, allow_mismatch: bool) -> Result<(ParamStore, CheckpointManifest)> {
    let (store, manifest) = load_checkpoint(checkpoint, Some(&cfg.model_hash()), allow_mismatch, &Device::Cpu)?;
    let bad = incompatible_tensors(&store, &fresh_store(cfg, 0)?);
    if !bad.is_empty() {
        return Err(config_err!("checkpoint {} does not fit the config: {}", checkpoint.display(), bad.join(", ")));
    }
    Ok((store, manifest))
}

fn stage2(cfg: &RunConfig, data: &Path, checkpoint: &Path, allow_mismatch: bool, dir: &Path) -> Result<()> {
    let data_set = training_data(data)?;
    let t = cfg.training();
    let (store, loaded) = load_compatible(cfg, checkpoint, allow_mismatch)?;
    if loaded.stage != 1 {
        return Err(config_err!("stage 2 starts from a stage-1 checkpoint, got stage {}", loaded.stage));
    }
    let records = train_stage2(&store, &cfg.model(), &cfg.schedule()?, &data_set, &t, None)?;
    write_loss_trace(&dir.join("loss.csv"), &records)?;
    let mut manifest = CheckpointManifest::new(cfg.model_hash(), 2, loaded.step_count + t.stage2_steps, t.seed);
    manifest.settings = loaded.settings;
    manifest.settings.extend(stage_settings(2, &t));
    save_checkpoint(&dir.join("checkpoint"), &store, &manifest)?;
    Ok(())
}

fn animate(cfg: &RunConfig, checkpoint: &Path, data: &Path, allow_mismatch: bool, dir: &Path) -> Result<()> {
    let (store, manifest) = load_compatible(cfg, checkpoint, allow_mismatch)?;
    let model = AnimateModel::new(&store, &cfg.model(), &cfg.schedule()?, &TrainMask::Frozen)?;
    let split = cfg.eval_split();
    let mut clips = read_split(data, split)?;
    if clips.is_empty() {
        return Err(config_err!("{} has no `{split}` clips", data.display()));
    }
    if let Some(max) = cfg.eval_max_clips() {
        clips.truncate(max);
    }
    let fusion = cfg.fusion();
    let checkpoint_id = format!("{}-stage{}-step{}", manifest.config_hash, manifest.stage, manifest.step_count);
    let mut listing = String::new();
    for (i, clip) in clips.iter().enumerate() {
        let plan = cfg.plan(clip.len())?;
        let reference = ReferenceImage::new(clip.frame_tensor(0, store.dtype(), store.device())?)?;
        let video = animate_long(&model, &reference, &clip.poses, &plan, &fusion)?;
        let name = format!("clip_{i:04}");
        write_video(&dir.join("videos").join(&name), &video_to_clip(&video, &clip.poses)?, &plan, &fusion, &checkpoint_id)?;
        listing.push_str(&format!("{name} = {}\n", data.join(split).join(&name).display()));
        log::info!("animated {name} ({} frames, {} windows)", clip.len(), plan.windows());
    }
    fs::write(dir.join("sources.txt"), listing)?;
    Ok(())
}

fn is_clip_dir(p: &Path) -> bool {
    p.join("manifest.txt").is_file()
}

/// A clip directory, or a directory of clip directories keyed by name.
fn read_clips(dir: &Path) -> Result<Vec<(String, VideoClip)>> {
    if is_clip_dir(dir) {
        let name = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        return Ok(vec![(name, read_clip(dir)?)]);
    }
    if !dir.is_dir() {
        return Err(config_err!("{} is not a clip directory", dir.display()));
    }
    let mut subdirs: Vec<PathBuf> = fs::read_dir(dir)?.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| is_clip_dir(p)).collect();
    subdirs.sort();
    subdirs
        .iter()
        .map(|p| Ok((p.file_name().expect("named dir").to_string_lossy().into_owned(), read_clip(p)?)))
        .collect()
}

fn eval(generated: &Path, truth: &Path, dir: &Path) -> Result<()> {
    let gen = read_clips(generated)?;
    let truth_clips = read_clips(truth)?;
    if gen.is_empty() {
        return Err(config_err!("no clips under {}", generated.display()));
    }
    let single = gen.len() == 1 && truth_clips.len() == 1;
    let metrics = gen
        .iter()
        .map(|(name, clip)| {
            let reference = if single {
                &truth_clips[0].1
            } else {
                &truth_clips
                    .iter()
                    .find(|(n, _)| n == name)
                    .ok_or_else(|| config_err!("no ground truth for `{name}` under {}", truth.display()))?
                    .1
            };
            evaluate_clip(name, clip, reference)
        })
        .collect::<Result<Vec<_>>>()?;
    let report = MetricReport::new(metrics)?;
    report.write_csv(&dir.join("report.csv"))?;
    report.print_table(&mut std::io::stdout())?;
    Ok(())
}
