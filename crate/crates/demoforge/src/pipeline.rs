//! Run orchestration: flat key=value configs, seed demonstration storage,
//! generator training with checkpoint reuse, dataset synthesis with resume
//! and integrity audits, policy training from manifests, scaling studies,
//! and conditioning ablations.
//!
//! Everything lives under one output root: `dataset/<name>/` holds each
//! demonstration (trajectory text, key anchors, scene, raw frames),
//! `generator.ckpt` the trained generator with a config-hash sidecar,
//! `manifest.json` the dataset index, and `progress.jsonl` an append-only
//! journal that lets an interrupted synthesis resume. Reruns of the same
//! config are bitwise identical: every random draw is keyed by the config
//! seed plus structural indices, never by wall clock or scheduling.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write as IoWrite;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use nalgebra::{Matrix3, Vector2, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::conditioning::{
    plan_windows, AssembleOptions, ConditionError, LanguageTable,
};
use crate::diffusion::{
    read_checkpoint, rollout_autoregressive, train_model, write_checkpoint, DenoiserNet,
    DiffusionError, NetConfig, NoiseSchedule, TrainConfig, TrainedModel, TrainingExample,
};
use crate::geom::Pose;
use crate::kinematics::urdf::{parse_robot_model, UrdfError};
use crate::kinematics::{KinematicsError, RobotModel};
use crate::render::{
    concat_views, read_frames_raw, render_robot_only, write_frames_raw, CameraRig, Frame,
    FrameSequence, RenderError, RenderOptions,
};
use crate::rng::{derive, tag};
use crate::toyworld::{
    evaluate_policy, generate_scene, measure_consistency, overhead_camera, policy_dataset,
    read_scene, render_full_scene, scripted_expert, toy_arm_model, train_policy,
    undetected_penalty, write_scene, ConsistencyMeasure, ExpertDemo, PolicyConfig, PolicyModel,
    PolicyNet, SceneSpec, ToyTask, ToyWorldError, TOY_FPS,
};
use crate::trajectory::{
    ensure_ee_cache, expand_trajectory, read_trajectory, write_trajectory, ExpandError,
    ExpansionOptions, KeyLabel, KeyState, PerturbationSpec, SpecError, TrajFormatError,
    Trajectory, TrajectoryError,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config: {0}")]
    Config(String),
    #[error("dataset: {0}")]
    Dataset(String),
    #[error("{failed} work items failed (cap {cap}); first: {first}")]
    TooManyFailures { failed: usize, cap: usize, first: String },
    #[error("decoupling audit: trajectory bytes for `{0}` changed during synthesis")]
    Decoupling(String),
    #[error(transparent)]
    World(#[from] ToyWorldError),
    #[error("expansion: {0}")]
    Expand(#[from] ExpandError),
    #[error("perturbation spec: {0}")]
    Spec(#[from] SpecError),
    #[error("trajectory: {0}")]
    Trajectory(#[from] TrajectoryError),
    #[error("trajectory file: {0}")]
    TrajFormat(#[from] TrajFormatError),
    #[error("render: {0}")]
    Render(#[from] RenderError),
    #[error("conditioning: {0}")]
    Condition(#[from] ConditionError),
    #[error("learning core: {0}")]
    Diffusion(#[from] DiffusionError),
    #[error("robot description: {0}")]
    Urdf(#[from] UrdfError),
    #[error("kinematics: {0}")]
    Kinematics(#[from] KinematicsError),
    #[error("serialization: {0}")]
    Json(#[from] serde_json::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl PipelineError {
    /// Process exit code: 1 for configuration problems, 2 for runtime
    /// failures (including aborts past the per-entry failure cap).
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 1,
            _ => 2,
        }
    }
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// Where the arm description comes from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RobotSource {
    /// The built-in planar arm.
    Builtin,
    /// A robot description file on disk.
    Path(PathBuf),
}

impl fmt::Display for RobotSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RobotSource::Builtin => f.write_str("builtin"),
            RobotSource::Path(p) => write!(f, "{}", p.display()),
        }
    }
}

/// Named camera placements the renderer knows how to build.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CameraName {
    Overhead,
}

impl fmt::Display for CameraName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CameraName::Overhead => "overhead",
        })
    }
}

impl FromStr for CameraName {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "overhead" => Ok(CameraName::Overhead),
            other => Err(format!("unknown camera `{other}`")),
        }
    }
}

/// Every key the config format accepts, in canonical (hash) order.
const KNOWN_KEYS: &[&str] = &[
    "pipeline.seed",
    "pipeline.output",
    "pipeline.failure_cap",
    "pipeline.workers",
    "robot.source",
    "seeds.dir",
    "seeds.count",
    "task.objects",
    "task.target",
    "task.instruction",
    "task.goal_radius",
    "expansion.k",
    "expansion.horizontal_bound",
    "expansion.vertical_bound",
    "expansion.yaw_bound",
    "expansion.window",
    "expansion.max_resamples",
    "expansion.v_max",
    "render.resolution",
    "render.fps",
    "render.cameras",
    "generator.window",
    "generator.overlap",
    "generator.steps",
    "generator.beta_start",
    "generator.beta_end",
    "generator.c1",
    "generator.c2",
    "generator.t_dim",
    "generator.traj_dim",
    "generator.lang_dim",
    "generator.traj_samples",
    "generator.vocab",
    "generator.epochs",
    "generator.batch",
    "generator.lr",
    "policy.c1",
    "policy.c2",
    "policy.hidden",
    "policy.epochs",
    "policy.batch",
    "policy.lr",
    "eval.episodes",
    "scaling.sizes",
    "scaling.seeds",
    "ablation.episodes",
    "ablation.seeds",
    "ablation.policy",
];

/// Keys that do not affect produced data: excluded from the config hash so
/// moving the output root or changing parallelism never invalidates resume
/// state or breaks run-to-run identity checks.
const NON_SEMANTIC_KEYS: &[&str] = &["pipeline.output", "pipeline.workers"];

/// Fully resolved run configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub seed: u64,
    pub output: PathBuf,
    /// Failed work items beyond this count abort the run.
    pub failure_cap: usize,
    /// Worker threads; 0 means the process default.
    pub workers: usize,
    pub robot: RobotSource,
    pub seeds_dir: PathBuf,
    pub seed_count: usize,
    pub objects: usize,
    pub task: ToyTask,
    /// Expansions per seed demonstration.
    pub k: usize,
    pub horizontal_bound: f64,
    pub vertical_bound: f64,
    pub yaw_bound: f64,
    pub exp_window: usize,
    pub max_resamples: usize,
    pub v_max: f64,
    pub resolution: usize,
    pub fps: f64,
    pub cameras: Vec<CameraName>,
    pub gen_window: usize,
    pub gen_overlap: usize,
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub gen_c1: usize,
    pub gen_c2: usize,
    pub t_dim: usize,
    pub traj_dim: usize,
    pub lang_dim: usize,
    pub traj_samples: usize,
    pub vocab: usize,
    pub gen_epochs: usize,
    pub gen_batch: usize,
    pub gen_lr: f64,
    pub pol_c1: usize,
    pub pol_c2: usize,
    pub pol_hidden: usize,
    pub pol_epochs: usize,
    pub pol_batch: usize,
    pub pol_lr: f64,
    pub eval_episodes: usize,
    pub scaling_sizes: Vec<usize>,
    pub scaling_seeds: usize,
    pub ablation_episodes: usize,
    pub ablation_seeds: usize,
    pub ablation_policy: bool,
}

/// Parse `[section]` / `key = value` text into flat `section.key` entries.
/// `#` starts a comment; blank lines are skipped.
pub fn parse_config_entries(text: &str) -> Result<BTreeMap<String, String>, PipelineError> {
    let mut out = BTreeMap::new();
    let mut section = String::new();
    for (ln, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
            section = name.trim().to_string();
            if section.is_empty() {
                return Err(PipelineError::Config(format!("line {}: empty section", ln + 1)));
            }
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| PipelineError::Config(format!("line {}: expected key = value", ln + 1)))?;
        let key = key.trim();
        if key.is_empty() {
            return Err(PipelineError::Config(format!("line {}: empty key", ln + 1)));
        }
        let full = if section.is_empty() { key.to_string() } else { format!("{section}.{key}") };
        out.insert(full, value.trim().to_string());
    }
    Ok(out)
}

/// Apply `--set section.key=value` style overrides on top of file entries.
pub fn apply_overrides(
    entries: &mut BTreeMap<String, String>,
    sets: &[(String, String)],
) {
    for (k, v) in sets {
        entries.insert(k.clone(), v.clone());
    }
}

/// Environment overrides, last in precedence order (file < flags < env).
/// `lookup` is injectable so tests need not mutate the process environment.
pub fn apply_env(
    entries: &mut BTreeMap<String, String>,
    lookup: impl Fn(&str) -> Option<String>,
) {
    if let Some(v) = lookup("DEMOFORGE_OUT") {
        entries.insert("pipeline.output".into(), v);
    }
    if let Some(v) = lookup("DEMOFORGE_WORKERS") {
        entries.insert("pipeline.workers".into(), v);
    }
}

fn get<'a>(m: &'a BTreeMap<String, String>, key: &str) -> Option<&'a str> {
    m.get(key).map(String::as_str)
}

fn parse_num<T: FromStr>(key: &str, raw: &str) -> Result<T, PipelineError> {
    raw.parse()
        .map_err(|_| PipelineError::Config(format!("{key}: cannot parse `{raw}`")))
}

fn num_or<T: FromStr>(
    m: &BTreeMap<String, String>,
    key: &str,
    default: T,
) -> Result<T, PipelineError> {
    match get(m, key) {
        Some(raw) => parse_num(key, raw),
        None => Ok(default),
    }
}

impl PipelineConfig {
    /// Build a config from flat entries, filling defaults for missing keys
    /// and rejecting unknown ones.
    pub fn from_entries(m: &BTreeMap<String, String>) -> Result<Self, PipelineError> {
        for key in m.keys() {
            if !KNOWN_KEYS.contains(&key.as_str()) {
                return Err(PipelineError::Config(format!("unknown key `{key}`")));
            }
        }
        let robot = match get(m, "robot.source").unwrap_or("builtin") {
            "builtin" => RobotSource::Builtin,
            path => RobotSource::Path(PathBuf::from(path)),
        };
        let cameras = get(m, "render.cameras")
            .unwrap_or("overhead")
            .split(',')
            .map(|s| CameraName::from_str(s.trim()))
            .collect::<Result<Vec<_>, _>>()
            .map_err(PipelineError::Config)?;
        let scaling_sizes = get(m, "scaling.sizes")
            .unwrap_or("0,100,300")
            .split(',')
            .map(|s| parse_num::<usize>("scaling.sizes", s.trim()))
            .collect::<Result<Vec<_>, _>>()?;
        let ablation_policy = match get(m, "ablation.policy").unwrap_or("false") {
            "true" => true,
            "false" => false,
            other => {
                return Err(PipelineError::Config(format!(
                    "ablation.policy: expected true or false, got `{other}`"
                )))
            }
        };
        let task = ToyTask {
            instruction_id: num_or(m, "task.instruction", 0u32)?,
            target_object: num_or(m, "task.target", 0usize)?,
            goal_radius: num_or(m, "task.goal_radius", 0.05f64)?,
        };
        Ok(PipelineConfig {
            seed: num_or(m, "pipeline.seed", 0)?,
            output: PathBuf::from(get(m, "pipeline.output").unwrap_or("out")),
            failure_cap: num_or(m, "pipeline.failure_cap", 5)?,
            workers: num_or(m, "pipeline.workers", 0)?,
            robot,
            seeds_dir: PathBuf::from(get(m, "seeds.dir").unwrap_or("seeds")),
            seed_count: num_or(m, "seeds.count", 12)?,
            objects: num_or(m, "task.objects", 2)?,
            task,
            k: num_or(m, "expansion.k", 3)?,
            horizontal_bound: num_or(m, "expansion.horizontal_bound", 0.10)?,
            vertical_bound: num_or(m, "expansion.vertical_bound", 0.0)?,
            yaw_bound: num_or(m, "expansion.yaw_bound", 0.0)?,
            exp_window: num_or(m, "expansion.window", 10)?,
            max_resamples: num_or(m, "expansion.max_resamples", 20)?,
            v_max: num_or(m, "expansion.v_max", 1.5)?,
            resolution: num_or(m, "render.resolution", 24)?,
            fps: num_or(m, "render.fps", TOY_FPS)?,
            cameras,
            gen_window: num_or(m, "generator.window", 8)?,
            gen_overlap: num_or(m, "generator.overlap", 2)?,
            steps: num_or(m, "generator.steps", 40)?,
            beta_start: num_or(m, "generator.beta_start", 1e-3)?,
            beta_end: num_or(m, "generator.beta_end", 0.35)?,
            gen_c1: num_or(m, "generator.c1", 12)?,
            gen_c2: num_or(m, "generator.c2", 24)?,
            t_dim: num_or(m, "generator.t_dim", 16)?,
            traj_dim: num_or(m, "generator.traj_dim", 8)?,
            lang_dim: num_or(m, "generator.lang_dim", 8)?,
            traj_samples: num_or(m, "generator.traj_samples", 16)?,
            vocab: num_or(m, "generator.vocab", 1)?,
            gen_epochs: num_or(m, "generator.epochs", 60)?,
            gen_batch: num_or(m, "generator.batch", 8)?,
            gen_lr: num_or(m, "generator.lr", 1e-3)?,
            pol_c1: num_or(m, "policy.c1", 8)?,
            pol_c2: num_or(m, "policy.c2", 16)?,
            pol_hidden: num_or(m, "policy.hidden", 64)?,
            pol_epochs: num_or(m, "policy.epochs", 30)?,
            pol_batch: num_or(m, "policy.batch", 16)?,
            pol_lr: num_or(m, "policy.lr", 2e-3)?,
            eval_episodes: num_or(m, "eval.episodes", 200)?,
            scaling_sizes,
            scaling_seeds: num_or(m, "scaling.seeds", 1)?,
            ablation_episodes: num_or(m, "ablation.episodes", 210)?,
            ablation_seeds: num_or(m, "ablation.seeds", 3)?,
            ablation_policy,
        })
    }

    /// Parse config text, then apply flag and environment overrides.
    pub fn load(
        text: &str,
        sets: &[(String, String)],
        env: impl Fn(&str) -> Option<String>,
    ) -> Result<Self, PipelineError> {
        let mut entries = parse_config_entries(text)?;
        apply_overrides(&mut entries, sets);
        apply_env(&mut entries, env);
        let cfg = Self::from_entries(&entries)?;
        cfg.validate(false)?;
        Ok(cfg)
    }

    /// Effective value for a known key, as canonical text.
    fn value_of(&self, key: &str) -> String {
        match key {
            "pipeline.seed" => self.seed.to_string(),
            "pipeline.output" => self.output.display().to_string(),
            "pipeline.failure_cap" => self.failure_cap.to_string(),
            "pipeline.workers" => self.workers.to_string(),
            "robot.source" => self.robot.to_string(),
            "seeds.dir" => self.seeds_dir.display().to_string(),
            "seeds.count" => self.seed_count.to_string(),
            "task.objects" => self.objects.to_string(),
            "task.target" => self.task.target_object.to_string(),
            "task.instruction" => self.task.instruction_id.to_string(),
            "task.goal_radius" => self.task.goal_radius.to_string(),
            "expansion.k" => self.k.to_string(),
            "expansion.horizontal_bound" => self.horizontal_bound.to_string(),
            "expansion.vertical_bound" => self.vertical_bound.to_string(),
            "expansion.yaw_bound" => self.yaw_bound.to_string(),
            "expansion.window" => self.exp_window.to_string(),
            "expansion.max_resamples" => self.max_resamples.to_string(),
            "expansion.v_max" => self.v_max.to_string(),
            "render.resolution" => self.resolution.to_string(),
            "render.fps" => self.fps.to_string(),
            "render.cameras" => {
                let names: Vec<String> = self.cameras.iter().map(|c| c.to_string()).collect();
                names.join(",")
            }
            "generator.window" => self.gen_window.to_string(),
            "generator.overlap" => self.gen_overlap.to_string(),
            "generator.steps" => self.steps.to_string(),
            "generator.beta_start" => self.beta_start.to_string(),
            "generator.beta_end" => self.beta_end.to_string(),
            "generator.c1" => self.gen_c1.to_string(),
            "generator.c2" => self.gen_c2.to_string(),
            "generator.t_dim" => self.t_dim.to_string(),
            "generator.traj_dim" => self.traj_dim.to_string(),
            "generator.lang_dim" => self.lang_dim.to_string(),
            "generator.traj_samples" => self.traj_samples.to_string(),
            "generator.vocab" => self.vocab.to_string(),
            "generator.epochs" => self.gen_epochs.to_string(),
            "generator.batch" => self.gen_batch.to_string(),
            "generator.lr" => self.gen_lr.to_string(),
            "policy.c1" => self.pol_c1.to_string(),
            "policy.c2" => self.pol_c2.to_string(),
            "policy.hidden" => self.pol_hidden.to_string(),
            "policy.epochs" => self.pol_epochs.to_string(),
            "policy.batch" => self.pol_batch.to_string(),
            "policy.lr" => self.pol_lr.to_string(),
            "eval.episodes" => self.eval_episodes.to_string(),
            "scaling.sizes" => {
                let names: Vec<String> =
                    self.scaling_sizes.iter().map(|n| n.to_string()).collect();
                names.join(",")
            }
            "scaling.seeds" => self.scaling_seeds.to_string(),
            "ablation.episodes" => self.ablation_episodes.to_string(),
            "ablation.seeds" => self.ablation_seeds.to_string(),
            "ablation.policy" => self.ablation_policy.to_string(),
            other => unreachable!("value_of called with unknown key {other}"),
        }
    }

    /// Canonical listing of every effective key=value, defaults included.
    pub fn to_canonical(&self) -> String {
        let mut out = String::new();
        for key in KNOWN_KEYS {
            out.push_str(key);
            out.push_str(" = ");
            out.push_str(&self.value_of(key));
            out.push('\n');
        }
        out
    }

    /// Hash over semantic keys only; renaming the output root or changing
    /// worker count keeps the hash stable.
    pub fn config_hash(&self) -> String {
        let mut text = String::new();
        for key in KNOWN_KEYS {
            if NON_SEMANTIC_KEYS.contains(key) {
                continue;
            }
            text.push_str(key);
            text.push('=');
            text.push_str(&self.value_of(key));
            text.push('\n');
        }
        sha_hex(text.as_bytes())
    }

    /// Check internal consistency; with `require_inputs`, also check that
    /// referenced input paths exist.
    pub fn validate(&self, require_inputs: bool) -> Result<(), PipelineError> {
        let err = |msg: String| Err(PipelineError::Config(msg));
        if self.k == 0 {
            return err("expansion.k must be at least 1".into());
        }
        if self.seed_count == 0 {
            return err("seeds.count must be at least 1".into());
        }
        if self.objects == 0 || self.objects > 5 {
            return err(format!("task.objects must be 1..=5, got {}", self.objects));
        }
        if self.task.target_object >= self.objects {
            return err(format!(
                "task.target {} is beyond task.objects {}",
                self.task.target_object, self.objects
            ));
        }
        if self.task.goal_radius <= 0.0 {
            return err("task.goal_radius must be positive".into());
        }
        if u64::from(self.task.instruction_id) >= self.vocab as u64 {
            return err(format!(
                "task.instruction {} needs generator.vocab > {}",
                self.task.instruction_id, self.task.instruction_id
            ));
        }
        if self.horizontal_bound < 0.0 || self.vertical_bound < 0.0 || self.yaw_bound < 0.0 {
            return err("perturbation bounds must be nonnegative".into());
        }
        if self.v_max <= 0.0 {
            return err("expansion.v_max must be positive".into());
        }
        if self.resolution < 8 || self.resolution % 4 != 0 {
            return err(format!(
                "render.resolution must be a multiple of 4 and at least 8, got {}",
                self.resolution
            ));
        }
        if (self.fps - TOY_FPS).abs() > 1e-9 {
            return err(format!(
                "render.fps must match the world rate {TOY_FPS}, got {}",
                self.fps
            ));
        }
        if self.cameras.is_empty() {
            return err("render.cameras must name at least one camera".into());
        }
        if self.gen_window == 0 || self.gen_overlap >= self.gen_window {
            return err(format!(
                "generator window/overlap {}/{} invalid: overlap must be below window",
                self.gen_window, self.gen_overlap
            ));
        }
        if self.steps < 2 {
            return err("generator.steps must be at least 2".into());
        }
        if !(0.0 < self.beta_start && self.beta_start < self.beta_end && self.beta_end < 1.0) {
            return err(format!(
                "generator betas must satisfy 0 < start < end < 1, got {} and {}",
                self.beta_start, self.beta_end
            ));
        }
        if self.traj_samples < 2 {
            return err("generator.traj_samples must be at least 2".into());
        }
        if self.vocab == 0 {
            return err("generator.vocab must be at least 1".into());
        }
        for (name, v) in [
            ("generator.epochs", self.gen_epochs),
            ("generator.batch", self.gen_batch),
            ("policy.epochs", self.pol_epochs),
            ("policy.batch", self.pol_batch),
            ("eval.episodes", self.eval_episodes),
            ("scaling.seeds", self.scaling_seeds),
            ("ablation.episodes", self.ablation_episodes),
            ("ablation.seeds", self.ablation_seeds),
        ] {
            if v == 0 {
                return err(format!("{name} must be positive"));
            }
        }
        for (name, v) in [("generator.lr", self.gen_lr), ("policy.lr", self.pol_lr)] {
            if v <= 0.0 {
                return err(format!("{name} must be positive"));
            }
        }
        // The generator net validates its own dimension constraints.
        self.net_config().validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        if require_inputs {
            if let RobotSource::Path(p) = &self.robot {
                if !p.is_file() {
                    return err(format!("robot description `{}` does not exist", p.display()));
                }
            }
            if !self.seeds_dir.is_dir() {
                return err(format!(
                    "seed demonstration directory `{}` does not exist",
                    self.seeds_dir.display()
                ));
            }
        }
        Ok(())
    }

    /// Generator network dimensions implied by this config. Multiple
    /// cameras widen the frame: views are concatenated side by side.
    pub fn net_config(&self) -> NetConfig {
        NetConfig {
            frames: self.gen_window,
            height: self.resolution,
            width: self.resolution * self.cameras.len(),
            c1: self.gen_c1,
            c2: self.gen_c2,
            t_dim: self.t_dim,
            traj_dim: self.traj_dim,
            lang_dim: self.lang_dim,
            traj_samples: self.traj_samples,
            vocab: self.vocab,
        }
    }

    fn schedule(&self) -> Result<NoiseSchedule, PipelineError> {
        Ok(NoiseSchedule::linear(self.steps, self.beta_start, self.beta_end)?)
    }

    fn render_options(&self) -> RenderOptions {
        RenderOptions { fps: self.fps, ..RenderOptions::default() }
    }

    fn assemble_options(&self, ablate_global_traj: bool) -> AssembleOptions {
        AssembleOptions { traj_samples: self.traj_samples, ablate_global_traj }
    }
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig::from_entries(&BTreeMap::new()).expect("defaults parse")
    }
}

/// Load the arm this config points at.
pub fn load_robot(cfg: &PipelineConfig) -> Result<RobotModel, PipelineError> {
    match &cfg.robot {
        RobotSource::Builtin => Ok(toy_arm_model()?),
        RobotSource::Path(p) => Ok(parse_robot_model(&fs::read_to_string(p)?)?),
    }
}

fn camera_rig(name: CameraName, resolution: usize) -> CameraRig {
    match name {
        CameraName::Overhead => overhead_camera(resolution),
    }
}

// ---------------------------------------------------------------------------
// Hashing helpers
// ---------------------------------------------------------------------------

fn sha_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    let digest = h.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

#[cfg(test)]
fn file_sha(path: &Path) -> Result<String, PipelineError> {
    Ok(sha_hex(&fs::read(path)?))
}

// ---------------------------------------------------------------------------
// Seed demonstrations on disk
// ---------------------------------------------------------------------------

/// A stored demonstration: the scene it was recorded in plus the scripted
/// trajectory and its key anchors.
#[derive(Debug, Clone)]
pub struct SeedDemo {
    pub scene: SceneSpec,
    pub demo: ExpertDemo,
}

/// Serialize key anchors: `keys v1 <n>` then one line per key with the
/// waypoint index, label, row-major rotation, and translation. Floats use
/// the shortest round-trippable decimal form, so read-back is exact.
pub fn write_keys(path: &Path, keys: &[KeyState]) -> Result<(), PipelineError> {
    let mut text = format!("keys v1 {}\n", keys.len());
    for k in keys {
        text.push_str(&format!("{} {}", k.index, k.label));
        for row in 0..3 {
            for col in 0..3 {
                text.push_str(&format!(" {}", k.anchor.rotation[(row, col)]));
            }
        }
        let t = k.anchor.translation;
        text.push_str(&format!(" {} {} {}\n", t.x, t.y, t.z));
    }
    fs::write(path, text)?;
    Ok(())
}

pub fn read_keys(path: &Path) -> Result<Vec<KeyState>, PipelineError> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| PipelineError::Dataset("empty key file".into()))?;
    let mut parts = header.split_whitespace();
    if parts.next() != Some("keys") || parts.next() != Some("v1") {
        return Err(PipelineError::Dataset(format!("bad key header `{header}`")));
    }
    let n: usize = parts
        .next()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| PipelineError::Dataset("key header missing count".into()))?;
    let mut keys = Vec::with_capacity(n);
    for line in lines {
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        if fields.len() != 14 {
            return Err(PipelineError::Dataset(format!(
                "key line needs 14 fields, got {}",
                fields.len()
            )));
        }
        let index: usize = fields[0]
            .parse()
            .map_err(|_| PipelineError::Dataset(format!("bad key index `{}`", fields[0])))?;
        let label = KeyLabel::from_str(fields[1])
            .map_err(|_| PipelineError::Dataset(format!("bad key label `{}`", fields[1])))?;
        let mut vals = [0.0f64; 12];
        for (slot, field) in vals.iter_mut().zip(&fields[2..]) {
            *slot = field
                .parse()
                .map_err(|_| PipelineError::Dataset(format!("bad key float `{field}`")))?;
        }
        let rotation = Matrix3::new(
            vals[0], vals[1], vals[2], vals[3], vals[4], vals[5], vals[6], vals[7], vals[8],
        );
        let translation = Vector3::new(vals[9], vals[10], vals[11]);
        keys.push(KeyState { index, label, anchor: Pose::new(rotation, translation) });
    }
    if keys.len() != n {
        return Err(PipelineError::Dataset(format!(
            "key header promises {n} keys, file has {}",
            keys.len()
        )));
    }
    Ok(keys)
}

fn seed_demo_basename(i: usize) -> String {
    format!("demo_{i:03}")
}

/// Script one expert demonstration per requested seed scene.
pub fn generate_seed_set(cfg: &PipelineConfig) -> Result<Vec<SeedDemo>, PipelineError> {
    let model = load_robot(cfg)?;
    let mut out = Vec::with_capacity(cfg.seed_count);
    for i in 0..cfg.seed_count {
        let scene_seed = derive(cfg.seed, &[tag::SCENE, i as u64]);
        let scene = generate_scene(&cfg.task, cfg.objects, scene_seed)?;
        let demo = scripted_expert(&model, &scene, &cfg.task)?;
        out.push(SeedDemo { scene, demo });
    }
    Ok(out)
}

/// Persist demonstrations as `demo_%03d.{traj,keys,scene}` under `dir`.
pub fn write_seed_set(dir: &Path, demos: &[SeedDemo]) -> Result<(), PipelineError> {
    fs::create_dir_all(dir)?;
    for (i, sd) in demos.iter().enumerate() {
        let base = seed_demo_basename(i);
        fs::write(dir.join(format!("{base}.traj")), write_trajectory(&sd.demo.trajectory))?;
        write_keys(&dir.join(format!("{base}.keys")), &sd.demo.keys)?;
        write_scene(&sd.scene, &dir.join(format!("{base}.scene")))?;
    }
    Ok(())
}

/// Load `demo_%03d` triples in index order until the first gap. End
/// effector caches are rebuilt, so expansions can run immediately.
pub fn load_seed_set(dir: &Path, model: &RobotModel) -> Result<Vec<SeedDemo>, PipelineError> {
    let mut out = Vec::new();
    for i in 0.. {
        let base = seed_demo_basename(i);
        let traj_path = dir.join(format!("{base}.traj"));
        if !traj_path.is_file() {
            break;
        }
        let mut trajectory = read_trajectory(&fs::read_to_string(&traj_path)?)?;
        trajectory.validate(model)?;
        ensure_ee_cache(&mut trajectory, model);
        let keys = read_keys(&dir.join(format!("{base}.keys")))?;
        let scene = read_scene(&dir.join(format!("{base}.scene")))?;
        out.push(SeedDemo { scene, demo: ExpertDemo { trajectory, keys } });
    }
    if out.is_empty() {
        return Err(PipelineError::Config(format!(
            "no seed demonstrations under `{}`",
            dir.display()
        )));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Generator training
// ---------------------------------------------------------------------------

/// Robot-only views of one trajectory, concatenated across cameras.
pub fn render_motion_views(
    model: &RobotModel,
    traj: &Trajectory,
    cfg: &PipelineConfig,
) -> Result<FrameSequence, PipelineError> {
    let opts = cfg.render_options();
    let views = cfg
        .cameras
        .iter()
        .map(|&cam| render_robot_only(model, traj, &camera_rig(cam, cfg.resolution), &opts))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(concat_views(&views)?)
}

/// Ground-truth full-scene views of one seed demonstration.
pub fn render_full_views(
    model: &RobotModel,
    sd: &SeedDemo,
    task: &ToyTask,
    cfg: &PipelineConfig,
) -> Result<FrameSequence, PipelineError> {
    let opts = cfg.render_options();
    let views = cfg
        .cameras
        .iter()
        .map(|&cam| {
            render_full_scene(model, &sd.demo, &sd.scene, task, &camera_rig(cam, cfg.resolution), &opts)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(concat_views(&views)?)
}

/// Pad a truncated tail window to the fixed network length by repeating
/// the final frame, mirroring what the sampler does at generation time.
fn pad_window(frames: &mut Vec<Frame>, len: usize) {
    if let Some(last) = frames.last().cloned() {
        while frames.len() < len {
            frames.push(last.clone());
        }
    }
}

/// Cut every seed demonstration into overlapping training windows. The
/// ground-truth clip is the composited scene video; conditioning comes
/// from the robot-only render plus trajectory and instruction channels.
pub fn build_training_examples(
    model: &RobotModel,
    demos: &[SeedDemo],
    cfg: &PipelineConfig,
    ablate_global_traj: bool,
) -> Result<Vec<TrainingExample>, PipelineError> {
    let table = LanguageTable::seeded(cfg.vocab, cfg.lang_dim, cfg.seed);
    let opts = cfg.assemble_options(ablate_global_traj);
    let mut out = Vec::new();
    for sd in demos {
        let traj = &sd.demo.trajectory;
        let motion = render_motion_views(model, traj, cfg)?;
        let full = render_full_views(model, sd, &cfg.task, cfg)?;
        if motion.frames.len() != full.frames.len() {
            return Err(PipelineError::Dataset(
                "robot-only and full renders disagree on frame count".into(),
            ));
        }
        let windows = plan_windows(motion.frames.len(), cfg.gen_window, cfg.gen_overlap)?;
        for w in &windows {
            let prev = if w.start_frame == 0 {
                None
            } else {
                Some(FrameSequence {
                    frames: full.frames[..w.start_frame].to_vec(),
                    fps: cfg.fps,
                })
            };
            let lang = table.embed(traj.instruction_id)?;
            let mut bundle =
                crate::conditioning::assemble_condition(&motion, traj, lang, w, prev.as_ref(), &opts)?;
            let mut clip: Vec<Frame> = full.frames[w.start_frame..w.end_frame()].to_vec();
            pad_window(&mut clip, cfg.gen_window);
            pad_window(&mut bundle.motion_frames.frames, cfg.gen_window);
            out.push(TrainingExample::from_bundle(&clip, &bundle)?);
        }
    }
    Ok(out)
}

/// Train the video generator on the seed demonstrations.
pub fn train_generator(
    model: &RobotModel,
    demos: &[SeedDemo],
    cfg: &PipelineConfig,
    ablate_global_traj: bool,
    train_seed: u64,
) -> Result<TrainedModel, PipelineError> {
    let net = DenoiserNet::new(cfg.net_config())?;
    let examples = build_training_examples(model, demos, cfg, ablate_global_traj)?;
    let schedule = cfg.schedule()?;
    let tc = TrainConfig {
        epochs: cfg.gen_epochs,
        batch_size: cfg.gen_batch,
        lr: cfg.gen_lr,
        seed: train_seed,
    };
    Ok(train_model(net, &examples, &schedule, &tc)?)
}

/// Write a generator checkpoint and return the file's content hash.
pub fn save_generator(path: &Path, model: &TrainedModel) -> Result<String, PipelineError> {
    let mut bytes = Vec::new();
    write_checkpoint(&mut bytes, model)?;
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, &bytes)?;
    Ok(sha_hex(&bytes))
}

/// Load a generator checkpoint along with its content hash.
pub fn load_generator(path: &Path) -> Result<(TrainedModel, String), PipelineError> {
    let bytes = fs::read(path)?;
    let model = read_checkpoint(&mut &bytes[..])?;
    Ok((model, sha_hex(&bytes)))
}

/// Reuse `path` if its sidecar records the same config hash; otherwise
/// train from scratch and overwrite both. The sidecar guards against
/// pairing a stale checkpoint with new schedule or network settings.
fn ensure_generator_at(
    path: &Path,
    model: &RobotModel,
    demos: &[SeedDemo],
    cfg: &PipelineConfig,
    ablate_global_traj: bool,
    train_seed: u64,
) -> Result<(TrainedModel, String), PipelineError> {
    let sidecar = path.with_extension("ckpt.cfg");
    let want = format!("{} {} {}", cfg.config_hash(), ablate_global_traj, train_seed);
    if path.is_file() && sidecar.is_file() && fs::read_to_string(&sidecar)?.trim() == want {
        return load_generator(path);
    }
    let trained = train_generator(model, demos, cfg, ablate_global_traj, train_seed)?;
    let hash = save_generator(path, &trained)?;
    fs::write(&sidecar, format!("{want}\n"))?;
    Ok((trained, hash))
}

/// Default generator checkpoint location for a config.
pub fn generator_path(cfg: &PipelineConfig) -> PathBuf {
    cfg.output.join("generator.ckpt")
}

/// Train or reuse the main generator checkpoint under the output root.
pub fn ensure_generator(
    cfg: &PipelineConfig,
    model: &RobotModel,
    demos: &[SeedDemo],
) -> Result<(TrainedModel, String), PipelineError> {
    fs::create_dir_all(&cfg.output)?;
    ensure_generator_at(&generator_path(cfg), model, demos, cfg, false, cfg.seed)
}

// ---------------------------------------------------------------------------
// Dataset manifest
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Seed,
    Generated,
}

/// One dataset row. Paths are relative to the output root so manifests
/// from different roots compare bitwise equal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub provenance: Provenance,
    pub seed_id: usize,
    /// Expansion index; 0 for seed entries, 1..=K for generated ones.
    pub k: usize,
    pub instruction_id: u32,
    pub trajectory: String,
    pub frames: String,
    pub scene: String,
    pub keys: String,
    /// Perturbation seed drawn for this entry; 0 for seed entries.
    pub spec_seed: u64,
    /// Hash of the generator checkpoint that produced the frames; empty
    /// for seed entries.
    pub checkpoint_hash: String,
    /// Hash over the entry's trajectory, frames, scene, and key files.
    pub content_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub config_hash: String,
    pub checkpoint_hash: String,
    pub entries: Vec<ManifestEntry>,
}

pub fn manifest_path(root: &Path) -> PathBuf {
    root.join("manifest.json")
}

fn progress_path(root: &Path) -> PathBuf {
    root.join("progress.jsonl")
}

pub fn write_manifest(root: &Path, manifest: &DatasetManifest) -> Result<(), PipelineError> {
    let mut text = serde_json::to_string_pretty(manifest)?;
    text.push('\n');
    fs::write(manifest_path(root), text)?;
    Ok(())
}

pub fn read_manifest(root: &Path) -> Result<DatasetManifest, PipelineError> {
    let text = fs::read_to_string(manifest_path(root))?;
    Ok(serde_json::from_str(&text)?)
}

fn entry_rank(e: &ManifestEntry) -> (u8, usize, usize) {
    let p = match e.provenance {
        Provenance::Seed => 0,
        Provenance::Generated => 1,
    };
    (p, e.seed_id, e.k)
}

/// Hash the four files a manifest entry points at, in a fixed order.
fn entry_content_hash(root: &Path, e: &ManifestEntry) -> Result<String, PipelineError> {
    let mut h = Sha256::new();
    for rel in [&e.trajectory, &e.frames, &e.scene, &e.keys] {
        h.update(fs::read(root.join(rel))?);
    }
    let digest = h.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    Ok(out)
}

/// Check one entry's files: present, parseable, counts consistent, and
/// matching the recorded content hash.
fn check_entry(root: &Path, e: &ManifestEntry) -> Result<(), PipelineError> {
    let label = format!("{:?} seed {} k {}", e.provenance, e.seed_id, e.k);
    let traj = read_trajectory(&fs::read_to_string(root.join(&e.trajectory))?)?;
    let frames = read_frames_raw(&root.join(&e.frames))?;
    if frames.frames.len() != traj.waypoints.len() {
        return Err(PipelineError::Dataset(format!(
            "{label}: {} frames but {} waypoints",
            frames.frames.len(),
            traj.waypoints.len()
        )));
    }
    if traj.instruction_id != e.instruction_id {
        return Err(PipelineError::Dataset(format!(
            "{label}: trajectory carries instruction {}, manifest says {}",
            traj.instruction_id, e.instruction_id
        )));
    }
    read_scene(&root.join(&e.scene))?;
    read_keys(&root.join(&e.keys))?;
    let actual = entry_content_hash(root, e)?;
    if actual != e.content_hash {
        return Err(PipelineError::Dataset(format!("{label}: content hash mismatch")));
    }
    Ok(())
}

/// Full manifest audit: ordering, provenance consistency, and per-entry
/// file integrity.
pub fn validate_manifest(root: &Path, manifest: &DatasetManifest) -> Result<(), PipelineError> {
    for pair in manifest.entries.windows(2) {
        if entry_rank(&pair[0]) >= entry_rank(&pair[1]) {
            return Err(PipelineError::Dataset("manifest entries out of order".into()));
        }
    }
    for e in &manifest.entries {
        match e.provenance {
            Provenance::Seed => {
                if e.k != 0 || e.spec_seed != 0 || !e.checkpoint_hash.is_empty() {
                    return Err(PipelineError::Dataset(format!(
                        "seed entry {} carries generation metadata",
                        e.seed_id
                    )));
                }
            }
            Provenance::Generated => {
                if e.k == 0 {
                    return Err(PipelineError::Dataset(format!(
                        "generated entry for seed {} has k = 0",
                        e.seed_id
                    )));
                }
                if e.checkpoint_hash != manifest.checkpoint_hash {
                    return Err(PipelineError::Dataset(format!(
                        "generated entry seed {} k {} cites a different checkpoint",
                        e.seed_id, e.k
                    )));
                }
            }
        }
        check_entry(root, e)?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Synthesis
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum WorkItem {
    Seed(usize),
    Generated(usize, usize),
}

impl WorkItem {
    fn key(&self, config_hash: &str) -> String {
        let text = match self {
            WorkItem::Seed(s) => format!("{config_hash}|seed|{s}|0"),
            WorkItem::Generated(s, k) => format!("{config_hash}|generated|{s}|{k}"),
        };
        sha_hex(text.as_bytes())
    }

    fn describe(&self) -> String {
        match self {
            WorkItem::Seed(s) => format!("seed {s}"),
            WorkItem::Generated(s, k) => format!("generated seed {s} k {k}"),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ProgressRecord {
    key: String,
    entry: ManifestEntry,
}

fn load_progress(root: &Path) -> Result<BTreeMap<String, ManifestEntry>, PipelineError> {
    let path = progress_path(root);
    let mut out = BTreeMap::new();
    if !path.is_file() {
        return Ok(out);
    }
    for line in fs::read_to_string(&path)?.lines() {
        if line.trim().is_empty() {
            continue;
        }
        let record: ProgressRecord = serde_json::from_str(line)
            .map_err(|e| PipelineError::Dataset(format!("progress journal corrupt: {e}")))?;
        out.insert(record.key, record.entry);
    }
    Ok(out)
}

/// Shared read-only state for synthesis work items.
struct SynthCtx<'a> {
    cfg: &'a PipelineConfig,
    model: &'a RobotModel,
    demos: &'a [SeedDemo],
    generator: &'a TrainedModel,
    language: &'a LanguageTable,
    schedule: &'a NoiseSchedule,
    checkpoint_hash: String,
}

fn write_entry_files(
    root: &Path,
    rel_dir: &str,
    traj: &Trajectory,
    keys: &[KeyState],
    scene: &SceneSpec,
    frames: &FrameSequence,
) -> Result<(String, String, String, String), PipelineError> {
    let dir = root.join(rel_dir);
    fs::create_dir_all(&dir)?;
    let rels = (
        format!("{rel_dir}/traj.txt"),
        format!("{rel_dir}/frames.fr32"),
        format!("{rel_dir}/scene.txt"),
        format!("{rel_dir}/keys.txt"),
    );
    fs::write(dir.join("traj.txt"), write_trajectory(traj))?;
    write_frames_raw(&dir.join("frames.fr32"), frames)?;
    write_scene(scene, &dir.join("scene.txt"))?;
    write_keys(&dir.join("keys.txt"), keys)?;
    Ok(rels)
}

/// Seed entry: copy the demonstration to the dataset layout and store its
/// ground-truth full-scene render.
fn run_seed_item(ctx: &SynthCtx<'_>, s: usize) -> Result<ManifestEntry, PipelineError> {
    let sd = &ctx.demos[s];
    let frames = render_full_views(ctx.model, sd, &ctx.cfg.task, ctx.cfg)?;
    let rel_dir = format!("dataset/seed_{s:03}");
    let (trajectory, frames_rel, scene, keys) = write_entry_files(
        &ctx.cfg.output,
        &rel_dir,
        &sd.demo.trajectory,
        &sd.demo.keys,
        &sd.scene,
        &frames,
    )?;
    let mut entry = ManifestEntry {
        provenance: Provenance::Seed,
        seed_id: s,
        k: 0,
        instruction_id: sd.demo.trajectory.instruction_id,
        trajectory,
        frames: frames_rel,
        scene,
        keys,
        spec_seed: 0,
        checkpoint_hash: String::new(),
        content_hash: String::new(),
    };
    entry.content_hash = entry_content_hash(&ctx.cfg.output, &entry)?;
    Ok(entry)
}

/// The scene a generated entry depicts: the seed scene with the target
/// moved to the perturbed grasp anchor and the goal to the release anchor.
fn derived_scene(
    seed_scene: &SceneSpec,
    task: &ToyTask,
    keys: &[KeyState],
) -> Result<SceneSpec, PipelineError> {
    let anchor_xy = |label: KeyLabel| -> Result<Vector2<f64>, PipelineError> {
        keys.iter()
            .find(|k| k.label == label)
            .map(|k| Vector2::new(k.anchor.translation.x, k.anchor.translation.y))
            .ok_or_else(|| PipelineError::Dataset(format!("expansion lost its {label} key")))
    };
    let mut scene = seed_scene.clone();
    let target = scene
        .objects
        .get_mut(task.target_object)
        .ok_or_else(|| PipelineError::Dataset("target index beyond object count".into()))?;
    target.position = anchor_xy(KeyLabel::Grasp)?;
    scene.goal = anchor_xy(KeyLabel::Release)?;
    Ok(scene)
}

/// Generated entry: expand the seed demonstration, render the robot-only
/// conditioning, roll the generator, and persist the pair. The trajectory
/// file is written before generation and compared byte for byte after, so
/// any accidental coupling between generation and the action channel is
/// caught immediately.
fn run_generated_item(ctx: &SynthCtx<'_>, s: usize, k: usize) -> Result<ManifestEntry, PipelineError> {
    let cfg = ctx.cfg;
    let sd = &ctx.demos[s];
    let spec_seed = derive(cfg.seed, &[tag::EXPANSION, s as u64, k as u64]);
    let rollout_seed = derive(cfg.seed, &[tag::SAMPLING, s as u64, k as u64]);
    let spec = PerturbationSpec {
        horizontal_bound: cfg.horizontal_bound,
        vertical_bound: cfg.vertical_bound,
        yaw_bound: cfg.yaw_bound,
        rng_seed: spec_seed,
    };
    let opts = ExpansionOptions {
        window: cfg.exp_window,
        max_resamples: cfg.max_resamples,
        v_max: cfg.v_max,
    };
    let expansion =
        expand_trajectory(&sd.demo.trajectory, &sd.demo.keys, &spec, ctx.model, &opts)?;
    let scene = derived_scene(&sd.scene, &cfg.task, &expansion.keys)?;

    let rel_dir = format!("dataset/gen_{s:03}_{k:02}");
    let dir = cfg.output.join(&rel_dir);
    fs::create_dir_all(&dir)?;
    let traj_text = write_trajectory(&expansion.trajectory);
    let traj_path = dir.join("traj.txt");
    fs::write(&traj_path, &traj_text)?;

    let rendered = render_motion_views(ctx.model, &expansion.trajectory, cfg)?;
    let language = ctx.language.embed(expansion.trajectory.instruction_id)?;
    let generated = rollout_autoregressive(
        ctx.generator,
        &rendered,
        &expansion.trajectory,
        &language,
        cfg.gen_window,
        cfg.gen_overlap,
        ctx.schedule,
        &cfg.assemble_options(false),
        rollout_seed,
    )?;
    write_frames_raw(&dir.join("frames.fr32"), &generated)?;
    write_scene(&scene, &dir.join("scene.txt"))?;
    write_keys(&dir.join("keys.txt"), &expansion.keys)?;

    // Decoupling audit: generation must not have touched the actions.
    if fs::read(&traj_path)? != traj_text.into_bytes() {
        return Err(PipelineError::Decoupling(format!("{rel_dir}/traj.txt")));
    }

    let mut entry = ManifestEntry {
        provenance: Provenance::Generated,
        seed_id: s,
        k,
        instruction_id: expansion.trajectory.instruction_id,
        trajectory: format!("{rel_dir}/traj.txt"),
        frames: format!("{rel_dir}/frames.fr32"),
        scene: format!("{rel_dir}/scene.txt"),
        keys: format!("{rel_dir}/keys.txt"),
        spec_seed,
        checkpoint_hash: ctx.checkpoint_hash.clone(),
        content_hash: String::new(),
    };
    entry.content_hash = entry_content_hash(&cfg.output, &entry)?;
    Ok(entry)
}

fn run_item(ctx: &SynthCtx<'_>, item: WorkItem) -> Result<ManifestEntry, PipelineError> {
    match item {
        WorkItem::Seed(s) => run_seed_item(ctx, s),
        WorkItem::Generated(s, k) => run_generated_item(ctx, s, k),
    }
}

#[derive(Debug)]
pub struct SynthesisReport {
    pub manifest: DatasetManifest,
    /// Work items processed in this run.
    pub completed: usize,
    /// Work items satisfied by the resume journal.
    pub reused: usize,
    /// Messages for items that failed and were skipped.
    pub failures: Vec<String>,
}

/// Expand every seed demonstration K times, generate frames for each
/// expansion, and index the result. Idempotent: finished items recorded in
/// the journal are reused if their files still match; reruns with the same
/// config produce bitwise-identical manifests, frames, and checkpoints.
pub fn run_synthesis(cfg: &PipelineConfig) -> Result<SynthesisReport, PipelineError> {
    cfg.validate(true)?;
    let model = load_robot(cfg)?;
    let demos = load_seed_set(&cfg.seeds_dir, &model)?;
    fs::create_dir_all(cfg.output.join("dataset"))?;

    let (generator, checkpoint_hash) = ensure_generator(cfg, &model, &demos)?;
    let language = generator.net.export_language_table(&generator.params);
    let schedule = cfg.schedule()?;
    let config_hash = cfg.config_hash();

    let ctx = SynthCtx {
        cfg,
        model: &model,
        demos: &demos,
        generator: &generator,
        language: &language,
        schedule: &schedule,
        checkpoint_hash: checkpoint_hash.clone(),
    };

    let mut items: Vec<WorkItem> = (0..demos.len()).map(WorkItem::Seed).collect();
    for s in 0..demos.len() {
        for k in 1..=cfg.k {
            items.push(WorkItem::Generated(s, k));
        }
    }

    // Resume: reuse journal entries whose files still check out.
    let journal = load_progress(&cfg.output)?;
    let mut done: BTreeMap<String, ManifestEntry> = BTreeMap::new();
    let mut pending = Vec::new();
    for &item in &items {
        let key = item.key(&config_hash);
        match journal.get(&key) {
            Some(entry) if check_entry(&cfg.output, entry).is_ok() => {
                done.insert(key, entry.clone());
            }
            _ => pending.push(item),
        }
    }
    let reused = done.len();

    let mut journal_file = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(progress_path(&cfg.output))?;
    let mut failures: Vec<String> = Vec::new();
    let chunk = (rayon::current_num_threads() * 2).max(1);
    for batch in pending.chunks(chunk) {
        let results: Vec<(WorkItem, Result<ManifestEntry, PipelineError>)> = batch
            .par_iter()
            .map(|&item| (item, run_item(&ctx, item)))
            .collect();
        // Single serialized writer keeps the journal append-only and whole.
        for (item, result) in results {
            match result {
                Ok(entry) => {
                    let key = item.key(&config_hash);
                    let record = ProgressRecord { key: key.clone(), entry: entry.clone() };
                    writeln!(journal_file, "{}", serde_json::to_string(&record)?)?;
                    done.insert(key, entry);
                }
                Err(e) => {
                    let msg = format!("{}: {e}", item.describe());
                    eprintln!("synthesis: skipped {msg}");
                    failures.push(msg);
                    if failures.len() > cfg.failure_cap {
                        return Err(PipelineError::TooManyFailures {
                            failed: failures.len(),
                            cap: cfg.failure_cap,
                            first: failures[0].clone(),
                        });
                    }
                }
            }
        }
        journal_file.flush()?;
    }

    let entries: Vec<ManifestEntry> = items
        .iter()
        .filter_map(|item| done.get(&item.key(&config_hash)).cloned())
        .collect();
    let completed = entries.len() - reused;
    let manifest = DatasetManifest { config_hash, checkpoint_hash, entries };
    write_manifest(&cfg.output, &manifest)?;
    validate_manifest(&cfg.output, &manifest)?;
    Ok(SynthesisReport { manifest, completed, reused, failures })
}

// ---------------------------------------------------------------------------
// Policy training and evaluation
// ---------------------------------------------------------------------------

/// Load frame/trajectory pairs: every seed entry plus the first
/// `n_generated` generated entries in manifest order.
pub fn load_policy_pairs(
    root: &Path,
    manifest: &DatasetManifest,
    n_generated: usize,
) -> Result<Vec<(FrameSequence, Trajectory)>, PipelineError> {
    let generated_total =
        manifest.entries.iter().filter(|e| e.provenance == Provenance::Generated).count();
    if n_generated > generated_total {
        return Err(PipelineError::Config(format!(
            "requested {n_generated} generated demonstrations, pool has {generated_total}"
        )));
    }
    let mut pairs = Vec::new();
    let mut taken = 0usize;
    for e in &manifest.entries {
        let keep = match e.provenance {
            Provenance::Seed => true,
            Provenance::Generated => {
                if taken < n_generated {
                    taken += 1;
                    true
                } else {
                    false
                }
            }
        };
        if !keep {
            continue;
        }
        let traj = read_trajectory(&fs::read_to_string(root.join(&e.trajectory))?)?;
        let frames = read_frames_raw(&root.join(&e.frames))?;
        pairs.push((frames, traj));
    }
    Ok(pairs)
}

/// Behavior-clone a policy from frame/trajectory pairs. Frames must be
/// square single-camera views so rollouts can re-render them live.
pub fn train_policy_on_pairs(
    cfg: &PipelineConfig,
    model: &RobotModel,
    pairs: &[(FrameSequence, Trajectory)],
    train_seed: u64,
) -> Result<PolicyModel, PipelineError> {
    for (frames, _) in pairs {
        if let Some(f) = frames.frames.first() {
            if f.width != cfg.resolution || f.height != cfg.resolution {
                return Err(PipelineError::Config(format!(
                    "policies need square {res}x{res} single-view frames, got {w}x{h}",
                    res = cfg.resolution,
                    w = f.width,
                    h = f.height
                )));
            }
        }
    }
    let examples = policy_dataset(pairs)?;
    let net = PolicyNet::new(PolicyConfig {
        height: cfg.resolution,
        width: cfg.resolution,
        c1: cfg.pol_c1,
        c2: cfg.pol_c2,
        hidden: cfg.pol_hidden,
        dof: model.dof(),
    })?;
    let tc = TrainConfig {
        epochs: cfg.pol_epochs,
        batch_size: cfg.pol_batch,
        lr: cfg.pol_lr,
        seed: train_seed,
    };
    Ok(train_policy(&net, &examples, &tc)?)
}

/// Train a policy on the synthesized dataset under the output root.
pub fn train_policy_from_manifest(
    cfg: &PipelineConfig,
    n_generated: usize,
    train_seed: u64,
) -> Result<PolicyModel, PipelineError> {
    let model = load_robot(cfg)?;
    let manifest = read_manifest(&cfg.output)?;
    let pairs = load_policy_pairs(&cfg.output, &manifest, n_generated)?;
    train_policy_on_pairs(cfg, &model, &pairs, train_seed)
}

const POLICY_MAGIC: &[u8; 4] = b"PLCY";

/// Persist a policy: magic, version, config JSON, parameters, loss curve.
pub fn write_policy(path: &Path, model: &PolicyModel) -> Result<(), PipelineError> {
    let cfg_json = serde_json::to_vec(model.net.config())?;
    let mut bytes = Vec::new();
    bytes.extend_from_slice(POLICY_MAGIC);
    bytes.extend_from_slice(&1u32.to_le_bytes());
    bytes.extend_from_slice(&(cfg_json.len() as u32).to_le_bytes());
    bytes.extend_from_slice(&cfg_json);
    bytes.extend_from_slice(&(model.params.data.len() as u64).to_le_bytes());
    for v in &model.params.data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    bytes.extend_from_slice(&(model.loss_curve.len() as u32).to_le_bytes());
    for v in &model.loss_curve {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, bytes)?;
    Ok(())
}

pub fn read_policy(path: &Path) -> Result<PolicyModel, PipelineError> {
    let bytes = fs::read(path)?;
    let bad = |msg: &str| PipelineError::Dataset(format!("policy checkpoint: {msg}"));
    let take = |off: &mut usize, n: usize| -> Result<Vec<u8>, PipelineError> {
        let end = *off + n;
        let slice = bytes.get(*off..end).ok_or_else(|| bad("truncated"))?;
        *off = end;
        Ok(slice.to_vec())
    };
    let mut off = 0usize;
    if take(&mut off, 4)? != POLICY_MAGIC {
        return Err(bad("bad magic"));
    }
    let version = u32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap());
    if version != 1 {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let cfg_len = u32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap()) as usize;
    let cfg: PolicyConfig = serde_json::from_slice(&take(&mut off, cfg_len)?)?;
    let n_params = u64::from_le_bytes(take(&mut off, 8)?.try_into().unwrap()) as usize;
    let net = PolicyNet::new(cfg)?;
    if n_params != net.param_count() {
        return Err(bad(&format!(
            "{} parameters stored, network needs {}",
            n_params,
            net.param_count()
        )));
    }
    let mut params = net.init_params(0);
    for slot in params.data.iter_mut() {
        *slot = f64::from_le_bytes(take(&mut off, 8)?.try_into().unwrap());
    }
    let n_loss = u32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap()) as usize;
    let mut loss_curve = Vec::with_capacity(n_loss);
    for _ in 0..n_loss {
        loss_curve.push(f64::from_le_bytes(take(&mut off, 8)?.try_into().unwrap()));
    }
    if off != bytes.len() {
        return Err(bad("trailing bytes"));
    }
    Ok(PolicyModel { net, params, loss_curve })
}

/// Evaluate a policy on freshly drawn scenes for this config's task.
pub fn evaluate_from_config(
    cfg: &PipelineConfig,
    policy: &PolicyModel,
    eval_seed: u64,
) -> Result<crate::toyworld::EvalReport, PipelineError> {
    let model = load_robot(cfg)?;
    Ok(evaluate_policy(&model, policy, &cfg.task, cfg.objects, cfg.eval_episodes, eval_seed)?)
}

// ---------------------------------------------------------------------------
// Scaling study
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingRow {
    /// Generated demonstrations added to the seed set.
    pub generated: usize,
    pub success_rate: f64,
    pub mean_final_distance: f64,
}

/// Train one policy per requested dataset size and evaluate it. Sizes are
/// counts of generated demonstrations added on top of all seeds; size 0 is
/// the seed-only baseline. Duplicate sizes produce identical rows because
/// every draw is keyed by (size, policy seed), not by row position.
pub fn run_scaling_study(
    cfg: &PipelineConfig,
    sizes: &[usize],
) -> Result<Vec<ScalingRow>, PipelineError> {
    if sizes.is_empty() {
        return Err(PipelineError::Config("scaling needs at least one size".into()));
    }
    if !manifest_path(&cfg.output).is_file() {
        run_synthesis(cfg)?;
    }
    let model = load_robot(cfg)?;
    let manifest = read_manifest(&cfg.output)?;
    let mut rows = Vec::with_capacity(sizes.len());
    for &n in sizes {
        let pairs = load_policy_pairs(&cfg.output, &manifest, n)?;
        let mut success = 0.0;
        let mut distance = 0.0;
        for t in 0..cfg.scaling_seeds {
            let train_seed =
                derive(cfg.seed, &[tag::POLICY_INIT, n as u64, t as u64]);
            let eval_seed = derive(cfg.seed, &[tag::EVAL, n as u64, t as u64]);
            let policy = train_policy_on_pairs(cfg, &model, &pairs, train_seed)?;
            let report = evaluate_policy(
                &model,
                &policy,
                &cfg.task,
                cfg.objects,
                cfg.eval_episodes,
                eval_seed,
            )?;
            success += report.success_rate;
            distance += report.mean_final_distance;
        }
        let seeds = cfg.scaling_seeds as f64;
        rows.push(ScalingRow {
            generated: n,
            success_rate: success / seeds,
            mean_final_distance: distance / seeds,
        });
    }
    write_scaling_csv(&cfg.output.join("scaling.csv"), &rows)?;
    let points: Vec<(f64, f64)> =
        rows.iter().map(|r| (r.generated as f64, r.success_rate)).collect();
    write_success_plot(
        &cfg.output.join("scaling.svg"),
        "Policy success vs generated demonstrations",
        &points,
    )?;
    Ok(rows)
}

pub fn write_scaling_csv(path: &Path, rows: &[ScalingRow]) -> Result<(), PipelineError> {
    let mut text = String::from("generated,success_rate,mean_final_distance\n");
    for r in rows {
        text.push_str(&format!("{},{},{}\n", r.generated, r.success_rate, r.mean_final_distance));
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, text)?;
    Ok(())
}

pub fn read_scaling_csv(path: &Path) -> Result<Vec<ScalingRow>, PipelineError> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines.next().unwrap_or("");
    if header != "generated,success_rate,mean_final_distance" {
        return Err(PipelineError::Dataset(format!("bad csv header `{header}`")));
    }
    let mut rows = Vec::new();
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 3 {
            return Err(PipelineError::Dataset(format!("bad csv row `{line}`")));
        }
        rows.push(ScalingRow {
            generated: parse_num("generated", fields[0])?,
            success_rate: parse_num("success_rate", fields[1])?,
            mean_final_distance: parse_num("mean_final_distance", fields[2])?,
        });
    }
    Ok(rows)
}

/// Minimal deterministic SVG line plot: success rate on [0, 1] against a
/// numeric x axis, with per-point markers and tick labels.
pub fn write_success_plot(
    path: &Path,
    title: &str,
    points: &[(f64, f64)],
) -> Result<(), PipelineError> {
    if points.is_empty() {
        return Err(PipelineError::Config("plot needs at least one point".into()));
    }
    let (w, h) = (640.0, 400.0);
    let (left, right, top, bottom) = (70.0, 30.0, 40.0, 50.0);
    let x_max = points.iter().map(|p| p.0).fold(1.0f64, f64::max);
    let px = |x: f64| left + (x / x_max) * (w - left - right);
    let py = |y: f64| (h - bottom) - y.clamp(0.0, 1.0) * (h - top - bottom);
    let mut s = String::new();
    s.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n"
    ));
    s.push_str(&format!(
        "<text x=\"{}\" y=\"24\" text-anchor=\"middle\" font-size=\"16\">{title}</text>\n",
        w / 2.0
    ));
    s.push_str(&format!(
        "<line x1=\"{left}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n",
        h - bottom,
        w - right,
        h - bottom
    ));
    s.push_str(&format!(
        "<line x1=\"{left}\" y1=\"{top}\" x2=\"{left}\" y2=\"{}\" stroke=\"black\"/>\n",
        h - bottom
    ));
    for i in 0..=4 {
        let y = i as f64 * 0.25;
        s.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" text-anchor=\"end\" font-size=\"11\">{y}</text>\n",
            left - 8.0,
            py(y) + 4.0
        ));
        s.push_str(&format!(
            "<line x1=\"{left}\" y1=\"{0}\" x2=\"{1}\" y2=\"{0}\" stroke=\"#ddd\"/>\n",
            py(y),
            w - right
        ));
    }
    let mut poly = String::new();
    for (x, y) in points {
        poly.push_str(&format!("{},{} ", px(*x), py(*y)));
    }
    s.push_str(&format!(
        "<polyline points=\"{}\" fill=\"none\" stroke=\"#1f77b4\" stroke-width=\"2\"/>\n",
        poly.trim_end()
    ));
    for (x, y) in points {
        s.push_str(&format!(
            "<circle cx=\"{}\" cy=\"{}\" r=\"4\" fill=\"#1f77b4\"/>\n",
            px(*x),
            py(*y)
        ));
        s.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-size=\"11\">{x}</text>\n",
            px(*x),
            h - bottom + 18.0
        ));
    }
    s.push_str("</svg>\n");
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, s)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Ablations
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationVariant {
    /// Full conditioning, full window length.
    Full,
    /// Zero the global trajectory channel at training and sampling.
    NoGlobalTraj,
    /// Full conditioning, but sample with half the window length. The
    /// network keeps its size; short windows are padded like tail windows.
    ShortWindow,
}

impl fmt::Display for AblationVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AblationVariant::Full => "full",
            AblationVariant::NoGlobalTraj => "no_global_traj",
            AblationVariant::ShortWindow => "short_window",
        })
    }
}

impl FromStr for AblationVariant {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "full" => Ok(AblationVariant::Full),
            "no_global_traj" => Ok(AblationVariant::NoGlobalTraj),
            "short_window" => Ok(AblationVariant::ShortWindow),
            other => Err(format!(
                "unknown variant `{other}` (expected full, no_global_traj, short_window)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub episodes: usize,
    pub train_seeds: usize,
    /// Generation windows per 1x-length clip under this variant.
    pub windows_per_clip: usize,
    /// Pooled mean distance between where generated frames show the object
    /// and where the action channel grasps it (undetected episodes incur
    /// the fixed penalty distance).
    pub mean_consistency: f64,
    pub per_seed_consistency: Vec<f64>,
    /// Fraction of episodes where the object was detected at all.
    pub detected_fraction: f64,
    pub policy_success: Option<f64>,
}

/// Measure one variant. Per training seed, a fresh generator is trained
/// (cached under `ablation/`), a batch of perturbed seed demonstrations is
/// generated under the same conditioning regime `run_synthesis` deploys, and
/// the object/action consistency of each generated clip is measured.
/// Optionally a policy is trained on variant-generated data.
pub fn run_ablation(
    cfg: &PipelineConfig,
    variant: AblationVariant,
) -> Result<AblationRow, PipelineError> {
    if cfg.cameras.len() != 1 {
        return Err(PipelineError::Config(
            "ablation consistency measurement needs a single camera".into(),
        ));
    }
    let ablate = variant == AblationVariant::NoGlobalTraj;
    let window_eff = match variant {
        AblationVariant::ShortWindow => cfg.gen_window / 2,
        _ => cfg.gen_window,
    };
    if window_eff == 0 || window_eff <= cfg.gen_overlap {
        return Err(PipelineError::Config(format!(
            "variant window {window_eff} must exceed overlap {}",
            cfg.gen_overlap
        )));
    }
    let model = load_robot(cfg)?;
    let demos = load_seed_set(&cfg.seeds_dir, &model)?;
    let schedule = cfg.schedule()?;
    let rig = camera_rig(cfg.cameras[0], cfg.resolution);
    let clip_len = demos[0].demo.trajectory.waypoints.len();
    let windows_per_clip = plan_windows(clip_len, window_eff, cfg.gen_overlap)?.len();
    let ckpt_label = if ablate { "noglobal" } else { "full" };

    let base = cfg.ablation_episodes / cfg.ablation_seeds;
    let extra = cfg.ablation_episodes % cfg.ablation_seeds;
    let mut per_seed = Vec::with_capacity(cfg.ablation_seeds);
    let mut pooled_sum = 0.0;
    let mut detected = 0usize;
    let mut policy_success = None;

    for t in 0..cfg.ablation_seeds {
        let train_seed = derive(cfg.seed, &[tag::GENERATOR_INIT, t as u64]);
        let ckpt = cfg
            .output
            .join("ablation")
            .join(format!("gen_{ckpt_label}_{t:02}.ckpt"));
        let (generator, _) =
            ensure_generator_at(&ckpt, &model, &demos, cfg, ablate, train_seed)?;
        let language = generator.net.export_language_table(&generator.params);
        let episodes = base + usize::from(t < extra);

        let distances: Vec<(f64, bool)> = (0..episodes)
            .into_par_iter()
            .map(|j| -> Result<(f64, bool), PipelineError> {
                // Episodes follow the deployment distribution: perturbations
                // of the seed demonstrations, exactly as `run_synthesis`
                // conditions the generator, so the variants are compared
                // where the generator actually operates.
                let sd = &demos[j % demos.len()];
                let spec = PerturbationSpec {
                    horizontal_bound: cfg.horizontal_bound,
                    vertical_bound: cfg.vertical_bound,
                    yaw_bound: cfg.yaw_bound,
                    rng_seed: derive(cfg.seed, &[tag::EVAL, t as u64, j as u64]),
                };
                let opts = ExpansionOptions {
                    window: cfg.exp_window,
                    max_resamples: cfg.max_resamples,
                    v_max: cfg.v_max,
                };
                let expansion = expand_trajectory(
                    &sd.demo.trajectory,
                    &sd.demo.keys,
                    &spec,
                    &model,
                    &opts,
                )?;
                let rendered = render_motion_views(&model, &expansion.trajectory, cfg)?;
                let lang = language.embed(expansion.trajectory.instruction_id)?;
                let rollout_seed =
                    derive(cfg.seed, &[tag::SAMPLING, t as u64, j as u64]);
                let generated = rollout_autoregressive(
                    &generator,
                    &rendered,
                    &expansion.trajectory,
                    &lang,
                    window_eff,
                    cfg.gen_overlap,
                    &schedule,
                    &cfg.assemble_options(ablate),
                    rollout_seed,
                )?;
                if generated.frames.len() != rendered.frames.len() {
                    return Err(PipelineError::Dataset(
                        "generated clip length diverges from conditioning".into(),
                    ));
                }
                let measure = measure_consistency(
                    &generated,
                    &expansion.trajectory,
                    &expansion.keys,
                    &cfg.task,
                    &sd.scene,
                    &rig,
                )?;
                Ok(match measure {
                    ConsistencyMeasure::Detected(d) => (d, true),
                    ConsistencyMeasure::Undetected => {
                        (undetected_penalty(&sd.scene.bounds), false)
                    }
                })
            })
            .collect::<Result<Vec<_>, _>>()?;

        let sum: f64 = distances.iter().map(|(d, _)| d).sum();
        detected += distances.iter().filter(|(_, hit)| *hit).count();
        pooled_sum += sum;
        per_seed.push(sum / episodes.max(1) as f64);

        // Policy impact is measured once, on the first training seed's
        // generator: seeds plus K variant-generated expansions per seed.
        if cfg.ablation_policy && t == 0 {
            let mut pairs: Vec<(FrameSequence, Trajectory)> = Vec::new();
            for sd in &demos {
                pairs.push((
                    render_full_views(&model, sd, &cfg.task, cfg)?,
                    sd.demo.trajectory.clone(),
                ));
            }
            for (s, sd) in demos.iter().enumerate() {
                for k in 1..=cfg.k {
                    let spec_seed =
                        derive(cfg.seed, &[tag::EXPANSION, s as u64, k as u64]);
                    let rollout_seed =
                        derive(cfg.seed, &[tag::SAMPLING, s as u64, k as u64]);
                    let spec = PerturbationSpec {
                        horizontal_bound: cfg.horizontal_bound,
                        vertical_bound: cfg.vertical_bound,
                        yaw_bound: cfg.yaw_bound,
                        rng_seed: spec_seed,
                    };
                    let opts = ExpansionOptions {
                        window: cfg.exp_window,
                        max_resamples: cfg.max_resamples,
                        v_max: cfg.v_max,
                    };
                    let expansion = expand_trajectory(
                        &sd.demo.trajectory,
                        &sd.demo.keys,
                        &spec,
                        &model,
                        &opts,
                    )?;
                    let rendered = render_motion_views(&model, &expansion.trajectory, cfg)?;
                    let lang = language.embed(expansion.trajectory.instruction_id)?;
                    let generated = rollout_autoregressive(
                        &generator,
                        &rendered,
                        &expansion.trajectory,
                        &lang,
                        window_eff,
                        cfg.gen_overlap,
                        &schedule,
                        &cfg.assemble_options(ablate),
                        rollout_seed,
                    )?;
                    pairs.push((generated, expansion.trajectory));
                }
            }
            let train_seed = derive(cfg.seed, &[tag::POLICY_INIT]);
            let eval_seed = derive(cfg.seed, &[tag::EVAL]);
            let policy = train_policy_on_pairs(cfg, &model, &pairs, train_seed)?;
            let report = evaluate_policy(
                &model,
                &policy,
                &cfg.task,
                cfg.objects,
                cfg.eval_episodes,
                eval_seed,
            )?;
            policy_success = Some(report.success_rate);
        }
    }

    let row = AblationRow {
        variant: variant.to_string(),
        episodes: cfg.ablation_episodes,
        train_seeds: cfg.ablation_seeds,
        windows_per_clip,
        mean_consistency: pooled_sum / cfg.ablation_episodes as f64,
        per_seed_consistency: per_seed,
        detected_fraction: detected as f64 / cfg.ablation_episodes as f64,
        policy_success,
    };
    fs::create_dir_all(&cfg.output)?;
    let mut text = serde_json::to_string_pretty(&row)?;
    text.push('\n');
    fs::write(cfg.output.join(format!("ablation_{variant}.json")), text)?;
    Ok(row)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn tiny_entries() -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        for (k, v) in [
            ("pipeline.seed", "7"),
            ("pipeline.failure_cap", "0"),
            ("seeds.count", "2"),
            ("task.objects", "1"),
            ("expansion.k", "1"),
            ("expansion.max_resamples", "40"),
            ("render.resolution", "8"),
            ("generator.window", "4"),
            ("generator.overlap", "1"),
            ("generator.steps", "6"),
            ("generator.beta_end", "0.9"),
            ("generator.c1", "2"),
            ("generator.c2", "4"),
            ("generator.t_dim", "4"),
            ("generator.traj_dim", "4"),
            ("generator.lang_dim", "4"),
            ("generator.traj_samples", "4"),
            ("generator.epochs", "2"),
            ("generator.batch", "8"),
            ("policy.c1", "2"),
            ("policy.c2", "4"),
            ("policy.hidden", "8"),
            ("policy.epochs", "2"),
            ("policy.batch", "8"),
            ("eval.episodes", "2"),
            ("scaling.seeds", "1"),
            ("ablation.episodes", "2"),
            ("ablation.seeds", "1"),
            ("ablation.policy", "false"),
        ] {
            m.insert(k.to_string(), v.to_string());
        }
        m
    }

    fn tiny_config(root: &Path) -> PipelineConfig {
        let mut m = tiny_entries();
        m.insert(
            "pipeline.output".into(),
            root.join("out").to_string_lossy().into_owned(),
        );
        m.insert("seeds.dir".into(), root.join("seeds").to_string_lossy().into_owned());
        let cfg = PipelineConfig::from_entries(&m).unwrap();
        cfg.validate(false).unwrap();
        cfg
    }

    fn seeded_config(root: &Path) -> PipelineConfig {
        let cfg = tiny_config(root);
        let demos = generate_seed_set(&cfg).unwrap();
        write_seed_set(&cfg.seeds_dir, &demos).unwrap();
        cfg
    }

    #[test]
    fn defaults_fill_every_key() {
        let cfg = PipelineConfig::default();
        assert_eq!(cfg.k, 3);
        assert_eq!(cfg.resolution, 24);
        assert_eq!(cfg.cameras, vec![CameraName::Overhead]);
        assert_eq!(cfg.scaling_sizes, vec![0, 100, 300]);
        cfg.validate(false).unwrap();
    }

    #[test]
    fn parses_sections_comments_and_blanks() {
        let text = "
# a comment
[pipeline]
seed = 42   # trailing comment

[render]
resolution = 16
";
        let entries = parse_config_entries(text).unwrap();
        assert_eq!(entries.get("pipeline.seed").map(String::as_str), Some("42"));
        let cfg = PipelineConfig::from_entries(&entries).unwrap();
        assert_eq!(cfg.seed, 42);
        assert_eq!(cfg.resolution, 16);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        let mut m = BTreeMap::new();
        m.insert("pipeline.sed".to_string(), "1".to_string());
        assert!(matches!(
            PipelineConfig::from_entries(&m),
            Err(PipelineError::Config(_))
        ));

        let mut m = BTreeMap::new();
        m.insert("expansion.k".to_string(), "0".to_string());
        let cfg = PipelineConfig::from_entries(&m).unwrap();
        assert!(cfg.validate(false).is_err());

        let mut m = BTreeMap::new();
        m.insert("render.fps".to_string(), "7".to_string());
        let cfg = PipelineConfig::from_entries(&m).unwrap();
        assert!(cfg.validate(false).is_err());

        let mut m = BTreeMap::new();
        m.insert("generator.overlap".to_string(), "8".to_string());
        let cfg = PipelineConfig::from_entries(&m).unwrap();
        assert!(cfg.validate(false).is_err());
    }

    #[test]
    fn hash_ignores_output_and_workers_only() {
        let a = PipelineConfig::default();
        let mut m = BTreeMap::new();
        m.insert("pipeline.output".to_string(), "elsewhere".to_string());
        m.insert("pipeline.workers".to_string(), "9".to_string());
        let b = PipelineConfig::from_entries(&m).unwrap();
        assert_eq!(a.config_hash(), b.config_hash());

        let mut m = BTreeMap::new();
        m.insert("pipeline.seed".to_string(), "1".to_string());
        let c = PipelineConfig::from_entries(&m).unwrap();
        assert_ne!(a.config_hash(), c.config_hash());
    }

    #[test]
    fn override_precedence_is_file_flags_env() {
        let text = "[pipeline]\nseed = 1\noutput = from_file\n";
        let sets = vec![
            ("pipeline.seed".to_string(), "2".to_string()),
            ("pipeline.output".to_string(), "from_flag".to_string()),
        ];
        let cfg = PipelineConfig::load(text, &sets, |k| {
            (k == "DEMOFORGE_OUT").then(|| "from_env".to_string())
        })
        .unwrap();
        assert_eq!(cfg.seed, 2);
        assert_eq!(cfg.output, PathBuf::from("from_env"));
    }

    #[test]
    fn multiple_cameras_widen_the_generator() {
        let mut m = BTreeMap::new();
        m.insert("render.cameras".to_string(), "overhead,overhead".to_string());
        let cfg = PipelineConfig::from_entries(&m).unwrap();
        assert_eq!(cfg.net_config().width, 2 * cfg.resolution);
        assert_eq!(cfg.value_of("render.cameras"), "overhead,overhead");
    }

    #[test]
    fn key_files_round_trip_bitwise() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("k.txt");
        let keys = vec![
            KeyState {
                index: 22,
                label: KeyLabel::Grasp,
                anchor: Pose::from_translation(Vector3::new(0.1234567890123, -0.25, 0.0)),
            },
            KeyState {
                index: 58,
                label: KeyLabel::Release,
                anchor: Pose::from_translation(Vector3::new(0.45, 0.2, 1.0 / 3.0)),
            },
        ];
        write_keys(&path, &keys).unwrap();
        let back = read_keys(&path).unwrap();
        assert_eq!(back.len(), 2);
        for (a, b) in keys.iter().zip(&back) {
            assert_eq!(a.index, b.index);
            assert_eq!(a.label, b.label);
            for r in 0..3 {
                for c in 0..3 {
                    assert_eq!(
                        a.anchor.rotation[(r, c)].to_bits(),
                        b.anchor.rotation[(r, c)].to_bits()
                    );
                }
                assert_eq!(
                    a.anchor.translation[r].to_bits(),
                    b.anchor.translation[r].to_bits()
                );
            }
        }
    }

    #[test]
    fn key_files_reject_corruption() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("k.txt");
        fs::write(&path, "keys v2 1\n").unwrap();
        assert!(read_keys(&path).is_err());
        fs::write(&path, "keys v1 1\n3 grasp 1 0 0\n").unwrap();
        assert!(read_keys(&path).is_err());
        fs::write(
            &path,
            "keys v1 1\n3 pounce 1 0 0 0 1 0 0 0 1 0.5 0.5 0\n",
        )
        .unwrap();
        assert!(read_keys(&path).is_err());
    }

    #[test]
    fn seed_sets_round_trip_exactly() {
        let dir = tempdir().unwrap();
        let cfg = tiny_config(dir.path());
        let demos = generate_seed_set(&cfg).unwrap();
        assert_eq!(demos.len(), 2);
        write_seed_set(&cfg.seeds_dir, &demos).unwrap();
        let model = load_robot(&cfg).unwrap();
        let back = load_seed_set(&cfg.seeds_dir, &model).unwrap();
        assert_eq!(back.len(), demos.len());
        for (a, b) in demos.iter().zip(&back) {
            assert_eq!(
                write_trajectory(&a.demo.trajectory),
                write_trajectory(&b.demo.trajectory)
            );
            assert_eq!(a.demo.keys.len(), b.demo.keys.len());
            assert_eq!(a.scene.goal, b.scene.goal);
            assert_eq!(a.scene.objects.len(), b.scene.objects.len());
        }
    }

    #[test]
    fn policy_checkpoints_round_trip() {
        let dir = tempdir().unwrap();
        let cfg = PolicyConfig { height: 8, width: 8, c1: 2, c2: 3, hidden: 5, dof: 3 };
        let net = PolicyNet::new(cfg).unwrap();
        let params = net.init_params(11);
        let model = PolicyModel { net, params, loss_curve: vec![0.5, 0.25] };
        let path = dir.path().join("p.ckpt");
        write_policy(&path, &model).unwrap();
        let back = read_policy(&path).unwrap();
        assert_eq!(back.net.config(), model.net.config());
        assert_eq!(back.loss_curve, model.loss_curve);
        for (a, b) in model.params.data.iter().zip(&back.params.data) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn synthesis_produces_indexed_dataset() {
        let dir = tempdir().unwrap();
        let cfg = seeded_config(dir.path());
        let report = run_synthesis(&cfg).unwrap();
        assert!(report.failures.is_empty());
        assert_eq!(report.reused, 0);
        assert_eq!(report.manifest.entries.len(), 4);
        let seeds = report
            .manifest
            .entries
            .iter()
            .filter(|e| e.provenance == Provenance::Seed)
            .count();
        assert_eq!(seeds, 2);
        validate_manifest(&cfg.output, &report.manifest).unwrap();
        for e in &report.manifest.entries {
            let frames = read_frames_raw(&cfg.output.join(&e.frames)).unwrap();
            assert_eq!(frames.frames.len(), 80);
            assert_eq!(frames.frames[0].width, 8);
        }
    }

    #[test]
    fn synthesis_resumes_and_repeats_bitwise() {
        let dir = tempdir().unwrap();
        let cfg = seeded_config(dir.path());
        run_synthesis(&cfg).unwrap();
        let first = fs::read(manifest_path(&cfg.output)).unwrap();

        // Second run over the same root reuses every journal entry.
        let again = run_synthesis(&cfg).unwrap();
        assert_eq!(again.reused, 4);
        assert_eq!(again.completed, 0);
        assert_eq!(fs::read(manifest_path(&cfg.output)).unwrap(), first);

        // A fresh root replays the identical dataset from scratch.
        let mut cfg2 = cfg.clone();
        cfg2.output = dir.path().join("out2");
        let replay = run_synthesis(&cfg2).unwrap();
        assert_eq!(replay.reused, 0);
        assert_eq!(fs::read(manifest_path(&cfg2.output)).unwrap(), first);
        let m1 = read_manifest(&cfg.output).unwrap();
        for e in &m1.entries {
            assert_eq!(
                file_sha(&cfg.output.join(&e.frames)).unwrap(),
                file_sha(&cfg2.output.join(&e.frames)).unwrap()
            );
        }
        assert_eq!(
            file_sha(&generator_path(&cfg)).unwrap(),
            file_sha(&generator_path(&cfg2)).unwrap()
        );
    }

    #[test]
    fn validate_manifest_catches_tampering() {
        let dir = tempdir().unwrap();
        let cfg = seeded_config(dir.path());
        let report = run_synthesis(&cfg).unwrap();
        let mut manifest = report.manifest;

        let frames_rel = manifest.entries[0].frames.clone();
        let path = cfg.output.join(&frames_rel);
        let mut bytes = fs::read(&path).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 0x01;
        fs::write(&path, &bytes).unwrap();
        assert!(validate_manifest(&cfg.output, &manifest).is_err());
        bytes[last] ^= 0x01;
        fs::write(&path, &bytes).unwrap();
        validate_manifest(&cfg.output, &manifest).unwrap();

        manifest.entries.swap(0, 1);
        assert!(validate_manifest(&cfg.output, &manifest).is_err());
        manifest.entries.swap(0, 1);

        manifest.entries[0].spec_seed = 3;
        assert!(validate_manifest(&cfg.output, &manifest).is_err());
    }

    #[test]
    fn scaling_rows_are_deterministic_per_size() {
        let dir = tempdir().unwrap();
        let cfg = seeded_config(dir.path());
        run_synthesis(&cfg).unwrap();
        let rows = run_scaling_study(&cfg, &[0, 1, 1]).unwrap();
        assert_eq!(rows.len(), 3);
        assert_eq!(rows[1], rows[2]);
        assert_eq!(rows[0].generated, 0);
        let csv = read_scaling_csv(&cfg.output.join("scaling.csv")).unwrap();
        assert_eq!(csv, rows);
        let svg = fs::read_to_string(cfg.output.join("scaling.svg")).unwrap();
        assert!(svg.contains("<polyline"));
        assert_eq!(svg.matches("<circle").count(), 3);
    }

    #[test]
    fn scaling_rejects_oversized_requests() {
        let dir = tempdir().unwrap();
        let cfg = seeded_config(dir.path());
        run_synthesis(&cfg).unwrap();
        assert!(matches!(
            run_scaling_study(&cfg, &[50]),
            Err(PipelineError::Config(_))
        ));
    }

    #[test]
    fn ablation_short_window_doubles_window_count() {
        let dir = tempdir().unwrap();
        let cfg = seeded_config(dir.path());
        let full = run_ablation(&cfg, AblationVariant::Full).unwrap();
        let short = run_ablation(&cfg, AblationVariant::ShortWindow).unwrap();
        assert_eq!(
            full.windows_per_clip,
            plan_windows(80, cfg.gen_window, cfg.gen_overlap).unwrap().len()
        );
        assert_eq!(
            short.windows_per_clip,
            plan_windows(80, cfg.gen_window / 2, cfg.gen_overlap).unwrap().len()
        );
        assert!(short.windows_per_clip > full.windows_per_clip);
        assert!(full.mean_consistency.is_finite());

        // Same config, same variant: identical row.
        let again = run_ablation(&cfg, AblationVariant::ShortWindow).unwrap();
        assert_eq!(again, short);
        let on_disk: AblationRow = serde_json::from_str(
            &fs::read_to_string(cfg.output.join("ablation_short_window.json")).unwrap(),
        )
        .unwrap();
        assert_eq!(on_disk, short);
    }

    #[test]
    fn exit_codes_split_config_from_runtime() {
        assert_eq!(PipelineError::Config("x".into()).exit_code(), 1);
        assert_eq!(
            PipelineError::TooManyFailures { failed: 2, cap: 1, first: "x".into() }.exit_code(),
            2
        );
        assert_eq!(PipelineError::Dataset("x".into()).exit_code(), 2);
    }

    #[test]
    fn canonical_text_lists_every_known_key() {
        let cfg = PipelineConfig::default();
        let text = cfg.to_canonical();
        for key in KNOWN_KEYS {
            assert!(text.contains(&format!("{key} = ")), "missing {key}");
        }
    }
}
