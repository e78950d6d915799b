//! Command implementations behind the `zigzag` binary: config and story
//! file parsing, artefact persistence, run manifests and replay.
//!
//! Every command writes into an output directory and finishes with a
//! `manifest.json` holding the full command arguments plus SHA-256 hashes of
//! inputs and outputs, so `replay` can rerun it and compare bit for bit.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attention::{attend, softmax_rows};
use crate::cache::{top_k_select, IdentityTokenCache, SelectionMode};
use crate::denoiser::{
    combine_guidance, guided_eps, Checkpoint, Denoiser, DenoiserRequest, ModelDims, ToyDenoiserWeights,
};
use crate::error::{Error, Result};
use crate::metrics::{ablation_report, evaluate_story, train_probe, AblationReport, ProbeConfig, SeedMetrics};
use crate::prompt::{embed, fuse_prompts, null_prompt, GuidanceConfig, PromptVocabulary};
use crate::sampler::{
    generate_story_with_cache, sample_vanilla, sample_zigzag, scene_seed, story_cache, SamplerConfig,
    SamplingContext, StoryResult, Variant,
};
use crate::schedule::{
    denoise_step, inverse_step, LatentState, NoiseSchedule, ScheduleKind, ScheduleParams,
};
use crate::world::{render_catalog, train_with_progress, OptimizerKind, ToyWorld, TrainConfig};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CHECKPOINT_FILE: &str = "model.zzckpt";
pub const CACHE_FILE: &str = "identity.zzcache";

// ---------------------------------------------------------------------------
// key=value config files

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::config(format!("line {}: expected key=value, got {raw:?}", n + 1)))?;
        let key = k.trim().to_string();
        if out.insert(key.clone(), v.trim().to_string()).is_some() {
            return Err(Error::config(format!("line {}: duplicate key {key}", n + 1)));
        }
    }
    Ok(out)
}

fn parse_value<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::config(format!("invalid value {v:?} for {key}")))
}

/// Applies config-file keys on top of [`TrainConfig::default`].
pub fn train_config_from_kv(map: &BTreeMap<String, String>) -> Result<TrainConfig> {
    let mut c = TrainConfig::default();
    let mut momentum = 0.9;
    let mut optimizer = None;
    let (mut beta_start, mut beta_end, mut train_steps) = match c.schedule {
        ScheduleParams::LinearBeta {
            beta_start,
            beta_end,
            train_steps,
        } => (beta_start, beta_end, train_steps),
        _ => unreachable!("default schedule is linear"),
    };
    let mut schedule_kind = "linear".to_string();
    let mut cosine_offset = 0.008;
    let mut constant_value = 0.5;
    for (k, v) in map {
        match k.as_str() {
            "epochs" => c.epochs = parse_value(k, v)?,
            "steps_per_epoch" => c.steps_per_epoch = parse_value(k, v)?,
            "batch_size" => c.batch_size = parse_value(k, v)?,
            "learning_rate" | "lr" => c.learning_rate = parse_value(k, v)?,
            "final_lr_fraction" => c.final_lr_fraction = parse_value(k, v)?,
            "grid" => c.grid = parse_value(k, v)?,
            "channels" => c.channels = parse_value(k, v)?,
            "identity_count" => c.identity_count = parse_value(k, v)?,
            "variants_per_identity" => c.variants_per_identity = parse_value(k, v)?,
            "scene_count" => c.scene_count = parse_value(k, v)?,
            "optimizer" => optimizer = Some(v.to_ascii_lowercase()),
            "momentum" => momentum = parse_value(k, v)?,
            "seed" => c.seed = parse_value(k, v)?,
            "world_seed" => c.world_seed = parse_value(k, v)?,
            "layers" => c.layers = parse_value(k, v)?,
            "model_dim" => c.model_dim = parse_value(k, v)?,
            "heads" => c.heads = parse_value(k, v)?,
            "ffn_dim" => c.ffn_dim = parse_value(k, v)?,
            "text_dim" => c.text_dim = parse_value(k, v)?,
            "steps" => c.steps = parse_value(k, v)?,
            "schedule" => schedule_kind = v.to_ascii_lowercase(),
            "beta_start" => beta_start = parse_value(k, v)?,
            "beta_end" => beta_end = parse_value(k, v)?,
            "train_steps" => train_steps = parse_value(k, v)?,
            "cosine_offset" => cosine_offset = parse_value(k, v)?,
            "constant_alpha_ratio" => constant_value = parse_value(k, v)?,
            "p_uncond" => c.p_uncond = parse_value(k, v)?,
            "p_identity_only" => c.p_identity_only = parse_value(k, v)?,
            "p_single_scene" => c.p_single_scene = parse_value(k, v)?,
            "max_fused_scenes" => c.max_fused_scenes = parse_value(k, v)?,
            "w_inactive" => c.w_inactive = parse_value(k, v)?,
            other => return Err(Error::config(format!("unknown config key {other:?}"))),
        }
    }
    c.optimizer = match optimizer.as_deref() {
        None => match c.optimizer {
            OptimizerKind::Sgd { .. } => OptimizerKind::Sgd { momentum },
            adam => adam,
        },
        Some("sgd") => OptimizerKind::Sgd { momentum },
        Some("adam") => OptimizerKind::adam(),
        Some(other) => return Err(Error::config(format!("unknown optimizer {other:?} (sgd, adam)"))),
    };
    c.schedule = match schedule_kind.as_str() {
        "linear" | "linear_beta" => ScheduleParams::LinearBeta {
            beta_start,
            beta_end,
            train_steps,
        },
        "cosine" => ScheduleParams::Cosine { offset: cosine_offset },
        "constant" | "constant_test" => ScheduleParams::ConstantTest { value: constant_value },
        other => return Err(Error::config(format!("unknown schedule {other:?}"))),
    };
    c.validate()?;
    Ok(c)
}

pub fn load_train_config(path: &Path) -> Result<TrainConfig> {
    train_config_from_kv(&parse_kv(&read_text(path)?)?)
}

// ---------------------------------------------------------------------------
// story files

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoryFile {
    pub identity: Vec<String>,
    pub scenes: Vec<Vec<String>>,
}

/// `identity: <tokens>` followed by one `scene: <tokens>` line per scene.
pub fn parse_story(text: &str) -> Result<StoryFile> {
    let mut identity = None;
    let mut scenes = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (tag, rest) = line
            .split_once(':')
            .ok_or_else(|| Error::config(format!("story line {}: expected `tag: tokens`", n + 1)))?;
        let tokens: Vec<String> = rest.split_whitespace().map(str::to_ascii_lowercase).collect();
        match (tag.trim(), identity.is_some()) {
            ("identity", false) if scenes.is_empty() => identity = Some(tokens),
            ("identity", _) => return Err(Error::config("story has more than one identity line")),
            ("scene", true) => {
                if tokens.is_empty() {
                    return Err(Error::config(format!("story line {}: empty scene", n + 1)));
                }
                scenes.push(tokens)
            }
            ("scene", false) => return Err(Error::config("story must start with an identity line")),
            (other, _) => return Err(Error::config(format!("story line {}: unknown tag {other:?}", n + 1))),
        }
    }
    let identity = identity.ok_or_else(|| Error::config("story has no identity line"))?;
    if identity.is_empty() {
        return Err(Error::config("identity prompt is empty"));
    }
    if scenes.is_empty() {
        return Err(Error::config("story has no scenes"));
    }
    Ok(StoryFile { identity, scenes })
}

pub fn render_story(story: &StoryFile) -> String {
    let mut out = format!("identity: {}\n", story.identity.join(" "));
    for s in &story.scenes {
        let _ = writeln!(out, "scene: {}", s.join(" "));
    }
    out
}

pub fn load_story(path: &Path) -> Result<StoryFile> {
    parse_story(&read_text(path)?)
}

// ---------------------------------------------------------------------------
// latent grid dumps

const GRID_MAGIC: &str = "ZZGRID 1";

/// Text header (`ZZGRID 1`, `tokens N`, `channels C`, optional `label ...`,
/// `data f64le`) followed by row-major little-endian f64 values.
pub fn grid_bytes(latent: &Array2<f64>, label: &str) -> Vec<u8> {
    let (n, c) = latent.dim();
    let mut out = format!("{GRID_MAGIC}\ntokens {n}\nchannels {c}\nlabel {label}\ndata f64le\n").into_bytes();
    for v in latent.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn read_grid(reader: impl Read) -> Result<(Array2<f64>, String)> {
    let what = "latent grid";
    let mut r = BufReader::new(reader);
    let mut fields = BTreeMap::new();
    let mut line = String::new();
    r.read_line(&mut line).map_err(|e| Error::format(what, e.to_string()))?;
    if line.trim_end() != GRID_MAGIC {
        return Err(Error::format(what, "bad magic"));
    }
    loop {
        line.clear();
        if r.read_line(&mut line).map_err(|e| Error::format(what, e.to_string()))? == 0 {
            return Err(Error::format(what, "header not terminated"));
        }
        let l = line.trim_end();
        if l == "data f64le" {
            break;
        }
        let (k, v) = l.split_once(' ').unwrap_or((l, ""));
        fields.insert(k.to_string(), v.to_string());
    }
    let dim = |k: &str| -> Result<usize> {
        fields
            .get(k)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::format(what, format!("missing {k}")))
    };
    let (n, c) = (dim("tokens")?, dim("channels")?);
    let mut buf = vec![0u8; n * c * 8];
    r.read_exact(&mut buf).map_err(|e| Error::format(what, format!("truncated payload: {e}")))?;
    let data = buf
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
        .collect();
    let grid = Array2::from_shape_vec((n, c), data).map_err(|e| Error::format(what, e.to_string()))?;
    Ok((grid, fields.remove("label").unwrap_or_default()))
}

pub fn load_grid(path: &Path) -> Result<(Array2<f64>, String)> {
    read_grid(std::fs::File::open(path).map_err(|e| Error::io(path, e))?)
}

// ---------------------------------------------------------------------------
// manifests

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool_version: String,
    pub command: Command,
    /// Input path -> SHA-256 at run time.
    pub inputs: BTreeMap<String, String>,
    /// Output file name (relative to the output directory) -> SHA-256.
    pub outputs: BTreeMap<String, String>,
    /// Command-specific details: seeds, call counts, timings.
    pub details: serde_json::Value,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        serde_json::from_str(&read_text(path)?).map_err(|e| Error::format("manifest", e.to_string()))
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn absolute(path: &Path) -> Result<PathBuf> {
    std::fs::canonicalize(path).map_err(|e| Error::io(path, e))
}

/// Collects output files and writes the manifest on `finish`.
struct RunDir {
    dir: PathBuf,
    outputs: BTreeMap<String, String>,
    inputs: BTreeMap<String, String>,
}

impl RunDir {
    fn create(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            outputs: BTreeMap::new(),
            inputs: BTreeMap::new(),
        })
    }

    fn input(&mut self, path: &Path) -> Result<()> {
        self.inputs.insert(path.display().to_string(), sha256_file(path)?);
        Ok(())
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.dir.join(name);
        let mut f = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&path, e))?;
        self.outputs.insert(name.to_string(), hex::encode(Sha256::digest(bytes)));
        Ok(path)
    }

    fn finish(self, command: Command, details: serde_json::Value) -> Result<Manifest> {
        let manifest = Manifest {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            command,
            inputs: self.inputs,
            outputs: self.outputs,
            details,
        };
        let path = self.dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(manifest)
    }
}

// ---------------------------------------------------------------------------
// command arguments

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainArgs {
    /// key=value file; defaults apply when absent.
    pub config: Option<PathBuf>,
    pub out: PathBuf,
}

/// Sampler flags shared by the sampling commands.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerArgs {
    pub variant: Variant,
    pub steps: Option<usize>,
    pub guidance: f64,
    pub zag_guidance: f64,
    pub w_active: f64,
    pub w_inactive: f64,
    pub k_ratio: f64,
    pub seed: u64,
    pub layers: Vec<usize>,
    pub zigzag_fraction: f64,
}

impl Default for SamplerArgs {
    fn default() -> Self {
        let s = SamplerConfig::default();
        Self {
            variant: s.variant,
            steps: None,
            guidance: s.guidance.s_main,
            zag_guidance: s.guidance.s_zag,
            w_active: s.guidance.w_active,
            w_inactive: s.guidance.w_inactive,
            k_ratio: s.k_ratio,
            seed: s.seed,
            layers: Vec::new(),
            zigzag_fraction: s.zigzag_fraction,
        }
    }
}

impl SamplerArgs {
    fn config(&self, model: &LoadedModel) -> Result<SamplerConfig> {
        let steps = model.sched.num_steps();
        if let Some(t) = self.steps {
            if t != steps {
                return Err(Error::config(format!(
                    "--steps {t} does not match the checkpoint's schedule (T = {steps})"
                )));
            }
        }
        if let Some(l) = self.layers.iter().find(|&&l| l >= model.weights.dims.layers) {
            return Err(Error::config(format!(
                "layer {l} out of range; the model has {} layers",
                model.weights.dims.layers
            )));
        }
        let cfg = SamplerConfig {
            steps,
            variant: self.variant,
            guidance: GuidanceConfig {
                s_main: self.guidance,
                s_zag: self.zag_guidance,
                w_active: self.w_active,
                w_inactive: self.w_inactive,
            },
            k_ratio: self.k_ratio,
            seed: self.seed,
            window: None,
            stride: None,
            zigzag_fraction: self.zigzag_fraction,
            layer_mask: self.layers.clone(),
            selection: SelectionMode::PerLayer,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheArgs {
    pub checkpoint: PathBuf,
    pub identity: Vec<String>,
    pub k_ratio: f64,
    pub layers: Vec<usize>,
    pub guidance: f64,
    pub seed: u64,
    pub steps: Option<usize>,
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleArgs {
    pub checkpoint: PathBuf,
    pub identity: Vec<String>,
    pub scene: Vec<String>,
    pub sampler: SamplerArgs,
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoryArgs {
    pub checkpoint: PathBuf,
    pub cache: Option<PathBuf>,
    pub story: PathBuf,
    pub sampler: SamplerArgs,
    /// Sliding window for long stories.
    pub window: Option<usize>,
    pub stride: Option<usize>,
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblateArgs {
    pub checkpoint: PathBuf,
    pub story: PathBuf,
    pub variants: Vec<Variant>,
    pub seeds: Vec<u64>,
    /// More than one value turns the run into a k sweep.
    pub k_ratios: Vec<f64>,
    pub sampler: SamplerArgs,
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fault {
    /// Feed the schedule check an increasing alpha sequence.
    IncreasingAlpha,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyArgs {
    pub cases: usize,
    pub seed: u64,
    pub fault: Option<Fault>,
}

impl Default for VerifyArgs {
    fn default() -> Self {
        Self {
            cases: 100,
            seed: 0,
            fault: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DumpArgs {
    pub config: Option<PathBuf>,
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum Command {
    Train(TrainArgs),
    Cache(CacheArgs),
    Sample(SampleArgs),
    Story(StoryArgs),
    LongStory(StoryArgs),
    Ablate(AblateArgs),
    Dump(DumpArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Train(_) => "train",
            Command::Cache(_) => "cache",
            Command::Sample(_) => "sample",
            Command::Story(_) => "story",
            Command::LongStory(_) => "long-story",
            Command::Ablate(_) => "ablate",
            Command::Dump(_) => "dump",
        }
    }

    pub fn out(&self) -> &Path {
        match self {
            Command::Train(a) => &a.out,
            Command::Cache(a) => &a.out,
            Command::Sample(a) => &a.out,
            Command::Story(a) | Command::LongStory(a) => &a.out,
            Command::Ablate(a) => &a.out,
            Command::Dump(a) => &a.out,
        }
    }

    fn set_out(&mut self, out: PathBuf) {
        match self {
            Command::Train(a) => a.out = out,
            Command::Cache(a) => a.out = out,
            Command::Sample(a) => a.out = out,
            Command::Story(a) | Command::LongStory(a) => a.out = out,
            Command::Ablate(a) => a.out = out,
            Command::Dump(a) => a.out = out,
        }
    }

    /// Rewrites input paths to absolute ones so the manifest replays anywhere.
    fn absolutize(&mut self) -> Result<()> {
        let abs = |p: &mut PathBuf| -> Result<()> {
            *p = absolute(p)?;
            Ok(())
        };
        match self {
            Command::Train(a) => a.config.as_mut().map(abs).transpose().map(|_| ()),
            Command::Cache(a) => abs(&mut a.checkpoint),
            Command::Sample(a) => abs(&mut a.checkpoint),
            Command::Story(a) | Command::LongStory(a) => {
                abs(&mut a.checkpoint)?;
                abs(&mut a.story)?;
                a.cache.as_mut().map(abs).transpose().map(|_| ())
            }
            Command::Ablate(a) => {
                abs(&mut a.checkpoint)?;
                abs(&mut a.story)
            }
            Command::Dump(a) => a.config.as_mut().map(abs).transpose().map(|_| ()),
        }
    }
}

// ---------------------------------------------------------------------------
// model loading

/// Checkpoint plus the schedule and world it was trained with.
pub struct LoadedModel {
    pub weights: ToyDenoiserWeights,
    pub vocab: PromptVocabulary,
    pub sched: NoiseSchedule,
    pub train: Option<TrainConfig>,
}

impl LoadedModel {
    pub fn load(path: &Path) -> Result<Self> {
        let ckpt = Checkpoint::load(path)?;
        let train: Option<TrainConfig> = match ckpt.metadata {
            Some(meta) => Some(
                serde_json::from_value(meta).map_err(|e| Error::format("checkpoint metadata", e.to_string()))?,
            ),
            None => None,
        };
        let steps = ckpt.weights.dims.timesteps;
        let params = train.as_ref().map_or(ScheduleParams::default_linear(), |t| t.schedule);
        let sched = NoiseSchedule::build(params, steps)?;
        Ok(Self {
            weights: ckpt.weights,
            vocab: ckpt.vocab,
            sched,
            train,
        })
    }

    pub fn context(&self) -> SamplingContext<'_> {
        SamplingContext {
            denoiser: &self.weights,
            sched: &self.sched,
            vocab: &self.vocab,
            tokens: self.weights.dims.tokens,
            channels: self.weights.dims.channels,
        }
    }

    /// The procedural world, available when the checkpoint records it.
    pub fn world(&self) -> Result<ToyWorld> {
        let cfg = self
            .train
            .as_ref()
            .ok_or_else(|| Error::config("checkpoint carries no training metadata; the world is unknown"))?;
        ToyWorld::from_config(cfg)
    }
}

// ---------------------------------------------------------------------------
// commands

/// Runs a command into its output directory and returns its manifest.
pub fn run(mut command: Command) -> Result<Manifest> {
    command.absolutize()?;
    match command.clone() {
        Command::Train(a) => cmd_train(a, command),
        Command::Cache(a) => cmd_cache(a, command),
        Command::Sample(a) => cmd_sample(a, command),
        Command::Story(a) => cmd_story(a, command, false),
        Command::LongStory(a) => cmd_story(a, command, true),
        Command::Ablate(a) => cmd_ablate(a, command),
        Command::Dump(a) => cmd_dump(a, command),
    }
}

fn cmd_train(a: TrainArgs, command: Command) -> Result<Manifest> {
    let cfg = match &a.config {
        Some(p) => load_train_config(p)?,
        None => TrainConfig::default(),
    };
    let mut dir = RunDir::create(&a.out)?;
    if let Some(p) = &a.config {
        dir.input(p)?;
    }
    let started = Instant::now();
    let (weights, vocab, log) = train_with_progress(&cfg, |_, _| {})?;
    let seconds = started.elapsed().as_secs_f64();
    let ckpt = Checkpoint {
        weights,
        vocab,
        metadata: Some(serde_json::to_value(&cfg).expect("config serializes")),
    };
    dir.write(CHECKPOINT_FILE, &ckpt.to_bytes())?;
    let mut csv = String::from("epoch,loss\n");
    for (e, l) in log.epoch_losses.iter().enumerate() {
        let _ = writeln!(csv, "{e},{l:.17e}");
    }
    dir.write("train_log.csv", csv.as_bytes())?;
    let details = serde_json::json!({
        "config": cfg,
        "initial_loss": log.initial_loss,
        "final_loss": log.final_loss(),
        "parameters": ckpt.weights.param_count(),
        "checkpoint_hash": ckpt.hash(),
        "wall_seconds": seconds,
    });
    dir.finish(command, details)
}

fn cmd_cache(a: CacheArgs, command: Command) -> Result<Manifest> {
    let model = LoadedModel::load(&a.checkpoint)?;
    let mut dir = RunDir::create(&a.out)?;
    dir.input(&a.checkpoint)?;
    let sampler = SamplerArgs {
        k_ratio: a.k_ratio,
        layers: a.layers.clone(),
        guidance: a.guidance,
        seed: a.seed,
        steps: a.steps,
        ..SamplerArgs::default()
    };
    let cfg = sampler.config(&model)?;
    let cache = story_cache(&a.identity, &model.context(), &cfg)?;
    dir.write(CACHE_FILE, &cache.to_bytes())?;
    let details = serde_json::json!({
        "entries": cache.entries().len(),
        "k_count": cache.k_count(),
        "tokens": cache.tokens(),
        "layer_mask": cache.layer_mask(),
        "cache_hash": cache.hash(),
        "schedule_fingerprint": cache.schedule_fingerprint(),
    });
    dir.finish(command, details)
}

fn per_scene_details(result: &StoryResult) -> serde_json::Value {
    let steps = result.config.steps;
    let scenes: Vec<_> = result
        .scene_logs
        .iter()
        .enumerate()
        .map(|(j, l)| {
            serde_json::json!({
                "scene": j,
                "seed": l.seed,
                "window": result.scene_window[j],
                "denoiser_calls": l.total_calls,
                "calls_per_step": l.calls_per_step(steps),
                "seconds": {
                    "zig": l.phase_seconds[0],
                    "zag": l.phase_seconds[1],
                    "generation": l.phase_seconds[2],
                    "plain": l.phase_seconds[3],
                },
            })
        })
        .collect();
    serde_json::json!({
        "sampler": result.config,
        "cache_hash": result.cache_hash,
        "windows": result.windows.iter().map(|w| [w.start, w.end]).collect::<Vec<_>>(),
        "scenes": scenes,
        "wall_seconds": result.wall_seconds(),
    })
}

fn step_csv(result: &StoryResult) -> String {
    let mut csv = String::from("scene,step,phase,calls,injected,latent_norm\n");
    for (j, log) in result.scene_logs.iter().enumerate() {
        for p in &log.phases {
            let phase = p.phase.map_or("plain", |p| p.as_str());
            let _ = writeln!(csv, "{j},{},{phase},{},{},{:.17e}", p.step, p.calls, p.injected, p.latent_norm);
        }
    }
    csv
}

fn cmd_sample(a: SampleArgs, command: Command) -> Result<Manifest> {
    let model = LoadedModel::load(&a.checkpoint)?;
    let mut dir = RunDir::create(&a.out)?;
    dir.input(&a.checkpoint)?;
    let cfg = a.sampler.config(&model)?;
    let ctx = model.context();
    let fp = fuse_prompts(&a.identity, std::slice::from_ref(&a.scene))?;
    let seed = scene_seed(cfg.seed, 0);
    let out = if cfg.variant.is_zigzag() {
        let cache = story_cache(&a.identity, &ctx, &cfg)?;
        sample_zigzag(&fp, Some(0), &cache, &ctx, &cfg, seed)?
    } else {
        sample_vanilla(&fp, Some(0), &ctx, &cfg.guidance, seed)?
    };
    let label = format!("{} | {}", a.identity.join(" "), a.scene.join(" "));
    dir.write("sample.grid", &grid_bytes(&out.image(), &label))?;
    let details = serde_json::json!({
        "sampler": cfg,
        "seed": seed,
        "denoiser_calls": out.log.total_calls,
        "calls_per_step": out.log.calls_per_step(cfg.steps),
    });
    dir.finish(command, details)
}

fn cmd_story(a: StoryArgs, command: Command, long: bool) -> Result<Manifest> {
    let model = LoadedModel::load(&a.checkpoint)?;
    let story = load_story(&a.story)?;
    let mut dir = RunDir::create(&a.out)?;
    dir.input(&a.checkpoint)?;
    dir.input(&a.story)?;
    let mut cfg = a.sampler.config(&model)?;
    if long {
        let w = a
            .window
            .ok_or_else(|| Error::Usage("long-story needs --window".into()))?;
        cfg.window = Some(w);
        cfg.stride = a.stride;
    } else if a.window.is_some() || a.stride.is_some() {
        return Err(Error::Usage("--window/--stride apply to long-story only".into()));
    }
    let cache = match &a.cache {
        Some(p) if cfg.variant.is_zigzag() => {
            dir.input(p)?;
            Some(IdentityTokenCache::load(p)?)
        }
        _ => None,
    };
    let ctx = model.context();
    let result = generate_story_with_cache(&story.identity, &story.scenes, &cfg, &ctx, cache)?;
    for (j, img) in result.images.iter().enumerate() {
        let label = format!("{} | {}", story.identity.join(" "), story.scenes[j].join(" "));
        dir.write(&format!("scene_{j:03}.grid"), &grid_bytes(img, &label))?;
    }
    dir.write("steps.csv", step_csv(&result).as_bytes())?;
    let mut details = per_scene_details(&result);
    if let Ok(world) = model.world() {
        let metrics = story_metrics(&world, &story, &result)?;
        let mut csv = String::from("scene,seed,predicted_scene,target_scene\n");
        for (j, row) in metrics.1.iter().enumerate() {
            let _ = writeln!(csv, "{j},{},{},{}", result.scene_logs[j].seed, row.0, row.1.map_or(-1, |s| s as i64));
        }
        dir.write("scenes.csv", csv.as_bytes())?;
        details["metrics"] = serde_json::to_value(&metrics.0).expect("metrics serialize");
    }
    dir.finish(command, details)
}

/// Scene id named in a scene prompt: its first scene word.
pub fn scene_label(world: &ToyWorld, scene: &[String]) -> Option<usize> {
    scene.iter().find_map(|t| world.scene_of_token(t))
}

type PerScene = Vec<(usize, Option<usize>)>;

fn story_metrics(
    world: &ToyWorld,
    story: &StoryFile,
    result: &StoryResult,
) -> Result<(Option<crate::metrics::StoryMetrics>, PerScene)> {
    let probe = train_probe(world, &ProbeConfig::default())?;
    let labels: Vec<Option<usize>> = story.scenes.iter().map(|s| scene_label(world, s)).collect();
    let predicted = result
        .images
        .iter()
        .map(|img| probe.predict(img.view()))
        .collect::<Result<Vec<_>>>()?;
    let per_scene = predicted.iter().copied().zip(labels.iter().copied()).collect();
    let metrics = match labels.iter().copied().collect::<Option<Vec<_>>>() {
        Some(ids) if result.images.len() >= 2 => {
            Some(evaluate_story(&result.images, &ids, &world.default_footprint(), &probe)?)
        }
        _ => None,
    };
    Ok((metrics, per_scene))
}

/// Runs every (variant or k, seed) pair and assembles the report.
pub fn run_ablation(
    model: &LoadedModel,
    story: &StoryFile,
    variants: &[Variant],
    seeds: &[u64],
    k_ratios: &[f64],
    base: &SamplerArgs,
) -> Result<AblationReport> {
    let world = model.world()?;
    let probe = train_probe(&world, &ProbeConfig::default())?;
    let scene_ids = story
        .scenes
        .iter()
        .map(|s| {
            scene_label(&world, s).ok_or_else(|| Error::config(format!("scene {:?} names no known scene", s.join(" "))))
        })
        .collect::<Result<Vec<_>>>()?;
    if variants.is_empty() || seeds.is_empty() {
        return Err(Error::config("ablation needs at least one variant and one seed"));
    }
    let ks: Vec<f64> = if k_ratios.is_empty() { vec![base.k_ratio] } else { k_ratios.to_vec() };
    let sweep = ks.len() > 1;
    let mut labels = Vec::new();
    let mut jobs = Vec::new();
    for &v in variants {
        for &k in &ks {
            let label = if sweep { format!("{v}@k={k}") } else { v.to_string() };
            labels.push(label.clone());
            for &seed in seeds {
                jobs.push((label.clone(), v, k, seed));
            }
        }
    }
    let footprint = world.default_footprint();
    let ctx = model.context();
    let results = jobs
        .par_iter()
        .map(|(label, v, k, seed)| {
            let args = SamplerArgs {
                variant: *v,
                k_ratio: *k,
                seed: *seed,
                ..base.clone()
            };
            let cfg = args.config(model)?;
            let r = generate_story_with_cache(&story.identity, &story.scenes, &cfg, &ctx, None)?;
            let metrics = evaluate_story(&r.images, &scene_ids, &footprint, &probe)?;
            Ok((label.clone(), SeedMetrics { seed: *seed, metrics }))
        })
        .collect::<Result<Vec<_>>>()?;
    let grouped: Vec<(String, Vec<SeedMetrics>)> = labels
        .into_iter()
        .map(|l| {
            let runs = results.iter().filter(|(x, _)| *x == l).map(|(_, m)| m.clone()).collect();
            (l, runs)
        })
        .collect();
    ablation_report(&grouped)
}

fn cmd_ablate(a: AblateArgs, command: Command) -> Result<Manifest> {
    let model = LoadedModel::load(&a.checkpoint)?;
    let story = load_story(&a.story)?;
    let mut dir = RunDir::create(&a.out)?;
    dir.input(&a.checkpoint)?;
    dir.input(&a.story)?;
    let started = Instant::now();
    let report = run_ablation(&model, &story, &a.variants, &a.seeds, &a.k_ratios, &a.sampler)?;
    dir.write("report.txt", report.to_text().as_bytes())?;
    let mut csv = String::from("variant,rank,consistency_mean,consistency_std,alignment_mean,alignment_std,combined_mean,combined_std\n");
    for r in &report.rows {
        let _ = writeln!(
            csv,
            "{},{},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e}",
            r.variant,
            r.rank,
            r.consistency.mean,
            r.consistency.std,
            r.alignment.mean,
            r.alignment.std,
            r.combined.mean,
            r.combined.std
        );
    }
    dir.write("report.csv", csv.as_bytes())?;
    let details = serde_json::json!({
        "ranking": report.rows.iter().map(|r| (&r.variant, r.rank)).collect::<Vec<_>>(),
        "wall_seconds": started.elapsed().as_secs_f64(),
    });
    dir.finish(command, details)
}

fn cmd_dump(a: DumpArgs, command: Command) -> Result<Manifest> {
    let cfg = match &a.config {
        Some(p) => load_train_config(p)?,
        None => TrainConfig::default(),
    };
    let world = ToyWorld::from_config(&cfg)?;
    let mut dir = RunDir::create(&a.out)?;
    if let Some(p) = &a.config {
        dir.input(p)?;
    }
    let mut index = String::from("file,identity_id,identity_word,scene_id,scene_word\n");
    for (spec, img) in render_catalog(&world)? {
        let name = format!("render_i{:02}_s{:02}.grid", spec.identity_id, spec.scene_id);
        let word = world.identity_word(world.word_of(spec.identity_id));
        let label = format!("identity {} ({word}) scene {}", spec.identity_id, world.scene_word(spec.scene_id));
        dir.write(&name, &grid_bytes(&img, &label))?;
        let _ = writeln!(index, "{name},{},{word},{},{}", spec.identity_id, spec.scene_id, world.scene_word(spec.scene_id));
    }
    dir.write("index.csv", index.as_bytes())?;
    let mask: String = world
        .default_footprint()
        .chunks(world.grid)
        .map(|row| row.iter().map(|&m| if m { '#' } else { '.' }).collect::<String>() + "\n")
        .collect();
    dir.write("footprint.txt", mask.as_bytes())?;
    dir.finish(command, serde_json::json!({ "renders": world.identity_count() * world.scene_count }))
}

// ---------------------------------------------------------------------------
// replay

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayReport {
    pub command: String,
    pub matched: Vec<String>,
    pub mismatched: Vec<String>,
    pub missing: Vec<String>,
    /// Inputs whose content changed since the original run.
    pub changed_inputs: Vec<String>,
}

impl ReplayReport {
    pub fn identical(&self) -> bool {
        self.mismatched.is_empty() && self.missing.is_empty() && self.changed_inputs.is_empty()
    }
}

/// Reruns the manifest's command into `out` and compares output hashes.
pub fn replay(manifest_path: &Path, out: &Path) -> Result<ReplayReport> {
    let manifest = Manifest::load(manifest_path)?;
    let mut changed_inputs = Vec::new();
    for (path, hash) in &manifest.inputs {
        if sha256_file(Path::new(path))? != *hash {
            changed_inputs.push(path.clone());
        }
    }
    let mut command = manifest.command.clone();
    command.set_out(out.to_path_buf());
    let fresh = run(command)?;
    let mut report = ReplayReport {
        command: manifest.command.name().to_string(),
        matched: Vec::new(),
        mismatched: Vec::new(),
        missing: Vec::new(),
        changed_inputs,
    };
    for (name, hash) in &manifest.outputs {
        match fresh.outputs.get(name) {
            Some(h) if h == hash => report.matched.push(name.clone()),
            Some(_) => report.mismatched.push(name.clone()),
            None => report.missing.push(name.clone()),
        }
    }
    Ok(report)
}

// ---------------------------------------------------------------------------
// verify

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub cases: usize,
    pub max_error: f64,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub checks: Vec<CheckResult>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for c in &self.checks {
            let _ = writeln!(
                out,
                "{} {:<22} cases={:<6} max_err={:.3e} {}",
                if c.passed { "PASS" } else { "FAIL" },
                c.name,
                c.cases,
                c.max_error,
                c.detail
            );
        }
        out
    }
}

fn random_schedule_pair(rng: &mut impl Rng) -> (f64, f64) {
    let a_prev = rng.gen_range(0.05..0.9999);
    let a_t = a_prev * rng.gen_range(0.05..0.9999);
    (a_t, a_prev)
}

fn check_round_trip(cases: usize, rng: &mut ChaCha8Rng) -> Result<CheckResult> {
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let (a_t, a_prev) = random_schedule_pair(rng);
        let sched = NoiseSchedule::from_alphas(ScheduleKind::ConstantTest, vec![1.0, a_prev, a_t])?;
        let n = rng.gen_range(1..16);
        let data = ndarray::Array3::from_shape_fn((1, n, 3), |_| rng.gen_range(-3.0..3.0));
        let eps = ndarray::Array3::from_elem((1, n, 3), rng.gen_range(-2.0..2.0));
        let x = LatentState::new(data, 2);
        let back = inverse_step(&denoise_step(&x, &eps, &sched)?, &eps, &sched)?;
        let num: f64 = x.data.iter().zip(&back.data).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let den: f64 = x.data.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-300);
        worst = worst.max(num / den);
    }
    Ok(CheckResult {
        name: "round_trip_inversion".into(),
        passed: worst < 1e-6,
        cases,
        max_error: worst,
        detail: "inverse_step(denoise_step(x)) vs x, relative".into(),
    })
}

fn tiny_transformer(rng: &mut ChaCha8Rng) -> Result<(ToyDenoiserWeights, PromptVocabulary)> {
    let dims = ModelDims {
        tokens: 16,
        channels: 2,
        model_dim: 8,
        heads: 2,
        ffn_dim: 16,
        text_dim: 4,
        layers: 2,
        timesteps: 10,
    };
    let w = ToyDenoiserWeights::init(dims, rng)?;
    let vocab = PromptVocabulary::new(
        vec!["a".into(), "cat".into(), "park".into()],
        vec![false, true, false],
        Array2::from_shape_fn((3, 4), |_| rng.gen_range(-1.0..1.0)),
        ndarray::Array1::from_shape_fn(4, |_| rng.gen_range(-1.0..1.0)),
    )?;
    Ok((w, vocab))
}

fn check_cfg_collapse(cases: usize, rng: &mut ChaCha8Rng) -> Result<CheckResult> {
    let (w, vocab) = tiny_transformer(rng)?;
    let fp = fuse_prompts(&["a".into(), "cat".into()], &[vec!["park".into()]])?;
    let cond = embed(&fp, Some(0), &vocab, 1.0, 0.3)?;
    let null = null_prompt(&vocab);
    let mut failures = 0;
    for _ in 0..cases {
        let t = rng.gen_range(1..=10);
        let x = LatentState::new(ndarray::Array3::from_shape_fn((1, 16, 2), |_| rng.gen_range(-2.0..2.0)), t);
        let rc = DenoiserRequest::new(&x, &cond);
        let rn = DenoiserRequest::new(&x, &null);
        let e_c = w.predict(&rc)?.eps;
        let e_n = w.predict(&rn)?.eps;
        let s0 = guided_eps(&w, &rc, &rn, 0.0)?;
        let s1 = guided_eps(&w, &rc, &rn, 1.0)?;
        let bitwise = |a: &ndarray::Array3<f64>, b: &ndarray::Array3<f64>| {
            a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
        };
        if !(bitwise(&s0, &e_n) && bitwise(&s1, &e_c) && bitwise(&combine_guidance(&e_c, &e_n, 0.0), &e_n)) {
            failures += 1;
        }
    }
    Ok(CheckResult {
        name: "cfg_collapse".into(),
        passed: failures == 0,
        cases,
        max_error: failures as f64,
        detail: "s=0 -> null branch, s=1 -> conditional branch, bitwise".into(),
    })
}

fn check_top_k(cases: usize, rng: &mut ChaCha8Rng) -> Result<CheckResult> {
    let mut failures = 0;
    for _ in 0..cases {
        let n = rng.gen_range(1..=256);
        let levels = rng.gen_range(1..=8);
        let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0..levels) as f64 / levels as f64).collect();
        let k = [0.2, 0.4, 0.6, 0.8][rng.gen_range(0..4)];
        let got = top_k_select(&scores, k);
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        let mut want = order[..crate::cache::k_count(k, n)].to_vec();
        want.sort_unstable();
        if got != want {
            failures += 1;
        }
    }
    Ok(CheckResult {
        name: "top_k_oracle".into(),
        passed: failures == 0,
        cases,
        max_error: failures as f64,
        detail: "top_k_select vs full-sort oracle with ties".into(),
    })
}

fn check_attention(cases: usize, rng: &mut ChaCha8Rng) -> Result<CheckResult> {
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let n = rng.gen_range(1..12);
        let m = rng.gen_range(1..12);
        let heads = rng.gen_range(1..3);
        let d = heads * rng.gen_range(1..4);
        let q = Array2::from_shape_fn((n, d), |_| rng.gen_range(-3.0..3.0));
        let k = Array2::from_shape_fn((m, d), |_| rng.gen_range(-3.0..3.0));
        let v = Array2::from_shape_fn((m, d), |_| rng.gen_range(-3.0..3.0));
        let (_, probs) = attend(q.view(), k.view(), v.view(), heads);
        for p in probs {
            for row in p.rows() {
                worst = worst.max((row.sum() - 1.0).abs());
                if row.iter().any(|&x| x < 0.0) {
                    worst = f64::INFINITY;
                }
            }
        }
        let mut raw = Array2::from_shape_fn((n, m), |_| rng.gen_range(-50.0..50.0));
        softmax_rows(&mut raw);
        for row in raw.rows() {
            worst = worst.max((row.sum() - 1.0).abs());
        }
    }
    Ok(CheckResult {
        name: "attention_normalised".into(),
        passed: worst < 1e-12,
        cases,
        max_error: worst,
        detail: "attention rows sum to 1".into(),
    })
}

fn check_schedule(fault: Option<Fault>) -> CheckResult {
    let candidates: Vec<std::result::Result<NoiseSchedule, Error>> = match fault {
        Some(Fault::IncreasingAlpha) => vec![NoiseSchedule::from_alphas(ScheduleKind::LinearBeta, vec![1.0, 0.5, 0.7])],
        None => vec![
            NoiseSchedule::build(ScheduleParams::default_linear(), 50),
            NoiseSchedule::build(ScheduleParams::Cosine { offset: 0.008 }, 50),
            NoiseSchedule::build(ScheduleParams::ConstantTest { value: 0.9 }, 20),
        ],
    };
    let errors: Vec<String> = candidates
        .into_iter()
        .filter_map(|r| r.err().map(|e| e.to_string()))
        .collect();
    CheckResult {
        name: "schedule_construction".into(),
        passed: errors.is_empty(),
        cases: 1,
        max_error: errors.len() as f64,
        detail: if errors.is_empty() {
            "alpha_0 = 1, strictly decreasing, in (0, 1]".into()
        } else {
            errors.join("; ")
        },
    }
}

/// Randomised run of the algebraic invariants.
pub fn cmd_verify(a: &VerifyArgs) -> Result<VerifyReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let cases = a.cases.max(1);
    Ok(VerifyReport {
        checks: vec![
            check_schedule(a.fault),
            check_round_trip(cases, &mut rng)?,
            check_cfg_collapse(cases, &mut rng)?,
            check_top_k(cases, &mut rng)?,
            check_attention(cases, &mut rng)?,
        ],
    })
}
