//! Vanilla DDIM sampling, the zigzag loop with its ablation variants, and
//! story / long-story generation.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Instant;

use ndarray::{Array2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cache::{build_cache, gaussian_latent, CacheOptions, IdentityTokenCache, SelectionMode};
use crate::denoiser::{guided_eps, Denoiser, DenoiserRequest, DenoiserResponse};
use crate::error::{Error, Result};
use crate::prompt::{
    embed, fuse_prompts, null_prompt, phase_prompt, FusedPrompt, GuidanceConfig, Phase, PromptEmbedding,
    PromptVocabulary,
};
use crate::schedule::{denoise_step, inverse_step, LatentState, NoiseSchedule};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Vanilla,
    AzsAsymmetric,
    ZigGenSymmetric,
    ZigZagSymmetric,
    AllSymmetric,
    SymmetricPrompt,
}

/// Which phases receive identity KV injection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InjectionMask {
    pub zig: bool,
    pub zag: bool,
    pub generation: bool,
}

impl InjectionMask {
    pub fn get(&self, phase: Phase) -> bool {
        match phase {
            Phase::Zig => self.zig,
            Phase::Zag => self.zag,
            Phase::Generation => self.generation,
        }
    }
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Vanilla,
        Variant::AzsAsymmetric,
        Variant::ZigGenSymmetric,
        Variant::ZigZagSymmetric,
        Variant::AllSymmetric,
        Variant::SymmetricPrompt,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Vanilla => "vanilla",
            Variant::AzsAsymmetric => "azs_asymmetric",
            Variant::ZigGenSymmetric => "zig_gen_symmetric",
            Variant::ZigZagSymmetric => "zig_zag_symmetric",
            Variant::AllSymmetric => "all_symmetric",
            Variant::SymmetricPrompt => "symmetric_prompt",
        }
    }

    pub fn injection_mask(self) -> InjectionMask {
        let (zig, zag, generation) = match self {
            Variant::Vanilla => (false, false, false),
            Variant::AzsAsymmetric | Variant::SymmetricPrompt => (true, false, false),
            Variant::ZigGenSymmetric => (true, false, true),
            Variant::ZigZagSymmetric => (true, true, false),
            Variant::AllSymmetric => (true, true, true),
        };
        InjectionMask { zig, zag, generation }
    }

    pub fn is_zigzag(self) -> bool {
        self != Variant::Vanilla
    }

    /// Whether the zag phase uses the text prompt instead of the null prompt.
    pub fn prompted_zag(self) -> bool {
        self == Variant::SymmetricPrompt
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('-', "_");
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == norm || (norm == "azs" && *v == Variant::AzsAsymmetric))
            .ok_or_else(|| Error::config(format!("unknown variant {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub steps: usize,
    pub variant: Variant,
    pub guidance: GuidanceConfig,
    pub k_ratio: f64,
    pub seed: u64,
    /// Sliding-window size for long stories.
    pub window: Option<usize>,
    /// Window stride; defaults to the window size.
    pub stride: Option<usize>,
    /// Fraction of the timesteps (from `T` downward) that run the zigzag
    /// triple; the rest are plain guided steps.
    pub zigzag_fraction: f64,
    /// Layers that receive injection; empty means all.
    pub layer_mask: Vec<usize>,
    pub selection: SelectionMode,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: crate::schedule::DEFAULT_STEPS,
            variant: Variant::AzsAsymmetric,
            guidance: GuidanceConfig::default(),
            k_ratio: 0.2,
            seed: 0,
            window: None,
            stride: None,
            zigzag_fraction: 1.0,
            layer_mask: Vec::new(),
            selection: SelectionMode::PerLayer,
        }
    }
}

impl SamplerConfig {
    pub fn injection_mask(&self) -> InjectionMask {
        self.variant.injection_mask()
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::config("step count must be positive"));
        }
        if !(self.k_ratio > 0.0 && self.k_ratio <= 1.0) {
            return Err(Error::config(format!("k_ratio must lie in (0, 1], got {}", self.k_ratio)));
        }
        if !(0.0..=1.0).contains(&self.zigzag_fraction) {
            return Err(Error::config("zigzag fraction must lie in [0, 1]"));
        }
        let g = &self.guidance;
        if !(g.s_main.is_finite() && g.s_zag.is_finite()) {
            return Err(Error::config("guidance scales must be finite"));
        }
        if !(g.w_active >= g.w_inactive && g.w_inactive >= 0.0) {
            return Err(Error::config("need w_active >= w_inactive >= 0"));
        }
        Ok(())
    }

    /// Number of leading timesteps that run the zigzag triple.
    pub fn zigzag_steps(&self) -> usize {
        ((self.zigzag_fraction * self.steps as f64) - 1e-9).ceil().max(0.0).min(self.steps as f64) as usize
    }

    fn cache_options(&self) -> CacheOptions {
        CacheOptions {
            k_ratio: self.k_ratio,
            layer_mask: self.layer_mask.clone(),
            selection: self.selection.clone(),
            guidance: self.guidance,
            seed: derive_seed(self.seed, CACHE_STREAM),
        }
    }
}

const CACHE_STREAM: u64 = 1 << 40;

/// Independent per-stream seed (splitmix64 finaliser over `base` and `stream`).
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base ^ stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Everything a sampler needs besides the per-run configuration.
#[derive(Clone, Copy)]
pub struct SamplingContext<'a> {
    pub denoiser: &'a dyn Denoiser,
    pub sched: &'a NoiseSchedule,
    pub vocab: &'a PromptVocabulary,
    pub tokens: usize,
    pub channels: usize,
}

/// One sub-step of the sampling loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseLog {
    /// Timestep of the zigzag iteration (`t` in `t -> t-1`).
    pub step: usize,
    /// `None` for plain vanilla steps.
    pub phase: Option<Phase>,
    pub calls: usize,
    pub injected: bool,
    pub latent_norm: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SceneLog {
    pub seed: u64,
    pub phases: Vec<PhaseLog>,
    pub total_calls: usize,
    /// Wall-clock per phase in seconds: zig, zag, generation, vanilla.
    pub phase_seconds: [f64; 4],
    pub final_timestep: usize,
}

impl SceneLog {
    pub fn calls_per_step(&self, steps: usize) -> f64 {
        self.total_calls as f64 / steps as f64
    }
}

#[derive(Debug, Clone)]
pub struct SampleOutput {
    pub latent: LatentState,
    pub log: SceneLog,
}

impl SampleOutput {
    /// Final `x_0` as `[tokens, channels]`.
    pub fn image(&self) -> Array2<f64> {
        self.latent.data.index_axis(Axis(0), 0).to_owned()
    }
}

/// Counts predictions and whether each one carried an injection.
struct Counting<'a> {
    inner: &'a dyn Denoiser,
    calls: AtomicUsize,
    injected: AtomicUsize,
}

impl<'a> Counting<'a> {
    fn new(inner: &'a dyn Denoiser) -> Self {
        Self {
            inner,
            calls: AtomicUsize::new(0),
            injected: AtomicUsize::new(0),
        }
    }

    fn take(&self) -> (usize, usize) {
        (self.calls.swap(0, Ordering::Relaxed), self.injected.swap(0, Ordering::Relaxed))
    }
}

impl Denoiser for Counting<'_> {
    fn predict(&self, req: &DenoiserRequest<'_>) -> Result<DenoiserResponse> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        if req.injection.is_some() {
            self.injected.fetch_add(1, Ordering::Relaxed);
        }
        self.inner.predict(req)
    }

    fn layer_count(&self) -> usize {
        self.inner.layer_count()
    }
}

fn norm(x: &LatentState) -> f64 {
    x.data.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn check_finite(x: &LatentState) -> Result<()> {
    if x.is_finite() {
        Ok(())
    } else {
        Err(Error::numeric(format!("non-finite latent at timestep {}", x.timestep)))
    }
}

struct Recorder<'a> {
    counter: Counting<'a>,
    log: SceneLog,
}

impl<'a> Recorder<'a> {
    fn new(denoiser: &'a dyn Denoiser, seed: u64) -> Self {
        Self {
            counter: Counting::new(denoiser),
            log: SceneLog {
                seed,
                ..SceneLog::default()
            },
        }
    }

    /// Guided prediction; injection goes to both CFG branches.
    fn eps(
        &self,
        x: &LatentState,
        prompt: &PromptEmbedding,
        null: &PromptEmbedding,
        scale: f64,
        injection: Option<&IdentityTokenCache>,
        key: usize,
    ) -> Result<ndarray::Array3<f64>> {
        let slice = injection.map(|c| c.slice(key));
        let cond = DenoiserRequest::new(x, prompt).with_injection(slice);
        let uncond = DenoiserRequest::new(x, null).with_injection(slice);
        guided_eps(&self.counter, &cond, &uncond, scale)
    }

    fn record(&mut self, step: usize, phase: Option<Phase>, x: &LatentState, started: Instant) -> Result<()> {
        check_finite(x)?;
        let (calls, injected) = self.counter.take();
        let slot = phase.map_or(3, |p| p as usize);
        self.log.phase_seconds[slot] += started.elapsed().as_secs_f64();
        self.log.total_calls += calls;
        self.log.phases.push(PhaseLog {
            step,
            phase,
            calls,
            injected: injected > 0,
            latent_norm: norm(x),
        });
        Ok(())
    }

    fn finish(mut self, x: LatentState) -> SampleOutput {
        self.log.final_timestep = x.timestep;
        SampleOutput { latent: x, log: self.log }
    }
}

fn initial_latent(ctx: &SamplingContext<'_>, seed: u64) -> LatentState {
    gaussian_latent(seed, ctx.tokens, ctx.channels, ctx.sched.num_steps())
}

/// Plain guided DDIM from `x_T ~ N(0, I)` drawn with `seed`.
pub fn sample_vanilla(
    fp: &FusedPrompt,
    scene: Option<usize>,
    ctx: &SamplingContext<'_>,
    guidance: &GuidanceConfig,
    seed: u64,
) -> Result<SampleOutput> {
    let prompt = embed(fp, scene, ctx.vocab, guidance.w_active, guidance.w_inactive)?;
    let null = null_prompt(ctx.vocab);
    let mut rec = Recorder::new(ctx.denoiser, seed);
    let mut x = initial_latent(ctx, seed);
    for t in (1..=ctx.sched.num_steps()).rev() {
        let started = Instant::now();
        let eps = rec.eps(&x, &prompt, &null, guidance.s_main, None, t)?;
        x = denoise_step(&x, &eps, ctx.sched)?;
        rec.record(t, None, &x, started)?;
    }
    Ok(rec.finish(x))
}

/// The zigzag loop: per timestep, zig (`t -> t-1`), zag (`t-1 -> t`) and
/// generation (`t -> t-1`). Injection at step `t` uses cache entry `(l, t)`
/// in every phase.
pub fn sample_zigzag(
    fp: &FusedPrompt,
    scene: Option<usize>,
    cache: &IdentityTokenCache,
    ctx: &SamplingContext<'_>,
    cfg: &SamplerConfig,
    seed: u64,
) -> Result<SampleOutput> {
    cfg.validate()?;
    if !cfg.variant.is_zigzag() {
        return Err(Error::config("sample_zigzag needs a zigzag variant, not vanilla"));
    }
    if cfg.steps != ctx.sched.num_steps() {
        return Err(Error::config(format!(
            "sampler configured for T = {} but the schedule has T = {}",
            cfg.steps,
            ctx.sched.num_steps()
        )));
    }
    cache.check_schedule(ctx.sched)?;
    let cache = if cfg.layer_mask.is_empty() {
        cache.clone()
    } else {
        cache.clone().with_layer_mask(&cfg.layer_mask)?
    };
    let mask = cfg.injection_mask();
    let g = &cfg.guidance;
    let null = null_prompt(ctx.vocab);
    let (zig_prompt, zig_s) = phase_prompt(fp, scene, Phase::Zig, ctx.vocab, g)?;
    let (zag_prompt, zag_s) = if cfg.variant.prompted_zag() {
        (embed(fp, scene, ctx.vocab, g.w_active, g.w_inactive)?, g.s_main)
    } else {
        phase_prompt(fp, scene, Phase::Zag, ctx.vocab, g)?
    };
    let (gen_prompt, gen_s) = phase_prompt(fp, scene, Phase::Generation, ctx.vocab, g)?;
    let inject = |phase: Phase| mask.get(phase).then_some(&cache);

    let zigzag_floor = cfg.steps - cfg.zigzag_steps();
    let mut rec = Recorder::new(ctx.denoiser, seed);
    let mut x = initial_latent(ctx, seed);
    for t in (1..=cfg.steps).rev() {
        if t <= zigzag_floor {
            let started = Instant::now();
            let eps = rec.eps(&x, &gen_prompt, &null, gen_s, None, t)?;
            x = denoise_step(&x, &eps, ctx.sched)?;
            rec.record(t, None, &x, started)?;
            continue;
        }
        let started = Instant::now();
        let eps = rec.eps(&x, &zig_prompt, &null, zig_s, inject(Phase::Zig), t)?;
        let x_prev = denoise_step(&x, &eps, ctx.sched)?;
        rec.record(t, Some(Phase::Zig), &x_prev, started)?;

        let started = Instant::now();
        let eps = rec.eps(&x_prev, &zag_prompt, &null, zag_s, inject(Phase::Zag), t)?;
        let x_tilde = inverse_step(&x_prev, &eps, ctx.sched)?;
        rec.record(t, Some(Phase::Zag), &x_tilde, started)?;

        let started = Instant::now();
        let eps = rec.eps(&x_tilde, &gen_prompt, &null, gen_s, inject(Phase::Generation), t)?;
        x = denoise_step(&x_tilde, &eps, ctx.sched)?;
        rec.record(t, Some(Phase::Generation), &x, started)?;
    }
    Ok(rec.finish(x))
}

/// Output of a story run.
#[derive(Debug, Clone)]
pub struct StoryResult {
    pub images: Vec<Array2<f64>>,
    pub scene_logs: Vec<SceneLog>,
    pub config: SamplerConfig,
    /// Content hash of the identity cache; `None` for vanilla.
    pub cache_hash: Option<String>,
    /// Windows of scene indices (one window for a plain story).
    pub windows: Vec<Range<usize>>,
    /// Window in which each scene was generated.
    pub scene_window: Vec<usize>,
}

impl StoryResult {
    pub fn scene_seeds(&self) -> Vec<u64> {
        self.scene_logs.iter().map(|l| l.seed).collect()
    }

    pub fn wall_seconds(&self) -> f64 {
        self.scene_logs.iter().flat_map(|l| l.phase_seconds).sum()
    }
}

/// Seed of scene `j` in a story sampled with base seed `seed`.
pub fn scene_seed(seed: u64, j: usize) -> u64 {
    derive_seed(seed, j as u64)
}

fn identity_only(identity: &[String]) -> Result<FusedPrompt> {
    FusedPrompt::identity_only(identity)
}

/// Builds the identity cache a story run with `cfg` would use.
pub fn story_cache(identity: &[String], ctx: &SamplingContext<'_>, cfg: &SamplerConfig) -> Result<IdentityTokenCache> {
    build_cache(
        &identity_only(identity)?,
        ctx.denoiser,
        ctx.vocab,
        ctx.sched,
        ctx.tokens,
        ctx.channels,
        &cfg.cache_options(),
    )
}

/// `windows[w]` covers scenes `start..start + W`; the last window is aligned
/// to the end so every scene is covered.
pub fn window_ranges(scene_count: usize, window: usize, stride: usize) -> Result<Vec<Range<usize>>> {
    if window == 0 || stride == 0 {
        return Err(Error::config("window and stride must be positive"));
    }
    if window > scene_count {
        return Err(Error::config(format!(
            "window {window} larger than the {scene_count} scenes"
        )));
    }
    if stride > window {
        return Err(Error::config(format!(
            "stride {stride} larger than window {window} would skip scenes"
        )));
    }
    let mut out = Vec::new();
    let mut start = 0;
    while start + window <= scene_count {
        out.push(start..start + window);
        start += stride;
    }
    if out.last().is_none_or(|r| r.end < scene_count) {
        out.push(scene_count - window..scene_count);
    }
    Ok(out)
}

/// First window containing each scene.
pub fn assign_windows(scene_count: usize, windows: &[Range<usize>]) -> Vec<usize> {
    (0..scene_count)
        .map(|j| windows.iter().position(|w| w.contains(&j)).expect("windows cover all scenes"))
        .collect()
}

/// One story: the cache and the fused prompt are built once and shared by
/// every scene. Vanilla stories use one plain prompt per scene.
pub fn generate_story(
    identity: &[String],
    scenes: &[Vec<String>],
    cfg: &SamplerConfig,
    ctx: &SamplingContext<'_>,
) -> Result<StoryResult> {
    let n = scenes.len();
    generate_windows(identity, scenes, cfg, ctx, std::iter::once(0..n).collect(), None)
}

/// [`generate_story`] with a cache built beforehand, e.g. loaded from disk.
pub fn generate_story_with_cache(
    identity: &[String],
    scenes: &[Vec<String>],
    cfg: &SamplerConfig,
    ctx: &SamplingContext<'_>,
    cache: Option<IdentityTokenCache>,
) -> Result<StoryResult> {
    let windows = match cfg.window {
        Some(w) => window_ranges(scenes.len(), w, cfg.stride.unwrap_or(w))?,
        None => std::iter::once(0..scenes.len()).collect(),
    };
    generate_windows(identity, scenes, cfg, ctx, windows, cache)
}

/// Sliding-window story: scene prompts are fused per window of `W`
/// consecutive scenes with one identity cache shared across windows.
pub fn generate_long_story(
    identity: &[String],
    scenes: &[Vec<String>],
    window: usize,
    stride: Option<usize>,
    cfg: &SamplerConfig,
    ctx: &SamplingContext<'_>,
) -> Result<StoryResult> {
    let windows = window_ranges(scenes.len(), window, stride.unwrap_or(window))?;
    generate_windows(identity, scenes, cfg, ctx, windows, None)
}

fn generate_windows(
    identity: &[String],
    scenes: &[Vec<String>],
    cfg: &SamplerConfig,
    ctx: &SamplingContext<'_>,
    windows: Vec<Range<usize>>,
    prebuilt: Option<IdentityTokenCache>,
) -> Result<StoryResult> {
    cfg.validate()?;
    if scenes.is_empty() {
        return Err(Error::config("a story needs at least one scene"));
    }
    let scene_window = assign_windows(scenes.len(), &windows);
    let cache = match (cfg.variant.is_zigzag(), prebuilt) {
        (false, _) => None,
        (true, Some(c)) => {
            if c.identity_prompt() != identity.join(" ") {
                return Err(Error::config(format!(
                    "cache was built for identity {:?}, story uses {:?}",
                    c.identity_prompt(),
                    identity.join(" ")
                )));
            }
            Some(c)
        }
        (true, None) => Some(story_cache(identity, ctx, cfg)?),
    };
    let fused = windows
        .iter()
        .map(|w| fuse_prompts(identity, &scenes[w.clone()]))
        .collect::<Result<Vec<_>>>()?;

    let outputs = (0..scenes.len())
        .into_par_iter()
        .map(|j| {
            let seed = scene_seed(cfg.seed, j);
            match &cache {
                Some(cache) => {
                    let w = scene_window[j];
                    let local = j - windows[w].start;
                    sample_zigzag(&fused[w], Some(local), cache, ctx, cfg, seed)
                }
                None => {
                    let plain = fuse_prompts(identity, std::slice::from_ref(&scenes[j]))?;
                    sample_vanilla(&plain, Some(0), ctx, &cfg.guidance, seed)
                }
            }
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(StoryResult {
        images: outputs.iter().map(SampleOutput::image).collect(),
        scene_logs: outputs.into_iter().map(|o| o.log).collect(),
        config: cfg.clone(),
        cache_hash: cache.as_ref().map(IdentityTokenCache::hash),
        windows,
        scene_window,
    })
}
