//! Procedural story world and the denoiser training loop.
//!
//! Every image is an 8x8 grid of 4-channel tokens: a background keyed by the
//! scene and a 4x4 glyph keyed by the identity. An identity word in the
//! vocabulary names a *family* of glyph variants, so a prompt such as
//! `a cat park` leaves the exact glyph unspecified; that ambiguity is what
//! makes subject consistency across a story non-trivial.

use ndarray::{Array1, Array2, Array3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::denoiser::{ForwardTape, ModelDims, ToyDenoiserWeights, WeightGrads};
use crate::error::{Error, Result};
use crate::prompt::{embed, fuse_prompts, null_prompt, FusedPrompt, PromptEmbedding, PromptVocabulary};
use crate::schedule::{NoiseSchedule, ScheduleParams};

pub const IDENTITY_WORDS: [&str; 8] = ["cat", "fox", "owl", "bear", "frog", "duck", "wolf", "hare"];
pub const SCENE_WORDS: [&str; 12] = [
    "park", "beach", "forest", "city", "snow", "desert", "cave", "field", "river", "space", "market", "garden",
];
pub const FILLER_WORDS: [&str; 1] = ["a"];

/// Which glyph, which background, and where the glyph sits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub identity_id: usize,
    pub scene_id: usize,
    /// `(row, col)` of the glyph's top-left cell.
    pub placement: (usize, usize),
}

/// Fixed procedural content: glyph patterns and background patterns.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyWorld {
    pub grid: usize,
    pub channels: usize,
    pub glyph_size: usize,
    pub identity_words: usize,
    pub variants_per_identity: usize,
    pub scene_count: usize,
    glyphs: Vec<Array2<f64>>,
    backgrounds: Vec<Array2<f64>>,
}

impl ToyWorld {
    pub fn new(
        grid: usize,
        channels: usize,
        identity_words: usize,
        variants_per_identity: usize,
        scene_count: usize,
        world_seed: u64,
    ) -> Result<Self> {
        let glyph_size = grid / 2;
        if grid < 2 || channels == 0 || variants_per_identity == 0 {
            return Err(Error::config("world needs grid >= 2, channels >= 1, variants >= 1"));
        }
        if identity_words < 2 || identity_words > IDENTITY_WORDS.len() {
            return Err(Error::config(format!(
                "identity count must be in 2..={}",
                IDENTITY_WORDS.len()
            )));
        }
        if scene_count < 2 || scene_count > SCENE_WORDS.len() {
            return Err(Error::config(format!("scene count must be in 2..={}", SCENE_WORDS.len())));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(world_seed);
        let cells = glyph_size * glyph_size;
        let glyphs = (0..identity_words * variants_per_identity)
            .map(|_| {
                Array2::from_shape_simple_fn((cells, channels), || {
                    let mag = rng.gen_range(0.35..0.95);
                    if rng.gen_bool(0.5) {
                        mag
                    } else {
                        -mag
                    }
                })
            })
            .collect();
        let tokens = grid * grid;
        let backgrounds = (0..scene_count)
            .map(|s| {
                let base: Vec<f64> = (0..channels).map(|_| rng.gen_range(-0.5..0.5)).collect();
                let phase: Vec<f64> = (0..channels).map(|_| rng.gen_range(0.0..1.0)).collect();
                let freq = 1.0 + (s % 3) as f64;
                let vertical = s % 2 == 0;
                Array2::from_shape_fn((tokens, channels), |(i, c)| {
                    let (r, col) = (i / grid, i % grid);
                    let u = if vertical { r } else { col } as f64 / grid as f64;
                    let wave = (std::f64::consts::TAU * (freq * u + phase[c])).sin();
                    (base[c] + 0.35 * wave).clamp(-1.0, 1.0)
                })
            })
            .collect();
        Ok(Self {
            grid,
            channels,
            glyph_size,
            identity_words,
            variants_per_identity,
            scene_count,
            glyphs,
            backgrounds,
        })
    }

    pub fn from_config(cfg: &TrainConfig) -> Result<Self> {
        Self::new(
            cfg.grid,
            cfg.channels,
            cfg.identity_count,
            cfg.variants_per_identity,
            cfg.scene_count,
            cfg.world_seed,
        )
    }

    pub fn tokens(&self) -> usize {
        self.grid * self.grid
    }

    pub fn identity_count(&self) -> usize {
        self.glyphs.len()
    }

    /// Glyph placement used throughout the story benchmark.
    pub fn default_placement(&self) -> (usize, usize) {
        let off = (self.grid - self.glyph_size) / 2;
        (off, off)
    }

    pub fn identity_id(&self, word: usize, variant: usize) -> usize {
        word * self.variants_per_identity + variant
    }

    pub fn word_of(&self, identity_id: usize) -> usize {
        identity_id / self.variants_per_identity
    }

    /// Boolean token mask of the glyph footprint at `placement`.
    pub fn footprint(&self, placement: (usize, usize)) -> Result<Vec<bool>> {
        let (r0, c0) = placement;
        if r0 + self.glyph_size > self.grid || c0 + self.glyph_size > self.grid {
            return Err(Error::config(format!(
                "glyph at {placement:?} does not fit a {0}x{0} grid",
                self.grid
            )));
        }
        let mut mask = vec![false; self.tokens()];
        for r in r0..r0 + self.glyph_size {
            for c in c0..c0 + self.glyph_size {
                mask[r * self.grid + c] = true;
            }
        }
        Ok(mask)
    }

    pub fn default_footprint(&self) -> Vec<bool> {
        self.footprint(self.default_placement()).expect("default placement fits")
    }

    /// Clean latent `[tokens, channels]` with values in `[-1, 1]`.
    pub fn render_scene(&self, spec: &SceneSpec) -> Result<Array2<f64>> {
        if spec.identity_id >= self.glyphs.len() {
            return Err(Error::config(format!("unknown identity {}", spec.identity_id)));
        }
        if spec.scene_id >= self.backgrounds.len() {
            return Err(Error::config(format!("unknown scene {}", spec.scene_id)));
        }
        let mask = self.footprint(spec.placement)?;
        let mut img = self.backgrounds[spec.scene_id].clone();
        let glyph = &self.glyphs[spec.identity_id];
        let (r0, c0) = spec.placement;
        for (tok, _) in mask.iter().enumerate().filter(|(_, m)| **m) {
            let (r, c) = (tok / self.grid - r0, tok % self.grid - c0);
            img.row_mut(tok).assign(&glyph.row(r * self.glyph_size + c));
        }
        Ok(img)
    }

    pub fn identity_word(&self, word: usize) -> &'static str {
        IDENTITY_WORDS[word]
    }

    pub fn scene_word(&self, scene: usize) -> &'static str {
        SCENE_WORDS[scene]
    }

    /// Scene id named by a vocabulary token.
    pub fn scene_of_token(&self, token: &str) -> Option<usize> {
        SCENE_WORDS[..self.scene_count].iter().position(|w| *w == token)
    }

    /// Vocabulary with random embeddings: filler, identity words, scene words.
    pub fn vocabulary(&self, text_dim: usize, rng: &mut impl Rng) -> Result<PromptVocabulary> {
        let mut tokens = Vec::new();
        let mut subject = Vec::new();
        for w in FILLER_WORDS {
            tokens.push(w.to_string());
            subject.push(false);
        }
        for w in &IDENTITY_WORDS[..self.identity_words] {
            tokens.push(w.to_string());
            subject.push(true);
        }
        for w in &SCENE_WORDS[..self.scene_count] {
            tokens.push(w.to_string());
            subject.push(false);
        }
        let emb = Array2::from_shape_simple_fn((tokens.len(), text_dim), || StandardNormal.sample(rng));
        let null = Array1::from_shape_simple_fn(text_dim, || StandardNormal.sample(rng));
        PromptVocabulary::new(tokens, subject, emb, null)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Cosine-decay the learning rate to this fraction of its start value.
    pub final_lr_fraction: f64,
    pub grid: usize,
    pub channels: usize,
    pub identity_count: usize,
    pub variants_per_identity: usize,
    pub scene_count: usize,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    pub world_seed: u64,
    pub layers: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub text_dim: usize,
    pub steps: usize,
    pub schedule: ScheduleParams,
    /// Probability of training on the null prompt.
    pub p_uncond: f64,
    /// Probability of an identity-only prompt.
    pub p_identity_only: f64,
    /// Probability of a single-scene prompt; the remainder are fused prompts.
    pub p_single_scene: f64,
    pub max_fused_scenes: usize,
    pub w_inactive: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            steps_per_epoch: 25,
            batch_size: 16,
            learning_rate: 2e-3,
            final_lr_fraction: 0.1,
            grid: 8,
            channels: 4,
            identity_count: 2,
            variants_per_identity: 3,
            scene_count: 6,
            optimizer: OptimizerKind::adam(),
            seed: 7,
            world_seed: 2024,
            layers: 4,
            model_dim: 32,
            heads: 1,
            ffn_dim: 64,
            text_dim: 32,
            steps: crate::schedule::DEFAULT_STEPS,
            schedule: ScheduleParams::default_linear(),
            p_uncond: 0.1,
            p_identity_only: 0.15,
            p_single_scene: 0.25,
            max_fused_scenes: 4,
            w_inactive: 0.3,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("epochs", self.epochs),
            ("steps_per_epoch", self.steps_per_epoch),
            ("batch_size", self.batch_size),
            ("grid", self.grid),
            ("channels", self.channels),
            ("steps", self.steps),
            ("layers", self.layers),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("{name} must be positive")));
        }
        if self.identity_count < 2 {
            return Err(Error::config("identity count must be at least 2"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning rate must be finite and >= 0"));
        }
        let p = self.p_uncond + self.p_identity_only + self.p_single_scene;
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::config("prompt-kind probabilities must sum to at most 1"));
        }
        if self.max_fused_scenes < 2 && p < 1.0 {
            return Err(Error::config("fused prompts need max_fused_scenes >= 2"));
        }
        self.model_dims().validate()
    }

    pub fn model_dims(&self) -> ModelDims {
        ModelDims {
            tokens: self.grid * self.grid,
            channels: self.channels,
            model_dim: self.model_dim,
            heads: self.heads,
            ffn_dim: self.ffn_dim,
            text_dim: self.text_dim,
            layers: self.layers,
            timesteps: self.steps,
        }
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::build(self.schedule, self.steps)
    }
}

/// One training example: clean latent plus its conditioning.
#[derive(Debug, Clone)]
pub struct TrainItem {
    pub x0: Array2<f64>,
    pub prompt: PromptEmbedding,
}

/// Timestep and noise for one item.
#[derive(Debug, Clone)]
pub struct NoiseDraw {
    pub t: usize,
    pub eps: Array2<f64>,
}

/// Gradients for both the denoiser weights and the vocabulary tables.
#[derive(Debug, Clone)]
pub struct LossOutput {
    pub loss: f64,
    pub weights: WeightGrads,
    pub vocab_embeddings: Array2<f64>,
    pub vocab_null: Array1<f64>,
}

pub fn sample_draws(items: &[TrainItem], steps: usize, rng: &mut impl Rng) -> Vec<NoiseDraw> {
    items
        .iter()
        .map(|it| NoiseDraw {
            t: rng.gen_range(1..=steps),
            eps: Array2::from_shape_simple_fn(it.x0.raw_dim(), || StandardNormal.sample(rng)),
        })
        .collect()
}

/// Noise-prediction loss `mean_b ||eps_b - eps_theta(x_t, t, prompt_b)||^2`
/// with `x_t = sqrt(a_t) x0 + sqrt(1 - a_t) eps`, for fixed draws.
pub fn ldm_loss_with_draws(
    weights: &ToyDenoiserWeights,
    vocab: &PromptVocabulary,
    items: &[TrainItem],
    draws: &[NoiseDraw],
    sched: &NoiseSchedule,
) -> Result<LossOutput> {
    if items.is_empty() || items.len() != draws.len() {
        return Err(Error::precondition("loss needs a nonempty batch with one draw per item"));
    }
    let mut grads = ToyDenoiserWeights::zeros(weights.dims)?;
    let mut g_emb = Array2::zeros(vocab.embeddings().raw_dim());
    let mut g_null = Array1::zeros(vocab.text_dim());
    let scale = 1.0 / items.len() as f64;
    let mut loss = 0.0;
    let mut tape = ForwardTape::default();
    for (item, draw) in items.iter().zip(draws) {
        let a = sched.alpha(draw.t);
        let xt = &item.x0 * a.sqrt() + &draw.eps * (1.0 - a).sqrt();
        let (pred, _) = weights.forward_item(xt.view(), draw.t, &item.prompt.matrix, None, false, Some(&mut tape))?;
        let resid = &pred - &draw.eps;
        loss += resid.iter().map(|v| v * v).sum::<f64>() * scale;
        let d_pred = resid * (2.0 * scale);
        let d_text = weights.backward_item(&tape, &d_pred, &mut grads);
        if item.prompt.is_null {
            g_null += &d_text.row(0);
        } else {
            for (i, &(id, w)) in item.prompt.rows.iter().enumerate() {
                let mut row = g_emb.row_mut(id);
                row.scaled_add(w, &d_text.row(i));
            }
        }
    }
    Ok(LossOutput {
        loss,
        weights: grads,
        vocab_embeddings: g_emb,
        vocab_null: g_null,
    })
}

/// [`ldm_loss_with_draws`] with `t ~ U{1..T}` and `eps ~ N(0, I)` drawn from `rng`.
pub fn ldm_loss(
    weights: &ToyDenoiserWeights,
    vocab: &PromptVocabulary,
    items: &[TrainItem],
    sched: &NoiseSchedule,
    rng: &mut impl Rng,
) -> Result<LossOutput> {
    let draws = sample_draws(items, sched.num_steps(), rng);
    ldm_loss_with_draws(weights, vocab, items, &draws, sched)
}

/// Draws a random labelled example from the world.
pub fn sample_item(
    world: &ToyWorld,
    vocab: &PromptVocabulary,
    cfg: &TrainConfig,
    rng: &mut impl Rng,
) -> Result<TrainItem> {
    let word = rng.gen_range(0..world.identity_words);
    let variant = rng.gen_range(0..world.variants_per_identity);
    let scene = rng.gen_range(0..world.scene_count);
    let x0 = world.render_scene(&SceneSpec {
        identity_id: world.identity_id(word, variant),
        scene_id: scene,
        placement: world.default_placement(),
    })?;
    let identity = vec![FILLER_WORDS[0].to_string(), world.identity_word(word).to_string()];
    let u: f64 = rng.gen();
    let prompt = if u < cfg.p_uncond {
        null_prompt(vocab)
    } else if u < cfg.p_uncond + cfg.p_identity_only {
        embed(&FusedPrompt::identity_only(&identity)?, None, vocab, 1.0, 1.0)?
    } else if u < cfg.p_uncond + cfg.p_identity_only + cfg.p_single_scene {
        let fp = fuse_prompts(&identity, &[vec![world.scene_word(scene).to_string()]])?;
        embed(&fp, Some(0), vocab, 1.0, cfg.w_inactive)?
    } else {
        let count = rng.gen_range(2..=cfg.max_fused_scenes.min(world.scene_count));
        let mut others: Vec<usize> = (0..world.scene_count).filter(|&s| s != scene).collect();
        others.shuffle(rng);
        let mut scenes: Vec<usize> = others[..count - 1].to_vec();
        let pos = rng.gen_range(0..count);
        scenes.insert(pos, scene);
        let words: Vec<Vec<String>> = scenes.iter().map(|&s| vec![world.scene_word(s).to_string()]).collect();
        let fp = fuse_prompts(&identity, &words)?;
        embed(&fp, Some(pos), vocab, 1.0, cfg.w_inactive)?
    };
    Ok(TrainItem { x0, prompt })
}

/// Per-epoch mean losses and the first batch loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub initial_loss: f64,
    pub epoch_losses: Vec<f64>,
}

impl TrainLog {
    fn window_mean(v: &[f64]) -> f64 {
        v.iter().sum::<f64>() / v.len().max(1) as f64
    }

    pub fn first_window_mean(&self, w: usize) -> f64 {
        Self::window_mean(&self.epoch_losses[..w.min(self.epoch_losses.len())])
    }

    pub fn last_window_mean(&self, w: usize) -> f64 {
        let n = self.epoch_losses.len();
        Self::window_mean(&self.epoch_losses[n - w.min(n)..])
    }

    pub fn final_loss(&self) -> f64 {
        *self.epoch_losses.last().unwrap_or(&f64::NAN)
    }
}

struct Optimizer {
    kind: OptimizerKind,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    step: i32,
}

impl Optimizer {
    fn new(kind: OptimizerKind, sizes: &[usize]) -> Self {
        let zeros = || sizes.iter().map(|&n| vec![0.0; n]).collect();
        Self {
            kind,
            first: zeros(),
            second: zeros(),
            step: 0,
        }
    }

    fn apply(&mut self, params: Vec<&mut [f64]>, grads: Vec<&[f64]>, lr: f64) {
        self.step += 1;
        for (i, (p, g)) in params.into_iter().zip(grads).enumerate() {
            match self.kind {
                OptimizerKind::Sgd { momentum } => {
                    for ((w, &gi), v) in p.iter_mut().zip(g).zip(self.first[i].iter_mut()) {
                        *v = momentum * *v + gi;
                        *w -= lr * *v;
                    }
                }
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    let c1 = 1.0 - beta1.powi(self.step);
                    let c2 = 1.0 - beta2.powi(self.step);
                    let m = self.first[i].iter_mut();
                    let v = self.second[i].iter_mut();
                    for (((w, &gi), mi), vi) in p.iter_mut().zip(g).zip(m).zip(v) {
                        *mi = beta1 * *mi + (1.0 - beta1) * gi;
                        *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                        *w -= lr * (*mi / c1) / ((*vi / c2).sqrt() + eps);
                    }
                }
            }
        }
    }
}

fn param_slices<'a>(weights: &'a mut ToyDenoiserWeights, vocab: &'a mut PromptVocabulary) -> Vec<&'a mut [f64]> {
    let mut out: Vec<&mut [f64]> = weights
        .params_mut()
        .into_iter()
        .map(|m| m.as_slice_mut().expect("standard layout"))
        .collect();
    let (emb, null) = vocab.tables_mut();
    out.push(emb.as_slice_mut().expect("standard layout"));
    out.push(null.as_slice_mut().expect("standard layout"));
    out
}

/// Fits fresh weights and vocabulary embeddings on the procedural world.
pub fn train(cfg: &TrainConfig) -> Result<(ToyDenoiserWeights, PromptVocabulary, TrainLog)> {
    train_with_progress(cfg, |_, _| {})
}

pub fn train_with_progress(
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<(ToyDenoiserWeights, PromptVocabulary, TrainLog)> {
    cfg.validate()?;
    let world = ToyWorld::from_config(cfg)?;
    let sched = cfg.schedule()?;
    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut weights = ToyDenoiserWeights::init(cfg.model_dims(), &mut init_rng)?;
    let mut vocab = world.vocabulary(cfg.text_dim, &mut init_rng)?;
    let mut data_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut noise_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(2));

    let sizes: Vec<usize> = param_slices(&mut weights, &mut vocab).iter().map(|s| s.len()).collect();
    let mut opt = Optimizer::new(cfg.optimizer, &sizes);
    let total = (cfg.epochs * cfg.steps_per_epoch) as f64;
    let mut log = TrainLog {
        initial_loss: f64::NAN,
        epoch_losses: Vec::with_capacity(cfg.epochs),
    };
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let mut acc = 0.0;
        for _ in 0..cfg.steps_per_epoch {
            let batch = (0..cfg.batch_size)
                .map(|_| sample_item(&world, &vocab, cfg, &mut data_rng))
                .collect::<Result<Vec<_>>>()?;
            let out = ldm_loss(&weights, &vocab, &batch, &sched, &mut noise_rng)?;
            if !out.loss.is_finite() {
                return Err(Error::Training {
                    epoch,
                    reason: format!("loss became {}", out.loss),
                });
            }
            if log.initial_loss.is_nan() {
                log.initial_loss = out.loss;
            }
            acc += out.loss;
            let progress = step as f64 / total;
            let decay = cfg.final_lr_fraction
                + (1.0 - cfg.final_lr_fraction) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
            let lr = cfg.learning_rate * decay;
            let mut grads: Vec<&[f64]> = out
                .weights
                .named_params()
                .into_iter()
                .map(|(_, m)| m.as_slice().expect("standard layout"))
                .collect();
            grads.push(out.vocab_embeddings.as_slice().expect("standard layout"));
            grads.push(out.vocab_null.as_slice().expect("standard layout"));
            opt.apply(param_slices(&mut weights, &mut vocab), grads, lr);
            step += 1;
        }
        let mean = acc / cfg.steps_per_epoch as f64;
        if !mean.is_finite() {
            return Err(Error::Training {
                epoch,
                reason: "non-finite epoch loss".into(),
            });
        }
        log.epoch_losses.push(mean);
        on_epoch(epoch, mean);
    }
    weights.check()?;
    Ok((weights, vocab, log))
}

/// Renders every `(identity, scene)` pair at the default placement, in order.
pub fn render_catalog(world: &ToyWorld) -> Result<Vec<(SceneSpec, Array2<f64>)>> {
    let mut out = Vec::new();
    for identity_id in 0..world.identity_count() {
        for scene_id in 0..world.scene_count {
            let spec = SceneSpec {
                identity_id,
                scene_id,
                placement: world.default_placement(),
            };
            out.push((spec, world.render_scene(&spec)?));
        }
    }
    Ok(out)
}

/// Stacks latents into a `[batch, tokens, channels]` array.
pub fn stack(images: &[Array2<f64>]) -> Array3<f64> {
    let (n, c) = images[0].dim();
    let mut out = Array3::zeros((images.len(), n, c));
    for (b, img) in images.iter().enumerate() {
        out.index_axis_mut(ndarray::Axis(0), b).assign(img);
    }
    out
}

/// Adds `N(0, sigma^2)` noise; used for probe augmentation.
pub fn jitter(img: &Array2<f64>, sigma: f64, rng: &mut impl Rng) -> Array2<f64> {
    let dist = Normal::new(0.0, sigma).expect("positive sigma");
    img.mapv(|v| v + dist.sample(rng))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::checkpoint_bytes;

    fn small_config() -> TrainConfig {
        TrainConfig {
            epochs: 20,
            steps_per_epoch: 4,
            batch_size: 8,
            learning_rate: 3e-3,
            grid: 4,
            channels: 2,
            identity_count: 2,
            variants_per_identity: 2,
            scene_count: 3,
            layers: 2,
            model_dim: 8,
            ffn_dim: 16,
            text_dim: 8,
            steps: 10,
            max_fused_scenes: 3,
            ..TrainConfig::default()
        }
    }

    fn world() -> ToyWorld {
        ToyWorld::new(8, 4, 2, 3, 6, 5).unwrap()
    }

    #[test]
    fn render_is_deterministic_and_bounded() {
        let w = world();
        let spec = SceneSpec {
            identity_id: 4,
            scene_id: 2,
            placement: w.default_placement(),
        };
        let a = w.render_scene(&spec).unwrap();
        assert_eq!(a, w.render_scene(&spec).unwrap());
        assert_eq!(a, world().render_scene(&spec).unwrap());
        assert!(a.iter().all(|v| (-1.0..=1.0).contains(v)));
        assert_eq!(a.dim(), (64, 4));
    }

    #[test]
    fn identities_differ_exactly_on_footprint() {
        let w = world();
        for placement in [(0, 0), (2, 2), (4, 1), (1, 4)] {
            let declared = w.footprint(placement).unwrap();
            let mut diff = vec![false; w.tokens()];
            for a in 0..w.identity_count() {
                for b in 0..w.identity_count() {
                    let ra = w.render_scene(&SceneSpec { identity_id: a, scene_id: 1, placement }).unwrap();
                    let rb = w.render_scene(&SceneSpec { identity_id: b, scene_id: 1, placement }).unwrap();
                    for (tok, d) in diff.iter_mut().enumerate() {
                        if ra.row(tok) != rb.row(tok) {
                            *d = true;
                            assert!(declared[tok], "identity diff outside footprint at {tok}");
                        }
                    }
                }
            }
            assert_eq!(diff, declared);
            assert_eq!(declared.iter().filter(|m| **m).count(), 16);
        }
    }

    #[test]
    fn invalid_specs_rejected() {
        let w = world();
        let bad = SceneSpec {
            identity_id: 0,
            scene_id: 0,
            placement: (5, 0),
        };
        assert!(matches!(w.render_scene(&bad), Err(Error::Config(_))));
        assert!(w.render_scene(&SceneSpec { identity_id: 6, ..bad }).is_err());
        assert!(ToyWorld::new(8, 4, 1, 3, 6, 0).is_err());
        let cfg = TrainConfig { identity_count: 1, ..TrainConfig::default() };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let cfg = TrainConfig { batch_size: 0, ..TrainConfig::default() };
        assert!(cfg.validate().is_err());
    }

    fn batch(cfg: &TrainConfig, n: usize, seed: u64) -> (ToyDenoiserWeights, PromptVocabulary, Vec<TrainItem>) {
        let w = ToyWorld::from_config(cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weights = ToyDenoiserWeights::init(cfg.model_dims(), &mut rng).unwrap();
        let vocab = w.vocabulary(cfg.text_dim, &mut rng).unwrap();
        let items = (0..n).map(|_| sample_item(&w, &vocab, cfg, &mut rng).unwrap()).collect();
        (weights, vocab, items)
    }

    #[test]
    fn zero_model_loss_is_chi_square_mean() {
        let cfg = TrainConfig::default();
        let (_, vocab, items) = batch(&cfg, 200, 1);
        let zero = ToyDenoiserWeights::zeros(cfg.model_dims()).unwrap();
        let sched = cfg.schedule().unwrap();
        let out = ldm_loss(&zero, &vocab, &items, &sched, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let n = (64 * 4) as f64;
        // per-item std is sqrt(2n); allow 4 standard errors
        let tol = 4.0 * (2.0 * n).sqrt() / (items.len() as f64).sqrt();
        assert!((out.loss - n).abs() < tol, "loss {} vs {n}", out.loss);
    }

    #[test]
    fn loss_invariant_under_batch_permutation() {
        let cfg = small_config();
        let (weights, vocab, items) = batch(&cfg, 6, 3);
        let sched = cfg.schedule().unwrap();
        let draws = sample_draws(&items, sched.num_steps(), &mut ChaCha8Rng::seed_from_u64(4));
        let base = ldm_loss_with_draws(&weights, &vocab, &items, &draws, &sched).unwrap();
        let perm = [3, 0, 5, 1, 4, 2];
        let items_p: Vec<_> = perm.iter().map(|&i| items[i].clone()).collect();
        let draws_p: Vec<_> = perm.iter().map(|&i| draws[i].clone()).collect();
        let p = ldm_loss_with_draws(&weights, &vocab, &items_p, &draws_p, &sched).unwrap();
        assert!((base.loss - p.loss).abs() <= 1e-12 * base.loss);
        for ((_, a), (_, b)) in base.weights.named_params().iter().zip(p.weights.named_params()) {
            for (x, y) in a.iter().zip(b.iter()) {
                assert!((x - y).abs() <= 1e-10 * (1.0 + x.abs()));
            }
        }
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let cfg = small_config();
        let (weights, vocab, items) = batch(&cfg, 4, 5);
        let sched = cfg.schedule().unwrap();
        let draws = sample_draws(&items, sched.num_steps(), &mut ChaCha8Rng::seed_from_u64(6));
        let out = ldm_loss_with_draws(&weights, &vocab, &items, &draws, &sched).unwrap();
        let h = 1e-6;
        // items hold embedded prompts, so re-embed them from the perturbed vocabulary
        let loss_at = |w: &ToyDenoiserWeights, v: &PromptVocabulary| {
            let items: Vec<TrainItem> = items
                .iter()
                .map(|it| {
                    let mut it = it.clone();
                    if it.prompt.is_null {
                        it.prompt.matrix.row_mut(0).assign(v.null_embedding());
                    }
                    for (i, &(id, wt)) in it.prompt.rows.iter().enumerate() {
                        it.prompt.matrix.row_mut(i).assign(&(&v.embeddings().row(id) * wt));
                    }
                    it
                })
                .collect();
            ldm_loss_with_draws(w, v, &items, &draws, &sched).unwrap().loss
        };
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let names: Vec<String> = weights.named_params().into_iter().map(|(n, _)| n).collect();
        let mut checked = 0;
        for _ in 0..12 {
            let p = rng.gen_range(0..names.len());
            let len = weights.named_params()[p].1.len();
            let k = rng.gen_range(0..len);
            let mut plus = weights.clone();
            plus.params_mut()[p].as_slice_mut().unwrap()[k] += h;
            let mut minus = weights.clone();
            minus.params_mut()[p].as_slice_mut().unwrap()[k] -= h;
            let fd = (loss_at(&plus, &vocab) - loss_at(&minus, &vocab)) / (2.0 * h);
            let an = out.weights.named_params()[p].1.as_slice().unwrap()[k];
            assert!((fd - an).abs() <= 1e-4 * (fd.abs().max(an.abs()).max(1e-3)), "{}[{k}]: fd {fd} vs {an}", names[p]);
            checked += 1;
        }
        // vocabulary rows used by the batch, and the null row
        let used: Vec<usize> = items.iter().flat_map(|it| it.prompt.rows.iter().map(|r| r.0)).collect();
        for &id in used.iter().take(4) {
            let d = rng.gen_range(0..cfg.text_dim);
            let mut plus = vocab.clone();
            plus.embeddings_mut()[[id, d]] += h;
            let mut minus = vocab.clone();
            minus.embeddings_mut()[[id, d]] -= h;
            let fd = (loss_at(&weights, &plus) - loss_at(&weights, &minus)) / (2.0 * h);
            let an = out.vocab_embeddings[[id, d]];
            assert!((fd - an).abs() <= 1e-4 * (fd.abs().max(an.abs()).max(1e-3)), "emb[{id},{d}]: {fd} vs {an}");
            checked += 1;
        }
        assert!(checked >= 5);
    }

    #[test]
    fn zero_learning_rate_keeps_weights() {
        for optimizer in [OptimizerKind::Sgd { momentum: 0.9 }, OptimizerKind::adam()] {
            let cfg = TrainConfig {
                epochs: 1,
                learning_rate: 0.0,
                optimizer,
                ..small_config()
            };
            let (trained, vocab, log) = train(&cfg).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let init = ToyDenoiserWeights::init(cfg.model_dims(), &mut rng).unwrap();
            let init_vocab = ToyWorld::from_config(&cfg).unwrap().vocabulary(cfg.text_dim, &mut rng).unwrap();
            assert_eq!(checkpoint_bytes(&trained, &vocab), checkpoint_bytes(&init, &init_vocab));
            assert_eq!(log.epoch_losses.len(), 1);
        }
    }

    #[test]
    fn training_is_deterministic_and_learns() {
        let cfg = small_config();
        let (a, va, la) = train(&cfg).unwrap();
        let (b, vb, lb) = train(&cfg).unwrap();
        assert_eq!(checkpoint_bytes(&a, &va), checkpoint_bytes(&b, &vb));
        assert_eq!(la, lb);
        assert!(la.last_window_mean(10) < la.first_window_mean(10), "{la:?}");
        let other = train(&TrainConfig { seed: 8, ..cfg }).unwrap();
        assert_ne!(checkpoint_bytes(&a, &va), checkpoint_bytes(&other.0, &other.1));
    }

    #[test]
    fn divergence_reports_epoch() {
        let cfg = TrainConfig {
            learning_rate: 1e12,
            optimizer: OptimizerKind::Sgd { momentum: 0.9 },
            ..small_config()
        };
        match train(&cfg) {
            Err(Error::Training { epoch, .. }) => assert!(epoch < cfg.epochs),
            other => panic!("expected a training error, got {:?}", other.map(|r| r.2)),
        }
    }
}
