//! Story-level evaluation: subject consistency over the glyph footprint,
//! prompt alignment through a linear scene probe, and ablation tables.

use ndarray::{Array1, Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::world::{jitter, SceneSpec, ToyWorld};

/// Footprint rows of `x0`, flattened and centred.
pub fn subject_region_features(x0: ArrayView2<'_, f64>, mask: &[bool]) -> Result<Array1<f64>> {
    if mask.len() != x0.nrows() {
        return Err(Error::config(format!(
            "mask covers {} tokens but the latent has {}",
            mask.len(),
            x0.nrows()
        )));
    }
    let values: Vec<f64> = mask
        .iter()
        .zip(x0.rows())
        .filter(|(m, _)| **m)
        .flat_map(|(_, row)| row.to_vec())
        .collect();
    if values.is_empty() {
        return Err(Error::config("subject mask is empty"));
    }
    let mut f = Array1::from(values);
    let mean = f.mean().expect("nonempty");
    f -= mean;
    Ok(f)
}

/// Cosine similarity; zero when either vector vanishes.
pub fn cosine(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
    let na = a.dot(a).sqrt();
    let nb = b.dot(b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (a.dot(b) / (na * nb)).clamp(-1.0, 1.0)
}

/// Symmetric matrix of pairwise subject similarities with a unit diagonal.
pub fn pairwise_similarity(images: &[Array2<f64>], footprints: &[Vec<bool>]) -> Result<Array2<f64>> {
    if images.len() != footprints.len() {
        return Err(Error::config("need one footprint per image"));
    }
    let feats = images
        .iter()
        .zip(footprints)
        .map(|(img, m)| subject_region_features(img.view(), m))
        .collect::<Result<Vec<_>>>()?;
    let n = feats.len();
    let mut sim = Array2::eye(n);
    for i in 0..n {
        for j in i + 1..n {
            if feats[i].len() != feats[j].len() {
                return Err(Error::config("footprints of different sizes are not comparable"));
            }
            let c = cosine(&feats[i], &feats[j]);
            sim[[i, j]] = c;
            sim[[j, i]] = c;
        }
    }
    Ok(sim)
}

/// Mean of the upper-triangle pairwise similarities.
pub fn consistency_score(images: &[Array2<f64>], footprints: &[Vec<bool>]) -> Result<f64> {
    if images.len() < 2 {
        return Err(Error::config("consistency needs at least two images"));
    }
    let sim = pairwise_similarity(images, footprints)?;
    let n = images.len();
    let mut acc = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            acc += sim[[i, j]];
        }
    }
    Ok(acc / (n * (n - 1) / 2) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    /// Std of the Gaussian jitter added to training renders.
    pub noise_sigma: f64,
    /// Noisy copies of every `(identity, scene)` render.
    pub copies: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            learning_rate: 0.5,
            noise_sigma: 0.3,
            copies: 8,
            seed: 99,
        }
    }
}

/// Multinomial logistic regression over flattened latents.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneProbe {
    weights: Array2<f64>,
    bias: Array1<f64>,
    /// Accuracy on clean renders; `None` until trained.
    clean_accuracy: Option<f64>,
}

impl SceneProbe {
    pub fn untrained(features: usize, classes: usize) -> Self {
        Self {
            weights: Array2::zeros((features, classes)),
            bias: Array1::zeros(classes),
            clean_accuracy: None,
        }
    }

    pub fn classes(&self) -> usize {
        self.bias.len()
    }

    pub fn clean_accuracy(&self) -> Option<f64> {
        self.clean_accuracy
    }

    fn logits(&self, x: ArrayView2<'_, f64>) -> Result<Array1<f64>> {
        let flat = x.iter().copied().collect::<Array1<f64>>();
        if flat.len() != self.weights.nrows() {
            return Err(Error::config(format!(
                "probe expects {} features, got {}",
                self.weights.nrows(),
                flat.len()
            )));
        }
        Ok(flat.dot(&self.weights) + &self.bias)
    }

    pub fn predict(&self, x: ArrayView2<'_, f64>) -> Result<usize> {
        let logits = self.logits(x)?;
        // first maximum wins ties
        Ok(logits
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
            .0)
    }

    pub fn accuracy(&self, images: &[Array2<f64>], labels: &[usize]) -> Result<f64> {
        let hits = images
            .iter()
            .zip(labels)
            .map(|(img, &y)| self.predict(img.view()).map(|p| usize::from(p == y)))
            .sum::<Result<usize>>()?;
        Ok(hits as f64 / images.len() as f64)
    }
}

/// Fits the probe on jittered renders of every `(identity, scene)` pair and
/// validates it on the clean renders.
pub fn train_probe(world: &ToyWorld, cfg: &ProbeConfig) -> Result<SceneProbe> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let placement = world.default_placement();
    let mut clean = Vec::new();
    let mut labels = Vec::new();
    for identity_id in 0..world.identity_count() {
        for scene_id in 0..world.scene_count {
            clean.push(world.render_scene(&SceneSpec {
                identity_id,
                scene_id,
                placement,
            })?);
            labels.push(scene_id);
        }
    }
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for _ in 0..cfg.copies {
        for (img, &y) in clean.iter().zip(&labels) {
            xs.push(jitter(img, cfg.noise_sigma, &mut rng));
            ys.push(y);
        }
    }
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.shuffle(&mut rng);
    let features = world.tokens() * world.channels;
    let classes = world.scene_count;
    let design = Array2::from_shape_fn((xs.len(), features), |(i, f)| {
        let img = &xs[order[i]];
        img[[f / world.channels, f % world.channels]]
    });
    let targets: Vec<usize> = order.iter().map(|&i| ys[i]).collect();

    let mut probe = SceneProbe::untrained(features, classes);
    let n = xs.len() as f64;
    for _ in 0..cfg.epochs {
        let mut logits = design.dot(&probe.weights) + &probe.bias;
        for (mut row, &y) in logits.rows_mut().into_iter().zip(&targets) {
            let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            row.mapv_inplace(|v| (v - max).exp());
            let sum = row.sum();
            row /= sum;
            row[y] -= 1.0;
        }
        let g_w = design.t().dot(&logits) / n;
        let g_b = logits.sum_axis(ndarray::Axis(0)) / n;
        probe.weights.scaled_add(-cfg.learning_rate, &g_w);
        probe.bias.scaled_add(-cfg.learning_rate, &g_b);
    }
    probe.clean_accuracy = Some(probe.accuracy(&clean, &labels)?);
    Ok(probe)
}

/// Fraction of images whose predicted scene matches the prompt's scene.
pub fn alignment_score(images: &[Array2<f64>], scene_ids: &[usize], probe: &SceneProbe) -> Result<f64> {
    if probe.clean_accuracy.is_none() {
        return Err(Error::config("scene probe has not been trained"));
    }
    if images.is_empty() {
        return Err(Error::config("alignment needs at least one image"));
    }
    if images.len() != scene_ids.len() {
        return Err(Error::config("need one scene id per image"));
    }
    probe.accuracy(images, scene_ids)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairSimilarity {
    pub i: usize,
    pub j: usize,
    pub cosine: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoryMetrics {
    pub subject_consistency: f64,
    pub prompt_alignment: f64,
    pub combined: f64,
    pub per_pair: Vec<PairSimilarity>,
}

impl StoryMetrics {
    pub fn new(subject_consistency: f64, prompt_alignment: f64) -> Self {
        Self {
            subject_consistency,
            prompt_alignment,
            combined: combined_score(subject_consistency, prompt_alignment),
            per_pair: Vec::new(),
        }
    }
}

pub fn combined_score(consistency: f64, alignment: f64) -> f64 {
    consistency + alignment
}

/// Consistency over a shared footprint plus probe alignment.
pub fn evaluate_story(
    images: &[Array2<f64>],
    scene_ids: &[usize],
    footprint: &[bool],
    probe: &SceneProbe,
) -> Result<StoryMetrics> {
    let masks = vec![footprint.to_vec(); images.len()];
    let sim = pairwise_similarity(images, &masks)?;
    let consistency = consistency_score(images, &masks)?;
    let alignment = alignment_score(images, scene_ids, probe)?;
    let mut m = StoryMetrics::new(consistency, alignment);
    let n = images.len();
    for i in 0..n {
        for j in i + 1..n {
            m.per_pair.push(PairSimilarity { i, j, cosine: sim[[i, j]] });
        }
    }
    Ok(m)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Mean and sample standard deviation (zero for one value).
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self { mean, std }
    }
}

/// Metrics of one variant on one seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedMetrics {
    pub seed: u64,
    pub metrics: StoryMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub seeds: usize,
    pub consistency: MeanStd,
    pub alignment: MeanStd,
    pub combined: MeanStd,
    /// Competition rank by mean combined score (1 is best).
    pub rank: usize,
    pub tied: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub seeds: Vec<u64>,
    /// Rows ordered by rank, ties in input order.
    pub rows: Vec<AblationRow>,
}

pub fn ablation_report(results: &[(String, Vec<SeedMetrics>)]) -> Result<AblationReport> {
    let first = results.first().ok_or_else(|| Error::config("no variants to report"))?;
    let seeds: Vec<u64> = first.1.iter().map(|s| s.seed).collect();
    if seeds.is_empty() {
        return Err(Error::config("no seeds to report"));
    }
    let mut rows = Vec::new();
    for (variant, runs) in results {
        let these: Vec<u64> = runs.iter().map(|s| s.seed).collect();
        if these != seeds {
            return Err(Error::config(format!(
                "variant {variant} ran seeds {these:?}, expected {seeds:?}"
            )));
        }
        let col = |f: fn(&StoryMetrics) -> f64| MeanStd::of(&runs.iter().map(|s| f(&s.metrics)).collect::<Vec<_>>());
        rows.push(AblationRow {
            variant: variant.clone(),
            seeds: runs.len(),
            consistency: col(|m| m.subject_consistency),
            alignment: col(|m| m.prompt_alignment),
            combined: col(|m| m.combined),
            rank: 0,
            tied: false,
        });
    }
    let means: Vec<f64> = rows.iter().map(|r| r.combined.mean).collect();
    for (i, row) in rows.iter_mut().enumerate() {
        row.rank = 1 + means.iter().filter(|&&m| m > means[i]).count();
        row.tied = means.iter().enumerate().any(|(j, &m)| j != i && m == means[i]);
    }
    // stable: equal ranks keep input order
    rows.sort_by_key(|r| r.rank);
    Ok(AblationReport { seeds, rows })
}

impl AblationReport {
    pub fn row(&self, variant: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }

    /// Human-readable table followed by a JSON block.
    pub fn to_text(&self) -> String {
        let fmt = |m: &MeanStd| format!("{:.4} ± {:.4}", m.mean, m.std);
        let mut out = String::new();
        out.push_str(&format!("seeds: {:?}\n", self.seeds));
        out.push_str(&format!(
            "{:<6} {:<20} {:>18} {:>18} {:>18}\n",
            "rank", "variant", "consistency", "alignment", "combined"
        ));
        for r in &self.rows {
            let rank = if r.tied { format!("{}=", r.rank) } else { r.rank.to_string() };
            out.push_str(&format!(
                "{:<6} {:<20} {:>18} {:>18} {:>18}\n",
                rank,
                r.variant,
                fmt(&r.consistency),
                fmt(&r.alignment),
                fmt(&r.combined)
            ));
        }
        out.push_str("note: consistency is a masked-cosine proxy; no perceptual-similarity analogue is reported.\n");
        out.push_str("--- json ---\n");
        out.push_str(&serde_json::to_string_pretty(self).expect("report serializes"));
        out.push('\n');
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let json = text
            .split_once("--- json ---\n")
            .map(|(_, j)| j)
            .ok_or_else(|| Error::format("ablation report", "missing json block"))?;
        serde_json::from_str(json).map_err(|e| Error::format("ablation report", e.to_string()))
    }
}
