//! Prompt vocabulary, multi-scene prompt fusion with per-scene reweighting,
//! the null prompt, and the per-phase prompt/guidance assignment.

use std::collections::HashMap;
use std::ops::Range;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Closed vocabulary with a learned embedding table and a learned null token.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptVocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    subject: Vec<bool>,
    embeddings: Array2<f64>,
    null_embedding: Array1<f64>,
}

impl PromptVocabulary {
    /// `subject[i]` marks tokens that describe the subject itself; only those
    /// count as subject tokens when they appear in an identity segment.
    pub fn new(
        tokens: Vec<String>,
        subject: Vec<bool>,
        embeddings: Array2<f64>,
        null_embedding: Array1<f64>,
    ) -> Result<Self> {
        if tokens.len() != subject.len() || tokens.len() != embeddings.nrows() {
            return Err(Error::config("vocabulary tokens, subject flags and embedding rows disagree"));
        }
        if embeddings.ncols() != null_embedding.len() {
            return Err(Error::config("null embedding width differs from the embedding table"));
        }
        if !embeddings.iter().chain(null_embedding.iter()).all(|v| v.is_finite()) {
            return Err(Error::numeric("non-finite vocabulary embedding"));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, tok) in tokens.iter().enumerate() {
            if index.insert(tok.clone(), i).is_some() {
                return Err(Error::config(format!("duplicate vocabulary token `{tok}`")));
            }
        }
        Ok(Self {
            tokens,
            index,
            subject,
            embeddings,
            null_embedding,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn text_dim(&self) -> usize {
        self.embeddings.ncols()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn subject_flags(&self) -> &[bool] {
        &self.subject
    }

    pub fn id(&self, token: &str) -> Result<usize> {
        self.index
            .get(token)
            .copied()
            .ok_or_else(|| Error::Vocabulary(token.to_string()))
    }

    pub fn is_subject(&self, id: usize) -> bool {
        self.subject[id]
    }

    pub fn embeddings(&self) -> &Array2<f64> {
        &self.embeddings
    }

    pub fn embeddings_mut(&mut self) -> &mut Array2<f64> {
        &mut self.embeddings
    }

    pub fn null_embedding(&self) -> &Array1<f64> {
        &self.null_embedding
    }

    pub fn null_embedding_mut(&mut self) -> &mut Array1<f64> {
        &mut self.null_embedding
    }

    /// Both trainable tables at once.
    pub fn tables_mut(&mut self) -> (&mut Array2<f64>, &mut Array1<f64>) {
        (&mut self.embeddings, &mut self.null_embedding)
    }

    /// Splits on whitespace and checks every token against the vocabulary.
    pub fn tokenize(&self, text: &str) -> Result<Vec<String>> {
        text.split_whitespace()
            .map(|tok| self.id(tok).map(|_| tok.to_string()))
            .collect()
    }
}

/// Identity segment followed by every scene segment, with per-token weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusedPrompt {
    identity: Vec<String>,
    scenes: Vec<Vec<String>>,
    weights: Vec<f64>,
    active_scene: Option<usize>,
}

impl FusedPrompt {
    /// Prompt holding only the subject description (used for the identity pass).
    pub fn identity_only(identity: &[String]) -> Result<Self> {
        if identity.is_empty() {
            return Err(Error::config("identity prompt must not be empty"));
        }
        Ok(Self {
            identity: identity.to_vec(),
            scenes: Vec::new(),
            weights: vec![1.0; identity.len()],
            active_scene: None,
        })
    }

    pub fn identity(&self) -> &[String] {
        &self.identity
    }

    pub fn scenes(&self) -> &[Vec<String>] {
        &self.scenes
    }

    pub fn scene_count(&self) -> usize {
        self.scenes.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn active_scene(&self) -> Option<usize> {
        self.active_scene
    }

    pub fn tokens(&self) -> impl Iterator<Item = &str> {
        self.identity
            .iter()
            .chain(self.scenes.iter().flatten())
            .map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.identity.len() + self.scenes.iter().map(Vec::len).sum::<usize>()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Token index range occupied by scene `j`.
    pub fn scene_range(&self, j: usize) -> Range<usize> {
        let start = self.identity.len() + self.scenes[..j].iter().map(Vec::len).sum::<usize>();
        start..start + self.scenes[j].len()
    }

    /// Copy with `scene` emphasised: identity and the active scene get
    /// `w_active`, every other scene token gets `w_inactive`.
    pub fn activated(&self, scene: Option<usize>, w_active: f64, w_inactive: f64) -> Result<Self> {
        if let Some(j) = scene {
            if j >= self.scenes.len() {
                return Err(Error::config(format!(
                    "scene {j} out of range for a prompt with {} scenes",
                    self.scenes.len()
                )));
            }
        }
        if !(w_inactive >= 0.0 && w_active >= w_inactive && w_active.is_finite()) {
            return Err(Error::config(format!(
                "reweighting needs w_active >= w_inactive >= 0, got ({w_active}, {w_inactive})"
            )));
        }
        let mut weights = vec![w_active; self.identity.len()];
        for (j, seg) in self.scenes.iter().enumerate() {
            let w = if Some(j) == scene { w_active } else { w_inactive };
            weights.extend(std::iter::repeat_n(w, seg.len()));
        }
        Ok(Self {
            weights,
            active_scene: scene,
            ..self.clone()
        })
    }
}

/// Concatenates `identity` and `scenes` into one prompt; all weights start at 1.
pub fn fuse_prompts(identity: &[String], scenes: &[Vec<String>]) -> Result<FusedPrompt> {
    if scenes.is_empty() {
        return Err(Error::config("a fused prompt needs at least one scene"));
    }
    if scenes.iter().any(Vec::is_empty) {
        return Err(Error::config("scene prompts must not be empty"));
    }
    let mut fp = FusedPrompt::identity_only(identity)?;
    fp.scenes = scenes.to_vec();
    fp.weights = vec![1.0; fp.len()];
    Ok(fp)
}

/// Text-conditioning matrix handed to the denoiser.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptEmbedding {
    pub matrix: Array2<f64>,
    pub subject_token_indices: Vec<usize>,
    pub is_null: bool,
    /// `(vocabulary id, weight)` per row; empty for the null prompt.
    pub rows: Vec<(usize, f64)>,
}

impl PromptEmbedding {
    pub fn token_count(&self) -> usize {
        self.matrix.nrows()
    }
}

/// Weighted embedding lookup of `fp` with `scene` active.
pub fn embed(
    fp: &FusedPrompt,
    scene: Option<usize>,
    vocab: &PromptVocabulary,
    w_active: f64,
    w_inactive: f64,
) -> Result<PromptEmbedding> {
    let weighted = fp.activated(scene, w_active, w_inactive)?;
    let dim = vocab.text_dim();
    let mut matrix = Array2::zeros((weighted.len(), dim));
    let mut rows = Vec::with_capacity(weighted.len());
    for (i, (tok, &w)) in weighted.tokens().zip(weighted.weights()).enumerate() {
        let id = vocab.id(tok)?;
        matrix
            .row_mut(i)
            .assign(&(&vocab.embeddings().row(id) * w));
        rows.push((id, w));
    }
    let subject_token_indices = (0..fp.identity.len())
        .filter(|&i| vocab.is_subject(rows[i].0))
        .collect();
    Ok(PromptEmbedding {
        matrix,
        subject_token_indices,
        is_null: false,
        rows,
    })
}

/// Single-row embedding equal to the learned null token.
pub fn null_prompt(vocab: &PromptVocabulary) -> PromptEmbedding {
    let matrix = vocab
        .null_embedding()
        .clone()
        .into_shape_with_order((1, vocab.text_dim()))
        .expect("null embedding is one row");
    PromptEmbedding {
        matrix,
        subject_token_indices: Vec::new(),
        is_null: true,
        rows: Vec::new(),
    }
}

/// Sub-step of a zigzag timestep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Zig,
    Zag,
    Generation,
}

impl Phase {
    pub const ALL: [Phase; 3] = [Phase::Zig, Phase::Zag, Phase::Generation];

    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Zig => "zig",
            Phase::Zag => "zag",
            Phase::Generation => "generation",
        }
    }
}

/// Guidance scales per phase and the scene reweighting multipliers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GuidanceConfig {
    pub s_main: f64,
    pub s_zag: f64,
    pub w_active: f64,
    pub w_inactive: f64,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            s_main: 5.5,
            s_zag: 0.0,
            w_active: 1.0,
            w_inactive: 0.3,
        }
    }
}

/// Zig and generation get the reweighted fused prompt at `s_main`; zag
/// always gets the null prompt at `s_zag` (0 by default).
pub fn phase_prompt(
    fp: &FusedPrompt,
    scene: Option<usize>,
    phase: Phase,
    vocab: &PromptVocabulary,
    cfg: &GuidanceConfig,
) -> Result<(PromptEmbedding, f64)> {
    match phase {
        Phase::Zig | Phase::Generation => Ok((
            embed(fp, scene, vocab, cfg.w_active, cfg.w_inactive)?,
            cfg.s_main,
        )),
        Phase::Zag => Ok((null_prompt(vocab), cfg.s_zag)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    fn vocab() -> PromptVocabulary {
        let tokens = toks("a cat dog park beach forest x0 x1 x2 x3");
        let n = tokens.len();
        let subject = tokens.iter().map(|t| t == "cat" || t == "dog").collect();
        let emb = Array2::from_shape_fn((n, 3), |(i, j)| (i as f64 + 1.0) * (j as f64 - 0.7));
        PromptVocabulary::new(tokens, subject, emb, Array1::from(vec![0.1, -0.2, 0.3])).unwrap()
    }

    #[test]
    fn fusion_orders_segments() {
        let fp = fuse_prompts(&toks("cat"), &[toks("park"), toks("beach")]).unwrap();
        assert_eq!(fp.tokens().collect::<Vec<_>>(), vec!["cat", "park", "beach"]);
        assert!(fp.weights().iter().all(|&w| w == 1.0));
        assert_eq!(fp.active_scene(), None);
        let e = embed(&fp, Some(0), &vocab(), 1.0, 1.0).unwrap();
        assert_eq!(e.subject_token_indices, vec![0]);
    }

    #[test]
    fn single_scene_fusion() {
        let fp = fuse_prompts(&toks("a cat"), &[toks("forest")]).unwrap();
        assert_eq!(fp.tokens().collect::<Vec<_>>(), vec!["a", "cat", "forest"]);
    }

    #[test]
    fn scene_index_arithmetic() {
        let scenes: Vec<Vec<String>> = (0..10).map(|_| toks("x0 x1 x2")).collect();
        let fp = fuse_prompts(&toks("a cat"), &scenes).unwrap();
        assert_eq!(fp.len(), 32);
        // enumeration: walk the flattened list and record segment membership
        let mut owner = Vec::new();
        owner.extend(std::iter::repeat_n(None, 2));
        for j in 0..10 {
            owner.extend(std::iter::repeat_n(Some(j), 3));
        }
        for j in 0..10 {
            let r = fp.scene_range(j);
            assert_eq!(r, 2 + 3 * j..5 + 3 * j);
            assert!(r.clone().all(|i| owner[i] == Some(j)));
        }
    }

    #[test]
    fn empty_identity_is_rejected() {
        assert!(matches!(fuse_prompts(&[], &[toks("park")]), Err(Error::Config(_))));
        assert!(fuse_prompts(&toks("cat"), &[]).is_err());
    }

    #[test]
    fn uniform_weights_are_plain_lookup() {
        let v = vocab();
        let fp = fuse_prompts(&toks("a cat"), &[toks("park"), toks("beach")]).unwrap();
        let e0 = embed(&fp, Some(0), &v, 1.0, 1.0).unwrap();
        let e1 = embed(&fp, Some(1), &v, 1.0, 1.0).unwrap();
        assert_eq!(e0.matrix, e1.matrix);
        for (i, tok) in fp.tokens().enumerate() {
            assert_eq!(e0.matrix.row(i), v.embeddings().row(v.id(tok).unwrap()));
        }
    }

    #[test]
    fn zero_inactive_weight_annihilates() {
        let v = vocab();
        let fp = fuse_prompts(&toks("cat"), &[toks("park"), toks("beach forest")]).unwrap();
        let e = embed(&fp, Some(0), &v, 1.0, 0.0).unwrap();
        for i in fp.scene_range(1) {
            assert!(e.matrix.row(i).iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn inactive_norm_ratio() {
        let v = vocab();
        let fp = fuse_prompts(&toks("a cat"), &[toks("park"), toks("beach")]).unwrap();
        let plain = embed(&fp, Some(0), &v, 1.0, 1.0).unwrap();
        let e = embed(&fp, Some(0), &v, 1.0, 0.3).unwrap();
        let norm = |m: &Array2<f64>, i: usize| m.row(i).dot(&m.row(i)).sqrt();
        let i = fp.scene_range(1).start;
        assert!((norm(&e.matrix, i) / norm(&plain.matrix, i) - 0.3).abs() < 1e-12);
        let a = fp.scene_range(0).start;
        assert_eq!(norm(&e.matrix, a), norm(&plain.matrix, a));
    }

    #[test]
    fn unknown_token_is_vocabulary_error() {
        let fp = fuse_prompts(&toks("cat"), &[toks("moon")]).unwrap();
        assert!(matches!(embed(&fp, Some(0), &vocab(), 1.0, 0.3), Err(Error::Vocabulary(t)) if t == "moon"));
    }

    #[test]
    fn null_prompt_is_one_row() {
        let v = vocab();
        let a = null_prompt(&v);
        let b = null_prompt(&v);
        assert!(a.is_null);
        assert_eq!(a.matrix.nrows(), 1);
        assert!(a.subject_token_indices.is_empty());
        assert_eq!(a.matrix.row(0), v.null_embedding().view());
        let bits = |e: &PromptEmbedding| e.matrix.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn phase_assignment() {
        let v = vocab();
        let cfg = GuidanceConfig::default();
        let fp = fuse_prompts(&toks("a cat"), &[toks("park"), toks("beach")]).unwrap();
        let (zag, s) = phase_prompt(&fp, Some(1), Phase::Zag, &v, &cfg).unwrap();
        assert!(zag.is_null);
        assert_eq!(s, 0.0);
        let (zig, s) = phase_prompt(&fp, Some(1), Phase::Zig, &v, &cfg).unwrap();
        assert!(!zig.is_null);
        assert_eq!(s, 5.5);
        let other = fuse_prompts(&toks("dog"), &[toks("forest")]).unwrap();
        let (zag2, _) = phase_prompt(&other, Some(0), Phase::Zag, &v, &cfg).unwrap();
        assert_eq!(zag, zag2);
    }

    #[test]
    fn active_scene_only_moves_weights() {
        let v = vocab();
        let fp = fuse_prompts(&toks("a cat"), &[toks("park"), toks("beach"), toks("forest")]).unwrap();
        let mut subjects = None;
        for j in 0..3 {
            let e = embed(&fp, Some(j), &v, 1.0, 0.3).unwrap();
            let w = fp.activated(Some(j), 1.0, 0.3).unwrap();
            assert_eq!(w.weights().iter().filter(|&&x| x == 0.3).count(), 2);
            // unweighted rows are the same multiset for every active scene
            for (i, &(id, wt)) in e.rows.iter().enumerate() {
                let unweighted = &e.matrix.row(i) / wt;
                for (a, b) in unweighted.iter().zip(v.embeddings().row(id)) {
                    assert!((a - b).abs() < 1e-12);
                }
            }
            let s = subjects.get_or_insert_with(|| e.subject_token_indices.clone());
            assert_eq!(*s, e.subject_token_indices);
        }
    }
}
