//! Identity visual-token cache: an identity-only denoising pass scores visual
//! tokens by their text-image attention mass on subject tokens, keeps the
//! top-k fraction, and stores their self-attention keys and values per
//! `(layer, timestep)`. [`inject_kv`] prepends a cached entry to a layer's
//! current keys and values.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use ndarray::{s, Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::denoiser::{combine_guidance, AttentionRecord, Denoiser, DenoiserRequest};
use crate::error::{Error, Result};
use crate::prompt::{embed, null_prompt, FusedPrompt, GuidanceConfig, PromptVocabulary};
use crate::schedule::{denoise_step, LatentState, NoiseSchedule};

pub const CACHE_VERSION: u32 = 1;
const CACHE_MAGIC: &str = "ZZCACHE";

/// `max(1, floor(k_ratio * n))`.
pub fn k_count(k_ratio: f64, n: usize) -> usize {
    ((k_ratio * n as f64 + 1e-9).floor() as usize).clamp(1, n.max(1))
}

#[derive(Debug, Clone, PartialEq)]
pub struct CacheEntry {
    pub keys: Array2<f64>,
    pub values: Array2<f64>,
    pub source_indices: Vec<usize>,
}

/// How token indices are chosen per timestep.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMode {
    /// Independent top-k per cached layer.
    PerLayer,
    /// Average the scores of `source_layers`, select once, reuse the index
    /// set for every cached layer.
    Averaged { source_layers: Vec<usize> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct IdentityTokenCache {
    entries: BTreeMap<(usize, usize), CacheEntry>,
    k_ratio: f64,
    num_steps: usize,
    layer_mask: Vec<usize>,
    tokens: usize,
    dim: usize,
    identity_prompt: String,
    schedule_fingerprint: String,
    selection: SelectionMode,
}

impl IdentityTokenCache {
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        entries: BTreeMap<(usize, usize), CacheEntry>,
        k_ratio: f64,
        num_steps: usize,
        layer_mask: Vec<usize>,
        tokens: usize,
        dim: usize,
        identity_prompt: String,
        schedule_fingerprint: String,
    ) -> Self {
        Self {
            entries,
            k_ratio,
            num_steps,
            layer_mask,
            tokens,
            dim,
            identity_prompt,
            schedule_fingerprint,
            selection: SelectionMode::PerLayer,
        }
    }

    pub fn entries(&self) -> &BTreeMap<(usize, usize), CacheEntry> {
        &self.entries
    }

    pub fn k_ratio(&self) -> f64 {
        self.k_ratio
    }

    pub fn k_count(&self) -> usize {
        k_count(self.k_ratio, self.tokens)
    }

    pub fn num_steps(&self) -> usize {
        self.num_steps
    }

    pub fn layer_mask(&self) -> &[usize] {
        &self.layer_mask
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn identity_prompt(&self) -> &str {
        &self.identity_prompt
    }

    pub fn schedule_fingerprint(&self) -> &str {
        &self.schedule_fingerprint
    }

    pub fn selection(&self) -> &SelectionMode {
        &self.selection
    }

    /// View of the entries for timestep `m`.
    pub fn slice(&self, timestep: usize) -> InjectionSlice<'_> {
        InjectionSlice {
            cache: self,
            timestep,
        }
    }

    /// Fails unless the cache was built for this exact schedule.
    pub fn check_schedule(&self, sched: &NoiseSchedule) -> Result<()> {
        if self.num_steps != sched.num_steps() {
            return Err(Error::config(format!(
                "cache built for T = {} but the sampler uses T = {}",
                self.num_steps,
                sched.num_steps()
            )));
        }
        if !self.schedule_fingerprint.is_empty() && self.schedule_fingerprint != sched.fingerprint() {
            return Err(Error::config("cache was built with a different noise schedule"));
        }
        Ok(())
    }

    /// Restricts injection to a subset of the cached layers.
    pub fn with_layer_mask(mut self, layers: &[usize]) -> Result<Self> {
        if let Some(l) = layers.iter().find(|l| !self.layer_mask.contains(l)) {
            return Err(Error::cache(format!("layer {l} was not cached")));
        }
        self.layer_mask = layers.to_vec();
        self.entries.retain(|(l, _), _| layers.contains(l));
        Ok(self)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = CacheHeader {
            format_version: CACHE_VERSION,
            k_ratio: self.k_ratio,
            num_steps: self.num_steps,
            layer_mask: self.layer_mask.clone(),
            tokens: self.tokens,
            dim: self.dim,
            identity_prompt: self.identity_prompt.clone(),
            schedule_fingerprint: self.schedule_fingerprint.clone(),
            branch: "conditional".to_string(),
            selection: self.selection.clone(),
            entries: self
                .entries
                .iter()
                .map(|(&(layer, timestep), e)| EntryHeader {
                    layer,
                    timestep,
                    source_indices: e.source_indices.clone(),
                })
                .collect(),
        };
        let mut out = Vec::new();
        out.extend_from_slice(CACHE_MAGIC.as_bytes());
        out.push(b'\n');
        out.extend_from_slice(serde_json::to_string(&header).expect("header serializes").as_bytes());
        out.push(b'\n');
        for e in self.entries.values() {
            for v in e.keys.iter().chain(e.values.iter()) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_reader(reader: impl Read) -> Result<Self> {
        let what = "identity cache";
        let mut reader = BufReader::new(reader);
        let mut line = String::new();
        reader
            .read_line(&mut line)
            .map_err(|e| Error::format(what, e.to_string()))?;
        if line.trim_end() != CACHE_MAGIC {
            return Err(Error::format(what, "bad magic"));
        }
        line.clear();
        reader
            .read_line(&mut line)
            .map_err(|e| Error::format(what, e.to_string()))?;
        let header: CacheHeader =
            serde_json::from_str(line.trim_end()).map_err(|e| Error::format(what, e.to_string()))?;
        if header.format_version != CACHE_VERSION {
            return Err(Error::format(
                what,
                format!("unsupported format version {}", header.format_version),
            ));
        }
        let mut entries = BTreeMap::new();
        for eh in header.entries {
            let rows = eh.source_indices.len();
            let keys = read_matrix(&mut reader, rows, header.dim, what)?;
            let values = read_matrix(&mut reader, rows, header.dim, what)?;
            entries.insert(
                (eh.layer, eh.timestep),
                CacheEntry {
                    keys,
                    values,
                    source_indices: eh.source_indices,
                },
            );
        }
        let mut rest = Vec::new();
        reader
            .read_to_end(&mut rest)
            .map_err(|e| Error::format(what, e.to_string()))?;
        if !rest.is_empty() {
            return Err(Error::format(what, "trailing bytes after payload"));
        }
        Ok(Self {
            entries,
            k_ratio: header.k_ratio,
            num_steps: header.num_steps,
            layer_mask: header.layer_mask,
            tokens: header.tokens,
            dim: header.dim,
            identity_prompt: header.identity_prompt,
            schedule_fingerprint: header.schedule_fingerprint,
            selection: header.selection,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_reader(f)
    }

    /// Hex SHA-256 of the serialized cache.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }
}

fn read_matrix(reader: &mut impl Read, rows: usize, cols: usize, what: &str) -> Result<Array2<f64>> {
    let mut buf = vec![0u8; rows * cols * 8];
    reader
        .read_exact(&mut buf)
        .map_err(|e| Error::format(what, format!("truncated payload: {e}")))?;
    let data = buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Array2::from_shape_vec((rows, cols), data).map_err(|e| Error::format(what, e.to_string()))
}

#[derive(Debug, Serialize, Deserialize)]
struct CacheHeader {
    format_version: u32,
    k_ratio: f64,
    num_steps: usize,
    layer_mask: Vec<usize>,
    tokens: usize,
    dim: usize,
    identity_prompt: String,
    schedule_fingerprint: String,
    branch: String,
    selection: SelectionMode,
    entries: Vec<EntryHeader>,
}

#[derive(Debug, Serialize, Deserialize)]
struct EntryHeader {
    layer: usize,
    timestep: usize,
    source_indices: Vec<usize>,
}

/// The cache entries of one timestep, handed to the denoiser.
#[derive(Debug, Clone, Copy)]
pub struct InjectionSlice<'a> {
    cache: &'a IdentityTokenCache,
    timestep: usize,
}

impl<'a> InjectionSlice<'a> {
    pub fn timestep(&self) -> usize {
        self.timestep
    }

    /// Entry for `layer`, `None` if the layer is not injected. A masked layer
    /// without an entry at this timestep is a cache error.
    pub fn entry_for(&self, layer: usize) -> Result<Option<&'a CacheEntry>> {
        if !self.cache.layer_mask.contains(&layer) {
            return Ok(None);
        }
        self.cache
            .entries
            .get(&(layer, self.timestep))
            .map(Some)
            .ok_or_else(|| {
                Error::cache(format!(
                    "no cache entry for layer {layer} at timestep {}",
                    self.timestep
                ))
            })
    }
}

/// Per-visual-token subject relevance for one `(layer, timestep)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectScoreVector {
    pub scores: Vec<f64>,
    pub layer: usize,
    pub timestep: usize,
}

/// `scores_i = sum_{j in subject} text_image_scores[i, j]`.
pub fn subject_scores(record: &AttentionRecord, subject_token_indices: &[usize]) -> Result<SubjectScoreVector> {
    if subject_token_indices.is_empty() {
        return Err(Error::config("subject token set is empty"));
    }
    let m = record.text_image_scores.ncols();
    if let Some(j) = subject_token_indices.iter().find(|&&j| j >= m) {
        return Err(Error::config(format!("subject token {j} outside the prompt's {m} tokens")));
    }
    let scores = record
        .text_image_scores
        .rows()
        .into_iter()
        .map(|row| subject_token_indices.iter().map(|&j| row[j]).sum())
        .collect();
    Ok(SubjectScoreVector {
        scores,
        layer: record.layer_index,
        timestep: record.timestep,
    })
}

/// Indices of the `max(1, floor(k_ratio * n))` highest scores, ties broken
/// toward the lower index, returned in ascending order.
pub fn top_k_select(scores: &[f64], k_ratio: f64) -> Vec<usize> {
    assert!(k_ratio > 0.0 && k_ratio <= 1.0, "k_ratio must lie in (0, 1]");
    assert!(!scores.is_empty(), "cannot select from an empty score vector");
    let k = k_count(k_ratio, scores.len());
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut picked = order[..k].to_vec();
    picked.sort_unstable();
    picked
}

/// Prepends the cached rows: `[cache.keys; keys]`, `[cache.values; values]`.
pub fn inject_kv(
    keys: &Array2<f64>,
    values: &Array2<f64>,
    entry: &CacheEntry,
) -> Result<(Array2<f64>, Array2<f64>)> {
    if entry.keys.ncols() != keys.ncols() || entry.values.ncols() != values.ncols() {
        return Err(Error::cache(format!(
            "cached width {} does not match projection width {}",
            entry.keys.ncols(),
            keys.ncols()
        )));
    }
    if entry.keys.nrows() != entry.values.nrows() {
        return Err(Error::cache("cached keys and values have different row counts"));
    }
    let stack = |cached: &Array2<f64>, cur: &Array2<f64>| {
        let k = cached.nrows();
        let mut out = Array2::zeros((k + cur.nrows(), cur.ncols()));
        out.slice_mut(s![..k, ..]).assign(cached);
        out.slice_mut(s![k.., ..]).assign(cur);
        out
    };
    Ok((stack(&entry.keys, keys), stack(&entry.values, values)))
}

/// Options of the identity pass.
#[derive(Debug, Clone, PartialEq)]
pub struct CacheOptions {
    pub k_ratio: f64,
    /// Layers to cache; empty selects all of them.
    pub layer_mask: Vec<usize>,
    pub selection: SelectionMode,
    pub guidance: GuidanceConfig,
    pub seed: u64,
}

impl Default for CacheOptions {
    fn default() -> Self {
        Self {
            k_ratio: 0.2,
            layer_mask: Vec::new(),
            selection: SelectionMode::PerLayer,
            guidance: GuidanceConfig::default(),
            seed: 0,
        }
    }
}

/// Standard-normal latent `[1, tokens, channels]` at timestep `t`.
pub fn gaussian_latent(seed: u64, tokens: usize, channels: usize, t: usize) -> LatentState {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = Array3::from_shape_simple_fn((1, tokens, channels), || StandardNormal.sample(&mut rng));
    let mut state = LatentState::new(data, t);
    state.seed_lineage.push(seed);
    state
}

/// Runs a guided DDIM pass under the identity prompt, recording attention
/// from the conditional branch, and caches the top-k subject tokens of every
/// masked layer at every timestep.
pub fn build_cache(
    identity_prompt: &FusedPrompt,
    denoiser: &dyn Denoiser,
    vocab: &PromptVocabulary,
    sched: &NoiseSchedule,
    tokens: usize,
    channels: usize,
    opts: &CacheOptions,
) -> Result<IdentityTokenCache> {
    if !(opts.k_ratio > 0.0 && opts.k_ratio <= 1.0) {
        return Err(Error::config(format!("k_ratio must lie in (0, 1], got {}", opts.k_ratio)));
    }
    let layers = denoiser.layer_count();
    // an empty mask means every layer
    let mask: Vec<usize> = if opts.layer_mask.is_empty() {
        (0..layers).collect()
    } else {
        opts.layer_mask.iter().copied().filter(|&l| l < layers).collect()
    };
    if mask.is_empty() {
        return Err(Error::config("layer mask selects none of the model's layers"));
    }
    if let SelectionMode::Averaged { source_layers } = &opts.selection {
        if source_layers.is_empty() || source_layers.iter().any(|&l| l >= layers) {
            return Err(Error::config("averaged selection needs valid source layers"));
        }
    }
    let g = &opts.guidance;
    let cond = embed(identity_prompt, None, vocab, g.w_active, g.w_active)?;
    let null = null_prompt(vocab);
    let subject = cond.subject_token_indices.clone();
    if subject.is_empty() {
        return Err(Error::config("identity prompt contains no subject tokens"));
    }
    let text = identity_prompt.identity().join(" ");

    let mut x = gaussian_latent(opts.seed, tokens, channels, sched.num_steps());
    let mut entries = BTreeMap::new();
    let mut dim = 0;
    for t in (1..=sched.num_steps()).rev() {
        let cond_resp = denoiser.predict(&DenoiserRequest::new(&x, &cond).recording(true))?;
        let records = cond_resp
            .attention_records
            .and_then(|mut r| if r.is_empty() { None } else { Some(r.swap_remove(0)) })
            .ok_or_else(|| Error::Internal("identity pass returned no attention records".into()))?;
        if records.len() != layers {
            return Err(Error::Internal("attention records do not cover every layer".into()));
        }
        let averaged = match &opts.selection {
            SelectionMode::PerLayer => None,
            SelectionMode::Averaged { source_layers } => {
                let mut acc = vec![0.0; tokens];
                for &l in source_layers {
                    let sv = subject_scores(&records[l], &subject)?;
                    acc.iter_mut().zip(&sv.scores).for_each(|(a, s)| *a += s);
                }
                acc.iter_mut().for_each(|a| *a /= source_layers.len() as f64);
                Some(top_k_select(&acc, opts.k_ratio))
            }
        };
        for &l in &mask {
            let rec = &records[l];
            let picked = match &averaged {
                Some(idx) => idx.clone(),
                None => top_k_select(&subject_scores(rec, &subject)?.scores, opts.k_ratio),
            };
            dim = rec.self_keys.ncols();
            entries.insert(
                (l, t),
                CacheEntry {
                    keys: rec.self_keys.select(ndarray::Axis(0), &picked),
                    values: rec.self_values.select(ndarray::Axis(0), &picked),
                    source_indices: picked,
                },
            );
        }
        let eps = if g.s_main == 1.0 {
            cond_resp.eps
        } else {
            let eps_null = denoiser.predict(&DenoiserRequest::new(&x, &null))?.eps;
            combine_guidance(&cond_resp.eps, &eps_null, g.s_main)
        };
        x = denoise_step(&x, &eps, sched)?;
    }
    Ok(IdentityTokenCache {
        entries,
        k_ratio: opts.k_ratio,
        num_steps: sched.num_steps(),
        layer_mask: mask,
        tokens,
        dim,
        identity_prompt: text,
        schedule_fingerprint: sched.fingerprint(),
        selection: opts.selection.clone(),
    })
}
