//! Stylistic feature extraction for committee members.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lm::{sequence_logprob, Direction, LanguageModel, TokenId, Vocab};
use crate::rng;

/// Number of perplexity/length features.
pub const N_PPL: usize = 7;

pub type PplFeatures = [f64; N_PPL];

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FeatureError {
    #[error("ending is empty")]
    EmptyEnding,
    #[error("context is empty")]
    EmptyContext,
    #[error("expected a {expected:?} model")]
    WrongDirection { expected: Direction },
    #[error("non-finite feature {index} ({value})")]
    NonFinite { index: usize, value: f64 },
    #[error("embedding file line {line}: {message}")]
    EmbeddingFormat { line: usize, message: String },
}

/// Everything the committee reads for one candidate ending.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StyleFeatures {
    pub f_ppl: PplFeatures,
    /// Word ids of the second sentence `n ‖ v`.
    pub second_ids: Vec<TokenId>,
    /// Common-word/pseudo-tag encoding of the same sequence.
    pub common_ids: Vec<u32>,
}

/// The seven perplexity/length features of an ending.
///
/// In order: log-perplexity of the context alone (forward), of the ending
/// given the context (forward), of the context given the ending (backward),
/// of the ending alone (backward); the log-probability of the ending's last
/// token (forward); the context length; the ending length. Lengths count
/// tokens.
pub fn lm_features<F, B>(fwd: &F, bwd: &B, context: &[String], ending: &[String]) -> Result<PplFeatures, FeatureError>
where
    F: LanguageModel + ?Sized,
    B: LanguageModel + ?Sized,
{
    if fwd.direction() != Direction::Forward {
        return Err(FeatureError::WrongDirection { expected: Direction::Forward });
    }
    if bwd.direction() != Direction::Backward {
        return Err(FeatureError::WrongDirection { expected: Direction::Backward });
    }
    if ending.is_empty() {
        return Err(FeatureError::EmptyEnding);
    }
    if context.is_empty() {
        return Err(FeatureError::EmptyContext);
    }
    let nothing: &[String] = &[];
    let lc = context.len() as f64;
    let le = ending.len() as f64;
    let last = ending.len() - 1;
    let mut before_last = context.to_vec();
    before_last.extend_from_slice(&ending[..last]);
    let f = [
        -sequence_logprob(fwd, context, nothing) / lc,
        -sequence_logprob(fwd, ending, context) / le,
        -sequence_logprob(bwd, context, ending) / lc,
        -sequence_logprob(bwd, ending, nothing) / le,
        sequence_logprob(fwd, &ending[last..], &before_last),
        lc,
        le,
    ];
    if let Some((index, &value)) = f.iter().enumerate().find(|(_, v)| !v.is_finite()) {
        return Err(FeatureError::NonFinite { index, value });
    }
    Ok(f)
}

/// Coarse word classes standing in for part-of-speech tags.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum PseudoTag {
    Ing,
    Ed,
    S,
    Ly,
    Num,
    Other,
}

pub const N_PSEUDO_TAGS: usize = 6;

pub fn pseudo_tag(token: &str) -> PseudoTag {
    let numeric = !token.is_empty()
        && token.chars().any(|c| c.is_ascii_digit())
        && token.chars().all(|c| c.is_ascii_digit() || c == '.' || c == ',');
    if numeric {
        PseudoTag::Num
    } else if token.ends_with("ing") {
        PseudoTag::Ing
    } else if token.ends_with("ed") {
        PseudoTag::Ed
    } else if token.ends_with("ly") {
        PseudoTag::Ly
    } else if token.ends_with('s') {
        PseudoTag::S
    } else {
        PseudoTag::Other
    }
}

/// Keeps the `top_k` most frequent words and maps everything else to one of
/// six pseudo-tags.
///
/// Word ids are `0..top_k` (by descending frequency, ties by token); tag ids
/// are `top_k..top_k + 6`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommonWords {
    top_k: usize,
    top: BTreeMap<String, u32>,
}

impl CommonWords {
    pub fn from_counts(counts: &BTreeMap<String, u64>, top_k: usize) -> Self {
        let mut ranked: Vec<(&String, u64)> = counts.iter().map(|(t, &c)| (t, c)).collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        let top = ranked
            .into_iter()
            .take(top_k)
            .enumerate()
            .map(|(i, (t, _))| (t.clone(), i as u32))
            .collect();
        Self { top_k, top }
    }

    /// Size of the id space.
    pub fn id_count(&self) -> usize {
        self.top_k + N_PSEUDO_TAGS
    }

    pub fn encode_token(&self, token: &str) -> u32 {
        match self.top.get(token) {
            Some(&id) => id,
            None => self.top_k as u32 + pseudo_tag(token) as u32,
        }
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<u32> {
        tokens.iter().map(|t| self.encode_token(t.as_ref())).collect()
    }

    /// Common id for every id of `vocab`, for re-encoding cached word ids.
    pub fn mapping_for(&self, vocab: &Vocab) -> Vec<u32> {
        vocab.tokens().iter().map(|t| self.encode_token(t)).collect()
    }
}

/// Token frequencies over a set of sequences.
pub fn count_tokens<'a, I, S>(seqs: I) -> BTreeMap<String, u64>
where
    I: IntoIterator<Item = &'a [S]>,
    S: AsRef<str> + 'a,
{
    let mut counts = BTreeMap::new();
    for seq in seqs {
        for t in seq {
            *counts.entry(t.as_ref().to_string()).or_insert(0) += 1;
        }
    }
    counts
}

/// Per-feature mean and standard deviation, fit on a training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: PplFeatures,
    pub std: PplFeatures,
}

impl Default for Standardizer {
    fn default() -> Self {
        Self { mean: [0.0; N_PPL], std: [1.0; N_PPL] }
    }
}

impl Standardizer {
    pub fn fit<'a, I: IntoIterator<Item = &'a PplFeatures>>(rows: I) -> Self {
        let mut n = 0.0;
        let mut sum = [0.0; N_PPL];
        let mut sq = [0.0; N_PPL];
        for r in rows {
            n += 1.0;
            for i in 0..N_PPL {
                sum[i] += r[i];
                sq[i] += r[i] * r[i];
            }
        }
        if n == 0.0 {
            return Self::default();
        }
        let mut out = Self::default();
        for i in 0..N_PPL {
            let m = sum[i] / n;
            let var = (sq[i] / n - m * m).max(0.0);
            let sd = libm::sqrt(var);
            out.mean[i] = m;
            out.std[i] = if sd > 1e-9 { sd } else { 1.0 };
        }
        out
    }

    pub fn apply(&self, x: &PplFeatures) -> PplFeatures {
        let mut out = [0.0; N_PPL];
        for i in 0..N_PPL {
            out[i] = (x[i] - self.mean[i]) / self.std[i];
        }
        out
    }
}

/// Dense `rows × dim` embedding matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingTable {
    pub dim: usize,
    pub data: Vec<f64>,
    pub trainable: bool,
}

impl EmbeddingTable {
    /// Scaled-normal init, overwritten by `pretrained` vectors for tokens it
    /// covers. Row `UNK` always exists because every vocabulary reserves it.
    pub fn init(
        vocab: &Vocab,
        dim: usize,
        seed: u64,
        scale: f64,
        pretrained: Option<&BTreeMap<String, Vec<f64>>>,
    ) -> Self {
        let mut rng = rng::stream(seed, "embedding", "");
        let mut data = Vec::with_capacity(vocab.len() * dim);
        for _ in 0..vocab.len() * dim {
            let z: f64 = StandardNormal.sample(&mut rng);
            data.push(z * scale);
        }
        if let Some(pre) = pretrained {
            for (id, tok) in vocab.tokens().iter().enumerate() {
                if let Some(vec) = pre.get(tok).filter(|v| v.len() == dim) {
                    data[id * dim..(id + 1) * dim].copy_from_slice(vec);
                }
            }
        }
        Self { dim, data, trainable: pretrained.is_none() }
    }

    pub fn rows(&self) -> usize {
        self.data.len() / self.dim.max(1)
    }

    pub fn row(&self, id: usize) -> &[f64] {
        &self.data[id * self.dim..(id + 1) * self.dim]
    }
}

/// Parses `token v1 … vd` lines; blank lines are skipped and every vector
/// must have the same length.
pub fn parse_embedding_text(text: &str) -> Result<BTreeMap<String, Vec<f64>>, FeatureError> {
    let mut out = BTreeMap::new();
    let mut dim = None;
    for (i, line) in text.lines().enumerate() {
        let mut parts = line.split_whitespace();
        let Some(token) = parts.next() else { continue };
        let vec: Result<Vec<f64>, _> = parts.map(str::parse::<f64>).collect();
        let vec = vec.map_err(|e| FeatureError::EmbeddingFormat { line: i + 1, message: e.to_string() })?;
        if vec.is_empty() {
            return Err(FeatureError::EmbeddingFormat { line: i + 1, message: "no values".into() });
        }
        match dim {
            None => dim = Some(vec.len()),
            Some(d) if d != vec.len() => {
                return Err(FeatureError::EmbeddingFormat {
                    line: i + 1,
                    message: alloc::format!("expected {d} values, found {}", vec.len()),
                })
            }
            _ => {}
        }
        out.insert(token.to_string(), vec);
    }
    Ok(out)
}
