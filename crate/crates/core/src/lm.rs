//! Interpolated Kneser-Ney n-gram language models and candidate generation.
//!
//! A model is trained on whole caption sequences `s ‖ n ‖ v`, optionally
//! excluding one fold, so that the model used to generate endings for a
//! context has never seen that context's found ending. Backward models are
//! trained on token-reversed sequences; their public scoring API still takes
//! tokens in natural order and reverses internally.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Context;
use crate::rng;

pub type TokenId = u32;

pub const BOS: TokenId = 0;
pub const EOS: TokenId = 1;
pub const UNK: TokenId = 2;

const RESERVED: [&str; 3] = ["<s>", "</s>", "<unk>"];

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LmError {
    #[error("training corpus is empty after excluding fold {0:?}")]
    EmptyCorpus(Option<u32>),
    #[error("order must be at least 1")]
    InvalidOrder,
    #[error("discount must lie in (0, 1), got {0}")]
    InvalidDiscount(f64),
    #[error("cannot score an empty token sequence")]
    EmptySequence,
    #[error("generator excludes fold {model:?} but the context is in fold {context}")]
    FoldMismatch { model: Option<u32>, context: u32 },
    #[error("endings can only be sampled from a forward model")]
    NotForward,
    #[error("invalid checkpoint: {0}")]
    Checkpoint(String),
}

/// Token ↔ id table. Ids 0..3 are `<s>`, `</s>` and `<unk>`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    tokens: Vec<String>,
    index: BTreeMap<String, TokenId>,
}

impl Default for Vocab {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocab {
    pub fn new() -> Self {
        Self::from(RESERVED.iter().map(|s| s.to_string()).collect::<Vec<_>>())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn insert(&mut self, token: &str) -> TokenId {
        if let Some(&id) = self.index.get(token) {
            return id;
        }
        let id = self.tokens.len() as TokenId;
        self.tokens.push(token.to_string());
        self.index.insert(token.to_string(), id);
        id
    }

    /// Id of `token`, or [`UNK`] when absent.
    pub fn id(&self, token: &str) -> TokenId {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn get(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> &str {
        &self.tokens[id as usize]
    }

    pub fn ids<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<TokenId> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

impl From<Vec<String>> for Vocab {
    fn from(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as TokenId)).collect();
        Self { tokens, index }
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.tokens
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Forward,
    Backward,
}

/// Anything that yields next-token distributions can generate and score.
///
/// Histories are given in the model's own reading order and may be longer or
/// shorter than the model needs; short histories are padded with [`BOS`].
pub trait LanguageModel {
    fn direction(&self) -> Direction;
    fn vocab(&self) -> &Vocab;
    /// The fold this model never saw during training, if any.
    fn excluded_fold(&self) -> Option<u32>;
    /// Writes `P(w | history)` for every vocabulary id into `out`.
    fn distribution(&self, history: &[TokenId], out: &mut Vec<f64>);
    fn prob(&self, history: &[TokenId], token: TokenId) -> f64;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Node {
    total: f64,
    distinct: f64,
    /// Sorted by token id.
    followers: Vec<(TokenId, f64)>,
}

/// Interpolated Kneser-Ney model with a single fixed discount.
///
/// The top level uses raw counts, lower levels use continuation counts
/// (number of distinct left extensions), and the recursion bottoms out in a
/// uniform distribution over every id except `<s>`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "NGramCheckpoint", try_from = "NGramCheckpoint")]
pub struct NGramModel {
    order: usize,
    direction: Direction,
    discount: f64,
    vocab: Vocab,
    excluded_fold: Option<u32>,
    trained_folds: BTreeSet<u32>,
    counts: BTreeMap<Vec<TokenId>, u64>,
    /// `levels[m]` maps a history of length `m` to its continuation table.
    levels: Vec<BTreeMap<Vec<TokenId>, Node>>,
}

/// On-disk form: the top-order counts plus metadata; derived tables are
/// rebuilt on load.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NGramCheckpoint {
    pub order: usize,
    pub direction: Direction,
    pub discount: f64,
    pub vocab: Vocab,
    pub excluded_fold: Option<u32>,
    pub trained_folds: Vec<u32>,
    pub counts: Vec<(Vec<TokenId>, u64)>,
}

impl From<NGramModel> for NGramCheckpoint {
    fn from(m: NGramModel) -> Self {
        Self {
            order: m.order,
            direction: m.direction,
            discount: m.discount,
            vocab: m.vocab,
            excluded_fold: m.excluded_fold,
            trained_folds: m.trained_folds.into_iter().collect(),
            counts: m.counts.into_iter().collect(),
        }
    }
}

impl TryFrom<NGramCheckpoint> for NGramModel {
    type Error = LmError;

    fn try_from(c: NGramCheckpoint) -> Result<Self, LmError> {
        validate_hyper(c.order, c.discount)?;
        let v = c.vocab.len() as TokenId;
        if c.vocab.len() < RESERVED.len() {
            return Err(LmError::Checkpoint("vocabulary lacks reserved symbols".into()));
        }
        for (gram, _) in &c.counts {
            if gram.len() != c.order || gram.iter().any(|&t| t >= v) {
                return Err(LmError::Checkpoint("n-gram with wrong order or unknown id".into()));
            }
        }
        let counts: BTreeMap<_, _> = c.counts.into_iter().collect();
        let levels = build_levels(c.order, &counts);
        Ok(Self {
            order: c.order,
            direction: c.direction,
            discount: c.discount,
            vocab: c.vocab,
            excluded_fold: c.excluded_fold,
            trained_folds: c.trained_folds.into_iter().collect(),
            counts,
            levels,
        })
    }
}

fn validate_hyper(order: usize, discount: f64) -> Result<(), LmError> {
    if order == 0 {
        return Err(LmError::InvalidOrder);
    }
    if !(discount > 0.0 && discount < 1.0) {
        return Err(LmError::InvalidDiscount(discount));
    }
    Ok(())
}

fn build_levels(order: usize, counts: &BTreeMap<Vec<TokenId>, u64>) -> Vec<BTreeMap<Vec<TokenId>, Node>> {
    // Accumulate follower counts per history, level by level from the top.
    let mut raw: Vec<BTreeMap<Vec<TokenId>, BTreeMap<TokenId, f64>>> = vec![BTreeMap::new(); order];
    for (gram, &c) in counts {
        let (h, w) = gram.split_at(order - 1);
        *raw[order - 1].entry(h.to_vec()).or_default().entry(w[0]).or_insert(0.0) += c as f64;
    }
    for m in (0..order - 1).rev() {
        let (lower, upper) = raw.split_at_mut(m + 1);
        for (h, followers) in &upper[0] {
            let shorter = &h[1..];
            let slot = lower[m].entry(shorter.to_vec()).or_default();
            for &w in followers.keys() {
                *slot.entry(w).or_insert(0.0) += 1.0;
            }
        }
    }
    raw.into_iter()
        .map(|level| {
            level
                .into_iter()
                .map(|(h, f)| {
                    let total = f.values().sum();
                    let distinct = f.len() as f64;
                    (h, Node { total, distinct, followers: f.into_iter().collect() })
                })
                .collect()
        })
        .collect()
}

/// One training sentence and the fold it belongs to (`None` = always used).
#[derive(Debug, Clone, Copy)]
pub struct TrainingSentence<'a> {
    pub fold: Option<u32>,
    pub tokens: &'a [String],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LmConfig {
    pub order: usize,
    pub discount: f64,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self { order: 3, discount: 0.75 }
    }
}

/// Trains a model on every sentence whose fold differs from `exclude_fold`.
pub fn train_lm<'a, I>(
    sentences: I,
    cfg: LmConfig,
    direction: Direction,
    exclude_fold: Option<u32>,
) -> Result<NGramModel, LmError>
where
    I: IntoIterator<Item = TrainingSentence<'a>>,
{
    validate_hyper(cfg.order, cfg.discount)?;
    let mut vocab = Vocab::new();
    let mut counts: BTreeMap<Vec<TokenId>, u64> = BTreeMap::new();
    let mut trained_folds = BTreeSet::new();
    let mut seen = 0usize;
    let pad = cfg.order - 1;
    for sent in sentences {
        if sent.fold.is_some() && sent.fold == exclude_fold {
            continue;
        }
        if sent.tokens.is_empty() {
            continue;
        }
        if let Some(f) = sent.fold {
            trained_folds.insert(f);
        }
        seen += 1;
        let mut ids = vec![BOS; pad];
        match direction {
            Direction::Forward => ids.extend(sent.tokens.iter().map(|t| vocab.insert(t))),
            Direction::Backward => ids.extend(sent.tokens.iter().rev().map(|t| vocab.insert(t))),
        }
        ids.push(EOS);
        for end in pad..ids.len() {
            *counts.entry(ids[end - pad..=end].to_vec()).or_insert(0) += 1;
        }
    }
    if seen == 0 {
        return Err(LmError::EmptyCorpus(exclude_fold));
    }
    let levels = build_levels(cfg.order, &counts);
    Ok(NGramModel {
        order: cfg.order,
        direction,
        discount: cfg.discount,
        vocab,
        excluded_fold: exclude_fold,
        trained_folds,
        counts,
        levels,
    })
}

impl NGramModel {
    pub fn order(&self) -> usize {
        self.order
    }

    pub fn discount(&self) -> f64 {
        self.discount
    }

    pub fn trained_folds(&self) -> &BTreeSet<u32> {
        &self.trained_folds
    }

    /// Histories that have observed continuations at the top level.
    pub fn observed_histories(&self) -> impl Iterator<Item = &[TokenId]> {
        self.levels[self.order - 1].keys().map(|h| h.as_slice())
    }

    fn padded<'h>(&self, history: &'h [TokenId], buf: &'h mut Vec<TokenId>) -> &'h [TokenId] {
        let need = self.order - 1;
        if history.len() >= need {
            &history[history.len() - need..]
        } else {
            buf.clear();
            buf.resize(need - history.len(), BOS);
            buf.extend_from_slice(history);
            buf
        }
    }

    fn uniform(&self) -> f64 {
        1.0 / (self.vocab.len() - 1) as f64
    }
}

impl LanguageModel for NGramModel {
    fn direction(&self) -> Direction {
        self.direction
    }

    fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    fn excluded_fold(&self) -> Option<u32> {
        self.excluded_fold
    }

    fn distribution(&self, history: &[TokenId], out: &mut Vec<f64>) {
        let mut buf = Vec::new();
        let h = self.padded(history, &mut buf);
        out.clear();
        out.resize(self.vocab.len(), self.uniform());
        out[BOS as usize] = 0.0;
        for m in 0..self.order {
            let Some(node) = self.levels[m].get(&h[h.len() - m..]) else { continue };
            let backoff = self.discount * node.distinct / node.total;
            for p in out.iter_mut() {
                *p *= backoff;
            }
            for &(w, c) in &node.followers {
                out[w as usize] += (c - self.discount) / node.total;
            }
        }
    }

    fn prob(&self, history: &[TokenId], token: TokenId) -> f64 {
        if token == BOS || token as usize >= self.vocab.len() {
            return 0.0;
        }
        let mut buf = Vec::new();
        let h = self.padded(history, &mut buf);
        let mut p = self.uniform();
        for m in 0..self.order {
            let Some(node) = self.levels[m].get(&h[h.len() - m..]) else { continue };
            p *= self.discount * node.distinct / node.total;
            if let Ok(i) = node.followers.binary_search_by_key(&token, |&(w, _)| w) {
                p += (node.followers[i].1 - self.discount) / node.total;
            }
        }
        p
    }
}

/// Maps natural-order `(tokens, history)` to the model's reading order.
///
/// For a backward model the history is the text that *follows* `tokens`.
fn reading_order<M: LanguageModel + ?Sized, S: AsRef<str>>(
    model: &M,
    tokens: &[S],
    history: &[S],
) -> (Vec<TokenId>, Vec<TokenId>) {
    let v = model.vocab();
    let mut h = v.ids(history);
    let mut t = v.ids(tokens);
    if model.direction() == Direction::Backward {
        h.reverse();
        t.reverse();
    }
    (h, t)
}

/// Sum of natural-log conditional probabilities of `tokens` after `history`.
pub fn sequence_logprob<M: LanguageModel + ?Sized, S: AsRef<str>>(model: &M, tokens: &[S], history: &[S]) -> f64 {
    let (mut seq, toks) = reading_order(model, tokens, history);
    let mut total = 0.0;
    for t in toks {
        total += libm::log(model.prob(&seq, t));
        seq.push(t);
    }
    total
}

/// `exp(-logprob / |tokens|)`.
pub fn perplexity<M: LanguageModel + ?Sized, S: AsRef<str>>(
    model: &M,
    tokens: &[S],
    history: &[S],
) -> Result<f64, LmError> {
    if tokens.is_empty() {
        return Err(LmError::EmptySequence);
    }
    Ok(libm::exp(-sequence_logprob(model, tokens, history) / tokens.len() as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub tokens: Vec<String>,
    /// Log-probability of the sampled tokens under the generator.
    pub gen_logprob: f64,
}

/// One row of `pools.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidatePool {
    pub context_id: String,
    pub candidates: Vec<Candidate>,
    pub short_pool: bool,
    /// Fold the generating model was trained without.
    pub excluded_fold: Option<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SampleConfig {
    pub n_samples: usize,
    pub max_len: usize,
    /// Total draws allowed per pool, as a multiple of `n_samples`.
    pub retry_factor: usize,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self { n_samples: 1023, max_len: crate::MAX_ENDING_LEN, retry_factor: 20 }
    }
}

/// Draws up to `n_samples` distinct endings for `context` by ancestral
/// sampling at temperature one.
///
/// Each draw stops at `</s>` or `max_len` tokens. Empty draws, duplicates and
/// copies of the found ending count against the retry budget; when it runs
/// out the pool is returned short with `short_pool` set.
pub fn sample_endings<M: LanguageModel + ?Sized>(
    model: &M,
    context: &Context,
    cfg: &SampleConfig,
    seed: u64,
) -> Result<CandidatePool, LmError> {
    if model.direction() != Direction::Forward {
        return Err(LmError::NotForward);
    }
    if model.excluded_fold() != Some(context.fold) {
        return Err(LmError::FoldMismatch { model: model.excluded_fold(), context: context.fold });
    }
    let vocab = model.vocab();
    let prefix = vocab.ids(&context.prefix());
    let mut seen: BTreeSet<Vec<TokenId>> = BTreeSet::new();
    let found = vocab.ids(&context.v_found);
    let mut rng = rng::stream(seed, "generate", &context.context_id);
    let mut dist = Vec::with_capacity(vocab.len());
    let mut candidates = Vec::new();
    let budget = cfg.n_samples.saturating_mul(cfg.retry_factor.max(1));
    let mut draws = 0;
    while candidates.len() < cfg.n_samples && draws < budget {
        draws += 1;
        let mut seq = prefix.clone();
        let mut logprob = 0.0;
        for _ in 0..cfg.max_len {
            model.distribution(&seq, &mut dist);
            dist[BOS as usize] = 0.0;
            dist[UNK as usize] = 0.0;
            let total: f64 = dist.iter().sum();
            if total <= 0.0 {
                break;
            }
            let tok = draw(&dist, rng.random::<f64>() * total);
            if tok == EOS {
                break;
            }
            logprob += libm::log(model.prob(&seq, tok));
            seq.push(tok);
        }
        let ending = seq.split_off(prefix.len());
        if ending.is_empty() || ending == found || !seen.insert(ending.clone()) {
            continue;
        }
        candidates.push(Candidate {
            tokens: ending.iter().map(|&t| vocab.token(t).to_string()).collect(),
            gen_logprob: logprob,
        });
    }
    Ok(CandidatePool {
        context_id: context.context_id.clone(),
        short_pool: candidates.len() < cfg.n_samples,
        candidates,
        excluded_fold: model.excluded_fold(),
    })
}

fn draw(weights: &[f64], target: f64) -> TokenId {
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &w) in weights.iter().enumerate() {
        if w <= 0.0 {
            continue;
        }
        acc += w;
        last = i;
        if target < acc {
            return i as TokenId;
        }
    }
    last as TokenId
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use alloc::format;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    fn train(corpus: &[Vec<String>], order: usize, dir: Direction) -> NGramModel {
        train_lm(
            corpus.iter().map(|t| TrainingSentence { fold: None, tokens: t }),
            LmConfig { order, discount: 0.75 },
            dir,
            None,
        )
        .unwrap()
    }

    /// A hand-written deterministic chain: each token has exactly one
    /// successor with probability one.
    pub(crate) struct ChainLm {
        pub vocab: Vocab,
        pub next: BTreeMap<TokenId, TokenId>,
        pub start: TokenId,
        pub direction: Direction,
        pub fold: Option<u32>,
    }

    impl ChainLm {
        pub(crate) fn new(chain: &[&str], direction: Direction, fold: Option<u32>) -> Self {
            let mut vocab = Vocab::new();
            let ids: Vec<_> = chain.iter().map(|t| vocab.insert(t)).collect();
            let mut next = BTreeMap::new();
            for w in ids.windows(2) {
                next.insert(w[0], w[1]);
            }
            next.insert(*ids.last().unwrap(), EOS);
            Self { vocab, next, start: ids[0], direction, fold }
        }
    }

    impl LanguageModel for ChainLm {
        fn direction(&self) -> Direction {
            self.direction
        }
        fn vocab(&self) -> &Vocab {
            &self.vocab
        }
        fn excluded_fold(&self) -> Option<u32> {
            self.fold
        }
        fn distribution(&self, history: &[TokenId], out: &mut Vec<f64>) {
            out.clear();
            out.resize(self.vocab.len(), 0.0);
            let nxt = match history.last() {
                Some(t) => self.next.get(t).copied().unwrap_or(self.start),
                None => self.start,
            };
            out[nxt as usize] = 1.0;
        }
        fn prob(&self, history: &[TokenId], token: TokenId) -> f64 {
            let mut d = Vec::new();
            self.distribution(history, &mut d);
            d[token as usize]
        }
    }

    #[test]
    fn single_bigram_matches_closed_form() {
        let corpus: Vec<_> = (0..100).map(|_| toks("a b")).collect();
        let m = train(&corpus, 2, Direction::Forward);
        let (a, b) = (m.vocab.id("a"), m.vocab.id("b"));
        // Predictable types: a, b, </s>, <unk>. Each of a, b, </s> has a single
        // distinct left neighbour, so the continuation unigram is
        // (1 - D)/3 + D * 3/3 * 1/4.
        let d = 0.75;
        let p_uni_b = (1.0 - d) / 3.0 + d * 1.0 / 4.0;
        let expected = (100.0 - d) / 100.0 + d * 1.0 / 100.0 * p_uni_b;
        assert!((m.prob(&[a], b) - expected).abs() < 1e-15);
        assert!(m.prob(&[a], b) > 0.99);
    }

    #[test]
    fn uniform_unigram_has_perplexity_near_vocab_size() {
        let words = ["p", "q", "r", "s", "t", "u", "v", "w"];
        let mut sent = Vec::new();
        for _ in 0..1000 {
            sent.extend(words.iter().map(|w| w.to_string()));
        }
        let m = train(&[sent], 1, Direction::Forward);
        let sample = toks("q w p p t s r u v q");
        let ppl = perplexity(&m, &sample, &[]).unwrap();
        assert!((ppl - 8.0).abs() / 8.0 < 0.01, "ppl {ppl}");
    }

    #[test]
    fn backward_model_equals_forward_on_reversed_corpus() {
        let corpus = [toks("a man runs fast ."), toks("a dog runs away ."), toks("the man sits .")];
        let reversed: Vec<Vec<String>> = corpus.iter().map(|s| s.iter().rev().cloned().collect()).collect();
        let bwd = train(&corpus, 3, Direction::Backward);
        let fwd_rev = train(&reversed, 3, Direction::Forward);
        let t = toks("the dog runs fast");
        let rev: Vec<String> = t.iter().rev().cloned().collect();
        let empty: [String; 0] = [];
        assert_eq!(
            sequence_logprob(&bwd, &t, &empty).to_bits(),
            sequence_logprob(&fwd_rev, &rev, &empty).to_bits()
        );
    }

    #[test]
    fn deterministic_chain_scores_zero() {
        let lm = ChainLm::new(&["a", "b"], Direction::Forward, None);
        assert_eq!(sequence_logprob(&lm, &toks("b"), &toks("a")), 0.0);
        assert_eq!(perplexity(&lm, &toks("a b"), &[]).unwrap(), 1.0);
    }

    #[test]
    fn independent_halves_give_minus_two_ln_two() {
        // Order-1 model over two equally frequent tokens with no </s> mass to
        // speak of is not exactly 1/2, so build the table by hand instead.
        struct Coin(Vocab);
        impl LanguageModel for Coin {
            fn direction(&self) -> Direction {
                Direction::Forward
            }
            fn vocab(&self) -> &Vocab {
                &self.0
            }
            fn excluded_fold(&self) -> Option<u32> {
                None
            }
            fn distribution(&self, _: &[TokenId], out: &mut Vec<f64>) {
                out.clear();
                out.resize(self.0.len(), 0.0);
                out[3] = 0.5;
                out[4] = 0.5;
            }
            fn prob(&self, h: &[TokenId], t: TokenId) -> f64 {
                let mut d = Vec::new();
                self.distribution(h, &mut d);
                d[t as usize]
            }
        }
        let mut v = Vocab::new();
        v.insert("h");
        v.insert("t");
        let lp = sequence_logprob(&Coin(v), &toks("h t"), &[]);
        assert!((lp + 2.0 * core::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn perplexity_rejects_empty_input() {
        let lm = ChainLm::new(&["a"], Direction::Forward, None);
        let empty: [String; 0] = [];
        assert_eq!(perplexity(&lm, &empty, &empty), Err(LmError::EmptySequence));
    }

    #[test]
    fn training_errors() {
        let corpus = [toks("a b")];
        let sentences = || corpus.iter().map(|t| TrainingSentence { fold: Some(2), tokens: t });
        assert_eq!(
            train_lm(sentences(), LmConfig::default(), Direction::Forward, Some(2)).unwrap_err(),
            LmError::EmptyCorpus(Some(2))
        );
        assert_eq!(
            train_lm(sentences(), LmConfig { order: 0, discount: 0.5 }, Direction::Forward, None).unwrap_err(),
            LmError::InvalidOrder
        );
        assert_eq!(
            train_lm(sentences(), LmConfig { order: 2, discount: 1.0 }, Direction::Forward, None).unwrap_err(),
            LmError::InvalidDiscount(1.0)
        );
        let m = train_lm(sentences(), LmConfig::default(), Direction::Forward, Some(0)).unwrap();
        assert_eq!(m.excluded_fold(), Some(0));
        assert!(m.trained_folds().contains(&2));
    }

    #[test]
    fn unseen_tokens_map_to_unk_and_score_finite() {
        let m = train(&[toks("a b c")], 3, Direction::Forward);
        let lp = sequence_logprob(&m, &toks("zebra b"), &toks("a"));
        assert!(lp.is_finite() && lp < 0.0);
    }

    #[test]
    fn checkpoint_round_trips_exactly() {
        let m = train(&[toks("a b c"), toks("a c b ."), toks("b b a")], 3, Direction::Backward);
        let json = serde_json::to_string(&m).unwrap();
        let back: NGramModel = serde_json::from_str(&json).unwrap();
        assert_eq!(m, back);
    }

    fn ctx(fold: u32, found: &str) -> Context {
        Context {
            context_id: "c1".into(),
            s: toks("someone stands ."),
            n: toks("he"),
            v_found: toks(found),
            fold,
        }
    }

    #[test]
    fn exhausted_support_returns_short_pool() {
        let lm = ChainLm::new(&["x"], Direction::Forward, Some(0));
        let cfg = SampleConfig { n_samples: 5, max_len: 25, retry_factor: 20 };
        let pool = sample_endings(&lm, &ctx(0, "runs ."), &cfg, 1).unwrap();
        assert_eq!(pool.candidates.len(), 1);
        assert_eq!(pool.candidates[0].tokens, toks("x"));
        assert!(pool.short_pool);
    }

    #[test]
    fn fold_mismatch_and_direction_are_enforced() {
        let lm = ChainLm::new(&["x"], Direction::Forward, Some(1));
        let cfg = SampleConfig::default();
        assert_eq!(
            sample_endings(&lm, &ctx(0, "runs ."), &cfg, 1).unwrap_err(),
            LmError::FoldMismatch { model: Some(1), context: 0 }
        );
        let bwd = ChainLm::new(&["x"], Direction::Backward, Some(0));
        assert_eq!(sample_endings(&bwd, &ctx(0, "runs ."), &cfg, 1).unwrap_err(), LmError::NotForward);
    }

    pub(crate) fn rich_corpus() -> Vec<Vec<String>> {
        let subjects = ["he", "she", "the man", "a woman", "the dog", "someone"];
        let verbs = ["runs", "jumps", "sits", "walks", "turns", "waves", "smiles", "falls"];
        let tails = ["away", "down", "quickly", "again", "to the door", "on the floor", "with a ball"];
        let mut out = Vec::new();
        for (i, s) in subjects.iter().enumerate() {
            for (j, v) in verbs.iter().enumerate() {
                for (k, t) in tails.iter().enumerate() {
                    if (i + j + k) % 2 == 0 {
                        out.push(toks(&format!("someone stands . {s} {v} {t} .")));
                    }
                }
            }
        }
        out
    }

    #[test]
    fn rich_corpus_yields_full_unique_pool() {
        let corpus = rich_corpus();
        let m = train_lm(
            corpus.iter().map(|t| TrainingSentence { fold: Some(1), tokens: t }),
            LmConfig::default(),
            Direction::Forward,
            Some(0),
        )
        .unwrap();
        let cfg = SampleConfig { n_samples: 1023, ..SampleConfig::default() };
        let c = ctx(0, "runs away .");
        let pool = sample_endings(&m, &c, &cfg, 5).unwrap();
        assert_eq!(pool.candidates.len(), 1023);
        assert!(!pool.short_pool);
        let unique: BTreeSet<_> = pool.candidates.iter().map(|c| c.tokens.clone()).collect();
        assert_eq!(unique.len(), 1023);
        assert!(pool.candidates.iter().all(|x| x.tokens != c.v_found && x.tokens.len() <= 25));
        assert!(pool.candidates.iter().all(|x| !x.tokens.iter().any(|t| t.starts_with('<'))));
        let again = sample_endings(&m, &c, &cfg, 5).unwrap();
        assert_eq!(pool, again);
    }

    #[test]
    fn gen_logprob_matches_rescoring() {
        let corpus = rich_corpus();
        let m = train_lm(
            corpus.iter().map(|t| TrainingSentence { fold: Some(1), tokens: t }),
            LmConfig::default(),
            Direction::Forward,
            Some(0),
        )
        .unwrap();
        let c = ctx(0, "runs away .");
        let pool = sample_endings(&m, &c, &SampleConfig { n_samples: 50, ..Default::default() }, 2).unwrap();
        for cand in &pool.candidates {
            let lp = sequence_logprob(&m, &cand.tokens, &c.prefix());
            assert_eq!(lp.to_bits(), cand.gen_logprob.to_bits());
        }
    }

    #[test]
    fn distributions_normalize_on_observed_histories() {
        let m = train(&rich_corpus(), 3, Direction::Forward);
        let mut d = Vec::new();
        for h in m.observed_histories() {
            m.distribution(h, &mut d);
            let s: f64 = d.iter().sum();
            assert!((s - 1.0).abs() < 1e-9, "sum {s}");
            for (i, &p) in d.iter().enumerate() {
                assert_eq!(p.to_bits(), m.prob(h, i as TokenId).to_bits());
            }
        }
    }
}
