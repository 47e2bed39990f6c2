//! Adversarial filtering.
//!
//! Each context owns a pool of generated endings and an assignment `A_i` of
//! `k` of them. Every iteration splits the contexts, fits a fresh adversary on
//! the training part, and for each test context swaps up to `n_easy` of the
//! negatives the adversary already sees through for pool endings it scores
//! higher. The test accuracy of each fresh adversary is the trace; it starts
//! high on a biased corpus and falls toward chance as the assignment adapts.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;

use rand::seq::{index, SliceRandom};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::committee::{self, CandidateInput, CommitteeConfig, CommitteeError, InputDims, Members, TrainInstance};
use crate::features::{CommonWords, PplFeatures, Standardizer};
use crate::lm::Vocab;
use crate::rng;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AfError {
    #[error("invalid filtering config: {0}")]
    Config(&'static str),
    #[error("context {context} has {size} pool candidates, fewer than k = {k}")]
    PoolTooSmall { context: usize, size: usize, k: usize },
    #[error("invalid assignment for context {context}: {reason}")]
    InvalidAssignment { context: usize, reason: &'static str },
    #[error("assignment covers {got} contexts, expected {expected}")]
    ContextCount { expected: usize, got: usize },
    #[error("resume state is inconsistent: {0}")]
    Resume(&'static str),
    #[error(transparent)]
    Committee(#[from] CommitteeError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AfConfig {
    pub k: usize,
    pub n_easy: usize,
    pub train_fraction: f64,
    /// Iterations `0..mlp_only_iterations` train only the MLP member.
    pub mlp_only_iterations: usize,
    pub max_iterations: usize,
    /// Convergence window `w`.
    pub window: usize,
    /// Convergence tolerance above chance.
    pub delta: f64,
    pub seed: u64,
}

impl Default for AfConfig {
    fn default() -> Self {
        Self {
            k: 9,
            n_easy: 2,
            train_fraction: 0.8,
            mlp_only_iterations: 100,
            max_iterations: 300,
            window: 20,
            delta: 0.02,
            seed: 0,
        }
    }
}

impl AfConfig {
    pub fn validate(&self) -> Result<(), AfError> {
        if self.k == 0 {
            return Err(AfError::Config("k must be positive"));
        }
        if self.n_easy > self.k {
            return Err(AfError::Config("n_easy must not exceed k"));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(AfError::Config("train_fraction must lie in (0, 1)"));
        }
        if self.window == 0 {
            return Err(AfError::Config("window must be positive"));
        }
        if self.delta.is_nan() || self.delta < 0.0 {
            return Err(AfError::Config("delta must be non-negative"));
        }
        Ok(())
    }

    pub fn chance(&self) -> f64 {
        1.0 / (self.k + 1) as f64
    }

    pub fn members_for(&self, iteration: usize) -> Members {
        if iteration < self.mlp_only_iterations {
            Members::MLP_ONLY
        } else {
            Members::ALL
        }
    }
}

/// `k` distinct pool indices per context.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assignment {
    /// Number of completed iterations that produced this assignment.
    pub iteration: usize,
    pub indices: Vec<Vec<u32>>,
}

impl Assignment {
    pub fn validate(&self, k: usize, pool_sizes: &[usize]) -> Result<(), AfError> {
        if self.indices.len() != pool_sizes.len() {
            return Err(AfError::ContextCount { expected: pool_sizes.len(), got: self.indices.len() });
        }
        for (context, (a, &n)) in self.indices.iter().zip(pool_sizes).enumerate() {
            if a.len() != k {
                return Err(AfError::InvalidAssignment { context, reason: "wrong size" });
            }
            if a.iter().any(|&j| j as usize >= n) {
                return Err(AfError::InvalidAssignment { context, reason: "index out of range" });
            }
            let mut sorted = a.clone();
            sorted.sort_unstable();
            if sorted.windows(2).any(|w| w[0] == w[1]) {
                return Err(AfError::InvalidAssignment { context, reason: "duplicate index" });
            }
        }
        Ok(())
    }
}

/// Uniform random `k`-subset of each pool, in ascending index order.
pub fn init_assignment(pool_sizes: &[usize], k: usize, seed: u64) -> Result<Assignment, AfError> {
    let mut indices = Vec::with_capacity(pool_sizes.len());
    for (i, &n) in pool_sizes.iter().enumerate() {
        if n < k {
            return Err(AfError::PoolTooSmall { context: i, size: n, k });
        }
        let mut r = rng::stream_n(seed, "assign", i as u64);
        let mut a: Vec<u32> = index::sample(&mut r, n, k).into_iter().map(|j| j as u32).collect();
        a.sort_unstable();
        indices.push(a);
    }
    Ok(Assignment { iteration: 0, indices })
}

/// A candidate of a context: the found ending or a pool entry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Cand {
    Positive,
    Pool(u32),
}

/// A trained adversary. Pure per-candidate function.
pub trait Scorer: Sync {
    fn score(&self, context: usize, cand: Cand) -> f64;
}

/// Something that can be fit on a training split.
pub trait Adversary {
    type Model: Scorer;

    /// Fits on `train` (context indices) with their current negatives;
    /// returns the model and its final training loss.
    fn fit(
        &mut self,
        train: &[usize],
        assignment: &Assignment,
        members: Members,
        iteration: usize,
    ) -> Result<(Self::Model, f64), AfError>;
}

/// A frozen score table; fitting returns it unchanged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreTable {
    pub positive: Vec<f64>,
    pub pool: Vec<Vec<f64>>,
}

impl ScoreTable {
    pub fn pool_sizes(&self) -> Vec<usize> {
        self.pool.iter().map(Vec::len).collect()
    }
}

impl Scorer for ScoreTable {
    fn score(&self, context: usize, cand: Cand) -> f64 {
        match cand {
            Cand::Positive => self.positive[context],
            Cand::Pool(j) => self.pool[context][j as usize],
        }
    }
}

impl Adversary for ScoreTable {
    type Model = ScoreTable;

    fn fit(&mut self, _: &[usize], _: &Assignment, _: Members, _: usize) -> Result<(ScoreTable, f64), AfError> {
        Ok((self.clone(), 0.0))
    }
}

/// One swap performed during an iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Replacement {
    pub context: usize,
    pub removed: u32,
    pub added: u32,
    pub removed_score: f64,
    pub added_score: f64,
}

/// The swaps for one context under the rule: take the largest `r ≤ n_easy`
/// for which the `r` lowest-scoring easy negatives can each be matched to a
/// distinct, strictly higher-scoring candidate outside `A_i`, using the `r`
/// highest-scoring outside candidates. Ties go to the lower index.
///
/// Returns `(removed, added)` pairs; the lowest removed pairs with the lowest
/// of the chosen additions.
pub fn select_replacements(
    assigned: &[u32],
    positive: f64,
    scores: &[f64],
    n_easy: usize,
) -> Vec<(u32, u32)> {
    let mut easy: Vec<u32> = assigned.iter().copied().filter(|&j| positive > scores[j as usize]).collect();
    easy.sort_by(|&a, &b| cmp_score(scores, a, b));
    let mut in_a = vec![false; scores.len()];
    for &j in assigned {
        in_a[j as usize] = true;
    }
    let mut outside: Vec<u32> = (0..scores.len() as u32).filter(|&m| !in_a[m as usize]).collect();
    // Highest first; equal scores keep the lower index first.
    outside.sort_by(|&a, &b| {
        scores[b as usize].partial_cmp(&scores[a as usize]).unwrap_or(Ordering::Equal).then(a.cmp(&b))
    });
    let r_max = n_easy.min(easy.len()).min(outside.len());
    for r in (1..=r_max).rev() {
        let adds: Vec<u32> = outside[..r].iter().rev().copied().collect();
        let ok = easy[..r].iter().zip(&adds).all(|(&j, &m)| scores[m as usize] > scores[j as usize]);
        if ok {
            return easy[..r].iter().copied().zip(adds).collect();
        }
    }
    Vec::new()
}

fn cmp_score(scores: &[f64], a: u32, b: u32) -> Ordering {
    scores[a as usize].partial_cmp(&scores[b as usize]).unwrap_or(Ordering::Equal).then(a.cmp(&b))
}

/// Whether the positive strictly beats every assigned negative.
pub fn is_correct(assigned: &[u32], positive: f64, scores: &[f64]) -> bool {
    assigned.iter().all(|&j| positive > scores[j as usize])
}

/// Fraction of `contexts` where the positive strictly beats all of `A_i`.
pub fn accuracy<S: Scorer + ?Sized>(scorer: &S, assignment: &Assignment, contexts: &[usize]) -> f64 {
    if contexts.is_empty() {
        return 0.0;
    }
    let hits = contexts
        .iter()
        .filter(|&&i| {
            let pos = scorer.score(i, Cand::Positive);
            assignment.indices[i].iter().all(|&j| pos > scorer.score(i, Cand::Pool(j)))
        })
        .count();
    hits as f64 / contexts.len() as f64
}

/// Train/test split of `0..n` for one iteration; both halves sorted. Both
/// halves are non-empty from two contexts on; a lone context is tested.
pub fn split(n: usize, train_fraction: f64, seed: u64, iteration: usize) -> (Vec<usize>, Vec<usize>) {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream_n(seed, "split", iteration as u64));
    let n_train = if n < 2 { 0 } else { (libm::round(n as f64 * train_fraction) as usize).clamp(1, n - 1) };
    let mut train = order[..n_train].to_vec();
    let mut test = order[n_train..].to_vec();
    train.sort_unstable();
    test.sort_unstable();
    (train, test)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub accuracy: f64,
    pub loss: f64,
    pub replacements: usize,
    pub active_members: Members,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationOutcome {
    pub assignment: Assignment,
    pub row: TraceRow,
    pub replacements: Vec<Replacement>,
    pub test_contexts: Vec<usize>,
}

struct ContextResult {
    correct: bool,
    swaps: Vec<(u32, u32, f64, f64)>,
}

fn scan_context<S: Scorer>(scorer: &S, i: usize, assigned: &[u32], pool_size: usize, n_easy: usize) -> ContextResult {
    let pos = scorer.score(i, Cand::Positive);
    let scores: Vec<f64> = (0..pool_size as u32).map(|j| scorer.score(i, Cand::Pool(j))).collect();
    let correct = is_correct(assigned, pos, &scores);
    let swaps = select_replacements(assigned, pos, &scores, n_easy)
        .into_iter()
        .map(|(j, m)| (j, m, scores[j as usize], scores[m as usize]))
        .collect();
    ContextResult { correct, swaps }
}

#[cfg(feature = "parallel")]
fn scan_all<S: Scorer>(scorer: &S, test: &[usize], a: &Assignment, sizes: &[usize], n_easy: usize) -> Vec<ContextResult> {
    use rayon::prelude::*;
    test.par_iter().map(|&i| scan_context(scorer, i, &a.indices[i], sizes[i], n_easy)).collect()
}

#[cfg(not(feature = "parallel"))]
fn scan_all<S: Scorer>(scorer: &S, test: &[usize], a: &Assignment, sizes: &[usize], n_easy: usize) -> Vec<ContextResult> {
    test.iter().map(|&i| scan_context(scorer, i, &a.indices[i], sizes[i], n_easy)).collect()
}

/// One split/fit/reassign step. `iteration` is zero-based and selects the
/// split, the committee seed and the active members.
pub fn af_iteration<A: Adversary>(
    pool_sizes: &[usize],
    assignment: &Assignment,
    cfg: &AfConfig,
    adversary: &mut A,
    iteration: usize,
) -> Result<IterationOutcome, AfError> {
    cfg.validate()?;
    assignment.validate(cfg.k, pool_sizes)?;
    let members = cfg.members_for(iteration);
    let (train, test) = split(pool_sizes.len(), cfg.train_fraction, cfg.seed, iteration);
    let (model, loss) = adversary.fit(&train, assignment, members, iteration)?;
    let results = scan_all(&model, &test, assignment, pool_sizes, cfg.n_easy);

    let mut next = assignment.clone();
    next.iteration = iteration + 1;
    let mut replacements = Vec::new();
    let mut hits = 0usize;
    for (&i, res) in test.iter().zip(results) {
        hits += res.correct as usize;
        for (j, m, sj, sm) in res.swaps {
            assert!(sm > sj, "replacement must outscore the removed negative");
            let slot = next.indices[i].iter().position(|&x| x == j).expect("easy index is assigned");
            next.indices[i][slot] = m;
            replacements.push(Replacement { context: i, removed: j, added: m, removed_score: sj, added_score: sm });
        }
    }
    let accuracy = if test.is_empty() { 0.0 } else { hits as f64 / test.len() as f64 };
    let row = TraceRow { iteration, accuracy, loss, replacements: replacements.len(), active_members: members };
    Ok(IterationOutcome { assignment: next, row, replacements, test_contexts: test })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Converged,
    MaxIterations,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AfRun {
    pub assignment: Assignment,
    pub trace: Vec<TraceRow>,
    pub stop: StopReason,
}

/// Trailing-window convergence test.
pub fn converged(trace: &[TraceRow], cfg: &AfConfig) -> bool {
    if trace.len() < cfg.window {
        return false;
    }
    let tail = &trace[trace.len() - cfg.window..];
    let mean = tail.iter().map(|r| r.accuracy).sum::<f64>() / cfg.window as f64;
    mean <= cfg.chance() + cfg.delta
}

/// Iterates until convergence or `max_iterations`. Pass a previous
/// `(assignment, trace)` to resume; `checkpoint` sees every iteration.
pub fn run_af<A, F>(
    pool_sizes: &[usize],
    cfg: &AfConfig,
    adversary: &mut A,
    resume: Option<(Assignment, Vec<TraceRow>)>,
    mut checkpoint: F,
) -> Result<AfRun, AfError>
where
    A: Adversary,
    F: FnMut(&IterationOutcome) -> Result<(), AfError>,
{
    cfg.validate()?;
    let (mut assignment, mut trace) = match resume {
        Some((a, t)) => {
            if a.iteration != t.len() {
                return Err(AfError::Resume("assignment iteration does not match trace length"));
            }
            if t.iter().enumerate().any(|(i, r)| r.iteration != i) {
                return Err(AfError::Resume("trace iterations are not consecutive"));
            }
            a.validate(cfg.k, pool_sizes)?;
            (a, t)
        }
        None => (init_assignment(pool_sizes, cfg.k, cfg.seed)?, Vec::new()),
    };
    loop {
        if converged(&trace, cfg) {
            return Ok(AfRun { assignment, trace, stop: StopReason::Converged });
        }
        if trace.len() >= cfg.max_iterations {
            return Ok(AfRun { assignment, trace, stop: StopReason::MaxIterations });
        }
        let out = af_iteration(pool_sizes, &assignment, cfg, adversary, trace.len())?;
        checkpoint(&out)?;
        trace.push(out.row.clone());
        assignment = out.assignment;
    }
}

/// Cached committee inputs for one candidate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandFeatures {
    pub ppl: PplFeatures,
    /// Ids into [`AfFeatures::vocab`].
    pub word_ids: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextFeatures {
    pub positive: CandFeatures,
    pub pool: Vec<CandFeatures>,
}

/// Precomputed features of every candidate of every context.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AfFeatures {
    pub vocab: Vocab,
    pub contexts: Vec<ContextFeatures>,
}

impl AfFeatures {
    pub fn pool_sizes(&self) -> Vec<usize> {
        self.contexts.iter().map(|c| c.pool.len()).collect()
    }

    fn cand(&self, i: usize, c: Cand) -> &CandFeatures {
        match c {
            Cand::Positive => &self.contexts[i].positive,
            Cand::Pool(j) => &self.contexts[i].pool[j as usize],
        }
    }
}

/// Fits a fresh stylistic committee each iteration.
pub struct CommitteeAdversary<'a> {
    pub features: &'a AfFeatures,
    pub config: CommitteeConfig,
    /// Base seed; each iteration derives its own.
    pub seed: u64,
}

pub struct CommitteeScorer<'a> {
    pub params: committee::Params,
    common_map: Vec<u32>,
    features: &'a AfFeatures,
}

impl<'a> CommitteeScorer<'a> {
    fn encode(&self, ids: &[u32]) -> Vec<u32> {
        ids.iter().map(|&w| self.common_map[w as usize]).collect()
    }
}

impl Scorer for CommitteeScorer<'_> {
    fn score(&self, context: usize, cand: Cand) -> f64 {
        let f = self.features.cand(context, cand);
        let common = self.encode(&f.word_ids);
        self.params.logit(&CandidateInput { ppl: &f.ppl, word_ids: &f.word_ids, common_ids: &common })
    }
}

impl<'a> Adversary for CommitteeAdversary<'a> {
    type Model = CommitteeScorer<'a>;

    fn fit(
        &mut self,
        train: &[usize],
        assignment: &Assignment,
        members: Members,
        iteration: usize,
    ) -> Result<(CommitteeScorer<'a>, f64), AfError> {
        if train.is_empty() {
            return Err(AfError::Config("the committee needs at least two contexts"));
        }
        let feats = self.features;
        let cands: Vec<(usize, Cand)> = train
            .iter()
            .flat_map(|&i| {
                core::iter::once((i, Cand::Positive)).chain(assignment.indices[i].iter().map(move |&j| (i, Cand::Pool(j))))
            })
            .collect();

        let mut counts: BTreeMap<u32, u64> = BTreeMap::new();
        for &(i, c) in &cands {
            for &w in &feats.cand(i, c).word_ids {
                *counts.entry(w).or_insert(0) += 1;
            }
        }
        let counts = counts.into_iter().map(|(w, n)| (feats.vocab.token(w).into(), n)).collect();
        let common = CommonWords::from_counts(&counts, self.config.common_top_k);
        let common_map = common.mapping_for(&feats.vocab);

        let standardizer = Standardizer::fit(cands.iter().map(|&(i, c)| &feats.cand(i, c).ppl));
        let encoded: Vec<Vec<u32>> = cands
            .iter()
            .map(|&(i, c)| feats.cand(i, c).word_ids.iter().map(|&w| common_map[w as usize]).collect())
            .collect();
        let per = assignment.indices.first().map_or(0, Vec::len) + 1;
        let instances: Vec<TrainInstance<'_>> = cands
            .chunks(per)
            .zip(encoded.chunks(per))
            .map(|(cs, enc)| TrainInstance {
                candidates: cs
                    .iter()
                    .zip(enc)
                    .map(|(&(i, c), e)| {
                        let f = feats.cand(i, c);
                        CandidateInput { ppl: &f.ppl, word_ids: &f.word_ids, common_ids: e }
                    })
                    .collect(),
            })
            .collect();

        let mut cfg = self.config.clone();
        cfg.active_members = members;
        cfg.seed = rng::derive_seed_n(self.seed, "committee", iteration as u64);
        let dims = InputDims { vocab: feats.vocab.len(), common: common.id_count() };
        let mut params = committee::init_params(&cfg, dims, cfg.seed)?;
        params.standardizer = standardizer;
        let report = committee::train(&mut params, &instances)?;
        Ok((CommitteeScorer { params, common_map, features: feats }, report.final_loss))
    }
}
