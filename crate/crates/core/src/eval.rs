//! Shallow baselines for measuring leftover stylistic signal in an assembled
//! dataset: random, shortest ending, a unary hashed bag-of-n-grams classifier
//! over endings alone, and a bilinear model over mean context and ending
//! embeddings.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::hash::Hasher;

use fnv::FnvHasher;
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::features::EmbeddingTable;
use crate::lm::Vocab;
use crate::math::{log_sum_exp, sigmoid, softmax};
use crate::rng;
use crate::validation::{AssembledQuestion, Origin};

/// The part of a question the baselines read.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalQuestion {
    pub context_id: String,
    pub context: Vec<String>,
    pub endings: Vec<Vec<String>>,
    pub gold_index: usize,
}

impl From<&AssembledQuestion> for EvalQuestion {
    fn from(q: &AssembledQuestion) -> Self {
        let mut context = q.s.clone();
        context.extend(q.n.iter().cloned());
        Self { context_id: q.context_id.clone(), context, endings: q.endings.clone(), gold_index: q.gold_index }
    }
}

fn accuracy_of(questions: &[EvalQuestion], mut pick: impl FnMut(usize, &EvalQuestion) -> usize) -> f64 {
    if questions.is_empty() {
        return 0.0;
    }
    let hits = questions.iter().enumerate().filter(|(i, q)| pick(*i, q) == q.gold_index).count();
    hits as f64 / questions.len() as f64
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

pub fn random_baseline(questions: &[EvalQuestion], seed: u64) -> f64 {
    let mut r = rng::stream_n(seed, "random-baseline", 0);
    accuracy_of(questions, |_, q| r.random_range(0..q.endings.len().max(1)))
}

/// Always picks the shortest ending; ties go to the lowest index.
pub fn length_baseline(questions: &[EvalQuestion]) -> f64 {
    accuracy_of(questions, |_, q| {
        let lens: Vec<f64> = q.endings.iter().map(|e| -(e.len() as f64)).collect();
        argmax(&lens)
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NgramConfig {
    pub ngram_max: usize,
    /// log2 of the number of hash buckets.
    pub bucket_bits: u32,
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for NgramConfig {
    fn default() -> Self {
        Self { ngram_max: 2, bucket_bits: 18, epochs: 5, learning_rate: 0.1, seed: 0 }
    }
}

/// Logistic regression over hashed n-gram counts of an ending.
#[derive(Debug, Clone, PartialEq)]
pub struct NgramModel {
    cfg: NgramConfig,
    weights: Vec<f64>,
    bias: f64,
}

fn ngram_features(tokens: &[String], cfg: &NgramConfig) -> Vec<(usize, f64)> {
    let mask = (1usize << cfg.bucket_bits) - 1;
    let mut counts: BTreeMap<usize, f64> = BTreeMap::new();
    for n in 1..=cfg.ngram_max {
        for w in tokens.windows(n) {
            let mut h = FnvHasher::default();
            h.write_usize(n);
            for t in w {
                h.write(t.as_bytes());
                h.write_u8(0);
            }
            *counts.entry(h.finish() as usize & mask).or_insert(0.0) += 1.0;
        }
    }
    counts.into_iter().collect()
}

impl NgramModel {
    pub fn logit(&self, tokens: &[String]) -> f64 {
        self.bias + ngram_features(tokens, &self.cfg).iter().map(|&(i, v)| self.weights[i] * v).sum::<f64>()
    }

    pub fn prob(&self, tokens: &[String]) -> f64 {
        sigmoid(self.logit(tokens))
    }

    /// Picks the ending with the highest probability of being gold.
    pub fn accuracy(&self, questions: &[EvalQuestion]) -> f64 {
        accuracy_of(questions, |_, q| argmax(&q.endings.iter().map(|e| self.logit(e)).collect::<Vec<_>>()))
    }
}

/// Trains with per-ending binary cross-entropy (gold 1, distractors 0) by
/// SGD; returns the model and the mean loss of every epoch.
pub fn train_ngram(train: &[EvalQuestion], cfg: &NgramConfig) -> (NgramModel, Vec<f64>) {
    let mut model = NgramModel { cfg: cfg.clone(), weights: vec![0.0; 1 << cfg.bucket_bits], bias: 0.0 };
    let examples: Vec<(Vec<(usize, f64)>, f64)> = train
        .iter()
        .flat_map(|q| {
            q.endings
                .iter()
                .enumerate()
                .map(move |(i, e)| (ngram_features(e, cfg), if i == q.gold_index { 1.0 } else { 0.0 }))
        })
        .collect();
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut r = rng::stream_n(cfg.seed, "ngram", 0);
    let mut losses = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut r);
        let mut total = 0.0;
        for &k in &order {
            let (x, y) = &examples[k];
            let z = model.bias + x.iter().map(|&(i, v)| model.weights[i] * v).sum::<f64>();
            let p = sigmoid(z);
            total += y * log_sum_exp(&[0.0, -z]) + (1.0 - y) * log_sum_exp(&[0.0, z]);
            let g = p - y;
            model.bias -= cfg.learning_rate * g;
            for &(i, v) in x {
                model.weights[i] -= cfg.learning_rate * g * v;
            }
        }
        losses.push(if examples.is_empty() { 0.0 } else { total / examples.len() as f64 });
    }
    (model, losses)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DualBowConfig {
    pub embed_dim: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    /// Scale of the random fixed embeddings.
    pub embed_scale: f64,
    pub seed: u64,
}

impl Default for DualBowConfig {
    fn default() -> Self {
        Self { embed_dim: 32, epochs: 10, learning_rate: 0.5, embed_scale: 1.0, seed: 0 }
    }
}

/// `softmax_i(c W v_iᵀ)` with fixed embeddings and trainable `W`.
#[derive(Debug, Clone, PartialEq)]
pub struct DualBow {
    pub vocab: Vocab,
    pub embeddings: EmbeddingTable,
    /// Row-major `dim × dim`.
    pub w: Vec<f64>,
}

impl DualBow {
    /// Embeddings for every token in `questions`, optionally overridden by
    /// pretrained vectors; `W` starts at zero.
    pub fn new(
        questions: &[&[EvalQuestion]],
        cfg: &DualBowConfig,
        pretrained: Option<&BTreeMap<String, Vec<f64>>>,
    ) -> Self {
        let mut vocab = Vocab::new();
        for set in questions {
            for q in set.iter() {
                q.context.iter().chain(q.endings.iter().flatten()).for_each(|t| {
                    vocab.insert(t);
                });
            }
        }
        let embeddings = EmbeddingTable::init(&vocab, cfg.embed_dim, cfg.seed, cfg.embed_scale, pretrained);
        Self { vocab, embeddings, w: vec![0.0; cfg.embed_dim * cfg.embed_dim] }
    }

    pub fn mean_embedding(&self, tokens: &[String]) -> Vec<f64> {
        let d = self.embeddings.dim;
        let mut out = vec![0.0; d];
        if tokens.is_empty() {
            return out;
        }
        for t in tokens {
            let id = self.vocab.id(t) as usize;
            crate::math::axpy(1.0 / tokens.len() as f64, self.embeddings.row(id), &mut out);
        }
        out
    }

    fn bilinear(&self, c: &[f64], v: &[f64]) -> f64 {
        let d = self.embeddings.dim;
        (0..d).map(|a| c[a] * crate::math::dot(&self.w[a * d..(a + 1) * d], v)).sum()
    }

    pub fn scores(&self, q: &EvalQuestion) -> Vec<f64> {
        let c = self.mean_embedding(&q.context);
        q.endings.iter().map(|e| self.bilinear(&c, &self.mean_embedding(e))).collect()
    }

    /// Cross-entropy of the gold ending and its gradient with respect to `W`.
    pub fn loss_grad(&self, q: &EvalQuestion) -> (f64, Vec<f64>) {
        let d = self.embeddings.dim;
        let c = self.mean_embedding(&q.context);
        let vs: Vec<Vec<f64>> = q.endings.iter().map(|e| self.mean_embedding(e)).collect();
        let s: Vec<f64> = vs.iter().map(|v| self.bilinear(&c, v)).collect();
        let p = softmax(&s);
        let mut g = vec![0.0; d * d];
        for (i, v) in vs.iter().enumerate() {
            let coef = p[i] - if i == q.gold_index { 1.0 } else { 0.0 };
            for a in 0..d {
                crate::math::axpy(coef * c[a], v, &mut g[a * d..(a + 1) * d]);
            }
        }
        (log_sum_exp(&s) - s[q.gold_index], g)
    }

    pub fn accuracy(&self, questions: &[EvalQuestion]) -> f64 {
        accuracy_of(questions, |_, q| argmax(&self.scores(q)))
    }

    /// Per-question SGD on `W`; returns the mean loss of every epoch.
    pub fn train(&mut self, train: &[EvalQuestion], cfg: &DualBowConfig) -> Vec<f64> {
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut r = rng::stream_n(cfg.seed, "dualbow", 0);
        let mut losses = Vec::with_capacity(cfg.epochs);
        for _ in 0..cfg.epochs {
            order.shuffle(&mut r);
            let mut total = 0.0;
            for &k in &order {
                let (l, g) = self.loss_grad(&train[k]);
                total += l;
                crate::math::axpy(-cfg.learning_rate, &g, &mut self.w);
            }
            losses.push(if train.is_empty() { 0.0 } else { total / train.len() as f64 });
        }
        losses
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub questions: usize,
    pub found_gold: usize,
    pub generated_gold: usize,
    pub unique_contexts: usize,
    pub unique_endings: usize,
    pub vocab: usize,
}

/// Counts over assembled questions; vocabulary spans contexts and endings.
pub fn stats_report(questions: &[AssembledQuestion]) -> DatasetStats {
    let mut contexts = BTreeSet::new();
    let mut endings = BTreeSet::new();
    let mut vocab = BTreeSet::new();
    let mut found = 0;
    for q in questions {
        let mut ctx = q.s.clone();
        ctx.extend(q.n.iter().cloned());
        vocab.extend(ctx.iter().cloned());
        contexts.insert(ctx);
        for e in &q.endings {
            vocab.extend(e.iter().cloned());
            endings.insert(e.clone());
        }
        found += (q.origin == Origin::FoundGold) as usize;
    }
    DatasetStats {
        questions: questions.len(),
        found_gold: found,
        generated_gold: questions.len() - found,
        unique_contexts: contexts.len(),
        unique_endings: endings.len(),
        vocab: vocab.len(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub val_fold: u32,
    pub test_fold: u32,
    pub ngram: NgramConfig,
    pub dual_bow: DualBowConfig,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { val_fold: 3, test_fold: 4, ngram: NgramConfig::default(), dual_bow: DualBowConfig::default(), seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineResult {
    pub baseline: String,
    pub split: String,
    pub accuracy: f64,
    pub n_questions: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub results: Vec<BaselineResult>,
    pub stats: DatasetStats,
    /// Per-epoch training loss of each trained baseline.
    pub train_loss: BTreeMap<String, Vec<f64>>,
}

impl EvalReport {
    pub fn get(&self, baseline: &str, split: &str) -> Option<f64> {
        self.results.iter().find(|r| r.baseline == baseline && r.split == split).map(|r| r.accuracy)
    }

    /// Fixed-width text table.
    pub fn render(&self) -> String {
        let mut out = format!("{:<10} {:<6} {:>9} {:>6}\n", "baseline", "split", "accuracy", "n");
        for r in &self.results {
            out.push_str(&format!("{:<10} {:<6} {:>9.4} {:>6}\n", r.baseline, r.split, r.accuracy, r.n_questions));
        }
        let s = &self.stats;
        out.push_str(&format!(
            "\nquestions {}  found_gold {}  generated_gold {}  contexts {}  endings {}  vocab {}\n",
            s.questions, s.found_gold, s.generated_gold, s.unique_contexts, s.unique_endings, s.vocab
        ));
        out
    }
}

/// Leave-one-fold-out accuracy of every baseline over all questions, reported
/// under the split name `cv`. Less noisy than a single held-out fold on small
/// datasets.
pub fn cross_validate(
    questions: &[AssembledQuestion],
    cfg: &EvalConfig,
    pretrained: Option<&BTreeMap<String, Vec<f64>>>,
) -> Vec<BaselineResult> {
    let folds: BTreeSet<u32> = questions.iter().map(|q| q.fold).collect();
    let all: Vec<EvalQuestion> = questions.iter().map(EvalQuestion::from).collect();
    let mut hits: BTreeMap<&str, f64> = BTreeMap::new();
    for &f in &folds {
        let (held, train): (Vec<_>, Vec<_>) =
            questions.iter().zip(&all).partition(|(q, _)| q.fold == f);
        let held: Vec<EvalQuestion> = held.into_iter().map(|(_, e)| e.clone()).collect();
        let train: Vec<EvalQuestion> = train.into_iter().map(|(_, e)| e.clone()).collect();
        let n = held.len() as f64;
        let (ngram, _) = train_ngram(&train, &cfg.ngram);
        let mut bow = DualBow::new(&[&train, &held], &cfg.dual_bow, pretrained);
        bow.train(&train, &cfg.dual_bow);
        let seed = rng::derive_seed_n(cfg.seed, "eval-cv", f as u64);
        *hits.entry("random").or_insert(0.0) += random_baseline(&held, seed) * n;
        *hits.entry("length").or_insert(0.0) += length_baseline(&held) * n;
        *hits.entry("ngram").or_insert(0.0) += ngram.accuracy(&held) * n;
        *hits.entry("dual_bow").or_insert(0.0) += bow.accuracy(&held) * n;
    }
    let total = questions.len();
    ["random", "length", "ngram", "dual_bow"]
        .into_iter()
        .map(|b| BaselineResult {
            baseline: b.to_string(),
            split: "cv".to_string(),
            accuracy: if total == 0 { 0.0 } else { hits.get(b).copied().unwrap_or(0.0) / total as f64 },
            n_questions: total,
        })
        .collect()
}

/// Splits by fold, trains the learned baselines on the training folds and
/// scores every baseline on validation and test.
pub fn evaluate(
    questions: &[AssembledQuestion],
    cfg: &EvalConfig,
    pretrained: Option<&BTreeMap<String, Vec<f64>>>,
) -> EvalReport {
    let pick = |f: &dyn Fn(u32) -> bool| -> Vec<EvalQuestion> {
        questions.iter().filter(|q| f(q.fold)).map(EvalQuestion::from).collect()
    };
    let train = pick(&|f| f != cfg.val_fold && f != cfg.test_fold);
    let splits = [("val", pick(&|f| f == cfg.val_fold)), ("test", pick(&|f| f == cfg.test_fold))];
    let (ngram, ngram_loss) = train_ngram(&train, &cfg.ngram);
    let sets: Vec<&[EvalQuestion]> =
        core::iter::once(train.as_slice()).chain(splits.iter().map(|(_, s)| s.as_slice())).collect();
    let mut bow = DualBow::new(&sets, &cfg.dual_bow, pretrained);
    let bow_loss = bow.train(&train, &cfg.dual_bow);
    let mut results = Vec::new();
    for (name, set) in &splits {
        let mut push = |b: &str, a: f64| {
            results.push(BaselineResult {
                baseline: b.to_string(),
                split: name.to_string(),
                accuracy: a,
                n_questions: set.len(),
            })
        };
        push("random", random_baseline(set, rng::derive_seed(cfg.seed, "eval", name)));
        push("length", length_baseline(set));
        push("ngram", ngram.accuracy(set));
        push("dual_bow", bow.accuracy(set));
    }
    results.extend(cross_validate(questions, cfg, pretrained));
    EvalReport {
        results,
        stats: stats_report(questions),
        train_loss: [("ngram".to_string(), ngram_loss), ("dual_bow".to_string(), bow_loss)].into(),
    }
}
