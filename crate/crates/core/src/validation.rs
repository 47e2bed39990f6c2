//! Human verification of filtered endings.
//!
//! A task shows the found ending and five of the context's assigned
//! generations in a seeded order. Annotators label every ending likely,
//! unlikely or gibberish and pick a best and second best. Completed tasks are
//! assembled into four-way questions or sent back with the offending endings
//! swapped for unseen assigned generations.
//!
//! This module is pure state: the service layer feeds it time and persists
//! what it returns.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;

use rand::seq::{index, SliceRandom};
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Context;
use crate::lm::CandidatePool;
use crate::rng;

/// Endings per task.
pub const TASK_ENDINGS: usize = 6;
/// Endings per assembled question.
pub const QUESTION_ENDINGS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Likely,
    Unlikely,
    Gibberish,
}

impl Label {
    /// Plausibility rank: gibberish < unlikely < likely.
    fn rank(self) -> u8 {
        match self {
            Label::Gibberish => 0,
            Label::Unlikely => 1,
            Label::Likely => 2,
        }
    }
}

/// Where an ending came from. Never sent to annotators.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Provenance {
    Found,
    Generated { pool_index: u32, gen_logprob: f64 },
}

impl Provenance {
    pub fn is_found(&self) -> bool {
        matches!(self, Provenance::Found)
    }

    fn gen_logprob(&self) -> f64 {
        match self {
            Provenance::Found => f64::INFINITY,
            Provenance::Generated { gen_logprob, .. } => *gen_logprob,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskStatus {
    Open,
    Claimed,
    Done,
    Reannotate,
    Rejected,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskEnding {
    /// Display position, `0..6`.
    pub ending_id: u32,
    pub tokens: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationTask {
    pub task_id: String,
    pub context_id: String,
    pub fold: u32,
    pub round: u32,
    pub s: Vec<String>,
    pub n: Vec<String>,
    pub endings: Vec<TaskEnding>,
    /// Indexed by `ending_id`.
    pub provenance: Vec<Provenance>,
    /// Pool indices shown in this or any earlier round.
    pub shown: Vec<u32>,
}

/// What the client sees: no provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskView {
    pub task_id: String,
    pub context: String,
    pub s: Vec<String>,
    pub n: Vec<String>,
    pub endings: Vec<TaskEnding>,
}

impl AnnotationTask {
    pub fn view(&self) -> TaskView {
        let mut ctx = self.s.join(" ");
        if !self.n.is_empty() {
            ctx.push(' ');
            ctx.push_str(&self.n.join(" "));
        }
        TaskView {
            task_id: self.task_id.clone(),
            context: ctx,
            s: self.s.clone(),
            n: self.n.clone(),
            endings: self.endings.clone(),
        }
    }

    pub fn found_id(&self) -> u32 {
        self.provenance.iter().position(Provenance::is_found).expect("task has a found ending") as u32
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationResponse {
    pub task_id: String,
    pub annotator_id: String,
    /// Indexed by `ending_id`.
    pub labels: Vec<Label>,
    pub best: u32,
    pub second_best: u32,
    /// Milliseconds since the epoch, set by the service.
    #[serde(default)]
    pub timestamp: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldError {
    pub field: String,
    pub message: String,
}

fn field_error(field: &str, message: &str) -> FieldError {
    FieldError { field: field.to_string(), message: message.to_string() }
}

/// Checks a response against its task; returns every violation.
pub fn validate_response(task: &AnnotationTask, r: &AnnotationResponse) -> Result<(), Vec<FieldError>> {
    let mut errs = Vec::new();
    let n = task.endings.len();
    if r.task_id != task.task_id {
        errs.push(field_error("task_id", "does not match the task"));
    }
    if r.annotator_id.trim().is_empty() {
        errs.push(field_error("annotator_id", "must not be empty"));
    }
    if r.labels.len() != n {
        errs.push(field_error("labels", &format!("expected {n} labels, got {}", r.labels.len())));
    }
    for (field, pick) in [("best", r.best), ("second_best", r.second_best)] {
        if pick as usize >= n {
            errs.push(field_error(field, "unknown ending_id"));
        } else if r.labels.get(pick as usize) == Some(&Label::Gibberish) {
            errs.push(field_error(field, "must not be labeled gibberish"));
        }
    }
    if r.best == r.second_best {
        errs.push(field_error("second_best", "must differ from best"));
    }
    if errs.is_empty() {
        Ok(())
    } else {
        Err(errs)
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ValidationError {
    #[error("context {context_id}: {have} assigned endings, need {need}")]
    TooFewAssigned { context_id: String, have: usize, need: usize },
    #[error("context {context_id}: assigned index {index} outside pool of {pool}")]
    BadIndex { context_id: String, index: u32, pool: usize },
    #[error("pool belongs to {pool}, context is {context}")]
    PoolMismatch { context: String, pool: String },
}

fn task_id(context_id: &str, round: u32) -> String {
    format!("{context_id}:r{round}")
}

/// Found ending plus `n_generated` endings drawn uniformly from `assigned`,
/// in a seeded display order.
pub fn make_task(
    ctx: &Context,
    pool: &CandidatePool,
    assigned: &[u32],
    n_generated: usize,
    seed: u64,
) -> Result<AnnotationTask, ValidationError> {
    if pool.context_id != ctx.context_id {
        return Err(ValidationError::PoolMismatch { context: ctx.context_id.clone(), pool: pool.context_id.clone() });
    }
    if assigned.len() < n_generated {
        return Err(ValidationError::TooFewAssigned {
            context_id: ctx.context_id.clone(),
            have: assigned.len(),
            need: n_generated,
        });
    }
    if let Some(&bad) = assigned.iter().find(|&&j| j as usize >= pool.candidates.len()) {
        return Err(ValidationError::BadIndex {
            context_id: ctx.context_id.clone(),
            index: bad,
            pool: pool.candidates.len(),
        });
    }
    let mut r = rng::stream(seed, "task", &ctx.context_id);
    let picks: Vec<u32> = index::sample(&mut r, assigned.len(), n_generated).into_iter().map(|i| assigned[i]).collect();
    let mut items: Vec<(Vec<String>, Provenance)> = vec![(ctx.v_found.clone(), Provenance::Found)];
    for &j in &picks {
        let c = &pool.candidates[j as usize];
        items.push((c.tokens.clone(), Provenance::Generated { pool_index: j, gen_logprob: c.gen_logprob }));
    }
    items.shuffle(&mut r);
    let (endings, provenance) = items
        .into_iter()
        .enumerate()
        .map(|(i, (tokens, p))| (TaskEnding { ending_id: i as u32, tokens }, p))
        .unzip();
    Ok(AnnotationTask {
        task_id: task_id(&ctx.context_id, 0),
        context_id: ctx.context_id.clone(),
        fold: ctx.fold,
        round: 0,
        s: ctx.s.clone(),
        n: ctx.n.clone(),
        endings,
        provenance,
        shown: picks,
    })
}

/// Next round of a task: each flagged generated ending is swapped for an
/// assigned generation never shown before; other endings keep their slots.
/// `None` when too few unseen assigned generations remain.
pub fn reannotate(
    task: &AnnotationTask,
    flagged: &[u32],
    pool: &CandidatePool,
    assigned: &[u32],
    seed: u64,
) -> Option<AnnotationTask> {
    let slots: Vec<usize> = flagged
        .iter()
        .map(|&e| e as usize)
        .filter(|&e| e < task.provenance.len() && !task.provenance[e].is_found())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let shown: BTreeSet<u32> = task.shown.iter().copied().collect();
    let fresh: Vec<u32> = assigned.iter().copied().filter(|j| !shown.contains(j)).collect();
    if slots.is_empty() || fresh.len() < slots.len() {
        return None;
    }
    let round = task.round + 1;
    let mut r = rng::stream(seed, "reannotate", &task_id(&task.context_id, round));
    let picks: Vec<u32> = index::sample(&mut r, fresh.len(), slots.len()).into_iter().map(|i| fresh[i]).collect();
    let mut next = task.clone();
    next.round = round;
    next.task_id = task_id(&task.context_id, round);
    for (&slot, &j) in slots.iter().zip(&picks) {
        let c = &pool.candidates[j as usize];
        next.endings[slot].tokens = c.tokens.clone();
        next.provenance[slot] = Provenance::Generated { pool_index: j, gen_logprob: c.gen_logprob };
        next.shown.push(j);
    }
    Some(next)
}

/// Which response decides best/second best when several exist.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "kind", content = "annotator")]
pub enum Adjudicator {
    /// The earliest response by timestamp.
    #[default]
    Earliest,
    /// A named annotator's response if present, else the earliest.
    Annotator(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AssemblyConfig {
    pub adjudicator: Adjudicator,
    /// Rounds after which a task that still fails is rejected.
    pub max_rounds: u32,
    /// Folds whose contexts may yield generated-gold questions.
    pub training_folds: BTreeSet<u32>,
    pub seed: u64,
}

impl Default for AssemblyConfig {
    fn default() -> Self {
        Self { adjudicator: Adjudicator::Earliest, max_rounds: 3, training_folds: [0, 1, 2].into(), seed: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    FoundGold,
    GeneratedGold,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pick {
    Best,
    SecondBest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EndingSource {
    pub provenance: Provenance,
    pub label: Label,
    pub pick: Option<Pick>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredEnding {
    pub tokens: Vec<String>,
    pub source: EndingSource,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssembledQuestion {
    pub question_id: String,
    pub context_id: String,
    pub s: Vec<String>,
    pub n: Vec<String>,
    pub endings: Vec<Vec<String>>,
    pub gold_index: usize,
    pub origin: Origin,
    pub fold: u32,
    pub sources: Vec<EndingSource>,
    /// Fifth-ranked distractor, kept out of the default view.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fourth_distractor: Option<StoredEnding>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum Assembly {
    Questions { questions: Vec<AssembledQuestion> },
    Reannotate { flagged: Vec<u32>, reason: String },
    Reject { reason: String },
}

/// Per-ending labels and picks after resolving multiple responses.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Resolved {
    pub labels: Vec<Label>,
    pub best: u32,
    pub second_best: u32,
}

/// Majority label per ending (ties go to the adjudicating response's label,
/// then to the more plausible label); best/second best from the adjudicator.
pub fn resolve(responses: &[AnnotationResponse], adjudicator: &Adjudicator) -> Option<Resolved> {
    let earliest = responses.iter().enumerate().min_by_key(|(i, r)| (r.timestamp, *i))?.1;
    let judge = match adjudicator {
        Adjudicator::Earliest => earliest,
        Adjudicator::Annotator(a) => responses.iter().find(|r| &r.annotator_id == a).unwrap_or(earliest),
    };
    let n = judge.labels.len();
    let labels = (0..n)
        .map(|e| {
            let mut counts: BTreeMap<Label, usize> = BTreeMap::new();
            for r in responses {
                if let Some(&l) = r.labels.get(e) {
                    *counts.entry(l).or_insert(0) += 1;
                }
            }
            let top = counts.values().copied().max().unwrap_or(0);
            let tied: Vec<Label> = counts.iter().filter(|&(_, &c)| c == top).map(|(&l, _)| l).collect();
            if tied.contains(&judge.labels[e]) {
                judge.labels[e]
            } else {
                tied[0]
            }
        })
        .collect();
    Some(Resolved { labels, best: judge.best, second_best: judge.second_best })
}

fn source(task: &AnnotationTask, r: &Resolved, e: u32) -> EndingSource {
    let pick = if e == r.best {
        Some(Pick::Best)
    } else if e == r.second_best {
        Some(Pick::SecondBest)
    } else {
        None
    };
    EndingSource { provenance: task.provenance[e as usize].clone(), label: r.labels[e as usize], pick }
}

/// Most unlikely first: label rank, then lower generation log-probability,
/// then ending id.
fn sort_distractors(task: &AnnotationTask, r: &Resolved, ids: &mut [u32]) {
    ids.sort_by(|&a, &b| {
        r.labels[a as usize]
            .rank()
            .cmp(&r.labels[b as usize].rank())
            .then_with(|| {
                let (x, y) = (task.provenance[a as usize].gen_logprob(), task.provenance[b as usize].gen_logprob());
                x.partial_cmp(&y).unwrap_or(Ordering::Equal)
            })
            .then(a.cmp(&b))
    });
}

fn build_question(
    task: &AnnotationTask,
    r: &Resolved,
    gold: u32,
    mut candidates: Vec<u32>,
    origin: Origin,
    seed: u64,
) -> Option<AssembledQuestion> {
    sort_distractors(task, r, &mut candidates);
    if candidates.len() < QUESTION_ENDINGS - 1 {
        return None;
    }
    let fourth = candidates.get(QUESTION_ENDINGS - 1).map(|&e| StoredEnding {
        tokens: task.endings[e as usize].tokens.clone(),
        source: source(task, r, e),
    });
    let mut order: Vec<u32> = vec![gold];
    order.extend_from_slice(&candidates[..QUESTION_ENDINGS - 1]);
    let question_id = match origin {
        Origin::FoundGold => task.context_id.clone(),
        Origin::GeneratedGold => format!("{}:gen", task.context_id),
    };
    order.shuffle(&mut rng::stream(seed, "assemble", &question_id));
    let gold_index = order.iter().position(|&e| e == gold).expect("gold is present");
    Some(AssembledQuestion {
        question_id,
        context_id: task.context_id.clone(),
        s: task.s.clone(),
        n: task.n.clone(),
        endings: order.iter().map(|&e| task.endings[e as usize].tokens.clone()).collect(),
        gold_index,
        origin,
        fold: task.fold,
        sources: order.iter().map(|&e| source(task, r, e)).collect(),
        fourth_distractor: fourth,
    })
}

/// Applies the assembly rules to a completed task.
///
/// 1. At most three non-gibberish endings: reannotate the gibberish ones.
/// 2. Found ending picked best or second best: a found-gold question whose
///    distractors are the generations not picked best and not gibberish
///    (three most unlikely kept, a fourth stored); reannotate if fewer than
///    three qualify.
/// 3. Additionally, generated best with found second best on a training
///    fold: a generated-gold question over the remaining generations.
/// 4. Found ending outside the top two: reannotate the generations that
///    outranked it and any gibberish.
///
/// Reannotation becomes rejection once `max_rounds` is used up.
pub fn assemble(task: &AnnotationTask, responses: &[AnnotationResponse], cfg: &AssemblyConfig) -> Assembly {
    let Some(r) = resolve(responses, &cfg.adjudicator) else {
        return Assembly::Reject { reason: "no responses".into() };
    };
    let gibberish: Vec<u32> =
        (0..r.labels.len() as u32).filter(|&e| r.labels[e as usize] == Label::Gibberish).collect();
    let found = task.found_id();
    let again = |flagged: Vec<u32>, reason: &str| {
        if task.round + 1 >= cfg.max_rounds {
            Assembly::Reject { reason: format!("{reason}; out of rounds") }
        } else {
            Assembly::Reannotate { flagged, reason: reason.to_string() }
        }
    };
    if r.labels.len() - gibberish.len() <= 3 {
        return again(gibberish, "three or fewer non-gibberish endings");
    }
    let generated: Vec<u32> = (0..r.labels.len() as u32).filter(|&e| e != found).collect();
    if found == r.best || found == r.second_best {
        let distractors: Vec<u32> = generated
            .iter()
            .copied()
            .filter(|&e| e != r.best && r.labels[e as usize] != Label::Gibberish)
            .collect();
        let Some(q) = build_question(task, &r, found, distractors, Origin::FoundGold, cfg.seed) else {
            let mut flagged = gibberish.clone();
            if r.best != found {
                flagged.push(r.best);
            }
            flagged.sort_unstable();
            flagged.dedup();
            return again(flagged, "fewer than three usable distractors");
        };
        let mut out = vec![q];
        if found == r.second_best && cfg.training_folds.contains(&task.fold) {
            let rest: Vec<u32> = generated
                .iter()
                .copied()
                .filter(|&e| e != r.best && r.labels[e as usize] != Label::Gibberish)
                .collect();
            if let Some(q) = build_question(task, &r, r.best, rest, Origin::GeneratedGold, cfg.seed) {
                out.push(q);
            }
        }
        return Assembly::Questions { questions: out };
    }
    let mut flagged: Vec<u32> = gibberish;
    flagged.push(r.best);
    flagged.push(r.second_best);
    flagged.sort_unstable();
    flagged.dedup();
    again(flagged, "found ending outside the top two")
}

/// Checks the structural guarantees of an assembled question.
pub fn check_question(q: &AssembledQuestion, training_folds: &BTreeSet<u32>) -> Result<(), &'static str> {
    if q.endings.len() != QUESTION_ENDINGS || q.sources.len() != QUESTION_ENDINGS {
        return Err("question must have four endings");
    }
    if q.gold_index >= QUESTION_ENDINGS {
        return Err("gold_index out of range");
    }
    for (i, s) in q.sources.iter().enumerate() {
        if i == q.gold_index {
            continue;
        }
        if s.label == Label::Gibberish {
            return Err("distractor labeled gibberish");
        }
        if s.pick == Some(Pick::Best) {
            return Err("distractor picked best");
        }
        if s.provenance.is_found() {
            return Err("found ending used as a distractor");
        }
    }
    let gold = &q.sources[q.gold_index];
    match q.origin {
        Origin::FoundGold => {
            if !gold.provenance.is_found() {
                return Err("found-gold question without the found ending as gold");
            }
        }
        Origin::GeneratedGold => {
            if gold.provenance.is_found() || gold.pick != Some(Pick::Best) {
                return Err("generated-gold question must have the best generation as gold");
            }
            if !training_folds.contains(&q.fold) {
                return Err("generated-gold question from an evaluation fold");
            }
        }
    }
    if let Some(f) = &q.fourth_distractor {
        if f.source.label == Label::Gibberish || f.source.pick == Some(Pick::Best) || f.source.provenance.is_found() {
            return Err("stored fourth distractor violates distractor rules");
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MetricError {
    #[error("no item has two or more annotations")]
    NoPairableItems,
}

/// Nominal Krippendorff's alpha. Each unit lists the labels it received;
/// units with fewer than two labels are not pairable and are skipped.
pub fn krippendorff_alpha<L: Ord + Clone>(units: &[Vec<L>]) -> Result<f64, MetricError> {
    let mut values: BTreeMap<L, usize> = BTreeMap::new();
    for u in units.iter().filter(|u| u.len() >= 2) {
        for l in u {
            let next = values.len();
            values.entry(l.clone()).or_insert(next);
        }
    }
    let v = values.len();
    if v == 0 {
        return Err(MetricError::NoPairableItems);
    }
    let mut o = vec![vec![0.0f64; v]; v];
    for u in units.iter().filter(|u| u.len() >= 2) {
        let m = u.len() as f64;
        for (a, la) in u.iter().enumerate() {
            for (b, lb) in u.iter().enumerate() {
                if a != b {
                    o[values[la]][values[lb]] += 1.0 / (m - 1.0);
                }
            }
        }
    }
    let nc: Vec<f64> = o.iter().map(|row| row.iter().sum()).collect();
    let n: f64 = nc.iter().sum();
    let disagree_o: f64 = (0..v).flat_map(|c| (0..v).map(move |k| (c, k))).filter(|(c, k)| c != k).map(|(c, k)| o[c][k]).sum();
    let disagree_e: f64 =
        (0..v).flat_map(|c| (0..v).map(move |k| (c, k))).filter(|(c, k)| c != k).map(|(c, k)| nc[c] * nc[k]).sum();
    if disagree_e == 0.0 {
        return Ok(1.0);
    }
    Ok(1.0 - (n - 1.0) * disagree_o / disagree_e)
}

/// Share of agreeing annotator pairs, pooled over all units.
pub fn pairwise_percent_agreement<L: PartialEq>(units: &[Vec<L>]) -> Result<f64, MetricError> {
    let mut pairs = 0usize;
    let mut agree = 0usize;
    for u in units {
        for a in 0..u.len() {
            for b in a + 1..u.len() {
                pairs += 1;
                agree += (u[a] == u[b]) as usize;
            }
        }
    }
    if pairs == 0 {
        return Err(MetricError::NoPairableItems);
    }
    Ok(agree as f64 / pairs as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QualityStatus {
    Active,
    Dequalified,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotatorQuality {
    pub annotator_id: String,
    pub tasks: usize,
    pub correct: usize,
    pub accuracy: f64,
    pub status: QualityStatus,
}

pub const DEQUALIFY_ACCURACY: f64 = 0.55;
pub const DEQUALIFY_MIN_TASKS: usize = 10;

/// `history[i]` is whether the found ending was in the annotator's top two.
pub fn annotator_quality(annotator_id: &str, history: &[bool]) -> AnnotatorQuality {
    let tasks = history.len();
    let correct = history.iter().filter(|&&c| c).count();
    let accuracy = if tasks == 0 { 0.0 } else { correct as f64 / tasks as f64 };
    let status = if tasks >= DEQUALIFY_MIN_TASKS && accuracy < DEQUALIFY_ACCURACY {
        QualityStatus::Dequalified
    } else {
        QualityStatus::Active
    };
    AnnotatorQuality { annotator_id: annotator_id.to_string(), tasks, correct, accuracy, status }
}

/// Whether the found ending is among this response's picks.
pub fn found_in_top2(task: &AnnotationTask, r: &AnnotationResponse) -> bool {
    let f = task.found_id();
    r.best == f || r.second_best == f
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankLabel {
    Best,
    SecondBest,
    Neither,
}

fn rank_label(r: &AnnotationResponse, e: u32) -> RankLabel {
    if r.best == e {
        RankLabel::Best
    } else if r.second_best == e {
        RankLabel::SecondBest
    } else {
        RankLabel::Neither
    }
}

/// Label shares by ending type.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Distribution {
    pub found: BTreeMap<String, f64>,
    pub generated: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub responses: usize,
    /// Agreement on likely/unlikely/gibberish; `None` without overlap.
    pub label_alpha: Option<f64>,
    pub label_ppa: Option<f64>,
    /// Agreement on best/second best/neither.
    pub rank_alpha: Option<f64>,
    pub rank_ppa: Option<f64>,
    pub found_top2_rate: f64,
    pub distribution: Distribution,
    pub annotators: Vec<AnnotatorQuality>,
}

/// Metrics over a snapshot of tasks and their responses.
pub fn compute_metrics<'a, I>(entries: I) -> Metrics
where
    I: IntoIterator<Item = (&'a AnnotationTask, &'a [AnnotationResponse])>,
{
    let mut label_units: Vec<Vec<Label>> = Vec::new();
    let mut rank_units: Vec<Vec<RankLabel>> = Vec::new();
    let mut history: BTreeMap<String, Vec<bool>> = BTreeMap::new();
    let mut counts: [BTreeMap<String, usize>; 2] = [BTreeMap::new(), BTreeMap::new()];
    let mut totals = [0usize; 2];
    let mut n_resp = 0;
    let mut top2 = 0;
    for (task, responses) in entries {
        for e in 0..task.endings.len() as u32 {
            label_units.push(responses.iter().filter_map(|r| r.labels.get(e as usize).copied()).collect());
            rank_units.push(responses.iter().map(|r| rank_label(r, e)).collect());
        }
        for r in responses {
            n_resp += 1;
            let hit = found_in_top2(task, r);
            top2 += hit as usize;
            history.entry(r.annotator_id.clone()).or_default().push(hit);
            for (e, l) in r.labels.iter().enumerate() {
                let g = !task.provenance.get(e).is_some_and(Provenance::is_found) as usize;
                totals[g] += 1;
                let name = match l {
                    Label::Likely => "likely",
                    Label::Unlikely => "unlikely",
                    Label::Gibberish => "gibberish",
                };
                *counts[g].entry(name.to_string()).or_insert(0) += 1;
                let rank = match rank_label(r, e as u32) {
                    RankLabel::Best => "best",
                    RankLabel::SecondBest => "second_best",
                    RankLabel::Neither => "neither",
                };
                *counts[g].entry(rank.to_string()).or_insert(0) += 1;
            }
        }
    }
    let share = |c: &BTreeMap<String, usize>, t: usize| {
        c.iter().map(|(k, &v)| (k.clone(), if t == 0 { 0.0 } else { v as f64 / t as f64 })).collect()
    };
    Metrics {
        responses: n_resp,
        label_alpha: krippendorff_alpha(&label_units).ok(),
        label_ppa: pairwise_percent_agreement(&label_units).ok(),
        rank_alpha: krippendorff_alpha(&rank_units).ok(),
        rank_ppa: pairwise_percent_agreement(&rank_units).ok(),
        found_top2_rate: if n_resp == 0 { 0.0 } else { top2 as f64 / n_resp as f64 },
        distribution: Distribution { found: share(&counts[0], totals[0]), generated: share(&counts[1], totals[1]) },
        annotators: history.iter().map(|(a, h)| annotator_quality(a, h)).collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum QueueError {
    #[error("unknown task {0}")]
    NotFound(String),
    #[error("task {0} is claimed by another annotator")]
    Conflict(String),
    #[error("task {0} is not open for annotation")]
    Closed(String),
    #[error("task {0} is not claimed by this annotator")]
    NotClaimed(String),
    #[error("annotator {0} already answered task {1}")]
    AlreadyAnswered(String, String),
    #[error("annotator {0} is dequalified")]
    Dequalified(String),
    #[error("invalid response")]
    Invalid(Vec<FieldError>),
    #[error("duplicate task id {0}")]
    Duplicate(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QueueConfig {
    pub lease_ms: u64,
    /// Share of tasks that collect a second response.
    pub audit_rate: f64,
    pub audit_responses: usize,
    pub seed: u64,
}

impl Default for QueueConfig {
    fn default() -> Self {
        Self { lease_ms: 30 * 60 * 1000, audit_rate: 0.05, audit_responses: 2, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Claim {
    annotator: String,
    expires: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskEntry {
    pub task: AnnotationTask,
    pub status: TaskStatus,
    pub required: usize,
    pub responses: Vec<AnnotationResponse>,
    claim: Option<Claim>,
}

impl TaskEntry {
    fn claimable_by(&self, annotator: &str, now: u64) -> bool {
        match self.status {
            TaskStatus::Open => true,
            TaskStatus::Claimed => {
                self.claim.as_ref().is_none_or(|c| c.annotator == annotator || c.expires <= now)
            }
            _ => false,
        }
    }

    fn answered_by(&self, annotator: &str) -> bool {
        self.responses.iter().any(|r| r.annotator_id == annotator)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubmitOutcome {
    /// Task has all its responses.
    Done,
    /// Task needs more responses from other annotators.
    AwaitingAudit,
}

/// Task lifecycle: open → claimed → done (or back to open for audits).
/// Claims expire after the lease; a claim by someone else is a conflict.
#[derive(Debug, Clone, Default)]
pub struct TaskQueue {
    cfg: QueueConfig,
    entries: Vec<TaskEntry>,
    by_id: BTreeMap<String, usize>,
}

impl TaskQueue {
    pub fn new(cfg: QueueConfig) -> Self {
        Self { cfg, entries: Vec::new(), by_id: BTreeMap::new() }
    }

    pub fn config(&self) -> &QueueConfig {
        &self.cfg
    }

    /// Adds a task; whether it is audited is a seeded function of its id.
    pub fn push(&mut self, task: AnnotationTask) -> Result<(), QueueError> {
        if self.by_id.contains_key(&task.task_id) {
            return Err(QueueError::Duplicate(task.task_id));
        }
        let audited = rng::stream(self.cfg.seed, "audit", &task.task_id).random::<f64>() < self.cfg.audit_rate;
        let required = if audited { self.cfg.audit_responses.max(1) } else { 1 };
        self.by_id.insert(task.task_id.clone(), self.entries.len());
        self.entries.push(TaskEntry { task, status: TaskStatus::Open, required, responses: Vec::new(), claim: None });
        Ok(())
    }

    pub fn get(&self, task_id: &str) -> Option<&TaskEntry> {
        self.by_id.get(task_id).map(|&i| &self.entries[i])
    }

    pub fn entries(&self) -> &[TaskEntry] {
        &self.entries
    }

    pub fn set_status(&mut self, task_id: &str, status: TaskStatus) -> Result<(), QueueError> {
        let i = *self.by_id.get(task_id).ok_or_else(|| QueueError::NotFound(task_id.to_string()))?;
        self.entries[i].status = status;
        self.entries[i].claim = None;
        Ok(())
    }

    fn quality(&self, annotator: &str) -> AnnotatorQuality {
        let history: Vec<bool> = self
            .entries
            .iter()
            .flat_map(|e| e.responses.iter().filter(|r| r.annotator_id == annotator).map(|r| found_in_top2(&e.task, r)))
            .collect();
        annotator_quality(annotator, &history)
    }

    fn check_qualified(&self, annotator: &str) -> Result<(), QueueError> {
        if self.quality(annotator).status == QualityStatus::Dequalified {
            return Err(QueueError::Dequalified(annotator.to_string()));
        }
        Ok(())
    }

    /// The annotator's current claim, else the first claimable task they
    /// have not answered. `Ok(None)` when nothing is left.
    pub fn claim_next(&mut self, annotator: &str, now: u64) -> Result<Option<TaskView>, QueueError> {
        self.check_qualified(annotator)?;
        let held = self.entries.iter().position(|e| {
            e.status == TaskStatus::Claimed && e.claim.as_ref().is_some_and(|c| c.annotator == annotator && c.expires > now)
        });
        let pick = held.or_else(|| {
            self.entries.iter().position(|e| e.claimable_by(annotator, now) && !e.answered_by(annotator))
        });
        match pick {
            Some(i) => {
                let id = self.entries[i].task.task_id.clone();
                self.claim(&id, annotator, now).map(Some)
            }
            None => Ok(None),
        }
    }

    pub fn claim(&mut self, task_id: &str, annotator: &str, now: u64) -> Result<TaskView, QueueError> {
        self.check_qualified(annotator)?;
        let lease = self.cfg.lease_ms;
        let i = *self.by_id.get(task_id).ok_or_else(|| QueueError::NotFound(task_id.to_string()))?;
        let e = &mut self.entries[i];
        if e.answered_by(annotator) {
            return Err(QueueError::AlreadyAnswered(annotator.to_string(), task_id.to_string()));
        }
        if !matches!(e.status, TaskStatus::Open | TaskStatus::Claimed) {
            return Err(QueueError::Closed(task_id.to_string()));
        }
        if !e.claimable_by(annotator, now) {
            return Err(QueueError::Conflict(task_id.to_string()));
        }
        e.status = TaskStatus::Claimed;
        e.claim = Some(Claim { annotator: annotator.to_string(), expires: now.saturating_add(lease) });
        Ok(e.task.view())
    }

    /// Validates the response against the task before touching any state.
    /// The submitting annotator must hold the claim (an expired claim still
    /// counts while nobody else has taken the task).
    pub fn check_submit(&self, resp: &AnnotationResponse) -> Result<(), QueueError> {
        let i = *self.by_id.get(&resp.task_id).ok_or_else(|| QueueError::NotFound(resp.task_id.clone()))?;
        let e = &self.entries[i];
        if e.status != TaskStatus::Claimed || e.claim.as_ref().is_none_or(|c| c.annotator != resp.annotator_id) {
            return Err(QueueError::NotClaimed(resp.task_id.clone()));
        }
        validate_response(&e.task, resp).map_err(QueueError::Invalid)
    }

    pub fn submit(&mut self, resp: AnnotationResponse) -> Result<SubmitOutcome, QueueError> {
        self.check_submit(&resp)?;
        Ok(self.record(resp))
    }

    /// Appends a response that was already validated (for log replay).
    pub fn record(&mut self, resp: AnnotationResponse) -> SubmitOutcome {
        let i = self.by_id[&resp.task_id];
        let e = &mut self.entries[i];
        e.responses.push(resp);
        e.claim = None;
        if e.responses.len() >= e.required {
            e.status = TaskStatus::Done;
            SubmitOutcome::Done
        } else {
            e.status = TaskStatus::Open;
            SubmitOutcome::AwaitingAudit
        }
    }

    pub fn progress(&self) -> BTreeMap<TaskStatus, usize> {
        let mut out: BTreeMap<TaskStatus, usize> =
            [TaskStatus::Open, TaskStatus::Claimed, TaskStatus::Done, TaskStatus::Reannotate, TaskStatus::Rejected]
                .into_iter()
                .map(|s| (s, 0))
                .collect();
        for e in &self.entries {
            *out.entry(e.status).or_insert(0) += 1;
        }
        out
    }

    pub fn metrics(&self) -> Metrics {
        compute_metrics(self.entries.iter().map(|e| (&e.task, e.responses.as_slice())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::Candidate;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    fn fixture(k: usize) -> (Context, CandidatePool, Vec<u32>) {
        let ctx = Context {
            context_id: "c1".into(),
            s: toks("a man sits on a bench ."),
            n: toks("he"),
            v_found: toks("opens a newspaper and reads ."),
            fold: 0,
        };
        let candidates = (0..20)
            .map(|i| Candidate { tokens: toks(&format!("gen ending number {i} .")), gen_logprob: -(i as f64) })
            .collect();
        let pool = CandidatePool { context_id: "c1".into(), candidates, short_pool: false, excluded_fold: Some(0) };
        (ctx, pool, (0..k as u32).map(|j| j * 2).collect())
    }

    fn response(task: &AnnotationTask, labels: [Label; 6], best: u32, second: u32) -> AnnotationResponse {
        AnnotationResponse {
            task_id: task.task_id.clone(),
            annotator_id: "ann".into(),
            labels: labels.to_vec(),
            best,
            second_best: second,
            timestamp: 1,
        }
    }

    /// Ending ids of the found ending and the generations in display order.
    fn ids(task: &AnnotationTask) -> (u32, Vec<u32>) {
        let f = task.found_id();
        (f, (0..6).filter(|&e| e != f).collect())
    }

    fn labels_with(task: &AnnotationTask, default: Label, over: &[(u32, Label)]) -> [Label; 6] {
        let mut l = [default; 6];
        l[task.found_id() as usize] = Label::Likely;
        for &(e, x) in over {
            l[e as usize] = x;
        }
        l
    }

    #[test]
    fn make_task_shape_and_determinism() {
        let (ctx, pool, a) = fixture(9);
        let t = make_task(&ctx, &pool, &a, 5, 3).unwrap();
        assert_eq!(t.endings.len(), 6);
        assert_eq!(t.provenance.iter().filter(|p| p.is_found()).count(), 1);
        let shown: BTreeSet<u32> = t.shown.iter().copied().collect();
        assert_eq!(shown.len(), 5);
        assert!(shown.iter().all(|j| a.contains(j)));
        assert_eq!(t, make_task(&ctx, &pool, &a, 5, 3).unwrap());
        for (e, p) in t.endings.iter().zip(&t.provenance) {
            match p {
                Provenance::Found => assert_eq!(e.tokens, ctx.v_found),
                Provenance::Generated { pool_index, .. } => assert_eq!(e.tokens, pool.candidates[*pool_index as usize].tokens),
            }
        }
    }

    #[test]
    fn make_task_uses_all_when_k_is_five() {
        let (ctx, pool, a) = fixture(5);
        let t = make_task(&ctx, &pool, &a, 5, 0).unwrap();
        let mut shown = t.shown.clone();
        shown.sort_unstable();
        assert_eq!(shown, a);
        let (ctx, pool, a) = fixture(4);
        assert!(matches!(make_task(&ctx, &pool, &a, 5, 0), Err(ValidationError::TooFewAssigned { .. })));
    }

    #[test]
    fn make_task_selection_is_uniform() {
        let (mut ctx, pool, a) = fixture(9);
        let trials = 4000;
        let mut freq: BTreeMap<u32, usize> = BTreeMap::new();
        for t in 0..trials {
            ctx.context_id = format!("c{t}");
            let p = CandidatePool { context_id: ctx.context_id.clone(), ..pool.clone() };
            for j in make_task(&ctx, &p, &a, 5, 1).unwrap().shown {
                *freq.entry(j).or_insert(0) += 1;
            }
        }
        let p = 5.0 / 9.0;
        let mean = trials as f64 * p;
        let sd = (trials as f64 * p * (1.0 - p)).sqrt();
        for (&j, &f) in &freq {
            assert!((f as f64 - mean).abs() < 3.5 * sd, "index {j}: {f} vs {mean}");
        }
    }

    #[test]
    fn view_hides_provenance() {
        let (ctx, pool, a) = fixture(9);
        let t = make_task(&ctx, &pool, &a, 5, 3).unwrap();
        let json = serde_json::to_string(&t.view()).unwrap();
        assert!(!json.contains("provenance") && !json.contains("pool_index") && !json.contains("found"));
        assert!(!json.contains("gen_logprob") && !json.contains("fold"));
    }

    #[test]
    fn response_validation() {
        let (ctx, pool, a) = fixture(9);
        let t = make_task(&ctx, &pool, &a, 5, 3).unwrap();
        let good = response(&t, [Label::Likely; 6], 0, 1);
        assert!(validate_response(&t, &good).is_ok());
        let same = response(&t, [Label::Likely; 6], 2, 2);
        let errs = validate_response(&t, &same).unwrap_err();
        assert_eq!(errs[0].field, "second_best");
        let mut gib = response(&t, [Label::Likely; 6], 0, 1);
        gib.labels[1] = Label::Gibberish;
        assert_eq!(validate_response(&t, &gib).unwrap_err()[0].field, "second_best");
        let mut short = response(&t, [Label::Likely; 6], 0, 1);
        short.labels.pop();
        assert_eq!(validate_response(&t, &short).unwrap_err()[0].field, "labels");
        let oob = response(&t, [Label::Likely; 6], 7, 1);
        assert_eq!(validate_response(&t, &oob).unwrap_err()[0].field, "best");
    }

    #[test]
    fn found_best_with_all_unlikely_keeps_three_and_stores_fourth() {
        let (ctx, pool, a) = fixture(9);
        let t = make_task(&ctx, &pool, &a, 5, 3).unwrap();
        let (f, gens) = ids(&t);
        let r = response(&t, labels_with(&t, Label::Unlikely, &[]), f, gens[0]);
        let Assembly::Questions { questions } = assemble(&t, &[r], &AssemblyConfig::default()) else { panic!() };
        assert_eq!(questions.len(), 1);
        let q = &questions[0];
        assert_eq!(q.origin, Origin::FoundGold);
        assert_eq!(q.endings[q.gold_index], ctx.v_found);
        assert!(q.fourth_distractor.is_some());
        check_question(q, &[0, 1, 2].into()).unwrap();
        // All unlikely: the lowest generation log-probabilities are kept.
        let mut lps: Vec<f64> = t
            .provenance
            .iter()
            .filter_map(|p| match p {
                Provenance::Generated { gen_logprob, .. } => Some(*gen_logprob),
                _ => None,
            })
            .collect();
        lps.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut kept: Vec<f64> = q
            .sources
            .iter()
            .filter_map(|s| match s.provenance {
                Provenance::Generated { gen_logprob, .. } => Some(gen_logprob),
                _ => None,
            })
            .collect();
        kept.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(kept, lps[..3].to_vec());
        let fourth = match q.fourth_distractor.as_ref().unwrap().source.provenance {
            Provenance::Generated { gen_logprob, .. } => gen_logprob,
            _ => panic!(),
        };
        assert_eq!(fourth, lps[3]);
    }

    #[test]
    fn found_second_on_training_fold_emits_two_questions() {
        let (ctx, pool, a) = fixture(9);
        let t = make_task(&ctx, &pool, &a, 5, 3).unwrap();
        let (f, gens) = ids(&t);
        let r = response(&t, labels_with(&t, Label::Unlikely, &[(gens[2], Label::Likely)]), gens[2], f);
        let cfg = AssemblyConfig::default();
        let Assembly::Questions { questions } = assemble(&t, core::slice::from_ref(&r), &cfg) else { panic!() };
        assert_eq!(questions.iter().map(|q| q.origin).collect::<Vec<_>>(), vec![Origin::FoundGold, Origin::GeneratedGold]);
        for q in &questions {
            check_question(q, &cfg.training_folds).unwrap();
        }
        let g = &questions[1];
        assert_eq!(g.endings[g.gold_index], t.endings[gens[2] as usize].tokens);
        assert!(!g.endings.contains(&ctx.v_found));
        // The best generation is never a distractor of the found-gold question.
        assert!(!questions[0].endings.contains(&t.endings[gens[2] as usize].tokens));

        let eval_cfg = AssemblyConfig { training_folds: [1, 2].into(), ..cfg };
        let Assembly::Questions { questions } = assemble(&t, &[r], &eval_cfg) else { panic!() };
        assert_eq!(questions.len(), 1);
    }

    #[test]
    fn three_gibberish_goes_back() {
        let (ctx, pool, a) = fixture(9);
        let t = make_task(&ctx, &pool, &a, 5, 3).unwrap();
        let (f, gens) = ids(&t);
        let over = [(gens[0], Label::Gibberish), (gens[1], Label::Gibberish), (gens[2], Label::Gibberish)];
        let r = response(&t, labels_with(&t, Label::Unlikely, &over), f, gens[3]);
        match assemble(&t, &[r], &AssemblyConfig::default()) {
            Assembly::Reannotate { flagged, .. } => {
                let mut want = vec![gens[0], gens[1], gens[2]];
                want.sort_unstable();
                assert_eq!(flagged, want);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn two_gibberish_with_generated_best_lacks_distractors() {
        let (ctx, pool, a) = fixture(9);
        let t = make_task(&ctx, &pool, &a, 5, 3).unwrap();
        let (f, gens) = ids(&t);
        let over = [(gens[0], Label::Gibberish), (gens[1], Label::Gibberish)];
        let r = response(&t, labels_with(&t, Label::Unlikely, &over), gens[4], f);
        match assemble(&t, &[r], &AssemblyConfig::default()) {
            Assembly::Reannotate { flagged, .. } => {
                let mut want = vec![gens[0], gens[1], gens[4]];
                want.sort_unstable();
                assert_eq!(flagged, want);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn found_outside_top_two_flags_outranking_generations() {
        let (ctx, pool, a) = fixture(9);
        let t = make_task(&ctx, &pool, &a, 5, 3).unwrap();
        let (_, gens) = ids(&t);
        let r = response(&t, labels_with(&t, Label::Likely, &[(gens[3], Label::Gibberish)]), gens[0], gens[1]);
        match assemble(&t, core::slice::from_ref(&r), &AssemblyConfig::default()) {
            Assembly::Reannotate { flagged, .. } => {
                let mut want = vec![gens[0], gens[1], gens[3]];
                want.sort_unstable();
                assert_eq!(flagged, want);
                let next = reannotate(&t, &flagged, &pool, &a, 1).unwrap();
                assert_eq!(next.round, 1);
                assert_ne!(next.task_id, t.task_id);
                for e in 0..6u32 {
                    if flagged.contains(&e) {
                        let Provenance::Generated { pool_index, .. } = next.provenance[e as usize] else { panic!() };
                        assert!(a.contains(&pool_index));
                        assert!(!t.shown.contains(&pool_index));
                    } else {
                        assert_eq!(next.provenance[e as usize], t.provenance[e as usize]);
                        assert_eq!(next.endings[e as usize], t.endings[e as usize]);
                    }
                }
                // Nine assigned, eight shown: one fresh ending cannot cover three slots.
                assert_eq!(next.shown.len(), 8);
                assert!(reannotate(&next, &flagged, &pool, &a, 1).is_none());
                assert!(reannotate(&next, &flagged[..1], &pool, &a, 1).is_some());
            }
            other => panic!("{other:?}"),
        }
        let late = AnnotationTask { round: 2, ..t.clone() };
        let r2 = AnnotationResponse { task_id: late.task_id.clone(), ..r };
        assert!(matches!(assemble(&late, &[r2], &AssemblyConfig::default()), Assembly::Reject { .. }));
    }

    #[test]
    fn majority_labels_and_earliest_picks() {
        let (ctx, pool, a) = fixture(9);
        let t = make_task(&ctx, &pool, &a, 5, 3).unwrap();
        let (f, gens) = ids(&t);
        let mut r1 = response(&t, labels_with(&t, Label::Unlikely, &[]), f, gens[0]);
        r1.timestamp = 5;
        r1.annotator_id = "x".into();
        let mut r2 = response(&t, labels_with(&t, Label::Likely, &[]), gens[1], f);
        r2.timestamp = 2;
        r2.annotator_id = "y".into();
        let mut r3 = response(&t, labels_with(&t, Label::Likely, &[]), gens[2], f);
        r3.timestamp = 9;
        r3.annotator_id = "z".into();
        let res = resolve(&[r1.clone(), r2.clone(), r3.clone()], &Adjudicator::Earliest).unwrap();
        assert_eq!((res.best, res.second_best), (gens[1], f));
        assert!(res.labels.iter().all(|&l| l == Label::Likely));
        let res = resolve(&[r1.clone(), r2.clone()], &Adjudicator::Annotator("x".into())).unwrap();
        assert_eq!((res.best, res.second_best), (f, gens[0]));
        // 1-1 tie: the adjudicator's label wins.
        assert_eq!(res.labels[gens[3] as usize], Label::Unlikely);
    }

    #[test]
    fn alpha_worked_examples() {
        use Label::{Likely as A, Unlikely as B};
        // Coincidences: o_aa = 2, o_ab = o_ba = 1, o_bb = 4; n_a = 3, n_b = 5.
        // alpha = 1 - (n - 1) * 2 / (2 * 3 * 5) = 1 - 7/15.
        let units = vec![vec![A, A], vec![A, B], vec![B, B], vec![B, B]];
        let alpha = krippendorff_alpha(&units).unwrap();
        assert!((alpha - 8.0 / 15.0).abs() < 1e-9, "{alpha}");
        // o_ab = o_ba = 2, n_a = n_b = 2: alpha = 1 - 3 * 4 / 8.
        let units = vec![vec![A, B], vec![B, A]];
        assert!((krippendorff_alpha(&units).unwrap() + 0.5).abs() < 1e-9);
        let perfect = vec![vec![A, A], vec![B, B], vec![A, A]];
        assert_eq!(krippendorff_alpha(&perfect).unwrap(), 1.0);
        assert_eq!(krippendorff_alpha(&[vec![A], vec![B]]), Err(MetricError::NoPairableItems));
    }

    #[test]
    fn ppa_examples() {
        assert_eq!(pairwise_percent_agreement(&[vec![1, 1], vec![2, 2]]).unwrap(), 1.0);
        assert_eq!(pairwise_percent_agreement(&[vec![1, 1], vec![1, 2]]).unwrap(), 0.5);
        assert!(pairwise_percent_agreement::<u8>(&[vec![1]]).is_err());
    }

    #[test]
    fn quality_thresholds() {
        assert_eq!(annotator_quality("a", &[false; 9]).status, QualityStatus::Active);
        let mut h = [false; 10];
        h[..5].iter_mut().for_each(|x| *x = true);
        assert_eq!(annotator_quality("a", &h).status, QualityStatus::Dequalified);
        h[5] = true;
        let q = annotator_quality("a", &h);
        assert_eq!(q.status, QualityStatus::Active);
        assert!((q.accuracy - 0.6).abs() < 1e-12);
    }

    fn queue_with(n: usize, cfg: QueueConfig) -> (TaskQueue, Vec<AnnotationTask>) {
        let (mut ctx, pool, a) = fixture(9);
        let mut q = TaskQueue::new(cfg);
        let mut tasks = Vec::new();
        for i in 0..n {
            ctx.context_id = format!("c{i}");
            let p = CandidatePool { context_id: ctx.context_id.clone(), ..pool.clone() };
            let t = make_task(&ctx, &p, &a, 5, 0).unwrap();
            q.push(t.clone()).unwrap();
            tasks.push(t);
        }
        (q, tasks)
    }

    #[test]
    fn claim_submit_lifecycle() {
        let (mut q, tasks) = queue_with(2, QueueConfig { audit_rate: 0.0, ..QueueConfig::default() });
        let v = q.claim_next("alice", 0).unwrap().unwrap();
        assert_eq!(v.task_id, tasks[0].task_id);
        // Same annotator gets the same task back.
        assert_eq!(q.claim_next("alice", 10).unwrap().unwrap().task_id, v.task_id);
        assert_eq!(q.claim(&v.task_id, "bob", 10), Err(QueueError::Conflict(v.task_id.clone())));
        assert_eq!(q.claim_next("bob", 10).unwrap().unwrap().task_id, tasks[1].task_id);

        let t = &tasks[0];
        let mut bad = response(t, [Label::Likely; 6], 1, 1);
        bad.annotator_id = "alice".into();
        assert!(matches!(q.submit(bad), Err(QueueError::Invalid(_))));
        assert_eq!(q.get(&t.task_id).unwrap().status, TaskStatus::Claimed);

        let mut stranger = response(t, [Label::Likely; 6], 0, 1);
        stranger.annotator_id = "bob".into();
        assert!(matches!(q.submit(stranger), Err(QueueError::NotClaimed(_))));

        let mut good = response(t, [Label::Likely; 6], 0, 1);
        good.annotator_id = "alice".into();
        assert_eq!(q.submit(good), Ok(SubmitOutcome::Done));
        assert_eq!(q.get(&t.task_id).unwrap().status, TaskStatus::Done);
        assert!(matches!(q.claim(&t.task_id, "carol", 0), Err(QueueError::AlreadyAnswered(..)) | Err(QueueError::Closed(_))));
        assert_eq!(q.progress()[&TaskStatus::Done], 1);
        assert_eq!(q.progress()[&TaskStatus::Claimed], 1);
        assert_eq!(q.claim_next("alice", 20).unwrap(), None);
    }

    #[test]
    fn expired_lease_can_be_taken_over() {
        let (mut q, tasks) = queue_with(1, QueueConfig { lease_ms: 100, audit_rate: 0.0, ..QueueConfig::default() });
        q.claim(&tasks[0].task_id, "alice", 0).unwrap();
        assert!(matches!(q.claim(&tasks[0].task_id, "bob", 99), Err(QueueError::Conflict(_))));
        q.claim(&tasks[0].task_id, "bob", 100).unwrap();
        let mut r = response(&tasks[0], [Label::Likely; 6], 0, 1);
        r.annotator_id = "alice".into();
        assert!(matches!(q.submit(r), Err(QueueError::NotClaimed(_))));
    }

    #[test]
    fn audited_tasks_need_two_annotators() {
        let (mut q, tasks) = queue_with(1, QueueConfig { audit_rate: 1.0, ..QueueConfig::default() });
        let id = tasks[0].task_id.clone();
        q.claim(&id, "alice", 0).unwrap();
        let mut r = response(&tasks[0], [Label::Likely; 6], 0, 1);
        r.annotator_id = "alice".into();
        assert_eq!(q.submit(r.clone()), Ok(SubmitOutcome::AwaitingAudit));
        assert_eq!(q.claim_next("alice", 1).unwrap(), None);
        q.claim(&id, "bob", 1).unwrap();
        r.annotator_id = "bob".into();
        assert_eq!(q.submit(r), Ok(SubmitOutcome::Done));
        let m = q.metrics();
        assert_eq!(m.responses, 2);
        assert_eq!(m.label_ppa, Some(1.0));
        assert_eq!(m.label_alpha, Some(1.0));
    }

    #[test]
    fn dequalified_annotators_are_refused() {
        let (mut q, tasks) = queue_with(12, QueueConfig { audit_rate: 0.0, ..QueueConfig::default() });
        for t in tasks.iter().take(10) {
            q.claim(&t.task_id, "eve", 0).unwrap();
            let f = t.found_id();
            let (a, b) = if f < 2 { (2, 3) } else { (0, 1) };
            let mut r = response(t, [Label::Likely; 6], a, b);
            r.annotator_id = "eve".into();
            q.submit(r).unwrap();
        }
        assert_eq!(q.claim_next("eve", 0), Err(QueueError::Dequalified("eve".into())));
        assert!(q.claim_next("frank", 0).unwrap().is_some());
        let m = q.metrics();
        assert_eq!(m.found_top2_rate, 0.0);
        assert_eq!(m.annotators[0].status, QualityStatus::Dequalified);
    }
}
