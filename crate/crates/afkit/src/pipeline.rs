//! The pipeline stages. Each reads its inputs from the workdir, writes its
//! outputs atomically and records itself in the manifest.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use afkit_core::af::{
    self, AfError, AfFeatures, Assignment, CandFeatures, CommitteeAdversary, ContextFeatures, StopReason, TraceRow,
};
use afkit_core::committee::{Member, Members};
use afkit_core::corpus::{self, Context, RawRecord, Reject};
use afkit_core::eval::{self, EvalReport};
use afkit_core::features::{lm_features, parse_embedding_text};
use afkit_core::lm::{self, CandidatePool, Direction, NGramModel, TrainingSentence, Vocab};
use afkit_core::validation::{
    self, assemble, reannotate, AnnotationResponse, AnnotationTask, AssembledQuestion, Assembly, Metrics, TaskQueue,
    TaskStatus,
};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::io;
use crate::manifest::{Manifest, Stage};
use crate::server;
use crate::simulate;

pub const CONTEXTS: &str = "contexts.jsonl";
pub const REJECTS: &str = "rejects.jsonl";
pub const LM_DIR: &str = "lm";
pub const POOLS: &str = "pools.jsonl";
pub const ASSIGNMENT: &str = "assignment.jsonl";
pub const TRACE: &str = "trace.csv";
pub const AF_SUMMARY: &str = "af_summary.json";
pub const TASKS: &str = "tasks.jsonl";
pub const RESPONSES: &str = "responses.jsonl";
pub const OUTCOMES: &str = "outcomes.jsonl";
pub const ASSEMBLED: &str = "assembled.jsonl";
pub const EVAL_JSON: &str = "eval_report.json";
pub const EVAL_TXT: &str = "eval_report.txt";
pub const EVAL_LOSS: &str = "eval_loss.csv";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_TXT: &str = "report.txt";
pub const AF_CURVE: &str = "af_curve.csv";

/// Flags shared by every stage.
#[derive(Debug, Clone, Default)]
pub struct Flags {
    pub force: bool,
    pub resume: bool,
    /// Stop `filter` after this many iterations in this invocation, leaving
    /// a resumable checkpoint.
    pub stop_after: Option<usize>,
}

pub struct Pipeline {
    pub cfg: PipelineConfig,
    pub flags: Flags,
}

fn lm_path(workdir: &Path, dir: Direction, fold: u32) -> PathBuf {
    let d = match dir {
        Direction::Forward => "fwd",
        Direction::Backward => "bwd",
    };
    workdir.join(LM_DIR).join(format!("{d}_fold{fold}.json"))
}

/// One row of `assignment.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssignmentRow {
    pub context_id: String,
    pub iteration: usize,
    pub indices: Vec<u32>,
}

/// One row of `trace.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TraceCsv {
    iteration: usize,
    accuracy: f64,
    loss: f64,
    replacements: usize,
    active_members: String,
}

fn members_to_str(m: Members) -> String {
    let names: Vec<&str> = m
        .list()
        .into_iter()
        .map(|x| match x {
            Member::Mlp => "mlp",
            Member::Bow => "bow",
            Member::Cnn => "cnn",
            Member::Lstm => "lstm",
        })
        .collect();
    names.join("+")
}

fn members_from_str(s: &str) -> Result<Members> {
    s.split('+')
        .map(|x| match x {
            "mlp" => Ok(Member::Mlp),
            "bow" => Ok(Member::Bow),
            "cnn" => Ok(Member::Cnn),
            "lstm" => Ok(Member::Lstm),
            other => Err(Error::Data(format!("unknown committee member {other:?} in trace"))),
        })
        .collect::<Result<Vec<_>>>()
        .map(Members::from)
}

pub fn write_trace(path: &Path, trace: &[TraceRow]) -> Result<()> {
    io::write_atomic(path, |w| {
        let mut csv = csv::Writer::from_writer(w);
        for r in trace {
            csv.serialize(TraceCsv {
                iteration: r.iteration,
                accuracy: r.accuracy,
                loss: r.loss,
                replacements: r.replacements,
                active_members: members_to_str(r.active_members),
            })
            .map_err(std::io::Error::other)?;
        }
        csv.flush()
    })
}

pub fn read_trace(path: &Path) -> Result<Vec<TraceRow>> {
    let f = io::open(path, "written by filter")?;
    let mut rows = Vec::new();
    for rec in csv::Reader::from_reader(f).deserialize::<TraceCsv>() {
        let r = rec.map_err(|e| Error::data(path.display(), e))?;
        rows.push(TraceRow {
            iteration: r.iteration,
            accuracy: r.accuracy,
            loss: r.loss,
            replacements: r.replacements,
            active_members: members_from_str(&r.active_members)?,
        });
    }
    Ok(rows)
}

fn stop_name(s: Option<StopReason>) -> &'static str {
    match s {
        Some(StopReason::Converged) => "converged",
        Some(StopReason::MaxIterations) => "iteration limit",
        None => "interrupted",
    }
}

/// What `filter` left behind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AfSummary {
    /// `None` while an interrupted run awaits `--resume`.
    pub stop: Option<StopReason>,
    pub iterations: usize,
    pub first_accuracy: Option<f64>,
    pub trailing_accuracy: Option<f64>,
    pub chance: f64,
    /// Contexts left out because their pool holds fewer than k candidates.
    pub skipped: Vec<String>,
}

/// Per-task result of the latest `assemble`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeRow {
    pub task_id: String,
    pub context_id: String,
    pub outcome: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AssembleSummary {
    pub questions: usize,
    pub assembled_tasks: usize,
    pub new_rounds: usize,
    pub rejected: usize,
    pub pending: usize,
}

fn check_unique<'a>(ids: impl IntoIterator<Item = &'a str>, what: &str) -> Result<()> {
    let mut seen = BTreeSet::new();
    for id in ids {
        if !seen.insert(id) {
            return Err(Error::Data(format!("duplicate {what} {id:?}")));
        }
    }
    Ok(())
}

impl Pipeline {
    pub fn new(cfg: PipelineConfig, flags: Flags) -> Self {
        Self { cfg, flags }
    }

    pub fn workdir(&self) -> &Path {
        &self.cfg.paths.workdir
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.workdir().join(name)
    }

    /// Artifacts a stage reads, with the command that produces each.
    fn required(&self, stage: Stage) -> Vec<(PathBuf, &'static str)> {
        let lms = || {
            let folds = 0..self.cfg.lm.n_folds as u32;
            folds
                .flat_map(|f| [Direction::Forward, Direction::Backward].map(|d| (lm_path(self.workdir(), d, f), "run train-lm first")))
                .collect::<Vec<_>>()
        };
        let ctx = (self.path(CONTEXTS), "run ingest first");
        let pools = (self.path(POOLS), "run generate first");
        let assignment = (self.path(ASSIGNMENT), "run filter first");
        let tasks = (self.path(TASKS), "run tasks (or serve) first");
        match stage {
            Stage::Ingest => vec![],
            Stage::TrainLm => vec![ctx],
            Stage::Generate => [vec![ctx], lms()].concat(),
            Stage::Filter => [vec![ctx, pools], lms()].concat(),
            Stage::Tasks => vec![ctx, pools, assignment],
            Stage::Annotate => vec![tasks],
            Stage::Assemble => vec![ctx, pools, assignment, tasks],
            Stage::Evaluate => vec![(self.path(ASSEMBLED), "run assemble first")],
            Stage::Report => vec![
                (self.path(TRACE), "run filter first"),
                (self.path(AF_SUMMARY), "run filter first"),
                (self.path(EVAL_JSON), "run evaluate first"),
                tasks,
            ],
        }
    }

    fn begin(&self, stage: Stage) -> Result<Manifest> {
        if let Some((path, hint)) = self.required(stage).into_iter().find(|(p, _)| !p.exists()) {
            return Err(Error::Missing { path, hint: hint.to_string() });
        }
        std::fs::create_dir_all(self.workdir()).map_err(|e| Error::io(self.workdir(), e))?;
        let m = Manifest::load(self.workdir())?;
        m.check_upstream(&self.cfg, self.workdir(), stage, self.flags.force)?;
        Ok(m)
    }

    fn finish(&self, mut m: Manifest, stage: Stage, inputs: &[&Path], outputs: &[&Path], logs: &[&Path]) -> Result<()> {
        m.record(&self.cfg, self.workdir(), stage, inputs, outputs, logs)?;
        m.save(self.workdir())
    }

    pub fn load_contexts(&self) -> Result<Vec<Context>> {
        let ctxs: Vec<Context> = io::read_jsonl(&self.path(CONTEXTS), "run ingest first")?;
        check_unique(ctxs.iter().map(|c| c.context_id.as_str()), "context_id")?;
        Ok(ctxs)
    }

    pub fn load_pools(&self) -> Result<Vec<CandidatePool>> {
        io::read_jsonl(&self.path(POOLS), "run generate first")
    }

    fn load_lm(&self, dir: Direction, fold: u32) -> Result<NGramModel> {
        io::read_json(&lm_path(self.workdir(), dir, fold), "run train-lm first")
    }

    fn load_lms(&self, dir: Direction) -> Result<Vec<NGramModel>> {
        (0..self.cfg.lm.n_folds as u32).map(|f| self.load_lm(dir, f)).collect()
    }

    // ---- ingest ----

    pub fn ingest(&self) -> Result<()> {
        let m = self.begin(Stage::Ingest)?;
        let corpus_path = self
            .cfg
            .paths
            .corpus
            .clone()
            .ok_or_else(|| Error::Config("paths.corpus is required for ingest".into()))?;
        let records = io::read_jsonl_lenient::<RawRecord>(&corpus_path, "paths.corpus")?;
        let ingested = corpus::ingest_pairs(records, self.cfg.corpus.max_gap_seconds);
        check_unique(ingested.pairs.iter().map(|p| p.id.as_str()), "record id")?;
        let lexicon = match &self.cfg.paths.verb_lexicon {
            Some(p) => std::fs::read_to_string(p)
                .map_err(|e| Error::io(p, e))?
                .lines()
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .map(String::from)
                .collect(),
            None => corpus::default_verb_lexicon(),
        };
        let (kept, filtered) = corpus::filter_corpus(&ingested.pairs, &self.cfg.corpus, &lexicon);
        let contexts = corpus::fold_assign(kept, self.cfg.lm.n_folds, self.cfg.stage_seed("ingest"))
            .map_err(|e| Error::data("fold assignment", e))?;
        let rejects: Vec<Reject> = ingested.rejects.into_iter().chain(filtered).collect();
        io::write_jsonl(&self.path(CONTEXTS), &contexts)?;
        io::write_jsonl(&self.path(REJECTS), &rejects)?;
        eprintln!("ingest: {} contexts kept, {} rejected", contexts.len(), rejects.len());
        self.finish(m, Stage::Ingest, &[&corpus_path], &[&self.path(CONTEXTS), &self.path(REJECTS)], &[])
    }

    // ---- train-lm ----

    fn extra_sentences(&self) -> Result<Vec<Vec<String>>> {
        let Some(p) = &self.cfg.paths.lm_extra else { return Ok(Vec::new()) };
        let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
        Ok(text.lines().map(corpus::tokenize).filter(|t| !t.is_empty()).collect())
    }

    pub fn train_lm(&self) -> Result<()> {
        let m = self.begin(Stage::TrainLm)?;
        let contexts = self.load_contexts()?;
        let extra = self.extra_sentences()?;
        let full: Vec<(u32, Vec<String>)> = contexts
            .iter()
            .map(|c| {
                let mut t = c.prefix();
                t.extend(c.v_found.iter().cloned());
                (c.fold, t)
            })
            .collect();
        let jobs: Vec<(Direction, u32)> = (0..self.cfg.lm.n_folds as u32)
            .flat_map(|f| [(Direction::Forward, f), (Direction::Backward, f)])
            .collect();
        let lm_cfg = self.cfg.lm.model();
        let models: Vec<(Direction, u32, NGramModel)> = jobs
            .par_iter()
            .map(|&(dir, fold)| {
                let sentences = full
                    .iter()
                    .map(|(f, t)| TrainingSentence { fold: Some(*f), tokens: t })
                    .chain(extra.iter().map(|t| TrainingSentence { fold: None, tokens: t }));
                lm::train_lm(sentences, lm_cfg, dir, Some(fold))
                    .map(|model| (dir, fold, model))
                    .map_err(|e| Error::data(format!("training {dir:?} model without fold {fold}"), e))
            })
            .collect::<Result<_>>()?;
        let mut outputs = Vec::new();
        for (dir, fold, model) in &models {
            let p = lm_path(self.workdir(), *dir, *fold);
            io::write_json(&p, model)?;
            outputs.push(p);
        }
        eprintln!("train-lm: {} models", models.len());
        let mut inputs = vec![self.path(CONTEXTS)];
        inputs.extend(self.cfg.paths.lm_extra.clone());
        let ins: Vec<&Path> = inputs.iter().map(PathBuf::as_path).collect();
        let outs: Vec<&Path> = outputs.iter().map(PathBuf::as_path).collect();
        self.finish(m, Stage::TrainLm, &ins, &outs, &[])
    }

    // ---- generate ----

    pub fn generate(&self) -> Result<()> {
        let m = self.begin(Stage::Generate)?;
        let contexts = self.load_contexts()?;
        let models = self.load_lms(Direction::Forward)?;
        let seed = self.cfg.stage_seed("generate");
        let sample = self.cfg.generation;
        let pools: Vec<CandidatePool> = contexts
            .par_iter()
            .map(|c| {
                let model = models
                    .get(c.fold as usize)
                    .ok_or_else(|| Error::Data(format!("context {} has fold {} without a model", c.context_id, c.fold)))?;
                lm::sample_endings(model, c, &sample, seed).map_err(|e| Error::data(&c.context_id, e))
            })
            .collect::<Result<_>>()?;
        let short = pools.iter().filter(|p| p.short_pool).count();
        io::write_jsonl(&self.path(POOLS), &pools)?;
        eprintln!("generate: {} pools, {short} short", pools.len());
        self.finish(m, Stage::Generate, &[&self.path(CONTEXTS)], &[&self.path(POOLS)], &[])
    }

    // ---- filter ----

    /// Contexts whose pools can hold a k-subset, paired with their pools.
    pub fn af_inputs(&self) -> Result<(Vec<Context>, Vec<CandidatePool>, Vec<String>)> {
        let contexts = self.load_contexts()?;
        let pools = self.load_pools()?;
        let mut by_id: BTreeMap<String, CandidatePool> = BTreeMap::new();
        for p in pools {
            if by_id.insert(p.context_id.clone(), p).is_some() {
                return Err(Error::Data("duplicate pool context_id".into()));
            }
        }
        let mut kept = Vec::new();
        let mut kept_pools = Vec::new();
        let mut skipped = Vec::new();
        for c in contexts {
            let pool = by_id
                .remove(&c.context_id)
                .ok_or_else(|| Error::Data(format!("no pool for context {}", c.context_id)))?;
            if pool.excluded_fold != Some(c.fold) {
                return Err(Error::Data(format!("pool for {} was not generated without its fold", c.context_id)));
            }
            if pool.candidates.len() < self.cfg.af.k {
                skipped.push(c.context_id);
                continue;
            }
            kept.push(c);
            kept_pools.push(pool);
        }
        Ok((kept, kept_pools, skipped))
    }

    /// Perplexity features and word ids of every candidate, each scored by
    /// the model pair trained without the context's fold.
    pub fn build_features(&self, contexts: &[Context], pools: &[CandidatePool]) -> Result<AfFeatures> {
        let fwd = self.load_lms(Direction::Forward)?;
        let bwd = self.load_lms(Direction::Backward)?;
        let mut vocab = Vocab::new();
        for (c, p) in contexts.iter().zip(pools) {
            for t in c.n.iter().chain(&c.v_found).chain(p.candidates.iter().flat_map(|x| &x.tokens)) {
                vocab.insert(t);
            }
        }
        let vocab_ref = &vocab;
        let feats: Vec<ContextFeatures> = contexts
            .par_iter()
            .zip(pools)
            .map(|(c, p)| {
                let f = c.fold as usize;
                let prefix = c.prefix();
                let cand = |ending: &[String]| -> Result<CandFeatures> {
                    let ppl = lm_features(&fwd[f], &bwd[f], &prefix, ending)
                        .map_err(|e| Error::data(&c.context_id, e))?;
                    let word_ids = vocab_ref.ids(&c.second_sentence(ending));
                    Ok(CandFeatures { ppl, word_ids })
                };
                Ok(ContextFeatures {
                    positive: cand(&c.v_found)?,
                    pool: p.candidates.iter().map(|x| cand(&x.tokens)).collect::<Result<_>>()?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(AfFeatures { vocab, contexts: feats })
    }

    fn write_assignment(&self, contexts: &[Context], a: &Assignment) -> Result<()> {
        let rows: Vec<AssignmentRow> = contexts
            .iter()
            .zip(&a.indices)
            .map(|(c, idx)| AssignmentRow { context_id: c.context_id.clone(), iteration: a.iteration, indices: idx.clone() })
            .collect();
        io::write_jsonl(&self.path(ASSIGNMENT), &rows)
    }

    pub fn read_assignment(&self, contexts: &[Context]) -> Result<Assignment> {
        let rows: Vec<AssignmentRow> = io::read_jsonl(&self.path(ASSIGNMENT), "run filter first")?;
        if rows.len() != contexts.len() || rows.iter().zip(contexts).any(|(r, c)| r.context_id != c.context_id) {
            return Err(Error::Data("assignment.jsonl does not match the filtered contexts".into()));
        }
        let iteration = rows.first().map_or(0, |r| r.iteration);
        if rows.iter().any(|r| r.iteration != iteration) {
            return Err(Error::Data("assignment.jsonl mixes iterations".into()));
        }
        Ok(Assignment { iteration, indices: rows.into_iter().map(|r| r.indices).collect() })
    }

    /// Runs adversarial filtering, checkpointing the assignment and trace
    /// after every iteration. Returns `false` when stopped early by
    /// `stop_after`.
    pub fn filter(&self) -> Result<bool> {
        let m = self.begin(Stage::Filter)?;
        let (contexts, pools, skipped) = self.af_inputs()?;
        if !skipped.is_empty() {
            eprintln!("filter: skipping {} contexts with pools smaller than k", skipped.len());
        }
        let features = self.build_features(&contexts, &pools)?;
        let sizes = features.pool_sizes();
        let af_cfg = self.cfg.af_config();
        let resume = if self.flags.resume && self.path(ASSIGNMENT).exists() && self.path(TRACE).exists() {
            let a = self.read_assignment(&contexts)?;
            let t = read_trace(&self.path(TRACE))?;
            eprintln!("filter: resuming at iteration {}", a.iteration);
            Some((a, t))
        } else {
            None
        };
        let mut trace: Vec<TraceRow> = resume.as_ref().map(|(_, t)| t.clone()).unwrap_or_default();
        let mut adversary = CommitteeAdversary { features: &features, config: self.cfg.committee_config(), seed: af_cfg.seed };
        let mut done_here = 0usize;
        let mut stopped = false;
        let stop_after = self.flags.stop_after;
        let result = af::run_af(&sizes, &af_cfg, &mut adversary, resume, |out| {
            trace.push(out.row.clone());
            self.write_assignment(&contexts, &out.assignment).map_err(|e| AfError::Checkpoint(e.to_string()))?;
            write_trace(&self.path(TRACE), &trace).map_err(|e| AfError::Checkpoint(e.to_string()))?;
            let r = &out.row;
            eprintln!(
                "filter: iteration {} accuracy {:.4} loss {:.4} replacements {} members {}",
                r.iteration,
                r.accuracy,
                r.loss,
                r.replacements,
                members_to_str(r.active_members)
            );
            done_here += 1;
            if stop_after.is_some_and(|n| done_here >= n) {
                stopped = true;
                return Err(AfError::Checkpoint("stopped".into()));
            }
            Ok(())
        });
        let run = match result {
            Ok(run) => Some(run),
            Err(_) if stopped => None,
            Err(e @ (AfError::Config(_) | AfError::Resume(_))) => return Err(Error::Config(e.to_string())),
            Err(e @ AfError::Checkpoint(_)) => return Err(Error::Internal(e.to_string())),
            Err(e) => return Err(Error::Data(e.to_string())),
        };
        let trace = match &run {
            Some(r) => r.trace.clone(),
            None => read_trace(&self.path(TRACE))?,
        };
        if let Some(r) = &run {
            self.write_assignment(&contexts, &r.assignment)?;
            write_trace(&self.path(TRACE), &r.trace)?;
        }
        let tail = trace.len().min(af_cfg.window);
        let summary = AfSummary {
            stop: run.as_ref().map(|r| r.stop),
            iterations: trace.len(),
            first_accuracy: trace.first().map(|r| r.accuracy),
            trailing_accuracy: (tail > 0)
                .then(|| trace[trace.len() - tail..].iter().map(|r| r.accuracy).sum::<f64>() / tail as f64),
            chance: af_cfg.chance(),
            skipped,
        };
        io::write_json(&self.path(AF_SUMMARY), &summary)?;
        if run.is_none() {
            eprintln!("filter: stopped after {} iterations; continue with --resume", trace.len());
            return Ok(false);
        }
        eprintln!("filter: {} after {} iterations", stop_name(summary.stop), summary.iterations);
        self.finish(
            m,
            Stage::Filter,
            &[&self.path(CONTEXTS), &self.path(POOLS)],
            &[&self.path(ASSIGNMENT), &self.path(TRACE), &self.path(AF_SUMMARY)],
            &[],
        )?;
        Ok(true)
    }

    // ---- tasks ----

    /// Writes the first-round task of every filtered context. Refuses to
    /// overwrite a task log that already has responses unless forced.
    pub fn make_tasks(&self) -> Result<()> {
        let m = self.begin(Stage::Tasks)?;
        if self.path(RESPONSES).exists() && !self.flags.force {
            return Err(Error::Stale(format!(
                "{} already holds responses to the current tasks",
                self.path(RESPONSES).display()
            )));
        }
        let (contexts, pools, _) = self.af_inputs()?;
        let a = self.read_assignment(&contexts)?;
        let seed = self.cfg.stage_seed("tasks");
        let tasks: Vec<AnnotationTask> = contexts
            .iter()
            .zip(&pools)
            .zip(&a.indices)
            .map(|((c, p), idx)| {
                validation::make_task(c, p, idx, self.cfg.validation.n_generated, seed)
                    .map_err(|e| Error::data(&c.context_id, e))
            })
            .collect::<Result<_>>()?;
        io::write_jsonl(&self.path(TASKS), &tasks)?;
        for stale in [RESPONSES, OUTCOMES] {
            let p = self.path(stale);
            if p.exists() {
                std::fs::remove_file(&p).map_err(|e| Error::io(&p, e))?;
            }
        }
        eprintln!("tasks: {} tasks", tasks.len());
        self.finish(m, Stage::Tasks, &[&self.path(ASSIGNMENT), &self.path(POOLS)], &[], &[&self.path(TASKS)])
    }

    /// Rebuilds the queue from the task log, the response log and the last
    /// assembly outcomes.
    pub fn load_queue(&self) -> Result<TaskQueue> {
        let tasks: Vec<AnnotationTask> = io::read_jsonl(&self.path(TASKS), "run tasks (or serve) first")?;
        let responses: Vec<AnnotationResponse> = if self.path(RESPONSES).exists() {
            io::read_jsonl(&self.path(RESPONSES), "")?
        } else {
            Vec::new()
        };
        let outcomes: Vec<OutcomeRow> =
            if self.path(OUTCOMES).exists() { io::read_jsonl(&self.path(OUTCOMES), "")? } else { Vec::new() };
        let mut q = TaskQueue::new(self.cfg.queue_config());
        for t in tasks {
            q.push(t).map_err(|e| Error::data(TASKS, e))?;
        }
        for r in responses {
            if q.get(&r.task_id).is_none() {
                return Err(Error::Data(format!("response for unknown task {}", r.task_id)));
            }
            q.record(r);
        }
        // A task superseded by a later round is closed.
        let latest: BTreeMap<&str, u32> = q.entries().iter().fold(BTreeMap::new(), |mut acc, e| {
            let r = acc.entry(e.task.context_id.as_str()).or_insert(0);
            *r = (*r).max(e.task.round);
            acc
        });
        let superseded: Vec<String> = q
            .entries()
            .iter()
            .filter(|e| latest[e.task.context_id.as_str()] > e.task.round)
            .map(|e| e.task.task_id.clone())
            .collect();
        for id in superseded {
            q.set_status(&id, TaskStatus::Reannotate).map_err(|e| Error::Internal(e.to_string()))?;
        }
        for o in outcomes.iter().filter(|o| o.outcome == "rejected") {
            if q.get(&o.task_id).is_some() {
                q.set_status(&o.task_id, TaskStatus::Rejected).map_err(|e| Error::Internal(e.to_string()))?;
            }
        }
        Ok(q)
    }

    fn ensure_tasks(&self) -> Result<()> {
        if !self.path(TASKS).exists() {
            self.make_tasks()?;
        }
        Ok(())
    }

    // ---- simulate ----

    /// Answers every open task with simulated annotators, appending each
    /// response to the log. Returns the number of responses written.
    pub fn simulate(&self) -> Result<usize> {
        self.ensure_tasks()?;
        let m = self.begin(Stage::Annotate)?;
        let mut q = self.load_queue()?;
        let sim = &self.cfg.validation.simulate;
        let seed = self.cfg.stage_seed("simulate");
        let path = self.path(RESPONSES);
        let mut log = io::open_append(&path)?;
        let mut annotators: Vec<String> = (0..sim.annotators).map(|i| format!("sim-{i}")).collect();
        let mut clock = q.entries().iter().flat_map(|e| e.responses.iter().map(|r| r.timestamp)).max().unwrap_or(0);
        let mut written = 0;
        let ids: Vec<String> = q.entries().iter().map(|e| e.task.task_id.clone()).collect();
        for id in ids {
            let mut turn = 0usize;
            while q.get(&id).is_some_and(|e| e.status == TaskStatus::Open) {
                clock += 1;
                let start = validation_turn(&id, annotators.len(), turn);
                let mut chosen = None;
                for k in 0..annotators.len() {
                    let a = &annotators[(start + k) % annotators.len()];
                    if q.claim(&id, a, clock).is_ok() {
                        chosen = Some(a.clone());
                        break;
                    }
                }
                let a = match chosen {
                    Some(a) => a,
                    None => {
                        let fresh = format!("sim-{}", annotators.len());
                        annotators.push(fresh.clone());
                        q.claim(&id, &fresh, clock).map_err(|e| Error::Internal(e.to_string()))?;
                        fresh
                    }
                };
                let task = q.get(&id).expect("task exists").task.clone();
                let resp = simulate::respond(&task, &a, sim, seed, clock);
                q.check_submit(&resp).map_err(|e| Error::Internal(format!("simulated response rejected: {e}")))?;
                io::append_jsonl(&mut log, &path, &resp)?;
                q.record(resp);
                written += 1;
                turn += 1;
            }
        }
        eprintln!("simulate: {written} responses");
        self.finish(m, Stage::Annotate, &[], &[], &[&self.path(TASKS), &path])?;
        Ok(written)
    }

    // ---- serve ----

    /// Service state over the task and response logs, creating first-round
    /// tasks if none exist yet.
    pub fn service_state(&self, clock: server::Clock) -> Result<server::AppState> {
        self.ensure_tasks()?;
        self.begin(Stage::Annotate)?;
        let q = self.load_queue()?;
        server::AppState::new(q, self.path(RESPONSES), clock)
    }

    /// Records the response log after a serving session.
    pub fn record_annotation(&self) -> Result<()> {
        let m = Manifest::load(self.workdir())?;
        self.finish(m, Stage::Annotate, &[], &[], &[&self.path(TASKS), &self.path(RESPONSES)])
    }

    // ---- assemble ----

    pub fn assemble(&self) -> Result<AssembleSummary> {
        let m = self.begin(Stage::Assemble)?;
        let q = self.load_queue()?;
        let (contexts, pools, _) = self.af_inputs()?;
        let a = self.read_assignment(&contexts)?;
        let cfg = self.cfg.assembly_config();
        let mut latest: BTreeMap<&str, &validation::TaskEntry> = BTreeMap::new();
        for e in q.entries() {
            let slot = latest.entry(e.task.context_id.as_str()).or_insert(e);
            if e.task.round > slot.task.round {
                *slot = e;
            }
        }
        let mut summary = AssembleSummary::default();
        let mut questions: Vec<AssembledQuestion> = Vec::new();
        let mut outcomes = Vec::new();
        let mut new_tasks = Vec::new();
        for ((c, pool), assigned) in contexts.iter().zip(&pools).zip(&a.indices) {
            let Some(e) = latest.get(c.context_id.as_str()) else { continue };
            let row = |outcome: &str, reason: Option<String>| OutcomeRow {
                task_id: e.task.task_id.clone(),
                context_id: c.context_id.clone(),
                outcome: outcome.to_string(),
                reason,
            };
            if e.status == TaskStatus::Rejected {
                summary.rejected += 1;
                outcomes.push(row("rejected", None));
                continue;
            }
            if e.status != TaskStatus::Done {
                summary.pending += 1;
                outcomes.push(row("pending", None));
                continue;
            }
            match assemble(&e.task, &e.responses, &cfg) {
                Assembly::Questions { questions: qs } => {
                    summary.assembled_tasks += 1;
                    questions.extend(qs);
                    outcomes.push(row("assembled", None));
                }
                Assembly::Reannotate { flagged, reason } => {
                    match reannotate(&e.task, &flagged, pool, assigned, cfg.seed) {
                        Some(next) => {
                            summary.new_rounds += 1;
                            new_tasks.push(next);
                            outcomes.push(row("reannotate", Some(reason)));
                        }
                        None => {
                            summary.rejected += 1;
                            outcomes.push(row("rejected", Some(format!("{reason}; no unseen assigned endings left"))));
                        }
                    }
                }
                Assembly::Reject { reason } => {
                    summary.rejected += 1;
                    outcomes.push(row("rejected", Some(reason)));
                }
            }
        }
        summary.questions = questions.len();
        let training = &cfg.training_folds;
        for qn in &questions {
            validation::check_question(qn, training)
                .map_err(|e| Error::Internal(format!("assembled question {} broke an invariant: {e}", qn.question_id)))?;
        }
        if !new_tasks.is_empty() {
            let path = self.path(TASKS);
            let mut f = io::open_append(&path)?;
            for t in &new_tasks {
                io::append_jsonl(&mut f, &path, t)?;
            }
        }
        io::write_jsonl(&self.path(OUTCOMES), &outcomes)?;
        io::write_jsonl(&self.path(ASSEMBLED), &questions)?;
        eprintln!(
            "assemble: {} questions from {} tasks; {} new rounds, {} rejected, {} pending",
            summary.questions, summary.assembled_tasks, summary.new_rounds, summary.rejected, summary.pending
        );
        let mut logs = vec![self.path(TASKS), self.path(OUTCOMES)];
        if self.path(RESPONSES).exists() {
            logs.push(self.path(RESPONSES));
        }
        let logs: Vec<&Path> = logs.iter().map(PathBuf::as_path).collect();
        self.finish(m, Stage::Assemble, &[&self.path(ASSIGNMENT), &self.path(POOLS)], &[&self.path(ASSEMBLED)], &logs)?;
        Ok(summary)
    }

    // ---- evaluate ----

    pub fn evaluate(&self) -> Result<EvalReport> {
        let m = self.begin(Stage::Evaluate)?;
        let questions: Vec<AssembledQuestion> = io::read_jsonl(&self.path(ASSEMBLED), "run assemble first")?;
        let pretrained = match &self.cfg.paths.embeddings {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                Some(parse_embedding_text(&text).map_err(|e| Error::data(p.display(), e))?)
            }
            None => None,
        };
        let report = eval::evaluate(&questions, &self.cfg.eval_config(), pretrained.as_ref());
        io::write_json(&self.path(EVAL_JSON), &report)?;
        io::write_text(&self.path(EVAL_TXT), &report.render())?;
        io::write_atomic(&self.path(EVAL_LOSS), |w| {
            writeln!(w, "baseline,epoch,loss")?;
            for (b, losses) in &report.train_loss {
                for (i, l) in losses.iter().enumerate() {
                    writeln!(w, "{b},{i},{l}")?;
                }
            }
            Ok(())
        })?;
        eprint!("{}", report.render());
        let mut inputs = vec![self.path(ASSEMBLED)];
        inputs.extend(self.cfg.paths.embeddings.clone());
        let ins: Vec<&Path> = inputs.iter().map(PathBuf::as_path).collect();
        self.finish(
            m,
            Stage::Evaluate,
            &ins,
            &[&self.path(EVAL_JSON), &self.path(EVAL_TXT), &self.path(EVAL_LOSS)],
            &[],
        )?;
        Ok(report)
    }

    // ---- report ----

    pub fn report(&self) -> Result<Report> {
        let m = self.begin(Stage::Report)?;
        let trace = read_trace(&self.path(TRACE))?;
        let af: AfSummary = io::read_json(&self.path(AF_SUMMARY), "run filter first")?;
        let eval: EvalReport = io::read_json(&self.path(EVAL_JSON), "run evaluate first")?;
        let metrics = self.load_queue()?.metrics();
        io::write_atomic(&self.path(AF_CURVE), |w| {
            writeln!(w, "iteration,accuracy,chance")?;
            for r in &trace {
                writeln!(w, "{},{},{}", r.iteration, r.accuracy, af.chance)?;
            }
            Ok(())
        })?;
        let report = Report { af, eval, annotation: metrics };
        io::write_json(&self.path(REPORT_JSON), &report)?;
        io::write_text(&self.path(REPORT_TXT), &report.render())?;
        eprint!("{}", report.render());
        self.finish(
            m,
            Stage::Report,
            &[&self.path(TRACE), &self.path(AF_SUMMARY), &self.path(EVAL_JSON)],
            &[&self.path(AF_CURVE), &self.path(REPORT_JSON), &self.path(REPORT_TXT)],
            &[],
        )?;
        Ok(report)
    }

    // ---- everything ----

    /// Runs every stage with simulated annotators, looping annotation and
    /// assembly until no task is pending.
    pub fn run_all(&self) -> Result<EvalReport> {
        self.ingest()?;
        self.train_lm()?;
        self.generate()?;
        if !self.filter()? {
            return Err(Error::Internal("filter stopped early".into()));
        }
        self.make_tasks()?;
        loop {
            self.simulate()?;
            let s = self.assemble()?;
            if s.new_rounds == 0 {
                break;
            }
        }
        let report = self.evaluate()?;
        self.report()?;
        Ok(report)
    }
}

/// Rotates the first annotator offered a task so work spreads evenly.
fn validation_turn(task_id: &str, n: usize, turn: usize) -> usize {
    (afkit_core::rng::derive_seed(0, "turn", task_id) as usize).wrapping_add(turn) % n.max(1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub af: AfSummary,
    pub eval: EvalReport,
    pub annotation: Metrics,
}

impl Report {
    pub fn render(&self) -> String {
        let a = &self.af;
        let opt = |x: Option<f64>| x.map_or("-".to_string(), |v| format!("{v:.4}"));
        let mut out = format!(
            "adversarial filtering: {} iterations ({}), first accuracy {}, trailing accuracy {}, chance {:.4}\n",
            a.iterations,
            stop_name(a.stop),
            opt(a.first_accuracy),
            opt(a.trailing_accuracy),
            a.chance
        );
        let m = &self.annotation;
        out.push_str(&format!(
            "annotation: {} responses, found in top two {:.4}, label alpha {}, label ppa {}\n\n",
            m.responses,
            m.found_top2_rate,
            opt(m.label_alpha),
            opt(m.label_ppa)
        ));
        out.push_str(&self.eval.render());
        out
    }
}
