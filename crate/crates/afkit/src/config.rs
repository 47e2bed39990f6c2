//! The single JSON pipeline config.
//!
//! Every section falls back to its defaults, so `{}` plus a corpus path is a
//! complete config. Seeds inside sections are ignored: each stage derives
//! its own seed from the global one.

use std::path::{Path, PathBuf};

use afkit_core::af::AfConfig;
use afkit_core::committee::CommitteeConfig;
use afkit_core::corpus::FilterConfig;
use afkit_core::eval::EvalConfig;
use afkit_core::lm::{LmConfig, SampleConfig};
use afkit_core::rng::derive_seed;
use afkit_core::validation::{AssemblyConfig, QueueConfig};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::simulate::SimConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    pub workdir: PathBuf,
    /// Caption-pair JSONL; needed by `ingest` only.
    pub corpus: Option<PathBuf>,
    /// Word vectors (`word v1 v2 ...` per line) for the bilinear baseline.
    pub embeddings: Option<PathBuf>,
    /// Extra plain-text sentences, one per line, added to every LM fold.
    pub lm_extra: Option<PathBuf>,
    /// One verb per line; replaces the built-in splitter lexicon.
    pub verb_lexicon: Option<PathBuf>,
}

impl Default for Paths {
    fn default() -> Self {
        Self { workdir: PathBuf::from("work"), corpus: None, embeddings: None, lm_extra: None, verb_lexicon: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LmSection {
    pub order: usize,
    pub discount: f64,
    pub n_folds: usize,
}

impl Default for LmSection {
    fn default() -> Self {
        let d = LmConfig::default();
        Self { order: d.order, discount: d.discount, n_folds: 5 }
    }
}

impl LmSection {
    pub fn model(&self) -> LmConfig {
        LmConfig { order: self.order, discount: self.discount }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ValidationSection {
    /// Generated endings shown per task.
    pub n_generated: usize,
    pub queue: QueueConfig,
    pub assembly: AssemblyConfig,
    pub bind: String,
    pub simulate: SimConfig,
}

impl Default for ValidationSection {
    fn default() -> Self {
        Self {
            n_generated: 5,
            queue: QueueConfig::default(),
            assembly: AssemblyConfig::default(),
            bind: "127.0.0.1:8080".into(),
            simulate: SimConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub paths: Paths,
    pub corpus: FilterConfig,
    pub lm: LmSection,
    pub generation: SampleConfig,
    pub af: AfConfig,
    pub committee: CommitteeConfig,
    pub validation: ValidationSection,
    pub eval: EvalConfig,
}

/// Command-line overrides applied on top of the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub workdir: Option<PathBuf>,
}

impl PipelineConfig {
    /// Parses, resolves relative paths against the config file's directory,
    /// applies overrides and validates.
    pub fn load(path: &Path, overrides: &Overrides) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg: PipelineConfig =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        // Stage hashes include paths, so the same config must resolve to the
        // same strings whatever directory it is invoked from.
        let base = match path.parent() {
            Some(p) if !p.as_os_str().is_empty() => p,
            _ => Path::new("."),
        };
        let base = std::fs::canonicalize(base).unwrap_or_else(|_| base.to_path_buf());
        cfg.resolve_paths(&base);
        if let Some(s) = overrides.seed {
            cfg.seed = s;
        }
        if let Some(w) = &overrides.workdir {
            cfg.paths.workdir = w.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.paths.workdir);
        for p in [
            &mut self.paths.corpus,
            &mut self.paths.embeddings,
            &mut self.paths.lm_extra,
            &mut self.paths.verb_lexicon,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        self.af.validate().map_err(|e| Error::Config(format!("af: {e}")))?;
        self.committee.validate().map_err(|e| Error::Config(format!("committee: {e}")))?;
        if self.lm.order == 0 || !(self.lm.discount > 0.0 && self.lm.discount < 1.0) {
            return bad("lm: order must be positive and discount in (0, 1)".into());
        }
        if self.lm.n_folds < 2 {
            return bad("lm: n_folds must be at least 2".into());
        }
        if self.generation.n_samples < self.af.k {
            return bad(format!(
                "generation.n_samples ({}) must be at least af.k ({})",
                self.generation.n_samples, self.af.k
            ));
        }
        if self.generation.max_len == 0 {
            return bad("generation.max_len must be positive".into());
        }
        let v = &self.validation;
        if v.n_generated == 0 || v.n_generated > self.af.k {
            return bad(format!("validation.n_generated must lie in 1..={}", self.af.k));
        }
        if !(0.0..=1.0).contains(&v.queue.audit_rate) {
            return bad("validation.queue.audit_rate must lie in [0, 1]".into());
        }
        if v.queue.lease_ms == 0 {
            return bad("validation.queue.lease_ms must be positive".into());
        }
        if v.assembly.max_rounds == 0 {
            return bad("validation.assembly.max_rounds must be positive".into());
        }
        v.simulate.validate().map_err(Error::Config)?;
        let folds = self.lm.n_folds as u32;
        if self.eval.val_fold >= folds || self.eval.test_fold >= folds || self.eval.val_fold == self.eval.test_fold {
            return bad(format!("eval: val_fold and test_fold must be distinct folds below {folds}"));
        }
        if v.assembly.training_folds.iter().any(|&f| f == self.eval.val_fold || f == self.eval.test_fold) {
            return bad("validation.assembly.training_folds must not contain evaluation folds".into());
        }
        for (name, p) in [
            ("paths.corpus", &self.paths.corpus),
            ("paths.embeddings", &self.paths.embeddings),
            ("paths.lm_extra", &self.paths.lm_extra),
            ("paths.verb_lexicon", &self.paths.verb_lexicon),
        ] {
            if let Some(p) = p {
                if !p.is_file() {
                    return bad(format!("{name}: {} does not exist", p.display()));
                }
            }
        }
        Ok(())
    }

    pub fn stage_seed(&self, stage: &str) -> u64 {
        derive_seed(self.seed, stage, "")
    }

    pub fn af_config(&self) -> AfConfig {
        AfConfig { seed: self.stage_seed("filter"), ..self.af.clone() }
    }

    pub fn committee_config(&self) -> CommitteeConfig {
        CommitteeConfig { seed: self.stage_seed("committee"), ..self.committee.clone() }
    }

    pub fn queue_config(&self) -> QueueConfig {
        QueueConfig { seed: self.stage_seed("serve"), ..self.validation.queue.clone() }
    }

    pub fn assembly_config(&self) -> AssemblyConfig {
        AssemblyConfig { seed: self.stage_seed("assemble"), ..self.validation.assembly.clone() }
    }

    pub fn eval_config(&self) -> EvalConfig {
        let seed = self.stage_seed("evaluate");
        let mut e = self.eval.clone();
        e.seed = seed;
        e.ngram.seed = derive_seed(seed, "ngram", "");
        e.dual_bow.seed = derive_seed(seed, "dual_bow", "");
        e
    }

    /// The config slice a stage's outputs depend on directly. Upstream
    /// dependencies enter through the upstream stage's hash.
    pub fn stage_section(&self, stage: crate::manifest::Stage) -> serde_json::Value {
        use crate::manifest::Stage::*;
        let p = &self.paths;
        match stage {
            Ingest => json!({
                "seed": self.seed,
                "corpus": p.corpus,
                "verb_lexicon": p.verb_lexicon,
                "filter": self.corpus,
                "n_folds": self.lm.n_folds,
            }),
            TrainLm => json!({ "order": self.lm.order, "discount": self.lm.discount, "lm_extra": p.lm_extra }),
            Generate => json!({ "seed": self.seed, "generation": self.generation }),
            Filter => json!({ "seed": self.seed, "af": self.af, "committee": self.committee }),
            Tasks => json!({ "seed": self.seed, "n_generated": self.validation.n_generated }),
            Annotate => json!({ "seed": self.seed, "queue": self.validation.queue, "simulate": self.validation.simulate }),
            Assemble => json!({ "seed": self.seed, "assembly": self.validation.assembly }),
            Evaluate => json!({ "seed": self.seed, "eval": self.eval, "embeddings": p.embeddings }),
            Report => json!({}),
        }
    }
}
