//! `manifest.json`: per stage, the config hash it ran under, its derived seed
//! and the hashes of what it read and wrote.
//!
//! A stage hash covers the stage's own config section plus the hashes of its
//! upstream stages, so a change anywhere upstream makes every downstream
//! entry stale.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::io;

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Ingest,
    TrainLm,
    Generate,
    Filter,
    Tasks,
    /// Responses collected by `serve` or `simulate`.
    Annotate,
    Assemble,
    Evaluate,
    Report,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::TrainLm => "train-lm",
            Stage::Generate => "generate",
            Stage::Filter => "filter",
            Stage::Tasks => "tasks",
            Stage::Annotate => "annotate",
            Stage::Assemble => "assemble",
            Stage::Evaluate => "evaluate",
            Stage::Report => "report",
        }
    }

    pub fn upstream(self) -> &'static [Stage] {
        match self {
            Stage::Ingest => &[],
            Stage::TrainLm => &[Stage::Ingest],
            Stage::Generate => &[Stage::TrainLm],
            Stage::Filter => &[Stage::Generate],
            Stage::Tasks => &[Stage::Filter],
            Stage::Annotate => &[Stage::Tasks],
            Stage::Assemble => &[Stage::Tasks],
            Stage::Evaluate => &[Stage::Assemble],
            Stage::Report => &[Stage::Evaluate],
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

pub fn stage_hash(cfg: &PipelineConfig, stage: Stage) -> String {
    let upstream: Vec<String> = stage.upstream().iter().map(|&u| stage_hash(cfg, u)).collect();
    let doc = json!({ "stage": stage.name(), "section": cfg.stage_section(stage), "upstream": upstream });
    io::sha256_bytes(doc.to_string().as_bytes())
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Entry {
    pub config_hash: String,
    pub seed: u64,
    /// File name → SHA-256 of files read.
    #[serde(default)]
    pub inputs: BTreeMap<String, String>,
    /// Deterministic artifacts; verified before downstream stages read them.
    #[serde(default)]
    pub outputs: BTreeMap<String, String>,
    /// Append-only logs, hashed for the record but never verified.
    #[serde(default)]
    pub logs: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stages: BTreeMap<Stage, Entry>,
}

fn key(workdir: &Path, p: &Path) -> String {
    p.strip_prefix(workdir).unwrap_or(p).display().to_string()
}

impl Manifest {
    pub fn load(workdir: &Path) -> Result<Self> {
        let path = workdir.join(MANIFEST);
        if !path.exists() {
            return Ok(Self::default());
        }
        io::read_json(&path, "")
    }

    pub fn save(&self, workdir: &Path) -> Result<()> {
        io::write_json(&workdir.join(MANIFEST), self)
    }

    /// Refuses to run `stage` when an upstream stage is missing from the
    /// manifest, ran under a different config, or had its outputs changed
    /// since. `force` skips the check.
    pub fn check_upstream(&self, cfg: &PipelineConfig, workdir: &Path, stage: Stage, force: bool) -> Result<()> {
        if force {
            return Ok(());
        }
        for &u in stage.upstream() {
            let Some(e) = self.stages.get(&u) else {
                return Err(Error::Stale(format!("{stage} needs {u}, which has no manifest entry")));
            };
            if e.config_hash != stage_hash(cfg, u) {
                return Err(Error::Stale(format!("{u} ran under a different config than the current one")));
            }
            for (name, hash) in &e.outputs {
                let p = workdir.join(name);
                if !p.exists() {
                    return Err(Error::Missing { path: p, hint: format!("written by {u}; rerun it") });
                }
                if &io::sha256_file(&p)? != hash {
                    return Err(Error::Stale(format!("{name} changed since {u} wrote it")));
                }
            }
        }
        Ok(())
    }

    pub fn record(
        &mut self,
        cfg: &PipelineConfig,
        workdir: &Path,
        stage: Stage,
        inputs: &[&Path],
        outputs: &[&Path],
        logs: &[&Path],
    ) -> Result<()> {
        let hash_all = |ps: &[&Path]| -> Result<BTreeMap<String, String>> {
            ps.iter().map(|p| Ok((key(workdir, p), io::sha256_file(p)?))).collect()
        };
        let entry = Entry {
            config_hash: stage_hash(cfg, stage),
            seed: cfg.stage_seed(stage.name()),
            inputs: hash_all(inputs)?,
            outputs: hash_all(outputs)?,
            logs: hash_all(logs)?,
        };
        self.stages.insert(stage, entry);
        Ok(())
    }
}
