use std::path::PathBuf;

use clap::{Parser, Subcommand};

use crate::config::{Overrides, PipelineConfig};
use crate::error::{Error, Result};
use crate::pipeline::{Flags, Pipeline};
use crate::server;
use crate::synth::{self, SynthConfig};

#[derive(Debug, Parser)]
#[command(name = "afkit", version, about = "Adversarial filtering pipeline for multiple-choice ending datasets")]
pub struct Cli {
    /// Pipeline config (JSON).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the global seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Overrides paths.workdir.
    #[arg(long, global = true)]
    pub workdir: Option<PathBuf>,
    /// Continue an interrupted filter run from its checkpoint.
    #[arg(long, global = true)]
    pub resume: bool,
    /// Run even when the manifest says upstream outputs are stale.
    #[arg(long, global = true)]
    pub force: bool,
    /// Worker threads for parallel stages (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Tokenize, filter and fold-split the caption corpus.
    Ingest,
    /// Train forward and backward n-gram models, one pair per held-out fold.
    TrainLm,
    /// Sample candidate endings for every context.
    Generate,
    /// Run adversarial filtering over the candidate pools.
    Filter {
        /// Stop after this many iterations, leaving a resumable checkpoint.
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Write the first annotation task of every filtered context.
    Tasks,
    /// Serve annotation tasks over HTTP until interrupted.
    Serve {
        /// Overrides validation.bind.
        #[arg(long)]
        bind: Option<String>,
    },
    /// Answer open tasks with scripted annotators.
    Simulate,
    /// Turn completed tasks into questions and queue reannotation rounds.
    Assemble,
    /// Score the baselines on the assembled questions.
    Evaluate,
    /// Summarize filtering, annotation and evaluation.
    Report,
    /// Every stage in order, with scripted annotators.
    All,
    /// Write a synthetic corpus and LM background text.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 500)]
        contexts: usize,
        #[arg(long, default_value_t = 0)]
        synth_seed: u64,
        /// Background sentences in the short-fragment style.
        #[arg(long)]
        background_short: Option<usize>,
        /// Background sentences in the run-on style.
        #[arg(long)]
        background_runon: Option<usize>,
        /// Background sentences in the found style with an extra tail.
        #[arg(long)]
        background_long: Option<usize>,
    },
}

/// Parses arguments, runs the command and returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            let msg = serde_json::json!({ "error": e.kind(), "message": e.to_string() });
            eprintln!("{msg}");
            e.exit_code()
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::Config("--threads must be positive".into()));
        }
        // Fails only if the pool was already built, e.g. in tests.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    if let Command::Synth { out, contexts, synth_seed, background_short, background_runon, background_long } =
        &cli.command {
        let d = SynthConfig::default();
        let cfg = SynthConfig {
            contexts: *contexts,
            seed: *synth_seed,
            background_short: background_short.unwrap_or(d.background_short),
            background_runon: background_runon.unwrap_or(d.background_runon),
            background_long: background_long.unwrap_or(d.background_long),
            ..d
        };
        let (c, b) = synth::write(out, &cfg)?;
        eprintln!("synth: wrote {} and {}", c.display(), b.display());
        return Ok(());
    }
    let path = cli.config.clone().ok_or_else(|| Error::Config("--config is required".into()))?;
    let overrides = Overrides { seed: cli.seed, workdir: cli.workdir.clone() };
    let cfg = PipelineConfig::load(&path, &overrides)?;
    let stop_after = match &cli.command {
        Command::Filter { stop_after } => *stop_after,
        _ => None,
    };
    let p = Pipeline::new(cfg, Flags { force: cli.force, resume: cli.resume, stop_after });
    match cli.command {
        Command::Ingest => p.ingest(),
        Command::TrainLm => p.train_lm(),
        Command::Generate => p.generate(),
        Command::Filter { .. } => p.filter().map(|_| ()),
        Command::Tasks => p.make_tasks(),
        Command::Serve { bind } => {
            let bind = bind.unwrap_or_else(|| p.cfg.validation.bind.clone());
            let state = p.service_state(server::system_clock())?;
            let rt = tokio::runtime::Runtime::new().map_err(|e| Error::Internal(e.to_string()))?;
            rt.block_on(server::serve(state, &bind))?;
            p.record_annotation()
        }
        Command::Simulate => p.simulate().map(|_| ()),
        Command::Assemble => p.assemble().map(|_| ()),
        Command::Evaluate => p.evaluate().map(|_| ()),
        Command::Report => p.report().map(|_| ()),
        Command::All => p.run_all().map(|_| ()),
        Command::Synth { .. } => unreachable!("handled above"),
    }
}
