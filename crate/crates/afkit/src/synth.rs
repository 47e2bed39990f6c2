//! A templated caption corpus with planted artifacts, for exercising the
//! whole pipeline at desk scale.
//!
//! Every record is `s ‖ n ‖ v`: `s` sets a scene, `n` is a pronoun and `v`
//! is the found ending. Found endings follow one template (verb, object,
//! path, tail) and 40% of them carry one of five marker words. The LM also
//! sees a background text of the same scenes continued in three other styles:
//! short fragments, long run-ons chained with "and then", and found-style
//! endings with a second tail. Generations therefore mix styles, only some of
//! them resemble the found endings, and the found endings are longer than the
//! typical generation.

use std::path::{Path, PathBuf};

use afkit_core::corpus::RawRecord;
use afkit_core::rng;
use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::io;

pub const MARKERS: [&str; 5] = ["carefully", "quickly", "slowly", "gently", "firmly"];

const SUBJECTS: [(&str, &str); 6] = [
    ("a man", "he"),
    ("a woman", "she"),
    ("a boy", "he"),
    ("a girl", "she"),
    ("two people", "they"),
    ("a group of kids", "they"),
];
const SCENE_ACTS: [&str; 5] = ["standing", "sitting", "waiting", "talking", "working"];
const SCENE_PLACES: [&str; 8] = ["kitchen", "park", "gym", "yard", "street", "garage", "studio", "office"];

const TRUE_VERBS: [&str; 12] =
    ["grabs", "lifts", "carries", "drops", "throws", "holds", "cleans", "opens", "pushes", "pulls", "shakes", "catches"];
const TRUE_OBJECTS: [&str; 12] =
    ["ball", "box", "bag", "cup", "bottle", "rope", "towel", "bucket", "basket", "pan", "hammer", "brush"];
const TRUE_PATHS: [&str; 8] = [
    "onto the table",
    "into the sink",
    "across the room",
    "toward the camera",
    "over the railing",
    "with both hands",
    "above the floor",
    "behind the couch",
];
const TRUE_TAILS: [&str; 6] =
    ["for a moment", "once more", "without stopping", "at the end", "for the crowd", "in one motion"];

const SHORT_VERBS: [&str; 24] = [
    "nods", "smiles", "waves", "laughs", "stops", "sits", "looks", "turns", "leans", "bows", "shrugs", "points",
    "kneels", "blinks", "sighs", "yawns", "claps", "winks", "frowns", "grins", "pauses", "stares", "squats", "steps",
];
const SHORT_PARTICLES: [&str; 16] = [
    "down", "away", "around", "off", "forward", "aside", "again", "briefly", "twice", "quietly", "politely", "nervously",
    "loudly", "softly", "calmly", "proudly",
];

const RUN_VERBS: [&str; 8] = ["walks", "runs", "goes", "moves", "comes", "jogs", "hurries", "wanders"];
// The first clause and later ones draw on disjoint directions and places, so
// a trigram model cannot end a run-on after its first clause.
const RUN_DIRS: [&str; 2] = ["over", "back"];
const RUN_LATER_DIRS: [&str; 2] = ["out", "up"];
const RUN_PLACES: [&str; 5] = ["door", "window", "car", "corner", "bench"];
const RUN_LATER_PLACES: [&str; 5] = ["fence", "gate", "stairs", "counter", "shed"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub contexts: usize,
    /// Share of found endings carrying a marker word.
    pub marker_rate: f64,
    /// Background sentences in the short-fragment style.
    pub background_short: usize,
    /// Background sentences in the run-on style.
    pub background_runon: usize,
    /// Background sentences in the found style with one extra tail.
    pub background_long: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self { contexts: 500, marker_rate: 0.4, background_short: 7000, background_runon: 1600, background_long: 1000, seed: 0 }
    }
}

fn scene(r: &mut rng::Rng) -> (String, &'static str) {
    let (subj, pron) = *SUBJECTS.choose(r).expect("non-empty");
    let act = SCENE_ACTS.choose(r).expect("non-empty");
    let place = SCENE_PLACES.choose(r).expect("non-empty");
    let be = if pron == "they" { "are" } else { "is" };
    (format!("{subj} {be} {act} in the {place} ."), pron)
}

/// A found ending; the flag says whether it carries a marker.
pub fn true_ending(r: &mut rng::Rng, marker_rate: f64) -> (String, bool) {
    found_style(r, marker_rate, 1)
}

fn found_style(r: &mut rng::Rng, marker_rate: f64, tails: usize) -> (String, bool) {
    let verb = TRUE_VERBS.choose(r).expect("non-empty");
    let obj = TRUE_OBJECTS.choose(r).expect("non-empty");
    let path = TRUE_PATHS.choose(r).expect("non-empty");
    let tails: Vec<&str> = TRUE_TAILS.choose_multiple(r, tails).copied().collect();
    let marked = r.random::<f64>() < marker_rate;
    let mut v = format!("{verb} the {obj} {path}");
    if marked {
        v.push(' ');
        v.push_str(MARKERS.choose(r).expect("non-empty"));
    }
    v.push_str(&format!(" {} .", tails.join(" ")));
    (v, marked)
}

fn short_ending(r: &mut rng::Rng) -> String {
    let verb = SHORT_VERBS.choose(r).expect("non-empty");
    if r.random::<f64>() < 0.25 {
        format!("{verb} .")
    } else {
        format!("{verb} {} .", SHORT_PARTICLES.choose(r).expect("non-empty"))
    }
}

fn runon_ending(r: &mut rng::Rng) -> String {
    let clauses = if r.random::<f64>() < 0.7 { 2 } else { 3 };
    let parts: Vec<String> = (0..clauses)
        .map(|c| {
            let (dirs, prep, places) =
                if c == 0 { (&RUN_DIRS, "to", &RUN_PLACES) } else { (&RUN_LATER_DIRS, "past", &RUN_LATER_PLACES) };
            format!(
                "{} {} {prep} the {}",
                RUN_VERBS.choose(r).expect("non-empty"),
                dirs.choose(r).expect("non-empty"),
                places.choose(r).expect("non-empty")
            )
        })
        .collect();
    format!("{} .", parts.join(" and then "))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Synth {
    pub records: Vec<RawRecord>,
    /// Background sentences for the LM, one per line.
    pub background: Vec<String>,
}

pub fn generate(cfg: &SynthConfig) -> Synth {
    let mut r = rng::stream(cfg.seed, "synth", "records");
    let records = (0..cfg.contexts)
        .map(|i| {
            let (s, n) = scene(&mut r);
            let (v, _) = true_ending(&mut r, cfg.marker_rate);
            RawRecord {
                id: format!("syn-{i:04}"),
                sent1: s,
                sent2: format!("{n} {v}"),
                gap_seconds: Some(r.random_range(0.0..20.0)),
                n: Some(n.to_string()),
                v: Some(v),
                source: Some("synthetic".into()),
            }
        })
        .collect();
    let mut r = rng::stream(cfg.seed, "synth", "background");
    let total = cfg.background_short + cfg.background_runon + cfg.background_long;
    let mut background = Vec::with_capacity(total);
    for i in 0..total {
        let (s, n) = scene(&mut r);
        let v = if i < cfg.background_short {
            short_ending(&mut r)
        } else if i < cfg.background_short + cfg.background_runon {
            runon_ending(&mut r)
        } else {
            found_style(&mut r, cfg.marker_rate, 2).0
        };
        background.push(format!("{s} {n} {v}"));
    }
    Synth { records, background }
}

/// Writes `corpus.jsonl` and `background.txt` into `dir`.
pub fn write(dir: &Path, cfg: &SynthConfig) -> Result<(PathBuf, PathBuf)> {
    let s = generate(cfg);
    let corpus = dir.join("corpus.jsonl");
    let background = dir.join("background.txt");
    io::write_jsonl(&corpus, &s.records)?;
    io::write_text(&background, &(s.background.join("\n") + "\n"))?;
    Ok((corpus, background))
}
