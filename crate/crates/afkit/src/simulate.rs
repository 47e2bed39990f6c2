//! Scripted annotators that answer tasks without a browser, for end-to-end
//! runs and tests.
//!
//! A simulated annotator labels a generated ending gibberish when it looks
//! broken (no closing punctuation, too short, a word repeated back to back),
//! otherwise likely or unlikely by a seeded coin. The found ending is likely.
//! Labels are then flipped with a small noise rate. Picks place the found
//! ending first or second at configured rates, else both picks go to
//! generations.

use afkit_core::rng;
use afkit_core::validation::{AnnotationResponse, AnnotationTask, Label};
use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    /// Annotators in the initial pool; replacements join when every current
    /// one is dequalified or has already answered a task.
    pub annotators: usize,
    pub p_found_best: f64,
    pub p_found_second: f64,
    /// Chance a well-formed generation is labeled likely.
    pub p_generated_likely: f64,
    /// Chance any label is replaced by a uniformly drawn other label.
    pub p_label_noise: f64,
    /// Generations shorter than this are gibberish.
    pub min_tokens: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            annotators: 3,
            p_found_best: 0.6,
            p_found_second: 0.15,
            p_generated_likely: 0.3,
            p_label_noise: 0.05,
            min_tokens: 3,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), String> {
        let p = [self.p_found_best, self.p_found_second, self.p_generated_likely, self.p_label_noise];
        if p.iter().any(|x| !(0.0..=1.0).contains(x)) || self.p_found_best + self.p_found_second > 1.0 {
            return Err("validation.simulate: probabilities must lie in [0, 1] and found picks sum to at most 1".into());
        }
        if self.annotators < 2 {
            return Err("validation.simulate: at least two annotators are needed for audits".into());
        }
        Ok(())
    }
}

/// Whether a token sequence reads as a broken sentence.
pub fn looks_broken(tokens: &[String], min_tokens: usize) -> bool {
    let closed = tokens.last().is_some_and(|t| matches!(t.as_str(), "." | "!" | "?"));
    !closed || tokens.len() < min_tokens || tokens.windows(2).any(|w| w[0] == w[1])
}

const LABELS: [Label; 3] = [Label::Likely, Label::Unlikely, Label::Gibberish];

/// One annotator's answer to `task`; deterministic in `(seed, task, annotator)`.
pub fn respond(task: &AnnotationTask, annotator: &str, cfg: &SimConfig, seed: u64, timestamp: u64) -> AnnotationResponse {
    let mut r = rng::stream(seed, "simulate", &format!("{}/{}", task.task_id, annotator));
    let found = task.found_id() as usize;
    let mut labels: Vec<Label> = task
        .endings
        .iter()
        .enumerate()
        .map(|(i, e)| {
            if i == found {
                Label::Likely
            } else if looks_broken(&e.tokens, cfg.min_tokens) {
                Label::Gibberish
            } else if r.random::<f64>() < cfg.p_generated_likely {
                Label::Likely
            } else {
                Label::Unlikely
            }
        })
        .collect();
    for l in labels.iter_mut() {
        if r.random::<f64>() < cfg.p_label_noise {
            let others: Vec<Label> = LABELS.iter().copied().filter(|x| x != l).collect();
            *l = *others.choose(&mut r).expect("two other labels");
        }
    }

    // Generations an annotator would rank above the rest: likely first.
    let generated: Vec<usize> = (0..labels.len()).filter(|&i| i != found).collect();
    let pick_generated = |r: &mut afkit_core::rng::Rng, labels: &[Label], exclude: Option<usize>| -> usize {
        let pool = |want: Label| -> Vec<usize> {
            generated.iter().copied().filter(|&i| labels[i] == want && Some(i) != exclude).collect()
        };
        let likely = pool(Label::Likely);
        let unlikely = pool(Label::Unlikely);
        let any: Vec<usize> = generated.iter().copied().filter(|&i| Some(i) != exclude).collect();
        *[likely, unlikely, any].iter().find(|v| !v.is_empty()).and_then(|v| v.choose(r)).expect("five generations")
    };
    let u = r.random::<f64>();
    let (best, second) = if u < cfg.p_found_best {
        (found, pick_generated(&mut r, &labels, None))
    } else if u < cfg.p_found_best + cfg.p_found_second {
        (pick_generated(&mut r, &labels, None), found)
    } else {
        let b = pick_generated(&mut r, &labels, None);
        (b, pick_generated(&mut r, &labels, Some(b)))
    };
    for p in [best, second] {
        if labels[p] == Label::Gibberish {
            labels[p] = Label::Unlikely;
        }
    }
    AnnotationResponse {
        task_id: task.task_id.clone(),
        annotator_id: annotator.to_string(),
        labels,
        best: best as u32,
        second_best: second as u32,
        timestamp,
    }
}
