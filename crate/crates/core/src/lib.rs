//! Core algorithms for building de-biased multiple-choice datasets by
//! adversarial filtering.
//!
//! The crate is `no_std` (it needs `alloc`) and does no IO. Everything here is
//! a pure function of its inputs and an explicit seed; the `afkit` crate wires
//! these pieces into a file-based pipeline, a CLI and an annotation service.
//!
//! Pipeline, in module order:
//!
//! * [`corpus`]: tokenize caption pairs, split second sentences into a
//!   noun-phrase stub and a verb-phrase ending, filter, assign folds.
//! * [`lm`]: interpolated Kneser-Ney n-gram models trained per held-out fold,
//!   sequence scoring, and ancestral sampling of unique candidate endings.
//! * [`features`]: perplexity/length features and token encodings consumed
//!   by the committee.
//! * [`committee`]: the four-member stylistic ensemble with hand-written
//!   backpropagation.
//! * [`af`]: the split / train / reassign loop over negative assignments.
//! * [`validation`]: annotation tasks, response checks, question assembly,
//!   reannotation and agreement metrics.
//! * [`eval`]: shallow baselines measuring what stylistic signal survives.

#![cfg_attr(not(feature = "parallel"), no_std)]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod af;
pub mod committee;
pub mod corpus;
pub mod eval;
pub mod features;
pub mod lm;
mod math;
pub mod rng;
pub mod validation;

/// Maximum number of tokens in a verb-phrase ending, found or generated.
pub const MAX_ENDING_LEN: usize = 25;
