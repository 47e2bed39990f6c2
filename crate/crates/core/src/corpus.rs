//! Caption-pair ingestion, phrase splitting, filtering and fold assignment.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng;

/// One line of the input corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawRecord {
    pub id: String,
    pub sent1: String,
    pub sent2: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gap_seconds: Option<f64>,
    /// Pre-split noun-phrase stub; when present together with `v` the
    /// lexicon splitter is bypassed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub v: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionPair {
    pub id: String,
    pub first_sentence: Vec<String>,
    pub second_sentence: Vec<String>,
    pub start_gap_seconds: Option<f64>,
    pub source: String,
    /// `(n, v)` supplied by the record itself.
    pub presplit: Option<(Vec<String>, Vec<String>)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    Gap,
    RareToken,
    TooShort,
    NoVerb,
    Malformed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reject {
    pub id: String,
    pub reason: RejectReason,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

/// A pair that survived filtering, split into `(s, n, v)` but not yet
/// assigned to a fold.
#[derive(Debug, Clone, PartialEq)]
pub struct KeptPair {
    pub id: String,
    pub s: Vec<String>,
    pub n: Vec<String>,
    pub v: Vec<String>,
}

/// A context `(s, n)` together with its found ending and fold.
///
/// Serialized exactly as one row of `contexts.jsonl`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Context {
    pub context_id: String,
    pub s: Vec<String>,
    pub n: Vec<String>,
    pub v_found: Vec<String>,
    pub fold: u32,
}

impl Context {
    /// `s ‖ n`, the text an ending continues.
    pub fn prefix(&self) -> Vec<String> {
        let mut out = self.s.clone();
        out.extend(self.n.iter().cloned());
        out
    }

    /// `n ‖ v` for an arbitrary ending.
    pub fn second_sentence(&self, v: &[String]) -> Vec<String> {
        let mut out = self.n.clone();
        out.extend(v.iter().cloned());
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("no verb-lexicon token in sentence")]
pub struct NoVerbPhrase;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CorpusError {
    #[error("n_folds must be at least 2, got {0}")]
    TooFewFolds(usize),
    #[error("cannot split {contexts} contexts into {n_folds} folds")]
    MoreFoldsThanContexts { n_folds: usize, contexts: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterConfig {
    /// Pairs whose captions start more than this many seconds apart are dropped.
    pub max_gap_seconds: f64,
    /// Second sentences containing a token seen at most this often are dropped.
    pub min_count: u64,
    /// Second sentences with at most this many tokens are dropped.
    pub min_len: usize,
    /// Permit an empty noun-phrase stub when the sentence starts with a verb.
    pub allow_initial_verb: bool,
    pub max_ending_len: usize,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            max_gap_seconds: 25.0,
            min_count: 3,
            min_len: 5,
            allow_initial_verb: true,
            max_ending_len: crate::MAX_ENDING_LEN,
        }
    }
}

/// Lowercases, splits on whitespace and detaches leading/trailing punctuation
/// into separate tokens.
///
/// Apostrophes inside a word (`someone's`) stay attached.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for word in text.split_whitespace() {
        let chars: Vec<char> = word.chars().collect();
        let mut start = 0;
        let mut end = chars.len();
        while start < end && is_punct(chars[start]) {
            out.push(lower(&chars[start..start + 1]));
            start += 1;
        }
        let mut trailing = Vec::new();
        while end > start && is_punct(chars[end - 1]) {
            trailing.push(lower(&chars[end - 1..end]));
            end -= 1;
        }
        if start < end {
            out.push(lower(&chars[start..end]));
        }
        out.extend(trailing.into_iter().rev());
    }
    out
}

fn is_punct(c: char) -> bool {
    matches!(c, '.' | ',' | '!' | '?' | ';' | ':' | '"' | '(' | ')' | '[' | ']')
}

fn lower(chars: &[char]) -> String {
    chars.iter().flat_map(|c| c.to_lowercase()).collect()
}

/// Result of [`ingest_pairs`]: kept pairs in input order plus a rejects report.
#[derive(Debug, Default, Clone, PartialEq)]
pub struct Ingested {
    pub pairs: Vec<CaptionPair>,
    pub rejects: Vec<Reject>,
}

/// Tokenizes records and applies the caption-gap rule.
///
/// Each item is either a parsed record or a parse error message for one input
/// line (`Err((id_or_line_label, message))`); errors go to the rejects report
/// and never abort the stream.
pub fn ingest_pairs<I>(records: I, max_gap_seconds: f64) -> Ingested
where
    I: IntoIterator<Item = Result<RawRecord, (String, String)>>,
{
    let mut out = Ingested::default();
    for rec in records {
        let rec = match rec {
            Ok(r) => r,
            Err((id, msg)) => {
                out.rejects.push(Reject { id, reason: RejectReason::Malformed, detail: Some(msg) });
                continue;
            }
        };
        match ingest_one(rec, max_gap_seconds) {
            Ok(pair) => out.pairs.push(pair),
            Err(rej) => out.rejects.push(rej),
        }
    }
    out
}

fn ingest_one(rec: RawRecord, max_gap_seconds: f64) -> Result<CaptionPair, Reject> {
    let malformed = |detail: &str| Reject {
        id: rec.id.clone(),
        reason: RejectReason::Malformed,
        detail: Some(detail.to_string()),
    };
    if let Some(gap) = rec.gap_seconds {
        if !gap.is_finite() || gap < 0.0 {
            return Err(malformed("gap_seconds must be a nonnegative number"));
        }
        if gap > max_gap_seconds {
            return Err(Reject { id: rec.id, reason: RejectReason::Gap, detail: None });
        }
    }
    let first = tokenize(&rec.sent1);
    if first.is_empty() {
        return Err(malformed("sent1 is empty"));
    }
    let (second, presplit) = match (&rec.n, &rec.v) {
        (Some(n), Some(v)) => {
            let n = tokenize(n);
            let v = tokenize(v);
            let mut joined = n.clone();
            joined.extend(v.iter().cloned());
            (joined, Some((n, v)))
        }
        (None, None) => (tokenize(&rec.sent2), None),
        _ => return Err(malformed("n and v must be given together")),
    };
    if second.is_empty() {
        return Err(malformed("sent2 is empty"));
    }
    Ok(CaptionPair {
        id: rec.id,
        first_sentence: first,
        second_sentence: second,
        start_gap_seconds: rec.gap_seconds,
        source: rec.source.unwrap_or_default(),
        presplit,
    })
}

/// Splits at the first token found in `verb_lexicon`: `n` is everything
/// before it, `v` is the rest.
pub fn split_second_sentence(
    sentence: &[String],
    verb_lexicon: &BTreeSet<String>,
) -> Result<(Vec<String>, Vec<String>), NoVerbPhrase> {
    let at = sentence
        .iter()
        .position(|t| verb_lexicon.contains(t))
        .ok_or(NoVerbPhrase)?;
    Ok((sentence[..at].to_vec(), sentence[at..].to_vec()))
}

/// Token counts over both sentences of every ingested pair.
pub fn count_vocab(pairs: &[CaptionPair]) -> BTreeMap<String, u64> {
    let mut counts = BTreeMap::new();
    for p in pairs {
        for t in p.first_sentence.iter().chain(&p.second_sentence) {
            *counts.entry(t.clone()).or_insert(0) += 1;
        }
    }
    counts
}

/// Applies the length, rare-token and verb-phrase rules, returning the split
/// pair or the first failing reason (checked in that order).
pub fn filter_split(
    pair: &CaptionPair,
    vocab_counts: &BTreeMap<String, u64>,
    cfg: &FilterConfig,
    verb_lexicon: &BTreeSet<String>,
) -> Result<KeptPair, RejectReason> {
    let second = &pair.second_sentence;
    if second.len() <= cfg.min_len {
        return Err(RejectReason::TooShort);
    }
    if second
        .iter()
        .any(|t| vocab_counts.get(t).copied().unwrap_or(0) <= cfg.min_count)
    {
        return Err(RejectReason::RareToken);
    }
    let (n, v) = match &pair.presplit {
        Some((n, v)) => (n.clone(), v.clone()),
        None => split_second_sentence(second, verb_lexicon).map_err(|_| RejectReason::NoVerb)?,
    };
    if v.is_empty() || (n.is_empty() && !cfg.allow_initial_verb) {
        return Err(RejectReason::NoVerb);
    }
    if v.len() > cfg.max_ending_len {
        return Err(RejectReason::Malformed);
    }
    Ok(KeptPair { id: pair.id.clone(), s: pair.first_sentence.clone(), n, v })
}

/// `true` iff the pair passes every filter rule.
pub fn filter_pair(
    pair: &CaptionPair,
    vocab_counts: &BTreeMap<String, u64>,
    cfg: &FilterConfig,
    verb_lexicon: &BTreeSet<String>,
) -> bool {
    filter_split(pair, vocab_counts, cfg, verb_lexicon).is_ok()
}

/// Runs the count-then-filter pass over ingested pairs.
pub fn filter_corpus(
    pairs: &[CaptionPair],
    cfg: &FilterConfig,
    verb_lexicon: &BTreeSet<String>,
) -> (Vec<KeptPair>, Vec<Reject>) {
    let counts = count_vocab(pairs);
    let mut kept = Vec::new();
    let mut rejects = Vec::new();
    for p in pairs {
        match filter_split(p, &counts, cfg, verb_lexicon) {
            Ok(k) => kept.push(k),
            Err(reason) => rejects.push(Reject {
                id: p.id.clone(),
                reason,
                detail: (reason == RejectReason::Malformed)
                    .then(|| "verb phrase longer than max_ending_len".to_string()),
            }),
        }
    }
    (kept, rejects)
}

/// Seeded balanced partition into `n_folds` folds; output keeps input order.
pub fn fold_assign(kept: Vec<KeptPair>, n_folds: usize, seed: u64) -> Result<Vec<Context>, CorpusError> {
    if n_folds < 2 {
        return Err(CorpusError::TooFewFolds(n_folds));
    }
    if n_folds > kept.len() {
        return Err(CorpusError::MoreFoldsThanContexts { n_folds, contexts: kept.len() });
    }
    let mut order: Vec<usize> = (0..kept.len()).collect();
    order.shuffle(&mut rng::stream(seed, "folds", ""));
    let mut fold_of = alloc::vec![0u32; kept.len()];
    for (rank, &idx) in order.iter().enumerate() {
        fold_of[idx] = (rank % n_folds) as u32;
    }
    Ok(kept
        .into_iter()
        .zip(fold_of)
        .map(|(k, fold)| Context { context_id: k.id, s: k.s, n: k.n, v_found: k.v, fold })
        .collect())
}

/// A small lexicon of common third-person verb forms found in video captions.
pub fn default_verb_lexicon() -> BTreeSet<String> {
    const VERBS: &[&str] = &[
        "is", "are", "was", "were", "has", "have", "begins", "continues", "starts", "stops",
        "walks", "runs", "jumps", "sits", "stands", "looks", "smiles", "talks", "speaks",
        "plays", "holds", "puts", "takes", "gives", "gets", "turns", "moves", "opens",
        "closes", "picks", "throws", "catches", "hits", "kicks", "rides", "drives", "pulls",
        "pushes", "lifts", "drops", "climbs", "falls", "dances", "sings", "cuts", "washes",
        "cleans", "pours", "mixes", "adds", "places", "shows", "watches", "waves", "nods",
        "shakes", "grabs", "leans", "lies", "rolls", "spins", "swims", "dives", "paints",
        "writes", "reads", "eats", "drinks", "cooks", "brushes", "combs", "wipes", "rubs",
        "hands", "leaves", "enters", "comes", "goes", "returns", "follows", "stares",
        "glances", "kneels", "bends", "reaches", "touches", "kisses", "hugs", "laughs",
        "cries", "screams", "shouts", "points", "lays", "sets", "uses", "makes", "does",
        "demonstrates", "explains", "performs", "finishes", "completes", "tries", "helps",
        "wraps", "ties", "folds", "hangs", "sweeps", "mops", "plants", "digs", "serves",
        "swings", "flips", "lands", "slides", "skates", "surfs", "paddles", "rows", "bounces",
        "dribbles", "shoots", "scores", "blows", "dries", "sprays", "spreads", "rinses",
        "stirs", "chops", "slices", "peels", "presses", "steps", "hops", "crawls", "marches",
    ];
    VERBS.iter().map(|s| s.to_string()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    fn lexicon(words: &[&str]) -> BTreeSet<String> {
        words.iter().map(|w| w.to_string()).collect()
    }

    fn record(id: &str, gap: Option<f64>) -> RawRecord {
        RawRecord {
            id: id.into(),
            sent1: "A man runs.".into(),
            sent2: "He falls.".into(),
            gap_seconds: gap,
            n: None,
            v: None,
            source: None,
        }
    }

    #[test]
    fn tokenizer_detaches_punctuation_and_lowercases() {
        assert_eq!(tokenize("A man runs."), toks("a man runs ."));
        assert_eq!(tokenize("He falls."), toks("he falls ."));
        assert_eq!(tokenize("  \"Wait,\" someone's DOG barks!"), toks("\" wait , \" someone's dog barks !"));
        assert!(tokenize("   ").is_empty());
    }

    #[test]
    fn gap_rule_drops_only_long_gaps() {
        let out = ingest_pairs(
            vec![Ok(record("a", Some(30.0))), Ok(record("b", None)), Ok(record("c", Some(25.0)))],
            25.0,
        );
        let ids: Vec<_> = out.pairs.iter().map(|p| p.id.as_str()).collect();
        assert_eq!(ids, ["b", "c"]);
        assert_eq!(out.rejects.len(), 1);
        assert_eq!(out.rejects[0].reason, RejectReason::Gap);
        assert_eq!(out.pairs[0].first_sentence, toks("a man runs ."));
        assert_eq!(out.pairs[0].second_sentence, toks("he falls ."));
    }

    #[test]
    fn malformed_records_are_reported_not_fatal() {
        let mut bad = record("x", None);
        bad.sent2 = "   ".into();
        let mut half = record("y", None);
        half.n = Some("he".into());
        let out = ingest_pairs(
            vec![Err(("line 1".into(), "expected value".into())), Ok(bad), Ok(half), Ok(record("z", None))],
            25.0,
        );
        assert_eq!(out.pairs.len(), 1);
        assert_eq!(out.rejects.len(), 3);
        assert!(out.rejects.iter().all(|r| r.reason == RejectReason::Malformed));
    }

    #[test]
    fn splitter_follows_first_verb_rule() {
        let lex = lexicon(&["runs"]);
        assert_eq!(
            split_second_sentence(&toks("the dog runs away"), &lex),
            Ok((toks("the dog"), toks("runs away")))
        );
        assert_eq!(split_second_sentence(&toks("runs away"), &lex), Ok((vec![], toks("runs away"))));
        assert_eq!(split_second_sentence(&toks("the big dog"), &lex), Err(NoVerbPhrase));
    }

    fn pair(second: &str) -> CaptionPair {
        CaptionPair {
            id: "p".into(),
            first_sentence: toks("a man stands ."),
            second_sentence: toks(second),
            start_gap_seconds: None,
            source: String::new(),
            presplit: None,
        }
    }

    #[test]
    fn filter_boundaries() {
        let lex = lexicon(&["runs"]);
        let cfg = FilterConfig::default();
        let mut counts: BTreeMap<String, u64> = BTreeMap::new();
        for t in ["the", "dog", "runs", "to", "a", "ball", "big", "."] {
            counts.insert(t.into(), 4);
        }
        // length 5 is "short"
        assert_eq!(
            filter_split(&pair("the dog runs to ."), &counts, &cfg, &lex),
            Err(RejectReason::TooShort)
        );
        // length 6, all counts >= 4
        assert!(filter_pair(&pair("the dog runs to a ."), &counts, &cfg, &lex));
        counts.insert("ball".into(), 3);
        assert_eq!(
            filter_split(&pair("the dog runs to a ball"), &counts, &cfg, &lex),
            Err(RejectReason::RareToken)
        );
        assert_eq!(
            filter_split(&pair("the big dog to a ."), &counts, &cfg, &lex),
            Err(RejectReason::NoVerb)
        );
    }

    #[test]
    fn initial_verb_can_be_disallowed() {
        let lex = lexicon(&["runs"]);
        let mut counts = BTreeMap::new();
        for t in ["runs", "to", "a", "big", "dog", "."] {
            counts.insert(String::from(t), 10);
        }
        let p = pair("runs to a big dog .");
        let mut cfg = FilterConfig::default();
        assert!(filter_pair(&p, &counts, &cfg, &lex));
        cfg.allow_initial_verb = false;
        assert!(!filter_pair(&p, &counts, &cfg, &lex));
    }

    fn kept(n: usize) -> Vec<KeptPair> {
        (0..n)
            .map(|i| KeptPair { id: alloc::format!("c{i}"), s: toks("a ."), n: vec![], v: toks("runs .") })
            .collect()
    }

    fn fold_sizes(ctx: &[Context], n_folds: usize) -> Vec<usize> {
        let mut sizes = vec![0; n_folds];
        for c in ctx {
            sizes[c.fold as usize] += 1;
        }
        sizes
    }

    #[test]
    fn folds_are_balanced_and_seeded() {
        let a = fold_assign(kept(10), 5, 3).unwrap();
        assert_eq!(fold_sizes(&a, 5), vec![2; 5]);
        let b = fold_assign(kept(10), 5, 3).unwrap();
        assert_eq!(a, b);
        let mut sizes = fold_sizes(&fold_assign(kept(11), 5, 9).unwrap(), 5);
        sizes.sort_unstable_by(|x, y| y.cmp(x));
        assert_eq!(sizes, vec![3, 2, 2, 2, 2]);
        assert_eq!(
            fold_assign(kept(3), 5, 0),
            Err(CorpusError::MoreFoldsThanContexts { n_folds: 5, contexts: 3 })
        );
        assert_eq!(fold_assign(kept(3), 1, 0), Err(CorpusError::TooFewFolds(1)));
    }

    proptest::proptest! {
        #[test]
        fn split_concatenates_back(words in proptest::collection::vec("[a-e]{1,3}", 1..12)) {
            let lex = lexicon(&["a", "bb", "ccc"]);
            if let Ok((n, v)) = split_second_sentence(&words, &lex) {
                let mut joined = n.clone();
                joined.extend(v.iter().cloned());
                proptest::prop_assert_eq!(joined, words.clone());
                proptest::prop_assert!(lex.contains(&v[0]));
                proptest::prop_assert!(n.iter().all(|t| !lex.contains(t)));
            }
        }

        #[test]
        fn fold_assignment_is_a_balanced_partition(n in 2usize..60, folds in 2usize..8, seed in 0u64..1000) {
            proptest::prop_assume!(folds <= n);
            let ctx = fold_assign(kept(n), folds, seed).unwrap();
            proptest::prop_assert_eq!(ctx.len(), n);
            let sizes = fold_sizes(&ctx, folds);
            let (lo, hi) = (sizes.iter().min().unwrap(), sizes.iter().max().unwrap());
            proptest::prop_assert!(hi - lo <= 1);
        }
    }
}
