//! The stylistic committee used as the adversary during filtering.
//!
//! Four members each map a candidate to a fixed-size representation:
//!
//! * `mlp`: one tanh layer over the standardized perplexity/length features;
//! * `bow`: the mean word embedding of the second sentence;
//! * `cnn`: one convolution layer (widths 2–5 by default) over the second
//!   sentence's embeddings, tanh, max-pooled over time;
//! * `lstm`: a bidirectional LSTM over the common-word encoding, final states
//!   of both directions concatenated.
//!
//! Representations are concatenated (inactive members contribute zeros) and a
//! one-hidden-layer MLP head produces a scalar logit. Training minimizes the
//! cross-entropy of the positive among each instance's candidates.
//!
//! All weights live in one flat `Vec<f64>`; [`Layout`] names the slices.
//! Gradients are written by hand for every member.

use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{PplFeatures, Standardizer, N_PPL};
use crate::math::{log_sum_exp, sigmoid, softmax};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CommitteeError {
    #[error("invalid committee config: {0}")]
    Config(&'static str),
    #[error("shape mismatch: {0}")]
    Shape(&'static str),
    #[error("non-finite loss {loss} at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize, loss: f64 },
    #[error("instance {0} has fewer than two candidates")]
    DegenerateInstance(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Member {
    Mlp,
    Bow,
    Cnn,
    Lstm,
}

/// Set of active committee members.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<Member>", into = "Vec<Member>")]
pub struct Members {
    pub mlp: bool,
    pub bow: bool,
    pub cnn: bool,
    pub lstm: bool,
}

impl Members {
    pub const ALL: Members = Members { mlp: true, bow: true, cnn: true, lstm: true };
    pub const MLP_ONLY: Members = Members { mlp: true, bow: false, cnn: false, lstm: false };

    pub fn only(m: Member) -> Members {
        Members::from(vec![m])
    }

    pub fn contains(&self, m: Member) -> bool {
        match m {
            Member::Mlp => self.mlp,
            Member::Bow => self.bow,
            Member::Cnn => self.cnn,
            Member::Lstm => self.lstm,
        }
    }

    pub fn is_empty(&self) -> bool {
        !(self.mlp || self.bow || self.cnn || self.lstm)
    }

    pub fn list(&self) -> Vec<Member> {
        [Member::Mlp, Member::Bow, Member::Cnn, Member::Lstm]
            .into_iter()
            .filter(|&m| self.contains(m))
            .collect()
    }
}

impl From<Vec<Member>> for Members {
    fn from(v: Vec<Member>) -> Self {
        let mut out = Members { mlp: false, bow: false, cnn: false, lstm: false };
        for m in v {
            match m {
                Member::Mlp => out.mlp = true,
                Member::Bow => out.bow = true,
                Member::Cnn => out.cnn = true,
                Member::Lstm => out.lstm = true,
            }
        }
        out
    }
}

impl From<Members> for Vec<Member> {
    fn from(m: Members) -> Self {
        m.list()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CommitteeConfig {
    pub embed_dim: usize,
    pub mlp_hidden: usize,
    pub cnn_filters_per_width: usize,
    pub cnn_widths: Vec<usize>,
    pub lstm_hidden: usize,
    pub ensemble_hidden: usize,
    pub active_members: Members,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub optimizer: Optimizer,
    /// Global gradient-norm clip.
    pub clip_norm: f64,
    /// LSTM inputs are truncated to this many tokens.
    pub max_seq_len: usize,
    /// Vocabulary size of the LSTM's common-word encoding (before pseudo-tags).
    pub common_top_k: usize,
    pub seed: u64,
}

impl Default for CommitteeConfig {
    fn default() -> Self {
        Self {
            embed_dim: 64,
            mlp_hidden: 32,
            cnn_filters_per_width: 16,
            cnn_widths: vec![2, 3, 4, 5],
            lstm_hidden: 32,
            ensemble_hidden: 64,
            active_members: Members::ALL,
            epochs: 3,
            learning_rate: 1e-3,
            batch_size: 16,
            optimizer: Optimizer::Adam,
            clip_norm: 1.0,
            max_seq_len: crate::MAX_ENDING_LEN,
            common_top_k: 100,
            seed: 0,
        }
    }
}

impl CommitteeConfig {
    pub fn validate(&self) -> Result<(), CommitteeError> {
        if self.active_members.is_empty() {
            return Err(CommitteeError::Config("active_members is empty"));
        }
        if self.embed_dim == 0
            || self.mlp_hidden == 0
            || self.cnn_filters_per_width == 0
            || self.lstm_hidden == 0
            || self.ensemble_hidden == 0
            || self.batch_size == 0
            || self.max_seq_len == 0
        {
            return Err(CommitteeError::Config("all dimensions must be positive"));
        }
        if self.cnn_widths.is_empty() || self.cnn_widths.contains(&0) {
            return Err(CommitteeError::Config("cnn_widths must be non-empty and positive"));
        }
        if [self.learning_rate, self.clip_norm].iter().any(|x| x.is_nan() || *x <= 0.0) {
            return Err(CommitteeError::Config("learning_rate and clip_norm must be positive"));
        }
        Ok(())
    }

    pub fn representation_sizes(&self) -> [usize; 4] {
        [
            self.mlp_hidden,
            self.embed_dim,
            self.cnn_widths.len() * self.cnn_filters_per_width,
            2 * self.lstm_hidden,
        ]
    }
}

/// Sizes of the two token id spaces the members read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputDims {
    /// Word vocabulary (bag-of-embeddings and CNN).
    pub vocab: usize,
    /// Common-word/pseudo-tag ids (LSTM).
    pub common: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct LstmSlots {
    w: Range<usize>,
    u: Range<usize>,
    b: Range<usize>,
}

/// Offsets of every tensor inside the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    mlp_w: Range<usize>,
    mlp_b: Range<usize>,
    bow_emb: Range<usize>,
    cnn_emb: Range<usize>,
    cnn_w: Vec<Range<usize>>,
    cnn_b: Vec<Range<usize>>,
    lstm_emb: Range<usize>,
    lstm_f: LstmSlots,
    lstm_b: LstmSlots,
    head_w: Range<usize>,
    head_b: Range<usize>,
    out_w: Range<usize>,
    out_b: Range<usize>,
    total: usize,
    rep: [usize; 4],
}

impl Layout {
    pub fn new(cfg: &CommitteeConfig, dims: &InputDims) -> Self {
        let mut at = 0;
        let mut take = |n: usize| {
            let r = at..at + n;
            at += n;
            r
        };
        let e = cfg.embed_dim;
        let h = cfg.lstm_hidden;
        let f = cfg.cnn_filters_per_width;
        let rep = cfg.representation_sizes();
        let r_total: usize = rep.iter().sum();
        let mlp_w = take(cfg.mlp_hidden * N_PPL);
        let mlp_b = take(cfg.mlp_hidden);
        let cnn_w: Vec<_> = cfg.cnn_widths.iter().map(|&w| take(f * w * e)).collect();
        let cnn_b: Vec<_> = cfg.cnn_widths.iter().map(|_| take(f)).collect();
        let mut lstm = || LstmSlots { w: take(4 * h * e), u: take(4 * h * h), b: take(4 * h) };
        let lstm_f = lstm();
        let lstm_b = lstm();
        let head_w = take(cfg.ensemble_hidden * r_total);
        let head_b = take(cfg.ensemble_hidden);
        let out_w = take(cfg.ensemble_hidden);
        let out_b = take(1);
        // Embedding tables last: their rows are touched sparsely.
        let bow_emb = take(dims.vocab * e);
        let cnn_emb = take(dims.vocab * e);
        let lstm_emb = take(dims.common * e);
        Self {
            mlp_w,
            mlp_b,
            bow_emb,
            cnn_emb,
            cnn_w,
            cnn_b,
            lstm_emb,
            lstm_f,
            lstm_b,
            head_w,
            head_b,
            out_w,
            out_b,
            total: at,
            rep,
        }
    }

    pub fn total(&self) -> usize {
        self.total
    }

    /// Parameter ranges owned by one member.
    pub fn member_ranges(&self, m: Member) -> Vec<Range<usize>> {
        match m {
            Member::Mlp => vec![self.mlp_w.clone(), self.mlp_b.clone()],
            Member::Bow => vec![self.bow_emb.clone()],
            Member::Cnn => {
                let mut v = vec![self.cnn_emb.clone()];
                v.extend(self.cnn_w.iter().cloned());
                v.extend(self.cnn_b.iter().cloned());
                v
            }
            Member::Lstm => vec![
                self.lstm_emb.clone(),
                self.lstm_f.w.clone(),
                self.lstm_f.u.clone(),
                self.lstm_f.b.clone(),
                self.lstm_b.w.clone(),
                self.lstm_b.u.clone(),
                self.lstm_b.b.clone(),
            ],
        }
    }

    /// Ensemble head ranges.
    pub fn head_ranges(&self) -> Vec<Range<usize>> {
        vec![self.head_w.clone(), self.head_b.clone(), self.out_w.clone(), self.out_b.clone()]
    }

    pub fn bow_row(&self, id: usize, dim: usize) -> Range<usize> {
        let s = self.bow_emb.start + id * dim;
        s..s + dim
    }

    pub fn cnn_row(&self, id: usize, dim: usize) -> Range<usize> {
        let s = self.cnn_emb.start + id * dim;
        s..s + dim
    }

    pub fn lstm_row(&self, id: usize, dim: usize) -> Range<usize> {
        let s = self.lstm_emb.start + id * dim;
        s..s + dim
    }
}

/// One candidate as seen by the committee.
#[derive(Debug, Clone, Copy)]
pub struct CandidateInput<'a> {
    /// Raw (unstandardized) perplexity/length features.
    pub ppl: &'a PplFeatures,
    /// Word ids of `n ‖ v`.
    pub word_ids: &'a [u32],
    /// Common-word encoding of `n ‖ v`.
    pub common_ids: &'a [u32],
}

/// The positive candidate first, then its negatives.
#[derive(Debug, Clone)]
pub struct TrainInstance<'a> {
    pub candidates: Vec<CandidateInput<'a>>,
}

/// All trainable parameters plus the feature standardization they were
/// trained with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "ParamsRepr", try_from = "ParamsRepr")]
pub struct Params {
    pub config: CommitteeConfig,
    pub dims: InputDims,
    pub standardizer: Standardizer,
    pub data: Vec<f64>,
    layout: Layout,
}

/// Checkpoint form of [`Params`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamsRepr {
    pub format_version: u32,
    pub config: CommitteeConfig,
    pub dims: InputDims,
    pub standardizer: Standardizer,
    pub data: Vec<f64>,
}

const PARAMS_FORMAT: u32 = 1;

impl From<Params> for ParamsRepr {
    fn from(p: Params) -> Self {
        Self { format_version: PARAMS_FORMAT, config: p.config, dims: p.dims, standardizer: p.standardizer, data: p.data }
    }
}

impl TryFrom<ParamsRepr> for Params {
    type Error = CommitteeError;

    fn try_from(r: ParamsRepr) -> Result<Self, CommitteeError> {
        if r.format_version != PARAMS_FORMAT {
            return Err(CommitteeError::Shape("unsupported checkpoint version"));
        }
        r.config.validate()?;
        let layout = Layout::new(&r.config, &r.dims);
        if layout.total != r.data.len() {
            return Err(CommitteeError::Shape("parameter count does not match config"));
        }
        if r.data.iter().any(|x| !x.is_finite()) {
            return Err(CommitteeError::Shape("non-finite parameter"));
        }
        Ok(Self { config: r.config, dims: r.dims, standardizer: r.standardizer, data: r.data, layout })
    }
}

/// Fresh parameters: scaled-normal weights (1/√fan-in; embeddings 0.3),
/// zero biases. Deterministic in `seed`.
pub fn init_params(config: &CommitteeConfig, dims: InputDims, seed: u64) -> Result<Params, CommitteeError> {
    config.validate()?;
    if dims.vocab == 0 || dims.common == 0 {
        return Err(CommitteeError::Shape("empty input vocabulary"));
    }
    let layout = Layout::new(config, &dims);
    let mut data = vec![0.0; layout.total];
    let mut rng = rng::stream_n(seed, "committee-init", 0);
    let mut fill = |r: &Range<usize>, scale: f64, data: &mut [f64]| {
        for x in &mut data[r.clone()] {
            let z: f64 = StandardNormal.sample(&mut rng);
            *x = z * scale;
        }
    };
    let inv_sqrt = |n: usize| 1.0 / libm::sqrt(n as f64);
    let e = config.embed_dim;
    let h = config.lstm_hidden;
    fill(&layout.mlp_w, inv_sqrt(N_PPL), &mut data);
    for (r, &w) in layout.cnn_w.iter().zip(&config.cnn_widths) {
        fill(r, inv_sqrt(w * e), &mut data);
    }
    for slots in [&layout.lstm_f, &layout.lstm_b] {
        fill(&slots.w, inv_sqrt(e), &mut data);
        fill(&slots.u, inv_sqrt(h), &mut data);
    }
    fill(&layout.head_w, inv_sqrt(layout.rep.iter().sum()), &mut data);
    fill(&layout.out_w, inv_sqrt(config.ensemble_hidden), &mut data);
    fill(&layout.bow_emb, 0.3, &mut data);
    fill(&layout.cnn_emb, 0.3, &mut data);
    fill(&layout.lstm_emb, 0.3, &mut data);
    Ok(Params { config: config.clone(), dims, standardizer: Standardizer::default(), data, layout })
}

struct MlpCache {
    x: PplFeatures,
    h: Vec<f64>,
}

struct LstmStep {
    id: usize,
    gates: Vec<f64>, // i, f, g, o (activated), 4H
    c: Vec<f64>,
    tanh_c: Vec<f64>,
}

struct LstmCache {
    steps: Vec<LstmStep>,
}

struct Cache<'a> {
    input: CandidateInput<'a>,
    r: Vec<f64>,
    hh: Vec<f64>,
    mlp: Option<MlpCache>,
    /// Per width, per filter: (argmax position, activation).
    cnn: Option<Vec<Vec<(usize, f64)>>>,
    lstm: Option<(LstmCache, LstmCache)>,
}

impl Params {
    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    /// Sets ensemble head weights to zero so every logit equals the output bias.
    pub fn zero_head(&mut self) {
        for r in self.layout.head_ranges() {
            self.data[r].iter_mut().for_each(|x| *x = 0.0);
        }
    }

    fn check(&self, c: &CandidateInput<'_>) -> Result<(), CommitteeError> {
        if c.word_ids.iter().any(|&i| i as usize >= self.dims.vocab) {
            return Err(CommitteeError::Shape("word id outside vocabulary"));
        }
        if c.common_ids.iter().any(|&i| i as usize >= self.dims.common) {
            return Err(CommitteeError::Shape("common-word id outside encoding"));
        }
        if self.config.active_members.bow && c.word_ids.is_empty() {
            return Err(CommitteeError::Shape("empty second sentence"));
        }
        Ok(())
    }

    /// Logit for one candidate; higher means more like a found ending.
    pub fn score(&self, c: &CandidateInput<'_>) -> Result<f64, CommitteeError> {
        self.check(c)?;
        Ok(self.logit(c))
    }

    /// Unchecked forward pass. Callers guarantee ids are in range.
    pub fn logit(&self, c: &CandidateInput<'_>) -> f64 {
        let cache = self.forward(*c);
        self.output(&cache)
    }

    fn output(&self, cache: &Cache<'_>) -> f64 {
        let w = &self.data[self.layout.out_w.clone()];
        crate::math::dot(w, &cache.hh) + self.data[self.layout.out_b.start]
    }

    fn forward<'a>(&self, input: CandidateInput<'a>) -> Cache<'a> {
        let cfg = &self.config;
        let act = cfg.active_members;
        let [r_mlp, r_bow, r_cnn, r_lstm] = self.layout.rep;
        let mut r = vec![0.0; r_mlp + r_bow + r_cnn + r_lstm];
        let e = cfg.embed_dim;

        let mlp = act.mlp.then(|| {
            let x = self.standardizer.apply(input.ppl);
            let w = &self.data[self.layout.mlp_w.clone()];
            let b = &self.data[self.layout.mlp_b.clone()];
            let h: Vec<f64> = (0..cfg.mlp_hidden)
                .map(|j| libm::tanh(crate::math::dot(&w[j * N_PPL..(j + 1) * N_PPL], &x) + b[j]))
                .collect();
            r[..r_mlp].copy_from_slice(&h);
            MlpCache { x, h }
        });

        if act.bow && !input.word_ids.is_empty() {
            let out = &mut r[r_mlp..r_mlp + r_bow];
            let inv = 1.0 / input.word_ids.len() as f64;
            for &id in input.word_ids {
                crate::math::axpy(inv, &self.data[self.layout.bow_row(id as usize, e)], out);
            }
        }

        let cnn = act.cnn.then(|| {
            let base = r_mlp + r_bow;
            let f = cfg.cnn_filters_per_width;
            let ids = input.word_ids;
            let mut all = Vec::with_capacity(cfg.cnn_widths.len());
            for (wi, &width) in cfg.cnn_widths.iter().enumerate() {
                let wts = &self.data[self.layout.cnn_w[wi].clone()];
                let bias = &self.data[self.layout.cnn_b[wi].clone()];
                let positions = ids.len().saturating_sub(width) + 1;
                let mut per_filter = Vec::with_capacity(f);
                for fi in 0..f {
                    let filt = &wts[fi * width * e..(fi + 1) * width * e];
                    let mut best = (0usize, f64::NEG_INFINITY);
                    for p in 0..positions {
                        let mut z = bias[fi];
                        for j in 0..width {
                            if let Some(&id) = ids.get(p + j) {
                                z += crate::math::dot(
                                    &filt[j * e..(j + 1) * e],
                                    &self.data[self.layout.cnn_row(id as usize, e)],
                                );
                            }
                        }
                        if z > best.1 {
                            best = (p, z);
                        }
                    }
                    let a = libm::tanh(best.1);
                    r[base + wi * f + fi] = a;
                    per_filter.push((best.0, a));
                }
                all.push(per_filter);
            }
            all
        });

        let lstm = act.lstm.then(|| {
            let base = r_mlp + r_bow + r_cnn;
            let hdim = cfg.lstm_hidden;
            let ids: Vec<usize> =
                input.common_ids.iter().take(cfg.max_seq_len).map(|&i| i as usize).collect();
            let fwd = self.lstm_run(&self.layout.lstm_f, ids.iter().copied());
            let bwd = self.lstm_run(&self.layout.lstm_b, ids.iter().rev().copied());
            if let Some(last) = fwd.steps.last() {
                for k in 0..hdim {
                    r[base + k] = last.gates[3 * hdim + k] * last.tanh_c[k];
                }
            }
            if let Some(last) = bwd.steps.last() {
                for k in 0..hdim {
                    r[base + hdim + k] = last.gates[3 * hdim + k] * last.tanh_c[k];
                }
            }
            (fwd, bwd)
        });

        let eh = cfg.ensemble_hidden;
        let rn = r.len();
        let hw = &self.data[self.layout.head_w.clone()];
        let hb = &self.data[self.layout.head_b.clone()];
        let hh = (0..eh)
            .map(|j| libm::tanh(crate::math::dot(&hw[j * rn..(j + 1) * rn], &r) + hb[j]))
            .collect();
        Cache { input, r, hh, mlp, cnn, lstm }
    }

    fn lstm_run(&self, slots: &LstmSlots, ids: impl Iterator<Item = usize>) -> LstmCache {
        let e = self.config.embed_dim;
        let h = self.config.lstm_hidden;
        let w = &self.data[slots.w.clone()];
        let u = &self.data[slots.u.clone()];
        let b = &self.data[slots.b.clone()];
        let mut steps: Vec<LstmStep> = Vec::new();
        let mut h_prev = vec![0.0; h];
        let mut c_prev = vec![0.0; h];
        for id in ids {
            let x = &self.data[self.layout.lstm_row(id, e)];
            let mut gates = vec![0.0; 4 * h];
            for (k, g) in gates.iter_mut().enumerate() {
                let a = b[k]
                    + crate::math::dot(&w[k * e..(k + 1) * e], x)
                    + crate::math::dot(&u[k * h..(k + 1) * h], &h_prev);
                *g = if (2 * h..3 * h).contains(&k) { libm::tanh(a) } else { sigmoid(a) };
            }
            let mut c = vec![0.0; h];
            let mut tanh_c = vec![0.0; h];
            for k in 0..h {
                c[k] = gates[h + k] * c_prev[k] + gates[k] * gates[2 * h + k];
                tanh_c[k] = libm::tanh(c[k]);
                h_prev[k] = gates[3 * h + k] * tanh_c[k];
            }
            c_prev.copy_from_slice(&c);
            steps.push(LstmStep { id, gates, c, tanh_c });
        }
        LstmCache { steps }
    }

    /// Adds `dlogit ×` the gradient of this candidate's logit into `grad`.
    fn backward(&self, cache: &Cache<'_>, dlogit: f64, grad: &mut [f64]) {
        let cfg = &self.config;
        let lay = &self.layout;
        let e = cfg.embed_dim;
        let eh = cfg.ensemble_hidden;
        let rn = cache.r.len();

        // Head.
        let ow = &self.data[lay.out_w.clone()];
        grad[lay.out_b.start] += dlogit;
        let hw = &self.data[lay.head_w.clone()];
        let mut dr = vec![0.0; rn];
        for j in 0..eh {
            grad[lay.out_w.start + j] += dlogit * cache.hh[j];
            let da = dlogit * ow[j] * (1.0 - cache.hh[j] * cache.hh[j]);
            if da == 0.0 {
                continue;
            }
            grad[lay.head_b.start + j] += da;
            let row = lay.head_w.start + j * rn;
            crate::math::axpy(da, &cache.r, &mut grad[row..row + rn]);
            crate::math::axpy(da, &hw[j * rn..(j + 1) * rn], &mut dr);
        }
        let [r_mlp, r_bow, r_cnn, _] = lay.rep;

        if let Some(m) = &cache.mlp {
            for j in 0..cfg.mlp_hidden {
                let da = dr[j] * (1.0 - m.h[j] * m.h[j]);
                grad[lay.mlp_b.start + j] += da;
                let row = lay.mlp_w.start + j * N_PPL;
                crate::math::axpy(da, &m.x, &mut grad[row..row + N_PPL]);
            }
        }

        let ids = cache.input.word_ids;
        if cfg.active_members.bow && !ids.is_empty() {
            let d = &dr[r_mlp..r_mlp + r_bow];
            let inv = 1.0 / ids.len() as f64;
            for &id in ids {
                crate::math::axpy(inv, d, &mut grad[lay.bow_row(id as usize, e)]);
            }
        }

        if let Some(cnn) = &cache.cnn {
            let base = r_mlp + r_bow;
            let f = cfg.cnn_filters_per_width;
            for (wi, &width) in cfg.cnn_widths.iter().enumerate() {
                let wts = &self.data[lay.cnn_w[wi].clone()];
                for fi in 0..f {
                    let (p, a) = cnn[wi][fi];
                    let dz = dr[base + wi * f + fi] * (1.0 - a * a);
                    if dz == 0.0 {
                        continue;
                    }
                    grad[lay.cnn_b[wi].start + fi] += dz;
                    for j in 0..width {
                        let Some(&id) = ids.get(p + j) else { continue };
                        let wrow = lay.cnn_w[wi].start + fi * width * e + j * e;
                        let erow = lay.cnn_row(id as usize, e);
                        crate::math::axpy(dz, &self.data[erow.clone()], &mut grad[wrow..wrow + e]);
                        crate::math::axpy(dz, &wts[fi * width * e + j * e..fi * width * e + (j + 1) * e], &mut grad[erow]);
                    }
                }
            }
        }

        if let Some((fwd, bwd)) = &cache.lstm {
            let base = r_mlp + r_bow + r_cnn;
            let h = cfg.lstm_hidden;
            self.lstm_backward(&lay.lstm_f, fwd, &dr[base..base + h], grad);
            self.lstm_backward(&lay.lstm_b, bwd, &dr[base + h..base + 2 * h], grad);
        }
    }

    fn lstm_backward(&self, slots: &LstmSlots, cache: &LstmCache, dh_final: &[f64], grad: &mut [f64]) {
        let e = self.config.embed_dim;
        let h = self.config.lstm_hidden;
        let w = &self.data[slots.w.clone()];
        let u = &self.data[slots.u.clone()];
        let mut dh = dh_final.to_vec();
        let mut dc = vec![0.0; h];
        let mut da = vec![0.0; 4 * h];
        let zero = vec![0.0; h];
        for t in (0..cache.steps.len()).rev() {
            let st = &cache.steps[t];
            let (c_prev, h_prev): (&[f64], Vec<f64>) = if t > 0 {
                let p = &cache.steps[t - 1];
                (&p.c, (0..h).map(|k| p.gates[3 * h + k] * p.tanh_c[k]).collect())
            } else {
                (&zero, zero.clone())
            };
            let g = &st.gates;
            for k in 0..h {
                let (i, f, gg, o) = (g[k], g[h + k], g[2 * h + k], g[3 * h + k]);
                let d_o = dh[k] * st.tanh_c[k];
                dc[k] += dh[k] * o * (1.0 - st.tanh_c[k] * st.tanh_c[k]);
                let d_i = dc[k] * gg;
                let d_g = dc[k] * i;
                let d_f = dc[k] * c_prev[k];
                da[k] = d_i * i * (1.0 - i);
                da[h + k] = d_f * f * (1.0 - f);
                da[2 * h + k] = d_g * (1.0 - gg * gg);
                da[3 * h + k] = d_o * o * (1.0 - o);
                dc[k] *= f;
            }
            let xrow = self.layout.lstm_row(st.id, e);
            let mut dh_prev = vec![0.0; h];
            for k in 0..4 * h {
                let a = da[k];
                if a == 0.0 {
                    continue;
                }
                grad[slots.b.start + k] += a;
                let wrow = slots.w.start + k * e;
                crate::math::axpy(a, &self.data[xrow.clone()], &mut grad[wrow..wrow + e]);
                let urow = slots.u.start + k * h;
                crate::math::axpy(a, &h_prev, &mut grad[urow..urow + h]);
                crate::math::axpy(a, &w[k * e..(k + 1) * e], &mut grad[xrow.clone()]);
                crate::math::axpy(a, &u[k * h..(k + 1) * h], &mut dh_prev);
            }
            dh = dh_prev;
        }
    }

    /// Cross-entropy of the positive (index 0) for one instance; adds
    /// `scale ×` its gradient into `grad`.
    fn instance_loss_grad(&self, inst: &TrainInstance<'_>, scale: f64, grad: &mut [f64]) -> f64 {
        let caches: Vec<Cache<'_>> = inst.candidates.iter().map(|c| self.forward(*c)).collect();
        let logits: Vec<f64> = caches.iter().map(|c| self.output(c)).collect();
        let probs = softmax(&logits);
        for (j, cache) in caches.iter().enumerate() {
            let d = probs[j] - if j == 0 { 1.0 } else { 0.0 };
            self.backward(cache, scale * d, grad);
        }
        log_sum_exp(&logits) - logits[0]
    }

    /// Mean cross-entropy over instances.
    pub fn loss(&self, instances: &[TrainInstance<'_>]) -> f64 {
        let total: f64 = instances
            .iter()
            .map(|inst| {
                let logits: Vec<f64> = inst.candidates.iter().map(|c| self.logit(c)).collect();
                log_sum_exp(&logits) - logits[0]
            })
            .sum();
        total / instances.len().max(1) as f64
    }

    /// Mean loss and its gradient over `batch`.
    pub fn gradient(&self, batch: &[TrainInstance<'_>]) -> Result<(f64, Vec<f64>), CommitteeError> {
        for (i, inst) in batch.iter().enumerate() {
            if inst.candidates.len() < 2 {
                return Err(CommitteeError::DegenerateInstance(i));
            }
            for c in &inst.candidates {
                self.check(c)?;
            }
        }
        Ok(self.gradient_unchecked(batch))
    }

    #[cfg(not(feature = "parallel"))]
    fn gradient_unchecked(&self, batch: &[TrainInstance<'_>]) -> (f64, Vec<f64>) {
        let mut grad = vec![0.0; self.layout.total];
        let scale = 1.0 / batch.len().max(1) as f64;
        let loss: f64 = batch.iter().map(|inst| self.instance_loss_grad(inst, scale, &mut grad)).sum();
        (loss * scale, grad)
    }

    #[cfg(feature = "parallel")]
    fn gradient_unchecked(&self, batch: &[TrainInstance<'_>]) -> (f64, Vec<f64>) {
        use rayon::prelude::*;
        // Fixed chunking keeps the reduction order independent of thread count.
        const CHUNKS: usize = 4;
        let scale = 1.0 / batch.len().max(1) as f64;
        let chunk = batch.len().div_ceil(CHUNKS).max(1);
        let parts: Vec<(f64, Vec<f64>)> = batch
            .par_chunks(chunk)
            .map(|part| {
                let mut g = vec![0.0; self.layout.total];
                let l: f64 = part.iter().map(|inst| self.instance_loss_grad(inst, scale, &mut g)).sum();
                (l, g)
            })
            .collect();
        let mut grad = vec![0.0; self.layout.total];
        let mut loss = 0.0;
        for (l, g) in parts {
            loss += l;
            for (a, b) in grad.iter_mut().zip(&g) {
                *a += b;
            }
        }
        (loss * scale, grad)
    }
}

/// Outcome of [`train`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean minibatch loss per epoch.
    pub epoch_losses: Vec<f64>,
    /// Loss of the final parameters over the whole training set.
    pub final_loss: f64,
}

struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

/// Trains `params` in place with minibatch gradient descent and global-norm
/// clipping; shuffling is seeded by `config.seed`.
pub fn train(params: &mut Params, instances: &[TrainInstance<'_>]) -> Result<TrainReport, CommitteeError> {
    let cfg = params.config.clone();
    cfg.validate()?;
    for (i, inst) in instances.iter().enumerate() {
        if inst.candidates.len() < 2 {
            return Err(CommitteeError::DegenerateInstance(i));
        }
        for c in &inst.candidates {
            params.check(c)?;
        }
    }
    let mut order: Vec<usize> = (0..instances.len()).collect();
    let mut rng = rng::stream_n(cfg.seed, "committee-shuffle", 0);
    let mut adam = AdamState { m: vec![0.0; params.layout.total], v: vec![0.0; params.layout.total], t: 0 };
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut batches = 0;
        for (bi, idx) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<TrainInstance<'_>> = idx.iter().map(|&i| instances[i].clone()).collect();
            let (loss, mut grad) = params.gradient_unchecked(&batch);
            if !loss.is_finite() {
                return Err(CommitteeError::NonFiniteLoss { epoch, batch: bi, loss });
            }
            clip(&mut grad, cfg.clip_norm);
            step(params, &grad, &cfg, &mut adam);
            sum += loss;
            batches += 1;
        }
        epoch_losses.push(if batches > 0 { sum / batches as f64 } else { 0.0 });
    }
    let final_loss = params.loss(instances);
    if !final_loss.is_finite() {
        return Err(CommitteeError::NonFiniteLoss { epoch: cfg.epochs, batch: 0, loss: final_loss });
    }
    Ok(TrainReport { epoch_losses, final_loss })
}

fn clip(grad: &mut [f64], max_norm: f64) {
    let norm = libm::sqrt(grad.iter().map(|g| g * g).sum::<f64>());
    if norm > max_norm {
        let s = max_norm / norm;
        grad.iter_mut().for_each(|g| *g *= s);
    }
}

fn step(params: &mut Params, grad: &[f64], cfg: &CommitteeConfig, adam: &mut AdamState) {
    let lr = cfg.learning_rate;
    match cfg.optimizer {
        Optimizer::Sgd => {
            for (p, g) in params.data.iter_mut().zip(grad) {
                *p -= lr * g;
            }
        }
        Optimizer::Adam => {
            const B1: f64 = 0.9;
            const B2: f64 = 0.999;
            const EPS: f64 = 1e-8;
            adam.t += 1;
            let c1 = 1.0 - libm::pow(B1, adam.t as f64);
            let c2 = 1.0 - libm::pow(B2, adam.t as f64);
            for (i, &g) in grad.iter().enumerate() {
                if g == 0.0 && adam.m[i] == 0.0 && adam.v[i] == 0.0 {
                    continue;
                }
                adam.m[i] = B1 * adam.m[i] + (1.0 - B1) * g;
                adam.v[i] = B2 * adam.v[i] + (1.0 - B2) * g * g;
                params.data[i] -= lr * (adam.m[i] / c1) / (libm::sqrt(adam.v[i] / c2) + EPS);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn small_config(members: Members) -> CommitteeConfig {
        CommitteeConfig {
            embed_dim: 5,
            mlp_hidden: 4,
            cnn_filters_per_width: 3,
            cnn_widths: vec![2, 3],
            lstm_hidden: 3,
            ensemble_hidden: 6,
            active_members: members,
            batch_size: 4,
            ..CommitteeConfig::default()
        }
    }

    const DIMS: InputDims = InputDims { vocab: 12, common: 8 };

    struct Owned {
        ppl: Vec<PplFeatures>,
        words: Vec<Vec<u32>>,
        common: Vec<Vec<u32>>,
    }

    impl Owned {
        fn random(n: usize, seed: u64) -> Self {
            let mut rng = rng::stream_n(seed, "test-data", 0);
            let mut ppl = Vec::new();
            let mut words = Vec::new();
            let mut common = Vec::new();
            for _ in 0..n {
                let mut f = [0.0; N_PPL];
                for x in f.iter_mut() {
                    *x = rng.random_range(-2.0..2.0);
                }
                ppl.push(f);
                let len = rng.random_range(1..7);
                words.push((0..len).map(|_| rng.random_range(0..DIMS.vocab as u32)).collect());
                common.push((0..len).map(|_| rng.random_range(0..DIMS.common as u32)).collect());
            }
            Self { ppl, words, common }
        }

        fn input(&self, i: usize) -> CandidateInput<'_> {
            CandidateInput { ppl: &self.ppl[i], word_ids: &self.words[i], common_ids: &self.common[i] }
        }

        fn instances(&self, per: usize) -> Vec<TrainInstance<'_>> {
            (0..self.ppl.len() / per)
                .map(|k| TrainInstance { candidates: (k * per..(k + 1) * per).map(|i| self.input(i)).collect() })
                .collect()
        }
    }

    #[test]
    fn init_is_deterministic() {
        let cfg = small_config(Members::ALL);
        let a = init_params(&cfg, DIMS, 11).unwrap();
        let b = init_params(&cfg, DIMS, 11).unwrap();
        assert_eq!(a.data.iter().map(|x| x.to_bits()).collect::<Vec<_>>(), b.data.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
        assert_ne!(a.data, init_params(&cfg, DIMS, 12).unwrap().data);
    }

    #[test]
    fn default_cnn_representation_has_64_entries() {
        let cfg = CommitteeConfig::default();
        assert_eq!(cfg.representation_sizes()[2], 64);
        let p = init_params(&cfg, InputDims { vocab: 10, common: 106 }, 0).unwrap();
        assert_eq!(p.layout().rep[2], 64);
    }

    #[test]
    fn config_validation() {
        let mut cfg = small_config(Members::ALL);
        cfg.active_members = Members::from(Vec::new());
        assert!(matches!(init_params(&cfg, DIMS, 0), Err(CommitteeError::Config(_))));
        let mut cfg = small_config(Members::ALL);
        cfg.lstm_hidden = 0;
        assert!(matches!(init_params(&cfg, DIMS, 0), Err(CommitteeError::Config(_))));
    }

    #[test]
    fn zero_head_gives_zero_logits_and_uniform_loss() {
        let data = Owned::random(20, 1);
        let mut p = init_params(&small_config(Members::ALL), DIMS, 3).unwrap();
        p.zero_head();
        for i in 0..20 {
            assert_eq!(p.score(&data.input(i)).unwrap(), 0.0);
        }
        let inst = data.instances(10);
        assert!((p.loss(&inst) - libm::log(10.0)).abs() < 1e-12);
        assert!((p.loss(&inst) - core::f64::consts::LN_10).abs() < 1e-12);
        let two = data.instances(2);
        assert!((p.loss(&two) - libm::log(2.0)).abs() < 1e-12);
    }

    #[test]
    fn scores_are_per_candidate() {
        let data = Owned::random(6, 2);
        let p = init_params(&small_config(Members::ALL), DIMS, 4).unwrap();
        let forward: Vec<f64> = (0..6).map(|i| p.score(&data.input(i)).unwrap()).collect();
        let backward: Vec<f64> = (0..6).rev().map(|i| p.score(&data.input(i)).unwrap()).collect();
        for i in 0..6 {
            assert_eq!(forward[i].to_bits(), backward[5 - i].to_bits());
        }
    }

    #[test]
    fn out_of_range_ids_are_rejected() {
        let p = init_params(&small_config(Members::ALL), DIMS, 4).unwrap();
        let ppl = [0.0; N_PPL];
        let bad = CandidateInput { ppl: &ppl, word_ids: &[99], common_ids: &[0] };
        assert!(matches!(p.score(&bad), Err(CommitteeError::Shape(_))));
        let bad = CandidateInput { ppl: &ppl, word_ids: &[0], common_ids: &[8] };
        assert!(matches!(p.score(&bad), Err(CommitteeError::Shape(_))));
    }

    #[test]
    fn mlp_only_with_identical_features_is_at_chance() {
        let data = Owned::random(10, 5);
        let p = init_params(&small_config(Members::MLP_ONLY), DIMS, 4).unwrap();
        let same = [0.7, -1.0, 0.2, 0.0, -3.0, 6.0, 4.0];
        let logits: Vec<f64> = (0..10)
            .map(|i| {
                let c = CandidateInput { ppl: &same, ..data.input(i) };
                p.score(&c).unwrap()
            })
            .collect();
        assert!(logits.iter().all(|l| l.to_bits() == logits[0].to_bits()));
    }

    /// Independent forward pass for a 3-token toy input, written directly
    /// from the architecture description with explicit index arithmetic.
    #[test]
    fn forward_matches_reference_implementation() {
        let cfg = small_config(Members::ALL);
        let mut p = init_params(&cfg, DIMS, 21).unwrap();
        p.standardizer = Standardizer { mean: [0.5; N_PPL], std: [2.0; N_PPL] };
        let ppl = [1.0, -0.5, 2.0, 0.1, -1.5, 8.0, 3.0];
        let words = [3u32, 7, 1];
        let common = [2u32, 5, 0];
        let got = p.score(&CandidateInput { ppl: &ppl, word_ids: &words, common_ids: &common }).unwrap();

        let d = &p.data;
        let mut at = 0usize;
        let mut next = |n: usize| {
            let s = at;
            at += n;
            s
        };
        let (e, mh, nf, hd, eh) = (5, 4, 3, 3, 6);
        let mlp_w = next(mh * 7);
        let mlp_b = next(mh);
        let cw2 = next(nf * 2 * e);
        let cw3 = next(nf * 3 * e);
        let cb2 = next(nf);
        let cb3 = next(nf);
        let lf = (next(4 * hd * e), next(4 * hd * hd), next(4 * hd));
        let lb = (next(4 * hd * e), next(4 * hd * hd), next(4 * hd));
        let rsz = mh + e + 2 * nf + 2 * hd;
        let hw = next(eh * rsz);
        let hb = next(eh);
        let ow = next(eh);
        let ob = next(1);
        let bow = next(12 * e);
        let cemb = next(12 * e);
        let lemb = next(8 * e);

        let mut rep = Vec::new();
        for j in 0..mh {
            let mut a = d[mlp_b + j];
            for i in 0..7 {
                a += d[mlp_w + j * 7 + i] * (ppl[i] - 0.5) / 2.0;
            }
            rep.push(libm::tanh(a));
        }
        for k in 0..e {
            rep.push(words.iter().map(|&w| d[bow + w as usize * e + k]).sum::<f64>() / 3.0);
        }
        for (w, (cw, cb)) in [(2usize, (cw2, cb2)), (3, (cw3, cb3))] {
            for f in 0..nf {
                let mut best = f64::NEG_INFINITY;
                for pos in 0..=(3 - w) {
                    let mut z = d[cb + f];
                    for j in 0..w {
                        for k in 0..e {
                            z += d[cw + f * w * e + j * e + k] * d[cemb + words[pos + j] as usize * e + k];
                        }
                    }
                    best = best.max(z);
                }
                rep.push(libm::tanh(best));
            }
        }
        let sig = |x: f64| 1.0 / (1.0 + libm::exp(-x));
        for (slots, seq) in [(lf, [2usize, 5, 0]), (lb, [0usize, 5, 2])] {
            let (w, u, b) = slots;
            let mut h = [0.0; 3];
            let mut c = [0.0; 3];
            for &id in &seq {
                let mut a = [0.0; 12];
                for g in 0..12 {
                    a[g] = d[b + g];
                    for k in 0..e {
                        a[g] += d[w + g * e + k] * d[lemb + id * e + k];
                    }
                    for k in 0..3 {
                        a[g] += d[u + g * 3 + k] * h[k];
                    }
                }
                for k in 0..3 {
                    c[k] = sig(a[3 + k]) * c[k] + sig(a[k]) * libm::tanh(a[6 + k]);
                    h[k] = sig(a[9 + k]) * libm::tanh(c[k]);
                }
            }
            rep.extend_from_slice(&h);
        }
        assert_eq!(rep.len(), rsz);
        let mut logit = d[ob];
        for j in 0..eh {
            let mut a = d[hb + j];
            for i in 0..rsz {
                a += d[hw + j * rsz + i] * rep[i];
            }
            logit += d[ow + j] * libm::tanh(a);
        }
        assert!((got - logit).abs() < 1e-12, "{got} vs {logit}");
    }

    fn finite_difference_check(member: Member, seed: u64) {
        let members = Members::only(member);
        let cfg = small_config(members);
        let data = Owned::random(12, seed);
        let mut p = init_params(&cfg, DIMS, seed).unwrap();
        p.standardizer = Standardizer { mean: [0.1; N_PPL], std: [1.5; N_PPL] };
        let batch = data.instances(4);
        let (_, grad) = p.gradient(&batch).unwrap();
        // Coordinates this batch actually touches.
        let mut coords: Vec<usize> = Vec::new();
        for r in p.layout().member_ranges(member).into_iter().chain(p.layout().head_ranges()) {
            coords.extend(r.filter(|&i| grad[i] != 0.0));
        }
        assert!(coords.len() >= 50, "{member:?}: only {} live coordinates", coords.len());
        let mut rng = rng::stream_n(seed, "fd", 0);
        coords.shuffle(&mut rng);
        let h = 1e-5;
        for &i in coords.iter().take(60) {
            let orig = p.data[i];
            p.data[i] = orig + h;
            let up = p.loss(&batch);
            p.data[i] = orig - h;
            let down = p.loss(&batch);
            p.data[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let rel = (numeric - grad[i]).abs() / numeric.abs().max(grad[i].abs()).max(1e-7);
            assert!(rel <= 1e-3, "{member:?} coord {i}: analytic {} numeric {numeric} rel {rel}", grad[i]);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        for (m, seed) in [(Member::Mlp, 1), (Member::Bow, 2), (Member::Cnn, 3), (Member::Lstm, 4)] {
            finite_difference_check(m, seed);
        }
    }

    #[test]
    fn inactive_members_get_zero_gradient() {
        let data = Owned::random(12, 9);
        let p = init_params(&small_config(Members::from(vec![Member::Mlp, Member::Cnn])), DIMS, 9).unwrap();
        let (_, grad) = p.gradient(&data.instances(4)).unwrap();
        for m in [Member::Bow, Member::Lstm] {
            for r in p.layout().member_ranges(m) {
                assert!(grad[r].iter().all(|&g| g == 0.0));
            }
        }
        assert!(p.layout().member_ranges(Member::Cnn).into_iter().any(|r| grad[r].iter().any(|&g| g != 0.0)));
    }

    #[test]
    fn duplicated_batch_has_same_mean_gradient() {
        let data = Owned::random(12, 10);
        let p = init_params(&small_config(Members::ALL), DIMS, 10).unwrap();
        let batch = data.instances(4);
        let mut doubled = batch.clone();
        doubled.extend(batch.iter().cloned());
        let (l1, g1) = p.gradient(&batch).unwrap();
        let (l2, g2) = p.gradient(&doubled).unwrap();
        assert!((l1 - l2).abs() < 1e-12);
        for (a, b) in g1.iter().zip(&g2) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn separable_pair_is_learned() {
        let ppl = [[2.0, 0.0, 0.0, 0.0, 0.0, 5.0, 9.0], [-2.0, 0.0, 0.0, 0.0, 0.0, 5.0, 2.0]];
        let words = [vec![1u32, 2, 3], vec![4u32, 5]];
        let common = [vec![1u32, 2, 3], vec![4u32, 5]];
        let inst = vec![TrainInstance {
            candidates: (0..2)
                .map(|i| CandidateInput { ppl: &ppl[i], word_ids: &words[i], common_ids: &common[i] })
                .collect(),
        }];
        let mut cfg = small_config(Members::ALL);
        cfg.epochs = 200;
        cfg.learning_rate = 1e-2;
        let mut p = init_params(&cfg, DIMS, 5).unwrap();
        let report = train(&mut p, &inst).unwrap();
        let pos = p.score(&inst[0].candidates[0]).unwrap();
        let neg = p.score(&inst[0].candidates[1]).unwrap();
        assert!(pos > neg, "{pos} <= {neg}");
        assert!(report.final_loss < 0.05);
    }

    #[test]
    fn training_reduces_loss_and_is_reproducible() {
        let data = Owned::random(40, 12);
        let inst = data.instances(4);
        for optimizer in [Optimizer::Adam, Optimizer::Sgd] {
            let mut cfg = small_config(Members::ALL);
            cfg.optimizer = optimizer;
            cfg.learning_rate = 1e-3;
            cfg.epochs = 5;
            cfg.batch_size = 2;
            let mut a = init_params(&cfg, DIMS, 13).unwrap();
            let before = a.loss(&inst);
            let report = train(&mut a, &inst).unwrap();
            assert!(report.final_loss < before, "{optimizer:?}: {} !< {before}", report.final_loss);
            let mut b = init_params(&cfg, DIMS, 13).unwrap();
            train(&mut b, &inst).unwrap();
            assert!(a.data.iter().zip(&b.data).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn softmax_over_candidates_sums_to_one() {
        let data = Owned::random(10, 14);
        let p = init_params(&small_config(Members::ALL), DIMS, 14).unwrap();
        let logits: Vec<f64> = (0..10).map(|i| p.score(&data.input(i)).unwrap()).collect();
        assert!((softmax(&logits).iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn nan_loss_aborts_with_diagnostic() {
        let data = Owned::random(8, 15);
        let inst = data.instances(4);
        let mut p = init_params(&small_config(Members::ALL), DIMS, 15).unwrap();
        let ob = p.layout().head_ranges()[3].start;
        p.data[ob] = f64::NAN;
        assert!(matches!(train(&mut p, &inst), Err(CommitteeError::NonFiniteLoss { epoch: 0, batch: 0, .. })));
    }

    #[test]
    fn checkpoint_round_trips_bit_exactly() {
        let mut p = init_params(&small_config(Members::ALL), DIMS, 16).unwrap();
        p.standardizer = Standardizer { mean: [0.123456789; N_PPL], std: [1.0 / 3.0; N_PPL] };
        let json = serde_json::to_string(&p).unwrap();
        let back: Params = serde_json::from_str(&json).unwrap();
        assert_eq!(p, back);
        assert!(p.data.iter().zip(&back.data).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}
