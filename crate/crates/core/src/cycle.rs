//! Text→Image→Text and Image→Text→Image cycle consistency with the Semantic
//! Anchor shrinking step, the support cross-entropy, and the total objective.
//!
//! All features are unit norm, so cosine similarity is a dot product. Every
//! argmax and top-k breaks ties towards the lowest index.

use std::collections::BTreeMap;
use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::episode::{Episode, EpisodeBundle, PatchIndex};
use crate::error::{Error, Result};
use crate::linalg::{self, FeatureMatrix, NORM_EPS};
use crate::transform::{self, MlpOutput, ModelParams};

/// Search scope of the second I-T-I hop.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Retrieval {
    /// Every view (original and augmented) of the anchor's own sample.
    CrossView,
    /// The original view of the anchor's own sample.
    IntraImage,
    /// The whole support corpus.
    AllImages,
}

impl Retrieval {
    pub const ALL: [Retrieval; 3] = [Retrieval::IntraImage, Retrieval::CrossView, Retrieval::AllImages];

    pub fn as_str(self) -> &'static str {
        match self {
            Retrieval::CrossView => "cross_view",
            Retrieval::IntraImage => "intra_image",
            Retrieval::AllImages => "all_images",
        }
    }
}

impl fmt::Display for Retrieval {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Retrieval {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "cross_view" => Ok(Retrieval::CrossView),
            "intra_image" => Ok(Retrieval::IntraImage),
            "all_images" => Ok(Retrieval::AllImages),
            other => Err(Error::InvalidConfig(format!("unknown retrieval mode {other:?}"))),
        }
    }
}

/// How the T-I-T loss is computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TitMode {
    /// Softmax-weighted text reconstruction; differentiable.
    Soft,
    /// Argmax reconstruction only; piecewise constant, contributes no gradient.
    HardMetricOnly,
}

impl TitMode {
    pub fn as_str(self) -> &'static str {
        match self {
            TitMode::Soft => "soft",
            TitMode::HardMetricOnly => "hard_metric_only",
        }
    }
}

impl fmt::Display for TitMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TitMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "soft" => Ok(TitMode::Soft),
            "hard" | "hard_metric_only" => Ok(TitMode::HardMetricOnly),
            other => Err(Error::InvalidConfig(format!("unknown T-I-T mode {other:?}"))),
        }
    }
}

/// Anchor budget per (image-view, class) pair.
pub const DEFAULT_K: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CycleConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub k: usize,
    pub tau_ce: f64,
    pub tau_soft: f64,
    pub retrieval: Retrieval,
    pub tit_mode: TitMode,
}

impl Default for CycleConfig {
    fn default() -> Self {
        Self {
            lambda1: 3.0,
            lambda2: 2.0,
            k: DEFAULT_K,
            tau_ce: 0.01,
            tau_soft: 0.07,
            retrieval: Retrieval::CrossView,
            tit_mode: TitMode::Soft,
        }
    }
}

impl CycleConfig {
    /// The same configuration with both cycle weights zeroed.
    pub fn ce_only(&self) -> Self {
        Self {
            lambda1: 0.0,
            lambda2: 0.0,
            ..*self
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.lambda1 >= 0.0 && self.lambda1.is_finite()) {
            return bad(format!("lambda1 must be finite and >= 0, got {}", self.lambda1));
        }
        if !(self.lambda2 >= 0.0 && self.lambda2.is_finite()) {
            return bad(format!("lambda2 must be finite and >= 0, got {}", self.lambda2));
        }
        if self.k == 0 {
            return bad("k must be at least 1".into());
        }
        if !(self.tau_ce > 0.0) {
            return Err(Error::NonPositiveTemperature(self.tau_ce));
        }
        if !(self.tau_soft > 0.0) {
            return Err(Error::NonPositiveTemperature(self.tau_soft));
        }
        Ok(())
    }
}

/// Where an anchor came from: image-view block `block`, class `class`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnchorSource {
    pub block: usize,
    pub class: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnchorSet {
    /// Strictly increasing flat corpus indices.
    pub indices: Vec<usize>,
    /// Per anchor, every (block, class) whose top-k list contained it.
    pub provenance: Vec<Vec<AnchorSource>>,
}

impl AnchorSet {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce: f64,
    /// T-I-T loss as optimized (soft or hard per configuration).
    pub cyc_txt: f64,
    /// Argmax-reconstruction T-I-T loss, always reported.
    pub cyc_txt_hard: f64,
    pub cyc_img: f64,
    pub total: f64,
    pub hard_cycle_rate: f64,
    /// Anchor count V.
    pub anchors: usize,
    /// MLP rows that fell back to their input.
    pub passthrough: usize,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [self.ce, self.cyc_txt, self.cyc_txt_hard, self.cyc_img, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// `1 − mean cosine`, kept inside `[0, 2]` against rounding at the ends.
fn cosine_loss(mean_cos: f64) -> f64 {
    (1.0 - mean_cos).clamp(0.0, 2.0)
}

/// `D[j][i] = T_j · L_i`.
pub fn tit_similarity(text: &FeatureMatrix, corpus: &FeatureMatrix) -> Result<FeatureMatrix> {
    linalg::cosine_sim_matrix(text, corpus)
}

/// Per class, the corpus row with the highest similarity over the whole corpus.
pub fn tit_select(sim: &FeatureMatrix) -> Vec<usize> {
    sim.iter_rows().map(linalg::argmax).collect()
}

/// Soft reconstruction state kept for the backward pass.
#[derive(Debug, Clone)]
pub struct SoftRecon {
    pub probs: FeatureMatrix,
    /// Un-normalized reconstructions `softmax(E_j/τ)·T`.
    pub recon: FeatureMatrix,
    pub recon_norms: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct TitOutcome {
    pub selected: Vec<usize>,
    /// Reverse similarity `E = L*·Tᵀ` (C×C).
    pub reverse: FeatureMatrix,
    /// Argmax-reconstructed class per starting class.
    pub recon_class: Vec<usize>,
    pub loss: f64,
    pub hard_loss: f64,
    pub hard_rate: f64,
    pub soft: Option<SoftRecon>,
}

fn tit_forward(
    text: &FeatureMatrix,
    lstar: &FeatureMatrix,
    selected: Vec<usize>,
    cfg: &CycleConfig,
) -> Result<TitOutcome> {
    let c = text.rows();
    let reverse = linalg::cosine_sim_matrix(lstar, text)?;
    let recon_class = tit_select(&reverse);
    let hits = recon_class.iter().enumerate().filter(|(j, r)| j == *r).count();
    let hard_sim: f64 = recon_class
        .iter()
        .enumerate()
        .map(|(j, &r)| linalg::dot(text.row(j), text.row(r)))
        .sum();
    let hard_loss = cosine_loss(hard_sim / c as f64);

    let (loss, soft) = match cfg.tit_mode {
        TitMode::HardMetricOnly => (hard_loss, None),
        TitMode::Soft => {
            let mut probs = FeatureMatrix::zeros(c, c);
            let mut recon = FeatureMatrix::zeros(c, text.cols());
            let mut recon_norms = Vec::with_capacity(c);
            let mut total = 0.0;
            for j in 0..c {
                let p = linalg::softmax(reverse.row(j), cfg.tau_soft)?;
                let r = recon.row_mut(j);
                for (k, pk) in p.iter().enumerate() {
                    r.iter_mut().zip(text.row(k)).for_each(|(x, t)| *x += pk * t);
                }
                let n = linalg::norm(r);
                // A reconstruction that cancels to zero has no direction.
                if n >= NORM_EPS {
                    total += linalg::dot(text.row(j), r) / n;
                }
                recon_norms.push(n);
                probs.row_mut(j).copy_from_slice(&p);
            }
            (
                cosine_loss(total / c as f64),
                Some(SoftRecon {
                    probs,
                    recon,
                    recon_norms,
                }),
            )
        }
    };
    Ok(TitOutcome {
        selected,
        reverse,
        recon_class,
        loss,
        hard_loss,
        hard_rate: hits as f64 / c as f64,
        soft,
    })
}

/// T-I-T loss for the selected patches `lstar` (row j chosen for class j).
///
/// Returns `(loss, hard_rate)`; the loss follows `cfg.tit_mode`.
pub fn tit_loss(text: &FeatureMatrix, lstar: &FeatureMatrix, cfg: &CycleConfig) -> Result<(f64, f64)> {
    if lstar.rows() != text.rows() {
        return Err(Error::DimensionMismatch(format!(
            "{} selected patches for {} classes",
            lstar.rows(),
            text.rows()
        )));
    }
    let out = tit_forward(text, lstar, (0..text.rows()).collect(), cfg)?;
    Ok((out.loss, out.hard_rate))
}

/// Union of per-(block, class) top-k corpus indices.
pub fn anchor_select(sim: &FeatureMatrix, index_map: &PatchIndex, k: usize) -> AnchorSet {
    let mut found: BTreeMap<usize, Vec<AnchorSource>> = BTreeMap::new();
    for block in 0..index_map.blocks() {
        let range = index_map.block_range(block);
        for (class, row) in sim.iter_rows().enumerate() {
            for local in linalg::row_topk(&row[range.clone()], k) {
                found
                    .entry(range.start + local)
                    .or_default()
                    .push(AnchorSource { block, class });
            }
        }
    }
    let (indices, provenance) = found.into_iter().unzip();
    AnchorSet {
        indices,
        provenance,
    }
}

/// Flat indices searched by the second I-T-I hop for anchor `n`.
pub fn retrieval_scope(n: usize, index_map: &PatchIndex, mode: Retrieval) -> Range<usize> {
    let sample = index_map.locate(n).sample;
    match mode {
        Retrieval::CrossView => index_map.sample_range(sample),
        Retrieval::IntraImage => index_map.block_range(sample * index_map.views()),
        Retrieval::AllImages => 0..index_map.len(),
    }
}

/// One I-T-I round trip.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItiHop {
    pub mid_class: usize,
    pub retrieved: usize,
}

fn argmax_in(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in values.enumerate() {
        if i == 0 || v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

/// Anchor → most similar text → most similar patch within the mode's scope.
pub fn iti_hop(n: usize, text: &FeatureMatrix, corpus: &FeatureMatrix, index_map: &PatchIndex, mode: Retrieval) -> ItiHop {
    let x = corpus.row(n);
    let mid_class = argmax_in(text.iter_rows().map(|t| linalg::dot(t, x)));
    let t = text.row(mid_class);
    let scope = retrieval_scope(n, index_map, mode);
    let start = scope.start;
    let retrieved = start + argmax_in(scope.map(|m| linalg::dot(t, corpus.row(m))));
    ItiHop {
        mid_class,
        retrieved,
    }
}

pub fn iti_retrieve(n: usize, text: &FeatureMatrix, corpus: &FeatureMatrix, index_map: &PatchIndex, mode: Retrieval) -> usize {
    iti_hop(n, text, corpus, index_map, mode).retrieved
}

/// The same hop read off a precomputed `D = T·Lᵀ`.
fn iti_hop_from_sim(n: usize, sim: &FeatureMatrix, index_map: &PatchIndex, mode: Retrieval) -> ItiHop {
    let c = sim.rows();
    let mid_class = argmax_in((0..c).map(|j| sim.get(j, n)));
    let row = sim.row(mid_class);
    let scope = retrieval_scope(n, index_map, mode);
    let retrieved = scope.start + linalg::argmax(&row[scope]);
    ItiHop {
        mid_class,
        retrieved,
    }
}

/// `1 − mean_n x_n·x̂_n` over the anchors.
pub fn iti_loss(
    anchors: &AnchorSet,
    corpus: &FeatureMatrix,
    text: &FeatureMatrix,
    index_map: &PatchIndex,
    mode: Retrieval,
) -> Result<f64> {
    if anchors.is_empty() {
        return Err(Error::EmptyAnchorSet);
    }
    let sum: f64 = anchors
        .indices
        .iter()
        .map(|&n| {
            let m = iti_retrieve(n, text, corpus, index_map, mode);
            linalg::dot(corpus.row(n), corpus.row(m))
        })
        .sum();
    Ok(cosine_loss(sum / anchors.len() as f64))
}

/// `−log softmax(G·T/τ)[label]` for one sample.
pub fn ce_loss(adapted: &[f64], text: &FeatureMatrix, label: usize, tau_ce: f64) -> f64 {
    let logits: Vec<f64> = text.iter_rows().map(|t| linalg::dot(adapted, t)).collect();
    linalg::log_sum_exp(&logits, tau_ce) - logits[label] / tau_ce
}

/// Everything computed by one pass of the objective.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub mlp: MlpOutput,
    pub sim: FeatureMatrix,
    pub tit: TitOutcome,
    pub anchors: AnchorSet,
    pub retrievals: Vec<ItiHop>,
    pub breakdown: LossBreakdown,
}

/// Mean support cross-entropy through the global adapter.
pub fn support_ce(ep: &Episode, params: &ModelParams, tau_ce: f64) -> Result<f64> {
    let mut sum = 0.0;
    for (g, &label) in ep.support_globals.iter_rows().zip(&ep.support_labels) {
        let a = transform::adapt_global(g, params)?;
        sum += ce_loss(&a, &ep.text, label, tau_ce);
    }
    Ok(sum / ep.support_labels.len() as f64)
}

/// Runs the whole pipeline on a prepared episode.
pub fn evaluate(ep: &Episode, params: &ModelParams, cfg: &CycleConfig) -> Result<Evaluation> {
    cfg.validate()?;
    let index_map = &ep.corpus.index_map;
    let mlp = transform::mlp_forward(&ep.corpus.raw, params)?;
    let l = &mlp.rows;
    let sim = tit_similarity(&ep.text, l)?;
    let selected = tit_select(&sim);
    let lstar = l.select_rows(&selected);
    let tit = tit_forward(&ep.text, &lstar, selected, cfg)?;

    let anchors = anchor_select(&sim, index_map, cfg.k);
    if anchors.is_empty() {
        return Err(Error::EmptyAnchorSet);
    }
    let retrievals: Vec<ItiHop> = anchors
        .indices
        .iter()
        .map(|&n| iti_hop_from_sim(n, &sim, index_map, cfg.retrieval))
        .collect();
    let agree: f64 = anchors
        .indices
        .iter()
        .zip(&retrievals)
        .map(|(&n, hop)| linalg::dot(l.row(n), l.row(hop.retrieved)))
        .sum();
    let cyc_img = cosine_loss(agree / anchors.len() as f64);

    let ce = support_ce(ep, params, cfg.tau_ce)?;
    let breakdown = LossBreakdown {
        ce,
        cyc_txt: tit.loss,
        cyc_txt_hard: tit.hard_loss,
        cyc_img,
        total: ce + cfg.lambda1 * tit.loss + cfg.lambda2 * cyc_img,
        hard_cycle_rate: tit.hard_rate,
        anchors: anchors.len(),
        passthrough: mlp.passthrough_count(),
    };
    Ok(Evaluation {
        mlp,
        sim,
        tit,
        anchors,
        retrievals,
        breakdown,
    })
}

/// Loss breakdown of the total objective for a bundle.
pub fn total_loss(bundle: &EpisodeBundle, params: &ModelParams, cfg: &CycleConfig) -> Result<LossBreakdown> {
    Ok(evaluate(&Episode::new(bundle), params, cfg)?.breakdown)
}
