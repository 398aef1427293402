//! Alignment scores, query classification, prototype classification and
//! cycle traces.

use serde::{Deserialize, Serialize};

use crate::cycle::{self, CycleConfig, Evaluation};
use crate::episode::{Episode, EpisodeBundle, PatchLoc};
use crate::error::{Error, Result};
use crate::linalg::{self, FeatureMatrix, NORM_EPS};
use crate::transform::{self, ModelParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAlignment {
    pub class: usize,
    pub samples: usize,
    pub a_g: Option<f64>,
    pub a_l: Option<f64>,
    pub a_l_transformed: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentReport {
    /// Mean cosine of adapted support globals with their class text.
    pub a_g: f64,
    /// Mean cosine of raw original-view patches with their class text.
    pub a_l: f64,
    /// As `a_l`, after the patch MLP.
    pub a_l_transformed: f64,
    pub per_class: Vec<ClassAlignment>,
}

/// Support-set alignment of global and local features with the class texts.
pub fn alignment_scores(bundle: &EpisodeBundle, params: &ModelParams) -> Result<AlignmentReport> {
    alignment_on(&Episode::new(bundle), params)
}

fn original_view_rows(ep: &Episode) -> Vec<usize> {
    let idx = &ep.corpus.index_map;
    (0..idx.samples())
        .flat_map(|s| idx.block_range(s * idx.views()))
        .collect()
}

pub fn alignment_on(ep: &Episode, params: &ModelParams) -> Result<AlignmentReport> {
    let raw = ep.corpus.raw.select_rows(&original_view_rows(ep));
    let transformed = transform::mlp_forward(&raw, params)?.rows;
    alignment_with(ep, params, &raw, &transformed)
}

/// Alignment reusing the transformed corpus of an evaluation.
pub fn alignment_from_eval(ep: &Episode, params: &ModelParams, eval: &Evaluation) -> Result<AlignmentReport> {
    let rows = original_view_rows(ep);
    let raw = ep.corpus.raw.select_rows(&rows);
    let transformed = eval.mlp.rows.select_rows(&rows);
    alignment_with(ep, params, &raw, &transformed)
}

fn alignment_with(
    ep: &Episode,
    params: &ModelParams,
    raw: &FeatureMatrix,
    transformed: &FeatureMatrix,
) -> Result<AlignmentReport> {
    let m = ep.corpus.index_map.patches();

    let c = ep.num_classes();
    let mut sums = vec![[0.0f64; 3]; c];
    let mut counts = vec![0usize; c];
    for (s, (g, &label)) in ep.support_globals.iter_rows().zip(&ep.support_labels).enumerate() {
        let t = ep.text.row(label);
        let a = transform::adapt_global(g, params)?;
        let mut local = 0.0;
        let mut local_t = 0.0;
        for p in 0..m {
            local += linalg::dot(raw.row(s * m + p), t);
            local_t += linalg::dot(transformed.row(s * m + p), t);
        }
        sums[label][0] += linalg::dot(&a, t);
        sums[label][1] += local / m as f64;
        sums[label][2] += local_t / m as f64;
        counts[label] += 1;
    }
    let n = ep.support_labels.len() as f64;
    let total = |k: usize| sums.iter().map(|s| s[k]).sum::<f64>() / n;
    let per_class = (0..c)
        .map(|class| {
            let k = counts[class];
            let mean = |i: usize| (k > 0).then(|| sums[class][i] / k as f64);
            ClassAlignment {
                class,
                samples: k,
                a_g: mean(0),
                a_l: mean(1),
                a_l_transformed: mean(2),
            }
        })
        .collect();
    Ok(AlignmentReport {
        a_g: total(0),
        a_l: total(1),
        a_l_transformed: total(2),
        per_class,
    })
}

/// Class whose text is most similar to the adapted query global.
pub fn classify(query_global: &[f64], params: &ModelParams, text: &FeatureMatrix) -> Result<usize> {
    let a = transform::adapt_global(query_global, params)?;
    Ok(linalg::argmax(
        &text.iter_rows().map(|t| linalg::dot(&a, t)).collect::<Vec<_>>(),
    ))
}

/// Fraction of queries classified correctly.
pub fn episode_accuracy(bundle: &EpisodeBundle, params: &ModelParams) -> Result<f64> {
    accuracy_on(&Episode::new(bundle), params)
}

pub fn accuracy_on(ep: &Episode, params: &ModelParams) -> Result<f64> {
    if ep.query_labels.is_empty() {
        return Err(Error::EmptyQuerySet);
    }
    let mut correct = 0usize;
    for (q, &label) in ep.query_globals.iter_rows().zip(&ep.query_labels) {
        if classify(q, params, &ep.text)? == label {
            correct += 1;
        }
    }
    Ok(correct as f64 / ep.query_labels.len() as f64)
}

/// Normalized mean of the adapted support globals of each class.
pub fn class_prototypes(ep: &Episode, params: &ModelParams) -> Result<FeatureMatrix> {
    let (c, d) = (ep.num_classes(), ep.dim());
    let mut protos = FeatureMatrix::zeros(c, d);
    let mut counts = vec![0usize; c];
    for (g, &label) in ep.support_globals.iter_rows().zip(&ep.support_labels) {
        let a = transform::adapt_global(g, params)?;
        protos.row_mut(label).iter_mut().zip(&a).for_each(|(p, x)| *p += x);
        counts[label] += 1;
    }
    if let Some(missing) = counts.iter().position(|&k| k == 0) {
        return Err(Error::MissingClassSupport(missing));
    }
    linalg::normalize_rows(&mut protos, NORM_EPS)?;
    Ok(protos)
}

/// Nearest-prototype query accuracy.
pub fn prototype_accuracy(bundle: &EpisodeBundle, params: &ModelParams) -> Result<f64> {
    prototype_accuracy_on(&Episode::new(bundle), params)
}

pub fn prototype_accuracy_on(ep: &Episode, params: &ModelParams) -> Result<f64> {
    let protos = class_prototypes(ep, params)?;
    if ep.query_labels.is_empty() {
        return Err(Error::EmptyQuerySet);
    }
    let mut correct = 0usize;
    for (q, &label) in ep.query_globals.iter_rows().zip(&ep.query_labels) {
        let a = transform::adapt_global(q, params)?;
        let sims: Vec<f64> = protos.iter_rows().map(|p| linalg::dot(&a, p)).collect();
        if linalg::argmax(&sims) == label {
            correct += 1;
        }
    }
    Ok(correct as f64 / ep.query_labels.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TitStep {
    pub class: usize,
    pub patch: PatchLoc,
    /// `D[class][patch]`.
    pub sim: f64,
    pub recon_class: usize,
    /// `E[class][recon_class]`.
    pub recon_sim: f64,
    /// Full reverse similarity row `E[class]`.
    pub reverse_sims: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItiStep {
    pub anchor: PatchLoc,
    pub mid_class: usize,
    pub retrieved: PatchLoc,
    /// Cosine between the anchor and the retrieved patch.
    pub sim: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CycleTrace {
    pub tit: Vec<TitStep>,
    pub iti: Vec<ItiStep>,
}

fn tit_steps(ep: &Episode, eval: &Evaluation) -> Vec<TitStep> {
    let idx = &ep.corpus.index_map;
    let tit = &eval.tit;
    (0..ep.num_classes())
        .map(|j| {
            let sel = tit.selected[j];
            let recon = tit.recon_class[j];
            TitStep {
                class: j,
                patch: idx.locate(sel),
                sim: eval.sim.get(j, sel),
                recon_class: recon,
                recon_sim: tit.reverse.get(j, recon),
                reverse_sims: tit.reverse.row(j).to_vec(),
            }
        })
        .collect()
}

fn iti_steps(ep: &Episode, eval: &Evaluation) -> Vec<ItiStep> {
    let idx = &ep.corpus.index_map;
    let l = &eval.mlp.rows;
    eval.anchors
        .indices
        .iter()
        .zip(&eval.retrievals)
        .map(|(&n, hop)| ItiStep {
            anchor: idx.locate(n),
            mid_class: hop.mid_class,
            retrieved: idx.locate(hop.retrieved),
            sim: linalg::dot(l.row(n), l.row(hop.retrieved)),
        })
        .collect()
}

/// Both pathways of one evaluation.
pub fn trace_of(ep: &Episode, eval: &Evaluation) -> CycleTrace {
    CycleTrace {
        tit: tit_steps(ep, eval),
        iti: iti_steps(ep, eval),
    }
}

pub fn cycle_trace(bundle: &EpisodeBundle, params: &ModelParams, cfg: &CycleConfig) -> Result<CycleTrace> {
    let ep = Episode::new(bundle);
    let eval = cycle::evaluate(&ep, params, cfg)?;
    Ok(trace_of(&ep, &eval))
}

pub fn tit_trace(bundle: &EpisodeBundle, params: &ModelParams, cfg: &CycleConfig) -> Result<CycleTrace> {
    let ep = Episode::new(bundle);
    let eval = cycle::evaluate(&ep, params, cfg)?;
    Ok(CycleTrace {
        tit: tit_steps(&ep, &eval),
        iti: Vec::new(),
    })
}

pub fn iti_trace(bundle: &EpisodeBundle, params: &ModelParams, cfg: &CycleConfig) -> Result<CycleTrace> {
    let ep = Episode::new(bundle);
    let eval = cycle::evaluate(&ep, params, cfg)?;
    Ok(CycleTrace {
        tit: Vec::new(),
        iti: iti_steps(&ep, &eval),
    })
}

/// Original-view similarity of one class text to the patches of one support sample.
#[derive(Debug, Clone, PartialEq)]
pub struct SimMap {
    pub class: usize,
    pub sample: usize,
    pub values: Vec<f64>,
}

impl SimMap {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("patch,similarity\n");
        for (p, v) in self.values.iter().enumerate() {
            out.push_str(&format!("{p},{v}\n"));
        }
        out
    }

    /// Grid shape: square when M is a perfect square, otherwise a single row.
    pub fn grid(&self) -> (usize, usize) {
        let m = self.values.len();
        let side = (m as f64).sqrt().round() as usize;
        if side * side == m {
            (side, side)
        } else {
            (m, 1)
        }
    }

    /// Binary PGM (P5, maxval 255) with value `round(255·(s+1)/2)`.
    pub fn to_pgm(&self) -> Vec<u8> {
        let (w, h) = self.grid();
        let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
        out.extend(self.values.iter().map(|&s| pgm_level(s)));
        out
    }
}

pub fn pgm_level(s: f64) -> u8 {
    (255.0 * (s + 1.0) / 2.0).round().clamp(0.0, 255.0) as u8
}

/// One map per (class, support sample), class-major.
pub fn sim_maps(ep: &Episode, eval: &Evaluation) -> Vec<SimMap> {
    let idx = &ep.corpus.index_map;
    let mut maps = Vec::with_capacity(ep.num_classes() * idx.samples());
    for class in 0..ep.num_classes() {
        let row = eval.sim.row(class);
        for sample in 0..idx.samples() {
            let range = idx.block_range(sample * idx.views());
            maps.push(SimMap {
                class,
                sample,
                values: row[range].to_vec(),
            });
        }
    }
    maps
}

/// CSV of every anchor with the classes that proposed it.
pub fn anchor_overlay(ep: &Episode, eval: &Evaluation) -> String {
    let idx = &ep.corpus.index_map;
    let mut out = String::from("sample,view,patch,classes\n");
    for (&n, sources) in eval.anchors.indices.iter().zip(&eval.anchors.provenance) {
        let loc = idx.locate(n);
        let mut classes: Vec<usize> = sources.iter().map(|s| s.class).collect();
        classes.dedup();
        let classes: Vec<String> = classes.iter().map(|c| c.to_string()).collect();
        out.push_str(&format!(
            "{},{},{},{}\n",
            loc.sample,
            loc.view,
            loc.patch,
            classes.join(";")
        ));
    }
    out
}

/// Fraction of anchors that sit on planted signal positions.
pub fn anchor_precision(ep: &Episode, eval: &Evaluation, planted: &[Vec<usize>]) -> f64 {
    let idx = &ep.corpus.index_map;
    let hits = eval
        .anchors
        .indices
        .iter()
        .filter(|&&n| {
            let loc = idx.locate(n);
            planted[loc.sample].binary_search(&loc.patch).is_ok()
        })
        .count();
    hits as f64 / eval.anchors.len() as f64
}
