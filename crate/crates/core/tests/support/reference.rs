//! Naive loop-based reference for the objective, written against plain
//! nested `Vec`s so it shares no indexing or selection code with the crate.
#![allow(dead_code)]

use cccdfsl::cycle::{CycleConfig, Retrieval, TitMode};
use cccdfsl::episode::{EpisodeBundle, Metadata, QuerySample, SupportSample};
use cccdfsl::transform::{self, ModelParams};
use cccdfsl::FeatureMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub type Vector = Vec<f64>;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += a[i] * b[i];
    }
    s
}

fn unit(v: &[f64]) -> Vector {
    let n = dot(v, v).sqrt();
    v.iter().map(|x| x / n).collect()
}

/// First index of the maximum.
fn first_max(v: &[f64]) -> usize {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i] > v[best] {
            best = i;
        }
    }
    best
}

/// Indices of the k largest values, larger first, lower index first on ties.
fn top_k(v: &[f64], k: usize) -> Vec<usize> {
    let mut taken = vec![false; v.len()];
    let mut out = Vec::new();
    for _ in 0..k.min(v.len()) {
        let mut best: Option<usize> = None;
        for i in 0..v.len() {
            if !taken[i] && best.is_none_or(|b| v[i] > v[b]) {
                best = Some(i);
            }
        }
        let b = best.unwrap();
        taken[b] = true;
        out.push(b);
    }
    out
}

fn rows_of(m: &FeatureMatrix) -> Vec<Vector> {
    (0..m.rows()).map(|i| m.row(i).to_vec()).collect()
}

/// Episode contents as nested vectors: `patches[s][v][p]` is a unit vector.
pub struct RefEpisode {
    pub text: Vec<Vector>,
    pub patches: Vec<Vec<Vec<Vector>>>,
    pub globals: Vec<Vector>,
    pub labels: Vec<usize>,
}

impl RefEpisode {
    pub fn from_bundle(b: &EpisodeBundle) -> Self {
        let m = b.patches();
        let views = b.augmentations() + 1;
        let mut patches = Vec::new();
        for s in b.support() {
            let mut per_view = Vec::new();
            for v in 0..views {
                let mut ps = Vec::new();
                for p in 0..m {
                    ps.push(unit(s.views.row(v * m + p)));
                }
                per_view.push(ps);
            }
            patches.push(per_view);
        }
        Self {
            text: rows_of(b.text()).iter().map(|t| unit(t)).collect(),
            patches,
            globals: b.support().iter().map(|s| unit(&s.global)).collect(),
            labels: b.support().iter().map(|s| s.label).collect(),
        }
    }

    pub fn samples(&self) -> usize {
        self.patches.len()
    }
    pub fn views(&self) -> usize {
        self.patches[0].len()
    }
    pub fn m(&self) -> usize {
        self.patches[0][0].len()
    }
    pub fn flat(&self, s: usize, v: usize, p: usize) -> usize {
        (s * self.views() + v) * self.m() + p
    }
}

pub struct RefParams {
    pub w1: Vec<Vector>,
    pub w2: Vec<Vector>,
    pub wa: Vec<Vector>,
}

impl RefParams {
    pub fn from(p: &ModelParams) -> Self {
        Self {
            w1: rows_of(&p.w1),
            w2: rows_of(&p.w2),
            wa: rows_of(&p.wa),
        }
    }
}

/// `normalize(ReLU(x·W1)·W2)`, or `x` when that output has no direction.
pub fn mlp(x: &[f64], p: &RefParams) -> Vector {
    let d = x.len();
    let h = p.w1[0].len();
    let mut hidden = vec![0.0; h];
    for i in 0..h {
        let mut s = 0.0;
        for a in 0..d {
            s += x[a] * p.w1[a][i];
        }
        hidden[i] = s.max(0.0);
    }
    let mut y = vec![0.0; d];
    for b in 0..d {
        let mut s = 0.0;
        for i in 0..h {
            s += hidden[i] * p.w2[i][b];
        }
        y[b] = s;
    }
    let n = dot(&y, &y).sqrt();
    if n < 1e-12 || !n.is_finite() {
        x.to_vec()
    } else {
        y.iter().map(|v| v / n).collect()
    }
}

pub fn adapter(g: &[f64], p: &RefParams) -> Vector {
    let d = g.len();
    let mut out = vec![0.0; d];
    for b in 0..d {
        let mut s = g[b];
        for a in 0..d {
            s += g[a] * p.wa[a][b];
        }
        out[b] = s;
    }
    unit(&out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefOutput {
    pub selected: Vec<usize>,
    pub recon_class: Vec<usize>,
    pub anchors: Vec<usize>,
    pub mid_class: Vec<usize>,
    pub retrieved: Vec<usize>,
    pub ce: f64,
    pub cyc_txt_soft: f64,
    pub cyc_txt_hard: f64,
    pub hard_rate: f64,
    pub cyc_img: f64,
}

impl RefOutput {
    pub fn cyc_txt(&self, mode: TitMode) -> f64 {
        match mode {
            TitMode::Soft => self.cyc_txt_soft,
            TitMode::HardMetricOnly => self.cyc_txt_hard,
        }
    }

    pub fn total(&self, cfg: &CycleConfig) -> f64 {
        self.ce + cfg.lambda1 * self.cyc_txt(cfg.tit_mode) + cfg.lambda2 * self.cyc_img
    }
}

/// The whole objective by explicit loops over (sample, view, patch, class).
pub fn evaluate(ep: &RefEpisode, p: &RefParams, cfg: &CycleConfig) -> RefOutput {
    let c = ep.text.len();
    let (ns, nv, m) = (ep.samples(), ep.views(), ep.m());

    // Transformed corpus and D[j][flat].
    let mut l: Vec<Vector> = vec![Vec::new(); ns * nv * m];
    for s in 0..ns {
        for v in 0..nv {
            for q in 0..m {
                l[ep.flat(s, v, q)] = mlp(&ep.patches[s][v][q], p);
            }
        }
    }
    let mut dsim = vec![vec![0.0; l.len()]; c];
    for j in 0..c {
        for s in 0..ns {
            for v in 0..nv {
                for q in 0..m {
                    let i = ep.flat(s, v, q);
                    dsim[j][i] = dot(&ep.text[j], &l[i]);
                }
            }
        }
    }

    // T-I-T.
    let selected: Vec<usize> = (0..c).map(|j| first_max(&dsim[j])).collect();
    let mut recon_class = Vec::new();
    let mut soft_sum = 0.0;
    let mut hard_sum = 0.0;
    for j in 0..c {
        let e: Vec<f64> = (0..c).map(|k| dot(&l[selected[j]], &ep.text[k])).collect();
        let r = first_max(&e);
        recon_class.push(r);
        hard_sum += dot(&ep.text[j], &ep.text[r]);
        let top = e.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = e.iter().map(|x| ((x - top) / cfg.tau_soft).exp()).collect();
        let z: f64 = w.iter().sum();
        let mut rec = vec![0.0; ep.text[0].len()];
        for k in 0..c {
            for a in 0..rec.len() {
                rec[a] += w[k] / z * ep.text[k][a];
            }
        }
        let n = dot(&rec, &rec).sqrt();
        if n >= 1e-12 {
            soft_sum += dot(&ep.text[j], &rec) / n;
        }
    }
    let hits = (0..c).filter(|&j| recon_class[j] == j).count();

    // Anchors: top-k per (sample, view) block and class.
    let mut is_anchor = vec![false; l.len()];
    for s in 0..ns {
        for v in 0..nv {
            for j in 0..c {
                let block: Vec<f64> = (0..m).map(|q| dsim[j][ep.flat(s, v, q)]).collect();
                for q in top_k(&block, cfg.k) {
                    is_anchor[ep.flat(s, v, q)] = true;
                }
            }
        }
    }
    let anchors: Vec<usize> = (0..l.len()).filter(|&i| is_anchor[i]).collect();

    // I-T-I.
    let mut mid_class = Vec::new();
    let mut retrieved = Vec::new();
    let mut agree = 0.0;
    for &n in &anchors {
        let sample = n / (nv * m);
        let sims: Vec<f64> = (0..c).map(|j| dot(&l[n], &ep.text[j])).collect();
        let mid = first_max(&sims);
        let scope: Vec<usize> = match cfg.retrieval {
            Retrieval::IntraImage => (0..m).map(|q| ep.flat(sample, 0, q)).collect(),
            Retrieval::CrossView => (0..nv)
                .flat_map(|v| (0..m).map(move |q| (v, q)))
                .map(|(v, q)| ep.flat(sample, v, q))
                .collect(),
            Retrieval::AllImages => (0..l.len()).collect(),
        };
        let vals: Vec<f64> = scope.iter().map(|&i| dot(&ep.text[mid], &l[i])).collect();
        let got = scope[first_max(&vals)];
        agree += dot(&l[n], &l[got]);
        mid_class.push(mid);
        retrieved.push(got);
    }

    // Support cross-entropy.
    let mut ce = 0.0;
    for (g, &y) in ep.globals.iter().zip(&ep.labels) {
        let a = adapter(g, p);
        let logits: Vec<f64> = ep.text.iter().map(|t| dot(&a, t) / cfg.tau_ce).collect();
        let top = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = top + logits.iter().map(|z| (z - top).exp()).sum::<f64>().ln();
        ce += lse - logits[y];
    }

    RefOutput {
        selected,
        recon_class,
        mid_class,
        retrieved,
        ce: ce / ep.labels.len() as f64,
        cyc_txt_soft: 1.0 - soft_sum / c as f64,
        cyc_txt_hard: 1.0 - hard_sum / c as f64,
        hard_rate: hits as f64 / c as f64,
        cyc_img: 1.0 - agree / anchors.len() as f64,
        anchors,
    }
}

/// Shape of a random small instance.
#[derive(Debug, Clone, Copy)]
pub struct Shape {
    pub c: usize,
    pub samples: usize,
    pub m: usize,
    pub a: usize,
    pub d: usize,
    pub h: usize,
}

impl Shape {
    pub fn random(rng: &mut ChaCha8Rng) -> Self {
        Self {
            c: rng.random_range(1..=4),
            samples: rng.random_range(1..=6),
            m: rng.random_range(1..=5),
            a: rng.random_range(0..=2),
            d: rng.random_range(2..=8),
            h: rng.random_range(1..=8),
        }
    }
}

fn gaussian_row(d: usize, rng: &mut ChaCha8Rng) -> Vector {
    loop {
        let v: Vector = (0..d)
            .map(|_| StandardNormal.sample(rng))
            .collect();
        if dot(&v, &v) > 1e-4 {
            // Arbitrary positive scale: ingestion must normalize it away.
            let scale = rng.random_range(0.5..3.0);
            return v.iter().map(|x| x * scale).collect();
        }
    }
}

fn matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> FeatureMatrix {
    let data = (0..rows).flat_map(|_| gaussian_row(cols, rng)).collect();
    FeatureMatrix::from_vec(rows, cols, data).unwrap()
}

/// Random bundle of the given shape with Gaussian features.
pub fn random_bundle(shape: Shape, rng: &mut ChaCha8Rng) -> EpisodeBundle {
    let Shape { c, samples, m, a, d, .. } = shape;
    let text = matrix(c, d, rng);
    let support = (0..samples)
        .map(|i| SupportSample {
            label: if i < c { i } else { rng.random_range(0..c) },
            global: gaussian_row(d, rng),
            views: matrix((a + 1) * m, d, rng),
        })
        .collect();
    let query = (0..2)
        .map(|_| QuerySample {
            label: rng.random_range(0..c),
            global: gaussian_row(d, rng),
            patches: matrix(m, d, rng),
        })
        .collect();
    EpisodeBundle::new(text, m, a, support, query, Metadata::default()).unwrap()
}

/// Xavier MLP weights and a non-zero adapter so every path is exercised.
pub fn random_params(shape: Shape, rng: &mut ChaCha8Rng) -> ModelParams {
    let mut p = transform::init_params(shape.d, shape.h, rng.random());
    for w in p.wa.data_mut() {
        *w = rng.random_range(-0.3..0.3);
    }
    p
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
