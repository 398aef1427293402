//! Trainable parameters: the bias-free two-layer patch MLP and the residual
//! global adapter, with forward evaluation and exact reverse-mode gradients.
//!
//! The gradient treats every discrete choice made by the cycles (the T-I-T
//! argmax, anchor top-k, I-T-I retrieval) as a constant and differentiates
//! through the similarity values of the chosen pairs.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cycle::{self, CycleConfig, Evaluation, LossBreakdown, TitMode};
use crate::episode::{Episode, EpisodeBundle};
use crate::error::{Error, Result};
use crate::linalg::{self, FeatureMatrix, NORM_EPS};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"CCPM";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    /// d×h input projection.
    pub w1: FeatureMatrix,
    /// h×d output projection.
    pub w2: FeatureMatrix,
    /// d×d residual adapter on global features.
    pub wa: FeatureMatrix,
}

/// Gradients with the same shapes as [`ModelParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradBundle {
    pub d_w1: FeatureMatrix,
    pub d_w2: FeatureMatrix,
    pub d_wa: FeatureMatrix,
}

impl ModelParams {
    pub fn new(w1: FeatureMatrix, w2: FeatureMatrix, wa: FeatureMatrix) -> Result<Self> {
        let (d, h) = (w1.rows(), w1.cols());
        if w2.rows() != h || w2.cols() != d || wa.rows() != d || wa.cols() != d {
            return Err(Error::DimensionMismatch(format!(
                "params W1 {}x{}, W2 {}x{}, Wa {}x{}",
                w1.rows(),
                w1.cols(),
                w2.rows(),
                w2.cols(),
                wa.rows(),
                wa.cols()
            )));
        }
        if !(w1.is_finite() && w2.is_finite() && wa.is_finite()) {
            return Err(Error::NonFiniteValue("params".into()));
        }
        Ok(Self { w1, w2, wa })
    }

    pub fn dim(&self) -> usize {
        self.w1.rows()
    }

    pub fn hidden(&self) -> usize {
        self.w1.cols()
    }

    /// `self -= lr · step`.
    pub fn apply_step(&mut self, step: &GradBundle, lr: f64) {
        axpy(self.w1.data_mut(), -lr, step.d_w1.data());
        axpy(self.w2.data_mut(), -lr, step.d_w2.data());
        axpy(self.wa.data_mut(), -lr, step.d_wa.data());
    }

    pub fn is_finite(&self) -> bool {
        self.w1.is_finite() && self.w2.is_finite() && self.wa.is_finite()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let n = self.w1.data().len() + self.w2.data().len() + self.wa.data().len();
        let mut out = Vec::with_capacity(16 + 8 * n);
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dim() as u32).to_le_bytes());
        out.extend_from_slice(&(self.hidden() as u32).to_le_bytes());
        for m in [&self.w1, &self.w2, &self.wa] {
            for v in m.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 {
            return Err(Error::DimensionMismatch("checkpoint header truncated".into()));
        }
        if bytes[..4] != CHECKPOINT_MAGIC {
            let mut found = [0u8; 4];
            found.copy_from_slice(&bytes[..4]);
            return Err(Error::BadMagic {
                expected: CHECKPOINT_MAGIC,
                found,
            });
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
        let version = word(4);
        if version != CHECKPOINT_VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let (d, h) = (word(8) as usize, word(12) as usize);
        let n = d
            .checked_mul(h)
            .and_then(|dh| dh.checked_mul(2))
            .and_then(|x| x.checked_add(d.checked_mul(d)?))
            .ok_or_else(|| Error::DimensionMismatch("checkpoint dimensions overflow".into()))?;
        if bytes.len() != 16 + 8 * n {
            return Err(Error::DimensionMismatch(format!(
                "checkpoint for d={d}, h={h} needs {} bytes, got {}",
                16 + 8 * n,
                bytes.len()
            )));
        }
        let mut vals = bytes[16..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
        let mut take = |r: usize, c: usize| FeatureMatrix::from_vec(r, c, vals.by_ref().take(r * c).collect());
        let w1 = take(d, h)?;
        let w2 = take(h, d)?;
        let wa = take(d, d)?;
        Self::new(w1, w2, wa)
    }
}

pub fn save_params(p: &ModelParams, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, p.to_bytes())?;
    Ok(())
}

pub fn load_params(path: impl AsRef<Path>) -> Result<ModelParams> {
    ModelParams::from_bytes(&fs::read(path)?)
}

impl GradBundle {
    pub fn zeros_like(p: &ModelParams) -> Self {
        Self {
            d_w1: FeatureMatrix::zeros(p.w1.rows(), p.w1.cols()),
            d_w2: FeatureMatrix::zeros(p.w2.rows(), p.w2.cols()),
            d_wa: FeatureMatrix::zeros(p.wa.rows(), p.wa.cols()),
        }
    }

    /// `self = decay · self + g`.
    pub fn accumulate(&mut self, decay: f64, g: &GradBundle) {
        for (dst, src) in [
            (self.d_w1.data_mut(), g.d_w1.data()),
            (self.d_w2.data_mut(), g.d_w2.data()),
            (self.d_wa.data_mut(), g.d_wa.data()),
        ] {
            dst.iter_mut().zip(src).for_each(|(a, b)| *a = decay * *a + b);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.d_w1.is_finite() && self.d_w2.is_finite() && self.d_wa.is_finite()
    }

    /// All coordinates in a fixed order (W1, W2, Wa).
    pub fn flatten(&self) -> Vec<f64> {
        [self.d_w1.data(), self.d_w2.data(), self.d_wa.data()].concat()
    }
}

fn axpy(dst: &mut [f64], a: f64, x: &[f64]) {
    dst.iter_mut().zip(x).for_each(|(d, v)| *d += a * v);
}

/// Xavier-uniform MLP weights and a zero adapter.
pub fn init_params(d: usize, h: usize, seed: u64) -> ModelParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bound = (6.0 / (d + h) as f64).sqrt();
    let mut uniform = |r: usize, c: usize| {
        let data = (0..r * c).map(|_| rng.random_range(-bound..=bound)).collect();
        FeatureMatrix::from_vec(r, c, data).expect("shape")
    };
    let w1 = uniform(d, h);
    let w2 = uniform(h, d);
    ModelParams {
        w1,
        w2,
        wa: FeatureMatrix::zeros(d, d),
    }
}

/// Transformed corpus plus what the backward pass needs.
#[derive(Debug, Clone)]
pub struct MlpOutput {
    /// Unit-norm output rows.
    pub rows: FeatureMatrix,
    /// Rows whose MLP output was degenerate and were passed through unchanged.
    pub passthrough: Vec<bool>,
    hidden: FeatureMatrix,
    norms: Vec<f64>,
}

impl MlpOutput {
    pub fn passthrough_count(&self) -> usize {
        self.passthrough.iter().filter(|&&p| p).count()
    }
}

/// `normalize(ReLU(x·W1)·W2)` per row; degenerate outputs fall back to `x`.
pub fn mlp_forward(raw: &FeatureMatrix, p: &ModelParams) -> Result<MlpOutput> {
    if raw.cols() != p.dim() {
        return Err(Error::DimensionMismatch(format!(
            "corpus has {} columns, params expect {}",
            raw.cols(),
            p.dim()
        )));
    }
    let mut hidden = raw.matmul(&p.w1)?;
    hidden.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
    let mut rows = hidden.matmul(&p.w2)?;
    let mut norms = Vec::with_capacity(rows.rows());
    let mut passthrough = Vec::with_capacity(rows.rows());
    for i in 0..rows.rows() {
        let row = rows.row_mut(i);
        let n = linalg::norm(row);
        if n < NORM_EPS || !n.is_finite() {
            row.copy_from_slice(raw.row(i));
            passthrough.push(true);
        } else {
            row.iter_mut().for_each(|v| *v /= n);
            passthrough.push(false);
        }
        norms.push(n);
    }
    Ok(MlpOutput {
        rows,
        passthrough,
        hidden,
        norms,
    })
}

/// Pre-normalization adapter output `g + g·Wa`.
pub(crate) fn adapter_raw(g: &[f64], wa: &FeatureMatrix) -> Vec<f64> {
    let mut out = g.to_vec();
    for (gi, row) in g.iter().zip(wa.iter_rows()) {
        if *gi != 0.0 {
            axpy(&mut out, *gi, row);
        }
    }
    out
}

/// `normalize(g + g·Wa)`.
pub fn adapt_global(g: &[f64], p: &ModelParams) -> Result<Vec<f64>> {
    if g.len() != p.dim() {
        return Err(Error::DimensionMismatch(format!(
            "global of length {} for d={}",
            g.len(),
            p.dim()
        )));
    }
    linalg::l2_normalize(&adapter_raw(g, &p.wa), NORM_EPS)
}

/// Total loss and its gradient for a bundle.
pub fn grad_total(
    bundle: &EpisodeBundle,
    p: &ModelParams,
    cfg: &CycleConfig,
) -> Result<(LossBreakdown, GradBundle)> {
    let ep = Episode::new(bundle);
    grad_episode(&ep, p, cfg)
}

/// Total loss and gradient on a prepared episode.
pub fn grad_episode(
    ep: &Episode,
    p: &ModelParams,
    cfg: &CycleConfig,
) -> Result<(LossBreakdown, GradBundle)> {
    let (eval, grad) = grad_and_eval(ep, p, cfg)?;
    Ok((eval.breakdown, grad))
}

/// Gradient together with the evaluation it was taken at.
pub fn grad_and_eval(ep: &Episode, p: &ModelParams, cfg: &CycleConfig) -> Result<(Evaluation, GradBundle)> {
    let eval = cycle::evaluate(ep, p, cfg)?;
    let grad = gradient_of(ep, p, cfg, &eval, [1.0, cfg.lambda1, cfg.lambda2]);
    Ok((eval, grad))
}

/// Unweighted gradients of the three loss terms, in the order CE, T-I-T, I-T-I.
pub fn grad_terms(ep: &Episode, p: &ModelParams, cfg: &CycleConfig) -> Result<[GradBundle; 3]> {
    let eval = cycle::evaluate(ep, p, cfg)?;
    Ok([
        gradient_of(ep, p, cfg, &eval, [1.0, 0.0, 0.0]),
        gradient_of(ep, p, cfg, &eval, [0.0, 1.0, 0.0]),
        gradient_of(ep, p, cfg, &eval, [0.0, 0.0, 1.0]),
    ])
}

fn gradient_of(
    ep: &Episode,
    p: &ModelParams,
    cfg: &CycleConfig,
    eval: &Evaluation,
    [w_ce, w_txt, w_img]: [f64; 3],
) -> GradBundle {
    let mut grad = GradBundle::zeros_like(p);
    if w_ce != 0.0 {
        ce_backward(ep, p, cfg, w_ce, &mut grad.d_wa);
    }

    let l = &eval.mlp.rows;
    let mut d_l = FeatureMatrix::zeros(l.rows(), l.cols());
    let mut touched = false;
    if w_txt != 0.0 && cfg.tit_mode == TitMode::Soft {
        tit_backward(ep, cfg, eval, w_txt, &mut d_l);
        touched = true;
    }
    if w_img != 0.0 {
        let v = eval.anchors.indices.len() as f64;
        for (&n, hop) in eval.anchors.indices.iter().zip(&eval.retrievals) {
            let m = hop.retrieved;
            // d(x_n · x_m): each endpoint receives the other.
            let (xn, xm) = (l.row(n).to_vec(), l.row(m).to_vec());
            axpy(d_l.row_mut(n), -w_img / v, &xm);
            axpy(d_l.row_mut(m), -w_img / v, &xn);
        }
        touched = true;
    }
    if touched {
        mlp_backward(&ep.corpus.raw, p, &eval.mlp, &d_l, &mut grad);
    }
    grad
}

/// Gradient of the soft T-I-T loss with respect to the corpus rows.
fn tit_backward(ep: &Episode, cfg: &CycleConfig, eval: &Evaluation, weight: f64, d_l: &mut FeatureMatrix) {
    let text = &ep.text;
    let c = text.rows();
    let tit = &eval.tit;
    let soft = tit.soft.as_ref().expect("soft mode keeps reconstructions");
    for j in 0..c {
        let r = soft.recon.row(j);
        let rn = soft.recon_norms[j];
        if rn < NORM_EPS {
            continue;
        }
        let u: Vec<f64> = r.iter().map(|x| x / rn).collect();
        let tj = text.row(j);
        let ut = linalg::dot(&u, tj);
        // d(T_j·u)/dr = (T_j − u (u·T_j)) / ‖r‖
        let d_r: Vec<f64> = tj.iter().zip(&u).map(|(t, ui)| (t - ui * ut) / rn).collect();
        let probs = soft.probs.row(j);
        let g: Vec<f64> = (0..c).map(|k| linalg::dot(text.row(k), &d_r)).collect();
        let pg = linalg::dot(probs, &g);
        // loss = 1 − mean_j T_j·u_j, so each class contributes −1/C.
        let scale = -weight / c as f64 / cfg.tau_soft;
        let row = d_l.row_mut(tit.selected[j]);
        for k in 0..c {
            let d_e = scale * probs[k] * (g[k] - pg);
            axpy(row, d_e, text.row(k));
        }
    }
}

/// Backpropagates row gradients of the normalized MLP output into W1 and W2.
fn mlp_backward(
    raw: &FeatureMatrix,
    p: &ModelParams,
    out: &MlpOutput,
    d_l: &FeatureMatrix,
    grad: &mut GradBundle,
) {
    let mut d_y = FeatureMatrix::zeros(d_l.rows(), d_l.cols());
    for i in 0..d_l.rows() {
        if out.passthrough[i] {
            continue;
        }
        let g = d_l.row(i);
        if g.iter().all(|v| *v == 0.0) {
            continue;
        }
        let u = out.rows.row(i);
        let ug = linalg::dot(u, g);
        let n = out.norms[i];
        d_y.row_mut(i)
            .iter_mut()
            .zip(g.iter().zip(u))
            .for_each(|(dst, (gi, ui))| *dst = (gi - ui * ug) / n);
    }
    let hidden = &out.hidden;
    grad.d_w2
        .view_mut()
        .scaled_add(1.0, &hidden.view().t().dot(&d_y.view()));
    let mut d_pre = d_y.matmul_t(&p.w2).expect("shapes agree");
    d_pre
        .data_mut()
        .iter_mut()
        .zip(hidden.data())
        .for_each(|(dz, z)| {
            if *z <= 0.0 {
                *dz = 0.0;
            }
        });
    grad.d_w1
        .view_mut()
        .scaled_add(1.0, &raw.view().t().dot(&d_pre.view()));
}

/// Gradient of the mean support cross-entropy with respect to Wa.
fn ce_backward(ep: &Episode, p: &ModelParams, cfg: &CycleConfig, weight: f64, d_wa: &mut FeatureMatrix) {
    let text = &ep.text;
    let s = ep.support_globals.rows() as f64;
    for (g, &label) in ep.support_globals.iter_rows().zip(&ep.support_labels) {
        let a = adapter_raw(g, &p.wa);
        let an = linalg::norm(&a);
        let q: Vec<f64> = a.iter().map(|x| x / an).collect();
        let logits: Vec<f64> = text.iter_rows().map(|t| linalg::dot(&q, t)).collect();
        let probs = linalg::softmax_unchecked(&logits, cfg.tau_ce);
        let mut d_q = vec![0.0; q.len()];
        for (k, t) in text.iter_rows().enumerate() {
            let d_logit = (probs[k] - if k == label { 1.0 } else { 0.0 }) / cfg.tau_ce;
            axpy(&mut d_q, weight * d_logit / s, t);
        }
        let qd = linalg::dot(&q, &d_q);
        let d_a: Vec<f64> = d_q.iter().zip(&q).map(|(dq, qi)| (dq - qi * qd) / an).collect();
        // a = g + g·Wa  ⇒  ∂a_k/∂Wa[i][k] = g_i
        for (i, gi) in g.iter().enumerate() {
            if *gi != 0.0 {
                axpy(d_wa.row_mut(i), *gi, &d_a);
            }
        }
    }
}
