//! Recomputes the cycle losses from nothing but an exported trace.
#![allow(dead_code)]

use cccdfsl::cycle::{CycleConfig, LossBreakdown, TitMode};
use cccdfsl::metrics::CycleTrace;
use cccdfsl::FeatureMatrix;

#[derive(Debug, Clone, Copy)]
pub struct TraceLosses {
    pub cyc_txt: f64,
    pub cyc_txt_hard: f64,
    pub cyc_img: f64,
    pub hard_rate: f64,
}

pub fn recompute(trace: &CycleTrace, text: &FeatureMatrix, cfg: &CycleConfig) -> TraceLosses {
    let c = trace.tit.len() as f64;
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let mut hard = 0.0;
    let mut soft = 0.0;
    let mut hits = 0;
    for step in &trace.tit {
        let t = text.row(step.class);
        hard += dot(t, text.row(step.recon_class));
        hits += usize::from(step.recon_class == step.class);
        let top = step.reverse_sims.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = step.reverse_sims.iter().map(|e| ((e - top) / cfg.tau_soft).exp()).collect();
        let z: f64 = w.iter().sum();
        let mut rec = vec![0.0; text.cols()];
        for (k, wk) in w.iter().enumerate() {
            rec.iter_mut().zip(text.row(k)).for_each(|(r, x)| *r += wk / z * x);
        }
        let n = dot(&rec, &rec).sqrt();
        if n >= 1e-12 {
            soft += dot(t, &rec) / n;
        }
    }
    let img: f64 = trace.iti.iter().map(|s| s.sim).sum();
    let clamp = |v: f64| v.clamp(0.0, 2.0);
    let cyc_txt_hard = clamp(1.0 - hard / c);
    TraceLosses {
        cyc_txt: match cfg.tit_mode {
            TitMode::Soft => clamp(1.0 - soft / c),
            TitMode::HardMetricOnly => cyc_txt_hard,
        },
        cyc_txt_hard,
        cyc_img: clamp(1.0 - img / trace.iti.len() as f64),
        hard_rate: hits as f64 / c,
    }
}

/// Largest absolute difference between trace-derived and reported values.
pub fn max_deviation(r: &TraceLosses, b: &LossBreakdown, cfg: &CycleConfig) -> f64 {
    let total = b.ce + cfg.lambda1 * r.cyc_txt + cfg.lambda2 * r.cyc_img;
    [
        r.cyc_txt - b.cyc_txt,
        r.cyc_txt_hard - b.cyc_txt_hard,
        r.cyc_img - b.cyc_img,
        r.hard_rate - b.hard_cycle_rate,
        total - b.total,
    ]
    .iter()
    .map(|v| v.abs())
    .fold(0.0, f64::max)
}
