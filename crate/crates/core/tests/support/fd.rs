//! Central finite differences of the total loss against the analytic gradient.
//!
//! Each loss term is differenced on its own and the weighted sum taken after,
//! so a large cross-entropy does not swamp small cycle gradients in rounding.
#![allow(dead_code)]

use cccdfsl::cycle::{self, CycleConfig, Evaluation};
use cccdfsl::episode::{Episode, EpisodeBundle};
use cccdfsl::transform::{self, ModelParams};

pub const STEP: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-4;
pub const MIN_MAGNITUDE: f64 = 1e-8;

#[derive(Debug, Clone, Default)]
pub struct FdReport {
    pub checked: usize,
    /// Coordinates whose ±step perturbation changed a discrete selection.
    pub skipped: usize,
    pub failures: Vec<String>,
    pub max_rel_err: f64,
}

impl FdReport {
    pub fn ok(&self) -> bool {
        self.failures.is_empty() && self.checked > 0
    }

    pub fn merge(&mut self, other: FdReport) {
        self.checked += other.checked;
        self.skipped += other.skipped;
        self.failures.extend(other.failures);
        self.max_rel_err = self.max_rel_err.max(other.max_rel_err);
    }
}

fn selections(e: &Evaluation) -> (Vec<usize>, Vec<usize>, Vec<usize>, Vec<(usize, usize)>, Vec<bool>) {
    (
        e.tit.selected.clone(),
        e.tit.recon_class.clone(),
        e.anchors.indices.clone(),
        e.retrievals.iter().map(|h| (h.mid_class, h.retrieved)).collect(),
        e.mlp.passthrough.clone(),
    )
}

fn param_slice(p: &mut ModelParams, which: usize) -> &mut [f64] {
    match which {
        0 => p.w1.data_mut(),
        1 => p.w2.data_mut(),
        _ => p.wa.data_mut(),
    }
}

/// Checks every parameter coordinate. The straight-through gradient treats
/// selections as constants, so coordinates whose perturbation flips one are
/// counted in `skipped` rather than compared.
pub fn check(bundle: &EpisodeBundle, params: &ModelParams, cfg: &CycleConfig) -> FdReport {
    let ep = Episode::new(bundle);
    let base = cycle::evaluate(&ep, params, cfg).unwrap();
    let base_sel = selections(&base);
    let (_, grad) = transform::grad_episode(&ep, params, cfg).unwrap();
    let analytic = [grad.d_w1.data(), grad.d_w2.data(), grad.d_wa.data()];
    let names = ["W1", "W2", "Wa"];

    let mut report = FdReport::default();
    for which in 0..3 {
        for i in 0..analytic[which].len() {
            let eval_at = |delta: f64| {
                let mut p = params.clone();
                param_slice(&mut p, which)[i] += delta;
                cycle::evaluate(&ep, &p, cfg).unwrap()
            };
            let plus = eval_at(STEP);
            let minus = eval_at(-STEP);
            if selections(&plus) != base_sel || selections(&minus) != base_sel {
                report.skipped += 1;
                continue;
            }
            let (p, m) = (plus.breakdown, minus.breakdown);
            let slope = |a: f64, b: f64| (a - b) / (2.0 * STEP);
            let numeric = slope(p.ce, m.ce)
                + cfg.lambda1 * slope(p.cyc_txt, m.cyc_txt)
                + cfg.lambda2 * slope(p.cyc_img, m.cyc_img);
            let a = analytic[which][i];
            if a.abs() <= MIN_MAGNITUDE {
                continue;
            }
            report.checked += 1;
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs());
            report.max_rel_err = report.max_rel_err.max(rel);
            if rel >= REL_TOL {
                report.failures.push(format!(
                    "{}[{i}]: analytic {a:e}, numeric {numeric:e}, rel {rel:e}",
                    names[which]
                ));
            }
        }
    }
    report
}
