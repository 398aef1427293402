//! How close a configuration is to changing one of its discrete selections.
#![allow(dead_code)]

use cccdfsl::cycle::{self, CycleConfig, Evaluation};
use cccdfsl::episode::Episode;

fn gap(values: &[f64], rank: usize) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| b.total_cmp(a));
    if rank >= v.len() {
        f64::INFINITY
    } else {
        v[rank - 1] - v[rank]
    }
}

/// Smallest separation between a chosen and a rejected candidate in any selection.
pub fn selection_margin(ep: &Episode, eval: &Evaluation, cfg: &CycleConfig) -> f64 {
    let idx = &ep.corpus.index_map;
    let sim = &eval.sim;
    let mut margin = f64::INFINITY;
    for j in 0..sim.rows() {
        margin = margin.min(gap(sim.row(j), 1));
        for b in 0..idx.blocks() {
            margin = margin.min(gap(&sim.row(j)[idx.block_range(b)], cfg.k));
        }
    }
    for &n in &eval.anchors.indices {
        let column: Vec<f64> = (0..sim.rows()).map(|j| sim.get(j, n)).collect();
        margin = margin.min(gap(&column, 1));
        let hop = cycle::iti_hop(n, &ep.text, &eval.mlp.rows, idx, cfg.retrieval);
        let scope = cycle::retrieval_scope(n, idx, cfg.retrieval);
        margin = margin.min(gap(&sim.row(hop.mid_class)[scope], 1));
    }
    margin
}
