#[path = "support/reference.rs"]
mod reference;

use cccdfsl::cycle::{self, CycleConfig, Retrieval, TitMode};
use cccdfsl::episode::Episode;
use rand::Rng;
use reference::{RefEpisode, RefParams, Shape};

const TOL: f64 = 1e-12;

fn random_config(rng: &mut impl Rng) -> CycleConfig {
    CycleConfig {
        lambda1: rng.random_range(0.0..4.0),
        lambda2: rng.random_range(0.0..4.0),
        k: rng.random_range(1..=6),
        tau_ce: rng.random_range(0.01..1.0),
        tau_soft: rng.random_range(0.02..1.0),
        ..Default::default()
    }
}

#[test]
fn matches_loop_reference_on_random_instances() {
    let mut rng = reference::rng(20_240);
    for case in 0..100 {
        let shape = Shape::random(&mut rng);
        let bundle = reference::random_bundle(shape, &mut rng);
        let params = reference::random_params(shape, &mut rng);
        let base = random_config(&mut rng);
        let ep = Episode::new(&bundle);
        let rep = RefEpisode::from_bundle(&bundle);
        let rp = RefParams::from(&params);
        for retrieval in Retrieval::ALL {
            for tit_mode in [TitMode::Soft, TitMode::HardMetricOnly] {
                let cfg = CycleConfig { retrieval, tit_mode, ..base };
                let got = cycle::evaluate(&ep, &params, &cfg).unwrap();
                let want = reference::evaluate(&rep, &rp, &cfg);
                let ctx = format!("case {case} {shape:?} {retrieval} {tit_mode}");
                assert_eq!(got.tit.selected, want.selected, "{ctx}");
                assert_eq!(got.tit.recon_class, want.recon_class, "{ctx}");
                assert_eq!(got.anchors.indices, want.anchors, "{ctx}");
                let mids: Vec<usize> = got.retrievals.iter().map(|h| h.mid_class).collect();
                let hits: Vec<usize> = got.retrievals.iter().map(|h| h.retrieved).collect();
                assert_eq!(mids, want.mid_class, "{ctx}");
                assert_eq!(hits, want.retrieved, "{ctx}");
                let b = got.breakdown;
                assert!((b.ce - want.ce).abs() < TOL, "{ctx}: ce {} vs {}", b.ce, want.ce);
                assert!((b.cyc_txt - want.cyc_txt(tit_mode)).abs() < TOL, "{ctx}");
                assert!((b.cyc_txt_hard - want.cyc_txt_hard).abs() < TOL, "{ctx}");
                assert!((b.cyc_img - want.cyc_img).abs() < TOL, "{ctx}");
                assert!((b.total - want.total(&cfg)).abs() < TOL, "{ctx}");
                assert_eq!(b.hard_cycle_rate, want.hard_rate, "{ctx}");
                assert_eq!(b.anchors, want.anchors.len(), "{ctx}");
            }
        }
    }
}

#[test]
fn free_functions_agree_with_the_pipeline() {
    let mut rng = reference::rng(77);
    for _ in 0..30 {
        let shape = Shape::random(&mut rng);
        let bundle = reference::random_bundle(shape, &mut rng);
        let params = reference::random_params(shape, &mut rng);
        let cfg = random_config(&mut rng);
        let ep = Episode::new(&bundle);
        let eval = cycle::evaluate(&ep, &params, &cfg).unwrap();
        let l = &eval.mlp.rows;
        let idx = &ep.corpus.index_map;

        let sim = cycle::tit_similarity(&ep.text, l).unwrap();
        assert_eq!(sim, eval.sim);
        let lstar = l.select_rows(&cycle::tit_select(&sim));
        let (loss, rate) = cycle::tit_loss(&ep.text, &lstar, &cfg).unwrap();
        assert!((loss - eval.breakdown.cyc_txt).abs() < TOL);
        assert_eq!(rate, eval.breakdown.hard_cycle_rate);

        let anchors = cycle::anchor_select(&sim, idx, cfg.k);
        assert_eq!(anchors, eval.anchors);
        for (&n, hop) in anchors.indices.iter().zip(&eval.retrievals) {
            assert_eq!(cycle::iti_hop(n, &ep.text, l, idx, cfg.retrieval), *hop);
        }
        let img = cycle::iti_loss(&anchors, l, &ep.text, idx, cfg.retrieval).unwrap();
        assert!((img - eval.breakdown.cyc_img).abs() < TOL);
        assert_eq!(cycle::total_loss(&bundle, &params, &cfg).unwrap(), eval.breakdown);
    }
}
