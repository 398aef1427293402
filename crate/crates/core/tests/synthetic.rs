use cccdfsl::cycle::{self, CycleConfig};
use cccdfsl::episode::Episode;
use cccdfsl::metrics;
use cccdfsl::synth::{self, SynthSpec};
use cccdfsl::transform::{self, ModelParams};
use cccdfsl::FeatureMatrix;

fn noise_free() -> SynthSpec {
    SynthSpec {
        classes: 4,
        // Wide enough that the seven random patches in each global stay
        // far below the planted signal in every class direction.
        dim: 64,
        patches: 9,
        augmentations: 1,
        shots: 3,
        queries: 10,
        signal_patches: 2,
        signal_strength: 1.0,
        noise_sigma: 0.0,
        distractor_overlap: 0.0,
        view_jitter_sigma: 0.0,
        seed: 3,
    }
}

/// `ReLU(x) − ReLU(−x) = x`: an exact identity through the MLP.
fn identity_mlp(d: usize) -> ModelParams {
    let mut w1 = FeatureMatrix::zeros(d, 2 * d);
    let mut w2 = FeatureMatrix::zeros(2 * d, d);
    for i in 0..d {
        w1.set(i, i, 1.0);
        w1.set(i, d + i, -1.0);
        w2.set(i, i, 1.0);
        w2.set(d + i, i, -1.0);
    }
    ModelParams::new(w1, w2, FeatureMatrix::zeros(d, d)).unwrap()
}

#[test]
fn noise_free_queries_are_all_classified() {
    for seed in 0..10 {
        let b = synth::gen_synthetic(&noise_free().with_seed(seed)).unwrap();
        let p = transform::init_params(64, 64, seed);
        assert_eq!(metrics::episode_accuracy(&b, &p).unwrap(), 1.0, "seed {seed}");
    }
}

#[test]
fn noise_free_cycles_close_on_planted_patches() {
    for seed in 0..10 {
        let b = synth::gen_synthetic(&noise_free().with_seed(seed)).unwrap();
        let params = identity_mlp(64);
        let cfg = CycleConfig::default();
        let ep = Episode::new(&b);
        let eval = cycle::evaluate(&ep, &params, &cfg).unwrap();
        assert_eq!(eval.breakdown.hard_cycle_rate, 1.0);
        assert_eq!(eval.breakdown.passthrough, 0);
        let planted = &b.metadata().planted.as_ref().unwrap().support;
        for step in metrics::trace_of(&ep, &eval).tit {
            assert_eq!(b.support()[step.patch.sample].label, step.class);
            assert!(planted[step.patch.sample].contains(&step.patch.patch), "seed {seed}: {step:?}");
        }
    }
}

#[test]
fn query_accuracy_beats_chance_by_four_sigma() {
    let spec = SynthSpec::default();
    let episodes = 400;
    let mut total = 0.0;
    for i in 0..episodes {
        let b = synth::gen_synthetic(&spec.with_seed(10_000 + i)).unwrap();
        let p = transform::init_params(spec.dim, spec.dim, i);
        total += metrics::episode_accuracy(&b, &p).unwrap();
    }
    let mean = total / episodes as f64;
    let chance = 1.0 / spec.classes as f64;
    let n = (episodes as usize * spec.queries * spec.classes) as f64;
    let sigma = (chance * (1.0 - chance) / n).sqrt();
    assert!(mean > chance + 4.0 * sigma, "mean {mean}, threshold {}", chance + 4.0 * sigma);
}

#[test]
fn generated_bundles_round_trip() {
    let b = synth::gen_synthetic(&SynthSpec::default()).unwrap();
    let bytes = b.to_bytes().unwrap();
    let back = cccdfsl::EpisodeBundle::from_bytes(&bytes).unwrap();
    assert_eq!(back.to_bytes().unwrap(), bytes);
    assert_eq!(back.metadata(), b.metadata());
}
