//! Per-episode full-batch gradient descent and the multi-episode benchmark.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cycle::{CycleConfig, LossBreakdown};
use crate::episode::{Episode, EpisodeBundle};
use crate::error::{Divergence, Error, Result};
use crate::metrics;
use crate::synth::{self, SynthSpec};
use crate::transform::{self, GradBundle, ModelParams};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    /// MLP hidden width; the bundle dimension when unset.
    pub hidden: Option<usize>,
    pub cycle: CycleConfig,
    /// When set, bundles with a different augmentation count are refused.
    pub expected_augmentations: Option<usize>,
    pub seed: u64,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            lr: 0.05,
            momentum: 0.9,
            hidden: None,
            cycle: CycleConfig::default(),
            expected_augmentations: None,
            seed: 0,
            log_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.cycle.validate()?;
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidConfig(format!("lr must be >= 0, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidConfig(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        if self.hidden == Some(0) {
            return Err(Error::InvalidConfig("hidden width must be positive".into()));
        }
        Ok(())
    }
}

/// Per-dataset cycle weights `(lambda1, lambda2)`.
pub fn dataset_lambdas(name: &str) -> Option<(f64, f64)> {
    match name.to_ascii_lowercase().as_str() {
        "chestx" => Some((3.0, 0.5)),
        "isic" => Some((3.0, 2.0)),
        "eurosat" => Some((1.5, 0.2)),
        "cropdiseases" => Some((1.0, 1.5)),
        _ => None,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: LossBreakdown,
    pub a_g: f64,
    pub a_l_transformed: f64,
}

/// One record per epoch, taken before that epoch's update.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn len(&self) -> usize {
        self.epochs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.epochs.is_empty()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,ce,cyc_txt,cyc_img,total,hard_rate,A_g,A_l_transformed\n");
        for r in &self.epochs {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                r.epoch,
                r.loss.ce,
                r.loss.cyc_txt,
                r.loss.cyc_img,
                r.loss.total,
                r.loss.hard_cycle_rate,
                r.a_g,
                r.a_l_transformed
            ));
        }
        out
    }
}

pub fn train_episode(bundle: &EpisodeBundle, cfg: &TrainConfig) -> Result<(ModelParams, TrainHistory)> {
    train_episode_with(bundle, cfg, |_| {})
}

/// Trains on the support set, calling `on_epoch` after each record.
pub fn train_episode_with(
    bundle: &EpisodeBundle,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<(ModelParams, TrainHistory)> {
    cfg.validate()?;
    if let Some(a) = cfg.expected_augmentations {
        if a != bundle.augmentations() {
            return Err(Error::InvalidConfig(format!(
                "bundle has {} augmented views, configuration expects {a}",
                bundle.augmentations()
            )));
        }
    }
    let ep = Episode::new(bundle);
    let d = bundle.dim();
    let mut params = transform::init_params(d, cfg.hidden.unwrap_or(d), cfg.seed);
    let mut velocity = GradBundle::zeros_like(&params);
    let mut history = TrainHistory {
        epochs: Vec::with_capacity(cfg.epochs),
    };
    for epoch in 0..cfg.epochs {
        let diverged = |history: TrainHistory| {
            Error::DivergenceDetected(Box::new(Divergence { epoch, history }))
        };
        let (eval, grad) = match transform::grad_and_eval(&ep, &params, &cfg.cycle) {
            Ok(v) => v,
            Err(Error::NearZeroNorm { .. } | Error::NonFiniteValue(_)) => return Err(diverged(history)),
            Err(e) => return Err(e),
        };
        if !eval.breakdown.is_finite() || !grad.is_finite() {
            return Err(diverged(history));
        }
        let align = metrics::alignment_from_eval(&ep, &params, &eval)?;
        let record = EpochRecord {
            epoch,
            loss: eval.breakdown,
            a_g: align.a_g,
            a_l_transformed: align.a_l_transformed,
        };
        on_epoch(&record);
        history.epochs.push(record);
        velocity.accumulate(cfg.momentum, &grad);
        params.apply_step(&velocity, cfg.lr);
    }
    if !params.is_finite() {
        return Err(Error::DivergenceDetected(Box::new(Divergence {
            epoch: cfg.epochs,
            history,
        })));
    }
    Ok((params, history))
}

/// Episodes to benchmark over.
#[derive(Debug, Clone)]
pub enum EpisodeSource {
    /// Episode `i` is generated with seed `spec.seed + i`.
    Synthetic(SynthSpec),
    /// Episode `i` is bundle `i`.
    Bundles(Vec<EpisodeBundle>),
}

/// Outcome of training one configuration on one episode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunOutcome {
    pub accuracy: f64,
    pub a_g: f64,
    pub a_l: f64,
    pub a_l_transformed: f64,
    pub final_loss: LossBreakdown,
    /// Fraction of final anchors on planted positions, for synthetic episodes.
    pub anchor_precision: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeOutcome {
    pub episode: usize,
    pub seed: u64,
    pub full: RunOutcome,
    pub ce_only: Option<RunOutcome>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanCi {
    pub mean: f64,
    /// Half-width of the normal-approximation 95% interval.
    pub ci95: f64,
}

impl MeanCi {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        if values.len() < 2 {
            return Self { mean, ci95: 0.0 };
        }
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        Self {
            mean,
            ci95: 1.96 * (var / n).sqrt(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchSummary {
    pub episodes: Vec<EpisodeOutcome>,
    pub full: MeanCi,
    pub ce_only: Option<MeanCi>,
    /// Paired per-episode accuracy difference, full minus CE-only.
    pub delta: Option<MeanCi>,
}

impl BenchSummary {
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
        let mut out = String::from(
            "episode,seed,acc_full,acc_ce_only,delta,A_l_transformed_full,A_l_transformed_ce_only,hard_rate_full,anchor_precision_full\n",
        );
        for e in &self.episodes {
            let ce = e.ce_only.as_ref();
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                e.episode,
                e.seed,
                e.full.accuracy,
                opt(ce.map(|c| c.accuracy)),
                opt(ce.map(|c| e.full.accuracy - c.accuracy)),
                e.full.a_l_transformed,
                opt(ce.map(|c| c.a_l_transformed)),
                e.full.final_loss.hard_cycle_rate,
                opt(e.full.anchor_precision),
            ));
        }
        out
    }
}

/// Trains and evaluates one configuration on one bundle.
pub fn run_once(bundle: &EpisodeBundle, cfg: &TrainConfig) -> Result<RunOutcome> {
    let (params, _) = train_episode(bundle, cfg)?;
    let ep = Episode::new(bundle);
    let eval = crate::cycle::evaluate(&ep, &params, &cfg.cycle)?;
    let align = metrics::alignment_from_eval(&ep, &params, &eval)?;
    let anchor_precision = bundle
        .metadata()
        .planted
        .as_ref()
        .filter(|p| p.support.len() == bundle.support().len())
        .map(|p| metrics::anchor_precision(&ep, &eval, &p.support));
    Ok(RunOutcome {
        accuracy: metrics::accuracy_on(&ep, &params)?,
        a_g: align.a_g,
        a_l: align.a_l,
        a_l_transformed: align.a_l_transformed,
        final_loss: eval.breakdown,
        anchor_precision,
    })
}

/// Mean query accuracy over episodes, optionally paired with a CE-only run.
///
/// Episode `i` trains with seed `cfg.seed + i`; episodes run in parallel and
/// results are collected in episode order.
pub fn run_benchmark(
    source: &EpisodeSource,
    cfg: &TrainConfig,
    episodes: usize,
    compare: bool,
) -> Result<BenchSummary> {
    if episodes == 0 {
        return Err(Error::InvalidConfig("at least one episode is required".into()));
    }
    cfg.validate()?;
    let count = match source {
        EpisodeSource::Synthetic(spec) => {
            spec.validate()?;
            episodes
        }
        EpisodeSource::Bundles(b) if b.is_empty() => {
            return Err(Error::InvalidConfig("no bundles to benchmark".into()))
        }
        EpisodeSource::Bundles(b) => episodes.min(b.len()),
    };
    let outcomes: Vec<EpisodeOutcome> = (0..count)
        .into_par_iter()
        .map(|i| {
            let bundle = match source {
                EpisodeSource::Synthetic(spec) => {
                    synth::gen_synthetic(&spec.with_seed(spec.seed.wrapping_add(i as u64)))?
                }
                EpisodeSource::Bundles(b) => b[i].clone(),
            };
            let seed = cfg.seed.wrapping_add(i as u64);
            let run_cfg = TrainConfig { seed, ..*cfg };
            let full = run_once(&bundle, &run_cfg)?;
            let ce_only = if compare {
                let ce_cfg = TrainConfig {
                    cycle: cfg.cycle.ce_only(),
                    ..run_cfg
                };
                Some(run_once(&bundle, &ce_cfg)?)
            } else {
                None
            };
            Ok(EpisodeOutcome {
                episode: i,
                seed,
                full,
                ce_only,
            })
        })
        .collect::<Result<_>>()?;

    let acc: Vec<f64> = outcomes.iter().map(|o| o.full.accuracy).collect();
    let (ce_only, delta) = if compare {
        let ce: Vec<f64> = outcomes
            .iter()
            .map(|o| o.ce_only.expect("compare run").accuracy)
            .collect();
        let d: Vec<f64> = acc.iter().zip(&ce).map(|(a, c)| a - c).collect();
        (Some(MeanCi::of(&ce)), Some(MeanCi::of(&d)))
    } else {
        (None, None)
    };
    Ok(BenchSummary {
        full: MeanCi::of(&acc),
        episodes: outcomes,
        ce_only,
        delta,
    })
}
