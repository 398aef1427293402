//! Synthetic episodes with planted class-signal patches.
//!
//! Class text directions are unit vectors with a fixed pairwise cosine,
//! embedded in a random orthonormal frame. Every image carries exactly `s`
//! signal patches, `normalize(strength·t_class + noise)`, and `M − s` isotropic
//! noise patches; augmented views jitter each patch of the original image.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::episode::{EpisodeBundle, Metadata, Planted, QuerySample, SupportSample};
use crate::error::{Error, Result};
use crate::linalg::{self, FeatureMatrix, NORM_EPS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub classes: usize,
    pub dim: usize,
    pub patches: usize,
    pub augmentations: usize,
    /// Support samples per class.
    pub shots: usize,
    /// Query samples per class.
    pub queries: usize,
    pub signal_patches: usize,
    pub signal_strength: f64,
    /// Norm scale of the additive noise on signal patches (coordinates are
    /// drawn with standard deviation `noise_sigma / √d`).
    pub noise_sigma: f64,
    /// Cosine similarity between distinct class text directions.
    pub distractor_overlap: f64,
    /// Norm scale of the per-patch jitter that creates augmented views.
    pub view_jitter_sigma: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            classes: 5,
            dim: 32,
            patches: 16,
            augmentations: 2,
            shots: 5,
            queries: 15,
            signal_patches: 2,
            signal_strength: 0.8,
            noise_sigma: 0.5,
            distractor_overlap: 0.3,
            view_jitter_sigma: 0.1,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::SpecInfeasible(m));
        if self.classes == 0 || self.dim == 0 || self.patches == 0 || self.shots == 0 {
            return fail("classes, dim, patches and shots must be positive".into());
        }
        if self.classes > self.dim {
            return fail(format!(
                "{} class directions do not fit in dimension {}",
                self.classes, self.dim
            ));
        }
        if self.signal_patches >= self.patches {
            return fail(format!(
                "signal patches ({}) must be fewer than patches ({})",
                self.signal_patches, self.patches
            ));
        }
        if !(self.signal_strength > 0.0 && self.signal_strength <= 1.0) {
            return fail(format!("signal strength {} outside (0, 1]", self.signal_strength));
        }
        if !(self.noise_sigma >= 0.0) || !(self.view_jitter_sigma >= 0.0) {
            return fail("noise and jitter scales must be non-negative".into());
        }
        if !(0.0..1.0).contains(&self.distractor_overlap) {
            return fail(format!(
                "overlap {} outside [0, 1)",
                self.distractor_overlap
            ));
        }
        Ok(())
    }

    /// Same family with a different seed.
    pub fn with_seed(&self, seed: u64) -> Self {
        Self {
            seed,
            ..self.clone()
        }
    }
}

/// Unit class directions with pairwise cosine `overlap`.
///
/// Rows of the Cholesky factor of `(1−ρ)I + ρ11ᵀ`, expressed in a random
/// orthonormal frame of `R^d`.
fn class_directions(c: usize, d: usize, overlap: f64, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let gram = |i: usize, j: usize| if i == j { 1.0 } else { overlap };
    let mut chol = vec![vec![0.0; c]; c];
    for i in 0..c {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| chol[i][k] * chol[j][k]).sum();
            chol[i][j] = if i == j {
                (gram(i, i) - s).sqrt()
            } else {
                (gram(i, j) - s) / chol[j][j]
            };
        }
    }
    let mut frame: Vec<Vec<f64>> = Vec::with_capacity(c);
    while frame.len() < c {
        let mut v = gaussian(d, rng);
        for q in &frame {
            let p = linalg::dot(&v, q);
            v.iter_mut().zip(q).for_each(|(x, y)| *x -= p * y);
        }
        if let Ok(u) = linalg::l2_normalize(&v, 1e-8) {
            frame.push(u);
        }
    }
    chol.iter()
        .map(|coef| {
            let mut t = vec![0.0; d];
            for (a, q) in coef.iter().zip(&frame) {
                t.iter_mut().zip(q).for_each(|(x, y)| *x += a * y);
            }
            t
        })
        .collect()
}

fn gaussian(d: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..d).map(|_| StandardNormal.sample(rng)).collect()
}

fn perturbed(base: &[f64], sigma: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let scale = sigma / (base.len() as f64).sqrt();
    base.iter()
        .map(|&b| {
            let g: f64 = StandardNormal.sample(rng);
            b + scale * g
        })
        .collect()
}

fn unit_or_resample(mut v: Vec<f64>, rng: &mut ChaCha8Rng) -> Vec<f64> {
    loop {
        if let Ok(u) = linalg::l2_normalize(&v, 1e-8) {
            return u;
        }
        v = gaussian(v.len(), rng);
    }
}

struct Image {
    patches: Vec<Vec<f64>>,
    planted: Vec<usize>,
}

fn draw_image(spec: &SynthSpec, text: &[f64], rng: &mut ChaCha8Rng) -> Image {
    let mut planted = index::sample(rng, spec.patches, spec.signal_patches).into_vec();
    planted.sort_unstable();
    let patches = (0..spec.patches)
        .map(|p| {
            if planted.binary_search(&p).is_ok() {
                let signal: Vec<f64> = text.iter().map(|t| spec.signal_strength * t).collect();
                let v = perturbed(&signal, spec.noise_sigma, rng);
                unit_or_resample(v, rng)
            } else {
                let v = gaussian(spec.dim, rng);
                unit_or_resample(v, rng)
            }
        })
        .collect();
    Image { patches, planted }
}

fn global_of(patches: &[Vec<f64>]) -> Result<Vec<f64>> {
    let d = patches[0].len();
    let mut mean = vec![0.0; d];
    for p in patches {
        mean.iter_mut().zip(p).for_each(|(m, x)| *m += x);
    }
    linalg::l2_normalize(&mean, NORM_EPS)
}

/// Generates a bundle; fully determined by `spec` (including its seed).
pub fn gen_synthetic(spec: &SynthSpec) -> Result<EpisodeBundle> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let text = class_directions(spec.classes, spec.dim, spec.distractor_overlap, &mut rng);
    let mut planted = Planted {
        support: Vec::new(),
        query: Vec::new(),
    };

    let mut support = Vec::with_capacity(spec.classes * spec.shots);
    for class in 0..spec.classes {
        for _ in 0..spec.shots {
            let img = draw_image(spec, &text[class], &mut rng);
            let mut rows = img.patches.clone();
            for _ in 0..spec.augmentations {
                for p in &img.patches {
                    let v = perturbed(p, spec.view_jitter_sigma, &mut rng);
                    rows.push(unit_or_resample(v, &mut rng));
                }
            }
            support.push(SupportSample {
                label: class,
                global: global_of(&img.patches)?,
                views: FeatureMatrix::from_rows(&rows)?,
            });
            planted.support.push(img.planted);
        }
    }

    let mut query = Vec::with_capacity(spec.classes * spec.queries);
    for class in 0..spec.classes {
        for _ in 0..spec.queries {
            let img = draw_image(spec, &text[class], &mut rng);
            query.push(QuerySample {
                label: class,
                global: global_of(&img.patches)?,
                patches: FeatureMatrix::from_rows(&img.patches)?,
            });
            planted.query.push(img.planted);
        }
    }

    let metadata = Metadata {
        class_names: Some((0..spec.classes).map(|c| format!("class_{c}")).collect()),
        provenance: Some(serde_json::json!({
            "generator": "synthetic",
            "spec": spec,
        })),
        planted: Some(planted),
        ..Default::default()
    };
    EpisodeBundle::new(
        FeatureMatrix::from_rows(&text)?,
        spec.patches,
        spec.augmentations,
        support,
        query,
        metadata,
    )
}
