//! Synthetic annotated embeddings with known structure.
//!
//! Each class owns a unit-norm anchor; anchors are mutually orthogonal.
//! A sample is its class anchor plus isotropic Gaussian noise. Samples that
//! receive a secondary motif sit on the segment between their primary and
//! secondary anchors (`SECONDARY_BLEND` of the way toward the secondary).
//! Red-flag samples get twice the noise, canonical samples half.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{AnnotationRecord, DatasetManifest, EmbeddingStore, MotifId, RepresentativenessTag};
use crate::error::{Error, Result};

/// Weight of the secondary anchor in a blended sample.
pub const SECONDARY_BLEND: f64 = 0.3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthParams {
    pub n_classes: usize,
    pub dim: usize,
    pub per_class: usize,
    pub sm_rate: f64,
    pub rf_rate: f64,
    pub can_rate: f64,
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthParams {
    /// Twenty classes, with label rates matching the curated dataset:
    /// 1.5% of images with secondary motifs, 5.6% red flag, 10.8% canonical.
    fn default() -> Self {
        Self {
            n_classes: 20,
            dim: 64,
            per_class: 50,
            sm_rate: 0.015,
            rf_rate: 0.056,
            can_rate: 0.108,
            noise: 0.1,
            seed: 1,
        }
    }
}

impl SynthParams {
    pub fn validate(&self) -> Result<()> {
        for (name, r) in [("sm_rate", self.sm_rate), ("rf_rate", self.rf_rate), ("can_rate", self.can_rate)] {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::Config(format!("{name} must be in [0, 1], got {r}")));
            }
        }
        if self.rf_rate + self.can_rate > 1.0 {
            return Err(Error::Config("rf_rate + can_rate must not exceed 1".into()));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::Config(format!("noise must be >= 0, got {}", self.noise)));
        }
        if self.n_classes == 0 || self.per_class == 0 {
            return Err(Error::Config("n_classes and per_class must be >= 1".into()));
        }
        if self.dim < self.n_classes {
            return Err(Error::Config(format!(
                "dim ({}) must be >= n_classes ({}) for orthogonal anchors",
                self.dim, self.n_classes
            )));
        }
        if self.sm_rate > 0.0 && self.n_classes < 2 {
            return Err(Error::Config("secondary motifs need at least 2 classes".into()));
        }
        Ok(())
    }
}

/// Orthonormal anchors by Gram-Schmidt over Gaussian draws.
fn anchors(n: usize, dim: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(n);
    while out.len() < n {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        for a in &out {
            let p: f64 = v.iter().zip(a).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(a).for_each(|(x, y)| *x -= p * y);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            v.iter_mut().for_each(|x| *x /= norm);
            out.push(v);
        }
    }
    out
}

pub fn generate_synthetic(params: &SynthParams) -> Result<(DatasetManifest, EmbeddingStore)> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let anchors = anchors(params.n_classes, params.dim, &mut rng);
    let width = (params.n_classes * params.per_class).to_string().len().max(5);

    let mut records = Vec::with_capacity(params.n_classes * params.per_class);
    let mut embeddings = Vec::with_capacity(records.capacity());
    for class in 0..params.n_classes {
        for _ in 0..params.per_class {
            let id = format!("img_{:0width$}", records.len());
            let u: f64 = rng.random();
            let tag = if u < params.rf_rate {
                RepresentativenessTag::RedFlag
            } else if u < params.rf_rate + params.can_rate {
                RepresentativenessTag::Canonical
            } else {
                RepresentativenessTag::Standard
            };
            let secondary = if rng.random::<f64>() < params.sm_rate {
                let other = rng.random_range(0..params.n_classes - 1);
                Some(if other >= class { other + 1 } else { other })
            } else {
                None
            };
            let scale = params.noise
                * match tag {
                    RepresentativenessTag::RedFlag => 2.0,
                    RepresentativenessTag::Standard => 1.0,
                    RepresentativenessTag::Canonical => 0.5,
                };
            let features: Vec<f32> = (0..params.dim)
                .map(|j| {
                    let base = match secondary {
                        Some(s) => (1.0 - SECONDARY_BLEND) * anchors[class][j] + SECONDARY_BLEND * anchors[s][j],
                        None => anchors[class][j],
                    };
                    let eps: f64 = rng.sample(StandardNormal);
                    (base + scale * eps) as f32
                })
                .collect();
            records.push(AnnotationRecord::new(
                id.clone(),
                [MotifId(class)],
                secondary.map(MotifId),
                tag,
            )?);
            embeddings.push((id, features));
        }
    }
    let names = (0..params.n_classes).map(|c| format!("motif_{c:02}")).collect();
    let manifest = DatasetManifest::new(names, records)?;
    let store = EmbeddingStore::from_records(params.dim, embeddings)?;
    Ok((manifest, store))
}
