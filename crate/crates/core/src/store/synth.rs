//! Synthetic multi-domain backbone simulator.
//!
//! There is one backbone per domain. Backbone `t` sees a class-specific unit
//! signature for samples from domain `t`; every other backbone only sees a
//! fixed domain-level direction, so it carries no class information for
//! that domain. Picking the right backbone per task is therefore what
//! separates good from chance-level accuracy.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{FeatureStore, SampleRecord, Split};
use crate::error::{Result, UrtError};
use crate::math::{l2_normalize, NORM_EPS};
use crate::rng::{derived, UrtRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitCounts {
    pub train: usize,
    pub valid: usize,
    pub test: usize,
}

impl SplitCounts {
    pub fn get(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Valid => self.valid,
            Split::Test => self.test,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub domains: u32,
    pub classes_per_domain: SplitCounts,
    pub samples_per_class: SplitCounts,
    pub dim: usize,
    /// Noise on the in-domain (class-discriminative) backbone.
    pub sigma_in: f64,
    /// Noise on cross-domain backbones.
    pub sigma_out: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            domains: 4,
            classes_per_domain: SplitCounts {
                train: 20,
                valid: 10,
                test: 10,
            },
            samples_per_class: SplitCounts {
                train: 30,
                valid: 30,
                test: 60,
            },
            dim: 64,
            sigma_in: 0.1,
            sigma_out: 0.3,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(UrtError::Config(m));
        if self.domains < 2 {
            return fail(format!("synth.domains must be >= 2, got {}", self.domains));
        }
        if self.dim < 2 {
            return fail(format!("synth.dim must be >= 2, got {}", self.dim));
        }
        if !(self.sigma_in > 0.0 && self.sigma_in.is_finite()) {
            return fail(format!("synth.sigma_in must be > 0, got {}", self.sigma_in));
        }
        if !(self.sigma_out > 0.0 && self.sigma_out.is_finite()) {
            return fail(format!("synth.sigma_out must be > 0, got {}", self.sigma_out));
        }
        for split in Split::ALL {
            if self.classes_per_domain.get(split) > 0 && self.samples_per_class.get(split) == 0 {
                return fail(format!(
                    "synth.samples_per_class.{split} must be >= 1 when the split has classes"
                ));
            }
        }
        if self.classes_per_domain.train == 0 {
            return fail("synth.classes_per_domain.train must be >= 1".into());
        }
        Ok(())
    }

    fn classes_total(&self) -> usize {
        self.classes_per_domain.train + self.classes_per_domain.valid + self.classes_per_domain.test
    }
}

fn random_unit(rng: &mut UrtRng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let u = l2_normalize(&v, NORM_EPS);
        if u.iter().any(|x| *x != 0.0) {
            return u;
        }
    }
}

fn noisy_unit(rng: &mut UrtRng, center: &[f64], sigma: f64) -> Vec<f64> {
    let v: Vec<f64> = center
        .iter()
        .map(|c| c + sigma * rng.sample::<f64, _>(StandardNormal))
        .collect();
    l2_normalize(&v, NORM_EPS)
}

/// Generates a normalized store with `m = D` backbones.
pub fn generate_synthetic_store(cfg: &SynthConfig) -> Result<FeatureStore> {
    cfg.validate()?;
    let domains = cfg.domains as usize;
    let d = cfg.dim;
    let per_domain = cfg.classes_total();

    let mut sig_rng = derived(cfg.seed, &[0]);
    // signatures[t][j]: class j of domain t, as seen by backbone t.
    let signatures: Vec<Vec<Vec<f64>>> = (0..domains)
        .map(|_| (0..per_domain).map(|_| random_unit(&mut sig_rng, d)).collect())
        .collect();
    // domain_dirs[i][t]: what backbone i outputs (before noise) for domain t.
    let domain_dirs: Vec<Vec<Vec<f64>>> = (0..domains)
        .map(|_| (0..domains).map(|_| random_unit(&mut sig_rng, d)).collect())
        .collect();

    let mut records = Vec::new();
    let mut features: Vec<Vec<f64>> = vec![Vec::new(); domains];
    let mut next_id = 0u64;
    for t in 0..domains {
        let mut class_offset = 0usize;
        for split in Split::ALL {
            let n_classes = cfg.classes_per_domain.get(split);
            let n_samples = cfg.samples_per_class.get(split);
            for j in class_offset..class_offset + n_classes {
                let class_id = (t * per_domain + j) as u64;
                let mut rng = derived(cfg.seed, &[1, t as u64, j as u64]);
                for _ in 0..n_samples {
                    records.push(SampleRecord {
                        sample_id: next_id,
                        domain_id: t as u32,
                        class_id,
                        split,
                    });
                    next_id += 1;
                    for (i, block) in features.iter_mut().enumerate() {
                        let v = if i == t {
                            noisy_unit(&mut rng, &signatures[t][j], cfg.sigma_in)
                        } else {
                            noisy_unit(&mut rng, &domain_dirs[i][t], cfg.sigma_out)
                        };
                        block.extend_from_slice(&v);
                    }
                }
            }
            class_offset += n_classes;
        }
    }

    Ok(
        FeatureStore::new(domains, d, cfg.domains, true, records, features)?
            .with_generator(cfg.clone()),
    )
}
