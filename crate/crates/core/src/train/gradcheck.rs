//! Analytic gradients against central differences on random small
//! problems.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::grad::{finite_diff_gradients, loss_and_gradients};
use crate::error::{Result, UrtError};
use crate::layer::init_params;
use crate::proto::DEFAULT_SCALE;
use crate::rng::derived;
use crate::sampler::Episode;
use crate::store::{FeatureStore, SampleRecord, Split};

/// Finite-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Floor of the relative-error denominator.
pub const FD_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckTrial {
    pub num_backbones: usize,
    pub dim: usize,
    pub key_dim: usize,
    pub heads: usize,
    pub num_classes: usize,
    pub shots: Vec<usize>,
    pub lambda: f64,
    pub max_relative_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub seed: u64,
    pub trials: Vec<GradcheckTrial>,
    pub max_relative_error: f64,
}

/// One random problem with `m ≤ 4, d ≤ 8, l ≤ 6, H ≤ 3, N ≤ 4`, one to
/// three shots per class, Gaussian features and non-zero biases.
pub fn gradcheck_trial(seed: u64, trial: u64) -> Result<GradcheckTrial> {
    let mut rng = derived(seed, &[trial]);
    let m = rng.random_range(1..=4);
    let d = rng.random_range(2..=8);
    let l = rng.random_range(1..=6);
    let heads = rng.random_range(1..=3);
    let n = rng.random_range(2..=4);
    let lambda = [0.0, 0.1, 1.0][rng.random_range(0..3)];

    let mut records = Vec::new();
    let mut support = Vec::new();
    let mut query = Vec::new();
    let mut shots = Vec::new();
    for c in 0..n as u64 {
        let k = rng.random_range(1..=3);
        let q = rng.random_range(1..=2);
        let ids: Vec<u64> = (records.len() as u64..(records.len() + k + q) as u64).collect();
        for &id in &ids {
            records.push(SampleRecord {
                sample_id: id,
                domain_id: 0,
                class_id: c,
                split: Split::Train,
            });
        }
        shots.push(k);
        support.push(ids[..k].to_vec());
        query.push(ids[k..].to_vec());
    }
    let features: Vec<Vec<f64>> = (0..m)
        .map(|_| {
            (0..records.len() * d)
                .map(|_| rng.sample::<f64, _>(StandardNormal))
                .collect()
        })
        .collect();
    let store = FeatureStore::new(m, d, 1, false, records, features)?;
    let episode = Episode {
        domain_id: 0,
        split: Split::Train,
        classes: (0..n as u64).collect(),
        support,
        query,
    };

    let mut params = init_params(m, d, l, heads, &mut rng)?;
    for h in &mut params.heads {
        for v in h.bq.iter_mut().chain(h.bk.iter_mut()) {
            *v = rng.random_range(-0.5..0.5);
        }
    }
    let (_, analytic) = loss_and_gradients(&params, &store, &episode, lambda, DEFAULT_SCALE)?;
    let numeric = finite_diff_gradients(&params, &store, &episode, lambda, DEFAULT_SCALE, FD_STEP)?;
    Ok(GradcheckTrial {
        num_backbones: m,
        dim: d,
        key_dim: l,
        heads,
        num_classes: n,
        shots,
        lambda,
        max_relative_error: analytic.max_relative_error(&numeric, FD_FLOOR)?,
    })
}

pub fn gradcheck(seed: u64, trials: usize) -> Result<GradcheckReport> {
    if trials == 0 {
        return Err(UrtError::Config("gradcheck needs at least one trial".into()));
    }
    let trials = (0..trials as u64)
        .map(|t| gradcheck_trial(seed, t))
        .collect::<Result<Vec<_>>>()?;
    let max_relative_error = trials
        .iter()
        .map(|t| t.max_relative_error)
        .fold(0.0, f64::max);
    Ok(GradcheckReport {
        seed,
        trials,
        max_relative_error,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn random_configs_agree() {
        for seed in 0..3 {
            let report = gradcheck(seed, 20).unwrap();
            assert!(
                report.max_relative_error <= 1e-4,
                "seed {seed}: {:?}",
                report.trials.iter().map(|t| t.max_relative_error).collect::<Vec<_>>()
            );
            assert!(report.trials.iter().any(|t| t.shots.iter().any(|&k| k != t.shots[0])));
        }
    }
}
