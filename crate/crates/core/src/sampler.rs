//! Variable-way, variable-shot episode sampling and per-class set
//! representations.

use std::collections::HashSet;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, UrtError};
use crate::math::mean_of;
use crate::rng::UrtRng;
use crate::store::{ClassSamples, FeatureStore, Split};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerPolicy {
    pub n_min: usize,
    pub n_max: usize,
    pub k_max: usize,
    pub q_per_class: usize,
    /// Domain drawn with probability `primary_domain_prob` during training.
    pub primary_domain: u32,
    pub primary_domain_prob: f64,
    /// Seed of the training episode stream.
    pub seed: u64,
}

impl Default for SamplerPolicy {
    fn default() -> Self {
        Self {
            n_min: 3,
            n_max: 8,
            k_max: 10,
            q_per_class: 10,
            primary_domain: 0,
            primary_domain_prob: 0.5,
            seed: 0,
        }
    }
}

impl SamplerPolicy {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(UrtError::Config(m));
        if self.n_min < 2 {
            return fail(format!("sampler.n_min must be >= 2, got {}", self.n_min));
        }
        if self.n_max < self.n_min {
            return fail(format!(
                "sampler.n_max ({}) must be >= sampler.n_min ({})",
                self.n_max, self.n_min
            ));
        }
        if self.k_max < 1 {
            return fail("sampler.k_max must be >= 1".into());
        }
        if self.q_per_class < 1 {
            return fail("sampler.q_per_class must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.primary_domain_prob) {
            return fail(format!(
                "sampler.primary_domain_prob must lie in [0, 1], got {}",
                self.primary_domain_prob
            ));
        }
        Ok(())
    }

    fn usable<'a>(&self, classes: &'a [ClassSamples]) -> Vec<&'a ClassSamples> {
        classes
            .iter()
            .filter(|c| c.sample_ids.len() > self.q_per_class)
            .collect()
    }
}

/// One few-shot task drawn from a single domain.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Episode {
    pub domain_id: u32,
    pub split: Split,
    pub classes: Vec<u64>,
    /// `support[c]` are the support sample ids of `classes[c]`.
    pub support: Vec<Vec<u64>>,
    pub query: Vec<Vec<u64>>,
}

impl Episode {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn support_len(&self) -> usize {
        self.support.iter().map(Vec::len).sum()
    }

    pub fn query_len(&self) -> usize {
        self.query.iter().map(Vec::len).sum()
    }

    /// Checks the episode against the store it is meant for.
    pub fn validate(&self, store: &FeatureStore) -> Result<()> {
        let n = self.classes.len();
        if n == 0 || self.support.len() != n || self.query.len() != n {
            return Err(UrtError::Shape(format!(
                "episode has {n} classes, {} support groups, {} query groups",
                self.support.len(),
                self.query.len()
            )));
        }
        let mut seen = HashSet::new();
        for (c, &class_id) in self.classes.iter().enumerate() {
            if self.support[c].is_empty() || self.query[c].is_empty() {
                return Err(UrtError::Shape(format!(
                    "class {class_id} needs at least one support and one query sample"
                )));
            }
            for &id in self.support[c].iter().chain(&self.query[c]) {
                if !seen.insert(id) {
                    return Err(UrtError::Shape(format!(
                        "sample {id} appears more than once in the episode"
                    )));
                }
                let rec = store.record(id)?;
                if rec.class_id != class_id || rec.domain_id != self.domain_id {
                    return Err(UrtError::Shape(format!(
                        "sample {id} (class {}, domain {}) does not belong to class {class_id} of domain {}",
                        rec.class_id, rec.domain_id, self.domain_id
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Domains of `split` that can host an episode under `policy`.
pub fn eligible_domains(store: &FeatureStore, policy: &SamplerPolicy, split: Split) -> Vec<u32> {
    store
        .domains_in(split)
        .into_iter()
        .filter(|&d| policy.usable(store.classes(split, d)).len() >= policy.n_min)
        .collect()
}

fn require_eligible(
    store: &FeatureStore,
    policy: &SamplerPolicy,
    split: Split,
) -> Result<Vec<u32>> {
    policy.validate()?;
    let eligible = eligible_domains(store, policy, split);
    if eligible.is_empty() {
        return Err(UrtError::Sampling(format!(
            "no domain in split '{split}' has at least {} classes with more than {} samples",
            policy.n_min, policy.q_per_class
        )));
    }
    Ok(eligible)
}

/// Picks a domain (biased toward the primary domain) and samples an episode.
pub fn sample_episode(
    store: &FeatureStore,
    policy: &SamplerPolicy,
    rng: &mut UrtRng,
    split: Split,
) -> Result<Episode> {
    let eligible = require_eligible(store, policy, split)?;
    let others: Vec<u32> = eligible
        .iter()
        .copied()
        .filter(|&d| d != policy.primary_domain)
        .collect();
    let domain = if others.len() == eligible.len() {
        eligible[rng.random_range(0..eligible.len())]
    } else if others.is_empty() || rng.random::<f64>() < policy.primary_domain_prob {
        policy.primary_domain
    } else {
        others[rng.random_range(0..others.len())]
    };
    sample_episode_in_domain(store, policy, rng, split, domain)
}

/// Samples an episode from a uniformly chosen eligible domain.
pub fn sample_episode_uniform_domain(
    store: &FeatureStore,
    policy: &SamplerPolicy,
    rng: &mut UrtRng,
    split: Split,
) -> Result<Episode> {
    let eligible = require_eligible(store, policy, split)?;
    let domain = eligible[rng.random_range(0..eligible.len())];
    sample_episode_in_domain(store, policy, rng, split, domain)
}

/// Samples an episode from a fixed domain.
pub fn sample_episode_in_domain(
    store: &FeatureStore,
    policy: &SamplerPolicy,
    rng: &mut UrtRng,
    split: Split,
    domain: u32,
) -> Result<Episode> {
    policy.validate()?;
    let usable = policy.usable(store.classes(split, domain));
    if usable.len() < policy.n_min {
        return Err(UrtError::Sampling(format!(
            "domain {domain} of split '{split}' has {} classes with more than {} samples, need n_min = {}",
            usable.len(),
            policy.q_per_class,
            policy.n_min
        )));
    }
    let n_hi = policy.n_max.min(usable.len());
    let n = rng.random_range(policy.n_min..=n_hi);
    let picked = index::sample(rng, usable.len(), n);

    let mut classes = Vec::with_capacity(n);
    let mut support = Vec::with_capacity(n);
    let mut query = Vec::with_capacity(n);
    for ci in picked.iter() {
        let class = usable[ci];
        let available = class.sample_ids.len();
        let k_hi = policy.k_max.min(available - policy.q_per_class);
        let k = rng.random_range(1..=k_hi);
        let order = index::sample(rng, available, k + policy.q_per_class);
        let ids: Vec<u64> = order.iter().map(|i| class.sample_ids[i]).collect();
        classes.push(class.class_id);
        support.push(ids[..k].to_vec());
        query.push(ids[k..].to_vec());
    }
    Ok(Episode {
        domain_id: domain,
        split,
        classes,
        support,
        query,
    })
}

/// Per-class support means, both per backbone and concatenated.
#[derive(Debug, Clone, PartialEq)]
pub struct SetReps {
    num_backbones: usize,
    dim: usize,
    /// `per_backbone[c][i]` is `r_i(S_c)`.
    per_backbone: Vec<Vec<Vec<f64>>>,
    /// `universal[c]` is `r(S_c)`.
    universal: Vec<Vec<f64>>,
}

impl SetReps {
    pub fn from_parts(per_backbone: Vec<Vec<Vec<f64>>>) -> Result<Self> {
        let num_backbones = per_backbone.first().map_or(0, Vec::len);
        let dim = per_backbone
            .first()
            .and_then(|c| c.first())
            .map_or(0, Vec::len);
        if num_backbones == 0 || dim == 0 {
            return Err(UrtError::Shape("set representations must be non-empty".into()));
        }
        if per_backbone
            .iter()
            .any(|c| c.len() != num_backbones || c.iter().any(|v| v.len() != dim))
        {
            return Err(UrtError::Shape("ragged set representations".into()));
        }
        let universal = per_backbone.iter().map(|c| c.concat()).collect();
        Ok(Self {
            num_backbones,
            dim,
            per_backbone,
            universal,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.per_backbone.len()
    }

    pub fn num_backbones(&self) -> usize {
        self.num_backbones
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// `r_i(S_c)`.
    pub fn backbone(&self, class: usize, backbone: usize) -> &[f64] {
        &self.per_backbone[class][backbone]
    }

    /// `r(S_c)`.
    pub fn universal(&self, class: usize) -> &[f64] {
        &self.universal[class]
    }

    /// Same shape with every entry zero.
    pub fn zeroed(&self) -> Self {
        Self::from_parts(
            self.per_backbone
                .iter()
                .map(|c| c.iter().map(|v| vec![0.0; v.len()]).collect())
                .collect(),
        )
        .expect("shape preserved")
    }
}

pub fn set_representations(store: &FeatureStore, episode: &Episode) -> Result<SetReps> {
    let m = store.num_backbones();
    let d = store.dim();
    let mut per_class = Vec::with_capacity(episode.num_classes());
    for ids in &episode.support {
        if ids.is_empty() {
            return Err(UrtError::Shape("support class without samples".into()));
        }
        // Canonical order keeps the mean bit-identical under reordering.
        let mut sorted = ids.clone();
        sorted.sort_unstable();
        let rows: Vec<Vec<&[f64]>> = sorted
            .iter()
            .map(|&id| store.backbone_features(id))
            .collect::<Result<_>>()?;
        let means = (0..m)
            .map(|i| mean_of(rows.iter().map(|r| r[i]), d))
            .collect();
        per_class.push(means);
    }
    SetReps::from_parts(per_class)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use crate::store::{generate_synthetic_store, SampleRecord, SplitCounts, SynthConfig};

    fn store() -> FeatureStore {
        generate_synthetic_store(&SynthConfig {
            domains: 4,
            classes_per_domain: SplitCounts {
                train: 8,
                valid: 3,
                test: 5,
            },
            samples_per_class: SplitCounts {
                train: 14,
                valid: 6,
                test: 12,
            },
            dim: 6,
            ..SynthConfig::default()
        })
        .unwrap()
    }

    fn small_policy() -> SamplerPolicy {
        SamplerPolicy {
            n_min: 2,
            n_max: 6,
            k_max: 5,
            q_per_class: 3,
            ..SamplerPolicy::default()
        }
    }

    #[test]
    fn fixed_policy_gives_fixed_shape() {
        let s = store();
        let policy = SamplerPolicy {
            n_min: 5,
            n_max: 5,
            k_max: 1,
            q_per_class: 1,
            ..SamplerPolicy::default()
        };
        let mut rng = seeded(3);
        for _ in 0..200 {
            let ep = sample_episode(&s, &policy, &mut rng, Split::Train).unwrap();
            assert_eq!(ep.num_classes(), 5);
            assert!(ep.support.iter().all(|v| v.len() == 1));
            assert!(ep.query.iter().all(|v| v.len() == 1));
        }
    }

    #[test]
    fn episodes_are_valid_and_disjoint() {
        let s = store();
        let mut rng = seeded(11);
        for _ in 0..1000 {
            let ep = sample_episode(&s, &small_policy(), &mut rng, Split::Train).unwrap();
            ep.validate(&s).unwrap();
            let support: HashSet<u64> = ep.support.iter().flatten().copied().collect();
            assert!(ep.query.iter().flatten().all(|id| !support.contains(id)));
            assert!(ep.query.iter().all(|q| q.len() == 3));
        }
    }

    #[test]
    fn primary_domain_frequency() {
        let s = store();
        let mut rng = seeded(5);
        let trials = 10_000;
        let hits = (0..trials)
            .filter(|_| {
                sample_episode(&s, &small_policy(), &mut rng, Split::Train)
                    .unwrap()
                    .domain_id
                    == 0
            })
            .count();
        let frac = hits as f64 / trials as f64;
        assert!((frac - 0.5).abs() <= 0.02, "primary fraction {frac}");
    }

    #[test]
    fn shots_vary_within_an_episode() {
        let s = store();
        let mut rng = seeded(8);
        let imbalanced = (0..1000).any(|_| {
            let ep = sample_episode(&s, &small_policy(), &mut rng, Split::Train).unwrap();
            ep.support.iter().any(|v| v.len() != ep.support[0].len())
        });
        assert!(imbalanced);
    }

    #[test]
    fn same_rng_state_same_episode() {
        let s = store();
        let a = sample_episode(&s, &small_policy(), &mut seeded(42), Split::Test).unwrap();
        let b = sample_episode(&s, &small_policy(), &mut seeded(42), Split::Test).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn insufficient_classes_is_a_sampling_error() {
        let s = store();
        let policy = SamplerPolicy {
            n_min: 6,
            n_max: 6,
            ..small_policy()
        };
        let err = sample_episode(&s, &policy, &mut seeded(0), Split::Test).unwrap_err();
        assert!(matches!(err, UrtError::Sampling(_)));
        let greedy = SamplerPolicy {
            q_per_class: 12,
            ..small_policy()
        };
        let err = sample_episode_in_domain(&s, &greedy, &mut seeded(0), Split::Test, 1).unwrap_err();
        assert!(err.to_string().contains("more than 12 samples"));
    }

    #[test]
    fn invalid_policy_is_rejected() {
        let s = store();
        let bad = SamplerPolicy {
            n_min: 1,
            ..small_policy()
        };
        assert!(matches!(
            sample_episode(&s, &bad, &mut seeded(0), Split::Train),
            Err(UrtError::Config(_))
        ));
    }

    fn pair_store(a: Vec<f64>, b: Vec<f64>) -> FeatureStore {
        let recs = (0..2)
            .map(|i| SampleRecord {
                sample_id: i,
                domain_id: 0,
                class_id: 0,
                split: Split::Train,
            })
            .collect();
        let block0 = [a.clone(), b.clone()].concat();
        let block1 = [b, a].concat();
        FeatureStore::new(2, 2, 1, false, recs, vec![block0, block1]).unwrap()
    }

    fn one_class_episode(support: Vec<u64>) -> Episode {
        Episode {
            domain_id: 0,
            split: Split::Train,
            classes: vec![0],
            support: vec![support],
            query: vec![vec![]],
        }
    }

    #[test]
    fn set_rep_examples() {
        let s = pair_store(vec![1.0, -2.0], vec![-1.0, 2.0]);
        let single = set_representations(&s, &one_class_episode(vec![1])).unwrap();
        assert_eq!(single.backbone(0, 0), s.feature(0, 1).unwrap());
        assert_eq!(single.backbone(0, 1), s.feature(1, 1).unwrap());

        let both = set_representations(&s, &one_class_episode(vec![0, 1])).unwrap();
        assert_eq!(both.backbone(0, 0), &[0.0, 0.0]);

        let s = pair_store(vec![0.3, 0.7], vec![1.5, -0.25]);
        let reps = set_representations(&s, &one_class_episode(vec![0, 1])).unwrap();
        let concat_mean = mean_of(
            [
                s.universal_representation(0).unwrap(),
                s.universal_representation(1).unwrap(),
            ]
            .iter()
            .map(Vec::as_slice),
            4,
        );
        assert_eq!(reps.universal(0), concat_mean.as_slice());
    }

    #[test]
    fn set_reps_ignore_support_order() {
        let s = store();
        let mut ep = sample_episode(&s, &small_policy(), &mut seeded(1), Split::Train).unwrap();
        let base = set_representations(&s, &ep).unwrap();
        for ids in &mut ep.support {
            ids.reverse();
        }
        assert_eq!(set_representations(&s, &ep).unwrap(), base);
    }
}
