//! Episodic training of the layer over frozen backbone features.

pub mod grad;
pub mod gradcheck;
pub mod model;
pub mod optim;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, UrtError};
use crate::layer::{init_params, Ablation, UrtParams};
use crate::proto::{episode_accuracy, DEFAULT_SCALE};
use crate::rng::derived;
use crate::sampler::{eligible_domains, sample_episode, sample_episode_uniform_domain, SamplerPolicy};
use crate::store::{FeatureStore, Split};

pub use grad::{finite_diff_gradients, loss_and_gradients, GradientSet};
pub use gradcheck::{gradcheck, GradcheckReport, GradcheckTrial};
pub use model::{load_model, save_model, Checkpoint, TrainedModel, MODEL_FORMAT_VERSION};
pub use optim::{cosine_lr, sgd_step, Sgd};

const STREAM_INIT: u64 = 1;
const STREAM_EPISODES: u64 = 2;
const STREAM_VALIDATION: u64 = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub episodes: usize,
    pub lr0: f64,
    pub lambda: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    /// Multiplier on cosine logits.
    pub scale: f64,
    pub heads: usize,
    pub key_dim: usize,
    /// Seed of parameter initialization and validation tasks.
    pub seed: u64,
    /// Validate every this many episodes; 0 disables validation.
    pub val_every: usize,
    pub val_tasks: usize,
    pub log_every: usize,
    pub policy: SamplerPolicy,
    pub ablation: Ablation,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            episodes: 2000,
            lr0: 0.01,
            lambda: 0.1,
            weight_decay: 1e-5,
            momentum: 0.0,
            scale: DEFAULT_SCALE,
            heads: 2,
            key_dim: 1024,
            seed: 0,
            val_every: 500,
            val_tasks: 60,
            log_every: 100,
            policy: SamplerPolicy::default(),
            ablation: Ablation::None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(UrtError::Config(m));
        if self.episodes < 1 {
            return fail("train.episodes must be >= 1".into());
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return fail(format!("train.lr0 must be > 0, got {}", self.lr0));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return fail(format!("train.lambda must be >= 0, got {}", self.lambda));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return fail(format!(
                "train.weight_decay must be >= 0, got {}",
                self.weight_decay
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail(format!("train.momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return fail(format!("train.scale must be > 0, got {}", self.scale));
        }
        if self.heads < 1 || self.key_dim < 1 {
            return fail(format!(
                "train.heads and train.key_dim must be >= 1, got {} and {}",
                self.heads, self.key_dim
            ));
        }
        self.policy.validate()
    }

    /// Regularization weight actually used, after the ablation.
    pub fn effective_lambda(&self) -> f64 {
        if self.ablation == Ablation::NoReg {
            0.0
        } else {
            self.lambda
        }
    }
}

/// Per-episode training record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub episode: usize,
    pub lr: f64,
    pub cross_entropy: f64,
    pub penalty: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub episodes: Vec<EpisodeLog>,
    /// `(episodes completed, mean validation accuracy)`.
    pub validation: Vec<(usize, f64)>,
}

impl TrainHistory {
    /// Mean cross-entropy over episodes `range`.
    pub fn mean_cross_entropy(&self, range: std::ops::Range<usize>) -> f64 {
        let slice = &self.episodes[range];
        slice.iter().map(|e| e.cross_entropy).sum::<f64>() / slice.len().max(1) as f64
    }
}

/// Mean query accuracy over `tasks` validation episodes drawn from uniformly
/// chosen domains. Task `j` uses its own rng stream, so the result does not
/// depend on the thread count.
pub fn validation_accuracy(
    params: &UrtParams,
    store: &FeatureStore,
    policy: &SamplerPolicy,
    tasks: usize,
    seed: u64,
) -> Result<f64> {
    let accs = (0..tasks)
        .into_par_iter()
        .map(|j| {
            let mut rng = derived(seed, &[STREAM_VALIDATION, j as u64]);
            let ep = sample_episode_uniform_domain(store, policy, &mut rng, Split::Valid)?;
            episode_accuracy(params, store, &ep)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(accs.iter().sum::<f64>() / tasks.max(1) as f64)
}

pub fn train(store: &FeatureStore, cfg: &TrainConfig) -> Result<TrainedModel> {
    train_with_history(store, cfg).map(|(model, _)| model)
}

/// Sample → forward → loss and gradients → SGD step, `cfg.episodes` times.
pub fn train_with_history(
    store: &FeatureStore,
    cfg: &TrainConfig,
) -> Result<(TrainedModel, TrainHistory)> {
    cfg.validate()?;
    let mut params = init_params(
        store.num_backbones(),
        store.dim(),
        cfg.key_dim,
        cfg.heads,
        &mut derived(cfg.seed, &[STREAM_INIT]),
    )?
    .with_ablation(cfg.ablation);
    let lambda = cfg.effective_lambda();
    let validate = cfg.val_every > 0
        && cfg.val_tasks > 0
        && !eligible_domains(store, &cfg.policy, Split::Valid).is_empty();
    if cfg.val_every > 0 && !validate {
        log::warn!("no usable validation split; skipping validation");
    }

    let mut episode_rng = derived(cfg.policy.seed, &[STREAM_EPISODES]);
    let mut optimizer = Sgd::new(cfg.momentum);
    let mut history = TrainHistory::default();
    let mut best: Option<Checkpoint> = None;

    for step in 0..cfg.episodes {
        let episode = sample_episode(store, &cfg.policy, &mut episode_rng, Split::Train)
            .map_err(|e| e.context(format!("training episode {step}")))?;
        let (loss, mut grads) = loss_and_gradients(&params, store, &episode, lambda, cfg.scale)
            .map_err(|e| e.context(format!("training episode {step}")))?;
        grads.mask(cfg.ablation);
        let lr = cosine_lr(step, cfg.episodes, cfg.lr0);
        optimizer.step(&mut params, &grads, lr, cfg.weight_decay)?;
        history.episodes.push(EpisodeLog {
            episode: step,
            lr,
            cross_entropy: loss.cross_entropy,
            penalty: loss.penalty,
            total: loss.total,
        });

        let done = step + 1;
        if cfg.log_every > 0 && done % cfg.log_every == 0 {
            let window = &history.episodes[done.saturating_sub(cfg.log_every)..];
            let mean = window.iter().map(|e| e.total).sum::<f64>() / window.len() as f64;
            log::info!("episode {done} lr {lr:.6} mean_loss {mean:.6}");
        }
        if validate && done % cfg.val_every == 0 {
            let acc = validation_accuracy(&params, store, &cfg.policy, cfg.val_tasks, cfg.seed)?;
            log::info!("episode {done} validation_accuracy {acc:.4}");
            history.validation.push((done, acc));
            if best.as_ref().is_none_or(|b| acc > b.val_accuracy) {
                best = Some(Checkpoint {
                    episode: done,
                    val_accuracy: acc,
                    params: params.clone(),
                });
            }
        }
    }

    let tail = cfg.episodes.min(100);
    let final_train_loss = history.episodes[cfg.episodes - tail..]
        .iter()
        .map(|e| e.total)
        .sum::<f64>()
        / tail as f64;
    let model = TrainedModel::new(params, cfg.clone(), store, final_train_loss, best);
    Ok((model, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::{generate_synthetic_store, SplitCounts, SynthConfig};

    fn small_store() -> FeatureStore {
        generate_synthetic_store(&SynthConfig {
            domains: 3,
            classes_per_domain: SplitCounts {
                train: 5,
                valid: 3,
                test: 3,
            },
            samples_per_class: SplitCounts {
                train: 10,
                valid: 8,
                test: 8,
            },
            dim: 8,
            ..SynthConfig::default()
        })
        .unwrap()
    }

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            episodes: 60,
            key_dim: 8,
            val_every: 20,
            val_tasks: 6,
            policy: SamplerPolicy {
                n_min: 2,
                n_max: 3,
                k_max: 4,
                q_per_class: 3,
                ..SamplerPolicy::default()
            },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn rejects_zero_episodes() {
        let cfg = TrainConfig {
            episodes: 0,
            ..small_cfg()
        };
        assert!(matches!(train(&small_store(), &cfg), Err(UrtError::Config(_))));
    }

    #[test]
    fn deterministic_and_thread_independent() {
        let store = small_store();
        let (a, ha) = train_with_history(&store, &small_cfg()).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let (b, hb) = pool.install(|| train_with_history(&store, &small_cfg())).unwrap();
        assert_eq!(a, b);
        assert_eq!(ha, hb);
        assert_eq!(ha.validation.len(), 3);
        assert!(a.best_checkpoint.is_some());
    }

    #[test]
    fn pinned_weights_stay_zero() {
        let store = small_store();
        let cfg = TrainConfig {
            ablation: Ablation::NoWq,
            ..small_cfg()
        };
        let model = train(&store, &cfg).unwrap();
        for h in &model.params.heads {
            assert!(h.wq.values().iter().all(|v| *v == 0.0));
            assert!(h.bq.iter().any(|v| *v != 0.0));
        }
    }

    #[test]
    fn sampling_errors_carry_the_episode_index() {
        let store = small_store();
        let cfg = TrainConfig {
            policy: SamplerPolicy {
                n_min: 9,
                n_max: 9,
                ..small_cfg().policy
            },
            ..small_cfg()
        };
        let err = train(&store, &cfg).unwrap_err();
        assert!(matches!(err, UrtError::Sampling(_)));
        assert!(err.to_string().contains("training episode 0"));
    }
}
