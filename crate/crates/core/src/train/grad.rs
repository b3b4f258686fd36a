//! Analytic gradients of the episodic loss with respect to the layer
//! parameters, and a central-difference reference.
//!
//! Backbone features are constants here. The backward pass runs through
//! cosine logits, into the per-head score vectors `α`, through the class
//! average and per-class softmax, and finally into the query and key maps.

use crate::error::{Result, UrtError};
use crate::layer::{forward_episode, Ablation, HeadParams, UrtParams};
use crate::math::{axpy, dot, norm, softmax, NORM_EPS};
use crate::proto::{episode_loss, loss_from_embedding, prototypes, LossBreakdown};
use crate::sampler::Episode;
use crate::store::FeatureStore;

/// Gradient with the same layout as [`UrtParams::heads`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub heads: Vec<HeadParams>,
}

impl GradientSet {
    pub fn zeros_like(params: &UrtParams) -> Self {
        Self {
            heads: (0..params.num_heads())
                .map(|_| HeadParams::zeros(params.num_backbones, params.dim, params.key_dim))
                .collect(),
        }
    }

    /// All entries in canonical order (head by head: `wq, bq, wk, bk`).
    pub fn flat(&self) -> Vec<f64> {
        self.heads
            .iter()
            .flat_map(|h| h.blocks().into_iter().flatten().copied().collect::<Vec<_>>())
            .collect()
    }

    pub fn len(&self) -> usize {
        self.heads
            .iter()
            .map(|h| h.blocks().iter().map(|b| b.len()).sum::<usize>())
            .sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Zeroes the gradient of weights an ablation pins to zero.
    pub fn mask(&mut self, ablation: Ablation) {
        for h in &mut self.heads {
            match ablation {
                Ablation::NoWq => h.wq.values_mut().fill(0.0),
                Ablation::NoWk => h.wk.values_mut().fill(0.0),
                _ => {}
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.heads
            .iter()
            .all(|h| h.blocks().iter().all(|b| b.iter().all(|v| v.is_finite())))
    }

    /// Largest `|a − b| / max(|a|, |b|, floor)` over all entries.
    pub fn max_relative_error(&self, other: &GradientSet, floor: f64) -> Result<f64> {
        let (a, b) = (self.flat(), other.flat());
        if a.len() != b.len() {
            return Err(UrtError::Shape(format!(
                "gradient sets have {} and {} entries",
                a.len(),
                b.len()
            )));
        }
        Ok(a.iter()
            .zip(&b)
            .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
            .fold(0.0, f64::max))
    }
}

/// Gradient of `cos(a, b)` with respect to `a`, added into `out` scaled by `weight`.
fn add_cosine_grad(out: &mut [f64], a: &[f64], b: &[f64], weight: f64) {
    let (na, nb) = (norm(a), norm(b));
    let denom = na * nb;
    if denom <= NORM_EPS || weight == 0.0 {
        return;
    }
    let cos = dot(a, b) / denom;
    let ca = cos / (na * na);
    for ((o, ai), bi) in out.iter_mut().zip(a).zip(b) {
        *o += weight * (bi / denom - ca * ai);
    }
}

/// Loss terms and the exact gradient of `total` with respect to every
/// head parameter.
pub fn loss_and_gradients(
    params: &UrtParams,
    store: &FeatureStore,
    episode: &Episode,
    lambda: f64,
    scale: f64,
) -> Result<(LossBreakdown, GradientSet)> {
    let emb = forward_episode(params, store, episode)?;
    let loss = loss_from_embedding(&emb, lambda, scale)?;
    let protos = prototypes(&emb)?;

    let heads = params.num_heads();
    let m = params.num_backbones;
    let d = params.dim;
    let n = episode.num_classes();
    let query_count: usize = emb.query.iter().map(Vec::len).sum();
    let inv_q = 1.0 / query_count as f64;

    // dL/dα, one row per head.
    let mut g_alpha = vec![vec![0.0; m]; heads];
    // dL/dp_c accumulated over all queries.
    let mut g_proto = vec![vec![0.0; heads * d]; n];

    for (label, (group, ids)) in emb.query.iter().zip(&episode.query).enumerate() {
        for (phi, &id) in group.iter().zip(ids) {
            let logits: Vec<f64> = protos
                .centroids
                .iter()
                .map(|p| {
                    let denom = (norm(phi) * norm(p)).max(NORM_EPS);
                    scale * (dot(phi, p) / denom).clamp(-1.0, 1.0)
                })
                .collect();
            let probs = softmax(&logits);
            let mut g_phi = vec![0.0; heads * d];
            for (c, p) in protos.centroids.iter().enumerate() {
                let target = if c == label { 1.0 } else { 0.0 };
                let g_logit = (probs[c] - target) * inv_q * scale;
                add_cosine_grad(&mut g_phi, phi, p, g_logit);
                add_cosine_grad(&mut g_proto[c], p, phi, g_logit);
            }
            // φ_h(x) = Σ_i α_i r_i(x)
            let raw = store.backbone_features(id)?;
            for (h, g_row) in g_alpha.iter_mut().enumerate() {
                let block = &g_phi[h * d..(h + 1) * d];
                for (i, r) in raw.iter().enumerate() {
                    g_row[i] += dot(block, r);
                }
            }
        }
    }

    // p_{c,h} = Σ_i α_i r_i(S_c) since the prototype is a support mean.
    for (c, gp) in g_proto.iter().enumerate() {
        for (h, g_row) in g_alpha.iter_mut().enumerate() {
            let block = &gp[h * d..(h + 1) * d];
            for (i, g) in g_row.iter_mut().enumerate() {
                *g += dot(block, emb.set_reps.backbone(c, i));
            }
        }
    }

    // Ω = ‖AAᵀ − I‖²  ⇒  dΩ/dA = 4 (AAᵀ − I) A
    if lambda != 0.0 {
        let a = emb.attention.score_matrix();
        let gram = a.gram();
        for (h, g_row) in g_alpha.iter_mut().enumerate() {
            for (i, g) in g_row.iter_mut().enumerate() {
                let mut acc = 0.0;
                for k in 0..heads {
                    let target = if h == k { 1.0 } else { 0.0 };
                    acc += (gram.get(h, k) - target) * a.get(k, i);
                }
                *g += lambda * 4.0 * acc;
            }
        }
    }

    let zeroed;
    let reps = if params.ablation == Ablation::NoSetrep {
        zeroed = emb.set_reps.zeroed();
        &zeroed
    } else {
        &emb.set_reps
    };
    let inv_sqrt_l = 1.0 / (params.key_dim as f64).sqrt();
    let inv_n = 1.0 / n as f64;
    let mut grads = GradientSet::zeros_like(params);
    for (h, (head, grad)) in params.heads.iter().zip(&mut grads.heads).enumerate() {
        let attn = &emb.attention.heads[h];
        for c in 0..n {
            // α_i = mean_c α_{i,c}; softmax backward per class.
            let alpha_c: Vec<f64> = (0..m).map(|i| attn.class_scores.get(i, c)).collect();
            let g_c: Vec<f64> = g_alpha[h].iter().map(|g| g * inv_n).collect();
            let mean_g = dot(&alpha_c, &g_c);
            let g_beta: Vec<f64> = alpha_c
                .iter()
                .zip(&g_c)
                .map(|(a, g)| a * (g - mean_g) * inv_sqrt_l)
                .collect();

            // β_{i,c}·√l = q_c·(Wk s_{i,c} + bk)
            let q = &attn.queries[c];
            let mut weighted_s = vec![0.0; d];
            for (i, gb) in g_beta.iter().enumerate() {
                axpy(&mut weighted_s, *gb, reps.backbone(c, i));
            }
            let beta_sum: f64 = g_beta.iter().sum();
            grad.wk.add_outer(q, &weighted_s);
            axpy(&mut grad.bk, beta_sum, q);

            let mut g_q = head.wk.affine(&weighted_s, &vec![0.0; params.key_dim]);
            axpy(&mut g_q, beta_sum, &head.bk);
            grad.wq.add_outer(&g_q, reps.universal(c));
            axpy(&mut grad.bq, 1.0, &g_q);
        }
    }
    Ok((loss, grads))
}

/// Central differences `(f(θ+h) − f(θ−h)) / 2h` of the total loss, one
/// coordinate at a time.
pub fn finite_diff_gradients(
    params: &UrtParams,
    store: &FeatureStore,
    episode: &Episode,
    lambda: f64,
    scale: f64,
    step: f64,
) -> Result<GradientSet> {
    let mut grads = GradientSet::zeros_like(params);
    let mut probe = params.clone();
    for h in 0..params.num_heads() {
        for b in 0..4 {
            let len = params.heads[h].blocks()[b].len();
            for j in 0..len {
                let original = params.heads[h].blocks()[b][j];
                probe.heads[h].blocks_mut()[b][j] = original + step;
                let plus = episode_loss(&probe, store, episode, lambda, scale)?.total;
                probe.heads[h].blocks_mut()[b][j] = original - step;
                let minus = episode_loss(&probe, store, episode, lambda, scale)?.total;
                probe.heads[h].blocks_mut()[b][j] = original;
                grads.heads[h].blocks_mut()[b][j] = (plus - minus) / (2.0 * step);
            }
        }
    }
    Ok(grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layer::init_params;
    use crate::rng::seeded;
    use crate::sampler::{sample_episode, SamplerPolicy};
    use crate::store::{generate_synthetic_store, Split, SplitCounts, SynthConfig};
    use rand::Rng;

    fn setup(seed: u64) -> (FeatureStore, UrtParams, Episode) {
        let store = generate_synthetic_store(&SynthConfig {
            domains: 3,
            classes_per_domain: SplitCounts {
                train: 4,
                valid: 0,
                test: 0,
            },
            samples_per_class: SplitCounts {
                train: 6,
                valid: 0,
                test: 0,
            },
            dim: 5,
            seed,
            ..SynthConfig::default()
        })
        .unwrap();
        let mut rng = seeded(seed);
        let mut params = init_params(3, 5, 4, 2, &mut rng).unwrap();
        for h in &mut params.heads {
            for v in h.bq.iter_mut().chain(h.bk.iter_mut()) {
                *v = rng.random_range(-0.5..0.5);
            }
        }
        let policy = SamplerPolicy {
            n_min: 2,
            n_max: 4,
            k_max: 3,
            q_per_class: 2,
            ..SamplerPolicy::default()
        };
        let ep = sample_episode(&store, &policy, &mut rng, Split::Train).unwrap();
        (store, params, ep)
    }

    #[test]
    fn matches_finite_differences() {
        for seed in 0..4 {
            let (store, params, ep) = setup(seed);
            let (_, analytic) = loss_and_gradients(&params, &store, &ep, 0.1, 10.0).unwrap();
            let numeric = finite_diff_gradients(&params, &store, &ep, 0.1, 10.0, 1e-5).unwrap();
            let err = analytic.max_relative_error(&numeric, 1e-8).unwrap();
            assert!(err <= 1e-4, "seed {seed}: max relative error {err}");
        }
    }

    #[test]
    fn loss_matches_episode_loss() {
        let (store, params, ep) = setup(7);
        let (loss, _) = loss_and_gradients(&params, &store, &ep, 0.3, 10.0).unwrap();
        assert_eq!(loss, episode_loss(&params, &store, &ep, 0.3, 10.0).unwrap());
    }

    #[test]
    fn gradient_is_linear_in_lambda() {
        let (store, params, ep) = setup(3);
        let (l0, g0) = loss_and_gradients(&params, &store, &ep, 0.0, 10.0).unwrap();
        let (l1, g1) = loss_and_gradients(&params, &store, &ep, 0.2, 10.0).unwrap();
        let (l2, g2) = loss_and_gradients(&params, &store, &ep, 0.4, 10.0).unwrap();
        assert_eq!(l0.total, l0.cross_entropy);
        let (r1, r2) = (l1.total - l1.cross_entropy, l2.total - l2.cross_entropy);
        assert!((r2 - 2.0 * r1).abs() <= 1e-12 * r2.abs().max(1.0));
        for ((a, b), c) in g0.flat().iter().zip(g1.flat()).zip(g2.flat()) {
            let (p1, p2) = (b - a, c - a);
            assert!((p2 - 2.0 * p1).abs() <= 1e-9 * p2.abs().max(1e-6));
        }
    }

    #[test]
    fn finite_differences_are_order_free_and_second_order() {
        // exact derivative of a quadratic
        let f = |x: f64| 3.0 * x * x - 2.0 * x + 1.0;
        let h = 1e-3;
        let fd = (f(0.7 + h) - f(0.7 - h)) / (2.0 * h);
        assert!((fd - (6.0 * 0.7 - 2.0)).abs() < 1e-9);

        let (store, params, ep) = setup(5);
        let (_, analytic) = loss_and_gradients(&params, &store, &ep, 0.1, 10.0).unwrap();
        let err_at = |step: f64| {
            let fd = finite_diff_gradients(&params, &store, &ep, 0.1, 10.0, step).unwrap();
            analytic
                .flat()
                .iter()
                .zip(fd.flat())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
        };
        let (coarse, fine) = (err_at(4e-2), err_at(2e-2));
        let ratio = coarse / fine;
        assert!((3.0..5.0).contains(&ratio), "error ratio {ratio}");

        let a = finite_diff_gradients(&params, &store, &ep, 0.1, 10.0, 1e-5).unwrap();
        let b = finite_diff_gradients(&params, &store, &ep, 0.1, 10.0, 1e-5).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn mask_zeroes_pinned_weights() {
        let (store, params, ep) = setup(1);
        let (_, mut g) = loss_and_gradients(&params, &store, &ep, 0.1, 10.0).unwrap();
        g.mask(Ablation::NoWk);
        assert!(g.heads.iter().all(|h| h.wk.values().iter().all(|v| *v == 0.0)));
        assert!(g.heads.iter().any(|h| h.wq.values().iter().any(|v| *v != 0.0)));
    }
}
