//! Task-level evaluation, rank aggregation, head sweeps, ablations and
//! attention heatmaps.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, UrtError};
use crate::layer::{attention, forward_episode, Ablation, UrtParams};
use crate::math::Matrix;
use crate::proto::{predict, prototypes};
use crate::rng::derived;
use crate::sampler::{sample_episode_in_domain, set_representations, Episode, SamplerPolicy};
use crate::store::{FeatureStore, Split};
use crate::train::{train, TrainConfig};

/// Tasks per domain used when none is given.
pub const DEFAULT_TASKS_PER_DOMAIN: usize = 600;

const STREAM_EVAL: u64 = 4;
const STREAM_HEATMAP: u64 = 5;
const STREAM_GRAM: u64 = 6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainReport {
    pub domain_id: u32,
    pub tasks: usize,
    pub mean_accuracy: f64,
    /// `1.96 · sample_std / √tasks`
    pub ci95: f64,
}

impl DomainReport {
    pub fn from_accuracies(domain_id: u32, accuracies: &[f64]) -> Result<Self> {
        let tasks = accuracies.len();
        if tasks == 0 {
            return Err(UrtError::Shape(format!("domain {domain_id} has no evaluated tasks")));
        }
        let n = tasks as f64;
        let mean = accuracies.iter().sum::<f64>() / n;
        let var = if tasks > 1 {
            accuracies.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        Ok(Self {
            domain_id,
            tasks,
            mean_accuracy: mean,
            ci95: 1.96 * var.sqrt() / n.sqrt(),
        })
    }
}

/// Unweighted mean of per-domain accuracies.
pub fn average_accuracy(reports: &[DomainReport]) -> f64 {
    reports.iter().map(|r| r.mean_accuracy).sum::<f64>() / reports.len().max(1) as f64
}

/// Anything that labels the queries of an episode.
pub trait EpisodeClassifier: Sync {
    /// Predicted class index for every query, shaped like `episode.query`.
    fn predict_episode(&self, store: &FeatureStore, episode: &Episode) -> Result<Vec<Vec<usize>>>;
}

impl EpisodeClassifier for UrtParams {
    fn predict_episode(&self, store: &FeatureStore, episode: &Episode) -> Result<Vec<Vec<usize>>> {
        let emb = forward_episode(self, store, episode)?;
        let protos = prototypes(&emb)?;
        emb.query
            .iter()
            .map(|group| group.iter().map(|q| predict(q, &protos)).collect())
            .collect()
    }
}

fn query_accuracy(predictions: &[Vec<usize>]) -> f64 {
    let mut correct = 0usize;
    let mut total = 0usize;
    for (c, group) in predictions.iter().enumerate() {
        correct += group.iter().filter(|&&p| p == c).count();
        total += group.len();
    }
    correct as f64 / total.max(1) as f64
}

/// Samples `tasks_per_domain` episodes from each domain of `split` and
/// reports mean query accuracy with a 95% interval. Task `j` of domain `t`
/// uses the rng stream `(seed, t, j)`, so results do not depend on the
/// thread count.
pub fn evaluate<C: EpisodeClassifier + ?Sized>(
    model: &C,
    store: &FeatureStore,
    split: Split,
    tasks_per_domain: usize,
    policy: &SamplerPolicy,
    seed: u64,
) -> Result<Vec<DomainReport>> {
    if tasks_per_domain == 0 {
        return Err(UrtError::Config("tasks per domain must be >= 1".into()));
    }
    let domains = store.domains_in(split);
    if domains.is_empty() {
        return Err(UrtError::Sampling(format!("split '{split}' is empty")));
    }
    domains
        .into_iter()
        .map(|domain| {
            let accs = (0..tasks_per_domain)
                .into_par_iter()
                .map(|j| {
                    let mut rng = derived(seed, &[STREAM_EVAL, domain as u64, j as u64]);
                    let ep = sample_episode_in_domain(store, policy, &mut rng, split, domain)?;
                    Ok(query_accuracy(&model.predict_episode(store, &ep)?))
                })
                .collect::<Result<Vec<f64>>>()?;
            DomainReport::from_accuracies(domain, &accs)
        })
        .collect()
}

/// Mean rank per method over domains. `table[method][domain]` holds
/// accuracies; higher is better, rank 1 is best and tied methods share the
/// mean of the ranks they span.
pub fn average_rank(table: &[Vec<f64>]) -> Result<Vec<f64>> {
    let methods = table.len();
    let domains = table.first().map_or(0, Vec::len);
    if methods == 0 || domains == 0 {
        return Err(UrtError::Shape("rank table must be non-empty".into()));
    }
    if table.iter().any(|row| row.len() != domains) {
        return Err(UrtError::Shape("rank table rows differ in length".into()));
    }
    if table.iter().flatten().any(|v| !v.is_finite()) {
        return Err(UrtError::Shape("rank table has missing or non-finite entries".into()));
    }
    let mut totals = vec![0.0; methods];
    for d in 0..domains {
        let mut order: Vec<usize> = (0..methods).collect();
        order.sort_by(|&a, &b| table[b][d].total_cmp(&table[a][d]));
        let mut start = 0;
        while start < methods {
            let mut end = start + 1;
            while end < methods && table[order[end]][d] == table[order[start]][d] {
                end += 1;
            }
            // positions start..end hold ranks start+1..=end
            let rank = (start + 1 + end) as f64 / 2.0;
            for &m in &order[start..end] {
                totals[m] += rank;
            }
            start = end;
        }
    }
    Ok(totals.into_iter().map(|t| t / domains as f64).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub heads: usize,
    pub domains: Vec<DomainReport>,
    pub average_accuracy: f64,
    pub average_rank: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
    /// Head count with the highest average accuracy (first one on ties).
    pub selected_heads: usize,
}

/// Trains one model per head count and compares them on the validation
/// split.
pub fn head_sweep(
    store: &FeatureStore,
    base: &TrainConfig,
    head_counts: &[usize],
    tasks_per_domain: usize,
    seed: u64,
) -> Result<SweepReport> {
    if head_counts.is_empty() {
        return Err(UrtError::Config("head sweep needs at least one head count".into()));
    }
    let results = head_counts
        .par_iter()
        .map(|&heads| {
            let cfg = TrainConfig {
                heads,
                ..base.clone()
            };
            let model = train(store, &cfg).map_err(|e| e.context(format!("H={heads}")))?;
            evaluate(
                &model.params,
                store,
                Split::Valid,
                tasks_per_domain,
                &base.policy,
                seed,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let table: Vec<Vec<f64>> = results
        .iter()
        .map(|r| r.iter().map(|d| d.mean_accuracy).collect())
        .collect();
    let ranks = average_rank(&table)?;
    let rows: Vec<SweepRow> = head_counts
        .iter()
        .zip(results)
        .zip(ranks)
        .map(|((&heads, domains), average_rank)| SweepRow {
            heads,
            average_accuracy: average_accuracy(&domains),
            domains,
            average_rank,
        })
        .collect();
    let best = rows
        .iter()
        .fold(&rows[0], |best, r| if r.average_accuracy > best.average_accuracy { r } else { best });
    Ok(SweepReport {
        selected_heads: best.heads,
        rows,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub mode: Ablation,
    pub full: Vec<DomainReport>,
    pub ablated: Vec<DomainReport>,
    pub full_accuracy: f64,
    pub ablated_accuracy: f64,
    /// `full_accuracy − ablated_accuracy`
    pub accuracy_drop: f64,
}

/// Trains the full layer and the ablated one with otherwise identical
/// settings and evaluates both on `split`.
pub fn ablate(
    store: &FeatureStore,
    cfg: &TrainConfig,
    mode: Ablation,
    split: Split,
    tasks_per_domain: usize,
    seed: u64,
) -> Result<AblationReport> {
    if mode == Ablation::None {
        return Err(UrtError::Config(
            "ablation mode must be one of no_wq, no_wk, no_setrep, no_reg".into(),
        ));
    }
    let configs = [
        TrainConfig {
            ablation: Ablation::None,
            ..cfg.clone()
        },
        TrainConfig {
            ablation: mode,
            ..cfg.clone()
        },
    ];
    let mut reports = configs
        .par_iter()
        .map(|c| {
            let model = train(store, c)?;
            evaluate(&model.params, store, split, tasks_per_domain, &cfg.policy, seed)
        })
        .collect::<Result<Vec<_>>>()?;
    let ablated = reports.pop().expect("two reports");
    let full = reports.pop().expect("two reports");
    let (fa, aa) = (average_accuracy(&full), average_accuracy(&ablated));
    Ok(AblationReport {
        mode,
        full,
        ablated,
        full_accuracy: fa,
        ablated_accuracy: aa,
        accuracy_drop: fa - aa,
    })
}

/// Mean attention per head, test domain and backbone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapReport {
    pub domains: Vec<u32>,
    /// `values[h][t][i]`, `t` indexing `domains`.
    pub values: Vec<Vec<Vec<f64>>>,
    pub task_counts: Vec<usize>,
}

/// Pixel size of one heatmap cell in the graymap export.
pub const HEATMAP_CELL: usize = 16;

impl HeatmapReport {
    pub fn num_heads(&self) -> usize {
        self.values.len()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("head,domain,backbone,value\n");
        for (h, rows) in self.values.iter().enumerate() {
            for (t, row) in rows.iter().enumerate() {
                for (i, v) in row.iter().enumerate() {
                    writeln!(out, "{h},{},{i},{v}", self.domains[t]).expect("string write");
                }
            }
        }
        out
    }

    /// Binary graymap of one head: a row per domain, a column per backbone,
    /// 0 black and 1 white.
    pub fn to_pgm(&self, head: usize) -> Vec<u8> {
        let rows = &self.values[head];
        let cols = rows.first().map_or(0, Vec::len);
        let (w, h) = (cols * HEATMAP_CELL, rows.len() * HEATMAP_CELL);
        let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
        for row in rows {
            let line: Vec<u8> = row
                .iter()
                .flat_map(|v| {
                    let px = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
                    std::iter::repeat_n(px, HEATMAP_CELL)
                })
                .collect();
            for _ in 0..HEATMAP_CELL {
                out.extend_from_slice(&line);
            }
        }
        out
    }
}

/// Averages each head's attention scores over sampled episodes, grouped by
/// domain.
pub fn attention_heatmap(
    params: &UrtParams,
    store: &FeatureStore,
    split: Split,
    tasks_per_domain: usize,
    policy: &SamplerPolicy,
    seed: u64,
) -> Result<HeatmapReport> {
    if tasks_per_domain == 0 {
        return Err(UrtError::Config("tasks per domain must be >= 1".into()));
    }
    let domains = store.domains_in(split);
    if domains.is_empty() {
        return Err(UrtError::Sampling(format!("split '{split}' is empty")));
    }
    let (heads, m) = (params.num_heads(), params.num_backbones);
    let mut values = vec![vec![vec![0.0; m]; domains.len()]; heads];
    for (t, &domain) in domains.iter().enumerate() {
        let per_task = (0..tasks_per_domain)
            .into_par_iter()
            .map(|j| {
                let mut rng = derived(seed, &[STREAM_HEATMAP, domain as u64, j as u64]);
                let ep = sample_episode_in_domain(store, policy, &mut rng, split, domain)?;
                Ok(attention(params, &set_representations(store, &ep)?)?.score_matrix())
            })
            .collect::<Result<Vec<Matrix>>>()?;
        for scores in &per_task {
            for (h, head_rows) in values.iter_mut().enumerate() {
                for (v, s) in head_rows[t].iter_mut().zip(scores.row(h)) {
                    *v += s;
                }
            }
        }
        for head_rows in &mut values {
            head_rows[t].iter_mut().for_each(|v| *v /= tasks_per_domain as f64);
        }
    }
    Ok(HeatmapReport {
        task_counts: vec![tasks_per_domain; domains.len()],
        domains,
        values,
    })
}

/// Mean absolute off-diagonal entry of `AAᵀ` over `tasks` episodes drawn
/// from uniformly chosen domains of `split`. Zero for a single head.
pub fn mean_head_overlap(
    params: &UrtParams,
    store: &FeatureStore,
    split: Split,
    tasks: usize,
    policy: &SamplerPolicy,
    seed: u64,
) -> Result<f64> {
    let domains = store.domains_in(split);
    if domains.is_empty() || tasks == 0 {
        return Err(UrtError::Sampling(format!("no tasks to draw from split '{split}'")));
    }
    let heads = params.num_heads();
    if heads < 2 {
        return Ok(0.0);
    }
    let per_task = (0..tasks)
        .into_par_iter()
        .map(|j| {
            let mut rng = derived(seed, &[STREAM_GRAM, j as u64]);
            let domain = domains[j % domains.len()];
            let ep = sample_episode_in_domain(store, policy, &mut rng, split, domain)?;
            let gram = attention(params, &set_representations(store, &ep)?)?
                .score_matrix()
                .gram();
            let mut sum = 0.0;
            for a in 0..heads {
                for b in 0..heads {
                    if a != b {
                        sum += gram.get(a, b).abs();
                    }
                }
            }
            Ok(sum / (heads * (heads - 1)) as f64)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(per_task.iter().sum::<f64>() / tasks as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layer::init_params;
    use crate::rng::seeded;
    use crate::store::{generate_synthetic_store, SplitCounts, SynthConfig};
    use proptest::prelude::*;
    use rand::Rng;

    fn store() -> FeatureStore {
        generate_synthetic_store(&SynthConfig {
            domains: 3,
            classes_per_domain: SplitCounts {
                train: 6,
                valid: 5,
                test: 6,
            },
            samples_per_class: SplitCounts {
                train: 12,
                valid: 12,
                test: 14,
            },
            dim: 8,
            ..SynthConfig::default()
        })
        .unwrap()
    }

    fn policy() -> SamplerPolicy {
        SamplerPolicy {
            n_min: 2,
            n_max: 5,
            k_max: 4,
            q_per_class: 4,
            ..SamplerPolicy::default()
        }
    }

    struct Oracle;
    impl EpisodeClassifier for Oracle {
        fn predict_episode(&self, _: &FeatureStore, ep: &Episode) -> Result<Vec<Vec<usize>>> {
            Ok(ep.query.iter().enumerate().map(|(c, q)| vec![c; q.len()]).collect())
        }
    }

    /// Uniform guesses seeded from the episode's first query id.
    struct Guess;
    impl EpisodeClassifier for Guess {
        fn predict_episode(&self, _: &FeatureStore, ep: &Episode) -> Result<Vec<Vec<usize>>> {
            let mut rng = derived(ep.query[0][0], &[99]);
            let n = ep.num_classes();
            Ok(ep
                .query
                .iter()
                .map(|q| q.iter().map(|_| rng.random_range(0..n)).collect())
                .collect())
        }
    }

    #[test]
    fn ci_examples() {
        let r = DomainReport::from_accuracies(0, &[0.5; 10]).unwrap();
        assert_eq!(r.ci95, 0.0);
        assert_eq!(r.mean_accuracy, 0.5);

        let accs = [0.2, 0.4, 0.9, 0.7, 0.55];
        let r = DomainReport::from_accuracies(1, &accs).unwrap();
        // mean 0.55, squared deviations sum 0.29, variance 0.0725
        let expected = 1.96 * 0.0725f64.sqrt() / 5f64.sqrt();
        assert!((r.ci95 - expected).abs() <= 1e-12);
        assert!((r.mean_accuracy - 0.55).abs() <= 1e-15);
        assert!(DomainReport::from_accuracies(0, &[]).is_err());
    }

    #[test]
    fn oracle_classifier_is_perfect() {
        let s = store();
        let reports = evaluate(&Oracle, &s, Split::Test, 20, &policy(), 0).unwrap();
        assert_eq!(reports.len(), 3);
        for r in reports {
            assert_eq!(r.mean_accuracy, 1.0);
            assert_eq!(r.ci95, 0.0);
            assert_eq!(r.tasks, 20);
        }
    }

    #[test]
    fn random_guessing_on_five_way_tasks() {
        let s = store();
        let five_way = SamplerPolicy {
            n_min: 5,
            n_max: 5,
            ..policy()
        };
        let reports = evaluate(&Guess, &s, Split::Test, 600, &five_way, 3).unwrap();
        for r in reports {
            assert!((r.mean_accuracy - 0.2).abs() <= 0.03, "{}", r.mean_accuracy);
        }
    }

    #[test]
    fn evaluation_is_thread_independent() {
        let s = store();
        let params = init_params(3, 8, 4, 2, &mut seeded(1)).unwrap();
        let a = evaluate(&params, &s, Split::Test, 30, &policy(), 5).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let b = pool
            .install(|| evaluate(&params, &s, Split::Test, 30, &policy(), 5))
            .unwrap();
        assert_eq!(a, b);
        assert_ne!(a, evaluate(&params, &s, Split::Test, 30, &policy(), 6).unwrap());
    }

    #[test]
    fn rank_examples() {
        let col = |v: &[f64]| v.iter().map(|x| vec![*x]).collect::<Vec<_>>();
        assert_eq!(average_rank(&col(&[0.9, 0.8, 0.7, 0.6])).unwrap(), vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(average_rank(&col(&[0.5; 4])).unwrap(), vec![2.5; 4]);
        assert_eq!(
            average_rank(&col(&[0.3, 0.9, 0.3, 0.1])).unwrap(),
            vec![2.5, 1.0, 2.5, 4.0]
        );
        assert!(average_rank(&[]).is_err());
        assert!(average_rank(&[vec![0.1, 0.2], vec![0.3]]).is_err());
        assert!(average_rank(&[vec![f64::NAN]]).is_err());
    }

    /// Rank of `x` among `column`: one plus the number of strictly better
    /// entries, plus half the number of other entries tied with it.
    fn brute_rank(column: &[f64], x: f64) -> f64 {
        let better = column.iter().filter(|&&v| v > x).count() as f64;
        let tied = column.iter().filter(|&&v| v == x).count() as f64;
        1.0 + better + (tied - 1.0) / 2.0
    }

    proptest! {
        #[test]
        fn rank_matches_brute_force(
            table in proptest::collection::vec(proptest::collection::vec(0u8..4, 6), 5)
        ) {
            let table: Vec<Vec<f64>> = table
                .iter()
                .map(|r| r.iter().map(|&v| f64::from(v) / 4.0).collect())
                .collect();
            let got = average_rank(&table).unwrap();
            for (m, row) in table.iter().enumerate() {
                let expected = (0..6)
                    .map(|d| {
                        let column: Vec<f64> = table.iter().map(|r| r[d]).collect();
                        brute_rank(&column, row[d])
                    })
                    .sum::<f64>()
                    / 6.0;
                prop_assert_eq!(got[m], expected);
            }
        }
    }

    #[test]
    fn heatmap_rows_are_stochastic() {
        let s = store();
        let params = init_params(3, 8, 4, 3, &mut seeded(2)).unwrap();
        let hm = attention_heatmap(&params, &s, Split::Test, 15, &policy(), 0).unwrap();
        assert_eq!(hm.num_heads(), 3);
        assert_eq!(hm.task_counts, vec![15; 3]);
        for rows in &hm.values {
            for row in rows {
                assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            }
        }
        let csv = hm.to_csv();
        assert_eq!(csv.lines().count(), 1 + 3 * 3 * 3);
        assert!(csv.starts_with("head,domain,backbone,value\n"));
        let pgm = hm.to_pgm(0);
        let header = format!("P5\n{} {}\n255\n", 3 * HEATMAP_CELL, 3 * HEATMAP_CELL);
        assert!(pgm.starts_with(header.as_bytes()));
        assert_eq!(pgm.len(), header.len() + 9 * HEATMAP_CELL * HEATMAP_CELL);
    }

    #[test]
    fn pgm_maps_zero_to_black_and_one_to_white() {
        let hm = HeatmapReport {
            domains: vec![0],
            values: vec![vec![vec![0.0, 1.0]]],
            task_counts: vec![1],
        };
        let pgm = hm.to_pgm(0);
        let body = &pgm[pgm.len() - 2 * HEATMAP_CELL * HEATMAP_CELL..];
        assert_eq!(body[0], 0);
        assert_eq!(body[HEATMAP_CELL], 255);
    }

    #[test]
    fn single_backbone_heatmap_is_all_ones() {
        let rec = |id, class| crate::store::SampleRecord {
            sample_id: id,
            domain_id: 0,
            class_id: class,
            split: Split::Test,
        };
        let records: Vec<_> = (0..12).map(|i| rec(i, i / 4)).collect();
        let feats = vec![(0..24).map(|i| (i as f64 * 0.37).sin()).collect()];
        let s = FeatureStore::new(1, 2, 1, false, records, feats).unwrap();
        let params = init_params(1, 2, 3, 2, &mut seeded(0)).unwrap();
        let p = SamplerPolicy {
            n_min: 2,
            n_max: 3,
            k_max: 2,
            q_per_class: 2,
            ..SamplerPolicy::default()
        };
        let hm = attention_heatmap(&params, &s, Split::Test, 5, &p, 0).unwrap();
        assert!(hm.values.iter().flatten().flatten().all(|&v| v == 1.0));
    }

    #[test]
    fn ablation_rejects_none() {
        let err = ablate(&store(), &TrainConfig::default(), Ablation::None, Split::Test, 1, 0)
            .unwrap_err();
        assert!(matches!(err, UrtError::Config(_)));
    }

    #[test]
    fn no_wk_gives_uniform_attention() {
        let s = store();
        let params = init_params(3, 8, 4, 2, &mut seeded(3))
            .unwrap()
            .with_ablation(Ablation::NoWk);
        let hm = attention_heatmap(&params, &s, Split::Test, 10, &policy(), 0).unwrap();
        for v in hm.values.iter().flatten().flatten() {
            assert!((v - 1.0 / 3.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn overlap_is_zero_for_one_head() {
        let s = store();
        let params = init_params(3, 8, 4, 1, &mut seeded(3)).unwrap();
        assert_eq!(mean_head_overlap(&params, &s, Split::Test, 5, &policy(), 0).unwrap(), 0.0);
        let params = init_params(3, 8, 4, 2, &mut seeded(3)).unwrap();
        let o = mean_head_overlap(&params, &s, Split::Test, 5, &policy(), 0).unwrap();
        assert!(o > 0.0 && o <= 1.0);
    }
}
