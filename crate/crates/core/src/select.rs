//! Acquisition strategies: CoreSet k-center greedy, predictive-entropy,
//! uniform random, highest-contrastive-score, and a brute-force k-center
//! reference for small instances.
//!
//! Every strategy consumes only feature vectors, predicted distributions, or
//! scalar scores — never labels. Ties are always broken toward the smaller
//! pool id so selections are reproducible across runs.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{CoreError, Result};
use crate::tensor::Tensor;

/// Output of a selection strategy: the chosen pool ids (in pick order) plus a
/// per-candidate score trace for auditing — (id, score) pairs whose meaning
/// depends on the strategy (min-distance at pick time for the k-center
/// greedy, entropy or contrastive score for the rankers, empty for random).
#[derive(Clone, Debug)]
pub struct SelectionResult {
    pub chosen: Vec<usize>,
    pub score_trace: Vec<(usize, f64)>,
}

/// Row-major [n x d] feature matrix in f64, paired with the pool ids the rows
/// belong to.
#[derive(Clone, Debug)]
pub struct FeatureMatrix {
    pub ids: Vec<usize>,
    pub features: Tensor<f64>,
}

impl FeatureMatrix {
    pub fn new(ids: Vec<usize>, features: Tensor<f64>) -> Result<Self> {
        if features.shape().len() != 2 || features.shape()[0] != ids.len() {
            return Err(CoreError::DimensionMismatch(format!(
                "{} ids but feature shape {:?}",
                ids.len(),
                features.shape()
            )));
        }
        Ok(FeatureMatrix { ids, features })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let d = self.dim();
        &self.features.data()[i * d..(i + 1) * d]
    }
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

fn check_budget(budget: usize, pool: usize) -> Result<()> {
    if budget > pool {
        return Err(CoreError::BudgetExceedsPool { budget, pool });
    }
    Ok(())
}

/// k-center greedy: repeatedly pick the pool point farthest from the current
/// center set, seeded with the already-labelled points. Returns the chosen
/// pool ids in pick order. Ties go to the smaller id; with no labelled seeds
/// the first pick is the smallest id.
pub fn coreset_select(
    pool: &FeatureMatrix,
    labelled: &FeatureMatrix,
    budget: usize,
) -> Result<SelectionResult> {
    check_budget(budget, pool.len())?;
    if !labelled.is_empty() && labelled.dim() != pool.dim() {
        return Err(CoreError::DimensionMismatch(format!(
            "pool dim {} vs labelled dim {}",
            pool.dim(),
            labelled.dim()
        )));
    }
    let n = pool.len();
    let mut min_dist = vec![f64::INFINITY; n];
    for i in 0..n {
        for j in 0..labelled.len() {
            let d = euclidean(pool.row(i), labelled.row(j));
            if d < min_dist[i] {
                min_dist[i] = d;
            }
        }
    }
    let mut taken = vec![false; n];
    let mut chosen = Vec::with_capacity(budget);
    let mut trace = Vec::with_capacity(budget);
    for _ in 0..budget {
        let mut best: Option<usize> = None;
        for i in 0..n {
            if taken[i] {
                continue;
            }
            // Strict > keeps the earliest (smallest-id) row on ties; rows are
            // stored in ascending pool-id order by construction of the pool.
            match best {
                None => best = Some(i),
                Some(b) if min_dist[i] > min_dist[b] => best = Some(i),
                _ => {}
            }
        }
        let pick = best.expect("budget <= pool size");
        taken[pick] = true;
        trace.push((pool.ids[pick], min_dist[pick]));
        chosen.push(pool.ids[pick]);
        for i in 0..n {
            if taken[i] {
                continue;
            }
            let d = euclidean(pool.row(i), pool.row(pick));
            if d < min_dist[i] {
                min_dist[i] = d;
            }
        }
    }
    Ok(SelectionResult {
        chosen,
        score_trace: trace,
    })
}

/// Shannon entropy of each predicted distribution (natural log, 0*ln 0 = 0);
/// picks the `budget` highest-entropy pool points. Rows must sum to 1 within
/// 1e-6.
pub fn entropy_select(
    pool_ids: &[usize],
    probs: &Tensor<f64>,
    budget: usize,
) -> Result<SelectionResult> {
    check_budget(budget, pool_ids.len())?;
    if probs.shape().len() != 2 || probs.shape()[0] != pool_ids.len() {
        return Err(CoreError::DimensionMismatch(format!(
            "{} ids but probability shape {:?}",
            pool_ids.len(),
            probs.shape()
        )));
    }
    let c = probs.shape()[1];
    let mut scored: Vec<(f64, usize)> = Vec::with_capacity(pool_ids.len());
    for (i, &id) in pool_ids.iter().enumerate() {
        let row = &probs.data()[i * c..(i + 1) * c];
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > 1e-5 || row.iter().any(|&p| p < 0.0) {
            return Err(CoreError::InvalidDistribution { id, sum });
        }
        let h: f64 = row
            .iter()
            .map(|&p| if p > 0.0 { -p * p.ln() } else { 0.0 })
            .sum();
        scored.push((h, id));
    }
    Ok(result_from_scores(scored, budget))
}

/// Uniform random selection without replacement, deterministic in `seed`.
pub fn random_select(pool_ids: &[usize], budget: usize, seed: u64) -> Result<SelectionResult> {
    check_budget(budget, pool_ids.len())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ids = pool_ids.to_vec();
    ids.shuffle(&mut rng);
    ids.truncate(budget);
    Ok(SelectionResult {
        chosen: ids,
        score_trace: Vec::new(),
    })
}

/// Picks the `budget` pool points with the highest contrastive score.
pub fn high_contrastive_select(
    pool_ids: &[usize],
    scores: &[f64],
    budget: usize,
) -> Result<SelectionResult> {
    check_budget(budget, pool_ids.len())?;
    if scores.len() != pool_ids.len() {
        return Err(CoreError::DimensionMismatch(format!(
            "{} ids but {} scores",
            pool_ids.len(),
            scores.len()
        )));
    }
    let scored: Vec<(f64, usize)> = scores.iter().cloned().zip(pool_ids.iter().cloned()).collect();
    Ok(result_from_scores(scored, budget))
}

/// Highest score first; ascending id on equal scores. The trace keeps every
/// candidate's score.
fn result_from_scores(mut scored: Vec<(f64, usize)>, budget: usize) -> SelectionResult {
    let score_trace: Vec<(usize, f64)> = scored.iter().map(|&(s, id)| (id, s)).collect();
    scored.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.1.cmp(&b.1))
    });
    SelectionResult {
        chosen: scored.into_iter().take(budget).map(|(_, id)| id).collect(),
        score_trace,
    }
}

/// Largest distance from any pool point to its nearest center (centers are
/// the picked rows plus the labelled seeds).
pub fn coverage_radius(
    pool: &FeatureMatrix,
    labelled: &FeatureMatrix,
    chosen_rows: &[usize],
) -> f64 {
    let mut radius: f64 = 0.0;
    for i in 0..pool.len() {
        let mut d = f64::INFINITY;
        for j in 0..labelled.len() {
            d = d.min(euclidean(pool.row(i), labelled.row(j)));
        }
        for &c in chosen_rows {
            d = d.min(euclidean(pool.row(i), pool.row(c)));
        }
        radius = radius.max(d);
    }
    radius
}

/// Exhaustive optimal k-center over all C(n, budget) subsets; reference
/// oracle for small instances only. Returns (optimal radius, chosen ids).
pub fn brute_force_kcenter(
    pool: &FeatureMatrix,
    labelled: &FeatureMatrix,
    budget: usize,
) -> Result<(f64, Vec<usize>)> {
    check_budget(budget, pool.len())?;
    let n = pool.len();
    let combos = binomial(n, budget);
    const LIMIT: u64 = 1_000_000;
    if combos > LIMIT {
        return Err(CoreError::InstanceTooLarge {
            n,
            b: budget,
            limit: LIMIT,
        });
    }
    let mut best_radius = f64::INFINITY;
    let mut best: Vec<usize> = Vec::new();
    let mut subset: Vec<usize> = (0..budget).collect();
    loop {
        let r = coverage_radius(pool, labelled, &subset);
        if r < best_radius {
            best_radius = r;
            best = subset.clone();
        }
        // Next lexicographic combination of `budget` rows out of n.
        let mut i = budget;
        loop {
            if i == 0 {
                return Ok((best_radius, best.iter().map(|&r| pool.ids[r]).collect()));
            }
            i -= 1;
            if subset[i] != i + n - budget {
                subset[i] += 1;
                for j in i + 1..budget {
                    subset[j] = subset[j - 1] + 1;
                }
                break;
            }
        }
    }
}

fn binomial(n: usize, k: usize) -> u64 {
    let k = k.min(n - k.min(n));
    let mut acc: u64 = 1;
    for i in 0..k {
        acc = acc.saturating_mul((n - i) as u64) / (i as u64 + 1);
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fm1d(ids: &[usize], xs: &[f64]) -> FeatureMatrix {
        FeatureMatrix::new(
            ids.to_vec(),
            Tensor::new(vec![xs.len(), 1], xs.to_vec()).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn coreset_hand_trace_one_dimensional() {
        // Labelled center at 0; candidates at 1, 2, 10. Farthest is 10;
        // after adding it the distances are 1, 2 -> next pick is 2.
        let labelled = fm1d(&[100], &[0.0]);
        let pool = fm1d(&[0, 1, 2], &[1.0, 2.0, 10.0]);
        let picks = coreset_select(&pool, &labelled, 2).unwrap().chosen;
        assert_eq!(picks, vec![2, 1]);
    }

    #[test]
    fn coreset_tie_breaks_to_smaller_id() {
        let labelled = fm1d(&[9], &[0.0]);
        let pool = fm1d(&[3, 7], &[5.0, -5.0]); // both at distance 5
        let picks = coreset_select(&pool, &labelled, 1).unwrap().chosen;
        assert_eq!(picks, vec![3]);
    }

    #[test]
    fn coreset_without_seeds_first_picks_smallest_id() {
        let labelled = fm1d(&[], &[]);
        let pool = fm1d(&[4, 5, 6], &[0.0, 1.0, 3.0]);
        let picks = coreset_select(&pool, &labelled, 2).unwrap().chosen;
        assert_eq!(picks[0], 4);
        assert_eq!(picks[1], 6); // farthest from 0.0
    }

    #[test]
    fn entropy_prefers_uniform_rows() {
        let probs = Tensor::new(
            vec![3, 2],
            vec![0.5, 0.5, 0.9, 0.1, 1.0, 0.0],
        )
        .unwrap();
        let picks = entropy_select(&[10, 11, 12], &probs, 2).unwrap().chosen;
        assert_eq!(picks, vec![10, 11]);
    }

    #[test]
    fn entropy_rejects_bad_distribution() {
        let probs = Tensor::new(vec![1, 2], vec![0.6, 0.6]).unwrap();
        assert!(matches!(
            entropy_select(&[5], &probs, 1),
            Err(CoreError::InvalidDistribution { id: 5, .. })
        ));
    }

    #[test]
    fn random_select_is_seed_deterministic_and_unique() {
        let ids: Vec<usize> = (0..50).collect();
        let a = random_select(&ids, 10, 42).unwrap().chosen;
        let b = random_select(&ids, 10, 42).unwrap().chosen;
        assert_eq!(a, b);
        let mut sorted = a.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), 10);
        let c = random_select(&ids, 10, 43).unwrap().chosen;
        assert_ne!(a, c);
    }

    #[test]
    fn high_contrastive_takes_top_scores() {
        let picks = high_contrastive_select(&[1, 2, 3, 4], &[0.1, 0.9, 0.9, 0.5], 2).unwrap().chosen;
        assert_eq!(picks, vec![2, 3]); // tie between 2 and 3 -> both, id order
    }

    #[test]
    fn budget_larger_than_pool_errors() {
        assert!(matches!(
            random_select(&[1, 2], 3, 0),
            Err(CoreError::BudgetExceedsPool { budget: 3, pool: 2 })
        ));
    }

    #[test]
    fn brute_force_matches_obvious_optimum() {
        // Two clusters; with b=2 the optimum is one center per cluster.
        let labelled = fm1d(&[], &[]);
        let pool = fm1d(&[0, 1, 2, 3], &[0.0, 1.0, 10.0, 11.0]);
        let (radius, picks) = brute_force_kcenter(&pool, &labelled, 2).unwrap();
        assert!((radius - 1.0).abs() < 1e-12);
        let mut p = picks;
        p.sort_unstable();
        assert!(p == vec![0, 2] || p == vec![0, 3] || p == vec![1, 2] || p == vec![1, 3]);
    }

    #[test]
    fn brute_force_rejects_huge_instances() {
        let ids: Vec<usize> = (0..60).collect();
        let xs: Vec<f64> = (0..60).map(|i| i as f64).collect();
        let pool = fm1d(&ids, &xs);
        let labelled = fm1d(&[], &[]);
        assert!(matches!(
            brute_force_kcenter(&pool, &labelled, 10),
            Err(CoreError::InstanceTooLarge { .. })
        ));
    }

    #[test]
    fn greedy_is_within_two_of_optimal_on_random_instances() {
        use rand::Rng;
        for seed in 0..30u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = rng.gen_range(4..=10);
            let b = rng.gen_range(1..=3.min(n));
            let d = 2;
            let data: Vec<f64> = (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let pool =
                FeatureMatrix::new((0..n).collect(), Tensor::new(vec![n, d], data).unwrap())
                    .unwrap();
            let labelled = FeatureMatrix::new(vec![], Tensor::new(vec![0, d], vec![]).unwrap())
                .unwrap();
            let picks = coreset_select(&pool, &labelled, b).unwrap().chosen;
            let rows: Vec<usize> = picks.to_vec();
            let greedy_r = coverage_radius(&pool, &labelled, &rows);
            let (opt_r, _) = brute_force_kcenter(&pool, &labelled, b).unwrap();
            assert!(
                greedy_r <= 2.0 * opt_r + 1e-12,
                "seed {seed}: greedy {greedy_r} vs opt {opt_r}"
            );
        }
    }
}
