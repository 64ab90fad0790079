//! Exact references for small instances and generators for inputs with
//! known structure.
//!
//! The exhaustive search walks every balanced joint partition. Query
//! partitions are enumerated up to relabelling (restricted-growth order), key
//! partitions with labels, so each joint partition is visited exactly once:
//! `N_q!/(c_q!^L·L!) · N_k!/(c_k!^L)` candidates.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::{dense_attention, objective_from_labels, AttentionInstance, ClusterAssignment};
use crate::error::{Result, SmyrfError};
use crate::tensor::{dot, norm2, softmax_in_place, softmax_rows, Matrix, Rng};

pub const ENUMERATION_CAP: u128 = 10_000_000;

#[derive(Debug, Clone, PartialEq)]
pub struct BiclusteringSolution {
    pub assignment: ClusterAssignment,
    pub objective: f64,
    pub enumerated_count: u128,
}

fn multinomial_equal_blocks(n: usize, blocks: usize) -> Option<u128> {
    let per = n / blocks;
    let mut total: u128 = 1;
    let mut remaining = n as u128;
    for _ in 0..blocks {
        // C(remaining, per), built incrementally so every step stays integral.
        let mut binom: u128 = 1;
        for i in 0..per as u128 {
            binom = binom.checked_mul(remaining - i)? / (i + 1);
        }
        total = total.checked_mul(binom)?;
        remaining -= per as u128;
    }
    Some(total)
}

/// Number of distinct balanced joint partitions, or `None` on overflow.
pub fn balanced_partition_count(n_queries: usize, n_keys: usize, num_clusters: usize) -> Option<u128> {
    if num_clusters == 0 || !n_queries.is_multiple_of(num_clusters) || !n_keys.is_multiple_of(num_clusters) {
        return Some(0);
    }
    let l_fact = (1..=num_clusters as u128).try_fold(1u128, |acc, x| acc.checked_mul(x))?;
    let q = multinomial_equal_blocks(n_queries, num_clusters)? / l_fact;
    q.checked_mul(multinomial_equal_blocks(n_keys, num_clusters)?)
}

/// Every label vector assigning `n` items to `blocks` blocks of equal size,
/// in lexicographic order. With `canonical`, only the first labelling of each
/// unlabelled partition is produced.
fn equal_block_labelings(n: usize, blocks: usize, canonical: bool) -> Vec<Vec<usize>> {
    fn rec(
        pos: usize,
        labels: &mut Vec<usize>,
        counts: &mut [usize],
        per: usize,
        canonical: bool,
        used: usize,
        out: &mut Vec<Vec<usize>>,
    ) {
        if pos == labels.len() {
            out.push(labels.clone());
            return;
        }
        let limit = if canonical { (used + 1).min(counts.len()) } else { counts.len() };
        for l in 0..limit {
            if counts[l] == per {
                continue;
            }
            counts[l] += 1;
            labels[pos] = l;
            rec(pos + 1, labels, counts, per, canonical, used.max(l + 1), out);
            counts[l] -= 1;
        }
    }
    let mut out = Vec::new();
    let per = n / blocks;
    rec(0, &mut vec![0; n], &mut vec![0; blocks], per, canonical, 0, &mut out);
    out
}

fn check_enumerable(n_queries: usize, n_keys: usize, num_clusters: usize) -> Result<u128> {
    if num_clusters == 0 || !n_queries.is_multiple_of(num_clusters) || !n_keys.is_multiple_of(num_clusters) {
        return Err(SmyrfError::Invariant(format!(
            "{num_clusters} clusters must divide {n_queries} queries and {n_keys} keys"
        )));
    }
    let count = balanced_partition_count(n_queries, n_keys, num_clusters).unwrap_or(u128::MAX);
    if count > ENUMERATION_CAP {
        return Err(SmyrfError::Capacity {
            what: "balanced partition enumeration",
            needed: count,
            limit: ENUMERATION_CAP,
        });
    }
    Ok(count)
}

/// All balanced joint partitions, each exactly once, in enumeration order.
pub fn enumerate_balanced_assignments(n_queries: usize, n_keys: usize, num_clusters: usize) -> Result<Vec<ClusterAssignment>> {
    check_enumerable(n_queries, n_keys, num_clusters)?;
    let qs = equal_block_labelings(n_queries, num_clusters, true);
    let ks = equal_block_labelings(n_keys, num_clusters, false);
    qs.iter()
        .flat_map(|q| ks.iter().map(move |k| ClusterAssignment::new(num_clusters, q.clone(), k.clone())))
        .collect()
}

/// Exact minimiser of the clustered-vs-dense softmax gap over all balanced
/// partitions. Ties resolve to the first partition in enumeration order.
pub fn brute_force_biclustering(inst: &AttentionInstance, num_clusters: usize) -> Result<BiclusteringSolution> {
    let (nq, nk, _, _) = inst.shape();
    let expected = check_enumerable(nq, nk, num_clusters)?;
    let qs = equal_block_labelings(nq, num_clusters, true);
    let ks = equal_block_labelings(nk, num_clusters, false);
    let p = inst.logits();
    let s = softmax_rows(&p)?;

    let (best_obj, best_idx, visited) = qs
        .par_iter()
        .enumerate()
        .map(|(qi, q)| {
            let mut best = (f64::INFINITY, usize::MAX);
            for (ki, k) in ks.iter().enumerate() {
                let obj = objective_from_labels(&p, &s, q, k, 0..nq);
                if obj < best.0 {
                    best = (obj, qi * ks.len() + ki);
                }
            }
            (best.0, best.1, ks.len() as u128)
        })
        .reduce(
            || (f64::INFINITY, usize::MAX, 0),
            |a, b| {
                let pick = if b.0 < a.0 || (b.0 == a.0 && b.1 < a.1) { b } else { a };
                (pick.0, pick.1, a.2 + b.2)
            },
        );
    debug_assert_eq!(visited, expected);
    let q = qs[best_idx / ks.len()].clone();
    let k = ks[best_idx % ks.len()].clone();
    Ok(BiclusteringSolution {
        assignment: ClusterAssignment::new(num_clusters, q, k)?,
        objective: best_obj,
        enumerated_count: visited,
    })
}

/// `Σ (q·k + a)²` over query/key pairs that share a cluster.
pub fn max_mass(inst: &AttentionInstance, assign: &ClusterAssignment, shift_a: f64) -> f64 {
    pair_mass(inst, assign, shift_a, true)
}

/// `Σ (q·k + a)²` over pairs in different clusters.
pub fn outside_mass(inst: &AttentionInstance, assign: &ClusterAssignment, shift_a: f64) -> f64 {
    pair_mass(inst, assign, shift_a, false)
}

fn pair_mass(inst: &AttentionInstance, assign: &ClusterAssignment, shift_a: f64, inside: bool) -> f64 {
    let qc = assign.query_cluster();
    let kc = assign.key_cluster();
    let mut total = 0.0;
    for (i, q) in inst.queries().row_iter().enumerate() {
        for (j, k) in inst.keys().row_iter().enumerate() {
            if (qc[i] == kc[j]) == inside {
                let v = dot(q, k) + shift_a;
                total += v * v;
            }
        }
    }
    total
}

/// Exact top-`k` key indices per query by inner product; ties go to the
/// lower index.
pub fn top_k_oracle(inst: &AttentionInstance, k: usize) -> Result<Vec<Vec<usize>>> {
    if k > inst.n_keys() {
        return Err(SmyrfError::Usage(format!(
            "top-{k} requested but only {} keys exist",
            inst.n_keys()
        )));
    }
    Ok(inst
        .queries()
        .row_iter()
        .map(|q| {
            let scores: Vec<f64> = inst.keys().row_iter().map(|key| dot(q, key)).collect();
            let mut idx: Vec<usize> = (0..scores.len()).collect();
            idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
            idx.truncate(k);
            idx
        })
        .collect())
}

/// Fraction of exact top-`k` (query, key) pairs that share a cluster in at
/// least one of the given assignments.
pub fn top_k_recall(inst: &AttentionInstance, assignments: &[&ClusterAssignment], k: usize) -> Result<f64> {
    let top = top_k_oracle(inst, k)?;
    let total = top.len() * k;
    if total == 0 {
        return Ok(1.0);
    }
    let hits: usize = top
        .iter()
        .enumerate()
        .map(|(q, keys)| {
            keys.iter()
                .filter(|&&key| {
                    assignments.iter().any(|a| {
                        q < a.n_queries() && key < a.n_keys() && a.query_cluster()[q] == a.key_cluster()[key]
                    })
                })
                .count()
        })
        .sum();
    Ok(hits as f64 / total as f64)
}

/// Shape of a block-structured instance in which every query has a small
/// set of keys with overwhelming weight.
#[derive(Debug, Clone, PartialEq)]
pub struct AssumptionSpec {
    pub blocks: usize,
    pub queries_per_block: usize,
    pub keys_per_block: usize,
    pub dim: usize,
    pub value_dim: usize,
    /// Upper bound on the number of heavy keys per query.
    pub heavy_count_t: usize,
    /// Target bound on `exp(q·k_light) / exp(q·k_heavy)`.
    pub logit_gap: f64,
    /// Relative per-vector perturbation around the block direction.
    pub noise: f64,
}

impl Default for AssumptionSpec {
    fn default() -> Self {
        Self {
            blocks: 8,
            queries_per_block: 8,
            keys_per_block: 8,
            dim: 16,
            value_dim: 8,
            heavy_count_t: 8,
            logit_gap: 1e-12,
            noise: 3e-4,
        }
    }
}

impl AssumptionSpec {
    pub fn n_queries(&self) -> usize {
        self.blocks * self.queries_per_block
    }

    pub fn n_keys(&self) -> usize {
        self.blocks * self.keys_per_block
    }

    pub fn block_of_query(&self, i: usize) -> usize {
        i / self.queries_per_block
    }

    pub fn block_of_key(&self, j: usize) -> usize {
        j / self.keys_per_block
    }

    /// Mean within-block logit. Large enough both to clear the gap and to
    /// turn the small positional noise into O(1) logit spread.
    pub fn within_logit(&self) -> f64 {
        (-self.logit_gap.ln() + 5.0).max(1.0 / self.noise)
    }

    /// The planted partition, one cluster per block.
    pub fn planted_assignment(&self) -> Result<ClusterAssignment> {
        ClusterAssignment::new(
            self.blocks,
            (0..self.n_queries()).map(|i| self.block_of_query(i)).collect(),
            (0..self.n_keys()).map(|j| self.block_of_key(j)).collect(),
        )
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SmyrfError::Domain(m));
        if self.blocks == 0 || self.queries_per_block == 0 || self.keys_per_block == 0 {
            return bad("blocks and block sizes must be positive".into());
        }
        if self.heavy_count_t == 0 || self.heavy_count_t < self.keys_per_block {
            return bad(format!(
                "every key of a block is heavy, so T={} must be at least {}",
                self.heavy_count_t, self.keys_per_block
            ));
        }
        if !(self.logit_gap > 0.0 && self.logit_gap < 1e-6) {
            return bad(format!("logit gap {} must lie in (0, 1e-6)", self.logit_gap));
        }
        if self.dim < self.blocks {
            return bad(format!(
                "{} orthogonal block directions need dimension ≥ {}, got {}",
                self.blocks, self.blocks, self.dim
            ));
        }
        if !(self.noise > 0.0 && self.noise < 0.1) {
            return bad(format!("noise {} must lie in (0, 0.1)", self.noise));
        }
        Ok(())
    }
}

fn orthonormal_directions(rng: &mut Rng, count: usize, dim: usize) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(count);
    while out.len() < count {
        let mut v = rng.gaussian_vector(dim);
        for u in &out {
            let proj = dot(&v, u);
            for (x, y) in v.iter_mut().zip(u) {
                *x -= proj * y;
            }
        }
        let n = norm2(&v);
        if n > 1e-6 {
            out.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    out
}

/// Block-structured instance: block `b`'s queries and keys sit near
/// `√c·u_b` for orthonormal `u_b`, so within-block logits are ≈ `c` and
/// cross-block logits are ≈ 0. Rows are laid out block by block.
///
/// Fails with a domain error if the realised instance violates the weight
/// bound (cross-block weight above `10 × logit_gap`).
pub fn generate_compliant_instance(spec: &AssumptionSpec, rng: &mut Rng) -> Result<AttentionInstance> {
    spec.validate()?;
    let dirs = orthonormal_directions(rng, spec.blocks, spec.dim);
    let scale = spec.within_logit().sqrt();
    let jitter = spec.noise / (spec.dim as f64).sqrt();
    let mut place = |block: usize| -> Vec<f64> {
        dirs[block]
            .iter()
            .map(|&u| scale * (u + jitter * rng.gaussian()))
            .collect()
    };
    let q_rows: Vec<Vec<f64>> = (0..spec.n_queries()).map(|i| place(spec.block_of_query(i))).collect();
    let k_rows: Vec<Vec<f64>> = (0..spec.n_keys()).map(|j| place(spec.block_of_key(j))).collect();
    let values = rng.gaussian_matrix(spec.n_keys(), spec.value_dim, 1.0);
    let inst = AttentionInstance::new(Matrix::from_rows(&q_rows)?, Matrix::from_rows(&k_rows)?, values)?;

    let worst = max_cross_block_weight(&inst, spec);
    if worst > 10.0 * spec.logit_gap {
        return Err(SmyrfError::Domain(format!(
            "generated instance has cross-block weight {worst:e} above {:e}",
            10.0 * spec.logit_gap
        )));
    }
    Ok(inst)
}

/// Largest dense softmax weight any query puts on a key outside its block.
pub fn max_cross_block_weight(inst: &AttentionInstance, spec: &AssumptionSpec) -> f64 {
    let mut worst: f64 = 0.0;
    let mut row = vec![0.0; inst.n_keys()];
    for (i, q) in inst.queries().row_iter().enumerate() {
        for (r, k) in row.iter_mut().zip(inst.keys().row_iter()) {
            *r = dot(q, k);
        }
        softmax_in_place(&mut row);
        for (j, w) in row.iter().enumerate() {
            if spec.block_of_key(j) != spec.block_of_query(i) {
                worst = worst.max(*w);
            }
        }
    }
    worst
}

/// How evenly the rounds covered each query's heavy keys.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FairnessReport {
    /// Max over queries of `(max − min co-cluster count) / H` across the
    /// query's heavy keys.
    pub max_deviation: f64,
    /// Heavy (query, key) pairs never co-clustered in any round.
    pub uncovered_pairs: usize,
    pub heavy_pairs: usize,
}

impl FairnessReport {
    /// Every heavy key is caught, and caught equally often.
    pub fn compliant(&self) -> bool {
        self.max_deviation == 0.0 && self.uncovered_pairs == 0
    }
}

pub const DEFAULT_HEAVY_WEIGHT: f64 = 1e-6;

/// Post-hoc check of the coverage conditions under which merged rounds are
/// exact. A key is heavy for a query when its dense weight is at least
/// `heavy_weight`. Assignments may cover padded instances; only the first
/// `N_q` queries and `N_k` keys are inspected.
pub fn fairness_check(inst: &AttentionInstance, assignments: &[&ClusterAssignment], heavy_weight: f64) -> FairnessReport {
    let h = assignments.len().max(1) as f64;
    let mut max_dev: f64 = 0.0;
    let mut uncovered = 0;
    let mut heavy_pairs = 0;
    let mut row = vec![0.0; inst.n_keys()];
    for (i, q) in inst.queries().row_iter().enumerate() {
        for (r, k) in row.iter_mut().zip(inst.keys().row_iter()) {
            *r = dot(q, k);
        }
        softmax_in_place(&mut row);
        let counts: Vec<usize> = row
            .iter()
            .enumerate()
            .filter(|(_, &w)| w >= heavy_weight)
            .map(|(j, _)| {
                assignments
                    .iter()
                    .filter(|a| a.query_cluster()[i] == a.key_cluster()[j])
                    .count()
            })
            .collect();
        heavy_pairs += counts.len();
        uncovered += counts.iter().filter(|&&c| c == 0).count();
        if let (Some(lo), Some(hi)) = (counts.iter().min(), counts.iter().max()) {
            max_dev = max_dev.max((hi - lo) as f64 / h);
        }
    }
    FairnessReport {
        max_deviation: max_dev,
        uncovered_pairs: uncovered,
        heavy_pairs,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparsityEntry {
    pub threshold: f64,
    pub fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparsityStats {
    pub entries: Vec<SparsityEntry>,
    /// Fraction of weights strictly below `1/N_k`.
    pub below_uniform: f64,
}

/// Fraction of attention weights strictly below each threshold.
pub fn sparsity_stats(attn: &Matrix, thresholds: &[f64]) -> Result<SparsityStats> {
    let (rows, cols) = attn.shape();
    if rows == 0 || cols == 0 {
        return Err(SmyrfError::Domain("empty attention map".into()));
    }
    for (i, r) in attn.row_iter().enumerate() {
        let sum: f64 = r.iter().sum();
        if r.iter().any(|&w| !(0.0..=1.0 + 1e-12).contains(&w)) || (sum - 1.0).abs() > 1e-6 {
            return Err(SmyrfError::Domain(format!(
                "row {i} is not a probability vector (sum {sum})"
            )));
        }
    }
    let total = (rows * cols) as f64;
    let frac = |t: f64| attn.data().iter().filter(|&&w| w < t).count() as f64 / total;
    Ok(SparsityStats {
        entries: thresholds
            .iter()
            .map(|&t| SparsityEntry {
                threshold: t,
                fraction: frac(t),
            })
            .collect(),
        below_uniform: frac(1.0 / cols as f64),
    })
}

/// Dense softmax map of an instance.
pub fn attention_map(inst: &AttentionInstance) -> Matrix {
    softmax_rows(&inst.logits()).expect("instances are never empty")
}

/// Relative Frobenius error of an approximate output against dense attention.
pub fn relative_output_error(inst: &AttentionInstance, approx: &Matrix) -> Result<f64> {
    let dense = dense_attention(inst);
    let diff = approx.sub(&dense)?;
    let denom = crate::tensor::frobenius_norm(&dense);
    let num = crate::tensor::frobenius_norm(&diff);
    Ok(if denom == 0.0 { num } else { num / denom })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::frobenius_objective;
    use crate::clustering::{random_assignment, run_round, smyrf_attention, SmyrfConfig};

    fn random_instance(seed: u64, nq: usize, nk: usize, d: usize) -> AttentionInstance {
        let mut rng = Rng::new(seed);
        AttentionInstance::new(
            rng.gaussian_matrix(nq, d, 1.0),
            rng.gaussian_matrix(nk, d, 1.0),
            rng.gaussian_matrix(nk, 2, 1.0),
        )
        .unwrap()
    }

    fn factorial(n: u128) -> u128 {
        (1..=n).product()
    }

    #[test]
    fn partition_counts() {
        // 8 choose 4 = 70 labelled key splits, 35 unlabelled query splits.
        assert_eq!(balanced_partition_count(8, 8, 2), Some(35 * 70));
        assert_eq!(balanced_partition_count(6, 6, 2), Some(10 * 20));
        assert_eq!(balanced_partition_count(6, 9, 3), Some(15 * 1680));
        assert_eq!(balanced_partition_count(5, 5, 1), Some(1));
        assert_eq!(
            balanced_partition_count(6, 6, 3),
            Some(factorial(6) / (8 * 6) * (factorial(6) / 8))
        );
    }

    #[test]
    fn enumeration_visits_each_partition_once() {
        let all = enumerate_balanced_assignments(6, 4, 2).unwrap();
        assert_eq!(all.len() as u128, balanced_partition_count(6, 4, 2).unwrap());
        // Canonicalise each (relabel so query 0 is in cluster 0) and check uniqueness.
        let mut seen = std::collections::HashSet::new();
        for a in &all {
            let first = a.query_cluster()[0];
            let perm: Vec<usize> = (0..2).map(|c| if c == first { 0 } else { 1 }).collect();
            let r = a.relabel(&perm).unwrap();
            assert!(seen.insert((r.query_cluster().to_vec(), r.key_cluster().to_vec())));
        }
    }

    #[test]
    fn brute_force_single_cluster() {
        let inst = random_instance(1, 4, 5, 3);
        let sol = brute_force_biclustering(&inst, 1).unwrap();
        assert_eq!(sol.objective, 0.0);
        assert_eq!(sol.enumerated_count, 1);
    }

    #[test]
    fn brute_force_recovers_planted_blocks() {
        let big = 30.0;
        let q = Matrix::from_rows(&[vec![big, 0.0], vec![0.0, big], vec![big, 0.1], vec![0.2, big]]).unwrap();
        let k = Matrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0], vec![0.1, 1.0], vec![1.0, 0.2]]).unwrap();
        let v = Matrix::from_rows(&[vec![1.0], vec![2.0], vec![3.0], vec![4.0]]).unwrap();
        let inst = AttentionInstance::new(q, k, v).unwrap();
        let sol = brute_force_biclustering(&inst, 2).unwrap();
        assert!(sol.objective < 1e-6, "{}", sol.objective);
        let a = &sol.assignment;
        let qc = a.query_cluster();
        let kc = a.key_cluster();
        assert_eq!(qc[0], qc[2]);
        assert_eq!(qc[1], qc[3]);
        assert_eq!(kc[1], qc[0]);
        assert_eq!(kc[3], qc[0]);
        assert_eq!(kc[0], qc[1]);
        assert_eq!(kc[2], qc[1]);
    }

    #[test]
    fn brute_force_is_optimal_on_random_instances() {
        let inst = random_instance(2, 6, 6, 3);
        let sol = brute_force_biclustering(&inst, 2).unwrap();
        assert_eq!(sol.enumerated_count, 200);
        let check = frobenius_objective(&inst, &sol.assignment).unwrap();
        assert!((check - sol.objective).abs() < 1e-12);
        let mut rng = Rng::new(3);
        for _ in 0..200 {
            let a = random_assignment(6, 6, 2, &mut rng).unwrap();
            assert!(sol.objective <= frobenius_objective(&inst, &a).unwrap());
        }
        let round = run_round(&inst, &SmyrfConfig::new(2, 1, 0), 0).unwrap();
        assert!(sol.objective <= frobenius_objective(&inst, &round.assignment).unwrap());
        // Exhaustive check: nothing in the full enumeration beats it.
        for a in enumerate_balanced_assignments(6, 6, 2).unwrap() {
            assert!(sol.objective <= frobenius_objective(&inst, &a).unwrap());
        }
    }

    #[test]
    fn brute_force_capacity_error() {
        let inst = random_instance(4, 24, 24, 2);
        match brute_force_biclustering(&inst, 2) {
            Err(SmyrfError::Capacity { needed, limit, .. }) => {
                assert!(needed > limit);
                assert_eq!(limit, ENUMERATION_CAP);
            }
            other => panic!("expected capacity error, got {other:?}"),
        }
        assert!(matches!(brute_force_biclustering(&inst, 5), Err(SmyrfError::Invariant(_))));
    }

    #[test]
    fn max_mass_single_pair() {
        let inst = AttentionInstance::new(
            Matrix::from_rows(&[vec![1.0]]).unwrap(),
            Matrix::from_rows(&[vec![1.0]]).unwrap(),
            Matrix::from_rows(&[vec![0.0]]).unwrap(),
        )
        .unwrap();
        assert_eq!(max_mass(&inst, &ClusterAssignment::single(1, 1), 2.0), 9.0);
        assert_eq!(outside_mass(&inst, &ClusterAssignment::single(1, 1), 2.0), 0.0);
    }

    fn integer_instance(seed: u64, n: usize, d: usize) -> AttentionInstance {
        let mut rng = Rng::new(seed);
        let mut int = |r: usize, c: usize| Matrix::from_fn(r, c, |_, _| rng.below(7) as f64 - 3.0);
        let q = int(n, d);
        let k = int(n, d);
        let v = int(n, 1);
        AttentionInstance::new(q, k, v).unwrap()
    }

    #[test]
    fn max_mass_complements_outside_mass() {
        for seed in 0..3 {
            let inst = integer_instance(seed, 6, 2);
            let all = enumerate_balanced_assignments(6, 6, 2).unwrap();
            let a = 1.0;
            let mut by_inside: Vec<usize> = (0..all.len()).collect();
            let inside: Vec<f64> = all.iter().map(|x| max_mass(&inst, x, a)).collect();
            let outside: Vec<f64> = all.iter().map(|x| outside_mass(&inst, x, a)).collect();
            by_inside.sort_by(|&x, &y| inside[y].total_cmp(&inside[x]).then(x.cmp(&y)));
            let mut by_outside: Vec<usize> = (0..all.len()).collect();
            by_outside.sort_by(|&x, &y| outside[x].total_cmp(&outside[y]).then(x.cmp(&y)));
            assert_eq!(by_inside, by_outside);
        }
    }

    #[test]
    fn max_mass_optimiser_depends_on_shift() {
        // Characterisation: the maximiser is not invariant to the shift `a`.
        let mut found = false;
        for seed in 0..200 {
            let inst = integer_instance(100 + seed, 4, 2);
            let all = enumerate_balanced_assignments(4, 4, 2).unwrap();
            let argmax = |a: f64| {
                let mut best = (f64::NEG_INFINITY, 0);
                for (i, x) in all.iter().enumerate() {
                    let m = max_mass(&inst, x, a);
                    if m > best.0 {
                        best = (m, i);
                    }
                }
                best.1
            };
            let picks = [argmax(0.0), argmax(1.0), argmax(10.0)];
            if picks[0] != picks[2] || picks[0] != picks[1] {
                found = true;
                break;
            }
        }
        assert!(found);
    }

    #[test]
    fn top_k_examples() {
        let inst = random_instance(5, 3, 6, 2);
        let all = top_k_oracle(&inst, 6).unwrap();
        for row in &all {
            let mut sorted = row.clone();
            sorted.sort();
            assert_eq!(sorted, (0..6).collect::<Vec<_>>());
        }
        let keys = Matrix::identity(4);
        let q = Matrix::from_rows(&[vec![0.0, 0.0, 0.0, 2.0]]).unwrap();
        let inst = AttentionInstance::new(q, keys, Matrix::zeros(4, 1)).unwrap();
        assert_eq!(top_k_oracle(&inst, 1).unwrap(), vec![vec![3]]);
        assert!(top_k_oracle(&inst, 5).is_err());
    }

    #[test]
    fn recall_is_a_fraction() {
        let inst = random_instance(6, 32, 32, 4);
        let cfg = SmyrfConfig::new(4, 1, 1);
        let r = run_round(&inst, &cfg, 0).unwrap();
        let recall = top_k_recall(&inst, &[&r.assignment], 4).unwrap();
        assert!((0.0..=1.0).contains(&recall));
        let all = ClusterAssignment::single(32, 32);
        assert_eq!(top_k_recall(&inst, &[&all], 4).unwrap(), 1.0);
    }

    #[test]
    fn compliant_single_block_is_dense_equivalent() {
        let spec = AssumptionSpec {
            blocks: 1,
            dim: 4,
            ..AssumptionSpec::default()
        };
        let inst = generate_compliant_instance(&spec, &mut Rng::new(1)).unwrap();
        let out = smyrf_attention(&inst, &SmyrfConfig::new(1, 1, 0)).unwrap();
        assert!(relative_output_error(&inst, &out).unwrap() < 1e-12);
    }

    #[test]
    fn compliant_instance_is_sparse() {
        let spec = AssumptionSpec::default();
        let inst = generate_compliant_instance(&spec, &mut Rng::new(2)).unwrap();
        assert!(max_cross_block_weight(&inst, &spec) <= 10.0 * spec.logit_gap);
        let map = attention_map(&inst);
        for (i, row) in map.row_iter().enumerate() {
            let outside: f64 = row
                .iter()
                .enumerate()
                .filter(|(j, _)| spec.block_of_key(*j) != spec.block_of_query(i))
                .map(|(_, w)| w)
                .sum();
            assert!(outside < 1e-10);
        }
        let stats = sparsity_stats(&map, &[0.01]).unwrap();
        assert!(stats.below_uniform >= 0.8);
    }

    #[test]
    fn compliant_instance_is_recovered_exactly() {
        let spec = AssumptionSpec::default();
        let inst = generate_compliant_instance(&spec, &mut Rng::new(3)).unwrap();
        let cfg = SmyrfConfig::new(8, 4, 3);
        let out = smyrf_attention(&inst, &cfg).unwrap();
        assert!(relative_output_error(&inst, &out).unwrap() < 1e-5);
    }

    #[test]
    fn compliant_spec_validation() {
        let bad = [
            AssumptionSpec { blocks: 0, ..Default::default() },
            AssumptionSpec { heavy_count_t: 3, ..Default::default() },
            AssumptionSpec { logit_gap: 1e-3, ..Default::default() },
            AssumptionSpec { dim: 4, ..Default::default() },
        ];
        for spec in bad {
            assert!(matches!(
                generate_compliant_instance(&spec, &mut Rng::new(0)),
                Err(SmyrfError::Domain(_))
            ));
        }
    }

    #[test]
    fn planted_assignment_is_fair() {
        let spec = AssumptionSpec::default();
        let inst = generate_compliant_instance(&spec, &mut Rng::new(4)).unwrap();
        let planted = spec.planted_assignment().unwrap();
        let report = fairness_check(&inst, &[&planted, &planted], DEFAULT_HEAVY_WEIGHT);
        assert!(report.compliant());
        assert_eq!(report.heavy_pairs, 64 * 8);
        let other = random_assignment(64, 64, 8, &mut Rng::new(5)).unwrap();
        assert!(!fairness_check(&inst, &[&planted, &other], DEFAULT_HEAVY_WEIGHT).compliant());
    }

    #[test]
    fn sparsity_examples() {
        let uniform = Matrix::from_fn(3, 100, |_, _| 0.01);
        let s = sparsity_stats(&uniform, &[0.01]).unwrap();
        assert_eq!(s.entries[0].fraction, 0.0);
        let one_hot = Matrix::from_fn(4, 100, |i, j| if i == j { 1.0 } else { 0.0 });
        let s = sparsity_stats(&one_hot, &[0.01]).unwrap();
        assert!((s.entries[0].fraction - 0.99).abs() < 1e-15);
        let not_softmax = Matrix::from_fn(2, 2, |_, _| 1.0);
        assert!(matches!(sparsity_stats(&not_softmax, &[0.1]), Err(SmyrfError::Domain(_))));
    }
}
