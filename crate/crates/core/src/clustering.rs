//! Adaptive balanced clustering from sorted hashes and the end-to-end
//! multi-round pipeline.
//!
//! Each round hashes transformed queries and keys onto the real line, sorts
//! the two sets independently and cuts both into `L` equal-count runs; run
//! `i` of queries attends only to run `i` of keys. Rounds are merged by the
//! share of softmax mass each one captured for a query.

use std::borrow::Cow;

use rayon::prelude::*;

use crate::alsh::{hash_scalar, transform_key, transform_query, transform_rows, HashRoundConfig, NormBounds, TransformKind};
use crate::attention::{block_attention, AttentionInstance, ClusterAssignment};
use crate::counter::OpCounter;
use crate::error::{Result, SmyrfError};
use crate::tensor::{Matrix, Rng};

/// Logit given to padding keys against every real query.
pub const SINK_LOGIT: f64 = -1e6;

pub const DEFAULT_QUERIES_PER_CLUSTER: usize = 32;
pub const DEFAULT_ROUNDS: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct SmyrfConfig {
    pub num_clusters: usize,
    pub num_rounds: usize,
    pub seed: u64,
    pub transform: TransformKind,
    /// Reject inputs whose sizes are not multiples of `num_clusters`
    /// instead of padding them.
    pub strict: bool,
}

impl SmyrfConfig {
    pub fn new(num_clusters: usize, num_rounds: usize, seed: u64) -> Self {
        Self {
            num_clusters,
            num_rounds,
            seed,
            transform: TransformKind::Smyrf,
            strict: false,
        }
    }

    /// `L = ⌈N_q / C⌉` for a target of `C` queries per cluster.
    pub fn with_cluster_size(queries_per_cluster: usize, n_queries: usize, num_rounds: usize, seed: u64) -> Result<Self> {
        if queries_per_cluster == 0 {
            return Err(SmyrfError::Usage("queries per cluster must be positive".into()));
        }
        Ok(Self::new(n_queries.div_ceil(queries_per_cluster).max(1), num_rounds, seed))
    }

    pub fn transform(mut self, kind: TransformKind) -> Self {
        self.transform = kind;
        self
    }

    pub fn strict(mut self, strict: bool) -> Self {
        self.strict = strict;
        self
    }

    fn validate(&self) -> Result<()> {
        if self.num_clusters == 0 || self.num_rounds == 0 {
            return Err(SmyrfError::Usage(format!(
                "need at least one cluster and one round, got L={} H={}",
                self.num_clusters, self.num_rounds
            )));
        }
        Ok(())
    }
}

/// Sort `hashes` by `(hash, index)` and return the permutation.
fn sorted_order(hashes: &[f64], counter: &OpCounter) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..hashes.len()).collect();
    let mut comparisons = 0u64;
    idx.sort_by(|&a, &b| {
        comparisons += 1;
        hashes[a].total_cmp(&hashes[b]).then(a.cmp(&b))
    });
    counter.add_comparisons(comparisons);
    idx
}

pub fn adaptive_cluster(query_hashes: &[f64], key_hashes: &[f64], num_clusters: usize) -> Result<ClusterAssignment> {
    adaptive_cluster_counted(query_hashes, key_hashes, num_clusters, &OpCounter::new())
}

pub fn adaptive_cluster_counted(
    query_hashes: &[f64],
    key_hashes: &[f64],
    num_clusters: usize,
    counter: &OpCounter,
) -> Result<ClusterAssignment> {
    if num_clusters == 0 {
        return Err(SmyrfError::Invariant("need at least one cluster".into()));
    }
    for (what, n) in [("queries", query_hashes.len()), ("keys", key_hashes.len())] {
        if n % num_clusters != 0 {
            return Err(SmyrfError::Invariant(format!(
                "{num_clusters} clusters do not divide {n} {what}"
            )));
        }
    }
    let label = |hashes: &[f64]| {
        let per = hashes.len() / num_clusters;
        let mut labels = vec![0; hashes.len()];
        for (rank, i) in sorted_order(hashes, counter).into_iter().enumerate() {
            labels[i] = rank / per;
        }
        labels
    };
    ClusterAssignment::new(num_clusters, label(query_hashes), label(key_hashes))
}

/// Uniformly random balanced assignment, the baseline a hashing scheme has
/// to beat.
pub fn random_assignment(n_queries: usize, n_keys: usize, num_clusters: usize, rng: &mut Rng) -> Result<ClusterAssignment> {
    let spread = |n: usize, rng: &mut Rng| {
        let mut labels: Vec<usize> = (0..n).map(|i| i * num_clusters / n.max(1)).collect();
        rng.shuffle(&mut labels);
        labels
    };
    let q = spread(n_queries, rng);
    let k = spread(n_keys, rng);
    ClusterAssignment::new(num_clusters, q, k)
}

#[derive(Debug, Clone)]
pub struct RoundResult {
    pub round_index: u64,
    pub assignment: ClusterAssignment,
    /// Per-query stabilising shift: the largest logit inside the query's
    /// cluster this round.
    pub shift: Vec<f64>,
    /// `Σ exp(q·k - shift)` over the query's cluster.
    pub per_query_mass: Vec<f64>,
    pub partial_output: Matrix,
}

impl RoundResult {
    pub fn log_mass(&self, query: usize) -> f64 {
        self.shift[query] + self.per_query_mass[query].ln()
    }
}

/// Transformed rows for one instance, shared by all rounds.
struct HashInputs {
    queries: Matrix,
    keys: Matrix,
    real_keys: usize,
}

impl HashInputs {
    fn build(inst: &AttentionInstance, kind: TransformKind, real_queries: usize, real_keys: usize) -> Result<Self> {
        let real_q = inst.queries().select_rows(&(0..real_queries).collect::<Vec<_>>());
        let real_k = inst.keys().select_rows(&(0..real_keys).collect::<Vec<_>>());
        let bounds = NormBounds::from_rows(&real_q, &real_k);
        let dim = kind.output_dim(inst.dim());
        Ok(Self {
            queries: transform_rows(inst.queries(), real_queries, |q| transform_query(kind, q, &bounds), dim)?,
            keys: transform_rows(inst.keys(), real_keys, |k| transform_key(kind, k, &bounds), dim)?,
            real_keys,
        })
    }

    fn hashes(&self, cfg: &HashRoundConfig, counter: &OpCounter) -> Result<(Vec<f64>, Vec<f64>)> {
        let qh = self
            .queries
            .row_iter()
            .map(|r| hash_scalar(r, cfg))
            .collect::<Result<Vec<_>>>()?;
        // Padding keys sit past every real hash so they fill the last runs.
        let kh = self
            .keys
            .row_iter()
            .enumerate()
            .map(|(i, r)| if i < self.real_keys { hash_scalar(r, cfg) } else { Ok(f64::INFINITY) })
            .collect::<Result<Vec<_>>>()?;
        let width = cfg.direction.len() as u64;
        counter.add_hash((qh.len() as u64 + self.real_keys as u64) * width);
        Ok((qh, kh))
    }
}

fn round_with(
    inst: &AttentionInstance,
    inputs: &HashInputs,
    cfg: &SmyrfConfig,
    round: u64,
    counter: &OpCounter,
) -> Result<RoundResult> {
    let hash_cfg = HashRoundConfig::draw(cfg.seed, round, inputs.queries.cols());
    let (qh, kh) = inputs.hashes(&hash_cfg, counter)?;
    let assignment = adaptive_cluster_counted(&qh, &kh, cfg.num_clusters, counter)?;
    let block = block_attention(inst, &assignment, counter)?;
    Ok(RoundResult {
        round_index: round,
        assignment,
        shift: block.shift,
        per_query_mass: block.mass,
        partial_output: block.output,
    })
}

/// One hashing round on an instance whose sizes are already multiples of
/// `cfg.num_clusters`.
pub fn run_round(inst: &AttentionInstance, cfg: &SmyrfConfig, round: u64) -> Result<RoundResult> {
    run_round_counted(inst, cfg, round, &OpCounter::new())
}

pub fn run_round_counted(inst: &AttentionInstance, cfg: &SmyrfConfig, round: u64, counter: &OpCounter) -> Result<RoundResult> {
    cfg.validate()?;
    let inputs = HashInputs::build(inst, cfg.transform, inst.n_queries(), inst.n_keys())?;
    round_with(inst, &inputs, cfg, round, counter)
}

/// Per-query, per-round merge weights: each round's share of the total
/// softmax mass, rescaled to a common per-query shift.
pub fn merge_weights(rounds: &[RoundResult]) -> Result<Vec<Vec<f64>>> {
    let first = rounds
        .first()
        .ok_or_else(|| SmyrfError::Usage("cannot merge zero rounds".into()))?;
    let nq = first.per_query_mass.len();
    if rounds.iter().any(|r| r.per_query_mass.len() != nq || r.partial_output.shape() != first.partial_output.shape()) {
        return Err(SmyrfError::Usage("rounds come from different instances".into()));
    }
    Ok((0..nq)
        .map(|q| {
            let common = rounds.iter().map(|r| r.shift[q]).fold(f64::NEG_INFINITY, f64::max);
            let masses: Vec<f64> = rounds
                .iter()
                .map(|r| r.per_query_mass[q] * (r.shift[q] - common).exp())
                .collect();
            let total: f64 = masses.iter().sum();
            masses.into_iter().map(|m| m / total).collect()
        })
        .collect())
}

pub fn merge_rounds(rounds: &[RoundResult]) -> Result<Matrix> {
    let weights = merge_weights(rounds)?;
    let (nq, dv) = rounds[0].partial_output.shape();
    let mut out = Matrix::zeros(nq, dv);
    for (q, w) in weights.iter().enumerate() {
        let row = out.row_mut(q);
        for (r, a) in rounds.iter().zip(w) {
            for (o, v) in row.iter_mut().zip(r.partial_output.row(q)) {
                *o += a * v;
            }
        }
    }
    Ok(out)
}

/// Where the padding rows of a padded instance start.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PadInfo {
    pub original_queries: usize,
    pub original_keys: usize,
    /// Set when sink keys were needed; the padded instance then carries one
    /// extra trailing coordinate that pins sink logits to `SINK_LOGIT`.
    pub extra_dim: bool,
}

impl PadInfo {
    pub fn is_identity(&self, inst: &AttentionInstance) -> bool {
        !self.extra_dim && self.original_queries == inst.n_queries() && self.original_keys == inst.n_keys()
    }
}

/// Grows the instance until both sizes are multiples of `num_clusters`.
///
/// Extra queries are zero vectors whose outputs are dropped later. Extra
/// keys are sinks: zero value rows and logit `SINK_LOGIT` against every
/// real query, realised by appending a coordinate that is 1 on real queries,
/// 0 on real keys and `SINK_LOGIT` on sinks.
pub fn pad_to_divisible(inst: &AttentionInstance, num_clusters: usize) -> Result<(AttentionInstance, PadInfo)> {
    if num_clusters == 0 {
        return Err(SmyrfError::Usage("need at least one cluster".into()));
    }
    let (nq, nk, d, dv) = inst.shape();
    let nq_pad = nq.div_ceil(num_clusters) * num_clusters;
    let nk_pad = nk.div_ceil(num_clusters) * num_clusters;
    let extra_dim = nk_pad > nk;
    let info = PadInfo {
        original_queries: nq,
        original_keys: nk,
        extra_dim,
    };
    if nq_pad == nq && !extra_dim {
        return Ok((inst.clone(), info));
    }
    let width = d + usize::from(extra_dim);
    let queries = Matrix::from_fn(nq_pad, width, |i, j| match (i < nq, j < d) {
        (true, true) => inst.queries().get(i, j),
        (true, false) => 1.0,
        (false, _) => 0.0,
    });
    let keys = Matrix::from_fn(nk_pad, width, |i, j| match (i < nk, j < d) {
        (true, true) => inst.keys().get(i, j),
        (true, false) => 0.0,
        (false, true) => 0.0,
        (false, false) => SINK_LOGIT,
    });
    let values = Matrix::from_fn(nk_pad, dv, |i, j| if i < nk { inst.values().get(i, j) } else { 0.0 });
    Ok((AttentionInstance::new(queries, keys, values)?, info))
}

/// Everything one pipeline call produced.
#[derive(Debug, Clone)]
pub struct SmyrfRun {
    /// `N_q × d_v`, padding rows removed.
    pub output: Matrix,
    pub rounds: Vec<RoundResult>,
    pub pad: PadInfo,
}

pub fn smyrf_attention(inst: &AttentionInstance, cfg: &SmyrfConfig) -> Result<Matrix> {
    Ok(smyrf_attention_detailed(inst, cfg, &OpCounter::new())?.output)
}

pub fn smyrf_attention_detailed(inst: &AttentionInstance, cfg: &SmyrfConfig, counter: &OpCounter) -> Result<SmyrfRun> {
    cfg.validate()?;
    let l = cfg.num_clusters;
    let divisible = inst.n_queries().is_multiple_of(l) && inst.n_keys().is_multiple_of(l);
    if cfg.strict && !divisible {
        return Err(SmyrfError::Invariant(format!(
            "strict mode: {l} clusters do not divide {} queries and {} keys",
            inst.n_queries(),
            inst.n_keys()
        )));
    }
    let (work, pad): (Cow<'_, AttentionInstance>, PadInfo) = if divisible {
        (
            Cow::Borrowed(inst),
            PadInfo {
                original_queries: inst.n_queries(),
                original_keys: inst.n_keys(),
                extra_dim: false,
            },
        )
    } else {
        let (padded, info) = pad_to_divisible(inst, l)?;
        (Cow::Owned(padded), info)
    };

    let inputs = HashInputs::build(&work, cfg.transform, pad.original_queries, pad.original_keys)?;
    let rounds = (0..cfg.num_rounds as u64)
        .into_par_iter()
        .map(|h| round_with(&work, &inputs, cfg, h, counter))
        .collect::<Result<Vec<_>>>()?;
    let merged = merge_rounds(&rounds)?;
    let output = if merged.rows() == pad.original_queries {
        merged
    } else {
        merged.select_rows(&(0..pad.original_queries).collect::<Vec<_>>())
    };
    Ok(SmyrfRun { output, rounds, pad })
}

/// Fraction of keys a query attends to, summed over rounds: `H·(N_k/L)/N_k`.
pub fn memory_fraction(n_keys: usize, num_clusters: usize, num_rounds: usize) -> f64 {
    let padded = n_keys.div_ceil(num_clusters) * num_clusters;
    (num_rounds * (padded / num_clusters)) as f64 / n_keys as f64
}
