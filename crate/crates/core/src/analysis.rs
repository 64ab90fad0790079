//! Diagnostics: dense-vs-approximate comparison reports, singular-value
//! decay of attention maps, and wall-clock/operation-count scaling studies.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::attention::{clustered_attention, dense_attention_counted, frobenius_objective_rows, AttentionInstance};
use crate::clustering::{
    memory_fraction, pad_to_divisible, random_assignment, smyrf_attention_detailed, SmyrfConfig,
};
use crate::counter::{OpCounter, OpCounts};
use crate::error::{Result, SmyrfError};
use crate::oracle::{fairness_check, top_k_recall, SparsityEntry, SparsityStats, DEFAULT_HEAVY_WEIGHT};
use crate::tensor::{dot, frobenius_norm, singular_values, softmax_in_place, softmax_rows, Matrix, Rng};

/// Largest `N_q·N_k` for which attention maps are materialized.
pub const MAP_CAPACITY: u128 = 100_000_000;
/// Largest matrix side accepted by the singular-value routine.
pub const SVD_MAX_SIDE: usize = 2048;
pub const DEFAULT_THRESHOLDS: [f64; 4] = [1e-6, 1e-4, 1e-3, 1e-2];
pub const DEFAULT_RECALL_K: usize = 8;
pub const MIN_REPETITIONS: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceShape {
    pub n_queries: usize,
    pub n_keys: usize,
    pub dim: usize,
    pub value_dim: usize,
}

impl From<&AttentionInstance> for InstanceShape {
    fn from(inst: &AttentionInstance) -> Self {
        let (n_queries, n_keys, dim, value_dim) = inst.shape();
        Self {
            n_queries,
            n_keys,
            dim,
            value_dim,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigSummary {
    pub num_clusters: usize,
    pub num_rounds: usize,
    pub seed: u64,
    pub transform: String,
    pub strict: bool,
    /// Cluster sizes after any padding.
    pub queries_per_cluster: usize,
    pub keys_per_cluster: usize,
    pub padded: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OperationCounts {
    pub dense: OpCounts,
    pub smyrf: OpCounts,
}

/// Wall-clock seconds. The only non-deterministic part of a report.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub dense_seconds: f64,
    pub smyrf_seconds: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Recall {
    pub k: usize,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApproximationReport {
    pub instance_shape: InstanceShape,
    pub config: ConfigSummary,
    /// `‖smyrf − dense‖_F / ‖dense‖_F` on the outputs.
    pub frobenius_output_error: f64,
    /// `‖softmax(P) − softmax(mask(P))‖_F` for the first round's clustering.
    /// Present only when maps were materialized.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frobenius_map_error: Option<f64>,
    /// Largest spread of co-clustering counts across a query's heavy keys,
    /// as a fraction of the round count.
    pub per_round_fairness_deviation: f64,
    pub uncovered_heavy_pairs: usize,
    pub heavy_pairs: usize,
    pub top_k_recall: Recall,
    /// Attended keys per query summed over rounds, over `N_k`.
    pub memory_fraction: f64,
    pub sparsity: SparsityStats,
    pub operations: OperationCounts,
    pub timing: Timing,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompareOptions {
    pub materialize_maps: bool,
    pub recall_k: usize,
    pub thresholds: Vec<f64>,
    pub heavy_weight: f64,
}

impl Default for CompareOptions {
    fn default() -> Self {
        Self {
            materialize_maps: false,
            recall_k: DEFAULT_RECALL_K,
            thresholds: DEFAULT_THRESHOLDS.to_vec(),
            heavy_weight: DEFAULT_HEAVY_WEIGHT,
        }
    }
}

pub fn compare(inst: &AttentionInstance, cfg: &SmyrfConfig, materialize_maps: bool) -> Result<ApproximationReport> {
    compare_with(
        inst,
        cfg,
        &CompareOptions {
            materialize_maps,
            ..CompareOptions::default()
        },
    )
}

pub fn compare_with(inst: &AttentionInstance, cfg: &SmyrfConfig, opts: &CompareOptions) -> Result<ApproximationReport> {
    Ok(compare_with_output(inst, cfg, opts)?.0)
}

/// [`compare_with`] that also returns the clustered attention output.
pub fn compare_with_output(
    inst: &AttentionInstance,
    cfg: &SmyrfConfig,
    opts: &CompareOptions,
) -> Result<(ApproximationReport, Matrix)> {
    let (nq, nk, _, _) = inst.shape();
    let cells = nq as u128 * nk as u128;
    if opts.materialize_maps && cells > MAP_CAPACITY {
        return Err(SmyrfError::Capacity {
            what: "attention map entries",
            needed: cells,
            limit: MAP_CAPACITY,
        });
    }

    let dense_counter = OpCounter::new();
    let start = Instant::now();
    let dense = dense_attention_counted(inst, &dense_counter);
    let dense_seconds = start.elapsed().as_secs_f64();

    let smyrf_counter = OpCounter::new();
    let start = Instant::now();
    let run = smyrf_attention_detailed(inst, cfg, &smyrf_counter)?;
    let smyrf_seconds = start.elapsed().as_secs_f64();

    let denom = frobenius_norm(&dense);
    let num = frobenius_norm(&run.output.sub(&dense)?);
    let output_error = if denom == 0.0 { num } else { num / denom };

    let first = &run.rounds[0].assignment;
    let map_error = if opts.materialize_maps {
        Some(if run.pad.is_identity(inst) {
            frobenius_objective_rows(inst, first, 0..nq)?
        } else {
            // Sink keys carry zero dense weight, so the padded objective over
            // the real query rows equals the unpadded one.
            let (padded, _) = pad_to_divisible(inst, cfg.num_clusters)?;
            frobenius_objective_rows(&padded, first, 0..nq)?
        })
    } else {
        None
    };

    let assignments: Vec<_> = run.rounds.iter().map(|r| &r.assignment).collect();
    let fairness = fairness_check(inst, &assignments, opts.heavy_weight);
    let k = opts.recall_k.min(nk);
    let recall = top_k_recall(inst, &assignments, k)?;

    let report = ApproximationReport {
        instance_shape: InstanceShape::from(inst),
        config: ConfigSummary {
            num_clusters: cfg.num_clusters,
            num_rounds: cfg.num_rounds,
            seed: cfg.seed,
            transform: cfg.transform.name().to_string(),
            strict: cfg.strict,
            queries_per_cluster: first.queries_per_cluster(),
            keys_per_cluster: first.keys_per_cluster(),
            padded: !run.pad.is_identity(inst),
        },
        frobenius_output_error: output_error,
        frobenius_map_error: map_error,
        per_round_fairness_deviation: fairness.max_deviation,
        uncovered_heavy_pairs: fairness.uncovered_pairs,
        heavy_pairs: fairness.heavy_pairs,
        top_k_recall: Recall { k, value: recall },
        memory_fraction: memory_fraction(nk, cfg.num_clusters, cfg.num_rounds),
        sparsity: streaming_sparsity(inst, &opts.thresholds),
        operations: OperationCounts {
            dense: dense_counter.snapshot(),
            smyrf: smyrf_counter.snapshot(),
        },
        timing: Timing {
            dense_seconds,
            smyrf_seconds,
        },
    };
    Ok((report, run.output))
}

/// Sparsity of the dense attention map, one softmax row at a time.
pub fn streaming_sparsity(inst: &AttentionInstance, thresholds: &[f64]) -> SparsityStats {
    let uniform = 1.0 / inst.n_keys() as f64;
    let mut below = vec![0u64; thresholds.len()];
    let mut below_uniform = 0u64;
    let mut row = vec![0.0; inst.n_keys()];
    for q in inst.queries().row_iter() {
        for (r, k) in row.iter_mut().zip(inst.keys().row_iter()) {
            *r = dot(q, k);
        }
        softmax_in_place(&mut row);
        for &w in &row {
            for (count, &t) in below.iter_mut().zip(thresholds) {
                *count += u64::from(w < t);
            }
            below_uniform += u64::from(w < uniform);
        }
    }
    let total = (inst.n_queries() * inst.n_keys()) as f64;
    SparsityStats {
        entries: thresholds
            .iter()
            .zip(&below)
            .map(|(&threshold, &c)| SparsityEntry {
                threshold,
                fraction: c as f64 / total,
            })
            .collect(),
        below_uniform: below_uniform as f64 / total,
    }
}

/// Output errors of `samples` uniformly random balanced assignments, each
/// used as a single clustering.
pub fn random_assignment_errors(
    inst: &AttentionInstance,
    num_clusters: usize,
    samples: usize,
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    let (padded, pad) = pad_to_divisible(inst, num_clusters)?;
    let dense = crate::attention::dense_attention(inst);
    let denom = frobenius_norm(&dense);
    let keep: Vec<usize> = (0..pad.original_queries).collect();
    (0..samples)
        .map(|_| {
            let assign = random_assignment(padded.n_queries(), padded.n_keys(), num_clusters, rng)?;
            let out = clustered_attention(&padded, &assign)?.select_rows(&keep);
            let num = frobenius_norm(&out.sub(&dense)?);
            Ok(if denom == 0.0 { num } else { num / denom })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecayCurve {
    pub normalized: bool,
    /// Singular values in non-increasing order, divided by the largest when
    /// `normalized` is set.
    pub values: Vec<f64>,
    /// Values above `1e-10 · max(1, σ₁)` in absolute terms.
    pub nonzero_count: usize,
}

pub fn svd_decay(attn: &Matrix, normalize: bool) -> Result<DecayCurve> {
    let side = attn.rows().max(attn.cols());
    if side > SVD_MAX_SIDE {
        return Err(SmyrfError::Capacity {
            what: "singular value matrix side",
            needed: side as u128,
            limit: SVD_MAX_SIDE as u128,
        });
    }
    let sv = singular_values(attn);
    let top = sv.first().copied().unwrap_or(0.0);
    let tol = 1e-10 * top.max(1.0);
    let nonzero_count = sv.iter().filter(|&&s| s > tol).count();
    let values = if normalize && top > 0.0 {
        sv.iter().map(|s| s / top).collect()
    } else {
        sv
    };
    Ok(DecayCurve {
        normalized: normalize,
        values,
        nonzero_count,
    })
}

/// Decay of the logits and of the softmax map for one instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapAnalysis {
    pub instance_shape: InstanceShape,
    pub pre_softmax: DecayCurve,
    pub post_softmax: DecayCurve,
    /// Largest normalized post-softmax singular value beyond index `d`,
    /// zero when the map has at most `d` singular values.
    pub post_softmax_tail: f64,
    pub sparsity: SparsityStats,
}

pub fn analyze_maps(inst: &AttentionInstance, thresholds: &[f64], normalize: bool) -> Result<MapAnalysis> {
    let cells = inst.n_queries() as u128 * inst.n_keys() as u128;
    if cells > MAP_CAPACITY {
        return Err(SmyrfError::Capacity {
            what: "attention map entries",
            needed: cells,
            limit: MAP_CAPACITY,
        });
    }
    let logits = inst.logits();
    let map = softmax_rows(&logits)?;
    let pre_softmax = svd_decay(&logits, normalize)?;
    let post_softmax = svd_decay(&map, true)?;
    let post_softmax_tail = post_softmax.values.get(inst.dim()).copied().unwrap_or(0.0);
    let post_softmax = if normalize { post_softmax } else { svd_decay(&map, false)? };
    Ok(MapAnalysis {
        instance_shape: InstanceShape::from(inst),
        pre_softmax,
        post_softmax,
        post_softmax_tail,
        sparsity: streaming_sparsity(inst, thresholds),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingRecord {
    pub length: usize,
    pub repetitions: usize,
    pub dense_median_seconds: f64,
    /// Median absolute deviation of the repetitions.
    pub dense_mad_seconds: f64,
    pub smyrf_median_seconds: f64,
    pub smyrf_mad_seconds: f64,
    pub dense_ops: OpCounts,
    pub smyrf_ops: OpCounts,
    /// Dense attention multiply-adds over one round's within-cluster ones.
    pub per_round_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingStudy {
    pub sequence_lengths: Vec<usize>,
    pub dim: usize,
    pub queries_per_cluster: usize,
    pub num_rounds: usize,
    pub seed: u64,
    pub records: Vec<ScalingRecord>,
    /// Least-squares slope of log(median seconds) against log(length).
    pub dense_slope: f64,
    pub smyrf_slope: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScalingOptions {
    pub lengths: Vec<usize>,
    pub dim: usize,
    pub queries_per_cluster: usize,
    pub num_rounds: usize,
    pub seed: u64,
    pub repetitions: usize,
}

fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn median_abs_deviation(xs: &[f64], m: f64) -> f64 {
    median(&xs.iter().map(|x| (x - m).abs()).collect::<Vec<_>>())
}

/// Slope of the least-squares line through `(ln x, ln y)`.
pub fn log_log_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

/// Gaussian instance whose logits have unit variance.
pub fn random_benchmark_instance(n: usize, dim: usize, rng: &mut Rng) -> Result<AttentionInstance> {
    let scale = (dim as f64).powf(-0.25);
    let q = rng.gaussian_matrix(n, dim, scale);
    let k = rng.gaussian_matrix(n, dim, scale);
    let v = rng.gaussian_matrix(n, dim, 1.0);
    AttentionInstance::new(q, k, v)
}

/// Times dense and clustered attention on identical random instances.
///
/// Every measurement runs on a single worker thread so the two methods are
/// compared on equal footing and runs do not disturb each other.
pub fn scaling_study(opts: &ScalingOptions) -> Result<ScalingStudy> {
    if opts.repetitions < MIN_REPETITIONS {
        return Err(SmyrfError::Usage(format!(
            "need at least {MIN_REPETITIONS} repetitions, got {}",
            opts.repetitions
        )));
    }
    if opts.lengths.len() < 2 {
        return Err(SmyrfError::Usage("need at least two sequence lengths".into()));
    }
    if opts.queries_per_cluster == 0 || opts.num_rounds == 0 || opts.dim == 0 {
        return Err(SmyrfError::Usage("cluster size, rounds and dim must be positive".into()));
    }
    if let Some(&bad) = opts.lengths.iter().find(|&&n| n == 0 || !n.is_multiple_of(opts.queries_per_cluster)) {
        return Err(SmyrfError::Usage(format!(
            "length {bad} is not a positive multiple of {}",
            opts.queries_per_cluster
        )));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .map_err(|e| SmyrfError::Usage(format!("cannot build worker pool: {e}")))?;
    let records = pool.install(|| measure_all(opts))?;
    let xs: Vec<f64> = records.iter().map(|r| r.length as f64).collect();
    let dense: Vec<f64> = records.iter().map(|r| r.dense_median_seconds).collect();
    let smyrf: Vec<f64> = records.iter().map(|r| r.smyrf_median_seconds).collect();
    Ok(ScalingStudy {
        sequence_lengths: opts.lengths.clone(),
        dim: opts.dim,
        queries_per_cluster: opts.queries_per_cluster,
        num_rounds: opts.num_rounds,
        seed: opts.seed,
        dense_slope: log_log_slope(&xs, &dense),
        smyrf_slope: log_log_slope(&xs, &smyrf),
        records,
    })
}

/// Repetitions are interleaved across lengths, so a burst of background load
/// spreads over the whole sweep instead of skewing a few lengths.
fn measure_all(opts: &ScalingOptions) -> Result<Vec<ScalingRecord>> {
    let setups = opts
        .lengths
        .iter()
        .enumerate()
        .map(|(i, &n)| {
            let inst = random_benchmark_instance(n, opts.dim, &mut Rng::child(opts.seed, i as u64))?;
            let cfg = SmyrfConfig::with_cluster_size(opts.queries_per_cluster, n, opts.num_rounds, opts.seed)?;
            Ok((inst, cfg))
        })
        .collect::<Result<Vec<_>>>()?;
    let len = setups.len();
    let mut dense_times = vec![Vec::with_capacity(opts.repetitions); len];
    let mut smyrf_times = vec![Vec::with_capacity(opts.repetitions); len];
    let mut dense_ops = vec![OpCounts::default(); len];
    let mut smyrf_ops = vec![OpCounts::default(); len];
    for _ in 0..opts.repetitions {
        for (i, (inst, cfg)) in setups.iter().enumerate() {
            let counter = OpCounter::new();
            let start = Instant::now();
            std::hint::black_box(dense_attention_counted(inst, &counter));
            dense_times[i].push(start.elapsed().as_secs_f64());
            dense_ops[i] = counter.snapshot();

            let counter = OpCounter::new();
            let start = Instant::now();
            std::hint::black_box(smyrf_attention_detailed(inst, cfg, &counter)?);
            smyrf_times[i].push(start.elapsed().as_secs_f64());
            smyrf_ops[i] = counter.snapshot();
        }
    }
    Ok((0..len)
        .map(|i| {
            let dm = median(&dense_times[i]);
            let sm = median(&smyrf_times[i]);
            let per_round = smyrf_ops[i].attention_madds as f64 / opts.num_rounds as f64;
            ScalingRecord {
                length: opts.lengths[i],
                repetitions: opts.repetitions,
                dense_median_seconds: dm,
                dense_mad_seconds: median_abs_deviation(&dense_times[i], dm),
                smyrf_median_seconds: sm,
                smyrf_mad_seconds: median_abs_deviation(&smyrf_times[i], sm),
                dense_ops: dense_ops[i],
                smyrf_ops: smyrf_ops[i],
                per_round_ratio: dense_ops[i].attention_madds as f64 / per_round,
            }
        })
        .collect())
}
