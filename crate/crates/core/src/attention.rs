//! Dense attention, the cluster mask, blockwise clustered attention and the
//! Frobenius gap between clustered and dense softmax maps.
//!
//! Attention here is unscaled: weights are `softmax(q·k)`. Callers wanting
//! the usual `1/√d` temperature should scale the queries first.

use std::ops::Range;

use rayon::prelude::*;

use crate::counter::OpCounter;
use crate::error::{shape, Result, SmyrfError};
use crate::tensor::{dot, matmul_transposed, softmax_in_place, softmax_rows, Matrix};

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionInstance {
    queries: Matrix,
    keys: Matrix,
    values: Matrix,
}

impl AttentionInstance {
    pub fn new(queries: Matrix, keys: Matrix, values: Matrix) -> Result<Self> {
        if queries.cols() != keys.cols() {
            return Err(shape(format!(
                "query width {} differs from key width {}",
                queries.cols(),
                keys.cols()
            )));
        }
        if keys.rows() != values.rows() {
            return Err(shape(format!(
                "{} keys but {} value rows",
                keys.rows(),
                values.rows()
            )));
        }
        if queries.rows() == 0 || keys.rows() == 0 {
            return Err(shape("attention needs at least one query and one key"));
        }
        Ok(Self {
            queries,
            keys,
            values,
        })
    }

    pub fn queries(&self) -> &Matrix {
        &self.queries
    }

    pub fn keys(&self) -> &Matrix {
        &self.keys
    }

    pub fn values(&self) -> &Matrix {
        &self.values
    }

    pub fn n_queries(&self) -> usize {
        self.queries.rows()
    }

    pub fn n_keys(&self) -> usize {
        self.keys.rows()
    }

    pub fn dim(&self) -> usize {
        self.queries.cols()
    }

    pub fn value_dim(&self) -> usize {
        self.values.cols()
    }

    /// `(N_q, N_k, d, d_v)`.
    pub fn shape(&self) -> (usize, usize, usize, usize) {
        (self.n_queries(), self.n_keys(), self.dim(), self.value_dim())
    }

    pub fn into_parts(self) -> (Matrix, Matrix, Matrix) {
        (self.queries, self.keys, self.values)
    }

    /// The logit matrix `P = Q·Kᵀ`.
    pub fn logits(&self) -> Matrix {
        matmul_transposed(&self.queries, &self.keys).expect("widths checked at construction")
    }
}

/// A balanced joint partition: every cluster holds exactly `N_q/L` queries
/// and `N_k/L` keys.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClusterAssignment {
    num_clusters: usize,
    query_cluster: Vec<usize>,
    key_cluster: Vec<usize>,
}

impl ClusterAssignment {
    pub fn new(num_clusters: usize, query_cluster: Vec<usize>, key_cluster: Vec<usize>) -> Result<Self> {
        if num_clusters == 0 {
            return Err(SmyrfError::Invariant("need at least one cluster".into()));
        }
        for (what, labels) in [("queries", &query_cluster), ("keys", &key_cluster)] {
            let n = labels.len();
            if n % num_clusters != 0 {
                return Err(SmyrfError::Invariant(format!(
                    "{num_clusters} clusters do not divide {n} {what}"
                )));
            }
            let per = n / num_clusters;
            let mut counts = vec![0usize; num_clusters];
            for &c in labels.iter() {
                if c >= num_clusters {
                    return Err(SmyrfError::Invariant(format!(
                        "cluster id {c} out of range for {num_clusters} clusters"
                    )));
                }
                counts[c] += 1;
            }
            if let Some(c) = counts.iter().position(|&k| k != per) {
                return Err(SmyrfError::Invariant(format!(
                    "cluster {c} holds {} {what}, expected {per}",
                    counts[c]
                )));
            }
        }
        Ok(Self {
            num_clusters,
            query_cluster,
            key_cluster,
        })
    }

    /// Everything in one cluster.
    pub fn single(n_queries: usize, n_keys: usize) -> Self {
        Self {
            num_clusters: 1,
            query_cluster: vec![0; n_queries],
            key_cluster: vec![0; n_keys],
        }
    }

    pub fn num_clusters(&self) -> usize {
        self.num_clusters
    }

    pub fn query_cluster(&self) -> &[usize] {
        &self.query_cluster
    }

    pub fn key_cluster(&self) -> &[usize] {
        &self.key_cluster
    }

    pub fn n_queries(&self) -> usize {
        self.query_cluster.len()
    }

    pub fn n_keys(&self) -> usize {
        self.key_cluster.len()
    }

    pub fn queries_per_cluster(&self) -> usize {
        self.n_queries() / self.num_clusters
    }

    pub fn keys_per_cluster(&self) -> usize {
        self.n_keys() / self.num_clusters
    }

    /// Per-cluster member lists `(queries, keys)`, each in ascending index order.
    pub fn members(&self) -> (Vec<Vec<usize>>, Vec<Vec<usize>>) {
        let group = |labels: &[usize], per: usize| {
            let mut out = vec![Vec::with_capacity(per); self.num_clusters];
            for (i, &c) in labels.iter().enumerate() {
                out[c].push(i);
            }
            out
        };
        (
            group(&self.query_cluster, self.queries_per_cluster()),
            group(&self.key_cluster, self.keys_per_cluster()),
        )
    }

    /// Renames cluster `c` to `perm[c]`.
    pub fn relabel(&self, perm: &[usize]) -> Result<Self> {
        Self::new(
            self.num_clusters,
            self.query_cluster.iter().map(|&c| perm[c]).collect(),
            self.key_cluster.iter().map(|&c| perm[c]).collect(),
        )
    }

    fn check_covers(&self, n_queries: usize, n_keys: usize) -> Result<()> {
        if self.n_queries() != n_queries || self.n_keys() != n_keys {
            return Err(shape(format!(
                "assignment covers {}x{}, instance is {}x{}",
                self.n_queries(),
                self.n_keys(),
                n_queries,
                n_keys
            )));
        }
        Ok(())
    }
}

/// The out-of-cluster replacement value. `epsilon == 0` means hard
/// exclusion; otherwise masked logits become `ln(epsilon)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskParams {
    epsilon: f64,
}

impl MaskParams {
    pub fn new(epsilon: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&epsilon) {
            return Err(SmyrfError::Domain(format!(
                "mask epsilon {epsilon} outside [0, 1)"
            )));
        }
        Ok(Self { epsilon })
    }

    pub fn hard() -> Self {
        Self { epsilon: 0.0 }
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    /// `a = -ln(epsilon)`, or `None` for hard masking.
    pub fn constant(&self) -> Option<f64> {
        (self.epsilon > 0.0).then(|| -self.epsilon.ln())
    }

    fn fill(&self) -> f64 {
        self.constant().map_or(f64::NEG_INFINITY, |a| -a)
    }
}

/// Replaces every cross-cluster entry of `p` with `-a`. Under hard masking
/// those entries become `-inf`, which softmax maps to exactly zero weight.
pub fn mask_product(p: &Matrix, assign: &ClusterAssignment, mask: MaskParams) -> Result<Matrix> {
    assign.check_covers(p.rows(), p.cols())?;
    let fill = mask.fill();
    let qc = assign.query_cluster();
    let kc = assign.key_cluster();
    let data = (0..p.rows())
        .flat_map(|i| {
            (0..p.cols()).map(move |j| if qc[i] == kc[j] { p.get(i, j) } else { fill })
        })
        .collect();
    Ok(Matrix::from_raw(p.rows(), p.cols(), data))
}

fn weighted_values(weights: &[f64], values: &Matrix, keys: impl Iterator<Item = usize>, out: &mut [f64]) {
    out.fill(0.0);
    for (w, k) in weights.iter().zip(keys) {
        for (o, v) in out.iter_mut().zip(values.row(k)) {
            *o += w * v;
        }
    }
}

pub fn dense_attention(inst: &AttentionInstance) -> Matrix {
    dense_attention_counted(inst, &OpCounter::new())
}

pub fn dense_attention_counted(inst: &AttentionInstance, counter: &OpCounter) -> Matrix {
    let (nq, nk, d, dv) = inst.shape();
    let mut out = Matrix::zeros(nq, dv);
    if dv > 0 {
        out.data_mut()
            .par_chunks_mut(dv)
            .enumerate()
            .for_each_init(
                || vec![0.0; nk],
                |logits, (i, out_row)| {
                    let q = inst.queries.row(i);
                    for (l, k) in logits.iter_mut().zip(inst.keys.row_iter()) {
                        *l = dot(q, k);
                    }
                    softmax_in_place(logits);
                    weighted_values(logits, &inst.values, 0..nk, out_row);
                },
            );
    }
    counter.add_attention((nq * nk * d) as u64);
    out
}

/// Per-query result of attention restricted to one cluster.
#[derive(Debug, Clone)]
pub(crate) struct BlockAttention {
    pub output: Matrix,
    /// Largest in-cluster logit per query.
    pub shift: Vec<f64>,
    /// `Σ exp(q·k - shift)` over the query's cluster; always ≥ 1.
    pub mass: Vec<f64>,
}

/// `(query index, output row, shift, mass)` for one query.
type QueryResult = (usize, Vec<f64>, f64, f64);

/// Attention computed cluster by cluster. Only a `(N_q/L) × (N_k/L)` logit
/// block is alive at a time per cluster.
pub(crate) fn block_attention(
    inst: &AttentionInstance,
    assign: &ClusterAssignment,
    counter: &OpCounter,
) -> Result<BlockAttention> {
    let (nq, nk, d, dv) = inst.shape();
    assign.check_covers(nq, nk)?;
    let (q_members, k_members) = assign.members();
    let cq = assign.queries_per_cluster();
    let ck = assign.keys_per_cluster();

    let blocks: Vec<Vec<QueryResult>> = q_members
        .par_iter()
        .zip(k_members.par_iter())
        .map(|(qs, ks)| {
            let mut logits = vec![0.0; ks.len()];
            qs.iter()
                .map(|&qi| {
                    let q = inst.queries.row(qi);
                    for (l, &kj) in logits.iter_mut().zip(ks) {
                        *l = dot(q, inst.keys.row(kj));
                    }
                    let (max, sum) = softmax_in_place(&mut logits);
                    let mut row = vec![0.0; dv];
                    weighted_values(&logits, &inst.values, ks.iter().copied(), &mut row);
                    (qi, row, max, sum)
                })
                .collect()
        })
        .collect();
    counter.add_attention((assign.num_clusters() * cq * ck * d) as u64);

    let mut output = Matrix::zeros(nq, dv);
    let mut shift = vec![0.0; nq];
    let mut mass = vec![0.0; nq];
    for (qi, row, max, sum) in blocks.into_iter().flatten() {
        output.row_mut(qi).copy_from_slice(&row);
        shift[qi] = max;
        mass[qi] = sum;
    }
    Ok(BlockAttention { output, shift, mass })
}

/// Each query attends only to the keys sharing its cluster.
pub fn clustered_attention(inst: &AttentionInstance, assign: &ClusterAssignment) -> Result<Matrix> {
    Ok(block_attention(inst, assign, &OpCounter::new())?.output)
}

/// `‖softmax(P) - softmax(mask(P))‖` accumulated over the given query rows,
/// from precomputed logits `p` and dense softmax `s`.
pub(crate) fn objective_from_logits(
    p: &Matrix,
    s: &Matrix,
    assign: &ClusterAssignment,
    rows: Range<usize>,
) -> f64 {
    objective_from_labels(p, s, assign.query_cluster(), assign.key_cluster(), rows)
}

/// Same as [`objective_from_logits`] over raw label slices.
pub(crate) fn objective_from_labels(
    p: &Matrix,
    s: &Matrix,
    qc: &[usize],
    kc: &[usize],
    rows: Range<usize>,
) -> f64 {
    let mut total = 0.0;
    for i in rows {
        let c = qc[i];
        let pr = p.row(i);
        let sr = s.row(i);
        let max = pr
            .iter()
            .zip(kc)
            .filter(|(_, &k)| k == c)
            .map(|(v, _)| *v)
            .fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = pr
            .iter()
            .zip(kc)
            .filter(|(_, &k)| k == c)
            .map(|(v, _)| (v - max).exp())
            .sum();
        for j in 0..pr.len() {
            let clustered = if kc[j] == c { (pr[j] - max).exp() / sum } else { 0.0 };
            let diff = clustered - sr[j];
            total += diff * diff;
        }
    }
    total.sqrt()
}

/// Frobenius distance between the hard-masked and dense softmax maps.
pub fn frobenius_objective(inst: &AttentionInstance, assign: &ClusterAssignment) -> Result<f64> {
    frobenius_objective_rows(inst, assign, 0..inst.n_queries())
}

pub(crate) fn frobenius_objective_rows(
    inst: &AttentionInstance,
    assign: &ClusterAssignment,
    rows: Range<usize>,
) -> Result<f64> {
    assign.check_covers(inst.n_queries(), inst.n_keys())?;
    let p = inst.logits();
    let s = softmax_rows(&p)?;
    Ok(objective_from_logits(&p, &s, assign, rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{frobenius_norm, matmul, Rng};

    fn random_instance(rng: &mut Rng, nq: usize, nk: usize, d: usize, dv: usize) -> AttentionInstance {
        AttentionInstance::new(
            rng.gaussian_matrix(nq, d, 1.0),
            rng.gaussian_matrix(nk, d, 1.0),
            rng.gaussian_matrix(nk, dv, 1.0),
        )
        .unwrap()
    }

    fn random_assignment(rng: &mut Rng, nq: usize, nk: usize, l: usize) -> ClusterAssignment {
        let mut qs: Vec<usize> = (0..nq).map(|i| i * l / nq).collect();
        let mut ks: Vec<usize> = (0..nk).map(|i| i * l / nk).collect();
        rng.shuffle(&mut qs);
        rng.shuffle(&mut ks);
        ClusterAssignment::new(l, qs, ks).unwrap()
    }

    /// Direct scalar transcription of the attention formula.
    fn scalar_attention(inst: &AttentionInstance) -> Matrix {
        let (nq, nk, d, dv) = inst.shape();
        Matrix::from_fn(nq, dv, |i, c| {
            let mut num = 0.0;
            let mut den = 0.0;
            for j in 0..nk {
                let mut s = 0.0;
                for t in 0..d {
                    s += inst.queries().get(i, t) * inst.keys().get(j, t);
                }
                let w = s.exp();
                num += w * inst.values().get(j, c);
                den += w;
            }
            num / den
        })
    }

    fn max_abs_diff(a: &Matrix, b: &Matrix) -> f64 {
        a.data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn rejects_inconsistent_shapes() {
        let err = AttentionInstance::new(Matrix::zeros(2, 3), Matrix::zeros(2, 4), Matrix::zeros(2, 1));
        assert!(matches!(err, Err(SmyrfError::Shape(_))));
        let err = AttentionInstance::new(Matrix::zeros(2, 3), Matrix::zeros(2, 3), Matrix::zeros(3, 1));
        assert!(matches!(err, Err(SmyrfError::Shape(_))));
    }

    #[test]
    fn dense_single_key_returns_its_value() {
        let mut rng = Rng::new(1);
        let inst = AttentionInstance::new(
            rng.gaussian_matrix(5, 3, 1.0),
            rng.gaussian_matrix(1, 3, 1.0),
            Matrix::from_rows(&[vec![2.0, -1.0]]).unwrap(),
        )
        .unwrap();
        let out = dense_attention(&inst);
        for r in out.row_iter() {
            assert_eq!(r, &[2.0, -1.0]);
        }
    }

    #[test]
    fn dense_identical_keys_average_values() {
        let k = Matrix::from_rows(&[vec![0.3, -0.7], vec![0.3, -0.7]]).unwrap();
        let v = Matrix::from_rows(&[vec![1.0, 4.0], vec![3.0, 0.0]]).unwrap();
        let q = Matrix::from_rows(&[vec![5.0, 2.0]]).unwrap();
        let out = dense_attention(&AttentionInstance::new(q, k, v).unwrap());
        assert!((out.get(0, 0) - 2.0).abs() < 1e-15);
        assert!((out.get(0, 1) - 2.0).abs() < 1e-15);
    }

    #[test]
    fn dense_matches_scalar_oracle_and_matrix_form() {
        let mut rng = Rng::new(2);
        let inst = random_instance(&mut rng, 8, 8, 4, 4);
        let out = dense_attention(&inst);
        assert!(max_abs_diff(&out, &scalar_attention(&inst)) < 1e-10);
        let matrix_form = matmul(&softmax_rows(&inst.logits()).unwrap(), inst.values()).unwrap();
        assert!(max_abs_diff(&out, &matrix_form) < 1e-10);
    }

    #[test]
    fn dense_counts_every_pair() {
        let mut rng = Rng::new(2);
        let inst = random_instance(&mut rng, 6, 10, 3, 2);
        let c = OpCounter::new();
        dense_attention_counted(&inst, &c);
        assert_eq!(c.snapshot().attention_madds, 6 * 10 * 3);
    }

    #[test]
    fn assignment_validation() {
        assert!(ClusterAssignment::new(2, vec![0, 0, 1, 1], vec![1, 0]).is_ok());
        assert!(matches!(
            ClusterAssignment::new(2, vec![0, 0, 0, 1], vec![1, 0]),
            Err(SmyrfError::Invariant(_))
        ));
        assert!(ClusterAssignment::new(2, vec![0, 2], vec![1, 0]).is_err());
        assert!(ClusterAssignment::new(2, vec![0, 1, 0], vec![1, 0]).is_err());
        assert!(ClusterAssignment::new(0, vec![], vec![]).is_err());
    }

    #[test]
    fn mask_single_cluster_is_identity() {
        let mut rng = Rng::new(3);
        let p = rng.gaussian_matrix(4, 6, 1.0);
        let m = mask_product(&p, &ClusterAssignment::single(4, 6), MaskParams::new(0.1).unwrap()).unwrap();
        assert_eq!(m, p);
    }

    #[test]
    fn mask_with_finite_epsilon() {
        let p = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let assign = ClusterAssignment::new(2, vec![0, 1], vec![0, 1]).unwrap();
        let mask = MaskParams::new((-10f64).exp()).unwrap();
        let m = mask_product(&p, &assign, mask).unwrap();
        assert_eq!(m.get(0, 0), 1.0);
        assert_eq!(m.get(1, 1), 4.0);
        assert!((m.get(0, 1) + 10.0).abs() < 1e-12);
        assert!((m.get(1, 0) + 10.0).abs() < 1e-12);
    }

    #[test]
    fn mask_params_domain() {
        assert!(MaskParams::new(1.0).is_err());
        assert!(MaskParams::new(-0.1).is_err());
        assert_eq!(MaskParams::hard().constant(), None);
    }

    #[test]
    fn hard_mask_matches_per_cluster_softmax() {
        let mut rng = Rng::new(4);
        let p = rng.gaussian_matrix(6, 9, 2.0);
        let assign = random_assignment(&mut rng, 6, 9, 3);
        let s = softmax_rows(&mask_product(&p, &assign, MaskParams::hard()).unwrap()).unwrap();
        for i in 0..6 {
            let c = assign.query_cluster()[i];
            let keys: Vec<usize> = (0..9).filter(|&j| assign.key_cluster()[j] == c).collect();
            let den: f64 = keys.iter().map(|&j| p.get(i, j).exp()).sum();
            let total: f64 = s.row(i).iter().sum();
            assert!((total - 1.0).abs() < 1e-12);
            for j in 0..9 {
                if assign.key_cluster()[j] == c {
                    assert!((s.get(i, j) - p.get(i, j).exp() / den).abs() < 1e-12);
                } else {
                    assert_eq!(s.get(i, j), 0.0);
                }
            }
        }
    }

    #[test]
    fn soft_mask_converges_to_hard() {
        let mut rng = Rng::new(5);
        let p = Matrix::from_fn(8, 8, |_, _| 40.0 * rng.uniform() - 20.0);
        let assign = random_assignment(&mut rng, 8, 8, 2);
        let hard = softmax_rows(&mask_product(&p, &assign, MaskParams::hard()).unwrap()).unwrap();
        let soft = softmax_rows(&mask_product(&p, &assign, MaskParams::new((-30f64).exp()).unwrap()).unwrap()).unwrap();
        assert!(max_abs_diff(&hard, &soft) < 1e-8);
    }

    #[test]
    fn clustered_single_cluster_is_dense() {
        let mut rng = Rng::new(6);
        let inst = random_instance(&mut rng, 12, 7, 5, 3);
        let out = clustered_attention(&inst, &ClusterAssignment::single(12, 7)).unwrap();
        assert!(max_abs_diff(&out, &dense_attention(&inst)) < 1e-12);
    }

    #[test]
    fn clustered_matches_mask_then_softmax() {
        let mut rng = Rng::new(7);
        let inst = random_instance(&mut rng, 16, 8, 8, 4);
        let assign = random_assignment(&mut rng, 16, 8, 4);
        let out = clustered_attention(&inst, &assign).unwrap();
        let masked = mask_product(&inst.logits(), &assign, MaskParams::hard()).unwrap();
        let oracle = matmul(&softmax_rows(&masked).unwrap(), inst.values()).unwrap();
        assert!(max_abs_diff(&out, &oracle) < 1e-10);
    }

    /// Two clusters whose cross inner products are -1e6.
    fn block_diagonal() -> (AttentionInstance, ClusterAssignment) {
        let big = 1000.0;
        let q = Matrix::from_rows(&[
            vec![big, 0.0, 0.1],
            vec![big, 0.0, -0.2],
            vec![0.0, big, 0.3],
            vec![0.0, big, 0.0],
        ])
        .unwrap();
        let k = Matrix::from_rows(&[
            vec![0.001, -big, 0.5],
            vec![0.002, -big, -1.0],
            vec![-big, 0.001, 2.0],
            vec![-big, 0.003, 1.0],
        ])
        .unwrap();
        // Cross pairs are -1e6 + small; within pairs are small.
        let v = Matrix::from_rows(&[vec![1.0], vec![2.0], vec![3.0], vec![4.0]]).unwrap();
        let inst = AttentionInstance::new(q, k, v).unwrap();
        let assign = ClusterAssignment::new(2, vec![1, 1, 0, 0], vec![1, 1, 0, 0]).unwrap();
        (inst, assign)
    }

    #[test]
    fn block_diagonal_clustered_equals_dense() {
        let (inst, assign) = block_diagonal();
        let p = inst.logits();
        assert!(p.get(0, 2) < -9.9e5 && p.get(2, 0) < -9.9e5);
        let out = clustered_attention(&inst, &assign).unwrap();
        assert!(max_abs_diff(&out, &dense_attention(&inst)) < 1e-6);
        assert!(frobenius_objective(&inst, &assign).unwrap() < 1e-5);
    }

    #[test]
    fn clustered_rejects_wrong_coverage() {
        let mut rng = Rng::new(8);
        let inst = random_instance(&mut rng, 4, 4, 2, 2);
        let assign = ClusterAssignment::single(6, 4);
        assert!(clustered_attention(&inst, &assign).is_err());
    }

    #[test]
    fn objective_zero_for_single_cluster() {
        let mut rng = Rng::new(9);
        let inst = random_instance(&mut rng, 5, 5, 3, 2);
        assert_eq!(frobenius_objective(&inst, &ClusterAssignment::single(5, 5)).unwrap(), 0.0);
    }

    #[test]
    fn objective_matches_materialised_maps() {
        let mut rng = Rng::new(10);
        let inst = random_instance(&mut rng, 8, 12, 4, 2);
        let assign = random_assignment(&mut rng, 8, 12, 4);
        let p = inst.logits();
        let dense = softmax_rows(&p).unwrap();
        let clustered = softmax_rows(&mask_product(&p, &assign, MaskParams::hard()).unwrap()).unwrap();
        let oracle = frobenius_norm(&clustered.sub(&dense).unwrap());
        let got = frobenius_objective(&inst, &assign).unwrap();
        assert!((got - oracle).abs() < 1e-10);
        assert!(got > 0.0);
    }

    mod props {
        use super::*;
        use crate::tensor::Rng;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(48))]

            #[test]
            fn output_is_convex_combination(seed in any::<u64>(), l in 1usize..4) {
                let mut rng = Rng::new(seed);
                let inst = random_instance(&mut rng, 4 * l, 3 * l, 3, 2);
                let assign = random_assignment(&mut rng, 4 * l, 3 * l, l);
                let out = clustered_attention(&inst, &assign).unwrap();
                let (_, km) = assign.members();
                for i in 0..inst.n_queries() {
                    let ks = &km[assign.query_cluster()[i]];
                    for c in 0..2 {
                        let lo = ks.iter().map(|&k| inst.values().get(k, c)).fold(f64::INFINITY, f64::min);
                        let hi = ks.iter().map(|&k| inst.values().get(k, c)).fold(f64::NEG_INFINITY, f64::max);
                        let v = out.get(i, c);
                        prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
                    }
                }
            }

            #[test]
            fn objective_ignores_cluster_names(seed in any::<u64>()) {
                let mut rng = Rng::new(seed);
                let inst = random_instance(&mut rng, 6, 9, 3, 1);
                let assign = random_assignment(&mut rng, 6, 9, 3);
                let relabelled = assign.relabel(&[2, 0, 1]).unwrap();
                let a = frobenius_objective(&inst, &assign).unwrap();
                let b = frobenius_objective(&inst, &relabelled).unwrap();
                prop_assert_eq!(a, b);
            }
        }
    }
}
