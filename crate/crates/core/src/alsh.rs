//! Asymmetric transforms that turn maximum-inner-product search into
//! nearest-neighbour search, and the scalar projection hash used to sort
//! transformed vectors.
//!
//! The default transform pads queries and keys onto a common sphere of
//! radius `√(M_Q² + M_K²)`:
//!
//! ```text
//! F(q) = [q; 0; √(M_Q² + M_K² - ‖q‖²)]
//! G(k) = [k; √(M_Q² + M_K² - ‖k‖²); 0]
//! ‖F(q) - G(k)‖² = 2 (M_Q² + M_K² - q·k)
//! ```
//!
//! so the distance depends on the inner product alone and shrinks as it
//! grows. `Xbox`, `H2lsh` and `L2lsh` are earlier single-query transforms
//! whose distances also carry a `‖q‖` term; they are kept for ablations.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{shape, Result, SmyrfError};
use crate::tensor::{dot, norm2, Matrix, Rng};

/// Relative slack allowed when a vector's norm is compared with its bound.
const NORM_SLACK: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormBounds {
    pub m_q: f64,
    pub m_k: f64,
}

impl NormBounds {
    pub fn new(m_q: f64, m_k: f64) -> Result<Self> {
        if !(m_q.is_finite() && m_k.is_finite() && m_q >= 0.0 && m_k >= 0.0) {
            return Err(SmyrfError::Domain(format!(
                "norm bounds must be finite and non-negative, got ({m_q}, {m_k})"
            )));
        }
        Ok(Self { m_q, m_k })
    }

    /// Exact maxima of the row norms.
    pub fn from_rows(queries: &Matrix, keys: &Matrix) -> Self {
        let max_norm = |m: &Matrix| m.row_iter().map(norm2).fold(0.0, f64::max);
        Self {
            m_q: max_norm(queries),
            m_k: max_norm(keys),
        }
    }

    /// Squared radius of the common sphere.
    pub fn radius_sq(&self) -> f64 {
        self.m_q * self.m_q + self.m_k * self.m_k
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum TransformKind {
    #[default]
    Smyrf,
    /// `m` power terms; `u` scales keys. `None` picks `u` so that the
    /// largest scaled key norm is 0.75.
    L2lsh { m: u32, u: Option<f64> },
    Xbox,
    H2lsh,
}

impl TransformKind {
    pub const L2LSH_DEFAULT_M: u32 = 3;
    pub const L2LSH_TARGET_NORM: f64 = 0.75;

    pub fn l2lsh_default() -> Self {
        Self::L2lsh {
            m: Self::L2LSH_DEFAULT_M,
            u: None,
        }
    }

    /// Width of the transformed vectors for inputs of width `d`.
    pub fn output_dim(&self, d: usize) -> usize {
        match self {
            Self::Smyrf => d + 2,
            Self::Xbox | Self::H2lsh => d + 1,
            Self::L2lsh { m, .. } => d + *m as usize,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Smyrf => "smyrf",
            Self::L2lsh { .. } => "l2lsh",
            Self::Xbox => "xbox",
            Self::H2lsh => "h2lsh",
        }
    }

    fn l2lsh_scale(u: Option<f64>, bounds: &NormBounds) -> f64 {
        u.unwrap_or(if bounds.m_k > 0.0 {
            Self::L2LSH_TARGET_NORM / bounds.m_k
        } else {
            1.0
        })
    }
}

impl fmt::Display for TransformKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TransformKind {
    type Err = SmyrfError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "smyrf" => Ok(Self::Smyrf),
            "l2lsh" => Ok(Self::l2lsh_default()),
            "xbox" => Ok(Self::Xbox),
            "h2lsh" => Ok(Self::H2lsh),
            other => Err(SmyrfError::Usage(format!("unknown transform {other:?}"))),
        }
    }
}

fn check_norm(v: &[f64], bound: f64, what: &str) -> Result<f64> {
    let n = norm2(v);
    if n > bound * (1.0 + NORM_SLACK) {
        return Err(SmyrfError::Domain(format!(
            "{what} norm {n} exceeds bound {bound}"
        )));
    }
    Ok(n)
}

fn pad(v: &[f64], tail: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(v.len() + tail.len());
    out.extend_from_slice(v);
    out.extend_from_slice(tail);
    out
}

pub fn transform_query_smyrf(q: &[f64], bounds: &NormBounds) -> Result<Vec<f64>> {
    let n = check_norm(q, bounds.m_q, "query")?;
    let fill = (bounds.radius_sq() - n * n).max(0.0).sqrt();
    Ok(pad(q, &[0.0, fill]))
}

pub fn transform_key_smyrf(k: &[f64], bounds: &NormBounds) -> Result<Vec<f64>> {
    let n = check_norm(k, bounds.m_k, "key")?;
    let fill = (bounds.radius_sq() - n * n).max(0.0).sqrt();
    Ok(pad(k, &[fill, 0.0]))
}

pub fn transform_query(kind: TransformKind, q: &[f64], bounds: &NormBounds) -> Result<Vec<f64>> {
    match kind {
        TransformKind::Smyrf => transform_query_smyrf(q, bounds),
        TransformKind::Xbox => Ok(pad(q, &[0.0])),
        TransformKind::H2lsh => {
            let n = norm2(q);
            if n == 0.0 {
                return Err(SmyrfError::Domain(
                    "h2lsh query transform is undefined for the zero vector".into(),
                ));
            }
            let scale = bounds.m_k / n;
            let mut out: Vec<f64> = q.iter().map(|v| v * scale).collect();
            out.push(0.0);
            Ok(out)
        }
        TransformKind::L2lsh { m, .. } => Ok(pad(q, &vec![0.5; m as usize])),
    }
}

pub fn transform_key(kind: TransformKind, k: &[f64], bounds: &NormBounds) -> Result<Vec<f64>> {
    match kind {
        TransformKind::Smyrf => transform_key_smyrf(k, bounds),
        TransformKind::Xbox | TransformKind::H2lsh => {
            let n = check_norm(k, bounds.m_k, "key")?;
            Ok(pad(k, &[(bounds.m_k * bounds.m_k - n * n).max(0.0).sqrt()]))
        }
        TransformKind::L2lsh { m, u } => {
            let u = TransformKind::l2lsh_scale(u, bounds);
            let mut out: Vec<f64> = k.iter().map(|v| v * u).collect();
            // ‖Uk‖², ‖Uk‖⁴, …, ‖Uk‖^(2^m)
            let mut power = dot(&out, &out);
            for _ in 0..m {
                out.push(power);
                power *= power;
            }
            Ok(out)
        }
    }
}

/// `(F(q), G(k))` for any transform family.
pub fn transform_pair_baseline(
    kind: TransformKind,
    q: &[f64],
    k: &[f64],
    bounds: &NormBounds,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if q.len() != k.len() {
        return Err(shape(format!("query width {} vs key width {}", q.len(), k.len())));
    }
    Ok((transform_query(kind, q, bounds)?, transform_key(kind, k, bounds)?))
}

/// Transforms every row of a matrix.
pub(crate) fn transform_rows(
    rows: &Matrix,
    limit: usize,
    mut f: impl FnMut(&[f64]) -> Result<Vec<f64>>,
    out_dim: usize,
) -> Result<Matrix> {
    let mut data = Vec::with_capacity(rows.rows() * out_dim);
    for (i, r) in rows.row_iter().enumerate() {
        if i < limit {
            data.extend(f(r)?);
        } else {
            data.extend(std::iter::repeat_n(0.0, out_dim));
        }
    }
    Matrix::new(rows.rows(), out_dim, data)
}

/// One draw of the projection hash `h(u) = u·a + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct HashRoundConfig {
    pub direction: Vec<f64>,
    pub offset: f64,
    pub round_index: u64,
    pub seed: u64,
}

impl HashRoundConfig {
    /// Direction entries are standard normal and the offset is uniform on
    /// `[0, 1)`, both drawn from the child stream `(seed, round_index)`.
    pub fn draw(seed: u64, round_index: u64, dim: usize) -> Self {
        let mut rng = Rng::child(seed, round_index);
        let direction = rng.gaussian_vector(dim);
        let offset = rng.uniform();
        Self {
            direction,
            offset,
            round_index,
            seed,
        }
    }
}

pub fn hash_scalar(v: &[f64], cfg: &HashRoundConfig) -> Result<f64> {
    if v.len() != cfg.direction.len() {
        return Err(shape(format!(
            "hash direction has width {}, vector has {}",
            cfg.direction.len(),
            v.len()
        )));
    }
    Ok(dot(v, &cfg.direction) + cfg.offset)
}
