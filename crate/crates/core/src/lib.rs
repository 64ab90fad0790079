//! Approximate attention by balanced clustering of queries and keys.
//!
//! Queries and keys are mapped through an asymmetric transform onto a common
//! sphere, so that Euclidean distance depends only on the inner product.
//! A random projection then orders both sets on the real line, each set is
//! cut into `L` equal-size runs, and every query attends only to the keys in
//! the matching run. Several independent hashing rounds are merged by the
//! softmax mass each one captured.
//!
//! Alongside the pipeline the crate carries the exact references used to
//! judge it: dense attention, an exhaustive balanced-partition search for
//! small instances, generators for block-structured inputs, diagnostics,
//! and the on-disk container and report formats used by the CLI.

pub mod alsh;
pub mod analysis;
pub mod attention;
pub mod clustering;
pub mod container;
pub mod counter;
pub mod error;
pub mod oracle;
pub mod report;
pub mod tensor;

pub use alsh::{HashRoundConfig, NormBounds, TransformKind};
pub use attention::{
    clustered_attention, dense_attention, frobenius_objective, mask_product, AttentionInstance,
    ClusterAssignment, MaskParams,
};
pub use clustering::{merge_rounds, pad_to_divisible, run_round, smyrf_attention, RoundResult, SmyrfConfig};
pub use counter::{OpCounter, OpCounts};
pub use error::{Result, SmyrfError};
pub use tensor::{Matrix, Rng};
