use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

/// Instrumentation for the work a call performs. Counts are multiply-adds,
/// so one inner product of width `d` adds `d`.
#[derive(Debug, Default)]
pub struct OpCounter {
    attention_madds: AtomicU64,
    hash_madds: AtomicU64,
    sort_comparisons: AtomicU64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpCounts {
    /// Query-key inner products used for attention weights.
    pub attention_madds: u64,
    /// Projections of transformed vectors onto hash directions.
    pub hash_madds: u64,
    pub sort_comparisons: u64,
}

impl OpCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub(crate) fn add_attention(&self, n: u64) {
        self.attention_madds.fetch_add(n, Ordering::Relaxed);
    }

    pub(crate) fn add_hash(&self, n: u64) {
        self.hash_madds.fetch_add(n, Ordering::Relaxed);
    }

    pub(crate) fn add_comparisons(&self, n: u64) {
        self.sort_comparisons.fetch_add(n, Ordering::Relaxed);
    }

    pub fn snapshot(&self) -> OpCounts {
        OpCounts {
            attention_madds: self.attention_madds.load(Ordering::Relaxed),
            hash_madds: self.hash_madds.load(Ordering::Relaxed),
            sort_comparisons: self.sort_comparisons.load(Ordering::Relaxed),
        }
    }
}
