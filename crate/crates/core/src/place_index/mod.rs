//! Incremental keyframe database over 512-D global descriptors.
//!
//! Keyframes are inserted one at a time as they arrive and are never removed.
//! Retrieval uses a hierarchical navigable small-world graph; the distance is
//! L2 between unit vectors, which orders results the same way as cosine
//! similarity.

mod evaluate;
mod hnsw;
mod snapshot;

pub use evaluate::{measure_recall, random_descriptors, RecallReport};
pub use hnsw::{HnswIndex, HnswParams, IndexStats};
pub use snapshot::{SNAPSHOT_MAGIC, SNAPSHOT_VERSION};

use parking_lot::RwLock;
use thiserror::Error;

pub const GLOBAL_DESCRIPTOR_DIM: usize = 512;

pub type KeyframeId = u64;

#[derive(Debug, Error)]
pub enum IndexError {
    #[error("keyframe {0} already present")]
    DuplicateId(KeyframeId),
    #[error("index is empty")]
    EmptyIndex,
    #[error("descriptor must have {expected} finite components with non-zero norm (got {got})")]
    BadDescriptor { expected: usize, got: usize },
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
    #[error("snapshot: bad magic")]
    BadMagic,
    #[error("snapshot: unsupported version {0}")]
    UnsupportedVersion(u32),
    #[error("snapshot: descriptor dimension {0} does not match {GLOBAL_DESCRIPTOR_DIM}")]
    DimensionMismatch(u32),
    #[error("snapshot: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// L2-normalized 512-D place descriptor.
#[derive(Clone, Debug, PartialEq)]
pub struct GlobalDescriptor {
    values: Vec<f32>,
}

impl GlobalDescriptor {
    /// Normalizes `values`; rejects wrong dimension, non-finite entries or a
    /// zero vector.
    pub fn new(values: Vec<f32>) -> Result<Self, IndexError> {
        let bad = IndexError::BadDescriptor {
            expected: GLOBAL_DESCRIPTOR_DIM,
            got: values.len(),
        };
        if values.len() != GLOBAL_DESCRIPTOR_DIM || values.iter().any(|v| !v.is_finite()) {
            return Err(bad);
        }
        let norm = values.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
        if norm < 1e-12 {
            return Err(bad);
        }
        Ok(Self {
            values: values.iter().map(|v| (*v as f64 / norm) as f32).collect(),
        })
    }

    pub fn from_f64(values: &[f64]) -> Result<Self, IndexError> {
        Self::new(values.iter().map(|v| *v as f32).collect())
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.values
    }

    pub fn distance(&self, other: &GlobalDescriptor) -> f32 {
        l2(&self.values, &other.values)
    }
}

#[inline]
pub(crate) fn l2_sq(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[inline]
pub(crate) fn l2(a: &[f32], b: &[f32]) -> f32 {
    l2_sq(a, b).sqrt()
}

/// Exhaustive top-k scan, ascending by distance, ties broken by id.
pub fn brute_force_search<'a, I>(items: I, q: &GlobalDescriptor, top_k: usize) -> Vec<(KeyframeId, f32)>
where
    I: IntoIterator<Item = (KeyframeId, &'a GlobalDescriptor)>,
{
    let mut all: Vec<(KeyframeId, f32)> = items
        .into_iter()
        .map(|(id, d)| (id, q.distance(d)))
        .collect();
    all.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    all.truncate(top_k);
    all
}

/// Index shared between one inserting thread and concurrent searchers.
/// Searches observe the graph strictly before or after each insert.
#[derive(Debug)]
pub struct SharedPlaceIndex {
    inner: RwLock<HnswIndex>,
}

impl SharedPlaceIndex {
    pub fn new(index: HnswIndex) -> Self {
        Self {
            inner: RwLock::new(index),
        }
    }

    pub fn insert(&self, id: KeyframeId, d: GlobalDescriptor) -> Result<(), IndexError> {
        self.inner.write().insert(id, d)
    }

    pub fn search(&self, q: &GlobalDescriptor, top_k: usize) -> Result<Vec<(KeyframeId, f32)>, IndexError> {
        self.inner.read().search(q, top_k)
    }

    pub fn len(&self) -> usize {
        self.inner.read().len()
    }

    pub fn is_empty(&self) -> bool {
        self.inner.read().is_empty()
    }

    pub fn read(&self) -> parking_lot::RwLockReadGuard<'_, HnswIndex> {
        self.inner.read()
    }
}
