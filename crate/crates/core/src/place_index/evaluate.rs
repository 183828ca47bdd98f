use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{brute_force_search, GlobalDescriptor, HnswIndex, HnswParams, IndexError, GLOBAL_DESCRIPTOR_DIM};

/// `n` descriptors drawn uniformly from the unit sphere.
pub fn random_descriptors(n: usize, seed: u64) -> Vec<GlobalDescriptor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let v: Vec<f64> = (0..GLOBAL_DESCRIPTOR_DIM).map(|_| StandardNormal.sample(&mut rng)).collect();
            GlobalDescriptor::from_f64(&v).expect("a Gaussian draw is never the zero vector")
        })
        .collect()
}

/// Recall and latency of the graph index against an exhaustive scan.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecallReport {
    pub size: usize,
    pub queries: usize,
    pub ef_search: usize,
    pub recall_at_1: f64,
    pub build_ms: f64,
    pub hnsw_mean_us: f64,
    pub brute_mean_us: f64,
}

/// Builds an index over `size` random descriptors and queries it with
/// `queries` fresh ones.
pub fn measure_recall(size: usize, queries: usize, params: HnswParams, seed: u64) -> Result<RecallReport, IndexError> {
    let data = random_descriptors(size, seed);
    let qs = random_descriptors(queries, seed ^ 0x9e37_79b9_7f4a_7c15);
    let t = Instant::now();
    let mut index = HnswIndex::new(params)?;
    for (i, d) in data.iter().enumerate() {
        index.insert(i as u64, d.clone())?;
    }
    let build_ms = t.elapsed().as_secs_f64() * 1e3;

    let (mut hits, mut hnsw_s, mut brute_s) = (0usize, 0.0, 0.0);
    for q in &qs {
        let t = Instant::now();
        let got = index.search(q, 1)?;
        hnsw_s += t.elapsed().as_secs_f64();
        let t = Instant::now();
        let want = brute_force_search(data.iter().enumerate().map(|(i, d)| (i as u64, d)), q, 1);
        brute_s += t.elapsed().as_secs_f64();
        hits += (got.first().map(|g| g.0) == want.first().map(|w| w.0)) as usize;
    }
    let per_query_us = |s: f64| if queries == 0 { 0.0 } else { s * 1e6 / queries as f64 };
    Ok(RecallReport {
        size,
        queries,
        ef_search: params.ef_search,
        recall_at_1: if queries == 0 { 1.0 } else { hits as f64 / queries as f64 },
        build_ms,
        hnsw_mean_us: per_query_us(hnsw_s),
        brute_mean_us: per_query_us(brute_s),
    })
}
