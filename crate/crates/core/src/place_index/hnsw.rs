use std::cmp::{Ordering, Reverse};
use std::collections::{BinaryHeap, HashMap, HashSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{l2, l2_sq, GlobalDescriptor, IndexError, KeyframeId};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HnswParams {
    /// Neighbour cap per node on upper layers; layer 0 allows `2 * m`.
    pub m: usize,
    pub ef_construction: usize,
    pub ef_search: usize,
    pub seed: u64,
}

impl Default for HnswParams {
    fn default() -> Self {
        Self {
            m: 16,
            ef_construction: 200,
            ef_search: 64,
            seed: 0x5eed,
        }
    }
}

impl HnswParams {
    pub fn validate(&self) -> Result<(), IndexError> {
        if self.m < 2 {
            return Err(IndexError::InvalidParam(format!("m = {} (need >= 2)", self.m)));
        }
        if self.ef_construction == 0 || self.ef_search == 0 {
            return Err(IndexError::InvalidParam("ef values must be positive".into()));
        }
        Ok(())
    }

    pub fn level_multiplier(&self) -> f64 {
        1.0 / (self.m as f64).ln()
    }

    pub(crate) fn max_neighbors(&self, layer: usize) -> usize {
        if layer == 0 {
            2 * self.m
        } else {
            self.m
        }
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Node {
    pub(crate) keyframe: KeyframeId,
    pub(crate) descriptor: GlobalDescriptor,
    /// `links[l]` holds the neighbour node indices on layer `l`.
    pub(crate) links: Vec<Vec<u32>>,
}

impl Node {
    pub(crate) fn level(&self) -> usize {
        self.links.len() - 1
    }
}

#[derive(Clone, Copy, PartialEq)]
struct Scored {
    dist: f32,
    node: u32,
}

impl Eq for Scored {}

impl Ord for Scored {
    fn cmp(&self, other: &Self) -> Ordering {
        self.dist
            .total_cmp(&other.dist)
            .then(self.node.cmp(&other.node))
    }
}

impl PartialOrd for Scored {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct IndexStats {
    pub nodes: usize,
    pub max_level: usize,
    pub nodes_per_layer: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct HnswIndex {
    pub(crate) params: HnswParams,
    pub(crate) nodes: Vec<Node>,
    pub(crate) by_keyframe: HashMap<KeyframeId, u32>,
    pub(crate) entry: Option<u32>,
    pub(crate) rng: ChaCha8Rng,
}

impl HnswIndex {
    pub fn new(params: HnswParams) -> Result<Self, IndexError> {
        params.validate()?;
        Ok(Self {
            params,
            nodes: Vec::new(),
            by_keyframe: HashMap::new(),
            entry: None,
            rng: ChaCha8Rng::seed_from_u64(params.seed),
        })
    }

    pub fn params(&self) -> &HnswParams {
        &self.params
    }

    pub fn set_ef_search(&mut self, ef: usize) {
        self.params.ef_search = ef.max(1);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn contains(&self, id: KeyframeId) -> bool {
        self.by_keyframe.contains_key(&id)
    }

    pub fn descriptor(&self, id: KeyframeId) -> Option<&GlobalDescriptor> {
        self.by_keyframe
            .get(&id)
            .map(|&n| &self.nodes[n as usize].descriptor)
    }

    pub fn iter(&self) -> impl Iterator<Item = (KeyframeId, &GlobalDescriptor)> {
        self.nodes.iter().map(|n| (n.keyframe, &n.descriptor))
    }

    pub fn entry_keyframe(&self) -> Option<KeyframeId> {
        self.entry.map(|e| self.nodes[e as usize].keyframe)
    }

    pub fn max_level(&self) -> Option<usize> {
        self.entry.map(|e| self.nodes[e as usize].level())
    }

    pub fn stats(&self) -> IndexStats {
        let max_level = self.max_level().unwrap_or(0);
        let mut per = vec![0; max_level + 1];
        for n in &self.nodes {
            for slot in per.iter_mut().take(n.level() + 1) {
                *slot += 1;
            }
        }
        IndexStats {
            nodes: self.nodes.len(),
            max_level,
            nodes_per_layer: if self.nodes.is_empty() { vec![] } else { per },
        }
    }

    fn draw_level(&mut self) -> usize {
        // u in (0, 1]
        let u: f64 = 1.0 - self.rng.random::<f64>();
        (-u.ln() * self.params.level_multiplier()).floor() as usize
    }

    #[inline]
    fn dist(&self, q: &[f32], node: u32) -> f32 {
        l2_sq(q, self.nodes[node as usize].descriptor.as_slice())
    }

    fn greedy_closest(&self, q: &[f32], mut cur: u32, layer: usize) -> u32 {
        let mut cur_d = self.dist(q, cur);
        loop {
            let mut changed = false;
            for &nb in &self.nodes[cur as usize].links[layer] {
                let d = self.dist(q, nb);
                if d < cur_d || (d == cur_d && nb < cur) {
                    cur = nb;
                    cur_d = d;
                    changed = true;
                }
            }
            if !changed {
                return cur;
            }
        }
    }

    /// Beam search on one layer. Returns up to `ef` nodes ascending by
    /// squared distance.
    fn search_layer(&self, q: &[f32], entry_points: &[u32], ef: usize, layer: usize) -> Vec<Scored> {
        let mut visited: HashSet<u32> = HashSet::with_capacity(ef * 4);
        let mut candidates: BinaryHeap<Reverse<Scored>> = BinaryHeap::new();
        let mut found: BinaryHeap<Scored> = BinaryHeap::new();
        for &ep in entry_points {
            if visited.insert(ep) {
                let s = Scored {
                    dist: self.dist(q, ep),
                    node: ep,
                };
                candidates.push(Reverse(s));
                found.push(s);
            }
        }
        while found.len() > ef {
            found.pop();
        }
        while let Some(Reverse(c)) = candidates.pop() {
            let worst = *found.peek().expect("non-empty");
            if c.dist > worst.dist && found.len() >= ef {
                break;
            }
            for &nb in &self.nodes[c.node as usize].links[layer] {
                if !visited.insert(nb) {
                    continue;
                }
                let s = Scored {
                    dist: self.dist(q, nb),
                    node: nb,
                };
                let worst = *found.peek().expect("non-empty");
                if found.len() < ef || s < worst {
                    candidates.push(Reverse(s));
                    found.push(s);
                    if found.len() > ef {
                        found.pop();
                    }
                }
            }
        }
        let mut out = found.into_vec();
        out.sort();
        out
    }

    pub fn insert(&mut self, keyframe: KeyframeId, descriptor: GlobalDescriptor) -> Result<(), IndexError> {
        if self.by_keyframe.contains_key(&keyframe) {
            return Err(IndexError::DuplicateId(keyframe));
        }
        let level = self.draw_level();
        let new_id = self.nodes.len() as u32;
        self.nodes.push(Node {
            keyframe,
            descriptor,
            links: vec![Vec::new(); level + 1],
        });
        self.by_keyframe.insert(keyframe, new_id);

        let Some(entry) = self.entry else {
            self.entry = Some(new_id);
            return Ok(());
        };
        let q = self.nodes[new_id as usize].descriptor.as_slice().to_vec();
        let top = self.nodes[entry as usize].level();

        let mut ep = entry;
        for layer in (level + 1..=top).rev() {
            ep = self.greedy_closest(&q, ep, layer);
        }
        let mut eps = vec![ep];
        for layer in (0..=level.min(top)).rev() {
            let found = self.search_layer(&q, &eps, self.params.ef_construction, layer);
            let pool: Vec<Scored> = found.iter().copied().filter(|s| s.node != new_id).collect();
            let chosen = self.select_diverse(&pool, self.params.m);
            self.nodes[new_id as usize].links[layer] = chosen.clone();
            let cap = self.params.max_neighbors(layer);
            for nb in chosen {
                self.link(nb, new_id, layer, cap);
            }
            eps = found.iter().map(|s| s.node).collect();
        }
        if level > top {
            self.entry = Some(new_id);
        }
        Ok(())
    }

    /// Adds `to` to `from`'s list on `layer`, shrinking to the `cap` closest.
    fn link(&mut self, from: u32, to: u32, layer: usize, cap: usize) {
        let links = &mut self.nodes[from as usize].links[layer];
        if links.contains(&to) {
            return;
        }
        links.push(to);
        if links.len() <= cap {
            return;
        }
        let base = self.nodes[from as usize].descriptor.as_slice();
        let mut scored: Vec<Scored> = self.nodes[from as usize].links[layer]
            .iter()
            .map(|&n| Scored {
                dist: l2_sq(base, self.nodes[n as usize].descriptor.as_slice()),
                node: n,
            })
            .collect();
        scored.sort();
        self.nodes[from as usize].links[layer] = self.select_diverse(&scored, cap);
    }

    /// Neighbour selection over candidates sorted by distance to a base
    /// point: a candidate is taken when it is closer to the base than to every
    /// neighbour already taken; remaining slots are filled nearest-first.
    fn select_diverse(&self, sorted: &[Scored], cap: usize) -> Vec<u32> {
        let mut chosen: Vec<u32> = Vec::with_capacity(cap);
        let mut skipped = Vec::new();
        for s in sorted {
            if chosen.len() >= cap {
                break;
            }
            let cand = self.nodes[s.node as usize].descriptor.as_slice();
            let dominated = chosen
                .iter()
                .any(|&c| self.dist(cand, c) < s.dist);
            if dominated {
                skipped.push(s.node);
            } else {
                chosen.push(s.node);
            }
        }
        for n in skipped {
            if chosen.len() >= cap {
                break;
            }
            chosen.push(n);
        }
        chosen
    }

    pub fn search(&self, q: &GlobalDescriptor, top_k: usize) -> Result<Vec<(KeyframeId, f32)>, IndexError> {
        self.search_with_ef(q, top_k, self.params.ef_search)
    }

    pub fn search_with_ef(
        &self,
        q: &GlobalDescriptor,
        top_k: usize,
        ef: usize,
    ) -> Result<Vec<(KeyframeId, f32)>, IndexError> {
        if top_k == 0 {
            return Err(IndexError::InvalidParam("top_k must be >= 1".into()));
        }
        let entry = self.entry.ok_or(IndexError::EmptyIndex)?;
        let qv = q.as_slice();
        let mut ep = entry;
        for layer in (1..=self.nodes[entry as usize].level()).rev() {
            ep = self.greedy_closest(qv, ep, layer);
        }
        let found = self.search_layer(qv, &[ep], ef.max(top_k), 0);
        Ok(found
            .into_iter()
            .take(top_k)
            .map(|s| {
                let n = &self.nodes[s.node as usize];
                (n.keyframe, l2(qv, n.descriptor.as_slice()))
            })
            .collect())
    }

    /// Keyframes whose descriptor lies within `max_distance` (L2 on unit
    /// vectors) among the `ef_search` best candidates.
    pub fn retrieve_covisible(&self, q: &GlobalDescriptor, max_distance: f32) -> Result<Vec<KeyframeId>, IndexError> {
        if !(0.0..=2.0).contains(&max_distance) {
            return Err(IndexError::InvalidParam(format!(
                "similarity threshold {max_distance} outside [0, 2]"
            )));
        }
        if self.is_empty() {
            return Ok(Vec::new());
        }
        let k = self.params.ef_search.min(self.len());
        Ok(self
            .search(q, k)?
            .into_iter()
            .filter(|(_, d)| *d <= max_distance)
            .map(|(id, _)| id)
            .collect())
    }

    /// Checks the structural invariants, returning a description of the first
    /// violation.
    pub fn validate(&self) -> Result<(), String> {
        let Some(entry) = self.entry else {
            return if self.nodes.is_empty() {
                Ok(())
            } else {
                Err("nodes present but no entry point".into())
            };
        };
        let top = self.nodes[entry as usize].level();
        if self.by_keyframe.len() != self.nodes.len() {
            return Err("keyframe map out of sync".into());
        }
        for (i, n) in self.nodes.iter().enumerate() {
            if n.level() > top {
                return Err(format!("node {i} above entry level"));
            }
            if self.by_keyframe.get(&n.keyframe) != Some(&(i as u32)) {
                return Err(format!("node {i} missing from keyframe map"));
            }
            for (layer, links) in n.links.iter().enumerate() {
                if links.len() > self.params.max_neighbors(layer) {
                    return Err(format!("node {i} layer {layer}: {} links over cap", links.len()));
                }
                let mut seen = HashSet::new();
                for &nb in links {
                    if nb as usize >= self.nodes.len() {
                        return Err(format!("node {i} links to missing node {nb}"));
                    }
                    if nb as usize == i {
                        return Err(format!("node {i} links to itself"));
                    }
                    if !seen.insert(nb) {
                        return Err(format!("node {i} has duplicate link {nb}"));
                    }
                    if self.nodes[nb as usize].level() < layer {
                        return Err(format!("node {i} links to {nb} absent from layer {layer}"));
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::place_index::{brute_force_search, GLOBAL_DESCRIPTOR_DIM};
    use rand_distr::{Distribution, StandardNormal};

    fn random_unit(rng: &mut ChaCha8Rng) -> GlobalDescriptor {
        let v: Vec<f32> = (0..GLOBAL_DESCRIPTOR_DIM)
            .map(|_| StandardNormal.sample(rng))
            .collect();
        GlobalDescriptor::new(v).unwrap()
    }

    fn build(n: usize, seed: u64) -> (HnswIndex, Vec<GlobalDescriptor>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut idx = HnswIndex::new(HnswParams::default()).unwrap();
        let mut ds = Vec::new();
        for i in 0..n {
            let d = random_unit(&mut rng);
            idx.insert(i as u64, d.clone()).unwrap();
            ds.push(d);
        }
        (idx, ds)
    }

    #[test]
    fn empty_index_errors() {
        let idx = HnswIndex::new(HnswParams::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(matches!(idx.search(&random_unit(&mut rng), 1), Err(IndexError::EmptyIndex)));
        assert!(idx.retrieve_covisible(&random_unit(&mut rng), 0.5).unwrap().is_empty());
    }

    #[test]
    fn single_element() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut idx = HnswIndex::new(HnswParams::default()).unwrap();
        let d = random_unit(&mut rng);
        idx.insert(42, d.clone()).unwrap();
        assert_eq!(idx.entry_keyframe(), Some(42));
        assert_eq!(idx.search(&d, 1).unwrap(), vec![(42, 0.0)]);
        let other = random_unit(&mut rng);
        assert_eq!(idx.search(&other, 3).unwrap()[0].0, 42);
        assert!(matches!(idx.insert(42, other), Err(IndexError::DuplicateId(42))));
    }

    #[test]
    fn self_retrieval_of_hundred() {
        let (idx, ds) = build(100, 3);
        for (i, d) in ds.iter().enumerate() {
            let r = idx.search(d, 1).unwrap();
            assert_eq!(r[0].0, i as u64);
            assert!(r[0].1 < 1e-6);
        }
    }

    #[test]
    fn invariants_after_every_insert() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut idx = HnswIndex::new(HnswParams { m: 4, ..Default::default() }).unwrap();
        for i in 0..300 {
            idx.insert(i, random_unit(&mut rng)).unwrap();
            idx.validate().unwrap();
        }
        let stats = idx.stats();
        assert!(stats.max_level >= 1);
        assert!(stats.nodes_per_layer.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn top5_overlap_and_sorted() {
        let (idx, ds) = build(1000, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(55);
        let mut hits = 0;
        for _ in 0..100 {
            let q = random_unit(&mut rng);
            // ef 64 finds the exact top-5 set for only ~70% of isotropic
            // 512-D queries; the set-level check runs with a wider beam
            let got = idx.search_with_ef(&q, 5, 128).unwrap();
            assert!(got.windows(2).all(|w| w[0].1 <= w[1].1));
            let want = brute_force_search(ds.iter().enumerate().map(|(i, d)| (i as u64, d)), &q, 5);
            let a: HashSet<_> = got.iter().map(|x| x.0).collect();
            let b: HashSet<_> = want.iter().map(|x| x.0).collect();
            if a == b {
                hits += 1;
            }
        }
        assert!(hits >= 90, "top-5 exact in {hits}/100");
    }

    #[test]
    fn deterministic_under_seed() {
        let (a, _) = build(200, 6);
        let (b, _) = build(200, 6);
        for (x, y) in a.nodes.iter().zip(&b.nodes) {
            assert_eq!(x.links, y.links);
        }
        assert_eq!(a.entry, b.entry);
    }

    #[test]
    fn covisible_threshold() {
        let (mut idx, ds) = build(50, 7);
        idx.insert(1000, ds[3].clone()).unwrap();
        let mut got = idx.retrieve_covisible(&ds[3], 0.0).unwrap();
        got.sort();
        assert_eq!(got, vec![3, 1000]);
        assert!(idx.retrieve_covisible(&ds[3], 2.5).is_err());
    }
}

