use nalgebra::Vector2;
use serde::{Deserialize, Serialize};

use super::{AssociationError, PairFilterConfig};

pub const LOCAL_DESCRIPTOR_DIM: usize = 64;

pub type LocalDescriptor = [f32; LOCAL_DESCRIPTOR_DIM];

/// Keypoint pixels with their unit-norm local descriptors, one-to-one by index.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct KeypointSet {
    pub pixels: Vec<Vector2<f64>>,
    pub descriptors: Vec<LocalDescriptor>,
}

impl KeypointSet {
    pub fn new(pixels: Vec<Vector2<f64>>, descriptors: Vec<LocalDescriptor>) -> Result<Self, AssociationError> {
        if pixels.len() != descriptors.len() {
            return Err(AssociationError::LengthMismatch {
                pixels: pixels.len(),
                descriptors: descriptors.len(),
            });
        }
        Ok(Self { pixels, descriptors })
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }
}

/// Normalizes a raw descriptor to unit length; a zero vector stays zero.
pub fn normalize_descriptor(v: &mut LocalDescriptor) {
    let n = v.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    if n > 0.0 {
        for x in v.iter_mut() {
            *x = (*x as f64 / n) as f32;
        }
    }
}

#[inline]
pub fn descriptor_distance(a: &LocalDescriptor, b: &LocalDescriptor) -> f32 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f32>()
        .sqrt()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Match {
    pub a: usize,
    pub b: usize,
    pub distance: f32,
}

/// Mutually exclusive keypoint pairs between two frames, sorted by index in
/// frame `a`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MatchSet {
    pub pairs: Vec<Match>,
}

impl MatchSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Match> {
        self.pairs.iter()
    }

    pub fn is_injective(&self) -> bool {
        let mut a: Vec<_> = self.pairs.iter().map(|m| m.a).collect();
        let mut b: Vec<_> = self.pairs.iter().map(|m| m.b).collect();
        a.sort_unstable();
        b.sort_unstable();
        a.windows(2).all(|w| w[0] != w[1]) && b.windows(2).all(|w| w[0] != w[1])
    }
}

/// Exhaustive mutual nearest-neighbour matching with a ratio test on the
/// `a -> b` direction and an absolute distance gate.
pub fn match_descriptors(
    a: &KeypointSet,
    b: &KeypointSet,
    cfg: &PairFilterConfig,
) -> Result<MatchSet, AssociationError> {
    if a.is_empty() || b.is_empty() {
        return Err(AssociationError::EmptyKeypointSet);
    }
    let nb = b.len();
    let mut best_for_b = vec![(f32::INFINITY, usize::MAX); nb];
    let mut best_for_a = Vec::with_capacity(a.len());
    for (i, da) in a.descriptors.iter().enumerate() {
        let mut best = (f32::INFINITY, usize::MAX);
        let mut second = f32::INFINITY;
        for (j, db) in b.descriptors.iter().enumerate() {
            let d = descriptor_distance(da, db);
            if d < best.0 {
                second = best.0;
                best = (d, j);
            } else if d < second {
                second = d;
            }
            let slot = &mut best_for_b[j];
            if d < slot.0 {
                *slot = (d, i);
            }
        }
        best_for_a.push((best, second));
    }
    let pairs = best_for_a
        .into_iter()
        .enumerate()
        .filter_map(|(i, ((d, j), second))| {
            if j == usize::MAX || best_for_b[j].1 != i {
                return None;
            }
            if d > cfg.accept_threshold {
                return None;
            }
            if second.is_finite() && d >= cfg.ratio * second {
                return None;
            }
            Some(Match { a: i, b: j, distance: d })
        })
        .collect();
    Ok(MatchSet { pairs })
}
