//! Versioned little-endian snapshot of an [`HnswIndex`].
//!
//! ```text
//! header : magic "AGPI" | version u32 | dim u32 | m u32 | ef_construction u32
//!          | ef_search u32 | seed u64 | node_count u64 | entry_id u64
//! node   : id u64 | level u32 | descriptor dim x f32
//!          | (level + 1) x { count u32 | count x neighbour id u64 }
//! ```
//! Nodes are written in insertion order. `entry_id` is `u64::MAX` for an
//! empty index.

use std::collections::HashMap;
use std::io::{Read, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::hnsw::{HnswIndex, HnswParams, Node};
use super::{GlobalDescriptor, IndexError, GLOBAL_DESCRIPTOR_DIM};

pub const SNAPSHOT_MAGIC: [u8; 4] = *b"AGPI";
pub const SNAPSHOT_VERSION: u32 = 1;

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], IndexError> {
        if self.buf.len() - self.pos < n {
            return Err(IndexError::Corrupt(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, IndexError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, IndexError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32, IndexError> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

impl HnswIndex {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&SNAPSHOT_MAGIC);
        out.extend_from_slice(&SNAPSHOT_VERSION.to_le_bytes());
        out.extend_from_slice(&(GLOBAL_DESCRIPTOR_DIM as u32).to_le_bytes());
        out.extend_from_slice(&(self.params.m as u32).to_le_bytes());
        out.extend_from_slice(&(self.params.ef_construction as u32).to_le_bytes());
        out.extend_from_slice(&(self.params.ef_search as u32).to_le_bytes());
        out.extend_from_slice(&self.params.seed.to_le_bytes());
        out.extend_from_slice(&(self.nodes.len() as u64).to_le_bytes());
        let entry = self.entry_keyframe().unwrap_or(u64::MAX);
        out.extend_from_slice(&entry.to_le_bytes());
        for n in &self.nodes {
            out.extend_from_slice(&n.keyframe.to_le_bytes());
            out.extend_from_slice(&(n.level() as u32).to_le_bytes());
            for v in n.descriptor.as_slice() {
                out.extend_from_slice(&v.to_le_bytes());
            }
            for links in &n.links {
                out.extend_from_slice(&(links.len() as u32).to_le_bytes());
                for &l in links {
                    out.extend_from_slice(&self.nodes[l as usize].keyframe.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn save<W: Write>(&self, mut w: W) -> Result<(), IndexError> {
        w.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load<R: Read>(mut r: R) -> Result<Self, IndexError> {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self, IndexError> {
        let mut c = Cursor { buf, pos: 0 };
        if c.take(4).map_err(|_| IndexError::BadMagic)? != SNAPSHOT_MAGIC {
            return Err(IndexError::BadMagic);
        }
        let version = c.u32()?;
        if version != SNAPSHOT_VERSION {
            return Err(IndexError::UnsupportedVersion(version));
        }
        let dim = c.u32()?;
        if dim as usize != GLOBAL_DESCRIPTOR_DIM {
            return Err(IndexError::DimensionMismatch(dim));
        }
        let params = HnswParams {
            m: c.u32()? as usize,
            ef_construction: c.u32()? as usize,
            ef_search: c.u32()? as usize,
            seed: c.u64()?,
        };
        params.validate()?;
        let count = c.u64()? as usize;
        let entry_id = c.u64()?;

        let mut raw = Vec::with_capacity(count.min(1 << 20));
        for _ in 0..count {
            let id = c.u64()?;
            let level = c.u32()? as usize;
            let mut values = Vec::with_capacity(GLOBAL_DESCRIPTOR_DIM);
            for _ in 0..GLOBAL_DESCRIPTOR_DIM {
                values.push(c.f32()?);
            }
            let mut layers = Vec::with_capacity(level + 1);
            for _ in 0..=level {
                let k = c.u32()? as usize;
                let mut ids = Vec::with_capacity(k.min(4096));
                for _ in 0..k {
                    ids.push(c.u64()?);
                }
                layers.push(ids);
            }
            raw.push((id, values, layers));
        }
        if c.pos != buf.len() {
            return Err(IndexError::Corrupt("trailing bytes".into()));
        }

        let mut by_keyframe = HashMap::with_capacity(count);
        for (i, (id, _, _)) in raw.iter().enumerate() {
            if by_keyframe.insert(*id, i as u32).is_some() {
                return Err(IndexError::DuplicateId(*id));
            }
        }
        let mut nodes = Vec::with_capacity(count);
        for (id, values, layers) in raw {
            // stored descriptors are already unit length; keep their bits
            if values.iter().any(|v| !v.is_finite()) {
                return Err(IndexError::Corrupt(format!("non-finite descriptor for {id}")));
            }
            let descriptor = GlobalDescriptor { values };
            let links = layers
                .into_iter()
                .map(|ids| {
                    ids.into_iter()
                        .map(|nb| {
                            by_keyframe
                                .get(&nb)
                                .copied()
                                .ok_or_else(|| IndexError::Corrupt(format!("unknown neighbour {nb}")))
                        })
                        .collect::<Result<Vec<u32>, _>>()
                })
                .collect::<Result<Vec<_>, _>>()?;
            nodes.push(Node {
                keyframe: id,
                descriptor,
                links,
            });
        }
        let entry = if count == 0 {
            None
        } else {
            Some(
                *by_keyframe
                    .get(&entry_id)
                    .ok_or_else(|| IndexError::Corrupt("entry point missing".into()))?,
            )
        };
        let index = HnswIndex {
            params,
            nodes,
            by_keyframe,
            entry,
            rng: ChaCha8Rng::seed_from_u64(params.seed ^ (count as u64).rotate_left(32)),
        };
        index.validate().map_err(IndexError::Corrupt)?;
        Ok(index)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    fn sample_index(n: usize) -> HnswIndex {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut idx = HnswIndex::new(HnswParams::default()).unwrap();
        for i in 0..n {
            let v: Vec<f32> = (0..GLOBAL_DESCRIPTOR_DIM).map(|_| StandardNormal.sample(&mut rng)).collect();
            idx.insert(1000 + i as u64, GlobalDescriptor::new(v).unwrap()).unwrap();
        }
        idx
    }

    #[test]
    fn round_trip_preserves_graph() {
        let idx = sample_index(60);
        let bytes = idx.to_bytes();
        let back = HnswIndex::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.entry_keyframe(), idx.entry_keyframe());
        let q = idx.descriptor(1010).unwrap().clone();
        assert_eq!(back.search(&q, 5).unwrap(), idx.search(&q, 5).unwrap());
    }

    #[test]
    fn empty_round_trip() {
        let idx = HnswIndex::new(HnswParams::default()).unwrap();
        let back = HnswIndex::from_bytes(&idx.to_bytes()).unwrap();
        assert!(back.is_empty());
    }

    #[test]
    fn rejects_bad_header() {
        let idx = sample_index(3);
        let mut bytes = idx.to_bytes();
        bytes[0] = b'X';
        assert!(matches!(HnswIndex::from_bytes(&bytes), Err(IndexError::BadMagic)));

        let mut bytes = idx.to_bytes();
        bytes[4..8].copy_from_slice(&2u32.to_le_bytes());
        assert!(matches!(HnswIndex::from_bytes(&bytes), Err(IndexError::UnsupportedVersion(2))));

        let mut bytes = idx.to_bytes();
        bytes[8..12].copy_from_slice(&256u32.to_le_bytes());
        assert!(matches!(HnswIndex::from_bytes(&bytes), Err(IndexError::DimensionMismatch(256))));

        let bytes = idx.to_bytes();
        assert!(matches!(
            HnswIndex::from_bytes(&bytes[..bytes.len() - 3]),
            Err(IndexError::Corrupt(_))
        ));
    }
}
