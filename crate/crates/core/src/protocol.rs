//! Frame packets exchanged between the agents, the `AGLP` log container and
//! bandwidth accounting.
//!
//! Packet layout, all little-endian:
//! ```text
//! frame_id u64 | timestamp_ns u64 | pose 7 x f32 (qw qx qy qz tx ty tz) | n u32
//! | n x 2 f32 pixels | n x 64 f32 descriptors | 512 f32 global descriptor
//! ```

use std::io::{self, Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::association::LOCAL_DESCRIPTOR_DIM;
use crate::place_index::GLOBAL_DESCRIPTOR_DIM;

pub const HEADER_BYTES: usize = 16;
pub const POSE_SCALARS: usize = 7;
pub const LOG_MAGIC: [u8; 4] = *b"AGLP";
pub const LOG_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("buffer truncated: need {needed} bytes, have {available}")]
    Truncated { needed: usize, available: usize },
    #[error("{0} trailing bytes after packet")]
    TrailingBytes(usize),
    #[error("bad log magic")]
    BadMagic,
    #[error("unsupported log version {0}")]
    UnsupportedVersion(u32),
    #[error("unknown record tag {0}")]
    UnknownTag(u8),
    #[error("malformed record: {0}")]
    Malformed(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Clone, Debug, PartialEq)]
pub struct FramePacket {
    pub frame_id: u64,
    pub timestamp_ns: u64,
    /// `qw qx qy qz tx ty tz`.
    pub pose: [f32; POSE_SCALARS],
    pub keypoints: Vec<[f32; 2]>,
    /// One per keypoint.
    pub descriptors: Vec<[f32; LOCAL_DESCRIPTOR_DIM]>,
    pub global: Box<[f32; GLOBAL_DESCRIPTOR_DIM]>,
}

impl FramePacket {
    pub fn keypoint_count(&self) -> usize {
        self.keypoints.len()
    }

    /// Bytes on the wire including header and keypoint count.
    pub fn encoded_len(n: usize) -> usize {
        HEADER_BYTES + 4 + payload_bytes(n)
    }

    /// # Panics
    /// If `keypoints` and `descriptors` differ in length.
    pub fn encode(&self) -> Vec<u8> {
        assert_eq!(self.keypoints.len(), self.descriptors.len(), "keypoint/descriptor count mismatch");
        let n = self.keypoints.len();
        let mut out = Vec::with_capacity(Self::encoded_len(n));
        self.encode_into(&mut out);
        out
    }

    pub fn encode_into(&self, out: &mut Vec<u8>) {
        let n = self.keypoints.len();
        out.extend_from_slice(&self.frame_id.to_le_bytes());
        out.extend_from_slice(&self.timestamp_ns.to_le_bytes());
        put_f32s(out, &self.pose);
        out.extend_from_slice(&(n as u32).to_le_bytes());
        for kp in &self.keypoints {
            put_f32s(out, kp);
        }
        for d in &self.descriptors {
            put_f32s(out, d);
        }
        put_f32s(out, &self.global[..]);
    }

    /// Decodes exactly one packet occupying the whole buffer.
    pub fn decode(buf: &[u8]) -> Result<Self, ProtocolError> {
        let (p, used) = Self::decode_prefix(buf)?;
        if used != buf.len() {
            return Err(ProtocolError::TrailingBytes(buf.len() - used));
        }
        Ok(p)
    }

    /// Decodes one packet from the front of `buf`, returning it and the
    /// number of bytes consumed.
    pub fn decode_prefix(buf: &[u8]) -> Result<(Self, usize), ProtocolError> {
        let fixed = HEADER_BYTES + 4 * POSE_SCALARS + 4;
        need(buf, fixed)?;
        let frame_id = u64::from_le_bytes(buf[0..8].try_into().unwrap());
        let timestamp_ns = u64::from_le_bytes(buf[8..16].try_into().unwrap());
        let mut pose = [0f32; POSE_SCALARS];
        get_f32s(&buf[16..16 + 4 * POSE_SCALARS], &mut pose);
        let n = u32::from_le_bytes(buf[fixed - 4..fixed].try_into().unwrap()) as usize;
        let total = (n as u128) * (4 * (2 + LOCAL_DESCRIPTOR_DIM)) as u128 + (fixed + 4 * GLOBAL_DESCRIPTOR_DIM) as u128;
        if total > buf.len() as u128 {
            return Err(ProtocolError::Truncated {
                needed: total.min(usize::MAX as u128) as usize,
                available: buf.len(),
            });
        }
        let mut pos = fixed;
        let mut keypoints = Vec::with_capacity(n);
        for _ in 0..n {
            let mut kp = [0f32; 2];
            get_f32s(&buf[pos..pos + 8], &mut kp);
            keypoints.push(kp);
            pos += 8;
        }
        let mut descriptors = Vec::with_capacity(n);
        for _ in 0..n {
            let mut d = [0f32; LOCAL_DESCRIPTOR_DIM];
            get_f32s(&buf[pos..pos + 4 * LOCAL_DESCRIPTOR_DIM], &mut d);
            descriptors.push(d);
            pos += 4 * LOCAL_DESCRIPTOR_DIM;
        }
        let mut global = Box::new([0f32; GLOBAL_DESCRIPTOR_DIM]);
        get_f32s(&buf[pos..pos + 4 * GLOBAL_DESCRIPTOR_DIM], &mut global[..]);
        pos += 4 * GLOBAL_DESCRIPTOR_DIM;
        Ok((
            Self {
                frame_id,
                timestamp_ns,
                pose,
                keypoints,
                descriptors,
                global,
            },
            pos,
        ))
    }
}

fn need(buf: &[u8], n: usize) -> Result<(), ProtocolError> {
    if buf.len() < n {
        Err(ProtocolError::Truncated {
            needed: n,
            available: buf.len(),
        })
    } else {
        Ok(())
    }
}

fn put_f32s(out: &mut Vec<u8>, v: &[f32]) {
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

fn get_f32s(src: &[u8], dst: &mut [f32]) {
    for (c, d) in src.chunks_exact(4).zip(dst.iter_mut()) {
        *d = f32::from_le_bytes(c.try_into().unwrap());
    }
}

/// Per-frame payload counted by the bandwidth model: `4 (2n + 64n + 7 + 512)`.
pub fn payload_bytes(n: usize) -> usize {
    4 * (2 * n + LOCAL_DESCRIPTOR_DIM * n + POSE_SCALARS + GLOBAL_DESCRIPTOR_DIM)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BandwidthReport {
    pub n: u32,
    pub frames_per_second: f64,
    pub payload_bytes: usize,
    /// Payload plus header and keypoint count.
    pub framed_bytes: usize,
    pub mbps: f64,
}

/// # Panics
/// If `fps` is not strictly positive.
pub fn bandwidth(n: u32, fps: f64) -> BandwidthReport {
    assert!(fps > 0.0, "fps must be positive");
    let payload = payload_bytes(n as usize);
    BandwidthReport {
        n,
        frames_per_second: fps,
        payload_bytes: payload,
        framed_bytes: FramePacket::encoded_len(n as usize),
        mbps: fps * payload as f64 * 8.0 / 1e6,
    }
}

/// Record kinds in an `AGLP` log.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum Source {
    Aerial = 0,
    Ground = 1,
    /// UGV point cloud: u32 count then f32 xyz triples.
    Cloud = 2,
    /// UTF-8 JSON metadata (intrinsics, optional ground truth).
    Meta = 3,
}

impl Source {
    pub fn from_tag(t: u8) -> Result<Self, ProtocolError> {
        Ok(match t {
            0 => Self::Aerial,
            1 => Self::Ground,
            2 => Self::Cloud,
            3 => Self::Meta,
            _ => return Err(ProtocolError::UnknownTag(t)),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogRecord {
    pub source: Source,
    pub payload: Vec<u8>,
}

/// Streams records as `tag u8 | len u32 | payload`.
pub struct LogWriter<W: Write> {
    inner: W,
}

impl<W: Write> LogWriter<W> {
    pub fn new(mut inner: W) -> Result<Self, ProtocolError> {
        inner.write_all(&LOG_MAGIC)?;
        inner.write_all(&LOG_VERSION.to_le_bytes())?;
        Ok(Self { inner })
    }

    pub fn write_record(&mut self, source: Source, payload: &[u8]) -> Result<(), ProtocolError> {
        let len = u32::try_from(payload.len()).map_err(|_| ProtocolError::Malformed("record over 4 GiB".into()))?;
        self.inner.write_all(&[source as u8])?;
        self.inner.write_all(&len.to_le_bytes())?;
        self.inner.write_all(payload)?;
        Ok(())
    }

    pub fn write_packet(&mut self, source: Source, p: &FramePacket) -> Result<(), ProtocolError> {
        self.write_record(source, &p.encode())
    }

    pub fn finish(mut self) -> Result<W, ProtocolError> {
        self.inner.flush()?;
        Ok(self.inner)
    }
}

pub struct LogReader<R: Read> {
    inner: R,
}

impl<R: Read> LogReader<R> {
    pub fn new(mut inner: R) -> Result<Self, ProtocolError> {
        let mut head = [0u8; 8];
        inner.read_exact(&mut head).map_err(|e| match e.kind() {
            io::ErrorKind::UnexpectedEof => ProtocolError::BadMagic,
            _ => e.into(),
        })?;
        if head[..4] != LOG_MAGIC {
            return Err(ProtocolError::BadMagic);
        }
        let version = u32::from_le_bytes(head[4..].try_into().unwrap());
        if version != LOG_VERSION {
            return Err(ProtocolError::UnsupportedVersion(version));
        }
        Ok(Self { inner })
    }

    /// `Ok(None)` at a clean end of stream.
    pub fn next_record(&mut self) -> Result<Option<LogRecord>, ProtocolError> {
        let mut tag = [0u8; 1];
        match self.inner.read(&mut tag)? {
            0 => return Ok(None),
            _ => {}
        }
        let source = Source::from_tag(tag[0])?;
        let mut len = [0u8; 4];
        read_exact_or_truncated(&mut self.inner, &mut len)?;
        let len = u32::from_le_bytes(len) as usize;
        let mut payload = vec![0u8; len];
        read_exact_or_truncated(&mut self.inner, &mut payload)?;
        Ok(Some(LogRecord { source, payload }))
    }

    pub fn read_all(mut self) -> Result<Vec<LogRecord>, ProtocolError> {
        let mut out = Vec::new();
        while let Some(r) = self.next_record()? {
            out.push(r);
        }
        Ok(out)
    }
}

fn read_exact_or_truncated<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<(), ProtocolError> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => ProtocolError::Truncated {
            needed: buf.len(),
            available: 0,
        },
        _ => e.into(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn packet(n: usize, seed: u32) -> FramePacket {
        let f = |i: usize| ((i as u32).wrapping_mul(2654435761) ^ seed) as f32 / u32::MAX as f32;
        FramePacket {
            frame_id: 42 + seed as u64,
            timestamp_ns: 1_000_000_000 * seed as u64,
            pose: [1.0, 0.0, 0.0, 0.0, 1.5, -2.0, 0.25],
            keypoints: (0..n).map(|i| [f(2 * i) * 640.0, f(2 * i + 1) * 480.0]).collect(),
            descriptors: (0..n).map(|i| std::array::from_fn(|j| f(i * 64 + j + 7))).collect(),
            global: Box::new(std::array::from_fn(|j| f(j + 99_999))),
        }
    }

    #[test]
    fn empty_packet_length() {
        assert_eq!(packet(0, 1).encode().len(), 2096);
        assert_eq!(FramePacket::encoded_len(0), 16 + 4 + 4 * 519);
    }

    #[test]
    fn table_bandwidth() {
        assert_eq!(payload_bytes(1024), 272_412);
        for (n, want) in [(128, 0.29), (256, 0.56), (512, 1.10), (1024, 2.18)] {
            let mbps = bandwidth(n, 1.0).mbps;
            assert_eq!((mbps * 100.0).round() / 100.0, want, "n={n}: {mbps}");
        }
        assert!((bandwidth(128, 1.0).mbps - 0.286944).abs() < 1e-12);
        assert!((bandwidth(128, 2.0).mbps - 2.0 * 0.286944).abs() < 1e-12);
    }

    #[test]
    fn round_trip_sizes() {
        for n in [0, 1, 128, 1024] {
            let p = packet(n, n as u32);
            let bytes = p.encode();
            assert_eq!(bytes.len(), FramePacket::encoded_len(n));
            assert_eq!(FramePacket::decode(&bytes).unwrap(), p);
        }
    }

    #[test]
    fn truncation_detected() {
        let bytes = packet(10, 3).encode();
        let mid_descriptor = 16 + 28 + 4 + 80 + 100;
        assert!(matches!(
            FramePacket::decode(&bytes[..mid_descriptor]),
            Err(ProtocolError::Truncated { .. })
        ));
        let mut lying = packet(2, 3).encode();
        lying[44..48].copy_from_slice(&1000u32.to_le_bytes());
        assert!(matches!(FramePacket::decode(&lying), Err(ProtocolError::Truncated { .. })));
        assert!(matches!(FramePacket::decode(&bytes[..10]), Err(ProtocolError::Truncated { .. })));
    }

    #[test]
    fn log_round_trip() {
        let mut w = LogWriter::new(Vec::new()).unwrap();
        let a = packet(3, 1);
        let g = packet(5, 2);
        w.write_packet(Source::Aerial, &a).unwrap();
        w.write_packet(Source::Ground, &g).unwrap();
        w.write_record(Source::Meta, b"{}").unwrap();
        let bytes = w.finish().unwrap();
        assert_eq!(&bytes[..4], b"AGLP");
        let recs = LogReader::new(&bytes[..]).unwrap().read_all().unwrap();
        assert_eq!(recs.len(), 3);
        assert_eq!(recs[0].source, Source::Aerial);
        assert_eq!(FramePacket::decode(&recs[0].payload).unwrap(), a);
        assert_eq!(FramePacket::decode(&recs[1].payload).unwrap(), g);
        assert_eq!(recs[2].payload, b"{}");

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(LogReader::new(&bad[..]), Err(ProtocolError::BadMagic)));
        let cut = &bytes[..bytes.len() - 1];
        let mut r = LogReader::new(cut).unwrap();
        r.next_record().unwrap();
        r.next_record().unwrap();
        assert!(matches!(r.next_record(), Err(ProtocolError::Truncated { .. })));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]
        #[test]
        fn bijection(n in 0usize..200, seed in any::<u32>(), bits in prop::collection::vec(any::<u32>(), 7)) {
            let mut p = packet(n, seed);
            // arbitrary bit patterns, including NaN payloads, survive unchanged
            for (d, b) in p.pose.iter_mut().zip(&bits) {
                *d = f32::from_bits(*b);
            }
            let bytes = p.encode();
            let q = FramePacket::decode(&bytes).unwrap();
            prop_assert_eq!(q.encode(), bytes);
        }
    }
}
