//! Time-series chunk serialization.
//!
//! A stream is cut into epochs of `delta` milliseconds starting at `t0`;
//! epoch `c` holds the records with `t0 + c·Δ <= ts < t0 + (c+1)·Δ` and is
//! sealed into one chunk. Chunk bodies are compressed, encrypted under the
//! epoch's DEK, and carry the DEK encapsulated under the epoch's SEK. Chunks
//! link back to their predecessors at distances 1, 2, 4, ... so that lineage
//! from an anchored chunk verifies in a logarithmic number of hops.

mod chunk;
mod codec;
mod lineage;

pub use chunk::{
    chunk_digest, chunk_id, decapsulate_dek, open_chunk, verify_chunk_sig, Chunk, ChunkHeader,
    ChunkKey, ChunkSealer, DEK_CT_LEN, MAGIC, VERSION,
};
pub use codec::{decode_batch, encode_batch, Codec};
pub use lineage::{backlinks_for, verify_lineage, LineageReport};

use crate::crypto::{AeadError, Digest, PublicKey};
use crate::keytree::MAX_DEPTH;
use crate::types::{EpochInterval, StreamId};
use crate::wire::{Reader, WireError, Writer};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum StreamError {
    #[error("timestamp {ts} precedes stream origin {t0}")]
    BeforeOrigin { ts: i64, t0: i64 },
    #[error("record at {ts} is outside epoch {counter}")]
    RecordOutsideEpoch { ts: i64, counter: u64 },
    #[error("no records to seal")]
    EmptyRecords,
    #[error("key for epoch {key} cannot serve chunk {counter}")]
    KeyEpochMismatch { key: u64, counter: u64 },
    #[error("chunk belongs to a different stream")]
    StreamMismatch,
    #[error("chunk authentication failed")]
    Authentication,
    #[error("malformed chunk: {0}")]
    Malformed(#[from] WireError),
    #[error("unsupported chunk version {0}")]
    UnsupportedVersion(u8),
    #[error("decompression failed: {0}")]
    Decompress(String),
    #[error("invalid stream metadata: {0}")]
    InvalidMeta(&'static str),
    #[error("digest mismatch at chunk {0}: tampering detected")]
    DigestMismatch(u64),
    #[error("chunk {0} is missing")]
    MissingChunk(u64),
    #[error("lineage target {target} is after anchor {anchor}")]
    TargetAfterAnchor { target: u64, anchor: u64 },
}

impl From<AeadError> for StreamError {
    fn from(_: AeadError) -> Self {
        StreamError::Authentication
    }
}

/// Stream parameters published in the registration transaction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StreamMeta {
    pub stream_id: StreamId,
    pub owner_addr: Digest,
    pub producer_pub: PublicKey,
    /// Origin, epoch milliseconds.
    pub t0: i64,
    /// Chunk interval in milliseconds.
    pub delta: i64,
    pub tree_depth: u8,
    pub chain_length: u64,
    pub grace_period: u64,
}

impl StreamMeta {
    pub fn validate(&self) -> Result<(), StreamError> {
        if self.delta <= 0 {
            return Err(StreamError::InvalidMeta("delta must be positive"));
        }
        if self.tree_depth > MAX_DEPTH {
            return Err(StreamError::InvalidMeta("tree depth too large"));
        }
        if self.chain_length == 0 {
            return Err(StreamError::InvalidMeta("chain length must be positive"));
        }
        Ok(())
    }

    /// Number of epochs the stream's key material can serve.
    pub fn epoch_capacity(&self) -> u64 {
        (1u64 << self.tree_depth).min(self.chain_length)
    }

    pub fn epoch_start(&self, counter: u64) -> i64 {
        self.t0 + counter as i64 * self.delta
    }

    pub fn epoch_end(&self, counter: u64) -> i64 {
        self.epoch_start(counter) + self.delta - 1
    }

    pub fn write_to(&self, w: &mut Writer) {
        w.bytes(self.stream_id.as_bytes())
            .bytes(&self.owner_addr)
            .pubkey(&self.producer_pub)
            .i64(self.t0)
            .i64(self.delta)
            .u8(self.tree_depth)
            .u64(self.chain_length)
            .u64(self.grace_period);
    }

    pub fn read_from(r: &mut Reader<'_>) -> Result<Self, WireError> {
        Ok(Self {
            stream_id: StreamId(r.array()?),
            owner_addr: r.array()?,
            producer_pub: r.pubkey()?,
            t0: r.i64()?,
            delta: r.i64()?,
            tree_depth: r.u8()?,
            chain_length: r.u64()?,
            grace_period: r.u64()?,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        self.write_to(&mut w);
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, WireError> {
        let mut r = Reader::new(bytes);
        let m = Self::read_from(&mut r)?;
        r.finish()?;
        Ok(m)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Record {
    /// Epoch milliseconds.
    pub ts: i64,
    pub payload: Vec<u8>,
}

impl Record {
    pub fn new(ts: i64, payload: impl Into<Vec<u8>>) -> Self {
        Self { ts, payload: payload.into() }
    }
}

/// Chunk counter holding timestamp `ts`: `floor((ts - t0) / Δ)`.
pub fn epoch_of(ts: i64, meta: &StreamMeta) -> Result<u64, StreamError> {
    if ts < meta.t0 {
        return Err(StreamError::BeforeOrigin { ts, t0: meta.t0 });
    }
    if meta.delta <= 0 {
        return Err(StreamError::InvalidMeta("delta must be positive"));
    }
    let offset = ts as i128 - meta.t0 as i128;
    Ok((offset / meta.delta as i128) as u64)
}

/// Counters touched by the time range `[t_a, t_b]`.
pub fn epoch_range(t_a: i64, t_b: i64, meta: &StreamMeta) -> Result<EpochInterval, StreamError> {
    let a = epoch_of(t_a.min(t_b), meta)?;
    let b = epoch_of(t_a.max(t_b), meta)?;
    Ok(EpochInterval::new(a, b))
}

/// Counters `c - 2^k` for every `2^k <= c`, nearest first. Chunk 0 has no
/// predecessor chunks and instead links to the registration transaction.
pub fn backlink_offsets(counter: u64) -> Vec<u64> {
    (0..64)
        .map(|k| 1u64 << k)
        .take_while(|&step| step <= counter)
        .map(|step| counter - step)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    pub(crate) fn meta(t0: i64, delta: i64) -> StreamMeta {
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(0);
        StreamMeta {
            stream_id: StreamId([3; 32]),
            owner_addr: [4; 32],
            producer_pub: crate::crypto::SigningKey::generate(&mut rng).public_key(),
            t0,
            delta,
            tree_depth: 10,
            chain_length: 1024,
            grace_period: 8,
        }
    }

    #[test]
    fn epoch_boundaries() {
        let m = meta(0, 3_600_000);
        assert_eq!(epoch_of(0, &m).unwrap(), 0);
        assert_eq!(epoch_of(3_599_999, &m).unwrap(), 0);
        assert_eq!(epoch_of(3_600_000, &m).unwrap(), 1);
        assert!(matches!(epoch_of(-1, &m), Err(StreamError::BeforeOrigin { .. })));
        let m2 = meta(1_000, 10);
        assert_eq!(epoch_of(1_000, &m2).unwrap(), 0);
    }

    #[test]
    fn epoch_of_matches_subtraction_oracle() {
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(9);
        for _ in 0..2000 {
            let t0 = rng.gen_range(-1_000_000i64..1_000_000);
            let delta = rng.gen_range(1i64..50_000);
            let ts = t0 + rng.gen_range(0i64..5_000_000);
            // Naive oracle: subtract delta until the remainder fits.
            let (mut rest, mut count) = (ts - t0, 0u64);
            while rest >= delta {
                rest -= delta;
                count += 1;
            }
            assert_eq!(epoch_of(ts, &meta(t0, delta)).unwrap(), count);
        }
    }

    #[test]
    fn backlink_examples() {
        assert!(backlink_offsets(0).is_empty());
        assert_eq!(backlink_offsets(1), vec![0]);
        assert_eq!(backlink_offsets(11), vec![10, 9, 7, 3]);
        assert_eq!(backlink_offsets(16), vec![15, 14, 12, 8, 0]);
    }

    #[test]
    fn meta_roundtrip_and_validation() {
        let m = meta(5, 60_000);
        assert_eq!(StreamMeta::from_bytes(&m.to_bytes()).unwrap(), m);
        assert!(StreamMeta { delta: 0, ..m.clone() }.validate().is_err());
        assert!(StreamMeta { tree_depth: 31, ..m.clone() }.validate().is_err());
        assert_eq!(m.epoch_capacity(), 1024);
    }
}
