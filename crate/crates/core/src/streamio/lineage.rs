use super::chunk::{chunk_digest, Chunk};
use super::{backlink_offsets, StreamError};
use crate::crypto::Digest;

/// Backlink digests (an all-zero digest marks an epoch without a chunk).
pub const MISSING: Digest = [0; 32];

/// Digests chunk `counter` must carry: the registration txid for chunk 0,
/// otherwise the digests of chunks `counter - 2^k` nearest first.
pub fn backlinks_for(
    counter: u64,
    registration_txid: &Digest,
    mut digest_of: impl FnMut(u64) -> Option<Digest>,
) -> Vec<Digest> {
    if counter == 0 {
        return vec![*registration_txid];
    }
    backlink_offsets(counter)
        .into_iter()
        .map(|c| digest_of(c).unwrap_or(MISSING))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LineageReport {
    /// Backlink jumps taken.
    pub hops: u32,
    /// Counters visited, anchor first.
    pub path: Vec<u64>,
}

/// Verify that chunk `target` is committed to by the anchored chunk.
///
/// From the current chunk, jump by the largest power of two not exceeding the
/// remaining distance and check the fetched chunk against the digest the
/// current chunk carries for it. On a gapless stream this takes one hop per
/// set bit of the distance.
pub fn verify_lineage(
    anchor: (u64, Digest),
    target: u64,
    mut fetch: impl FnMut(u64) -> Option<Vec<u8>>,
) -> Result<LineageReport, StreamError> {
    let (anchor_counter, anchor_digest) = anchor;
    if target > anchor_counter {
        return Err(StreamError::TargetAfterAnchor { target, anchor: anchor_counter });
    }
    let mut current = anchor_counter;
    let mut expected = anchor_digest;
    let mut path = Vec::new();
    loop {
        let bytes = fetch(current).ok_or(StreamError::MissingChunk(current))?;
        if chunk_digest(&bytes) != expected {
            return Err(StreamError::DigestMismatch(current));
        }
        path.push(current);
        let chunk = Chunk::parse(&bytes)?;
        if chunk.header.counter != current {
            return Err(StreamError::DigestMismatch(current));
        }
        if current == target {
            return Ok(LineageReport { hops: path.len() as u32 - 1, path });
        }
        let remaining = current - target;
        let mut k = 63 - remaining.leading_zeros();
        loop {
            let digest = chunk
                .header
                .backlinks
                .get(k as usize)
                .ok_or(StreamError::Malformed(crate::wire::WireError::Invalid("backlinks")))?;
            if *digest != MISSING {
                expected = *digest;
                current -= 1u64 << k;
                break;
            }
            if k == 0 {
                return Err(StreamError::MissingChunk(current - 1));
            }
            k -= 1;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::SigningKey;
    use crate::keyregression::{gen_chains, ChainParams};
    use crate::keytree::{derive_dek, TreeParams};
    use crate::streamio::{ChunkSealer, Record, StreamMeta};
    use crate::types::StreamId;
    use rand::SeedableRng;

    pub(crate) fn build_stream(n: u64, skip: &[u64]) -> (Vec<Option<Vec<u8>>>, Digest) {
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(4);
        let signer = SigningKey::generate(&mut rng);
        let sid = StreamId([1; 32]);
        let meta = StreamMeta {
            stream_id: sid,
            owner_addr: [2; 32],
            producer_pub: signer.public_key(),
            t0: 0,
            delta: 10,
            tree_depth: 8,
            chain_length: 256,
            grace_period: 1,
        };
        let tree = TreeParams::new(sid, 8, [3; 32]).unwrap();
        let chain = gen_chains(&ChainParams::new(sid, 256, [4; 32], [5; 32]).unwrap());
        let sealer = ChunkSealer::new(&meta, &signer);
        let reg = [0xAA; 32];
        let mut chunks: Vec<Option<Vec<u8>>> = Vec::new();
        for c in 0..n {
            if skip.contains(&c) {
                chunks.push(None);
                continue;
            }
            let links = backlinks_for(c, &reg, |p| chunks[p as usize].as_deref().map(chunk_digest));
            let bytes = sealer
                .seal(
                    c,
                    &[Record::new(c as i64 * 10, vec![c as u8])],
                    &derive_dek(&tree, c).unwrap(),
                    &chain.sek(c).unwrap(),
                    &links,
                    &mut rng,
                )
                .unwrap();
            chunks.push(Some(bytes));
        }
        (chunks, reg)
    }

    #[test]
    fn greedy_example_anchor20_target15() {
        let (chunks, _) = build_stream(21, &[]);
        let anchor = (20, chunk_digest(chunks[20].as_ref().unwrap()));
        let report = verify_lineage(anchor, 15, |c| chunks[c as usize].clone()).unwrap();
        assert_eq!(report.hops, 2);
        assert_eq!(report.path, vec![20, 16, 15]);
    }

    #[test]
    fn chunk_zero_links_to_registration() {
        let (chunks, reg) = build_stream(2, &[]);
        let c0 = Chunk::parse(chunks[0].as_ref().unwrap()).unwrap();
        assert_eq!(c0.header.backlinks, vec![reg]);
    }

    #[test]
    fn tampering_is_detected() {
        let (mut chunks, _) = build_stream(33, &[]);
        let anchor = (32, chunk_digest(chunks[32].as_ref().unwrap()));
        chunks[20].as_mut().unwrap()[100] ^= 1;
        assert_eq!(
            verify_lineage(anchor, 20, |c| chunks[c as usize].clone()),
            Err(StreamError::DigestMismatch(20))
        );
        // Paths that avoid the modified chunk still verify.
        assert!(verify_lineage(anchor, 24, |c| chunks[c as usize].clone()).is_ok());
        assert!(verify_lineage(anchor, 33, |c| chunks.get(c as usize).cloned().flatten()).is_err());
    }

    #[test]
    fn gaps_fall_back_to_shorter_jumps() {
        let (chunks, _) = build_stream(20, &[16]);
        let anchor = (19, chunk_digest(chunks[19].as_ref().unwrap()));
        let report = verify_lineage(anchor, 10, |c| chunks[c as usize].clone()).unwrap();
        assert_eq!(*report.path.last().unwrap(), 10);
        assert!(!report.path.contains(&16));
        assert_eq!(
            verify_lineage(anchor, 16, |c| chunks[c as usize].clone()),
            Err(StreamError::MissingChunk(16))
        );
    }
}
