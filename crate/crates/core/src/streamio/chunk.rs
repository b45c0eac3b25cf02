use rand::{CryptoRng, RngCore};

use super::codec::{decode_batch, encode_batch, Codec};
use super::{epoch_of, Record, StreamError, StreamMeta};
use crate::crypto::{
    aead_open, aead_seal, random_bytes, sha256, AeadNonce, Digest, PublicKey, SignatureBytes,
    SigningKey, SIGNATURE_LEN,
};
use crate::types::{Dek, Sek, StreamId};
use crate::wire::{Reader, WireError, Writer};

pub const MAGIC: &[u8; 4] = b"DRPC";
pub const VERSION: u8 = 1;
/// AES-GCM encapsulation of a 32-byte DEK: ciphertext plus tag.
pub const DEK_CT_LEN: usize = 48;

/// `H(owner_addr || stream_id || counter)`
pub fn chunk_id(owner_addr: &Digest, stream_id: &StreamId, counter: u64) -> Digest {
    sha256(&[owner_addr, stream_id.as_bytes(), &counter.to_be_bytes()])
}

/// Digest of the complete serialized chunk, as referenced by backlinks and
/// immutability anchors.
pub fn chunk_digest(bytes: &[u8]) -> Digest {
    sha256(&[bytes])
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChunkHeader {
    pub stream_id: StreamId,
    pub owner_addr: Digest,
    pub counter: u64,
    pub t_start: i64,
    pub t_end: i64,
    pub backlinks: Vec<Digest>,
    pub dek_nonce: AeadNonce,
    pub dek_ct: [u8; DEK_CT_LEN],
    pub body_nonce: AeadNonce,
    pub body_len: u32,
}

impl ChunkHeader {
    fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::with_capacity(180 + 32 * self.backlinks.len());
        w.bytes(MAGIC)
            .u8(VERSION)
            .bytes(self.stream_id.as_bytes())
            .bytes(&self.owner_addr)
            .u64(self.counter)
            .i64(self.t_start)
            .i64(self.t_end)
            .u8(u8::try_from(self.backlinks.len()).expect("at most 64 backlinks"));
        for d in &self.backlinks {
            w.bytes(d);
        }
        w.bytes(&self.dek_nonce).bytes(&self.dek_ct).bytes(&self.body_nonce).u32(self.body_len);
        w.finish()
    }

    fn read_from(r: &mut Reader<'_>) -> Result<Self, StreamError> {
        if r.take(4)? != MAGIC {
            return Err(WireError::Invalid("chunk magic").into());
        }
        let version = r.u8()?;
        if version != VERSION {
            return Err(StreamError::UnsupportedVersion(version));
        }
        let stream_id = StreamId(r.array()?);
        let owner_addr = r.array()?;
        let counter = r.u64()?;
        let t_start = r.i64()?;
        let t_end = r.i64()?;
        let n = r.u8()? as usize;
        let mut backlinks = Vec::with_capacity(n);
        for _ in 0..n {
            backlinks.push(r.array()?);
        }
        Ok(Self {
            stream_id,
            owner_addr,
            counter,
            t_start,
            t_end,
            backlinks,
            dek_nonce: r.array()?,
            dek_ct: r.array()?,
            body_nonce: r.array()?,
            body_len: r.u32()?,
        })
    }
}

/// A parsed chunk. `header_bytes` keeps the exact encoding used as AAD and
/// under the signature.
#[derive(Debug, Clone)]
pub struct Chunk {
    pub header: ChunkHeader,
    pub header_bytes: Vec<u8>,
    pub body: Vec<u8>,
    pub signature: SignatureBytes,
}

impl Chunk {
    pub fn parse(bytes: &[u8]) -> Result<Self, StreamError> {
        let mut r = Reader::new(bytes);
        let header = ChunkHeader::read_from(&mut r)?;
        let header_bytes = bytes[..r.position()].to_vec();
        let body = r.take(header.body_len as usize)?.to_vec();
        let signature = r.array::<SIGNATURE_LEN>()?;
        r.finish()?;
        Ok(Self { header, header_bytes, body, signature })
    }

    fn signed_digest(header_bytes: &[u8], body: &[u8]) -> Digest {
        sha256(&[header_bytes, body])
    }

    pub fn verify_signature(&self, producer: &PublicKey) -> bool {
        producer.verify(&Self::signed_digest(&self.header_bytes, &self.body), &self.signature)
    }

    pub fn id(&self) -> Digest {
        chunk_id(&self.header.owner_addr, &self.header.stream_id, self.header.counter)
    }
}

fn dek_aad(stream_id: &StreamId, counter: u64) -> Vec<u8> {
    [stream_id.as_bytes().as_slice(), &counter.to_be_bytes()].concat()
}

/// Seals epochs of one stream with the producer's signing key.
pub struct ChunkSealer<'a> {
    pub meta: &'a StreamMeta,
    pub signer: &'a SigningKey,
    pub codec: Codec,
}

impl<'a> ChunkSealer<'a> {
    pub fn new(meta: &'a StreamMeta, signer: &'a SigningKey) -> Self {
        Self { meta, signer, codec: Codec::default() }
    }

    /// Serialize, compress and encrypt `records` as chunk `counter`.
    ///
    /// `t_start` is the epoch's start and `t_end` the last record timestamp.
    pub fn seal<R: RngCore + CryptoRng>(
        &self,
        counter: u64,
        records: &[Record],
        dek: &Dek,
        sek: &Sek,
        backlinks: &[Digest],
        rng: &mut R,
    ) -> Result<Vec<u8>, StreamError> {
        if records.is_empty() {
            return Err(StreamError::EmptyRecords);
        }
        for key_epoch in [dek.epoch, sek.epoch] {
            if key_epoch != counter {
                return Err(StreamError::KeyEpochMismatch { key: key_epoch, counter });
            }
        }
        for r in records {
            if epoch_of(r.ts, self.meta)? != counter {
                return Err(StreamError::RecordOutsideEpoch { ts: r.ts, counter });
            }
        }
        let mut sorted = records.to_vec();
        sorted.sort_by_key(|r| r.ts);

        let stream_id = self.meta.stream_id;
        let dek_nonce = random_bytes(rng);
        let dek_ct: [u8; DEK_CT_LEN] = aead_seal(&sek.key, &dek_nonce, &dek_aad(&stream_id, counter), &dek.key)
            .try_into()
            .expect("32-byte key plus 16-byte tag");

        let plain = self.codec.compress(&encode_batch(&sorted));
        let body_len = u32::try_from(plain.len() + 16).expect("chunk body over 4 GiB");
        let header = ChunkHeader {
            stream_id,
            owner_addr: self.meta.owner_addr,
            counter,
            t_start: self.meta.epoch_start(counter),
            t_end: sorted.last().expect("non-empty").ts,
            backlinks: backlinks.to_vec(),
            dek_nonce,
            dek_ct,
            body_nonce: random_bytes(rng),
            body_len,
        };
        let header_bytes = header.to_bytes();
        let body = aead_seal(&dek.key, &header.body_nonce, &header_bytes, &plain);
        let signature = self.signer.sign(&Chunk::signed_digest(&header_bytes, &body));

        let mut out = header_bytes;
        out.extend_from_slice(&body);
        out.extend_from_slice(&signature);
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy)]
pub enum ChunkKey {
    Dek(Dek),
    Sek(Sek),
}

impl ChunkKey {
    fn epoch(&self) -> u64 {
        match self {
            ChunkKey::Dek(k) => k.epoch,
            ChunkKey::Sek(k) => k.epoch,
        }
    }
}

fn unwrap_dek(chunk: &Chunk, sek: &Sek) -> Result<Dek, StreamError> {
    let h = &chunk.header;
    let key = aead_open(&sek.key, &h.dek_nonce, &dek_aad(&h.stream_id, h.counter), &h.dek_ct)?;
    Ok(Dek { epoch: h.counter, key: key.try_into().map_err(|_| StreamError::Authentication)? })
}

/// Recover the chunk's DEK with the subscriber key of its epoch.
pub fn decapsulate_dek(bytes: &[u8], sek: &Sek) -> Result<Dek, StreamError> {
    let chunk = Chunk::parse(bytes)?;
    if sek.epoch != chunk.header.counter {
        return Err(StreamError::KeyEpochMismatch { key: sek.epoch, counter: chunk.header.counter });
    }
    unwrap_dek(&chunk, sek)
}

/// Authenticated decryption of a chunk; returns its records in timestamp order.
pub fn open_chunk(bytes: &[u8], key: ChunkKey, meta: &StreamMeta) -> Result<Vec<Record>, StreamError> {
    let chunk = Chunk::parse(bytes)?;
    let h = &chunk.header;
    if h.stream_id != meta.stream_id || h.owner_addr != meta.owner_addr {
        return Err(StreamError::StreamMismatch);
    }
    if key.epoch() != h.counter {
        return Err(StreamError::KeyEpochMismatch { key: key.epoch(), counter: h.counter });
    }
    let dek = match key {
        ChunkKey::Dek(d) => d,
        ChunkKey::Sek(s) => unwrap_dek(&chunk, &s)?,
    };
    let plain = aead_open(&dek.key, &h.body_nonce, &chunk.header_bytes, &chunk.body)?;
    let mut records = decode_batch(&Codec::decompress(&plain)?)?;
    records.sort_by_key(|r| r.ts);
    Ok(records)
}

/// Check the producer signature without decrypting anything.
pub fn verify_chunk_sig(bytes: &[u8], producer: &PublicKey) -> Result<bool, StreamError> {
    Ok(Chunk::parse(bytes)?.verify_signature(producer))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::keyregression::{gen_chains, ChainParams};
    use crate::keytree::{derive_dek, TreeParams};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    struct Fixture {
        rng: ChaCha20Rng,
        signer: SigningKey,
        meta: StreamMeta,
        tree: TreeParams,
        chain: crate::keyregression::DualChain,
    }

    fn fixture() -> Fixture {
        let mut rng = ChaCha20Rng::seed_from_u64(21);
        let signer = SigningKey::generate(&mut rng);
        let sid = StreamId([9; 32]);
        let meta = StreamMeta {
            stream_id: sid,
            owner_addr: [1; 32],
            producer_pub: signer.public_key(),
            t0: 0,
            delta: 86_400_000,
            tree_depth: 4,
            chain_length: 16,
            grace_period: 4,
        };
        let tree = TreeParams::new(sid, 4, [2; 32]).unwrap();
        let chain = gen_chains(&ChainParams::new(sid, 16, [3; 32], [4; 32]).unwrap());
        Fixture { rng, signer, meta, tree, chain }
    }

    /// Synthetic day of 100 wearable-style readings in epoch `c`.
    fn day(meta: &StreamMeta, c: u64, rng: &mut ChaCha20Rng) -> Vec<Record> {
        (0..100)
            .map(|i| {
                let ts = meta.epoch_start(c) + i * 864_000 + rng.gen_range(0..1000);
                Record::new(ts, format!("{{\"steps\":{},\"hr\":{}}}", rng.gen_range(0..200), rng.gen_range(50..150)))
            })
            .collect()
    }

    fn seal(f: &mut Fixture, c: u64, records: &[Record]) -> Vec<u8> {
        let dek = derive_dek(&f.tree, c).unwrap();
        let sek = f.chain.sek(c).unwrap();
        ChunkSealer::new(&f.meta, &f.signer).seal(c, records, &dek, &sek, &[[0; 32]], &mut f.rng).unwrap()
    }

    #[test]
    fn roundtrip_via_dek_and_sek() {
        let mut f = fixture();
        let recs = day(&f.meta, 3, &mut f.rng);
        let bytes = seal(&mut f, 3, &recs);
        let dek = derive_dek(&f.tree, 3).unwrap();
        let sek = f.chain.sek(3).unwrap();
        let mut expected = recs.clone();
        expected.sort_by_key(|r| r.ts);
        assert_eq!(open_chunk(&bytes, ChunkKey::Dek(dek), &f.meta).unwrap(), expected);
        assert_eq!(open_chunk(&bytes, ChunkKey::Sek(sek), &f.meta).unwrap(), expected);
        assert_eq!(decapsulate_dek(&bytes, &sek).unwrap(), dek);
    }

    #[test]
    fn layout_matches_wire_format() {
        let mut f = fixture();
        let bytes = seal(&mut f, 2, &[Record::new(2 * 86_400_000 + 5, b"x".to_vec())]);
        assert_eq!(&bytes[..4], b"DRPC");
        assert_eq!(bytes[4], 1);
        assert_eq!(&bytes[5..37], &[9; 32]);
        assert_eq!(&bytes[69..77], &2u64.to_be_bytes());
        assert_eq!(&bytes[77..85], &(2i64 * 86_400_000).to_be_bytes());
        assert_eq!(&bytes[85..93], &(2i64 * 86_400_000 + 5).to_be_bytes());
        assert_eq!(bytes[93], 1);
        let chunk = Chunk::parse(&bytes).unwrap();
        assert_eq!(chunk.header_bytes.len(), 94 + 32 + 12 + 48 + 12 + 4);
        assert_eq!(bytes.len(), chunk.header_bytes.len() + chunk.body.len() + 64);
        assert_eq!(chunk.id(), chunk_id(&[1; 32], &StreamId([9; 32]), 2));
    }

    #[test]
    fn seal_preconditions() {
        let mut f = fixture();
        let dek = derive_dek(&f.tree, 1).unwrap();
        let sek = f.chain.sek(1).unwrap();
        let sealer = ChunkSealer::new(&f.meta, &f.signer);
        assert_eq!(sealer.seal(1, &[], &dek, &sek, &[], &mut f.rng), Err(StreamError::EmptyRecords));
        assert!(matches!(
            sealer.seal(1, &[Record::new(5, vec![])], &dek, &sek, &[], &mut f.rng),
            Err(StreamError::RecordOutsideEpoch { .. })
        ));
        let sek2 = f.chain.sek(2).unwrap();
        assert!(matches!(
            sealer.seal(1, &[Record::new(86_400_000, vec![])], &dek, &sek2, &[], &mut f.rng),
            Err(StreamError::KeyEpochMismatch { key: 2, counter: 1 })
        ));
    }

    #[test]
    fn wrong_keys_and_flipped_bytes_fail() {
        let mut f = fixture();
        let recs = day(&f.meta, 5, &mut f.rng);
        let bytes = seal(&mut f, 5, &recs);
        let wrong_epoch = derive_dek(&f.tree, 6).unwrap();
        assert!(matches!(
            open_chunk(&bytes, ChunkKey::Dek(wrong_epoch), &f.meta),
            Err(StreamError::KeyEpochMismatch { .. })
        ));
        // A foreign key relabelled with the right epoch still fails authentication.
        let relabelled = Dek { epoch: 5, ..wrong_epoch };
        assert_eq!(open_chunk(&bytes, ChunkKey::Dek(relabelled), &f.meta), Err(StreamError::Authentication));

        let dek = derive_dek(&f.tree, 5).unwrap();
        let body_start = Chunk::parse(&bytes).unwrap().header_bytes.len();
        for pos in [body_start, body_start + 10, bytes.len() - 65] {
            let mut bad = bytes.clone();
            bad[pos] ^= 0x80;
            assert_eq!(open_chunk(&bad, ChunkKey::Dek(dek), &f.meta), Err(StreamError::Authentication));
        }
    }

    #[test]
    fn signature_checks() {
        let mut f = fixture();
        let recs = day(&f.meta, 1, &mut f.rng);
        let bytes = seal(&mut f, 1, &recs);
        assert!(verify_chunk_sig(&bytes, &f.signer.public_key()).unwrap());

        let other = SigningKey::generate(&mut f.rng);
        let chunk = Chunk::parse(&bytes).unwrap();
        let mut resigned = bytes.clone();
        let n = resigned.len();
        resigned[n - 64..].copy_from_slice(&other.sign(&Chunk::signed_digest(&chunk.header_bytes, &chunk.body)));
        assert!(!verify_chunk_sig(&resigned, &f.signer.public_key()).unwrap());
        assert!(verify_chunk_sig(&resigned, &other.public_key()).unwrap());
        assert!(verify_chunk_sig(&bytes[..50], &f.signer.public_key()).is_err());
    }
}
