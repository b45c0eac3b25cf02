use std::collections::BTreeMap;

use rand::{CryptoRng, RngCore};

use super::{FlowError, StreamSecrets};
use crate::authzchain::Tx;
use crate::crypto::{Digest, SigningKey};
use crate::keydist::{seal_lockbox, DistributionKey, Lockbox};
use crate::keyregression::{compact_token, CompactChain};
use crate::keytree::{derive_dek, TreeParams};
use crate::streamio::{backlink_offsets, backlinks_for, chunk_digest, epoch_of, ChunkSealer, Codec, Record, StreamMeta};

/// Records bucketed by epoch counter.
pub fn group_by_epoch(records: &[Record], meta: &StreamMeta) -> Result<BTreeMap<u64, Vec<Record>>, FlowError> {
    let mut out: BTreeMap<u64, Vec<Record>> = BTreeMap::new();
    for r in records {
        out.entry(epoch_of(r.ts, meta)?).or_default().push(r.clone());
    }
    Ok(out)
}

/// Device-side sealing state for one stream.
#[derive(Clone)]
pub struct Producer {
    meta: StreamMeta,
    key: SigningKey,
    tree: TreeParams,
    chain: CompactChain,
    kd: DistributionKey,
    registration_txid: Digest,
    digests: BTreeMap<u64, Digest>,
    pub codec: Codec,
}

impl Producer {
    pub fn new(
        meta: StreamMeta,
        key: SigningKey,
        secrets: &StreamSecrets,
        kd: DistributionKey,
        registration_txid: Digest,
    ) -> Result<Self, FlowError> {
        let tree = secrets.tree_params(&meta)?;
        let chain = CompactChain::new(&secrets.chain_params(&meta)?, None)?;
        Ok(Self {
            meta,
            key,
            tree,
            chain,
            kd,
            registration_txid,
            digests: BTreeMap::new(),
            codec: Codec::default(),
        })
    }

    pub fn meta(&self) -> &StreamMeta {
        &self.meta
    }

    pub fn key(&self) -> &SigningKey {
        &self.key
    }

    pub fn distribution_key(&self) -> &DistributionKey {
        &self.kd
    }

    /// Switch to a rotated distribution key for later lockboxes.
    pub fn set_distribution_key(&mut self, kd: DistributionKey) {
        self.kd = kd;
    }

    /// Record the digest of an already stored chunk.
    pub fn remember(&mut self, counter: u64, digest: Digest) {
        self.digests.insert(counter, digest);
    }

    pub fn digest(&self, counter: u64) -> Option<Digest> {
        self.digests.get(&counter).copied()
    }

    /// Backlink targets of `counter` whose digests are not known locally.
    pub fn unknown_backlinks(&self, counter: u64) -> Vec<u64> {
        if counter == 0 {
            return Vec::new();
        }
        backlink_offsets(counter).into_iter().filter(|c| !self.digests.contains_key(c)).collect()
    }

    /// Seal chunk `counter`; its digest is remembered for later backlinks.
    pub fn seal_epoch<R: RngCore + CryptoRng>(
        &mut self,
        counter: u64,
        records: &[Record],
        rng: &mut R,
    ) -> Result<Vec<u8>, FlowError> {
        let dek = derive_dek(&self.tree, counter)?;
        let sek = self.chain.sek(counter)?;
        let backlinks = backlinks_for(counter, &self.registration_txid, |c| self.digests.get(&c).copied());
        let mut sealer = ChunkSealer::new(&self.meta, &self.key);
        sealer.codec = self.codec;
        let bytes = sealer.seal(counter, records, &dek, &sek, &backlinks, rng)?;
        self.digests.insert(counter, chunk_digest(&bytes));
        Ok(bytes)
    }

    /// Lockbox publishing main token `h_counter` under the current KD.
    pub fn lockbox<R: RngCore + CryptoRng>(&self, counter: u64, rng: &mut R) -> Result<Lockbox, FlowError> {
        let token = compact_token(&self.chain, counter)?;
        Ok(seal_lockbox(&self.kd, &token, &self.meta.stream_id, &self.key, rng))
    }

    /// Lockboxes for every epoch sealed so far, under the current KD. Used
    /// after a rotation so remaining subscribers can open older epochs.
    pub fn republish_lockboxes<R: RngCore + CryptoRng>(&self, rng: &mut R) -> Result<Vec<Lockbox>, FlowError> {
        self.digests.keys().map(|&c| self.lockbox(c, rng)).collect()
    }

    pub fn sealed_counters(&self) -> impl Iterator<Item = u64> + '_ {
        self.digests.keys().copied()
    }

    /// Anchor the digest of chunk `counter`, signed by the device.
    pub fn anchor_tx(&self, counter: u64) -> Option<Tx> {
        let digest = self.digests.get(&counter)?;
        Some(Tx::anchor(self.meta.stream_id, counter, *digest, &self.key))
    }
}
