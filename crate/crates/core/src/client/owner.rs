use rand::{CryptoRng, RngCore};

use super::FlowError;
use crate::authzchain::{AclDocument, AclEntry, Scope, Tx};
use crate::crypto::{random_bytes, Digest, PublicKey, SigningKey};
use crate::keydist::{encrypt_grant, rotate_kd, DistributionKey, GrantPayload, SubscriptionGrant};
use crate::keyregression::{ChainParams, SecondaryToken};
use crate::keytree::{compute_cover, derive_dek, TreeParams};
use crate::stealth::{derive_onetime, PrincipalPublic};
use crate::streamio::StreamMeta;
use crate::types::{Dek, EpochInterval};
use crate::wire::{Reader, WireError, Writer};

/// Root secrets of one stream, shared by the owner and its producer device.
#[derive(Clone, PartialEq, Eq)]
pub struct StreamSecrets {
    pub tree_seed: Digest,
    pub main_seed: Digest,
    pub secondary_seed: Digest,
}

impl std::fmt::Debug for StreamSecrets {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("StreamSecrets(..)")
    }
}

impl StreamSecrets {
    pub const LEN: usize = 96;

    pub fn generate<R: RngCore + CryptoRng>(rng: &mut R) -> Self {
        Self { tree_seed: random_bytes(rng), main_seed: random_bytes(rng), secondary_seed: random_bytes(rng) }
    }

    pub fn to_bytes(&self) -> [u8; Self::LEN] {
        let mut out = [0u8; Self::LEN];
        out[..32].copy_from_slice(&self.tree_seed);
        out[32..64].copy_from_slice(&self.main_seed);
        out[64..].copy_from_slice(&self.secondary_seed);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, WireError> {
        let mut r = Reader::new(bytes);
        let s = Self { tree_seed: r.array()?, main_seed: r.array()?, secondary_seed: r.array()? };
        r.finish()?;
        Ok(s)
    }

    pub fn tree_params(&self, meta: &StreamMeta) -> Result<TreeParams, FlowError> {
        Ok(TreeParams::new(meta.stream_id, meta.tree_depth, self.tree_seed)?)
    }

    pub fn chain_params(&self, meta: &StreamMeta) -> Result<ChainParams, FlowError> {
        Ok(ChainParams::new(meta.stream_id, meta.chain_length, self.main_seed, self.secondary_seed)?)
    }
}

/// A grant as the owner remembers it, including the plaintext payload needed
/// to re-encrypt it on key rotation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IssuedGrant {
    pub label: String,
    pub entry: AclEntry,
    pub payload: GrantPayload,
}

/// Owner-side state of one stream.
#[derive(Debug, Clone)]
pub struct OwnerStream {
    pub meta: StreamMeta,
    pub secrets: StreamSecrets,
    pub kd: DistributionKey,
    pub grants: Vec<IssuedGrant>,
}

impl OwnerStream {
    pub fn new<R: RngCore + CryptoRng>(meta: StreamMeta, rng: &mut R) -> Self {
        Self {
            meta,
            secrets: StreamSecrets::generate(rng),
            kd: DistributionKey::generate(rng),
            grants: Vec::new(),
        }
    }

    pub fn register_tx(&self, owner: &SigningKey) -> Tx {
        Tx::register_stream(self.meta.clone(), self.acl_document().hash(), owner)
    }

    pub fn dek(&self, epoch: u64) -> Result<Dek, FlowError> {
        Ok(derive_dek(&self.secrets.tree_params(&self.meta)?, epoch)?)
    }

    /// Issue a grant to a fresh one-time address of `principal`.
    pub fn grant<R: RngCore + CryptoRng>(
        &mut self,
        label: &str,
        principal: &PrincipalPublic,
        epochs: &[EpochInterval],
        subscribe_from: Option<u64>,
        rng: &mut R,
    ) -> Result<&IssuedGrant, FlowError> {
        if epochs.is_empty() && subscribe_from.is_none() {
            return Err(FlowError::EmptyGrant);
        }
        let capacity = self.meta.epoch_capacity();
        for e in epochs.iter().map(|iv| iv.end).chain(subscribe_from) {
            if e >= capacity {
                return Err(FlowError::EpochOutOfRange(e));
            }
        }
        let cover = if epochs.is_empty() {
            None
        } else {
            Some(compute_cover(&self.secrets.tree_params(&self.meta)?, epochs)?)
        };
        let subscription = match subscribe_from {
            Some(start) => {
                let origin = SecondaryToken { index: 0, value: self.secrets.chain_params(&self.meta)?.secondary_origin() };
                Some(SubscriptionGrant { start_token: origin.advance(start)?, kd: self.kd.key })
            }
            None => None,
        };
        let payload = GrantPayload { cover, subscription };
        let address = derive_onetime(principal, rng)?;
        let grant = encrypt_grant(&payload.to_bytes(), &address.address, rng)?;
        let scope = Scope::new(epochs, subscribe_from)?;
        self.grants.push(IssuedGrant { label: label.to_string(), entry: AclEntry { address, scope, grant }, payload });
        Ok(self.grants.last().expect("just pushed"))
    }

    /// Drop every grant labelled `label`, rotate the distribution key and
    /// re-encrypt the remaining grants under it. Returns how many grants were
    /// removed.
    pub fn revoke<R: RngCore + CryptoRng>(&mut self, label: &str, rng: &mut R) -> Result<usize, FlowError> {
        let before = self.grants.len();
        self.grants.retain(|g| g.label != label);
        let removed = before - self.grants.len();
        if removed == 0 {
            return Err(FlowError::UnknownLabel(label.to_string()));
        }
        let remaining: Vec<_> = self.grants.iter().map(|g| (g.entry.address, g.payload.clone())).collect();
        let (next, sealed) = rotate_kd(&self.kd, &remaining, rng)?;
        for (g, sealed) in self.grants.iter_mut().zip(sealed) {
            if let Some(sub) = g.payload.subscription.as_mut() {
                sub.kd = next.key;
            }
            g.entry.grant = sealed;
        }
        self.kd = next;
        Ok(removed)
    }

    pub fn acl_document(&self) -> AclDocument {
        let entries = self.grants.iter().map(|g| g.entry.clone()).collect();
        AclDocument::new(self.meta.stream_id, self.kd.generation, entries).expect("one-time addresses are unique")
    }

    /// Permission update committing to the current ACL; `seq` must be one
    /// more than the stream's last accepted update.
    pub fn permission_update_tx(&self, owner: &SigningKey, seq: u64) -> Tx {
        Tx::permission_update(self.meta.stream_id, seq, self.acl_document().hash(), self.kd.generation, owner)
    }

    pub fn labels_for(&self, address: &PublicKey) -> Option<&str> {
        self.grants.iter().find(|g| g.entry.address.address == *address).map(|g| g.label.as_str())
    }

    /// `meta || secrets || kd || gen u32 || count u32 || (label || entry-doc || payload)*`
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        self.meta.write_to(&mut w);
        w.bytes(&self.secrets.to_bytes()).bytes(&self.kd.key).u32(self.kd.generation);
        w.u32(self.grants.len() as u32);
        for g in &self.grants {
            w.var_bytes(g.label.as_bytes());
            w.bytes(&g.entry.address.to_bytes());
            g.entry.scope.write_to(&mut w);
            g.entry.grant.write_to(&mut w);
            w.var_bytes(&g.payload.to_bytes());
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, FlowError> {
        let mut r = Reader::new(bytes);
        let meta = StreamMeta::read_from(&mut r)?;
        let secrets = StreamSecrets::from_bytes(r.take(StreamSecrets::LEN)?)?;
        let kd = DistributionKey { key: r.array()?, generation: r.u32()? };
        let n = r.u32()? as usize;
        let mut grants = Vec::with_capacity(n.min(1024));
        for _ in 0..n {
            let label = String::from_utf8(r.var_bytes()?.to_vec()).map_err(|_| WireError::Invalid("label"))?;
            let address = crate::stealth::OneTimeAddress::read_from(&mut r)?;
            let scope = Scope::read_from(&mut r)?;
            let grant = crate::keydist::EncryptedGrant::read_from(&mut r)?;
            let payload = GrantPayload::from_bytes(r.var_bytes()?, meta.stream_id)?;
            grants.push(IssuedGrant { label, entry: AclEntry { address, scope, grant }, payload });
        }
        r.finish()?;
        Ok(Self { meta, secrets, kd, grants })
    }
}
