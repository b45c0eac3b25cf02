use std::collections::{BTreeMap, BTreeSet};
use std::fmt::{self, Write as _};
use std::sync::Arc;

use parking_lot::{Mutex, RwLock};

use super::acl::{acl_hash, AclDocument, AclStore, Scope};
use super::tx::{ImmutabilityAnchor, OwnershipTransfer, PermissionUpdate, StreamRegister, Tx};
use crate::crypto::{Digest, PublicKey};
use crate::keydist::EncryptedGrant;
use crate::simchain::Block;
use crate::stealth::{scan, OneTimeAddress, ViewKey};
use crate::streamio::StreamMeta;
use crate::types::{EpochInterval, StreamId};

/// Why a transaction was not applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, thiserror::Error)]
pub enum RejectReason {
    #[error("bad-sig")]
    BadSig,
    #[error("unknown-stream")]
    UnknownStream,
    #[error("not-owner")]
    NotOwner,
    #[error("duplicate-stream")]
    DuplicateStream,
    #[error("acl-hash-mismatch")]
    AclHashMismatch,
    #[error("stale-anchor")]
    StaleAnchor,
    /// Already-applied txid, or an owner sequence number that is not the next one.
    #[error("replayed")]
    Replayed,
    /// Stream producer is not a device paired with the registering owner.
    #[error("unpaired-device")]
    Unpaired,
    #[error("missing-acl")]
    MissingAcl,
    #[error("malformed-acl")]
    MalformedAcl,
    #[error("malformed-meta")]
    MalformedMeta,
    /// Distribution key generation went backwards.
    #[error("stale-generation")]
    StaleGeneration,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StreamRecord {
    pub meta: StreamMeta,
    pub owner_pub: PublicKey,
    pub acl_hash: Digest,
    pub kd_generation: u32,
    pub update_seq: u64,
    pub registered_txid: Digest,
    pub registered_height: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeviceBinding {
    pub owner_pub: PublicKey,
    pub height: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PermissionEntry {
    pub address: OneTimeAddress,
    pub scope: Scope,
    pub grant: EncryptedGrant,
    pub generation: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AnchorRecord {
    pub counter: u64,
    pub digest: Digest,
    pub height: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rejection {
    pub height: u64,
    pub txid: Digest,
    pub reason: RejectReason,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Decision {
    pub allow: bool,
    pub entry: Option<PermissionEntry>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum StateError {
    #[error("block {got} does not follow height {have:?}")]
    HeightGap { have: Option<u64>, got: u64 },
}

/// Validated transaction together with the ACL document it references.
pub struct Validated<'a> {
    tx: &'a Tx,
    acl: Option<AclDocument>,
}

/// Access-control state replayed from the ordered transaction log.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AcState {
    streams: BTreeMap<StreamId, StreamRecord>,
    devices: BTreeMap<PublicKey, DeviceBinding>,
    permissions: BTreeMap<(StreamId, PublicKey), PermissionEntry>,
    anchors: BTreeMap<StreamId, Vec<AnchorRecord>>,
    seen: BTreeSet<Digest>,
    height: Option<u64>,
}

impl AcState {
    pub fn new() -> Self {
        Self::default()
    }

    /// Height of the last applied block.
    pub fn height(&self) -> Option<u64> {
        self.height
    }

    pub fn stream(&self, id: &StreamId) -> Option<&StreamRecord> {
        self.streams.get(id)
    }

    pub fn streams(&self) -> impl Iterator<Item = &StreamRecord> {
        self.streams.values()
    }

    pub fn device_owner(&self, device: &PublicKey) -> Option<&PublicKey> {
        self.devices.get(device).map(|b| &b.owner_pub)
    }

    pub fn anchors(&self, id: &StreamId) -> &[AnchorRecord] {
        self.anchors.get(id).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn latest_anchor(&self, id: &StreamId) -> Option<AnchorRecord> {
        self.anchors(id).last().copied()
    }

    pub fn is_seen(&self, txid: &Digest) -> bool {
        self.seen.contains(txid)
    }

    pub fn permissions(&self, id: &StreamId) -> impl Iterator<Item = &PermissionEntry> + '_ {
        let id = *id;
        self.permissions.range((id, PublicKey::MIN)..).take_while(move |((s, _), _)| *s == id).map(|(_, e)| e)
    }

    /// True iff `device` may store chunks for the stream: it is the
    /// registered producer and still paired with the current owner.
    pub fn producer_authorized(&self, id: &StreamId, device: &PublicKey) -> bool {
        self.streams.get(id).is_some_and(|s| {
            s.meta.producer_pub == *device && self.device_owner(device) == Some(&s.owner_pub)
        })
    }

    fn fetch_acl(&self, store: &dyn AclStore, hash: &Digest, stream_id: &StreamId) -> Result<AclDocument, RejectReason> {
        let bytes = store.fetch_acl(hash).ok_or(RejectReason::MissingAcl)?;
        if acl_hash(&bytes) != *hash {
            return Err(RejectReason::AclHashMismatch);
        }
        let doc = AclDocument::from_bytes(&bytes).map_err(|_| RejectReason::MalformedAcl)?;
        if doc.stream_id != *stream_id {
            return Err(RejectReason::MalformedAcl);
        }
        Ok(doc)
    }

    fn stream_or_unknown(&self, id: &StreamId) -> Result<&StreamRecord, RejectReason> {
        self.streams.get(id).ok_or(RejectReason::UnknownStream)
    }

    pub fn validate_tx<'a>(&self, tx: &'a Tx, acls: &dyn AclStore) -> Result<Validated<'a>, RejectReason> {
        if self.seen.contains(&tx.txid()) {
            return Err(RejectReason::Replayed);
        }
        if !tx.signatures_valid() {
            return Err(RejectReason::BadSig);
        }
        let acl = match tx {
            Tx::DevicePair(_) => None,
            Tx::StreamRegister(StreamRegister { meta, acl_hash, owner_pub, .. }) => {
                if self.streams.contains_key(&meta.stream_id) {
                    return Err(RejectReason::DuplicateStream);
                }
                if meta.owner_addr != owner_pub.address() {
                    return Err(RejectReason::NotOwner);
                }
                meta.validate().map_err(|_| RejectReason::MalformedMeta)?;
                if self.device_owner(&meta.producer_pub) != Some(owner_pub) {
                    return Err(RejectReason::Unpaired);
                }
                Some(self.fetch_acl(acls, acl_hash, &meta.stream_id)?)
            }
            Tx::PermissionUpdate(PermissionUpdate { stream_id, seq, acl_hash, kd_generation, signer_pub, .. }) => {
                let s = self.stream_or_unknown(stream_id)?;
                if *signer_pub != s.owner_pub {
                    return Err(RejectReason::NotOwner);
                }
                if *seq != s.update_seq + 1 {
                    return Err(RejectReason::Replayed);
                }
                if *kd_generation < s.kd_generation {
                    return Err(RejectReason::StaleGeneration);
                }
                let doc = self.fetch_acl(acls, acl_hash, stream_id)?;
                if doc.kd_generation != *kd_generation {
                    return Err(RejectReason::MalformedAcl);
                }
                Some(doc)
            }
            Tx::ImmutabilityAnchor(ImmutabilityAnchor { stream_id, counter, signer_pub, .. }) => {
                let s = self.stream_or_unknown(stream_id)?;
                if *signer_pub != s.owner_pub && *signer_pub != s.meta.producer_pub {
                    return Err(RejectReason::NotOwner);
                }
                if self.latest_anchor(stream_id).is_some_and(|a| a.counter >= *counter) {
                    return Err(RejectReason::StaleAnchor);
                }
                None
            }
            Tx::OwnershipTransfer(OwnershipTransfer { stream_id, seq, current_owner_pub, .. }) => {
                let s = self.stream_or_unknown(stream_id)?;
                if *current_owner_pub != s.owner_pub {
                    return Err(RejectReason::NotOwner);
                }
                if *seq != s.update_seq + 1 {
                    return Err(RejectReason::Replayed);
                }
                None
            }
        };
        Ok(Validated { tx, acl })
    }

    fn replace_permissions(&mut self, doc: AclDocument) {
        let sid = doc.stream_id;
        let stale: Vec<_> = self.permissions.range((sid, PublicKey::MIN)..).take_while(|((s, _), _)| *s == sid).map(|(k, _)| *k).collect();
        for k in stale {
            self.permissions.remove(&k);
        }
        for e in doc.entries {
            self.permissions.insert(
                (sid, e.address.address),
                PermissionEntry { address: e.address, scope: e.scope, grant: e.grant, generation: doc.kd_generation },
            );
        }
    }

    fn commit(&mut self, v: Validated<'_>, height: u64) {
        let txid = v.tx.txid();
        match v.tx {
            Tx::DevicePair(t) => {
                self.devices.insert(t.device_pub, DeviceBinding { owner_pub: t.owner_pub, height });
            }
            Tx::StreamRegister(t) => {
                let doc = v.acl.expect("validated registration carries its ACL");
                self.streams.insert(
                    t.meta.stream_id,
                    StreamRecord {
                        meta: t.meta.clone(),
                        owner_pub: t.owner_pub,
                        acl_hash: t.acl_hash,
                        kd_generation: doc.kd_generation,
                        update_seq: 0,
                        registered_txid: txid,
                        registered_height: height,
                    },
                );
                self.replace_permissions(doc);
            }
            Tx::PermissionUpdate(t) => {
                let doc = v.acl.expect("validated update carries its ACL");
                let s = self.streams.get_mut(&t.stream_id).expect("validated stream");
                s.acl_hash = t.acl_hash;
                s.kd_generation = t.kd_generation;
                s.update_seq = t.seq;
                self.replace_permissions(doc);
            }
            Tx::ImmutabilityAnchor(t) => {
                self.anchors.entry(t.stream_id).or_default().push(AnchorRecord {
                    counter: t.counter,
                    digest: t.digest,
                    height,
                });
            }
            Tx::OwnershipTransfer(t) => {
                let s = self.streams.get_mut(&t.stream_id).expect("validated stream");
                s.owner_pub = t.new_owner_pub;
                s.update_seq = t.seq;
            }
        }
        self.seen.insert(txid);
    }

    /// Validate and, if accepted, apply `tx` as part of block `height`.
    pub fn apply_tx(&mut self, tx: &Tx, height: u64, acls: &dyn AclStore) -> Result<(), RejectReason> {
        let v = self.validate_tx(tx, acls)?;
        self.commit(v, height);
        Ok(())
    }

    /// Apply every transaction of the next block; invalid ones are skipped
    /// and returned.
    pub fn apply_block(&mut self, block: &Block, acls: &dyn AclStore) -> Result<Vec<Rejection>, StateError> {
        let expected = self.height.map_or(0, |h| h + 1);
        if block.height != expected {
            return Err(StateError::HeightGap { have: self.height, got: block.height });
        }
        let mut rejected = Vec::new();
        for tx in &block.txs {
            if let Err(reason) = self.apply_tx(tx, block.height, acls) {
                rejected.push(Rejection { height: block.height, txid: tx.txid(), reason });
            }
        }
        self.height = Some(block.height);
        Ok(rejected)
    }

    /// Allow iff a grant for `principal` covers every epoch of `range`.
    pub fn query_permission(
        &self,
        stream_id: &StreamId,
        principal: &PublicKey,
        range: EpochInterval,
    ) -> Result<Decision, RejectReason> {
        self.stream_or_unknown(stream_id)?;
        let entry = self.permissions.get(&(*stream_id, *principal)).cloned();
        let allow = entry.as_ref().is_some_and(|e| e.scope.covers_range(range));
        Ok(Decision { allow, entry })
    }

    /// Entries of the stream addressed to the principal behind `view_key`,
    /// found by scanning without decrypting any grant.
    pub fn audit_stream(&self, stream_id: &StreamId, view_key: &ViewKey) -> Result<Vec<&PermissionEntry>, RejectReason> {
        self.stream_or_unknown(stream_id)?;
        Ok(self.permissions(stream_id).filter(|e| scan(view_key, &e.address)).collect())
    }

    /// Deterministic sorted text rendering, one record per line.
    pub fn canonical_dump(&self) -> String {
        let mut out = String::new();
        let h = self.height.map_or("-".to_string(), |h| h.to_string());
        writeln!(out, "height {h}").unwrap();
        for (dev, b) in &self.devices {
            writeln!(out, "device {dev} owner={} height={}", b.owner_pub, b.height).unwrap();
        }
        for (sid, s) in &self.streams {
            writeln!(
                out,
                "stream {sid} owner={} acl={} gen={} seq={} reg={}@{} meta={}",
                s.owner_pub,
                hex::encode(s.acl_hash),
                s.kd_generation,
                s.update_seq,
                hex::encode(s.registered_txid),
                s.registered_height,
                hex::encode(s.meta.to_bytes()),
            )
            .unwrap();
        }
        for ((sid, p), e) in &self.permissions {
            writeln!(
                out,
                "perm {sid} {p} R={} {} gen={} grant={}",
                e.address.ephemeral,
                e.scope,
                e.generation,
                hex::encode(crate::crypto::sha256(&[&e.grant.to_bytes()])),
            )
            .unwrap();
        }
        for (sid, list) in &self.anchors {
            for a in list {
                writeln!(out, "anchor {sid} counter={} digest={} height={}", a.counter, hex::encode(a.digest), a.height)
                    .unwrap();
            }
        }
        for txid in &self.seen {
            writeln!(out, "seen {}", hex::encode(txid)).unwrap();
        }
        out
    }
}

impl fmt::Display for AcState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.canonical_dump())
    }
}

/// Left fold of `apply_block` over a confirmed chain prefix.
pub fn bootstrap(blocks: &[Block], acls: &dyn AclStore) -> Result<(AcState, Vec<Rejection>), StateError> {
    let mut state = AcState::new();
    let mut log = Vec::new();
    for b in blocks {
        log.extend(state.apply_block(b, acls)?);
    }
    Ok((state, log))
}

/// A shared state snapshot that readers clone cheaply and a single follower
/// replaces atomically after each block.
#[derive(Debug, Default)]
pub struct Replica {
    snapshot: RwLock<Arc<AcState>>,
    writer: Mutex<Vec<Rejection>>,
}

impl Replica {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn snapshot(&self) -> Arc<AcState> {
        self.snapshot.read().clone()
    }

    /// Apply blocks past the current height; earlier blocks are ignored.
    pub fn apply_blocks(&self, blocks: &[Block], acls: &dyn AclStore) -> Result<usize, StateError> {
        let mut log = self.writer.lock();
        let mut next = (*self.snapshot()).clone();
        let mut applied = 0;
        for b in blocks {
            if next.height.is_some_and(|h| b.height <= h) {
                continue;
            }
            log.extend(next.apply_block(b, acls)?);
            applied += 1;
        }
        if applied > 0 {
            *self.snapshot.write() = Arc::new(next);
        }
        Ok(applied)
    }

    pub fn rejections(&self) -> Vec<Rejection> {
        self.writer.lock().clone()
    }
}
