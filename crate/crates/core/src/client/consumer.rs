use std::collections::BTreeMap;

use super::FlowError;
use crate::authzchain::{AclDocument, Scope};
use crate::crypto::SigningKey;
use crate::keydist::{decrypt_grant, open_lockbox, GrantPayload};
use crate::keyregression::derive_range;
use crate::stealth::{recover_key, scan, OneTimeAddress, OneTimeSecret, PrincipalKeys};
use crate::storagenode::NodeClient;
use crate::streamio::{open_chunk, verify_chunk_sig, ChunkKey, Record, StreamMeta};
use crate::types::{EpochInterval, Sek};

/// A decrypted grant held by a consumer.
#[derive(Debug, Clone)]
pub struct ConsumerGrant {
    pub address: OneTimeAddress,
    pub secret: OneTimeSecret,
    pub scope: Scope,
    pub payload: GrantPayload,
    /// Distribution-key generation of the ACL the grant was read from.
    pub kd_generation: u32,
}

impl ConsumerGrant {
    pub fn signing_key(&self) -> SigningKey {
        self.secret.signing_key()
    }

    fn has_cover(&self, epoch: u64, depth: u8) -> bool {
        self.payload.cover.as_ref().is_some_and(|c| c.covers(epoch, depth))
    }
}

/// Find and decrypt every entry of `doc` addressed to `keys`.
pub fn discover_grants(keys: &PrincipalKeys, doc: &AclDocument) -> Result<Vec<ConsumerGrant>, FlowError> {
    let view = keys.view_key();
    let mut out = Vec::new();
    for entry in doc.entries.iter().filter(|e| scan(&view, &e.address)) {
        let secret = recover_key(&entry.address, keys)?;
        let plain = decrypt_grant(&entry.grant, &secret)?;
        let payload = GrantPayload::from_bytes(&plain, doc.stream_id)?;
        out.push(ConsumerGrant {
            address: entry.address,
            secret,
            scope: entry.scope.clone(),
            payload,
            kd_generation: doc.kd_generation,
        });
    }
    Ok(out)
}

/// Reads and decrypts stream data with a set of grants.
pub struct Consumer {
    meta: StreamMeta,
    grants: Vec<ConsumerGrant>,
}

impl Consumer {
    pub fn new(meta: StreamMeta, grants: Vec<ConsumerGrant>) -> Self {
        Self { meta, grants }
    }

    pub fn grants(&self) -> &[ConsumerGrant] {
        &self.grants
    }

    /// Index of the grant used for `epoch`: one holding a cover for it, then
    /// one whose scope includes it, then the first grant (the node will
    /// refuse, which is what the caller should see).
    fn grant_for(&self, epoch: u64) -> usize {
        let depth = self.meta.tree_depth;
        self.grants
            .iter()
            .position(|g| g.has_cover(epoch, depth))
            .or_else(|| self.grants.iter().position(|g| g.scope.covers(epoch)))
            .unwrap_or(0)
    }

    /// Fetch and decrypt every stored chunk in `range`. Missing chunks are
    /// skipped; any refusal or verification failure aborts the read.
    pub fn read(
        &self,
        range: EpochInterval,
        mut connect: impl FnMut(SigningKey) -> NodeClient,
    ) -> Result<BTreeMap<u64, Vec<Record>>, FlowError> {
        if self.grants.is_empty() {
            return Err(FlowError::NoGrant);
        }
        let mut groups: Vec<(usize, EpochInterval)> = Vec::new();
        for e in range.iter() {
            let g = self.grant_for(e);
            match groups.last_mut() {
                Some((last, iv)) if *last == g && iv.end + 1 == e => iv.end = e,
                _ => groups.push((g, EpochInterval::single(e))),
            }
        }
        let mut out = BTreeMap::new();
        for (g, iv) in groups {
            let grant = &self.grants[g];
            let mut client = connect(grant.signing_key());
            let sid = self.meta.stream_id;
            let fetched = client.get_range(sid, self.meta.epoch_start(iv.start), self.meta.epoch_start(iv.end))?;
            let present: Vec<(u64, Vec<u8>)> =
                fetched.chunks.into_iter().filter_map(|(c, b)| b.map(|b| (c, b))).collect();
            let needs_sek: Vec<u64> = present
                .iter()
                .map(|(c, _)| *c)
                .filter(|c| !grant.has_cover(*c, self.meta.tree_depth))
                .collect();
            let seks = match needs_sek.last() {
                Some(&last) => self.subscription_keys(grant, needs_sek[0], last, &mut client)?,
                None => BTreeMap::new(),
            };
            for (counter, bytes) in present {
                if !verify_chunk_sig(&bytes, &self.meta.producer_pub)? {
                    return Err(FlowError::BadChunkSignature(counter));
                }
                let key = match grant.payload.cover.as_ref().and_then(|c| c.dek(counter, self.meta.tree_depth)) {
                    Some(dek) => ChunkKey::Dek(dek),
                    None => ChunkKey::Sek(*seks.get(&counter).ok_or(FlowError::NoGrant)?),
                };
                out.insert(counter, open_chunk(&bytes, key, &self.meta)?);
            }
        }
        Ok(out)
    }

    /// SEKs for `[from, to]` from the grant's start token and the lockbox of
    /// epoch `to`.
    fn subscription_keys(
        &self,
        grant: &ConsumerGrant,
        from: u64,
        to: u64,
        client: &mut NodeClient,
    ) -> Result<BTreeMap<u64, Sek>, FlowError> {
        let Some(sub) = &grant.payload.subscription else {
            return Err(FlowError::NoGrant);
        };
        let from = from.max(sub.start_token.index);
        if from > to {
            return Err(FlowError::NoGrant);
        }
        let lockbox = match client.get_lockbox(self.meta.stream_id, to) {
            Ok(lb) => lb,
            Err(e) if e.status() == Some(crate::storagenode::Status::NotFound) => {
                return Err(FlowError::MissingLockbox(to));
            }
            Err(e) => return Err(e.into()),
        };
        let kd = sub.distribution_key(grant.kd_generation);
        let h_to = open_lockbox(&kd, &lockbox, &self.meta.producer_pub)?;
        let h_from = sub.start_token.advance(from)?;
        Ok(derive_range(&h_to, &h_from, &self.meta.stream_id)?)
    }
}
