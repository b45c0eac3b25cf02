use std::collections::BTreeMap;

use parking_lot::RwLock;

use crate::crypto::{sha256, Digest, PublicKey};
use crate::keydist::EncryptedGrant;
use crate::keytree::normalize_intervals;
use crate::stealth::OneTimeAddress;
use crate::types::{EpochInterval, StreamId};
use crate::wire::{Reader, WireError, Writer};

/// Epochs a grant entry covers: explicit intervals and/or every epoch from
/// `subscribe_from` onwards.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Scope {
    /// Sorted, disjoint and non-adjacent.
    pub intervals: Vec<EpochInterval>,
    pub subscribe_from: Option<u64>,
}

impl Scope {
    pub fn new(intervals: &[EpochInterval], subscribe_from: Option<u64>) -> Result<Self, WireError> {
        let intervals = if intervals.is_empty() {
            Vec::new()
        } else {
            normalize_intervals(intervals, u64::MAX).map_err(|_| WireError::Invalid("scope intervals"))?
        };
        Ok(Self { intervals, subscribe_from })
    }

    pub fn covers(&self, epoch: u64) -> bool {
        self.covers_range(EpochInterval::single(epoch))
    }

    /// True iff every epoch of `range` is in scope.
    pub fn covers_range(&self, range: EpochInterval) -> bool {
        let mut cur = range.start;
        loop {
            if self.subscribe_from.is_some_and(|s| s <= cur) {
                return true;
            }
            let Some(iv) = self.intervals.iter().find(|iv| iv.contains(cur)) else {
                return false;
            };
            if iv.end >= range.end {
                return true;
            }
            cur = iv.end + 1;
        }
    }

    pub fn write_to(&self, w: &mut Writer) {
        w.u16(u16::try_from(self.intervals.len()).expect("too many intervals"));
        for iv in &self.intervals {
            w.u64(iv.start).u64(iv.end);
        }
        match self.subscribe_from {
            Some(s) => w.u8(1).u64(s),
            None => w.u8(0),
        };
    }

    pub fn read_from(r: &mut Reader<'_>) -> Result<Self, WireError> {
        let n = r.u16()? as usize;
        let mut intervals = Vec::with_capacity(n.min(r.remaining() / 16));
        for _ in 0..n {
            let (start, end) = (r.u64()?, r.u64()?);
            if start > end {
                return Err(WireError::Invalid("interval bounds"));
            }
            intervals.push(EpochInterval::new(start, end));
        }
        let subscribe_from = match r.u8()? {
            0 => None,
            1 => Some(r.u64()?),
            _ => return Err(WireError::Invalid("subscription flag")),
        };
        let scope = Self { intervals, subscribe_from };
        // Only the normalized form is canonical.
        if Scope::new(&scope.intervals, subscribe_from)? != scope {
            return Err(WireError::Invalid("non-canonical intervals"));
        }
        Ok(scope)
    }
}

impl std::fmt::Display for Scope {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let ivs: Vec<String> = self.intervals.iter().map(|iv| iv.to_string()).collect();
        write!(f, "intervals=[{}]", ivs.join(","))?;
        match self.subscribe_from {
            Some(s) => write!(f, " subscribe-from={s}"),
            None => write!(f, " subscribe-from=-"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AclEntry {
    pub address: OneTimeAddress,
    pub scope: Scope,
    pub grant: EncryptedGrant,
}

/// Off-chain access control list referenced from the chain by its hash.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AclDocument {
    pub stream_id: StreamId,
    pub kd_generation: u32,
    /// Sorted by one-time address `P`, no duplicates.
    pub entries: Vec<AclEntry>,
}

impl AclDocument {
    pub fn new(stream_id: StreamId, kd_generation: u32, mut entries: Vec<AclEntry>) -> Result<Self, WireError> {
        entries.sort_by_key(|e| e.address.address);
        if entries.windows(2).any(|w| w[0].address.address == w[1].address.address) {
            return Err(WireError::Invalid("duplicate grant address"));
        }
        if entries.iter().any(|e| e.grant.recipient != e.address.address) {
            return Err(WireError::Invalid("grant recipient"));
        }
        Ok(Self { stream_id, kd_generation, entries })
    }

    pub fn empty(stream_id: StreamId) -> Self {
        Self { stream_id, kd_generation: 0, entries: Vec::new() }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(self.stream_id.as_bytes())
            .u32(self.kd_generation)
            .u32(u32::try_from(self.entries.len()).expect("too many entries"));
        for e in &self.entries {
            w.bytes(&e.address.to_bytes());
            e.scope.write_to(&mut w);
            e.grant.write_to(&mut w);
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, WireError> {
        let mut r = Reader::new(bytes);
        let stream_id = StreamId(r.array()?);
        let kd_generation = r.u32()?;
        let n = r.u32()? as usize;
        let mut entries = Vec::with_capacity(n.min(r.remaining() / 128));
        for _ in 0..n {
            entries.push(AclEntry {
                address: OneTimeAddress::read_from(&mut r)?,
                scope: Scope::read_from(&mut r)?,
                grant: EncryptedGrant::read_from(&mut r)?,
            });
        }
        r.finish()?;
        let doc = Self::new(stream_id, kd_generation, entries.clone())?;
        if doc.entries != entries {
            return Err(WireError::Invalid("entry order"));
        }
        Ok(doc)
    }

    pub fn hash(&self) -> Digest {
        acl_hash(&self.to_bytes())
    }

    pub fn entry(&self, address: &PublicKey) -> Option<&AclEntry> {
        self.entries
            .binary_search_by(|e| e.address.address.cmp(address))
            .ok()
            .map(|i| &self.entries[i])
    }
}

pub fn acl_hash(bytes: &[u8]) -> Digest {
    sha256(&[bytes])
}

/// Content-addressed lookup of ACL documents. Implementations return the
/// bytes stored under `hash`; callers verify the hash themselves.
pub trait AclStore {
    fn fetch_acl(&self, hash: &Digest) -> Option<Vec<u8>>;
}

/// In-memory ACL store.
#[derive(Debug, Default)]
pub struct MemoryAclStore {
    docs: RwLock<BTreeMap<Digest, Vec<u8>>>,
}

impl MemoryAclStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn put(&self, bytes: Vec<u8>) -> Digest {
        let h = acl_hash(&bytes);
        self.docs.write().insert(h, bytes);
        h
    }

    /// Store bytes under an arbitrary key, bypassing content addressing.
    pub fn put_raw(&self, hash: Digest, bytes: Vec<u8>) {
        self.docs.write().insert(hash, bytes);
    }
}

impl AclStore for MemoryAclStore {
    fn fetch_acl(&self, hash: &Digest) -> Option<Vec<u8>> {
        self.docs.read().get(hash).cloned()
    }
}

impl<T: AclStore + ?Sized> AclStore for &T {
    fn fetch_acl(&self, hash: &Digest) -> Option<Vec<u8>> {
        (**self).fetch_acl(hash)
    }
}

impl<T: AclStore + ?Sized> AclStore for std::sync::Arc<T> {
    fn fetch_acl(&self, hash: &Digest) -> Option<Vec<u8>> {
        (**self).fetch_acl(hash)
    }
}
