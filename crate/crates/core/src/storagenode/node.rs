use std::collections::HashMap;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use parking_lot::Mutex;

use super::backend::Backend;
use super::wire::{encode_chunk_list, encode_response, Auth, MetaKind, Op, RangeResult, Request, Status};
use crate::authzchain::{acl_hash, AcState, AclDocument, AclStore, Replica, StateError};
use crate::crypto::{Digest, PublicKey};
use crate::keydist::{lockbox_storage_key, Lockbox};
use crate::simchain::{Chain, ChainError};
use crate::streamio::{chunk_id, epoch_range, Chunk};
use crate::types::{EpochInterval, StreamId};

/// Upper bound on counters a single range request may span.
pub const MAX_RANGE_EPOCHS: u64 = 1 << 16;

#[derive(Debug, Clone, Copy)]
pub struct NodeConfig {
    /// Accepted clock skew for signed requests, each direction.
    pub replay_window_ms: i64,
    /// Serve the authorized part of a partially authorized range instead of
    /// denying it.
    pub partial_ranges: bool,
}

impl Default for NodeConfig {
    fn default() -> Self {
        Self { replay_window_ms: 30_000, partial_ranges: false }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum NodeError {
    #[error(transparent)]
    Chain(#[from] ChainError),
    #[error(transparent)]
    State(#[from] StateError),
}

/// Per-connection authentication state.
#[derive(Debug, Default, Clone)]
pub struct Session {
    pub identity: Option<PublicKey>,
}

/// Backend key layout.
pub mod keys {
    use crate::crypto::Digest;
    use crate::types::StreamId;

    pub fn chunk(id: &Digest) -> Vec<u8> {
        [b"chunk/".as_slice(), id].concat()
    }

    pub fn index_prefix(sid: &StreamId) -> Vec<u8> {
        [b"idx/".as_slice(), sid.as_bytes()].concat()
    }

    /// Maps a counter to its chunk id.
    pub fn index(sid: &StreamId, counter: u64) -> Vec<u8> {
        [index_prefix(sid).as_slice(), &counter.to_be_bytes()].concat()
    }

    pub fn acl(hash: &Digest) -> Vec<u8> {
        [b"acl/".as_slice(), hash].concat()
    }

    pub fn lockbox(storage_key: &Digest) -> Vec<u8> {
        [b"lockbox/".as_slice(), storage_key].concat()
    }
}

use keys::{acl as acl_key, chunk as chunk_key, index as index_key, index_prefix, lockbox as lockbox_key};

type Clock = Box<dyn Fn() -> i64 + Send + Sync>;
type Outcome = Result<Vec<u8>, Status>;

/// How a requester may read a stream.
enum ReadAccess {
    Full,
    Scoped(crate::authzchain::Scope),
}

impl ReadAccess {
    fn covers(&self, range: EpochInterval) -> bool {
        match self {
            ReadAccess::Full => true,
            ReadAccess::Scoped(s) => s.covers_range(range),
        }
    }
}

/// An authorizing key-value node serving one chain's streams.
pub struct StorageNode {
    backend: Arc<dyn Backend>,
    replica: Replica,
    config: NodeConfig,
    clock: Clock,
    nonces: Mutex<HashMap<(PublicKey, u64), i64>>,
    lockbox_writes: Mutex<()>,
}

impl StorageNode {
    pub fn new(backend: Arc<dyn Backend>, config: NodeConfig) -> Self {
        Self {
            backend,
            replica: Replica::new(),
            config,
            clock: Box::new(crate::simchain::now_ms),
            nonces: Mutex::new(HashMap::new()),
            lockbox_writes: Mutex::new(()),
        }
    }

    pub fn with_clock(mut self, clock: impl Fn() -> i64 + Send + Sync + 'static) -> Self {
        self.clock = Box::new(clock);
        self
    }

    pub fn snapshot(&self) -> Arc<AcState> {
        self.replica.snapshot()
    }

    pub fn replica(&self) -> &Replica {
        &self.replica
    }

    pub fn backend(&self) -> &Arc<dyn Backend> {
        &self.backend
    }

    /// Apply newly confirmed blocks; returns how many were applied.
    pub fn sync(&self, chain: &dyn Chain) -> Result<usize, NodeError> {
        let from = self.snapshot().height().map_or(0, |h| h + 1);
        let blocks = chain.confirmed_blocks(from)?;
        Ok(self.replica.apply_blocks(&blocks, self)?)
    }

    /// Poll the chain every `period` until `stop` is set.
    pub fn spawn_follower(
        self: &Arc<Self>,
        chain: Arc<dyn Chain>,
        period: Duration,
        stop: Arc<AtomicBool>,
    ) -> JoinHandle<()> {
        let node = Arc::clone(self);
        std::thread::spawn(move || {
            while !stop.load(Ordering::Relaxed) {
                if let Err(e) = node.sync(chain.as_ref()) {
                    eprintln!("chain follower: {e}");
                }
                std::thread::sleep(period);
            }
        })
    }

    /// Decode, authenticate, authorize and execute one request frame.
    pub fn handle_frame(&self, frame: &[u8], session: &mut Session) -> Vec<u8> {
        let (status, body) = match Request::parse(frame) {
            Ok((req, sig_ok)) => match self.serve(&req, sig_ok, session) {
                Ok(body) => (Status::Ok, body),
                Err(s) => (s, Vec::new()),
            },
            Err(_) => (Status::Malformed, Vec::new()),
        };
        encode_response(status, &body)
    }

    fn authenticate(&self, req: &Request, sig_ok: bool, session: &mut Session) -> Result<PublicKey, Status> {
        match &req.auth {
            Auth::Session => session.identity.ok_or(Status::NoSession),
            Auth::Signed { requester, timestamp, nonce, .. } => {
                if !sig_ok {
                    return Err(Status::BadSignature);
                }
                let now = (self.clock)();
                let window = self.config.replay_window_ms;
                if (now - timestamp).abs() > window {
                    return Err(Status::StaleTimestamp);
                }
                let mut nonces = self.nonces.lock();
                if nonces.len() > 100_000 {
                    nonces.retain(|_, ts| now - *ts <= 2 * window);
                }
                if nonces.insert((*requester, *nonce), *timestamp).is_some() {
                    return Err(Status::ReplayedNonce);
                }
                Ok(*requester)
            }
        }
    }

    pub fn serve(&self, req: &Request, sig_ok: bool, session: &mut Session) -> Outcome {
        let requester = self.authenticate(req, sig_ok, session)?;
        let state = self.snapshot();
        let sid = &req.stream_id;
        match &req.op {
            Op::Hello => {
                session.identity = Some(requester);
                Ok(Vec::new())
            }
            Op::Status => {
                let mut out = vec![state.height().is_some() as u8];
                out.extend_from_slice(&state.height().unwrap_or(0).to_be_bytes());
                Ok(out)
            }
            Op::Store { chunk_id, chunk } => self.store_chunk(&state, sid, &requester, chunk_id, chunk),
            Op::Get { counter } => {
                let access = self.read_access(&state, sid, &requester)?;
                if !access.covers(EpochInterval::single(*counter)) {
                    return Err(Status::Unauthorized);
                }
                self.load_chunk(sid, *counter)?.ok_or(Status::NotFound)
            }
            Op::GetRange { t_a, t_b } => {
                let access = self.read_access(&state, sid, &requester)?;
                let meta = &state.stream(sid).ok_or(Status::UnknownStream)?.meta;
                let range = epoch_range(*t_a, *t_b, meta).map_err(|_| Status::Malformed)?;
                if range.len() > MAX_RANGE_EPOCHS {
                    return Err(Status::Malformed);
                }
                let mut counters: Vec<u64> = range.iter().collect();
                if !access.covers(range) {
                    if !self.config.partial_ranges {
                        return Err(Status::Unauthorized);
                    }
                    counters.retain(|c| access.covers(EpochInterval::single(*c)));
                    if counters.is_empty() {
                        return Err(Status::Unauthorized);
                    }
                }
                let mut chunks = Vec::with_capacity(counters.len());
                for c in counters {
                    chunks.push((c, self.load_chunk(sid, c)?));
                }
                Ok(RangeResult { first: range.start, last: range.end, chunks }.to_bytes())
            }
            Op::GetAll => {
                let access = self.read_access(&state, sid, &requester)?;
                let mut out = Vec::new();
                for c in self.stored_counters(sid)? {
                    if access.covers(EpochInterval::single(c)) {
                        if let Some(bytes) = self.load_chunk(sid, c)? {
                            out.push((c, bytes));
                        }
                    }
                }
                Ok(encode_chunk_list(&out))
            }
            Op::PutMeta { kind: MetaKind::Acl, key, value } => self.put_acl(&state, sid, &requester, key, value),
            Op::PutMeta { kind: MetaKind::Lockbox, key, value } => {
                self.put_lockbox(&state, sid, &requester, key, value)
            }
            Op::GetMeta { kind: MetaKind::Acl, key } => {
                let bytes = self.backend.get(&acl_key(key)).map_err(|_| Status::Internal)?.ok_or(Status::NotFound)?;
                if acl_hash(&bytes) != *key {
                    return Err(Status::HashMismatch);
                }
                Ok(bytes)
            }
            Op::GetMeta { kind: MetaKind::Lockbox, key } => {
                let access = self.read_access(&state, sid, &requester)?;
                let bytes =
                    self.backend.get(&lockbox_key(key)).map_err(|_| Status::Internal)?.ok_or(Status::NotFound)?;
                let lb = Lockbox::from_bytes(&bytes).map_err(|_| Status::Internal)?;
                if lb.stream_id != *sid {
                    return Err(Status::NotFound);
                }
                if !access.covers(EpochInterval::single(lb.epoch)) {
                    return Err(Status::Unauthorized);
                }
                Ok(bytes)
            }
        }
    }

    fn read_access(&self, state: &AcState, sid: &StreamId, requester: &PublicKey) -> Result<ReadAccess, Status> {
        let s = state.stream(sid).ok_or(Status::UnknownStream)?;
        if *requester == s.owner_pub || *requester == s.meta.producer_pub {
            return Ok(ReadAccess::Full);
        }
        let decision = state
            .query_permission(sid, requester, EpochInterval::single(0))
            .map_err(|_| Status::UnknownStream)?;
        decision.entry.map(|e| ReadAccess::Scoped(e.scope)).ok_or(Status::Unauthorized)
    }

    fn load_chunk(&self, sid: &StreamId, counter: u64) -> Result<Option<Vec<u8>>, Status> {
        let Some(id) = self.backend.get(&index_key(sid, counter)).map_err(|_| Status::Internal)? else {
            return Ok(None);
        };
        let id: Digest = id.try_into().map_err(|_| Status::Internal)?;
        self.backend.get(&chunk_key(&id)).map_err(|_| Status::Internal)
    }

    /// Counters with a stored chunk, ascending.
    pub fn stored_counters(&self, sid: &StreamId) -> Result<Vec<u64>, Status> {
        let prefix = index_prefix(sid);
        let keys = self.backend.scan_keys(&prefix).map_err(|_| Status::Internal)?;
        Ok(keys
            .iter()
            .filter_map(|k| k[prefix.len()..].try_into().ok().map(u64::from_be_bytes))
            .collect())
    }

    fn store_chunk(
        &self,
        state: &AcState,
        sid: &StreamId,
        requester: &PublicKey,
        claimed_id: &Digest,
        bytes: &[u8],
    ) -> Outcome {
        let s = state.stream(sid).ok_or(Status::UnknownStream)?;
        if !state.producer_authorized(sid, requester) {
            return Err(Status::UnauthorizedProducer);
        }
        let chunk = Chunk::parse(bytes).map_err(|_| Status::Malformed)?;
        let h = &chunk.header;
        if h.stream_id != *sid || h.owner_addr != s.meta.owner_addr {
            return Err(Status::IdMismatch);
        }
        if chunk_id(&s.meta.owner_addr, sid, h.counter) != *claimed_id {
            return Err(Status::IdMismatch);
        }
        if !chunk.verify_signature(&s.meta.producer_pub) {
            return Err(Status::SigInvalid);
        }
        let fresh = self
            .backend
            .put_if_absent(&index_key(sid, h.counter), claimed_id)
            .map_err(|_| Status::Internal)?;
        if !fresh {
            return Err(Status::Duplicate);
        }
        self.backend.put(&chunk_key(claimed_id), bytes).map_err(|_| Status::Internal)?;
        Ok(Vec::new())
    }

    fn put_acl(&self, state: &AcState, sid: &StreamId, requester: &PublicKey, key: &Digest, value: &[u8]) -> Outcome {
        if acl_hash(value) != *key {
            return Err(Status::HashMismatch);
        }
        let doc = AclDocument::from_bytes(value).map_err(|_| Status::Malformed)?;
        if doc.stream_id != *sid {
            return Err(Status::Malformed);
        }
        // Before registration anyone may upload the (content-addressed)
        // initial ACL; afterwards only the owner.
        if let Some(s) = state.stream(sid) {
            if s.owner_pub != *requester {
                return Err(Status::Unauthorized);
            }
        }
        self.backend.put_if_absent(&acl_key(key), value).map_err(|_| Status::Internal)?;
        Ok(Vec::new())
    }

    fn put_lockbox(
        &self,
        state: &AcState,
        sid: &StreamId,
        requester: &PublicKey,
        key: &Digest,
        value: &[u8],
    ) -> Outcome {
        let s = state.stream(sid).ok_or(Status::UnknownStream)?;
        if *requester != s.meta.producer_pub && *requester != s.owner_pub {
            return Err(Status::Unauthorized);
        }
        let lb = Lockbox::from_bytes(value).map_err(|_| Status::Malformed)?;
        if lb.stream_id != *sid || lockbox_storage_key(sid, lb.epoch) != *key {
            return Err(Status::IdMismatch);
        }
        if !lb.verify(&s.meta.producer_pub) {
            return Err(Status::SigInvalid);
        }
        let _guard = self.lockbox_writes.lock();
        let slot = lockbox_key(key);
        // A lockbox may only be replaced by one of a newer key generation.
        if let Some(existing) = self.backend.get(&slot).map_err(|_| Status::Internal)? {
            let old = Lockbox::from_bytes(&existing).map_err(|_| Status::Internal)?;
            if old.kd_generation >= lb.kd_generation {
                return Err(Status::Duplicate);
            }
        }
        self.backend.put(&slot, value).map_err(|_| Status::Internal)?;
        Ok(Vec::new())
    }
}

impl AclStore for StorageNode {
    fn fetch_acl(&self, hash: &Digest) -> Option<Vec<u8>> {
        self.backend.get(&acl_key(hash)).ok().flatten()
    }
}
