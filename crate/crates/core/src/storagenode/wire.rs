use rand::{CryptoRng, RngCore};

use crate::crypto::{sha256, Digest, PublicKey, SignatureBytes, SigningKey};
use crate::types::StreamId;
use crate::wire::{Reader, WireError, Writer};

pub const REQ_SIG_TAG: &[u8] = b"droplet/req";
/// Set on the op byte of requests that rely on the connection's session.
pub const SESSION_FLAG: u8 = 0x80;
/// Largest frame either side accepts.
pub const MAX_FRAME: usize = 64 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum MetaKind {
    /// Content-addressed ACL document.
    Acl = 0,
    Lockbox = 1,
}

impl MetaKind {
    fn from_byte(b: u8) -> Result<Self, WireError> {
        match b {
            0 => Ok(MetaKind::Acl),
            1 => Ok(MetaKind::Lockbox),
            _ => Err(WireError::Invalid("meta kind")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Op {
    /// Authenticate the connection; later requests may omit signatures.
    Hello,
    Store { chunk_id: Digest, chunk: Vec<u8> },
    Get { counter: u64 },
    GetRange { t_a: i64, t_b: i64 },
    GetAll,
    PutMeta { kind: MetaKind, key: Digest, value: Vec<u8> },
    GetMeta { kind: MetaKind, key: Digest },
    /// Height of the node's access-control replica: `present u8 || height u64`.
    Status,
}

impl Op {
    pub fn code(&self) -> u8 {
        match self {
            Op::Hello => 0,
            Op::Store { .. } => 1,
            Op::Get { .. } => 2,
            Op::GetRange { .. } => 3,
            Op::GetAll => 4,
            Op::PutMeta { .. } => 5,
            Op::GetMeta { .. } => 6,
            Op::Status => 7,
        }
    }

    fn write_args(&self, w: &mut Writer) {
        match self {
            Op::Hello | Op::GetAll | Op::Status => {}
            Op::Store { chunk_id, chunk } => {
                w.bytes(chunk_id).var_bytes(chunk);
            }
            Op::Get { counter } => {
                w.u64(*counter);
            }
            Op::GetRange { t_a, t_b } => {
                w.i64(*t_a).i64(*t_b);
            }
            Op::PutMeta { kind, key, value } => {
                w.u8(*kind as u8).bytes(key).var_bytes(value);
            }
            Op::GetMeta { kind, key } => {
                w.u8(*kind as u8).bytes(key);
            }
        }
    }

    fn read_args(code: u8, r: &mut Reader<'_>) -> Result<Self, WireError> {
        Ok(match code {
            0 => Op::Hello,
            1 => Op::Store { chunk_id: r.array()?, chunk: r.var_bytes()?.to_vec() },
            2 => Op::Get { counter: r.u64()? },
            3 => Op::GetRange { t_a: r.i64()?, t_b: r.i64()? },
            4 => Op::GetAll,
            5 => Op::PutMeta {
                kind: MetaKind::from_byte(r.u8()?)?,
                key: r.array()?,
                value: r.var_bytes()?.to_vec(),
            },
            6 => Op::GetMeta { kind: MetaKind::from_byte(r.u8()?)?, key: r.array()? },
            7 => Op::Status,
            _ => return Err(WireError::Invalid("op")),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Auth {
    Signed { requester: PublicKey, timestamp: i64, nonce: u64, signature: SignatureBytes },
    /// Use the identity established by the connection's `Hello`.
    Session,
}

/// `op u8 || stream_id 32 || args || requester 33 || ts i64 || nonce u64 || sig 64`;
/// session requests set `0x80` on the op byte and stop after the args.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Request {
    pub op: Op,
    pub stream_id: StreamId,
    pub auth: Auth,
}

impl Request {
    fn prefix(op: &Op, stream_id: &StreamId, session: bool) -> Writer {
        let mut w = Writer::new();
        w.u8(op.code() | if session { SESSION_FLAG } else { 0 }).bytes(stream_id.as_bytes());
        op.write_args(&mut w);
        w
    }

    fn signing_digest(signed_part: &[u8]) -> Digest {
        sha256(&[REQ_SIG_TAG, signed_part])
    }

    pub fn signed<R: RngCore + CryptoRng>(
        op: Op,
        stream_id: StreamId,
        key: &SigningKey,
        timestamp: i64,
        rng: &mut R,
    ) -> Self {
        let requester = key.public_key();
        let nonce = rng.next_u64();
        let mut w = Self::prefix(&op, &stream_id, false);
        w.pubkey(&requester).i64(timestamp).u64(nonce);
        let signature = key.sign(&Self::signing_digest(w.as_slice()));
        Request { op, stream_id, auth: Auth::Signed { requester, timestamp, nonce, signature } }
    }

    pub fn session(op: Op, stream_id: StreamId) -> Self {
        Request { op, stream_id, auth: Auth::Session }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        match &self.auth {
            Auth::Session => Self::prefix(&self.op, &self.stream_id, true).finish(),
            Auth::Signed { requester, timestamp, nonce, signature } => {
                let mut w = Self::prefix(&self.op, &self.stream_id, false);
                w.pubkey(requester).i64(*timestamp).u64(*nonce).bytes(signature);
                w.finish()
            }
        }
    }

    /// Decode a request and report whether its signature verifies.
    pub fn parse(bytes: &[u8]) -> Result<(Self, bool), WireError> {
        let mut r = Reader::new(bytes);
        let code = r.u8()?;
        let stream_id = StreamId(r.array()?);
        let op = Op::read_args(code & !SESSION_FLAG, &mut r)?;
        if code & SESSION_FLAG != 0 {
            r.finish()?;
            return Ok((Request { op, stream_id, auth: Auth::Session }, false));
        }
        let requester = r.pubkey()?;
        let timestamp = r.i64()?;
        let nonce = r.u64()?;
        let signed_len = r.position();
        let signature = r.array()?;
        r.finish()?;
        let valid = requester.verify(&Self::signing_digest(&bytes[..signed_len]), &signature);
        Ok((Request { op, stream_id, auth: Auth::Signed { requester, timestamp, nonce, signature } }, valid))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
#[repr(u8)]
pub enum Status {
    #[error("ok")]
    Ok = 0,
    #[error("bad-signature")]
    BadSignature = 1,
    #[error("stale-timestamp")]
    StaleTimestamp = 2,
    #[error("unauthorized")]
    Unauthorized = 3,
    #[error("unknown-stream")]
    UnknownStream = 4,
    #[error("not-found")]
    NotFound = 5,
    #[error("duplicate")]
    Duplicate = 6,
    #[error("id-mismatch")]
    IdMismatch = 7,
    #[error("sig-invalid")]
    SigInvalid = 8,
    #[error("unauthorized-producer")]
    UnauthorizedProducer = 9,
    #[error("hash-mismatch")]
    HashMismatch = 10,
    #[error("malformed")]
    Malformed = 11,
    #[error("replayed-nonce")]
    ReplayedNonce = 12,
    #[error("no-session")]
    NoSession = 13,
    #[error("internal")]
    Internal = 14,
}

impl Status {
    pub fn from_byte(b: u8) -> Option<Self> {
        use Status::*;
        [
            Ok, BadSignature, StaleTimestamp, Unauthorized, UnknownStream, NotFound, Duplicate, IdMismatch,
            SigInvalid, UnauthorizedProducer, HashMismatch, Malformed, ReplayedNonce, NoSession, Internal,
        ]
        .into_iter()
        .find(|s| *s as u8 == b)
    }

    /// Failures after which the node drops the connection.
    pub fn terminates_session(self) -> bool {
        matches!(
            self,
            Status::BadSignature | Status::StaleTimestamp | Status::Unauthorized | Status::ReplayedNonce | Status::NoSession
        )
    }
}

/// Chunks returned for a time range; `None` marks a counter with no chunk.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RangeResult {
    pub first: u64,
    pub last: u64,
    pub chunks: Vec<(u64, Option<Vec<u8>>)>,
}

impl RangeResult {
    pub fn gaps(&self) -> Vec<u64> {
        self.chunks.iter().filter(|(_, c)| c.is_none()).map(|(c, _)| *c).collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.u64(self.first).u64(self.last).u32(self.chunks.len() as u32);
        for (c, chunk) in &self.chunks {
            w.u64(*c);
            match chunk {
                Some(b) => w.u8(1).var_bytes(b),
                None => w.u8(0),
            };
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, WireError> {
        let mut r = Reader::new(bytes);
        let first = r.u64()?;
        let last = r.u64()?;
        let n = r.u32()? as usize;
        let mut chunks = Vec::with_capacity(n.min(r.remaining() / 9));
        for _ in 0..n {
            let c = r.u64()?;
            let chunk = match r.u8()? {
                0 => None,
                1 => Some(r.var_bytes()?.to_vec()),
                _ => return Err(WireError::Invalid("presence flag")),
            };
            chunks.push((c, chunk));
        }
        r.finish()?;
        Ok(Self { first, last, chunks })
    }
}

pub fn encode_chunk_list(chunks: &[(u64, Vec<u8>)]) -> Vec<u8> {
    let mut w = Writer::new();
    w.u32(chunks.len() as u32);
    for (c, b) in chunks {
        w.u64(*c).var_bytes(b);
    }
    w.finish()
}

pub fn decode_chunk_list(bytes: &[u8]) -> Result<Vec<(u64, Vec<u8>)>, WireError> {
    let mut r = Reader::new(bytes);
    let n = r.u32()? as usize;
    let mut out = Vec::with_capacity(n.min(r.remaining() / 12));
    for _ in 0..n {
        out.push((r.u64()?, r.var_bytes()?.to_vec()));
    }
    r.finish()?;
    Ok(out)
}

/// `status u8 || body`; denied requests carry no body.
pub fn encode_response(status: Status, body: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(1 + body.len());
    out.push(status as u8);
    if status == Status::Ok {
        out.extend_from_slice(body);
    }
    out
}

pub fn decode_response(bytes: &[u8]) -> Result<(Status, &[u8]), WireError> {
    let (&s, body) = bytes.split_first().ok_or(WireError::Invalid("empty response"))?;
    let status = Status::from_byte(s).ok_or(WireError::Invalid("status"))?;
    Ok((status, body))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn request_roundtrip_and_signature() {
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(1);
        let key = SigningKey::generate(&mut rng);
        let sid = StreamId([4; 32]);
        let ops = vec![
            Op::Hello,
            Op::Store { chunk_id: [1; 32], chunk: vec![1, 2, 3] },
            Op::Get { counter: 9 },
            Op::GetRange { t_a: -5, t_b: 50 },
            Op::GetAll,
            Op::PutMeta { kind: MetaKind::Lockbox, key: [2; 32], value: vec![7; 10] },
            Op::GetMeta { kind: MetaKind::Acl, key: [3; 32] },
            Op::Status,
        ];
        for op in ops {
            let req = Request::signed(op.clone(), sid, &key, 1000, &mut rng);
            let bytes = req.to_bytes();
            let (back, valid) = Request::parse(&bytes).unwrap();
            assert!(valid);
            assert_eq!(back, req);
            // Any change to a signed field invalidates the signature.
            let mut tampered = bytes.clone();
            tampered[1] ^= 1;
            assert!(!Request::parse(&tampered).unwrap().1);
            let session = Request::session(op, sid);
            assert_eq!(Request::parse(&session.to_bytes()).unwrap().0, session);
        }
    }

    #[test]
    fn denied_responses_are_bare() {
        assert_eq!(encode_response(Status::Unauthorized, b"secret"), vec![3]);
        let ok = encode_response(Status::Ok, b"data");
        assert_eq!(decode_response(&ok).unwrap(), (Status::Ok, &b"data"[..]));
        for b in 0..=14 {
            assert_eq!(Status::from_byte(b).unwrap() as u8, b);
        }
    }

    #[test]
    fn range_result_roundtrip() {
        let r = RangeResult { first: 3, last: 5, chunks: vec![(3, Some(vec![1])), (4, None), (5, Some(vec![]))] };
        assert_eq!(RangeResult::from_bytes(&r.to_bytes()).unwrap(), r);
        assert_eq!(r.gaps(), vec![4]);
        let list = vec![(1, vec![9, 9]), (4, vec![])];
        assert_eq!(decode_chunk_list(&encode_chunk_list(&list)).unwrap(), list);
    }
}
