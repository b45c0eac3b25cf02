use std::io::{self, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use super::node::{Session, StorageNode};
use super::wire::{
    decode_chunk_list, decode_response, MetaKind, Op, RangeResult, Request, Status, MAX_FRAME,
};
use crate::authzchain::acl_hash;
use crate::crypto::{Digest, SigningKey};
use crate::keydist::{lockbox_storage_key, Lockbox};
use crate::streamio::Chunk;
use crate::types::StreamId;
use crate::wire::WireError;

pub fn write_frame(w: &mut impl Write, payload: &[u8]) -> io::Result<()> {
    let len = u32::try_from(payload.len()).map_err(|_| io::Error::other("frame too large"))?;
    w.write_all(&len.to_be_bytes())?;
    w.write_all(payload)?;
    w.flush()
}

/// Read one frame; `None` on a clean end of stream.
pub fn read_frame(r: &mut impl Read) -> io::Result<Option<Vec<u8>>> {
    let mut len = [0u8; 4];
    match r.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e),
    }
    let len = u32::from_be_bytes(len) as usize;
    if len > MAX_FRAME {
        return Err(io::Error::new(io::ErrorKind::InvalidData, "frame exceeds limit"));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    Ok(Some(buf))
}

fn status_of(response: &[u8]) -> Option<Status> {
    response.first().and_then(|b| Status::from_byte(*b))
}

/// Serve one connection until the peer hangs up or a request is refused in a
/// way that ends the session.
pub fn serve_connection(node: &StorageNode, mut stream: TcpStream) -> io::Result<()> {
    stream.set_nodelay(true)?;
    let mut session = Session::default();
    while let Some(frame) = read_frame(&mut stream)? {
        let response = node.handle_frame(&frame, &mut session);
        write_frame(&mut stream, &response)?;
        if status_of(&response).is_some_and(Status::terminates_session) {
            break;
        }
    }
    Ok(())
}

/// A running thread-per-connection TCP listener.
pub struct ServerHandle {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    thread: Option<JoinHandle<()>>,
}

impl ServerHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn shutdown(mut self) {
        self.stop_and_join();
    }

    /// Block until the accept loop exits.
    pub fn join(mut self) {
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }

    fn stop_and_join(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        // Wake the blocking accept.
        let _ = TcpStream::connect(self.addr);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        self.stop_and_join();
    }
}

/// Accept connections on `listener`, one thread each, using `handler`.
pub fn spawn_server<H>(listener: TcpListener, handler: H) -> io::Result<ServerHandle>
where
    H: Fn(TcpStream) -> io::Result<()> + Send + Sync + 'static,
{
    let addr = listener.local_addr()?;
    let stop = Arc::new(AtomicBool::new(false));
    let flag = Arc::clone(&stop);
    let handler = Arc::new(handler);
    let thread = std::thread::spawn(move || {
        for conn in listener.incoming() {
            if flag.load(Ordering::SeqCst) {
                break;
            }
            let Ok(conn) = conn else { continue };
            let handler = Arc::clone(&handler);
            std::thread::spawn(move || {
                let _ = handler(conn);
            });
        }
    });
    Ok(ServerHandle { addr, stop, thread: Some(thread) })
}

pub fn serve_tcp(node: Arc<StorageNode>, listener: TcpListener) -> io::Result<ServerHandle> {
    spawn_server(listener, move |conn| serve_connection(&node, conn))
}

/// Request/response carrier between a client and a node.
pub trait Transport: Send {
    /// Identifier of the current connection, opening one if needed. It changes
    /// whenever the underlying session is replaced.
    fn connect(&mut self) -> io::Result<u64>;
    fn roundtrip(&mut self, frame: &[u8]) -> io::Result<Vec<u8>>;
}

/// Calls a node in the same process, with the same session rules as TCP.
pub struct LocalTransport {
    node: Arc<StorageNode>,
    session: Session,
    generation: u64,
}

impl LocalTransport {
    pub fn new(node: Arc<StorageNode>) -> Self {
        Self { node, session: Session::default(), generation: 1 }
    }
}

impl Transport for LocalTransport {
    fn connect(&mut self) -> io::Result<u64> {
        Ok(self.generation)
    }

    fn roundtrip(&mut self, frame: &[u8]) -> io::Result<Vec<u8>> {
        let response = self.node.handle_frame(frame, &mut self.session);
        if status_of(&response).is_some_and(Status::terminates_session) {
            self.session = Session::default();
            self.generation += 1;
        }
        Ok(response)
    }
}

/// Framed TCP client that reconnects after the server closes a session.
pub struct TcpTransport {
    addr: SocketAddr,
    stream: Option<TcpStream>,
    generation: u64,
}

impl TcpTransport {
    pub fn new(addr: SocketAddr) -> Self {
        Self { addr, stream: None, generation: 0 }
    }
}

impl Transport for TcpTransport {
    fn connect(&mut self) -> io::Result<u64> {
        if self.stream.is_none() {
            let s = TcpStream::connect(self.addr)?;
            s.set_nodelay(true)?;
            self.stream = Some(s);
            self.generation += 1;
        }
        Ok(self.generation)
    }

    fn roundtrip(&mut self, frame: &[u8]) -> io::Result<Vec<u8>> {
        self.connect()?;
        let stream = self.stream.as_mut().expect("connected");
        let result = write_frame(stream, frame).and_then(|()| read_frame(stream));
        match result {
            Ok(Some(response)) => {
                if status_of(&response).is_some_and(Status::terminates_session) {
                    self.stream = None;
                }
                Ok(response)
            }
            Ok(None) => {
                self.stream = None;
                Err(io::Error::new(io::ErrorKind::UnexpectedEof, "connection closed"))
            }
            Err(e) => {
                self.stream = None;
                Err(e)
            }
        }
    }
}

/// Byte counters for a wrapped transport.
#[derive(Debug, Default)]
pub struct TrafficStats {
    pub requests: AtomicU64,
    pub bytes_sent: AtomicU64,
    pub bytes_received: AtomicU64,
    /// Response bytes beyond the status byte, summed over non-OK responses.
    pub denied_payload_bytes: AtomicU64,
}

pub struct InstrumentedTransport<T> {
    inner: T,
    stats: Arc<TrafficStats>,
}

impl<T: Transport> InstrumentedTransport<T> {
    pub fn new(inner: T) -> Self {
        Self { inner, stats: Arc::default() }
    }

    pub fn stats(&self) -> Arc<TrafficStats> {
        Arc::clone(&self.stats)
    }
}

impl<T: Transport> Transport for InstrumentedTransport<T> {
    fn connect(&mut self) -> io::Result<u64> {
        self.inner.connect()
    }

    fn roundtrip(&mut self, frame: &[u8]) -> io::Result<Vec<u8>> {
        let response = self.inner.roundtrip(frame)?;
        let s = &self.stats;
        s.requests.fetch_add(1, Ordering::Relaxed);
        s.bytes_sent.fetch_add(frame.len() as u64, Ordering::Relaxed);
        s.bytes_received.fetch_add(response.len() as u64, Ordering::Relaxed);
        if status_of(&response) != Some(Status::Ok) {
            s.denied_payload_bytes.fetch_add(response.len().saturating_sub(1) as u64, Ordering::Relaxed);
        }
        Ok(response)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error("node refused request: {0}")]
    Status(Status),
    #[error("transport: {0}")]
    Io(#[from] io::Error),
    #[error("malformed response: {0}")]
    Wire(#[from] WireError),
    #[error("node returned data that does not match the request")]
    Integrity,
}

impl ClientError {
    pub fn status(&self) -> Option<Status> {
        match self {
            ClientError::Status(s) => Some(*s),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AuthMode {
    /// Sign every request.
    PerRequest,
    /// Sign a `Hello` once per connection.
    Session,
}

/// Typed client for the node protocol, acting as one principal.
pub struct NodeClient {
    transport: Box<dyn Transport>,
    key: SigningKey,
    mode: AuthMode,
    authenticated: Option<u64>,
    rng: ChaCha20Rng,
    clock: Box<dyn Fn() -> i64 + Send>,
}

impl NodeClient {
    pub fn new(transport: impl Transport + 'static, key: SigningKey, mode: AuthMode) -> Self {
        Self {
            transport: Box::new(transport),
            key,
            mode,
            authenticated: None,
            rng: ChaCha20Rng::from_entropy(),
            clock: Box::new(crate::simchain::now_ms),
        }
    }

    pub fn with_clock(mut self, clock: impl Fn() -> i64 + Send + 'static) -> Self {
        self.clock = Box::new(clock);
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.rng = ChaCha20Rng::seed_from_u64(seed);
        self
    }

    pub fn key(&self) -> &SigningKey {
        &self.key
    }

    fn signed(&mut self, op: Op, sid: StreamId) -> Vec<u8> {
        let ts = (self.clock)();
        Request::signed(op, sid, &self.key, ts, &mut self.rng).to_bytes()
    }

    /// Send one request and return the OK body.
    pub fn call(&mut self, op: Op, sid: StreamId) -> Result<Vec<u8>, ClientError> {
        let frame = match self.mode {
            AuthMode::PerRequest => self.signed(op, sid),
            AuthMode::Session => {
                let conn = self.transport.connect()?;
                if self.authenticated != Some(conn) {
                    let hello = self.signed(Op::Hello, sid);
                    let resp = self.transport.roundtrip(&hello)?;
                    let (status, _) = decode_response(&resp)?;
                    if status != Status::Ok {
                        return Err(ClientError::Status(status));
                    }
                    self.authenticated = Some(conn);
                }
                Request::session(op, sid).to_bytes()
            }
        };
        let resp = self.transport.roundtrip(&frame)?;
        let (status, body) = decode_response(&resp)?;
        if status.terminates_session() {
            self.authenticated = None;
        }
        match status {
            Status::Ok => Ok(body.to_vec()),
            s => Err(ClientError::Status(s)),
        }
    }

    pub fn store_chunk(&mut self, sid: StreamId, chunk: &[u8]) -> Result<(), ClientError> {
        let chunk_id = Chunk::parse(chunk).map_err(|_| ClientError::Integrity)?.id();
        self.call(Op::Store { chunk_id, chunk: chunk.to_vec() }, sid).map(drop)
    }

    pub fn get(&mut self, sid: StreamId, counter: u64) -> Result<Vec<u8>, ClientError> {
        self.call(Op::Get { counter }, sid)
    }

    pub fn get_range(&mut self, sid: StreamId, t_a: i64, t_b: i64) -> Result<RangeResult, ClientError> {
        Ok(RangeResult::from_bytes(&self.call(Op::GetRange { t_a, t_b }, sid)?)?)
    }

    pub fn get_all(&mut self, sid: StreamId) -> Result<Vec<(u64, Vec<u8>)>, ClientError> {
        Ok(decode_chunk_list(&self.call(Op::GetAll, sid)?)?)
    }

    /// Height of the node's access-control replica.
    pub fn status(&mut self, sid: StreamId) -> Result<Option<u64>, ClientError> {
        let body = self.call(Op::Status, sid)?;
        let body: [u8; 9] = body.as_slice().try_into().map_err(|_| ClientError::Integrity)?;
        let height = u64::from_be_bytes(body[1..].try_into().expect("8 bytes"));
        Ok((body[0] != 0).then_some(height))
    }

    pub fn put_acl(&mut self, sid: StreamId, doc: &[u8]) -> Result<Digest, ClientError> {
        let key = acl_hash(doc);
        self.call(Op::PutMeta { kind: MetaKind::Acl, key, value: doc.to_vec() }, sid)?;
        Ok(key)
    }

    pub fn get_acl(&mut self, sid: StreamId, hash: &Digest) -> Result<Vec<u8>, ClientError> {
        let doc = self.call(Op::GetMeta { kind: MetaKind::Acl, key: *hash }, sid)?;
        if acl_hash(&doc) != *hash {
            return Err(ClientError::Integrity);
        }
        Ok(doc)
    }

    pub fn put_lockbox(&mut self, lockbox: &Lockbox) -> Result<(), ClientError> {
        let op = Op::PutMeta { kind: MetaKind::Lockbox, key: lockbox.storage_key(), value: lockbox.to_bytes() };
        self.call(op, lockbox.stream_id).map(drop)
    }

    pub fn get_lockbox(&mut self, sid: StreamId, epoch: u64) -> Result<Lockbox, ClientError> {
        let key = lockbox_storage_key(&sid, epoch);
        let bytes = self.call(Op::GetMeta { kind: MetaKind::Lockbox, key }, sid)?;
        let lb = Lockbox::from_bytes(&bytes).map_err(|_| ClientError::Integrity)?;
        if lb.stream_id != sid || lb.epoch != epoch {
            return Err(ClientError::Integrity);
        }
        Ok(lb)
    }

}
