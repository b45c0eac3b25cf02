//! Micro-benchmarks shared by `droplet bench`, the criterion suite and the
//! acceptance tests. Each returns a plain report struct; nothing is asserted
//! here.

use std::fmt;
use std::io;
use std::hint::black_box;
use std::net::{SocketAddr, TcpListener};
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::authzchain::{AclDocument, AclEntry, Scope, Tx};
use crate::crypto::{aead_open, aead_seal, random_bytes, sha256, SigningKey};
use crate::keydist::encrypt_grant;
use crate::keyregression::{default_spacing, ChainParams, CompactChain};
use crate::keytree::{derive_dek, TreeParams, DEFAULT_DEPTH};
use crate::simchain::{Chain, ChainConfig, MemoryChain};
use crate::stealth::{derive_onetime, recover_key, PrincipalKeys};
use crate::storagenode::{
    encode_response, keys, read_frame, serve_tcp, spawn_server, write_frame, AuthMode, Backend, MemoryBackend,
    NodeClient, NodeConfig, Op, Request, ServerHandle, Status, StorageNode, TcpTransport,
};
use crate::streamio::{open_chunk, verify_chunk_sig, ChunkKey, ChunkSealer, Record, StreamMeta};
use crate::types::{Dek, EpochInterval, Sek, StreamId};

pub const CHUNK_BYTES: usize = 8 * 1024;
const HOUR: i64 = 3_600_000;

fn per_sec(n: u64, elapsed: Duration) -> f64 {
    n as f64 / elapsed.as_secs_f64().max(1e-9)
}

/// Flat versus checkpointed main chain.
#[derive(Debug, Clone)]
pub struct KeyRotationReport {
    pub length: u64,
    pub spacing: u64,
    pub pebbles: usize,
    /// Hash invocations to reach `h_0` from the seed.
    pub flat_worst: u64,
    pub compact_worst: u64,
    pub compact_mean: f64,
    /// Time to hash through the whole flat chain once.
    pub flat_full: Duration,
    pub compact_build: Duration,
    /// Mean time for one compact token lookup over every index.
    pub compact_lookup: Duration,
}

impl KeyRotationReport {
    pub fn ratio(&self) -> f64 {
        self.flat_worst as f64 / self.compact_worst.max(1) as f64
    }
}

impl fmt::Display for KeyRotationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "key rotation, N = {}, spacing = {}, {} pebbles", self.length, self.spacing, self.pebbles)?;
        writeln!(f, "  flat    worst-case hash invocations  {:>8}", self.flat_worst)?;
        writeln!(f, "  compact worst-case hash invocations  {:>8}", self.compact_worst)?;
        writeln!(f, "  compact mean hash invocations        {:>8.1}", self.compact_mean)?;
        writeln!(f, "  flat/compact ratio                   {:>8.1}", self.ratio())?;
        writeln!(f, "  flat full chain                      {:>8.3} ms", ms(self.flat_full))?;
        writeln!(f, "  compact build                        {:>8.3} ms", ms(self.compact_build))?;
        write!(f, "  compact token lookup (mean)          {:>8.3} ms", ms(self.compact_lookup))
    }
}

fn ms(d: Duration) -> f64 {
    d.as_secs_f64() * 1e3
}

pub fn key_rotation(length: u64, seed: u64) -> KeyRotationReport {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let params = ChainParams::new(StreamId(random_bytes(&mut rng)), length, random_bytes(&mut rng), random_bytes(&mut rng))
        .expect("length > 0");
    let start = Instant::now();
    let (_, flat_worst) = params.flat_token(0).expect("index 0 exists");
    let flat_full = start.elapsed();

    let start = Instant::now();
    let chain = CompactChain::new(&params, Some(default_spacing(length))).expect("spacing > 0");
    let compact_build = start.elapsed();

    let start = Instant::now();
    let (mut worst, mut total) = (0, 0u64);
    for i in 0..length {
        let (_, cost) = chain.token_with_cost(i).expect("in range");
        worst = worst.max(cost);
        total += cost;
    }
    let compact_lookup = start.elapsed() / length as u32;
    KeyRotationReport {
        length,
        spacing: chain.spacing(),
        pebbles: chain.pebble_count(),
        flat_worst,
        compact_worst: worst,
        compact_mean: total as f64 / length as f64,
        flat_full,
        compact_build,
        compact_lookup,
    }
}

/// A stream with a checkpointed chain, for sealing and opening chunks.
pub struct ChunkBench {
    pub meta: StreamMeta,
    producer: SigningKey,
    tree: TreeParams,
    chain: CompactChain,
    rng: ChaCha20Rng,
}

impl ChunkBench {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let owner = SigningKey::generate(&mut rng);
        let producer = SigningKey::generate(&mut rng);
        let owner_addr = owner.public_key().address();
        let meta = StreamMeta {
            stream_id: StreamId::derive(&owner_addr, "bench"),
            owner_addr,
            producer_pub: producer.public_key(),
            t0: 0,
            delta: HOUR,
            tree_depth: DEFAULT_DEPTH,
            chain_length: 9000,
            grace_period: 4,
        };
        let tree = TreeParams::new(meta.stream_id, meta.tree_depth, random_bytes(&mut rng)).expect("valid depth");
        let params = ChainParams::new(meta.stream_id, meta.chain_length, random_bytes(&mut rng), random_bytes(&mut rng))
            .expect("length > 0");
        let chain = CompactChain::new(&params, None).expect("spacing > 0");
        Self { meta, producer, tree, chain, rng }
    }

    /// Incompressible records totalling [`CHUNK_BYTES`] of payload.
    pub fn records(&mut self, counter: u64) -> Vec<Record> {
        const PER: usize = 128;
        let start = self.meta.epoch_start(counter);
        (0..CHUNK_BYTES / PER)
            .map(|i| {
                let mut payload = vec![0u8; PER];
                self.rng.fill_bytes(&mut payload);
                Record::new(start + i as i64 * 1000, payload)
            })
            .collect()
    }

    pub fn dek(&self, counter: u64) -> Dek {
        derive_dek(&self.tree, counter).expect("counter in range")
    }

    pub fn sek(&self, counter: u64) -> Sek {
        self.chain.sek(counter).expect("counter in range")
    }

    /// Derive both keys, encapsulate, encrypt and sign.
    pub fn seal(&mut self, counter: u64, records: &[Record]) -> Vec<u8> {
        let (dek, sek) = (self.dek(counter), self.sek(counter));
        ChunkSealer::new(&self.meta, &self.producer)
            .seal(counter, records, &dek, &sek, &[[0; 32]], &mut self.rng)
            .expect("valid chunk")
    }

    /// Verify the signature, derive the SEK, decapsulate and decrypt.
    pub fn open(&self, bytes: &[u8], counter: u64) -> Vec<Record> {
        assert!(verify_chunk_sig(bytes, &self.meta.producer_pub).expect("parses"), "bad signature");
        open_chunk(bytes, ChunkKey::Sek(self.sek(counter)), &self.meta).expect("opens")
    }
}

#[derive(Debug, Clone)]
pub struct ChunkCryptoReport {
    pub iterations: u32,
    pub chunk_bytes: usize,
    pub seal: Duration,
    pub open: Duration,
}

impl ChunkCryptoReport {
    pub fn per_chunk(&self) -> Duration {
        self.seal + self.open
    }
}

impl fmt::Display for ChunkCryptoReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "chunk crypto, {} B payload, {} iterations", self.chunk_bytes, self.iterations)?;
        writeln!(f, "  seal (derive DEK+SEK, encapsulate, AEAD, sign)  {:>7.3} ms", ms(self.seal))?;
        writeln!(f, "  open (verify, derive SEK, decapsulate, AEAD)    {:>7.3} ms", ms(self.open))?;
        write!(f, "  seal + open                                     {:>7.3} ms", ms(self.per_chunk()))
    }
}

/// Mean seal and open time of an 8 KiB chunk. Inputs are prepared outside
/// the timed sections.
pub fn chunk_crypto(iterations: u32, seed: u64) -> ChunkCryptoReport {
    let mut bench = ChunkBench::new(seed);
    let iterations = iterations.max(1);
    let (mut seal, mut open) = (Duration::ZERO, Duration::ZERO);
    for i in 0..iterations {
        let counter = bench.rng.gen_range(0..bench.meta.chain_length);
        let records = bench.records(counter);
        let t = Instant::now();
        let bytes = bench.seal(counter, &records);
        seal += t.elapsed();
        let t = Instant::now();
        let back = bench.open(&bytes, counter);
        open += t.elapsed();
        assert_eq!(back.len(), records.len(), "iteration {i}");
    }
    ChunkCryptoReport { iterations, chunk_bytes: CHUNK_BYTES, seal: seal / iterations, open: open / iterations }
}

#[derive(Debug, Clone)]
pub struct AuthzReport {
    pub requests: u32,
    pub authorized: Duration,
    pub direct: Duration,
    /// Mean latency of an authorized get when every request is signed.
    pub signed: Duration,
}

impl AuthzReport {
    /// `(authorized - direct) / direct`
    pub fn overhead(&self) -> f64 {
        (self.authorized.as_secs_f64() - self.direct.as_secs_f64()) / self.direct.as_secs_f64().max(1e-12)
    }
}

impl fmt::Display for AuthzReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "authorized get vs direct backend get, {} requests, in-memory backend", self.requests)?;
        writeln!(f, "  direct get (same framing, no authz)   {:>8.1} us", us(self.direct))?;
        writeln!(f, "  authorized get (session)              {:>8.1} us", us(self.authorized))?;
        writeln!(f, "  overhead                              {:>8.1} %", self.overhead() * 100.0)?;
        write!(f, "  authorized get (signed per request)   {:>8.1} us", us(self.signed))
    }
}

fn us(d: Duration) -> f64 {
    d.as_secs_f64() * 1e6
}

/// Serves `Get` straight from the backend, skipping authentication and
/// authorization; every other request gets an empty OK.
fn serve_direct(backend: Arc<MemoryBackend>, listener: TcpListener) -> io::Result<ServerHandle> {
    spawn_server(listener, move |mut conn| {
        conn.set_nodelay(true)?;
        while let Some(frame) = read_frame(&mut conn)? {
            let response = match Request::parse(&frame) {
                Ok((req, _)) => match req.op {
                    Op::Get { counter } => {
                        let chunk = backend
                            .get(&keys::index(&req.stream_id, counter))
                            .ok()
                            .flatten()
                            .and_then(|id| <[u8; 32]>::try_from(id).ok())
                            .and_then(|id| backend.get(&keys::chunk(&id)).ok().flatten());
                        match chunk {
                            Some(c) => encode_response(Status::Ok, &c),
                            None => encode_response(Status::NotFound, &[]),
                        }
                    }
                    _ => encode_response(Status::Ok, &[]),
                },
                Err(_) => encode_response(Status::Malformed, &[]),
            };
            write_frame(&mut conn, &response)?;
        }
        Ok(())
    })
}

fn timed_gets(client: &mut NodeClient, sid: StreamId, n: u32) -> Duration {
    let start = Instant::now();
    for _ in 0..n {
        client.get(sid, 0).expect("get succeeds");
    }
    start.elapsed()
}

/// Latency of authorized and direct gets of one 8 KiB chunk over loopback
/// TCP, measured in interleaved rounds.
pub fn authz_overhead(requests: u32, seed: u64) -> io::Result<AuthzReport> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let chain = MemoryChain::new(ChainConfig::immediate(), SigningKey::generate(&mut rng));
    let backend = Arc::new(MemoryBackend::new());
    let node = Arc::new(StorageNode::new(backend.clone(), NodeConfig::default()));

    let mut bench = ChunkBench::new(rng.next_u64());
    let owner = SigningKey::generate(&mut rng);
    let device = SigningKey::generate(&mut rng);
    bench.meta.owner_addr = owner.public_key().address();
    bench.meta.stream_id = StreamId::derive(&bench.meta.owner_addr, "authz");
    bench.meta.producer_pub = device.public_key();
    bench.producer = device.clone();
    let sid = bench.meta.stream_id;

    let consumer = PrincipalKeys::generate(&mut rng);
    let address = derive_onetime(&consumer.public(), &mut rng).map_err(io::Error::other)?;
    let consumer_key = recover_key(&address, &consumer).map_err(io::Error::other)?.signing_key();
    let grant = encrypt_grant(b"bench", &address.address, &mut rng).map_err(io::Error::other)?;
    let scope = Scope::new(&[EpochInterval::new(0, 0)], None).map_err(io::Error::other)?;
    let doc = AclDocument::new(sid, 0, vec![AclEntry { address, scope, grant }]).map_err(io::Error::other)?;

    let server = serve_tcp(Arc::clone(&node), TcpListener::bind("127.0.0.1:0")?)?;
    let direct = serve_direct(backend, TcpListener::bind("127.0.0.1:0")?)?;
    let connect = |addr: SocketAddr, key: &SigningKey, mode, seed| {
        NodeClient::new(TcpTransport::new(addr), key.clone(), mode).with_seed(seed)
    };
    let mut setup = connect(server.addr(), &owner, AuthMode::Session, rng.next_u64());
    let fail = |e: crate::storagenode::ClientError| io::Error::other(e.to_string());
    let chain_err = |e: crate::simchain::ChainError| io::Error::other(e.to_string());
    chain.submit_tx(Tx::device_pair(&owner, &device, 0)).map_err(chain_err)?;
    let hash = setup.put_acl(sid, &doc.to_bytes()).map_err(fail)?;
    chain.submit_tx(Tx::register_stream(bench.meta.clone(), hash, &owner)).map_err(chain_err)?;
    node.sync(&chain).map_err(|e| io::Error::other(e.to_string()))?;
    let records = bench.records(0);
    let chunk = bench.seal(0, &records);
    connect(server.addr(), &device, AuthMode::Session, rng.next_u64()).store_chunk(sid, &chunk).map_err(fail)?;

    let mut authorized = connect(server.addr(), &consumer_key, AuthMode::Session, rng.next_u64());
    let mut plain = connect(direct.addr(), &consumer_key, AuthMode::Session, rng.next_u64());
    if authorized.get(sid, 0).map_err(fail)? != chunk || plain.get(sid, 0).map_err(fail)? != chunk {
        return Err(io::Error::other("benchmark paths returned different chunks"));
    }
    let requests = requests.max(10);
    let warmup = (requests / 20).max(10);
    timed_gets(&mut authorized, sid, warmup);
    timed_gets(&mut plain, sid, warmup);
    let rounds = 10;
    let per_round = requests / rounds;
    let (mut t_auth, mut t_direct) = (Duration::ZERO, Duration::ZERO);
    for _ in 0..rounds {
        t_auth += timed_gets(&mut authorized, sid, per_round);
        t_direct += timed_gets(&mut plain, sid, per_round);
    }
    let measured = per_round * rounds;

    let mut signed = connect(server.addr(), &consumer_key, AuthMode::PerRequest, rng.next_u64());
    let signed_n = (requests / 10).max(10);
    let t_signed = timed_gets(&mut signed, sid, signed_n);
    Ok(AuthzReport {
        requests: measured,
        authorized: t_auth / measured,
        direct: t_direct / measured,
        signed: t_signed / signed_n,
    })
}

/// Throughput of the primitives, one row per operation.
#[derive(Debug, Clone)]
pub struct PrimitiveTable {
    pub rows: Vec<(&'static str, f64)>,
}

impl fmt::Display for PrimitiveTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<36} {:>14}", "operation", "ops/s")?;
        for (i, (name, ops)) in self.rows.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            write!(f, "{name:<36} {ops:>14.0}")?;
        }
        Ok(())
    }
}

fn rate<T>(budget: Duration, mut op: impl FnMut() -> T) -> f64 {
    let start = Instant::now();
    let mut n = 0u64;
    while start.elapsed() < budget {
        for _ in 0..16 {
            black_box(op());
        }
        n += 16;
    }
    per_sec(n, start.elapsed())
}

pub fn primitive_table(budget: Duration, seed: u64) -> PrimitiveTable {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let key: [u8; 32] = random_bytes(&mut rng);
    let nonce = random_bytes(&mut rng);
    let mut block = vec![0u8; CHUNK_BYTES];
    rng.fill_bytes(&mut block);
    let ct = aead_seal(&key, &nonce, b"", &block);
    let signer = SigningKey::generate(&mut rng);
    let msg = sha256(&[b"table"]);
    let sig = signer.sign(&msg);
    let public = signer.public_key();
    let principal = PrincipalKeys::generate(&mut rng);
    let mut rows = Vec::new();
    rows.push(("SHA-256 (32 B)", rate(budget, || black_box(sha256(&[&key])))));
    rows.push(("AES-256-GCM encrypt (8 KiB)", rate(budget, || black_box(aead_seal(&key, &nonce, b"", &block)))));
    rows.push((
        "AES-256-GCM decrypt (8 KiB)",
        rate(budget, || black_box(aead_open(&key, &nonce, b"", &ct).expect("valid"))),
    ));
    rows.push(("ECDSA secp256k1 sign", rate(budget, || black_box(signer.sign(&msg)))));
    rows.push(("ECDSA secp256k1 verify", rate(budget, || assert!(public.verify(&msg, &sig)))));
    rows.push((
        "stealth address derive",
        rate(budget, || black_box(derive_onetime(&principal.public(), &mut rng).expect("valid"))),
    ));
    PrimitiveTable { rows }
}
