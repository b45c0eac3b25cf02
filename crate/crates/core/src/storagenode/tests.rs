use std::net::TcpListener;
use std::sync::atomic::Ordering;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use super::*;
use crate::authzchain::{AclDocument, AclEntry, Scope, Tx};
use crate::crypto::SigningKey;
use crate::keydist::{encrypt_grant, seal_lockbox, DistributionKey};
use crate::keyregression::MainToken;
use crate::simchain::{Chain, ChainConfig, MemoryChain};
use crate::stealth::{derive_onetime, PrincipalKeys};
use crate::streamio::{ChunkSealer, Record, StreamMeta};
use crate::types::{Dek, EpochInterval, Sek, StreamId};

const HOUR: i64 = 3_600_000;

struct Fixture {
    rng: ChaCha20Rng,
    chain: Arc<MemoryChain>,
    node: Arc<StorageNode>,
    owner: SigningKey,
    device: SigningKey,
    meta: StreamMeta,
}

impl Fixture {
    fn new(config: NodeConfig) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let chain = Arc::new(MemoryChain::new(ChainConfig::immediate(), SigningKey::generate(&mut rng)));
        let node = Arc::new(StorageNode::new(Arc::new(MemoryBackend::new()), config));
        let owner = SigningKey::generate(&mut rng);
        let device = SigningKey::generate(&mut rng);
        let addr = owner.public_key().address();
        let meta = StreamMeta {
            stream_id: StreamId::derive(&addr, "hr"),
            owner_addr: addr,
            producer_pub: device.public_key(),
            t0: 0,
            delta: HOUR,
            tree_depth: 8,
            chain_length: 256,
            grace_period: 2,
        };
        let f = Fixture { rng, chain, node, owner, device, meta };
        f.chain.submit_tx(Tx::device_pair(&f.owner, &f.device, 0)).unwrap();
        let empty = AclDocument::empty(f.meta.stream_id).to_bytes();
        let h = f.client(&f.owner.clone()).put_acl(f.meta.stream_id, &empty).unwrap();
        f.chain.submit_tx(Tx::register_stream(f.meta.clone(), h, &f.owner)).unwrap();
        f.node.sync(f.chain.as_ref()).unwrap();
        f
    }

    fn sid(&self) -> StreamId {
        self.meta.stream_id
    }

    fn client(&self, key: &SigningKey) -> NodeClient {
        NodeClient::new(LocalTransport::new(Arc::clone(&self.node)), key.clone(), AuthMode::PerRequest)
    }

    fn chunk(&mut self, counter: u64) -> Vec<u8> {
        let dek = Dek { epoch: counter, key: [counter as u8; 32] };
        let sek = Sek { epoch: counter, key: [0xEE; 32] };
        let rec = [Record::new(counter as i64 * HOUR + 5, b"72bpm".to_vec())];
        ChunkSealer::new(&self.meta, &self.device).seal(counter, &rec, &dek, &sek, &[[0; 32]], &mut self.rng).unwrap()
    }

    fn grant(&mut self, scope: Scope) -> (PrincipalKeys, SigningKey) {
        let who = PrincipalKeys::generate(&mut self.rng);
        let address = derive_onetime(&who.public(), &mut self.rng).unwrap();
        let secret = crate::stealth::recover_key(&address, &who).unwrap();
        let grant = encrypt_grant(b"g", &address.address, &mut self.rng).unwrap();
        let doc = AclDocument::new(self.sid(), 0, vec![AclEntry { address, scope, grant }]).unwrap();
        let h = self.client(&self.owner.clone()).put_acl(self.sid(), &doc.to_bytes()).unwrap();
        self.chain.submit_tx(Tx::permission_update(self.sid(), 1, h, 0, &self.owner)).unwrap();
        self.node.sync(self.chain.as_ref()).unwrap();
        (who, secret.signing_key())
    }
}

fn refused<T: std::fmt::Debug>(r: Result<T, ClientError>) -> Status {
    match r {
        Err(ClientError::Status(s)) => s,
        other => panic!("expected refusal, got {other:?}"),
    }
}

#[test]
fn store_and_owner_reads() {
    let mut f = Fixture::new(NodeConfig::default());
    let mut producer = f.client(&f.device.clone());
    let chunks: Vec<_> = (0..4).map(|c| f.chunk(c)).collect();
    for c in &chunks {
        producer.store_chunk(f.sid(), c).unwrap();
    }
    assert_eq!(refused(producer.store_chunk(f.sid(), &chunks[1])), Status::Duplicate);
    let mut owner = f.client(&f.owner.clone());
    assert_eq!(owner.get(f.sid(), 2).unwrap(), chunks[2]);
    assert_eq!(refused(owner.get(f.sid(), 9)), Status::NotFound);
    let all = owner.get_all(f.sid()).unwrap();
    assert_eq!(all.iter().map(|(c, _)| *c).collect::<Vec<_>>(), vec![0, 1, 2, 3]);
    let range = owner.get_range(f.sid(), HOUR, 5 * HOUR).unwrap();
    assert_eq!((range.first, range.last), (1, 5));
    assert_eq!(range.gaps(), vec![4, 5]);
}

#[test]
fn store_rejections() {
    let mut f = Fixture::new(NodeConfig::default());
    let c0 = f.chunk(0);
    let stranger = SigningKey::generate(&mut f.rng);
    assert_eq!(refused(f.client(&stranger).store_chunk(f.sid(), &c0)), Status::UnauthorizedProducer);
    assert_eq!(refused(f.client(&f.device.clone()).store_chunk(StreamId([1; 32]), &c0)), Status::UnknownStream);

    let mut producer = f.client(&f.device.clone());
    let mut tampered = c0.clone();
    let n = tampered.len();
    tampered[n - 70] ^= 1;
    assert_eq!(refused(producer.store_chunk(f.sid(), &tampered)), Status::SigInvalid);

    let wrong_id = Op::Store { chunk_id: [7; 32], chunk: c0.clone() };
    assert_eq!(refused(producer.call(wrong_id, f.sid())), Status::IdMismatch);
    assert_eq!(
        refused(producer.call(Op::Store { chunk_id: [7; 32], chunk: vec![1, 2, 3] }, f.sid())),
        Status::Malformed
    );
}

#[test]
fn consumer_scope_enforced() {
    let mut f = Fixture::new(NodeConfig::default());
    let mut producer = f.client(&f.device.clone());
    for c in 0..8 {
        let bytes = f.chunk(c);
        producer.store_chunk(f.sid(), &bytes).unwrap();
    }
    let scope = Scope::new(&[EpochInterval::new(0, 3)], Some(6)).unwrap();
    let (_, key) = f.grant(scope);
    let transport = InstrumentedTransport::new(LocalTransport::new(Arc::clone(&f.node)));
    let stats = transport.stats();
    let mut consumer = NodeClient::new(transport, key, AuthMode::PerRequest);

    assert!(consumer.get(f.sid(), 2).is_ok());
    assert!(consumer.get(f.sid(), 7).is_ok());
    assert_eq!(refused(consumer.get(f.sid(), 4)), Status::Unauthorized);
    assert_eq!(refused(consumer.get_range(f.sid(), 2 * HOUR, 5 * HOUR)), Status::Unauthorized);
    assert_eq!(consumer.get_range(f.sid(), 0, 3 * HOUR).unwrap().chunks.len(), 4);
    let all: Vec<u64> = consumer.get_all(f.sid()).unwrap().iter().map(|(c, _)| *c).collect();
    assert_eq!(all, vec![0, 1, 2, 3, 6, 7]);
    assert_eq!(stats.denied_payload_bytes.load(Ordering::Relaxed), 0);

    let stranger = SigningKey::generate(&mut f.rng);
    assert_eq!(refused(f.client(&stranger).get(f.sid(), 0)), Status::Unauthorized);
    assert_eq!(refused(f.client(&stranger).get_all(f.sid())), Status::Unauthorized);
}

#[test]
fn partial_range_policy() {
    let mut f = Fixture::new(NodeConfig { partial_ranges: true, ..NodeConfig::default() });
    let mut producer = f.client(&f.device.clone());
    for c in 0..6 {
        let bytes = f.chunk(c);
        producer.store_chunk(f.sid(), &bytes).unwrap();
    }
    let (_, key) = f.grant(Scope::new(&[EpochInterval::new(1, 2)], None).unwrap());
    let mut consumer = f.client(&key);
    let r = consumer.get_range(f.sid(), 0, 5 * HOUR).unwrap();
    assert_eq!(r.chunks.iter().map(|(c, _)| *c).collect::<Vec<_>>(), vec![1, 2]);
}

#[test]
fn replay_and_clock_checks() {
    let f = Fixture::new(NodeConfig::default());
    let mut rng = ChaCha20Rng::seed_from_u64(1);
    let now = crate::simchain::now_ms();
    let req = Request::signed(Op::Get { counter: 0 }, f.sid(), &f.owner, now, &mut rng).to_bytes();
    let mut s = Session::default();
    assert_eq!(decode_response(&f.node.handle_frame(&req, &mut s)).unwrap().0, Status::NotFound);
    assert_eq!(decode_response(&f.node.handle_frame(&req, &mut s)).unwrap().0, Status::ReplayedNonce);

    let old = Request::signed(Op::Get { counter: 0 }, f.sid(), &f.owner, now - 60_000, &mut rng).to_bytes();
    assert_eq!(decode_response(&f.node.handle_frame(&old, &mut s)).unwrap().0, Status::StaleTimestamp);

    let mut forged = Request::signed(Op::Get { counter: 0 }, f.sid(), &f.owner, now, &mut rng).to_bytes();
    let n = forged.len();
    forged[n - 1] ^= 1;
    assert_eq!(decode_response(&f.node.handle_frame(&forged, &mut s)).unwrap().0, Status::BadSignature);

    let session_req = Request::session(Op::Get { counter: 0 }, f.sid()).to_bytes();
    assert_eq!(decode_response(&f.node.handle_frame(&session_req, &mut s)).unwrap().0, Status::NoSession);
    assert_eq!(decode_response(&f.node.handle_frame(&[0xff], &mut s)).unwrap().0, Status::Malformed);
}

#[test]
fn lockboxes_and_acls() {
    let mut f = Fixture::new(NodeConfig::default());
    let (_, key) = f.grant(Scope::new(&[], Some(3)).unwrap());
    let kd0 = DistributionKey::generate(&mut f.rng);
    let kd1 = kd0.next(&mut f.rng);
    let lb = |f: &mut Fixture, e: u64, kd: &DistributionKey| {
        let token = MainToken { index: e, value: [e as u8; 32] };
        seal_lockbox(kd, &token, &f.meta.stream_id, &f.device, &mut f.rng)
    };
    let mut producer = f.client(&f.device.clone());
    let l2 = lb(&mut f, 2, &kd0);
    let l5 = lb(&mut f, 5, &kd0);
    producer.put_lockbox(&l2).unwrap();
    producer.put_lockbox(&l5).unwrap();
    assert_eq!(refused(producer.put_lockbox(&l5)), Status::Duplicate);
    let l5b = lb(&mut f, 5, &kd1);
    producer.put_lockbox(&l5b).unwrap();

    let mut consumer = f.client(&key);
    assert_eq!(consumer.get_lockbox(f.sid(), 5).unwrap(), l5b);
    assert_eq!(refused(consumer.get_lockbox(f.sid(), 2)), Status::Unauthorized);
    assert_eq!(refused(consumer.put_lockbox(&l5b)), Status::Unauthorized);

    let forged = seal_lockbox(&kd1, &MainToken { index: 7, value: [0; 32] }, &f.sid(), &f.owner.clone(), &mut f.rng);
    assert_eq!(refused(producer.put_lockbox(&forged)), Status::SigInvalid);

    let h = f.node.snapshot().stream(&f.sid()).unwrap().acl_hash;
    let doc = consumer.get_acl(f.sid(), &h).unwrap();
    assert_eq!(crate::authzchain::acl_hash(&doc), h);
    // After registration only the owner may publish ACL documents.
    let other = AclDocument::new(f.sid(), 1, vec![]).unwrap().to_bytes();
    assert_eq!(refused(consumer.put_acl(f.sid(), &other)), Status::Unauthorized);
}

#[test]
fn tcp_sessions() {
    let mut f = Fixture::new(NodeConfig::default());
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let server = serve_tcp(Arc::clone(&f.node), listener).unwrap();
    let c0 = f.chunk(0);
    let mut producer = NodeClient::new(TcpTransport::new(server.addr()), f.device.clone(), AuthMode::Session);
    producer.store_chunk(f.sid(), &c0).unwrap();

    let stranger = SigningKey::generate(&mut f.rng);
    let mut s = NodeClient::new(TcpTransport::new(server.addr()), stranger, AuthMode::Session);
    assert_eq!(refused(s.get(f.sid(), 0)), Status::Unauthorized);
    // The refusal closed the connection; the client reconnects and re-authenticates.
    assert_eq!(refused(s.get(f.sid(), 0)), Status::Unauthorized);

    let mut owner = NodeClient::new(TcpTransport::new(server.addr()), f.owner.clone(), AuthMode::PerRequest);
    assert_eq!(owner.get(f.sid(), 0).unwrap(), c0);
    assert_eq!(producer.get(f.sid(), 0).unwrap(), c0);
    server.shutdown();
}

#[test]
fn disk_backend_node() {
    let dir = tempfile::tempdir().unwrap();
    let node = StorageNode::new(Arc::new(DiskBackend::open(dir.path()).unwrap()), NodeConfig::default());
    assert!(node.stored_counters(&StreamId([0; 32])).unwrap().is_empty());
}
