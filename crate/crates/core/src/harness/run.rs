use std::collections::BTreeMap;
use std::io;
use std::net::{SocketAddr, TcpListener};
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;

use super::{Expect, Scenario, ScenarioError, ScenarioReport, Step, StepReport};
use crate::authzchain::{bootstrap, AcState, AclDocument, Rejection, Tx};
use crate::client::{discover_grants, Consumer, ConsumerGrant, FlowError, NodeAclStore, OwnerStream, Producer};
use crate::crypto::SigningKey;
use crate::keydist::{open_lockbox, KeyDistError};
use crate::simchain::{Block, Chain, ChainConfig, FileChain};
use crate::stealth::PrincipalKeys;
use crate::storagenode::{
    keys, serve_tcp, AuthMode, Backend, DiskBackend, InstrumentedTransport, NodeClient, NodeConfig, ServerHandle,
    Status, StorageNode, TcpTransport,
};
use crate::streamio::{chunk_id, verify_lineage, Record, StreamError, StreamMeta};
use crate::types::{parse_intervals, EpochInterval, StreamId};

/// A storage node serving on a local address. Dropping it stops the node.
pub struct LaunchedNode {
    pub addr: SocketAddr,
    _guard: Box<dyn Send>,
}

impl LaunchedNode {
    pub fn new(addr: SocketAddr, guard: impl Send + 'static) -> Self {
        Self { addr, _guard: Box::new(guard) }
    }
}

/// Starts a node that follows the chain in `chain_dir` and keeps its data in
/// `data_dir` (a [`DiskBackend`] directory).
pub trait NodeLauncher {
    fn launch(&self, chain_dir: &Path, data_dir: &Path) -> io::Result<LaunchedNode>;
}

/// Node on a thread of this process, still reached over TCP.
pub struct InProcessNode;

struct InProcessGuard {
    server: Option<ServerHandle>,
    stop: Arc<AtomicBool>,
    follower: Option<JoinHandle<()>>,
}

impl Drop for InProcessGuard {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
        drop(self.server.take());
        if let Some(f) = self.follower.take() {
            let _ = f.join();
        }
    }
}

impl NodeLauncher for InProcessNode {
    fn launch(&self, chain_dir: &Path, data_dir: &Path) -> io::Result<LaunchedNode> {
        let node = Arc::new(StorageNode::new(Arc::new(DiskBackend::open(data_dir)?), NodeConfig::default()));
        let chain: Arc<dyn Chain> = Arc::new(FileChain::open(chain_dir).map_err(io::Error::other)?);
        let stop = Arc::new(AtomicBool::new(false));
        let follower = node.spawn_follower(chain, Duration::from_millis(5), Arc::clone(&stop));
        let server = serve_tcp(node, TcpListener::bind("127.0.0.1:0")?)?;
        let addr = server.addr();
        Ok(LaunchedNode::new(addr, InProcessGuard { server: Some(server), stop, follower: Some(follower) }))
    }
}

pub struct RunOptions {
    pub seed: u64,
    pub launcher: Box<dyn NodeLauncher>,
    /// How long to wait for the node to catch up with the chain.
    pub sync_timeout: Duration,
}

impl RunOptions {
    pub fn new(seed: u64) -> Self {
        Self { seed, launcher: Box::new(InProcessNode), sync_timeout: Duration::from_secs(10) }
    }

    pub fn with_launcher(mut self, launcher: impl NodeLauncher + 'static) -> Self {
        self.launcher = Box::new(launcher);
        self
    }
}

struct Replicas {
    blocks: Vec<Block>,
    incremental: AcState,
    rejections: Vec<Rejection>,
    checked: u64,
    divergence: Option<String>,
}

struct Principal {
    keys: PrincipalKeys,
    /// Last grants found in an ACL; kept after revocation.
    grants: Vec<ConsumerGrant>,
}

struct World {
    rng: ChaCha20Rng,
    chain: FileChain,
    node: LaunchedNode,
    backend: DiskBackend,
    sync_timeout: Duration,
    owner_key: SigningKey,
    owner_client: NodeClient,
    device_client: NodeClient,
    acls: NodeAclStore,
    owner: OwnerStream,
    producer: Producer,
    principals: BTreeMap<String, Principal>,
    expected: BTreeMap<u64, Vec<Record>>,
    records_per_epoch: usize,
    replicas: Replicas,
}

type StepResult = Result<String, String>;

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn epochs(spec: &str) -> Result<Vec<u64>, String> {
    let mut out: Vec<u64> = parse_intervals(spec).map_err(err)?.iter().flat_map(|iv| iv.iter()).collect();
    out.sort_unstable();
    out.dedup();
    Ok(out)
}

fn span(list: &[u64]) -> Result<EpochInterval, String> {
    match (list.first(), list.last()) {
        (Some(&a), Some(&b)) => Ok(EpochInterval::new(a, b)),
        _ => Err("empty epoch list".into()),
    }
}

/// Outcome class of a failed consumer operation.
fn classify(e: &FlowError) -> Option<Expect> {
    match e {
        FlowError::KeyDist(KeyDistError::GenerationMismatch { .. }) => Some(Expect::LockboxGeneration),
        FlowError::MissingLockbox(_) => Some(Expect::MissingLockbox),
        FlowError::Stream(StreamError::DigestMismatch(_)) => Some(Expect::Tampered),
        _ if e.status() == Some(Status::Unauthorized) => Some(Expect::Unauthorized),
        _ => None,
    }
}

fn compare(expect: Expect, outcome: Result<String, FlowError>) -> StepResult {
    match (expect, outcome) {
        (Expect::Ok, Ok(detail)) => Ok(detail),
        (want, Ok(detail)) => Err(format!("expected {want}, got success ({detail})")),
        (want, Err(e)) if classify(&e) == Some(want) => Ok(format!("{want}: {e}")),
        (want, Err(e)) => Err(format!("expected {want}, got error: {e}")),
    }
}

impl World {
    fn new(scenario: &Scenario, opts: &RunOptions, dir: &Path) -> Result<Self, String> {
        let mut rng = ChaCha20Rng::seed_from_u64(opts.seed);
        let chain_dir = dir.join("chain");
        let data_dir = dir.join("node");
        let chain = FileChain::init(&chain_dir, ChainConfig::immediate(), SigningKey::generate(&mut rng)).map_err(err)?;
        let node = opts.launcher.launch(&chain_dir, &data_dir).map_err(err)?;
        let backend = DiskBackend::open(&data_dir).map_err(err)?;

        let owner_key = SigningKey::generate(&mut rng);
        let device_key = SigningKey::generate(&mut rng);
        let spec = &scenario.stream;
        let owner_addr = owner_key.public_key().address();
        let meta = StreamMeta {
            stream_id: StreamId::derive(&owner_addr, &scenario.name),
            owner_addr,
            producer_pub: device_key.public_key(),
            t0: spec.t0_ms,
            delta: spec.delta_ms,
            tree_depth: spec.tree_depth,
            chain_length: spec.chain_length,
            grace_period: spec.grace_period,
        };
        let sid = meta.stream_id;
        let owner = OwnerStream::new(meta.clone(), &mut rng);
        let connect = |key: &SigningKey, rng: &mut ChaCha20Rng| {
            NodeClient::new(TcpTransport::new(node.addr), key.clone(), AuthMode::Session).with_seed(rng.next_u64())
        };
        let mut owner_client = connect(&owner_key, &mut rng);
        let device_client = connect(&device_key, &mut rng);
        let acls = NodeAclStore::new(connect(&owner_key, &mut rng));

        owner_client.put_acl(sid, &owner.acl_document().to_bytes()).map_err(err)?;
        let register = owner.register_tx(&owner_key);
        let registration_txid = register.txid();
        let producer = Producer::new(meta, device_key.clone(), &owner.secrets, owner.kd.clone(), registration_txid)
            .map_err(err)?;

        let mut world = World {
            rng,
            chain,
            node,
            backend,
            sync_timeout: opts.sync_timeout,
            owner_key: owner_key.clone(),
            owner_client,
            device_client,
            acls,
            owner,
            producer,
            principals: BTreeMap::new(),
            expected: BTreeMap::new(),
            records_per_epoch: scenario.records_per_epoch.max(1),
            replicas: Replicas {
                blocks: Vec::new(),
                incremental: AcState::new(),
                rejections: Vec::new(),
                checked: 0,
                divergence: None,
            },
        };
        world.submit(Tx::device_pair(&owner_key, &device_key, 0))?;
        world.submit(register)?;
        Ok(world)
    }

    fn sid(&self) -> StreamId {
        self.owner.meta.stream_id
    }

    /// Submit, replay new blocks into both replicas, and wait for the node.
    fn submit(&mut self, tx: Tx) -> Result<(), String> {
        let txid = tx.txid();
        self.chain.submit_tx(tx).map_err(err)?;
        self.advance_replicas()?;
        if let Some(r) = self.replicas.rejections.iter().find(|r| r.txid == txid) {
            return Err(format!("transaction rejected: {}", r.reason));
        }
        self.wait_for_node()
    }

    fn advance_replicas(&mut self) -> Result<(), String> {
        let from = self.replicas.blocks.len() as u64;
        for block in self.chain.confirmed_blocks(from).map_err(err)? {
            let r = &mut self.replicas;
            r.rejections.extend(r.incremental.apply_block(&block, &self.acls).map_err(err)?);
            r.blocks.push(block);
            let (fresh, _) = bootstrap(&r.blocks, &self.acls).map_err(err)?;
            let (a, b) = (r.incremental.canonical_dump(), fresh.canonical_dump());
            if a != b && r.divergence.is_none() {
                let h = r.blocks.len() - 1;
                r.divergence = Some(format!("height {h}\n--- incremental\n{a}\n--- bootstrapped\n{b}"));
            }
            r.checked += 1;
        }
        Ok(())
    }

    fn wait_for_node(&mut self) -> Result<(), String> {
        let tip = self.chain.tip_height().map_err(err)?;
        let deadline = Instant::now() + self.sync_timeout;
        let sid = self.sid();
        loop {
            if self.owner_client.status(sid).map_err(err)? >= tip {
                return Ok(());
            }
            if Instant::now() > deadline {
                return Err(format!("node did not reach height {tip:?}"));
            }
            std::thread::sleep(Duration::from_millis(2));
        }
    }

    fn principal(&mut self, name: &str) -> &mut Principal {
        let rng = &mut self.rng;
        self.principals
            .entry(name.to_string())
            .or_insert_with(|| Principal { keys: PrincipalKeys::generate(rng), grants: Vec::new() })
    }

    fn gen_records(&mut self, epoch: u64, tag: &str) -> Vec<Record> {
        let meta = &self.owner.meta;
        let n = self.records_per_epoch as i64;
        let slot = (meta.delta / n).max(1);
        let mut out: Vec<Record> = (0..n)
            .map(|i| {
                let ts = meta.epoch_start(epoch) + (i * slot + self.rng.gen_range(0..slot)).min(meta.delta - 1);
                let payload = format!("{tag}:{epoch}:{i}:{:08x}", self.rng.next_u32());
                Record::new(ts, payload.into_bytes())
            })
            .collect();
        out.sort_by_key(|r| r.ts);
        out
    }

    fn current_acl(&mut self) -> Result<AclDocument, String> {
        let sid = self.sid();
        let hash = self.replicas.incremental.stream(&sid).ok_or("stream not registered")?.acl_hash;
        let bytes = self.owner_client.get_acl(sid, &hash).map_err(err)?;
        AclDocument::from_bytes(&bytes).map_err(err)
    }

    /// Re-read the principal's grants from the current ACL, keeping the old
    /// ones when none are found.
    fn refresh(&mut self, name: &str) -> Result<Vec<ConsumerGrant>, String> {
        let doc = self.current_acl()?;
        let p = self.principal(name);
        let found = discover_grants(&p.keys, &doc).map_err(err)?;
        if !found.is_empty() {
            p.grants = found;
        }
        Ok(p.grants.clone())
    }

    fn publish_acl(&mut self) -> Result<(), String> {
        let sid = self.sid();
        self.owner_client.put_acl(sid, &self.owner.acl_document().to_bytes()).map_err(err)?;
        let seq = self.replicas.incremental.stream(&sid).ok_or("stream not registered")?.update_seq + 1;
        let tx = self.owner.permission_update_tx(&self.owner_key, seq);
        self.submit(tx)
    }

    fn step(&mut self, step: &Step) -> StepResult {
        let sid = self.sid();
        match step {
            Step::Produce { epochs: spec } => {
                let list = epochs(spec)?;
                for &e in &list {
                    let records = self.gen_records(e, "rec");
                    let bytes = self.producer.seal_epoch(e, &records, &mut self.rng).map_err(err)?;
                    self.device_client.store_chunk(sid, &bytes).map_err(err)?;
                    let lb = self.producer.lockbox(e, &mut self.rng).map_err(err)?;
                    self.device_client.put_lockbox(&lb).map_err(err)?;
                    self.expected.insert(e, records);
                }
                Ok(format!("stored {} chunks", list.len()))
            }
            Step::Grant { principal, epochs: spec, subscribe_from } => {
                let intervals = match spec {
                    Some(s) => parse_intervals(s).map_err(err)?,
                    None => Vec::new(),
                };
                let public = self.principal(principal).keys.public();
                let g = self
                    .owner
                    .grant(principal, &public, &intervals, *subscribe_from, &mut self.rng)
                    .map_err(err)?;
                let scope = g.entry.scope.to_string();
                self.publish_acl()?;
                Ok(format!("{principal}: {scope}"))
            }
            Step::Revoke { principal } => {
                let removed = self.owner.revoke(principal, &mut self.rng).map_err(err)?;
                self.producer.set_distribution_key(self.owner.kd.clone());
                self.publish_acl()?;
                for lb in self.producer.republish_lockboxes(&mut self.rng).map_err(err)? {
                    self.device_client.put_lockbox(&lb).map_err(err)?;
                }
                Ok(format!("removed {removed} grant(s), distribution key now generation {}", self.owner.kd.generation))
            }
            Step::Consume { principal, epochs: spec, expect } => {
                let range = span(&epochs(spec)?)?;
                let grants = self.refresh(principal)?;
                let consumer = Consumer::new(self.owner.meta.clone(), grants);
                let addr = self.node.addr;
                let rng = &mut self.rng;
                let outcome = consumer.read(range, |key| {
                    NodeClient::new(TcpTransport::new(addr), key, AuthMode::Session).with_seed(rng.next_u64())
                });
                let outcome = outcome.map(|got| {
                    let want: BTreeMap<u64, Vec<Record>> =
                        self.expected.range(range.start..=range.end).map(|(k, v)| (*k, v.clone())).collect();
                    if got == want {
                        Ok(format!("{} epochs decrypted and match", got.len()))
                    } else {
                        Err(format!("plaintext mismatch: got epochs {:?}", got.keys().collect::<Vec<_>>()))
                    }
                });
                match outcome {
                    Ok(Err(mismatch)) => Err(mismatch),
                    Ok(Ok(detail)) => compare(*expect, Ok(detail)),
                    Err(e) => compare(*expect, Err(e)),
                }
            }
            Step::Policy { principal, allow, deny } => self.policy(principal, allow.as_deref(), deny.as_deref()),
            Step::OpenLockbox { principal, epoch, expect } => {
                let grants = self.refresh(principal)?;
                let g = grants.iter().find(|g| g.payload.subscription.is_some()).ok_or("principal has no subscription")?;
                let sub = g.payload.subscription.as_ref().expect("checked");
                // Fetched with full access: models a lockbox obtained outside the node.
                let lb = self.owner_client.get_lockbox(sid, *epoch).map_err(err)?;
                let outcome = open_lockbox(&sub.distribution_key(g.kd_generation), &lb, &self.owner.meta.producer_pub)
                    .map(|t| format!("opened token {}", t.index))
                    .map_err(FlowError::from);
                compare(*expect, outcome)
            }
            Step::Audit { principal, grants } => {
                let view = self.principal(principal).keys.view_key();
                let found = self.replicas.incremental.audit_stream(&sid, &view).map_err(err)?.len();
                if found == *grants {
                    Ok(format!("{found} entries"))
                } else {
                    Err(format!("expected {grants} entries, found {found}"))
                }
            }
            Step::Anchor { epoch } => {
                let digest = self.producer.digest(*epoch).ok_or("epoch not produced")?;
                self.submit(Tx::anchor(sid, *epoch, digest, &self.owner_key.clone()))?;
                Ok(format!("anchored {epoch}"))
            }
            Step::Tamper { epoch } => {
                let mut evil = self.producer.clone();
                let records = self.gen_records(*epoch, "forged");
                let bytes = evil.seal_epoch(*epoch, &records, &mut self.rng).map_err(err)?;
                let id = chunk_id(&self.owner.meta.owner_addr, &sid, *epoch);
                self.backend.put(&keys::chunk(&id), &bytes).map_err(err)?;
                Ok(format!("replaced chunk {epoch} with a re-signed rewrite"))
            }
            Step::VerifyLineage { target, expect } => {
                let anchor = self.replicas.incremental.latest_anchor(&sid).ok_or("no anchor")?;
                let client = &mut self.owner_client;
                let outcome = verify_lineage((anchor.counter, anchor.digest), *target, |c| client.get(sid, c).ok());
                let outcome = match outcome {
                    Ok(report) => {
                        let d = anchor.counter - target;
                        let bound = if d == 0 { 1 } else { 64 - (d - 1).leading_zeros() + 1 };
                        if report.hops > bound {
                            return Err(format!("{} hops exceeds bound {bound}", report.hops));
                        }
                        Ok(format!("path {:?}", report.path))
                    }
                    Err(e) => Err(FlowError::from(e)),
                };
                compare(*expect, outcome)
            }
        }
    }

    fn policy(&mut self, name: &str, allow: Option<&str>, deny: Option<&str>) -> StepResult {
        let sid = self.sid();
        let grants = self.refresh(name)?;
        let mut cases: Vec<(u64, bool)> = Vec::new();
        cases.extend(epochs(allow.unwrap_or(""))?.into_iter().map(|e| (e, true)));
        cases.extend(epochs(deny.unwrap_or(""))?.into_iter().map(|e| (e, false)));
        let fallback = SigningKey::generate(&mut self.rng);
        let mut wrong = Vec::new();
        let mut denied_bytes = 0;
        for (e, want) in &cases {
            let state = &self.replicas.incremental;
            let policy = grants.iter().any(|g| {
                state.query_permission(&sid, &g.address.address, EpochInterval::single(*e)).is_ok_and(|d| d.allow)
            });
            let key = grants
                .iter()
                .find(|g| g.scope.covers(*e))
                .or(grants.first())
                .map(|g| g.signing_key())
                .unwrap_or_else(|| fallback.clone());
            let transport = InstrumentedTransport::new(TcpTransport::new(self.node.addr));
            let stats = transport.stats();
            let mut client = NodeClient::new(transport, key, AuthMode::PerRequest).with_seed(self.rng.next_u64());
            let node = match client.get(sid, *e) {
                Ok(_) => true,
                Err(x) if x.status() == Some(Status::NotFound) => true,
                Err(x) if x.status() == Some(Status::Unauthorized) => false,
                Err(x) => return Err(format!("epoch {e}: {x}")),
            };
            denied_bytes += stats.denied_payload_bytes.load(Ordering::Relaxed);
            if policy != *want || node != *want {
                wrong.push(format!("{e}: want {want}, policy {policy}, node {node}"));
            }
        }
        if denied_bytes != 0 {
            wrong.push(format!("{denied_bytes} payload bytes in denied responses"));
        }
        if wrong.is_empty() {
            Ok(format!("{} epochs agree at policy layer and node", cases.len()))
        } else {
            Err(wrong.join("; "))
        }
    }
}

/// Run every step of `scenario` on a fresh chain and node.
pub fn run_scenario(scenario: &Scenario, opts: &RunOptions) -> Result<ScenarioReport, ScenarioError> {
    let dir = tempfile::tempdir().map_err(|e| ScenarioError::Setup(e.to_string()))?;
    let mut world = World::new(scenario, opts, dir.path()).map_err(ScenarioError::Setup)?;
    let mut steps = Vec::with_capacity(scenario.steps.len());
    for (index, step) in scenario.steps.iter().enumerate() {
        let (passed, detail) = match world.step(step) {
            Ok(d) => (true, d),
            Err(d) => (false, d),
        };
        steps.push(StepReport { index, action: step.action(), passed, detail });
    }
    let report = ScenarioReport {
        name: scenario.name.clone(),
        seed: opts.seed,
        steps,
        heights_checked: world.replicas.checked,
        replica_divergence: world.replicas.divergence.take(),
    };
    drop(world);
    Ok(report)
}
