use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::net::{SocketAddr, TcpListener, ToSocketAddrs};
use std::path::{Path, PathBuf};
use std::sync::atomic::AtomicBool;
use std::sync::Arc;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use anyhow::{anyhow, bail, Context, Result};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use clap::{Args, Parser, Subcommand, ValueEnum};
use droplet_core::authzchain::{bootstrap, AcState, AclDocument, Tx};
use droplet_core::client::{discover_grants, group_by_epoch, Consumer, FlowError, NodeAclStore, OwnerStream, Producer};
use droplet_core::keydist::KeyDistError;
use droplet_core::crypto::SigningKey;
use droplet_core::keyregression::DEFAULT_CHAIN_LENGTH;
use droplet_core::keytree::DEFAULT_DEPTH;
use droplet_core::perf;
use droplet_core::simchain::{Chain, ChainConfig, Confirmation, FileChain};
use droplet_core::stealth::PrincipalPublic;
use droplet_core::storagenode::{
    serve_tcp, AuthMode, Backend, DiskBackend, MemoryBackend, NodeClient, NodeConfig, Status, StorageNode,
    TcpTransport, MAX_RANGE_EPOCHS,
};
use droplet_core::streamio::{chunk_digest, epoch_of, epoch_range, Record, StreamMeta};
use droplet_core::types::{parse_intervals, EpochInterval, StreamId};
use rand::rngs::OsRng;

use crate::keystore::{read_view_key, write_view_key, KeyStore};

#[derive(Parser, Debug)]
#[command(name = "droplet", version, about = "Access-controlled encrypted time-series streams")]
pub struct Cli {
    /// Key directory.
    #[arg(long, global = true, env = "DROPLET_KEYSTORE", default_value = ".droplet")]
    pub keystore: PathBuf,
    /// Chain directory.
    #[arg(long, global = true, env = "DROPLET_CHAIN")]
    pub chain: Option<PathBuf>,
    /// Storage node address.
    #[arg(long, global = true, env = "DROPLET_NODE")]
    pub node: Option<String>,
    /// How long to wait for transaction confirmation and node sync.
    #[arg(long, global = true, default_value_t = 60)]
    pub wait_secs: u64,
    #[command(subcommand)]
    pub role: Role,
}

#[derive(Subcommand, Debug)]
pub enum Role {
    #[command(subcommand)]
    Owner(OwnerCmd),
    #[command(subcommand)]
    Producer(ProducerCmd),
    #[command(subcommand)]
    Consumer(ConsumerCmd),
    #[command(subcommand)]
    Node(NodeCmd),
    #[command(subcommand)]
    Chain(ChainCmd),
    #[command(subcommand)]
    Bench(BenchCmd),
}

#[derive(Subcommand, Debug)]
pub enum OwnerCmd {
    /// Create the owner signing key.
    Keygen {
        #[arg(long)]
        force: bool,
    },
    /// Bind a producer device to the owner (creating its key if needed).
    PairDevice {
        #[arg(long)]
        device: String,
    },
    RegisterStream(RegisterArgs),
    /// Grant a principal access to epochs and/or a subscription.
    Grant {
        #[arg(long)]
        stream: String,
        /// Principal public key, `<main hex>:<view hex>`.
        #[arg(long)]
        to: String,
        /// Name used to revoke the grant later.
        #[arg(long)]
        label: String,
        /// Epoch intervals, e.g. `0..3,6..7`.
        #[arg(long)]
        epochs: Option<String>,
        /// First epoch of an open-ended subscription.
        #[arg(long)]
        subscribe_from: Option<u64>,
    },
    /// Remove every grant with the label and rotate the distribution key.
    Revoke {
        #[arg(long)]
        stream: String,
        #[arg(long)]
        label: String,
    },
    /// List the ACL entries a view key can detect.
    Audit {
        #[arg(long, conflicts_with = "stream_id")]
        stream: Option<String>,
        #[arg(long)]
        stream_id: Option<String>,
        /// View key file written by `droplet consumer export-view-key`.
        #[arg(long)]
        view_key: PathBuf,
    },
    /// Anchor the digest of a stored chunk on chain.
    Anchor {
        #[arg(long)]
        stream: String,
        /// Defaults to the latest chunk this keystore produced.
        #[arg(long)]
        epoch: Option<u64>,
    },
    /// Print a registered stream's parameters and grants.
    Show {
        #[arg(long)]
        stream: String,
    },
}

#[derive(Args, Debug)]
pub struct RegisterArgs {
    #[arg(long)]
    pub name: String,
    /// Paired device that will produce the stream.
    #[arg(long)]
    pub device: String,
    #[arg(long, default_value_t = 3_600_000)]
    pub delta_ms: i64,
    /// Stream origin in epoch milliseconds; defaults to the current epoch boundary.
    #[arg(long)]
    pub t0_ms: Option<i64>,
    #[arg(long, default_value_t = DEFAULT_DEPTH)]
    pub depth: u8,
    #[arg(long, default_value_t = DEFAULT_CHAIN_LENGTH)]
    pub chain_length: u64,
    #[arg(long, default_value_t = 4)]
    pub grace: u64,
}

#[derive(Subcommand, Debug)]
pub enum ProducerCmd {
    /// Seal records into per-epoch chunks, store them and publish lockboxes.
    Produce {
        #[arg(long)]
        stream: String,
        #[arg(long)]
        device: String,
        /// One record per line: `<ts_ms> <base64 payload>`.
        #[arg(long)]
        input: PathBuf,
    },
    /// Re-publish lockboxes of every produced epoch under the current distribution key.
    Republish {
        #[arg(long)]
        stream: String,
        #[arg(long)]
        device: String,
    },
}

#[derive(Subcommand, Debug)]
pub enum ConsumerCmd {
    /// Create principal main and view keys.
    Keygen {
        #[arg(long)]
        force: bool,
    },
    /// Print the principal public key to hand to owners.
    Show,
    /// Write the view key (detection-only capability) to a file.
    ExportViewKey {
        #[arg(long)]
        out: PathBuf,
    },
    /// Fetch and decrypt a range of epochs.
    Get {
        #[arg(long)]
        stream_id: String,
        /// Epoch range `a..b`.
        #[arg(long, conflicts_with_all = ["from_ms", "to_ms"])]
        range: Option<String>,
        #[arg(long, requires = "to_ms")]
        from_ms: Option<i64>,
        #[arg(long)]
        to_ms: Option<i64>,
    },
    /// Poll for new epochs and print their records.
    Subscribe {
        #[arg(long)]
        stream_id: String,
        #[arg(long)]
        from: u64,
        /// Stop after this many epochs were received.
        #[arg(long)]
        count: Option<u64>,
        /// Poll period; defaults to half an epoch.
        #[arg(long)]
        period_ms: Option<u64>,
        /// Give up after this many polls.
        #[arg(long)]
        max_polls: Option<u64>,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum BackendKind {
    Memory,
    Disk,
}

#[derive(Subcommand, Debug)]
pub enum NodeCmd {
    /// Run a storage node that follows the chain.
    Serve {
        #[arg(long, value_enum, default_value = "memory")]
        backend: BackendKind,
        /// Data directory for the disk backend.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value = "127.0.0.1:7070")]
        listen: String,
        /// Chain polling period.
        #[arg(long, default_value_t = 200)]
        poll_ms: u64,
        /// Only accept partially authorized ranges by dropping the denied epochs.
        #[arg(long)]
        partial_ranges: bool,
    },
}

#[derive(Subcommand, Debug)]
pub enum ChainCmd {
    /// Create a chain directory and its block producer key.
    Init {
        /// 0 mines a block on every submission.
        #[arg(long, default_value_t = 0)]
        block_interval_ms: u64,
        #[arg(long, default_value_t = 0)]
        confirmation_depth: u64,
    },
    /// Mine one block from the mempool.
    Produce,
    /// Mine a block every interval until interrupted.
    Run {
        #[arg(long)]
        blocks: Option<u64>,
    },
    Status,
}

#[derive(Subcommand, Debug)]
pub enum BenchCmd {
    /// Flat versus checkpointed hash chain.
    Keyrotation {
        #[arg(long, default_value_t = 9000)]
        length: u64,
    },
    /// Seal and open an 8 KiB chunk, plus primitive throughput.
    Chunkcrypto {
        #[arg(long, default_value_t = 200)]
        iterations: u32,
        /// Seconds spent on each row of the primitive table.
        #[arg(long, default_value_t = 0.3)]
        table_secs: f64,
    },
    /// Authorized get versus direct backend get.
    Authz {
        #[arg(long, default_value_t = 10_000)]
        requests: u32,
    },
}

pub fn now_ms() -> i64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as i64).unwrap_or(0)
}

fn resolve(addr: &str) -> Result<SocketAddr> {
    addr.to_socket_addrs()
        .with_context(|| format!("resolving {addr}"))?
        .next()
        .ok_or_else(|| anyhow!("{addr} did not resolve"))
}

fn parse_stream_id(s: &str) -> Result<StreamId> {
    StreamId::from_hex(s).ok_or_else(|| anyhow!("stream id must be 64 hex characters"))
}

/// Shared plumbing for commands that talk to the chain and the node.
struct Ctx {
    store: KeyStore,
    chain: Option<PathBuf>,
    node: Option<String>,
    wait: Duration,
}

impl Ctx {
    fn chain_dir(&self) -> Result<&Path> {
        self.chain.as_deref().ok_or_else(|| anyhow!("no chain given; pass --chain <dir> or set DROPLET_CHAIN"))
    }

    fn chain(&self) -> Result<FileChain> {
        let dir = self.chain_dir()?;
        FileChain::open(dir).with_context(|| format!("opening chain {}", dir.display()))
    }

    fn node_addr(&self) -> Result<SocketAddr> {
        resolve(self.node.as_deref().ok_or_else(|| anyhow!("no node given; pass --node <addr> or set DROPLET_NODE"))?)
    }

    fn client(&self, key: SigningKey) -> Result<NodeClient> {
        Ok(NodeClient::new(TcpTransport::new(self.node_addr()?), key, AuthMode::Session))
    }

    fn anon_client(&self) -> Result<NodeClient> {
        self.client(SigningKey::generate(&mut OsRng))
    }

    /// Access-control state replayed from confirmed blocks, with ACL
    /// documents fetched from the node.
    fn state(&self) -> Result<(AcState, Vec<droplet_core::authzchain::Rejection>)> {
        let blocks = self.chain()?.confirmed_blocks(0)?;
        let acls = NodeAclStore::new(self.anon_client()?);
        Ok(bootstrap(&blocks, &acls)?)
    }

    /// Submit, wait for confirmation and for the node to apply the block,
    /// and fail if the state machine rejected the transaction.
    fn submit(&self, tx: Tx) -> Result<u64> {
        let chain = self.chain()?;
        let txid = chain.submit_tx(tx)?;
        let deadline = Instant::now() + self.wait;
        let height = loop {
            match chain.confirmation_status(&txid)? {
                Confirmation::Confirmed { height } => break height,
                status if Instant::now() > deadline => {
                    bail!("transaction {} not confirmed in time ({status:?}); is a block producer running?", hex::encode(txid))
                }
                _ => std::thread::sleep(Duration::from_millis(50)),
            }
        };
        let (_, rejections) = self.state()?;
        if let Some(r) = rejections.iter().find(|r| r.txid == txid) {
            bail!("transaction rejected at height {}: {}", r.height, r.reason);
        }
        self.wait_for_node(height)?;
        Ok(height)
    }

    fn wait_for_node(&self, height: u64) -> Result<()> {
        let mut client = self.anon_client()?;
        let deadline = Instant::now() + self.wait;
        loop {
            if client.status(StreamId([0; 32]))?.is_some_and(|h| h >= height) {
                return Ok(());
            }
            if Instant::now() > deadline {
                bail!("storage node did not reach block {height} in time");
            }
            std::thread::sleep(Duration::from_millis(20));
        }
    }

    fn owner_stream(&self, name: &str) -> Result<OwnerStream> {
        self.store.load_stream(name)
    }

    fn publish_acl(&self, owner: &SigningKey, stream: &OwnerStream) -> Result<u64> {
        let sid = stream.meta.stream_id;
        self.client(owner.clone())?.put_acl(sid, &stream.acl_document().to_bytes())?;
        let (state, _) = self.state()?;
        let seq = state.stream(&sid).ok_or_else(|| anyhow!("stream {sid} is not registered"))?.update_seq + 1;
        self.submit(stream.permission_update_tx(owner, seq))
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let ctx = Ctx {
        store: KeyStore::open(&cli.keystore),
        chain: cli.chain,
        node: cli.node,
        wait: Duration::from_secs(cli.wait_secs),
    };
    match cli.role {
        Role::Owner(cmd) => owner(&ctx, cmd),
        Role::Producer(cmd) => producer(&ctx, cmd),
        Role::Consumer(cmd) => consumer(&ctx, cmd),
        Role::Node(cmd) => node(&ctx, cmd),
        Role::Chain(cmd) => chain(&ctx, cmd),
        Role::Bench(cmd) => bench(cmd),
    }
}

fn owner(ctx: &Ctx, cmd: OwnerCmd) -> Result<()> {
    match cmd {
        OwnerCmd::Keygen { force } => {
            let key = ctx.store.create_owner_key(force)?;
            println!("owner public key {}", key.public_key());
            println!("owner address    {}", hex::encode(key.public_key().address()));
        }
        OwnerCmd::PairDevice { device } => {
            let owner = ctx.store.owner_key()?;
            let key = ctx.store.device_key(&device, true)?;
            let height = ctx.submit(Tx::device_pair(&owner, &key, now_ms() as u64))?;
            println!("paired device {device} ({}) at height {height}", key.public_key());
        }
        OwnerCmd::RegisterStream(a) => register_stream(ctx, a)?,
        OwnerCmd::Grant { stream, to, label, epochs, subscribe_from } => {
            let owner = ctx.store.owner_key()?;
            let mut s = ctx.owner_stream(&stream)?;
            let principal = PrincipalPublic::from_text(&to).ok_or_else(|| anyhow!("--to must be <main hex>:<view hex>"))?;
            let intervals = match &epochs {
                Some(e) => parse_intervals(e)?,
                None => Vec::new(),
            };
            let g = s.grant(&label, &principal, &intervals, subscribe_from, &mut OsRng)?;
            let (address, scope) = (g.entry.address.address, g.entry.scope.to_string());
            let height = ctx.publish_acl(&owner, &s)?;
            ctx.store.save_stream(&stream, &s)?;
            println!("granted {label}: {scope}");
            println!("one-time address {address}");
            println!("confirmed at height {height}");
        }
        OwnerCmd::Revoke { stream, label } => {
            let owner = ctx.store.owner_key()?;
            let mut s = ctx.owner_stream(&stream)?;
            let removed = s.revoke(&label, &mut OsRng)?;
            let height = ctx.publish_acl(&owner, &s)?;
            ctx.store.save_stream(&stream, &s)?;
            println!("revoked {removed} grant(s) labelled {label}; distribution key generation {}", s.kd.generation);
            println!("confirmed at height {height}; run `droplet producer republish` or `produce` to re-key lockboxes");
        }
        OwnerCmd::Audit { stream, stream_id, view_key } => {
            let sid = match (stream, stream_id) {
                (Some(name), _) => ctx.owner_stream(&name)?.meta.stream_id,
                (None, Some(id)) => parse_stream_id(&id)?,
                (None, None) => bail!("pass --stream or --stream-id"),
            };
            let view = read_view_key(&view_key)?;
            let (state, _) = ctx.state()?;
            let entries = state.audit_stream(&sid, &view).map_err(|e| anyhow!("{e}"))?;
            for e in &entries {
                println!("{}  {}  generation {}", e.address.address, e.scope, e.generation);
            }
            println!("{} grant(s) found", entries.len());
        }
        OwnerCmd::Anchor { stream, epoch } => {
            let owner = ctx.store.owner_key()?;
            let s = ctx.owner_stream(&stream)?;
            let epoch = match epoch {
                Some(e) => e,
                None => *ctx
                    .store
                    .producer_state(&stream)?
                    .digests
                    .keys()
                    .next_back()
                    .ok_or_else(|| anyhow!("no produced epochs recorded; pass --epoch"))?,
            };
            let bytes = ctx.client(owner.clone())?.get(s.meta.stream_id, epoch)?;
            let digest = chunk_digest(&bytes);
            let height = ctx.submit(Tx::anchor(s.meta.stream_id, epoch, digest, &owner))?;
            println!("anchored epoch {epoch} digest {} at height {height}", hex::encode(digest));
        }
        OwnerCmd::Show { stream } => {
            let s = ctx.owner_stream(&stream)?;
            let m = &s.meta;
            println!("stream id      {}", m.stream_id);
            println!("producer       {}", m.producer_pub);
            println!("t0 / delta     {} ms / {} ms", m.t0, m.delta);
            println!("tree depth     {}", m.tree_depth);
            println!("chain length   {}", m.chain_length);
            println!("kd generation  {}", s.kd.generation);
            for g in &s.grants {
                println!("grant {:<12} {}", g.label, g.entry.scope);
            }
        }
    }
    Ok(())
}

fn register_stream(ctx: &Ctx, a: RegisterArgs) -> Result<()> {
    if ctx.store.has_stream(&a.name) {
        bail!("stream {:?} already exists in this keystore", a.name);
    }
    let owner = ctx.store.owner_key()?;
    let device = ctx.store.device_key(&a.device, false)?.public_key();
    let (state, _) = ctx.state()?;
    if state.device_owner(&device) != Some(&owner.public_key()) {
        bail!("device {} is not paired with this owner", a.device);
    }
    if a.delta_ms <= 0 {
        bail!("--delta-ms must be positive");
    }
    let addr = owner.public_key().address();
    let meta = StreamMeta {
        stream_id: StreamId::derive(&addr, &a.name),
        owner_addr: addr,
        producer_pub: device,
        t0: a.t0_ms.unwrap_or_else(|| now_ms() / a.delta_ms * a.delta_ms),
        delta: a.delta_ms,
        tree_depth: a.depth,
        chain_length: a.chain_length,
        grace_period: a.grace,
    };
    meta.validate()?;
    let stream = OwnerStream::new(meta, &mut OsRng);
    let sid = stream.meta.stream_id;
    ctx.client(owner.clone())?.put_acl(sid, &stream.acl_document().to_bytes())?;
    let tx = stream.register_tx(&owner);
    let txid = tx.txid();
    // Persist first so the seeds are never lost after the chain accepted them.
    ctx.store.save_stream(&a.name, &stream)?;
    ctx.store.save_registration(&a.name, &txid)?;
    let height = ctx.submit(tx)?;
    println!("registered stream {} as {sid} at height {height}", a.name);
    Ok(())
}

fn load_producer(ctx: &Ctx, stream: &str, device: &str) -> Result<(Producer, NodeClient, crate::keystore::ProducerState)> {
    let owner_stream = ctx.owner_stream(stream)?;
    let key = ctx.store.device_key(device, false)?;
    let sid = owner_stream.meta.stream_id;
    let (state, _) = ctx.state()?;
    if state.stream(&sid).is_none() {
        bail!("stream {stream} is not registered on chain");
    }
    if !state.producer_authorized(&sid, &key.public_key()) {
        bail!("device {device} is not paired with the stream owner or is not the stream's producer");
    }
    let registration = ctx.store.registration(stream)?;
    let mut producer =
        Producer::new(owner_stream.meta.clone(), key.clone(), &owner_stream.secrets, owner_stream.kd.clone(), registration)?;
    let progress = ctx.store.producer_state(stream)?;
    for (c, d) in &progress.digests {
        producer.remember(*c, *d);
    }
    Ok((producer, ctx.client(key)?, progress))
}

fn republish(producer: &Producer, client: &mut NodeClient) -> Result<usize> {
    let lockboxes = producer.republish_lockboxes(&mut OsRng)?;
    for lb in &lockboxes {
        client.put_lockbox(lb)?;
    }
    Ok(lockboxes.len())
}

fn read_records(path: &Path) -> Result<Vec<Record>> {
    let file = std::fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (ts, payload) = line.split_once(char::is_whitespace).unwrap_or((line, ""));
        let ts: i64 = ts.parse().with_context(|| format!("line {}: bad timestamp", i + 1))?;
        let payload = B64.decode(payload.trim()).with_context(|| format!("line {}: bad base64 payload", i + 1))?;
        out.push(Record::new(ts, payload));
    }
    Ok(out)
}

fn producer(ctx: &Ctx, cmd: ProducerCmd) -> Result<()> {
    match cmd {
        ProducerCmd::Produce { stream, device, input } => {
            let (mut producer, mut client, mut progress) = load_producer(ctx, &stream, &device)?;
            let sid = producer.meta().stream_id;
            let kd_gen = producer.distribution_key().generation;
            if progress.kd_generation.is_some_and(|g| g != kd_gen) {
                let n = republish(&producer, &mut client)?;
                println!("re-published {n} lockbox(es) under distribution key generation {kd_gen}");
            }
            progress.kd_generation = Some(kd_gen);
            let records = read_records(&input)?;
            let epochs = group_by_epoch(&records, producer.meta())?;
            let span = match (epochs.keys().next(), epochs.keys().next_back()) {
                (Some(a), Some(b)) => b - a + 1,
                _ => 0,
            };
            let mut result = Ok(());
            for (counter, recs) in &epochs {
                for c in producer.unknown_backlinks(*counter) {
                    match client.get(sid, c) {
                        Ok(bytes) => producer.remember(c, chunk_digest(&bytes)),
                        Err(e) if e.status() == Some(Status::NotFound) => {}
                        Err(e) => return Err(e.into()),
                    }
                }
                let bytes = producer.seal_epoch(*counter, recs, &mut OsRng)?;
                if let Err(e) = client.store_chunk(sid, &bytes) {
                    result = Err(anyhow!("epoch {counter}: {e}"));
                    break;
                }
                client.put_lockbox(&producer.lockbox(*counter, &mut OsRng)?)?;
                progress.digests.insert(*counter, chunk_digest(&bytes));
                println!("epoch {counter}: {} record(s), {} bytes", recs.len(), bytes.len());
            }
            ctx.store.save_producer_state(&stream, &progress)?;
            result?;
            println!(
                "{span} epoch(s) attempted: {} sealed with {} record(s), {} empty skipped",
                epochs.len(),
                records.len(),
                span - epochs.len() as u64
            );
        }
        ProducerCmd::Republish { stream, device } => {
            let (producer, mut client, mut progress) = load_producer(ctx, &stream, &device)?;
            let n = republish(&producer, &mut client)?;
            progress.kd_generation = Some(producer.distribution_key().generation);
            ctx.store.save_producer_state(&stream, &progress)?;
            println!("re-published {n} lockbox(es) under generation {}", producer.distribution_key().generation);
        }
    }
    Ok(())
}

/// Grants of the keystore principal for `sid`, with the stream's metadata.
fn consumer_for(ctx: &Ctx, sid: StreamId) -> Result<Consumer> {
    let keys = ctx.store.principal()?;
    let (state, _) = ctx.state()?;
    let record = state.stream(&sid).ok_or_else(|| anyhow!("stream {sid} is not registered"))?;
    let doc = AclDocument::from_bytes(&ctx.anon_client()?.get_acl(sid, &record.acl_hash)?)?;
    let grants = discover_grants(&keys, &doc)?;
    if grants.is_empty() {
        bail!("no grant for this principal in the current ACL of {sid}");
    }
    Ok(Consumer::new(record.meta.clone(), grants))
}

fn read_epochs(ctx: &Ctx, consumer: &Consumer, range: EpochInterval) -> Result<BTreeMap<u64, Vec<Record>>> {
    let addr = ctx.node_addr()?;
    Ok(consumer.read(range, |key| NodeClient::new(TcpTransport::new(addr), key, AuthMode::Session))?)
}

fn lockbox_pending(e: &anyhow::Error) -> bool {
    matches!(
        e.downcast_ref::<FlowError>(),
        Some(FlowError::MissingLockbox(_) | FlowError::KeyDist(KeyDistError::GenerationMismatch { .. }))
    )
}

fn print_records(out: &mut impl Write, records: &BTreeMap<u64, Vec<Record>>) -> Result<()> {
    for r in records.values().flatten() {
        writeln!(out, "{} {}", r.ts, B64.encode(&r.payload))?;
    }
    out.flush()?;
    Ok(())
}

fn consumer(ctx: &Ctx, cmd: ConsumerCmd) -> Result<()> {
    match cmd {
        ConsumerCmd::Keygen { force } => {
            let keys = ctx.store.create_principal(force)?;
            println!("{}", keys.public().to_text());
        }
        ConsumerCmd::Show => println!("{}", ctx.store.principal()?.public().to_text()),
        ConsumerCmd::ExportViewKey { out } => {
            write_view_key(&out, &ctx.store.principal()?.view_key())?;
            println!("view key written to {}", out.display());
        }
        ConsumerCmd::Get { stream_id, range, from_ms, to_ms } => {
            let sid = parse_stream_id(&stream_id)?;
            let consumer = consumer_for(ctx, sid)?;
            let range = match (range, from_ms, to_ms) {
                (Some(r), _, _) => match parse_intervals(&r)?.as_slice() {
                    [iv] => *iv,
                    _ => bail!("--range takes a single interval a..b"),
                },
                (None, Some(a), Some(b)) => {
                    let (state, _) = ctx.state()?;
                    epoch_range(a, b, &state.stream(&sid).expect("checked").meta)?
                }
                _ => bail!("pass --range a..b or --from-ms and --to-ms"),
            };
            let records = read_epochs(ctx, &consumer, range)?;
            print_records(&mut std::io::stdout().lock(), &records)?;
            eprintln!("{} epoch(s) decrypted", records.len());
        }
        ConsumerCmd::Subscribe { stream_id, from, count, period_ms, max_polls } => {
            let sid = parse_stream_id(&stream_id)?;
            let mut next = from;
            let mut received = 0u64;
            let mut polls = 0u64;
            loop {
                let consumer = consumer_for(ctx, sid)?;
                let (state, _) = ctx.state()?;
                let meta = state.stream(&sid).expect("checked").meta.clone();
                // Look at least up to the current epoch so quiet stretches are skipped.
                let now = epoch_of(now_ms(), &meta).unwrap_or(0);
                let last = (next + 255).max(now).min(next + MAX_RANGE_EPOCHS - 1).min(meta.epoch_capacity() - 1);
                if next <= last {
                    match read_epochs(ctx, &consumer, EpochInterval::new(next, last)) {
                        Ok(records) => {
                            print_records(&mut std::io::stdout().lock(), &records)?;
                            if let Some(&top) = records.keys().next_back() {
                                received += records.len() as u64;
                                next = top + 1;
                            }
                        }
                        // The producer stores a chunk before its lockbox, and
                        // re-publishes lockboxes after a key rotation.
                        Err(e) if lockbox_pending(&e) => eprintln!("waiting: {e}"),
                        Err(e) => return Err(e),
                    }
                }
                polls += 1;
                if count.is_some_and(|c| received >= c) {
                    break;
                }
                if max_polls.is_some_and(|m| polls >= m) {
                    if let Some(c) = count {
                        bail!("received {received} of {c} epochs before giving up");
                    }
                    break;
                }
                let period = period_ms.unwrap_or((meta.delta / 2).max(1) as u64);
                std::thread::sleep(Duration::from_millis(period));
            }
            eprintln!("{received} epoch(s) received");
        }
    }
    Ok(())
}

fn node(ctx: &Ctx, cmd: NodeCmd) -> Result<()> {
    let NodeCmd::Serve { backend, data, listen, poll_ms, partial_ranges } = cmd;
    let backend: Arc<dyn Backend> = match backend {
        BackendKind::Memory => Arc::new(MemoryBackend::new()),
        BackendKind::Disk => {
            let dir = data.ok_or_else(|| anyhow!("--backend disk needs --data <dir>"))?;
            Arc::new(DiskBackend::open(&dir).with_context(|| format!("opening {}", dir.display()))?)
        }
    };
    let config = NodeConfig { partial_ranges, ..NodeConfig::default() };
    let node = Arc::new(StorageNode::new(backend, config));
    let chain: Arc<dyn Chain> = Arc::new(ctx.chain()?);
    node.sync(chain.as_ref())?;
    let stop = Arc::new(AtomicBool::new(false));
    let follower = node.spawn_follower(chain, Duration::from_millis(poll_ms.max(1)), stop);
    let server = serve_tcp(node, TcpListener::bind(resolve(&listen)?)?)?;
    println!("listening on {}", server.addr());
    std::io::stdout().flush()?;
    let _ = follower.join();
    Ok(())
}

fn chain(ctx: &Ctx, cmd: ChainCmd) -> Result<()> {
    match cmd {
        ChainCmd::Init { block_interval_ms, confirmation_depth } => {
            let dir = ctx.chain_dir()?;
            let config = ChainConfig { block_interval_ms, confirmation_depth };
            let chain = FileChain::init(dir, config, SigningKey::generate(&mut OsRng))?;
            println!("initialized chain in {} (producer {})", dir.display(), chain.producer_pub());
        }
        ChainCmd::Produce => {
            let block = ctx.chain()?.produce_block()?;
            println!("block {} with {} transaction(s)", block.height, block.txs.len());
        }
        ChainCmd::Run { blocks } => {
            let chain = ctx.chain()?;
            let interval = chain.config().block_interval_ms;
            if interval == 0 {
                bail!("this chain mines on submission; nothing to run");
            }
            let mut mined = 0;
            while blocks.is_none_or(|b| mined < b) {
                std::thread::sleep(Duration::from_millis(interval));
                let block = chain.produce_block()?;
                println!("block {} with {} transaction(s)", block.height, block.txs.len());
                mined += 1;
            }
        }
        ChainCmd::Status => {
            let chain = ctx.chain()?;
            let config = chain.config();
            match chain.tip_height()? {
                Some(h) => println!("height {h}"),
                None => println!("height -"),
            }
            println!("pending {}", chain.pending()?);
            println!("block interval {} ms, confirmation depth {}", config.block_interval_ms, config.confirmation_depth);
        }
    }
    Ok(())
}

fn bench(cmd: BenchCmd) -> Result<()> {
    let seed = now_ms() as u64;
    match cmd {
        BenchCmd::Keyrotation { length } => {
            if length == 0 {
                bail!("--length must be positive");
            }
            println!("{}", perf::key_rotation(length, seed));
        }
        BenchCmd::Chunkcrypto { iterations, table_secs } => {
            println!("{}", perf::chunk_crypto(iterations, seed));
            println!();
            println!("{}", perf::primitive_table(Duration::from_secs_f64(table_secs.max(0.01)), seed));
        }
        BenchCmd::Authz { requests } => println!("{}", perf::authz_overhead(requests, seed)?),
    }
    Ok(())
}
