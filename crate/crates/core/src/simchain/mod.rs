//! A single-producer linear chain that totally orders transactions.
//!
//! Blocks are signed by the producer and linked by digest. A transaction is
//! confirmed once `confirmation_depth` further blocks sit on top of the block
//! that includes it. With `block_interval_ms = 0` every submission is mined
//! immediately, together with the empty blocks needed to confirm it.

mod file;

pub use file::{write_secret, FileChain};

use std::collections::{BTreeSet, VecDeque};
use std::time::{SystemTime, UNIX_EPOCH};

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use crate::authzchain::Tx;
use crate::crypto::{sha256, Digest, PublicKey, SignatureBytes, SigningKey};
use crate::wire::{Reader, WireError, Writer};

pub const BLOCK_SIG_TAG: &[u8] = b"droplet/block";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChainConfig {
    pub block_interval_ms: u64,
    pub confirmation_depth: u64,
}

impl Default for ChainConfig {
    fn default() -> Self {
        Self { block_interval_ms: 15_000, confirmation_depth: 1 }
    }
}

impl ChainConfig {
    /// Mine on every submission and confirm at once.
    pub fn immediate() -> Self {
        Self { block_interval_ms: 0, confirmation_depth: 0 }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ChainError {
    #[error("transaction {} already submitted", hex::encode(.0))]
    DuplicateTx(Digest),
    #[error("block {height} fails verification: {why}")]
    Corrupt { height: u64, why: &'static str },
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error("chain storage: {0}")]
    Io(#[from] std::io::Error),
    #[error("chain config: {0}")]
    Config(String),
    #[error("this handle cannot produce blocks")]
    NotProducer,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Block {
    pub height: u64,
    pub prev_digest: Digest,
    /// Milliseconds since the Unix epoch.
    pub timestamp: i64,
    pub txs: Vec<Tx>,
    pub signature: SignatureBytes,
}

impl Block {
    fn unsigned_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.u64(self.height)
            .bytes(&self.prev_digest)
            .i64(self.timestamp)
            .u32(u32::try_from(self.txs.len()).expect("too many transactions"));
        for tx in &self.txs {
            w.var_bytes(&tx.canonical_bytes());
        }
        w.finish()
    }

    fn signing_digest(unsigned: &[u8]) -> Digest {
        sha256(&[BLOCK_SIG_TAG, unsigned])
    }

    pub fn seal(height: u64, prev_digest: Digest, timestamp: i64, txs: Vec<Tx>, producer: &SigningKey) -> Self {
        let mut b = Block { height, prev_digest, timestamp, txs, signature: [0; 64] };
        b.signature = producer.sign(&Self::signing_digest(&b.unsigned_bytes()));
        b
    }

    /// `height u64 || prev 32 || timestamp i64 || count u32 || (len u32 || tx)* || sig 64`
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = self.unsigned_bytes();
        out.extend_from_slice(&self.signature);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, WireError> {
        let mut r = Reader::new(bytes);
        let height = r.u64()?;
        let prev_digest = r.array()?;
        let timestamp = r.i64()?;
        let n = r.u32()? as usize;
        let mut txs = Vec::with_capacity(n.min(r.remaining() / 64));
        for _ in 0..n {
            txs.push(Tx::from_bytes(r.var_bytes()?)?);
        }
        let signature = r.array()?;
        r.finish()?;
        Ok(Block { height, prev_digest, timestamp, txs, signature })
    }

    pub fn digest(&self) -> Digest {
        sha256(&[&self.to_bytes()])
    }

    pub fn verify_signature(&self, producer: &PublicKey) -> bool {
        producer.verify(&Self::signing_digest(&self.unsigned_bytes()), &self.signature)
    }
}

/// Check heights, digest links and producer signatures of a chain prefix.
pub fn verify_chain(blocks: &[Block], producer: &PublicKey) -> Result<(), ChainError> {
    let mut prev = [0u8; 32];
    for (i, b) in blocks.iter().enumerate() {
        if b.height != i as u64 {
            return Err(ChainError::Corrupt { height: i as u64, why: "height" });
        }
        if b.prev_digest != prev {
            return Err(ChainError::Corrupt { height: b.height, why: "previous digest" });
        }
        if !b.verify_signature(producer) {
            return Err(ChainError::Corrupt { height: b.height, why: "producer signature" });
        }
        prev = b.digest();
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Confirmation {
    Unknown,
    Pending,
    /// Included but not yet buried deep enough.
    Included { height: u64 },
    Confirmed { height: u64 },
}

impl Confirmation {
    pub fn is_confirmed(&self) -> bool {
        matches!(self, Confirmation::Confirmed { .. })
    }
}

/// Operations shared by the in-memory and file-backed chains.
pub trait Chain: Send + Sync {
    fn config(&self) -> ChainConfig;
    fn submit_tx(&self, tx: Tx) -> Result<Digest, ChainError>;
    fn produce_block(&self) -> Result<Block, ChainError>;
    /// Every block from `from_height`, verified.
    fn read_blocks(&self, from_height: u64) -> Result<Vec<Block>, ChainError>;
    fn confirmation_status(&self, txid: &Digest) -> Result<Confirmation, ChainError>;

    /// Blocks from `from_height` that have reached the confirmation depth.
    fn confirmed_blocks(&self, from_height: u64) -> Result<Vec<Block>, ChainError> {
        let mut blocks = self.read_blocks(from_height)?;
        let depth = self.config().confirmation_depth;
        if let Some(tip) = blocks.last().map(|b| b.height) {
            blocks.retain(|b| b.height + depth <= tip);
        }
        Ok(blocks)
    }
}

pub(crate) fn now_ms() -> i64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as i64).unwrap_or(0)
}

/// Chain contents shared by both implementations.
#[derive(Debug, Default)]
pub(crate) struct Ledger {
    pub blocks: Vec<Block>,
    pub mempool: VecDeque<Tx>,
    pub known: BTreeSet<Digest>,
}

impl Ledger {
    pub fn from_parts(blocks: Vec<Block>, mempool: Vec<Tx>) -> Self {
        let known = blocks
            .iter()
            .flat_map(|b| b.txs.iter())
            .chain(mempool.iter())
            .map(Tx::txid)
            .collect();
        Self { blocks, mempool: mempool.into(), known }
    }

    pub fn admit(&mut self, tx: Tx) -> Result<Digest, ChainError> {
        let id = tx.txid();
        if !self.known.insert(id) {
            return Err(ChainError::DuplicateTx(id));
        }
        self.mempool.push_back(tx);
        Ok(id)
    }

    pub fn next_block(&mut self, producer: &SigningKey) -> Block {
        let (height, prev, last_ts) = match self.blocks.last() {
            Some(b) => (b.height + 1, b.digest(), b.timestamp),
            None => (0, [0; 32], i64::MIN),
        };
        let txs: Vec<Tx> = self.mempool.drain(..).collect();
        let block = Block::seal(height, prev, now_ms().max(last_ts), txs, producer);
        self.blocks.push(block.clone());
        block
    }

    pub fn status(&self, txid: &Digest, depth: u64) -> Confirmation {
        if !self.known.contains(txid) {
            return Confirmation::Unknown;
        }
        let tip = self.blocks.last().map(|b| b.height);
        for b in self.blocks.iter().rev() {
            if b.txs.iter().any(|t| t.txid() == *txid) {
                return if tip.is_some_and(|t| b.height + depth <= t) {
                    Confirmation::Confirmed { height: b.height }
                } else {
                    Confirmation::Included { height: b.height }
                };
            }
        }
        Confirmation::Pending
    }
}

/// Chain held in process memory.
pub struct MemoryChain {
    config: ChainConfig,
    producer: SigningKey,
    ledger: Mutex<Ledger>,
}

impl MemoryChain {
    pub fn new(config: ChainConfig, producer: SigningKey) -> Self {
        Self { config, producer, ledger: Mutex::new(Ledger::default()) }
    }

    pub fn producer_pub(&self) -> PublicKey {
        self.producer.public_key()
    }

    pub fn tip_height(&self) -> Option<u64> {
        self.ledger.lock().blocks.last().map(|b| b.height)
    }

    /// Overwrite a stored block with arbitrary bytes, for tamper tests.
    pub fn tamper_block(&self, height: u64, mutate: impl FnOnce(&mut Vec<u8>)) -> Result<(), ChainError> {
        let mut ledger = self.ledger.lock();
        let slot = ledger.blocks.get_mut(height as usize).ok_or(ChainError::Corrupt { height, why: "missing" })?;
        let mut bytes = slot.to_bytes();
        mutate(&mut bytes);
        *slot = Block::from_bytes(&bytes)?;
        Ok(())
    }
}

impl Chain for MemoryChain {
    fn config(&self) -> ChainConfig {
        self.config
    }

    fn submit_tx(&self, tx: Tx) -> Result<Digest, ChainError> {
        let mut ledger = self.ledger.lock();
        let id = ledger.admit(tx)?;
        if self.config.block_interval_ms == 0 {
            for _ in 0..=self.config.confirmation_depth {
                ledger.next_block(&self.producer);
            }
        }
        Ok(id)
    }

    fn produce_block(&self) -> Result<Block, ChainError> {
        Ok(self.ledger.lock().next_block(&self.producer))
    }

    fn read_blocks(&self, from_height: u64) -> Result<Vec<Block>, ChainError> {
        let ledger = self.ledger.lock();
        verify_chain(&ledger.blocks, &self.producer.public_key())?;
        Ok(ledger.blocks.iter().skip(from_height as usize).cloned().collect())
    }

    fn confirmation_status(&self, txid: &Digest) -> Result<Confirmation, ChainError> {
        Ok(self.ledger.lock().status(txid, self.config.confirmation_depth))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn txs(n: u64) -> Vec<Tx> {
        let owner = SigningKey::from_bytes(&[7; 32]).unwrap();
        let device = SigningKey::from_bytes(&[8; 32]).unwrap();
        (0..n).map(|i| Tx::device_pair(&owner, &device, i)).collect()
    }

    fn producer() -> SigningKey {
        SigningKey::generate(&mut rand_chacha::ChaCha20Rng::seed_from_u64(5))
    }

    #[test]
    fn confirmation_after_k_blocks() {
        let chain = MemoryChain::new(ChainConfig { block_interval_ms: 15_000, confirmation_depth: 1 }, producer());
        let tx = txs(1).remove(0);
        let id = chain.submit_tx(tx.clone()).unwrap();
        assert_eq!(chain.confirmation_status(&id).unwrap(), Confirmation::Pending);
        assert!(matches!(chain.submit_tx(tx), Err(ChainError::DuplicateTx(_))));
        chain.produce_block().unwrap();
        assert_eq!(chain.confirmation_status(&id).unwrap(), Confirmation::Included { height: 0 });
        assert!(chain.confirmed_blocks(0).unwrap().is_empty());
        chain.produce_block().unwrap();
        assert_eq!(chain.confirmation_status(&id).unwrap(), Confirmation::Confirmed { height: 0 });
        assert_eq!(chain.confirmed_blocks(0).unwrap().len(), 1);
        assert_eq!(chain.confirmation_status(&[0; 32]).unwrap(), Confirmation::Unknown);
    }

    #[test]
    fn zero_interval_confirms_on_submit() {
        let chain = MemoryChain::new(ChainConfig { block_interval_ms: 0, confirmation_depth: 2 }, producer());
        let id = chain.submit_tx(txs(1).remove(0)).unwrap();
        assert!(chain.confirmation_status(&id).unwrap().is_confirmed());
        assert_eq!(chain.tip_height(), Some(2));
    }

    #[test]
    fn fifo_order_and_links() {
        let chain = MemoryChain::new(ChainConfig::default(), producer());
        let all = txs(5);
        for t in &all[..3] {
            chain.submit_tx(t.clone()).unwrap();
        }
        chain.produce_block().unwrap();
        for t in &all[3..] {
            chain.submit_tx(t.clone()).unwrap();
        }
        chain.produce_block().unwrap();
        let blocks = chain.read_blocks(0).unwrap();
        let order: Vec<Tx> = blocks.iter().flat_map(|b| b.txs.clone()).collect();
        assert_eq!(order, all);
        assert_eq!(blocks[1].prev_digest, blocks[0].digest());
        assert_eq!(Block::from_bytes(&blocks[0].to_bytes()).unwrap(), blocks[0]);
        assert_eq!(chain.read_blocks(1).unwrap().len(), 1);
    }

    #[test]
    fn tampering_breaks_verification() {
        let chain = MemoryChain::new(ChainConfig::default(), producer());
        chain.submit_tx(txs(1).remove(0)).unwrap();
        chain.produce_block().unwrap();
        chain.produce_block().unwrap();
        // Flip a byte inside the timestamp of block 0.
        chain.tamper_block(0, |b| b[45] ^= 1).unwrap();
        assert!(matches!(chain.read_blocks(0), Err(ChainError::Corrupt { height: 0, .. })));
    }
}
