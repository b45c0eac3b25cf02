use std::fs::{self, File, OpenOptions};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{verify_chain, Block, Chain, ChainConfig, ChainError, Confirmation, Ledger};
use crate::authzchain::Tx;
use crate::crypto::{Digest, PublicKey, SigningKey};

const CONFIG_FILE: &str = "chain.toml";
const PRODUCER_KEY_FILE: &str = "producer.key";
const BLOCKS_FILE: &str = "blocks.log";
const MEMPOOL_FILE: &str = "mempool.log";
const LOCK_FILE: &str = "chain.lock";

#[derive(Debug, Serialize, Deserialize)]
struct ChainFile {
    block_interval_ms: u64,
    confirmation_depth: u64,
    producer_pub: String,
}

/// Chain persisted in a directory so several processes can share it.
///
/// Blocks and pending transactions live in append-only logs of
/// `u32 length || bytes` records. Writers hold an exclusive lock on
/// `chain.lock`; readers take a shared one.
#[derive(Debug)]
pub struct FileChain {
    dir: PathBuf,
    config: ChainConfig,
    producer_pub: PublicKey,
    producer: Option<SigningKey>,
}

fn read_records(path: &Path) -> Result<Vec<Vec<u8>>, ChainError> {
    let mut buf = Vec::new();
    match File::open(path) {
        Ok(mut f) => {
            f.read_to_end(&mut buf)?;
        }
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(e.into()),
    }
    let mut r = crate::wire::Reader::new(&buf);
    let mut out = Vec::new();
    while r.remaining() > 0 {
        out.push(r.var_bytes()?.to_vec());
    }
    Ok(out)
}

fn append_record(path: &Path, bytes: &[u8]) -> Result<(), ChainError> {
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    let mut framed = Vec::with_capacity(4 + bytes.len());
    framed.extend_from_slice(&(bytes.len() as u32).to_be_bytes());
    framed.extend_from_slice(bytes);
    f.write_all(&framed)?;
    f.sync_data()?;
    Ok(())
}

impl FileChain {
    /// Create a new chain directory with a fresh producer key.
    pub fn init(dir: impl AsRef<Path>, config: ChainConfig, producer: SigningKey) -> Result<Self, ChainError> {
        let dir = dir.as_ref().to_path_buf();
        fs::create_dir_all(&dir)?;
        if dir.join(CONFIG_FILE).exists() {
            return Err(ChainError::Config(format!("{} already holds a chain", dir.display())));
        }
        let cfg = ChainFile {
            block_interval_ms: config.block_interval_ms,
            confirmation_depth: config.confirmation_depth,
            producer_pub: producer.public_key().to_hex(),
        };
        let text = toml::to_string(&cfg).map_err(|e| ChainError::Config(e.to_string()))?;
        fs::write(dir.join(CONFIG_FILE), text)?;
        write_secret(&dir.join(PRODUCER_KEY_FILE), &hex::encode(producer.to_bytes()))?;
        File::create(dir.join(BLOCKS_FILE))?;
        File::create(dir.join(MEMPOOL_FILE))?;
        File::create(dir.join(LOCK_FILE))?;
        Ok(Self { dir, config, producer_pub: producer.public_key(), producer: Some(producer) })
    }

    /// Open an existing chain. The producer key is loaded when readable.
    pub fn open(dir: impl AsRef<Path>) -> Result<Self, ChainError> {
        let dir = dir.as_ref().to_path_buf();
        let text = fs::read_to_string(dir.join(CONFIG_FILE))
            .map_err(|e| ChainError::Config(format!("{}: {e}", dir.join(CONFIG_FILE).display())))?;
        let cfg: ChainFile = toml::from_str(&text).map_err(|e| ChainError::Config(e.to_string()))?;
        let producer_pub =
            PublicKey::from_hex(&cfg.producer_pub).map_err(|_| ChainError::Config("producer_pub".into()))?;
        let producer = fs::read_to_string(dir.join(PRODUCER_KEY_FILE))
            .ok()
            .and_then(|s| hex::decode(s.trim()).ok())
            .and_then(|b| <[u8; 32]>::try_from(b).ok())
            .and_then(|b| SigningKey::from_bytes(&b).ok())
            .filter(|k| k.public_key() == producer_pub);
        let config = ChainConfig { block_interval_ms: cfg.block_interval_ms, confirmation_depth: cfg.confirmation_depth };
        Ok(Self { dir, config, producer_pub, producer })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn producer_pub(&self) -> PublicKey {
        self.producer_pub
    }

    fn lock(&self, exclusive: bool) -> Result<File, ChainError> {
        let f = OpenOptions::new().create(true).truncate(false).write(true).open(self.dir.join(LOCK_FILE))?;
        if exclusive {
            f.lock()?;
        } else {
            f.lock_shared()?;
        }
        Ok(f)
    }

    fn load(&self) -> Result<Ledger, ChainError> {
        let blocks = read_records(&self.dir.join(BLOCKS_FILE))?
            .iter()
            .map(|b| Block::from_bytes(b))
            .collect::<Result<Vec<_>, _>>()?;
        verify_chain(&blocks, &self.producer_pub)?;
        let mempool = read_records(&self.dir.join(MEMPOOL_FILE))?
            .iter()
            .map(|t| Tx::from_bytes(t))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Ledger::from_parts(blocks, mempool))
    }

    fn mine(&self, ledger: &mut Ledger) -> Result<Block, ChainError> {
        let producer = self.producer.as_ref().ok_or(ChainError::NotProducer)?;
        let block = ledger.next_block(producer);
        append_record(&self.dir.join(BLOCKS_FILE), &block.to_bytes())?;
        // Pending transactions are now in the block.
        File::create(self.dir.join(MEMPOOL_FILE))?;
        Ok(block)
    }

    pub fn tip_height(&self) -> Result<Option<u64>, ChainError> {
        let _guard = self.lock(false)?;
        Ok(self.load()?.blocks.last().map(|b| b.height))
    }

    pub fn pending(&self) -> Result<usize, ChainError> {
        let _guard = self.lock(false)?;
        Ok(self.load()?.mempool.len())
    }
}

impl Chain for FileChain {
    fn config(&self) -> ChainConfig {
        self.config
    }

    fn submit_tx(&self, tx: Tx) -> Result<Digest, ChainError> {
        let _guard = self.lock(true)?;
        let mut ledger = self.load()?;
        let bytes = tx.canonical_bytes();
        let id = ledger.admit(tx)?;
        append_record(&self.dir.join(MEMPOOL_FILE), &bytes)?;
        if self.config.block_interval_ms == 0 {
            for _ in 0..=self.config.confirmation_depth {
                self.mine(&mut ledger)?;
            }
        }
        Ok(id)
    }

    fn produce_block(&self) -> Result<Block, ChainError> {
        let _guard = self.lock(true)?;
        let mut ledger = self.load()?;
        self.mine(&mut ledger)
    }

    fn read_blocks(&self, from_height: u64) -> Result<Vec<Block>, ChainError> {
        let _guard = self.lock(false)?;
        Ok(self.load()?.blocks.into_iter().skip(from_height as usize).collect())
    }

    fn confirmation_status(&self, txid: &Digest) -> Result<Confirmation, ChainError> {
        let _guard = self.lock(false)?;
        Ok(self.load()?.status(txid, self.config.confirmation_depth))
    }
}

/// Write a secret file readable only by its owner.
pub fn write_secret(path: &Path, contents: &str) -> std::io::Result<()> {
    let mut opts = OpenOptions::new();
    opts.create(true).write(true).truncate(true);
    #[cfg(unix)]
    {
        use std::os::unix::fs::OpenOptionsExt;
        opts.mode(0o600);
    }
    let mut f = opts.open(path)?;
    f.write_all(contents.as_bytes())?;
    f.write_all(b"\n")
}
