use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use parking_lot::RwLock;

/// Ordered key-value storage behind a node. Each put is atomic per key.
pub trait Backend: Send + Sync {
    fn put(&self, key: &[u8], value: &[u8]) -> io::Result<()>;
    /// Store only when `key` is absent; returns whether the value was written.
    fn put_if_absent(&self, key: &[u8], value: &[u8]) -> io::Result<bool>;
    fn get(&self, key: &[u8]) -> io::Result<Option<Vec<u8>>>;
    /// Keys starting with `prefix`, in ascending order.
    fn scan_keys(&self, prefix: &[u8]) -> io::Result<Vec<Vec<u8>>>;
}

#[derive(Debug, Default)]
pub struct MemoryBackend {
    map: RwLock<BTreeMap<Vec<u8>, Vec<u8>>>,
}

impl MemoryBackend {
    pub fn new() -> Self {
        Self::default()
    }
}

impl Backend for MemoryBackend {
    fn put(&self, key: &[u8], value: &[u8]) -> io::Result<()> {
        self.map.write().insert(key.to_vec(), value.to_vec());
        Ok(())
    }

    fn put_if_absent(&self, key: &[u8], value: &[u8]) -> io::Result<bool> {
        let mut map = self.map.write();
        if map.contains_key(key) {
            return Ok(false);
        }
        map.insert(key.to_vec(), value.to_vec());
        Ok(true)
    }

    fn get(&self, key: &[u8]) -> io::Result<Option<Vec<u8>>> {
        Ok(self.map.read().get(key).cloned())
    }

    fn scan_keys(&self, prefix: &[u8]) -> io::Result<Vec<Vec<u8>>> {
        Ok(self
            .map
            .read()
            .range(prefix.to_vec()..)
            .take_while(|(k, _)| k.starts_with(prefix))
            .map(|(k, _)| k.clone())
            .collect())
    }
}

/// One file per key, named by the hex encoding of the key. Writes go to a
/// temporary file first and are moved into place.
#[derive(Debug)]
pub struct DiskBackend {
    dir: PathBuf,
    tmp_counter: AtomicU64,
}

impl DiskBackend {
    pub fn open(dir: impl AsRef<Path>) -> io::Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        fs::create_dir_all(dir.join("tmp"))?;
        Ok(Self { dir, tmp_counter: AtomicU64::new(0) })
    }

    fn path(&self, key: &[u8]) -> PathBuf {
        self.dir.join(hex::encode(key))
    }

    fn write_tmp(&self, value: &[u8]) -> io::Result<PathBuf> {
        let n = self.tmp_counter.fetch_add(1, Ordering::Relaxed);
        let tmp = self.dir.join("tmp").join(format!("{}-{n}", std::process::id()));
        fs::write(&tmp, value)?;
        Ok(tmp)
    }
}

impl Backend for DiskBackend {
    fn put(&self, key: &[u8], value: &[u8]) -> io::Result<()> {
        let tmp = self.write_tmp(value)?;
        fs::rename(tmp, self.path(key))
    }

    fn put_if_absent(&self, key: &[u8], value: &[u8]) -> io::Result<bool> {
        let tmp = self.write_tmp(value)?;
        // hard_link fails if the destination exists, which makes this atomic.
        let res = fs::hard_link(&tmp, self.path(key));
        fs::remove_file(&tmp)?;
        match res {
            Ok(()) => Ok(true),
            Err(e) if e.kind() == io::ErrorKind::AlreadyExists => Ok(false),
            Err(e) => Err(e),
        }
    }

    fn get(&self, key: &[u8]) -> io::Result<Option<Vec<u8>>> {
        match fs::read(self.path(key)) {
            Ok(v) => Ok(Some(v)),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e),
        }
    }

    fn scan_keys(&self, prefix: &[u8]) -> io::Result<Vec<Vec<u8>>> {
        let hex_prefix = hex::encode(prefix);
        let mut keys = Vec::new();
        for entry in fs::read_dir(&self.dir)? {
            let name = entry?.file_name();
            let Some(name) = name.to_str() else { continue };
            if name.starts_with(&hex_prefix) {
                if let Ok(k) = hex::decode(name) {
                    keys.push(k);
                }
            }
        }
        keys.sort();
        Ok(keys)
    }
}
