//! On-disk key material. Layout under the keystore root:
//!
//! ```text
//! owner.key                    owner signing key
//! devices/<name>.key           producer device keys
//! principal.main               consumer main secret
//! principal.view               consumer view secret
//! streams/<name>.stream        owner stream state (seeds, KD, issued grants)
//! streams/<name>.registration  registration txid
//! streams/<name>.producer      producer progress: KD generation and chunk digests
//! ```
//!
//! Secrets are hex files created with mode 0600.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use droplet_core::client::OwnerStream;
use droplet_core::crypto::{Digest, SigningKey};
use droplet_core::simchain::write_secret;
use droplet_core::stealth::{PrincipalKeys, ViewKey};
use rand::rngs::OsRng;

pub struct KeyStore {
    root: PathBuf,
}

/// What a producer has already stored for a stream.
#[derive(Debug, Default, Clone, PartialEq, Eq)]
pub struct ProducerState {
    /// Distribution-key generation the published lockboxes use.
    pub kd_generation: Option<u32>,
    pub digests: BTreeMap<u64, Digest>,
}

impl ProducerState {
    fn to_text(&self) -> String {
        let mut out = String::new();
        if let Some(g) = self.kd_generation {
            out.push_str(&format!("kd-generation {g}\n"));
        }
        for (c, d) in &self.digests {
            out.push_str(&format!("{c} {}\n", hex::encode(d)));
        }
        out
    }

    fn parse(text: &str) -> Result<Self> {
        let mut s = ProducerState::default();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let (a, b) = line.split_once(' ').ok_or_else(|| anyhow!("bad producer state line {line:?}"))?;
            if a == "kd-generation" {
                s.kd_generation = Some(b.parse()?);
            } else {
                s.digests.insert(a.parse()?, decode32(b)?);
            }
        }
        Ok(s)
    }
}

fn decode32(s: &str) -> Result<[u8; 32]> {
    let bytes = hex::decode(s.trim()).context("invalid hex")?;
    bytes.try_into().map_err(|_| anyhow!("expected 32 bytes"))
}

fn check_name(name: &str) -> Result<()> {
    if name.is_empty() || !name.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_') {
        bail!("invalid name {name:?}: use letters, digits, '-' and '_'");
    }
    Ok(())
}

/// Read a hex secret written by [`write_secret`].
pub fn read_secret(path: &Path) -> Result<[u8; 32]> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    decode32(&text).with_context(|| format!("parsing {}", path.display()))
}

/// A view key file: `<view secret hex>:<main public key hex>`.
pub fn read_view_key(path: &Path) -> Result<ViewKey> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let (secret, main) = text.trim().split_once(':').ok_or_else(|| anyhow!("malformed view key file"))?;
    let main = droplet_core::crypto::PublicKey::from_hex(main).map_err(|_| anyhow!("bad main public key"))?;
    ViewKey::new(&decode32(secret)?, main).map_err(|e| anyhow!("{e}"))
}

pub fn write_view_key(path: &Path, key: &ViewKey) -> Result<()> {
    let text = format!("{}:{}\n", hex::encode(key.view_secret_bytes()), key.main_pub);
    write_secret(path, &text).with_context(|| format!("writing {}", path.display()))
}

impl KeyStore {
    pub fn open(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn file(&self, rel: &str) -> Result<PathBuf> {
        let path = self.root.join(rel);
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        }
        Ok(path)
    }

    fn new_secret(&self, rel: &str, secret: &[u8; 32], force: bool) -> Result<()> {
        let path = self.file(rel)?;
        if path.exists() && !force {
            bail!("{} already exists (use --force to replace it)", path.display());
        }
        write_secret(&path, &format!("{}\n", hex::encode(secret))).with_context(|| format!("writing {}", path.display()))
    }

    pub fn create_owner_key(&self, force: bool) -> Result<SigningKey> {
        let key = SigningKey::generate(&mut OsRng);
        self.new_secret("owner.key", &key.to_bytes(), force)?;
        Ok(key)
    }

    pub fn owner_key(&self) -> Result<SigningKey> {
        let path = self.root.join("owner.key");
        if !path.exists() {
            bail!("no owner key in {}; run `droplet owner keygen`", self.root.display());
        }
        SigningKey::from_bytes(&read_secret(&path)?).map_err(|_| anyhow!("owner key is not a valid scalar"))
    }

    /// Device key `name`, generated on first use when `create` is set.
    pub fn device_key(&self, name: &str, create: bool) -> Result<SigningKey> {
        check_name(name)?;
        let rel = format!("devices/{name}.key");
        let path = self.root.join(&rel);
        if !path.exists() {
            if !create {
                bail!("no device key {name:?}; pair it with `droplet owner pair-device --device {name}`");
            }
            let key = SigningKey::generate(&mut OsRng);
            self.new_secret(&rel, &key.to_bytes(), false)?;
            return Ok(key);
        }
        SigningKey::from_bytes(&read_secret(&path)?).map_err(|_| anyhow!("device key is not a valid scalar"))
    }

    pub fn create_principal(&self, force: bool) -> Result<PrincipalKeys> {
        let keys = PrincipalKeys::generate(&mut OsRng);
        if !force && (self.root.join("principal.main").exists() || self.root.join("principal.view").exists()) {
            bail!("principal keys already exist in {} (use --force to replace them)", self.root.display());
        }
        self.new_secret("principal.main", &keys.main_secret_bytes(), true)?;
        self.new_secret("principal.view", &keys.view_secret_bytes(), true)?;
        Ok(keys)
    }

    pub fn principal(&self) -> Result<PrincipalKeys> {
        let main = self.root.join("principal.main");
        if !main.exists() {
            bail!("no principal keys in {}; run `droplet consumer keygen`", self.root.display());
        }
        PrincipalKeys::from_bytes(&read_secret(&main)?, &read_secret(&self.root.join("principal.view"))?)
            .map_err(|e| anyhow!("{e}"))
    }

    pub fn has_stream(&self, name: &str) -> bool {
        self.root.join(format!("streams/{name}.stream")).exists()
    }

    pub fn save_stream(&self, name: &str, stream: &OwnerStream) -> Result<()> {
        check_name(name)?;
        let path = self.file(&format!("streams/{name}.stream"))?;
        write_secret(&path, &hex::encode(stream.to_bytes())).with_context(|| format!("writing {}", path.display()))
    }

    pub fn load_stream(&self, name: &str) -> Result<OwnerStream> {
        check_name(name)?;
        let path = self.root.join(format!("streams/{name}.stream"));
        if !path.exists() {
            bail!("no stream {name:?} in {}; register it first", self.root.display());
        }
        let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        let bytes = hex::decode(text.trim()).context("stream file is not hex")?;
        OwnerStream::from_bytes(&bytes).map_err(|e| anyhow!("stream file {}: {e}", path.display()))
    }

    pub fn save_registration(&self, name: &str, txid: &Digest) -> Result<()> {
        let path = self.file(&format!("streams/{name}.registration"))?;
        fs::write(&path, format!("{}\n", hex::encode(txid))).with_context(|| format!("writing {}", path.display()))
    }

    pub fn registration(&self, name: &str) -> Result<Digest> {
        let path = self.root.join(format!("streams/{name}.registration"));
        decode32(&fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?)
    }

    pub fn producer_state(&self, name: &str) -> Result<ProducerState> {
        let path = self.root.join(format!("streams/{name}.producer"));
        if !path.exists() {
            return Ok(ProducerState::default());
        }
        ProducerState::parse(&fs::read_to_string(&path)?).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn save_producer_state(&self, name: &str, state: &ProducerState) -> Result<()> {
        let path = self.file(&format!("streams/{name}.producer"))?;
        fs::write(&path, state.to_text()).with_context(|| format!("writing {}", path.display()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn secrets_roundtrip_with_private_mode() {
        let dir = tempfile::tempdir().unwrap();
        let ks = KeyStore::open(dir.path());
        assert!(ks.owner_key().is_err());
        let k = ks.create_owner_key(false).unwrap();
        assert_eq!(ks.owner_key().unwrap().to_bytes(), k.to_bytes());
        assert!(ks.create_owner_key(false).is_err());
        #[cfg(unix)]
        {
            use std::os::unix::fs::PermissionsExt;
            let mode = fs::metadata(dir.path().join("owner.key")).unwrap().permissions().mode();
            assert_eq!(mode & 0o777, 0o600);
        }
        let p = ks.create_principal(false).unwrap();
        assert_eq!(ks.principal().unwrap().public(), p.public());
        assert!(ks.device_key("../x", true).is_err());
        let d = ks.device_key("dev1", true).unwrap();
        assert_eq!(ks.device_key("dev1", false).unwrap().to_bytes(), d.to_bytes());
    }

    #[test]
    fn producer_state_text() {
        let mut s = ProducerState { kd_generation: Some(2), ..Default::default() };
        s.digests.insert(3, [7; 32]);
        s.digests.insert(10, [9; 32]);
        assert_eq!(ProducerState::parse(&s.to_text()).unwrap(), s);
        assert_eq!(ProducerState::parse("").unwrap(), ProducerState::default());
    }
}
