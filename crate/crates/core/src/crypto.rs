//! Shared primitives: SHA-256, the HKDF-based KDF, AES-256-GCM and ECDSA over
//! secp256k1.
//!
//! Everything above this module speaks in terms of 32-byte digests, 33-byte
//! compressed public keys and 64-byte signatures.

use std::fmt;

use aes_gcm::aead::{Aead, KeyInit, Payload};
use aes_gcm::{Aes256Gcm, Key, Nonce};
use hkdf::Hkdf;
use k256::ecdsa::signature::{Signer, Verifier};
use k256::elliptic_curve::sec1::ToEncodedPoint;
use rand::{CryptoRng, RngCore};
use sha2::{Digest as _, Sha256};

/// Length of every digest, key and seed handled by the stack.
pub const DIGEST_LEN: usize = 32;
pub const NONCE_LEN: usize = 12;
pub const TAG_LEN: usize = 16;
pub const PUBKEY_LEN: usize = 33;
pub const SIGNATURE_LEN: usize = 64;

pub type Digest = [u8; DIGEST_LEN];
pub type AeadNonce = [u8; NONCE_LEN];
pub type SignatureBytes = [u8; SIGNATURE_LEN];

/// SHA-256 over the concatenation of `parts`.
pub fn sha256(parts: &[&[u8]]) -> Digest {
    let mut hasher = Sha256::new();
    for part in parts {
        hasher.update(part);
    }
    hasher.finalize().into()
}

/// HKDF-SHA256 (no salt) with `info = label || context`, 32 bytes of output.
pub fn kdf(ikm: &[u8], label: &[u8], context: &[u8]) -> [u8; 32] {
    let hk = Hkdf::<Sha256>::new(None, ikm);
    let mut info = Vec::with_capacity(label.len() + context.len());
    info.extend_from_slice(label);
    info.extend_from_slice(context);
    let mut okm = [0u8; 32];
    hk.expand(&info, &mut okm)
        .expect("32 bytes is a valid HKDF-SHA256 output length");
    okm
}

pub fn random_bytes<const N: usize, R: RngCore + CryptoRng>(rng: &mut R) -> [u8; N] {
    let mut out = [0u8; N];
    rng.fill_bytes(&mut out);
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
#[error("authenticated decryption failed")]
pub struct AeadError;

/// AES-256-GCM encryption; output is ciphertext followed by the 16-byte tag.
pub fn aead_seal(key: &[u8; 32], nonce: &AeadNonce, aad: &[u8], plaintext: &[u8]) -> Vec<u8> {
    let cipher = Aes256Gcm::new(Key::<Aes256Gcm>::from_slice(key));
    cipher
        .encrypt(Nonce::from_slice(nonce), Payload { msg: plaintext, aad })
        .expect("AES-GCM encryption of an in-memory buffer cannot fail")
}

pub fn aead_open(
    key: &[u8; 32],
    nonce: &AeadNonce,
    aad: &[u8],
    ciphertext: &[u8],
) -> Result<Vec<u8>, AeadError> {
    let cipher = Aes256Gcm::new(Key::<Aes256Gcm>::from_slice(key));
    cipher
        .decrypt(Nonce::from_slice(nonce), Payload { msg: ciphertext, aad })
        .map_err(|_| AeadError)
}

/// A 33-byte SEC1-compressed secp256k1 point.
///
/// Construction through [`PublicKey::from_bytes`] guarantees the bytes decode
/// to a valid non-identity point.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PublicKey([u8; PUBKEY_LEN]);

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
#[error("invalid public key encoding")]
pub struct InvalidKey;

impl PublicKey {
    /// Smallest possible encoding; not a valid point, only a range bound.
    pub(crate) const MIN: PublicKey = PublicKey([0; PUBKEY_LEN]);

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, InvalidKey> {
        let point = k256::PublicKey::from_sec1_bytes(bytes).map_err(|_| InvalidKey)?;
        Ok(Self::from_point(&point))
    }

    pub fn from_point(point: &k256::PublicKey) -> Self {
        let encoded = point.to_encoded_point(true);
        let mut out = [0u8; PUBKEY_LEN];
        out.copy_from_slice(encoded.as_bytes());
        Self(out)
    }

    pub fn from_hex(s: &str) -> Result<Self, InvalidKey> {
        let bytes = hex::decode(s.trim()).map_err(|_| InvalidKey)?;
        Self::from_bytes(&bytes)
    }

    pub fn as_bytes(&self) -> &[u8; PUBKEY_LEN] {
        &self.0
    }

    pub fn to_point(&self) -> k256::PublicKey {
        k256::PublicKey::from_sec1_bytes(&self.0).expect("validated at construction")
    }

    /// The hash of the key, used as an on-chain pseudo-identity.
    pub fn address(&self) -> Digest {
        sha256(&[&self.0])
    }

    pub fn verify(&self, message: &[u8], signature: &SignatureBytes) -> bool {
        let Ok(sig) = k256::ecdsa::Signature::from_slice(signature) else {
            return false;
        };
        let Ok(vk) = k256::ecdsa::VerifyingKey::from_sec1_bytes(&self.0) else {
            return false;
        };
        vk.verify(message, &sig).is_ok()
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }
}

impl fmt::Debug for PublicKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "PublicKey({})", &self.to_hex()[..16])
    }
}

impl fmt::Display for PublicKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

/// ECDSA/secp256k1 signing key with RFC 6979 deterministic nonces.
#[derive(Clone)]
pub struct SigningKey(k256::ecdsa::SigningKey);

impl SigningKey {
    pub fn generate<R: RngCore + CryptoRng>(rng: &mut R) -> Self {
        Self(k256::ecdsa::SigningKey::random(rng))
    }

    pub fn from_bytes(secret: &[u8; 32]) -> Result<Self, InvalidKey> {
        k256::ecdsa::SigningKey::from_bytes(secret.into())
            .map(Self)
            .map_err(|_| InvalidKey)
    }

    pub fn from_scalar(scalar: k256::NonZeroScalar) -> Self {
        Self(k256::ecdsa::SigningKey::from(scalar))
    }

    pub fn to_bytes(&self) -> [u8; 32] {
        self.0.to_bytes().into()
    }

    pub fn public_key(&self) -> PublicKey {
        PublicKey::from_point(&k256::PublicKey::from(self.0.verifying_key()))
    }

    pub fn sign(&self, message: &[u8]) -> SignatureBytes {
        let sig: k256::ecdsa::Signature = self.0.sign(message);
        sig.to_bytes().into()
    }
}

impl fmt::Debug for SigningKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_tuple("SigningKey").field(&self.public_key()).finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn kdf_matches_rfc5869_shape() {
        // HKDF-SHA256, salt absent, 32-byte okm: a single HMAC block.
        let a = kdf(b"ikm", b"droplet/dek", &[0u8; 32]);
        let b = kdf(b"ikm", b"droplet/sek", &[0u8; 32]);
        assert_ne!(a, b);
        assert_eq!(a, kdf(b"ikm", b"droplet/dek", &[0u8; 32]));
    }

    #[test]
    fn aead_roundtrip_and_aad_binding() {
        let key = [7u8; 32];
        let nonce = [1u8; 12];
        let ct = aead_seal(&key, &nonce, b"aad", b"hello");
        assert_eq!(ct.len(), 5 + TAG_LEN);
        assert_eq!(aead_open(&key, &nonce, b"aad", &ct).unwrap(), b"hello");
        assert_eq!(aead_open(&key, &nonce, b"other", &ct), Err(AeadError));
    }

    #[test]
    fn signatures_are_deterministic_and_bound_to_key() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let sk = SigningKey::generate(&mut rng);
        let other = SigningKey::generate(&mut rng);
        let sig = sk.sign(b"msg");
        assert_eq!(sig, sk.sign(b"msg"));
        assert!(sk.public_key().verify(b"msg", &sig));
        assert!(!other.public_key().verify(b"msg", &sig));
        assert!(!sk.public_key().verify(b"msh", &sig));
    }

    #[test]
    fn public_key_rejects_garbage() {
        assert!(PublicKey::from_bytes(&[0u8; 33]).is_err());
        assert!(PublicKey::from_bytes(&[2u8; 5]).is_err());
    }
}
