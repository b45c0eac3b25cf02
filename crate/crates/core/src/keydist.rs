//! Key distribution: per-epoch lockboxes carrying the current main token,
//! per-principal encrypted grants, and revocation by rotating the shared
//! distribution key.

use std::fmt;

use k256::ProjectivePoint;
use rand::{CryptoRng, RngCore};

use crate::crypto::{
    aead_open, aead_seal, kdf, random_bytes, sha256, AeadError, AeadNonce, Digest, InvalidKey,
    PublicKey, SignatureBytes, SigningKey,
};
use crate::keyregression::{MainToken, SecondaryToken};
use crate::keytree::{CoverSet, KeyTreeError};
use crate::stealth::{OneTimeAddress, OneTimeSecret};
use crate::types::StreamId;
use crate::wire::{Reader, WireError, Writer};

pub const GRANT_LABEL: &[u8] = b"droplet/grant";

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum KeyDistError {
    #[error("lockbox signature does not verify")]
    BadSignature,
    #[error("distribution key generation {have} cannot open a generation {want} lockbox")]
    GenerationMismatch { have: u32, want: u32 },
    #[error(transparent)]
    Aead(#[from] AeadError),
    #[error("invalid group element")]
    InvalidPoint,
    #[error("grant is addressed to a different one-time key")]
    WrongRecipient,
    #[error("malformed token plaintext")]
    BadPlaintext,
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error(transparent)]
    Cover(#[from] KeyTreeError),
}

impl From<InvalidKey> for KeyDistError {
    fn from(_: InvalidKey) -> Self {
        KeyDistError::InvalidPoint
    }
}

/// The shared key that opens lockboxes; rotated on every revocation.
#[derive(Clone, PartialEq, Eq)]
pub struct DistributionKey {
    pub key: [u8; 32],
    pub generation: u32,
}

impl fmt::Debug for DistributionKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "DistributionKey(gen {})", self.generation)
    }
}

impl DistributionKey {
    pub fn generate<R: RngCore + CryptoRng>(rng: &mut R) -> Self {
        Self { key: random_bytes(rng), generation: 0 }
    }

    pub fn next<R: RngCore + CryptoRng>(&self, rng: &mut R) -> Self {
        Self { key: random_bytes(rng), generation: self.generation + 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Lockbox {
    pub stream_id: StreamId,
    pub epoch: u64,
    pub kd_generation: u32,
    pub nonce: AeadNonce,
    pub ciphertext: Vec<u8>,
    pub signature: SignatureBytes,
}

fn lockbox_aad(stream_id: &StreamId, epoch: u64, generation: u32) -> Vec<u8> {
    let mut w = Writer::with_capacity(44);
    w.bytes(stream_id.as_bytes()).u64(epoch).u32(generation);
    w.finish()
}

/// Well-known storage key of the lockbox for `epoch`.
pub fn lockbox_storage_key(stream_id: &StreamId, epoch: u64) -> Digest {
    sha256(&[stream_id.as_bytes(), b"lockbox", &epoch.to_be_bytes()])
}

impl Lockbox {
    fn signed_part(&self) -> Vec<u8> {
        let mut w = Writer::with_capacity(64 + self.ciphertext.len());
        w.bytes(self.stream_id.as_bytes())
            .u64(self.epoch)
            .u32(self.kd_generation)
            .bytes(&self.nonce)
            .var_bytes(&self.ciphertext);
        w.finish()
    }

    /// `stream_id(32) || epoch u64 || generation u32 || nonce(12) || ct_len u32 || ct || sig(64)`
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = self.signed_part();
        out.extend_from_slice(&self.signature);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, KeyDistError> {
        let mut r = Reader::new(bytes);
        let lb = Lockbox {
            stream_id: StreamId(r.array()?),
            epoch: r.u64()?,
            kd_generation: r.u32()?,
            nonce: r.array()?,
            ciphertext: r.var_bytes()?.to_vec(),
            signature: r.array()?,
        };
        r.finish()?;
        Ok(lb)
    }

    pub fn verify(&self, signer: &PublicKey) -> bool {
        signer.verify(&self.signed_part(), &self.signature)
    }

    pub fn storage_key(&self) -> Digest {
        lockbox_storage_key(&self.stream_id, self.epoch)
    }
}

pub fn seal_lockbox<R: RngCore + CryptoRng>(
    kd: &DistributionKey,
    token: &MainToken,
    stream_id: &StreamId,
    signer: &SigningKey,
    rng: &mut R,
) -> Lockbox {
    let nonce = random_bytes(rng);
    let aad = lockbox_aad(stream_id, token.index, kd.generation);
    let ciphertext = aead_seal(&kd.key, &nonce, &aad, &token.value);
    let mut lb = Lockbox {
        stream_id: *stream_id,
        epoch: token.index,
        kd_generation: kd.generation,
        nonce,
        ciphertext,
        signature: [0; 64],
    };
    lb.signature = signer.sign(&lb.signed_part());
    lb
}

pub fn open_lockbox(
    kd: &DistributionKey,
    lockbox: &Lockbox,
    signer: &PublicKey,
) -> Result<MainToken, KeyDistError> {
    if !lockbox.verify(signer) {
        return Err(KeyDistError::BadSignature);
    }
    if kd.generation != lockbox.kd_generation {
        return Err(KeyDistError::GenerationMismatch {
            have: kd.generation,
            want: lockbox.kd_generation,
        });
    }
    let aad = lockbox_aad(&lockbox.stream_id, lockbox.epoch, lockbox.kd_generation);
    let plain = aead_open(&kd.key, &lockbox.nonce, &aad, &lockbox.ciphertext)?;
    let value: Digest = plain.try_into().map_err(|_| KeyDistError::BadPlaintext)?;
    Ok(MainToken { index: lockbox.epoch, value })
}

/// Keying material encrypted to a one-time address with an ephemeral
/// Diffie-Hellman exchange, HKDF and AES-256-GCM.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncryptedGrant {
    pub recipient: PublicKey,
    pub ephemeral_pub: PublicKey,
    pub nonce: AeadNonce,
    pub ciphertext: Vec<u8>,
}

impl EncryptedGrant {
    pub fn write_to(&self, w: &mut Writer) {
        w.pubkey(&self.recipient)
            .pubkey(&self.ephemeral_pub)
            .bytes(&self.nonce)
            .var_bytes(&self.ciphertext);
    }

    pub fn read_from(r: &mut Reader<'_>) -> Result<Self, WireError> {
        Ok(Self {
            recipient: r.pubkey()?,
            ephemeral_pub: r.pubkey()?,
            nonce: r.array()?,
            ciphertext: r.var_bytes()?.to_vec(),
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        self.write_to(&mut w);
        w.finish()
    }
}

fn grant_key(shared: &ProjectivePoint, ephemeral: &PublicKey, recipient: &PublicKey) -> Result<[u8; 32], KeyDistError> {
    let shared = k256::PublicKey::from_affine(shared.to_affine()).map_err(|_| KeyDistError::InvalidPoint)?;
    let shared = PublicKey::from_point(&shared);
    let ikm = [shared.as_bytes().as_slice(), ephemeral.as_bytes(), recipient.as_bytes()].concat();
    Ok(kdf(&ikm, GRANT_LABEL, &[]))
}

fn grant_aad(recipient: &PublicKey, ephemeral: &PublicKey) -> Vec<u8> {
    [recipient.as_bytes().as_slice(), ephemeral.as_bytes()].concat()
}

pub fn encrypt_grant<R: RngCore + CryptoRng>(
    payload: &[u8],
    recipient: &PublicKey,
    rng: &mut R,
) -> Result<EncryptedGrant, KeyDistError> {
    let eph = k256::NonZeroScalar::random(&mut *rng);
    let ephemeral_pub = PublicKey::from_point(&k256::PublicKey::from_secret_scalar(&eph));
    let shared = recipient.to_point().to_projective() * *eph;
    let key = grant_key(&shared, &ephemeral_pub, recipient)?;
    let nonce = random_bytes(rng);
    let ciphertext = aead_seal(&key, &nonce, &grant_aad(recipient, &ephemeral_pub), payload);
    Ok(EncryptedGrant { recipient: *recipient, ephemeral_pub, nonce, ciphertext })
}

pub fn decrypt_grant(grant: &EncryptedGrant, secret: &OneTimeSecret) -> Result<Vec<u8>, KeyDistError> {
    if secret.public() != grant.recipient {
        return Err(KeyDistError::WrongRecipient);
    }
    let shared = grant.ephemeral_pub.to_point().to_projective() * **secret.scalar();
    let key = grant_key(&shared, &grant.ephemeral_pub, &grant.recipient)?;
    let aad = grant_aad(&grant.recipient, &grant.ephemeral_pub);
    Ok(aead_open(&key, &grant.nonce, &aad, &grant.ciphertext)?)
}

/// Subscription part of a grant: `start u64 || h'_start(32) || KD(32)`.
#[derive(Clone, PartialEq, Eq)]
pub struct SubscriptionGrant {
    pub start_token: SecondaryToken,
    pub kd: [u8; 32],
}

impl fmt::Debug for SubscriptionGrant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "SubscriptionGrant(from {})", self.start_token.index)
    }
}

impl SubscriptionGrant {
    pub const LEN: usize = 72;

    pub fn distribution_key(&self, generation: u32) -> DistributionKey {
        DistributionKey { key: self.kd, generation }
    }

    pub fn to_bytes(&self) -> [u8; Self::LEN] {
        let mut out = [0u8; Self::LEN];
        out[..8].copy_from_slice(&self.start_token.index.to_be_bytes());
        out[8..40].copy_from_slice(&self.start_token.value);
        out[40..].copy_from_slice(&self.kd);
        out
    }

    pub fn read_from(r: &mut Reader<'_>) -> Result<Self, WireError> {
        let index = r.u64()?;
        let value = r.array()?;
        let kd = r.array()?;
        Ok(Self { start_token: SecondaryToken { index, value }, kd })
    }
}

const HAS_COVER: u8 = 0x01;
const HAS_SUBSCRIPTION: u8 = 0x02;

/// Plaintext of an ACL grant: a cover set for past intervals and/or a
/// subscription.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct GrantPayload {
    pub cover: Option<CoverSet>,
    pub subscription: Option<SubscriptionGrant>,
}

impl GrantPayload {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        let flags = (self.cover.is_some() as u8 * HAS_COVER)
            | (self.subscription.is_some() as u8 * HAS_SUBSCRIPTION);
        w.u8(flags);
        if let Some(cover) = &self.cover {
            cover.write_to(&mut w);
        }
        if let Some(sub) = &self.subscription {
            w.bytes(&sub.to_bytes());
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8], stream_id: StreamId) -> Result<Self, KeyDistError> {
        let mut r = Reader::new(bytes);
        let flags = r.u8()?;
        if flags & !(HAS_COVER | HAS_SUBSCRIPTION) != 0 {
            return Err(WireError::Invalid("grant flags").into());
        }
        let cover = if flags & HAS_COVER != 0 {
            Some(CoverSet::read_from(&mut r, stream_id)?)
        } else {
            None
        };
        let subscription = if flags & HAS_SUBSCRIPTION != 0 {
            Some(SubscriptionGrant::read_from(&mut r)?)
        } else {
            None
        };
        r.finish()?;
        Ok(Self { cover, subscription })
    }
}

/// Draw KD' and re-encrypt every remaining subscriber's payload with it. The
/// revoked principal is simply absent from `remaining`.
pub fn rotate_kd<R: RngCore + CryptoRng>(
    current: &DistributionKey,
    remaining: &[(OneTimeAddress, GrantPayload)],
    rng: &mut R,
) -> Result<(DistributionKey, Vec<EncryptedGrant>), KeyDistError> {
    let next = current.next(rng);
    let mut grants = Vec::with_capacity(remaining.len());
    for (addr, payload) in remaining {
        let mut payload = payload.clone();
        if let Some(sub) = payload.subscription.as_mut() {
            sub.kd = next.key;
        }
        grants.push(encrypt_grant(&payload.to_bytes(), &addr.address, rng)?);
    }
    Ok((next, grants))
}
