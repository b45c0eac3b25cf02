//! Dual-key stealth addresses over secp256k1.
//!
//! A principal publishes a main key `PK_m = SK_m·G` and a view key
//! `PK_v = SK_v·G`. A grantor picks a fresh scalar `r`, publishes `R = r·G`
//! and grants to `P = H_s(r·PK_v)·G + PK_m`. Anyone holding `SK_v` can detect
//! the grant because `SK_v·R = r·PK_v`; only a holder of both secrets can
//! compute `SK_new = H_s(SK_v·R) + SK_m` with `SK_new·G = P`.

use std::fmt;

use k256::elliptic_curve::ops::Reduce;
use k256::elliptic_curve::PrimeField;
use k256::{FieldBytes, NonZeroScalar, ProjectivePoint, Scalar, U256};
use rand::{CryptoRng, RngCore};

use crate::crypto::{sha256, PublicKey, SigningKey, PUBKEY_LEN};
use crate::wire::{Reader, WireError};

pub const STEALTH_TAG: &[u8] = b"droplet/stealth";
pub const ADDRESS_LEN: usize = 2 * PUBKEY_LEN;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum StealthError {
    #[error("public key is the identity or not on the curve")]
    InvalidPoint,
    #[error("secret scalar is zero or out of range")]
    InvalidScalar,
    #[error("grant was not addressed to this principal")]
    NotRecipient,
}

fn scalar_from_bytes(bytes: &[u8; 32]) -> Result<NonZeroScalar, StealthError> {
    Option::<NonZeroScalar>::from(NonZeroScalar::from_repr(FieldBytes::from(*bytes)))
        .ok_or(StealthError::InvalidScalar)
}

fn point_to_key(point: &ProjectivePoint) -> Result<PublicKey, StealthError> {
    let pk = k256::PublicKey::from_affine(point.to_affine()).map_err(|_| StealthError::InvalidPoint)?;
    Ok(PublicKey::from_point(&pk))
}

fn key_to_point(key: &PublicKey) -> ProjectivePoint {
    key.to_point().to_projective()
}

/// `H_s`: SHA-256 of the tagged compressed point, reduced modulo the order.
fn shared_scalar(shared: &ProjectivePoint) -> Result<Scalar, StealthError> {
    let encoded = point_to_key(shared)?;
    let digest = sha256(&[STEALTH_TAG, encoded.as_bytes()]);
    Ok(<Scalar as Reduce<U256>>::reduce_bytes(&FieldBytes::from(digest)))
}

/// A principal's two key pairs.
#[derive(Clone)]
pub struct PrincipalKeys {
    main: NonZeroScalar,
    view: NonZeroScalar,
}

impl fmt::Debug for PrincipalKeys {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PrincipalKeys").field("public", &self.public()).finish()
    }
}

impl PrincipalKeys {
    pub fn generate<R: RngCore + CryptoRng>(rng: &mut R) -> Self {
        Self { main: NonZeroScalar::random(&mut *rng), view: NonZeroScalar::random(&mut *rng) }
    }

    pub fn from_bytes(main: &[u8; 32], view: &[u8; 32]) -> Result<Self, StealthError> {
        Ok(Self { main: scalar_from_bytes(main)?, view: scalar_from_bytes(view)? })
    }

    pub fn main_secret_bytes(&self) -> [u8; 32] {
        self.main.to_repr().into()
    }

    pub fn view_secret_bytes(&self) -> [u8; 32] {
        self.view.to_repr().into()
    }

    pub fn public(&self) -> PrincipalPublic {
        let g = ProjectivePoint::GENERATOR;
        PrincipalPublic {
            main: point_to_key(&(g * *self.main)).expect("non-zero scalar"),
            view: point_to_key(&(g * *self.view)).expect("non-zero scalar"),
        }
    }

    /// The auditor capability: view secret plus the main public key.
    pub fn view_key(&self) -> ViewKey {
        ViewKey { view: self.view, main_pub: self.public().main }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PrincipalPublic {
    pub main: PublicKey,
    pub view: PublicKey,
}

impl PrincipalPublic {
    /// `<main hex>:<view hex>`
    pub fn to_text(&self) -> String {
        format!("{}:{}", self.main, self.view)
    }

    pub fn from_text(s: &str) -> Option<Self> {
        let (m, v) = s.trim().split_once(':')?;
        Some(Self { main: PublicKey::from_hex(m).ok()?, view: PublicKey::from_hex(v).ok()? })
    }
}

/// Detection-only capability. Holds no main secret, so it can find grants but
/// never recover their one-time keys.
#[derive(Clone)]
pub struct ViewKey {
    view: NonZeroScalar,
    pub main_pub: PublicKey,
}

impl fmt::Debug for ViewKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ViewKey").field("main_pub", &self.main_pub).finish_non_exhaustive()
    }
}

impl ViewKey {
    pub fn new(view_secret: &[u8; 32], main_pub: PublicKey) -> Result<Self, StealthError> {
        Ok(Self { view: scalar_from_bytes(view_secret)?, main_pub })
    }

    pub fn view_secret_bytes(&self) -> [u8; 32] {
        self.view.to_repr().into()
    }
}

/// The grant address `P` together with the grantor's ephemeral `R`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct OneTimeAddress {
    pub address: PublicKey,
    pub ephemeral: PublicKey,
}

impl OneTimeAddress {
    pub fn to_bytes(&self) -> [u8; ADDRESS_LEN] {
        let mut out = [0u8; ADDRESS_LEN];
        out[..PUBKEY_LEN].copy_from_slice(self.address.as_bytes());
        out[PUBKEY_LEN..].copy_from_slice(self.ephemeral.as_bytes());
        out
    }

    pub fn read_from(r: &mut Reader<'_>) -> Result<Self, WireError> {
        Ok(Self { address: r.pubkey()?, ephemeral: r.pubkey()? })
    }
}

/// The recovered one-time secret `SK_new`.
#[derive(Clone)]
pub struct OneTimeSecret(NonZeroScalar);

impl fmt::Debug for OneTimeSecret {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_tuple("OneTimeSecret").field(&self.public()).finish()
    }
}

impl OneTimeSecret {
    pub fn scalar(&self) -> &NonZeroScalar {
        &self.0
    }

    pub fn public(&self) -> PublicKey {
        point_to_key(&(ProjectivePoint::GENERATOR * *self.0)).expect("non-zero scalar")
    }

    /// Signing key for authenticating to storage nodes as `P`.
    pub fn signing_key(&self) -> SigningKey {
        SigningKey::from_scalar(self.0)
    }
}

pub fn derive_onetime<R: RngCore + CryptoRng>(
    recipient: &PrincipalPublic,
    rng: &mut R,
) -> Result<OneTimeAddress, StealthError> {
    let r = NonZeroScalar::random(&mut *rng);
    let ephemeral = point_to_key(&(ProjectivePoint::GENERATOR * *r))?;
    let shared = key_to_point(&recipient.view) * *r;
    let hs = shared_scalar(&shared)?;
    let p = ProjectivePoint::GENERATOR * hs + key_to_point(&recipient.main);
    Ok(OneTimeAddress { address: point_to_key(&p)?, ephemeral })
}

fn expected_address(view: &NonZeroScalar, main_pub: &PublicKey, ephemeral: &PublicKey) -> Option<PublicKey> {
    let shared = key_to_point(ephemeral) * **view;
    let hs = shared_scalar(&shared).ok()?;
    point_to_key(&(ProjectivePoint::GENERATOR * hs + key_to_point(main_pub))).ok()
}

/// True iff `addr` was derived for the principal owning this view key.
pub fn scan(view_key: &ViewKey, addr: &OneTimeAddress) -> bool {
    expected_address(&view_key.view, &view_key.main_pub, &addr.ephemeral) == Some(addr.address)
}

pub fn recover_key(addr: &OneTimeAddress, keys: &PrincipalKeys) -> Result<OneTimeSecret, StealthError> {
    let main_pub = keys.public().main;
    if expected_address(&keys.view, &main_pub, &addr.ephemeral) != Some(addr.address) {
        return Err(StealthError::NotRecipient);
    }
    let shared = key_to_point(&addr.ephemeral) * *keys.view;
    let sk = shared_scalar(&shared)? + *keys.main;
    let sk = Option::<NonZeroScalar>::from(NonZeroScalar::new(sk)).ok_or(StealthError::InvalidScalar)?;
    Ok(OneTimeSecret(sk))
}
