use crate::crypto::{sha256, Digest, PublicKey, SignatureBytes, SigningKey, SIGNATURE_LEN};
use crate::streamio::StreamMeta;
use crate::types::StreamId;
use crate::wire::{Reader, WireError, Writer};

/// Domain separator for transaction signatures.
pub const TX_SIG_TAG: &[u8] = b"droplet/tx";

pub const TAG_DEVICE_PAIR: u8 = 1;
pub const TAG_STREAM_REGISTER: u8 = 2;
pub const TAG_PERMISSION_UPDATE: u8 = 3;
pub const TAG_IMMUTABILITY_ANCHOR: u8 = 4;
pub const TAG_OWNERSHIP_TRANSFER: u8 = 5;

/// Binds a device key to an owner; signed by both.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DevicePair {
    pub owner_pub: PublicKey,
    pub device_pub: PublicKey,
    pub nonce: u64,
    pub owner_sig: SignatureBytes,
    pub device_sig: SignatureBytes,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StreamRegister {
    pub meta: StreamMeta,
    pub acl_hash: Digest,
    pub owner_pub: PublicKey,
    pub sig: SignatureBytes,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PermissionUpdate {
    pub stream_id: StreamId,
    /// Must be one more than the stream's previous update sequence number.
    pub seq: u64,
    pub acl_hash: Digest,
    pub kd_generation: u32,
    pub signer_pub: PublicKey,
    pub sig: SignatureBytes,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImmutabilityAnchor {
    pub stream_id: StreamId,
    pub counter: u64,
    pub digest: Digest,
    /// The stream owner or its producer device.
    pub signer_pub: PublicKey,
    pub sig: SignatureBytes,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OwnershipTransfer {
    pub stream_id: StreamId,
    pub seq: u64,
    pub current_owner_pub: PublicKey,
    pub new_owner_pub: PublicKey,
    pub current_sig: SignatureBytes,
    pub new_sig: SignatureBytes,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Tx {
    DevicePair(DevicePair),
    StreamRegister(StreamRegister),
    PermissionUpdate(PermissionUpdate),
    ImmutabilityAnchor(ImmutabilityAnchor),
    OwnershipTransfer(OwnershipTransfer),
}

fn signing_digest(tag: u8, unsigned: &[u8]) -> Digest {
    sha256(&[TX_SIG_TAG, &[tag], unsigned])
}

impl DevicePair {
    fn unsigned(&self) -> Vec<u8> {
        let mut w = Writer::with_capacity(74);
        w.pubkey(&self.owner_pub).pubkey(&self.device_pub).u64(self.nonce);
        w.finish()
    }
}

impl StreamRegister {
    fn unsigned(&self) -> Vec<u8> {
        let mut w = Writer::with_capacity(195);
        self.meta.write_to(&mut w);
        w.bytes(&self.acl_hash).pubkey(&self.owner_pub);
        w.finish()
    }
}

impl PermissionUpdate {
    fn unsigned(&self) -> Vec<u8> {
        let mut w = Writer::with_capacity(109);
        w.bytes(self.stream_id.as_bytes())
            .u64(self.seq)
            .bytes(&self.acl_hash)
            .u32(self.kd_generation)
            .pubkey(&self.signer_pub);
        w.finish()
    }
}

impl ImmutabilityAnchor {
    fn unsigned(&self) -> Vec<u8> {
        let mut w = Writer::with_capacity(105);
        w.bytes(self.stream_id.as_bytes()).u64(self.counter).bytes(&self.digest).pubkey(&self.signer_pub);
        w.finish()
    }
}

impl OwnershipTransfer {
    fn unsigned(&self) -> Vec<u8> {
        let mut w = Writer::with_capacity(106);
        w.bytes(self.stream_id.as_bytes())
            .u64(self.seq)
            .pubkey(&self.current_owner_pub)
            .pubkey(&self.new_owner_pub);
        w.finish()
    }
}

impl Tx {
    pub fn device_pair(owner: &SigningKey, device: &SigningKey, nonce: u64) -> Self {
        let mut body = DevicePair {
            owner_pub: owner.public_key(),
            device_pub: device.public_key(),
            nonce,
            owner_sig: [0; SIGNATURE_LEN],
            device_sig: [0; SIGNATURE_LEN],
        };
        let msg = signing_digest(TAG_DEVICE_PAIR, &body.unsigned());
        body.owner_sig = owner.sign(&msg);
        body.device_sig = device.sign(&msg);
        Tx::DevicePair(body)
    }

    pub fn register_stream(meta: StreamMeta, acl_hash: Digest, owner: &SigningKey) -> Self {
        let mut body = StreamRegister { meta, acl_hash, owner_pub: owner.public_key(), sig: [0; SIGNATURE_LEN] };
        body.sig = owner.sign(&signing_digest(TAG_STREAM_REGISTER, &body.unsigned()));
        Tx::StreamRegister(body)
    }

    pub fn permission_update(
        stream_id: StreamId,
        seq: u64,
        acl_hash: Digest,
        kd_generation: u32,
        signer: &SigningKey,
    ) -> Self {
        let mut body = PermissionUpdate {
            stream_id,
            seq,
            acl_hash,
            kd_generation,
            signer_pub: signer.public_key(),
            sig: [0; SIGNATURE_LEN],
        };
        body.sig = signer.sign(&signing_digest(TAG_PERMISSION_UPDATE, &body.unsigned()));
        Tx::PermissionUpdate(body)
    }

    pub fn anchor(stream_id: StreamId, counter: u64, digest: Digest, signer: &SigningKey) -> Self {
        let mut body = ImmutabilityAnchor {
            stream_id,
            counter,
            digest,
            signer_pub: signer.public_key(),
            sig: [0; SIGNATURE_LEN],
        };
        body.sig = signer.sign(&signing_digest(TAG_IMMUTABILITY_ANCHOR, &body.unsigned()));
        Tx::ImmutabilityAnchor(body)
    }

    pub fn ownership_transfer(stream_id: StreamId, seq: u64, current: &SigningKey, new: &SigningKey) -> Self {
        let mut body = OwnershipTransfer {
            stream_id,
            seq,
            current_owner_pub: current.public_key(),
            new_owner_pub: new.public_key(),
            current_sig: [0; SIGNATURE_LEN],
            new_sig: [0; SIGNATURE_LEN],
        };
        let msg = signing_digest(TAG_OWNERSHIP_TRANSFER, &body.unsigned());
        body.current_sig = current.sign(&msg);
        body.new_sig = new.sign(&msg);
        Tx::OwnershipTransfer(body)
    }

    pub fn tag(&self) -> u8 {
        match self {
            Tx::DevicePair(_) => TAG_DEVICE_PAIR,
            Tx::StreamRegister(_) => TAG_STREAM_REGISTER,
            Tx::PermissionUpdate(_) => TAG_PERMISSION_UPDATE,
            Tx::ImmutabilityAnchor(_) => TAG_IMMUTABILITY_ANCHOR,
            Tx::OwnershipTransfer(_) => TAG_OWNERSHIP_TRANSFER,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Tx::DevicePair(_) => "device-pair",
            Tx::StreamRegister(_) => "stream-register",
            Tx::PermissionUpdate(_) => "permission-update",
            Tx::ImmutabilityAnchor(_) => "immutability-anchor",
            Tx::OwnershipTransfer(_) => "ownership-transfer",
        }
    }

    /// Stream the transaction refers to, if any.
    pub fn stream_id(&self) -> Option<StreamId> {
        match self {
            Tx::DevicePair(_) => None,
            Tx::StreamRegister(t) => Some(t.meta.stream_id),
            Tx::PermissionUpdate(t) => Some(t.stream_id),
            Tx::ImmutabilityAnchor(t) => Some(t.stream_id),
            Tx::OwnershipTransfer(t) => Some(t.stream_id),
        }
    }

    /// True iff every signature the variant carries verifies.
    pub fn signatures_valid(&self) -> bool {
        match self {
            Tx::DevicePair(t) => {
                let msg = signing_digest(TAG_DEVICE_PAIR, &t.unsigned());
                t.owner_pub.verify(&msg, &t.owner_sig) && t.device_pub.verify(&msg, &t.device_sig)
            }
            Tx::StreamRegister(t) => {
                t.owner_pub.verify(&signing_digest(TAG_STREAM_REGISTER, &t.unsigned()), &t.sig)
            }
            Tx::PermissionUpdate(t) => {
                t.signer_pub.verify(&signing_digest(TAG_PERMISSION_UPDATE, &t.unsigned()), &t.sig)
            }
            Tx::ImmutabilityAnchor(t) => {
                t.signer_pub.verify(&signing_digest(TAG_IMMUTABILITY_ANCHOR, &t.unsigned()), &t.sig)
            }
            Tx::OwnershipTransfer(t) => {
                let msg = signing_digest(TAG_OWNERSHIP_TRANSFER, &t.unsigned());
                t.current_owner_pub.verify(&msg, &t.current_sig) && t.new_owner_pub.verify(&msg, &t.new_sig)
            }
        }
    }

    fn body(&self) -> Vec<u8> {
        let (mut body, sigs): (Vec<u8>, Vec<&SignatureBytes>) = match self {
            Tx::DevicePair(t) => (t.unsigned(), vec![&t.owner_sig, &t.device_sig]),
            Tx::StreamRegister(t) => (t.unsigned(), vec![&t.sig]),
            Tx::PermissionUpdate(t) => (t.unsigned(), vec![&t.sig]),
            Tx::ImmutabilityAnchor(t) => (t.unsigned(), vec![&t.sig]),
            Tx::OwnershipTransfer(t) => (t.unsigned(), vec![&t.current_sig, &t.new_sig]),
        };
        for s in sigs {
            body.extend_from_slice(s);
        }
        body
    }

    /// `tag u8 || len u32 || body`
    pub fn canonical_bytes(&self) -> Vec<u8> {
        let body = self.body();
        let mut w = Writer::with_capacity(5 + body.len());
        w.u8(self.tag()).var_bytes(&body);
        w.finish()
    }

    pub fn txid(&self) -> Digest {
        sha256(&[&self.canonical_bytes()])
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, WireError> {
        let mut outer = Reader::new(bytes);
        let tag = outer.u8()?;
        let mut r = Reader::new(outer.var_bytes()?);
        outer.finish()?;
        let tx = match tag {
            TAG_DEVICE_PAIR => Tx::DevicePair(DevicePair {
                owner_pub: r.pubkey()?,
                device_pub: r.pubkey()?,
                nonce: r.u64()?,
                owner_sig: r.array()?,
                device_sig: r.array()?,
            }),
            TAG_STREAM_REGISTER => Tx::StreamRegister(StreamRegister {
                meta: StreamMeta::read_from(&mut r)?,
                acl_hash: r.array()?,
                owner_pub: r.pubkey()?,
                sig: r.array()?,
            }),
            TAG_PERMISSION_UPDATE => Tx::PermissionUpdate(PermissionUpdate {
                stream_id: StreamId(r.array()?),
                seq: r.u64()?,
                acl_hash: r.array()?,
                kd_generation: r.u32()?,
                signer_pub: r.pubkey()?,
                sig: r.array()?,
            }),
            TAG_IMMUTABILITY_ANCHOR => Tx::ImmutabilityAnchor(ImmutabilityAnchor {
                stream_id: StreamId(r.array()?),
                counter: r.u64()?,
                digest: r.array()?,
                signer_pub: r.pubkey()?,
                sig: r.array()?,
            }),
            TAG_OWNERSHIP_TRANSFER => Tx::OwnershipTransfer(OwnershipTransfer {
                stream_id: StreamId(r.array()?),
                seq: r.u64()?,
                current_owner_pub: r.pubkey()?,
                new_owner_pub: r.pubkey()?,
                current_sig: r.array()?,
                new_sig: r.array()?,
            }),
            _ => return Err(WireError::Invalid("transaction tag")),
        };
        r.finish()?;
        Ok(tx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn keys() -> (SigningKey, SigningKey) {
        let owner = SigningKey::from_bytes(&[0x01; 32]).unwrap();
        let device = SigningKey::from_bytes(&[0x02; 32]).unwrap();
        (owner, device)
    }

    pub(crate) fn sample_meta(owner: &SigningKey, device: &SigningKey) -> StreamMeta {
        StreamMeta {
            stream_id: StreamId::derive(&owner.public_key().address(), "hr"),
            owner_addr: owner.public_key().address(),
            producer_pub: device.public_key(),
            t0: 1_600_000_000_000,
            delta: 3_600_000,
            tree_depth: 30,
            chain_length: 1 << 20,
            grace_period: 24,
        }
    }

    fn all_variants() -> Vec<Tx> {
        let (owner, device) = keys();
        let meta = sample_meta(&owner, &device);
        let sid = meta.stream_id;
        vec![
            Tx::device_pair(&owner, &device, 7),
            Tx::register_stream(meta, [0xAB; 32], &owner),
            Tx::permission_update(sid, 1, [0xCD; 32], 2, &owner),
            Tx::anchor(sid, 32, [0xEF; 32], &device),
            Tx::ownership_transfer(sid, 2, &owner, &device),
        ]
    }

    #[test]
    fn roundtrip_every_variant() {
        for tx in all_variants() {
            assert!(tx.signatures_valid(), "{}", tx.kind());
            let bytes = tx.canonical_bytes();
            assert_eq!(bytes[0], tx.tag());
            assert_eq!(u32::from_be_bytes(bytes[1..5].try_into().unwrap()) as usize, bytes.len() - 5);
            assert_eq!(Tx::from_bytes(&bytes).unwrap(), tx);
        }
    }

    #[test]
    fn body_lengths() {
        let lens: Vec<usize> = all_variants().iter().map(|t| t.canonical_bytes().len() - 5).collect();
        assert_eq!(lens, vec![33 + 33 + 8 + 128, 130 + 32 + 33 + 64, 32 + 8 + 32 + 4 + 33 + 64, 32 + 8 + 32 + 33 + 64, 32 + 8 + 66 + 128]);
    }

    #[test]
    fn golden_txids() {
        // ECDSA signing is deterministic, so these are stable across runs.
        let ids: Vec<String> = all_variants().iter().map(|t| hex::encode(t.txid())).collect();
        assert_eq!(ids, GOLDEN_TXIDS);
    }

    const GOLDEN_TXIDS: [&str; 5] = [
        "b6eeda7bb20ec09f288782df0e3892643a60df54adf3efba574d51cd29d7363f",
        "d9aafc68c9c4c60fdba678ad251fc02ad06ca8be21435ec2874b9b0679c049a1",
        "e6e27e03c74d3811ba5de3136992b230e7a81b14233350baef549a2cf8458a5d",
        "079017c50a7787997bc073d25e30c8c7a225b1c8a0e4ec986837b8aa234ce2aa",
        "ad6d24cd94df79c8a12062a9408c84d732a0fa8d03dae852ec900681f0e720d6",
    ];

    #[test]
    fn decoding_rejects_garbage() {
        let bytes = all_variants()[2].canonical_bytes();
        assert!(Tx::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Tx::from_bytes(&extra).is_err());
        let mut bad_tag = bytes.clone();
        bad_tag[0] = 9;
        assert!(Tx::from_bytes(&bad_tag).is_err());
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(1);
        for _ in 0..200 {
            let junk: [u8; 64] = crate::crypto::random_bytes(&mut rng);
            let _ = Tx::from_bytes(&junk);
        }
    }

    #[test]
    fn mutation_breaks_signature() {
        let Tx::PermissionUpdate(mut t) = all_variants().remove(2) else { unreachable!() };
        t.kd_generation += 1;
        assert!(!Tx::PermissionUpdate(t).signatures_valid());
    }
}
