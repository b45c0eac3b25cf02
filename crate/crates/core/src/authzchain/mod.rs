//! Transactions and the access-control state machine replayed from the chain.
//!
//! The chain carries only hashes of ACL documents; the documents themselves
//! live in a content-addressed store and are fetched and hash-checked while
//! replaying. A permission update replaces a stream's whole ACL, so
//! revocation is an update that omits the principal.

mod acl;
mod state;
mod tx;

pub use acl::{acl_hash, AclDocument, AclEntry, AclStore, MemoryAclStore, Scope};
pub use state::{
    bootstrap, AcState, AnchorRecord, Decision, DeviceBinding, PermissionEntry, RejectReason, Rejection, Replica,
    StateError, StreamRecord, Validated,
};
pub use tx::{
    DevicePair, ImmutabilityAnchor, OwnershipTransfer, PermissionUpdate, StreamRegister, Tx, TAG_DEVICE_PAIR,
    TAG_IMMUTABILITY_ANCHOR, TAG_OWNERSHIP_TRANSFER, TAG_PERMISSION_UPDATE, TAG_STREAM_REGISTER, TX_SIG_TAG,
};
