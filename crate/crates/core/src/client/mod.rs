//! Owner, producer and consumer flows built from the lower-level modules.
//!
//! These types hold the per-role state (stream secrets, issued grants,
//! backlink digests, decrypted grants) and talk to a storage node through
//! [`NodeClient`](crate::storagenode::NodeClient).

mod consumer;
mod owner;
mod producer;

pub use consumer::{discover_grants, Consumer, ConsumerGrant};
pub use owner::{IssuedGrant, OwnerStream, StreamSecrets};
pub use producer::{group_by_epoch, Producer};

use parking_lot::Mutex;

use crate::authzchain::AclStore;
use crate::crypto::Digest;
use crate::keydist::KeyDistError;
use crate::keyregression::KeyRegressionError;
use crate::keytree::KeyTreeError;
use crate::stealth::StealthError;
use crate::storagenode::{ClientError, NodeClient, Status};
use crate::streamio::StreamError;
use crate::types::StreamId;
use crate::wire::WireError;

#[derive(Debug, thiserror::Error)]
pub enum FlowError {
    #[error(transparent)]
    Node(#[from] ClientError),
    #[error(transparent)]
    KeyDist(#[from] KeyDistError),
    #[error(transparent)]
    KeyTree(#[from] KeyTreeError),
    #[error(transparent)]
    KeyRegression(#[from] KeyRegressionError),
    #[error(transparent)]
    Stealth(#[from] StealthError),
    #[error(transparent)]
    Stream(#[from] StreamError),
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error("no grant found for this principal")]
    NoGrant,
    #[error("a grant needs epochs, a subscription start, or both")]
    EmptyGrant,
    #[error("epoch {0} is outside the stream's key capacity")]
    EpochOutOfRange(u64),
    #[error("no lockbox published for epoch {0}")]
    MissingLockbox(u64),
    #[error("chunk {0} is not signed by the stream's producer")]
    BadChunkSignature(u64),
    #[error("no grant labelled {0:?}")]
    UnknownLabel(String),
}

impl FlowError {
    /// Node refusal status, if that is what this error is.
    pub fn status(&self) -> Option<Status> {
        match self {
            FlowError::Node(ClientError::Status(s)) => Some(*s),
            _ => None,
        }
    }
}


/// ACL documents fetched from a storage node by content hash.
pub struct NodeAclStore {
    client: Mutex<NodeClient>,
}

impl NodeAclStore {
    pub fn new(client: NodeClient) -> Self {
        Self { client: Mutex::new(client) }
    }
}

impl AclStore for NodeAclStore {
    fn fetch_acl(&self, hash: &Digest) -> Option<Vec<u8>> {
        // ACL lookups are by hash alone; the stream id is not consulted.
        self.client.lock().get_acl(StreamId([0; 32]), hash).ok()
    }
}
