//! Storage node: a key-value store that authorizes every request against a
//! local replica of the access-control chain before touching stored data.
//!
//! Chunks are content-addressed by `chunk_id(owner, stream, counter)` and
//! indexed by counter. Auxiliary objects (ACL documents and lockboxes) live
//! beside them. Requests are either signed individually or ride on a session
//! opened by a signed `Hello`.

mod backend;
mod net;
mod node;
mod wire;

pub use backend::{Backend, DiskBackend, MemoryBackend};
pub use net::{
    read_frame, serve_connection, serve_tcp, spawn_server, write_frame, AuthMode, ClientError,
    InstrumentedTransport, LocalTransport, NodeClient, ServerHandle, TcpTransport, TrafficStats, Transport,
};
pub use node::{keys, NodeConfig, NodeError, Session, StorageNode, MAX_RANGE_EPOCHS};
pub use wire::{
    decode_chunk_list, decode_response, encode_chunk_list, encode_response, Auth, MetaKind, Op, RangeResult,
    Request, Status, MAX_FRAME, REQ_SIG_TAG, SESSION_FLAG,
};

#[cfg(test)]
mod tests;
