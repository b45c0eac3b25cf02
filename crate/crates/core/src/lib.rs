//! Crypto-enforced access control for encrypted time-series streams.

pub mod authzchain;
pub mod client;
pub mod crypto;
pub mod harness;
pub mod keydist;
pub mod keyregression;
pub mod keytree;
pub mod perf;
pub mod simchain;
pub mod storagenode;
pub mod stealth;
pub mod streamio;
pub mod types;
pub mod wire;
