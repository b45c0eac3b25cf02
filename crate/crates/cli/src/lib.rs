//! Command-line front end: key storage and the `droplet` command tree.

pub mod app;
pub mod keystore;
