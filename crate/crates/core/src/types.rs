//! Small domain types shared across modules.

use std::fmt;
use std::str::FromStr;

use crate::crypto::{sha256, Digest};

/// 32-byte stream identifier.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct StreamId(pub Digest);

impl StreamId {
    /// Derive a stream id from the owner's address and a human-chosen name.
    pub fn derive(owner_addr: &Digest, name: &str) -> Self {
        Self(sha256(&[b"droplet/stream", owner_addr, name.as_bytes()]))
    }

    pub fn as_bytes(&self) -> &Digest {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Option<Self> {
        let raw = hex::decode(s.trim()).ok()?;
        Some(Self(raw.try_into().ok()?))
    }
}

impl fmt::Debug for StreamId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "StreamId({})", &self.to_hex()[..12])
    }
}

impl fmt::Display for StreamId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

/// Inclusive range of epochs `start..=end`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct EpochInterval {
    pub start: u64,
    pub end: u64,
}

impl EpochInterval {
    pub fn new(start: u64, end: u64) -> Self {
        Self { start, end }
    }

    pub fn single(epoch: u64) -> Self {
        Self { start: epoch, end: epoch }
    }

    pub fn contains(&self, epoch: u64) -> bool {
        self.start <= epoch && epoch <= self.end
    }

    pub fn len(&self) -> u64 {
        self.end.saturating_sub(self.start) + 1
    }

    pub fn is_empty(&self) -> bool {
        self.start > self.end
    }

    pub fn iter(&self) -> impl Iterator<Item = u64> {
        self.start..=self.end
    }
}

impl fmt::Display for EpochInterval {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}..{}", self.start, self.end)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("invalid epoch interval {0:?} (expected `a..b` or `a`)")]
pub struct IntervalParseError(pub String);

impl FromStr for EpochInterval {
    type Err = IntervalParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        let err = || IntervalParseError(s.to_string());
        match s.split_once("..") {
            Some((a, b)) => {
                let a = a.trim().parse().map_err(|_| err())?;
                let b = b.trim().trim_start_matches('=').parse().map_err(|_| err())?;
                if a > b {
                    return Err(err());
                }
                Ok(Self::new(a, b))
            }
            None => s.parse().map(Self::single).map_err(|_| err()),
        }
    }
}

/// Parse a comma-separated interval list such as `0..3,6..7`.
pub fn parse_intervals(s: &str) -> Result<Vec<EpochInterval>, IntervalParseError> {
    s.split(',')
        .filter(|p| !p.trim().is_empty())
        .map(str::parse)
        .collect()
}

macro_rules! epoch_key {
    ($(#[$doc:meta])* $name:ident) => {
        $(#[$doc])*
        #[derive(Clone, Copy, PartialEq, Eq, Hash)]
        pub struct $name {
            pub epoch: u64,
            pub key: [u8; 32],
        }

        impl fmt::Debug for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, concat!(stringify!($name), "(epoch {}, ..)"), self.epoch)
            }
        }
    };
}

epoch_key!(
    /// Per-epoch data encryption key.
    Dek
);
epoch_key!(
    /// Per-epoch subscriber encryption key; encapsulates the epoch's DEK.
    Sek
);
