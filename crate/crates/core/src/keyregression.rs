//! Dual key regression.
//!
//! The main chain is generated forward from a seed (`g_{k+1} = H_M(g_k)`) and
//! consumed in reverse (`h_i = g_{N-1-i}`), so holding `h_j` yields every
//! `h_i` with `i <= j` but nothing later. The secondary chain runs the other
//! way (`h'_{i+1} = H_S(h'_i)`), so holding `h'_i` yields every later token
//! but nothing earlier. Handing out `(h'_i, h_j)` therefore bounds access to
//! exactly `[i, j]`, with `SEK_k = KDF(h_k || h'_k)`.
//!
//! [`CompactChain`] keeps every `s`-th generation value of both chains so that
//! any token costs fewer than `s` hash invocations instead of up to `N`.

use std::collections::BTreeMap;
use std::fmt;

use crate::crypto::{kdf, sha256, Digest};
use crate::types::{Sek, StreamId};

pub const MAIN_PREFIX: u8 = 0x4D;
pub const SECONDARY_PREFIX: u8 = 0x53;
pub const SECONDARY_LABEL: &[u8] = b"droplet/sec";
pub const SEK_LABEL: &[u8] = b"droplet/sek";
pub const DEFAULT_CHAIN_LENGTH: u64 = 1 << 20;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum KeyRegressionError {
    #[error("chain length must be at least 1")]
    EmptyChain,
    #[error("token index {index} outside chain of length {length}")]
    IndexOutOfRange { index: u64, length: u64 },
    #[error("main token index {main} does not match secondary token index {secondary}")]
    IndexMismatch { main: u64, secondary: u64 },
    #[error("range start {start} is after range end {end}")]
    InvertedRange { start: u64, end: u64 },
    #[error("checkpoint spacing must be at least 1")]
    ZeroSpacing,
}

pub fn hash_main(value: &Digest) -> Digest {
    sha256(&[&[MAIN_PREFIX], value])
}

pub fn hash_secondary(value: &Digest) -> Digest {
    sha256(&[&[SECONDARY_PREFIX], value])
}

#[derive(Clone)]
pub struct ChainParams {
    pub stream_id: StreamId,
    length: u64,
    main_seed: Digest,
    secondary_seed: Digest,
}

impl fmt::Debug for ChainParams {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ChainParams")
            .field("stream_id", &self.stream_id)
            .field("length", &self.length)
            .finish_non_exhaustive()
    }
}

impl ChainParams {
    pub fn new(
        stream_id: StreamId,
        length: u64,
        main_seed: Digest,
        secondary_seed: Digest,
    ) -> Result<Self, KeyRegressionError> {
        if length == 0 {
            return Err(KeyRegressionError::EmptyChain);
        }
        Ok(Self { stream_id, length, main_seed, secondary_seed })
    }

    pub fn length(&self) -> u64 {
        self.length
    }

    fn check_index(&self, index: u64) -> Result<(), KeyRegressionError> {
        if index >= self.length {
            return Err(KeyRegressionError::IndexOutOfRange { index, length: self.length });
        }
        Ok(())
    }

    /// First secondary token, `h'_0`.
    pub fn secondary_origin(&self) -> Digest {
        kdf(&self.secondary_seed, SECONDARY_LABEL, self.stream_id.as_bytes())
    }

    /// Main token computed from the seed with no stored state, together with
    /// the number of hash invocations spent (`N - 1 - index`).
    pub fn flat_token(&self, index: u64) -> Result<(MainToken, u64), KeyRegressionError> {
        self.check_index(index)?;
        let steps = self.length - 1 - index;
        let mut value = self.main_seed;
        for _ in 0..steps {
            value = hash_main(&value);
        }
        Ok((MainToken { index, value }, steps))
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct MainToken {
    pub index: u64,
    pub value: Digest,
}

#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct SecondaryToken {
    pub index: u64,
    pub value: Digest,
}

impl fmt::Debug for MainToken {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "MainToken({})", self.index)
    }
}

impl fmt::Debug for SecondaryToken {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "SecondaryToken({})", self.index)
    }
}

impl MainToken {
    /// Walk backwards to an earlier token (`to <= self.index`).
    pub fn regress(&self, to: u64) -> Result<MainToken, KeyRegressionError> {
        if to > self.index {
            return Err(KeyRegressionError::InvertedRange { start: self.index, end: to });
        }
        let mut value = self.value;
        for _ in to..self.index {
            value = hash_main(&value);
        }
        Ok(MainToken { index: to, value })
    }
}

impl SecondaryToken {
    /// Walk forwards to a later token (`to >= self.index`).
    pub fn advance(&self, to: u64) -> Result<SecondaryToken, KeyRegressionError> {
        if to < self.index {
            return Err(KeyRegressionError::InvertedRange { start: self.index, end: to });
        }
        let mut value = self.value;
        for _ in self.index..to {
            value = hash_secondary(&value);
        }
        Ok(SecondaryToken { index: to, value })
    }
}

/// Owner-side state with both chains fully materialized.
#[derive(Clone)]
pub struct DualChain {
    params: ChainParams,
    main: Vec<Digest>,
    secondary: Vec<Digest>,
}

pub fn gen_chains(params: &ChainParams) -> DualChain {
    let n = params.length as usize;
    let mut generation = Vec::with_capacity(n);
    generation.push(params.main_seed);
    for k in 1..n {
        generation.push(hash_main(&generation[k - 1]));
    }
    // Tokens are consumed in reverse generation order.
    generation.reverse();
    let mut secondary = Vec::with_capacity(n);
    secondary.push(params.secondary_origin());
    for i in 1..n {
        secondary.push(hash_secondary(&secondary[i - 1]));
    }
    DualChain { params: params.clone(), main: generation, secondary }
}

impl DualChain {
    pub fn params(&self) -> &ChainParams {
        &self.params
    }

    pub fn main_token(&self, index: u64) -> Result<MainToken, KeyRegressionError> {
        self.params.check_index(index)?;
        Ok(MainToken { index, value: self.main[index as usize] })
    }

    pub fn secondary_token(&self, index: u64) -> Result<SecondaryToken, KeyRegressionError> {
        self.params.check_index(index)?;
        Ok(SecondaryToken { index, value: self.secondary[index as usize] })
    }

    pub fn sek(&self, index: u64) -> Result<Sek, KeyRegressionError> {
        derive_sek(&self.main_token(index)?, &self.secondary_token(index)?, &self.params.stream_id)
    }
}

pub fn derive_sek(
    h: &MainToken,
    h_sec: &SecondaryToken,
    stream_id: &StreamId,
) -> Result<Sek, KeyRegressionError> {
    if h.index != h_sec.index {
        return Err(KeyRegressionError::IndexMismatch { main: h.index, secondary: h_sec.index });
    }
    let mut ikm = [0u8; 64];
    ikm[..32].copy_from_slice(&h.value);
    ikm[32..].copy_from_slice(&h_sec.value);
    Ok(Sek { epoch: h.index, key: kdf(&ikm, SEK_LABEL, stream_id.as_bytes()) })
}

/// Every SEK in `[h_start.index, h_end.index]` from the two boundary tokens.
pub fn derive_range(
    h_end: &MainToken,
    h_start: &SecondaryToken,
    stream_id: &StreamId,
) -> Result<BTreeMap<u64, Sek>, KeyRegressionError> {
    let (start, end) = (h_start.index, h_end.index);
    if start > end {
        return Err(KeyRegressionError::InvertedRange { start, end });
    }
    let mut mains = Vec::with_capacity((end - start + 1) as usize);
    let mut value = h_end.value;
    mains.push(value);
    for _ in start..end {
        value = hash_main(&value);
        mains.push(value);
    }
    mains.reverse();

    let mut out = BTreeMap::new();
    let mut secondary = h_start.value;
    for (offset, main) in mains.into_iter().enumerate() {
        let index = start + offset as u64;
        if offset > 0 {
            secondary = hash_secondary(&secondary);
        }
        let sek = derive_sek(
            &MainToken { index, value: main },
            &SecondaryToken { index, value: secondary },
            stream_id,
        )?;
        out.insert(index, sek);
    }
    Ok(out)
}

/// Checkpointed ("pebbled") chains: generation values at positions
/// `0, s, 2s, ...` of both chains are kept, everything else is recomputed.
#[derive(Clone)]
pub struct CompactChain {
    params: ChainParams,
    spacing: u64,
    main_pebbles: Vec<Digest>,
    secondary_pebbles: Vec<Digest>,
}

impl fmt::Debug for CompactChain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CompactChain")
            .field("params", &self.params)
            .field("spacing", &self.spacing)
            .field("pebbles", &self.main_pebbles.len())
            .finish()
    }
}

/// `ceil(sqrt(n))`, the spacing that minimizes worst-case cost times storage.
pub fn default_spacing(length: u64) -> u64 {
    let mut s = (length as f64).sqrt() as u64;
    while s * s < length {
        s += 1;
    }
    while s > 1 && (s - 1) * (s - 1) >= length {
        s -= 1;
    }
    s.max(1)
}

impl CompactChain {
    pub fn new(params: &ChainParams, spacing: Option<u64>) -> Result<Self, KeyRegressionError> {
        let spacing = spacing.unwrap_or_else(|| default_spacing(params.length));
        if spacing == 0 {
            return Err(KeyRegressionError::ZeroSpacing);
        }
        let mut main_pebbles = Vec::new();
        let mut secondary_pebbles = Vec::new();
        let mut main = params.main_seed;
        let mut secondary = params.secondary_origin();
        for pos in 0..params.length {
            if pos % spacing == 0 {
                main_pebbles.push(main);
                secondary_pebbles.push(secondary);
            }
            if pos + 1 < params.length {
                main = hash_main(&main);
                secondary = hash_secondary(&secondary);
            }
        }
        Ok(Self { params: params.clone(), spacing, main_pebbles, secondary_pebbles })
    }

    pub fn params(&self) -> &ChainParams {
        &self.params
    }

    pub fn spacing(&self) -> u64 {
        self.spacing
    }

    pub fn pebble_count(&self) -> usize {
        self.main_pebbles.len()
    }

    /// Main token `h_index` plus the number of hash invocations spent.
    pub fn token_with_cost(&self, index: u64) -> Result<(MainToken, u64), KeyRegressionError> {
        self.params.check_index(index)?;
        let position = self.params.length - 1 - index;
        let pebble = position / self.spacing;
        let steps = position % self.spacing;
        let mut value = self.main_pebbles[pebble as usize];
        for _ in 0..steps {
            value = hash_main(&value);
        }
        Ok((MainToken { index, value }, steps))
    }

    pub fn secondary_with_cost(
        &self,
        index: u64,
    ) -> Result<(SecondaryToken, u64), KeyRegressionError> {
        self.params.check_index(index)?;
        let pebble = index / self.spacing;
        let steps = index % self.spacing;
        let mut value = self.secondary_pebbles[pebble as usize];
        for _ in 0..steps {
            value = hash_secondary(&value);
        }
        Ok((SecondaryToken { index, value }, steps))
    }

    pub fn secondary_token(&self, index: u64) -> Result<SecondaryToken, KeyRegressionError> {
        self.secondary_with_cost(index).map(|(t, _)| t)
    }

    pub fn sek(&self, index: u64) -> Result<Sek, KeyRegressionError> {
        derive_sek(
            &compact_token(self, index)?,
            &self.secondary_token(index)?,
            &self.params.stream_id,
        )
    }
}

pub fn compact_token(chain: &CompactChain, index: u64) -> Result<MainToken, KeyRegressionError> {
    chain.token_with_cost(index).map(|(t, _)| t)
}
