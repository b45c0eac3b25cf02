//! Binary hash tree key derivation.
//!
//! The tree is built top-down from a secret root seed: the left child of a
//! node is `SHA-256(0x00 || parent)` and the right child `SHA-256(0x01 ||
//! parent)`. Leaf `e` at depth `d` feeds the KDF that yields the data
//! encryption key for epoch `e`. Sharing an inner node shares every leaf key
//! beneath it and nothing else, so a set of past intervals is granted by
//! handing out the minimal set of subtree roots that covers it exactly.

use std::collections::BTreeMap;
use std::fmt;

use crate::crypto::{kdf, sha256, Digest};
use crate::types::{Dek, EpochInterval, StreamId};
use crate::wire::{Reader, WireError, Writer};

pub const MAX_DEPTH: u8 = 30;
pub const DEFAULT_DEPTH: u8 = 30;
pub const DEK_LABEL: &[u8] = b"droplet/dek";

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum KeyTreeError {
    #[error("tree depth {0} exceeds the maximum of {MAX_DEPTH}")]
    DepthTooLarge(u8),
    #[error("node label ({level}, {index}) is out of range for depth {depth}")]
    LabelOutOfRange { level: u8, index: u64, depth: u8 },
    #[error("epoch {epoch} is outside the tree capacity of {capacity} epochs")]
    EpochOutOfRange { epoch: u64, capacity: u64 },
    #[error("empty epoch request")]
    EmptyRequest,
    #[error("epoch intervals overlap or are inverted")]
    OverlappingIntervals,
    #[error("malformed cover: {0}")]
    MalformedCover(&'static str),
    #[error(transparent)]
    Wire(#[from] WireError),
}

/// Owner-side tree parameters. The root seed never leaves this struct in any
/// shareable encoding.
#[derive(Clone)]
pub struct TreeParams {
    pub stream_id: StreamId,
    depth: u8,
    root_seed: Digest,
}

impl fmt::Debug for TreeParams {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TreeParams")
            .field("stream_id", &self.stream_id)
            .field("depth", &self.depth)
            .finish_non_exhaustive()
    }
}

impl TreeParams {
    pub fn new(stream_id: StreamId, depth: u8, root_seed: Digest) -> Result<Self, KeyTreeError> {
        if depth > MAX_DEPTH {
            return Err(KeyTreeError::DepthTooLarge(depth));
        }
        Ok(Self { stream_id, depth, root_seed })
    }

    pub fn depth(&self) -> u8 {
        self.depth
    }

    pub fn capacity(&self) -> u64 {
        1u64 << self.depth
    }
}

/// Position of a node: `level` 0 is the root, `level == depth` the leaves.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeLabel {
    pub level: u8,
    pub index: u64,
}

impl NodeLabel {
    pub const ROOT: NodeLabel = NodeLabel { level: 0, index: 0 };

    pub fn new(level: u8, index: u64) -> Self {
        Self { level, index }
    }

    pub fn leaf(depth: u8, epoch: u64) -> Self {
        Self { level: depth, index: epoch }
    }

    pub fn check(&self, depth: u8) -> Result<(), KeyTreeError> {
        if self.level > depth || self.index >= (1u64 << self.level) {
            return Err(KeyTreeError::LabelOutOfRange {
                level: self.level,
                index: self.index,
                depth,
            });
        }
        Ok(())
    }

    /// Leaves (epochs) beneath this node in a tree of `depth`.
    pub fn span(&self, depth: u8) -> EpochInterval {
        let shift = depth - self.level;
        EpochInterval::new(self.index << shift, ((self.index + 1) << shift) - 1)
    }

    /// True if `self` is a strict ancestor of `other`.
    pub fn is_ancestor_of(&self, other: &NodeLabel) -> bool {
        self.level < other.level && (other.index >> (other.level - self.level)) == self.index
    }

    fn child(&self, bit: u64) -> NodeLabel {
        NodeLabel { level: self.level + 1, index: (self.index << 1) | bit }
    }
}

pub fn child_value(parent: &Digest, right: bool) -> Digest {
    sha256(&[&[right as u8], parent])
}

/// Walk from a node at `from` down to its descendant `to`, one hash per level.
fn descend(mut value: Digest, from: NodeLabel, to: NodeLabel) -> Digest {
    debug_assert!(from == to || from.is_ancestor_of(&to));
    for level in (0..to.level - from.level).rev() {
        let bit = (to.index >> level) & 1;
        value = child_value(&value, bit == 1);
    }
    value
}

pub fn derive_node(params: &TreeParams, label: NodeLabel) -> Result<Digest, KeyTreeError> {
    label.check(params.depth)?;
    Ok(descend(params.root_seed, NodeLabel::ROOT, label))
}

pub fn dek_from_leaf(leaf: &Digest, epoch: u64, stream_id: &StreamId) -> Dek {
    Dek { epoch, key: kdf(leaf, DEK_LABEL, stream_id.as_bytes()) }
}

pub fn derive_dek(params: &TreeParams, epoch: u64) -> Result<Dek, KeyTreeError> {
    if epoch >= params.capacity() {
        return Err(KeyTreeError::EpochOutOfRange { epoch, capacity: params.capacity() });
    }
    let leaf = derive_node(params, NodeLabel::leaf(params.depth, epoch))?;
    Ok(dek_from_leaf(&leaf, epoch, &params.stream_id))
}

/// Sort, validate and coalesce a request into disjoint, non-adjacent intervals.
pub fn normalize_intervals(
    intervals: &[EpochInterval],
    capacity: u64,
) -> Result<Vec<EpochInterval>, KeyTreeError> {
    if intervals.is_empty() {
        return Err(KeyTreeError::EmptyRequest);
    }
    let mut sorted = intervals.to_vec();
    sorted.sort();
    let mut out: Vec<EpochInterval> = Vec::with_capacity(sorted.len());
    for iv in sorted {
        if iv.is_empty() {
            return Err(KeyTreeError::OverlappingIntervals);
        }
        if iv.end >= capacity {
            return Err(KeyTreeError::EpochOutOfRange { epoch: iv.end, capacity });
        }
        match out.last_mut() {
            Some(prev) if iv.start <= prev.end => return Err(KeyTreeError::OverlappingIntervals),
            Some(prev) if iv.start == prev.end + 1 => prev.end = iv.end,
            _ => out.push(iv),
        }
    }
    Ok(out)
}

#[derive(Clone, PartialEq, Eq)]
pub struct CoverNode {
    pub label: NodeLabel,
    pub value: Digest,
}

impl fmt::Debug for CoverNode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "CoverNode({}, {})", self.label.level, self.label.index)
    }
}

/// Inner nodes handed to a principal, sorted by `(level, index)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CoverSet {
    pub stream_id: StreamId,
    pub nodes: Vec<CoverNode>,
}

impl CoverSet {
    pub fn labels(&self) -> Vec<NodeLabel> {
        self.nodes.iter().map(|n| n.label).collect()
    }

    /// Reject covers with out-of-range labels or ancestor/descendant pairs.
    pub fn validate(&self, depth: u8) -> Result<(), KeyTreeError> {
        for node in &self.nodes {
            node.label.check(depth)?;
        }
        let mut spans: Vec<EpochInterval> =
            self.nodes.iter().map(|n| n.label.span(depth)).collect();
        spans.sort();
        if spans.windows(2).any(|w| w[1].start <= w[0].end) {
            return Err(KeyTreeError::MalformedCover("overlapping nodes"));
        }
        Ok(())
    }

    /// Epoch intervals spanned by the cover, coalesced.
    pub fn epochs(&self, depth: u8) -> Vec<EpochInterval> {
        let mut spans: Vec<EpochInterval> =
            self.nodes.iter().map(|n| n.label.span(depth)).collect();
        spans.sort();
        let mut out: Vec<EpochInterval> = Vec::new();
        for s in spans {
            match out.last_mut() {
                Some(prev) if s.start <= prev.end + 1 => prev.end = prev.end.max(s.end),
                _ => out.push(s),
            }
        }
        out
    }

    pub fn covers(&self, epoch: u64, depth: u8) -> bool {
        self.nodes.iter().any(|n| n.label.span(depth).contains(epoch))
    }

    /// DEK for a single epoch, if the cover grants it. Costs at most `depth`
    /// hashes, so it is the right call for large subtrees.
    pub fn dek(&self, epoch: u64, depth: u8) -> Option<Dek> {
        let node = self.nodes.iter().find(|n| n.label.span(depth).contains(epoch))?;
        let leaf = descend(node.value, node.label, NodeLabel::leaf(depth, epoch));
        Some(dek_from_leaf(&leaf, epoch, &self.stream_id))
    }

    pub fn write_to(&self, w: &mut Writer) {
        let count = u16::try_from(self.nodes.len()).expect("cover larger than u16::MAX nodes");
        w.u16(count);
        for node in &self.nodes {
            w.u8(node.label.level).u64(node.label.index).bytes(&node.value);
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::with_capacity(2 + self.nodes.len() * 41);
        self.write_to(&mut w);
        w.finish()
    }

    pub fn read_from(r: &mut Reader<'_>, stream_id: StreamId) -> Result<Self, KeyTreeError> {
        let count = r.u16()? as usize;
        let mut nodes = Vec::with_capacity(count);
        for _ in 0..count {
            let level = r.u8()?;
            let index = r.u64()?;
            let value = r.array()?;
            nodes.push(CoverNode { label: NodeLabel { level, index }, value });
        }
        Ok(Self { stream_id, nodes })
    }

    pub fn from_bytes(bytes: &[u8], stream_id: StreamId) -> Result<Self, KeyTreeError> {
        let mut r = Reader::new(bytes);
        let cover = Self::read_from(&mut r, stream_id)?;
        r.finish()?;
        Ok(cover)
    }
}

/// Minimal set of subtree roots whose leaves are exactly the requested epochs.
pub fn compute_cover(
    params: &TreeParams,
    epochs: &[EpochInterval],
) -> Result<CoverSet, KeyTreeError> {
    let request = normalize_intervals(epochs, params.capacity())?;
    let mut labels = Vec::new();
    collect_cover(NodeLabel::ROOT, params.depth, &request, &mut labels);
    labels.sort();
    let nodes = labels
        .into_iter()
        .map(|label| CoverNode { label, value: descend(params.root_seed, NodeLabel::ROOT, label) })
        .collect();
    Ok(CoverSet { stream_id: params.stream_id, nodes })
}

fn collect_cover(
    node: NodeLabel,
    depth: u8,
    request: &[EpochInterval],
    out: &mut Vec<NodeLabel>,
) {
    let span = node.span(depth);
    // Request intervals are disjoint and non-adjacent, so a fully covered span
    // lies inside a single interval.
    let overlapping: Vec<&EpochInterval> = request
        .iter()
        .filter(|iv| iv.start <= span.end && span.start <= iv.end)
        .collect();
    match overlapping.as_slice() {
        [] => {}
        [iv] if iv.start <= span.start && span.end <= iv.end => out.push(node),
        _ => {
            collect_cover(node.child(0), depth, request, out);
            collect_cover(node.child(1), depth, request, out);
        }
    }
}

/// All DEKs reachable from a cover. Allocates one entry per epoch; use
/// [`CoverSet::dek`] when only a handful of epochs are needed.
pub fn expand_cover(cover: &CoverSet, depth: u8) -> Result<BTreeMap<u64, Dek>, KeyTreeError> {
    cover.validate(depth)?;
    let mut out = BTreeMap::new();
    for node in &cover.nodes {
        expand_node(node.value, node.label, depth, &cover.stream_id, &mut out);
    }
    Ok(out)
}

fn expand_node(
    value: Digest,
    label: NodeLabel,
    depth: u8,
    stream_id: &StreamId,
    out: &mut BTreeMap<u64, Dek>,
) {
    if label.level == depth {
        out.insert(label.index, dek_from_leaf(&value, label.index, stream_id));
        return;
    }
    expand_node(child_value(&value, false), label.child(0), depth, stream_id, out);
    expand_node(child_value(&value, true), label.child(1), depth, stream_id, out);
}
