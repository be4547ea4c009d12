//! The three-layer And-Or tree: a root verifier, six or-nodes on the 2x3
//! block grid, and up to `m` leaf classifiers per or-node.
//!
//! Node numbering follows the tree: 0 is the root, 1..=6 the or-nodes and
//! 7..=n the leaf slots with `n = 6 + 6m`; slot `s` of or-node `i` (both
//! 0-based here) is node `7 + i*m + s`. Empty slots stay in place with zero
//! weights so the parameter vector keeps a fixed length.
//!
//! The flat parameter vector is laid out as
//! `(w_leaf[7..=n], w_deform[7..=n], w_root)`. The deformation entries are the
//! *negated* cost weights, so every score is a plain dot product with a
//! joint feature whose deformation blocks are stored as positive values.

use std::path::Path;

use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::descriptor::{deformation_feature, fragment_feature, root_feature, DEFORMATION_DIM, FEATURE_DIM};
use crate::error::{Error, Result};
use crate::geometry::{clip_to_block, BlockGrid, EdgeMap, Point2, Polyline, Rect, Window, NUM_BLOCKS};
use crate::sparse::{dot, SparseVec};

pub const NUM_OR_NODES: usize = NUM_BLOCKS;
pub const MODEL_FORMAT: &str = "aotree-model";
pub const MODEL_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Maximum leaf slots per or-node (`m`).
    pub max_leaves: usize,
    /// Window size at scale 1, in pixels.
    pub base_window: (f64, f64),
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { max_leaves: 3, base_window: (64.0, 64.0) }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_leaves == 0 {
            return Err(Error::InvalidConfig("max_leaves must be at least 1".into()));
        }
        if !(self.base_window.0 > 0.0 && self.base_window.1 > 0.0) {
            return Err(Error::InvalidConfig("base window must have positive size".into()));
        }
        Ok(())
    }
}

/// Offsets of the joint feature / parameter vector blocks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FeatureLayout {
    pub max_leaves: usize,
}

impl FeatureLayout {
    pub fn slots(&self) -> usize {
        NUM_OR_NODES * self.max_leaves
    }

    pub fn leaf_offset(&self, slot: usize) -> usize {
        slot * FEATURE_DIM
    }

    pub fn deform_offset(&self, slot: usize) -> usize {
        self.slots() * FEATURE_DIM + slot * DEFORMATION_DIM
    }

    pub fn root_offset(&self) -> usize {
        self.slots() * (FEATURE_DIM + DEFORMATION_DIM)
    }

    pub fn dim(&self) -> usize {
        self.root_offset() + FEATURE_DIM
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LeafParams {
    pub w_leaf: Vec<f64>,
    /// Parameter-vector entries for the deformation block (negated costs).
    pub w_deform: [f64; DEFORMATION_DIM],
    pub active: bool,
}

impl LeafParams {
    pub fn empty() -> Self {
        LeafParams { w_leaf: vec![0.0; FEATURE_DIM], w_deform: [0.0; DEFORMATION_DIM], active: false }
    }

    fn clear(&mut self) {
        self.w_leaf.iter_mut().for_each(|v| *v = 0.0);
        self.w_deform = [0.0; DEFORMATION_DIM];
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AndOrModel {
    pub config: ModelConfig,
    /// Or-node anchors as fractions of the window extent.
    pub anchors: [Point2; NUM_OR_NODES],
    leaves: Vec<LeafParams>,
    pub w_root: Vec<f64>,
}

impl AndOrModel {
    /// Zero model with anchors at the regular block centers and no active leaf.
    pub fn new(config: ModelConfig) -> Self {
        let slots = NUM_OR_NODES * config.max_leaves;
        AndOrModel {
            anchors: BlockGrid::anchor_fractions(),
            leaves: vec![LeafParams::empty(); slots],
            w_root: vec![0.0; FEATURE_DIM],
            config,
        }
    }

    pub fn layout(&self) -> FeatureLayout {
        FeatureLayout { max_leaves: self.config.max_leaves }
    }

    pub fn max_leaves(&self) -> usize {
        self.config.max_leaves
    }

    /// Flat slot index of leaf `slot` under or-node `or_node` (both 0-based).
    pub fn slot_index(&self, or_node: usize, slot: usize) -> usize {
        debug_assert!(or_node < NUM_OR_NODES && slot < self.config.max_leaves);
        or_node * self.config.max_leaves + slot
    }

    /// Tree node number of a leaf slot.
    pub fn node_index(&self, or_node: usize, slot: usize) -> usize {
        1 + NUM_OR_NODES + self.slot_index(or_node, slot)
    }

    pub fn leaf(&self, or_node: usize, slot: usize) -> &LeafParams {
        &self.leaves[self.slot_index(or_node, slot)]
    }

    pub fn leaf_mut(&mut self, or_node: usize, slot: usize) -> &mut LeafParams {
        let k = self.slot_index(or_node, slot);
        &mut self.leaves[k]
    }

    pub fn leaves(&self) -> &[LeafParams] {
        &self.leaves
    }

    pub fn active_slots(&self, or_node: usize) -> impl Iterator<Item = usize> + '_ {
        (0..self.config.max_leaves).filter(move |&s| self.leaf(or_node, s).active)
    }

    pub fn num_active(&self, or_node: usize) -> usize {
        self.active_slots(or_node).count()
    }

    pub fn set_active(&mut self, or_node: usize, slot: usize, active: bool) {
        let leaf = self.leaf_mut(or_node, slot);
        leaf.active = active;
        if !active {
            leaf.clear();
        }
    }

    /// Anchor offset `d_i` in pixels for a window.
    pub fn anchor(&self, or_node: usize, window: &Window) -> Point2 {
        let f = self.anchors[or_node];
        Point2::new(f.x * window.width, f.y * window.height)
    }

    pub fn weights(&self) -> Vec<f64> {
        let layout = self.layout();
        let mut w = vec![0.0; layout.dim()];
        for (k, leaf) in self.leaves.iter().enumerate() {
            let o = layout.leaf_offset(k);
            w[o..o + FEATURE_DIM].copy_from_slice(&leaf.w_leaf);
            let o = layout.deform_offset(k);
            w[o..o + DEFORMATION_DIM].copy_from_slice(&leaf.w_deform);
        }
        let o = layout.root_offset();
        w[o..].copy_from_slice(&self.w_root);
        w
    }

    /// Loads a flat parameter vector. Entries of inactive slots are dropped so
    /// empty leaves stay at zero.
    pub fn set_weights(&mut self, w: &[f64]) {
        let layout = self.layout();
        assert_eq!(w.len(), layout.dim(), "parameter vector length");
        for (k, leaf) in self.leaves.iter_mut().enumerate() {
            if leaf.active {
                let o = layout.leaf_offset(k);
                leaf.w_leaf.copy_from_slice(&w[o..o + FEATURE_DIM]);
                let o = layout.deform_offset(k);
                leaf.w_deform.copy_from_slice(&w[o..o + DEFORMATION_DIM]);
            } else {
                leaf.clear();
            }
        }
        self.w_root.copy_from_slice(&w[layout.root_offset()..]);
    }

    pub fn to_json_bytes(&self) -> Vec<u8> {
        let file = ModelFile {
            format: MODEL_FORMAT.to_string(),
            version: MODEL_VERSION,
            config: self.config.clone(),
            anchors: self.anchors.to_vec(),
            leaves: self
                .leaves
                .iter()
                .map(|l| LeafFile { active: l.active, w_leaf: encode_f64(&l.w_leaf), w_deform: encode_f64(&l.w_deform) })
                .collect(),
            w_root: encode_f64(&self.w_root),
        };
        let mut bytes = serde_json::to_vec_pretty(&file).expect("model serializes");
        bytes.push(b'\n');
        bytes
    }

    pub fn from_json_bytes(bytes: &[u8]) -> Result<Self> {
        let head: ModelHeader = serde_json::from_slice(bytes)?;
        if head.format != MODEL_FORMAT {
            return Err(Error::malformed("format", format!("expected {MODEL_FORMAT:?}, found {:?}", head.format)));
        }
        if head.version != MODEL_VERSION {
            return Err(Error::VersionMismatch { expected: MODEL_VERSION, found: head.version });
        }
        let file: ModelFile = serde_json::from_slice(bytes)?;
        file.config.validate()?;
        if file.anchors.len() != NUM_OR_NODES {
            return Err(Error::malformed("anchors", format!("expected {NUM_OR_NODES}, found {}", file.anchors.len())));
        }
        let slots = NUM_OR_NODES * file.config.max_leaves;
        if file.leaves.len() != slots {
            return Err(Error::malformed("leaves", format!("expected {slots} slots, found {}", file.leaves.len())));
        }
        let mut leaves = Vec::with_capacity(slots);
        for (k, l) in file.leaves.iter().enumerate() {
            let w_leaf = decode_f64(&l.w_leaf, FEATURE_DIM, &format!("leaves[{k}].w_leaf"))?;
            let d = decode_f64(&l.w_deform, DEFORMATION_DIM, &format!("leaves[{k}].w_deform"))?;
            if !l.active && (w_leaf.iter().any(|&v| v != 0.0) || d.iter().any(|&v| v != 0.0)) {
                return Err(Error::malformed(format!("leaves[{k}]"), "inactive slot carries nonzero weights"));
            }
            leaves.push(LeafParams { w_leaf, w_deform: [d[0], d[1], d[2], d[3]], active: l.active });
        }
        Ok(AndOrModel {
            config: file.config,
            anchors: std::array::from_fn(|i| file.anchors[i]),
            leaves,
            w_root: decode_f64(&file.w_root, FEATURE_DIM, "w_root")?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_bytes(&bytes).map_err(|e| match e {
            Error::Json(j) => Error::malformed(path.display().to_string(), j.to_string()),
            other => other,
        })
    }
}

#[derive(Deserialize)]
struct ModelHeader {
    format: String,
    version: u32,
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format: String,
    version: u32,
    config: ModelConfig,
    anchors: Vec<Point2>,
    leaves: Vec<LeafFile>,
    w_root: String,
}

#[derive(Serialize, Deserialize)]
struct LeafFile {
    active: bool,
    w_leaf: String,
    w_deform: String,
}

/// Little-endian f64 bytes, standard base64.
fn encode_f64(values: &[f64]) -> String {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    base64::engine::general_purpose::STANDARD.encode(bytes)
}

fn decode_f64(text: &str, len: usize, field: &str) -> Result<Vec<f64>> {
    let bytes = base64::engine::general_purpose::STANDARD
        .decode(text)
        .map_err(|e| Error::malformed(field, e.to_string()))?;
    if bytes.len() != len * 8 {
        return Err(Error::malformed(field, format!("expected {len} values, found {} bytes", bytes.len())));
    }
    Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
}

/// Sample label.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Label {
    #[serde(rename = "+1")]
    Positive,
    #[serde(rename = "-1")]
    Negative,
}

impl Label {
    pub fn sign(self) -> i32 {
        match self {
            Label::Positive => 1,
            Label::Negative => -1,
        }
    }
}

/// The choice one or-node makes inside a window: which leaf is switched on,
/// where its block sits, and which fragment (if any) feeds the leaf.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartChoice {
    pub slot: usize,
    /// Block displacement in search-grid units.
    pub offset: (i32, i32),
    /// Block center in image coordinates.
    pub position: Point2,
    pub fragment: Option<u32>,
}

/// Latent variables of one window: per or-node switch, block position and
/// chosen fragment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentAssignment {
    pub parts: Vec<PartChoice>,
}

impl LatentAssignment {
    /// All or-nodes on slot 0 at their anchors with no fragment.
    pub fn at_anchors(model: &AndOrModel, window: &Window) -> Self {
        LatentAssignment {
            parts: (0..NUM_OR_NODES)
                .map(|i| PartChoice {
                    slot: 0,
                    offset: (0, 0),
                    position: window.origin + model.anchor(i, window),
                    fragment: None,
                })
                .collect(),
        }
    }

    /// The switch vector over all leaf slots, or-node major.
    pub fn switches(&self, max_leaves: usize) -> Vec<bool> {
        let mut v = vec![false; NUM_OR_NODES * max_leaves];
        for (i, p) in self.parts.iter().enumerate() {
            v[i * max_leaves + p.slot] = true;
        }
        v
    }

    pub fn validate(&self, model: &AndOrModel, edge_map: &EdgeMap) -> Result<()> {
        if self.parts.len() != NUM_OR_NODES {
            return Err(Error::InvalidLatent(format!("expected {NUM_OR_NODES} parts, found {}", self.parts.len())));
        }
        for (i, p) in self.parts.iter().enumerate() {
            if p.slot >= model.max_leaves() {
                return Err(Error::InvalidLatent(format!("or-node {i}: slot {} out of range", p.slot)));
            }
            if !p.position.is_finite() {
                return Err(Error::InvalidLatent(format!("or-node {i}: position not finite")));
            }
            if let Some(id) = p.fragment {
                if edge_map.get(id).is_none() {
                    return Err(Error::DanglingFragment(id));
                }
            }
        }
        Ok(())
    }
}

pub type PackedFeature = SparseVec;

/// Pieces of each chosen fragment inside its block, in or-node order.
pub fn selected_pieces(edge_map: &EdgeMap, latent: &LatentAssignment, window: &Window) -> Result<Vec<Polyline>> {
    let (bw, bh) = BlockGrid::block_size(window);
    let mut pieces = Vec::new();
    for p in &latent.parts {
        if let Some(id) = p.fragment {
            let c = edge_map.get(id).ok_or(Error::DanglingFragment(id))?;
            pieces.extend(clip_to_block(c, &Rect::centered(p.position, bw, bh)));
        }
    }
    Ok(pieces)
}

/// Joint feature of a window under a latent assignment: per or-node the leaf
/// descriptor and the deformation feature in the switched-on slot, then the
/// root descriptor of the selected pieces.
pub fn pack_feature(
    edge_map: &EdgeMap,
    latent: &LatentAssignment,
    window: &Window,
    model: &AndOrModel,
) -> Result<PackedFeature> {
    latent.validate(model, edge_map)?;
    let layout = model.layout();
    let (bw, bh) = BlockGrid::block_size(window);
    let mut leaf_blocks = Vec::with_capacity(NUM_OR_NODES);
    let mut deform_blocks = Vec::with_capacity(NUM_OR_NODES);
    let mut pieces = Vec::new();
    for (i, p) in latent.parts.iter().enumerate() {
        let slot = model.slot_index(i, p.slot);
        let block = Rect::centered(p.position, bw, bh);
        let leaf = match p.fragment {
            Some(id) => {
                let c = edge_map.get(id).ok_or(Error::DanglingFragment(id))?;
                pieces.extend(clip_to_block(c, &block));
                fragment_feature(&block, c).into_vec()
            }
            None => vec![0.0; FEATURE_DIM],
        };
        let def = deformation_feature(window.origin, model.anchor(i, window), p.position, bw, bh);
        leaf_blocks.push((layout.leaf_offset(slot), leaf));
        deform_blocks.push((layout.deform_offset(slot), def.0.to_vec()));
    }
    let mut out = SparseVec::zeros(layout.dim());
    for (o, v) in leaf_blocks.into_iter().chain(deform_blocks) {
        out.push_block(o, v);
    }
    out.push_block(layout.root_offset(), root_feature(&pieces, window).into_vec());
    Ok(out)
}

/// Joint feature of a labeled sample: the window feature for positives and the
/// zero vector for negatives.
pub fn labeled_feature(
    edge_map: &EdgeMap,
    label: Label,
    latent: &LatentAssignment,
    window: &Window,
    model: &AndOrModel,
) -> Result<PackedFeature> {
    match label {
        Label::Positive => pack_feature(edge_map, latent, window, model),
        Label::Negative => Ok(SparseVec::zeros(model.layout().dim())),
    }
}

/// Window score evaluated part by part (leaf responses minus deformation costs,
/// plus the root response) without building the joint feature.
pub fn direct_score(edge_map: &EdgeMap, latent: &LatentAssignment, window: &Window, model: &AndOrModel) -> Result<f64> {
    let (bw, bh) = BlockGrid::block_size(window);
    let mut total = 0.0;
    let mut pieces = Vec::new();
    for (i, p) in latent.parts.iter().enumerate() {
        let leaf = model.leaf(i, p.slot);
        let block = Rect::centered(p.position, bw, bh);
        let response = match p.fragment {
            Some(id) => {
                let c = edge_map.get(id).ok_or(Error::DanglingFragment(id))?;
                pieces.extend(clip_to_block(c, &block));
                dot(&leaf.w_leaf, fragment_feature(&block, c).as_slice())
            }
            None => 0.0,
        };
        let def = deformation_feature(window.origin, model.anchor(i, window), p.position, bw, bh);
        let cost = -dot(&leaf.w_deform, &def.0);
        total += response - cost;
    }
    Ok(total + dot(&model.w_root, root_feature(&pieces, window).as_slice()))
}
