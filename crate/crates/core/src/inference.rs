//! Two-stage inference: bottom-up leaf and or-node testing inside a window,
//! then verification by the root classifier over the selected fragments.
//!
//! The root term is evaluated once, after every or-node has picked its best
//! (leaf, position, fragment); it does not take part in the or-node argmax.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::descriptor::{deformation_feature, fragment_feature, root_feature, DeformationFeature, FragmentFeature};
use crate::descriptor::FEATURE_DIM;
use crate::error::{Error, Result};
use crate::geometry::{clip_to_block, enumerate_windows, BlockGrid, EdgeMap, Point2, Polyline, Rect, ScaleConfig, Window};
use crate::model::{AndOrModel, Label, LatentAssignment, LeafParams, PackedFeature, PartChoice, NUM_OR_NODES};
use crate::sparse::dot;

/// Candidate block positions around each or-node anchor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchConfig {
    /// Step between candidate positions, as a fraction of the block size.
    pub offset_fraction: f64,
    /// Steps on each side of the anchor; 1 gives a 3x3 grid.
    pub offset_steps: i32,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig { offset_fraction: 0.125, offset_steps: 1 }
    }
}

impl SearchConfig {
    /// Offsets in grid units: the anchor (0, 0) first, then the rest in
    /// lexicographic (dx, dy) order. Score ties resolve to the earliest entry.
    pub fn offsets(&self) -> Vec<(i32, i32)> {
        let s = self.offset_steps.max(0);
        let rest = (-s..=s).flat_map(|dx| (-s..=s).map(move |dy| (dx, dy))).filter(|&o| o != (0, 0));
        std::iter::once((0, 0)).chain(rest).collect()
    }
}

/// A fragment as seen through one block.
#[derive(Clone, Debug)]
pub struct Candidate {
    pub id: u32,
    pub pieces: Vec<Polyline>,
    pub feature: FragmentFeature,
}

/// One candidate block position of an or-node.
#[derive(Clone, Debug)]
pub struct Placement {
    pub offset: (i32, i32),
    pub position: Point2,
    pub block: Rect,
    pub deformation: DeformationFeature,
    /// Fragments whose clip to the block is nonempty, sorted by id.
    pub candidates: Vec<Candidate>,
}

/// Everything about a window that does not depend on the weights: candidate
/// placements per or-node and the descriptors of their fragments.
#[derive(Clone, Debug)]
pub struct WindowContext {
    pub window: Window,
    pub placements: Vec<Vec<Placement>>,
}

impl WindowContext {
    pub fn build(edge_map: &EdgeMap, window: &Window, model: &AndOrModel, search: &SearchConfig) -> Self {
        let (bw, bh) = BlockGrid::block_size(window);
        let offsets = search.offsets();
        let reach = search.offset_steps.max(0) as f64 * search.offset_fraction;
        let frame = window.rect();
        let near = Rect::new(frame.x - bw * reach, frame.y - bh * reach, frame.w + 2.0 * bw * reach, frame.h + 2.0 * bh * reach);
        let mut lines: Vec<&Polyline> = edge_map.polylines.iter().filter(|p| p.bbox().intersects(&near)).collect();
        lines.sort_by_key(|p| p.id);

        let placements = (0..NUM_OR_NODES)
            .map(|i| {
                let anchor = window.origin + model.anchor(i, window);
                offsets
                    .iter()
                    .map(|&(ox, oy)| {
                        let position = anchor
                            + Point2::new(ox as f64 * search.offset_fraction * bw, oy as f64 * search.offset_fraction * bh);
                        let block = Rect::centered(position, bw, bh);
                        let candidates = lines
                            .iter()
                            .filter_map(|c| {
                                let pieces = clip_to_block(c, &block);
                                (!pieces.is_empty()).then(|| Candidate {
                                    id: c.id,
                                    feature: fragment_feature(&block, c),
                                    pieces,
                                })
                            })
                            .collect();
                        Placement {
                            offset: (ox, oy),
                            position,
                            block,
                            deformation: deformation_feature(window.origin, model.anchor(i, window), position, bw, bh),
                            candidates,
                        }
                    })
                    .collect()
            })
            .collect();
        WindowContext { window: *window, placements }
    }
}

/// Best leaf response over a candidate set. The "no fragment" option scores 0
/// and wins ties; among fragments the lowest id wins.
pub fn best_fragment(leaf: &LeafParams, candidates: &[Candidate]) -> (f64, Option<usize>) {
    let mut best = (0.0, None);
    for (k, c) in candidates.iter().enumerate() {
        let s = dot(&leaf.w_leaf, c.feature.as_slice());
        if s > best.0 {
            best = (s, Some(k));
        }
    }
    best
}

/// Response of leaf `leaf` for a block placed at `block`, maximized over all
/// fragments of the edge map. Returns the score and the chosen fragment id.
pub fn leaf_score(edge_map: &EdgeMap, leaf: &LeafParams, block: &Rect) -> (f64, Option<u32>) {
    let mut lines: Vec<&Polyline> = edge_map.polylines.iter().collect();
    lines.sort_by_key(|p| p.id);
    let mut best = (0.0, None);
    for c in lines {
        let f = fragment_feature(block, c);
        if f.is_zero() {
            continue;
        }
        let s = dot(&leaf.w_leaf, f.as_slice());
        if s > best.0 {
            best = (s, Some(c.id));
        }
    }
    best
}

/// Winning (slot, placement, fragment) of one or-node.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OrChoice {
    pub score: f64,
    pub slot: usize,
    /// Index into the or-node's placements.
    pub placement: usize,
    /// Index into the placement's candidates.
    pub candidate: Option<usize>,
    /// False when the or-node has no active leaf and emitted the null switch.
    pub live: bool,
}

/// Maximizes leaf response minus deformation cost over active slots and
/// placements. Ties keep the lowest slot, then the earliest placement.
pub fn or_choice(model: &AndOrModel, ctx: &WindowContext, or_node: usize) -> OrChoice {
    let placements = &ctx.placements[or_node];
    let mut best: Option<OrChoice> = None;
    for slot in model.active_slots(or_node) {
        let leaf = model.leaf(or_node, slot);
        for (pi, pl) in placements.iter().enumerate() {
            let (response, candidate) = best_fragment(leaf, &pl.candidates);
            let score = response + dot(&leaf.w_deform, &pl.deformation.0);
            if best.is_none_or(|b| score > b.score) {
                best = Some(OrChoice { score, slot, placement: pi, candidate, live: true });
            }
        }
    }
    best.unwrap_or_else(|| {
        log::debug!("or-node {or_node} has no active leaf; using the null switch");
        OrChoice { score: 0.0, slot: 0, placement: 0, candidate: None, live: false }
    })
}

/// Or-node score for a window given directly by its edge map.
pub fn or_score(
    edge_map: &EdgeMap,
    model: &AndOrModel,
    or_node: usize,
    window: &Window,
    search: &SearchConfig,
) -> (OrChoice, PartChoice) {
    let ctx = WindowContext::build(edge_map, window, model, search);
    let choice = or_choice(model, &ctx, or_node);
    (choice, part_of(&ctx, or_node, &choice))
}

fn part_of(ctx: &WindowContext, or_node: usize, c: &OrChoice) -> PartChoice {
    let pl = &ctx.placements[or_node][c.placement];
    PartChoice {
        slot: c.slot,
        offset: pl.offset,
        position: pl.position,
        fragment: c.candidate.map(|k| pl.candidates[k].id),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub window: Window,
    pub score: f64,
    /// Sum of the or-node scores.
    pub bottom_up: f64,
    /// Root verifier response.
    pub root: f64,
    pub latent: LatentAssignment,
}

/// Scores a prepared window: six or-node maxima plus the root response over
/// the fragments they selected.
pub fn score_context(model: &AndOrModel, ctx: &WindowContext) -> Detection {
    let mut bottom_up = 0.0;
    let mut parts = Vec::with_capacity(NUM_OR_NODES);
    let mut pieces: Vec<Polyline> = Vec::new();
    for i in 0..NUM_OR_NODES {
        let c = or_choice(model, ctx, i);
        bottom_up += c.score;
        if let Some(k) = c.candidate {
            pieces.extend(ctx.placements[i][c.placement].candidates[k].pieces.iter().cloned());
        }
        parts.push(part_of(ctx, i, &c));
    }
    let root = dot(&model.w_root, root_feature(&pieces, &ctx.window).as_slice());
    Detection { window: ctx.window, score: bottom_up + root, bottom_up, root, latent: LatentAssignment { parts } }
}

pub fn window_score(edge_map: &EdgeMap, model: &AndOrModel, window: &Window, search: &SearchConfig) -> Detection {
    score_context(model, &WindowContext::build(edge_map, window, model, search))
}

/// Best latent assignment of a positive sample at its ground-truth window.
pub fn latent_infer_positive(
    edge_map: &EdgeMap,
    model: &AndOrModel,
    window_gt: &Window,
    search: &SearchConfig,
) -> LatentAssignment {
    window_score(edge_map, model, window_gt, search).latent
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossAugmented {
    pub label: Label,
    /// Latent assignment of the positive branch; `None` when the negative
    /// branch won (its feature is zero).
    pub latent: Option<LatentAssignment>,
    pub value: f64,
}

fn zero_one(truth: Label, y: Label) -> f64 {
    if truth == y {
        0.0
    } else {
        1.0
    }
}

/// `max over (y, H)` of score plus 0/1 loss. The positive branch uses the
/// two-stage window score; the negative branch has score 0. Ties go to the
/// true label.
pub fn loss_augmented(model: &AndOrModel, ctx: &WindowContext, truth: Label) -> LossAugmented {
    let det = score_context(model, ctx);
    let pos = det.score + zero_one(truth, Label::Positive);
    let neg = zero_one(truth, Label::Negative);
    let pos_wins = pos > neg || (pos == neg && truth == Label::Positive);
    if pos_wins {
        LossAugmented { label: Label::Positive, latent: Some(det.latent), value: pos }
    } else {
        LossAugmented { label: Label::Negative, latent: None, value: neg }
    }
}

pub fn loss_augmented_infer(
    edge_map: &EdgeMap,
    truth: Label,
    model: &AndOrModel,
    window: &Window,
    search: &SearchConfig,
) -> LossAugmented {
    loss_augmented(model, &WindowContext::build(edge_map, window, model, search), truth)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectConfig {
    pub scales: ScaleConfig,
    pub search: SearchConfig,
    /// Greedy NMS drops a detection whose IoU with a kept one exceeds this.
    pub nms_iou: f64,
}

impl Default for DetectConfig {
    fn default() -> Self {
        DetectConfig { scales: ScaleConfig::default(), search: SearchConfig::default(), nms_iou: 0.5 }
    }
}

/// Greedy non-maximum suppression. The input order breaks score ties; the
/// output is sorted by descending score.
pub fn nms(mut dets: Vec<Detection>, iou_threshold: f64) -> Vec<Detection> {
    dets.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut keep: Vec<Detection> = Vec::new();
    for d in dets {
        let r = d.window.rect();
        if keep.iter().all(|k| k.window.rect().iou(&r) <= iou_threshold) {
            keep.push(d);
        }
    }
    keep
}

/// Scores every window of the multi-scale scan and applies NMS.
pub fn detect(edge_map: &EdgeMap, model: &AndOrModel, cfg: &DetectConfig) -> Vec<Detection> {
    detect_many(edge_map, std::slice::from_ref(model), cfg).pop().unwrap_or_default()
}

/// [`detect`] for several models at once. Models that share the base window
/// and anchors of the first one reuse its window contexts.
pub fn detect_many(edge_map: &EdgeMap, models: &[AndOrModel], cfg: &DetectConfig) -> Vec<Vec<Detection>> {
    let Some(first) = models.first() else { return Vec::new() };
    let shared: Vec<usize> = (0..models.len())
        .filter(|&k| models[k].config.base_window == first.config.base_window && models[k].anchors == first.anchors)
        .collect();
    let windows: Vec<Window> =
        enumerate_windows(edge_map.width, edge_map.height, first.config.base_window, &cfg.scales).collect();
    let scored: Vec<Vec<Detection>> = windows
        .par_iter()
        .map(|w| {
            let ctx = WindowContext::build(edge_map, w, first, &cfg.search);
            shared.iter().map(|&k| score_context(&models[k], &ctx)).collect()
        })
        .collect();
    let mut out: Vec<Vec<Detection>> = vec![Vec::new(); models.len()];
    for (j, &k) in shared.iter().enumerate() {
        out[k] = nms(scored.iter().map(|row| row[j].clone()).collect(), cfg.nms_iou);
    }
    for (k, model) in models.iter().enumerate() {
        if !shared.contains(&k) {
            out[k] = detect_many(edge_map, std::slice::from_ref(model), cfg).pop().unwrap_or_default();
        }
    }
    out
}

/// Joint feature of a latent assignment, built from the descriptors already
/// cached in `ctx`. Equal to [`pack_feature`](crate::model::pack_feature) on
/// the same window; fails when `latent` names a placement or fragment the
/// context does not have.
pub fn context_feature(model: &AndOrModel, ctx: &WindowContext, latent: &LatentAssignment) -> Result<PackedFeature> {
    if latent.parts.len() != NUM_OR_NODES {
        return Err(Error::InvalidLatent(format!("expected {NUM_OR_NODES} parts, found {}", latent.parts.len())));
    }
    let layout = model.layout();
    let mut out = PackedFeature::zeros(layout.dim());
    let mut deform = Vec::with_capacity(NUM_OR_NODES);
    let mut pieces: Vec<Polyline> = Vec::new();
    for (i, p) in latent.parts.iter().enumerate() {
        if p.slot >= model.max_leaves() {
            return Err(Error::InvalidLatent(format!("or-node {i}: slot {} out of range", p.slot)));
        }
        let pl = ctx.placements[i]
            .iter()
            .find(|pl| pl.offset == p.offset)
            .ok_or_else(|| Error::InvalidLatent(format!("or-node {i}: offset {:?} not searched", p.offset)))?;
        let slot = model.slot_index(i, p.slot);
        let leaf = match p.fragment {
            Some(id) => {
                let c = pl.candidates.iter().find(|c| c.id == id).ok_or(Error::DanglingFragment(id))?;
                pieces.extend(c.pieces.iter().cloned());
                c.feature.as_slice().to_vec()
            }
            None => vec![0.0; FEATURE_DIM],
        };
        out.push_block(layout.leaf_offset(slot), leaf);
        deform.push((layout.deform_offset(slot), pl.deformation.0.to_vec()));
    }
    for (o, v) in deform {
        out.push_block(o, v);
    }
    out.push_block(layout.root_offset(), root_feature(&pieces, &ctx.window).into_vec());
    Ok(out)
}

/// Recomputes `w . phi(X, H)` for a detection from the joint feature.
pub fn reconstruct_score(edge_map: &EdgeMap, model: &AndOrModel, det: &Detection) -> Result<f64> {
    let f = crate::model::pack_feature(edge_map, &det.latent, &det.window, model)?;
    Ok(f.dot_dense(&model.weights()))
}
