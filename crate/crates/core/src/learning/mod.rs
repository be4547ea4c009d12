//! Latent structural SVM training with structure re-clustering.
//!
//! Each outer iteration:
//! 1. infers the best latent assignment of every positive and forms the
//!    hyperplane `q = -D sum_k phi(X_k, +1, H_k)`;
//! 2. re-clusters the fragments each or-node selected, creating and merging
//!    leaves, as long as the hyperplane moves by less than `epsilon`;
//! 3. solves the structural SVM with the latent assignments fixed.
//!
//! The loop stops when the objective `f(w) - g(w)` settles.

pub mod isodata;

use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{DatasetManifest, Split};
use crate::descriptor::{DEFORMATION_DIM, FEATURE_DIM};
use crate::error::{Error, Result};
use crate::geometry::{window_count, EdgeMap, ScaleConfig, Window};
use crate::inference::{context_feature, loss_augmented, score_context, SearchConfig, WindowContext};
use crate::model::{AndOrModel, Label, LatentAssignment, ModelConfig, PackedFeature, PartChoice, NUM_OR_NODES};
use crate::sparse::{dot, SparseVec};
use crate::ssvm::{self, Constraint, ConstraintOracle, SolveReport, SolverConfig};

pub use isodata::{ClusterEvent, IsodataConfig};

/// How negative training windows are drawn.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NegativeConfig {
    /// Random windows cut from each negative image.
    pub windows_per_image: usize,
    /// Also use other classes' ground-truth boxes as negatives.
    pub cross_class: bool,
    /// Random windows cut from each positive image of the class, kept only
    /// when their IoU with every box is at most `displaced_max_iou`.
    pub displaced_per_image: usize,
    pub displaced_max_iou: f64,
}

impl Default for NegativeConfig {
    fn default() -> Self {
        NegativeConfig { windows_per_image: 1, cross_class: true, displaced_per_image: 2, displaced_max_iou: 0.5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub solver: SolverConfig,
    pub search: SearchConfig,
    pub isodata: IsodataConfig,
    /// Absolute hyperplane-shift budget. When unset, `epsilon_rel * |q|`.
    pub epsilon: Option<f64>,
    pub epsilon_rel: f64,
    pub max_outer_iters: usize,
    /// Relative objective change that counts as converged.
    pub rel_tol: f64,
    pub seed: u64,
    pub negatives: NegativeConfig,
    /// Scales used to cut negative windows.
    pub scales: ScaleConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            solver: SolverConfig::default(),
            search: SearchConfig::default(),
            isodata: IsodataConfig::default(),
            epsilon: None,
            epsilon_rel: 0.1,
            max_outer_iters: 10,
            rel_tol: 1e-3,
            seed: 0,
            negatives: NegativeConfig::default(),
            scales: ScaleConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.solver.validate()?;
        self.scales.validate()?;
        if self.epsilon.is_some_and(|e| !(e >= 0.0)) || !(self.epsilon_rel >= 0.0) {
            return Err(Error::InvalidConfig("epsilon must be non-negative".into()));
        }
        if self.max_outer_iters == 0 || !(self.rel_tol > 0.0) {
            return Err(Error::InvalidConfig("max_outer_iters >= 1 and rel_tol > 0 required".into()));
        }
        if self.search.offset_steps < 0 || !(self.search.offset_fraction >= 0.0) {
            return Err(Error::InvalidConfig("search offsets must be non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.negatives.displaced_max_iou) {
            return Err(Error::InvalidConfig("displaced_max_iou must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// One training window.
#[derive(Clone, Debug)]
pub struct TrainSample {
    pub id: String,
    pub edge_map: Arc<EdgeMap>,
    pub window: Window,
    pub label: Label,
}

fn mix_seed(seed: u64, index: u64) -> u64 {
    // splitmix64 finalizer over (seed, index)
    let mut z = seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Random windows of the scanned sizes, fully inside the map.
pub fn sample_windows(map: &EdgeMap, base: (f64, f64), scales: &ScaleConfig, count: usize, rng: &mut ChaCha8Rng) -> Vec<Window> {
    let fitting: Vec<usize> =
        (0..scales.num_scales).filter(|&k| window_count(map.width, map.height, base, scales, k) > 0).collect();
    if fitting.is_empty() {
        return Vec::new();
    }
    (0..count)
        .map(|_| {
            let k = fitting[rng.random_range(0..fitting.len())];
            let s = scales.scale(k);
            let (w, h) = (base.0 * s, base.1 * s);
            let x = rng.random_range(0.0..=(map.width - w));
            let y = rng.random_range(0.0..=(map.height - h));
            Window::new(crate::geometry::Point2::new(x, y), w, h, s)
        })
        .collect()
}

/// Training windows for `class` from the manifest's train split: one positive
/// per ground-truth box, random windows from the class's negative images, and
/// optionally other classes' boxes as negatives.
pub fn training_samples(manifest: &DatasetManifest, class: &str, cfg: &TrainConfig) -> Result<Vec<TrainSample>> {
    if !manifest.classes.iter().any(|c| c == class) {
        return Err(Error::Dataset(format!("class {class:?} is not in the manifest")));
    }
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for (idx, item) in manifest.items_in(Split::Train) {
        let own = item.class == class;
        let wanted = match item.label {
            Label::Positive => own || cfg.negatives.cross_class,
            Label::Negative => own,
        };
        if !wanted {
            continue;
        }
        let map = Arc::new(manifest.load_edge_map(item)?);
        match (item.label, own) {
            (Label::Positive, true) => {
                for (b, r) in item.boxes.iter().enumerate() {
                    let s = r.w / cfg.model.base_window.0;
                    pos.push(TrainSample {
                        id: format!("{}#{b}", item.path),
                        edge_map: map.clone(),
                        window: Window::from_rect(*r, s),
                        label: Label::Positive,
                    });
                }
                let wanted = cfg.negatives.displaced_per_image;
                let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, idx as u64));
                let mut kept = 0;
                for _ in 0..wanted * 20 {
                    if kept == wanted {
                        break;
                    }
                    let Some(w) = sample_windows(&map, cfg.model.base_window, &cfg.scales, 1, &mut rng).pop() else { break };
                    if item.boxes.iter().all(|r| r.iou(&w.rect()) <= cfg.negatives.displaced_max_iou) {
                        neg.push(TrainSample {
                            id: format!("{}~{kept}", item.path),
                            edge_map: map.clone(),
                            window: w,
                            label: Label::Negative,
                        });
                        kept += 1;
                    }
                }
            }
            (Label::Positive, false) => {
                for (b, r) in item.boxes.iter().enumerate() {
                    let s = r.w / cfg.model.base_window.0;
                    neg.push(TrainSample {
                        id: format!("{}#{b}", item.path),
                        edge_map: map.clone(),
                        window: Window::from_rect(*r, s),
                        label: Label::Negative,
                    });
                }
            }
            (Label::Negative, _) => {
                let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, idx as u64));
                let windows = sample_windows(&map, cfg.model.base_window, &cfg.scales, cfg.negatives.windows_per_image, &mut rng);
                if windows.is_empty() {
                    log::warn!("{}: no window fits; skipped", item.path);
                }
                for (j, w) in windows.into_iter().enumerate() {
                    neg.push(TrainSample {
                        id: format!("{}@{j}", item.path),
                        edge_map: map.clone(),
                        window: w,
                        label: Label::Negative,
                    });
                }
            }
        }
    }
    pos.extend(neg);
    Ok(pos)
}

/// `q = -D sum_k phi(X_k, y_k, H_k)`; negatives add nothing.
#[derive(Clone, Debug, PartialEq)]
pub struct Hyperplane {
    pub q: Vec<f64>,
}

impl Hyperplane {
    pub fn from_features<'a>(dim: usize, d: f64, features: impl IntoIterator<Item = &'a PackedFeature>) -> Self {
        let mut q = vec![0.0; dim];
        for f in features {
            f.add_scaled_to(&mut q, -d);
        }
        Hyperplane { q }
    }

    pub fn norm(&self) -> f64 {
        dot(&self.q, &self.q).sqrt()
    }

    pub fn distance(&self, other: &Hyperplane) -> f64 {
        self.q.iter().zip(&other.q).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
    }
}

/// Output of Step 1.
#[derive(Clone, Debug)]
pub struct LatentStep {
    /// Best assignment per sample; `None` for negatives.
    pub latents: Vec<Option<LatentAssignment>>,
    pub features: Vec<Option<PackedFeature>>,
    pub hyperplane: Hyperplane,
    /// Positives whose previous assignment beat the freshly inferred one.
    pub kept_previous: usize,
}

/// Output of Step 2.
#[derive(Clone, Debug)]
pub struct StructureStep {
    pub latents: Vec<Option<LatentAssignment>>,
    pub features: Vec<Option<PackedFeature>>,
    pub hyperplane: Hyperplane,
    pub shift: f64,
    pub epsilon: f64,
    /// Per or-node cluster events.
    pub events: Vec<(usize, ClusterEvent)>,
    pub changed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    /// `f(w) - g(w)` at the iteration's starting parameters.
    pub objective: f64,
    pub f: f64,
    pub g: f64,
    pub q_norm: f64,
    pub q_shift: f64,
    pub epsilon: f64,
    pub leaves: Vec<usize>,
    pub events: Vec<(usize, ClusterEvent)>,
    pub solver_iterations: usize,
    /// Step 3 produced a worse objective on an unchanged structure and the
    /// previous parameters were kept.
    pub kept_parameters: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveTrace {
    pub rows: Vec<IterationRecord>,
    pub converged: bool,
}

impl ObjectiveTrace {
    pub fn write_csv(&self, out: &mut impl std::io::Write) -> std::io::Result<()> {
        writeln!(out, "iteration,objective,f,g,q_norm,q_shift,epsilon,leaves,events,solver_iterations,kept_parameters")?;
        for r in &self.rows {
            let leaves: Vec<String> = r.leaves.iter().map(|l| l.to_string()).collect();
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{}",
                r.iteration,
                r.objective,
                r.f,
                r.g,
                r.q_norm,
                r.q_shift,
                r.epsilon,
                leaves.join(" "),
                r.events.len(),
                r.solver_iterations,
                r.kept_parameters
            )?;
        }
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(&mut f).map_err(|e| Error::io(path, e))
    }
}

/// Loss-augmented oracle over fixed latent assignments of the positives.
struct LatentOracle<'a> {
    structure: &'a AndOrModel,
    contexts: &'a [WindowContext],
    labels: Vec<Label>,
    truth: &'a [Option<PackedFeature>],
    dim: usize,
}

impl LatentOracle<'_> {
    fn constraint(&self, model: &AndOrModel, k: usize) -> Option<Constraint> {
        let ctx = &self.contexts[k];
        let la = loss_augmented(model, ctx, self.labels[k]);
        let found = match (la.label, &la.latent) {
            (Label::Positive, Some(h)) => Some(context_feature(model, ctx, h).expect("inferred latent fits its context")),
            _ => None,
        };
        match (self.labels[k], found) {
            (Label::Positive, Some(phi)) => {
                let truth = self.truth[k].as_ref().expect("positive has a latent assignment");
                Some(Constraint { delta: truth.sub(&phi), loss: 0.0 })
            }
            (Label::Positive, None) => {
                let truth = self.truth[k].as_ref().expect("positive has a latent assignment");
                Some(Constraint { delta: truth.clone(), loss: 1.0 })
            }
            (Label::Negative, Some(phi)) => Some(Constraint { delta: SparseVec::zeros(self.dim).sub(&phi), loss: 1.0 }),
            (Label::Negative, None) => None,
        }
    }

    fn model_at(&self, w: &[f64]) -> AndOrModel {
        let mut m = self.structure.clone();
        m.set_weights(w);
        m
    }
}

impl ConstraintOracle for LatentOracle<'_> {
    fn num_samples(&self) -> usize {
        self.contexts.len()
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn most_violated(&self, sample: usize, w: &[f64]) -> Option<Constraint> {
        self.constraint(&self.model_at(w), sample)
    }

    fn most_violated_all(&self, w: &[f64]) -> Vec<Option<Constraint>> {
        let model = self.model_at(w);
        (0..self.contexts.len()).into_par_iter().map(|k| self.constraint(&model, k)).collect()
    }
}

/// Per-iteration view handed to observers.
pub struct Snapshot<'a> {
    pub iteration: usize,
    pub model: &'a AndOrModel,
    pub record: &'a IterationRecord,
}

pub struct TrainOutput {
    pub model: AndOrModel,
    pub trace: ObjectiveTrace,
    pub latents: Vec<Option<LatentAssignment>>,
}

/// Training state: samples with their cached window contexts, the model, and
/// the current latent assignments of the positives.
pub struct Trainer {
    pub cfg: TrainConfig,
    pub samples: Vec<TrainSample>,
    pub contexts: Vec<WindowContext>,
    pub model: AndOrModel,
    /// `H^d` per sample from the last Step 2 (or initialization).
    pub latents: Vec<Option<LatentAssignment>>,
}

/// Longest piece set among a placement's candidates; ties go to the lower id.
fn longest_candidate(ctx: &WindowContext, or_node: usize) -> (usize, Option<usize>) {
    let anchor = ctx.placements[or_node].iter().position(|p| p.offset == (0, 0)).expect("anchor is searched");
    let mut best: (f64, Option<usize>) = (0.0, None);
    for (k, c) in ctx.placements[or_node][anchor].candidates.iter().enumerate() {
        let len: f64 = c.pieces.iter().map(|p| p.length()).sum();
        if len > best.0 {
            best = (len, Some(k));
        }
    }
    (anchor, best.1)
}

impl Trainer {
    pub fn new(samples: Vec<TrainSample>, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let positives = samples.iter().filter(|s| s.label == Label::Positive).count();
        if positives == 0 || positives == samples.len() {
            return Err(Error::Dataset(format!(
                "training needs positives and negatives; got {positives} positive of {} samples",
                samples.len()
            )));
        }
        let model = AndOrModel::new(cfg.model.clone());
        let contexts: Vec<WindowContext> = samples
            .par_iter()
            .map(|s| WindowContext::build(&s.edge_map, &s.window, &model, &cfg.search))
            .collect();
        let latents = vec![None; samples.len()];
        Ok(Trainer { cfg, samples, contexts, model, latents })
    }

    fn positives(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.samples.len()).filter(|&k| self.samples[k].label == Label::Positive)
    }

    pub fn features_of(&self, latents: &[Option<LatentAssignment>]) -> Result<Vec<Option<PackedFeature>>> {
        latents
            .par_iter()
            .zip(&self.contexts)
            .map(|(h, ctx)| h.as_ref().map(|h| context_feature(&self.model, ctx, h)).transpose())
            .collect()
    }

    fn hyperplane(&self, features: &[Option<PackedFeature>]) -> Hyperplane {
        Hyperplane::from_features(self.model.layout().dim(), self.cfg.solver.d, features.iter().flatten())
    }

    /// Per or-node: the leaf feature and deformation feature each positive's
    /// assignment selects, concatenated.
    fn part_vectors(&self, latents: &[Option<LatentAssignment>], or_node: usize) -> Vec<(usize, Vec<f64>)> {
        self.positives()
            .map(|k| {
                let h = latents[k].as_ref().expect("positive has a latent assignment");
                let p = &h.parts[or_node];
                let pl = self.contexts[k].placements[or_node].iter().find(|pl| pl.offset == p.offset).expect("searched offset");
                let mut v = match p.fragment {
                    Some(id) => pl.candidates.iter().find(|c| c.id == id).expect("candidate").feature.as_slice().to_vec(),
                    None => vec![0.0; FEATURE_DIM],
                };
                v.extend_from_slice(&pl.deformation.0);
                (k, v)
            })
            .collect()
    }

    /// Initial structure and parameters: per or-node, the longest fragment of
    /// each positive inside the anchor block is clustered without constraint;
    /// clusters become leaves. One solve sets the parameters.
    pub fn initialize(&mut self) -> Result<SolveReport> {
        let m = self.model.max_leaves();
        let mut latents: Vec<Option<LatentAssignment>> = vec![None; self.samples.len()];
        let pos: Vec<usize> = self.positives().collect();
        for &k in &pos {
            let ctx = &self.contexts[k];
            let parts = (0..NUM_OR_NODES)
                .map(|i| {
                    let (pi, cand) = longest_candidate(ctx, i);
                    let pl = &ctx.placements[i][pi];
                    PartChoice { slot: 0, offset: pl.offset, position: pl.position, fragment: cand.map(|c| pl.candidates[c].id) }
                })
                .collect();
            latents[k] = Some(LatentAssignment { parts });
        }
        for i in 0..NUM_OR_NODES {
            let items: Vec<Vec<f64>> = pos
                .iter()
                .map(|&k| {
                    let p = &latents[k].as_ref().unwrap().parts[i];
                    let pl = self.contexts[k].placements[i].iter().find(|pl| pl.offset == p.offset).unwrap();
                    match p.fragment {
                        Some(id) => pl.candidates.iter().find(|c| c.id == id).unwrap().feature.as_slice().to_vec(),
                        None => vec![0.0; FEATURE_DIM],
                    }
                })
                .collect();
            if items.iter().all(|v| v.iter().all(|&x| x == 0.0)) {
                log::warn!("or-node {i}: no positive has a contour in its block; starting with one empty leaf");
            }
            let refs: Vec<&[f64]> = items.iter().map(Vec::as_slice).collect();
            let mut active = vec![false; m];
            active[0] = true;
            let cl = isodata::isodata(&refs, vec![0; refs.len()], active, &self.cfg.isodata, &mut |_, _| true);
            for s in 0..m {
                self.model.set_active(i, s, cl.active[s]);
            }
            for (j, &k) in pos.iter().enumerate() {
                latents[k].as_mut().unwrap().parts[i].slot = cl.labels[j];
            }
            log::info!("or-node {i}: {} initial leaves", cl.num_clusters());
        }
        self.latents = latents;
        let features = self.features_of(&self.latents)?;
        let report = self.step3(&features)?;
        self.model.set_weights(&report.w);
        Ok(report)
    }

    /// Step 1: best assignment per positive under the current parameters. The
    /// previous assignment is kept when it scores strictly higher.
    pub fn step1(&self) -> Result<LatentStep> {
        let w = self.model.weights();
        let results: Vec<Result<(Option<LatentAssignment>, Option<PackedFeature>, bool)>> = (0..self.samples.len())
            .into_par_iter()
            .map(|k| {
                if self.samples[k].label != Label::Positive {
                    return Ok((None, None, false));
                }
                let ctx = &self.contexts[k];
                let fresh = score_context(&self.model, ctx).latent;
                let f_fresh = context_feature(&self.model, ctx, &fresh)?;
                if let Some(prev) = &self.latents[k] {
                    let f_prev = context_feature(&self.model, ctx, prev)?;
                    if f_prev.dot_dense(&w) > f_fresh.dot_dense(&w) {
                        return Ok((Some(prev.clone()), Some(f_prev), true));
                    }
                }
                Ok((Some(fresh), Some(f_fresh), false))
            })
            .collect();
        let mut latents = Vec::with_capacity(results.len());
        let mut features = Vec::with_capacity(results.len());
        let mut kept = 0;
        for r in results {
            let (h, f, k) = r?;
            latents.push(h);
            features.push(f);
            kept += usize::from(k);
        }
        let hyperplane = self.hyperplane(&features);
        Ok(LatentStep { latents, features, hyperplane, kept_previous: kept })
    }

    pub fn epsilon_for(&self, q: &Hyperplane) -> f64 {
        self.cfg.epsilon.unwrap_or(self.cfg.epsilon_rel * q.norm())
    }

    /// Step 2: gated ISODATA per or-node over the selected fragments. Every
    /// admitted move keeps `|q - q^d| < epsilon`, counting the shifts already
    /// admitted on earlier or-nodes. Updates the model's active slots.
    pub fn step2(&mut self, step: &LatentStep, epsilon: f64) -> Result<StructureStep> {
        let m = self.model.max_leaves();
        let d = self.cfg.solver.d;
        let eps_sq = epsilon * epsilon;
        let mut latents = step.latents.clone();
        let mut events = Vec::new();
        let mut spent_sq = 0.0;
        let mut changed = false;
        for i in 0..NUM_OR_NODES {
            let vecs = self.part_vectors(&step.latents, i);
            if vecs.is_empty() {
                continue;
            }
            let refs: Vec<&[f64]> = vecs.iter().map(|(_, v)| &v[..FEATURE_DIM]).collect();
            let orig: Vec<usize> = vecs.iter().map(|(k, _)| step.latents[*k].as_ref().unwrap().parts[i].slot).collect();
            let mut active: Vec<bool> = (0..m).map(|s| self.model.leaf(i, s).active).collect();
            for &s in &orig {
                active[s] = true;
            }
            let width = FEATURE_DIM + DEFORMATION_DIM;
            let mut base = vec![vec![0.0; width]; m];
            for ((_, v), &s) in vecs.iter().zip(&orig) {
                for (a, b) in base[s].iter_mut().zip(v) {
                    *a += b;
                }
            }
            let shift_sq = |labels: &[usize]| -> f64 {
                let mut sums = base.clone();
                for ((_, v), &s) in vecs.iter().zip(labels) {
                    for (a, b) in sums[s].iter_mut().zip(v) {
                        *a -= b;
                    }
                }
                d * d * sums.iter().flatten().map(|x| x * x).sum::<f64>()
            };
            let spent_before = spent_sq;
            let mut gate = |labels: &[usize], _: &[bool]| spent_before + shift_sq(labels) < eps_sq;
            let cl = isodata::isodata(&refs, orig.clone(), active.clone(), &self.cfg.isodata, &mut gate);
            spent_sq = spent_before + shift_sq(&cl.labels);
            for s in 0..m {
                if self.model.leaf(i, s).active != cl.active[s] {
                    self.model.set_active(i, s, cl.active[s]);
                    changed = true;
                }
            }
            for ((k, _), &s) in vecs.iter().zip(&cl.labels) {
                let part = &mut latents[*k].as_mut().unwrap().parts[i];
                if part.slot != s {
                    part.slot = s;
                    changed = true;
                }
            }
            events.extend(cl.events.into_iter().map(|e| (i, e)));
        }
        let features = if changed { self.features_of(&latents)? } else { step.features.clone() };
        let hyperplane = self.hyperplane(&features);
        let shift = step.hyperplane.distance(&hyperplane);
        Ok(StructureStep { latents, features, hyperplane, shift, epsilon, events, changed })
    }

    fn oracle<'a>(&'a self, truth: &'a [Option<PackedFeature>]) -> LatentOracle<'a> {
        LatentOracle {
            structure: &self.model,
            contexts: &self.contexts,
            labels: self.samples.iter().map(|s| s.label).collect(),
            truth,
            dim: self.model.layout().dim(),
        }
    }

    /// Step 3: structural SVM with the positives' assignments fixed.
    pub fn step3(&self, truth: &[Option<PackedFeature>]) -> Result<SolveReport> {
        ssvm::solve(&self.oracle(truth), &self.cfg.solver)
    }

    /// Step 3 objective `1/2 |w|^2 + D sum_k xi_k` with slacks measured
    /// against the given assignments.
    pub fn step3_objective(&self, truth: &[Option<PackedFeature>], w: &[f64]) -> f64 {
        ssvm::primal_objective(&self.oracle(truth), w, self.cfg.solver.d)
    }

    /// `(f(w), g(w))` with the concave part linearized at `latents`:
    /// `g = D sum_pos w . phi(H_k)` and `f = 1/2 |w|^2 + D sum_k max(loss-augmented
    /// score, w . phi(H_k) for positives)`.
    pub fn objective_parts(&self, features: &[Option<PackedFeature>]) -> (f64, f64) {
        let w = self.model.weights();
        let d = self.cfg.solver.d;
        let terms: Vec<(f64, f64)> = (0..self.samples.len())
            .into_par_iter()
            .map(|k| {
                let la = loss_augmented(&self.model, &self.contexts[k], self.samples[k].label).value;
                match &features[k] {
                    Some(f) => {
                        let own = f.dot_dense(&w);
                        (la.max(own), own)
                    }
                    None => (la, 0.0),
                }
            })
            .collect();
        let f = 0.5 * dot(&w, &w) + d * terms.iter().map(|t| t.0).sum::<f64>();
        let g = d * terms.iter().map(|t| t.1).sum::<f64>();
        (f, g)
    }

    /// Runs the outer loop until the objective settles or the iteration cap.
    pub fn run(&mut self, observer: &mut dyn FnMut(&Snapshot)) -> Result<ObjectiveTrace> {
        let mut trace = ObjectiveTrace::default();
        let mut prev: Option<f64> = None;
        for t in 0..=self.cfg.max_outer_iters {
            let step = self.step1()?;
            let (f, g) = self.objective_parts(&step.features);
            let objective = f - g;
            let settled = prev.is_some_and(|p: f64| (objective - p).abs() <= self.cfg.rel_tol * p.abs().max(1e-12));
            let mut record = IterationRecord {
                iteration: t,
                objective,
                f,
                g,
                q_norm: step.hyperplane.norm(),
                q_shift: 0.0,
                epsilon: 0.0,
                leaves: (0..NUM_OR_NODES).map(|i| self.model.num_active(i)).collect(),
                events: Vec::new(),
                solver_iterations: 0,
                kept_parameters: false,
            };
            log::info!("iteration {t}: objective {objective:.6e} (f {f:.6e}, g {g:.6e})");
            if settled || t == self.cfg.max_outer_iters {
                trace.converged = settled;
                self.latents = step.latents;
                observer(&Snapshot { iteration: t, model: &self.model, record: &record });
                trace.rows.push(record);
                break;
            }
            prev = Some(objective);

            let eps = self.epsilon_for(&step.hyperplane);
            let structure = self.step2(&step, eps)?;
            record.q_shift = structure.shift;
            record.epsilon = eps;
            record.events = structure.events.clone();

            let before = self.model.weights();
            let report = self.step3(&structure.features)?;
            record.solver_iterations = report.iterations;
            if !structure.changed {
                let old = self.step3_objective(&structure.features, &before);
                let new = self.step3_objective(&structure.features, &report.w);
                if new > old {
                    log::info!("iteration {t}: solve raised the objective ({old:.6e} -> {new:.6e}); keeping parameters");
                    record.kept_parameters = true;
                }
            }
            if !record.kept_parameters {
                self.model.set_weights(&report.w);
            }
            self.latents = structure.latents;
            observer(&Snapshot { iteration: t, model: &self.model, record: &record });
            trace.rows.push(record);
        }
        Ok(trace)
    }
}

/// Initializes and runs the full training loop.
pub fn train(samples: Vec<TrainSample>, cfg: &TrainConfig) -> Result<TrainOutput> {
    train_with_observer(samples, cfg, &mut |_| {})
}

pub fn train_with_observer(samples: Vec<TrainSample>, cfg: &TrainConfig, observer: &mut dyn FnMut(&Snapshot)) -> Result<TrainOutput> {
    let mut trainer = Trainer::new(samples, cfg.clone())?;
    trainer.initialize()?;
    let trace = trainer.run(observer)?;
    Ok(TrainOutput { model: trainer.model, trace, latents: trainer.latents })
}
