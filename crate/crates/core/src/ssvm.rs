//! n-slack structural SVM: cutting-plane constraint generation over a working
//! set, with an SMO solver for the dual.
//!
//! Primal: `min_w 1/2 |w|^2 + D sum_k xi_k` subject to
//! `w . delta_c >= loss_c - xi_k` for every constraint `c` of sample `k`.
//!
//! Dual: `max sum_c alpha_c loss_c - 1/2 |sum_c alpha_c delta_c|^2` with
//! `alpha >= 0` and `sum_{c in k} alpha_c <= D`, and `w = sum_c alpha_c delta_c`.
//! Multipliers normalized to a per-sample budget of one are `alpha / D`.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sparse::{dot, SparseVec};

/// Multiplier mass, relative to the budget, below which a variable counts as empty.
const MASS_EPS: f64 = 1e-12;

/// One margin constraint `w . delta >= loss - xi_k`.
#[derive(Clone, Debug, PartialEq)]
pub struct Constraint {
    pub delta: SparseVec,
    pub loss: f64,
}

impl Constraint {
    pub fn violation(&self, w: &[f64]) -> f64 {
        self.loss - self.delta.dot_dense(w)
    }
}

/// Supplies the most violated constraint of each sample at a given `w`.
pub trait ConstraintOracle: Sync {
    fn num_samples(&self) -> usize;
    fn dim(&self) -> usize;
    /// `None` means the sample has no constraint worth adding (its most
    /// violated constraint is the trivial one with zero loss and zero delta).
    fn most_violated(&self, sample: usize, w: &[f64]) -> Option<Constraint>;

    /// Most violated constraint of every sample, in sample order.
    fn most_violated_all(&self, w: &[f64]) -> Vec<Option<Constraint>> {
        (0..self.num_samples()).into_par_iter().map(|k| self.most_violated(k, w)).collect()
    }
}

/// A finite, explicitly listed constraint family per sample.
#[derive(Clone, Debug)]
pub struct FixedConstraints {
    pub dim: usize,
    pub per_sample: Vec<Vec<Constraint>>,
}

impl ConstraintOracle for FixedConstraints {
    fn num_samples(&self) -> usize {
        self.per_sample.len()
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn most_violated(&self, sample: usize, w: &[f64]) -> Option<Constraint> {
        let mut best: Option<(f64, &Constraint)> = None;
        for c in &self.per_sample[sample] {
            let v = c.violation(w);
            if best.is_none_or(|(b, _)| v > b) {
                best = Some((v, c));
            }
        }
        best.map(|(_, c)| c.clone())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    /// Regularization constant `D`, also the per-sample dual budget.
    pub d: f64,
    /// A constraint enters the working set when it beats the sample's slack by
    /// more than this.
    pub tol: f64,
    /// Cutting-plane rounds before giving up.
    pub max_iters: usize,
    /// SMO stops when every sample's KKT gap is below this.
    pub smo_tol: f64,
    pub max_smo_sweeps: usize,
    /// Constraints idle (alpha = 0) for this many consecutive solves are dropped.
    pub prune_after: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig { d: 0.005, tol: 1e-4, max_iters: 200, smo_tol: 1e-7, max_smo_sweeps: 100_000, prune_after: 10 }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.d > 0.0) || !(self.tol > 0.0) || !(self.smo_tol > 0.0) || self.max_iters == 0 {
            return Err(Error::InvalidConfig("solver needs d > 0, tol > 0, smo_tol > 0 and max_iters >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Entry {
    sample: usize,
    c: Constraint,
    alpha: f64,
    idle: usize,
}

/// Constraints and multipliers. Keeps the Gram matrix of the constraint
/// deltas and the dual gradient `loss_c - (K alpha)_c`, which equals the
/// violation `loss_c - w . delta_c`.
#[derive(Clone, Debug)]
pub struct WorkingSet {
    dim: usize,
    budget: f64,
    entries: Vec<Entry>,
    by_sample: Vec<Vec<usize>>,
    kernel: Vec<Vec<f64>>,
    grad: Vec<f64>,
    w: Vec<f64>,
}

impl WorkingSet {
    pub fn new(num_samples: usize, dim: usize, budget: f64) -> Self {
        WorkingSet {
            dim,
            budget,
            entries: Vec::new(),
            by_sample: vec![Vec::new(); num_samples],
            kernel: Vec::new(),
            grad: Vec::new(),
            w: vec![0.0; dim],
        }
    }

    /// `w` as of the last [`WorkingSet::smo_solve`] (or construction).
    pub fn w(&self) -> &[f64] {
        &self.w
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn push(&mut self, sample: usize, c: Constraint) {
        assert_eq!(c.delta.dim(), self.dim, "constraint dimension");
        let row: Vec<f64> = self.entries.iter().map(|e| e.c.delta.dot(&c.delta)).collect();
        let self_k = c.delta.norm_sq();
        for (r, &v) in self.kernel.iter_mut().zip(&row) {
            r.push(v);
        }
        let mut row = row;
        row.push(self_k);
        let g = c.loss - self.entries.iter().zip(&row).map(|(e, k)| e.alpha * k).sum::<f64>();
        self.kernel.push(row);
        self.grad.push(g);
        self.by_sample[sample].push(self.entries.len());
        self.entries.push(Entry { sample, c, alpha: 0.0, idle: 0 });
    }

    /// Multipliers per sample, in insertion order.
    pub fn alphas(&self) -> Vec<Vec<f64>> {
        self.by_sample.iter().map(|ix| ix.iter().map(|&j| self.entries[j].alpha).collect()).collect()
    }

    pub fn constraints(&self, sample: usize) -> impl Iterator<Item = &Constraint> {
        self.by_sample[sample].iter().map(|&j| &self.entries[j].c)
    }

    /// Working-set slack `max(0, max_c loss_c - w . delta_c)` of a sample.
    pub fn slack(&self, sample: usize) -> f64 {
        self.by_sample[sample].iter().map(|&j| self.grad[j]).fold(0.0, f64::max)
    }

    pub fn reconstruct_w(&self) -> Vec<f64> {
        let mut w = vec![0.0; self.dim];
        for e in &self.entries {
            if e.alpha != 0.0 {
                e.c.delta.add_scaled_to(&mut w, e.alpha);
            }
        }
        w
    }

    pub fn dual_objective(&self) -> f64 {
        // alpha' K alpha = sum alpha_c (loss_c - grad_c)
        self.entries
            .iter()
            .zip(&self.grad)
            .map(|(e, g)| e.alpha * e.c.loss - 0.5 * e.alpha * (e.c.loss - g))
            .sum()
    }

    /// Primal objective restricted to the working set.
    pub fn primal_objective(&self) -> f64 {
        let w_sq: f64 = self.entries.iter().zip(&self.grad).map(|(e, g)| e.alpha * (e.c.loss - g)).sum();
        let slack: f64 = (0..self.by_sample.len()).map(|k| self.slack(k)).sum();
        0.5 * w_sq + self.budget * slack
    }

    /// Most violating pair of a sample. Index `None` is the implicit slack
    /// variable (zero delta, zero loss, multiplier `budget - sum alpha`).
    fn worst_pair(&self, sample: usize) -> (f64, Option<usize>, Option<usize>) {
        let ix = &self.by_sample[sample];
        let free = self.budget - ix.iter().map(|&j| self.entries[j].alpha).sum::<f64>();
        let dust = self.budget * MASS_EPS;
        let (mut up, mut up_g) = (None, 0.0);
        let (mut down, mut down_g) = (None, if free > dust { 0.0 } else { f64::INFINITY });
        for &j in ix {
            let g = self.grad[j];
            if g > up_g {
                up = Some(j);
                up_g = g;
            }
            if self.entries[j].alpha > dust && g < down_g {
                down = Some(j);
                down_g = g;
            }
        }
        (up_g - down_g, up, down)
    }

    /// KKT residual: over samples, the largest gradient gap between a variable
    /// that could grow and one that holds mass. Zero at the dual optimum.
    pub fn kkt_residual(&self) -> f64 {
        (0..self.by_sample.len())
            .map(|k| {
                let (gap, _, _) = self.worst_pair(k);
                if gap.is_finite() {
                    gap.max(0.0)
                } else {
                    0.0
                }
            })
            .fold(0.0, f64::max)
    }

    /// One analytic pairwise update inside a sample: mass moves from `down` to
    /// `up`. Returns the dual increase.
    fn smo_pair(&mut self, sample: usize, up: Option<usize>, down: Option<usize>, gap: f64) -> f64 {
        let free = self.budget - self.by_sample[sample].iter().map(|&j| self.entries[j].alpha).sum::<f64>();
        let curv = match (up, down) {
            (Some(a), Some(b)) => self.kernel[a][a] + self.kernel[b][b] - 2.0 * self.kernel[a][b],
            (Some(a), None) => self.kernel[a][a],
            (None, Some(b)) => self.kernel[b][b],
            (None, None) => return 0.0,
        };
        let cap = match down {
            Some(b) => self.entries[b].alpha,
            None => free.max(0.0),
        };
        let t = if curv > 0.0 { (gap / curv).min(cap) } else { cap };
        if t <= 0.0 {
            return 0.0;
        }
        if let Some(a) = up {
            self.entries[a].alpha += t;
            for (g, k) in self.grad.iter_mut().zip(&self.kernel[a]) {
                *g -= t * k;
            }
        }
        if let Some(b) = down {
            let e = &mut self.entries[b];
            e.alpha = if t >= e.alpha { 0.0 } else { e.alpha - t };
            for (g, k) in self.grad.iter_mut().zip(&self.kernel[b]) {
                *g += t * k;
            }
        }
        t * gap - 0.5 * t * t * curv
    }

    /// One sweep of SMO over all samples. Returns the largest gap seen.
    pub fn smo_step(&mut self) -> f64 {
        let mut worst: f64 = 0.0;
        for k in 0..self.by_sample.len() {
            let (gap, up, down) = self.worst_pair(k);
            if gap.is_finite() && gap > 0.0 {
                worst = worst.max(gap);
                self.smo_pair(k, up, down, gap);
            }
        }
        worst
    }

    fn refresh(&mut self) {
        for (j, e) in self.entries.iter().enumerate() {
            let ka: f64 = self.entries.iter().zip(&self.kernel[j]).map(|(o, k)| o.alpha * k).sum();
            self.grad[j] = e.c.loss - ka;
        }
        self.w = self.reconstruct_w();
    }

    /// Runs SMO sweeps until the KKT residual drops below `tol` or the sweep
    /// budget runs out, then rebuilds the gradient and `w` from the multipliers.
    pub fn smo_solve(&mut self, tol: f64, max_sweeps: usize) -> usize {
        let mut sweeps = 0;
        while sweeps < max_sweeps {
            sweeps += 1;
            if self.smo_step() <= tol {
                break;
            }
        }
        self.refresh();
        sweeps
    }

    fn prune(&mut self, after: usize) -> usize {
        for e in &mut self.entries {
            e.idle = if e.alpha == 0.0 { e.idle + 1 } else { 0 };
        }
        let keep: Vec<bool> = self.entries.iter().map(|e| e.idle < after).collect();
        let dropped = keep.iter().filter(|&&k| !k).count();
        if dropped == 0 {
            return 0;
        }
        let mut it = keep.iter();
        self.entries.retain(|_| *it.next().unwrap());
        let mut it = keep.iter();
        self.grad.retain(|_| *it.next().unwrap());
        let mut it = keep.iter();
        self.kernel.retain(|_| *it.next().unwrap());
        for row in &mut self.kernel {
            let mut it = keep.iter();
            row.retain(|_| *it.next().unwrap());
        }
        for ix in &mut self.by_sample {
            ix.clear();
        }
        for (j, e) in self.entries.iter().enumerate() {
            self.by_sample[e.sample].push(j);
        }
        dropped
    }
}

/// One cutting-plane round.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    /// Primal objective at the round's `w`, with slacks from the oracle.
    pub primal: f64,
    /// Lowest primal seen so far; non-increasing.
    pub best_primal: f64,
    /// Dual objective of the working set.
    pub dual: f64,
    /// Samples whose most violated constraint beat their slack by more than tol.
    pub violations: usize,
    pub max_excess: f64,
    pub working_set: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub w: Vec<f64>,
    /// Multipliers divided by `D`, so each sample's sum is at most one.
    pub alpha_normalized: Vec<Vec<f64>>,
    pub trace: Vec<TraceRow>,
    pub iterations: usize,
    pub converged: bool,
    pub primal: f64,
    pub dual: f64,
    /// Largest amount by which an oracle constraint exceeds its sample's slack.
    pub max_violation: f64,
    pub kkt_residual: f64,
}

impl SolveReport {
    pub fn write_trace_csv(&self, out: &mut impl Write) -> std::io::Result<()> {
        writeln!(out, "iteration,primal,best_primal,dual,violations,max_excess,working_set")?;
        for r in &self.trace {
            writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.iteration, r.primal, r.best_primal, r.dual, r.violations, r.max_excess, r.working_set
            )?;
        }
        Ok(())
    }

    pub fn save_trace_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_trace_csv(&mut f).map_err(|e| Error::io(path, e))
    }
}

/// Primal objective at `w`, with each slack taken from the oracle's most
/// violated constraint.
pub fn primal_objective(oracle: &dyn ConstraintOracle, w: &[f64], d: f64) -> f64 {
    let found = query(oracle, w);
    0.5 * dot(w, w) + d * found.iter().map(|c| c.as_ref().map_or(0.0, |c| c.violation(w).max(0.0))).sum::<f64>()
}

fn query(oracle: &dyn ConstraintOracle, w: &[f64]) -> Vec<Option<Constraint>> {
    let found = oracle.most_violated_all(w);
    assert_eq!(found.len(), oracle.num_samples(), "oracle returned a result per sample");
    found
}

/// Cutting-plane training. Errors with the partial report when the round
/// budget runs out before no constraint is violated by more than `tol`.
pub fn solve(oracle: &dyn ConstraintOracle, cfg: &SolverConfig) -> Result<SolveReport> {
    cfg.validate()?;
    let n = oracle.num_samples();
    let mut ws = WorkingSet::new(n, oracle.dim(), cfg.d);
    let mut trace: Vec<TraceRow> = Vec::new();
    let mut best = f64::INFINITY;
    let mut converged = false;
    let mut last_primal = 0.0;
    let mut max_excess = 0.0;

    for it in 0..cfg.max_iters {
        let found = query(oracle, ws.w());
        let mut slack_sum = 0.0;
        let mut violations = 0;
        max_excess = 0.0_f64;
        let mut fresh = Vec::new();
        for (k, c) in found.into_iter().enumerate() {
            let Some(c) = c else { continue };
            let v = c.violation(ws.w());
            slack_sum += v.max(0.0);
            let excess = v - ws.slack(k);
            max_excess = max_excess.max(excess);
            if excess > cfg.tol {
                violations += 1;
                fresh.push((k, c));
            }
        }
        last_primal = 0.5 * dot(ws.w(), ws.w()) + cfg.d * slack_sum;
        best = best.min(last_primal);
        trace.push(TraceRow {
            iteration: it,
            primal: last_primal,
            best_primal: best,
            dual: ws.dual_objective(),
            violations,
            max_excess,
            working_set: ws.len(),
        });
        log::debug!("cutting plane {it}: primal {last_primal:.6e} dual {:.6e} violated {violations}", ws.dual_objective());
        if fresh.is_empty() {
            converged = true;
            break;
        }
        for (k, c) in fresh {
            ws.push(k, c);
        }
        ws.smo_solve(cfg.smo_tol, cfg.max_smo_sweeps);
        ws.prune(cfg.prune_after);
    }

    let report = SolveReport {
        w: ws.w().to_vec(),
        alpha_normalized: ws.alphas().into_iter().map(|a| a.into_iter().map(|x| x / cfg.d).collect()).collect(),
        iterations: trace.len(),
        converged,
        primal: last_primal,
        dual: ws.dual_objective(),
        max_violation: max_excess,
        kkt_residual: ws.kkt_residual(),
        trace,
    };
    if converged {
        Ok(report)
    } else {
        Err(Error::NonConvergence(Box::new(report)))
    }
}
