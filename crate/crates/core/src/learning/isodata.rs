//! ISODATA clustering over leaf slots with an external admission test.
//!
//! Cluster labels are leaf-slot indices in `0..max_clusters`. Every move
//! (reassigning an item, dropping an empty cluster, splitting, merging) is
//! proposed to a gate that sees the tentative labeling and may refuse it.

use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IsodataConfig {
    /// Clusters merge when their centroids are closer than this factor times
    /// the mean item-to-centroid distance, or when their union could not split.
    pub merge_factor: f64,
    /// A cluster splits when its variance exceeds this factor times the mean
    /// squared nearest-neighbor distance between items.
    pub split_factor: f64,
    /// Clusters with a variance (mean squared distance to the centroid) at or
    /// below this never split.
    pub min_split_variance: f64,
    pub min_split_size: usize,
    pub max_sweeps: usize,
    pub kmeans_iters: usize,
}

impl Default for IsodataConfig {
    fn default() -> Self {
        IsodataConfig { merge_factor: 0.5, split_factor: 2.0, min_split_variance: 1.0, min_split_size: 4, max_sweeps: 5, kmeans_iters: 10 }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ClusterEvent {
    /// A new cluster was split off `from` into slot `slot`.
    Create { from: usize, slot: usize, size: usize },
    /// Cluster `dropped` was folded into `kept`.
    Merge { kept: usize, dropped: usize },
    /// An empty cluster's slot was released.
    Remove { slot: usize },
    /// Items changed cluster during a reassignment pass.
    Reassign { moved: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Clustering {
    pub labels: Vec<usize>,
    /// Per slot: does the cluster exist.
    pub active: Vec<bool>,
    pub events: Vec<ClusterEvent>,
}

impl Clustering {
    pub fn num_clusters(&self) -> usize {
        self.active.iter().filter(|&&a| a).count()
    }
}

fn dist_sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn centroid(items: &[&[f64]], members: impl Iterator<Item = usize>) -> Option<Vec<f64>> {
    let mut sum: Option<Vec<f64>> = None;
    let mut n = 0usize;
    for k in members {
        let s = sum.get_or_insert_with(|| vec![0.0; items[k].len()]);
        for (d, v) in s.iter_mut().zip(items[k]) {
            *d += v;
        }
        n += 1;
    }
    sum.map(|mut s| {
        s.iter_mut().for_each(|v| *v /= n as f64);
        s
    })
}

fn centroids(items: &[&[f64]], labels: &[usize], slots: usize) -> Vec<Option<Vec<f64>>> {
    (0..slots).map(|s| centroid(items, (0..items.len()).filter(|&k| labels[k] == s))).collect()
}

/// Mean squared distance of each item to its nearest other item.
pub fn mean_nn_sq(items: &[&[f64]]) -> f64 {
    if items.len() < 2 {
        return 0.0;
    }
    let total: f64 = (0..items.len())
        .map(|i| {
            (0..items.len()).filter(|&j| j != i).map(|j| dist_sq(items[i], items[j])).fold(f64::INFINITY, f64::min)
        })
        .sum();
    total / items.len() as f64
}

/// Mean squared distance to the centroid.
fn variance(items: &[&[f64]], members: &[usize], c: &[f64]) -> f64 {
    members.iter().map(|&k| dist_sq(items[k], c)).sum::<f64>() / members.len() as f64
}

/// Two-means on `members`, seeded with the item farthest from the centroid
/// and the item farthest from that one. Returns the half that should leave.
fn two_means(items: &[&[f64]], members: &[usize], c: &[f64], iters: usize) -> Vec<usize> {
    let far = |from: &[f64]| {
        let mut best = (f64::NEG_INFINITY, members[0]);
        for &k in members {
            let d = dist_sq(items[k], from);
            if d > best.0 {
                best = (d, k);
            }
        }
        best.1
    };
    let a = far(c);
    let b = far(items[a]);
    let mut ca = items[a].to_vec();
    let mut cb = items[b].to_vec();
    let mut side: Vec<bool> = Vec::new();
    for _ in 0..iters.max(1) {
        let next: Vec<bool> = members.iter().map(|&k| dist_sq(items[k], &cb) < dist_sq(items[k], &ca)).collect();
        if next == side {
            break;
        }
        side = next;
        let ia: Vec<usize> = members.iter().zip(&side).filter(|(_, &s)| !s).map(|(&k, _)| k).collect();
        let ib: Vec<usize> = members.iter().zip(&side).filter(|(_, &s)| s).map(|(&k, _)| k).collect();
        if ia.is_empty() || ib.is_empty() {
            break;
        }
        ca = centroid(items, ia.into_iter()).unwrap();
        cb = centroid(items, ib.into_iter()).unwrap();
    }
    // the half holding the lowest-indexed member stays
    let stay = side.first().copied().unwrap_or(false);
    members.iter().zip(&side).filter(|(_, &s)| s != stay).map(|(&k, _)| k).collect()
}

/// Runs gated ISODATA starting from `labels` with the clusters flagged in
/// `active`. Slots in `active` that hold no item are released when the gate
/// allows. `gate(labels, active)` decides whether a tentative state is
/// admissible.
pub fn isodata(
    items: &[&[f64]],
    labels: Vec<usize>,
    active: Vec<bool>,
    cfg: &IsodataConfig,
    gate: &mut dyn FnMut(&[usize], &[bool]) -> bool,
) -> Clustering {
    let slots = active.len();
    assert_eq!(items.len(), labels.len());
    assert!(labels.iter().all(|&l| l < slots && active[l]), "every item needs an active cluster");
    let mut st = Clustering { labels, active, events: Vec::new() };
    let nn_ref = mean_nn_sq(items);

    for _ in 0..cfg.max_sweeps {
        let mut changed = false;

        // reassignment, largest improvement first
        let cents = centroids(items, &st.labels, slots);
        let mut proposals: Vec<(f64, usize, usize)> = Vec::new();
        for (k, x) in items.iter().enumerate() {
            let own = dist_sq(x, cents[st.labels[k]].as_ref().unwrap());
            let mut best = (own, st.labels[k]);
            for (s, c) in cents.iter().enumerate() {
                if let Some(c) = c {
                    let d = dist_sq(x, c);
                    if d < best.0 {
                        best = (d, s);
                    }
                }
            }
            if best.1 != st.labels[k] {
                proposals.push((own - best.0, k, best.1));
            }
        }
        proposals.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let mut moved = 0;
        for (_, k, to) in proposals {
            let from = st.labels[k];
            st.labels[k] = to;
            if gate(&st.labels, &st.active) {
                moved += 1;
            } else {
                st.labels[k] = from;
            }
        }
        if moved > 0 {
            st.events.push(ClusterEvent::Reassign { moved });
            changed = true;
        }

        // release empty clusters
        for s in 0..slots {
            if st.active[s] && !st.labels.contains(&s) {
                st.active[s] = false;
                if gate(&st.labels, &st.active) {
                    st.events.push(ClusterEvent::Remove { slot: s });
                    changed = true;
                } else {
                    st.active[s] = true;
                }
            }
        }

        // splits, highest variance first
        let cents = centroids(items, &st.labels, slots);
        let mut splits: Vec<(f64, usize)> = Vec::new();
        for s in 0..slots {
            let members: Vec<usize> = (0..items.len()).filter(|&k| st.labels[k] == s).collect();
            if members.len() < cfg.min_split_size {
                continue;
            }
            let v = variance(items, &members, cents[s].as_ref().unwrap());
            if v > cfg.split_factor * nn_ref && v > cfg.min_split_variance {
                splits.push((v, s));
            }
        }
        splits.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        for (_, s) in splits {
            let Some(free) = st.active.iter().position(|a| !a) else { break };
            let members: Vec<usize> = (0..items.len()).filter(|&k| st.labels[k] == s).collect();
            let c = centroid(items, members.iter().copied()).unwrap();
            let leaving = two_means(items, &members, &c, cfg.kmeans_iters);
            if leaving.is_empty() || leaving.len() == members.len() {
                continue;
            }
            let before = st.labels.clone();
            for &k in &leaving {
                st.labels[k] = free;
            }
            st.active[free] = true;
            if gate(&st.labels, &st.active) {
                st.events.push(ClusterEvent::Create { from: s, slot: free, size: leaving.len() });
                changed = true;
            } else {
                st.labels = before;
                st.active[free] = false;
            }
        }

        // merges, closest pair first
        let cents = centroids(items, &st.labels, slots);
        let spread: f64 = items
            .iter()
            .enumerate()
            .map(|(k, x)| dist_sq(x, cents[st.labels[k]].as_ref().unwrap()).sqrt())
            .sum::<f64>()
            / items.len().max(1) as f64;
        let theta = cfg.merge_factor * spread;
        let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
        for a in 0..slots {
            for b in a + 1..slots {
                if let (Some(ca), Some(cb)) = (&cents[a], &cents[b]) {
                    let d = dist_sq(ca, cb).sqrt();
                    // a union too tight to be split again also merges
                    let close = d <= theta || {
                        let members: Vec<usize> = (0..items.len()).filter(|&k| st.labels[k] == a || st.labels[k] == b).collect();
                        let c = centroid(items, members.iter().copied()).unwrap();
                        variance(items, &members, &c) <= cfg.min_split_variance
                    };
                    if close {
                        pairs.push((d, a, b));
                    }
                }
            }
        }
        pairs.sort_by(|x, y| x.0.total_cmp(&y.0).then((x.1, x.2).cmp(&(y.1, y.2))));
        for (_, a, b) in pairs {
            if !st.active[a] || !st.active[b] {
                continue;
            }
            let before = st.labels.clone();
            st.labels.iter_mut().filter(|l| **l == b).for_each(|l| *l = a);
            st.active[b] = false;
            if gate(&st.labels, &st.active) {
                st.events.push(ClusterEvent::Merge { kept: a, dropped: b });
                changed = true;
            } else {
                st.labels = before;
                st.active[b] = true;
            }
        }

        if !changed {
            break;
        }
    }
    st
}
