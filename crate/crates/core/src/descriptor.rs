//! Composite contour descriptor: a triangle histogram and a coarse shape
//! context per sample point, concatenated over 20 arc-length samples.
//!
//! Binning conventions:
//! - distances are divided by the mean pairwise distance of the point set and
//!   split into "near" (< 1) and "far" (>= 1);
//! - triangle angles cover [0, pi] in 6 bins, shape-context orientations cover
//!   [0, 2pi) in 6 bins measured in raw image coordinates;
//! - a value within a relative 1e-9 of a bin edge counts as on the edge and
//!   goes to the upper bin, so straight and axis-aligned contours bin the same
//!   way under translation and scaling;
//! - a pair {A, B} is ordered so that B, T, A runs clockwise on screen (y axis
//!   pointing down); collinear triples take the lower point index as A and
//!   count as angle 0.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::geometry::{clip_to_block, resample_chains, Point2, Polyline, Rect, Window};

pub const SAMPLE_COUNT: usize = 20;
pub const DIST_BINS: usize = 2;
pub const ANGLE_BINS: usize = 6;
pub const ORIENT_BINS: usize = 6;
pub const TRIANGLE_BINS: usize = DIST_BINS * DIST_BINS * ANGLE_BINS;
pub const CONTEXT_BINS: usize = DIST_BINS * ORIENT_BINS;
pub const POINT_DIM: usize = TRIANGLE_BINS + CONTEXT_BINS;
pub const FEATURE_DIM: usize = POINT_DIM * SAMPLE_COUNT;
pub const DEFORMATION_DIM: usize = 4;

/// Relative cross-product magnitude below which a triangle counts as flat.
const COLLINEAR_EPS: f64 = 1e-10;
/// Relative distance to a bin edge treated as a tie.
const EDGE_EPS: f64 = 1e-9;

/// Exactly [`SAMPLE_COUNT`] points with a positive mean pairwise distance.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplePoints {
    points: Vec<Point2>,
    mean_distance: f64,
}

impl SamplePoints {
    pub fn new(points: Vec<Point2>) -> Result<Self> {
        if points.len() != SAMPLE_COUNT {
            return Err(Error::InsufficientPoints { needed: SAMPLE_COUNT, got: points.len() });
        }
        let mean_distance = mean_pairwise_distance(&points);
        if !(mean_distance > 0.0 && mean_distance.is_finite()) {
            return Err(Error::DegenerateContour);
        }
        Ok(SamplePoints { points, mean_distance })
    }

    pub fn points(&self) -> &[Point2] {
        &self.points
    }

    pub fn mean_distance(&self) -> f64 {
        self.mean_distance
    }

    pub fn descriptor(&self) -> FragmentFeature {
        let mut values = vec![0.0; FEATURE_DIM];
        for (t, block) in values.chunks_exact_mut(POINT_DIM).enumerate() {
            let (tri, ctx) = block.split_at_mut(TRIANGLE_BINS);
            triangle_into(&self.points, t, self.mean_distance, tri);
            context_into(&self.points, t, self.mean_distance, ctx);
        }
        FragmentFeature(values)
    }
}

/// 720-dimensional descriptor of a fragment (or of a whole assembled shape).
#[derive(Clone, Debug, PartialEq)]
pub struct FragmentFeature(Vec<f64>);

pub type RootFeature = FragmentFeature;

impl FragmentFeature {
    pub fn zeros() -> Self {
        FragmentFeature(vec![0.0; FEATURE_DIM])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|&v| v == 0.0)
    }
}

/// Displacement of a block from its anchor, normalized by the block size:
/// `(dx, dy, dx^2, dy^2)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DeformationFeature(pub [f64; DEFORMATION_DIM]);

pub fn mean_pairwise_distance(points: &[Point2]) -> f64 {
    let n = points.len();
    if n < 2 {
        return 0.0;
    }
    let mut sum = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            sum += points[i].dist(points[j]);
        }
    }
    sum / (n * (n - 1) / 2) as f64
}

fn dist_bin(d: f64, mean: f64) -> usize {
    usize::from(d >= mean * (1.0 - EDGE_EPS))
}

fn triangle_into(points: &[Point2], t: usize, mean: f64, out: &mut [f64]) {
    out.fill(0.0);
    let origin = points[t];
    let others: Vec<(Point2, f64, usize)> = points
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != t)
        .map(|(_, &p)| {
            let v = p - origin;
            let l = v.x.hypot(v.y);
            (v, l, dist_bin(l, mean))
        })
        .collect();
    // bin k covers angles [k pi/6, (k+1) pi/6); compared through the cosine
    let bounds: [f64; ANGLE_BINS - 1] = std::array::from_fn(|k| ((k + 1) as f64 * PI / ANGLE_BINS as f64).cos());
    let mut pairs = 0usize;
    for (a, &(vp, lp, bp)) in others.iter().enumerate() {
        for &(vq, lq, bq) in &others[a + 1..] {
            let cross = vp.x * vq.y - vp.y * vq.x;
            let flat = lp == 0.0 || lq == 0.0 || cross.abs() <= COLLINEAR_EPS * lp * lq;
            // (|TA|, |TB|): P is B when cross < 0, A otherwise (ties: lower index is A)
            let (ba, bb) = if !flat && cross < 0.0 { (bq, bp) } else { (bp, bq) };
            let abin = if flat {
                0
            } else {
                let dot = vp.x * vq.x + vp.y * vq.y;
                let scale = lp * lq;
                bounds.iter().take_while(|&&b| dot <= (b + EDGE_EPS) * scale).count()
            };
            let idx = (ba * DIST_BINS + bb) * ANGLE_BINS + abin;
            out[idx] += 1.0;
            pairs += 1;
        }
    }
    let inv = 1.0 / pairs as f64;
    out.iter_mut().for_each(|v| *v *= inv);
}

fn context_into(points: &[Point2], t: usize, mean: f64, out: &mut [f64]) {
    out.fill(0.0);
    let origin = points[t];
    let mut count = 0usize;
    for (i, &p) in points.iter().enumerate() {
        if i == t {
            continue;
        }
        let v = p - origin;
        let mut theta = v.y.atan2(v.x);
        if theta < 0.0 {
            theta += 2.0 * PI;
        }
        let mut q = theta / (2.0 * PI / ORIENT_BINS as f64);
        if (q - q.round()).abs() < EDGE_EPS {
            q = q.round();
        }
        let obin = (q as usize) % ORIENT_BINS;
        out[dist_bin(v.x.hypot(v.y), mean) * ORIENT_BINS + obin] += 1.0;
        count += 1;
    }
    let inv = 1.0 / count as f64;
    out.iter_mut().for_each(|v| *v *= inv);
}

fn check_index(points: &[Point2], t: usize, needed: usize) -> Result<f64> {
    if points.len() < needed {
        return Err(Error::InsufficientPoints { needed, got: points.len() });
    }
    if t >= points.len() {
        return Err(Error::InvalidConfig(format!("point index {t} out of range for {} points", points.len())));
    }
    let mean = mean_pairwise_distance(points);
    if !(mean > 0.0) {
        return Err(Error::DegenerateContour);
    }
    Ok(mean)
}

/// 24-bin triangle histogram of point `t` over all unordered pairs of the
/// other points, L1-normalized.
pub fn triangle_descriptor(points: &[Point2], t: usize) -> Result<[f64; TRIANGLE_BINS]> {
    let mean = check_index(points, t, 3)?;
    let mut out = [0.0; TRIANGLE_BINS];
    triangle_into(points, t, mean, &mut out);
    Ok(out)
}

/// 12-bin shape context of point `t` (2 radial x 6 orientation bins),
/// L1-normalized.
pub fn shape_context(points: &[Point2], t: usize) -> Result<[f64; CONTEXT_BINS]> {
    let mean = check_index(points, t, 2)?;
    let mut out = [0.0; CONTEXT_BINS];
    context_into(points, t, mean, &mut out);
    Ok(out)
}

/// Descriptor of the concatenated chains, resampled to 20 points. Zero when
/// there is nothing to describe.
pub fn chains_feature(chains: &[&[Point2]]) -> FragmentFeature {
    match resample_chains(chains, SAMPLE_COUNT).and_then(SamplePoints::new) {
        Ok(samples) => samples.descriptor(),
        Err(_) => FragmentFeature::zeros(),
    }
}

/// Leaf feature of fragment `c` seen through `block`: only the part inside the
/// block counts, and a fragment missing the block yields the zero vector.
pub fn fragment_feature(block: &Rect, c: &Polyline) -> FragmentFeature {
    let pieces = clip_to_block(c, block);
    let chains: Vec<&[Point2]> = pieces.iter().map(|p| p.points.as_slice()).collect();
    chains_feature(&chains)
}

pub fn deformation_feature(p0: Point2, anchor: Point2, p: Point2, block_w: f64, block_h: f64) -> DeformationFeature {
    let dx = (p.x - (p0.x + anchor.x)) / block_w;
    let dy = (p.y - (p0.y + anchor.y)) / block_h;
    DeformationFeature([dx, dy, dx * dx, dy * dy])
}

/// Whole-shape feature: 20 samples spread by arc length over all selected
/// fragments (in the given order), restricted to the window.
pub fn root_feature(fragments: &[Polyline], window: &Window) -> RootFeature {
    let frame = window.rect();
    let pieces: Vec<Polyline> = fragments.iter().flat_map(|c| clip_to_block(c, &frame)).collect();
    let chains: Vec<&[Point2]> = pieces.iter().map(|p| p.points.as_slice()).collect();
    chains_feature(&chains)
}
