//! Contour geometry: points, polylines, edge maps, detection windows and the
//! 2x3 block grid, plus arc-length resampling and block clipping.

use std::collections::HashSet;
use std::ops::{Add, Mul, Sub};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Point2 { x, y }
    }

    pub fn dist(self, other: Point2) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    pub fn lerp(self, other: Point2, t: f64) -> Point2 {
        Point2::new(self.x + t * (other.x - self.x), self.y + t * (other.y - self.y))
    }
}

impl From<[f64; 2]> for Point2 {
    fn from(v: [f64; 2]) -> Self {
        Point2::new(v[0], v[1])
    }
}

impl From<Point2> for [f64; 2] {
    fn from(p: Point2) -> Self {
        [p.x, p.y]
    }
}

impl Add for Point2 {
    type Output = Point2;
    fn add(self, o: Point2) -> Point2 {
        Point2::new(self.x + o.x, self.y + o.y)
    }
}

impl Sub for Point2 {
    type Output = Point2;
    fn sub(self, o: Point2) -> Point2 {
        Point2::new(self.x - o.x, self.y - o.y)
    }
}

impl Mul<f64> for Point2 {
    type Output = Point2;
    fn mul(self, s: f64) -> Point2 {
        Point2::new(self.x * s, self.y * s)
    }
}

/// Axis-aligned rectangle given by its top-left corner and extent.
/// Serialized as `[x, y, w, h]`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct Rect {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl Rect {
    pub const fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        Rect { x, y, w, h }
    }

    pub fn centered(center: Point2, w: f64, h: f64) -> Self {
        Rect::new(center.x - 0.5 * w, center.y - 0.5 * h, w, h)
    }

    pub fn x1(&self) -> f64 {
        self.x + self.w
    }

    pub fn y1(&self) -> f64 {
        self.y + self.h
    }

    pub fn area(&self) -> f64 {
        self.w.max(0.0) * self.h.max(0.0)
    }

    pub fn center(&self) -> Point2 {
        Point2::new(self.x + 0.5 * self.w, self.y + 0.5 * self.h)
    }

    pub fn contains(&self, p: Point2) -> bool {
        p.x >= self.x && p.x <= self.x1() && p.y >= self.y && p.y <= self.y1()
    }

    pub fn intersects(&self, other: &Rect) -> bool {
        self.x <= other.x1() && other.x <= self.x1() && self.y <= other.y1() && other.y <= self.y1()
    }

    pub fn intersection_area(&self, other: &Rect) -> f64 {
        let w = self.x1().min(other.x1()) - self.x.max(other.x);
        let h = self.y1().min(other.y1()) - self.y.max(other.y);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    /// Intersection over union; 0 when either box has no area.
    pub fn iou(&self, other: &Rect) -> f64 {
        let inter = self.intersection_area(other);
        let union = self.area() + other.area() - inter;
        if union <= 0.0 || self.area() <= 0.0 || other.area() <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    pub fn bounding(points: &[Point2]) -> Rect {
        let (mut x0, mut y0) = (f64::INFINITY, f64::INFINITY);
        let (mut x1, mut y1) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
        for p in points {
            x0 = x0.min(p.x);
            y0 = y0.min(p.y);
            x1 = x1.max(p.x);
            y1 = y1.max(p.y);
        }
        Rect::new(x0, y0, x1 - x0, y1 - y0)
    }
}

impl From<[f64; 4]> for Rect {
    fn from(v: [f64; 4]) -> Self {
        Rect::new(v[0], v[1], v[2], v[3])
    }
}

impl From<Rect> for [f64; 4] {
    fn from(r: Rect) -> Self {
        [r.x, r.y, r.w, r.h]
    }
}

/// An open chain of points. Closed contours repeat their first point at the end.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Polyline {
    pub id: u32,
    pub points: Vec<Point2>,
}

impl Polyline {
    pub fn new(id: u32, points: Vec<Point2>) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::InvalidGeometry(format!(
                "polyline {id} has {} point(s), need at least 2",
                points.len()
            )));
        }
        if let Some(i) = points.iter().position(|p| !p.is_finite()) {
            return Err(Error::InvalidGeometry(format!("polyline {id}: point {i} is not finite")));
        }
        if let Some(i) = points.windows(2).position(|w| w[0] == w[1]) {
            return Err(Error::InvalidGeometry(format!(
                "polyline {id}: points {i} and {} coincide",
                i + 1
            )));
        }
        Ok(Polyline { id, points })
    }

    /// Builds a polyline dropping consecutive duplicate points. Returns `None`
    /// when fewer than two distinct points remain.
    pub fn from_points_lossy(id: u32, points: impl IntoIterator<Item = Point2>) -> Option<Self> {
        let mut out: Vec<Point2> = Vec::new();
        for p in points {
            if out.last() != Some(&p) {
                out.push(p);
            }
        }
        (out.len() >= 2).then_some(Polyline { id, points: out })
    }

    pub fn length(&self) -> f64 {
        chain_length(&self.points)
    }

    pub fn bbox(&self) -> Rect {
        Rect::bounding(&self.points)
    }

    pub fn translated(&self, t: Point2) -> Polyline {
        Polyline { id: self.id, points: self.points.iter().map(|&p| p + t).collect() }
    }
}

pub fn chain_length(points: &[Point2]) -> f64 {
    points.windows(2).map(|w| w[0].dist(w[1])).sum()
}

/// Linked edge polylines of one image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EdgeMap {
    pub width: f64,
    pub height: f64,
    pub polylines: Vec<Polyline>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEdgeMap {
    width: f64,
    height: f64,
    polylines: Vec<RawPolyline>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPolyline {
    id: u32,
    points: Vec<[f64; 2]>,
}

impl EdgeMap {
    pub fn new(width: f64, height: f64, polylines: Vec<Polyline>) -> Result<Self> {
        let map = EdgeMap { width, height, polylines };
        map.validate("edge map")?;
        Ok(map)
    }

    pub fn empty(width: f64, height: f64) -> Self {
        EdgeMap { width, height, polylines: Vec::new() }
    }

    pub fn validate(&self, origin: &str) -> Result<()> {
        if !(self.width > 0.0 && self.width.is_finite()) {
            return Err(Error::malformed(format!("{origin}: width"), "must be positive and finite"));
        }
        if !(self.height > 0.0 && self.height.is_finite()) {
            return Err(Error::malformed(format!("{origin}: height"), "must be positive and finite"));
        }
        let mut seen = HashSet::new();
        let bounds = Rect::new(0.0, 0.0, self.width, self.height);
        for (k, line) in self.polylines.iter().enumerate() {
            let field = format!("{origin}: polylines[{k}]");
            if !seen.insert(line.id) {
                return Err(Error::malformed(format!("{field}.id"), format!("duplicate id {}", line.id)));
            }
            if line.points.len() < 2 {
                return Err(Error::malformed(format!("{field}.points"), "need at least 2 points"));
            }
            for (i, p) in line.points.iter().enumerate() {
                if !p.is_finite() {
                    return Err(Error::malformed(format!("{field}.points[{i}]"), "not finite"));
                }
                if !bounds.contains(*p) {
                    return Err(Error::malformed(
                        format!("{field}.points[{i}]"),
                        format!("({}, {}) lies outside {}x{}", p.x, p.y, self.width, self.height),
                    ));
                }
                if i > 0 && line.points[i - 1] == *p {
                    return Err(Error::malformed(
                        format!("{field}.points[{i}]"),
                        "repeats the previous point",
                    ));
                }
            }
        }
        Ok(())
    }

    /// Parses and validates the JSON edge-map format. `origin` names the source
    /// in diagnostics.
    pub fn from_json_str(text: &str, origin: &str) -> Result<Self> {
        let raw: RawEdgeMap = serde_json::from_str(text).map_err(|e| Error::malformed(origin, e.to_string()))?;
        let map = EdgeMap {
            width: raw.width,
            height: raw.height,
            polylines: raw
                .polylines
                .into_iter()
                .map(|p| Polyline { id: p.id, points: p.points.into_iter().map(Point2::from).collect() })
                .collect(),
        };
        map.validate(origin)?;
        Ok(map)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text, &path.display().to_string())
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string(self).expect("edge map serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json_string()).map_err(|e| Error::io(path, e))
    }

    pub fn get(&self, id: u32) -> Option<&Polyline> {
        self.polylines.iter().find(|p| p.id == id)
    }
}

/// A detection window; `origin` is the root position (top-left corner).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Window {
    pub origin: Point2,
    pub width: f64,
    pub height: f64,
    pub scale: f64,
}

impl Window {
    pub fn new(origin: Point2, width: f64, height: f64, scale: f64) -> Self {
        debug_assert!(width > 0.0 && height > 0.0 && scale > 0.0);
        Window { origin, width, height, scale }
    }

    pub fn from_rect(r: Rect, scale: f64) -> Self {
        Window::new(Point2::new(r.x, r.y), r.w, r.h, scale)
    }

    pub fn rect(&self) -> Rect {
        Rect::new(self.origin.x, self.origin.y, self.width, self.height)
    }
}

pub const GRID_ROWS: usize = 2;
pub const GRID_COLS: usize = 3;
pub const NUM_BLOCKS: usize = GRID_ROWS * GRID_COLS;

/// The fixed 2x3 block layout of a window, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockGrid {
    pub blocks: [Rect; NUM_BLOCKS],
    /// Block centers relative to the window origin.
    pub anchors: [Point2; NUM_BLOCKS],
}

impl BlockGrid {
    /// Block centers as fractions of the window extent.
    pub fn anchor_fractions() -> [Point2; NUM_BLOCKS] {
        std::array::from_fn(|i| {
            let (r, c) = (i / GRID_COLS, i % GRID_COLS);
            Point2::new((2 * c + 1) as f64 / (2 * GRID_COLS) as f64, (2 * r + 1) as f64 / (2 * GRID_ROWS) as f64)
        })
    }

    pub fn block_size(window: &Window) -> (f64, f64) {
        (window.width / GRID_COLS as f64, window.height / GRID_ROWS as f64)
    }

    pub fn new(window: &Window) -> Self {
        let (bw, bh) = Self::block_size(window);
        let blocks = std::array::from_fn(|i| {
            let (r, c) = (i / GRID_COLS, i % GRID_COLS);
            Rect::new(window.origin.x + c as f64 * bw, window.origin.y + r as f64 * bh, bw, bh)
        });
        let fr = Self::anchor_fractions();
        let anchors = std::array::from_fn(|i| Point2::new(fr[i].x * window.width, fr[i].y * window.height));
        BlockGrid { blocks, anchors }
    }
}

/// Resamples a polyline to `n` points equally spaced in arc length, using
/// linear interpolation between vertices.
pub fn resample(polyline: &Polyline, n: usize) -> Result<Vec<Point2>> {
    resample_chains(&[polyline.points.as_slice()], n)
}

/// Resamples the concatenation of several chains. Arc length runs through the
/// chains in order; the gaps between chains carry no length.
pub fn resample_chains(chains: &[&[Point2]], n: usize) -> Result<Vec<Point2>> {
    if n < 2 {
        return Err(Error::InvalidConfig(format!("resample needs n >= 2, got {n}")));
    }
    let segments: Vec<(Point2, Point2, f64)> = chains
        .iter()
        .flat_map(|c| c.windows(2).map(|w| (w[0], w[1], w[0].dist(w[1]))))
        .filter(|s| s.2 > 0.0)
        .collect();
    let total: f64 = segments.iter().map(|s| s.2).sum();
    if segments.is_empty() || !(total > 0.0) {
        return Err(Error::DegenerateContour);
    }
    let step = total / (n - 1) as f64;
    let mut out = Vec::with_capacity(n);
    let mut seg = 0;
    let mut seg_start = 0.0;
    for k in 0..n - 1 {
        let s = k as f64 * step;
        while seg + 1 < segments.len() && seg_start + segments[seg].2 < s {
            seg_start += segments[seg].2;
            seg += 1;
        }
        let (a, b, len) = segments[seg];
        let t = ((s - seg_start) / len).clamp(0.0, 1.0);
        out.push(if t == 0.0 { a } else { a.lerp(b, t) });
    }
    out.push(segments[segments.len() - 1].1);
    Ok(out)
}

/// Parametric range of segment `a -> b` inside `r` (Liang-Barsky).
fn clip_segment(a: Point2, b: Point2, r: &Rect) -> Option<(f64, f64)> {
    let d = b - a;
    let mut t0 = 0.0f64;
    let mut t1 = 1.0f64;
    for (p, q) in [(-d.x, a.x - r.x), (d.x, r.x1() - a.x), (-d.y, a.y - r.y), (d.y, r.y1() - a.y)] {
        if p == 0.0 {
            if q < 0.0 {
                return None;
            }
        } else {
            let t = q / p;
            if p < 0.0 {
                t0 = t0.max(t);
            } else {
                t1 = t1.min(t);
            }
        }
    }
    (t0 < t1).then_some((t0, t1))
}

/// Maximal sub-chains of `c` inside `block`, with crossing segments cut at the
/// border. Sub-chains keep the id of `c`.
pub fn clip_to_block(c: &Polyline, block: &Rect) -> Vec<Polyline> {
    let mut out = Vec::new();
    if !c.bbox().intersects(block) {
        return out;
    }
    let mut cur: Vec<Point2> = Vec::new();
    let flush = |cur: &mut Vec<Point2>, out: &mut Vec<Polyline>| {
        if let Some(p) = Polyline::from_points_lossy(c.id, cur.drain(..)) {
            if p.length() > 0.0 {
                out.push(p);
            }
        }
    };
    for w in c.points.windows(2) {
        let (a, b) = (w[0], w[1]);
        match clip_segment(a, b, block) {
            Some((t0, t1)) => {
                let p = if t0 == 0.0 { a } else { a.lerp(b, t0) };
                let q = if t1 == 1.0 { b } else { a.lerp(b, t1) };
                if cur.is_empty() || t0 != 0.0 {
                    flush(&mut cur, &mut out);
                    cur.push(p);
                }
                cur.push(q);
                if t1 < 1.0 {
                    flush(&mut cur, &mut out);
                }
            }
            None => flush(&mut cur, &mut out),
        }
    }
    flush(&mut cur, &mut out);
    out
}

/// Multi-scale sliding-window layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScaleConfig {
    pub num_scales: usize,
    pub per_octave: u32,
    pub base_scale: f64,
    /// Stride as a fraction of the window extent at each scale.
    pub stride_fraction: f64,
}

impl Default for ScaleConfig {
    fn default() -> Self {
        ScaleConfig { num_scales: 6, per_octave: 2, base_scale: 1.0, stride_fraction: 0.125 }
    }
}

impl ScaleConfig {
    pub fn scale(&self, k: usize) -> f64 {
        self.base_scale * 2f64.powf(k as f64 / self.per_octave as f64)
    }

    pub fn validate(&self) -> Result<()> {
        if self.per_octave == 0 || !(self.base_scale > 0.0) || !(self.stride_fraction > 0.0) {
            return Err(Error::InvalidConfig(
                "scales need per_octave > 0, base_scale > 0 and stride_fraction > 0".into(),
            ));
        }
        Ok(())
    }
}

fn positions_along(extent: f64, size: f64, stride: f64) -> usize {
    if size > extent {
        0
    } else {
        ((extent - size) / stride + 1e-9).floor() as usize + 1
    }
}

/// Number of windows `enumerate_windows` yields at scale index `k`.
pub fn window_count(map_w: f64, map_h: f64, base: (f64, f64), cfg: &ScaleConfig, k: usize) -> usize {
    let s = cfg.scale(k);
    let (w, h) = (base.0 * s, base.1 * s);
    positions_along(map_w, w, cfg.stride_fraction * w) * positions_along(map_h, h, cfg.stride_fraction * h)
}

/// All windows fully inside the map, scale by scale, row-major within a scale.
pub fn enumerate_windows<'a>(
    map_w: f64,
    map_h: f64,
    base: (f64, f64),
    cfg: &'a ScaleConfig,
) -> impl Iterator<Item = Window> + 'a {
    (0..cfg.num_scales).flat_map(move |k| {
        let s = cfg.scale(k);
        let (w, h) = (base.0 * s, base.1 * s);
        let (sx, sy) = (cfg.stride_fraction * w, cfg.stride_fraction * h);
        let nx = positions_along(map_w, w, sx);
        let ny = positions_along(map_h, h, sy);
        (0..ny).flat_map(move |iy| {
            (0..nx).map(move |ix| Window::new(Point2::new(ix as f64 * sx, iy as f64 * sy), w, h, s))
        })
    })
}
