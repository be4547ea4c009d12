//! Seeded synthetic edge-map corpora: planted multi-variant shapes with part
//! jitter, broken contours and random-walk clutter.
//!
//! Randomness comes from ChaCha8 (`rand_chacha`), seeded per image from the
//! corpus seed, the class index, the label and the image index. Draw order
//! inside a positive image is fixed: first one variant index per part (in part
//! order, `random_range(0..variants)`), then the instance size and position,
//! then per-part jitter and breaks, then clutter. Negative images draw
//! clutter only.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::{DatasetManifest, ManifestItem, Split};
use crate::error::{Error, Result};
use crate::geometry::{chain_length, EdgeMap, Point2, Polyline, Rect};
use crate::model::Label;

pub const SPEC_FORMAT: &str = "aotree-corpus";

/// One shape part with alternative prototypes, in unit-square coordinates of
/// the instance box (x right, y down).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartSpec {
    pub variants: Vec<Vec<Point2>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeClassSpec {
    pub name: String,
    pub parts: Vec<PartSpec>,
    /// Standard deviation, in pixels, of each part's displacement. Vertices
    /// additionally move by a quarter of this.
    pub jitter: f64,
    /// Chance that a part loses an interior stretch of its contour.
    pub break_prob: f64,
    /// Removed stretch as a fraction of the part's length, drawn uniformly.
    pub gap_fraction: (f64, f64),
    /// Instance box side in pixels, drawn uniformly.
    pub size_range: (f64, f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClutterSpec {
    pub count: (usize, usize),
    pub segments: (usize, usize),
    pub step: (f64, f64),
    /// Standard deviation of the heading change per segment, in radians.
    pub turn: f64,
}

impl Default for ClutterSpec {
    fn default() -> Self {
        ClutterSpec { count: (6, 10), segments: (3, 8), step: (4.0, 9.0), turn: 0.5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub format: String,
    pub seed: u64,
    pub image_size: (f64, f64),
    pub positives_per_class: usize,
    pub negatives_per_class: usize,
    /// Share of each class's images placed in the test split (the last ones).
    pub test_fraction: f64,
    pub clutter: ClutterSpec,
    pub classes: Vec<ShapeClassSpec>,
}

fn pts(v: &[(f64, f64)]) -> Vec<Point2> {
    v.iter().map(|&(x, y)| Point2::new(x, y)).collect()
}

/// Points on a circular arc from angle `a0` to `a1` (radians, y down).
fn arc(cx: f64, cy: f64, r: f64, a0: f64, a1: f64) -> Vec<Point2> {
    let n = ((a1 - a0).abs() * r * 40.0).ceil().max(3.0) as usize;
    (0..=n)
        .map(|k| {
            let t = a0 + (a1 - a0) * k as f64 / n as f64;
            Point2::new(cx + r * t.cos(), cy + r * t.sin())
        })
        .collect()
}

fn join(mut a: Vec<Point2>, b: Vec<Point2>) -> Vec<Point2> {
    let touching = matches!((a.last(), b.first()), (Some(x), Some(y)) if x.dist(*y) < 1e-9);
    if touching {
        a.extend(b.into_iter().skip(1));
    } else {
        a.extend(b);
    }
    a
}

fn part(variants: Vec<Vec<Point2>>) -> PartSpec {
    PartSpec { variants }
}

fn class(name: &str, parts: Vec<PartSpec>) -> ShapeClassSpec {
    ShapeClassSpec {
        name: name.into(),
        parts,
        jitter: 1.0,
        break_prob: 0.2,
        gap_fraction: (0.15, 0.35),
        size_range: (64.0, 84.0),
    }
}

/// Cup with a rounded or square handle.
pub fn mug() -> ShapeClassSpec {
    class(
        "mug",
        vec![
            part(vec![
                pts(&[(0.32, 0.12), (0.12, 0.12), (0.12, 0.46)]),
                join(join(pts(&[(0.32, 0.12), (0.2, 0.12)]), arc(0.2, 0.2, 0.08, -PI / 2.0, -PI)), pts(&[(0.12, 0.2), (0.12, 0.46)])),
            ]),
            part(vec![pts(&[(0.36, 0.12), (0.62, 0.12), (0.62, 0.44)])]),
            part(vec![
                arc(0.64, 0.5, 0.24, -PI / 2.0 + 0.25, -0.1),
                pts(&[(0.66, 0.27), (0.86, 0.27), (0.86, 0.46)]),
            ]),
            part(vec![pts(&[(0.12, 0.54), (0.12, 0.84), (0.18, 0.88), (0.32, 0.88)])]),
            part(vec![pts(&[(0.36, 0.88), (0.56, 0.88), (0.62, 0.82), (0.62, 0.56)])]),
            part(vec![
                arc(0.64, 0.5, 0.24, 0.1, PI / 2.0 - 0.25),
                pts(&[(0.86, 0.54), (0.86, 0.73), (0.66, 0.73)]),
            ]),
        ],
    )
}

/// Bottle with a plain or lipped neck and curved or straight shoulders.
pub fn bottle() -> ShapeClassSpec {
    class(
        "bottle",
        vec![
            part(vec![arc(0.42, 0.48, 0.24, PI, 1.25 * PI + 0.2), pts(&[(0.18, 0.46), (0.38, 0.3)])]),
            part(vec![
                pts(&[(0.42, 0.32), (0.42, 0.08), (0.58, 0.08), (0.58, 0.32)]),
                pts(&[(0.42, 0.32), (0.42, 0.13), (0.39, 0.08), (0.61, 0.08), (0.58, 0.13), (0.58, 0.32)]),
            ]),
            part(vec![arc(0.58, 0.48, 0.24, 1.75 * PI - 0.2, 2.0 * PI), pts(&[(0.62, 0.3), (0.82, 0.46)])]),
            part(vec![join(pts(&[(0.18, 0.52), (0.18, 0.8)]), arc(0.28, 0.8, 0.1, PI, 0.5 * PI))]),
            part(vec![arc(0.5, 1.3, 0.42, -0.5 * PI - 0.3, -0.5 * PI + 0.3), pts(&[(0.36, 0.9), (0.44, 0.84), (0.56, 0.84), (0.64, 0.9)])]),
            part(vec![join(arc(0.72, 0.8, 0.1, 0.5 * PI, 0.0), pts(&[(0.82, 0.8), (0.82, 0.52)]))]),
        ],
    )
}

/// Round fruit with a stem, optionally with a leaf.
pub fn apple() -> ShapeClassSpec {
    let (cx, cy, r) = (0.5, 0.56, 0.36);
    class(
        "apple",
        vec![
            part(vec![arc(cx, cy, r, -PI + 0.05, -0.62 * PI)]),
            part(vec![
                join(arc(cx, cy, r, -0.58 * PI, -0.5 * PI - 0.02), pts(&[(0.5, 0.2), (0.53, 0.06)])),
                join(
                    join(arc(cx, cy, r, -0.58 * PI, -0.5 * PI - 0.02), pts(&[(0.5, 0.2), (0.53, 0.06)])),
                    pts(&[(0.62, 0.04), (0.64, 0.12), (0.54, 0.1)]),
                ),
            ]),
            part(vec![arc(cx, cy, r, -0.38 * PI, -0.05)]),
            part(vec![arc(cx, cy, r, PI - 0.05, 0.62 * PI)]),
            part(vec![arc(cx, cy, r, 0.58 * PI, 0.42 * PI), pts(&[(0.38, 0.9), (0.5, 0.86), (0.62, 0.9)])]),
            part(vec![arc(cx, cy, r, 0.38 * PI, 0.05)]),
        ],
    )
}

impl CorpusSpec {
    /// Three classes, 40 positives and 40 negatives each, half held out.
    pub fn three_class(seed: u64) -> Self {
        CorpusSpec {
            format: SPEC_FORMAT.into(),
            seed,
            image_size: (144.0, 144.0),
            positives_per_class: 40,
            negatives_per_class: 40,
            test_fraction: 0.5,
            clutter: ClutterSpec::default(),
            classes: vec![mug(), bottle(), apple()],
        }
    }

    /// A small two-class corpus for smoke tests.
    pub fn toy(seed: u64) -> Self {
        CorpusSpec {
            positives_per_class: 6,
            negatives_per_class: 4,
            classes: vec![mug(), apple()],
            ..CorpusSpec::three_class(seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.format != SPEC_FORMAT {
            return bad(format!("format: expected {SPEC_FORMAT:?}, found {:?}", self.format));
        }
        if self.classes.is_empty() {
            return bad("at least one class is required".into());
        }
        if !(0.0..=1.0).contains(&self.test_fraction) {
            return bad("test_fraction must lie in [0, 1]".into());
        }
        let c = &self.clutter;
        if c.count.0 > c.count.1 || c.segments.0 > c.segments.1 || c.segments.0 == 0 || !(c.step.0 > 0.0 && c.step.0 <= c.step.1) {
            return bad("clutter ranges must be ordered and positive".into());
        }
        for cl in &self.classes {
            if cl.parts.is_empty() || cl.parts.iter().any(|p| p.variants.is_empty() || p.variants.iter().any(|v| v.len() < 2)) {
                return bad(format!("class {}: every part needs a variant of at least two points", cl.name));
            }
            if !(0.0..=1.0).contains(&cl.break_prob) || !(cl.jitter >= 0.0) {
                return bad(format!("class {}: break_prob must lie in [0, 1] and jitter be non-negative", cl.name));
            }
            let (g0, g1) = cl.gap_fraction;
            if !(0.0 <= g0 && g0 <= g1 && g1 < 0.8) {
                return bad(format!("class {}: gap_fraction must satisfy 0 <= lo <= hi < 0.8", cl.name));
            }
            let (s0, s1) = cl.size_range;
            if !(s0 > 0.0 && s0 <= s1 && s1 <= self.image_size.0.min(self.image_size.1)) {
                return bad(format!("class {}: size_range must fit inside the image", cl.name));
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let spec: CorpusSpec = serde_json::from_str(&text)
            .map_err(|e| Error::malformed(path.display().to_string(), format!("line {}: {e}", e.line())))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn num_train(&self, n: usize) -> usize {
        n - (n as f64 * self.test_fraction).round() as usize
    }
}

/// Seed of one image; `label` separates positive and negative streams.
pub fn image_seed(seed: u64, class: usize, label: Label, index: usize) -> u64 {
    let tag = match label {
        Label::Positive => 1u64,
        Label::Negative => 2u64,
    };
    let mut z = seed;
    for v in [class as u64, tag, index as u64] {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(v);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

/// One generated image.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthImage {
    pub edge_map: EdgeMap,
    pub boxes: Vec<Rect>,
    /// Chosen variant per part (positives only).
    pub variants: Vec<usize>,
    /// Ids of the planted polylines.
    pub planted: Vec<u32>,
}

fn gaussian(sigma: f64) -> Normal<f64> {
    Normal::new(0.0, sigma.max(0.0)).expect("finite sigma")
}

/// Splits `points` into the pieces left after removing arc length
/// `[start, start + gap]`.
fn cut_gap(points: &[Point2], start: f64, gap: f64) -> Vec<Vec<Point2>> {
    let end = start + gap;
    let mut before = vec![points[0]];
    let mut after: Vec<Point2> = Vec::new();
    let mut s = 0.0;
    for w in points.windows(2) {
        let (a, b) = (w[0], w[1]);
        let len = a.dist(b);
        let (s0, s1) = (s, s + len);
        if len > 0.0 {
            if s0 < start && start < s1 {
                before.push(a.lerp(b, (start - s0) / len));
            }
            if s0 < end && end < s1 {
                after.push(a.lerp(b, (end - s0) / len));
            }
        }
        if s1 <= start {
            before.push(b);
        } else if s1 >= end {
            after.push(b);
        }
        s = s1;
    }
    vec![before, after]
}

fn clamp_into(p: Point2, r: &Rect) -> Point2 {
    Point2::new(p.x.clamp(r.x, r.x1()), p.y.clamp(r.y, r.y1()))
}

fn clutter(spec: &ClutterSpec, frame: &Rect, rng: &mut ChaCha8Rng) -> Vec<Vec<Point2>> {
    let n = rng.random_range(spec.count.0..=spec.count.1);
    let turn = gaussian(spec.turn);
    (0..n)
        .map(|_| {
            let mut p = Point2::new(rng.random_range(frame.x..frame.x1()), rng.random_range(frame.y..frame.y1()));
            let mut heading = rng.random_range(0.0..2.0 * PI);
            let segs = rng.random_range(spec.segments.0..=spec.segments.1);
            let mut line = vec![p];
            for _ in 0..segs {
                heading += turn.sample(rng);
                let step = rng.random_range(spec.step.0..=spec.step.1);
                p = clamp_into(Point2::new(p.x + step * heading.cos(), p.y + step * heading.sin()), frame);
                line.push(p);
            }
            line
        })
        .collect()
}

fn assemble(width: f64, height: f64, chains: Vec<Vec<Point2>>, planted_count: usize) -> Result<(EdgeMap, Vec<u32>)> {
    let mut lines = Vec::new();
    let mut planted = Vec::new();
    for (k, c) in chains.into_iter().enumerate() {
        let id = lines.len() as u32;
        if let Some(p) = Polyline::from_points_lossy(id, c) {
            if p.length() > 0.0 {
                if k < planted_count {
                    planted.push(id);
                }
                lines.push(p);
            }
        }
    }
    Ok((EdgeMap::new(width, height, lines)?, planted))
}

/// Generates one image of class `class` (an index into `spec.classes`).
pub fn render(spec: &CorpusSpec, class: usize, label: Label, index: usize) -> Result<SynthImage> {
    let (w, h) = spec.image_size;
    let frame = Rect::new(0.0, 0.0, w, h);
    let mut rng = ChaCha8Rng::seed_from_u64(image_seed(spec.seed, class, label, index));
    if label == Label::Negative {
        let chains = clutter(&spec.clutter, &frame, &mut rng);
        let (edge_map, _) = assemble(w, h, chains, 0)?;
        return Ok(SynthImage { edge_map, boxes: Vec::new(), variants: Vec::new(), planted: Vec::new() });
    }
    let cl = &spec.classes[class];
    let variants: Vec<usize> = cl.parts.iter().map(|p| rng.random_range(0..p.variants.len())).collect();
    let size = rng.random_range(cl.size_range.0..=cl.size_range.1);
    let origin = Point2::new(rng.random_range(0.0..=(w - size)), rng.random_range(0.0..=(h - size)));
    let bbox = Rect::new(origin.x, origin.y, size, size);
    let shift = gaussian(cl.jitter);
    let wiggle = gaussian(cl.jitter * 0.25);
    let mut chains = Vec::new();
    for (p, &v) in cl.parts.iter().zip(&variants) {
        let d = Point2::new(shift.sample(&mut rng), shift.sample(&mut rng));
        let placed: Vec<Point2> = p.variants[v]
            .iter()
            .map(|u| {
                let q = Point2::new(origin.x + u.x * size, origin.y + u.y * size) + d;
                let n = Point2::new(wiggle.sample(&mut rng), wiggle.sample(&mut rng));
                clamp_into(q + n, &bbox)
            })
            .collect();
        if rng.random_bool(cl.break_prob) {
            let len = chain_length(&placed);
            let gap = len * rng.random_range(cl.gap_fraction.0..=cl.gap_fraction.1);
            let start = rng.random_range(0.1 * len..=(0.9 * len - gap).max(0.1 * len));
            chains.extend(cut_gap(&placed, start, gap));
        } else {
            chains.push(placed);
        }
    }
    let planted_count = chains.len();
    chains.extend(clutter(&spec.clutter, &frame, &mut rng));
    let (edge_map, planted) = assemble(w, h, chains, planted_count)?;
    Ok(SynthImage { edge_map, boxes: vec![bbox], variants, planted })
}

/// Writes every image of the corpus plus `manifest.json` into `out_dir`.
pub fn generate(spec: &CorpusSpec, out_dir: &Path) -> Result<DatasetManifest> {
    spec.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut items = Vec::new();
    for (c, cl) in spec.classes.iter().enumerate() {
        for (label, n, tag) in [(Label::Positive, spec.positives_per_class, "pos"), (Label::Negative, spec.negatives_per_class, "neg")] {
            let train = spec.num_train(n);
            for i in 0..n {
                let img = render(spec, c, label, i)?;
                let name = format!("{}_{tag}_{i:03}.json", cl.name);
                img.edge_map.save(&out_dir.join(&name))?;
                items.push(ManifestItem {
                    path: name,
                    class: cl.name.clone(),
                    label,
                    boxes: img.boxes,
                    split: if i < train { Split::Train } else { Split::Test },
                });
            }
        }
    }
    let manifest = DatasetManifest::new(spec.classes.iter().map(|c| c.name.clone()).collect(), items, out_dir.to_path_buf());
    manifest.save(&out_dir.join("manifest.json"))?;
    Ok(manifest)
}
