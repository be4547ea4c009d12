#![allow(dead_code)]

use std::sync::Arc;

use aotree::geometry::{Point2, Window};
use aotree::learning::{TrainConfig, TrainSample};
use aotree::model::Label;
use aotree::synth::{render, ClutterSpec, CorpusSpec, PartSpec, ShapeClassSpec, SPEC_FORMAT};

fn poly(v: &[(f64, f64)]) -> Vec<Point2> {
    v.iter().map(|&(x, y)| Point2::new(x, y)).collect()
}

fn ring(cx: f64, cy: f64, r: f64) -> Vec<Point2> {
    (0..=24).map(|k| {
        let t = std::f64::consts::TAU * k as f64 / 24.0;
        Point2::new(cx + r * t.cos(), cy + r * t.sin())
    })
    .collect()
}

/// One part per block of a 64 px window filling the whole image. Only the
/// top-left part has two prototypes: a slanted bar or a ring. No segment is
/// axis-aligned, so jitter never straddles an orientation bin edge.
pub fn two_mode_class(jitter: f64) -> ShapeClassSpec {
    let single = |v: &[(f64, f64)]| PartSpec { variants: vec![poly(v)] };
    ShapeClassSpec {
        name: "planted".into(),
        parts: vec![
            PartSpec { variants: vec![poly(&[(0.05, 0.14), (0.28, 0.36)]), ring(0.165, 0.25, 0.1)] },
            single(&[(0.45, 0.07), (0.56, 0.43)]),
            single(&[(0.71, 0.08), (0.95, 0.42)]),
            single(&[(0.05, 0.6), (0.16, 0.9), (0.28, 0.6)]),
            single(&[(0.38, 0.69), (0.62, 0.81)]),
            single(&[(0.72, 0.58), (0.76, 0.92), (0.95, 0.86)]),
        ],
        jitter,
        break_prob: 0.0,
        gap_fraction: (0.2, 0.3),
        size_range: (64.0, 64.0),
    }
}

/// Same as [`two_mode_class`] with a single prototype everywhere.
pub fn one_mode_class(jitter: f64) -> ShapeClassSpec {
    let mut c = two_mode_class(jitter);
    c.parts[0].variants.truncate(1);
    c
}

pub fn tiny_spec(seed: u64, class: ShapeClassSpec, positives: usize, negatives: usize) -> CorpusSpec {
    CorpusSpec {
        format: SPEC_FORMAT.into(),
        seed,
        image_size: (64.0, 64.0),
        positives_per_class: positives,
        negatives_per_class: negatives,
        test_fraction: 0.0,
        clutter: ClutterSpec { count: (2, 4), segments: (2, 4), step: (4.0, 8.0), turn: 0.5 },
        classes: vec![class],
    }
}

/// Training windows straight from rendered images: the box of every positive
/// and the full frame of every negative. Also returns the part-0 variant of
/// each positive.
pub fn samples(spec: &CorpusSpec) -> (Vec<TrainSample>, Vec<usize>) {
    let mut out = Vec::new();
    let mut variants = Vec::new();
    for k in 0..spec.positives_per_class {
        let img = render(spec, 0, Label::Positive, k).unwrap();
        variants.push(img.variants[0]);
        out.push(TrainSample {
            id: format!("pos{k}"),
            edge_map: Arc::new(img.edge_map),
            window: Window::from_rect(img.boxes[0], 1.0),
            label: Label::Positive,
        });
    }
    for k in 0..spec.negatives_per_class {
        let img = render(spec, 0, Label::Negative, k).unwrap();
        let (w, h) = spec.image_size;
        out.push(TrainSample {
            id: format!("neg{k}"),
            edge_map: Arc::new(img.edge_map),
            window: Window::new(Point2::new(0.0, 0.0), w, h, 1.0),
            label: Label::Negative,
        });
    }
    (out, variants)
}

pub fn tiny_config() -> TrainConfig {
    let mut cfg = TrainConfig::default();
    cfg.model.max_leaves = 3;
    cfg.solver.d = 0.005;
    cfg.max_outer_iters = 6;
    cfg
}
