mod common;

use aotree::dataset::Split;
use aotree::error::Error;
use aotree::learning::*;
use aotree::model::{pack_feature, Label};
use aotree::synth::{generate, CorpusSpec};

fn trainer(seed: u64, two_modes: bool) -> (Trainer, Vec<usize>) {
    let class = if two_modes { common::two_mode_class(1.0) } else { common::one_mode_class(1.0) };
    let spec = common::tiny_spec(seed, class, 16, 12);
    let (samples, variants) = common::samples(&spec);
    let mut t = Trainer::new(samples, common::tiny_config()).unwrap();
    t.initialize().unwrap();
    (t, variants)
}

fn step_from(t: &Trainer, latents: Vec<Option<aotree::model::LatentAssignment>>) -> LatentStep {
    let features = t.features_of(&latents).unwrap();
    let hyperplane = Hyperplane::from_features(t.model.layout().dim(), t.cfg.solver.d, features.iter().flatten());
    LatentStep { latents, features, hyperplane, kept_previous: 0 }
}

fn part0_slots(latents: &[Option<aotree::model::LatentAssignment>]) -> Vec<usize> {
    latents.iter().flatten().map(|h| h.parts[0].slot).collect()
}

fn same_partition(a: &[usize], b: &[usize]) -> bool {
    a.len() == b.len() && (0..a.len()).all(|i| (0..a.len()).all(|j| (a[i] == a[j]) == (b[i] == b[j])))
}

#[test]
fn planted_block_recovers_two_leaves() {
    for seed in [5, 6, 7] {
        let (mut t, variants) = trainer(seed, true);
        let mut shifts = Vec::new();
        t.run(&mut |s| shifts.push((s.record.q_shift, s.record.epsilon))).unwrap();
        assert_eq!(t.model.num_active(0), 2, "seed {seed}");
        for i in 1..6 {
            assert_eq!(t.model.num_active(i), 1, "seed {seed} or-node {i}");
        }
        assert!(same_partition(&part0_slots(&t.latents), &variants), "seed {seed}");
        for (shift, eps) in &shifts[..shifts.len() - 1] {
            assert!(shift < eps, "seed {seed}: shift {shift} >= {eps}");
        }
    }
}

#[test]
fn step2_creates_a_leaf_for_an_unmodeled_mode() {
    let (mut t, variants) = trainer(5, true);
    for s in 1..t.model.max_leaves() {
        t.model.set_active(0, s, false);
    }
    let mut latents = t.latents.clone();
    for h in latents.iter_mut().flatten() {
        h.parts[0].slot = 0;
    }
    let step = step_from(&t, latents);
    let out = t.step2(&step, 1e3).unwrap();
    assert!(out.events.iter().any(|(i, e)| *i == 0 && matches!(e, ClusterEvent::Create { .. })));
    assert_eq!(t.model.num_active(0), 2);
    assert!(same_partition(&part0_slots(&out.latents), &variants));
    assert!(out.shift < out.epsilon);
}

#[test]
fn step2_merges_leaves_covering_one_mode() {
    let (mut t, _) = trainer(5, false);
    assert_eq!(t.model.num_active(0), 1);
    t.model.set_active(0, 1, true);
    let mut latents = t.latents.clone();
    for (k, h) in latents.iter_mut().flatten().enumerate() {
        h.parts[0].slot = k % 2;
    }
    let step = step_from(&t, latents);
    let out = t.step2(&step, 1e3).unwrap();
    assert!(out.events.iter().any(|(i, e)| *i == 0 && matches!(e, ClusterEvent::Merge { .. })), "{:?}", out.events);
    assert_eq!(t.model.num_active(0), 1);
    let slots = part0_slots(&out.latents);
    assert!(slots.iter().all(|&s| s == slots[0]));
}

#[test]
fn zero_budget_freezes_structure() {
    let (mut t, _) = trainer(6, true);
    t.model.set_active(0, 2, true);
    let before: Vec<usize> = (0..6).map(|i| t.model.num_active(i)).collect();
    let step = t.step1().unwrap();
    let out = t.step2(&step, 0.0).unwrap();
    assert!(!out.changed);
    assert!(out.events.is_empty());
    assert_eq!(out.shift, 0.0);
    assert_eq!(out.hyperplane, step.hyperplane);
    assert_eq!(before, (0..6).map(|i| t.model.num_active(i)).collect::<Vec<_>>());
    let slots = |ls: &[Option<aotree::model::LatentAssignment>]| -> Vec<Vec<usize>> {
        ls.iter().flatten().map(|h| h.parts.iter().map(|p| p.slot).collect()).collect()
    };
    assert_eq!(slots(&out.latents), slots(&step.latents));
}

#[test]
fn step2_respects_every_budget() {
    for eps in [1e-4, 1e-3, 1e-2, 0.05] {
        let (mut t, _) = trainer(7, true);
        for s in 1..t.model.max_leaves() {
            t.model.set_active(0, s, false);
        }
        let mut latents = t.latents.clone();
        for h in latents.iter_mut().flatten() {
            h.parts[0].slot = 0;
        }
        let step = step_from(&t, latents);
        let out = t.step2(&step, eps).unwrap();
        assert!(out.shift < eps, "eps {eps}: shift {}", out.shift);
        let recomputed = step_from(&t, out.latents.clone()).hyperplane;
        assert!(recomputed.distance(&out.hyperplane) < 1e-12);
        assert!((recomputed.distance(&step.hyperplane) - out.shift).abs() < 1e-12);
    }
}

#[test]
fn cached_features_match_direct_packing() {
    let (t, _) = trainer(5, true);
    let step = t.step1().unwrap();
    for (k, h) in step.latents.iter().enumerate() {
        let Some(h) = h else { continue };
        let s = &t.samples[k];
        let direct = pack_feature(&s.edge_map, h, &s.window, &t.model).unwrap().to_dense();
        let cached = step.features[k].as_ref().unwrap().to_dense();
        let gap = direct.iter().zip(&cached).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(gap < 1e-12, "sample {k}: {gap}");
    }
}

#[test]
fn training_is_deterministic() {
    let spec = common::tiny_spec(9, common::two_mode_class(1.0), 12, 8);
    let run = || {
        let (samples, _) = common::samples(&spec);
        train(samples, &common::tiny_config()).unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.model.to_json_bytes(), b.model.to_json_bytes());
    assert_eq!(a.trace, b.trace);
}

#[test]
fn trace_rows_and_csv() {
    let spec = common::tiny_spec(9, common::two_mode_class(1.0), 12, 8);
    let (samples, _) = common::samples(&spec);
    let out = train(samples, &common::tiny_config()).unwrap();
    assert!(!out.trace.rows.is_empty());
    assert!(out.trace.rows.iter().all(|r| r.objective.is_finite() && r.f >= 0.0));
    let mut csv = Vec::new();
    out.trace.write_csv(&mut csv).unwrap();
    let text = String::from_utf8(csv).unwrap();
    assert_eq!(text.lines().count(), out.trace.rows.len() + 1);
    assert!(text.starts_with("iteration,objective"));
}

#[test]
fn manifest_sampling_follows_the_negative_config() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = generate(&CorpusSpec::toy(4), dir.path()).unwrap();
    let mut cfg = TrainConfig::default();
    cfg.negatives = NegativeConfig { windows_per_image: 3, cross_class: true, displaced_per_image: 2, displaced_max_iou: 0.3 };
    let samples = training_samples(&manifest, "mug", &cfg).unwrap();
    let train: Vec<_> = manifest.items_in(Split::Train).map(|(_, it)| it).collect();
    let count = |class: &str, label: Label| train.iter().filter(|it| it.class == class && it.label == label).count();
    let pos = samples.iter().filter(|s| s.label == Label::Positive).count();
    assert_eq!(pos, count("mug", Label::Positive));
    let random = samples.iter().filter(|s| s.id.contains('@')).count();
    assert_eq!(random, 3 * count("mug", Label::Negative));
    let cross = samples.iter().filter(|s| s.label == Label::Negative && s.id.contains('#')).count();
    assert_eq!(cross, count("apple", Label::Positive));
    let displaced: Vec<_> = samples.iter().filter(|s| s.id.contains('~')).collect();
    assert!(displaced.len() <= 2 * pos);
    for s in displaced {
        let item = train.iter().find(|it| s.id.starts_with(&it.path)).unwrap();
        assert!(item.boxes.iter().all(|b| b.iou(&s.window.rect()) <= 0.3));
    }
    let mut ids: Vec<&str> = samples.iter().map(|s| s.id.as_str()).collect();
    ids.sort();
    ids.dedup();
    assert_eq!(ids.len(), samples.len());

    cfg.negatives.cross_class = false;
    let fewer = training_samples(&manifest, "mug", &cfg).unwrap();
    assert_eq!(fewer.len(), samples.len() - cross);
}

#[test]
fn invalid_inputs_are_rejected() {
    let mut cfg = TrainConfig::default();
    cfg.negatives.displaced_max_iou = 1.5;
    assert!(matches!(cfg.validate(), Err(Error::InvalidConfig(_))));
    let mut cfg = TrainConfig::default();
    cfg.epsilon = Some(-1.0);
    assert!(matches!(cfg.validate(), Err(Error::InvalidConfig(_))));

    let spec = common::tiny_spec(1, common::one_mode_class(1.0), 4, 0);
    let (samples, _) = common::samples(&spec);
    assert!(matches!(Trainer::new(samples, TrainConfig::default()), Err(Error::Dataset(_))));

    let dir = tempfile::tempdir().unwrap();
    let manifest = generate(&CorpusSpec::toy(4), dir.path()).unwrap();
    assert!(matches!(training_samples(&manifest, "teapot", &TrainConfig::default()), Err(Error::Dataset(_))));
}
