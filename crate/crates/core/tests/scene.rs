//! Synthetic scene and proposal invariants.

use ctdnet_core::metrics::{iou, size_bucket, SizeBucket};
use ctdnet_core::scene::{generate_synthetic_scene, make_proposals, SceneConfig, MAX_GT_IOU};

#[test]
fn thousand_scenes_respect_placement_rules() {
    let cfg = SceneConfig::default();
    for index in 0..1000 {
        let s = generate_synthetic_scene(&cfg, index).unwrap();
        assert_eq!(s.image.shape(), &[3, cfg.height, cfg.width]);
        assert!((cfg.logos_min..=cfg.logos_max).contains(&s.gts.len()), "scene {index}");
        for (i, a) in s.gts.iter().enumerate() {
            let b = a.bbox;
            assert_eq!(a.image, index);
            assert!(a.class < cfg.num_classes);
            assert_eq!(size_bucket(&b), SizeBucket::Small, "scene {index}");
            assert!(b.x1 >= 0.0 && b.y1 >= 0.0 && b.x2 <= cfg.width as f64 && b.y2 <= cfg.height as f64);
            for side in [b.width(), b.height()] {
                assert!((cfg.side_min as f64..=cfg.side_max as f64).contains(&side));
            }
            for c in &s.gts[i + 1..] {
                assert!(iou(&b, &c.bbox) <= MAX_GT_IOU, "scene {index}");
            }
        }
        assert!(s.image.data().iter().all(|v| v.is_finite()));
    }
}

#[test]
fn scenes_are_reproducible_and_seed_dependent() {
    let cfg = SceneConfig::default();
    assert_eq!(generate_synthetic_scene(&cfg, 3).unwrap(), generate_synthetic_scene(&cfg, 3).unwrap());
    let other = SceneConfig { seed: 1, ..cfg.clone() };
    assert_ne!(generate_synthetic_scene(&cfg, 3).unwrap().image, generate_synthetic_scene(&other, 3).unwrap().image);
}

#[test]
fn jittered_proposals_stay_positive() {
    let cfg = SceneConfig::default();
    for trial in 0..50 {
        let s = generate_synthetic_scene(&cfg, trial).unwrap();
        let gts: Vec<_> = s.gts.iter().map(|g| g.bbox).collect();
        let p = make_proposals(&gts, 0.1, 8, trial as u64, (128.0, 128.0));
        assert_eq!(p.len(), 2 * gts.len() + 8);
        for (k, g) in gts.iter().enumerate() {
            for j in 0..2 {
                let v = iou(&p[2 * k + j], g);
                assert!(v >= 0.5, "trial {trial}: IoU {v}");
            }
        }
        for n in &p[2 * gts.len()..] {
            assert!(gts.iter().all(|g| iou(n, g) < MAX_GT_IOU));
            assert!(n.x1 >= 0.0 && n.y1 >= 0.0 && n.x2 <= 128.0 && n.y2 <= 128.0);
        }
    }
}

#[test]
fn zero_jitter_copies_ground_truth() {
    let cfg = SceneConfig::default();
    let s = generate_synthetic_scene(&cfg, 0).unwrap();
    let gts: Vec<_> = s.gts.iter().map(|g| g.bbox).collect();
    let p = make_proposals(&gts, 0.0, 0, 0, (128.0, 128.0));
    let want: Vec<_> = gts.iter().flat_map(|g| [*g, *g]).collect();
    assert_eq!(p, want);
}

#[test]
fn invalid_configs_are_rejected() {
    let bad = [
        SceneConfig { side_min: 0, ..SceneConfig::default() },
        SceneConfig { logos_min: 4, logos_max: 3, ..SceneConfig::default() },
        SceneConfig { width: 10, ..SceneConfig::default() },
        SceneConfig { num_classes: 0, ..SceneConfig::default() },
    ];
    for cfg in bad {
        assert!(generate_synthetic_scene(&cfg, 0).is_err(), "{cfg:?}");
    }
}
