mod common;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use vessel_trace::embedder::{OracleEmbedder, OracleParams};
use vessel_trace::metrics::dice;
use vessel_trace::raster::{patch_origin, Point};
use vessel_trace::synthetic::{generate_scene, SceneSpec, TreeSpec};
use vessel_trace::trace::{sample_patch_labels, trace_tree, trace_tree_observed, TraceConfig};
use vessel_trace::Error;

use common::benchmark_scene;

fn noisy() -> OracleParams {
    OracleParams {
        noise_sigma: 0.15,
        corruption_fraction: 0.1,
        ..OracleParams::default()
    }
}

#[test]
fn every_step_leaves_a_valid_tree() {
    for s in 0..8u64 {
        let scene = generate_scene(&benchmark_scene(s)).unwrap();
        for (params, monotone) in [(OracleParams::default(), true), (noisy(), false)] {
            let oracle = OracleEmbedder::new(scene.tree_masks.clone(), params, s).unwrap();
            for seed in &scene.seeds {
                let mut last = 0;
                trace_tree_observed(&scene.image, &scene.semantic, seed, &oracle, &TraceConfig::default(), &mut |step| {
                    step.tree.validate().unwrap();
                    let n = step.tree.nodes().len();
                    if monotone {
                        assert!(n >= last, "scene {s} {}: {last} -> {n} nodes", seed.tree_id);
                    }
                    last = n;
                })
                .unwrap();
            }
        }
    }
}

#[test]
fn nearby_consecutive_patches_overlap_by_a_quarter() {
    let size = TraceConfig::default().patch_size;
    for s in 0..6u64 {
        let scene = generate_scene(&benchmark_scene(s)).unwrap();
        let (w, h) = (scene.image.width(), scene.image.height());
        let oracle = OracleEmbedder::new(scene.tree_masks.clone(), OracleParams::default(), s).unwrap();
        for seed in &scene.seeds {
            let mut starts: Vec<Point> = Vec::new();
            trace_tree_observed(&scene.image, &scene.semantic, seed, &oracle, &TraceConfig::default(), &mut |step| {
                starts.push(step.start)
            })
            .unwrap();
            for pair in starts.windows(2) {
                if pair[0].dist(pair[1]) > size as f64 / 2.0 {
                    continue;
                }
                let a = patch_origin(w, h, pair[0], size).unwrap();
                let b = patch_origin(w, h, pair[1], size).unwrap();
                let ox = size as i32 - (a.x - b.x).abs();
                let oy = size as i32 - (a.y - b.y).abs();
                assert!(4 * ox * oy >= (size * size) as i32, "{pair:?}");
            }
        }
    }
}

#[test]
fn tracing_is_deterministic() {
    let scene = generate_scene(&benchmark_scene(5)).unwrap();
    let oracle = OracleEmbedder::new(scene.tree_masks.clone(), noisy(), 77).unwrap();
    for seed in &scene.seeds {
        let a = trace_tree(&scene.image, &scene.semantic, seed, &oracle, &TraceConfig::default()).unwrap();
        let b = trace_tree(&scene.image, &scene.semantic, seed, &oracle, &TraceConfig::default()).unwrap();
        assert_eq!(a.mask, b.mask);
        assert_eq!(a.tree, b.tree);
        assert_eq!(a.probability.values(), b.probability.values());
    }
}

#[test]
fn parallel_samples_match_serial_ones() {
    let scene = generate_scene(&benchmark_scene(4)).unwrap();
    let oracle = OracleEmbedder::new(scene.tree_masks.clone(), noisy(), 8).unwrap();
    let parallel = TraceConfig {
        parallel_samples: true,
        ..TraceConfig::default()
    };
    for seed in &scene.seeds {
        let a = trace_tree(&scene.image, &scene.semantic, seed, &oracle, &TraceConfig::default()).unwrap();
        let b = trace_tree(&scene.image, &scene.semantic, seed, &oracle, &parallel).unwrap();
        assert_eq!(a.mask, b.mask);
        assert_eq!(a.tree, b.tree);
    }
}

#[test]
fn crossing_trees_are_separated() {
    for s in 0..4u64 {
        let spec = SceneSpec {
            trees: vec![TreeSpec { depth: 1, ..TreeSpec::default() }, TreeSpec { depth: 1, ..TreeSpec::default() }],
            require_crossing: true,
            rng_seed: 100 + s,
            ..SceneSpec::default()
        };
        let scene = generate_scene(&spec).unwrap();
        assert!(!scene.tree_masks[0].intersection(&scene.tree_masks[1]).is_empty());
        let oracle = OracleEmbedder::new(scene.tree_masks.clone(), OracleParams::default(), s).unwrap();
        for (i, seed) in scene.seeds.iter().enumerate() {
            let r = trace_tree(&scene.image, &scene.semantic, seed, &oracle, &TraceConfig::default()).unwrap();
            let d = dice(&r.mask, &scene.tree_masks[i], 1.0).unwrap();
            assert!(d >= 0.99, "scene {s} tree {i}: dice {d}");
            assert_eq!(r.tree.bifurcation_count(), scene.trees[i].bifurcation_count());
        }
    }
}

#[test]
fn patch_budget_truncates() {
    let scene = generate_scene(&benchmark_scene(3)).unwrap();
    let oracle = OracleEmbedder::new(scene.tree_masks.clone(), OracleParams::default(), 0).unwrap();
    let config = TraceConfig {
        max_patches: 2,
        ..TraceConfig::default()
    };
    let r = trace_tree(&scene.image, &scene.semantic, &scene.seeds[0], &oracle, &config).unwrap();
    assert_eq!(r.patches, 2);
    assert!(r.truncated);
    r.tree.validate().unwrap();
}

#[test]
fn seed_outside_the_vessel_yields_a_bare_origin() {
    let scene = generate_scene(&benchmark_scene(0)).unwrap();
    let oracle = OracleEmbedder::new(scene.tree_masks.clone(), OracleParams::default(), 0).unwrap();
    let mut seed = scene.seeds[0].clone();
    // the corner farthest from every vessel
    let corner = [Point::new(1, 1), Point::new(254, 1), Point::new(1, 254), Point::new(254, 254)]
        .into_iter()
        .max_by(|a, b| {
            let d = |c: &Point| scene.semantic.points().map(|p| p.dist(*c)).fold(f64::INFINITY, f64::min);
            d(a).total_cmp(&d(b))
        })
        .unwrap();
    seed.p1 = corner;
    seed.p2 = corner.offset(0, 5);
    let r = trace_tree(&scene.image, &scene.semantic, &seed, &oracle, &TraceConfig::default()).unwrap();
    assert_eq!(r.tree.nodes().len(), 1);
    assert_eq!(r.patches, 1);
}

#[test]
fn identical_seed_points_are_rejected() {
    let scene = generate_scene(&benchmark_scene(0)).unwrap();
    let oracle = OracleEmbedder::new(scene.tree_masks.clone(), OracleParams::default(), 0).unwrap();
    let mut seed = scene.seeds[0].clone();
    seed.p2 = seed.p1;
    let err = trace_tree(&scene.image, &scene.semantic, &seed, &oracle, &TraceConfig::default()).unwrap_err();
    assert!(matches!(err, Error::InvalidSeed(_)));
}

/// Interior tree pixels, so every shifted window stays clear of the border.
fn interior_points(mask: &vessel_trace::raster::BinaryMask, margin: i32) -> Vec<Point> {
    let (w, h) = (mask.width() as i32, mask.height() as i32);
    mask.points().filter(|p| p.x >= margin && p.y >= margin && p.x < w - margin && p.y < h - margin).collect()
}

#[test]
fn averaged_votes_beat_every_single_vote() {
    let config = TraceConfig::default();
    let size = config.patch_size as i32;
    let params = OracleParams {
        corruption_fraction: 0.2,
        ..OracleParams::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(50);
    let (mut trials, mut better, mut differing) = (0, 0, 0);
    'scenes: for s in 0..60u64 {
        let scene = generate_scene(&benchmark_scene(s)).unwrap();
        let oracle = OracleEmbedder::new(scene.tree_masks.clone(), params, s).unwrap();
        for i in 0..scene.seeds.len() {
            if trials == 50 {
                break 'scenes;
            }
            let candidates = interior_points(&scene.tree_masks[i], size / 2 + 12);
            if candidates.is_empty() {
                continue;
            }
            let at = candidates[rng.random_range(0..candidates.len())];
            trials += 1;
            let votes = sample_patch_labels(&scene.image, &scene.semantic, None, at, &oracle, &config).unwrap();
            assert_eq!(votes.len(), 5);
            let x0 = votes.iter().map(|v| v.origin.x).max().unwrap();
            let y0 = votes.iter().map(|v| v.origin.y).max().unwrap();
            let x1 = votes.iter().map(|v| v.origin.x).min().unwrap() + size;
            let y1 = votes.iter().map(|v| v.origin.y).min().unwrap() + size;
            let mut single = [0usize; 5];
            let mut mean = 0;
            let mut differ = false;
            for y in y0..y1 {
                for x in x0..x1 {
                    let p = Point::new(x, y);
                    let truth = scene.tree_masks[i].at(p);
                    let m: Vec<bool> = votes.iter().map(|v| v.mask.at(Point::new(x - v.origin.x, y - v.origin.y))).collect();
                    for (k, &b) in m.iter().enumerate() {
                        single[k] += usize::from(b != truth);
                    }
                    let hits = m.iter().filter(|&&b| b).count();
                    mean += usize::from((hits as f64 / 5.0 >= config.prob_threshold) != truth);
                    differ |= m.iter().any(|&b| b != m[0]);
                }
            }
            differing += usize::from(differ);
            better += usize::from(mean < *single.iter().min().unwrap());
        }
    }
    assert_eq!(trials, 50);
    assert!(differing == 50, "votes differ on {differing}/50");
    assert!(better >= 40, "thresholded mean beats every single vote on {better}/50");
}
