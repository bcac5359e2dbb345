mod common;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vessel_trace::cluster::{label_pixels, mean_shift_modes, MeanShiftParams};
use vessel_trace::loss::EmbeddingField;
use vessel_trace::metrics::{evaluate_instances, DEFAULT_SMOOTH};
use vessel_trace::raster::{BinaryMask, InstanceLabelMap};
use vessel_trace::temporal::{causal_conv_time, CausalKernel};

use common::{brute_force_eval, mask_bits, random_field, same_partition};

/// Points within `spread` of well separated centers, with their true cluster ids.
fn blobs(rng: &mut ChaCha8Rng, k: usize, per: usize, dim: usize, spread: f64, gap: f64) -> (Vec<Vec<f64>>, Vec<usize>) {
    let mut points = Vec::new();
    let mut truth = Vec::new();
    for c in 0..k {
        let mut center = vec![0.0; dim];
        center[c % dim] = gap * (c / dim + 1) as f64;
        for _ in 0..per {
            let dir: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            let n = dir.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-9);
            let r = rng.random_range(0.0..spread);
            points.push(center.iter().zip(&dir).map(|(m, d)| m + r * d / n).collect());
            truth.push(c);
        }
    }
    (points, truth)
}

fn same_assignment(a: &[usize], b: &[usize]) -> bool {
    let to_map = |v: &[usize]| InstanceLabelMap::from_labels(v.len(), 1, v.iter().map(|&x| x as u32 + 1).collect()).unwrap();
    same_partition(&to_map(a), &to_map(b))
}

fn random_instances(rng: &mut ChaCha8Rng, n: usize, w: usize, h: usize) -> Vec<BinaryMask> {
    (0..n)
        .map(|_| {
            let p = rng.random_range(0.0..0.6);
            BinaryMask::from_fn(w, h, |_, _| rng.random_bool(p))
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn separated_clusters_are_recovered(seed in any::<u64>(), k in 1usize..6, per in 1usize..20, dim in 2usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = MeanShiftParams::default();
        // diameters below the bandwidth, centers far enough that cross-cluster gaps exceed twice it
        let (points, truth) = blobs(&mut rng, k, per, dim, 0.49 * params.bandwidth, 4.5 * params.bandwidth);
        let refs: Vec<&[f64]> = points.iter().map(|p| p.as_slice()).collect();
        let result = mean_shift_modes(&refs, &params).unwrap();
        prop_assert_eq!(result.modes.len(), k);
        prop_assert!(same_assignment(&result.assignment, &truth));
    }

    #[test]
    fn mode_count_ignores_point_order(seed in any::<u64>(), k in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut points, _) = blobs(&mut rng, k, 12, 3, 0.8, 3.0);
        let params = MeanShiftParams::default();
        let before = {
            let refs: Vec<&[f64]> = points.iter().map(|p| p.as_slice()).collect();
            mean_shift_modes(&refs, &params).unwrap().modes.len()
        };
        for i in (1..points.len()).rev() {
            points.swap(i, rng.random_range(0..=i));
        }
        let refs: Vec<&[f64]> = points.iter().map(|p| p.as_slice()).collect();
        prop_assert_eq!(mean_shift_modes(&refs, &params).unwrap().modes.len(), before);
    }

    #[test]
    fn tight_configurations_relabel_identically(seed in any::<u64>(), k in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = MeanShiftParams::default();
        let (points, _) = blobs(&mut rng, k, 9, 4, 0.2, 6.0);
        let refs: Vec<&[f64]> = points.iter().map(|p| p.as_slice()).collect();
        let first = mean_shift_modes(&refs, &params).unwrap();
        let collapsed: Vec<Vec<f64>> = first.assignment.iter().map(|&m| first.modes[m].clone()).collect();
        let refs: Vec<&[f64]> = collapsed.iter().map(|p| p.as_slice()).collect();
        let second = mean_shift_modes(&refs, &params).unwrap();
        prop_assert_eq!(second.modes.len(), first.modes.len());
        prop_assert!(same_assignment(&first.assignment, &second.assignment));
    }

    #[test]
    fn labels_cover_exactly_the_mask(seed in any::<u64>(), p in 0.0f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let field = random_field(&mut rng, 9, 7, 3, 3.0);
        let mask = BinaryMask::from_fn(9, 7, |_, _| rng.random_bool(p));
        let labels = label_pixels(&field, &mask, &MeanShiftParams::default()).unwrap();
        prop_assert_eq!(labels.foreground(), mask);
    }

    #[test]
    fn perturbing_a_frame_only_affects_later_outputs(seed in any::<u64>(), j in 0usize..5, width in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let frames: Vec<Vec<f64>> = (0..5).map(|_| (0..16).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let kernel = CausalKernel::new((0..width).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
        let mut perturbed = frames.clone();
        let k = rng.random_range(0..16);
        perturbed[j][k] += rng.random_range(0.5..5.0);
        let a = causal_conv_time(&frames, &kernel).unwrap();
        let b = causal_conv_time(&perturbed, &kernel).unwrap();
        for i in 0..j {
            prop_assert!(a[i].iter().zip(&b[i]).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn scores_match_brute_force(seed in any::<u64>(), np in 0usize..5, nt in 0usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pred = random_instances(&mut rng, np, 7, 6);
        let truth = random_instances(&mut rng, nt, 7, 6);
        let r = evaluate_instances(&pred, &truth, DEFAULT_SMOOTH).unwrap();
        let bits = |v: &[BinaryMask]| v.iter().map(mask_bits).collect::<Vec<_>>();
        let b = brute_force_eval(&bits(&pred), &bits(&truth), DEFAULT_SMOOTH);
        prop_assert_eq!(r.specificity, b.specificity);
        prop_assert_eq!(r.sensitivity, b.sensitivity);
        prop_assert_eq!(r.sbd, b.sbd);
        prop_assert_eq!(r.dic, b.dic);
        for s in [r.specificity, r.sensitivity, r.sbd] {
            prop_assert!((0.0..=1.0).contains(&s));
        }
        prop_assert!(r.sbd <= r.specificity && r.sbd <= r.sensitivity);
        prop_assert_eq!(evaluate_instances(&truth, &pred, DEFAULT_SMOOTH).unwrap().sbd, r.sbd);
    }

    #[test]
    fn instance_order_does_not_matter(seed in any::<u64>(), np in 1usize..5, nt in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pred = random_instances(&mut rng, np, 7, 6);
        let truth = random_instances(&mut rng, nt, 7, 6);
        let r = evaluate_instances(&pred, &truth, DEFAULT_SMOOTH).unwrap();
        let (mut p2, mut t2) = (pred.clone(), truth.clone());
        p2.reverse();
        t2.rotate_left(1);
        let s = evaluate_instances(&p2, &t2, DEFAULT_SMOOTH).unwrap();
        // means over permuted rows may round differently
        prop_assert!((r.specificity - s.specificity).abs() < 1e-12);
        prop_assert!((r.sensitivity - s.sensitivity).abs() < 1e-12);
        prop_assert_eq!(r.dic, s.dic);
    }
}

#[test]
fn embedding_field_shape_is_checked() {
    assert!(EmbeddingField::from_data(2, 2, 3, vec![0.0; 11]).is_err());
}
