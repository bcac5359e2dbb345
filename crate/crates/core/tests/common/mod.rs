#![allow(dead_code)]

use rand::Rng;
use vessel_trace::loss::{loss_terms, EmbeddingField, LossParams};
use vessel_trace::raster::{BinaryMask, InstanceLabelMap};
use vessel_trace::synthetic::{SceneSpec, TreeSpec};

/// Label map with every id in `1..=c` present and roughly `background` of pixels unlabelled.
pub fn random_labels(rng: &mut impl Rng, w: usize, h: usize, c: usize, background: f64) -> InstanceLabelMap {
    assert!(w * h >= c);
    let mut labels: Vec<u32> = (0..w * h)
        .map(|_| {
            if rng.random_bool(background) {
                0
            } else {
                rng.random_range(1..=c as u32)
            }
        })
        .collect();
    let mut slots: Vec<usize> = (0..w * h).collect();
    for l in 1..=c {
        let k = rng.random_range(0..slots.len());
        labels[slots.swap_remove(k)] = l as u32;
    }
    InstanceLabelMap::from_labels(w, h, labels).unwrap()
}

pub fn random_field(rng: &mut impl Rng, w: usize, h: usize, dim: usize, scale: f64) -> EmbeddingField {
    let data = (0..w * h * dim).map(|_| rng.random_range(-scale..scale)).collect();
    EmbeddingField::from_data(w, h, dim, data).unwrap()
}

/// Central differences of the total loss, one coordinate at a time.
pub fn numeric_gradient(field: &EmbeddingField, labels: &InstanceLabelMap, params: &LossParams, step: f64) -> Vec<f64> {
    let mut probe = field.clone();
    let mut out = vec![0.0; field.data().len()];
    for i in 0..out.len() {
        let x = field.data()[i];
        probe.data_mut()[i] = x + step;
        let up = loss_terms(&probe, labels, params).unwrap().total;
        probe.data_mut()[i] = x - step;
        let down = loss_terms(&probe, labels, params).unwrap().total;
        probe.data_mut()[i] = x;
        out[i] = (up - down) / (2.0 * step);
    }
    out
}

/// `|a - b| / max(|a|, |b|)` over whole vectors; 0 when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale < 1e-12 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

pub struct BruteReport {
    pub specificity: f64,
    pub sensitivity: f64,
    pub sbd: f64,
    pub dic: usize,
}

/// All-pairs Dice table over raw pixel vectors.
pub fn brute_force_eval(pred: &[Vec<bool>], truth: &[Vec<bool>], smooth: f64) -> BruteReport {
    let dice = |a: &[bool], b: &[bool]| {
        let mut tp = 0usize;
        let mut na = 0usize;
        let mut nb = 0usize;
        for (&x, &y) in a.iter().zip(b) {
            tp += usize::from(x && y);
            na += usize::from(x);
            nb += usize::from(y);
        }
        let denom = (na + nb) as f64 + smooth;
        if denom == 0.0 {
            1.0
        } else {
            (2.0 * tp as f64 + smooth) / denom
        }
    };
    let table: Vec<Vec<f64>> = pred.iter().map(|p| truth.iter().map(|t| dice(p, t)).collect()).collect();
    let side = |rows: usize, cols: usize, at: &dyn Fn(usize, usize) -> f64| {
        if rows == 0 {
            return if cols == 0 { 1.0 } else { 0.0 };
        }
        let mut sum = 0.0;
        for r in 0..rows {
            let mut best: f64 = 0.0;
            for c in 0..cols {
                best = best.max(at(r, c));
            }
            sum += best;
        }
        sum / rows as f64
    };
    let specificity = side(pred.len(), truth.len(), &|r, c| table[r][c]);
    let sensitivity = side(truth.len(), pred.len(), &|r, c| table[c][r]);
    BruteReport {
        specificity,
        sensitivity,
        sbd: specificity.min(sensitivity),
        dic: pred.len().abs_diff(truth.len()),
    }
}

pub fn mask_bits(m: &BinaryMask) -> Vec<bool> {
    (0..m.height()).flat_map(|y| (0..m.width()).map(move |x| m.get(x, y))).collect()
}

/// True when `a` and `b` agree up to a bijective relabelling that keeps 0 fixed.
pub fn same_partition(a: &InstanceLabelMap, b: &InstanceLabelMap) -> bool {
    use std::collections::HashMap;
    if a.labels().len() != b.labels().len() {
        return false;
    }
    let mut fwd = HashMap::new();
    let mut back = HashMap::new();
    for (&x, &y) in a.labels().iter().zip(b.labels()) {
        if (x == 0) != (y == 0) {
            return false;
        }
        if *fwd.entry(x).or_insert(y) != y || *back.entry(y).or_insert(x) != x {
            return false;
        }
    }
    true
}

/// 8-neighbour count on the raw grid, plus one, for set pixels.
pub fn brute_node_values(m: &BinaryMask) -> Vec<u8> {
    let (w, h) = (m.width() as i64, m.height() as i64);
    let bits = mask_bits(m);
    let on = |x: i64, y: i64| x >= 0 && y >= 0 && x < w && y < h && bits[(y * w + x) as usize];
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if !on(x, y) {
                out.push(0);
                continue;
            }
            let mut n = 1u8;
            for dy in -1..=1 {
                for dx in -1..=1 {
                    if (dx, dy) != (0, 0) && on(x + dx, y + dy) {
                        n += 1;
                    }
                }
            }
            out.push(n);
        }
    }
    out
}

/// The 30-scene benchmark mix: 1 to 3 trees of depth 0 to 3 on 256x256.
pub fn benchmark_scene(seed: u64) -> SceneSpec {
    let n = 1 + (seed % 3) as usize;
    let trees = (0..n)
        .map(|i| TreeSpec {
            depth: (seed as usize + i) % 4,
            ..TreeSpec::default()
        })
        .collect();
    SceneSpec {
        trees,
        rng_seed: seed,
        ..SceneSpec::default()
    }
}
