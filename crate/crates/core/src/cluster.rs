//! Flat-kernel mean shift over embedding vectors.

use crate::error::{Error, Result};
use crate::loss::EmbeddingField;
use crate::raster::{BinaryMask, InstanceLabelMap};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanShiftParams {
    /// Flat kernel radius.
    pub bandwidth: f64,
    pub max_iters: usize,
    /// Ascent stops once a step moves less than this.
    pub shift_tol: f64,
    /// Converged positions closer than this collapse into one mode.
    pub merge_radius: f64,
    /// Seed every k-th point; points left uncovered by a mode are seeded too.
    pub seed_stride: usize,
}

impl Default for MeanShiftParams {
    fn default() -> Self {
        Self::with_bandwidth(1.0)
    }
}

impl MeanShiftParams {
    pub fn with_bandwidth(bandwidth: f64) -> Self {
        Self {
            bandwidth,
            max_iters: 300,
            shift_tol: 1e-3 * bandwidth,
            merge_radius: bandwidth / 2.0,
            seed_stride: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.bandwidth > 0.0) {
            return Err(Error::Config(format!(
                "bandwidth must be positive, got {}",
                self.bandwidth
            )));
        }
        if !(self.merge_radius >= 0.0 && self.merge_radius <= self.bandwidth) {
            return Err(Error::Config(format!(
                "merge radius {} must lie in [0, bandwidth]",
                self.merge_radius
            )));
        }
        if self.seed_stride == 0 {
            return Err(Error::Config("seed stride must be at least 1".to_string()));
        }
        Ok(())
    }
}

/// Modes found by mean shift and the mode index of every input point.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanShiftResult {
    pub modes: Vec<Vec<f64>>,
    pub assignment: Vec<usize>,
}

fn dist_sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Converged position of a seed and the number of points in its final window.
fn ascend(points: &[&[f64]], start: &[f64], params: &MeanShiftParams) -> (Vec<f64>, usize) {
    let dim = start.len();
    let bw2 = params.bandwidth * params.bandwidth;
    let tol2 = params.shift_tol * params.shift_tol;
    let mut current = start.to_vec();
    let mut next = vec![0.0; dim];
    let mut support = 0;
    for _ in 0..params.max_iters {
        next.iter_mut().for_each(|v| *v = 0.0);
        support = 0;
        for p in points {
            if dist_sq(p, &current) <= bw2 {
                support += 1;
                for (n, v) in next.iter_mut().zip(p.iter()) {
                    *n += v;
                }
            }
        }
        if support == 0 {
            break;
        }
        next.iter_mut().for_each(|v| *v /= support as f64);
        let moved = dist_sq(&next, &current);
        std::mem::swap(&mut current, &mut next);
        if moved < tol2 {
            break;
        }
    }
    (current, support)
}

/// Clusters `points` by flat-kernel mean shift.
///
/// Modes are ordered by decreasing support with a lexicographic tie-break on
/// their coordinates, so the result does not depend on input order.
pub fn mean_shift_modes(points: &[&[f64]], params: &MeanShiftParams) -> Result<MeanShiftResult> {
    params.validate()?;
    if points.is_empty() {
        return Err(Error::EmptyInput("mean shift needs at least one point"));
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim) {
        return Err(Error::InvalidArgument(
            "all points must share one dimension".to_string(),
        ));
    }
    let bw2 = params.bandwidth * params.bandwidth;
    let merge2 = params.merge_radius * params.merge_radius;

    let mut converged: Vec<(Vec<f64>, usize)> = points
        .iter()
        .step_by(params.seed_stride)
        .map(|p| ascend(points, p, params))
        .collect();
    if params.seed_stride > 1 {
        // every point must lie within one bandwidth of some converged seed
        let mut extra = Vec::new();
        for p in points {
            let covered = converged.iter().chain(&extra).any(|(m, _)| dist_sq(m, p) <= bw2);
            if !covered {
                extra.push(ascend(points, p, params));
            }
        }
        converged.extend(extra);
    }

    converged.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| lex_cmp(&a.0, &b.0)));
    let mut modes: Vec<Vec<f64>> = Vec::new();
    for (pos, _) in converged {
        if !modes.iter().any(|m| dist_sq(m, &pos) <= merge2) {
            modes.push(pos);
        }
    }

    let mut assignment: Vec<usize> = points
        .iter()
        .map(|p| nearest(&modes, p))
        .collect();

    // reorder by member count, ties by coordinates
    let mut counts = vec![0usize; modes.len()];
    for &a in &assignment {
        counts[a] += 1;
    }
    let mut order: Vec<usize> = (0..modes.len()).filter(|&k| counts[k] > 0).collect();
    order.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then_with(|| lex_cmp(&modes[a], &modes[b])));
    let mut rank = vec![usize::MAX; modes.len()];
    for (r, &k) in order.iter().enumerate() {
        rank[k] = r;
    }
    for a in &mut assignment {
        *a = rank[*a];
    }
    let modes = order.into_iter().map(|k| modes[k].clone()).collect();
    Ok(MeanShiftResult { modes, assignment })
}

fn lex_cmp(a: &[f64], b: &[f64]) -> std::cmp::Ordering {
    for (x, y) in a.iter().zip(b) {
        match x.total_cmp(y) {
            std::cmp::Ordering::Equal => continue,
            other => return other,
        }
    }
    std::cmp::Ordering::Equal
}

fn nearest(modes: &[Vec<f64>], p: &[f64]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (k, m) in modes.iter().enumerate() {
        let d = dist_sq(m, p);
        if d < best_d {
            best_d = d;
            best = k;
        }
    }
    best
}

/// Mean-shift labels for the masked pixels of `field`; label 1 is the largest cluster.
pub fn label_pixels(
    field: &EmbeddingField,
    vessel_mask: &BinaryMask,
    params: &MeanShiftParams,
) -> Result<InstanceLabelMap> {
    let (w, h) = (field.width(), field.height());
    if vessel_mask.width() != w || vessel_mask.height() != h {
        return Err(Error::InvalidArgument(format!(
            "mask {}x{} does not match embedding field {w}x{h}",
            vessel_mask.width(),
            vessel_mask.height()
        )));
    }
    params.validate()?;
    let mut labels = InstanceLabelMap::new(w, h);
    let indices: Vec<usize> = (0..w * h).filter(|&i| vessel_mask.bits()[i]).collect();
    if indices.is_empty() {
        return Ok(labels);
    }
    let points: Vec<&[f64]> = indices.iter().map(|&i| field.vector(i)).collect();
    let result = mean_shift_modes(&points, params)?;
    for (&i, &a) in indices.iter().zip(&result.assignment) {
        labels.set(i % w, i / w, a as u32 + 1);
    }
    Ok(labels)
}
