//! Discriminative embedding loss: attraction toward cluster means, hinge
//! repulsion between means, and a small pull of the means toward the origin.
//!
//! All norms are Euclidean. Reductions run in pixel order, then cluster order,
//! so results are bitwise reproducible.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::raster::InstanceLabelMap;

/// Per-pixel D-dimensional embedding vectors, stored pixel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingField {
    width: usize,
    height: usize,
    dim: usize,
    data: Vec<f64>,
}

impl EmbeddingField {
    pub fn zeros(width: usize, height: usize, dim: usize) -> Self {
        Self {
            width,
            height,
            dim,
            data: vec![0.0; width * height * dim],
        }
    }

    pub fn from_data(width: usize, height: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim < 2 {
            return Err(Error::InvalidArgument(format!(
                "embedding dimension must be at least 2, got {dim}"
            )));
        }
        if data.len() != width * height * dim {
            return Err(Error::InvalidArgument(format!(
                "embedding data length {} does not match {width}x{height}x{dim}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(
                "embedding values must be finite".to_string(),
            ));
        }
        Ok(Self {
            width,
            height,
            dim,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Vector of the pixel with row-major index `i`.
    pub fn vector(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn vector_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn get(&self, x: usize, y: usize) -> &[f64] {
        self.vector(y * self.width + x)
    }

    fn check_labels(&self, labels: &InstanceLabelMap) -> Result<()> {
        if labels.width() != self.width || labels.height() != self.height {
            return Err(Error::InvalidArgument(format!(
                "label map {}x{} does not match embedding field {}x{}",
                labels.width(),
                labels.height(),
                self.width,
                self.height
            )));
        }
        Ok(())
    }
}

/// Loss hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParams {
    /// Cluster radius below which pixels feel no attraction.
    pub delta_v: f64,
    /// Half the minimum distance kept between cluster means.
    pub delta_d: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for LossParams {
    fn default() -> Self {
        Self {
            delta_v: 0.5,
            delta_d: 3.0,
            alpha: 1.0,
            beta: 1.0,
            gamma: 0.001,
        }
    }
}

impl LossParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta_v > 0.0) || !(self.delta_d > self.delta_v) {
            return Err(Error::Config(format!(
                "need 0 < delta_v < delta_d, got delta_v={} delta_d={}",
                self.delta_v, self.delta_d
            )));
        }
        if self.alpha < 0.0 || self.beta < 0.0 || self.gamma < 0.0 {
            return Err(Error::Config("loss weights must be non-negative".to_string()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub attraction: f64,
    pub repulsion: f64,
    pub regularization: f64,
    pub total: f64,
}

/// Mean embedding of one instance.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterStats {
    pub label: u32,
    pub mean: Vec<f64>,
    pub count: usize,
}

/// Per-label means in ascending label order.
pub fn cluster_means(field: &EmbeddingField, labels: &InstanceLabelMap) -> Result<Vec<ClusterStats>> {
    field.check_labels(labels)?;
    let max_label = labels.labels().iter().copied().max().unwrap_or(0) as usize;
    let dim = field.dim;
    let mut sums = vec![0.0; (max_label + 1) * dim];
    let mut counts = vec![0usize; max_label + 1];
    for (i, &l) in labels.labels().iter().enumerate() {
        if l == 0 {
            continue;
        }
        let l = l as usize;
        counts[l] += 1;
        for (s, v) in sums[l * dim..(l + 1) * dim].iter_mut().zip(field.vector(i)) {
            *s += v;
        }
    }
    let stats: Vec<ClusterStats> = (1..=max_label)
        .filter(|&l| counts[l] > 0)
        .map(|l| ClusterStats {
            label: l as u32,
            mean: sums[l * dim..(l + 1) * dim]
                .iter()
                .map(|s| s / counts[l] as f64)
                .collect(),
            count: counts[l],
        })
        .collect();
    if stats.is_empty() {
        return Err(Error::EmptyInput("label map has no foreground pixels"));
    }
    Ok(stats)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Maps each label id to its index in `stats`.
fn cluster_index(stats: &[ClusterStats]) -> Vec<Option<usize>> {
    let max_label = stats.last().map_or(0, |s| s.label as usize);
    let mut index = vec![None; max_label + 1];
    for (k, s) in stats.iter().enumerate() {
        index[s.label as usize] = Some(k);
    }
    index
}

pub fn loss_terms(
    field: &EmbeddingField,
    labels: &InstanceLabelMap,
    params: &LossParams,
) -> Result<LossBreakdown> {
    let stats = cluster_means(field, labels)?;
    let index = cluster_index(&stats);
    let c = stats.len();

    let mut per_cluster = vec![0.0; c];
    for (i, &l) in labels.labels().iter().enumerate() {
        if l == 0 {
            continue;
        }
        let k = index[l as usize].expect("label has stats");
        let hinge = (distance(&stats[k].mean, field.vector(i)) - params.delta_v).max(0.0);
        per_cluster[k] += hinge * hinge;
    }
    let attraction = per_cluster
        .iter()
        .zip(&stats)
        .map(|(s, st)| s / st.count as f64)
        .sum::<f64>()
        / c as f64;

    let mut repulsion = 0.0;
    if c > 1 {
        for a in 0..c {
            for b in 0..c {
                if a != b {
                    let hinge =
                        (2.0 * params.delta_d - distance(&stats[a].mean, &stats[b].mean)).max(0.0);
                    repulsion += hinge * hinge;
                }
            }
        }
        repulsion /= (c * (c - 1)) as f64;
    }

    let regularization = stats.iter().map(|s| norm(&s.mean)).sum::<f64>() / c as f64;
    let total =
        params.alpha * attraction + params.beta * repulsion + params.gamma * regularization;
    Ok(LossBreakdown {
        attraction,
        repulsion,
        regularization,
        total,
    })
}

/// Mean of the per-frame loss totals over a temporal stack.
pub fn temporal_loss(
    frames: &[(EmbeddingField, InstanceLabelMap)],
    params: &LossParams,
) -> Result<f64> {
    if frames.is_empty() {
        return Err(Error::EmptyInput("temporal loss needs at least one frame"));
    }
    let mut sum = 0.0;
    for (field, labels) in frames {
        sum += loss_terms(field, labels, params)?.total;
    }
    Ok(sum / frames.len() as f64)
}

/// Analytic gradient of the total loss with respect to every pixel embedding.
///
/// Each pixel reaches the loss both directly (attraction) and through its
/// cluster mean, to which it contributes `1/N_c`. Background gradients are
/// zero. Subgradients at hinge boundaries and at zero-length vectors are 0.
pub fn loss_gradient(
    field: &EmbeddingField,
    labels: &InstanceLabelMap,
    params: &LossParams,
) -> Result<EmbeddingField> {
    let stats = cluster_means(field, labels)?;
    let index = cluster_index(&stats);
    let c = stats.len();
    let dim = field.dim;
    let cf = c as f64;

    // Attraction: residual gradient g_i w.r.t. r_i = mu_c - x_i, and its per-cluster sum.
    let mut residual_grad = vec![0.0; field.data.len()];
    let mut residual_sum = vec![0.0; c * dim];
    for (i, &l) in labels.labels().iter().enumerate() {
        if l == 0 {
            continue;
        }
        let k = index[l as usize].expect("label has stats");
        let x = field.vector(i);
        let mean = &stats[k].mean;
        let d = distance(mean, x);
        let hinge = d - params.delta_v;
        if hinge > 0.0 && d > 0.0 {
            let scale = 2.0 * hinge / d;
            for j in 0..dim {
                let g = scale * (mean[j] - x[j]);
                residual_grad[i * dim + j] = g;
                residual_sum[k * dim + j] += g;
            }
        }
    }

    // Gradient with respect to each cluster mean from repulsion and regularization.
    let mut mean_grad = vec![0.0; c * dim];
    if c > 1 {
        let pair_scale = params.beta / (cf * (cf - 1.0));
        for a in 0..c {
            for b in 0..c {
                if a == b {
                    continue;
                }
                let d = distance(&stats[a].mean, &stats[b].mean);
                let hinge = 2.0 * params.delta_d - d;
                if hinge > 0.0 && d > 0.0 {
                    // (a,b) and (b,a) both depend on mu_a
                    let scale = -4.0 * hinge / d * pair_scale;
                    for j in 0..dim {
                        mean_grad[a * dim + j] += scale * (stats[a].mean[j] - stats[b].mean[j]);
                    }
                }
            }
        }
    }
    for (k, s) in stats.iter().enumerate() {
        let n = norm(&s.mean);
        if n > 0.0 {
            for j in 0..dim {
                mean_grad[k * dim + j] += params.gamma / cf * s.mean[j] / n;
            }
        }
    }

    let mut grad = EmbeddingField::zeros(field.width, field.height, dim);
    for (i, &l) in labels.labels().iter().enumerate() {
        if l == 0 {
            continue;
        }
        let k = index[l as usize].expect("label has stats");
        let n = stats[k].count as f64;
        let out = grad.vector_mut(i);
        for j in 0..dim {
            let attraction =
                params.alpha / cf / n * (residual_sum[k * dim + j] / n - residual_grad[i * dim + j]);
            out[j] = attraction + mean_grad[k * dim + j] / n;
        }
    }
    Ok(grad)
}

/// Plain gradient descent on embeddings treated as free parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitConfig {
    pub dim: usize,
    pub learning_rate: f64,
    pub max_steps: usize,
    pub tolerance: f64,
    pub init_sigma: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            dim: 12,
            learning_rate: 0.1,
            max_steps: 2000,
            tolerance: 1e-3,
            init_sigma: 0.1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub field: EmbeddingField,
    pub loss: LossBreakdown,
    pub steps: usize,
    pub converged: bool,
}

/// Largest distance by which any labelled pixel sits outside `delta_v` of its mean.
fn max_hinge(field: &EmbeddingField, labels: &InstanceLabelMap, params: &LossParams) -> Result<f64> {
    let stats = cluster_means(field, labels)?;
    let index = cluster_index(&stats);
    let mut worst: f64 = 0.0;
    for (i, &l) in labels.labels().iter().enumerate() {
        if l != 0 {
            let k = index[l as usize].expect("label has stats");
            worst = worst.max(distance(&stats[k].mean, field.vector(i)) - params.delta_v);
        }
    }
    Ok(worst)
}

/// Fits embeddings for `labels` directly against the loss.
///
/// Stops once the total drops to `config.tolerance` and no pixel lies more
/// than `config.tolerance` outside `delta_v` of its mean; otherwise runs
/// `config.max_steps` and logs a warning, returning the last field.
pub fn fit_free_embeddings(
    labels: &InstanceLabelMap,
    params: &LossParams,
    config: &FitConfig,
    seed: u64,
) -> Result<FitOutcome> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let init = Normal::new(0.0, config.init_sigma)
        .map_err(|e| Error::Config(format!("invalid init sigma: {e}")))?;
    let n = labels.width() * labels.height() * config.dim;
    let data = (0..n).map(|_| init.sample(&mut rng)).collect();
    let mut field = EmbeddingField::from_data(labels.width(), labels.height(), config.dim, data)?;

    let mut loss = loss_terms(&field, labels, params)?;
    let mut steps = 0;
    // a total under tolerance can still hide a few loose pixels, e.g. right after init
    let done = |field: &EmbeddingField, loss: &LossBreakdown| -> Result<bool> {
        Ok(loss.total <= config.tolerance && max_hinge(field, labels, params)? <= config.tolerance)
    };
    let mut converged = done(&field, &loss)?;
    while !converged && steps < config.max_steps {
        let grad = loss_gradient(&field, labels, params)?;
        for (x, g) in field.data.iter_mut().zip(&grad.data) {
            *x -= config.learning_rate * g;
        }
        steps += 1;
        loss = loss_terms(&field, labels, params)?;
        converged = done(&field, &loss)?;
    }
    if !converged {
        log::warn!(
            "embedding fit did not reach loss {} after {steps} steps (final {:.6})",
            config.tolerance,
            loss.total
        );
    }
    Ok(FitOutcome {
        field,
        loss,
        steps,
        converged,
    })
}
