//! Causal temporal filtering and history-patch sequences along a traced tree.

use crate::error::{Error, Result};
use crate::raster::{crop_patch, Image, Patch, Point};
use crate::trace::VesselTree;

/// Maximum number of frames in a sequence, base included.
pub const MAX_FRAMES: usize = 5;

/// Temporal weights; `taps[m]` multiplies the frame `m` steps in the past.
#[derive(Debug, Clone, PartialEq)]
pub struct CausalKernel {
    taps: Vec<f64>,
}

impl CausalKernel {
    pub fn new(taps: Vec<f64>) -> Result<Self> {
        if taps.is_empty() {
            return Err(Error::InvalidArgument("kernel needs at least one tap".to_string()));
        }
        Ok(Self { taps })
    }

    pub fn identity() -> Self {
        Self { taps: vec![1.0] }
    }

    pub fn taps(&self) -> &[f64] {
        &self.taps
    }

    pub fn width(&self) -> usize {
        self.taps.len()
    }
}

/// Applies `kernel` along the frame axis: output `j` mixes frames `j, j-1, ...`,
/// with frame 0 replicated for history before the sequence start.
pub fn causal_conv_time(frames: &[Vec<f64>], kernel: &CausalKernel) -> Result<Vec<Vec<f64>>> {
    let Some(first) = frames.first() else {
        return Err(Error::EmptyInput("causal convolution needs at least one frame"));
    };
    let n = first.len();
    if frames.iter().any(|f| f.len() != n) {
        return Err(Error::InvalidArgument(
            "all frames must share one extent".to_string(),
        ));
    }
    let mut out = Vec::with_capacity(frames.len());
    for j in 0..frames.len() {
        let mut acc = vec![0.0; n];
        for (m, &tap) in kernel.taps.iter().enumerate() {
            let src = &frames[j.saturating_sub(m)];
            for (a, v) in acc.iter_mut().zip(src) {
                *a += tap * v;
            }
        }
        out.push(acc);
    }
    Ok(out)
}

/// History patches stepped back along the tree, earliest first, base last.
#[derive(Debug, Clone, PartialEq)]
pub struct TemporalSequence {
    pub frames: Vec<Patch>,
    pub centers: Vec<Point>,
    /// Trace start the sequence was built for.
    pub anchor: Point,
}

impl TemporalSequence {
    pub fn single(image: &Image, target: Point, patch_size: usize) -> Result<Self> {
        Ok(Self {
            frames: vec![crop_patch(image, target, patch_size)?],
            centers: vec![target],
            anchor: target,
        })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn base(&self) -> &Patch {
        self.frames.last().expect("sequence has a base frame")
    }

    /// Same history with the base frame recropped around `center`.
    pub fn with_base(&self, image: &Image, center: Point) -> Result<Self> {
        let mut out = self.clone();
        let size = self.base().size;
        *out.frames.last_mut().expect("base frame") = crop_patch(image, center, size)?;
        *out.centers.last_mut().expect("base center") = center;
        Ok(out)
    }
}

/// Centers `step, 2*step, ...` arc-length pixels back from `node` toward the origin.
pub fn history_centers(tree: &VesselTree, node: usize, step: f64, count: usize) -> Vec<Point> {
    let mut centers = Vec::with_capacity(count);
    let mut current = node;
    let mut prev = tree.node(node).pos;
    let mut prev_cum = 0.0;
    let mut cum = 0.0;
    let mut next = step;
    while centers.len() < count {
        let Some(edge) = tree.parent_edge(current) else {
            break;
        };
        for &p in edge.polyline.iter().rev() {
            cum += prev.dist(p);
            while centers.len() < count && cum >= next {
                let pick = if cum - next <= next - prev_cum { p } else { prev };
                centers.push(pick);
                next += step;
            }
            prev = p;
            prev_cum = cum;
        }
        current = edge.parent;
    }
    centers
}

/// Builds the sequence for a trace step at `target`, walking back along the tree.
///
/// Returns the base patch alone when the tree holds no history behind the
/// node nearest `target`; otherwise up to four history patches precede it.
pub fn build_temporal_sequence(
    tree: &VesselTree,
    image: &Image,
    target: Point,
    step: f64,
    patch_size: usize,
) -> Result<TemporalSequence> {
    if target.x < 0
        || target.y < 0
        || target.x as usize >= image.width()
        || target.y as usize >= image.height()
    {
        return Err(Error::InvalidTarget(format!(
            "({}, {}) lies outside the image",
            target.x, target.y
        )));
    }
    let nearest = tree
        .nodes()
        .iter()
        .min_by(|a, b| target.dist_sq(a.pos).total_cmp(&target.dist_sq(b.pos)))
        .expect("tree has an origin");
    if nearest.pos.dist(target) > patch_size as f64 {
        return Err(Error::InvalidTarget(format!(
            "({}, {}) is farther than {patch_size} px from every tree node",
            target.x, target.y
        )));
    }
    let mut centers = history_centers(tree, nearest.id, step, MAX_FRAMES - 1);
    centers.reverse();
    centers.push(target);
    let frames = centers
        .iter()
        .map(|&c| crop_patch(image, c, patch_size))
        .collect::<Result<Vec<_>>>()?;
    Ok(TemporalSequence {
        frames,
        centers,
        anchor: target,
    })
}
