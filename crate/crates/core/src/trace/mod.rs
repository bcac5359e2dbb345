//! Seeded tracing of one vessel tree through overlapping patches.
//!
//! Each step embeds five shifted copies of the patch at the current start,
//! keeps the instance holding the start in every copy, accumulates those
//! votes into a running-mean probability map, rebuilds the tree from the
//! thresholded map and moves on to the nearest unvisited endpoint.

mod tree;

pub use tree::{
    build_tree, frontier_mask, init_tree, next_start_point, polyline_length, update_tree,
    NodeKind, TreeEdge, TreeNode, TreeParams, VesselTree,
};

use crate::cluster::{label_pixels, MeanShiftParams};
use crate::embedder::Embedder;
use crate::error::{Error, Result};
use crate::raster::{BinaryMask, Image, Point};
use crate::temporal::{build_temporal_sequence, TemporalSequence};

/// Two user-marked points near a tree's source; the trace starts at `p1` heading toward `p2`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SeedVector {
    pub tree_id: String,
    pub p1: Point,
    pub p2: Point,
}

/// Start point and unit direction of a seed.
pub fn derive_seed(seed: &SeedVector) -> Result<(Point, (f64, f64))> {
    if seed.p1 == seed.p2 {
        return Err(Error::InvalidSeed(format!(
            "seed {} uses the same point twice",
            seed.tree_id
        )));
    }
    let dx = f64::from(seed.p2.x - seed.p1.x);
    let dy = f64::from(seed.p2.y - seed.p1.y);
    let n = dx.hypot(dy);
    Ok((seed.p1, (dx / n, dy / n)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceConfig {
    pub patch_size: usize,
    /// Arc-length spacing of history frames.
    pub step: f64,
    pub shifts: Vec<(i32, i32)>,
    pub prob_threshold: f64,
    pub start_dedup_radius: f64,
    pub max_patches: usize,
    pub history_frames: usize,
    pub mean_shift: MeanShiftParams,
    pub tree: TreeParams,
    /// Run the shifted samples of one step on separate threads.
    pub parallel_samples: bool,
}

impl Default for TraceConfig {
    fn default() -> Self {
        Self {
            patch_size: 96,
            step: 10.0,
            shifts: vec![(0, 0), (0, -10), (0, 10), (-10, 0), (10, 0)],
            prob_threshold: 0.6,
            start_dedup_radius: 5.0,
            max_patches: 10_000,
            history_frames: 4,
            mean_shift: MeanShiftParams {
                seed_stride: 8,
                ..MeanShiftParams::default()
            },
            tree: TreeParams::default(),
            parallel_samples: false,
        }
    }
}

impl TraceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 {
            return Err(Error::Config("patch size must be positive".to_string()));
        }
        if !(self.prob_threshold > 0.5 && self.prob_threshold <= 1.0) {
            return Err(Error::Config(format!(
                "probability threshold must lie in (0.5, 1], got {}",
                self.prob_threshold
            )));
        }
        if !self.shifts.contains(&(0, 0)) {
            return Err(Error::Config("shifts must include (0, 0)".to_string()));
        }
        if !(self.step > 0.0) {
            return Err(Error::Config("step must be positive".to_string()));
        }
        if self.history_frames > 4 {
            return Err(Error::Config("at most four history frames are supported".to_string()));
        }
        self.mean_shift.validate()
    }
}

/// Per-pixel running mean of binary instance votes.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMap {
    width: usize,
    height: usize,
    sum: Vec<f64>,
    count: Vec<u32>,
}

impl ProbabilityMap {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            sum: vec![0.0; width * height],
            count: vec![0; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn value(&self, x: usize, y: usize) -> f64 {
        let i = y * self.width + x;
        if self.count[i] == 0 {
            0.0
        } else {
            self.sum[i] / f64::from(self.count[i])
        }
    }

    pub fn values(&self) -> Vec<f64> {
        (0..self.width * self.height)
            .map(|i| self.value(i % self.width, i / self.width))
            .collect()
    }

    pub fn count(&self, x: usize, y: usize) -> u32 {
        self.count[y * self.width + x]
    }

    /// Pixels sampled at least once.
    pub fn covered(&self) -> BinaryMask {
        BinaryMask::from_fn(self.width, self.height, |x, y| self.count(x, y) > 0)
    }
}

/// One sample's selected instance inside its window.
#[derive(Debug, Clone, PartialEq)]
pub struct Vote {
    pub origin: Point,
    pub mask: BinaryMask,
}

/// Adds every vote: each window pixel gains one sample, and one hit if the vote marks it.
pub fn update_probability_map(map: &mut ProbabilityMap, votes: &[Vote]) -> Result<()> {
    for v in votes {
        let (w, h) = (v.mask.width(), v.mask.height());
        if v.origin.x < 0
            || v.origin.y < 0
            || v.origin.x as usize + w > map.width
            || v.origin.y as usize + h > map.height
        {
            return Err(Error::InvalidArgument(format!(
                "vote window at ({}, {}) leaves the map",
                v.origin.x, v.origin.y
            )));
        }
    }
    for v in votes {
        let (ox, oy) = (v.origin.x as usize, v.origin.y as usize);
        for y in 0..v.mask.height() {
            for x in 0..v.mask.width() {
                let i = (oy + y) * map.width + ox + x;
                map.count[i] += 1;
                if v.mask.get(x, y) {
                    map.sum[i] += 1.0;
                }
            }
        }
    }
    Ok(())
}

/// Pixels whose probability reaches `threshold` (inclusive).
pub fn binarize_probability(map: &ProbabilityMap, threshold: f64) -> BinaryMask {
    BinaryMask::from_fn(map.width, map.height, |x, y| map.value(x, y) >= threshold)
}

/// Majority label among labelled pixels within `snap` of the anchor.
///
/// Ties go to the anchor's own label, then to the lower label.
fn select_instance(labels: &crate::raster::InstanceLabelMap, local: Point, snap: f64) -> Option<u32> {
    let r = snap.floor() as i32;
    let mut votes: Vec<(u32, usize)> = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            let p = local.offset(dx, dy);
            if p.dist_sq(local) > snap * snap {
                continue;
            }
            let l = labels.at(p);
            if l == 0 {
                continue;
            }
            match votes.iter_mut().find(|(v, _)| *v == l) {
                Some(e) => e.1 += 1,
                None => votes.push((l, 1)),
            }
        }
    }
    let own = labels.at(local);
    votes
        .into_iter()
        .max_by(|a, b| {
            a.1.cmp(&b.1)
                .then((a.0 == own).cmp(&(b.0 == own)))
                .then(b.0.cmp(&a.0))
        })
        .map(|(l, _)| l)
}

fn sample_one(
    image: &Image,
    semantic_mask: &BinaryMask,
    sequence: &TemporalSequence,
    start: Point,
    shift: (i32, i32),
    embedder: &dyn Embedder,
    config: &TraceConfig,
) -> Result<Vote> {
    let shifted = sequence.with_base(image, start.offset(shift.0, shift.1))?;
    let base = shifted.base();
    let semantic = semantic_mask.crop(base.origin, base.size);
    let field = embedder.embed(&shifted, &semantic)?;
    if field.width() != base.size || field.height() != base.size {
        return Err(Error::Protocol(format!(
            "embedder returned a {}x{} field for a {}-pixel patch",
            field.width(),
            field.height(),
            base.size
        )));
    }
    let labels = label_pixels(&field, &semantic, &config.mean_shift)?;
    let local = start.offset(-base.origin.x, -base.origin.y);
    let mask = match select_instance(&labels, local, config.tree.seed_snap) {
        Some(l) => labels.mask_of(l),
        None => BinaryMask::new(base.size, base.size),
    };
    Ok(Vote {
        origin: base.origin,
        mask,
    })
}

/// Embeds and labels every shifted copy of the patch at `start`, returning the selected instances.
///
/// History frames come from `tree` when one exists and stay fixed across shifts.
pub fn sample_patch_labels(
    image: &Image,
    semantic_mask: &BinaryMask,
    tree: Option<&VesselTree>,
    start: Point,
    embedder: &dyn Embedder,
    config: &TraceConfig,
) -> Result<Vec<Vote>> {
    let sequence = match tree {
        Some(t) if config.history_frames > 0 => {
            match build_temporal_sequence(t, image, start, config.step, config.patch_size) {
                Ok(mut s) => {
                    let drop = s.len() - 1 - (s.len() - 1).min(config.history_frames);
                    s.frames.drain(..drop);
                    s.centers.drain(..drop);
                    s
                }
                Err(Error::InvalidTarget(_)) => {
                    TemporalSequence::single(image, start, config.patch_size)?
                }
                Err(e) => return Err(e),
            }
        }
        _ => TemporalSequence::single(image, start, config.patch_size)?,
    };
    if config.parallel_samples && config.shifts.len() > 1 {
        std::thread::scope(|s| {
            let handles: Vec<_> = config
                .shifts
                .iter()
                .map(|&shift| {
                    let seq = &sequence;
                    s.spawn(move || {
                        sample_one(image, semantic_mask, seq, start, shift, embedder, config)
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("sampling thread panicked"))
                .collect()
        })
    } else {
        config
            .shifts
            .iter()
            .map(|&shift| sample_one(image, semantic_mask, &sequence, start, shift, embedder, config))
            .collect()
    }
}

/// State after one tracing step, handed to observers.
pub struct TraceStep<'a> {
    pub iteration: usize,
    pub start: Point,
    pub tree: &'a VesselTree,
    pub map: &'a ProbabilityMap,
    pub accepted: bool,
}

#[derive(Debug, Clone)]
pub struct TraceResult {
    pub mask: BinaryMask,
    pub tree: VesselTree,
    pub probability: ProbabilityMap,
    pub patches: usize,
    pub truncated: bool,
}

pub fn trace_tree(
    image: &Image,
    semantic_mask: &BinaryMask,
    seed: &SeedVector,
    embedder: &dyn Embedder,
    config: &TraceConfig,
) -> Result<TraceResult> {
    trace_tree_observed(image, semantic_mask, seed, embedder, config, &mut |_| {})
}

/// [`trace_tree`] with a callback after every step.
pub fn trace_tree_observed(
    image: &Image,
    semantic_mask: &BinaryMask,
    seed: &SeedVector,
    embedder: &dyn Embedder,
    config: &TraceConfig,
    observer: &mut dyn FnMut(&TraceStep<'_>),
) -> Result<TraceResult> {
    config.validate()?;
    let (w, h) = (image.width(), image.height());
    if semantic_mask.width() != w || semantic_mask.height() != h {
        return Err(Error::InvalidArgument(
            "semantic mask does not match the image".to_string(),
        ));
    }
    let (start, direction) = derive_seed(seed)?;
    if !semantic_mask.contains(start) {
        return Err(Error::InvalidSeed(format!(
            "seed {} starts outside the image",
            seed.tree_id
        )));
    }

    let mut map = ProbabilityMap::new(w, h);
    let mut tree: Option<VesselTree> = None;
    let mut used = Vec::new();
    let mut current = start;
    let mut patches = 0;
    let mut truncated = false;
    loop {
        if patches >= config.max_patches {
            log::warn!(
                "tree {}: stopped after {patches} patches with endpoints left",
                seed.tree_id
            );
            truncated = true;
            break;
        }
        let votes = sample_patch_labels(image, semantic_mask, tree.as_ref(), current, embedder, config)?;
        patches += 1;
        used.push(current);
        let snapshot = map.clone();
        update_probability_map(&mut map, &votes)?;
        let mask = binarize_probability(&map, config.prob_threshold);
        let covered = map.covered();

        let mut accepted = true;
        match &tree {
            None => {
                let frontier = frontier_mask(&covered, config.tree.frontier_radius);
                let built = tree::init_tree_unchecked(
                    &seed.tree_id,
                    &mask,
                    &frontier,
                    start,
                    direction,
                    &config.tree,
                );
                match built {
                    Some(t) => tree = Some(t),
                    None => {
                        log::warn!(
                            "tree {}: no vessel found at the seed",
                            seed.tree_id
                        );
                        tree = Some(VesselTree::origin_only(&seed.tree_id, start));
                        observer(&TraceStep {
                            iteration: patches,
                            start: current,
                            tree: tree.as_ref().expect("tree set"),
                            map: &map,
                            accepted: false,
                        });
                        break;
                    }
                }
            }
            Some(t) => match update_tree(t, &mask, &covered, current, &config.tree) {
                Ok(next) => tree = Some(next),
                Err(Error::Disconnected) => {
                    log::warn!(
                        "tree {}: votes at ({}, {}) do not connect to the tree; discarded",
                        seed.tree_id,
                        current.x,
                        current.y
                    );
                    map = snapshot;
                    accepted = false;
                }
                Err(e) => return Err(e),
            },
        }
        let t = tree.as_ref().expect("tree set");
        observer(&TraceStep {
            iteration: patches,
            start: current,
            tree: t,
            map: &map,
            accepted,
        });
        match next_start_point(t, &used, current, config.start_dedup_radius) {
            Some(p) => current = p,
            None => break,
        }
    }
    let tree = tree.expect("tree set after the first step");
    Ok(TraceResult {
        mask: binarize_probability(&map, config.prob_threshold),
        tree,
        probability: map,
        patches,
        truncated,
    })
}

/// Arc-length distance to the origin of each mask pixel's nearest centerline
/// point, scaled by the tree's largest distance; pixels off the mask are 0.
pub fn hierarchy_colormap(tree: &VesselTree, mask: &BinaryMask) -> Vec<f64> {
    let (w, h) = (mask.width(), mask.height());
    let centerline = tree.centerline();
    let max = tree.max_distance();
    let mut out = vec![0.0; w * h];
    if max <= 0.0 {
        return out;
    }
    for p in mask.points() {
        let mut best = (f64::INFINITY, 0.0);
        for &(q, d) in &centerline {
            let dd = p.dist_sq(q);
            if dd < best.0 {
                best = (dd, d);
            }
        }
        out[p.y as usize * w + p.x as usize] = best.1 / max;
    }
    out
}
