//! Random vessel-tree phantoms with exact ground truth.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{BinaryMask, Image, Point};
use crate::trace::{NodeKind, SeedVector, VesselTree};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TreeSpec {
    /// Number of bifurcation levels below the root segment.
    pub depth: usize,
    /// Total opening angle of each bifurcation, degrees.
    pub branch_angle: [f64; 2],
    pub segment_length: [f64; 2],
    /// Root width range; children taper by 0.8 per generation down to 2 px.
    pub width: [f64; 2],
    /// Darkening of vessel pixels against the background.
    pub contrast: f64,
}

impl Default for TreeSpec {
    fn default() -> Self {
        Self {
            depth: 2,
            branch_angle: [40.0, 80.0],
            segment_length: [30.0, 55.0],
            width: [4.0, 7.0],
            contrast: 0.35,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub trees: Vec<TreeSpec>,
    pub background: f64,
    pub noise_sigma: f64,
    /// Reject scenes in which no two trees cross.
    pub require_crossing: bool,
    /// Non-root segment ends keep this distance from the image border.
    pub margin: f64,
    pub max_attempts: usize,
    pub rng_seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            width: 256,
            height: 256,
            trees: vec![TreeSpec::default()],
            background: 0.65,
            noise_sigma: 0.02,
            require_crossing: false,
            margin: 12.0,
            max_attempts: 20_000,
            rng_seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(1..=4).contains(&self.trees.len()) {
            return bad(format!("scenes hold 1 to 4 trees, got {}", self.trees.len()));
        }
        if self.width < 32 || self.height < 32 {
            return bad("scene must be at least 32x32".to_string());
        }
        if self.require_crossing && self.trees.len() < 2 {
            return bad("a crossing needs at least two trees".to_string());
        }
        for t in &self.trees {
            if !(t.width[0] >= 2.0 && t.width[0] <= t.width[1]) {
                return bad(format!("vessel widths must be at least 2 px, got {:?}", t.width));
            }
            if !(t.segment_length[0] >= 20.0 && t.segment_length[0] <= t.segment_length[1]) {
                return bad(format!(
                    "segments must be at least 20 px long, got {:?}",
                    t.segment_length
                ));
            }
            if !(t.branch_angle[0] > 0.0 && t.branch_angle[0] <= t.branch_angle[1] && t.branch_angle[1] < 180.0) {
                return bad(format!("invalid branch angle range {:?}", t.branch_angle));
            }
            if !(0.0..=1.0).contains(&t.contrast) {
                return bad(format!("contrast must lie in [0, 1], got {}", t.contrast));
            }
        }
        if !(0.0..=1.0).contains(&self.background) || !(self.noise_sigma >= 0.0) {
            return bad("background must lie in [0, 1] and noise must be non-negative".to_string());
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Scene {
    pub image: Image,
    pub semantic: BinaryMask,
    pub tree_masks: Vec<BinaryMask>,
    pub trees: Vec<VesselTree>,
    pub seeds: Vec<SeedVector>,
}

type V2 = (f64, f64);

#[derive(Debug, Clone)]
struct Segment {
    a: V2,
    b: V2,
    width: f64,
    parent: Option<usize>,
    children: Vec<usize>,
}

fn sub(a: V2, b: V2) -> V2 {
    (a.0 - b.0, a.1 - b.1)
}

fn dot(a: V2, b: V2) -> f64 {
    a.0 * b.0 + a.1 * b.1
}

fn cross(a: V2, b: V2) -> f64 {
    a.0 * b.1 - a.1 * b.0
}

fn rotate(d: V2, deg: f64) -> V2 {
    let (s, c) = deg.to_radians().sin_cos();
    (d.0 * c - d.1 * s, d.0 * s + d.1 * c)
}

fn point_segment_distance(p: V2, a: V2, b: V2) -> f64 {
    let ab = sub(b, a);
    let t = (dot(sub(p, a), ab) / dot(ab, ab)).clamp(0.0, 1.0);
    let q = (a.0 + t * ab.0, a.1 + t * ab.1);
    (p.0 - q.0).hypot(p.1 - q.1)
}

/// Parameters along each segment where they properly cross, if they do.
fn intersection(s: &Segment, t: &Segment) -> Option<(f64, f64)> {
    let r = sub(s.b, s.a);
    let q = sub(t.b, t.a);
    let denom = cross(r, q);
    if denom.abs() < 1e-12 {
        return None;
    }
    let qp = sub(t.a, s.a);
    let u = cross(qp, q) / denom;
    let v = cross(qp, r) / denom;
    ((0.0..=1.0).contains(&u) && (0.0..=1.0).contains(&v)).then_some((u, v))
}

fn segment_distance(s: &Segment, t: &Segment) -> f64 {
    if intersection(s, t).is_some() {
        return 0.0;
    }
    point_segment_distance(s.a, t.a, t.b)
        .min(point_segment_distance(s.b, t.a, t.b))
        .min(point_segment_distance(t.a, s.a, s.b))
        .min(point_segment_distance(t.b, s.a, s.b))
}

fn length(s: &Segment) -> f64 {
    let d = sub(s.b, s.a);
    d.0.hypot(d.1)
}

fn uniform(rng: &mut ChaCha8Rng, range: [f64; 2]) -> f64 {
    if range[0] == range[1] {
        range[0]
    } else {
        rng.random_range(range[0]..range[1])
    }
}

/// Gap kept between unrelated branches of one tree, beyond their half-widths.
const SAME_TREE_GAP: f64 = 8.0;
/// Gap kept between different trees wherever they do not cross.
const OTHER_TREE_GAP: f64 = 5.0;
/// Crossings stay this far from either segment's ends.
const CROSSING_CLEARANCE: f64 = 14.0;
const MIN_CROSSING_ANGLE: f64 = 35.0;
const RESTART_AFTER: usize = 300;

fn grow_tree(spec: &TreeSpec, w: f64, h: f64, rng: &mut ChaCha8Rng) -> (Vec<Segment>, V2) {
    let root_width = uniform(rng, spec.width);
    let inset = root_width / 2.0 + 2.0;
    let side = rng.random_range(0..4);
    let u = rng.random_range(0.2..0.8);
    let (origin, normal) = match side {
        0 => ((u * (w - 1.0), inset), (0.0, 1.0)),
        1 => ((w - 1.0 - inset, u * (h - 1.0)), (-1.0, 0.0)),
        2 => ((u * (w - 1.0), h - 1.0 - inset), (0.0, -1.0)),
        _ => ((inset, u * (h - 1.0)), (1.0, 0.0)),
    };
    let direction = rotate(normal, rng.random_range(-25.0..25.0));
    let mut segments = Vec::new();
    let mut stack = vec![(origin, direction, root_width, 0usize, None::<usize>)];
    while let Some((a, d, width, level, parent)) = stack.pop() {
        let len = uniform(rng, spec.segment_length);
        let b = (a.0 + len * d.0, a.1 + len * d.1);
        let id = segments.len();
        segments.push(Segment {
            a,
            b,
            width,
            parent,
            children: Vec::new(),
        });
        if let Some(p) = parent {
            segments[p].children.push(id);
        }
        if level < spec.depth {
            let theta = uniform(rng, spec.branch_angle);
            let split = rng.random_range(0.35..0.65);
            let child_width = (width * 0.8).max(2.0);
            stack.push((b, rotate(d, -(1.0 - split) * theta), child_width, level + 1, Some(id)));
            stack.push((b, rotate(d, split * theta), child_width, level + 1, Some(id)));
        }
    }
    (segments, direction)
}

fn related(segments: &[Segment], i: usize, j: usize) -> bool {
    let (si, sj) = (&segments[i], &segments[j]);
    si.parent == Some(j) || sj.parent == Some(i) || (si.parent.is_some() && si.parent == sj.parent)
}

fn tree_is_valid(segments: &[Segment], w: f64, h: f64, margin: f64) -> bool {
    let inside = |p: V2| p.0 >= margin && p.1 >= margin && p.0 <= w - 1.0 - margin && p.1 <= h - 1.0 - margin;
    if !segments.iter().all(|s| inside(s.b)) {
        return false;
    }
    for i in 0..segments.len() {
        for j in i + 1..segments.len() {
            if related(segments, i, j) {
                continue;
            }
            let gap = (segments[i].width + segments[j].width) / 2.0 + SAME_TREE_GAP;
            if segment_distance(&segments[i], &segments[j]) < gap {
                return false;
            }
        }
    }
    true
}

/// Number of clean crossings between two trees, or `None` if they touch badly.
fn crossings(a: &[Segment], b: &[Segment]) -> Option<usize> {
    let mut count = 0;
    for s in a {
        for t in b {
            let gap = (s.width + t.width) / 2.0 + OTHER_TREE_GAP;
            if let Some((u, v)) = intersection(s, t) {
                let (ls, lt) = (length(s), length(t));
                let clear = |p: f64, l: f64| p * l >= CROSSING_CLEARANCE && (1.0 - p) * l >= CROSSING_CLEARANCE;
                let (ds, dt) = (sub(s.b, s.a), sub(t.b, t.a));
                let cos = (dot(ds, dt) / (ls * lt)).abs();
                if !clear(u, ls) || !clear(v, lt) || cos > MIN_CROSSING_ANGLE.to_radians().cos() {
                    return None;
                }
                count += 1;
            } else if segment_distance(s, t) < gap {
                return None;
            }
        }
    }
    Some(count)
}

fn digital_line(a: Point, b: Point) -> Vec<Point> {
    let n = (b.x - a.x).abs().max((b.y - a.y).abs());
    if n == 0 {
        return vec![a];
    }
    (0..=n)
        .map(|i| {
            let t = f64::from(i) / f64::from(n);
            Point::new(
                (f64::from(a.x) + t * f64::from(b.x - a.x)).round() as i32,
                (f64::from(a.y) + t * f64::from(b.y - a.y)).round() as i32,
            )
        })
        .collect()
}

fn round_point(p: V2) -> Point {
    Point::new(p.0.round() as i32, p.1.round() as i32)
}

fn truth_tree(tree_id: &str, segments: &[Segment]) -> VesselTree {
    let mut tree = VesselTree::origin_only(tree_id, round_point(segments[0].a));
    let mut stack = vec![(0usize, 0usize)];
    while let Some((seg, parent_node)) = stack.pop() {
        let s = &segments[seg];
        let kind = if s.children.is_empty() {
            NodeKind::Endpoint
        } else {
            NodeKind::Bifurcation
        };
        let node = tree.add_child(parent_node, kind, digital_line(round_point(s.a), round_point(s.b)));
        for &c in s.children.iter().rev() {
            stack.push((c, node));
        }
    }
    tree
}

fn rasterize(segments: &[Segment], w: usize, h: usize, mask: &mut BinaryMask, coverage: &mut [f64], contrast: f64) {
    for s in segments {
        let r = s.width / 2.0 + 1.0;
        let x0 = (s.a.0.min(s.b.0) - r).floor().max(0.0) as usize;
        let y0 = (s.a.1.min(s.b.1) - r).floor().max(0.0) as usize;
        let x1 = ((s.a.0.max(s.b.0) + r).ceil() as usize).min(w - 1);
        let y1 = ((s.a.1.max(s.b.1) + r).ceil() as usize).min(h - 1);
        for y in y0..=y1 {
            for x in x0..=x1 {
                let d = point_segment_distance((x as f64, y as f64), s.a, s.b);
                // linear edge ramp one pixel wide; half coverage at the true boundary
                let cov = (s.width / 2.0 + 0.5 - d).clamp(0.0, 1.0);
                if cov >= 0.5 {
                    mask.set(x, y, true);
                }
                let i = y * w + x;
                coverage[i] = coverage[i].max(cov * contrast);
            }
        }
    }
}

/// Grows, validates and rasterizes every tree of `spec`.
pub fn generate_scene(spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    let (w, h) = (spec.width, spec.height);
    let (wf, hf) = (w as f64, h as f64);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);
    let mut attempts = 0;
    'scene: loop {
        let mut grown: Vec<(Vec<Segment>, V2)> = Vec::new();
        let mut crossing_count = 0;
        let mut stalled = 0;
        while grown.len() < spec.trees.len() {
            if stalled >= RESTART_AFTER {
                // earlier trees may leave no room; start over
                continue 'scene;
            }
            attempts += 1;
            if attempts > spec.max_attempts {
                return Err(Error::Generation(format!(
                    "no valid scene after {} attempts",
                    spec.max_attempts
                )));
            }
            let (segments, direction) = grow_tree(&spec.trees[grown.len()], wf, hf, &mut rng);
            stalled += 1;
            if !tree_is_valid(&segments, wf, hf, spec.margin) {
                continue;
            }
            let mut added = 0;
            let mut ok = true;
            for (other, _) in &grown {
                match crossings(&segments, other) {
                    Some(c) => added += c,
                    None => {
                        ok = false;
                        break;
                    }
                }
            }
            if ok {
                crossing_count += added;
                grown.push((segments, direction));
                stalled = 0;
            }
        }
        if spec.require_crossing && crossing_count == 0 {
            continue 'scene;
        }

        let mut tree_masks = Vec::new();
        let mut trees = Vec::new();
        let mut seeds = Vec::new();
        let mut darkness = vec![0.0; w * h];
        for (i, ((segments, direction), tree_spec)) in grown.iter().zip(&spec.trees).enumerate() {
            let tree_id = format!("t{}", i + 1);
            let mut mask = BinaryMask::new(w, h);
            rasterize(segments, w, h, &mut mask, &mut darkness, tree_spec.contrast);
            let origin = segments[0].a;
            seeds.push(SeedVector {
                tree_id: tree_id.clone(),
                p1: round_point(origin),
                p2: round_point((origin.0 + 10.0 * direction.0, origin.1 + 10.0 * direction.1)),
            });
            trees.push(truth_tree(&tree_id, segments));
            tree_masks.push(mask);
        }
        let semantic = tree_masks
            .iter()
            .fold(BinaryMask::new(w, h), |acc, m| acc.union(m));
        let noise = Normal::new(0.0, spec.noise_sigma.max(f64::MIN_POSITIVE))
            .map_err(|e| Error::Config(e.to_string()))?;
        let data: Vec<f32> = darkness
            .iter()
            .map(|&d| {
                let n = if spec.noise_sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                (spec.background - d + n).clamp(0.0, 1.0) as f32
            })
            .collect();
        let image = Image::from_data(w, h, 1, data)?;
        return Ok(Scene {
            image,
            semantic,
            tree_masks,
            trees,
            seeds,
        });
    }
}
