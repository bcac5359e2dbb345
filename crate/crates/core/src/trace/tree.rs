//! Rooted vessel trees and their extraction from skeletons.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{
    component_containing, connected_components, fill_small_holes, nearest_set_pixel,
    node_type_map, skeletonize, BinaryMask, Point, NEIGHBORS_8,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeKind {
    Source,
    Bifurcation,
    Endpoint,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TreeNode {
    pub id: usize,
    pub kind: NodeKind,
    pub pos: Point,
    pub dist_to_origin: f64,
}

/// Centerline from `parent` to `child`, both node positions included.
#[derive(Debug, Clone, PartialEq)]
pub struct TreeEdge {
    pub parent: usize,
    pub child: usize,
    pub polyline: Vec<Point>,
    pub arc_length: f64,
}

pub fn polyline_length(points: &[Point]) -> f64 {
    points.windows(2).map(|w| w[0].dist(w[1])).sum()
}

/// Tree rooted at node 0, the source.
#[derive(Debug, Clone, PartialEq)]
pub struct VesselTree {
    pub tree_id: String,
    nodes: Vec<TreeNode>,
    edges: Vec<TreeEdge>,
    parent_edge: Vec<Option<usize>>,
}

impl VesselTree {
    pub fn origin_only(tree_id: impl Into<String>, pos: Point) -> Self {
        Self {
            tree_id: tree_id.into(),
            nodes: vec![TreeNode {
                id: 0,
                kind: NodeKind::Source,
                pos,
                dist_to_origin: 0.0,
            }],
            edges: Vec::new(),
            parent_edge: vec![None],
        }
    }

    /// Appends a node at the end of `polyline`, which must start at the parent.
    pub fn add_child(&mut self, parent: usize, kind: NodeKind, polyline: Vec<Point>) -> usize {
        assert_eq!(polyline.first(), Some(&self.nodes[parent].pos), "polyline must start at parent");
        let id = self.nodes.len();
        let arc_length = polyline_length(&polyline);
        self.nodes.push(TreeNode {
            id,
            kind,
            pos: *polyline.last().expect("nonempty polyline"),
            dist_to_origin: self.nodes[parent].dist_to_origin + arc_length,
        });
        self.parent_edge.push(Some(self.edges.len()));
        self.edges.push(TreeEdge {
            parent,
            child: id,
            polyline,
            arc_length,
        });
        id
    }

    /// Reassembles a tree from serialized parts, checking every invariant.
    pub fn from_parts(tree_id: String, nodes: Vec<TreeNode>, edges: Vec<TreeEdge>) -> Result<Self> {
        let mut parent_edge = vec![None; nodes.len()];
        for (k, e) in edges.iter().enumerate() {
            if e.child >= nodes.len() || e.parent >= nodes.len() {
                return Err(Error::InvalidArgument(format!(
                    "edge {}->{} references a missing node",
                    e.parent, e.child
                )));
            }
            if parent_edge[e.child].replace(k).is_some() {
                return Err(Error::InvalidArgument(format!(
                    "node {} has more than one parent",
                    e.child
                )));
            }
        }
        let tree = Self {
            tree_id,
            nodes,
            edges,
            parent_edge,
        };
        tree.validate()?;
        Ok(tree)
    }

    pub fn nodes(&self) -> &[TreeNode] {
        &self.nodes
    }

    pub fn edges(&self) -> &[TreeEdge] {
        &self.edges
    }

    pub fn node(&self, id: usize) -> &TreeNode {
        &self.nodes[id]
    }

    pub fn origin(&self) -> &TreeNode {
        &self.nodes[0]
    }

    pub fn parent_edge(&self, id: usize) -> Option<&TreeEdge> {
        self.parent_edge[id].map(|k| &self.edges[k])
    }

    pub fn children(&self, id: usize) -> impl Iterator<Item = usize> + '_ {
        self.edges.iter().filter(move |e| e.parent == id).map(|e| e.child)
    }

    pub fn endpoints(&self) -> impl Iterator<Item = &TreeNode> {
        self.nodes.iter().filter(|n| n.kind == NodeKind::Endpoint)
    }

    pub fn bifurcation_count(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| n.kind == NodeKind::Bifurcation)
            .count()
    }

    pub fn max_distance(&self) -> f64 {
        self.nodes.iter().map(|n| n.dist_to_origin).fold(0.0, f64::max)
    }

    /// Checks single root, connectivity, acyclicity, endpoint degree and edge geometry.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(format!("tree {}: {msg}", self.tree_id)));
        if self.nodes.is_empty() {
            return bad("no nodes".to_string());
        }
        if self.edges.len() + 1 != self.nodes.len() {
            return bad(format!("{} nodes but {} edges", self.nodes.len(), self.edges.len()));
        }
        for (i, n) in self.nodes.iter().enumerate() {
            if n.id != i {
                return bad(format!("node at index {i} has id {}", n.id));
            }
            if (i == 0) != (n.kind == NodeKind::Source) {
                return bad(format!("node {i} has kind {:?}", n.kind));
            }
            if i > 0 && self.parent_edge[i].is_none() {
                return bad(format!("node {i} has no parent"));
            }
        }
        if self.parent_edge[0].is_some() {
            return bad("origin has a parent".to_string());
        }
        let mut child_count = vec![0usize; self.nodes.len()];
        for e in &self.edges {
            child_count[e.parent] += 1;
            if !(e.arc_length > 0.0) {
                return bad(format!("edge {}->{} has zero length", e.parent, e.child));
            }
            if e.polyline.first() != Some(&self.nodes[e.parent].pos)
                || e.polyline.last() != Some(&self.nodes[e.child].pos)
            {
                return bad(format!("edge {}->{} polyline misses its nodes", e.parent, e.child));
            }
            let expected = self.nodes[e.parent].dist_to_origin + e.arc_length;
            if (self.nodes[e.child].dist_to_origin - expected).abs() > 1e-6 * expected.max(1.0) {
                return bad(format!("node {} distance is inconsistent", e.child));
            }
        }
        // every node must reach the origin within n steps
        for start in 0..self.nodes.len() {
            let mut cur = start;
            let mut steps = 0;
            while let Some(e) = self.parent_edge(cur) {
                cur = e.parent;
                steps += 1;
                if steps > self.nodes.len() {
                    return bad(format!("cycle through node {start}"));
                }
            }
            if cur != 0 {
                return bad(format!("node {start} is not connected to the origin"));
            }
        }
        for n in &self.nodes {
            if n.kind == NodeKind::Endpoint && child_count[n.id] != 0 {
                return bad(format!("endpoint {} has children", n.id));
            }
            if n.kind == NodeKind::Bifurcation && child_count[n.id] < 2 {
                return bad(format!("bifurcation {} has fewer than two children", n.id));
            }
        }
        Ok(())
    }

    /// Centerline pixels paired with their arc-length distance to the origin.
    pub fn centerline(&self) -> Vec<(Point, f64)> {
        let mut out = vec![(self.origin().pos, 0.0)];
        for e in &self.edges {
            let mut d = self.nodes[e.parent].dist_to_origin;
            for w in e.polyline.windows(2) {
                d += w[0].dist(w[1]);
                out.push((w[1], d));
            }
        }
        out
    }
}

/// Cleanup thresholds applied when turning a skeleton into a tree.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TreeParams {
    /// Terminal branches shorter than this are treated as thinning artifacts.
    pub min_spur_length: f64,
    /// Bifurcations joined by an edge shorter than this collapse into one.
    pub junction_merge_length: f64,
    /// Endpoints this close to unobserved pixels or the image border count as open frontier.
    pub frontier_radius: f64,
    /// Background holes up to this area are filled before thinning.
    pub hole_area: usize,
    /// A stored origin snaps to a skeleton endpoint within this distance.
    pub origin_snap: f64,
    /// Seeds and starts snap to foreground within this distance.
    pub seed_snap: f64,
}

impl Default for TreeParams {
    fn default() -> Self {
        Self {
            min_spur_length: 10.0,
            junction_merge_length: 5.0,
            frontier_radius: 6.0,
            hole_area: 10,
            origin_snap: 10.0,
            seed_snap: 3.0,
        }
    }
}

struct RawNode {
    pos: Point,
    parent: Option<usize>,
    /// From the parent position to `pos`.
    polyline: Vec<Point>,
    children: Vec<usize>,
    alive: bool,
}

struct RawTree {
    nodes: Vec<RawNode>,
}

impl RawTree {
    fn add(&mut self, parent: Option<usize>, pos: Point, mut polyline: Vec<Point>) -> usize {
        polyline.dedup();
        let id = self.nodes.len();
        self.nodes.push(RawNode {
            pos,
            parent,
            polyline,
            children: Vec::new(),
            alive: true,
        });
        if let Some(p) = parent {
            self.nodes[p].children.push(id);
        }
        id
    }

    fn detach(&mut self, id: usize) {
        let parent = self.nodes[id].parent.expect("non-root");
        self.nodes[parent].children.retain(|&c| c != id);
        self.nodes[id].alive = false;
    }

    /// Reattaches `child` (a child of `mid`) directly to `mid`'s parent.
    fn bypass(&mut self, mid: usize, child: usize) {
        let parent = self.nodes[mid].parent.expect("non-root");
        let mut polyline = self.nodes[mid].polyline.clone();
        polyline.extend_from_slice(&self.nodes[child].polyline[1..]);
        polyline.dedup();
        self.nodes[child].polyline = polyline;
        self.nodes[child].parent = Some(parent);
        self.nodes[parent].children.push(child);
        self.nodes[mid].children.retain(|&c| c != child);
    }

    fn edge_length(&self, id: usize) -> f64 {
        polyline_length(&self.nodes[id].polyline)
    }

    fn prune(&mut self, frontier: &dyn Fn(Point) -> bool, params: &TreeParams) {
        loop {
            let mut changed = false;

            // shortest removable spur first, one at a time
            let spur = (1..self.nodes.len())
                .filter(|&i| {
                    let n = &self.nodes[i];
                    n.alive
                        && n.children.is_empty()
                        && self.nodes[n.parent.expect("non-root")].children.len() >= 2
                        && self.edge_length(i) < params.min_spur_length
                        && !frontier(n.pos)
                })
                .min_by(|&a, &b| self.edge_length(a).total_cmp(&self.edge_length(b)));
            if let Some(i) = spur {
                self.detach(i);
                changed = true;
            }

            for i in 1..self.nodes.len() {
                if self.nodes[i].alive && self.nodes[i].children.len() == 1 {
                    let child = self.nodes[i].children[0];
                    self.bypass(i, child);
                    self.detach(i);
                    changed = true;
                }
            }

            for i in 1..self.nodes.len() {
                let n = &self.nodes[i];
                if !n.alive || n.children.len() < 2 {
                    continue;
                }
                let parent = n.parent.expect("non-root");
                if parent != 0
                    && self.nodes[parent].children.len() >= 2
                    && self.edge_length(i) < params.junction_merge_length
                {
                    for child in self.nodes[i].children.clone() {
                        self.bypass(i, child);
                    }
                    self.detach(i);
                    changed = true;
                }
            }

            if !changed {
                break;
            }
        }
    }

    fn into_tree(self, tree_id: &str) -> VesselTree {
        let mut tree = VesselTree::origin_only(tree_id, self.nodes[0].pos);
        let mut stack = vec![(0usize, 0usize)];
        while let Some((raw, id)) = stack.pop() {
            for &c in self.nodes[raw].children.iter().rev() {
                let kind = if self.nodes[c].children.is_empty() {
                    NodeKind::Endpoint
                } else {
                    NodeKind::Bifurcation
                };
                let child = tree.add_child(id, kind, self.nodes[c].polyline.clone());
                stack.push((c, child));
            }
        }
        tree
    }
}

/// Walks `skeleton` from `origin`, recording junctions and terminals as nodes.
///
/// Adjacent junction pixels form one bifurcation. Branches that loop back to
/// an already visited junction are cut. Short terminal spurs away from the
/// frontier are pruned, pass-through nodes spliced out, and bifurcations
/// joined by very short edges merged.
pub fn build_tree(
    tree_id: &str,
    skeleton: &BinaryMask,
    origin: Point,
    frontier: &dyn Fn(Point) -> bool,
    params: &TreeParams,
) -> VesselTree {
    if !skeleton.at(origin) {
        return VesselTree::origin_only(tree_id, origin);
    }
    let (w, h) = (skeleton.width(), skeleton.height());
    let types = node_type_map(skeleton);
    let junction_mask = BinaryMask::from_fn(w, h, |x, y| types.get(x, y) >= 4);
    let clusters = connected_components(&junction_mask);
    let cluster_count = clusters.num_instances();
    let mut members: Vec<Vec<Point>> = vec![Vec::new(); cluster_count + 1];
    for p in junction_mask.points() {
        members[clusters.at(p) as usize].push(p);
    }
    let representative: Vec<Point> = members
        .iter()
        .map(|m| {
            if m.is_empty() {
                return Point::new(0, 0);
            }
            let n = m.len() as f64;
            let cx = m.iter().map(|p| f64::from(p.x)).sum::<f64>() / n;
            let cy = m.iter().map(|p| f64::from(p.y)).sum::<f64>() / n;
            let d = |p: &Point| (f64::from(p.x) - cx).powi(2) + (f64::from(p.y) - cy).powi(2);
            *m.iter()
                .min_by(|a, b| d(a).total_cmp(&d(b)).then(a.yx().cmp(&b.yx())))
                .expect("nonempty cluster")
        })
        .collect();

    let idx = |p: Point| p.y as usize * w + p.x as usize;
    let mut visited = vec![false; w * h];
    let mut raw = RawTree { nodes: Vec::new() };

    let root_cluster = clusters.at(origin) as usize;
    let root_pixels = if root_cluster > 0 {
        members[root_cluster].clone()
    } else {
        vec![origin]
    };
    for &p in &root_pixels {
        visited[idx(p)] = true;
    }
    let root = raw.add(None, origin, vec![origin]);

    let mut work = vec![(root, root_pixels)];
    while let Some((node, from)) = work.pop() {
        let node_pos = raw.nodes[node].pos;
        for &q in &from {
            for (dx, dy) in NEIGHBORS_8 {
                let start = q.offset(dx, dy);
                if !skeleton.at(start) || visited[idx(start)] {
                    continue;
                }
                visited[idx(start)] = true;
                let mut path = vec![node_pos, start];
                let mut cur = start;
                loop {
                    let k = clusters.at(cur) as usize;
                    if k > 0 {
                        for &p in &members[k] {
                            visited[idx(p)] = true;
                        }
                        path.push(representative[k]);
                        let child = raw.add(Some(node), representative[k], path);
                        work.push((child, members[k].clone()));
                        break;
                    }
                    let next = step_candidates(skeleton, cur)
                        .filter(|&p| !visited[idx(p)])
                        .max_by_key(|&p| (clusters.at(p) > 0, 4 - ((p.x - cur.x).abs() + (p.y - cur.y).abs())));
                    match next {
                        Some(p) => {
                            visited[idx(p)] = true;
                            path.push(p);
                            cur = p;
                        }
                        None => {
                            raw.add(Some(node), cur, path);
                            break;
                        }
                    }
                }
            }
        }
    }

    raw.prune(frontier, params);
    raw.into_tree(tree_id)
}

/// Skeleton neighbors of `p` in clockwise order from north.
fn step_candidates(skeleton: &BinaryMask, p: Point) -> impl Iterator<Item = Point> + '_ {
    NEIGHBORS_8
        .iter()
        .map(move |&(dx, dy)| p.offset(dx, dy))
        .filter(move |&q| skeleton.at(q))
}

/// Pixels within `radius` of any pixel outside `covered` or outside the image.
pub fn frontier_mask(covered: &BinaryMask, radius: f64) -> BinaryMask {
    let (w, h) = (covered.width(), covered.height());
    let r = radius.floor() as i32;
    let offsets: Vec<(i32, i32)> = (-r..=r)
        .flat_map(|dy| (-r..=r).map(move |dx| (dx, dy)))
        .filter(|&(dx, dy)| f64::from(dx * dx + dy * dy) <= radius * radius)
        .collect();
    let mut out = BinaryMask::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let p = Point::new(x as i32, y as i32);
            if offsets.iter().any(|&(dx, dy)| !covered.at(p.offset(dx, dy))) {
                out.set(x, y, true);
            }
        }
    }
    out
}

/// Thinned component of `mask` around `near`, cropped to its bounding box.
/// Returns the crop offset and the skeleton.
fn local_skeleton(
    mask: &BinaryMask,
    near: Point,
    params: &TreeParams,
    snap: f64,
) -> Option<(Point, BinaryMask)> {
    let seed = nearest_set_pixel(mask, near, snap)?;
    let component = component_containing(mask, seed);
    let (x0, y0, x1, y1) = component.bounding_box()?;
    let pad = 2;
    let (cx0, cy0) = (x0.saturating_sub(pad), y0.saturating_sub(pad));
    let (cx1, cy1) = ((x1 + pad).min(mask.width()), (y1 + pad).min(mask.height()));
    let local = component.crop_rect(cx0, cy0, cx1, cy1);
    let filled = fill_small_holes(&local, params.hole_area);
    Some((Point::new(cx0 as i32, cy0 as i32), skeletonize(&filled)))
}

fn translate(tree: VesselTree, offset: Point) -> VesselTree {
    let shift = |p: Point| p.offset(offset.x, offset.y);
    let nodes = tree
        .nodes
        .into_iter()
        .map(|n| TreeNode { pos: shift(n.pos), ..n })
        .collect();
    let edges = tree
        .edges
        .into_iter()
        .map(|e| TreeEdge {
            polyline: e.polyline.into_iter().map(shift).collect(),
            ..e
        })
        .collect();
    VesselTree {
        tree_id: tree.tree_id,
        nodes,
        edges,
        parent_edge: tree.parent_edge,
    }
}

fn skeleton_endpoints(skeleton: &BinaryMask) -> Vec<Point> {
    let types = node_type_map(skeleton);
    skeleton.points().filter(|&p| types.at(p) == 2).collect()
}

/// Starts a tree from the instance selected at the trace seed.
///
/// The source is the skeleton endpoint lying farthest against `direction`
/// from `start`. Fails with [`Error::DegeneratePatch`] when no skeleton
/// endpoint touches the observed region's boundary.
pub fn init_tree(
    tree_id: &str,
    instance_mask: &BinaryMask,
    covered: &BinaryMask,
    start: Point,
    direction: (f64, f64),
    params: &TreeParams,
) -> Result<VesselTree> {
    let frontier = frontier_mask(covered, params.frontier_radius);
    let tree = init_tree_unchecked(tree_id, instance_mask, &frontier, start, direction, params)
        .ok_or(Error::DegeneratePatch)?;
    let open = tree.endpoints().chain(std::iter::once(tree.origin())).any(|n| frontier.at(n.pos));
    if !open {
        return Err(Error::DegeneratePatch);
    }
    Ok(tree)
}

pub(crate) fn init_tree_unchecked(
    tree_id: &str,
    instance_mask: &BinaryMask,
    frontier: &BinaryMask,
    start: Point,
    direction: (f64, f64),
    params: &TreeParams,
) -> Option<VesselTree> {
    let (offset, skeleton) = local_skeleton(instance_mask, start, params, params.seed_snap)?;
    let local_start = start.offset(-offset.x, -offset.y);
    let dot = |p: Point| {
        f64::from(p.x - local_start.x) * direction.0 + f64::from(p.y - local_start.y) * direction.1
    };
    let source = skeleton_endpoints(&skeleton)
        .into_iter()
        .min_by(|&a, &b| dot(a).total_cmp(&dot(b)).then(a.yx().cmp(&b.yx())))
        .or_else(|| skeleton.points().next())?;
    let is_frontier = |p: Point| frontier.at(p.offset(offset.x, offset.y));
    Some(translate(
        build_tree(tree_id, &skeleton, source, &is_frontier, params),
        offset,
    ))
}

/// Rebuilds `tree` from the current traced mask.
///
/// The stored origin snaps to the nearest skeleton endpoint (else the nearest
/// skeleton pixel). Fails with [`Error::Disconnected`] when the component
/// holding the origin does not also hold `anchor`, the start of the patch
/// that produced the new votes.
pub fn update_tree(
    tree: &VesselTree,
    mask: &BinaryMask,
    covered: &BinaryMask,
    anchor: Point,
    params: &TreeParams,
) -> Result<VesselTree> {
    let origin = tree.origin().pos;
    let seed = nearest_set_pixel(mask, origin, params.origin_snap).ok_or(Error::Disconnected)?;
    let component = component_containing(mask, seed);
    if nearest_set_pixel(&component, anchor, params.seed_snap).is_none() {
        return Err(Error::Disconnected);
    }
    let (offset, skeleton) =
        local_skeleton(&component, seed, params, 0.0).ok_or(Error::Disconnected)?;
    let local_origin = origin.offset(-offset.x, -offset.y);
    let root = skeleton_endpoints(&skeleton)
        .into_iter()
        .filter(|p| p.dist(local_origin) <= params.origin_snap)
        .min_by(|a, b| {
            a.dist_sq(local_origin)
                .total_cmp(&b.dist_sq(local_origin))
                .then(a.yx().cmp(&b.yx()))
        })
        .or_else(|| {
            skeleton.points().min_by(|a, b| {
                a.dist_sq(local_origin)
                    .total_cmp(&b.dist_sq(local_origin))
                    .then(a.yx().cmp(&b.yx()))
            })
        })
        .ok_or(Error::Disconnected)?;
    let frontier = frontier_mask(covered, params.frontier_radius);
    let is_frontier = |p: Point| frontier.at(p.offset(offset.x, offset.y));
    Ok(translate(
        build_tree(&tree.tree_id, &skeleton, root, &is_frontier, params),
        offset,
    ))
}

/// Endpoint nearest `last_start` that lies farther than `dedup_radius` from every used start.
pub fn next_start_point(tree: &VesselTree, used_starts: &[Point], last_start: Point, dedup_radius: f64) -> Option<Point> {
    tree.endpoints()
        .map(|n| n.pos)
        .filter(|p| used_starts.iter().all(|u| u.dist(*p) > dedup_radius))
        .min_by(|a, b| {
            a.dist_sq(last_start)
                .total_cmp(&b.dist_sq(last_start))
                .then(a.yx().cmp(&b.yx()))
        })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn draw_line(mask: &mut BinaryMask, a: (f64, f64), b: (f64, f64), width: f64) {
        for y in 0..mask.height() {
            for x in 0..mask.width() {
                let (px, py) = (x as f64, y as f64);
                let (dx, dy) = (b.0 - a.0, b.1 - a.1);
                let t = (((px - a.0) * dx + (py - a.1) * dy) / (dx * dx + dy * dy)).clamp(0.0, 1.0);
                let d = (px - a.0 - t * dx).hypot(py - a.1 - t * dy);
                if d <= width / 2.0 {
                    mask.set(x, y, true);
                }
            }
        }
    }

    fn full(w: usize, h: usize) -> BinaryMask {
        BinaryMask::from_fn(w, h, |_, _| true)
    }

    #[test]
    fn vertical_vessel_source_is_topmost() {
        let mut mask = BinaryMask::new(96, 96);
        draw_line(&mut mask, (48.0, 0.0), (48.0, 95.0), 5.0);
        let tree = init_tree("t", &mask, &full(96, 96), Point::new(48, 10), (0.0, 1.0), &TreeParams::default()).unwrap();
        tree.validate().unwrap();
        assert_eq!(tree.edges().len(), 1);
        let top = tree.origin().pos;
        let bottom = tree.endpoints().next().unwrap().pos;
        assert!(top.y < 5 && bottom.y > 90, "{top:?} {bottom:?}");
    }

    #[test]
    fn y_shape_census() {
        let mut mask = BinaryMask::new(96, 96);
        draw_line(&mut mask, (48.0, 0.0), (48.0, 45.0), 5.0);
        draw_line(&mut mask, (48.0, 45.0), (15.0, 95.0), 4.0);
        draw_line(&mut mask, (48.0, 45.0), (85.0, 95.0), 4.0);
        let tree = init_tree("t", &mask, &full(96, 96), Point::new(48, 5), (0.0, 1.0), &TreeParams::default()).unwrap();
        tree.validate().unwrap();
        assert_eq!(tree.bifurcation_count(), 1);
        assert_eq!(tree.endpoints().count(), 2);
        let skel = skeletonize(&mask);
        let junction_pixels = node_type_map(&skel).values().iter().filter(|&&v| v >= 4).count();
        assert!(junction_pixels >= 1);
    }

    #[test]
    fn contained_blob_is_degenerate() {
        let mut mask = BinaryMask::new(96, 96);
        draw_line(&mut mask, (40.0, 48.0), (56.0, 48.0), 8.0);
        let err = init_tree("t", &mask, &full(96, 96), Point::new(48, 48), (1.0, 0.0), &TreeParams::default());
        assert!(matches!(err, Err(Error::DegeneratePatch)));
    }

    #[test]
    fn extension_moves_endpoint() {
        let covered = full(200, 60);
        let mut short = BinaryMask::new(200, 60);
        draw_line(&mut short, (10.0, 30.0), (100.0, 30.0), 5.0);
        let params = TreeParams::default();
        let tree = init_tree_unchecked("t", &short, &frontier_mask(&covered, 6.0), Point::new(10, 30), (1.0, 0.0), &params).unwrap();
        let mut long = short.clone();
        draw_line(&mut long, (100.0, 30.0), (140.0, 30.0), 5.0);
        let grown = update_tree(&tree, &long, &covered, Point::new(100, 30), &params).unwrap();
        grown.validate().unwrap();
        let before = tree.endpoints().next().unwrap();
        let after = grown.endpoints().next().unwrap();
        assert_eq!(grown.bifurcation_count(), 0);
        assert!((after.dist_to_origin - before.dist_to_origin - 40.0).abs() <= 1.5);
        assert_eq!(grown.origin().pos, tree.origin().pos);
    }

    #[test]
    fn revealed_fork_adds_one_bifurcation() {
        let covered = full(160, 160);
        let params = TreeParams::default();
        let mut trunk = BinaryMask::new(160, 160);
        draw_line(&mut trunk, (80.0, 5.0), (80.0, 70.0), 5.0);
        let tree = init_tree_unchecked("t", &trunk, &frontier_mask(&covered, 6.0), Point::new(80, 5), (0.0, 1.0), &params).unwrap();
        let mut forked = trunk.clone();
        draw_line(&mut forked, (80.0, 70.0), (50.0, 130.0), 4.0);
        draw_line(&mut forked, (80.0, 70.0), (115.0, 125.0), 4.0);
        let grown = update_tree(&tree, &forked, &covered, Point::new(80, 70), &params).unwrap();
        grown.validate().unwrap();
        assert_eq!(grown.bifurcation_count(), tree.bifurcation_count() + 1);
        assert_eq!(grown.endpoints().count(), 2);
    }

    #[test]
    fn contained_update_leaves_tree_unchanged() {
        let covered = full(120, 120);
        let params = TreeParams::default();
        let mut mask = BinaryMask::new(120, 120);
        draw_line(&mut mask, (10.0, 60.0), (110.0, 60.0), 5.0);
        let tree = init_tree_unchecked("t", &mask, &frontier_mask(&covered, 6.0), Point::new(10, 60), (1.0, 0.0), &params).unwrap();
        let again = update_tree(&tree, &mask, &covered, Point::new(60, 60), &params).unwrap();
        assert_eq!(again, tree);
    }

    #[test]
    fn disconnected_anchor_is_rejected() {
        let covered = full(120, 120);
        let params = TreeParams::default();
        let mut mask = BinaryMask::new(120, 120);
        draw_line(&mut mask, (10.0, 30.0), (110.0, 30.0), 5.0);
        let tree = init_tree_unchecked("t", &mask, &frontier_mask(&covered, 6.0), Point::new(10, 30), (1.0, 0.0), &params).unwrap();
        draw_line(&mut mask, (10.0, 90.0), (110.0, 90.0), 5.0);
        let err = update_tree(&tree, &mask, &covered, Point::new(60, 90), &params);
        assert!(matches!(err, Err(Error::Disconnected)));
    }

    #[test]
    fn frontier_spurs_are_kept() {
        // short side branch cut by the unobserved region survives pruning
        let mut mask = BinaryMask::new(100, 100);
        draw_line(&mut mask, (5.0, 50.0), (95.0, 50.0), 3.0);
        draw_line(&mut mask, (50.0, 50.0), (50.0, 44.0), 3.0);
        let skel = skeletonize(&mask);
        let params = TreeParams::default();
        let closed = build_tree("t", &skel, Point::new(5, 50), &|_| false, &params);
        assert_eq!(closed.bifurcation_count(), 0);
        let open = build_tree("t", &skel, Point::new(5, 50), &|p: Point| p.y < 47, &params);
        assert_eq!(open.bifurcation_count(), 1);
    }

    #[test]
    fn next_start_examples() {
        let o = Point::new(0, 0);
        let mut tree = VesselTree::origin_only("t", o);
        let j = tree.add_child(0, NodeKind::Bifurcation, vec![o, Point::new(1, 0), Point::new(2, 0)]);
        tree.add_child(j, NodeKind::Endpoint, vec![Point::new(2, 0), Point::new(7, 0)]);
        tree.add_child(j, NodeKind::Endpoint, vec![Point::new(2, 0), Point::new(2, 50)]);
        tree.validate().unwrap();
        assert_eq!(next_start_point(&tree, &[], Point::new(2, 0), 5.0), Some(Point::new(7, 0)));
        assert_eq!(next_start_point(&tree, &[Point::new(7, 0)], Point::new(2, 0), 5.0), Some(Point::new(2, 50)));
        assert_eq!(next_start_point(&tree, &[Point::new(7, 0), Point::new(2, 50)], o, 5.0), None);

        let mut sym = VesselTree::origin_only("t", Point::new(10, 10));
        let k = sym.add_child(0, NodeKind::Bifurcation, vec![Point::new(10, 10), Point::new(10, 11)]);
        sym.add_child(k, NodeKind::Endpoint, vec![Point::new(10, 11), Point::new(13, 11)]);
        sym.add_child(k, NodeKind::Endpoint, vec![Point::new(10, 11), Point::new(7, 11)]);
        assert_eq!(next_start_point(&sym, &[], Point::new(10, 11), 0.5), Some(Point::new(7, 11)));
        let mut vert = VesselTree::origin_only("t", Point::new(10, 10));
        let k = vert.add_child(0, NodeKind::Bifurcation, vec![Point::new(10, 10), Point::new(11, 10)]);
        vert.add_child(k, NodeKind::Endpoint, vec![Point::new(11, 10), Point::new(11, 14)]);
        vert.add_child(k, NodeKind::Endpoint, vec![Point::new(11, 10), Point::new(11, 6)]);
        assert_eq!(next_start_point(&vert, &[], Point::new(11, 10), 0.5), Some(Point::new(11, 6)));
    }

    #[test]
    fn validation_catches_broken_trees() {
        let o = Point::new(0, 0);
        let mut tree = VesselTree::origin_only("t", o);
        tree.add_child(0, NodeKind::Endpoint, vec![o, Point::new(3, 0)]);
        let mut nodes = tree.nodes().to_vec();
        let edges = tree.edges().to_vec();
        assert!(VesselTree::from_parts("t".into(), nodes.clone(), edges.clone()).is_ok());
        nodes[1].kind = NodeKind::Bifurcation;
        assert!(VesselTree::from_parts("t".into(), nodes, edges.clone()).is_err());
        let mut cyclic = edges.clone();
        cyclic.push(TreeEdge { parent: 1, child: 0, polyline: vec![Point::new(3, 0), o], arc_length: 3.0 });
        assert!(VesselTree::from_parts("t".into(), tree.nodes().to_vec(), cyclic).is_err());
    }
}
