//! Zhang-Suen thinning and the node-type map derived from a skeleton.

use super::{connected_components, BinaryMask, Point, NEIGHBORS_8};

/// Reduces every foreground component to a one-pixel-wide, 8-connected skeleton.
///
/// Runs Zhang-Suen to convergence, then removes remaining simple points that
/// are not line ends (staircase corners), so that only genuine junctions
/// keep three or more skeleton neighbors. Components that Zhang-Suen would
/// erase entirely (2x2 blocks) keep their most central pixel.
pub fn skeletonize(mask: &BinaryMask) -> BinaryMask {
    let mut skel = mask.clone();
    if skel.is_empty() {
        return skel;
    }
    while zhang_suen_pass(&mut skel, 0) | zhang_suen_pass(&mut skel, 1) {}
    while remove_redundant_pixels(&mut skel) {}
    restore_vanished_components(mask, &mut skel);
    skel
}

/// Neighbors in Zhang-Suen order P2..P9 (N, NE, E, SE, S, SW, W, NW).
fn ring(mask: &BinaryMask, p: Point) -> [bool; 8] {
    let mut out = [false; 8];
    for (slot, (dx, dy)) in out.iter_mut().zip(NEIGHBORS_8) {
        *slot = mask.at(p.offset(dx, dy));
    }
    out
}

fn zhang_suen_pass(mask: &mut BinaryMask, step: usize) -> bool {
    let mut doomed = Vec::new();
    for p in mask.points() {
        let n = ring(mask, p);
        let b = n.iter().filter(|&&v| v).count();
        if !(2..=6).contains(&b) {
            continue;
        }
        let a = (0..8).filter(|&i| !n[i] && n[(i + 1) % 8]).count();
        if a != 1 {
            continue;
        }
        // n[0]=P2 (N), n[2]=P4 (E), n[4]=P6 (S), n[6]=P8 (W)
        let (c1, c2) = if step == 0 {
            (n[0] && n[2] && n[4], n[2] && n[4] && n[6])
        } else {
            (n[0] && n[2] && n[6], n[0] && n[4] && n[6])
        };
        if !c1 && !c2 {
            doomed.push(p);
        }
    }
    for &p in &doomed {
        mask.set_point(p, false);
    }
    !doomed.is_empty()
}

/// Yokoi connectivity number for 8-connected foreground; 1 means `p` is a simple point.
fn connectivity_number(n: &[bool; 8]) -> usize {
    let b = |i: usize| usize::from(!n[i % 8]);
    [0, 2, 4, 6]
        .iter()
        .map(|&k| b(k) - b(k) * b(k + 1) * b(k + 2))
        .sum()
}

fn remove_redundant_pixels(mask: &mut BinaryMask) -> bool {
    let mut changed = false;
    let candidates: Vec<Point> = mask.points().collect();
    for p in candidates {
        let n = ring(mask, p);
        let b = n.iter().filter(|&&v| v).count();
        if b >= 2 && connectivity_number(&n) == 1 {
            mask.set_point(p, false);
            changed = true;
        }
    }
    changed
}

fn restore_vanished_components(original: &BinaryMask, skel: &mut BinaryMask) {
    let labels = connected_components(original);
    let count = labels.num_instances();
    let mut alive = vec![false; count + 1];
    for p in skel.points() {
        alive[labels.at(p) as usize] = true;
    }
    for label in 1..=count {
        if alive[label] {
            continue;
        }
        let members: Vec<Point> = labels.mask_of(label as u32).points().collect();
        let n = members.len() as f64;
        let cx = members.iter().map(|p| f64::from(p.x)).sum::<f64>() / n;
        let cy = members.iter().map(|p| f64::from(p.y)).sum::<f64>() / n;
        let keep = members
            .iter()
            .copied()
            .min_by(|a, b| {
                let da = (f64::from(a.x) - cx).powi(2) + (f64::from(a.y) - cy).powi(2);
                let db = (f64::from(b.x) - cx).powi(2) + (f64::from(b.y) - cy).powi(2);
                da.total_cmp(&db).then(a.yx().cmp(&b.yx()))
            })
            .expect("component has members");
        skel.set_point(keep, true);
    }
}

/// Skeleton pixel classes by node-type value.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeType {
    Off,
    Isolated,
    Endpoint,
    Connection,
    Bifurcation,
}

/// Per-pixel `(3x3 box sum of the skeleton) * skeleton`, i.e. `1 + neighbors` on the skeleton.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodeTypeMap {
    width: usize,
    height: usize,
    values: Vec<u8>,
}

impl NodeTypeMap {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn values(&self) -> &[u8] {
        &self.values
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.values[y * self.width + x]
    }

    pub fn at(&self, p: Point) -> u8 {
        if p.x < 0 || p.y < 0 || p.x as usize >= self.width || p.y as usize >= self.height {
            0
        } else {
            self.values[p.y as usize * self.width + p.x as usize]
        }
    }

    pub fn node_type(&self, p: Point) -> NodeType {
        match self.at(p) {
            0 => NodeType::Off,
            1 => NodeType::Isolated,
            2 => NodeType::Endpoint,
            3 => NodeType::Connection,
            _ => NodeType::Bifurcation,
        }
    }
}

pub fn node_type_map(skeleton: &BinaryMask) -> NodeTypeMap {
    let (w, h) = (skeleton.width(), skeleton.height());
    let mut values = vec![0u8; w * h];
    for p in skeleton.points() {
        values[p.y as usize * w + p.x as usize] = 1 + skeleton.neighbor_count(p) as u8;
    }
    NodeTypeMap {
        width: w,
        height: h,
        values,
    }
}
