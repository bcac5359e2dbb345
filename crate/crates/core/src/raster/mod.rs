//! Raster containers and the geometric substrate shared by every stage:
//! patch cropping, connected components, thinning and node-type maps.

mod png_io;
mod skeleton;

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use png_io::{
    load_image, load_label_map, load_mask, save_gray16, save_gray8, save_image, save_label_map,
    save_mask, save_rgb8,
};
pub use skeleton::{node_type_map, skeletonize, NodeType, NodeTypeMap};

/// Integer pixel coordinate, `x` rightward and `y` downward from the top-left corner.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(from = "[i32; 2]", into = "[i32; 2]")]
pub struct Point {
    pub x: i32,
    pub y: i32,
}

impl Point {
    pub const fn new(x: i32, y: i32) -> Self {
        Self { x, y }
    }

    pub fn offset(self, dx: i32, dy: i32) -> Self {
        Self::new(self.x + dx, self.y + dy)
    }

    pub fn dist(self, other: Point) -> f64 {
        self.dist_sq(other).sqrt()
    }

    pub fn dist_sq(self, other: Point) -> f64 {
        let dx = f64::from(self.x - other.x);
        let dy = f64::from(self.y - other.y);
        dx * dx + dy * dy
    }

    /// Ordering key used for deterministic tie-breaks: row first, then column.
    pub fn yx(self) -> (i32, i32) {
        (self.y, self.x)
    }
}

impl From<[i32; 2]> for Point {
    fn from([x, y]: [i32; 2]) -> Self {
        Self { x, y }
    }
}

impl From<Point> for [i32; 2] {
    fn from(p: Point) -> Self {
        [p.x, p.y]
    }
}

/// 8-neighborhood offsets, clockwise from north.
pub(crate) const NEIGHBORS_8: [(i32, i32); 8] = [
    (0, -1),
    (1, -1),
    (1, 0),
    (1, 1),
    (0, 1),
    (-1, 1),
    (-1, 0),
    (-1, -1),
];

/// Multi-channel floating-point image with samples in `[0, 1]`, row-major and interleaved.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![0.0; width * height * channels],
        }
    }

    pub fn from_data(width: usize, height: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if channels == 0 || data.len() != width * height * channels {
            return Err(Error::InvalidArgument(format!(
                "image data length {} does not match {width}x{height}x{channels}",
                data.len()
            )));
        }
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidArgument(
                "image samples must lie in [0, 1]".to_string(),
            ));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn sample(&self, x: usize, y: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn set_sample(&mut self, x: usize, y: usize, c: usize, v: f32) {
        self.data[(y * self.width + x) * self.channels + c] = v.clamp(0.0, 1.0);
    }

    /// Luma conversion (Rec. 601 weights); single-channel images are copied.
    pub fn to_gray(&self) -> Image {
        if self.channels == 1 {
            return self.clone();
        }
        let data = self
            .data
            .chunks_exact(self.channels)
            .map(|px| {
                if px.len() >= 3 {
                    (0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2]).clamp(0.0, 1.0)
                } else {
                    px[0]
                }
            })
            .collect();
        Image {
            width: self.width,
            height: self.height,
            channels: 1,
            data,
        }
    }

    fn crop(&self, origin: Point, size: usize) -> Image {
        let mut out = Image::new(size, size, self.channels);
        let (ox, oy) = (origin.x as usize, origin.y as usize);
        for y in 0..size {
            let src = ((oy + y) * self.width + ox) * self.channels;
            let dst = y * size * self.channels;
            out.data[dst..dst + size * self.channels]
                .copy_from_slice(&self.data[src..src + size * self.channels]);
        }
        out
    }
}

/// Per-pixel boolean mask.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl std::fmt::Debug for BinaryMask {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "BinaryMask {}x{} ({} set)", self.width, self.height, self.count())?;
        if self.width * self.height <= 4096 {
            for y in 0..self.height {
                let row: String = (0..self.width)
                    .map(|x| if self.get(x, y) { '#' } else { '.' })
                    .collect();
                writeln!(f, "{row}")?;
            }
        }
        Ok(())
    }
}

impl BinaryMask {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            bits: vec![false; width * height],
        }
    }

    pub fn from_bits(width: usize, height: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != width * height {
            return Err(Error::InvalidArgument(format!(
                "mask length {} does not match {width}x{height}",
                bits.len()
            )));
        }
        Ok(Self {
            width,
            height,
            bits,
        })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                bits.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            bits,
        }
    }

    /// Parses an ASCII picture where `#` marks set pixels; rows are separated by whitespace.
    pub fn from_ascii(rows: &str) -> Self {
        let rows: Vec<&str> = rows.split_whitespace().collect();
        let height = rows.len();
        let width = rows.first().map_or(0, |r| r.len());
        Self::from_fn(width, height, |x, y| rows[y].as_bytes()[x] == b'#')
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    /// Bounds-checked lookup; everything outside the mask reads as unset.
    pub fn at(&self, p: Point) -> bool {
        self.contains(p) && self.bits[p.y as usize * self.width + p.x as usize]
    }

    pub fn contains(&self, p: Point) -> bool {
        p.x >= 0 && p.y >= 0 && (p.x as usize) < self.width && (p.y as usize) < self.height
    }

    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.bits[y * self.width + x] = v;
    }

    pub fn set_point(&mut self, p: Point, v: bool) {
        if self.contains(p) {
            self.bits[p.y as usize * self.width + p.x as usize] = v;
        }
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    pub fn same_extent(&self, other: &BinaryMask) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// Set pixels in row-major order.
    pub fn points(&self) -> impl Iterator<Item = Point> + '_ {
        self.bits.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| {
            Point::new((i % self.width) as i32, (i / self.width) as i32)
        })
    }

    pub fn intersection_count(&self, other: &BinaryMask) -> usize {
        self.bits
            .iter()
            .zip(&other.bits)
            .filter(|(&a, &b)| a && b)
            .count()
    }

    pub fn union(&self, other: &BinaryMask) -> BinaryMask {
        let bits = self.bits.iter().zip(&other.bits).map(|(&a, &b)| a || b).collect();
        BinaryMask {
            width: self.width,
            height: self.height,
            bits,
        }
    }

    pub fn intersection(&self, other: &BinaryMask) -> BinaryMask {
        let bits = self.bits.iter().zip(&other.bits).map(|(&a, &b)| a && b).collect();
        BinaryMask {
            width: self.width,
            height: self.height,
            bits,
        }
    }

    /// Copies the `size`x`size` window at `origin`; must lie inside the mask.
    pub fn crop(&self, origin: Point, size: usize) -> BinaryMask {
        let (ox, oy) = (origin.x as usize, origin.y as usize);
        BinaryMask::from_fn(size, size, |x, y| self.get(ox + x, oy + y))
    }

    /// Sub-rectangle copy with bounds `[x0, x1) x [y0, y1)`.
    pub(crate) fn crop_rect(&self, x0: usize, y0: usize, x1: usize, y1: usize) -> BinaryMask {
        BinaryMask::from_fn(x1 - x0, y1 - y0, |x, y| self.get(x0 + x, y0 + y))
    }

    /// Tight bounding box of the set pixels as `(x0, y0, x1, y1)`, exclusive upper bounds.
    pub fn bounding_box(&self) -> Option<(usize, usize, usize, usize)> {
        let mut bb: Option<(usize, usize, usize, usize)> = None;
        for p in self.points() {
            let (x, y) = (p.x as usize, p.y as usize);
            bb = Some(match bb {
                None => (x, y, x + 1, y + 1),
                Some((x0, y0, x1, y1)) => (x0.min(x), y0.min(y), x1.max(x + 1), y1.max(y + 1)),
            });
        }
        bb
    }

    pub(crate) fn neighbor_count(&self, p: Point) -> usize {
        NEIGHBORS_8
            .iter()
            .filter(|(dx, dy)| self.at(p.offset(*dx, *dy)))
            .count()
    }
}

/// Per-pixel instance ids, 0 = background.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InstanceLabelMap {
    width: usize,
    height: usize,
    labels: Vec<u32>,
}

impl InstanceLabelMap {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            labels: vec![0; width * height],
        }
    }

    pub fn from_labels(width: usize, height: usize, labels: Vec<u32>) -> Result<Self> {
        if labels.len() != width * height {
            return Err(Error::InvalidArgument(format!(
                "label map length {} does not match {width}x{height}",
                labels.len()
            )));
        }
        Ok(Self {
            width,
            height,
            labels,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn get(&self, x: usize, y: usize) -> u32 {
        self.labels[y * self.width + x]
    }

    pub fn at(&self, p: Point) -> u32 {
        if p.x < 0 || p.y < 0 || p.x as usize >= self.width || p.y as usize >= self.height {
            0
        } else {
            self.labels[p.y as usize * self.width + p.x as usize]
        }
    }

    pub fn set(&mut self, x: usize, y: usize, label: u32) {
        self.labels[y * self.width + x] = label;
    }

    /// Largest label id present, i.e. `C` for a contiguous map.
    pub fn num_instances(&self) -> usize {
        self.labels.iter().copied().max().unwrap_or(0) as usize
    }

    /// Mask of the pixels carrying `label`.
    pub fn mask_of(&self, label: u32) -> BinaryMask {
        BinaryMask {
            width: self.width,
            height: self.height,
            bits: self.labels.iter().map(|&l| l == label && label != 0).collect(),
        }
    }

    /// One mask per label `1..=C`.
    pub fn instance_masks(&self) -> Vec<BinaryMask> {
        (1..=self.num_instances() as u32).map(|l| self.mask_of(l)).collect()
    }

    pub fn foreground(&self) -> BinaryMask {
        BinaryMask {
            width: self.width,
            height: self.height,
            bits: self.labels.iter().map(|&l| l != 0).collect(),
        }
    }
}

/// Square window cut from a parent image.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub origin: Point,
    pub size: usize,
    pub pixels: Image,
}

impl Patch {
    pub fn center(&self) -> Point {
        self.origin.offset(self.size as i32 / 2, self.size as i32 / 2)
    }

    pub fn contains(&self, p: Point) -> bool {
        let s = self.size as i32;
        p.x >= self.origin.x && p.y >= self.origin.y && p.x < self.origin.x + s && p.y < self.origin.y + s
    }
}

/// Top-left corner of the `size`x`size` window centered at `center`, shifted
/// minimally so it lies inside a `width`x`height` image.
pub fn patch_origin(width: usize, height: usize, center: Point, size: usize) -> Result<Point> {
    if size == 0 || size > width.min(height) {
        return Err(Error::InvalidArgument(format!(
            "patch size {size} does not fit a {width}x{height} image"
        )));
    }
    let half = (size / 2) as i32;
    let clamp = |c: i32, extent: usize| (c - half).clamp(0, (extent - size) as i32);
    Ok(Point::new(clamp(center.x, width), clamp(center.y, height)))
}

/// Crops the window centered at `center`, clamped inside the image.
pub fn crop_patch(image: &Image, center: Point, size: usize) -> Result<Patch> {
    let origin = patch_origin(image.width, image.height, center, size)?;
    Ok(Patch {
        origin,
        size,
        pixels: image.crop(origin, size),
    })
}

/// 8-connected components labeled `1..=C` in row-major first-encounter order.
pub fn connected_components(mask: &BinaryMask) -> InstanceLabelMap {
    let (w, h) = (mask.width, mask.height);
    let mut labels = InstanceLabelMap::new(w, h);
    let mut next = 0u32;
    let mut queue = VecDeque::new();
    for start in 0..w * h {
        if !mask.bits[start] || labels.labels[start] != 0 {
            continue;
        }
        next += 1;
        labels.labels[start] = next;
        queue.push_back(start);
        while let Some(i) = queue.pop_front() {
            let p = Point::new((i % w) as i32, (i / w) as i32);
            for (dx, dy) in NEIGHBORS_8 {
                let q = p.offset(dx, dy);
                if mask.at(q) {
                    let j = q.y as usize * w + q.x as usize;
                    if labels.labels[j] == 0 {
                        labels.labels[j] = next;
                        queue.push_back(j);
                    }
                }
            }
        }
    }
    labels
}

/// The 8-connected component of `mask` containing `seed`, or an empty mask if `seed` is unset.
pub fn component_containing(mask: &BinaryMask, seed: Point) -> BinaryMask {
    let mut out = BinaryMask::new(mask.width, mask.height);
    if !mask.at(seed) {
        return out;
    }
    out.set_point(seed, true);
    let mut queue = VecDeque::from([seed]);
    while let Some(p) = queue.pop_front() {
        for (dx, dy) in NEIGHBORS_8 {
            let q = p.offset(dx, dy);
            if mask.at(q) && !out.at(q) {
                out.set_point(q, true);
                queue.push_back(q);
            }
        }
    }
    out
}

/// Set pixel of `mask` nearest to `p` within `radius`, ties broken by `(y, x)`.
pub fn nearest_set_pixel(mask: &BinaryMask, p: Point, radius: f64) -> Option<Point> {
    let r = radius.floor() as i32;
    let mut best: Option<(f64, Point)> = None;
    for dy in -r..=r {
        for dx in -r..=r {
            let q = p.offset(dx, dy);
            let d = p.dist_sq(q);
            if d > radius * radius || !mask.at(q) {
                continue;
            }
            let better = match best {
                None => true,
                Some((bd, bq)) => d < bd || (d == bd && q.yx() < bq.yx()),
            };
            if better {
                best = Some((d, q));
            }
        }
    }
    best.map(|(_, q)| q)
}

/// Fills background holes of at most `max_area` pixels that do not touch the mask border.
pub fn fill_small_holes(mask: &BinaryMask, max_area: usize) -> BinaryMask {
    let (w, h) = (mask.width, mask.height);
    let mut out = mask.clone();
    let mut seen = vec![false; w * h];
    let mut region = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..w * h {
        if mask.bits[start] || seen[start] {
            continue;
        }
        region.clear();
        seen[start] = true;
        queue.push_back(start);
        let mut touches_border = false;
        while let Some(i) = queue.pop_front() {
            region.push(i);
            let (x, y) = (i % w, i / w);
            if x == 0 || y == 0 || x + 1 == w || y + 1 == h {
                touches_border = true;
            }
            // background uses 4-connectivity, dual to the 8-connected foreground
            let candidates = [
                (x > 0).then(|| i - 1),
                (x + 1 < w).then(|| i + 1),
                (y > 0).then(|| i - w),
                (y + 1 < h).then(|| i + w),
            ];
            for j in candidates.into_iter().flatten() {
                if !mask.bits[j] && !seen[j] {
                    seen[j] = true;
                    queue.push_back(j);
                }
            }
        }
        if !touches_border && region.len() <= max_area {
            for &i in &region {
                out.bits[i] = true;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flood_fill_count(mask: &BinaryMask) -> usize {
        let mut seen = std::collections::HashSet::new();
        let mut count = 0;
        for p in mask.points() {
            if !seen.insert(p) {
                continue;
            }
            count += 1;
            let mut stack = vec![p];
            while let Some(q) = stack.pop() {
                for dy in -1..=1 {
                    for dx in -1..=1 {
                        let r = q.offset(dx, dy);
                        if mask.at(r) && seen.insert(r) {
                            stack.push(r);
                        }
                    }
                }
            }
        }
        count
    }

    #[test]
    fn crop_interior_center() {
        let img = Image::new(584, 565, 3);
        let patch = crop_patch(&img, Point::new(292, 282), 96).unwrap();
        assert_eq!(patch.origin, Point::new(244, 234));
        assert_eq!(patch.pixels.width(), 96);
        assert_eq!(patch.pixels.channels(), 3);
    }

    #[test]
    fn crop_clamps_to_corner() {
        let img = Image::new(584, 565, 3);
        let patch = crop_patch(&img, Point::new(5, 5), 96).unwrap();
        assert_eq!(patch.origin, Point::new(0, 0));
    }

    #[test]
    fn crop_clamp_matches_scalar_formula() {
        let img = Image::new(200, 200, 1);
        let patch = crop_patch(&img, Point::new(199, 100), 96).unwrap();
        assert_eq!(patch.origin.x, 104);
        for c in -20..230 {
            let o = patch_origin(200, 200, Point::new(c, c), 96).unwrap();
            let oracle = (c - 48).max(0).min(200 - 96);
            assert_eq!(o.x, oracle);
        }
    }

    #[test]
    fn crop_copies_pixels() {
        let mut img = Image::new(10, 10, 1);
        img.set_sample(7, 8, 0, 0.5);
        let patch = crop_patch(&img, Point::new(7, 7), 4).unwrap();
        assert_eq!(patch.origin, Point::new(5, 5));
        assert_eq!(patch.pixels.sample(2, 3, 0), 0.5);
    }

    #[test]
    fn crop_rejects_oversized_patch() {
        let img = Image::new(50, 80, 1);
        assert!(matches!(
            crop_patch(&img, Point::new(10, 10), 51),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn components_of_empty_mask() {
        let labels = connected_components(&BinaryMask::new(8, 8));
        assert_eq!(labels.num_instances(), 0);
        assert!(labels.labels().iter().all(|&l| l == 0));
    }

    #[test]
    fn components_two_squares() {
        let mask = BinaryMask::from_ascii(
            "##....
             ##....
             ....##
             ....##",
        );
        let labels = connected_components(&mask);
        assert_eq!(labels.num_instances(), 2);
        assert_eq!(labels.get(0, 0), 1);
        assert_eq!(labels.get(5, 3), 2);
    }

    #[test]
    fn diagonal_chain_is_one_component() {
        let mask = BinaryMask::from_fn(6, 6, |x, y| x == y);
        assert_eq!(connected_components(&mask).num_instances(), 1);
        assert_eq!(flood_fill_count(&mask), 1);
    }

    #[test]
    fn component_count_matches_flood_fill_on_random_masks() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let w = rng.random_range(1..24);
            let h = rng.random_range(1..24);
            let density = rng.random_range(0.1..0.6);
            let mask = BinaryMask::from_fn(w, h, |_, _| rng.random_bool(density));
            assert_eq!(connected_components(&mask).num_instances(), flood_fill_count(&mask));
        }
    }

    #[test]
    fn holes_are_filled_only_when_small() {
        let mask = BinaryMask::from_ascii(
            "#######
             #.##..#
             #.##..#
             #######",
        );
        let filled = fill_small_holes(&mask, 2);
        assert!(filled.get(1, 1) && filled.get(1, 2));
        assert!(!filled.get(4, 1));
        assert_eq!(fill_small_holes(&mask, 4).count(), 28);
    }
}
