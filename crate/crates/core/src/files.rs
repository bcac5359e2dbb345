//! On-disk formats: seed lists, tree JSON, flat `key = value` configs and trace outputs.
//!
//! Coordinates are `[x, y]` pixel pairs, origin top-left, y downward.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::embedder::OracleParams;
use crate::error::{Error, Result};
use crate::loss::{FitConfig, LossParams};
use crate::raster::{save_gray16, save_gray8, save_mask, save_rgb8, BinaryMask, Point};
use crate::trace::{NodeKind, SeedVector, TraceConfig, TreeEdge, TreeNode, VesselTree};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SeedRecord {
    tree_id: String,
    p1: Point,
    p2: Point,
}

/// 1-based line and column of byte `offset`.
fn line_column(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let column = before.rfind('\n').map_or(before.len(), |i| before.len() - i - 1) + 1;
    (line, column)
}

/// Byte offsets where each element of a top-level JSON array begins.
fn array_element_starts(text: &str) -> Vec<usize> {
    let mut starts = Vec::new();
    let mut depth = 0usize;
    let mut in_string = false;
    let mut escaped = false;
    let mut expect_element = false;
    for (i, c) in text.char_indices() {
        if in_string {
            match c {
                _ if escaped => escaped = false,
                '\\' => escaped = true,
                '"' => in_string = false,
                _ => {}
            }
            continue;
        }
        if expect_element && !c.is_whitespace() && c != ']' {
            starts.push(i);
            expect_element = false;
        }
        match c {
            '"' => in_string = true,
            '[' | '{' => {
                depth += 1;
                if depth == 1 && c == '[' {
                    expect_element = true;
                }
            }
            ']' | '}' => depth = depth.saturating_sub(1),
            ',' if depth == 1 => expect_element = true,
            _ => {}
        }
    }
    starts
}

/// Letters, digits, `-`, `_` and `.`, not starting with `.`; ids name output files.
fn valid_tree_id(id: &str) -> bool {
    !id.is_empty()
        && !id.starts_with('.')
        && id.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
}

/// Parses a JSON seed list, checking ids and, when `extent` is given, that
/// every point lies inside a `width x height` image.
pub fn parse_seed_file(bytes: &[u8], extent: Option<(usize, usize)>) -> Result<Vec<SeedVector>> {
    let text = std::str::from_utf8(bytes).map_err(|e| {
        let valid = std::str::from_utf8(&bytes[..e.valid_up_to()]).expect("valid prefix");
        let (line, column) = line_column(valid, valid.len());
        Error::Parse {
            line,
            column,
            message: "seed file is not valid UTF-8".to_string(),
        }
    })?;
    let records: Vec<SeedRecord> = serde_json::from_str(text).map_err(|e| Error::Parse {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    let starts = array_element_starts(text);
    let fail = |k: usize, message: String| {
        let (line, column) = line_column(text, starts.get(k).copied().unwrap_or(0));
        Err(Error::Parse { line, column, message })
    };
    let mut seen = BTreeSet::new();
    let mut seeds = Vec::with_capacity(records.len());
    for (k, r) in records.into_iter().enumerate() {
        if !valid_tree_id(&r.tree_id) {
            return fail(k, format!("invalid tree id {:?}", r.tree_id));
        }
        if !seen.insert(r.tree_id.clone()) {
            return fail(k, format!("duplicate tree id {:?}", r.tree_id));
        }
        if r.p1 == r.p2 {
            return fail(k, format!("seed {:?} has identical points", r.tree_id));
        }
        if let Some((w, h)) = extent {
            for p in [r.p1, r.p2] {
                if p.x < 0 || p.y < 0 || p.x as usize >= w || p.y as usize >= h {
                    return fail(
                        k,
                        format!("seed {:?} point [{}, {}] lies outside the {w}x{h} image", r.tree_id, p.x, p.y),
                    );
                }
            }
        }
        seeds.push(SeedVector {
            tree_id: r.tree_id,
            p1: r.p1,
            p2: r.p2,
        });
    }
    Ok(seeds)
}

pub fn write_seed_file(seeds: &[SeedVector]) -> String {
    let records: Vec<SeedRecord> = seeds
        .iter()
        .map(|s| SeedRecord {
            tree_id: s.tree_id.clone(),
            p1: s.p1,
            p2: s.p2,
        })
        .collect();
    let mut out = serde_json::to_string_pretty(&records).expect("seeds serialize");
    out.push('\n');
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeRecord {
    pub id: usize,
    pub kind: NodeKind,
    pub pos: Point,
    pub dist_to_origin: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EdgeRecord {
    pub parent: usize,
    pub child: usize,
    pub polyline: Vec<Point>,
    pub arc_length: f64,
}

/// JSON form of a [`VesselTree`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TreeFile {
    pub tree_id: String,
    pub origin: Point,
    pub nodes: Vec<NodeRecord>,
    pub edges: Vec<EdgeRecord>,
}

impl From<&VesselTree> for TreeFile {
    fn from(tree: &VesselTree) -> Self {
        Self {
            tree_id: tree.tree_id.clone(),
            origin: tree.origin().pos,
            nodes: tree
                .nodes()
                .iter()
                .map(|n| NodeRecord {
                    id: n.id,
                    kind: n.kind,
                    pos: n.pos,
                    dist_to_origin: n.dist_to_origin,
                })
                .collect(),
            edges: tree
                .edges()
                .iter()
                .map(|e| EdgeRecord {
                    parent: e.parent,
                    child: e.child,
                    polyline: e.polyline.clone(),
                    arc_length: e.arc_length,
                })
                .collect(),
        }
    }
}

impl TreeFile {
    pub fn into_tree(self) -> Result<VesselTree> {
        for (i, n) in self.nodes.iter().enumerate() {
            if n.id != i {
                return Err(Error::InvalidArgument(format!("node at index {i} has id {}", n.id)));
            }
        }
        if self.nodes.first().map(|n| n.pos) != Some(self.origin) {
            return Err(Error::InvalidArgument(
                "origin does not match the first node".to_string(),
            ));
        }
        let nodes = self
            .nodes
            .into_iter()
            .map(|n| TreeNode {
                id: n.id,
                kind: n.kind,
                pos: n.pos,
                dist_to_origin: n.dist_to_origin,
            })
            .collect();
        let edges = self
            .edges
            .into_iter()
            .map(|e| TreeEdge {
                parent: e.parent,
                child: e.child,
                polyline: e.polyline,
                arc_length: e.arc_length,
            })
            .collect();
        VesselTree::from_parts(self.tree_id, nodes, edges)
    }

    pub fn to_json(&self) -> String {
        let mut out = serde_json::to_string_pretty(self).expect("tree serializes");
        out.push('\n');
        out
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Parse {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })
    }
}

/// Every tunable read from a config file.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub trace: TraceConfig,
    pub loss: LossParams,
    pub oracle: OracleParams,
    pub fit: FitConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.trace.validate()?;
        self.loss.validate()?;
        self.oracle.validate()
    }

    /// Writes every key with its current value, in a form [`parse_config`] reads back.
    pub fn to_text(&self) -> String {
        let t = &self.trace;
        let shifts: Vec<String> = t.shifts.iter().map(|(x, y)| format!("{x}:{y}")).collect();
        let lines = [
            ("patch_size", t.patch_size.to_string()),
            ("step", t.step.to_string()),
            ("shifts", shifts.join(",")),
            ("prob_threshold", t.prob_threshold.to_string()),
            ("start_dedup_radius", t.start_dedup_radius.to_string()),
            ("max_patches", t.max_patches.to_string()),
            ("history_frames", t.history_frames.to_string()),
            ("parallel_samples", t.parallel_samples.to_string()),
            ("min_spur_length", t.tree.min_spur_length.to_string()),
            ("junction_merge_length", t.tree.junction_merge_length.to_string()),
            ("frontier_radius", t.tree.frontier_radius.to_string()),
            ("hole_area", t.tree.hole_area.to_string()),
            ("origin_snap", t.tree.origin_snap.to_string()),
            ("seed_snap", t.tree.seed_snap.to_string()),
            ("bandwidth", t.mean_shift.bandwidth.to_string()),
            ("max_iters", t.mean_shift.max_iters.to_string()),
            ("shift_tol", t.mean_shift.shift_tol.to_string()),
            ("merge_radius", t.mean_shift.merge_radius.to_string()),
            ("seed_stride", t.mean_shift.seed_stride.to_string()),
            ("delta_v", self.loss.delta_v.to_string()),
            ("delta_d", self.loss.delta_d.to_string()),
            ("alpha", self.loss.alpha.to_string()),
            ("beta", self.loss.beta.to_string()),
            ("gamma", self.loss.gamma.to_string()),
            ("dim", self.oracle.dim.to_string()),
            ("noise_sigma", self.oracle.noise_sigma.to_string()),
            ("corruption_fraction", self.oracle.corruption_fraction.to_string()),
            ("center_spacing", self.oracle.center_spacing.to_string()),
            ("learning_rate", self.fit.learning_rate.to_string()),
            ("max_steps", self.fit.max_steps.to_string()),
            ("tolerance", self.fit.tolerance.to_string()),
            ("init_sigma", self.fit.init_sigma.to_string()),
        ];
        lines.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

fn parse_shifts(value: &str) -> std::result::Result<Vec<(i32, i32)>, String> {
    value
        .split(',')
        .map(|pair| {
            let (x, y) = pair
                .trim()
                .split_once(':')
                .ok_or_else(|| format!("shift {pair:?} is not of the form dx:dy"))?;
            let x = x.trim().parse().map_err(|_| format!("bad shift {pair:?}"))?;
            let y = y.trim().parse().map_err(|_| format!("bad shift {pair:?}"))?;
            Ok((x, y))
        })
        .collect()
}

/// Reads flat `key = value` lines over the defaults. `#` starts a comment;
/// unknown or repeated keys are errors.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let mut c = RunConfig::default();
    let mut seen = BTreeSet::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |column: usize, message: String| Error::Parse {
            line: n + 1,
            column,
            message,
        };
        let Some((key, value)) = line.split_once('=') else {
            return Err(err(1, format!("expected key = value, got {line:?}")));
        };
        let (key, value) = (key.trim(), value.trim());
        let value_column = raw.find('=').map_or(1, |i| i + 2);
        if !seen.insert(key.to_string()) {
            return Err(err(1, format!("key {key:?} given twice")));
        }
        macro_rules! set {
            ($field:expr) => {
                $field = value
                    .parse()
                    .map_err(|_| err(value_column, format!("invalid value {value:?} for {key}")))?
            };
        }
        match key {
            "patch_size" => set!(c.trace.patch_size),
            "step" => set!(c.trace.step),
            "shifts" => c.trace.shifts = parse_shifts(value).map_err(|m| err(value_column, m))?,
            "prob_threshold" => set!(c.trace.prob_threshold),
            "start_dedup_radius" => set!(c.trace.start_dedup_radius),
            "max_patches" => set!(c.trace.max_patches),
            "history_frames" => set!(c.trace.history_frames),
            "parallel_samples" => set!(c.trace.parallel_samples),
            "min_spur_length" => set!(c.trace.tree.min_spur_length),
            "junction_merge_length" => set!(c.trace.tree.junction_merge_length),
            "frontier_radius" => set!(c.trace.tree.frontier_radius),
            "hole_area" => set!(c.trace.tree.hole_area),
            "origin_snap" => set!(c.trace.tree.origin_snap),
            "seed_snap" => set!(c.trace.tree.seed_snap),
            "bandwidth" => set!(c.trace.mean_shift.bandwidth),
            "max_iters" => set!(c.trace.mean_shift.max_iters),
            "shift_tol" => set!(c.trace.mean_shift.shift_tol),
            "merge_radius" => set!(c.trace.mean_shift.merge_radius),
            "seed_stride" => set!(c.trace.mean_shift.seed_stride),
            "delta_v" => set!(c.loss.delta_v),
            "delta_d" => set!(c.loss.delta_d),
            "alpha" => set!(c.loss.alpha),
            "beta" => set!(c.loss.beta),
            "gamma" => set!(c.loss.gamma),
            "dim" => {
                set!(c.oracle.dim);
                c.fit.dim = c.oracle.dim;
            }
            "noise_sigma" => set!(c.oracle.noise_sigma),
            "corruption_fraction" => set!(c.oracle.corruption_fraction),
            "center_spacing" => set!(c.oracle.center_spacing),
            "learning_rate" => set!(c.fit.learning_rate),
            "max_steps" => set!(c.fit.max_steps),
            "tolerance" => set!(c.fit.tolerance),
            "init_sigma" => set!(c.fit.init_sigma),
            _ => return Err(err(1, format!("unknown key {key:?}"))),
        }
    }
    c.validate()?;
    Ok(c)
}

/// Everything written for one traced tree.
#[derive(Debug, Clone)]
pub struct TreeOutput {
    pub mask: BinaryMask,
    pub tree: VesselTree,
    /// Row-major probabilities in `[0, 1]`.
    pub probability: Vec<f64>,
    /// Row-major hierarchy shading in `[0, 1]`.
    pub hierarchy: Vec<f64>,
    pub patches: usize,
    pub truncated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub tree_id: String,
    pub mask: String,
    pub probability: String,
    pub tree: String,
    pub hierarchy: String,
    pub pixels: usize,
    pub nodes: usize,
    pub bifurcations: usize,
    pub patches: usize,
    pub truncated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub trees: Vec<ManifestEntry>,
    pub composite: Option<String>,
}

pub const MANIFEST_NAME: &str = "manifest.json";

/// Fixed palette for the composite, then evenly spread hues.
fn tree_color(i: usize) -> [f64; 3] {
    const BASE: [[f64; 3]; 6] = [
        [230.0, 25.0, 75.0],
        [60.0, 180.0, 75.0],
        [0.0, 130.0, 200.0],
        [255.0, 225.0, 25.0],
        [145.0, 30.0, 180.0],
        [70.0, 240.0, 240.0],
    ];
    if i < BASE.len() {
        return BASE[i];
    }
    let hue = (i as f64 * 0.618_033_988_75).fract() * 6.0;
    let x = 1.0 - (hue % 2.0 - 1.0).abs();
    let (r, g, b) = match hue as usize {
        0 => (1.0, x, 0.0),
        1 => (x, 1.0, 0.0),
        2 => (0.0, 1.0, x),
        3 => (0.0, x, 1.0),
        4 => (x, 0.0, 1.0),
        _ => (1.0, 0.0, x),
    };
    [r * 255.0, g * 255.0, b * 255.0]
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes per-tree masks, probability maps, tree JSON and hierarchy shading,
/// an `instances.png` composite when there is at least one tree, and the manifest.
pub fn write_outputs(dir: &Path, outputs: &[TreeOutput]) -> Result<Manifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(outputs.len());
    for out in outputs {
        let id = &out.tree.tree_id;
        if !valid_tree_id(id) {
            return Err(Error::InvalidArgument(format!("tree id {id:?} is not a safe file name")));
        }
        let (w, h) = (out.mask.width(), out.mask.height());
        if out.probability.len() != w * h || out.hierarchy.len() != w * h {
            return Err(Error::InvalidArgument(format!(
                "outputs for {id} do not match the {w}x{h} mask"
            )));
        }
        let entry = ManifestEntry {
            tree_id: id.clone(),
            mask: format!("{id}_mask.png"),
            probability: format!("{id}_prob.png"),
            tree: format!("{id}_tree.json"),
            hierarchy: format!("{id}_hier.png"),
            pixels: out.mask.count(),
            nodes: out.tree.nodes().len(),
            bifurcations: out.tree.bifurcation_count(),
            patches: out.patches,
            truncated: out.truncated,
        };
        save_mask(&dir.join(&entry.mask), &out.mask)?;
        save_gray16(&dir.join(&entry.probability), w, h, &out.probability)?;
        write_text(&dir.join(&entry.tree), &TreeFile::from(&out.tree).to_json())?;
        let shade = out
            .hierarchy
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        save_gray8(&dir.join(&entry.hierarchy), w, h, shade)?;
        entries.push(entry);
    }
    let composite = match outputs.first() {
        Some(first) => {
            let (w, h) = (first.mask.width(), first.mask.height());
            if outputs.iter().any(|o| !o.mask.same_extent(&first.mask)) {
                return Err(Error::InvalidArgument("tree masks differ in extent".to_string()));
            }
            let mut rgb = vec![0u8; w * h * 3];
            for y in 0..h {
                for x in 0..w {
                    let mut sum = [0.0; 3];
                    let mut n = 0.0;
                    for (i, o) in outputs.iter().enumerate() {
                        if o.mask.get(x, y) {
                            let c = tree_color(i);
                            sum = [sum[0] + c[0], sum[1] + c[1], sum[2] + c[2]];
                            n += 1.0;
                        }
                    }
                    if n > 0.0 {
                        let k = (y * w + x) * 3;
                        for ch in 0..3 {
                            rgb[k + ch] = (sum[ch] / n).round() as u8;
                        }
                    }
                }
            }
            let name = "instances.png".to_string();
            save_rgb8(&dir.join(&name), w, h, rgb)?;
            Some(name)
        }
        None => None,
    };
    let manifest = Manifest {
        trees: entries,
        composite,
    };
    let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    text.push('\n');
    write_text(&dir.join(MANIFEST_NAME), &text)?;
    Ok(manifest)
}

/// `<id>_mask.png` files in `dir`, sorted by tree id.
pub fn list_masks(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let mut found = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else {
            continue;
        };
        if let Some(id) = name.strip_suffix("_mask.png") {
            if valid_tree_id(id) {
                found.push((id.to_string(), path.clone()));
            }
        }
    }
    found.sort();
    Ok(found)
}
