//! Producers of embedding fields for the base frame of a temporal sequence.
//!
//! [`OracleEmbedder`] synthesizes fields from ground-truth tree masks;
//! [`ExternalEmbedder`] forwards the sequence to a separate process over a
//! small binary protocol.

use std::io::{Read, Write};
use std::process::{Command, Stdio};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::loss::EmbeddingField;
use crate::raster::{BinaryMask, InstanceLabelMap, Point};
use crate::temporal::TemporalSequence;

/// Anything that maps a temporal sequence to per-pixel embeddings of its base frame.
///
/// Implementations are shared across concurrent sampling workers.
pub trait Embedder: Sync {
    fn dim(&self) -> usize;

    /// `semantic_mask` covers the base frame.
    fn embed(&self, sequence: &TemporalSequence, semantic_mask: &BinaryMask) -> Result<EmbeddingField>;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleParams {
    pub noise_sigma: f64,
    /// Portion of foreground pixels moved onto another instance's center.
    pub corruption_fraction: f64,
    pub center_spacing: f64,
    pub dim: usize,
}

impl Default for OracleParams {
    fn default() -> Self {
        Self {
            noise_sigma: 0.0,
            corruption_fraction: 0.0,
            center_spacing: 7.0,
            dim: 12,
        }
    }
}

impl OracleParams {
    pub fn validate(&self) -> Result<()> {
        if self.dim < 2 {
            return Err(Error::Config(format!("embedding dimension must be at least 2, got {}", self.dim)));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::Config("noise sigma must be non-negative".to_string()));
        }
        if !(0.0..1.0).contains(&self.corruption_fraction) {
            return Err(Error::Config(format!(
                "corruption fraction must lie in [0, 1), got {}",
                self.corruption_fraction
            )));
        }
        if !(self.center_spacing > 0.0) {
            return Err(Error::Config("center spacing must be positive".to_string()));
        }
        Ok(())
    }
}

/// Embeds `truth` directly: instance `c` sits at `spacing * e_c` plus Gaussian noise.
///
/// A fixed share of the foreground is then moved onto uniformly chosen wrong
/// centers. With a single instance the wrong center is the next, unused axis.
pub fn oracle_embed(truth: &InstanceLabelMap, params: &OracleParams, seed: u64) -> Result<EmbeddingField> {
    params.validate()?;
    let (w, h, dim) = (truth.width(), truth.height(), params.dim);
    let c = truth.num_instances();
    if c > dim {
        return Err(Error::Config(format!(
            "{c} instances do not fit {dim} embedding axes"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = vec![0.0; w * h * dim];
    if params.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, params.noise_sigma).expect("validated sigma");
        for v in &mut data {
            *v = normal.sample(&mut rng);
        }
    }
    let labels = truth.labels();
    let mut center_of: Vec<u32> = labels.to_vec();

    let foreground: Vec<usize> = (0..w * h).filter(|&i| labels[i] != 0).collect();
    let corrupt = (params.corruption_fraction * foreground.len() as f64).round() as usize;
    if corrupt > 0 {
        for k in sample(&mut rng, foreground.len(), corrupt) {
            let i = foreground[k];
            let own = labels[i];
            center_of[i] = if c == 1 {
                2
            } else {
                // uniform over the other c - 1 instances
                let r = rng.random_range(1..c as u32);
                if r >= own { r + 1 } else { r }
            };
        }
    }
    for i in 0..w * h {
        let l = center_of[i];
        if l != 0 {
            data[i * dim + (l as usize - 1)] += params.center_spacing;
        }
    }
    EmbeddingField::from_data(w, h, dim, data)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Order-sensitive hash of a base seed and a list of integers.
pub fn mix_seed(base: u64, values: &[i64]) -> u64 {
    values
        .iter()
        .fold(splitmix64(base), |acc, &v| splitmix64(acc ^ v as u64))
}

/// Oracle over full-image ground-truth tree masks.
///
/// Each window receives one instance per tree present. Pixels shared by
/// several trees go to the tree holding the sequence anchor; when the anchor
/// lies in several trees, the one covering most history centers wins, then
/// the lowest index.
#[derive(Debug, Clone)]
pub struct OracleEmbedder {
    trees: Vec<BinaryMask>,
    params: OracleParams,
    seed: u64,
}

impl OracleEmbedder {
    pub fn new(trees: Vec<BinaryMask>, params: OracleParams, seed: u64) -> Result<Self> {
        params.validate()?;
        if let Some(first) = trees.first() {
            if trees.iter().any(|t| !t.same_extent(first)) {
                return Err(Error::InvalidArgument("tree masks differ in extent".to_string()));
            }
        }
        Ok(Self { trees, params, seed })
    }

    pub fn params(&self) -> &OracleParams {
        &self.params
    }

    fn focus_tree(&self, sequence: &TemporalSequence) -> Option<usize> {
        let holding: Vec<usize> = (0..self.trees.len())
            .filter(|&t| self.trees[t].at(sequence.anchor))
            .collect();
        let history = &sequence.centers[..sequence.centers.len().saturating_sub(1)];
        holding.into_iter().max_by(|&a, &b| {
            let hits = |t: usize| history.iter().filter(|&&c| self.trees[t].at(c)).count();
            hits(a).cmp(&hits(b)).then(b.cmp(&a))
        })
    }

    /// Ground-truth labels of the base window.
    pub fn window_truth(&self, sequence: &TemporalSequence) -> InstanceLabelMap {
        let base = sequence.base();
        let size = base.size;
        let mut labels = InstanceLabelMap::new(size, size);
        let focus = self.focus_tree(sequence);
        let mut label_of = vec![0u32; self.trees.len()];
        let mut next = 0;
        for y in 0..size {
            for x in 0..size {
                let p = base.origin.offset(x as i32, y as i32);
                let owner = match focus {
                    Some(f) if self.trees[f].at(p) => Some(f),
                    _ => (0..self.trees.len()).find(|&t| self.trees[t].at(p)),
                };
                if let Some(t) = owner {
                    if label_of[t] == 0 {
                        next += 1;
                        label_of[t] = next;
                    }
                    labels.set(x, y, label_of[t]);
                }
            }
        }
        labels
    }

    fn call_seed(&self, sequence: &TemporalSequence) -> u64 {
        let o = sequence.base().origin;
        let a: Point = sequence.anchor;
        mix_seed(
            self.seed,
            &[o.x.into(), o.y.into(), a.x.into(), a.y.into(), sequence.len() as i64],
        )
    }
}

impl Embedder for OracleEmbedder {
    fn dim(&self) -> usize {
        self.params.dim
    }

    fn embed(&self, sequence: &TemporalSequence, _semantic_mask: &BinaryMask) -> Result<EmbeddingField> {
        let truth = self.window_truth(sequence);
        oracle_embed(&truth, &self.params, self.call_seed(sequence))
    }
}

const REQUEST_MAGIC: &[u8; 4] = b"VTE1";
const REPLY_MAGIC: &[u8; 4] = b"VTE2";

/// Serializes a sequence and base-frame mask into a request message.
pub fn encode_request(sequence: &TemporalSequence, semantic_mask: &BinaryMask) -> Result<Vec<u8>> {
    let base = &sequence.base().pixels;
    let (h, w, c) = (base.height(), base.width(), base.channels());
    if semantic_mask.width() != w || semantic_mask.height() != h {
        return Err(Error::InvalidArgument(
            "semantic mask does not match the base frame".to_string(),
        ));
    }
    let t = sequence.len();
    let mut out = Vec::with_capacity(20 + t * h * w * c * 4 + h * w);
    out.extend_from_slice(REQUEST_MAGIC);
    for v in [t, h, w, c] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for frame in &sequence.frames {
        let px = &frame.pixels;
        if px.width() != w || px.height() != h || px.channels() != c {
            return Err(Error::InvalidArgument("frames differ in shape".to_string()));
        }
        for &v in px.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.extend(semantic_mask.bits().iter().map(|&b| u8::from(b)));
    Ok(out)
}

/// Serializes a field as a reply message, planes of `H x W` per embedding axis.
pub fn encode_reply(field: &EmbeddingField) -> Vec<u8> {
    let (d, h, w) = (field.dim(), field.height(), field.width());
    let mut out = Vec::with_capacity(16 + d * h * w * 4);
    out.extend_from_slice(REPLY_MAGIC);
    for v in [d, h, w] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for k in 0..d {
        for i in 0..h * w {
            out.extend_from_slice(&(field.vector(i)[k] as f32).to_le_bytes());
        }
    }
    out
}

fn read_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_le_bytes(b.try_into().expect("four bytes")))
        .ok_or_else(|| Error::Protocol(format!("reply truncated at byte {at}")))
}

/// Parses a reply; its spatial extent must equal `width x height`.
pub fn decode_reply(bytes: &[u8], width: usize, height: usize) -> Result<EmbeddingField> {
    if bytes.len() < 4 || &bytes[..4] != REPLY_MAGIC {
        return Err(Error::Protocol("reply does not start with VTE2".to_string()));
    }
    let d = read_u32(bytes, 4)? as usize;
    let h = read_u32(bytes, 8)? as usize;
    let w = read_u32(bytes, 12)? as usize;
    if h != height || w != width {
        return Err(Error::Protocol(format!(
            "reply extent {w}x{h} does not match the base frame {width}x{height}"
        )));
    }
    if d < 2 {
        return Err(Error::Protocol(format!("reply dimension {d} is below 2")));
    }
    let expected = 16 + d * h * w * 4;
    if bytes.len() != expected {
        return Err(Error::Protocol(format!(
            "reply holds {} bytes, expected {expected}",
            bytes.len()
        )));
    }
    let mut data = vec![0.0; d * h * w];
    for (j, chunk) in bytes[16..].chunks_exact(4).enumerate() {
        let (k, i) = (j / (h * w), j % (h * w));
        let v = f32::from_le_bytes(chunk.try_into().expect("four bytes"));
        data[i * d + k] = f64::from(v);
    }
    EmbeddingField::from_data(w, h, d, data).map_err(|e| Error::Protocol(e.to_string()))
}

/// Carries one request to an embedding service and returns its raw reply.
pub trait Transport: Sync {
    fn exchange(&self, request: &[u8]) -> Result<Vec<u8>>;
}

/// Spawns a command per request, writing the request to stdin and reading the reply from stdout.
#[derive(Debug, Clone)]
pub struct ProcessTransport {
    pub program: String,
    pub args: Vec<String>,
}

impl ProcessTransport {
    /// Runs `command` through `sh -c`.
    pub fn shell(command: impl Into<String>) -> Self {
        Self {
            program: "sh".to_string(),
            args: vec!["-c".to_string(), command.into()],
        }
    }
}

impl Transport for ProcessTransport {
    fn exchange(&self, request: &[u8]) -> Result<Vec<u8>> {
        let unavailable = |e: std::io::Error| Error::EmbedderUnavailable(format!("{}: {e}", self.program));
        let mut child = Command::new(&self.program)
            .args(&self.args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(unavailable)?;
        let mut stdin = child.stdin.take().expect("piped stdin");
        let mut stdout = child.stdout.take().expect("piped stdout");
        let mut reply = Vec::new();
        let read = std::thread::scope(|s| {
            let writer = s.spawn(move || {
                // a service may legitimately stop reading early
                let _ = stdin.write_all(request);
            });
            let read = stdout.read_to_end(&mut reply);
            writer.join().expect("writer thread");
            read
        });
        read.map_err(unavailable)?;
        let status = child.wait().map_err(unavailable)?;
        if !status.success() {
            return Err(Error::EmbedderUnavailable(format!(
                "{} exited with {status}",
                self.program
            )));
        }
        Ok(reply)
    }
}

pub struct ExternalEmbedder {
    transport: Box<dyn Transport>,
    dim: usize,
}

impl ExternalEmbedder {
    pub fn new(transport: Box<dyn Transport>, dim: usize) -> Self {
        Self { transport, dim }
    }
}

impl Embedder for ExternalEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, sequence: &TemporalSequence, semantic_mask: &BinaryMask) -> Result<EmbeddingField> {
        let request = encode_request(sequence, semantic_mask)?;
        let reply = self.transport.exchange(&request)?;
        let base = sequence.base();
        let field = decode_reply(&reply, base.size, base.size)?;
        if field.dim() != self.dim {
            return Err(Error::Protocol(format!(
                "reply dimension {} does not match the configured {}",
                field.dim(),
                self.dim
            )));
        }
        Ok(field)
    }
}
