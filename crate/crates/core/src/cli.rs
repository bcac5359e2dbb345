//! Command-line surface: `synth`, `trace`, `eval` and `fit-embeddings`.
//!
//! Exit codes: 0 success, 1 usage, 2 bad input data, 3 runtime failure.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::cluster::label_pixels;
use crate::embedder::{Embedder, ExternalEmbedder, OracleEmbedder, ProcessTransport};
use crate::error::{Error, Result};
use crate::files::{list_masks, parse_config, parse_seed_file, write_outputs, write_seed_file, RunConfig, TreeFile, TreeOutput};
use crate::loss::{fit_free_embeddings, LossBreakdown};
use crate::metrics::{evaluate_instances, DEFAULT_SMOOTH};
use crate::raster::{load_image, load_label_map, load_mask, save_image, save_label_map, save_mask, BinaryMask};
use crate::synthetic::{generate_scene, SceneSpec};
use crate::trace::{hierarchy_colormap, trace_tree, SeedVector};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "vessel-trace", version, about = "Trace retinal vessel trees from seed points")]
struct Cli {
    /// Seed for every random choice.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum EmbedderKind {
    Oracle,
    External,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic scene with ground truth.
    Synth {
        /// Scene description as JSON.
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Trace every seeded tree in an image.
    Trace {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        semantic: PathBuf,
        #[arg(long)]
        seeds: PathBuf,
        #[arg(long, value_enum)]
        embedder: EmbedderKind,
        /// Directory of `<id>_mask.png` ground-truth masks for the oracle.
        #[arg(long, required_if_eq("embedder", "oracle"))]
        truth: Option<PathBuf>,
        /// Shell command speaking the embedder wire protocol on stdin/stdout.
        #[arg(long, required_if_eq("embedder", "external"))]
        embedder_cmd: Option<String>,
        /// Flat `key = value` overrides.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Trees traced concurrently.
        #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u32).range(1..))]
        jobs: u32,
    },
    /// Score predicted tree masks against ground truth.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_SMOOTH)]
        smooth: f64,
    },
    /// Fit free embeddings to a label image and cluster them back.
    FitEmbeddings {
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

/// Exit code for a failed command.
pub fn exit_code(error: &Error) -> i32 {
    match error {
        Error::EmbedderUnavailable(_)
        | Error::Protocol(_)
        | Error::Generation(_)
        | Error::DegeneratePatch
        | Error::Disconnected => EXIT_RUNTIME,
        _ => EXIT_DATA,
    }
}

/// Parses `argv` (program name first) and runs the command.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { spec, out } => synth(&spec, &out, cli.seed),
        Command::Trace {
            image,
            semantic,
            seeds,
            embedder,
            truth,
            embedder_cmd,
            config,
            out,
            jobs,
        } => {
            let config = load_config(config.as_deref())?;
            let inputs = TraceInputs {
                image: &image,
                semantic: &semantic,
                seeds: &seeds,
                truth: truth.as_deref(),
                embedder_cmd: embedder_cmd.as_deref(),
            };
            trace(&inputs, embedder, &config, &out, jobs as usize, cli.seed)
        }
        Command::Eval {
            pred,
            truth,
            out,
            smooth,
        } => eval(&pred, &truth, &out, smooth),
        Command::FitEmbeddings { labels, out, config } => {
            let config = load_config(config.as_deref())?;
            fit(&labels, &out, &config, cli.seed)
        }
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("value serializes");
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => parse_config(&read_text(p)?),
        None => Ok(RunConfig::default()),
    }
}

/// Writes `image.png`, `semantic.png`, `seeds.json` and `truth/<id>_{mask.png,tree.json}`.
fn synth(spec_path: &Path, out: &Path, seed: u64) -> Result<()> {
    let text = read_text(spec_path)?;
    let mut spec: SceneSpec = serde_json::from_str(&text).map_err(|e| Error::Parse {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    spec.rng_seed = seed;
    let scene = generate_scene(&spec)?;
    let truth = out.join("truth");
    create_dir(&truth)?;
    save_image(&out.join("image.png"), &scene.image)?;
    save_mask(&out.join("semantic.png"), &scene.semantic)?;
    let seeds_path = out.join("seeds.json");
    fs::write(&seeds_path, write_seed_file(&scene.seeds)).map_err(|e| Error::io(&seeds_path, e))?;
    for (tree, mask) in scene.trees.iter().zip(&scene.tree_masks) {
        save_mask(&truth.join(format!("{}_mask.png", tree.tree_id)), mask)?;
        let json_path = truth.join(format!("{}_tree.json", tree.tree_id));
        fs::write(&json_path, TreeFile::from(tree).to_json()).map_err(|e| Error::io(&json_path, e))?;
    }
    log::info!("wrote a {}-tree scene to {}", scene.trees.len(), out.display());
    Ok(())
}

struct TraceInputs<'a> {
    image: &'a Path,
    semantic: &'a Path,
    seeds: &'a Path,
    truth: Option<&'a Path>,
    embedder_cmd: Option<&'a str>,
}

fn trace(inputs: &TraceInputs<'_>, kind: EmbedderKind, config: &RunConfig, out: &Path, jobs: usize, seed: u64) -> Result<()> {
    let image = load_image(inputs.image)?;
    let semantic = load_mask(inputs.semantic)?;
    if semantic.width() != image.width() || semantic.height() != image.height() {
        return Err(Error::InvalidArgument(format!(
            "semantic mask is {}x{} but the image is {}x{}",
            semantic.width(),
            semantic.height(),
            image.width(),
            image.height()
        )));
    }
    let bytes = fs::read(inputs.seeds).map_err(|e| Error::io(inputs.seeds, e))?;
    let seeds = parse_seed_file(&bytes, Some((image.width(), image.height())))?;

    let embedder: Box<dyn Embedder> = match kind {
        EmbedderKind::Oracle => {
            let dir = inputs.truth.expect("clap requires --truth for the oracle");
            let mut masks = Vec::with_capacity(seeds.len());
            for s in &seeds {
                let mask = load_mask(&dir.join(format!("{}_mask.png", s.tree_id)))?;
                if !mask.same_extent(&semantic) {
                    return Err(Error::InvalidArgument(format!(
                        "truth mask for {} does not match the image",
                        s.tree_id
                    )));
                }
                masks.push(mask);
            }
            Box::new(OracleEmbedder::new(masks, config.oracle, seed)?)
        }
        EmbedderKind::External => {
            let cmd = inputs.embedder_cmd.expect("clap requires --embedder-cmd");
            Box::new(ExternalEmbedder::new(Box::new(ProcessTransport::shell(cmd)), config.oracle.dim))
        }
    };

    let trace_one = |s: &SeedVector| -> Result<TreeOutput> {
        let r = trace_tree(&image, &semantic, s, embedder.as_ref(), &config.trace)?;
        log::info!("tree {}: {} patches, {} pixels", s.tree_id, r.patches, r.mask.count());
        let hierarchy = hierarchy_colormap(&r.tree, &r.mask);
        Ok(TreeOutput {
            probability: r.probability.values(),
            hierarchy,
            mask: r.mask,
            tree: r.tree,
            patches: r.patches,
            truncated: r.truncated,
        })
    };
    let results: Vec<Result<TreeOutput>> = if jobs > 1 && seeds.len() > 1 {
        let next = std::sync::atomic::AtomicUsize::new(0);
        let mut slots: Vec<Option<Result<TreeOutput>>> = (0..seeds.len()).map(|_| None).collect();
        let done = std::sync::Mutex::new(&mut slots);
        std::thread::scope(|s| {
            for _ in 0..jobs.min(seeds.len()) {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                    if i >= seeds.len() {
                        break;
                    }
                    let r = trace_one(&seeds[i]);
                    done.lock().expect("result lock")[i] = Some(r);
                });
            }
        });
        slots.into_iter().map(|r| r.expect("every tree traced")).collect()
    } else {
        seeds.iter().map(trace_one).collect()
    };
    let outputs = results.into_iter().collect::<Result<Vec<_>>>()?;
    write_outputs(out, &outputs)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalFile {
    pub predictions: Vec<String>,
    pub truths: Vec<String>,
    pub smooth: f64,
    pub specificity: f64,
    pub sensitivity: f64,
    pub sbd: f64,
    pub dic: usize,
}

fn load_masks(dir: &Path) -> Result<(Vec<String>, Vec<BinaryMask>)> {
    let mut ids = Vec::new();
    let mut masks = Vec::new();
    for (id, path) in list_masks(dir)? {
        ids.push(id);
        masks.push(load_mask(&path)?);
    }
    Ok((ids, masks))
}

fn eval(pred: &Path, truth: &Path, out: &Path, smooth: f64) -> Result<()> {
    let (pred_ids, pred_masks) = load_masks(pred)?;
    let (truth_ids, truth_masks) = load_masks(truth)?;
    let r = evaluate_instances(&pred_masks, &truth_masks, smooth)?;
    write_json(
        out,
        &EvalFile {
            predictions: pred_ids,
            truths: truth_ids,
            smooth,
            specificity: r.specificity,
            sensitivity: r.sensitivity,
            sbd: r.sbd,
            dic: r.dic,
        },
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitFile {
    pub instances: usize,
    pub dim: usize,
    pub steps: usize,
    pub converged: bool,
    pub attraction: f64,
    pub repulsion: f64,
    pub regularization: f64,
    pub total: f64,
    /// Largest distance from a pixel to its cluster mean.
    pub max_radius: f64,
    /// Smallest distance between two cluster means; absent with one instance.
    pub min_mean_distance: Option<f64>,
    pub recovered_instances: usize,
    /// Agreement between the mean-shift labels and the input labels.
    pub sbd: f64,
}

/// Writes `fit.json` and the mean-shift labelling as `labels.png`.
fn fit(labels_path: &Path, out: &Path, config: &RunConfig, seed: u64) -> Result<()> {
    let labels = load_label_map(labels_path)?;
    let result = fit_free_embeddings(&labels, &config.loss, &config.fit, seed)?;
    let stats = crate::loss::cluster_means(&result.field, &labels)?;
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let mut max_radius: f64 = 0.0;
    for (i, &l) in labels.labels().iter().enumerate() {
        if l != 0 {
            let s = stats.iter().find(|s| s.label == l).expect("label has stats");
            max_radius = max_radius.max(dist(result.field.vector(i), &s.mean));
        }
    }
    let mut min_mean_distance: Option<f64> = None;
    for a in 0..stats.len() {
        for b in a + 1..stats.len() {
            let d = dist(&stats[a].mean, &stats[b].mean);
            min_mean_distance = Some(min_mean_distance.map_or(d, |m| m.min(d)));
        }
    }
    let recovered = label_pixels(&result.field, &labels.foreground(), &config.trace.mean_shift)?;
    let report = evaluate_instances(&recovered.instance_masks(), &labels.instance_masks(), DEFAULT_SMOOTH)?;
    create_dir(out)?;
    save_label_map(&out.join("labels.png"), &recovered)?;
    let LossBreakdown {
        attraction,
        repulsion,
        regularization,
        total,
    } = result.loss;
    write_json(
        &out.join("fit.json"),
        &FitFile {
            instances: stats.len(),
            dim: result.field.dim(),
            steps: result.steps,
            converged: result.converged,
            attraction,
            repulsion,
            regularization,
            total,
            max_radius,
            min_mean_distance,
            recovered_instances: recovered.num_instances() as usize,
            sbd: report.sbd,
        },
    )
}
