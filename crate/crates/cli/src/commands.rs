use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use skynet_core::arch::{build_skynet, count_params, forward, validate, Variant, WeightSet};
use skynet_core::costmodel::HardwareProfile;
use skynet_core::detect::{
    analyze_size_distribution, decode_boxes, parse_manifest, parse_predictions, score_predictions,
    synthetic_manifest, to_jsonl, Anchor, DetectError, GroundTruthRecord, Prediction, ScoreReport,
    SizeDistribution, Track, DEFAULT_ANCHORS, NUM_ANCHORS,
};
use skynet_core::quant::{quantized_forward, QuantConfig, QuantError};
use skynet_core::search::{scd_search, SearchConfig, SearchError, SearchOutcome, SearchStatus};
use skynet_core::tensor::{gradcheck_all, GradCheckReport, Tensor};

use crate::image::{decode_image, encode_ppm};
use crate::model::{load_spec, ModelBundle, WeightFormat, SPEC_FILE};
use crate::{read_bytes, read_text, write_file, CliError, Result};

#[derive(Debug, Parser)]
#[command(
    name = "skynet",
    version,
    about = "Build, run, search and score compact single-object detectors"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a model directory with seeded random weights.
    Build(BuildArgs),
    /// Run a model on one image and print the predicted box.
    Infer(InferArgs),
    /// Search the network structure for a latency target.
    Search(SearchArgs),
    /// Score predictions against ground truth.
    Score(ScoreArgs),
    /// Histogram and CDF of box-to-image area ratios.
    Analyze(AnalyzeArgs),
    /// Compare analytic and finite-difference operator gradients.
    Gradcheck(GradcheckArgs),
    /// Write a synthetic manifest and matching PPM images.
    Synth(SynthArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Init {
    /// Uniform in [-0.05, 0.05].
    Small,
    /// Uniform in ±sqrt(6 / fan_in).
    He,
    /// All conv weights and batch-norm scales zero.
    Zero,
}

#[derive(Debug, Clone, clap::Args)]
pub struct BuildArgs {
    #[arg(long, default_value = "C")]
    pub variant: Variant,
    #[arg(long, default_value_t = 160)]
    pub input_h: usize,
    #[arg(long, default_value_t = 320)]
    pub input_w: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = Init::He)]
    pub init: Init,
    #[arg(long, value_enum, default_value_t = WeightFormat::F32)]
    pub weights: WeightFormat,
    /// Output model directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, clap::Args)]
pub struct InferArgs {
    /// Model directory written by `build`.
    #[arg(long)]
    pub model: PathBuf,
    /// PPM, PGM or raw tensor file matching the model input.
    #[arg(long)]
    pub image: PathBuf,
    /// Anchor sizes as `w0,h0,w1,h1`, relative to the image.
    #[arg(long)]
    pub anchors: Option<String>,
    /// Run the fixed-point forward path.
    #[arg(long)]
    pub quantized: bool,
    #[arg(long, default_value_t = QuantConfig::default().weight_bits)]
    pub weight_bits: u8,
    #[arg(long, default_value_t = QuantConfig::default().act_bits)]
    pub act_bits: u8,
    /// Defaults to the image file stem.
    #[arg(long)]
    pub image_id: Option<String>,
}

#[derive(Debug, Clone, clap::Args)]
pub struct SearchArgs {
    /// Search configuration JSON.
    #[arg(long)]
    pub config: PathBuf,
    /// Hardware profile JSON.
    #[arg(long)]
    pub profile: PathBuf,
    /// Starting network: a spec JSON file or a model directory.
    #[arg(long)]
    pub initial: PathBuf,
    /// Where to write the resulting spec.
    #[arg(long)]
    pub out: PathBuf,
    /// Where to write the line-delimited trace.
    #[arg(long)]
    pub trace: PathBuf,
}

#[derive(Debug, Clone, clap::Args)]
pub struct ScoreArgs {
    #[arg(long)]
    pub predictions: PathBuf,
    #[arg(long)]
    pub ground_truth: PathBuf,
    /// JSON with `energy_j` for this entry and `all_entries_j` for the field.
    #[arg(long)]
    pub energy_report: PathBuf,
    #[arg(long)]
    pub track: Track,
}

pub const DEFAULT_BINS: &str = "0,0.01,0.02,0.05,0.09,0.2,1";

#[derive(Debug, Clone, clap::Args)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub ground_truth: PathBuf,
    /// Comma-separated, strictly increasing bin edges.
    #[arg(long, default_value = DEFAULT_BINS)]
    pub bins: String,
}

#[derive(Debug, Clone, clap::Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 20)]
    pub trials: usize,
}

#[derive(Debug, Clone, clap::Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 10)]
    pub count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 320)]
    pub width: u32,
    #[arg(long, default_value_t = 160)]
    pub height: u32,
    /// Output directory; receives `manifest.jsonl` and `images/`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnergyReport {
    pub energy_j: f64,
    pub all_entries_j: Vec<f64>,
}

pub fn run(cli: Cli, out: &mut dyn Write) -> Result<()> {
    let line = match cli.command {
        Command::Build(a) => cmd_build(&a)?,
        Command::Infer(a) => {
            let p = cmd_infer(&a)?;
            let row = to_jsonl([(
                p.image_id.as_str(),
                p.image_w,
                p.image_h,
                p.bbox,
                Some(p.conf),
            )]);
            out.write_all(row.as_bytes())
                .map_err(|e| CliError::Io(e.to_string()))?;
            return Ok(());
        }
        Command::Search(a) => {
            let o = cmd_search(&a)?;
            let summary = json!({
                "status": o.status,
                "iterations": o.iterations,
                "bundles": o.best.bundles.len(),
                "latency_ms": o.estimate.latency_ms,
                "resources": o.estimate.resources,
            });
            emit(out, &summary)?;
            return match o.status {
                SearchStatus::Satisfied => Ok(()),
                SearchStatus::Stalled => Err(CliError::Search(format!(
                    "stalled after {} iterations",
                    o.iterations
                ))),
                SearchStatus::Exhausted => Err(CliError::Search(format!(
                    "exhausted {} iterations without meeting the target",
                    o.iterations
                ))),
            };
        }
        Command::Score(a) => serde_json::to_value(cmd_score(&a)?).expect("report serializes"),
        Command::Analyze(a) => {
            serde_json::to_value(cmd_analyze(&a)?).expect("distribution serializes")
        }
        Command::Gradcheck(a) => {
            let r = cmd_gradcheck(&a)?;
            emit(out, &r)?;
            if !r.all_passed() {
                let failed: Vec<&str> = r
                    .ops
                    .iter()
                    .filter(|o| !o.passed)
                    .map(|o| o.op.as_str())
                    .collect();
                return Err(CliError::Mismatch(format!(
                    "gradient check failed for {}",
                    failed.join(", ")
                )));
            }
            return Ok(());
        }
        Command::Synth(a) => cmd_synth(&a)?,
    };
    emit(out, &line)
}

fn emit(out: &mut dyn Write, v: &impl Serialize) -> Result<()> {
    let s = serde_json::to_string(v).expect("output serializes");
    writeln!(out, "{}", s).map_err(|e| CliError::Io(e.to_string()))
}

fn detect_error(e: DetectError) -> CliError {
    match e {
        DetectError::UnknownImages(ids) => {
            CliError::Mismatch(format!("unknown image ids: {}", ids.join(", ")))
        }
        DetectError::Duplicate(id) => CliError::Mismatch(format!("duplicate image id {}", id)),
        other => CliError::Usage(other.to_string()),
    }
}

pub fn cmd_build(a: &BuildArgs) -> Result<serde_json::Value> {
    let (h, w) = (a.input_h, a.input_w);
    if h == 0 || w == 0 || h % 8 != 0 || w % 8 != 0 {
        return Err(CliError::Usage(format!(
            "input height and width must be positive multiples of 8 to survive three 2x2 pools, got {}x{}",
            h, w
        )));
    }
    let spec = build_skynet(a.variant).with_input(h, w);
    if let Err(v) = validate(&spec) {
        let msgs: Vec<String> = v.iter().map(|v| v.to_string()).collect();
        return Err(CliError::Usage(msgs.join("; ")));
    }
    let weights = match a.init {
        Init::Small => WeightSet::random(&spec, a.seed),
        Init::He => WeightSet::random_he(&spec, a.seed),
        Init::Zero => WeightSet::zeros(&spec),
    }
    .map_err(|e| CliError::Usage(e.to_string()))?;
    let params = count_params(&spec).map_err(|e| CliError::Usage(e.to_string()))?;
    ModelBundle { spec, weights }.save(&a.out, a.weights)?;
    Ok(json!({
        "variant": a.variant.to_string(),
        "input_shape": [3, h, w],
        "params": params,
        "out": a.out,
    }))
}

pub fn parse_anchors(s: &str) -> Result<[Anchor; NUM_ANCHORS]> {
    let bad = || {
        CliError::Usage(format!(
            "anchors must be 'w0,h0,w1,h1' with positive values, got '{}'",
            s
        ))
    };
    let v: Vec<f64> = s
        .split(',')
        .map(|t| t.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| bad())?;
    if v.len() != 2 * NUM_ANCHORS {
        return Err(bad());
    }
    let a = |i: usize| Anchor::new(v[2 * i], v[2 * i + 1]).map_err(|_| bad());
    Ok([a(0)?, a(1)?])
}

fn quant_error(e: QuantError) -> CliError {
    match e {
        QuantError::Format(_) | QuantError::Domain(_) => CliError::Usage(e.to_string()),
        other => CliError::Mismatch(other.to_string()),
    }
}

pub fn cmd_infer(a: &InferArgs) -> Result<Prediction> {
    let anchors = match &a.anchors {
        Some(s) => parse_anchors(s)?,
        None => DEFAULT_ANCHORS,
    };
    let model = ModelBundle::load(&a.model)?;
    let x = decode_image(&read_bytes(&a.image)?)
        .map_err(|e| CliError::Usage(format!("{}: {}", a.image.display(), e)))?;
    if x.shape() != model.spec.input_shape {
        return Err(CliError::Mismatch(format!(
            "image is {:?} but the model expects {:?}",
            x.shape(),
            model.spec.input_shape
        )));
    }
    let head: Tensor<f64> = if a.quantized {
        let cfg = QuantConfig {
            weight_bits: a.weight_bits,
            act_bits: a.act_bits,
            ..QuantConfig::default()
        };
        quantized_forward(&model.spec, &model.weights, &x, cfg).map_err(quant_error)?
    } else {
        forward(&model.spec, &model.weights, &x).map_err(|e| CliError::Mismatch(e.to_string()))?
    };
    let det = decode_boxes(&head, &anchors).map_err(|e| CliError::Mismatch(e.to_string()))?;
    let image_id = match &a.image_id {
        Some(id) => id.clone(),
        None => a
            .image
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default(),
    };
    let [_, h, w] = model.spec.input_shape;
    Ok(Prediction {
        image_id,
        image_w: w as u32,
        image_h: h as u32,
        bbox: det.bbox,
        conf: det.conf,
    })
}

fn initial_spec(path: &Path) -> Result<skynet_core::arch::NetSpec> {
    if path.is_dir() {
        load_spec(&path.join(SPEC_FILE))
    } else {
        load_spec(path)
    }
}

pub fn cmd_search(a: &SearchArgs) -> Result<SearchOutcome> {
    let cfg: SearchConfig = serde_json::from_str(&read_text(&a.config)?)
        .map_err(|e| CliError::Usage(format!("{}: {}", a.config.display(), e)))?;
    let profile = HardwareProfile::from_json(&read_text(&a.profile)?)
        .map_err(|e| CliError::Usage(format!("{}: {}", a.profile.display(), e)))?;
    let initial = initial_spec(&a.initial)?;
    let outcome = scd_search(&initial, &cfg, &profile).map_err(|e| match e {
        SearchError::Arch(e) => CliError::Mismatch(e.to_string()),
        other => CliError::Usage(other.to_string()),
    })?;
    write_file(&a.out, outcome.best.to_json() + "\n")?;
    write_file(&a.trace, outcome.trace_jsonl())?;
    Ok(outcome)
}

pub fn cmd_score(a: &ScoreArgs) -> Result<ScoreReport> {
    let preds = parse_predictions(&read_text(&a.predictions)?).map_err(detect_error)?;
    let truth = parse_manifest(&read_text(&a.ground_truth)?).map_err(detect_error)?;
    let energy: EnergyReport = serde_json::from_str(&read_text(&a.energy_report)?)
        .map_err(|e| CliError::Usage(format!("{}: {}", a.energy_report.display(), e)))?;
    score_predictions(
        &preds,
        &truth,
        energy.energy_j,
        &energy.all_entries_j,
        a.track,
    )
    .map_err(detect_error)
}

pub fn parse_bins(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|t| {
            t.trim()
                .parse::<f64>()
                .map_err(|_| CliError::Usage(format!("bad bin edge '{}'", t)))
        })
        .collect()
}

pub fn cmd_analyze(a: &AnalyzeArgs) -> Result<SizeDistribution> {
    let edges = parse_bins(&a.bins)?;
    let truth = parse_manifest(&read_text(&a.ground_truth)?).map_err(detect_error)?;
    analyze_size_distribution(&truth, &edges).map_err(detect_error)
}

pub fn cmd_gradcheck(a: &GradcheckArgs) -> Result<GradCheckReport> {
    if a.trials == 0 {
        return Err(CliError::Usage("trials must be at least 1".into()));
    }
    gradcheck_all(a.seed, a.trials).map_err(|e| CliError::Mismatch(e.to_string()))
}

/// Noise in `[0, 0.2)` with the box filled at 1.0, the same rendering the
/// quick-train dataset uses.
pub fn render_box(r: &GroundTruthRecord, rng: &mut impl Rng) -> Tensor<f64> {
    let (w, h) = (r.image_w as usize, r.image_h as usize);
    let b = r.bbox;
    Tensor::from_fn(&[3, h, w], |k| {
        let p = k % (h * w);
        let (py, px) = (
            ((p / w) as f64 + 0.5) / h as f64,
            ((p % w) as f64 + 0.5) / w as f64,
        );
        if px >= b.xmin && px < b.xmax && py >= b.ymin && py < b.ymax {
            1.0
        } else {
            rng.gen_range(0.0..0.2)
        }
    })
    .expect("image extents are positive")
}

pub fn cmd_synth(a: &SynthArgs) -> Result<serde_json::Value> {
    if a.count == 0 || a.width == 0 || a.height == 0 {
        return Err(CliError::Usage(
            "count, width and height must be positive".into(),
        ));
    }
    let mut records = synthetic_manifest(a.count, a.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    for r in &mut records {
        r.image_w = a.width;
        r.image_h = a.height;
        let img = encode_ppm(&render_box(r, &mut rng)).map_err(CliError::Usage)?;
        write_file(
            &a.out.join("images").join(format!("{}.ppm", r.image_id)),
            img,
        )?;
    }
    let manifest = a.out.join("manifest.jsonl");
    write_file(&manifest, GroundTruthRecord::to_jsonl(&records))?;
    Ok(json!({ "images": records.len(), "manifest": manifest }))
}
