//! Command-line front end. [`run`] parses arguments, dispatches, and maps
//! outcomes to exit codes: 0 on success, 1 on a domain error, 2 on a usage
//! error.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;
use thiserror::Error;

use crate::anchors::{self, AnchorConfig, AnchorError, FitConfig};
use crate::annotation::{self, AnnotationError, Connectivity, NoiseMode, NoiseSpec};
use crate::geometry::{self, Box3, GeometryError, VolumeMeta};
use crate::io::{self, BoxDocument, BoxRecord, FormatError};
use crate::losses::gradcheck::{gradient_check, GradCheckError};
use crate::losses::{BoxLoss, BoxParam, IouTerms};
use crate::matching::{self, MatchError};
use crate::metrics::{self, EvalConfig, EvalSet, MetricsError};
use crate::nms::{self, DetectionError};

pub const EXIT_OK: i32 = 0;
pub const EXIT_DOMAIN: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Anchor(#[from] AnchorError),
    #[error(transparent)]
    Match(#[from] MatchError),
    #[error(transparent)]
    Detection(#[from] DetectionError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Annotation(#[from] AnnotationError),
    #[error(transparent)]
    GradCheck(#[from] GradCheckError),
    #[error("{path}: {message}")]
    Config { path: PathBuf, message: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Input(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, ValueEnum)]
pub enum OutputFormat {
    #[default]
    Table,
    Structured,
}

#[derive(Debug, Parser)]
#[command(name = "voxdet", version, about = "3D voxel box geometry, losses, anchors, matching and evaluation")]
struct Cli {
    /// Output style on standard output.
    #[arg(long, global = true, value_enum, default_value_t = OutputFormat::Table)]
    format: OutputFormat,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// IoU and DIoU terms of two corner boxes.
    Iou {
        #[arg(long, value_parser = parse_corners)]
        a: Box3,
        #[arg(long, value_parser = parse_corners)]
        b: Box3,
    },
    /// Loss value and gradient with respect to (cz, cy, cx, d, h, w).
    Loss(LossArgs),
    /// Compare the analytic gradient against central differences.
    GradCheck {
        #[command(flatten)]
        pair: LossArgs,
        #[arg(long, default_value_t = 1e-5)]
        step: f64,
    },
    /// Anchor generation and fitting.
    #[command(subcommand)]
    Anchors(AnchorsCommand),
    /// ATSS assignment of anchors to ground-truth boxes.
    Match {
        #[command(flatten)]
        grid: GridArgs,
        /// Ground-truth box file.
        #[arg(long)]
        gt: PathBuf,
        #[arg(long, default_value_t = matching::DEFAULT_TOP_K)]
        top_k: usize,
    },
    /// Greedy per-label non-maximum suppression of a detection file.
    Nms {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long, default_value_t = nms::DEFAULT_NMS_IOU)]
        iou: f64,
        #[arg(long, default_value_t = usize::MAX)]
        max_out: usize,
        /// Output box file; standard output when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// AP/AR report, optionally stratified by physical size.
    Eval {
        #[command(flatten)]
        data: EvalData,
        /// Comma-separated IoU thresholds.
        #[arg(long, value_delimiter = ',', default_value = "0.1,0.3")]
        iou: Vec<f64>,
        #[arg(long, default_value_t = metrics::DEFAULT_MAX_DET)]
        max_det: usize,
        /// Comma-separated size-group edges in cm³.
        #[arg(long, value_delimiter = ',', default_value = "1,10,50")]
        bins: Vec<f64>,
        /// Skip the size-stratified reports.
        #[arg(long)]
        no_bins: bool,
        #[arg(long, value_delimiter = ',', default_value = "0.125,0.25,0.5,1,2,4,8")]
        fp_axis: Vec<f64>,
        /// Also write the full structured report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// FROC curve: sensitivity at each FP/scan rate.
    Froc {
        #[command(flatten)]
        data: EvalData,
        #[arg(long, default_value_t = 0.1)]
        iou: f64,
        #[arg(long, value_delimiter = ',', default_value = "0.125,0.25,0.5,1,2,4,8")]
        fp_axis: Vec<f64>,
    },
    /// Connected components of a label volume as a box file.
    Mask2boxes {
        #[arg(long)]
        volume: PathBuf,
        #[arg(long, value_parser = parse_connectivity, default_value = "26")]
        connectivity: Connectivity,
        /// scan_id of the output document; the file stem by default.
        #[arg(long)]
        scan_id: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Seeded box corruption. The box file goes to --out (or standard output);
    /// a summary goes to standard output (or standard error).
    Noise {
        #[arg(long)]
        boxes: PathBuf,
        #[arg(long, value_parser = parse_mode)]
        mode: NoiseMode,
        #[arg(long, default_value_t = 0.1)]
        magnitude: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Removal probabilities under 1 cm³ and under 10 cm³.
        #[arg(long, value_delimiter = ',', default_value = "0.2,0.1")]
        drop_rates: Vec<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
struct LossArgs {
    #[arg(long, default_value = "vciou")]
    loss: BoxLoss,
    /// Smooth-L1 transition point.
    #[arg(long)]
    beta: Option<f64>,
    /// Prediction corners z1,y1,x1,z2,y2,x2 (or center-size with --center-size).
    #[arg(long, value_parser = parse_six, allow_hyphen_values = true)]
    pred: [f64; 6],
    #[arg(long, value_parser = parse_six, allow_hyphen_values = true)]
    gt: [f64; 6],
    /// Read --pred and --gt as cz,cy,cx,d,h,w.
    #[arg(long)]
    center_size: bool,
}

#[derive(Debug, Args)]
struct GridArgs {
    /// Volume shape z,y,x in voxels.
    #[arg(long, value_parser = parse_shape)]
    shape: [usize; 3],
    /// Voxel spacing z,y,x in mm.
    #[arg(long, value_parser = parse_triple, default_value = "1,1,1")]
    spacing: [f64; 3],
    /// TOML anchor configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Anchor shape d,h,w at the first level; repeatable. Overrides the
    /// family of --config.
    #[arg(long, value_parser = parse_triple)]
    family: Vec<[f64; 3]>,
}

#[derive(Debug, Args)]
struct EvalData {
    /// Detection box file (scores required).
    #[arg(long)]
    pred: PathBuf,
    /// Ground-truth box file.
    #[arg(long)]
    gt: PathBuf,
}

#[derive(Debug, Subcommand)]
enum AnchorsCommand {
    /// Lay out the anchor lattice for a volume and summarize each level.
    Gen {
        #[command(flatten)]
        grid: GridArgs,
    },
    /// Fit anchor shapes to the boxes of a box file.
    Fit {
        #[arg(long)]
        boxes: PathBuf,
        #[arg(long, default_value_t = 9)]
        k: usize,
        #[arg(long, default_value_t = 100)]
        iters: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write the fitted family as a TOML anchor configuration.
        #[arg(long)]
        write_config: Option<PathBuf>,
    },
}

fn parse_list(s: &str) -> Result<Vec<f64>, String> {
    s.split(',')
        .map(|t| t.trim().parse::<f64>().map_err(|_| format!("'{t}' is not a number")))
        .collect()
}

fn parse_fixed<const N: usize>(s: &str) -> Result<[f64; N], String> {
    let v = parse_list(s)?;
    v.try_into()
        .map_err(|v: Vec<f64>| format!("expected {N} comma-separated numbers, got {}", v.len()))
}

fn parse_six(s: &str) -> Result<[f64; 6], String> {
    parse_fixed::<6>(s)
}

fn parse_triple(s: &str) -> Result<[f64; 3], String> {
    parse_fixed::<3>(s)
}

fn parse_corners(s: &str) -> Result<Box3, String> {
    Box3::from_corners(parse_six(s)?).map_err(|e| e.to_string())
}

fn parse_shape(s: &str) -> Result<[usize; 3], String> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 3 {
        return Err(format!("expected z,y,x, got '{s}'"));
    }
    let mut out = [0usize; 3];
    for (o, p) in out.iter_mut().zip(parts) {
        *o = p.trim().parse().map_err(|_| format!("'{p}' is not a non-negative integer"))?;
    }
    Ok(out)
}

fn parse_connectivity(s: &str) -> Result<Connectivity, String> {
    s.parse::<u32>()
        .ok()
        .and_then(Connectivity::from_count)
        .ok_or_else(|| format!("expected 6 or 26, got '{s}'"))
}

fn parse_mode(s: &str) -> Result<NoiseMode, String> {
    s.parse().map_err(|e: AnnotationError| e.to_string())
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("output serializes");
    s.push('\n');
    s
}

fn write_file(path: &Path, contents: &[u8]) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn fmt_vec(v: &[f64]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(", ")
}

/// Text written to standard output on success, plus optional text for
/// standard error.
struct Output {
    stdout: String,
    stderr: String,
}

impl From<String> for Output {
    fn from(stdout: String) -> Self {
        Self {
            stdout,
            stderr: String::new(),
        }
    }
}

/// Runs the CLI on `args` (including the program name).
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if e.use_stderr() {
                err.write_all(text.as_bytes())
            } else {
                out.write_all(text.as_bytes())
            };
            return code;
        }
    };
    match dispatch(cli.command, cli.format) {
        Ok(o) => {
            let _ = out.write_all(o.stdout.as_bytes());
            let _ = err.write_all(o.stderr.as_bytes());
            EXIT_OK
        }
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            EXIT_DOMAIN
        }
    }
}

fn dispatch(command: Command, format: OutputFormat) -> Result<Output, CliError> {
    let structured = format == OutputFormat::Structured;
    match command {
        Command::Iou { a, b } => Ok(cmd_iou(&a, &b, structured).into()),
        Command::Loss(args) => cmd_loss(&args, structured).map(Into::into),
        Command::GradCheck { pair, step } => cmd_grad_check(&pair, step, structured).map(Into::into),
        Command::Anchors(AnchorsCommand::Gen { grid }) => cmd_anchors_gen(&grid, structured).map(Into::into),
        Command::Anchors(AnchorsCommand::Fit {
            boxes,
            k,
            iters,
            seed,
            write_config,
        }) => cmd_anchors_fit(&boxes, FitConfig { k, iters, seed }, write_config.as_deref(), structured)
            .map(Into::into),
        Command::Match { grid, gt, top_k } => cmd_match(&grid, &gt, top_k, structured).map(Into::into),
        Command::Nms {
            pred,
            iou,
            max_out,
            out,
        } => cmd_nms(&pred, iou, max_out, out.as_deref(), structured),
        Command::Eval {
            data,
            iou,
            max_det,
            bins,
            no_bins,
            fp_axis,
            out,
        } => {
            let config = EvalConfig {
                iou_thresholds: iou,
                max_det,
                fp_axis,
                size_bins_cm3: if no_bins { Vec::new() } else { bins },
            };
            cmd_eval(&data, &config, out.as_deref(), structured).map(Into::into)
        }
        Command::Froc { data, iou, fp_axis } => cmd_froc(&data, iou, &fp_axis, structured).map(Into::into),
        Command::Mask2boxes {
            volume,
            connectivity,
            scan_id,
            out,
        } => cmd_mask2boxes(&volume, connectivity, scan_id, out.as_deref(), structured),
        Command::Noise {
            boxes,
            mode,
            magnitude,
            seed,
            drop_rates,
            out,
        } => cmd_noise(&boxes, mode, magnitude, seed, &drop_rates, out.as_deref(), structured),
    }
}

fn cmd_iou(a: &Box3, b: &Box3, structured: bool) -> String {
    let terms = IouTerms::compute(&BoxParam::from_box(a), &BoxParam::from_box(b));
    if structured {
        to_json(&json!({
            "iou": terms.iou,
            "intersection": geometry::intersection_volume(a, b),
            "rho_sq": terms.rho_sq,
            "c_sq": terms.c_sq,
            "diou": terms.diou,
            "v": terms.v,
            "alpha": terms.alpha,
            "vciou": terms.vciou(),
        }))
    } else {
        format!(
            "iou    {}\nintersection {}\ndiou   {}\nv      {}\nalpha  {}\nvciou  {}\n",
            terms.iou,
            geometry::intersection_volume(a, b),
            terms.diou,
            terms.v,
            terms.alpha,
            terms.vciou()
        )
    }
}

fn loss_pair(args: &LossArgs) -> Result<(BoxLoss, BoxParam, BoxParam), CliError> {
    let param = |v: [f64; 6]| -> Result<BoxParam, CliError> {
        if args.center_size {
            Ok(BoxParam::from_array(v)?)
        } else {
            Ok(BoxParam::from_box(&Box3::from_corners(v)?))
        }
    };
    let loss = match (args.loss, args.beta) {
        (BoxLoss::SmoothL1 { .. }, Some(beta)) => {
            if !(beta > 0.0) {
                return Err(CliError::Input(format!("--beta must be > 0, got {beta}")));
            }
            BoxLoss::SmoothL1 { beta }
        }
        (l, _) => l,
    };
    Ok((loss, param(args.pred)?, param(args.gt)?))
}

fn cmd_loss(args: &LossArgs, structured: bool) -> Result<String, CliError> {
    let (loss, pred, gt) = loss_pair(args)?;
    let v = loss.evaluate(&pred, &gt);
    let grad = v.gradient.unwrap_or([0.0; 6]);
    Ok(if structured {
        to_json(&json!({ "loss": loss.name(), "value": v.value, "gradient": grad }))
    } else {
        format!("{} {}\ngradient [{}]\n", loss.name(), v.value, fmt_vec(&grad))
    })
}

fn cmd_grad_check(args: &LossArgs, step: f64, structured: bool) -> Result<String, CliError> {
    let (loss, pred, gt) = loss_pair(args)?;
    let r = gradient_check(loss, &pred, &gt, step)?;
    Ok(if structured {
        to_json(&r)
    } else {
        format!(
            "{}\nanalytic [{}]\nnumeric  [{}]\nmax relative error {:e} at parameter {}\n",
            r.loss,
            fmt_vec(&r.analytic),
            fmt_vec(&r.numeric),
            r.max_rel_error,
            r.worst_param
        )
    })
}

fn read_config(path: &Path) -> Result<AnchorConfig, CliError> {
    let text = fs::read_to_string(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    toml::from_str(&text).map_err(|e| CliError::Config {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

fn build_grid(args: &GridArgs) -> Result<anchors::AnchorGrid, CliError> {
    let volume = VolumeMeta::new(args.shape, args.spacing)?;
    let mut config = match &args.config {
        Some(p) => read_config(p)?,
        None => AnchorConfig::new(Vec::new()),
    };
    if !args.family.is_empty() {
        config.family = args.family.clone();
    }
    let schedule = config.schedule(&volume)?;
    Ok(anchors::generate_anchors(&schedule, &volume)?)
}

fn cmd_anchors_gen(args: &GridArgs, structured: bool) -> Result<String, CliError> {
    let grid = build_grid(args)?;
    if structured {
        let levels: Vec<_> = grid
            .levels()
            .iter()
            .map(|l| {
                json!({
                    "level": l.level,
                    "stride": l.stride,
                    "feature_shape": l.feature_shape,
                    "anchor_shapes": l.shapes,
                    "offset": l.offset,
                    "anchors": l.len(),
                })
            })
            .collect();
        return Ok(to_json(&json!({ "total": grid.len(), "levels": levels })));
    }
    let mut s = format!("{:<6} {:<12} {:<14} {:>9}  shapes (d,h,w)\n", "level", "stride", "features", "anchors");
    for l in grid.levels() {
        let shapes: Vec<String> = l.shapes.iter().map(|sh| format!("[{}]", fmt_vec(sh))).collect();
        s += &format!(
            "P{:<5} {:<12} {:<14} {:>9}  {}\n",
            l.level,
            format!("{:?}", l.stride),
            format!("{:?}", l.feature_shape),
            l.len(),
            shapes.join(" ")
        );
    }
    s += &format!("total {}\n", grid.len());
    Ok(s)
}

fn all_boxes(docs: &[BoxDocument]) -> Vec<Box3> {
    docs.iter().flat_map(|d| d.boxes.iter().map(|r| r.bbox)).collect()
}

fn cmd_anchors_fit(path: &Path, config: FitConfig, write_config: Option<&Path>, structured: bool) -> Result<String, CliError> {
    let boxes = all_boxes(&io::read_boxes(path)?);
    let fit = anchors::fit_anchors(&boxes, config)?;
    if let Some(p) = write_config {
        let text = toml::to_string(&AnchorConfig::new(fit.shapes.clone())).map_err(|e| CliError::Config {
            path: p.to_path_buf(),
            message: e.to_string(),
        })?;
        write_file(p, text.as_bytes())?;
    }
    Ok(if structured {
        to_json(&json!({
            "shapes": fit.shapes,
            "mean_best_iou": fit.mean_best_iou,
            "history": fit.history,
            "reseeds": fit.reseeds,
        }))
    } else {
        let mut s = String::from("shapes (d,h,w)\n");
        for sh in &fit.shapes {
            s += &format!("  [{}]\n", fmt_vec(sh));
        }
        s += &format!("mean best IoU {}\n", fit.mean_best_iou);
        s
    })
}

fn cmd_match(args: &GridArgs, gt: &Path, top_k: usize, structured: bool) -> Result<String, CliError> {
    let grid = build_grid(args)?;
    let docs = io::read_boxes(gt)?;
    let mut reports = Vec::new();
    let mut text = String::new();
    for doc in &docs {
        let boxes: Vec<Box3> = doc.boxes.iter().map(|r| r.bbox).collect();
        let m = matching::atss_match(&grid, &boxes, top_k)?;
        text += &format!(
            "scan {}: {} positives, {} unmatched boxes\n{:>4} {:>10} {:>10} {:>10} {:>9}\n",
            doc.scan_id,
            m.num_positive(),
            m.unmatched_gts().len(),
            "gt",
            "iou_mean",
            "iou_std",
            "threshold",
            "positives"
        );
        for (i, s) in m.gt_stats.iter().enumerate() {
            text += &format!(
                "{:>4} {:>10.6} {:>10.6} {:>10.6} {:>9}\n",
                i, s.iou_mean, s.iou_std, s.threshold, s.positives
            );
        }
        reports.push(json!({
            "scan_id": doc.scan_id,
            "positives": m.positives(),
            "gt_stats": m.gt_stats,
        }));
    }
    Ok(if structured { to_json(&reports) } else { text })
}

fn read_detection_docs(path: &Path) -> Result<Vec<(BoxDocument, metrics::ScanDetections)>, CliError> {
    let docs = io::read_boxes(path)?;
    docs.into_iter()
        .map(|d| {
            let dets = d.detections(path)?;
            Ok((d, dets))
        })
        .collect()
}

fn cmd_nms(pred: &Path, iou: f64, max_out: usize, out: Option<&Path>, structured: bool) -> Result<Output, CliError> {
    let mut kept_docs = Vec::new();
    let mut summary = String::new();
    let mut rows = Vec::new();
    for (doc, scan) in read_detection_docs(pred)? {
        let kept = nms::nms_indices(&scan.detections, iou, max_out)?;
        summary += &format!("{}: kept {} of {}\n", doc.scan_id, kept.len(), scan.detections.len());
        rows.push(json!({ "scan_id": doc.scan_id, "kept": kept, "input": scan.detections.len() }));
        let dets: Vec<_> = kept.iter().map(|&i| scan.detections[i]).collect();
        kept_docs.push(BoxDocument::from_detections(doc.scan_id, doc.spacing, &dets));
    }
    if structured {
        summary = to_json(&rows);
    }
    let file = io::encode_boxes(&kept_docs);
    route(file, summary, out)
}

/// Sends a box file to `out` or standard output; the summary goes to the
/// other stream.
fn route(file: String, summary: String, out: Option<&Path>) -> Result<Output, CliError> {
    match out {
        Some(p) => {
            write_file(p, file.as_bytes())?;
            Ok(Output {
                stdout: summary,
                stderr: String::new(),
            })
        }
        None => Ok(Output {
            stdout: file,
            stderr: summary,
        }),
    }
}

fn load_eval_set(data: &EvalData) -> Result<EvalSet, CliError> {
    let dets = read_detection_docs(&data.pred)?.into_iter().map(|(_, d)| d).collect();
    let gts = io::read_boxes(&data.gt)?.iter().map(BoxDocument::ground_truth).collect();
    EvalSet::new(dets, gts).map_err(|e| match e {
        MetricsError::DuplicateScanId(id) => CliError::Input(format!(
            "{} / {}: scan id '{id}' appears more than once",
            data.pred.display(),
            data.gt.display()
        )),
        other => other.into(),
    })
}

fn cmd_eval(data: &EvalData, config: &EvalConfig, out: Option<&Path>, structured: bool) -> Result<String, CliError> {
    let set = load_eval_set(data)?;
    let report = metrics::evaluate(&set, config)?;
    let json = to_json(&report);
    if let Some(p) = out {
        write_file(p, json.as_bytes())?;
    }
    Ok(if structured { json } else { report.to_table() })
}

fn cmd_froc(data: &EvalData, iou: f64, fp_axis: &[f64], structured: bool) -> Result<String, CliError> {
    let set = load_eval_set(data)?;
    let matches = metrics::match_detections(&set, iou)?;
    let curve = metrics::froc(&matches, fp_axis)?;
    Ok(if structured { to_json(&curve) } else { curve.to_columns() })
}

fn cmd_mask2boxes(
    volume: &Path,
    connectivity: Connectivity,
    scan_id: Option<String>,
    out: Option<&Path>,
    structured: bool,
) -> Result<Output, CliError> {
    let vol = io::read_volume(volume)?;
    let components = annotation::mask_to_boxes(&vol.map, connectivity);
    let scan_id = scan_id.unwrap_or_else(|| {
        volume
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default()
    });
    let doc = BoxDocument {
        scan_id,
        spacing: vol.map.meta().spacing(),
        boxes: components
            .iter()
            .map(|c| BoxRecord {
                bbox: c.bbox,
                label: c.label as i64,
                score: None,
            })
            .collect(),
    };
    let summary = if structured {
        to_json(&components)
    } else {
        let mut s = format!("{} components\n", components.len());
        for (i, c) in components.iter().enumerate() {
            s += &format!("{i:>4} label {:>3} voxels {:>7} box [{}]\n", c.label, c.voxels, fmt_vec(&c.bbox.corners()));
        }
        s
    };
    route(io::encode_boxes(&[doc]), summary, out)
}

fn cmd_noise(
    path: &Path,
    mode: NoiseMode,
    magnitude: f64,
    seed: u64,
    drop_rates: &[f64],
    out: Option<&Path>,
    structured: bool,
) -> Result<Output, CliError> {
    let [p1, p10] = <[f64; 2]>::try_from(drop_rates)
        .map_err(|_| CliError::Input(format!("--drop-rates needs 2 values, got {}", drop_rates.len())))?;
    let spec = NoiseSpec::new(mode, magnitude, seed)?.with_drop_rates(p1, p10)?;
    let docs = io::read_boxes(path)?;
    let mut noisy = Vec::with_capacity(docs.len());
    let mut rows = Vec::new();
    for (i, doc) in docs.iter().enumerate() {
        let boxes: Vec<Box3> = doc.boxes.iter().map(|r| r.bbox).collect();
        let outcome = annotation::corrupt_boxes(&boxes, &doc.spacing, &spec.for_scan(i));
        let records = outcome
            .kept
            .iter()
            .zip(&outcome.boxes)
            .map(|(&k, &bbox)| BoxRecord { bbox, ..doc.boxes[k] })
            .collect();
        noisy.push(BoxDocument {
            scan_id: doc.scan_id.clone(),
            spacing: doc.spacing,
            boxes: records,
        });
        rows.push(json!({
            "scan_id": doc.scan_id,
            "kept": outcome.kept.len(),
            "dropped": outcome.dropped,
            "mean_iou": outcome.mean_iou,
            "clamped": outcome.clamped,
        }));
    }
    let summary = if structured {
        to_json(&rows)
    } else {
        rows.iter()
            .map(|r| {
                format!(
                    "{}: kept {} dropped {} mean IoU {} clamped {}\n",
                    r["scan_id"].as_str().unwrap_or_default(),
                    r["kept"],
                    r["dropped"].as_array().map_or(0, Vec::len),
                    r["mean_iou"],
                    r["clamped"]
                )
            })
            .collect()
    };
    route(io::encode_boxes(&noisy), summary, out)
}
