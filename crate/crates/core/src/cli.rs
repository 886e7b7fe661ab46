//! Command-line interface.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use crate::bboxreg::{self, BoxRegressor, IterateParams, LookupProvider};
use crate::bench;
use crate::config::Config;
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::eval::evaluate;
use crate::formats::create;
use crate::model::{detect_all, read_detections, write_detections, ModelWeights};
use crate::segfeat::geometry_features;
use crate::synth::gen_synthetic;
use crate::training::{train, write_train_log};

pub const MODEL_FILE: &str = "model.toml";
pub const DETECTIONS_FILE: &str = "detections.csv";
pub const REGRESSOR_FILE: &str = "regressor.toml";
pub const TRAIN_LOG_FILE: &str = "train_log.csv";

#[derive(Debug, Parser)]
#[command(
    name = "segdeepm",
    version,
    about = "Segmentation-aware object detection engine"
)]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Dataset manifest (file or directory holding manifest.toml).
    #[arg(long, global = true)]
    pub manifest: Option<PathBuf>,
    /// TOML configuration; missing keys take their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory (a file for `featdump` and `bench`).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads (default: machine parallelism).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Restrict the dataset to images of this split.
    #[arg(long, global = true)]
    pub split: Option<String>,
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    pub verbose: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset.
    Synth {
        /// Overrides `synth.seed` from the configuration.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides `synth.n_images` from the configuration.
        #[arg(long)]
        images: Option<usize>,
    },
    /// Write segmentation features of every (box, segment) pair as CSV.
    Featdump,
    /// Train one detector per class.
    Train {
        /// Train without segmentation features.
        #[arg(long)]
        no_seg: bool,
    },
    /// Score and suppress candidate boxes.
    Detect {
        /// Model file (default: <out>/model.toml).
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Bounding-box regression.
    Regress {
        #[command(subcommand)]
        action: RegressAction,
    },
    /// Evaluate detections against ground truth.
    Eval {
        /// Detections dump (default: <out>/detections.csv, produced from
        /// <out>/model.toml when absent).
        #[arg(long)]
        detections: Option<PathBuf>,
    },
    /// Time per-pixel vs integral-image segmentation features.
    Bench {
        /// Grid size of the inside-box features.
        #[arg(long, default_value_t = 2)]
        grid: u32,
        /// Square mask sizes in pixels.
        #[arg(long, value_delimiter = ',', default_value = "32,64,128,256")]
        sizes: Vec<u32>,
        /// Random boxes timed per mask.
        #[arg(long, default_value_t = 500)]
        boxes: usize,
        /// Seed of the masks and boxes.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Debug, Subcommand)]
pub enum RegressAction {
    /// Fit one regressor per class.
    Fit,
    /// Regress every candidate box once per class.
    Apply {
        /// Regressor file (default: <out>/regressor.toml).
        #[arg(long)]
        regressor: Option<PathBuf>,
    },
    /// Iterative regression and rescoring, then detection.
    Iterate {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        regressor: Option<PathBuf>,
    },
}

/// Parses `args` (including the program name), runs the command and maps
/// the outcome to an exit code: 0 success, 2 input or usage error,
/// 3 numerical error.
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let level = if cli.common.verbose { "info" } else { "warn" };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .try_init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 3 } else { 2 })
        }
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    let mut cfg = match &cli.common.config {
        Some(p) => Config::read(p)?,
        None => Config::default(),
    };
    if cli.common.threads.is_some() {
        cfg.threads = cli.common.threads;
    }
    cfg.validate()?;
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cfg.threads {
        pool = pool.num_threads(n);
    }
    let pool = pool
        .build()
        .map_err(|e| Error::Invalid(format!("cannot start thread pool: {e}")))?;
    pool.install(|| dispatch(cli, &cfg))
}

fn required<'a>(v: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    v.as_deref()
        .ok_or_else(|| Error::Invalid(format!("--{flag} is required for this command")))
}

fn existing(path: PathBuf, what: &str) -> Result<PathBuf> {
    if path.is_file() {
        Ok(path)
    } else {
        Err(Error::Invalid(format!(
            "{what} file not found: {}",
            path.display()
        )))
    }
}

fn out_dir(common: &Common) -> Result<&Path> {
    let out = required(&common.out, "out")?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    Ok(out)
}

fn load(common: &Common, cfg: &Config) -> Result<Dataset> {
    let ds = Dataset::load(
        required(&common.manifest, "manifest")?,
        cfg.features.min_segment_pixels,
    )?;
    match &common.split {
        None => Ok(ds),
        Some(s) => {
            let sub = ds.split(s);
            if sub.bundles.is_empty() {
                return Err(Error::Invalid(format!("split `{s}` has no images")));
            }
            Ok(sub)
        }
    }
}

fn read_model(path: PathBuf, ds: &Dataset) -> Result<ModelWeights> {
    let m = ModelWeights::read(&existing(path, "model")?)?;
    if m.n_classes != ds.n_classes() || m.app_dim != ds.appearance_dim() || m.ctx_dim != ds.context_dim() {
        return Err(Error::Dimension(format!(
            "model expects {} classes and {}/{} appearance/context features, dataset has {} and {}/{}",
            m.n_classes,
            m.app_dim,
            m.ctx_dim,
            ds.n_classes(),
            ds.appearance_dim(),
            ds.context_dim()
        )));
    }
    Ok(m)
}

fn model_path(flag: &Option<PathBuf>, common: &Common) -> Result<PathBuf> {
    match flag {
        Some(p) => Ok(p.clone()),
        None => Ok(required(&common.out, "out")?.join(MODEL_FILE)),
    }
}

fn dispatch(cli: &Cli, cfg: &Config) -> Result<()> {
    let common = &cli.common;
    match &cli.command {
        Command::Synth { seed, images } => {
            let mut sc = cfg.synth.clone();
            if let Some(s) = seed {
                sc.seed = *s;
            }
            if let Some(n) = images {
                sc.n_images = *n;
            }
            let out = out_dir(common)?;
            let world = gen_synthetic(&sc, out)?;
            info!("wrote {} images to {}", world.images.len(), out.display());
            Ok(())
        }
        Command::Featdump => featdump(common, cfg),
        Command::Train { no_seg } => {
            let ds = load(common, cfg)?;
            let mut tc = cfg.train.clone();
            if *no_seg {
                tc.use_segmentation = false;
            }
            let out = out_dir(common)?;
            let outcome = train(&ds, &tc, cfg.features.grid_spec()?, cfg.features.lambda)?;
            outcome.weights.write(&out.join(MODEL_FILE))?;
            write_train_log(&out.join(TRAIN_LOG_FILE), &outcome.log)
        }
        Command::Detect { model } => {
            let ds = load(common, cfg)?;
            let weights = read_model(model_path(model, common)?, &ds)?;
            let out = out_dir(common)?;
            let dets = detect_all(&ds.bundles, &weights, cfg.detect.nms_iou, cfg.detect.top_k)?;
            write_detections(&out.join(DETECTIONS_FILE), &dets)
        }
        Command::Regress { action } => regress(action, common, cfg),
        Command::Eval { detections } => {
            let ds = load(common, cfg)?;
            let out = out_dir(common)?;
            let path = detections.clone().unwrap_or_else(|| out.join(DETECTIONS_FILE));
            let dets = if path.is_file() {
                read_detections(&path)?
            } else if detections.is_none() && out.join(MODEL_FILE).is_file() {
                let weights = read_model(out.join(MODEL_FILE), &ds)?;
                let dets = detect_all(&ds.bundles, &weights, cfg.detect.nms_iou, cfg.detect.top_k)?;
                write_detections(&path, &dets)?;
                dets
            } else {
                return Err(Error::Invalid(format!(
                    "detections file not found: {} (and no model to produce it)",
                    path.display()
                )));
            };
            let report = evaluate(
                &dets,
                &ds.ground_truth,
                &ds.candidates(),
                &ds.class_names,
                &cfg.eval,
            )?;
            report.write(out)?;
            print!("{}", report.table());
            Ok(())
        }
        Command::Bench {
            grid,
            sizes,
            boxes,
            seed,
        } => {
            let grid = crate::segfeat::GridSpec::new(*grid)?;
            let rows = bench::run(sizes, grid, *boxes, *seed)?;
            match &common.out {
                Some(p) => {
                    let mut w = create(p)?;
                    bench::write_csv(&mut w, &rows)
                        .and_then(|_| w.flush())
                        .map_err(|e| Error::io(p, e))
                }
                None => {
                    bench::write_csv(std::io::stdout().lock(), &rows).map_err(|e| Error::io("<stdout>", e))
                }
            }
        }
    }
}

fn featdump(common: &Common, cfg: &Config) -> Result<()> {
    let ds = load(common, cfg)?;
    let grid = cfg.features.grid_spec()?;
    let path = required(&common.out, "out")?;
    let mut w = create(path)?;
    let io = |e| Error::io(path, e);
    let cells = grid.cells();
    let mut header = vec!["image_id".to_string(), "box_id".into(), "segment_id".into()];
    header.extend((1..=cells).map(|k| format!("grid_in_{k}")));
    header.push("seg_out".into());
    header.extend((1..=cells).map(|k| format!("back_in_{k}")));
    header.push("back_out".into());
    header.push("overlap".into());
    header.extend((1..=ds.n_classes()).map(|c| format!("seg_class_{c}")));
    writeln!(w, "{}", header.join(",")).map_err(io)?;
    for b in &ds.bundles {
        let Some(largest) = b.largest else { continue };
        let rows: Vec<String> = b
            .boxes
            .iter()
            .flat_map(|c| b.segments.iter().map(move |s| (c, s)))
            .map(|(c, s)| {
                let geo = geometry_features(&c.bbox, s, grid, cfg.features.lambda, largest)?;
                let mut fields = vec![b.image_id.clone(), c.box_id.to_string(), s.id().to_string()];
                fields.extend(geo.iter().map(f64::to_string));
                fields.extend(
                    s.scores
                        .iter()
                        .map(|v| crate::segfeat::segclass_feat(*v).to_string()),
                );
                Ok(fields.join(","))
            })
            .collect::<Result<_>>()?;
        for r in rows {
            writeln!(w, "{r}").map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

fn regressor_path(flag: &Option<PathBuf>, common: &Common) -> Result<PathBuf> {
    match flag {
        Some(p) => Ok(p.clone()),
        None => Ok(required(&common.out, "out")?.join(REGRESSOR_FILE)),
    }
}

fn regress(action: &RegressAction, common: &Common, cfg: &Config) -> Result<()> {
    let ds = load(common, cfg)?;
    match action {
        RegressAction::Fit => {
            let reg = bboxreg::fit_all(&ds, &cfg.bboxreg)?;
            reg.write(&out_dir(common)?.join(REGRESSOR_FILE))
        }
        RegressAction::Apply { regressor } => {
            let reg = BoxRegressor::read(&existing(regressor_path(regressor, common)?, "regressor")?)?;
            check_classes(&reg, &ds)?;
            let path = out_dir(common)?.join("regressed_boxes.csv");
            let mut w = create(&path)?;
            let io = |e| Error::io(&path, e);
            writeln!(w, "image_id,box_id,class_id,x1,y1,x2,y2").map_err(io)?;
            for b in &ds.bundles {
                let feats = b.regression.as_ref().ok_or_else(|| {
                    Error::Invalid(format!("image {} has no regression features", b.image_id))
                })?;
                for (c, cr) in reg.classes.iter().enumerate() {
                    for (row, cand) in b.boxes.iter().enumerate() {
                        let f = feats.row(row).unwrap();
                        if f.len() != reg.feature_dim {
                            return Err(Error::Dimension(format!(
                                "regression features have {} columns, regressor expects {}",
                                f.len(),
                                reg.feature_dim
                            )));
                        }
                        let o = bboxreg::apply_regressor(cr, f, &cand.bbox, b.dims);
                        writeln!(
                            w,
                            "{},{},{},{},{},{},{}",
                            b.image_id,
                            cand.box_id,
                            c + 1,
                            o.x1,
                            o.y1,
                            o.x2,
                            o.y2
                        )
                        .map_err(io)?;
                    }
                }
            }
            w.flush().map_err(io)
        }
        RegressAction::Iterate { model, regressor } => {
            let weights = read_model(model_path(model, common)?, &ds)?;
            let reg = BoxRegressor::read(&existing(regressor_path(regressor, common)?, "regressor")?)?;
            check_classes(&reg, &ds)?;
            let params = IterateParams {
                max_iters: cfg.bboxreg.max_iters,
                change_thresh: cfg.bboxreg.change_thresh,
                nms_iou: cfg.detect.nms_iou,
                top_k: cfg.detect.top_k,
            };
            let out = out_dir(common)?;
            let mut dets = Vec::new();
            let mut totals: Vec<(usize, usize)> = Vec::new();
            for b in &ds.bundles {
                let o = bboxreg::iterate_boxes(b, &reg, &weights, params, &LookupProvider)?;
                for s in &o.stats {
                    if totals.len() < s.iteration {
                        totals.push((0, 0));
                    }
                    totals[s.iteration - 1].0 += s.changed;
                    totals[s.iteration - 1].1 += s.total;
                }
                dets.extend(o.detections);
            }
            write_detections(&out.join(DETECTIONS_FILE), &dets)?;
            let path = out.join("iterate_stats.csv");
            let mut w = create(&path)?;
            let io = |e| Error::io(&path, e);
            writeln!(w, "iteration,changed,total,changed_fraction").map_err(io)?;
            for (i, (changed, total)) in totals.iter().enumerate() {
                let frac = if *total == 0 {
                    0.0
                } else {
                    *changed as f64 / *total as f64
                };
                writeln!(w, "{},{changed},{total},{frac}", i + 1).map_err(io)?;
            }
            w.flush().map_err(io)
        }
    }
}

fn check_classes(reg: &BoxRegressor, ds: &Dataset) -> Result<()> {
    if reg.classes.len() != ds.n_classes() {
        return Err(Error::Dimension(format!(
            "regressor has {} classes, dataset has {}",
            reg.classes.len(),
            ds.n_classes()
        )));
    }
    Ok(())
}
