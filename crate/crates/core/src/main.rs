//! `histoseg`: command-line entry point for every pipeline stage.
//!
//! Exit codes: 0 success, 1 invalid input or usage, 2 runtime failure.

use std::net::{IpAddr, SocketAddr};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use histoseg::config::RunConfig;
use histoseg::dataset::DataRoot;
use histoseg::evaluation::{metrics, write_score_table, ConfusionCounts};
use histoseg::inference::{load_heatmap, save_heatmap, ThresholdPair};
use histoseg::model::SegModel;
use histoseg::pipeline::{collect_patches, confusion, heatmap_dir, section_heatmaps, select_model, SelectOptions, SectionPrediction};
use histoseg::review::{read_predictions, LiveModel, ReviewService, ReviewState};
use histoseg::sampler::{build_resample_plan, pixel_unbalance, write_plan_csv};
use histoseg::slide_io::{load_slide_bundle, SectionLabel};
use histoseg::synthetic::{generate_dataset, Split};
use histoseg::trainer::{train, EpochReport};
use histoseg::{Error, Result};

#[derive(Parser)]
#[command(name = "histoseg", version = VERSION, about = "Tumor segmentation and section classification for slide images")]
struct Cli {
    /// Upper bound on worker threads (the service runtime; compute is single-threaded).
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

/// Crate version and the checkpoint format written by this build.
const VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), " (checkpoint format HSEG1)");

#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// Flat `key = value` config file; unset keys keep their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set train.epochs=3`. Repeatable; applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        cfg.apply_overrides(&self.set)?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic slide bundles and a manifest.
    Gen {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output data root.
        #[arg(long)]
        out: PathBuf,
        /// Number of slides.
        #[arg(long)]
        count: usize,
        /// Generator seed (overrides synth.seed).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a model on the train split, validating on the val split.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Data root with slide bundles and optionally a manifest.
        #[arg(long)]
        data: PathBuf,
        /// Output directory for checkpoints, epochs.json, plan.csv and run.conf.
        #[arg(long)]
        out: PathBuf,
        /// Number of epochs (overrides train.epochs).
        #[arg(long)]
        epochs: Option<usize>,
        /// Training seed (overrides train.seed).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Write tiled heatmaps for every section of one slide.
    Infer {
        #[command(flatten)]
        config: ConfigArgs,
        /// Checkpoint directory.
        #[arg(long)]
        model: PathBuf,
        /// Slide bundle directory.
        #[arg(long)]
        slide: PathBuf,
        /// Evaluate decoder blocks 0..=L only.
        #[arg(long, value_name = "L")]
        truncate: Option<usize>,
        /// Heatmap output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Label sections from their heatmaps and write predictions.csv.
    Classify {
        #[command(flatten)]
        config: ConfigArgs,
        /// Data root whose slides are classified.
        #[arg(long)]
        data: PathBuf,
        /// Root holding `<slide_id>/heatmaps/`; defaults to the data root.
        #[arg(long)]
        heatmaps: Option<PathBuf>,
        /// Probability threshold (overrides classify.pred_t).
        #[arg(long)]
        pred_t: Option<f64>,
        /// Area threshold in µm² (overrides classify.area_t).
        #[arg(long)]
        area_t: Option<f64>,
        /// thresholds.json from `select`; explicit thresholds take precedence.
        #[arg(long)]
        thresholds: Option<PathBuf>,
        /// Output CSV path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Pick the checkpoint and thresholds maximizing F_β on validation slides.
    Select {
        #[command(flatten)]
        config: ConfigArgs,
        /// Candidate checkpoint directory. Repeatable.
        #[arg(long, conflicts_with = "run")]
        model: Vec<PathBuf>,
        /// Training output directory; its top epochs by validation IoU become candidates.
        #[arg(long)]
        run: Option<PathBuf>,
        /// Data root; the val split is used if a manifest exists, otherwise every slide.
        #[arg(long)]
        val: PathBuf,
        /// F_β weight (overrides select.beta).
        #[arg(long)]
        beta: Option<f64>,
        /// Output thresholds.json; the score table goes next to it as scores.csv.
        #[arg(long)]
        out: PathBuf,
    },
    /// Section-level metrics of a predictions.csv against its truth labels.
    Metrics {
        /// predictions.csv from `classify`.
        #[arg(long)]
        predictions: PathBuf,
        /// Optional JSON output path; metrics are always printed.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Serve the label review HTTP API.
    Serve {
        /// Data root.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: IpAddr,
        /// predictions.csv supplying predicted labels.
        #[arg(long)]
        predictions: Option<PathBuf>,
        /// Root holding `<slide_id>/heatmaps/`; defaults to the data root.
        #[arg(long)]
        heatmaps: Option<PathBuf>,
        /// Checkpoint used to compute heatmaps that are not on disk.
        #[arg(long)]
        live_model: Option<PathBuf>,
        #[command(flatten)]
        config: ConfigArgs,
    },
}

#[derive(Serialize, Deserialize)]
struct ThresholdsFile {
    checkpoint: PathBuf,
    epoch: Option<usize>,
    pred_t: f64,
    area_t: f64,
    beta: f64,
    f_beta: f64,
}

#[derive(Serialize, Deserialize)]
struct PredictionCsvRow {
    slide_id: String,
    section_id: String,
    truth: Option<SectionLabel>,
    predicted: SectionLabel,
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    let text = serde_json::to_string_pretty(value).expect("serializable");
    std::fs::write(path, text + "\n").map_err(|e| io_err(path, e))
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io { path: path.to_path_buf(), source: e }
}

fn mkdir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen { config, out, count, seed } => {
            let mut cfg = config.load()?;
            if let Some(s) = seed {
                cfg.synth.seed = s;
            }
            cfg.synth.validate()?;
            let rows = generate_dataset(&cfg.synth, count, &out)?;
            let tumor = rows.iter().filter(|r| r.truth_label == SectionLabel::Tumor).count();
            eprintln!("{count} slides, {} sections ({tumor} tumor) in {}", rows.len(), out.display());
        }
        Command::Train { config, data, out, epochs, seed } => {
            let mut cfg = config.load()?;
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            cfg.validate()?;
            let root = DataRoot::open(&data)?;
            let (train_set, val_set) = (root.load_split(Split::Train)?, root.load_split(Split::Val)?);
            if train_set.is_empty() || val_set.is_empty() {
                return Err(Error::Usage("train needs slides in both the train and val splits".into()));
            }
            let p = cfg.model.patch_size;
            let patches = collect_patches(&train_set, p, cfg.patch_stride, cfg.mag_divisor)?;
            let val = collect_patches(&val_set, p, p, cfg.mag_divisor)?;
            let specs: Vec<_> = patches.iter().map(|t| t.spec.clone()).collect();
            let plan = build_resample_plan(&specs, &cfg.multipliers, cfg.train.seed)?;
            mkdir(&out)?;
            std::fs::write(out.join("run.conf"), cfg.to_text()).map_err(|e| io_err(&out, e))?;
            write_plan_csv(&out.join("plan.csv"), &specs, &plan)?;
            if let Ok(u) = pixel_unbalance(&specs, &plan.repetitions()) {
                eprintln!("{} patches, {} after resampling, pixel unbalance {u:.2}", specs.len(), plan.total());
            }
            let mut model = SegModel::<f32>::build(&cfg.model, cfg.train.seed)?;
            train(&mut model, &patches, &plan, &val, &cfg.train, Some(&out), |r| {
                eprintln!("epoch {:3}  loss {:.5}  val IoU {:.4}  {:.1}s", r.epoch, r.train_loss, r.val_iou, r.seconds)
            })?;
        }
        Command::Infer { config, model, slide, truncate, out } => {
            let mut cfg = config.load()?;
            let net = SegModel::<f32>::load(&model)?;
            cfg.model = net.config().clone();
            if truncate.is_some() {
                cfg.truncate = truncate;
            }
            if cfg.min_overlap >= cfg.model.patch_size {
                cfg.min_overlap = cfg.model.patch_size / 2;
            }
            cfg.validate()?;
            let bundle = load_slide_bundle(&slide)?;
            let opts = cfg.inference(model.display().to_string());
            let (maps, stats) = section_heatmaps(&net, std::slice::from_ref(&bundle), cfg.mag_divisor, &opts)?;
            for m in &maps {
                save_heatmap(&m.heatmap, &out)?;
            }
            eprintln!("{} heatmaps from {} patches in {}", maps.len(), stats.patches, out.display());
        }
        Command::Classify { config, data, heatmaps, pred_t, area_t, thresholds, out } => {
            let cfg = config.load()?;
            let mut tp = ThresholdPair { pred_t: cfg.pred_t, area_t: cfg.area_t };
            if let Some(path) = thresholds {
                let text = std::fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
                let t: ThresholdsFile = serde_json::from_str(&text).map_err(|e| Error::Corrupt { path, reason: e.to_string() })?;
                tp = ThresholdPair { pred_t: t.pred_t, area_t: t.area_t };
            }
            tp.pred_t = pred_t.unwrap_or(tp.pred_t);
            tp.area_t = area_t.unwrap_or(tp.area_t);
            tp.validate()?;
            let root = DataRoot::open(&data)?;
            let hm_root = heatmaps.unwrap_or_else(|| data.clone());
            let mut w = csv::Writer::from_path(&out).map_err(|e| Error::Corrupt { path: out.clone(), reason: e.to_string() })?;
            let mut n = 0;
            for id in root.all_ids() {
                let bundle = root.load(id)?;
                let dir = heatmap_dir(&hm_root, id);
                for s in &bundle.sections {
                    let hm = load_heatmap(&dir, &s.section_id)?;
                    let predicted = histoseg::inference::classify_heatmap(&hm, tp).label;
                    let row = PredictionCsvRow { slide_id: id.into(), section_id: s.section_id.clone(), truth: s.truth_label, predicted };
                    w.serialize(row).map_err(|e| Error::Corrupt { path: out.clone(), reason: e.to_string() })?;
                    n += 1;
                }
            }
            w.flush().map_err(|e| io_err(&out, e))?;
            eprintln!("{n} sections classified at pred_t {} area_t {}", tp.pred_t, tp.area_t);
        }
        Command::Select { config, model, run, val, beta, out } => {
            let mut cfg = config.load()?;
            if let Some(b) = beta {
                cfg.beta = b;
            }
            let reports: Vec<EpochReport> = match &run {
                Some(dir) => {
                    let path = dir.join("epochs.json");
                    let text = std::fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
                    serde_json::from_str(&text).map_err(|e| Error::Corrupt { path, reason: e.to_string() })?
                }
                // equal IoU: candidates are ranked in the order given
                None => model
                    .iter()
                    .enumerate()
                    .map(|(i, m)| EpochReport {
                        epoch: i,
                        train_loss: 0.0,
                        val_iou: 1.0,
                        checkpoint: Some(m.clone()),
                        seconds: 0.0,
                        steps: 0,
                        step_losses: vec![],
                    })
                    .collect(),
            };
            if reports.is_empty() {
                return Err(Error::Usage("select needs --model or --run".into()));
            }
            let first = reports.iter().find_map(|r| r.checkpoint.clone()).ok_or_else(|| Error::Usage("no checkpoints".into()))?;
            cfg.model = SegModel::<f32>::load(&first)?.config().clone();
            if cfg.min_overlap >= cfg.model.patch_size {
                cfg.min_overlap = cfg.model.patch_size / 2;
            }
            cfg.validate()?;
            let root = DataRoot::open(&val)?;
            let mut slides = root.load_split(Split::Val)?;
            if slides.is_empty() {
                slides = root.all_ids().into_iter().map(|id| root.load(id)).collect::<Result<_>>()?;
            }
            let opts = SelectOptions {
                top_n: if run.is_some() { cfg.top_n } else { model.len() },
                mag_divisor: cfg.mag_divisor,
                inference: cfg.inference(String::new()),
                pred_grid: cfg.pred_grid.clone(),
                area_grid: cfg.area_grid.clone(),
                beta: cfg.beta,
            };
            let sel = select_model(&reports, &slides, &opts)?;
            let scores = out.with_file_name("scores.csv");
            let epoch = run.is_some().then_some(sel.epoch);
            write_json(
                &out,
                &ThresholdsFile {
                    checkpoint: sel.checkpoint.clone(),
                    epoch,
                    pred_t: sel.thresholds.pred_t,
                    area_t: sel.thresholds.area_t,
                    beta: cfg.beta,
                    f_beta: sel.grid.best_row.f_beta,
                },
            )?;
            write_score_table(&scores, &sel.grid.table)?;
            eprintln!(
                "{}: pred_t {} area_t {} F {:.4}",
                sel.checkpoint.display(),
                sel.thresholds.pred_t,
                sel.thresholds.area_t,
                sel.grid.best_row.f_beta
            );
        }
        Command::Metrics { predictions, out } => {
            let mut r = csv::Reader::from_path(&predictions)
                .map_err(|e| Error::Corrupt { path: predictions.clone(), reason: e.to_string() })?;
            let mut preds = Vec::new();
            for row in r.deserialize::<PredictionCsvRow>() {
                let row = row.map_err(|e| Error::Corrupt { path: predictions.clone(), reason: e.to_string() })?;
                preds.push(SectionPrediction { slide_id: row.slide_id, section_id: row.section_id, truth: row.truth, predicted: row.predicted });
            }
            let counts: ConfusionCounts = confusion(&preds);
            let m = metrics(&counts)?;
            let report = serde_json::json!({ "counts": counts, "metrics": m });
            println!("{}", serde_json::to_string_pretty(&report).expect("serializable"));
            if let Some(path) = out {
                write_json(&path, &report)?;
            }
        }
        Command::Serve { data, port, host, predictions, heatmaps, live_model, config } => {
            let cfg = config.load()?;
            let preds = predictions.as_deref().map(read_predictions).transpose()?;
            let state = ReviewState::open(&data, preds.as_ref())?;
            let live = match live_model {
                Some(path) => {
                    let model = SegModel::<f32>::load(&path)?;
                    let p = model.config().patch_size;
                    let mut options = cfg.inference(path.display().to_string());
                    if options.min_overlap >= p || options.min_overlap * 2 < p {
                        options.min_overlap = p / 2;
                    }
                    Some(LiveModel { model, mag_divisor: cfg.mag_divisor, options })
                }
                None => None,
            };
            let service = Arc::new(ReviewService::new(state, heatmaps.unwrap_or_else(|| data.clone()), live));
            let rt = tokio::runtime::Builder::new_multi_thread()
                .worker_threads(cli.threads.max(1))
                .enable_all()
                .build()
                .map_err(|e| io_err(Path::new("tokio runtime"), e))?;
            rt.block_on(histoseg::review::serve(service, SocketAddr::new(host, port), |a| eprintln!("listening on http://{a}")))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() || matches!(e, Error::NotFound(_)) { 1 } else { 2 })
        }
    }
}
