//! Flat `key = value` run configuration shared by every CLI subcommand.
//!
//! ```text
//! # desk-scale model
//! model.encoder = ResNet34
//! model.depth = 4
//! train.epochs = 12
//! ```
//!
//! Blank lines and `#` comments are ignored. Unknown keys are an error.
//! Ranges are written `lo,hi`; resampling multipliers as rationals (`30000/9537`).

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use num_rational::Ratio;

use crate::augment::AugmentConfig;
use crate::error::{Error, Result};
use crate::evaluation::{default_area_grid, default_pred_grid};
use crate::inference::InferenceOptions;
use crate::model::{EncoderKind, HeadKind, ModelConfig};
use crate::sampler::{Multipliers, Row};
use crate::synthetic::SynthConfig;
use crate::trainer::TrainConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub synth: SynthConfig,
    pub multipliers: Multipliers,
    /// Native pixels per model pixel.
    pub mag_divisor: usize,
    /// Grid stride of training patches, in model pixels.
    pub patch_stride: usize,
    pub min_overlap: usize,
    pub truncate: Option<usize>,
    pub infer_batch: usize,
    pub pred_t: f64,
    pub area_t: f64,
    pub beta: f64,
    pub top_n: usize,
    pub pred_grid: Vec<f64>,
    pub area_grid: Vec<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            synth: SynthConfig::default(),
            multipliers: Multipliers::default(),
            mag_divisor: 2,
            patch_stride: 256,
            min_overlap: 256,
            truncate: None,
            infer_batch: 8,
            pred_t: 0.5,
            area_t: 0.0,
            beta: 1.5,
            top_n: 5,
            pred_grid: default_pred_grid(),
            area_grid: default_area_grid(),
        }
    }
}

fn bad(key: &str, value: &str, why: impl std::fmt::Display) -> Error {
    Error::Config(format!("{key} = {value:?}: {why}"))
}

fn num<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e| bad(key, value, e))
}

fn list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    value.split(',').map(|v| num(key, v.trim())).collect()
}

fn pair<T: FromStr + Copy>(key: &str, value: &str) -> Result<[T; 2]>
where
    T::Err: std::fmt::Display,
{
    match list::<T>(key, value)?[..] {
        [a, b] => Ok([a, b]),
        _ => Err(bad(key, value, "expected two comma-separated values")),
    }
}

fn triple(key: &str, value: &str) -> Result<[u8; 3]> {
    match list::<u8>(key, value)?[..] {
        [a, b, c] => Ok([a, b, c]),
        _ => Err(bad(key, value, "expected three comma-separated values")),
    }
}

fn encoder(key: &str, value: &str) -> Result<EncoderKind> {
    match value {
        "ResNet34" => Ok(EncoderKind::ResNet34),
        "Baseline" => Ok(EncoderKind::Baseline),
        _ => Err(bad(key, value, "expected ResNet34 or Baseline")),
    }
}

fn head(key: &str, value: &str) -> Result<HeadKind> {
    match value {
        "Plain" => Ok(HeadKind::Plain),
        "DeepSupervision" => Ok(HeadKind::DeepSupervision),
        "LinearMerge" => Ok(HeadKind::LinearMerge),
        _ => Err(bad(key, value, "expected Plain, DeepSupervision or LinearMerge")),
    }
}

fn row_key(row: Row) -> &'static str {
    match row {
        Row::TumorFree => "sample.tumor_free",
        Row::Tumor => "sample.tumor",
        Row::TumorDense => "sample.tumor_dense",
        Row::Stroma => "sample.stroma",
        Row::Normal => "sample.normal",
    }
}

fn fmt_list(v: &[f64]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Every accepted key, in the order [`RunConfig::to_text`] writes them.
    pub fn keys() -> Vec<&'static str> {
        let mut keys = vec![
            "model.encoder",
            "model.head",
            "model.depth",
            "model.patch_size",
            "model.width",
            "model.focal_gamma",
            "train.epochs",
            "train.batch_size",
            "train.lr0",
            "train.lr_decay",
            "train.decay_every",
            "train.seed",
            "train.eval_batch",
            "train.adam_beta1",
            "train.adam_beta2",
            "train.adam_eps",
            "augment.rotation_deg",
            "augment.scale",
            "augment.blur_sigma",
            "augment.brightness",
            "augment.saturation",
            "augment.elastic_grid",
            "augment.elastic_sigma",
            "augment.probability",
            "synth.seed",
            "synth.width",
            "synth.height",
            "synth.mpp",
            "synth.magnification",
            "synth.sections_per_slide",
            "synth.section_size",
            "synth.prevalence",
            "synth.max_tumor_blobs",
            "synth.tumor_radius",
            "synth.stipple_density",
            "synth.distractor_prob",
            "synth.max_distractors",
            "synth.distractor_radius",
            "synth.tissue_color",
            "synth.tissue_noise",
            "synth.background",
            "synth.val_fraction",
            "synth.test_fraction",
        ];
        keys.extend(Row::ALL.iter().map(|&r| row_key(r)));
        keys.extend([
            "data.mag_divisor",
            "data.patch_stride",
            "infer.min_overlap",
            "infer.truncate",
            "infer.batch_size",
            "classify.pred_t",
            "classify.area_t",
            "select.beta",
            "select.top_n",
            "select.pred_grid",
            "select.area_grid",
        ]);
        keys
    }

    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let (m, t, s) = (&mut self.model, &mut self.train, &mut self.synth);
        match key {
            "model.encoder" => m.encoder = encoder(key, v)?,
            "model.head" => m.head = head(key, v)?,
            "model.depth" => m.depth = num(key, v)?,
            "model.patch_size" => m.patch_size = num(key, v)?,
            "model.width" => m.width = num(key, v)?,
            "model.focal_gamma" => m.focal_gamma = num(key, v)?,
            "train.epochs" => t.epochs = num(key, v)?,
            "train.batch_size" => t.batch_size = num(key, v)?,
            "train.lr0" => t.lr0 = num(key, v)?,
            "train.lr_decay" => t.lr_decay = num(key, v)?,
            "train.decay_every" => t.decay_every = num(key, v)?,
            "train.seed" => t.seed = num(key, v)?,
            "train.eval_batch" => t.eval_batch = num(key, v)?,
            "train.adam_beta1" => t.adam.beta1 = num(key, v)?,
            "train.adam_beta2" => t.adam.beta2 = num(key, v)?,
            "train.adam_eps" => t.adam.eps = num(key, v)?,
            "augment.rotation_deg" => t.augment.rotation_deg = pair(key, v)?,
            "augment.scale" => t.augment.scale = pair(key, v)?,
            "augment.blur_sigma" => t.augment.blur_sigma = pair(key, v)?,
            "augment.brightness" => t.augment.brightness = num(key, v)?,
            "augment.saturation" => t.augment.saturation = num(key, v)?,
            "augment.elastic_grid" => t.augment.elastic_grid = num(key, v)?,
            "augment.elastic_sigma" => t.augment.elastic_sigma = num(key, v)?,
            "augment.probability" => t.augment.probability = num(key, v)?,
            "synth.seed" => s.seed = num(key, v)?,
            "synth.width" => s.width = num(key, v)?,
            "synth.height" => s.height = num(key, v)?,
            "synth.mpp" => s.mpp = num(key, v)?,
            "synth.magnification" => s.magnification = num(key, v)?,
            "synth.sections_per_slide" => s.sections_per_slide = num(key, v)?,
            "synth.section_size" => s.section_size = pair(key, v)?,
            "synth.prevalence" => s.prevalence = num(key, v)?,
            "synth.max_tumor_blobs" => s.max_tumor_blobs = num(key, v)?,
            "synth.tumor_radius" => s.tumor_radius = pair(key, v)?,
            "synth.stipple_density" => s.stipple_density = num(key, v)?,
            "synth.distractor_prob" => s.distractor_prob = num(key, v)?,
            "synth.max_distractors" => s.max_distractors = num(key, v)?,
            "synth.distractor_radius" => s.distractor_radius = pair(key, v)?,
            "synth.tissue_color" => s.tissue_color = triple(key, v)?,
            "synth.tissue_noise" => s.tissue_noise = num(key, v)?,
            "synth.background" => s.background = pair(key, v)?,
            "synth.val_fraction" => s.val_fraction = num(key, v)?,
            "synth.test_fraction" => s.test_fraction = num(key, v)?,
            "data.mag_divisor" => self.mag_divisor = num(key, v)?,
            "data.patch_stride" => self.patch_stride = num(key, v)?,
            "infer.min_overlap" => self.min_overlap = num(key, v)?,
            "infer.truncate" => {
                self.truncate = if v == "none" { None } else { Some(num(key, v)?) };
            }
            "infer.batch_size" => self.infer_batch = num(key, v)?,
            "classify.pred_t" => self.pred_t = num(key, v)?,
            "classify.area_t" => self.area_t = num(key, v)?,
            "select.beta" => self.beta = num(key, v)?,
            "select.top_n" => self.top_n = num(key, v)?,
            "select.pred_grid" => self.pred_grid = list(key, v)?,
            "select.area_grid" => self.area_grid = list(key, v)?,
            _ => match Row::ALL.iter().find(|&&r| row_key(r) == key) {
                Some(&row) => {
                    let r: Ratio<u64> = num(key, v)?;
                    self.multipliers.set(row, r);
                }
                None => return Err(Error::Config(format!("unknown key {key:?}"))),
            },
        }
        Ok(())
    }

    /// Parses a config file's text on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got {raw:?}", n + 1)))?;
            self.set(k.trim(), v).map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Applies `key=value` overrides, e.g. from repeated `--set` flags.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o.split_once('=').ok_or_else(|| Error::Usage(format!("override {o:?} is not key=value")))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    /// Serializes every key; `parse(to_text())` reproduces the config.
    pub fn to_text(&self) -> String {
        let (m, t, a, s) = (&self.model, &self.train, &self.train.augment, &self.synth);
        let pair = |p: [f64; 2]| format!("{},{}", p[0], p[1]);
        let mut out = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        put("model.encoder", format!("{:?}", m.encoder));
        put("model.head", format!("{:?}", m.head));
        put("model.depth", m.depth.to_string());
        put("model.patch_size", m.patch_size.to_string());
        put("model.width", m.width.to_string());
        put("model.focal_gamma", m.focal_gamma.to_string());
        put("train.epochs", t.epochs.to_string());
        put("train.batch_size", t.batch_size.to_string());
        put("train.lr0", t.lr0.to_string());
        put("train.lr_decay", t.lr_decay.to_string());
        put("train.decay_every", t.decay_every.to_string());
        put("train.seed", t.seed.to_string());
        put("train.eval_batch", t.eval_batch.to_string());
        put("train.adam_beta1", t.adam.beta1.to_string());
        put("train.adam_beta2", t.adam.beta2.to_string());
        put("train.adam_eps", t.adam.eps.to_string());
        put("augment.rotation_deg", pair(a.rotation_deg));
        put("augment.scale", pair(a.scale));
        put("augment.blur_sigma", pair(a.blur_sigma));
        put("augment.brightness", a.brightness.to_string());
        put("augment.saturation", a.saturation.to_string());
        put("augment.elastic_grid", a.elastic_grid.to_string());
        put("augment.elastic_sigma", a.elastic_sigma.to_string());
        put("augment.probability", a.probability.to_string());
        put("synth.seed", s.seed.to_string());
        put("synth.width", s.width.to_string());
        put("synth.height", s.height.to_string());
        put("synth.mpp", s.mpp.to_string());
        put("synth.magnification", s.magnification.to_string());
        put("synth.sections_per_slide", s.sections_per_slide.to_string());
        put("synth.section_size", pair(s.section_size));
        put("synth.prevalence", s.prevalence.to_string());
        put("synth.max_tumor_blobs", s.max_tumor_blobs.to_string());
        put("synth.tumor_radius", pair(s.tumor_radius));
        put("synth.stipple_density", s.stipple_density.to_string());
        put("synth.distractor_prob", s.distractor_prob.to_string());
        put("synth.max_distractors", s.max_distractors.to_string());
        put("synth.distractor_radius", pair(s.distractor_radius));
        put("synth.tissue_color", format!("{},{},{}", s.tissue_color[0], s.tissue_color[1], s.tissue_color[2]));
        put("synth.tissue_noise", s.tissue_noise.to_string());
        put("synth.background", format!("{},{}", s.background[0], s.background[1]));
        put("synth.val_fraction", s.val_fraction.to_string());
        put("synth.test_fraction", s.test_fraction.to_string());
        for row in Row::ALL {
            put(row_key(row), self.multipliers.get(row).to_string());
        }
        put("data.mag_divisor", self.mag_divisor.to_string());
        put("data.patch_stride", self.patch_stride.to_string());
        put("infer.min_overlap", self.min_overlap.to_string());
        put("infer.truncate", self.truncate.map_or("none".into(), |l| l.to_string()));
        put("infer.batch_size", self.infer_batch.to_string());
        put("classify.pred_t", self.pred_t.to_string());
        put("classify.area_t", self.area_t.to_string());
        put("select.beta", self.beta.to_string());
        put("select.top_n", self.top_n.to_string());
        put("select.pred_grid", fmt_list(&self.pred_grid));
        put("select.area_grid", fmt_list(&self.area_grid));
        out
    }

    // `!(x > 0)` also rejects NaN
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.synth.validate()?;
        self.train.augment.validate()?;
        let t = &self.train;
        if t.epochs == 0 || t.batch_size == 0 || t.eval_batch == 0 {
            return Err(Error::validation("train", "epochs and batch sizes must be at least 1"));
        }
        if !(t.lr0 > 0.0) || !(t.lr_decay > 0.0) || t.decay_every == 0 {
            return Err(Error::validation("train", "lr0 and lr_decay must be positive, decay_every at least 1"));
        }
        if self.mag_divisor == 0 || self.patch_stride == 0 || self.infer_batch == 0 || self.top_n == 0 {
            return Err(Error::validation("config", "divisor, stride, batch size and top_n must be at least 1"));
        }
        let p = self.model.patch_size;
        if self.min_overlap * 2 < p || self.min_overlap >= p {
            return Err(Error::validation("infer.min_overlap", format!("must lie in [{}, {p})", p / 2)));
        }
        if let Some(l) = self.truncate {
            if l >= self.model.depth {
                return Err(Error::validation("infer.truncate", format!("level {l} needs depth > {l}")));
            }
        }
        crate::inference::ThresholdPair::new(self.pred_t, self.area_t)?;
        if !(self.beta > 0.0) {
            return Err(Error::validation("select.beta", "must be positive"));
        }
        Ok(())
    }

    pub fn inference(&self, model_id: impl Into<String>) -> InferenceOptions {
        InferenceOptions {
            min_overlap: self.min_overlap,
            truncate: self.truncate,
            batch_size: self.infer_batch,
            model_id: model_id.into(),
        }
    }

    pub fn augment(&self) -> &AugmentConfig {
        &self.train.augment
    }
}
