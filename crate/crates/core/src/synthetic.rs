//! Seeded synthetic slides with exact ground truth.
//!
//! Each slide holds elliptical tissue sections laid out on a grid. Tumor blobs
//! are star-shaped polygons filled with dark, densely stippled "nuclei"; the
//! blob polygons are written verbatim as Tumornest annotations, so the
//! rasterized annotation mask equals the painted mask. Distractor rings share
//! the tumor's mean color but are smooth, so color alone cannot separate them.

use std::f64::consts::TAU;
use std::path::Path;

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::slide_io::{
    fill_polygon, is_simple_polygon, save_slide_bundle, Annotation, AnnotationClass, Rect, SectionLabel,
    SectionRecord, SlideBundle,
};

pub const MANIFEST_FILE: &str = "manifest.csv";

const NUCLEUS: [f64; 3] = [70.0, 35.0, 110.0];
const CYTOPLASM: [f64; 3] = [190.0, 130.0, 200.0];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    pub mpp: f64,
    pub magnification: f64,
    pub sections_per_slide: usize,
    /// Section ellipse diameter as a fraction of its grid cell, `[min, max]`.
    pub section_size: [f64; 2],
    /// Probability that a section contains tumor.
    pub prevalence: f64,
    pub max_tumor_blobs: usize,
    /// Blob radius in native pixels, `[min, max]`.
    pub tumor_radius: [f64; 2],
    /// Fraction of tumor pixels painted as nuclei.
    pub stipple_density: f64,
    /// Probability that a section receives distractor rings.
    pub distractor_prob: f64,
    pub max_distractors: usize,
    /// Outer ring radius in native pixels, `[min, max]`.
    pub distractor_radius: [f64; 2],
    pub tissue_color: [u8; 3],
    pub tissue_noise: f64,
    /// Background channels are drawn uniformly from this inclusive range.
    pub background: [u8; 2],
    pub val_fraction: f64,
    pub test_fraction: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            width: 640,
            height: 640,
            mpp: 1.0,
            magnification: 20.0,
            sections_per_slide: 4,
            section_size: [0.72, 0.9],
            prevalence: 0.5,
            max_tumor_blobs: 2,
            tumor_radius: [20.0, 38.0],
            stipple_density: 0.4,
            distractor_prob: 0.6,
            max_distractors: 2,
            distractor_radius: [14.0, 24.0],
            tissue_color: [232, 178, 205],
            tissue_noise: 6.0,
            background: [244, 252],
            val_fraction: 0.2,
            test_fraction: 0.4,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, reason: String| Err(Error::validation(field, reason));
        if self.width < 128 || self.height < 128 {
            return bad("width/height", format!("slide must be at least 128×128, got {}×{}", self.width, self.height));
        }
        if !(0.0..=1.0).contains(&self.prevalence) {
            return bad("prevalence", format!("must be in [0,1], got {}", self.prevalence));
        }
        if !(0.0..=1.0).contains(&self.distractor_prob) || !(0.0..=1.0).contains(&self.stipple_density) {
            return bad("distractor_prob/stipple_density", "must be in [0,1]".into());
        }
        if self.sections_per_slide == 0 {
            return bad("sections_per_slide", "must be at least 1".into());
        }
        if !(self.mpp > 0.0 && self.magnification > 0.0) {
            return bad("mpp/magnification", "must be positive".into());
        }
        for (name, r) in [
            ("section_size", self.section_size),
            ("tumor_radius", self.tumor_radius),
            ("distractor_radius", self.distractor_radius),
        ] {
            if !(r[0] > 0.0 && r[0] <= r[1] && r[1].is_finite()) {
                return bad(name, format!("needs 0 < min <= max, got {r:?}"));
            }
        }
        if self.section_size[1] > 1.0 {
            return bad("section_size", "cannot exceed the grid cell".into());
        }
        if self.background[0] > self.background[1] || self.background[0] < 241 {
            return bad("background", format!("range {:?} must lie in [241, 255]", self.background));
        }
        if !(self.val_fraction >= 0.0 && self.test_fraction >= 0.0 && self.val_fraction + self.test_fraction <= 1.0) {
            return bad("val_fraction/test_fraction", "fractions must be non-negative and sum to at most 1".into());
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    /// Contiguous split by slide index: train first, then validation, then test.
    pub fn of(index: usize, count: usize, val_fraction: f64, test_fraction: f64) -> Split {
        let n_test = (count as f64 * test_fraction).round() as usize;
        let n_val = (count as f64 * val_fraction).round() as usize;
        let n_train = count.saturating_sub(n_test + n_val);
        if index < n_train {
            Split::Train
        } else if index < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub slide_id: String,
    pub section_id: String,
    pub truth_label: SectionLabel,
    pub split: Split,
}

pub fn slide_id(index: usize) -> String {
    format!("slide-{index:03}")
}

struct Ellipse {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
}

impl Ellipse {
    fn norm(&self, x: f64, y: f64) -> f64 {
        ((x - self.cx) / self.a).powi(2) + ((y - self.cy) / self.b).powi(2)
    }
}

struct Disc {
    x: f64,
    y: f64,
    r: f64,
}

impl Disc {
    fn overlaps(&self, other: &Disc, gap: f64) -> bool {
        (self.x - other.x).hypot(self.y - other.y) < self.r + other.r + gap
    }
}

fn star_polygon(cx: f64, cy: f64, r: f64, scale: f64, radii: &[f64]) -> Vec<[i64; 2]> {
    let n = radii.len();
    (0..n)
        .map(|i| {
            let t = TAU * i as f64 / n as f64;
            let rr = r * radii[i] * scale;
            [(cx + rr * t.cos()).round() as i64, (cy + rr * t.sin()).round() as i64]
        })
        .collect()
}

fn circle_polygon(cx: f64, cy: f64, r: f64, n: usize) -> Vec<[i64; 2]> {
    (0..n)
        .map(|i| {
            let t = TAU * i as f64 / n as f64;
            [(cx + r * t.cos()).round() as i64, (cy + r * t.sin()).round() as i64]
        })
        .collect()
}

fn clamp_u8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

/// Generates slide `index` of the corpus described by `cfg`.
pub fn generate_slide(cfg: &SynthConfig, index: usize) -> Result<SlideBundle> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64);
    let (w, h) = (cfg.width, cfg.height);
    let id = slide_id(index);

    let mut image = RgbImage::new(w as u32, h as u32);
    for p in image.pixels_mut() {
        *p = Rgb([0, 1, 2].map(|_| rng.random_range(cfg.background[0]..=cfg.background[1])));
    }

    let cols = (cfg.sections_per_slide as f64).sqrt().ceil() as usize;
    let rows = cfg.sections_per_slide.div_ceil(cols);
    let (cell_w, cell_h) = (w as f64 / cols as f64, h as f64 / rows as f64);
    let tissue_noise = Normal::new(0.0, cfg.tissue_noise.max(1e-9)).expect("finite sigma");
    let smooth_noise = Normal::new(0.0, 4.0).expect("finite sigma");
    let tumor_mean: [f64; 3] =
        [0, 1, 2].map(|c| cfg.stipple_density * NUCLEUS[c] + (1.0 - cfg.stipple_density) * CYTOPLASM[c]);

    let mut annotations = Vec::new();
    let mut sections = Vec::new();
    for s in 0..cfg.sections_per_slide {
        let (col, row) = (s % cols, s / cols);
        let frac = rng.random_range(cfg.section_size[0]..=cfg.section_size[1]);
        let a = (cell_w * frac / 2.0 - 4.0).max(8.0);
        let b = (cell_h * rng.random_range(cfg.section_size[0]..=cfg.section_size[1]) / 2.0 - 4.0).max(8.0);
        let slack_x = (cell_w / 2.0 - a - 4.0).max(0.0);
        let slack_y = (cell_h / 2.0 - b - 4.0).max(0.0);
        let ell = Ellipse {
            cx: cell_w * (col as f64 + 0.5) + rng.random_range(-slack_x..=slack_x),
            cy: cell_h * (row as f64 + 0.5) + rng.random_range(-slack_y..=slack_y),
            a,
            b,
        };

        // tissue
        let x_lo = (ell.cx - a).floor().max(0.0) as usize;
        let x_hi = ((ell.cx + a).ceil() as usize + 1).min(w);
        let y_lo = (ell.cy - b).floor().max(0.0) as usize;
        let y_hi = ((ell.cy + b).ceil() as usize + 1).min(h);
        let mut bbox: Option<Rect> = None;
        for y in y_lo..y_hi {
            for x in x_lo..x_hi {
                if ell.norm(x as f64 + 0.5, y as f64 + 0.5) <= 1.0 {
                    let px = [0, 1, 2].map(|c| clamp_u8(cfg.tissue_color[c] as f64 + tissue_noise.sample(&mut rng)));
                    image.put_pixel(x as u32, y as u32, Rgb(px.map(|v| v.min(230))));
                    let r = bbox.get_or_insert(Rect::new(x, y, x + 1, y + 1));
                    r.x0 = r.x0.min(x);
                    r.y0 = r.y0.min(y);
                    r.x1 = r.x1.max(x + 1);
                    r.y1 = r.y1.max(y + 1);
                }
            }
        }
        let Some(bbox) = bbox else { continue };

        let mut discs: Vec<Disc> = Vec::new();
        let place = |rng: &mut ChaCha8Rng, r: f64, discs: &Vec<Disc>| -> Option<Disc> {
            for _ in 0..64 {
                let t = rng.random_range(0.0..TAU);
                let rho = rng.random_range(0.0f64..1.0).sqrt();
                let d = Disc { x: ell.cx + rho * a * t.cos(), y: ell.cy + rho * b * t.sin(), r };
                // keep the whole disc well inside the ellipse
                let inside = (0..16).all(|i| {
                    let u = TAU * i as f64 / 16.0;
                    ell.norm(d.x + 1.4 * r * u.cos(), d.y + 1.4 * r * u.sin()) <= 0.92
                });
                if inside && discs.iter().all(|o| !d.overlaps(o, 6.0)) {
                    return Some(d);
                }
            }
            None
        };

        let mut has_tumor = false;
        if cfg.max_tumor_blobs > 0 && rng.random_bool(cfg.prevalence) {
            let count = rng.random_range(1..=cfg.max_tumor_blobs);
            for blob in 0..count {
                let r = rng.random_range(cfg.tumor_radius[0]..=cfg.tumor_radius[1]);
                // the first blob shrinks until it fits so tumor sections always carry tumor
                let mut d = place(&mut rng, r, &discs);
                let mut shrink = r;
                while d.is_none() && blob == 0 && shrink > 6.0 {
                    shrink *= 0.8;
                    d = place(&mut rng, shrink, &discs);
                }
                let Some(d) = d else { continue };
                let n = rng.random_range(12..=18);
                let radii: Vec<f64> = (0..n).map(|_| rng.random_range(0.72..=1.0)).collect();
                let poly = star_polygon(d.x, d.y, d.r, 1.0, &radii);
                if !is_simple_polygon(&poly) {
                    continue;
                }
                let stroma = star_polygon(d.x, d.y, d.r, 1.35, &radii);
                let mut mask = vec![false; w * h];
                fill_polygon(&poly, (0.0, 0.0), 1.0, w, h, &mut mask);
                for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
                    let src = if rng.random_bool(cfg.stipple_density) { NUCLEUS } else { CYTOPLASM };
                    let px = src.map(|v| clamp_u8(v + smooth_noise.sample(&mut rng)));
                    image.put_pixel((i % w) as u32, (i / w) as u32, Rgb(px));
                }
                has_tumor = true;
                annotations.push(Annotation { cls: AnnotationClass::Tumornest, polygon: poly });
                if is_simple_polygon(&stroma) {
                    annotations.push(Annotation { cls: AnnotationClass::Stroma, polygon: stroma });
                }
                discs.push(d);
            }
        }

        if cfg.max_distractors > 0 && rng.random_bool(cfg.distractor_prob) {
            let count = rng.random_range(1..=cfg.max_distractors);
            for _ in 0..count {
                let r = rng.random_range(cfg.distractor_radius[0]..=cfg.distractor_radius[1]);
                let Some(d) = place(&mut rng, r, &discs) else { continue };
                let inner = r - rng.random_range(5.0..=8.0f64).min(r - 2.0);
                for y in (d.y - r).floor() as usize..=(d.y + r).ceil() as usize {
                    for x in (d.x - r).floor() as usize..=(d.x + r).ceil() as usize {
                        let dist = (x as f64 + 0.5 - d.x).hypot(y as f64 + 0.5 - d.y);
                        if dist < r && dist >= inner {
                            let px = tumor_mean.map(|v| clamp_u8(v + smooth_noise.sample(&mut rng)));
                            image.put_pixel(x as u32, y as u32, Rgb(px));
                        }
                    }
                }
                annotations.push(Annotation { cls: AnnotationClass::Normal, polygon: circle_polygon(d.x, d.y, r + 1.0, 24) });
                discs.push(d);
            }
        }

        let mut rec = SectionRecord::new(format!("{id}-s{s}"), bbox);
        rec.truth_label = Some(if has_tumor { SectionLabel::Tumor } else { SectionLabel::Normal });
        sections.push(rec);
    }

    let bundle = SlideBundle {
        slide_id: id,
        image,
        mpp: cfg.mpp,
        magnification: cfg.magnification,
        annotations,
        sections,
    };
    bundle.validate()?;
    Ok(bundle)
}

/// Writes `count` slide bundles under `out` plus a `manifest.csv` with one
/// row per section.
pub fn generate_dataset(cfg: &SynthConfig, count: usize, out: &Path) -> Result<Vec<ManifestRow>> {
    cfg.validate()?;
    let mut rows = Vec::new();
    for index in 0..count {
        let bundle = generate_slide(cfg, index)?;
        save_slide_bundle(&bundle, &out.join(&bundle.slide_id))?;
        let split = Split::of(index, count, cfg.val_fraction, cfg.test_fraction);
        for s in &bundle.sections {
            rows.push(ManifestRow {
                slide_id: bundle.slide_id.clone(),
                section_id: s.section_id.clone(),
                truth_label: s.truth_label.unwrap_or(SectionLabel::Normal),
                split,
            });
        }
    }
    write_manifest(out, &rows)?;
    Ok(rows)
}

pub fn write_manifest(dir: &Path, rows: &[ManifestRow]) -> Result<()> {
    let path = dir.join(MANIFEST_FILE);
    let mut w = csv::Writer::from_path(&path).map_err(|e| Error::corrupt(&path, e.to_string()))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::corrupt(&path, e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))
}

pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestRow>> {
    let path = dir.join(MANIFEST_FILE);
    let mut r = csv::Reader::from_path(&path).map_err(|e| Error::corrupt(&path, e.to_string()))?;
    r.deserialize().map(|row| row.map_err(|e| Error::corrupt(&path, e.to_string()))).collect()
}
