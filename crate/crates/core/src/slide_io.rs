//! Slide bundles on disk, tissue and section detection, and polygon
//! annotation rasterization.
//!
//! A bundle is a directory holding `image.png`, `meta.json` and optionally
//! `annotations.json` and `sections.json`. Coordinates are native pixels and
//! boxes are half-open `[x0, x1) × [y0, y1)`.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::components::label_components;
use crate::error::{Error, Result};

pub const IMAGE_FILE: &str = "image.png";
pub const META_FILE: &str = "meta.json";
pub const ANNOTATIONS_FILE: &str = "annotations.json";
pub const SECTIONS_FILE: &str = "sections.json";

/// Smallest accepted slide edge.
pub const MIN_SLIDE_DIM: u32 = 64;
pub const DEFAULT_BACKGROUND_THRESHOLD: u8 = 240;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "[usize; 4]", into = "[usize; 4]")]
pub struct Rect {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl Rect {
    pub fn new(x0: usize, y0: usize, x1: usize, y1: usize) -> Self {
        Self { x0, y0, x1, y1 }
    }

    pub fn width(&self) -> usize {
        self.x1.saturating_sub(self.x0)
    }

    pub fn height(&self) -> usize {
        self.y1.saturating_sub(self.y0)
    }

    pub fn area(&self) -> usize {
        self.width() * self.height()
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }

    /// The box at `1/divisor` resolution, grown outward to whole pixels and
    /// clipped to `max_w × max_h`.
    pub fn downscaled(&self, divisor: usize, max_w: usize, max_h: usize) -> Rect {
        Rect {
            x0: (self.x0 / divisor).min(max_w),
            y0: (self.y0 / divisor).min(max_h),
            x1: self.x1.div_ceil(divisor).min(max_w),
            y1: self.y1.div_ceil(divisor).min(max_h),
        }
    }
}

impl From<[usize; 4]> for Rect {
    fn from(v: [usize; 4]) -> Self {
        Rect::new(v[0], v[1], v[2], v[3])
    }
}

impl From<Rect> for [usize; 4] {
    fn from(r: Rect) -> Self {
        [r.x0, r.y0, r.x1, r.y1]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AnnotationClass {
    Tumornest,
    Stroma,
    Normal,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SectionLabel {
    Tumor,
    Normal,
}

impl fmt::Display for SectionLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SectionLabel::Tumor => "Tumor",
            SectionLabel::Normal => "Normal",
        })
    }
}

impl FromStr for SectionLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "Tumor" => Ok(SectionLabel::Tumor),
            "Normal" => Ok(SectionLabel::Normal),
            other => Err(Error::validation("label", format!("expected Tumor or Normal, got {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    #[serde(rename = "class")]
    pub cls: AnnotationClass,
    pub polygon: Vec<[i64; 2]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SectionRecord {
    pub section_id: String,
    pub bbox: Rect,
    pub truth_label: Option<SectionLabel>,
    pub predicted_label: Option<SectionLabel>,
    pub corrected_label: Option<SectionLabel>,
}

impl SectionRecord {
    pub fn new(section_id: impl Into<String>, bbox: Rect) -> Self {
        Self { section_id: section_id.into(), bbox, truth_label: None, predicted_label: None, corrected_label: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Meta {
    slide_id: String,
    mpp: f64,
    magnification: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SlideBundle {
    pub slide_id: String,
    pub image: RgbImage,
    /// Microns per pixel at native resolution.
    pub mpp: f64,
    pub magnification: f64,
    pub annotations: Vec<Annotation>,
    pub sections: Vec<SectionRecord>,
}

impl SlideBundle {
    pub fn width(&self) -> usize {
        self.image.width() as usize
    }

    pub fn height(&self) -> usize {
        self.image.height() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let (w, h) = (self.image.width(), self.image.height());
        if w < MIN_SLIDE_DIM || h < MIN_SLIDE_DIM {
            return Err(Error::validation("image", format!("{w}×{h} is smaller than {MIN_SLIDE_DIM}×{MIN_SLIDE_DIM}")));
        }
        if !(self.mpp.is_finite() && self.mpp > 0.0) {
            return Err(Error::validation("mpp", format!("must be positive, got {}", self.mpp)));
        }
        if !self.magnification.is_finite() || self.magnification <= 0.0 {
            return Err(Error::validation("magnification", format!("must be positive, got {}", self.magnification)));
        }
        for (i, a) in self.annotations.iter().enumerate() {
            if a.polygon.len() < 3 {
                return Err(Error::validation(format!("annotations[{i}].polygon"), "needs at least 3 vertices"));
            }
            if let Some(v) = a.polygon.iter().find(|v| v[0] < 0 || v[1] < 0 || v[0] >= w as i64 || v[1] >= h as i64) {
                return Err(Error::validation(
                    format!("annotations[{i}].polygon"),
                    format!("vertex {v:?} outside [0,{w})×[0,{h})"),
                ));
            }
            if !is_simple_polygon(&a.polygon) {
                return Err(Error::validation(format!("annotations[{i}].polygon"), "self-intersecting"));
            }
        }
        for s in &self.sections {
            if s.bbox.area() == 0 || s.bbox.x1 > w as usize || s.bbox.y1 > h as usize {
                return Err(Error::validation(
                    format!("sections[{}].bbox", s.section_id),
                    format!("{:?} empty or outside the image", s.bbox),
                ));
            }
        }
        Ok(())
    }

    pub fn section(&self, section_id: &str) -> Option<&SectionRecord> {
        self.sections.iter().find(|s| s.section_id == section_id)
    }
}

fn segments_cross(a: [i64; 2], b: [i64; 2], c: [i64; 2], d: [i64; 2]) -> bool {
    fn orient(p: [i64; 2], q: [i64; 2], r: [i64; 2]) -> i64 {
        ((q[0] - p[0]) * (r[1] - p[1]) - (q[1] - p[1]) * (r[0] - p[0])).signum()
    }
    fn on_segment(p: [i64; 2], q: [i64; 2], r: [i64; 2]) -> bool {
        r[0] >= p[0].min(q[0]) && r[0] <= p[0].max(q[0]) && r[1] >= p[1].min(q[1]) && r[1] <= p[1].max(q[1])
    }
    let (o1, o2, o3, o4) = (orient(a, b, c), orient(a, b, d), orient(c, d, a), orient(c, d, b));
    if o1 != o2 && o3 != o4 && o1 != 0 && o2 != 0 && o3 != 0 && o4 != 0 {
        return true;
    }
    (o1 == 0 && on_segment(a, b, c))
        || (o2 == 0 && on_segment(a, b, d))
        || (o3 == 0 && on_segment(c, d, a))
        || (o4 == 0 && on_segment(c, d, b))
}

/// True when no two non-adjacent edges touch.
pub fn is_simple_polygon(poly: &[[i64; 2]]) -> bool {
    let n = poly.len();
    if n < 3 {
        return false;
    }
    for i in 0..n {
        let (a, b) = (poly[i], poly[(i + 1) % n]);
        for j in i + 1..n {
            if j == i + 1 || (i == 0 && j == n - 1) {
                continue;
            }
            if segments_cross(a, b, poly[j], poly[(j + 1) % n]) {
                return false;
            }
        }
    }
    true
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::corrupt(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_slide_bundle(dir: &Path) -> Result<SlideBundle> {
    let image_path = dir.join(IMAGE_FILE);
    let image = image::open(&image_path)
        .map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(&image_path, io),
            other => Error::corrupt(&image_path, other),
        })?
        .to_rgb8();
    let meta: Meta = read_json(&dir.join(META_FILE))?;
    let ann_path = dir.join(ANNOTATIONS_FILE);
    let annotations = if ann_path.exists() { read_json(&ann_path)? } else { Vec::new() };
    let sec_path = dir.join(SECTIONS_FILE);
    let sections = if sec_path.exists() { read_json(&sec_path)? } else { Vec::new() };
    let bundle = SlideBundle {
        slide_id: meta.slide_id,
        image,
        mpp: meta.mpp,
        magnification: meta.magnification,
        annotations,
        sections,
    };
    bundle.validate()?;
    Ok(bundle)
}

pub fn save_slide_bundle(bundle: &SlideBundle, dir: &Path) -> Result<()> {
    bundle.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let image_path = dir.join(IMAGE_FILE);
    bundle.image.save_with_format(&image_path, image::ImageFormat::Png).map_err(|e| Error::corrupt(&image_path, e))?;
    let meta = Meta { slide_id: bundle.slide_id.clone(), mpp: bundle.mpp, magnification: bundle.magnification };
    write_json(&dir.join(META_FILE), &meta)?;
    write_json(&dir.join(ANNOTATIONS_FILE), &bundle.annotations)?;
    write_json(&dir.join(SECTIONS_FILE), &bundle.sections)?;
    Ok(())
}

/// Rewrites only `sections.json` of an existing bundle directory.
pub fn save_sections(dir: &Path, sections: &[SectionRecord]) -> Result<()> {
    write_json(&dir.join(SECTIONS_FILE), &sections)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TissueMask {
    pub width: usize,
    pub height: usize,
    pub mask: Vec<bool>,
    pub coverage: f64,
}

impl TissueMask {
    pub fn from_mask(width: usize, height: usize, mask: Vec<bool>) -> Self {
        let count = mask.iter().filter(|&&m| m).count();
        let coverage = if mask.is_empty() { 0.0 } else { count as f64 / mask.len() as f64 };
        Self { width, height, mask, coverage }
    }
}

/// Marks a pixel as tissue when its darkest channel is below `background_threshold`.
pub fn detect_tissue(image: &RgbImage, background_threshold: u8) -> TissueMask {
    let mask = image.pixels().map(|p| p.0.iter().copied().min().unwrap_or(255) < background_threshold).collect();
    TissueMask::from_mask(image.width() as usize, image.height() as usize, mask)
}

/// One section per 8-connected tissue region of at least `min_section_area_px`
/// pixels, sorted by `(top, left)` of the tight bounding box.
pub fn detect_sections(tissue: &TissueMask, min_section_area_px: usize) -> Vec<SectionRecord> {
    let comps = label_components(&tissue.mask, tissue.width, tissue.height);
    let mut boxes: Vec<Rect> =
        comps.components.iter().filter(|c| c.area >= min_section_area_px).map(|c| c.bbox).collect();
    boxes.sort_by_key(|b| (b.y0, b.x0));
    boxes.into_iter().enumerate().map(|(i, b)| SectionRecord::new(format!("s{i:02}"), b)).collect()
}

/// Per-class membership over a window, one flag per output pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelRaster {
    pub width: usize,
    pub height: usize,
    pub tumornest: Vec<bool>,
    pub stroma: Vec<bool>,
    pub normal: Vec<bool>,
}

impl LabelRaster {
    fn empty(width: usize, height: usize) -> Self {
        let n = width * height;
        Self { width, height, tumornest: vec![false; n], stroma: vec![false; n], normal: vec![false; n] }
    }

    pub fn channel(&self, cls: AnnotationClass) -> &[bool] {
        match cls {
            AnnotationClass::Tumornest => &self.tumornest,
            AnnotationClass::Stroma => &self.stroma,
            AnnotationClass::Normal => &self.normal,
        }
    }

    fn channel_mut(&mut self, cls: AnnotationClass) -> &mut Vec<bool> {
        match cls {
            AnnotationClass::Tumornest => &mut self.tumornest,
            AnnotationClass::Stroma => &mut self.stroma,
            AnnotationClass::Normal => &mut self.normal,
        }
    }

    /// Single-label view where Tumornest beats Stroma beats Normal.
    pub fn dominant_class(&self, i: usize) -> Option<AnnotationClass> {
        if self.tumornest[i] {
            Some(AnnotationClass::Tumornest)
        } else if self.stroma[i] {
            Some(AnnotationClass::Stroma)
        } else if self.normal[i] {
            Some(AnnotationClass::Normal)
        } else {
            None
        }
    }

    /// Training target: 1 where Tumornest, 0 elsewhere.
    pub fn tumor_target(&self) -> Vec<u8> {
        self.tumornest.iter().map(|&t| u8::from(t)).collect()
    }

    pub fn fraction(&self, cls: AnnotationClass) -> f64 {
        let ch = self.channel(cls);
        if ch.is_empty() {
            return 0.0;
        }
        ch.iter().filter(|&&v| v).count() as f64 / ch.len() as f64
    }
}

/// Fills `out` (a `width × height` raster) with the even-odd interior of
/// `poly`, sampling at pixel centres. Raster pixel `(i, j)` maps to the
/// native point `origin + ((i + 0.5) / scale, (j + 0.5) / scale)`.
pub fn fill_polygon(poly: &[[i64; 2]], origin: (f64, f64), scale: f64, width: usize, height: usize, out: &mut [bool]) {
    let n = poly.len();
    let mut xs: Vec<f64> = Vec::with_capacity(n);
    for j in 0..height {
        let y = origin.1 + (j as f64 + 0.5) / scale;
        xs.clear();
        for e in 0..n {
            let (a, b) = (poly[e], poly[(e + 1) % n]);
            let (ay, by) = (a[1] as f64, b[1] as f64);
            if (ay <= y && y < by) || (by <= y && y < ay) {
                let t = (y - ay) / (by - ay);
                xs.push(a[0] as f64 + t * (b[0] as f64 - a[0] as f64));
            }
        }
        xs.sort_by(|p, q| p.total_cmp(q));
        for pair in xs.chunks_exact(2) {
            // raster columns whose centre lies in [pair[0], pair[1])
            let lo = ((pair[0] - origin.0) * scale - 0.5).ceil().max(0.0);
            let hi = ((pair[1] - origin.0) * scale - 0.5).ceil().min(width as f64);
            if hi <= lo {
                continue;
            }
            let row = &mut out[j * width..(j + 1) * width];
            row[lo as usize..hi as usize].fill(true);
        }
    }
}

/// Rasterizes annotations over `window` (native pixels) at `scale` output
/// pixels per native pixel. Polygons use the even-odd rule.
pub fn rasterize_annotations(annotations: &[Annotation], window: Rect, scale: f64) -> Result<LabelRaster> {
    if !(scale.is_finite() && scale > 0.0) {
        return Err(Error::validation("scale", format!("must be positive, got {scale}")));
    }
    let width = (window.width() as f64 * scale).round() as usize;
    let height = (window.height() as f64 * scale).round() as usize;
    let mut raster = LabelRaster::empty(width, height);
    let origin = (window.x0 as f64, window.y0 as f64);
    for a in annotations {
        let (min_x, max_x) = a.polygon.iter().fold((i64::MAX, i64::MIN), |(lo, hi), v| (lo.min(v[0]), hi.max(v[0])));
        let (min_y, max_y) = a.polygon.iter().fold((i64::MAX, i64::MIN), |(lo, hi), v| (lo.min(v[1]), hi.max(v[1])));
        if max_x < window.x0 as i64 || min_x > window.x1 as i64 || max_y < window.y0 as i64 || min_y > window.y1 as i64 {
            continue;
        }
        let mut layer = vec![false; width * height];
        fill_polygon(&a.polygon, origin, scale, width, height, &mut layer);
        for (dst, src) in raster.channel_mut(a.cls).iter_mut().zip(layer) {
            *dst |= src;
        }
    }
    Ok(raster)
}

/// Box-filter downscale by an integer factor; trailing partial blocks are dropped.
pub fn downscale(image: &RgbImage, divisor: usize) -> RgbImage {
    if divisor <= 1 {
        return image.clone();
    }
    let (w, h) = (image.width() as usize / divisor, image.height() as usize / divisor);
    let area = (divisor * divisor) as u32;
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let mut acc = [0u32; 3];
        for dy in 0..divisor {
            for dx in 0..divisor {
                let p = image.get_pixel(x * divisor as u32 + dx as u32, y * divisor as u32 + dy as u32);
                for (a, v) in acc.iter_mut().zip(p.0) {
                    *a += v as u32;
                }
            }
        }
        image::Rgb([0, 1, 2].map(|c| ((acc[c] + area / 2) / area) as u8))
    })
}
