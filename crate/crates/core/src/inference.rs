//! Tiled heatmap inference and the tumor-area decision rule.

use std::path::Path;

use image::{GrayImage, Luma, RgbImage};
use serde::{Deserialize, Serialize};

use crate::components::label_components;
use crate::error::{Error, Result};
use crate::model::{rgb_to_planes, SegModel, TUMOR_CHANNEL};
use crate::nn::{Graph, Tensor};
use crate::slide_io::{downscale, Rect, SectionLabel, SectionRecord, SlideBundle};

/// Decision rule parameters: probability threshold and minimum region area in µm².
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdPair {
    pub pred_t: f64,
    pub area_t: f64,
}

impl ThresholdPair {
    pub fn new(pred_t: f64, area_t: f64) -> Result<Self> {
        let t = Self { pred_t, area_t };
        t.validate()?;
        Ok(t)
    }

    /// `area_t = 0` is accepted: it means "any region counts".
    pub fn validate(&self) -> Result<()> {
        if !(self.pred_t > 0.0 && self.pred_t < 1.0) {
            return Err(Error::validation("pred_t", format!("must be in (0,1), got {}", self.pred_t)));
        }
        if !(self.area_t.is_finite() && self.area_t >= 0.0) {
            return Err(Error::validation("area_t", format!("must be a non-negative area, got {}", self.area_t)));
        }
        Ok(())
    }
}

/// Origins along one axis of length `len`: a stride of `patch - min_overlap`
/// plus a final position aligned with the far edge. Axes shorter than the
/// patch get a single origin at 0.
pub fn axis_positions(len: usize, patch: usize, min_overlap: usize) -> Result<Vec<usize>> {
    if patch == 0 || min_overlap >= patch || 2 * min_overlap < patch {
        return Err(Error::validation(
            "min_overlap",
            format!("need patch/2 <= min_overlap < patch, got {min_overlap} for patch {patch}"),
        ));
    }
    let mut out = vec![0];
    let mut pos = 0;
    while pos + patch < len {
        pos = (pos + patch - min_overlap).min(len - patch);
        out.push(pos);
    }
    Ok(out)
}

/// Patch origins covering a `width × height` box, row-major.
pub fn tile_positions(width: usize, height: usize, patch: usize, min_overlap: usize) -> Result<Vec<(usize, usize)>> {
    let xs = axis_positions(width, patch, min_overlap)?;
    let ys = axis_positions(height, patch, min_overlap)?;
    Ok(ys.iter().flat_map(|&y| xs.iter().map(move |&x| (x, y))).collect())
}

/// Stitched tumor probabilities over one section at inference scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    pub section_id: String,
    pub width: usize,
    pub height: usize,
    /// Row-major tumor probabilities.
    pub probs: Vec<f32>,
    /// Number of patches that contributed to each pixel.
    pub coverage: Vec<u32>,
    /// Microns per heatmap pixel.
    pub mpp_eff: f64,
    /// Section box in native slide pixels.
    pub bbox: Rect,
    pub model_id: String,
    pub truncate_level: Option<usize>,
}

impl Heatmap {
    pub fn constant(section_id: &str, width: usize, height: usize, p: f32, mpp_eff: f64) -> Self {
        Self {
            section_id: section_id.into(),
            width,
            height,
            probs: vec![p; width * height],
            coverage: vec![1; width * height],
            mpp_eff,
            bbox: Rect::new(0, 0, width, height),
            model_id: String::new(),
            truncate_level: None,
        }
    }
}

/// A slide downscaled once to inference magnification.
pub struct PreparedSlide {
    pub image: RgbImage,
    pub divisor: usize,
    pub mpp_eff: f64,
}

impl PreparedSlide {
    pub fn new(bundle: &SlideBundle, mag_divisor: usize) -> Result<Self> {
        if mag_divisor == 0 {
            return Err(Error::validation("mag_divisor", "must be at least 1"));
        }
        Ok(Self { image: downscale(&bundle.image, mag_divisor), divisor: mag_divisor, mpp_eff: bundle.mpp * mag_divisor as f64 })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferenceOptions {
    pub min_overlap: usize,
    /// Evaluate decoder blocks `0..=level` only.
    pub truncate: Option<usize>,
    pub batch_size: usize,
    pub model_id: String,
}

impl InferenceOptions {
    /// Half-patch overlap, full decoder.
    pub fn for_patch(patch: usize) -> Self {
        Self { min_overlap: patch / 2, truncate: None, batch_size: 8, model_id: String::new() }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct InferenceStats {
    pub patches: usize,
    /// Convolution multiply-accumulates evaluated.
    pub macs: u64,
}

/// Mean-blended heatmap of patch predictions over `section`.
pub fn predict_heatmap(
    model: &SegModel<f32>,
    slide: &PreparedSlide,
    section: &SectionRecord,
    opts: &InferenceOptions,
) -> Result<(Heatmap, InferenceStats)> {
    let p = model.config().patch_size;
    let (iw, ih) = (slide.image.width() as usize, slide.image.height() as usize);
    let bbox = section.bbox.downscaled(slide.divisor, iw, ih);
    let (bw, bh) = (bbox.width(), bbox.height());
    if bw == 0 || bh == 0 {
        return Err(Error::validation("bbox", format!("section {} vanishes at inference scale", section.section_id)));
    }
    let origins = tile_positions(bw, bh, p, opts.min_overlap)?;
    let mut sum = vec![0.0f32; bw * bh];
    let mut count = vec![0u32; bw * bh];
    let mut stats = InferenceStats::default();
    let batch = opts.batch_size.max(1);
    let mut rgb = Vec::with_capacity(p * p * 3);
    for chunk in origins.chunks(batch) {
        let mut planes: Vec<f32> = Vec::with_capacity(chunk.len() * 3 * p * p);
        for &(ox, oy) in chunk {
            rgb.clear();
            for j in 0..p {
                // reflect inside the section when it is smaller than the patch
                let y = bbox.y0 + mirror(oy + j, bh);
                for i in 0..p {
                    let x = bbox.x0 + mirror(ox + i, bw);
                    rgb.extend_from_slice(&slide.image.get_pixel(x as u32, y as u32).0);
                }
            }
            rgb_to_planes(&rgb, p, &mut planes);
        }
        let mut g = Graph::new();
        let x = g.input(Tensor::from_vec(&[chunk.len(), 3, p, p], planes)?);
        let probs = match opts.truncate {
            Some(level) => model.forward_truncated(&mut g, x, level)?,
            None => model.forward_eval(&mut g, x)?.final_probs,
        };
        stats.macs += g.macs();
        stats.patches += chunk.len();
        let data = g.value(probs).data();
        for (b, &(ox, oy)) in chunk.iter().enumerate() {
            let plane = &data[(b * 2 + TUMOR_CHANNEL) * p * p..][..p * p];
            for j in 0..p.min(bh - oy) {
                for i in 0..p.min(bw - ox) {
                    let o = (oy + j) * bw + ox + i;
                    sum[o] += plane[j * p + i];
                    count[o] += 1;
                }
            }
        }
    }
    let probs = sum.iter().zip(&count).map(|(&s, &c)| if c == 0 { 0.0 } else { s / c as f32 }).collect();
    let hm = Heatmap {
        section_id: section.section_id.clone(),
        width: bw,
        height: bh,
        probs,
        coverage: count,
        mpp_eff: slide.mpp_eff,
        bbox: section.bbox,
        model_id: opts.model_id.clone(),
        truncate_level: opts.truncate,
    };
    Ok((hm, stats))
}

fn mirror(i: usize, n: usize) -> usize {
    if n <= 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let i = i % period;
    if i >= n {
        period - i
    } else {
        i
    }
}

#[derive(Serialize, Deserialize)]
struct HeatmapSidecar {
    section_id: String,
    width: usize,
    height: usize,
    mpp_eff: f64,
    bbox: Rect,
    model_id: String,
    truncate_level: Option<usize>,
}

pub fn heatmap_png_name(section_id: &str) -> String {
    format!("heatmap_{section_id}.png")
}

/// Writes `heatmap_<id>.png` (8-bit, `round(p·255)`) and its JSON sidecar.
pub fn save_heatmap(hm: &Heatmap, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let img = GrayImage::from_fn(hm.width as u32, hm.height as u32, |x, y| {
        let p = hm.probs[y as usize * hm.width + x as usize];
        Luma([(p.clamp(0.0, 1.0) * 255.0).round() as u8])
    });
    let png = dir.join(heatmap_png_name(&hm.section_id));
    img.save(&png).map_err(|e| Error::corrupt(&png, e.to_string()))?;
    let side = HeatmapSidecar {
        section_id: hm.section_id.clone(),
        width: hm.width,
        height: hm.height,
        mpp_eff: hm.mpp_eff,
        bbox: hm.bbox,
        model_id: hm.model_id.clone(),
        truncate_level: hm.truncate_level,
    };
    let json = dir.join(format!("heatmap_{}.json", hm.section_id));
    let text = serde_json::to_string_pretty(&side).expect("sidecar serializes");
    std::fs::write(&json, text).map_err(|e| Error::io(&json, e))
}

/// Reads a heatmap written by [`save_heatmap`]; probabilities are quantized
/// to 1/255 and coverage is unknown (set to 1).
pub fn load_heatmap(dir: &Path, section_id: &str) -> Result<Heatmap> {
    let json = dir.join(format!("heatmap_{section_id}.json"));
    let text = std::fs::read_to_string(&json).map_err(|e| Error::io(&json, e))?;
    let side: HeatmapSidecar = serde_json::from_str(&text).map_err(|e| Error::corrupt(&json, e.to_string()))?;
    let png = dir.join(heatmap_png_name(section_id));
    let img = image::open(&png).map_err(|e| Error::corrupt(&png, e.to_string()))?.to_luma8();
    if (img.width() as usize, img.height() as usize) != (side.width, side.height) {
        return Err(Error::corrupt(&png, "dimensions disagree with the sidecar"));
    }
    Ok(Heatmap {
        section_id: side.section_id,
        width: side.width,
        height: side.height,
        probs: img.pixels().map(|p| p.0[0] as f32 / 255.0).collect(),
        coverage: vec![1; side.width * side.height],
        mpp_eff: side.mpp_eff,
        bbox: side.bbox,
        model_id: side.model_id,
        truncate_level: side.truncate_level,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Region {
    pub label: u32,
    pub area_px: usize,
    pub area_um2: f64,
    /// Box in heatmap pixels.
    pub bbox: Rect,
}

#[derive(Clone, Debug)]
pub struct RegionLabeling {
    pub width: usize,
    pub height: usize,
    /// 0 for background, otherwise the region label.
    pub labels: Vec<u32>,
    pub regions: Vec<Region>,
}

/// Foreground is `prob ≥ pred_t`; regions are 8-connected.
pub fn binarize_and_label(hm: &Heatmap, pred_t: f64) -> RegionLabeling {
    let mask: Vec<bool> = hm.probs.iter().map(|&p| p as f64 >= pred_t).collect();
    let comps = label_components(&mask, hm.width, hm.height);
    let px_area = hm.mpp_eff * hm.mpp_eff;
    let regions = comps
        .components
        .iter()
        .map(|c| Region { label: c.label, area_px: c.area, area_um2: c.area as f64 * px_area, bbox: c.bbox })
        .collect();
    RegionLabeling { width: hm.width, height: hm.height, labels: comps.labels, regions }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Classification {
    pub label: SectionLabel,
    pub surviving: Vec<Region>,
}

/// Drops regions smaller than `area_t` µm²; Tumor iff any region remains.
pub fn classify_section(labeling: &RegionLabeling, area_t: f64) -> Classification {
    let surviving: Vec<Region> = labeling.regions.iter().filter(|r| r.area_um2 >= area_t).cloned().collect();
    let label = if surviving.is_empty() { SectionLabel::Normal } else { SectionLabel::Tumor };
    Classification { label, surviving }
}

/// Heatmap, regions, and decision in one call.
pub fn classify_heatmap(hm: &Heatmap, thresholds: ThresholdPair) -> Classification {
    classify_section(&binarize_and_label(hm, thresholds.pred_t), thresholds.area_t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{EncoderKind, HeadKind, ModelConfig};

    #[test]
    fn axis_examples() {
        assert_eq!(axis_positions(768, 512, 256).unwrap(), vec![0, 256]);
        assert_eq!(axis_positions(512, 512, 256).unwrap(), vec![0]);
        assert_eq!(axis_positions(96, 64, 32).unwrap(), vec![0, 32]);
        assert_eq!(axis_positions(40, 64, 32).unwrap(), vec![0]);
        assert_eq!(axis_positions(1000, 512, 256).unwrap(), vec![0, 256, 488]);
        assert!(axis_positions(1000, 512, 200).is_err());
    }

    #[test]
    fn threshold_validation() {
        assert!(ThresholdPair::new(0.5, 0.0).is_ok());
        assert!(ThresholdPair::new(0.0, 10.0).is_err());
        assert!(ThresholdPair::new(0.5, -1.0).is_err());
    }

    fn block_heatmap(blocks: &[(usize, usize, usize)], size: usize, p: f32) -> Heatmap {
        let mut hm = Heatmap::constant("s", size, size, 0.0, 1.0);
        for &(x0, y0, side) in blocks {
            for y in y0..y0 + side {
                for x in x0..x0 + side {
                    hm.probs[y * size + x] = p;
                }
            }
        }
        hm
    }

    #[test]
    fn regions_and_areas() {
        assert!(binarize_and_label(&Heatmap::constant("s", 8, 8, 0.0, 1.0), 0.5).regions.is_empty());
        let hm = block_heatmap(&[(3, 3, 10)], 20, 0.9);
        let lab = binarize_and_label(&hm, 0.6);
        assert_eq!(lab.regions.len(), 1);
        assert_eq!(lab.regions[0].area_px, 100);
        assert_eq!(lab.regions[0].area_um2, 100.0);
        let diag = block_heatmap(&[(0, 0, 3), (3, 3, 3)], 8, 0.9);
        assert_eq!(binarize_and_label(&diag, 0.5).regions.len(), 1);
    }

    #[test]
    fn area_rule() {
        let lab = RegionLabeling { width: 0, height: 0, labels: vec![], regions: vec![] };
        assert_eq!(classify_section(&lab, 0.0).label, SectionLabel::Normal);
        let region = |a: f64| Region { label: 1, area_px: 0, area_um2: a, bbox: Rect::new(0, 0, 1, 1) };
        let lab = RegionLabeling { width: 0, height: 0, labels: vec![], regions: vec![region(3840.0)] };
        assert_eq!(classify_section(&lab, 3840.0).label, SectionLabel::Tumor);
        let lab = RegionLabeling { width: 0, height: 0, labels: vec![], regions: vec![region(100.0), region(5000.0)] };
        let c = classify_section(&lab, 3840.0);
        assert_eq!(c.label, SectionLabel::Tumor);
        assert_eq!(c.surviving.len(), 1);
    }

    #[test]
    fn heatmap_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut hm = block_heatmap(&[(1, 1, 2)], 5, 0.6);
        hm.section_id = "slide-000-s1".into();
        hm.mpp_eff = 2.0;
        save_heatmap(&hm, dir.path()).unwrap();
        let back = load_heatmap(dir.path(), "slide-000-s1").unwrap();
        assert_eq!(back.mpp_eff, 2.0);
        assert_eq!(back.probs[6], 153.0 / 255.0);
        assert_eq!(back.probs[0], 0.0);
    }

    fn section_fixture(w: u32, h: u32) -> (PreparedSlide, SectionRecord) {
        let img = RgbImage::from_fn(w, h, |x, y| image::Rgb([(x * 7 % 200) as u8, (y * 5 % 200) as u8, 120]));
        let slide = PreparedSlide { image: img, divisor: 1, mpp_eff: 1.0 };
        (slide, SectionRecord::new("s", Rect::new(0, 0, w as usize, h as usize)))
    }

    #[test]
    fn truncation_at_last_level_matches_full() {
        let cfg = ModelConfig::new(EncoderKind::Baseline, HeadKind::DeepSupervision, 3, 32, 0.125);
        let model = SegModel::<f32>::build(&cfg, 4).unwrap();
        let (slide, sec) = section_fixture(56, 40);
        let opts = InferenceOptions::for_patch(32);
        let (full, full_stats) = predict_heatmap(&model, &slide, &sec, &opts).unwrap();
        let last = InferenceOptions { truncate: Some(2), ..opts.clone() };
        let (trunc, _) = predict_heatmap(&model, &slide, &sec, &last).unwrap();
        assert!(full.probs.iter().zip(&trunc.probs).all(|(a, b)| (a - b).abs() <= 1e-6));
        let first = InferenceOptions { truncate: Some(0), ..opts };
        let (_, fast) = predict_heatmap(&model, &slide, &sec, &first).unwrap();
        assert!(fast.macs < full_stats.macs);
        assert!(full.coverage.iter().all(|&c| c >= 1));
        assert!(full.probs.iter().all(|p| (0.0..=1.0).contains(p)));
    }

    #[test]
    fn small_sections_use_one_reflected_patch() {
        let cfg = ModelConfig::new(EncoderKind::Baseline, HeadKind::Plain, 2, 16, 0.125);
        let model = SegModel::<f32>::build(&cfg, 0).unwrap();
        let (slide, sec) = section_fixture(10, 12);
        let (hm, stats) = predict_heatmap(&model, &slide, &sec, &InferenceOptions::for_patch(16)).unwrap();
        assert_eq!(stats.patches, 1);
        assert_eq!((hm.width, hm.height), (10, 12));
        assert!(hm.coverage.iter().all(|&c| c == 1));
    }

    #[test]
    fn mirror_indices() {
        let got: Vec<usize> = (0..9).map(|i| mirror(i, 4)).collect();
        assert_eq!(got, vec![0, 1, 2, 3, 2, 1, 0, 1, 2]);
    }
}
