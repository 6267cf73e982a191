//! Training patch extraction and class re-balancing.

use std::path::Path;

use num_rational::Ratio;
use num_traits::CheckedMul;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::slide_io::{detect_tissue, downscale, rasterize_annotations, AnnotationClass, Rect, SlideBundle, DEFAULT_BACKGROUND_THRESHOLD};

/// Pixel fraction separating tumor-free from tumor patches (0.05%).
pub const SPARSE_FRACTION: f64 = 0.0005;
/// Pixel fraction above which a patch counts as tumor-dense (10%).
pub const DENSE_FRACTION: f64 = 0.10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchSpec {
    pub slide_id: String,
    /// Origin in downscaled pixels.
    pub x: usize,
    pub y: usize,
    pub size: usize,
    /// Tumornest pixel fraction.
    pub t: f64,
    /// Stroma pixel fraction.
    pub s: f64,
    /// Normal pixel fraction.
    pub n: f64,
}

/// A patch with its pixels (`size × size × 3`, interleaved) and tumor target.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainPatch {
    pub spec: PatchSpec,
    pub image: Vec<u8>,
    pub target: Vec<u8>,
}

fn patch_grid(bundle: &SlideBundle, size: usize, stride: usize, mag_divisor: usize, keep_pixels: bool) -> Result<Vec<TrainPatch>> {
    if size == 0 || stride == 0 || stride > size {
        return Err(Error::validation("stride", format!("need 0 < stride <= patch size, got stride {stride}, size {size}")));
    }
    if mag_divisor == 0 {
        return Err(Error::validation("mag_divisor", "must be at least 1"));
    }
    let small = downscale(&bundle.image, mag_divisor);
    let (w, h) = (small.width() as usize, small.height() as usize);
    if size > w || size > h {
        return Ok(Vec::new());
    }
    let tissue = detect_tissue(&small, DEFAULT_BACKGROUND_THRESHOLD);
    // prefix sums so the tissue test per window is O(1)
    let mut integral = vec![0u32; (w + 1) * (h + 1)];
    for y in 0..h {
        let mut row = 0u32;
        for x in 0..w {
            row += u32::from(tissue.mask[y * w + x]);
            integral[(y + 1) * (w + 1) + x + 1] = integral[y * (w + 1) + x + 1] + row;
        }
    }
    let tissue_in = |x: usize, y: usize| {
        let at = |xx: usize, yy: usize| integral[yy * (w + 1) + xx];
        at(x + size, y + size) + at(x, y) - at(x + size, y) - at(x, y + size)
    };
    let scale = 1.0 / mag_divisor as f64;
    let mut out = Vec::new();
    for y in (0..=h - size).step_by(stride) {
        for x in (0..=w - size).step_by(stride) {
            if tissue_in(x, y) == 0 {
                continue;
            }
            let window = Rect::new(x * mag_divisor, y * mag_divisor, (x + size) * mag_divisor, (y + size) * mag_divisor);
            let raster = rasterize_annotations(&bundle.annotations, window, scale)?;
            let spec = PatchSpec {
                slide_id: bundle.slide_id.clone(),
                x,
                y,
                size,
                t: raster.fraction(AnnotationClass::Tumornest),
                s: raster.fraction(AnnotationClass::Stroma),
                n: raster.fraction(AnnotationClass::Normal),
            };
            let (image, target) = if keep_pixels {
                let mut pixels = Vec::with_capacity(size * size * 3);
                for yy in y..y + size {
                    for xx in x..x + size {
                        pixels.extend_from_slice(&small.get_pixel(xx as u32, yy as u32).0);
                    }
                }
                (pixels, raster.tumor_target())
            } else {
                (Vec::new(), Vec::new())
            };
            out.push(TrainPatch { spec, image, target });
        }
    }
    Ok(out)
}

/// Grid of `size × size` patches over the slide downscaled by `mag_divisor`,
/// keeping every position that touches tissue.
pub fn extract_patch_grid(bundle: &SlideBundle, size: usize, stride: usize, mag_divisor: usize) -> Result<Vec<PatchSpec>> {
    Ok(patch_grid(bundle, size, stride, mag_divisor, false)?.into_iter().map(|p| p.spec).collect())
}

/// Like [`extract_patch_grid`] but also returns pixels and tumor targets.
pub fn extract_patches(bundle: &SlideBundle, size: usize, stride: usize, mag_divisor: usize) -> Result<Vec<TrainPatch>> {
    patch_grid(bundle, size, stride, mag_divisor, true)
}

/// Re-sampling rows. A patch can match several rows.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Row {
    /// `t < 0.05%`
    TumorFree,
    /// `t ≥ 0.05%`
    Tumor,
    /// `t ≥ 10%`
    TumorDense,
    /// `s ≥ 0.05%`
    Stroma,
    /// `n ≥ 0.05%`
    Normal,
}

impl Row {
    pub const ALL: [Row; 5] = [Row::TumorFree, Row::Tumor, Row::TumorDense, Row::Stroma, Row::Normal];

    fn index(self) -> usize {
        self as usize
    }
}

/// Matching rows in [`Row::ALL`] order.
pub fn categorize(spec: &PatchSpec) -> Vec<Row> {
    Row::ALL
        .into_iter()
        .filter(|row| match row {
            Row::TumorFree => spec.t < SPARSE_FRACTION,
            Row::Tumor => spec.t >= SPARSE_FRACTION,
            Row::TumorDense => spec.t >= DENSE_FRACTION,
            Row::Stroma => spec.s >= SPARSE_FRACTION,
            Row::Normal => spec.n >= SPARSE_FRACTION,
        })
        .collect()
}

/// Patch counts per row in the reference training set, before re-sampling.
pub const REFERENCE_ROW_COUNTS: [u64; 5] = [175_771, 9_537, 5_528, 9_096, 9_458];
/// Per-row patch counts after re-sampling in the reference training set.
pub const REFERENCE_ROW_TARGETS: [u64; 5] = [175_771, 30_000, 10_000, 20_000, 20_000];

/// Exact per-row repetition multipliers, indexed like [`Row::ALL`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Multipliers(pub [Ratio<u64>; 5]);

impl Default for Multipliers {
    /// Target over count for each reference row.
    fn default() -> Self {
        Self(std::array::from_fn(|i| Ratio::new(REFERENCE_ROW_TARGETS[i], REFERENCE_ROW_COUNTS[i])))
    }
}

impl Multipliers {
    pub fn ones() -> Self {
        Self([Ratio::from_integer(1); 5])
    }

    pub fn get(&self, row: Row) -> Ratio<u64> {
        self.0[row.index()]
    }

    pub fn set(&mut self, row: Row, m: Ratio<u64>) {
        self.0[row.index()] = m;
    }

    /// Product of the multipliers of every matched row.
    pub fn for_rows(&self, rows: &[Row]) -> Result<Ratio<u64>> {
        rows.iter().try_fold(Ratio::from_integer(1u64), |acc, &r| {
            acc.checked_mul(&self.get(r))
                .ok_or_else(|| Error::validation("multipliers", "product overflows 64-bit rational"))
        })
    }

    /// Expected per-row totals when each row's patch count is scaled by its multiplier.
    pub fn row_targets(&self, counts: [u64; 5]) -> [Ratio<u64>; 5] {
        std::array::from_fn(|i| self.0[i] * Ratio::from_integer(counts[i]))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanEntry {
    /// Index into the patch list the plan was built from.
    pub index: usize,
    pub repetitions: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResamplePlan {
    pub multipliers: Multipliers,
    pub entries: Vec<PlanEntry>,
}

impl ResamplePlan {
    pub fn total(&self) -> u64 {
        self.entries.iter().map(|e| e.repetitions as u64).sum()
    }

    /// Patch indices with each repeated `repetitions` times, in patch order.
    pub fn expanded(&self) -> Vec<usize> {
        self.entries.iter().flat_map(|e| std::iter::repeat_n(e.index, e.repetitions as usize)).collect()
    }

    pub fn repetitions(&self) -> Vec<u32> {
        self.entries.iter().map(|e| e.repetitions).collect()
    }
}

/// Rounds `m` to `⌊m⌋ + 1` with probability `frac(m)`, else `⌊m⌋`.
pub fn stochastic_round(m: Ratio<u64>, rng: &mut impl Rng) -> u64 {
    let floor = m.to_integer();
    let frac = m.fract();
    if *frac.numer() == 0 {
        return floor;
    }
    // exact comparison: draw u uniformly in [0, den) and compare with num
    floor + u64::from(rng.random_range(0..*frac.denom()) < *frac.numer())
}

/// Each patch is repeated by the product of its matched rows' multipliers,
/// stochastically rounded with a generator seeded by `seed`.
pub fn build_resample_plan(specs: &[PatchSpec], multipliers: &Multipliers, seed: u64) -> Result<ResamplePlan> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::with_capacity(specs.len());
    for (index, spec) in specs.iter().enumerate() {
        let m = multipliers.for_rows(&categorize(spec))?;
        let reps = stochastic_round(m, &mut rng);
        entries.push(PlanEntry { index, repetitions: u32::try_from(reps).unwrap_or(u32::MAX) });
    }
    Ok(ResamplePlan { multipliers: *multipliers, entries })
}

/// Ratio of tumor-free to tumor pixels over patches weighted by repetition.
pub fn pixel_unbalance(specs: &[PatchSpec], repetitions: &[u32]) -> Result<f64> {
    if specs.len() != repetitions.len() {
        return Err(Error::Shape(format!("{} patches but {} repetition counts", specs.len(), repetitions.len())));
    }
    let (mut free, mut tumor) = (0.0, 0.0);
    for (s, &r) in specs.iter().zip(repetitions) {
        let px = (s.size * s.size) as f64 * r as f64;
        free += px * (1.0 - s.t);
        tumor += px * s.t;
    }
    if tumor <= 0.0 {
        return Err(Error::NoTumorPixels);
    }
    Ok(free / tumor)
}

#[derive(Serialize)]
struct PlanRow<'a> {
    slide_id: &'a str,
    x: usize,
    y: usize,
    t: f64,
    s: f64,
    n: f64,
    repetitions: u32,
}

pub fn write_plan_csv(path: &Path, specs: &[PatchSpec], plan: &ResamplePlan) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::corrupt(path, e.to_string()))?;
    for e in &plan.entries {
        let s = &specs[e.index];
        w.serialize(PlanRow { slide_id: &s.slide_id, x: s.x, y: s.y, t: s.t, s: s.s, n: s.n, repetitions: e.repetitions })
            .map_err(|err| Error::corrupt(path, err.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
