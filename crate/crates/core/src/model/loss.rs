use crate::error::{Error, Result};
use crate::model::{DecoderOutputs, HeadKind, ModelConfig};
use crate::nn::{Graph, Scalar, Var};

/// Focal loss of a probability map against integer class labels.
pub fn focal_loss<T: Scalar>(g: &mut Graph<T>, probs: Var, labels: &[u8], gamma: f64) -> Result<Var> {
    g.focal_loss(probs, labels, gamma)
}

/// Majority-vote block pooling of `n` label rasters of `size × size` by
/// `factor`. A window becomes Tumor (1) when at least half its pixels are.
pub fn downsample_target(labels: &[u8], n: usize, size: usize, factor: usize) -> Vec<u8> {
    assert!(factor >= 1 && size.is_multiple_of(factor), "factor {factor} must divide {size}");
    if factor == 1 {
        return labels.to_vec();
    }
    let out_size = size / factor;
    let mut out = vec![0u8; n * out_size * out_size];
    for s in 0..n {
        let src = &labels[s * size * size..(s + 1) * size * size];
        for oy in 0..out_size {
            for ox in 0..out_size {
                let mut tumor = 0usize;
                for y in oy * factor..(oy + 1) * factor {
                    tumor += src[y * size + ox * factor..y * size + (ox + 1) * factor]
                        .iter()
                        .filter(|&&v| v != 0)
                        .count();
                }
                out[(s * out_size + oy) * out_size + ox] = u8::from(2 * tumor >= factor * factor);
            }
        }
    }
    out
}

/// Unweighted sum over decoder blocks of the focal loss between `ψ_ℓ` and the
/// target pooled to that block's resolution.
pub fn deep_supervision_loss<T: Scalar>(
    g: &mut Graph<T>,
    cfg: &ModelConfig,
    out: &DecoderOutputs,
    labels: &[u8],
) -> Result<Var> {
    if cfg.head != HeadKind::DeepSupervision {
        return Err(Error::Usage(format!("deep supervision loss on a {:?} model", cfg.head)));
    }
    let p = cfg.patch_size;
    let n = labels.len() / (p * p);
    let mut total: Option<Var> = None;
    for (level, &probs) in out.prob_maps.iter().enumerate() {
        let size = cfg.level_size(level);
        let target = downsample_target(labels, n, p, p / size);
        let term = g.focal_loss(probs, &target, cfg.focal_gamma)?;
        total = Some(match total {
            Some(t) => g.add(t, term)?,
            None => term,
        });
    }
    total.ok_or_else(|| Error::Usage("no decoder outputs".into()))
}

/// `softmax(Σ_ℓ w_ℓ · up(ψ̂_ℓ))` with every score map resized to `size × size`.
pub fn linear_merge<T: Scalar>(g: &mut Graph<T>, score_maps: &[Var], w: Var, size: usize) -> Result<Var> {
    if g.value(w).len() != score_maps.len() {
        return Err(Error::Shape(format!(
            "linear merge: {} weights for {} score maps",
            g.value(w).len(),
            score_maps.len()
        )));
    }
    let upsampled = score_maps.iter().map(|&s| g.upsample(s, size, size)).collect::<Result<Vec<_>>>()?;
    let merged = g.weighted_sum(&upsampled, w)?;
    g.softmax_channels(merged)
}
