//! UNet variants for two-class (Normal / Tumor) segmentation.
//!
//! Both encoders open with a 7×7 stride-2 convolution. With `depth = k`
//! decoder blocks the encoder yields `k` feature maps at `P/2 .. P/2^k`; the
//! deepest is the bottleneck and the others feed skip connections. Decoder
//! block `ℓ` upsamples bilinearly by two, concatenates the matching encoder
//! map (the last block has none), and applies two 3×3 convolutions. Every
//! block carries a 1×1 score head; the head of the last block is the final
//! score map.

mod config;
mod loss;

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub use config::{EncoderKind, HeadKind, ModelConfig};
pub use loss::{deep_supervision_loss, downsample_target, focal_loss, linear_merge};

use crate::error::{Error, Result};
use crate::nn::{checkpoint, BatchStats, BufferId, Graph, ParamId, ParamStore, Scalar, Tensor, Var, BN_EPS, BN_MOMENTUM};

/// Index of the Tumor class in every probability map.
pub const TUMOR_CHANNEL: usize = 1;
pub const NUM_CLASSES: usize = 2;

const RESNET34_STAGES: [(usize, usize); 4] = [(3, 64), (4, 128), (6, 256), (3, 512)];
const STEM_CHANNELS: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Per-block score maps (logits), their softmax, and the final map.
#[derive(Clone, Debug)]
pub struct DecoderOutputs {
    pub score_maps: Vec<Var>,
    pub prob_maps: Vec<Var>,
    pub final_probs: Var,
}

#[derive(Clone, Debug)]
struct ConvBn {
    weight: ParamId,
    gamma: ParamId,
    beta: ParamId,
    running_mean: BufferId,
    running_var: BufferId,
    stride: usize,
    kernel: usize,
}

#[derive(Clone, Debug)]
struct BasicBlock {
    first: ConvBn,
    second: ConvBn,
    projection: Option<ConvBn>,
}

#[derive(Clone, Debug)]
enum Encoder {
    Baseline { stem: ConvBn, blocks: Vec<[ConvBn; 2]> },
    ResNet { stem: ConvBn, stages: Vec<Vec<BasicBlock>> },
}

#[derive(Clone, Debug)]
struct DecoderBlock {
    convs: [ConvBn; 2],
    has_skip: bool,
}

#[derive(Clone, Debug)]
struct ScoreHead {
    weight: ParamId,
    bias: ParamId,
}

struct Builder<'a, T> {
    store: &'a mut ParamStore<T>,
    rng: ChaCha8Rng,
}

impl<T: Scalar> Builder<'_, T> {
    fn he_normal(&mut self, shape: &[usize]) -> Tensor<T> {
        let fan_in: usize = shape[1..].iter().product();
        let dist = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
        let data = (0..shape.iter().product()).map(|_| T::of(dist.sample(&mut self.rng))).collect();
        Tensor::from_vec(shape, data).expect("shape matches")
    }

    fn conv_bn(&mut self, name: &str, c_in: usize, c_out: usize, kernel: usize, stride: usize) -> Result<ConvBn> {
        let w = self.he_normal(&[c_out, c_in, kernel, kernel]);
        Ok(ConvBn {
            weight: self.store.add(&format!("{name}.conv.w"), w)?,
            gamma: self.store.add(&format!("{name}.bn.gamma"), Tensor::full(&[c_out], T::one()))?,
            beta: self.store.add(&format!("{name}.bn.beta"), Tensor::zeros(&[c_out]))?,
            running_mean: self.store.add_buffer(&format!("{name}.bn.running_mean"), Tensor::zeros(&[c_out]))?,
            running_var: self.store.add_buffer(&format!("{name}.bn.running_var"), Tensor::full(&[c_out], T::one()))?,
            stride,
            kernel,
        })
    }

    fn head(&mut self, name: &str, c_in: usize) -> Result<ScoreHead> {
        let w = self.he_normal(&[NUM_CLASSES, c_in, 1, 1]);
        Ok(ScoreHead {
            weight: self.store.add(&format!("{name}.w"), w)?,
            bias: self.store.add(&format!("{name}.b"), Tensor::zeros(&[NUM_CLASSES]))?,
        })
    }
}

struct Ctx<'a, T> {
    g: &'a mut Graph<T>,
    store: &'a ParamStore<T>,
    mode: Mode,
    stats: Vec<(BufferId, BufferId, BatchStats<T>)>,
}

impl ConvBn {
    fn apply<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var, relu: bool) -> Result<Var> {
        let w = ctx.g.param(ctx.store, self.weight);
        let y = ctx.g.conv2d(x, w, self.stride, self.kernel / 2)?;
        let gamma = ctx.g.param(ctx.store, self.gamma);
        let beta = ctx.g.param(ctx.store, self.beta);
        let y = match ctx.mode {
            Mode::Train => {
                let (y, stats) = ctx.g.batch_norm_train(y, gamma, beta, BN_EPS)?;
                ctx.stats.push((self.running_mean, self.running_var, stats));
                y
            }
            Mode::Eval => ctx.g.batch_norm_eval(
                y,
                gamma,
                beta,
                ctx.store.buffer(self.running_mean).data(),
                ctx.store.buffer(self.running_var).data(),
                BN_EPS,
            )?,
        };
        Ok(if relu { ctx.g.relu(y) } else { y })
    }
}

impl BasicBlock {
    fn apply<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let a = self.first.apply(ctx, x, true)?;
        let b = self.second.apply(ctx, a, false)?;
        let shortcut = match &self.projection {
            Some(p) => p.apply(ctx, x, false)?,
            None => x,
        };
        let sum = ctx.g.add(b, shortcut)?;
        Ok(ctx.g.relu(sum))
    }
}

impl ScoreHead {
    fn apply<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let w = ctx.g.param(ctx.store, self.weight);
        let y = ctx.g.conv2d(x, w, 1, 0)?;
        let b = ctx.g.param(ctx.store, self.bias);
        ctx.g.bias_add(y, b)
    }
}

/// A built network together with its parameters.
#[derive(Clone, Debug)]
pub struct SegModel<T> {
    cfg: ModelConfig,
    store: ParamStore<T>,
    encoder: Encoder,
    decoder: Vec<DecoderBlock>,
    heads: Vec<ScoreHead>,
    merge: Option<ParamId>,
}

impl<T: Scalar> SegModel<T> {
    /// Builds the network and initializes its parameters from `seed`
    /// (He-normal convolutions, unit/zero batch-norm affine, merge weights `1/k`).
    pub fn build(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let k = cfg.depth;
        let mut store = ParamStore::new();
        let mut b = Builder { store: &mut store, rng: ChaCha8Rng::seed_from_u64(seed) };

        let stem_ch = cfg.channels(STEM_CHANNELS);
        let stem = b.conv_bn("enc.stem", 3, stem_ch, 7, 2)?;
        // channel counts of the k encoder feature maps, shallow to deep
        let mut feat_ch = vec![stem_ch];
        let (encoder, bottleneck_full) = match cfg.encoder {
            EncoderKind::Baseline => {
                let mut blocks = Vec::new();
                let mut c_in = stem_ch;
                for i in 1..k {
                    let c_out = cfg.channels(STEM_CHANNELS << i);
                    let first = b.conv_bn(&format!("enc.block{i}.0"), c_in, c_out, 3, 2)?;
                    let second = b.conv_bn(&format!("enc.block{i}.1"), c_out, c_out, 3, 1)?;
                    blocks.push([first, second]);
                    feat_ch.push(c_out);
                    c_in = c_out;
                }
                (Encoder::Baseline { stem, blocks }, STEM_CHANNELS << (k - 1))
            }
            EncoderKind::ResNet34 => {
                let mut stages = Vec::new();
                let mut c_in = stem_ch;
                let mut full = STEM_CHANNELS;
                for (s, &(count, width)) in RESNET34_STAGES.iter().take(k - 1).enumerate() {
                    let c_out = cfg.channels(width);
                    let mut blocks = Vec::new();
                    for j in 0..count {
                        let stride = if s > 0 && j == 0 { 2 } else { 1 };
                        let name = format!("enc.layer{}.{j}", s + 1);
                        let first = b.conv_bn(&format!("{name}.0"), c_in, c_out, 3, stride)?;
                        let second = b.conv_bn(&format!("{name}.1"), c_out, c_out, 3, 1)?;
                        let projection = if stride != 1 || c_in != c_out {
                            Some(b.conv_bn(&format!("{name}.proj"), c_in, c_out, 1, stride)?)
                        } else {
                            None
                        };
                        blocks.push(BasicBlock { first, second, projection });
                        c_in = c_out;
                    }
                    stages.push(blocks);
                    feat_ch.push(c_out);
                    full = width;
                }
                (Encoder::ResNet { stem, stages }, full)
            }
        };

        let mut decoder = Vec::new();
        let mut heads = Vec::new();
        let mut c_in = *feat_ch.last().expect("at least one feature map");
        for level in 0..k {
            let has_skip = level < k - 1;
            let skip_ch = if has_skip { feat_ch[k - 2 - level] } else { 0 };
            let c_out = ((bottleneck_full as f64 * cfg.width / (1u64 << (level + 1)) as f64).round() as usize).max(2);
            let first = b.conv_bn(&format!("dec.block{level}.0"), c_in + skip_ch, c_out, 3, 1)?;
            let second = b.conv_bn(&format!("dec.block{level}.1"), c_out, c_out, 3, 1)?;
            decoder.push(DecoderBlock { convs: [first, second], has_skip });
            heads.push(b.head(&format!("dec.block{level}.score"), c_out)?);
            c_in = c_out;
        }
        let merge = match cfg.head {
            HeadKind::LinearMerge => {
                Some(b.store.add("merge.w", Tensor::full(&[k], T::of(1.0 / k as f64)))?)
            }
            _ => None,
        };
        Ok(Self { cfg: cfg.clone(), store, encoder, decoder, heads, merge })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn merge_weights(&self) -> Option<&Tensor<T>> {
        self.merge.map(|id| &self.store.get(id).value)
    }

    pub fn set_merge_weights(&mut self, w: &[T]) -> Result<()> {
        let id = self.merge.ok_or_else(|| Error::Usage("model has no merge weights".into()))?;
        if w.len() != self.cfg.depth {
            return Err(Error::Shape(format!("{} merge weights for depth {}", w.len(), self.cfg.depth)));
        }
        self.store.value_mut(id).data_mut().copy_from_slice(w);
        Ok(())
    }

    fn check_input(&self, g: &Graph<T>, x: Var) -> Result<()> {
        let (_, c, h, w) = g.value(x).dims4()?;
        let p = self.cfg.patch_size;
        if c != 3 || h != p || w != p {
            return Err(Error::Shape(format!("expected N×3×{p}×{p} input, got {:?}", g.value(x).shape())));
        }
        Ok(())
    }

    fn encode(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Vec<Var>> {
        let mut feats = Vec::with_capacity(self.cfg.depth);
        match &self.encoder {
            Encoder::Baseline { stem, blocks } => {
                let mut cur = stem.apply(ctx, x, true)?;
                feats.push(cur);
                for [first, second] in blocks {
                    let a = first.apply(ctx, cur, true)?;
                    cur = second.apply(ctx, a, true)?;
                    feats.push(cur);
                }
            }
            Encoder::ResNet { stem, stages } => {
                let s = stem.apply(ctx, x, true)?;
                feats.push(s);
                let mut cur = ctx.g.max_pool(s, 3, 2, 1)?;
                for stage in stages {
                    for block in stage {
                        cur = block.apply(ctx, cur)?;
                    }
                    feats.push(cur);
                }
            }
        }
        Ok(feats)
    }

    /// Runs the encoder and decoder blocks `0..=last_level`, returning score maps.
    fn run(&self, ctx: &mut Ctx<'_, T>, x: Var, last_level: usize) -> Result<Vec<Var>> {
        let k = self.cfg.depth;
        let feats = self.encode(ctx, x)?;
        let mut cur = feats[k - 1];
        let mut scores = Vec::with_capacity(last_level + 1);
        for (level, block) in self.decoder.iter().enumerate().take(last_level + 1) {
            let size = self.cfg.level_size(level);
            let up = ctx.g.upsample(cur, size, size)?;
            let joined = if block.has_skip { ctx.g.concat_channels(up, feats[k - 2 - level])? } else { up };
            let a = block.convs[0].apply(ctx, joined, true)?;
            cur = block.convs[1].apply(ctx, a, true)?;
            scores.push(self.heads[level].apply(ctx, cur)?);
        }
        Ok(scores)
    }

    fn outputs(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<DecoderOutputs> {
        let k = self.cfg.depth;
        let score_maps = self.run(ctx, x, k - 1)?;
        let prob_maps = score_maps.iter().map(|&s| ctx.g.softmax_channels(s)).collect::<Result<Vec<_>>>()?;
        let final_probs = match self.merge {
            Some(id) => {
                let w = ctx.g.param(ctx.store, id);
                linear_merge(ctx.g, &score_maps, w, self.cfg.patch_size)?
            }
            None => prob_maps[k - 1],
        };
        Ok(DecoderOutputs { score_maps, prob_maps, final_probs })
    }

    /// Forward pass. In training mode batch statistics are used and the
    /// running estimates are updated.
    pub fn forward(&mut self, g: &mut Graph<T>, x: Var, mode: Mode) -> Result<DecoderOutputs> {
        self.check_input(g, x)?;
        let mut ctx = Ctx { g, store: &self.store, mode, stats: Vec::new() };
        let out = self.outputs(&mut ctx, x)?;
        let updates = std::mem::take(&mut ctx.stats);
        let m = T::of(BN_MOMENTUM);
        for (mean_id, var_id, stats) in updates {
            for (r, b) in self.store.buffer_mut(mean_id).data_mut().iter_mut().zip(&stats.mean) {
                *r = (T::one() - m) * *r + m * *b;
            }
            for (r, b) in self.store.buffer_mut(var_id).data_mut().iter_mut().zip(&stats.var) {
                *r = (T::one() - m) * *r + m * *b;
            }
        }
        Ok(out)
    }

    /// Inference-mode forward pass; does not touch the model.
    pub fn forward_eval(&self, g: &mut Graph<T>, x: Var) -> Result<DecoderOutputs> {
        self.check_input(g, x)?;
        let mut ctx = Ctx { g, store: &self.store, mode: Mode::Eval, stats: Vec::new() };
        self.outputs(&mut ctx, x)
    }

    /// Evaluates only decoder blocks `0..=level` and returns `ψ_level`
    /// bilinearly resized to the patch size. `level = depth - 1` returns the
    /// model's final map, identical to [`Self::forward_eval`].
    pub fn forward_truncated(&self, g: &mut Graph<T>, x: Var, level: usize) -> Result<Var> {
        self.check_input(g, x)?;
        let k = self.cfg.depth;
        if level >= k {
            return Err(Error::Usage(format!("truncation level {level} out of range for depth {k}")));
        }
        if level == k - 1 {
            return Ok(self.forward_eval(g, x)?.final_probs);
        }
        let mut ctx = Ctx { g, store: &self.store, mode: Mode::Eval, stats: Vec::new() };
        let scores = self.run(&mut ctx, x, level)?;
        let probs = ctx.g.softmax_channels(scores[level])?;
        let p = self.cfg.patch_size;
        ctx.g.upsample(probs, p, p)
    }

    /// Training loss for this model's head: focal loss on the final map, or the
    /// unweighted sum over all blocks for deep supervision.
    pub fn loss(&self, g: &mut Graph<T>, out: &DecoderOutputs, labels: &[u8]) -> Result<Var> {
        match self.cfg.head {
            HeadKind::DeepSupervision => deep_supervision_loss(g, &self.cfg, out, labels),
            HeadKind::Plain | HeadKind::LinearMerge => focal_loss(g, out.final_probs, labels, self.cfg.focal_gamma),
        }
    }

    pub fn config_json(&self) -> serde_json::Value {
        serde_json::to_value(&self.cfg).expect("config serializes")
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        checkpoint::save(dir, &self.store, self.config_json())
    }

    /// Rebuilds the architecture recorded in a checkpoint and loads its tensors.
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = checkpoint::read_manifest(dir)?;
        let cfg: ModelConfig = serde_json::from_value(manifest.model)
            .map_err(|e| Error::Checkpoint(format!("model config: {e}")))?;
        let mut model = Self::build(&cfg, 0)?;
        checkpoint::load_into(dir, &mut model.store)?;
        Ok(model)
    }

    /// Same architecture and weights in another precision.
    pub fn cast<U: Scalar>(&self) -> SegModel<U> {
        SegModel {
            cfg: self.cfg.clone(),
            store: self.store.cast(),
            encoder: self.encoder.clone(),
            decoder: self.decoder.clone(),
            heads: self.heads.clone(),
            merge: self.merge,
        }
    }
}

/// Converts interleaved RGB bytes (`P×P×3`) to a normalized `3×P×P` plane set.
pub fn rgb_to_planes<T: Scalar>(rgb: &[u8], size: usize, out: &mut Vec<T>) {
    let plane = size * size;
    let start = out.len();
    out.resize(start + 3 * plane, T::zero());
    for (i, px) in rgb.chunks_exact(3).enumerate().take(plane) {
        for c in 0..3 {
            out[start + c * plane + i] = T::of((px[c] as f64 / 255.0 - 0.5) / 0.25);
        }
    }
}
