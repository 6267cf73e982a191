//! Training loop: seeded shuffling and augmentation, Adam with step decay,
//! per-epoch validation IoU and checkpoints.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{augment, AugmentConfig};
use crate::error::{Error, Result};
use crate::evaluation::iou;
use crate::model::{rgb_to_planes, Mode, SegModel, TUMOR_CHANNEL};
use crate::nn::{AdamConfig, Graph, Tensor};
use crate::sampler::{ResamplePlan, TrainPatch};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    /// Learning rate factor applied every `decay_every` epochs.
    pub lr_decay: f64,
    pub decay_every: usize,
    pub seed: u64,
    pub augment: AugmentConfig,
    pub adam: AdamConfig,
    /// Batch size for validation forward passes; does not affect results.
    pub eval_batch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            batch_size: 64,
            lr0: 5e-4,
            lr_decay: 0.8,
            decay_every: 5,
            seed: 0,
            augment: AugmentConfig::default(),
            adam: AdamConfig::default(),
            eval_batch: 16,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 || self.eval_batch == 0 {
            return Err(Error::Config("batch sizes must be at least 1".into()));
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(Error::Config(format!("lr0 must be positive, got {}", self.lr0)));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) || self.decay_every == 0 {
            return Err(Error::Config("lr_decay must be in (0,1] and decay_every at least 1".into()));
        }
        self.augment.validate()
    }
}

/// `lr0 · lr_decay^⌊epoch / decay_every⌋`.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    cfg.lr0 * cfg.lr_decay.powi((epoch / cfg.decay_every) as i32)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    /// Sample-weighted mean of the batch losses.
    pub train_loss: f64,
    pub val_iou: f64,
    pub checkpoint: Option<PathBuf>,
    pub seconds: f64,
    pub steps: usize,
    pub step_losses: Vec<f64>,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Augmentation seed for the sample at `position` of `epoch`.
fn sample_seed(seed: u64, epoch: usize, position: usize) -> u64 {
    splitmix64(splitmix64(seed ^ (epoch as u64).rotate_left(32)) ^ position as u64)
}

fn stack(patches: &[&TrainPatch], size: usize) -> Result<(Tensor<f32>, Vec<u8>)> {
    let mut planes = Vec::with_capacity(patches.len() * 3 * size * size);
    let mut labels = Vec::with_capacity(patches.len() * size * size);
    for p in patches {
        rgb_to_planes(&p.image, size, &mut planes);
        labels.extend_from_slice(&p.target);
    }
    Ok((Tensor::from_vec(&[patches.len(), 3, size, size], planes)?, labels))
}

/// IoU of the tumor channel thresholded at 0.5 against the targets, over all
/// validation pixels together.
pub fn validation_iou(model: &SegModel<f32>, val: &[TrainPatch], batch: usize) -> Result<f64> {
    let size = model.config().patch_size;
    let (mut pred, mut truth) = (Vec::new(), Vec::new());
    for chunk in val.chunks(batch.max(1)) {
        let refs: Vec<&TrainPatch> = chunk.iter().collect();
        let (x, labels) = stack(&refs, size)?;
        let mut g = Graph::new();
        let xv = g.input(x);
        let out = model.forward_eval(&mut g, xv)?;
        let probs = g.value(out.final_probs).data();
        for b in 0..chunk.len() {
            pred.extend(probs[(b * 2 + TUMOR_CHANNEL) * size * size..][..size * size].iter().map(|&p| p >= 0.5));
        }
        truth.extend(labels.iter().map(|&l| l != 0));
    }
    iou(&pred, &truth)
}

/// Runs `cfg.epochs` epochs over the plan's expanded patch list.
/// Checkpoints go to `out/epoch-NNN` when `out` is given.
pub fn train(
    model: &mut SegModel<f32>,
    patches: &[TrainPatch],
    plan: &ResamplePlan,
    val: &[TrainPatch],
    cfg: &TrainConfig,
    out: Option<&Path>,
    mut on_epoch: impl FnMut(&EpochReport),
) -> Result<Vec<EpochReport>> {
    cfg.validate()?;
    let order = plan.expanded();
    if order.is_empty() {
        return Err(Error::validation("plan", "resample plan selects no patches"));
    }
    if val.is_empty() {
        return Err(Error::validation("val", "validation set is empty"));
    }
    if let Some(&bad) = order.iter().find(|&&i| i >= patches.len()) {
        return Err(Error::validation("plan", format!("patch index {bad} out of range")));
    }
    let size = model.config().patch_size;
    if let Some(p) = patches.iter().chain(val).find(|p| p.spec.size != size) {
        return Err(Error::Shape(format!("patch size {} does not match model patch size {size}", p.spec.size)));
    }

    let mut reports = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let lr = lr_at(epoch, cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64 + 1);
        let mut epoch_order = order.clone();
        epoch_order.shuffle(&mut rng);

        let (mut loss_sum, mut seen) = (0.0, 0usize);
        let mut step_losses = Vec::new();
        for (batch_index, batch) in epoch_order.chunks(cfg.batch_size).enumerate() {
            let augmented: Vec<TrainPatch> = batch
                .iter()
                .enumerate()
                .map(|(j, &i)| {
                    let p = &patches[i];
                    let seed = sample_seed(cfg.seed, epoch, batch_index * cfg.batch_size + j);
                    let (image, target) = augment(&p.image, &p.target, size, &cfg.augment, seed);
                    TrainPatch { spec: p.spec.clone(), image, target }
                })
                .collect();
            let refs: Vec<&TrainPatch> = augmented.iter().collect();
            let (x, labels) = stack(&refs, size)?;
            let mut g = Graph::new();
            let xv = g.input(x);
            let outputs = model.forward(&mut g, xv, Mode::Train)?;
            let loss = model.loss(&mut g, &outputs, &labels)?;
            let value = g.value(loss).item() as f64;
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: batch_index });
            }
            model.params_mut().zero_grad();
            g.backward_into(loss, model.params_mut())?;
            model.params_mut().adam_step(lr, cfg.adam);
            loss_sum += value * batch.len() as f64;
            seen += batch.len();
            step_losses.push(value);
        }

        let val_iou = validation_iou(model, val, cfg.eval_batch)?;
        let checkpoint = match out {
            Some(dir) => {
                let path = dir.join(format!("epoch-{epoch:03}"));
                model.save(&path)?;
                Some(path)
            }
            None => None,
        };
        let report = EpochReport {
            epoch,
            train_loss: loss_sum / seen as f64,
            val_iou,
            checkpoint,
            seconds: start.elapsed().as_secs_f64(),
            steps: step_losses.len(),
            step_losses,
        };
        on_epoch(&report);
        reports.push(report);
    }
    if let Some(dir) = out {
        let path = dir.join("epochs.json");
        let text = serde_json::to_string_pretty(&reports).expect("reports serialize");
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    }
    Ok(reports)
}

/// The `n` best epochs by validation IoU; ties go to the earlier epoch.
pub fn select_top_epochs(reports: &[EpochReport], n: usize) -> Vec<&EpochReport> {
    let mut sorted: Vec<&EpochReport> = reports.iter().collect();
    sorted.sort_by(|a, b| b.val_iou.total_cmp(&a.val_iou).then(a.epoch.cmp(&b.epoch)));
    sorted.truncate(n);
    sorted
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{EncoderKind, HeadKind, ModelConfig};
    use crate::sampler::{build_resample_plan, Multipliers, PatchSpec};

    #[test]
    fn schedule() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_at(0, &cfg), 5e-4);
        assert_eq!(lr_at(4, &cfg), 5e-4);
        assert!((lr_at(5, &cfg) - 4e-4).abs() < 1e-15);
        assert!((lr_at(39, &cfg) - 1.0486e-4).abs() < 1e-8);
        for e in 1..60 {
            let (prev, cur) = (lr_at(e - 1, &cfg), lr_at(e, &cfg));
            assert!(cur <= prev);
            assert_eq!(cur < prev, e % 5 == 0);
        }
    }

    fn report(epoch: usize, val_iou: f64) -> EpochReport {
        EpochReport { epoch, train_loss: 0.0, val_iou, checkpoint: None, seconds: 0.0, steps: 0, step_losses: vec![] }
    }

    #[test]
    fn top_epochs() {
        let r = vec![report(0, 0.1), report(1, 0.9), report(2, 0.5)];
        assert_eq!(select_top_epochs(&r, 5).len(), 3);
        assert_eq!(select_top_epochs(&r, 1)[0].epoch, 1);
        let tie = vec![report(0, 0.9), report(1, 0.9)];
        assert_eq!(select_top_epochs(&tie, 1)[0].epoch, 0);
    }

    fn toy_patches(n: usize, size: usize) -> Vec<TrainPatch> {
        (0..n)
            .map(|k| {
                let mut image = vec![0u8; size * size * 3];
                let mut target = vec![0u8; size * size];
                for y in 0..size {
                    for x in 0..size {
                        let tumor = (x + k) % size < size / 2;
                        let v = if tumor { [60, 30, 100] } else { [230, 180, 200] };
                        image[(y * size + x) * 3..][..3].copy_from_slice(&v);
                        target[y * size + x] = u8::from(tumor);
                    }
                }
                let spec = PatchSpec { slide_id: "toy".into(), x: k, y: 0, size, t: 0.5, s: 0.0, n: 0.0 };
                TrainPatch { spec, image, target }
            })
            .collect()
    }

    fn toy_model() -> SegModel<f32> {
        SegModel::build(&ModelConfig::new(EncoderKind::Baseline, HeadKind::DeepSupervision, 2, 16, 0.125), 1).unwrap()
    }

    fn quick_cfg(epochs: usize, batch_size: usize) -> TrainConfig {
        TrainConfig { epochs, batch_size, lr0: 1e-2, augment: AugmentConfig::identity(), ..TrainConfig::default() }
    }

    #[test]
    fn steps_per_epoch() {
        let patches = toy_patches(4, 16);
        let plan = build_resample_plan(&patches.iter().map(|p| p.spec.clone()).collect::<Vec<_>>(), &Multipliers::ones(), 0).unwrap();
        let mut model = toy_model();
        let reports = train(&mut model, &patches, &plan, &patches, &quick_cfg(1, 2), None, |_| {}).unwrap();
        assert_eq!(reports[0].steps, 2);
        let reports = train(&mut model, &patches, &plan, &patches, &quick_cfg(1, 3), None, |_| {}).unwrap();
        assert_eq!(reports[0].steps, 2);
    }

    #[test]
    fn loss_decreases_and_runs_repeat() {
        let patches = toy_patches(4, 16);
        let specs: Vec<_> = patches.iter().map(|p| p.spec.clone()).collect();
        let plan = build_resample_plan(&specs, &Multipliers::ones(), 0).unwrap();
        let cfg = TrainConfig { augment: AugmentConfig { probability: 0.5, ..AugmentConfig::default() }, ..quick_cfg(25, 2) };
        let run = || {
            let mut model = toy_model();
            train(&mut model, &patches, &plan, &patches, &cfg, None, |_| {}).unwrap()
        };
        let a = run();
        let steps: Vec<f64> = a.iter().flat_map(|r| r.step_losses.clone()).collect();
        assert_eq!(steps.len(), 50);
        assert!(steps[49] < steps[0], "{} -> {}", steps[0], steps[49]);
        let b = run();
        assert_eq!(a.iter().map(|r| &r.step_losses).collect::<Vec<_>>(), b.iter().map(|r| &r.step_losses).collect::<Vec<_>>());
        assert_eq!(a.iter().map(|r| r.val_iou).collect::<Vec<_>>(), b.iter().map(|r| r.val_iou).collect::<Vec<_>>());
    }

    #[test]
    fn checkpoint_reproduces_val_iou() {
        let dir = tempfile::tempdir().unwrap();
        let patches = toy_patches(4, 16);
        let specs: Vec<_> = patches.iter().map(|p| p.spec.clone()).collect();
        let plan = build_resample_plan(&specs, &Multipliers::ones(), 0).unwrap();
        let mut model = toy_model();
        let reports = train(&mut model, &patches, &plan, &patches, &quick_cfg(2, 2), Some(dir.path()), |_| {}).unwrap();
        let last = reports.last().unwrap();
        let loaded = SegModel::<f32>::load(last.checkpoint.as_ref().unwrap()).unwrap();
        assert_eq!(validation_iou(&loaded, &patches, 16).unwrap(), last.val_iou);
        assert!(dir.path().join("epochs.json").exists());
    }

    #[test]
    fn rejects_empty_inputs() {
        let patches = toy_patches(2, 16);
        let specs: Vec<_> = patches.iter().map(|p| p.spec.clone()).collect();
        let plan = build_resample_plan(&specs, &Multipliers::ones(), 0).unwrap();
        let mut model = toy_model();
        assert!(train(&mut model, &patches, &plan, &[], &quick_cfg(1, 2), None, |_| {}).is_err());
        let empty = ResamplePlan { multipliers: Multipliers::ones(), entries: vec![] };
        assert!(train(&mut model, &patches, &empty, &patches, &quick_cfg(1, 2), None, |_| {}).is_err());
    }
}
