//! Train a small ResNet34-UNet with deep supervision for a few epochs.
//!
//! cargo run --release --example train_model -- [out_dir] [epochs]

use std::path::PathBuf;

use histoseg::model::{EncoderKind, HeadKind, ModelConfig, SegModel};
use histoseg::pipeline::collect_patches;
use histoseg::sampler::{build_resample_plan, Multipliers};
use histoseg::synthetic::{generate_slide, SynthConfig};
use histoseg::trainer::{lr_at, select_top_epochs, train, TrainConfig};

fn main() -> histoseg::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = args.next().map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("histoseg-train"));
    let epochs = args.next().and_then(|s| s.parse().ok()).unwrap_or(3);

    let synth = SynthConfig { seed: 1, ..SynthConfig::default() };
    let slides = (0..6).map(|i| generate_slide(&synth, i)).collect::<histoseg::Result<Vec<_>>>()?;
    let (train_slides, val_slides) = slides.split_at(5);
    let patches = collect_patches(train_slides, 64, 48, 2)?;
    let val = collect_patches(val_slides, 64, 64, 2)?;
    let specs: Vec<_> = patches.iter().map(|p| p.spec.clone()).collect();
    let plan = build_resample_plan(&specs, &Multipliers::default(), 0)?;
    println!("{} patches, {} per epoch after resampling, {} validation", patches.len(), plan.total(), val.len());

    let cfg = ModelConfig::new(EncoderKind::ResNet34, HeadKind::DeepSupervision, 4, 64, 0.25);
    let mut model = SegModel::<f32>::build(&cfg, 0)?;
    println!("{} parameters", model.params().num_scalars());
    let tcfg = TrainConfig { epochs, batch_size: 16, lr0: 1e-3, ..TrainConfig::default() };
    let reports = train(&mut model, &patches, &plan, &val, &tcfg, Some(&out), |r| {
        println!(
            "epoch {}  lr {:.2e}  loss {:.4}  val IoU {:.3}  {:.0}s",
            r.epoch,
            lr_at(r.epoch, &tcfg),
            r.train_loss,
            r.val_iou,
            r.seconds
        )
    })?;
    for r in select_top_epochs(&reports, 2) {
        println!("top epoch {} -> {}", r.epoch, r.checkpoint.as_ref().unwrap().display());
    }
    Ok(())
}
