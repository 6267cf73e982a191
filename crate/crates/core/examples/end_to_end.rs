//! Synthetic slides → training → threshold selection → test classification.
//!
//! cargo run --release --example end_to_end -- [out_dir] [epochs]

use std::path::PathBuf;
use std::time::Instant;

use histoseg::evaluation::{default_area_grid, default_pred_grid, metrics};
use histoseg::inference::InferenceOptions;
use histoseg::model::{EncoderKind, HeadKind, ModelConfig, SegModel};
use histoseg::pipeline::{classify_all, collect_patches, confusion, section_heatmaps, select_model, SelectOptions};
use histoseg::sampler::{build_resample_plan, pixel_unbalance, Multipliers};
use histoseg::synthetic::{generate_dataset, Split, SynthConfig};
use histoseg::trainer::{train, TrainConfig};
use histoseg::dataset::DataRoot;

fn main() -> histoseg::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = args.next().map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("histoseg-e2e"));
    let epochs: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(12);
    let t0 = Instant::now();

    let synth = SynthConfig { seed: 7, val_fraction: 0.17, test_fraction: 0.4, ..SynthConfig::default() };
    let data = out.join("data");
    let rows = generate_dataset(&synth, 30, &data)?;
    println!("generated {} sections in {:.1}s", rows.len(), t0.elapsed().as_secs_f64());

    let root = DataRoot::open(&data)?;
    let (train_slides, val_slides, test_slides) =
        (root.load_split(Split::Train)?, root.load_split(Split::Val)?, root.load_split(Split::Test)?);

    let (patch, divisor) = (64, 2);
    let patches = collect_patches(&train_slides, patch, 32, divisor)?;
    let val_patches = collect_patches(&val_slides, patch, patch, divisor)?;
    let specs: Vec<_> = patches.iter().map(|p| p.spec.clone()).collect();
    let plan = build_resample_plan(&specs, &Multipliers::default(), 1)?;
    let ones = vec![1; specs.len()];
    println!(
        "{} patches, plan total {}, unbalance {:.2} -> {:.2}",
        patches.len(),
        plan.total(),
        pixel_unbalance(&specs, &ones)?,
        pixel_unbalance(&specs, &plan.repetitions())?
    );

    let cfg = ModelConfig::new(EncoderKind::ResNet34, HeadKind::DeepSupervision, 4, patch, 0.25);
    let mut model = SegModel::<f32>::build(&cfg, 3)?;
    let tcfg = TrainConfig { epochs, batch_size: 16, lr0: 1e-3, seed: 11, ..TrainConfig::default() };
    let ckpt = out.join("checkpoints");
    let reports = train(&mut model, &patches, &plan, &val_patches, &tcfg, Some(&ckpt), |r| {
        println!("epoch {:2}  loss {:.4}  val IoU {:.3}  {:.1}s", r.epoch, r.train_loss, r.val_iou, r.seconds)
    })?;

    let opts = SelectOptions {
        top_n: 5,
        mag_divisor: divisor,
        inference: InferenceOptions::for_patch(patch),
        pred_grid: default_pred_grid(),
        area_grid: default_area_grid(),
        beta: 1.5,
    };
    let sel = select_model(&reports, &val_slides, &opts)?;
    println!(
        "selected epoch {} pred_t {} area_t {} (val F {:.3})",
        sel.epoch, sel.thresholds.pred_t, sel.thresholds.area_t, sel.grid.best_row.f_beta
    );

    let best = SegModel::<f32>::load(&sel.checkpoint)?;
    let (maps, _) = section_heatmaps(&best, &test_slides, divisor, &opts.inference)?;
    let preds = classify_all(&maps, sel.thresholds);
    let m = metrics(&confusion(&preds))?;
    println!(
        "test: {} sections, accuracy {:.3}, sensitivity {:?}, specificity {:?}",
        preds.len(),
        m.accuracy,
        m.sensitivity,
        m.specificity
    );
    println!("total {:.1}s", t0.elapsed().as_secs_f64());
    Ok(())
}
