//! Tiled heatmap inference over a slide's sections, full and truncated.
//!
//! cargo run --release --example tiled_inference -- [checkpoint_dir]
//!
//! Without a checkpoint an untrained model is used, which exercises tiling,
//! blending and the operation counts but yields meaningless probabilities.

use std::path::PathBuf;
use std::time::Instant;

use histoseg::inference::{
    classify_heatmap, predict_heatmap, save_heatmap, tile_positions, InferenceOptions, PreparedSlide, ThresholdPair,
};
use histoseg::model::{EncoderKind, HeadKind, ModelConfig, SegModel};
use histoseg::synthetic::{generate_slide, SynthConfig};

fn main() -> histoseg::Result<()> {
    let model = match std::env::args().nth(1) {
        Some(dir) => SegModel::<f32>::load(&PathBuf::from(dir))?,
        None => SegModel::build(&ModelConfig::new(EncoderKind::ResNet34, HeadKind::DeepSupervision, 4, 64, 0.25), 0)?,
    };
    let p = model.config().patch_size;
    println!("tiles for a 768-pixel box with P=512: {:?}", tile_positions(768, 100, 512, 256)?);

    let bundle = generate_slide(&SynthConfig { seed: 9, ..SynthConfig::default() }, 0)?;
    let slide = PreparedSlide::new(&bundle, 2)?;
    let out = std::env::temp_dir().join("histoseg-heatmaps");
    let tp = ThresholdPair::new(0.5, 1280.0)?;
    for level in [None, Some(0)] {
        let opts = InferenceOptions { truncate: level, ..InferenceOptions::for_patch(p) };
        let start = Instant::now();
        let mut macs = 0;
        for s in &bundle.sections {
            let (hm, stats) = predict_heatmap(&model, &slide, s, &opts)?;
            macs += stats.macs;
            let c = classify_heatmap(&hm, tp);
            println!(
                "  {:?} {}: {}×{} heatmap, {} patches, {:?} ({} regions kept), truth {:?}",
                level,
                s.section_id,
                hm.width,
                hm.height,
                stats.patches,
                c.label,
                c.surviving.len(),
                s.truth_label
            );
            if level.is_none() {
                save_heatmap(&hm, &out)?;
            }
        }
        println!("truncate {level:?}: {:.2} GMAC in {:.2}s", macs as f64 / 1e9, start.elapsed().as_secs_f64());
    }
    println!("heatmaps in {}", out.display());
    Ok(())
}
