//! Apply the training augmentation to one patch and save before/after images.
//!
//! cargo run --release --example augmentation -- [out_dir]

use std::path::PathBuf;

use histoseg::augment::{augment, AugmentConfig};
use histoseg::sampler::extract_patches;
use histoseg::synthetic::{generate_slide, SynthConfig};
use image::{GrayImage, RgbImage};

fn main() -> histoseg::Result<()> {
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("histoseg-augment"));
    std::fs::create_dir_all(&out).expect("create output directory");
    let cfg = SynthConfig { seed: 5, prevalence: 1.0, ..SynthConfig::default() };
    let patches = extract_patches(&generate_slide(&cfg, 0)?, 64, 32, 2)?;
    let patch = patches.iter().max_by(|a, b| a.spec.t.total_cmp(&b.spec.t)).expect("slide has tissue");
    println!("patch at ({}, {}) with {:.1}% tumor", patch.spec.x, patch.spec.y, patch.spec.t * 100.0);

    let save = |name: &str, img: &[u8], tgt: &[u8]| {
        RgbImage::from_raw(64, 64, img.to_vec()).unwrap().save(out.join(format!("{name}.png"))).unwrap();
        let mask: Vec<u8> = tgt.iter().map(|&t| t * 255).collect();
        GrayImage::from_raw(64, 64, mask).unwrap().save(out.join(format!("{name}_mask.png"))).unwrap();
    };
    save("original", &patch.image, &patch.target);

    let aug = AugmentConfig { probability: 1.0, ..AugmentConfig::default() };
    for seed in 0..4 {
        let (img, tgt) = augment(&patch.image, &patch.target, 64, &aug, seed);
        let area: usize = tgt.iter().map(|&t| t as usize).sum();
        println!("seed {seed}: tumor pixels {area}");
        save(&format!("augmented_{seed}"), &img, &tgt);
    }
    println!("images in {}", out.display());
    Ok(())
}
