//! Generate a few synthetic slides and inspect their sections.
//!
//! cargo run --release --example generate_slides -- [out_dir]

use std::path::PathBuf;

use histoseg::slide_io::{detect_sections, detect_tissue, DEFAULT_BACKGROUND_THRESHOLD};
use histoseg::synthetic::{generate_dataset, generate_slide, SynthConfig};

fn main() -> histoseg::Result<()> {
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("histoseg-slides"));
    let cfg = SynthConfig { seed: 42, prevalence: 0.5, ..SynthConfig::default() };

    let slide = generate_slide(&cfg, 0)?;
    println!("{}: {}×{} px at {} µm/px", slide.slide_id, slide.width(), slide.height(), slide.mpp);
    for s in &slide.sections {
        println!("  {} bbox {:?} truth {:?}", s.section_id, s.bbox, s.truth_label);
    }
    println!("  {} annotation polygons", slide.annotations.len());

    // sections are recoverable from the pixels alone
    let tissue = detect_tissue(&slide.image, DEFAULT_BACKGROUND_THRESHOLD);
    let found = detect_sections(&tissue, 500);
    println!("  tissue covers {:.1}%, {} sections detected", tissue.coverage * 100.0, found.len());

    let rows = generate_dataset(&cfg, 6, &out)?;
    println!("wrote {} sections of 6 slides to {}", rows.len(), out.display());
    for r in rows.iter().filter(|r| r.section_id.ends_with("s0")) {
        println!("  {} {:?} {:?}", r.slide_id, r.split, r.truth_label);
    }
    Ok(())
}
