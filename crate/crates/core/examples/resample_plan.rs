//! Patch extraction and class-balancing resampling.
//!
//! cargo run --release --example resample_plan

use histoseg::sampler::{
    build_resample_plan, categorize, extract_patch_grid, pixel_unbalance, Multipliers, Row, REFERENCE_ROW_COUNTS,
};
use histoseg::synthetic::{generate_slide, SynthConfig};

fn main() -> histoseg::Result<()> {
    // the reference multipliers reproduce the published per-row targets
    let m = Multipliers::default();
    let targets = m.row_targets(REFERENCE_ROW_COUNTS);
    for (row, (count, target)) in Row::ALL.iter().zip(REFERENCE_ROW_COUNTS.iter().zip(targets)) {
        println!("{row:?}: {count} × {} = {target}", m.get(*row));
    }
    println!("total {}", targets.iter().map(|t| t.to_integer()).sum::<u64>());

    let cfg = SynthConfig { seed: 3, ..SynthConfig::default() };
    let mut specs = Vec::new();
    for i in 0..8 {
        specs.extend(extract_patch_grid(&generate_slide(&cfg, i)?, 64, 32, 2)?);
    }
    let mut per_row = [0usize; 5];
    for s in &specs {
        for r in categorize(s) {
            per_row[r as usize] += 1;
        }
    }
    println!("\n{} patches; per row {per_row:?}", specs.len());

    let plan = build_resample_plan(&specs, &m, 0)?;
    let before = pixel_unbalance(&specs, &vec![1; specs.len()])?;
    let after = pixel_unbalance(&specs, &plan.repetitions())?;
    println!("plan: {} samples per epoch, pixel unbalance {before:.2} -> {after:.2}", plan.total());
    Ok(())
}
