//! F_β grid search over prediction and area thresholds.
//!
//! cargo run --release --example threshold_search

use histoseg::evaluation::{default_area_grid, default_pred_grid, grid_search, metrics, EvalCase};
use histoseg::inference::Heatmap;
use histoseg::slide_io::SectionLabel;

/// A section heatmap with one square blob of side `blob` at probability `p`.
fn section(id: usize, blob: usize, p: f32) -> Heatmap {
    let mut hm = Heatmap::constant(&format!("s{id}"), 80, 80, 0.05, 2.0);
    for y in 10..10 + blob {
        for x in 20..20 + blob {
            hm.probs[y * 80 + x] = p;
        }
    }
    hm
}

fn main() -> histoseg::Result<()> {
    let mut cases = Vec::new();
    // tumor sections: large confident blobs
    for i in 0..6 {
        cases.push(EvalCase { heatmap: section(i, 30 + 4 * i, 0.9), truth: SectionLabel::Tumor });
    }
    // normal sections: small or faint look-alikes
    for i in 0..6 {
        cases.push(EvalCase { heatmap: section(10 + i, 8 + 2 * i, 0.55 + 0.05 * i as f32), truth: SectionLabel::Normal });
    }
    let result = grid_search(&cases, &default_pred_grid(), &default_area_grid(), 1.5)?;
    let best = result.best_row;
    println!("best: pred_t {} area_t {} µm², F_β {:.3}", best.pred_t, best.area_t, best.f_beta);
    let m = metrics(&best.counts())?;
    println!("accuracy {:.3}, sensitivity {:?}, specificity {:?}", m.accuracy, m.sensitivity, m.specificity);
    println!("{} grid cells; first rows:", result.table.len());
    for row in result.table.iter().take(5) {
        println!("  {row:?}");
    }
    Ok(())
}
