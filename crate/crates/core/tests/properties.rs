use std::collections::VecDeque;

use proptest::prelude::*;

use histoseg::components::label_components;
use histoseg::inference::{axis_positions, binarize_and_label, classify_section, tile_positions, Heatmap};
use histoseg::slide_io::SectionLabel;

/// Independent 8-connected flood fill; returns a canonical partition.
fn flood_fill(mask: &[bool], w: usize, h: usize) -> Vec<Vec<usize>> {
    let mut seen = vec![false; mask.len()];
    let mut parts = Vec::new();
    for start in 0..mask.len() {
        if !mask[start] || seen[start] {
            continue;
        }
        let mut part = Vec::new();
        let mut queue = VecDeque::from([start]);
        seen[start] = true;
        while let Some(i) = queue.pop_front() {
            part.push(i);
            let (x, y) = ((i % w) as isize, (i / w) as isize);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (nx, ny) = (x + dx, y + dy);
                    if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                        continue;
                    }
                    let j = ny as usize * w + nx as usize;
                    if mask[j] && !seen[j] {
                        seen[j] = true;
                        queue.push_back(j);
                    }
                }
            }
        }
        part.sort_unstable();
        parts.push(part);
    }
    parts.sort();
    parts
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn components_match_flood_fill(w in 1usize..24, h in 1usize..24, density in 0.1f64..0.9, seed in any::<u64>()) {
        let mut state = seed | 1;
        let mask: Vec<bool> = (0..w * h)
            .map(|_| {
                state ^= state << 13;
                state ^= state >> 7;
                state ^= state << 17;
                (state % 1000) as f64 / 1000.0 < density
            })
            .collect();
        let comps = label_components(&mask, w, h);
        let mut ours: Vec<Vec<usize>> = comps.components.iter().map(|c| comps.pixels(c.label)).collect();
        for p in &mut ours {
            p.sort_unstable();
        }
        ours.sort();
        prop_assert_eq!(ours, flood_fill(&mask, w, h));
    }

    #[test]
    fn tiling_covers_with_enough_overlap(len in 1usize..600, patch in prop::sample::select(vec![16usize, 32, 64, 128]), frac in 0.5f64..0.95) {
        let overlap = ((patch as f64 * frac) as usize).clamp(patch / 2, patch - 1);
        let pos = axis_positions(len, patch, overlap).unwrap();
        prop_assert_eq!(pos[0], 0);
        if len <= patch {
            prop_assert_eq!(pos.len(), 1);
        } else {
            prop_assert_eq!(*pos.last().unwrap() + patch, len);
            for w in pos.windows(2) {
                prop_assert!(w[1] > w[0]);
                prop_assert!(w[0] + patch - w[1] >= overlap);
            }
        }
    }

    #[test]
    fn classification_is_monotone(probs in prop::collection::vec(0.0f32..1.0, 64), t in 0.05f64..0.9, a in 0.0f64..20.0, dt in 0.0f64..0.1, da in 0.0f64..10.0) {
        let mut hm = Heatmap::constant("s", 8, 8, 0.0, 1.0);
        hm.probs = probs;
        let lo = binarize_and_label(&hm, t);
        let hi = binarize_and_label(&hm, t + dt);
        let area = |l: &histoseg::inference::RegionLabeling| l.regions.iter().map(|r| r.area_px).sum::<usize>();
        prop_assert!(area(&hi) <= area(&lo));
        let normal_lo = classify_section(&lo, a).label == SectionLabel::Normal;
        prop_assert!(!normal_lo || classify_section(&lo, a + da).label == SectionLabel::Normal);
    }
}

#[test]
fn tile_grid_is_product_of_axes() {
    let tiles = tile_positions(768, 300, 512, 256).unwrap();
    assert_eq!(tiles, vec![(0, 0), (256, 0)]);
    assert_eq!(axis_positions(768, 512, 256).unwrap(), vec![0, 256]);
}
