//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Run with `cargo test --release --test acceptance`. Every oracle below is
//! written independently of the library code it checks.

use std::collections::VecDeque;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use histoseg::components::label_components;
use histoseg::evaluation::{default_area_grid, default_pred_grid, grid_search, metrics, EvalCase};
use histoseg::inference::{
    axis_positions, binarize_and_label, classify_section, save_heatmap, tile_positions, Heatmap,
    InferenceOptions, ThresholdPair,
};
use histoseg::model::{EncoderKind, HeadKind, Mode, ModelConfig, SegModel};
use histoseg::nn::{focal_loss_value, Graph, Tensor};
use histoseg::pipeline::{classify_all, collect_patches, confusion, section_heatmaps, select_model, SelectOptions};
use histoseg::sampler::{build_resample_plan, pixel_unbalance, Multipliers, REFERENCE_ROW_COUNTS};
use histoseg::slide_io::SectionLabel;
use histoseg::synthetic::{generate_dataset, Split, SynthConfig};
use histoseg::trainer::{train, TrainConfig};
use histoseg::dataset::DataRoot;

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn lib<T>(r: histoseg::Result<T>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

// ---------------------------------------------------------------- 1

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Values bounded away from 0 and from each other, so ReLU and max-pool are
/// differentiable at every point the finite difference visits.
fn spaced_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut vals: Vec<f64> = (0..n).map(|i| (i as f64 + 0.5 - n as f64 / 2.0) * 0.05).collect();
    for i in (1..n).rev() {
        vals.swap(i, rng.random_range(0..=i));
    }
    Tensor::from_vec(shape, vals).unwrap()
}

type LayerFn = dyn Fn(&mut Graph<f64>, &[histoseg::nn::Var]) -> histoseg::Result<histoseg::nn::Var>;

/// `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)` over all inputs, for
/// the scalar `Σ R ⊙ layer(inputs)` with a fixed random `R`.
fn layer_gradient_error(inputs: &[Tensor<f64>], layer: &LayerFn, seed: u64) -> Result<f64, String> {
    let eval = |vals: &[Tensor<f64>], with_grad: bool| -> histoseg::Result<(Graph<f64>, Vec<histoseg::nn::Var>, histoseg::nn::Var)> {
        let mut g = Graph::new();
        let vars: Vec<_> =
            vals.iter().map(|t| if with_grad { g.input_with_grad(t.clone()) } else { g.input(t.clone()) }).collect();
        let out = layer(&mut g, &vars)?;
        let shape = g.value(out).shape().to_vec();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = g.input(rand_tensor(&mut rng, &shape, -1.0, 1.0));
        let prod = if shape.len() == 4 { g.mul(out, r)? } else { out };
        let loss = g.sum(prod);
        Ok((g, vars, loss))
    };
    let (g, vars, loss) = lib(eval(inputs, true))?;
    let grads = lib(g.backward(loss))?;
    let (mut diff, mut na, mut nn) = (0.0f64, 0.0f64, 0.0f64);
    let h = 1e-6;
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads.wrt(*v).ok_or("no gradient for input")?.data().to_vec();
        for (i, &an) in analytic.iter().enumerate() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += h;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= h;
            let fp = {
                let (g, _, l) = lib(eval(&plus, false))?;
                g.value(l).item()
            };
            let fm = {
                let (g, _, l) = lib(eval(&minus, false))?;
                g.value(l).item()
            };
            let numeric = (fp - fm) / (2.0 * h);
            diff += (an - numeric).powi(2);
            na += an.powi(2);
            nn += numeric.powi(2);
        }
    }
    let scale = na.sqrt().max(nn.sqrt());
    Ok(if scale == 0.0 { 0.0 } else { diff.sqrt() / scale })
}

/// Relative error of parameter gradients of a whole model's training loss,
/// on a sample of entries from every parameter tensor.
fn model_gradient_error(head: HeadKind) -> Result<f64, String> {
    let cfg = ModelConfig::new(EncoderKind::ResNet34, head, 3, 32, 0.125);
    let mut model = lib(SegModel::<f64>::build(&cfg, 5))?;
    if head == HeadKind::LinearMerge {
        lib(model.set_merge_weights(&[0.3, -0.4, 1.1]))?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = rand_tensor(&mut rng, &[2, 3, 32, 32], -1.5, 1.5);
    let labels: Vec<u8> = (0..2 * 32 * 32).map(|i| u8::from((i / 32 % 32) > 12 && (i % 32) < 20)).collect();
    let loss_of = |m: &mut SegModel<f64>| -> histoseg::Result<(Graph<f64>, histoseg::nn::Var)> {
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let out = m.forward(&mut g, xv, Mode::Train)?;
        let l = m.loss(&mut g, &out, &labels)?;
        Ok((g, l))
    };
    let (g, l) = lib(loss_of(&mut model))?;
    model.params_mut().zero_grad();
    lib(g.backward_into(l, model.params_mut()))?;
    let ids: Vec<_> = model.params().params().map(|(id, _)| id).collect();
    let (mut diff, mut na, mut nn) = (0.0f64, 0.0f64, 0.0f64);
    let h = 1e-5;
    for id in ids {
        let len = model.params().get(id).value.len();
        for _ in 0..2 {
            let i = rng.random_range(0..len);
            let analytic = model.params().grad(id).data()[i];
            let mut probe = model.cast::<f64>();
            probe.params_mut().value_mut(id).data_mut()[i] += h;
            let fp = lib(loss_of(&mut probe)).map(|(g, l)| g.value(l).item())?;
            let mut probe = model.cast::<f64>();
            probe.params_mut().value_mut(id).data_mut()[i] -= h;
            let fm = lib(loss_of(&mut probe)).map(|(g, l)| g.value(l).item())?;
            let numeric = (fp - fm) / (2.0 * h);
            diff += (analytic - numeric).powi(2);
            na += analytic.powi(2);
            nn += numeric.powi(2);
        }
    }
    Ok(diff.sqrt() / na.sqrt().max(nn.sqrt()).max(1e-300))
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = |rng: &mut ChaCha8Rng, s: &[usize]| rand_tensor(rng, s, -1.0, 1.0);
    type LayerCase = (&'static str, Vec<Tensor<f64>>, Box<LayerFn>);
    let layers: Vec<LayerCase> = vec![
        ("conv3x3", vec![x(&mut rng, &[2, 3, 5, 5]), x(&mut rng, &[4, 3, 3, 3])], Box::new(|g, v| g.conv2d(v[0], v[1], 1, 1))),
        ("conv3x3/s2", vec![x(&mut rng, &[1, 2, 6, 6]), x(&mut rng, &[3, 2, 3, 3])], Box::new(|g, v| g.conv2d(v[0], v[1], 2, 1))),
        ("conv7x7/s2", vec![x(&mut rng, &[1, 2, 8, 8]), x(&mut rng, &[2, 2, 7, 7])], Box::new(|g, v| g.conv2d(v[0], v[1], 2, 3))),
        ("conv1x1", vec![x(&mut rng, &[2, 3, 4, 4]), x(&mut rng, &[2, 3, 1, 1])], Box::new(|g, v| g.conv2d(v[0], v[1], 1, 0))),
        ("bias", vec![x(&mut rng, &[2, 3, 3, 3]), x(&mut rng, &[3])], Box::new(|g, v| g.bias_add(v[0], v[1]))),
        (
            "batchnorm-train",
            vec![x(&mut rng, &[3, 2, 3, 3]), x(&mut rng, &[2]), x(&mut rng, &[2])],
            Box::new(|g, v| g.batch_norm_train(v[0], v[1], v[2], 1e-5).map(|(o, _)| o)),
        ),
        (
            "batchnorm-eval",
            vec![x(&mut rng, &[2, 2, 3, 3]), x(&mut rng, &[2]), x(&mut rng, &[2])],
            Box::new(|g, v| g.batch_norm_eval(v[0], v[1], v[2], &[0.1, -0.2], &[0.7, 1.3], 1e-5)),
        ),
        ("relu", vec![spaced_tensor(&mut rng, &[2, 2, 4, 4])], Box::new(|g, v| Ok(g.relu(v[0])))),
        ("maxpool", vec![spaced_tensor(&mut rng, &[1, 2, 7, 7])], Box::new(|g, v| g.max_pool(v[0], 3, 2, 1))),
        ("concat", vec![x(&mut rng, &[2, 1, 3, 3]), x(&mut rng, &[2, 2, 3, 3])], Box::new(|g, v| g.concat_channels(v[0], v[1]))),
        ("add", vec![x(&mut rng, &[1, 2, 3, 3]), x(&mut rng, &[1, 2, 3, 3])], Box::new(|g, v| g.add(v[0], v[1]))),
        ("mul", vec![x(&mut rng, &[1, 2, 3, 3]), x(&mut rng, &[1, 2, 3, 3])], Box::new(|g, v| g.mul(v[0], v[1]))),
        ("upsample", vec![x(&mut rng, &[1, 2, 3, 4])], Box::new(|g, v| g.upsample(v[0], 12, 8))),
        ("softmax", vec![x(&mut rng, &[2, 3, 2, 2])], Box::new(|g, v| g.softmax_channels(v[0]))),
        (
            "weighted-sum",
            vec![x(&mut rng, &[1, 2, 2, 2]), x(&mut rng, &[1, 2, 2, 2]), x(&mut rng, &[2])],
            Box::new(|g, v| g.weighted_sum(&[v[0], v[1]], v[2])),
        ),
        (
            "focal(γ=2)",
            vec![x(&mut rng, &[2, 2, 3, 3])],
            Box::new(|g, v| {
                let p = g.softmax_channels(v[0])?;
                g.focal_loss(p, &[0, 1, 1, 0, 1, 0, 0, 1, 1, 1, 0, 0, 1, 0, 1, 0, 1, 1], 2.0)
            }),
        ),
        (
            "focal(γ=0)",
            vec![x(&mut rng, &[1, 2, 3, 3])],
            Box::new(|g, v| {
                let p = g.softmax_channels(v[0])?;
                g.focal_loss(p, &[0, 1, 1, 0, 1, 0, 0, 1, 1], 0.0)
            }),
        ),
    ];
    let mut worst_layer = (0.0, "");
    for (i, (name, inputs, f)) in layers.iter().enumerate() {
        let err = layer_gradient_error(inputs, f.as_ref(), 100 + i as u64)?;
        check(err < 1e-4, format!("{name}: relative error {err:.2e} ≥ 1e-4"))?;
        if err >= worst_layer.0 {
            worst_layer = (err, name);
        }
    }
    let mut worst_model = 0.0f64;
    for head in [HeadKind::Plain, HeadKind::DeepSupervision, HeadKind::LinearMerge] {
        let err = model_gradient_error(head)?;
        check(err < 1e-3, format!("{head:?}: end-to-end relative error {err:.2e} ≥ 1e-3"))?;
        worst_model = worst_model.max(err);
    }
    let secs = start.elapsed().as_secs_f64();
    check(secs < 120.0, format!("took {secs:.0}s ≥ 120s"))?;
    Ok(format!(
        "{} layers, worst {:.1e} ({}); 3 heads, worst {:.1e}; {:.1}s",
        layers.len(),
        worst_layer.0,
        worst_layer.1,
        worst_model,
        secs
    ))
}

// ---------------------------------------------------------------- 2

fn criterion_2() -> Outcome {
    let mut details = Vec::new();
    for enc in [EncoderKind::ResNet34, EncoderKind::Baseline] {
        let cfg = ModelConfig::new(enc, HeadKind::DeepSupervision, 5, 512, 0.0625);
        let model = lib(SegModel::<f64>::build(&cfg, 2))?;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut g = Graph::new();
        let x = g.input(rand_tensor(&mut rng, &[1, 3, 512, 512], -2.0, 2.0));
        let out = lib(model.forward_eval(&mut g, x))?;
        let sizes: Vec<usize> = out.prob_maps.iter().map(|&v| g.value(v).shape()[2]).collect();
        check(sizes == vec![32, 64, 128, 256, 512], format!("{enc:?}: ψ sizes {sizes:?}"))?;
        for &v in &out.prob_maps {
            let s = g.value(v).shape();
            check(s[2] == s[3], format!("{enc:?}: non-square map {s:?}"))?;
        }
        let phi = g.value(out.final_probs);
        check(phi.shape() == [1, 2, 512, 512], format!("Φ shape {:?}", phi.shape()))?;
        let plane = 512 * 512;
        let worst = (0..plane).map(|i| (phi.data()[i] + phi.data()[plane + i] - 1.0).abs()).fold(0.0, f64::max);
        check(worst <= 1e-6, format!("{enc:?}: channel sum off by {worst:.1e}"))?;
        details.push(format!("{enc:?} ok (max |Σ−1| {worst:.0e})"));
    }
    Ok(format!("ψ_ℓ = 32,64,128,256,512; Φ 512×512×2; {}", details.join(", ")))
}

// ---------------------------------------------------------------- 3

fn criterion_3() -> Outcome {
    let lm_cfg = ModelConfig::new(EncoderKind::ResNet34, HeadKind::LinearMerge, 5, 64, 0.125);
    let plain_cfg = ModelConfig { head: HeadKind::Plain, ..lm_cfg.clone() };
    let mut lm = lib(SegModel::<f64>::build(&lm_cfg, 4))?;
    let mut plain = lib(SegModel::<f64>::build(&plain_cfg, 99))?;
    lib(lm.set_merge_weights(&[0.0, 0.0, 0.0, 0.0, 1.0]))?;
    // give both networks identical weights
    let names: Vec<String> = plain.params().names().map(str::to_string).collect();
    for name in &names {
        let src = lm.params().id(name).ok_or(format!("{name} missing from LinearMerge model"))?;
        let dst = plain.params().id(name).unwrap();
        *plain.params_mut().value_mut(dst) = lm.params().get(src).value.clone();
    }
    let buffers: Vec<String> = plain.params().buffers().map(|(_, b)| b.name.clone()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for name in &buffers {
        let src = lm.params().buffer_id(name).ok_or(format!("buffer {name} missing"))?;
        let dst = plain.params().buffer_id(name).unwrap();
        let len = lm.params().buffer(src).len();
        // non-trivial running statistics, shared by both
        let vals: Vec<f64> = (0..len)
            .map(|_| if name.ends_with("var") { rng.random_range(0.5..1.5) } else { rng.random_range(-0.2..0.2) })
            .collect();
        let t = Tensor::from_vec(&[len], vals).unwrap();
        *lm.params_mut().buffer_mut(src) = t.clone();
        *plain.params_mut().buffer_mut(dst) = t;
    }
    let x = rand_tensor(&mut rng, &[2, 3, 64, 64], -2.0, 2.0);
    let run = |m: &SegModel<f64>| -> Result<Vec<f64>, String> {
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let out = lib(m.forward_eval(&mut g, xv))?;
        Ok(g.value(out.final_probs).data().to_vec())
    };
    let (a, b) = (run(&lm)?, run(&plain)?);
    check(a.len() == b.len(), "output sizes differ")?;
    let worst = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    check(worst <= 1e-6, format!("max elementwise difference {worst:.2e}"))?;
    Ok(format!("w = (0,0,0,0,1): max |LinearMerge − Plain| = {worst:.1e} over {} values", a.len()))
}

// ---------------------------------------------------------------- 4

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst_ce = 0.0f64;
    for _ in 0..1000 {
        let c = rng.random_range(2..6usize);
        let raw: Vec<f64> = (0..c).map(|_| rng.random_range(0.01..1.0)).collect();
        let total: f64 = raw.iter().sum();
        let probs: Vec<f64> = raw.iter().map(|v| v / total).collect();
        let label = rng.random_range(0..c);
        let ce = -probs[label].ln();
        let focal = focal_loss_value(&probs, &[label as u8], 1, c, 1, 0.0);
        // the graph op too
        let mut g = Graph::<f64>::new();
        let p = g.input(Tensor::from_vec(&[1, c, 1, 1], probs.clone()).unwrap());
        let l = lib(g.focal_loss(p, &[label as u8], 0.0))?;
        worst_ce = worst_ce.max((focal - ce).abs()).max((g.value(l).item() - ce).abs());
    }
    check(worst_ce <= 1e-8, format!("γ=0 differs from cross-entropy by {worst_ce:.2e}"))?;
    let mut worst_single = 0.0f64;
    for j in 1..=9 {
        let pt = j as f64 / 10.0;
        let direct = -(1.0 - pt).powi(2) * pt.ln();
        let ours = focal_loss_value(&[1.0 - pt, pt], &[1], 1, 2, 1, 2.0);
        worst_single = worst_single.max((ours - direct).abs());
    }
    check(worst_single <= 1e-6, format!("single-pixel focal value off by {worst_single:.2e}"))?;
    Ok(format!("γ=0 vs CE max {worst_ce:.1e} (1000 draws); −(1−p)²ln p max {worst_single:.1e}"))
}

// ---------------------------------------------------------------- 5

fn criterion_5() -> Outcome {
    // the paper's "After" column
    let after: [u64; 5] = [175_771, 30_000, 10_000, 20_000, 20_000];
    let targets = Multipliers::default().row_targets(REFERENCE_ROW_COUNTS);
    for (t, a) in targets.iter().zip(after) {
        check(*t == num_rational::Ratio::from_integer(a), format!("row target {t} ≠ {a}"))?;
    }
    let total: u64 = targets.iter().map(|t| t.to_integer()).sum();
    check(total == 255_771, format!("total {total} ≠ 255771"))?;

    let mut wins = 0;
    let mut ratios = Vec::new();
    for seed in 0..100u64 {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let cfg = SynthConfig { seed, prevalence: 0.5, ..SynthConfig::default() };
        lib(generate_dataset(&cfg, 3, dir.path()))?;
        let root = lib(DataRoot::open(dir.path()))?;
        let bundles: Vec<_> = root.all_ids().into_iter().map(|id| root.load(id)).collect::<histoseg::Result<_>>().map_err(|e| e.to_string())?;
        let specs: Vec<_> = bundles
            .iter()
            .map(|b| histoseg::sampler::extract_patch_grid(b, 64, 32, 2))
            .collect::<histoseg::Result<Vec<_>>>()
            .map_err(|e| e.to_string())?
            .concat();
        let plan = lib(build_resample_plan(&specs, &Multipliers::default(), seed))?;
        let before = lib(pixel_unbalance(&specs, &vec![1; specs.len()]))?;
        let after = lib(pixel_unbalance(&specs, &plan.repetitions()))?;
        if after < before {
            wins += 1;
        }
        ratios.push(before / after);
    }
    check(wins == 100, format!("unbalance decreased in only {wins}/100 seeds"))?;
    let mean = ratios.iter().sum::<f64>() / ratios.len() as f64;
    Ok(format!("total 255771; unbalance decreased in 100/100 seeds (mean factor {mean:.2})"))
}

// ---------------------------------------------------------------- 6

fn criterion_6() -> Outcome {
    check(axis_positions(768, 512, 256).map_err(|e| e.to_string())? == vec![0, 256], "768/512 positions")?;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for case in 0..500 {
        let patch = [32usize, 64, 128, 256][rng.random_range(0..4)];
        let overlap = patch / 2;
        let (w, h) = (rng.random_range(1..900usize), rng.random_range(1..900usize));
        let tiles = lib(tile_positions(w, h, patch, overlap))?;
        // coverage by 2-D difference array
        let mut diff = vec![0i64; (w + 1) * (h + 1)];
        for &(x, y) in &tiles {
            let (x1, y1) = ((x + patch).min(w), (y + patch).min(h));
            diff[y * (w + 1) + x] += 1;
            diff[y * (w + 1) + x1] -= 1;
            diff[y1 * (w + 1) + x] -= 1;
            diff[y1 * (w + 1) + x1] += 1;
        }
        for y in 0..h {
            for x in 0..w {
                let i = y * (w + 1) + x;
                if x > 0 {
                    diff[i] += diff[i - 1];
                }
                if y > 0 {
                    diff[i] += diff[i - (w + 1)];
                }
                if x > 0 && y > 0 {
                    diff[i] -= diff[i - (w + 1) - 1];
                }
                check(diff[i] > 0, format!("case {case}: pixel ({x},{y}) of {w}×{h} uncovered (P={patch})"))?;
            }
        }
        for (len, axis) in [(w, 0), (h, 1)] {
            let mut starts: Vec<usize> = tiles.iter().map(|t| if axis == 0 { t.0 } else { t.1 }).collect();
            starts.sort_unstable();
            starts.dedup();
            if len <= patch {
                check(starts == vec![0], format!("case {case}: short axis gives {starts:?}"))?;
                continue;
            }
            check(starts.iter().all(|&s| s + patch <= len), format!("case {case}: tile leaves the box"))?;
            for pair in starts.windows(2) {
                let ov = patch - (pair[1] - pair[0]);
                check(ov * 2 >= patch, format!("case {case}: overlap {ov} < 50% of {patch}"))?;
            }
        }
    }
    Ok("500 random boxes fully covered with ≥50% overlap; 768/512 → {0, 256}".into())
}

// ---------------------------------------------------------------- 7

/// Independent 8-connected flood fill returning each component's pixel list.
fn flood_fill(mask: &[bool], w: usize, h: usize) -> Vec<Vec<usize>> {
    let mut seen = vec![false; mask.len()];
    let mut parts = Vec::new();
    for start in 0..mask.len() {
        if !mask[start] || seen[start] {
            continue;
        }
        let mut part = vec![];
        let mut queue = VecDeque::from([start]);
        seen[start] = true;
        while let Some(i) = queue.pop_front() {
            part.push(i);
            let (x, y) = (i % w, i / w);
            for ny in y.saturating_sub(1)..=(y + 1).min(h - 1) {
                for nx in x.saturating_sub(1)..=(x + 1).min(w - 1) {
                    let j = ny * w + nx;
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

/// Smooth random heatmap: a few gaussian bumps plus noise.
fn random_heatmap(rng: &mut ChaCha8Rng, id: &str, w: usize, h: usize, mpp: f64) -> Heatmap {
    let mut hm = Heatmap::constant(id, w, h, 0.0, mpp);
    let bumps: Vec<(f64, f64, f64, f64)> = (0..rng.random_range(0..4))
        .map(|_| {
            (rng.random_range(0.0..w as f64), rng.random_range(0.0..h as f64), rng.random_range(2.0..8.0), rng.random_range(0.3..1.0))
        })
        .collect();
    for y in 0..h {
        for x in 0..w {
            let mut p = rng.random_range(0.0..0.25);
            for &(cx, cy, r, a) in &bumps {
                let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                p += a * (-d2 / (2.0 * r * r)).exp();
            }
            hm.probs[y * w + x] = p.min(1.0) as f32;
        }
    }
    hm
}

fn criterion_7() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut components = 0;
    for case in 0..1000 {
        let density = rng.random_range(0.05..0.75);
        let mask: Vec<bool> = (0..64 * 64).map(|_| rng.random_bool(density)).collect();
        let comps = label_components(&mask, 64, 64);
        let mut ours: Vec<Vec<usize>> = comps.components.iter().map(|c| comps.pixels(c.label)).collect();
        for p in &mut ours {
            p.sort_unstable();
        }
        ours.sort();
        let oracle = flood_fill(&mask, 64, 64);
        check(ours == oracle, format!("mask {case}: components differ from flood fill"))?;
        components += oracle.len();
    }
    let preds: Vec<f64> = (1..=19).map(|j| j as f64 / 20.0).collect();
    let areas: Vec<f64> = (0..=12).map(|j| j as f64 * 8.0).collect();
    for case in 0..200 {
        let hm = random_heatmap(&mut rng, "m", 40, 40, 1.0);
        let mut prev_area = usize::MAX;
        let mut prev_tumor_p: Option<bool> = None;
        for &t in &preds {
            let lab = binarize_and_label(&hm, t);
            let area: usize = lab.regions.iter().map(|r| r.area_px).sum();
            check(area <= prev_area, format!("heatmap {case}: area grew at pred_t {t}"))?;
            prev_area = area;
            let mut prev_tumor_a = true;
            for &a in &areas {
                let tumor = classify_section(&lab, a).label == SectionLabel::Tumor;
                check(prev_tumor_a || !tumor, format!("heatmap {case}: Normal→Tumor raising area_t to {a}"))?;
                prev_tumor_a = tumor;
            }
            let tumor = classify_section(&lab, 24.0).label == SectionLabel::Tumor;
            if let Some(pt) = prev_tumor_p {
                check(pt || !tumor, format!("heatmap {case}: Normal→Tumor raising pred_t to {t}"))?;
            }
            prev_tumor_p = Some(tumor);
        }
    }
    Ok(format!("1000 masks ({components} components) match flood fill; 200 heatmaps monotone in pred_t and area_t"))
}

// ---------------------------------------------------------------- 8

fn criterion_8() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let cases: Vec<EvalCase> = (0..20)
        .map(|i| {
            let truth = if i % 2 == 0 { SectionLabel::Tumor } else { SectionLabel::Normal };
            let mut hm = random_heatmap(&mut rng, &format!("s{i}"), 48, 40, 2.0);
            if truth == SectionLabel::Normal {
                hm.probs.iter_mut().for_each(|p| *p *= 0.7);
            }
            EvalCase { heatmap: hm, truth }
        })
        .collect();
    let pred = [0.3, 0.45, 0.6, 0.75, 0.9];
    let area = [0.0, 40.0, 120.0, 400.0, 1200.0];
    let beta = 1.5;
    let result = lib(grid_search(&cases, &pred, &area, beta))?;

    // oracle: flood-fill areas, direct counts, F_β from its definition
    let mut table = Vec::new();
    for &p in &pred {
        for &a in &area {
            let (mut tp, mut fp, mut tn, mut fnn) = (0u64, 0u64, 0u64, 0u64);
            for c in &cases {
                let hm = &c.heatmap;
                let mask: Vec<bool> = hm.probs.iter().map(|&v| v as f64 >= p).collect();
                let px = hm.mpp_eff * hm.mpp_eff;
                let tumor = flood_fill(&mask, hm.width, hm.height).iter().any(|r| r.len() as f64 * px >= a);
                match (c.truth, tumor) {
                    (SectionLabel::Tumor, true) => tp += 1,
                    (SectionLabel::Tumor, false) => fnn += 1,
                    (SectionLabel::Normal, true) => fp += 1,
                    (SectionLabel::Normal, false) => tn += 1,
                }
            }
            let precision = if tp + fp > 0 { tp as f64 / (tp + fp) as f64 } else { 0.0 };
            let recall = if tp + fnn > 0 { tp as f64 / (tp + fnn) as f64 } else { 0.0 };
            let b2 = beta * beta;
            let f = if precision + recall > 0.0 { (1.0 + b2) * precision * recall / (b2 * precision + recall) } else { 0.0 };
            table.push((p, a, tp, fp, tn, fnn, f, recall));
        }
    }
    check(result.table.len() == 25, "table size")?;
    for (row, o) in result.table.iter().zip(&table) {
        check(
            (row.pred_t, row.area_t, row.tp, row.fp, row.tn, row.fn_) == (o.0, o.1, o.2, o.3, o.4, o.5)
                && (row.f_beta - o.6).abs() < 1e-12,
            format!("row ({}, {}) differs from oracle", o.0, o.1),
        )?;
    }
    // argmax: F_β, then recall, then smaller area_t, then smaller pred_t
    let best = table
        .iter()
        .copied()
        .reduce(|b, r| {
            let better = r.6 > b.6
                || (r.6 == b.6 && r.7 > b.7)
                || (r.6 == b.6 && r.7 == b.7 && (r.1 < b.1 || (r.1 == b.1 && r.0 < b.0)));
            if better {
                r
            } else {
                b
            }
        })
        .unwrap();
    check(result.best == ThresholdPair { pred_t: best.0, area_t: best.1 }, format!("argmax {:?} vs oracle ({}, {})", result.best, best.0, best.1))?;

    let pg = default_pred_grid();
    let ag = default_area_grid();
    for v in [0.45, 0.60, 0.65] {
        check(pg.iter().any(|&p| (p - v).abs() < 1e-12), format!("pred grid lacks {v}"))?;
    }
    for v in [8960.0, 3840.0, 5120.0, 2560.0] {
        check(ag.contains(&v), format!("area grid lacks {v}"))?;
    }
    Ok(format!(
        "20 sections × 5×5 grid match oracle; best ({}, {}) F={:.3}; default grids hold all reference thresholds",
        best.0, best.1, best.6
    ))
}

// ---------------------------------------------------------------- 9 and 10

struct EndToEnd {
    model: SegModel<f32>,
    thresholds: ThresholdPair,
    test: Vec<histoseg::slide_io::SlideBundle>,
    opts: InferenceOptions,
    divisor: usize,
}

fn criterion_9(work: &Path) -> (Outcome, Option<EndToEnd>) {
    let run = || -> Result<(String, EndToEnd), String> {
        let start = Instant::now();
        let synth = SynthConfig { seed: 2024, prevalence: 0.5, val_fraction: 0.17, test_fraction: 0.4, ..SynthConfig::default() };
        let data = work.join("e2e-data");
        let rows = lib(generate_dataset(&synth, 30, &data))?;
        let root = lib(DataRoot::open(&data))?;
        let train_set = lib(root.load_split(Split::Train))?;
        let val_set = lib(root.load_split(Split::Val))?;
        let test = lib(root.load_split(Split::Test))?;

        let (patch, divisor) = (64, 2);
        let patches = lib(collect_patches(&train_set, patch, 32, divisor))?;
        let val_patches = lib(collect_patches(&val_set, patch, patch, divisor))?;
        let specs: Vec<_> = patches.iter().map(|p| p.spec.clone()).collect();
        let plan = lib(build_resample_plan(&specs, &Multipliers::default(), 1))?;

        let cfg = ModelConfig::new(EncoderKind::ResNet34, HeadKind::DeepSupervision, 4, patch, 0.25);
        let mut model = lib(SegModel::<f32>::build(&cfg, 3))?;
        let tcfg = TrainConfig { epochs: 6, batch_size: 16, lr0: 1e-3, seed: 11, ..TrainConfig::default() };
        let reports = lib(train(&mut model, &patches, &plan, &val_patches, &tcfg, Some(&work.join("e2e-ckpt")), |r| {
            eprintln!("    epoch {}  loss {:.4}  val IoU {:.3}  {:.0}s", r.epoch, r.train_loss, r.val_iou, r.seconds)
        }))?;
        let opts = InferenceOptions::for_patch(patch);
        let select = SelectOptions {
            top_n: 3,
            mag_divisor: divisor,
            inference: opts.clone(),
            pred_grid: default_pred_grid(),
            area_grid: default_area_grid(),
            beta: 1.5,
        };
        let sel = lib(select_model(&reports, &val_set, &select))?;
        let best = lib(SegModel::<f32>::load(&sel.checkpoint))?;
        let (maps, _) = lib(section_heatmaps(&best, &test, divisor, &opts))?;
        let preds = classify_all(&maps, sel.thresholds);
        let m = lib(metrics(&confusion(&preds)))?;
        let secs = start.elapsed().as_secs_f64();

        let val_iou = reports.iter().find(|r| r.epoch == sel.epoch).map(|r| r.val_iou).unwrap_or(0.0);
        let sens = m.sensitivity.unwrap_or(0.0);
        check(rows.len() >= 100, format!("only {} sections generated", rows.len()))?;
        check(preds.len() >= 40, format!("only {} held-out sections", preds.len()))?;
        check(val_iou >= 0.6, format!("validation IoU {val_iou:.3} < 0.6"))?;
        check(m.accuracy >= 0.9, format!("accuracy {:.3} < 0.90", m.accuracy))?;
        check(sens >= 0.9, format!("sensitivity {sens:.3} < 0.90"))?;
        check(secs <= 1800.0, format!("runtime {secs:.0}s > 30 min"))?;
        let detail = format!(
            "{} sections, epoch {} (val IoU {val_iou:.3}), thresholds ({}, {}); test n={} accuracy {:.3} sensitivity {sens:.3} specificity {:.3}; {:.0}s",
            rows.len(),
            sel.epoch,
            sel.thresholds.pred_t,
            sel.thresholds.area_t,
            preds.len(),
            m.accuracy,
            m.specificity.unwrap_or(0.0),
            secs
        );
        Ok((detail, EndToEnd { model: best, thresholds: sel.thresholds, test, opts, divisor }))
    };
    match run() {
        Ok((d, e)) => (Ok(d), Some(e)),
        Err(e) => (Err(e), None),
    }
}

fn criterion_10(e2e: Option<&EndToEnd>) -> Outcome {
    let e = e2e.ok_or("no trained model (criterion 9 did not complete)")?;
    let truncated = InferenceOptions { truncate: Some(0), ..e.opts.clone() };
    // warm-up so neither timing pays first-touch costs
    lib(section_heatmaps(&e.model, &e.test[..1], e.divisor, &e.opts))?;
    let (mut full_secs, mut trunc_secs) = (0.0, 0.0);
    let (mut full, mut trunc) = (Vec::new(), Vec::new());
    for round in 0..2 {
        let t = Instant::now();
        let (f, _) = lib(section_heatmaps(&e.model, &e.test, e.divisor, &e.opts))?;
        full_secs += t.elapsed().as_secs_f64();
        let t = Instant::now();
        let (p, _) = lib(section_heatmaps(&e.model, &e.test, e.divisor, &truncated))?;
        trunc_secs += t.elapsed().as_secs_f64();
        if round == 0 {
            (full, trunc) = (f, p);
        }
    }
    let a = classify_all(&full, e.thresholds);
    let b = classify_all(&trunc, e.thresholds);
    let agree = a.iter().zip(&b).filter(|(x, y)| x.predicted == y.predicted).count();
    let frac = agree as f64 / a.len() as f64;
    let saving = 1.0 - trunc_secs / full_secs;
    check(frac >= 0.95, format!("ψ₀ agrees on {agree}/{} sections", a.len()))?;
    check(saving >= 0.10, format!("ψ₀ only {:.1}% faster", saving * 100.0))?;
    Ok(format!(
        "ψ₀ agrees on {agree}/{} sections ({:.1}%); ψ₀ {:.1}s vs full {:.1}s, {:.1}% faster",
        a.len(),
        frac * 100.0,
        trunc_secs / 2.0,
        full_secs / 2.0,
        saving * 100.0
    ))
}

// ---------------------------------------------------------------- 11

fn files_under(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn criterion_11(work: &Path) -> Outcome {
    let synth = SynthConfig { seed: 77, width: 256, height: 256, val_fraction: 0.25, test_fraction: 0.25, ..SynthConfig::default() };
    let (a, b) = (work.join("det-a"), work.join("det-b"));
    lib(generate_dataset(&synth, 4, &a))?;
    lib(generate_dataset(&synth, 4, &b))?;
    let (fa, fb) = (files_under(&a), files_under(&b));
    check(!fa.is_empty() && fa == fb, "synthetic data differs between runs")?;

    let root = lib(DataRoot::open(&a))?;
    let train_set = lib(root.load_split(Split::Train))?;
    let val_set = lib(root.load_split(Split::Val))?;
    let patches = lib(collect_patches(&train_set, 32, 32, 2))?;
    let val = lib(collect_patches(&val_set, 32, 32, 2))?;
    let specs: Vec<_> = patches.iter().map(|p| p.spec.clone()).collect();
    let plan = lib(build_resample_plan(&specs, &Multipliers::default(), 5))?;
    let cfg = ModelConfig::new(EncoderKind::ResNet34, HeadKind::DeepSupervision, 3, 32, 0.125);
    let tcfg = TrainConfig { epochs: 2, batch_size: 8, lr0: 1e-3, seed: 21, ..TrainConfig::default() };
    let mut runs = Vec::new();
    for _ in 0..2 {
        let mut model = lib(SegModel::<f32>::build(&cfg, 21))?;
        let reports = lib(train(&mut model, &patches, &plan, &val, &tcfg, None, |_| {}))?;
        let curve: Vec<u64> = reports.iter().flat_map(|r| r.step_losses.iter().map(|l| l.to_bits())).collect();
        let (maps, _) = lib(section_heatmaps(&model, &val_set, 2, &InferenceOptions::for_patch(32)))?;
        runs.push((curve, maps));
    }
    check(runs[0].0 == runs[1].0, "training loss curves differ")?;
    let steps = runs[0].0.len();
    let mut bytes = Vec::new();
    for (i, (_, maps)) in runs.iter().enumerate() {
        let dir = work.join(format!("det-heatmaps-{i}"));
        for m in maps {
            lib(save_heatmap(&m.heatmap, &dir))?;
        }
        let same_bits = maps.iter().zip(&runs[0].1).all(|(x, y)| {
            x.heatmap.probs.iter().map(|v| v.to_bits()).eq(y.heatmap.probs.iter().map(|v| v.to_bits()))
        });
        check(same_bits, "heatmap probabilities differ")?;
        bytes.push(files_under(&dir));
    }
    check(bytes[0] == bytes[1], "heatmap files differ")?;
    Ok(format!("{} data files, {steps} loss steps, {} heatmap files byte-identical across two runs", fa.len(), bytes[0].len()))
}

// ----------------------------------------------------------------

fn main() {
    let work = tempfile::tempdir().expect("temp dir");
    let mut failures = 0;
    let mut report = |n: usize, name: &str, outcome: Outcome| {
        match outcome {
            Ok(d) => println!("PASS criterion {n:2} {name}: {d}"),
            Err(d) => {
                failures += 1;
                println!("FAIL criterion {n:2} {name}: {d}")
            }
        }
    };
    report(1, "gradient checks", criterion_1());
    report(2, "shape ladder", criterion_2());
    report(3, "linear merge special case", criterion_3());
    report(4, "focal loss", criterion_4());
    report(5, "resampling arithmetic", criterion_5());
    report(6, "tiling", criterion_6());
    report(7, "components and area filter", criterion_7());
    report(8, "grid search", criterion_8());
    let (outcome, e2e) = criterion_9(work.path());
    report(9, "end-to-end synthetic run", outcome);
    report(10, "truncated inference", criterion_10(e2e.as_ref()));
    report(11, "determinism", criterion_11(work.path()));
    if failures > 0 {
        println!("{failures} criteria failed");
        std::process::exit(1);
    }
}
