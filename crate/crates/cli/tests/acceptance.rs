//! Acceptance gate: one PASS/FAIL line per criterion, non-zero exit if any fails.

mod common;

use std::collections::BTreeMap;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use agglo_core::distill::experiment::{mode_switch_experiment, ModeSwitchConfig};
use agglo_core::distill::train::high_res_targets;
use agglo_core::distill::{
    student_grad_check, HighResMode, NativeRes, Teacher, TeacherKind, TeacherSpec, Trainer,
};
use agglo_core::io::write_fmap;
use agglo_core::phis::{fidelity_from_mse, geometric_mean};
use agglo_core::scale_eq::{image_scale_variance, FeatureGenerator, Tiled};
use agglo_core::synth::{corpus, ImageSource};
use agglo_core::tome::{merge, plan, reconstruction_error, stride_for_budget, unmerge};
use agglo_core::{
    scale_variance, Direction, FeatureMap, Matrix, MosaicLayout, PhiSTransform, SinkLayout,
};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use common::{agglo, noise_map, TOY_CONFIG};

/// `Ok(detail)` passes, `Err(detail)` fails.
type Check = fn() -> Result<String, String>;

struct Criterion {
    id: &'static str,
    name: &'static str,
    budget: Option<Duration>,
    check: Check,
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn normal_map(h: usize, w: usize, c: usize, rng: &mut ChaCha8Rng) -> FeatureMap {
    FeatureMap::from_fn(h, w, c, |_, _, _| rng.sample(StandardNormal)).unwrap()
}

// (teacher, φ², baseline MSE, PHI-S MSE, reference baseline F, reference PHI-S F)
const FIDELITY_TABLE: [(&str, f64, f64, f64, f64, f64); 4] = [
    ("DFN CLIP", 5.831e-4, 5.100e-4, 2.418e-4, 1.143, 2.411),
    ("OpenAI CLIP", 0.820, 0.570, 0.525, 1.438, 1.563),
    ("DINOv2-g", 1.729, 0.222, 0.206, 7.799, 8.377),
    ("SAM", 27.263, 3.719, 5.313, 7.331, 5.132),
];

fn ac1_fidelity() -> Result<String, String> {
    let mut base = Vec::new();
    let mut phis = Vec::new();
    let mut worst = 0.0f64;
    for (name, phi_sq, mse_b, mse_p, f_b, f_p) in FIDELITY_TABLE {
        let (b, p) = (fidelity_from_mse(phi_sq, mse_b), fidelity_from_mse(phi_sq, mse_p));
        for (got, reference) in [(b, f_b), (p, f_p)] {
            worst = worst.max((got - reference).abs());
            ensure((got - reference).abs() <= 0.02, || {
                format!("{name}: F = {got:.5}, reference {reference}")
            })?;
        }
        base.push(b);
        phis.push(p);
    }
    let (gb, gp) = (geometric_mean(&base), geometric_mean(&phis));
    ensure((gb - 3.114).abs() <= 0.005, || format!("baseline geometric mean {gb:.5}"))?;
    ensure((gp - 3.568).abs() <= 0.005, || format!("PHI-S geometric mean {gp:.5}"))?;
    Ok(format!(
        "8 F values within {worst:.4} of reference; geometric means {gb:.4} / {gp:.4}"
    ))
}

fn ac2_token_counts() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut seen = Vec::new();
    for (n, r, expect) in [(1024, 768, 256), (2304, 2048, 256), (4096, 3840, 256), (4096, 3584, 512)] {
        let side = (n as f64).sqrt() as usize;
        let grid = normal_map(side, side, 4, &mut rng);
        let (layout, r_budget) = stride_for_budget(side, side, expect).map_err(|e| e.to_string())?;
        ensure(r_budget == r, || format!("{n} tokens -> {expect}: budget gives r = {r_budget}"))?;
        let p = plan(&grid, None, layout, r).map_err(|e| e.to_string())?;
        let out = merge(&grid, &p).map_err(|e| e.to_string())?;
        ensure(p.survivors() == expect && out.tokens.num_tokens() == expect, || {
            format!("({n}, r={r}) kept {} tokens", out.tokens.num_tokens())
        })?;
        seen.push(format!("{n}->{expect}"));
    }
    let grid = normal_map(4, 4, 3, &mut rng);
    let p = plan(&grid, None, SinkLayout::square(2), 9).map_err(|e| e.to_string())?;
    ensure(p.survivors() == 7, || format!("4x4 stride 2 r=9 kept {}", p.survivors()))?;
    seen.push("16->7".into());
    Ok(seen.join(", "))
}

fn ac3_phis() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut var_err, mut trip_err, mut orth_err) = (0.0f64, 0.0f64, 0.0f64);
    for case in 0..100 {
        let c = [4, 8, 16, 32][case % 4];
        let n = 10 * c + 50;
        let mix = Matrix::from_fn(c, c, |_, _| rng.sample::<f64, _>(StandardNormal));
        let scales: Vec<f64> = (0..c).map(|_| 10f64.powf(rng.gen_range(-2.0..2.0))).collect();
        let offset: Vec<f64> = (0..c).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let samples: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                let z: Vec<f64> = scales.iter().map(|s| s * rng.sample::<f64, _>(StandardNormal)).collect();
                mix.mul_vec(&z).iter().zip(&offset).map(|(v, o)| v + o).collect()
            })
            .collect();
        let flat: Vec<f64> = samples.iter().flatten().copied().collect();
        let t = PhiSTransform::fit(&flat, c).map_err(|e| format!("case {case}: {e}"))?;
        let out: Vec<Vec<f64>> = samples.iter().map(|x| t.apply_token(x)).collect();
        for k in 0..c {
            let m = out.iter().map(|x| x[k]).sum::<f64>() / n as f64;
            let v = out.iter().map(|x| (x[k] - m).powi(2)).sum::<f64>() / n as f64;
            var_err = var_err.max((v - 1.0).abs());
        }
        for (x, y) in samples.iter().zip(&out) {
            for (a, b) in x.iter().zip(t.invert_token(y)) {
                trip_err = trip_err.max((a - b).abs());
            }
        }
        let rtr = t.rotation.transpose().matmul(&t.rotation).map_err(|e| e.to_string())?;
        orth_err = orth_err.max(rtr.max_abs_diff(&Matrix::identity(c)));
    }
    ensure(var_err < 1e-6, || format!("per-channel variance off by {var_err:e}"))?;
    ensure(trip_err < 1e-9, || format!("apply/invert round trip error {trip_err:e}"))?;
    ensure(orth_err < 1e-8, || format!("R^T R - I = {orth_err:e}"))?;
    Ok(format!(
        "100 fits: |var-1| {var_err:.1e}, round trip {trip_err:.1e}, R^T R - I {orth_err:.1e}"
    ))
}

fn random_layout(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> SinkLayout {
    let stride_y = rng.gen_range(1..=3.min(rows));
    let stride_x = rng.gen_range(1..=3.min(cols));
    SinkLayout {
        stride_y,
        stride_x,
        offset_y: rng.gen_range(0..stride_y),
        offset_x: rng.gen_range(0..stride_x),
    }
}

/// Clustered tokens with keys that are a noisy linear view of the values.
fn clustered(seed: u64) -> (FeatureMap, FeatureMap) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (side, c, k) = (16, 16, 6);
    let centers: Vec<Vec<f64>> = (0..k)
        .map(|_| (0..c).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
        .collect();
    let values: Vec<Vec<f64>> = (0..side * side)
        .map(|_| {
            let ctr = &centers[rng.gen_range(0..k)];
            ctr.iter().map(|v| v + 0.3 * rng.sample::<f64, _>(StandardNormal)).collect()
        })
        .collect();
    let proj = Matrix::from_fn(c, c, |_, _| rng.sample::<f64, _>(StandardNormal) / (c as f64).sqrt());
    let keys: Vec<Vec<f64>> = values
        .iter()
        .map(|v| proj.mul_vec(v).into_iter().map(|x| x + 0.5 * rng.sample::<f64, _>(StandardNormal)).collect())
        .collect();
    (
        FeatureMap::from_tokens(side, side, &values).unwrap(),
        FeatureMap::from_tokens(side, side, &keys).unwrap(),
    )
}

fn ac4_merge() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let err = |e: agglo_core::Error| e.to_string();
    for case in 0..1000 {
        let (rows, cols, c) = (rng.gen_range(2..=12), rng.gen_range(2..=12), rng.gen_range(1..=6));
        let layout = random_layout(rows, cols, &mut rng);
        let n = rows * cols;
        let sources = n - layout.num_targets(rows, cols);
        let r = rng.gen_range(0..=sources);
        let grid = normal_map(rows, cols, c, &mut rng);
        let p = plan(&grid, None, layout, r).map_err(err)?;
        let out = merge(&grid, &p).map_err(err)?;
        ensure(p.survivors() == n - r && out.tokens.num_tokens() == n - r, || {
            format!("case {case}: {n} tokens, r={r}, kept {}", out.tokens.num_tokens())
        })?;
        ensure(out.counts.iter().sum::<usize>() == n && out.counts.iter().all(|&k| k > 0), || {
            format!("case {case}: merge groups do not cover the grid")
        })?;
        p.validate().map_err(|e| format!("case {case}: {e}"))?;
        let back = unmerge(&out.tokens, &p).map_err(err)?;
        ensure(back.shape() == grid.shape(), || format!("case {case}: unmerge shape"))?;

        let identity = plan(&grid, None, layout, 0).map_err(err)?;
        let same = unmerge(&merge(&grid, &identity).map_err(err)?.tokens, &identity).map_err(err)?;
        ensure(same == grid, || format!("case {case}: r=0 is not the identity"))?;

        // Every source copies a random target, so each source has an exact twin.
        let targets: Vec<Vec<f64>> = (0..n).map(|_| (0..c.max(2)).map(|_| rng.sample(StandardNormal)).collect()).collect();
        let target_ids: Vec<usize> = (0..n).filter(|&i| layout.is_target(i / cols, i % cols)).collect();
        let dup_tokens: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                let src = if layout.is_target(i / cols, i % cols) { i } else { *target_ids.choose(&mut rng).unwrap() };
                targets[src].clone()
            })
            .collect();
        let dup = FeatureMap::from_tokens(rows, cols, &dup_tokens).map_err(err)?;
        let dp = plan(&dup, None, layout, r).map_err(err)?;
        let e = reconstruction_error(&dup, &dp).map_err(err)?;
        ensure(e == 0.0, || format!("case {case}: duplicate tokens give error {e:e}"))?;
    }

    let mut wins = 0;
    let (mut sum_v, mut sum_k) = (0.0, 0.0);
    for seed in 0..50 {
        let (values, keys) = clustered(seed);
        let layout = SinkLayout::square(2);
        let on_values = reconstruction_error(&values, &plan(&values, None, layout, 128).map_err(err)?).map_err(err)?;
        let on_keys = reconstruction_error(&values, &plan(&values, Some(&keys), layout, 128).map_err(err)?).map_err(err)?;
        wins += usize::from(on_values <= on_keys);
        sum_v += on_values;
        sum_k += on_keys;
    }
    ensure(wins >= 45, || format!("values <= keys on only {wins}/50 instances"))?;
    Ok(format!(
        "1000 cases ok; values <= keys on {wins}/50 (mean error {:.3} vs {:.3})",
        sum_v / 50.0,
        sum_k / 50.0
    ))
}

fn patch_local(native: NativeRes) -> Teacher {
    let mut spec = TeacherSpec::new("sam", TeacherKind::Segment, native, 8);
    spec.patch = 16;
    spec.summary = false;
    Teacher::new(spec).unwrap()
}

fn ac5_mosaic() -> Result<String, String> {
    let err = |e: agglo_core::Error| e.to_string();
    let any = patch_local(NativeRes::Any);
    let fixed = patch_local(NativeRes::Fixed(1024));
    let mut notes = Vec::new();
    for (res, k, cell) in [(256, 4, 256), (432, 2, 512)] {
        let layout = MosaicLayout::layout_for(res, 1024, 16).map_err(err)?;
        ensure(layout.k == k && layout.cell == cell, || {
            format!("{res}px: k={} cell={}", layout.k, layout.cell)
        })?;
        if res == 256 {
            ensure(layout.total_padding() == 0, || "256px layout is padded".into())?;
        }
        let images: Vec<FeatureMap> = corpus(5, layout.images_per_canvas())
            .iter()
            .map(|i| i.render(res))
            .collect::<Result<_, _>>()
            .map_err(err)?;
        let canvas = layout.pack(&images, 0.0).map_err(err)?;
        let crops = layout
            .unpack_features(&any.features(&canvas).map_err(err)?.patch)
            .map_err(err)?;
        for (i, (img, crop)) in images.iter().zip(&crops).enumerate() {
            let direct = any.features(img).map_err(err)?.patch;
            ensure(&direct == crop, || format!("{res}px image {i}: mosaic crop differs"))?;
        }
        let mosaic = high_res_targets(&fixed, &images, 1024, HighResMode::Mosaic).map_err(err)?;
        let padded = high_res_targets(&fixed, &images, 1024, HighResMode::PadCrop).map_err(err)?;
        ensure(mosaic == padded, || format!("{res}px: mosaic and pad-crop targets differ"))?;
        notes.push(format!("{res}px k={k} x{} bit-exact", images.len()));
    }
    Ok(notes.join("; "))
}

fn smooth_map(side: usize) -> FeatureMap {
    FeatureMap::from_fn(side, side, 4, |y, x, c| {
        let (u, v) = ((x as f64 + 0.5) / side as f64, (y as f64 + 0.5) / side as f64);
        (std::f64::consts::PI * (u * (c + 1) as f64 + 0.5 * v)).sin() + 0.3 * c as f64 * v
    })
    .unwrap()
}

fn ac6_scale_metric() -> Result<String, String> {
    let err = |e: agglo_core::Error| e.to_string();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = normal_map(8, 8, 4, &mut rng);
    let same = scale_variance(&vec![x; 4], Direction::Down).map_err(err)?;
    ensure(same == 0.0, || format!("identical series: {same:e}"))?;

    let base = smooth_map(64);
    let series: Vec<FeatureMap> = [64, 48, 32, 16]
        .iter()
        .map(|&s| base.bilinear_resize(s, s))
        .collect::<Result<_, _>>()
        .map_err(err)?;
    let consistent = scale_variance(&series, Direction::Down).map_err(err)?;
    ensure(consistent < 0.05, || format!("downsample-consistent series: {consistent}"))?;

    let iid: Vec<FeatureMap> = (0..4).map(|_| normal_map(16, 16, 8, &mut rng)).collect();
    let random = scale_variance(&iid, Direction::Down).map_err(err)?;
    ensure((random - 1.0).abs() <= 0.2, || format!("i.i.d. series: {random}"))?;

    let dino = Teacher::new(TeacherSpec::new("dino", TeacherKind::PatchStatistics, NativeRes::Any, 8)).map_err(err)?;
    let global = |img: &FeatureMap| dino.features(img).map(|o| o.patch);
    let tiled = Tiled { inner: global, tile: 64 };
    let coarse = [64, 128, 192];
    let mut wins = 0;
    for seed in 0..50 {
        let img = &corpus(1000 + seed, 1)[0];
        let g = image_scale_variance(&global as &dyn FeatureGenerator, img, &coarse, Direction::Down).map_err(err)?;
        let t = image_scale_variance(&tiled, img, &coarse, Direction::Down).map_err(err)?;
        wins += usize::from(t > g);
    }
    ensure(wins >= 45, || format!("tiling > global on only {wins}/50 seeds"))?;
    Ok(format!(
        "identical {same}, consistent {consistent:.4}, i.i.d. {random:.3}, tiling > global {wins}/50"
    ))
}

fn ac7_gradients() -> Result<String, String> {
    let err = |e: agglo_core::Error| e.to_string();
    let cfg = ModeSwitchConfig::new(7).multi_resolution();
    let teachers: Vec<String> = cfg.teachers.iter().map(|t| t.id.clone()).collect();
    let trainer = Trainer::new(cfg).map_err(err)?;
    let images: Vec<_> = (0..2).map(|i| trainer.data().held_out(i)).collect();
    let batch = trainer.batch_targets(&teachers, &images, 64).map_err(err)?;
    let run = |mutate| {
        student_grad_check(
            trainer.model(),
            &batch,
            trainer.standardizers(),
            &trainer.config().weights,
            256,
            7,
            mutate,
        )
        .map_err(err)
    };
    let clean = run(false)?;
    ensure(clean.checked >= 200, || format!("only {} parameters checked", clean.checked))?;
    ensure(clean.max_rel_error < 1e-5, || {
        format!("max relative error {:e} at parameter {}", clean.max_rel_error, clean.worst_index)
    })?;
    let mutated = run(true)?;
    ensure(mutated.max_rel_error >= 1e-5, || "flipped gradient sign went unnoticed".into())?;
    Ok(format!(
        "{} of {} parameters, max rel error {:.2e}; mutation error {:.2}",
        clean.checked,
        trainer.model().num_params(),
        clean.max_rel_error,
        mutated.max_rel_error
    ))
}

fn ac8_mode_switch() -> Result<String, String> {
    let mut consistent = 0;
    let mut crossover = 0;
    let mut per_seed = Vec::new();
    for seed in 0..5 {
        let report = mode_switch_experiment(&ModeSwitchConfig::new(seed)).map_err(|e| format!("seed {seed}: {e}"))?;
        let seg = report.segregated.scale_variance.coarse.unwrap_or(f64::NAN);
        let multi = report.multi_resolution.scale_variance.coarse.unwrap_or(f64::NAN);
        consistent += usize::from(report.multi_resolution_more_consistent);
        let (holds, rho) = match &report.crossover {
            Some(c) => (c.holds, format!("rho {:+.2}/{:+.2}", c.any_res_rho, c.high_res_rho)),
            None => (false, "no crossover".into()),
        };
        crossover += usize::from(holds);
        per_seed.push(format!("s{seed}: var {seg:.3}>{multi:.3} {rho}"));
    }
    let detail = format!(
        "segregated > multi-res {consistent}/5, crossover {crossover}/5 [{}]",
        per_seed.join("; ")
    );
    ensure(consistent >= 4 && crossover >= 4, || detail.clone())?;
    Ok(detail)
}

fn write_inputs(dir: &Path) {
    let put = |name: &str, m: &FeatureMap| write_fmap(dir.join(name), m).unwrap();
    put("t.fmap", &noise_map(8, 8, 4, 1));
    put("a.fmap", &noise_map(4, 4, 4, 2));
    put("b.fmap", &noise_map(6, 6, 4, 3));
    put("k.fmap", &noise_map(8, 8, 6, 4));
    put("canvas_features.fmap", &noise_map(8, 8, 5, 5));
    for i in 0..4 {
        put(&format!("img{i}.fmap"), &noise_map(32, 32, 3, 10 + i));
    }
    fs::write(
        dir.join("suite.json"),
        r#"{"teacher": {"id": "dino", "kind": "patch_statistics", "native_res": "any", "channels": 8},
            "images": 2, "ladders": {"fine": [32, 48, 64], "coarse": [32, 64]}, "tile": 16}"#,
    )
    .unwrap();
    fs::write(
        dir.join("ms.json"),
        r#"{"iterations": 4, "eval_images": 2, "eval_resolutions": [64, 128],
            "ladders": {"fine": [64, 96], "coarse": [64, 128]}}"#,
    )
    .unwrap();
}

const SCRIPT: &[&[&str]] = &[
    &["phis", "fit", "--inputs", "t.fmap", "--out", "phis.json"],
    &["phis", "fit", "--inputs", "t.fmap", "--out", "phis_sampled.json", "--samples", "20", "--seed", "9"],
    &["phis", "apply", "--transform", "phis.json", "--in", "t.fmap", "--out", "std.fmap"],
    &["phis", "invert", "--transform", "phis.json", "--in", "std.fmap", "--out", "back.fmap"],
    &["phis", "fidelity", "--transform", "phis.json", "--student", "back.fmap", "--teacher", "t.fmap"],
    &["phis", "fidelity", "--phi-sq", "5.831e-4", "--mse", "5.100e-4"],
    &["tome", "plan", "--rows", "4", "--cols", "4", "--stride", "2", "--r", "9", "--out", "grid.json"],
    &["tome", "compress", "--in", "t.fmap", "--out", "c.fmap", "--plan", "p.json", "--budget", "16", "--criterion", "k.fmap"],
    &["tome", "reconstruct", "--in", "c.fmap", "--plan", "p.json", "--out", "r.fmap"],
    &["tome", "error", "--in", "t.fmap", "--stride", "2", "--r", "40", "--offset", "1", "0"],
    &["mosaic", "layout", "--res", "432", "--canvas", "1024", "--patch", "16", "--jitter-seed", "3", "--out", "lay.json"],
    &["mosaic", "pack", "--res", "32", "--canvas", "64", "--patch", "8", "img0.fmap", "img1.fmap", "img2.fmap", "img3.fmap", "--out", "canvas.ppm", "--layout", "pack.json"],
    &["mosaic", "crop", "--features", "canvas_features.fmap", "--layout", "pack.json", "--out-dir", "crops"],
    &["scale-eq", "--inputs", "a.fmap", "b.fmap", "t.fmap"],
    &["scale-eq", "--suite", "suite.json", "--seed", "5"],
    &["train", "run", "--config", TOY_CONFIG, "--seed", "3", "--log", "log.jsonl", "--params-out", "params.json"],
    &["train", "grad-check", "--config", TOY_CONFIG, "--seed", "3", "--samples", "32"],
    &["train", "mode-switch", "--seed", "1", "--config", "ms.json", "--high-res-mode", "pad-crop"],
    &["viz", "--in", "t.fmap", "--out", "viz.ppm", "--scale", "2"],
];

/// Hash of stdout plus every file in `dir` after `args` runs there.
fn run_and_hash(dir: &Path, args: &[&str]) -> Result<BTreeMap<String, String>, String> {
    let r = agglo(dir, args);
    ensure(r.code == 0, || format!("{args:?} exited {}: {}", r.code, r.stderr.trim()))?;
    let mut hashes = BTreeMap::new();
    hashes.insert("<stdout>".to_string(), format!("{:x}", Sha256::digest(r.stdout.as_bytes())));
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).map_err(|e| e.to_string())? {
            let path = entry.map_err(|e| e.to_string())?.path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).unwrap().display().to_string();
                let bytes = fs::read(&path).map_err(|e| e.to_string())?;
                hashes.insert(rel, format!("{:x}", Sha256::digest(&bytes)));
            }
        }
    }
    Ok(hashes)
}

fn ac9_determinism() -> Result<String, String> {
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let mut subcommands = std::collections::BTreeSet::new();
    let mut files = 0;
    for d in &dirs {
        write_inputs(d.path());
    }
    for args in SCRIPT {
        let a = run_and_hash(dirs[0].path(), args)?;
        let b = run_and_hash(dirs[1].path(), args)?;
        if a != b {
            let diff: Vec<&String> = a.keys().filter(|k| a.get(*k) != b.get(*k)).collect();
            return Err(format!("{args:?} differs between runs in {diff:?}"));
        }
        let again = run_and_hash(dirs[0].path(), args)?;
        ensure(again == a, || format!("{args:?} does not overwrite its outputs identically"))?;
        let name = if args[0] == "scale-eq" || args[0] == "viz" { args[0].to_string() } else { format!("{} {}", args[0], args[1]) };
        subcommands.insert(name);
        files = a.len() - 1;
    }
    Ok(format!(
        "{} invocations over {} subcommands, {files} files hashed, byte-identical",
        SCRIPT.len(),
        subcommands.len()
    ))
}

fn main() -> ExitCode {
    let secs = |s| Some(Duration::from_secs(s));
    let criteria = [
        Criterion { id: "AC1", name: "fidelity arithmetic", budget: secs(1), check: ac1_fidelity },
        Criterion { id: "AC2", name: "token-count laws", budget: secs(1), check: ac2_token_counts },
        Criterion { id: "AC3", name: "PHI-S properties", budget: secs(30), check: ac3_phis },
        Criterion { id: "AC4", name: "merge/unmerge properties", budget: secs(60), check: ac4_merge },
        Criterion { id: "AC5", name: "mosaic exactness", budget: secs(10), check: ac5_mosaic },
        Criterion { id: "AC6", name: "scale-equivariance metric", budget: secs(60), check: ac6_scale_metric },
        Criterion { id: "AC7", name: "gradient correctness", budget: secs(120), check: ac7_gradients },
        Criterion { id: "AC8", name: "mode-switch reproduction", budget: secs(900), check: ac8_mode_switch },
        Criterion { id: "AC9", name: "CLI determinism", budget: None, check: ac9_determinism },
    ];
    let only: Vec<String> = std::env::args().skip(1).filter(|a| a.starts_with("AC")).collect();
    let mut failed = 0;
    for c in criteria.iter().filter(|c| only.is_empty() || only.iter().any(|o| o == c.id)) {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(c.check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let elapsed = start.elapsed();
        let outcome = match (outcome, c.budget) {
            (Ok(d), Some(b)) if elapsed > b => Err(format!("{d}; over the {}s budget", b.as_secs())),
            (o, _) => o,
        };
        let (tag, detail) = match outcome {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("{tag} {} {} ({:.2}s): {detail}", c.id, c.name, elapsed.as_secs_f64());
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
