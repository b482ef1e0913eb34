//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any fails. Pass criterion numbers to run a subset, e.g.
//! `cargo test -p asplat-cli --test acceptance -- 3 10`.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::Mutex;
use std::time::Instant;

use anyhow::{ensure, Context, Result};
use asplat::anchors;
use asplat::autodiff::{ParamSet, Tensor};
use asplat::cameras::{self, Extrinsics, Intrinsics};
use asplat::checkpoint::sha256_hex;
use asplat::config::RunConfig;
use asplat::image::Image;
use asplat::manifest::{self, LoadedScene};
use asplat::objectives::{self, SSIM_C1};
use asplat::parallel;
use asplat::pipeline::{self, fit, train, SceneFrame};
use asplat::raster::{self, RasterSettings};
use asplat::scene::{self, GaussianScene, RAW_DIM};
use asplat::synth::{self, GenSpec, Preset};
use common::oracle::{max_abs, oracle_render};
use nalgebra::{Quaternion, UnitQuaternion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const OFFSET_LIMIT: f64 = 10.0 / 128.0;

/// `(label, max ‖μ − A‖∞)` of every scene produced by the other criteria.
static OFFSETS: Mutex<Vec<(String, f64)>> = Mutex::new(Vec::new());

fn record_offset(label: &str, s: &GaussianScene) {
    OFFSETS.lock().unwrap().push((label.to_string(), s.max_offset()));
}

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self { pass, detail: detail.into() }
    }
}

fn gen_scene(root: &Path, preset: Preset, width: usize, height: usize, inputs: usize, novel: usize) -> Result<LoadedScene> {
    let dir = root.join(format!("{preset}-{width}x{height}-{inputs}-{novel}"));
    if !dir.join("manifest.json").exists() {
        synth::write_scene(&dir, &GenSpec { preset, width, height, input_views: inputs, novel_views: novel, ..Default::default() })?;
    }
    Ok(manifest::load_scene(&dir)?)
}

// 1 ─────────────────────────────────────────────────────────────────────────

fn tiled_forward(_: &Path) -> Result<Outcome> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let settings = RasterSettings { background: [0.15, 0.1, 0.3], ..Default::default() };
    let mut worst: f64 = 0.0;
    let mut largest = 0;
    for _ in 0..50 {
        let n = rng.random_range(1..=64);
        let s = common::random_scene(&mut rng, n, 4, 64, 64);
        let gs = scene::activate_all(&s.anchors, &s.raw, 4, &s.act);
        largest = largest.max(gs.len());
        let out = raster::render_gaussians(&gs, &s.norm, &s.k, &s.e, &settings)?;
        let (rgb, depth, alpha) = oracle_render(&gs, &s.norm, &s.k, &s.e, settings.background);
        worst = worst.max(max_abs(&out.rgb.data, &rgb)).max(max_abs(&out.depth.data, &depth)).max(max_abs(&out.alpha, &alpha));
    }
    let secs = start.elapsed().as_secs_f64();
    Ok(Outcome::new(
        worst <= 1e-5 && secs < 60.0,
        format!("50 scenes (up to {largest} Gaussians, 64x64): max |tiled - brute| = {worst:.2e} (tol 1e-5), {secs:.1}s (limit 60s)"),
    ))
}

// 2 ─────────────────────────────────────────────────────────────────────────

fn tiny_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.anchors.cap = 16;
    cfg.features.hidden_dim = 8;
    cfg.features.feature_dim = 8;
    cfg.decoder.width = 16;
    cfg.decoder.blocks = 1;
    // nonzero head so every upstream weight receives gradient
    cfg.decoder.head_init_std = 0.05;
    cfg.refiner.width = 16;
    cfg.refiner.blocks = 1;
    cfg.refiner.error_dim = 12;
    cfg.refiner.window = 16;
    cfg
}

/// Gives the refiner's zero-initialized output layers small random values.
fn wake_refiner(p: &mut ParamSet, rng: &mut ChaCha8Rng) {
    for name in ["ref.head.w", "ref.head.b", "ref.err.wo", "ref.err.ff2.w"] {
        for v in &mut p.get_mut(name).unwrap().data {
            *v = rng.random_range(-0.05..0.05);
        }
    }
}

struct FdCheck {
    checked: usize,
    failed: Vec<String>,
    worst: f64,
    groups: BTreeMap<String, usize>,
}

impl FdCheck {
    fn new() -> Self {
        Self { checked: 0, failed: Vec::new(), worst: 0.0, groups: BTreeMap::new() }
    }

    fn compare(&mut self, group: &str, label: String, analytic: f64, fd: f64) {
        let rel = (analytic - fd).abs() / analytic.abs().max(fd.abs());
        self.worst = self.worst.max(rel);
        self.checked += 1;
        *self.groups.entry(group.to_string()).or_default() += 1;
        if !(rel <= 2e-3) {
            self.failed.push(format!("{label}: analytic {analytic:.6e} fd {fd:.6e} rel {rel:.2e}"));
        }
    }
}

/// Picks up to `count` entries of a gradient tensor that are large enough for
/// a central difference at h = 1e-4 to resolve.
fn pick(rng: &mut ChaCha8Rng, grad: &Tensor, count: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..grad.data.len()).filter(|&i| grad.data[i].abs() >= 1e-5).collect();
    for i in (1..idx.len()).rev() {
        idx.swap(i, rng.random_range(0..=i));
    }
    idx.truncate(count);
    idx
}

fn central(h: f64, mut f: impl FnMut(f64) -> Result<f64>) -> Result<f64> {
    Ok((f(h)? - f(-h)?) / (2.0 * h))
}

fn gradients(root: &Path) -> Result<Outcome> {
    const H: f64 = 1e-4;
    let cfg = tiny_config();
    let loaded = gen_scene(root, Preset::BoxRoom, 32, 24, 2, 0)?;
    let prep = train::prepare_scene(&loaded, &cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut check = FdCheck::new();

    // encoder, attention and head through the stage-1 objective, with depth
    // supervision masks frozen at the unperturbed render
    let stage1 = train::init_stage1(&cfg);
    let (base, _) = train::decode_scene(&stage1, &prep, &cfg)?;
    let settings = cfg.raster.settings();
    let renders = SceneFrame::of(&base, &settings).render_all(&base.raw, &prep.views)?;
    let masks: Vec<Vec<bool>> = renders.iter().zip(&prep.views).map(|(r, v)| objectives::depth_mask(r, &v.depth)).collect();
    let (_, grads) = train::stage1_loss(&stage1, &prep, &cfg, Some(&masks))?;
    let groups1 = [
        ("encoder", "enc.conv1.w"),
        ("encoder", "enc.conv2.w"),
        ("embed", "dec.embed.w"),
        ("attention", "dec.block0.wq"),
        ("attention", "dec.block0.wk"),
        ("attention", "dec.block0.wv"),
        ("attention", "dec.block0.wo"),
        ("attention", "dec.block0.ff1.w"),
        ("head", "dec.head.w"),
        ("head", "dec.head.b"),
    ];
    for (group, name) in groups1 {
        let ti = stage1.index(name).with_context(|| format!("missing {name}"))?;
        for i in pick(&mut rng, &grads[ti], 6) {
            let fd = central(H, |d| {
                let mut p = stage1.clone();
                p.tensor_mut(ti).data[i] += d;
                Ok(train::stage1_loss(&p, &prep, &cfg, Some(&masks))?.0.total)
            })?;
            check.compare(group, format!("{name}[{i}]"), grads[ti].data[i], fd);
        }
    }

    // refiner weights through the stage-2 objective
    let mut stage2 = train::init_stage2(&cfg);
    wake_refiner(&mut stage2, &mut rng);
    let inputs = train::refine_inputs(&stage1, &prep, &cfg)?;
    let (_, grads) = train::stage2_loss(&stage2, &inputs, &prep.views, &cfg)?;
    let groups2 = [
        ("refiner", "ref.err.wq"),
        ("refiner", "ref.err.wo"),
        ("refiner", "ref.in.w"),
        ("refiner", "ref.ser0.wq"),
        ("refiner", "ref.ser0.wv"),
        ("refiner", "ref.ser0.ff2.w"),
        ("refiner", "ref.head.w"),
        ("refiner", "ref.head.b"),
    ];
    for (group, name) in groups2 {
        let ti = stage2.index(name).with_context(|| format!("missing {name}"))?;
        for i in pick(&mut rng, &grads[ti], 5) {
            let fd = central(H, |d| {
                let mut p = stage2.clone();
                p.tensor_mut(ti).data[i] += d;
                Ok(train::stage2_loss(&p, &inputs, &prep.views, &cfg)?.0)
            })?;
            check.compare(group, format!("{name}[{i}]"), grads[ti].data[i], fd);
        }
    }

    // raw Gaussian parameters through the full objective
    let frame = SceneFrame::of(&base, &settings);
    let (_, g) = frame.total_loss(&base.raw, &prep.views, &cfg.loss, Some(&masks))?;
    for i in pick(&mut rng, &g, 30) {
        let (j, p) = (i / RAW_DIM, i % RAW_DIM);
        let fd = central(H, |d| {
            let mut raw = base.raw.clone();
            let mut a = raw[j].to_array();
            a[p] += d;
            raw[j] = scene::RawGaussian::from_slice(&a);
            Ok(frame.total_loss(&raw, &prep.views, &cfg.loss, Some(&masks))?.0.total)
        })?;
        check.compare("raw", format!("raw[{j}][{p}]"), g.data[i], fd);
    }

    let spans = ["encoder", "attention", "head", "refiner", "raw"].iter().all(|k| check.groups.contains_key(*k));
    let groups: Vec<String> = check.groups.iter().map(|(k, v)| format!("{k} {v}")).collect();
    let mut detail = format!("{} params ({}), worst rel {:.2e} (tol 2e-3)", check.checked, groups.join(", "), check.worst);
    if !check.failed.is_empty() {
        detail += &format!("; {} over tolerance, first: {}", check.failed.len(), check.failed[0]);
    }
    Ok(Outcome::new(check.failed.is_empty() && check.checked >= 100 && spans, detail))
}

// 3 ─────────────────────────────────────────────────────────────────────────

fn random_camera(rng: &mut ChaCha8Rng) -> Result<(Intrinsics, Extrinsics)> {
    let (w, h) = (rng.random_range(16..640), rng.random_range(16..480));
    let fx = rng.random_range(0.4..2.0) * w as f64;
    let fy = fx * rng.random_range(0.9..1.1);
    let k = Intrinsics::new(fx, fy, rng.random_range(0.3..0.7) * w as f64, rng.random_range(0.3..0.7) * h as f64, w, h)?;
    let q = Quaternion::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
    let m = UnitQuaternion::from_quaternion(q).to_rotation_matrix().into_inner();
    let rot = [[m[(0, 0)], m[(0, 1)], m[(0, 2)]], [m[(1, 0)], m[(1, 1)], m[(1, 2)]], [m[(2, 0)], m[(2, 1)], m[(2, 2)]]];
    let t = [rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)];
    Ok((k, Extrinsics::new(rot, t)?))
}

fn round_trip(_: &Path) -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let (mut worst_px, mut worst_z, mut worst_dm): (f64, f64, f64) = (0.0, 0.0, 0.0);
    for _ in 0..10_000 {
        let (k, e) = random_camera(&mut rng)?;
        let u = rng.random_range(0.0..k.width as f64);
        let v = rng.random_range(0.0..k.height as f64);
        let d = rng.random_range(0.1..20.0);
        let p = cameras::backproject_pixel(u, v, d, &k, &e)?;
        let q = cameras::project_point(p, &k, &e);
        worst_px = worst_px.max((q.u - u).abs()).max((q.v - v).abs());
        worst_z = worst_z.max((q.z - d).abs());
        let r = cameras::ray_embedding(u, v, &k, &e);
        worst_dm = worst_dm.max((r[0] * r[3] + r[1] * r[4] + r[2] * r[5]).abs());
    }
    Ok(Outcome::new(
        worst_px <= 1e-9 && worst_z <= 1e-9 && worst_dm <= 1e-12,
        format!("10^4 draws: max pixel error {worst_px:.1e}, depth error {worst_z:.1e} (tol 1e-9); max |d·m| {worst_dm:.1e} (tol 1e-12)"),
    ))
}

// 4 ─────────────────────────────────────────────────────────────────────────

/// Farthest-point sampling recomputing every distance to the selected set.
fn fps_oracle(points: &[[f64; 3]], k: usize, seed: usize) -> Vec<usize> {
    let d2 = |a: [f64; 3], b: [f64; 3]| (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2);
    let mut chosen = vec![seed];
    while chosen.len() < k {
        let mut best = (f64::NEG_INFINITY, 0);
        for (i, p) in points.iter().enumerate() {
            let d = chosen.iter().map(|&c| d2(*p, points[c])).fold(f64::INFINITY, f64::min);
            if d > best.0 {
                best = (d, i);
            }
        }
        chosen.push(best.1);
    }
    chosen
}

fn fps_exact(_: &Path) -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut mismatches = 0;
    for c in 0..100 {
        let n = rng.random_range(1..=512);
        let k = rng.random_range(1..=n.min(64));
        // every fourth cloud sits on a coarse lattice so distance ties occur
        let points: Vec<[f64; 3]> = (0..n)
            .map(|_| {
                if c % 4 == 0 {
                    [rng.random_range(0..4) as f64, rng.random_range(0..4) as f64, rng.random_range(0..4) as f64]
                } else {
                    [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]
                }
            })
            .collect();
        let seed = rng.random_range(0..n);
        if anchors::fps(&points, k, seed)? != fps_oracle(&points, k, seed) {
            mismatches += 1;
        }
    }
    Ok(Outcome::new(mismatches == 0, format!("100 clouds (N <= 512, k <= 64): {mismatches} index mismatches")))
}

// 5 ─────────────────────────────────────────────────────────────────────────

fn view_sweep(root: &Path) -> Result<Outcome> {
    let full = gen_scene(root, Preset::BoxRoom, 64, 48, 8, 2)?;
    let mut cfg = RunConfig::default();
    cfg.anchors.cap = 200;
    cfg.fit.steps = 150;
    let mut rows = Vec::new();
    for v in [2, 4, 8] {
        let out = fit::fit(&full.with_input_count(v)?, &cfg, |_| {})?;
        record_offset(&format!("fit V={v}"), &out.scene);
        rows.push((v, out.report.num_gs, out.report.psnr));
    }
    let same = rows.iter().all(|r| r.1 == rows[0].1);
    let rising = rows.windows(2).all(|w| w[1].2 >= w[0].2 - 0.3);
    let table: Vec<String> = rows.iter().map(|(v, n, p)| format!("V={v}: NumGS {n}, PSNR {p:.2}")).collect();
    Ok(Outcome::new(same && rising, format!("{} (NumGS equal, PSNR non-decreasing within 0.3 dB)", table.join("; "))))
}

// 6 ─────────────────────────────────────────────────────────────────────────

fn fit_floor(root: &Path) -> Result<Outcome> {
    let loaded = gen_scene(root, Preset::BoxRoom, 128, 96, 8, 2)?;
    let mut cfg = RunConfig::default();
    cfg.fit.steps = 250;
    let start = Instant::now();
    let out = parallel::with_threads(1, || fit::fit(&loaded, &cfg, |_| {}))?;
    let secs = start.elapsed().as_secs_f64();
    record_offset("fit 128x96", &out.scene);
    let r = &out.report;
    let gain = r.psnr - out.baseline_psnr;
    Ok(Outcome::new(
        gain >= 8.0 && r.delta1 >= 0.9 && r.absrel <= 0.1 && secs <= 600.0,
        format!(
            "{} steps, 1 thread, {secs:.0}s (limit 600s): novel PSNR {:.2} vs mean-color {:.2} (+{gain:.2} dB, need +8), delta1 {:.3} (>= 0.9), AbsRel {:.4} (<= 0.1)",
            cfg.fit.steps, r.psnr, out.baseline_psnr, r.delta1, r.absrel
        ),
    ))
}

// 7 ─────────────────────────────────────────────────────────────────────────

fn suite_config(seed: u64) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.seed = seed;
    cfg.anchors.cap = 200;
    cfg.train.stage1_steps = 150;
    cfg.train.stage2_steps = 90;
    cfg.train.checkpoint_every = 50;
    cfg
}

fn suite(root: &Path) -> Result<Vec<LoadedScene>> {
    [Preset::BoxRoom, Preset::TexturedPlanes, Preset::SphereField].into_iter().map(|p| gen_scene(root, p, 48, 32, 8, 2)).collect()
}

fn refinement_gain(root: &Path) -> Result<Outcome> {
    let scenes = suite(root)?;
    let mut gains = Vec::new();
    let mut num_gs_kept = true;
    for seed in 0..3 {
        let cfg = suite_config(seed);
        let out = root.join(format!("suite-seed{seed}"));
        train::train(&scenes, &cfg, &train::TrainOptions { out: out.clone(), resume: false, stop_after: None })?;
        let stage1 = train::load_weights(&out.join(train::STAGE1_FILE), train::STAGE1_SECTION)?;
        let stage2 = train::load_weights(&out.join(train::STAGE2_FILE), train::STAGE2_SECTION)?;
        let settings = cfg.raster.settings();
        let mut delta = 0.0;
        for s in &scenes {
            let (base, refined, _) = train::reconstruct(&s.input_views(), &stage1, Some(&stage2), cfg.refiner.passes, &cfg)?;
            let refined = refined.context("refinement was skipped")?;
            record_offset(&format!("decoded {} seed {seed}", s.manifest.name), &base);
            record_offset(&format!("refined {} seed {seed}", s.manifest.name), &refined);
            num_gs_kept &= refined.num_gs() == base.num_gs();
            let before = pipeline::evaluate(&base, &s.novel, &settings, 0.0)?.psnr;
            let after = pipeline::evaluate(&refined, &s.novel, &settings, 0.0)?.psnr;
            delta += (after - before) / scenes.len() as f64;
        }
        gains.push(delta);
    }
    let mean = gains.iter().sum::<f64>() / gains.len() as f64;
    let per: Vec<String> = gains.iter().map(|g| format!("{g:+.2}")).collect();
    Ok(Outcome::new(
        mean >= 0.2 && num_gs_kept,
        format!("novel PSNR gain per seed [{}] dB, mean {mean:+.2} dB (need +0.2); NumGS unchanged: {num_gs_kept}", per.join(", ")),
    ))
}

// 8 ─────────────────────────────────────────────────────────────────────────

fn frozen_decoder(root: &Path) -> Result<Outcome> {
    let scenes = vec![gen_scene(root, Preset::BoxRoom, 48, 32, 8, 2)?];
    let mut cfg = suite_config(7);
    cfg.anchors.cap = 60;
    cfg.train.stage1_steps = 20;
    cfg.train.stage2_steps = 20;
    cfg.train.checkpoint_every = 10;
    let out = root.join("freeze");
    let s1 = out.join(train::STAGE1_FILE);
    // stop exactly at the stage boundary, then run stage 2 in a second call
    let first = train::train(&scenes, &cfg, &train::TrainOptions { out: out.clone(), resume: false, stop_after: Some(20) })?;
    ensure!(!first.completed && s1.exists(), "stage 1 did not finish on its own");
    let before = sha256_hex(&std::fs::read(&s1)?);
    let second = train::train(&scenes, &cfg, &train::TrainOptions { out: out.clone(), resume: true, stop_after: None })?;
    ensure!(second.completed && second.stage2_trace.len() == 20, "stage 2 did not complete");
    let after = sha256_hex(&std::fs::read(&s1)?);
    let record: train::RunRecord = serde_json::from_str(&std::fs::read_to_string(out.join(train::RECORD_FILE))?)?;
    Ok(Outcome::new(
        before == after && record.stage1_sha256 == before,
        format!("stage-1 sha256 {}… before, {}… after stage 2, {}… in run record", &before[..12], &after[..12], &record.stage1_sha256[..12]),
    ))
}

// 9 ─────────────────────────────────────────────────────────────────────────

fn offset_bound(root: &Path) -> Result<Outcome> {
    // saturated decoders and refiners push every offset to the bound
    let loaded = gen_scene(root, Preset::BoxRoom, 32, 24, 2, 0)?;
    let mut rng = ChaCha8Rng::seed_from_u64(909);
    for (i, std) in [0.05, 5.0, 500.0].into_iter().enumerate() {
        let mut cfg = tiny_config();
        cfg.decoder.head_init_std = std;
        cfg.seed = i as u64;
        let prep = train::prepare_scene(&loaded, &cfg)?;
        let stage1 = train::init_stage1(&cfg);
        let mut stage2 = train::init_stage2(&cfg);
        wake_refiner(&mut stage2, &mut rng);
        for v in &mut stage2.get_mut("ref.head.w")?.data {
            *v *= std * 100.0;
        }
        let (base, refined, _) = train::reconstruct(&prep.views, &stage1, Some(&stage2), 2, &cfg)?;
        record_offset(&format!("decoded head std {std}"), &base);
        record_offset(&format!("refined head std {std}"), &refined.context("refinement was skipped")?);
        let extreme: Vec<scene::RawGaussian> = base.raw.iter().map(|r| scene::RawGaussian { offset: [1e30, -1e30, 50.0], ..*r }).collect();
        record_offset(&format!("raw offsets 1e30 std {std}"), &base.with_raw(extreme)?);
    }
    let offsets = OFFSETS.lock().unwrap();
    let (label, worst) = offsets.iter().cloned().fold((String::new(), 0.0), |a, b| if b.1 > a.1 { b } else { a });
    let pass = offsets.iter().all(|(_, m)| *m <= OFFSET_LIMIT);
    Ok(Outcome::new(pass, format!("{} scenes, max offset {worst:.17} ({label}) vs bound {OFFSET_LIMIT}", offsets.len())))
}

// 10 ────────────────────────────────────────────────────────────────────────

fn metric_examples(_: &Path) -> Result<Outcome> {
    let mut errs = Vec::new();
    let mut check = |name: &str, got: f64, want: f64| {
        if !((got - want).abs() <= 1e-6) {
            errs.push(format!("{name}: got {got} want {want}"));
        }
    };
    let black = Image::filled(16, 16, [0.0; 3]);
    let white = Image::filled(16, 16, [1.0; 3]);
    check("ssim constant", objectives::ssim(&black, &white)?, SSIM_C1 / (1.0 + SSIM_C1));
    check("ssim constant value", objectives::ssim(&black, &white)?, 9.998e-5);
    let a = Image::filled(16, 16, [0.25; 3]);
    let b = Image::filled(16, 16, [0.75; 3]);
    check("psnr 0.5 offset", objectives::psnr(&a, &b)?, 6.0206);
    let all = [true, true];
    check("absrel", objectives::absrel(&[1.0, 2.0], &[2.0, 2.0], &all)?, 0.25);
    check("absrel identical", objectives::absrel(&[1.5, 2.0], &[1.5, 2.0], &all)?, 0.0);
    check("delta1 threshold", objectives::delta1(&[1.0, 1.3], &[1.0, 1.0], &all)?, 0.5);
    check("delta1 identical", objectives::delta1(&[1.5, 2.0], &[1.5, 2.0], &all)?, 1.0);
    let n = 7 - errs.len();
    Ok(Outcome::new(errs.is_empty(), if errs.is_empty() { format!("{n}/7 examples within 1e-6") } else { errs.join("; ") }))
}

// 11 & 12: through the command-line binary ─────────────────────────────────

fn asplat(args: &[&str], threads: usize) -> Result<String> {
    let out = Command::new(env!("CARGO_BIN_EXE_asplat")).args(args).arg("--threads").arg(threads.to_string()).output()?;
    ensure!(out.status.success(), "asplat {} failed: {}", args.join(" "), String::from_utf8_lossy(&out.stderr));
    Ok(String::from_utf8(out.stdout)?)
}

fn small_config(root: &Path) -> Result<PathBuf> {
    let path = root.join("small.json");
    let cfg = serde_json::json!({
        "seed": 5,
        "anchors": { "cap": 60 },
        "fit": { "steps": 20 },
        "train": { "stage1_steps": 12, "stage2_steps": 8, "checkpoint_every": 5 }
    });
    std::fs::write(&path, cfg.to_string())?;
    Ok(path)
}

fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 temp path")
}

fn ablation_rows(root: &Path) -> Result<Outcome> {
    let config = small_config(root)?;
    let scene = root.join("ablate-scene");
    asplat(&["gen-scene", "--width", "48", "--height", "32", "--out", s(&scene)], 0)?;
    let cfg = RunConfig::load(&config)?;
    let n = anchors::build_anchors(&manifest::load_scene(&scene)?.input_views(), &cfg.anchors)?.len();
    let mut notes = Vec::new();
    let mut pass = true;
    for (axis, expect) in [("pooling", 3), ("multiplicity", 5), ("views", 3)] {
        let out = root.join(format!("ablate-{axis}"));
        asplat(&["ablate", s(&scene), "--axis", axis, "--config", s(&config), "--out", s(&out)], 0)?;
        let rows: Vec<serde_json::Value> = serde_json::from_str(&std::fs::read_to_string(out.join("ablation.json"))?)?;
        let num_gs: Vec<u64> = rows.iter().map(|r| r["num_gs"].as_u64().unwrap_or(0)).collect();
        let finite = rows.iter().all(|r| ["psnr", "ssim", "absrel", "delta1"].iter().all(|k| r[*k].as_f64().is_some_and(f64::is_finite)));
        let shape_ok = match axis {
            "multiplicity" => rows.iter().zip(num_gs.iter()).all(|(r, g)| r["value"].as_str().and_then(|v| v.parse::<u64>().ok()).map(|k| k * n as u64) == Some(*g)),
            "views" => num_gs.iter().all(|g| *g == num_gs[0]),
            _ => true,
        };
        pass &= rows.len() == expect && finite && shape_ok;
        notes.push(format!("{axis}: {} rows, NumGS {num_gs:?}, finite {finite}", rows.len()));
    }
    Ok(Outcome::new(pass, format!("N = {n} anchors; {}", notes.join("; "))))
}

fn collect_outputs(dir: &Path) -> Result<BTreeMap<String, Vec<u8>>> {
    let mut files = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d)? {
            let p = entry?.path();
            if p.is_dir() {
                stack.push(p);
            } else if matches!(p.extension().and_then(|e| e.to_str()), Some("ply" | "png" | "pfm" | "csv" | "aspl")) {
                files.insert(p.strip_prefix(dir)?.display().to_string(), std::fs::read(&p)?);
            }
        }
    }
    Ok(files)
}

fn cli_run(root: &Path, config: &Path, tag: &str, threads: usize) -> Result<BTreeMap<String, Vec<u8>>> {
    let run = root.join(format!("det-{tag}"));
    let scene = run.join("scene");
    let c = s(config);
    asplat(&["gen-scene", "--width", "48", "--height", "32", "--seed", "3", "--out", s(&scene)], threads)?;
    asplat(&["anchors", s(&scene), "--config", c, "--out", s(&run.join("anchors"))], threads)?;
    asplat(&["fit", s(&scene), "--steps", "15", "--config", c, "--out", s(&run.join("fit"))], threads)?;
    asplat(&["train", s(&scene), "--config", c, "--out", s(&run.join("train"))], threads)?;
    let ck = run.join("train").join(train::STAGE1_FILE);
    let rf = run.join("train").join(train::STAGE2_FILE);
    asplat(&["render", s(&scene), "--checkpoint", s(&ck), "--refiner", s(&rf), "--config", c, "--out", s(&run.join("render"))], threads)?;
    asplat(&["render", s(&scene), "--ply", s(&run.join("fit").join("scene.ply")), "--split", "input", "--out", s(&run.join("replay"))], threads)?;
    collect_outputs(&run)
}

fn determinism(root: &Path) -> Result<Outcome> {
    let config = small_config(root)?;
    let a = cli_run(root, &config, "a", 1)?;
    let b = cli_run(root, &config, "b", 1)?;
    let c = cli_run(root, &config, "c", 4)?;
    let mut differing: Vec<String> = Vec::new();
    for (name, bytes) in &a {
        if b.get(name) != Some(bytes) || c.get(name) != Some(bytes) {
            differing.push(name.clone());
        }
    }
    let same_sets = a.len() == b.len() && a.len() == c.len();
    let kinds = ["ply", "png", "pfm", "csv"].iter().all(|k| a.keys().any(|n| n.ends_with(k)));
    Ok(Outcome::new(
        differing.is_empty() && same_sets && kinds,
        format!("{} output files (PLY/PNG/PFM/CSV traces/checkpoints) compared over runs with --threads 1, 1, 4: {} differ {differing:?}", a.len(), differing.len()),
    ))
}

type Criterion = fn(&Path) -> Result<Outcome>;

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.iter().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    let selected: Vec<usize> = args.iter().filter_map(|a| a.parse().ok()).collect();
    let criteria: [(usize, &str, Criterion); 12] = [
        (1, "tiled forward equals brute force", tiled_forward),
        (2, "analytic gradients match finite differences", gradients),
        (3, "projection round trip and Plücker constraint", round_trip),
        (4, "farthest-point sampling exact", fps_exact),
        (5, "NumGS invariant to view count", view_sweep),
        (6, "direct-fit quality floor", fit_floor),
        (7, "refinement improves novel views", refinement_gain),
        (8, "stage 2 leaves stage-1 weights untouched", frozen_decoder),
        (9, "offsets within the anchor bound", offset_bound),
        (10, "metric examples", metric_examples),
        (11, "ablation sweeps complete", ablation_rows),
        (12, "bit-identical across thread counts", determinism),
    ];
    let root = tempfile::tempdir().expect("temp dir");
    let mut failures = 0;
    for (n, name, run) in criteria {
        if !selected.is_empty() && !selected.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let outcome = match std::panic::catch_unwind(|| run(root.path())) {
            Ok(Ok(o)) => o,
            Ok(Err(e)) => Outcome::new(false, format!("error: {e:#}")),
            Err(_) => Outcome::new(false, "panicked"),
        };
        failures += usize::from(!outcome.pass);
        println!(
            "criterion {n:>2}: {} [{:.1}s] {name}: {}",
            if outcome.pass { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64(),
            outcome.detail
        );
    }
    if failures > 0 {
        println!("{failures} criteria failed");
        std::process::exit(1);
    }
}
