//! Acceptance suite. Every criterion runs even if an earlier one fails, and
//! each prints one `PASS`/`FAIL` line.

mod common;

use std::collections::BTreeMap;
use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use common::{
    brute_force_tp, check_gradients, conv_out, oracle_iou, random_image, random_scene, DetectionObjectiveFixture,
    GanObjectiveFixture, GanSide,
};
use lanegan::config::{Profile, RunConfig};
use lanegan::datasets::lines_path_for;
use lanegan::detector::{detection_loss, DetectionLossWeights, DetectorOutput};
use lanegan::evaluator::{iou_matrix, lane_iou, match_lanes, EvalConfig};
use lanegan::experiments::{self as exp, ArmResult};
use lanegan::imaging::{crop_to_trace, load_image, pad_to_multiple, Image, Polyline};
use lanegan::postprocess::{decode_lanes, DecodeConfig};
use lanegan::simcyclegan::{
    adversarial_loss, cycle_loss, total_loss, Discriminator, DiscriminatorConfig, Generator, LossParts, LossWeights,
    PatchMap,
};
use lanegan::transfer::TransferManifest;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

/// Writes to the real stdout so the lines show without `--nocapture`.
fn say(line: &str) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{line}");
    let _ = out.flush();
}

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn close(name: &str, got: f64, want: f64, tol: f64) -> Result<(), String> {
    ensure((got - want).abs() <= tol, || format!("{name}: got {got}, want {want}"))
}

fn within(name: &str, t: Instant, limit: Duration) -> Result<(), String> {
    let e = t.elapsed();
    ensure(e < limit, || format!("{name} took {e:.1?}, limit {limit:?}"))
}

fn criterion_1() -> Outcome {
    let t = Instant::now();
    let cfg = RunConfig::load(Profile::Desk, None, []).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let gen = Generator::<f32>::new(&cfg.transfer.gan.generator, &mut rng).map_err(|e| e.to_string())?;
    let m = cfg.transfer.gan.generator.padding_multiple();
    for _ in 0..50 {
        let (h, w) = (rng.random_range(8..=257), rng.random_range(8..=257));
        let img = random_image(&mut rng, h, w);
        let out = gen.translate(&img).map_err(|e| e.to_string())?;
        ensure(out.dims() == (h, w) && out.channels() == 3, || {
            format!("{h}x{w} came back as {:?}", out.dims())
        })?;
        let (padded, trace) = pad_to_multiple(&img, m);
        ensure(padded.height() % m == 0 && padded.width() % m == 0, || format!("{h}x{w} padded badly"))?;
        let back = crop_to_trace(&padded, &trace).map_err(|e| e.to_string())?;
        ensure(back == img, || format!("{h}x{w} pad/crop is not exact"))?;
    }
    within("50 resolutions", t, Duration::from_secs(60))?;
    Ok(format!("50 resolutions in {:.1?}", t.elapsed()))
}

fn criterion_2() -> Outcome {
    let ln2 = 2f64.ln();
    let half = PatchMap::filled(30, 30, 0.5);
    let (d, g) = adversarial_loss(&half, &half);
    close("loss_D at 0.5", d, 2.0 * ln2, 1e-6)?;
    close("loss_G at 0.5", g, ln2, 1e-6)?;
    let (d, _) = adversarial_loss(&PatchMap::filled(4, 4, 1.0), &PatchMap::filled(4, 4, 0.0));
    close("perfect discriminator", d, 0.0, 1e-6)?;

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = vec![random_image(&mut rng, 9, 13), random_image(&mut rng, 9, 13)];
    let y = vec![random_image(&mut rng, 7, 5)];
    let x_rec: Vec<Image> = x
        .iter()
        .map(|i| {
            let data = i.data().iter().map(|v| (*v as f64 + 0.1) as f32).collect();
            Image::new(i.height(), i.width(), 3, data).unwrap()
        })
        .collect();
    let c = cycle_loss(&x, &x_rec, &y, &y).map_err(|e| e.to_string())?;
    close("cycle with 0.1 offset", c, 0.1, 1e-6)?;
    close("cycle identity", cycle_loss(&x, &x, &y, &y).unwrap(), 0.0, 0.0)?;

    let parts = LossParts {
        adv_a: 1.0,
        adv_b: 1.0,
        cycle: 0.2,
    };
    close("total", total_loss(&parts, &LossWeights { lambda_cyc: 10.0 }), 4.0, 1e-6)?;
    close("total at lambda 0", total_loss(&parts, &LossWeights { lambda_cyc: 0.0 }), 2.0, 1e-6)?;

    let (h, w) = (6, 7);
    let out = DetectorOutput {
        lanes: 4,
        height: h,
        width: w,
        prob_maps: vec![0.2; 5 * h * w],
        existence: vec![0.5; 4],
    };
    let seg: Vec<u8> = (0..h * w).map(|k| (k % 5) as u8).collect();
    let exist = [true, false, true, false];
    let l = detection_loss(&out, &seg, &exist, &DetectionLossWeights::default()).map_err(|e| e.to_string())?;
    let want = 0.9 * 5f64.ln() + 0.1 * ln2;
    close("uniform detection loss", l, want, 1e-6)?;
    let w0 = DetectionLossWeights {
        lambda_1: 0.0,
        ..DetectionLossWeights::default()
    };
    close("detection loss at lambda_1 0", detection_loss(&out, &seg, &exist, &w0).unwrap(), 0.1 * ln2, 1e-6)?;
    Ok(format!("all fixtures within 1e-6 (uniform detection loss {l:.6})"))
}

fn criterion_3() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for side in [GanSide::Generators, GanSide::Discriminators] {
        let r = check_gradients(&mut GanObjectiveFixture::new(side, &mut rng), 20, &mut rng)?;
        worst = worst.max(r.worst);
        checked += r.checked;
    }
    let r = check_gradients(&mut DetectionObjectiveFixture::new(&mut rng), 20, &mut rng)?;
    worst = worst.max(r.worst);
    checked += r.checked;
    within("gradient checks", t, Duration::from_secs(120))?;
    Ok(format!("{checked} parameters, worst relative error {worst:.2e}, {:.1?}", t.elapsed()))
}

fn criterion_4() -> Outcome {
    let strides = [2, 2, 2, 1, 1];
    let grid = strides.iter().fold(256, |s, &st| conv_out(s, 4, st, 1));
    let rf = strides.iter().rev().fold(1, |r, &st| (r - 1) * st + 4);
    ensure((grid, rf) == (30, 70), || format!("oracle gives {grid}x{grid} with receptive field {rf}"))?;
    let cfg = DiscriminatorConfig {
        channels: 3,
        base_channels: 2,
        strided_layers: 3,
    };
    ensure(cfg.receptive_field() == rf, || format!("receptive field {}", cfg.receptive_field()))?;
    ensure(cfg.patch_grid(256, 256) == Some((grid, grid)), || format!("{:?}", cfg.patch_grid(256, 256)))?;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let d = Discriminator::<f32>::new(&cfg, &mut rng).map_err(|e| e.to_string())?;
    let map = d.score(&random_image(&mut rng, 256, 256)).map_err(|e| e.to_string())?;
    ensure((map.height, map.width) == (30, 30) && map.scores.len() == 900, || {
        format!("patch map {}x{}", map.height, map.width)
    })?;
    ensure(map.scores.iter().all(|s| *s > 0.0 && *s < 1.0), || "score outside (0, 1)".into())?;
    Ok("256x256 gives a 30x30 patch map, receptive field 70".into())
}

fn criterion_5() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst: f64 = 0.0;
    let mut pairs = 0;
    for scene in 0..200 {
        let (h, w) = (rng.random_range(24..48), rng.random_range(32..72));
        let width = rng.random_range(3.0..12.0);
        let cfg = EvalConfig {
            line_width: width,
            canvas: (h, w),
            ..EvalConfig::default()
        };
        let (preds, gts) = random_scene(&mut rng, h, w);
        let ious = iou_matrix(&preds, &gts, &cfg);
        for (i, p) in preds.iter().enumerate() {
            for (j, g) in gts.iter().enumerate() {
                let o = oracle_iou(p, g, width, h, w);
                worst = worst.max((ious[i][j] - o).abs());
                pairs += 1;
            }
        }
        let m = match_lanes(&preds, &gts, &cfg);
        let tp = brute_force_tp(&ious, gts.len(), cfg.iou_threshold);
        let want = (tp, preds.len() - tp, gts.len() - tp);
        ensure((m.tp, m.fp, m.fn_) == want, || {
            format!("scene {scene}: match_lanes {:?}, brute force {want:?}", (m.tp, m.fp, m.fn_))
        })?;
        if !gts.is_empty() {
            let same = match_lanes(&gts, &gts, &cfg);
            let f1 = lanegan::evaluator::Counts {
                tp: same.tp,
                fp: same.fp,
                fn_: same.fn_,
            }
            .scores()
            .f1;
            ensure(f1 == 1.0, || format!("scene {scene}: identical lanes give F1 {f1}"))?;
        }
    }
    ensure(worst <= 0.02, || format!("IoU differs from the pixel oracle by {worst}"))?;

    let cfg = EvalConfig {
        line_width: 30.0,
        canvas: (200, 400),
        ..EvalConfig::default()
    };
    let a = Polyline::new(vec![(50.0, 80.0), (350.0, 80.5)]).unwrap();
    let b = Polyline::new(vec![(50.0, 95.0), (350.0, 95.5)]).unwrap();
    let iou = lane_iou(&a, &b, &cfg);
    close("15 px offset band", iou, oracle_iou(&a, &b, 30.0, 200, 400), 0.02)?;
    close("15 px offset band vs 1/3", iou, 1.0 / 3.0, 0.02)?;
    Ok(format!("200 scenes, {pairs} lane pairs, worst IoU gap {worst:.4}"))
}

fn output(lanes: usize, h: usize, w: usize, existence: Vec<f32>) -> DetectorOutput {
    let mut prob_maps = vec![0.05; (lanes + 1) * h * w];
    prob_maps[..h * w].fill(0.5);
    DetectorOutput {
        lanes,
        height: h,
        width: w,
        prob_maps,
        existence,
    }
}

fn set(o: &mut DetectorOutput, class: usize, y: usize, x: usize, p: f32) {
    let plane = o.height * o.width;
    o.prob_maps[class * plane + y * o.width + x] = p;
}

fn criterion_6() -> Outcome {
    let cfg = DecodeConfig::default();
    ensure(cfg.exist_thresh == 0.5 && cfg.row_stride == 20 && cfg.row_prob_floor == 0.3, || {
        format!("defaults {cfg:?}")
    })?;
    let (h, w) = (101, 80);

    // Ridge at column 57 on lane 1; lane 2 sits exactly at the threshold.
    let mut o = output(2, h, w, vec![0.9, 0.5]);
    for y in 0..h {
        set(&mut o, 1, y, 57, 0.9);
        set(&mut o, 2, y, 10, 0.9);
    }
    let d = decode_lanes(&o, &cfg);
    ensure(d.lanes.len() == 1 && d.lanes[0].0 == 0, || format!("expected lane 1 only, got {:?}", d.lanes))?;
    let pts = d.lanes[0].1.points().to_vec();
    let rows: Vec<f64> = pts.iter().map(|p| p.1).collect();
    ensure(rows == [0.0, 20.0, 40.0, 60.0, 80.0, 100.0], || format!("sampled rows {rows:?}"))?;
    ensure(pts.iter().all(|p| p.0 == 57.0), || format!("points {pts:?}"))?;

    o.existence[1] = 0.5001;
    ensure(decode_lanes(&o, &cfg).lanes.len() == 2, || "existence 0.5001 should decode".into())?;
    o.existence[1] = 0.4;
    ensure(decode_lanes(&o, &cfg).lanes.len() == 1, || "existence 0.4 should not decode".into())?;

    // Per-row argmax moves with the peak; the first of tied maxima wins.
    let mut o = output(1, h, w, vec![0.8]);
    for y in 0..h {
        set(&mut o, 1, y, y % 70, 0.7);
    }
    set(&mut o, 1, 40, 3, 0.7);
    let pts = decode_lanes(&o, &cfg).lanes[0].1.points().to_vec();
    let want: Vec<(f64, f64)> = [0, 20, 40, 60, 80, 100]
        .iter()
        .map(|&y| (if y == 40 { 3.0 } else { (y % 70) as f64 }, y as f64))
        .collect();
    ensure(pts == want, || format!("argmax points {pts:?}, want {want:?}"))?;

    // Rows below the floor are dropped; a lane left with one point disappears.
    let mut o = output(1, h, w, vec![0.9]);
    for y in 0..h {
        set(&mut o, 1, y, 30, if y == 60 { 0.29 } else { 0.3 });
    }
    let rows: Vec<f64> = decode_lanes(&o, &cfg).lanes[0].1.points().iter().map(|p| p.1).collect();
    ensure(rows == [0.0, 20.0, 40.0, 80.0, 100.0], || format!("floor kept rows {rows:?}"))?;
    let mut o = output(1, h, w, vec![0.9]);
    set(&mut o, 1, 100, 30, 0.9);
    ensure(decode_lanes(&o, &cfg).lanes.is_empty(), || "single-point lane kept".into())?;
    let zero = DetectorOutput {
        prob_maps: vec![0.0; 2 * h * w],
        ..output(1, h, w, vec![0.9])
    };
    ensure(decode_lanes(&zero, &cfg).lanes.is_empty(), || "all-zero map decoded a lane".into())?;
    Ok("threshold, stride, argmax and floor fixtures hold".into())
}

/// One seed's data, GAN and transfer output, shared by the last three criteria.
struct SeedRun {
    cfg: RunConfig,
    manifest: TransferManifest,
}

fn seed_config(root: &Path, seed: u64) -> RunConfig {
    let mut cfg = RunConfig::load(Profile::Desk, None, []).unwrap();
    cfg.seed = seed;
    cfg.paths.work_dir = root.join(format!("seed{seed}"));
    cfg
}

fn prepare_seed(root: &Path, seed: u64) -> Result<SeedRun, String> {
    let cfg = seed_config(root, seed);
    let err = |e: lanegan::Error| format!("seed {seed}: {e}");
    exp::synth_data(&cfg.synth, seed, &cfg.paths.data_dir()).map_err(err)?;
    let manifest = exp::gan_and_transfer(&cfg, &cfg.paths.work_dir, None).map_err(err)?;
    Ok(SeedRun { cfg, manifest })
}

#[derive(Default)]
struct Shared {
    runs: BTreeMap<u64, SeedRun>,
    augmented: BTreeMap<u64, ArmResult>,
}

fn night_f1(arm: &ArmResult) -> Result<f64, String> {
    arm.report
        .category("Night")
        .map(|c| 100.0 * c.scores.f1)
        .ok_or_else(|| format!("{} has no Night row", arm.name))
}

fn criterion_7(root: &Path, shared: &mut Shared) -> Outcome {
    let t = Instant::now();
    let mut wins = 0;
    let mut lines = Vec::new();
    for seed in 1..=5u64 {
        let run = prepare_seed(root, seed)?;
        let cfg = &run.cfg;
        let work = &cfg.paths.work_dir;
        let err = |e: lanegan::Error| format!("seed {seed}: {e}");
        let base_list = exp::real_train_list(cfg).map_err(err)?;
        let base = exp::train_and_evaluate(cfg, "Baseline", &base_list, &work.join("baseline")).map_err(err)?;
        let aug_list = exp::augmented_list(cfg, &run.manifest, 1.0).map_err(err)?;
        let aug = exp::train_and_evaluate(cfg, "N=1", &aug_list, &work.join("augmented")).map_err(err)?;
        let (b, a) = (night_f1(&base)?, night_f1(&aug)?);
        if a - b >= 3.0 {
            wins += 1;
        }
        let line = format!("seed {seed}: Night F1 {b:.1} -> {a:.1}");
        say(&format!("  {line}"));
        lines.push(line);
        shared.runs.insert(seed, run);
        shared.augmented.insert(seed, aug);
    }
    let e = t.elapsed();
    ensure(wins >= 4, || format!("{wins}/5 seeds gain >= 3 points ({})", lines.join("; ")))?;
    within("five seeds", t, Duration::from_secs(45 * 60))?;
    Ok(format!("{wins}/5 seeds gain >= 3 points in {:.1} min ({})", e.as_secs_f64() / 60.0, lines.join("; ")))
}

fn read(p: &Path) -> Result<Vec<u8>, String> {
    std::fs::read(p).map_err(|e| format!("{}: {e}", p.display()))
}

fn criterion_8(root: &Path, shared: &mut Shared) -> Outcome {
    if !shared.runs.contains_key(&1) {
        let run = prepare_seed(root, 1)?;
        shared.runs.insert(1, run);
    }
    let run = &shared.runs[&1];
    let dir = run.cfg.paths.work_dir.join("ablation");
    let ratios = [0.25, 1.0, 4.0];
    let grid = exp::ablate_ratio_with(&run.cfg, &run.manifest, &ratios, &dir).map_err(|e| e.to_string())?;
    say(grid.to_table().trim_end());
    let names: Vec<&str> = grid.arms.iter().map(|a| a.name.as_str()).collect();
    ensure(names == ["N=0.25", "N=1", "N=4"], || format!("columns {names:?}"))?;
    let cats = grid.categories();
    ensure(cats.iter().any(|c| c == "Night") && cats.iter().any(|c| c == "Normal"), || {
        format!("categories {cats:?}")
    })?;
    for (i, arm) in grid.arms.iter().enumerate() {
        for c in &cats {
            let v = grid.cell(c, i);
            ensure(v.is_some_and(f64::is_finite), || format!("{} / {c} is empty", arm.name))?;
        }
        ensure(arm.report.fp_only_categories.contains_key("Crossroad"), || {
            format!("{} has no Crossroad FP", arm.name)
        })?;
    }
    let sizes: Vec<usize> = grid.arms.iter().map(|a| a.train_images).collect();
    ensure(sizes[0] < sizes[1] && sizes[1] < sizes[2], || format!("training set sizes {sizes:?}"))?;
    ensure(dir.join("ablation.json").is_file() && dir.join("ablation.txt").is_file(), || {
        "grid files missing".into()
    })?;

    // Same seed, same manifest, same ratio: the N=1 cell must repeat bit for bit.
    let n1 = dir.join("N=1");
    let (reference, ref_dir) = match shared.augmented.get(&1) {
        Some(a) => (a.clone(), run.cfg.paths.work_dir.join("augmented")),
        None => {
            let list = exp::augmented_list(&run.cfg, &run.manifest, 1.0).map_err(|e| e.to_string())?;
            let d = run.cfg.paths.work_dir.join("repeat");
            (exp::train_and_evaluate(&run.cfg, "N=1", &list, &d).map_err(|e| e.to_string())?, d)
        }
    };
    ensure(grid.arms[1].report == reference.report, || "N=1 report differs between runs".into())?;
    ensure(read(&n1.join("detector.ckpt"))? == read(&ref_dir.join("detector.ckpt"))?, || {
        "N=1 checkpoints differ between runs".into()
    })?;
    Ok(format!("3 columns x {} categories populated, N=1 reproduced exactly", cats.len()))
}

fn criterion_9(root: &Path, shared: &mut Shared) -> Outcome {
    if shared.runs.is_empty() {
        let run = prepare_seed(root, 1)?;
        shared.runs.insert(1, run);
    }
    let mut records = 0;
    for (seed, run) in &shared.runs {
        let m = &run.manifest;
        ensure(!m.records.is_empty() && m.skipped.is_empty(), || {
            format!("seed {seed}: {} records, {} skipped", m.records.len(), m.skipped.len())
        })?;
        let on_disk = TransferManifest::load(&run.cfg.paths.work_dir.join("transfer/manifest.tsv"))
            .map_err(|e| e.to_string())?;
        ensure(on_disk.records == m.records, || format!("seed {seed}: manifest file differs"))?;
        for r in &m.records {
            let source_label = read(&lines_path_for(&r.source))?;
            ensure(read(&r.label)? == source_label && read(&lines_path_for(&r.generated))? == source_label, || {
                format!("{}: label bytes differ from the source", r.generated.display())
            })?;
            let (src, gen) = (load_image(&r.source), load_image(&r.generated));
            let (src, gen) = (src.map_err(|e| e.to_string())?, gen.map_err(|e| e.to_string())?);
            ensure(src.dims() == gen.dims(), || {
                format!("{}: {:?} from {:?}", r.generated.display(), gen.dims(), src.dims())
            })?;
            records += 1;
        }
    }

    let (&seed, run) = shared.runs.iter().next().unwrap();
    let again: PathBuf = run.cfg.paths.work_dir.join("transfer_again");
    let ck = run.cfg.paths.work_dir.join("gan/gan.ckpt");
    let m2 = exp::run_transfer(&run.cfg, &ck, &again, None).map_err(|e| e.to_string())?;
    ensure(m2.records.len() == run.manifest.records.len(), || "record counts differ".into())?;
    for (a, b) in run.manifest.records.iter().zip(&m2.records) {
        ensure(a.source == b.source && a.label == b.label, || "record order differs".into())?;
        ensure(read(&a.generated)? == read(&b.generated)?, || {
            format!("seed {seed}: {} translated differently twice", a.source.display())
        })?;
    }
    Ok(format!(
        "{records} records across {} seeds: labels byte-identical, sizes preserved, transfer repeatable",
        shared.runs.len()
    ))
}

#[test]
fn acceptance() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let mut shared = Shared::default();
    let mut failed = Vec::new();
    let mut report = |n: usize, f: &mut dyn FnMut(&mut Shared) -> Outcome, shared: &mut Shared| {
        let t = Instant::now();
        let r = catch_unwind(AssertUnwindSafe(|| f(shared))).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        match r {
            Ok(msg) => say(&format!("PASS criterion {n}: {msg} [{:.1?}]", t.elapsed())),
            Err(msg) => {
                say(&format!("FAIL criterion {n}: {msg} [{:.1?}]", t.elapsed()));
                failed.push(n);
            }
        }
    };
    report(1, &mut |_| criterion_1(), &mut shared);
    report(2, &mut |_| criterion_2(), &mut shared);
    report(3, &mut |_| criterion_3(), &mut shared);
    report(4, &mut |_| criterion_4(), &mut shared);
    report(5, &mut |_| criterion_5(), &mut shared);
    report(6, &mut |_| criterion_6(), &mut shared);
    report(7, &mut |s| criterion_7(root, s), &mut shared);
    report(8, &mut |s| criterion_8(root, s), &mut shared);
    report(9, &mut |s| criterion_9(root, s), &mut shared);
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
