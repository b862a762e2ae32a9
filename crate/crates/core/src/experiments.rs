//! End-to-end workflows driven by a [`RunConfig`]: synthetic data, GAN
//! training, transfer, detector training, evaluation and the comparison and
//! ratio experiments built from them.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, SynthPlan};
use crate::datasets::{
    lines_path_for, load_train_list, synth_generate, write_text, write_train_list, CategoryIndex, Domain,
    DomainDataset, LightDomain, ListEntry, SyntheticSceneConfig,
};
use crate::detector::{detector_forward, train_detector, Detector, DetectorCheckpoint, EpochRecord};
use crate::error::check_skip_budget;
use crate::evaluator::{evaluate_dataset, EvalReport};
use crate::imaging::load_image;
use crate::postprocess::{decode_lanes, lanes_to_culane_lines, DecodeConfig};
use crate::transfer::{
    build_augmented_trainset, train_transfer, transfer_batch_with, TransferManifest, TransferRun,
};
use crate::{Error, Result};

/// Independent 64-bit stream `stream` of `seed` (splitmix64 finalizer).
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn mkdir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn reset_dir(dir: &Path) -> Result<()> {
    if dir.exists() {
        std::fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    mkdir(dir)
}

struct Split {
    name: &'static str,
    count: usize,
    light: LightDomain,
    lane_count: Option<[usize; 2]>,
}

/// Renders the desk dataset under `data_dir`:
///
/// ```text
/// train/  val/          bright, labelled
/// dark_pool/            dark, the real low-light domain
/// test/{normal,night,crossroad}/ and test/index.txt
/// ```
///
/// Every split draws its scenes from its own seed stream. Returns
/// `(split, images)` for each non-empty split.
pub fn synth_data(plan: &SynthPlan, seed: u64, data_dir: &Path) -> Result<Vec<(String, usize)>> {
    let splits = [
        Split { name: "train", count: plan.train, light: LightDomain::Bright, lane_count: None },
        Split { name: "val", count: plan.val, light: LightDomain::Bright, lane_count: None },
        Split { name: "dark_pool", count: plan.dark_pool, light: LightDomain::Dark, lane_count: None },
        Split { name: "test/normal", count: plan.test_normal, light: LightDomain::Bright, lane_count: None },
        Split { name: "test/night", count: plan.test_night, light: LightDomain::Dark, lane_count: None },
        Split { name: "test/crossroad", count: plan.test_crossroad, light: LightDomain::Dark, lane_count: Some([0, 0]) },
    ];
    if plan.train == 0 || plan.val == 0 || plan.dark_pool == 0 {
        return Err(Error::Config("synth needs non-empty train, val and dark_pool splits".into()));
    }
    let mut index = CategoryIndex::default();
    let mut counts = Vec::new();
    for (k, s) in splits.iter().enumerate() {
        if s.count == 0 {
            continue;
        }
        let cfg = SyntheticSceneConfig {
            light: s.light,
            lane_count: s.lane_count.unwrap_or(plan.scene.lane_count),
            seed: derive_seed(seed, k as u64),
            ..plan.scene.clone()
        };
        let dir = data_dir.join(s.name);
        reset_dir(&dir)?;
        synth_generate(&cfg, s.count, &dir)?;
        if let Some(sub) = s.name.strip_prefix("test/") {
            for (p, c) in CategoryIndex::load(&dir.join("index.txt"))?.entries {
                index.push(format!("{sub}/{p}"), c);
            }
        }
        counts.push((s.name.to_string(), s.count));
    }
    index.save(&data_dir.join("test").join("index.txt"))?;
    Ok(counts)
}

/// Runs the detector over every indexed image under `root` and writes one
/// `.lines.txt` per image into `pred_dir`, in the coordinates of the source
/// image. `input` resizes images before inference.
pub fn predict_dataset(
    det: &Detector<f32>,
    decode: &DecodeConfig,
    input: Option<[usize; 2]>,
    root: &Path,
    index: &CategoryIndex,
    pred_dir: &Path,
) -> Result<()> {
    index.entries.par_iter().try_for_each(|(rel, _)| {
        let img = load_image(&root.join(rel))?;
        let (h, w) = img.dims();
        let x = match input {
            Some([ih, iw]) if (ih, iw) != (h, w) => img.resize_bilinear(ih, iw),
            _ => img,
        };
        let (ih, iw) = x.dims();
        let out = detector_forward(det, &x)?;
        let lanes = decode_lanes(&out, decode).scaled(w as f64 / iw as f64, h as f64 / ih as f64);
        write_text(&lines_path_for(&pred_dir.join(rel)), &lanes_to_culane_lines(&lanes))
    })
}

/// Predicts the configured test set into `out_dir/predictions`, scores it
/// and writes `report.json` and `report.txt`.
pub fn evaluate_detector(cfg: &RunConfig, det: &Detector<f32>, out_dir: &Path) -> Result<EvalReport> {
    let root = cfg.paths.test_root();
    let index_path = cfg.paths.test_index();
    cfg.check_inputs(&[root.clone(), index_path.clone()])?;
    let index = CategoryIndex::load(&index_path)?;
    let pred_dir = out_dir.join("predictions");
    reset_dir(&pred_dir)?;
    predict_dataset(det, &cfg.decode, cfg.detector_train.resize, &root, &index, &pred_dir)?;
    let report = evaluate_dataset(&pred_dir, &root, &index, &cfg.eval)?;
    write_text(&out_dir.join("report.json"), &serde_json::to_string_pretty(&report)?)?;
    write_text(&out_dir.join("report.txt"), &report.to_table())?;
    Ok(report)
}

/// Trains SIM-CycleGAN from domain X to domain Y.
pub fn run_train_gan(cfg: &RunConfig, out_dir: &Path) -> Result<TransferRun> {
    let (x, y) = (cfg.paths.domain_x(), cfg.paths.domain_y());
    cfg.check_inputs(&[x.clone(), y.clone()])?;
    let dx = DomainDataset::open(&x, Domain::X, cfg.seed)?;
    let dy = DomainDataset::open(&y, Domain::Y, cfg.seed)?;
    train_transfer(&cfg.transfer, &dx, &dy, cfg.seed, out_dir)
}

/// Translates the configured sources with `checkpoint`. `size` forces a
/// fixed translation resolution.
pub fn run_transfer(
    cfg: &RunConfig,
    checkpoint: &Path,
    out_dir: &Path,
    size: Option<[usize; 2]>,
) -> Result<TransferManifest> {
    let src = cfg.paths.transfer_sources();
    cfg.check_inputs(&[src.clone()])?;
    let sources = DomainDataset::open(&src, Domain::X, cfg.seed)?;
    reset_dir(out_dir)?;
    let m = transfer_batch_with(checkpoint, &sources, out_dir, size)?;
    check_skip_budget(m.skipped.len(), sources.len(), cfg.transfer.max_skip_fraction)?;
    Ok(m)
}

/// Real low-light count that ratio N multiplies.
pub fn low_light_count(cfg: &RunConfig) -> Result<usize> {
    if let Some(n) = cfg.low_light_count {
        return Ok(n);
    }
    let y = cfg.paths.domain_y();
    cfg.check_inputs(&[y.clone()])?;
    Ok(DomainDataset::open(&y, Domain::Y, cfg.seed)?.len())
}

pub fn real_train_list(cfg: &RunConfig) -> Result<Vec<ListEntry>> {
    let p = cfg.paths.train_list();
    cfg.check_inputs(&[p.clone()])?;
    load_train_list(&p, cfg.detector.lanes)
}

/// The real training list plus `round(ratio_n * low-light count)` generated images.
pub fn augmented_list(cfg: &RunConfig, manifest: &TransferManifest, ratio_n: f64) -> Result<Vec<ListEntry>> {
    let real = real_train_list(cfg)?;
    build_augmented_trainset(&real, manifest, ratio_n, low_light_count(cfg)?, cfg.seed)
}

/// Trains a detector on `train`, validating on the configured list. The
/// training list is written next to the checkpoint.
pub fn run_train_detector(
    cfg: &RunConfig,
    train: &[ListEntry],
    out_dir: &Path,
) -> Result<(DetectorCheckpoint, Vec<EpochRecord>)> {
    let vp = cfg.paths.val_list();
    cfg.check_inputs(&[vp.clone()])?;
    let val = load_train_list(&vp, cfg.detector.lanes)?;
    mkdir(out_dir)?;
    write_train_list(&out_dir.join("train_list.txt"), train)?;
    train_detector(&cfg.detector, &cfg.detector_train, train, &val, cfg.seed, out_dir)
}

/// One trained and evaluated detector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmResult {
    pub name: String,
    pub train_images: usize,
    pub epochs: Vec<EpochRecord>,
    pub report: EvalReport,
}

pub fn train_and_evaluate(cfg: &RunConfig, name: &str, train: &[ListEntry], out_dir: &Path) -> Result<ArmResult> {
    tracing::info!(arm = name, images = train.len(), "training detector");
    let (ck, epochs) = run_train_detector(cfg, train, out_dir)?;
    let report = evaluate_detector(cfg, &ck.detector, out_dir)?;
    Ok(ArmResult {
        name: name.to_string(),
        train_images: train.len(),
        epochs,
        report,
    })
}

/// F1 per category, one column per arm.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultGrid {
    pub arms: Vec<ArmResult>,
}

impl ResultGrid {
    pub fn categories(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for a in &self.arms {
            for c in &a.report.per_category {
                if !out.contains(&c.category) {
                    out.push(c.category.clone());
                }
            }
        }
        out
    }

    /// F1 in percent for `(category, arm)`; `None` when the arm has no such row.
    pub fn cell(&self, category: &str, arm: usize) -> Option<f64> {
        self.arms[arm].report.category(category).map(|c| 100.0 * c.scores.f1)
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = write!(s, "{:<12}", "Category");
        for a in &self.arms {
            let _ = write!(s, " {:>14}", a.name);
        }
        s.push('\n');
        for cat in self.categories() {
            let _ = write!(s, "{cat:<12}");
            for i in 0..self.arms.len() {
                match self.cell(&cat, i) {
                    Some(f) => write!(s, " {f:>14.1}"),
                    None => write!(s, " {:>14}", "-"),
                }
                .unwrap();
            }
            s.push('\n');
        }
        let fp_only: Vec<&String> = self
            .arms
            .iter()
            .flat_map(|a| a.report.fp_only_categories.keys())
            .fold(Vec::new(), |mut v, k| {
                if !v.contains(&k) {
                    v.push(k);
                }
                v
            });
        for cat in fp_only {
            let _ = write!(s, "{:<12}", format!("{cat} (FP)"));
            for a in &self.arms {
                match a.report.fp_only_categories.get(cat) {
                    Some(fp) => write!(s, " {fp:>14}"),
                    None => write!(s, " {:>14}", "-"),
                }
                .unwrap();
            }
            s.push('\n');
        }
        let _ = write!(s, "{:<12}", "Total");
        for a in &self.arms {
            let _ = write!(s, " {:>14.1}", 100.0 * a.report.total.f1);
        }
        s.push('\n');
        s
    }

    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        write_text(&dir.join(format!("{stem}.json")), &serde_json::to_string_pretty(self)?)?;
        write_text(&dir.join(format!("{stem}.txt")), &self.to_table())
    }
}

/// Trains the GAN and translates the sources into `out_dir/{gan,transfer}`.
pub fn gan_and_transfer(cfg: &RunConfig, out_dir: &Path, size: Option<[usize; 2]>) -> Result<TransferManifest> {
    let run = run_train_gan(cfg, &out_dir.join("gan"))?;
    run_transfer(cfg, &run.checkpoint, &out_dir.join("transfer"), size)
}

/// Column label of ratio `n`.
pub fn ratio_label(n: f64) -> String {
    format!("N={n}")
}

/// Sorted, duplicate-free ratios; duplicates are reported with a warning.
pub fn dedup_ratios(ratios: &[f64]) -> Result<Vec<f64>> {
    if ratios.is_empty() {
        return Err(Error::Config("no ratio values given".into()));
    }
    if let Some(bad) = ratios.iter().find(|n| !(**n > 0.0) || !n.is_finite()) {
        return Err(Error::Config(format!("ratio values must be positive, got {bad}")));
    }
    let mut out: Vec<f64> = Vec::new();
    for &n in ratios {
        if out.contains(&n) {
            tracing::warn!("dropping duplicate ratio N={n}");
        } else {
            out.push(n);
        }
    }
    out.sort_by(f64::total_cmp);
    Ok(out)
}

/// One detector per ratio N, all trained with the same seed on the real
/// list plus generated images drawn from `manifest`.
pub fn ablate_ratio_with(
    cfg: &RunConfig,
    manifest: &TransferManifest,
    ratios: &[f64],
    out_dir: &Path,
) -> Result<ResultGrid> {
    let ratios = dedup_ratios(ratios)?;
    let mut arms = Vec::new();
    for n in ratios {
        let label = ratio_label(n);
        let list = augmented_list(cfg, manifest, n)?;
        arms.push(train_and_evaluate(cfg, &label, &list, &out_dir.join(&label))?);
    }
    let grid = ResultGrid { arms };
    grid.save(out_dir, "ablation")?;
    Ok(grid)
}

/// Trains the GAN once, transfers once, then sweeps `ratios`.
pub fn ablate_ratio(cfg: &RunConfig, ratios: &[f64], out_dir: &Path) -> Result<ResultGrid> {
    let ratios = dedup_ratios(ratios)?;
    let manifest = gan_and_transfer(cfg, out_dir, None)?;
    ablate_ratio_with(cfg, &manifest, &ratios, out_dir)
}

/// Detector on the real list only, then on the list augmented with images
/// from a GAN trained and translating at a fixed size (when enabled), then
/// with SIM-CycleGAN images at native resolution.
pub fn compare(cfg: &RunConfig, out_dir: &Path) -> Result<ResultGrid> {
    let real = real_train_list(cfg)?;
    let mut arms = vec![train_and_evaluate(cfg, "Baseline", &real, &out_dir.join("baseline"))?];
    if cfg.compare.cyclegan {
        let size = cfg.compare.cyclegan_size;
        let mut c = cfg.clone();
        c.transfer.resize = Some(size);
        let dir = out_dir.join("cyclegan");
        let m = gan_and_transfer(&c, &dir, Some(size))?;
        let list = augmented_list(cfg, &m, cfg.ratio_n)?;
        arms.push(train_and_evaluate(cfg, "+CycleGAN", &list, &dir.join("detector"))?);
    }
    let dir = out_dir.join("sim_cyclegan");
    let m = gan_and_transfer(cfg, &dir, None)?;
    let list = augmented_list(cfg, &m, cfg.ratio_n)?;
    arms.push(train_and_evaluate(cfg, "+SIM-CycleGAN", &list, &dir.join("detector"))?);
    let grid = ResultGrid { arms };
    grid.save(out_dir, "comparison")?;
    Ok(grid)
}

/// Validation curves of a detector trained on real low-light images against
/// one trained on the same number of generated images.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Convergence {
    pub real: Vec<EpochRecord>,
    pub generated: Vec<EpochRecord>,
    pub images: usize,
}

/// Needs a labelled domain-Y list. Metric logs land in
/// `out_dir/{real,generated}/metrics.jsonl`.
pub fn convergence(cfg: &RunConfig, manifest: &TransferManifest, out_dir: &Path) -> Result<Convergence> {
    let y = cfg.paths.domain_y();
    cfg.check_inputs(&[y.clone()])?;
    let real_dark = load_train_list(&y, cfg.detector.lanes)
        .map_err(|e| Error::Config(format!("domain Y must be a labelled list for this experiment: {e}")))?;
    let n = real_dark.len().min(manifest.records.len());
    let real_train = real_train_list(cfg)?;
    let ratio = n as f64 / real_dark.len() as f64;
    let generated: Vec<ListEntry> = build_augmented_trainset(&real_train, manifest, ratio, real_dark.len(), cfg.seed)?
        .split_off(real_train.len());
    let real: Vec<ListEntry> = real_dark.into_iter().take(generated.len()).collect();
    let (_, r) = run_train_detector(cfg, &real, &out_dir.join("real"))?;
    let (_, g) = run_train_detector(cfg, &generated, &out_dir.join("generated"))?;
    let c = Convergence {
        real: r,
        generated: g,
        images: generated.len(),
    };
    write_text(&out_dir.join("convergence.json"), &serde_json::to_string_pretty(&c)?)?;
    Ok(c)
}
