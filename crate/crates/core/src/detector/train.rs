use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use lanegan_tensor::optim::{poly_lr, Sgd};
use lanegan_tensor::{Graph, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{detection_loss_graph, DetectionLossWeights, Detector, DetectorConfig, Mode, RunningStats};
use crate::checkpoint::Archive;
use crate::datasets::ListEntry;
use crate::error::{check_skip_budget, Error, Result};
use crate::imaging::{load_image, load_label_map, Image};
use crate::nn::collect_grads;

pub const CHECKPOINT_KIND: &str = "detector";
const SHUFFLE_SALT: u64 = 0x5eed_d37e_c70e;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub poly_power: f64,
    /// `[height, width]` every image and label is resized to; native size when
    /// absent. A config file that omits the key gets native size.
    #[serde(default)]
    pub resize: Option<[usize; 2]>,
    /// Keep decoded samples in memory between epochs.
    pub cache_samples: bool,
    pub max_skip_fraction: f64,
    pub loss: DetectionLossWeights,
}

impl Default for DetectorTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 12,
            batch_size: 12,
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            poly_power: 0.9,
            resize: Some([295, 820]),
            cache_samples: false,
            max_skip_fraction: 0.1,
            loss: DetectionLossWeights::default(),
        }
    }
}

impl DetectorTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return Err(Error::Config("need lr > 0, momentum in [0, 1) and weight_decay >= 0".into()));
        }
        if let Some([h, w]) = self.resize {
            if h == 0 || w == 0 {
                return Err(Error::Config("resize dims must be positive".into()));
            }
        }
        self.loss.validate()
    }
}

/// One decoded training example.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Image,
    pub seg: Vec<u8>,
    pub exist: Vec<bool>,
}

fn resize_labels(seg: &[u8], h: usize, w: usize, th: usize, tw: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(th * tw);
    for y in 0..th {
        let sy = ((y as f64 + 0.5) * h as f64 / th as f64) as usize;
        for x in 0..tw {
            let sx = ((x as f64 + 0.5) * w as f64 / tw as f64) as usize;
            out.push(seg[sy.min(h - 1) * w + sx.min(w - 1)]);
        }
    }
    out
}

fn load_sample(e: &ListEntry, lanes: usize, resize: Option<[usize; 2]>) -> Result<Sample> {
    let seg_path = e
        .seg_label
        .as_ref()
        .ok_or_else(|| Error::contract(format!("{} has no segmentation label", e.image.display())))?;
    let flags = e
        .existence
        .as_ref()
        .ok_or_else(|| Error::contract(format!("{} has no existence flags", e.image.display())))?;
    if flags.len() != lanes {
        return Err(Error::contract(format!(
            "{} has {} existence flags, expected {lanes}",
            e.image.display(),
            flags.len()
        )));
    }
    let image = load_image(&e.image)?;
    let (lh, lw, seg) = load_label_map(seg_path)?;
    if (lh, lw) != image.dims() {
        return Err(Error::contract(format!(
            "label {} is {lh}x{lw} but its image is {}x{}",
            seg_path.display(),
            image.height(),
            image.width()
        )));
    }
    if let Some(&c) = seg.iter().find(|&&c| c as usize > lanes) {
        return Err(Error::contract(format!("label {} holds class {c} > {lanes}", seg_path.display())));
    }
    let (image, seg) = match resize {
        Some([th, tw]) if [th, tw] != [lh, lw] => (image.resize_bilinear(th, tw), resize_labels(&seg, lh, lw, th, tw)),
        _ => (image, seg),
    };
    Ok(Sample {
        image,
        seg,
        exist: flags.iter().map(|&f| f == 1).collect(),
    })
}

/// Decodes every entry in parallel; failures are returned next to the good samples.
pub fn load_samples(
    entries: &[ListEntry],
    lanes: usize,
    resize: Option<[usize; 2]>,
) -> (Vec<(usize, Sample)>, Vec<(PathBuf, Error)>) {
    let results: Vec<Result<Sample>> = entries.par_iter().map(|e| load_sample(e, lanes, resize)).collect();
    let mut good = Vec::new();
    let mut bad = Vec::new();
    for (i, (r, e)) in results.into_iter().zip(entries).enumerate() {
        match r {
            Ok(s) => good.push((i, s)),
            Err(err) => bad.push((e.image.clone(), err)),
        }
    }
    (good, bad)
}

/// Valid entries, decoded once and optionally cached.
struct SampleSet<'a> {
    entries: Vec<&'a ListEntry>,
    cache: Option<Vec<Sample>>,
    lanes: usize,
    resize: Option<[usize; 2]>,
}

impl<'a> SampleSet<'a> {
    fn open(entries: &'a [ListEntry], lanes: usize, cfg: &DetectorTrainConfig, what: &str) -> Result<Self> {
        let (good, bad) = load_samples(entries, lanes, cfg.resize);
        for (p, e) in &bad {
            tracing::warn!("skipping {what} sample {}: {e}", p.display());
        }
        check_skip_budget(bad.len(), entries.len(), cfg.max_skip_fraction)?;
        let kept: Vec<&ListEntry> = good.iter().map(|(i, _)| &entries[*i]).collect();
        let cache = cfg.cache_samples.then(|| good.into_iter().map(|(_, s)| s).collect());
        Ok(Self {
            entries: kept,
            cache,
            lanes,
            resize: cfg.resize,
        })
    }

    fn len(&self) -> usize {
        self.entries.len()
    }

    fn batch(&self, idx: &[usize]) -> Result<Vec<Sample>> {
        match &self.cache {
            Some(c) => Ok(idx.iter().map(|&i| c[i].clone()).collect()),
            None => idx
                .par_iter()
                .map(|&i| load_sample(self.entries[i], self.lanes, self.resize))
                .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_miou: f64,
    pub lr: f64,
    pub seconds: f64,
}

/// Trained parameters plus optimizer state and progress.
#[derive(Clone, Debug, PartialEq)]
pub struct DetectorCheckpoint {
    pub detector: Detector<f32>,
    pub sgd: Sgd<f32>,
    pub train_config: DetectorTrainConfig,
    pub epoch: usize,
    pub iteration: usize,
}

impl DetectorCheckpoint {
    pub fn new(net: &DetectorConfig, train: &DetectorTrainConfig, seed: u64) -> Result<Self> {
        let detector = Detector::new(net, &mut ChaCha8Rng::seed_from_u64(seed))?;
        let sgd = Sgd::new(detector.params.tensors(), train.momentum, train.weight_decay);
        Ok(Self {
            detector,
            sgd,
            train_config: train.clone(),
            epoch: 0,
            iteration: 0,
        })
    }

    pub fn save(&self, path: &Path) -> Result<String> {
        let meta = serde_json::json!({
            "config": self.detector.config(),
            "train_config": self.train_config,
            "epoch": self.epoch,
            "iteration": self.iteration,
        });
        let mut a = Archive::new(CHECKPOINT_KIND, meta);
        a.insert_store("net", &self.detector.params);
        let running: Vec<Tensor<f32>> = self
            .detector
            .running
            .iter()
            .flat_map(|r| {
                [
                    Tensor::from_vec(&[r.mean.len()], r.mean.iter().map(|&v| v as f32).collect()),
                    Tensor::from_vec(&[r.var.len()], r.var.iter().map(|&v| v as f32).collect()),
                ]
            })
            .collect();
        a.insert_list("running", &running);
        a.insert_sgd("sgd", &self.sgd);
        a.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let a = Archive::load(path)?.expect_kind(path, CHECKPOINT_KIND)?;
        let bad = |msg: String| Error::Checkpoint {
            path: path.to_path_buf(),
            msg,
        };
        let net: DetectorConfig =
            serde_json::from_value(a.meta["config"].clone()).map_err(|e| bad(format!("config: {e}")))?;
        let train: DetectorTrainConfig = serde_json::from_value(a.meta["train_config"].clone())
            .map_err(|e| bad(format!("train_config: {e}")))?;
        let mut ck = Self::new(&net, &train, 0)?;
        a.load_store("net", &mut ck.detector.params).map_err(bad)?;
        let running = a.list("running");
        if running.len() != 2 * ck.detector.running.len() {
            return Err(bad(format!(
                "expected {} running statistics, found {}",
                2 * ck.detector.running.len(),
                running.len()
            )));
        }
        for (r, pair) in ck.detector.running.iter_mut().zip(running.chunks(2)) {
            if pair[0].len() != r.mean.len() || pair[1].len() != r.var.len() {
                return Err(bad("running statistics have the wrong width".into()));
            }
            *r = RunningStats {
                mean: pair[0].data().iter().map(|&v| v as f64).collect(),
                var: pair[1].data().iter().map(|&v| v as f64).collect(),
            };
        }
        a.load_sgd("sgd", &mut ck.sgd).map_err(bad)?;
        ck.epoch = a.meta["epoch"].as_u64().ok_or_else(|| bad("missing epoch".into()))? as usize;
        ck.iteration = a.meta["iteration"].as_u64().unwrap_or(0) as usize;
        Ok(ck)
    }
}

fn stack(batch: &[Sample]) -> Result<(Tensor<f32>, Vec<usize>, Vec<f64>)> {
    let dims = batch[0].image.dims();
    if batch.iter().any(|s| s.image.dims() != dims) {
        return Err(Error::contract(
            "a batch mixes image sizes; set a resize target for this dataset",
        ));
    }
    let x = Tensor::stack_batch(&batch.iter().map(|s| s.image.to_tensor()).collect::<Vec<_>>());
    let seg = batch.iter().flat_map(|s| s.seg.iter().map(|&c| c as usize)).collect();
    let exist = batch.iter().flat_map(|s| s.exist.iter().map(|&b| if b { 1.0 } else { 0.0 })).collect();
    Ok((x, seg, exist))
}

/// One SGD step on a batch; returns the loss before the update.
pub(crate) fn train_step(ck: &mut DetectorCheckpoint, batch: &[Sample], lr: f64) -> Result<f64> {
    let (x, seg, exist) = stack(batch)?;
    let mut g = Graph::new();
    let p = ck.detector.params.bind(&mut g, true);
    let xv = g.constant(x);
    let f = ck.detector.forward(&mut g, &p, xv, Mode::Train)?;
    let loss = detection_loss_graph(&mut g, f.logits, f.existence, &seg, &exist, &ck.train_config.loss);
    let value = g.value(loss).item() as f64;
    let mut grads = g.backward(loss);
    let gs = collect_grads(&mut grads, &p);
    ck.sgd.update(ck.detector.params.tensors_mut(), &gs, lr);
    ck.detector.update_running(&f.stats);
    ck.iteration += 1;
    Ok(value)
}

/// Mean IoU over lane classes `1..=L` of per-pixel argmax predictions,
/// accumulated over the whole set. Classes absent from both prediction and
/// target are left out of the mean.
pub fn evaluate_miou(det: &Detector<f32>, samples: &[Sample], batch_size: usize) -> Result<f64> {
    let lanes = det.config().lanes;
    let mut inter = vec![0usize; lanes + 1];
    let mut union = vec![0usize; lanes + 1];
    for chunk in samples.chunks(batch_size.max(1)) {
        let imgs: Vec<Image> = chunk.iter().map(|s| s.image.clone()).collect();
        for (out, s) in det.predict_batch(&imgs)?.iter().zip(chunk) {
            for (&p, &t) in out.argmax().iter().zip(&s.seg) {
                if p == t {
                    inter[p as usize] += 1;
                    union[p as usize] += 1;
                } else {
                    union[p as usize] += 1;
                    union[t as usize] += 1;
                }
            }
        }
    }
    let ious: Vec<f64> = (1..=lanes)
        .filter(|&c| union[c] > 0)
        .map(|c| inter[c] as f64 / union[c] as f64)
        .collect();
    Ok(if ious.is_empty() {
        0.0
    } else {
        ious.iter().sum::<f64>() / ious.len() as f64
    })
}

fn append_record(path: &Path, rec: &EpochRecord) -> Result<()> {
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    writeln!(f, "{}", serde_json::to_string(rec)?).map_err(|e| Error::io(path, e))
}

/// Trains from a fresh initialization, checkpointing `detector.ckpt` and
/// appending one `metrics.jsonl` record per epoch in `out_dir`.
pub fn train_detector(
    net: &DetectorConfig,
    cfg: &DetectorTrainConfig,
    train: &[ListEntry],
    val: &[ListEntry],
    seed: u64,
    out_dir: &Path,
) -> Result<(DetectorCheckpoint, Vec<EpochRecord>)> {
    cfg.validate()?;
    net.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Config("training and validation lists must be non-empty".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let ckpt_path = out_dir.join("detector.ckpt");
    let log_path = out_dir.join("metrics.jsonl");
    if log_path.exists() {
        std::fs::remove_file(&log_path).map_err(|e| Error::io(&log_path, e))?;
    }
    let mut ck = DetectorCheckpoint::new(net, cfg, seed)?;
    let train_set = SampleSet::open(train, net.lanes, cfg, "training")?;
    let val_cfg = DetectorTrainConfig {
        cache_samples: true,
        ..cfg.clone()
    };
    let val_set = SampleSet::open(val, net.lanes, &val_cfg, "validation")?;
    let val_samples = val_set.cache.as_deref().unwrap_or_default();
    if train_set.len() == 0 {
        return Err(Error::Config("no readable training samples".into()));
    }

    let max_iter = cfg.epochs * train_set.len().div_ceil(cfg.batch_size);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ SHUFFLE_SALT);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut records = Vec::new();
    ck.save(&ckpt_path)?;
    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        order.shuffle(&mut rng);
        let (mut total, mut batches) = (0.0, 0usize);
        let mut lr = cfg.lr;
        for idx in order.chunks(cfg.batch_size) {
            let batch = train_set.batch(idx)?;
            lr = poly_lr(cfg.lr, ck.iteration, max_iter, cfg.poly_power);
            let loss = train_step(&mut ck, &batch, lr)?;
            if !loss.is_finite() {
                return Err(Error::contract(format!("non-finite detector loss at epoch {epoch}")));
            }
            total += loss;
            batches += 1;
        }
        ck.epoch = epoch;
        let rec = EpochRecord {
            epoch,
            train_loss: total / batches.max(1) as f64,
            val_miou: evaluate_miou(&ck.detector, val_samples, cfg.batch_size)?,
            lr,
            seconds: start.elapsed().as_secs_f64(),
        };
        tracing::info!(
            epoch,
            loss = rec.train_loss,
            val_miou = rec.val_miou,
            seconds = rec.seconds,
            "detector epoch"
        );
        append_record(&log_path, &rec)?;
        ck.save(&ckpt_path)?;
        records.push(rec);
    }
    Ok((ck, records))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::tests::tiny;
    use rand::Rng;

    fn sample(rng: &mut ChaCha8Rng) -> Sample {
        let (h, w) = (16, 32);
        let col = rng.random_range(4..28);
        let mut img = Image::filled(h, w, 3, -0.5);
        let mut seg = vec![0u8; h * w];
        for y in 0..h {
            for x in col - 1..=col + 1 {
                for c in 0..3 {
                    img.set(c, y, x, 0.8);
                }
                seg[y * w + x] = 1;
            }
        }
        Sample {
            image: img,
            seg,
            exist: vec![true, false, false, false],
        }
    }

    #[test]
    fn first_batch_loss_decreases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = DetectorTrainConfig {
            resize: None,
            ..DetectorTrainConfig::default()
        };
        let mut ck = DetectorCheckpoint::new(&tiny(), &cfg, 4).unwrap();
        let batch: Vec<Sample> = (0..4).map(|_| sample(&mut rng)).collect();
        let losses: Vec<f64> = (0..10).map(|_| train_step(&mut ck, &batch, 1e-2).unwrap()).collect();
        assert!(losses[9] < losses[0], "{losses:?}");
    }

    #[test]
    fn label_resize_is_nearest() {
        let seg = vec![0, 1, 2, 3];
        assert_eq!(resize_labels(&seg, 2, 2, 4, 4), vec![0, 0, 1, 1, 0, 0, 1, 1, 2, 2, 3, 3, 2, 2, 3, 3]);
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = DetectorTrainConfig {
            resize: None,
            ..DetectorTrainConfig::default()
        };
        let mut ck = DetectorCheckpoint::new(&tiny(), &cfg, 9).unwrap();
        let batch: Vec<Sample> = (0..2).map(|_| sample(&mut rng)).collect();
        train_step(&mut ck, &batch, 1e-2).unwrap();
        let p = dir.path().join("d.ckpt");
        ck.save(&p).unwrap();
        let back = DetectorCheckpoint::load(&p).unwrap();
        assert_eq!(back.detector.params, ck.detector.params);
        assert_eq!(back.iteration, 1);
        for (a, b) in back.detector.running.iter().zip(&ck.detector.running) {
            for (x, y) in a.mean.iter().zip(&b.mean) {
                assert!((x - y).abs() < 1e-6);
            }
        }
    }
}
