//! GAN training over two unpaired domains, batch translation of well-lit
//! images with label carry-over, and assembly of augmented training lists.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::checkpoint_id;
use crate::datasets::{lines_path_for, write_text, DomainDataset, ListEntry};
use crate::error::{check_skip_budget, Error, Result};
use crate::imaging::{load_image, save_image, Image};
use crate::simcyclegan::{GanBundle, GanConfig, LossRecord};

const SHUFFLE_SALT: u64 = 0x7a4f_5e7d_0c1e;
const SAMPLE_SALT: u64 = 0x0a06_3e47_ed11;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransferConfig {
    pub gan: GanConfig,
    pub epochs: usize,
    pub batch_size: usize,
    /// `[height, width]` training images are resized to; native size when
    /// absent. A config file that omits the key gets native size.
    #[serde(default)]
    pub resize: Option<[usize; 2]>,
    pub cache_images: bool,
    pub max_skip_fraction: f64,
}

impl Default for TransferConfig {
    fn default() -> Self {
        Self {
            gan: GanConfig::default(),
            epochs: 100,
            batch_size: 1,
            resize: Some([295, 820]),
            cache_images: false,
            max_skip_fraction: 0.1,
        }
    }
}

impl TransferConfig {
    pub fn validate(&self) -> Result<()> {
        self.gan.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("transfer batch_size must be positive".into()));
        }
        if let Some([h, w]) = self.resize {
            if h == 0 || w == 0 {
                return Err(Error::Config("resize dims must be positive".into()));
            }
        }
        Ok(())
    }
}

/// Readable images of one domain, optionally cached in memory.
struct ImageSet {
    paths: Vec<PathBuf>,
    cache: Option<Vec<Image>>,
    resize: Option<[usize; 2]>,
}

fn load_resized(path: &Path, resize: Option<[usize; 2]>) -> Result<Image> {
    let img = load_image(path)?;
    Ok(match resize {
        Some([h, w]) if (h, w) != img.dims() => img.resize_bilinear(h, w),
        _ => img,
    })
}

impl ImageSet {
    fn open(ds: &DomainDataset, cfg: &TransferConfig) -> Result<Self> {
        let loaded: Vec<Result<Image>> = ds
            .entries
            .par_iter()
            .map(|e| load_resized(&e.image, cfg.resize))
            .collect();
        let mut paths = Vec::new();
        let mut cache = Vec::new();
        let mut skipped = 0;
        for (e, r) in ds.entries.iter().zip(loaded) {
            match r {
                Ok(img) => {
                    paths.push(e.image.clone());
                    if cfg.cache_images {
                        cache.push(img);
                    }
                }
                Err(err) => {
                    tracing::warn!("skipping {}: {err}", e.image.display());
                    skipped += 1;
                }
            }
        }
        check_skip_budget(skipped, ds.len(), cfg.max_skip_fraction)?;
        Ok(Self {
            paths,
            cache: cfg.cache_images.then_some(cache),
            resize: cfg.resize,
        })
    }

    fn get(&self, idx: &[usize]) -> Result<Vec<Image>> {
        match &self.cache {
            Some(c) => Ok(idx.iter().map(|&i| c[i].clone()).collect()),
            None => idx.par_iter().map(|&i| load_resized(&self.paths[i], self.resize)).collect(),
        }
    }
}

/// Per-epoch means of the logged loss components.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GanEpochRecord {
    pub epoch: usize,
    pub steps: usize,
    #[serde(flatten)]
    pub mean: LossRecord,
    pub seconds: f64,
}

fn mean_record(rs: &[LossRecord]) -> LossRecord {
    let n = rs.len().max(1) as f64;
    let mut m = LossRecord::default();
    for r in rs {
        m.adv_a += r.adv_a / n;
        m.adv_b += r.adv_b / n;
        m.cycle += r.cycle / n;
        m.g_total += r.g_total / n;
        m.d_a += r.d_a / n;
        m.d_b += r.d_b / n;
    }
    m
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransferRun {
    pub checkpoint: PathBuf,
    pub checkpoint_id: String,
    pub epochs: Vec<GanEpochRecord>,
}

/// Trains SIM-CycleGAN on unpaired batches. Writes `gan.ckpt` after every
/// epoch (and once before the first) and one `gan_losses.jsonl` record per epoch.
pub fn train_transfer(
    cfg: &TransferConfig,
    domain_x: &DomainDataset,
    domain_y: &DomainDataset,
    seed: u64,
    out_dir: &Path,
) -> Result<TransferRun> {
    cfg.validate()?;
    if domain_x.is_empty() || domain_y.is_empty() {
        return Err(Error::Config(format!(
            "both domains need images (X has {}, Y has {})",
            domain_x.len(),
            domain_y.len()
        )));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let ckpt = out_dir.join("gan.ckpt");
    let log_path = out_dir.join("gan_losses.jsonl");
    let mut log = std::fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;

    let xs = ImageSet::open(domain_x, cfg)?;
    let ys = ImageSet::open(domain_y, cfg)?;
    let mut bundle = GanBundle::new(&cfg.gan, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ SHUFFLE_SALT);
    let (nx, ny) = (xs.paths.len(), ys.paths.len());
    let steps = nx.max(ny).div_ceil(cfg.batch_size);
    let mut id = bundle.save(&ckpt)?;
    let mut records = Vec::new();
    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        let order = |n: usize, rng: &mut ChaCha8Rng| -> Vec<usize> {
            let mut o: Vec<usize> = Vec::with_capacity(steps * cfg.batch_size);
            while o.len() < steps * cfg.batch_size {
                let mut p: Vec<usize> = (0..n).collect();
                p.shuffle(rng);
                o.extend(p);
            }
            o
        };
        let ox = order(nx, &mut rng);
        let oy = order(ny, &mut rng);
        let mut step_records = Vec::with_capacity(steps);
        for s in 0..steps {
            let r = s * cfg.batch_size..(s + 1) * cfg.batch_size;
            let bx = xs.get(&ox[r.clone()])?;
            let by = ys.get(&oy[r])?;
            let rec = bundle.gan_training_step(&bx, &by, &cfg.gan.weights)?;
            if !rec.is_finite() {
                return Err(Error::contract(format!("non-finite GAN loss at epoch {epoch}, step {s}")));
            }
            step_records.push(rec);
        }
        bundle.epoch = epoch;
        let rec = GanEpochRecord {
            epoch,
            steps,
            mean: mean_record(&step_records),
            seconds: start.elapsed().as_secs_f64(),
        };
        tracing::info!(epoch, g = rec.mean.g_total, d_a = rec.mean.d_a, d_b = rec.mean.d_b, "gan epoch");
        writeln!(log, "{}", serde_json::to_string(&rec)?).map_err(|e| Error::io(&log_path, e))?;
        id = bundle.save(&ckpt)?;
        records.push(rec);
    }
    Ok(TransferRun {
        checkpoint: ckpt,
        checkpoint_id: id,
        epochs: records,
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub source: PathBuf,
    pub generated: PathBuf,
    /// The source's annotation, reused unchanged for the generated image.
    pub label: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransferManifest {
    pub records: Vec<ManifestRecord>,
    /// `(source, reason)` for images that could not be translated.
    pub skipped: Vec<(PathBuf, String)>,
    pub checkpoint_id: String,
    /// Seconds since the Unix epoch.
    pub timestamp: u64,
}

fn one_line(s: &str) -> String {
    s.replace(['\t', '\n', '\r'], " ")
}

impl TransferManifest {
    /// Tab-separated `source generated label` rows after `#` header lines.
    pub fn to_tsv(&self) -> String {
        let mut s = String::new();
        writeln!(s, "# checkpoint\t{}", self.checkpoint_id).unwrap();
        writeln!(s, "# timestamp\t{}", self.timestamp).unwrap();
        for (p, why) in &self.skipped {
            writeln!(s, "# skipped\t{}\t{}", p.display(), one_line(why)).unwrap();
        }
        for r in &self.records {
            writeln!(s, "{}\t{}\t{}", r.source.display(), r.generated.display(), r.label.display()).unwrap();
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_text(path, &self.to_tsv())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let err = |line: usize, msg: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            msg,
        };
        let mut m = TransferManifest {
            records: Vec::new(),
            skipped: Vec::new(),
            checkpoint_id: String::new(),
            timestamp: 0,
        };
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            match cols.as_slice() {
                ["# checkpoint", id] => m.checkpoint_id = id.to_string(),
                ["# timestamp", t] => {
                    m.timestamp = t.parse().map_err(|_| err(i + 1, format!("bad timestamp {t:?}")))?
                }
                ["# skipped", p, why] => m.skipped.push((PathBuf::from(p), why.to_string())),
                [c, ..] if c.starts_with('#') => {}
                [s, g, l] => m.records.push(ManifestRecord {
                    source: PathBuf::from(s),
                    generated: PathBuf::from(g),
                    label: PathBuf::from(l),
                }),
                _ => return Err(err(i + 1, format!("expected 3 tab-separated columns, found {}", cols.len()))),
            }
        }
        Ok(m)
    }
}

fn translate_one(bundle: &GanBundle, src: &Path, label: &Path, dst: &Path, size: Option<[usize; 2]>) -> Result<()> {
    let img = load_image(src)?;
    let out = match size {
        Some([h, w]) => {
            let (sh, sw) = img.dims();
            bundle.translate(&img.resize_bilinear(h, w))?.resize_bilinear(sh, sw)
        }
        None => bundle.translate(&img)?,
    };
    if out.dims() != img.dims() {
        return Err(Error::contract(format!(
            "generator changed {} from {:?} to {:?}",
            src.display(),
            img.dims(),
            out.dims()
        )));
    }
    save_image(dst, &out)?;
    let dst_label = lines_path_for(dst);
    std::fs::copy(label, &dst_label).map_err(|e| Error::io(&dst_label, e))?;
    Ok(())
}

/// Translates every annotated source with `G_A` at native resolution into
/// `out_dir/images/NNNNNN.png`, copies its annotation beside the output and
/// writes `out_dir/manifest.tsv`.
pub fn transfer_batch(checkpoint: &Path, sources: &DomainDataset, out_dir: &Path) -> Result<TransferManifest> {
    transfer_batch_with(checkpoint, sources, out_dir, None)
}

/// [`transfer_batch`] that, given `size`, translates every source at
/// `[height, width]` and resizes the result back to the source resolution,
/// as a generator without scale information match has to.
pub fn transfer_batch_with(
    checkpoint: &Path,
    sources: &DomainDataset,
    out_dir: &Path,
    size: Option<[usize; 2]>,
) -> Result<TransferManifest> {
    if !checkpoint.exists() {
        return Err(Error::Config(format!("checkpoint {} does not exist", checkpoint.display())));
    }
    let bundle = GanBundle::load(checkpoint)?;
    let id = checkpoint_id(checkpoint)?;
    let results: Vec<std::result::Result<ManifestRecord, (PathBuf, String)>> = sources
        .entries
        .par_iter()
        .enumerate()
        .map(|(i, e)| {
            let Some(label) = &e.annotation else {
                return Err((e.image.clone(), "source has no annotation".to_string()));
            };
            let generated = out_dir.join("images").join(format!("{i:06}.png"));
            translate_one(&bundle, &e.image, label, &generated, size)
                .map(|()| ManifestRecord {
                    source: e.image.clone(),
                    generated,
                    label: label.clone(),
                })
                .map_err(|err| (e.image.clone(), err.to_string()))
        })
        .collect();
    let mut manifest = TransferManifest {
        records: Vec::new(),
        skipped: Vec::new(),
        checkpoint_id: id,
        timestamp: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
    };
    for r in results {
        match r {
            Ok(rec) => manifest.records.push(rec),
            Err((p, why)) => {
                tracing::warn!("transfer skipped {}: {why}", p.display());
                manifest.skipped.push((p, why));
            }
        }
    }
    manifest.save(&out_dir.join("manifest.tsv"))?;
    Ok(manifest)
}

/// Number of generated entries added for ratio `n`.
pub fn generated_count(ratio_n: f64, low_light_count: usize) -> usize {
    (ratio_n * low_light_count as f64).round() as usize
}

/// All `real` entries plus `round(ratio_n * low_light_count)` generated ones
/// drawn uniformly without replacement. Every manifest source must be one of
/// the `real` entries; generated entries take its label map and flags.
pub fn build_augmented_trainset(
    real: &[ListEntry],
    manifest: &TransferManifest,
    ratio_n: f64,
    low_light_count: usize,
    seed: u64,
) -> Result<Vec<ListEntry>> {
    if !(ratio_n > 0.0) {
        return Err(Error::Config(format!("ratio_n must be positive, got {ratio_n}")));
    }
    if manifest.records.is_empty() {
        return Err(Error::Config("transfer manifest has no records".into()));
    }
    let requested = generated_count(ratio_n, low_light_count);
    if requested > manifest.records.len() {
        return Err(Error::Shortfall {
            requested,
            available: manifest.records.len(),
        });
    }
    let by_image: HashMap<&Path, &ListEntry> = real.iter().map(|e| (e.image.as_path(), e)).collect();
    let mut records: Vec<&ManifestRecord> = manifest.records.iter().collect();
    records.sort_by(|a, b| a.generated.cmp(&b.generated));
    let mut idx: Vec<usize> = (0..records.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ SAMPLE_SALT));
    idx.truncate(requested);
    idx.sort_unstable();

    let mut out = real.to_vec();
    for i in idx {
        let r = records[i];
        let src = by_image.get(r.source.as_path()).ok_or_else(|| {
            Error::contract(format!(
                "transfer source {} is not in the real training list",
                r.source.display()
            ))
        })?;
        out.push(ListEntry {
            image: r.generated.clone(),
            seg_label: src.seg_label.clone(),
            existence: src.existence.clone(),
            category: None,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn manifest(n: usize) -> (Vec<ListEntry>, TransferManifest) {
        let real: Vec<ListEntry> = (0..n)
            .map(|i| ListEntry {
                image: PathBuf::from(format!("/r/{i}.png")),
                seg_label: Some(PathBuf::from(format!("/r/{i}_seg.png"))),
                existence: Some(vec![1, 0, 1, (i % 2) as u8]),
                category: None,
            })
            .collect();
        let m = TransferManifest {
            records: (0..n)
                .map(|i| ManifestRecord {
                    source: PathBuf::from(format!("/r/{i}.png")),
                    generated: PathBuf::from(format!("/g/{i:06}.png")),
                    label: PathBuf::from(format!("/r/{i}.lines.txt")),
                })
                .collect(),
            skipped: vec![(PathBuf::from("/r/bad.png"), "decode\tfailed".into())],
            checkpoint_id: "abc".into(),
            timestamp: 42,
        };
        (real, m)
    }

    #[test]
    fn counts_follow_ratio() {
        assert_eq!(generated_count(1.0, 13_000), 13_000);
        assert_eq!(generated_count(0.25, 13_000), 3_250);
        let (real, m) = manifest(40);
        for (n, k) in [(0.25, 5), (1.0, 20), (2.0, 40)] {
            let list = build_augmented_trainset(&real, &m, n, 20, 3).unwrap();
            assert_eq!(list.len(), 40 + k);
        }
    }

    #[test]
    fn shortfall_is_named() {
        let (real, m) = manifest(10);
        let e = build_augmented_trainset(&real, &m, 4.0, 5, 0).unwrap_err();
        assert!(matches!(e, Error::Shortfall { requested: 20, available: 10 }));
        assert!(e.to_string().contains("short by 10"));
    }

    #[test]
    fn sampling_is_seeded_and_labels_follow_sources() {
        let (real, m) = manifest(30);
        let a = build_augmented_trainset(&real, &m, 0.5, 30, 9).unwrap();
        assert_eq!(a, build_augmented_trainset(&real, &m, 0.5, 30, 9).unwrap());
        assert_ne!(a, build_augmented_trainset(&real, &m, 0.5, 30, 10).unwrap());
        for e in &a[30..] {
            let i: usize = e.image.file_stem().unwrap().to_str().unwrap().parse().unwrap();
            assert_eq!(e.seg_label, real[i].seg_label);
            assert_eq!(e.existence, real[i].existence);
        }
        let mut shuffled = m.clone();
        shuffled.records.reverse();
        assert_eq!(a, build_augmented_trainset(&real, &shuffled, 0.5, 30, 9).unwrap());
    }

    #[test]
    fn foreign_sources_rejected() {
        let (real, mut m) = manifest(4);
        m.records[0].source = PathBuf::from("/test/0.png");
        assert!(build_augmented_trainset(&real, &m, 1.0, 4, 0).is_err());
    }

    #[test]
    fn manifest_tsv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let (_, m) = manifest(3);
        let p = dir.path().join("m.tsv");
        m.save(&p).unwrap();
        let back = TransferManifest::load(&p).unwrap();
        assert_eq!(back.records, m.records);
        assert_eq!(back.checkpoint_id, "abc");
        assert_eq!(back.timestamp, 42);
        assert_eq!(back.skipped[0].1, "decode failed");
    }
}
