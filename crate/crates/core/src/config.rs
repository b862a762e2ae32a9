//! Run configuration: named profiles, TOML overlays and environment overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datasets::SyntheticSceneConfig;
use crate::detector::{DetectorConfig, DetectorTrainConfig};
use crate::evaluator::EvalConfig;
use crate::postprocess::DecodeConfig;
use crate::transfer::TransferConfig;
use crate::{Error, Result};

pub const DESK_PROFILE: &str = include_str!("../../../configs/desk.toml");
pub const FULL_PROFILE: &str = include_str!("../../../configs/full.toml");

/// Prefix of environment overrides: `LANEGAN_<SECTION>__<KEY>=value`.
pub const ENV_PREFIX: &str = "LANEGAN_";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    Desk,
    Full,
}

impl Profile {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Profile::Desk),
            "full" => Ok(Profile::Full),
            other => Err(Error::Config(format!("unknown profile {other:?} (expected desk or full)"))),
        }
    }

    pub fn defaults(self) -> &'static str {
        match self {
            Profile::Desk => DESK_PROFILE,
            Profile::Full => FULL_PROFILE,
        }
    }
}

/// Dataset locations. Unset entries default to the layout that `synth`
/// writes under `work_dir`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub work_dir: PathBuf,
    /// Labelled well-lit training list (`image label flags`).
    pub train_list: Option<PathBuf>,
    pub val_list: Option<PathBuf>,
    /// Well-lit GAN images: a directory or a list file.
    pub domain_x: Option<PathBuf>,
    /// Low-light GAN images: a directory or a list file.
    pub domain_y: Option<PathBuf>,
    /// Images translated to low light; must belong to the training list.
    pub transfer_sources: Option<PathBuf>,
    /// Directory holding test images and their `.lines.txt` annotations.
    pub test_root: Option<PathBuf>,
    /// `path<TAB>category` index, paths relative to `test_root`.
    pub test_index: Option<PathBuf>,
}

impl Paths {
    fn or(&self, v: &Option<PathBuf>, default: &[&str]) -> PathBuf {
        v.clone().unwrap_or_else(|| default.iter().fold(self.work_dir.clone(), |p, s| p.join(s)))
    }

    pub fn data_dir(&self) -> PathBuf {
        self.work_dir.join("data")
    }

    pub fn train_list(&self) -> PathBuf {
        self.or(&self.train_list, &["data", "train", "list.txt"])
    }

    pub fn val_list(&self) -> PathBuf {
        self.or(&self.val_list, &["data", "val", "list.txt"])
    }

    pub fn domain_x(&self) -> PathBuf {
        self.domain_x.clone().unwrap_or_else(|| self.train_list())
    }

    pub fn domain_y(&self) -> PathBuf {
        self.or(&self.domain_y, &["data", "dark_pool", "list.txt"])
    }

    pub fn transfer_sources(&self) -> PathBuf {
        self.transfer_sources.clone().unwrap_or_else(|| self.train_list())
    }

    pub fn test_root(&self) -> PathBuf {
        self.or(&self.test_root, &["data", "test"])
    }

    pub fn test_index(&self) -> PathBuf {
        self.test_index.clone().unwrap_or_else(|| self.test_root().join("index.txt"))
    }

    pub fn gan_dir(&self) -> PathBuf {
        self.work_dir.join("gan")
    }

    pub fn gan_checkpoint(&self) -> PathBuf {
        self.gan_dir().join("gan.ckpt")
    }

    pub fn transfer_dir(&self) -> PathBuf {
        self.work_dir.join("transfer")
    }

    pub fn manifest(&self) -> PathBuf {
        self.transfer_dir().join("manifest.tsv")
    }
}

/// Split sizes of the synthetic desk dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthPlan {
    pub train: usize,
    pub val: usize,
    /// Unlabelled real low-light images for the GAN.
    pub dark_pool: usize,
    pub test_normal: usize,
    pub test_night: usize,
    pub test_crossroad: usize,
    pub scene: SyntheticSceneConfig,
}

impl Default for SynthPlan {
    fn default() -> Self {
        Self {
            train: 200,
            val: 50,
            dark_pool: 50,
            test_normal: 50,
            test_night: 100,
            test_crossroad: 10,
            scene: SyntheticSceneConfig::default(),
        }
    }
}

/// Settings of the baseline / CycleGAN / SIM-CycleGAN comparison.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompareConfig {
    /// Include the arm whose GAN trains and translates at a fixed size.
    pub cyclegan: bool,
    /// `[height, width]` of that arm.
    pub cyclegan_size: [usize; 2],
}

impl Default for CompareConfig {
    fn default() -> Self {
        Self {
            cyclegan: true,
            cyclegan_size: [256, 256],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub profile: Profile,
    pub seed: u64,
    /// Generated low-light images per real low-light image.
    pub ratio_n: f64,
    pub ablation_ratios: Vec<f64>,
    /// Real low-light count that `ratio_n` multiplies; the size of domain Y when unset.
    #[serde(default)]
    pub low_light_count: Option<usize>,
    pub paths: Paths,
    #[serde(default)]
    pub synth: SynthPlan,
    pub transfer: TransferConfig,
    pub detector: DetectorConfig,
    pub detector_train: DetectorTrainConfig,
    pub decode: DecodeConfig,
    pub eval: EvalConfig,
    #[serde(default)]
    pub compare: CompareConfig,
}

/// Recursively overlays `top` onto `base`.
pub fn merge(base: &mut toml::Value, top: toml::Value) {
    match (base, top) {
        (toml::Value::Table(b), toml::Value::Table(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, t) => *b = t,
    }
}

fn parse_toml(text: &str, origin: &str) -> Result<toml::Value> {
    text.parse::<toml::Table>()
        .map(toml::Value::Table)
        .map_err(|e| Error::Config(format!("{origin}: {e}")))
}

/// Parses an override value as TOML (`5`, `0.25`, `true`, `[1, 2]`), falling
/// back to a plain string.
fn parse_scalar(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Turns `(LANEGAN_DETECTOR_TRAIN__EPOCHS, 5)` into `{detector_train = {epochs = 5}}`.
pub fn env_override(key: &str, value: &str) -> Option<toml::Value> {
    let rest = key.strip_prefix(ENV_PREFIX)?;
    if rest.is_empty() {
        return None;
    }
    let parts: Vec<String> = rest.split("__").map(str::to_ascii_lowercase).collect();
    if parts.iter().any(String::is_empty) {
        return None;
    }
    let mut v = parse_scalar(value);
    for p in parts.iter().rev() {
        let mut t = toml::Table::new();
        t.insert(p.clone(), v);
        v = toml::Value::Table(t);
    }
    Some(v)
}

impl RunConfig {
    /// Profile defaults, then the optional file, then `env` overrides.
    pub fn load(
        profile: Profile,
        file: Option<&Path>,
        env: impl IntoIterator<Item = (String, String)>,
    ) -> Result<Self> {
        let mut v = parse_toml(profile.defaults(), "built-in profile")?;
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            merge(&mut v, parse_toml(&text, &path.display().to_string())?);
        }
        let mut overrides: Vec<(String, String)> = env.into_iter().filter(|(k, _)| k.starts_with(ENV_PREFIX)).collect();
        overrides.sort();
        for (k, val) in overrides {
            let o = env_override(&k, &val).ok_or_else(|| Error::Config(format!("malformed override {k}")))?;
            merge(&mut v, o);
        }
        let cfg: RunConfig = v
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.ratio_n > 0.0) {
            return Err(Error::Config(format!("ratio_n must be positive, got {}", self.ratio_n)));
        }
        if self.ablation_ratios.iter().any(|n| !(*n > 0.0)) {
            return Err(Error::Config("ablation ratios must be positive".into()));
        }
        if self.detector.lanes != self.synth.scene.lanes {
            return Err(Error::Config(format!(
                "detector has {} lane slots but scenes have {}",
                self.detector.lanes, self.synth.scene.lanes
            )));
        }
        self.transfer.validate()?;
        self.detector.validate()?;
        self.detector_train.validate()?;
        self.eval.validate()
    }

    /// Fails naming the first referenced input that does not exist.
    pub fn check_inputs(&self, paths: &[PathBuf]) -> Result<()> {
        for p in paths {
            if !p.exists() {
                return Err(Error::Config(format!("{} does not exist", p.display())));
            }
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}
