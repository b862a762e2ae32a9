//! Procedural road scenes with known lane geometry in a bright and a dark
//! rendering.
//!
//! Geometry and the bright rendering come from a ChaCha stream keyed by
//! `(seed, scene index)`, so the same scene in either light domain has the
//! same lanes. The dark rendering applies [`DarkTransform`] on top with noise
//! from a separate stream.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{format_lines, write_text, CategoryIndex, Domain, DomainDataset, ListEntry};
use crate::error::{Error, Result};
use crate::imaging::{rasterize_into, save_image, save_label_map, Image, LaneMask, Polyline};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LightDomain {
    Bright,
    Dark,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DarkTransform {
    pub gamma: f64,
    pub brightness: f64,
    pub noise_std: f64,
}

impl Default for DarkTransform {
    fn default() -> Self {
        Self {
            gamma: 2.2,
            brightness: 0.35,
            noise_std: 0.02,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSceneConfig {
    pub height: usize,
    pub width: usize,
    /// Lane slots, left to right.
    pub lanes: usize,
    /// Inclusive range of lanes drawn per scene; `[0, 0]` renders lane-free scenes.
    pub lane_count: [usize; 2],
    /// Road bend as a fraction of the image width.
    pub curvature: [f64; 2],
    pub light: LightDomain,
    pub dark: DarkTransform,
    pub bright_noise_std: f64,
    /// Stroke width of lanes in the segmentation labels.
    pub label_width: f64,
    pub seed: u64,
    /// Index of the first scene; disjoint ranges give disjoint scenes.
    pub first_index: u64,
}

impl Default for SyntheticSceneConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 128,
            lanes: 4,
            lane_count: [2, 4],
            curvature: [-0.3, 0.3],
            light: LightDomain::Bright,
            dark: DarkTransform::default(),
            bright_noise_std: 0.01,
            label_width: 8.0,
            seed: 0,
            first_index: 0,
        }
    }
}

impl SyntheticSceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height < 16 || self.width < 16 {
            return Err(Error::Config("synthetic scenes need at least 16x16 pixels".into()));
        }
        let [lo, hi] = self.lane_count;
        if lo > hi || hi > self.lanes || self.lanes > 254 {
            return Err(Error::Config(format!(
                "lane_count {lo}..={hi} must fit in {} slots",
                self.lanes
            )));
        }
        if self.curvature[0] > self.curvature[1] {
            return Err(Error::Config("curvature range is reversed".into()));
        }
        if !(self.dark.brightness > 0.0 && self.dark.brightness < 1.0 && self.dark.gamma >= 1.0) {
            return Err(Error::Config(
                "dark transform needs 0 < brightness < 1 and gamma >= 1".into(),
            ));
        }
        Ok(())
    }

    pub fn category(&self) -> &'static str {
        match (self.lane_count[1], self.light) {
            (0, _) => "Crossroad",
            (_, LightDomain::Bright) => "Normal",
            (_, LightDomain::Dark) => "Night",
        }
    }
}

/// One rendered scene.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub image: Image,
    /// Lane per slot, `None` when the slot is empty.
    pub lanes: Vec<Option<Polyline>>,
    /// Per-pixel class: 0 background, `k + 1` for slot `k`.
    pub seg: Vec<u8>,
}

impl Scene {
    pub fn existence(&self) -> Vec<u8> {
        self.lanes.iter().map(|l| u8::from(l.is_some())).collect()
    }

    pub fn present_lanes(&self) -> impl Iterator<Item = &Polyline> {
        self.lanes.iter().flatten()
    }
}

fn scene_rng(seed: u64, index: u64, salt: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ salt);
    rng.set_stream(index);
    rng
}

const DARK_SALT: u64 = 0xda7c_0000_0000_0001;

/// Applies gamma, brightness scaling and Gaussian noise to a `[-1, 1]` image.
pub fn darken<R: Rng>(img: &Image, t: &DarkTransform, rng: &mut R) -> Image {
    let noise = Normal::new(0.0, t.noise_std.max(0.0)).expect("finite std");
    let mut out = img.clone();
    for v in out.data_mut() {
        let u = ((*v as f64 + 1.0) * 0.5).clamp(0.0, 1.0);
        let d = (t.brightness * u.powf(t.gamma) + noise.sample(rng)).clamp(0.0, 1.0);
        *v = (d * 2.0 - 1.0) as f32;
    }
    out
}

struct LaneShape {
    bottom_x: f64,
    dashed: bool,
    color: [f64; 3],
}

struct Geometry {
    horizon: f64,
    vanish_x: f64,
    bend: f64,
}

impl Geometry {
    fn t(&self, y: f64, h: usize) -> f64 {
        (y - self.horizon) / ((h - 1) as f64 - self.horizon)
    }

    fn x_at(&self, bottom_x: f64, t: f64, w: usize) -> f64 {
        self.vanish_x + (bottom_x - self.vanish_x) * t + self.bend * w as f64 * t * (1.0 - t)
    }
}

const MIN_LANE_T: f64 = 0.12;

fn lerp3(a: [f64; 3], b: [f64; 3], s: f64) -> [f64; 3] {
    [a[0] + (b[0] - a[0]) * s, a[1] + (b[1] - a[1]) * s, a[2] + (b[2] - a[2]) * s]
}

/// Slots drawn for a given lane count, biased toward the ego lanes like CULane.
fn choose_slots<R: Rng>(slots: usize, count: usize, rng: &mut R) -> Vec<usize> {
    if count == 0 {
        return Vec::new();
    }
    if count >= slots {
        return (0..slots).collect();
    }
    let ego = slots / 2;
    let mut lo = ego.saturating_sub(1);
    let mut hi = lo + 1;
    let mut chosen: Vec<usize> = vec![lo];
    if count >= 2 {
        chosen.push(hi.min(slots - 1));
    }
    while chosen.len() < count {
        let left_ok = lo > 0;
        let right_ok = hi + 1 < slots;
        if left_ok && (!right_ok || rng.random_bool(0.5)) {
            lo -= 1;
            chosen.push(lo);
        } else {
            hi += 1;
            chosen.push(hi);
        }
    }
    chosen.sort_unstable();
    chosen.dedup();
    chosen
}

/// Renders scene `index` of the configured domain.
pub fn render_scene(cfg: &SyntheticSceneConfig, index: u64) -> Scene {
    let (h, w) = (cfg.height, cfg.width);
    let (hf, wf) = (h as f64, w as f64);
    let mut rng = scene_rng(cfg.seed, index, 0);

    let geo = Geometry {
        horizon: hf * rng.random_range(0.30..0.40),
        vanish_x: wf * rng.random_range(0.40..0.60),
        bend: rng.random_range(cfg.curvature[0]..=cfg.curvature[1]),
    };
    let spacing = wf * rng.random_range(0.30..0.38);
    let center = wf * 0.5 + wf * rng.random_range(-0.08..0.08);
    let slot_x = |k: f64| center + (k - (cfg.lanes as f64 - 1.0) / 2.0) * spacing;

    let count = rng.random_range(cfg.lane_count[0]..=cfg.lane_count[1]);
    let slots = choose_slots(cfg.lanes, count, &mut rng);
    let yellow = rng.random_bool(0.3);
    let shapes: Vec<Option<LaneShape>> = (0..cfg.lanes)
        .map(|k| {
            let dashed = rng.random_bool(0.5);
            slots.contains(&k).then(|| LaneShape {
                bottom_x: slot_x(k as f64),
                dashed: dashed && k != 0 && k + 1 != cfg.lanes,
                color: if yellow && k + 1 == cfg.lanes / 2 {
                    [0.95, 0.82, 0.30]
                } else {
                    [0.96, 0.96, 0.93]
                },
            })
        })
        .collect();
    let dash_phase: f64 = rng.random_range(0.0..1.0);

    let road_left = slot_x(-0.7);
    let road_right = slot_x(cfg.lanes as f64 - 0.3);
    let road_gray = rng.random_range(0.33..0.50);
    let grass = [
        rng.random_range(0.20..0.32),
        rng.random_range(0.38..0.52),
        rng.random_range(0.15..0.25),
    ];
    let sky_top = [0.45, 0.60, 0.85];
    let sky_low = [0.80, 0.83, 0.86];
    let gain = rng.random_range(0.9..1.1);

    let buildings: Vec<(f64, f64, f64, f64)> = (0..rng.random_range(3..7))
        .map(|_| {
            let x0 = rng.random_range(0.0..wf);
            let bw = rng.random_range(6.0..wf * 0.2);
            let top = geo.horizon * rng.random_range(0.2..0.9);
            (x0, x0 + bw, top, rng.random_range(0.30..0.60))
        })
        .collect();
    let bushes: Vec<(f64, f64, f64, f64)> = (0..rng.random_range(4..10))
        .map(|_| {
            let y = rng.random_range(geo.horizon..hf);
            let left = rng.random_bool(0.5);
            let t = geo.t(y, h).max(0.0);
            let edge = if left {
                geo.x_at(road_left, t, w)
            } else {
                geo.x_at(road_right, t, w)
            };
            let off = rng.random_range(3.0..wf * 0.3);
            let x = if left { edge - off } else { edge + off };
            (x, y, rng.random_range(1.5..5.0), rng.random_range(0.5..0.8))
        })
        .collect();

    let texture = Normal::new(0.0, 0.025).expect("finite std");
    let noise = Normal::new(0.0, cfg.bright_noise_std.max(0.0)).expect("finite std");
    let mut img = Image::filled(h, w, 3, 0.0);
    for y in 0..h {
        let yf = y as f64;
        let t = geo.t(yf, h);
        let (rl, rr) = (geo.x_at(road_left, t, w), geo.x_at(road_right, t, w));
        let half_width = 0.6 + 1.6 * t;
        let dash_on = (1.0 / (t + 0.15) * 0.9 + dash_phase).fract() < 0.55;
        for x in 0..w {
            let xf = x as f64;
            let mut c = if yf < geo.horizon {
                let mut c = lerp3(sky_top, sky_low, yf / geo.horizon);
                for &(x0, x1, top, shade) in &buildings {
                    if xf >= x0 && xf < x1 && yf >= top {
                        c = [shade, shade * 0.97, shade * 0.95];
                    }
                }
                c
            } else if xf >= rl && xf <= rr {
                let g = road_gray * (0.9 + 0.15 * t) + texture.sample(&mut rng);
                [g, g, g * 1.02]
            } else {
                let mut c = grass.map(|v| v * (0.85 + 0.3 * t) + texture.sample(&mut rng));
                for &(bx, by, r, s) in &bushes {
                    if (xf - bx).powi(2) + (yf - by).powi(2) < r * r {
                        c = grass.map(|v| v * s);
                    }
                }
                c
            };
            if t > 0.04 {
                for s in shapes.iter().flatten() {
                    if s.dashed && !dash_on {
                        continue;
                    }
                    let lx = geo.x_at(s.bottom_x, t, w);
                    if (xf - lx).abs() < half_width {
                        c = s.color;
                    }
                }
            }
            for (ch, v) in c.iter().enumerate() {
                let u = (v * gain + noise.sample(&mut rng)).clamp(0.0, 1.0);
                img.set(ch, y, x, (u * 2.0 - 1.0) as f32);
            }
        }
    }

    let lanes: Vec<Option<Polyline>> = shapes
        .iter()
        .map(|s| {
            let s = s.as_ref()?;
            let mut run: Vec<(f64, f64)> = Vec::new();
            let mut best: Vec<(f64, f64)> = Vec::new();
            let mut y = (h - 1) as f64;
            while geo.t(y, h) >= MIN_LANE_T {
                let x = geo.x_at(s.bottom_x, geo.t(y, h), w);
                if (0.0..=(w - 1) as f64).contains(&x) {
                    run.push(((x * 1000.0).round() / 1000.0, y));
                } else if !run.is_empty() {
                    if run.len() > best.len() {
                        best = std::mem::take(&mut run);
                    }
                    run.clear();
                }
                y -= 2.0;
            }
            if run.len() > best.len() {
                best = run;
            }
            (best.len() >= 2).then(|| Polyline::new(best).expect("rows strictly decrease"))
        })
        .collect();

    let mut seg = vec![0u8; h * w];
    for (k, lane) in lanes.iter().enumerate() {
        if let Some(l) = lane {
            let mut mask = LaneMask::new(h, w);
            rasterize_into(l, cfg.label_width, &mut mask);
            for (s, &b) in seg.iter_mut().zip(mask.bits()) {
                if b && *s == 0 {
                    *s = k as u8 + 1;
                }
            }
        }
    }

    let image = match cfg.light {
        LightDomain::Bright => img,
        LightDomain::Dark => darken(&img, &cfg.dark, &mut scene_rng(cfg.seed, index, DARK_SALT)),
    };
    Scene { image, lanes, seg }
}

/// Renders `n` scenes into `out_dir`.
///
/// Layout: `images/NNNNN.png` with a sibling `.lines.txt`, `labels/NNNNN.png`
/// class maps, `list.txt` (image, label, existence flags) and `index.txt`
/// (image path and category).
pub fn synth_generate(cfg: &SyntheticSceneConfig, n: usize, out_dir: &Path) -> Result<DomainDataset> {
    cfg.validate()?;
    if n == 0 {
        return Err(Error::contract("synth_generate needs n >= 1"));
    }
    let rows: Vec<(String, String, Vec<u8>)> = (0..n as u64)
        .into_par_iter()
        .map(|i| -> Result<_> {
            let index = cfg.first_index + i;
            let scene = render_scene(cfg, index);
            let name = format!("{index:05}");
            let img_rel = format!("images/{name}.png");
            let lab_rel = format!("labels/{name}.png");
            let img_path = out_dir.join(&img_rel);
            save_image(&img_path, &scene.image)?;
            write_text(&img_path.with_extension("lines.txt"), &format_lines(scene.present_lanes()))?;
            save_label_map(&out_dir.join(&lab_rel), cfg.height, cfg.width, &scene.seg)?;
            Ok((img_rel, lab_rel, scene.existence()))
        })
        .collect::<Result<_>>()?;

    let entries: Vec<ListEntry> = rows
        .iter()
        .map(|(img, lab, ex)| ListEntry {
            image: out_dir.join(img),
            seg_label: Some(out_dir.join(lab)),
            existence: Some(ex.clone()),
            category: Some(cfg.category().to_string()),
        })
        .collect();
    super::write_train_list(&out_dir.join("list.txt"), &entries)?;
    let mut index = CategoryIndex::default();
    for (img, _, _) in &rows {
        index.push(img.clone(), cfg.category());
    }
    index.save(&out_dir.join("index.txt"))?;

    let domain = match cfg.light {
        LightDomain::Bright => Domain::X,
        LightDomain::Dark => Domain::Y,
    };
    Ok(DomainDataset::from_images(
        entries.into_iter().map(|e| e.image).collect(),
        domain,
        cfg.seed,
    ))
}
