//! Oracles shared by the integration and acceptance tests.
#![allow(dead_code)]

use lanegan::detector::{detection_loss_graph, DetectionLossWeights, Detector, DetectorConfig, Mode};
use lanegan::imaging::{Image, Polyline};
use lanegan::nn::{collect_grads, he_std, ParamStore};
use lanegan::simcyclegan::{DiscriminatorConfig, GanConfig, GanNetworks, GanObjective, GeneratorConfig, LossWeights};
use lanegan_tensor::{Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Image {
    let data = (0..3 * h * w).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    Image::new(h, w, 3, data).unwrap()
}

/// Output side of a conv layer: floor((i + 2p - k) / s) + 1.
pub fn conv_out(i: usize, k: usize, s: usize, p: usize) -> usize {
    (i + 2 * p - k) / s + 1
}

/// Relative error with a small floor so vanishing gradients compare absolutely.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-4)
}

/// Something with f64 parameters and a scalar objective.
pub trait Objective {
    fn stores(&mut self) -> Vec<&mut ParamStore<f64>>;
    /// Loss and, per store, per tensor, its gradient.
    fn eval(&self) -> (f64, Vec<Vec<Option<Tensor<f64>>>>);
}

#[derive(Clone, Copy, Debug)]
pub struct GradReport {
    pub checked: usize,
    pub worst: f64,
    pub kinks: usize,
}

fn central<O: Objective>(o: &mut O, (k, ti, ei): (usize, usize, usize), h: f64) -> f64 {
    let orig = o.stores()[k].tensors()[ti].data()[ei];
    o.stores()[k].tensors_mut()[ti].data_mut()[ei] = orig + h;
    let up = o.eval().0;
    o.stores()[k].tensors_mut()[ti].data_mut()[ei] = orig - h;
    let down = o.eval().0;
    o.stores()[k].tensors_mut()[ti].data_mut()[ei] = orig;
    (up - down) / (2.0 * h)
}

/// Compares analytic gradients of `samples` random scalars against central
/// differences at step 1e-3 (relative error < 1e-2).
///
/// Every sample must also match a 1e-6 step to 1e-3. A sample that fails the
/// 1e-3 comparison is excluded only when its differences at steps 1e-3, 1e-4
/// and 1e-6 disagree, i.e. a ReLU or L1 kink lies within the coarse step; at
/// most `samples` may be excluded.
pub fn check_gradients<O: Objective>(o: &mut O, samples: usize, rng: &mut ChaCha8Rng) -> Result<GradReport, String> {
    let (_, grads) = o.eval();
    let mut r = GradReport {
        checked: 0,
        worst: 0.0,
        kinks: 0,
    };
    while r.checked < samples {
        let nstores = o.stores().len();
        let k = rng.random_range(0..nstores);
        let ti = rng.random_range(0..o.stores()[k].len());
        let ei = rng.random_range(0..o.stores()[k].tensors()[ti].len());
        let at = (k, ti, ei);
        let analytic = grads[k][ti].as_ref().map_or(0.0, |t| t.data()[ei]);
        let fine = central(o, at, 1e-6);
        if rel_err(analytic, fine) >= 1e-3 {
            return Err(format!("{at:?}: analytic {analytic} vs fine difference {fine}"));
        }
        let coarse = central(o, at, 1e-3);
        let e = rel_err(analytic, coarse);
        if e < 1e-2 {
            r.worst = r.worst.max(e);
            r.checked += 1;
            continue;
        }
        let mid = central(o, at, 1e-4);
        if rel_err(coarse, mid) <= 1e-3 && rel_err(mid, fine) <= 1e-3 {
            return Err(format!("{at:?}: analytic {analytic} numeric {coarse} rel {e}"));
        }
        r.kinks += 1;
        if r.kinks > samples {
            return Err(format!("{} samples straddled a kink", r.kinks));
        }
    }
    Ok(r)
}

/// Redraws every conv kernel at He scale. Normalization layers make convs
/// scale-invariant, so at a tiny init a 1e-3 step would be a large relative
/// perturbation.
pub fn he_rescale(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng) {
    for t in store.tensors_mut() {
        if let &[_, cin, kh, kw] = t.shape() {
            let dist = Normal::new(0.0, he_std(cin * kh * kw)).unwrap();
            t.data_mut().iter_mut().for_each(|v| *v = dist.sample(rng));
        }
    }
}

pub fn tiny_gan_config() -> GanConfig {
    GanConfig {
        generator: GeneratorConfig {
            channels: 3,
            base_channels: 4,
            downsample_stages: 2,
            residual_blocks: 1,
        },
        discriminator: DiscriminatorConfig {
            channels: 3,
            base_channels: 4,
            strided_layers: 0,
        },
        ..GanConfig::default()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GanSide {
    Generators,
    Discriminators,
}

pub struct GanObjectiveFixture {
    pub nets: GanNetworks<f64>,
    pub x: Tensor<f64>,
    pub y: Tensor<f64>,
    pub side: GanSide,
}

impl GanObjectiveFixture {
    /// Tiny networks at He scale on one 8x8 image per domain.
    pub fn new(side: GanSide, rng: &mut ChaCha8Rng) -> Self {
        let mut nets = GanNetworks::new(&tiny_gan_config(), rng).unwrap().cast::<f64>();
        for s in [&mut nets.g_a.params, &mut nets.g_b.params, &mut nets.d_a.params, &mut nets.d_b.params] {
            he_rescale(s, rng);
        }
        let x = random_image(rng, 8, 8).to_tensor::<f64>();
        let y = random_image(rng, 8, 8).to_tensor::<f64>();
        Self { nets, x, y, side }
    }
}

impl Objective for GanObjectiveFixture {
    fn stores(&mut self) -> Vec<&mut ParamStore<f64>> {
        let n = &mut self.nets;
        vec![&mut n.g_a.params, &mut n.g_b.params, &mut n.d_a.params, &mut n.d_b.params]
    }

    fn eval(&self) -> (f64, Vec<Vec<Option<Tensor<f64>>>>) {
        let mut g = Graph::<f64>::new();
        let b = self.nets.bind(&mut g, true, true);
        let xs: Vec<Var> = vec![g.constant(self.x.clone())];
        let ys: Vec<Var> = vec![g.constant(self.y.clone())];
        let w = LossWeights::default();
        let pass = self
            .nets
            .generator_objective(&mut g, &b, &xs, &ys, &w, GanObjective::Log)
            .unwrap();
        let total = match self.side {
            GanSide::Generators => pass.total,
            GanSide::Discriminators => {
                self.nets
                    .discriminator_objective(&mut g, &b, &xs, &ys, &pass.fake_x, &pass.fake_y, GanObjective::Log)
                    .unwrap()
                    .0
            }
        };
        let value = g.value(total).item();
        let mut grads = g.backward(total);
        let all = [&b.g_a, &b.g_b, &b.d_a, &b.d_b]
            .into_iter()
            .map(|bound| collect_grads(&mut grads, bound))
            .collect();
        (value, all)
    }
}

pub fn tiny_detector_config() -> DetectorConfig {
    DetectorConfig {
        widths: vec![8, 8],
        encoder_blocks: vec![0, 1],
        dilations: vec![2],
        decoder_blocks: 1,
        exist_hidden: 8,
        min_input: 16,
        ..DetectorConfig::default()
    }
}

/// Training-mode detection loss of a tiny detector on a 16x32 batch of two.
pub struct DetectionObjectiveFixture {
    pub det: Detector<f64>,
    pub x: Tensor<f64>,
    pub seg: Vec<usize>,
    pub exist: Vec<f64>,
    pub weights: DetectionLossWeights,
}

impl DetectionObjectiveFixture {
    pub fn new(rng: &mut ChaCha8Rng) -> Self {
        let cfg = tiny_detector_config();
        let seed = rng.random();
        let mut det = Detector::new(&cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap().cast::<f64>();
        he_rescale(&mut det.params, rng);
        let (n, h, w) = (2, 16, 32);
        let imgs: Vec<Tensor<f64>> = (0..n).map(|_| random_image(rng, h, w).to_tensor()).collect();
        let x = Tensor::stack_batch(&imgs);
        let seg = (0..n * h * w).map(|_| rng.random_range(0..=cfg.lanes)).collect();
        let exist = (0..n * cfg.lanes).map(|_| f64::from(rng.random_range(0..2u8))).collect();
        Self {
            det,
            x,
            seg,
            exist,
            weights: DetectionLossWeights::default(),
        }
    }
}

impl Objective for DetectionObjectiveFixture {
    fn stores(&mut self) -> Vec<&mut ParamStore<f64>> {
        vec![&mut self.det.params]
    }

    fn eval(&self) -> (f64, Vec<Vec<Option<Tensor<f64>>>>) {
        let mut g = Graph::<f64>::new();
        let p = self.det.params.bind(&mut g, true);
        let x = g.constant(self.x.clone());
        let f = self.det.forward(&mut g, &p, x, Mode::Train).unwrap();
        let loss = detection_loss_graph(&mut g, f.logits, f.existence, &self.seg, &self.exist, &self.weights);
        let value = g.value(loss).item();
        let mut grads = g.backward(loss);
        (value, vec![collect_grads(&mut grads, &p)])
    }
}

fn seg_dist2(px: f64, py: f64, (ax, ay): (f64, f64), (bx, by): (f64, f64)) -> f64 {
    let (dx, dy) = (bx - ax, by - ay);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((px - ax) * dx + (py - ay) * dy) / len2).clamp(0.0, 1.0)
    };
    let (qx, qy) = (ax + t * dx, ay + t * dy);
    (px - qx).powi(2) + (py - qy).powi(2)
}

/// Pixels whose centre lies strictly within `width / 2` of the polyline;
/// empty for fewer than two points.
pub fn oracle_mask(line: &Polyline, width: f64, h: usize, w: usize) -> Vec<bool> {
    let r2 = (width / 2.0).powi(2);
    let pts = line.points();
    let mut out = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            let (px, py) = (x as f64, y as f64);
            out[y * w + x] = pts.windows(2).any(|s| seg_dist2(px, py, s[0], s[1]) < r2);
        }
    }
    out
}

pub fn oracle_iou(a: &Polyline, b: &Polyline, width: f64, h: usize, w: usize) -> f64 {
    let (ma, mb) = (oracle_mask(a, width, h, w), oracle_mask(b, width, h, w));
    let inter = ma.iter().zip(&mb).filter(|(p, q)| **p && **q).count();
    let union = ma.iter().zip(&mb).filter(|(p, q)| **p || **q).count();
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Largest number of disjoint (pred, gt) pairs with IoU above `thr`, by
/// trying every assignment.
pub fn brute_force_tp(ious: &[Vec<f64>], n_gt: usize, thr: f64) -> usize {
    fn go(i: usize, used: &mut Vec<bool>, ious: &[Vec<f64>], thr: f64) -> usize {
        if i == ious.len() {
            return 0;
        }
        let mut best = go(i + 1, used, ious, thr);
        for j in 0..used.len() {
            if !used[j] && ious[i][j] > thr {
                used[j] = true;
                best = best.max(1 + go(i + 1, used, ious, thr));
                used[j] = false;
            }
        }
        best
    }
    go(0, &mut vec![false; n_gt], ious, thr)
}

fn random_lane(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Polyline {
    let n = rng.random_range(2..=5);
    let mut ys: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..h as f64)).collect();
    ys.sort_by(f64::total_cmp);
    ys.dedup();
    if ys.len() < 2 {
        ys = vec![0.0, (h - 1) as f64];
    }
    let x0 = rng.random_range(0.0..w as f64);
    let slope = rng.random_range(-1.5..1.5);
    let pts = ys
        .iter()
        .map(|&y| ((x0 + slope * y + rng.random_range(-2.0..2.0)).clamp(0.0, (w - 1) as f64), y))
        .collect();
    Polyline::new(pts).unwrap()
}

/// Ground-truth lanes plus predictions: jittered copies of some of them and
/// unrelated lanes.
pub fn random_scene(rng: &mut ChaCha8Rng, h: usize, w: usize) -> (Vec<Polyline>, Vec<Polyline>) {
    let gts: Vec<Polyline> = (0..rng.random_range(0..=4)).map(|_| random_lane(rng, h, w)).collect();
    let mut preds = Vec::new();
    for g in &gts {
        if rng.random_bool(0.7) {
            let dx = rng.random_range(-4.0..4.0);
            let pts = g.points().iter().map(|&(x, y)| ((x + dx).clamp(0.0, (w - 1) as f64), y)).collect();
            preds.push(Polyline::new(pts).unwrap());
        }
    }
    for _ in 0..rng.random_range(0..=2) {
        preds.push(random_lane(rng, h, w));
    }
    let k = preds.len();
    if k > 1 {
        preds.rotate_left(rng.random_range(0..k));
    }
    (preds, gts)
}
