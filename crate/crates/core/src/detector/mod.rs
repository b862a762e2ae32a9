//! Encoder-decoder lane segmentation network with a lane-existence head.
//!
//! The encoder stacks downsampler blocks (strided convolution concatenated
//! with max pooling) and factorized residual blocks; the decoder upsamples
//! back to input resolution and emits one background plus `lanes` logit maps.

mod train;

use lanegan_tensor::{BatchStats, Conv2dSpec, Element, Graph, Pad4, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{Image, ScaleTrace};
use crate::nn::{he_std, Bound, Builder, Conv, ConvTranspose, Linear, ParamId, ParamStore};

pub use train::{
    evaluate_miou, load_samples, train_detector, DetectorCheckpoint, DetectorTrainConfig, EpochRecord, Sample,
    CHECKPOINT_KIND,
};

/// Lower clamp of probabilities inside logarithms.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorConfig {
    pub channels: usize,
    pub lanes: usize,
    /// Output width of each downsampler; one encoder stage per entry.
    pub widths: Vec<usize>,
    /// Factorized residual blocks after each downsampler.
    pub encoder_blocks: Vec<usize>,
    /// Dilations cycled over the blocks of the deepest stage.
    pub dilations: Vec<usize>,
    /// Residual blocks after each intermediate upsampler.
    pub decoder_blocks: usize,
    pub exist_hidden: usize,
    /// Smallest accepted input side.
    pub min_input: usize,
    pub bn_eps: f64,
    pub bn_momentum: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            channels: 3,
            lanes: 4,
            widths: vec![16, 64, 128],
            encoder_blocks: vec![0, 5, 8],
            dilations: vec![2, 4, 8, 16],
            decoder_blocks: 2,
            exist_hidden: 128,
            min_input: 32,
            bn_eps: 1e-3,
            bn_momentum: 0.1,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(Error::Config("detector widths must be non-empty and positive".into()));
        }
        if self.encoder_blocks.len() != self.widths.len() {
            return Err(Error::Config(format!(
                "encoder_blocks has {} entries for {} stages",
                self.encoder_blocks.len(),
                self.widths.len()
            )));
        }
        if self.dilations.is_empty() || self.dilations.contains(&0) {
            return Err(Error::Config("dilations must be non-empty and positive".into()));
        }
        if self.lanes == 0 || self.channels == 0 || self.exist_hidden == 0 {
            return Err(Error::Config("lanes, channels and exist_hidden must be positive".into()));
        }
        if !(self.bn_momentum > 0.0 && self.bn_momentum <= 1.0) || !(self.bn_eps > 0.0) {
            return Err(Error::Config("bn_momentum must lie in (0, 1] and bn_eps be positive".into()));
        }
        Ok(())
    }

    pub fn padding_multiple(&self) -> usize {
        1 << self.widths.len()
    }

    pub fn classes(&self) -> usize {
        self.lanes + 1
    }
}

/// Per-pixel class probabilities and per-lane existence confidences.
#[derive(Clone, Debug, PartialEq)]
pub struct DetectorOutput {
    pub lanes: usize,
    pub height: usize,
    pub width: usize,
    /// `(lanes + 1) x height x width`, channel 0 is background.
    pub prob_maps: Vec<f32>,
    pub existence: Vec<f32>,
}

impl DetectorOutput {
    pub fn prob_map(&self, class: usize) -> &[f32] {
        let plane = self.height * self.width;
        &self.prob_maps[class * plane..(class + 1) * plane]
    }

    /// Per-pixel argmax class, ties to the lower class.
    pub fn argmax(&self) -> Vec<u8> {
        let plane = self.height * self.width;
        (0..plane)
            .map(|k| {
                let mut best = 0;
                for c in 1..=self.lanes {
                    if self.prob_maps[c * plane + k] > self.prob_maps[best * plane + k] {
                        best = c;
                    }
                }
                best as u8
            })
            .collect()
    }

    /// Splits a batch of logits `[n, L+1, h, w]` and existence `[n, L]` into outputs.
    pub fn from_logits<T: Element>(logits: &Tensor<T>, existence: &Tensor<T>) -> Vec<DetectorOutput> {
        let (n, c, h, w) = logits.dims4();
        let plane = h * w;
        (0..n)
            .map(|i| {
                let src = &logits.data()[i * c * plane..(i + 1) * c * plane];
                let mut prob = vec![0.0f32; c * plane];
                for k in 0..plane {
                    let mx = (0..c).map(|ci| src[ci * plane + k].as_f64()).fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = (0..c).map(|ci| (src[ci * plane + k].as_f64() - mx).exp()).sum();
                    for ci in 0..c {
                        prob[ci * plane + k] = ((src[ci * plane + k].as_f64() - mx).exp() / z) as f32;
                    }
                }
                DetectorOutput {
                    lanes: c - 1,
                    height: h,
                    width: w,
                    prob_maps: prob,
                    existence: existence.data()[i * (c - 1)..(i + 1) * (c - 1)]
                        .iter()
                        .map(|v| v.as_f64() as f32)
                        .collect(),
                }
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectionLossWeights {
    /// Segmentation weight.
    pub lambda_1: f64,
    /// Existence weight.
    pub lambda_2: f64,
    /// Negative log-likelihood weight of background pixels; lane classes weigh 1.
    pub background_weight: f64,
}

impl Default for DetectionLossWeights {
    fn default() -> Self {
        Self {
            lambda_1: 0.9,
            lambda_2: 0.1,
            background_weight: 0.4,
        }
    }
}

impl DetectionLossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_1 >= 0.0 && self.lambda_2 >= 0.0 && self.background_weight > 0.0) {
            return Err(Error::Config(
                "loss weights must be non-negative and background_weight positive".into(),
            ));
        }
        Ok(())
    }

    pub fn class_weights(&self, lanes: usize) -> Vec<f64> {
        let mut w = vec![1.0; lanes + 1];
        w[0] = self.background_weight;
        w
    }
}

fn check_targets(lanes: usize, plane: usize, seg: &[u8], exist: &[bool]) -> Result<()> {
    if seg.len() != plane || exist.len() != lanes {
        return Err(Error::contract(format!(
            "targets have {} pixels and {} flags, expected {plane} and {lanes}",
            seg.len(),
            exist.len()
        )));
    }
    if let Some(&bad) = seg.iter().find(|&&c| c as usize > lanes) {
        return Err(Error::contract(format!("class index {bad} outside 0..={lanes}")));
    }
    Ok(())
}

/// `λ1 · weighted mean NLL of the target class + λ2 · mean existence BCE`.
pub fn detection_loss(out: &DetectorOutput, seg: &[u8], exist: &[bool], w: &DetectionLossWeights) -> Result<f64> {
    let plane = out.height * out.width;
    check_targets(out.lanes, plane, seg, exist)?;
    let cw = w.class_weights(out.lanes);
    let (mut nll, mut weight) = (0.0, 0.0);
    for (k, &c) in seg.iter().enumerate() {
        let p = (out.prob_maps[c as usize * plane + k] as f64).max(PROB_EPS);
        nll += cw[c as usize] * -p.ln();
        weight += cw[c as usize];
    }
    let seg_loss = if weight > 0.0 { nll / weight } else { 0.0 };
    let bce = exist
        .iter()
        .zip(&out.existence)
        .map(|(&t, &p)| {
            let p = (p as f64).clamp(PROB_EPS, 1.0 - PROB_EPS);
            if t {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum::<f64>()
        / exist.len() as f64;
    Ok(w.lambda_1 * seg_loss + w.lambda_2 * bce)
}

/// Graph version of [`detection_loss`] over a batch; `seg` and `exist` are
/// concatenated per sample.
pub fn detection_loss_graph<T: Element>(
    g: &mut Graph<T>,
    logits: Var,
    existence: Var,
    seg: &[usize],
    exist: &[f64],
    w: &DetectionLossWeights,
) -> Var {
    let classes = g.value(logits).shape()[1];
    let nll = g.softmax_nll(logits, seg, &w.class_weights(classes - 1));
    let bce = g.bce_mean(existence, exist, PROB_EPS);
    let a = g.scale(nll, w.lambda_1);
    let b = g.scale(bce, w.lambda_2);
    g.add(a, b)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; running averages are returned for updating.
    Train,
    /// Running statistics.
    Eval,
}

#[derive(Clone, Debug, PartialEq)]
struct BatchNorm {
    gamma: ParamId,
    beta: ParamId,
    index: usize,
}

#[derive(Clone, Debug, PartialEq)]
struct Downsampler {
    conv: Conv,
    pool: bool,
    bn: BatchNorm,
}

#[derive(Clone, Debug, PartialEq)]
struct Factorized {
    c1: Conv,
    c2: Conv,
    bn1: BatchNorm,
    c3: Conv,
    c4: Conv,
    bn2: BatchNorm,
}

#[derive(Clone, Debug, PartialEq)]
struct Upsampler {
    conv: ConvTranspose,
    bn: BatchNorm,
}

#[derive(Clone, Debug, PartialEq)]
struct Layout {
    stages: Vec<(Downsampler, Vec<Factorized>)>,
    ups: Vec<(Upsampler, Vec<Factorized>)>,
    head: ConvTranspose,
    exist_hidden: Linear,
    exist_out: Linear,
}

/// Running mean and variance of one batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Detector<T> {
    config: DetectorConfig,
    layout: Layout,
    pub params: ParamStore<T>,
    pub running: Vec<RunningStats>,
}

/// Graph outputs of one forward pass.
pub struct Forward<T> {
    /// `[n, L+1, h, w]` at input resolution.
    pub logits: Var,
    /// `[n, L]` sigmoid confidences.
    pub existence: Var,
    pub stats: Vec<BatchStats<T>>,
}

struct LayoutBuilder<'a, 'r, R: Rng> {
    b: Builder<'r, R>,
    running: &'a mut Vec<RunningStats>,
}

impl<R: Rng> LayoutBuilder<'_, '_, R> {
    fn bn(&mut self, name: &str, c: usize) -> BatchNorm {
        let gamma = self.b.constant(&format!("{name}.gamma"), &[c], 1.0);
        let beta = self.b.constant(&format!("{name}.beta"), &[c], 0.0);
        self.running.push(RunningStats {
            mean: vec![0.0; c],
            var: vec![1.0; c],
        });
        BatchNorm {
            gamma,
            beta,
            index: self.running.len() - 1,
        }
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: (usize, usize), spec: Conv2dSpec) -> Conv {
        self.b.conv(name, cin, cout, k, spec, true, he_std(cin * k.0 * k.1))
    }

    fn factorized(&mut self, name: &str, c: usize, d: usize) -> Factorized {
        Factorized {
            c1: self.conv(&format!("{name}.c1"), c, c, (3, 1), Conv2dSpec::asymmetric((1, 0), (1, 1))),
            c2: self.conv(&format!("{name}.c2"), c, c, (1, 3), Conv2dSpec::asymmetric((0, 1), (1, 1))),
            bn1: self.bn(&format!("{name}.bn1"), c),
            c3: self.conv(&format!("{name}.c3"), c, c, (3, 1), Conv2dSpec::asymmetric((d, 0), (d, 1))),
            c4: self.conv(&format!("{name}.c4"), c, c, (1, 3), Conv2dSpec::asymmetric((0, d), (1, d))),
            bn2: self.bn(&format!("{name}.bn2"), c),
        }
    }
}

impl Detector<f32> {
    pub fn new<R: Rng>(config: &DetectorConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut running = Vec::new();
        let mut lb = LayoutBuilder {
            b: Builder::new(rng),
            running: &mut running,
        };
        let n = config.widths.len();
        let mut stages = Vec::new();
        let mut cin = config.channels;
        for (i, (&cout, &blocks)) in config.widths.iter().zip(&config.encoder_blocks).enumerate() {
            let pool = cout > cin;
            let conv_out = if pool { cout - cin } else { cout };
            let conv = lb.conv(&format!("enc{i}.down"), cin, conv_out, (3, 3), Conv2dSpec::new(2, 1));
            let bn = lb.bn(&format!("enc{i}.down.bn"), cout);
            let body = (0..blocks)
                .map(|j| {
                    let d = if i + 1 == n { config.dilations[j % config.dilations.len()] } else { 1 };
                    lb.factorized(&format!("enc{i}.block{j}"), cout, d)
                })
                .collect();
            stages.push((Downsampler { conv, pool, bn }, body));
            cin = cout;
        }
        let mut ups = Vec::new();
        for i in (1..n).rev() {
            let (cin, cout) = (config.widths[i], config.widths[i - 1]);
            let conv = lb.b.conv_transpose(
                &format!("dec{i}.up"),
                cin,
                cout,
                3,
                Conv2dSpec::new(2, 1),
                (1, 1),
                he_std(cin * 9),
            );
            let bn = lb.bn(&format!("dec{i}.up.bn"), cout);
            let body = (0..config.decoder_blocks)
                .map(|j| lb.factorized(&format!("dec{i}.block{j}"), cout, 1))
                .collect();
            ups.push((Upsampler { conv, bn }, body));
        }
        let c0 = config.widths[0];
        let head = lb
            .b
            .conv_transpose("head", c0, config.classes(), 2, Conv2dSpec::new(2, 0), (0, 0), he_std(c0 * 4));
        let top = config.widths[n - 1];
        let exist_hidden = lb.b.linear("exist.hidden", top, config.exist_hidden, he_std(top));
        let exist_out = lb.b.linear("exist.out", config.exist_hidden, config.lanes, he_std(config.exist_hidden));
        let params = lb.b.store;
        Ok(Self {
            config: config.clone(),
            layout: Layout {
                stages,
                ups,
                head,
                exist_hidden,
                exist_out,
            },
            params,
            running,
        })
    }
}

struct Pass<'a, T: Element> {
    g: &'a mut Graph<T>,
    p: &'a Bound,
    running: &'a [RunningStats],
    mode: Mode,
    eps: f64,
    stats: Vec<BatchStats<T>>,
}

impl<T: Element> Pass<'_, T> {
    fn bn(&mut self, bn: &BatchNorm, x: Var) -> Var {
        match self.mode {
            Mode::Train => {
                let (y, s) = self.g.batch_norm(x, self.p.get(bn.gamma), self.p.get(bn.beta), self.eps);
                self.stats.push(s);
                y
            }
            Mode::Eval => {
                let r = &self.running[bn.index];
                let gamma = self.g.value(self.p.get(bn.gamma)).data().to_vec();
                let beta = self.g.value(self.p.get(bn.beta)).data().to_vec();
                let (scale, shift): (Vec<T>, Vec<T>) = gamma
                    .iter()
                    .zip(&beta)
                    .zip(r.mean.iter().zip(&r.var))
                    .map(|((&gm, &bt), (&m, &v))| {
                        let s = gm.as_f64() / (v + self.eps).sqrt();
                        (T::from_f64_lossy(s), T::from_f64_lossy(bt.as_f64() - m * s))
                    })
                    .unzip();
                self.g.channel_affine(x, scale, shift)
            }
        }
    }

    fn factorized(&mut self, f: &Factorized, x: Var) -> Var {
        let y = f.c1.forward(self.g, self.p, x);
        let y = self.g.relu(y);
        let y = f.c2.forward(self.g, self.p, y);
        let y = self.bn(&f.bn1, y);
        let y = self.g.relu(y);
        let y = f.c3.forward(self.g, self.p, y);
        let y = self.g.relu(y);
        let y = f.c4.forward(self.g, self.p, y);
        let y = self.bn(&f.bn2, y);
        let y = self.g.add(y, x);
        self.g.relu(y)
    }
}

impl<T: Element> Detector<T> {
    pub fn config(&self) -> &DetectorConfig {
        &self.config
    }

    pub fn cast<U: Element>(&self) -> Detector<U> {
        Detector {
            config: self.config.clone(),
            layout: self.layout.clone(),
            params: self.params.cast(),
            running: self.running.clone(),
        }
    }

    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        let m = self.config.min_input;
        if h < m || w < m {
            return Err(Error::contract(format!("detector input {h}x{w} is smaller than {m}x{m}")));
        }
        Ok(())
    }

    /// Runs `x [n, c, h, w]` through the network.
    pub fn forward(&self, g: &mut Graph<T>, p: &Bound, x: Var, mode: Mode) -> Result<Forward<T>> {
        let (_, c, h, w) = g.value(x).dims4();
        if c != self.config.channels {
            return Err(Error::contract(format!(
                "detector expects {} channels, got {c}",
                self.config.channels
            )));
        }
        self.check_input(h, w)?;
        let trace = ScaleTrace::for_dims(h, w, self.config.padding_multiple());
        let x = g.reflect_pad(
            x,
            Pad4 {
                bottom: trace.pad_bottom,
                right: trace.pad_right,
                ..Pad4::default()
            },
        );
        let mut pass = Pass {
            g,
            p,
            running: &self.running,
            mode,
            eps: self.config.bn_eps,
            stats: Vec::new(),
        };
        let mut y = x;
        for (down, blocks) in &self.layout.stages {
            let conv = down.conv.forward(pass.g, p, y);
            y = if down.pool {
                let pooled = pass.g.max_pool2(y);
                pass.g.concat_channels(&[conv, pooled])
            } else {
                conv
            };
            y = pass.bn(&down.bn, y);
            y = pass.g.relu(y);
            for f in blocks {
                y = pass.factorized(f, y);
            }
        }
        let pooled = pass.g.global_avg_pool(y);
        let hidden = self.layout.exist_hidden.forward(pass.g, p, pooled);
        let hidden = pass.g.relu(hidden);
        let exist = self.layout.exist_out.forward(pass.g, p, hidden);
        let existence = pass.g.sigmoid(exist);

        for (up, blocks) in &self.layout.ups {
            y = up.conv.forward(pass.g, p, y);
            y = pass.bn(&up.bn, y);
            y = pass.g.relu(y);
            for f in blocks {
                y = pass.factorized(f, y);
            }
        }
        let logits = self.layout.head.forward(pass.g, p, y);
        let stats = std::mem::take(&mut pass.stats);
        let logits = g.crop(logits, 0, 0, h, w);
        Ok(Forward {
            logits,
            existence,
            stats,
        })
    }

    /// Folds batch statistics from a training pass into the running averages.
    pub fn update_running(&mut self, stats: &[BatchStats<T>]) {
        assert_eq!(stats.len(), self.running.len(), "one statistics record per norm layer");
        let m = self.config.bn_momentum;
        for (r, s) in self.running.iter_mut().zip(stats) {
            for (rm, &bm) in r.mean.iter_mut().zip(&s.mean) {
                *rm = (1.0 - m) * *rm + m * bm.as_f64();
            }
            for (rv, &bv) in r.var.iter_mut().zip(&s.var) {
                *rv = (1.0 - m) * *rv + m * bv.as_f64();
            }
        }
    }

    /// Inference on a batch of same-size images.
    pub fn predict_batch(&self, imgs: &[Image]) -> Result<Vec<DetectorOutput>> {
        if imgs.is_empty() {
            return Ok(Vec::new());
        }
        let dims = imgs[0].dims();
        if imgs.iter().any(|i| i.dims() != dims) {
            return Err(Error::contract("predict_batch needs images of one size"));
        }
        let batch = Tensor::stack_batch(&imgs.iter().map(|i| i.to_tensor::<T>()).collect::<Vec<_>>());
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let x = g.constant(batch);
        let f = self.forward(&mut g, &p, x, Mode::Eval)?;
        Ok(DetectorOutput::from_logits(g.value(f.logits), g.value(f.existence)))
    }
}

/// Eval-mode inference on one image.
pub fn detector_forward<T: Element>(det: &Detector<T>, img: &Image) -> Result<DetectorOutput> {
    Ok(det.predict_batch(std::slice::from_ref(img))?.remove(0))
}
