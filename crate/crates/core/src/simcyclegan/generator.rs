//! Residual encoder-decoder generator with scale information match.
//!
//! The encoder records the feature-map size in front of every strided
//! convolution; each decoder stage restores exactly that size, so any input
//! resolution comes back unchanged without resizing.

use lanegan_tensor::{Conv2dSpec, Element, Graph, Pad4, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{Image, ScaleTrace};
use crate::nn::{Bound, Builder, Conv, ConvTranspose, ParamStore};

const NORM_EPS: f64 = 1e-5;
pub(crate) const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    pub channels: usize,
    pub base_channels: usize,
    pub downsample_stages: usize,
    pub residual_blocks: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            channels: 3,
            base_channels: 64,
            downsample_stages: 2,
            residual_blocks: 9,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.downsample_stages == 0 || self.residual_blocks == 0 {
            return Err(Error::Config(
                "generator needs downsample_stages >= 1 and residual_blocks >= 1".into(),
            ));
        }
        if self.base_channels == 0 || self.channels == 0 {
            return Err(Error::Config("generator channel counts must be positive".into()));
        }
        Ok(())
    }

    /// Input padding multiple implied by the number of stride-2 stages.
    pub fn padding_multiple(&self) -> usize {
        1 << self.downsample_stages
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Layout {
    stem: Conv,
    downs: Vec<Conv>,
    blocks: Vec<(Conv, Conv)>,
    ups: Vec<ConvTranspose>,
    head: Conv,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generator<T> {
    config: GeneratorConfig,
    layout: Layout,
    pub params: ParamStore<T>,
}

impl Generator<f32> {
    pub fn new<R: Rng>(config: &GeneratorConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut b = Builder::new(rng);
        let c0 = config.base_channels;
        let stem = b.conv("stem", config.channels, c0, (7, 7), Conv2dSpec::new(1, 0), true, INIT_STD);
        let mut downs = Vec::new();
        let mut c = c0;
        for i in 0..config.downsample_stages {
            downs.push(b.conv(&format!("down{i}"), c, c * 2, (3, 3), Conv2dSpec::new(2, 1), true, INIT_STD));
            c *= 2;
        }
        let blocks = (0..config.residual_blocks)
            .map(|i| {
                (
                    b.conv(&format!("res{i}.a"), c, c, (3, 3), Conv2dSpec::new(1, 0), true, INIT_STD),
                    b.conv(&format!("res{i}.b"), c, c, (3, 3), Conv2dSpec::new(1, 0), true, INIT_STD),
                )
            })
            .collect();
        let mut ups = Vec::new();
        for i in 0..config.downsample_stages {
            ups.push(b.conv_transpose(
                &format!("up{i}"),
                c,
                c / 2,
                3,
                Conv2dSpec::new(2, 1),
                (1, 1),
                INIT_STD,
            ));
            c /= 2;
        }
        let head = b.conv("head", c, config.channels, (7, 7), Conv2dSpec::new(1, 0), true, INIT_STD);
        Ok(Self {
            config: config.clone(),
            layout: Layout {
                stem,
                downs,
                blocks,
                ups,
                head,
            },
            params: b.store,
        })
    }
}

/// Center-crops or reflection-pads a feature map to `target` size.
pub(crate) fn match_dims<T: Element>(g: &mut Graph<T>, x: Var, target: (usize, usize)) -> Var {
    let (_, _, h, w) = g.value(x).dims4();
    let (th, tw) = target;
    let (top, ch) = if h > th { ((h - th) / 2, th) } else { (0, h) };
    let (left, cw) = if w > tw { ((w - tw) / 2, tw) } else { (0, w) };
    let x = g.crop(x, top, left, ch, cw);
    let dh = th.saturating_sub(ch);
    let dw = tw.saturating_sub(cw);
    g.reflect_pad(
        x,
        Pad4 {
            top: dh / 2,
            bottom: dh - dh / 2,
            left: dw / 2,
            right: dw - dw / 2,
        },
    )
}

impl<T: Element> Generator<T> {
    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn cast<U: Element>(&self) -> Generator<U> {
        Generator {
            config: self.config.clone(),
            layout: self.layout.clone(),
            params: self.params.cast(),
        }
    }

    /// Translates `x [n, c, h, w]`; the output has the same shape.
    pub fn forward(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> (Var, ScaleTrace) {
        let (_, c, h, w) = g.value(x).dims4();
        assert_eq!(c, self.config.channels, "generator expects {} channels", self.config.channels);
        let mut trace = ScaleTrace::for_dims(h, w, self.config.padding_multiple());
        let l = &self.layout;

        let x = g.reflect_pad(
            x,
            Pad4 {
                bottom: trace.pad_bottom,
                right: trace.pad_right,
                ..Pad4::default()
            },
        );
        let mut y = g.reflect_pad(x, Pad4::uniform(3));
        y = l.stem.forward(g, p, y);
        y = g.instance_norm(y, NORM_EPS);
        y = g.relu(y);

        for down in &l.downs {
            let (_, _, fh, fw) = g.value(y).dims4();
            trace.per_stage_dims.push((fh, fw));
            y = down.forward(g, p, y);
            y = g.instance_norm(y, NORM_EPS);
            y = g.relu(y);
        }

        for (a, b) in &l.blocks {
            let mut r = g.reflect_pad(y, Pad4::uniform(1));
            r = a.forward(g, p, r);
            r = g.instance_norm(r, NORM_EPS);
            r = g.relu(r);
            r = g.reflect_pad(r, Pad4::uniform(1));
            r = b.forward(g, p, r);
            r = g.instance_norm(r, NORM_EPS);
            y = g.add(y, r);
        }

        for (up, &dims) in l.ups.iter().zip(trace.per_stage_dims.iter().rev()) {
            y = up.forward(g, p, y);
            y = match_dims(g, y, dims);
            y = g.instance_norm(y, NORM_EPS);
            y = g.relu(y);
        }

        y = g.reflect_pad(y, Pad4::uniform(3));
        y = l.head.forward(g, p, y);
        y = g.tanh(y);
        let y = g.crop(y, 0, 0, trace.original_height, trace.original_width);
        (y, trace)
    }

    /// Inference on one image.
    pub fn translate(&self, img: &Image) -> Result<Image> {
        if img.channels() != self.config.channels {
            return Err(Error::contract(format!(
                "generator expects {} channels, image has {}",
                self.config.channels,
                img.channels()
            )));
        }
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let x = g.constant(img.to_tensor());
        let (y, _) = self.forward(&mut g, &p, x);
        Ok(Image::from_tensor(g.value(y)))
    }

    /// Scale trace recorded for an input of the given size.
    pub fn trace_for(&self, height: usize, width: usize) -> ScaleTrace {
        let mut trace = ScaleTrace::for_dims(height, width, self.config.padding_multiple());
        let (mut h, mut w) = trace.padded_dims();
        for _ in 0..self.config.downsample_stages {
            trace.per_stage_dims.push((h, w));
            h = (h - 1) / 2 + 1;
            w = (w - 1) / 2 + 1;
        }
        trace
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> Generator<f32> {
        let cfg = GeneratorConfig {
            channels: 3,
            base_channels: 4,
            downsample_stages: 2,
            residual_blocks: 1,
        };
        Generator::new(&cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap()
    }

    fn noise(h: usize, w: usize) -> Image {
        let data = (0..3 * h * w).map(|i| ((i * 7919 % 211) as f32 / 105.0) - 1.0).collect();
        Image::new(h, w, 3, data).unwrap()
    }

    #[test]
    fn odd_resolution_comes_back_unchanged() {
        let out = tiny().translate(&noise(37, 61)).unwrap();
        assert_eq!(out.dims(), (37, 61));
        assert!(out.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn full_profile_resolution_shape() {
        let out = tiny().translate(&noise(295, 820)).unwrap();
        assert_eq!((out.height(), out.width(), out.channels()), (295, 820, 3));
    }

    #[test]
    fn zero_weights_give_zero_image() {
        let mut gen = tiny();
        for t in gen.params.tensors_mut() {
            t.data_mut().fill(0.0);
        }
        let out = gen.translate(&noise(13, 22)).unwrap();
        assert_eq!(out.dims(), (13, 22));
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn trace_stage_dims_strictly_decrease() {
        let t = tiny().trace_for(295, 820);
        assert_eq!(t.per_stage_dims, vec![(296, 820), (148, 410)]);
        for w in t.per_stage_dims.windows(2) {
            assert!(w[1].0 < w[0].0 && w[1].1 < w[0].1);
        }
    }

    #[test]
    fn forward_trace_matches_static_trace() {
        let gen = tiny();
        let mut g = Graph::new();
        let p = gen.params.bind(&mut g, false);
        let x = g.constant(noise(19, 26).to_tensor());
        let (_, trace) = gen.forward(&mut g, &p, x);
        assert_eq!(trace, gen.trace_for(19, 26));
    }

    #[test]
    fn rejects_bad_config() {
        let cfg = GeneratorConfig {
            residual_blocks: 0,
            ..GeneratorConfig::default()
        };
        assert!(Generator::new(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn match_dims_crops_and_pads() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(lanegan_tensor::Tensor::zeros(&[1, 1, 6, 3]));
        let y = match_dims(&mut g, x, (4, 5));
        assert_eq!(g.value(y).shape(), &[1, 1, 4, 5]);
    }
}
