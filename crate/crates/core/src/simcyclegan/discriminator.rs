//! PatchGAN discriminator: a fully convolutional classifier whose output grid
//! scores overlapping patches of the input.

use lanegan_tensor::{Conv2dSpec, Element, Graph, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::generator::INIT_STD;
use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::nn::{Bound, Builder, Conv, ParamStore};

const NORM_EPS: f64 = 1e-5;
const SLOPE: f64 = 0.2;
const KERNEL: usize = 4;
const MAX_WIDTH_MULT: usize = 8;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscriminatorConfig {
    pub channels: usize,
    pub base_channels: usize,
    /// Number of stride-2 layers; 3 gives the 70x70 patch classifier.
    pub strided_layers: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            channels: 3,
            base_channels: 64,
            strided_layers: 3,
        }
    }
}

impl DiscriminatorConfig {
    /// Strides of every conv layer, score layer last.
    fn strides(&self) -> Vec<usize> {
        let mut s = vec![2; self.strided_layers];
        s.extend([1, 1]);
        s
    }

    /// Side of the input region seen by one output score.
    pub fn receptive_field(&self) -> usize {
        let (mut rf, mut jump) = (1, 1);
        for s in self.strides() {
            rf += (KERNEL - 1) * jump;
            jump *= s;
        }
        rf
    }

    /// Output grid for an `h x w` input, `None` when the input is smaller than a patch.
    pub fn patch_grid(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let rf = self.receptive_field();
        if h < rf || w < rf {
            return None;
        }
        let spec = |s| Conv2dSpec::new(s, 1);
        self.strides()
            .into_iter()
            .try_fold((h, w), |(h, w), s| spec(s).out_dims(h, w, KERNEL, KERNEL))
    }
}

/// Per-patch realness scores in `(0, 1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchMap {
    pub height: usize,
    pub width: usize,
    pub scores: Vec<f64>,
}

impl PatchMap {
    pub fn filled(height: usize, width: usize, v: f64) -> Self {
        Self {
            height,
            width,
            scores: vec![v; height * width],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Layer {
    conv: Conv,
    norm: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Discriminator<T> {
    config: DiscriminatorConfig,
    layers: Vec<Layer>,
    head: Conv,
    pub params: ParamStore<T>,
}

impl Discriminator<f32> {
    pub fn new<R: Rng>(config: &DiscriminatorConfig, rng: &mut R) -> Result<Self> {
        if config.base_channels == 0 || config.channels == 0 {
            return Err(Error::Config("discriminator channel counts must be positive".into()));
        }
        let mut b = Builder::new(rng);
        let mut layers = Vec::new();
        let strides = config.strides();
        let hidden = &strides[..strides.len() - 1];
        let mut cin = config.channels;
        for (i, &s) in hidden.iter().enumerate() {
            let cout = config.base_channels * (1usize << i).min(MAX_WIDTH_MULT);
            let conv = b.conv(
                &format!("layer{i}"),
                cin,
                cout,
                (KERNEL, KERNEL),
                Conv2dSpec::new(s, 1),
                true,
                INIT_STD,
            );
            layers.push(Layer { conv, norm: i > 0 });
            cin = cout;
        }
        let head = b.conv("head", cin, 1, (KERNEL, KERNEL), Conv2dSpec::new(1, 1), true, INIT_STD);
        Ok(Self {
            config: config.clone(),
            layers,
            head,
            params: b.store,
        })
    }
}

impl<T: Element> Discriminator<T> {
    pub fn config(&self) -> &DiscriminatorConfig {
        &self.config
    }

    pub fn cast<U: Element>(&self) -> Discriminator<U> {
        Discriminator {
            config: self.config.clone(),
            layers: self.layers.clone(),
            head: self.head.clone(),
            params: self.params.cast(),
        }
    }

    /// Scores `x [n, c, h, w]`; returns sigmoid scores `[n, 1, h', w']`.
    pub fn forward(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let (_, c, h, w) = g.value(x).dims4();
        if c != self.config.channels {
            return Err(Error::contract(format!(
                "discriminator expects {} channels, got {c}",
                self.config.channels
            )));
        }
        if self.config.patch_grid(h, w).is_none() {
            return Err(Error::contract(format!(
                "{h}x{w} input is smaller than one {rf}x{rf} patch",
                rf = self.config.receptive_field()
            )));
        }
        let mut y = x;
        for l in &self.layers {
            y = l.conv.forward(g, p, y);
            if l.norm {
                y = g.instance_norm(y, NORM_EPS);
            }
            y = g.leaky_relu(y, SLOPE);
        }
        y = self.head.forward(g, p, y);
        Ok(g.sigmoid(y))
    }

    pub fn score(&self, img: &Image) -> Result<PatchMap> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let x = g.constant(img.to_tensor());
        let y = self.forward(&mut g, &p, x)?;
        let (_, _, h, w) = g.value(y).dims4();
        Ok(PatchMap {
            height: h,
            width: w,
            scores: g.value(y).data().iter().map(|v| v.as_f64()).collect(),
        })
    }
}
