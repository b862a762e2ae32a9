//! Cycle-consistent translation between a well-lit domain X and a low-light
//! domain Y.
//!
//! `G_A: X -> Y`, `G_B: Y -> X`; `D_A` judges domain X and `D_B` judges
//! domain Y.

mod discriminator;
mod generator;
mod losses;
mod pool;

pub use discriminator::{Discriminator, DiscriminatorConfig, PatchMap};
pub use generator::{Generator, GeneratorConfig};
pub use losses::{
    adversarial_loss, cycle_loss, discriminator_adv, generator_adv, total_loss, GanObjective,
    LossParts, LossWeights, SCORE_EPS,
};
pub use pool::ImagePool;

use std::path::Path;

use lanegan_tensor::optim::Adam;
use lanegan_tensor::{Element, Graph, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Archive;
use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::nn::{collect_grads, Bound};

pub const CHECKPOINT_KIND: &str = "simcyclegan";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GanConfig {
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub weights: LossWeights,
    pub objective: GanObjective,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub pool_capacity: usize,
}

impl Default for GanConfig {
    fn default() -> Self {
        Self {
            generator: GeneratorConfig::default(),
            discriminator: DiscriminatorConfig::default(),
            weights: LossWeights::default(),
            objective: GanObjective::Log,
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            pool_capacity: 50,
        }
    }
}

impl GanConfig {
    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.weights.validate()?;
        if self.generator.channels != self.discriminator.channels {
            return Err(Error::Config(
                "generator and discriminator channel counts differ".into(),
            ));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("gan lr must be positive, got {}", self.lr)));
        }
        Ok(())
    }
}

/// The four networks, generic over the scalar type.
#[derive(Clone, Debug, PartialEq)]
pub struct GanNetworks<T> {
    pub g_a: Generator<T>,
    pub g_b: Generator<T>,
    pub d_a: Discriminator<T>,
    pub d_b: Discriminator<T>,
}

pub struct BoundNetworks {
    pub g_a: Bound,
    pub g_b: Bound,
    pub d_a: Bound,
    pub d_b: Bound,
}

/// Graph nodes of the generator objective.
pub struct GeneratorPass {
    pub total: Var,
    pub adv_a: Var,
    pub adv_b: Var,
    pub cycle: Var,
    /// `G_A(x)` per input of domain X.
    pub fake_y: Vec<Var>,
    /// `G_B(y)` per input of domain Y.
    pub fake_x: Vec<Var>,
}

fn mean_vars<T: Element>(g: &mut Graph<T>, vars: &[Var]) -> Var {
    let mut acc = vars[0];
    for &v in &vars[1..] {
        acc = g.add(acc, v);
    }
    g.scale(acc, 1.0 / vars.len() as f64)
}

impl GanNetworks<f32> {
    pub fn new(config: &GanConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            g_a: Generator::new(&config.generator, rng)?,
            g_b: Generator::new(&config.generator, rng)?,
            d_a: Discriminator::new(&config.discriminator, rng)?,
            d_b: Discriminator::new(&config.discriminator, rng)?,
        })
    }
}

impl<T: Element> GanNetworks<T> {
    pub fn cast<U: Element>(&self) -> GanNetworks<U> {
        GanNetworks {
            g_a: self.g_a.cast(),
            g_b: self.g_b.cast(),
            d_a: self.d_a.cast(),
            d_b: self.d_b.cast(),
        }
    }

    /// Roles exchanged: X and Y swap, so do `G_A`/`G_B` and `D_A`/`D_B`.
    pub fn mirrored(&self) -> Self {
        Self {
            g_a: self.g_b.clone(),
            g_b: self.g_a.clone(),
            d_a: self.d_b.clone(),
            d_b: self.d_a.clone(),
        }
    }

    pub fn bind(&self, g: &mut Graph<T>, train_generators: bool, train_discriminators: bool) -> BoundNetworks {
        BoundNetworks {
            g_a: self.g_a.params.bind(g, train_generators),
            g_b: self.g_b.params.bind(g, train_generators),
            d_a: self.d_a.params.bind(g, train_discriminators),
            d_b: self.d_b.params.bind(g, train_discriminators),
        }
    }

    /// Builds `L_GAN(G_A, D_B) + L_GAN(G_B, D_A) + lambda * L_cyc` for the generators.
    ///
    /// Every image is processed on its own so a batch may mix resolutions; each
    /// term is the mean over its batch.
    pub fn generator_objective(
        &self,
        g: &mut Graph<T>,
        b: &BoundNetworks,
        xs: &[Var],
        ys: &[Var],
        w: &LossWeights,
        obj: GanObjective,
    ) -> Result<GeneratorPass> {
        if xs.is_empty() || ys.is_empty() {
            return Err(Error::contract("gan batches must be non-empty"));
        }
        let mut adv_a = Vec::new();
        let mut cyc_x = Vec::new();
        let mut fake_y = Vec::new();
        for &x in xs {
            let (fy, _) = self.g_a.forward(g, &b.g_a, x);
            let score = self.d_b.forward(g, &b.d_b, fy)?;
            adv_a.push(generator_adv(g, score, obj));
            let (rec, _) = self.g_b.forward(g, &b.g_b, fy);
            cyc_x.push(g.l1_mean(rec, x));
            fake_y.push(fy);
        }
        let mut adv_b = Vec::new();
        let mut cyc_y = Vec::new();
        let mut fake_x = Vec::new();
        for &y in ys {
            let (fx, _) = self.g_b.forward(g, &b.g_b, y);
            let score = self.d_a.forward(g, &b.d_a, fx)?;
            adv_b.push(generator_adv(g, score, obj));
            let (rec, _) = self.g_a.forward(g, &b.g_a, fx);
            cyc_y.push(g.l1_mean(rec, y));
            fake_x.push(fx);
        }
        let adv_a = mean_vars(g, &adv_a);
        let adv_b = mean_vars(g, &adv_b);
        let cx = mean_vars(g, &cyc_x);
        let cy = mean_vars(g, &cyc_y);
        let cycle = g.add(cx, cy);
        let adv = g.add(adv_a, adv_b);
        let weighted = g.scale(cycle, w.lambda_cyc);
        let total = g.add(adv, weighted);
        Ok(GeneratorPass {
            total,
            adv_a,
            adv_b,
            cycle,
            fake_y,
            fake_x,
        })
    }

    /// Discriminator objectives `(total, loss_d_a, loss_d_b)`.
    ///
    /// `fake_x` are generated images of domain X (judged by `D_A`), `fake_y` of domain Y.
    #[allow(clippy::too_many_arguments)]
    pub fn discriminator_objective(
        &self,
        g: &mut Graph<T>,
        b: &BoundNetworks,
        xs: &[Var],
        ys: &[Var],
        fake_x: &[Var],
        fake_y: &[Var],
        obj: GanObjective,
    ) -> Result<(Var, Var, Var)> {
        if xs.is_empty() || ys.is_empty() || fake_x.is_empty() || fake_y.is_empty() {
            return Err(Error::contract("gan batches must be non-empty"));
        }
        let side = |g: &mut Graph<T>, d: &Discriminator<T>, p: &Bound, real: &[Var], fake: &[Var]| -> Result<Var> {
            let mut terms = Vec::new();
            for (i, &r) in real.iter().enumerate() {
                let f = fake[i % fake.len()];
                let sr = d.forward(g, p, r)?;
                let sf = d.forward(g, p, f)?;
                terms.push(discriminator_adv(g, sr, sf, obj));
            }
            Ok(mean_vars(g, &terms))
        };
        let d_a = side(g, &self.d_a, &b.d_a, xs, fake_x)?;
        let d_b = side(g, &self.d_b, &b.d_b, ys, fake_y)?;
        let total = g.add(d_a, d_b);
        Ok((total, d_a, d_b))
    }
}

/// Loss components logged per step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub adv_a: f64,
    pub adv_b: f64,
    pub cycle: f64,
    pub g_total: f64,
    pub d_a: f64,
    pub d_b: f64,
}

impl LossRecord {
    pub fn is_finite(&self) -> bool {
        [self.adv_a, self.adv_b, self.cycle, self.g_total, self.d_a, self.d_b]
            .iter()
            .all(|v| v.is_finite())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GanOptimizers {
    pub g_a: Adam<f32>,
    pub g_b: Adam<f32>,
    pub d_a: Adam<f32>,
    pub d_b: Adam<f32>,
}

/// Networks, optimizer state, image pools and counters of one training run.
#[derive(Clone, Debug, PartialEq)]
pub struct GanBundle {
    pub config: GanConfig,
    pub nets: GanNetworks<f32>,
    pub opt: GanOptimizers,
    /// Generated domain-X images replayed to `D_A`.
    pub pool_a: ImagePool,
    /// Generated domain-Y images replayed to `D_B`.
    pub pool_b: ImagePool,
    pub epoch: usize,
    pub steps: u64,
    rng: ChaCha8Rng,
}

fn tensors_of(imgs: &[Image]) -> Vec<Tensor<f32>> {
    imgs.iter().map(Image::to_tensor).collect()
}

impl GanBundle {
    pub fn new(config: &GanConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let nets = GanNetworks::new(config, &mut rng)?;
        let adam = |p: &crate::nn::ParamStore<f32>| Adam::new(p.tensors(), config.lr, config.beta1, config.beta2);
        let opt = GanOptimizers {
            g_a: adam(&nets.g_a.params),
            g_b: adam(&nets.g_b.params),
            d_a: adam(&nets.d_a.params),
            d_b: adam(&nets.d_b.params),
        };
        Ok(Self {
            config: config.clone(),
            opt,
            pool_a: ImagePool::new(config.pool_capacity),
            pool_b: ImagePool::new(config.pool_capacity),
            nets,
            epoch: 0,
            steps: 0,
            rng,
        })
    }

    /// Generator objective on a batch without updating anything.
    pub fn generator_losses(&self, batch_x: &[Image], batch_y: &[Image], w: &LossWeights) -> Result<LossParts> {
        let mut g = Graph::new();
        let b = self.nets.bind(&mut g, false, false);
        let xs: Vec<Var> = tensors_of(batch_x).into_iter().map(|t| g.constant(t)).collect();
        let ys: Vec<Var> = tensors_of(batch_y).into_iter().map(|t| g.constant(t)).collect();
        let pass = self.nets.generator_objective(&mut g, &b, &xs, &ys, w, self.config.objective)?;
        Ok(LossParts {
            adv_a: g.value(pass.adv_a).item() as f64,
            adv_b: g.value(pass.adv_b).item() as f64,
            cycle: g.value(pass.cycle).item() as f64,
        })
    }

    /// Updates both generators with the discriminators frozen.
    ///
    /// Returns the losses before the update and the generated images `(fake_x, fake_y)`.
    pub fn generator_step(
        &mut self,
        batch_x: &[Image],
        batch_y: &[Image],
        w: &LossWeights,
    ) -> Result<(LossParts, Vec<Tensor<f32>>, Vec<Tensor<f32>>)> {
        let mut g = Graph::new();
        let b = self.nets.bind(&mut g, true, false);
        let xs: Vec<Var> = tensors_of(batch_x).into_iter().map(|t| g.constant(t)).collect();
        let ys: Vec<Var> = tensors_of(batch_y).into_iter().map(|t| g.constant(t)).collect();
        let pass = self.nets.generator_objective(&mut g, &b, &xs, &ys, w, self.config.objective)?;
        let parts = LossParts {
            adv_a: g.value(pass.adv_a).item() as f64,
            adv_b: g.value(pass.adv_b).item() as f64,
            cycle: g.value(pass.cycle).item() as f64,
        };
        let mut grads = g.backward(pass.total);
        let ga = collect_grads(&mut grads, &b.g_a);
        let gb = collect_grads(&mut grads, &b.g_b);
        self.opt.g_a.update(self.nets.g_a.params.tensors_mut(), &ga);
        self.opt.g_b.update(self.nets.g_b.params.tensors_mut(), &gb);
        let fake_x = pass.fake_x.iter().map(|&v| g.value(v).clone()).collect();
        let fake_y = pass.fake_y.iter().map(|&v| g.value(v).clone()).collect();
        Ok((parts, fake_x, fake_y))
    }

    /// One generator update followed by one discriminator update on pooled fakes.
    pub fn gan_training_step(
        &mut self,
        batch_x: &[Image],
        batch_y: &[Image],
        w: &LossWeights,
    ) -> Result<LossRecord> {
        if batch_x.is_empty() || batch_y.is_empty() {
            return Err(Error::contract("gan_training_step needs non-empty batches"));
        }
        let (parts, fake_x, fake_y) = self.generator_step(batch_x, batch_y, w)?;

        let fake_x: Vec<Tensor<f32>> = fake_x
            .into_iter()
            .map(|t| self.pool_a.query(t, &mut self.rng))
            .collect();
        let fake_y: Vec<Tensor<f32>> = fake_y
            .into_iter()
            .map(|t| self.pool_b.query(t, &mut self.rng))
            .collect();

        let mut g = Graph::new();
        let d_a = self.nets.d_a.params.bind(&mut g, true);
        let d_b = self.nets.d_b.params.bind(&mut g, true);
        let bound = BoundNetworks {
            g_a: Bound::empty(),
            g_b: Bound::empty(),
            d_a,
            d_b,
        };
        let mut constants = |ts: Vec<Tensor<f32>>| -> Vec<Var> { ts.into_iter().map(|t| g.constant(t)).collect() };
        let xs = constants(tensors_of(batch_x));
        let ys = constants(tensors_of(batch_y));
        let fx = constants(fake_x);
        let fy = constants(fake_y);
        let (total, la, lb) =
            self.nets
                .discriminator_objective(&mut g, &bound, &xs, &ys, &fx, &fy, self.config.objective)?;
        let record = LossRecord {
            adv_a: parts.adv_a,
            adv_b: parts.adv_b,
            cycle: parts.cycle,
            g_total: total_loss(&parts, w),
            d_a: g.value(la).item() as f64,
            d_b: g.value(lb).item() as f64,
        };
        let mut grads = g.backward(total);
        let ga = collect_grads(&mut grads, &bound.d_a);
        let gb = collect_grads(&mut grads, &bound.d_b);
        self.opt.d_a.update(self.nets.d_a.params.tensors_mut(), &ga);
        self.opt.d_b.update(self.nets.d_b.params.tensors_mut(), &gb);
        self.steps += 1;
        Ok(record)
    }

    /// X -> Y translation with `G_A`.
    pub fn translate(&self, img: &Image) -> Result<Image> {
        self.nets.g_a.translate(img)
    }

    pub fn rng_mut(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    pub fn save(&self, path: &Path) -> Result<String> {
        let meta = serde_json::json!({
            "config": self.config,
            "epoch": self.epoch,
            "steps": self.steps,
            "rng": {
                "seed": self.rng.get_seed().iter().map(|b| format!("{b:02x}")).collect::<String>(),
                "stream": self.rng.get_stream(),
                "word_pos": self.rng.get_word_pos().to_string(),
            },
        });
        let mut a = Archive::new(CHECKPOINT_KIND, meta);
        for (name, net, opt) in [
            ("g_a", &self.nets.g_a.params, &self.opt.g_a),
            ("g_b", &self.nets.g_b.params, &self.opt.g_b),
            ("d_a", &self.nets.d_a.params, &self.opt.d_a),
            ("d_b", &self.nets.d_b.params, &self.opt.d_b),
        ] {
            a.insert_store(&format!("net/{name}"), net);
            a.insert_adam(&format!("opt/{name}"), opt);
        }
        a.insert_list("pool/a", self.pool_a.images());
        a.insert_list("pool/b", self.pool_b.images());
        a.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let a = Archive::load(path)?.expect_kind(path, CHECKPOINT_KIND)?;
        let bad = |msg: String| Error::Checkpoint {
            path: path.to_path_buf(),
            msg,
        };
        let config: GanConfig = serde_json::from_value(a.meta["config"].clone())
            .map_err(|e| bad(format!("config: {e}")))?;
        let mut bundle = GanBundle::new(&config, 0)?;
        bundle.epoch = a.meta["epoch"].as_u64().ok_or_else(|| bad("missing epoch".into()))? as usize;
        bundle.steps = a.meta["steps"].as_u64().unwrap_or(0);
        let rng = &a.meta["rng"];
        let seed_hex = rng["seed"].as_str().ok_or_else(|| bad("missing rng seed".into()))?;
        let mut seed = [0u8; 32];
        if seed_hex.len() != 64 {
            return Err(bad("rng seed must be 64 hex digits".into()));
        }
        for (i, s) in seed.iter_mut().enumerate() {
            *s = u8::from_str_radix(&seed_hex[2 * i..2 * i + 2], 16).map_err(|e| bad(e.to_string()))?;
        }
        bundle.rng = ChaCha8Rng::from_seed(seed);
        bundle.rng.set_stream(rng["stream"].as_u64().unwrap_or(0));
        let pos: u128 = rng["word_pos"]
            .as_str()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("missing rng position".into()))?;
        bundle.rng.set_word_pos(pos);
        let GanBundle { nets, opt, .. } = &mut bundle;
        for (name, net, o) in [
            ("g_a", &mut nets.g_a.params, &mut opt.g_a),
            ("g_b", &mut nets.g_b.params, &mut opt.g_b),
            ("d_a", &mut nets.d_a.params, &mut opt.d_a),
            ("d_b", &mut nets.d_b.params, &mut opt.d_b),
        ] {
            a.load_store(&format!("net/{name}"), net).map_err(bad)?;
            a.load_adam(&format!("opt/{name}"), o).map_err(bad)?;
        }
        bundle.pool_a = ImagePool::restore(config.pool_capacity, a.list("pool/a"));
        bundle.pool_b = ImagePool::restore(config.pool_capacity, a.list("pool/b"));
        Ok(bundle)
    }
}
