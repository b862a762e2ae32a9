//! Parameter storage and the layer building blocks shared by the networks.

use lanegan_tensor::{Conv2dSpec, Element, Graph, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, Normal};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(usize);

/// Named, ordered parameter tensors of one network.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Element> Default for ParamStore<T> {
    fn default() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }
}

impl<T: Element> ParamStore<T> {
    pub fn push(&mut self, name: impl Into<String>, t: Tensor<T>) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn cast<U: Element>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }

    /// Puts every tensor on the graph, trainable or frozen.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Bound {
        Bound(
            self.tensors
                .iter()
                .map(|t| {
                    if trainable {
                        g.param(t.clone())
                    } else {
                        g.constant(t.clone())
                    }
                })
                .collect(),
        )
    }

    /// Replaces tensors by name; every name must exist with the same shape.
    pub fn load_named(&mut self, named: &[(String, Tensor<T>)]) -> Result<(), String> {
        if named.len() != self.tensors.len() {
            return Err(format!(
                "expected {} tensors, found {}",
                self.tensors.len(),
                named.len()
            ));
        }
        for (name, t) in named {
            let idx = self
                .names
                .iter()
                .position(|n| n == name)
                .ok_or_else(|| format!("unknown tensor {name}"))?;
            if self.tensors[idx].shape() != t.shape() {
                return Err(format!(
                    "tensor {name}: shape {:?} does not match {:?}",
                    t.shape(),
                    self.tensors[idx].shape()
                ));
            }
            self.tensors[idx] = t.clone();
        }
        Ok(())
    }

    pub fn named(&self) -> Vec<(String, Tensor<T>)> {
        self.names.iter().cloned().zip(self.tensors.iter().cloned()).collect()
    }
}

/// Graph handles for a bound [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Bound {
    pub fn empty() -> Self {
        Bound(Vec::new())
    }

    pub fn get(&self, id: ParamId) -> Var {
        self.0[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

/// Gathers the gradients of a bound store in parameter order.
pub fn collect_grads<T: Element>(
    grads: &mut lanegan_tensor::Gradients<T>,
    bound: &Bound,
) -> Vec<Option<Tensor<T>>> {
    bound.vars().iter().map(|&v| grads.take(v)).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conv {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub spec: Conv2dSpec,
}

impl Conv {
    pub fn forward<T: Element>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Var {
        g.conv2d(x, p.get(self.w), self.b.map(|b| p.get(b)), self.spec)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvTranspose {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub spec: Conv2dSpec,
    pub output_padding: (usize, usize),
}

impl ConvTranspose {
    pub fn forward<T: Element>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Var {
        g.conv_transpose2d(x, p.get(self.w), self.b.map(|b| p.get(b)), self.spec, self.output_padding)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn forward<T: Element>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Var {
        g.linear(x, p.get(self.w), p.get(self.b))
    }
}

/// Allocates randomly initialized parameters while a network is laid out.
pub struct Builder<'a, R: Rng> {
    pub store: ParamStore<f32>,
    rng: &'a mut R,
}

impl<'a, R: Rng> Builder<'a, R> {
    pub fn new(rng: &'a mut R) -> Self {
        Self {
            store: ParamStore::default(),
            rng,
        }
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> ParamId {
        let n: usize = shape.iter().product();
        let data = if std > 0.0 {
            let dist = Normal::new(0.0, std).expect("positive std");
            (0..n).map(|_| dist.sample(self.rng) as f32).collect()
        } else {
            vec![0.0; n]
        };
        self.store.push(name, Tensor::from_vec(shape, data))
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f32) -> ParamId {
        self.store.push(name, Tensor::full(shape, value))
    }

    #[allow(clippy::too_many_arguments)]
    pub fn conv(
        &mut self,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: (usize, usize),
        spec: Conv2dSpec,
        bias: bool,
        std: f64,
    ) -> Conv {
        let w = self.normal(&format!("{name}.weight"), &[cout, cin, kernel.0, kernel.1], std);
        let b = bias.then(|| self.constant(&format!("{name}.bias"), &[cout], 0.0));
        Conv { w, b, spec }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn conv_transpose(
        &mut self,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        spec: Conv2dSpec,
        output_padding: (usize, usize),
        std: f64,
    ) -> ConvTranspose {
        let w = self.normal(&format!("{name}.weight"), &[cin, cout, kernel, kernel], std);
        let b = Some(self.constant(&format!("{name}.bias"), &[cout], 0.0));
        ConvTranspose {
            w,
            b,
            spec,
            output_padding,
        }
    }

    pub fn linear(&mut self, name: &str, inp: usize, out: usize, std: f64) -> Linear {
        let w = self.normal(&format!("{name}.weight"), &[out, inp], std);
        let b = self.constant(&format!("{name}.bias"), &[out], 0.0);
        Linear { w, b }
    }
}

/// He-style standard deviation for a fan-in.
pub fn he_std(fan_in: usize) -> f64 {
    (2.0 / fan_in.max(1) as f64).sqrt()
}
