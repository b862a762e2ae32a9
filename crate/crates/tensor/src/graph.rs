//! Tape-based reverse-mode differentiation.
//!
//! Every op appends a node holding its forward value. `backward` walks the
//! tape in reverse and only visits nodes that depend on a trainable leaf.

use crate::kernels::{self, Conv2dSpec, Pad4};
use crate::{Element, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        spec: Conv2dSpec,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        spec: Conv2dSpec,
    },
    ReflectPad {
        x: Var,
        pad: Pad4,
    },
    Crop {
        x: Var,
        top: usize,
        left: usize,
    },
    InstanceNorm {
        x: Var,
        inv_std: Vec<T>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        normalized: Tensor<T>,
        inv_std: Vec<T>,
    },
    ChannelAffine {
        x: Var,
        scale: Vec<T>,
    },
    Relu(Var),
    LeakyRelu(Var, T),
    Tanh(Var),
    Sigmoid(Var),
    Add(Var, Var),
    Scale(Var, T),
    ConcatChannels(Vec<Var>),
    MaxPool2 {
        x: Var,
        argmax: Vec<usize>,
    },
    GlobalAvgPool(Var),
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Mean(Var),
    NegLogMean {
        x: Var,
        complement: bool,
        eps: T,
    },
    SquaredErrorMean {
        x: Var,
        target: T,
    },
    L1Mean(Var, Var),
    SoftmaxNll {
        logits: Var,
        targets: Vec<usize>,
        class_weights: Vec<T>,
        probs: Tensor<T>,
        weight_sum: T,
    },
    BceMean {
        p: Var,
        targets: Vec<T>,
        eps: T,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Statistics of one batch-normalization call, for running-average updates.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Unbiased variance.
    pub var: Vec<T>,
}

#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn t<T: Element>(v: f64) -> T {
    T::from_f64_lossy(v)
}

fn tn<T: Element>(n: usize) -> T {
    T::from_usize(n).unwrap()
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that receives no gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: Conv2dSpec) -> Var {
        let y = kernels::conv2d(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b).data()),
            &spec,
        );
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(y, Op::Conv2d { x, w, b, spec }, &inputs)
    }

    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        spec: Conv2dSpec,
        output_padding: (usize, usize),
    ) -> Var {
        let y = kernels::conv_transpose2d(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b).data()),
            &spec,
            output_padding,
        );
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(y, Op::ConvTranspose2d { x, w, b, spec }, &inputs)
    }

    pub fn reflect_pad(&mut self, x: Var, pad: Pad4) -> Var {
        if pad == Pad4::default() {
            return x;
        }
        let y = kernels::reflect_pad(self.value(x), pad);
        self.push(y, Op::ReflectPad { x, pad }, &[x])
    }

    pub fn crop(&mut self, x: Var, top: usize, left: usize, height: usize, width: usize) -> Var {
        let (_, _, h, w) = self.value(x).dims4();
        if top == 0 && left == 0 && height == h && width == w {
            return x;
        }
        let y = kernels::crop(self.value(x), top, left, height, width);
        self.push(y, Op::Crop { x, top, left }, &[x])
    }

    /// Per-sample, per-channel normalization to zero mean and unit variance.
    pub fn instance_norm(&mut self, x: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let (n, c, h, w) = xv.dims4();
        let plane = h * w;
        let mut y = Tensor::zeros(xv.shape());
        let mut inv_std = Vec::with_capacity(n * c);
        for p in 0..n * c {
            let src = &xv.data()[p * plane..(p + 1) * plane];
            let mean = src.iter().copied().sum::<T>() / tn(plane);
            let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / tn(plane);
            let is = T::one() / (var + t(eps)).sqrt();
            inv_std.push(is);
            for (d, &s) in y.data_mut()[p * plane..(p + 1) * plane].iter_mut().zip(src) {
                *d = (s - mean) * is;
            }
        }
        self.push(y, Op::InstanceNorm { x, inv_std }, &[x])
    }

    /// Batch normalization with batch statistics and affine `gamma`, `beta` of shape `[c]`.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> (Var, BatchStats<T>) {
        let xv = self.value(x);
        let (n, c, h, w) = xv.dims4();
        let plane = h * w;
        let count = n * plane;
        let mut normalized = Tensor::zeros(xv.shape());
        let mut y = Tensor::zeros(xv.shape());
        let mut inv_std = vec![T::zero(); c];
        let mut stats = BatchStats {
            mean: vec![T::zero(); c],
            var: vec![T::zero(); c],
        };
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        for ci in 0..c {
            let mut sum = T::zero();
            for ni in 0..n {
                let off = (ni * c + ci) * plane;
                sum = sum + xv.data()[off..off + plane].iter().copied().sum::<T>();
            }
            let mean = sum / tn(count);
            let mut sq = T::zero();
            for ni in 0..n {
                let off = (ni * c + ci) * plane;
                sq = sq + xv.data()[off..off + plane].iter().map(|&v| (v - mean) * (v - mean)).sum::<T>();
            }
            let var = sq / tn(count);
            let is = T::one() / (var + t(eps)).sqrt();
            inv_std[ci] = is;
            stats.mean[ci] = mean;
            stats.var[ci] = if count > 1 { sq / tn(count - 1) } else { var };
            for ni in 0..n {
                let off = (ni * c + ci) * plane;
                for k in off..off + plane {
                    let xh = (xv.data()[k] - mean) * is;
                    normalized.data_mut()[k] = xh;
                    y.data_mut()[k] = g[ci] * xh + b[ci];
                }
            }
        }
        let v = self.push(
            y,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                normalized,
                inv_std,
            },
            &[x, gamma, beta],
        );
        (v, stats)
    }

    /// `y = x * scale[c] + shift[c]` with constant per-channel coefficients.
    pub fn channel_affine(&mut self, x: Var, scale: Vec<T>, shift: Vec<T>) -> Var {
        let xv = self.value(x);
        let (n, c, h, w) = xv.dims4();
        assert_eq!(scale.len(), c);
        assert_eq!(shift.len(), c);
        let plane = h * w;
        let mut y = xv.clone();
        for ni in 0..n {
            for ci in 0..c {
                let off = (ni * c + ci) * plane;
                for v in &mut y.data_mut()[off..off + plane] {
                    *v = *v * scale[ci] + shift[ci];
                }
            }
        }
        self.push(y, Op::ChannelAffine { x, scale }, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = self.value(x).map(|v| v.max(T::zero()));
        self.push(y, Op::Relu(x), &[x])
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let s = t::<T>(slope);
        let y = self.value(x).map(|v| if v > T::zero() { v } else { v * s });
        self.push(y, Op::LeakyRelu(x, s), &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let y = self.value(x).map(|v| v.tanh());
        self.push(y, Op::Tanh(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let y = self.value(x).map(sigmoid);
        self.push(y, Op::Sigmoid(x), &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut y = self.value(a).clone();
        y.add_assign(self.value(b));
        self.push(y, Op::Add(a, b), &[a, b])
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let f = t::<T>(factor);
        let y = self.value(x).map(|v| v * f);
        self.push(y, Op::Scale(x, f), &[x])
    }

    pub fn concat_channels(&mut self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty());
        let (n, _, h, w) = self.value(xs[0]).dims4();
        let chans: Vec<usize> = xs
            .iter()
            .map(|&v| {
                let (vn, vc, vh, vw) = self.value(v).dims4();
                assert_eq!((vn, vh, vw), (n, h, w), "concat operands must share n,h,w");
                vc
            })
            .collect();
        let ctot: usize = chans.iter().sum();
        let plane = h * w;
        let mut y = Tensor::zeros(&[n, ctot, h, w]);
        for ni in 0..n {
            let mut c0 = 0;
            for (&v, &c) in xs.iter().zip(&chans) {
                let src = &self.value(v).data()[ni * c * plane..(ni + 1) * c * plane];
                let dst = (ni * ctot + c0) * plane;
                y.data_mut()[dst..dst + c * plane].copy_from_slice(src);
                c0 += c;
            }
        }
        self.push(y, Op::ConcatChannels(xs.to_vec()), xs)
    }

    pub fn max_pool2(&mut self, x: Var) -> Var {
        let (y, argmax) = kernels::max_pool2(self.value(x));
        self.push(y, Op::MaxPool2 { x, argmax }, &[x])
    }

    /// `[n,c,h,w] -> [n,c]` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (n, c, h, w) = xv.dims4();
        let plane = h * w;
        let data = (0..n * c)
            .map(|p| xv.data()[p * plane..(p + 1) * plane].iter().copied().sum::<T>() / tn(plane))
            .collect();
        self.push(Tensor::from_vec(&[n, c], data), Op::GlobalAvgPool(x), &[x])
    }

    /// `x [n,in] * w[out,in]^T + b[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xv = self.value(x);
        let wv = self.value(w);
        let (n, inp) = (xv.shape()[0], xv.shape()[1]);
        let out = wv.shape()[0];
        assert_eq!(wv.shape()[1], inp, "linear input width mismatch");
        let mut y = Tensor::zeros(&[n, out]);
        crate::element::matmul(n, inp, out, xv.data(), false, wv.data(), true, y.data_mut(), false);
        let bv = self.value(b).data();
        for row in y.data_mut().chunks_mut(out) {
            for (v, &bb) in row.iter_mut().zip(bv) {
                *v = *v + bb;
            }
        }
        self.push(y, Op::Linear { x, w, b }, &[x, w, b])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let m = self.value(x).mean();
        self.push(Tensor::scalar(m), Op::Mean(x), &[x])
    }

    /// `mean(-ln q)` with `q = x` (or `1 - x` when `complement`), clamped to `[eps, 1-eps]`.
    pub fn neg_log_mean(&mut self, x: Var, complement: bool, eps: f64) -> Var {
        let e = t::<T>(eps);
        let xv = self.value(x);
        let total: T = xv
            .data()
            .iter()
            .map(|&p| {
                let q = if complement { T::one() - p } else { p };
                -(q.max(e).min(T::one() - e)).ln()
            })
            .sum();
        let m = total / tn(xv.len());
        self.push(
            Tensor::scalar(m),
            Op::NegLogMean { x, complement, eps: e },
            &[x],
        )
    }

    /// `mean((x - target)^2)`.
    pub fn squared_error_mean(&mut self, x: Var, target: f64) -> Var {
        let tg = t::<T>(target);
        let xv = self.value(x);
        let m = xv.data().iter().map(|&v| (v - tg) * (v - tg)).sum::<T>() / tn(xv.len());
        self.push(Tensor::scalar(m), Op::SquaredErrorMean { x, target: tg }, &[x])
    }

    /// `mean(|a - b|)`.
    pub fn l1_mean(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "l1_mean shape mismatch");
        let m = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| (x - y).abs())
            .sum::<T>()
            / tn(av.len());
        self.push(Tensor::scalar(m), Op::L1Mean(a, b), &[a, b])
    }

    /// Class-weighted mean negative log-likelihood of channel-wise softmax.
    ///
    /// `targets` holds one class index per `(n, y, x)` location in row-major order.
    pub fn softmax_nll(&mut self, logits: Var, targets: &[usize], class_weights: &[f64]) -> Var {
        let lv = self.value(logits);
        let (n, c, h, w) = lv.dims4();
        let plane = h * w;
        assert_eq!(targets.len(), n * plane, "target count mismatch");
        assert_eq!(class_weights.len(), c, "one weight per class");
        let cw: Vec<T> = class_weights.iter().map(|&v| t(v)).collect();
        let mut probs = Tensor::zeros(lv.shape());
        let mut loss = T::zero();
        let mut weight_sum = T::zero();
        let ld = lv.data();
        for ni in 0..n {
            for k in 0..plane {
                let at = |ci: usize| (ni * c + ci) * plane + k;
                let mx = (0..c).map(|ci| ld[at(ci)]).fold(T::neg_infinity(), T::max);
                let z: T = (0..c).map(|ci| (ld[at(ci)] - mx).exp()).sum();
                let lz = z.ln() + mx;
                for ci in 0..c {
                    probs.data_mut()[at(ci)] = (ld[at(ci)] - lz).exp();
                }
                let tgt = targets[ni * plane + k];
                assert!(tgt < c, "class index {tgt} out of range 0..{c}");
                loss = loss + cw[tgt] * (lz - ld[at(tgt)]);
                weight_sum = weight_sum + cw[tgt];
            }
        }
        let value = if weight_sum > T::zero() {
            loss / weight_sum
        } else {
            T::zero()
        };
        self.push(
            Tensor::scalar(value),
            Op::SoftmaxNll {
                logits,
                targets: targets.to_vec(),
                class_weights: cw,
                probs,
                weight_sum,
            },
            &[logits],
        )
    }

    /// Mean binary cross entropy of probabilities `p` against `targets`, clamped to `[eps, 1-eps]`.
    pub fn bce_mean(&mut self, p: Var, targets: &[f64], eps: f64) -> Var {
        let pv = self.value(p);
        assert_eq!(pv.len(), targets.len(), "bce target count mismatch");
        let e = t::<T>(eps);
        let tg: Vec<T> = targets.iter().map(|&v| t(v)).collect();
        let total: T = pv
            .data()
            .iter()
            .zip(&tg)
            .map(|(&q, &y)| {
                let q = q.max(e).min(T::one() - e);
                -(y * q.ln() + (T::one() - y) * (T::one() - q).ln())
            })
            .sum();
        let m = total / tn(pv.len());
        self.push(
            Tensor::scalar(m),
            Op::BceMean {
                p,
                targets: tg,
                eps: e,
            },
            &[p],
        )
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one()));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(dy) = grads[idx].take() else { continue };
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(dy);
                continue;
            }
            self.backprop_node(node, &dy, &mut grads);
        }
        Gradients { grads }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&self, node: &Node<T>, dy: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let mut acc = |v: Var, g: Tensor<T>| match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        };
        let scalar_grad = |dy: &Tensor<T>| dy.data()[0];
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, spec } => {
                let (dx, dw) = kernels::conv2d_backward(
                    self.value(*x),
                    self.value(*w),
                    dy,
                    spec,
                    self.needs(*x),
                    self.needs(*w),
                );
                if let Some(dx) = dx {
                    acc(*x, dx);
                }
                if let Some(dw) = dw {
                    acc(*w, dw);
                }
                if let Some(b) = b.filter(|b| self.needs(*b)) {
                    let db = kernels::channel_sums(dy);
                    acc(b, Tensor::from_vec(&[db.len()], db));
                }
            }
            Op::ConvTranspose2d { x, w, b, spec } => {
                let (dx, dw) = kernels::conv_transpose2d_backward(
                    self.value(*x),
                    self.value(*w),
                    dy,
                    spec,
                    self.needs(*x),
                    self.needs(*w),
                );
                if let Some(dx) = dx {
                    acc(*x, dx);
                }
                if let Some(dw) = dw {
                    acc(*w, dw);
                }
                if let Some(b) = b.filter(|b| self.needs(*b)) {
                    let db = kernels::channel_sums(dy);
                    acc(b, Tensor::from_vec(&[db.len()], db));
                }
            }
            Op::ReflectPad { x, pad } => {
                let (_, _, h, w) = self.value(*x).dims4();
                acc(*x, kernels::reflect_pad_backward(dy, *pad, h, w));
            }
            Op::Crop { x, top, left } => {
                let (_, _, h, w) = self.value(*x).dims4();
                acc(*x, kernels::crop_backward(dy, *top, *left, h, w));
            }
            Op::InstanceNorm { x, inv_std } => {
                let y = &node.value;
                let (_, _, h, w) = y.dims4();
                let plane = h * w;
                let np = tn::<T>(plane);
                let mut dx = Tensor::zeros(y.shape());
                for (p, &is) in inv_std.iter().enumerate() {
                    let r = p * plane..(p + 1) * plane;
                    let ys = &y.data()[r.clone()];
                    let ds = &dy.data()[r.clone()];
                    let mdy = ds.iter().copied().sum::<T>() / np;
                    let mdyy = ds.iter().zip(ys).map(|(&a, &b)| a * b).sum::<T>() / np;
                    for ((o, &d), &yy) in dx.data_mut()[r].iter_mut().zip(ds).zip(ys) {
                        *o = is * (d - mdy - yy * mdyy);
                    }
                }
                acc(*x, dx);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                normalized,
                inv_std,
            } => {
                let (n, c, h, w) = normalized.dims4();
                let plane = h * w;
                let cnt = tn::<T>(n * plane);
                let g = self.value(*gamma).data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for ci in 0..c {
                    for ni in 0..n {
                        let off = (ni * c + ci) * plane;
                        for k in off..off + plane {
                            dgamma[ci] = dgamma[ci] + dy.data()[k] * normalized.data()[k];
                            dbeta[ci] = dbeta[ci] + dy.data()[k];
                        }
                    }
                }
                if self.needs(*x) {
                    let mut dx = Tensor::zeros(normalized.shape());
                    for ci in 0..c {
                        let mdy = dbeta[ci] / cnt;
                        let mdyx = dgamma[ci] / cnt;
                        let f = g[ci] * inv_std[ci];
                        for ni in 0..n {
                            let off = (ni * c + ci) * plane;
                            for k in off..off + plane {
                                dx.data_mut()[k] =
                                    f * (dy.data()[k] - mdy - normalized.data()[k] * mdyx);
                            }
                        }
                    }
                    acc(*x, dx);
                }
                if self.needs(*gamma) {
                    acc(*gamma, Tensor::from_vec(&[c], dgamma));
                }
                if self.needs(*beta) {
                    acc(*beta, Tensor::from_vec(&[c], dbeta));
                }
            }
            Op::ChannelAffine { x, scale } => {
                let (n, c, h, w) = dy.dims4();
                let plane = h * w;
                let mut dx = dy.clone();
                for ni in 0..n {
                    for (ci, &s) in scale.iter().enumerate().take(c) {
                        let off = (ni * c + ci) * plane;
                        for v in &mut dx.data_mut()[off..off + plane] {
                            *v = *v * s;
                        }
                    }
                }
                acc(*x, dx);
            }
            Op::Relu(x) => {
                let mut dx = dy.clone();
                for (d, &y) in dx.data_mut().iter_mut().zip(node.value.data()) {
                    if y <= T::zero() {
                        *d = T::zero();
                    }
                }
                acc(*x, dx);
            }
            Op::LeakyRelu(x, s) => {
                let mut dx = dy.clone();
                for (d, &xv) in dx.data_mut().iter_mut().zip(self.value(*x).data()) {
                    if xv <= T::zero() {
                        *d = *d * *s;
                    }
                }
                acc(*x, dx);
            }
            Op::Tanh(x) => {
                let mut dx = dy.clone();
                for (d, &y) in dx.data_mut().iter_mut().zip(node.value.data()) {
                    *d = *d * (T::one() - y * y);
                }
                acc(*x, dx);
            }
            Op::Sigmoid(x) => {
                let mut dx = dy.clone();
                for (d, &y) in dx.data_mut().iter_mut().zip(node.value.data()) {
                    *d = *d * y * (T::one() - y);
                }
                acc(*x, dx);
            }
            Op::Add(a, b) => {
                if self.needs(*a) {
                    acc(*a, dy.clone());
                }
                if self.needs(*b) {
                    acc(*b, dy.clone());
                }
            }
            Op::Scale(x, f) => acc(*x, dy.map(|v| v * *f)),
            Op::ConcatChannels(xs) => {
                let (n, ctot, h, w) = dy.dims4();
                let plane = h * w;
                let mut c0 = 0;
                for &v in xs {
                    let c = self.value(v).dims4().1;
                    if self.needs(v) {
                        let mut dx = Tensor::zeros(&[n, c, h, w]);
                        for ni in 0..n {
                            let src = (ni * ctot + c0) * plane;
                            dx.data_mut()[ni * c * plane..(ni + 1) * c * plane]
                                .copy_from_slice(&dy.data()[src..src + c * plane]);
                        }
                        acc(v, dx);
                    }
                    c0 += c;
                }
            }
            Op::MaxPool2 { x, argmax } => {
                let mut dx = Tensor::zeros(self.value(*x).shape());
                for (&i, &d) in argmax.iter().zip(dy.data()) {
                    dx.data_mut()[i] = dx.data_mut()[i] + d;
                }
                acc(*x, dx);
            }
            Op::GlobalAvgPool(x) => {
                let xs = self.value(*x).shape().to_vec();
                let plane = xs[2] * xs[3];
                let np = tn::<T>(plane);
                let mut dx = Tensor::zeros(&xs);
                for (p, &d) in dy.data().iter().enumerate() {
                    dx.data_mut()[p * plane..(p + 1) * plane].fill(d / np);
                }
                acc(*x, dx);
            }
            Op::Linear { x, w, b } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let (n, inp) = (xv.shape()[0], xv.shape()[1]);
                let out = wv.shape()[0];
                if self.needs(*x) {
                    let mut dx = Tensor::zeros(xv.shape());
                    crate::element::matmul(n, out, inp, dy.data(), false, wv.data(), false, dx.data_mut(), false);
                    acc(*x, dx);
                }
                if self.needs(*w) {
                    let mut dw = Tensor::zeros(wv.shape());
                    crate::element::matmul(out, n, inp, dy.data(), true, xv.data(), false, dw.data_mut(), false);
                    acc(*w, dw);
                }
                if self.needs(*b) {
                    let mut db = vec![T::zero(); out];
                    for row in dy.data().chunks(out) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d = *d + v;
                        }
                    }
                    acc(*b, Tensor::from_vec(&[out], db));
                }
            }
            Op::Mean(x) => {
                let xv = self.value(*x);
                let g = scalar_grad(dy) / tn(xv.len());
                acc(*x, Tensor::full(xv.shape(), g));
            }
            Op::NegLogMean { x, complement, eps } => {
                let xv = self.value(*x);
                let g = scalar_grad(dy) / tn(xv.len());
                let hi = T::one() - *eps;
                let dx = xv.map(|p| {
                    let q = if *complement { T::one() - p } else { p };
                    if q < *eps || q > hi {
                        return T::zero();
                    }
                    let dq = -g / q;
                    if *complement {
                        -dq
                    } else {
                        dq
                    }
                });
                acc(*x, dx);
            }
            Op::SquaredErrorMean { x, target } => {
                let xv = self.value(*x);
                let g = scalar_grad(dy) * t::<T>(2.0) / tn(xv.len());
                acc(*x, xv.map(|v| (v - *target) * g));
            }
            Op::L1Mean(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let g = scalar_grad(dy) / tn(av.len());
                let signs: Vec<T> = av
                    .data()
                    .iter()
                    .zip(bv.data())
                    .map(|(&x, &y)| {
                        if x > y {
                            g
                        } else if x < y {
                            -g
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                if self.needs(*b) {
                    acc(*b, Tensor::from_vec(bv.shape(), signs.iter().map(|&s| -s).collect()));
                }
                if self.needs(*a) {
                    acc(*a, Tensor::from_vec(av.shape(), signs));
                }
            }
            Op::SoftmaxNll {
                logits,
                targets,
                class_weights,
                probs,
                weight_sum,
            } => {
                if *weight_sum <= T::zero() {
                    return;
                }
                let (n, c, h, w) = probs.dims4();
                let plane = h * w;
                let g = scalar_grad(dy) / *weight_sum;
                let mut dx = Tensor::zeros(probs.shape());
                for ni in 0..n {
                    for k in 0..plane {
                        let tgt = targets[ni * plane + k];
                        let wk = class_weights[tgt] * g;
                        for ci in 0..c {
                            let at = (ni * c + ci) * plane + k;
                            let onehot = if ci == tgt { T::one() } else { T::zero() };
                            dx.data_mut()[at] = wk * (probs.data()[at] - onehot);
                        }
                    }
                }
                acc(*logits, dx);
            }
            Op::BceMean { p, targets, eps } => {
                let pv = self.value(*p);
                let g = scalar_grad(dy) / tn(pv.len());
                let hi = T::one() - *eps;
                let d: Vec<T> = pv
                    .data()
                    .iter()
                    .zip(targets)
                    .map(|(&q, &y)| {
                        if q < *eps || q > hi {
                            T::zero()
                        } else {
                            g * (-y / q + (T::one() - y) / (T::one() - q))
                        }
                    })
                    .collect();
                acc(*p, Tensor::from_vec(pv.shape(), d));
            }
        }
    }
}

pub fn sigmoid<T: Element>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}
