//! Raw convolution, padding and pooling kernels on NCHW buffers.

use crate::element::matmul;
use crate::{Element, Tensor};

/// Stride, zero padding and dilation of a 2-D convolution, as `(rows, cols)` pairs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub dilation: (usize, usize),
}

impl Conv2dSpec {
    pub fn new(stride: usize, padding: usize) -> Self {
        Self {
            stride: (stride, stride),
            padding: (padding, padding),
            dilation: (1, 1),
        }
    }

    pub fn asymmetric(padding: (usize, usize), dilation: (usize, usize)) -> Self {
        Self {
            stride: (1, 1),
            padding,
            dilation,
        }
    }

    /// Output size of a forward convolution, or `None` when the kernel does not fit.
    pub fn out_dims(&self, h: usize, w: usize, kh: usize, kw: usize) -> Option<(usize, usize)> {
        let span_h = self.dilation.0 * (kh - 1) + 1;
        let span_w = self.dilation.1 * (kw - 1) + 1;
        let ph = h + 2 * self.padding.0;
        let pw = w + 2 * self.padding.1;
        if ph < span_h || pw < span_w {
            return None;
        }
        Some(((ph - span_h) / self.stride.0 + 1, (pw - span_w) / self.stride.1 + 1))
    }

    /// Output size of the transposed convolution with the given extra output padding.
    pub fn transposed_out_dims(
        &self,
        h: usize,
        w: usize,
        kh: usize,
        kw: usize,
        output_padding: (usize, usize),
    ) -> (usize, usize) {
        let oh = (h - 1) * self.stride.0 + self.dilation.0 * (kh - 1) + output_padding.0 + 1
            - 2 * self.padding.0;
        let ow = (w - 1) * self.stride.1 + self.dilation.1 * (kw - 1) + output_padding.1 + 1
            - 2 * self.padding.1;
        (oh, ow)
    }
}

/// Mirror index `i` into `0..n` without repeating the edge sample.
///
/// Works for any offset (the pattern is periodic); a length-one axis replicates.
pub fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

#[allow(clippy::too_many_arguments)]
fn im2col<T: Element>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    spec: &Conv2dSpec,
    oh: usize,
    ow: usize,
    cols: &mut [T],
) {
    let (sh, sw) = spec.stride;
    let (ph, pw) = (spec.padding.0 as isize, spec.padding.1 as isize);
    let (dh, dw) = spec.dilation;
    let plane = oh * ow;
    for ci in 0..c {
        let xc = &x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..oh {
                    let iy = (oy * sh + ki * dh) as isize - ph;
                    let drow = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        drow.fill(T::zero());
                        continue;
                    }
                    let src = &xc[iy as usize * w..(iy as usize + 1) * w];
                    let x0 = (kj * dw) as isize - pw;
                    if sw == 1 && x0 >= 0 && x0 as usize + ow <= w {
                        drow.copy_from_slice(&src[x0 as usize..x0 as usize + ow]);
                        continue;
                    }
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * sw) as isize + x0;
                        *d = if ix < 0 || ix >= w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im<T: Element>(
    cols: &[T],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    spec: &Conv2dSpec,
    oh: usize,
    ow: usize,
    x: &mut [T],
) {
    let (sh, sw) = spec.stride;
    let (ph, pw) = (spec.padding.0 as isize, spec.padding.1 as isize);
    let (dh, dw) = spec.dilation;
    let plane = oh * ow;
    for ci in 0..c {
        let xc = &mut x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..oh {
                    let iy = (oy * sh + ki * dh) as isize - ph;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let drow = &mut xc[iy as usize * w..(iy as usize + 1) * w];
                    let srow = &src[oy * ow..(oy + 1) * ow];
                    let x0 = (kj * dw) as isize - pw;
                    for (ox, &v) in srow.iter().enumerate() {
                        let ix = (ox * sw) as isize + x0;
                        if ix >= 0 && ix < w as isize {
                            drow[ix as usize] = drow[ix as usize] + v;
                        }
                    }
                }
            }
        }
    }
}

fn add_channel_bias<T: Element>(y: &mut [T], n: usize, c: usize, plane: usize, bias: &[T]) {
    for ni in 0..n {
        for (ci, &b) in bias.iter().enumerate().take(c) {
            let off = (ni * c + ci) * plane;
            for v in &mut y[off..off + plane] {
                *v = *v + b;
            }
        }
    }
}

/// Sum of `dy` over batch and spatial axes, per channel.
pub fn channel_sums<T: Element>(dy: &Tensor<T>) -> Vec<T> {
    let (n, c, h, w) = dy.dims4();
    let plane = h * w;
    let mut out = vec![T::zero(); c];
    for ni in 0..n {
        for (ci, o) in out.iter_mut().enumerate() {
            let off = (ni * c + ci) * plane;
            *o = *o + dy.data()[off..off + plane].iter().copied().sum::<T>();
        }
    }
    out
}

/// Cross-correlation of `x [n,c,h,w]` with `weight [co,c,kh,kw]`.
pub fn conv2d<T: Element>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&[T]>,
    spec: &Conv2dSpec,
) -> Tensor<T> {
    let (n, c, h, w) = x.dims4();
    let (co, wc, kh, kw) = weight.dims4();
    assert_eq!(c, wc, "conv2d channel mismatch: input {c}, weight {wc}");
    let (oh, ow) = spec
        .out_dims(h, w, kh, kw)
        .unwrap_or_else(|| panic!("conv2d kernel {kh}x{kw} does not fit {h}x{w}"));
    let kdim = c * kh * kw;
    let plane = oh * ow;
    let mut cols = vec![T::zero(); kdim * plane];
    let mut y = Tensor::zeros(&[n, co, oh, ow]);
    for ni in 0..n {
        let xs = &x.data()[ni * c * h * w..(ni + 1) * c * h * w];
        im2col(xs, c, h, w, kh, kw, spec, oh, ow, &mut cols);
        let ys = &mut y.data_mut()[ni * co * plane..(ni + 1) * co * plane];
        matmul(co, kdim, plane, weight.data(), false, &cols, false, ys, false);
    }
    if let Some(b) = bias {
        add_channel_bias(y.data_mut(), n, co, plane, b);
    }
    y
}

/// Gradients of [`conv2d`] with respect to input and weight.
pub fn conv2d_backward<T: Element>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    dy: &Tensor<T>,
    spec: &Conv2dSpec,
    need_dx: bool,
    need_dw: bool,
) -> (Option<Tensor<T>>, Option<Tensor<T>>) {
    let (n, c, h, w) = x.dims4();
    let (co, _, kh, kw) = weight.dims4();
    let (_, _, oh, ow) = dy.dims4();
    let kdim = c * kh * kw;
    let plane = oh * ow;
    let mut cols = vec![T::zero(); kdim * plane];
    let mut dx = need_dx.then(|| Tensor::zeros(x.shape()));
    let mut dw = need_dw.then(|| Tensor::zeros(weight.shape()));
    for ni in 0..n {
        let dys = &dy.data()[ni * co * plane..(ni + 1) * co * plane];
        if let Some(dw) = dw.as_mut() {
            let xs = &x.data()[ni * c * h * w..(ni + 1) * c * h * w];
            im2col(xs, c, h, w, kh, kw, spec, oh, ow, &mut cols);
            matmul(co, plane, kdim, dys, false, &cols, true, dw.data_mut(), true);
        }
        if let Some(dx) = dx.as_mut() {
            matmul(kdim, co, plane, weight.data(), true, dys, false, &mut cols, false);
            let dxs = &mut dx.data_mut()[ni * c * h * w..(ni + 1) * c * h * w];
            col2im(&cols, c, h, w, kh, kw, spec, oh, ow, dxs);
        }
    }
    (dx, dw)
}

/// Transposed convolution of `x [n,ci,h,w]` with `weight [ci,co,kh,kw]`.
pub fn conv_transpose2d<T: Element>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&[T]>,
    spec: &Conv2dSpec,
    output_padding: (usize, usize),
) -> Tensor<T> {
    let (n, ci, h, w) = x.dims4();
    let (wci, co, kh, kw) = weight.dims4();
    assert_eq!(ci, wci, "conv_transpose2d channel mismatch: input {ci}, weight {wci}");
    let (oh, ow) = spec.transposed_out_dims(h, w, kh, kw, output_padding);
    let kdim = co * kh * kw;
    let plane = h * w;
    let mut cols = vec![T::zero(); kdim * plane];
    let mut y = Tensor::zeros(&[n, co, oh, ow]);
    for ni in 0..n {
        let xs = &x.data()[ni * ci * plane..(ni + 1) * ci * plane];
        matmul(kdim, ci, plane, weight.data(), true, xs, false, &mut cols, false);
        let ys = &mut y.data_mut()[ni * co * oh * ow..(ni + 1) * co * oh * ow];
        col2im(&cols, co, oh, ow, kh, kw, spec, h, w, ys);
    }
    if let Some(b) = bias {
        add_channel_bias(y.data_mut(), n, co, oh * ow, b);
    }
    y
}

/// Gradients of [`conv_transpose2d`] with respect to input and weight.
pub fn conv_transpose2d_backward<T: Element>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    dy: &Tensor<T>,
    spec: &Conv2dSpec,
    need_dx: bool,
    need_dw: bool,
) -> (Option<Tensor<T>>, Option<Tensor<T>>) {
    let (n, ci, h, w) = x.dims4();
    let (_, co, kh, kw) = weight.dims4();
    let (_, _, oh, ow) = dy.dims4();
    let kdim = co * kh * kw;
    let plane = h * w;
    let mut cols = vec![T::zero(); kdim * plane];
    let mut dx = need_dx.then(|| Tensor::zeros(x.shape()));
    let mut dw = need_dw.then(|| Tensor::zeros(weight.shape()));
    for ni in 0..n {
        let dys = &dy.data()[ni * co * oh * ow..(ni + 1) * co * oh * ow];
        im2col(dys, co, oh, ow, kh, kw, spec, h, w, &mut cols);
        if let Some(dx) = dx.as_mut() {
            let dxs = &mut dx.data_mut()[ni * ci * plane..(ni + 1) * ci * plane];
            matmul(ci, kdim, plane, weight.data(), false, &cols, false, dxs, false);
        }
        if let Some(dw) = dw.as_mut() {
            let xs = &x.data()[ni * ci * plane..(ni + 1) * ci * plane];
            matmul(ci, plane, kdim, xs, false, &cols, true, dw.data_mut(), true);
        }
    }
    (dx, dw)
}

/// Padding amounts on the four borders of a feature map.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Pad4 {
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
}

impl Pad4 {
    pub fn uniform(p: usize) -> Self {
        Self {
            top: p,
            bottom: p,
            left: p,
            right: p,
        }
    }
}

pub fn reflect_pad<T: Element>(x: &Tensor<T>, pad: Pad4) -> Tensor<T> {
    let (n, c, h, w) = x.dims4();
    let oh = h + pad.top + pad.bottom;
    let ow = w + pad.left + pad.right;
    let cols: Vec<usize> = (0..ow)
        .map(|j| reflect_index(j as isize - pad.left as isize, w))
        .collect();
    let mut y = Tensor::zeros(&[n, c, oh, ow]);
    let yd = y.data_mut();
    for p in 0..n * c {
        let src = &x.data()[p * h * w..(p + 1) * h * w];
        for i in 0..oh {
            let si = reflect_index(i as isize - pad.top as isize, h);
            let srow = &src[si * w..(si + 1) * w];
            let drow = &mut yd[(p * oh + i) * ow..(p * oh + i + 1) * ow];
            for (d, &sj) in drow.iter_mut().zip(&cols) {
                *d = srow[sj];
            }
        }
    }
    y
}

pub fn reflect_pad_backward<T: Element>(dy: &Tensor<T>, pad: Pad4, h: usize, w: usize) -> Tensor<T> {
    let (n, c, oh, ow) = dy.dims4();
    let mut dx = Tensor::zeros(&[n, c, h, w]);
    let dxd = dx.data_mut();
    for p in 0..n * c {
        for i in 0..oh {
            let si = reflect_index(i as isize - pad.top as isize, h);
            for j in 0..ow {
                let sj = reflect_index(j as isize - pad.left as isize, w);
                let v = dy.data()[(p * oh + i) * ow + j];
                let d = &mut dxd[(p * h + si) * w + sj];
                *d = *d + v;
            }
        }
    }
    dx
}

/// Window of `x` starting at `(top, left)` with the given size.
pub fn crop<T: Element>(x: &Tensor<T>, top: usize, left: usize, oh: usize, ow: usize) -> Tensor<T> {
    let (n, c, h, w) = x.dims4();
    assert!(top + oh <= h && left + ow <= w, "crop window exceeds {h}x{w}");
    let mut y = Tensor::zeros(&[n, c, oh, ow]);
    let yd = y.data_mut();
    for p in 0..n * c {
        for i in 0..oh {
            let s = (p * h + top + i) * w + left;
            yd[(p * oh + i) * ow..(p * oh + i + 1) * ow].copy_from_slice(&x.data()[s..s + ow]);
        }
    }
    y
}

pub fn crop_backward<T: Element>(dy: &Tensor<T>, top: usize, left: usize, h: usize, w: usize) -> Tensor<T> {
    let (n, c, oh, ow) = dy.dims4();
    let mut dx = Tensor::zeros(&[n, c, h, w]);
    let dxd = dx.data_mut();
    for p in 0..n * c {
        for i in 0..oh {
            let s = (p * h + top + i) * w + left;
            dxd[s..s + ow].copy_from_slice(&dy.data()[(p * oh + i) * ow..(p * oh + i + 1) * ow]);
        }
    }
    dx
}

/// 2×2 max pooling with stride 2; returns the pooled map and flat argmax indices.
pub fn max_pool2<T: Element>(x: &Tensor<T>) -> (Tensor<T>, Vec<usize>) {
    let (n, c, h, w) = x.dims4();
    let (oh, ow) = (h / 2, w / 2);
    let mut y = Tensor::zeros(&[n, c, oh, ow]);
    let mut arg = vec![0usize; n * c * oh * ow];
    let xd = x.data();
    for p in 0..n * c {
        for i in 0..oh {
            for j in 0..ow {
                let mut best = (p * h + 2 * i) * w + 2 * j;
                for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = (p * h + 2 * i + di) * w + 2 * j + dj;
                    if xd[idx] > xd[best] {
                        best = idx;
                    }
                }
                let o = (p * oh + i) * ow + j;
                y.data_mut()[o] = xd[best];
                arg[o] = best;
            }
        }
    }
    (y, arg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &Tensor<f64>, wt: &Tensor<f64>, spec: &Conv2dSpec) -> Tensor<f64> {
        let (n, c, h, w) = x.dims4();
        let (co, _, kh, kw) = wt.dims4();
        let (oh, ow) = spec.out_dims(h, w, kh, kw).unwrap();
        let mut y = Tensor::zeros(&[n, co, oh, ow]);
        for ni in 0..n {
            for o in 0..co {
                for i in 0..oh {
                    for j in 0..ow {
                        let mut acc = 0.0;
                        for ci in 0..c {
                            for a in 0..kh {
                                for b in 0..kw {
                                    let iy = (i * spec.stride.0 + a * spec.dilation.0) as isize
                                        - spec.padding.0 as isize;
                                    let ix = (j * spec.stride.1 + b * spec.dilation.1) as isize
                                        - spec.padding.1 as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                        acc += x.data()[((ni * c + ci) * h + iy as usize) * w + ix as usize]
                                            * wt.data()[((o * c + ci) * kh + a) * kw + b];
                                    }
                                }
                            }
                        }
                        y.data_mut()[((ni * co + o) * oh + i) * ow + j] = acc;
                    }
                }
            }
        }
        y
    }

    fn ramp(shape: &[usize], k: f64) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|i| ((i as f64 + 1.0) * k).sin()).collect())
    }

    #[test]
    fn conv_matches_naive_with_stride_padding_dilation() {
        let x = ramp(&[2, 3, 9, 11], 0.7);
        let w = ramp(&[4, 3, 3, 2], 1.3);
        for spec in [
            Conv2dSpec::new(1, 0),
            Conv2dSpec::new(2, 1),
            Conv2dSpec::asymmetric((2, 1), (2, 1)),
        ] {
            let y = conv2d(&x, &w, None, &spec);
            assert!(y.max_abs_diff(&naive_conv(&x, &w, &spec)) < 1e-10);
        }
    }

    #[test]
    fn transposed_conv_is_adjoint_of_conv() {
        // <conv(x), y> == <x, conv_t(y)> for matching geometry.
        let spec = Conv2dSpec::new(2, 1);
        let x = ramp(&[1, 2, 8, 6], 0.3);
        let w = ramp(&[3, 2, 3, 3], 0.9);
        let cx = conv2d(&x, &w, None, &spec);
        let (_, _, oh, ow) = cx.dims4();
        let y = ramp(&[1, 3, oh, ow], 0.5);
        // conv weight [co=3, ci=2] doubles as transposed weight [ci=3, co=2].
        let ty = conv_transpose2d(&y, &w, None, &spec, (1, 1));
        assert_eq!(ty.shape(), x.shape());
        let lhs: f64 = cx.data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(ty.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9);
    }

    #[test]
    fn reflect_index_mirrors_without_edge_repeat() {
        let got: Vec<usize> = (-3..7).map(|i| reflect_index(i, 4)).collect();
        assert_eq!(got, vec![3, 2, 1, 0, 1, 2, 3, 2, 1, 0]);
        assert_eq!(reflect_index(5, 1), 0);
    }

    #[test]
    fn out_dims_rejects_oversized_kernel() {
        assert_eq!(Conv2dSpec::new(1, 0).out_dims(3, 3, 4, 4), None);
        assert_eq!(Conv2dSpec::new(2, 1).out_dims(256, 256, 4, 4), Some((128, 128)));
    }
}
