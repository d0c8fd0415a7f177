//! Layer kinds with their forward and backward kernels.
//!
//! Convolutions are stride 1 with valid padding over `[N, C, H, W]` tensors.
//! Dense layers flatten everything after the batch dimension.

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerKind {
    Conv2d { in_ch: usize, out_ch: usize, kernel: usize },
    Relu,
    #[serde(rename = "maxpool2")]
    MaxPool2,
    Dense { inputs: usize, units: usize },
    Dropout { rate: f64 },
    SigmoidHead,
}

impl LayerKind {
    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Conv2d { .. } => "conv2d",
            LayerKind::Relu => "relu",
            LayerKind::MaxPool2 => "maxpool2",
            LayerKind::Dense { .. } => "dense",
            LayerKind::Dropout { .. } => "dropout",
            LayerKind::SigmoidHead => "sigmoid_head",
        }
    }

    pub fn has_params(&self) -> bool {
        matches!(self, LayerKind::Conv2d { .. } | LayerKind::Dense { .. })
    }

    /// `(weight, bias)` lengths.
    pub fn param_lens(&self) -> (usize, usize) {
        match *self {
            LayerKind::Conv2d { in_ch, out_ch, kernel } => (out_ch * in_ch * kernel * kernel, out_ch),
            LayerKind::Dense { inputs, units } => (units * inputs, units),
            _ => (0, 0),
        }
    }

    /// Per-item output shape for a per-item input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let ctx = || self.name().to_string();
        match *self {
            LayerKind::Conv2d { in_ch, out_ch, kernel } => match *input {
                [c, h, w] if c == in_ch && h >= kernel && w >= kernel && kernel > 0 => {
                    Ok(vec![out_ch, h - kernel + 1, w - kernel + 1])
                }
                _ => Err(Error::shape(
                    ctx(),
                    format!("expects [{in_ch}, >={kernel}, >={kernel}], got {input:?}"),
                )),
            },
            LayerKind::MaxPool2 => match *input {
                [c, h, w] if h >= 2 && w >= 2 => Ok(vec![c, h / 2, w / 2]),
                _ => Err(Error::shape(ctx(), format!("expects [C, >=2, >=2], got {input:?}"))),
            },
            LayerKind::Dense { inputs, units } => {
                let n: usize = input.iter().product();
                if n == inputs {
                    Ok(vec![units])
                } else {
                    Err(Error::shape(ctx(), format!("expects {inputs} inputs, got {input:?}")))
                }
            }
            LayerKind::Dropout { rate } => {
                if (0.0..1.0).contains(&rate) {
                    Ok(input.to_vec())
                } else {
                    Err(Error::shape(ctx(), format!("rate {rate} outside [0, 1)")))
                }
            }
            LayerKind::Relu => Ok(input.to_vec()),
            LayerKind::SigmoidHead => {
                if input.iter().product::<usize>() == 1 {
                    Ok(vec![1])
                } else {
                    Err(Error::shape(ctx(), format!("expects a single logit, got {input:?}")))
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    #[serde(flatten)]
    pub kind: LayerKind,
    pub trainable: bool,
}

impl LayerSpec {
    pub fn new(kind: LayerKind) -> Self {
        Self { kind, trainable: true }
    }
}

pub(crate) fn conv_forward<T: Scalar>(x: &Tensor<T>, w: &[T], b: &[T], out_ch: usize, k: usize) -> Tensor<T> {
    let [n, c, h, wd] = dims4(x);
    let (oh, ow) = (h - k + 1, wd - k + 1);
    let mut out = vec![T::zero(); n * out_ch * oh * ow];
    let xs = x.data();
    for ni in 0..n {
        for oc in 0..out_ch {
            let plane = &mut out[(ni * out_ch + oc) * oh * ow..][..oh * ow];
            plane.iter_mut().for_each(|v| *v = b[oc]);
            for ic in 0..c {
                let inp = &xs[(ni * c + ic) * h * wd..][..h * wd];
                for kh in 0..k {
                    for kw in 0..k {
                        let wv = w[((oc * c + ic) * k + kh) * k + kw];
                        for oy in 0..oh {
                            let src = &inp[(oy + kh) * wd + kw..][..ow];
                            let dst = &mut plane[oy * ow..][..ow];
                            for (d, &s) in dst.iter_mut().zip(src) {
                                *d += wv * s;
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![n, out_ch, oh, ow], out).expect("conv output shape")
}

/// Returns `(dX, dW, db)`; `dW`/`db` are skipped when `want_params` is false.
pub(crate) fn conv_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &[T],
    dy: &Tensor<T>,
    k: usize,
    want_params: bool,
) -> (Tensor<T>, Option<(Vec<T>, Vec<T>)>) {
    let [n, c, h, wd] = dims4(x);
    let [_, out_ch, oh, ow] = dims4(dy);
    let xs = x.data();
    let ds = dy.data();
    let mut dx = vec![T::zero(); xs.len()];
    let mut dw = vec![T::zero(); if want_params { w.len() } else { 0 }];
    let mut db = vec![T::zero(); if want_params { out_ch } else { 0 }];
    for ni in 0..n {
        for oc in 0..out_ch {
            let g = &ds[(ni * out_ch + oc) * oh * ow..][..oh * ow];
            if want_params {
                db[oc] += g.iter().copied().sum::<T>();
            }
            for ic in 0..c {
                let base = (ni * c + ic) * h * wd;
                for kh in 0..k {
                    for kw in 0..k {
                        let widx = ((oc * c + ic) * k + kh) * k + kw;
                        let wv = w[widx];
                        let mut acc = T::zero();
                        for oy in 0..oh {
                            let off = base + (oy + kh) * wd + kw;
                            let grow = &g[oy * ow..][..ow];
                            if want_params {
                                let src = &xs[off..][..ow];
                                for (&gv, &s) in grow.iter().zip(src) {
                                    acc += gv * s;
                                }
                            }
                            let dst = &mut dx[off..][..ow];
                            for (d, &gv) in dst.iter_mut().zip(grow) {
                                *d += wv * gv;
                            }
                        }
                        if want_params {
                            dw[widx] += acc;
                        }
                    }
                }
            }
        }
    }
    let dx = Tensor::new(x.shape().to_vec(), dx).expect("conv input shape");
    (dx, want_params.then_some((dw, db)))
}

/// 2x2 max pooling with stride 2; returns the output and the flat input
/// index of each window's maximum (first one on ties).
pub(crate) fn maxpool_forward<T: Scalar>(x: &Tensor<T>) -> (Tensor<T>, Vec<usize>) {
    let [n, c, h, w] = dims4(x);
    let (oh, ow) = (h / 2, w / 2);
    let xs = x.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut arg = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if xs[idx] > xs[best] {
                        best = idx;
                    }
                }
                out.push(xs[best]);
                arg.push(best);
            }
        }
    }
    (Tensor::new(vec![n, c, oh, ow], out).expect("pool shape"), arg)
}

pub(crate) fn maxpool_backward<T: Scalar>(x_shape: &[usize], arg: &[usize], dy: &Tensor<T>) -> Tensor<T> {
    let mut dx = Tensor::zeros(x_shape.to_vec());
    let d = dx.data_mut();
    for (&i, &g) in arg.iter().zip(dy.data()) {
        d[i] += g;
    }
    dx
}

pub(crate) fn dense_forward<T: Scalar>(x: &Tensor<T>, w: &[T], b: &[T], units: usize) -> Tensor<T> {
    let n = x.batch();
    let f = x.item_len();
    let mut out = Vec::with_capacity(n * units);
    for ni in 0..n {
        let row = x.item(ni);
        for u in 0..units {
            let wr = &w[u * f..][..f];
            out.push(b[u] + wr.iter().zip(row).map(|(&a, &v)| a * v).sum::<T>());
        }
    }
    Tensor::new(vec![n, units], out).expect("dense shape")
}

pub(crate) fn dense_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &[T],
    dy: &Tensor<T>,
    want_params: bool,
) -> (Tensor<T>, Option<(Vec<T>, Vec<T>)>) {
    let n = x.batch();
    let f = x.item_len();
    let units = dy.item_len();
    let mut dx = vec![T::zero(); n * f];
    let mut dw = vec![T::zero(); if want_params { w.len() } else { 0 }];
    let mut db = vec![T::zero(); if want_params { units } else { 0 }];
    for ni in 0..n {
        let row = x.item(ni);
        let g = dy.item(ni);
        let dxr = &mut dx[ni * f..][..f];
        for u in 0..units {
            let gv = g[u];
            let wr = &w[u * f..][..f];
            for (d, &wv) in dxr.iter_mut().zip(wr) {
                *d += gv * wv;
            }
            if want_params {
                db[u] += gv;
                let dwr = &mut dw[u * f..][..f];
                for (d, &v) in dwr.iter_mut().zip(row) {
                    *d += gv * v;
                }
            }
        }
    }
    let dx = Tensor::new(x.shape().to_vec(), dx).expect("dense input shape");
    (dx, want_params.then_some((dw, db)))
}

fn dims4<T: Scalar>(t: &Tensor<T>) -> [usize; 4] {
    match *t.shape() {
        [a, b, c, d] => [a, b, c, d],
        ref s => panic!("expected a 4-d tensor, got {s:?}"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_kernel() {
        let x = Tensor::new(vec![1, 1, 2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, 7.0]).unwrap();
        let y = conv_forward(&x, &[1.0], &[0.0], 1, 1);
        assert_eq!(y, x);
    }

    #[test]
    fn all_ones_kernel_sums_window() {
        let x = Tensor::new(vec![1, 1, 3, 3], vec![1.0; 9]).unwrap();
        let y = conv_forward(&x, &[1.0; 9], &[0.0], 1, 3);
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data(), &[9.0]);
    }

    #[test]
    fn maxpool_routes_gradient_to_argmax() {
        let x = Tensor::new(vec![1, 1, 2, 2], vec![0.1, 0.9, 0.3, 0.2]).unwrap();
        let (y, arg) = maxpool_forward(&x);
        assert_eq!(y.data(), &[0.9]);
        let dy = Tensor::new(vec![1, 1, 1, 1], vec![2.0]).unwrap();
        assert_eq!(maxpool_backward(x.shape(), &arg, &dy).data(), &[0.0, 2.0, 0.0, 0.0]);
    }

    #[test]
    fn shape_checks() {
        let conv = LayerKind::Conv2d { in_ch: 1, out_ch: 4, kernel: 3 };
        assert_eq!(conv.output_shape(&[1, 8, 8]).unwrap(), vec![4, 6, 6]);
        assert!(conv.output_shape(&[2, 8, 8]).is_err());
        assert!(conv.output_shape(&[1, 2, 8]).is_err());
        assert_eq!(LayerKind::MaxPool2.output_shape(&[4, 7, 6]).unwrap(), vec![4, 3, 3]);
        let dense = LayerKind::Dense { inputs: 36, units: 5 };
        assert_eq!(dense.output_shape(&[4, 3, 3]).unwrap(), vec![5]);
        assert!(LayerKind::SigmoidHead.output_shape(&[2]).is_err());
        assert!(LayerKind::Dropout { rate: 1.0 }.output_shape(&[3]).is_err());
    }

    #[test]
    fn spec_json_is_flat() {
        let s = LayerSpec::new(LayerKind::Conv2d { in_ch: 1, out_ch: 2, kernel: 3 });
        let j = serde_json::to_string(&s).unwrap();
        assert_eq!(j, r#"{"kind":"conv2d","in_ch":1,"out_ch":2,"kernel":3,"trainable":true}"#);
        assert_eq!(serde_json::from_str::<LayerSpec>(&j).unwrap(), s);
    }
}
