//! Max pooling and bilinear resizing over the height/width axes.

use super::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Source taps of one output coordinate for bilinear resampling.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Tap<E> {
    pub lo: usize,
    pub hi: usize,
    pub w_lo: E,
    pub w_hi: E,
}

/// Half-pixel-centred (corner alignment off) sampling positions.
pub(crate) fn bilinear_taps<E: Scalar>(input: usize, output: usize) -> Vec<Tap<E>> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(input - 1);
            let hi = (lo + 1).min(input - 1);
            let frac = src - lo as f64;
            Tap { lo, hi, w_lo: E::lit(1.0 - frac), w_hi: E::lit(frac) }
        })
        .collect()
}

fn split_5d(shape: &[usize]) -> Result<(usize, usize, usize, usize, usize)> {
    match shape.len() {
        4 => Ok((shape[0], shape[1], shape[2], 1, shape[3])),
        5 => Ok((shape[0], shape[1], shape[2], shape[3], shape[4])),
        _ => Err(Error::Shape(format!("expected rank 4 or 5, got {shape:?}"))),
    }
}

impl<E: Scalar> Graph<E> {
    /// 2x2 max pooling over height and width (floor), depth untouched.
    pub fn max_pool2x(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (n, h, w, d, c) = split_5d(&shape)?;
        let (oh, ow) = (h / 2, w / 2);
        if oh == 0 || ow == 0 {
            return Err(Error::Shape(format!("cannot pool {shape:?}")));
        }
        let mut out_shape = shape.clone();
        out_shape[1] = oh;
        out_shape[2] = ow;
        let src = self.value(x).data();
        let inner = d * c;
        let mut out = Vec::with_capacity(n * oh * ow * inner);
        let mut argmax = Vec::with_capacity(n * oh * ow * inner);
        for s in 0..n {
            for y in 0..oh {
                for xx in 0..ow {
                    for k in 0..inner {
                        let mut best = usize::MAX;
                        let mut best_v = E::neg_infinity();
                        for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                            let idx = ((s * h + 2 * y + dy) * w + 2 * xx + dx) * inner + k;
                            if best == usize::MAX || src[idx] > best_v {
                                best = idx;
                                best_v = src[idx];
                            }
                        }
                        out.push(best_v);
                        argmax.push(best as u32);
                    }
                }
            }
        }
        let value = Tensor::new(&out_shape, out)?;
        Ok(self.push(value, &[x], move |ctx| {
            let mut dx = Tensor::zeros(ctx.inputs[0].shape());
            let dxd = dx.data_mut();
            for (&i, &g) in argmax.iter().zip(ctx.grad.data()) {
                dxd[i as usize] += g;
            }
            vec![Some(dx)]
        }))
    }

    /// Bilinear resize of `[N, H, W, C]` to `[N, out_h, out_w, C]`.
    pub fn resize_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 4 {
            return Err(Error::Shape(format!("resize expects [N,H,W,C], got {shape:?}")));
        }
        let (n, h, w, c) = (shape[0], shape[1], shape[2], shape[3]);
        if (h, w) == (out_h, out_w) {
            return Ok(x);
        }
        let ty = bilinear_taps::<E>(h, out_h);
        let tx = bilinear_taps::<E>(w, out_w);
        let mut out = Tensor::zeros(&[n, out_h, out_w, c]);
        resize_forward(self.value(x).data(), out.data_mut(), n, h, w, c, &ty, &tx);
        Ok(self.push(out, &[x], move |ctx| {
            let mut dx = Tensor::zeros(ctx.inputs[0].shape());
            let g = ctx.grad.data();
            let dxd = dx.data_mut();
            let ow = tx.len();
            for s in 0..n {
                for (oy, tyy) in ty.iter().enumerate() {
                    for (ox, txx) in tx.iter().enumerate() {
                        let go = ((s * ty.len() + oy) * ow + ox) * c;
                        for (row, wy) in [(tyy.lo, tyy.w_lo), (tyy.hi, tyy.w_hi)] {
                            for (col, wx) in [(txx.lo, txx.w_lo), (txx.hi, txx.w_hi)] {
                                let wgt = wy * wx;
                                let base = ((s * h + row) * w + col) * c;
                                for k in 0..c {
                                    dxd[base + k] += wgt * g[go + k];
                                }
                            }
                        }
                    }
                }
            }
            vec![Some(dx)]
        }))
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn resize_forward<E: Scalar>(
    src: &[E],
    dst: &mut [E],
    n: usize,
    h: usize,
    w: usize,
    c: usize,
    ty: &[Tap<E>],
    tx: &[Tap<E>],
) {
    let (oh, ow) = (ty.len(), tx.len());
    for s in 0..n {
        for (oy, tyy) in ty.iter().enumerate() {
            for (ox, txx) in tx.iter().enumerate() {
                let o = ((s * oh + oy) * ow + ox) * c;
                let p00 = ((s * h + tyy.lo) * w + txx.lo) * c;
                let p01 = ((s * h + tyy.lo) * w + txx.hi) * c;
                let p10 = ((s * h + tyy.hi) * w + txx.lo) * c;
                let p11 = ((s * h + tyy.hi) * w + txx.hi) * c;
                for k in 0..c {
                    dst[o + k] = tyy.w_lo * (txx.w_lo * src[p00 + k] + txx.w_hi * src[p01 + k])
                        + tyy.w_hi * (txx.w_lo * src[p10 + k] + txx.w_hi * src[p11 + k]);
                }
            }
        }
    }
}
