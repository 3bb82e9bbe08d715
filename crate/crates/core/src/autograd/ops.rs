//! Elementwise, reduction and matrix operations.

use super::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

fn same_shape<E: Scalar>(g: &Graph<E>, a: Var, b: Var, op: &str) -> Result<()> {
    if g.shape(a) != g.shape(b) {
        return Err(Error::Shape(format!(
            "{op}: {:?} vs {:?}",
            g.shape(a),
            g.shape(b)
        )));
    }
    Ok(())
}

impl<E: Scalar> Graph<E> {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, a, b, "add")?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        Ok(self.push(value, &[a, b], |ctx| {
            vec![
                ctx.needs[0].then(|| ctx.grad.clone()),
                ctx.needs[1].then(|| ctx.grad.clone()),
            ]
        }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, a, b, "sub")?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        Ok(self.push(value, &[a, b], |ctx| {
            vec![
                ctx.needs[0].then(|| ctx.grad.clone()),
                ctx.needs[1].then(|| ctx.grad.map(|x| -x)),
            ]
        }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, a, b, "mul")?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        Ok(self.push(value, &[a, b], |ctx| {
            vec![
                ctx.needs[0].then(|| ctx.grad.zip_map(ctx.inputs[1], |g, y| g * y)),
                ctx.needs[1].then(|| ctx.grad.zip_map(ctx.inputs[0], |g, x| g * x)),
            ]
        }))
    }

    pub fn scale(&mut self, a: Var, factor: E) -> Var {
        let value = self.value(a).map(|x| x * factor);
        self.push(value, &[a], move |ctx| vec![Some(ctx.grad.map(|g| g * factor))])
    }

    /// `a * s` where `s` is a one-element tensor on the tape.
    pub fn mul_scalar_var(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(Error::Shape("mul_scalar_var: scale must have one element".into()));
        }
        let factor = self.value(s).data()[0];
        let value = self.value(a).map(|x| x * factor);
        Ok(self.push(value, &[a, s], |ctx| {
            let factor = ctx.inputs[1].data()[0];
            vec![
                ctx.needs[0].then(|| ctx.grad.map(|g| g * factor)),
                ctx.needs[1].then(|| {
                    let dot: E = ctx.grad.data().iter().zip(ctx.inputs[0].data()).map(|(&g, &x)| g * x).sum();
                    Tensor::new(ctx.inputs[1].shape(), vec![dot]).expect("scalar")
                }),
            ]
        }))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| if x > E::zero() { x } else { E::zero() });
        self.push(value, &[a], |ctx| {
            vec![Some(ctx.grad.zip_map(ctx.output, |g, y| if y > E::zero() { g } else { E::zero() }))]
        })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        self.push(value, &[a], |ctx| {
            vec![Some(ctx.grad.zip_map(ctx.output, |g, y| g * y * (E::one() - y)))]
        })
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        let original = self.shape(a).to_vec();
        Ok(self.push(value, &[a], move |ctx| {
            vec![Some(ctx.grad.clone().reshape(&original).expect("reshape grad"))]
        }))
    }

    /// Concatenation along the last (channel) axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.shape(parts[0]).to_vec();
        let lead = &first[..first.len() - 1];
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len() || &s[..s.len() - 1] != lead {
                return Err(Error::Shape(format!("concat: {first:?} vs {s:?}")));
            }
            widths.push(*s.last().unwrap());
        }
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut out = vec![E::zero(); rows * total];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.value(p).data();
            for r in 0..rows {
                out[r * total + offset..r * total + offset + w].copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            offset += w;
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        let value = Tensor::new(&shape, out)?;
        let widths_bw = widths.clone();
        Ok(self.push(value, parts, move |ctx| {
            let mut offset = 0;
            widths_bw
                .iter()
                .enumerate()
                .map(|(i, &w)| {
                    let start = offset;
                    offset += w;
                    ctx.needs[i].then(|| {
                        let g = ctx.grad.data();
                        let mut data = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            data.extend_from_slice(&g[r * total + start..r * total + start + w]);
                        }
                        Tensor::new(ctx.inputs[i].shape(), data).expect("concat grad")
                    })
                })
                .collect()
        }))
    }

    /// Adds a per-channel bias `[C]` to `[..., C]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let c = self.value(x).channels();
        if self.shape(bias) != [c] {
            return Err(Error::Shape(format!("bias {:?} for {c} channels", self.shape(bias))));
        }
        let mut value = self.value(x).clone();
        add_bias_inplace(value.data_mut(), self.value(bias).data());
        Ok(self.push(value, &[x, bias], move |ctx| {
            vec![
                ctx.needs[0].then(|| ctx.grad.clone()),
                ctx.needs[1].then(|| channel_sums(ctx.grad)),
            ]
        }))
    }

    /// Multiplies `[N, ..., C]` by per-sample channel gates `[N, C]`.
    pub fn scale_channels(&mut self, x: Var, gate: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (n, c) = (shape[0], *shape.last().unwrap());
        if self.shape(gate) != [n, c] {
            return Err(Error::Shape(format!("gate {:?} for input {shape:?}", self.shape(gate))));
        }
        let inner = self.value(x).len() / (n * c);
        let gates = self.value(gate).data();
        let mut value = self.value(x).clone();
        for (i, chunk) in value.data_mut().chunks_mut(c).enumerate() {
            let s = i / inner;
            for (v, &gv) in chunk.iter_mut().zip(&gates[s * c..(s + 1) * c]) {
                *v *= gv;
            }
        }
        Ok(self.push(value, &[x, gate], move |ctx| {
            let gates = ctx.inputs[1].data();
            let dx = ctx.needs[0].then(|| {
                let mut dx = ctx.grad.clone();
                for (i, chunk) in dx.data_mut().chunks_mut(c).enumerate() {
                    let s = i / inner;
                    for (v, &gv) in chunk.iter_mut().zip(&gates[s * c..(s + 1) * c]) {
                        *v *= gv;
                    }
                }
                dx
            });
            let dgate = ctx.needs[1].then(|| {
                let mut dg = vec![E::zero(); n * c];
                let xs = ctx.inputs[0].data();
                for (i, (gchunk, xchunk)) in ctx.grad.data().chunks(c).zip(xs.chunks(c)).enumerate() {
                    let s = i / inner;
                    for ((acc, &g), &xv) in dg[s * c..(s + 1) * c].iter_mut().zip(gchunk).zip(xchunk) {
                        *acc += g * xv;
                    }
                }
                Tensor::new(&[n, c], dg).expect("gate grad")
            });
            vec![dx, dgate]
        }))
    }

    /// Global average over every axis between batch and channels:
    /// `[N, ..., C] -> [N, C]`.
    pub fn mean_spatial(&mut self, x: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let (n, c) = (shape[0], *shape.last().unwrap());
        let inner = self.value(x).len() / (n * c);
        let scale = E::one() / E::lit(inner as f64);
        let mut out = vec![E::zero(); n * c];
        for (i, chunk) in self.value(x).data().chunks(c).enumerate() {
            let s = i / inner;
            for (acc, &v) in out[s * c..(s + 1) * c].iter_mut().zip(chunk) {
                *acc += v;
            }
        }
        out.iter_mut().for_each(|v| *v *= scale);
        let value = Tensor::new(&[n, c], out).expect("mean shape");
        self.push(value, &[x], move |ctx| {
            let g = ctx.grad.data();
            let mut dx = Tensor::zeros(ctx.inputs[0].shape());
            for (i, chunk) in dx.data_mut().chunks_mut(c).enumerate() {
                let s = i / inner;
                for (v, &gv) in chunk.iter_mut().zip(&g[s * c..(s + 1) * c]) {
                    *v = gv * scale;
                }
            }
            vec![Some(dx)]
        })
    }

    /// Sum of every element, as a one-element tensor.
    pub fn sum_all(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(value, &[x], |ctx| {
            let g = ctx.grad.data()[0];
            vec![Some(Tensor::full(ctx.inputs[0].shape(), g))]
        })
    }

    /// `[M, K] x [K, N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Shape(format!("matmul: {sa:?} x {sb:?}")));
        }
        let a3 = self.reshape(a, &[1, sa[0], sa[1]])?;
        let b3 = self.reshape(b, &[1, sb[0], sb[1]])?;
        let out = self.bmm(a3, b3, false, false)?;
        self.reshape(out, &[sa[0], sb[1]])
    }

    /// Batched matrix product of `[B, *, *]` operands with optional
    /// transposition of either side.
    pub fn bmm(&mut self, a: Var, b: Var, trans_a: bool, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(Error::Shape(format!("bmm: {sa:?} x {sb:?}")));
        }
        let (m, k) = if trans_a { (sa[2], sa[1]) } else { (sa[1], sa[2]) };
        let (k2, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if k != k2 {
            return Err(Error::Shape(format!("bmm inner dims: {sa:?} x {sb:?}")));
        }
        let batch = sa[0];
        let mut out = Tensor::zeros(&[batch, m, n]);
        batched_gemm(batch, m, k, n, self.value(a).data(), trans_a, self.value(b).data(), trans_b, out.data_mut(), false);
        Ok(self.push(out, &[a, b], move |ctx| {
            let g = ctx.grad.data();
            let da = ctx.needs[0].then(|| {
                let mut da = Tensor::zeros(ctx.inputs[0].shape());
                if trans_a {
                    // A^T = [m,k] stored as [k,m]: dA = B' g^T
                    batched_gemm(batch, k, n, m, ctx.inputs[1].data(), trans_b, g, true, da.data_mut(), false);
                } else {
                    batched_gemm(batch, m, n, k, g, false, ctx.inputs[1].data(), !trans_b, da.data_mut(), false);
                }
                da
            });
            let db = ctx.needs[1].then(|| {
                let mut db = Tensor::zeros(ctx.inputs[1].shape());
                if trans_b {
                    batched_gemm(batch, n, m, k, g, true, ctx.inputs[0].data(), trans_a, db.data_mut(), false);
                } else {
                    batched_gemm(batch, k, m, n, ctx.inputs[0].data(), !trans_a, g, false, db.data_mut(), false);
                }
                db
            });
            vec![da, db]
        }))
    }

    /// Softmax over the last axis, stabilized by the row maximum.
    pub fn softmax_last(&mut self, x: Var) -> Var {
        let mut value = self.value(x).clone();
        let c = value.channels();
        for row in value.data_mut().chunks_mut(c) {
            softmax_row(row);
        }
        self.push(value, &[x], move |ctx| {
            let mut dx = ctx.grad.clone();
            for (drow, yrow) in dx.data_mut().chunks_mut(c).zip(ctx.output.data().chunks(c)) {
                softmax_row_backward(drow, yrow);
            }
            vec![Some(dx)]
        })
    }

    /// Picks one depth plane: `[N, H, W, D, C] -> [N, H, W, C]`.
    pub fn select_depth(&mut self, x: Var, index: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 5 || index >= s[3] {
            return Err(Error::Shape(format!("select_depth {index} of {s:?}")));
        }
        let (d, c) = (s[3], s[4]);
        let outer = s[0] * s[1] * s[2];
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * c);
        for o in 0..outer {
            let base = (o * d + index) * c;
            out.extend_from_slice(&src[base..base + c]);
        }
        let value = Tensor::new(&[s[0], s[1], s[2], c], out)?;
        Ok(self.push(value, &[x], move |ctx| {
            let mut dx = Tensor::zeros(ctx.inputs[0].shape());
            let g = ctx.grad.data();
            let dxd = dx.data_mut();
            for o in 0..outer {
                let base = (o * d + index) * c;
                dxd[base..base + c].copy_from_slice(&g[o * c..(o + 1) * c]);
            }
            vec![Some(dx)]
        }))
    }
}

#[inline]
pub(crate) fn sigmoid<E: Scalar>(x: E) -> E {
    if x >= E::zero() {
        E::one() / (E::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (E::one() + e)
    }
}

pub(crate) fn softmax_row<E: Scalar>(row: &mut [E]) {
    let max = row.iter().copied().fold(E::neg_infinity(), E::max);
    let mut total = E::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    let inv = E::one() / total;
    row.iter_mut().for_each(|v| *v *= inv);
}

/// In place: `grad <- y * (grad - <grad, y>)`.
pub(crate) fn softmax_row_backward<E: Scalar>(grad: &mut [E], y: &[E]) {
    let dot: E = grad.iter().zip(y).map(|(&g, &p)| g * p).sum();
    for (g, &p) in grad.iter_mut().zip(y) {
        *g = p * (*g - dot);
    }
}

pub(crate) fn add_bias_inplace<E: Scalar>(data: &mut [E], bias: &[E]) {
    let c = bias.len();
    for chunk in data.chunks_mut(c) {
        for (v, &b) in chunk.iter_mut().zip(bias) {
            *v += b;
        }
    }
}

pub(crate) fn channel_sums<E: Scalar>(t: &Tensor<E>) -> Tensor<E> {
    let c = t.channels();
    let mut out = vec![E::zero(); c];
    for chunk in t.data().chunks(c) {
        for (acc, &v) in out.iter_mut().zip(chunk) {
            *acc += v;
        }
    }
    Tensor::new(&[c], out).expect("channel sums")
}

/// `out[b] (+)= op(a[b]) * op(b[b])` for `m x k` and `k x n` logical shapes.
/// Transposed operands are stored with swapped axes.
#[allow(clippy::too_many_arguments)]
pub(crate) fn batched_gemm<E: Scalar>(
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    a: &[E],
    trans_a: bool,
    b: &[E],
    trans_b: bool,
    out: &mut [E],
    accumulate: bool,
) {
    let a_strides = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let b_strides = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { E::one() } else { E::zero() };
    for i in 0..batch {
        E::gemm(
            m,
            k,
            n,
            E::one(),
            &a[i * m * k..(i + 1) * m * k],
            a_strides,
            &b[i * k * n..(i + 1) * k * n],
            b_strides,
            beta,
            &mut out[i * m * n..(i + 1) * m * n],
            (n as isize, 1),
        );
    }
}
