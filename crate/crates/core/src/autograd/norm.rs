//! Per-channel batch normalization over every axis but the last.

use super::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Statistics of one training batch, for running-average updates.
#[derive(Clone, Debug)]
pub struct BatchStats<E> {
    pub mean: Vec<E>,
    /// Unbiased (n - 1) variance.
    pub var: Vec<E>,
}

impl<E: Scalar> Graph<E> {
    /// Training mode normalizes with batch statistics and returns them;
    /// otherwise `running = (mean, var)` is used.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: (&Tensor<E>, &Tensor<E>),
        eps: E,
    ) -> Result<(Var, Option<BatchStats<E>>)> {
        let c = self.value(x).channels();
        for p in [gamma, beta] {
            if self.shape(p) != [c] {
                return Err(Error::Shape(format!("batchnorm affine {:?} for {c} channels", self.shape(p))));
            }
        }
        let rows = self.value(x).rows();
        let (mean, var_biased, stats) = if self.is_train() {
            let mut mean = vec![E::zero(); c];
            for chunk in self.value(x).data().chunks(c) {
                for (m, &v) in mean.iter_mut().zip(chunk) {
                    *m += v;
                }
            }
            let inv = E::one() / E::lit(rows as f64);
            mean.iter_mut().for_each(|m| *m *= inv);
            let mut var = vec![E::zero(); c];
            for chunk in self.value(x).data().chunks(c) {
                for ((s, &v), &m) in var.iter_mut().zip(chunk).zip(&mean) {
                    *s += (v - m) * (v - m);
                }
            }
            let unbiased_scale = if rows > 1 { E::one() / E::lit((rows - 1) as f64) } else { E::zero() };
            let unbiased = var.iter().map(|&s| s * unbiased_scale).collect();
            var.iter_mut().for_each(|s| *s *= inv);
            (mean.clone(), var, Some(BatchStats { mean, var: unbiased }))
        } else {
            (running.0.data().to_vec(), running.1.data().to_vec(), None)
        };
        let inv_std: Vec<E> = var_biased.iter().map(|&v| E::one() / (v + eps).sqrt()).collect();
        let mut xhat = self.value(x).clone();
        for chunk in xhat.data_mut().chunks_mut(c) {
            for ((v, &m), &s) in chunk.iter_mut().zip(&mean).zip(&inv_std) {
                *v = (*v - m) * s;
            }
        }
        let mut out = xhat.clone();
        {
            let g = self.value(gamma).data();
            let b = self.value(beta).data();
            for chunk in out.data_mut().chunks_mut(c) {
                for ((v, &gv), &bv) in chunk.iter_mut().zip(g).zip(b) {
                    *v = *v * gv + bv;
                }
            }
        }
        let train = self.is_train();
        let y = self.push(out, &[x, gamma, beta], move |ctx| {
            let g = ctx.grad.data();
            let gam = ctx.inputs[1].data();
            let mut sum_g = vec![E::zero(); c];
            let mut sum_gx = vec![E::zero(); c];
            for (gc, xc) in g.chunks(c).zip(xhat.data().chunks(c)) {
                for k in 0..c {
                    sum_g[k] += gc[k];
                    sum_gx[k] += gc[k] * xc[k];
                }
            }
            let dx = ctx.needs[0].then(|| {
                let mut dx = Tensor::zeros(ctx.inputs[0].shape());
                let m = E::lit(rows as f64);
                for ((dc, gc), xc) in dx.data_mut().chunks_mut(c).zip(g.chunks(c)).zip(xhat.data().chunks(c)) {
                    for k in 0..c {
                        dc[k] = if train {
                            gam[k] * inv_std[k] / m * (m * gc[k] - sum_g[k] - xc[k] * sum_gx[k])
                        } else {
                            gc[k] * gam[k] * inv_std[k]
                        };
                    }
                }
                dx
            });
            vec![
                dx,
                ctx.needs[1].then(|| Tensor::new(&[c], sum_gx.clone()).expect("gamma grad")),
                ctx.needs[2].then(|| Tensor::new(&[c], sum_g.clone()).expect("beta grad")),
            ]
        });
        Ok((y, stats))
    }
}
