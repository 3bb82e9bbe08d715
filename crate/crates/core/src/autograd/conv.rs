//! Stride-1 "same" convolutions (2D and 3D) and 2x2 transposed convolution.
//!
//! Feature maps are channels-last: `[N, H, W, C]` or `[N, H, W, D, C]`.
//! Kernels are `[kh, kw, Cin, Cout]` or `[kh, kw, kd, Cin, Cout]`.

use super::kernels;
use super::ops::{add_bias_inplace, channel_sums};
use super::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Spatial geometry of one convolution call.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub depth: usize,
    pub cin: usize,
    pub cout: usize,
    pub kernel: [usize; 3],
}

impl ConvGeometry {
    fn from_shapes(x: &[usize], w: &[usize]) -> Result<Self> {
        let geo = match (x.len(), w.len()) {
            (4, 4) => Self {
                batch: x[0],
                height: x[1],
                width: x[2],
                depth: 1,
                cin: x[3],
                cout: w[3],
                kernel: [w[0], w[1], 1],
            },
            (5, 5) => Self {
                batch: x[0],
                height: x[1],
                width: x[2],
                depth: x[3],
                cin: x[4],
                cout: w[4],
                kernel: [w[0], w[1], w[2]],
            },
            _ => return Err(Error::Shape(format!("conv: input {x:?} with kernel {w:?}"))),
        };
        let kernel_cin = w[w.len() - 2];
        if kernel_cin != geo.cin {
            return Err(Error::Shape(format!(
                "conv kernel expects {kernel_cin} input channels, input has {}",
                geo.cin
            )));
        }
        if geo.kernel.iter().any(|&k| k % 2 == 0) {
            return Err(Error::Shape(format!("conv kernel {:?} must be odd", geo.kernel)));
        }
        Ok(geo)
    }

    pub fn positions(&self) -> usize {
        self.height * self.width * self.depth
    }

    pub fn taps(&self) -> usize {
        self.kernel.iter().product()
    }

    fn pointwise(&self) -> bool {
        self.taps() == 1
    }

    fn out_shape(&self, rank: usize) -> Vec<usize> {
        if rank == 4 {
            vec![self.batch, self.height, self.width, self.cout]
        } else {
            vec![self.batch, self.height, self.width, self.depth, self.cout]
        }
    }
}

impl ConvGeometry {
    fn kernel_geometry(&self) -> kernels::Geometry {
        kernels::Geometry {
            h: self.height,
            w: self.width,
            d: self.depth,
            cin: self.cin,
            cout: self.cout,
            kernel: self.kernel,
        }
    }
}

pub(crate) fn conv_forward<E: Scalar>(x: &Tensor<E>, w: &Tensor<E>, bias: Option<&Tensor<E>>) -> Result<Tensor<E>> {
    let geo = ConvGeometry::from_shapes(x.shape(), w.shape())?;
    if let Some(b) = bias {
        if b.shape() != [geo.cout] {
            return Err(Error::Shape(format!("conv bias {:?} for {} filters", b.shape(), geo.cout)));
        }
    }
    let mut out = Tensor::zeros(&geo.out_shape(x.rank()));
    let (pos, cin, cout) = (geo.positions(), geo.cin, geo.cout);
    if geo.pointwise() {
        E::gemm(
            geo.batch * pos,
            cin,
            cout,
            E::one(),
            x.data(),
            (cin as isize, 1),
            w.data(),
            (cout as isize, 1),
            E::zero(),
            out.data_mut(),
            (cout as isize, 1),
        );
    } else {
        let kg = geo.kernel_geometry();
        let mut padded = Vec::new();
        for n in 0..geo.batch {
            kernels::pad_sample(&x.data()[n * pos * cin..(n + 1) * pos * cin], &kg, &mut padded);
            kernels::forward(&padded, w.data(), &mut out.data_mut()[n * pos * cout..(n + 1) * pos * cout], kg);
        }
    }
    if let Some(b) = bias {
        add_bias_inplace(out.data_mut(), b.data());
    }
    Ok(out)
}

/// Returns `(dx, dw)` for the requested operands.
pub(crate) fn conv_backward<E: Scalar>(
    x: &Tensor<E>,
    w: &Tensor<E>,
    grad: &Tensor<E>,
    need_x: bool,
    need_w: bool,
) -> (Option<Tensor<E>>, Option<Tensor<E>>) {
    let geo = ConvGeometry::from_shapes(x.shape(), w.shape()).expect("validated in forward");
    let (pos, cout, cin) = (geo.positions(), geo.cout, geo.cin);
    let mut dx = need_x.then(|| Tensor::zeros(x.shape()));
    let mut dw = need_w.then(|| Tensor::zeros(w.shape()));
    if geo.pointwise() {
        let rows = geo.batch * pos;
        if let Some(dw) = dw.as_mut() {
            E::gemm(
                cin,
                rows,
                cout,
                E::one(),
                x.data(),
                (1, cin as isize),
                grad.data(),
                (cout as isize, 1),
                E::zero(),
                dw.data_mut(),
                (cout as isize, 1),
            );
        }
        if let Some(dx) = dx.as_mut() {
            E::gemm(
                rows,
                cout,
                cin,
                E::one(),
                grad.data(),
                (cout as isize, 1),
                w.data(),
                (1, cout as isize),
                E::zero(),
                dx.data_mut(),
                (cin as isize, 1),
            );
        }
        return (dx, dw);
    }
    let kg = geo.kernel_geometry();
    let back_geo = kernels::Geometry { cin: cout, cout: cin, ..kg };
    let flipped = need_x.then(|| kernels::flip_transpose(w.data(), geo.taps(), cin, cout));
    let mut padded = Vec::new();
    for n in 0..geo.batch {
        let gs = &grad.data()[n * pos * cout..(n + 1) * pos * cout];
        if let Some(dw) = dw.as_mut() {
            kernels::pad_sample(&x.data()[n * pos * cin..(n + 1) * pos * cin], &kg, &mut padded);
            kernels::weight_grad(&padded, gs, dw.data_mut(), kg);
        }
        if let (Some(dx), Some(flipped)) = (dx.as_mut(), flipped.as_ref()) {
            kernels::pad_sample(gs, &back_geo, &mut padded);
            kernels::forward(&padded, flipped, &mut dx.data_mut()[n * pos * cin..(n + 1) * pos * cin], back_geo);
        }
    }
    (dx, dw)
}

fn upconv_dims(x: &[usize], w: &[usize]) -> Result<(usize, usize, usize, usize, usize, usize)> {
    let (n, h, wd, d, cin) = match x.len() {
        4 => (x[0], x[1], x[2], 1, x[3]),
        5 => (x[0], x[1], x[2], x[3], x[4]),
        _ => return Err(Error::Shape(format!("upconv input {x:?}"))),
    };
    if w.len() != 4 || w[0] != cin || w[1] != 2 || w[2] != 2 {
        return Err(Error::Shape(format!("upconv kernel {w:?} for {cin} input channels")));
    }
    Ok((n, h, wd, d, cin, w[3]))
}

impl<E: Scalar> Graph<E> {
    /// Stride-1 convolution with zero "same" padding. Rank-4 input means 2D,
    /// rank-5 means 3D.
    pub fn conv(&mut self, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let out = conv_forward(self.value(x), self.value(weight), bias.map(|b| self.value(b)))?;
        let mut inputs = vec![x, weight];
        inputs.extend(bias);
        Ok(self.push(out, &inputs, |ctx| {
            let (dx, dw) = conv_backward(ctx.inputs[0], ctx.inputs[1], ctx.grad, ctx.needs[0], ctx.needs[1]);
            let mut grads = vec![dx, dw];
            if ctx.inputs.len() == 3 {
                grads.push(ctx.needs[2].then(|| channel_sums(ctx.grad)));
            }
            grads
        }))
    }

    /// 2x2, stride-2 transposed convolution over height and width; an
    /// optional depth axis passes through. Kernel layout `[Cin, 2, 2, Cout]`.
    pub fn upconv2x(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let (n, h, wd, d, cin, cout) = upconv_dims(self.shape(x), self.shape(weight))?;
        let rank = self.shape(x).len();
        let rows = n * h * wd * d;
        let mut tmp = vec![E::zero(); rows * 4 * cout];
        E::gemm(
            rows,
            cin,
            4 * cout,
            E::one(),
            self.value(x).data(),
            (cin as isize, 1),
            self.value(weight).data(),
            (4 * cout as isize, 1),
            E::zero(),
            &mut tmp,
            (4 * cout as isize, 1),
        );
        let out_shape: Vec<usize> =
            if rank == 4 { vec![n, 2 * h, 2 * wd, cout] } else { vec![n, 2 * h, 2 * wd, d, cout] };
        let mut out = Tensor::zeros(&out_shape);
        let index = move |s: usize, y: usize, xx: usize, z: usize, a: usize, b: usize| {
            (((s * 2 * h + 2 * y + a) * 2 * wd + 2 * xx + b) * d + z) * cout
        };
        {
            let od = out.data_mut();
            for s in 0..n {
                for y in 0..h {
                    for xx in 0..wd {
                        for z in 0..d {
                            let row = ((s * h + y) * wd + xx) * d + z;
                            for a in 0..2 {
                                for b in 0..2 {
                                    let src = row * 4 * cout + (a * 2 + b) * cout;
                                    let dst = index(s, y, xx, z, a, b);
                                    od[dst..dst + cout].copy_from_slice(&tmp[src..src + cout]);
                                }
                            }
                        }
                    }
                }
            }
        }
        add_bias_inplace(out.data_mut(), self.value(bias).data());
        Ok(self.push(out, &[x, weight, bias], move |ctx| {
            let g = ctx.grad.data();
            let mut dtmp = vec![E::zero(); rows * 4 * cout];
            for s in 0..n {
                for y in 0..h {
                    for xx in 0..wd {
                        for z in 0..d {
                            let row = ((s * h + y) * wd + xx) * d + z;
                            for a in 0..2 {
                                for b in 0..2 {
                                    let dst = row * 4 * cout + (a * 2 + b) * cout;
                                    let src = index(s, y, xx, z, a, b);
                                    dtmp[dst..dst + cout].copy_from_slice(&g[src..src + cout]);
                                }
                            }
                        }
                    }
                }
            }
            let dx = ctx.needs[0].then(|| {
                let mut dx = Tensor::zeros(ctx.inputs[0].shape());
                E::gemm(
                    rows,
                    4 * cout,
                    cin,
                    E::one(),
                    &dtmp,
                    (4 * cout as isize, 1),
                    ctx.inputs[1].data(),
                    (1, 4 * cout as isize),
                    E::zero(),
                    dx.data_mut(),
                    (cin as isize, 1),
                );
                dx
            });
            let dw = ctx.needs[1].then(|| {
                let mut dw = Tensor::zeros(ctx.inputs[1].shape());
                E::gemm(
                    cin,
                    rows,
                    4 * cout,
                    E::one(),
                    ctx.inputs[0].data(),
                    (1, cin as isize),
                    &dtmp,
                    (4 * cout as isize, 1),
                    E::zero(),
                    dw.data_mut(),
                    (4 * cout as isize, 1),
                );
                dw
            });
            let db = ctx.needs[2].then(|| channel_sums(ctx.grad));
            vec![dx, dw, db]
        }))
    }
}
