//! Direct channels-last convolution kernels for one sample.
//!
//! The input is pre-padded with zeros, so every kernel tap is valid and the
//! inner loops carry no bounds checks. Output channels are processed in
//! register tiles of 16/8/4/2/1 and output positions in blocks of four along
//! the width axis. AVX-512/AVX2 code paths are selected at runtime.

use crate::tensor::Scalar;

#[derive(Clone, Copy, Debug)]
pub(crate) struct Geometry {
    pub h: usize,
    pub w: usize,
    pub d: usize,
    pub cin: usize,
    pub cout: usize,
    pub kernel: [usize; 3],
}

impl Geometry {
    pub fn padded_dims(&self) -> (usize, usize, usize) {
        let [kh, kw, kd] = self.kernel;
        (self.h + kh - 1, self.w + kw - 1, self.d + kd - 1)
    }

    pub fn padded_len(&self) -> usize {
        let (hp, wp, dp) = self.padded_dims();
        hp * wp * dp * self.cin
    }

    fn taps(&self) -> usize {
        self.kernel.iter().product()
    }

    /// Offset of every tap relative to the padded origin of an output voxel.
    fn tap_offsets(&self) -> Vec<usize> {
        let (_, wp, dp) = self.padded_dims();
        let [kh, kw, kd] = self.kernel;
        let mut offs = Vec::with_capacity(self.taps());
        for ky in 0..kh {
            for kx in 0..kw {
                for kz in 0..kd {
                    offs.push(((ky * wp + kx) * dp + kz) * self.cin);
                }
            }
        }
        offs
    }
}

/// Copies one `[h, w, d, cin]` sample into a zero-padded buffer.
pub(crate) fn pad_sample<E: Scalar>(x: &[E], geo: &Geometry, out: &mut Vec<E>) {
    let (_, wp, dp) = geo.padded_dims();
    let [kh, kw, kd] = geo.kernel;
    let (ph, pw, pd) = (kh / 2, kw / 2, kd / 2);
    out.clear();
    out.resize(geo.padded_len(), E::zero());
    let run = geo.d * geo.cin;
    for y in 0..geo.h {
        for xx in 0..geo.w {
            let src = (y * geo.w + xx) * run;
            let dst = (((y + ph) * wp + xx + pw) * dp + pd) * geo.cin;
            out[dst..dst + run].copy_from_slice(&x[src..src + run]);
        }
    }
}

#[inline(always)]
fn madd<E: Scalar, const FMA: bool>(a: E, b: E, acc: E) -> E {
    if FMA {
        a.mul_add(b, acc)
    } else {
        acc + a * b
    }
}

struct Fwd<'a, E> {
    xp: &'a [E],
    w: &'a [E],
    geo: Geometry,
    offs: Vec<usize>,
    x_step: usize,
    wp: usize,
    dp: usize,
}

impl<E: Scalar> Fwd<'_, E> {
    #[inline(always)]
    fn block<const T: usize, const P: usize, const FMA: bool>(&self, out: &mut [E], co: usize, y: usize, x: usize, z: usize) {
        let Geometry { cin, cout, w: width, d, .. } = self.geo;
        let mut acc = [[E::zero(); T]; P];
        let origin = ((y * self.wp + x) * self.dp + z) * cin;
        for (t, &off) in self.offs.iter().enumerate() {
            let base = origin + off;
            let wt = &self.w[t * cin * cout..(t + 1) * cin * cout];
            for ci in 0..cin {
                let wrow: &[E; T] = wt[ci * cout + co..ci * cout + co + T].try_into().expect("tile");
                for (p, accp) in acc.iter_mut().enumerate() {
                    let a = self.xp[base + p * self.x_step + ci];
                    for j in 0..T {
                        accp[j] = madd::<E, FMA>(a, wrow[j], accp[j]);
                    }
                }
            }
        }
        for (p, accp) in acc.iter().enumerate() {
            let o = ((y * width + x + p) * d + z) * cout + co;
            out[o..o + T].copy_from_slice(accp);
        }
    }

    #[inline(always)]
    fn tile<const T: usize, const FMA: bool>(&self, out: &mut [E], co: usize) {
        let Geometry { h, w, d, .. } = self.geo;
        for y in 0..h {
            for z in 0..d {
                let mut x = 0;
                while x + 4 <= w {
                    self.block::<T, 4, FMA>(out, co, y, x, z);
                    x += 4;
                }
                while x < w {
                    self.block::<T, 1, FMA>(out, co, y, x, z);
                    x += 1;
                }
            }
        }
    }

    #[inline(always)]
    fn run<const FMA: bool>(&self, out: &mut [E]) {
        let cout = self.geo.cout;
        let mut co = 0;
        while co < cout {
            let rem = cout - co;
            if rem >= 16 {
                self.tile::<16, FMA>(out, co);
                co += 16;
            } else if rem >= 8 {
                self.tile::<8, FMA>(out, co);
                co += 8;
            } else if rem >= 4 {
                self.tile::<4, FMA>(out, co);
                co += 4;
            } else if rem >= 2 {
                self.tile::<2, FMA>(out, co);
                co += 2;
            } else {
                self.tile::<1, FMA>(out, co);
                co += 1;
            }
        }
    }
}

struct WGrad<'a, E> {
    xp: &'a [E],
    grad: &'a [E],
    geo: Geometry,
    offs: Vec<usize>,
    x_step: usize,
    wp: usize,
    dp: usize,
}

impl<E: Scalar> WGrad<'_, E> {
    #[inline(always)]
    fn block<const T: usize, const Q: usize, const FMA: bool>(&self, dw: &mut [E], co: usize, ci: usize, y: usize, z: usize) {
        let Geometry { cin, cout, w: width, d, .. } = self.geo;
        for (t, &off) in self.offs.iter().enumerate() {
            let mut acc = [[E::zero(); T]; Q];
            let origin = ((y * self.wp) * self.dp + z) * cin + off + ci;
            for x in 0..width {
                let g0 = ((y * width + x) * d + z) * cout + co;
                let gv: &[E; T] = self.grad[g0..g0 + T].try_into().expect("tile");
                let xb = origin + x * self.x_step;
                for (q, accq) in acc.iter_mut().enumerate() {
                    let a = self.xp[xb + q];
                    for j in 0..T {
                        accq[j] = madd::<E, FMA>(a, gv[j], accq[j]);
                    }
                }
            }
            for (q, accq) in acc.iter().enumerate() {
                let o = (t * cin + ci + q) * cout + co;
                for (dst, &v) in dw[o..o + T].iter_mut().zip(accq) {
                    *dst += v;
                }
            }
        }
    }

    #[inline(always)]
    fn tile<const T: usize, const FMA: bool>(&self, dw: &mut [E], co: usize) {
        let Geometry { h, d, cin, .. } = self.geo;
        for y in 0..h {
            for z in 0..d {
                let mut ci = 0;
                while ci + 4 <= cin {
                    self.block::<T, 4, FMA>(dw, co, ci, y, z);
                    ci += 4;
                }
                while ci < cin {
                    self.block::<T, 1, FMA>(dw, co, ci, y, z);
                    ci += 1;
                }
            }
        }
    }

    #[inline(always)]
    fn run<const FMA: bool>(&self, dw: &mut [E]) {
        let cout = self.geo.cout;
        let mut co = 0;
        while co < cout {
            let rem = cout - co;
            if rem >= 16 {
                self.tile::<16, FMA>(dw, co);
                co += 16;
            } else if rem >= 8 {
                self.tile::<8, FMA>(dw, co);
                co += 8;
            } else if rem >= 4 {
                self.tile::<4, FMA>(dw, co);
                co += 4;
            } else if rem >= 2 {
                self.tile::<2, FMA>(dw, co);
                co += 2;
            } else {
                self.tile::<1, FMA>(dw, co);
                co += 1;
            }
        }
    }
}

#[cfg(target_arch = "x86_64")]
mod simd {
    use super::*;

    #[target_feature(enable = "avx512f,avx2,fma")]
    pub(super) unsafe fn fwd_avx512<E: Scalar>(k: &Fwd<'_, E>, out: &mut [E]) {
        k.run::<true>(out)
    }

    #[target_feature(enable = "avx2,fma")]
    pub(super) unsafe fn fwd_avx2<E: Scalar>(k: &Fwd<'_, E>, out: &mut [E]) {
        k.run::<true>(out)
    }

    #[target_feature(enable = "avx512f,avx2,fma")]
    pub(super) unsafe fn wgrad_avx512<E: Scalar>(k: &WGrad<'_, E>, dw: &mut [E]) {
        k.run::<true>(dw)
    }

    #[target_feature(enable = "avx2,fma")]
    pub(super) unsafe fn wgrad_avx2<E: Scalar>(k: &WGrad<'_, E>, dw: &mut [E]) {
        k.run::<true>(dw)
    }

    pub(super) fn level() -> u8 {
        if is_x86_feature_detected!("avx512f") && is_x86_feature_detected!("fma") {
            2
        } else if is_x86_feature_detected!("avx2") && is_x86_feature_detected!("fma") {
            1
        } else {
            0
        }
    }
}

/// `out[h, w, d, cout] = conv(xp, w)` with `w` laid out `[taps, cin, cout]`.
pub(crate) fn forward<E: Scalar>(xp: &[E], w: &[E], out: &mut [E], geo: Geometry) {
    debug_assert_eq!(xp.len(), geo.padded_len());
    debug_assert_eq!(w.len(), geo.taps() * geo.cin * geo.cout);
    debug_assert_eq!(out.len(), geo.h * geo.w * geo.d * geo.cout);
    let (_, wp, dp) = geo.padded_dims();
    let k = Fwd { xp, w, geo, offs: geo.tap_offsets(), x_step: dp * geo.cin, wp, dp };
    #[cfg(target_arch = "x86_64")]
    {
        // SAFETY: the matching CPU features were detected at runtime.
        match simd::level() {
            2 => return unsafe { simd::fwd_avx512(&k, out) },
            1 => return unsafe { simd::fwd_avx2(&k, out) },
            _ => {}
        }
    }
    k.run::<false>(out)
}

/// `dw[taps, cin, cout] += correlate(xp, grad)`.
pub(crate) fn weight_grad<E: Scalar>(xp: &[E], grad: &[E], dw: &mut [E], geo: Geometry) {
    debug_assert_eq!(xp.len(), geo.padded_len());
    debug_assert_eq!(grad.len(), geo.h * geo.w * geo.d * geo.cout);
    let (_, wp, dp) = geo.padded_dims();
    let k = WGrad { xp, grad, geo, offs: geo.tap_offsets(), x_step: dp * geo.cin, wp, dp };
    #[cfg(target_arch = "x86_64")]
    {
        // SAFETY: the matching CPU features were detected at runtime.
        match simd::level() {
            2 => return unsafe { simd::wgrad_avx512(&k, dw) },
            1 => return unsafe { simd::wgrad_avx2(&k, dw) },
            _ => {}
        }
    }
    k.run::<false>(dw)
}

/// Kernel for the input gradient: taps flipped, channel axes swapped.
pub(crate) fn flip_transpose<E: Scalar>(w: &[E], taps: usize, cin: usize, cout: usize) -> Vec<E> {
    let mut out = vec![E::zero(); w.len()];
    for t in 0..taps {
        let src_tap = taps - 1 - t;
        for ci in 0..cin {
            for co in 0..cout {
                out[(t * cout + co) * cin + ci] = w[(src_tap * cin + ci) * cout + co];
            }
        }
    }
    out
}
