//! Parallel partial decoder: refines four encoder features, multiplies them
//! across levels and concatenates the result into one segmentation map.

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{Conv, ConvBnRelu, InitRng};
use crate::params::ParamStore;
use crate::tensor::Scalar;

pub const DEFAULT_UNIFY_WIDTH: usize = 32;

/// 1x1 projection to the common width followed by two conv3x3+BN+ReLU layers
/// and a short skip from the projection: `p + body(p)`.
#[derive(Clone, Debug)]
pub struct RfbRefine {
    pub proj: Conv,
    pub body: [ConvBnRelu; 2],
    pub width: usize,
}

impl RfbRefine {
    pub fn new<E: Scalar>(store: &mut ParamStore<E>, rng: &mut InitRng, name: &str, cin: usize, width: usize) -> Self {
        Self {
            proj: Conv::new(store, rng, &format!("{name}.proj"), &[1, 1], cin, width, true),
            body: [
                ConvBnRelu::new(store, rng, &format!("{name}.body0"), &[3, 3], width, width),
                ConvBnRelu::new(store, rng, &format!("{name}.body1"), &[3, 3], width, width),
            ],
            width,
        }
    }

    pub fn forward<E: Scalar>(&self, g: &mut Graph<E>, store: &ParamStore<E>, x: Var) -> Result<Var> {
        let p = self.proj.forward(g, store, x)?;
        let h = self.body[0].forward(g, store, p)?;
        let h = self.body[1].forward(g, store, h)?;
        g.add(p, h)
    }
}

/// Inputs are, finest first: the attention feature, the two fused features
/// and the deepest encoder feature.
#[derive(Clone, Debug)]
pub struct PartialDecoder {
    pub refine: [RfbRefine; 4],
    /// conv3x3, 5U -> U, then ReLU.
    pub head1: Conv,
    /// conv1x1, U -> 1.
    pub head2: Conv,
    pub width: usize,
}

impl PartialDecoder {
    /// `channels`: widths of the four inputs, finest first.
    pub fn new<E: Scalar>(store: &mut ParamStore<E>, rng: &mut InitRng, name: &str, channels: [usize; 4], width: usize) -> Self {
        let refine = std::array::from_fn(|i| RfbRefine::new(store, rng, &format!("{name}.refine{i}"), channels[i], width));
        Self {
            refine,
            head1: Conv::new(store, rng, &format!("{name}.head1"), &[3, 3], 5 * width, width, true),
            head2: Conv::new(store, rng, &format!("{name}.head2"), &[1, 1], width, 1, true),
            width,
        }
    }

    /// Refined features, all resized to the resolution of `inputs[1]`.
    pub fn refined<E: Scalar>(&self, g: &mut Graph<E>, store: &ParamStore<E>, inputs: [Var; 4]) -> Result<[Var; 4]> {
        let n = g.shape(inputs[0])[0];
        if inputs.iter().any(|&v| g.shape(v).len() != 4 || g.shape(v)[0] != n) {
            let shapes: Vec<_> = inputs.iter().map(|&v| g.shape(v).to_vec()).collect();
            return Err(Error::Shape(format!("partial decoder inputs disagree: {shapes:?}")));
        }
        let (h, w) = (g.shape(inputs[1])[1], g.shape(inputs[1])[2]);
        let mut out = inputs;
        for (slot, (block, &x)) in out.iter_mut().zip(self.refine.iter().zip(&inputs)) {
            let r = block.forward(g, store, x)?;
            *slot = g.resize_bilinear(r, h, w)?;
        }
        Ok(out)
    }

    /// Head applied to already refined features; returns logits at the PPD
    /// resolution.
    pub fn combine<E: Scalar>(&self, g: &mut Graph<E>, store: &ParamStore<E>, r: [Var; 4]) -> Result<Var> {
        let p2 = g.mul(r[3], r[2])?;
        let p1 = g.mul(p2, r[1])?;
        let p0 = g.mul(p1, r[0])?;
        let cat = g.concat_channels(&[p0, r[0], r[1], r[2], r[3]])?;
        let h = self.head1.forward(g, store, cat)?;
        let h = g.relu(h);
        self.head2.forward(g, store, h)
    }

    /// Global map `[N, out_h, out_w, 1]` in (0, 1).
    pub fn forward<E: Scalar>(
        &self,
        g: &mut Graph<E>,
        store: &ParamStore<E>,
        inputs: [Var; 4],
        out_hw: (usize, usize),
    ) -> Result<Var> {
        let r = self.refined(g, store, inputs)?;
        let logits = self.combine(g, store, r)?;
        let logits = g.resize_bilinear(logits, out_hw.0, out_hw.1)?;
        Ok(g.sigmoid(logits))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check, project, random_tensor, GradCheckOptions};
    use crate::tensor::Tensor;
    use rand::SeedableRng;

    fn zero(store: &mut ParamStore<f64>, ids: &[crate::params::ParamId]) {
        for &id in ids {
            let shape = store.get(id).shape().to_vec();
            store.set(id, Tensor::zeros(&shape)).unwrap();
        }
    }

    #[test]
    fn refine_keeps_spatial_size() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = InitRng::seed_from_u64(0);
        let r = RfbRefine::new(&mut store, &mut rng, "r", 32, 32);
        let mut g = Graph::eval();
        let x = g.constant(Tensor::ones(&[1, 24, 24, 32]));
        let y = r.forward(&mut g, &store, x).unwrap();
        assert_eq!(g.shape(y), &[1, 24, 24, 32]);
    }

    #[test]
    fn zero_body_reduces_to_projection() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = InitRng::seed_from_u64(0);
        let r = RfbRefine::new(&mut store, &mut rng, "r", 3, 3);
        let mut eye = Tensor::zeros(&[1, 1, 3, 3]);
        for i in 0..3 {
            eye.data_mut()[i * 3 + i] = 1.0;
        }
        store.set(r.proj.weight, eye).unwrap();
        zero(&mut store, &[r.body[0].conv.weight, r.body[1].conv.weight]);
        let x = random_tensor(&[2, 5, 5, 3], 1.0, 1);
        for train in [true, false] {
            let mut g = Graph::with_modes(false, train);
            let xv = g.constant(x.clone());
            let y = r.forward(&mut g, &store, xv).unwrap();
            assert_eq!(g.value(y), &x);
        }
    }

    fn decoder(store: &mut ParamStore<f64>, width: usize) -> PartialDecoder {
        let mut rng = InitRng::seed_from_u64(2);
        PartialDecoder::new(store, &mut rng, "ppd", [4, 4, 6, 8], width)
    }

    fn pyramid(size: usize, seed: u64) -> Vec<Tensor<f64>> {
        vec![
            random_tensor(&[2, size, size, 4], 1.0, seed),
            random_tensor(&[2, size, size, 4], 1.0, seed + 1),
            random_tensor(&[2, size / 2, size / 2, 6], 1.0, seed + 2),
            random_tensor(&[2, size / 4, size / 4, 8], 1.0, seed + 3),
        ]
    }

    fn run(store: &ParamStore<f64>, ppd: &PartialDecoder, inputs: &[Tensor<f64>], out: usize) -> Tensor<f64> {
        let mut g = Graph::eval();
        let v: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let y = ppd.forward(&mut g, store, [v[0], v[1], v[2], v[3]], (out, out)).unwrap();
        g.value(y).clone()
    }

    #[test]
    fn output_is_at_input_resolution_and_in_unit_interval() {
        let mut store = ParamStore::new();
        let ppd = decoder(&mut store, 4);
        let y = run(&store, &ppd, &pyramid(16, 0), 32);
        assert_eq!(y.shape(), &[2, 32, 32, 1]);
        assert!(y.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn zero_head_gives_one_half() {
        let mut store = ParamStore::new();
        let ppd = decoder(&mut store, 4);
        zero(&mut store, &[ppd.head2.weight, ppd.head2.bias.unwrap()]);
        let y = run(&store, &ppd, &pyramid(8, 3), 16);
        assert!(y.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn mismatched_batches_are_rejected() {
        let mut store = ParamStore::new();
        let ppd = decoder(&mut store, 4);
        let mut inputs = pyramid(8, 0);
        inputs[3] = random_tensor(&[1, 2, 2, 8], 1.0, 0);
        let mut g = Graph::eval();
        let v: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        assert!(ppd.forward(&mut g, &store, [v[0], v[1], v[2], v[3]], (16, 16)).is_err());
    }

    #[test]
    fn zeroed_level_leaves_only_concatenation_path() {
        let mut store = ParamStore::new();
        let ppd = decoder(&mut store, 3);
        let inputs = pyramid(8, 5);
        let mut g = Graph::eval();
        let v: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let mut r = ppd.refined(&mut g, &store, [v[0], v[1], v[2], v[3]]).unwrap();
        r[2] = g.scale(r[2], 0.0);
        let logits = ppd.combine(&mut g, &store, r).unwrap();

        // Forward trace: head over [0, r0, r1, 0, r3].
        let u = 3;
        let refined: Vec<Tensor<f64>> = r.iter().map(|&x| g.value(x).clone()).collect();
        let (n, h, w) = (2, 8, 8);
        let mut cat = Tensor::zeros(&[n, h, w, 5 * u]);
        for p in 0..n * h * w {
            for (slot, level) in [(1, 0), (2, 1), (4, 3)] {
                for c in 0..u {
                    cat.data_mut()[p * 5 * u + slot * u + c] = refined[level].data()[p * u + c];
                }
            }
        }
        let w1 = store.get(ppd.head1.weight);
        let b1 = store.get(ppd.head1.bias.unwrap()).data();
        let w2 = store.get(ppd.head2.weight).data();
        let b2 = store.get(ppd.head2.bias.unwrap()).data()[0];
        for s in 0..n {
            for y in 0..h {
                for x in 0..w {
                    let mut out = b2;
                    for co in 0..u {
                        let mut acc = b1[co];
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let (sy, sx) = (y as isize + ky as isize - 1, x as isize + kx as isize - 1);
                                if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                    continue;
                                }
                                let p = (s * h + sy as usize) * w + sx as usize;
                                for ci in 0..5 * u {
                                    acc += cat.data()[p * 5 * u + ci] * w1.data()[((ky * 3 + kx) * 5 * u + ci) * u + co];
                                }
                            }
                        }
                        out += acc.max(0.0) * w2[co];
                    }
                    let got = g.value(logits).data()[(s * h + y) * w + x];
                    assert!((got - out).abs() < 1e-10, "{got} vs {out}");
                }
            }
        }
    }

    #[test]
    fn refine_gradients_match_finite_differences() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = InitRng::seed_from_u64(4);
        let r = RfbRefine::new(&mut store, &mut rng, "r", 3, 4);
        let objective = |g: &mut Graph<f64>, s: &ParamStore<f64>, v: &[Var]| {
            let y = r.forward(g, s, v[0])?;
            project(g, y, 3)
        };
        let x = random_tensor(&[2, 4, 4, 3], 1.0, 5);
        let report = check(&objective, &mut store, &[x], None, &GradCheckOptions::default()).unwrap();
        assert!(report.max_rel_error <= 1e-4, "{report:?}");
    }

    #[test]
    fn decoder_gradients_match_finite_differences() {
        let mut store = ParamStore::new();
        let ppd = decoder(&mut store, 3);
        let objective = |g: &mut Graph<f64>, s: &ParamStore<f64>, v: &[Var]| {
            let y = ppd.forward(g, s, [v[0], v[1], v[2], v[3]], (16, 16))?;
            project(g, y, 4)
        };
        let inputs = pyramid(8, 9);
        let opts = GradCheckOptions { max_per_tensor: 16, ..Default::default() };
        let report = check(&objective, &mut store, &inputs, None, &opts).unwrap();
        assert!(report.max_rel_error <= 1e-4, "{report:?}");
    }
}
