//! Position attention over shallow features with an edge prediction head.
//!
//! For flattened maps `F[n, c]` with `n = h * w`, the attention map is
//! `M[j, i] = softmax_i(F_C[j] . F_B[i])` and the refined feature is
//! `O[j] = beta * sum_i M[j, i] F_D[i] + F_A[j]`.

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::fusion::FeatureMap2D;
use crate::nn::{Conv, InitRng};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

/// Row-stochastic `[N, n, n]` pixel affinity.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap<E>(Tensor<E>);

impl<E: Scalar> AttentionMap<E> {
    /// `fb`, `fc`: `[N, h, w, c]` maps of equal shape.
    pub fn compute(fb: &FeatureMap2D<E>, fc: &FeatureMap2D<E>) -> Result<Self> {
        let mut g = Graph::eval();
        let b = g.constant(fb.tensor().clone());
        let c = g.constant(fc.tensor().clone());
        let m = attention_map(&mut g, b, c)?;
        Ok(Self(g.value(m).clone()))
    }

    /// Wraps an explicit map after checking shape and row sums.
    pub fn new(t: Tensor<E>) -> Result<Self> {
        if t.rank() != 3 || t.dim(1) != t.dim(2) {
            return Err(Error::Shape(format!("attention map must be [N, n, n], got {:?}", t.shape())));
        }
        let n = t.dim(2);
        for row in t.data().chunks(n.max(1)) {
            let sum = row.iter().fold(0.0, |acc, v| acc + v.as_f64());
            if row.iter().any(|v| v.as_f64() < 0.0) || (sum - 1.0).abs() > 1e-6 {
                return Err(Error::Data("attention rows must be nonnegative and sum to 1".into()));
            }
        }
        Ok(Self(t))
    }

    pub fn tensor(&self) -> &Tensor<E> {
        &self.0
    }

    /// `beta * M F_D + F_A` on concrete maps.
    pub fn apply(&self, fa: &FeatureMap2D<E>, fd: &FeatureMap2D<E>, beta: E) -> Result<FeatureMap2D<E>> {
        let mut g = Graph::eval();
        let a = g.constant(fa.tensor().clone());
        let d = g.constant(fd.tensor().clone());
        let m = g.constant(self.0.clone());
        let b = g.constant(Tensor::scalar(beta));
        let out = apply_attention(&mut g, a, d, m, b)?;
        FeatureMap2D::new(g.value(out).clone())
    }
}

fn flat_dims(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match *shape {
        [n, h, w, c] => Ok((n, h * w, c)),
        _ => Err(Error::Shape(format!("attention expects [N, h, w, c], got {shape:?}"))),
    }
}

/// `[N, h, w, c] x [N, h, w, c] -> [N, n, n]`. Energies and softmax are one
/// tape node so only the normalized map is stored.
pub fn attention_map<E: Scalar>(g: &mut Graph<E>, fb: Var, fc: Var) -> Result<Var> {
    if g.shape(fb) != g.shape(fc) {
        return Err(Error::Shape(format!("F_B {:?} vs F_C {:?}", g.shape(fb), g.shape(fc))));
    }
    let (batch, n, c) = flat_dims(g.shape(fb))?;
    let mut m = Tensor::zeros(&[batch, n, n]);
    crate::autograd::batched_gemm(batch, n, c, n, g.value(fc).data(), false, g.value(fb).data(), true, m.data_mut(), false);
    for row in m.data_mut().chunks_mut(n) {
        crate::autograd::softmax_row(row);
    }
    Ok(g.push(m, &[fb, fc], move |ctx| {
        let mut de = ctx.grad.clone();
        for (drow, yrow) in de.data_mut().chunks_mut(n).zip(ctx.output.data().chunks(n)) {
            crate::autograd::softmax_row_backward(drow, yrow);
        }
        let (fb, fc) = (ctx.inputs[0], ctx.inputs[1]);
        let dfb = ctx.needs[0].then(|| {
            let mut d = Tensor::zeros(fb.shape());
            crate::autograd::batched_gemm(batch, n, n, c, de.data(), true, fc.data(), false, d.data_mut(), false);
            d
        });
        let dfc = ctx.needs[1].then(|| {
            let mut d = Tensor::zeros(fc.shape());
            crate::autograd::batched_gemm(batch, n, n, c, de.data(), false, fb.data(), false, d.data_mut(), false);
            d
        });
        vec![dfb, dfc]
    }))
}

/// `beta * (M F_D) + F_A`, with `fa`, `fd` as `[N, h, w, c]`, `m` as
/// `[N, n, n]` and `beta` a one-element value.
pub fn apply_attention<E: Scalar>(g: &mut Graph<E>, fa: Var, fd: Var, m: Var, beta: Var) -> Result<Var> {
    if g.shape(fa) != g.shape(fd) {
        return Err(Error::Shape(format!("F_A {:?} vs F_D {:?}", g.shape(fa), g.shape(fd))));
    }
    let shape = g.shape(fa).to_vec();
    let (batch, n, c) = flat_dims(&shape)?;
    if g.shape(m) != [batch, n, n] {
        return Err(Error::Shape(format!("attention map {:?} for {n} positions", g.shape(m))));
    }
    let fd = g.reshape(fd, &[batch, n, c])?;
    let attended = g.bmm(m, fd, false, false)?;
    let attended = g.reshape(attended, &shape)?;
    let scaled = g.mul_scalar_var(attended, beta)?;
    g.add(scaled, fa)
}

/// Position attention followed by a two-layer edge head.
#[derive(Clone, Debug)]
pub struct EdgeAttention {
    pub proj_b: Conv,
    pub proj_c: Conv,
    pub proj_d: Conv,
    pub beta: ParamId,
    pub head1: Conv,
    pub head2: Conv,
    pub channels: usize,
}

impl EdgeAttention {
    pub fn new<E: Scalar>(store: &mut ParamStore<E>, rng: &mut InitRng, name: &str, channels: usize) -> Self {
        let c = channels;
        Self {
            proj_b: Conv::new(store, rng, &format!("{name}.proj_b"), &[1, 1], c, c, true),
            proj_c: Conv::new(store, rng, &format!("{name}.proj_c"), &[1, 1], c, c, true),
            proj_d: Conv::new(store, rng, &format!("{name}.proj_d"), &[1, 1], c, c, true),
            beta: store.add_weight(format!("{name}.beta"), Tensor::zeros(&[1])),
            head1: Conv::new(store, rng, &format!("{name}.head1"), &[3, 3], c, c, true),
            head2: Conv::new(store, rng, &format!("{name}.head2"), &[3, 3], c, 1, true),
            channels,
        }
    }

    /// Returns `(o_ea, edge_pred)`: the refined feature (shape of `fa`) and a
    /// sigmoid edge map `[N, h, w, 1]`.
    pub fn forward<E: Scalar>(&self, g: &mut Graph<E>, store: &ParamStore<E>, fa: Var) -> Result<(Var, Var)> {
        let s = g.shape(fa);
        if s.len() != 4 || s[3] != self.channels {
            return Err(Error::Shape(format!("edge attention over {} channels got {s:?}", self.channels)));
        }
        let fb = self.proj_b.forward(g, store, fa)?;
        let fc = self.proj_c.forward(g, store, fa)?;
        let fd = self.proj_d.forward(g, store, fa)?;
        let m = attention_map(g, fb, fc)?;
        let beta = g.param(store, self.beta);
        let o_ea = apply_attention(g, fa, fd, m, beta)?;
        let h = self.head1.forward(g, store, o_ea)?;
        let h = g.relu(h);
        let logits = self.head2.forward(g, store, h)?;
        Ok((o_ea, g.sigmoid(logits)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check, project, random_tensor, GradCheckOptions};
    use rand::SeedableRng;

    fn fmap(shape: &[usize], data: Vec<f64>) -> FeatureMap2D<f64> {
        FeatureMap2D::new(Tensor::new(shape, data).unwrap()).unwrap()
    }

    #[test]
    fn map_shape_and_uniform_rows_for_zero_features() {
        let z = FeatureMap2D::new(Tensor::<f64>::zeros(&[3, 2, 2, 5])).unwrap();
        let m = AttentionMap::compute(&z, &z).unwrap();
        assert_eq!(m.tensor().shape(), &[3, 4, 4]);
        assert!(m.tensor().data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn map_matches_scalar_softmax() {
        // c = 1, F_C = [1, 1], F_B = [0, ln 3] -> energies of every row [0, ln 3]
        let fb = fmap(&[1, 1, 2, 1], vec![0.0, 3f64.ln()]);
        let fc = fmap(&[1, 1, 2, 1], vec![1.0, 1.0]);
        let m = AttentionMap::compute(&fb, &fc).unwrap();
        for (got, want) in m.tensor().data().iter().zip([0.25, 0.75, 0.25, 0.75]) {
            assert!((got - want).abs() < 1e-15);
        }
    }

    #[test]
    fn apply_matches_hand_product() {
        let m = AttentionMap::new(Tensor::new(&[1, 2, 2], vec![0.25, 0.75, 0.5, 0.5]).unwrap()).unwrap();
        let fa = fmap(&[1, 1, 2, 1], vec![1.0, 2.0]);
        let fd = fmap(&[1, 1, 2, 1], vec![3.0, 5.0]);
        let out = m.apply(&fa, &fd, 1.0).unwrap();
        assert_eq!(out.tensor().data(), &[5.5, 6.0]);
    }

    #[test]
    fn constant_values_pass_through_any_stochastic_map() {
        let m = AttentionMap::new(Tensor::new(&[1, 3, 3], vec![0.2, 0.3, 0.5, 1.0, 0.0, 0.0, 0.1, 0.1, 0.8]).unwrap())
            .unwrap();
        let fa = FeatureMap2D::new(random_tensor(&[1, 1, 3, 2], 1.0, 1)).unwrap();
        let fd = fmap(&[1, 1, 3, 2], vec![0.5, -2.0, 0.5, -2.0, 0.5, -2.0]);
        let out = m.apply(&fa, &fd, 1.0).unwrap();
        for (i, (&o, &a)) in out.tensor().data().iter().zip(fa.tensor().data()).enumerate() {
            let v = if i % 2 == 0 { 0.5 } else { -2.0 };
            assert!((o - (a + v)).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_beta_is_exact_identity() {
        let fa = FeatureMap2D::new(random_tensor(&[2, 3, 3, 4], 5.0, 2)).unwrap();
        let fd = FeatureMap2D::new(random_tensor(&[2, 3, 3, 4], 5.0, 3)).unwrap();
        let m = AttentionMap::compute(&fa, &fd).unwrap();
        assert_eq!(m.apply(&fa, &fd, 0.0).unwrap(), fa);
    }

    #[test]
    fn non_stochastic_map_is_rejected() {
        assert!(AttentionMap::new(Tensor::new(&[1, 2, 2], vec![0.5, 0.6, 0.5, 0.5]).unwrap()).is_err());
        assert!(AttentionMap::new(Tensor::<f64>::zeros(&[1, 2, 3])).is_err());
    }

    #[test]
    fn edge_module_shapes_and_zero_head() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = InitRng::seed_from_u64(0);
        let ea = EdgeAttention::new(&mut store, &mut rng, "ea", 16);
        let mut g = Graph::eval();
        let x = g.constant(random_tensor(&[1, 48, 48, 16], 1.0, 4));
        let (o, e) = ea.forward(&mut g, &store, x).unwrap();
        assert_eq!(g.shape(o), &[1, 48, 48, 16]);
        assert_eq!(g.shape(e), &[1, 48, 48, 1]);
        assert!(g.value(e).data().iter().all(|&v| v > 0.0 && v < 1.0));

        for id in [ea.head2.weight, ea.head2.bias.unwrap()] {
            let shape = store.get(id).shape().to_vec();
            store.set(id, Tensor::zeros(&shape)).unwrap();
        }
        let mut g = Graph::eval();
        let x = g.constant(random_tensor(&[1, 6, 6, 16], 1.0, 5));
        let (_, e) = ea.forward(&mut g, &store, x).unwrap();
        assert!(g.value(e).data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn map_and_apply_gradients_match_finite_differences() {
        let mut store = ParamStore::new();
        let inputs: Vec<Tensor<f64>> = (0..4).map(|s| random_tensor(&[1, 4, 4, 3], 1.0, 20 + s)).collect();
        let objective = |g: &mut Graph<f64>, _: &ParamStore<f64>, v: &[Var]| {
            let m = attention_map(g, v[1], v[2])?;
            let beta = g.constant(Tensor::scalar(0.7));
            let out = apply_attention(g, v[0], v[3], m, beta)?;
            project(g, out, 6)
        };
        let report = check(&objective, &mut store, &inputs, None, &GradCheckOptions::default()).unwrap();
        assert!(report.max_rel_error <= 1e-4, "{report:?}");
    }

    #[test]
    fn edge_module_gradients_match_finite_differences() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = InitRng::seed_from_u64(1);
        let ea = EdgeAttention::new(&mut store, &mut rng, "ea", 3);
        store.set(ea.beta, Tensor::new(&[1], vec![0.4]).unwrap()).unwrap();
        let objective = |g: &mut Graph<f64>, s: &ParamStore<f64>, v: &[Var]| {
            let (o, e) = ea.forward(g, s, v[0])?;
            let po = project(g, o, 7)?;
            let pe = project(g, e, 8)?;
            g.add(po, pe)
        };
        let x = random_tensor(&[1, 4, 4, 3], 1.0, 9);
        let report = check(&objective, &mut store, &[x], None, &GradCheckOptions::default()).unwrap();
        assert!(report.max_rel_error <= 1e-4, "{report:?}");
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(32))]

            #[test]
            fn rows_sum_to_one(seed in 0u64..10_000, scale in prop::sample::select(vec![1e-3, 1.0, 30.0, 1e3])) {
                let fb = FeatureMap2D::new(random_tensor(&[2, 3, 4, 5], scale, seed)).unwrap();
                let fc = FeatureMap2D::new(random_tensor(&[2, 3, 4, 5], scale, seed + 1)).unwrap();
                let m = AttentionMap::compute(&fb, &fc).unwrap();
                for row in m.tensor().data().chunks(12) {
                    let s: f64 = row.iter().sum();
                    prop_assert!((s - 1.0).abs() <= 1e-6);
                    prop_assert!(row.iter().all(|&v| v >= 0.0));
                }
            }

            #[test]
            fn pixel_permutation_is_equivariant(seed in 0u64..10_000, perm in Just((0..6).collect::<Vec<usize>>()).prop_shuffle()) {
                let maps: Vec<Tensor<f64>> = (0..4).map(|k| random_tensor(&[1, 2, 3, 2], 1.0, seed + k)).collect();
                let permute = |t: &Tensor<f64>| {
                    Tensor::from_fn(t.shape(), |i| t.data()[perm[i / 2] * 2 + i % 2])
                };
                let run = |ts: &[Tensor<f64>]| {
                    let f: Vec<FeatureMap2D<f64>> = ts.iter().map(|t| FeatureMap2D::new(t.clone()).unwrap()).collect();
                    let m = AttentionMap::compute(&f[1], &f[2]).unwrap();
                    m.apply(&f[0], &f[3], 0.8).unwrap().into_tensor()
                };
                let base = run(&maps);
                let permuted: Vec<Tensor<f64>> = maps.iter().map(permute).collect();
                let out = run(&permuted);
                prop_assert!(out.max_abs_diff(&permute(&base)) < 1e-12);
            }
        }
    }
}
