//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::error::Result;
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Central-difference half step.
    pub eps: f64,
    /// Denominator floor of the relative error.
    pub floor: f64,
    /// Fraction of each tensor's coordinates to check (at least one).
    pub fraction: f64,
    /// Upper bound of coordinates checked per tensor.
    pub max_per_tensor: usize,
    /// Evaluate batchnorm with batch statistics.
    pub train_mode: bool,
    pub seed: u64,
    /// Fault injection: scale the analytic gradient of the first sampled
    /// coordinate of this parameter.
    pub corrupt: Option<(ParamId, f64)>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            floor: 1e-6,
            fraction: 1.0,
            max_per_tensor: 64,
            train_mode: true,
            seed: 0,
            corrupt: None,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Location of the worst coordinate, e.g. `param enc.0.conv.weight[17]`.
    pub worst: String,
}

impl GradCheckReport {
    fn record(&mut self, analytic: f64, numeric: f64, floor: f64, location: impl FnOnce() -> String) {
        let denom = analytic.abs().max(numeric.abs()).max(floor);
        let rel = (analytic - numeric).abs() / denom;
        self.checked += 1;
        if self.checked == 1 || rel > self.max_rel_error {
            self.max_rel_error = rel;
            self.worst = location();
        }
    }
}

/// Scalar objective over a parameter store and a list of input tensors.
pub trait Objective {
    fn eval(&self, g: &mut Graph<f64>, store: &ParamStore<f64>, inputs: &[Var]) -> Result<Var>;
}

impl<F> Objective for F
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>, &[Var]) -> Result<Var>,
{
    fn eval(&self, g: &mut Graph<f64>, store: &ParamStore<f64>, inputs: &[Var]) -> Result<Var> {
        self(g, store, inputs)
    }
}

fn loss_value(
    objective: &impl Objective,
    store: &ParamStore<f64>,
    inputs: &[Tensor<f64>],
    train_mode: bool,
) -> Result<f64> {
    let mut g = Graph::with_modes(false, train_mode);
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = objective.eval(&mut g, store, &vars)?;
    Ok(g.value(out).data()[0])
}

fn pick(len: usize, opts: &GradCheckOptions, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let wanted = ((len as f64 * opts.fraction).ceil() as usize).clamp(1, opts.max_per_tensor.max(1)).min(len);
    let mut idx = sample(rng, len, wanted).into_vec();
    idx.sort_unstable();
    idx
}

/// Compares analytic gradients of every trainable parameter (or the subset
/// in `only`) and every input against central differences.
pub fn check(
    objective: &impl Objective,
    store: &mut ParamStore<f64>,
    inputs: &[Tensor<f64>],
    only: Option<&[ParamId]>,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let (param_grads, input_grads) = {
        let mut g = Graph::with_modes(true, opts.train_mode);
        let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
        let out = objective.eval(&mut g, store, &vars)?;
        let grads = g.backward(out);
        let params: Vec<(ParamId, Tensor<f64>)> = store
            .weight_ids()
            .filter(|id| only.is_none_or(|o| o.contains(id)))
            .map(|id| {
                let grad = grads.param(id).cloned().unwrap_or_else(|| Tensor::zeros(store.get(id).shape()));
                (id, grad)
            })
            .collect();
        let ins: Vec<Tensor<f64>> = vars
            .iter()
            .zip(inputs)
            .map(|(&v, t)| grads.wrt(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect();
        (params, ins)
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport::default();
    let eps = opts.eps;

    for (id, grad) in &param_grads {
        let coords = pick(grad.len(), opts, &mut rng);
        for (n, &i) in coords.iter().enumerate() {
            let original = store.get(*id).data()[i];
            store.get_mut(*id).data_mut()[i] = original + eps;
            let plus = loss_value(objective, store, inputs, opts.train_mode)?;
            store.get_mut(*id).data_mut()[i] = original - eps;
            let minus = loss_value(objective, store, inputs, opts.train_mode)?;
            store.get_mut(*id).data_mut()[i] = original;
            let numeric = (plus - minus) / (2.0 * eps);
            let mut analytic = grad.data()[i];
            if let Some((cid, factor)) = opts.corrupt {
                if cid == *id && n == 0 {
                    analytic *= factor;
                }
            }
            report.record(analytic, numeric, opts.floor, || format!("param {}[{i}]", store.name(*id)));
        }
    }

    let mut perturbed: Vec<Tensor<f64>> = inputs.to_vec();
    for (k, grad) in input_grads.iter().enumerate() {
        let coords = pick(grad.len(), opts, &mut rng);
        for &i in &coords {
            let original = perturbed[k].data()[i];
            perturbed[k].data_mut()[i] = original + eps;
            let plus = loss_value(objective, store, &perturbed, opts.train_mode)?;
            perturbed[k].data_mut()[i] = original - eps;
            let minus = loss_value(objective, store, &perturbed, opts.train_mode)?;
            perturbed[k].data_mut()[i] = original;
            let numeric = (plus - minus) / (2.0 * eps);
            report.record(grad.data()[i], numeric, opts.floor, || format!("input {k}[{i}]"));
        }
    }
    Ok(report)
}

/// Fixed random projection `sum(r * x)` turning a tensor output into a scalar
/// objective with O(1) gradients.
pub fn project(g: &mut Graph<f64>, x: Var, seed: u64) -> Result<Var> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let weights = Tensor::from_fn(g.shape(x), |_| rng.random::<f64>() * 2.0 - 1.0);
    let w = g.constant(weights);
    let prod = g.mul(x, w)?;
    Ok(g.sum_all(prod))
}

/// Uniform random tensor in `[-scale, scale)`.
pub fn random_tensor(shape: &[usize], scale: f64, seed: u64) -> Tensor<f64> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| (rng.random::<f64>() * 2.0 - 1.0) * scale)
}
