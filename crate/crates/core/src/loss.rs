//! Segmentation losses: edge BCE, class-weighted BCE, boundary-weighted soft
//! IoU and their sum.
//!
//! Predictions are probabilities `[N, H, W, 1]`; targets are binary tensors of
//! the same shape. Every loss is a single tape node whose target is captured
//! as a constant.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::kv::{self, KvMap};
use crate::tensor::{Scalar, Tensor};

pub const LOG_EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    /// Mean over batch and pixels (wIoU: mean over images).
    Mean,
    /// Sum over batch and pixels (wIoU: sum over images).
    Sum,
}

impl std::str::FromStr for Reduction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Self::Mean),
            "sum" => Ok(Self::Sum),
            other => Err(Error::Config(format!("unknown loss reduction `{other}` (mean|sum)"))),
        }
    }
}

impl std::fmt::Display for Reduction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Mean => "mean",
            Self::Sum => "sum",
        })
    }
}

/// How the positive-class weight of the weighted BCE is chosen.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum BetaPolicy {
    Fixed(f64),
    /// `#negative / #positive` of the batch, clipped.
    BatchRatio,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub delta: f64,
    pub beta_policy: BetaPolicy,
    pub beta_clip: (f64, f64),
    /// Boundary gain of the wIoU weights.
    pub wiou_gain: f64,
    /// Mean-pool window of the wIoU weights (odd).
    pub wiou_window: usize,
    pub eps: f64,
    pub reduction: Reduction,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            delta: 1.0,
            beta_policy: BetaPolicy::BatchRatio,
            beta_clip: (1.0, 100.0),
            wiou_gain: 5.0,
            wiou_window: 15,
            eps: LOG_EPS,
            reduction: Reduction::Mean,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.delta >= 0.0) {
            return bad("delta must be nonnegative");
        }
        if !(self.eps > 0.0 && self.eps < 0.5) {
            return bad("eps must lie in (0, 0.5)");
        }
        if !(self.beta_clip.0 >= 1.0 && self.beta_clip.1 >= self.beta_clip.0) {
            return bad("beta clip must satisfy 1 <= low <= high");
        }
        if self.wiou_window % 2 == 0 {
            return bad("wIoU window must be odd");
        }
        if !(self.wiou_gain >= 0.0) {
            return bad("wIoU gain must be nonnegative");
        }
        if let BetaPolicy::Fixed(b) = self.beta_policy {
            if !(b > 0.0) {
                return bad("fixed beta must be positive");
            }
        }
        Ok(())
    }

    pub fn to_kv(&self) -> Vec<(String, String)> {
        let beta = match self.beta_policy {
            BetaPolicy::Fixed(b) => b.to_string(),
            BetaPolicy::BatchRatio => "batch_ratio".into(),
        };
        [
            ("loss_delta", self.delta.to_string()),
            ("loss_beta", beta),
            ("loss_beta_clip", format!("{},{}", self.beta_clip.0, self.beta_clip.1)),
            ("wiou_gain", self.wiou_gain.to_string()),
            ("wiou_window", self.wiou_window.to_string()),
            ("loss_eps", self.eps.to_string()),
            ("loss_reduction", self.reduction.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    /// Consumes the loss keys of `map`, starting from defaults. `loss_beta`
    /// is `batch_ratio` or a fixed positive weight.
    pub fn take_from_kv(map: &mut KvMap) -> Result<Self> {
        let mut c = Self::default();
        if let Some(v) = kv::take(map, "loss_delta")? {
            c.delta = v;
        }
        if let Some(v) = map.remove("loss_beta") {
            c.beta_policy = match v.as_str() {
                "batch_ratio" => BetaPolicy::BatchRatio,
                other => BetaPolicy::Fixed(
                    other.parse().map_err(|_| Error::Config(format!("`loss_beta = {other}`: expected batch_ratio or a number")))?,
                ),
            };
        }
        if let Some(v) = map.remove("loss_beta_clip") {
            let parts: Vec<f64> = v.split(',').map(|p| p.trim().parse()).collect::<std::result::Result<_, _>>().map_err(|_| {
                Error::Config(format!("`loss_beta_clip = {v}`: expected `low,high`"))
            })?;
            let [lo, hi] = parts[..] else {
                return Err(Error::Config(format!("`loss_beta_clip = {v}`: expected `low,high`")));
            };
            c.beta_clip = (lo, hi);
        }
        if let Some(v) = kv::take(map, "wiou_gain")? {
            c.wiou_gain = v;
        }
        if let Some(v) = kv::take(map, "wiou_window")? {
            c.wiou_window = v;
        }
        if let Some(v) = kv::take(map, "loss_eps")? {
            c.eps = v;
        }
        if let Some(v) = kv::take(map, "loss_reduction")? {
            c.reduction = v;
        }
        c.validate()?;
        Ok(c)
    }

    /// Positive-class weight for a batch of targets.
    pub fn beta_for<E: Scalar>(&self, target: &Tensor<E>) -> f64 {
        match self.beta_policy {
            BetaPolicy::Fixed(b) => b,
            BetaPolicy::BatchRatio => {
                let pos = target.data().iter().filter(|v| v.as_f64() > 0.5).count();
                let (lo, hi) = self.beta_clip;
                if pos == 0 {
                    hi
                } else {
                    ((target.len() - pos) as f64 / pos as f64).clamp(lo, hi)
                }
            }
        }
    }
}

fn check_pair<E: Scalar>(g: &Graph<E>, pred: Var, target: &Tensor<E>, what: &str) -> Result<()> {
    if g.shape(pred) != target.shape() {
        return Err(Error::Shape(format!("{what}: prediction {:?} vs target {:?}", g.shape(pred), target.shape())));
    }
    Ok(())
}

/// `-(beta t ln p + (1 - t) ln(1 - p))` with `p` clamped to `[eps, 1 - eps]`.
/// The clamp is treated as identity in the backward pass so saturated
/// predictions still receive a gradient.
fn bce_node<E: Scalar>(g: &mut Graph<E>, pred: Var, target: &Tensor<E>, beta: f64, eps: f64, reduction: Reduction) -> Var {
    let scale = match reduction {
        Reduction::Mean => 1.0 / target.len().max(1) as f64,
        Reduction::Sum => 1.0,
    };
    let clamp = move |p: f64| p.clamp(eps, 1.0 - eps);
    let total: f64 = g
        .value(pred)
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| {
            let (p, t) = (clamp(p.as_f64()), t.as_f64());
            -(beta * t * p.ln() + (1.0 - t) * (1.0 - p).ln())
        })
        .sum();
    let target = target.clone();
    g.push(Tensor::scalar(E::lit(total * scale)), &[pred], move |ctx| {
        let up = ctx.grad.data()[0].as_f64() * scale;
        let d = ctx.inputs[0].zip_map(&target, |p, t| {
            let (p, t) = (clamp(p.as_f64()), t.as_f64());
            E::lit(up * (-beta * t / p + (1.0 - t) / (1.0 - p)))
        });
        vec![Some(d)]
    })
}

/// Unweighted binary cross-entropy against the edge map.
pub fn edge_bce<E: Scalar>(g: &mut Graph<E>, pred: Var, target: &Tensor<E>, cfg: &LossConfig) -> Result<Var> {
    check_pair(g, pred, target, "edge BCE")?;
    Ok(bce_node(g, pred, target, 1.0, cfg.eps, cfg.reduction))
}

/// Binary cross-entropy with the positive term scaled by `beta`.
pub fn weighted_bce<E: Scalar>(g: &mut Graph<E>, pred: Var, target: &Tensor<E>, beta: f64, cfg: &LossConfig) -> Result<Var> {
    check_pair(g, pred, target, "weighted BCE")?;
    Ok(bce_node(g, pred, target, beta, cfg.eps, cfg.reduction))
}

/// `1 + gain * |meanpool_k(t) - t|` per pixel; zero padding, divisor `k^2`.
pub fn boundary_weights<E: Scalar>(target: &Tensor<E>, gain: f64, window: usize) -> Tensor<f64> {
    let s = target.shape();
    let (n, h, w) = (s[0], s[1], s[2]);
    let r = (window / 2) as isize;
    let area = (window * window) as f64;
    // Summed-area table per image.
    let mut out = Tensor::zeros(&[n, h, w, 1]);
    let mut sat = vec![0.0f64; (h + 1) * (w + 1)];
    for b in 0..n {
        let img = &target.data()[b * h * w..(b + 1) * h * w];
        for y in 0..h {
            let mut row = 0.0;
            for x in 0..w {
                row += img[y * w + x].as_f64();
                sat[(y + 1) * (w + 1) + x + 1] = sat[y * (w + 1) + x + 1] + row;
            }
        }
        let at = |y: isize, x: isize| {
            let y = y.clamp(0, h as isize) as usize;
            let x = x.clamp(0, w as isize) as usize;
            sat[y * (w + 1) + x]
        };
        for y in 0..h as isize {
            for x in 0..w as isize {
                let sum = at(y + r + 1, x + r + 1) - at(y - r, x + r + 1) - at(y + r + 1, x - r) + at(y - r, x - r);
                let t = img[(y as usize) * w + x as usize].as_f64();
                out.data_mut()[b * h * w + (y as usize) * w + x as usize] = 1.0 + gain * (sum / area - t).abs();
            }
        }
    }
    out
}

/// Boundary-weighted soft IoU, `1 - sum(w o t) / sum(w (o + t - o t))` per
/// image, reduced over the batch.
pub fn weighted_iou<E: Scalar>(g: &mut Graph<E>, pred: Var, target: &Tensor<E>, cfg: &LossConfig) -> Result<Var> {
    check_pair(g, pred, target, "weighted IoU")?;
    if target.rank() != 4 || target.dim(3) != 1 {
        return Err(Error::Shape(format!("weighted IoU expects [N, H, W, 1], got {:?}", target.shape())));
    }
    let weights = boundary_weights(target, cfg.wiou_gain, cfg.wiou_window);
    let n = target.dim(0);
    let px = target.len() / n.max(1);
    let scale = match cfg.reduction {
        Reduction::Mean => 1.0 / n.max(1) as f64,
        Reduction::Sum => 1.0,
    };
    let pred_data = g.value(pred).data();
    let mut sums = Vec::with_capacity(n);
    let mut total = 0.0;
    for b in 0..n {
        let (mut inter, mut union) = (0.0, 0.0);
        for i in b * px..(b + 1) * px {
            let (o, t, w) = (pred_data[i].as_f64(), target.data()[i].as_f64(), weights.data()[i]);
            inter += w * o * t;
            union += w * (o + t - o * t);
        }
        total += if union > 0.0 { 1.0 - inter / union } else { 0.0 };
        sums.push((inter, union));
    }
    let target = target.clone();
    Ok(g.push(Tensor::scalar(E::lit(total * scale)), &[pred], move |ctx| {
        let up = ctx.grad.data()[0].as_f64() * scale;
        let mut d = Tensor::zeros(ctx.inputs[0].shape());
        for (b, &(inter, union)) in sums.iter().enumerate() {
            if union <= 0.0 {
                continue;
            }
            let u2 = union * union;
            for i in b * px..(b + 1) * px {
                let (t, w) = (target.data()[i].as_f64(), weights.data()[i]);
                let grad = -w * (t * union - inter * (1.0 - t)) / u2;
                d.data_mut()[i] = E::lit(up * grad);
            }
        }
        vec![Some(d)]
    }))
}

/// Scalar value of each term of the total loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub wiou: f64,
    pub wbce: f64,
    pub edge: f64,
    pub total: f64,
    pub beta: f64,
}

/// `wIoU + delta * WBCE + edge BCE`. Without an edge prediction the edge term
/// is omitted (variants without the attention module).
pub fn total_loss<E: Scalar>(
    g: &mut Graph<E>,
    seg: Var,
    mask: &Tensor<E>,
    edge: Option<(Var, &Tensor<E>)>,
    cfg: &LossConfig,
) -> Result<(Var, LossBreakdown)> {
    let beta = cfg.beta_for(mask);
    let wiou = weighted_iou(g, seg, mask, cfg)?;
    let wbce = weighted_bce(g, seg, mask, beta, cfg)?;
    let mut breakdown = LossBreakdown {
        wiou: g.value(wiou).data()[0].as_f64(),
        wbce: g.value(wbce).data()[0].as_f64(),
        beta,
        ..Default::default()
    };
    let scaled = g.scale(wbce, E::lit(cfg.delta));
    let mut total = g.add(wiou, scaled)?;
    if let Some((pred, target)) = edge {
        let e = edge_bce(g, pred, target, cfg)?;
        breakdown.edge = g.value(e).data()[0].as_f64();
        total = g.add(total, e)?;
    }
    breakdown.total = g.value(total).data()[0].as_f64();
    Ok((total, breakdown))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check, random_tensor, GradCheckOptions};
    use crate::params::ParamStore;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    fn value(f: impl FnOnce(&mut Graph<f64>, Var) -> Var, pred: &Tensor<f64>) -> f64 {
        let mut g = Graph::eval();
        let p = g.constant(pred.clone());
        let out = f(&mut g, p);
        g.value(out).data()[0]
    }

    fn cfg() -> LossConfig {
        LossConfig::default()
    }

    const PRED: [f64; 4] = [0.9, 0.1, 0.8, 0.3];
    const GT: [f64; 4] = [1.0, 0.0, 1.0, 0.0];

    #[test]
    fn edge_bce_worked_example() {
        let (p, e) = (t(&[1, 2, 2, 1], &PRED), t(&[1, 2, 2, 1], &GT));
        let got = value(|g, v| edge_bce(g, v, &e, &cfg()).unwrap(), &p);
        let want = -(0.9f64.ln() + 0.9f64.ln() + 0.8f64.ln() + 0.7f64.ln()) / 4.0;
        assert!((got - want).abs() < 1e-15);
    }

    #[test]
    fn half_prediction_costs_ln2() {
        let p = Tensor::full(&[2, 3, 3, 1], 0.5);
        let e = random_tensor(&[2, 3, 3, 1], 1.0, 1).map(|v| (v > 0.0) as u8 as f64);
        let got = value(|g, v| edge_bce(g, v, &e, &cfg()).unwrap(), &p);
        assert!((got - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn perfect_edge_prediction_is_near_zero() {
        let e = t(&[1, 2, 2, 1], &GT);
        assert!(value(|g, v| edge_bce(g, v, &e, &cfg()).unwrap(), &e) <= 1e-6);
    }

    #[test]
    fn weighted_bce_worked_example_and_beta_one_identity() {
        let (p, m) = (t(&[1, 2, 2, 1], &PRED), t(&[1, 2, 2, 1], &GT));
        let got = value(|g, v| weighted_bce(g, v, &m, 3.0, &cfg()).unwrap(), &p);
        let want = -(3.0 * 0.9f64.ln() + 0.9f64.ln() + 3.0 * 0.8f64.ln() + 0.7f64.ln()) / 4.0;
        assert!((got - want).abs() < 1e-15);

        let w1 = value(|g, v| weighted_bce(g, v, &m, 1.0, &cfg()).unwrap(), &p);
        let bce = value(|g, v| edge_bce(g, v, &m, &cfg()).unwrap(), &p);
        assert!((w1 - bce).abs() <= 1e-12);
    }

    #[test]
    fn weighted_bce_ignores_beta_without_positives() {
        let p = random_tensor(&[1, 4, 4, 1], 0.4, 2).map(|v| v + 0.5);
        let m = Tensor::zeros(&[1, 4, 4, 1]);
        let a = value(|g, v| weighted_bce(g, v, &m, 1.0, &cfg()).unwrap(), &p);
        let b = value(|g, v| weighted_bce(g, v, &m, 50.0, &cfg()).unwrap(), &p);
        assert_eq!(a, b);
    }

    #[test]
    fn batch_ratio_beta_is_clipped() {
        let c = cfg();
        let mut m = Tensor::<f64>::zeros(&[1, 4, 4, 1]);
        assert_eq!(c.beta_for(&m), 100.0);
        m.data_mut()[0] = 1.0;
        assert_eq!(c.beta_for(&m), 15.0);
        let full = Tensor::<f64>::ones(&[1, 4, 4, 1]);
        assert_eq!(c.beta_for(&full), 1.0);
        let big = Tensor::from_fn(&[1, 20, 20, 1], |i| (i == 0) as u8 as f64);
        assert_eq!(c.beta_for(&big), 100.0);
    }

    #[test]
    fn wiou_extremes() {
        let m = t(&[1, 2, 2, 1], &GT);
        assert_eq!(value(|g, v| weighted_iou(g, v, &m, &cfg()).unwrap(), &m), 0.0);
        let inv = m.map(|v| 1.0 - v);
        assert_eq!(value(|g, v| weighted_iou(g, v, &m, &cfg()).unwrap(), &inv), 1.0);
    }

    #[test]
    fn wiou_matches_brute_force_oracle() {
        let mut m = Tensor::<f64>::zeros(&[1, 4, 4, 1]);
        for (y, x) in [(1, 1), (1, 2), (2, 1), (2, 2)] {
            m.data_mut()[y * 4 + x] = 1.0;
        }
        let p = m.map(|v| if v > 0.5 { 0.8 } else { 0.1 });
        let c = LossConfig { wiou_gain: 5.0, wiou_window: 3, ..cfg() };
        let got = value(|g, v| weighted_iou(g, v, &m, &c).unwrap(), &p);

        let (mut inter, mut union) = (0.0, 0.0);
        for y in 0..4i32 {
            for x in 0..4i32 {
                let mut s = 0.0;
                for dy in -1..=1 {
                    for dx in -1..=1 {
                        let (yy, xx) = (y + dy, x + dx);
                        if (0..4).contains(&yy) && (0..4).contains(&xx) {
                            s += m.data()[(yy * 4 + xx) as usize];
                        }
                    }
                }
                let i = (y * 4 + x) as usize;
                let (o, gt) = (p.data()[i], m.data()[i]);
                let w = 1.0 + 5.0 * (s / 9.0 - gt).abs();
                inter += w * o * gt;
                union += w * (o + gt - o * gt);
            }
        }
        assert!((got - (1.0 - inter / union)).abs() < 1e-14);
    }

    #[test]
    fn total_is_sum_of_components_and_linear_in_delta() {
        let p = random_tensor(&[2, 8, 8, 1], 0.45, 3).map(|v| v + 0.5);
        let m = random_tensor(&[2, 8, 8, 1], 1.0, 4).map(|v| (v > 0.3) as u8 as f64);
        let ep = random_tensor(&[2, 4, 4, 1], 0.45, 5).map(|v| v + 0.5);
        let e = random_tensor(&[2, 4, 4, 1], 1.0, 6).map(|v| (v > 0.5) as u8 as f64);
        for delta in [1.0, 0.0, 2.5] {
            let c = LossConfig { delta, ..cfg() };
            let mut g = Graph::eval();
            let pv = g.constant(p.clone());
            let ev = g.constant(ep.clone());
            let (total, parts) = total_loss(&mut g, pv, &m, Some((ev, &e)), &c).unwrap();
            let beta = c.beta_for(&m);
            let wiou = value(|g, v| weighted_iou(g, v, &m, &c).unwrap(), &p);
            let wbce = value(|g, v| weighted_bce(g, v, &m, beta, &c).unwrap(), &p);
            let edge = value(|g, v| edge_bce(g, v, &e, &c).unwrap(), &ep);
            let want = wiou + delta * wbce + edge;
            assert!((g.value(total).data()[0] - want).abs() <= 1e-10);
            assert!((parts.total - want).abs() <= 1e-10);
            if delta == 0.0 {
                assert_eq!(parts.total, wiou + edge);
            }
        }
    }

    #[test]
    fn perfect_prediction_makes_total_tiny() {
        let m = t(&[1, 3, 3, 1], &[0.0, 1.0, 0.0, 1.0, 1.0, 1.0, 0.0, 1.0, 0.0]);
        let e = t(&[1, 3, 3, 1], &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0]);
        let mut g = Graph::eval();
        let pv = g.constant(m.clone());
        let ev = g.constant(e.clone());
        let (_, parts) = total_loss(&mut g, pv, &m, Some((ev, &e)), &cfg()).unwrap();
        assert!(parts.wiou <= 1e-6 && parts.wbce <= 1e-6 && parts.edge <= 1e-6);
        assert!(parts.total <= 3e-6);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let p = random_tensor(&[2, 8, 8, 1], 0.45, 7).map(|v| v + 0.5);
        let m = random_tensor(&[2, 8, 8, 1], 1.0, 8).map(|v| (v > 0.2) as u8 as f64);
        let c = LossConfig { wiou_window: 3, ..cfg() };
        let losses: Vec<Box<dyn Fn(&mut Graph<f64>, Var) -> Result<Var>>> = vec![
            Box::new(|g, v| edge_bce(g, v, &m, &c)),
            Box::new(|g, v| weighted_bce(g, v, &m, 4.0, &c)),
            Box::new(|g, v| weighted_iou(g, v, &m, &c)),
            Box::new(|g, v| total_loss(g, v, &m, Some((v, &m)), &c).map(|r| r.0)),
        ];
        for (k, loss) in losses.iter().enumerate() {
            let mut store = ParamStore::new();
            let objective = |g: &mut Graph<f64>, _: &ParamStore<f64>, v: &[Var]| loss(g, v[0]);
            let report = check(&objective, &mut store, &[p.clone()], None, &GradCheckOptions::default()).unwrap();
            assert!(report.max_rel_error <= 1e-4, "loss {k}: {report:?}");
        }
    }

    #[test]
    fn sum_reduction_scales_by_count() {
        let (p, m) = (t(&[1, 2, 2, 1], &PRED), t(&[1, 2, 2, 1], &GT));
        let mean = value(|g, v| edge_bce(g, v, &m, &cfg()).unwrap(), &p);
        let sum_cfg = LossConfig { reduction: Reduction::Sum, ..cfg() };
        let sum = value(|g, v| edge_bce(g, v, &m, &sum_cfg).unwrap(), &p);
        assert!((sum - 4.0 * mean).abs() < 1e-14);
    }

    #[test]
    fn config_kv_round_trip() {
        let c = LossConfig { delta: 0.5, beta_policy: BetaPolicy::Fixed(3.0), beta_clip: (1.0, 20.0), reduction: Reduction::Sum, ..cfg() };
        let mut map = crate::kv::parse(&crate::kv::format(&c.to_kv())).unwrap();
        assert_eq!(LossConfig::take_from_kv(&mut map).unwrap(), c);
        assert!(map.is_empty());
        let mut bad = crate::kv::parse("loss_beta_clip = 5").unwrap();
        assert!(LossConfig::take_from_kv(&mut bad).is_err());
    }

    #[test]
    fn descent_decreases_total_loss() {
        let m = random_tensor(&[1, 8, 8, 1], 1.0, 9).map(|v| (v > 0.4) as u8 as f64);
        let mut logits = random_tensor(&[1, 8, 8, 1], 1.0, 10);
        let c = cfg();
        let mut last = f64::INFINITY;
        for _ in 0..12 {
            let mut g = Graph::train();
            let l = g.leaf(logits.clone());
            let p = g.sigmoid(l);
            let (total, parts) = total_loss(&mut g, p, &m, None, &c).unwrap();
            assert!(parts.total < last);
            last = parts.total;
            let grads = g.backward(total);
            let d = grads.wrt(l).unwrap();
            logits = logits.zip_map(d, |x, dx| x - 0.5 * dx);
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(32))]

            #[test]
            fn components_are_nonnegative(seed in 0u64..10_000) {
                let p = random_tensor(&[2, 6, 6, 1], 0.5, seed).map(|v| v + 0.5);
                let m = random_tensor(&[2, 6, 6, 1], 1.0, seed + 1).map(|v| (v > 0.5) as u8 as f64);
                let mut g = Graph::eval();
                let pv = g.constant(p);
                let (_, parts) = total_loss(&mut g, pv, &m, Some((pv, &m)), &cfg()).unwrap();
                prop_assert!(parts.wiou >= 0.0 && parts.wbce >= 0.0 && parts.edge >= 0.0);
                prop_assert!(parts.wiou <= 1.0);
            }

            #[test]
            fn uniform_wiou_is_permutation_invariant(seed in 0u64..10_000, perm in Just((0..25).collect::<Vec<usize>>()).prop_shuffle()) {
                let p = random_tensor(&[1, 5, 5, 1], 0.5, seed).map(|v| v + 0.5);
                let m = random_tensor(&[1, 5, 5, 1], 1.0, seed + 1).map(|v| (v > 0.0) as u8 as f64);
                let c = LossConfig { wiou_gain: 0.0, ..cfg() };
                let shuffle = |t: &Tensor<f64>| Tensor::from_fn(t.shape(), |i| t.data()[perm[i]]);
                let a = value(|g, v| weighted_iou(g, v, &m, &c).unwrap(), &p);
                let ms = shuffle(&m);
                let b = value(|g, v| weighted_iou(g, v, &ms, &c).unwrap(), &shuffle(&p));
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
