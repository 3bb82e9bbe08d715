//! Finite-difference gradient checks of every trainable block at toy shapes.

use std::time::Instant;

use rand::SeedableRng;
use serde::Serialize;

use crate::attention::{apply_attention, attention_map, EdgeAttention};
use crate::autograd::{Graph, Var};
use crate::decoder::{PartialDecoder, RfbRefine};
use crate::error::{Error, Result};
use crate::fusion::{DimensionTransfer, SqueezeExcite};
use crate::gradcheck::{check, project, random_tensor, GradCheckOptions, GradCheckReport};
use crate::loss::{edge_bce, total_loss, weighted_bce, weighted_iou, LossConfig};
use crate::model::{Model, ModelConfig, ModelInput, Variant};
use crate::nn::InitRng;
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Block {
    DimensionTransfer,
    SqueezeExcite,
    EdgeAttention,
    RfbRefine,
    Ppd,
    EdgeBce,
    WeightedBce,
    WeightedIou,
    TotalLoss,
    Model,
}

impl Block {
    pub const ALL: [Block; 10] = [
        Block::DimensionTransfer,
        Block::SqueezeExcite,
        Block::EdgeAttention,
        Block::RfbRefine,
        Block::Ppd,
        Block::EdgeBce,
        Block::WeightedBce,
        Block::WeightedIou,
        Block::TotalLoss,
        Block::Model,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Block::DimensionTransfer => "dimension_transfer",
            Block::SqueezeExcite => "squeeze_excite",
            Block::EdgeAttention => "edge_attention",
            Block::RfbRefine => "rfb_refine",
            Block::Ppd => "ppd",
            Block::EdgeBce => "edge_bce",
            Block::WeightedBce => "weighted_bce",
            Block::WeightedIou => "weighted_iou",
            Block::TotalLoss => "total_loss",
            Block::Model => "model",
        }
    }

    /// Maximum accepted relative error. The whole network is checked on
    /// sampled parameters, where ReLU and max-pool kinks inside the
    /// difference stencil are more likely.
    pub fn tolerance(self) -> f64 {
        match self {
            Block::Model => 1e-3,
            _ => 1e-4,
        }
    }

    /// Parses a block name, or `all`.
    pub fn parse_list(s: &str) -> Result<Vec<Block>> {
        if s == "all" {
            return Ok(Self::ALL.to_vec());
        }
        s.split(',').map(|n| n.trim().parse()).collect()
    }
}

impl std::str::FromStr for Block {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|b| b.name() == s).ok_or_else(|| {
            let names: Vec<&str> = Self::ALL.iter().map(|b| b.name()).collect();
            Error::Config(format!("unknown block `{s}` (one of: all, {})", names.join(", ")))
        })
    }
}

impl std::fmt::Display for Block {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, Default)]
pub struct VerifyOptions {
    pub eps: Option<f64>,
    pub seed: u64,
    /// Double the analytic gradient of one weight (harness self-test).
    pub corrupt: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct BlockCheck {
    pub block: Block,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub checked: usize,
    pub worst: String,
    pub seconds: f64,
}

impl BlockCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tolerance
    }
}

fn run(
    objective: &impl crate::gradcheck::Objective,
    store: &mut ParamStore<f64>,
    inputs: &[Tensor<f64>],
    mut opts: GradCheckOptions,
    v: &VerifyOptions,
) -> Result<GradCheckReport> {
    if let Some(eps) = v.eps {
        opts.eps = eps;
    }
    opts.seed = v.seed;
    if v.corrupt {
        let id = store
            .weight_ids()
            .next()
            .ok_or_else(|| Error::Config("fault injection needs a block with parameters".into()))?;
        opts.corrupt = Some((id, 2.0));
    }
    check(objective, store, inputs, None, &opts)
}

fn probs(shape: &[usize], seed: u64) -> Tensor<f64> {
    random_tensor(shape, 0.45, seed).map(|v| v + 0.5)
}

fn binary(shape: &[usize], seed: u64) -> Tensor<f64> {
    random_tensor(shape, 1.0, seed).map(|v| (v > 0.3) as u8 as f64)
}

/// Checks one block and reports its worst relative error.
pub fn grad_check(block: Block, v: &VerifyOptions) -> Result<BlockCheck> {
    let started = Instant::now();
    let mut store = ParamStore::<f64>::new();
    let mut rng = InitRng::seed_from_u64(v.seed ^ 0x5eed);
    let defaults = GradCheckOptions::default();
    let loss_cfg = LossConfig::default();
    let report = match block {
        Block::DimensionTransfer => {
            let dt = DimensionTransfer::new(&mut store, &mut rng, "dt", 4, 4, 4, 2)?;
            let obj = |g: &mut Graph<f64>, s: &ParamStore<f64>, x: &[Var]| {
                let y = dt.forward(g, s, x[0], x[1])?;
                project(g, y, 1)
            };
            let inputs = [random_tensor(&[1, 8, 8, 4], 1.0, 2), random_tensor(&[1, 8, 8, 4, 4], 1.0, 3)];
            run(&obj, &mut store, &inputs, defaults, v)?
        }
        Block::SqueezeExcite => {
            let se = SqueezeExcite::new(&mut store, &mut rng, "se", 4, 2)?;
            store.set(se.fc1.bias, Tensor::new(&[2], vec![0.3, 0.2])?)?;
            let obj = |g: &mut Graph<f64>, s: &ParamStore<f64>, x: &[Var]| {
                let y = se.forward(g, s, x[0])?;
                project(g, y, 4)
            };
            run(&obj, &mut store, &[random_tensor(&[1, 8, 8, 4], 1.0, 5)], defaults, v)?
        }
        Block::EdgeAttention => {
            let ea = EdgeAttention::new(&mut store, &mut rng, "ea", 3);
            store.set(ea.beta, Tensor::new(&[1], vec![0.4])?)?;
            // Module forward (projections, map, residual mix, edge head) plus
            // the bare map/apply pair on independent inputs.
            let obj = |g: &mut Graph<f64>, s: &ParamStore<f64>, x: &[Var]| {
                let (o, e) = ea.forward(g, s, x[0])?;
                let m = attention_map(g, x[1], x[2])?;
                let beta = g.constant(Tensor::scalar(0.7));
                let a = apply_attention(g, x[0], x[3], m, beta)?;
                let parts = [project(g, o, 6)?, project(g, e, 7)?, project(g, a, 8)?];
                let sum = g.add(parts[0], parts[1])?;
                g.add(sum, parts[2])
            };
            let inputs: Vec<Tensor<f64>> = (0..4).map(|k| random_tensor(&[1, 4, 4, 3], 1.0, 9 + k)).collect();
            run(&obj, &mut store, &inputs, defaults, v)?
        }
        Block::RfbRefine => {
            let r = RfbRefine::new(&mut store, &mut rng, "rfb", 3, 4);
            let obj = |g: &mut Graph<f64>, s: &ParamStore<f64>, x: &[Var]| {
                let y = r.forward(g, s, x[0])?;
                project(g, y, 13)
            };
            run(&obj, &mut store, &[random_tensor(&[2, 4, 4, 3], 1.0, 14)], defaults, v)?
        }
        Block::Ppd => {
            let ppd = PartialDecoder::new(&mut store, &mut rng, "ppd", [4, 4, 6, 8], 3);
            let obj = |g: &mut Graph<f64>, s: &ParamStore<f64>, x: &[Var]| {
                let y = ppd.forward(g, s, [x[0], x[1], x[2], x[3]], (16, 16))?;
                project(g, y, 15)
            };
            let inputs = [
                random_tensor(&[2, 8, 8, 4], 1.0, 16),
                random_tensor(&[2, 8, 8, 4], 1.0, 17),
                random_tensor(&[2, 4, 4, 6], 1.0, 18),
                random_tensor(&[2, 2, 2, 8], 1.0, 19),
            ];
            run(&obj, &mut store, &inputs, GradCheckOptions { max_per_tensor: 16, ..defaults }, v)?
        }
        Block::EdgeBce | Block::WeightedBce | Block::WeightedIou | Block::TotalLoss => {
            let shape = [2, 8, 8, 1];
            let mask = binary(&shape, 20);
            let edge = binary(&shape, 21);
            let obj = |g: &mut Graph<f64>, _: &ParamStore<f64>, x: &[Var]| match block {
                Block::EdgeBce => edge_bce(g, x[0], &edge, &loss_cfg),
                Block::WeightedBce => weighted_bce(g, x[0], &mask, 4.0, &loss_cfg),
                Block::WeightedIou => weighted_iou(g, x[0], &mask, &loss_cfg),
                _ => total_loss(g, x[0], &mask, Some((x[1], &edge)), &loss_cfg).map(|r| r.0),
            };
            let inputs = [probs(&shape, 22), probs(&shape, 23)];
            if v.corrupt {
                return Err(Error::Config(format!("fault injection needs a block with parameters, {block} has none")));
            }
            run(&obj, &mut store, &inputs, defaults, v)?
        }
        Block::Model => {
            let cfg = ModelConfig {
                channels: vec![4, 6, 8],
                context_depth: 3,
                se_ratio: 2,
                ppd_width: 4,
                variant: Variant::Dfenet,
                seed: v.seed,
            };
            let mut model = Model::<f64>::build(&cfg)?;
            let beta = model.store.find("attention.beta").ok_or_else(|| Error::Config("model has no attention".into()))?;
            model.store.set(beta, Tensor::new(&[1], vec![0.5])?)?;
            let context = random_tensor(&[2, 16, 16, 3, 1], 1.0, 24);
            let image = Tensor::from_fn(&[2, 16, 16, 1], |i| context.data()[i * 3 + 1]);
            let input = ModelInput { image, context };
            let mask = binary(&[2, 16, 16, 1], 25);
            let edge = binary(&[2, 8, 8, 1], 26);
            let obj = |g: &mut Graph<f64>, s: &ParamStore<f64>, _: &[Var]| {
                let out = model.forward_with(g, s, &input)?;
                let e = out.edge.expect("dfenet predicts edges");
                total_loss(g, out.seg, &mask, Some((e, &edge)), &loss_cfg).map(|r| r.0)
            };
            let mut store = model.store.clone();
            run(&obj, &mut store, &[], GradCheckOptions { max_per_tensor: 3, ..defaults }, v)?
        }
    };
    Ok(BlockCheck {
        block,
        max_rel_error: report.max_rel_error,
        tolerance: block.tolerance(),
        checked: report.checked,
        worst: report.worst,
        seconds: started.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_block_passes() {
        for b in Block::ALL {
            let r = grad_check(b, &VerifyOptions::default()).unwrap();
            assert!(r.passed(), "{r:?}");
            assert!(r.checked > 0);
        }
    }

    #[test]
    fn corrupted_gradient_is_detected() {
        let v = VerifyOptions { corrupt: true, ..Default::default() };
        let r = grad_check(Block::SqueezeExcite, &v).unwrap();
        assert!(r.max_rel_error > 1e-2, "{r:?}");
        assert!(grad_check(Block::EdgeBce, &v).is_err());
    }

    #[test]
    fn block_names_parse() {
        assert_eq!(Block::parse_list("all").unwrap().len(), 10);
        assert_eq!(Block::parse_list("ppd, model").unwrap(), vec![Block::Ppd, Block::Model]);
        assert!(Block::parse_list("unet").is_err());
    }
}
