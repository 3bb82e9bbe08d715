//! 2D/3D dimension transfer: compresses a 3D feature branch to one channel,
//! projects its depth axis onto the 2D channel axis and merges both branches
//! through independent squeeze-and-excitation gates.

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{Conv, InitRng, Linear};
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};

/// Validated `[N, H, W, C]` feature map.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap2D<E>(Tensor<E>);

/// Validated `[N, H, W, D, C]` feature map.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap3D<E>(Tensor<E>);

fn validate<E: Scalar>(t: &Tensor<E>, rank: usize, what: &str) -> Result<()> {
    if t.rank() != rank || t.shape().contains(&0) {
        return Err(Error::Shape(format!("{what} needs {rank} nonzero dims, got {:?}", t.shape())));
    }
    if !t.all_finite() {
        return Err(Error::Data(format!("{what} contains non-finite values")));
    }
    Ok(())
}

impl<E: Scalar> FeatureMap2D<E> {
    pub fn new(t: Tensor<E>) -> Result<Self> {
        validate(&t, 4, "2D feature map")?;
        Ok(Self(t))
    }

    pub fn tensor(&self) -> &Tensor<E> {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor<E> {
        self.0
    }

    /// `(N, H, W, C)`
    pub fn dims(&self) -> (usize, usize, usize, usize) {
        let s = self.0.shape();
        (s[0], s[1], s[2], s[3])
    }
}

impl<E: Scalar> FeatureMap3D<E> {
    pub fn new(t: Tensor<E>) -> Result<Self> {
        validate(&t, 5, "3D feature map")?;
        Ok(Self(t))
    }

    pub fn tensor(&self) -> &Tensor<E> {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor<E> {
        self.0
    }

    /// `(N, H, W, D, C)`
    pub fn dims(&self) -> (usize, usize, usize, usize, usize) {
        let s = self.0.shape();
        (s[0], s[1], s[2], s[3], s[4])
    }
}

/// Width of the SE bottleneck: `max(1, floor(c / r))`.
pub fn bottleneck_width(channels: usize, ratio: usize) -> usize {
    (channels / ratio.max(1)).max(1)
}

/// Channel gate `x * sigmoid(W2 relu(W1 mean_hw(x)))`.
#[derive(Clone, Debug)]
pub struct SqueezeExcite {
    pub fc1: Linear,
    pub fc2: Linear,
    pub channels: usize,
    pub bottleneck: usize,
}

impl SqueezeExcite {
    pub fn new<E: Scalar>(store: &mut ParamStore<E>, rng: &mut InitRng, name: &str, channels: usize, ratio: usize) -> Result<Self> {
        if ratio == 0 {
            return Err(Error::Config("SE reduction ratio must be at least 1".into()));
        }
        let bottleneck = bottleneck_width(channels, ratio);
        Ok(Self {
            fc1: Linear::new(store, rng, &format!("{name}.fc1"), channels, bottleneck),
            fc2: Linear::new(store, rng, &format!("{name}.fc2"), bottleneck, channels),
            channels,
            bottleneck,
        })
    }

    /// Per-sample gates `[N, C]`, each strictly inside (0, 1).
    pub fn gates<E: Scalar>(&self, g: &mut Graph<E>, store: &ParamStore<E>, x: Var) -> Result<Var> {
        let c = *g.shape(x).last().unwrap_or(&0);
        if g.shape(x).len() != 4 || c != self.channels {
            return Err(Error::Shape(format!("SE over {} channels got {:?}", self.channels, g.shape(x))));
        }
        let squeezed = g.mean_spatial(x);
        let hidden = self.fc1.forward(g, store, squeezed)?;
        let hidden = g.relu(hidden);
        let logits = self.fc2.forward(g, store, hidden)?;
        Ok(g.sigmoid(logits))
    }

    pub fn forward<E: Scalar>(&self, g: &mut Graph<E>, store: &ParamStore<E>, x: Var) -> Result<Var> {
        let gate = self.gates(g, store, x)?;
        g.scale_channels(x, gate)
    }
}

/// Fuses a 3D branch into a 2D branch of equal batch and spatial size.
#[derive(Clone, Debug)]
pub struct DimensionTransfer {
    /// 1x1x1 convolution, C3 -> 1.
    pub reduce: Conv,
    /// 3x3 convolution, D -> C.
    pub project: Conv,
    pub se2d: SqueezeExcite,
    pub se3d: SqueezeExcite,
    pub depth: usize,
}

impl DimensionTransfer {
    /// `c3`: channels of the 3D branch; `c2`: channels of the 2D branch and
    /// of the output; `depth`: depth of the 3D branch.
    pub fn new<E: Scalar>(
        store: &mut ParamStore<E>,
        rng: &mut InitRng,
        name: &str,
        c3: usize,
        c2: usize,
        depth: usize,
        ratio: usize,
    ) -> Result<Self> {
        Ok(Self {
            reduce: Conv::new(store, rng, &format!("{name}.reduce"), &[1, 1, 1], c3, 1, true),
            project: Conv::new(store, rng, &format!("{name}.project"), &[3, 3], depth, c2, true),
            se2d: SqueezeExcite::new(store, rng, &format!("{name}.se2d"), c2, ratio)?,
            se3d: SqueezeExcite::new(store, rng, &format!("{name}.se3d"), c2, ratio)?,
            depth,
        })
    }

    /// `[N, H, W, D, C] -> [N, H, W, D, 1]`.
    pub fn reduce_3d_channels<E: Scalar>(&self, g: &mut Graph<E>, store: &ParamStore<E>, f3d: Var) -> Result<Var> {
        if g.shape(f3d).len() != 5 {
            return Err(Error::Shape(format!("3D branch must be rank 5, got {:?}", g.shape(f3d))));
        }
        self.reduce.forward(g, store, f3d)
    }

    /// `[N, H, W, D] -> [N, H, W, C]`; the squeezed depth axis acts as the
    /// input channel axis of a 3x3 convolution.
    pub fn depth_to_channels<E: Scalar>(&self, g: &mut Graph<E>, store: &ParamStore<E>, f: Var) -> Result<Var> {
        let s = g.shape(f);
        if s.len() != 4 || s[3] != self.depth {
            return Err(Error::Shape(format!("expected [N, H, W, {}], got {s:?}", self.depth)));
        }
        self.project.forward(g, store, f)
    }

    /// `se3d(project(squeeze(reduce(f3d)))) + se2d(f2d)`.
    pub fn forward<E: Scalar>(&self, g: &mut Graph<E>, store: &ParamStore<E>, f2d: Var, f3d: Var) -> Result<Var> {
        let (s2, s3) = (g.shape(f2d).to_vec(), g.shape(f3d).to_vec());
        if s2.len() != 4 || s3.len() != 5 || s2[..3] != s3[..3] {
            return Err(Error::Shape(format!("dimension transfer branches {s2:?} and {s3:?} disagree")));
        }
        let reduced = self.reduce_3d_channels(g, store, f3d)?;
        let squeezed = g.reshape(reduced, &s3[..4])?;
        let projected = self.depth_to_channels(g, store, squeezed)?;
        let from3d = self.se3d.forward(g, store, projected)?;
        let from2d = self.se2d.forward(g, store, f2d)?;
        g.add(from3d, from2d)
    }

    /// Inference-mode evaluation on concrete feature maps.
    pub fn apply<E: Scalar>(&self, store: &ParamStore<E>, f2d: &FeatureMap2D<E>, f3d: &FeatureMap3D<E>) -> Result<FeatureMap2D<E>> {
        let mut g = Graph::eval();
        let a = g.constant(f2d.tensor().clone());
        let b = g.constant(f3d.tensor().clone());
        let out = self.forward(&mut g, store, a, b)?;
        FeatureMap2D::new(g.value(out).clone())
    }
}
