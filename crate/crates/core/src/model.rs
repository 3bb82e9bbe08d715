//! Network assembly: the full dimension-fusion edge network and the five
//! reduced variants used for ablation.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::attention::EdgeAttention;
use crate::autograd::{Graph, Var};
use crate::decoder::{PartialDecoder, DEFAULT_UNIFY_WIDTH};
use crate::error::{Error, Result};
use crate::fusion::DimensionTransfer;
use crate::kv::{self, KvMap};
use crate::nn::{Conv, DoubleConv, InitRng, UpConv};
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};

/// Network topology, in ablation-table order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Unet2d,
    Unet3d,
    FusionOnly,
    FusionPpd,
    FusionEa,
    Dfenet,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Unet2d,
        Variant::Unet3d,
        Variant::FusionOnly,
        Variant::FusionPpd,
        Variant::FusionEa,
        Variant::Dfenet,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Unet2d => "unet2d",
            Variant::Unet3d => "unet3d",
            Variant::FusionOnly => "fusion_only",
            Variant::FusionPpd => "fusion_ppd",
            Variant::FusionEa => "fusion_ea",
            Variant::Dfenet => "dfenet",
        }
    }

    /// Row label of the ablation report.
    pub fn label(self) -> &'static str {
        match self {
            Variant::Unet2d => "2D UNet (base model)",
            Variant::Unet3d => "3D UNet",
            Variant::FusionOnly => "2D+3D UNet",
            Variant::FusionPpd => "2D+3D UNet+PPD",
            Variant::FusionEa => "2D+3D UNet+EA",
            Variant::Dfenet => "2D+3D UNet+EA+PPD",
        }
    }

    pub fn fused(self) -> bool {
        !matches!(self, Variant::Unet2d | Variant::Unet3d)
    }

    pub fn has_attention(self) -> bool {
        matches!(self, Variant::FusionEa | Variant::Dfenet)
    }

    pub fn has_partial_decoder(self) -> bool {
        matches!(self, Variant::FusionPpd | Variant::Dfenet)
    }

    /// Whether the network consumes the 3D context window.
    pub fn uses_context(self) -> bool {
        self != Variant::Unet2d
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = Variant::ALL.iter().map(|v| v.name()).collect();
                Error::Config(format!("unknown variant `{s}` (expected one of {})", names.join(", ")))
            })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Width of each encoder stage; every stage but the last is followed by
    /// 2x2 pooling.
    pub channels: Vec<usize>,
    /// Slices in the 3D context window (odd).
    pub context_depth: usize,
    pub se_ratio: usize,
    pub ppd_width: usize,
    pub variant: Variant,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: vec![16, 32, 64, 128],
            context_depth: 5,
            se_ratio: 16,
            ppd_width: DEFAULT_UNIFY_WIDTH,
            variant: Variant::Dfenet,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Paper-scale estimate on the five-stage baseline schedule; the exact
    /// schedule is not published.
    pub fn paper_scale(variant: Variant) -> Self {
        Self { channels: vec![32, 64, 128, 256, 512], variant, ..Self::default() }
    }

    pub fn with_variant(&self, variant: Variant) -> Self {
        Self { variant, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.channels.len() < 3 {
            return bad(format!("need at least 3 encoder stages, got {:?}", self.channels));
        }
        if self.channels.contains(&0) {
            return bad("stage widths must be positive".into());
        }
        if self.context_depth == 0 || self.context_depth % 2 == 0 {
            return bad(format!("context depth must be odd and positive, got {}", self.context_depth));
        }
        if self.se_ratio == 0 {
            return bad("SE ratio must be at least 1".into());
        }
        if self.ppd_width == 0 {
            return bad("partial decoder width must be positive".into());
        }
        Ok(())
    }

    /// Input height and width must be multiples of this.
    pub fn size_multiple(&self) -> usize {
        1 << (self.channels.len() - 1)
    }

    pub fn to_kv(&self) -> Vec<(String, String)> {
        vec![
            ("variant".into(), self.variant.to_string()),
            ("channels".into(), kv::join_usize_list(&self.channels)),
            ("context_depth".into(), self.context_depth.to_string()),
            ("se_ratio".into(), self.se_ratio.to_string()),
            ("ppd_width".into(), self.ppd_width.to_string()),
            ("seed".into(), self.seed.to_string()),
        ]
    }

    /// Consumes the model keys of `map`, starting from defaults.
    pub fn take_from_kv(map: &mut KvMap) -> Result<Self> {
        let mut cfg = Self::default();
        if let Some(v) = kv::take(map, "variant")? {
            cfg.variant = v;
        }
        if let Some(v) = map.remove("channels") {
            cfg.channels = kv::parse_usize_list(&v)?;
        }
        if let Some(v) = kv::take(map, "context_depth")? {
            cfg.context_depth = v;
        }
        if let Some(v) = kv::take(map, "se_ratio")? {
            cfg.se_ratio = v;
        }
        if let Some(v) = kv::take(map, "ppd_width")? {
            cfg.ppd_width = v;
        }
        if let Some(v) = kv::take(map, "seed")? {
            cfg.seed = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_kv_text(text: &str) -> Result<Self> {
        let mut map = kv::parse(text)?;
        let cfg = Self::take_from_kv(&mut map)?;
        kv::reject_unknown(&map)?;
        Ok(cfg)
    }
}

/// Network inputs: the target slice `[N, H, W, 1]` and its context window
/// `[N, H, W, D, 1]` (ignored by the 2D baseline).
#[derive(Clone, Debug)]
pub struct ModelInput<E> {
    pub image: Tensor<E>,
    pub context: Tensor<E>,
}

/// Tape handles of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    /// `[N, H, W, 1]` in (0, 1).
    pub seg: Var,
    /// `[N, H/2, W/2, 1]` in (0, 1), attention variants only.
    pub edge: Option<Var>,
    pub o_ea: Option<Var>,
}

/// Concrete outputs of an inference pass.
#[derive(Clone, Debug)]
pub struct ModelOutput<E> {
    pub seg_map: Tensor<E>,
    pub edge_pred: Option<Tensor<E>>,
    pub o_ea: Option<Tensor<E>>,
}

#[derive(Clone, Debug)]
struct UnetDecoder {
    ups: Vec<UpConv>,
    blocks: Vec<DoubleConv>,
    head: Conv,
}

impl UnetDecoder {
    /// `extra[s]`: additional skip channels concatenated at level `s`.
    fn new<E: Scalar>(
        store: &mut ParamStore<E>,
        rng: &mut InitRng,
        channels: &[usize],
        kernel: &[usize],
        extra: &[usize],
    ) -> Self {
        let levels = channels.len() - 1;
        let mut ups = Vec::with_capacity(levels);
        let mut blocks = Vec::with_capacity(levels);
        for s in (0..levels).rev() {
            let c = channels[s];
            ups.push(UpConv::new(store, rng, &format!("dec.up{s}"), channels[s + 1], c));
            blocks.push(DoubleConv::new(store, rng, &format!("dec.block{s}"), kernel, 2 * c + extra[s], c));
        }
        let head_kernel = vec![1; kernel.len()];
        let head = Conv::new(store, rng, "dec.head", &head_kernel, channels[0], 1, true);
        Self { ups, blocks, head }
    }

    /// `skips[s]`: encoder stage outputs (plus extras) at level `s`.
    fn forward<E: Scalar>(&self, g: &mut Graph<E>, store: &ParamStore<E>, deepest: Var, skips: &[Vec<Var>]) -> Result<Var> {
        let levels = skips.len() - 1;
        let mut h = deepest;
        for (i, (up, block)) in self.ups.iter().zip(&self.blocks).enumerate() {
            let s = levels - 1 - i;
            let u = up.forward(g, store, h)?;
            let mut parts = vec![u];
            parts.extend(&skips[s]);
            let cat = g.concat_channels(&parts)?;
            h = block.forward(g, store, cat)?;
        }
        self.head.forward(g, store, h)
    }
}

#[derive(Clone, Debug)]
struct Layers {
    enc2d: Vec<DoubleConv>,
    enc3d: Vec<DoubleConv>,
    transfers: Vec<DimensionTransfer>,
    attention: Option<EdgeAttention>,
    ppd: Option<PartialDecoder>,
    decoder: Option<UnetDecoder>,
}

/// A built network: configuration, layer wiring and parameter storage.
#[derive(Clone, Debug)]
pub struct Model<E: Scalar> {
    config: ModelConfig,
    layers: Layers,
    pub store: ParamStore<E>,
}

impl<E: Scalar> Model<E> {
    pub fn build(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = InitRng::seed_from_u64(config.seed);
        let ch = &config.channels;
        let v = config.variant;
        let (k2, k3) = ([3, 3], [3, 3, 3]);

        let mut enc2d = Vec::new();
        let mut enc3d = Vec::new();
        let mut transfers = Vec::new();
        if v == Variant::Unet3d {
            let mut cin = 1;
            for (s, &c) in ch.iter().enumerate() {
                enc3d.push(DoubleConv::new(&mut store, &mut rng, &format!("enc3d.{s}"), &k3, cin, c));
                cin = c;
            }
        } else {
            let mut cin = 1;
            for (s, &c) in ch.iter().enumerate() {
                enc2d.push(DoubleConv::new(&mut store, &mut rng, &format!("enc2d.{s}"), &k2, cin, c));
                cin = c;
            }
        }
        if v.fused() {
            let mut cin = 1;
            for (s, &c) in ch.iter().take(2).enumerate() {
                enc3d.push(DoubleConv::new(&mut store, &mut rng, &format!("enc3d.{s}"), &k3, cin, c));
                transfers.push(DimensionTransfer::new(
                    &mut store,
                    &mut rng,
                    &format!("transfer.{s}"),
                    c,
                    c,
                    config.context_depth,
                    config.se_ratio,
                )?);
                cin = c;
            }
        }
        let attention = v
            .has_attention()
            .then(|| EdgeAttention::new(&mut store, &mut rng, "attention", ch[0]));
        let ppd = v.has_partial_decoder().then(|| {
            let last = *ch.last().expect("validated");
            PartialDecoder::new(&mut store, &mut rng, "ppd", [ch[0], ch[0], ch[1], last], config.ppd_width)
        });
        let decoder = (!v.has_partial_decoder()).then(|| {
            let mut extra = vec![0; ch.len()];
            if v.has_attention() {
                extra[1] = ch[0];
            }
            let kernel: &[usize] = if v == Variant::Unet3d { &k3 } else { &k2 };
            UnetDecoder::new(&mut store, &mut rng, ch, kernel, &extra)
        });
        Ok(Self {
            config: config.clone(),
            layers: Layers { enc2d, enc3d, transfers, attention, ppd, decoder },
            store,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn count_parameters(&self) -> usize {
        self.store.count_trainable()
    }

    pub fn dimension_transfer_count(&self) -> usize {
        self.layers.transfers.len()
    }

    pub fn has_attention(&self) -> bool {
        self.layers.attention.is_some()
    }

    pub fn has_partial_decoder(&self) -> bool {
        self.layers.ppd.is_some()
    }

    /// Same wiring with parameters converted to another precision.
    pub fn cast<F: Scalar>(&self) -> Model<F> {
        Model { config: self.config.clone(), layers: self.layers.clone(), store: self.store.cast() }
    }

    pub fn check_input(&self, input: &ModelInput<E>) -> Result<()> {
        let s = input.image.shape();
        if s.len() != 4 || s[3] != 1 {
            return Err(Error::Shape(format!("image must be [N, H, W, 1], got {s:?}")));
        }
        let m = self.config.size_multiple();
        if s[1] % m != 0 || s[2] % m != 0 || s[1] == 0 || s[2] == 0 {
            return Err(Error::Shape(format!("image size {}x{} must be a positive multiple of {m}", s[1], s[2])));
        }
        if self.config.variant.uses_context() {
            let c = input.context.shape();
            let want = [s[0], s[1], s[2], self.config.context_depth, 1];
            if c != want {
                return Err(Error::Shape(format!("context {c:?}, expected {want:?}")));
            }
        }
        Ok(())
    }

    pub fn forward(&self, g: &mut Graph<E>, input: &ModelInput<E>) -> Result<ForwardVars> {
        self.forward_with(g, &self.store, input)
    }

    /// Forward pass reading parameters from `store`, which must have this
    /// model's layout (e.g. a perturbed copy for finite differences).
    pub fn forward_with(&self, g: &mut Graph<E>, store: &ParamStore<E>, input: &ModelInput<E>) -> Result<ForwardVars> {
        self.check_input(input)?;
        if store.len() != self.store.len() {
            return Err(Error::Shape(format!("store has {} tensors, model {}", store.len(), self.store.len())));
        }
        let (h0, w0) = (input.image.dim(1), input.image.dim(2));
        if self.config.variant == Variant::Unet3d {
            return self.forward_3d(g, store, input);
        }
        let l = &self.layers;
        let stages = l.enc2d.len();
        let mut x = g.constant(input.image.clone());
        let mut x3 = if self.config.variant.fused() { Some(g.constant(input.context.clone())) } else { None };
        let mut skips: Vec<Vec<Var>> = Vec::with_capacity(stages);
        let mut fused = Vec::new();
        let mut o_ea = None;
        let mut edge = None;
        for s in 0..stages {
            let h = l.enc2d[s].forward(g, store, x)?;
            skips.push(vec![h]);
            if s + 1 == stages {
                x = h;
                break;
            }
            x = g.max_pool2x(h)?;
            if s == 0 {
                if let Some(ea) = &l.attention {
                    let (o, e) = ea.forward(g, store, x)?;
                    o_ea = Some(o);
                    edge = Some(e);
                }
            }
            if let (Some(t), Some(h3)) = (l.transfers.get(s), x3) {
                let f3 = l.enc3d[s].forward(g, store, h3)?;
                let f3 = g.max_pool2x(f3)?;
                x3 = Some(f3);
                x = t.forward(g, store, x, f3)?;
                fused.push(x);
            }
        }
        let seg = if let Some(ppd) = &l.ppd {
            let finest = o_ea.unwrap_or(fused[0]);
            ppd.forward(g, store, [finest, fused[0], fused[1], x], (h0, w0))?
        } else {
            if let Some(o) = o_ea {
                skips[1].push(o);
            }
            let decoder = l.decoder.as_ref().expect("decoder exists without partial decoder");
            let logits = decoder.forward(g, store, x, &skips)?;
            g.sigmoid(logits)
        };
        Ok(ForwardVars { seg, edge, o_ea })
    }

    fn forward_3d(&self, g: &mut Graph<E>, store: &ParamStore<E>, input: &ModelInput<E>) -> Result<ForwardVars> {
        let l = &self.layers;
        let stages = l.enc3d.len();
        let mut x = g.constant(input.context.clone());
        let mut skips = Vec::with_capacity(stages);
        for s in 0..stages {
            let h = l.enc3d[s].forward(g, store, x)?;
            skips.push(vec![h]);
            x = if s + 1 == stages { h } else { g.max_pool2x(h)? };
        }
        let decoder = l.decoder.as_ref().expect("3D variant has a decoder");
        let logits = decoder.forward(g, store, x, &skips)?;
        let center = g.select_depth(logits, self.config.context_depth / 2)?;
        Ok(ForwardVars { seg: g.sigmoid(center), edge: None, o_ea: None })
    }

    /// Inference with running batchnorm statistics.
    pub fn predict(&self, input: &ModelInput<E>) -> Result<ModelOutput<E>> {
        let mut g = Graph::eval();
        let out = self.forward(&mut g, input)?;
        Ok(ModelOutput {
            seg_map: g.value(out.seg).clone(),
            edge_pred: out.edge.map(|v| g.value(v).clone()),
            o_ea: out.o_ea.map(|v| g.value(v).clone()),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::random_tensor;

    fn cfg(variant: Variant) -> ModelConfig {
        ModelConfig { channels: vec![4, 6, 8], context_depth: 3, se_ratio: 2, ppd_width: 4, variant, seed: 5 }
    }

    fn input(n: usize, size: usize, depth: usize, seed: u64) -> ModelInput<f64> {
        let context = random_tensor(&[n, size, size, depth, 1], 1.0, seed);
        let image = Tensor::from_fn(&[n, size, size, 1], |i| context.data()[i * depth + depth / 2]);
        ModelInput { image, context }
    }

    #[test]
    fn variant_names_round_trip_in_table_order() {
        let names: Vec<&str> = Variant::ALL.iter().map(|v| v.name()).collect();
        assert_eq!(names, ["unet2d", "unet3d", "fusion_only", "fusion_ppd", "fusion_ea", "dfenet"]);
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert!("unet".parse::<Variant>().is_err());
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig { channels: vec![4, 8], ..cfg(Variant::Dfenet) }.validate().is_err());
        assert!(ModelConfig { context_depth: 4, ..cfg(Variant::Dfenet) }.validate().is_err());
        assert!(ModelConfig { se_ratio: 0, ..cfg(Variant::Dfenet) }.validate().is_err());
        assert!(ModelConfig::default().validate().is_ok());
    }

    #[test]
    fn config_kv_round_trip_and_unknown_keys() {
        let c = cfg(Variant::FusionEa);
        let text = kv::format(&c.to_kv());
        assert_eq!(ModelConfig::from_kv_text(&text).unwrap(), c);
        assert!(ModelConfig::from_kv_text("variant = dfenet\nfoo = 1").is_err());
        assert!(ModelConfig::from_kv_text("variant = resnet").is_err());
    }

    #[test]
    fn topology_per_variant() {
        let full = Model::<f32>::build(&ModelConfig::default()).unwrap();
        assert_eq!(full.dimension_transfer_count(), 2);
        assert!(full.has_attention() && full.has_partial_decoder());
        for (v, dt, ea, ppd) in [
            (Variant::Unet2d, 0, false, false),
            (Variant::Unet3d, 0, false, false),
            (Variant::FusionOnly, 2, false, false),
            (Variant::FusionPpd, 2, false, true),
            (Variant::FusionEa, 2, true, false),
        ] {
            let m = Model::<f32>::build(&cfg(v)).unwrap();
            assert_eq!((m.dimension_transfer_count(), m.has_attention(), m.has_partial_decoder()), (dt, ea, ppd), "{v}");
        }
        let unet = Model::<f32>::build(&cfg(Variant::Unet2d)).unwrap();
        assert!(unet.store.ids().all(|id| !unet.store.name(id).starts_with("enc3d")));
    }

    #[test]
    fn fusion_sits_in_first_two_stages_and_attention_reads_stage_one() {
        let m = Model::<f64>::build(&cfg(Variant::Dfenet)).unwrap();
        let names: Vec<&str> = m.store.ids().map(|id| m.store.name(id)).collect();
        assert!(names.iter().any(|n| n.starts_with("transfer.0.")));
        assert!(names.iter().any(|n| n.starts_with("transfer.1.")));
        assert!(!names.iter().any(|n| n.starts_with("transfer.2")));
        let ea_in = m.store.get(m.store.find("attention.proj_b.weight").unwrap()).shape()[2];
        assert_eq!(ea_in, m.config().channels[0]);
    }

    #[test]
    fn seeded_build_is_bit_identical() {
        let a = Model::<f32>::build(&cfg(Variant::Dfenet)).unwrap();
        let b = Model::<f32>::build(&cfg(Variant::Dfenet)).unwrap();
        assert!(a.store.bit_equal(&b.store));
        let c = Model::<f32>::build(&ModelConfig { seed: 6, ..cfg(Variant::Dfenet) }).unwrap();
        assert!(!a.store.bit_equal(&c.store));
    }

    #[test]
    fn output_shapes_for_every_variant() {
        for v in Variant::ALL {
            let m = Model::<f64>::build(&cfg(v)).unwrap();
            let out = m.predict(&input(2, 8, 3, 1)).unwrap();
            assert_eq!(out.seg_map.shape(), &[2, 8, 8, 1], "{v}");
            assert!(out.seg_map.data().iter().all(|&p| p > 0.0 && p < 1.0));
            match out.edge_pred {
                Some(e) => {
                    assert!(v.has_attention());
                    assert_eq!(e.shape(), &[2, 4, 4, 1]);
                }
                None => assert!(!v.has_attention()),
            }
        }
    }

    #[test]
    fn default_model_at_paper_resolution() {
        let m = Model::<f32>::build(&ModelConfig::default()).unwrap();
        let x = input(1, 192, 5, 2);
        let x = ModelInput { image: x.image.cast(), context: x.context.cast() };
        let out = m.predict(&x).unwrap();
        assert_eq!(out.seg_map.shape(), &[1, 192, 192, 1]);
        assert_eq!(out.edge_pred.unwrap().shape(), &[1, 96, 96, 1]);
    }

    #[test]
    fn context_depth_mismatch_is_rejected() {
        let m = Model::<f64>::build(&cfg(Variant::Dfenet)).unwrap();
        assert!(m.predict(&input(1, 8, 5, 1)).is_err());
        assert!(m.predict(&input(1, 6, 3, 1)).is_err());
    }

    #[test]
    fn identical_rows_give_identical_outputs() {
        let m = Model::<f64>::build(&cfg(Variant::Dfenet)).unwrap();
        let one = input(1, 8, 3, 9);
        let two = ModelInput {
            image: Tensor::from_fn(&[2, 8, 8, 1], |i| one.image.data()[i % 64]),
            context: Tensor::from_fn(&[2, 8, 8, 3, 1], |i| one.context.data()[i % 192]),
        };
        let out = m.predict(&two).unwrap().seg_map;
        assert_eq!(out.data()[..64], out.data()[64..]);
    }

    #[test]
    fn each_added_component_adds_parameters() {
        let base = ModelConfig::default();
        let count = |v| Model::<f32>::build(&base.with_variant(v)).unwrap().count_parameters();
        assert!(count(Variant::Unet2d) < count(Variant::FusionOnly));
        assert!(count(Variant::FusionOnly) < count(Variant::FusionEa));
        assert!(count(Variant::FusionPpd) < count(Variant::Dfenet));
    }

    #[test]
    fn unet2d_parameter_count_by_hand() {
        // channels [2, 3, 4]
        let m = Model::<f32>::build(&ModelConfig { channels: vec![2, 3, 4], variant: Variant::Unet2d, ..Default::default() })
            .unwrap();
        let dc = |cin: usize, c: usize| 9 * cin * c + 2 * c + 9 * c * c + 2 * c;
        let enc = dc(1, 2) + dc(2, 3) + dc(3, 4);
        let up = |cin: usize, c: usize| 4 * cin * c + c;
        let dec = up(4, 3) + dc(6, 3) + up(3, 2) + dc(4, 2) + 2 + 1;
        assert_eq!(m.count_parameters(), enc + dec);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(100))]

            #[test]
            fn outputs_are_finite_probabilities(seed in 0u64..1_000_000) {
                let m = Model::<f64>::build(&ModelConfig { seed, ..cfg(Variant::Dfenet) }).unwrap();
                let out = m.predict(&input(1, 8, 3, seed)).unwrap();
                prop_assert!(out.seg_map.data().iter().all(|&p| p.is_finite() && p > 0.0 && p < 1.0));
                let e = out.edge_pred.unwrap();
                prop_assert!(e.data().iter().all(|&p| p.is_finite() && p > 0.0 && p < 1.0));
            }
        }
    }
}
