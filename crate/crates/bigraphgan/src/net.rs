//! Full model assembly: encoders, the T-stage graph generator with image and
//! attention decoders, the appearance/shape discriminators, the joint
//! objective, and the one-step adversarial trainer.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::{aif_fuse, BgrBranch, IaBlock, PartIaBlock, PbgrBlock};
use crate::data::{decompose_subposes, joints_to_heatmap, to_model_range, SamplePair, JOINT_COUNT};
use crate::error::{Error, Result};
use crate::nn::{AdamState, Conv2d, ConvTranspose2d, Ctx, InstanceNorm2d, ParamStore};
use crate::tensor::{Scalar, Tensor, Val};

/// Seed of the fixed, non-trainable perceptual feature extractor. The
/// extractor stands in for a pretrained backbone; an external weights file
/// can replace it (see the checkpoint container).
pub const PERCEPTUAL_SEED: u64 = 0xB16_0BA5;

/// Architecture variants: the ablation ladder plus the part-aware model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    /// No graph reasoning; IA stages only.
    #[serde(rename = "b1")]
    B1,
    /// B1 plus the B2A reasoning branch.
    #[serde(rename = "b2")]
    B2,
    /// B1 plus the A2B reasoning branch.
    #[serde(rename = "b3")]
    B3,
    /// Both branches with shared parameters.
    #[serde(rename = "b4")]
    B4,
    /// Both branches, separate parameters.
    #[serde(rename = "b5")]
    B5,
    /// B5 plus attention-based image fusion (the full base model).
    #[serde(rename = "b6")]
    B6,
    /// Part-aware model: per-sub-pose reasoning plus fusion.
    #[serde(rename = "plus-plus")]
    PlusPlus,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::B1 => "b1",
            Variant::B2 => "b2",
            Variant::B3 => "b3",
            Variant::B4 => "b4",
            Variant::B5 => "b5",
            Variant::B6 => "b6",
            Variant::PlusPlus => "plus-plus",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "b1" => Variant::B1,
            "b2" => Variant::B2,
            "b3" => Variant::B3,
            "b4" => Variant::B4,
            "b5" => Variant::B5,
            "b6" => Variant::B6,
            "plus-plus" | "pp" => Variant::PlusPlus,
            other => return Err(Error::Config(format!("unknown variant {other:?}"))),
        })
    }

    /// Whether the variant decodes an attention mask and fuses with the
    /// source image.
    pub fn uses_fusion(self) -> bool {
        matches!(self, Variant::B6 | Variant::PlusPlus)
    }

    pub fn uses_parts(self) -> bool {
        matches!(self, Variant::PlusPlus)
    }

    pub const ALL: [Variant; 7] = [
        Variant::B1,
        Variant::B2,
        Variant::B3,
        Variant::B4,
        Variant::B5,
        Variant::B6,
        Variant::PlusPlus,
    ];
}

/// Architecture hyperparameters. Defaults mirror the published settings
/// (T = 9 stages, C = 128 channels, 18-channel heatmaps); the graph and
/// discriminator extents are desk-scale choices exposed here.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    pub image_h: usize,
    pub image_w: usize,
    /// Number of reasoning stages (T).
    pub t_blocks: usize,
    /// Feature channels of the three code streams (C).
    pub channels: usize,
    /// Graph nodes per reasoning branch (N).
    pub graph_nodes: usize,
    /// Node-feature channels per branch (C').
    pub graph_cprime: usize,
    /// Disk radius of the joint heatmaps, in pixels.
    pub heatmap_radius: f64,
    /// Strided layers per discriminator.
    pub d_layers: usize,
    /// First-layer channel count of the discriminators.
    pub d_base: usize,
    /// Graph nodes per sub-pose branch (part-aware variant).
    pub part_nodes: usize,
    /// Node-feature channels per sub-pose branch.
    pub part_cprime: usize,
    /// Mid-channels of the per-part update convolutions.
    pub part_mid: usize,
    /// Share the 18 sub-pose reasoning/update parameter sets.
    pub share_part_params: bool,
    /// Output channels of the perceptual feature extractor.
    pub perceptual_channels: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            variant: Variant::B6,
            image_h: 64,
            image_w: 64,
            t_blocks: 9,
            channels: 128,
            graph_nodes: 32,
            graph_cprime: 64,
            heatmap_radius: 4.0,
            d_layers: 4,
            d_base: 16,
            part_nodes: 8,
            part_cprime: 16,
            part_mid: 32,
            share_part_params: true,
            perceptual_channels: 64,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.t_blocks == 0 {
            return fail("t_blocks must be >= 1".into());
        }
        if self.channels < 2 || self.channels % 2 != 0 {
            return fail(format!("channels must be even and >= 2, got {}", self.channels));
        }
        if self.image_h < 16 || self.image_w < 16 {
            return fail(format!(
                "image size {}x{} below the 16x16 minimum",
                self.image_h, self.image_w
            ));
        }
        if self.image_h % 4 != 0 || self.image_w % 4 != 0 {
            return fail("image size must be divisible by 4 (two stride-2 encoders)".into());
        }
        let d_div = 1usize << self.d_layers;
        if self.d_layers == 0 || self.image_h % d_div != 0 || self.image_w % d_div != 0 {
            return fail(format!(
                "image size must be divisible by 2^d_layers = {d_div}"
            ));
        }
        if self.graph_nodes == 0 || self.graph_cprime == 0 {
            return fail("graph dimensions must be positive".into());
        }
        if self.heatmap_radius <= 0.0 {
            return fail("heatmap radius must be positive".into());
        }
        if self.d_base == 0 || self.perceptual_channels == 0 {
            return fail("channel counts must be positive".into());
        }
        if self.variant.uses_parts()
            && (self.part_nodes == 0 || self.part_cprime == 0 || self.part_mid == 0)
        {
            return fail("part-aware dimensions must be positive".into());
        }
        Ok(())
    }

    /// Spatial extent of the reasoning stages.
    pub fn feature_hw(&self) -> (usize, usize) {
        (self.image_h / 4, self.image_w / 4)
    }
}

// ---- generator -------------------------------------------------------------

/// Two stride-2 downsampling convolutions with instance norm and relu.
#[derive(Debug, Clone, Copy)]
pub struct Encoder {
    conv1: Conv2d,
    norm1: InstanceNorm2d,
    conv2: Conv2d,
    norm2: InstanceNorm2d,
}

impl Encoder {
    pub fn init<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        c_in: usize,
        c_out: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mid = (c_out / 2).max(1);
        let conv1 = Conv2d::init(store, &format!("{name}.conv1"), c_in, mid, 2, 2, 0, rng)?;
        let norm1 = InstanceNorm2d::init(store, &format!("{name}.norm1"), mid)?;
        let conv2 = Conv2d::init(store, &format!("{name}.conv2"), mid, c_out, 2, 2, 0, rng)?;
        let norm2 = InstanceNorm2d::init(store, &format!("{name}.norm2"), c_out)?;
        Ok(Encoder {
            conv1,
            norm1,
            conv2,
            norm2,
        })
    }

    pub fn forward<S: Scalar>(&self, cx: &mut Ctx<S>, x: Val) -> Result<Val> {
        let y = self.conv1.forward(cx, x)?;
        let y = self.norm1.forward(cx, y)?;
        let y = cx.tape.relu(y);
        let y = self.conv2.forward(cx, y)?;
        let y = self.norm2.forward(cx, y)?;
        Ok(cx.tape.relu(y))
    }
}

/// Mirror of [`Encoder`]: two stride-2 transposed convolutions. The final
/// activation is the caller's (tanh for images, sigmoid for masks).
#[derive(Debug, Clone, Copy)]
pub struct Decoder {
    deconv1: ConvTranspose2d,
    norm1: InstanceNorm2d,
    deconv2: ConvTranspose2d,
}

impl Decoder {
    pub fn init<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        c_in: usize,
        c_out: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mid = (c_in / 2).max(1);
        let deconv1 =
            ConvTranspose2d::init(store, &format!("{name}.deconv1"), c_in, mid, 2, 2, 0, rng)?;
        let norm1 = InstanceNorm2d::init(store, &format!("{name}.norm1"), mid)?;
        let deconv2 =
            ConvTranspose2d::init(store, &format!("{name}.deconv2"), mid, c_out, 2, 2, 0, rng)?;
        Ok(Decoder {
            deconv1,
            norm1,
            deconv2,
        })
    }

    pub fn forward<S: Scalar>(&self, cx: &mut Ctx<S>, x: Val) -> Result<Val> {
        let y = self.deconv1.forward(cx, x)?;
        let y = self.norm1.forward(cx, y)?;
        let y = cx.tape.relu(y);
        self.deconv2.forward(cx, y)
    }
}

/// One reasoning stage: graph reasoning (per variant) plus interaction and
/// aggregation; or the part-aware pair for the plus-plus variant.
#[derive(Debug, Clone)]
pub enum Stage {
    Plain {
        b2a: Option<BgrBranch>,
        a2b: Option<BgrBranch>,
        shared: bool,
        ia: IaBlock,
    },
    Part {
        pbgr: PbgrBlock,
        pia: PartIaBlock,
    },
}

/// All generator parameters. Exactly one shape-encoder parameter set exists
/// regardless of pose count: both pose streams run through it.
#[derive(Debug, Clone)]
pub struct GeneratorParams {
    pub app_enc: Encoder,
    pub shape_enc: Option<Encoder>,
    pub part_enc: Option<Encoder>,
    pub stages: Vec<Stage>,
    pub img_dec: Decoder,
    pub att_dec: Option<Decoder>,
}

impl GeneratorParams {
    pub fn init<S: Scalar>(
        store: &mut ParamStore<S>,
        cfg: &ModelConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.channels;
        let app_enc = Encoder::init(store, "app_enc", 3, c, rng)?;
        let (shape_enc, part_enc) = if cfg.variant.uses_parts() {
            (
                None,
                Some(Encoder::init(store, "part_enc", 2 * JOINT_COUNT, c, rng)?),
            )
        } else {
            (Some(Encoder::init(store, "shape_enc", JOINT_COUNT, c, rng)?), None)
        };
        let mut stages = Vec::with_capacity(cfg.t_blocks);
        for t in 0..cfg.t_blocks {
            let prefix = format!("stage{t:02}");
            let stage = if cfg.variant.uses_parts() {
                let pbgr = PbgrBlock::init(
                    store,
                    &format!("{prefix}.pbgr"),
                    JOINT_COUNT,
                    c / 2,
                    cfg.part_nodes,
                    cfg.part_cprime,
                    cfg.share_part_params,
                    rng,
                )?;
                let pia = PartIaBlock::init(
                    store,
                    &format!("{prefix}.pia"),
                    c,
                    cfg.part_mid,
                    JOINT_COUNT,
                    cfg.share_part_params,
                    rng,
                )?;
                Stage::Part { pbgr, pia }
            } else {
                let (b2a, a2b, shared) = match cfg.variant {
                    Variant::B1 => (None, None, false),
                    Variant::B2 => (
                        Some(BgrBranch::init(
                            store,
                            &format!("{prefix}.bgr.b2a"),
                            c,
                            cfg.graph_nodes,
                            cfg.graph_cprime,
                            rng,
                        )?),
                        None,
                        false,
                    ),
                    Variant::B3 => (
                        None,
                        Some(BgrBranch::init(
                            store,
                            &format!("{prefix}.bgr.a2b"),
                            c,
                            cfg.graph_nodes,
                            cfg.graph_cprime,
                            rng,
                        )?),
                        false,
                    ),
                    Variant::B4 => {
                        let shared_branch = BgrBranch::init(
                            store,
                            &format!("{prefix}.bgr.shared"),
                            c,
                            cfg.graph_nodes,
                            cfg.graph_cprime,
                            rng,
                        )?;
                        (Some(shared_branch), Some(shared_branch), true)
                    }
                    Variant::B5 | Variant::B6 => (
                        Some(BgrBranch::init(
                            store,
                            &format!("{prefix}.bgr.b2a"),
                            c,
                            cfg.graph_nodes,
                            cfg.graph_cprime,
                            rng,
                        )?),
                        Some(BgrBranch::init(
                            store,
                            &format!("{prefix}.bgr.a2b"),
                            c,
                            cfg.graph_nodes,
                            cfg.graph_cprime,
                            rng,
                        )?),
                        false,
                    ),
                    Variant::PlusPlus => unreachable!(),
                };
                let ia = IaBlock::init(store, &format!("{prefix}.ia"), c, rng)?;
                Stage::Plain {
                    b2a,
                    a2b,
                    shared,
                    ia,
                }
            };
            stages.push(stage);
        }
        let img_dec = Decoder::init(store, "img_dec", c, 3, rng)?;
        let att_dec = if cfg.variant.uses_fusion() {
            Some(Decoder::init(store, "att_dec", c, 1, rng)?)
        } else {
            None
        };
        Ok(GeneratorParams {
            app_enc,
            shape_enc,
            part_enc,
            stages,
            img_dec,
            att_dec,
        })
    }
}

/// Tape handles of one generator invocation's inputs.
pub struct GenInputs {
    pub i_a: Val,
    pub p_a: Val,
    pub p_b: Val,
    /// Sub-pose heatmap pairs, present for the part-aware variant.
    pub parts: Option<Vec<(Val, Val)>>,
}

/// Bind one sample's tensors as constant leaves (decomposing sub-poses for
/// the part-aware variant). `i_a` is in `[-1,1]`; heatmaps are binary disks.
pub fn bind_inputs<S: Scalar>(
    cx: &mut Ctx<S>,
    cfg: &ModelConfig,
    i_a: &Tensor<S>,
    p_a: &Tensor<S>,
    p_b: &Tensor<S>,
) -> Result<GenInputs> {
    let parts = if cfg.variant.uses_parts() {
        let subs_a = decompose_subposes(p_a)?;
        let subs_b = decompose_subposes(p_b)?;
        Some(
            subs_a
                .into_iter()
                .zip(subs_b)
                .map(|(a, b)| (cx.tape.constant(a), cx.tape.constant(b)))
                .collect(),
        )
    } else {
        None
    };
    Ok(GenInputs {
        i_a: cx.tape.constant(i_a.clone()),
        p_a: cx.tape.constant(p_a.clone()),
        p_b: cx.tape.constant(p_b.clone()),
        parts,
    })
}

/// Generator outputs: the fused result, the decoded intermediate image, and
/// the attention mask for fusion variants.
pub struct GenOutputs {
    pub result: Val,
    pub intermediate: Val,
    pub attention: Option<Val>,
}

/// Run the generator: encode, T reasoning stages, decode, optionally fuse.
pub fn generator_forward<S: Scalar>(
    cx: &mut Ctx<S>,
    params: &GeneratorParams,
    cfg: &ModelConfig,
    inputs: &GenInputs,
) -> Result<GenOutputs> {
    let si = cx.tape.shape(inputs.i_a).to_vec();
    if si != [3, cfg.image_h, cfg.image_w] {
        return Err(Error::shape(format!(
            "source image shape {si:?} does not match configured {}x{}",
            cfg.image_h, cfg.image_w
        )));
    }
    for p in [inputs.p_a, inputs.p_b] {
        let sp = cx.tape.shape(p);
        if sp != [JOINT_COUNT, cfg.image_h, cfg.image_w] {
            return Err(Error::shape(format!(
                "pose heatmap shape {sp:?} does not match [{JOINT_COUNT},{},{}]",
                cfg.image_h, cfg.image_w
            )));
        }
    }

    let mut f_i = params.app_enc.forward(cx, inputs.i_a)?;

    let out = if cfg.variant.uses_parts() {
        let part_enc = params
            .part_enc
            .as_ref()
            .ok_or_else(|| Error::contract("part-aware config without part encoder"))?;
        let pairs_in = inputs
            .parts
            .as_ref()
            .ok_or_else(|| Error::contract("part-aware forward without sub-pose inputs"))?;
        let half = cfg.channels / 2;
        let mut pairs = Vec::with_capacity(pairs_in.len());
        for &(pa, pb) in pairs_in {
            let joint = cx.tape.concat(&[pa, pb])?;
            let code = part_enc.forward(cx, joint)?;
            let halves = cx.tape.split_channels(code, &[half, half])?;
            pairs.push((halves[0], halves[1]));
        }
        for stage in &params.stages {
            let Stage::Part { pbgr, pia } = stage else {
                return Err(Error::contract("mixed stage kinds in generator"));
            };
            let f_p = pbgr.forward(cx, &pairs)?;
            let (new_i, new_pairs) = pia.forward(cx, f_i, f_p, &pairs)?;
            f_i = new_i;
            pairs = new_pairs;
        }
        f_i
    } else {
        let shape_enc = params
            .shape_enc
            .as_ref()
            .ok_or_else(|| Error::contract("plain config without shape encoder"))?;
        // one parameter set encodes both poses
        let mut f_pa = shape_enc.forward(cx, inputs.p_a)?;
        let mut f_pb = shape_enc.forward(cx, inputs.p_b)?;
        for stage in &params.stages {
            let Stage::Plain { b2a, a2b, ia, .. } = stage else {
                return Err(Error::contract("mixed stage kinds in generator"));
            };
            let f_pa_new = match b2a {
                Some(branch) => branch.forward(cx, f_pa, f_pb)?,
                None => f_pa,
            };
            let f_pb_new = match a2b {
                Some(branch) => branch.forward(cx, f_pb, f_pa)?,
                None => f_pb,
            };
            let (i2, pa2, pb2) = ia.forward(cx, f_i, f_pa_new, f_pb_new)?;
            f_i = i2;
            f_pa = pa2;
            f_pb = pb2;
        }
        f_i
    };

    let decoded = params.img_dec.forward(cx, out)?;
    let intermediate = cx.tape.tanh(decoded);
    if let Some(att_dec) = &params.att_dec {
        let pre = att_dec.forward(cx, out)?;
        let mask = cx.tape.sigmoid(pre);
        let result = aif_fuse(cx, inputs.i_a, intermediate, mask)?;
        Ok(GenOutputs {
            result,
            intermediate,
            attention: Some(mask),
        })
    } else {
        Ok(GenOutputs {
            result: intermediate,
            intermediate,
            attention: None,
        })
    }
}

// ---- discriminators ---------------------------------------------------------

/// Strided convolution stack ending in a sigmoid score map. Instance norm on
/// every layer but the first; leaky-relu slope 0.2.
#[derive(Debug, Clone)]
pub struct Discriminator {
    convs: Vec<Conv2d>,
    norms: Vec<Option<InstanceNorm2d>>,
    head: Conv2d,
    pub in_channels: usize,
}

impl Discriminator {
    pub fn init<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        in_channels: usize,
        layers: usize,
        base: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mut convs = Vec::with_capacity(layers);
        let mut norms = Vec::with_capacity(layers);
        let mut c_in = in_channels;
        for i in 0..layers {
            let c_out = (base << i).min(256);
            convs.push(Conv2d::init(
                store,
                &format!("{name}.conv{i}"),
                c_in,
                c_out,
                2,
                2,
                0,
                rng,
            )?);
            norms.push(if i == 0 {
                None
            } else {
                Some(InstanceNorm2d::init(store, &format!("{name}.norm{i}"), c_out)?)
            });
            c_in = c_out;
        }
        let head = Conv2d::init(store, &format!("{name}.head"), c_in, 1, 1, 1, 0, rng)?;
        Ok(Discriminator {
            convs,
            norms,
            head,
            in_channels,
        })
    }

    /// Score map in `(0,1)`, spatial extent `input / 2^layers`.
    pub fn forward<S: Scalar>(&self, cx: &mut Ctx<S>, x: Val) -> Result<Val> {
        let s = cx.tape.shape(x);
        if s.len() != 3 || s[0] != self.in_channels {
            return Err(Error::shape(format!(
                "discriminator expects {} input channels, got {s:?}",
                self.in_channels
            )));
        }
        let mut y = x;
        for (conv, norm) in self.convs.iter().zip(&self.norms) {
            y = conv.forward(cx, y)?;
            if let Some(n) = norm {
                y = n.forward(cx, y)?;
            }
            y = cx.tape.leaky_relu(y, 0.2);
        }
        let logits = self.head.forward(cx, y)?;
        Ok(cx.tape.sigmoid(logits))
    }
}

// ---- perceptual features ----------------------------------------------------

/// Fixed seeded convolution features replacing a pretrained backbone for the
/// perceptual term: two convolutions with relu, never trained, deterministic
/// across runs.
pub struct PerceptualNet<S: Scalar> {
    pub store: ParamStore<S>,
    conv1: Conv2d,
    conv2: Conv2d,
}

impl<S: Scalar> Clone for PerceptualNet<S> {
    fn clone(&self) -> Self {
        PerceptualNet {
            store: self.store.clone(),
            conv1: self.conv1,
            conv2: self.conv2,
        }
    }
}

impl<S: Scalar> PerceptualNet<S> {
    pub fn init(channels: usize) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(PERCEPTUAL_SEED);
        let mid = (channels / 4).max(1);
        let mut conv1 = Conv2d::init(&mut store, "per.conv1", 3, mid, 3, 1, 1, &mut rng)?;
        let mut conv2 = Conv2d::init(&mut store, "per.conv2", mid, channels, 1, 1, 0, &mut rng)?;
        // He-scaled weights keep feature magnitudes usable
        let k1 = Tensor::randn_seeded(
            &[mid, 3, 3, 3],
            0.0,
            (2.0f64 / 27.0).sqrt(),
            PERCEPTUAL_SEED ^ 1,
        )?;
        let k2 = Tensor::randn_seeded(
            &[channels, mid, 1, 1],
            0.0,
            (2.0f64 / mid as f64).sqrt(),
            PERCEPTUAL_SEED ^ 2,
        )?;
        store.set(conv1.kernel, k1);
        store.set(conv2.kernel, k2);
        conv1.stride = 1;
        conv2.stride = 1;
        Ok(PerceptualNet {
            store,
            conv1,
            conv2,
        })
    }

    /// Replace the extractor weights from a named tensor table (the optional
    /// perceptual-weights file hook).
    pub fn load_weights(&mut self, tensors: &[(String, Tensor<S>)]) -> Result<()> {
        for (name, t) in tensors {
            let id = self
                .store
                .id_by_name(name)
                .ok_or_else(|| Error::Mismatch(format!("unknown perceptual tensor {name}")))?;
            if self.store.get(id).shape() != t.shape() {
                return Err(Error::Mismatch(format!(
                    "perceptual tensor {name} shape {:?} does not match {:?}",
                    t.shape(),
                    self.store.get(id).shape()
                )));
            }
            self.store.set(id, t.clone());
        }
        Ok(())
    }

    pub fn bind(&self, cx: &mut Ctx<S>) {
        cx.bind(&self.store, false);
    }

    /// Feature map of an image, `[perceptual_channels, h, w]`.
    pub fn features(&self, cx: &mut Ctx<S>, img: Val) -> Result<Val> {
        let y = self.conv1.forward(cx, img)?;
        let y = cx.tape.relu(y);
        let y = self.conv2.forward(cx, y)?;
        Ok(cx.tape.relu(y))
    }
}

// ---- losses -------------------------------------------------------------------

const BCE_EPS: f64 = 1e-7;

/// Binary cross-entropy of a score map against an all-ones or all-zeros
/// target: `-mean(ln(s))` or `-mean(ln(1-s))`, clamped away from zero.
pub fn bce_toward<S: Scalar>(cx: &mut Ctx<S>, scores: Val, target_one: bool) -> Result<Val> {
    let s = if target_one {
        scores
    } else {
        cx.tape.one_minus(scores)
    };
    let clamped = cx.tape.clamp(s, BCE_EPS, 1.0);
    let logs = cx.tape.ln(clamped);
    let m = cx.tape.mean(logs);
    Ok(cx.tape.scale(m, -1.0))
}

/// Relative weights of the three objective terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub gan: f64,
    pub l1: f64,
    pub per: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            gan: 5.0,
            l1: 10.0,
            per: 10.0,
        }
    }
}

/// Scalar components of one generator objective evaluation.
#[derive(Debug, Clone, Copy, Default)]
pub struct LossComponents {
    pub total: f64,
    pub gan_app: f64,
    pub gan_sha: f64,
    pub l1: f64,
    pub per: f64,
}

/// The joint generator objective:
/// `w.gan * (bce(app) + bce(sha)) + w.l1 * mean|result - target| + w.per * mean((f(result) - f(target))^2)`.
///
/// Returns the scalar tape value plus the extracted components. Non-finite
/// components are flagged by name.
pub fn generator_loss<S: Scalar>(
    cx: &mut Ctx<S>,
    weights: &LossWeights,
    result: Val,
    target: Val,
    fake_app_score: Val,
    fake_sha_score: Val,
    per: &PerceptualNet<S>,
) -> Result<(Val, LossComponents)> {
    let gan_app = bce_toward(cx, fake_app_score, true)?;
    let gan_sha = bce_toward(cx, fake_sha_score, true)?;

    let diff = cx.tape.sub(result, target)?;
    let absdiff = cx.tape.abs(diff);
    let l1 = cx.tape.mean(absdiff);

    let f_result = per.features(cx, result)?;
    let f_target = per.features(cx, target)?;
    let fdiff = cx.tape.sub(f_result, f_target)?;
    let fsq = cx.tape.square(fdiff)?;
    let lper = cx.tape.mean(fsq);

    let comps = LossComponents {
        total: 0.0,
        gan_app: cx.tape.value(gan_app).item()?.as_f64(),
        gan_sha: cx.tape.value(gan_sha).item()?.as_f64(),
        l1: cx.tape.value(l1).item()?.as_f64(),
        per: cx.tape.value(lper).item()?.as_f64(),
    };
    for (name, v) in [
        ("gan_app", comps.gan_app),
        ("gan_sha", comps.gan_sha),
        ("l1", comps.l1),
        ("per", comps.per),
    ] {
        if !v.is_finite() {
            return Err(Error::NonFinite {
                what: format!("loss component {name}"),
                step: None,
            });
        }
    }

    let gan = cx.tape.add(gan_app, gan_sha)?;
    let gan_w = cx.tape.scale(gan, weights.gan);
    let l1_w = cx.tape.scale(l1, weights.l1);
    let per_w = cx.tape.scale(lper, weights.per);
    let partial = cx.tape.add(gan_w, l1_w)?;
    let total = cx.tape.add(partial, per_w)?;
    let total_v = cx.tape.value(total).item()?.as_f64();
    Ok((
        total,
        LossComponents {
            total: total_v,
            ..comps
        },
    ))
}

/// Discriminator objective: real score maps toward 1, fake toward 0,
/// averaged per discriminator and summed over the two discriminators.
pub fn discriminator_loss<S: Scalar>(
    cx: &mut Ctx<S>,
    real_app: Val,
    fake_app: Val,
    real_sha: Val,
    fake_sha: Val,
) -> Result<Val> {
    let ra = bce_toward(cx, real_app, true)?;
    let fa = bce_toward(cx, fake_app, false)?;
    let rs = bce_toward(cx, real_sha, true)?;
    let fs = bce_toward(cx, fake_sha, false)?;
    let app = cx.tape.add(ra, fa)?;
    let app = cx.tape.scale(app, 0.5);
    let sha = cx.tape.add(rs, fs)?;
    let sha = cx.tape.scale(sha, 0.5);
    cx.tape.add(app, sha)
}

// ---- trainer ------------------------------------------------------------------

/// Optimizer hyperparameters (one setting shared by both optimizers;
/// generator and discriminators update 1:1).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
}

impl Default for OptimHyper {
    fn default() -> Self {
        OptimHyper {
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
        }
    }
}

/// Everything one training run owns: parameters, optimizer moments, the step
/// counter and the RNG.
pub struct TrainState<S: Scalar> {
    pub cfg: ModelConfig,
    pub hyper: OptimHyper,
    pub gen: ParamStore<S>,
    pub gen_params: GeneratorParams,
    pub disc: ParamStore<S>,
    pub d_app: Discriminator,
    pub d_sha: Discriminator,
    pub per: PerceptualNet<S>,
    pub adam_gen: AdamState<S>,
    pub adam_disc: AdamState<S>,
    pub step: u64,
    pub rng: ChaCha8Rng,
}

/// Stream ids of the seeded RNG: parameter init vs. the training loop.
const STREAM_INIT: u64 = 1;
const STREAM_TRAIN: u64 = 2;

impl<S: Scalar> TrainState<S> {
    pub fn new(cfg: ModelConfig, hyper: OptimHyper, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut init_rng = ChaCha8Rng::seed_from_u64(seed);
        init_rng.set_stream(STREAM_INIT);
        let mut gen = ParamStore::new();
        let gen_params = GeneratorParams::init(&mut gen, &cfg, &mut init_rng)?;
        let mut disc = ParamStore::new();
        let d_app = Discriminator::init(&mut disc, "app", 6, cfg.d_layers, cfg.d_base, &mut init_rng)?;
        let d_sha = Discriminator::init(
            &mut disc,
            "sha",
            JOINT_COUNT + 3,
            cfg.d_layers,
            cfg.d_base,
            &mut init_rng,
        )?;
        let per = PerceptualNet::init(cfg.perceptual_channels)?;
        let adam_gen = AdamState::new(&gen, hyper.lr, hyper.beta1, hyper.beta2);
        let adam_disc = AdamState::new(&disc, hyper.lr, hyper.beta1, hyper.beta2);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(STREAM_TRAIN);
        Ok(TrainState {
            cfg,
            hyper,
            gen,
            gen_params,
            disc,
            d_app,
            d_sha,
            per,
            adam_gen,
            adam_disc,
            step: 0,
            rng,
        })
    }
}

/// One sample prepared for the model: `[-1,1]` images plus heatmaps.
pub struct PreparedSample<S: Scalar> {
    pub i_a: Tensor<S>,
    pub i_b: Tensor<S>,
    pub p_a: Tensor<S>,
    pub p_b: Tensor<S>,
}

pub fn prepare_sample<S: Scalar>(cfg: &ModelConfig, pair: &SamplePair) -> PreparedSample<S> {
    PreparedSample {
        i_a: to_model_range(&pair.image_a),
        i_b: to_model_range(&pair.image_b),
        p_a: joints_to_heatmap(&pair.skel_a, cfg.image_h, cfg.image_w, cfg.heatmap_radius),
        p_b: joints_to_heatmap(&pair.skel_b, cfg.image_h, cfg.image_w, cfg.heatmap_radius),
    }
}

/// Per-step loss record (batch means).
#[derive(Debug, Clone, Copy)]
pub struct StepRecord {
    pub step: u64,
    pub total: f64,
    pub gan_app: f64,
    pub gan_sha: f64,
    pub l1: f64,
    pub per: f64,
    pub d_loss: f64,
}

impl StepRecord {
    /// Tab-separated log row: step, total, gan_app, gan_sha, l1, per, d_loss.
    pub fn log_line(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}",
            self.step, self.total, self.gan_app, self.gan_sha, self.l1, self.per, self.d_loss
        )
    }
}

/// One adversarial training step over a batch: a discriminator update on
/// real pairs toward 1 and detached fakes toward 0, then a generator update
/// on the joint objective against the refreshed discriminators.
/// Deterministic given `(state, batch)`.
pub fn train_step<S: Scalar>(
    state: &mut TrainState<S>,
    batch: &[PreparedSample<S>],
    weights: &LossWeights,
) -> Result<StepRecord> {
    if batch.is_empty() {
        return Err(Error::contract("empty training batch"));
    }
    let cfg = state.cfg.clone();
    let inv_b = 1.0 / batch.len() as f64;

    // Generator forward for every batch element (gradients flow to G).
    let mut cx_g = Ctx::new();
    cx_g.bind(&state.gen, true);
    state.per.bind(&mut cx_g);
    let mut outs = Vec::with_capacity(batch.len());
    let mut inputs = Vec::with_capacity(batch.len());
    for s in batch {
        let inp = bind_inputs(&mut cx_g, &cfg, &s.i_a, &s.p_a, &s.p_b)?;
        let out = generator_forward(&mut cx_g, &state.gen_params, &cfg, &inp)?;
        inputs.push(inp);
        outs.push(out);
    }
    let fakes: Vec<Tensor<S>> = outs
        .iter()
        .map(|o| cx_g.tape.value(o.result).clone())
        .collect();

    // Discriminator update: fakes are detached constants on a fresh tape.
    let mut cx_d = Ctx::new();
    cx_d.bind(&state.disc, true);
    let mut d_total: Option<Val> = None;
    for (s, fake) in batch.iter().zip(&fakes) {
        let i_a = cx_d.tape.constant(s.i_a.clone());
        let i_b = cx_d.tape.constant(s.i_b.clone());
        let p_b = cx_d.tape.constant(s.p_b.clone());
        let f = cx_d.tape.constant(fake.clone());
        let real_app_in = cx_d.tape.concat(&[i_a, i_b])?;
        let fake_app_in = cx_d.tape.concat(&[i_a, f])?;
        let real_sha_in = cx_d.tape.concat(&[p_b, i_b])?;
        let fake_sha_in = cx_d.tape.concat(&[p_b, f])?;
        let real_app = state.d_app.forward(&mut cx_d, real_app_in)?;
        let fake_app = state.d_app.forward(&mut cx_d, fake_app_in)?;
        let real_sha = state.d_sha.forward(&mut cx_d, real_sha_in)?;
        let fake_sha = state.d_sha.forward(&mut cx_d, fake_sha_in)?;
        let loss = discriminator_loss(&mut cx_d, real_app, fake_app, real_sha, fake_sha)?;
        d_total = Some(match d_total {
            None => loss,
            Some(acc) => cx_d.tape.add(acc, loss)?,
        });
    }
    let d_total = cx_d.tape.scale(d_total.expect("non-empty batch"), inv_b);
    let d_loss = cx_d.tape.value(d_total).item()?.as_f64();
    if !d_loss.is_finite() {
        return Err(Error::NonFinite {
            what: "discriminator loss".into(),
            step: Some(state.step + 1),
        });
    }
    let d_grads_all = cx_d.tape.backward(d_total)?;
    let d_grads = cx_d.grads_for(&state.disc, &d_grads_all);
    state.adam_disc.step(&mut state.disc, &d_grads)?;

    // Generator update against the refreshed discriminators.
    cx_g.bind(&state.disc, false);
    let mut g_total: Option<Val> = None;
    let mut comps_acc = LossComponents::default();
    for (s, (inp, out)) in batch.iter().zip(inputs.iter().zip(&outs)) {
        let i_b = cx_g.tape.constant(s.i_b.clone());
        let fake_app_in = cx_g.tape.concat(&[inp.i_a, out.result])?;
        let fake_sha_in = cx_g.tape.concat(&[inp.p_b, out.result])?;
        let fake_app = state.d_app.forward(&mut cx_g, fake_app_in)?;
        let fake_sha = state.d_sha.forward(&mut cx_g, fake_sha_in)?;
        let (loss, comps) = generator_loss(
            &mut cx_g,
            weights,
            out.result,
            i_b,
            fake_app,
            fake_sha,
            &state.per,
        )?;
        comps_acc.total += comps.total * inv_b;
        comps_acc.gan_app += comps.gan_app * inv_b;
        comps_acc.gan_sha += comps.gan_sha * inv_b;
        comps_acc.l1 += comps.l1 * inv_b;
        comps_acc.per += comps.per * inv_b;
        g_total = Some(match g_total {
            None => loss,
            Some(acc) => cx_g.tape.add(acc, loss)?,
        });
    }
    let g_total = cx_g.tape.scale(g_total.expect("non-empty batch"), inv_b);
    let g_grads_all = cx_g.tape.backward(g_total)?;
    let g_grads = cx_g.grads_for(&state.gen, &g_grads_all);
    state.adam_gen.step(&mut state.gen, &g_grads)?;

    state.step += 1;
    Ok(StepRecord {
        step: state.step,
        total: comps_acc.total,
        gan_app: comps_acc.gan_app,
        gan_sha: comps_acc.gan_sha,
        l1: comps_acc.l1,
        per: comps_acc.per,
        d_loss,
    })
}

/// Inference: run the generator without recording gradients. Returns the
/// result, the intermediate image, and the attention mask when present.
pub fn run_generator<S: Scalar>(
    cfg: &ModelConfig,
    gen: &ParamStore<S>,
    params: &GeneratorParams,
    i_a: &Tensor<S>,
    p_a: &Tensor<S>,
    p_b: &Tensor<S>,
) -> Result<(Tensor<S>, Tensor<S>, Option<Tensor<S>>)> {
    let mut cx = Ctx::new();
    cx.bind(gen, false);
    let inp = bind_inputs(&mut cx, cfg, i_a, p_a, p_b)?;
    let out = generator_forward(&mut cx, params, cfg, &inp)?;
    Ok((
        cx.tape.value(out.result).clone(),
        cx.tape.value(out.intermediate).clone(),
        out.attention.map(|a| cx.tape.value(a).clone()),
    ))
}
