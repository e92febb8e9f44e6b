//! The segmentation network: a five-level shared encoder, three five-level
//! decoder branches (union with FA-Cat/Sobel, intersection with FA-Cat/Otsu,
//! and a plain branch) and a fusion head producing the overall segmentation.

pub mod blocks;
pub mod facat;

use std::collections::BTreeMap;

use ndarray::{Array2, Array4, Axis};
use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape};
use crate::error::ModelError;
use crate::mask::{build_mcm, MultiConfidenceMask};
use crate::nn::{seeded_rng, ParamStore};

use blocks::{DecoderBranch, Encoder, FusionHead};
use facat::AdaptiveMethod;

/// HU values are mapped to [-1, 1] over the fixed window [-1200, 400] before
/// entering any network.
pub const HU_WINDOW_CENTER: f32 = -400.0;
pub const HU_WINDOW_HALF_RANGE: f32 = 800.0;

pub fn normalize_hu(v: f32) -> f32 {
    (v - HU_WINDOW_CENTER) / HU_WINDOW_HALF_RANGE
}

pub fn denormalize_hu(v: f32) -> f32 {
    v * HU_WINDOW_HALF_RANGE + HU_WINDOW_CENTER
}

/// Architecture hyperparameters of the segmentation network.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchConfig {
    /// Channel widths of the five encoder stages.
    pub widths: Vec<usize>,
    /// Channel width of the bottleneck block.
    pub bottleneck_width: usize,
    /// Skip levels (0 = highest resolution) whose concatenation routes
    /// through FA-Cat on the union and intersection branches.
    pub fa_cat_placement: Vec<usize>,
    /// Config-gated Otsu variant appending mask * U' instead of the mask.
    pub otsu_masked: bool,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            widths: vec![32, 64, 128, 256, 512],
            bottleneck_width: 512,
            fa_cat_placement: vec![0, 1],
            otsu_masked: false,
        }
    }
}

impl ArchConfig {
    /// A thin configuration for CPU desk-scale runs.
    pub fn thin() -> Self {
        Self {
            widths: vec![16, 32, 64, 64, 64],
            bottleneck_width: 128,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.widths.len() != 5 {
            return Err(ModelError::Other(format!(
                "expected 5 encoder widths, got {}",
                self.widths.len()
            )));
        }
        for &p in &self.fa_cat_placement {
            if p >= self.widths.len() {
                return Err(ModelError::Other(format!(
                    "fa_cat placement level {p} out of range"
                )));
            }
            if self.widths[p] % 16 != 0 {
                return Err(ModelError::ChannelsNotDivisible {
                    channels: self.widths[p],
                });
            }
        }
        Ok(())
    }

    /// Number of 2x down-samplings, hence the input divisibility requirement.
    pub fn downsamplings(&self) -> usize {
        self.widths.len()
    }

    pub fn required_divisor(&self) -> usize {
        1 << self.downsamplings()
    }
}

/// Which network to build: the full three-branch model or the plain
/// single-branch U-Net baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Uasnet,
    Unet,
}

/// Full model configuration embedded in checkpoints.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub arch: ArchConfig,
    #[serde(default)]
    pub adv: crate::adversarial::AdvConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            kind: ModelKind::Uasnet,
            arch: ArchConfig::default(),
            adv: Default::default(),
        }
    }
}

/// Three-branch network handle (parameter slots plus wiring).
#[derive(Debug, Clone)]
pub struct UasNet {
    pub encoder: Encoder,
    pub branch_union: DecoderBranch,
    pub branch_inter: DecoderBranch,
    pub branch_plain: DecoderBranch,
    pub fusion: FusionHead,
}

/// Plain single-branch U-Net used as the comparison baseline.
#[derive(Debug, Clone)]
pub struct UNetBaseline {
    pub encoder: Encoder,
    pub branch: DecoderBranch,
}

#[derive(Debug, Clone)]
pub enum NetVariant {
    ThreeBranch(UasNet),
    Baseline(UNetBaseline),
}

/// Everything trainable plus the configuration that shaped it.
pub struct ModelBundle {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub net: NetVariant,
    pub adversarial: Option<crate::adversarial::AdversarialHeads>,
}

/// On-tape handles produced by one batched forward pass.
pub struct BatchForward {
    /// Normalized input image node (reused by the adversarial heads).
    pub input: NodeId,
    pub union: NodeId,
    pub inter: NodeId,
    pub r: NodeId,
    /// Soft MCM: (union + inter) / 2, on tape.
    pub mcm_soft: NodeId,
}

/// Decoded prediction for a single image.
#[derive(Debug, Clone)]
pub struct NetworkOutput {
    pub union_pred: Array2<f32>,
    pub inter_pred: Array2<f32>,
    pub r_pred: Array2<f32>,
    pub mcm: MultiConfidenceMask,
}

impl ModelBundle {
    pub fn new(
        config: ModelConfig,
        seed: u64,
        with_adversarial: bool,
    ) -> Result<Self, ModelError> {
        config.arch.validate()?;
        let mut store = ParamStore::new();
        let mut rng = seeded_rng(seed, "seg");
        let arch = &config.arch;
        let net = match config.kind {
            ModelKind::Uasnet => {
                let encoder = Encoder::init(&mut store, &mut rng, "seg.enc", 1, &arch.widths, arch.bottleneck_width);
                let branch_union = DecoderBranch::init(
                    &mut store,
                    &mut rng,
                    "seg.union",
                    &arch.widths,
                    arch.bottleneck_width,
                    &arch.fa_cat_placement,
                    Some(AdaptiveMethod::Sobel),
                    arch.otsu_masked,
                    true,
                )?;
                let branch_inter = DecoderBranch::init(
                    &mut store,
                    &mut rng,
                    "seg.inter",
                    &arch.widths,
                    arch.bottleneck_width,
                    &arch.fa_cat_placement,
                    Some(AdaptiveMethod::Otsu),
                    arch.otsu_masked,
                    true,
                )?;
                let branch_plain = DecoderBranch::init(
                    &mut store,
                    &mut rng,
                    "seg.plain",
                    &arch.widths,
                    arch.bottleneck_width,
                    &[],
                    None,
                    false,
                    false,
                )?;
                let fusion = FusionHead::init(
                    &mut store,
                    &mut rng,
                    "seg.fusion",
                    3 * arch.widths[0],
                    arch.widths[0],
                );
                NetVariant::ThreeBranch(UasNet {
                    encoder,
                    branch_union,
                    branch_inter,
                    branch_plain,
                    fusion,
                })
            }
            ModelKind::Unet => {
                let encoder = Encoder::init(&mut store, &mut rng, "seg.enc", 1, &arch.widths, arch.bottleneck_width);
                let branch = DecoderBranch::init(
                    &mut store,
                    &mut rng,
                    "seg.unet",
                    &arch.widths,
                    arch.bottleneck_width,
                    &[],
                    None,
                    false,
                    true,
                )?;
                NetVariant::Baseline(UNetBaseline { encoder, branch })
            }
        };
        let adversarial = if with_adversarial {
            Some(crate::adversarial::AdversarialHeads::init(
                &mut store,
                seed,
                &config.adv,
            ))
        } else {
            None
        };
        Ok(Self {
            config,
            store,
            net,
            adversarial,
        })
    }

    fn check_input(&self, h: usize, w: usize) -> Result<(), ModelError> {
        let div = self.config.arch.required_divisor();
        if h == 0 || w == 0 || h % div != 0 || w % div != 0 {
            return Err(ModelError::BadInputSize {
                height: h,
                width: w,
            });
        }
        Ok(())
    }

    /// Batched forward of the three-branch network. `images` holds raw HU
    /// values, shape (B, 1, H, W). FA-Cat activations of batch item 0 are
    /// collected into `taps` when provided.
    pub fn forward_batch(
        &self,
        tape: &mut Tape,
        images: &Array4<f32>,
        mut taps: Option<&mut BTreeMap<String, ndarray::Array3<f32>>>,
    ) -> Result<BatchForward, ModelError> {
        let (_, c, h, w) = images.dim();
        if c != 1 {
            return Err(ModelError::ChannelMismatch {
                expected: 1,
                got: c,
            });
        }
        self.check_input(h, w)?;
        let net = match &self.net {
            NetVariant::ThreeBranch(n) => n,
            NetVariant::Baseline(_) => {
                return Err(ModelError::Other(
                    "forward_batch requires the three-branch model".into(),
                ))
            }
        };
        let normed = images.mapv(normalize_hu);
        let input = tape.constant(normed.into_dyn());
        let (skips, bottom) = net.encoder.forward(tape, &self.store, input);
        let union_out = net.branch_union.forward(
            tape,
            &self.store,
            &skips,
            bottom,
            "union",
            taps.as_deref_mut(),
        )?;
        let inter_out = net.branch_inter.forward(
            tape,
            &self.store,
            &skips,
            bottom,
            "inter",
            taps.as_deref_mut(),
        )?;
        let plain_out = net
            .branch_plain
            .forward(tape, &self.store, &skips, bottom, "plain", None)?;
        let union = union_out.prediction.expect("union branch has a head");
        let inter = inter_out.prediction.expect("inter branch has a head");
        let r = net.fusion.forward(
            tape,
            &self.store,
            &[union_out.features, inter_out.features, plain_out.features],
        );
        let summed = tape.add(union, inter);
        let mcm_soft = tape.mul_scalar(summed, 0.5);
        Ok(BatchForward {
            input,
            union,
            inter,
            r,
            mcm_soft,
        })
    }

    /// Batched forward of the single-branch baseline; returns the sigmoid map.
    pub fn forward_batch_baseline(
        &self,
        tape: &mut Tape,
        images: &Array4<f32>,
    ) -> Result<NodeId, ModelError> {
        let (_, _, h, w) = images.dim();
        self.check_input(h, w)?;
        let net = match &self.net {
            NetVariant::Baseline(n) => n,
            NetVariant::ThreeBranch(_) => {
                return Err(ModelError::Other(
                    "forward_batch_baseline requires the baseline model".into(),
                ))
            }
        };
        let normed = images.mapv(normalize_hu);
        let input = tape.constant(normed.into_dyn());
        let (skips, bottom) = net.encoder.forward(tape, &self.store, input);
        let out = net
            .branch
            .forward(tape, &self.store, &skips, bottom, "unet", None)?;
        Ok(out.prediction.expect("baseline branch has a head"))
    }

    /// Forward pass over one image with all outputs decoded; fails fast on
    /// non-finite activations.
    pub fn forward(&self, image: &Array2<f32>) -> Result<NetworkOutput, ModelError> {
        self.forward_with_taps(image, None).map(|(out, _)| out)
    }

    /// Forward pass that optionally collects FA-Cat activations by tag.
    pub fn forward_with_taps(
        &self,
        image: &Array2<f32>,
        collect: Option<()>,
    ) -> Result<(NetworkOutput, BTreeMap<String, ndarray::Array3<f32>>), ModelError> {
        let (h, w) = image.dim();
        let batch = image
            .clone()
            .into_shape_with_order((1, 1, h, w))
            .expect("reshape single image");
        let mut tape = Tape::new();
        let mut taps = BTreeMap::new();
        let fwd = self.forward_batch(
            &mut tape,
            &batch,
            collect.map(|_| &mut taps),
        )?;
        let extract = |id: NodeId| -> Array2<f32> {
            tape.value(id)
                .view()
                .into_dimensionality::<ndarray::Ix4>()
                .unwrap()
                .index_axis(Axis(0), 0)
                .index_axis(Axis(0), 0)
                .to_owned()
        };
        let union_pred = extract(fwd.union);
        let inter_pred = extract(fwd.inter);
        let r_pred = extract(fwd.r);
        for (name, map) in [
            ("union", &union_pred),
            ("inter", &inter_pred),
            ("r", &r_pred),
        ] {
            if map.iter().any(|v| !v.is_finite()) {
                return Err(ModelError::NonFiniteActivation {
                    stage: format!("{name} head"),
                });
            }
        }
        let mcm = build_mcm(&union_pred, &inter_pred)
            .map_err(|e| ModelError::Other(e.to_string()))?;
        Ok((
            NetworkOutput {
                union_pred,
                inter_pred,
                r_pred,
                mcm,
            },
            taps,
        ))
    }

    /// Parameter slots belonging to the segmentation network.
    pub fn seg_slots(&self) -> Vec<usize> {
        self.store.slots_with_prefix("seg.")
    }
}
