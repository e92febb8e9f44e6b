//! Encoder / decoder building blocks shared by the three-branch network, the
//! plain U-Net baseline and the pix2pix generator.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{NodeId, Tape};
use crate::error::ModelError;
use crate::nn::{Conv2d, ParamStore};

use super::facat::FaCat;

/// Two 3x3 convolutions, each followed by ReLU.
#[derive(Debug, Clone)]
pub struct ConvBlock {
    pub c1: Conv2d,
    pub c2: Conv2d,
}

impl ConvBlock {
    pub fn init(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_ch: usize,
        out_ch: usize,
    ) -> Self {
        Self {
            c1: Conv2d::init(store, rng, &format!("{name}.c1"), in_ch, out_ch, 3, 1, 1),
            c2: Conv2d::init(store, rng, &format!("{name}.c2"), out_ch, out_ch, 3, 1, 1),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: NodeId) -> NodeId {
        let h = self.c1.forward(tape, store, x);
        let h = tape.relu(h);
        let h = self.c2.forward(tape, store, h);
        tape.relu(h)
    }
}

/// Shared down-sampling path: five stages, each a conv block followed by 2x2
/// max pooling, then a bottleneck conv block at the lowest resolution.
#[derive(Debug, Clone)]
pub struct Encoder {
    pub stages: Vec<ConvBlock>,
    pub bottleneck: ConvBlock,
}

impl Encoder {
    pub fn init(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_channels: usize,
        widths: &[usize],
        bottleneck_width: usize,
    ) -> Self {
        let mut stages = Vec::with_capacity(widths.len());
        let mut prev = in_channels;
        for (i, &w) in widths.iter().enumerate() {
            stages.push(ConvBlock::init(store, rng, &format!("{name}.s{i}"), prev, w));
            prev = w;
        }
        let bottleneck = ConvBlock::init(store, rng, &format!("{name}.bottleneck"), prev, bottleneck_width);
        Self { stages, bottleneck }
    }

    /// Returns the per-stage skip features (highest resolution first) and the
    /// bottleneck features.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: NodeId) -> (Vec<NodeId>, NodeId) {
        let mut skips = Vec::with_capacity(self.stages.len());
        let mut h = x;
        for stage in &self.stages {
            let s = stage.forward(tape, store, h);
            skips.push(s);
            h = tape.maxpool2(s);
        }
        let bottom = self.bottleneck.forward(tape, store, h);
        (skips, bottom)
    }
}

/// One up-sampling stage: nearest 2x upsample + 3x3 conv, skip concatenation
/// (optionally through FA-Cat), then a conv block.
#[derive(Debug, Clone)]
pub struct DecoderStage {
    pub up: Conv2d,
    pub merge: ConvBlock,
    pub facat: Option<FaCat>,
}

/// A full five-stage up-sampling branch with an optional 1x1 sigmoid head.
#[derive(Debug, Clone)]
pub struct DecoderBranch {
    pub stages: Vec<DecoderStage>,
    pub head: Option<Conv2d>,
}

/// Output of a decoder branch: final full-resolution features plus the head's
/// sigmoid map when a head exists.
pub struct BranchOutput {
    pub features: NodeId,
    pub prediction: Option<NodeId>,
}

impl DecoderBranch {
    /// `facat_placement` lists the skip levels (0 = highest resolution) that
    /// route through FA-Cat with the given adaptive method.
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        widths: &[usize],
        bottleneck_width: usize,
        facat_placement: &[usize],
        method: Option<super::facat::AdaptiveMethod>,
        otsu_masked: bool,
        with_head: bool,
    ) -> Result<Self, ModelError> {
        let n = widths.len();
        let mut stages = Vec::with_capacity(n);
        // built from the deepest stage (level n-1) up to level 0
        for level in (0..n).rev() {
            let deep_ch = if level + 1 == n {
                bottleneck_width
            } else {
                widths[level + 1]
            };
            let facat = match (&method, facat_placement.contains(&level)) {
                (Some(m), true) => Some(FaCat::init(
                    store,
                    rng,
                    &format!("{name}.l{level}.facat"),
                    widths[level],
                    *m,
                    otsu_masked,
                )?),
                _ => None,
            };
            let skip_ch = widths[level] + facat.as_ref().map_or(0, |f| f.extra_channels());
            let up = Conv2d::init(
                store,
                rng,
                &format!("{name}.l{level}.up"),
                deep_ch,
                widths[level],
                3,
                1,
                1,
            );
            let merge = ConvBlock::init(
                store,
                rng,
                &format!("{name}.l{level}.merge"),
                widths[level] + skip_ch,
                widths[level],
            );
            stages.push(DecoderStage { up, merge, facat });
        }
        let head = with_head.then(|| Conv2d::init(store, rng, &format!("{name}.head"), widths[0], 1, 1, 1, 0));
        Ok(Self { stages, head })
    }

    /// `taps` collects FA-Cat outputs (batch item 0) under the given branch
    /// label when present.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        skips: &[NodeId],
        bottom: NodeId,
        branch_label: &str,
        mut taps: Option<&mut std::collections::BTreeMap<String, ndarray::Array3<f32>>>,
    ) -> Result<BranchOutput, ModelError> {
        let n = skips.len();
        let mut h = bottom;
        for (si, stage) in self.stages.iter().enumerate() {
            let level = n - 1 - si;
            let up = tape.upsample2(h);
            let up = stage.up.forward(tape, store, up);
            let up = tape.relu(up);
            let skip = match &stage.facat {
                Some(block) => {
                    let out = block.forward(tape, store, skips[level])?;
                    if let Some(t) = taps.as_deref_mut() {
                        let v = tape
                            .value(out)
                            .view()
                            .into_dimensionality::<ndarray::Ix4>()
                            .unwrap()
                            .index_axis(ndarray::Axis(0), 0)
                            .to_owned();
                        t.insert(format!("facat:{branch_label}:{level}"), v);
                    }
                    out
                }
                None => skips[level],
            };
            let cat = tape.concat_channels(&[up, skip]);
            h = stage.merge.forward(tape, store, cat);
        }
        let prediction = self.head.as_ref().map(|head| {
            let logits = head.forward(tape, store, h);
            tape.sigmoid(logits)
        });
        Ok(BranchOutput {
            features: h,
            prediction,
        })
    }
}

/// Combines the three branches' full-resolution features into the overall
/// segmentation map: two convolutions and a sigmoid.
#[derive(Debug, Clone)]
pub struct FusionHead {
    pub c1: Conv2d,
    pub c2: Conv2d,
}

impl FusionHead {
    pub fn init(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_ch: usize,
        mid_ch: usize,
    ) -> Self {
        Self {
            c1: Conv2d::init(store, rng, &format!("{name}.c1"), in_ch, mid_ch, 3, 1, 1),
            c2: Conv2d::init(store, rng, &format!("{name}.c2"), mid_ch, 1, 1, 1, 0),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, parts: &[NodeId]) -> NodeId {
        let cat = tape.concat_channels(parts);
        let h = self.c1.forward(tape, store, cat);
        let h = tape.relu(h);
        let logits = self.c2.forward(tape, store, h);
        tape.sigmoid(logits)
    }
}
