//! The joint adversarial process: a pix2pix generator turning (image, MCM)
//! into a synthesized CT patch, a patch-level discriminator over
//! (image, MCM) stacks, a malignancy classifier over the predicted overall
//! segmentation, and the combined training objective.

use ndarray::{Array2, Array4, ArrayD};
use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape};
use crate::error::ModelError;
use crate::model::blocks::{DecoderBranch, Encoder};
use crate::model::{normalize_hu, BatchForward, ModelBundle};
use crate::nn::{seeded_rng, Conv2d, Linear, ParamStore};

/// Hyperparameters of the adversarial heads.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdvConfig {
    /// Generator encoder stage widths (skip levels).
    pub gen_widths: Vec<usize>,
    pub gen_bottleneck: usize,
    /// Discriminator stride-2 stage widths.
    pub disc_widths: Vec<usize>,
    /// Malignancy classifier stride-2 stage widths.
    pub clf_widths: Vec<usize>,
    /// When set, the classifier sees r_pred * image instead of the bare mask.
    pub clf_mask_times_image: bool,
}

impl Default for AdvConfig {
    fn default() -> Self {
        Self {
            gen_widths: vec![16, 32],
            gen_bottleneck: 64,
            disc_widths: vec![16, 32, 64],
            clf_widths: vec![8, 16, 32],
            clf_mask_times_image: false,
        }
    }
}

/// pix2pix generator: U-Net-shaped encoder-decoder over the 2-channel
/// (normalized image, soft MCM) stack, tanh output in [-1, 1].
#[derive(Debug, Clone)]
pub struct Generator {
    encoder: Encoder,
    decoder: DecoderBranch,
    out: Conv2d,
}

/// Patch-level discriminator over (normalized image, MCM) stacks: stacked
/// 4x4 stride-2 convolutions with leaky ReLU, then a 3x3 head producing a
/// per-patch realness probability map.
#[derive(Debug, Clone)]
pub struct PatchDiscriminator {
    convs: Vec<Conv2d>,
    head: Conv2d,
}

/// Malignancy classifier over the soft overall-segmentation map.
#[derive(Debug, Clone)]
pub struct MaligClassifier {
    convs: Vec<Conv2d>,
    fc: Linear,
    mask_times_image: bool,
}

pub struct AdversarialHeads {
    pub gen: Generator,
    pub disc: PatchDiscriminator,
    pub clf: MaligClassifier,
}

impl AdversarialHeads {
    pub fn init(store: &mut ParamStore, seed: u64, config: &AdvConfig) -> Self {
        let mut grng = seeded_rng(seed, "gen");
        let encoder = Encoder::init(
            store,
            &mut grng,
            "gen.enc",
            2,
            &config.gen_widths,
            config.gen_bottleneck,
        );
        let decoder = DecoderBranch::init(
            store,
            &mut grng,
            "gen.dec",
            &config.gen_widths,
            config.gen_bottleneck,
            &[],
            None,
            false,
            false,
        )
        .expect("generator decoder has no FA-Cat constraints");
        let out = Conv2d::init(store, &mut grng, "gen.out", config.gen_widths[0], 1, 1, 1, 0);
        let gen = Generator {
            encoder,
            decoder,
            out,
        };

        let mut drng = seeded_rng(seed, "disc");
        let mut convs = Vec::new();
        let mut prev = 2;
        for (i, &w) in config.disc_widths.iter().enumerate() {
            convs.push(Conv2d::init(store, &mut drng, &format!("disc.s{i}"), prev, w, 4, 2, 1));
            prev = w;
        }
        let head = Conv2d::init(store, &mut drng, "disc.head", prev, 1, 3, 1, 1);
        let disc = PatchDiscriminator { convs, head };

        let mut crng = seeded_rng(seed, "clf");
        let mut convs = Vec::new();
        let mut prev = 1;
        for (i, &w) in config.clf_widths.iter().enumerate() {
            convs.push(Conv2d::init(store, &mut crng, &format!("clf.s{i}"), prev, w, 3, 2, 1));
            prev = w;
        }
        let fc = Linear::init(store, &mut crng, "clf.fc", prev, 2, true);
        let clf = MaligClassifier {
            convs,
            fc,
            mask_times_image: config.clf_mask_times_image,
        };

        Self { gen, disc, clf }
    }
}

impl Generator {
    /// image_norm and mcm are (B,1,H,W) nodes; output is (B,1,H,W) in [-1,1].
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        image_norm: NodeId,
        mcm: NodeId,
    ) -> Result<NodeId, ModelError> {
        let stack = tape.concat_channels(&[image_norm, mcm]);
        let (skips, bottom) = self.encoder.forward(tape, store, stack);
        let features = self
            .decoder
            .forward(tape, store, &skips, bottom, "gen", None)?
            .features;
        let logits = self.out.forward(tape, store, features);
        Ok(tape.tanh(logits))
    }
}

impl PatchDiscriminator {
    /// Returns the per-patch realness probability map.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        image_norm: NodeId,
        mcm: NodeId,
    ) -> NodeId {
        let mut h = tape.concat_channels(&[image_norm, mcm]);
        for conv in &self.convs {
            h = conv.forward(tape, store, h);
            h = tape.leaky_relu(h, 0.2);
        }
        let logits = self.head.forward(tape, store, h);
        tape.sigmoid(logits)
    }
}

impl MaligClassifier {
    /// Returns (B,2) class logits from the soft segmentation map.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        r_pred: NodeId,
        image_norm: NodeId,
    ) -> NodeId {
        let mut h = if self.mask_times_image {
            // config-gated variant: classifier sees mask * image
            tape.mul(r_pred, image_norm)
        } else {
            r_pred
        };
        for conv in &self.convs {
            h = conv.forward(tape, store, h);
            h = tape.relu(h);
        }
        let pooled = tape.spatial_mean(h);
        self.fc.forward(tape, store, pooled)
    }
}

/// Per-term scalar node handles of the segmentation loss (Eq. 2 shape).
pub struct SegLossNodes {
    pub inter: NodeId,
    pub union: NodeId,
    pub reference: NodeId,
    pub total: NodeId,
}

/// BCE(inter', inter) + BCE(union', union) + BCE(r', r), each mean-reduced.
pub fn seg_loss(
    tape: &mut Tape,
    preds: (NodeId, NodeId, NodeId),
    targets: (NodeId, NodeId, NodeId),
) -> SegLossNodes {
    let (union_p, inter_p, r_p) = preds;
    let (union_t, inter_t, r_t) = targets;
    let inter = tape.bce_mean(inter_p, inter_t);
    let union = tape.bce_mean(union_p, union_t);
    let reference = tape.bce_mean(r_p, r_t);
    let s = tape.add(inter, union);
    let total = tape.add(s, reference);
    SegLossNodes {
        inter,
        union,
        reference,
        total,
    }
}

/// Discriminator loss: -log D(X,M) - log(1 - D(X',M)), averaged patch-wise.
/// Callers must pass a detached X' path.
pub fn gan_d_loss(tape: &mut Tape, d_real: NodeId, d_fake: NodeId) -> NodeId {
    let ones = like(tape, d_real, 1.0);
    let zeros = like(tape, d_fake, 0.0);
    let real_term = tape.bce_mean(d_real, ones);
    let fake_term = tape.bce_mean(d_fake, zeros);
    tape.add(real_term, fake_term)
}

/// Non-saturating generator loss: -log D(X',M).
pub fn gan_g_loss(tape: &mut Tape, d_fake: NodeId) -> NodeId {
    let ones = like(tape, d_fake, 1.0);
    tape.bce_mean(d_fake, ones)
}

fn like(tape: &mut Tape, node: NodeId, fill: f32) -> NodeId {
    let shape = tape.value(node).raw_dim();
    tape.constant(ArrayD::from_elem(shape, fill))
}

/// Weights applied to the four minimized terms; Eq. 5 uses an unweighted sum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TermWeights {
    pub seg: f32,
    pub l1: f32,
    pub gan: f32,
    pub malig: f32,
}

impl Default for TermWeights {
    fn default() -> Self {
        Self {
            seg: 1.0,
            l1: 1.0,
            gan: 1.0,
            malig: 1.0,
        }
    }
}

/// Scalar values of every objective term after a step; adversarial terms are
/// absent when the joint adversarial process is disabled.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub seg_bce: f32,
    pub seg_bce_inter: f32,
    pub seg_bce_union: f32,
    pub seg_bce_ref: f32,
    pub l1_gen: Option<f32>,
    pub gan_g: Option<f32>,
    pub gan_d: Option<f32>,
    pub malig_ce: Option<f32>,
    pub total_min_players: f32,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        let opt = |v: Option<f32>| v.map(f32::is_finite).unwrap_or(true);
        self.seg_bce.is_finite()
            && self.total_min_players.is_finite()
            && opt(self.l1_gen)
            && opt(self.gan_g)
            && opt(self.gan_d)
            && opt(self.malig_ce)
    }

    /// One-line dump used in NaN-abort diagnostics.
    pub fn dump(&self) -> String {
        let f = |v: Option<f32>| v.map_or("absent".to_string(), |x| format!("{x:.6}"));
        format!(
            "seg_bce={:.6} (inter={:.6} union={:.6} ref={:.6}) l1={} gan_g={} gan_d={} malig={} total={:.6}",
            self.seg_bce,
            self.seg_bce_inter,
            self.seg_bce_union,
            self.seg_bce_ref,
            f(self.l1_gen),
            f(self.gan_g),
            f(self.gan_d),
            f(self.malig_ce),
            self.total_min_players
        )
    }
}

/// Supervision tensors for one batch, all shaped (B,1,H,W) except labels.
pub struct BatchTargets {
    pub union: Array4<f32>,
    pub inter: Array4<f32>,
    pub reference: Array4<f32>,
    /// Malignancy class per sample; None excludes the sample's classifier term.
    pub labels: Vec<Option<usize>>,
}

/// Node handles of the assembled objective on one tape.
pub struct Objective {
    pub total_min: NodeId,
    pub seg: SegLossNodes,
    pub l1: Option<NodeId>,
    pub gan_g: Option<NodeId>,
    pub gan_d: Option<NodeId>,
    pub malig: Option<NodeId>,
}

impl Objective {
    pub fn breakdown(&self, tape: &Tape) -> LossBreakdown {
        let total_adv: f32 = tape.scalar(self.total_min);
        LossBreakdown {
            seg_bce: tape.scalar(self.seg.total),
            seg_bce_inter: tape.scalar(self.seg.inter),
            seg_bce_union: tape.scalar(self.seg.union),
            seg_bce_ref: tape.scalar(self.seg.reference),
            l1_gen: self.l1.map(|n| tape.scalar(n)),
            gan_g: self.gan_g.map(|n| tape.scalar(n)),
            gan_d: self.gan_d.map(|n| tape.scalar(n)),
            malig_ce: self.malig.map(|n| tape.scalar(n)),
            total_min_players: total_adv,
        }
    }
}

/// Assembles the full minimization objective on `tape` from a forward pass.
///
/// With the joint adversarial process enabled the minimization players
/// (segmentation network, generator, classifier) receive
/// `seg + l1 + gan_g + malig`; the discriminator's own loss is reported but
/// belongs to the separate maximization step. With it disabled the objective
/// is the segmentation loss alone.
#[allow(clippy::too_many_arguments)]
pub fn joint_objective(
    tape: &mut Tape,
    bundle: &ModelBundle,
    fwd: &BatchForward,
    images: &Array4<f32>,
    targets: &BatchTargets,
    weights: TermWeights,
    jap_enabled: bool,
) -> Result<Objective, ModelError> {
    let union_t = tape.constant(targets.union.clone().into_dyn());
    let inter_t = tape.constant(targets.inter.clone().into_dyn());
    let r_t = tape.constant(targets.reference.clone().into_dyn());
    let seg = seg_loss(
        tape,
        (fwd.union, fwd.inter, fwd.r),
        (union_t, inter_t, r_t),
    );

    if !jap_enabled {
        let total_min = tape.mul_scalar(seg.total, weights.seg);
        return Ok(Objective {
            total_min,
            seg,
            l1: None,
            gan_g: None,
            gan_d: None,
            malig: None,
        });
    }

    let heads = bundle
        .adversarial
        .as_ref()
        .ok_or_else(|| ModelError::Other("adversarial heads not constructed".into()))?;

    // generator: synthesize the CT patch from (image, soft MCM)
    let x_syn = heads
        .gen
        .forward(tape, &bundle.store, fwd.input, fwd.mcm_soft)?;
    let real_norm = tape.constant(images.mapv(normalize_hu).into_dyn());
    let l1 = tape.l1_mean(x_syn, real_norm);

    // generator-side GAN term: the discriminator is consulted on the
    // synthesized stack; only the separate discriminator step updates D
    let d_fake = heads
        .disc
        .forward(tape, &bundle.store, x_syn, fwd.mcm_soft);
    let gan_g = gan_g_loss(tape, d_fake);

    // reported-only discriminator value on this batch; never backpropagated
    // on this tape
    let mcm_detached = tape.detach(fwd.mcm_soft);
    let d_real = heads
        .disc
        .forward(tape, &bundle.store, real_norm, mcm_detached);
    let d_fake_detached = tape.detach(d_fake);
    let gan_d = gan_d_loss(tape, d_real, d_fake_detached);

    // malignancy classifier on samples that carry a label
    let malig = classifier_term(tape, bundle, heads, fwd, targets)?;

    let mut total = tape.mul_scalar(seg.total, weights.seg);
    let wl1 = tape.mul_scalar(l1, weights.l1);
    total = tape.add(total, wl1);
    let wg = tape.mul_scalar(gan_g, weights.gan);
    total = tape.add(total, wg);
    if let Some(m) = malig {
        let wm = tape.mul_scalar(m, weights.malig);
        total = tape.add(total, wm);
    }

    Ok(Objective {
        total_min: total,
        seg,
        l1: Some(l1),
        gan_g: Some(gan_g),
        gan_d: Some(gan_d),
        malig,
    })
}

fn classifier_term(
    tape: &mut Tape,
    bundle: &ModelBundle,
    heads: &AdversarialHeads,
    fwd: &BatchForward,
    targets: &BatchTargets,
) -> Result<Option<NodeId>, ModelError> {
    let labels: Vec<usize> = targets.labels.iter().filter_map(|l| *l).collect();
    if labels.is_empty() {
        return Ok(None);
    }
    if labels.len() != targets.labels.len() {
        // mixed labeled/unlabeled batches are not produced by the training
        // engine; samples without labels are excluded upstream
        return Err(ModelError::Other(
            "batch mixes labeled and unlabeled samples".into(),
        ));
    }
    let logits = heads
        .clf
        .forward(tape, &bundle.store, fwd.r, fwd.input);
    Ok(Some(tape.softmax_ce(logits, labels)))
}

/// Builds the discriminator update loss on a fresh tape: the segmentation
/// network and generator run forward, the synthesized image and MCM are
/// detached, and only the discriminator's parameters receive gradients.
pub fn discriminator_step_loss(
    tape: &mut Tape,
    bundle: &ModelBundle,
    images: &Array4<f32>,
) -> Result<(NodeId, f32), ModelError> {
    let heads = bundle
        .adversarial
        .as_ref()
        .ok_or_else(|| ModelError::Other("adversarial heads not constructed".into()))?;
    let fwd = bundle.forward_batch(tape, images, None)?;
    let mcm_detached = tape.detach(fwd.mcm_soft);
    let x_syn = heads
        .gen
        .forward(tape, &bundle.store, fwd.input, mcm_detached)?;
    let x_syn_detached = tape.detach(x_syn);
    let real_norm = tape.constant(images.mapv(normalize_hu).into_dyn());
    let d_real = heads
        .disc
        .forward(tape, &bundle.store, real_norm, mcm_detached);
    let d_fake = heads
        .disc
        .forward(tape, &bundle.store, x_syn_detached, mcm_detached);
    let loss = gan_d_loss(tape, d_real, d_fake);
    let value = tape.scalar(loss);
    Ok((loss, value))
}

/// Standalone synthesis: runs the generator over one (image, soft MCM) pair.
pub fn pix2pix_generate(
    bundle: &ModelBundle,
    image: &Array2<f32>,
    mcm_soft: &Array2<f32>,
) -> Result<Array2<f32>, ModelError> {
    if image.dim() != mcm_soft.dim() {
        return Err(ModelError::Other(format!(
            "image {:?} and mcm {:?} resolutions differ",
            image.dim(),
            mcm_soft.dim()
        )));
    }
    let heads = bundle
        .adversarial
        .as_ref()
        .ok_or_else(|| ModelError::Other("adversarial heads not constructed".into()))?;
    let (h, w) = image.dim();
    let mut tape = Tape::new();
    let img = tape.constant(
        image
            .mapv(normalize_hu)
            .into_shape_with_order((1, 1, h, w))
            .unwrap()
            .into_dyn(),
    );
    let mcm = tape.constant(
        mcm_soft
            .clone()
            .into_shape_with_order((1, 1, h, w))
            .unwrap()
            .into_dyn(),
    );
    let out = heads.gen.forward(&mut tape, &bundle.store, img, mcm)?;
    Ok(tape
        .value(out)
        .view()
        .into_dimensionality::<ndarray::Ix4>()
        .unwrap()
        .index_axis(ndarray::Axis(0), 0)
        .index_axis(ndarray::Axis(0), 0)
        .to_owned())
}

/// Mean absolute error between two equally-shaped maps.
pub fn l1_loss(a: &Array2<f32>, b: &Array2<f32>) -> Result<f32, ModelError> {
    if a.dim() != b.dim() {
        return Err(ModelError::Other(format!(
            "l1 shapes differ: {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    let n = a.len() as f64;
    let s: f64 = a
        .iter()
        .zip(b.iter())
        .map(|(&x, &y)| (x - y).abs() as f64)
        .sum();
    Ok((s / n) as f32)
}
