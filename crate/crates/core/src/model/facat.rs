//! Feature-Aware Concatenation: a Squeeze-and-Excitation block followed by a
//! Squeeze-and-Adapt block that appends features extracted by a classical
//! filter (Sobel gradient magnitude or Otsu binarization). The filter output
//! is a gradient barrier: the appended channels carry no gradient.

use ndarray::{Array3, Array4, Axis};
use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, ParamSlot, Tape};
use crate::error::{InvalidInput, ModelError};
use crate::filters::{otsu_channel, sobel_channel, FeatureMap};
use crate::nn::{he_normal, Conv2d, ParamStore};
use rand_chacha::ChaCha8Rng;

/// Classical feature extractor selecting the learning preference of a branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdaptiveMethod {
    Sobel,
    Otsu,
}

/// Parameters of one FA-Cat block: excitation matrices, the 1x1 compression
/// convolution and the adaptive method.
///
/// `w1` has shape (C, C/16) and `w2` has shape (C/16, C); the excitation is
/// `sigmoid(w1 . relu(w2 . z))` on the channel-mean vector `z`.
#[derive(Debug, Clone)]
pub struct FaCat {
    pub channels: usize,
    pub w1: ParamSlot,
    pub w2: ParamSlot,
    pub compress: Conv2d,
    pub method: AdaptiveMethod,
    /// When set, the Otsu variant appends `mask * U'` instead of the bare
    /// binary mask. Still a gradient barrier.
    pub otsu_masked: bool,
}

impl FaCat {
    pub fn init(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        channels: usize,
        method: AdaptiveMethod,
        otsu_masked: bool,
    ) -> Result<Self, ModelError> {
        if channels % 16 != 0 {
            return Err(ModelError::ChannelsNotDivisible { channels });
        }
        let squeezed = channels / 16;
        let w1 = store.add(
            &format!("{name}.se.w1"),
            he_normal(rng, &[channels, squeezed], squeezed),
        );
        let w2 = store.add(
            &format!("{name}.se.w2"),
            he_normal(rng, &[squeezed, channels], channels),
        );
        let compress = Conv2d::init(store, rng, &format!("{name}.sa.compress"), channels, squeezed, 1, 1, 0);
        Ok(Self {
            channels,
            w1,
            w2,
            compress,
            method,
            otsu_masked,
        })
    }

    /// Extra channels appended by the SA block.
    pub fn extra_channels(&self) -> usize {
        self.channels / 16
    }

    /// SE block: channel gate from global average pooling through the
    /// squeeze/expand bottleneck.
    pub fn se_forward(&self, tape: &mut Tape, store: &ParamStore, x: NodeId) -> NodeId {
        let z = tape.spatial_mean(x);
        let w2 = store.leaf(tape, self.w2);
        let h = tape.linear_t(z, w2);
        let h = tape.relu(h);
        let w1 = store.leaf(tape, self.w1);
        let zt = tape.linear_t(h, w1);
        let gate = tape.sigmoid(zt);
        tape.scale_channels(x, gate)
    }

    /// SA block: 1x1 compression to C/16 channels, classical filter with
    /// gradient flow blocked, then channel concatenation back onto `u`.
    ///
    /// Returns the concatenated node and the filtered activations of batch
    /// item 0 (for heatmap taps).
    pub fn sa_forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        u: NodeId,
    ) -> Result<NodeId, ModelError> {
        let compressed = self.compress.forward(tape, store, u);
        let cv = tape
            .value(compressed)
            .view()
            .into_dimensionality::<ndarray::Ix4>()
            .unwrap()
            .to_owned();
        let (bsz, cc, h, w) = cv.dim();
        let mut filtered = Array4::<f32>::zeros((bsz, cc, h, w));
        for n in 0..bsz {
            let item = cv.index_axis(Axis(0), n).to_owned();
            let fm = FeatureMap::new(item).map_err(|e| match e {
                InvalidInput::NonFinite => ModelError::NonFiniteActivation {
                    stage: "sa_block compression".into(),
                },
                other => ModelError::Other(other.to_string()),
            })?;
            let mut out = Array3::<f32>::zeros((cc, h, w));
            for ch in 0..cc {
                let channel = fm.data().index_axis(Axis(0), ch);
                let f = match self.method {
                    AdaptiveMethod::Sobel => sobel_channel(channel),
                    AdaptiveMethod::Otsu => {
                        let mut mask = otsu_channel(channel);
                        if self.otsu_masked {
                            mask.zip_mut_with(&channel, |m, &v| *m *= v);
                        }
                        mask
                    }
                };
                out.index_axis_mut(Axis(0), ch).assign(&f);
            }
            filtered.index_axis_mut(Axis(0), n).assign(&out);
        }
        // gradient barrier: the filtered features enter as a constant leaf
        let f_node = tape.constant(filtered.into_dyn());
        Ok(tape.concat_channels(&[u, f_node]))
    }

    /// Full block: SA after SE. Output has C + C/16 channels.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: NodeId,
    ) -> Result<NodeId, ModelError> {
        let u = self.se_forward(tape, store, x);
        self.sa_forward(tape, store, u)
    }
}

fn single_to_batch(x: &FeatureMap) -> crate::autodiff::Ax {
    let (c, h, w) = x.data().dim();
    x.data()
        .clone()
        .into_shape_with_order((1, c, h, w))
        .unwrap()
        .into_dyn()
}

fn batch_to_single(v: &crate::autodiff::Ax) -> Array3<f32> {
    let view = v.view().into_dimensionality::<ndarray::Ix4>().unwrap();
    view.index_axis(Axis(0), 0).to_owned()
}

/// Applies only the SE block to a single feature map.
pub fn se_block(
    facat: &FaCat,
    store: &ParamStore,
    x: &FeatureMap,
) -> Result<FeatureMap, ModelError> {
    if x.channels() != facat.channels {
        return Err(ModelError::ChannelMismatch {
            expected: facat.channels,
            got: x.channels(),
        });
    }
    let mut tape = Tape::new();
    let input = tape.constant(single_to_batch(x));
    let out = facat.se_forward(&mut tape, store, input);
    Ok(FeatureMap::new(batch_to_single(tape.value(out))).expect("finite by construction"))
}

/// Applies only the SA block to a single feature map.
pub fn sa_block(
    facat: &FaCat,
    store: &ParamStore,
    u: &FeatureMap,
) -> Result<FeatureMap, ModelError> {
    if u.channels() % 16 != 0 {
        return Err(ModelError::ChannelsNotDivisible {
            channels: u.channels(),
        });
    }
    if u.channels() != facat.channels {
        return Err(ModelError::ChannelMismatch {
            expected: facat.channels,
            got: u.channels(),
        });
    }
    let mut tape = Tape::new();
    let input = tape.constant(single_to_batch(u));
    let out = facat.sa_forward(&mut tape, store, input)?;
    Ok(FeatureMap::new(batch_to_single(tape.value(out))).expect("finite by construction"))
}

/// Applies the whole FA-Cat block to a single feature map.
pub fn fa_cat(
    facat: &FaCat,
    store: &ParamStore,
    x: &FeatureMap,
) -> Result<FeatureMap, ModelError> {
    if x.channels() != facat.channels {
        return Err(ModelError::ChannelMismatch {
            expected: facat.channels,
            got: x.channels(),
        });
    }
    let mut tape = Tape::new();
    let input = tape.constant(single_to_batch(x));
    let u = facat.se_forward(&mut tape, store, input);
    let out = facat.sa_forward(&mut tape, store, u)?;
    Ok(FeatureMap::new(batch_to_single(tape.value(out))).expect("finite by construction"))
}
