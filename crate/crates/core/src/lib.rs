//! Uncertainty-aware lung nodule segmentation with multiple annotations.
//!
//! The crate covers the full pipeline: multi-annotation mask algebra and
//! Multi-Confidence Mask construction, classical adaptive filters, a
//! three-branch shared-encoder segmentation network with Feature-Aware
//! Concatenation, a joint adversarial training objective (pix2pix synthesis
//! plus a malignancy discriminator), a portable dataset format with a
//! synthetic nodule phantom generator, five-fold stratified evaluation, and
//! HU kernel-density analysis of the predicted confidence regions.

pub mod adversarial;
pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod filters;
pub mod mask;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod plot;
pub mod train;

pub use error::Error;
pub use mask::{AnnotationSet, BinaryMask, Malignancy, MultiConfidenceMask};
pub use model::{ModelBundle, NetworkOutput};
