//! Synthetic nodule phantom generator with simulated annotators.
//!
//! Renders a soft-edged disk nodule (solid core around HU 0 inside a
//! ground-glass halo around HU -750 over lung background near HU -900),
//! optionally with a cavity or radial low-density spiculation spikes, and
//! simulates 2-4 annotators as HU-threshold contours at jittered levels. By
//! construction the consensus (intersection) region is dominated by core
//! density and the disagreement (LC) region by halo density.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::DataError;
use crate::mask::{AnnotationSet, BinaryMask, Malignancy};
use crate::nn::normal;

/// Generation parameters; defaults target a 64x64 patch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub patch_size: usize,
    pub core_hu_mean: f32,
    pub halo_hu_mean: f32,
    pub background_hu_mean: f32,
    /// Core radius range in pixels.
    pub core_radius: (f32, f32),
    /// Halo (outer) radius range in pixels.
    pub halo_radius: (f32, f32),
    pub noise_sigma: f32,
    /// Softness of the core/halo transition, pixels.
    pub edge_softness: f32,
    /// Shape exponent of the core/halo transition: the blend weight is
    /// `1 - (1 - sigmoid)^p`. Values above 1 steepen the approach to solid
    /// core density while stretching the low-density shoulder the annotators
    /// threshold on.
    pub core_profile_power: f32,
    /// Softness of the halo/background transition, pixels. The nodule rim
    /// against aerated lung is the sharper of the two boundaries.
    pub outer_edge_softness: f32,
    /// Threshold band of the consensus annotators (HU). Must stay below the
    /// core/halo midpoint so every mask contains the core.
    pub threshold_consensus: (f32, f32),
    /// Threshold range of the single loose annotator outlining the
    /// ground-glass halo (HU). Must stay above the background mean.
    pub threshold_loose: (f32, f32),
    /// Allow cavitated nodules (image-only feature).
    pub cavity: bool,
    /// Allow spiculated nodules; spiculation defines the malignant class.
    pub spiculation: bool,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self::for_patch(64)
    }
}

impl PhantomSpec {
    /// Defaults scaled to an arbitrary patch size (divisible by 32).
    pub fn for_patch(patch_size: usize) -> Self {
        let s = patch_size as f32 / 64.0;
        Self {
            patch_size,
            core_hu_mean: 0.0,
            halo_hu_mean: -750.0,
            background_hu_mean: -900.0,
            core_radius: (5.0 * s, 9.0 * s),
            halo_radius: (15.0 * s, 21.0 * s),
            noise_sigma: 25.0,
            edge_softness: 1.2,
            core_profile_power: 1.0,
            outer_edge_softness: 0.55,
            threshold_consensus: (-655.0, -560.0),
            threshold_loose: (-808.0, -792.0),
            cavity: true,
            spiculation: true,
        }
    }

    /// Disagreement-heavy variant: a larger ground-glass halo and a wider
    /// consensus band, so the LC ring is wide and the strict consensus
    /// (intersection) inherits more annotator variability.
    pub fn lc_heavy(patch_size: usize) -> Self {
        let s = patch_size as f32 / 64.0;
        Self {
            core_radius: (10.0 * s, 14.0 * s),
            halo_radius: (15.0 * s, 21.0 * s),
            threshold_consensus: (-640.0, -550.0),
            threshold_loose: (-808.0, -792.0),
            ..Self::for_patch(patch_size)
        }
    }

    /// Degenerate jitter: every annotator thresholds at the same level, so
    /// all masks coincide and the LC region is empty.
    pub fn with_zero_jitter(mut self, threshold: f32) -> Self {
        self.threshold_consensus = (threshold, threshold);
        self.threshold_loose = (threshold, threshold);
        self
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let half = self.patch_size as f32 / 2.0;
        let ordered = self.core_radius.0 <= self.core_radius.1
            && self.halo_radius.0 <= self.halo_radius.1
            && self.core_radius.1 < self.halo_radius.0
            && self.halo_radius.1 < half;
        if !ordered {
            return Err(DataError::InvalidSpec(format!(
                "radii must satisfy core {:?} < halo {:?} < patch/2 {half}",
                self.core_radius, self.halo_radius
            )));
        }
        let midpoint = (self.core_hu_mean + self.halo_hu_mean) / 2.0;
        if self.threshold_consensus.0 > self.threshold_consensus.1
            || self.threshold_loose.0 > self.threshold_loose.1
            || self.threshold_consensus.1 > midpoint
            || self.threshold_loose.0 <= self.background_hu_mean
            || self.threshold_loose.1 > self.threshold_consensus.0
        {
            return Err(DataError::InvalidSpec(format!(
                "thresholds must satisfy background {} < loose {:?} <= consensus {:?} <= core/halo midpoint {midpoint}",
                self.background_hu_mean, self.threshold_loose, self.threshold_consensus
            )));
        }
        if self.background_hu_mean >= self.halo_hu_mean || self.halo_hu_mean >= self.core_hu_mean {
            return Err(DataError::InvalidSpec(
                "densities must satisfy background < halo < core".into(),
            ));
        }
        Ok(())
    }
}

fn logistic(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

struct Spikes {
    angles: Vec<f32>,
    amps: Vec<f32>,
    width: f32,
}

impl Spikes {
    /// Relative halo radius elongation at polar angle theta.
    fn elongation(&self, theta: f32) -> f32 {
        let mut e = 0.0;
        for (&a, &amp) in self.angles.iter().zip(self.amps.iter()) {
            let mut d = (theta - a).abs() % (2.0 * std::f32::consts::PI);
            if d > std::f32::consts::PI {
                d = 2.0 * std::f32::consts::PI - d;
            }
            e += amp * (-0.5 * (d / self.width) * (d / self.width)).exp();
        }
        e
    }
}

/// Generates one phantom annotation set; byte-deterministic in (spec, seed).
pub fn generate_phantom(spec: &PhantomSpec, seed: u64) -> Result<AnnotationSet, DataError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = spec.patch_size;
    let pf = p as f32;

    let jitter = pf * 0.04;
    let cx = pf / 2.0 + rng.gen_range(-jitter..=jitter);
    let cy = pf / 2.0 + rng.gen_range(-jitter..=jitter);
    let core_r = rng.gen_range(spec.core_radius.0..=spec.core_radius.1);
    let halo_r = rng.gen_range(spec.halo_radius.0..=spec.halo_radius.1);

    let spiculated = spec.spiculation && rng.gen_bool(0.5);
    let cavitated = spec.cavity && rng.gen_bool(0.3);
    let spikes = spiculated.then(|| {
        let k = rng.gen_range(3..=6);
        Spikes {
            angles: (0..k)
                .map(|_| rng.gen_range(0.0..2.0 * std::f32::consts::PI))
                .collect(),
            amps: (0..k).map(|_| rng.gen_range(0.10..0.22)).collect(),
            width: 0.22,
        }
    });

    // nodule extent field: smooth density ignoring cavity and noise; also the
    // field the simulated annotators threshold
    let extent = |i: usize, j: usize| -> f32 {
        let dy = i as f32 + 0.5 - cy;
        let dx = j as f32 + 0.5 - cx;
        let d = (dx * dx + dy * dy).sqrt();
        let theta = dy.atan2(dx);
        let local_halo = match &spikes {
            Some(s) => halo_r * (1.0 + s.elongation(theta)),
            None => halo_r,
        };
        let w_halo = logistic((local_halo - d) / spec.outer_edge_softness);
        let sig = logistic((core_r - d) / spec.edge_softness);
        let w_core = 1.0 - (1.0 - sig).powf(spec.core_profile_power);
        spec.background_hu_mean
            + (spec.halo_hu_mean - spec.background_hu_mean) * w_halo
            + (spec.core_hu_mean - spec.halo_hu_mean) * w_core
    };

    let cavity_r = core_r * 0.45;
    let cavity_hu = spec.background_hu_mean * 0.95;
    let mut image = Array2::<f32>::zeros((p, p));
    for i in 0..p {
        for j in 0..p {
            let mut v = extent(i, j);
            if cavitated {
                let dy = i as f32 + 0.5 - cy;
                let dx = j as f32 + 0.5 - cx;
                let d = (dx * dx + dy * dy).sqrt();
                let w_cav = logistic((cavity_r - d) / (spec.edge_softness * 0.8));
                v += (cavity_hu - spec.core_hu_mean) * w_cav;
            }
            image[[i, j]] = v + spec.noise_sigma * normal(&mut rng);
        }
    }

    // annotators: n-1 draw from the tight consensus band, the last outlines
    // the ground-glass halo. The consensus cluster keeps the reference
    // annotation predictable while the loose outline keeps the LC ring wide.
    let n = rng.gen_range(2..=4usize);
    let mut thresholds = Vec::with_capacity(n);
    for _ in 0..n - 1 {
        thresholds.push(rng.gen_range(spec.threshold_consensus.0..=spec.threshold_consensus.1));
    }
    thresholds.push(rng.gen_range(spec.threshold_loose.0..=spec.threshold_loose.1));

    let masks: Vec<BinaryMask> = thresholds
        .iter()
        .map(|&t| {
            BinaryMask::new(Array2::from_shape_fn((p, p), |(i, j)| {
                u8::from(extent(i, j) >= t)
            }))
            .expect("mask values are 0/1 by construction")
        })
        .collect();

    let malignancy = if spiculated {
        Malignancy::Malignant
    } else {
        Malignancy::Benign
    };
    AnnotationSet::new(format!("phantom-{seed:016x}"), image, masks, malignancy)
        .map_err(|e| DataError::InvalidSpec(e.to_string()))
}

/// Generates phantoms until each malignancy class holds `per_class` samples,
/// advancing the seed by one per attempt. Small five-fold runs need exact
/// class balance to satisfy the stratification tolerance.
pub fn generate_balanced_set(
    spec: &PhantomSpec,
    per_class: usize,
    base_seed: u64,
) -> Result<Vec<AnnotationSet>, DataError> {
    if per_class > 0 && !spec.spiculation {
        return Err(DataError::InvalidSpec(
            "balanced generation needs spiculation enabled for the malignant class".into(),
        ));
    }
    let mut out = Vec::with_capacity(2 * per_class);
    let (mut benign, mut malignant) = (0usize, 0usize);
    let mut seed = base_seed;
    while benign < per_class || malignant < per_class {
        let set = generate_phantom(spec, seed)?;
        seed = seed.wrapping_add(1);
        match set.malignancy {
            Malignancy::Benign if benign < per_class => {
                benign += 1;
                out.push(set);
            }
            Malignancy::Malignant if malignant < per_class => {
                malignant += 1;
                out.push(set);
            }
            _ => {}
        }
    }
    Ok(out)
}
