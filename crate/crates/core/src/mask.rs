//! Multi-annotation mask algebra.
//!
//! Builds every learning target used by the network — union, intersection,
//! low-confidence (disagreement) region, reference annotation and the fused
//! Multi-Confidence Mask — from a set of expert masks, and decodes predicted
//! soft maps back into discrete confidence levels.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::InvalidInput;
use crate::metrics::dice;

/// Discrete MCM levels: background, low confidence, high confidence.
pub const MCM_BACKGROUND: f32 = 0.0;
pub const MCM_LOW_CONFIDENCE: f32 = 0.5;
pub const MCM_HIGH_CONFIDENCE: f32 = 1.0;

/// Lower discretization threshold between background and LC.
pub const MCM_THRESHOLD_LOW: f32 = 0.25;
/// Upper discretization threshold between LC and HC.
pub const MCM_THRESHOLD_HIGH: f32 = 0.75;

/// A single expert annotation: a 2-D array of {0,1}.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    data: Array2<u8>,
}

impl BinaryMask {
    /// Wraps a 2-D array after checking every element is 0 or 1.
    pub fn new(data: Array2<u8>) -> Result<Self, InvalidInput> {
        if data.nrows() == 0 || data.ncols() == 0 {
            return Err(InvalidInput::Other("mask has a zero dimension".into()));
        }
        for ((r, c), &v) in data.indexed_iter() {
            if v > 1 {
                return Err(InvalidInput::OutOfRange {
                    row: r,
                    col: c,
                    value: v as f32,
                });
            }
        }
        Ok(Self { data })
    }

    /// Builds a mask by thresholding a soft map at 0.5.
    pub fn from_soft(map: &Array2<f32>) -> Self {
        Self {
            data: map.mapv(|v| if v > 0.5 { 1u8 } else { 0u8 }),
        }
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            data: Array2::zeros((height, width)),
        }
    }

    pub fn data(&self) -> &Array2<u8> {
        &self.data
    }

    pub fn height(&self) -> usize {
        self.data.nrows()
    }

    pub fn width(&self) -> usize {
        self.data.ncols()
    }

    pub fn shape2(&self) -> (usize, usize) {
        (self.data.nrows(), self.data.ncols())
    }

    /// Number of foreground pixels.
    pub fn area(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    /// The mask as an f32 map of {0.0, 1.0}.
    pub fn to_f32(&self) -> Array2<f32> {
        self.data.mapv(|v| v as f32)
    }
}

/// Malignancy label attached to an annotation set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Malignancy {
    Benign,
    Malignant,
}

impl Malignancy {
    pub fn class_index(self) -> usize {
        match self {
            Malignancy::Benign => 0,
            Malignancy::Malignant => 1,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Malignancy::Benign => "benign",
            Malignancy::Malignant => "malignant",
        }
    }
}

/// A CT patch with up to four expert masks plus a malignancy label; the unit
/// of supervision.
#[derive(Debug, Clone)]
pub struct AnnotationSet {
    pub sample_id: String,
    /// HU values, row-major.
    pub image: Array2<f32>,
    pub masks: Vec<BinaryMask>,
    pub malignancy: Malignancy,
}

impl AnnotationSet {
    pub fn new(
        sample_id: String,
        image: Array2<f32>,
        masks: Vec<BinaryMask>,
        malignancy: Malignancy,
    ) -> Result<Self, InvalidInput> {
        if masks.is_empty() || masks.len() > 4 {
            return Err(InvalidInput::Other(format!(
                "annotation count {} outside 1..=4",
                masks.len()
            )));
        }
        let shape = (image.nrows(), image.ncols());
        for m in &masks {
            if m.shape2() != shape {
                return Err(InvalidInput::ShapeMismatch {
                    expected: shape,
                    got: m.shape2(),
                });
            }
        }
        Ok(Self {
            sample_id,
            image,
            masks,
            malignancy,
        })
    }

    pub fn height(&self) -> usize {
        self.image.nrows()
    }

    pub fn width(&self) -> usize {
        self.image.ncols()
    }

    pub fn n_annotations(&self) -> usize {
        self.masks.len()
    }
}

/// Fused confidence map with levels {background, LC, HC}. Holds both the soft
/// fusion and its discretization.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiConfidenceMask {
    /// Values in [0, 1].
    pub soft: Array2<f32>,
    /// Values in {0, 0.5, 1}.
    pub discrete: Array2<f32>,
}

fn check_same_shape(masks: &[BinaryMask]) -> Result<(usize, usize), InvalidInput> {
    let first = masks.first().ok_or(InvalidInput::EmptyMaskList)?;
    let shape = first.shape2();
    for m in masks.iter().skip(1) {
        if m.shape2() != shape {
            return Err(InvalidInput::ShapeMismatch {
                expected: shape,
                got: m.shape2(),
            });
        }
    }
    Ok(shape)
}

/// Pixelwise OR of all masks: the largest plausible nodule region.
pub fn union(masks: &[BinaryMask]) -> Result<BinaryMask, InvalidInput> {
    let shape = check_same_shape(masks)?;
    let mut out = Array2::<u8>::zeros(shape);
    for m in masks {
        out.zip_mut_with(m.data(), |o, &v| *o |= v);
    }
    Ok(BinaryMask { data: out })
}

/// Pixelwise AND of all masks: the region of full annotator consensus.
pub fn intersection(masks: &[BinaryMask]) -> Result<BinaryMask, InvalidInput> {
    let shape = check_same_shape(masks)?;
    let mut out = Array2::<u8>::ones(shape);
    for m in masks {
        out.zip_mut_with(m.data(), |o, &v| *o &= v);
    }
    Ok(BinaryMask { data: out })
}

/// Union minus intersection: the region where annotators disagree.
pub fn lc_region(masks: &[BinaryMask]) -> Result<BinaryMask, InvalidInput> {
    let u = union(masks)?;
    let i = intersection(masks)?;
    let mut out = u.data;
    out.zip_mut_with(&i.data, |o, &v| *o &= 1 - v);
    Ok(BinaryMask { data: out })
}

/// Fuses a union map and an intersection map into a Multi-Confidence Mask.
///
/// The soft fusion is `(union + intersection) / 2`, so binary inputs land
/// exactly on the three canonical levels {0, 0.5, 1}. The discrete map
/// thresholds the soft map at 0.25 and 0.75.
pub fn build_mcm(
    union_map: &Array2<f32>,
    inter_map: &Array2<f32>,
) -> Result<MultiConfidenceMask, InvalidInput> {
    if union_map.dim() != inter_map.dim() {
        return Err(InvalidInput::ShapeMismatch {
            expected: union_map.dim(),
            got: inter_map.dim(),
        });
    }
    for map in [union_map, inter_map] {
        for ((r, c), &v) in map.indexed_iter() {
            if !(0.0..=1.0).contains(&v) {
                return Err(InvalidInput::OutOfRange {
                    row: r,
                    col: c,
                    value: v,
                });
            }
        }
    }
    let soft = (union_map + inter_map) / 2.0;
    let discrete = soft.mapv(|v| {
        if v < MCM_THRESHOLD_LOW {
            MCM_BACKGROUND
        } else if v < MCM_THRESHOLD_HIGH {
            MCM_LOW_CONFIDENCE
        } else {
            MCM_HIGH_CONFIDENCE
        }
    });
    Ok(MultiConfidenceMask { soft, discrete })
}

/// Picks the single reference annotation R(A): the mask maximizing mean
/// pairwise Dice with the other annotations, ties broken by lowest index.
/// With a single annotation, that annotation is returned.
pub fn select_reference(masks: &[BinaryMask]) -> Result<(BinaryMask, usize), InvalidInput> {
    check_same_shape(masks)?;
    if masks.len() == 1 {
        return Ok((masks[0].clone(), 0));
    }
    let mut best_idx = 0usize;
    let mut best_score = f64::NEG_INFINITY;
    for (i, mi) in masks.iter().enumerate() {
        let mut sum = 0.0f64;
        for (j, mj) in masks.iter().enumerate() {
            if i != j {
                sum += dice(mi, mj).expect("shapes checked above");
            }
        }
        let mean = sum / (masks.len() - 1) as f64;
        if mean > best_score {
            best_score = mean;
            best_idx = i;
        }
    }
    Ok((masks[best_idx].clone(), best_idx))
}

/// All supervision targets derived from one annotation set.
#[derive(Debug, Clone)]
pub struct Targets {
    pub union: BinaryMask,
    pub intersection: BinaryMask,
    pub lc: BinaryMask,
    pub reference: BinaryMask,
    pub reference_index: usize,
    pub mcm: MultiConfidenceMask,
}

/// Convenience: derives union, intersection, LC, reference and MCM in one go.
pub fn derive_targets(set: &AnnotationSet) -> Result<Targets, InvalidInput> {
    let u = union(&set.masks)?;
    let i = intersection(&set.masks)?;
    let lc = lc_region(&set.masks)?;
    let (reference, reference_index) = select_reference(&set.masks)?;
    let mcm = build_mcm(&u.to_f32(), &i.to_f32())?;
    Ok(Targets {
        union: u,
        intersection: i,
        lc,
        reference,
        reference_index,
        mcm,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn mask(rows: Vec<Vec<u8>>) -> BinaryMask {
        let h = rows.len();
        let w = rows[0].len();
        let flat: Vec<u8> = rows.into_iter().flatten().collect();
        BinaryMask::new(Array2::from_shape_vec((h, w), flat).unwrap()).unwrap()
    }

    fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize) -> BinaryMask {
        BinaryMask::new(Array2::from_shape_fn((h, w), |_| rng.gen_range(0..=1u8))).unwrap()
    }

    #[test]
    fn union_identical_masks_is_idempotent() {
        let m = mask(vec![vec![1, 0], vec![0, 1]]);
        let u = union(&[m.clone(), m.clone()]).unwrap();
        assert_eq!(u, m);
    }

    #[test]
    fn union_or_truth_table() {
        let a = mask(vec![vec![1, 0]]);
        let b = mask(vec![vec![0, 1]]);
        let u = union(&[a, b]).unwrap();
        assert_eq!(u, mask(vec![vec![1, 1]]));
    }

    #[test]
    fn union_matches_per_pixel_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let masks: Vec<BinaryMask> = (0..4).map(|_| random_mask(&mut rng, 8, 8)).collect();
        let got = union(&masks).unwrap();
        // brute-force per-pixel OR
        for r in 0..8 {
            for c in 0..8 {
                let expect = masks.iter().map(|m| m.data()[[r, c]]).max().unwrap();
                assert_eq!(got.data()[[r, c]], expect);
            }
        }
    }

    #[test]
    fn intersection_identical_and_disjoint() {
        let m = mask(vec![vec![1, 0], vec![0, 1]]);
        assert_eq!(intersection(&[m.clone(), m.clone()]).unwrap(), m);
        let a = mask(vec![vec![1, 0]]);
        let b = mask(vec![vec![0, 1]]);
        assert_eq!(
            intersection(&[a, b]).unwrap(),
            mask(vec![vec![0, 0]])
        );
    }

    #[test]
    fn intersection_matches_per_pixel_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let masks: Vec<BinaryMask> = (0..4).map(|_| random_mask(&mut rng, 8, 8)).collect();
        let got = intersection(&masks).unwrap();
        for r in 0..8 {
            for c in 0..8 {
                let expect = masks.iter().map(|m| m.data()[[r, c]]).min().unwrap();
                assert_eq!(got.data()[[r, c]], expect);
            }
        }
    }

    #[test]
    fn lc_region_cases() {
        let m = mask(vec![vec![1, 0], vec![0, 1]]);
        assert_eq!(
            lc_region(&[m.clone(), m.clone()]).unwrap().area(),
            0,
            "no disagreement between identical masks"
        );
        let a = mask(vec![vec![1, 1]]);
        let b = mask(vec![vec![1, 0]]);
        assert_eq!(lc_region(&[a, b]).unwrap(), mask(vec![vec![0, 1]]));
    }

    #[test]
    fn lc_region_matches_or_and_not_and_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let masks: Vec<BinaryMask> = (0..3).map(|_| random_mask(&mut rng, 8, 8)).collect();
        let got = lc_region(&masks).unwrap();
        for r in 0..8 {
            for c in 0..8 {
                let or = masks.iter().map(|m| m.data()[[r, c]]).max().unwrap();
                let and = masks.iter().map(|m| m.data()[[r, c]]).min().unwrap();
                assert_eq!(got.data()[[r, c]], or & !and & 1);
            }
        }
    }

    #[test]
    fn mcm_full_agreement_has_no_lc_level() {
        let m = mask(vec![vec![1, 0], vec![0, 1]]).to_f32();
        let mcm = build_mcm(&m, &m).unwrap();
        assert_eq!(mcm.soft, m);
        assert!(mcm.discrete.iter().all(|&v| v == 0.0 || v == 1.0));
    }

    #[test]
    fn mcm_disagreement_pixel_is_lc() {
        let u = array![[1.0f32]];
        let i = array![[0.0f32]];
        let mcm = build_mcm(&u, &i).unwrap();
        assert_eq!(mcm.soft[[0, 0]], 0.5);
        assert_eq!(mcm.discrete[[0, 0]], MCM_LOW_CONFIDENCE);
    }

    #[test]
    fn mcm_soft_inputs_average() {
        let u = array![[0.9f32]];
        let i = array![[0.1f32]];
        let mcm = build_mcm(&u, &i).unwrap();
        assert!((mcm.soft[[0, 0]] - 0.5).abs() < 1e-7);
    }

    #[test]
    fn mcm_rejects_out_of_range() {
        let u = array![[1.5f32]];
        let i = array![[0.0f32]];
        assert!(matches!(
            build_mcm(&u, &i),
            Err(InvalidInput::OutOfRange { .. })
        ));
    }

    #[test]
    fn select_reference_single_mask() {
        let m = mask(vec![vec![1, 0]]);
        let (r, idx) = select_reference(std::slice::from_ref(&m)).unwrap();
        assert_eq!(idx, 0);
        assert_eq!(r, m);
    }

    #[test]
    fn select_reference_prefers_consensus_pair() {
        // mask 1 == mask 2, mask 0 disjoint from both -> index 1 by tie-break
        let a = mask(vec![vec![1, 0, 0, 0]]);
        let b = mask(vec![vec![0, 0, 1, 1]]);
        let (_, idx) = select_reference(&[a, b.clone(), b]).unwrap();
        assert_eq!(idx, 1);
    }

    #[test]
    fn select_reference_matches_exhaustive_pairwise_dice() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        for _ in 0..20 {
            let masks: Vec<BinaryMask> = (0..4).map(|_| random_mask(&mut rng, 8, 8)).collect();
            let (_, idx) = select_reference(&masks).unwrap();
            // brute-force: mean pairwise dice per candidate
            let mut best = (0usize, f64::NEG_INFINITY);
            for i in 0..masks.len() {
                let mut s = 0.0;
                for j in 0..masks.len() {
                    if i != j {
                        s += dice(&masks[i], &masks[j]).unwrap();
                    }
                }
                let mean = s / 3.0;
                if mean > best.1 {
                    best = (i, mean);
                }
            }
            assert_eq!(idx, best.0);
        }
    }

    #[test]
    fn empty_list_is_an_error() {
        assert!(matches!(union(&[]), Err(InvalidInput::EmptyMaskList)));
        assert!(matches!(select_reference(&[]), Err(InvalidInput::EmptyMaskList)));
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let a = mask(vec![vec![1, 0]]);
        let b = mask(vec![vec![1], vec![0]]);
        assert!(matches!(
            union(&[a, b]),
            Err(InvalidInput::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn subset_chain_and_monotonicity() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        for _ in 0..50 {
            let n = rng.gen_range(1..=4);
            let masks: Vec<BinaryMask> = (0..n).map(|_| random_mask(&mut rng, 6, 6)).collect();
            let u = union(&masks).unwrap();
            let i = intersection(&masks).unwrap();
            for m in &masks {
                for (p, (&iv, &mv)) in i.data().iter().zip(m.data().iter()).enumerate() {
                    assert!(iv <= mv, "intersection exceeds mask at {p}");
                }
                for (&mv, &uv) in m.data().iter().zip(u.data().iter()) {
                    assert!(mv <= uv);
                }
            }
            // adding a mask never shrinks union, never grows intersection
            let extra = random_mask(&mut rng, 6, 6);
            let mut bigger = masks.clone();
            bigger.push(extra);
            let u2 = union(&bigger).unwrap();
            let i2 = intersection(&bigger).unwrap();
            for (&a, &b) in u.data().iter().zip(u2.data().iter()) {
                assert!(a <= b);
            }
            for (&a, &b) in i2.data().iter().zip(i.data().iter()) {
                assert!(a <= b);
            }
        }
    }
}
