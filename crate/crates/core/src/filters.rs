//! Classical, parameter-free feature extractors used inside the
//! Squeeze-and-Adapt block: per-channel Sobel gradient magnitude and
//! per-channel Otsu binarization. Both are non-trainable and act as gradient
//! barriers in the network.

use ndarray::{Array2, Array3, ArrayView2};

use crate::error::InvalidInput;

/// Rank-3 activation volume (channels x height x width) with finite values.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    data: Array3<f32>,
}

impl FeatureMap {
    /// Validates dimensions >= 1 and that every value is finite.
    pub fn new(data: Array3<f32>) -> Result<Self, InvalidInput> {
        let (c, h, w) = data.dim();
        if c == 0 || h == 0 || w == 0 {
            return Err(InvalidInput::Other(format!(
                "feature map has a zero dimension: {c}x{h}x{w}"
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(InvalidInput::NonFinite);
        }
        Ok(Self { data })
    }

    pub fn data(&self) -> &Array3<f32> {
        &self.data
    }

    pub fn into_inner(self) -> Array3<f32> {
        self.data
    }

    pub fn channels(&self) -> usize {
        self.data.dim().0
    }
}

const SOBEL_X: [[f32; 3]; 3] = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];

/// Sobel gradient magnitude of one channel with replicate (edge-clamp)
/// padding. Returns all zeros when the channel is smaller than the kernel.
pub(crate) fn sobel_channel(x: ArrayView2<'_, f32>) -> Array2<f32> {
    let (h, w) = x.dim();
    if h < 3 || w < 3 {
        return Array2::zeros((h, w));
    }
    let clamp = |i: isize, n: usize| -> usize { i.clamp(0, n as isize - 1) as usize };
    let mut out = Array2::<f32>::zeros((h, w));
    for i in 0..h {
        for j in 0..w {
            let mut gx = 0.0f32;
            let mut gy = 0.0f32;
            for di in -1isize..=1 {
                for dj in -1isize..=1 {
                    let v = x[[clamp(i as isize + di, h), clamp(j as isize + dj, w)]];
                    gx += SOBEL_X[(di + 1) as usize][(dj + 1) as usize] * v;
                    // Gy is the transpose of Gx
                    gy += SOBEL_X[(dj + 1) as usize][(di + 1) as usize] * v;
                }
            }
            out[[i, j]] = (gx * gx + gy * gy).sqrt();
        }
    }
    out
}

/// Per-channel Sobel gradient magnitude. Output shape equals the input shape.
pub fn sobel_magnitude(x: &FeatureMap) -> FeatureMap {
    let (c, h, w) = x.data.dim();
    let mut out = Array3::<f32>::zeros((c, h, w));
    for ch in 0..c {
        let mag = sobel_channel(x.data.index_axis(ndarray::Axis(0), ch));
        out.index_axis_mut(ndarray::Axis(0), ch).assign(&mag);
    }
    FeatureMap { data: out }
}

pub(crate) const OTSU_BINS: usize = 256;

/// Otsu threshold (bin index) of already min-max-normalized values in [0,1].
/// Classes are split as bins 0..=t vs t+1..; ties resolve to the lowest t.
pub(crate) fn otsu_threshold_bin(hist: &[u32; OTSU_BINS], total: usize) -> usize {
    let total = total as f64;
    let mut sum_all = 0.0f64;
    for (i, &h) in hist.iter().enumerate() {
        sum_all += i as f64 * h as f64;
    }
    let mut w0 = 0.0f64;
    let mut sum0 = 0.0f64;
    let mut best_t = 0usize;
    let mut best_var = f64::NEG_INFINITY;
    for t in 0..OTSU_BINS {
        w0 += hist[t] as f64;
        sum0 += t as f64 * hist[t] as f64;
        let w1 = total - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let mu0 = sum0 / w0;
        let mu1 = (sum_all - sum0) / w1;
        let var = (w0 / total) * (w1 / total) * (mu0 - mu1) * (mu0 - mu1);
        if var > best_var {
            best_var = var;
            best_t = t;
        }
    }
    best_t
}

pub(crate) fn normalized_bin(v: f32) -> usize {
    ((v * OTSU_BINS as f32) as usize).min(OTSU_BINS - 1)
}

/// Otsu binarization of one channel: min-max normalize, build a 256-bin
/// histogram, maximize between-class variance, output 1 above the threshold.
/// Constant channels yield all zeros.
pub(crate) fn otsu_channel(x: ArrayView2<'_, f32>) -> Array2<f32> {
    let (h, w) = x.dim();
    let mut lo = f32::INFINITY;
    let mut hi = f32::NEG_INFINITY;
    for &v in x.iter() {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if hi <= lo {
        return Array2::zeros((h, w));
    }
    let range = hi - lo;
    let mut hist = [0u32; OTSU_BINS];
    for &v in x.iter() {
        hist[normalized_bin((v - lo) / range)] += 1;
    }
    let t = otsu_threshold_bin(&hist, h * w);
    Array2::from_shape_fn((h, w), |(i, j)| {
        if normalized_bin((x[[i, j]] - lo) / range) > t {
            1.0
        } else {
            0.0
        }
    })
}

/// Per-channel Otsu binarization; output values are {0, 1}.
pub fn otsu_binarize(x: &FeatureMap) -> FeatureMap {
    let (c, h, w) = x.data.dim();
    let mut out = Array3::<f32>::zeros((c, h, w));
    for ch in 0..c {
        let bin = otsu_channel(x.data.index_axis(ndarray::Axis(0), ch));
        out.index_axis_mut(ndarray::Axis(0), ch).assign(&bin);
    }
    FeatureMap { data: out }
}
