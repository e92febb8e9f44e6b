//! Segmentation metrics, HU kernel-density estimation and export helpers.

use std::io::Write;
use std::path::Path;

use ndarray::{Array2, Array3};

use crate::error::MetricsError;
use crate::mask::BinaryMask;

/// Dice overlap 2|P∩T| / (|P|+|T|). Two empty masks score 1.0 so degenerate
/// samples do not poison fold averages.
pub fn dice(pred: &BinaryMask, target: &BinaryMask) -> Result<f64, MetricsError> {
    if pred.shape2() != target.shape2() {
        return Err(MetricsError::ShapeMismatch(pred.shape2(), target.shape2()));
    }
    let mut inter = 0usize;
    let mut total = 0usize;
    for (&p, &t) in pred.data().iter().zip(target.data().iter()) {
        inter += (p & t) as usize;
        total += (p + t) as usize;
    }
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / total as f64)
}

/// Intersection-over-union |P∩T| / |P∪T|; both empty scores 1.0.
pub fn iou(pred: &BinaryMask, target: &BinaryMask) -> Result<f64, MetricsError> {
    if pred.shape2() != target.shape2() {
        return Err(MetricsError::ShapeMismatch(pred.shape2(), target.shape2()));
    }
    let mut inter = 0usize;
    let mut uni = 0usize;
    for (&p, &t) in pred.data().iter().zip(target.data().iter()) {
        inter += (p & t) as usize;
        uni += (p | t) as usize;
    }
    if uni == 0 {
        return Ok(1.0);
    }
    Ok(inter as f64 / uni as f64)
}

/// Fixed HU evaluation grid: -1200..=400 step 4, shared by every curve so
/// runs stay comparable.
pub const HU_GRID_MIN: f64 = -1200.0;
pub const HU_GRID_MAX: f64 = 400.0;
pub const HU_GRID_STEP: f64 = 4.0;

pub fn default_hu_grid() -> Vec<f64> {
    let n = ((HU_GRID_MAX - HU_GRID_MIN) / HU_GRID_STEP) as usize + 1;
    (0..n).map(|i| HU_GRID_MIN + i as f64 * HU_GRID_STEP).collect()
}

/// Kernel density estimate of HU values inside a mask region.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityCurve {
    pub grid: Vec<f64>,
    pub density: Vec<f64>,
    pub bandwidth: f64,
}

impl DensityCurve {
    /// Trapezoidal integral over the grid.
    pub fn integral(&self) -> f64 {
        trapezoid(&self.grid, &self.density)
    }

    /// HU value of the highest density point.
    pub fn mode(&self) -> f64 {
        let mut best = 0usize;
        for (i, &d) in self.density.iter().enumerate() {
            if d > self.density[best] {
                best = i;
            }
        }
        self.grid[best]
    }
}

fn trapezoid(grid: &[f64], values: &[f64]) -> f64 {
    let mut acc = 0.0;
    for i in 1..grid.len() {
        acc += 0.5 * (values[i] + values[i - 1]) * (grid[i] - grid[i - 1]);
    }
    acc
}

/// Silverman's rule-of-thumb bandwidth, floored at the grid step so the
/// trapezoidal normalization invariant holds even for near-degenerate data.
pub fn silverman_bandwidth(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    if values.len() < 2 {
        return HU_GRID_STEP;
    }
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let std = var.sqrt();
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let q = |p: f64| -> f64 {
        let idx = p * (sorted.len() - 1) as f64;
        let lo = idx.floor() as usize;
        let hi = idx.ceil() as usize;
        let frac = idx - lo as f64;
        sorted[lo] * (1.0 - frac) + sorted[hi] * frac
    };
    let iqr = q(0.75) - q(0.25);
    let spread = if iqr > 0.0 {
        std.min(iqr / 1.34)
    } else {
        std
    };
    let h = 0.9 * spread * n.powf(-0.2);
    h.max(HU_GRID_STEP)
}

/// Gaussian KDE of arbitrary HU samples on the fixed grid.
pub fn kde_from_values(values: &[f64], bandwidth: Option<f64>) -> Result<DensityCurve, MetricsError> {
    if values.is_empty() {
        return Err(MetricsError::EmptyRegion);
    }
    let h = bandwidth.unwrap_or_else(|| silverman_bandwidth(values));
    let grid = default_hu_grid();
    let norm = 1.0 / ((2.0 * std::f64::consts::PI).sqrt() * h * values.len() as f64);
    let density: Vec<f64> = grid
        .iter()
        .map(|&x| {
            let mut s = 0.0;
            for &v in values {
                let u = (x - v) / h;
                s += (-0.5 * u * u).exp();
            }
            s * norm
        })
        .collect();
    Ok(DensityCurve {
        grid,
        density,
        bandwidth: h,
    })
}

/// Gaussian KDE over the HU values of pixels where `region` is 1.
pub fn hu_kde(
    image: &Array2<f32>,
    region: &BinaryMask,
    bandwidth: Option<f64>,
) -> Result<DensityCurve, MetricsError> {
    if (image.nrows(), image.ncols()) != region.shape2() {
        return Err(MetricsError::ShapeMismatch(
            (image.nrows(), image.ncols()),
            region.shape2(),
        ));
    }
    let values: Vec<f64> = image
        .iter()
        .zip(region.data().iter())
        .filter(|(_, &m)| m == 1)
        .map(|(&v, _)| v as f64)
        .collect();
    kde_from_values(&values, bandwidth)
}

/// L1 distance between the two curves after normalizing each to unit mass;
/// ranges over [0, 2].
pub fn distribution_distance(a: &DensityCurve, b: &DensityCurve) -> Result<f64, MetricsError> {
    if a.grid.len() != b.grid.len()
        || a.grid
            .iter()
            .zip(b.grid.iter())
            .any(|(x, y)| (x - y).abs() > 1e-9)
    {
        return Err(MetricsError::GridMismatch);
    }
    let ia = a.integral();
    let ib = b.integral();
    if ia <= 0.0 || ib <= 0.0 {
        return Err(MetricsError::EmptyRegion);
    }
    let diff: Vec<f64> = a
        .density
        .iter()
        .zip(b.density.iter())
        .map(|(&x, &y)| (x / ia - y / ib).abs())
        .collect();
    Ok(trapezoid(&a.grid, &diff))
}

/// Channel-mean absolute activation, min-max normalized to [0,1] and
/// nearest-neighbor upsampled to the requested resolution.
pub fn heatmap_from_activation(act: &Array3<f32>, out_h: usize, out_w: usize) -> Array2<f32> {
    let (c, h, w) = act.dim();
    let mut mean = Array2::<f32>::zeros((h, w));
    for ch in 0..c {
        for i in 0..h {
            for j in 0..w {
                mean[[i, j]] += act[[ch, i, j]].abs();
            }
        }
    }
    mean /= c as f32;
    let mut lo = f32::INFINITY;
    let mut hi = f32::NEG_INFINITY;
    for &v in mean.iter() {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let range = hi - lo;
    let normed = if range > 0.0 {
        mean.mapv(|v| (v - lo) / range)
    } else {
        Array2::zeros((h, w))
    };
    Array2::from_shape_fn((out_h, out_w), |(i, j)| {
        let si = (i * h) / out_h;
        let sj = (j * w) / out_w;
        normed[[si, sj]]
    })
}

/// Channel-mean absolute activation of a tagged FA-Cat output for one image,
/// min-max normalized to [0,1] and upsampled to the input resolution. Tags
/// look like `facat:union:0` (branch, skip level).
pub fn activation_heatmap(
    bundle: &crate::model::ModelBundle,
    image: &Array2<f32>,
    layer_tag: &str,
) -> Result<Array2<f32>, crate::error::Error> {
    let (_, taps) = bundle
        .forward_with_taps(image, Some(()))
        .map_err(crate::error::Error::Model)?;
    let act = taps.get(layer_tag).ok_or_else(|| {
        crate::error::Error::Model(crate::error::ModelError::UnknownLayerTag(
            layer_tag.to_string(),
        ))
    })?;
    Ok(heatmap_from_activation(act, image.nrows(), image.ncols()))
}

/// One evaluation record: (fold, sample, metric, value).
#[derive(Debug, Clone)]
pub struct MetricRow {
    pub fold: usize,
    pub sample_id: String,
    pub metric: String,
    pub value: f64,
}

/// Writes per-sample metric rows to CSV (`fold,sample,metric,value`).
pub fn write_metrics_csv(rows: &[MetricRow], path: &Path) -> std::io::Result<()> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "fold,sample,metric,value")?;
    for r in rows {
        writeln!(f, "{},{},{},{:.9}", r.fold, r.sample_id, r.metric, r.value)?;
    }
    Ok(())
}

/// Writes a density curve as two-column CSV (`hu,density`).
pub fn write_curve_csv(curve: &DensityCurve, path: &Path) -> std::io::Result<()> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "hu,density")?;
    for (x, d) in curve.grid.iter().zip(curve.density.iter()) {
        writeln!(f, "{},{:e}", x, d)?;
    }
    Ok(())
}

/// Saves a [0,1] map as an 8-bit grayscale PNG.
pub fn save_grayscale_png(map: &Array2<f32>, path: &Path) -> Result<(), image::ImageError> {
    let (h, w) = map.dim();
    let img = image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
        let v = map[[y as usize, x as usize]].clamp(0.0, 1.0);
        image::Luma([(v * 255.0).round() as u8])
    });
    img.save(path)
}
