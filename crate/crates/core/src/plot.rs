//! Tiny deterministic PNG line plots for density-curve comparisons. The CSV
//! next to each plot is the testable contract; the PNG is convenience.

use std::path::Path;

use crate::metrics::DensityCurve;

pub const COLOR_HC_REAL: [u8; 3] = [178, 34, 34];
pub const COLOR_HC_PRED: [u8; 3] = [255, 140, 105];
pub const COLOR_LC_REAL: [u8; 3] = [24, 64, 160];
pub const COLOR_LC_PRED: [u8; 3] = [100, 150, 237];

/// One curve with a legend color; dashed renders every other segment.
pub struct PlotSeries<'a> {
    pub curve: &'a DensityCurve,
    pub color: [u8; 3],
    pub dashed: bool,
}

/// Renders the curves into a fixed-size chart with axes and a color legend.
pub fn density_plot(path: &Path, series: &[PlotSeries<'_>]) -> Result<(), image::ImageError> {
    const W: u32 = 800;
    const H: u32 = 500;
    const MARGIN: u32 = 40;
    let mut img = image::RgbImage::from_pixel(W, H, image::Rgb([255, 255, 255]));

    let xs: Vec<f64> = series
        .first()
        .map(|s| s.curve.grid.clone())
        .unwrap_or_default();
    if xs.is_empty() {
        return img.save(path);
    }
    let x_min = xs[0];
    let x_max = *xs.last().unwrap();
    let y_max = series
        .iter()
        .flat_map(|s| s.curve.density.iter().copied())
        .fold(0.0f64, f64::max)
        .max(1e-12);

    let to_px = |x: f64, y: f64| -> (i64, i64) {
        let fx = (x - x_min) / (x_max - x_min);
        let fy = y / (y_max * 1.05);
        let px = MARGIN as f64 + fx * (W - 2 * MARGIN) as f64;
        let py = (H - MARGIN) as f64 - fy * (H - 2 * MARGIN) as f64;
        (px.round() as i64, py.round() as i64)
    };

    // axes
    let axis = image::Rgb([0, 0, 0]);
    for x in MARGIN..=(W - MARGIN) {
        img.put_pixel(x, H - MARGIN, axis);
    }
    for y in MARGIN..=(H - MARGIN) {
        img.put_pixel(MARGIN, y, axis);
    }
    // tick marks every 200 HU
    let mut tick = (x_min / 200.0).ceil() * 200.0;
    while tick <= x_max {
        let (px, _) = to_px(tick, 0.0);
        for dy in 0..5 {
            let y = H - MARGIN + dy;
            if y < H {
                img.put_pixel(px as u32, y, axis);
            }
        }
        tick += 200.0;
    }

    for s in series {
        let color = image::Rgb(s.color);
        let pts: Vec<(i64, i64)> = s
            .curve
            .grid
            .iter()
            .zip(s.curve.density.iter())
            .map(|(&x, &y)| to_px(x, y))
            .collect();
        for (k, pair) in pts.windows(2).enumerate() {
            if s.dashed && k % 4 >= 2 {
                continue;
            }
            draw_segment(&mut img, pair[0], pair[1], color);
        }
    }

    // legend swatches, upper right
    for (i, s) in series.iter().enumerate() {
        let y0 = MARGIN + 8 + (i as u32) * 14;
        for dx in 0..24u32 {
            for dy in 0..8u32 {
                let x = W - MARGIN - 30 + dx;
                img.put_pixel(x, y0 + dy, image::Rgb(s.color));
            }
        }
    }
    img.save(path)
}

fn draw_segment(img: &mut image::RgbImage, a: (i64, i64), b: (i64, i64), color: image::Rgb<u8>) {
    let (w, h) = (img.width() as i64, img.height() as i64);
    let dx = (b.0 - a.0).abs();
    let dy = (b.1 - a.1).abs();
    let steps = dx.max(dy).max(1);
    for s in 0..=steps {
        let x = a.0 + (b.0 - a.0) * s / steps;
        let y = a.1 + (b.1 - a.1) * s / steps;
        if x >= 0 && x < w && y >= 0 && y < h {
            img.put_pixel(x as u32, y as u32, color);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::kde_from_values;

    #[test]
    fn plot_writes_a_png() {
        let dir = std::env::temp_dir().join(format!("uasnet-plot-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("curves.png");
        let a = kde_from_values(&[0.0, -20.0, 30.0], None).unwrap();
        let b = kde_from_values(&[-750.0, -760.0, -700.0], None).unwrap();
        density_plot(
            &path,
            &[
                PlotSeries {
                    curve: &a,
                    color: COLOR_HC_REAL,
                    dashed: false,
                },
                PlotSeries {
                    curve: &b,
                    color: COLOR_LC_REAL,
                    dashed: true,
                },
            ],
        )
        .unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[1..4], b"PNG");
    }
}
