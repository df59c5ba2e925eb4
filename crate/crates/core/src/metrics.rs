//! Image quality metrics and their aggregation.
//!
//! All metrics take the reference image first. Inputs are standardized
//! values; accumulation is in `f64`.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};

fn check_pair(a: &[f32], b: &[f32]) -> Result<()> {
    if a.len() != b.len() {
        return Err(shape_err!("metric inputs have {} and {} pixels", a.len(), b.len()));
    }
    if a.is_empty() {
        return Err(shape_err!("metric on empty images"));
    }
    Ok(())
}

/// `sqrt(mean((a - b)^2))`.
pub fn rmse(a: &[f32], b: &[f32]) -> Result<f64> {
    check_pair(a, b)?;
    let sse: f64 = a.iter().zip(b).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum();
    Ok((sse / a.len() as f64).sqrt())
}

/// `20 log10(data_range / rmse)`; `+inf` for identical images.
pub fn psnr(a: &[f32], b: &[f32], data_range: f64) -> Result<f64> {
    if !(data_range > 0.0 && data_range.is_finite()) {
        return Err(Error::Config(format!("PSNR data range must be positive, got {data_range}")));
    }
    Ok(psnr_from_rmse(rmse(a, b)?, data_range))
}

pub fn psnr_from_rmse(rmse: f64, data_range: f64) -> f64 {
    if rmse == 0.0 {
        f64::INFINITY
    } else {
        20.0 * (data_range / rmse).log10()
    }
}

/// `max - min` of an image, the default PSNR and SSIM range.
pub fn dynamic_range(img: &[f32]) -> f64 {
    let (lo, hi) = img
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v as f64), h.max(v as f64)));
    hi - lo
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SsimParams {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub data_range: f64,
}

impl SsimParams {
    /// 11×11 Gaussian window with σ = 1.5, K1 = 0.01, K2 = 0.03.
    pub fn new(data_range: f64) -> Self {
        Self {
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            data_range,
        }
    }

    /// Normalized 1-D Gaussian taps; the 2-D window is their outer product.
    pub fn taps(&self) -> Vec<f64> {
        let c = (self.window as f64 - 1.0) / 2.0;
        let g: Vec<f64> = (0..self.window)
            .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * self.sigma * self.sigma)).exp())
            .collect();
        let s: f64 = g.iter().sum();
        g.into_iter().map(|v| v / s).collect()
    }
}

/// Valid-mode separable filtering of an `h × w` map.
fn filter_valid(src: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = taps.iter().enumerate().map(|(i, t)| t * src[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = taps.iter().enumerate().map(|(i, t)| t * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean structural similarity over every window position fully inside the
/// image. Symmetric in its arguments.
pub fn ssim(a: &[f32], b: &[f32], height: usize, width: usize, params: &SsimParams) -> Result<f64> {
    check_pair(a, b)?;
    if a.len() != height * width {
        return Err(shape_err!("{} pixels for a {}x{} image", a.len(), height, width));
    }
    if height < params.window || width < params.window {
        return Err(shape_err!(
            "{}x{} image is smaller than the {} pixel SSIM window",
            height,
            width,
            params.window
        ));
    }
    if !(params.data_range > 0.0 && params.data_range.is_finite()) {
        return Err(Error::Config(format!("SSIM data range must be positive, got {}", params.data_range)));
    }
    let taps = params.taps();
    let x: Vec<f64> = a.iter().map(|&v| v as f64).collect();
    let y: Vec<f64> = b.iter().map(|&v| v as f64).collect();
    let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(u, v)| u * v).collect::<Vec<_>>();
    let f = |m: &[f64]| filter_valid(m, height, width, &taps);
    let (mx, my) = (f(&x), f(&y));
    let (exx, eyy, exy) = (f(&prod(&x, &x)), f(&prod(&y, &y)), f(&prod(&x, &y)));
    let c1 = (params.k1 * params.data_range).powi(2);
    let c2 = (params.k2 * params.data_range).powi(2);
    let mut total = 0.0;
    for i in 0..mx.len() {
        let (ux, uy) = (mx[i], my[i]);
        let sxx = exx[i] - ux * ux;
        let syy = eyy[i] - uy * uy;
        let sxy = exy[i] - ux * uy;
        total += ((2.0 * ux * uy + c1) * (2.0 * sxy + c2)) / ((ux * ux + uy * uy + c1) * (sxx + syy + c2));
    }
    Ok(total / mx.len() as f64)
}

/// Metrics of one reconstructed image against its reference.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub id: String,
    pub rmse: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub data_range: f64,
}

/// Evaluates `test` against `reference`. `data_range` defaults to the
/// reference's dynamic range.
pub fn image_metrics(
    id: &str,
    reference: &[f32],
    test: &[f32],
    height: usize,
    width: usize,
    data_range: Option<f64>,
) -> Result<ImageMetrics> {
    let range = data_range.unwrap_or_else(|| dynamic_range(reference));
    let range = if range > 0.0 { range } else { 1.0 };
    let r = rmse(reference, test)?;
    Ok(ImageMetrics {
        id: id.to_string(),
        rmse: r,
        psnr: psnr_from_rmse(r, range),
        ssim: ssim(reference, test, height, width, &SsimParams::new(range))?,
        data_range: range,
    })
}

/// Mean and population standard deviation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Data("statistics of an empty list".into()));
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Ok(Self { mean, std: var.sqrt() })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub label: String,
    pub images: Vec<ImageMetrics>,
    pub rmse: Stat,
    /// Over finite PSNR values only; NaN when every image is exact.
    pub psnr: Stat,
    pub ssim: Stat,
    /// Images whose PSNR is infinite and so left out of [`Self::psnr`].
    pub psnr_infinite: usize,
}

/// Aggregates per-image metrics into mean ± population standard deviation.
pub fn aggregate(label: &str, images: Vec<ImageMetrics>) -> Result<MetricsReport> {
    if images.is_empty() {
        return Err(Error::Data("cannot aggregate zero images".into()));
    }
    let rmse: Vec<f64> = images.iter().map(|m| m.rmse).collect();
    let ssim: Vec<f64> = images.iter().map(|m| m.ssim).collect();
    let psnr: Vec<f64> = images.iter().map(|m| m.psnr).filter(|p| p.is_finite()).collect();
    let psnr_infinite = images.len() - psnr.len();
    Ok(MetricsReport {
        label: label.to_string(),
        rmse: Stat::of(&rmse)?,
        psnr: if psnr.is_empty() {
            Stat { mean: f64::NAN, std: f64::NAN }
        } else {
            Stat::of(&psnr)?
        },
        ssim: Stat::of(&ssim)?,
        psnr_infinite,
        images,
    })
}

fn fmt_value(v: f64, decimals: usize) -> String {
    if v.is_infinite() {
        "inf".into()
    } else if v.is_nan() {
        "n/a".into()
    } else {
        format!("{v:.decimals$}")
    }
}

impl MetricsReport {
    /// `RMSE, PSNR, SSIM` cells as `mean±std` with 4, 2 and 4 decimals.
    pub fn cells(&self) -> [String; 3] {
        let psnr = if self.psnr_infinite > 0 && self.psnr_infinite == self.images.len() {
            "inf".to_string()
        } else {
            format!("{}±{}", fmt_value(self.psnr.mean, 2), fmt_value(self.psnr.std, 2))
        };
        [
            format!("{}±{}", fmt_value(self.rmse.mean, 4), fmt_value(self.rmse.std, 4)),
            psnr,
            format!("{}±{}", fmt_value(self.ssim.mean, 4), fmt_value(self.ssim.std, 4)),
        ]
    }

    pub fn csv_row(&self) -> String {
        let p = |v: f64| {
            if v.is_finite() {
                format!("{v}")
            } else if v.is_nan() {
                "nan".into()
            } else {
                "inf".into()
            }
        };
        let psnr = if self.psnr_infinite > 0 && self.psnr_infinite == self.images.len() {
            Stat { mean: f64::INFINITY, std: 0.0 }
        } else {
            self.psnr
        };
        format!(
            "{},{},{},{},{},{},{}",
            self.label,
            p(self.rmse.mean),
            p(self.rmse.std),
            p(psnr.mean),
            p(psnr.std),
            p(self.ssim.mean),
            p(self.ssim.std)
        )
    }

    /// Per-image rows: `id,rmse,psnr,ssim,data_range`.
    pub fn per_image_csv(&self) -> String {
        let mut out = String::from("id,rmse,psnr,ssim,data_range\n");
        for m in &self.images {
            let _ = writeln!(out, "{},{},{},{},{}", m.id, m.rmse, m.psnr, m.ssim, m.data_range);
        }
        out
    }
}

pub const CSV_HEADER: &str = "variant,rmse_mean,rmse_std,psnr_mean,psnr_std,ssim_mean,ssim_std";

pub fn reports_csv(reports: &[MetricsReport]) -> String {
    let mut out = format!("{CSV_HEADER}\n");
    for r in reports {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

/// Aligned plain-text table, one row per report.
pub fn reports_table(reports: &[MetricsReport]) -> String {
    let header = ["Model", "RMSE", "PSNR", "SSIM"];
    let rows: Vec<[String; 4]> = reports
        .iter()
        .map(|r| {
            let [a, b, c] = r.cells();
            [r.label.clone(), a, b, c]
        })
        .collect();
    let mut widths = header.map(|h| h.chars().count());
    for row in &rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let line = |cells: [&str; 4]| {
        let mut s = String::new();
        for (i, (cell, w)) in cells.iter().zip(widths).enumerate() {
            let pad = w - cell.chars().count();
            if i == 0 {
                s.push_str(cell);
                s.push_str(&" ".repeat(pad));
            } else {
                s.push_str("  ");
                s.push_str(&" ".repeat(pad));
                s.push_str(cell);
            }
        }
        s.trim_end().to_string()
    };
    let mut out = String::from("# mean ± population standard deviation over test images\n");
    out.push_str(&line(header));
    out.push('\n');
    for row in &rows {
        out.push_str(&line([&row[0], &row[1], &row[2], &row[3]]));
        out.push('\n');
    }
    out
}
