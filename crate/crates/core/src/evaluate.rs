//! PSNR / SSIM evaluation over matched prediction and ground-truth folders.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Device};

use crate::data::{png_stems, Reject};
use crate::error::{ensure, Result};
use crate::image::ImageTensor;
use crate::losses::{mean_ssim, SsimParams};

pub const REPORT_HEADER: &str = "id\tpsnr_db\tssim\tlpips";

/// `10 log10(1 / MSE)` over all channels, `+inf` for identical images.
pub fn psnr(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    ensure(a.shape() == b.shape(), || format!("psnr shape mismatch {:?} vs {:?}", a.shape(), b.shape()))?;
    let n = a.data().len() as f64;
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (*x as f64 - *y as f64).powi(2))
        .sum::<f64>()
        / n;
    Ok(if mse == 0.0 { f64::INFINITY } else { 10.0 * (1.0 / mse).log10() })
}

/// Mean of the luminance SSIM map, computed in f64.
pub fn ssim(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    ensure(a.shape() == b.shape(), || format!("ssim shape mismatch {:?} vs {:?}", a.shape(), b.shape()))?;
    let dev = Device::Cpu;
    let v = mean_ssim(&a.to_tensor(DType::F64, &dev)?, &b.to_tensor(DType::F64, &dev)?, &SsimParams::default())?;
    Ok(v[0])
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub id: String,
    pub psnr_db: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub rejects: Vec<Reject>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    /// Settings the numbers were produced under.
    pub config: BTreeMap<String, String>,
}

fn fmt(v: f64) -> String {
    if v.is_infinite() {
        if v > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{v:.6}")
    }
}

impl EvalReport {
    pub fn from_rows(rows: Vec<EvalRow>, rejects: Vec<Reject>, config: BTreeMap<String, String>) -> Self {
        let n = rows.len() as f64;
        let (mean_psnr, mean_ssim) = if rows.is_empty() {
            (f64::NAN, f64::NAN)
        } else {
            (
                rows.iter().map(|r| r.psnr_db).sum::<f64>() / n,
                rows.iter().map(|r| r.ssim).sum::<f64>() / n,
            )
        };
        Self {
            rows,
            rejects,
            mean_psnr,
            mean_ssim,
            config,
        }
    }

    /// Header, one row per image, a `mean` row, then `#` lines for rejects and settings.
    /// `lpips` is reserved and always `NA`.
    pub fn to_tsv(&self) -> String {
        let mut out = format!("{REPORT_HEADER}\n");
        for r in &self.rows {
            out.push_str(&format!("{}\t{}\t{}\tNA\n", r.id, fmt(r.psnr_db), fmt(r.ssim)));
        }
        out.push_str(&format!("mean\t{}\t{}\tNA\n", fmt(self.mean_psnr), fmt(self.mean_ssim)));
        for r in &self.rejects {
            out.push_str(&format!("# reject\t{}\t{}\n", r.id, r.reason));
        }
        for (k, v) in &self.config {
            out.push_str(&format!("# {k}={v}\n"));
        }
        out
    }
}

/// Metrics after bilinear resize of both images to `resolution x resolution`.
pub fn evaluate_pair(pred: &ImageTensor, gt: &ImageTensor, resolution: usize) -> Result<(f64, f64)> {
    let p = pred.resize_bilinear(resolution, resolution)?;
    let g = gt.resize_bilinear(resolution, resolution)?;
    Ok((psnr(&p, &g)?, ssim(&p, &g)?))
}

/// Matches PNGs by file name; orphans and unreadable files are rejected and excluded.
pub fn evaluate_dir(pred_dir: &Path, gt_dir: &Path, resolution: usize) -> Result<EvalReport> {
    ensure(resolution >= SsimParams::default().window(), || {
        format!("resolution must be >= {}, got {resolution}", SsimParams::default().window())
    })?;
    for d in [pred_dir, gt_dir] {
        ensure(d.is_dir(), || format!("{} is not a directory", d.display()))?;
    }
    let p = png_stems(pred_dir)?;
    let g = png_stems(gt_dir)?;
    let mut rows = Vec::new();
    let mut rejects = Vec::new();
    for id in p.union(&g) {
        let reason = match (p.contains(id), g.contains(id)) {
            (false, _) => Some("missing prediction".to_string()),
            (_, false) => Some("missing ground truth".to_string()),
            _ => None,
        };
        if let Some(reason) = reason {
            rejects.push(Reject { id: id.clone(), reason });
            continue;
        }
        let res = ImageTensor::load_png(&pred_dir.join(format!("{id}.png"))).and_then(|a| {
            let b = ImageTensor::load_png(&gt_dir.join(format!("{id}.png")))?;
            evaluate_pair(&a, &b, resolution)
        });
        match res {
            Ok((psnr_db, ssim)) => rows.push(EvalRow {
                id: id.clone(),
                psnr_db,
                ssim,
            }),
            Err(e) => rejects.push(Reject {
                id: id.clone(),
                reason: e.to_string(),
            }),
        }
    }
    let mut config = BTreeMap::new();
    config.insert("resolution".into(), resolution.to_string());
    config.insert("metric.psnr".into(), "rgb".into());
    config.insert("metric.ssim".into(), "luminance".into());
    Ok(EvalReport::from_rows(rows, rejects, config))
}
