//! Detail-branch objective: RMS residual loss, high-pass residual loss and
//! contrast-weighted SSIM, plus the weighted total.

use candle_core::{DType, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::nn::{self, reflect_pad2d, scalar_f64};
use crate::priors::{gaussian_1d, HighPassKind, LUMA_WEIGHTS};

/// Added to the contrast-weight sum in the SSIM denominator.
pub const CSSIM_STABILIZER: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 0.1,
            lambda2: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (k, v) in [("lambda1", self.lambda1), ("lambda2", self.lambda2)] {
            ensure(v.is_finite() && v >= 0.0, || format!("{k} must be finite and >= 0, got {v}"))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SsimParams {
    pub sigma: f64,
    pub radius: usize,
    pub k1: f64,
    pub k2: f64,
    pub range: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self {
            sigma: 1.5,
            radius: 5,
            k1: 0.01,
            k2: 0.03,
            range: 1.0,
        }
    }
}

impl SsimParams {
    pub fn window(&self) -> usize {
        2 * self.radius + 1
    }

    pub fn c1(&self) -> f64 {
        (self.k1 * self.range).powi(2)
    }

    pub fn c2(&self) -> f64 {
        (self.k2 * self.range).powi(2)
    }
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    ensure(a.dims() == b.dims(), || {
        format!("{what}: shape mismatch {:?} vs {:?}", a.dims(), b.dims())
    })
}

/// Mean over the batch of each example's root-mean-square.
fn batch_rms(diff: &Tensor) -> Result<Tensor> {
    let per = diff.sqr()?.flatten_from(1)?.mean(1)?;
    Ok(nn::sqrt_safe(&per)?.mean_all()?)
}

/// `E‖x0 − x_pred‖₂` read as per-example RMS.
pub fn loss_dm(x0: &Tensor, x_pred: &Tensor) -> Result<Tensor> {
    same_shape(x0, x_pred, "loss_dm")?;
    batch_rms(&(x0 - x_pred)?)
}

/// Same-size, reflect-padded per-channel correlation of `(B, C, H, W)` with the kind's kernel.
pub fn highpass(x: &Tensor, kind: HighPassKind) -> Result<Tensor> {
    let (k, taps) = kind.kernel();
    let (_, _, h, w) = x.dims4()?;
    let p = reflect_pad2d(x, k / 2)?;
    let mut acc: Option<Tensor> = None;
    for dy in 0..k {
        for dx in 0..k {
            let t = taps[dy * k + dx];
            if t == 0.0 {
                continue;
            }
            let term = p.narrow(2, dy, h)?.narrow(3, dx, w)?.affine(t, 0.0)?;
            acc = Some(match acc {
                None => term,
                Some(a) => (a + term)?,
            });
        }
    }
    Ok(acc.expect("kernel has nonzero taps"))
}

/// `loss_dm` on the high-pass filtered difference.
pub fn loss_high(x0: &Tensor, x_pred: &Tensor, kind: HighPassKind) -> Result<Tensor> {
    same_shape(x0, x_pred, "loss_high")?;
    batch_rms(&highpass(&(x0 - x_pred)?, kind)?)
}

/// `(B, 3, H, W)` to `(B, 1, H, W)` luma; 1-channel input passes through.
pub fn luminance_tensor(x: &Tensor) -> Result<Tensor> {
    match x.dims4()?.1 {
        1 => Ok(x.clone()),
        3 => {
            let mut acc = x.narrow(1, 0, 1)?.affine(LUMA_WEIGHTS[0], 0.0)?;
            for c in 1..3 {
                acc = (acc + x.narrow(1, c, 1)?.affine(LUMA_WEIGHTS[c], 0.0)?)?;
            }
            Ok(acc)
        }
        c => Err(Error::validation(format!("luminance needs 1 or 3 channels, got {c}"))),
    }
}

/// Separable Gaussian blur with reflect padding.
fn gaussian_blur(x: &Tensor, p: &SsimParams) -> Result<Tensor> {
    let g = gaussian_1d(p.sigma, p.radius);
    let (_, _, h, w) = x.dims4()?;
    let xp = reflect_pad2d(x, p.radius)?;
    let mut rows: Option<Tensor> = None;
    for (i, &gi) in g.iter().enumerate() {
        let term = xp.narrow(3, i, w)?.affine(gi, 0.0)?;
        rows = Some(match rows {
            None => term,
            Some(a) => (a + term)?,
        });
    }
    let rows = rows.expect("window is non-empty");
    let mut out: Option<Tensor> = None;
    for (i, &gi) in g.iter().enumerate() {
        let term = rows.narrow(2, i, h)?.affine(gi, 0.0)?;
        out = Some(match out {
            None => term,
            Some(a) => (a + term)?,
        });
    }
    Ok(out.expect("window is non-empty"))
}

/// Per-location SSIM on luminance, `(B, 1, H, W)`.
pub fn ssim_map(a: &Tensor, b: &Tensor, p: &SsimParams) -> Result<Tensor> {
    same_shape(a, b, "ssim_map")?;
    let (_, _, h, w) = a.dims4()?;
    ensure(h >= p.window() && w >= p.window(), || {
        format!("SSIM needs images of at least {0}x{0}, got {h}x{w}", p.window())
    })?;
    let la = luminance_tensor(a)?;
    let lb = luminance_tensor(b)?;
    let mu_a = gaussian_blur(&la, p)?;
    let mu_b = gaussian_blur(&lb, p)?;
    let mu_aa = mu_a.sqr()?;
    let mu_bb = mu_b.sqr()?;
    let mu_ab = (&mu_a * &mu_b)?;
    let var_a = (gaussian_blur(&la.sqr()?, p)? - &mu_aa)?;
    let var_b = (gaussian_blur(&lb.sqr()?, p)? - &mu_bb)?;
    let cov = (gaussian_blur(&(&la * &lb)?, p)? - &mu_ab)?;
    let num = (mu_ab.affine(2.0, p.c1())? * cov.affine(2.0, p.c2())?)?;
    let den = ((mu_aa + mu_bb)?.affine(1.0, p.c1())? * (var_a + var_b)?.affine(1.0, p.c2())?)?;
    Ok((num / den)?)
}

/// `1 − Σ ssim·c / (Σ c + 1e-5)` per example, averaged over the batch.
///
/// The candidate image is `x_pred + shadow`; `contrast` is `(B, 1, h, w)` and
/// is bilinearly resized when its size differs from the images.
pub fn loss_cssim(
    x_gt: &Tensor,
    x_pred: &Tensor,
    shadow: &Tensor,
    contrast: &Tensor,
    p: &SsimParams,
) -> Result<Tensor> {
    same_shape(x_gt, x_pred, "loss_cssim")?;
    same_shape(x_gt, shadow, "loss_cssim")?;
    let (b, _, h, w) = x_gt.dims4()?;
    let (cb, cc, ch, cw) = contrast.dims4()?;
    ensure(cb == b && cc == 1, || {
        format!("contrast weight shape {:?} incompatible with batch {b}", contrast.dims())
    })?;
    let c = if (ch, cw) == (h, w) {
        contrast.clone()
    } else {
        contrast.detach().upsample_bilinear2d(h, w, false)?
    };
    let s = ssim_map(x_gt, &(x_pred + shadow)?, p)?;
    let weighted = (s * &c)?.flatten_from(1)?.sum(D::Minus1)?;
    let norm = c.flatten_from(1)?.sum(D::Minus1)?.affine(1.0, CSSIM_STABILIZER)?;
    Ok((weighted / norm)?.mean_all()?.affine(-1.0, 1.0)?)
}

/// Scalar loss terms of the detail branch.
#[derive(Debug, Clone)]
pub struct LossTerms {
    pub dm: Tensor,
    pub high: Tensor,
    pub cssim: Tensor,
}

impl LossTerms {
    pub fn compute(
        x_gt: &Tensor,
        shadow: &Tensor,
        x_pred: &Tensor,
        contrast: &Tensor,
        kind: HighPassKind,
        p: &SsimParams,
    ) -> Result<Self> {
        let x0 = (x_gt - shadow)?;
        Ok(Self {
            dm: loss_dm(&x0, x_pred)?,
            high: loss_high(&x0, x_pred, kind)?,
            cssim: loss_cssim(x_gt, x_pred, shadow, contrast, p)?,
        })
    }

    pub fn values(&self) -> Result<[f64; 3]> {
        Ok([scalar_f64(&self.dm)?, scalar_f64(&self.high)?, scalar_f64(&self.cssim)?])
    }
}

/// `L_DM + λ1 L_high + λ2 L_cssim`; a non-finite part is a training fault naming that part.
pub fn total_loss(terms: &LossTerms, w: &LossWeights) -> Result<Tensor> {
    w.validate()?;
    for (name, t) in [("L_DM", &terms.dm), ("L_high", &terms.high), ("L_cssim", &terms.cssim)] {
        let v = scalar_f64(t)?;
        if !v.is_finite() {
            return Err(Error::TrainingFault {
                part: name.into(),
                detail: format!("value {v}"),
            });
        }
    }
    let high = terms.high.affine(w.lambda1, 0.0)?;
    let cssim = terms.cssim.affine(w.lambda2, 0.0)?;
    Ok(((&terms.dm + high)? + cssim)?)
}

/// Mean SSIM of each pair in a batch, computed in f64.
pub fn mean_ssim(a: &Tensor, b: &Tensor, p: &SsimParams) -> Result<Vec<f64>> {
    let m = ssim_map(&a.to_dtype(DType::F64)?, &b.to_dtype(DType::F64)?, p)?;
    Ok(m.flatten_from(1)?.mean(1)?.to_vec1::<f64>()?)
}
