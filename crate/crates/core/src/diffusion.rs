//! Conditional diffusion over the residual `x0 = x_gt - I`.
//!
//! Timesteps are 1-based: `alpha_bar(t)` for `t` in `1..=T`, with
//! `alpha_bar(0) = 1` so the last reverse step returns the predicted `x0`.

use candle_core::Tensor;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::nn::{randn, Builder};
use crate::unet::{UNet, UNetConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    /// β from 1e-4 to 0.02.
    Linear,
    /// Linear with both endpoints multiplied by `1000 / T`, so short chains still end near pure noise.
    LinearScaled,
}

impl ScheduleKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Self::Linear),
            "linear_scaled" => Ok(Self::LinearScaled),
            other => Err(Error::validation(format!(
                "unknown schedule kind `{other}` (expected linear or linear_scaled)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    pub kind: ScheduleKind,
    /// `beta[t - 1]` is β_t.
    pub beta: Vec<f64>,
    /// `alpha_bar[t - 1]` is ᾱ_t.
    pub alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    /// ᾱ_t with the convention ᾱ_0 = 1.
    pub fn alpha_bar_at(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    fn check_t(&self, t: usize) -> Result<()> {
        ensure(t >= 1 && t <= self.steps(), || {
            format!("timestep {t} outside 1..={}", self.steps())
        })
    }
}

pub fn make_schedule(steps: usize, kind: ScheduleKind) -> Result<NoiseSchedule> {
    ensure(steps >= 2, || format!("schedule needs T >= 2, got {steps}"))?;
    let scale = match kind {
        ScheduleKind::Linear => 1.0,
        ScheduleKind::LinearScaled => 1000.0 / steps as f64,
    };
    let (lo, hi) = (1e-4 * scale, 0.02 * scale);
    ensure(hi < 1.0, || format!("linear_scaled schedule needs T > 20, got {steps}"))?;
    let beta: Vec<f64> = (0..steps)
        .map(|i| lo + (hi - lo) * i as f64 / (steps - 1) as f64)
        .collect();
    let mut alpha_bar = Vec::with_capacity(steps);
    let mut acc = 1.0;
    for b in &beta {
        acc *= 1.0 - b;
        alpha_bar.push(acc);
    }
    Ok(NoiseSchedule { kind, beta, alpha_bar })
}

/// Per-example `(B, 1, 1, 1)` coefficient tensor.
fn coef(values: Vec<f64>, like: &Tensor) -> Result<Tensor> {
    let n = values.len();
    Ok(Tensor::from_vec(values, (n, 1, 1, 1), like.device())?.to_dtype(like.dtype())?)
}

/// `√ᾱ_t x0 + √(1 − ᾱ_t) ε` with one timestep per batch element.
pub fn q_sample(x0: &Tensor, t: &[usize], eps: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    ensure(x0.dims() == eps.dims(), || {
        format!("noise shape {:?} differs from x0 shape {:?}", eps.dims(), x0.dims())
    })?;
    ensure(x0.dims()[0] == t.len(), || {
        format!("{} timesteps for a batch of {}", t.len(), x0.dims()[0])
    })?;
    for &ti in t {
        sched.check_t(ti)?;
    }
    let a = coef(t.iter().map(|&ti| sched.alpha_bar_at(ti).sqrt()).collect(), x0)?;
    let s = coef(t.iter().map(|&ti| (1.0 - sched.alpha_bar_at(ti)).sqrt()).collect(), x0)?;
    Ok((x0.broadcast_mul(&a)? + eps.broadcast_mul(&s)?)?)
}

/// Noise implied by an `x0` estimate through the forward identity.
pub fn eps_from_x0(x_t: &Tensor, x0: &Tensor, t: usize, sched: &NoiseSchedule) -> Result<Tensor> {
    sched.check_t(t)?;
    let ab = sched.alpha_bar_at(t);
    Ok(((x_t - (x0 * ab.sqrt())?)? / (1.0 - ab).sqrt())?)
}

pub fn x0_from_eps(x_t: &Tensor, eps: &Tensor, t: usize, sched: &NoiseSchedule) -> Result<Tensor> {
    sched.check_t(t)?;
    let ab = sched.alpha_bar_at(t);
    Ok(((x_t - (eps * (1.0 - ab).sqrt())?)? / ab.sqrt())?)
}

/// Which optional condition groups enter the denoiser.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConditionFlags {
    /// Contrast heatmap and high-frequency map.
    pub priors: bool,
    /// Content-restorer prediction.
    pub content: bool,
}

impl ConditionFlags {
    pub const ALL: Self = Self {
        priors: true,
        content: true,
    };

    pub fn channels(self) -> usize {
        3 + if self.priors { 4 } else { 0 } + if self.content { 3 } else { 0 }
    }
}

/// Conditioning stack in fixed order: shadow image, contrast, high-frequency map, content prediction.
#[derive(Debug, Clone)]
pub struct ConditionBundle {
    pub shadow: Tensor,
    pub contrast: Tensor,
    pub highfreq: Tensor,
    pub content_pred: Tensor,
}

impl ConditionBundle {
    /// All tensors are `(B, C, H, W)`; `content_pred` is detached here.
    pub fn new(shadow: Tensor, contrast: Tensor, highfreq: Tensor, content_pred: &Tensor) -> Result<Self> {
        let (b, c, h, w) = shadow.dims4()?;
        ensure(c == 3, || format!("shadow image must have 3 channels, got {c}"))?;
        for (name, t, ch) in [("contrast", &contrast, 1), ("highfreq", &highfreq, 3), ("content_pred", content_pred, 3)] {
            ensure(t.dims() == [b, ch, h, w], || {
                format!("{name} has shape {:?}, expected {:?}", t.dims(), [b, ch, h, w])
            })?;
        }
        Ok(Self {
            shadow,
            contrast,
            highfreq,
            content_pred: content_pred.detach(),
        })
    }

    pub fn batch(&self) -> usize {
        self.shadow.dims()[0]
    }

    pub fn spatial(&self) -> (usize, usize) {
        let d = self.shadow.dims();
        (d[2], d[3])
    }

    /// Channel concatenation of the groups enabled by `flags`.
    pub fn stack(&self, flags: ConditionFlags) -> Result<Tensor> {
        let mut parts = vec![&self.shadow];
        if flags.priors {
            parts.push(&self.contrast);
            parts.push(&self.highfreq);
        }
        if flags.content {
            parts.push(&self.content_pred);
        }
        Ok(Tensor::cat(&parts, 1)?)
    }
}

/// Anything that maps `(x_t, t, condition)` to an `x0` estimate.
pub trait X0Predictor {
    fn predict_x0(&self, x_t: &Tensor, t: &[usize], cond: &ConditionBundle) -> Result<Tensor>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserConfig {
    pub base_channels: usize,
    pub depth: usize,
    pub time_embed_dim: usize,
    pub flags: ConditionFlags,
}

/// Time-conditioned U-Net without AGBA, predicting `x0`.
#[derive(Debug, Clone)]
pub struct Denoiser {
    unet: UNet,
    flags: ConditionFlags,
}

impl Denoiser {
    pub fn new(b: &mut Builder, cfg: &DenoiserConfig) -> Result<Self> {
        let ucfg = UNetConfig {
            in_channels: 3 + cfg.flags.channels(),
            out_channels: 3,
            base_channels: cfg.base_channels,
            depth: cfg.depth,
            agba_stages: Vec::new(),
            agba_heads: 1,
            agba_gate_hidden: 1,
            time_embed_dim: Some(cfg.time_embed_dim),
        };
        Ok(Self {
            unet: UNet::new(b, ucfg)?,
            flags: cfg.flags,
        })
    }

    pub fn unet_config(&self) -> &UNetConfig {
        self.unet.config()
    }

    pub fn flags(&self) -> ConditionFlags {
        self.flags
    }
}

impl X0Predictor for Denoiser {
    fn predict_x0(&self, x_t: &Tensor, t: &[usize], cond: &ConditionBundle) -> Result<Tensor> {
        let (b, c, h, w) = x_t.dims4()?;
        ensure(c == 3 && b == cond.batch() && (h, w) == cond.spatial(), || {
            format!("x_t shape {:?} does not match the condition", x_t.dims())
        })?;
        ensure(t.len() == b, || format!("{} timesteps for a batch of {b}", t.len()))?;
        let input = Tensor::cat(&[x_t, &cond.stack(self.flags)?], 1)?;
        let tf: Vec<f64> = t.iter().map(|&v| v as f64).collect();
        self.unet.forward(&input, Some(&tf), None)
    }
}

/// One reverse step from `t` to `t_prev < t` using the `q(x_{t_prev} | x_t, x0)`
/// posterior with fixed variance. `t_prev = 0` returns the clamped `x0` estimate.
pub fn p_sample_step_to(
    model: &dyn X0Predictor,
    x_t: &Tensor,
    t: usize,
    t_prev: usize,
    cond: &ConditionBundle,
    sched: &NoiseSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    sched.check_t(t)?;
    ensure(t_prev < t, || format!("reverse step needs t_prev < t, got {t_prev} >= {t}"))?;
    let b = x_t.dims()[0];
    let x0 = model.predict_x0(x_t, &vec![t; b], cond)?.clamp(-1.0, 1.0)?;
    let ab_t = sched.alpha_bar_at(t);
    let ab_prev = sched.alpha_bar_at(t_prev);
    let alpha = ab_t / ab_prev;
    let beta = 1.0 - alpha;
    let c0 = ab_prev.sqrt() * beta / (1.0 - ab_t);
    let ct = alpha.sqrt() * (1.0 - ab_prev) / (1.0 - ab_t);
    let mean = ((&x0 * c0)? + (x_t * ct)?)?;
    if t_prev == 0 {
        return Ok(mean);
    }
    let var = beta * (1.0 - ab_prev) / (1.0 - ab_t);
    let z = randn(x_t.dims(), x_t.dtype(), x_t.device(), rng)?;
    Ok((mean + (z * var.sqrt())?)?)
}

/// Ancestral step `t -> t - 1`.
pub fn p_sample_step(
    model: &dyn X0Predictor,
    x_t: &Tensor,
    t: usize,
    cond: &ConditionBundle,
    sched: &NoiseSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    ensure(t >= 1, || "reverse step needs t >= 1".into())?;
    p_sample_step_to(model, x_t, t, t - 1, cond, sched, rng)
}

/// Descending timestep subset of length `n_steps`, always starting at `T`.
pub fn strided_timesteps(steps: usize, n_steps: usize) -> Result<Vec<usize>> {
    ensure(n_steps >= 1 && n_steps <= steps, || {
        format!("sampler steps must be in 1..={steps}, got {n_steps}")
    })?;
    Ok((1..=n_steps).rev().map(|i| (i * steps).div_ceil(n_steps)).collect())
}

/// Full reverse chain from pure noise; result clamped to `[-1, 1]`.
pub fn sample_residual(
    model: &dyn X0Predictor,
    cond: &ConditionBundle,
    sched: &NoiseSchedule,
    rng: &mut ChaCha8Rng,
    n_steps: usize,
) -> Result<Tensor> {
    let ts = strided_timesteps(sched.steps(), n_steps)?;
    let (h, w) = cond.spatial();
    let mut x = randn(&[cond.batch(), 3, h, w], cond.shadow.dtype(), cond.shadow.device(), rng)?;
    for (i, &t) in ts.iter().enumerate() {
        let t_prev = ts.get(i + 1).copied().unwrap_or(0);
        x = p_sample_step_to(model, &x, t, t_prev, cond, sched, rng)?;
    }
    Ok(x.clamp(-1.0, 1.0)?)
}

/// `clamp(I + residual, 0, 1)`.
pub fn fuse_branches(shadow: &Tensor, residual: &Tensor) -> Result<Tensor> {
    ensure(shadow.dims() == residual.dims(), || {
        format!("fusion shape mismatch: {:?} vs {:?}", shadow.dims(), residual.dims())
    })?;
    Ok((shadow + residual)?.clamp(0.0, 1.0)?)
}
