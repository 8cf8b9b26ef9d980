//! Both branches under one parameter store, the joint training objective and
//! the inference chain (priors, content restorer, sampler, fusion).

use candle_core::{DType, Device, Tensor};
use rand_chacha::ChaCha8Rng;

use crate::config::Config;
use crate::content_restorer::{content_loss, ContentRestorer};
use crate::diffusion::{
    fuse_branches, make_schedule, q_sample, sample_residual, ConditionBundle, Denoiser, NoiseSchedule,
    X0Predictor,
};
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::losses::{total_loss, LossTerms, SsimParams};
use crate::nn::{rng_for, scalar_f64, Builder, ParamStore};
use crate::priors::{compute_contrast_heatmap, compute_highfreq_map};

const STREAM_INIT: u64 = 10;

#[derive(Debug)]
pub struct Model {
    store: ParamStore,
    pub content: ContentRestorer,
    pub denoiser: Denoiser,
    pub schedule: NoiseSchedule,
    pub config: Config,
}

/// Network inputs for a batch of pairs, `(B, C, H, W)`.
#[derive(Debug, Clone)]
pub struct Batch {
    pub shadow: Tensor,
    pub gt: Tensor,
    pub contrast: Tensor,
    pub highfreq: Tensor,
    pub ids: Vec<String>,
}

/// Shadow image with its two priors, `(1, C, H, W)`.
#[derive(Debug, Clone)]
pub struct Conditioned {
    pub shadow: Tensor,
    pub contrast: Tensor,
    pub highfreq: Tensor,
}

pub fn condition_image(img: &ImageTensor, cfg: &Config, dtype: DType) -> Result<Conditioned> {
    let dev = Device::Cpu;
    let c = compute_contrast_heatmap(img, cfg.priors.gamma)?;
    let hf = compute_highfreq_map(img, cfg.priors.highpass)?;
    Ok(Conditioned {
        shadow: img.to_tensor(dtype, &dev)?,
        contrast: c.map.to_tensor(dtype, &dev)?,
        highfreq: hf.map.to_tensor(dtype, &dev)?,
    })
}

impl Batch {
    pub fn from_pairs(pairs: &[(&ImageTensor, &ImageTensor, &str)], cfg: &Config, dtype: DType) -> Result<Self> {
        let mut parts = Vec::with_capacity(pairs.len());
        let mut gts = Vec::with_capacity(pairs.len());
        for (shadow, gt, _) in pairs {
            parts.push(condition_image(shadow, cfg, dtype)?);
            gts.push(gt.to_tensor(dtype, &Device::Cpu)?);
        }
        let cat = |f: &dyn Fn(&Conditioned) -> &Tensor| -> Result<Tensor> {
            Ok(Tensor::cat(&parts.iter().map(f).collect::<Vec<_>>(), 0)?)
        };
        Ok(Self {
            shadow: cat(&|c| &c.shadow)?,
            contrast: cat(&|c| &c.contrast)?,
            highfreq: cat(&|c| &c.highfreq)?,
            gt: Tensor::cat(&gts, 0)?,
            ids: pairs.iter().map(|p| p.2.to_string()).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Scalar parts of the joint objective; `total = content + detail total`.
#[derive(Debug, Clone)]
pub struct StepLosses {
    pub content: Tensor,
    pub terms: LossTerms,
    pub total: Tensor,
}

impl StepLosses {
    /// `[L_content, L_DM, L_high, L_cssim, L_total]`.
    pub fn values(&self) -> Result<[f64; 5]> {
        let [dm, high, cssim] = self.terms.values()?;
        Ok([scalar_f64(&self.content)?, dm, high, cssim, scalar_f64(&self.total)?])
    }
}

impl Model {
    /// Fresh parameters drawn from `train.seed`.
    pub fn new(config: &Config, dtype: DType) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new(dtype, Device::Cpu);
        let mut rng = rng_for(config.train.seed, STREAM_INIT, 0);
        let mut b = Builder::new(&mut store, &mut rng);
        let content = ContentRestorer::new(&mut b.push("content"), config.content_config())?;
        let denoiser = Denoiser::new(&mut b.push("denoiser"), &config.denoiser_config())?;
        let schedule = make_schedule(config.diffusion.steps, config.diffusion.schedule)?;
        Ok(Self {
            store,
            content,
            denoiser,
            schedule,
            config: config.clone(),
        })
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    /// Joint loss for given per-example timesteps and noise.
    pub fn losses(&self, batch: &Batch, t: &[usize], eps: &Tensor) -> Result<StepLosses> {
        let content_pred = self.content.forward(&batch.shadow, &batch.contrast)?;
        let l_content = content_loss(&content_pred, &batch.gt)?;
        let v = scalar_f64(&l_content)?;
        if !v.is_finite() {
            return Err(Error::TrainingFault {
                part: "L_content".into(),
                detail: format!("value {v}"),
            });
        }
        let cond = ConditionBundle::new(
            batch.shadow.clone(),
            batch.contrast.clone(),
            batch.highfreq.clone(),
            &content_pred,
        )?;
        let x0 = (&batch.gt - &batch.shadow)?;
        let x_t = q_sample(&x0, t, eps, &self.schedule)?;
        let x_pred = self.denoiser.predict_x0(&x_t, t, &cond)?;
        let terms = LossTerms::compute(
            &batch.gt,
            &batch.shadow,
            &x_pred,
            &batch.contrast,
            self.config.priors.highpass,
            &SsimParams::default(),
        )?;
        let detail = total_loss(&terms, &self.config.loss_weights())?;
        Ok(StepLosses {
            total: (&l_content + detail)?,
            content: l_content,
            terms,
        })
    }

    /// Content branch alone on one image, clamped; sides must fit the network.
    pub fn restore_content(&self, img: &ImageTensor) -> Result<ImageTensor> {
        let c = compute_contrast_heatmap(img, self.config.priors.gamma)?;
        self.content.restore_content(img, &c, self.dtype())
    }

    /// Full chain on one shadow image. Inputs whose sides do not fit the
    /// networks are reflect-padded and the output cropped back.
    pub fn restore(&self, img: &ImageTensor, rng: &mut ChaCha8Rng, n_steps: usize) -> Result<ImageTensor> {
        img.validate()?;
        let m = self
            .content
            .config()
            .size_multiple()
            .max(self.denoiser.unet_config().size_multiple());
        let padded = img.pad_reflect_to_multiple(m);
        let cond_in = condition_image(&padded, &self.config, self.dtype())?;
        let content = self
            .content
            .forward(&cond_in.shadow, &cond_in.contrast)?
            .clamp(0.0, 1.0)?;
        let cond = ConditionBundle::new(cond_in.shadow.clone(), cond_in.contrast, cond_in.highfreq, &content)?;
        let residual = sample_residual(&self.denoiser, &cond, &self.schedule, rng, n_steps)?;
        let fused = fuse_branches(&cond_in.shadow, &residual)?;
        ImageTensor::from_tensor(&fused)?.crop(img.height(), img.width())
    }
}
