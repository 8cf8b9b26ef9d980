//! CNN branch: a U-Net predicting a global residual on the shadow image,
//! with AGBA blocks at the bottleneck and the deepest decoder stages.

use candle_core::{DType, Device, Tensor};

use crate::error::{ensure, Result};
use crate::image::ImageTensor;
use crate::nn::{self, Builder};
use crate::priors::ContrastHeatmap;
use crate::unet::{UNet, UNetConfig};

#[derive(Debug, Clone)]
pub struct ContentRestorer {
    unet: UNet,
}

impl ContentRestorer {
    pub fn new(b: &mut Builder, cfg: UNetConfig) -> Result<Self> {
        ensure(cfg.in_channels == 3 && cfg.out_channels == 3, || {
            "content restorer maps 3 channels to 3 channels".into()
        })?;
        ensure(cfg.time_embed_dim.is_none(), || "content restorer is not time conditioned".into())?;
        Ok(Self {
            unet: UNet::new(b, cfg)?,
        })
    }

    pub fn config(&self) -> &UNetConfig {
        self.unet.config()
    }

    /// `Ĩ = I + f(I, c)` on `(B, 3, H, W)` / `(B, 1, H, W)` tensors; unclamped.
    pub fn forward(&self, shadow: &Tensor, contrast: &Tensor) -> Result<Tensor> {
        let residual = self.unet.forward(shadow, None, Some(contrast))?;
        Ok((shadow + residual)?)
    }

    /// Inference on one image; output is clamped to `[0, 1]`.
    pub fn restore_content(&self, image: &ImageTensor, contrast: &ContrastHeatmap, dtype: DType) -> Result<ImageTensor> {
        image.validate()?;
        ensure(image.channels() == 3, || "content restorer needs an RGB image".into())?;
        let m = self.config().size_multiple();
        ensure(image.height() % m == 0 && image.width() % m == 0, || {
            format!(
                "image {}x{} not divisible by {m}; pad before restoring",
                image.height(),
                image.width()
            )
        })?;
        let dev = Device::Cpu;
        let out = self.forward(&image.to_tensor(dtype, &dev)?, &contrast.map.to_tensor(dtype, &dev)?)?;
        Ok(ImageTensor::from_tensor(&out)?.clamp01())
    }
}

/// Mean absolute error over all elements.
pub fn content_loss(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    ensure(pred.dims() == target.dims(), || {
        format!("content loss shape mismatch: {:?} vs {:?}", pred.dims(), target.dims())
    })?;
    Ok(nn::abs_smooth_at_zero(&(pred - target)?)?.mean_all()?)
}
