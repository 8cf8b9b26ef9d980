//! Compact U-Net skeleton shared by the content restorer and the denoiser.
//!
//! Level `l` runs at `1 / 2^l` resolution with `base * 2^min(l, 2)` channels.
//! AGBA stages are numbered from the bottleneck outwards: stage 0 is the
//! bottleneck, stage `k` is the `k`-th decoder stage above it.

use candle_core::Tensor;

use crate::agba::{AgbaBlock, AgbaConfig};
use crate::error::{ensure, Result};
use crate::nn::{self, Builder, Conv2d, Linear};

#[derive(Debug, Clone, PartialEq)]
pub struct UNetConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub base_channels: usize,
    pub depth: usize,
    pub agba_stages: Vec<usize>,
    pub agba_heads: usize,
    pub agba_gate_hidden: usize,
    /// Width of the sinusoidal timestep embedding; `None` disables time conditioning.
    pub time_embed_dim: Option<usize>,
}

impl UNetConfig {
    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << level.min(2)
    }

    pub fn validate(&self) -> Result<()> {
        ensure(self.depth >= 2, || format!("depth must be >= 2, got {}", self.depth))?;
        ensure(self.base_channels >= 1 && self.in_channels >= 1 && self.out_channels >= 1, || {
            "channel counts must be >= 1".into()
        })?;
        for &s in &self.agba_stages {
            ensure(s <= self.depth, || {
                format!("AGBA stage {s} outside 0..={} for depth {}", self.depth, self.depth)
            })?;
        }
        if let Some(e) = self.time_embed_dim {
            ensure(e >= 2 && e % 2 == 0, || format!("time_embed_dim must be even, got {e}"))?;
        }
        Ok(())
    }

    /// Spatial sides must be divisible by this.
    pub fn size_multiple(&self) -> usize {
        1 << self.depth
    }

    /// Level hosting AGBA stage `stage`.
    fn stage_level(&self, stage: usize) -> usize {
        self.depth - stage
    }
}

/// Conv + (optional) time shift + SiLU, with an identity skip when shapes allow.
#[derive(Debug, Clone)]
struct Block {
    conv: Conv2d,
    temb: Option<Linear>,
    residual: bool,
}

impl Block {
    fn new(b: &mut Builder, cin: usize, cout: usize, temb_dim: Option<usize>) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(&mut b.push("conv"), cin, cout, 3, false)?,
            temb: match temb_dim {
                Some(e) => Some(Linear::new(&mut b.push("temb"), e, cout, true)?),
                None => None,
            },
            residual: cin == cout,
        })
    }

    fn forward(&self, x: &Tensor, temb: Option<&Tensor>) -> Result<Tensor> {
        let mut h = self.conv.forward(x)?;
        if let (Some(proj), Some(t)) = (&self.temb, temb) {
            let shift = proj.forward(t)?;
            let (bsz, c) = shift.dims2()?;
            h = h.broadcast_add(&shift.reshape((bsz, c, 1, 1))?)?;
        }
        let h = nn::silu(&h)?;
        if self.residual {
            Ok((x + h)?)
        } else {
            Ok(h)
        }
    }
}

#[derive(Debug, Clone)]
pub struct UNet {
    cfg: UNetConfig,
    stem: Conv2d,
    enc: Vec<Block>,
    down: Vec<Block>,
    mid: Block,
    dec: Vec<Block>,
    head: Conv2d,
    agba: Vec<Option<AgbaBlock>>,
    temb_mlp: Option<(Linear, Linear)>,
}

/// Sinusoidal embedding of (possibly fractional) timesteps, `(B, dim)`.
pub fn timestep_embedding(t: &[f64], dim: usize, like: &Tensor) -> Result<Tensor> {
    let half = dim / 2;
    let mut data = Vec::with_capacity(t.len() * dim);
    for &ti in t {
        for i in 0..half {
            let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
            data.push((ti * freq).sin());
        }
        for i in 0..half {
            let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
            data.push((ti * freq).cos());
        }
    }
    Ok(Tensor::from_vec(data, (t.len(), dim), like.device())?.to_dtype(like.dtype())?)
}

impl UNet {
    pub fn new(b: &mut Builder, cfg: UNetConfig) -> Result<Self> {
        cfg.validate()?;
        let e = cfg.time_embed_dim;
        let stem = Conv2d::new(&mut b.push("stem"), cfg.in_channels, cfg.channels(0), 3, false)?;
        let mut enc = Vec::new();
        let mut down = Vec::new();
        for l in 0..cfg.depth {
            enc.push(Block::new(&mut b.push(&format!("enc{l}")), cfg.channels(l), cfg.channels(l), e)?);
            down.push(Block::new(
                &mut b.push(&format!("down{l}")),
                cfg.channels(l),
                cfg.channels(l + 1),
                e,
            )?);
        }
        let mid = Block::new(&mut b.push("mid"), cfg.channels(cfg.depth), cfg.channels(cfg.depth), e)?;
        let mut dec = Vec::new();
        for k in 1..=cfg.depth {
            let l = cfg.depth - k;
            dec.push(Block::new(
                &mut b.push(&format!("dec{k}")),
                cfg.channels(l + 1) + cfg.channels(l),
                cfg.channels(l),
                e,
            )?);
        }
        let head = Conv2d::new(&mut b.push("head"), cfg.channels(0), cfg.out_channels, 3, true)?;
        let mut agba = Vec::new();
        for stage in 0..=cfg.depth {
            if cfg.agba_stages.contains(&stage) {
                let ch = cfg.channels(cfg.stage_level(stage));
                let acfg = AgbaConfig {
                    feature_channels: ch,
                    image_prior_channels: ch,
                    prior_channels: ch,
                    embed_dim: ch,
                    num_heads: cfg.agba_heads,
                    gate_hidden: cfg.agba_gate_hidden,
                };
                agba.push(Some(AgbaBlock::new(&mut b.push(&format!("agba{stage}")), acfg, stage)?));
            } else {
                agba.push(None);
            }
        }
        let temb_mlp = match e {
            Some(e) => Some((
                Linear::new(&mut b.push("temb_in"), e, e, true)?,
                Linear::new(&mut b.push("temb_out"), e, e, true)?,
            )),
            None => None,
        };
        Ok(Self {
            cfg,
            stem,
            enc,
            down,
            mid,
            dec,
            head,
            agba,
            temb_mlp,
        })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.cfg
    }

    /// Runs the network. `timesteps` is required iff time conditioning is on;
    /// `contrast` is the full-resolution `(B, 1, H, W)` heatmap, required iff AGBA stages exist.
    pub fn forward(&self, x: &Tensor, timesteps: Option<&[f64]>, contrast: Option<&Tensor>) -> Result<Tensor> {
        let (_, _, h, w) = x.dims4()?;
        let m = self.cfg.size_multiple();
        ensure(h % m == 0 && w % m == 0, || {
            format!("input {h}x{w} not divisible by {m} (depth {})", self.cfg.depth)
        })?;
        let temb = match (&self.temb_mlp, timesteps) {
            (Some((l1, l2)), Some(t)) => {
                let e = timestep_embedding(t, self.cfg.time_embed_dim.unwrap(), x)?;
                Some(nn::silu(&l2.forward(&nn::silu(&l1.forward(&e)?)?)?)?)
            }
            (None, None) => None,
            (Some(_), None) => return Err(crate::Error::validation("time-conditioned U-Net needs timesteps")),
            (None, Some(_)) => return Err(crate::Error::validation("U-Net has no time conditioning")),
        };
        let temb = temb.as_ref();
        let needs_prior = self.agba.iter().any(Option::is_some);
        ensure(!needs_prior || contrast.is_some(), || "AGBA stages need a contrast prior".into())?;

        let mut hcur = nn::silu(&self.stem.forward(x)?)?;
        let mut skips = Vec::with_capacity(self.cfg.depth);
        for l in 0..self.cfg.depth {
            hcur = self.enc[l].forward(&hcur, temb)?;
            skips.push(hcur.clone());
            hcur = self.down[l].forward(&hcur.avg_pool2d(2)?, temb)?;
        }
        let mid_in = hcur.clone();
        hcur = self.mid.forward(&hcur, temb)?;
        if let Some(blk) = &self.agba[0] {
            hcur = blk.forward(&hcur, &resize_prior(contrast.unwrap(), &hcur)?, &mid_in)?;
        }
        for k in 1..=self.cfg.depth {
            let l = self.cfg.depth - k;
            let (_, _, sh, sw) = skips[l].dims4()?;
            let up = hcur.upsample_nearest2d(sh, sw)?;
            hcur = self.dec[k - 1].forward(&Tensor::cat(&[&up, &skips[l]], 1)?, temb)?;
            if let Some(blk) = &self.agba[k] {
                hcur = blk.forward(&hcur, &resize_prior(contrast.unwrap(), &hcur)?, &skips[l])?;
            }
        }
        self.head.forward(&hcur)
    }
}

/// Bilinear resize of the `(B, 1, H, W)` prior to the spatial size of `like`.
fn resize_prior(c: &Tensor, like: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = like.dims4()?;
    let (_, _, ch, cw) = c.dims4()?;
    if (ch, cw) == (h, w) {
        return Ok(c.clone());
    }
    Ok(c.detach().upsample_bilinear2d(h, w, false)?)
}
