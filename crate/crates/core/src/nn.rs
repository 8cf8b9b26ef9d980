//! Small neural-network toolkit on top of candle tensors: a named parameter
//! store with seeded initialisation, convolution/linear layers and a few
//! numerically careful activations.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Every trainable tensor of a model, keyed by a dotted path.
#[derive(Debug, Clone)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    dtype: DType,
    device: Device,
}

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Const(f64),
    /// He-normal with the given fan-in.
    Kaiming { fan_in: usize },
    Normal { std: f64 },
}

impl ParamStore {
    pub fn new(dtype: DType, device: Device) -> Self {
        Self {
            vars: BTreeMap::new(),
            dtype,
            device,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn vars(&self) -> &BTreeMap<String, Var> {
        &self.vars
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    fn create(&mut self, name: String, shape: &[usize], init: Init, rng: &mut ChaCha8Rng) -> Result<Tensor> {
        if self.vars.contains_key(&name) {
            return Err(Error::validation(format!("duplicate parameter `{name}`")));
        }
        let n: usize = shape.iter().product();
        let data: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Const(c) => vec![c; n],
            Init::Kaiming { fan_in } => {
                let std = (2.0 / fan_in.max(1) as f64).sqrt();
                (0..n).map(|_| std * sample_normal(rng)).collect()
            }
            Init::Normal { std } => (0..n).map(|_| std * sample_normal(rng)).collect(),
        };
        let t = Tensor::from_vec(data, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let handle = var.as_tensor().clone();
        self.vars.insert(name, var);
        Ok(handle)
    }

    /// Detached copies of every parameter.
    pub fn snapshot(&self) -> Result<BTreeMap<String, Tensor>> {
        self.vars
            .iter()
            .map(|(k, v)| Ok((k.clone(), v.as_detached_tensor().copy()?)))
            .collect()
    }

    /// Overwrites parameters in place; key sets and shapes must match exactly.
    pub fn assign(&self, values: &BTreeMap<String, Tensor>) -> Result<()> {
        check_same_keys(self.vars.keys(), values.keys())?;
        for (k, var) in &self.vars {
            let v = &values[k];
            if v.dims() != var.dims() {
                return Err(Error::validation(format!(
                    "shape mismatch for `{k}`: {:?} vs {:?}",
                    v.dims(),
                    var.dims()
                )));
            }
            var.set(&v.to_dtype(self.dtype)?)?;
        }
        Ok(())
    }
}

pub(crate) fn check_same_keys<'a>(
    a: impl Iterator<Item = &'a String>,
    b: impl Iterator<Item = &'a String>,
) -> Result<()> {
    let a: Vec<&String> = a.collect();
    let b: Vec<&String> = b.collect();
    if a != b {
        let missing: Vec<String> = a.iter().filter(|k| !b.contains(k)).map(|k| k.to_string()).collect();
        let extra: Vec<String> = b.iter().filter(|k| !a.contains(k)).map(|k| k.to_string()).collect();
        return Err(Error::validation(format!(
            "parameter key sets differ (missing {missing:?}, unexpected {extra:?})"
        )));
    }
    Ok(())
}

pub fn sample_normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Standard-normal tensor drawn from an explicit RNG.
pub fn randn(shape: &[usize], dtype: DType, device: &Device, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let data: Vec<f32> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Ok(Tensor::from_vec(data, shape, device)?.to_dtype(dtype)?)
}

/// Independent generator for `(seed, stream, counter)`; the same triple always
/// yields the same sequence, so no generator state needs to be persisted.
pub fn rng_for(seed: u64, stream: u64, counter: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&stream.to_le_bytes());
    key[16..24].copy_from_slice(&counter.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

/// Uniform integer in `[lo, hi]`.
pub fn uniform_usize(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    rng.random_range(lo..=hi)
}

/// Scoped builder that prefixes parameter names and owns the init RNG.
pub struct Builder<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a> Builder<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut ChaCha8Rng) -> Self {
        Self {
            store,
            rng,
            prefix: String::new(),
        }
    }

    pub fn push(&mut self, name: &str) -> Builder<'_> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        Builder {
            store: self.store,
            rng: self.rng,
            prefix,
        }
    }

    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let full = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        self.store.create(full, shape, init, self.rng)
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype
    }

    pub fn device(&self) -> Device {
        self.store.device.clone()
    }
}

/// Stride-1 "same" convolution with square kernel (1 or 3) lowered to a matmul.
#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Tensor,
    in_channels: usize,
    out_channels: usize,
    kernel: usize,
}

impl Conv2d {
    pub fn new(b: &mut Builder, in_channels: usize, out_channels: usize, kernel: usize, zero: bool) -> Result<Self> {
        if kernel != 1 && kernel != 3 {
            return Err(Error::validation(format!("unsupported kernel size {kernel}")));
        }
        let fan_in = in_channels * kernel * kernel;
        let init = if zero { Init::Zeros } else { Init::Kaiming { fan_in } };
        let weight = b.param("weight", &[out_channels, fan_in], init)?;
        let bias = b.param("bias", &[out_channels], Init::Zeros)?;
        Ok(Self {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (bsz, c, h, w) = x.dims4()?;
        if c != self.in_channels {
            return Err(Error::validation(format!(
                "conv expects {} input channels, got {c}",
                self.in_channels
            )));
        }
        let cols = if self.kernel == 1 {
            x.reshape((bsz, c, h * w))?
        } else {
            im2col3(x)?
        };
        // candle's batched matmul mishandles stride-0 broadcasts, so materialise the weight.
        let wm = self
            .weight
            .unsqueeze(0)?
            .broadcast_as((bsz, self.out_channels, c * self.kernel * self.kernel))?
            .contiguous()?;
        let y = wm.matmul(&cols)?;
        let y = y.broadcast_add(&self.bias.reshape((1, self.out_channels, 1))?)?;
        Ok(y.reshape((bsz, self.out_channels, h, w))?)
    }
}

/// `(B, C, H, W)` -> `(B, 9C, H*W)` patches of a zero-padded 3x3 neighbourhood.
fn im2col3(x: &Tensor) -> Result<Tensor> {
    let (bsz, c, h, w) = x.dims4()?;
    let xp = x.pad_with_zeros(2, 1, 1)?.pad_with_zeros(3, 1, 1)?;
    let mut taps = Vec::with_capacity(9);
    for dy in 0..3 {
        for dx in 0..3 {
            taps.push(xp.narrow(2, dy, h)?.narrow(3, dx, w)?);
        }
    }
    let cols = Tensor::stack(&taps, 2)?;
    Ok(cols.reshape((bsz, c * 9, h * w))?)
}

/// Dense layer over the last dimension.
#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Option<Tensor>,
    in_features: usize,
    out_features: usize,
}

impl Linear {
    pub fn new(b: &mut Builder, in_features: usize, out_features: usize, bias: bool) -> Result<Self> {
        let weight = b.param(
            "weight",
            &[in_features, out_features],
            Init::Normal {
                std: (1.0 / in_features as f64).sqrt(),
            },
        )?;
        let bias = if bias {
            Some(b.param("bias", &[out_features], Init::Zeros)?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            in_features,
            out_features,
        })
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> Option<&Tensor> {
        self.bias.as_ref()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let last = *dims.last().ok_or_else(|| Error::validation("linear on scalar"))?;
        if last != self.in_features {
            return Err(Error::validation(format!(
                "linear expects {} features, got {last}",
                self.in_features
            )));
        }
        let rows = x.elem_count() / last;
        let y = x.reshape((rows, last))?.matmul(&self.weight)?;
        let y = match &self.bias {
            Some(b) => y.broadcast_add(b)?,
            None => y,
        };
        let mut out_dims = dims;
        *out_dims.last_mut().unwrap() = self.out_features;
        Ok(y.reshape(out_dims)?)
    }
}

pub fn silu(x: &Tensor) -> Result<Tensor> {
    Ok(x.silu()?)
}

/// Logistic function written through `tanh`, finite for any finite input.
pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(((x * 0.5)?.tanh()? * 0.5)?.affine(1.0, 0.5)?)
}

/// Softmax over the last axis with max-subtraction; the subtracted max is
/// detached, which leaves gradients unchanged because softmax is shift invariant.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let m = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&m)?.exp()?;
    let s = e.sum_keepdim(D::Minus1)?;
    Ok(e.broadcast_div(&s)?)
}

/// `|x|` whose derivative at zero is zero instead of one.
pub fn abs_smooth_at_zero(x: &Tensor) -> Result<Tensor> {
    let sign = x.sign()?.detach();
    Ok((x * sign)?)
}

/// `sqrt(u)` for `u >= 0` whose gradient is finite (and zero) at `u = 0`.
///
/// Uses `0.5 * (u * r + s)` with `s = sqrt(u)` and `r = s / (s^2 + tiny)`
/// held constant, which equals `sqrt(u)` in value and `1 / (2 sqrt(u))` in
/// derivative away from zero.
pub fn sqrt_safe(u: &Tensor) -> Result<Tensor> {
    let s = u.sqrt()?.detach();
    let r = (&s / s.sqr()?.affine(1.0, 1e-30)?)?;
    Ok(((u * r)? + s)?.affine(0.5, 0.0)?)
}

/// Reflect-pads the two spatial axes of a `(N, C, H, W)` tensor by `pad`
/// (mirror without edge repetition). Differentiable through `index_select`.
pub fn reflect_pad2d(x: &Tensor, pad: usize) -> Result<Tensor> {
    if pad == 0 {
        return Ok(x.clone());
    }
    let (_, _, h, w) = x.dims4()?;
    if pad >= h || pad >= w {
        return Err(Error::validation(format!(
            "reflect padding {pad} needs spatial size > {pad}, got {h}x{w}"
        )));
    }
    let idx = |len: usize| -> Result<Tensor> {
        let v: Vec<u32> = (-(pad as isize)..(len + pad) as isize)
            .map(|i| crate::image::reflect_index(i, len) as u32)
            .collect();
        Ok(Tensor::from_vec(v, len + 2 * pad, x.device())?)
    };
    let y = x.index_select(&idx(h)?, 2)?;
    Ok(y.index_select(&idx(w)?, 3)?)
}

/// Global L2 norm of a set of gradient tensors, accumulated in f64.
pub fn global_norm<'a>(grads: impl Iterator<Item = &'a Tensor>) -> Result<f64> {
    let mut acc = 0.0f64;
    for g in grads {
        acc += g.to_dtype(DType::F64)?.sqr()?.sum_all()?.to_scalar::<f64>()?;
    }
    Ok(acc.sqrt())
}

/// Flattened `f64` copy of any tensor.
pub fn to_f64_vec(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?)
}

pub fn scalar_f64(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}
