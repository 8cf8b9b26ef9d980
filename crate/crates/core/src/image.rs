//! The pixel container shared by every stage, plus PNG I/O and resampling.

use std::path::Path;

use candle_core::{DType, Device, Tensor};

use crate::error::{ensure, Error, Result};

/// Smallest spatial extent accepted by [`ImageTensor::validate`].
pub const MIN_SIDE: usize = 8;

/// Planar `(C, H, W)` image with values nominally in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl ImageTensor {
    /// Wraps raw planar data. Only the shape is checked here; call
    /// [`validate`](Self::validate) for the value-range invariants.
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        ensure(channels == 1 || channels == 3, || {
            format!("channel count must be 1 or 3, got {channels}")
        })?;
        ensure(data.len() == channels * height * width, || {
            format!(
                "data length {} does not match shape ({channels}, {height}, {width})",
                data.len()
            )
        })?;
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f32) -> Result<Self> {
        Self::new(channels, height, width, vec![value; channels * height * width])
    }

    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self::new(channels, height, width, data)
    }

    /// Checks that every value is finite and in `[0, 1]` and that both sides are at least [`MIN_SIDE`].
    pub fn validate(&self) -> Result<()> {
        ensure(self.height >= MIN_SIDE && self.width >= MIN_SIDE, || {
            format!(
                "image is {}x{}, minimum is {MIN_SIDE}x{MIN_SIDE}",
                self.height, self.width
            )
        })?;
        if let Some(i) = self.data.iter().position(|v| !v.is_finite()) {
            return Err(Error::validation(format!("non-finite value at index {i}")));
        }
        if let Some(i) = self.data.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::validation(format!(
                "value {} at index {i} outside [0, 1]",
                self.data[i]
            )));
        }
        Ok(())
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..self.clone()
        }
    }

    pub fn clamp01(&self) -> Self {
        self.map(|v| v.clamp(0.0, 1.0))
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.shape() == other.shape()
    }

    /// `(1, C, H, W)` tensor of the requested dtype.
    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        let t = Tensor::from_slice(&self.data, (1, self.channels, self.height, self.width), device)?;
        Ok(t.to_dtype(dtype)?)
    }

    /// Stacks equally-shaped images into a `(B, C, H, W)` tensor.
    pub fn batch_to_tensor(images: &[&ImageTensor], dtype: DType, device: &Device) -> Result<Tensor> {
        let first = images
            .first()
            .ok_or_else(|| Error::validation("empty image batch"))?;
        let (c, h, w) = first.shape();
        let mut data = Vec::with_capacity(images.len() * c * h * w);
        for img in images {
            ensure(img.shape() == (c, h, w), || {
                format!("batch shape mismatch: {:?} vs {:?}", img.shape(), (c, h, w))
            })?;
            data.extend_from_slice(&img.data);
        }
        let t = Tensor::from_vec(data, (images.len(), c, h, w), device)?;
        Ok(t.to_dtype(dtype)?)
    }

    /// Converts one `(C, H, W)` or `(1, C, H, W)` tensor back to an image (no clamping).
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let t = match t.rank() {
            4 => t.squeeze(0)?,
            3 => t.clone(),
            r => return Err(Error::validation(format!("expected rank 3 or 4 tensor, got {r}"))),
        };
        let (c, h, w) = t.dims3()?;
        let data = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        Self::new(c, h, w, data)
    }

    /// Splits a `(B, C, H, W)` tensor into images.
    pub fn unbatch(t: &Tensor) -> Result<Vec<Self>> {
        let b = t.dim(0)?;
        (0..b).map(|i| Self::from_tensor(&t.get(i)?)).collect()
    }

    /// Loads an 8-bit PNG (or any format the `image` crate decodes) as RGB scaled by 1/255.
    pub fn load_png(path: &Path) -> Result<Self> {
        let img = ::image::open(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?;
        let rgb = img.to_rgb8();
        let (w, h) = (rgb.width() as usize, rgb.height() as usize);
        let mut data = vec![0f32; 3 * h * w];
        for (x, y, px) in rgb.enumerate_pixels() {
            for c in 0..3 {
                data[(c * h + y as usize) * w + x as usize] = px.0[c] as f32 / 255.0;
            }
        }
        Self::new(3, h, w, data)
    }

    /// Writes an 8-bit PNG; values are clamped then scaled with round-half-up.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let (h, w) = (self.height, self.width);
        let to_u8 = |v: f32| -> u8 { (v.clamp(0.0, 1.0) as f64 * 255.0 + 0.5).floor() as u8 };
        let wrap = |source| Error::Image {
            path: path.to_path_buf(),
            source,
        };
        if self.channels == 1 {
            let buf = ::image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
                ::image::Luma([to_u8(self.get(0, y as usize, x as usize))])
            });
            buf.save_with_format(path, ::image::ImageFormat::Png).map_err(wrap)
        } else {
            let buf = ::image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
                let (y, x) = (y as usize, x as usize);
                ::image::Rgb([
                    to_u8(self.get(0, y, x)),
                    to_u8(self.get(1, y, x)),
                    to_u8(self.get(2, y, x)),
                ])
            });
            buf.save_with_format(path, ::image::ImageFormat::Png).map_err(wrap)
        }
    }

    /// Bilinear resampling with half-pixel centers (`align_corners = false`).
    pub fn resize_bilinear(&self, height: usize, width: usize) -> Result<Self> {
        ensure(height > 0 && width > 0, || "resize target must be non-empty".into())?;
        if (height, width) == (self.height, self.width) {
            return Ok(self.clone());
        }
        let sy = self.height as f64 / height as f64;
        let sx = self.width as f64 / width as f64;
        let taps = |pos: f64, len: usize| -> (usize, usize, f64) {
            let p = pos.max(0.0);
            let i0 = (p.floor() as usize).min(len - 1);
            let i1 = (i0 + 1).min(len - 1);
            (i0, i1, p - i0 as f64)
        };
        Self::from_fn(self.channels, height, width, |c, y, x| {
            let (y0, y1, fy) = taps((y as f64 + 0.5) * sy - 0.5, self.height);
            let (x0, x1, fx) = taps((x as f64 + 0.5) * sx - 0.5, self.width);
            let top = self.get(c, y0, x0) as f64 * (1.0 - fx) + self.get(c, y0, x1) as f64 * fx;
            let bot = self.get(c, y1, x0) as f64 * (1.0 - fx) + self.get(c, y1, x1) as f64 * fx;
            (top * (1.0 - fy) + bot * fy) as f32
        })
    }

    /// Pads on the bottom/right with mirrored content so both sides become multiples of `multiple`.
    pub fn pad_reflect_to_multiple(&self, multiple: usize) -> Self {
        let h = self.height.div_ceil(multiple) * multiple;
        let w = self.width.div_ceil(multiple) * multiple;
        if (h, w) == (self.height, self.width) {
            return self.clone();
        }
        let src = self;
        Self::from_fn(self.channels, h, w, |c, y, x| {
            src.get(c, reflect_index(y as isize, src.height), reflect_index(x as isize, src.width))
        })
        .expect("padded shape is consistent")
    }

    pub fn crop(&self, height: usize, width: usize) -> Result<Self> {
        ensure(height <= self.height && width <= self.width, || {
            "crop larger than image".into()
        })?;
        Self::from_fn(self.channels, height, width, |c, y, x| self.get(c, y, x))
    }
}

/// Mirror index without edge repetition (`-1 -> 1`, `len -> len - 2`).
#[inline]
pub fn reflect_index(i: isize, len: usize) -> usize {
    let n = len as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let mut m = i.rem_euclid(period);
    if m >= n {
        m = period - m;
    }
    m as usize
}
