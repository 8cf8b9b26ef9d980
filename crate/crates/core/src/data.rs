//! Paired shadow / shadow-free data: directory loading, paired augmentation
//! and a procedural synthetic-shadow generator.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::image::ImageTensor;
use crate::nn::rng_for;
use crate::priors::gaussian_1d;

pub const SHADOW_DIR: &str = "shadow";
pub const SHADOW_FREE_DIR: &str = "shadow_free";
pub const MANIFEST_FILE: &str = "manifest.tsv";

const STREAM_SYNTH: u64 = 1;
const STREAM_EPOCH: u64 = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct PairedSample {
    pub shadow: ImageTensor,
    pub shadow_free: ImageTensor,
    pub id: String,
}

impl PairedSample {
    pub fn new(shadow: ImageTensor, shadow_free: ImageTensor, id: impl Into<String>) -> Result<Self> {
        let id = id.into();
        shadow.validate()?;
        shadow_free.validate()?;
        ensure(shadow.same_shape(&shadow_free), || {
            format!("pair `{id}`: shadow {:?} vs shadow-free {:?}", shadow.shape(), shadow_free.shape())
        })?;
        Ok(Self { shadow, shadow_free, id })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// A file that could not be turned into a sample.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Reject {
    pub id: String,
    pub reason: String,
}

#[derive(Debug, Clone, Default)]
pub struct PairedDataset {
    pub samples: Vec<PairedSample>,
    pub rejects: Vec<Reject>,
}

/// PNG file stems in `dir`, sorted.
pub fn png_stems(dir: &Path) -> Result<BTreeSet<String>> {
    let mut out = BTreeSet::new();
    if !dir.exists() {
        return Ok(out);
    }
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let is_png = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if is_png {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.insert(stem.to_string());
            }
        }
    }
    Ok(out)
}

/// Loads `<root>/<split>/{shadow,shadow_free}/*.png`, matched by file name, in
/// lexicographic order. Orphans and unreadable or mismatched pairs become rejects.
pub fn load_paired_dir(root: &Path, split: Split) -> Result<PairedDataset> {
    let base = root.join(split.as_str());
    let sdir = base.join(SHADOW_DIR);
    let fdir = base.join(SHADOW_FREE_DIR);
    ensure(sdir.is_dir() && fdir.is_dir(), || {
        format!("{} must contain `{SHADOW_DIR}/` and `{SHADOW_FREE_DIR}/`", base.display())
    })?;
    let s = png_stems(&sdir)?;
    let f = png_stems(&fdir)?;
    let mut ds = PairedDataset::default();
    for id in s.union(&f) {
        if !s.contains(id) {
            ds.rejects.push(Reject {
                id: id.clone(),
                reason: "missing shadow image".into(),
            });
            continue;
        }
        if !f.contains(id) {
            ds.rejects.push(Reject {
                id: id.clone(),
                reason: "missing shadow-free image".into(),
            });
            continue;
        }
        let loaded = ImageTensor::load_png(&sdir.join(format!("{id}.png"))).and_then(|a| {
            let b = ImageTensor::load_png(&fdir.join(format!("{id}.png")))?;
            PairedSample::new(a, b, id.clone())
        });
        match loaded {
            Ok(sample) => ds.samples.push(sample),
            Err(e) => ds.rejects.push(Reject {
                id: id.clone(),
                reason: e.to_string(),
            }),
        }
    }
    Ok(ds)
}

/// Shadow footprint in normalized `[0, 1]` image coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ShadowShape {
    Ellipse {
        cx: f64,
        cy: f64,
        rx: f64,
        ry: f64,
        angle: f64,
    },
    Polygon {
        vertices: Vec<(f64, f64)>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticShadowSpec {
    pub shape: ShadowShape,
    /// Fraction of light kept inside the shadow, in `(0, 1)`.
    pub attenuation: f64,
    /// Gaussian blur sigma of the mask edge, in pixels.
    pub softness: f64,
    /// Per-channel multipliers on the darkening.
    pub color_shift: [f64; 3],
}

impl SyntheticShadowSpec {
    pub fn validate(&self) -> Result<()> {
        ensure(self.attenuation > 0.0 && self.attenuation < 1.0, || {
            format!("attenuation must be in (0, 1), got {}", self.attenuation)
        })?;
        ensure(self.softness >= 0.0 && self.softness.is_finite(), || {
            format!("softness must be >= 0, got {}", self.softness)
        })?;
        ensure(self.color_shift.iter().all(|c| c.is_finite() && *c >= 0.0), || {
            "color shift must be finite and non-negative".into()
        })?;
        if let ShadowShape::Polygon { vertices } = &self.shape {
            ensure(vertices.len() >= 3, || "polygon needs at least 3 vertices".into())?;
        }
        Ok(())
    }

    /// Random hard or soft shadow.
    pub fn random(rng: &mut ChaCha8Rng) -> Self {
        let shape = if rng.random_bool(0.5) {
            ShadowShape::Ellipse {
                cx: rng.random_range(0.25..0.75),
                cy: rng.random_range(0.25..0.75),
                rx: rng.random_range(0.15..0.35),
                ry: rng.random_range(0.15..0.35),
                angle: rng.random_range(0.0..std::f64::consts::PI),
            }
        } else {
            let cx: f64 = rng.random_range(0.3..0.7);
            let cy: f64 = rng.random_range(0.3..0.7);
            let n = rng.random_range(3..=6);
            let start: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let vertices = (0..n)
                .map(|i| {
                    let a = start + std::f64::consts::TAU * i as f64 / n as f64;
                    let r: f64 = rng.random_range(0.2..0.4);
                    (cx + r * a.cos(), cy + r * a.sin())
                })
                .collect();
            ShadowShape::Polygon { vertices }
        };
        let softness = if rng.random_bool(0.5) {
            0.0
        } else {
            rng.random_range(0.5..3.0)
        };
        Self {
            shape,
            attenuation: rng.random_range(0.25..0.6),
            softness,
            color_shift: [
                rng.random_range(0.9..1.1),
                rng.random_range(0.9..1.1),
                rng.random_range(0.95..1.15),
            ],
        }
    }
}

fn inside(shape: &ShadowShape, x: f64, y: f64) -> bool {
    match shape {
        ShadowShape::Ellipse { cx, cy, rx, ry, angle } => {
            let (dx, dy) = (x - cx, y - cy);
            let (s, c) = angle.sin_cos();
            let u = (c * dx + s * dy) / rx;
            let v = (-s * dx + c * dy) / ry;
            u * u + v * v <= 1.0
        }
        ShadowShape::Polygon { vertices } => {
            let mut inside = false;
            let n = vertices.len();
            for i in 0..n {
                let (xi, yi) = vertices[i];
                let (xj, yj) = vertices[(i + n - 1) % n];
                if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
                    inside = !inside;
                }
            }
            inside
        }
    }
}

/// Soft mask in `[0, 1]`, `h * w` row-major: pixel-center rasterization then Gaussian edge blur.
pub fn rasterize_mask(spec: &SyntheticShadowSpec, h: usize, w: usize) -> Vec<f64> {
    let mut m: Vec<f64> = (0..h * w)
        .map(|i| {
            let (y, x) = (i / w, i % w);
            let p = ((x as f64 + 0.5) / w as f64, (y as f64 + 0.5) / h as f64);
            if inside(&spec.shape, p.0, p.1) {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    if spec.softness > 0.0 {
        let radius = (3.0 * spec.softness).ceil() as usize;
        let g = gaussian_1d(spec.softness, radius);
        let r = radius as isize;
        let mut tmp = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                tmp[y * w + x] = g
                    .iter()
                    .enumerate()
                    .map(|(k, gk)| gk * m[y * w + crate::image::reflect_index(x as isize + k as isize - r, w)])
                    .sum();
            }
        }
        for y in 0..h {
            for x in 0..w {
                m[y * w + x] = g
                    .iter()
                    .enumerate()
                    .map(|(k, gk)| gk * tmp[crate::image::reflect_index(y as isize + k as isize - r, h) * w + x])
                    .sum::<f64>()
                    .clamp(0.0, 1.0);
            }
        }
    }
    m
}

/// Darkens `clean` under the mask: `clean * (1 - m (1 - attenuation) shift_c)`, clamped.
pub fn apply_shadow(clean: &ImageTensor, mask: &[f64], spec: &SyntheticShadowSpec) -> Result<ImageTensor> {
    let (c, h, w) = clean.shape();
    ensure(c == 3 && mask.len() == h * w, || "shadow mask does not match the RGB image".into())?;
    ImageTensor::from_fn(3, h, w, |ch, y, x| {
        let m = mask[y * w + x];
        let factor = 1.0 - m * (1.0 - spec.attenuation) * spec.color_shift[ch];
        (clean.get(ch, y, x) as f64 * factor).clamp(0.0, 1.0) as f32
    })
}

pub fn synthesize_pair(clean: &ImageTensor, spec: &SyntheticShadowSpec, id: impl Into<String>) -> Result<PairedSample> {
    clean.validate()?;
    spec.validate()?;
    let mask = rasterize_mask(spec, clean.height(), clean.width());
    PairedSample::new(apply_shadow(clean, &mask, spec)?, clean.clone(), id)
}

/// Smooth value noise: bilinear-smoothstep interpolation of a random lattice.
fn value_noise(rng: &mut ChaCha8Rng, h: usize, w: usize, cells: usize) -> Vec<f64> {
    let n = cells + 1;
    let lattice: Vec<f64> = (0..n * n).map(|_| rng.random::<f64>()).collect();
    let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
    (0..h * w)
        .map(|i| {
            let (y, x) = (i / w, i % w);
            let gy = y as f64 / h as f64 * cells as f64;
            let gx = x as f64 / w as f64 * cells as f64;
            let (y0, x0) = (gy.floor() as usize, gx.floor() as usize);
            let (fy, fx) = (smooth(gy - y0 as f64), smooth(gx - x0 as f64));
            let at = |yy: usize, xx: usize| lattice[yy.min(cells) * n + xx.min(cells)];
            let top = at(y0, x0) * (1.0 - fx) + at(y0, x0 + 1) * fx;
            let bot = at(y0 + 1, x0) * (1.0 - fx) + at(y0 + 1, x0 + 1) * fx;
            top * (1.0 - fy) + bot * fy
        })
        .collect()
}

/// Procedural clean image: colored gradient, multi-octave value noise and a few flat rectangles.
pub fn procedural_clean(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Result<ImageTensor> {
    let base: [f64; 3] = [rng.random_range(0.35..0.9), rng.random_range(0.35..0.9), rng.random_range(0.35..0.9)];
    let tint: [f64; 3] = [rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2)];
    let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let (ga, gb) = (angle.cos(), angle.sin());
    let mut noise = vec![0.0; h * w];
    for (cells, amp) in [(2usize, 0.5), (4, 0.3), (8, 0.2)] {
        for (acc, v) in noise.iter_mut().zip(value_noise(rng, h, w, cells)) {
            *acc += amp * (v - 0.5);
        }
    }
    let noise_amp: [f64; 3] = [rng.random_range(0.1..0.3), rng.random_range(0.1..0.3), rng.random_range(0.1..0.3)];
    let n_rect = rng.random_range(1..=4);
    let rects: Vec<(f64, f64, f64, f64, [f64; 3])> = (0..n_rect)
        .map(|_| {
            let x0: f64 = rng.random_range(0.0..0.8);
            let y0: f64 = rng.random_range(0.0..0.8);
            let x1 = x0 + rng.random_range(0.1..0.4);
            let y1 = y0 + rng.random_range(0.1..0.4);
            let col = [rng.random_range(0.2..0.95), rng.random_range(0.2..0.95), rng.random_range(0.2..0.95)];
            (x0, y0, x1, y1, col)
        })
        .collect();
    ImageTensor::from_fn(3, h, w, |c, y, x| {
        let u = (x as f64 + 0.5) / w as f64;
        let v = (y as f64 + 0.5) / h as f64;
        let mut val = base[c] + tint[c] * ((u - 0.5) * ga + (v - 0.5) * gb);
        for (x0, y0, x1, y1, col) in &rects {
            if u >= *x0 && u < *x1 && v >= *y0 && v < *y1 {
                val = 0.5 * val + 0.5 * col[c];
            }
        }
        val += noise_amp[c] * noise[y * w + x];
        val.clamp(0.0, 1.0) as f32
    })
}

/// Per-sample generator for the synthetic set.
pub fn synthetic_rng(seed: u64, index: u64) -> ChaCha8Rng {
    rng_for(seed, STREAM_SYNTH, index)
}

/// Sample `index` of the synthetic set with its shadow description.
pub fn synthetic_sample(seed: u64, index: u64, size: usize, id: &str) -> Result<(PairedSample, SyntheticShadowSpec)> {
    let mut rng = synthetic_rng(seed, index);
    let clean = procedural_clean(&mut rng, size, size)?;
    let spec = SyntheticShadowSpec::random(&mut rng);
    Ok((synthesize_pair(&clean, &spec, id)?, spec))
}

/// One manifest line per written pair.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub id: String,
    pub split: Split,
    pub seed: u64,
    pub index: u64,
    pub spec: SyntheticShadowSpec,
}

fn write_pair(dir: &Path, sample: &PairedSample) -> Result<()> {
    let name = format!("{}.png", sample.id);
    sample.shadow.save_png(&dir.join(SHADOW_DIR).join(&name))?;
    sample.shadow_free.save_png(&dir.join(SHADOW_FREE_DIR).join(name))
}

fn create_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

/// Writes `train` and `test` pairs under `root` plus a tab-separated manifest
/// (`id`, `split`, `seed`, `index`, `spec` as JSON). Test indices follow the train ones.
pub fn write_synthetic_dataset(
    root: &Path,
    n_train: usize,
    n_test: usize,
    size: usize,
    seed: u64,
) -> Result<Vec<ManifestEntry>> {
    ensure(size >= crate::image::MIN_SIDE, || format!("image size must be >= {}", crate::image::MIN_SIDE))?;
    let mut entries = Vec::with_capacity(n_train + n_test);
    let mut index = 0u64;
    for (split, n) in [(Split::Train, n_train), (Split::Test, n_test)] {
        let dir = root.join(split.as_str());
        create_dir(&dir.join(SHADOW_DIR))?;
        create_dir(&dir.join(SHADOW_FREE_DIR))?;
        for k in 0..n {
            let id = format!("{}_{k:05}", split.as_str());
            let (sample, spec) = synthetic_sample(seed, index, size, &id)?;
            write_pair(&dir, &sample)?;
            entries.push(ManifestEntry {
                id,
                split,
                seed,
                index,
                spec,
            });
            index += 1;
        }
    }
    let mut text = String::from("id\tsplit\tseed\tindex\tspec\n");
    for e in &entries {
        text.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\n",
            e.id,
            e.split.as_str(),
            e.seed,
            e.index,
            serde_json::to_string(&e.spec)?
        ));
    }
    crate::io::write_atomic(&root.join(MANIFEST_FILE), text.as_bytes())?;
    Ok(entries)
}

/// Geometric augmentation shared by both images of a pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineParams {
    pub angle_deg: f64,
    /// Translation as a fraction of width / height.
    pub tx: f64,
    pub ty: f64,
    pub scale: f64,
    pub flip: bool,
}

impl AffineParams {
    pub const IDENTITY: Self = Self {
        angle_deg: 0.0,
        tx: 0.0,
        ty: 0.0,
        scale: 1.0,
        flip: false,
    };

    /// Rotation within ±10°, translation within ±5%, scale in [0.9, 1.1], flip with p = 0.5.
    pub fn draw(rng: &mut ChaCha8Rng) -> Self {
        Self {
            angle_deg: rng.random_range(-10.0..=10.0),
            tx: rng.random_range(-0.05..=0.05),
            ty: rng.random_range(-0.05..=0.05),
            scale: rng.random_range(0.9..=1.1),
            flip: rng.random_bool(0.5),
        }
    }

    /// Source coordinate (continuous, pixel units) read for output pixel `(x, y)`.
    pub fn source_coord(&self, x: f64, y: f64, h: usize, w: usize) -> (f64, f64) {
        let x = if self.flip { (w - 1) as f64 - x } else { x };
        let (cx, cy) = ((w - 1) as f64 / 2.0, (h - 1) as f64 / 2.0);
        let dx = x - cx - self.tx * w as f64;
        let dy = y - cy - self.ty * h as f64;
        let (s, c) = self.angle_deg.to_radians().sin_cos();
        (cx + (c * dx + s * dy) / self.scale, cy + (-s * dx + c * dy) / self.scale)
    }
}

fn reflect_coord(p: f64, len: usize) -> f64 {
    if len == 1 {
        return 0.0;
    }
    let period = 2.0 * (len - 1) as f64;
    let m = p.rem_euclid(period);
    if m > (len - 1) as f64 {
        period - m
    } else {
        m
    }
}

/// Bilinear resampling under `params` with reflect padding outside the frame.
pub fn apply_affine(image: &ImageTensor, params: &AffineParams) -> Result<ImageTensor> {
    let (c, h, w) = image.shape();
    let coords: Vec<(f64, f64)> = (0..h * w)
        .map(|i| {
            let (sx, sy) = params.source_coord((i % w) as f64, (i / w) as f64, h, w);
            (reflect_coord(sx, w), reflect_coord(sy, h))
        })
        .collect();
    ImageTensor::from_fn(c, h, w, |ch, y, x| {
        let (sx, sy) = coords[y * w + x];
        let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
        let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
        let (fx, fy) = (sx - x0 as f64, sy - y0 as f64);
        let v = |yy: usize, xx: usize| image.get(ch, yy, xx) as f64;
        let top = if fx == 0.0 { v(y0, x0) } else { v(y0, x0) * (1.0 - fx) + v(y0, x1) * fx };
        let bot = if fx == 0.0 { v(y1, x0) } else { v(y1, x0) * (1.0 - fx) + v(y1, x1) * fx };
        let out = if fy == 0.0 { top } else { top * (1.0 - fy) + bot * fy };
        out.clamp(0.0, 1.0) as f32
    })
}

/// Draws one transform and applies it to both images.
pub fn augment(sample: &PairedSample, rng: &mut ChaCha8Rng) -> Result<PairedSample> {
    let p = AffineParams::draw(rng);
    augment_with(sample, &p)
}

pub fn augment_with(sample: &PairedSample, params: &AffineParams) -> Result<PairedSample> {
    Ok(PairedSample {
        shadow: apply_affine(&sample.shadow, params)?,
        shadow_free: apply_affine(&sample.shadow_free, params)?,
        id: sample.id.clone(),
    })
}

/// Sample indices of batch `step`: consecutive slices of per-epoch permutations,
/// a pure function of `(n, batch, seed, step)`.
pub fn batch_indices(n: usize, batch: usize, seed: u64, step: u64) -> Vec<usize> {
    assert!(n > 0 && batch > 0);
    let start = step as usize * batch;
    let mut out = Vec::with_capacity(batch);
    let mut cached: Option<(usize, Vec<usize>)> = None;
    for pos in start..start + batch {
        let epoch = pos / n;
        if cached.as_ref().is_none_or(|(e, _)| *e != epoch) {
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut rng_for(seed, STREAM_EPOCH, epoch as u64));
            cached = Some((epoch, perm));
        }
        out.push(cached.as_ref().unwrap().1[pos % n]);
    }
    out
}
