//! Run configuration: TOML sections `priors`, `model`, `diffusion`, `loss`,
//! `train`, `data`, with dotted-key overrides such as `train.lr=3e-4`.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffusion::{ConditionFlags, DenoiserConfig, ScheduleKind};
use crate::error::{ensure, Error, Result};
use crate::losses::LossWeights;
use crate::priors::HighPassKind;
use crate::unet::UNetConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorsConfig {
    pub gamma: f64,
    pub highpass: HighPassKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub base_channels: usize,
    pub depth: usize,
    pub use_agba: bool,
    pub agba_stages: Vec<usize>,
    pub agba_heads: usize,
    pub agba_gate_hidden: usize,
    pub denoiser_base_channels: usize,
    pub denoiser_depth: usize,
    pub time_embed_dim: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiffusionConfig {
    pub steps: usize,
    pub schedule: ScheduleKind,
    pub sample_steps: usize,
    pub condition_on_priors: bool,
    pub condition_on_content: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub lambda1: f64,
    pub lambda2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub ema_every: u64,
    pub ema_decay: f64,
    pub batch_size: usize,
    pub max_steps: u64,
    pub seed: u64,
    pub augment: bool,
    pub checkpoint_every: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Training images are bilinearly resized to `resolution x resolution`.
    pub resolution: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub priors: PriorsConfig,
    pub model: ModelConfig,
    pub diffusion: DiffusionConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self::desk()
    }
}

/// Keys left out of the fingerprint: extending a run must not invalidate its checkpoints.
const UNFINGERPRINTED: &[&str] = &["train.max_steps"];

impl Config {
    /// Desk-scale preset.
    pub fn desk() -> Self {
        Self {
            priors: PriorsConfig {
                gamma: crate::priors::DEFAULT_GAMMA,
                highpass: HighPassKind::Laplacian,
            },
            model: ModelConfig {
                base_channels: 32,
                depth: 4,
                use_agba: true,
                agba_stages: vec![0, 1, 2],
                agba_heads: 4,
                agba_gate_hidden: 16,
                denoiser_base_channels: 32,
                denoiser_depth: 4,
                time_embed_dim: 32,
            },
            diffusion: DiffusionConfig {
                steps: 100,
                schedule: ScheduleKind::LinearScaled,
                sample_steps: 20,
                condition_on_priors: true,
                condition_on_content: true,
            },
            loss: LossConfig {
                lambda1: 0.1,
                lambda2: 0.1,
            },
            train: TrainConfig {
                lr: 1e-4,
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
                weight_decay: 1e-4,
                grad_clip: 1.0,
                ema_every: 100,
                ema_decay: 0.999,
                batch_size: 8,
                max_steps: 2000,
                seed: 0,
                augment: true,
                checkpoint_every: 500,
            },
            data: DataConfig { resolution: 64 },
        }
    }

    /// Full-scale preset (256x256, T = 1000).
    pub fn full() -> Self {
        let mut c = Self::desk();
        c.model.base_channels = 64;
        c.model.denoiser_base_channels = 64;
        c.model.time_embed_dim = 64;
        c.diffusion.steps = 1000;
        c.diffusion.schedule = ScheduleKind::Linear;
        c.diffusion.sample_steps = 1000;
        c.train.max_steps = 100_000;
        c.data.resolution = 256;
        c
    }

    /// Small network for single-core runs: base 8, with a faster-moving EMA.
    pub fn tiny() -> Self {
        let mut c = Self::desk();
        c.model.base_channels = 8;
        c.model.denoiser_base_channels = 8;
        c.model.agba_heads = 2;
        c.model.agba_gate_hidden = 8;
        c.model.time_embed_dim = 16;
        c.train.lr = 1e-3;
        c.train.ema_decay = 0.8;
        c.train.batch_size = 4;
        c
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "full" => Ok(Self::full()),
            "tiny" => Ok(Self::tiny()),
            other => Err(Error::validation(format!("unknown preset `{other}` (desk, full, tiny)"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let p = &self.priors;
        ensure(p.gamma.is_finite() && p.gamma > 0.0, || format!("priors.gamma must be > 0, got {}", p.gamma))?;
        self.content_config().validate()?;
        ensure(self.model.agba_heads >= 1, || "model.agba_heads must be >= 1".into())?;
        for l in 0..=self.model.depth {
            let ch = self.content_config().channels(l);
            if self.model.use_agba && self.model.agba_stages.contains(&(self.model.depth - l)) {
                ensure(ch % self.model.agba_heads == 0, || {
                    format!("AGBA width {ch} not divisible by model.agba_heads {}", self.model.agba_heads)
                })?;
            }
        }
        let d = &self.diffusion;
        ensure(d.sample_steps >= 1 && d.sample_steps <= d.steps, || {
            format!("diffusion.sample_steps must be in 1..={}, got {}", d.steps, d.sample_steps)
        })?;
        crate::diffusion::make_schedule(d.steps, d.schedule)?;
        LossWeights {
            lambda1: self.loss.lambda1,
            lambda2: self.loss.lambda2,
        }
        .validate()?;
        let t = &self.train;
        ensure(t.lr.is_finite() && t.lr >= 0.0, || format!("train.lr must be >= 0, got {}", t.lr))?;
        for (k, v) in [("train.beta1", t.beta1), ("train.beta2", t.beta2)] {
            ensure((0.0..1.0).contains(&v), || format!("{k} must be in [0, 1), got {v}"))?;
        }
        ensure(t.eps > 0.0, || "train.eps must be > 0".into())?;
        ensure(t.weight_decay >= 0.0 && t.weight_decay.is_finite(), || "train.weight_decay must be >= 0".into())?;
        ensure(t.grad_clip > 0.0, || "train.grad_clip must be > 0".into())?;
        ensure(t.ema_every >= 1, || "train.ema_every must be >= 1".into())?;
        ensure((0.0..1.0).contains(&t.ema_decay), || {
            format!("train.ema_decay must be in [0, 1), got {}", t.ema_decay)
        })?;
        ensure(t.batch_size >= 1, || "train.batch_size must be >= 1".into())?;
        ensure(t.checkpoint_every >= 1, || "train.checkpoint_every must be >= 1".into())?;
        ensure(self.model.denoiser_depth >= 2, || "model.denoiser_depth must be >= 2".into())?;
        ensure(self.model.time_embed_dim >= 2 && self.model.time_embed_dim % 2 == 0, || {
            "model.time_embed_dim must be even".into()
        })?;
        let m = self.content_config().size_multiple().max(1 << self.model.denoiser_depth);
        ensure(self.data.resolution % m == 0 && self.data.resolution >= 11, || {
            format!("data.resolution must be a multiple of {m} and >= 11, got {}", self.data.resolution)
        })?;
        Ok(())
    }

    pub fn content_config(&self) -> UNetConfig {
        UNetConfig {
            in_channels: 3,
            out_channels: 3,
            base_channels: self.model.base_channels,
            depth: self.model.depth,
            agba_stages: if self.model.use_agba {
                self.model.agba_stages.clone()
            } else {
                Vec::new()
            },
            agba_heads: self.model.agba_heads,
            agba_gate_hidden: self.model.agba_gate_hidden,
            time_embed_dim: None,
        }
    }

    pub fn denoiser_config(&self) -> DenoiserConfig {
        DenoiserConfig {
            base_channels: self.model.denoiser_base_channels,
            depth: self.model.denoiser_depth,
            time_embed_dim: self.model.time_embed_dim,
            flags: ConditionFlags {
                priors: self.diffusion.condition_on_priors,
                content: self.diffusion.condition_on_content,
            },
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            lambda1: self.loss.lambda1,
            lambda2: self.loss.lambda2,
        }
    }

    /// Parses TOML (sections or dotted keys) over the desk preset, rejecting keys the schema does not know.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        Self::desk().merge_toml(text)
    }

    /// Applies the keys present in `text` on top of `self`.
    pub fn merge_toml(&self, text: &str) -> Result<Self> {
        let value: toml::Value = toml::from_str(text).map_err(|e| Error::Toml(e.to_string()))?;
        let known = self.flat()?;
        let mut merged = self.to_value()?;
        for (key, v) in flatten(&value) {
            if !known.contains_key(&key) {
                return Err(Error::UnknownKey(key));
            }
            set_path(&mut merged, &key, v)?;
        }
        Self::from_value(merged)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::desk().merge_file(path)
    }

    pub fn merge_file(&self, path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.merge_toml(&text)
    }

    /// Applies `section.key=value` overrides; values are TOML literals, bare words are strings.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let known = self.flat()?;
        let mut v = self.to_value()?;
        for o in overrides {
            let o = o.as_ref();
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| Error::validation(format!("override `{o}` is not key=value")))?;
            let key = key.trim();
            if !known.contains_key(key) {
                return Err(Error::UnknownKey(key.to_string()));
            }
            let raw = raw.trim();
            let parsed = toml::from_str::<toml::Table>(&format!("v = {raw}"))
                .ok()
                .and_then(|mut t| t.remove("v"))
                .unwrap_or_else(|| toml::Value::String(raw.to_string()));
            set_path(&mut v, key, parsed)?;
        }
        Self::from_value(v)
    }

    fn to_value(&self) -> Result<toml::Value> {
        toml::Value::try_from(self).map_err(|e| Error::Toml(e.to_string()))
    }

    fn from_value(v: toml::Value) -> Result<Self> {
        let c: Self = v.try_into().map_err(|e: toml::de::Error| Error::Toml(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    /// Every leaf as `section.key -> TOML literal`, sorted.
    pub fn flat(&self) -> Result<BTreeMap<String, String>> {
        Ok(flatten(&self.to_value()?)
            .into_iter()
            .map(|(k, v)| (k, v.to_string()))
            .collect())
    }

    /// One `section.key = value` line per field.
    pub fn to_flat_toml(&self) -> Result<String> {
        let mut out = String::new();
        for (k, v) in self.flat()? {
            out.push_str(&format!("{k} = {v}\n"));
        }
        Ok(out)
    }

    /// sha256 over the sorted flat key/value list, minus keys that may change on resume.
    pub fn fingerprint(&self) -> Result<String> {
        let mut h = Sha256::new();
        for (k, v) in self.flat()? {
            if UNFINGERPRINTED.contains(&k.as_str()) {
                continue;
            }
            h.update(k.as_bytes());
            h.update(b"=");
            h.update(v.as_bytes());
            h.update(b"\n");
        }
        Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
    }

    /// Fingerprinted keys whose values differ.
    pub fn diff_keys(&self, other: &Self) -> Result<Vec<String>> {
        let (a, b) = (self.flat()?, other.flat()?);
        let keys: BTreeSet<&String> = a.keys().chain(b.keys()).collect();
        Ok(keys
            .into_iter()
            .filter(|k| !UNFINGERPRINTED.contains(&k.as_str()) && a.get(*k) != b.get(*k))
            .map(|k| format!("{k} ({} -> {})", a.get(k).map_or("-", |s| s), b.get(k).map_or("-", |s| s)))
            .collect())
    }
}

fn flatten(v: &toml::Value) -> Vec<(String, toml::Value)> {
    fn go(prefix: &str, v: &toml::Value, out: &mut Vec<(String, toml::Value)>) {
        match v {
            toml::Value::Table(t) => {
                for (k, child) in t {
                    let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                    go(&key, child, out);
                }
            }
            leaf => out.push((prefix.to_string(), leaf.clone())),
        }
    }
    let mut out = Vec::new();
    go("", v, &mut out);
    out
}

fn set_path(root: &mut toml::Value, key: &str, value: toml::Value) -> Result<()> {
    let mut cur = root;
    let parts: Vec<&str> = key.split('.').collect();
    for p in &parts[..parts.len() - 1] {
        cur = cur
            .get_mut(*p)
            .ok_or_else(|| Error::UnknownKey(key.to_string()))?;
    }
    let table = cur
        .as_table_mut()
        .ok_or_else(|| Error::UnknownKey(key.to_string()))?;
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}
