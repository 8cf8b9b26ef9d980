//! Joint training loop: AdamW with decoupled decay, global-norm clipping,
//! periodic EMA, atomic checkpoints and a per-step metrics log.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::{DType, Device, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::data::{augment, batch_indices, PairedSample};
use crate::error::{ensure, Error, Result};
use crate::io::write_atomic;
use crate::model::{Batch, Model};
use crate::nn::{check_same_keys, global_norm, randn, rng_for};

const STREAM_STEP: u64 = 20;
const CHECKPOINT_MAGIC: &[u8; 8] = b"SFCKPT01";
pub const METRICS_HEADER: &str = "step\tL_content\tL_DM\tL_high\tL_cssim\tL_total\twall_ms";

/// One row of the metrics log.
#[derive(Debug, Clone, PartialEq)]
pub struct StepMetrics {
    pub step: u64,
    pub l_content: f64,
    pub l_dm: f64,
    pub l_high: f64,
    pub l_cssim: f64,
    pub l_total: f64,
    pub wall_ms: f64,
}

impl StepMetrics {
    pub fn losses(&self) -> [f64; 5] {
        [self.l_content, self.l_dm, self.l_high, self.l_cssim, self.l_total]
    }

    pub fn to_tsv(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{:.3}",
            self.step, self.l_content, self.l_dm, self.l_high, self.l_cssim, self.l_total, self.wall_ms
        )
    }

    pub fn parse_tsv(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.split('\t').collect();
        ensure(f.len() == 7, || format!("metrics line has {} fields: `{line}`", f.len()))?;
        let num = |s: &str| -> Result<f64> {
            s.parse::<f64>()
                .map_err(|_| Error::validation(format!("bad number `{s}` in metrics line")))
        };
        Ok(Self {
            step: f[0]
                .parse()
                .map_err(|_| Error::validation(format!("bad step `{}`", f[0])))?,
            l_content: num(f[1])?,
            l_dm: num(f[2])?,
            l_high: num(f[3])?,
            l_cssim: num(f[4])?,
            l_total: num(f[5])?,
            wall_ms: num(f[6])?,
        })
    }
}

/// Reads a metrics log (header plus rows).
pub fn read_metrics(path: &Path) -> Result<Vec<StepMetrics>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .skip(1)
        .filter(|l| !l.is_empty())
        .map(StepMetrics::parse_tsv)
        .collect()
}

/// Everything needed to continue a run bit-for-bit.
#[derive(Debug)]
pub struct TrainState {
    pub step: u64,
    pub model: Model,
    pub ema: BTreeMap<String, Tensor>,
    pub ema_updates: u64,
    pub adam_m: BTreeMap<String, Tensor>,
    pub adam_v: BTreeMap<String, Tensor>,
}

impl TrainState {
    pub fn new(config: &Config, dtype: DType) -> Result<Self> {
        let model = Model::new(config, dtype)?;
        let params = model.store().snapshot()?;
        let zeros = |m: &BTreeMap<String, Tensor>| -> Result<BTreeMap<String, Tensor>> {
            m.iter().map(|(k, v)| Ok((k.clone(), v.zeros_like()?))).collect()
        };
        Ok(Self {
            step: 0,
            adam_m: zeros(&params)?,
            adam_v: zeros(&params)?,
            ema: params,
            ema_updates: 0,
            model,
        })
    }

    pub fn config(&self) -> &Config {
        &self.model.config
    }

    /// Live parameters.
    pub fn params(&self) -> Result<BTreeMap<String, Tensor>> {
        self.model.store().snapshot()
    }

    /// `ema <- decay * ema + (1 - decay) * params`; the first call copies.
    pub fn ema_update(&mut self) -> Result<()> {
        let params = self.params()?;
        check_same_keys(params.keys(), self.ema.keys())?;
        let d = self.config().train.ema_decay;
        if self.ema_updates == 0 {
            self.ema = params;
        } else {
            for (k, p) in params {
                let e = &self.ema[&k];
                let next = ((e * d)? + (p * (1.0 - d))?)?.detach();
                self.ema.insert(k, next);
            }
        }
        self.ema_updates += 1;
        Ok(())
    }

    /// Builds batch `step` (0-based) from `data` with its augmentation draws.
    pub fn make_batch(&self, data: &[PairedSample], step: u64) -> Result<Batch> {
        ensure(!data.is_empty(), || "training set is empty".into())?;
        let cfg = self.config();
        let idx = batch_indices(data.len(), cfg.train.batch_size, cfg.train.seed, step);
        let mut rng = rng_for(cfg.train.seed, STREAM_STEP, step);
        let mut samples = Vec::with_capacity(idx.len());
        for i in idx {
            let s = &data[i];
            samples.push(if cfg.train.augment { augment(s, &mut rng)? } else { s.clone() });
        }
        let refs: Vec<(&crate::ImageTensor, &crate::ImageTensor, &str)> = samples
            .iter()
            .map(|s| (&s.shadow, &s.shadow_free, s.id.as_str()))
            .collect();
        Batch::from_pairs(&refs, cfg, self.model.dtype())
    }

    /// Timesteps and noise for batch `step`, drawn after the augmentation stream.
    pub fn draw_noise(&self, batch: &Batch, step: u64) -> Result<(Vec<usize>, Tensor)> {
        let cfg = self.config();
        let mut rng = rng_for(cfg.train.seed, STREAM_STEP + 1, step);
        let t: Vec<usize> = (0..batch.len())
            .map(|_| rng.random_range(1..=cfg.diffusion.steps))
            .collect();
        let eps = randn(batch.gt.dims(), self.model.dtype(), &Device::Cpu, &mut rng)?;
        Ok((t, eps))
    }

    /// One optimizer step on `batch`; EMA runs when the new step count hits the cadence.
    pub fn train_step_on(&mut self, batch: &Batch, t: &[usize], eps: &Tensor) -> Result<StepMetrics> {
        let start = Instant::now();
        let losses = self.model.losses(batch, t, eps).map_err(|e| match e {
            Error::TrainingFault { part, detail } => Error::TrainingFault {
                part,
                detail: format!("{detail} at step {} (samples {:?})", self.step + 1, batch.ids),
            },
            other => other,
        })?;
        let vals = losses.values()?;
        let grads = losses.total.backward()?;
        self.apply_adamw(&grads)?;
        self.step += 1;
        if self.step % self.config().train.ema_every == 0 {
            self.ema_update()?;
        }
        Ok(StepMetrics {
            step: self.step,
            l_content: vals[0],
            l_dm: vals[1],
            l_high: vals[2],
            l_cssim: vals[3],
            l_total: vals[4],
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        })
    }

    pub fn train_step(&mut self, data: &[PairedSample]) -> Result<StepMetrics> {
        let batch = self.make_batch(data, self.step)?;
        let (t, eps) = self.draw_noise(&batch, self.step)?;
        self.train_step_on(&batch, &t, &eps)
    }

    fn apply_adamw(&mut self, grads: &candle_core::backprop::GradStore) -> Result<()> {
        let tc = self.config().train.clone();
        let vars = self.model.store().vars().clone();
        let mut gs: BTreeMap<String, Tensor> = BTreeMap::new();
        for (k, v) in &vars {
            let g = match grads.get(v.as_tensor()) {
                Some(g) => g.clone(),
                None => v.as_tensor().zeros_like()?,
            };
            gs.insert(k.clone(), g);
        }
        let norm = global_norm(gs.values())?;
        if !norm.is_finite() {
            return Err(Error::TrainingFault {
                part: "gradients".into(),
                detail: format!("global norm {norm} at step {}", self.step + 1),
            });
        }
        let clip = if norm > tc.grad_clip { tc.grad_clip / norm } else { 1.0 };
        let n = (self.step + 1) as i32;
        let bc1 = 1.0 - tc.beta1.powi(n);
        let bc2 = 1.0 - tc.beta2.powi(n);
        for (k, var) in &vars {
            let g = if clip < 1.0 { (&gs[k] * clip)? } else { gs[k].clone() };
            let g = g.detach();
            let m = ((&self.adam_m[k] * tc.beta1)? + (&g * (1.0 - tc.beta1))?)?.detach();
            let v = ((&self.adam_v[k] * tc.beta2)? + (g.sqr()? * (1.0 - tc.beta2))?)?.detach();
            let denom = (v.affine(1.0 / bc2, 0.0)?.sqrt()? + tc.eps)?;
            let update = (m.affine(tc.lr / bc1, 0.0)? / denom)?;
            let decayed = (var.as_tensor() * (1.0 - tc.lr * tc.weight_decay))?;
            var.set(&(decayed - update)?.detach())?;
            self.adam_m.insert(k.clone(), m);
            self.adam_v.insert(k.clone(), v);
        }
        Ok(())
    }

    /// Model holding the EMA weights, for inference.
    pub fn ema_model(&self) -> Result<Model> {
        let m = Model::new(self.config(), self.model.dtype())?;
        m.store().assign(&self.ema)?;
        Ok(m)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        Ok(Checkpoint {
            step: self.step,
            ema_updates: self.ema_updates,
            config: self.config().clone(),
            fingerprint: self.config().fingerprint()?,
            dtype: self.model.dtype(),
            params: self.params()?,
            ema: self.ema.clone(),
            adam_m: self.adam_m.clone(),
            adam_v: self.adam_v.clone(),
        })
    }

    /// Restores a checkpoint under `config`; refuses if fingerprinted keys differ.
    pub fn from_checkpoint(ck: &Checkpoint, config: &Config) -> Result<Self> {
        let diff = ck.config.diff_keys(config)?;
        if !diff.is_empty() || ck.fingerprint != config.fingerprint()? {
            return Err(Error::FingerprintMismatch(diff));
        }
        let mut st = Self::new(config, ck.dtype)?;
        st.model.store().assign(&ck.params)?;
        for (name, group) in [("ema", &ck.ema), ("adam_m", &ck.adam_m), ("adam_v", &ck.adam_v)] {
            check_same_keys(ck.params.keys(), group.keys())
                .map_err(|e| Error::validation(format!("checkpoint group {name}: {e}")))?;
        }
        st.step = ck.step;
        st.ema_updates = ck.ema_updates;
        st.ema = ck.ema.clone();
        st.adam_m = ck.adam_m.clone();
        st.adam_v = ck.adam_v.clone();
        Ok(st)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    group: String,
    name: String,
    shape: Vec<usize>,
    offset: u64,
    len: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    step: u64,
    ema_updates: u64,
    fingerprint: String,
    /// Generators are counter-based, so the seed and the step fully determine them.
    rng: RngState,
    dtype: String,
    config: Config,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub step: u64,
}

/// Parameters, EMA weights, optimizer moments and the config they belong to.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub step: u64,
    pub ema_updates: u64,
    pub config: Config,
    pub fingerprint: String,
    pub dtype: DType,
    pub params: BTreeMap<String, Tensor>,
    pub ema: BTreeMap<String, Tensor>,
    pub adam_m: BTreeMap<String, Tensor>,
    pub adam_v: BTreeMap<String, Tensor>,
}

fn dtype_name(d: DType) -> Result<&'static str> {
    match d {
        DType::F32 => Ok("f32"),
        DType::F64 => Ok("f64"),
        other => Err(Error::validation(format!("unsupported checkpoint dtype {other:?}"))),
    }
}

impl Checkpoint {
    pub fn rng_state(&self) -> RngState {
        RngState {
            seed: self.config.train.seed,
            step: self.step,
        }
    }

    /// Magic, little-endian header length, JSON header, then raw little-endian tensor data.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let dname = dtype_name(self.dtype)?;
        let mut blob: Vec<u8> = Vec::new();
        let mut entries = Vec::new();
        for (group, map) in [("params", &self.params), ("ema", &self.ema), ("adam_m", &self.adam_m), ("adam_v", &self.adam_v)] {
            for (name, t) in map {
                let offset = blob.len() as u64;
                let flat = t.flatten_all()?;
                match self.dtype {
                    DType::F32 => {
                        for v in flat.to_dtype(DType::F32)?.to_vec1::<f32>()? {
                            blob.extend_from_slice(&v.to_le_bytes());
                        }
                    }
                    _ => {
                        for v in flat.to_dtype(DType::F64)?.to_vec1::<f64>()? {
                            blob.extend_from_slice(&v.to_le_bytes());
                        }
                    }
                }
                entries.push(TensorEntry {
                    group: group.into(),
                    name: name.clone(),
                    shape: t.dims().to_vec(),
                    offset,
                    len: blob.len() as u64 - offset,
                });
            }
        }
        let header = Header {
            step: self.step,
            ema_updates: self.ema_updates,
            fingerprint: self.fingerprint.clone(),
            rng: self.rng_state(),
            dtype: dname.into(),
            config: self.config.clone(),
            tensors: entries,
        };
        let hjson = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(16 + hjson.len() + blob.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(hjson.len() as u64).to_le_bytes());
        out.extend_from_slice(&hjson);
        out.extend_from_slice(&blob);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        ensure(bytes.len() >= 16 && &bytes[..8] == CHECKPOINT_MAGIC, || "not a checkpoint file".into())?;
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        ensure(bytes.len() >= 16 + hlen, || "truncated checkpoint header".into())?;
        let header: Header = serde_json::from_slice(&bytes[16..16 + hlen])?;
        let blob = &bytes[16 + hlen..];
        let dtype = match header.dtype.as_str() {
            "f32" => DType::F32,
            "f64" => DType::F64,
            other => return Err(Error::validation(format!("unknown checkpoint dtype `{other}`"))),
        };
        let width = if dtype == DType::F32 { 4 } else { 8 };
        let mut groups: BTreeMap<String, BTreeMap<String, Tensor>> = BTreeMap::new();
        for e in &header.tensors {
            let (a, b) = (e.offset as usize, (e.offset + e.len) as usize);
            let n: usize = e.shape.iter().product();
            ensure(b <= blob.len() && b - a == n * width, || format!("corrupt tensor `{}`", e.name))?;
            let raw = &blob[a..b];
            let t = if dtype == DType::F32 {
                let v: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
                Tensor::from_vec(v, e.shape.as_slice(), &Device::Cpu)?
            } else {
                let v: Vec<f64> = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
                Tensor::from_vec(v, e.shape.as_slice(), &Device::Cpu)?
            };
            groups.entry(e.group.clone()).or_default().insert(e.name.clone(), t);
        }
        let mut take = |g: &str| groups.remove(g).unwrap_or_default();
        let ck = Self {
            step: header.step,
            ema_updates: header.ema_updates,
            fingerprint: header.fingerprint,
            dtype,
            params: take("params"),
            ema: take("ema"),
            adam_m: take("adam_m"),
            adam_v: take("adam_v"),
            config: header.config,
        };
        check_same_keys(ck.params.keys(), ck.ema.keys())?;
        ensure(ck.fingerprint == ck.config.fingerprint()?, || {
            "checkpoint fingerprint does not match its stored config".into()
        })?;
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

pub fn checkpoint_name(step: u64) -> String {
    format!("step_{step:06}.ckpt")
}

/// Where a run writes and what it resumes from.
#[derive(Debug, Clone)]
pub struct RunOptions {
    pub checkpoint_dir: PathBuf,
    pub metrics_path: PathBuf,
    pub resume: Option<PathBuf>,
    /// Stop after this many steps even if `max_steps` is larger (simulated interruption).
    pub stop_at: Option<u64>,
    pub dtype: DType,
}

#[derive(Debug)]
pub struct RunOutcome {
    pub state: TrainState,
    /// Metrics of the steps executed by this call.
    pub metrics: Vec<StepMetrics>,
    pub last_checkpoint: PathBuf,
}

/// Keeps only rows with `step <= upto`, so a resumed run appends after its checkpoint.
fn truncate_metrics(path: &Path, upto: u64) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let rows: Vec<StepMetrics> = read_metrics(path)?.into_iter().filter(|m| m.step <= upto).collect();
    let mut text = format!("{METRICS_HEADER}\n");
    for r in rows {
        text.push_str(&r.to_tsv());
        text.push('\n');
    }
    write_atomic(path, text.as_bytes())
}

/// Trains until `train.max_steps` (or `stop_at`), checkpointing every
/// `train.checkpoint_every` steps and at the end.
pub fn run_training(config: &Config, data: &[PairedSample], opts: &RunOptions) -> Result<RunOutcome> {
    config.validate()?;
    let res = config.data.resolution;
    for s in data {
        ensure(s.shadow.shape() == (3, res, res), || {
            format!("sample `{}` is {:?}, expected 3x{res}x{res}", s.id, s.shadow.shape())
        })?;
    }
    let mut state = match &opts.resume {
        Some(p) => TrainState::from_checkpoint(&Checkpoint::load(p)?, config)?,
        None => TrainState::new(config, opts.dtype)?,
    };
    fs::create_dir_all(&opts.checkpoint_dir).map_err(|e| Error::io(&opts.checkpoint_dir, e))?;
    if opts.resume.is_some() {
        truncate_metrics(&opts.metrics_path, state.step)?;
    } else {
        write_atomic(&opts.metrics_path, format!("{METRICS_HEADER}\n").as_bytes())?;
    }
    let mut log = fs::OpenOptions::new()
        .append(true)
        .create(true)
        .open(&opts.metrics_path)
        .map_err(|e| Error::io(&opts.metrics_path, e))?;
    let end = opts.stop_at.map_or(config.train.max_steps, |s| s.min(config.train.max_steps));
    let mut metrics = Vec::new();
    let mut last = opts.checkpoint_dir.join(checkpoint_name(state.step));
    while state.step < end {
        let m = state.train_step(data)?;
        writeln!(log, "{}", m.to_tsv()).map_err(|e| Error::io(&opts.metrics_path, e))?;
        metrics.push(m);
        if state.step % config.train.checkpoint_every == 0 || state.step == end {
            last = opts.checkpoint_dir.join(checkpoint_name(state.step));
            state.to_checkpoint()?.save(&last)?;
        }
    }
    if !last.exists() {
        state.to_checkpoint()?.save(&last)?;
    }
    Ok(RunOutcome {
        state,
        metrics,
        last_checkpoint: last,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic_sample;

    fn cfg(extra: &[&str]) -> Config {
        let mut o = vec!["data.resolution=16", "model.depth=2", "model.denoiser_depth=2", "model.agba_stages=[0,1]", "train.batch_size=2"];
        o.extend_from_slice(extra);
        Config::tiny().with_overrides(&o).unwrap()
    }

    fn data(n: u64) -> Vec<PairedSample> {
        (0..n).map(|i| synthetic_sample(3, i, 16, &format!("s{i}")).unwrap().0).collect()
    }

    fn set_first_param(st: &TrainState, v: f64) {
        let (_, var) = st.model.store().vars().iter().next().unwrap();
        var.set(&var.as_tensor().ones_like().unwrap().affine(v, 0.0).unwrap()).unwrap();
    }

    fn first_ema(st: &TrainState) -> Vec<f64> {
        st.ema.values().next().unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap()
    }

    #[test]
    fn ema_hand_arithmetic() {
        let mut st = TrainState::new(&cfg(&["train.ema_decay=0.9"]), DType::F64).unwrap();
        set_first_param(&st, 1.0);
        st.ema_update().unwrap();
        set_first_param(&st, 2.0);
        st.ema_update().unwrap();
        assert!(first_ema(&st).iter().all(|v| (*v - 1.1).abs() < 1e-15));
    }

    #[test]
    fn ema_fixed_point_and_zero_decay() {
        let mut st = TrainState::new(&cfg(&["train.ema_decay=0.7"]), DType::F64).unwrap();
        set_first_param(&st, 0.25);
        for _ in 0..5 {
            st.ema_update().unwrap();
        }
        assert!(first_ema(&st).iter().all(|v| *v == 0.25));
        let mut z = TrainState::new(&cfg(&["train.ema_decay=0"]), DType::F64).unwrap();
        set_first_param(&z, 1.0);
        z.ema_update().unwrap();
        set_first_param(&z, 3.0);
        z.ema_update().unwrap();
        assert!(first_ema(&z).iter().all(|v| *v == 3.0));
    }

    #[test]
    fn ema_key_mismatch_rejected() {
        let mut st = TrainState::new(&cfg(&[]), DType::F64).unwrap();
        st.ema.pop_first();
        assert!(st.ema_update().is_err());
    }

    #[test]
    fn ema_count_matches_cadence() {
        let d = data(4);
        for (steps, every) in [(5u64, 2u64), (6, 2), (3, 5), (4, 1)] {
            let mut st = TrainState::new(&cfg(&[&format!("train.ema_every={every}")]), DType::F32).unwrap();
            for _ in 0..steps {
                st.train_step(&d).unwrap();
            }
            assert_eq!(st.ema_updates, steps / every, "steps {steps} every {every}");
        }
    }

    #[test]
    fn null_update_keeps_parameters() {
        let d = data(3);
        let mut st = TrainState::new(&cfg(&["train.lr=0", "train.weight_decay=0"]), DType::F32).unwrap();
        let before = st.params().unwrap();
        st.train_step(&d).unwrap();
        for (k, v) in st.params().unwrap() {
            assert_eq!(v.flatten_all().unwrap().to_vec1::<f32>().unwrap(), before[&k].flatten_all().unwrap().to_vec1::<f32>().unwrap(), "{k}");
        }
    }

    #[test]
    fn checkpoint_round_trip_is_byte_identical() {
        let d = data(3);
        let mut st = TrainState::new(&cfg(&[]), DType::F32).unwrap();
        st.train_step(&d).unwrap();
        let bytes = st.to_checkpoint().unwrap().to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert_eq!(back.rng_state(), RngState { seed: 0, step: 1 });
        assert!(Checkpoint::from_bytes(&bytes[..20]).is_err());
        assert!(Checkpoint::from_bytes(b"nonsense-file-bytes").is_err());
    }

    #[test]
    fn fingerprint_mismatch_lists_keys() {
        let st = TrainState::new(&cfg(&[]), DType::F32).unwrap();
        let ck = st.to_checkpoint().unwrap();
        match TrainState::from_checkpoint(&ck, &cfg(&["train.lr=0.5"])) {
            Err(Error::FingerprintMismatch(keys)) => {
                assert_eq!(keys.len(), 1);
                assert!(keys[0].starts_with("train.lr"));
            }
            other => panic!("{other:?}"),
        }
        assert!(TrainState::from_checkpoint(&ck, &cfg(&["train.max_steps=7"])).is_ok());
    }

    #[test]
    fn metrics_line_round_trip() {
        let m = StepMetrics {
            step: 3,
            l_content: 0.1 + 0.2,
            l_dm: 1e-9,
            l_high: 0.0,
            l_cssim: 0.75,
            l_total: 1.5,
            wall_ms: 12.5,
        };
        let back = StepMetrics::parse_tsv(&m.to_tsv()).unwrap();
        assert_eq!(back.losses(), m.losses());
        assert_eq!(METRICS_HEADER.split('\t').count(), 7);
    }
}
