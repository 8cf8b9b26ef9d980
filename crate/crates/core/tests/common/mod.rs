//! Oracles and checks shared by the integration tests and the acceptance runner.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use shadowfree::agba::{AgbaBlock, AgbaConfig, GateMode};
use shadowfree::config::Config;
use shadowfree::data::{synthetic_sample, PairedSample};
use shadowfree::diffusion::{make_schedule, q_sample, sample_residual, ConditionBundle, ScheduleKind, X0Predictor};
use shadowfree::losses::{loss_cssim, loss_dm, loss_high, SsimParams, CSSIM_STABILIZER};
use shadowfree::nn::{randn, scalar_f64, to_f64_vec, Builder, ParamStore};
use shadowfree::priors::{compute_contrast_heatmap, compute_highfreq_map, HighPassKind};
use shadowfree::trainer::{read_metrics, run_training, RunOptions, StepMetrics, TrainState};
use shadowfree::ImageTensor;

/// `Ok(detail)` when the check holds, `Err(detail)` otherwise.
pub type Check = Result<String, String>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_image(r: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> ImageTensor {
    let data = (0..c * h * w).map(|_| r.random_range(0.0f32..1.0)).collect();
    ImageTensor::new(c, h, w, data).unwrap()
}

fn dev() -> Device {
    Device::Cpu
}

fn tensor(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    randn(shape, DType::F64, &dev(), r).unwrap()
}

fn uniform(r: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| r.random_range(lo..hi)).collect();
    Tensor::from_vec(v, shape, &dev()).unwrap()
}

fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    to_f64_vec(a)
        .unwrap()
        .iter()
        .zip(to_f64_vec(b).unwrap())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

// ---------------------------------------------------------------- priors

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    loop {
        if i < 0 {
            i = -i;
        } else if i >= n {
            i = 2 * (n - 1) - i;
        } else {
            return i as usize;
        }
    }
}

fn luma_at(img: &ImageTensor, y: usize, x: usize) -> f64 {
    if img.channels() == 1 {
        img.get(0, y, x) as f64
    } else {
        0.299 * img.get(0, y, x) as f64 + 0.587 * img.get(1, y, x) as f64 + 0.114 * img.get(2, y, x) as f64
    }
}

pub fn heatmap_oracle(img: &ImageTensor, gamma: f64) -> Vec<f64> {
    let (_, h, w) = img.shape();
    let mut lum = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            lum.push(luma_at(img, y, x));
        }
    }
    let mu = lum.iter().sum::<f64>() / lum.len() as f64;
    let s: Vec<f64> = lum.iter().map(|l| mu + gamma * (l - mu)).collect();
    let lo = s.iter().cloned().fold(f64::MAX, f64::min);
    let hi = s.iter().cloned().fold(f64::MIN, f64::max);
    s.iter().map(|v| if hi > lo { (v - lo) / (hi - lo) } else { 0.0 }).collect()
}

pub fn highpass_taps(kind: HighPassKind) -> Vec<Vec<f64>> {
    match kind {
        HighPassKind::Laplacian => vec![vec![0.0, -1.0, 0.0], vec![-1.0, 4.0, -1.0], vec![0.0, -1.0, 0.0]],
        HighPassKind::GaussianResidual => {
            let g: Vec<f64> = (-3i32..=3).map(|d| (-(d * d) as f64 / 2.0).exp()).collect();
            let s: f64 = g.iter().sum();
            let mut k = vec![vec![0.0; 7]; 7];
            for y in 0..7 {
                for x in 0..7 {
                    k[y][x] = -(g[y] / s) * (g[x] / s);
                }
            }
            k[3][3] += 1.0;
            k
        }
    }
}

pub fn highfreq_oracle(img: &ImageTensor, kind: HighPassKind) -> Vec<f64> {
    let k = highpass_taps(kind);
    let r = (k.len() / 2) as isize;
    let (c, h, w) = img.shape();
    let mut out = Vec::with_capacity(c * h * w);
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (dy, row) in k.iter().enumerate() {
                    for (dx, t) in row.iter().enumerate() {
                        let sy = reflect(y as isize + dy as isize - r, h);
                        let sx = reflect(x as isize + dx as isize - r, w);
                        acc += t * img.get(ch, sy, sx) as f64;
                    }
                }
                out.push(acc);
            }
        }
    }
    out
}

/// Priors against the loop oracles on `n` random images (sizes 8..=40, 1 or 3 channels).
pub fn check_prior_oracles(n: usize, tol: f64) -> Check {
    let mut r = rng(2024);
    let mut worst = (0.0f64, 0.0f64);
    for i in 0..n {
        let c = if i % 5 == 0 { 1 } else { 3 };
        let (h, w) = (r.random_range(8..=40), r.random_range(8..=40));
        let img = random_image(&mut r, c, h, w);
        let gamma = r.random_range(0.25..4.0);
        let got = compute_contrast_heatmap(&img, gamma).map_err(|e| e.to_string())?;
        for (a, b) in got.map.data().iter().zip(heatmap_oracle(&img, gamma)) {
            worst.0 = worst.0.max((*a as f64 - b).abs());
        }
        for kind in [HighPassKind::Laplacian, HighPassKind::GaussianResidual] {
            let got = compute_highfreq_map(&img, kind).map_err(|e| e.to_string())?;
            for (a, b) in got.map.data().iter().zip(highfreq_oracle(&img, kind)) {
                worst.1 = worst.1.max((*a as f64 - b).abs());
            }
        }
    }
    let detail = format!("{n} images, max |err| contrast {:.2e}, high-freq {:.2e}", worst.0, worst.1);
    if worst.0 <= tol && worst.1 <= tol {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---------------------------------------------------------------- AGBA

pub fn agba_config() -> AgbaConfig {
    AgbaConfig {
        feature_channels: 4,
        image_prior_channels: 3,
        prior_channels: 5,
        embed_dim: 8,
        num_heads: 2,
        gate_hidden: 6,
    }
}

pub fn agba_block(seed: u64) -> (ParamStore, AgbaBlock) {
    let mut store = ParamStore::new(DType::F64, dev());
    let mut r = rng(seed);
    let blk = AgbaBlock::new(&mut Builder::new(&mut store, &mut r).push("agba"), agba_config(), 0).unwrap();
    (store, blk)
}

/// Gate endpoints, softmax normalisation and convex containment of `K̄`, `V̄`.
pub fn check_agba_algebra(instances: u64) -> Check {
    let mut endpoint = 0.0f64;
    let mut rows = 0.0f64;
    let mut outside = 0.0f64;
    for i in 0..instances {
        let (_, blk) = agba_block(100 + i);
        let mut r = rng(5000 + i);
        let (b, h, w) = (r.random_range(1..=2), r.random_range(2..=6), r.random_range(2..=6));
        let z = tensor(&mut r, &[b, 4, h, w]);
        let c = uniform(&mut r, &[b, 1, h, w], 0.0, 1.0);
        let c2 = uniform(&mut r, &[b, 1, h, w], 0.0, 1.0);
        let cp = tensor(&mut r, &[b, 3, h, w]);
        let cp2 = tensor(&mut r, &[b, 3, h, w]);
        let run = |c: &Tensor, cp: &Tensor, m: GateMode| blk.forward_traced(&z, c, cp, m).unwrap();
        endpoint = endpoint.max(max_abs_diff(
            &run(&c, &cp, GateMode::Fixed(1.0)).output,
            &run(&c, &cp2, GateMode::Fixed(1.0)).output,
        ));
        endpoint = endpoint.max(max_abs_diff(
            &run(&c, &cp, GateMode::Fixed(0.0)).output,
            &run(&c2, &cp, GateMode::Fixed(0.0)).output,
        ));
        let tr = run(&c, &cp, GateMode::Learned);
        let sums = to_f64_vec(&tr.attention.sum(2).unwrap()).unwrap();
        rows = rows.max(sums.iter().map(|s| (s - 1.0).abs()).fold(0.0, f64::max));
        let [k, kh, v, vh] = blk.branch_projections(&tr.tau_c, &tr.tau_c_prime).unwrap();
        for (bar, x, y) in [(&tr.k_bar, &k, &kh), (&tr.v_bar, &v, &vh)] {
            let (bar, x, y) = (to_f64_vec(bar).unwrap(), to_f64_vec(x).unwrap(), to_f64_vec(y).unwrap());
            for ((m, a), b) in bar.iter().zip(&x).zip(&y) {
                let (lo, hi) = (a.min(*b), a.max(*b));
                outside = outside.max(lo - m).max(m - hi);
            }
        }
    }
    let detail = format!(
        "{instances} instances: endpoint drift {endpoint:.2e}, |row sum - 1| {rows:.2e}, interval excess {outside:.2e}"
    );
    if endpoint <= 1e-6 && rows <= 1e-5 && outside <= 1e-12 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---------------------------------------------------------------- gradients

/// Largest relative error between backprop and central differences over every
/// element of `vars`. Relative error is `|a - n| / max(|a|, |n|, floor)`.
pub fn grad_check(vars: &[(String, Var)], f: &dyn Fn() -> Tensor, eps: f64, floor: f64) -> (f64, String) {
    let grads = f().backward().unwrap();
    let mut worst = (0.0f64, String::new());
    for (name, var) in vars {
        let analytic = match grads.get(var.as_tensor()) {
            Some(g) => to_f64_vec(g).unwrap(),
            None => vec![0.0; var.as_tensor().elem_count()],
        };
        let base = var.as_tensor().copy().unwrap().detach();
        let shape = base.dims().to_vec();
        let vals = to_f64_vec(&base).unwrap();
        for i in 0..vals.len() {
            let eval_at = |delta: f64| {
                let mut v = vals.clone();
                v[i] += delta;
                var.set(&Tensor::from_vec(v, shape.as_slice(), &dev()).unwrap()).unwrap();
                scalar_f64(&f()).unwrap()
            };
            let numeric = (eval_at(eps) - eval_at(-eps)) / (2.0 * eps);
            let a = analytic[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            if rel > worst.0 {
                worst = (rel, format!("{name}[{i}] analytic {a:.6e} numeric {numeric:.6e}"));
            }
        }
        var.set(&base).unwrap();
    }
    worst
}

fn var(r: &mut ChaCha8Rng, name: &str, shape: &[usize], lo: f64, hi: f64) -> (String, Var) {
    (name.to_string(), Var::from_tensor(&uniform(r, shape, lo, hi)).unwrap())
}

pub const GRAD_EPS: f64 = 1e-4;
/// Below this magnitude gradients are compared absolutely.
pub const GRAD_FLOOR: f64 = 1e-6;

pub fn grad_agba(side: usize) -> (f64, String) {
    let (store, blk) = agba_block(7);
    let mut r = rng(8);
    let z = var(&mut r, "z", &[1, 4, side, side], -1.0, 1.0);
    let c = var(&mut r, "c", &[1, 1, side, side], 0.0, 1.0);
    let cp = var(&mut r, "c_prime", &[1, 3, side, side], -1.0, 1.0);
    let weights = uniform(&mut r, &[1, 4, side, side], -1.0, 1.0);
    let mut vars = vec![z.clone(), c.clone(), cp.clone()];
    vars.extend(store.vars().iter().map(|(k, v)| (k.clone(), v.clone())));
    let f = || {
        blk.forward(z.1.as_tensor(), c.1.as_tensor(), cp.1.as_tensor())
            .unwrap()
            .mul(&weights)
            .unwrap()
            .sum_all()
            .unwrap()
    };
    grad_check(&vars, &f, GRAD_EPS, GRAD_FLOOR)
}

pub fn grad_loss_dm(side: usize) -> (f64, String) {
    let mut r = rng(9);
    let a = var(&mut r, "x0", &[2, 3, side, side], -1.0, 1.0);
    let b = var(&mut r, "x_pred", &[2, 3, side, side], -1.0, 1.0);
    let f = || loss_dm(a.1.as_tensor(), b.1.as_tensor()).unwrap();
    grad_check(&[a.clone(), b.clone()], &f, GRAD_EPS, GRAD_FLOOR)
}

pub fn grad_loss_high(side: usize) -> (f64, String) {
    let mut r = rng(10);
    let a = var(&mut r, "x0", &[2, 3, side, side], -1.0, 1.0);
    let b = var(&mut r, "x_pred", &[2, 3, side, side], -1.0, 1.0);
    let mut worst = (0.0, String::new());
    for kind in [HighPassKind::Laplacian, HighPassKind::GaussianResidual] {
        let f = || loss_high(a.1.as_tensor(), b.1.as_tensor(), kind).unwrap();
        let w = grad_check(&[a.clone(), b.clone()], &f, GRAD_EPS, GRAD_FLOOR);
        if w.0 >= worst.0 {
            worst = (w.0, format!("{kind:?}: {}", w.1));
        }
    }
    worst
}

pub fn grad_loss_cssim(side: usize) -> (f64, String) {
    let mut r = rng(11);
    let gt = uniform(&mut r, &[2, 3, side, side], 0.0, 1.0);
    let shadow = uniform(&mut r, &[2, 3, side, side], 0.0, 0.6);
    let x_pred = var(&mut r, "x_pred", &[2, 3, side, side], -0.5, 0.5);
    let c = var(&mut r, "contrast", &[2, 1, side, side], 0.0, 1.0);
    let p = SsimParams::default();
    let f = || loss_cssim(&gt, x_pred.1.as_tensor(), &shadow, c.1.as_tensor(), &p).unwrap();
    grad_check(&[x_pred.clone(), c.clone()], &f, GRAD_EPS, GRAD_FLOOR)
}

// ---------------------------------------------------------------- diffusion

/// Per-channel mean and variance of `q_sample` over `draws` noise samples
/// against the closed form, in units of the standard error.
pub fn check_q_sample_stats(draws: usize, steps: usize) -> Check {
    let sched = make_schedule(steps, ScheduleKind::Linear).unwrap();
    let x0v = [-0.7f64, 0.1, 0.9];
    let x0 = Tensor::from_vec(x0v.repeat(draws), (draws, 3, 1, 1), &dev()).unwrap();
    let mut worst = 0.0f64;
    for (k, t) in [1, steps / 2, steps].into_iter().enumerate() {
        let eps = randn(&[draws, 3, 1, 1], DType::F64, &dev(), &mut rng(77 + k as u64)).unwrap();
        let xt = to_f64_vec(&q_sample(&x0, &vec![t; draws], &eps, &sched).unwrap()).unwrap();
        let ab = sched.alpha_bar_at(t);
        let n = draws as f64;
        for ch in 0..3 {
            let s: Vec<f64> = xt.iter().skip(ch).step_by(3).copied().collect();
            let mean = s.iter().sum::<f64>() / n;
            let var = s.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
            let se_mean = ((1.0 - ab) / n).sqrt();
            let se_var = (1.0 - ab) * (2.0 / (n - 1.0)).sqrt();
            worst = worst
                .max((mean - ab.sqrt() * x0v[ch]).abs() / se_mean)
                .max((var - (1.0 - ab)).abs() / se_var);
        }
    }
    let detail = format!("{draws} draws, T={steps}, t in {{1, T/2, T}}: worst deviation {worst:.2} SE");
    if worst <= 3.0 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

struct Oracle(Tensor);

impl X0Predictor for Oracle {
    fn predict_x0(&self, _: &Tensor, _: &[usize], _: &ConditionBundle) -> shadowfree::Result<Tensor> {
        Ok(self.0.clone())
    }
}

/// Reverse chains driven by the true `x0` for every `T` in `2..=max_t`.
pub fn check_oracle_chain(max_t: usize, side: usize) -> Check {
    let mut worst = 0.0f64;
    for t in 2..=max_t {
        let sched = make_schedule(t, ScheduleKind::Linear).unwrap();
        let mut r = rng(300 + t as u64);
        let x0 = uniform(&mut r, &[1, 3, side, side], -1.0, 1.0);
        let img = uniform(&mut r, &[1, 3, side, side], 0.0, 1.0);
        let cond = ConditionBundle::new(
            img.clone(),
            uniform(&mut r, &[1, 1, side, side], 0.0, 1.0),
            tensor(&mut r, &[1, 3, side, side]),
            &img,
        )
        .unwrap();
        let out = sample_residual(&Oracle(x0.clone()), &cond, &sched, &mut r, t).unwrap();
        worst = worst.max(max_abs_diff(&out, &x0));
    }
    let detail = format!("T in 2..={max_t}, {side}x{side}: max |x0_hat - x0| {worst:.2e}");
    if worst < 1e-5 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---------------------------------------------------------------- losses

pub fn check_loss_fixed_points() -> Check {
    let mut r = rng(12);
    let p = SsimParams::default();
    let shadow_img = random_image(&mut r, 3, 32, 32);
    let gt_img = random_image(&mut r, 3, 32, 32);
    let shadow = shadow_img.to_tensor(DType::F64, &dev()).unwrap();
    let gt = gt_img.to_tensor(DType::F64, &dev()).unwrap();
    let x0 = (&gt - &shadow).unwrap();
    let c = compute_contrast_heatmap(&shadow_img, 2.0)
        .unwrap()
        .map
        .to_tensor(DType::F64, &dev())
        .unwrap();
    let dm = scalar_f64(&loss_dm(&x0, &x0).unwrap()).unwrap();
    let mut high = 0.0f64;
    for kind in [HighPassKind::Laplacian, HighPassKind::GaussianResidual] {
        high = high.max(scalar_f64(&loss_high(&x0, &x0, kind).unwrap()).unwrap());
    }
    let cs = scalar_f64(&loss_cssim(&gt, &x0, &shadow, &c, &p).unwrap()).unwrap();
    let zero = c.zeros_like().unwrap();
    let cs0 = scalar_f64(&loss_cssim(&gt, &x0.affine(0.5, 0.1).unwrap(), &shadow, &zero, &p).unwrap()).unwrap();
    let detail = format!(
        "perfect: L_DM {dm:e}, L_high {high:e}, L_cssim {cs:.2e}; c=0: L_cssim {cs0} (stabilizer {CSSIM_STABILIZER:e})"
    );
    if dm == 0.0 && high == 0.0 && cs <= 1e-4 && cs0 == 1.0 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---------------------------------------------------------------- trainer

/// A small configuration that trains in well under a second per step.
pub fn small_config(extra: &[&str]) -> Config {
    let mut o = vec![
        "data.resolution=16",
        "model.depth=2",
        "model.denoiser_depth=2",
        "model.agba_stages=[0,1]",
        "train.batch_size=2",
        "diffusion.sample_steps=3",
    ];
    o.extend_from_slice(extra);
    Config::tiny().with_overrides(&o).unwrap()
}

pub fn small_data(n: u64, side: usize) -> Vec<PairedSample> {
    (0..n)
        .map(|i| synthetic_sample(3, i, side, &format!("s{i}")).unwrap().0)
        .collect()
}

fn fill(st: &TrainState, v: f64) {
    for var in st.model.store().vars().values() {
        var.set(&var.as_tensor().ones_like().unwrap().affine(v, 0.0).unwrap()).unwrap();
    }
}

fn ema_values(st: &TrainState) -> Vec<f64> {
    st.ema.values().flat_map(|t| to_f64_vec(t).unwrap()).collect()
}

/// EMA hand arithmetic (`1 -> 2` at decay 0.9 gives exactly 1.1) and the fixed point.
pub fn check_ema_contracts() -> Check {
    let mut st = TrainState::new(&small_config(&["train.ema_decay=0.9"]), DType::F64).unwrap();
    fill(&st, 1.0);
    st.ema_update().unwrap();
    fill(&st, 2.0);
    st.ema_update().unwrap();
    let hand = 0.9 * 1.0 + (1.0 - 0.9) * 2.0;
    let arith = ema_values(&st).iter().all(|v| *v == hand);

    let mut st = TrainState::new(&small_config(&["train.ema_decay=0.7"]), DType::F64).unwrap();
    fill(&st, 0.25);
    for _ in 0..5 {
        st.ema_update().unwrap();
    }
    let fixed = ema_values(&st).iter().all(|v| *v == 0.25);
    let detail = format!("hand arithmetic exact: {arith}; fixed point exact: {fixed}");
    if arith && fixed {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn loss_bits(m: &[StepMetrics]) -> Vec<(u64, [u64; 5])> {
    m.iter().map(|r| (r.step, r.losses().map(f64::to_bits))).collect()
}

fn checkpoint_files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap())
        })
        .collect()
}

/// Interrupt after `cut` of `total` steps, resume from the checkpoint and compare
/// the metrics stream (wall-clock column excluded) and final checkpoint with an uninterrupted run.
pub fn check_resume(total: u64, cut: u64) -> Check {
    let cfg = small_config(&[&format!("train.max_steps={total}"), &format!("train.checkpoint_every={cut}"), "train.ema_every=2"]);
    let data = small_data(5, 16);
    let dir = tempfile::tempdir().unwrap();
    let opts = |name: &str, resume: Option<std::path::PathBuf>, stop_at: Option<u64>| RunOptions {
        checkpoint_dir: dir.path().join(name).join("ck"),
        metrics_path: dir.path().join(name).join("metrics.tsv"),
        resume,
        stop_at,
        dtype: DType::F32,
    };
    let full = run_training(&cfg, &data, &opts("full", None, None)).map_err(|e| e.to_string())?;
    run_training(&cfg, &data, &opts("cut", None, Some(cut))).map_err(|e| e.to_string())?;
    let ck = dir.path().join("cut/ck").join(shadowfree::trainer::checkpoint_name(cut));
    run_training(&cfg, &data, &opts("cut", Some(ck), None)).map_err(|e| e.to_string())?;
    let a = read_metrics(&dir.path().join("full/metrics.tsv")).map_err(|e| e.to_string())?;
    let b = read_metrics(&dir.path().join("cut/metrics.tsv")).map_err(|e| e.to_string())?;
    let same_metrics = a.len() == total as usize && loss_bits(&a) == loss_bits(&b);
    let same_memory = loss_bits(&full.metrics) == loss_bits(&a);
    let same_ckpt = checkpoint_files(&dir.path().join("full/ck")) == checkpoint_files(&dir.path().join("cut/ck"));
    let detail = format!(
        "{total} steps cut at {cut}: metrics identical {same_metrics}, checkpoints identical {same_ckpt}"
    );
    if same_metrics && same_memory && same_ckpt {
        Ok(detail)
    } else {
        Err(detail)
    }
}
