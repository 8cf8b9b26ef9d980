//! Adaptive gated dual-branch attention.
//!
//! Queries come from the feature map being refined. Keys and values come from
//! two sources: a contrast-prior branch `τ(c)` and an image-feature branch
//! `τ̂(c′)`. A per-pixel sigmoid gate blends the two branches before ordinary
//! scaled-dot-product attention:
//!
//! ```text
//! K̄ = g ⊙ W_K τ(c) + (1 - g) ⊙ Ŵ_K τ̂(c′)
//! V̄ = g ⊙ W_V τ(c) + (1 - g) ⊙ Ŵ_V τ̂(c′)
//! g = sigmoid(MLP([τ(c), τ̂(c′)]))
//! out = z + W_O · softmax(Q K̄ᵀ / √d_head) V̄
//! ```
//!
//! Heads are concatenated and mixed by `W_O`; with one head this is the plain
//! single-head formulation.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::nn::{self, Builder, Conv2d, Linear};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgbaConfig {
    /// Channels of the feature map `z` the block refines.
    pub feature_channels: usize,
    /// Channels of the image-feature prior `c′`.
    pub image_prior_channels: usize,
    /// Channels of the token grids produced by `τ` and `τ̂`.
    pub prior_channels: usize,
    pub embed_dim: usize,
    pub num_heads: usize,
    pub gate_hidden: usize,
}

impl AgbaConfig {
    pub fn validate(&self) -> Result<()> {
        ensure(
            self.feature_channels > 0
                && self.image_prior_channels > 0
                && self.prior_channels > 0
                && self.embed_dim > 0
                && self.num_heads > 0
                && self.gate_hidden > 0,
            || format!("all AGBA dims must be >= 1: {self:?}"),
        )?;
        ensure(self.embed_dim % self.num_heads == 0, || {
            format!(
                "embed_dim {} not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            )
        })
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }
}

/// How the blend gate is obtained. Fixed values exist for probing the two endpoints.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GateMode {
    Learned,
    Fixed(f64),
}

#[derive(Debug, Clone)]
pub struct AgbaBlock {
    cfg: AgbaConfig,
    /// Block index inside the host network, reported on numeric faults.
    index: usize,
    tau: Conv2d,
    tau_hat: Conv2d,
    gate_hidden: Linear,
    gate_out: Linear,
    w_q: Linear,
    w_k: Linear,
    w_v: Linear,
    w_k_hat: Linear,
    w_v_hat: Linear,
    w_o: Linear,
}

/// Intermediate tensors of one forward pass, all token-major `(B, N, ·)`.
#[derive(Debug, Clone)]
pub struct AgbaTrace {
    pub tau_c: Tensor,
    pub tau_c_prime: Tensor,
    pub gate: Tensor,
    pub k_bar: Tensor,
    pub v_bar: Tensor,
    /// Softmax weights `(B * heads, N, N)`.
    pub attention: Tensor,
    /// Concatenated head outputs before `W_O`.
    pub attended: Tensor,
    /// Feature-map output including the residual.
    pub output: Tensor,
}

/// `(B, C, H, W)` -> `(B, H*W, C)`.
pub fn flatten_tokens(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    Ok(x.reshape((b, c, h * w))?.transpose(1, 2)?.contiguous()?)
}

/// `(B, H*W, C)` -> `(B, C, H, W)`.
pub fn unflatten_tokens(x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (b, n, c) = x.dims3()?;
    ensure(n == h * w, || format!("token count {n} != {h}x{w}"))?;
    Ok(x.transpose(1, 2)?.contiguous()?.reshape((b, c, h, w))?)
}

impl AgbaBlock {
    pub fn new(b: &mut Builder, cfg: AgbaConfig, index: usize) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            tau: Conv2d::new(&mut b.push("tau"), 1, cfg.prior_channels, 3, false)?,
            tau_hat: Conv2d::new(&mut b.push("tau_hat"), cfg.image_prior_channels, cfg.prior_channels, 3, false)?,
            gate_hidden: Linear::new(&mut b.push("gate_hidden"), 2 * cfg.prior_channels, cfg.gate_hidden, true)?,
            gate_out: Linear::new(&mut b.push("gate_out"), cfg.gate_hidden, 1, true)?,
            w_q: Linear::new(&mut b.push("w_q"), cfg.feature_channels, cfg.embed_dim, false)?,
            w_k: Linear::new(&mut b.push("w_k"), cfg.prior_channels, cfg.embed_dim, false)?,
            w_v: Linear::new(&mut b.push("w_v"), cfg.prior_channels, cfg.embed_dim, false)?,
            w_k_hat: Linear::new(&mut b.push("w_k_hat"), cfg.prior_channels, cfg.embed_dim, false)?,
            w_v_hat: Linear::new(&mut b.push("w_v_hat"), cfg.prior_channels, cfg.embed_dim, false)?,
            w_o: Linear::new(&mut b.push("w_o"), cfg.embed_dim, cfg.feature_channels, true)?,
            cfg,
            index,
        })
    }

    pub fn config(&self) -> &AgbaConfig {
        &self.cfg
    }

    /// Shallow encoders: `τ(c)` from the 1-channel heatmap, `τ̂(c′)` from image features.
    /// Both return token grids `(B, H*W, prior_channels)`.
    pub fn encode_priors(&self, c: &Tensor, c_prime: &Tensor) -> Result<(Tensor, Tensor)> {
        let (_, _, h, w) = c.dims4()?;
        let (_, _, h2, w2) = c_prime.dims4()?;
        if (h, w) != (h2, w2) {
            return Err(Error::TrainingFault {
                part: format!("agba[{}].encode_priors", self.index),
                detail: format!("prior sizes differ: {h}x{w} vs {h2}x{w2}"),
            });
        }
        let tau_c = nn::silu(&self.tau.forward(c)?)?;
        let tau_cp = nn::silu(&self.tau_hat.forward(c_prime)?)?;
        Ok((flatten_tokens(&tau_c)?, flatten_tokens(&tau_cp)?))
    }

    /// Per-token gate in `(0, 1)`, shape `(B, N, 1)`.
    pub fn compute_gate(&self, tau_c: &Tensor, tau_c_prime: &Tensor) -> Result<Tensor> {
        ensure(tau_c.dims() == tau_c_prime.dims(), || {
            format!("gate inputs differ: {:?} vs {:?}", tau_c.dims(), tau_c_prime.dims())
        })?;
        let x = Tensor::cat(&[tau_c, tau_c_prime], 2)?;
        let hdn = nn::silu(&self.gate_hidden.forward(&x)?)?;
        nn::sigmoid(&self.gate_out.forward(&hdn)?)
    }

    /// Ungated branch projections `(W_K τ(c), Ŵ_K τ̂(c′), W_V τ(c), Ŵ_V τ̂(c′))`.
    pub fn branch_projections(&self, tau_c: &Tensor, tau_c_prime: &Tensor) -> Result<[Tensor; 4]> {
        Ok([
            self.w_k.forward(tau_c)?,
            self.w_k_hat.forward(tau_c_prime)?,
            self.w_v.forward(tau_c)?,
            self.w_v_hat.forward(tau_c_prime)?,
        ])
    }

    /// Gate-blended keys and values, each `(B, N, embed_dim)`.
    pub fn gated_kv(&self, tau_c: &Tensor, tau_c_prime: &Tensor, gate: &Tensor) -> Result<(Tensor, Tensor)> {
        let [k, k_hat, v, v_hat] = self.branch_projections(tau_c, tau_c_prime)?;
        Ok((blend(gate, &k, &k_hat)?, blend(gate, &v, &v_hat)?))
    }

    pub fn forward(&self, z: &Tensor, c: &Tensor, c_prime: &Tensor) -> Result<Tensor> {
        Ok(self.forward_traced(z, c, c_prime, GateMode::Learned)?.output)
    }

    pub fn forward_traced(&self, z: &Tensor, c: &Tensor, c_prime: &Tensor, mode: GateMode) -> Result<AgbaTrace> {
        let (bsz, ch, h, w) = z.dims4()?;
        ensure(ch == self.cfg.feature_channels, || {
            format!("AGBA expects {} feature channels, got {ch}", self.cfg.feature_channels)
        })?;
        let (_, _, ch_, cw) = c.dims4()?;
        ensure((ch_, cw) == (h, w), || {
            format!("contrast prior is {ch_}x{cw}, block runs at {h}x{w}")
        })?;
        let (tau_c, tau_cp) = self.encode_priors(c, c_prime)?;
        let gate = match mode {
            GateMode::Learned => self.compute_gate(&tau_c, &tau_cp)?,
            GateMode::Fixed(v) => Tensor::full(v, (bsz, h * w, 1), z.device())?.to_dtype(z.dtype())?,
        };
        let (k_bar, v_bar) = self.gated_kv(&tau_c, &tau_cp, &gate)?;
        let q = self.w_q.forward(&flatten_tokens(z)?)?;
        let (attention, attended) = multi_head_attention(&q, &k_bar, &v_bar, self.cfg.num_heads)?;
        let out_tokens = self.w_o.forward(&attended)?;
        let output = (z + unflatten_tokens(&out_tokens, h, w)?)?;
        Ok(AgbaTrace {
            tau_c,
            tau_c_prime: tau_cp,
            gate,
            k_bar,
            v_bar,
            attention,
            attended,
            output,
        })
    }

    /// Fails with the block index if any value in `t` is non-finite.
    pub fn check_finite(&self, t: &Tensor) -> Result<()> {
        let s = nn::scalar_f64(&t.abs()?.max_all()?)?;
        if s.is_finite() {
            Ok(())
        } else {
            Err(Error::TrainingFault {
                part: format!("agba[{}]", self.index),
                detail: "non-finite activation".into(),
            })
        }
    }
}

/// `g ⊙ a + (1 - g) ⊙ b` with `g` broadcast over the last axis.
pub fn blend(gate: &Tensor, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let keep = gate.affine(-1.0, 1.0)?;
    Ok((a.broadcast_mul(gate)? + b.broadcast_mul(&keep)?)?)
}

/// Scaled-dot-product attention split over `heads`.
///
/// `q`, `k`, `v` are `(B, N, d)` / `(B, M, d)`. Returns the softmax weights
/// `(B * heads, N, M)` and the concatenated head outputs `(B, N, d)`.
pub fn multi_head_attention(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize) -> Result<(Tensor, Tensor)> {
    let (b, n, d) = q.dims3()?;
    let (_, m, _) = k.dims3()?;
    ensure(d % heads == 0, || format!("dim {d} not divisible by {heads} heads"))?;
    let dh = d / heads;
    let split = |t: &Tensor, len: usize| -> Result<Tensor> {
        Ok(t.reshape((b, len, heads, dh))?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((b * heads, len, dh))?)
    };
    let (qh, kh, vh) = (split(q, n)?, split(k, m)?, split(v, m)?);
    let logits = (qh.matmul(&kh.transpose(1, 2)?.contiguous()?)? / (dh as f64).sqrt())?;
    let attn = nn::softmax_last(&logits)?;
    let out = attn.matmul(&vh)?;
    let out = out
        .reshape((b, heads, n, dh))?
        .transpose(1, 2)?
        .contiguous()?
        .reshape((b, n, d))?;
    Ok((attn, out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{randn, to_f64_vec, ParamStore};
    use candle_core::{DType, Device};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg(heads: usize) -> AgbaConfig {
        AgbaConfig {
            feature_channels: 4,
            image_prior_channels: 3,
            prior_channels: 5,
            embed_dim: 8,
            num_heads: heads,
            gate_hidden: 6,
        }
    }

    fn block(heads: usize, seed: u64) -> (ParamStore, AgbaBlock) {
        let mut store = ParamStore::new(DType::F64, Device::Cpu);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let blk = AgbaBlock::new(&mut Builder::new(&mut store, &mut rng).push("agba"), cfg(heads), 0).unwrap();
        (store, blk)
    }

    fn inputs(h: usize, w: usize, seed: u64) -> (Tensor, Tensor, Tensor) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = Device::Cpu;
        (
            randn(&[2, 4, h, w], DType::F64, &d, &mut rng).unwrap(),
            randn(&[2, 1, h, w], DType::F64, &d, &mut rng).unwrap().abs().unwrap(),
            randn(&[2, 3, h, w], DType::F64, &d, &mut rng).unwrap(),
        )
    }

    fn zero_all(store: &ParamStore, prefix: &str) {
        for (k, v) in store.vars() {
            if k.contains(prefix) {
                v.set(&v.zeros_like().unwrap()).unwrap();
            }
        }
    }

    #[test]
    fn config_validation() {
        assert!(cfg(3).validate().is_err());
        let mut c = cfg(2);
        c.gate_hidden = 0;
        assert!(c.validate().is_err());
        cfg(4).validate().unwrap();
    }

    #[test]
    fn zero_encoder_gives_zero_tokens_and_token_count() {
        let (store, blk) = block(2, 1);
        zero_all(&store, "tau");
        let (_, c, cp) = inputs(5, 3, 2);
        let (tc, tcp) = blk.encode_priors(&c.zeros_like().unwrap(), &cp).unwrap();
        assert_eq!(tc.dims(), &[2, 15, 5]);
        assert!(to_f64_vec(&tc).unwrap().iter().all(|&v| v == 0.0));
        assert!(to_f64_vec(&tcp).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_gate_mlp_is_one_half_and_bias_saturates() {
        let (store, blk) = block(2, 4);
        zero_all(&store, "gate_");
        let (_, c, cp) = inputs(4, 4, 5);
        let (tc, tcp) = blk.encode_priors(&c, &cp).unwrap();
        let g = blk.compute_gate(&tc, &tcp).unwrap();
        assert!(to_f64_vec(&g).unwrap().iter().all(|&v| v == 0.5));
        let bias = store.vars()["agba.gate_out.bias"].clone();
        bias.set(&Tensor::new(&[20.0f64], &Device::Cpu).unwrap()).unwrap();
        let g = blk.compute_gate(&tc, &tcp).unwrap();
        let want = 1.0 / (1.0 + (-20.0f64).exp());
        assert!(to_f64_vec(&g).unwrap().iter().all(|&v| (v - want).abs() < 1e-15 && (v - 1.0).abs() < 1e-8));
    }

    #[test]
    fn gated_kv_endpoints() {
        let (_, blk) = block(2, 7);
        let (_, c, cp) = inputs(3, 3, 8);
        let (tc, tcp) = blk.encode_priors(&c, &cp).unwrap();
        let ones = Tensor::ones((2, 9, 1), DType::F64, &Device::Cpu).unwrap();
        let (k1, v1) = blk.gated_kv(&tc, &tcp, &ones).unwrap();
        assert_eq!(to_f64_vec(&k1).unwrap(), to_f64_vec(&blk.w_k.forward(&tc).unwrap()).unwrap());
        assert_eq!(to_f64_vec(&v1).unwrap(), to_f64_vec(&blk.w_v.forward(&tc).unwrap()).unwrap());
        let (k0, _) = blk.gated_kv(&tc, &tcp, &ones.zeros_like().unwrap()).unwrap();
        assert_eq!(to_f64_vec(&k0).unwrap(), to_f64_vec(&blk.w_k_hat.forward(&tcp).unwrap()).unwrap());
    }

    #[test]
    fn uniform_attention_when_keys_identical() {
        let q = Tensor::new(&[[[1.0f64, 2.0], [0.5, -1.0], [3.0, 0.0]]], &Device::Cpu).unwrap();
        let k = Tensor::new(&[[[0.3f64, 0.7], [0.3, 0.7], [0.3, 0.7]]], &Device::Cpu).unwrap();
        let v = Tensor::new(&[[[1.0f64, 0.0], [2.0, 4.0], [6.0, 2.0]]], &Device::Cpu).unwrap();
        let (a, o) = multi_head_attention(&q, &k, &v, 1).unwrap();
        for row in a.get(0).unwrap().to_vec2::<f64>().unwrap() {
            for x in row {
                assert!((x - 1.0 / 3.0).abs() < 1e-12);
            }
        }
        for row in o.get(0).unwrap().to_vec2::<f64>().unwrap() {
            assert!((row[0] - 3.0).abs() < 1e-12 && (row[1] - 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn single_token_returns_value_row() {
        let (_, blk) = block(2, 11);
        let (z, c, cp) = inputs(1, 1, 12);
        let tr = blk.forward_traced(&z, &c, &cp, GateMode::Learned).unwrap();
        assert_eq!(to_f64_vec(&tr.attended).unwrap(), to_f64_vec(&tr.v_bar).unwrap());
    }

    #[test]
    fn single_head_matches_direct_formula() {
        let (_, blk) = block(1, 13);
        let (z, c, cp) = inputs(3, 2, 14);
        let tr = blk.forward_traced(&z, &c, &cp, GateMode::Learned).unwrap();
        let q = blk.w_q.forward(&flatten_tokens(&z).unwrap()).unwrap();
        for bi in 0..2 {
            let qb = to_f64_vec(&q.get(bi).unwrap()).unwrap();
            let kb = to_f64_vec(&tr.k_bar.get(bi).unwrap()).unwrap();
            let vb = to_f64_vec(&tr.v_bar.get(bi).unwrap()).unwrap();
            let got = to_f64_vec(&tr.attended.get(bi).unwrap()).unwrap();
            let (n, d) = (6, 8);
            for i in 0..n {
                let logits: Vec<f64> = (0..n)
                    .map(|j| (0..d).map(|e| qb[i * d + e] * kb[j * d + e]).sum::<f64>() / (d as f64).sqrt())
                    .collect();
                let m = logits.iter().cloned().fold(f64::MIN, f64::max);
                let ex: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
                let s: f64 = ex.iter().sum();
                for e in 0..d {
                    let want: f64 = (0..n).map(|j| ex[j] / s * vb[j * d + e]).sum();
                    assert!((got[i * d + e] - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn output_shape_and_determinism() {
        let (_, blk) = block(2, 21);
        let (z, c, cp) = inputs(4, 6, 22);
        let a = blk.forward(&z, &c, &cp).unwrap();
        let b = blk.forward(&z, &c, &cp).unwrap();
        assert_eq!(a.dims(), z.dims());
        assert_eq!(to_f64_vec(&a).unwrap(), to_f64_vec(&b).unwrap());
    }

    #[test]
    fn mismatched_prior_size_is_rejected() {
        let (_, blk) = block(2, 31);
        let (z, _, cp) = inputs(4, 4, 32);
        let c = Tensor::zeros((2, 1, 2, 2), DType::F64, &Device::Cpu).unwrap();
        assert!(blk.forward(&z, &c, &cp).is_err());
    }
}
