//! Time-conditioned U-shaped encoder–decoders for the two trainable models:
//! the conditional noise predictor (CNP) and the weight allocation (WA)
//! network.
//!
//! Layout follows the common diffusion U-Net convention: a stack of residual
//! blocks per resolution with self-attention at selected downsample factors,
//! stride-2 convolution downsampling, nearest-neighbor + conv upsampling,
//! skip connections from every encoder block to the decoder, and a sinusoidal
//! step embedding passed through a two-layer MLP and injected into every
//! residual block as a per-channel bias.
//!
//! Every residual branch ends in a zero-initialized convolution, so a freshly
//! built network is an identity-plus-head: the CNP (zero-initialized head)
//! predicts exactly zero noise, and the step embedding only gains influence
//! once training moves those weights off zero.

use candle_core::{Tensor, D};
use candle_nn::ops::{sigmoid, silu, softmax};
use candle_nn::{
    conv2d, group_norm, linear, Conv2d, Conv2dConfig, Dropout, GroupNorm, Init, Linear, Module,
    VarBuilder, VarMap,
};
use serde::{Deserialize, Serialize};

use crate::error::Error;

pub use decloud_core::embed::time_embedding;

/// Ratio of the step-embedding MLP width to `base_channels`.
const TIME_DIM_MULT: usize = 4;
const NORM_EPS: f64 = 1e-5;

/// Architecture description for one U-Net.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UNetSpec {
    /// Channel count of the first level; also the sinusoidal embedding width.
    pub base_channels: usize,
    /// Residual blocks per resolution level.
    pub depth: usize,
    /// Per-level channel multipliers; the length fixes the level count.
    pub channel_multipliers: Vec<usize>,
    /// Downsample factors at which self-attention runs (e.g. 4 = maps of H/4).
    /// The bottleneck between encoder and decoder always attends at the
    /// deepest factor `2^(levels-1)`, so specs with few levels should not be
    /// fed large images: score matrices grow as `(H*W)^2` of the deepest map.
    pub attention_factors: Vec<usize>,
    /// Attention head count.
    pub heads: usize,
    /// Dropout probability inside residual blocks (active in training only).
    pub dropout: f64,
    /// Input channel count (conditioning concatenated on channels).
    pub in_channels: usize,
    /// Output channel count.
    pub out_channels: usize,
}

impl UNetSpec {
    /// Full-scale noise-predictor layout: 96 base channels, depth 2,
    /// multipliers 1,1,2,2,3, attention at /4 and /8, 4 heads, no dropout.
    /// Input is the noisy image concatenated with the cloudy image (2C).
    pub fn cnp_full(bands: usize) -> Self {
        UNetSpec {
            base_channels: 96,
            depth: 2,
            channel_multipliers: vec![1, 1, 2, 2, 3],
            attention_factors: vec![4, 8],
            heads: 4,
            dropout: 0.0,
            in_channels: 2 * bands,
            out_channels: bands,
        }
    }

    /// Full-scale weighting-network layout: 64 base channels, depth 2,
    /// multipliers 1,1,2, attention at /4, one head. Input is the noisy
    /// image, the cloudy image, and the reference estimate (3C).
    pub fn wa_full(bands: usize) -> Self {
        UNetSpec {
            base_channels: 64,
            depth: 2,
            channel_multipliers: vec![1, 1, 2],
            attention_factors: vec![4, 8],
            heads: 1,
            dropout: 0.0,
            in_channels: 3 * bands,
            out_channels: bands,
        }
    }

    /// Desk-scale noise predictor: 32 base channels, three levels, depth 1,
    /// attention only at /4 so score matrices stay small at any input size.
    pub fn cnp_tiny(bands: usize) -> Self {
        UNetSpec {
            base_channels: 32,
            depth: 1,
            channel_multipliers: vec![1, 1, 2],
            attention_factors: vec![4],
            heads: 1,
            dropout: 0.0,
            in_channels: 2 * bands,
            out_channels: bands,
        }
    }

    /// Desk-scale weighting network: same trunk as [`UNetSpec::cnp_tiny`]
    /// with a 3C input.
    pub fn wa_tiny(bands: usize) -> Self {
        UNetSpec { in_channels: 3 * bands, ..UNetSpec::cnp_tiny(bands) }
    }

    /// Level count (length of the multiplier sequence).
    pub fn levels(&self) -> usize {
        self.channel_multipliers.len()
    }

    /// Spatial sizes must be divisible by this (one halving between levels).
    pub fn size_divisor(&self) -> usize {
        1 << (self.levels() - 1)
    }

    /// Structural validity check.
    pub fn validate(&self) -> Result<(), Error> {
        if self.base_channels == 0 {
            return Err(Error::Config("base_channels must be positive".into()));
        }
        if self.channel_multipliers.is_empty() {
            return Err(Error::Config("channel_multipliers must be nonempty".into()));
        }
        if self.channel_multipliers.iter().any(|&m| m == 0) {
            return Err(Error::Config("channel multipliers must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.heads == 0 {
            return Err(Error::Config("heads must be positive".into()));
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::Config("in/out channels must be positive".into()));
        }
        if self.base_channels % 2 != 0 {
            // The sinusoidal embedding needs an even width.
            return Err(Error::Config("base_channels must be even".into()));
        }
        Ok(())
    }
}

/// Largest group count ≤ 32 dividing the channel count.
fn norm_groups(channels: usize) -> usize {
    let mut g = 32.min(channels);
    while channels % g != 0 {
        g -= 1;
    }
    g
}

fn conv_cfg(padding: usize, stride: usize) -> Conv2dConfig {
    Conv2dConfig { padding, stride, ..Default::default() }
}

/// 3×3 same-padding convolution with weights and bias forced to zero.
fn conv2d_zeros(
    in_ch: usize,
    out_ch: usize,
    kernel: usize,
    cfg: Conv2dConfig,
    vb: VarBuilder,
) -> Result<Conv2d, Error> {
    let ws = vb.get_with_hints((out_ch, in_ch, kernel, kernel), "weight", Init::Const(0.0))?;
    let bs = vb.get_with_hints(out_ch, "bias", Init::Const(0.0))?;
    Ok(Conv2d::new(ws, Some(bs), cfg))
}

/// Residual block: norm → silu → conv, add step embedding as a per-channel
/// bias, norm → silu → dropout → zero-init conv, plus a learned 1×1 skip when
/// the channel count changes.
struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    emb: Linear,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
    dropout: Option<Dropout>,
}

impl ResBlock {
    fn new(
        in_ch: usize,
        out_ch: usize,
        time_dim: usize,
        dropout: f64,
        vb: VarBuilder,
    ) -> Result<Self, Error> {
        let norm1 = group_norm(norm_groups(in_ch), in_ch, NORM_EPS, vb.pp("norm1"))?;
        let conv1 = conv2d(in_ch, out_ch, 3, conv_cfg(1, 1), vb.pp("conv1"))?;
        let emb = linear(time_dim, out_ch, vb.pp("emb"))?;
        let norm2 = group_norm(norm_groups(out_ch), out_ch, NORM_EPS, vb.pp("norm2"))?;
        let conv2 = conv2d_zeros(out_ch, out_ch, 3, conv_cfg(1, 1), vb.pp("conv2"))?;
        let skip = if in_ch != out_ch {
            Some(conv2d(in_ch, out_ch, 1, conv_cfg(0, 1), vb.pp("skip"))?)
        } else {
            None
        };
        let dropout = (dropout > 0.0).then(|| Dropout::new(dropout as f32));
        Ok(ResBlock { norm1, conv1, emb, norm2, conv2, skip, dropout })
    }

    fn forward(&self, x: &Tensor, temb: &Tensor, train: bool) -> Result<Tensor, Error> {
        let mut h = self.conv1.forward(&silu(&self.norm1.forward(x)?)?)?;
        let bias = self.emb.forward(&silu(temb)?)?;
        let (b, ch) = bias.dims2()?;
        h = h.broadcast_add(&bias.reshape((b, ch, 1, 1))?)?;
        h = silu(&self.norm2.forward(&h)?)?;
        if let (Some(d), true) = (&self.dropout, train) {
            h = d.forward(&h, true)?;
        }
        h = self.conv2.forward(&h)?;
        let sk = match &self.skip {
            Some(c) => c.forward(x)?,
            None => x.clone(),
        };
        Ok((sk + h)?)
    }
}

/// Single-scale multi-head self-attention over all spatial positions, with a
/// zero-initialized output projection (identity at initialization).
struct Attention {
    norm: GroupNorm,
    qkv: Conv2d,
    proj: Conv2d,
    heads: usize,
}

impl Attention {
    fn new(channels: usize, heads: usize, vb: VarBuilder) -> Result<Self, Error> {
        if channels % heads != 0 {
            return Err(Error::Config(format!(
                "attention heads {heads} must divide channel count {channels}"
            )));
        }
        let norm = group_norm(norm_groups(channels), channels, NORM_EPS, vb.pp("norm"))?;
        let qkv = conv2d(channels, 3 * channels, 1, conv_cfg(0, 1), vb.pp("qkv"))?;
        let proj = conv2d_zeros(channels, channels, 1, conv_cfg(0, 1), vb.pp("proj"))?;
        Ok(Attention { norm, qkv, proj, heads })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor, Error> {
        let (b, c, h, w) = x.dims4()?;
        let n = h * w;
        let hd = c / self.heads;
        let qkv = self.qkv.forward(&self.norm.forward(x)?)?;
        let qkv = qkv.reshape((b, 3, self.heads, hd, n))?;
        let q = qkv.narrow(1, 0, 1)?.squeeze(1)?.contiguous()?;
        let k = qkv.narrow(1, 1, 1)?.squeeze(1)?.contiguous()?;
        let v = qkv.narrow(1, 2, 1)?.squeeze(1)?.contiguous()?;
        let scale = (hd as f64).powf(-0.5);
        let scores = q.transpose(2, 3)?.contiguous()?.matmul(&k)?.affine(scale, 0.0)?;
        let attn = softmax(&scores, D::Minus1)?;
        let out = v.matmul(&attn.transpose(2, 3)?.contiguous()?)?;
        let out = self.proj.forward(&out.reshape((b, c, h, w))?)?;
        Ok((x + out)?)
    }
}

/// Residual block with optional trailing attention.
struct Stage {
    res: ResBlock,
    attn: Option<Attention>,
}

impl Stage {
    fn forward(&self, x: &Tensor, temb: &Tensor, train: bool) -> Result<Tensor, Error> {
        let h = self.res.forward(x, temb, train)?;
        match &self.attn {
            Some(a) => a.forward(&h),
            None => Ok(h),
        }
    }
}

/// Time-conditioned U-Net.
pub struct UNet {
    spec: UNetSpec,
    temb1: Linear,
    temb2: Linear,
    conv_in: Conv2d,
    enc: Vec<Stage>,
    downs: Vec<Conv2d>,
    mid1: ResBlock,
    mid_attn: Attention,
    mid2: ResBlock,
    dec: Vec<Stage>,
    ups: Vec<Conv2d>,
    out_norm: GroupNorm,
    out_conv: Conv2d,
    /// Squash the output into [0, 1] (weighting network head).
    sigmoid_out: bool,
}

impl UNet {
    /// Build the network under `vb`; `zero_head` forces the final convolution
    /// to zero (noise predictor), `sigmoid_out` appends a logistic squash
    /// (weighting network).
    fn new(
        spec: UNetSpec,
        zero_head: bool,
        sigmoid_out: bool,
        vb: VarBuilder,
    ) -> Result<Self, Error> {
        spec.validate()?;
        let base = spec.base_channels;
        let time_dim = TIME_DIM_MULT * base;
        let levels = spec.levels();
        let attn_at = |ds: usize| spec.attention_factors.contains(&ds);

        let temb1 = linear(base, time_dim, vb.pp("temb1"))?;
        let temb2 = linear(time_dim, time_dim, vb.pp("temb2"))?;

        let mut ch = base * spec.channel_multipliers[0];
        let conv_in = conv2d(spec.in_channels, ch, 3, conv_cfg(1, 1), vb.pp("conv_in"))?;
        // Channel count of every tensor pushed on the skip stack, in order.
        let mut skip_ch = vec![ch];

        let mut enc = Vec::new();
        let mut downs = Vec::new();
        let mut ds = 1usize;
        for (i, &mult) in spec.channel_multipliers.iter().enumerate() {
            let ch_i = base * mult;
            for d in 0..spec.depth {
                let res = ResBlock::new(
                    ch,
                    ch_i,
                    time_dim,
                    spec.dropout,
                    vb.pp(format!("enc{i}_{d}")),
                )?;
                ch = ch_i;
                let attn = attn_at(ds)
                    .then(|| Attention::new(ch, spec.heads, vb.pp(format!("enc{i}_{d}_attn"))))
                    .transpose()?;
                enc.push(Stage { res, attn });
                skip_ch.push(ch);
            }
            if i + 1 < levels {
                downs.push(conv2d(ch, ch, 3, conv_cfg(1, 2), vb.pp(format!("down{i}")))?);
                skip_ch.push(ch);
                ds *= 2;
            }
        }

        let mid1 = ResBlock::new(ch, ch, time_dim, spec.dropout, vb.pp("mid1"))?;
        let mid_attn = Attention::new(ch, spec.heads, vb.pp("mid_attn"))?;
        let mid2 = ResBlock::new(ch, ch, time_dim, spec.dropout, vb.pp("mid2"))?;

        let mut dec = Vec::new();
        let mut ups = Vec::new();
        for i in (0..levels).rev() {
            let ch_i = base * spec.channel_multipliers[i];
            for d in 0..=spec.depth {
                let sk = skip_ch.pop().ok_or_else(|| {
                    Error::Internal("skip stack underflow during construction".into())
                })?;
                let res = ResBlock::new(
                    ch + sk,
                    ch_i,
                    time_dim,
                    spec.dropout,
                    vb.pp(format!("dec{i}_{d}")),
                )?;
                ch = ch_i;
                let attn = attn_at(ds)
                    .then(|| Attention::new(ch, spec.heads, vb.pp(format!("dec{i}_{d}_attn"))))
                    .transpose()?;
                dec.push(Stage { res, attn });
            }
            if i > 0 {
                ups.push(conv2d(ch, ch, 3, conv_cfg(1, 1), vb.pp(format!("up{i}")))?);
                ds /= 2;
            }
        }
        debug_assert!(skip_ch.is_empty());

        let out_norm = group_norm(norm_groups(ch), ch, NORM_EPS, vb.pp("out_norm"))?;
        let out_conv = if zero_head {
            conv2d_zeros(ch, spec.out_channels, 3, conv_cfg(1, 1), vb.pp("out_conv"))?
        } else {
            conv2d(ch, spec.out_channels, 3, conv_cfg(1, 1), vb.pp("out_conv"))?
        };

        Ok(UNet {
            spec,
            temb1,
            temb2,
            conv_in,
            enc,
            downs,
            mid1,
            mid_attn,
            mid2,
            dec,
            ups,
            out_norm,
            out_conv,
            sigmoid_out,
        })
    }

    pub fn spec(&self) -> &UNetSpec {
        &self.spec
    }

    /// Step-embedding MLP: sinusoidal features of each step index, then two
    /// linear layers.
    fn step_features(&self, ts: &[usize], like: &Tensor) -> Result<Tensor, Error> {
        let base = self.spec.base_channels;
        let mut buf = Vec::with_capacity(ts.len() * base);
        for &t in ts {
            buf.extend(time_embedding(t, base)?);
        }
        let emb = Tensor::from_vec(buf, (ts.len(), base), like.device())?.to_dtype(like.dtype())?;
        let h = silu(&self.temb1.forward(&emb)?)?;
        Ok(self.temb2.forward(&h)?)
    }

    /// Forward pass. `ts` holds one step index per batch element.
    pub fn forward(&self, x: &Tensor, ts: &[usize], train: bool) -> Result<Tensor, Error> {
        let (n, c, h, w) = x.dims4()?;
        if c != self.spec.in_channels {
            return Err(Error::Config(format!(
                "expected {} input channels, got {c}",
                self.spec.in_channels
            )));
        }
        if ts.len() != n {
            return Err(Error::Config(format!(
                "got {} step indices for a batch of {n}",
                ts.len()
            )));
        }
        let div = self.spec.size_divisor();
        if h % div != 0 || w % div != 0 {
            return Err(Error::Config(format!(
                "spatial size {h}x{w} not divisible by {div}"
            )));
        }

        let temb = self.step_features(ts, x)?;
        let levels = self.spec.levels();
        let depth = self.spec.depth;

        let mut hcur = self.conv_in.forward(x)?;
        let mut skips = vec![hcur.clone()];
        for i in 0..levels {
            for d in 0..depth {
                hcur = self.enc[i * depth + d].forward(&hcur, &temb, train)?;
                skips.push(hcur.clone());
            }
            if i + 1 < levels {
                hcur = self.downs[i].forward(&hcur)?;
                skips.push(hcur.clone());
            }
        }

        hcur = self.mid1.forward(&hcur, &temb, train)?;
        hcur = self.mid_attn.forward(&hcur)?;
        hcur = self.mid2.forward(&hcur, &temb, train)?;

        for (ri, i) in (0..levels).rev().enumerate() {
            for d in 0..=depth {
                let skip = skips
                    .pop()
                    .ok_or_else(|| Error::Internal("skip stack underflow".into()))?;
                let cat = Tensor::cat(&[&hcur, &skip], 1)?;
                hcur = self.dec[ri * (depth + 1) + d].forward(&cat, &temb, train)?;
            }
            if i > 0 {
                let (_, _, hh, ww) = hcur.dims4()?;
                hcur = hcur.upsample_nearest2d(hh * 2, ww * 2)?;
                hcur = self.ups[ri].forward(&hcur)?;
            }
        }
        debug_assert!(skips.is_empty());

        let out = self.out_conv.forward(&silu(&self.out_norm.forward(&hcur)?)?)?;
        if self.sigmoid_out {
            Ok(sigmoid(&out)?)
        } else {
            Ok(out)
        }
    }
}

/// Build the conditional noise predictor for `bands`-channel imagery.
///
/// Input is `x_t` concatenated with the cloudy image `y` on channels (2C);
/// the head is zero-initialized so the initial noise prediction is exactly 0.
pub fn build_cnp(bands: usize, spec: &UNetSpec, vb: VarBuilder) -> Result<UNet, Error> {
    if bands == 0 {
        return Err(Error::Config("band count must be positive".into()));
    }
    if spec.in_channels != 2 * bands || spec.out_channels != bands {
        return Err(Error::Config(format!(
            "noise-predictor spec must map 2C -> C channels for C = {bands}, got {} -> {}",
            spec.in_channels, spec.out_channels
        )));
    }
    UNet::new(spec.clone(), true, false, vb)
}

/// Build the weight-allocation network for `bands`-channel imagery.
///
/// Input is `x_t`, `y`, and the reference estimate concatenated on channels
/// (3C); a final logistic squash keeps every weight in [0, 1].
pub fn build_wa(bands: usize, spec: &UNetSpec, vb: VarBuilder) -> Result<UNet, Error> {
    if bands == 0 {
        return Err(Error::Config("band count must be positive".into()));
    }
    if spec.in_channels != 3 * bands || spec.out_channels != bands {
        return Err(Error::Config(format!(
            "weighting-network spec must map 3C -> C channels for C = {bands}, got {} -> {}",
            spec.in_channels, spec.out_channels
        )));
    }
    UNet::new(spec.clone(), true, true, vb)
}

/// Total number of scalar parameters registered in a variable map.
pub fn param_count(vars: &VarMap) -> usize {
    vars.all_vars().iter().map(|v| v.as_tensor().elem_count()).sum()
}

/// Re-initialize every parameter in `vars` from a seeded generator, making
/// network construction reproducible. The tensor runtime's own CPU
/// initializer cannot be seeded, so builders construct first and then call
/// this to overwrite:
///
/// * rank ≥ 2 weights → normal draws, std `sqrt(2 / fan_in)` for
///   convolutions and `sqrt(1 / fan_in)` for linear layers;
/// * rank-1 vectors of all ones (normalization gains) are kept;
/// * all other rank-1 vectors (biases) → zero;
/// * tensors that are exactly zero are kept — those are deliberate
///   zero-initialized heads.
///
/// Each tensor's stream is keyed by `seed` and its own name, so adding or
/// removing a layer does not shift the draws of unrelated layers.
pub fn deterministic_init(vars: &mut VarMap, seed: u64) -> Result<(), Error> {
    fn fnv1a(s: &str) -> u64 {
        let mut h = 0xcbf29ce484222325u64;
        for b in s.bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
        h
    }
    // Box-Muller over a splitmix64 stream.
    struct Draws {
        state: u64,
        spare: Option<f64>,
    }
    impl Draws {
        fn uniform(&mut self) -> f64 {
            self.state = self.state.wrapping_add(0x9E3779B97F4A7C15);
            let mut z = self.state;
            z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
            z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
            z ^= z >> 31;
            ((z >> 11) as f64 + 0.5) / (1u64 << 53) as f64
        }
        fn normal(&mut self) -> f64 {
            if let Some(v) = self.spare.take() {
                return v;
            }
            let (u1, u2) = (self.uniform(), self.uniform());
            let r = (-2.0 * u1.ln()).sqrt();
            let (s, c) = (core::f64::consts::TAU * u2).sin_cos();
            self.spare = Some(r * s);
            r * c
        }
    }

    let entries: Vec<(String, Vec<usize>, candle_core::DType, candle_core::Device, bool, bool)> = {
        let guard = vars
            .data()
            .lock()
            .map_err(|_| Error::Internal("parameter map lock poisoned".into()))?;
        let mut names: Vec<String> = guard.keys().cloned().collect();
        names.sort();
        let mut out = Vec::with_capacity(names.len());
        for name in names {
            let t = guard[&name].as_tensor();
            let vals = t.to_dtype(candle_core::DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
            let all_zero = vals.iter().all(|&v| v == 0.0);
            let all_one = vals.iter().all(|&v| v == 1.0);
            out.push((
                name,
                t.dims().to_vec(),
                t.dtype(),
                t.device().clone(),
                all_zero,
                all_one,
            ));
        }
        out
    };

    for (name, dims, dtype, device, all_zero, all_one) in entries {
        if all_zero {
            continue;
        }
        let len: usize = dims.iter().product();
        let fresh = if dims.len() >= 2 {
            let fan_in: usize = dims[1..].iter().product();
            let std = if dims.len() >= 4 {
                (2.0 / fan_in as f64).sqrt()
            } else {
                (1.0 / fan_in as f64).sqrt()
            };
            let mut d = Draws { state: seed ^ fnv1a(&name), spare: None };
            let data: Vec<f64> = (0..len).map(|_| d.normal() * std).collect();
            Tensor::from_vec(data, dims.as_slice(), &device)?.to_dtype(dtype)?
        } else if all_one {
            continue;
        } else {
            Tensor::zeros(dims.as_slice(), dtype, &device)?
        };
        vars.set_one(&name, fresh)?;
    }
    Ok(())
}

/// Order-independent digest of every parameter tensor: `(name, sum, sum of
/// squares)` sorted by name. Exact equality of two fingerprints is the
/// "parameters unchanged" check used by freeze invariants.
pub fn param_fingerprint(vars: &VarMap) -> Result<Vec<(String, f64, f64)>, Error> {
    let guard = vars
        .data()
        .lock()
        .map_err(|_| Error::Internal("parameter map lock poisoned".into()))?;
    let mut names: Vec<String> = guard.keys().cloned().collect();
    names.sort();
    let mut out = Vec::with_capacity(names.len());
    for name in names {
        let vals = guard[&name]
            .as_tensor()
            .to_dtype(candle_core::DType::F64)?
            .flatten_all()?
            .to_vec1::<f64>()?;
        let sum: f64 = vals.iter().sum();
        let sumsq: f64 = vals.iter().map(|v| v * v).sum();
        out.push((name, sum, sumsq));
    }
    Ok(out)
}
