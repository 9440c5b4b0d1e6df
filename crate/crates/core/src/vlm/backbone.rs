//! Decoder-only transformer with frozen (optionally 4-bit) weights and
//! low-rank adapters, with a hand-written backward pass over the adapters.

use std::borrow::Cow;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use super::config::{AdapterConfig, BackboneConfig, Precision};
use super::quant::Nf4Tensor;
use super::tokens;
use super::VlmError;
use crate::decode::{TokenId, Tokenizer, WordTokenizer};
use crate::linalg::{dot, gemm};

const RMS_EPS: f32 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub enum FrozenWeight {
    Dense(Vec<f32>),
    Nf4(Nf4Tensor),
}

impl FrozenWeight {
    pub fn values(&self) -> Cow<'_, [f32]> {
        match self {
            FrozenWeight::Dense(v) => Cow::Borrowed(v),
            FrozenWeight::Nf4(q) => Cow::Owned(q.dequantize()),
        }
    }

    pub fn storage_bytes(&self) -> usize {
        match self {
            FrozenWeight::Dense(v) => 4 * v.len(),
            FrozenWeight::Nf4(q) => q.storage_bytes(),
        }
    }

    fn hash_into(&self, h: &mut Sha256) {
        match self {
            FrozenWeight::Dense(v) => {
                h.update([0u8]);
                v.iter().for_each(|x| h.update(x.to_le_bytes()));
            }
            FrozenWeight::Nf4(q) => {
                h.update([4u8]);
                h.update(&q.packed);
                q.scales.iter().for_each(|x| h.update(x.to_le_bytes()));
            }
        }
    }

    fn quantize(&mut self) {
        if let FrozenWeight::Dense(v) = self {
            *self = FrozenWeight::Nf4(Nf4Tensor::quantize(v));
        }
    }
}

/// Offsets of one adapter pair inside the flat trainable vector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct LoraSlot {
    pub a: usize,
    pub b: usize,
    pub rank: usize,
}

/// Bias-free projection `y = x Wᵀ`, plus `scale · B A x` when adapted.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub name: String,
    pub inp: usize,
    pub out: usize,
    pub weight: FrozenWeight,
    pub(crate) lora: Option<LoraSlot>,
}

/// Runtime view of the trainable state shared by every linear.
#[derive(Clone, Copy)]
pub(crate) struct Ctx<'a> {
    pub adapters: &'a [f32],
    pub scale: f32,
    pub dropout: f32,
    pub bf16: bool,
}

pub(crate) struct LinearCache {
    mask: Option<Vec<f32>>,
    us: Vec<f32>,
}

pub fn bf16_round(x: f32) -> f32 {
    if !x.is_finite() {
        return x;
    }
    let bits = x.to_bits();
    let rounded = bits.wrapping_add(0x7fff + ((bits >> 16) & 1));
    f32::from_bits(rounded & 0xffff_0000)
}

impl Linear {
    fn new(name: String, inp: usize, out: usize, std: f64, rng: &mut ChaCha8Rng) -> Self {
        let dist = Normal::new(0.0, std).expect("finite std");
        let w = (0..inp * out).map(|_| dist.sample(rng) as f32).collect();
        Self { name, inp, out, weight: FrozenWeight::Dense(w), lora: None }
    }

    fn forward(&self, x: &[f32], t: usize, ctx: &Ctx<'_>, rng: Option<&mut ChaCha8Rng>) -> (Vec<f32>, Option<LinearCache>) {
        let w = self.weight.values();
        let mut y = vec![0.0f32; t * self.out];
        gemm(t, self.inp, self.out, x, false, &w, true, 0.0, &mut y);
        let mut cache = None;
        if let Some(s) = self.lora {
            let a = &ctx.adapters[s.a..s.a + s.rank * self.inp];
            let b = &ctx.adapters[s.b..s.b + self.out * s.rank];
            let mask = match rng {
                Some(rng) if ctx.dropout > 0.0 => {
                    let keep = 1.0 / (1.0 - ctx.dropout);
                    Some((0..x.len()).map(|_| if rng.random::<f32>() < ctx.dropout { 0.0 } else { keep }).collect::<Vec<f32>>())
                }
                _ => None,
            };
            let dropped: Option<Vec<f32>> = mask.as_ref().map(|m| x.iter().zip(m).map(|(v, k)| v * k).collect());
            let mut us = vec![0.0f32; t * s.rank];
            gemm(t, self.inp, s.rank, dropped.as_deref().unwrap_or(x), false, a, true, 0.0, &mut us);
            us.iter_mut().for_each(|v| *v *= ctx.scale);
            gemm(t, s.rank, self.out, &us, false, b, true, 1.0, &mut y);
            cache = Some(LinearCache { mask, us });
        }
        if ctx.bf16 {
            y.iter_mut().for_each(|v| *v = bf16_round(*v));
        }
        (y, cache)
    }

    /// Adds adapter gradients to `grads` and returns `∂L/∂x`.
    fn backward(&self, x: &[f32], t: usize, cache: Option<&LinearCache>, dy: &[f32], ctx: &Ctx<'_>, grads: &mut [f32]) -> Vec<f32> {
        let w = self.weight.values();
        let mut dx = vec![0.0f32; t * self.inp];
        gemm(t, self.out, self.inp, dy, false, &w, false, 0.0, &mut dx);
        if let (Some(s), Some(c)) = (self.lora, cache) {
            let a = &ctx.adapters[s.a..s.a + s.rank * self.inp];
            let b = &ctx.adapters[s.b..s.b + self.out * s.rank];
            gemm(self.out, t, s.rank, dy, true, &c.us, false, 1.0, &mut grads[s.b..s.b + self.out * s.rank]);
            let mut du = vec![0.0f32; t * s.rank];
            gemm(t, self.out, s.rank, dy, false, b, false, 0.0, &mut du);
            du.iter_mut().for_each(|v| *v *= ctx.scale);
            let dropped: Option<Vec<f32>> = c.mask.as_ref().map(|m| x.iter().zip(m).map(|(v, k)| v * k).collect());
            gemm(s.rank, t, self.inp, &du, true, dropped.as_deref().unwrap_or(x), false, 1.0, &mut grads[s.a..s.a + s.rank * self.inp]);
            let mut dxl = vec![0.0f32; t * self.inp];
            gemm(t, s.rank, self.inp, &du, false, a, false, 0.0, &mut dxl);
            match &c.mask {
                Some(m) => dx.iter_mut().zip(dxl.iter().zip(m)).for_each(|(d, (l, k))| *d += l * k),
                None => crate::linalg::add_assign(&mut dx, &dxl),
            }
        }
        dx
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub up: Linear,
    pub down: Linear,
}

impl Layer {
    fn linears(&self) -> [&Linear; 6] {
        [&self.q, &self.k, &self.v, &self.o, &self.up, &self.down]
    }

    fn linears_mut(&mut self) -> [&mut Linear; 6] {
        [&mut self.q, &mut self.k, &mut self.v, &mut self.o, &mut self.up, &mut self.down]
    }
}

struct LayerCache {
    n1: Vec<f32>,
    r1: Vec<f32>,
    q: Vec<f32>,
    k: Vec<f32>,
    v: Vec<f32>,
    probs: Vec<f32>,
    attn: Vec<f32>,
    lin: [Option<LinearCache>; 6],
    n2: Vec<f32>,
    r2: Vec<f32>,
    u: Vec<f32>,
    act: Vec<f32>,
}

fn rmsnorm(x: &[f32], d: usize) -> (Vec<f32>, Vec<f32>) {
    let mut y = vec![0.0f32; x.len()];
    let mut inv = Vec::with_capacity(x.len() / d);
    for (row, out) in x.chunks_exact(d).zip(y.chunks_exact_mut(d)) {
        let r = 1.0 / (dot(row, row) / d as f32 + RMS_EPS).sqrt();
        out.iter_mut().zip(row).for_each(|(o, v)| *o = v * r);
        inv.push(r);
    }
    (y, inv)
}

fn rmsnorm_backward(y: &[f32], inv: &[f32], dy: &[f32], d: usize) -> Vec<f32> {
    let mut dx = vec![0.0f32; y.len()];
    for (i, ((yr, dyr), dxr)) in y.chunks_exact(d).zip(dy.chunks_exact(d)).zip(dx.chunks_exact_mut(d)).enumerate() {
        let m = dot(yr, dyr) / d as f32;
        for j in 0..d {
            dxr[j] = inv[i] * (dyr[j] - yr[j] * m);
        }
    }
    dx
}

fn silu(x: f32) -> f32 {
    x / (1.0 + (-x).exp())
}

fn silu_grad(x: f32) -> f32 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

/// Causal multi-head attention over row-major `[t, d]` projections.
fn attention(q: &[f32], k: &[f32], v: &[f32], t: usize, d: usize, heads: usize) -> (Vec<f32>, Vec<f32>) {
    let dh = d / heads;
    let scale = 1.0 / (dh as f32).sqrt();
    let mut probs = vec![0.0f32; heads * t * t];
    let mut out = vec![0.0f32; t * d];
    for h in 0..heads {
        let off = h * dh;
        for i in 0..t {
            let qi = &q[i * d + off..i * d + off + dh];
            let row = &mut probs[(h * t + i) * t..(h * t + i + 1) * t];
            let mut max = f32::NEG_INFINITY;
            for j in 0..=i {
                row[j] = dot(qi, &k[j * d + off..j * d + off + dh]) * scale;
                max = max.max(row[j]);
            }
            let mut sum = 0.0;
            for p in row[..=i].iter_mut() {
                *p = (*p - max).exp();
                sum += *p;
            }
            let o = &mut out[i * d + off..i * d + off + dh];
            for j in 0..=i {
                row[j] /= sum;
                let vj = &v[j * d + off..j * d + off + dh];
                o.iter_mut().zip(vj).for_each(|(a, b)| *a += row[j] * b);
            }
        }
    }
    (out, probs)
}

#[allow(clippy::too_many_arguments)]
fn attention_backward(
    q: &[f32],
    k: &[f32],
    v: &[f32],
    probs: &[f32],
    dout: &[f32],
    t: usize,
    d: usize,
    heads: usize,
) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let dh = d / heads;
    let scale = 1.0 / (dh as f32).sqrt();
    let (mut dq, mut dk, mut dv) = (vec![0.0f32; t * d], vec![0.0f32; t * d], vec![0.0f32; t * d]);
    let mut dp = vec![0.0f32; t];
    for h in 0..heads {
        let off = h * dh;
        for i in 0..t {
            let p = &probs[(h * t + i) * t..(h * t + i + 1) * t];
            let doi = &dout[i * d + off..i * d + off + dh];
            let mut weighted = 0.0;
            for j in 0..=i {
                dp[j] = dot(doi, &v[j * d + off..j * d + off + dh]);
                weighted += p[j] * dp[j];
                let dvj = &mut dv[j * d + off..j * d + off + dh];
                dvj.iter_mut().zip(doi).for_each(|(a, b)| *a += p[j] * b);
            }
            for j in 0..=i {
                let ds = p[j] * (dp[j] - weighted) * scale;
                if ds == 0.0 {
                    continue;
                }
                let qi = &q[i * d + off..i * d + off + dh];
                let kj = &k[j * d + off..j * d + off + dh];
                let dqi = &mut dq[i * d + off..i * d + off + dh];
                dqi.iter_mut().zip(kj).for_each(|(a, b)| *a += ds * b);
                let dkj = &mut dk[j * d + off..j * d + off + dh];
                dkj.iter_mut().zip(qi).for_each(|(a, b)| *a += ds * b);
            }
        }
    }
    (dq, dk, dv)
}

/// Sinusoidal position code added to every input row.
fn add_positions(x: &mut [f32], d: usize) {
    for (pos, row) in x.chunks_exact_mut(d).enumerate() {
        for i in 0..d / 2 {
            let freq = (10_000f32).powf(-2.0 * i as f32 / d as f32);
            let angle = pos as f32 * freq;
            row[2 * i] += angle.sin();
            row[2 * i + 1] += angle.cos();
        }
    }
}

/// Frozen backbone plus the flat adapter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct VlmModel {
    pub base_model_id: String,
    pub config: BackboneConfig,
    pub tokenizer: WordTokenizer,
    embed: Vec<f32>,
    view_embed: Vec<f32>,
    vision: Linear,
    layers: Vec<Layer>,
    lm_head: Vec<f32>,
    pub adapter_config: Option<AdapterConfig>,
    pub adapters: Vec<f32>,
    pub precision: Precision,
}

/// Prepared image patch features for one event.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageInput {
    pub features: Vec<f32>,
}

pub(crate) struct ForwardCache {
    image: ImageInput,
    layers: Vec<LayerCache>,
    vision: Option<LinearCache>,
    nf: Vec<f32>,
    rf: Vec<f32>,
}

impl VlmModel {
    /// Seeded random stand-in for a pretrained backbone.
    pub fn stand_in(base_model_id: &str, config: BackboneConfig) -> Result<Self, VlmError> {
        config.validate()?;
        let tokenizer = tokens::default_tokenizer();
        let mut rng = crate::seed::rng(config.init_seed, &[0x1A77]);
        let (d, f, vsz) = (config.d_model, config.mlp_hidden, tokenizer.vocab_size());
        let normal = |n: usize, std: f64, rng: &mut ChaCha8Rng| -> Vec<f32> {
            let dist = Normal::new(0.0, std).expect("finite std");
            (0..n).map(|_| dist.sample(rng) as f32).collect()
        };
        let embed = normal(vsz * d, 1.0, &mut rng);
        let view_embed = normal(2 * d, 1.0, &mut rng);
        let pf = config.patch_features();
        let vision = Linear::new("vision.proj".into(), pf, d, 2.0 / (pf as f64).sqrt(), &mut rng);
        let resid = 1.0 / (2.0 * config.n_layers as f64).sqrt();
        let layers = (0..config.n_layers)
            .map(|i| {
                let n = |s: &str| format!("layers.{i}.{s}");
                let sd = 1.0 / (d as f64).sqrt();
                Layer {
                    q: Linear::new(n("attn.q"), d, d, sd, &mut rng),
                    k: Linear::new(n("attn.k"), d, d, sd, &mut rng),
                    v: Linear::new(n("attn.v"), d, d, sd, &mut rng),
                    o: Linear::new(n("attn.o"), d, d, sd * resid, &mut rng),
                    up: Linear::new(n("mlp.up"), d, f, sd, &mut rng),
                    down: Linear::new(n("mlp.down"), f, d, resid / (f as f64).sqrt(), &mut rng),
                }
            })
            .collect();
        let lm_head = normal(vsz * d, 1.0 / (d as f64).sqrt(), &mut rng);
        Ok(Self {
            base_model_id: base_model_id.to_string(),
            config,
            tokenizer,
            embed,
            view_embed,
            vision,
            layers,
            lm_head,
            adapter_config: None,
            adapters: Vec::new(),
            precision: Precision::F32,
        })
    }

    pub fn linears(&self) -> impl Iterator<Item = &Linear> {
        std::iter::once(&self.vision).chain(self.layers.iter().flat_map(|l| l.linears()))
    }

    pub(crate) fn linears_mut(&mut self) -> impl Iterator<Item = &mut Linear> {
        std::iter::once(&mut self.vision).chain(self.layers.iter_mut().flat_map(|l| l.linears_mut()))
    }

    pub fn frozen_param_count(&self) -> u64 {
        let dense = self.embed.len() + self.view_embed.len() + self.lm_head.len();
        dense as u64 + self.linears().map(|l| (l.inp * l.out) as u64).sum::<u64>()
    }

    pub fn trainable_param_count(&self) -> u64 {
        self.adapters.len() as u64
    }

    /// Bytes of frozen weight storage in their current representation.
    pub fn frozen_bytes(&self) -> usize {
        4 * (self.embed.len() + self.view_embed.len() + self.lm_head.len())
            + self.linears().map(|l| l.weight.storage_bytes()).sum::<usize>()
    }

    pub fn is_quantized(&self) -> bool {
        self.linears().any(|l| matches!(l.weight, FrozenWeight::Nf4(_)))
    }

    pub(crate) fn quantize_linears(&mut self) {
        self.linears_mut().for_each(|l| l.weight.quantize());
    }

    /// SHA-256 over every non-adapter tensor.
    pub fn base_hash(&self) -> String {
        let mut h = Sha256::new();
        for t in [&self.embed, &self.view_embed, &self.lm_head] {
            h.update((t.len() as u64).to_le_bytes());
            t.iter().for_each(|x| h.update(x.to_le_bytes()));
        }
        for l in self.linears() {
            h.update(l.name.as_bytes());
            l.weight.hash_into(&mut h);
        }
        crate::datastore::hex(&h.finalize())
    }

    pub fn image_input(&self, pair: &crate::eventgen::PixelMapPair) -> ImageInput {
        ImageInput { features: tokens::image_features(pair, &self.config) }
    }

    fn ctx(&self, training: bool) -> Ctx<'_> {
        let (scale, dropout) = match &self.adapter_config {
            Some(a) => (a.scale(), if training { a.lora_dropout as f32 } else { 0.0 }),
            None => (0.0, 0.0),
        };
        Ctx { adapters: &self.adapters, scale, dropout, bf16: self.precision == Precision::Bf16 }
    }

    fn check_tokens(&self, image: &ImageInput, tokens: &[TokenId]) -> Result<usize, VlmError> {
        let c = &self.config;
        if image.features.len() != c.image_tokens() * c.patch_features() {
            return Err(VlmError::InvalidInput("image features do not match the backbone".into()));
        }
        let t = c.image_tokens() + tokens.len();
        if t > c.max_seq_len {
            return Err(VlmError::InvalidInput(format!("sequence of {t} tokens exceeds max_seq_len {}", c.max_seq_len)));
        }
        let v = self.tokenizer.vocab_size();
        if let Some(bad) = tokens.iter().find(|&&x| x as usize >= v) {
            return Err(VlmError::InvalidInput(format!("token {bad} outside vocabulary of {v}")));
        }
        Ok(t)
    }

    fn embed_inputs(&self, image: &ImageInput, tokens: &[TokenId], ctx: &Ctx<'_>, rng: Option<&mut ChaCha8Rng>) -> (Vec<f32>, Option<LinearCache>) {
        let d = self.config.d_model;
        let n_img = self.config.image_tokens();
        let (mut x, cache) = self.vision.forward(&image.features, n_img, ctx, rng);
        let per_view = self.config.patches_per_view();
        for (i, row) in x.chunks_exact_mut(d).enumerate() {
            let view = &self.view_embed[(i / per_view) * d..(i / per_view + 1) * d];
            crate::linalg::add_assign(row, view);
        }
        for &tok in tokens {
            x.extend_from_slice(&self.embed[tok as usize * d..(tok as usize + 1) * d]);
        }
        add_positions(&mut x, d);
        (x, cache)
    }

    fn forward(
        &self,
        image: &ImageInput,
        tokens: &[TokenId],
        ctx: &Ctx<'_>,
        mut rng: Option<&mut ChaCha8Rng>,
        keep: bool,
    ) -> Result<(Vec<f32>, Option<ForwardCache>), VlmError> {
        let t = self.check_tokens(image, tokens)?;
        let (d, heads) = (self.config.d_model, self.config.n_heads);
        let (mut x, vision_cache) = self.embed_inputs(image, tokens, ctx, rng.as_deref_mut());
        let mut caches = Vec::new();
        for layer in &self.layers {
            let (n1, r1) = rmsnorm(&x, d);
            let (q, cq) = layer.q.forward(&n1, t, ctx, rng.as_deref_mut());
            let (k, ck) = layer.k.forward(&n1, t, ctx, rng.as_deref_mut());
            let (v, cv) = layer.v.forward(&n1, t, ctx, rng.as_deref_mut());
            let (attn, probs) = attention(&q, &k, &v, t, d, heads);
            let (o, co) = layer.o.forward(&attn, t, ctx, rng.as_deref_mut());
            let mut x1 = x;
            crate::linalg::add_assign(&mut x1, &o);
            let (n2, r2) = rmsnorm(&x1, d);
            let (u, cu) = layer.up.forward(&n2, t, ctx, rng.as_deref_mut());
            let act: Vec<f32> = u.iter().map(|&z| silu(z)).collect();
            let (m, cd) = layer.down.forward(&act, t, ctx, rng.as_deref_mut());
            let mut x2 = x1;
            crate::linalg::add_assign(&mut x2, &m);
            if keep {
                caches.push(LayerCache { n1, r1, q, k, v, probs, attn, lin: [cq, ck, cv, co, cu, cd], n2, r2, u, act });
            }
            x = x2;
        }
        let (nf, rf) = rmsnorm(&x, d);
        let vsz = self.tokenizer.vocab_size();
        let mut logits = vec![0.0f32; t * vsz];
        gemm(t, d, vsz, &nf, false, &self.lm_head, true, 0.0, &mut logits);
        let cache =
            keep.then(|| ForwardCache { image: image.clone(), layers: caches, vision: vision_cache, nf, rf });
        Ok((logits, cache))
    }

    /// Next-token log-probabilities after `image ++ tokens`.
    pub fn next_token_logp(&self, image: &ImageInput, tokens: &[TokenId]) -> Result<Vec<f64>, VlmError> {
        let ctx = self.ctx(false);
        let (logits, _) = self.forward(image, tokens, &ctx, None, false)?;
        let v = self.tokenizer.vocab_size();
        Ok(crate::linalg::log_softmax(&logits[logits.len() - v..]))
    }

    /// Summed cross-entropy over masked positions, with `weight ·` its
    /// adapter gradient added to `grads`. `mask[i]` marks `tokens[i]` as a
    /// supervised target. Returns the loss sum and target count.
    pub fn accumulate_gradient(
        &self,
        image: &ImageInput,
        tokens: &[TokenId],
        mask: &[bool],
        weight: f32,
        dropout_seed: Option<u64>,
        grads: &mut [f32],
    ) -> Result<(f64, usize), VlmError> {
        if mask.len() != tokens.len() {
            return Err(VlmError::InvalidInput("loss mask length differs from token count".into()));
        }
        if grads.len() != self.adapters.len() {
            return Err(VlmError::InvalidInput("gradient buffer does not match adapter count".into()));
        }
        let n_targets = mask.iter().skip(1).filter(|m| **m).count();
        if n_targets == 0 {
            return Ok((0.0, 0));
        }
        let ctx = self.ctx(dropout_seed.is_some());
        let mut rng = dropout_seed.map(|s| crate::seed::rng(s, &[0x10BA]));
        let (logits, cache) = self.forward(image, tokens, &ctx, rng.as_mut(), true)?;
        let cache = cache.expect("cache requested");
        let (d, vsz) = (self.config.d_model, self.tokenizer.vocab_size());
        let n_img = self.config.image_tokens();
        let t = n_img + tokens.len();
        let mut dlogits = vec![0.0f32; t * vsz];
        let mut loss = 0.0;
        for i in 1..tokens.len() {
            if !mask[i] {
                continue;
            }
            // Position n_img + i - 1 predicts tokens[i].
            let row = n_img + i - 1;
            let lp = crate::linalg::log_softmax(&logits[row * vsz..(row + 1) * vsz]);
            loss -= lp[tokens[i] as usize];
            let dr = &mut dlogits[row * vsz..(row + 1) * vsz];
            for (j, g) in dr.iter_mut().enumerate() {
                let target = if j == tokens[i] as usize { 1.0 } else { 0.0 };
                *g = weight * (lp[j].exp() - target) as f32;
            }
        }
        let mut dnf = vec![0.0f32; t * d];
        gemm(t, vsz, d, &dlogits, false, &self.lm_head, false, 0.0, &mut dnf);
        let mut dx = rmsnorm_backward(&cache.nf, &cache.rf, &dnf, d);
        for (layer, c) in self.layers.iter().zip(&cache.layers).rev() {
            dx = self.layer_backward(layer, c, dx, t, &ctx, grads);
        }
        if self.vision.lora.is_some() {
            let d_img = &dx[..n_img * d];
            self.vision.backward(&cache.image.features, n_img, cache.vision.as_ref(), d_img, &ctx, grads);
        }
        Ok((loss, n_targets))
    }

    fn layer_backward(&self, layer: &Layer, c: &LayerCache, dx2: Vec<f32>, t: usize, ctx: &Ctx<'_>, grads: &mut [f32]) -> Vec<f32> {
        let (d, heads) = (self.config.d_model, self.config.n_heads);
        let dact = layer.down.backward(&c.act, t, c.lin[5].as_ref(), &dx2, ctx, grads);
        let du: Vec<f32> = dact.iter().zip(&c.u).map(|(g, &z)| g * silu_grad(z)).collect();
        let dn2 = layer.up.backward(&c.n2, t, c.lin[4].as_ref(), &du, ctx, grads);
        let mut dx1 = dx2;
        crate::linalg::add_assign(&mut dx1, &rmsnorm_backward(&c.n2, &c.r2, &dn2, d));
        let dattn = layer.o.backward(&c.attn, t, c.lin[3].as_ref(), &dx1, ctx, grads);
        let (dq, dk, dv) = attention_backward(&c.q, &c.k, &c.v, &c.probs, &dattn, t, d, heads);
        let mut dn1 = layer.q.backward(&c.n1, t, c.lin[0].as_ref(), &dq, ctx, grads);
        crate::linalg::add_assign(&mut dn1, &layer.k.backward(&c.n1, t, c.lin[1].as_ref(), &dk, ctx, grads));
        crate::linalg::add_assign(&mut dn1, &layer.v.backward(&c.n1, t, c.lin[2].as_ref(), &dv, ctx, grads));
        let mut dx = dx1;
        crate::linalg::add_assign(&mut dx, &rmsnorm_backward(&c.n1, &c.r1, &dn1, d));
        dx
    }

    /// Rough peak host memory for training with `batch` sequences in flight.
    pub fn training_memory_mb(&self, seq_len: usize, batch: usize) -> f64 {
        let c = &self.config;
        let (t, d, f) = (seq_len as f64, c.d_model as f64, c.mlp_hidden as f64);
        let per_layer = t * (12.0 * d + 3.0 * f) + c.n_heads as f64 * t * t;
        let activations = c.n_layers as f64 * per_layer + t * self.tokenizer.vocab_size() as f64 * 2.0;
        let adapter_state = 4.0 * self.adapters.len() as f64;
        (self.frozen_bytes() as f64 + 4.0 * (adapter_state + batch as f64 * activations)) / (1024.0 * 1024.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub fn small_config() -> BackboneConfig {
        BackboneConfig { d_model: 32, n_layers: 2, n_heads: 4, mlp_hidden: 64, pool_grid: 4, patch_cells: 2, max_seq_len: 256, init_seed: 3 }
    }

    #[test]
    fn bf16_rounding() {
        assert_eq!(bf16_round(1.0), 1.0);
        assert_eq!(bf16_round(1.0 + 1.0 / 512.0), 1.0);
        assert_eq!(bf16_round(1.0 + 3.0 / 256.0), 1.0 + 1.0 / 64.0);
        assert!(bf16_round(f32::NAN).is_nan());
    }

    #[test]
    fn attention_is_causal() {
        let (t, d) = (5, 8);
        let q: Vec<f32> = (0..t * d).map(|i| (i as f32 * 0.37).sin()).collect();
        let k: Vec<f32> = (0..t * d).map(|i| (i as f32 * 0.11).cos()).collect();
        let mut v: Vec<f32> = (0..t * d).map(|i| (i as f32 * 0.05).sin()).collect();
        let (a, p) = attention(&q, &k, &v, t, d, 2);
        v[(t - 1) * d..].iter_mut().for_each(|x| *x += 10.0);
        let (b, _) = attention(&q, &k, &v, t, d, 2);
        assert_eq!(a[..(t - 1) * d], b[..(t - 1) * d]);
        for row in p.chunks_exact(t) {
            assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn base_hash_changes_with_weights_and_quantization() {
        let mut m = VlmModel::stand_in("x", small_config()).unwrap();
        let h = m.base_hash();
        assert_eq!(h, VlmModel::stand_in("x", small_config()).unwrap().base_hash());
        m.quantize_linears();
        assert!(m.is_quantized());
        assert_ne!(h, m.base_hash());
    }

    fn adapted_small() -> VlmModel {
        let cfg = AdapterConfig { lora_rank: 2, lora_alpha: 4.0, trainable_fraction_max: 1.0, ..Default::default() };
        let mut m = crate::vlm::attach_adapters_to(VlmModel::stand_in("x", small_config()).unwrap(), &cfg).unwrap();
        // Non-zero B so that gradients reach A as well.
        let n = m.adapters.len();
        m.adapters.iter_mut().enumerate().for_each(|(i, a)| *a += 0.05 * ((i * 7 % 13) as f32 / 13.0 - 0.5));
        assert_eq!(m.adapters.len(), n);
        m
    }

    fn sample_input(m: &VlmModel) -> (ImageInput, Vec<TokenId>, Vec<bool>) {
        let n = m.config.image_tokens() * m.config.patch_features();
        let image = ImageInput { features: (0..n).map(|i| ((i as f32) * 0.31).sin().abs()).collect() };
        let tokens: Vec<TokenId> = (0..12).map(|i| (i * 5 % m.tokenizer.vocab_size()) as TokenId).collect();
        let mask: Vec<bool> = (0..12).map(|i| i >= 8).collect();
        (image, tokens, mask)
    }

    #[test]
    fn adapter_gradient_matches_finite_difference() {
        let m = adapted_small();
        let (image, tokens, mask) = sample_input(&m);
        let mut g = vec![0.0f32; m.adapters.len()];
        let (loss, n) = m.accumulate_gradient(&image, &tokens, &mask, 1.0, None, &mut g).unwrap();
        assert_eq!(n, 4);
        assert!(loss.is_finite());
        let eps = 1e-3f32;
        let loss_with = |i: usize, delta: f32| {
            let mut mm = m.clone();
            mm.adapters[i] += delta;
            let mut sink = vec![0.0f32; mm.adapters.len()];
            mm.accumulate_gradient(&image, &tokens, &mask, 1.0, None, &mut sink).unwrap().0
        };
        let step = m.adapters.len() / 17;
        for i in (0..m.adapters.len()).step_by(step) {
            let numeric = (loss_with(i, eps) - loss_with(i, -eps)) / (2.0 * eps as f64);
            let analytic = g[i] as f64;
            assert!((numeric - analytic).abs() < 2e-2 * numeric.abs().max(analytic.abs()) + 2e-3, "{i}: {numeric} vs {analytic}");
        }
    }

    #[test]
    fn zero_b_adapters_leave_outputs_unchanged() {
        let base = VlmModel::stand_in("x", small_config()).unwrap();
        let cfg = AdapterConfig { lora_rank: 2, trainable_fraction_max: 1.0, ..Default::default() };
        let adapted = crate::vlm::attach_adapters_to(base.clone(), &cfg).unwrap();
        let (image, tokens, _) = sample_input(&base);
        assert_eq!(base.next_token_logp(&image, &tokens).unwrap(), adapted.next_token_logp(&image, &tokens).unwrap());
    }

    #[test]
    fn masked_out_sequence_has_zero_loss_and_gradient() {
        let m = adapted_small();
        let (image, tokens, _) = sample_input(&m);
        let mut g = vec![0.0f32; m.adapters.len()];
        let (loss, n) = m.accumulate_gradient(&image, &tokens, &[false; 12], 1.0, Some(1), &mut g).unwrap();
        assert_eq!((loss, n), (0.0, 0));
        assert!(g.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn next_token_distribution_is_normalized() {
        let m = adapted_small();
        let (image, tokens, _) = sample_input(&m);
        let lp = m.next_token_logp(&image, &tokens).unwrap();
        let lse = lp.iter().map(|v| v.exp()).sum::<f64>().ln();
        assert!(lse.abs() < 1e-9);
        let too_long = vec![0; m.config.max_seq_len];
        assert!(m.next_token_logp(&image, &too_long).is_err());
    }
}
