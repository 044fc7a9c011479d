//! Two-resolution U-Net predicting ε in latent space, conditioned on text
//! through cross-attention blocks (each followed by a feed-forward block).

use serde::{Deserialize, Serialize};

use super::text::TextEmbedding;
use super::{add_conv, add_linear, add_norm, conv, norm_act, View};
use crate::diffusion::EpsModel;
use crate::error::{contract_err, dim_err, Result};
use crate::lora::{bind_adapters, effective_weight, LoraAdapter, LoraBinding};
use crate::rng::Stream;
use crate::tensor::{ParamStore, Tape, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnetConfig {
    pub latent_channels: usize,
    pub channels: [usize; 2],
    pub text_dim: usize,
    /// Width of the learned per-token text projection feeding K and V.
    pub context_dim: usize,
    pub attn_dim: usize,
    pub timesteps: usize,
}

impl Default for UnetConfig {
    fn default() -> Self {
        Self { latent_channels: 4, channels: [16, 32], text_dim: 32, context_dim: 32, attn_dim: 32, timesteps: 100 }
    }
}

impl UnetConfig {
    pub fn time_dim(&self) -> usize {
        4 * self.channels[0]
    }
}

/// Names of the cross-attention blocks, outermost first.
pub const ATTN_BLOCKS: [&str; 3] = ["xattn1", "xattn2", "xattn3"];

#[derive(Clone, Debug)]
pub struct Unet {
    pub config: UnetConfig,
    pub params: ParamStore,
}

fn add_resblock(p: &mut ParamStore, n: &str, cin: usize, cout: usize, tdim: usize, rng: &mut Stream) -> Result<()> {
    add_norm(p, &format!("{n}.n1"), cin)?;
    add_conv(p, &format!("{n}.c1"), cin, cout, 3, rng)?;
    add_linear(p, &format!("{n}.t"), tdim, cout, true, rng)?;
    add_norm(p, &format!("{n}.n2"), cout)?;
    add_conv(p, &format!("{n}.c2"), cout, cout, 3, rng)?;
    if cin != cout {
        add_conv(p, &format!("{n}.skip"), cin, cout, 1, rng)?;
    }
    Ok(())
}

/// Register the weights of one cross-attention block over `c` visual channels.
pub fn add_attention(p: &mut ParamStore, n: &str, c: usize, context_dim: usize, attn_dim: usize, rng: &mut Stream) -> Result<()> {
    add_linear(p, &format!("{n}.q"), c, attn_dim, false, rng)?;
    add_linear(p, &format!("{n}.k"), context_dim, attn_dim, false, rng)?;
    add_linear(p, &format!("{n}.v"), context_dim, attn_dim, false, rng)?;
    add_linear(p, &format!("{n}.o"), attn_dim, c, false, rng)?;
    add_linear(p, &format!("{n}.ff1"), c, 4 * c, true, rng)?;
    add_linear(p, &format!("{n}.ff2"), 4 * c, c, true, rng)?;
    Ok(())
}

/// Sinusoidal features of integer timesteps, `[B, dim]`.
pub fn timestep_features(t: &[usize], dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(t.len() * dim);
    for &step in t {
        let freqs = (0..half).map(|i| (-(10_000f64.ln()) * i as f64 / half as f64).exp() * step as f64);
        let f: Vec<f64> = freqs.collect();
        out.extend(f.iter().map(|x| x.sin()));
        out.extend(f.iter().map(|x| x.cos()));
        out.extend(std::iter::repeat_n(0.0, dim - 2 * half));
    }
    out
}

/// Tape values produced by one cross-attention block.
pub struct Attended {
    /// Block output after the feed-forward residual, `[B·N, C]`.
    pub out: Var,
    /// Visual input plus attention output, before the feed-forward block.
    pub attended: Var,
    /// Attention weights per sample, `[N, L_b]`.
    pub weights: Vec<Var>,
}

/// Cross-attention over visual rows `h: [B·N, C]` (N rows per sample) against
/// projected text tokens `ctx: [ΣL, D_ctx]`, where sample b owns rows
/// `spans[b] = (start, len)`. Computes `h + O(softmax(QKᵀ/√d)·V)` followed by
/// `+ FF(·)` with a GELU feed-forward of expansion 4.
#[allow(clippy::too_many_arguments)]
pub fn cross_attention(
    tape: &mut Tape,
    p: &View,
    lora: &LoraBinding,
    name: &str,
    h: Var,
    rows_per_sample: usize,
    ctx: Var,
    spans: &[(usize, usize)],
) -> Result<Attended> {
    let c = Ctx { p, lora };
    let n = name;
    let hw = rows_per_sample;
    if tape.shape(h)[0] != hw * spans.len() {
        return dim_err(format!("{} visual rows for {} samples of {hw}", tape.shape(h)[0], spans.len()));
    }
    let q = c.linear(tape, &format!("{n}.q"), h, false)?;
    let k = c.linear(tape, &format!("{n}.k"), ctx, false)?;
    let v = c.linear(tape, &format!("{n}.v"), ctx, false)?;
    let inv = 1.0 / (tape.shape(q)[1] as f64).sqrt();
    let mut outs = Vec::with_capacity(spans.len());
    let mut weights = Vec::with_capacity(spans.len());
    for (i, &(start, len)) in spans.iter().enumerate() {
        let qi = tape.narrow(q, 0, i * hw, hw)?;
        let ki = tape.narrow(k, 0, start, len)?;
        let vi = tape.narrow(v, 0, start, len)?;
        let s = tape.matmul_t(qi, false, ki, true)?;
        let s = tape.scale(s, inv)?;
        let a = tape.softmax(s, 1)?;
        weights.push(a);
        outs.push(tape.matmul(a, vi)?);
    }
    let o = if outs.len() == 1 { outs[0] } else { tape.concat(&outs, 0)? };
    let o = c.linear(tape, &format!("{n}.o"), o, false)?;
    let attended = tape.add(h, o)?;
    let f = c.linear(tape, &format!("{n}.ff1"), attended, true)?;
    let f = tape.gelu(f)?;
    let f = c.linear(tape, &format!("{n}.ff2"), f, true)?;
    let out = tape.add(attended, f)?;
    Ok(Attended { out, attended, weights })
}

struct Ctx<'a> {
    p: &'a View<'a>,
    lora: &'a LoraBinding,
}

impl Ctx<'_> {
    fn weight(&self, tape: &mut Tape, name: &str) -> Result<Var> {
        let wname = format!("{name}.w");
        effective_weight(tape, self.p.v(&wname), self.lora.get(&wname))
    }

    fn linear(&self, tape: &mut Tape, name: &str, x: Var, bias: bool) -> Result<Var> {
        let w = self.weight(tape, name)?;
        let b = if bias { Some(self.p.v(&format!("{name}.b"))) } else { None };
        tape.linear(x, w, b)
    }
}

impl Unet {
    pub fn new(config: UnetConfig, seed: u64) -> Result<Self> {
        let mut rng = Stream::child(seed, "unet-init");
        let [c0, c1] = config.channels;
        let td = config.time_dim();
        let mut p = ParamStore::new();
        add_linear(&mut p, "ctx", config.text_dim, config.context_dim, false, &mut rng)?;
        add_linear(&mut p, "time.l1", c0, td, true, &mut rng)?;
        add_linear(&mut p, "time.l2", td, td, true, &mut rng)?;
        add_conv(&mut p, "conv_in", config.latent_channels, c0, 3, &mut rng)?;
        add_resblock(&mut p, "res1", c0, c0, td, &mut rng)?;
        add_attention(&mut p, "xattn1", c0, config.context_dim, config.attn_dim, &mut rng)?;
        add_conv(&mut p, "down", c0, c1, 3, &mut rng)?;
        add_resblock(&mut p, "res2", c1, c1, td, &mut rng)?;
        add_attention(&mut p, "xattn2", c1, config.context_dim, config.attn_dim, &mut rng)?;
        add_conv(&mut p, "up", c1, c0, 3, &mut rng)?;
        add_resblock(&mut p, "res3", 2 * c0, c0, td, &mut rng)?;
        add_attention(&mut p, "xattn3", c0, config.context_dim, config.attn_dim, &mut rng)?;
        add_norm(&mut p, "out.n", c0)?;
        add_conv(&mut p, "out.c", c0, config.latent_channels, 3, &mut rng)?;
        Ok(Self { config, params: p })
    }

    /// Default LoRA targets: the key and value projections of every cross-attention block.
    pub fn kv_targets() -> Vec<String> {
        ATTN_BLOCKS.iter().flat_map(|b| [format!("{b}.k.w"), format!("{b}.v.w")]).collect()
    }

    /// Every linear weight inside the cross-attention blocks.
    pub fn attention_targets() -> Vec<String> {
        ATTN_BLOCKS
            .iter()
            .flat_map(|b| ["q", "k", "v", "o", "ff1", "ff2"].map(|l| format!("{b}.{l}.w")))
            .collect()
    }

    fn resblock(&self, tape: &mut Tape, c: &Ctx, n: &str, x: Var, temb: Var) -> Result<Var> {
        let h = norm_act(tape, c.p, &format!("{n}.n1"), x)?;
        let h = conv(tape, c.p, &format!("{n}.c1"), h)?;
        let te = tape.silu(temb)?;
        let te = c.linear(tape, &format!("{n}.t"), te, true)?;
        let h = tape.add_batch_channel(h, te)?;
        let h = norm_act(tape, c.p, &format!("{n}.n2"), h)?;
        let h = conv(tape, c.p, &format!("{n}.c2"), h)?;
        let skip = if self.params.id(&format!("{n}.skip.w")).is_some() { conv(tape, c.p, &format!("{n}.skip"), x)? } else { x };
        tape.add(skip, h)
    }

    fn attention(&self, tape: &mut Tape, c: &Ctx, n: &str, x: Var, ctx: Var, spans: &[(usize, usize)]) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        let (b, ch, hw) = (shape[0], shape[1], shape[2] * shape[3]);
        let h = tape.reshape(x, &[b, ch, hw])?;
        let h = tape.swap_last2(h)?;
        let h = tape.reshape(h, &[b * hw, ch])?;
        let out = cross_attention(tape, c.p, c.lora, n, h, hw, ctx, spans)?;
        let h = tape.reshape(out.out, &[b, hw, ch])?;
        let h = tape.swap_last2(h)?;
        tape.reshape(h, &shape)
    }

    /// ε̂ for `x: [B, C_z, H, W]` (H, W even), one timestep and text embedding per sample.
    pub fn forward(&self, tape: &mut Tape, p: &View, lora: &LoraBinding, x: Var, t: &[usize], text: &[TextEmbedding]) -> Result<Var> {
        let cfg = &self.config;
        let shape = tape.shape(x).to_vec();
        let batch = match shape.as_slice() {
            [b, c, h, w] if *c == cfg.latent_channels && h % 2 == 0 && w % 2 == 0 => *b,
            s => return dim_err(format!("U-Net input {s:?} must be [B, {}, H, W] with even H, W", cfg.latent_channels)),
        };
        if t.len() != batch || text.len() != batch {
            return dim_err(format!("batch {batch} with {} timesteps and {} texts", t.len(), text.len()));
        }
        if let Some(bad) = t.iter().find(|&&s| s == 0 || s > cfg.timesteps) {
            return contract_err(format!("timestep {bad} outside 1..={}", cfg.timesteps));
        }
        let c = Ctx { p, lora };

        let mut rows = Vec::new();
        let mut spans = Vec::with_capacity(batch);
        for e in text {
            if e.dim() != cfg.text_dim {
                return dim_err(format!("text dim {} vs configured {}", e.dim(), cfg.text_dim));
            }
            spans.push((rows.len() / cfg.text_dim, e.len()));
            rows.extend_from_slice(e.tokens.data());
        }
        let total = rows.len() / cfg.text_dim;
        let tokens = tape.constant(&[total, cfg.text_dim], rows)?;
        let ctx = c.linear(tape, "ctx", tokens, false)?;

        let c0 = cfg.channels[0];
        let tf = tape.constant(&[batch, c0], timestep_features(t, c0))?;
        let temb = c.linear(tape, "time.l1", tf, true)?;
        let temb = tape.silu(temb)?;
        let temb = c.linear(tape, "time.l2", temb, true)?;

        let h = conv(tape, p, "conv_in", x)?;
        let h = self.resblock(tape, &c, "res1", h, temb)?;
        let skip = self.attention(tape, &c, "xattn1", h, ctx, &spans)?;
        let h = conv(tape, p, "down", skip)?;
        let h = tape.avg_pool2x(h)?;
        let h = self.resblock(tape, &c, "res2", h, temb)?;
        let h = self.attention(tape, &c, "xattn2", h, ctx, &spans)?;
        let h = tape.upsample2x(h)?;
        let h = conv(tape, p, "up", h)?;
        let h = tape.concat(&[h, skip], 1)?;
        let h = self.resblock(tape, &c, "res3", h, temb)?;
        let h = self.attention(tape, &c, "xattn3", h, ctx, &spans)?;
        let h = norm_act(tape, p, "out.n", h)?;
        conv(tape, p, "out.c", h)
    }
}

/// A U-Net (optionally with adapters) as a stateless noise predictor for sampling.
pub struct UnetSampler<'a> {
    pub unet: &'a Unet,
    pub adapters: &'a [LoraAdapter],
}

impl EpsModel<TextEmbedding> for UnetSampler<'_> {
    fn predict(&mut self, tape: &mut Tape, x_t: Var, t: &[usize], cond: &[TextEmbedding]) -> Result<Var> {
        let binding = self.unet.params.bind(tape);
        let view = View::new(&self.unet.params, &binding);
        let lora = bind_adapters(self.adapters, tape);
        self.unet.forward(tape, &view, &lora, x_t, t, cond)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::text::TextEncoder;
    use crate::tensor::Tensor;

    fn run(unet: &Unet, x: &Tensor, t: &[usize], text: &[TextEmbedding]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let b = unet.params.bind(&mut tape);
        let view = View::new(&unet.params, &b);
        let xv = tape.constant(x.shape(), x.data().to_vec())?;
        let y = unet.forward(&mut tape, &view, &LoraBinding::empty(), xv, t, text)?;
        Ok(tape.to_tensor(y))
    }

    #[test]
    fn output_shape_matches_input() {
        let unet = Unet::new(UnetConfig::default(), 1).unwrap();
        let enc = TextEncoder::new(1);
        let x = Tensor::randn(&[2, 4, 8, 8], 1.0, &mut Stream::new(2));
        let y = run(&unet, &x, &[3, 90], &[enc.encode("a polyp"), enc.null()]).unwrap();
        assert_eq!(y.shape(), x.shape());
    }

    #[test]
    fn timestep_out_of_range() {
        let unet = Unet::new(UnetConfig::default(), 1).unwrap();
        let x = Tensor::zeros(&[1, 4, 8, 8]);
        let e = TextEncoder::new(1).encode("x");
        assert!(matches!(run(&unet, &x, &[0], &[e.clone()]), Err(crate::Error::Contract(_))));
        assert!(matches!(run(&unet, &x, &[101], &[e]), Err(crate::Error::Contract(_))));
    }

    #[test]
    fn timestep_features_start_with_sin_cos() {
        let f = timestep_features(&[0, 1], 4);
        assert_eq!(&f[..4], &[0.0, 0.0, 1.0, 1.0]);
        assert!((f[4] - 1f64.sin()).abs() < 1e-15);
    }
}
