//! Noise schedules, forward noising, the ε-prediction objective, ancestral
//! sampling and classifier-free guidance.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{config_err, contract_err, dim_err, Result};
use crate::rng::Stream;
use crate::tensor::{Tape, Tensor, Var};

/// Reference linear schedule used to calibrate shorter schedules.
pub const REFERENCE_STEPS: usize = 1000;
pub const REFERENCE_BETA_START: f64 = 1e-4;
pub const REFERENCE_BETA_END: f64 = 0.02;
pub const DEFAULT_STEPS: usize = 100;
const COSINE_OFFSET: f64 = 0.008;
const COSINE_MAX_BETA: f64 = 0.999;

/// Per-step β, α and ᾱ tables for `t ∈ 1..=T` (stored at index `t − 1`).
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    fn from_betas(betas: Vec<f64>) -> Self {
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(alphas.len());
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        Self { betas, alphas, alpha_bars }
    }

    /// β linearly interpolated from `beta_start` to `beta_end`, both inclusive.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return config_err("schedule needs at least one step");
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return config_err(format!("need 0 < beta_start <= beta_end < 1, got {beta_start}..{beta_end}"));
        }
        let betas = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        Ok(Self::from_betas(betas))
    }

    /// Linear schedule over `steps` whose final ᾱ equals that of the
    /// 1000-step 1e-4..0.02 reference. Both endpoints are multiplied by a
    /// common factor found by bisection.
    pub fn linear_matched(steps: usize) -> Result<Self> {
        let target = Self::linear(REFERENCE_STEPS, REFERENCE_BETA_START, REFERENCE_BETA_END)?.final_alpha_bar();
        let final_bar = |c: f64| -> f64 {
            (0..steps)
                .map(|i| {
                    let f = if steps == 1 { 0.0 } else { i as f64 / (steps - 1) as f64 };
                    1.0 - c * (REFERENCE_BETA_START + (REFERENCE_BETA_END - REFERENCE_BETA_START) * f)
                })
                .product()
        };
        let mut lo = 0.0;
        let mut hi = (1.0 - 1e-9) / REFERENCE_BETA_END;
        if final_bar(hi) > target {
            return config_err(format!("{steps} steps cannot reach the reference signal level"));
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if final_bar(mid) > target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let c = 0.5 * (lo + hi);
        Self::linear(steps, c * REFERENCE_BETA_START, c * REFERENCE_BETA_END)
    }

    /// Cosine schedule: ᾱ follows f(t)/f(0) with f(t) = cos²(((t/T + s)/(1 + s))·π/2),
    /// each β clipped at 0.999 and ᾱ rebuilt as the product of the clipped α.
    pub fn cosine(steps: usize) -> Result<Self> {
        if steps == 0 {
            return config_err("schedule needs at least one step");
        }
        let f = |t: usize| {
            let x = (t as f64 / steps as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET) * std::f64::consts::FRAC_PI_2;
            x.cos().powi(2)
        };
        let betas = (1..=steps).map(|t| (1.0 - f(t) / f(t - 1)).min(COSINE_MAX_BETA)).collect();
        Ok(Self::from_betas(betas))
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    /// ᾱ_t, with ᾱ_0 = 1.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    pub fn final_alpha_bar(&self) -> f64 {
        *self.alpha_bars.last().expect("non-empty")
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    /// β̃_t = β_t·(1 − ᾱ_{t−1})/(1 − ᾱ_t).
    pub fn posterior_variance(&self, t: usize) -> f64 {
        self.beta(t) * (1.0 - self.alpha_bar(t - 1)) / (1.0 - self.alpha_bar(t))
    }

    /// CSV with columns `t,beta,alpha,alpha_bar`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("t,beta,alpha,alpha_bar\n");
        for t in 1..=self.steps() {
            writeln!(s, "{t},{:e},{:e},{:e}", self.beta(t), self.alpha(t), self.alpha_bar(t)).expect("string write");
        }
        s
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

/// Sampling-time guidance scale and training-time condition dropout.
/// Dropped conditions are replaced by the null prompt's embedding.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GuidanceConfig {
    pub scale: f64,
    pub drop_probability: f64,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self { scale: 3.0, drop_probability: 0.1 }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.scale >= 0.0 && self.scale.is_finite()) {
            return config_err(format!("guidance scale {} must be a finite non-negative number", self.scale));
        }
        if !(0.0..=1.0).contains(&self.drop_probability) {
            return config_err(format!("drop probability {} outside [0, 1]", self.drop_probability));
        }
        Ok(())
    }
}

/// √ᾱ_t·x0 + √(1−ᾱ_t)·noise. `t = 0` returns `x0`.
pub fn q_sample(x0: &Tensor, t: usize, noise: &Tensor, schedule: &NoiseSchedule) -> Result<Tensor> {
    if x0.shape() != noise.shape() {
        return dim_err(format!("noise shape {:?} differs from x0 shape {:?}", noise.shape(), x0.shape()));
    }
    if t > schedule.steps() {
        return contract_err(format!("timestep {t} outside 0..={}", schedule.steps()));
    }
    let ab = schedule.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    let data = x0.data().iter().zip(noise.data()).map(|(x, n)| a * x + b * n).collect();
    Tensor::new(x0.shape().to_vec(), data)
}

/// `eps_uncond + scale·(eps_cond − eps_uncond)`; scales 0 and 1 return the
/// respective input unchanged.
pub fn cfg_combine(eps_uncond: &Tensor, eps_cond: &Tensor, scale: f64) -> Result<Tensor> {
    if eps_uncond.shape() != eps_cond.shape() {
        return dim_err(format!("guidance inputs {:?} and {:?}", eps_uncond.shape(), eps_cond.shape()));
    }
    if scale == 1.0 {
        return Ok(eps_cond.clone());
    }
    if scale == 0.0 {
        return Ok(eps_uncond.clone());
    }
    Ok(Tensor::new(eps_uncond.shape().to_vec(), cfg_values(eps_uncond.data(), eps_cond.data(), scale))?)
}

fn cfg_values(u: &[f64], c: &[f64], scale: f64) -> Vec<f64> {
    if scale == 1.0 {
        return c.to_vec();
    }
    if scale == 0.0 {
        return u.to_vec();
    }
    u.iter().zip(c).map(|(u, c)| u + scale * (c - u)).collect()
}

/// Noise predictor over a batch: `(tape, x_t [B, ...], t per sample, condition per sample) → ε̂`.
pub trait EpsModel<C> {
    fn predict(&mut self, tape: &mut Tape, x_t: Var, t: &[usize], cond: &[C]) -> Result<Var>;
}

impl<C, F> EpsModel<C> for F
where
    F: FnMut(&mut Tape, Var, &[usize], &[C]) -> Result<Var>,
{
    fn predict(&mut self, tape: &mut Tape, x_t: Var, t: &[usize], cond: &[C]) -> Result<Var> {
        self(tape, x_t, t, cond)
    }
}

/// What a call to [`eps_loss`] drew, for logging and tests.
#[derive(Clone, Debug)]
pub struct EpsDraw {
    pub timesteps: Vec<usize>,
    pub dropped: Vec<bool>,
}

/// ε-prediction loss over a batch `x0: [B, ...]`. Per sample: t uniform in
/// 1..=T, ε standard normal, condition replaced by `null` with probability
/// `drop_probability`. Returns mean((ε − ε̂)²) over all entries.
#[allow(clippy::too_many_arguments)]
pub fn eps_loss<C: Clone, M: EpsModel<C>>(
    tape: &mut Tape,
    model: &mut M,
    x0: &Tensor,
    conds: &[C],
    null: &C,
    schedule: &NoiseSchedule,
    drop_probability: f64,
    rng: &mut Stream,
) -> Result<(Var, EpsDraw)> {
    let batch = x0.shape()[0];
    if conds.len() != batch {
        return dim_err(format!("{} conditions for a batch of {batch}", conds.len()));
    }
    let per = x0.numel() / batch;
    let mut noisy = Vec::with_capacity(x0.numel());
    let mut eps = Vec::with_capacity(x0.numel());
    let mut timesteps = Vec::with_capacity(batch);
    let mut dropped = Vec::with_capacity(batch);
    let mut used = Vec::with_capacity(batch);
    for (b, cond) in conds.iter().enumerate() {
        let t = rng.range_inclusive(1, schedule.steps());
        let ab = schedule.alpha_bar(t);
        let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
        for &x in &x0.data()[b * per..(b + 1) * per] {
            let e = rng.normal();
            eps.push(e);
            noisy.push(sa * x + sb * e);
        }
        let drop = drop_probability > 0.0 && rng.bernoulli(drop_probability);
        used.push(if drop { null.clone() } else { cond.clone() });
        timesteps.push(t);
        dropped.push(drop);
    }
    let xt = tape.constant(x0.shape(), noisy)?;
    let target = tape.constant(x0.shape(), eps)?;
    let pred = model.predict(tape, xt, &timesteps, &used)?;
    if tape.shape(pred) != x0.shape() {
        return dim_err(format!("model output {:?} for input {:?}", tape.shape(pred), x0.shape()));
    }
    let loss = tape.mse(pred, target)?;
    Ok((loss, EpsDraw { timesteps, dropped }))
}

fn predict_values<C: Clone, M: EpsModel<C>>(
    model: &mut M,
    shape: &[usize],
    x: &[f64],
    t: usize,
    conds: &[C],
) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let xv = tape.constant(shape, x.to_vec())?;
    let ts = vec![t; shape[0]];
    let out = model.predict(&mut tape, xv, &ts, conds)?;
    if tape.shape(out) != shape {
        return dim_err(format!("model output {:?} for input {shape:?}", tape.shape(out)));
    }
    Ok(tape.value(out).to_vec())
}

/// Ancestral DDPM sampling with classifier-free guidance, one sample per
/// `(cond, seed)` pair, all advanced together as one batch. Each sample draws
/// its starting point and per-step noise from its own seeded stream, so a
/// sample depends only on its own seed and condition.
pub fn ddpm_sample<C: Clone, M: EpsModel<C>>(
    model: &mut M,
    sample_shape: &[usize],
    conds: &[C],
    null: &C,
    seeds: &[u64],
    schedule: &NoiseSchedule,
    scale: f64,
) -> Result<Vec<Tensor>> {
    if conds.len() != seeds.len() || conds.is_empty() {
        return dim_err(format!("{} conditions for {} seeds", conds.len(), seeds.len()));
    }
    let batch = conds.len();
    let per: usize = sample_shape.iter().product();
    let mut shape = vec![batch];
    shape.extend_from_slice(sample_shape);
    let mut streams: Vec<Stream> = seeds.iter().map(|&s| Stream::new(s)).collect();
    let mut x: Vec<f64> = streams.iter_mut().flat_map(|r| r.normal_vec(per)).collect();

    let need_cond = scale != 0.0;
    let need_uncond = scale != 1.0;
    let mut both_shape = shape.clone();
    both_shape[0] = 2 * batch;
    let mut both_conds: Vec<C> = vec![null.clone(); batch];
    both_conds.extend_from_slice(conds);
    let nulls = vec![null.clone(); batch];

    for t in (1..=schedule.steps()).rev() {
        let eps = if need_cond && need_uncond {
            let mut xx = x.clone();
            xx.extend_from_slice(&x);
            let out = predict_values(model, &both_shape, &xx, t, &both_conds)?;
            let (u, c) = out.split_at(batch * per);
            cfg_values(u, c, scale)
        } else if need_cond {
            predict_values(model, &shape, &x, t, conds)?
        } else {
            predict_values(model, &shape, &x, t, &nulls)?
        };
        let beta = schedule.beta(t);
        let coef = beta / (1.0 - schedule.alpha_bar(t)).sqrt();
        let inv_sqrt_alpha = 1.0 / schedule.alpha(t).sqrt();
        let sigma = if t > 1 { schedule.posterior_variance(t).sqrt() } else { 0.0 };
        for (b, r) in streams.iter_mut().enumerate() {
            for i in b * per..(b + 1) * per {
                let mean = (x[i] - coef * eps[i]) * inv_sqrt_alpha;
                x[i] = if t > 1 { mean + sigma * r.normal() } else { mean };
            }
        }
        crate::tensor::check_finite(&x, "ddpm_sample")?;
    }
    x.chunks(per).map(|c| Tensor::new(sample_shape.to_vec(), c.to_vec())).collect()
}
