//! Training loops for the VAE and the U-Net (full or adapter-only).

use std::fmt::Write as _;
use std::path::Path;

use msdm_core::diffusion::{eps_loss, NoiseSchedule};
use msdm_core::lora::{adapter_params, bind_adapters, collect_adapter_grads, LoraAdapter};
use msdm_core::nets::{TextEmbedding, Unet, Vae, View};
use msdm_core::rng::Stream;
use msdm_core::tensor::optim::clip_grad_norm;
use msdm_core::tensor::{AdamW, AdamWConfig, Tape};
use msdm_core::Tensor;

use crate::config::StageConfig;
use crate::error::{HarnessError, Result};

/// Window of the trailing mean used for smoothed loss values.
pub const SMOOTHING_WINDOW: usize = 50;
const CLIP_NORM: f64 = 1.0;
const ENCODE_BATCH: usize = 32;

/// Per-step training losses; step `s` (1-based) is `losses[s - 1]`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossCurve {
    pub losses: Vec<f64>,
}

impl LossCurve {
    /// Trailing mean over up to [`SMOOTHING_WINDOW`] steps ending at each step.
    pub fn smoothed(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.losses.len());
        let mut acc = 0.0;
        for (i, &l) in self.losses.iter().enumerate() {
            acc += l;
            if i >= SMOOTHING_WINDOW {
                acc -= self.losses[i - SMOOTHING_WINDOW];
            }
            out.push(acc / (i + 1).min(SMOOTHING_WINDOW) as f64);
        }
        out
    }

    pub fn smoothed_at(&self, step: usize) -> Option<f64> {
        if step == 0 {
            return None;
        }
        self.smoothed().get(step - 1).copied()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,loss,smoothed\n");
        for (i, (l, m)) in self.losses.iter().zip(self.smoothed()).enumerate() {
            writeln!(s, "{},{l:e},{m:e}", i + 1).expect("string write");
        }
        s
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

fn optimizer(st: &StageConfig) -> Result<AdamW> {
    Ok(AdamW::new(AdamWConfig { lr: st.lr, ..AdamWConfig::default() })?)
}

/// Stack same-shaped tensors along a new leading axis.
pub fn stack(items: &[&Tensor]) -> Result<Tensor> {
    let Some(first) = items.first() else {
        return Err(HarnessError::Contract("cannot stack an empty batch".into()));
    };
    let mut shape = vec![items.len()];
    shape.extend_from_slice(first.shape());
    let mut data = Vec::with_capacity(first.numel() * items.len());
    for t in items {
        if t.shape() != first.shape() {
            return Err(HarnessError::Contract(format!("batch mixes shapes {:?} and {:?}", first.shape(), t.shape())));
        }
        data.extend_from_slice(t.data());
    }
    Ok(Tensor::new(shape, data)?)
}

fn check_loss(what: &str, step: usize, loss: f64) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(HarnessError::Divergence(format!("{what} loss is {loss} at step {step}")))
    }
}

/// Train `vae` on images (`[3, H, W]` each, values in [-1, 1]) with uniformly sampled batches.
pub fn train_vae(vae: &mut Vae, images: &[Tensor], st: &StageConfig, seed: u64) -> Result<LossCurve> {
    if images.is_empty() {
        return Err(HarnessError::Config("no training images".into()));
    }
    let mut opt = optimizer(st)?;
    let mut batches = Stream::child(seed, "vae-batches");
    let mut noise = Stream::child(seed, "vae-noise");
    let mut curve = LossCurve::default();
    for step in 1..=st.steps {
        let idx: Vec<&Tensor> = (0..st.batch).map(|_| &images[batches.index(images.len())]).collect();
        let x = stack(&idx)?;
        let mut tape = Tape::new();
        let b = vae.params.bind(&mut tape);
        let loss = {
            let view = View::new(&vae.params, &b);
            vae.loss_on_batch(&mut tape, &view, &x, &mut noise)?
        };
        let value = tape.value(loss)[0];
        check_loss("VAE", step, value)?;
        tape.backward(loss)?;
        vae.params.collect_grads(&tape, &b)?;
        opt.step(&mut vae.params.trainable_mut())?;
        curve.losses.push(value);
        if step % 100 == 0 {
            log::info!("vae step {step}/{}: loss {value:.5}", st.steps);
        }
    }
    Ok(curve)
}

/// Posterior means of every image, in input order.
pub fn encode_means(vae: &Vae, images: &[Tensor]) -> Result<Vec<Tensor>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(ENCODE_BATCH) {
        let refs: Vec<&Tensor> = chunk.iter().collect();
        let enc = vae.encode_tensor(&stack(&refs)?, None)?;
        let per = enc.mean.numel() / chunk.len();
        let shape = enc.mean.shape()[1..].to_vec();
        for c in enc.mean.data().chunks(per) {
            out.push(Tensor::new(shape.clone(), c.to_vec())?);
        }
    }
    Ok(out)
}

/// 1 / std of every latent value, so scaled latents have unit variance.
pub fn latent_scale(latents: &[Tensor]) -> Result<f64> {
    let n: usize = latents.iter().map(Tensor::numel).sum();
    if n < 2 {
        return Err(HarnessError::Contract("need at least two latent values for a scale".into()));
    }
    let mean = latents.iter().flat_map(|t| t.data()).sum::<f64>() / n as f64;
    let var = latents.iter().flat_map(|t| t.data()).map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let s = 1.0 / var.sqrt();
    if !s.is_finite() {
        return Err(HarnessError::Divergence(format!("latent variance {var} gives no usable scale")));
    }
    Ok(s)
}

/// Latents (already scaled) and, per latent, the text embeddings of its linked prompts.
pub struct UnetData {
    pub latents: Vec<Tensor>,
    pub texts: Vec<Vec<TextEmbedding>>,
    pub null: TextEmbedding,
}

pub struct UnetTraining<'a> {
    pub schedule: &'a NoiseSchedule,
    pub drop_probability: f64,
    pub stage: &'a StageConfig,
    pub seed: u64,
}

/// ε-prediction training. With an empty `adapters` list every trainable U-Net
/// weight is updated; otherwise only the adapters are (the base must be frozen).
pub fn train_unet(unet: &mut Unet, adapters: &mut [LoraAdapter], data: &UnetData, run: &UnetTraining) -> Result<LossCurve> {
    if data.latents.is_empty() || data.latents.len() != data.texts.len() {
        return Err(HarnessError::Contract(format!(
            "{} latents with {} text lists",
            data.latents.len(),
            data.texts.len()
        )));
    }
    if let Some(i) = data.texts.iter().position(Vec::is_empty) {
        return Err(HarnessError::Contract(format!("training image {i} has no prompts")));
    }
    let lora = !adapters.is_empty();
    if lora && unet.params.trainable_numel() != 0 {
        return Err(HarnessError::Contract("adapter training needs a frozen base".into()));
    }
    let st = run.stage;
    let mut opt = optimizer(st)?;
    let mut batches = Stream::child(run.seed, "unet-batches");
    let mut noise = Stream::child(run.seed, "unet-noise");
    let mut curve = LossCurve::default();
    for step in 1..=st.steps {
        let mut xs = Vec::with_capacity(st.batch);
        let mut conds = Vec::with_capacity(st.batch);
        for _ in 0..st.batch {
            let i = batches.index(data.latents.len());
            xs.push(&data.latents[i]);
            let texts = &data.texts[i];
            conds.push(texts[batches.index(texts.len())].clone());
        }
        let x0 = stack(&xs)?;
        let mut tape = Tape::new();
        let b = unet.params.bind(&mut tape);
        let lb = bind_adapters(adapters, &mut tape);
        let loss = {
            let view = View::new(&unet.params, &b);
            let net = &*unet;
            let mut model = |tape: &mut Tape, x, t: &[usize], c: &[TextEmbedding]| net.forward(tape, &view, &lb, x, t, c);
            eps_loss(&mut tape, &mut model, &x0, &conds, &data.null, run.schedule, run.drop_probability, &mut noise)?.0
        };
        let value = tape.value(loss)[0];
        check_loss("U-Net", step, value)?;
        tape.backward(loss)?;
        if lora {
            collect_adapter_grads(adapters, &tape, &lb)?;
            let mut params = adapter_params(adapters);
            clip_grad_norm(&mut params, CLIP_NORM);
            opt.step(&mut params)?;
        } else {
            unet.params.collect_grads(&tape, &b)?;
            let mut params = unet.params.trainable_mut();
            clip_grad_norm(&mut params, CLIP_NORM);
            opt.step(&mut params)?;
        }
        curve.losses.push(value);
        if step % 100 == 0 {
            log::info!("unet step {step}/{}: loss {value:.5}", st.steps);
        }
    }
    Ok(curve)
}
