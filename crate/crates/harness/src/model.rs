//! A trained text-to-image model on disk: VAE, U-Net, optional adapters and sampling settings.

use std::path::{Path, PathBuf};

use msdm_core::diffusion::{ddpm_sample, NoiseSchedule};
use msdm_core::image::RgbImage;
use msdm_core::lora::{load_adapters, save_adapters, LoraAdapter};
use msdm_core::nets::unet::UnetSampler;
use msdm_core::nets::{TextEncoder, Unet, UnetConfig, Vae, VaeConfig};
use msdm_core::tensor::{load_checkpoint, save_checkpoint};
use msdm_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::config::{LoraTargets, ScheduleKind};
use crate::error::{HarnessError, Result};
use crate::train::stack;

const META_FILE: &str = "model.json";
const VAE_FILE: &str = "vae.msdm";
const UNET_FILE: &str = "unet.msdm";
const LORA_FILE: &str = "lora.msdm";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoraMeta {
    pub rank: usize,
    pub alpha: Option<f64>,
    pub targets: LoraTargets,
    pub trainable_params: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub name: String,
    pub vae: VaeConfig,
    pub unet: UnetConfig,
    pub latent_scale: f64,
    pub text_seed: u64,
    pub schedule: ScheduleKind,
    pub schedule_steps: usize,
    pub guidance_scale: f64,
    pub image_size: usize,
    /// Digest of the U-Net weights (the frozen base when adapters are present).
    pub unet_digest: String,
    pub lora: Option<LoraMeta>,
}

pub fn make_schedule(kind: ScheduleKind, steps: usize) -> Result<NoiseSchedule> {
    Ok(match kind {
        ScheduleKind::LinearMatched => NoiseSchedule::linear_matched(steps)?,
        ScheduleKind::Cosine => NoiseSchedule::cosine(steps)?,
    })
}

#[derive(Clone, Debug)]
pub struct Model {
    pub meta: ModelMeta,
    pub vae: Vae,
    pub unet: Unet,
    pub adapters: Vec<LoraAdapter>,
    pub encoder: TextEncoder,
    pub schedule: NoiseSchedule,
}

impl Model {
    pub fn new(meta: ModelMeta, vae: Vae, unet: Unet, adapters: Vec<LoraAdapter>) -> Result<Self> {
        let schedule = make_schedule(meta.schedule, meta.schedule_steps)?;
        if unet.config.timesteps != schedule.steps() {
            return Err(HarnessError::Config(format!(
                "U-Net built for {} timesteps, schedule has {}",
                unet.config.timesteps,
                schedule.steps()
            )));
        }
        let encoder = TextEncoder::new(meta.text_seed);
        Ok(Self { meta, vae, unet, adapters, encoder, schedule })
    }

    /// The same model with its adapters removed.
    pub fn without_adapters(&self, name: &str) -> Self {
        let mut m = self.clone();
        m.adapters.clear();
        m.meta.lora = None;
        m.meta.name = name.to_string();
        m
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let mut written = vec![dir.join(META_FILE), dir.join(VAE_FILE), dir.join(UNET_FILE)];
        std::fs::write(&written[0], serde_json::to_string_pretty(&self.meta)?)?;
        save_checkpoint(&written[1], &self.vae.params.entries())?;
        save_checkpoint(&written[2], &self.unet.params.entries())?;
        if !self.adapters.is_empty() {
            let p = dir.join(LORA_FILE);
            save_adapters(&p, &self.adapters)?;
            written.push(p);
        }
        Ok(written)
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let meta: ModelMeta = serde_json::from_str(&std::fs::read_to_string(dir.join(META_FILE))?)?;
        let mut vae = Vae::new(meta.vae.clone(), 0)?;
        vae.params.load_entries(&load_checkpoint(dir.join(VAE_FILE))?)?;
        let mut unet = Unet::new(meta.unet.clone(), 0)?;
        unet.params.load_entries(&load_checkpoint(dir.join(UNET_FILE))?)?;
        if unet.params.digest() != meta.unet_digest {
            return Err(HarnessError::Contract(format!("U-Net weights in {} do not match the recorded digest", dir.display())));
        }
        let adapters = if meta.lora.is_some() { load_adapters(dir.join(LORA_FILE))? } else { Vec::new() };
        Self::new(meta, vae, unet, adapters)
    }

    pub fn latent_shape(&self) -> [usize; 3] {
        self.vae.latent_shape(self.meta.image_size, self.meta.image_size)
    }

    /// Decode scaled latents into images.
    pub fn decode(&self, latents: &[Tensor]) -> Result<Vec<RgbImage>> {
        let inv = 1.0 / self.meta.latent_scale;
        let scaled: Vec<Tensor> = latents
            .iter()
            .map(|z| Tensor::new(z.shape().to_vec(), z.data().iter().map(|v| v * inv).collect()))
            .collect::<msdm_core::Result<_>>()?;
        let refs: Vec<&Tensor> = scaled.iter().collect();
        let x = self.vae.decode_tensor(&stack(&refs)?)?;
        let per = x.numel() / latents.len();
        let shape = x.shape()[1..].to_vec();
        x.data()
            .chunks(per)
            .map(|c| Ok(RgbImage::from_tensor(&Tensor::new(shape.clone(), c.to_vec())?)?))
            .collect()
    }

    /// One image per `(text, seed)`, sampled `batch` at a time. Each image depends
    /// only on its own text and seed.
    pub fn sample(&self, texts: &[&str], seeds: &[u64], batch: usize) -> Result<Vec<RgbImage>> {
        if texts.len() != seeds.len() {
            return Err(HarnessError::Contract(format!("{} texts for {} seeds", texts.len(), seeds.len())));
        }
        let shape = self.latent_shape();
        let null = self.encoder.null();
        let mut sampler = UnetSampler { unet: &self.unet, adapters: &self.adapters };
        let mut out = Vec::with_capacity(texts.len());
        for (tc, sc) in texts.chunks(batch.max(1)).zip(seeds.chunks(batch.max(1))) {
            let conds: Vec<_> = tc.iter().map(|t| self.encoder.encode(t)).collect();
            let z = ddpm_sample(&mut sampler, &shape, &conds, &null, sc, &self.schedule, self.meta.guidance_scale)?;
            out.extend(self.decode(&z)?);
        }
        Ok(out)
    }
}
