//! Dataset preparation and the two training pipelines.

use std::path::{Path, PathBuf};
use std::time::Instant;

use msdm_core::lora::{attach, trainable_param_count};
use msdm_core::nets::{Unet, UnetConfig, Vae, VaeConfig};
use msdm_core::rng::derive_seed;
use msdm_core::synthdata::{
    augment, build_dataset, generate_paraphrases, split_holdout, DatasetConfig, DatasetManifest, Domain,
};
use msdm_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, LoraTargets, StageConfig};
use crate::error::{HarnessError, Result};
use crate::model::{make_schedule, LoraMeta, Model, ModelMeta};
use crate::train::{encode_means, latent_scale, train_unet, train_vae, LossCurve, UnetData, UnetTraining};

pub const MSDM_NAME: &str = "msdm-scratch";
pub const BASE_NAME: &str = "base-zero-shot";
pub const LORA_NAME: &str = "base-lora";

/// Target-domain dataset: build, hold out, paraphrase, augment.
pub fn prepare_target(cfg: &ExperimentConfig) -> Result<DatasetManifest> {
    prepare_target_with(cfg, cfg.augment_strategy)
}

pub fn prepare_target_with(cfg: &ExperimentConfig, strategy: msdm_core::synthdata::Strategy) -> Result<DatasetManifest> {
    let m = prepare_paraphrased(cfg)?;
    if cfg.paraphrase_k == 0 {
        return Ok(m);
    }
    Ok(augment(&m, strategy, cfg.augment_fraction, derive_seed(cfg.seed, "augment"))?)
}

/// Target-domain dataset after the split and paraphrase generation, before augmentation.
pub fn prepare_paraphrased(cfg: &ExperimentConfig) -> Result<DatasetManifest> {
    let dc = DatasetConfig {
        n_images: cfg.dataset_images,
        image_size: cfg.dataset_image_size,
        domain: Domain::Target,
        modality: cfg.dataset_modality,
    };
    let m = build_dataset(&dc, derive_seed(cfg.seed, "dataset/target"))?;
    let m = split_holdout(&m, cfg.dataset_holdout, derive_seed(cfg.seed, "split/target"))?;
    if cfg.paraphrase_k == 0 {
        return Ok(m);
    }
    Ok(generate_paraphrases(&m, cfg.paraphrase_k, derive_seed(cfg.seed, "paraphrase"))?)
}

/// Generic-domain dataset used only to pretrain the base backbone.
pub fn prepare_generic(cfg: &ExperimentConfig) -> Result<DatasetManifest> {
    let dc = DatasetConfig {
        n_images: cfg.generic_images,
        image_size: cfg.dataset_image_size,
        domain: Domain::Generic,
        modality: cfg.dataset_modality,
    };
    let m = build_dataset(&dc, derive_seed(cfg.seed, "dataset/generic"))?;
    Ok(split_holdout(&m, cfg.dataset_holdout, derive_seed(cfg.seed, "split/generic"))?)
}

/// Training images of a manifest as `[3, H, W]` tensors, with their linked prompt texts.
pub fn training_pairs(m: &DatasetManifest) -> Result<(Vec<Tensor>, Vec<Vec<String>>)> {
    let index = m.prompt_index();
    let mut images = Vec::new();
    let mut texts = Vec::new();
    for im in m.train_images() {
        images.push(im.render(m.config.image_size).to_tensor());
        let t: Vec<String> = im
            .prompt_ids
            .iter()
            .map(|id| {
                index
                    .get(id.as_str())
                    .map(|p| p.text.clone())
                    .ok_or_else(|| HarnessError::Contract(format!("image {} links unknown prompt {id}", im.id)))
            })
            .collect::<Result<_>>()?;
        texts.push(t);
    }
    if images.is_empty() {
        return Err(HarnessError::Config("dataset has no training images".into()));
    }
    Ok((images, texts))
}

const CHANNEL_ORDERS: [[usize; 3]; 6] = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];

/// Each `[3, H, W]` image under all six orderings of its colour channels.
pub fn channel_permutations(images: &[Tensor]) -> Result<Vec<Tensor>> {
    let mut out = Vec::with_capacity(images.len() * CHANNEL_ORDERS.len());
    for im in images {
        let [3, h, w] = im.shape() else {
            return Err(HarnessError::Contract(format!("expected a [3, H, W] image, got {:?}", im.shape())));
        };
        let plane = h * w;
        for order in CHANNEL_ORDERS {
            let data = order.iter().flat_map(|&c| im.data()[c * plane..(c + 1) * plane].iter().copied()).collect();
            out.push(Tensor::new(im.shape().to_vec(), data)?);
        }
    }
    Ok(out)
}

/// Models trained by one pipeline stage, with their loss curves.
#[derive(Clone, Debug)]
pub struct Trained {
    pub model: Model,
    pub vae_curve: LossCurve,
    pub unet_curve: LossCurve,
}

pub struct Backbone<'a> {
    pub name: &'a str,
    pub vae_channels: [usize; 2],
    pub vae_stage: StageConfig,
    /// Also train the VAE on every RGB channel permutation of the images.
    pub vae_colour_permutations: bool,
    pub unet: UnetConfig,
    pub unet_stage: &'a StageConfig,
}

fn unet_data(model_encoder: &msdm_core::nets::TextEncoder, vae: &Vae, scale: f64, images: &[Tensor], texts: &[Vec<String>]) -> Result<UnetData> {
    let latents = encode_means(vae, images)?
        .into_iter()
        .map(|z| Tensor::new(z.shape().to_vec(), z.data().iter().map(|v| v * scale).collect()))
        .collect::<msdm_core::Result<Vec<_>>>()?;
    let texts = texts.iter().map(|ts| ts.iter().map(|t| model_encoder.encode(t)).collect()).collect();
    Ok(UnetData { latents, texts, null: model_encoder.null() })
}

/// VAE first, then (with the VAE frozen) the U-Net on the VAE's scaled posterior means.
pub fn train_backbone(cfg: &ExperimentConfig, m: &DatasetManifest, spec: &Backbone, seed: u64) -> Result<Trained> {
    let (images, texts) = training_pairs(m)?;
    let vae_cfg = VaeConfig {
        channels: spec.vae_channels,
        latent_channels: cfg.vae_latent_channels,
        kl_weight: cfg.vae_kl_weight,
    };
    let mut vae = Vae::new(vae_cfg.clone(), derive_seed(seed, "vae"))?;
    let t0 = Instant::now();
    let vae_curve = if spec.vae_colour_permutations {
        let widened = channel_permutations(&images)?;
        train_vae(&mut vae, &widened, &spec.vae_stage, derive_seed(seed, "vae-train"))?
    } else {
        train_vae(&mut vae, &images, &spec.vae_stage, derive_seed(seed, "vae-train"))?
    };
    log::info!("{}: VAE trained in {:.1?}", spec.name, t0.elapsed());
    vae.params.freeze_all();

    let scale = latent_scale(&encode_means(&vae, &images)?)?;
    let mut unet = Unet::new(spec.unet.clone(), derive_seed(seed, "unet"))?;
    let meta = ModelMeta {
        name: spec.name.to_string(),
        vae: vae_cfg,
        unet: spec.unet.clone(),
        latent_scale: scale,
        text_seed: derive_seed(cfg.seed, "text"),
        schedule: cfg.schedule_kind,
        schedule_steps: cfg.schedule_steps,
        guidance_scale: cfg.guidance_scale,
        image_size: m.config.image_size,
        unet_digest: String::new(),
        lora: None,
    };
    let schedule = make_schedule(cfg.schedule_kind, cfg.schedule_steps)?;
    let encoder = msdm_core::nets::TextEncoder::new(meta.text_seed);
    let data = unet_data(&encoder, &vae, scale, &images, &texts)?;
    let t0 = Instant::now();
    let run = UnetTraining {
        schedule: &schedule,
        drop_probability: cfg.guidance_drop,
        stage: spec.unet_stage,
        seed: derive_seed(seed, "unet-train"),
    };
    let unet_curve = train_unet(&mut unet, &mut [], &data, &run)?;
    log::info!("{}: U-Net trained in {:.1?}", spec.name, t0.elapsed());
    let mut meta = meta;
    meta.unet_digest = unet.params.digest();
    Ok(Trained { model: Model::new(meta, vae, unet, Vec::new())?, vae_curve, unet_curve })
}

pub fn msdm_unet_config(cfg: &ExperimentConfig) -> UnetConfig {
    UnetConfig {
        latent_channels: cfg.vae_latent_channels,
        channels: cfg.unet_channels,
        context_dim: cfg.unet_context_dim,
        attn_dim: cfg.unet_attn_dim,
        timesteps: cfg.schedule_steps,
        ..UnetConfig::default()
    }
}

pub fn base_unet_config(cfg: &ExperimentConfig) -> UnetConfig {
    UnetConfig {
        latent_channels: cfg.vae_latent_channels,
        channels: cfg.base_channels,
        context_dim: cfg.base_context_dim,
        attn_dim: cfg.base_attn_dim,
        timesteps: cfg.schedule_steps,
        ..UnetConfig::default()
    }
}

/// The compact model trained from scratch on the target domain.
pub fn train_msdm(cfg: &ExperimentConfig, target: &DatasetManifest) -> Result<Trained> {
    let spec = Backbone {
        name: MSDM_NAME,
        vae_channels: cfg.vae_channels,
        vae_stage: cfg.vae.clone(),
        vae_colour_permutations: false,
        unet: msdm_unet_config(cfg),
        unet_stage: &cfg.unet,
    };
    train_backbone(cfg, target, &spec, derive_seed(cfg.seed, "msdm"))
}

/// The wider backbone pretrained on the generic domain.
pub fn pretrain_base(cfg: &ExperimentConfig, generic: &DatasetManifest) -> Result<Trained> {
    let spec = Backbone {
        name: BASE_NAME,
        vae_channels: cfg.vae_channels,
        vae_stage: StageConfig { steps: cfg.base_vae_steps, ..cfg.vae.clone() },
        vae_colour_permutations: true,
        unet: base_unet_config(cfg),
        unet_stage: &cfg.base,
    };
    train_backbone(cfg, generic, &spec, derive_seed(cfg.seed, "base"))
}

pub fn lora_target_names(t: LoraTargets) -> Vec<String> {
    match t {
        LoraTargets::Kv => Unet::kv_targets(),
        LoraTargets::Attention => Unet::attention_targets(),
    }
}

/// Outcome of one adapter fine-tune.
#[derive(Clone, Debug)]
pub struct LoraRun {
    pub model: Model,
    pub curve: LossCurve,
    pub base_digest_before: String,
    pub base_digest_after: String,
    pub rank: usize,
    pub trainable_params: usize,
}

/// Attach adapters of `rank` to a copy of the frozen base and fine-tune them on the target domain.
pub fn lora_finetune(cfg: &ExperimentConfig, base: &Model, target: &DatasetManifest, rank: usize, seed: u64) -> Result<LoraRun> {
    let (images, texts) = training_pairs(target)?;
    let mut unet = base.unet.clone();
    let before = unet.params.digest();
    let names = lora_target_names(cfg.lora_targets);
    let refs: Vec<&str> = names.iter().map(String::as_str).collect();
    let mut adapters = attach(&mut unet.params, &refs, rank, cfg.lora_alpha, derive_seed(seed, "lora-init"))?;
    let data = unet_data(&base.encoder, &base.vae, base.meta.latent_scale, &images, &texts)?;
    let run = UnetTraining {
        schedule: &base.schedule,
        drop_probability: cfg.guidance_drop,
        stage: &cfg.lora,
        seed: derive_seed(seed, "lora-train"),
    };
    let curve = train_unet(&mut unet, &mut adapters, &data, &run)?;
    let after = unet.params.digest();
    if after != before {
        return Err(HarnessError::Contract("base weights changed during adapter fine-tuning".into()));
    }
    let trainable = trainable_param_count(&adapters, 0);
    let mut meta = base.meta.clone();
    meta.name = LORA_NAME.to_string();
    meta.lora = Some(LoraMeta { rank, alpha: cfg.lora_alpha, targets: cfg.lora_targets, trainable_params: trainable });
    Ok(LoraRun {
        model: Model::new(meta, base.vae.clone(), unet, adapters)?,
        curve,
        base_digest_before: before,
        base_digest_after: after,
        rank,
        trainable_params: trainable,
    })
}

/// Summary of one training run, written as `run.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub model: String,
    pub config_digest: String,
    pub per_run_fid: Vec<f64>,
    pub report: Option<msdm_core::metrics::MetricReport>,
    pub wall_clock_secs: f64,
    pub checkpoints: Vec<PathBuf>,
    pub lora_rank: Option<usize>,
    pub trainable_params: Option<usize>,
    pub base_digest_before: Option<String>,
    pub base_digest_after: Option<String>,
}

impl RunResult {
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn channel_permutations_cover_all_orders() {
        let im = Tensor::new(vec![3, 1, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let out = channel_permutations(&[im.clone()]).unwrap();
        assert_eq!(out.len(), 6);
        assert_eq!(out[0], im);
        assert_eq!(out[5].data(), &[5.0, 6.0, 3.0, 4.0, 1.0, 2.0]);
        let mut firsts: Vec<f64> = out.iter().map(|t| t.data()[0]).collect();
        firsts.sort_by(f64::total_cmp);
        assert_eq!(firsts, [1.0, 1.0, 3.0, 3.0, 5.0, 5.0]);
    }
}
