//! Line-oriented `key = value` experiment configuration with dotted keys.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use msdm_core::metrics::EmbedderKind;
use msdm_core::synthdata::{Modality, Strategy};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{HarnessError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelKind {
    MsdmScratch,
    BaseLora,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::MsdmScratch => "msdm-scratch",
            Self::BaseLora => "base-lora",
        }
    }
}

impl FromStr for ModelKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "msdm-scratch" => Ok(Self::MsdmScratch),
            "base-lora" => Ok(Self::BaseLora),
            o => Err(format!("unknown model {o:?}")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScheduleKind {
    /// Linear betas rescaled so ᾱ_T matches the 1000-step reference schedule.
    LinearMatched,
    Cosine,
}

impl ScheduleKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::LinearMatched => "linear-matched",
            Self::Cosine => "cosine",
        }
    }
}

impl FromStr for ScheduleKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "linear-matched" => Ok(Self::LinearMatched),
            "cosine" => Ok(Self::Cosine),
            o => Err(format!("unknown schedule {o:?}")),
        }
    }
}

/// Which base weights receive adapters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LoraTargets {
    /// Key and value projections of every cross-attention block.
    Kv,
    /// Every linear inside the cross-attention blocks.
    Attention,
}

impl LoraTargets {
    pub fn name(self) -> &'static str {
        match self {
            Self::Kv => "kv",
            Self::Attention => "attention",
        }
    }
}

impl FromStr for LoraTargets {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "kv" => Ok(Self::Kv),
            "attention" => Ok(Self::Attention),
            o => Err(format!("unknown LoRA target set {o:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output: PathBuf,
    pub model: ModelKind,

    pub dataset_images: usize,
    pub dataset_image_size: usize,
    pub dataset_holdout: f64,
    pub dataset_modality: Option<Modality>,
    pub generic_images: usize,

    pub paraphrase_k: usize,
    pub augment_strategy: Strategy,
    pub augment_fraction: f64,

    pub schedule_kind: ScheduleKind,
    pub schedule_steps: usize,
    pub guidance_scale: f64,
    pub guidance_drop: f64,

    pub vae_channels: [usize; 2],
    pub vae_latent_channels: usize,
    pub vae_kl_weight: f64,
    pub vae: StageConfig,

    pub unet_channels: [usize; 2],
    pub unet_attn_dim: usize,
    pub unet_context_dim: usize,
    pub unet: StageConfig,

    pub base_channels: [usize; 2],
    pub base_attn_dim: usize,
    pub base_context_dim: usize,
    pub base: StageConfig,
    pub base_vae_steps: usize,

    pub lora_rank: usize,
    pub lora_alpha: Option<f64>,
    pub lora_targets: LoraTargets,
    pub lora: StageConfig,

    pub eval_images_per_prompt: usize,
    pub eval_prompts: usize,
    pub eval_runs: usize,
    pub eval_embedder: EmbedderKind,
    pub eval_batch: usize,

    pub sweep_ranks: Vec<usize>,
    pub sweep_parallelism: usize,
    /// Adapter placement during the rank sweep; K/V admits ranks up to the attention width.
    pub sweep_targets: LoraTargets,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            output: PathBuf::from("runs/default"),
            model: ModelKind::MsdmScratch,
            dataset_images: 200,
            dataset_image_size: 32,
            dataset_holdout: 0.10,
            dataset_modality: None,
            generic_images: 200,
            paraphrase_k: 3,
            augment_strategy: Strategy::DEFAULT,
            augment_fraction: 0.5,
            schedule_kind: ScheduleKind::LinearMatched,
            schedule_steps: 100,
            guidance_scale: 3.0,
            guidance_drop: 0.1,
            vae_channels: [16, 32],
            vae_latent_channels: 4,
            vae_kl_weight: 1e-3,
            vae: StageConfig { steps: 500, batch: 16, lr: 2e-3 },
            unet_channels: [16, 32],
            unet_attn_dim: 32,
            unet_context_dim: 32,
            unet: StageConfig { steps: 2000, batch: 16, lr: 1e-3 },
            base_channels: [32, 64],
            base_attn_dim: 256,
            base_context_dim: 256,
            base: StageConfig { steps: 1000, batch: 16, lr: 1e-3 },
            base_vae_steps: 500,
            lora_rank: 4,
            lora_alpha: None,
            lora_targets: LoraTargets::Attention,
            lora: StageConfig { steps: 200, batch: 16, lr: 3e-3 },
            eval_images_per_prompt: 10,
            eval_prompts: 20,
            eval_runs: 5,
            eval_embedder: EmbedderKind::RandomProjection,
            eval_batch: 32,
            sweep_ranks: vec![4, 8, 16, 32, 64, 128, 256],
            sweep_parallelism: 1,
            sweep_targets: LoraTargets::Kv,
        }
    }
}

fn parse_num<T: FromStr>(key: &str, v: &str) -> std::result::Result<T, String> {
    v.parse().map_err(|_| format!("{key}: cannot parse {v:?}"))
}

fn parse_pair(key: &str, v: &str) -> std::result::Result<[usize; 2], String> {
    let parts: Vec<&str> = v.split(',').map(str::trim).collect();
    match parts.as_slice() {
        [a, b] => Ok([parse_num(key, a)?, parse_num(key, b)?]),
        _ => Err(format!("{key}: expected two comma-separated integers, got {v:?}")),
    }
}

fn fmt_f(v: f64) -> String {
    format!("{v:e}")
}

impl ExperimentConfig {
    /// Every key in file order together with its current value.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let pair = |p: [usize; 2]| format!("{},{}", p[0], p[1]);
        vec![
            ("seed", self.seed.to_string()),
            ("output", self.output.display().to_string()),
            ("model", self.model.name().into()),
            ("dataset.images", self.dataset_images.to_string()),
            ("dataset.image_size", self.dataset_image_size.to_string()),
            ("dataset.holdout", fmt_f(self.dataset_holdout)),
            (
                "dataset.modality",
                match self.dataset_modality {
                    None => "all".into(),
                    Some(Modality::Endo) => "endo".into(),
                    Some(Modality::Xray) => "xray".into(),
                },
            ),
            ("dataset.generic_images", self.generic_images.to_string()),
            ("paraphrase.k", self.paraphrase_k.to_string()),
            ("augment.strategy", self.augment_strategy.name().into()),
            ("augment.fraction", fmt_f(self.augment_fraction)),
            ("schedule.kind", self.schedule_kind.name().into()),
            ("schedule.steps", self.schedule_steps.to_string()),
            ("guidance.scale", fmt_f(self.guidance_scale)),
            ("guidance.drop", fmt_f(self.guidance_drop)),
            ("vae.channels", pair(self.vae_channels)),
            ("vae.latent_channels", self.vae_latent_channels.to_string()),
            ("vae.kl_weight", fmt_f(self.vae_kl_weight)),
            ("vae.steps", self.vae.steps.to_string()),
            ("vae.batch", self.vae.batch.to_string()),
            ("vae.lr", fmt_f(self.vae.lr)),
            ("unet.channels", pair(self.unet_channels)),
            ("unet.attn_dim", self.unet_attn_dim.to_string()),
            ("unet.context_dim", self.unet_context_dim.to_string()),
            ("unet.steps", self.unet.steps.to_string()),
            ("unet.batch", self.unet.batch.to_string()),
            ("unet.lr", fmt_f(self.unet.lr)),
            ("base.channels", pair(self.base_channels)),
            ("base.attn_dim", self.base_attn_dim.to_string()),
            ("base.context_dim", self.base_context_dim.to_string()),
            ("base.steps", self.base.steps.to_string()),
            ("base.batch", self.base.batch.to_string()),
            ("base.lr", fmt_f(self.base.lr)),
            ("base.vae_steps", self.base_vae_steps.to_string()),
            ("lora.rank", self.lora_rank.to_string()),
            ("lora.alpha", self.lora_alpha.map_or_else(|| "rank".into(), fmt_f)),
            ("lora.targets", self.lora_targets.name().into()),
            ("lora.steps", self.lora.steps.to_string()),
            ("lora.batch", self.lora.batch.to_string()),
            ("lora.lr", fmt_f(self.lora.lr)),
            ("eval.images_per_prompt", self.eval_images_per_prompt.to_string()),
            ("eval.prompts", self.eval_prompts.to_string()),
            ("eval.runs", self.eval_runs.to_string()),
            ("eval.embedder", self.eval_embedder.id().into()),
            ("eval.batch", self.eval_batch.to_string()),
            ("sweep.ranks", self.sweep_ranks.iter().map(usize::to_string).collect::<Vec<_>>().join(",")),
            ("sweep.parallelism", self.sweep_parallelism.to_string()),
            ("sweep.targets", self.sweep_targets.name().into()),
        ]
    }

    /// Set one dotted key from its text form.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        self.set_inner(key, v.trim()).map_err(HarnessError::Config)
    }

    fn set_inner(&mut self, key: &str, v: &str) -> std::result::Result<(), String> {
        match key {
            "seed" => self.seed = parse_num(key, v)?,
            "output" => self.output = PathBuf::from(v),
            "model" => self.model = v.parse()?,
            "dataset.images" => self.dataset_images = parse_num(key, v)?,
            "dataset.image_size" => self.dataset_image_size = parse_num(key, v)?,
            "dataset.holdout" => self.dataset_holdout = parse_num(key, v)?,
            "dataset.modality" => {
                self.dataset_modality = match v {
                    "all" => None,
                    m => Some(m.parse().map_err(|e: msdm_core::Error| e.to_string())?),
                }
            }
            "dataset.generic_images" => self.generic_images = parse_num(key, v)?,
            "paraphrase.k" => self.paraphrase_k = parse_num(key, v)?,
            "augment.strategy" => self.augment_strategy = v.parse().map_err(|e: msdm_core::Error| e.to_string())?,
            "augment.fraction" => self.augment_fraction = parse_num(key, v)?,
            "schedule.kind" => self.schedule_kind = v.parse()?,
            "schedule.steps" => self.schedule_steps = parse_num(key, v)?,
            "guidance.scale" => self.guidance_scale = parse_num(key, v)?,
            "guidance.drop" => self.guidance_drop = parse_num(key, v)?,
            "vae.channels" => self.vae_channels = parse_pair(key, v)?,
            "vae.latent_channels" => self.vae_latent_channels = parse_num(key, v)?,
            "vae.kl_weight" => self.vae_kl_weight = parse_num(key, v)?,
            "vae.steps" => self.vae.steps = parse_num(key, v)?,
            "vae.batch" => self.vae.batch = parse_num(key, v)?,
            "vae.lr" => self.vae.lr = parse_num(key, v)?,
            "unet.channels" => self.unet_channels = parse_pair(key, v)?,
            "unet.attn_dim" => self.unet_attn_dim = parse_num(key, v)?,
            "unet.context_dim" => self.unet_context_dim = parse_num(key, v)?,
            "unet.steps" => self.unet.steps = parse_num(key, v)?,
            "unet.batch" => self.unet.batch = parse_num(key, v)?,
            "unet.lr" => self.unet.lr = parse_num(key, v)?,
            "base.channels" => self.base_channels = parse_pair(key, v)?,
            "base.attn_dim" => self.base_attn_dim = parse_num(key, v)?,
            "base.context_dim" => self.base_context_dim = parse_num(key, v)?,
            "base.steps" => self.base.steps = parse_num(key, v)?,
            "base.batch" => self.base.batch = parse_num(key, v)?,
            "base.lr" => self.base.lr = parse_num(key, v)?,
            "base.vae_steps" => self.base_vae_steps = parse_num(key, v)?,
            "lora.rank" => self.lora_rank = parse_num(key, v)?,
            "lora.alpha" => self.lora_alpha = if v == "rank" { None } else { Some(parse_num(key, v)?) },
            "lora.targets" => self.lora_targets = v.parse()?,
            "lora.steps" => self.lora.steps = parse_num(key, v)?,
            "lora.batch" => self.lora.batch = parse_num(key, v)?,
            "lora.lr" => self.lora.lr = parse_num(key, v)?,
            "eval.images_per_prompt" => self.eval_images_per_prompt = parse_num(key, v)?,
            "eval.prompts" => self.eval_prompts = parse_num(key, v)?,
            "eval.runs" => self.eval_runs = parse_num(key, v)?,
            "eval.embedder" => self.eval_embedder = v.parse().map_err(|e: msdm_core::Error| e.to_string())?,
            "eval.batch" => self.eval_batch = parse_num(key, v)?,
            "sweep.ranks" => {
                self.sweep_ranks = v.split(',').map(|r| parse_num(key, r.trim())).collect::<std::result::Result<_, _>>()?
            }
            "sweep.parallelism" => self.sweep_parallelism = parse_num(key, v)?,
            "sweep.targets" => self.sweep_targets = v.parse()?,
            other => return Err(format!("unknown config key {other:?}")),
        }
        Ok(())
    }

    /// Parse config text: `key = value` lines, `#` comments, blank lines ignored.
    /// Keys not present keep their defaults; unknown keys are rejected.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(HarnessError::Config(format!("line {}: expected `key = value`, got {raw:?}", n + 1)));
            };
            cfg.set(k.trim(), v).map_err(|e| HarnessError::Config(format!("line {}: {e}", n + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            writeln!(s, "{k} = {v}").expect("string write");
        }
        s
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    /// SHA-256 of the canonical text form.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_text().as_bytes()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(HarnessError::Config(m));
        if !(self.dataset_holdout > 0.0 && self.dataset_holdout < 1.0) {
            return bad(format!("dataset.holdout {} must lie in (0, 1)", self.dataset_holdout));
        }
        if !(0.0..=1.0).contains(&self.augment_fraction) || !(0.0..=1.0).contains(&self.guidance_drop) {
            return bad("augment.fraction and guidance.drop must lie in [0, 1]".into());
        }
        if self.guidance_scale < 0.0 {
            return bad("guidance.scale must be non-negative".into());
        }
        if self.eval_runs < 2 {
            return bad(format!("eval.runs = {} (need at least 2 for a spread)", self.eval_runs));
        }
        if self.eval_images_per_prompt < 2 || self.eval_prompts == 0 {
            return bad("eval.images_per_prompt must be ≥ 2 and eval.prompts ≥ 1".into());
        }
        if self.lora_rank == 0 || self.sweep_ranks.contains(&0) {
            return bad("LoRA ranks must be ≥ 1".into());
        }
        for (name, st) in [("vae", &self.vae), ("unet", &self.unet), ("base", &self.base), ("lora", &self.lora)] {
            if st.batch == 0 || !(st.lr > 0.0) {
                return bad(format!("{name}.batch must be ≥ 1 and {name}.lr > 0"));
            }
        }
        if self.schedule_steps == 0 || self.sweep_parallelism == 0 || self.eval_batch == 0 {
            return bad("schedule.steps, sweep.parallelism and eval.batch must be ≥ 1".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut c = ExperimentConfig::default();
        c.set("lora.rank", "64").unwrap();
        c.set("lora.alpha", "0.5").unwrap();
        c.set("dataset.modality", "xray").unwrap();
        c.set("vae.kl_weight", "0.1").unwrap();
        let back = ExperimentConfig::parse(&c.to_text()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.digest(), c.digest());
    }

    #[test]
    fn rejects_unknown_and_malformed() {
        assert!(matches!(ExperimentConfig::parse("lora.rnak = 4"), Err(HarnessError::Config(_))));
        assert!(matches!(ExperimentConfig::parse("lora.rank 4"), Err(HarnessError::Config(_))));
        assert!(matches!(ExperimentConfig::parse("lora.rank = four"), Err(HarnessError::Config(_))));
        assert!(matches!(ExperimentConfig::parse("eval.runs = 1"), Err(HarnessError::Config(_))));
        let c = ExperimentConfig::parse("# comment\n\nlora.rank = 64  # trailing\n").unwrap();
        assert_eq!(c.lora_rank, 64);
    }
}
