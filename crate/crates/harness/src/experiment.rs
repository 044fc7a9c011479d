//! Evaluation plans and multi-run scoring of trained models.

use msdm_core::metrics::Embedder;
use msdm_core::rng::{derive_seed, derive_seed_index};
use msdm_core::nets::Vae;
use msdm_core::synthdata::DatasetManifest;

use crate::config::ExperimentConfig;
use crate::error::Result;
use crate::eval::{evaluate, eval_texts, generate_set, real_reference, select_eval_prompts, EvalPrompt, Evaluation, ImageSet, Reference};
use crate::model::Model;

/// Evaluation prompts, their real references and the embedder, fixed per config.
pub struct EvalPlan {
    pub prompts: Vec<EvalPrompt>,
    pub dev_real: ImageSet,
    pub test_real: ImageSet,
    pub embedder: Embedder,
}

/// The configured embedder. `vae-encoder` needs the VAE every compared model is scored with.
pub fn make_embedder(cfg: &ExperimentConfig, vae: Option<&Vae>) -> Result<Embedder> {
    Ok(Embedder::from_id(cfg.eval_embedder.id(), cfg.seed, vae)?)
}

pub fn eval_plan(cfg: &ExperimentConfig, target: &DatasetManifest, vae: Option<&Vae>) -> Result<EvalPlan> {
    let seed = derive_seed(cfg.seed, "eval");
    let prompts = select_eval_prompts(target, cfg.eval_prompts, seed)?;
    let n = cfg.eval_images_per_prompt;
    Ok(EvalPlan {
        dev_real: real_reference(target, &prompts, n, seed, Reference::Dev)?,
        test_real: real_reference(target, &prompts, n, seed, Reference::Test)?,
        prompts,
        embedder: make_embedder(cfg, vae)?,
    })
}

/// Seed of generation run `run`; identical across models so comparisons are paired.
pub fn generation_seed(cfg: &ExperimentConfig, run: usize) -> u64 {
    derive_seed_index(derive_seed(cfg.seed, "generate"), run as u64)
}

/// `eval.runs` generated sets (originals and rewrites) for one model.
pub fn generate_runs(cfg: &ExperimentConfig, plan: &EvalPlan, model: &Model) -> Result<Vec<ImageSet>> {
    let texts = eval_texts(&plan.prompts, true);
    (0..cfg.eval_runs)
        .map(|r| generate_set(model, &texts, cfg.eval_images_per_prompt, generation_seed(cfg, r), cfg.eval_batch))
        .collect()
}

/// Dev and test scores of already generated runs.
pub struct Scored {
    pub dev: Evaluation,
    pub test: Evaluation,
}

pub fn score_runs(plan: &EvalPlan, runs: &[ImageSet]) -> Result<Scored> {
    Ok(Scored { dev: evaluate(&plan.dev_real, runs, &plan.embedder)?, test: evaluate(&plan.test_real, runs, &plan.embedder)? })
}
