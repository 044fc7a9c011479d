//! LoRA rank sweep: fine-tune at each rank several times and record dev FID.

use std::fmt::Write as _;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use msdm_core::metrics::aggregate_runs;
use msdm_core::rng::{derive_seed, derive_seed_index};
use msdm_core::synthdata::DatasetManifest;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{HarnessError, Result};
use crate::eval::{dev_fid, eval_texts, generate_set};
use crate::experiment::{generation_seed, EvalPlan};
use crate::model::Model;
use crate::pipeline::lora_finetune;

pub const SWEEP_HEADER: &str = "rank,params,fid_mean,fid_std";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub rank: usize,
    pub params: usize,
    pub per_run_fid: Vec<f64>,
    pub fid_mean: f64,
    pub fid_std: f64,
}

/// Seed of fine-tune `run` at `rank`.
pub fn finetune_seed(cfg: &ExperimentConfig, rank: usize, run: usize) -> u64 {
    derive_seed_index(derive_seed(cfg.seed, &format!("sweep/rank-{rank}")), run as u64)
}

struct Outcome {
    params: usize,
    fid: f64,
}

fn one_job(cfg: &ExperimentConfig, base: &Model, target: &DatasetManifest, plan: &EvalPlan, rank: usize, run: usize) -> Result<Outcome> {
    let tuned = lora_finetune(cfg, base, target, rank, finetune_seed(cfg, rank, run))?;
    let texts = eval_texts(&plan.prompts, false);
    let set = generate_set(&tuned.model, &texts, cfg.eval_images_per_prompt, generation_seed(cfg, run), cfg.eval_batch)?;
    let fid = dev_fid(&plan.dev_real, &set, &plan.embedder)?;
    log::info!("rank {rank} run {run}: {} params, dev FID {fid:.4}", tuned.trainable_params);
    Ok(Outcome { params: tuned.trainable_params, fid })
}

/// `eval.runs` fine-tunes per rank, spread over `sweep.parallelism` threads.
/// Adapters go on `sweep.targets`. Rows come back in the order of `ranks` whatever the scheduling.
pub fn rank_sweep(cfg: &ExperimentConfig, base: &Model, target: &DatasetManifest, plan: &EvalPlan, ranks: &[usize]) -> Result<Vec<SweepRow>> {
    if ranks.is_empty() {
        return Err(HarnessError::Config("sweep.ranks is empty".into()));
    }
    let mut cfg = cfg.clone();
    cfg.lora_targets = cfg.sweep_targets;
    let cfg = &cfg;
    let runs = cfg.eval_runs;
    let jobs: Vec<(usize, usize)> = ranks.iter().flat_map(|&r| (0..runs).map(move |i| (r, i))).collect();
    let results: Mutex<Vec<Option<Result<Outcome>>>> = Mutex::new((0..jobs.len()).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    let workers = cfg.sweep_parallelism.clamp(1, jobs.len());
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let j = next.fetch_add(1, Ordering::Relaxed);
                let Some(&(rank, run)) = jobs.get(j) else { break };
                let out = one_job(cfg, base, target, plan, rank, run);
                let failed = out.is_err();
                results.lock().unwrap_or_else(|p| p.into_inner())[j] = Some(out);
                if failed {
                    // Stop handing out work; already running jobs finish.
                    next.store(jobs.len(), Ordering::Relaxed);
                }
            });
        }
    });
    let mut results = results.into_inner().unwrap_or_else(|p| p.into_inner());
    if let Some(j) = results.iter().position(|r| matches!(r, Some(Err(_)))) {
        if let Some(Err(e)) = results.swap_remove(j) {
            return Err(e);
        }
    }
    let mut rows = Vec::with_capacity(ranks.len());
    let mut it = results.into_iter();
    for &rank in ranks {
        let mut fids = Vec::with_capacity(runs);
        let mut params = None;
        for _ in 0..runs {
            let o = it.next().flatten().ok_or_else(|| HarnessError::Contract(format!("rank {rank} job never ran")))??;
            if params.is_some_and(|p| p != o.params) {
                return Err(HarnessError::Contract(format!("rank {rank} runs disagree on parameter count")));
            }
            params = Some(o.params);
            fids.push(o.fid);
        }
        let stats = aggregate_runs(&fids)?;
        rows.push(SweepRow { rank, params: params.unwrap_or(0), per_run_fid: fids, fid_mean: stats.mean, fid_std: stats.std });
    }
    Ok(rows)
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = format!("{SWEEP_HEADER}\n");
    for r in rows {
        writeln!(s, "{},{},{:.6},{:.6}", r.rank, r.params, r.fid_mean, r.fid_std).expect("string write");
    }
    s
}
