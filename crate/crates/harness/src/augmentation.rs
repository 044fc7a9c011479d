//! Side-by-side comparison of the three prompt-augmentation strategies.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use msdm_core::rng::derive_seed;
use msdm_core::synthdata::{augment, DatasetManifest, Origin, Strategy};
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{HarnessError, Result};

pub const COMPARISON_HEADER: &str = "strategy,default,train_originals,paraphrases,train_prompts,originals_kept,swapped,expected_prompts,identity_holds,fid_dev";

/// Prompt counts of one strategy, with the count its definition predicts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrategyRow {
    pub strategy: Strategy,
    pub default: bool,
    /// Originals linked to training images before augmentation (n).
    pub train_originals: usize,
    /// Rewrites of those originals (m).
    pub paraphrases: usize,
    /// Prompts linked to training images afterwards.
    pub train_prompts: usize,
    pub originals_kept: usize,
    pub swapped: usize,
    /// n + m for add, n for substitute, m for replace.
    pub expected_prompts: usize,
    pub identity_holds: bool,
    /// Mean per-prompt dev FID of an MSDM trained on this variant, when trained.
    pub fid_dev: Option<f64>,
}

fn train_originals(m: &DatasetManifest) -> BTreeSet<String> {
    let index = m.prompt_index();
    m.train_prompt_ids()
        .into_iter()
        .filter(|id| index.get(id.as_str()).is_some_and(|p| p.origin == Origin::Original))
        .collect()
}

/// Counts for one strategy applied to `paraphrased` (split and rewritten, not yet augmented).
pub fn strategy_counts(paraphrased: &DatasetManifest, augmented: &DatasetManifest, fraction: f64) -> Result<StrategyRow> {
    let strategy = augmented
        .strategy
        .ok_or_else(|| HarnessError::Contract("augmented manifest carries no strategy tag".into()))?;
    let originals = train_originals(paraphrased);
    let n = originals.len();
    let m = paraphrased
        .paraphrase_pool
        .iter()
        .filter(|p| p.parent_id.as_ref().is_some_and(|id| originals.contains(id)))
        .count();
    let after = augmented.train_prompt_ids();
    let kept = after.iter().filter(|id| originals.contains(*id)).count();
    let expected = match strategy {
        Strategy::Add => n + m,
        Strategy::Substitute => n,
        Strategy::Replace => m,
    };
    let swapped = n - kept;
    let expected_swapped = match strategy {
        Strategy::Add => 0,
        Strategy::Substitute => (fraction * n as f64).round() as usize,
        Strategy::Replace => n,
    };
    Ok(StrategyRow {
        strategy,
        default: strategy == Strategy::DEFAULT,
        train_originals: n,
        paraphrases: m,
        train_prompts: after.len(),
        originals_kept: kept,
        swapped,
        expected_prompts: expected,
        identity_holds: after.len() == expected && swapped == expected_swapped,
        fid_dev: None,
    })
}

/// Augment `paraphrased` under every strategy and count the results.
pub fn compare_strategies(cfg: &ExperimentConfig, paraphrased: &DatasetManifest) -> Result<Vec<(StrategyRow, DatasetManifest)>> {
    Strategy::ALL
        .iter()
        .map(|&s| {
            let m = augment(paraphrased, s, cfg.augment_fraction, derive_seed(cfg.seed, "augment"))?;
            Ok((strategy_counts(paraphrased, &m, cfg.augment_fraction)?, m))
        })
        .collect()
}

pub fn comparison_csv(rows: &[StrategyRow]) -> String {
    let mut s = format!("{COMPARISON_HEADER}\n");
    for r in rows {
        let fid = r.fid_dev.map(|f| format!("{f:.6}")).unwrap_or_default();
        writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{fid}",
            r.strategy,
            if r.default { "default" } else { "" },
            r.train_originals,
            r.paraphrases,
            r.train_prompts,
            r.originals_kept,
            r.swapped,
            r.expected_prompts,
            r.identity_holds
        )
        .expect("string write");
    }
    s
}
