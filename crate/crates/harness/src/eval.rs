//! Image sets on disk, evaluation prompts, sample generation and the metric suite.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use msdm_core::image::RgbImage;
use msdm_core::metrics::{
    aggregate_runs, agreement_pairs, default_assumptions, diversity, fbd, fid, fidelity, Embedder, EmbeddingSet,
    MetricReport, PromptMetrics, RunStats, Source,
};
use msdm_core::rng::{derive_seed, derive_seed_index, Stream};
use msdm_core::synthdata::{paraphrase, render_scene_sized, DatasetManifest, Origin, PromptRecord};
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};
use crate::model::Model;

const SET_MANIFEST: &str = "manifest.json";
/// Images per model in large-scale generation mode.
pub const LARGE_EVAL_IMAGES: usize = 5000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SetItem {
    pub file: String,
    pub prompt_id: String,
    pub text: String,
    /// Set for rephrased prompts: the original they pair with.
    pub parent_id: Option<String>,
    pub seed: u64,
    pub pixel_hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SetManifest {
    pub label: String,
    pub source: Source,
    pub items: Vec<SetItem>,
}

/// Labelled images grouped by prompt, with the images held in memory.
#[derive(Clone, Debug)]
pub struct ImageSet {
    pub manifest: SetManifest,
    pub images: Vec<RgbImage>,
}

impl ImageSet {
    pub fn new(label: &str, source: Source) -> Self {
        Self { manifest: SetManifest { label: label.into(), source, items: Vec::new() }, images: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn push(&mut self, img: RgbImage, prompt: &EvalText, seed: u64) {
        let n = self.images.len();
        self.manifest.items.push(SetItem {
            file: format!("{n:05}.png"),
            prompt_id: prompt.id.clone(),
            text: prompt.text.clone(),
            parent_id: prompt.parent_id.clone(),
            seed,
            pixel_hash: img.pixel_hash(),
        });
        self.images.push(img);
    }

    /// Image indices per prompt id.
    pub fn groups(&self) -> BTreeMap<&str, Vec<usize>> {
        let mut g: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (i, it) in self.manifest.items.iter().enumerate() {
            g.entry(it.prompt_id.as_str()).or_default().push(i);
        }
        g
    }

    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        for (it, img) in self.manifest.items.iter().zip(&self.images) {
            img.save_png(dir.join(&it.file))?;
        }
        std::fs::write(dir.join(SET_MANIFEST), serde_json::to_string_pretty(&self.manifest)?)?;
        Ok(())
    }

    /// Load a set, checking every image against its recorded pixel hash.
    pub fn read(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest: SetManifest = serde_json::from_str(&std::fs::read_to_string(dir.join(SET_MANIFEST))?)?;
        let mut images = Vec::with_capacity(manifest.items.len());
        for it in &manifest.items {
            let img = RgbImage::load_png(dir.join(&it.file))?;
            if img.pixel_hash() != it.pixel_hash {
                return Err(HarnessError::Contract(format!("{} does not match its manifest hash", it.file)));
            }
            images.push(img);
        }
        Ok(Self { manifest, images })
    }
}

/// A prompt as used at evaluation time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalText {
    pub id: String,
    pub text: String,
    pub parent_id: Option<String>,
}

impl From<&PromptRecord> for EvalText {
    fn from(p: &PromptRecord) -> Self {
        Self { id: p.id.clone(), text: p.text.clone(), parent_id: None }
    }
}

/// An original evaluation prompt and its held-out rewrite.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalPrompt {
    pub original: PromptRecord,
    pub rephrased: EvalText,
}

/// Pick `count` original prompts linked to held-out images, preferring those
/// never paired with a training image. Each is paired with a rewrite drawn under
/// an evaluation seed whose text never occurs in training.
pub fn select_eval_prompts(m: &DatasetManifest, count: usize, seed: u64) -> Result<Vec<EvalPrompt>> {
    let index = m.prompt_index();
    let exclusive: BTreeSet<&str> = m.split.validation_prompts.iter().map(String::as_str).collect();
    let linked: BTreeSet<&str> =
        m.validation_images().iter().flat_map(|im| im.prompt_ids.iter().map(String::as_str)).collect();
    let originals = |ids: &mut dyn Iterator<Item = &str>| -> Vec<&PromptRecord> {
        ids.filter_map(|id| index.get(id).copied()).filter(|p| p.origin == Origin::Original).collect()
    };
    let first = originals(&mut exclusive.iter().copied());
    let rest = originals(&mut linked.iter().copied().filter(|id| !exclusive.contains(id)));
    if first.len() + rest.len() < count {
        return Err(HarnessError::Config(format!(
            "asked for {count} evaluation prompts, held-out images link only {} originals",
            first.len() + rest.len()
        )));
    }
    let mut r = Stream::new(derive_seed(seed, "eval-prompts"));
    let candidates: Vec<&PromptRecord> = if first.len() >= count {
        first
    } else {
        let mut extra: Vec<&PromptRecord> = r
            .sample_without_replacement(rest.len(), count - first.len())
            .into_iter()
            .map(|i| rest[i])
            .collect();
        extra.sort_by(|a, b| a.id.cmp(&b.id));
        first.into_iter().chain(extra).collect()
    };
    let mut seen: HashSet<&str> = m.prompts.iter().map(|p| p.text.as_str()).collect();
    seen.extend(m.paraphrase_pool.iter().map(|p| p.text.as_str()));
    let mut picked = r.sample_without_replacement(candidates.len(), count);
    picked.sort_unstable();
    let eval_seed = derive_seed(seed, "eval-paraphrase");
    let mut out = Vec::with_capacity(count);
    for i in picked {
        let p = candidates[i];
        let rewrites = paraphrase(p, 8, eval_seed)?;
        let Some(rw) = rewrites.into_iter().find(|q| !seen.contains(q.text.as_str())) else {
            return Err(HarnessError::Config(format!("no unseen rewrite available for {}", p.id)));
        };
        out.push(EvalPrompt {
            original: p.clone(),
            rephrased: EvalText { id: format!("{}-eval", p.id), text: rw.text, parent_id: Some(p.id.clone()) },
        });
    }
    Ok(out)
}

/// Which real images stand in for a prompt's ground truth.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reference {
    /// Held-out images with matching attributes, topped up with rendered scenes.
    Dev,
    /// Rendered scenes only, under seeds never used elsewhere.
    Test,
}

/// Real reference images per original prompt (`n` each) under `seed`.
pub fn real_reference(m: &DatasetManifest, prompts: &[EvalPrompt], n: usize, seed: u64, kind: Reference) -> Result<ImageSet> {
    let label = match kind {
        Reference::Dev => "real-dev",
        Reference::Test => "real-test",
    };
    let side = m.config.image_size;
    let mut set = ImageSet::new(label, Source::Real);
    for ep in prompts {
        let text = EvalText::from(&ep.original);
        let mut taken = 0;
        if kind == Reference::Dev {
            for im in m.validation_images().into_iter().filter(|im| im.attrs == ep.original.attrs).take(n) {
                set.push(im.render(side), &text, im.seed);
                taken += 1;
            }
        }
        let base = derive_seed(derive_seed(seed, label), &ep.original.id);
        for j in taken..n {
            let s = derive_seed_index(base, j as u64);
            set.push(render_scene_sized(&ep.original.attrs, s, side), &text, s);
        }
    }
    Ok(set)
}

/// `n_per_prompt` samples for every prompt; image `j` of prompt `p` uses the
/// seed derived from `(seed, p.id, j)`.
pub fn generate_set(model: &Model, prompts: &[EvalText], n_per_prompt: usize, seed: u64, batch: usize) -> Result<ImageSet> {
    let mut texts = Vec::new();
    let mut seeds = Vec::new();
    let mut owners = Vec::new();
    for p in prompts {
        let base = derive_seed(seed, &p.id);
        for j in 0..n_per_prompt {
            texts.push(p.text.as_str());
            seeds.push(derive_seed_index(base, j as u64));
            owners.push(p);
        }
    }
    let images = model.sample(&texts, &seeds, batch)?;
    let mut set = ImageSet::new(&model.meta.name, Source::Generated);
    for ((img, p), s) in images.into_iter().zip(owners).zip(seeds) {
        set.push(img, p, s);
    }
    Ok(set)
}

/// Originals followed by their rewrites.
pub fn eval_texts(prompts: &[EvalPrompt], with_rephrased: bool) -> Vec<EvalText> {
    let mut v: Vec<EvalText> = prompts.iter().map(|p| EvalText::from(&p.original)).collect();
    if with_rephrased {
        v.extend(prompts.iter().map(|p| p.rephrased.clone()));
    }
    v
}

/// Everything [`evaluate`] computes.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub report: MetricReport,
    pub prompts: Vec<PromptMetrics>,
    /// Mean per-prompt FID of each generated run.
    pub run_fids: Vec<f64>,
    pub images_per_prompt: usize,
}

fn embed_group(e: &Embedder, set: &ImageSet, idx: &[usize], group: &str, source: Source) -> Result<EmbeddingSet> {
    Ok(e.embed_all(idx.iter().map(|&i| (&set.images[i], group)), source)?)
}

/// Per-prompt mean FID of one generated run against the real reference.
pub fn dev_fid(real: &ImageSet, generated: &ImageSet, embedder: &Embedder) -> Result<f64> {
    let (per_prompt, _) = per_prompt_fids(real, generated, embedder)?;
    Ok(per_prompt.values().sum::<f64>() / per_prompt.len() as f64)
}

fn per_prompt_fids(real: &ImageSet, run: &ImageSet, embedder: &Embedder) -> Result<(BTreeMap<String, f64>, EmbeddingSet)> {
    let rg = real.groups();
    let gg = run.groups();
    let mut out = BTreeMap::new();
    let mut pooled: Option<EmbeddingSet> = None;
    for (pid, ridx) in &rg {
        let Some(gidx) = gg.get(pid) else {
            return Err(HarnessError::Contract(format!("generated set {} lacks prompt {pid}", run.manifest.label)));
        };
        let re = embed_group(embedder, real, ridx, pid, Source::Real)?;
        let ge = embed_group(embedder, run, gidx, pid, Source::Generated)?;
        out.insert(pid.to_string(), fid(&re, &ge)?);
        let p = pooled.get_or_insert_with(|| EmbeddingSet::new(ge.dim(), Source::Generated));
        for row in ge.rows() {
            p.push(row, pid)?;
        }
    }
    if out.is_empty() {
        return Err(HarnessError::Contract("real reference has no prompt groups".into()));
    }
    Ok((out, pooled.expect("at least one group")))
}

/// Score generated runs against a real reference.
///
/// Prompt groups of the real set define the evaluated originals; every run must
/// contain all of them. Groups whose `parent_id` names an original are its
/// rephrased counterpart for agreement.
pub fn evaluate(real: &ImageSet, runs: &[ImageSet], embedder: &Embedder) -> Result<Evaluation> {
    if runs.is_empty() {
        return Err(HarnessError::Contract("no generated runs to evaluate".into()));
    }
    let rg = real.groups();
    let mut real_pool = EmbeddingSet::new(0, Source::Real);
    for (pid, idx) in &rg {
        let e = embed_group(embedder, real, idx, pid, Source::Real)?;
        if real_pool.is_empty() {
            real_pool = EmbeddingSet::new(e.dim(), Source::Real);
        }
        for row in e.rows() {
            real_pool.push(row, pid)?;
        }
    }
    let mut gen_pool: Option<EmbeddingSet> = None;
    let mut run_fids = Vec::with_capacity(runs.len());
    let mut all_fids = Vec::new();
    let mut fid_acc: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut div_acc: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut agree_acc: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut images_per_prompt = usize::MAX;
    for run in runs {
        let (fids, pooled) = per_prompt_fids(real, run, embedder)?;
        run_fids.push(fids.values().sum::<f64>() / fids.len() as f64);
        all_fids.extend(fids.values().copied());
        for (k, v) in fids {
            fid_acc.entry(k).or_default().push(v);
        }
        let gp = gen_pool.get_or_insert_with(|| EmbeddingSet::new(pooled.dim(), Source::Generated));
        for (i, row) in pooled.rows().enumerate() {
            gp.push(row, &pooled.groups[i])?;
        }
        let gg = run.groups();
        let mut originals = Vec::new();
        let mut rephrased = Vec::new();
        let mut pair_ids = Vec::new();
        for (pid, _) in &rg {
            let set = pooled.subset(pid);
            images_per_prompt = images_per_prompt.min(set.len());
            div_acc.entry(pid.to_string()).or_default().push(diversity(&set)?);
        }
        let mut children: BTreeMap<&str, &str> = BTreeMap::new();
        for it in &run.manifest.items {
            if let Some(parent) = &it.parent_id {
                children.insert(parent.as_str(), it.prompt_id.as_str());
            }
        }
        for (pid, _) in &rg {
            if let Some(child) = children.get(pid) {
                originals.push(pooled.subset(pid));
                rephrased.push(embed_group(embedder, run, &gg[child], child, Source::Generated)?);
                pair_ids.push(pid.to_string());
            }
        }
        if originals.is_empty() {
            return Err(HarnessError::Contract(format!("run {} has no rephrased prompt groups", run.manifest.label)));
        }
        for (pid, a) in pair_ids.into_iter().zip(agreement_pairs(&originals, &rephrased)?) {
            agree_acc.entry(pid).or_default().push(a);
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let stats = if runs.len() >= 2 { aggregate_runs(&run_fids)? } else { RunStats { mean: run_fids[0], std: 0.0 } };
    let prompts: Vec<PromptMetrics> = fid_acc
        .iter()
        .map(|(pid, f)| PromptMetrics {
            prompt_id: pid.clone(),
            fid: mean(f),
            diversity: mean(&div_acc[pid]),
            agreement_pair: agree_acc.get(pid).map(|a| mean(a)),
        })
        .collect();
    let agreements: Vec<f64> = agree_acc.values().flatten().copied().collect();
    let mut assumptions = default_assumptions();
    assumptions.push(format!(
        "{} prompts x {images_per_prompt} images per prompt x {} runs; real reference {} images",
        rg.len(),
        runs.len(),
        real.len()
    ));
    assumptions.push("real references: held-out images of matching attributes, topped up with rendered scenes".into());
    let report = MetricReport {
        fidelity: fidelity(&all_fids)?,
        agreement: mean(&agreements),
        diversity: mean(&prompts.iter().map(|p| p.diversity).collect::<Vec<_>>()),
        fbd: fbd(&real_pool, gen_pool.as_ref().expect("at least one run"))?,
        fid_mean: stats.mean,
        fid_std: stats.std,
        run_count: runs.len(),
        embedder: embedder.kind().id().to_string(),
        assumptions,
    };
    Ok(Evaluation { report, prompts, run_fids, images_per_prompt })
}

/// One row of the model comparison table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub model: String,
    pub fid_dev: RunStats,
    pub fid_test: RunStats,
    pub fidelity: f64,
    pub agreement: f64,
    pub diversity: f64,
    pub fbd: f64,
}

impl SummaryRow {
    pub fn new(model: &str, dev: &MetricReport, test: &MetricReport) -> Self {
        Self {
            model: model.to_string(),
            fid_dev: RunStats { mean: dev.fid_mean, std: dev.fid_std },
            fid_test: RunStats { mean: test.fid_mean, std: test.fid_std },
            fidelity: dev.fidelity,
            agreement: dev.agreement,
            diversity: dev.diversity,
            fbd: dev.fbd,
        }
    }
}

pub const SUMMARY_HEADER: &str = "model,fid_dev,fid_test,fidelity,agreement,diversity,fbd";

pub fn summary_csv(rows: &[SummaryRow]) -> String {
    let mut s = format!("{SUMMARY_HEADER}\n");
    for r in rows {
        writeln!(
            s,
            "{},{},{},{:.2},{:.4},{:.4},{:.4}",
            r.model, r.fid_dev, r.fid_test, r.fidelity, r.agreement, r.diversity, r.fbd
        )
        .expect("string write");
    }
    s
}

/// Fail unless two sets hold the same prompt groups.
pub fn check_same_prompts(a: &ImageSet, b: &ImageSet) -> Result<()> {
    let ka: BTreeSet<&str> = a.groups().into_keys().collect();
    let kb: BTreeSet<&str> = b.groups().into_keys().collect();
    if ka != kb {
        return Err(HarnessError::Contract(format!(
            "prompt groups differ between {} and {}",
            a.manifest.label, b.manifest.label
        )));
    }
    Ok(())
}
