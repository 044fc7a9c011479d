//! Procedural image/prompt datasets: attributes, scenes, prompt grammar,
//! pairing, hold-out split and paraphrase augmentation.

mod prompts;
mod render;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use prompts::{original_id, paraphrase, render_prompt, template_slots, Slots, TEMPLATE_COUNT};
pub use render::{render_scene, render_scene_sized, rim_color, HUE_BASE};

use crate::error::{config_err, Error, Result};
use crate::image::RgbImage;
use crate::rng::{derive_seed, derive_seed_index, Stream};

pub const DEFAULT_IMAGE_SIZE: usize = 32;
pub const MIN_PROMPTS_PER_IMAGE: usize = 7;
pub const MAX_PROMPTS_PER_IMAGE: usize = 14;
pub const MAX_COUNT: u8 = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Finding {
    Polyp,
    Clean,
    Instrument,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Endo,
    Xray,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SceneAttributes {
    pub finding: Finding,
    pub count: u8,
    pub modality: Modality,
    /// Palette class, an index into [`HUE_BASE`].
    pub hue: u8,
}

impl SceneAttributes {
    pub fn validate(&self) -> Result<()> {
        let ok_count = match self.finding {
            Finding::Clean => self.count == 0,
            _ => (1..=MAX_COUNT).contains(&self.count),
        };
        if !ok_count {
            return config_err(format!("{:?} with count {}", self.finding, self.count));
        }
        if self.hue as usize >= HUE_BASE.len() {
            return config_err(format!("hue class {} out of range", self.hue));
        }
        Ok(())
    }

    /// Stable short label, e.g. `polyp2-endo-h1`.
    pub fn key(&self) -> String {
        let f = match self.finding {
            Finding::Polyp => "polyp",
            Finding::Clean => "clean",
            Finding::Instrument => "instrument",
        };
        let m = match self.modality {
            Modality::Endo => "endo",
            Modality::Xray => "xray",
        };
        format!("{f}{}-{m}-h{}", self.count, self.hue)
    }
}

/// Which palette family a dataset draws from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    /// Hue classes 0–2.
    Target,
    /// Hue classes 3–5, never seen in the target domain.
    Generic,
}

impl Domain {
    pub fn hues(self) -> std::ops::Range<u8> {
        match self {
            Self::Target => 0..3,
            Self::Generic => 3..6,
        }
    }
}

impl FromStr for Domain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "target" => Ok(Self::Target),
            "generic" => Ok(Self::Generic),
            o => config_err(format!("unknown domain {o:?}")),
        }
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "endo" => Ok(Self::Endo),
            "xray" => Ok(Self::Xray),
            o => config_err(format!("unknown modality {o:?}")),
        }
    }
}

/// Every valid attribute combination of a domain, optionally restricted to one modality.
pub fn all_attributes(domain: Domain, modality: Option<Modality>) -> Vec<SceneAttributes> {
    let mut out = Vec::new();
    let findings = [(Finding::Polyp, 1..=MAX_COUNT), (Finding::Clean, 0..=0), (Finding::Instrument, 1..=MAX_COUNT)];
    for m in [Modality::Endo, Modality::Xray] {
        if modality.is_some_and(|want| want != m) {
            continue;
        }
        for hue in domain.hues() {
            for (finding, counts) in findings.clone() {
                for count in counts {
                    out.push(SceneAttributes { finding, count, modality: m, hue });
                }
            }
        }
    }
    out
}

/// Every original prompt record of a domain: each attribute combination under each template.
pub fn original_prompts(domain: Domain, modality: Option<Modality>) -> Vec<PromptRecord> {
    all_attributes(domain, modality)
        .iter()
        .flat_map(|a| (0..TEMPLATE_COUNT).map(move |t| render_prompt(a, t).expect("valid attributes and template")))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    Original,
    Paraphrase,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptRecord {
    pub id: String,
    pub text: String,
    pub attrs: SceneAttributes,
    pub origin: Origin,
    pub parent_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub template: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: String,
    pub file: String,
    pub attrs: SceneAttributes,
    pub prompt_ids: Vec<String>,
    /// Seed the scene was rendered with.
    pub seed: u64,
}

impl ImageRecord {
    pub fn render(&self, side: usize) -> RgbImage {
        render_scene_sized(&self.attrs, self.seed, side)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Add,
    Substitute,
    Replace,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::Add, Strategy::Substitute, Strategy::Replace];
    /// Keeping the originals and adding rewrites is the recommended setting.
    pub const DEFAULT: Strategy = Strategy::Add;

    pub fn name(self) -> &'static str {
        match self {
            Self::Add => "add",
            Self::Substitute => "substitute",
            Self::Replace => "replace",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "add" => Ok(Self::Add),
            "substitute" => Ok(Self::Substitute),
            "replace" => Ok(Self::Replace),
            o => config_err(format!("unknown augmentation strategy {o:?}")),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<String>,
    pub validation: Vec<String>,
    /// Prompts linked only to validation images.
    pub validation_prompts: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub n_images: usize,
    pub image_size: usize,
    pub domain: Domain,
    pub modality: Option<Modality>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self { n_images: 200, image_size: DEFAULT_IMAGE_SIZE, domain: Domain::Target, modality: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub config: DatasetConfig,
    /// Active prompt table.
    pub prompts: Vec<PromptRecord>,
    pub images: Vec<ImageRecord>,
    pub split: Split,
    /// Generated rewrites not yet in the active table.
    #[serde(default)]
    pub paraphrase_pool: Vec<PromptRecord>,
    pub strategy: Option<Strategy>,
}

/// Sample `n_images` scenes uniformly over the domain's attribute grid and
/// link each to 7–14 prompts drawn from its own attribute combination.
pub fn build_dataset(config: &DatasetConfig, seed: u64) -> Result<DatasetManifest> {
    if config.n_images < 20 {
        return config_err(format!("need at least 20 images, got {}", config.n_images));
    }
    if config.image_size < 8 || config.image_size % 4 != 0 {
        return config_err(format!("image size {} must be a multiple of 4, at least 8", config.image_size));
    }
    let grid = all_attributes(config.domain, config.modality);
    let mut r = Stream::new(derive_seed(seed, "dataset"));
    let mut prompts: BTreeMap<String, PromptRecord> = BTreeMap::new();
    let mut images = Vec::with_capacity(config.n_images);
    for i in 0..config.n_images {
        let attrs = grid[r.index(grid.len())];
        let k = r.range_inclusive(MIN_PROMPTS_PER_IMAGE, MAX_PROMPTS_PER_IMAGE);
        let mut templates = r.sample_without_replacement(TEMPLATE_COUNT, k);
        templates.sort_unstable();
        let mut ids = Vec::with_capacity(k);
        for t in templates {
            let p = render_prompt(&attrs, t)?;
            ids.push(p.id.clone());
            prompts.entry(p.id.clone()).or_insert(p);
        }
        let id = format!("img{i:05}");
        images.push(ImageRecord {
            file: format!("images/{id}.png"),
            id,
            attrs,
            prompt_ids: ids,
            seed: derive_seed_index(seed, i as u64),
        });
    }
    let train = images.iter().map(|im| im.id.clone()).collect();
    Ok(DatasetManifest {
        seed,
        config: config.clone(),
        prompts: prompts.into_values().collect(),
        images,
        split: Split { train, ..Split::default() },
        paraphrase_pool: Vec::new(),
        strategy: None,
    })
}

impl DatasetManifest {
    pub fn image(&self, id: &str) -> Option<&ImageRecord> {
        self.images.iter().find(|im| im.id == id)
    }

    pub fn prompt(&self, id: &str) -> Option<&PromptRecord> {
        self.prompts.iter().find(|p| p.id == id)
    }

    pub fn prompt_index(&self) -> HashMap<&str, &PromptRecord> {
        self.prompts.iter().map(|p| (p.id.as_str(), p)).collect()
    }

    fn images_in<'a>(&'a self, ids: &'a [String]) -> impl Iterator<Item = &'a ImageRecord> {
        let set: BTreeSet<&str> = ids.iter().map(String::as_str).collect();
        self.images.iter().filter(move |im| set.contains(im.id.as_str()))
    }

    pub fn train_images(&self) -> Vec<&ImageRecord> {
        self.images_in(&self.split.train).collect()
    }

    pub fn validation_images(&self) -> Vec<&ImageRecord> {
        self.images_in(&self.split.validation).collect()
    }

    /// Ids of prompts linked to at least one training image.
    pub fn train_prompt_ids(&self) -> BTreeSet<String> {
        self.train_images().iter().flat_map(|im| im.prompt_ids.iter().cloned()).collect()
    }

    /// Manifest rendered to JSONL/JSON text: `(prompts.jsonl, images.jsonl, split.json)`.
    pub fn to_files(&self) -> Result<(String, String, String)> {
        let mut prompts = String::new();
        for p in &self.prompts {
            prompts.push_str(&serde_json::to_string(p)?);
            prompts.push('\n');
        }
        let mut images = String::new();
        for im in &self.images {
            images.push_str(&serde_json::to_string(im)?);
            images.push('\n');
        }
        let meta = SplitFile {
            seed: self.seed,
            config: self.config.clone(),
            split: self.split.clone(),
            strategy: self.strategy,
            paraphrase_pool: self.paraphrase_pool.clone(),
        };
        Ok((prompts, images, serde_json::to_string_pretty(&meta)?))
    }

    /// Write the manifest files and one PNG per image under `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir.join("images"))?;
        let (p, i, s) = self.to_files()?;
        std::fs::write(dir.join("prompts.jsonl"), p)?;
        std::fs::write(dir.join("images.jsonl"), i)?;
        std::fs::write(dir.join("split.json"), s)?;
        for im in &self.images {
            im.render(self.config.image_size).save_png(dir.join(&im.file))?;
        }
        Ok(())
    }

    pub fn read(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let prompts = read_jsonl(&dir.join("prompts.jsonl"))?;
        let images = read_jsonl(&dir.join("images.jsonl"))?;
        let meta: SplitFile = serde_json::from_str(&std::fs::read_to_string(dir.join("split.json"))?)?;
        Ok(Self {
            seed: meta.seed,
            config: meta.config,
            prompts,
            images,
            split: meta.split,
            paraphrase_pool: meta.paraphrase_pool,
            strategy: meta.strategy,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct SplitFile {
    seed: u64,
    config: DatasetConfig,
    split: Split,
    strategy: Option<Strategy>,
    #[serde(default)]
    paraphrase_pool: Vec<PromptRecord>,
}

fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let f = std::fs::File::open(path)?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

/// Write records as JSON lines.
pub fn write_jsonl<T: Serialize>(mut sink: impl Write, rows: &[T]) -> Result<()> {
    for r in rows {
        serde_json::to_writer(&mut sink, r)?;
        sink.write_all(b"\n")?;
    }
    Ok(())
}

/// Image-level hold-out. Prompts linked only to held-out images are listed as
/// validation prompts; the same seed always yields the same split.
pub fn split_holdout(manifest: &DatasetManifest, fraction: f64, seed: u64) -> Result<DatasetManifest> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return config_err(format!("hold-out fraction {fraction} must lie in (0, 1)"));
    }
    let n = manifest.images.len();
    let k = ((n as f64 * fraction).round() as usize).clamp(1, n - 1);
    let mut r = Stream::new(derive_seed(seed, "holdout"));
    let held: BTreeSet<usize> = r.sample_without_replacement(n, k).into_iter().collect();
    let mut out = manifest.clone();
    out.split.train.clear();
    out.split.validation.clear();
    for (i, im) in manifest.images.iter().enumerate() {
        if held.contains(&i) {
            out.split.validation.push(im.id.clone());
        } else {
            out.split.train.push(im.id.clone());
        }
    }
    let train_prompts = out.train_prompt_ids();
    let val_prompts: BTreeSet<String> = out
        .validation_images()
        .iter()
        .flat_map(|im| im.prompt_ids.iter().cloned())
        .filter(|p| !train_prompts.contains(p))
        .collect();
    out.split.validation_prompts = val_prompts.into_iter().collect();
    Ok(out)
}

/// Generate `k` rewrites of every training prompt into the manifest's paraphrase pool.
pub fn generate_paraphrases(manifest: &DatasetManifest, k: usize, seed: u64) -> Result<DatasetManifest> {
    let train = manifest.train_prompt_ids();
    let mut out = manifest.clone();
    out.paraphrase_pool.clear();
    for p in manifest.prompts.iter().filter(|p| p.origin == Origin::Original && train.contains(&p.id)) {
        out.paraphrase_pool.extend(paraphrase(p, k, seed)?);
    }
    Ok(out)
}

/// Apply an augmentation strategy over the training prompts.
///
/// * `add`: originals plus every rewrite.
/// * `substitute`: exactly `round(fraction · n)` originals each swapped for one of its rewrites.
/// * `replace`: rewrites only.
///
/// Image links follow the prompt table; prompts used only by validation images are left untouched.
pub fn augment(manifest: &DatasetManifest, strategy: Strategy, fraction: f64, seed: u64) -> Result<DatasetManifest> {
    if !(0.0..=1.0).contains(&fraction) {
        return config_err(format!("augmentation fraction {fraction} outside [0, 1]"));
    }
    if manifest.paraphrase_pool.is_empty() {
        return config_err("augment needs generated paraphrases");
    }
    let train = manifest.train_prompt_ids();
    let mut children: BTreeMap<&str, Vec<&PromptRecord>> = BTreeMap::new();
    for p in &manifest.paraphrase_pool {
        if let Some(parent) = &p.parent_id {
            children.entry(parent.as_str()).or_default().push(p);
        }
    }
    let originals: Vec<&PromptRecord> =
        manifest.prompts.iter().filter(|p| p.origin == Origin::Original && train.contains(&p.id)).collect();
    let untouched: Vec<&PromptRecord> = manifest.prompts.iter().filter(|p| !train.contains(&p.id)).collect();

    let mut r = Stream::new(derive_seed(seed, strategy.name()));
    // original id → ids that replace it in image links
    let mut mapping: HashMap<String, Vec<String>> = HashMap::new();
    let mut active: Vec<PromptRecord> = Vec::new();
    match strategy {
        Strategy::Add => {
            for o in &originals {
                active.push((*o).clone());
                let mut ids = vec![o.id.clone()];
                for c in children.get(o.id.as_str()).into_iter().flatten() {
                    active.push((*c).clone());
                    ids.push(c.id.clone());
                }
                mapping.insert(o.id.clone(), ids);
            }
        }
        Strategy::Substitute => {
            let n = originals.len();
            let swap: BTreeSet<usize> =
                r.sample_without_replacement(n, (fraction * n as f64).round() as usize).into_iter().collect();
            for (i, o) in originals.iter().enumerate() {
                let kids = children.get(o.id.as_str()).filter(|k| !k.is_empty());
                let chosen = match (swap.contains(&i), kids) {
                    (true, Some(k)) => (*k[r.index(k.len())]).clone(),
                    (true, None) => return config_err(format!("no paraphrase available for {}", o.id)),
                    (false, _) => (*o).clone(),
                };
                mapping.insert(o.id.clone(), vec![chosen.id.clone()]);
                active.push(chosen);
            }
        }
        Strategy::Replace => {
            for o in &originals {
                let kids = children.get(o.id.as_str()).cloned().unwrap_or_default();
                if kids.is_empty() {
                    return config_err(format!("no paraphrase available for {}", o.id));
                }
                mapping.insert(o.id.clone(), kids.iter().map(|c| c.id.clone()).collect());
                active.extend(kids.into_iter().cloned());
            }
        }
    }
    let mut out = manifest.clone();
    let train_images: BTreeSet<&str> = manifest.split.train.iter().map(String::as_str).collect();
    for im in out.images.iter_mut().filter(|im| train_images.contains(im.id.as_str())) {
        im.prompt_ids = im.prompt_ids.iter().flat_map(|p| mapping.get(p).cloned().unwrap_or_else(|| vec![p.clone()])).collect();
    }
    active.extend(untouched.into_iter().cloned());
    out.prompts = active;
    out.strategy = Some(strategy);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clean_has_no_count() {
        let bad = SceneAttributes { finding: Finding::Clean, count: 1, modality: Modality::Endo, hue: 0 };
        assert!(bad.validate().is_err());
        let bad = SceneAttributes { finding: Finding::Polyp, count: 0, modality: Modality::Endo, hue: 0 };
        assert!(bad.validate().is_err());
        assert_eq!(all_attributes(Domain::Target, None).len(), 42);
        assert!(all_attributes(Domain::Generic, Some(Modality::Xray)).iter().all(|a| a.hue >= 3));
    }

    #[test]
    fn small_dataset_shape() {
        let m = build_dataset(&DatasetConfig { n_images: 30, ..Default::default() }, 3).unwrap();
        assert_eq!(m.images.len(), 30);
        let idx = m.prompt_index();
        for im in &m.images {
            assert!((MIN_PROMPTS_PER_IMAGE..=MAX_PROMPTS_PER_IMAGE).contains(&im.prompt_ids.len()));
            assert!(im.prompt_ids.iter().all(|p| idx[p.as_str()].attrs == im.attrs));
        }
        assert!(build_dataset(&DatasetConfig { n_images: 19, ..Default::default() }, 3).is_err());
    }
}
