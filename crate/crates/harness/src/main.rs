use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use msdm_annotation::task::{PromptPair, StudyPrompt, DEFAULT_REFERENCES, IMAGES_PER_SET, TASK_COUNT};
use msdm_annotation::{AnnotationError, StudyInput};
use msdm_core::metrics::MetricReport;
use msdm_core::rng::derive_seed;
use msdm_harness::augmentation::{compare_strategies, comparison_csv};
use msdm_harness::correlate::correlate_ranks;
use msdm_harness::eval::{
    check_same_prompts, dev_fid, eval_texts, generate_set, real_reference, select_eval_prompts, summary_csv, ImageSet,
    Reference, SummaryRow, LARGE_EVAL_IMAGES,
};
use msdm_harness::experiment::{eval_plan, generate_runs, generation_seed, score_runs, EvalPlan, Scored};
use msdm_harness::model::Model;
use msdm_harness::pipeline::{
    lora_finetune, prepare_generic, prepare_paraphrased, prepare_target, pretrain_base, train_msdm, RunResult, Trained,
    BASE_NAME,
};
use msdm_harness::sweep::{rank_sweep, sweep_csv};
use msdm_harness::{ExperimentConfig, HarnessError};

/// Train, fine-tune, sample and evaluate small text-to-image diffusion models.
#[derive(Parser)]
#[command(name = "msdm", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// `key = value` config file; defaults apply to missing keys.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set lora.rank=64`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> anyhow::Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        for kv in &self.overrides {
            let Some((k, v)) = kv.split_once('=') else {
                return Err(HarnessError::Config(format!("override {kv:?} is not KEY=VALUE")).into());
            };
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Build the synthetic datasets.
    Dataset {
        #[command(subcommand)]
        cmd: DatasetCmd,
    },
    /// Train a model.
    Train {
        #[command(subcommand)]
        cmd: TrainCmd,
    },
    /// LoRA sweeps.
    Sweep {
        #[command(subcommand)]
        cmd: SweepCmd,
    },
    /// Sample evaluation image sets from a saved model.
    Generate {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// One set of 5,000 images over the original evaluation prompts instead of `eval.runs` sets.
        #[arg(long)]
        large: bool,
    },
    /// Score generated runs against the real references.
    Evaluate {
        #[command(flatten)]
        config: ConfigArgs,
        /// Image-set directories written by `generate`, one per run.
        #[arg(long, required = true, num_args = 1..)]
        generated: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate, score and tabulate several saved models side by side.
    Report {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long = "model", required = true)]
        models: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Correlate expert rank tiers with automated metrics.
    Correlate {
        /// CSV from the annotation service's /export.
        #[arg(long)]
        export: PathBuf,
        /// `MODEL_ID=report.json`, repeatable.
        #[arg(long = "report", required = true)]
        reports: Vec<String>,
        #[arg(long, default_value_t = TASK_COUNT)]
        expected_tasks: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Prepare (if needed) and serve the blinded expert-rating study.
    ServeAnnotation {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
        #[arg(long)]
        data_dir: PathBuf,
        /// Three saved models; required when the study does not exist yet.
        #[arg(long = "model")]
        models: Vec<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_REFERENCES)]
        references: usize,
        /// Build the study and exit without serving.
        #[arg(long)]
        prepare_only: bool,
    },
    /// Prompt-augmentation experiments.
    Augment {
        #[command(subcommand)]
        cmd: AugmentCmd,
    },
}

#[derive(Subcommand)]
enum DatasetCmd {
    Build {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum TrainCmd {
    /// VAE then U-Net from scratch on the target domain.
    Msdm {
        #[command(flatten)]
        config: ConfigArgs,
        /// Skip generation and scoring after training.
        #[arg(long)]
        no_eval: bool,
    },
    /// Fine-tune LoRA adapters on a frozen base pretrained on the generic domain.
    Lora {
        #[command(flatten)]
        config: ConfigArgs,
        /// Saved base model; pretrained (and saved) when omitted.
        #[arg(long)]
        base: Option<PathBuf>,
        #[arg(long)]
        no_eval: bool,
    },
}

#[derive(Subcommand)]
enum SweepCmd {
    /// Fine-tune at every rank in `sweep.ranks`, `eval.runs` times each.
    Ranks {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        base: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum AugmentCmd {
    /// Apply add, substitute and replace and tabulate the prompt counts.
    Compare {
        #[command(flatten)]
        config: ConfigArgs,
        /// Also train an MSDM per strategy and record its dev FID.
        #[arg(long)]
        train: bool,
    },
}

fn write_json<T: serde::Serialize>(path: &Path, v: &T) -> anyhow::Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(v)?).with_context(|| format!("writing {}", path.display()))
}

fn prepare_output(cfg: &ExperimentConfig) -> anyhow::Result<PathBuf> {
    std::fs::create_dir_all(&cfg.output).with_context(|| format!("creating {}", cfg.output.display()))?;
    cfg.save(cfg.output.join("config.txt"))?;
    Ok(cfg.output.clone())
}

fn dataset_build(cfg: &ExperimentConfig, out: Option<PathBuf>) -> anyhow::Result<()> {
    let dir = out.unwrap_or_else(|| cfg.output.join("dataset"));
    std::fs::create_dir_all(&dir)?;
    let target = prepare_target(cfg)?;
    let generic = prepare_generic(cfg)?;
    write_json(&dir.join("target.json"), &target)?;
    write_json(&dir.join("generic.json"), &generic)?;
    println!(
        "target: {} images ({} held out), {} prompts; generic: {} images -> {}",
        target.images.len(),
        target.split.validation.len(),
        target.prompts.len(),
        generic.images.len(),
        dir.display()
    );
    Ok(())
}

fn save_reports(dir: &Path, scored: &Scored) -> anyhow::Result<()> {
    write_json(&dir.join("report_dev.json"), &scored.dev.report)?;
    write_json(&dir.join("report_test.json"), &scored.test.report)?;
    write_json(&dir.join("prompts_dev.json"), &scored.dev.prompts)?;
    Ok(())
}

fn evaluate_model(cfg: &ExperimentConfig, plan: &EvalPlan, model: &Model) -> anyhow::Result<Scored> {
    let runs = generate_runs(cfg, plan, model)?;
    Ok(score_runs(plan, &runs)?)
}

fn save_trained(dir: &Path, t: &Trained) -> anyhow::Result<Vec<PathBuf>> {
    let files = t.model.save(dir)?;
    t.vae_curve.write_csv(dir.join("vae_loss.csv"))?;
    t.unet_curve.write_csv(dir.join("unet_loss.csv"))?;
    Ok(files)
}

fn train_msdm_cmd(cfg: &ExperimentConfig, no_eval: bool) -> anyhow::Result<()> {
    let out = prepare_output(cfg)?;
    let t0 = Instant::now();
    let target = prepare_target(cfg)?;
    let trained = train_msdm(cfg, &target)?;
    let dir = out.join(&trained.model.meta.name);
    let checkpoints = save_trained(&dir, &trained)?;
    let mut result = RunResult {
        model: trained.model.meta.name.clone(),
        config_digest: cfg.digest(),
        per_run_fid: Vec::new(),
        report: None,
        wall_clock_secs: 0.0,
        checkpoints,
        lora_rank: None,
        trainable_params: None,
        base_digest_before: None,
        base_digest_after: None,
    };
    if !no_eval {
        let plan = eval_plan(cfg, &target, Some(&trained.model.vae))?;
        let scored = evaluate_model(cfg, &plan, &trained.model)?;
        save_reports(&dir, &scored)?;
        result.per_run_fid = scored.dev.run_fids.clone();
        result.report = Some(scored.dev.report.clone());
    }
    result.wall_clock_secs = t0.elapsed().as_secs_f64();
    result.write(dir.join("run.json"))?;
    println!(
        "{}: eps loss {:.4} -> {:.4} (smoothed); saved to {}",
        result.model,
        trained.unet_curve.smoothed_at(10).unwrap_or(f64::NAN),
        trained.unet_curve.smoothed().last().copied().unwrap_or(f64::NAN),
        dir.display()
    );
    if let Some(r) = &result.report {
        println!("dev FID {:.4} ± {:.4} over {} runs, FBD {:.4}", r.fid_mean, r.fid_std, r.run_count, r.fbd);
    }
    Ok(())
}

fn load_or_pretrain_base(cfg: &ExperimentConfig, base: Option<&Path>) -> anyhow::Result<Model> {
    if let Some(dir) = base {
        return Model::load(dir).with_context(|| format!("loading base model from {}", dir.display()));
    }
    let generic = prepare_generic(cfg)?;
    let trained = pretrain_base(cfg, &generic)?;
    let dir = cfg.output.join(BASE_NAME);
    save_trained(&dir, &trained)?;
    println!("pretrained base saved to {}", dir.display());
    Ok(trained.model)
}

fn train_lora_cmd(cfg: &ExperimentConfig, base: Option<&Path>, no_eval: bool) -> anyhow::Result<()> {
    let out = prepare_output(cfg)?;
    let t0 = Instant::now();
    let target = prepare_target(cfg)?;
    let base = load_or_pretrain_base(cfg, base)?;
    let run = lora_finetune(cfg, &base, &target, cfg.lora_rank, derive_seed(cfg.seed, "lora"))?;
    let dir = out.join(&run.model.meta.name);
    let checkpoints = run.model.save(&dir)?;
    run.curve.write_csv(dir.join("lora_loss.csv"))?;
    let mut result = RunResult {
        model: run.model.meta.name.clone(),
        config_digest: cfg.digest(),
        per_run_fid: Vec::new(),
        report: None,
        wall_clock_secs: 0.0,
        checkpoints,
        lora_rank: Some(run.rank),
        trainable_params: Some(run.trainable_params),
        base_digest_before: Some(run.base_digest_before.clone()),
        base_digest_after: Some(run.base_digest_after.clone()),
    };
    if !no_eval {
        let plan = eval_plan(cfg, &target, Some(&base.vae))?;
        let scored = evaluate_model(cfg, &plan, &run.model)?;
        save_reports(&dir, &scored)?;
        let zero = evaluate_model(cfg, &plan, &base)?;
        let zdir = out.join(BASE_NAME);
        std::fs::create_dir_all(&zdir)?;
        save_reports(&zdir, &zero)?;
        println!("zero-shot base dev FID {:.4}, LoRA dev FID {:.4}", zero.dev.report.fid_mean, scored.dev.report.fid_mean);
        result.per_run_fid = scored.dev.run_fids.clone();
        result.report = Some(scored.dev.report.clone());
    }
    result.wall_clock_secs = t0.elapsed().as_secs_f64();
    result.write(dir.join("run.json"))?;
    println!("rank {} adapters ({} trainable parameters) saved to {}", run.rank, run.trainable_params, dir.display());
    Ok(())
}

fn sweep_cmd(cfg: &ExperimentConfig, base: Option<&Path>) -> anyhow::Result<()> {
    let out = prepare_output(cfg)?;
    let target = prepare_target(cfg)?;
    let base = load_or_pretrain_base(cfg, base)?;
    let plan = eval_plan(cfg, &target, Some(&base.vae))?;
    let rows = rank_sweep(cfg, &base, &target, &plan, &cfg.sweep_ranks)?;
    let csv = sweep_csv(&rows);
    std::fs::write(out.join("rank_sweep.csv"), &csv)?;
    write_json(&out.join("rank_sweep.json"), &rows)?;
    print!("{csv}");
    Ok(())
}

fn generate_cmd(cfg: &ExperimentConfig, model: &Path, out: &Path, large: bool) -> anyhow::Result<()> {
    let model = Model::load(model)?;
    let target = prepare_target(cfg)?;
    let plan = eval_plan(cfg, &target, Some(&model.vae))?;
    if large {
        let texts = eval_texts(&plan.prompts, false);
        let per = LARGE_EVAL_IMAGES.div_ceil(texts.len());
        let set = generate_set(&model, &texts, per, generation_seed(cfg, 0), cfg.eval_batch)?;
        set.write(out)?;
        println!("{} images -> {}", set.len(), out.display());
        return Ok(());
    }
    for (r, set) in generate_runs(cfg, &plan, &model)?.iter().enumerate() {
        let dir = out.join(format!("run-{r}"));
        set.write(&dir)?;
        println!("{} images -> {}", set.len(), dir.display());
    }
    Ok(())
}

fn evaluate_cmd(cfg: &ExperimentConfig, generated: &[PathBuf], out: &Path) -> anyhow::Result<()> {
    let target = prepare_target(cfg)?;
    let plan = eval_plan(cfg, &target, None)?;
    let runs = generated.iter().map(ImageSet::read).collect::<msdm_harness::Result<Vec<_>>>()?;
    for r in &runs[1..] {
        check_same_prompts(&runs[0], r)?;
    }
    let scored = score_runs(&plan, &runs)?;
    std::fs::create_dir_all(out)?;
    save_reports(out, &scored)?;
    let r = &scored.dev.report;
    println!(
        "dev FID {:.4} ± {:.4}, fidelity {:.2}, agreement {:.4}, diversity {:.4}, FBD {:.4}",
        r.fid_mean, r.fid_std, r.fidelity, r.agreement, r.diversity, r.fbd
    );
    Ok(())
}

fn report_cmd(cfg: &ExperimentConfig, models: &[PathBuf], out: &Path) -> anyhow::Result<()> {
    let target = prepare_target(cfg)?;
    std::fs::create_dir_all(out)?;
    let loaded = models.iter().map(Model::load).collect::<msdm_harness::Result<Vec<_>>>()?;
    let plan = eval_plan(cfg, &target, loaded.first().map(|m| &m.vae))?;
    let mut rows = Vec::new();
    for m in &loaded {
        let scored = evaluate_model(cfg, &plan, m)?;
        let dir = out.join(&m.meta.name);
        std::fs::create_dir_all(&dir)?;
        save_reports(&dir, &scored)?;
        rows.push(SummaryRow::new(&m.meta.name, &scored.dev.report, &scored.test.report));
    }
    let csv = summary_csv(&rows);
    std::fs::write(out.join("summary.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}

fn correlate_cmd(export: &Path, reports: &[String], expected_tasks: usize, out: &Path) -> anyhow::Result<()> {
    let file = std::fs::File::open(export).with_context(|| format!("opening {}", export.display()))?;
    let rows = msdm_annotation::export::read_csv(file)?;
    let mut map = BTreeMap::new();
    for r in reports {
        let Some((id, path)) = r.split_once('=') else {
            return Err(HarnessError::Config(format!("--report {r:?} is not MODEL_ID=PATH")).into());
        };
        let rep: MetricReport = serde_json::from_str(&std::fs::read_to_string(path).with_context(|| format!("reading {path}"))?)?;
        map.insert(id.to_string(), rep);
    }
    let table = correlate_ranks(&rows, &map, expected_tasks)?;
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("correlation.csv"), table.to_csv())?;
    write_json(&out.join("correlation.json"), &table)?;
    print!("{}", table.to_csv());
    for w in &table.warnings {
        eprintln!("warning: {w}");
    }
    Ok(())
}

fn prepare_study(cfg: &ExperimentConfig, data_dir: &Path, models: &[PathBuf], references: usize) -> anyhow::Result<()> {
    if models.len() != 3 {
        bail!(HarnessError::Config(format!("the study compares exactly 3 models, got {}", models.len())));
    }
    let loaded = models.iter().map(Model::load).collect::<msdm_harness::Result<Vec<_>>>()?;
    let target = prepare_target(cfg)?;
    let seed = derive_seed(cfg.seed, "annotation");
    let prompts = select_eval_prompts(&target, TASK_COUNT / 2, seed)?;
    let texts = eval_texts(&prompts, true);
    let mut generated = BTreeMap::new();
    for m in &loaded {
        let set = generate_set(m, &texts, IMAGES_PER_SET, derive_seed(seed, "generate"), cfg.eval_batch)?;
        for (pid, idx) in set.groups() {
            generated.insert((m.meta.name.clone(), pid.to_string()), idx.iter().map(|&i| set.images[i].clone()).collect());
        }
    }
    let real = real_reference(&target, &prompts, references, seed, Reference::Dev)?;
    let references_map =
        real.groups().into_iter().map(|(pid, idx)| (pid.to_string(), idx.iter().map(|&i| real.images[i].clone()).collect())).collect();
    let input = StudyInput {
        pairs: prompts
            .iter()
            .map(|p| PromptPair {
                original: StudyPrompt { id: p.original.id.clone(), text: p.original.text.clone() },
                rephrased: StudyPrompt { id: p.rephrased.id.clone(), text: p.rephrased.text.clone() },
            })
            .collect(),
        models: loaded.iter().map(|m| m.meta.name.clone()).collect(),
        generated,
        references: references_map,
        references_per_task: references,
        images_per_set: IMAGES_PER_SET,
        seed,
    };
    let study = msdm_annotation::build_study(data_dir, &input)?;
    println!("study with {} tasks written to {}", study.tasks.len(), data_dir.display());
    Ok(())
}

fn augment_compare_cmd(cfg: &ExperimentConfig, train: bool) -> anyhow::Result<()> {
    let out = prepare_output(cfg)?;
    let paraphrased = prepare_paraphrased(cfg)?;
    let mut rows = Vec::new();
    for (mut row, manifest) in compare_strategies(cfg, &paraphrased)? {
        if train {
            let trained = train_msdm(cfg, &manifest)?;
            let plan = eval_plan(cfg, &manifest, Some(&trained.model.vae))?;
            let texts = eval_texts(&plan.prompts, false);
            let set = generate_set(&trained.model, &texts, cfg.eval_images_per_prompt, generation_seed(cfg, 0), cfg.eval_batch)?;
            row.fid_dev = Some(dev_fid(&plan.dev_real, &set, &plan.embedder)?);
        }
        rows.push(row);
    }
    let csv = comparison_csv(&rows);
    std::fs::write(out.join("augmentation.csv"), &csv)?;
    print!("{csv}");
    if let Some(bad) = rows.iter().find(|r| !r.identity_holds) {
        bail!(HarnessError::Contract(format!("{} produced {} prompts, expected {}", bad.strategy, bad.train_prompts, bad.expected_prompts)));
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.cmd {
        Command::Dataset { cmd: DatasetCmd::Build { config, out } } => dataset_build(&config.load()?, out),
        Command::Train { cmd: TrainCmd::Msdm { config, no_eval } } => train_msdm_cmd(&config.load()?, no_eval),
        Command::Train { cmd: TrainCmd::Lora { config, base, no_eval } } => train_lora_cmd(&config.load()?, base.as_deref(), no_eval),
        Command::Sweep { cmd: SweepCmd::Ranks { config, base } } => sweep_cmd(&config.load()?, base.as_deref()),
        Command::Generate { config, model, out, large } => generate_cmd(&config.load()?, &model, &out, large),
        Command::Evaluate { config, generated, out } => evaluate_cmd(&config.load()?, &generated, &out),
        Command::Report { config, models, out } => report_cmd(&config.load()?, &models, &out),
        Command::Correlate { export, reports, expected_tasks, out } => correlate_cmd(&export, &reports, expected_tasks, &out),
        Command::ServeAnnotation { config, addr, data_dir, models, references, prepare_only } => {
            let cfg = config.load()?;
            if !data_dir.join("tasks.json").is_file() {
                prepare_study(&cfg, &data_dir, &models, references)?;
            } else if !models.is_empty() {
                log::warn!("{} already holds a study; --model ignored", data_dir.display());
            }
            if prepare_only {
                return Ok(());
            }
            msdm_annotation::server::run(addr, &data_dir)?;
            Ok(())
        }
        Command::Augment { cmd: AugmentCmd::Compare { config, train } } => augment_compare_cmd(&config.load()?, train),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(h) = cause.downcast_ref::<HarnessError>() {
            return h.exit_code() as u8;
        }
        if let Some(AnnotationError::Config(_)) = cause.downcast_ref::<AnnotationError>() {
            return 2;
        }
        match cause.downcast_ref::<msdm_core::Error>() {
            Some(msdm_core::Error::Config(_)) => return 2,
            Some(msdm_core::Error::Numeric(_)) => return 3,
            _ => {}
        }
    }
    1
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
