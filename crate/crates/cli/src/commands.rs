use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use serde::Serialize;

use glioseg::descriptor::{load_descriptor, write_dataset};
use glioseg::features::{FeatureExtractor, FeatureExtractorSpec};
use glioseg::metrics::{lesion_wise_dice, region_dice_report, LesionParams};
use glioseg::nifti::{read_nifti, write_nifti_labels};
use glioseg::nst::{augment_dataset, InitMode, StyleTransferConfig};
use glioseg::phantom::{degrade_cohort, phantom_cohort, DegradeSpec};
use glioseg::preprocess::preprocess_case;
use glioseg::stats::paired_t_test;
use glioseg::train::{
    cross_validate, finetune_dataset, make_folds, train_on, write_records_csv, DatasetSelector, ExperimentConfig,
    TrainConfig, TrainOutcome,
};
use glioseg::unet::{checkpoint_load, checkpoint_save, sliding_window_predict, ModelState, UNetConfig};
use glioseg::volume::{Case, Region};

use crate::tables::{read_column, write_csv, CrossvalRow, DiceRow, LesionRow};
use crate::{check_jobs, descriptor_path, ensure_dir, par_map, parse_triple, seeded};

fn load_cases(path: &Path) -> Result<Vec<Case>> {
    let desc = descriptor_path(path);
    let manifest = load_descriptor(&desc).with_context(|| format!("reading dataset {}", desc.display()))?;
    Ok(manifest.load_cases()?)
}

fn dataset_name(path: &Path) -> Result<String> {
    Ok(load_descriptor(descriptor_path(path))?.name)
}

#[derive(Debug, Args)]
pub struct PhantomGenArgs {
    /// Output directory (receives NIfTI files and dataset.json).
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub count: usize,
    #[arg(long)]
    pub seed: u64,
    /// Volume size D,H,W.
    #[arg(long, default_value = "64,64,64", value_parser = parse_triple::<usize>)]
    pub dims: [usize; 3],
    /// Apply the low-quality acquisition model.
    #[arg(long)]
    pub degrade: bool,
    #[arg(long, default_value_t = 2)]
    pub degrade_factor: usize,
    #[arg(long, default_value_t = 12.0)]
    pub degrade_noise: f64,
    #[arg(long, default_value_t = 0.3)]
    pub bias: f64,
    /// Bottom axial slices zeroed when degrading.
    #[arg(long, default_value_t = 0)]
    pub truncate: usize,
    #[arg(long, default_value = "phantoms")]
    pub name: String,
}

pub fn phantom_gen(a: &PhantomGenArgs) -> Result<()> {
    if a.count == 0 {
        bail!("--count must be at least 1");
    }
    let mut cases = phantom_cohort(a.count, a.dims, a.seed)?;
    if a.degrade {
        let spec = DegradeSpec {
            factor: a.degrade_factor,
            noise_sd: a.degrade_noise,
            bias_amplitude: a.bias,
            truncate_slices: a.truncate,
            seed: a.seed,
        };
        cases = degrade_cohort(&cases, &spec)?;
    }
    ensure_dir(&a.out)?;
    let desc = write_dataset(&a.out, &a.name, &cases)?;
    println!("wrote {} cases to {}", cases.len(), desc.display());
    Ok(())
}

#[derive(Debug, Args)]
pub struct PreprocessArgs {
    /// Input dataset.json (or its directory).
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Target spacing D,H,W in mm.
    #[arg(long, default_value = "1,1,1", value_parser = parse_triple::<f32>)]
    pub spacing: [f32; 3],
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

pub fn preprocess(a: &PreprocessArgs) -> Result<()> {
    check_jobs(a.jobs)?;
    let cases = load_cases(&a.data)?;
    let out = par_map(&cases, a.jobs, |c| Ok(preprocess_case(c, a.spacing)?))?;
    ensure_dir(&a.out)?;
    let desc = write_dataset(&a.out, &dataset_name(&a.data)?, &out)?;
    println!("preprocessed {} cases into {}", out.len(), desc.display());
    Ok(())
}

#[derive(Debug, Args)]
pub struct AugmentArgs {
    /// Cases to stylise (content).
    #[arg(long)]
    pub content: PathBuf,
    /// Cases providing style statistics.
    #[arg(long)]
    pub style: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: u64,
    #[arg(long, default_value_t = 100)]
    pub iterations: usize,
    #[arg(long, default_value_t = 1.0)]
    pub alpha: f64,
    #[arg(long, default_value_t = 1e3)]
    pub beta: f64,
    #[arg(long, default_value_t = 0.02)]
    pub step_size: f64,
    /// Start from the content image (`content`) or seeded noise (`noise`).
    #[arg(long, default_value = "content", value_parser = ["content", "noise"])]
    pub init: String,
}

#[derive(Debug, Serialize)]
struct SliceRow<'a> {
    content: &'a str,
    style: &'a str,
    channel: String,
    slice: usize,
    style_slice: usize,
    initial_total: f64,
    final_total: f64,
}

pub fn augment(a: &AugmentArgs) -> Result<()> {
    let content = load_cases(&a.content)?;
    let style = load_cases(&a.style)?;
    let cfg = StyleTransferConfig {
        alpha: a.alpha,
        beta: a.beta,
        iterations: a.iterations,
        step_size: a.step_size,
        seed: a.seed,
        init: if a.init == "noise" { InitMode::Noise } else { InitMode::ContentCopy },
    };
    let extractor = FeatureExtractor::<f32>::build(&FeatureExtractorSpec::default())?;
    let outcome = augment_dataset(&content, &style, &extractor, &cfg)?;
    ensure_dir(&a.out)?;
    let name = format!("{}-nst", dataset_name(&a.content)?);
    let desc = write_dataset(&a.out, &name, &outcome.cases)?;
    let rows: Vec<SliceRow> = outcome
        .slices
        .iter()
        .map(|s| SliceRow {
            content: &s.content_case_id,
            style: &s.style_case_id,
            channel: s.channel.to_string(),
            slice: s.slice_index,
            style_slice: s.style_slice_index,
            initial_total: s.initial.total,
            final_total: s.last.total,
        })
        .collect();
    write_csv(&a.out.join("nst_slices.csv"), &rows)?;
    std::fs::write(a.out.join("pairs.json"), serde_json::to_string_pretty(&outcome.pairs)?)?;
    println!(
        "stylised {} cases into {} (loss decreased on {:.1}% of slices)",
        outcome.cases.len(),
        desc.display(),
        100.0 * outcome.descent_fraction()
    );
    Ok(())
}

#[derive(Debug, Args)]
pub struct TrainingOpts {
    #[arg(long)]
    pub seed: u64,
    /// Model preset: desk2d, desk3d, full2d, full3d.
    #[arg(long, default_value = "desk2d")]
    pub config: String,
    #[arg(long, default_value_t = 30)]
    pub epochs: u64,
    /// Initial learning rate (pretraining scale).
    #[arg(long, default_value_t = 0.01)]
    pub lr: f64,
    #[arg(long, default_value_t = 50)]
    pub batches: usize,
    /// Record wall-clock seconds per epoch (makes CSVs run-dependent).
    #[arg(long)]
    pub time: bool,
}

impl TrainingOpts {
    fn train_config(&self, epochs: u64) -> Result<TrainConfig> {
        let mut tc = TrainConfig::new(epochs, self.lr)?;
        tc.batches_per_epoch = self.batches;
        tc.record_time = self.time;
        tc.validate()?;
        Ok(tc)
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Held-out fold when no --val dataset is given.
    #[arg(long, default_value_t = 0)]
    pub fold: usize,
    /// Explicit validation dataset; all of --data is used for training.
    #[arg(long)]
    pub val: Option<PathBuf>,
    /// Continue from latest.munt / best.munt in this directory.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[command(flatten)]
    pub opts: TrainingOpts,
}

fn split_sets<'c>(
    data: &'c [Case],
    val: Option<&'c [Case]>,
    fold: usize,
    seed: u64,
) -> Result<(Vec<&'c Case>, Vec<&'c Case>)> {
    match val {
        Some(v) => Ok((data.iter().collect(), v.iter().collect())),
        None => {
            let ids: Vec<&str> = data.iter().map(|c| c.id.as_str()).collect();
            let split = make_folds(&ids, seed)?;
            Ok(split.partition(data, fold)?)
        }
    }
}

fn write_outcome(out: &Path, outcome: &TrainOutcome<f32>) -> Result<()> {
    ensure_dir(out)?;
    checkpoint_save(&outcome.best, &out.join("best.munt"))?;
    checkpoint_save(&outcome.latest, &out.join("latest.munt"))?;
    write_records_csv(&outcome.records, &out.join("epochs.csv"))?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct RunManifest<'a> {
    command: &'a str,
    data: &'a Path,
    validation: Option<&'a Path>,
    fold: Option<usize>,
    config: &'a UNetConfig,
    train: &'a TrainConfig,
    seed: u64,
}

pub fn train(a: &TrainArgs) -> Result<()> {
    let data = load_cases(&a.data)?;
    let val = a.val.as_deref().map(load_cases).transpose()?;
    let (tr, va) = split_sets(&data, val.as_deref(), a.fold, a.opts.seed)?;
    let tc = a.opts.train_config(a.opts.epochs)?;
    let (model, best) = match &a.resume {
        Some(dir) => {
            let latest = checkpoint_load(&dir.join("latest.munt"))?;
            let best = checkpoint_load(&dir.join("best.munt"))?;
            (latest, Some(best))
        }
        None => (ModelState::<f32>::build(&UNetConfig::preset(&a.opts.config, a.opts.seed)?)?, None),
    };
    let config = model.config.clone();
    let outcome = train_on(model, best, &tr, &va, &tc)?;
    write_outcome(&a.out, &outcome)?;
    let manifest = RunManifest {
        command: "train",
        data: &a.data,
        validation: a.val.as_deref(),
        fold: a.val.is_none().then_some(a.fold),
        config: &config,
        train: &tc,
        seed: a.opts.seed,
    };
    std::fs::write(a.out.join("run.json"), serde_json::to_string_pretty(&manifest)?)?;
    report_pseudo(&outcome);
    Ok(())
}

fn report_pseudo(o: &TrainOutcome<f32>) {
    println!(
        "trained to epoch {}: final pseudo dice {:.4}, best {:.4} at epoch {}",
        o.latest.epoch,
        o.latest.pseudo_dice_ema.unwrap_or(0.0),
        o.best.pseudo_dice_ema.unwrap_or(0.0),
        o.best.epoch
    );
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    /// Pretrained checkpoint.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Original target-domain cases.
    #[arg(long)]
    pub data: PathBuf,
    /// Stylised copies to add to the fine-tuning set.
    #[arg(long)]
    pub stylized: Option<PathBuf>,
    #[arg(long)]
    pub val: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub opts: TrainingOpts,
}

pub fn finetune(a: &FinetuneArgs) -> Result<()> {
    let pretrained = checkpoint_load(&a.checkpoint)?;
    let originals = load_cases(&a.data)?;
    let stylized = a.stylized.as_deref().map(load_cases).transpose()?.unwrap_or_default();
    let union = finetune_dataset(&originals, &stylized)?;
    let val = load_cases(&a.val)?;
    let tc = a.opts.train_config(a.opts.epochs)?.finetune_of(a.opts.epochs)?;
    let mut model = pretrained.clone();
    model.rng = seeded(a.opts.seed);
    let arch = pretrained.config.clone();
    let tr: Vec<&Case> = union.iter().collect();
    let va: Vec<&Case> = val.iter().collect();
    let outcome = glioseg::train::finetune(&model, &arch, &tr, &va, &tc)?;
    write_outcome(&a.out, &outcome)?;
    println!("fine-tuned on {} cases ({} stylised)", union.len(), stylized.len());
    report_pseudo(&outcome);
    Ok(())
}

#[derive(Debug, Args)]
pub struct CrossvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// GLI, GLI+SSA or GLI+SSA2.
    #[arg(long, default_value = "GLI+SSA")]
    pub dataset: String,
    #[arg(long, default_value = "0,1,2,3,4", value_delimiter = ',')]
    pub folds: Vec<usize>,
    #[arg(long, default_value = "crossval")]
    pub name: String,
    #[command(flatten)]
    pub opts: TrainingOpts,
}

#[derive(Debug, Serialize)]
struct FoldSummary {
    fold: usize,
    best_epoch: u64,
    best_pseudo_dice: f64,
    final_pseudo_dice: f64,
    best_dice: BTreeMap<&'static str, f64>,
    final_dice: BTreeMap<&'static str, f64>,
}

pub fn crossval(a: &CrossvalArgs) -> Result<()> {
    let cases = load_cases(&a.data)?;
    let exp = ExperimentConfig {
        name: a.name.clone(),
        dataset: DatasetSelector::parse(&a.dataset)?,
        unet: a.opts.config.clone(),
        seed: a.opts.seed,
        epochs: a.opts.epochs,
        initial_lr: a.opts.lr,
        poly_exponent: 0.9,
        batches_per_epoch: a.opts.batches,
        folds: a.folds.clone(),
    };
    exp.validate()?;
    let (split, results) = cross_validate(&cases, &exp)?;
    ensure_dir(&a.out)?;
    exp.save(&a.out.join("experiment.json"))?;
    std::fs::write(a.out.join("folds.json"), serde_json::to_string_pretty(&split)?)?;
    for r in &results {
        write_records_csv(&r.records, &a.out.join(format!("fold{}_epochs.csv", r.fold)))?;
    }
    let rows = CrossvalRow::average(&results);
    write_csv(&a.out.join("crossval_epochs.csv"), &rows)?;
    let mean = |evals: &[glioseg::train::CaseEvaluation]| -> BTreeMap<&'static str, f64> {
        [Region::Enhancing, Region::TumorCore, Region::WholeTumor]
            .into_iter()
            .map(|r| (r.short_name(), glioseg::train::mean_region_dice(evals, r)))
            .collect()
    };
    let summary: Vec<FoldSummary> = results
        .iter()
        .map(|r| FoldSummary {
            fold: r.fold,
            best_epoch: r.best_epoch,
            best_pseudo_dice: r.best_pseudo_dice,
            final_pseudo_dice: r.final_pseudo_dice,
            best_dice: mean(&r.best_eval),
            final_dice: mean(&r.final_eval),
        })
        .collect();
    std::fs::write(a.out.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    for s in &summary {
        println!(
            "fold {}: pseudo dice best {:.4} (epoch {}) final {:.4}; WT dice best {:.4} final {:.4}",
            s.fold, s.best_pseudo_dice, s.best_epoch, s.final_pseudo_dice, s.best_dice["WT"], s.final_dice["WT"]
        );
    }
    Ok(())
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

pub fn prediction_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}_pred.nii"))
}

pub fn predict(a: &PredictArgs) -> Result<()> {
    check_jobs(a.jobs)?;
    let model = checkpoint_load(&a.checkpoint)?;
    let cases = load_cases(&a.data)?;
    ensure_dir(&a.out)?;
    par_map(&cases, a.jobs, |c| {
        let pred = sliding_window_predict(&model, &c.images).with_context(|| format!("predicting {}", c.id))?;
        write_nifti_labels(&pred, prediction_path(&a.out, &c.id))?;
        Ok(())
    })?;
    println!("wrote {} predictions to {}", cases.len(), a.out.display());
    Ok(())
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Directory of `<id>_pred.nii` files.
    #[arg(long)]
    pub pred: PathBuf,
    /// Dataset with ground truth.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub dilation: usize,
    #[arg(long, default_value_t = 2)]
    pub min_lesion: usize,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

pub fn evaluate(a: &EvaluateArgs) -> Result<()> {
    check_jobs(a.jobs)?;
    let cases = load_cases(&a.data)?;
    let params = LesionParams { dilation_radius: a.dilation, min_lesion: a.min_lesion };
    let rows = par_map(&cases, a.jobs, |c| {
        let truth = c.truth.as_ref().with_context(|| format!("case {} has no ground truth", c.id))?;
        let path = prediction_path(&a.pred, &c.id);
        let pred = read_nifti(&path).with_context(|| format!("missing prediction for case {}", c.id))?.into_labels()?;
        let dice = region_dice_report(&pred, truth)?;
        let lesions = [Region::Enhancing, Region::TumorCore, Region::WholeTumor]
            .into_iter()
            .map(|r| lesion_wise_dice(&pred, truth, r, params))
            .collect::<glioseg::Result<Vec<_>>>()?;
        Ok((DiceRow::new(&c.id, &dice), lesions.iter().map(|l| LesionRow::new(&c.id, l)).collect::<Vec<_>>()))
    })?;
    ensure_dir(&a.out)?;
    let dice: Vec<&DiceRow> = rows.iter().map(|(d, _)| d).collect();
    let lesion: Vec<&LesionRow> = rows.iter().flat_map(|(_, l)| l).collect();
    write_csv(&a.out.join("dice.csv"), &dice)?;
    write_csv(&a.out.join("lesion.csv"), &lesion)?;
    let n = dice.len() as f64;
    println!(
        "{} cases: mean Dice ET {:.4} TC {:.4} WT {:.4}",
        dice.len(),
        dice.iter().map(|d| d.et).sum::<f64>() / n,
        dice.iter().map(|d| d.tc).sum::<f64>() / n,
        dice.iter().map(|d| d.wt).sum::<f64>() / n
    );
    Ok(())
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    /// First CSV (e.g. an epochs.csv or a one-column table).
    pub a: PathBuf,
    /// Second CSV, paired row by row with the first.
    pub b: PathBuf,
    #[arg(long, default_value = "pseudo_dice")]
    pub column: String,
    /// Print the full result as JSON.
    #[arg(long)]
    pub json: bool,
}

pub fn stats(a: &StatsArgs) -> Result<()> {
    let xa = read_column(&a.a, &a.column)?;
    let xb = read_column(&a.b, &a.column)?;
    let r = paired_t_test(&xa, &xb)?;
    if a.json {
        println!("{}", serde_json::to_string_pretty(&r)?);
    } else {
        println!(
            "t={:.2}, p={:.2}, df={} ({} at p<0.05; t={}, p={})",
            r.t_stat,
            r.p_value,
            r.df,
            if r.significant { "significant" } else { "not significant" },
            r.t_stat,
            r.p_value
        );
    }
    Ok(())
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Per-fold lesion.csv files, in fold order.
    #[arg(long, num_args = 1.., required = true)]
    pub inputs: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn report(a: &ReportArgs) -> Result<()> {
    let table = crate::tables::lesion_table(&a.inputs)?;
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        ensure_dir(parent)?;
    }
    write_csv(&a.out, &table)?;
    println!("wrote {} rows to {}", table.len(), a.out.display());
    Ok(())
}
