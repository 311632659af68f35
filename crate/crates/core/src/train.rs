//! Experiment orchestration: folds, outlier exclusion, the epoch loop with
//! pseudo-Dice tracking, fine-tuning and evaluation.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{region_dice_report, DiceReport};
use crate::real::Real;
use crate::unet::{
    dice_ce_loss, poly_lr, sliding_window_predict, LRSchedule, ModelState, Tensor, UNetConfig, IN_CHANNELS,
};
use crate::volume::{Case, Domain, LabelVolume, Region, BACKGROUND};

pub const FOLD_COUNT: usize = 5;

/// SSA training cases excluded for quality problems in the GLI+SSA2 dataset.
pub const SSA_OUTLIERS: [&str; 4] =
    ["BraTS-SSA-00051-000", "BraTS-SSA-00097-000", "BraTS-SSA-00041-000", "BraTS-SSA-00084-000"];

/// EMA decay of the pseudo Dice.
pub const PSEUDO_DICE_DECAY: f64 = 0.9;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub k: usize,
    pub seed: u64,
    /// Case id → fold index.
    pub assignment: BTreeMap<String, usize>,
}

impl FoldSplit {
    pub fn fold_of(&self, id: &str) -> Option<usize> {
        self.assignment.get(id).copied()
    }

    /// Ids of one fold, sorted.
    pub fn fold_ids(&self, fold: usize) -> Vec<&str> {
        self.assignment.iter().filter(|(_, &f)| f == fold).map(|(id, _)| id.as_str()).collect()
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &f in self.assignment.values() {
            sizes[f] += 1;
        }
        sizes
    }

    /// Splits cases into (training, validation) for `fold`.
    pub fn partition<'c>(&self, cases: &'c [Case], fold: usize) -> Result<(Vec<&'c Case>, Vec<&'c Case>)> {
        if fold >= self.k {
            return Err(Error::InvalidArgument(format!("fold {fold} out of range 0..{}", self.k)));
        }
        let mut train = Vec::new();
        let mut val = Vec::new();
        for c in cases {
            match self.fold_of(&c.id) {
                Some(f) if f == fold => val.push(c),
                Some(_) => train.push(c),
                None => return Err(Error::InvalidArgument(format!("case {} is not in the fold split", c.id))),
            }
        }
        Ok((train, val))
    }
}

/// Seeded shuffle followed by round-robin assignment to five folds.
pub fn make_folds<S: AsRef<str>>(case_ids: &[S], seed: u64) -> Result<FoldSplit> {
    if case_ids.len() < FOLD_COUNT {
        return Err(Error::InvalidArgument(format!(
            "need at least {FOLD_COUNT} cases for {FOLD_COUNT}-fold cross-validation, got {}",
            case_ids.len()
        )));
    }
    let mut ids: Vec<&str> = case_ids.iter().map(AsRef::as_ref).collect();
    let unique: BTreeSet<&str> = ids.iter().copied().collect();
    if unique.len() != ids.len() {
        return Err(Error::InvalidArgument("duplicate case ids in fold input".into()));
    }
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let assignment = ids.iter().enumerate().map(|(i, id)| (id.to_string(), i % FOLD_COUNT)).collect();
    Ok(FoldSplit { k: FOLD_COUNT, seed, assignment })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exclusion {
    pub kept: Vec<String>,
    pub removed: Vec<String>,
    /// Listed ids that were not in the dataset.
    pub missing: Vec<String>,
}

/// Removes listed ids, preserving order. Absent ids are reported and logged,
/// not treated as errors.
pub fn exclude_outliers<S: AsRef<str>, E: AsRef<str>>(case_ids: &[S], exclusions: &[E]) -> Exclusion {
    let excl: BTreeSet<&str> = exclusions.iter().map(AsRef::as_ref).collect();
    let present: BTreeSet<&str> = case_ids.iter().map(AsRef::as_ref).collect();
    let (mut kept, mut removed) = (Vec::new(), Vec::new());
    for id in case_ids {
        let id = id.as_ref().to_string();
        if excl.contains(id.as_str()) {
            removed.push(id);
        } else {
            kept.push(id);
        }
    }
    let missing: Vec<String> = excl.iter().filter(|e| !present.contains(*e)).map(|e| e.to_string()).collect();
    for m in &missing {
        log::warn!("outlier {m} is not in the dataset");
    }
    Exclusion { kept, removed, missing }
}

/// First epoch takes the raw value; later epochs blend with decay 0.9.
pub fn pseudo_dice_update(prev: Option<f64>, epoch_dice: f64) -> f64 {
    match prev {
        None => epoch_dice,
        Some(p) => PSEUDO_DICE_DECAY * p + (1.0 - PSEUDO_DICE_DECAY) * epoch_dice,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Phase {
    Pretrain,
    Finetune,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Pretrain => "PRETRAIN",
            Phase::Finetune => "FINETUNE",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// Epochs completed, 1-based.
    pub epoch: u64,
    pub phase: Phase,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub epoch_dice: f64,
    pub pseudo_dice: f64,
    /// Wall time, or 0 when timing is disabled.
    pub seconds: f64,
}

pub const CSV_HEADER: &str = "epoch,lr,train_loss,val_loss,pseudo_dice,seconds,phase";

/// Table-style CSV; floats use shortest round-trip formatting.
pub fn records_to_csv(records: &[EpochRecord]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in records {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.epoch,
            r.lr,
            r.train_loss,
            r.val_loss,
            r.pseudo_dice,
            r.seconds,
            r.phase.name()
        );
    }
    out
}

pub fn write_records_csv(records: &[EpochRecord], path: &Path) -> Result<()> {
    std::fs::write(path, records_to_csv(records)).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Target value of the model's epoch counter.
    pub epochs: u64,
    pub schedule: LRSchedule,
    pub batches_per_epoch: usize,
    /// Probability that a sampled patch is centred on tumour.
    pub foreground_fraction: f64,
    pub val_patches_per_case: usize,
    pub phase: Phase,
    /// Record wall-clock seconds (breaks byte-identical CSVs).
    pub record_time: bool,
}

impl TrainConfig {
    pub fn new(epochs: u64, initial_lr: f64) -> Result<Self> {
        Ok(TrainConfig {
            epochs,
            schedule: LRSchedule::new(initial_lr, 0.9, epochs.max(1))?,
            batches_per_epoch: 50,
            foreground_fraction: 0.5,
            val_patches_per_case: 4,
            phase: Phase::Pretrain,
            record_time: false,
        })
    }

    /// Fine-tuning variant: LR × 0.1 with its own schedule.
    pub fn finetune_of(&self, epochs: u64) -> Result<Self> {
        Ok(TrainConfig {
            epochs,
            schedule: LRSchedule::new(self.schedule.initial_lr * 0.1, self.schedule.poly_exponent, epochs.max(1))?,
            phase: Phase::Finetune,
            ..self.clone()
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.batches_per_epoch == 0 || self.val_patches_per_case == 0 {
            return Err(Error::InvalidArgument("batches_per_epoch and val_patches_per_case must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.foreground_fraction) {
            return Err(Error::InvalidArgument("foreground_fraction must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub best: ModelState<T>,
    pub latest: ModelState<T>,
    pub records: Vec<EpochRecord>,
    /// Every case id that contributed a training patch.
    pub sampled_ids: BTreeSet<String>,
}

/// Tumour voxel positions and label array of a training case.
struct Sampler<'c> {
    case: &'c Case,
    truth: &'c LabelVolume,
    foreground: Vec<[usize; 3]>,
}

impl<'c> Sampler<'c> {
    fn new(case: &'c Case) -> Result<Self> {
        let truth = case
            .truth
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument(format!("case {} has no ground truth", case.id)))?;
        let foreground =
            truth.data().indexed_iter().filter(|(_, &l)| l != BACKGROUND).map(|((z, y, x), _)| [z, y, x]).collect();
        Ok(Sampler { case, truth, foreground })
    }

    fn origin(&self, patch: [usize; 3], fg: bool, rng: &mut ChaCha8Rng) -> [usize; 3] {
        let (d, h, w) = self.case.dims();
        let dims = [d, h, w];
        if fg && !self.foreground.is_empty() {
            let c = self.foreground[rng.gen_range(0..self.foreground.len())];
            std::array::from_fn(|a| c[a].saturating_sub(patch[a] / 2).min(dims[a].saturating_sub(patch[a])))
        } else {
            std::array::from_fn(|a| rng.gen_range(0..=dims[a].saturating_sub(patch[a])))
        }
    }

    /// Writes one zero-padded patch into a batch slot.
    fn extract<T: Real>(&self, origin: [usize; 3], patch: [usize; 3], images: &mut [T], labels: &mut [u8]) {
        let (d, h, w) = self.case.dims();
        let plen: usize = patch.iter().product();
        let chans = self.case.images.channels();
        for pz in 0..patch[0].min(d - origin[0]) {
            for py in 0..patch[1].min(h - origin[1]) {
                for px in 0..patch[2].min(w - origin[2]) {
                    let src = [origin[0] + pz, origin[1] + py, origin[2] + px];
                    let dst = (pz * patch[1] + py) * patch[2] + px;
                    for (c, ch) in chans.iter().enumerate() {
                        images[c * plen + dst] = T::of(ch.data()[src] as f64);
                    }
                    labels[dst] = self.truth.data()[src];
                }
            }
        }
    }
}

fn sample_batch<T: Real>(
    samplers: &[Sampler],
    cfg: &UNetConfig,
    fg_fraction: f64,
    rng: &mut ChaCha8Rng,
    sampled: Option<&mut BTreeSet<String>>,
) -> (Tensor<T>, Vec<u8>) {
    let patch = cfg.patch_size;
    let plen: usize = patch.iter().product();
    let b = cfg.batch_size;
    let mut x = Tensor::zeros([b, IN_CHANNELS, patch[0], patch[1], patch[2]]);
    let mut labels = vec![0u8; b * plen];
    let mut seen = Vec::with_capacity(b);
    for i in 0..b {
        let s = &samplers[rng.gen_range(0..samplers.len())];
        let fg = rng.gen_bool(fg_fraction);
        let origin = s.origin(patch, fg, rng);
        s.extract(origin, patch, x.sample_mut(i), &mut labels[i * plen..(i + 1) * plen]);
        seen.push(s.case.id.clone());
    }
    if let Some(set) = sampled {
        set.extend(seen);
    }
    (x, labels)
}

/// Counts for global Dice over all validation patches.
#[derive(Debug, Clone, Copy, Default)]
struct Overlap {
    tp: u64,
    fp: u64,
    fn_: u64,
}

impl Overlap {
    fn dice(&self) -> f64 {
        let den = 2 * self.tp + self.fp + self.fn_;
        if den == 0 {
            1.0
        } else {
            2.0 * self.tp as f64 / den as f64
        }
    }
}

const REGIONS: [Region; 3] = [Region::Enhancing, Region::TumorCore, Region::WholeTumor];

/// Fixed validation patches for a run, drawn from a stream independent of training.
fn validation_batches<T: Real>(val: &[Sampler], cfg: &UNetConfig, tc: &TrainConfig) -> Vec<(Tensor<T>, Vec<u8>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7A11_DA7E_0000_0001);
    let one = UNetConfig { batch_size: 1, ..cfg.clone() };
    // every case contributes the same number of patches
    val.iter()
        .flat_map(|s| std::iter::repeat_n(s, tc.val_patches_per_case))
        .map(|s| sample_batch::<T>(std::slice::from_ref(s), &one, tc.foreground_fraction, &mut rng, None))
        .collect()
}

fn validate_epoch<T: Real>(model: &ModelState<T>, batches: &[(Tensor<T>, Vec<u8>)]) -> Result<(f64, f64)> {
    let mut loss = 0.0;
    let mut counts = [Overlap::default(); 3];
    for (x, labels) in batches {
        let logits = model.forward(x)?;
        loss += dice_ce_loss(&logits, labels)?.total;
        let lg = &logits[0];
        let s = lg.spatial_len();
        let c = lg.channels();
        for b in 0..lg.batch() {
            let data = lg.sample(b);
            for v in 0..s {
                let mut best = 0;
                for k in 1..c {
                    if data[k * s + v] > data[best * s + v] {
                        best = k;
                    }
                }
                let truth = labels[b * s + v];
                for (r, region) in REGIONS.iter().enumerate() {
                    let (p, t) = (region.contains(best as u8), region.contains(truth));
                    counts[r].tp += (p && t) as u64;
                    counts[r].fp += (p && !t) as u64;
                    counts[r].fn_ += (!p && t) as u64;
                }
            }
        }
    }
    let dice = counts.iter().map(Overlap::dice).sum::<f64>() / 3.0;
    Ok((loss / batches.len().max(1) as f64, dice))
}

/// Epoch loop on explicit training and validation sets. Continues from the
/// model's epoch counter up to `cfg.epochs`; `best` seeds the best-model
/// tracking when resuming.
pub fn train_on<T: Real>(
    mut model: ModelState<T>,
    best: Option<ModelState<T>>,
    train_cases: &[&Case],
    val_cases: &[&Case],
    cfg: &TrainConfig,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if train_cases.is_empty() || val_cases.is_empty() {
        return Err(Error::InvalidArgument("training and validation sets must be non-empty".into()));
    }
    let val_ids: BTreeSet<&str> = val_cases.iter().map(|c| c.id.as_str()).collect();
    if let Some(c) = train_cases.iter().find(|c| val_ids.contains(c.id.as_str())) {
        return Err(Error::InvalidArgument(format!("case {} is in both training and validation sets", c.id)));
    }
    let train: Vec<Sampler> = train_cases.iter().map(|c| Sampler::new(c)).collect::<Result<_>>()?;
    let val: Vec<Sampler> = val_cases.iter().map(|c| Sampler::new(c)).collect::<Result<_>>()?;
    let val_batches = validation_batches::<T>(&val, &model.config, cfg);

    let mut best = best;
    let mut records = Vec::new();
    let mut sampled = BTreeSet::new();
    while model.epoch < cfg.epochs {
        let started = Instant::now();
        let epoch = model.epoch;
        let lr = poly_lr(&cfg.schedule, epoch);
        let mut train_loss = 0.0;
        for batch in 0..cfg.batches_per_epoch {
            let (x, labels) =
                sample_batch::<T>(&train, &model.config, cfg.foreground_fraction, &mut model.rng, Some(&mut sampled));
            let (logits, cache) = model.forward_cached(&x)?;
            let loss = dice_ce_loss(&logits, &labels)?;
            if !loss.total.is_finite() {
                return Err(Error::Numerical(format!("non-finite loss at epoch {} batch {batch}", epoch + 1)));
            }
            let grads = model.backward(&cache, &loss.dlogits)?;
            model.adam_step(&grads, lr).map_err(|e| match e {
                Error::Numerical(m) => Error::Numerical(format!("epoch {} batch {batch}: {m}", epoch + 1)),
                other => other,
            })?;
            train_loss += loss.total;
        }
        let (val_loss, epoch_dice) = validate_epoch(&model, &val_batches)?;
        let pseudo = pseudo_dice_update(model.pseudo_dice_ema, epoch_dice);
        model.pseudo_dice_ema = Some(pseudo);
        model.epoch += 1;
        records.push(EpochRecord {
            epoch: model.epoch,
            phase: cfg.phase,
            lr,
            train_loss: train_loss / cfg.batches_per_epoch as f64,
            val_loss,
            epoch_dice,
            pseudo_dice: pseudo,
            seconds: if cfg.record_time { started.elapsed().as_secs_f64() } else { 0.0 },
        });
        log::info!("{} epoch {} lr {lr:.3e} pseudo dice {pseudo:.4}", cfg.phase.name(), model.epoch);
        let improved = match &best {
            None => true,
            Some(b) => pseudo > b.pseudo_dice_ema.unwrap_or(f64::NEG_INFINITY),
        };
        if improved {
            best = Some(model.clone());
        }
    }
    let best = best.unwrap_or_else(|| model.clone());
    Ok(TrainOutcome { best, latest: model, records, sampled_ids: sampled })
}

/// Trains on every fold except `fold_index`, validating on that fold.
pub fn train<T: Real>(
    model: ModelState<T>,
    split: &FoldSplit,
    fold_index: usize,
    cases: &[Case],
    cfg: &TrainConfig,
) -> Result<TrainOutcome<T>> {
    let (train_set, val_set) = split.partition(cases, fold_index)?;
    train_on(model, None, &train_set, &val_set, cfg)
}

fn same_architecture(a: &UNetConfig, b: &UNetConfig) -> bool {
    a.dimensionality == b.dimensionality
        && a.base_features == b.base_features
        && a.stage_count == b.stage_count
        && a.strides == b.strides
        && a.kernels == b.kernels
        && a.patch_size == b.patch_size
        && a.deep_supervision_levels == b.deep_supervision_levels
        && a.num_classes == b.num_classes
}

/// Concatenates original and stylized cases; stylized cases must carry truth.
pub fn finetune_dataset(originals: &[Case], stylized: &[Case]) -> Result<Vec<Case>> {
    let mut ids = BTreeSet::new();
    for c in originals.iter().chain(stylized) {
        if c.truth.is_none() {
            return Err(Error::InvalidArgument(format!("fine-tuning case {} has no ground truth", c.id)));
        }
        if !ids.insert(c.id.as_str()) {
            return Err(Error::InvalidArgument(format!("duplicate fine-tuning case {}", c.id)));
        }
    }
    Ok(originals.iter().chain(stylized).cloned().collect())
}

/// Continues a pretrained model on new data with fresh optimizer moments,
/// a restarted epoch counter and the fine-tuning schedule.
pub fn finetune<T: Real>(
    pretrained: &ModelState<T>,
    architecture: &UNetConfig,
    train_cases: &[&Case],
    val_cases: &[&Case],
    cfg: &TrainConfig,
) -> Result<TrainOutcome<T>> {
    if !same_architecture(&pretrained.config, architecture) {
        return Err(Error::InvalidArgument(
            "pretrained model architecture differs from the fine-tuning configuration".into(),
        ));
    }
    let mut model = pretrained.clone();
    model.reset_optimizer();
    model.epoch = 0;
    model.pseudo_dice_ema = None;
    let cfg = TrainConfig { phase: Phase::Finetune, ..cfg.clone() };
    if cfg.epochs == 0 {
        return Ok(TrainOutcome {
            best: model.clone(),
            latest: model,
            records: Vec::new(),
            sampled_ids: BTreeSet::new(),
        });
    }
    train_on(model, None, train_cases, val_cases, &cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseEvaluation {
    pub id: String,
    pub dice: DiceReport,
    /// No tumour label predicted anywhere.
    pub empty_prediction: bool,
}

pub fn evaluate_model<T: Real>(model: &ModelState<T>, cases: &[&Case]) -> Result<Vec<CaseEvaluation>> {
    cases
        .iter()
        .map(|c| {
            let truth =
                c.truth.as_ref().ok_or_else(|| Error::InvalidArgument(format!("case {} has no ground truth", c.id)))?;
            let pred = sliding_window_predict(model, &c.images)?;
            Ok(CaseEvaluation {
                id: c.id.clone(),
                dice: region_dice_report(&pred, truth)?,
                empty_prediction: pred.data().iter().all(|&l| l == BACKGROUND),
            })
        })
        .collect()
}

pub fn mean_region_dice(evals: &[CaseEvaluation], region: Region) -> f64 {
    if evals.is_empty() {
        return f64::NAN;
    }
    evals.iter().map(|e| e.dice.get(region)).sum::<f64>() / evals.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DatasetSelector {
    #[serde(rename = "GLI")]
    Gli,
    #[serde(rename = "GLI+SSA")]
    GliSsa,
    #[serde(rename = "GLI+SSA2")]
    GliSsa2,
}

impl DatasetSelector {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "GLI" => Ok(DatasetSelector::Gli),
            "GLI+SSA" => Ok(DatasetSelector::GliSsa),
            "GLI+SSA2" => Ok(DatasetSelector::GliSsa2),
            other => Err(Error::InvalidArgument(format!("unknown dataset {other:?} (GLI, GLI+SSA, GLI+SSA2)"))),
        }
    }

    /// Ids selected from `(id, domain)` pairs. Clean phantoms stand in for
    /// GLI, degraded phantoms for SSA.
    pub fn select<'a>(&self, cases: impl IntoIterator<Item = (&'a str, Domain)>) -> Vec<String> {
        let ids: Vec<(&str, Domain)> = cases.into_iter().collect();
        match self {
            DatasetSelector::Gli => ids
                .iter()
                .filter(|(_, d)| matches!(d, Domain::Gli | Domain::PhantomClean))
                .map(|(id, _)| id.to_string())
                .collect(),
            DatasetSelector::GliSsa => ids.iter().map(|(id, _)| id.to_string()).collect(),
            DatasetSelector::GliSsa2 => {
                let all: Vec<&str> = ids.iter().map(|(id, _)| *id).collect();
                exclude_outliers(&all, &SSA_OUTLIERS).kept
            }
        }
    }
}

/// Experiment manifest, stored as JSON next to the run outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub name: String,
    pub dataset: DatasetSelector,
    pub unet: String,
    pub seed: u64,
    pub epochs: u64,
    pub initial_lr: f64,
    pub poly_exponent: f64,
    pub batches_per_epoch: usize,
    pub folds: Vec<usize>,
}

impl ExperimentConfig {
    pub fn unet_config(&self) -> Result<UNetConfig> {
        UNetConfig::preset(&self.unet, self.seed)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let mut tc = TrainConfig::new(self.epochs, self.initial_lr)?;
        tc.schedule = LRSchedule::new(self.initial_lr, self.poly_exponent, self.epochs.max(1))?;
        tc.batches_per_epoch = self.batches_per_epoch;
        tc.validate()?;
        Ok(tc)
    }

    pub fn validate(&self) -> Result<()> {
        self.unet_config()?.validate()?;
        self.train_config()?;
        if let Some(f) = self.folds.iter().find(|&&f| f >= FOLD_COUNT) {
            return Err(Error::InvalidArgument(format!("fold {f} out of range 0..{FOLD_COUNT}")));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub records: Vec<EpochRecord>,
    pub best_epoch: u64,
    pub best_pseudo_dice: f64,
    pub final_pseudo_dice: f64,
    pub best_eval: Vec<CaseEvaluation>,
    pub final_eval: Vec<CaseEvaluation>,
}

/// Trains and evaluates each requested fold from a fresh model.
pub fn cross_validate(cases: &[Case], experiment: &ExperimentConfig) -> Result<(FoldSplit, Vec<FoldResult>)> {
    let selected: BTreeSet<String> =
        experiment.dataset.select(cases.iter().map(|c| (c.id.as_str(), c.domain))).into_iter().collect();
    let cases: Vec<Case> = cases.iter().filter(|c| selected.contains(&c.id)).cloned().collect();
    let ids: Vec<&str> = cases.iter().map(|c| c.id.as_str()).collect();
    let split = make_folds(&ids, experiment.seed)?;
    let tc = experiment.train_config()?;
    let arch = experiment.unet_config()?;
    let mut results = Vec::new();
    for &fold in &experiment.folds {
        let (train_set, val_set) = split.partition(&cases, fold)?;
        let model = ModelState::<f32>::build(&UNetConfig { seed: experiment.seed + fold as u64, ..arch.clone() })?;
        let out = train_on(model, None, &train_set, &val_set, &tc)?;
        results.push(FoldResult {
            fold,
            best_epoch: out.best.epoch,
            best_pseudo_dice: out.best.pseudo_dice_ema.unwrap_or(0.0),
            final_pseudo_dice: out.latest.pseudo_dice_ema.unwrap_or(0.0),
            best_eval: evaluate_model(&out.best, &val_set)?,
            final_eval: evaluate_model(&out.latest, &val_set)?,
            records: out.records,
        });
    }
    Ok((split, results))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::phantom_cohort;
    use crate::preprocess::preprocess_all;
    use proptest::prelude::*;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("case-{i:05}")).collect()
    }

    #[test]
    fn ten_ids_give_five_pairs() {
        let split = make_folds(&ids(10), 3).unwrap();
        assert_eq!(split.fold_sizes(), vec![2; 5]);
        let all: BTreeSet<&str> = (0..5).flat_map(|f| split.fold_ids(f)).collect();
        assert_eq!(all.len(), 10);
        assert_eq!(split, make_folds(&ids(10), 3).unwrap());
        assert_ne!(split, make_folds(&ids(10), 4).unwrap());
        assert!(make_folds(&ids(4), 0).is_err());
        assert!(make_folds(&["a", "a", "b", "c", "d"], 0).is_err());
    }

    #[test]
    fn full_dataset_fold_sizes() {
        let split = make_folds(&ids(1311), 0).unwrap();
        let mut sizes = split.fold_sizes();
        sizes.sort_unstable();
        assert_eq!(sizes, vec![262, 262, 262, 262, 263]);
    }

    #[test]
    fn outlier_exclusion() {
        let mut all = ids(1307);
        all.extend(SSA_OUTLIERS.iter().map(|s| s.to_string()));
        let out = exclude_outliers(&all, &SSA_OUTLIERS);
        assert_eq!(out.kept.len(), 1307);
        assert_eq!(out.removed.len(), 4);
        assert!(out.missing.is_empty());
        let again = exclude_outliers(&out.kept, &SSA_OUTLIERS);
        assert_eq!(again.kept, out.kept);
        assert_eq!(again.missing.len(), 4);
        let none: [&str; 0] = [];
        assert_eq!(exclude_outliers(&all, &none).kept, all);
    }

    #[test]
    fn pseudo_dice_examples() {
        assert_eq!(pseudo_dice_update(None, 0.7), 0.7);
        assert!((pseudo_dice_update(Some(0.8), 0.9) - 0.81).abs() < 1e-12);
        let mut ema = None;
        for _ in 0..10 {
            ema = Some(pseudo_dice_update(ema, 0.42));
            assert!((ema.unwrap() - 0.42).abs() < 1e-15);
        }
    }

    proptest! {
        #[test]
        fn folds_partition(n in 5usize..200, seed in any::<u64>()) {
            let split = make_folds(&ids(n), seed).unwrap();
            let sizes = split.fold_sizes();
            prop_assert_eq!(sizes.iter().sum::<usize>(), n);
            prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        }

        #[test]
        fn ema_matches_closed_form(values in prop::collection::vec(0.0f64..1.0, 1..30)) {
            // closed form: (0.9^(n-1)) v0 + Σ_{i≥1} 0.1 · 0.9^(n-1-i) v_i
            let mut ema = None;
            for &v in &values {
                ema = Some(pseudo_dice_update(ema, v));
            }
            let n = values.len();
            let mut expect = 0.9f64.powi(n as i32 - 1) * values[0];
            for (i, &v) in values.iter().enumerate().skip(1) {
                expect += 0.1 * 0.9f64.powi((n - 1 - i) as i32) * v;
            }
            prop_assert!((ema.unwrap() - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn csv_layout() {
        let r = EpochRecord {
            epoch: 2,
            phase: Phase::Finetune,
            lr: 0.005,
            train_loss: 0.5,
            val_loss: 0.25,
            epoch_dice: 0.75,
            pseudo_dice: 0.7,
            seconds: 0.0,
        };
        assert_eq!(records_to_csv(&[r]), format!("{CSV_HEADER}\n2,0.005,0.5,0.25,0.7,0,FINETUNE\n"));
    }

    fn tiny_cases(n: usize, seed: u64) -> Vec<Case> {
        preprocess_all(&phantom_cohort(n, [12, 16, 16], seed).unwrap(), [1.0; 3]).unwrap()
    }

    fn tiny_model(seed: u64) -> ModelState<f32> {
        ModelState::build(&UNetConfig::desk_2d(seed).with_patch([1, 16, 16])).unwrap()
    }

    fn tiny_cfg(epochs: u64) -> TrainConfig {
        let mut c = TrainConfig::new(epochs, 0.01).unwrap();
        c.batches_per_epoch = 3;
        c.val_patches_per_case = 2;
        c
    }

    #[test]
    fn training_bookkeeping_and_hygiene() {
        let cases = tiny_cases(10, 1);
        let split = make_folds(&cases.iter().map(|c| c.id.clone()).collect::<Vec<_>>(), 2).unwrap();
        let out = train(tiny_model(1), &split, 0, &cases, &tiny_cfg(4)).unwrap();
        assert_eq!(out.records.len(), 4);
        let argmax = out.records.iter().fold(&out.records[0], |b, r| if r.pseudo_dice > b.pseudo_dice { r } else { b });
        assert_eq!(out.best.epoch, argmax.epoch);
        assert!(out.best.pseudo_dice_ema >= out.latest.pseudo_dice_ema);
        assert_eq!(out.latest.epoch, 4);
        for id in split.fold_ids(0) {
            assert!(!out.sampled_ids.contains(id));
        }
        for r in &out.records {
            assert!((0.0..=1.0).contains(&r.pseudo_dice));
            assert_eq!(r.seconds, 0.0);
        }
        let again = train(tiny_model(1), &split, 0, &cases, &tiny_cfg(4)).unwrap();
        assert_eq!(records_to_csv(&again.records), records_to_csv(&out.records));
    }

    #[test]
    fn overlapping_sets_rejected() {
        let cases = tiny_cases(3, 2);
        let refs: Vec<&Case> = cases.iter().collect();
        assert!(train_on(tiny_model(0), None, &refs, &refs[..1], &tiny_cfg(1)).is_err());
    }

    #[test]
    fn finetune_contracts() {
        let cases = tiny_cases(4, 3);
        let refs: Vec<&Case> = cases.iter().collect();
        let model = tiny_model(5);
        let arch = model.config.clone();
        let out = finetune(&model, &arch, &refs[..3], &refs[3..], &tiny_cfg(0)).unwrap();
        assert_eq!(out.latest.params, model.params);
        assert!(out.records.is_empty());

        let other = UNetConfig::desk_2d(5);
        assert!(finetune(&model, &other, &refs[..3], &refs[3..], &tiny_cfg(1)).is_err());

        let out = finetune(&model, &arch, &refs[..3], &refs[3..], &tiny_cfg(1)).unwrap();
        assert_eq!(out.records[0].phase, Phase::Finetune);

        let union = finetune_dataset(&cases[..2], &cases[2..]).unwrap();
        assert_eq!(union.len(), 4);
        assert!(finetune_dataset(&cases[..2], &cases[..1]).is_err());
    }

    #[test]
    fn resume_equals_uninterrupted() {
        let cases = tiny_cases(6, 4);
        let refs: Vec<&Case> = cases.iter().collect();
        let (tr, va) = refs.split_at(4);
        let full = train_on(tiny_model(2), None, tr, va, &tiny_cfg(3)).unwrap();
        let first = train_on(tiny_model(2), None, tr, va, &TrainConfig { epochs: 2, ..tiny_cfg(3) }).unwrap();
        let bytes = crate::unet::checkpoint_encode(&first.latest).unwrap();
        let restored = crate::unet::checkpoint_decode(&bytes).unwrap();
        let best = crate::unet::checkpoint_decode(&crate::unet::checkpoint_encode(&first.best).unwrap()).unwrap();
        let rest = train_on(restored, Some(best), tr, va, &tiny_cfg(3)).unwrap();
        let mut joined = first.records.clone();
        joined.extend(rest.records);
        assert_eq!(records_to_csv(&joined), records_to_csv(&full.records));
        assert_eq!(rest.latest, full.latest);
        assert_eq!(rest.best.epoch, full.best.epoch);
    }

    #[test]
    fn dataset_selectors() {
        let rows = [
            ("BraTS-GLI-00001-000", Domain::Gli),
            ("BraTS-SSA-00051-000", Domain::Ssa),
            ("BraTS-SSA-00002-000", Domain::Ssa),
        ];
        assert_eq!(DatasetSelector::Gli.select(rows).len(), 1);
        assert_eq!(DatasetSelector::GliSsa.select(rows).len(), 3);
        assert_eq!(DatasetSelector::GliSsa2.select(rows), vec!["BraTS-GLI-00001-000", "BraTS-SSA-00002-000"]);
        assert!(DatasetSelector::parse("SSA").is_err());
    }

    #[test]
    fn experiment_manifest_round_trip() {
        let cfg = ExperimentConfig {
            name: "demo".into(),
            dataset: DatasetSelector::GliSsa2,
            unet: "desk2d".into(),
            seed: 7,
            epochs: 30,
            initial_lr: 0.01,
            poly_exponent: 0.9,
            batches_per_epoch: 50,
            folds: vec![0, 1, 2, 3, 4],
        };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("exp.json");
        cfg.save(&p).unwrap();
        assert_eq!(ExperimentConfig::load(&p).unwrap(), cfg);
        let bad = ExperimentConfig { folds: vec![5], ..cfg };
        assert!(bad.validate().is_err());
    }
}
