//! Cross-validated ablation protocol: seeded folds over the paired subjects, one model per
//! fold and configuration, per-slice metrics on the held-out subjects, aggregates and the
//! repeated-measures significance tests.

mod anova;
pub mod report;

pub use anova::{anova_rm, AnovaResult};
pub use report::{
    build_report, render_csv, render_jsonl, render_table, write_report, Contrast, Report, ReportFiles, SIGNIFICANCE_LEVEL,
};

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datasets::{Batch, DatasetError, DatasetHandle, Subject};
use crate::losses::{self, LossError, SsimParams};
use crate::model::{ModelConfig, ModelError, Network};
use crate::nn::Tensor;
use crate::trainer::{self, TrainError, TrainOutputs, TrainSchedule};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{available} paired subjects cannot fill {needed} folds")]
    TooFewSubjects { needed: usize, available: usize },
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
    #[error("invalid ablation: {0}")]
    InvalidAblation(String),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DatasetError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// One row of the ablation matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AblationConfig {
    pub multitask: bool,
    pub t1: bool,
    pub ra: bool,
    pub da: bool,
}

impl AblationConfig {
    pub const fn new(multitask: bool, t1: bool, ra: bool, da: bool) -> Self {
        Self { multitask, t1, ra, da }
    }

    /// The seven legal rows: three single-task, then four multi-task.
    pub const ALL: [AblationConfig; 7] = [
        AblationConfig::new(false, false, false, false),
        AblationConfig::new(false, true, false, false),
        AblationConfig::new(false, true, false, true),
        AblationConfig::new(true, false, false, false),
        AblationConfig::new(true, true, false, false),
        AblationConfig::new(true, true, true, false),
        AblationConfig::new(true, true, true, true),
    ];

    /// The proposed network; significance is tested against it.
    pub const REFERENCE: AblationConfig = AblationConfig::new(true, true, true, true);

    pub fn is_legal(&self) -> bool {
        Self::ALL.contains(self)
    }

    pub fn validate(&self) -> Result<(), EvalError> {
        if self.is_legal() {
            Ok(())
        } else {
            Err(EvalError::InvalidAblation(format!("{self} is not one of the seven ablation rows")))
        }
    }

    /// `base` with this row's switches applied.
    pub fn model_config(&self, base: &ModelConfig) -> ModelConfig {
        ModelConfig {
            use_t1: self.t1,
            use_residual_attention: self.ra,
            use_disentanglement_attention: self.da,
            multitask: self.multitask,
            ..base.clone()
        }
    }

    pub fn from_model(config: &ModelConfig) -> Self {
        Self::new(
            config.multitask,
            config.use_t1,
            config.use_residual_attention,
            config.use_disentanglement_attention,
        )
    }
}

impl fmt::Display for AblationConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.model_config(&ModelConfig::default()).tag())
    }
}

impl FromStr for AblationConfig {
    type Err = EvalError;

    /// Parses tags such as `M+T1+RA+DA` or `S-T1-RA-DA`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .iter()
            .copied()
            .find(|c| c.to_string().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| EvalError::InvalidAblation(format!("unknown configuration tag {s:?}")))
    }
}

/// Evaluation condition of a slice; the phantom analogue of the clinical challenge split.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Condition {
    /// Local activation hotspot (reported alongside the clinical label "hypercapnia").
    Activated,
    /// No activation (clinical label "normocapnia").
    Resting,
}

impl Condition {
    pub fn of(subject: &Subject) -> Self {
        if subject.activated {
            Condition::Activated
        } else {
            Condition::Resting
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Condition::Activated => "activated (hypercapnia)",
            Condition::Resting => "resting (normocapnia)",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SliceRecord {
    pub subject: u64,
    pub condition: Condition,
    pub ssim: f64,
    pub mse: f64,
    pub psnr: f64,
}

/// Mean and sample standard deviation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Summary {
    pub n: usize,
    pub mean: f64,
    pub sd: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self {
                n,
                mean: f64::NAN,
                sd: f64::NAN,
            };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let sd = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Self { n, mean, sd }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct MetricSummaries {
    pub ssim: Summary,
    pub mse: Summary,
    pub psnr: Summary,
}

impl MetricSummaries {
    pub fn of<'a>(records: impl IntoIterator<Item = &'a SliceRecord> + Clone) -> Self {
        let col = |f: fn(&SliceRecord) -> f64| -> Vec<f64> { records.clone().into_iter().map(f).collect() };
        Self {
            ssim: Summary::of(&col(|r| r.ssim)),
            mse: Summary::of(&col(|r| r.mse)),
            psnr: Summary::of(&col(|r| r.psnr)),
        }
    }
}

/// Summaries per condition and over all slices.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Aggregates {
    pub activated: MetricSummaries,
    pub resting: MetricSummaries,
    pub all: MetricSummaries,
}

impl Aggregates {
    pub fn of(records: &[SliceRecord]) -> Self {
        let cond = |c: Condition| MetricSummaries::of(records.iter().filter(move |r| r.condition == c));
        Self {
            activated: cond(Condition::Activated),
            resting: cond(Condition::Resting),
            all: MetricSummaries::of(records.iter()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FoldResult {
    pub fold_id: usize,
    pub validation_subjects: Vec<u64>,
    pub records: Vec<SliceRecord>,
    pub aggregates: Aggregates,
}

impl FoldResult {
    pub fn new(fold_id: usize, validation_subjects: Vec<u64>, records: Vec<SliceRecord>) -> Self {
        let aggregates = Aggregates::of(&records);
        Self {
            fold_id,
            validation_subjects,
            records,
            aggregates,
        }
    }
}

/// Seeded partition of `ids` into `k` disjoint folds whose sizes differ by at most one.
pub fn folds(ids: &[u64], k: usize, seed: u64) -> Result<Vec<Vec<u64>>, EvalError> {
    if k == 0 || ids.len() < k {
        return Err(EvalError::TooFewSubjects {
            needed: k.max(1),
            available: ids.len(),
        });
    }
    let mut order = ids.to_vec();
    order.sort_unstable();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut out = vec![Vec::new(); k];
    for (i, id) in order.into_iter().enumerate() {
        out[i % k].push(id);
    }
    for f in &mut out {
        f.sort_unstable();
    }
    Ok(out)
}

/// Per-slice metrics of `pred` against the PET of `subjects`.
pub fn score(pred: &Tensor<f32>, subjects: &[&Subject], ssim: &SsimParams) -> Result<Vec<SliceRecord>, EvalError> {
    let gt = Batch::from_subjects(subjects, false)
        .pet
        .ok_or_else(|| EvalError::DegenerateInput("scoring needs paired subjects".into()))?;
    let s = losses::ssim(pred, &gt, ssim)?;
    let m = losses::mse(pred, &gt)?;
    Ok(subjects
        .iter()
        .enumerate()
        .map(|(i, sub)| SliceRecord {
            subject: sub.id,
            condition: Condition::of(sub),
            ssim: s[i],
            mse: m[i],
            psnr: losses::psnr_from_mse(m[i], 1.0),
        })
        .collect())
}

/// Slices per inference batch.
const EVAL_CHUNK: usize = 8;

/// Score a trained network on the paired subjects with the given ids.
pub fn evaluate(net: &mut Network<f32>, handle: &DatasetHandle, ids: &[u64]) -> Result<Vec<SliceRecord>, EvalError> {
    let params = SsimParams::default();
    let use_t1 = net.config().use_t1;
    let subjects = ids
        .iter()
        .map(|&id| handle.subject(id).ok_or(DatasetError::UnknownSubject(id)))
        .collect::<Result<Vec<_>, _>>()?;
    let mut records = Vec::with_capacity(subjects.len());
    for chunk in subjects.chunks(EVAL_CHUNK) {
        let batch = Batch::from_subjects(chunk, use_t1);
        let pred = net.predict(&batch.asl, batch.t1.as_ref())?;
        records.extend(score(&pred, chunk, &params)?);
    }
    Ok(records)
}

/// No-learning reference: the input ASL scored as if it were the PET prediction.
pub fn baseline(handle: &DatasetHandle, ids: &[u64]) -> Result<Vec<SliceRecord>, EvalError> {
    let params = SsimParams::default();
    let subjects = ids
        .iter()
        .map(|&id| handle.subject(id).ok_or(DatasetError::UnknownSubject(id)))
        .collect::<Result<Vec<_>, _>>()?;
    let batch = Batch::from_subjects(&subjects, false);
    score(&batch.asl, &subjects, &params)
}

/// Train on all but one fold and score the held-out fold, for every fold.
///
/// Folds come from `schedule.seed`, so every configuration run with the same schedule sees
/// the same splits. Unpaired subjects are always training data.
pub fn crossvalidate(
    corpus: &DatasetHandle,
    k: usize,
    ablation: &AblationConfig,
    base: &ModelConfig,
    schedule: &TrainSchedule,
) -> Result<Vec<FoldResult>, EvalError> {
    ablation.validate()?;
    let config = ablation.model_config(base);
    let paired_ids: Vec<u64> = corpus.paired().map(|s| s.id).collect();
    let unpaired_ids: Vec<u64> = corpus.unpaired().map(|s| s.id).collect();
    let splits = folds(&paired_ids, k, schedule.seed)?;
    let unpaired = corpus.subset(&unpaired_ids)?;
    let mut results = Vec::with_capacity(k);
    for (fold_id, held_out) in splits.iter().enumerate() {
        let train_ids: Vec<u64> = paired_ids.iter().copied().filter(|id| !held_out.contains(id)).collect();
        let train = corpus.subset(&train_ids)?;
        log::info!("{ablation} fold {fold_id}: {} train, {} held out", train_ids.len(), held_out.len());
        let (mut net, _) = trainer::train(&config, schedule, &train, Some(&unpaired), &TrainOutputs::default())?;
        let records = evaluate(&mut net, corpus, held_out)?;
        results.push(FoldResult::new(fold_id, held_out.clone(), records));
    }
    Ok(results)
}

/// Cross-validation results of one ablation row.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationResult {
    pub config: AblationConfig,
    pub parameters: usize,
    pub folds: Vec<FoldResult>,
}

impl AblationResult {
    pub fn records(&self) -> impl Iterator<Item = &SliceRecord> {
        self.folds.iter().flat_map(|f| &f.records)
    }

    /// Aggregates over the slices of every fold.
    pub fn pooled(&self) -> Aggregates {
        let all: Vec<SliceRecord> = self.records().cloned().collect();
        Aggregates::of(&all)
    }

    /// Unweighted mean of the per-fold mean SSIM.
    pub fn fold_mean_ssim(&self) -> f64 {
        self.folds.iter().map(|f| f.aggregates.all.ssim.mean).sum::<f64>() / self.folds.len() as f64
    }
}

/// Cross-validate each configuration with identical folds and schedules.
pub fn ablate(
    corpus: &DatasetHandle,
    k: usize,
    configs: &[AblationConfig],
    base: &ModelConfig,
    schedule: &TrainSchedule,
) -> Result<Vec<AblationResult>, EvalError> {
    configs
        .iter()
        .map(|c| {
            let parameters = Network::<f32>::build(&c.model_config(base), schedule.seed)?.count_parameters(None);
            Ok(AblationResult {
                config: *c,
                parameters,
                folds: crossvalidate(corpus, k, c, base, schedule)?,
            })
        })
        .collect()
}
