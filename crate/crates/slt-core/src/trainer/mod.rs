//! Two-stage training orchestration: pretrain with a strategy's objective,
//! transfer a per-strategy subset of parameter groups, fine-tune for
//! translation, and record per-epoch curves plus the best checkpoint by
//! dev BLEU-4. Multi-seed runs aggregate into mean ± std summaries.

mod optim;
mod plot;
mod run;

pub use optim::{clip_global_norm, Optimizer};
pub use plot::{emit_curves, read_curves};
pub use run::{
    evaluate_objective, run_method, run_stage, translate_corpus, DataBundle, MethodRun,
    ModelShape, StageOutcome,
};

use crate::corpus::CorpusError;
use crate::metrics::MetricError;
use crate::model::{CheckpointError, DecoderChoice, ModelError};
use crate::objectives::{LossTerm, ObjectiveError, ObjectiveSpec, PresetName};
use crate::tensor::ParamGroup;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainerError {
    #[error("invalid training plan: {0}")]
    Config(String),
    #[error("training diverged in {stage} epoch {epoch}: {detail}")]
    DivergenceAbort {
        stage: Stage,
        epoch: usize,
        detail: String,
    },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

pub(crate) fn io_err(path: &std::path::Path, source: std::io::Error) -> TrainerError {
    TrainerError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Pretrain,
    Finetune,
}

impl Stage {
    pub fn as_str(&self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::Finetune => "finetune",
        }
    }

    /// Directory name inside a run: stage1 pretrains, stage2 fine-tunes.
    pub fn dir_name(&self) -> &'static str {
        match self {
            Stage::Pretrain => "stage1",
            Stage::Finetune => "stage2",
        }
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    SgdMomentum,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SchedulerKind {
    /// Linear warmup to the base rate, then a half-cosine decay to zero.
    Cosine,
    /// Cosine-shaped ramp up over the first 30% of steps, then a cosine
    /// decay to zero; the up-then-down single cycle.
    OneCycleCosine,
}

/// Fraction of the run an up-ramp occupies under the one-cycle policy.
pub const ONE_CYCLE_RAMP: f64 = 0.3;

/// A train loss past this magnitude counts as divergence even though f64
/// keeps representing it. No objective here produces values within orders
/// of magnitude of this on any input that is still trainable, and
/// half-precision training would already have overflowed (its maximum is
/// about 6.5e4), so by then the run is numerically dead in all but name.
pub const RUNAWAY_LOSS: f64 = 1e5;

/// Warmup rises linearly from 0 to `base_lr` over `warmup_steps`, then the
/// rate follows `base_lr/2 * (1 + cos(pi * progress))` down to zero at
/// `total_steps`.
pub fn cosine_lr(step: usize, total_steps: usize, base_lr: f64, warmup_steps: usize) -> f64 {
    assert!(step <= total_steps, "step {step} past total {total_steps}");
    assert!(warmup_steps <= total_steps, "warmup longer than the run");
    if step < warmup_steps {
        return base_lr * step as f64 / warmup_steps as f64;
    }
    if total_steps == warmup_steps {
        return base_lr;
    }
    let progress = (step - warmup_steps) as f64 / (total_steps - warmup_steps) as f64;
    0.5 * base_lr * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// One-cycle policy: cosine-shaped rise from 0 to `base_lr` over the first
/// [`ONE_CYCLE_RAMP`] of the run, then the same half-cosine decay to zero.
pub fn one_cycle_lr(step: usize, total_steps: usize, base_lr: f64) -> f64 {
    assert!(step <= total_steps, "step {step} past total {total_steps}");
    let up = one_cycle_ramp_steps(total_steps);
    if step < up {
        let progress = step as f64 / up as f64;
        return 0.5 * base_lr * (1.0 - (std::f64::consts::PI * progress).cos());
    }
    if total_steps == up {
        return base_lr;
    }
    let progress = (step - up) as f64 / (total_steps - up) as f64;
    0.5 * base_lr * (1.0 + (std::f64::consts::PI * progress).cos())
}

fn one_cycle_ramp_steps(total_steps: usize) -> usize {
    ((ONE_CYCLE_RAMP * total_steps as f64).round() as usize).min(total_steps)
}

impl SchedulerKind {
    /// Learning rate at `step`; both policies peak at exactly `base_lr`
    /// when the ramp ends and reach zero at `total_steps`.
    pub fn lr(&self, step: usize, total_steps: usize, base_lr: f64, warmup_steps: usize) -> f64 {
        match self {
            SchedulerKind::Cosine => cosine_lr(step, total_steps, base_lr, warmup_steps),
            SchedulerKind::OneCycleCosine => one_cycle_lr(step, total_steps, base_lr),
        }
    }

    /// First step at which the rate is guaranteed non-increasing.
    pub fn ramp_end(&self, total_steps: usize, warmup_steps: usize) -> usize {
        match self {
            SchedulerKind::Cosine => warmup_steps,
            SchedulerKind::OneCycleCosine => one_cycle_ramp_steps(total_steps),
        }
    }
}

/// Learning rate, optionally split: `base` applies to parameter groups
/// loaded from a checkpoint (the pretrained part), `adapter` to freshly
/// initialized groups. A single rate uses `base` everywhere.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSpec {
    pub base: f64,
    #[serde(default)]
    pub adapter: Option<f64>,
}

impl LrSpec {
    pub fn single(base: f64) -> LrSpec {
        LrSpec {
            base,
            adapter: None,
        }
    }

    pub fn split(base: f64, adapter: f64) -> LrSpec {
        LrSpec {
            base,
            adapter: Some(adapter),
        }
    }
}

fn default_grad_clip() -> f64 {
    1.0
}

/// Everything one training stage needs: objective, optimization recipe,
/// and the transfer contract (groups to load from the previous stage's
/// checkpoint, groups to freeze for the whole stage).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StagePlan {
    pub stage: Stage,
    pub objective: ObjectiveSpec,
    pub epochs: usize,
    pub optimizer: OptimizerKind,
    pub lr: LrSpec,
    pub scheduler: SchedulerKind,
    pub batch_size: usize,
    pub dropout: f64,
    #[serde(default)]
    pub load_groups: Vec<ParamGroup>,
    #[serde(default)]
    pub freeze_groups: Vec<ParamGroup>,
    /// Which decoder the translation-style terms (and dev decoding) use.
    pub decoder: DecoderChoice,
    #[serde(default = "default_grad_clip")]
    pub grad_clip: f64,
    #[serde(default)]
    pub warmup_steps: usize,
    /// The batch size the learning rate was tuned for; changing
    /// `batch_size` via [`StagePlan::rescale_batch`] scales the rate
    /// linearly against this.
    #[serde(default)]
    pub reference_batch: Option<usize>,
    /// Stop after this many epochs without a dev BLEU-4 improvement.
    #[serde(default)]
    pub patience: Option<usize>,
}

impl StagePlan {
    pub fn validate(&self) -> Result<(), TrainerError> {
        self.objective
            .validate()
            .map_err(|e| TrainerError::Config(e.to_string()))?;
        if self.epochs == 0 {
            return Err(TrainerError::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(TrainerError::Config("batch_size must be positive".into()));
        }
        let lr_ok = |x: f64| x.is_finite() && x > 0.0;
        if !lr_ok(self.lr.base) || self.lr.adapter.is_some_and(|a| !lr_ok(a)) {
            return Err(TrainerError::Config(format!(
                "learning rates must be positive, got {:?}",
                self.lr
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(TrainerError::Config(format!(
                "dropout must lie in [0, 1), got {}",
                self.dropout
            )));
        }
        if !(self.grad_clip.is_finite() && self.grad_clip > 0.0) {
            return Err(TrainerError::Config(format!(
                "grad_clip must be positive, got {}",
                self.grad_clip
            )));
        }
        if self.patience == Some(0) {
            return Err(TrainerError::Config("patience must be at least 1".into()));
        }
        Ok(())
    }

    /// Change the batch size and scale learning rates linearly against
    /// `reference_batch` (halve the batch, halve the rate).
    pub fn rescale_batch(&mut self, new_batch: usize) {
        if let Some(reference) = self.reference_batch {
            if reference > 0 && reference != new_batch {
                let k = new_batch as f64 / reference as f64;
                self.lr.base *= k;
                if let Some(a) = &mut self.lr.adapter {
                    *a *= k;
                }
            }
        }
        self.batch_size = new_batch;
    }

    /// Rate for a parameter group: loaded groups take `lr.base`, fresh
    /// groups take `lr.adapter` when the split is configured.
    pub fn group_lr(&self, group: ParamGroup) -> f64 {
        match self.lr.adapter {
            Some(adapter) if !self.load_groups.contains(&group) => adapter,
            _ => self.lr.base,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub train_loss: f64,
    pub dev_loss: f64,
    pub dev_bleu4: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BestCheckpoint {
    /// 1-based epoch the checkpoint was taken at.
    pub epoch: usize,
    pub dev_bleu4: f64,
    pub checkpoint: PathBuf,
}

/// Which groups a fine-tuning stage inherited and which stayed frozen.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransferReport {
    pub loaded: Vec<String>,
    pub frozen: Vec<String>,
}

/// Everything recorded about one stage of one seeded run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub seed: u64,
    pub stage: Stage,
    pub epochs: Vec<EpochStats>,
    pub best: BestCheckpoint,
    /// Test-split scores (beam 4) keyed bleu1..bleu4, rouge_l; filled for
    /// the final stage only.
    #[serde(default)]
    pub final_test: BTreeMap<String, f64>,
    #[serde(default)]
    pub transfer: Option<TransferReport>,
}

/// Per-metric mean and sample standard deviation over seeds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// The table-cell rendering: two decimals, e.g. "21.97 ± 0.25".
    pub fn cell(&self) -> String {
        format!("{:.2} ± {:.2}", self.mean, self.std)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Selection {
    pub metrics: BTreeMap<String, MeanStd>,
    pub seeds: Vec<u64>,
    /// One seed only: the std is 0 by construction and should be rendered
    /// with a marker, not presented as a real spread.
    pub single_seed: bool,
}

/// Aggregate final-test scores over seeded runs: sample mean and sample
/// (n-1) standard deviation per metric.
pub fn select_best(records: &[RunRecord]) -> Result<Selection, TrainerError> {
    if records.is_empty() {
        return Err(TrainerError::Config(
            "select_best needs at least one run record".into(),
        ));
    }
    let keys: Vec<String> = records[0].final_test.keys().cloned().collect();
    for r in records {
        if r.final_test.keys().cloned().collect::<Vec<_>>() != keys {
            return Err(TrainerError::Config(format!(
                "run for seed {} reports different metrics than the first run",
                r.seed
            )));
        }
    }
    let n = records.len();
    let mut metrics = BTreeMap::new();
    for key in keys {
        let values: Vec<f64> = records.iter().map(|r| r.final_test[&key]).collect();
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            var.sqrt()
        } else {
            0.0
        };
        metrics.insert(key, MeanStd { mean, std });
    }
    Ok(Selection {
        metrics,
        seeds: records.iter().map(|r| r.seed).collect(),
        single_seed: n == 1,
    })
}

/// The weight-transfer contract of a strategy: which groups its
/// fine-tuning stage loads from the pretraining checkpoint, which it
/// freezes, and which decoder it trains.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransferMap {
    pub load: Vec<ParamGroup>,
    pub freeze: Vec<ParamGroup>,
    pub decoder: DecoderChoice,
}

pub fn transfer_map(preset: PresetName) -> TransferMap {
    match preset {
        // The whole pretrained encoder-decoder carries over and stays
        // trainable; fine-tuning continues on the shallow decoder.
        PresetName::GfsltVlp | PresetName::Signcl => TransferMap {
            load: vec![
                ParamGroup::VisualBackbone,
                ParamGroup::TemporalBlock,
                ParamGroup::VisualTransformer,
                ParamGroup::TextEncoder,
                ParamGroup::DecoderShallow,
            ],
            freeze: vec![],
            decoder: DecoderChoice::Shallow,
        },
        // Only the visual side is pretrained; the language model starts
        // fresh and everything trains.
        PresetName::Sign2gptPg => TransferMap {
            load: ParamGroup::visual(),
            freeze: vec![],
            decoder: DecoderChoice::Shallow,
        },
        // The pretrained visual encoder is frozen as a feature extractor
        // under a deep decoder.
        PresetName::FlaLlm => TransferMap {
            load: ParamGroup::visual(),
            freeze: ParamGroup::visual(),
            decoder: DecoderChoice::Deep,
        },
        // Only the backbone and temporal block carry over, frozen; the
        // temporal transformer and deep decoder train from scratch.
        PresetName::C2rl => TransferMap {
            load: vec![ParamGroup::VisualBackbone, ParamGroup::TemporalBlock],
            freeze: vec![ParamGroup::VisualBackbone, ParamGroup::TemporalBlock],
            decoder: DecoderChoice::Deep,
        },
    }
}

/// A strategy's two stages with its published hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MethodPlan {
    pub preset: PresetName,
    pub stage1: StagePlan,
    pub stage2: StagePlan,
}

/// Reference recipe for a strategy: pretraining objective and published
/// optimizer/scheduler/rate/batch settings, then the fine-tuning stage
/// wired through [`transfer_map`]. Epoch counts and batch sizes are the
/// published full-scale values; scale them down for toy corpora.
pub fn method_plan(preset: PresetName) -> MethodPlan {
    let stage1_objective = preset.objective();
    let (s1_epochs, s1_batch, s1_opt, s1_sched, s1_lr, s1_dropout) = match preset {
        PresetName::GfsltVlp => (
            80,
            8,
            OptimizerKind::SgdMomentum,
            SchedulerKind::Cosine,
            LrSpec::single(1e-2),
            0.1,
        ),
        PresetName::Signcl => (
            80,
            128,
            OptimizerKind::SgdMomentum,
            SchedulerKind::Cosine,
            LrSpec::single(1e-2),
            0.1,
        ),
        PresetName::Sign2gptPg => (
            100,
            8,
            OptimizerKind::Adam,
            SchedulerKind::OneCycleCosine,
            LrSpec::single(3e-4),
            0.0,
        ),
        PresetName::FlaLlm => (
            100,
            16,
            OptimizerKind::SgdMomentum,
            SchedulerKind::Cosine,
            LrSpec::single(1e-2),
            0.0,
        ),
        PresetName::C2rl => (
            200,
            64,
            OptimizerKind::SgdMomentum,
            SchedulerKind::Cosine,
            LrSpec::single(1e-2),
            0.1,
        ),
    };
    let stage1 = StagePlan {
        stage: Stage::Pretrain,
        objective: stage1_objective,
        epochs: s1_epochs,
        optimizer: s1_opt,
        lr: s1_lr,
        scheduler: s1_sched,
        batch_size: s1_batch,
        dropout: s1_dropout,
        load_groups: vec![],
        freeze_groups: vec![],
        decoder: DecoderChoice::Shallow,
        grad_clip: default_grad_clip(),
        warmup_steps: 0,
        reference_batch: Some(s1_batch),
        patience: None,
    };

    let map = transfer_map(preset);
    let (s2_epochs, s2_batch, s2_opt, s2_sched, s2_lr, s2_smooth, s2_dropout) = match preset {
        PresetName::GfsltVlp => (
            200,
            8,
            OptimizerKind::SgdMomentum,
            SchedulerKind::Cosine,
            LrSpec::single(1e-2),
            0.2,
            0.0,
        ),
        PresetName::Signcl => (
            200,
            128,
            OptimizerKind::SgdMomentum,
            SchedulerKind::Cosine,
            LrSpec::single(1e-2),
            0.2,
            0.0,
        ),
        PresetName::Sign2gptPg => (
            100,
            8,
            OptimizerKind::Adam,
            SchedulerKind::OneCycleCosine,
            LrSpec::single(3e-4),
            0.1,
            0.0,
        ),
        PresetName::FlaLlm => (
            75,
            16,
            OptimizerKind::Adam,
            SchedulerKind::Cosine,
            LrSpec::split(1e-5, 1e-3),
            0.2,
            0.0,
        ),
        PresetName::C2rl => (
            80,
            128,
            OptimizerKind::Adam,
            SchedulerKind::Cosine,
            LrSpec::split(1e-5, 1e-3),
            0.2,
            0.3,
        ),
    };
    let mut stage2_objective = ObjectiveSpec::new(vec![(LossTerm::LightTranslation, 1.0)]);
    stage2_objective.label_smoothing = s2_smooth;
    if preset.finetune_adds_adjacent() {
        stage2_objective = stage2_objective.with_term(LossTerm::AdjacentFrame, 1.0);
    }
    let stage2 = StagePlan {
        stage: Stage::Finetune,
        objective: stage2_objective,
        epochs: s2_epochs,
        optimizer: s2_opt,
        lr: s2_lr,
        scheduler: s2_sched,
        batch_size: s2_batch,
        dropout: s2_dropout,
        load_groups: map.load,
        freeze_groups: map.freeze,
        decoder: map.decoder,
        grad_clip: default_grad_clip(),
        warmup_steps: 0,
        reference_batch: Some(s2_batch),
        patience: None,
    };
    MethodPlan {
        preset,
        stage1,
        stage2,
    }
}

/// Named sub-stream derivation: every random decision in a run hashes its
/// purpose tag into the run seed, so streams never collide or depend on
/// call order.
pub fn derive_seed(seed: u64, tag: &str) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64 ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    for &b in tag.as_bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}
