//! Stage and method execution: seeded epochs over the corpus, per-epoch
//! dev evaluation, best-checkpoint tracking, transfer between stages, and
//! final test scoring.

use super::{
    derive_seed, emit_curves, io_err, BestCheckpoint, EpochStats, MethodPlan, Optimizer,
    RunRecord, StagePlan, TrainerError, TransferReport,
};
use crate::corpus::{
    load_split, CorpusManifest, Language, LoadedSample, SamplingPolicy, Split, TokSegmentation,
    Tokenizer,
};
use crate::corpus::{epoch_batches, make_batch, Batch};
use crate::metrics::MetricProfile;
use crate::model::{
    generate, load_checkpoint, save_checkpoint, CheckpointMeta, DecoderChoice, GenerateParams,
    ModelBundle, TextStackConfig, VisualEncoderConfig,
};
use crate::objectives::{
    training_step, GlossVocab, LossTerm, ObjectiveError, ObjectiveRig, ObjectiveSpec, PresetName,
};
use crate::tensor::{Fwd, ParamGroup};
use ndarray::Axis;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

/// The in-memory corpus a run trains on.
pub struct DataBundle {
    pub train: Vec<LoadedSample>,
    pub dev: Vec<LoadedSample>,
    pub test: Vec<LoadedSample>,
    pub tokenizer: Tokenizer,
    pub language: Language,
    pub policy: SamplingPolicy,
}

impl DataBundle {
    /// Decode every split and fit the tokenizer on the training sentences.
    pub fn load(manifest: &CorpusManifest, policy: SamplingPolicy) -> Result<DataBundle, TrainerError> {
        let train = load_split(manifest, Split::Train)?;
        let dev = load_split(manifest, Split::Dev)?;
        let test = load_split(manifest, Split::Test)?;
        if train.is_empty() || dev.is_empty() || test.is_empty() {
            return Err(TrainerError::Config(format!(
                "every split needs samples: train {}, dev {}, test {}",
                train.len(),
                dev.len(),
                test.len()
            )));
        }
        // Chinese text carries no useful whitespace, so it tokenizes per
        // character; everything else splits on whitespace.
        let segmentation = match manifest.language {
            Language::Chinese => TokSegmentation::Character,
            Language::German | Language::Synthetic => TokSegmentation::Word,
        };
        let tokenizer =
            Tokenizer::from_corpus(train.iter().map(|s| s.sentence.as_str()), segmentation);
        Ok(DataBundle {
            train,
            dev,
            test,
            tokenizer,
            language: manifest.language,
            policy,
        })
    }

    pub fn split(&self, split: Split) -> &[LoadedSample] {
        match split {
            Split::Train => &self.train,
            Split::Dev => &self.dev,
            Split::Test => &self.test,
        }
    }
}

/// Model dimensions shared by both stages; each stage applies its own
/// dropout before building its bundle.
#[derive(Debug, Clone)]
pub struct ModelShape {
    pub vcfg: VisualEncoderConfig,
    pub tcfg: TextStackConfig,
}

impl ModelShape {
    fn with_dropout(&self, dropout: f64) -> (VisualEncoderConfig, TextStackConfig) {
        let mut vcfg = self.vcfg.clone();
        let mut tcfg = self.tcfg.clone();
        vcfg.dropout = dropout;
        tcfg.dropout = dropout;
        (vcfg, tcfg)
    }
}

fn contrastive(objective: &ObjectiveSpec) -> bool {
    objective.has_term(LossTerm::ClipContrastive) || objective.has_term(LossTerm::CicoContrastive)
}

/// Index batches for one pass; when the objective compares samples within
/// the batch, a trailing singleton is folded into the previous batch so no
/// step sees fewer than two samples.
fn plan_batches(
    n: usize,
    batch_size: usize,
    needs_pairs: bool,
    seed: u64,
    epoch: usize,
) -> Vec<Vec<usize>> {
    let mut batches = epoch_batches(n, batch_size, seed, epoch);
    if needs_pairs && batches.len() >= 2 {
        let last = batches.last().unwrap();
        if last.len() < 2 {
            let tail = batches.pop().unwrap();
            batches.last_mut().unwrap().extend(tail);
        }
    }
    batches
}

fn gather<'a>(samples: &'a [LoadedSample], idx: &[usize]) -> Vec<&'a LoadedSample> {
    idx.iter().map(|&i| &samples[i]).collect()
}

fn gloss_vocab_for(data: &DataBundle) -> Result<GlossVocab, TrainerError> {
    let mut tokens = Vec::new();
    for s in &data.train {
        match &s.gloss {
            Some(g) => tokens.extend(g.iter().cloned()),
            None => tokens.extend(crate::corpus::extract_pseudo_gloss(
                data.language,
                &s.sentence,
            )?),
        }
    }
    Ok(GlossVocab::from_tokens(tokens))
}

fn batch_gloss_ids(
    vocab: Option<&GlossVocab>,
    batch: &Batch,
    language: Language,
) -> Result<Option<Vec<Vec<usize>>>, TrainerError> {
    match vocab {
        Some(v) => Ok(Some(v.encode_batch(batch, language)?)),
        None => Ok(None),
    }
}

/// Pre-assembled evaluation batches (fixed order, fixed frame sampling),
/// reused every epoch so scores are comparable across epochs and exactly
/// reproducible from a reloaded checkpoint.
struct EvalSet {
    batches: Vec<(Batch, Option<Vec<Vec<usize>>>)>,
    references: Vec<String>,
}

fn build_eval_set(
    samples: &[LoadedSample],
    data: &DataBundle,
    batch_size: usize,
    needs_pairs: bool,
    gloss_vocab: Option<&GlossVocab>,
    seed: u64,
) -> Result<EvalSet, TrainerError> {
    if needs_pairs && samples.len() < 2 {
        return Err(TrainerError::Config(
            "a contrastive objective needs at least 2 samples per split".into(),
        ));
    }
    let order: Vec<usize> = (0..samples.len()).collect();
    let mut chunks: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    if needs_pairs && chunks.len() >= 2 && chunks.last().unwrap().len() < 2 {
        let tail = chunks.pop().unwrap();
        chunks.last_mut().unwrap().extend(tail);
    }
    let mut batches = Vec::with_capacity(chunks.len());
    for (i, chunk) in chunks.iter().enumerate() {
        let refs = gather(samples, chunk);
        let batch = make_batch(
            &refs,
            &data.tokenizer,
            &data.policy,
            derive_seed(seed, &format!("eval-batch/{i}")),
        )?;
        let gloss = batch_gloss_ids(gloss_vocab, &batch, data.language)?;
        batches.push((batch, gloss));
    }
    Ok(EvalSet {
        batches,
        references: samples.iter().map(|s| s.sentence.clone()).collect(),
    })
}

/// Mean per-sample objective value over pre-built batches, in eval mode.
pub fn evaluate_objective(
    bundle: &mut ModelBundle,
    rig: &ObjectiveRig,
    batches: &[(Batch, Option<Vec<Vec<usize>>>)],
    decoder: DecoderChoice,
    seed: u64,
) -> Result<f64, TrainerError> {
    let mut total = 0.0;
    let mut count = 0usize;
    for (i, (batch, gloss)) in batches.iter().enumerate() {
        let out = training_step(
            bundle,
            rig,
            batch,
            gloss.as_deref(),
            decoder,
            false,
            derive_seed(seed, &format!("eval-step/{i}")),
        )?;
        total += out.loss * batch.size() as f64;
        count += batch.size();
    }
    Ok(total / count as f64)
}

/// Decode every batch with the chosen decoder and return one candidate
/// sentence per sample, in corpus order.
fn translate_batches(
    bundle: &mut ModelBundle,
    decoder: DecoderChoice,
    batches: &[(Batch, Option<Vec<Vec<usize>>>)],
    tokenizer: &Tokenizer,
    params: &GenerateParams,
) -> Result<Vec<String>, TrainerError> {
    let mut out = Vec::new();
    for (batch, _) in batches {
        let features = {
            let mut f = Fwd::new(&mut bundle.store, false, ChaCha8Rng::seed_from_u64(0));
            let video = bundle.visual.forward(&mut f, &batch.frames, &batch.frame_mask)?;
            let values = f.g.value(video.features).clone();
            (values, video.mask)
        };
        let (values, mask) = features;
        let dec = match decoder {
            DecoderChoice::Shallow => &bundle.decoder_shallow,
            DecoderChoice::Deep => &bundle.decoder_deep,
        };
        for (bi, row_mask) in mask.iter().enumerate() {
            let memory = values
                .index_axis(Axis(0), bi)
                .insert_axis(Axis(0))
                .to_owned()
                .into_dyn();
            let ids = generate(&mut bundle.store, dec, &memory, row_mask, params);
            out.push(tokenizer.decode(&ids));
        }
    }
    Ok(out)
}

/// Generate a translation for every sample (fixed order, seeded frame
/// sampling) and return the candidate sentences.
pub fn translate_corpus(
    bundle: &mut ModelBundle,
    decoder: DecoderChoice,
    samples: &[LoadedSample],
    data: &DataBundle,
    batch_size: usize,
    params: &GenerateParams,
    seed: u64,
) -> Result<Vec<String>, TrainerError> {
    let eval = build_eval_set(samples, data, batch_size, false, None, seed)?;
    translate_batches(bundle, decoder, &eval.batches, &data.tokenizer, params)
}

fn write_record(out_dir: &Path, record: &RunRecord) -> Result<(), TrainerError> {
    let path = out_dir.join("record.json");
    let json = serde_json::to_string_pretty(record)
        .map_err(|e| TrainerError::Config(format!("record serialization failed: {e}")))?;
    fs::write(&path, json).map_err(|e| io_err(&path, e))
}

/// One finished stage: its record plus the trained bundle (the caller may
/// keep training or evaluate on it).
pub struct StageOutcome {
    pub record: RunRecord,
    pub bundle: ModelBundle,
}

impl std::fmt::Debug for StageOutcome {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("StageOutcome")
            .field("record", &self.record)
            .finish_non_exhaustive()
    }
}

/// Execute one training stage end to end.
///
/// Builds a fresh bundle from `(shape, stage dropout, derived init seed)`,
/// loads `plan.load_groups` from `source_checkpoint`, freezes
/// `plan.freeze_groups`, then runs seeded epochs: shuffled batches, one
/// optimizer step per batch with the scheduled rate, per-epoch dev loss and
/// dev BLEU-4 (beam 1), best-checkpoint tracking, curves, `record.json`,
/// and optionally `config.resolved`.
#[allow(clippy::too_many_arguments)]
pub fn run_stage(
    plan: &StagePlan,
    data: &DataBundle,
    shape: &ModelShape,
    preset: PresetName,
    seed: u64,
    out_dir: &Path,
    source_checkpoint: Option<&Path>,
    resolved_config: Option<&str>,
) -> Result<StageOutcome, TrainerError> {
    plan.validate()?;
    if !plan.load_groups.is_empty() && source_checkpoint.is_none() {
        return Err(TrainerError::Config(format!(
            "stage {} wants to load {} groups but no source checkpoint was supplied",
            plan.stage,
            plan.load_groups.len()
        )));
    }

    fs::create_dir_all(out_dir).map_err(|e| io_err(out_dir, e))?;
    let ckpt_dir = out_dir.join("checkpoints");
    fs::create_dir_all(&ckpt_dir).map_err(|e| io_err(&ckpt_dir, e))?;
    if let Some(text) = resolved_config {
        let path = out_dir.join("config.resolved");
        fs::write(&path, text).map_err(|e| io_err(&path, e))?;
    }

    let stage_seed = derive_seed(seed, plan.stage.as_str());
    let (vcfg, tcfg) = shape.with_dropout(plan.dropout);
    let mut bundle = ModelBundle::build(
        vcfg,
        tcfg,
        data.tokenizer.vocab_size(),
        derive_seed(stage_seed, "init"),
    )?;

    let mut transfer = None;
    if let Some(source) = source_checkpoint {
        if !plan.load_groups.is_empty() {
            let report = load_checkpoint(&mut bundle.store, source, &plan.load_groups)?;
            let mut loaded = report.loaded.clone();
            loaded.sort();
            let mut frozen: Vec<String> = plan
                .freeze_groups
                .iter()
                .map(|g| g.as_str().to_string())
                .collect();
            frozen.sort();
            transfer = Some(TransferReport { loaded, frozen });
        }
    }
    bundle.store.set_frozen_groups(&plan.freeze_groups);

    let needs_gloss = plan.objective.has_term(LossTerm::PseudoGlossAlign);
    let gloss_vocab = if needs_gloss {
        Some(gloss_vocab_for(data)?)
    } else {
        None
    };
    let rig = ObjectiveRig::new(
        &mut bundle.store,
        plan.objective.clone(),
        bundle.vcfg.hidden_dim,
        gloss_vocab.as_ref(),
        derive_seed(stage_seed, "rig"),
    )?;

    let needs_pairs = contrastive(&plan.objective);
    let n_train = data.train.len();
    if needs_pairs && n_train < 2 {
        return Err(TrainerError::Config(
            "a contrastive objective needs at least 2 training samples".into(),
        ));
    }
    let steps_per_epoch = plan_batches(
        n_train,
        plan.batch_size,
        needs_pairs,
        derive_seed(stage_seed, "shuffle"),
        0,
    )
    .len();
    let total_steps = steps_per_epoch * plan.epochs;
    if plan.warmup_steps > total_steps {
        return Err(TrainerError::Config(format!(
            "warmup ({} steps) exceeds the whole run ({total_steps} steps)",
            plan.warmup_steps
        )));
    }

    let dev_eval_seed = derive_seed(stage_seed, "dev");
    let dev_set = build_eval_set(
        &data.dev,
        data,
        plan.batch_size,
        needs_pairs,
        gloss_vocab.as_ref(),
        dev_eval_seed,
    )?;
    let gen_params = GenerateParams {
        beam: 1,
        max_len: dev_max_len(data),
    };

    let mut optimizer = Optimizer::new(plan.optimizer);
    let mut record = RunRecord {
        seed,
        stage: plan.stage,
        epochs: Vec::with_capacity(plan.epochs),
        best: BestCheckpoint {
            epoch: 0,
            dev_bleu4: f64::NEG_INFINITY,
            checkpoint: ckpt_dir.join("best.cpt"),
        },
        final_test: BTreeMap::new(),
        transfer,
    };

    for epoch in 0..plan.epochs {
        let batches = plan_batches(
            n_train,
            plan.batch_size,
            needs_pairs,
            derive_seed(stage_seed, "shuffle"),
            epoch,
        );
        let mut loss_sum = 0.0;
        let mut sample_count = 0usize;
        for (bi, idx) in batches.iter().enumerate() {
            let refs = gather(&data.train, idx);
            let batch = make_batch(
                &refs,
                &data.tokenizer,
                &data.policy,
                derive_seed(stage_seed, &format!("batch/{epoch}/{bi}")),
            )?;
            let gloss = batch_gloss_ids(gloss_vocab.as_ref(), &batch, data.language)?;

            bundle.store.zero_grads();
            let step_seed = derive_seed(stage_seed, &format!("step/{epoch}/{bi}"));
            let out = match training_step(
                &mut bundle,
                &rig,
                &batch,
                gloss.as_deref(),
                plan.decoder,
                true,
                step_seed,
            ) {
                Ok(out) => out,
                // A numerically dead loss mid-training is divergence, not
                // a configuration problem: abort the run.
                Err(ObjectiveError::Numerical(msg)) => {
                    return Err(TrainerError::DivergenceAbort {
                        stage: plan.stage,
                        epoch: epoch + 1,
                        detail: msg,
                    })
                }
                Err(e) => return Err(e.into()),
            };
            if !out.loss.is_finite() || out.loss.abs() > super::RUNAWAY_LOSS {
                return Err(TrainerError::DivergenceAbort {
                    stage: plan.stage,
                    epoch: epoch + 1,
                    detail: format!("train loss {}", out.loss),
                });
            }
            loss_sum += out.loss * batch.size() as f64;
            sample_count += batch.size();

            let grad_norm = super::clip_global_norm(&mut bundle.store, plan.grad_clip);
            if !grad_norm.is_finite() {
                return Err(TrainerError::DivergenceAbort {
                    stage: plan.stage,
                    epoch: epoch + 1,
                    detail: format!("gradient norm {grad_norm}"),
                });
            }
            let global_step = epoch * steps_per_epoch + bi;
            let factor = plan
                .scheduler
                .lr(global_step, total_steps, 1.0, plan.warmup_steps);
            optimizer.step(&mut bundle.store, |group| plan.group_lr(group) * factor);
        }
        let train_loss = loss_sum / sample_count as f64;

        let dev_loss = evaluate_objective(
            &mut bundle,
            &rig,
            &dev_set.batches,
            plan.decoder,
            dev_eval_seed,
        )?;
        let cands = translate_batches(
            &mut bundle,
            plan.decoder,
            &dev_set.batches,
            &data.tokenizer,
            &gen_params,
        )?;
        let dev_bleu4 = crate::metrics::score_corpus(
            &cands,
            &dev_set.references,
            &MetricProfile::word_plain(),
        )?
        .bleu[3];

        record.epochs.push(EpochStats {
            train_loss,
            dev_loss,
            dev_bleu4,
        });
        if dev_bleu4 > record.best.dev_bleu4 {
            record.best.epoch = epoch + 1;
            record.best.dev_bleu4 = dev_bleu4;
            save_checkpoint(
                &bundle.store,
                &CheckpointMeta {
                    stage: plan.stage.as_str().to_string(),
                    preset: preset.as_str().to_string(),
                    seed,
                    epoch: epoch + 1,
                    dev_bleu4,
                },
                &record.best.checkpoint,
            )?;
        }
        if let Some(patience) = plan.patience {
            if epoch + 1 - record.best.epoch >= patience {
                break;
            }
        }
    }

    emit_curves(&record, out_dir)?;
    write_record(out_dir, &record)?;
    Ok(StageOutcome { record, bundle })
}

/// Decode budget for evaluation: the longest reference plus slack, so the
/// model can overshoot without being cut exactly at the reference length.
fn dev_max_len(data: &DataBundle) -> usize {
    let longest = data
        .dev
        .iter()
        .chain(&data.test)
        .map(|s| data.tokenizer.encode(&s.sentence).len())
        .max()
        .unwrap_or(8);
    longest + 4
}

/// Both stages of one seeded run, plus the final test scores.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MethodRun {
    pub preset: PresetName,
    pub seed: u64,
    pub stage1: RunRecord,
    pub stage2: RunRecord,
}

/// Full beam used once per run, on the test split.
pub const FINAL_BEAM: usize = 4;

/// Run a strategy end to end for every seed: pretrain, transfer per the
/// plan's load/freeze sets, fine-tune, then score the test split with the
/// best fine-tuned checkpoint at beam 4.
pub fn run_method(
    plan: &MethodPlan,
    data: &DataBundle,
    shape: &ModelShape,
    seeds: &[u64],
    runs_root: &Path,
    resolved_config: Option<&str>,
) -> Result<Vec<MethodRun>, TrainerError> {
    if seeds.is_empty() {
        return Err(TrainerError::Config("no seeds supplied".into()));
    }
    let mut runs = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let run_dir = runs_root
            .join(plan.preset.as_str())
            .join(seed.to_string());
        let stage1_dir = run_dir.join(plan.stage1.stage.dir_name());
        let stage2_dir = run_dir.join(plan.stage2.stage.dir_name());

        let stage1 = run_stage(
            &plan.stage1,
            data,
            shape,
            plan.preset,
            seed,
            &stage1_dir,
            None,
            resolved_config,
        )?;
        let stage2 = run_stage(
            &plan.stage2,
            data,
            shape,
            plan.preset,
            seed,
            &stage2_dir,
            Some(&stage1.record.best.checkpoint),
            resolved_config,
        )?;

        let mut bundle = stage2.bundle;
        load_checkpoint(
            &mut bundle.store,
            &stage2.record.best.checkpoint,
            &ParamGroup::ALL,
        )?;
        let cands = translate_corpus(
            &mut bundle,
            plan.stage2.decoder,
            &data.test,
            data,
            plan.stage2.batch_size,
            &GenerateParams {
                beam: FINAL_BEAM,
                max_len: dev_max_len(data),
            },
            derive_seed(seed, "test"),
        )?;
        let refs: Vec<String> = data.test.iter().map(|s| s.sentence.clone()).collect();
        let report =
            crate::metrics::score_corpus(&cands, &refs, &MetricProfile::word_plain())?;

        let mut record = stage2.record;
        for (k, v) in report.bleu.iter().enumerate() {
            record.final_test.insert(format!("bleu{}", k + 1), *v);
        }
        record.final_test.insert("rouge_l".into(), report.rouge_l);
        write_record(&stage2_dir, &record)?;

        runs.push(MethodRun {
            preset: plan.preset,
            seed,
            stage1: stage1.record,
            stage2: record,
        });
    }
    Ok(runs)
}
