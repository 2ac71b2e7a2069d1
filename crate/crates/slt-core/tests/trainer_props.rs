//! Property tests for the training schedule, gradient clipping, and seed
//! aggregation.

use ndarray::{ArrayD, IxDyn};
use proptest::prelude::*;
use slt_core::tensor::{ParamGroup, ParamStore};
use slt_core::trainer::{
    clip_global_norm, derive_seed, select_best, BestCheckpoint, EpochStats, LrSpec, RunRecord,
    SchedulerKind, Stage,
};
use std::collections::BTreeMap;

proptest! {
    #[test]
    fn schedules_stay_within_zero_and_base(
        total in 1usize..300,
        warmup_frac in 0.0f64..1.0,
        base in 1e-6f64..10.0,
    ) {
        let warmup = ((total as f64) * warmup_frac) as usize;
        for kind in [SchedulerKind::Cosine, SchedulerKind::OneCycleCosine] {
            for step in 0..=total {
                let lr = kind.lr(step, total, base, warmup);
                prop_assert!(lr >= 0.0, "{kind:?} went negative at step {step}");
                prop_assert!(
                    lr <= base * (1.0 + 1e-12),
                    "{kind:?} exceeded base at step {step}: {lr} > {base}"
                );
            }
        }
    }

    #[test]
    fn schedules_decay_monotonically_after_their_ramp(
        total in 1usize..300,
        warmup_frac in 0.0f64..1.0,
    ) {
        let warmup = ((total as f64) * warmup_frac) as usize;
        for kind in [SchedulerKind::Cosine, SchedulerKind::OneCycleCosine] {
            let mut prev = f64::INFINITY;
            for step in kind.ramp_end(total, warmup)..=total {
                let lr = kind.lr(step, total, 1.0, warmup);
                prop_assert!(lr <= prev + 1e-15, "{kind:?} rose at step {step}/{total}");
                prev = lr;
            }
        }
    }

    #[test]
    fn clipped_gradients_never_exceed_the_cap(
        grads in prop::collection::vec(-10.0f64..10.0, 1..24),
        max_norm in 0.1f64..5.0,
    ) {
        let mut store = ParamStore::new();
        let split = grads.len() / 2;
        let mut ids = Vec::new();
        for (i, chunk) in [&grads[..split], &grads[split..]].iter().enumerate() {
            if chunk.is_empty() {
                continue;
            }
            let id = store.add(
                format!("g/p{i}"),
                ParamGroup::ProjVisual,
                ArrayD::zeros(IxDyn(&[chunk.len()])),
                true,
            );
            store.get_mut(id).grad =
                ArrayD::from_shape_vec(IxDyn(&[chunk.len()]), chunk.to_vec()).unwrap();
            ids.push(id);
        }

        let expected: f64 = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
        let reported = clip_global_norm(&mut store, max_norm);
        prop_assert!((reported - expected).abs() < 1e-9);

        let after: f64 = ids
            .iter()
            .map(|&id| store.get(id).grad.iter().map(|g| g * g).sum::<f64>())
            .sum::<f64>()
            .sqrt();
        prop_assert!(after <= max_norm * (1.0 + 1e-9));

        // Direction is preserved: every entry scales by the same factor.
        let scale = if expected > max_norm { max_norm / expected } else { 1.0 };
        let mut k = 0;
        for &id in &ids {
            for g in store.get(id).grad.iter() {
                prop_assert!((g - grads[k] * scale).abs() < 1e-9);
                k += 1;
            }
        }
    }

    #[test]
    fn aggregated_means_lie_inside_the_value_range(
        values in prop::collection::vec(0.0f64..100.0, 1..8),
    ) {
        let records: Vec<RunRecord> = values
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let mut final_test = BTreeMap::new();
                final_test.insert("bleu4".to_string(), v);
                RunRecord {
                    seed: i as u64,
                    stage: Stage::Finetune,
                    epochs: vec![EpochStats {
                        train_loss: 0.0,
                        dev_loss: 0.0,
                        dev_bleu4: v,
                    }],
                    best: BestCheckpoint {
                        epoch: 1,
                        dev_bleu4: v,
                        checkpoint: "best.cpt".into(),
                    },
                    final_test,
                    transfer: None,
                }
            })
            .collect();
        let sel = select_best(&records).unwrap();
        let ms = sel.metrics["bleu4"];
        let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(ms.mean >= lo - 1e-9 && ms.mean <= hi + 1e-9);
        prop_assert!(ms.std >= 0.0);
        prop_assert_eq!(sel.single_seed, values.len() == 1);
        if values.len() == 1 {
            prop_assert_eq!(ms.std, 0.0);
        }
    }

    #[test]
    fn derived_seeds_are_pure_functions_of_their_inputs(
        seed in any::<u64>(),
        tag in "[a-z/0-9]{1,16}",
    ) {
        prop_assert_eq!(derive_seed(seed, &tag), derive_seed(seed, &tag));
        // A distinct suffix changes the stream (FNV mixes every byte).
        let other = format!("{tag}x");
        prop_assert_ne!(derive_seed(seed, &tag), derive_seed(seed, &other));
    }

    #[test]
    fn batch_rescaling_is_exactly_linear(
        reference in 1usize..256,
        new_batch in 1usize..256,
        base in 1e-6f64..1.0,
    ) {
        let mut plan = slt_core::trainer::StagePlan {
            stage: Stage::Pretrain,
            objective: slt_core::objectives::ObjectiveSpec::new(vec![(
                slt_core::objectives::LossTerm::LightTranslation,
                1.0,
            )]),
            epochs: 1,
            optimizer: slt_core::trainer::OptimizerKind::SgdMomentum,
            lr: LrSpec::split(base, base * 2.0),
            scheduler: SchedulerKind::Cosine,
            batch_size: reference,
            dropout: 0.0,
            load_groups: vec![],
            freeze_groups: vec![],
            decoder: slt_core::model::DecoderChoice::Shallow,
            grad_clip: 1.0,
            warmup_steps: 0,
            reference_batch: Some(reference),
            patience: None,
        };
        plan.rescale_batch(new_batch);
        let k = new_batch as f64 / reference as f64;
        prop_assert!((plan.lr.base - base * k).abs() <= base * k * 1e-12);
        prop_assert!((plan.lr.adapter.unwrap() - base * 2.0 * k).abs() <= base * k * 1e-11);
        prop_assert_eq!(plan.batch_size, new_batch);
    }
}
