//! Training-loop behavior: determinism, regime reductions, bookkeeping,
//! and overfit capability on a small synthetic corpus.

use sar_core::checkpoint::tensor_bits;
use sar_core::corpus::Conversation;
use sar_core::encoder::EncoderVariant;
use sar_core::model::OutputKind;
use sar_core::synth::{synth_generate, SynthProfile};
use sar_core::train::{train, OptimizerKind, Pools, Regime, TrainConfig};

fn small_config(regime: Regime, seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig::defaults_for(regime, seed);
    cfg.embed_dim = 8;
    cfg.word_hidden = 6;
    cfg.conv_hidden = 6;
    cfg.disc_hidden = 6;
    cfg.epochs = 3;
    cfg.batch_size = 4;
    cfg.dropout_rate = 0.2;
    cfg
}

fn synth_pools(n_source: usize, n_target: usize, seed: u64) -> (Vec<Conversation>, Vec<Conversation>) {
    let profile = SynthProfile::ta_like(0.4);
    let (source, target) = synth_generate(&profile, n_source.max(n_target) + 4, seed).unwrap();
    (
        source[..n_source].to_vec(),
        target[..n_target].to_vec(),
    )
}

fn strip(convs: &[Conversation]) -> Vec<Conversation> {
    convs
        .iter()
        .map(|c| {
            let mut c = c.clone();
            for comment in &mut c.comments {
                for s in &mut comment.sentences {
                    s.act = None;
                }
            }
            c
        })
        .collect()
}

#[test]
fn history_length_and_best_checkpoint_bookkeeping() {
    let (source, target) = synth_pools(8, 4, 1);
    let pools = Pools {
        source,
        dev: target[..2].to_vec(),
        ..Default::default()
    };
    let cfg = small_config(Regime::Indomain, 5);
    let out = train(&cfg, &pools).unwrap();
    assert_eq!(out.history.len(), cfg.epochs);
    let max_f1 = out
        .history
        .iter()
        .map(|h| h.dev_macro_f1)
        .fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(out.best_dev_f1, max_f1);
    let first_best = out
        .history
        .iter()
        .find(|h| h.dev_macro_f1 == max_f1)
        .unwrap();
    assert_eq!(out.best_epoch, first_best.epoch, "ties must go to the earlier epoch");
}

#[test]
fn fixed_seed_reruns_are_bit_identical() {
    let (source, target) = synth_pools(8, 4, 2);
    let pools = Pools {
        source,
        dev: target[..2].to_vec(),
        ..Default::default()
    };
    let cfg = small_config(Regime::Indomain, 9);
    let a = train(&cfg, &pools).unwrap();
    let b = train(&cfg, &pools).unwrap();
    assert_eq!(tensor_bits(&a.model.params), tensor_bits(&b.model.params));
    assert_eq!(a.history, b.history);
}

#[test]
fn different_seeds_differ() {
    let (source, target) = synth_pools(8, 4, 3);
    let pools = Pools {
        source,
        dev: target[..2].to_vec(),
        ..Default::default()
    };
    let a = train(&small_config(Regime::Indomain, 1), &pools).unwrap();
    let b = train(&small_config(Regime::Indomain, 2), &pools).unwrap();
    assert_ne!(tensor_bits(&a.model.params), tensor_bits(&b.model.params));
}

#[test]
fn lambda_zero_adaptation_is_step_identical_to_transfer() {
    let (source, target) = synth_pools(10, 6, 4);
    let dev = target[..2].to_vec();
    let target_unlabeled = strip(&target[2..]);

    // adversarial run with λ pinned to 0, batch 4 (2 source + 2 target)
    let mut unsup_cfg = small_config(Regime::AdaptUnsup, 77);
    unsup_cfg.epochs = 5;
    unsup_cfg.lambda_override = Some(0.0);
    unsup_cfg.dropout_rate = 0.3;
    let unsup_pools = Pools {
        source: source.clone(),
        target_unlabeled: target_unlabeled.clone(),
        dev: dev.clone(),
        ..Default::default()
    };
    let unsup = train(&unsup_cfg, &unsup_pools).unwrap();

    // plain source-only training with the same optimizer, batch 2 so each
    // step consumes the same source conversations
    let mut transfer_cfg = small_config(Regime::Transfer, 77);
    transfer_cfg.epochs = 5;
    transfer_cfg.batch_size = 2;
    transfer_cfg.optimizer = Some(OptimizerKind::Sgd);
    transfer_cfg.dropout_rate = 0.3;
    let transfer_pools = Pools {
        source,
        target_unlabeled, // shares the vocabulary; never sampled
        dev,
        ..Default::default()
    };
    let transfer = train(&transfer_cfg, &transfer_pools).unwrap();

    // every parameter the two models share must match to the last bit
    let mut compared = 0;
    for entry in transfer.model.params.entries() {
        let other = unsup
            .model
            .params
            .id(&entry.name)
            .expect("shared parameter missing from adapted model");
        let got = unsup.model.params.value(other);
        assert_eq!(entry.value.shape, got.shape);
        let max_diff = entry
            .value
            .data
            .iter()
            .zip(&got.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(
            max_diff < 1e-12,
            "parameter {} diverged by {max_diff}",
            entry.name
        );
        compared += 1;
    }
    assert!(compared > 5);
    // and the discriminator stayed at its initialization
    let (fresh, _) = sar_core::model::SpeechActModel::new(
        unsup_cfg.model_config(),
        unsup.model.vocab.clone(),
        77,
        None,
    )
    .unwrap();
    for name in ["disc.hidden_w", "disc.hidden_b", "disc.out_w", "disc.out_b"] {
        let id = unsup.model.params.id(name).unwrap();
        let fid = fresh.params.id(name).unwrap();
        assert_eq!(
            unsup.model.params.value(id).data,
            fresh.params.value(fid).data,
            "{name} moved under λ = 0"
        );
    }
}

#[test]
fn adapt_unsup_rejects_target_labels_and_merge_requires_both_pools() {
    let (source, target) = synth_pools(6, 4, 5);
    let bad = Pools {
        source: source.clone(),
        target_labeled: target.clone(),
        target_unlabeled: strip(&target),
        dev: target[..1].to_vec(),
        ..Default::default()
    };
    assert!(train(&small_config(Regime::AdaptUnsup, 1), &bad).is_err());

    let merge_missing = Pools {
        source,
        dev: target[..1].to_vec(),
        ..Default::default()
    };
    assert!(train(&small_config(Regime::Merge, 1), &merge_missing).is_err());
}

#[test]
fn adapt_batch_size_validation() {
    let mut cfg = small_config(Regime::AdaptUnsup, 1);
    cfg.batch_size = 3;
    assert!(cfg.validate().is_err());
    let mut cfg = small_config(Regime::AdaptSemisup, 1);
    cfg.batch_size = 6;
    assert!(cfg.validate().is_err());
    cfg.batch_size = 8;
    assert!(cfg.validate().is_ok());
}

#[test]
fn semisup_runs_with_and_without_unlabeled_pool() {
    let (source, target) = synth_pools(8, 6, 6);
    let mut cfg = small_config(Regime::AdaptSemisup, 3);
    cfg.batch_size = 4;
    cfg.target_label_fraction = 0.5;
    cfg.epochs = 2;
    // fraction 0.5 moves the unselected half into the unlabeled pool
    let pools = Pools {
        source: source.clone(),
        target_labeled: target[..4].to_vec(),
        dev: target[4..].to_vec(),
        ..Default::default()
    };
    let out = train(&cfg, &pools).unwrap();
    assert!(out.history.iter().all(|h| h.train_loss_d.is_some()));

    // supervised variant: no unlabeled pool at all, quota refilled from labeled
    let mut sup_cfg = small_config(Regime::AdaptSup, 3);
    sup_cfg.batch_size = 4;
    sup_cfg.epochs = 2;
    let out = train(&sup_cfg, &pools).unwrap();
    assert_eq!(out.history.len(), 2);
}

#[test]
fn finetune_runs_both_phases_with_patience() {
    let (source, target) = synth_pools(8, 6, 7);
    let mut cfg = small_config(Regime::Finetune, 4);
    cfg.epochs = 3;
    cfg.patience = 2;
    let pools = Pools {
        source: source[..6].to_vec(),
        source_dev: source[6..].to_vec(),
        target_labeled: target[..4].to_vec(),
        dev: target[4..].to_vec(),
        ..Default::default()
    };
    let out = train(&cfg, &pools).unwrap();
    // phase 1 runs between `patience` and `epochs` epochs, phase 2 exactly `epochs`
    assert!(out.history.len() >= cfg.epochs + cfg.patience);
    assert!(out.history.len() <= 2 * cfg.epochs);
}

#[test]
fn adversarial_history_records_lambda_curve() {
    let (source, target) = synth_pools(8, 6, 8);
    let mut cfg = small_config(Regime::AdaptUnsup, 6);
    cfg.epochs = 4;
    let pools = Pools {
        source,
        target_unlabeled: strip(&target[..4]),
        dev: target[4..].to_vec(),
        ..Default::default()
    };
    let out = train(&cfg, &pools).unwrap();
    let lambdas: Vec<f64> = out.history.iter().map(|h| h.lambda.unwrap()).collect();
    for w in lambdas.windows(2) {
        assert!(w[1] > w[0], "λ curve not increasing: {lambdas:?}");
    }
    // SGD with the dynamic schedule: lr decreases across epochs
    let lrs: Vec<f64> = out.history.iter().map(|h| h.lr).collect();
    for w in lrs.windows(2) {
        assert!(w[1] < w[0], "lr not decreasing: {lrs:?}");
    }
}

#[test]
fn overfits_a_tiny_corpus() {
    // capacity smoke test at small dimensions; the acceptance suite runs
    // the full-size version
    let (source, _) = synth_pools(6, 2, 9);
    let mut cfg = small_config(Regime::Indomain, 11);
    cfg.epochs = 200;
    cfg.dropout_rate = 0.0;
    cfg.embed_dim = 12;
    cfg.word_hidden = 10;
    cfg.conv_hidden = 10;
    let pools = Pools {
        source: source.clone(),
        dev: source.clone(),
        ..Default::default()
    };
    let out = train(&cfg, &pools).unwrap();
    let train_chunks = sar_core::model::prepare_chunks(&source, &out.model.vocab, 100);
    let (report, _) = sar_core::train::evaluate_chunks(&out.model, &train_chunks).unwrap();
    assert!(
        report.accuracy >= 0.95,
        "expected near-perfect training accuracy, got {}",
        report.accuracy
    );
}

#[test]
fn crf_head_trains_too() {
    let (source, target) = synth_pools(6, 2, 10);
    let mut cfg = small_config(Regime::Indomain, 12);
    cfg.output = OutputKind::Crf;
    cfg.variant = EncoderVariant::HLstm;
    cfg.epochs = 2;
    let pools = Pools {
        source,
        dev: target,
        ..Default::default()
    };
    let out = train(&cfg, &pools).unwrap();
    assert!(out.history.iter().all(|h| h.train_loss_c.is_finite()));
}
