//! Softmax/cross-entropy and CRF semantics against hand-derived and
//! enumeration oracles.

use sar_core::autodiff::{finite_diff_check, logsumexp, Tape, Tensor};
use sar_core::error::Error;
use sar_core::output::{cross_entropy_loss, viterbi_decode, SoftmaxClassifier, NUM_TAGS};
use sar_core::params::{BoundParams, Params};
use sar_core::rng::{stream, StreamKind};
use rand::Rng;

fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = stream(seed, StreamKind::Init, &[4]);
    let numel: usize = shape.iter().product();
    Tensor {
        shape: shape.to_vec(),
        data: (0..numel).map(|_| rng.random_range(-1.2..1.2)).collect(),
    }
}

#[test]
fn zero_weights_classify_uniformly() {
    let mut params = Params::new();
    let clf = SoftmaxClassifier::new(&mut params, 4, 1).unwrap();
    let w = params.id("classifier.w").unwrap();
    params.value_mut(w).data.iter_mut().for_each(|v| *v = 0.0);
    let mut tape = Tape::new();
    let bound = BoundParams::bind(&mut tape, &params);
    let us: Vec<_> = (0..3)
        .map(|i| tape.leaf(rand_tensor(&[4], 50 + i), false))
        .collect();
    let probs = clf.classify(&mut tape, &bound, &us).unwrap();
    for p in &tape.value(probs).data {
        assert!((p - 0.2).abs() < 1e-15);
    }
}

#[test]
fn dominating_logit_saturates() {
    let mut params = Params::new();
    let clf = SoftmaxClassifier::new(&mut params, 2, 2).unwrap();
    let w = params.id("classifier.w").unwrap();
    params.value_mut(w).data = vec![
        1e3, 0.0, // class 0 dominates on e_0
        0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0,
    ];
    let mut tape = Tape::new();
    let bound = BoundParams::bind(&mut tape, &params);
    let u = tape.leaf(Tensor::vector(vec![1.0, 0.0]), false);
    let probs = clf.classify(&mut tape, &bound, &[u]).unwrap();
    let row = &tape.value(probs).data;
    assert!((row[0] - 1.0).abs() < 1e-12);
    let sum: f64 = row.iter().sum();
    assert!((sum - 1.0).abs() < 1e-12);
}

#[test]
fn classifier_rows_normalize_on_random_inputs() {
    let mut params = Params::new();
    let clf = SoftmaxClassifier::new(&mut params, 6, 3).unwrap();
    let mut tape = Tape::new();
    let bound = BoundParams::bind(&mut tape, &params);
    let us: Vec<_> = (0..4)
        .map(|i| tape.leaf(rand_tensor(&[6], 60 + i), false))
        .collect();
    let probs = clf.classify(&mut tape, &bound, &us).unwrap();
    for row in tape.value(probs).data.chunks(NUM_TAGS) {
        let sum: f64 = row.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }
}

#[test]
fn cross_entropy_of_perfect_prediction_is_zero() {
    let mut tape = Tape::new();
    let mut probs = Tensor::zeros(vec![2, 5]);
    probs.data[0 * 5 + 3] = 1.0;
    probs.data[1 * 5 + 0] = 1.0;
    let p = tape.leaf(probs, false);
    let loss = cross_entropy_loss(&mut tape, p, &[3, 0]).unwrap();
    assert_eq!(tape.value(loss).item(), 0.0);
}

#[test]
fn cross_entropy_of_uniform_prediction_is_ln_k() {
    let mut tape = Tape::new();
    let p = tape.leaf(Tensor::new(vec![1, 5], vec![0.2; 5]).unwrap(), false);
    let loss = cross_entropy_loss(&mut tape, p, &[2]).unwrap();
    assert!((tape.value(loss).item() - 5.0f64.ln()).abs() < 1e-12);
}

#[test]
fn cross_entropy_gradient_matches_finite_differences() {
    for seed in 0..5 {
        let logits = rand_tensor(&[3, 5], 700 + seed);
        let err = finite_diff_check(
            |t, v| {
                let p = t.softmax(v)?;
                cross_entropy_loss(t, p, &[1, 4, 0])
            },
            &logits,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "seed {seed}: {err}");
    }
}

#[test]
fn cross_entropy_label_count_mismatch_is_error() {
    let mut tape = Tape::new();
    let p = tape.leaf(Tensor::new(vec![2, 5], vec![0.2; 10]).unwrap(), false);
    assert!(matches!(
        cross_entropy_loss(&mut tape, p, &[1]),
        Err(Error::Data(_))
    ));
}

#[test]
fn single_position_logz_is_logsumexp_of_node_row() {
    let node = rand_tensor(&[1, 5], 31);
    let trans = Tensor::zeros(vec![7, 7]);
    let mut tape = Tape::new();
    let nv = tape.leaf(node.clone(), false);
    let tv = tape.leaf(trans, false);
    let logz = tape.crf_log_partition(nv, tv).unwrap();
    assert!((tape.value(logz).item() - logsumexp(&node.data)).abs() < 1e-12);
}

#[test]
fn all_zero_scores_give_n_ln_k() {
    let node = Tensor::zeros(vec![3, 5]);
    let trans = Tensor::zeros(vec![7, 7]);
    let mut tape = Tape::new();
    let nv = tape.leaf(node, false);
    let tv = tape.leaf(trans, false);
    let logz = tape.crf_log_partition(nv, tv).unwrap();
    assert!((tape.value(logz).item() - 3.0 * 5.0f64.ln()).abs() < 1e-12);
}

#[test]
fn degenerate_single_class_crf_has_zero_nll() {
    // K = 1: one path through the lattice, so nll = 0 for any scores
    for seed in 0..5 {
        let node = rand_tensor(&[4, 1], 800 + seed);
        let trans = rand_tensor(&[3, 3], 900 + seed);
        let mut tape = Tape::new();
        let nv = tape.leaf(node, false);
        let tv = tape.leaf(trans, false);
        let logz = tape.crf_log_partition(nv, tv).unwrap();
        let gold = tape.crf_gold_score(nv, tv, &[0, 0, 0, 0]).unwrap();
        let nll = tape.sub(logz, gold).unwrap();
        assert!(tape.value(nll).item().abs() < 1e-12);
    }
}

#[test]
fn crf_label_out_of_range_is_data_error() {
    let mut tape = Tape::new();
    let nv = tape.leaf(Tensor::zeros(vec![2, 5]), false);
    let tv = tape.leaf(Tensor::zeros(vec![7, 7]), false);
    assert!(matches!(
        tape.crf_gold_score(nv, tv, &[0, 5]),
        Err(Error::Data(_))
    ));
}

#[test]
fn viterbi_score_never_exceeds_log_partition() {
    for seed in 0..20 {
        let node = rand_tensor(&[4, 5], 1000 + seed);
        let trans = rand_tensor(&[7, 7], 1100 + seed);
        let (_, score) = viterbi_decode(&node, &trans).unwrap();
        let mut tape = Tape::new();
        let nv = tape.leaf(node, false);
        let tv = tape.leaf(trans, false);
        let logz = tape.crf_log_partition(nv, tv).unwrap();
        assert!(score <= tape.value(logz).item() + 1e-12);
    }
}
