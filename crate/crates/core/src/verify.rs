//! Verification suites backed by independent oracles: central finite
//! differences for every gradient path, exhaustive enumeration for the CRF
//! lattice, and closed forms for the schedules. None of these reuse the
//! code paths they check.

use crate::adversary::{domain_bce_loss, lambda_schedule, Discriminator};
use crate::autodiff::{finite_diff_check, logsumexp, Mode, Tape, Tensor, Var};
use crate::corpus::DomainLabel;
use crate::embed::Vocabulary;
use crate::encoder::EncoderVariant;
use crate::error::Result;
use crate::model::{IndexedChunk, ModelConfig, OutputKind, SpeechActModel};
use crate::optim::dynamic_lr;
use crate::output::NUM_TAGS;
use crate::params::{BoundParams, ParamId};
use crate::rng::{stream, StreamKind};
use rand::Rng;

pub const GRAD_TOL: f64 = 1e-4;
pub const GRAD_EPS: f64 = 1e-5;
pub const GRAD_SEEDS: u64 = 5;

#[derive(Debug, Clone)]
pub struct CheckCase {
    pub name: String,
    pub observed: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl CheckCase {
    fn bounded(name: impl Into<String>, observed: f64, tolerance: f64) -> Self {
        let pass = observed.is_finite() && observed < tolerance;
        CheckCase {
            name: name.into(),
            observed,
            tolerance,
            pass,
        }
    }

    fn flag(name: impl Into<String>, pass: bool) -> Self {
        CheckCase {
            name: name.into(),
            observed: if pass { 0.0 } else { 1.0 },
            tolerance: 1.0,
            pass,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SuiteReport {
    pub name: &'static str,
    pub cases: Vec<CheckCase>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.cases.iter().all(|c| c.pass)
    }

    pub fn first_failure(&self) -> Option<&CheckCase> {
        self.cases.iter().find(|c| !c.pass)
    }

    pub fn render(&self) -> String {
        let mut out = format!(
            "suite {}: {}\n",
            self.name,
            if self.passed() { "PASS" } else { "FAIL" }
        );
        let worst = self
            .cases
            .iter()
            .filter(|c| c.tolerance < 1.0)
            .max_by(|a, b| {
                (a.observed / a.tolerance)
                    .partial_cmp(&(b.observed / b.tolerance))
                    .unwrap()
            });
        if let Some(w) = worst {
            out.push_str(&format!(
                "  worst: {} observed {:.3e} vs tolerance {:.1e}\n",
                w.name, w.observed, w.tolerance
            ));
        }
        for c in self.cases.iter().filter(|c| !c.pass) {
            out.push_str(&format!(
                "  FAIL {} observed {:.6e} tolerance {:.1e}\n",
                c.name, c.observed, c.tolerance
            ));
        }
        out
    }
}

fn rand_tensor(shape: &[usize], seed: u64, salt: u64) -> Tensor {
    let mut rng = stream(seed, StreamKind::Init, &[salt]);
    let numel: usize = shape.iter().product();
    Tensor {
        shape: shape.to_vec(),
        data: (0..numel).map(|_| rng.random_range(-1.0..1.0)).collect(),
    }
}

// ── gradient suite ──────────────────────────────────────────────────────

/// A toy model small enough that every-coordinate finite differences stay
/// fast: vocab of 10, D = 5, hidden 4/3.
fn toy_model(output: OutputKind, with_disc: bool, seed: u64) -> Result<SpeechActModel> {
    let tokens: Vec<String> = crate::corpus::RESERVED
        .iter()
        .map(|s| (*s).to_string())
        .chain((0..6).map(|i| format!("tok{i}")))
        .collect();
    let vocab = Vocabulary::from_tokens(tokens)?;
    let config = ModelConfig {
        embed_dim: 5,
        word_hidden: 4,
        conv_hidden: 3,
        disc_hidden: 3,
        variant: EncoderVariant::HLstm,
        output,
        dropout_rate: 0.0,
        freeze_embeddings: false,
        with_discriminator: with_disc,
        max_chunk_len: 100,
    };
    Ok(SpeechActModel::new(config, vocab, seed, None)?.0)
}

fn toy_chunk(seed: u64) -> IndexedChunk {
    let mut rng = stream(seed, StreamKind::Synth, &[1]);
    let n = rng.random_range(2..=3);
    let sentences: Vec<Vec<usize>> = (0..n)
        .map(|_| {
            let m = rng.random_range(1..=4);
            (0..m).map(|_| rng.random_range(4..10)).collect()
        })
        .collect();
    let labels = (0..n)
        .map(|_| Some(rng.random_range(0..NUM_TAGS)))
        .collect();
    IndexedChunk {
        id: "toy".into(),
        domain: DomainLabel::Source,
        sentences,
        labels,
    }
}

/// Max finite-difference error over every parameter of the full model loss.
fn model_loss_grad_err(model: &SpeechActModel, chunk: &IndexedChunk) -> Result<f64> {
    let labels = chunk.labels_strict()?;
    let mut worst = 0.0f64;
    for i in 0..model.params.len() {
        let id = ParamId(i);
        let x = model.params.value(id).clone();
        let err = finite_diff_check(
            |tape, var| {
                let bound = BoundParams::bind_with_override(tape, &model.params, id, var);
                let mut rng = stream(0, StreamKind::Dropout, &[]);
                let us = model.encode_chunk(tape, &bound, chunk, Mode::Eval, &mut rng)?;
                model.chunk_class_loss(tape, &bound, &us, &labels)
            },
            &x,
            GRAD_EPS,
        )?;
        worst = worst.max(err);
    }
    Ok(worst)
}

/// Gradient checks for every differentiable operation and the full model
/// losses, ≥ GRAD_SEEDS seeds each.
pub fn grad_suite() -> Result<SuiteReport> {
    let mut cases = Vec::new();

    type Builder = fn(&mut Tape, Var) -> Result<Var>;
    let ops: Vec<(&str, &[usize], Builder)> = vec![
        ("sigmoid", &[5], |t, v| {
            let s = t.sigmoid(v);
            Ok(t.sum(s))
        }),
        ("tanh", &[5], |t, v| {
            let s = t.tanh(v);
            Ok(t.sum(s))
        }),
        ("relu", &[5], |t, v| {
            let s = t.relu(v);
            let sq = t.mul(s, s)?;
            Ok(t.sum(sq))
        }),
        ("softmax+log", &[6], |t, v| {
            let p = t.softmax(v)?;
            let lp = t.log(p);
            let w = t.leaf(Tensor::vector(vec![1.0, -0.5, 0.25, 2.0, -1.0, 0.1]), false);
            let m = t.mul(lp, w)?;
            Ok(t.sum(m))
        }),
        ("matmul", &[3, 4], |t, v| {
            let b = t.leaf(rand_tensor(&[4, 2], 12345, 0), false);
            let c = t.matmul(v, b)?;
            let s = t.tanh(c);
            Ok(t.sum(s))
        }),
        ("matvec", &[4], |t, v| {
            let m = t.leaf(rand_tensor(&[3, 4], 12346, 0), false);
            let mv = t.matvec(m, v)?;
            let s = t.sigmoid(mv);
            Ok(t.sum(s))
        }),
        ("concat+narrow", &[6], |t, v| {
            let a = t.narrow(v, 0, 3)?;
            let b = t.narrow(v, 3, 3)?;
            let c = t.concat(b, a, 0)?;
            let s = t.tanh(c);
            Ok(t.sum(s))
        }),
        ("row+stack+dot", &[3, 3], |t, v| {
            let r0 = t.row(v, 0)?;
            let r2 = t.row(v, 2)?;
            let d = t.dot(r0, r2)?;
            let st = t.stack_rows(&[r0, r2])?;
            let sm = t.softmax(st)?;
            let lg = t.log(sm);
            let s = t.sum(lg);
            t.add(d, s)
        }),
        ("lookup", &[6, 3], |t, v| {
            let rows = t.lookup(v, &[1, 5, 5, 0])?;
            let s = t.tanh(rows);
            Ok(t.sum(s))
        }),
        ("gather_cols", &[3, 4], |t, v| {
            let g = t.gather_cols(v, &[2, 0, 3])?;
            let s = t.sigmoid(g);
            Ok(t.sum(s))
        }),
        ("dropout_fixed_mask", &[8], |t, v| {
            let mut rng = stream(4242, StreamKind::Dropout, &[0]);
            let d = t.dropout(v, 0.5, Mode::Train, &mut rng)?;
            let s = t.sigmoid(d);
            Ok(t.sum(s))
        }),
        ("clamp", &[5], |t, v| {
            let c = t.clamp(v, -0.5, 0.5);
            let s = t.mul(c, c)?;
            Ok(t.sum(s))
        }),
        ("crf_ops", &[3, 5], |t, v| {
            let trans = t.leaf(rand_tensor(&[7, 7], 12347, 0), true);
            let logz = t.crf_log_partition(v, trans)?;
            let gold = t.crf_gold_score(v, trans, &[1, 0, 4])?;
            t.sub(logz, gold)
        }),
        ("crf_trans_grad", &[7, 7], |t, v| {
            let node = t.leaf(rand_tensor(&[3, 5], 12348, 0), true);
            let logz = t.crf_log_partition(node, v)?;
            let gold = t.crf_gold_score(node, v, &[2, 2, 3])?;
            t.sub(logz, gold)
        }),
    ];
    for (name, shape, f) in ops {
        let mut worst = 0.0f64;
        for seed in 0..GRAD_SEEDS {
            let x = rand_tensor(shape, 1000 + seed, seed);
            worst = worst.max(finite_diff_check(f, &x, GRAD_EPS)?);
        }
        cases.push(CheckCase::bounded(format!("op {name}"), worst, GRAD_TOL));
    }

    // 3-step LSTM unroll against finite differences, per parameter
    for seed in 0..GRAD_SEEDS {
        let mut params = crate::params::Params::new();
        let cell = crate::encoder::LstmCellParams::new(&mut params, "cell", 3, 2, 90 + seed)?;
        let inputs: Vec<Tensor> = (0..3).map(|t| rand_tensor(&[3], 70 + seed, t)).collect();
        let mut worst = 0.0f64;
        for i in 0..params.len() {
            let id = ParamId(i);
            let x = params.value(id).clone();
            let err = finite_diff_check(
                |tape, var| {
                    let bound = BoundParams::bind_with_override(tape, &params, id, var);
                    let (mut h, mut c) = (
                        tape.leaf(Tensor::zeros(vec![2]), false),
                        tape.leaf(Tensor::zeros(vec![2]), false),
                    );
                    for input in &inputs {
                        let x_t = tape.leaf(input.clone(), false);
                        let (h2, c2) = cell.step(tape, &bound, x_t, h, c)?;
                        h = h2;
                        c = c2;
                    }
                    let s = tape.tanh(h);
                    Ok(tape.sum(s))
                },
                &x,
                GRAD_EPS,
            )?;
            worst = worst.max(err);
        }
        cases.push(CheckCase::bounded(
            format!("lstm_cell 3-step unroll seed {seed}"),
            worst,
            GRAD_TOL,
        ));
    }

    // full model losses
    for seed in 0..GRAD_SEEDS {
        let model = toy_model(OutputKind::Softmax, false, 500 + seed)?;
        let chunk = toy_chunk(600 + seed);
        cases.push(CheckCase::bounded(
            format!("h-lstm loss seed {seed}"),
            model_loss_grad_err(&model, &chunk)?,
            GRAD_TOL,
        ));
    }
    for seed in 0..GRAD_SEEDS {
        let model = toy_model(OutputKind::Crf, false, 700 + seed)?;
        let chunk = toy_chunk(800 + seed);
        cases.push(CheckCase::bounded(
            format!("h-lstm-crf loss seed {seed}"),
            model_loss_grad_err(&model, &chunk)?,
            GRAD_TOL,
        ));
    }

    // discriminator BCE through gradient reversal: the analytic gradient
    // equals −λ times the numeric gradient of the non-reversed path
    for seed in 0..GRAD_SEEDS {
        let lambda = 0.3 + 0.15 * seed as f64;
        let mut params = crate::params::Params::new();
        let disc = Discriminator::new(&mut params, 4, 3, 40 + seed)?;
        let u = rand_tensor(&[4], 50 + seed, 3);

        let mut tape = Tape::new();
        let uv = tape.leaf(u.clone(), true);
        let bound = BoundParams::bind(&mut tape, &params);
        let rev = tape.grad_reverse(uv, lambda);
        let d_hat = disc.discriminate(&mut tape, &bound, rev)?;
        let loss = domain_bce_loss(&mut tape, d_hat, DomainLabel::Source)?;
        tape.backward(loss)?;
        let analytic = tape.grad(uv).unwrap().to_vec();

        // numeric gradient of the same loss without reversal
        let eval = |t: &Tensor| -> Result<f64> {
            let mut tape = Tape::new();
            let uv = tape.leaf(t.clone(), false);
            let bound = BoundParams::bind(&mut tape, &params);
            let d_hat = disc.discriminate(&mut tape, &bound, uv)?;
            let loss = domain_bce_loss(&mut tape, d_hat, DomainLabel::Source)?;
            Ok(tape.value(loss).item())
        };
        let mut worst = 0.0f64;
        for i in 0..u.numel() {
            let mut plus = u.clone();
            plus.data[i] += GRAD_EPS;
            let mut minus = u.clone();
            minus.data[i] -= GRAD_EPS;
            let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * GRAD_EPS);
            let want = -lambda * numeric;
            let got = analytic[i];
            let rel = (got - want).abs() / 1.0f64.max(got.abs()).max(want.abs());
            worst = worst.max(rel);
        }
        cases.push(CheckCase::bounded(
            format!("bce through grad_reverse λ={lambda} seed {seed}"),
            worst,
            GRAD_TOL,
        ));
    }

    Ok(SuiteReport {
        name: "grad",
        cases,
    })
}

// ── CRF enumeration suite ───────────────────────────────────────────────

/// Explicit path score straight from the definition (independent of the
/// tape's CRF ops).
fn path_score(node: &Tensor, trans: &Tensor, labels: &[usize]) -> f64 {
    let k = node.shape[1];
    let w = k + 2;
    let (start, stop) = (k, k + 1);
    let n = labels.len();
    let mut score = trans.data[start * w + labels[0]];
    for (i, &y) in labels.iter().enumerate() {
        score += node.data[i * k + y];
        if i + 1 < n {
            score += trans.data[y * w + labels[i + 1]];
        }
    }
    score + trans.data[labels[n - 1] * w + stop]
}

/// All K^n label sequences in lexicographic order.
fn all_sequences(n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::with_capacity(k.pow(n as u32));
    let mut cur = vec![0usize; n];
    loop {
        out.push(cur.clone());
        let mut pos = n;
        while pos > 0 {
            pos -= 1;
            cur[pos] += 1;
            if cur[pos] < k {
                break;
            }
            cur[pos] = 0;
            if pos == 0 {
                return out;
            }
        }
    }
}

fn random_crf_instance(n: usize, seed: u64) -> (Tensor, Tensor) {
    let node = rand_tensor(&[n, NUM_TAGS], seed, 21);
    let mut trans = rand_tensor(&[NUM_TAGS + 2, NUM_TAGS + 2], seed, 22);
    // forbidden entries stay untouched by the lattice; zero them for clarity
    let w = NUM_TAGS + 2;
    for i in 0..w {
        trans.data[i * w + NUM_TAGS] = 0.0; // into START
        trans.data[(NUM_TAGS + 1) * w + i] = 0.0; // out of STOP
    }
    (node, trans)
}

/// 100 random instances vs exhaustive enumeration: log-partition,
/// Viterbi, normalization, and the zero-transition factorization.
pub fn crf_suite() -> Result<SuiteReport> {
    let mut cases = Vec::new();

    let mut worst_logz = 0.0f64;
    let mut worst_logz_case = String::new();
    let mut viterbi_mismatches = 0usize;
    let mut first_viterbi_fail = String::new();
    let mut worst_score_diff = 0.0f64;
    let mut viterbi_bound_ok = true;

    for trial in 0..100u64 {
        let n = 1 + (trial % 6) as usize;
        let (node, trans) = random_crf_instance(n, 3000 + trial);

        let mut tape = Tape::new();
        let nv = tape.leaf(node.clone(), false);
        let tv = tape.leaf(trans.clone(), false);
        let logz_var = tape.crf_log_partition(nv, tv)?;
        let logz = tape.value(logz_var).item();

        let seqs = all_sequences(n, NUM_TAGS);
        let scores: Vec<f64> = seqs.iter().map(|y| path_score(&node, &trans, y)).collect();
        let ref_logz = logsumexp(&scores);
        let diff = (logz - ref_logz).abs();
        if diff > worst_logz {
            worst_logz = diff;
            worst_logz_case = format!("n={n} trial={trial}");
        }

        let (path, vscore) = crate::output::viterbi_decode(&node, &trans)?;
        let (best_idx, best_score) = scores
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(i, s)| (i, *s))
            .unwrap();
        if path != seqs[best_idx] && first_viterbi_fail.is_empty() {
            viterbi_mismatches += 1;
            first_viterbi_fail = format!("n={n} trial={trial}");
        }
        worst_score_diff = worst_score_diff.max((vscore - best_score).abs());
        if vscore > logz + 1e-9 {
            viterbi_bound_ok = false;
        }
    }
    cases.push(CheckCase::bounded(
        format!("log-partition vs enumeration ({worst_logz_case})"),
        worst_logz,
        1e-8,
    ));
    cases.push(CheckCase::flag(
        format!("viterbi matches brute force ({first_viterbi_fail})"),
        viterbi_mismatches == 0,
    ));
    cases.push(CheckCase::bounded(
        "viterbi score vs brute force",
        worst_score_diff,
        1e-10,
    ));
    cases.push(CheckCase::flag("viterbi score ≤ log Z", viterbi_bound_ok));

    // exp(−nll) sums to 1 over all sequences, n ≤ 4
    let mut worst_norm = 0.0f64;
    let mut worst_norm_case = String::new();
    let mut nll_nonneg = true;
    for trial in 0..20u64 {
        let n = 1 + (trial % 4) as usize;
        let (node, trans) = random_crf_instance(n, 4000 + trial);
        let mut total = 0.0;
        for y in all_sequences(n, NUM_TAGS) {
            let mut tape = Tape::new();
            let nv = tape.leaf(node.clone(), false);
            let tv = tape.leaf(trans.clone(), false);
            let logz = tape.crf_log_partition(nv, tv)?;
            let gold = tape.crf_gold_score(nv, tv, &y)?;
            let nll_var = tape.sub(logz, gold)?;
            let nll = tape.value(nll_var).item();
            if nll < -1e-12 {
                nll_nonneg = false;
            }
            total += (-nll).exp();
        }
        let diff = (total - 1.0).abs();
        if diff > worst_norm {
            worst_norm = diff;
            worst_norm_case = format!("n={n} trial={trial}");
        }
    }
    cases.push(CheckCase::bounded(
        format!("Σ exp(−nll) = 1 ({worst_norm_case})"),
        worst_norm,
        1e-8,
    ));
    cases.push(CheckCase::flag("nll ≥ 0 over all sequences", nll_nonneg));

    // zero transitions factorize into independent softmax cross-entropy
    let mut worst_factor = 0.0f64;
    for trial in 0..20u64 {
        let n = 1 + (trial % 4) as usize;
        let node = rand_tensor(&[n, NUM_TAGS], 5000 + trial, 23);
        let trans = Tensor::zeros(vec![NUM_TAGS + 2, NUM_TAGS + 2]);
        let mut rng = stream(6000 + trial, StreamKind::Synth, &[0]);
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..NUM_TAGS)).collect();

        let mut tape = Tape::new();
        let nv = tape.leaf(node.clone(), false);
        let tv = tape.leaf(trans.clone(), false);
        let logz = tape.crf_log_partition(nv, tv)?;
        let gold = tape.crf_gold_score(nv, tv, &labels)?;
        let nll_var = tape.sub(logz, gold)?;
        let nll = tape.value(nll_var).item();

        let probs = tape.softmax(nv)?;
        let ce = crate::output::cross_entropy_loss(&mut tape, probs, &labels)?;
        let ce_val = tape.value(ce).item();
        worst_factor = worst_factor.max((nll - ce_val).abs());
    }
    cases.push(CheckCase::bounded(
        "zero-transition CRF = softmax cross-entropy",
        worst_factor,
        1e-9,
    ));

    // Viterbi argmax is invariant to adding a constant everywhere
    let mut shift_ok = true;
    for trial in 0..20u64 {
        let n = 1 + (trial % 6) as usize;
        let (node, trans) = random_crf_instance(n, 7000 + trial);
        let (path, _) = crate::output::viterbi_decode(&node, &trans)?;
        let c = 3.7;
        let mut node2 = node.clone();
        node2.data.iter_mut().for_each(|v| *v += c);
        let mut trans2 = trans.clone();
        trans2.data.iter_mut().for_each(|v| *v += c);
        let (path2, _) = crate::output::viterbi_decode(&node2, &trans2)?;
        if path != path2 {
            shift_ok = false;
        }
    }
    cases.push(CheckCase::flag("viterbi invariant under constant shift", shift_ok));

    Ok(SuiteReport {
        name: "crf",
        cases,
    })
}

// ── schedule suite ──────────────────────────────────────────────────────

/// λ and learning-rate schedule checks against closed forms
/// (independent route: 2/(1+e^(−10p)) − 1 = tanh(5p)).
pub fn schedule_suite() -> SuiteReport {
    let mut cases = Vec::new();
    cases.push(CheckCase::flag("λ(0) = 0 exactly", lambda_schedule(0.0) == 0.0));
    cases.push(CheckCase::bounded(
        "λ(1) vs closed form",
        (lambda_schedule(1.0) - 5.0f64.tanh()).abs(),
        1e-12,
    ));
    cases.push(CheckCase::bounded(
        "λ(0.5) vs closed form",
        (lambda_schedule(0.5) - 2.5f64.tanh()).abs(),
        1e-12,
    ));
    cases.push(CheckCase::bounded(
        "λ(1) ≈ 0.999909",
        (lambda_schedule(1.0) - 0.999909).abs(),
        1e-6,
    ));
    let mut increasing = true;
    let mut prev = -1.0;
    for i in 0..=1000 {
        let l = lambda_schedule(i as f64 / 1000.0);
        if l <= prev {
            increasing = false;
        }
        prev = l;
    }
    cases.push(CheckCase::flag("λ strictly increasing on [0,1]", increasing));

    cases.push(CheckCase::flag(
        "lr(0) = lr0",
        dynamic_lr(0.0, 0.01, 10.0, 0.75) == 0.01,
    ));
    cases.push(CheckCase::bounded(
        "lr(1) vs closed form",
        (dynamic_lr(1.0, 0.01, 10.0, 0.75) - 0.01 / 11.0f64.powf(0.75)).abs(),
        1e-15,
    ));
    let mut decreasing = true;
    let mut prev = f64::INFINITY;
    for i in 0..=1000 {
        let lr = dynamic_lr(i as f64 / 1000.0, 0.01, 10.0, 0.75);
        if lr >= prev {
            decreasing = false;
        }
        prev = lr;
    }
    cases.push(CheckCase::flag("lr strictly decreasing on [0,1]", decreasing));

    SuiteReport {
        name: "schedule",
        cases,
    }
}
