//! Output layers: per-sentence Softmax classification with cross-entropy,
//! and the linear-chain CRF (potentials, log-partition, NLL, Viterbi).

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::optim::xavier_init;
use crate::params::{BoundParams, ParamId, Params};
use crate::rng::{name_tag, stream, StreamKind};
use serde::{Deserialize, Serialize};

/// The five speech act classes with their fixed integer codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ActTag {
    SU = 0,
    R = 1,
    Q = 2,
    P = 3,
    ST = 4,
}

pub const NUM_TAGS: usize = 5;

impl ActTag {
    pub const ALL: [ActTag; NUM_TAGS] = [ActTag::SU, ActTag::R, ActTag::Q, ActTag::P, ActTag::ST];

    pub fn code(self) -> usize {
        self as usize
    }

    pub fn from_code(code: usize) -> Option<ActTag> {
        Self::ALL.get(code).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ActTag::SU => "SU",
            ActTag::R => "R",
            ActTag::Q => "Q",
            ActTag::P => "P",
            ActTag::ST => "ST",
        }
    }

    pub fn from_str(s: &str) -> Option<ActTag> {
        Self::ALL.iter().find(|t| t.as_str() == s).copied()
    }

    pub fn description(self) -> &'static str {
        match self {
            ActTag::SU => "Suggestion",
            ActTag::R => "Response",
            ActTag::Q => "Questions",
            ActTag::P => "Polite",
            ActTag::ST => "Statement",
        }
    }
}

/// Virtual lattice states appended after the real tags.
pub fn crf_start_state(k: usize) -> usize {
    k
}
pub fn crf_stop_state(k: usize) -> usize {
    k + 1
}

// ── Softmax classifier ──────────────────────────────────────────────────

/// Independent per-sentence classifier: p(yᵢ = k | X) = softmax(wₖᵀuᵢ).
#[derive(Debug, Clone)]
pub struct SoftmaxClassifier {
    pub w: ParamId,
}

impl SoftmaxClassifier {
    pub fn new(params: &mut Params, u_dim: usize, master_seed: u64) -> Result<Self> {
        let name = "classifier.w";
        let mut rng = stream(master_seed, StreamKind::Init, &[name_tag(name)]);
        let w = params.add(name, xavier_init(&[NUM_TAGS, u_dim], &mut rng)?, true);
        Ok(SoftmaxClassifier { w })
    }

    /// Per-sentence class posteriors, one row per sentence.
    pub fn classify(&self, tape: &mut Tape, bound: &BoundParams, us: &[Var]) -> Result<Var> {
        let logits = self.logits(tape, bound, us)?;
        tape.softmax(logits)
    }

    pub fn logits(&self, tape: &mut Tape, bound: &BoundParams, us: &[Var]) -> Result<Var> {
        let w = bound.var(self.w);
        let rows: Vec<Var> = us
            .iter()
            .map(|u| tape.matvec(w, *u))
            .collect::<Result<_>>()?;
        tape.stack_rows(&rows)
    }
}

/// Sum over sentences of −log p(true class). `probs` is [n×K].
pub fn cross_entropy_loss(tape: &mut Tape, probs: Var, labels: &[usize]) -> Result<Var> {
    let n = tape.value(probs).shape[0];
    if labels.len() != n {
        return Err(Error::Data(format!(
            "{} labels for {n} sentences",
            labels.len()
        )));
    }
    let picked = tape.gather_cols(probs, labels)?;
    let lp = tape.log(picked);
    let total = tape.sum(lp);
    Ok(tape.affine(total, -1.0, 0.0))
}

// ── linear-chain CRF ────────────────────────────────────────────────────

/// CRF parameters: node weight matrix V [K×|u|] and transition matrix A
/// [(K+2)×(K+2)] with virtual START = K and STOP = K+1. Transitions into
/// START and out of STOP are never read or updated by any lattice
/// computation, which keeps them out of every path.
#[derive(Debug, Clone)]
pub struct CrfParams {
    pub node_w: ParamId,
    pub trans: ParamId,
}

impl CrfParams {
    pub fn new(params: &mut Params, u_dim: usize, master_seed: u64) -> Result<Self> {
        let name = "crf.node_w";
        let mut rng = stream(master_seed, StreamKind::Init, &[name_tag(name)]);
        let node_w = params.add(name, xavier_init(&[NUM_TAGS, u_dim], &mut rng)?, true);
        let trans = params.add(
            "crf.trans",
            Tensor::zeros(vec![NUM_TAGS + 2, NUM_TAGS + 2]),
            true,
        );
        Ok(CrfParams { node_w, trans })
    }

    /// Node scores V·uᵢ stacked into [n×K].
    pub fn node_scores(&self, tape: &mut Tape, bound: &BoundParams, us: &[Var]) -> Result<Var> {
        let v = bound.var(self.node_w);
        let rows: Vec<Var> = us
            .iter()
            .map(|u| tape.matvec(v, *u))
            .collect::<Result<_>>()?;
        tape.stack_rows(&rows)
    }

    /// Negative log-likelihood log Z − score(y); always ≥ 0.
    pub fn nll(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        node_scores: Var,
        labels: &[usize],
    ) -> Result<Var> {
        let trans = bound.var(self.trans);
        let logz = tape.crf_log_partition(node_scores, trans)?;
        let gold = tape.crf_gold_score(node_scores, trans, labels)?;
        tape.sub(logz, gold)
    }
}

/// Most probable tag sequence and its unnormalized log score, by
/// max-product dynamic programming. Ties break toward the lowest class
/// code at every backpointer decision.
pub fn viterbi_decode(node_scores: &Tensor, trans: &Tensor) -> Result<(Vec<usize>, f64)> {
    if node_scores.shape.len() != 2 || node_scores.shape[0] == 0 {
        return Err(Error::Contract(format!(
            "viterbi: node scores must be [n×K] with n ≥ 1, got {:?}",
            node_scores.shape
        )));
    }
    let (n, k) = (node_scores.shape[0], node_scores.shape[1]);
    let w = k + 2;
    if trans.shape != [w, w] {
        return Err(Error::ShapeMismatch {
            op: "viterbi",
            lhs: node_scores.shape.clone(),
            rhs: trans.shape.clone(),
        });
    }
    let (start, stop) = (crf_start_state(k), crf_stop_state(k));
    let node = &node_scores.data;
    let a = &trans.data;

    let mut delta = vec![0.0; n * k];
    let mut back = vec![0usize; n * k];
    for j in 0..k {
        delta[j] = a[start * w + j] + node[j];
    }
    for i in 1..n {
        for j in 0..k {
            let mut best = f64::NEG_INFINITY;
            let mut arg = 0;
            for p in 0..k {
                let cand = delta[(i - 1) * k + p] + a[p * w + j];
                if cand > best {
                    best = cand;
                    arg = p;
                }
            }
            delta[i * k + j] = best + node[i * k + j];
            back[i * k + j] = arg;
        }
    }
    let mut best = f64::NEG_INFINITY;
    let mut last = 0;
    for j in 0..k {
        let cand = delta[(n - 1) * k + j] + a[j * w + stop];
        if cand > best {
            best = cand;
            last = j;
        }
    }
    let mut path = vec![0usize; n];
    path[n - 1] = last;
    for i in (1..n).rev() {
        path[i - 1] = back[i * k + path[i]];
    }
    Ok((path, best))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tag_codes_are_stable() {
        for (i, t) in ActTag::ALL.iter().enumerate() {
            assert_eq!(t.code(), i);
            assert_eq!(ActTag::from_code(i), Some(*t));
            assert_eq!(ActTag::from_str(t.as_str()), Some(*t));
        }
        assert_eq!(ActTag::from_str("XX"), None);
        assert_eq!(ActTag::from_code(5), None);
    }

    #[test]
    fn viterbi_zero_transitions_is_per_position_argmax() {
        let node = Tensor::matrix(
            3,
            5,
            vec![
                0.1, 2.0, 0.3, 0.0, -1.0, //
                5.0, 0.0, 0.0, 0.0, 4.9, //
                0.0, 0.0, 0.0, 0.0, 0.1,
            ],
        )
        .unwrap();
        let trans = Tensor::zeros(vec![7, 7]);
        let (path, _) = viterbi_decode(&node, &trans).unwrap();
        assert_eq!(path, vec![1, 0, 4]);
    }

    #[test]
    fn viterbi_ties_break_to_lowest_code() {
        let node = Tensor::zeros(vec![2, 5]);
        let trans = Tensor::zeros(vec![7, 7]);
        let (path, score) = viterbi_decode(&node, &trans).unwrap();
        assert_eq!(path, vec![0, 0]);
        assert_eq!(score, 0.0);
    }
}
