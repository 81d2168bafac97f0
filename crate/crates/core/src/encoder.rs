//! Sentence and conversation encoders.
//!
//! A word-level bi-LSTM composes each sentence into a vector h_i from its
//! two directional final states. The hierarchical variant runs a second
//! bi-LSTM over the sentence vectors to produce context-aware vectors u_i.
//! The flat variant (B-LSTM) uses h_i directly; the stacked variant
//! (S-LSTM) deepens the word-level encoder instead, still with no
//! cross-sentence layer.

use crate::autodiff::{Mode, Tape, Tensor, Var};
use crate::error::Result;
use crate::optim::xavier_init;
use crate::params::{BoundParams, ParamId, Params};
use crate::rng::{name_tag, stream, StreamKind};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum EncoderVariant {
    HLstm,
    BLstm,
    SLstm { depth: usize },
}

/// One LSTM cell. Gate order in the stacked weight matrices is fixed as
/// (input, forget, cell, output); the forget-gate bias slice starts at 1.0.
#[derive(Debug, Clone)]
pub struct LstmCellParams {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub bias: ParamId,
    pub input: usize,
    pub hidden: usize,
}

impl LstmCellParams {
    pub fn new(
        params: &mut Params,
        prefix: &str,
        input: usize,
        hidden: usize,
        master_seed: u64,
    ) -> Result<Self> {
        let mut init = |name: String, shape: [usize; 2]| -> Result<ParamId> {
            let mut rng = stream(master_seed, StreamKind::Init, &[name_tag(&name)]);
            Ok(params.add(&name, xavier_init(&shape, &mut rng)?, true))
        };
        let w_ih = init(format!("{prefix}.w_ih"), [4 * hidden, input])?;
        let w_hh = init(format!("{prefix}.w_hh"), [4 * hidden, hidden])?;
        let mut bias = Tensor::zeros(vec![4 * hidden]);
        for b in &mut bias.data[hidden..2 * hidden] {
            *b = 1.0;
        }
        let bias = params.add(&format!("{prefix}.bias"), bias, true);
        Ok(LstmCellParams {
            w_ih,
            w_hh,
            bias,
            input,
            hidden,
        })
    }

    /// One recurrence step: c' = f⊙c + i⊙g, h' = o⊙tanh(c').
    pub fn step(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        x: Var,
        h: Var,
        c: Var,
    ) -> Result<(Var, Var)> {
        let hd = self.hidden;
        let wx = tape.matvec(bound.var(self.w_ih), x)?;
        let wh = tape.matvec(bound.var(self.w_hh), h)?;
        let lin = tape.add(wx, wh)?;
        let gates = tape.add(lin, bound.var(self.bias))?;
        let i_gate = tape.narrow(gates, 0, hd)?;
        let f_gate = tape.narrow(gates, hd, hd)?;
        let g_gate = tape.narrow(gates, 2 * hd, hd)?;
        let o_gate = tape.narrow(gates, 3 * hd, hd)?;
        let i = tape.sigmoid(i_gate);
        let f = tape.sigmoid(f_gate);
        let g = tape.tanh(g_gate);
        let o = tape.sigmoid(o_gate);
        let fc = tape.mul(f, c)?;
        let ig = tape.mul(i, g)?;
        let c_next = tape.add(fc, ig)?;
        let tc = tape.tanh(c_next);
        let h_next = tape.mul(o, tc)?;
        Ok((h_next, c_next))
    }

    fn zero_state(&self, tape: &mut Tape) -> (Var, Var) {
        let h = tape.leaf(Tensor::zeros(vec![self.hidden]), false);
        let c = tape.leaf(Tensor::zeros(vec![self.hidden]), false);
        (h, c)
    }
}

/// A forward/backward LSTM pair over a sequence of vectors.
#[derive(Debug, Clone)]
pub struct BiLstm {
    pub fwd: LstmCellParams,
    pub bwd: LstmCellParams,
}

impl BiLstm {
    pub fn new(
        params: &mut Params,
        prefix: &str,
        input: usize,
        hidden: usize,
        master_seed: u64,
    ) -> Result<Self> {
        Ok(BiLstm {
            fwd: LstmCellParams::new(params, &format!("{prefix}.fwd"), input, hidden, master_seed)?,
            bwd: LstmCellParams::new(params, &format!("{prefix}.bwd"), input, hidden, master_seed)?,
        })
    }

    /// Per-position outputs [→z_t ; ←z_t].
    pub fn run_sequence(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        inputs: &[Var],
    ) -> Result<Vec<Var>> {
        let m = inputs.len();
        let mut fwd_states = Vec::with_capacity(m);
        let (mut h, mut c) = self.fwd.zero_state(tape);
        for x in inputs {
            let (h2, c2) = self.fwd.step(tape, bound, *x, h, c)?;
            fwd_states.push(h2);
            h = h2;
            c = c2;
        }
        let mut bwd_states = vec![inputs[0]; m];
        let (mut h, mut c) = self.bwd.zero_state(tape);
        for (t, x) in inputs.iter().enumerate().rev() {
            let (h2, c2) = self.bwd.step(tape, bound, *x, h, c)?;
            bwd_states[t] = h2;
            h = h2;
            c = c2;
        }
        fwd_states
            .into_iter()
            .zip(bwd_states)
            .map(|(f, b)| tape.concat(f, b, 0))
            .collect()
    }

    /// Final-state representation [→z_m ; ←z_m] (each direction's state
    /// after consuming its last token).
    pub fn final_concat(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        inputs: &[Var],
    ) -> Result<Var> {
        let (mut h, mut c) = self.fwd.zero_state(tape);
        for x in inputs {
            let (h2, c2) = self.fwd.step(tape, bound, *x, h, c)?;
            h = h2;
            c = c2;
        }
        let fwd_final = h;
        let (mut h, mut c) = self.bwd.zero_state(tape);
        for x in inputs.iter().rev() {
            let (h2, c2) = self.bwd.step(tape, bound, *x, h, c)?;
            h = h2;
            c = c2;
        }
        tape.concat(fwd_final, h, 0)
    }
}

/// The full encoder for one conversation chunk.
#[derive(Debug, Clone)]
pub struct Encoder {
    pub variant: EncoderVariant,
    pub word_layers: Vec<BiLstm>,
    pub conv_layer: Option<BiLstm>,
    pub word_hidden: usize,
    pub conv_hidden: usize,
    pub dropout_rate: f64,
}

impl Encoder {
    pub fn new(
        params: &mut Params,
        variant: EncoderVariant,
        embed_dim: usize,
        word_hidden: usize,
        conv_hidden: usize,
        dropout_rate: f64,
        master_seed: u64,
    ) -> Result<Self> {
        let depth = match variant {
            EncoderVariant::SLstm { depth } => {
                assert!(depth >= 2, "S-LSTM depth must be at least 2");
                depth
            }
            _ => 1,
        };
        let mut word_layers = Vec::with_capacity(depth);
        for layer in 0..depth {
            let prefix = if layer == 0 {
                "word_lstm".to_string()
            } else {
                format!("word_lstm.{layer}")
            };
            let input = if layer == 0 { embed_dim } else { 2 * word_hidden };
            word_layers.push(BiLstm::new(params, &prefix, input, word_hidden, master_seed)?);
        }
        let conv_layer = match variant {
            EncoderVariant::HLstm => Some(BiLstm::new(
                params,
                "conv_lstm",
                2 * word_hidden,
                conv_hidden,
                master_seed,
            )?),
            _ => None,
        };
        Ok(Encoder {
            variant,
            word_layers,
            conv_layer,
            word_hidden,
            conv_hidden,
            dropout_rate,
        })
    }

    /// Dimensionality of the u_i vectors this encoder produces.
    pub fn u_dim(&self) -> usize {
        match self.variant {
            EncoderVariant::HLstm => 2 * self.conv_hidden,
            _ => 2 * self.word_hidden,
        }
    }

    /// Sentence vector h_i from the word-level layer(s). `words` is the
    /// [m×D] matrix of the sentence's word vectors.
    pub fn encode_sentence(&self, tape: &mut Tape, bound: &BoundParams, words: Var) -> Result<Var> {
        let m = tape.value(words).shape[0];
        assert!(m >= 1, "empty sentence reached the encoder");
        let mut seq: Vec<Var> = (0..m).map(|t| tape.row(words, t)).collect::<Result<_>>()?;
        let last = self.word_layers.len() - 1;
        for layer in &self.word_layers[..last] {
            seq = layer.run_sequence(tape, bound, &seq)?;
        }
        self.word_layers[last].final_concat(tape, bound, &seq)
    }

    /// Context-aware vectors u_i from the sentence vectors, in order.
    /// H-LSTM applies dropout to each h_i and runs the conversation-level
    /// bi-LSTM; the other variants pass the sentence vectors through.
    pub fn encode_conversation(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        sentence_vecs: &[Var],
        mode: Mode,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<Var>> {
        assert!(!sentence_vecs.is_empty(), "empty conversation reached the encoder");
        match &self.conv_layer {
            Some(layer) => {
                let dropped: Vec<Var> = sentence_vecs
                    .iter()
                    .map(|h| tape.dropout(*h, self.dropout_rate, mode, rng))
                    .collect::<Result<_>>()?;
                layer.run_sequence(tape, bound, &dropped)
            }
            None => Ok(sentence_vecs.to_vec()),
        }
    }
}
