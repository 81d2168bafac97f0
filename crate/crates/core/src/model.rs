//! The full tagging model: embedding table, encoder, output layer and the
//! optional domain discriminator, assembled over one parameter store.

use crate::adversary::{domain_bce_loss, Discriminator};
use crate::autodiff::{Mode, Tape, Var};
use crate::corpus::{chunk_conversation, Conversation, DomainLabel};
use crate::embed::{EmbeddingTable, Vocabulary};
use crate::encoder::{Encoder, EncoderVariant};
use crate::error::{Error, Result};
use crate::output::{cross_entropy_loss, viterbi_decode, CrfParams, SoftmaxClassifier, NUM_TAGS};
use crate::params::{BoundParams, Params};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

fn default_embed_dim() -> usize {
    300
}
fn default_hidden() -> usize {
    100
}
fn default_dropout() -> f64 {
    0.5
}
fn default_chunk_len() -> usize {
    100
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OutputKind {
    Softmax,
    Crf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "default_embed_dim")]
    pub embed_dim: usize,
    #[serde(default = "default_hidden")]
    pub word_hidden: usize,
    #[serde(default = "default_hidden")]
    pub conv_hidden: usize,
    #[serde(default = "default_hidden")]
    pub disc_hidden: usize,
    pub variant: EncoderVariant,
    pub output: OutputKind,
    #[serde(default = "default_dropout")]
    pub dropout_rate: f64,
    #[serde(default)]
    pub freeze_embeddings: bool,
    #[serde(default)]
    pub with_discriminator: bool,
    #[serde(default = "default_chunk_len")]
    pub max_chunk_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            embed_dim: default_embed_dim(),
            word_hidden: default_hidden(),
            conv_hidden: default_hidden(),
            disc_hidden: default_hidden(),
            variant: EncoderVariant::HLstm,
            output: OutputKind::Softmax,
            dropout_rate: default_dropout(),
            freeze_embeddings: false,
            with_discriminator: false,
            max_chunk_len: default_chunk_len(),
        }
    }
}

#[derive(Debug, Clone)]
pub enum Classifier {
    Softmax(SoftmaxClassifier),
    Crf(CrfParams),
}

/// A conversation chunk with tokens mapped to vocabulary indices.
#[derive(Debug, Clone, PartialEq)]
pub struct IndexedChunk {
    pub id: String,
    pub domain: DomainLabel,
    pub sentences: Vec<Vec<usize>>,
    pub labels: Vec<Option<usize>>,
}

impl IndexedChunk {
    pub fn n_sentences(&self) -> usize {
        self.sentences.len()
    }

    /// All gold labels, or a data error naming the chunk.
    pub fn labels_strict(&self) -> Result<Vec<usize>> {
        self.labels
            .iter()
            .map(|l| {
                l.ok_or_else(|| {
                    Error::Data(format!("chunk {} has an unlabeled sentence", self.id))
                })
            })
            .collect()
    }
}

/// Chunk and index a corpus against a vocabulary.
pub fn prepare_chunks(
    convs: &[Conversation],
    vocab: &Vocabulary,
    max_chunk_len: usize,
) -> Vec<IndexedChunk> {
    let mut out = Vec::new();
    for conv in convs {
        for (ci, chunk) in chunk_conversation(conv, max_chunk_len).into_iter().enumerate() {
            out.push(IndexedChunk {
                id: format!("{}#{}", conv.id, ci),
                domain: conv.domain,
                sentences: chunk.iter().map(|s| vocab.encode(&s.tokens)).collect(),
                labels: chunk.iter().map(|s| s.act.map(|a| a.code())).collect(),
            });
        }
    }
    out
}

pub struct SpeechActModel {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub params: Params,
    pub embedding: EmbeddingTable,
    pub encoder: Encoder,
    pub classifier: Classifier,
    pub discriminator: Option<Discriminator>,
}

impl SpeechActModel {
    /// Build a model with randomly initialized parameters; word vectors may
    /// be loaded from a pretrained file (coverage returned when so).
    pub fn new(
        config: ModelConfig,
        vocab: Vocabulary,
        master_seed: u64,
        pretrained: Option<&Path>,
    ) -> Result<(Self, Option<f64>)> {
        let mut params = Params::new();
        let trainable = !config.freeze_embeddings;
        let (embedding, coverage) = match pretrained {
            Some(path) => {
                let (table, cov) = EmbeddingTable::load_pretrained(
                    &mut params,
                    &vocab,
                    config.embed_dim,
                    trainable,
                    master_seed,
                    path,
                )?;
                (table, Some(cov))
            }
            None => (
                EmbeddingTable::random(&mut params, &vocab, config.embed_dim, trainable, master_seed),
                None,
            ),
        };
        let encoder = Encoder::new(
            &mut params,
            config.variant,
            config.embed_dim,
            config.word_hidden,
            config.conv_hidden,
            config.dropout_rate,
            master_seed,
        )?;
        let u_dim = encoder.u_dim();
        let classifier = match config.output {
            OutputKind::Softmax => {
                Classifier::Softmax(SoftmaxClassifier::new(&mut params, u_dim, master_seed)?)
            }
            OutputKind::Crf => Classifier::Crf(CrfParams::new(&mut params, u_dim, master_seed)?),
        };
        let discriminator = if config.with_discriminator {
            Some(Discriminator::new(
                &mut params,
                u_dim,
                config.disc_hidden,
                master_seed,
            )?)
        } else {
            None
        };
        Ok((
            SpeechActModel {
                config,
                vocab,
                params,
                embedding,
                encoder,
                classifier,
                discriminator,
            },
            coverage,
        ))
    }

    /// Encode one chunk into classifier-ready sentence vectors (dropout on
    /// u_i already applied in train mode).
    pub fn encode_chunk(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        chunk: &IndexedChunk,
        mode: Mode,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<Var>> {
        let emb = bound.var(self.embedding.matrix);
        let mut hs = Vec::with_capacity(chunk.sentences.len());
        for ids in &chunk.sentences {
            let words = tape.lookup(emb, ids)?;
            hs.push(self.encoder.encode_sentence(tape, bound, words)?);
        }
        let us = self.encoder.encode_conversation(tape, bound, &hs, mode, rng)?;
        us.into_iter()
            .map(|u| tape.dropout(u, self.config.dropout_rate, mode, rng))
            .collect()
    }

    /// Classification loss for one fully labeled chunk: cross-entropy
    /// summed over sentences (Softmax head) or the CRF sequence NLL.
    pub fn chunk_class_loss(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        us: &[Var],
        labels: &[usize],
    ) -> Result<Var> {
        if let Some(bad) = labels.iter().find(|&&y| y >= NUM_TAGS) {
            return Err(Error::Data(format!("label code {bad} outside 0..{NUM_TAGS}")));
        }
        match &self.classifier {
            Classifier::Softmax(c) => {
                let probs = c.classify(tape, bound, us)?;
                cross_entropy_loss(tape, probs, labels)
            }
            Classifier::Crf(c) => {
                let node = c.node_scores(tape, bound, us)?;
                c.nll(tape, bound, node, labels)
            }
        }
    }

    /// Per-sentence domain BCE terms for one chunk, with the encoder side
    /// connected through gradient reversal (coefficient `rev_lambda`).
    pub fn chunk_domain_losses(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        us: &[Var],
        domain: DomainLabel,
        rev_lambda: f64,
    ) -> Result<Vec<Var>> {
        let disc = self
            .discriminator
            .as_ref()
            .ok_or_else(|| Error::State("model has no discriminator".into()))?;
        us.iter()
            .map(|u| {
                let rev = tape.grad_reverse(*u, rev_lambda);
                let d_hat = disc.discriminate(tape, bound, rev)?;
                domain_bce_loss(tape, d_hat, domain)
            })
            .collect()
    }

    /// Decode one chunk: Softmax argmax per sentence, or Viterbi for the
    /// CRF head. Deterministic; ties break toward the lowest class code.
    pub fn predict_chunk(&self, chunk: &IndexedChunk) -> Result<Vec<usize>> {
        let mut tape = Tape::new();
        let bound = BoundParams::bind(&mut tape, &self.params);
        let mut rng = crate::rng::stream(0, crate::rng::StreamKind::Dropout, &[]);
        let us = self.encode_chunk(&mut tape, &bound, chunk, Mode::Eval, &mut rng)?;
        match &self.classifier {
            Classifier::Softmax(c) => {
                let logits = c.logits(&mut tape, &bound, &us)?;
                let t = tape.value(logits);
                Ok(t
                    .data
                    .chunks(NUM_TAGS)
                    .map(|row| {
                        let mut best = 0;
                        for (j, v) in row.iter().enumerate() {
                            if *v > row[best] {
                                best = j;
                            }
                        }
                        best
                    })
                    .collect())
            }
            Classifier::Crf(c) => {
                let node = c.node_scores(&mut tape, &bound, &us)?;
                let node_t = tape.value(node).clone();
                let trans_t = self.params.value(c.trans).clone();
                let (path, _) = viterbi_decode(&node_t, &trans_t)?;
                Ok(path)
            }
        }
    }

    /// Bitwise equality of every parameter tensor (used by round-trip tests).
    pub fn params_bit_equal(&self, other: &SpeechActModel) -> bool {
        if self.params.len() != other.params.len() {
            return false;
        }
        self.params
            .entries()
            .iter()
            .zip(other.params.entries())
            .all(|(a, b)| {
                a.name == b.name
                    && a.value.shape == b.value.shape
                    && a.value
                        .data
                        .iter()
                        .zip(&b.value.data)
                        .all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }
}

/// The engineered-identity construction used to show the hierarchical
/// encoder subsumes the flat one: conversation-level cells whose gates are
/// saturated (input ≈ 1, forget ≈ 0, output ≈ 1) and whose cell candidate
/// is tanh(ε·x_k), so each position copies ε·h_i to machine precision.
pub fn force_identity_conv_layer(model: &mut SpeechActModel, epsilon: f64) -> Result<f64> {
    let conv = model
        .encoder
        .conv_layer
        .clone()
        .ok_or_else(|| Error::State("model has no conversation layer".into()))?;
    let h = model.encoder.conv_hidden;
    let input = 2 * model.encoder.word_hidden;
    if h != input {
        return Err(Error::Contract(format!(
            "identity construction needs conv_hidden = 2·word_hidden, got {h} vs {input}"
        )));
    }
    for cell in [&conv.fwd, &conv.bwd] {
        let w_ih = model.params.value_mut(cell.w_ih);
        w_ih.data.iter_mut().for_each(|v| *v = 0.0);
        for k in 0..h {
            // g-gate block row k reads input coordinate k scaled by ε
            w_ih.data[(2 * h + k) * input + k] = epsilon;
        }
        model
            .params
            .value_mut(cell.w_hh)
            .data
            .iter_mut()
            .for_each(|v| *v = 0.0);
        let bias = model.params.value_mut(cell.bias);
        for k in 0..h {
            bias.data[k] = 500.0; // input gate → 1
            bias.data[h + k] = -500.0; // forget gate → 0
            bias.data[2 * h + k] = 0.0;
            bias.data[3 * h + k] = 500.0; // output gate → 1
        }
    }
    Ok(epsilon)
}
