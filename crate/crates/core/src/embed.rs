//! Vocabulary construction and pretrained word-vector loading.

use crate::autodiff::Tensor;
use crate::corpus::{Conversation, RESERVED, UNK};
use crate::error::{Error, Result};
use crate::optim::uniform_init;
use crate::params::{ParamId, Params};
use crate::rng::{name_tag, stream, StreamKind};
use std::collections::HashMap;
use std::io::{BufRead, BufReader};
use std::path::Path;

/// Token table with `<unk>`, `<pad>`, `<number>`, `<url>` reserved at
/// indices 0–3. All tokens are lowercase (the preprocessing contract).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < RESERVED.len()
            || tokens[..RESERVED.len()] != RESERVED.map(String::from)
        {
            return Err(Error::Data(
                "vocabulary must start with the reserved tokens".into(),
            ));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Data(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Vocabulary { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Index of a token; unknown tokens map to `<unk>`.
    pub fn lookup(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(0)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, idx: usize) -> &str {
        &self.tokens[idx]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.lookup(t)).collect()
    }
}

/// Build a vocabulary holding every token with frequency ≥ `min_count`,
/// ordered by descending frequency with ties broken lexicographically.
pub fn build_vocab(corpus: &[Conversation], min_count: usize) -> Result<Vocabulary> {
    assert!(min_count >= 1);
    if corpus.is_empty() {
        return Err(Error::Data("cannot build a vocabulary from an empty corpus".into()));
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for conv in corpus {
        for sent in conv.sentences() {
            for tok in &sent.tokens {
                if RESERVED.contains(&tok.as_str()) {
                    continue;
                }
                *counts.entry(tok.as_str()).or_default() += 1;
            }
        }
    }
    let mut kept: Vec<(&str, usize)> = counts
        .into_iter()
        .filter(|(_, c)| *c >= min_count)
        .collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    let mut tokens: Vec<String> = RESERVED.iter().map(|s| (*s).to_string()).collect();
    tokens.extend(kept.into_iter().map(|(t, _)| t.to_string()));
    Vocabulary::from_tokens(tokens)
}

/// Trainable word-embedding table; the matrix itself lives in the
/// parameter store under the name `embedding.matrix`.
#[derive(Debug, Clone)]
pub struct EmbeddingTable {
    pub matrix: ParamId,
    pub dim: usize,
    pub trainable: bool,
}

pub const EMBEDDING_PARAM: &str = "embedding.matrix";

impl EmbeddingTable {
    /// Random initialization U(−0.05, 0.05) for every row.
    pub fn random(
        params: &mut Params,
        vocab: &Vocabulary,
        dim: usize,
        trainable: bool,
        master_seed: u64,
    ) -> Self {
        let mut rng = stream(master_seed, StreamKind::Init, &[name_tag(EMBEDDING_PARAM)]);
        let matrix = uniform_init(&[vocab.len(), dim], &mut rng);
        EmbeddingTable {
            matrix: params.add(EMBEDDING_PARAM, matrix, trainable),
            dim,
            trainable,
        }
    }

    /// Load pretrained vectors: rows for covered tokens are copied verbatim
    /// from the file, the rest keep their U(−0.05, 0.05) initialization.
    /// Returns the fraction of non-reserved vocabulary covered.
    pub fn load_pretrained(
        params: &mut Params,
        vocab: &Vocabulary,
        dim: usize,
        trainable: bool,
        master_seed: u64,
        path: &Path,
    ) -> Result<(Self, f64)> {
        let mut rng = stream(master_seed, StreamKind::Init, &[name_tag(EMBEDDING_PARAM)]);
        let mut matrix = uniform_init(&[vocab.len(), dim], &mut rng);
        let coverage = read_vectors_into(path, vocab, dim, &mut matrix)?;
        Ok((
            EmbeddingTable {
                matrix: params.add(EMBEDDING_PARAM, matrix, trainable),
                dim,
                trainable,
            },
            coverage,
        ))
    }
}

/// Parse a text vector file (`token v1 … vD` per line, optional two-integer
/// word2vec-style header) and overwrite the rows of covered tokens.
fn read_vectors_into(
    path: &Path,
    vocab: &Vocabulary,
    dim: usize,
    matrix: &mut Tensor,
) -> Result<f64> {
    let file = std::fs::File::open(path)?;
    let reader = BufReader::new(file);
    let mut covered = vec![false; vocab.len()];
    let mut first = true;
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if first {
            first = false;
            if fields.len() == 2
                && fields[0].parse::<u64>().is_ok()
                && fields[1].parse::<u64>().is_ok()
            {
                continue; // word2vec-style header
            }
        }
        if fields.len() != dim + 1 {
            return Err(Error::Format {
                line: line_no,
                msg: format!(
                    "expected a token and {dim} floats, found {} fields",
                    fields.len()
                ),
            });
        }
        let token = fields[0];
        let idx = match vocab.index.get(token) {
            Some(&i) => i,
            None => {
                // still validate the floats so malformed lines never pass silently
                for f in &fields[1..] {
                    f.parse::<f64>().map_err(|_| Error::Format {
                        line: line_no,
                        msg: format!("malformed float {f:?}"),
                    })?;
                }
                continue;
            }
        };
        for (j, f) in fields[1..].iter().enumerate() {
            let v: f64 = f.parse().map_err(|_| Error::Format {
                line: line_no,
                msg: format!("malformed float {f:?}"),
            })?;
            matrix.data[idx * dim + j] = v;
        }
        covered[idx] = true;
    }
    let n_real = vocab.len().saturating_sub(RESERVED.len());
    let n_covered = covered.iter().filter(|c| **c).count();
    Ok(if n_real == 0 {
        0.0
    } else {
        n_covered as f64 / n_real as f64
    })
}

/// Convenience used by tests and tooling: the `<unk>` index.
pub fn unk_index(vocab: &Vocabulary) -> usize {
    vocab.lookup(UNK)
}
