//! Synthetic domain-shift corpus generator.
//!
//! Produces a source corpus and a target corpus that share label semantics
//! (the same class-conditional token distributions and tag chain) while the
//! target's surface vocabulary is shifted: each token occurrence is replaced
//! by a deterministic domain variant with a configurable probability.

use crate::corpus::{Comment, Conversation, DomainLabel, Sentence};
use crate::error::{Error, Result};
use crate::output::{ActTag, NUM_TAGS};
use crate::rng::{stream, StreamKind};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthProfile {
    /// Distribution of the first sentence's tag.
    pub initial: Vec<f64>,
    /// Row-stochastic 5×5 tag transition matrix between adjacent sentences.
    pub transition: Vec<Vec<f64>>,
    /// Weighted signature tokens per class, aligned with the tag codes.
    pub class_tokens: Vec<Vec<(String, f64)>>,
    /// Weighted filler tokens shared by all classes.
    pub shared_tokens: Vec<(String, f64)>,
    /// Probability that a token is drawn from the class distribution
    /// rather than the shared one.
    pub class_token_prob: f64,
    /// Probability that a target-domain token occurrence is replaced by
    /// its domain variant.
    pub substitution_rate: f64,
    pub sentence_len: (usize, usize),
    pub sentences_per_conversation: (usize, usize),
    pub comments_per_conversation: (usize, usize),
    pub speakers: Vec<String>,
}

impl SynthProfile {
    /// Tag imbalance shaped like an asynchronous forum corpus
    /// (Statement-heavy, Response-light), with an i.i.d. tag chain.
    pub fn ta_like(substitution_rate: f64) -> Self {
        let marginal = vec![0.0771, 0.024, 0.1471, 0.0957, 0.6561];
        let class_tokens: Vec<Vec<(String, f64)>> = [
            vec!["recommend", "suggest", "try", "should", "maybe", "consider"],
            vec!["agree", "answer", "indeed", "yes", "exactly", "replying"],
            vec!["what", "how", "anyone", "where", "when", "why"],
            vec!["thanks", "cheers", "appreciate", "welcome", "kindly", "regards"],
            vec!["trip", "hotel", "road", "meeting", "plan", "driver", "city", "week"],
        ]
        .iter()
        .map(|toks| toks.iter().map(|t| ((*t).to_string(), 1.0)).collect())
        .collect();
        let shared_tokens = [
            "the", "a", "to", "and", "it", "is", "was", "for", "on", "in", "we", "i",
        ]
        .iter()
        .map(|t| ((*t).to_string(), 1.0))
        .collect();
        SynthProfile {
            initial: marginal.clone(),
            transition: vec![marginal; NUM_TAGS],
            class_tokens,
            shared_tokens,
            class_token_prob: 0.6,
            substitution_rate,
            sentence_len: (3, 7),
            sentences_per_conversation: (4, 8),
            comments_per_conversation: (1, 3),
            speakers: vec!["ann".into(), "bob".into(), "carol".into()],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let check_dist = |name: &str, d: &[f64], len: usize| -> Result<()> {
            if d.len() != len {
                return Err(Error::Config(format!("{name} must have {len} entries")));
            }
            if d.iter().any(|p| *p < 0.0 || !p.is_finite()) {
                return Err(Error::Config(format!("{name} has a negative or non-finite entry")));
            }
            let sum: f64 = d.iter().sum();
            if (sum - 1.0).abs() > 1e-6 {
                return Err(Error::Config(format!("{name} sums to {sum}, expected 1")));
            }
            Ok(())
        };
        check_dist("initial", &self.initial, NUM_TAGS)?;
        if self.transition.len() != NUM_TAGS {
            return Err(Error::Config("transition must be 5×5".into()));
        }
        for (i, row) in self.transition.iter().enumerate() {
            check_dist(&format!("transition row {i}"), row, NUM_TAGS)?;
        }
        if self.class_tokens.len() != NUM_TAGS
            || self.class_tokens.iter().any(Vec::is_empty)
            || self.shared_tokens.is_empty()
        {
            return Err(Error::Config("token distributions must be non-empty per class".into()));
        }
        for (t, w) in self.class_tokens.iter().flatten().chain(&self.shared_tokens) {
            if *w <= 0.0 || !w.is_finite() {
                return Err(Error::Config(format!("token {t:?} has invalid weight {w}")));
            }
        }
        if !(0.0..=1.0).contains(&self.class_token_prob) {
            return Err(Error::Config("class_token_prob outside [0,1]".into()));
        }
        if !(0.0..=1.0).contains(&self.substitution_rate) {
            return Err(Error::Config("substitution_rate outside [0,1]".into()));
        }
        for (name, (lo, hi)) in [
            ("sentence_len", self.sentence_len),
            ("sentences_per_conversation", self.sentences_per_conversation),
            ("comments_per_conversation", self.comments_per_conversation),
        ] {
            if lo == 0 || hi < lo {
                return Err(Error::Config(format!("{name} range ({lo},{hi}) invalid")));
            }
        }
        if self.speakers.is_empty() {
            return Err(Error::Config("speakers list is empty".into()));
        }
        Ok(())
    }
}

/// Deterministic target-domain surface form of a token.
pub fn domain_variant(token: &str) -> String {
    format!("{token}x")
}

fn sample_dist(rng: &mut ChaCha8Rng, dist: &[f64]) -> usize {
    let r: f64 = rng.random::<f64>();
    let mut acc = 0.0;
    for (i, p) in dist.iter().enumerate() {
        acc += p;
        if r < acc {
            return i;
        }
    }
    dist.len() - 1
}

fn sample_weighted<'a>(rng: &mut ChaCha8Rng, items: &'a [(String, f64)]) -> &'a str {
    let total: f64 = items.iter().map(|(_, w)| w).sum();
    let r: f64 = rng.random::<f64>() * total;
    let mut acc = 0.0;
    for (t, w) in items {
        acc += w;
        if r < acc {
            return t;
        }
    }
    &items[items.len() - 1].0
}

fn range_sample(rng: &mut ChaCha8Rng, (lo, hi): (usize, usize)) -> usize {
    rng.random_range(lo..=hi)
}

fn generate_conversation(
    profile: &SynthProfile,
    domain: DomainLabel,
    id: String,
    rng: &mut ChaCha8Rng,
) -> Conversation {
    let n_sentences = range_sample(rng, profile.sentences_per_conversation);
    let n_comments = range_sample(rng, profile.comments_per_conversation).min(n_sentences);

    // tag chain over the flattened chronological sentence sequence
    let mut tags = Vec::with_capacity(n_sentences);
    let mut prev = sample_dist(rng, &profile.initial);
    tags.push(prev);
    for _ in 1..n_sentences {
        prev = sample_dist(rng, &profile.transition[prev]);
        tags.push(prev);
    }

    // spread sentences over comments, keeping order
    let base = n_sentences / n_comments;
    let extra = n_sentences % n_comments;
    let mut sent_idx = 0;
    let mut comments = Vec::with_capacity(n_comments);
    for ci in 0..n_comments {
        let count = base + usize::from(ci < extra);
        let speaker = profile.speakers[ci % profile.speakers.len()].clone();
        let mut sentences = Vec::with_capacity(count);
        for _ in 0..count {
            let tag = tags[sent_idx];
            sent_idx += 1;
            let len = range_sample(rng, profile.sentence_len);
            let mut tokens = Vec::with_capacity(len);
            for _ in 0..len {
                let from_class = rng.random::<f64>() < profile.class_token_prob;
                let tok = if from_class {
                    sample_weighted(rng, &profile.class_tokens[tag])
                } else {
                    sample_weighted(rng, &profile.shared_tokens)
                };
                let substituted = domain == DomainLabel::Target
                    && rng.random::<f64>() < profile.substitution_rate;
                tokens.push(if substituted {
                    domain_variant(tok)
                } else {
                    tok.to_string()
                });
            }
            let raw = tokens.join(" ");
            sentences.push(Sentence {
                raw,
                tokens,
                act: ActTag::from_code(tag),
            });
        }
        comments.push(Comment { speaker, sentences });
    }
    Conversation {
        id,
        domain,
        comments,
    }
}

/// Generate `n_conversations` source conversations and the same number of
/// target conversations under `profile`.
pub fn synth_generate(
    profile: &SynthProfile,
    n_conversations: usize,
    seed: u64,
) -> Result<(Vec<Conversation>, Vec<Conversation>)> {
    profile.validate()?;
    let mut rng = stream(seed, StreamKind::Synth, &[]);
    let source = (0..n_conversations)
        .map(|i| {
            generate_conversation(profile, DomainLabel::Source, format!("src-{i}"), &mut rng)
        })
        .collect();
    let target = (0..n_conversations)
        .map(|i| {
            generate_conversation(profile, DomainLabel::Target, format!("tgt-{i}"), &mut rng)
        })
        .collect();
    Ok((source, target))
}
