//! Conversation data model, JSONL parsing, preprocessing, chunking and
//! fold management.

use crate::error::{Error, Result};
use crate::output::ActTag;
use crate::rng::{stream, StreamKind};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

pub const UNK: &str = "<unk>";
pub const PAD: &str = "<pad>";
pub const NUMBER: &str = "<number>";
pub const URL: &str = "<url>";
pub const RESERVED: [&str; 4] = [UNK, PAD, NUMBER, URL];

/// Which side of the adaptation a conversation belongs to
/// (1 = synchronous/meeting source, 0 = asynchronous/forum target).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DomainLabel {
    #[serde(rename = "source")]
    Source,
    #[serde(rename = "target")]
    Target,
}

impl DomainLabel {
    pub fn as_f64(self) -> f64 {
        match self {
            DomainLabel::Source => 1.0,
            DomainLabel::Target => 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sentence {
    pub raw: String,
    pub tokens: Vec<String>,
    pub act: Option<ActTag>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comment {
    pub speaker: String,
    pub sentences: Vec<Sentence>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conversation {
    pub id: String,
    pub domain: DomainLabel,
    pub comments: Vec<Comment>,
}

impl Conversation {
    /// All sentences in chronological order (comment order, then sentence
    /// order within each comment).
    pub fn sentences(&self) -> impl Iterator<Item = &Sentence> {
        self.comments.iter().flat_map(|c| c.sentences.iter())
    }

    pub fn sentence_count(&self) -> usize {
        self.comments.iter().map(|c| c.sentences.len()).sum()
    }
}

// ── wire format ─────────────────────────────────────────────────────────
// One JSON object per line; key order is fixed by struct field order.

#[derive(Debug, Serialize, Deserialize)]
struct WireSentence {
    text: String,
    act: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct WireComment {
    speaker: String,
    sentences: Vec<WireSentence>,
}

#[derive(Debug, Serialize, Deserialize)]
struct WireConversation {
    id: String,
    domain: DomainLabel,
    comments: Vec<WireComment>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CorpusStats {
    pub conversations: usize,
    pub comments: usize,
    pub sentences: usize,
}

pub fn corpus_stats(convs: &[Conversation]) -> CorpusStats {
    CorpusStats {
        conversations: convs.len(),
        comments: convs.iter().map(|c| c.comments.len()).sum(),
        sentences: convs.iter().map(Conversation::sentence_count).sum(),
    }
}

/// Parse a JSONL corpus. Sentences that preprocess to nothing are dropped
/// with a warning; conversations left without sentences are dropped too.
pub fn parse_corpus(path: &Path) -> Result<Vec<Conversation>> {
    let file = std::fs::File::open(path)?;
    parse_corpus_reader(BufReader::new(file))
}

pub fn parse_corpus_reader<R: Read>(reader: BufReader<R>) -> Result<Vec<Conversation>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let wire: WireConversation = serde_json::from_str(&line).map_err(|e| Error::Format {
            line: line_no,
            msg: format!("malformed JSON: {e}"),
        })?;
        let mut comments = Vec::with_capacity(wire.comments.len());
        for wc in wire.comments {
            let mut sentences = Vec::with_capacity(wc.sentences.len());
            for ws in wc.sentences {
                let act = match &ws.act {
                    None => None,
                    Some(s) => Some(ActTag::from_str(s).ok_or_else(|| Error::Format {
                        line: line_no,
                        msg: format!("unknown act {s:?}"),
                    })?),
                };
                let tokens = preprocess_sentence(&ws.text);
                if tokens.is_empty() {
                    eprintln!(
                        "warning: dropping empty sentence {:?} in conversation {} (line {})",
                        ws.text, wire.id, line_no
                    );
                    continue;
                }
                sentences.push(Sentence {
                    raw: ws.text,
                    tokens,
                    act,
                });
            }
            comments.push(Comment {
                speaker: wc.speaker,
                sentences,
            });
        }
        let conv = Conversation {
            id: wire.id,
            domain: wire.domain,
            comments,
        };
        if conv.sentence_count() == 0 {
            eprintln!("warning: dropping conversation {} with no sentences", conv.id);
            continue;
        }
        out.push(conv);
    }
    Ok(out)
}

/// Write conversations as JSONL with the canonical key order and LF endings.
pub fn serialize_corpus<W: Write>(convs: &[Conversation], writer: &mut W) -> Result<()> {
    for conv in convs {
        let wire = WireConversation {
            id: conv.id.clone(),
            domain: conv.domain,
            comments: conv
                .comments
                .iter()
                .map(|c| WireComment {
                    speaker: c.speaker.clone(),
                    sentences: c
                        .sentences
                        .iter()
                        .map(|s| WireSentence {
                            text: s.raw.clone(),
                            act: s.act.map(|a| a.as_str().to_string()),
                        })
                        .collect(),
                })
                .collect(),
        };
        serde_json::to_writer(&mut *writer, &wire)?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}

pub fn write_corpus(convs: &[Conversation], path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    serialize_corpus(convs, &mut f)
}

// ── preprocessing ───────────────────────────────────────────────────────

fn is_url(chunk: &str) -> bool {
    if chunk.starts_with("www.") {
        return true;
    }
    if let Some(pos) = chunk.find("://") {
        let scheme = &chunk[..pos];
        return !scheme.is_empty()
            && scheme
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || c == '+' || c == '-' || c == '.')
            && scheme.chars().next().is_some_and(|c| c.is_ascii_alphabetic());
    }
    false
}

/// Lowercase, replace URLs with `<url>` and maximal digit runs with
/// `<number>`, split punctuation into its own tokens while keeping
/// contiguous non-alphanumeric runs of length ≥ 2 (emoticons and the like)
/// whole. Deterministic and idempotent.
pub fn preprocess_sentence(raw: &str) -> Vec<String> {
    let lower = raw.to_lowercase();
    let mut tokens = Vec::new();
    for chunk in lower.split_whitespace() {
        if RESERVED.contains(&chunk) {
            tokens.push(chunk.to_string());
            continue;
        }
        if is_url(chunk) {
            tokens.push(URL.to_string());
            continue;
        }
        tokenize_chunk(chunk, &mut tokens);
    }
    tokens
}

fn tokenize_chunk(chunk: &str, tokens: &mut Vec<String>) {
    let chars: Vec<char> = chunk.chars().collect();
    let mut i = 0;
    while i < chars.len() {
        let start = i;
        if chars[i].is_alphanumeric() {
            while i < chars.len() && chars[i].is_alphanumeric() {
                i += 1;
            }
            push_word_run(&chars[start..i], tokens);
        } else {
            while i < chars.len() && !chars[i].is_alphanumeric() {
                i += 1;
            }
            tokens.push(chars[start..i].iter().collect());
        }
    }
}

/// An alphanumeric run: digit subruns become `<number>`, the rest stay.
fn push_word_run(run: &[char], tokens: &mut Vec<String>) {
    let mut i = 0;
    while i < run.len() {
        let start = i;
        if run[i].is_ascii_digit() {
            while i < run.len() && run[i].is_ascii_digit() {
                i += 1;
            }
            tokens.push(NUMBER.to_string());
        } else {
            while i < run.len() && !run[i].is_ascii_digit() {
                i += 1;
            }
            tokens.push(run[start..i].iter().collect());
        }
    }
}

// ── chunking ────────────────────────────────────────────────────────────

/// Split a conversation's chronological sentence list into consecutive
/// chunks of at most `max_len` sentences. Concatenating the chunks
/// reproduces the original list exactly.
pub fn chunk_conversation(conv: &Conversation, max_len: usize) -> Vec<Vec<Sentence>> {
    assert!(max_len >= 1, "max_len must be at least 1");
    let all: Vec<Sentence> = conv.sentences().cloned().collect();
    all.chunks(max_len).map(<[Sentence]>::to_vec).collect()
}

// ── fold management ─────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub train: Vec<String>,
    pub test: Vec<String>,
}

/// Two-fold conversation-level cross-validation plan. A development subset
/// is carved out first and shared by both folds; the remaining conversations
/// are split into equal halves, and fold 2 swaps the roles of fold 1's
/// train and test halves.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub dev: Vec<String>,
    pub folds: [Fold; 2],
}

pub const DEFAULT_DEV_FRACTION: f64 = 0.1;

pub fn make_folds(convs: &[Conversation], seed: u64) -> Result<FoldPlan> {
    make_folds_with(convs, seed, DEFAULT_DEV_FRACTION)
}

pub fn make_folds_with(convs: &[Conversation], seed: u64, dev_fraction: f64) -> Result<FoldPlan> {
    if !(0.0..1.0).contains(&dev_fraction) {
        return Err(Error::Config(format!(
            "dev fraction {dev_fraction} outside [0,1)"
        )));
    }
    let mut ids: Vec<String> = convs.iter().map(|c| c.id.clone()).collect();
    let n = ids.len();
    let dev_n = (dev_fraction * n as f64).round() as usize;
    if n.saturating_sub(dev_n) < 2 {
        return Err(Error::Data(format!(
            "need at least 2 non-dev conversations, got {n} with {dev_n} dev"
        )));
    }
    let mut rng = stream(seed, StreamKind::Folds, &[]);
    ids.shuffle(&mut rng);
    let dev: Vec<String> = ids[..dev_n].to_vec();
    let rest = &ids[dev_n..];
    let half = rest.len() / 2 + rest.len() % 2;
    let a: Vec<String> = rest[..half].to_vec();
    let b: Vec<String> = rest[half..].to_vec();
    Ok(FoldPlan {
        dev,
        folds: [
            Fold {
                train: a.clone(),
                test: b.clone(),
            },
            Fold { train: b, test: a },
        ],
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn conv_from_texts(id: &str, texts: &[&str]) -> Conversation {
        Conversation {
            id: id.into(),
            domain: DomainLabel::Target,
            comments: vec![Comment {
                speaker: "s".into(),
                sentences: texts
                    .iter()
                    .map(|t| Sentence {
                        raw: (*t).to_string(),
                        tokens: preprocess_sentence(t),
                        act: None,
                    })
                    .collect(),
            }],
        }
    }

    #[test]
    fn preprocess_url_and_case() {
        assert_eq!(
            preprocess_sentence("Visit http://x.co NOW"),
            vec!["visit", "<url>", "now"]
        );
        assert_eq!(preprocess_sentence("see www.foo.com today"), vec!["see", "<url>", "today"]);
    }

    #[test]
    fn preprocess_digits_and_punctuation() {
        assert_eq!(
            preprocess_sentence("room 42?"),
            vec!["room", "<number>", "?"]
        );
        assert_eq!(
            preprocess_sentence("great :) really!!!"),
            vec!["great", ":)", "really", "!!!"]
        );
        assert_eq!(preprocess_sentence("don't"), vec!["don", "'", "t"]);
        assert_eq!(preprocess_sentence("a1b22"), vec!["a", "<number>", "b", "<number>"]);
    }

    #[test]
    fn chunking_is_exact_concatenation() {
        let texts: Vec<String> = (0..955).map(|i| format!("sentence {i} ok")).collect();
        let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
        let conv = conv_from_texts("c", &refs);
        let chunks = chunk_conversation(&conv, 100);
        assert_eq!(chunks.len(), 10);
        let sizes: Vec<usize> = chunks.iter().map(Vec::len).collect();
        assert_eq!(&sizes[..9], &[100; 9]);
        assert_eq!(sizes[9], 55);
        let rejoined: Vec<Sentence> = chunks.into_iter().flatten().collect();
        let original: Vec<Sentence> = conv.sentences().cloned().collect();
        assert_eq!(rejoined, original);
    }

    #[test]
    fn chunking_short_conversation_is_one_chunk() {
        let texts: Vec<String> = (0..18).map(|i| format!("line {i}")).collect();
        let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
        let conv = conv_from_texts("c", &refs);
        assert_eq!(chunk_conversation(&conv, 100).len(), 1);
        assert_eq!(chunk_conversation(&conv, 1).len(), 18);
    }

    #[test]
    fn folds_partition_and_swap() {
        let convs: Vec<Conversation> = (0..40)
            .map(|i| conv_from_texts(&format!("c{i}"), &["hello there"]))
            .collect();
        let plan = make_folds_with(&convs, 5, 0.0).unwrap();
        assert!(plan.dev.is_empty());
        assert_eq!(plan.folds[0].train.len(), 20);
        assert_eq!(plan.folds[0].test.len(), 20);
        assert_eq!(plan.folds[0].train, plan.folds[1].test);
        assert_eq!(plan.folds[0].test, plan.folds[1].train);
        // every conversation is tested in exactly one fold
        let mut seen: Vec<&String> = plan.folds[0]
            .test
            .iter()
            .chain(plan.folds[1].test.iter())
            .collect();
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), 40);
    }

    #[test]
    fn folds_with_paper_sized_ta_corpus() {
        let convs: Vec<Conversation> = (0..200)
            .map(|i| conv_from_texts(&format!("c{i}"), &["hello there"]))
            .collect();
        let plan = make_folds(&convs, 1).unwrap();
        assert_eq!(plan.dev.len(), 20);
        assert_eq!(plan.folds[0].train.len(), 90);
        assert_eq!(plan.folds[0].test.len(), 90);
        // dev is disjoint from both folds' tests
        for fold in &plan.folds {
            assert!(fold.test.iter().all(|id| !plan.dev.contains(id)));
            assert!(fold.train.iter().all(|id| !plan.dev.contains(id)));
        }
    }

    #[test]
    fn folds_too_small_rejected() {
        let convs = vec![conv_from_texts("only", &["hi"])];
        assert!(make_folds(&convs, 0).is_err());
    }
}
