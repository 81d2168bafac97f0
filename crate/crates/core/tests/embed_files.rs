//! Pretrained-vector file loading: coverage, bit-exactness, error paths.

use sar_core::corpus::{preprocess_sentence, Comment, Conversation, DomainLabel, Sentence};
use sar_core::embed::{build_vocab, EmbeddingTable, Vocabulary};
use sar_core::error::Error;
use sar_core::params::Params;
use std::io::Write;
use std::path::PathBuf;

fn vocab_abc() -> Vocabulary {
    let corpus = vec![Conversation {
        id: "c".into(),
        domain: DomainLabel::Target,
        comments: vec![Comment {
            speaker: "s".into(),
            sentences: vec![Sentence {
                raw: "alpha alpha beta gamma".into(),
                tokens: preprocess_sentence("alpha alpha beta gamma"),
                act: None,
            }],
        }],
    }];
    build_vocab(&corpus, 1).unwrap()
}

fn write_file(dir: &tempfile::TempDir, name: &str, content: &str) -> PathBuf {
    let path = dir.path().join(name);
    let mut f = std::fs::File::create(&path).unwrap();
    f.write_all(content.as_bytes()).unwrap();
    path
}

fn load(
    vocab: &Vocabulary,
    dim: usize,
    path: &std::path::Path,
) -> Result<(Params, EmbeddingTable, f64), Error> {
    let mut params = Params::new();
    let (table, cov) = EmbeddingTable::load_pretrained(&mut params, vocab, dim, true, 1, path)?;
    Ok((params, table, cov))
}

#[test]
fn full_coverage_copies_rows_bit_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_file(
        &dir,
        "vec.txt",
        "alpha 0.125 -3.5\nbeta 1.0 2.0\ngamma -0.0078125 9.25\n",
    );
    let vocab = vocab_abc();
    let (params, table, cov) = load(&vocab, 2, &path).unwrap();
    assert_eq!(cov, 1.0);
    let m = params.value(table.matrix);
    let row = |tok: &str| {
        let i = vocab.lookup(tok);
        &m.data[i * 2..(i + 1) * 2]
    };
    assert_eq!(row("alpha"), &[0.125, -3.5]);
    assert_eq!(row("beta"), &[1.0, 2.0]);
    assert_eq!(row("gamma"), &[-0.0078125, 9.25]);
}

#[test]
fn empty_file_leaves_random_rows_in_init_range() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_file(&dir, "vec.txt", "");
    let vocab = vocab_abc();
    let (params, table, cov) = load(&vocab, 3, &path).unwrap();
    assert_eq!(cov, 0.0);
    let m = params.value(table.matrix);
    assert!(m.data.iter().all(|v| v.abs() <= 0.05));
}

#[test]
fn word2vec_header_is_skipped() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_file(&dir, "vec.txt", "3 2\nalpha 1.0 2.0\n");
    let vocab = vocab_abc();
    let (_, _, cov) = load(&vocab, 2, &path).unwrap();
    assert!((cov - 1.0 / 3.0).abs() < 1e-12);
}

#[test]
fn wrong_width_names_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_file(&dir, "vec.txt", "alpha 1.0 2.0\nbeta 1.0\n");
    let vocab = vocab_abc();
    match load(&vocab, 2, &path) {
        Err(Error::Format { line, .. }) => assert_eq!(line, 2),
        other => panic!("expected format error, got {:?}", other.map(|_| ())),
    }
}

#[test]
fn malformed_float_names_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_file(&dir, "vec.txt", "alpha 1.0 2.0\nbeta 3.0 oops\n");
    let vocab = vocab_abc();
    match load(&vocab, 2, &path) {
        Err(Error::Format { line, .. }) => assert_eq!(line, 2),
        other => panic!("expected format error, got {:?}", other.map(|_| ())),
    }
}

#[test]
fn coverage_is_monotone_for_nested_files() {
    let dir = tempfile::tempdir().unwrap();
    let vocab = vocab_abc();
    let contents = [
        "",
        "alpha 1.0 2.0\n",
        "alpha 1.0 2.0\nbeta 3.0 4.0\n",
        "alpha 1.0 2.0\nbeta 3.0 4.0\ngamma 5.0 6.0\n",
    ];
    let mut prev = -1.0;
    for (i, c) in contents.iter().enumerate() {
        let path = write_file(&dir, &format!("v{i}.txt"), c);
        let (_, _, cov) = load(&vocab, 2, &path).unwrap();
        assert!(cov >= prev, "coverage decreased: {cov} after {prev}");
        prev = cov;
    }
    assert_eq!(prev, 1.0);
}

#[test]
fn tokens_outside_vocab_are_ignored() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_file(&dir, "vec.txt", "alpha 1.0 2.0\nzulu 9.0 9.0\n");
    let vocab = vocab_abc();
    let (_, _, cov) = load(&vocab, 2, &path).unwrap();
    assert!((cov - 1.0 / 3.0).abs() < 1e-12);
}

#[test]
fn uncovered_rows_match_pure_random_init_bitwise() {
    // the loader draws the random base first, so covered tokens never
    // shift the draws of uncovered ones
    let dir = tempfile::tempdir().unwrap();
    let vocab = vocab_abc();
    let empty = write_file(&dir, "empty.txt", "");
    let partial = write_file(&dir, "partial.txt", "beta 7.0 8.0\n");
    let (p1, t1, _) = load(&vocab, 2, &empty).unwrap();
    let (p2, t2, _) = load(&vocab, 2, &partial).unwrap();
    let (m1, m2) = (p1.value(t1.matrix), p2.value(t2.matrix));
    for tok in ["alpha", "gamma"] {
        let i = vocab.lookup(tok);
        assert_eq!(m1.data[i * 2..(i + 1) * 2], m2.data[i * 2..(i + 1) * 2]);
    }
}
