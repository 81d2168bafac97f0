//! Command-line interface for the speech act recognition toolkit.
//!
//! Exit codes: 0 success, 1 verification failure, 2 usage/input error,
//! 3 numerical divergence.

use clap::{Parser, Subcommand, ValueEnum};
use sar_core::checkpoint;
use sar_core::corpus::{corpus_stats, parse_corpus, write_corpus, Conversation};
use sar_core::error::Error as CoreError;
use sar_core::model::prepare_chunks;
use sar_core::output::ActTag;
use sar_core::synth::{synth_generate, SynthProfile};
use sar_core::train::{evaluate_chunks, train, Pools, Regime, TrainConfig, TrainOutcome};
use sar_core::verify::{crf_suite, grad_suite, schedule_suite, SuiteReport};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

const EXIT_VERIFY_FAILURE: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_DIVERGENCE: u8 = 3;

#[derive(Parser)]
#[command(
    name = "sar",
    about = "Speech act recognition for conversations: hierarchical LSTM taggers with CRF output and domain-adversarial adaptation",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum AdaptMode {
    Unsup,
    Semisup,
    Sup,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Suite {
    Grad,
    Crf,
    Schedule,
    All,
}

#[derive(Subcommand)]
enum Command {
    /// Train an in-domain model and keep the best dev-F1 checkpoint
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        dev: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Adversarial domain adaptation (unsupervised, semi-supervised or supervised)
    Adapt {
        #[arg(long, value_enum)]
        mode: AdaptMode,
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        target_labeled: Option<PathBuf>,
        #[arg(long)]
        target_unlabeled: PathBuf,
        #[arg(long)]
        target_fraction: Option<f64>,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on a labeled test corpus
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        confusion: Option<PathBuf>,
    },
    /// Fill missing act labels in a corpus
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the oracle-backed verification suites
    Verify {
        #[arg(long, value_enum, default_value = "all")]
        suite: Suite,
    },
    /// Generate a synthetic domain-shift corpus pair
    Synth {
        /// Profile JSON; the built-in forum-like profile when omitted
        #[arg(long)]
        profile: Option<PathBuf>,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out_source: PathBuf,
        #[arg(long)]
        out_target: PathBuf,
    },
}

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Failure {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }
}

impl From<CoreError> for Failure {
    fn from(e: CoreError) -> Self {
        let code = match e {
            CoreError::Divergence { .. } => EXIT_DIVERGENCE,
            _ => EXIT_USAGE,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::usage(e.to_string())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::usage(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train {
            config,
            train,
            dev,
            out,
        } => cmd_train(&config, &train, &dev, &out),
        Command::Adapt {
            mode,
            source,
            target_labeled,
            target_unlabeled,
            target_fraction,
            config,
            out,
        } => cmd_adapt(
            mode,
            &source,
            target_labeled.as_deref(),
            &target_unlabeled,
            target_fraction,
            &config,
            &out,
        ),
        Command::Eval {
            model,
            test,
            report,
            confusion,
        } => cmd_eval(&model, &test, &report, confusion.as_deref()),
        Command::Predict { model, input, out } => cmd_predict(&model, &input, &out),
        Command::Verify { suite } => cmd_verify(suite),
        Command::Synth {
            profile,
            n,
            seed,
            out_source,
            out_target,
        } => cmd_synth(profile.as_deref(), n, seed, &out_source, &out_target),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn read_config(path: &Path) -> Result<TrainConfig, Failure> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure::usage(format!("cannot read config {}: {e}", path.display())))?;
    let config: TrainConfig = serde_json::from_str(&text)
        .map_err(|e| Failure::usage(format!("invalid config {}: {e}", path.display())))?;
    config.validate()?;
    Ok(config)
}

fn read_corpus(path: &Path) -> Result<Vec<Conversation>, Failure> {
    let convs = parse_corpus(path)
        .map_err(|e| Failure::usage(format!("cannot load {}: {e}", path.display())))?;
    let stats = corpus_stats(&convs);
    eprintln!(
        "{}: {} conversations, {} comments, {} sentences",
        path.display(),
        stats.conversations,
        stats.comments,
        stats.sentences
    );
    Ok(convs)
}

fn finish_run(config: &TrainConfig, outcome: &TrainOutcome, out: &Path) -> Result<(), Failure> {
    let config_json = serde_json::to_value(config)?;
    checkpoint::save(&outcome.model, &config_json, out)?;
    let history_path = history_path(out);
    std::fs::write(&history_path, serde_json::to_string_pretty(&outcome.history)?)?;
    if let Some(cov) = outcome.embedding_coverage {
        eprintln!("pretrained embedding coverage: {cov:.4}");
    }
    let best = outcome
        .history
        .iter()
        .find(|h| h.epoch == outcome.best_epoch)
        .expect("best epoch recorded in history");
    println!(
        "best epoch {} dev accuracy {:.4} dev macro-F1 {:.4}",
        outcome.best_epoch, best.dev_accuracy, best.dev_macro_f1
    );
    println!("checkpoint: {}", out.display());
    println!("history: {}", history_path.display());
    Ok(())
}

fn history_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_os_string();
    s.push(".history.json");
    PathBuf::from(s)
}

fn cmd_train(config: &Path, train_path: &Path, dev: &Path, out: &Path) -> Result<(), Failure> {
    let config = read_config(config)?;
    if config.regime != Regime::Indomain {
        return Err(Failure::usage(format!(
            "train requires regime \"indomain\", config says {:?}; use `sar adapt` for adaptation regimes",
            config.regime
        )));
    }
    let pools = Pools {
        source: read_corpus(train_path)?,
        dev: read_corpus(dev)?,
        ..Default::default()
    };
    let outcome = train(&config, &pools)?;
    finish_run(&config, &outcome, out)
}

fn cmd_adapt(
    mode: AdaptMode,
    source: &Path,
    target_labeled: Option<&Path>,
    target_unlabeled: &Path,
    target_fraction: Option<f64>,
    config: &Path,
    out: &Path,
) -> Result<(), Failure> {
    let mut config = read_config(config)?;
    let regime = match mode {
        AdaptMode::Unsup => Regime::AdaptUnsup,
        AdaptMode::Semisup => Regime::AdaptSemisup,
        AdaptMode::Sup => Regime::AdaptSup,
    };
    if config.regime != regime {
        return Err(Failure::usage(format!(
            "config regime {:?} does not match --mode {mode:?}",
            config.regime
        )));
    }
    if matches!(mode, AdaptMode::Unsup) && target_labeled.is_some() {
        return Err(Failure::usage(
            "unsupervised adaptation must not receive --target-labeled (label leakage)",
        ));
    }
    if matches!(mode, AdaptMode::Semisup | AdaptMode::Sup) && target_labeled.is_none() {
        return Err(Failure::usage(format!(
            "--mode {mode:?} requires --target-labeled"
        )));
    }
    if let Some(f) = target_fraction {
        config.target_label_fraction = f;
        config.validate()?;
    }
    let dev_path = config.dev_path.clone().ok_or_else(|| {
        Failure::usage("adaptation needs a development corpus: set \"dev_path\" in the config")
    })?;
    let pools = Pools {
        source: read_corpus(source)?,
        target_labeled: match target_labeled {
            Some(p) => read_corpus(p)?,
            None => Vec::new(),
        },
        target_unlabeled: read_corpus(target_unlabeled)?,
        dev: read_corpus(&dev_path)?,
        ..Default::default()
    };
    let outcome = train(&config, &pools)?;
    finish_run(&config, &outcome, out)
}

fn cmd_eval(
    model_path: &Path,
    test: &Path,
    report_path: &Path,
    confusion_path: Option<&Path>,
) -> Result<(), Failure> {
    let (model, _) = checkpoint::load(model_path)?;
    let convs = read_corpus(test)?;
    let unlabeled: Vec<&str> = convs
        .iter()
        .filter(|c| c.sentences().any(|s| s.act.is_none()))
        .map(|c| c.id.as_str())
        .collect();
    if !unlabeled.is_empty() {
        return Err(Failure::usage(format!(
            "test corpus has unlabeled sentences in conversations: {}",
            unlabeled.join(", ")
        )));
    }
    let chunks = prepare_chunks(&convs, &model.vocab, model.config.max_chunk_len);
    let (report, cm) = evaluate_chunks(&model, &chunks)?;
    std::fs::write(report_path, serde_json::to_string_pretty(&report)?)?;
    if let Some(p) = confusion_path {
        let labels: Vec<&str> = ActTag::ALL.iter().map(|t| t.as_str()).collect();
        std::fs::write(p, cm.to_csv(&labels))?;
    }
    print!("{}", report.to_table());
    Ok(())
}

fn cmd_predict(model_path: &Path, input: &Path, out: &Path) -> Result<(), Failure> {
    let (model, _) = checkpoint::load(model_path)?;
    let mut convs = read_corpus(input)?;
    let mut agree = 0usize;
    let mut labeled = 0usize;
    let mut filled = 0usize;
    for conv in &mut convs {
        let chunks = prepare_chunks(
            std::slice::from_ref(conv),
            &model.vocab,
            model.config.max_chunk_len,
        );
        let mut predictions = Vec::new();
        for chunk in &chunks {
            predictions.extend(model.predict_chunk(chunk)?);
        }
        let mut it = predictions.into_iter();
        for comment in &mut conv.comments {
            for sentence in &mut comment.sentences {
                let pred = ActTag::from_code(it.next().expect("one prediction per sentence"))
                    .expect("predicted code in range");
                match sentence.act {
                    Some(gold) => {
                        labeled += 1;
                        if gold == pred {
                            agree += 1;
                        }
                    }
                    None => {
                        sentence.act = Some(pred);
                        filled += 1;
                    }
                }
            }
        }
    }
    write_corpus(&convs, out)?;
    if labeled > 0 {
        eprintln!(
            "agreement with existing labels: {agree}/{labeled} ({:.4})",
            agree as f64 / labeled as f64
        );
    }
    eprintln!("filled {filled} missing labels");
    Ok(())
}

fn cmd_verify(suite: Suite) -> Result<(), Failure> {
    let reports: Vec<SuiteReport> = match suite {
        Suite::Grad => vec![grad_suite()?],
        Suite::Crf => vec![crf_suite()?],
        Suite::Schedule => vec![schedule_suite()],
        Suite::All => vec![grad_suite()?, crf_suite()?, schedule_suite()],
    };
    let mut all_pass = true;
    for r in &reports {
        print!("{}", r.render());
        all_pass &= r.passed();
    }
    if all_pass {
        Ok(())
    } else {
        let first = reports
            .iter()
            .filter_map(SuiteReport::first_failure)
            .next()
            .expect("a failing case exists");
        Err(Failure {
            code: EXIT_VERIFY_FAILURE,
            message: format!(
                "first failing case: {} (observed {:.6e}, tolerance {:.1e})",
                first.name, first.observed, first.tolerance
            ),
        })
    }
}

fn cmd_synth(
    profile: Option<&Path>,
    n: usize,
    seed: u64,
    out_source: &Path,
    out_target: &Path,
) -> Result<(), Failure> {
    let profile = match profile {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Failure::usage(format!("cannot read profile {}: {e}", p.display())))?;
            serde_json::from_str::<SynthProfile>(&text)
                .map_err(|e| Failure::usage(format!("invalid profile {}: {e}", p.display())))?
        }
        None => SynthProfile::ta_like(0.5),
    };
    let (source, target) = synth_generate(&profile, n, seed)?;
    write_corpus(&source, out_source)?;
    write_corpus(&target, out_target)?;
    println!(
        "wrote {} source conversations to {} and {} target conversations to {}",
        source.len(),
        out_source.display(),
        target.len(),
        out_target.display()
    );
    Ok(())
}
