//! Batch runner: train a classifier, emit saliency and word-importance
//! reports, or cross-check gradients numerically. Every command is
//! reproducible from (flags, seed, data); reports carry no timestamps.

use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};

use gradlens::attribution::{
    extract_expressions, fd_check_bow, fd_check_sequences, mean_gradient, rank_global_words,
    surrogate_agreement, token_saliency, FdMode, ScoreKind,
};
use gradlens::models::{
    build_bow_mlp, build_text_cnn, evaluate, load_model, save_model, train, BowMlpConfig,
    EncodedDataset, TextCnnConfig, TrainConfig, TrainedModel,
};
use gradlens::report::{
    global_report_to_tsv, local_reports_to_tsv, to_json_pretty, GlobalReport, LocalReport,
    TrainingSummary,
};
use gradlens::text::{
    encode_bow, encode_sequence, generate_synthetic_corpus, load_imdb, tokenize, BowVector,
    LabeledExample, SyntheticSpec, Vocabulary,
};

const ENV_DATA_ROOT: &str = "GRADLENS_DATA";
const SYNTHETIC_SEQ_LEN: usize = 48;

#[derive(Parser)]
#[command(
    name = "gradlens",
    version,
    about = "Gradient-based interpretation of text classifiers"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a classifier and write the model file plus a training summary.
    Train(TrainArgs),
    /// Per-example token saliency and expression windows (text-cnn models).
    AttributeLocal(LocalArgs),
    /// Global word importance and the linear surrogate (bow-mlp models).
    AttributeGlobal(GlobalArgs),
    /// Compare reverse-mode input gradients against finite differences.
    FdCheck(FdArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ArchChoice {
    BowMlp,
    TextCnn,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ScoreKindChoice {
    Logit,
    Probability,
}

impl From<ScoreKindChoice> for ScoreKind {
    fn from(choice: ScoreKindChoice) -> Self {
        match choice {
            ScoreKindChoice::Logit => ScoreKind::Logit,
            ScoreKindChoice::Probability => ScoreKind::Probability,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum FormatChoice {
    Json,
    Tsv,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModeChoice {
    Forward,
    Central,
}

/// Where the examples come from: a dataset directory in the standard
/// `root/{train,test}/{pos,neg}/*.txt` layout, or the built-in synthetic
/// corpus with planted sentiment words.
#[derive(Args)]
struct DataSource {
    /// Dataset root; defaults to $GRADLENS_DATA when set.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Use the seeded synthetic corpus instead of data on disk.
    #[arg(long, default_value_t = false)]
    synthetic: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, value_enum)]
    arch: ArchChoice,
    #[command(flatten)]
    source: DataSource,
    /// Output model path; the vocabulary lands next to it at `<out>.vocab`
    /// and the summary at `<out>.summary.json`.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Defaults to 5 for bow-mlp and 3 for text-cnn.
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    learning_rate: f64,
    /// Token sequence length for text-cnn (default 400, or 48 synthetic).
    #[arg(long)]
    seq_len: Option<usize>,
    /// Vocabulary capacity including pad/unknown (default 5000, or the
    /// synthetic corpus size).
    #[arg(long)]
    vocab_capacity: Option<usize>,
    /// Cap the number of training examples.
    #[arg(long)]
    limit: Option<usize>,
}

#[derive(Args)]
struct LocalArgs {
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    source: DataSource,
    /// Number of test examples to report on.
    #[arg(long, default_value_t = 3)]
    count: usize,
    /// Index of the first test example.
    #[arg(long, default_value_t = 0)]
    offset: usize,
    /// Expression windows per example.
    #[arg(long, default_value_t = 4)]
    top: usize,
    #[arg(long, value_enum, default_value_t = ScoreKindChoice::Logit)]
    score_kind: ScoreKindChoice,
    #[arg(long, value_enum, default_value_t = FormatChoice::Json)]
    format: FormatChoice,
    /// Report file; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 42)]
    seed: u64,
}

#[derive(Args)]
struct GlobalArgs {
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    source: DataSource,
    /// Words per sentiment list.
    #[arg(long, default_value_t = 20)]
    top: usize,
    /// Also report the agreement of sign(<g, x>) with the model.
    #[arg(long, default_value_t = false)]
    surrogate: bool,
    #[arg(long, value_enum, default_value_t = ScoreKindChoice::Logit)]
    score_kind: ScoreKindChoice,
    #[arg(long, value_enum, default_value_t = FormatChoice::Json)]
    format: FormatChoice,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Cap the number of test examples averaged.
    #[arg(long)]
    limit: Option<usize>,
}

#[derive(Args)]
struct FdArgs {
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    source: DataSource,
    /// Test examples to sample.
    #[arg(long, default_value_t = 10)]
    samples: usize,
    /// Coordinates perturbed per example; 0 means all of them.
    #[arg(long, default_value_t = 32)]
    coords: usize,
    #[arg(long, default_value_t = 1e-3)]
    h: f64,
    #[arg(long, value_enum, default_value_t = ModeChoice::Central)]
    mode: ModeChoice,
    /// Largest acceptable max relative error.
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    #[arg(long, value_enum, default_value_t = ScoreKindChoice::Logit)]
    score_kind: ScoreKindChoice,
    #[arg(long, default_value_t = 42)]
    seed: u64,
}

/// Flag combinations clap cannot see, reported with exit code 1.
#[derive(Debug)]
struct UsageError(String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            let code = match err.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = err.print();
            std::process::exit(code);
        }
    };
    match run(cli) {
        Ok(code) => std::process::exit(code),
        Err(err) => {
            eprintln!("error: {err:#}");
            std::process::exit(classify(&err));
        }
    }
}

fn classify(err: &anyhow::Error) -> i32 {
    if err.downcast_ref::<UsageError>().is_some() {
        return 1;
    }
    match err.downcast_ref::<gradlens::Error>() {
        Some(
            gradlens::Error::NonFiniteLoss { .. }
            | gradlens::Error::NonFiniteParameters { .. }
            | gradlens::Error::NonFiniteScore(_),
        ) => 3,
        Some(gradlens::Error::InvalidConfig(_)) => 1,
        _ => 2,
    }
}

fn run(cli: Cli) -> anyhow::Result<i32> {
    match cli.command {
        Command::Train(args) => cmd_train(args),
        Command::AttributeLocal(args) => cmd_attribute_local(args),
        Command::AttributeGlobal(args) => cmd_attribute_global(args),
        Command::FdCheck(args) => cmd_fd_check(args),
    }
}

enum Corpus {
    Imdb {
        train: Vec<LabeledExample>,
        test: Vec<LabeledExample>,
    },
    Synthetic {
        train: Vec<LabeledExample>,
        test: Vec<LabeledExample>,
        word_count: usize,
    },
}

impl Corpus {
    fn test(&self) -> &[LabeledExample] {
        match self {
            Corpus::Imdb { test, .. } | Corpus::Synthetic { test, .. } => test,
        }
    }
}

/// The synthetic corpus variants: many planted words for bag-of-words runs,
/// a single trigger pair for sequence runs.
fn synthetic_spec(seed: u64, for_sequences: bool) -> SyntheticSpec {
    if for_sequences {
        SyntheticSpec {
            seed,
            n_examples: 1500,
            n_planted_positive: 1,
            n_planted_negative: 1,
            vocabulary_size: 50,
            length_range: (15, 40),
        }
    } else {
        SyntheticSpec {
            seed,
            ..SyntheticSpec::default()
        }
    }
}

fn load_corpus(source: &DataSource, seed: u64, for_sequences: bool) -> anyhow::Result<Corpus> {
    if source.synthetic {
        let spec = synthetic_spec(seed, for_sequences);
        let corpus = generate_synthetic_corpus(&spec)?;
        let split = corpus.examples.len() * 2 / 3;
        let (train, test) = corpus.examples.split_at(split);
        return Ok(Corpus::Synthetic {
            train: train.to_vec(),
            test: test.to_vec(),
            word_count: spec.vocabulary_size,
        });
    }
    let root = source
        .data
        .clone()
        .or_else(|| std::env::var_os(ENV_DATA_ROOT).map(PathBuf::from))
        .ok_or_else(|| {
            anyhow!(UsageError(format!(
                "no data source: pass --data <root>, set ${ENV_DATA_ROOT}, or use --synthetic"
            )))
        })?;
    if !root.is_dir() {
        return Err(gradlens::Error::MissingDirectory(root).into());
    }
    let (train, test) = load_imdb(&root)?;
    Ok(Corpus::Imdb { train, test })
}

fn write_or_print(out: Option<&Path>, body: &str) -> anyhow::Result<()> {
    match out {
        Some(path) => std::fs::write(path, body)
            .with_context(|| format!("writing report to {}", path.display())),
        None => {
            print!("{body}");
            Ok(())
        }
    }
}

fn cmd_train(args: TrainArgs) -> anyhow::Result<i32> {
    if let Some(parent) = args.out.parent() {
        if !parent.as_os_str().is_empty() && !parent.is_dir() {
            return Err(anyhow!(UsageError(format!(
                "output directory {} does not exist",
                parent.display()
            ))));
        }
    }
    let for_sequences = args.arch == ArchChoice::TextCnn;
    let corpus = load_corpus(&args.source, args.seed, for_sequences)?;
    let (mut train_set, test_set, default_capacity) = match corpus {
        Corpus::Imdb { train, test } => (train, test, 5000),
        Corpus::Synthetic {
            train,
            test,
            word_count,
        } => (train, test, word_count + 2),
    };
    if let Some(limit) = args.limit {
        train_set.truncate(limit);
    }
    if train_set.is_empty() {
        return Err(gradlens::Error::EmptyCorpus.into());
    }

    let capacity = args.vocab_capacity.unwrap_or(default_capacity);
    let vocab = Vocabulary::build(&train_set, capacity)?;
    let seq_len = args.seq_len.unwrap_or(if args.source.synthetic {
        SYNTHETIC_SEQ_LEN
    } else {
        400
    });

    let (model, train_data, test_data) = match args.arch {
        ArchChoice::BowMlp => {
            let model = build_bow_mlp(BowMlpConfig::new(vocab.len()), vocab.clone(), args.seed)?;
            let train_data = EncodedDataset::from_bow(&train_set, &vocab);
            let test_data = EncodedDataset::from_bow(&test_set, &vocab);
            (model, train_data, test_data)
        }
        ArchChoice::TextCnn => {
            let config = TextCnnConfig {
                sequence_length: seq_len,
                ..TextCnnConfig::new(vocab.len())
            };
            let model = build_text_cnn(config, vocab.clone(), args.seed)?;
            let train_data = EncodedDataset::from_sequences(&train_set, &vocab, seq_len);
            let test_data = EncodedDataset::from_sequences(&test_set, &vocab, seq_len);
            (model, train_data, test_data)
        }
    };

    let base = match args.arch {
        ArchChoice::BowMlp => TrainConfig::for_bow_mlp(),
        ArchChoice::TextCnn => TrainConfig::for_text_cnn(),
    };
    let config = TrainConfig {
        seed: args.seed,
        batch_size: args.batch_size,
        learning_rate: args.learning_rate,
        epochs: args.epochs.unwrap_or(base.epochs),
        ..base
    };

    let mut model = train(model, &train_data, &config)?;
    let test_accuracy = evaluate(&model, &test_data)?;
    let train_accuracy = model
        .metadata
        .as_ref()
        .map(|m| m.train_accuracy)
        .unwrap_or_default();
    if let Some(meta) = model.metadata.as_mut() {
        meta.test_accuracy = Some(test_accuracy);
    }
    save_model(&model, &args.out)?;

    let summary = TrainingSummary {
        architecture: model.arch.name().to_owned(),
        seed: args.seed,
        epochs: config.epochs,
        train_accuracy,
        test_accuracy,
    };
    let body = to_json_pretty(&summary);
    let mut summary_path = args.out.as_os_str().to_owned();
    summary_path.push(".summary.json");
    std::fs::write(PathBuf::from(&summary_path), &body)
        .with_context(|| "writing training summary")?;
    print!("{body}");
    Ok(0)
}

fn resolve_tokens(model: &TrainedModel, seq: &gradlens::text::TokenSequence) -> Vec<String> {
    seq.indices()
        .iter()
        .map(|&i| {
            model
                .vocab
                .word(i as usize)
                .expect("encoded index in vocabulary")
                .to_owned()
        })
        .collect()
}

fn cmd_attribute_local(args: LocalArgs) -> anyhow::Result<i32> {
    let model = load_model(&args.model)?;
    let config = model.cnn_config()?.clone();
    let corpus = load_corpus(&args.source, args.seed, true)?;
    let test = corpus.test();
    if args.offset >= test.len() {
        return Err(anyhow!(UsageError(format!(
            "offset {} beyond the {} test examples",
            args.offset,
            test.len()
        ))));
    }
    let selected = &test[args.offset..(args.offset + args.count).min(test.len())];

    let kind: ScoreKind = args.score_kind.into();
    let mut reports = Vec::with_capacity(selected.len());
    for (i, example) in selected.iter().enumerate() {
        let tokens = tokenize(&example.text);
        let seq = encode_sequence(&tokens, &model.vocab, config.sequence_length);
        let saliency = token_saliency(&model, &seq, kind)?;
        let positional = resolve_tokens(&model, &seq);
        let expressions =
            extract_expressions(&saliency, &positional, config.filter_width, args.top);
        reports.push(LocalReport::new(
            args.offset + i,
            positional[seq.pad_count()..].to_vec(),
            &saliency,
            &expressions,
        ));
    }

    let body = match args.format {
        FormatChoice::Json => to_json_pretty(&reports),
        FormatChoice::Tsv => local_reports_to_tsv(&reports),
    };
    write_or_print(args.out.as_deref(), &body)?;
    Ok(0)
}

fn cmd_attribute_global(args: GlobalArgs) -> anyhow::Result<i32> {
    let model = load_model(&args.model)?;
    model.bow_config()?;
    let corpus = load_corpus(&args.source, args.seed, false)?;
    let mut test = corpus.test().to_vec();
    if let Some(limit) = args.limit {
        test.truncate(limit);
    }
    let bows: Vec<BowVector> = test
        .iter()
        .map(|e| encode_bow(&tokenize(&e.text), &model.vocab))
        .collect();

    let kind: ScoreKind = args.score_kind.into();
    let global = mean_gradient(&model, &bows, kind)?;
    let ranking = rank_global_words(&global, &model.vocab, args.top)?;
    let agreement = if args.surrogate {
        Some(surrogate_agreement(&global, &model, &bows)?)
    } else {
        None
    };

    let report = GlobalReport::new(&global, &ranking, agreement);
    let body = match args.format {
        FormatChoice::Json => to_json_pretty(&report),
        FormatChoice::Tsv => global_report_to_tsv(&report),
    };
    write_or_print(args.out.as_deref(), &body)?;
    Ok(0)
}

fn cmd_fd_check(args: FdArgs) -> anyhow::Result<i32> {
    if args.tol <= 0.0 || args.h <= 0.0 {
        return Err(anyhow!(UsageError(
            "tolerance and step size must be positive".into()
        )));
    }
    let model = load_model(&args.model)?;
    let is_cnn = model.cnn_config().is_ok();
    let corpus = load_corpus(&args.source, args.seed, is_cnn)?;
    let test = corpus.test();
    let take = args.samples.min(test.len());
    if take == 0 {
        return Err(gradlens::Error::EmptyDataset.into());
    }
    let coords = if args.coords == 0 {
        None
    } else {
        Some(args.coords)
    };
    let kind: ScoreKind = args.score_kind.into();
    let mode = match args.mode {
        ModeChoice::Forward => FdMode::Forward,
        ModeChoice::Central => FdMode::Central,
    };

    let report = if is_cnn {
        let config = model.cnn_config()?;
        let sequences: Vec<_> = test[..take]
            .iter()
            .map(|e| encode_sequence(&tokenize(&e.text), &model.vocab, config.sequence_length))
            .collect();
        fd_check_sequences(&model, &sequences, kind, mode, args.h, coords, args.seed)?
    } else {
        let bows: Vec<_> = test[..take]
            .iter()
            .map(|e| encode_bow(&tokenize(&e.text), &model.vocab))
            .collect();
        fd_check_bow(&model, &bows, kind, mode, args.h, coords, args.seed)?
    };

    println!(
        "mode: {} (h = {:e}), score: {}",
        report.mode.as_str(),
        report.h,
        kind.as_str()
    );
    println!(
        "examples: {}, coordinates checked: {}, skipped near kinks/ties: {}",
        report.examples_checked, report.coordinates_checked, report.coordinates_skipped
    );
    println!("max relative error:  {:.3e}", report.max_relative_error);
    println!("mean relative error: {:.3e}", report.mean_relative_error);
    if report.max_relative_error < args.tol {
        println!("PASS (tolerance {:e})", args.tol);
        Ok(0)
    } else {
        println!("FAIL (tolerance {:e})", args.tol);
        Ok(3)
    }
}
