//! `segsplice` — build segment libraries from aligned speech features and
//! synthesize feature utterances for text.
//!
//! Exit codes: 0 success, 1 usage error, 2 input/data error, 3 validation
//! violation (`validate` only).

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use segsplice::bpe;
use segsplice::corpus_io::{self, FeatureStore};
use segsplice::seglib::{self, BuildOptions, DurationBounds, LibraryCaps, UnitLevel};
use segsplice::stats::{self, ReportFormat};
use segsplice::synth::{self, DomainPolicy, SynthConfig};

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_VALIDATION: u8 = 3;

#[derive(Parser)]
#[command(
    name = "segsplice",
    version,
    about = "Segment-splicing toolkit: index aligned speech features, train BPE, \
             and synthesize feature utterances for arbitrary text",
    after_help = "File formats (all versioned by their first line):\n  \
        feature store   <base>.idx starting `#SEGSPLICE-FEAT v1 dim=<D>` + raw f32le <base>.dat\n  \
        alignments      `#SEGSPLICE-ALIGN v1`, rows utt<TAB>domain<TAB>word_index<TAB>symbol<TAB>start<TAB>frames\n  \
        BPE model       `#SEGSPLICE-BPE v1`, alphabet line, then left<TAB>right merges\n  \
        libraries       `#SEGSPLICE-LIB v1 level=<L> cap=<C>` per level file\n\n\
        Exit codes: 0 ok, 1 usage, 2 input/data error, 3 validation violation."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a BPE model from a transcript file (one sentence per line).
    TrainBpe(TrainBpeArgs),
    /// Build word/piece/grapheme/silence libraries from alignments.
    BuildLib(BuildLibArgs),
    /// Synthesize feature utterances for a sentence file.
    Synth(SynthArgs),
    /// Coverage, duration and unit-count reports.
    #[command(subcommand)]
    Stats(StatsCommand),
    /// Cross-check store, alignments and libraries for referential integrity.
    Validate(ValidateArgs),
}

#[derive(Args)]
struct TrainBpeArgs {
    /// Transcript text file, one sentence per line.
    #[arg(long)]
    input: PathBuf,
    /// Output model path.
    #[arg(long)]
    output: PathBuf,
    /// Target vocabulary size (alphabet + merges).
    #[arg(long, default_value_t = 4000)]
    vocab_size: usize,
}

#[derive(Args, Clone)]
struct CapArgs {
    /// Max stored instances per word.
    #[arg(long, default_value_t = 500)]
    cap_word: usize,
    /// Max stored instances per sentence piece.
    #[arg(long, default_value_t = 500)]
    cap_piece: usize,
    /// Max stored instances per grapheme.
    #[arg(long, default_value_t = 100)]
    cap_grapheme: usize,
    /// Max stored silence instances.
    #[arg(long, default_value_t = 500)]
    cap_silence: usize,
}

impl CapArgs {
    fn caps(&self) -> Result<LibraryCaps, String> {
        for (name, v) in [
            ("--cap-word", self.cap_word),
            ("--cap-piece", self.cap_piece),
            ("--cap-grapheme", self.cap_grapheme),
            ("--cap-silence", self.cap_silence),
        ] {
            if v == 0 {
                return Err(format!("{name} must be positive"));
            }
        }
        Ok(LibraryCaps {
            word: self.cap_word,
            piece: self.cap_piece,
            grapheme: self.cap_grapheme,
            silence: self.cap_silence,
        })
    }
}

#[derive(Args, Clone)]
struct BoundArgs {
    /// Minimum average frames per grapheme.
    #[arg(long, default_value_t = 2)]
    min_avg: u64,
    /// Maximum average frames per grapheme.
    #[arg(long, default_value_t = 30)]
    max_avg: u64,
    /// Silence spans are trimmed to this many frames.
    #[arg(long, default_value_t = 50)]
    sil_max: u64,
}

impl BoundArgs {
    fn bounds(&self) -> Result<DurationBounds, String> {
        if self.min_avg == 0 || self.max_avg == 0 || self.sil_max == 0 {
            return Err("duration bounds must be positive".into());
        }
        if self.min_avg > self.max_avg {
            return Err("--min-avg must not exceed --max-avg".into());
        }
        Ok(DurationBounds {
            min_avg_frames: self.min_avg,
            max_avg_frames: self.max_avg,
            max_silence_frames: self.sil_max,
        })
    }
}

#[derive(Args)]
struct BuildLibArgs {
    /// Alignment file (`#SEGSPLICE-ALIGN v1`).
    #[arg(long)]
    alignments: PathBuf,
    /// Feature store base path (expects <base>.idx and <base>.dat).
    #[arg(long)]
    store: PathBuf,
    /// Trained BPE model.
    #[arg(long)]
    bpe: PathBuf,
    /// Output library directory.
    #[arg(long)]
    output: PathBuf,
    /// Seed for reservoir sampling.
    #[arg(long, default_value_t = 17)]
    seed: u64,
    /// Only index utterances from these domains (comma-separated).
    #[arg(long, value_delimiter = ',')]
    domains: Vec<String>,
    /// Extraction worker threads (output is identical for any value).
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[command(flatten)]
    caps: CapArgs,
    #[command(flatten)]
    bounds: BoundArgs,
}

#[derive(Args)]
struct SynthArgs {
    /// Library directory produced by build-lib.
    #[arg(long)]
    libs: PathBuf,
    /// Feature store base path the libraries reference.
    #[arg(long)]
    store: PathBuf,
    /// Sentence file, one sentence per line.
    #[arg(long)]
    sentences: PathBuf,
    /// Output base path; writes <base>.{idx,dat,manifest,rejects}.
    #[arg(long)]
    output: PathBuf,
    #[arg(long, default_value_t = 17)]
    seed: u64,
    /// any | fixed=<domain> | round-robin=<d1>,<d2>,...
    #[arg(long, default_value = "any")]
    domain_policy: String,
    /// Worker threads (output is identical for any value).
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Sentences per in-flight batch.
    #[arg(long, default_value_t = 512)]
    batch_size: usize,
}

#[derive(Subcommand)]
enum StatsCommand {
    /// Classify sentences by the weakest unit level they need.
    Coverage(CoverageArgs),
    /// Histogram of average per-grapheme durations in a library.
    Durations(DurationsArgs),
    /// Distinct word/piece/grapheme counts.
    Units(UnitsArgs),
}

#[derive(Args)]
struct CoverageArgs {
    #[arg(long)]
    libs: PathBuf,
    #[arg(long)]
    sentences: PathBuf,
    #[arg(long, default_value = "table")]
    format: String,
}

#[derive(Args)]
struct DurationsArgs {
    /// Post-filter histogram over a library directory.
    #[arg(long, conflicts_with_all = ["alignments", "bpe"])]
    libs: Option<PathBuf>,
    /// Pre-filter histogram straight off an alignment file (requires --bpe).
    #[arg(long, requires = "bpe")]
    alignments: Option<PathBuf>,
    #[arg(long)]
    bpe: Option<PathBuf>,
    /// word | piece
    #[arg(long)]
    level: String,
    /// Bin width in frames.
    #[arg(long, default_value_t = 5)]
    bin: u64,
    #[arg(long, default_value = "table")]
    format: String,
}

#[derive(Args)]
struct UnitsArgs {
    /// Count unit keys stored in a library directory.
    #[arg(long, conflicts_with_all = ["alignments", "bpe"])]
    libs: Option<PathBuf>,
    /// Count units straight from an alignment file (requires --bpe).
    #[arg(long, requires = "bpe")]
    alignments: Option<PathBuf>,
    #[arg(long)]
    bpe: Option<PathBuf>,
    /// One row per domain instead of a single `all` row.
    #[arg(long)]
    per_domain: bool,
    #[arg(long, default_value = "table")]
    format: String,
}

#[derive(Args)]
struct ValidateArgs {
    /// Feature store base path.
    #[arg(long)]
    store: PathBuf,
    /// Alignment file to cross-check against the store.
    #[arg(long)]
    alignments: Option<PathBuf>,
    /// Library directory to cross-check against the store.
    #[arg(long)]
    libs: Option<PathBuf>,
    #[command(flatten)]
    bounds: BoundArgs,
}

/// Errors that decide the process exit code.
enum CliError {
    Usage(String),
    Data(String),
    Validation(Vec<String>),
}

impl CliError {
    fn data(e: impl std::fmt::Display) -> Self {
        CliError::Data(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            eprint!("{e}");
            return ExitCode::from(EXIT_USAGE);
        }
    };
    let result = match cli.command {
        Command::TrainBpe(args) => cmd_train_bpe(args),
        Command::BuildLib(args) => cmd_build_lib(args),
        Command::Synth(args) => cmd_synth(args),
        Command::Stats(args) => cmd_stats(args),
        Command::Validate(args) => cmd_validate(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_USAGE)
        }
        Err(CliError::Data(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_DATA)
        }
        Err(CliError::Validation(violations)) => {
            eprintln!("validation failed with {} violation(s):", violations.len());
            for v in violations {
                eprintln!("  {v}");
            }
            ExitCode::from(EXIT_VALIDATION)
        }
    }
}

fn cmd_train_bpe(args: TrainBpeArgs) -> Result<(), CliError> {
    if args.vocab_size == 0 {
        return Err(CliError::Usage("--vocab-size must be positive".into()));
    }
    let file = File::open(&args.input)
        .map_err(|e| CliError::Data(format!("{}: {e}", args.input.display())))?;
    let mut counts: BTreeMap<String, u64> = BTreeMap::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(CliError::data)?;
        for word in synth::normalize_text(&line).split(' ') {
            if !word.is_empty() {
                *counts.entry(word.to_string()).or_insert(0) += 1;
            }
        }
    }
    let model = bpe::train_bpe(&counts, args.vocab_size).map_err(CliError::data)?;
    bpe::save_bpe(&model, &args.output).map_err(CliError::data)?;
    println!(
        "trained: alphabet {} merges {} vocab {}",
        model.alphabet().len(),
        model.merges().len(),
        model.vocab_size()
    );
    Ok(())
}

fn cmd_build_lib(args: BuildLibArgs) -> Result<(), CliError> {
    let caps = args.caps.caps().map_err(CliError::Usage)?;
    let bounds = args.bounds.bounds().map_err(CliError::Usage)?;
    if args.jobs == 0 {
        return Err(CliError::Usage("--jobs must be positive".into()));
    }
    let store = FeatureStore::open(&args.store).map_err(CliError::data)?;
    let model = bpe::load_bpe(&args.bpe).map_err(CliError::data)?;
    let mut alignments =
        corpus_io::parse_alignments(&args.alignments, Some(&store)).map_err(CliError::data)?;
    if !args.domains.is_empty() {
        alignments.retain(|al| args.domains.contains(&al.domain));
    }
    let opts = BuildOptions {
        caps,
        bounds,
        seed: args.seed,
        jobs: args.jobs,
    };
    let (set, summary) =
        seglib::build_libraries(&alignments, &model, &opts).map_err(CliError::data)?;
    seglib::save_libraries(&set, &args.output).map_err(CliError::data)?;
    print!("{summary}");
    println!("written\t{}", args.output.display());
    Ok(())
}

fn cmd_synth(args: SynthArgs) -> Result<(), CliError> {
    let policy = DomainPolicy::parse(&args.domain_policy).map_err(CliError::Usage)?;
    if args.jobs == 0 || args.batch_size == 0 {
        return Err(CliError::Usage(
            "--jobs and --batch-size must be positive".into(),
        ));
    }
    let store = FeatureStore::open(&args.store).map_err(CliError::data)?;
    let libs = seglib::load_libraries(&args.libs, Some(&store)).map_err(CliError::data)?;
    let sentences = File::open(&args.sentences)
        .map_err(|e| CliError::Data(format!("{}: {e}", args.sentences.display())))?;
    let cfg = SynthConfig {
        seed: args.seed,
        domain_policy: policy,
        jobs: args.jobs,
        batch_size: args.batch_size,
    };
    let summary = synth::synthesize_corpus(
        BufReader::new(sentences),
        &libs,
        &store,
        &cfg,
        &args.output,
    )
    .map_err(CliError::data)?;
    print!("{summary}");
    Ok(())
}

fn parse_format(s: &str) -> Result<ReportFormat, CliError> {
    match s {
        "table" => Ok(ReportFormat::Table),
        "kv" => Ok(ReportFormat::Kv),
        other => Err(CliError::Usage(format!(
            "bad --format `{other}`: expected table or kv"
        ))),
    }
}

fn cmd_stats(cmd: StatsCommand) -> Result<(), CliError> {
    match cmd {
        StatsCommand::Coverage(args) => {
            let format = parse_format(&args.format)?;
            let libs = seglib::load_libraries(&args.libs, None).map_err(CliError::data)?;
            let file = File::open(&args.sentences)
                .map_err(|e| CliError::Data(format!("{}: {e}", args.sentences.display())))?;
            let lines: Vec<String> = BufReader::new(file)
                .lines()
                .collect::<Result<_, _>>()
                .map_err(CliError::data)?;
            let report = stats::coverage(&lines, &libs);
            print!("{}", report.render(format));
        }
        StatsCommand::Durations(args) => {
            let format = parse_format(&args.format)?;
            let level = match args.level.as_str() {
                "word" => UnitLevel::Word,
                "piece" => UnitLevel::Piece,
                other => {
                    return Err(CliError::Usage(format!(
                        "bad --level `{other}`: expected word or piece"
                    )))
                }
            };
            if args.bin == 0 {
                return Err(CliError::Usage("--bin must be >= 1".into()));
            }
            let hist = match (&args.libs, &args.alignments, &args.bpe) {
                (Some(libs), None, None) => {
                    let libs = seglib::load_libraries(libs, None).map_err(CliError::data)?;
                    stats::duration_histogram(&libs, level, args.bin)
                }
                (None, Some(alignments), Some(model)) => {
                    let model = bpe::load_bpe(model).map_err(CliError::data)?;
                    let als =
                        corpus_io::parse_alignments(alignments, None).map_err(CliError::data)?;
                    stats::duration_histogram_pre_filter(&als, &model, level, args.bin)
                }
                _ => {
                    return Err(CliError::Usage(
                        "pass either --libs, or --alignments with --bpe".into(),
                    ))
                }
            };
            print!("{}", hist.render(format));
        }
        StatsCommand::Units(args) => {
            let format = parse_format(&args.format)?;
            let report = match (&args.libs, &args.alignments, &args.bpe) {
                (Some(libs), None, None) => {
                    let libs = seglib::load_libraries(libs, None).map_err(CliError::data)?;
                    stats::unit_counts_from_libs(&libs, args.per_domain)
                }
                (None, Some(alignments), Some(model)) => {
                    let model = bpe::load_bpe(model).map_err(CliError::data)?;
                    let als =
                        corpus_io::parse_alignments(alignments, None).map_err(CliError::data)?;
                    stats::unit_counts_from_alignments(&als, &model, args.per_domain)
                }
                _ => {
                    return Err(CliError::Usage(
                        "pass either --libs, or --alignments with --bpe".into(),
                    ))
                }
            };
            print!("{}", report.render(format));
        }
    }
    Ok(())
}

fn cmd_validate(args: ValidateArgs) -> Result<(), CliError> {
    let bounds = args.bounds.bounds().map_err(CliError::Usage)?;
    let mut violations: Vec<String> = Vec::new();

    // The store's own invariants are checked by open; extent and duplicate
    // violations are integrity findings, not unreadable input.
    let store = match FeatureStore::open(&args.store) {
        Ok(s) => s,
        Err(e @ corpus_io::StoreError::DimMismatch(_))
        | Err(e @ corpus_io::StoreError::DuplicateUttId(_)) => {
            return Err(CliError::Validation(vec![format!("store: {e}")]));
        }
        Err(e) => return Err(CliError::data(e)),
    };

    if let Some(alignments) = &args.alignments {
        match corpus_io::parse_alignments(alignments, Some(&store)) {
            Ok(_) => {}
            Err(e @ corpus_io::AlignError::UnknownUtterance(_))
            | Err(e @ corpus_io::AlignError::TokenOutOfRange { .. })
            | Err(e @ corpus_io::AlignError::Overlap { .. })
            | Err(e @ corpus_io::AlignError::NonContiguousWord { .. }) => {
                violations.push(format!("alignments: {e}"));
            }
            Err(e) => return Err(CliError::data(e)),
        }
    }

    if let Some(libs) = &args.libs {
        match seglib::load_libraries(libs, Some(&store)) {
            Ok(set) => {
                for v in seglib::audit_durations(&set, &bounds) {
                    violations.push(format!("libraries: {v}"));
                }
            }
            Err(seglib::SeglibError::DanglingRefs(offenders)) => {
                violations.extend(offenders.into_iter().map(|o| format!("libraries: {o}")));
            }
            Err(e) => return Err(CliError::data(e)),
        }
    }

    if violations.is_empty() {
        println!("ok");
        Ok(())
    } else {
        Err(CliError::Validation(violations))
    }
}
