//! Build multi-granularity speech-feature segment libraries from
//! grapheme-aligned transcribed speech and synthesize new feature utterances
//! for arbitrary text by unit selection and segment splicing.
//!
//! The pipeline has four stages, each backed by one module:
//!
//! 1. [`corpus_io`] — read/write the binary feature store and parse
//!    grapheme-level alignment files.
//! 2. [`bpe`] — train a byte-pair-encoding model over the transcript
//!    vocabulary and tokenize words into sentence pieces.
//! 3. [`seglib`] — extract word / sentence-piece / grapheme / silence
//!    segment candidates, apply duration filters and per-unit instance
//!    caps, and persist the resulting libraries.
//! 4. [`synth`] — turn text sentences into spliced feature utterances via
//!    the word → sentence-piece → grapheme fallback, with provenance
//!    manifests.
//!
//! [`stats`] computes diagnostic reports (coverage, duration histograms,
//! distinct-unit counts) over libraries and corpora.

pub mod bpe;
pub mod corpus_io;
pub mod mix;
pub mod seglib;
pub mod stats;
pub mod synth;

pub use bpe::{load_bpe, save_bpe, train_bpe, BpeError, BpeModel, PieceSpan};
pub use corpus_io::{
    open_feature_store, parse_alignments, write_alignments, write_feature_store, AlignError,
    AlignmentToken, FeatureMatrix, FeatureStore, FeatureStoreWriter, StoreError,
    UtteranceAlignment, WordSpan,
};
pub use seglib::{
    audit_durations, build_libraries, extract_candidates, load_libraries, save_libraries,
    BuildOptions, BuildSummary, Candidate, DurationBounds, LibraryCaps, LibrarySet, SegmentRef,
    SeglibError, UnitLevel, UnitLibrary, SILENCE_KEY,
};
pub use stats::{
    coverage, duration_histogram, duration_histogram_pre_filter, unit_counts_from_alignments,
    unit_counts_from_libs, CoverageReport, DurationHistogram, ReportFormat, SentenceCoverage,
    UnitCountReport, UnitCounts,
};
pub use synth::{
    normalize_text, plan_units, sample_instances, splice, synthesize_corpus, synthesize_sentence,
    DomainPolicy, ManifestEntry, ManifestSpan, PlannedUnit, RejectReason, ResolutionLevel,
    ResolvedPlan, ResolvedSpan, SpanKind, SpanSource, SynthConfig, SynthError, SynthSummary,
    SynthesisPlan,
};
