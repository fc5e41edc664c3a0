//! Diagnostic statistics over libraries and corpora: coverage by unit
//! level, average-duration histograms, and distinct-unit counts per domain.
//!
//! Coverage classifies each sentence by the weakest level it needs and is
//! computed through [`crate::synth::plan_units`], so the report can never
//! diverge from what synthesis would actually do.

use std::collections::{BTreeMap, BTreeSet};

use crate::bpe::BpeModel;
use crate::corpus_io::UtteranceAlignment;
use crate::seglib::{LibrarySet, UnitLevel};
use crate::synth::{normalize_text, plan_units, ResolutionLevel, SynthError};

/// Output rendering selected by the CLI.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    /// Aligned-column text for humans.
    Table,
    /// `key<TAB>value` lines for machines.
    Kv,
}

/// How one sentence classifies under coverage.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SentenceCoverage {
    WordOnly,
    NeedsPieces,
    NeedsGraphemes,
    Uncoverable,
}

/// Sentence counts partitioned by the weakest level needed.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CoverageReport {
    pub total: u64,
    pub word_only: u64,
    pub needs_pieces: u64,
    pub needs_graphemes: u64,
    pub uncoverable: u64,
}

impl CoverageReport {
    /// Fraction coverable by whole words alone.
    pub fn word_fraction(&self) -> f64 {
        self.ratio(self.word_only)
    }

    /// Cumulative fraction coverable by words plus sentence pieces.
    pub fn word_piece_fraction(&self) -> f64 {
        self.ratio(self.word_only + self.needs_pieces)
    }

    /// Cumulative fraction coverable at all (words, pieces and graphemes).
    pub fn coverable_fraction(&self) -> f64 {
        self.ratio(self.word_only + self.needs_pieces + self.needs_graphemes)
    }

    pub fn uncoverable_fraction(&self) -> f64 {
        self.ratio(self.uncoverable)
    }

    fn ratio(&self, n: u64) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            n as f64 / self.total as f64
        }
    }

    pub fn render(&self, format: ReportFormat) -> String {
        match format {
            ReportFormat::Table => format!(
                "sentences              {:>10}\n\
                 word-only              {:>10}  ({:.4})\n\
                 + sentence pieces      {:>10}  ({:.4} cumulative)\n\
                 + graphemes            {:>10}  ({:.4} cumulative)\n\
                 uncoverable            {:>10}  ({:.4})\n",
                self.total,
                self.word_only,
                self.word_fraction(),
                self.needs_pieces,
                self.word_piece_fraction(),
                self.needs_graphemes,
                self.coverable_fraction(),
                self.uncoverable,
                self.uncoverable_fraction(),
            ),
            ReportFormat::Kv => format!(
                "total\t{}\nword_only\t{}\nneeds_pieces\t{}\nneeds_graphemes\t{}\nuncoverable\t{}\n\
                 word_fraction\t{:.6}\nword_piece_fraction\t{:.6}\ncoverable_fraction\t{:.6}\n\
                 uncoverable_fraction\t{:.6}\n",
                self.total,
                self.word_only,
                self.needs_pieces,
                self.needs_graphemes,
                self.uncoverable,
                self.word_fraction(),
                self.word_piece_fraction(),
                self.coverable_fraction(),
                self.uncoverable_fraction(),
            ),
        }
    }
}

/// Classifies one already-normalized sentence through the planner.
pub fn classify_sentence(text: &str, libs: &LibrarySet) -> SentenceCoverage {
    match plan_units("coverage", text, libs) {
        Ok(plan) => match plan.resolution.iter().max() {
            None | Some(ResolutionLevel::Word) => SentenceCoverage::WordOnly,
            Some(ResolutionLevel::Piece) => SentenceCoverage::NeedsPieces,
            Some(ResolutionLevel::Grapheme) => SentenceCoverage::NeedsGraphemes,
        },
        Err(SynthError::UncoverableWord { .. }) => SentenceCoverage::Uncoverable,
        Err(e) => unreachable!("plan_units only fails with UncoverableWord: {e}"),
    }
}

/// Classifies every raw sentence line (normalizing first).
pub fn coverage<I, S>(sentences: I, libs: &LibrarySet) -> CoverageReport
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    let mut report = CoverageReport::default();
    for line in sentences {
        let text = normalize_text(line.as_ref());
        report.total += 1;
        match classify_sentence(&text, libs) {
            SentenceCoverage::WordOnly => report.word_only += 1,
            SentenceCoverage::NeedsPieces => report.needs_pieces += 1,
            SentenceCoverage::NeedsGraphemes => report.needs_graphemes += 1,
            SentenceCoverage::Uncoverable => report.uncoverable += 1,
        }
    }
    report
}

/// Histogram of average per-grapheme durations for one unit level.
///
/// Post-filter histograms measure what a library stores and are bounded by
/// the max average duration; pre-filter histograms measure raw candidates
/// straight off the alignments and are unbounded.
#[derive(Debug, Clone, PartialEq)]
pub struct DurationHistogram {
    pub level: UnitLevel,
    pub bin_width: u64,
    /// `bins[i]` counts refs with average in `[i*bin_width, (i+1)*bin_width)`.
    pub bins: Vec<u64>,
    pub total: u64,
    pub pre_filter: bool,
}

impl DurationHistogram {
    fn mode(&self) -> &'static str {
        if self.pre_filter {
            "pre-filter"
        } else {
            "post-filter"
        }
    }

    pub fn render(&self, format: ReportFormat) -> String {
        let mut out = String::new();
        match format {
            ReportFormat::Table => {
                out.push_str(&format!(
                    "level {}  bin width {} frames  {} refs  ({})\n",
                    self.level.tag(),
                    self.bin_width,
                    self.total,
                    self.mode()
                ));
                for (i, &n) in self.bins.iter().enumerate() {
                    let lo = i as u64 * self.bin_width;
                    let hi = lo + self.bin_width;
                    out.push_str(&format!("[{lo:>4},{hi:>4})  {n:>10}\n"));
                }
            }
            ReportFormat::Kv => {
                out.push_str(&format!("level\t{}\n", self.level.tag()));
                out.push_str(&format!("mode\t{}\n", self.mode()));
                out.push_str(&format!("bin_width\t{}\n", self.bin_width));
                out.push_str(&format!("total\t{}\n", self.total));
                for (i, &n) in self.bins.iter().enumerate() {
                    out.push_str(&format!("bin\t{}\t{n}\n", i as u64 * self.bin_width));
                }
            }
        }
        out
    }
}

struct HistogramAccum {
    bins: Vec<u64>,
    total: u64,
    bin_width: u64,
}

impl HistogramAccum {
    fn new(bin_width: u64) -> Self {
        assert!(bin_width >= 1, "bin width must be >= 1");
        Self {
            bins: Vec::new(),
            total: 0,
            bin_width,
        }
    }

    fn add(&mut self, num_frames: u64, grapheme_count: u32) {
        let avg = num_frames as f64 / f64::from(grapheme_count);
        let idx = (avg / self.bin_width as f64).floor() as usize;
        if self.bins.len() <= idx {
            self.bins.resize(idx + 1, 0);
        }
        self.bins[idx] += 1;
        self.total += 1;
    }
}

/// Bins `num_frames / grapheme_count` for every stored ref at `level`
/// (WORD or PIECE per the duration diagnostics; GRAPHEME also works).
pub fn duration_histogram(
    libs: &LibrarySet,
    level: UnitLevel,
    bin_width: u64,
) -> DurationHistogram {
    assert!(
        level != UnitLevel::Silence,
        "silence has no per-grapheme duration"
    );
    let mut acc = HistogramAccum::new(bin_width);
    for (_, refs) in libs.library(level).iter() {
        for r in refs {
            acc.add(r.num_frames, r.grapheme_count);
        }
    }
    DurationHistogram {
        level,
        bin_width,
        bins: acc.bins,
        total: acc.total,
        pre_filter: false,
    }
}

/// Pre-filter histogram over raw candidates straight off the alignments:
/// every word (or piece) span is measured, with no duration bound applied.
pub fn duration_histogram_pre_filter(
    alignments: &[UtteranceAlignment],
    bpe: &BpeModel,
    level: UnitLevel,
    bin_width: u64,
) -> DurationHistogram {
    assert!(
        level == UnitLevel::Word || level == UnitLevel::Piece,
        "pre-filter histograms cover words and pieces"
    );
    let mut acc = HistogramAccum::new(bin_width);
    for al in alignments {
        for word in &al.words {
            let toks = al.word_tokens(word);
            match level {
                UnitLevel::Word => {
                    let start = toks[0].start_frame;
                    let num = toks[toks.len() - 1].end_frame() - start;
                    acc.add(num, toks.len() as u32);
                }
                UnitLevel::Piece => {
                    let symbols: Vec<String> = toks.iter().map(|t| t.symbol.clone()).collect();
                    if let Ok(spans) = bpe.tokenize_symbols(&word.text, &symbols) {
                        for span in spans {
                            let first = &toks[span.grapheme_start];
                            let last = &toks[span.grapheme_start + span.grapheme_len - 1];
                            acc.add(
                                last.end_frame() - first.start_frame,
                                span.grapheme_len as u32,
                            );
                        }
                    }
                }
                _ => unreachable!(),
            }
        }
    }
    DurationHistogram {
        level,
        bin_width,
        bins: acc.bins,
        total: acc.total,
        pre_filter: true,
    }
}

/// Distinct unit counts at each level.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct UnitCounts {
    pub words: u64,
    pub pieces: u64,
    pub graphemes: u64,
}

/// Distinct-unit counts, keyed by domain (or a single `all` row).
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct UnitCountReport {
    pub rows: BTreeMap<String, UnitCounts>,
}

impl UnitCountReport {
    pub fn render(&self, format: ReportFormat) -> String {
        let mut out = String::new();
        match format {
            ReportFormat::Table => {
                let width = self
                    .rows
                    .keys()
                    .map(|k| k.len())
                    .max()
                    .unwrap_or(6)
                    .max(6);
                out.push_str(&format!(
                    "{:width$}  {:>10}  {:>14}  {:>10}\n",
                    "corpus", "word", "sentence piece", "grapheme"
                ));
                for (domain, c) in &self.rows {
                    out.push_str(&format!(
                        "{domain:width$}  {:>10}  {:>14}  {:>10}\n",
                        c.words, c.pieces, c.graphemes
                    ));
                }
            }
            ReportFormat::Kv => {
                for (domain, c) in &self.rows {
                    out.push_str(&format!(
                        "units\t{domain}\t{}\t{}\t{}\n",
                        c.words, c.pieces, c.graphemes
                    ));
                }
            }
        }
        out
    }
}

/// Counts distinct unit keys per domain from the stored libraries. A unit
/// counts toward every domain it has at least one instance in.
pub fn unit_counts_from_libs(libs: &LibrarySet, per_domain: bool) -> UnitCountReport {
    let mut sets: BTreeMap<String, [BTreeSet<&str>; 3]> = BTreeMap::new();
    let levels = [UnitLevel::Word, UnitLevel::Piece, UnitLevel::Grapheme];
    for (i, level) in levels.into_iter().enumerate() {
        for (unit, refs) in libs.library(level).iter() {
            for r in refs {
                let key = if per_domain { r.domain.clone() } else { "all".to_string() };
                sets.entry(key).or_default()[i].insert(unit);
            }
        }
    }
    finish_counts(sets)
}

/// Counts distinct units per domain directly from alignments: every word
/// type, its BPE pieces (for fully in-alphabet words), and every grapheme
/// symbol.
pub fn unit_counts_from_alignments(
    alignments: &[UtteranceAlignment],
    bpe: &BpeModel,
    per_domain: bool,
) -> UnitCountReport {
    let mut sets: BTreeMap<String, [BTreeSet<String>; 3]> = BTreeMap::new();
    for al in alignments {
        let key = if per_domain { al.domain.clone() } else { "all".to_string() };
        let entry = sets.entry(key).or_default();
        for word in &al.words {
            entry[0].insert(word.text.clone());
            if let Ok(pieces) = bpe.tokenize(&word.text) {
                for p in pieces {
                    entry[1].insert(p);
                }
            }
            for tok in al.word_tokens(word) {
                entry[2].insert(tok.symbol.clone());
            }
        }
    }
    let mut report = UnitCountReport::default();
    for (domain, [w, p, g]) in sets {
        report.rows.insert(
            domain,
            UnitCounts {
                words: w.len() as u64,
                pieces: p.len() as u64,
                graphemes: g.len() as u64,
            },
        );
    }
    report
}

fn finish_counts(sets: BTreeMap<String, [BTreeSet<&str>; 3]>) -> UnitCountReport {
    let mut report = UnitCountReport::default();
    for (domain, [w, p, g]) in sets {
        report.rows.insert(
            domain,
            UnitCounts {
                words: w.len() as u64,
                pieces: p.len() as u64,
                graphemes: g.len() as u64,
            },
        );
    }
    report
}
