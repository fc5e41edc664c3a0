//! Segment candidate extraction and capped unit libraries.
//!
//! From each utterance alignment we extract candidates at four levels:
//! one WORD candidate per word (spanning its first to last grapheme token),
//! PIECE candidates by BPE-tokenizing the word and mapping each piece onto
//! the grapheme tokens it covers, one GRAPHEME candidate per grapheme
//! token, and one SILENCE candidate per silence token (trimmed to the
//! silence ceiling). Speech candidates whose average per-grapheme duration
//! falls outside the configured bounds are silently dropped; the build
//! summary reports how many.
//!
//! Per unit string, at most `cap` instances are kept, chosen by a seeded
//! uniform reservoir over all surviving candidates in corpus order. Each
//! (level, unit) pair gets its own RNG stream derived from the seed, so the
//! sample for one unit does not depend on what other units were seen.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::bpe::BpeModel;
use crate::corpus_io::{FeatureStore, UtteranceAlignment};
use crate::mix;

pub const LIB_MAGIC: &str = "#SEGSPLICE-LIB v1";
/// Reserved unit key under which all silence instances are stored.
pub const SILENCE_KEY: &str = "<sil>";

#[derive(Debug, Error)]
pub enum SeglibError {
    #[error("empty corpus: no segment candidates were extracted")]
    EmptyCorpus,
    #[error("missing file: {0}")]
    MissingFile(PathBuf),
    #[error("missing BPE model: {0}")]
    MissingBpe(PathBuf),
    #[error("bad library format in {path}: {reason}")]
    BadFormat { path: PathBuf, reason: String },
    #[error("dangling segment refs:\n{}", .0.join("\n"))]
    DanglingRefs(Vec<String>),
    #[error(transparent)]
    Bpe(#[from] crate::bpe::BpeError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Granularity of a unit library.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum UnitLevel {
    Word,
    Piece,
    Grapheme,
    Silence,
}

impl UnitLevel {
    pub const ALL: [UnitLevel; 4] = [
        UnitLevel::Word,
        UnitLevel::Piece,
        UnitLevel::Grapheme,
        UnitLevel::Silence,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            UnitLevel::Word => "WORD",
            UnitLevel::Piece => "PIECE",
            UnitLevel::Grapheme => "GRAPHEME",
            UnitLevel::Silence => "SILENCE",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        match tag {
            "WORD" => Some(UnitLevel::Word),
            "PIECE" => Some(UnitLevel::Piece),
            "GRAPHEME" => Some(UnitLevel::Grapheme),
            "SILENCE" => Some(UnitLevel::Silence),
            _ => None,
        }
    }

    fn index(self) -> usize {
        match self {
            UnitLevel::Word => 0,
            UnitLevel::Piece => 1,
            UnitLevel::Grapheme => 2,
            UnitLevel::Silence => 3,
        }
    }
}

impl std::fmt::Display for UnitLevel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.tag())
    }
}

/// A handle into the feature store: one stored segment instance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentRef {
    pub utt_id: String,
    pub start_frame: u64,
    pub num_frames: u64,
    /// Number of grapheme clusters the span covers; 0 for silence.
    pub grapheme_count: u32,
    pub domain: String,
}

/// Duration filters applied during extraction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DurationBounds {
    /// Minimum average frames per grapheme for speech units.
    pub min_avg_frames: u64,
    /// Maximum average frames per grapheme for speech units.
    pub max_avg_frames: u64,
    /// Silence instances are trimmed to this many frames.
    pub max_silence_frames: u64,
}

impl Default for DurationBounds {
    fn default() -> Self {
        Self {
            min_avg_frames: 2,
            max_avg_frames: 30,
            max_silence_frames: 50,
        }
    }
}

impl DurationBounds {
    /// Average-duration test for a speech span of `num_frames` frames over
    /// `grapheme_count` graphemes, in exact integer arithmetic.
    pub fn speech_ok(&self, num_frames: u64, grapheme_count: u32) -> bool {
        let g = u64::from(grapheme_count);
        g > 0 && num_frames >= self.min_avg_frames * g && num_frames <= self.max_avg_frames * g
    }
}

/// Per-unit instance caps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LibraryCaps {
    pub word: usize,
    pub piece: usize,
    pub grapheme: usize,
    pub silence: usize,
}

impl Default for LibraryCaps {
    fn default() -> Self {
        Self {
            word: 500,
            piece: 500,
            grapheme: 100,
            silence: 500,
        }
    }
}

impl LibraryCaps {
    pub fn for_level(&self, level: UnitLevel) -> usize {
        match level {
            UnitLevel::Word => self.word,
            UnitLevel::Piece => self.piece,
            UnitLevel::Grapheme => self.grapheme,
            UnitLevel::Silence => self.silence,
        }
    }
}

/// One extracted candidate, before capping.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Candidate {
    pub level: UnitLevel,
    pub unit: String,
    pub seg: SegmentRef,
}

/// Extraction tallies per level: candidates considered, dropped by the
/// duration filter, and silence spans trimmed to the ceiling.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ExtractTally {
    pub seen: u64,
    pub filtered: u64,
    pub trimmed: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ExtractOutcome {
    pub candidates: Vec<Candidate>,
    pub tallies: [ExtractTally; 4],
}

/// Extracts all candidates of one utterance. Filtering is silent: a
/// violating candidate bumps the `filtered` tally and is not emitted.
pub fn extract_candidates(
    alignment: &UtteranceAlignment,
    bpe: &BpeModel,
    bounds: &DurationBounds,
) -> ExtractOutcome {
    let mut out = ExtractOutcome::default();
    let mk_ref = |start: u64, num: u64, g: u32| SegmentRef {
        utt_id: alignment.utt_id.clone(),
        start_frame: start,
        num_frames: num,
        grapheme_count: g,
        domain: alignment.domain.clone(),
    };
    let offer = |level: UnitLevel, unit: &str, start: u64, num: u64, g: u32,
                 out: &mut ExtractOutcome| {
        let tally = &mut out.tallies[level.index()];
        tally.seen += 1;
        if bounds.speech_ok(num, g) {
            out.candidates.push(Candidate {
                level,
                unit: unit.to_string(),
                seg: mk_ref(start, num, g),
            });
        } else {
            tally.filtered += 1;
        }
    };

    for word in &alignment.words {
        let toks = alignment.word_tokens(word);
        let first = &toks[0];
        let last = &toks[toks.len() - 1];
        let start = first.start_frame;
        let num = last.end_frame() - start;
        let g = toks.len() as u32;
        offer(UnitLevel::Word, &word.text, start, num, g, &mut out);

        // Piece candidates only when every grapheme is in the BPE alphabet.
        let symbols: Vec<String> = toks.iter().map(|t| t.symbol.clone()).collect();
        if let Ok(spans) = bpe.tokenize_symbols(&word.text, &symbols) {
            for span in spans {
                let pf = &toks[span.grapheme_start];
                let pl = &toks[span.grapheme_start + span.grapheme_len - 1];
                offer(
                    UnitLevel::Piece,
                    &span.piece,
                    pf.start_frame,
                    pl.end_frame() - pf.start_frame,
                    span.grapheme_len as u32,
                    &mut out,
                );
            }
        }

        for tok in toks {
            offer(
                UnitLevel::Grapheme,
                &tok.symbol,
                tok.start_frame,
                tok.num_frames,
                1,
                &mut out,
            );
        }
    }

    for tok in alignment.silence_tokens() {
        let tally = &mut out.tallies[UnitLevel::Silence.index()];
        tally.seen += 1;
        let num = tok.num_frames.min(bounds.max_silence_frames);
        if num < tok.num_frames {
            tally.trimmed += 1;
        }
        out.candidates.push(Candidate {
            level: UnitLevel::Silence,
            unit: SILENCE_KEY.to_string(),
            seg: mk_ref(tok.start_frame, num, 0),
        });
    }

    out
}

/// Capped map from unit string to stored instances at one level.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UnitLibrary {
    level: UnitLevel,
    cap: usize,
    entries: BTreeMap<String, Vec<SegmentRef>>,
}

impl UnitLibrary {
    pub fn new(level: UnitLevel, cap: usize) -> Self {
        Self {
            level,
            cap,
            entries: BTreeMap::new(),
        }
    }

    pub fn level(&self) -> UnitLevel {
        self.level
    }

    pub fn cap(&self) -> usize {
        self.cap
    }

    pub fn contains(&self, unit: &str) -> bool {
        self.entries.contains_key(unit)
    }

    pub fn instances(&self, unit: &str) -> &[SegmentRef] {
        self.entries.get(unit).map_or(&[], |v| v.as_slice())
    }

    /// Distinct unit strings, in sorted order.
    pub fn units(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[SegmentRef])> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    pub fn num_units(&self) -> usize {
        self.entries.len()
    }

    pub fn num_instances(&self) -> usize {
        self.entries.values().map(Vec::len).sum()
    }
}

/// The four libraries built from one corpus with one BPE model.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LibrarySet {
    pub words: UnitLibrary,
    pub pieces: UnitLibrary,
    pub graphemes: UnitLibrary,
    pub silence: UnitLibrary,
    pub bpe: BpeModel,
    domains: BTreeSet<String>,
}

impl LibrarySet {
    pub fn library(&self, level: UnitLevel) -> &UnitLibrary {
        match level {
            UnitLevel::Word => &self.words,
            UnitLevel::Piece => &self.pieces,
            UnitLevel::Grapheme => &self.graphemes,
            UnitLevel::Silence => &self.silence,
        }
    }

    /// Domains present across all stored refs.
    pub fn domains(&self) -> &BTreeSet<String> {
        &self.domains
    }

    fn collect_domains(&mut self) {
        let mut domains = BTreeSet::new();
        for level in UnitLevel::ALL {
            for (_, refs) in self.library(level).iter() {
                for r in refs {
                    domains.insert(r.domain.clone());
                }
            }
        }
        self.domains = domains;
    }
}

/// Per-level build counters: `stored` is what survived capping.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LevelSummary {
    pub seen: u64,
    pub filtered: u64,
    pub trimmed: u64,
    pub stored: u64,
    pub distinct_units: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BuildSummary {
    pub utterances: u64,
    pub levels: [LevelSummary; 4],
}

impl std::fmt::Display for BuildSummary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "utterances\t{}", self.utterances)?;
        writeln!(f, "level\tseen\tfiltered\ttrimmed\tstored\tdistinct")?;
        for level in UnitLevel::ALL {
            let s = &self.levels[level.index()];
            writeln!(
                f,
                "{}\t{}\t{}\t{}\t{}\t{}",
                level.tag(),
                s.seen,
                s.filtered,
                s.trimmed,
                s.stored,
                s.distinct_units
            )?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct BuildOptions {
    pub caps: LibraryCaps,
    pub bounds: DurationBounds,
    pub seed: u64,
    /// Extraction worker threads; results are identical for any value.
    pub jobs: usize,
}

impl Default for BuildOptions {
    fn default() -> Self {
        Self {
            caps: LibraryCaps::default(),
            bounds: DurationBounds::default(),
            seed: 17,
            jobs: 1,
        }
    }
}

/// Uniform reservoir (algorithm R) with its own RNG stream.
struct Reservoir {
    cap: usize,
    seen: u64,
    items: Vec<SegmentRef>,
    rng: ChaCha8Rng,
}

impl Reservoir {
    fn new(cap: usize, rng: ChaCha8Rng) -> Self {
        Self {
            cap,
            seen: 0,
            items: Vec::new(),
            rng,
        }
    }

    fn offer(&mut self, seg: SegmentRef) {
        self.seen += 1;
        if self.items.len() < self.cap {
            self.items.push(seg);
        } else {
            let j = self.rng.gen_range(0..self.seen);
            if (j as usize) < self.cap {
                self.items[j as usize] = seg;
            }
        }
    }
}

/// Builds the four libraries. Candidate extraction runs per utterance (in
/// parallel when `jobs > 1`) and the streams are re-serialized in corpus
/// order before reservoir sampling, so the result is a pure function of
/// (alignments, bpe, options).
pub fn build_libraries(
    alignments: &[UtteranceAlignment],
    bpe: &BpeModel,
    opts: &BuildOptions,
) -> Result<(LibrarySet, BuildSummary), SeglibError> {
    let outcomes: Vec<ExtractOutcome> = if opts.jobs > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(opts.jobs)
            .build()
            .expect("thread pool");
        pool.install(|| {
            alignments
                .par_iter()
                .map(|al| extract_candidates(al, bpe, &opts.bounds))
                .collect()
        })
    } else {
        alignments
            .iter()
            .map(|al| extract_candidates(al, bpe, &opts.bounds))
            .collect()
    };

    let mut summary = BuildSummary {
        utterances: alignments.len() as u64,
        ..Default::default()
    };
    let mut reservoirs: [BTreeMap<String, Reservoir>; 4] = Default::default();
    let mut any_candidate = false;
    for outcome in &outcomes {
        for (i, tally) in outcome.tallies.iter().enumerate() {
            summary.levels[i].seen += tally.seen;
            summary.levels[i].filtered += tally.filtered;
            summary.levels[i].trimmed += tally.trimmed;
        }
        for cand in &outcome.candidates {
            any_candidate = true;
            let cap = opts.caps.for_level(cand.level);
            reservoirs[cand.level.index()]
                .entry(cand.unit.clone())
                .or_insert_with(|| {
                    Reservoir::new(
                        cap,
                        mix::unit_rng(opts.seed, cand.level.index() as u8, &cand.unit),
                    )
                })
                .offer(cand.seg.clone());
        }
    }
    if !any_candidate {
        return Err(SeglibError::EmptyCorpus);
    }

    let mut built: Vec<UnitLibrary> = Vec::with_capacity(4);
    for level in UnitLevel::ALL {
        let mut lib = UnitLibrary::new(level, opts.caps.for_level(level));
        for (unit, res) in std::mem::take(&mut reservoirs[level.index()]) {
            summary.levels[level.index()].stored += res.items.len() as u64;
            summary.levels[level.index()].distinct_units += 1;
            lib.entries.insert(unit, res.items);
        }
        built.push(lib);
    }
    let silence = built.pop().unwrap();
    let graphemes = built.pop().unwrap();
    let pieces = built.pop().unwrap();
    let words = built.pop().unwrap();
    let mut set = LibrarySet {
        words,
        pieces,
        graphemes,
        silence,
        bpe: bpe.clone(),
        domains: BTreeSet::new(),
    };
    set.collect_domains();
    Ok((set, summary))
}

const LIB_FILES: [(&str, UnitLevel); 4] = [
    ("words.lib", UnitLevel::Word),
    ("pieces.lib", UnitLevel::Piece),
    ("graphemes.lib", UnitLevel::Grapheme),
    ("silence.lib", UnitLevel::Silence),
];
const BPE_FILE: &str = "bpe.model";

/// Saves the set into `dir`: one `.lib` file per level plus the BPE model.
pub fn save_libraries(set: &LibrarySet, dir: impl AsRef<Path>) -> Result<(), SeglibError> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    for (name, level) in LIB_FILES {
        let lib = set.library(level);
        let mut w = BufWriter::new(File::create(dir.join(name))?);
        writeln!(w, "{LIB_MAGIC} level={} cap={}", level.tag(), lib.cap)?;
        for (unit, refs) in &lib.entries {
            for r in refs {
                writeln!(
                    w,
                    "{unit}\t{}\t{}\t{}\t{}\t{}",
                    r.utt_id, r.start_frame, r.num_frames, r.grapheme_count, r.domain
                )?;
            }
        }
        w.flush()?;
    }
    crate::bpe::save_bpe(&set.bpe, dir.join(BPE_FILE))?;
    Ok(())
}

/// Loads a set saved by [`save_libraries`], re-validating caps and duration
/// invariants. With a store, every ref must resolve inside its utterance;
/// offenders are listed in the error.
pub fn load_libraries(
    dir: impl AsRef<Path>,
    store: Option<&FeatureStore>,
) -> Result<LibrarySet, SeglibError> {
    let dir = dir.as_ref();
    if !dir.is_dir() {
        return Err(SeglibError::MissingFile(dir.to_path_buf()));
    }
    let bpe_path = dir.join(BPE_FILE);
    if !bpe_path.is_file() {
        return Err(SeglibError::MissingBpe(bpe_path));
    }
    let bpe = crate::bpe::load_bpe(&bpe_path)?;

    let mut libs: Vec<UnitLibrary> = Vec::with_capacity(4);
    for (name, level) in LIB_FILES {
        let path = dir.join(name);
        if !path.is_file() {
            return Err(SeglibError::MissingFile(path));
        }
        libs.push(load_unit_library(&path, level)?);
    }
    let mut it = libs.into_iter();
    let mut set = LibrarySet {
        words: it.next().unwrap(),
        pieces: it.next().unwrap(),
        graphemes: it.next().unwrap(),
        silence: it.next().unwrap(),
        bpe,
        domains: BTreeSet::new(),
    };
    set.collect_domains();

    if let Some(store) = store {
        let mut dangling = Vec::new();
        for level in UnitLevel::ALL {
            for (unit, refs) in set.library(level).iter() {
                for r in refs {
                    match store.num_frames(&r.utt_id) {
                        None => dangling.push(format!(
                            "{} `{unit}`: utterance `{}` not in store",
                            level.tag(),
                            r.utt_id
                        )),
                        Some(extent) if r.start_frame + r.num_frames > extent => {
                            dangling.push(format!(
                                "{} `{unit}`: {}[{}..{}) exceeds {extent} frames",
                                level.tag(),
                                r.utt_id,
                                r.start_frame,
                                r.start_frame + r.num_frames
                            ))
                        }
                        _ => {}
                    }
                }
            }
        }
        if !dangling.is_empty() {
            return Err(SeglibError::DanglingRefs(dangling));
        }
    }
    Ok(set)
}

/// Audits a loaded set against duration bounds (which are build-time
/// configuration and not persisted in the files). Returns one line per
/// violating ref; empty means clean.
pub fn audit_durations(set: &LibrarySet, bounds: &DurationBounds) -> Vec<String> {
    let mut violations = Vec::new();
    for level in [UnitLevel::Word, UnitLevel::Piece, UnitLevel::Grapheme] {
        for (unit, refs) in set.library(level).iter() {
            for r in refs {
                if !bounds.speech_ok(r.num_frames, r.grapheme_count) {
                    violations.push(format!(
                        "{} `{unit}`: {} frames over {} graphemes violates avg bounds [{}, {}]",
                        level.tag(),
                        r.num_frames,
                        r.grapheme_count,
                        bounds.min_avg_frames,
                        bounds.max_avg_frames
                    ));
                }
            }
        }
    }
    for (_, refs) in set.silence.iter() {
        for r in refs {
            if r.num_frames > bounds.max_silence_frames {
                violations.push(format!(
                    "SILENCE: {} frames exceeds ceiling {}",
                    r.num_frames, bounds.max_silence_frames
                ));
            }
        }
    }
    violations
}

fn load_unit_library(path: &Path, expect_level: UnitLevel) -> Result<UnitLibrary, SeglibError> {
    let bad = |reason: String| SeglibError::BadFormat {
        path: path.to_path_buf(),
        reason,
    };
    let reader = BufReader::new(File::open(path)?);
    let mut lines = reader.lines();
    let header = lines.next().transpose()?.unwrap_or_default();
    let rest = header
        .strip_prefix(LIB_MAGIC)
        .ok_or_else(|| bad(format!("expected magic `{LIB_MAGIC}`, found `{header}`")))?;
    let mut level: Option<UnitLevel> = None;
    let mut cap: Option<usize> = None;
    for kv in rest.split_whitespace() {
        if let Some(v) = kv.strip_prefix("level=") {
            level = UnitLevel::from_tag(v);
        } else if let Some(v) = kv.strip_prefix("cap=") {
            cap = v.parse().ok();
        }
    }
    let level = level.ok_or_else(|| bad("missing or unknown level=".into()))?;
    if level != expect_level {
        return Err(bad(format!(
            "file holds level {} but {} was expected",
            level.tag(),
            expect_level.tag()
        )));
    }
    let cap = cap.filter(|&c| c > 0).ok_or_else(|| bad("missing or zero cap=".into()))?;

    let mut lib = UnitLibrary::new(level, cap);
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let line_no = i + 2;
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 6 {
            return Err(bad(format!(
                "line {line_no}: expected 6 columns, got {}",
                cols.len()
            )));
        }
        let unit = cols[0];
        let seg = SegmentRef {
            utt_id: cols[1].to_string(),
            start_frame: cols[2]
                .parse()
                .map_err(|_| bad(format!("line {line_no}: bad start_frame")))?,
            num_frames: cols[3]
                .parse()
                .map_err(|_| bad(format!("line {line_no}: bad num_frames")))?,
            grapheme_count: cols[4]
                .parse()
                .map_err(|_| bad(format!("line {line_no}: bad grapheme_count")))?,
            domain: cols[5].to_string(),
        };
        match level {
            UnitLevel::Silence => {
                if unit != SILENCE_KEY || seg.grapheme_count != 0 {
                    return Err(bad(format!(
                        "line {line_no}: silence rows need unit `{SILENCE_KEY}` and grapheme_count 0"
                    )));
                }
            }
            _ => {
                if seg.grapheme_count == 0 {
                    return Err(bad(format!(
                        "line {line_no}: speech rows need grapheme_count >= 1"
                    )));
                }
            }
        }
        let refs = lib.entries.entry(unit.to_string()).or_default();
        if refs.len() == cap {
            return Err(bad(format!(
                "line {line_no}: unit `{unit}` exceeds cap {cap}"
            )));
        }
        refs.push(seg);
    }
    Ok(lib)
}
