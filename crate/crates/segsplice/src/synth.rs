//! Text-to-feature synthesis by unit selection and segment splicing.
//!
//! Each sentence is planned word by word, strictly in priority order:
//! the whole word if the word library has it, else its BPE pieces if every
//! piece is in the piece library, else its graphemes. One instance per unit
//! is then drawn uniformly from the (optionally domain-filtered) instance
//! list, a silence instance is drawn between consecutive words, and the
//! referenced frame slices are concatenated into the output utterance.
//! A manifest records every source span.
//!
//! All draws come from a per-sentence RNG stream derived from
//! (seed, sentence_index) — see [`crate::mix`] — so a corpus run is a pure
//! function of its inputs and parallelism degree cannot change the output.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::corpus_io::{FeatureMatrix, FeatureStore, FeatureStoreWriter, StoreError};
use crate::mix;
use crate::seglib::{LibrarySet, SegmentRef, UnitLevel, SILENCE_KEY};

/// Frames of zeros inserted when no silence instance is available.
pub const ZERO_FILL_FRAMES: u64 = 10;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("word `{word}` is uncoverable; missing graphemes: {}", .missing.join(" "))]
    UncoverableWord { word: String, missing: Vec<String> },
    #[error("domain `{domain}` exhausted for units: {}", .units.join(" "))]
    DomainExhausted { domain: String, units: Vec<String> },
    #[error("dangling ref: {0}")]
    DanglingRef(StoreError),
    #[error("bad manifest line: {0}")]
    BadManifest(String),
    #[error("unknown domain `{domain}`: library holds {}", .known.join(" "))]
    UnknownDomain { domain: String, known: Vec<String> },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("store error: {0}")]
    Store(StoreError),
}

/// Level at which one word of a sentence was resolved.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum ResolutionLevel {
    Word,
    Piece,
    Grapheme,
}

impl ResolutionLevel {
    pub fn unit_level(self) -> UnitLevel {
        match self {
            ResolutionLevel::Word => UnitLevel::Word,
            ResolutionLevel::Piece => UnitLevel::Piece,
            ResolutionLevel::Grapheme => UnitLevel::Grapheme,
        }
    }
}

/// One planned unit: a library key plus the word ordinal it belongs to.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlannedUnit {
    pub level: ResolutionLevel,
    pub unit: String,
    pub word_ordinal: usize,
}

/// Resolved per-word unit sequence for one sentence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SynthesisPlan {
    pub sentence_id: String,
    pub text: String,
    pub units: Vec<PlannedUnit>,
    /// Per word ordinal, the level that covered it.
    pub resolution: Vec<ResolutionLevel>,
}

/// Where the frames of one output span come from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SpanSource {
    Segment(SegmentRef),
    /// No silence instance was available; a zero block is inserted and the
    /// manifest flagged.
    ZeroFill { num_frames: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpanKind {
    Unit,
    Silence,
}

impl SpanKind {
    pub fn tag(self) -> &'static str {
        match self {
            SpanKind::Unit => "UNIT",
            SpanKind::Silence => "SIL",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResolvedSpan {
    pub kind: SpanKind,
    pub unit: String,
    /// Word the span belongs to; silence belongs to no word.
    pub word_ordinal: Option<usize>,
    pub source: SpanSource,
}

/// A plan with concrete instances chosen for every unit and silence slot.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResolvedPlan {
    pub plan: SynthesisPlan,
    pub spans: Vec<ResolvedSpan>,
}

/// One line of the output manifest.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestSpan {
    pub kind: SpanKind,
    pub unit: String,
    /// `-` for zero-fill spans.
    pub src_utt: String,
    pub src_start: u64,
    pub len: u64,
}

/// Provenance record of one synthesized utterance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub sentence_id: String,
    pub text: String,
    /// Domain constraint the sentence was generated under, or `any`.
    pub domain: String,
    pub total_frames: u64,
    pub zero_fill_spans: u32,
    pub spans: Vec<ManifestSpan>,
}

impl ManifestEntry {
    /// Serializes to one `key=value` line, tab-separated. Spans are
    /// `KIND:unit:src_utt:start:len` joined by `;`.
    pub fn to_line(&self) -> String {
        let spans: Vec<String> = self
            .spans
            .iter()
            .map(|s| {
                format!(
                    "{}:{}:{}:{}:{}",
                    s.kind.tag(),
                    s.unit,
                    s.src_utt,
                    s.src_start,
                    s.len
                )
            })
            .collect();
        format!(
            "id={}\ttext={}\tdomain={}\tframes={}\tzerofill={}\tspans={}",
            self.sentence_id,
            self.text,
            self.domain,
            self.total_frames,
            self.zero_fill_spans,
            spans.join(";")
        )
    }

    pub fn parse_line(line: &str) -> Result<Self, SynthError> {
        let bad = || SynthError::BadManifest(line.to_string());
        let mut id = None;
        let mut text = None;
        let mut domain = None;
        let mut frames = None;
        let mut zerofill = None;
        let mut spans = None;
        for field in line.split('\t') {
            let (k, v) = field.split_once('=').ok_or_else(bad)?;
            match k {
                "id" => id = Some(v.to_string()),
                "text" => text = Some(v.to_string()),
                "domain" => domain = Some(v.to_string()),
                "frames" => frames = Some(v.parse().map_err(|_| bad())?),
                "zerofill" => zerofill = Some(v.parse().map_err(|_| bad())?),
                "spans" => spans = Some(v.to_string()),
                _ => return Err(bad()),
            }
        }
        let spans_str = spans.ok_or_else(bad)?;
        let mut parsed = Vec::new();
        if !spans_str.is_empty() {
            for s in spans_str.split(';') {
                let cols: Vec<&str> = s.split(':').collect();
                if cols.len() != 5 {
                    return Err(bad());
                }
                let kind = match cols[0] {
                    "UNIT" => SpanKind::Unit,
                    "SIL" => SpanKind::Silence,
                    _ => return Err(bad()),
                };
                parsed.push(ManifestSpan {
                    kind,
                    unit: cols[1].to_string(),
                    src_utt: cols[2].to_string(),
                    src_start: cols[3].parse().map_err(|_| bad())?,
                    len: cols[4].parse().map_err(|_| bad())?,
                });
            }
        }
        Ok(Self {
            sentence_id: id.ok_or_else(bad)?,
            text: text.ok_or_else(bad)?,
            domain: domain.ok_or_else(bad)?,
            total_frames: frames.ok_or_else(bad)?,
            zero_fill_spans: zerofill.ok_or_else(bad)?,
            spans: parsed,
        })
    }
}

/// Lowercases, strips characters outside the keep-set (alphabetic, numeric,
/// ASCII apostrophe) and collapses whitespace runs to single spaces.
pub fn normalize_text(raw: &str) -> String {
    let mut out = String::with_capacity(raw.len());
    let mut pending_space = false;
    for ch in raw.chars() {
        if ch.is_whitespace() {
            if !out.is_empty() {
                pending_space = true;
            }
            continue;
        }
        if !(ch.is_alphabetic() || ch.is_numeric() || ch == '\'') {
            continue;
        }
        if pending_space {
            out.push(' ');
            pending_space = false;
        }
        for lc in ch.to_lowercase() {
            out.push(lc);
        }
    }
    out
}

/// Plans one normalized sentence against the libraries, word by word in
/// strict priority order. An uncoverable word aborts the sentence.
pub fn plan_units(
    sentence_id: &str,
    text: &str,
    libs: &LibrarySet,
) -> Result<SynthesisPlan, SynthError> {
    let mut units = Vec::new();
    let mut resolution = Vec::new();
    for (ordinal, word) in text.split(' ').filter(|w| !w.is_empty()).enumerate() {
        if libs.words.contains(word) {
            units.push(PlannedUnit {
                level: ResolutionLevel::Word,
                unit: word.to_string(),
                word_ordinal: ordinal,
            });
            resolution.push(ResolutionLevel::Word);
            continue;
        }
        if let Ok(pieces) = libs.bpe.tokenize(word) {
            if pieces.iter().all(|p| libs.pieces.contains(p)) {
                for p in pieces {
                    units.push(PlannedUnit {
                        level: ResolutionLevel::Piece,
                        unit: p,
                        word_ordinal: ordinal,
                    });
                }
                resolution.push(ResolutionLevel::Piece);
                continue;
            }
        }
        let graphemes = crate::bpe::graphemes(word);
        if graphemes.iter().all(|g| libs.graphemes.contains(g)) {
            for g in graphemes {
                units.push(PlannedUnit {
                    level: ResolutionLevel::Grapheme,
                    unit: g,
                    word_ordinal: ordinal,
                });
            }
            resolution.push(ResolutionLevel::Grapheme);
            continue;
        }
        let missing: Vec<String> = graphemes
            .into_iter()
            .filter(|g| !libs.graphemes.contains(g))
            .collect();
        return Err(SynthError::UncoverableWord {
            word: word.to_string(),
            missing,
        });
    }
    Ok(SynthesisPlan {
        sentence_id: sentence_id.to_string(),
        text: text.to_string(),
        units,
        resolution,
    })
}

fn filtered<'a>(refs: &'a [SegmentRef], domain: Option<&str>) -> Vec<&'a SegmentRef> {
    match domain {
        None => refs.iter().collect(),
        Some(d) => refs.iter().filter(|r| r.domain == d).collect(),
    }
}

/// Draws one instance per planned unit and one silence instance between
/// consecutive words. Under a domain constraint every draw is restricted to
/// that domain; if any planned unit then has no instance the whole sentence
/// fails with `DomainExhausted` before anything is drawn.
pub fn sample_instances(
    plan: &SynthesisPlan,
    libs: &LibrarySet,
    domain: Option<&str>,
    rng: &mut ChaCha8Rng,
) -> Result<ResolvedPlan, SynthError> {
    if let Some(d) = domain {
        let mut exhausted = Vec::new();
        for u in &plan.units {
            let refs = libs.library(u.level.unit_level()).instances(&u.unit);
            if !refs.iter().any(|r| r.domain == d) {
                exhausted.push(format!("{}:{}", u.level.unit_level().tag(), u.unit));
            }
        }
        if !exhausted.is_empty() {
            exhausted.dedup();
            return Err(SynthError::DomainExhausted {
                domain: d.to_string(),
                units: exhausted,
            });
        }
    }

    let silence_pool = filtered(libs.silence.instances(SILENCE_KEY), domain);
    let mut spans = Vec::new();
    let mut prev_word: Option<usize> = None;
    for u in &plan.units {
        if prev_word.is_some() && prev_word != Some(u.word_ordinal) {
            // Word boundary: insert one sampled silence span.
            if silence_pool.is_empty() {
                spans.push(ResolvedSpan {
                    kind: SpanKind::Silence,
                    unit: SILENCE_KEY.to_string(),
                    word_ordinal: None,
                    source: SpanSource::ZeroFill {
                        num_frames: ZERO_FILL_FRAMES,
                    },
                });
            } else {
                let pick = silence_pool[rng.gen_range(0..silence_pool.len())];
                spans.push(ResolvedSpan {
                    kind: SpanKind::Silence,
                    unit: SILENCE_KEY.to_string(),
                    word_ordinal: None,
                    source: SpanSource::Segment(pick.clone()),
                });
            }
        }
        prev_word = Some(u.word_ordinal);

        let pool = filtered(libs.library(u.level.unit_level()).instances(&u.unit), domain);
        debug_assert!(!pool.is_empty(), "planned unit with empty pool");
        let pick = pool[rng.gen_range(0..pool.len())];
        spans.push(ResolvedSpan {
            kind: SpanKind::Unit,
            unit: u.unit.clone(),
            word_ordinal: Some(u.word_ordinal),
            source: SpanSource::Segment(pick.clone()),
        });
    }
    Ok(ResolvedPlan {
        plan: plan.clone(),
        spans,
    })
}

/// Concatenates the referenced frame slices in plan order. The output dim is
/// the store's; the manifest totals are consistent by construction.
pub fn splice(
    resolved: &ResolvedPlan,
    store: &FeatureStore,
    domain_label: &str,
) -> Result<(FeatureMatrix, ManifestEntry), SynthError> {
    let mut out = FeatureMatrix::new(store.dim());
    let mut spans = Vec::with_capacity(resolved.spans.len());
    let mut zero_fill_spans = 0u32;
    for span in &resolved.spans {
        match &span.source {
            SpanSource::Segment(seg) => {
                let m = store
                    .slice(&seg.utt_id, seg.start_frame, seg.num_frames)
                    .map_err(SynthError::DanglingRef)?;
                out.append(&m);
                spans.push(ManifestSpan {
                    kind: span.kind,
                    unit: span.unit.clone(),
                    src_utt: seg.utt_id.clone(),
                    src_start: seg.start_frame,
                    len: seg.num_frames,
                });
            }
            SpanSource::ZeroFill { num_frames } => {
                out.append(&FeatureMatrix::zeros(store.dim(), *num_frames as usize));
                zero_fill_spans += 1;
                spans.push(ManifestSpan {
                    kind: span.kind,
                    unit: span.unit.clone(),
                    src_utt: "-".to_string(),
                    src_start: 0,
                    len: *num_frames,
                });
            }
        }
    }
    let entry = ManifestEntry {
        sentence_id: resolved.plan.sentence_id.clone(),
        text: resolved.plan.text.clone(),
        domain: domain_label.to_string(),
        total_frames: out.num_frames() as u64,
        zero_fill_spans,
        spans,
    };
    Ok((out, entry))
}

/// Domain constraint policy for a corpus run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DomainPolicy {
    /// No constraint; draws may mix domains freely.
    Any,
    /// Every draw restricted to one domain.
    Fixed(String),
    /// Sentence `i` is generated under `domains[i % domains.len()]`.
    RoundRobin(Vec<String>),
}

impl DomainPolicy {
    fn domain_for(&self, sentence_index: u64) -> Option<&str> {
        match self {
            DomainPolicy::Any => None,
            DomainPolicy::Fixed(d) => Some(d),
            DomainPolicy::RoundRobin(ds) => {
                Some(ds[(sentence_index % ds.len() as u64) as usize].as_str())
            }
        }
    }

    /// Parses `any`, `fixed=<domain>` or `round-robin=<d1>,<d2>,...`.
    pub fn parse(s: &str) -> Result<Self, String> {
        if s == "any" {
            return Ok(DomainPolicy::Any);
        }
        if let Some(d) = s.strip_prefix("fixed=") {
            if d.is_empty() {
                return Err("fixed= needs a domain".into());
            }
            return Ok(DomainPolicy::Fixed(d.to_string()));
        }
        if let Some(list) = s.strip_prefix("round-robin=") {
            let ds: Vec<String> = list
                .split(',')
                .filter(|d| !d.is_empty())
                .map(|d| d.to_string())
                .collect();
            if ds.is_empty() {
                return Err("round-robin= needs at least one domain".into());
            }
            return Ok(DomainPolicy::RoundRobin(ds));
        }
        Err(format!(
            "bad domain policy `{s}`: expected any, fixed=<domain> or round-robin=<d1>,<d2>,..."
        ))
    }
}

#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub seed: u64,
    pub domain_policy: DomainPolicy,
    /// Worker threads; output is identical for any value.
    pub jobs: usize,
    /// Sentences processed per in-flight batch.
    pub batch_size: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 17,
            domain_policy: DomainPolicy::Any,
            jobs: 1,
            batch_size: 512,
        }
    }
}

/// Why one sentence was rejected; recorded in the rejects file.
#[derive(Debug, Clone)]
pub enum RejectReason {
    UncoverableWord { word: String, missing: Vec<String> },
    DomainExhausted { domain: String, units: Vec<String> },
    DanglingRef(String),
}

impl RejectReason {
    pub fn code(&self) -> &'static str {
        match self {
            RejectReason::UncoverableWord { .. } => "uncoverable-word",
            RejectReason::DomainExhausted { .. } => "domain-exhausted",
            RejectReason::DanglingRef(_) => "dangling-ref",
        }
    }

    pub fn detail(&self) -> String {
        match self {
            RejectReason::UncoverableWord { word, missing } => {
                format!("word `{word}` missing graphemes: {}", missing.join(" "))
            }
            RejectReason::DomainExhausted { domain, units } => {
                format!("domain `{domain}` has no instance for: {}", units.join(" "))
            }
            RejectReason::DanglingRef(d) => d.clone(),
        }
    }
}

/// Corpus run totals.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SynthSummary {
    pub sentences_in: u64,
    pub synthesized: u64,
    pub rejected: u64,
    pub total_frames: u64,
    pub zero_fill_spans: u64,
    /// Words realized at each level across all synthesized sentences.
    pub words_word_level: u64,
    pub words_piece_level: u64,
    pub words_grapheme_level: u64,
    /// Synthesized sentences per domain label (`any` under no constraint).
    pub sentences_per_domain: BTreeMap<String, u64>,
    pub rejects_per_reason: BTreeMap<String, u64>,
}

impl std::fmt::Display for SynthSummary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "sentences\t{}", self.sentences_in)?;
        writeln!(f, "synthesized\t{}", self.synthesized)?;
        writeln!(f, "rejected\t{}", self.rejected)?;
        writeln!(f, "total_frames\t{}", self.total_frames)?;
        writeln!(f, "zero_fill_spans\t{}", self.zero_fill_spans)?;
        writeln!(
            f,
            "words_by_level\tword={} piece={} grapheme={}",
            self.words_word_level, self.words_piece_level, self.words_grapheme_level
        )?;
        for (d, n) in &self.sentences_per_domain {
            writeln!(f, "domain\t{d}\t{n}")?;
        }
        for (r, n) in &self.rejects_per_reason {
            writeln!(f, "rejects\t{r}\t{n}")?;
        }
        Ok(())
    }
}

/// End-to-end synthesis of one sentence (by 0-based corpus index).
/// The RNG stream depends only on (seed, index), never on other sentences.
pub fn synthesize_sentence(
    index: u64,
    raw_line: &str,
    libs: &LibrarySet,
    store: &FeatureStore,
    cfg: &SynthConfig,
) -> Result<(FeatureMatrix, ManifestEntry, Vec<ResolutionLevel>), RejectReason> {
    let text = normalize_text(raw_line);
    let id = format!("s{index:06}");
    let domain = cfg.domain_policy.domain_for(index);
    let label = domain.unwrap_or("any");
    let plan = plan_units(&id, &text, libs).map_err(|e| match e {
        SynthError::UncoverableWord { word, missing } => {
            RejectReason::UncoverableWord { word, missing }
        }
        other => RejectReason::DanglingRef(other.to_string()),
    })?;
    let mut rng = mix::sentence_rng(cfg.seed, index);
    let resolved = sample_instances(&plan, libs, domain, &mut rng).map_err(|e| match e {
        SynthError::DomainExhausted { domain, units } => {
            RejectReason::DomainExhausted { domain, units }
        }
        other => RejectReason::DanglingRef(other.to_string()),
    })?;
    let (matrix, entry) =
        splice(&resolved, store, label).map_err(|e| RejectReason::DanglingRef(e.to_string()))?;
    Ok((matrix, entry, resolved.plan.resolution))
}

/// Synthesizes every input line into `<out_base>.{idx,dat,manifest,rejects}`.
/// Per-sentence failures go to the rejects file and do not abort the run.
pub fn synthesize_corpus<R: BufRead>(
    sentences: R,
    libs: &LibrarySet,
    store: &FeatureStore,
    cfg: &SynthConfig,
    out_base: impl AsRef<Path>,
) -> Result<SynthSummary, SynthError> {
    let out_base = out_base.as_ref();
    if let DomainPolicy::Fixed(d) = &cfg.domain_policy {
        if !libs.domains().contains(d) {
            return Err(SynthError::UnknownDomain {
                domain: d.clone(),
                known: libs.domains().iter().cloned().collect(),
            });
        }
    }
    if let DomainPolicy::RoundRobin(ds) = &cfg.domain_policy {
        for d in ds {
            if !libs.domains().contains(d) {
                return Err(SynthError::UnknownDomain {
                    domain: d.clone(),
                    known: libs.domains().iter().cloned().collect(),
                });
            }
        }
    }

    let mut writer = FeatureStoreWriter::create(out_base, store.dim()).map_err(map_store_err)?;
    let mut manifest = BufWriter::new(File::create(with_ext(out_base, "manifest"))?);
    let mut rejects = BufWriter::new(File::create(with_ext(out_base, "rejects"))?);

    let pool = (cfg.jobs > 1).then(|| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.jobs)
            .build()
            .expect("thread pool")
    });

    let mut summary = SynthSummary::default();
    let batch_size = cfg.batch_size.max(1);
    let mut lines = sentences.lines();
    let mut index: u64 = 0;
    loop {
        let mut batch: Vec<(u64, String)> = Vec::with_capacity(batch_size);
        for line in lines.by_ref().take(batch_size) {
            batch.push((index, line?));
            index += 1;
        }
        if batch.is_empty() {
            break;
        }
        type SentenceOut = Result<(FeatureMatrix, ManifestEntry, Vec<ResolutionLevel>), RejectReason>;
        let run = |(i, line): &(u64, String)| -> SentenceOut {
            synthesize_sentence(*i, line, libs, store, cfg)
        };
        let results: Vec<SentenceOut> = match &pool {
            Some(pool) => pool.install(|| batch.par_iter().map(run).collect()),
            None => batch.iter().map(run).collect(),
        };

        for ((i, _), result) in batch.iter().zip(results) {
            summary.sentences_in += 1;
            match result {
                Ok((matrix, entry, resolution)) => {
                    writer
                        .append(&entry.sentence_id, &matrix)
                        .map_err(map_store_err)?;
                    writeln!(manifest, "{}", entry.to_line())?;
                    summary.synthesized += 1;
                    summary.total_frames += entry.total_frames;
                    summary.zero_fill_spans += u64::from(entry.zero_fill_spans);
                    *summary
                        .sentences_per_domain
                        .entry(entry.domain.clone())
                        .or_insert(0) += 1;
                    for level in resolution {
                        match level {
                            ResolutionLevel::Word => summary.words_word_level += 1,
                            ResolutionLevel::Piece => summary.words_piece_level += 1,
                            ResolutionLevel::Grapheme => summary.words_grapheme_level += 1,
                        }
                    }
                }
                Err(reason) => {
                    writeln!(rejects, "{}\t{}\t{}", i + 1, reason.code(), reason.detail())?;
                    summary.rejected += 1;
                    *summary
                        .rejects_per_reason
                        .entry(reason.code().to_string())
                        .or_insert(0) += 1;
                }
            }
        }
    }

    writer.finish().map_err(map_store_err)?;
    manifest.flush()?;
    rejects.flush()?;
    Ok(summary)
}

fn map_store_err(e: StoreError) -> SynthError {
    match e {
        StoreError::Io(io) => SynthError::Io(io),
        other => SynthError::Store(other),
    }
}

pub(crate) fn with_ext(base: &Path, ext: &str) -> std::path::PathBuf {
    let mut p = base.as_os_str().to_owned();
    p.push(".");
    p.push(ext);
    std::path::PathBuf::from(p)
}
