//! Binary feature store and grapheme-level alignment files.
//!
//! A feature store is a pair of files sharing a base path: `<base>.idx`, a
//! text index whose first line is `#SEGSPLICE-FEAT v1 dim=<D>` followed by
//! one `utt_id<TAB>frame_offset<TAB>num_frames` line per utterance, and
//! `<base>.dat`, the frame matrices as little-endian f32, row-major, one
//! utterance after another in index order.
//!
//! An alignment file starts with `#SEGSPLICE-ALIGN v1` and carries one token
//! per line: `utt_id<TAB>domain<TAB>word_index<TAB>symbol<TAB>start_frame<TAB>num_frames`,
//! with `word_index = -` and `symbol = <sil>` for silence.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::os::unix::fs::FileExt;
use std::path::{Path, PathBuf};

use thiserror::Error;

pub const FEAT_MAGIC: &str = "#SEGSPLICE-FEAT v1";
pub const ALIGN_MAGIC: &str = "#SEGSPLICE-ALIGN v1";
/// Symbol carried by silence tokens in alignment files.
pub const SILENCE_SYMBOL: &str = "<sil>";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("missing file: {0}")]
    MissingFile(PathBuf),
    #[error("bad magic in {path}: expected `{expected}`, found `{found}`")]
    BadMagic {
        path: PathBuf,
        expected: String,
        found: String,
    },
    #[error("malformed index line {line}: {reason}")]
    MalformedIndexLine { line: usize, reason: String },
    #[error("dim mismatch: {0}")]
    DimMismatch(String),
    #[error("duplicate utt_id `{0}`")]
    DuplicateUttId(String),
    #[error("invalid utt_id `{0}`: must be non-empty, without whitespace, `:` or `;`")]
    InvalidUttId(String),
    #[error("unknown utterance `{0}`")]
    UnknownUtterance(String),
    #[error("slice out of range: {utt_id}[{start}..{start}+{len}) exceeds {extent} frames")]
    SliceOutOfRange {
        utt_id: String,
        start: u64,
        len: u64,
        extent: u64,
    },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// A dense frames-by-coefficients matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    dim: usize,
    data: Vec<f32>,
}

impl FeatureMatrix {
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "dim must be positive");
        Self { dim, data: Vec::new() }
    }

    /// Wraps a row-major buffer. `data.len()` must be a multiple of `dim`.
    pub fn from_vec(dim: usize, data: Vec<f32>) -> Self {
        assert!(dim > 0, "dim must be positive");
        assert_eq!(data.len() % dim, 0, "data length not a multiple of dim");
        Self { dim, data }
    }

    pub fn zeros(dim: usize, num_frames: usize) -> Self {
        Self::from_vec(dim, vec![0.0; dim * num_frames])
    }

    /// Constant-valued matrix, handy in tests and synthetic corpora.
    pub fn filled(dim: usize, num_frames: usize, value: f32) -> Self {
        Self::from_vec(dim, vec![value; dim * num_frames])
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_frames(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn push_frame(&mut self, frame: &[f32]) {
        assert_eq!(frame.len(), self.dim);
        self.data.extend_from_slice(frame);
    }

    /// Appends all frames of `other`. Dims must match.
    pub fn append(&mut self, other: &FeatureMatrix) {
        assert_eq!(self.dim, other.dim, "dim mismatch on append");
        self.data.extend_from_slice(&other.data);
    }

    /// Bit-level equality; unlike `==` this treats NaNs with equal payloads
    /// as equal and distinguishes -0.0 from 0.0.
    pub fn bitwise_eq(&self, other: &FeatureMatrix) -> bool {
        self.dim == other.dim
            && self.data.len() == other.data.len()
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

#[derive(Debug, Clone, Copy)]
struct IndexEntry {
    frame_offset: u64,
    num_frames: u64,
}

/// Read-only random-access store of per-utterance feature matrices.
///
/// Immutable after open; all accessors take `&self`, so one store can serve
/// any number of concurrent readers.
pub struct FeatureStore {
    dim: usize,
    order: Vec<String>,
    entries: HashMap<String, IndexEntry>,
    data: File,
    data_len: u64,
}

fn index_path(base: &Path) -> PathBuf {
    let mut p = base.as_os_str().to_owned();
    p.push(".idx");
    PathBuf::from(p)
}

fn data_path(base: &Path) -> PathBuf {
    let mut p = base.as_os_str().to_owned();
    p.push(".dat");
    PathBuf::from(p)
}

fn validate_utt_id(id: &str) -> Result<(), StoreError> {
    if id.is_empty() || id.chars().any(|c| c.is_whitespace() || c == ':' || c == ';') {
        return Err(StoreError::InvalidUttId(id.to_string()));
    }
    Ok(())
}

impl FeatureStore {
    /// Opens `<base>.idx` + `<base>.dat` and validates the index against the
    /// data extent. After this, any utterance slice is O(1) to locate.
    pub fn open(base: impl AsRef<Path>) -> Result<Self, StoreError> {
        let base = base.as_ref();
        let idx = index_path(base);
        let dat = data_path(base);
        if !idx.is_file() {
            return Err(StoreError::MissingFile(idx));
        }
        if !dat.is_file() {
            return Err(StoreError::MissingFile(dat));
        }

        let reader = BufReader::new(File::open(&idx)?);
        let mut lines = reader.lines();
        let header = lines
            .next()
            .transpose()?
            .unwrap_or_default();
        let dim = parse_feat_header(&idx, &header)?;

        let data = File::open(&dat)?;
        let data_len = data.metadata()?.len();
        let frame_bytes = dim as u64 * 4;
        if data_len % frame_bytes != 0 {
            return Err(StoreError::DimMismatch(format!(
                "data file length {data_len} is not a multiple of dim*4 = {frame_bytes}"
            )));
        }
        let total_frames = data_len / frame_bytes;

        let mut order = Vec::new();
        let mut entries = HashMap::new();
        for (i, line) in lines.enumerate() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let line_no = i + 2;
            let mut cols = line.split('\t');
            let (id, off, num) = match (cols.next(), cols.next(), cols.next(), cols.next()) {
                (Some(id), Some(off), Some(num), None) => (id, off, num),
                _ => {
                    return Err(StoreError::MalformedIndexLine {
                        line: line_no,
                        reason: "expected 3 tab-separated columns".into(),
                    })
                }
            };
            validate_utt_id(id)?;
            let frame_offset: u64 = off.parse().map_err(|_| StoreError::MalformedIndexLine {
                line: line_no,
                reason: format!("bad frame_offset `{off}`"),
            })?;
            let num_frames: u64 = num.parse().map_err(|_| StoreError::MalformedIndexLine {
                line: line_no,
                reason: format!("bad num_frames `{num}`"),
            })?;
            let end = frame_offset.checked_add(num_frames).ok_or_else(|| {
                StoreError::MalformedIndexLine {
                    line: line_no,
                    reason: "frame range overflows".into(),
                }
            })?;
            if end > total_frames {
                return Err(StoreError::DimMismatch(format!(
                    "index entry `{id}` spans frames [{frame_offset}, {end}) but data holds only {total_frames}"
                )));
            }
            if entries
                .insert(id.to_string(), IndexEntry { frame_offset, num_frames })
                .is_some()
            {
                return Err(StoreError::DuplicateUttId(id.to_string()));
            }
            order.push(id.to_string());
        }

        Ok(Self { dim, order, entries, data, data_len })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_utterances(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    /// Utterance ids in index order.
    pub fn utt_ids(&self) -> impl Iterator<Item = &str> {
        self.order.iter().map(|s| s.as_str())
    }

    pub fn contains(&self, utt_id: &str) -> bool {
        self.entries.contains_key(utt_id)
    }

    pub fn num_frames(&self, utt_id: &str) -> Option<u64> {
        self.entries.get(utt_id).map(|e| e.num_frames)
    }

    /// Reads `num_frames` frames of `utt_id` starting at `start_frame`
    /// (frame indices are utterance-local). Requests outside the utterance's
    /// recorded extent fail rather than reading neighboring data.
    pub fn slice(
        &self,
        utt_id: &str,
        start_frame: u64,
        num_frames: u64,
    ) -> Result<FeatureMatrix, StoreError> {
        let entry = self
            .entries
            .get(utt_id)
            .ok_or_else(|| StoreError::UnknownUtterance(utt_id.to_string()))?;
        let end = start_frame.checked_add(num_frames);
        if end.is_none() || end.unwrap() > entry.num_frames {
            return Err(StoreError::SliceOutOfRange {
                utt_id: utt_id.to_string(),
                start: start_frame,
                len: num_frames,
                extent: entry.num_frames,
            });
        }
        let frame_bytes = self.dim as u64 * 4;
        let byte_off = (entry.frame_offset + start_frame) * frame_bytes;
        let byte_len = num_frames * frame_bytes;
        debug_assert!(byte_off + byte_len <= self.data_len);
        let mut buf = vec![0u8; byte_len as usize];
        self.data.read_exact_at(&mut buf, byte_off)?;
        let mut data = Vec::with_capacity(buf.len() / 4);
        for chunk in buf.chunks_exact(4) {
            data.push(f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]));
        }
        Ok(FeatureMatrix::from_vec(self.dim, data))
    }

    /// The whole matrix of one utterance.
    pub fn utterance(&self, utt_id: &str) -> Result<FeatureMatrix, StoreError> {
        let n = self
            .num_frames(utt_id)
            .ok_or_else(|| StoreError::UnknownUtterance(utt_id.to_string()))?;
        self.slice(utt_id, 0, n)
    }
}

impl std::fmt::Debug for FeatureStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FeatureStore")
            .field("dim", &self.dim)
            .field("utterances", &self.order.len())
            .field("data_len", &self.data_len)
            .finish()
    }
}

fn parse_feat_header(path: &Path, header: &str) -> Result<usize, StoreError> {
    let bad = |found: &str| StoreError::BadMagic {
        path: path.to_path_buf(),
        expected: format!("{FEAT_MAGIC} dim=<D>"),
        found: found.to_string(),
    };
    let rest = header.strip_prefix(FEAT_MAGIC).ok_or_else(|| bad(header))?;
    let rest = rest.trim();
    let dim_str = rest.strip_prefix("dim=").ok_or_else(|| bad(header))?;
    let dim: usize = dim_str.parse().map_err(|_| bad(header))?;
    if dim == 0 {
        return Err(StoreError::DimMismatch("header declares dim=0".into()));
    }
    Ok(dim)
}

/// Streaming writer: frames go to `<base>.dat` as they are appended, the
/// index is written on `finish`. Without `finish` no index exists and the
/// partial store cannot be opened.
pub struct FeatureStoreWriter {
    dim: usize,
    base: PathBuf,
    data: BufWriter<File>,
    index: Vec<(String, u64, u64)>,
    seen: HashSet<String>,
    frames_written: u64,
}

impl FeatureStoreWriter {
    pub fn create(base: impl AsRef<Path>, dim: usize) -> Result<Self, StoreError> {
        if dim == 0 {
            return Err(StoreError::DimMismatch("dim must be positive".into()));
        }
        let base = base.as_ref().to_path_buf();
        let data = BufWriter::new(File::create(data_path(&base))?);
        Ok(Self {
            dim,
            base,
            data,
            index: Vec::new(),
            seen: HashSet::new(),
            frames_written: 0,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn append(&mut self, utt_id: &str, matrix: &FeatureMatrix) -> Result<(), StoreError> {
        validate_utt_id(utt_id)?;
        if matrix.dim() != self.dim {
            return Err(StoreError::DimMismatch(format!(
                "utterance `{utt_id}` has dim {}, store has dim {}",
                matrix.dim(),
                self.dim
            )));
        }
        if !self.seen.insert(utt_id.to_string()) {
            return Err(StoreError::DuplicateUttId(utt_id.to_string()));
        }
        for v in matrix.data() {
            self.data.write_all(&v.to_le_bytes())?;
        }
        let n = matrix.num_frames() as u64;
        self.index.push((utt_id.to_string(), self.frames_written, n));
        self.frames_written += n;
        Ok(())
    }

    /// Flushes the data file and writes `<base>.idx`.
    pub fn finish(mut self) -> Result<(), StoreError> {
        self.data.flush()?;
        let mut idx = BufWriter::new(File::create(index_path(&self.base))?);
        writeln!(idx, "{FEAT_MAGIC} dim={}", self.dim)?;
        for (id, off, num) in &self.index {
            writeln!(idx, "{id}\t{off}\t{num}")?;
        }
        idx.flush()?;
        Ok(())
    }
}

/// Writes all `entries` as a feature store at `base`. All matrices must
/// share `dim`; reopening reproduces them bit-for-bit.
pub fn write_feature_store(
    base: impl AsRef<Path>,
    dim: usize,
    entries: &[(String, FeatureMatrix)],
) -> Result<(), StoreError> {
    let mut w = FeatureStoreWriter::create(base, dim)?;
    for (id, m) in entries {
        w.append(id, m)?;
    }
    w.finish()
}

/// Convenience over [`FeatureStore::open`].
pub fn open_feature_store(base: impl AsRef<Path>) -> Result<FeatureStore, StoreError> {
    FeatureStore::open(base)
}

#[derive(Debug, Error)]
pub enum AlignError {
    #[error("missing file: {0}")]
    MissingFile(PathBuf),
    #[error("bad magic in {path}: expected `{expected}`, found `{found}`")]
    BadMagic {
        path: PathBuf,
        expected: String,
        found: String,
    },
    #[error("malformed line {line}: {reason}")]
    MalformedLine { line: usize, reason: String },
    #[error("overlap in `{utt_id}`: token at frame {start} begins before previous token ends at {prev_end}")]
    Overlap {
        utt_id: String,
        start: u64,
        prev_end: u64,
    },
    #[error("non-contiguous word in `{utt_id}`: word_index {word_index} reappears after interruption")]
    NonContiguousWord { utt_id: String, word_index: u32 },
    #[error("unknown utterance `{0}` (not present in feature store)")]
    UnknownUtterance(String),
    #[error("token out of range in `{utt_id}`: span ends at frame {end} but store holds {extent} frames")]
    TokenOutOfRange {
        utt_id: String,
        end: u64,
        extent: u64,
    },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// One aligned grapheme or silence span. `word_index` is `None` for silence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AlignmentToken {
    pub word_index: Option<u32>,
    pub symbol: String,
    pub start_frame: u64,
    pub num_frames: u64,
}

impl AlignmentToken {
    pub fn is_silence(&self) -> bool {
        self.word_index.is_none()
    }

    pub fn end_frame(&self) -> u64 {
        self.start_frame + self.num_frames
    }
}

/// One word of an utterance: its text and the contiguous token run that
/// spells it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WordSpan {
    pub text: String,
    /// Indices into `UtteranceAlignment::tokens`.
    pub token_range: std::ops::Range<usize>,
}

/// A validated utterance alignment with derived word groups.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UtteranceAlignment {
    pub utt_id: String,
    pub domain: String,
    pub tokens: Vec<AlignmentToken>,
    pub words: Vec<WordSpan>,
}

impl UtteranceAlignment {
    /// Validates token ordering, overlap and word contiguity, then derives
    /// word spans. This is the same check `parse_alignments` applies; it is
    /// public so programmatically built alignments go through one gate.
    pub fn new(
        utt_id: String,
        domain: String,
        tokens: Vec<AlignmentToken>,
    ) -> Result<Self, AlignError> {
        // Span ordering and non-overlap.
        for pair in tokens.windows(2) {
            if pair[1].start_frame < pair[0].end_frame() {
                return Err(AlignError::Overlap {
                    utt_id,
                    start: pair[1].start_frame,
                    prev_end: pair[0].end_frame(),
                });
            }
        }
        // Word contiguity: equal word_index tokens must form one run, with
        // no silence token or other word interleaved.
        let mut words: Vec<WordSpan> = Vec::new();
        let mut seen: HashSet<u32> = HashSet::new();
        let mut current: Option<u32> = None;
        for (i, tok) in tokens.iter().enumerate() {
            match tok.word_index {
                None => current = None,
                Some(w) => {
                    if current == Some(w) {
                        let span = words.last_mut().expect("open word run");
                        span.text.push_str(&tok.symbol);
                        span.token_range.end = i + 1;
                    } else {
                        if !seen.insert(w) {
                            return Err(AlignError::NonContiguousWord {
                                utt_id,
                                word_index: w,
                            });
                        }
                        current = Some(w);
                        words.push(WordSpan {
                            text: tok.symbol.clone(),
                            token_range: i..i + 1,
                        });
                    }
                }
            }
        }
        Ok(Self { utt_id, domain, tokens, words })
    }

    /// Tokens of one word span.
    pub fn word_tokens(&self, word: &WordSpan) -> &[AlignmentToken] {
        &self.tokens[word.token_range.clone()]
    }

    /// Silence tokens in order.
    pub fn silence_tokens(&self) -> impl Iterator<Item = &AlignmentToken> {
        self.tokens.iter().filter(|t| t.is_silence())
    }
}

/// Parses an alignment file into validated per-utterance alignments,
/// grouping rows by utt_id in first-appearance order. With a store, every
/// utterance must exist there and token spans must fit its frame extent.
pub fn parse_alignments(
    path: impl AsRef<Path>,
    store: Option<&FeatureStore>,
) -> Result<Vec<UtteranceAlignment>, AlignError> {
    let path = path.as_ref();
    if !path.is_file() {
        return Err(AlignError::MissingFile(path.to_path_buf()));
    }
    let reader = BufReader::new(File::open(path)?);
    parse_alignments_from(reader, path, store)
}

fn parse_alignments_from<R: Read>(
    reader: BufReader<R>,
    path: &Path,
    store: Option<&FeatureStore>,
) -> Result<Vec<UtteranceAlignment>, AlignError> {
    let mut lines = reader.lines();
    let header = lines.next().transpose()?.unwrap_or_default();
    if header.trim_end() != ALIGN_MAGIC {
        return Err(AlignError::BadMagic {
            path: path.to_path_buf(),
            expected: ALIGN_MAGIC.to_string(),
            found: header,
        });
    }

    // Accumulate rows per utterance, preserving first-appearance order.
    let mut order: Vec<String> = Vec::new();
    let mut grouped: HashMap<String, (String, Vec<AlignmentToken>)> = HashMap::new();

    for (i, line) in lines.enumerate() {
        let line = line?;
        let line_no = i + 2;
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 6 {
            return Err(AlignError::MalformedLine {
                line: line_no,
                reason: format!("expected 6 tab-separated columns, got {}", cols.len()),
            });
        }
        let (utt_id, domain, word_index, symbol, start, num) =
            (cols[0], cols[1], cols[2], cols[3], cols[4], cols[5]);
        let malformed = |reason: String| AlignError::MalformedLine { line: line_no, reason };

        if utt_id.is_empty()
            || utt_id
                .chars()
                .any(|c| c.is_whitespace() || c == ':' || c == ';')
        {
            return Err(malformed(format!("invalid utt_id `{utt_id}`")));
        }
        if domain.is_empty() || domain.chars().any(|c| c.is_whitespace()) {
            return Err(malformed(format!("invalid domain `{domain}`")));
        }
        let word_index = if word_index == "-" {
            if symbol != SILENCE_SYMBOL {
                return Err(malformed(format!(
                    "word_index `-` requires symbol `{SILENCE_SYMBOL}`, got `{symbol}`"
                )));
            }
            None
        } else {
            let w: u32 = word_index
                .parse()
                .map_err(|_| malformed(format!("bad word_index `{word_index}`")))?;
            if symbol == SILENCE_SYMBOL {
                return Err(malformed(format!(
                    "silence symbol `{SILENCE_SYMBOL}` requires word_index `-`"
                )));
            }
            Some(w)
        };
        if symbol.is_empty() {
            return Err(malformed("empty symbol".into()));
        }
        // Symbols become library keys and manifest span fields; keep them
        // free of the delimiters those formats use.
        if symbol != SILENCE_SYMBOL
            && symbol
                .chars()
                .any(|c| c.is_whitespace() || c == ':' || c == ';')
        {
            return Err(malformed(format!(
                "symbol `{symbol}` contains whitespace, `:` or `;`"
            )));
        }
        let start_frame: u64 = start
            .parse()
            .map_err(|_| malformed(format!("bad start_frame `{start}`")))?;
        let num_frames: u64 = num
            .parse()
            .map_err(|_| malformed(format!("bad num_frames `{num}`")))?;
        if num_frames == 0 {
            return Err(malformed("num_frames must be >= 1".into()));
        }

        let token = AlignmentToken {
            word_index,
            symbol: symbol.to_string(),
            start_frame,
            num_frames,
        };
        match grouped.get_mut(utt_id) {
            Some((dom, toks)) => {
                if dom != domain {
                    return Err(malformed(format!(
                        "utterance `{utt_id}` re-declared with domain `{domain}`, was `{dom}`"
                    )));
                }
                toks.push(token);
            }
            None => {
                order.push(utt_id.to_string());
                grouped.insert(utt_id.to_string(), (domain.to_string(), vec![token]));
            }
        }
    }

    let mut result = Vec::with_capacity(order.len());
    for utt_id in order {
        let (domain, tokens) = grouped.remove(&utt_id).expect("grouped");
        let alignment = UtteranceAlignment::new(utt_id, domain, tokens)?;
        if let Some(store) = store {
            let extent = store
                .num_frames(&alignment.utt_id)
                .ok_or_else(|| AlignError::UnknownUtterance(alignment.utt_id.clone()))?;
            if let Some(last) = alignment.tokens.last() {
                if last.end_frame() > extent {
                    return Err(AlignError::TokenOutOfRange {
                        utt_id: alignment.utt_id.clone(),
                        end: last.end_frame(),
                        extent,
                    });
                }
            }
        }
        result.push(alignment);
    }
    Ok(result)
}

/// Writes alignments in the `#SEGSPLICE-ALIGN v1` format. The inverse of
/// [`parse_alignments`]; mainly used by tooling that generates corpora.
pub fn write_alignments(
    path: impl AsRef<Path>,
    alignments: &[UtteranceAlignment],
) -> Result<(), AlignError> {
    let mut w = BufWriter::new(File::create(path.as_ref())?);
    writeln!(w, "{ALIGN_MAGIC}")?;
    for al in alignments {
        for tok in &al.tokens {
            let word_index = match tok.word_index {
                Some(i) => i.to_string(),
                None => "-".to_string(),
            };
            writeln!(
                w,
                "{}\t{}\t{}\t{}\t{}\t{}",
                al.utt_id, al.domain, word_index, tok.symbol, tok.start_frame, tok.num_frames
            )?;
        }
    }
    w.flush()?;
    Ok(())
}
