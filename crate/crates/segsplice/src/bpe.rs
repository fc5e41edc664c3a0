//! Byte-pair-encoding over grapheme clusters.
//!
//! Training is the classic greedy loop: count adjacent symbol pairs across
//! all word types (weighted by word count), merge the most frequent pair,
//! repeat until the vocabulary reaches the target size or the best pair
//! occurs fewer than twice. Merges never cross word boundaries and there is
//! no end-of-word marker: pieces must tile grapheme spans inside words.
//!
//! Ties are broken by lexicographic order of the concatenated pair string,
//! then of the left operand, which makes training a pure function of
//! (word_counts, target_vocab_size).

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;
use unicode_segmentation::UnicodeSegmentation;

pub const BPE_MAGIC: &str = "#SEGSPLICE-BPE v1";

/// Pairs below this frequency are never merged.
pub const MIN_MERGE_FREQUENCY: u64 = 2;

#[derive(Debug, Error)]
pub enum BpeError {
    #[error("empty corpus: no graphemes to build an alphabet from")]
    EmptyCorpus,
    #[error("target vocab size {target} is below alphabet size {alphabet}")]
    TargetTooSmall { target: usize, alphabet: usize },
    #[error("unknown grapheme `{grapheme}` in word `{word}`")]
    UnknownGrapheme { word: String, grapheme: String },
    #[error("bad model format in {path}: {reason}")]
    BadFormat { path: PathBuf, reason: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// One sentence piece and the contiguous grapheme range of the word it
/// covers (indices into the word's grapheme sequence).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PieceSpan {
    pub piece: String,
    pub grapheme_start: usize,
    pub grapheme_len: usize,
}

/// A trained BPE model: grapheme alphabet plus an ordered merge list.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BpeModel {
    alphabet: BTreeSet<String>,
    merges: Vec<(String, String)>,
    /// merge pair -> rank (training order), for fast tokenization.
    ranks: HashMap<(String, String), usize>,
}

/// Splits a word into extended grapheme clusters.
pub fn graphemes(word: &str) -> Vec<String> {
    word.graphemes(true).map(|g| g.to_string()).collect()
}

impl BpeModel {
    fn from_parts(alphabet: BTreeSet<String>, merges: Vec<(String, String)>) -> Self {
        let ranks = merges
            .iter()
            .cloned()
            .enumerate()
            .map(|(i, pair)| (pair, i))
            .collect();
        Self { alphabet, merges, ranks }
    }

    pub fn alphabet(&self) -> &BTreeSet<String> {
        &self.alphabet
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    /// Alphabet plus every merge result.
    pub fn vocab(&self) -> BTreeSet<String> {
        let mut v = self.alphabet.clone();
        for (l, r) in &self.merges {
            v.insert(format!("{l}{r}"));
        }
        v
    }

    pub fn vocab_size(&self) -> usize {
        self.alphabet.len() + self.merges.len()
    }

    pub fn contains_symbol(&self, grapheme: &str) -> bool {
        self.alphabet.contains(grapheme)
    }

    /// Tokenizes a word; the concatenation of the returned pieces equals the
    /// input. Fails with `UnknownGrapheme` on symbols outside the alphabet,
    /// which callers treat as the signal to fall back a level.
    pub fn tokenize(&self, word: &str) -> Result<Vec<String>, BpeError> {
        Ok(self
            .tokenize_spans(word)?
            .into_iter()
            .map(|p| p.piece)
            .collect())
    }

    /// Like [`tokenize`](Self::tokenize) but also reports each piece's
    /// grapheme range.
    pub fn tokenize_spans(&self, word: &str) -> Result<Vec<PieceSpan>, BpeError> {
        self.tokenize_symbols(word, &graphemes(word))
    }

    /// Tokenizes a pre-segmented grapheme sequence. Alignment consumers call
    /// this with token symbols so the mapping back to frame spans is exact.
    pub fn tokenize_symbols(
        &self,
        word: &str,
        symbols: &[String],
    ) -> Result<Vec<PieceSpan>, BpeError> {
        for s in symbols {
            if !self.alphabet.contains(s) {
                return Err(BpeError::UnknownGrapheme {
                    word: word.to_string(),
                    grapheme: s.clone(),
                });
            }
        }
        let mut pieces: Vec<PieceSpan> = symbols
            .iter()
            .enumerate()
            .map(|(i, s)| PieceSpan {
                piece: s.clone(),
                grapheme_start: i,
                grapheme_len: 1,
            })
            .collect();

        // Repeatedly merge the lowest-rank pair present. Because a merge
        // result is always created after its operands, this yields the same
        // pieces as replaying the full merge list in training order.
        while pieces.len() > 1 {
            let mut best: Option<(usize, usize)> = None; // (rank, position)
            for i in 0..pieces.len() - 1 {
                let key = (pieces[i].piece.clone(), pieces[i + 1].piece.clone());
                if let Some(&rank) = self.ranks.get(&key) {
                    if best.is_none_or(|(r, _)| rank < r) {
                        best = Some((rank, i));
                    }
                }
            }
            let Some((rank, _)) = best else { break };
            let (left, right) = self.merges[rank].clone();
            let mut i = 0;
            while i + 1 < pieces.len() {
                if pieces[i].piece == left && pieces[i + 1].piece == right {
                    let right_span = pieces.remove(i + 1);
                    let left_span = &mut pieces[i];
                    left_span.piece.push_str(&right_span.piece);
                    left_span.grapheme_len += right_span.grapheme_len;
                }
                i += 1;
            }
        }
        Ok(pieces)
    }
}

/// Trains a model by greedy pair merging. See the module docs for the exact
/// selection and stopping rules.
pub fn train_bpe(
    word_counts: &BTreeMap<String, u64>,
    target_vocab_size: usize,
) -> Result<BpeModel, BpeError> {
    let mut alphabet: BTreeSet<String> = BTreeSet::new();
    // Word types as symbol sequences, with their corpus counts.
    let mut seqs: Vec<(Vec<String>, u64)> = Vec::new();
    for (word, &count) in word_counts {
        if word.is_empty() || count == 0 {
            continue;
        }
        let syms = graphemes(word);
        alphabet.extend(syms.iter().cloned());
        seqs.push((syms, count));
    }
    if alphabet.is_empty() {
        return Err(BpeError::EmptyCorpus);
    }
    if target_vocab_size < alphabet.len() {
        return Err(BpeError::TargetTooSmall {
            target: target_vocab_size,
            alphabet: alphabet.len(),
        });
    }

    let mut vocab: BTreeSet<String> = alphabet.clone();
    let mut merges: Vec<(String, String)> = Vec::new();

    while vocab.len() < target_vocab_size {
        // Count adjacent pairs per position across all word types.
        let mut pair_counts: HashMap<(&str, &str), u64> = HashMap::new();
        for (syms, count) in &seqs {
            for w in syms.windows(2) {
                *pair_counts.entry((&w[0], &w[1])).or_insert(0) += count;
            }
        }

        let mut best: Option<(&str, &str, u64, String)> = None;
        for (&(l, r), &count) in &pair_counts {
            let concat = format!("{l}{r}");
            if vocab.contains(&concat) {
                continue; // merge results must stay distinct
            }
            let better = match &best {
                None => true,
                Some((bl, _, bc, bcat)) => {
                    count > *bc
                        || (count == *bc && (concat < *bcat || (concat == *bcat && l < *bl)))
                }
            };
            if better {
                best = Some((l, r, count, concat));
            }
        }

        let Some((left, right, count, concat)) = best else { break };
        if count < MIN_MERGE_FREQUENCY {
            break;
        }
        let left = left.to_string();
        let right = right.to_string();

        for (syms, _) in &mut seqs {
            let mut i = 0;
            while i + 1 < syms.len() {
                if syms[i] == left && syms[i + 1] == right {
                    syms[i] = concat.clone();
                    syms.remove(i + 1);
                }
                i += 1;
            }
        }
        vocab.insert(concat);
        merges.push((left, right));
    }

    Ok(BpeModel::from_parts(alphabet, merges))
}

/// Writes the model: magic line, alphabet line (space-separated), one
/// `left<TAB>right` line per merge.
pub fn save_bpe(model: &BpeModel, path: impl AsRef<Path>) -> Result<(), BpeError> {
    let mut w = BufWriter::new(File::create(path.as_ref())?);
    writeln!(w, "{BPE_MAGIC}")?;
    let alphabet: Vec<&str> = model.alphabet.iter().map(|s| s.as_str()).collect();
    writeln!(w, "{}", alphabet.join(" "))?;
    for (l, r) in &model.merges {
        writeln!(w, "{l}\t{r}")?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_bpe(path: impl AsRef<Path>) -> Result<BpeModel, BpeError> {
    let path = path.as_ref();
    let bad = |reason: String| BpeError::BadFormat {
        path: path.to_path_buf(),
        reason,
    };
    let reader = BufReader::new(File::open(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            bad("file not found".into())
        } else {
            BpeError::Io(e)
        }
    })?);
    let mut lines = reader.lines();
    match lines.next().transpose()? {
        Some(l) if l.trim_end() == BPE_MAGIC => {}
        other => {
            return Err(bad(format!(
                "expected magic `{BPE_MAGIC}`, found `{}`",
                other.unwrap_or_default()
            )))
        }
    }
    let alphabet_line = lines
        .next()
        .transpose()?
        .ok_or_else(|| bad("truncated: missing alphabet line".into()))?;
    let alphabet: BTreeSet<String> = alphabet_line
        .split(' ')
        .filter(|s| !s.is_empty())
        .map(|s| s.to_string())
        .collect();

    let mut merges = Vec::new();
    let mut derivable: BTreeSet<String> = alphabet.clone();
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let line_no = i + 3;
        let mut cols = line.split('\t');
        let (l, r) = match (cols.next(), cols.next(), cols.next()) {
            (Some(l), Some(r), None) if !l.is_empty() && !r.is_empty() => (l, r),
            _ => return Err(bad(format!("line {line_no}: expected `left<TAB>right`"))),
        };
        if !derivable.contains(l) || !derivable.contains(r) {
            return Err(bad(format!(
                "line {line_no}: merge ({l}, {r}) uses operands not derivable from earlier merges"
            )));
        }
        let concat = format!("{l}{r}");
        if !derivable.insert(concat) {
            return Err(bad(format!("line {line_no}: duplicate merge result")));
        }
        merges.push((l.to_string(), r.to_string()));
    }
    Ok(BpeModel::from_parts(alphabet, merges))
}
