//! Synthetic corpus generation shared by the CLI and acceptance tests.
//!
//! Corpora are deterministic functions of their seed: utterance `i` gets a
//! domain by rotation, a seeded choice of words, per-grapheme durations from
//! a configurable range, and silence tokens between words. Feature frames
//! carry globally unique values so bit-identity checks against source
//! slices are airtight.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::process::Output;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use segsplice::bpe::graphemes;
use segsplice::corpus_io::{
    write_alignments, AlignmentToken, FeatureMatrix, FeatureStoreWriter, UtteranceAlignment,
};

pub const SILENCE_SYMBOL: &str = "<sil>";

pub struct CorpusSpec {
    pub dim: usize,
    pub words: Vec<String>,
    pub domains: Vec<String>,
    pub utterances: usize,
    pub words_per_utt: usize,
    /// Inclusive range of frames per grapheme token.
    pub grapheme_frames: (u64, u64),
    /// Inclusive range of frames per silence token.
    pub silence_frames: (u64, u64),
    pub seed: u64,
    /// Maps a uniform draw in [0,1) to a word index; identity-ish by default.
    pub word_bias: Option<Box<dyn Fn(f64, usize) -> usize>>,
}

impl CorpusSpec {
    pub fn uniform(words: Vec<String>, domains: Vec<String>, utterances: usize) -> Self {
        Self {
            dim: 4,
            words,
            domains,
            utterances,
            words_per_utt: 8,
            grapheme_frames: (4, 20),
            silence_frames: (3, 30),
            seed: 99,
            word_bias: None,
        }
    }
}

// Not every test binary touches every field.
#[allow(dead_code)]
pub struct BuiltCorpus {
    pub store_base: PathBuf,
    pub align_path: PathBuf,
    pub alignments: Vec<UtteranceAlignment>,
    /// utt_id -> domain, for purity checks.
    pub utt_domain: HashMap<String, String>,
}

/// Writes `<dir>/feat.{idx,dat}` and `<dir>/corpus.align`.
pub fn generate_corpus(dir: &Path, spec: &CorpusSpec) -> BuiltCorpus {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let store_base = dir.join("feat");
    let align_path = dir.join("corpus.align");
    let mut writer = FeatureStoreWriter::create(&store_base, spec.dim).unwrap();
    let mut alignments = Vec::with_capacity(spec.utterances);
    let mut utt_domain = HashMap::new();

    for i in 0..spec.utterances {
        let utt_id = format!("utt{i:05}");
        let domain = spec.domains[i % spec.domains.len()].clone();
        let mut tokens = Vec::new();
        let mut frame = 0u64;
        for w in 0..spec.words_per_utt {
            let pick = match &spec.word_bias {
                Some(f) => f(rng.gen::<f64>(), spec.words.len()),
                None => rng.gen_range(0..spec.words.len()),
            };
            let word = &spec.words[pick];
            for g in graphemes(word) {
                let n = rng.gen_range(spec.grapheme_frames.0..=spec.grapheme_frames.1);
                tokens.push(AlignmentToken {
                    word_index: Some(w as u32),
                    symbol: g,
                    start_frame: frame,
                    num_frames: n,
                });
                frame += n;
            }
            if w + 1 < spec.words_per_utt {
                let n = rng.gen_range(spec.silence_frames.0..=spec.silence_frames.1);
                tokens.push(AlignmentToken {
                    word_index: None,
                    symbol: SILENCE_SYMBOL.into(),
                    start_frame: frame,
                    num_frames: n,
                });
                frame += n;
            }
        }
        let total = frame as usize;
        let mut data = Vec::with_capacity(total * spec.dim);
        for f in 0..total {
            let base = (i * 4096 + f) as f32;
            for d in 0..spec.dim {
                data.push(base + d as f32 * 0.0625);
            }
        }
        writer
            .append(&utt_id, &FeatureMatrix::from_vec(spec.dim, data))
            .unwrap();
        utt_domain.insert(utt_id.clone(), domain.clone());
        alignments.push(UtteranceAlignment::new(utt_id, domain, tokens).unwrap());
    }
    writer.finish().unwrap();
    write_alignments(&align_path, &alignments).unwrap();
    BuiltCorpus {
        store_base,
        align_path,
        alignments,
        utt_domain,
    }
}

/// `n` distinct lowercase words, deterministic in `seed`.
pub fn word_list(n: usize, seed: u64) -> Vec<String> {
    let letters = ["a", "b", "c", "d", "e", "f", "g", "h", "i", "l", "m", "n"];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    let mut seen = std::collections::HashSet::new();
    while out.len() < n {
        let len = rng.gen_range(3..=7);
        let w: String = (0..len)
            .map(|_| letters[rng.gen_range(0..letters.len())])
            .collect();
        if seen.insert(w.clone()) {
            out.push(w);
        }
    }
    out
}

/// Writes one sentence per line, words drawn uniformly from `words`.
pub fn write_sentences(
    path: &Path,
    words: &[String],
    sentences: usize,
    words_per: usize,
    seed: u64,
) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lines: Vec<String> = (0..sentences)
        .map(|_| {
            (0..words_per)
                .map(|_| words[rng.gen_range(0..words.len())].as_str())
                .collect::<Vec<_>>()
                .join(" ")
        })
        .collect();
    std::fs::write(path, lines.join("\n") + "\n").unwrap();
    lines
}

/// Runs the `segsplice` binary with `args`; returns its full output.
pub fn run_cli(args: &[&str]) -> Output {
    std::process::Command::new(env!("CARGO_BIN_EXE_segsplice"))
        .args(args)
        .output()
        .expect("spawn segsplice")
}

pub fn assert_exit(out: &Output, code: i32) {
    assert_eq!(
        out.status.code(),
        Some(code),
        "exit code mismatch\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}
