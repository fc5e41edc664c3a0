//! Deterministic corpus generators for the benchmarks.

use std::collections::BTreeMap;
use std::path::Path;

use segsplice::bpe::graphemes;
use segsplice::corpus_io::{AlignmentToken, FeatureMatrix, FeatureStoreWriter, UtteranceAlignment};
use segsplice::mix;

/// `n` distinct pseudo-words, deterministic in `seed`.
pub fn words(n: usize, seed: u64) -> Vec<String> {
    let letters = ["a", "b", "c", "d", "e", "f", "g", "h", "i", "l", "m", "n"];
    let mut out = Vec::with_capacity(n);
    let mut state = seed;
    let mut seen = std::collections::HashSet::new();
    while out.len() < n {
        state = mix::splitmix64(state);
        let len = 3 + (state % 5) as usize;
        let mut w = String::new();
        let mut s = state;
        for _ in 0..len {
            s = mix::splitmix64(s);
            w.push_str(letters[(s % letters.len() as u64) as usize]);
        }
        if seen.insert(w.clone()) {
            out.push(w);
        }
    }
    out
}

/// Word counts suitable for BPE training.
pub fn word_counts(words: &[String]) -> BTreeMap<String, u64> {
    words
        .iter()
        .enumerate()
        .map(|(i, w)| (w.clone(), 1 + (i as u64 % 9)))
        .collect()
}

/// Alignments with `words_per_utt` words per utterance and silences between.
pub fn alignments(
    words: &[String],
    utterances: usize,
    words_per_utt: usize,
) -> Vec<UtteranceAlignment> {
    let mut state = 0xBEEF;
    (0..utterances)
        .map(|i| {
            let mut tokens = Vec::new();
            let mut frame = 0u64;
            for w in 0..words_per_utt {
                state = mix::splitmix64(state);
                let word = &words[(state % words.len() as u64) as usize];
                for g in graphemes(word) {
                    state = mix::splitmix64(state);
                    let n = 4 + state % 12;
                    tokens.push(AlignmentToken {
                        word_index: Some(w as u32),
                        symbol: g,
                        start_frame: frame,
                        num_frames: n,
                    });
                    frame += n;
                }
                if w + 1 < words_per_utt {
                    tokens.push(AlignmentToken {
                        word_index: None,
                        symbol: "<sil>".into(),
                        start_frame: frame,
                        num_frames: 6,
                    });
                    frame += 6;
                }
            }
            UtteranceAlignment::new(format!("u{i:05}"), "d".into(), tokens).unwrap()
        })
        .collect()
}

/// Writes a feature store covering `alignments` at `base`.
pub fn write_store(base: &Path, dim: usize, alignments: &[UtteranceAlignment]) {
    let mut writer = FeatureStoreWriter::create(base, dim).unwrap();
    for (i, al) in alignments.iter().enumerate() {
        let frames = al.tokens.last().map_or(0, |t| t.end_frame()) as usize;
        let data: Vec<f32> = (0..frames * dim)
            .map(|j| (i * 100_000 + j) as f32)
            .collect();
        writer
            .append(&al.utt_id, &FeatureMatrix::from_vec(dim, data))
            .unwrap();
    }
    writer.finish().unwrap();
}

/// One sentence per line from the word list.
pub fn sentences(words: &[String], n: usize, words_per: usize) -> String {
    let mut state = 0xF00D;
    let mut out = String::new();
    for _ in 0..n {
        let mut line = Vec::with_capacity(words_per);
        for _ in 0..words_per {
            state = mix::splitmix64(state);
            line.push(words[(state % words.len() as u64) as usize].as_str());
        }
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    out
}
