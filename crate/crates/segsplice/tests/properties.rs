//! Property tests for the library's structural invariants.

use std::collections::BTreeMap;
use std::io::Cursor;

use proptest::prelude::*;
use tempfile::TempDir;

use segsplice::bpe::{graphemes, train_bpe, BpeModel};
use segsplice::corpus_io::{
    parse_alignments, write_alignments, write_feature_store, AlignmentToken, FeatureMatrix,
    FeatureStore, UtteranceAlignment,
};
use segsplice::seglib::{build_libraries, BuildOptions, UnitLevel};
use segsplice::synth::{synthesize_corpus, ManifestEntry, SpanKind, SynthConfig};

const ALPHABET: &[&str] = &["a", "b", "c", "d", "e", "\u{e8}", "z'"];

fn word_strategy() -> impl Strategy<Value = String> {
    prop::collection::vec(prop::sample::select(ALPHABET.to_vec()), 1..8)
        .prop_map(|gs| gs.concat())
}

fn counts_strategy() -> impl Strategy<Value = BTreeMap<String, u64>> {
    prop::collection::btree_map(word_strategy(), 1u64..40, 1..20)
}

proptest! {
    // Feature store round-trip down to the f32 bit pattern, NaNs included.
    #[test]
    fn store_round_trip_is_bit_exact(
        dim in 1usize..6,
        utts in prop::collection::vec(
            prop::collection::vec(any::<u32>(), 0..60), 0..8),
    ) {
        let tmp = TempDir::new().unwrap();
        let base = tmp.path().join("feat");
        let entries: Vec<(String, FeatureMatrix)> = utts
            .iter()
            .enumerate()
            .map(|(i, bits)| {
                let n = bits.len() - bits.len() % dim;
                let data: Vec<f32> = bits[..n].iter().map(|b| f32::from_bits(*b)).collect();
                (format!("u{i}"), FeatureMatrix::from_vec(dim, data))
            })
            .collect();
        write_feature_store(&base, dim, &entries).unwrap();
        let store = FeatureStore::open(&base).unwrap();
        prop_assert_eq!(store.dim(), dim);
        prop_assert_eq!(store.num_utterances(), entries.len());
        for (id, m) in &entries {
            let back = store.utterance(id).unwrap();
            prop_assert!(back.bitwise_eq(m));
        }
    }

    // Word reconstruction: concatenating each word group's symbols equals
    // the word text, and the token count equals its grapheme length.
    #[test]
    fn alignment_word_reconstruction(
        words in prop::collection::vec(word_strategy(), 1..6),
        gap in 0u64..3,
    ) {
        let mut tokens = Vec::new();
        let mut frame = 0u64;
        for (wi, word) in words.iter().enumerate() {
            for g in graphemes(word) {
                tokens.push(AlignmentToken {
                    word_index: Some(wi as u32),
                    symbol: g,
                    start_frame: frame,
                    num_frames: 5,
                });
                frame += 5;
            }
            frame += gap;
            tokens.push(AlignmentToken {
                word_index: None,
                symbol: "<sil>".into(),
                start_frame: frame,
                num_frames: 4,
            });
            frame += 4;
        }
        let al = UtteranceAlignment::new("u0".into(), "d".into(), tokens).unwrap();
        prop_assert_eq!(al.words.len(), words.len());
        for (span, word) in al.words.iter().zip(&words) {
            prop_assert_eq!(&span.text, word);
            prop_assert_eq!(span.token_range.len(), graphemes(word).len());
        }
        // And the file round-trips structurally.
        let tmp = TempDir::new().unwrap();
        let p = tmp.path().join("a.tsv");
        write_alignments(&p, std::slice::from_ref(&al)).unwrap();
        let back = parse_alignments(&p, None).unwrap();
        prop_assert_eq!(back, vec![al]);
    }

    // join(tokenize(w)) == w for any in-alphabet word, and training twice
    // gives identical models.
    #[test]
    fn tokenize_concatenation_and_determinism(
        counts in counts_strategy(),
        target_extra in 0usize..20,
        probe in word_strategy(),
    ) {
        let alphabet_size = counts
            .keys()
            .flat_map(|w| graphemes(w))
            .collect::<std::collections::BTreeSet<_>>()
            .len();
        let model = train_bpe(&counts, alphabet_size + target_extra).unwrap();
        let model2 = train_bpe(&counts, alphabet_size + target_extra).unwrap();
        prop_assert_eq!(&model, &model2);
        prop_assert!(model.vocab_size() <= alphabet_size + target_extra);

        for w in counts.keys().chain(std::iter::once(&probe)) {
            if graphemes(w).iter().all(|g| model.contains_symbol(g)) {
                let pieces = model.tokenize(w).unwrap();
                prop_assert_eq!(pieces.concat(), w.clone());
                // Spans tile the word contiguously.
                let spans = model.tokenize_spans(w).unwrap();
                let mut next = 0;
                for s in &spans {
                    prop_assert_eq!(s.grapheme_start, next);
                    next += s.grapheme_len;
                }
                prop_assert_eq!(next, graphemes(w).len());
            }
        }
    }

    // The rank-based tokenizer equals a straight replay of the merge list
    // in training order (reference implementation lives here, in test code).
    #[test]
    fn tokenizer_matches_sequential_merge_replay(
        counts in counts_strategy(),
        probe in word_strategy(),
    ) {
        let alphabet_size = counts
            .keys()
            .flat_map(|w| graphemes(w))
            .collect::<std::collections::BTreeSet<_>>()
            .len();
        let model = train_bpe(&counts, alphabet_size + 12).unwrap();
        for w in counts.keys().chain(std::iter::once(&probe)) {
            if graphemes(w).iter().all(|g| model.contains_symbol(g)) {
                let fast = model.tokenize(w).unwrap();
                let slow = sequential_tokenize(&model, w);
                prop_assert_eq!(fast, slow);
            }
        }
    }

    // Monotone refinement: pieces under the first k merges are exact
    // concatenations of pieces under the first k-1 merges (piece boundaries
    // only ever disappear as merges are added).
    #[test]
    fn merges_refine_monotonically(counts in counts_strategy()) {
        let alphabet: std::collections::BTreeSet<String> =
            counts.keys().flat_map(|w| graphemes(w)).collect();
        let full = train_bpe(&counts, alphabet.len() + 10).unwrap();
        for k in 1..=full.merges().len() {
            let prev = model_with_first_merges(&full, k - 1);
            let cur = model_with_first_merges(&full, k);
            for w in counts.keys() {
                let b_prev = boundaries(&prev, w);
                let b_cur = boundaries(&cur, w);
                prop_assert!(
                    b_cur.is_subset(&b_prev),
                    "boundaries grew from merge {} to {} on `{}`", k - 1, k, w
                );
            }
        }
    }

    // Synthesis invariants on random corpora: frame conservation, text
    // round-trip, silence only at word boundaries, priority of word units.
    #[test]
    fn synthesis_invariants_hold(
        words in prop::collection::vec(word_strategy(), 2..8),
        sentence_picks in prop::collection::vec(
            prop::collection::vec(any::<prop::sample::Index>(), 1..6), 1..10),
        seed in any::<u64>(),
    ) {
        let tmp = TempDir::new().unwrap();
        let dim = 3;

        // One utterance per word, frames valued by utterance index.
        let mut entries = Vec::new();
        let mut alignments = Vec::new();
        for (i, word) in words.iter().enumerate() {
            let gs = graphemes(word);
            let frames_per = 6 + (i as u64 % 5);
            let total = gs.len() as u64 * frames_per + 8;
            entries.push((
                format!("u{i}"),
                FeatureMatrix::from_vec(
                    dim,
                    (0..total * dim as u64).map(|j| (i * 1000) as f32 + j as f32).collect(),
                ),
            ));
            let mut tokens = Vec::new();
            let mut frame = 0;
            for g in gs {
                tokens.push(AlignmentToken {
                    word_index: Some(0),
                    symbol: g,
                    start_frame: frame,
                    num_frames: frames_per,
                });
                frame += frames_per;
            }
            tokens.push(AlignmentToken {
                word_index: None,
                symbol: "<sil>".into(),
                start_frame: frame,
                num_frames: 8,
            });
            alignments.push(
                UtteranceAlignment::new(format!("u{i}"), "d".into(), tokens).unwrap(),
            );
        }
        let base = tmp.path().join("feat");
        write_feature_store(&base, dim, &entries).unwrap();
        let store = FeatureStore::open(&base).unwrap();

        let counts: BTreeMap<String, u64> = words.iter().map(|w| (w.clone(), 2)).collect();
        let alphabet: std::collections::BTreeSet<String> =
            words.iter().flat_map(|w| graphemes(w)).collect();
        let bpe = train_bpe(&counts, alphabet.len() + 5).unwrap();
        let (libs, _) = build_libraries(&alignments, &bpe, &BuildOptions::default()).unwrap();

        let sentences: Vec<String> = sentence_picks
            .iter()
            .map(|picks| {
                picks
                    .iter()
                    .map(|ix| words[ix.index(words.len())].as_str())
                    .collect::<Vec<_>>()
                    .join(" ")
            })
            .collect();
        let cfg = SynthConfig { seed, ..Default::default() };
        let out = tmp.path().join("out");
        let summary = synthesize_corpus(
            Cursor::new(sentences.join("\n")),
            &libs,
            &store,
            &cfg,
            &out,
        )
        .unwrap();
        prop_assert_eq!(summary.sentences_in, sentences.len() as u64);
        prop_assert_eq!(summary.rejected, 0);

        let out_store = FeatureStore::open(&out).unwrap();
        let manifest = std::fs::read_to_string(tmp.path().join("out.manifest")).unwrap();
        for (i, line) in manifest.lines().enumerate() {
            let entry = ManifestEntry::parse_line(line).unwrap();
            // Frame conservation.
            let span_sum: u64 = entry.spans.iter().map(|s| s.len).sum();
            prop_assert_eq!(entry.total_frames, span_sum);
            prop_assert_eq!(out_store.num_frames(&entry.sentence_id), Some(span_sum));
            // Text round-trip: unit spans joined with spaces at word
            // boundaries (exactly where SIL spans sit) spell the sentence.
            let mut text = String::new();
            for (j, span) in entry.spans.iter().enumerate() {
                match span.kind {
                    SpanKind::Silence => {
                        prop_assert!(j > 0 && j + 1 < entry.spans.len());
                        text.push(' ');
                    }
                    SpanKind::Unit => text.push_str(&span.unit),
                }
            }
            prop_assert_eq!(text, segsplice::normalize_text(&sentences[i]));
            // Every UNIT span is bit-identical to its source slice.
            let mut cursor = 0u64;
            for span in &entry.spans {
                if span.kind == SpanKind::Unit {
                    let src = store.slice(&span.src_utt, span.src_start, span.len).unwrap();
                    let dst = out_store.slice(&entry.sentence_id, cursor, span.len).unwrap();
                    prop_assert!(dst.bitwise_eq(&src));
                }
                cursor += span.len;
            }
        }

        // Words present in the word library are never realized by pieces:
        // planner resolution is all-Word because every word was indexed.
        prop_assert_eq!(summary.words_piece_level, 0);
        prop_assert_eq!(summary.words_grapheme_level, 0);
    }

    // Reservoir caps: stored instance lists never exceed cap and hold real
    // candidates when the corpus overflows the cap.
    #[test]
    fn caps_hold_under_overflow(extra in 0usize..40, cap in 1usize..12) {
        let n = cap + extra;
        let alignments: Vec<UtteranceAlignment> = (0..n)
            .map(|i| {
                UtteranceAlignment::new(
                    format!("u{i}"),
                    "d".into(),
                    vec![AlignmentToken {
                        word_index: Some(0),
                        symbol: "a".into(),
                        start_frame: 0,
                        num_frames: 10,
                    }],
                )
                .unwrap()
            })
            .collect();
        let counts: BTreeMap<String, u64> = [("a".to_string(), 2)].into();
        let bpe = train_bpe(&counts, 10).unwrap();
        let mut opts = BuildOptions::default();
        opts.caps.word = cap;
        opts.caps.grapheme = cap;
        opts.caps.piece = cap;
        let (libs, summary) = build_libraries(&alignments, &bpe, &opts).unwrap();
        prop_assert_eq!(libs.words.instances("a").len(), cap.min(n));
        prop_assert_eq!(
            summary.levels[0].seen,
            n as u64
        );
        for level in [UnitLevel::Word, UnitLevel::Piece, UnitLevel::Grapheme] {
            for (_, refs) in libs.library(level).iter() {
                prop_assert!(refs.len() <= cap);
            }
        }
    }
}

/// Reference tokenizer: replay every merge over the symbol sequence in
/// training order. Intentionally independent of the library's rank-based
/// implementation.
fn sequential_tokenize(model: &BpeModel, word: &str) -> Vec<String> {
    let mut seq = graphemes(word);
    for (l, r) in model.merges() {
        let mut i = 0;
        while i + 1 < seq.len() {
            if &seq[i] == l && &seq[i + 1] == r {
                let merged = format!("{}{}", seq[i], seq[i + 1]);
                seq[i] = merged;
                seq.remove(i + 1);
            }
            i += 1;
        }
    }
    seq
}

fn model_with_first_merges(model: &BpeModel, k: usize) -> BpeModel {
    // Rebuild through the file format to keep construction on public paths.
    let tmp = TempDir::new().unwrap();
    let p = tmp.path().join("m.bpe");
    segsplice::bpe::save_bpe(model, &p).unwrap();
    let text = std::fs::read_to_string(&p).unwrap();
    let mut lines: Vec<&str> = text.lines().collect();
    lines.truncate(2 + k);
    std::fs::write(&p, lines.join("\n") + "\n").unwrap();
    segsplice::bpe::load_bpe(&p).unwrap()
}

fn boundaries(model: &BpeModel, word: &str) -> std::collections::BTreeSet<usize> {
    model
        .tokenize_spans(word)
        .unwrap()
        .iter()
        .map(|s| s.grapheme_start)
        .collect()
}
