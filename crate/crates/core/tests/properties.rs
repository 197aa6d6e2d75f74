//! Invariants checked over generated inputs.

mod common;

use proptest::prelude::*;

use common::small_model;
use spkxl::attention::{build_permutation_masks, AttentionMaskSet};
use spkxl::dialogue::{relabel_speakers, Dialogue, SpeakerSet, Turn};
use spkxl::encoding::{
    build_window, relative_speaker_matrix, tokenize, validate_encoded, Encoder, HistoryMode, SpeakerTokens, Vocab, SEP,
};
use spkxl::metrics::{harmonic_mean, median, MetricReport};
use spkxl::train::TrainConfig;
use spkxl::{Tape, Tensor};

fn permutation(max_len: usize) -> impl Strategy<Value = Vec<usize>> {
    (1..=max_len).prop_flat_map(|n| Just((0..n).collect::<Vec<_>>()).prop_shuffle())
}

fn dialogue() -> impl Strategy<Value = Dialogue> {
    let word = prop_oneof![
        Just("where"),
        Just("is"),
        Just("the"),
        Just("hotel"),
        Just("ok"),
        Just("yes"),
        Just("far")
    ];
    let turn = (
        any::<bool>(),
        prop::collection::vec(word, 1..5),
        prop_oneof![Just("ACK"), Just("QST-WHERE"), Just("RES-INFO"), Just("FOL-EXPLAIN")],
    )
        .prop_map(|(first, words, label)| Turn {
            speaker: if first { "t" } else { "g" }.into(),
            text: words.join(" "),
            labels: vec![label.into()],
        });
    prop::collection::vec(turn, 1..7).prop_map(|turns| Dialogue {
        dialogue_id: "p".into(),
        turns,
    })
}

fn encoder(dialogues: &[Dialogue], flags: SpeakerTokens, max_seq_len: usize) -> Encoder {
    let speakers = SpeakerSet::default();
    Encoder {
        vocab: Vocab::build(dialogues, &speakers),
        speakers,
        speaker_tokens: flags,
        max_seq_len,
    }
}

proptest! {
    #[test]
    fn content_mask_is_query_mask_plus_diagonal(z in permutation(10)) {
        let m = build_permutation_masks(&z).unwrap();
        let q = m.query.as_ref().unwrap();
        let n = z.len();
        for i in 0..n {
            for j in 0..n {
                let union = AttentionMaskSet::allows(q, n, i, j) || i == j;
                prop_assert_eq!(AttentionMaskSet::allows(&m.content, n, i, j), union);
                if i == j {
                    prop_assert!(!AttentionMaskSet::allows(q, n, i, j));
                }
            }
        }
        prop_assert_eq!(q.iter().filter(|&&v| v).count(), n * (n - 1) / 2);
        // Only the first position of the order sees nothing.
        let empty: Vec<usize> = (0..n).filter(|&i| !q[i * n..(i + 1) * n].contains(&true)).collect();
        prop_assert_eq!(empty, vec![z[0]]);
    }

    #[test]
    fn relative_speaker_matrix_ignores_speaker_names(ids in prop::collection::vec(0usize..2, 1..12)) {
        let swapped: Vec<usize> = ids.iter().map(|s| 1 - s).collect();
        let m = relative_speaker_matrix(&ids);
        prop_assert_eq!(&m, &relative_speaker_matrix(&swapped));
        for (i, row) in m.iter().enumerate() {
            prop_assert_eq!(row[i], 1);
            for (j, v) in row.iter().enumerate() {
                prop_assert_eq!(*v, m[j][i]);
            }
        }
    }

    #[test]
    fn swapping_speakers_keeps_logits_without_symbol_tokens(d in dialogue(), per_speaker in 0usize..4, seed in 0u64..50) {
        let speakers = SpeakerSet::default();
        let swapped = relabel_speakers(std::slice::from_ref(&d), &speakers).remove(0);
        let enc = encoder(std::slice::from_ref(&d), SpeakerTokens::Off, 64);
        let params = small_model(seed, 8, 2, 1, enc.vocab.len(), enc.vocab.n_labels(), true);
        let t = d.turns.len() - 1;
        let a = enc.encode_window(&build_window(&d, t, per_speaker, HistoryMode::Tokens, &speakers).unwrap()).unwrap();
        let b = enc.encode_window(&build_window(&swapped, t, per_speaker, HistoryMode::Tokens, &speakers).unwrap()).unwrap();
        prop_assert_ne!(&a.speaker_ids, &b.speaker_ids);
        prop_assert_eq!(params.logits(&a).unwrap(), params.logits(&b).unwrap());
    }

    #[test]
    fn tokenize_is_idempotent(text in "[ -~]{0,60}") {
        let once = tokenize(&text);
        prop_assert_eq!(tokenize(&once.join(" ")), once.clone());
        prop_assert!(once.iter().all(|t| !t.is_empty() && !t.contains(' ')));
    }

    #[test]
    fn truncation_drops_oldest_history_first(d in dialogue(), small in 6usize..20, extra in 0usize..20) {
        let speakers = SpeakerSet::default();
        let t = d.turns.len() - 1;
        let window = build_window(&d, t, 7, HistoryMode::Labels, &speakers).unwrap();
        let short = encoder(std::slice::from_ref(&d), SpeakerTokens::All, small);
        let long = encoder(std::slice::from_ref(&d), SpeakerTokens::All, small + extra);
        let (Ok(a), Ok(b)) = (short.encode_window(&window), long.encode_window(&window)) else {
            // Only an over-long current utterance may fail, and then for
            // the shorter limit first.
            prop_assert!(short.encode_window(&window).is_err());
            return Ok(());
        };
        validate_encoded(&a).unwrap();
        prop_assert!(a.len() <= small && a.len() <= b.len());
        // Everything from the first [SEP] on is kept verbatim, and the kept
        // history is a suffix of the longer one.
        let cut = |x: &spkxl::encoding::EncodedInput| x.tokens.iter().position(|s| s == SEP).unwrap();
        prop_assert_eq!(&a.tokens[cut(&a)..], &b.tokens[cut(&b)..]);
        prop_assert!(b.tokens[..cut(&b)].ends_with(&a.tokens[..cut(&a)]));
    }

    #[test]
    fn more_history_per_speaker_never_removes_turns(d in dialogue(), k in 0usize..4) {
        let speakers = SpeakerSet::default();
        let t = d.turns.len() - 1;
        let a = build_window(&d, t, k, HistoryMode::Labels, &speakers).unwrap();
        let b = build_window(&d, t, k + 1, HistoryMode::Labels, &speakers).unwrap();
        prop_assert!(a.history.len() <= b.history.len());
        // The shorter history is a subsequence of the longer one.
        let mut rest = b.history.iter();
        prop_assert!(a.history.iter().all(|u| rest.any(|v| v == u)));
        for s in 0..2 {
            prop_assert!(a.history.iter().filter(|u| u.speaker == s).count() <= k);
        }
    }

    #[test]
    fn backward_is_linear(
        a in prop::collection::vec(-2.0f64..2.0, 6),
        b in prop::collection::vec(-2.0f64..2.0, 6),
        alpha in -3.0f64..3.0,
        beta in -3.0f64..3.0,
    ) {
        let x = Tensor::new(vec![2, 3], a).unwrap();
        let w = Tensor::new(vec![3, 2], b).unwrap();
        let grad = |ca: f64, cb: f64| -> Vec<f64> {
            let mut tape = Tape::new();
            let (xv, wv) = (tape.leaf(&x, true), tape.leaf(&w, true));
            let prod = tape.matmul(xv, wv).unwrap();
            let g = tape.gelu(prod);
            let f = tape.sum(g);
            let sq = tape.mul(xv, xv).unwrap();
            let h = tape.sum(sq);
            let f = tape.scale(f, ca);
            let h = tape.scale(h, cb);
            let loss = tape.add(f, h).unwrap();
            let grads = tape.backward(loss).unwrap();
            let mut out = grads.get(xv).map_or(vec![0.0; 6], |t| t.data().to_vec());
            out.extend(grads.get(wv).map_or(vec![0.0; 6], |t| t.data().to_vec()));
            out
        };
        let (f, h, both) = (grad(1.0, 0.0), grad(0.0, 1.0), grad(alpha, beta));
        for i in 0..both.len() {
            let want = alpha * f[i] + beta * h[i];
            prop_assert!((both[i] - want).abs() <= 1e-12 * (1.0 + want.abs()));
        }
    }

    #[test]
    fn f1_is_harmonic_mean(decisions in prop::collection::vec(
        (prop::collection::btree_set(0usize..4, 0..3), prop::collection::btree_set(0usize..4, 0..3)), 1..20)
    ) {
        let labels: Vec<String> = (0..4).map(|i| format!("l{i}")).collect();
        let pairs: Vec<(Vec<usize>, Vec<usize>)> = decisions
            .into_iter()
            .map(|(p, g)| (p.into_iter().collect(), g.into_iter().collect()))
            .collect();
        let r = MetricReport::from_decisions(&pairs, &labels).unwrap();
        prop_assert!((0.0..=1.0).contains(&r.f1));
        prop_assert!((r.f1 - harmonic_mean(r.precision, r.recall)).abs() <= 1e-15);
        let tp: usize = pairs.iter().map(|(p, g)| p.iter().filter(|x| g.contains(x)).count()).sum();
        prop_assert_eq!(r.tp, tp);
    }

    #[test]
    fn median_of_odd_count_is_middle(mut values in prop::collection::vec(-1.0f64..1.0, 1..9)) {
        if values.len() % 2 == 0 {
            prop_assert!(median(&values).is_err());
            values.pop();
        }
        let m = median(&values).unwrap();
        let below = values.iter().filter(|&&v| v < m).count();
        let above = values.iter().filter(|&&v| v > m).count();
        prop_assert!(below <= values.len() / 2 && above <= values.len() / 2);
    }

    #[test]
    fn schedule_peaks_after_warmup(total in 2usize..400, warm_frac in 0.0f64..1.0, step in 1usize..400) {
        let warmup = ((total as f64) * warm_frac) as usize;
        let cfg = TrainConfig { total_steps: total, warmup_steps: warmup, ..TrainConfig::default() };
        let lr = cfg.learning_rate_at(step.min(total));
        prop_assert!(lr >= 0.0 && lr <= cfg.learning_rate * (1.0 + 1e-12));
        if warmup > 0 {
            prop_assert!((cfg.learning_rate_at(warmup) - cfg.learning_rate).abs() <= 1e-15);
        }
    }
}
