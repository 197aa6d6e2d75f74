//! A synthetic task that can only be solved by tracking who said what.
//!
//! Every turn says a single topic token. The gold label of a turn is the topic
//! of the most recent earlier turn by the same speaker (`none` if there is
//! none). Each new topic avoids both speakers' latest topics, so the current
//! turn's own topic gives nothing away, and the two candidate answers (each
//! speaker's latest topic) look alike unless speaker identity is visible.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dialogue::{Dialogue, SpeakerSet, Turn};
use crate::error::{Error, Result};

pub const NO_TOPIC: &str = "none";

pub fn topic_token(k: usize) -> String {
    format!("topic{k}")
}

/// Generates `n_dialogues` dialogues with tags from `speakers`.
///
/// The first two turns go to different speakers (chosen at random); later
/// speakers are drawn uniformly, so turn position carries no speaker
/// information.
pub fn generate_synthetic(
    n_dialogues: usize,
    turns_per_dialogue: usize,
    n_topics: usize,
    seed: u64,
    speakers: &SpeakerSet,
) -> Result<Vec<Dialogue>> {
    if n_topics < 1 {
        return Err(Error::Config("n_topics must be at least 1".into()));
    }
    if turns_per_dialogue < 2 {
        return Err(Error::Config("turns_per_dialogue must be at least 2".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n_dialogues);
    for d in 0..n_dialogues {
        let first: usize = rng.random_range(0..2);
        let mut last_topic: [Option<usize>; 2] = [None, None];
        let mut turns = Vec::with_capacity(turns_per_dialogue);
        for t in 0..turns_per_dialogue {
            let spk = match t {
                0 => first,
                1 => 1 - first,
                _ => rng.random_range(0..2),
            };
            let label = last_topic[spk].map_or_else(|| NO_TOPIC.to_string(), topic_token);
            let allowed: Vec<usize> = (0..n_topics).filter(|k| !last_topic.contains(&Some(*k))).collect();
            let topic = match allowed.choose(&mut rng) {
                Some(&k) => k,
                // Too few topics to avoid both active ones; only the
                // speaker's own latest topic is avoided, if possible.
                None => {
                    let own: Vec<usize> = (0..n_topics).filter(|&k| last_topic[spk] != Some(k)).collect();
                    *own.choose(&mut rng).unwrap_or(&0)
                }
            };
            last_topic[spk] = Some(topic);
            turns.push(Turn {
                speaker: speakers.tags[spk].clone(),
                text: topic_token(topic),
                labels: vec![label],
            });
        }
        out.push(Dialogue {
            dialogue_id: format!("syn{d:04}"),
            turns,
        });
    }
    Ok(out)
}

/// Re-derives every gold label from the raw turns.
pub fn rule_labels(dialogue: &Dialogue) -> Vec<String> {
    dialogue
        .turns
        .iter()
        .enumerate()
        .map(|(t, turn)| {
            dialogue.turns[..t]
                .iter()
                .rev()
                .find(|p| p.speaker == turn.speaker)
                .map_or_else(|| NO_TOPIC.to_string(), |p| p.text.clone())
        })
        .collect()
}

/// Train/valid/test split by whole dialogues, in order, 80/10/10.
pub fn split_corpus(dialogues: &[Dialogue]) -> (Vec<Dialogue>, Vec<Dialogue>, Vec<Dialogue>) {
    let n = dialogues.len();
    let n_train = n * 8 / 10;
    let n_valid = n / 10;
    (
        dialogues[..n_train].to_vec(),
        dialogues[n_train..n_train + n_valid].to_vec(),
        dialogues[n_train + n_valid..].to_vec(),
    )
}

/// A token-id stream for pretraining: a fixed cycle through ids
/// `first_id..first_id + n_symbols`, with each position replaced by a random
/// symbol with probability `noise`.
pub fn toy_token_stream(len: usize, first_id: usize, n_symbols: usize, noise: f64, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len)
        .map(|i| {
            if rng.random_bool(noise) {
                first_id + rng.random_range(0..n_symbols)
            } else {
                first_id + i % n_symbols
            }
        })
        .collect()
}
