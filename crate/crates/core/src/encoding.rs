//! Dialogue windows and the model input layout.
//!
//! An encoded window is laid out as
//!
//! ```text
//! [history utterances] [SEP] [current utterance] [SEP] [CLS]
//! ```
//!
//! History tokens and the first `[SEP]` are segment A, the current utterance
//! and the second `[SEP]` segment B, and `[CLS]` has a segment of its own.
//! Every utterance token carries its speaker id; the first `[SEP]` takes the
//! speaker of the last history utterance (the current speaker when there is
//! no history), the second `[SEP]` the current speaker, and `[CLS]` the
//! sentinel [`SPEAKER_CLS`].

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::dialogue::{Dialogue, SpeakerSet};
use crate::error::{Error, Result};

pub const PAD: &str = "[PAD]";
pub const SEP: &str = "[SEP]";
pub const CLS: &str = "[CLS]";
pub const UNK: &str = "[UNK]";
pub const MASK: &str = "[MASK]";
pub const SPECIALS: [&str; 5] = [PAD, SEP, CLS, UNK, MASK];
pub const PAD_ID: usize = 0;
pub const SEP_ID: usize = 1;
pub const CLS_ID: usize = 2;
pub const UNK_ID: usize = 3;

pub const SEGMENT_A: usize = 0;
pub const SEGMENT_B: usize = 1;
pub const SEGMENT_CLS: usize = 2;
pub const SPEAKER_CLS: usize = 2;

/// Which utterances get a leading speaker symbol token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SpeakerTokens {
    /// Only the current utterance.
    #[default]
    CurrentOnly,
    All,
    Off,
}

impl std::str::FromStr for SpeakerTokens {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "current-only" => Ok(Self::CurrentOnly),
            "all" => Ok(Self::All),
            "off" => Ok(Self::Off),
            other => Err(Error::Config(format!(
                "speaker tokens must be current-only, all or off, got `{other}`"
            ))),
        }
    }
}

/// How history utterances are represented.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HistoryMode {
    /// Gold label strings of each history turn.
    #[default]
    Labels,
    /// Tokenized text of each history turn.
    Tokens,
}

impl std::str::FromStr for HistoryMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "labels" => Ok(Self::Labels),
            "tokens" => Ok(Self::Tokens),
            other => Err(Error::Config(format!(
                "history mode must be labels or tokens, got `{other}`"
            ))),
        }
    }
}

fn is_punct(c: char) -> bool {
    c.is_ascii_punctuation()
}

/// Lowercases, splits on whitespace and peels leading and trailing
/// punctuation characters off each word as separate tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    for word in text.to_lowercase().split_whitespace() {
        let chars: Vec<char> = word.chars().collect();
        let lead = chars.iter().take_while(|c| is_punct(**c)).count();
        if lead == chars.len() {
            tokens.extend(chars.iter().map(|c| c.to_string()));
            continue;
        }
        let trail = chars.iter().rev().take_while(|c| is_punct(**c)).count();
        tokens.extend(chars[..lead].iter().map(|c| c.to_string()));
        tokens.push(chars[lead..chars.len() - trail].iter().collect());
        tokens.extend(chars[chars.len() - trail..].iter().map(|c| c.to_string()));
    }
    tokens
}

/// Token representation of a label string inside history content.
pub fn label_token(label: &str) -> String {
    label.to_lowercase()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "VocabRepr", into = "VocabRepr")]
pub struct Vocab {
    tokens: Vec<String>,
    labels: Vec<String>,
    token_index: HashMap<String, usize>,
    label_index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct VocabRepr {
    tokens: Vec<String>,
    labels: Vec<String>,
}

impl From<VocabRepr> for Vocab {
    fn from(r: VocabRepr) -> Self {
        Vocab::from_parts(r.tokens, r.labels)
    }
}

impl From<Vocab> for VocabRepr {
    fn from(v: Vocab) -> Self {
        VocabRepr {
            tokens: v.tokens,
            labels: v.labels,
        }
    }
}

impl Vocab {
    fn from_parts(tokens: Vec<String>, labels: Vec<String>) -> Self {
        let token_index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        let label_index = labels.iter().enumerate().map(|(i, l)| (l.clone(), i)).collect();
        Self {
            tokens,
            labels,
            token_index,
            label_index,
        }
    }

    /// Specials, speaker symbols, label tokens, then text tokens in order of
    /// first appearance. Labels are sorted.
    pub fn build(dialogues: &[Dialogue], speakers: &SpeakerSet) -> Self {
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        let mut seen: std::collections::HashSet<String> = tokens.iter().cloned().collect();
        let mut push = |tok: String, tokens: &mut Vec<String>| {
            if seen.insert(tok.clone()) {
                tokens.push(tok);
            }
        };
        for sym in &speakers.symbols {
            push(sym.clone(), &mut tokens);
        }
        let labels: BTreeSet<&String> = dialogues
            .iter()
            .flat_map(|d| d.turns.iter().flat_map(|t| t.labels.iter()))
            .collect();
        for label in &labels {
            push(label_token(label), &mut tokens);
        }
        for d in dialogues {
            for t in &d.turns {
                for tok in tokenize(&t.text) {
                    push(tok, &mut tokens);
                }
            }
        }
        Self::from_parts(tokens, labels.into_iter().cloned().collect())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn n_labels(&self) -> usize {
        self.labels.len()
    }

    pub fn id(&self, token: &str) -> usize {
        self.token_index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map_or(UNK, String::as_str)
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter().map(|&i| self.token(i).to_string()).collect()
    }

    pub fn label_id(&self, label: &str) -> Result<usize> {
        self.label_index
            .get(label)
            .copied()
            .ok_or_else(|| Error::UnknownLabel(label.to_string()))
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn label(&self, idx: usize) -> &str {
        &self.labels[idx]
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Utterance {
    pub speaker: usize,
    pub content: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Window {
    pub history: Vec<Utterance>,
    pub current: Utterance,
    pub gold: Vec<String>,
}

/// Selects up to `per_speaker` most recent earlier turns of each speaker, in
/// time order, plus turn `t` itself.
pub fn build_window(
    dialogue: &Dialogue,
    t: usize,
    per_speaker: usize,
    mode: HistoryMode,
    speakers: &SpeakerSet,
) -> Result<Window> {
    let turns = &dialogue.turns;
    if t >= turns.len() {
        return Err(Error::TurnOutOfRange {
            index: t,
            len: turns.len(),
        });
    }
    let speaker_of = |tag: &str| {
        speakers.index_of(tag).ok_or_else(|| Error::SpeakerTag {
            line: 0,
            tag: tag.to_string(),
            allowed: speakers.tags.to_vec(),
        })
    };
    let mut taken = [0usize; 2];
    let mut history = Vec::new();
    for turn in turns[..t].iter().rev() {
        let spk = speaker_of(&turn.speaker)?;
        if taken[spk] >= per_speaker {
            continue;
        }
        taken[spk] += 1;
        let content = match mode {
            HistoryMode::Labels => turn.labels.iter().map(|l| label_token(l)).collect(),
            HistoryMode::Tokens => tokenize(&turn.text),
        };
        history.push(Utterance { speaker: spk, content });
    }
    history.reverse();
    let current = &turns[t];
    Ok(Window {
        history,
        current: Utterance {
            speaker: speaker_of(&current.speaker)?,
            content: tokenize(&current.text),
        },
        gold: current.labels.clone(),
    })
}

/// One model input; see the module docs for the layout.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodedInput {
    pub token_ids: Vec<usize>,
    pub segment_ids: Vec<usize>,
    pub speaker_ids: Vec<usize>,
    /// `true` marks a padding position.
    pub padding: Vec<bool>,
    pub gold: Vec<usize>,
    pub tokens: Vec<String>,
    pub sep_positions: [usize; 2],
    pub cls_position: usize,
}

impl EncodedInput {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    /// Appends `n` padding positions after `[CLS]`.
    pub fn padded(&self, n: usize) -> Self {
        let mut out = self.clone();
        for _ in 0..n {
            out.token_ids.push(PAD_ID);
            out.segment_ids.push(SEGMENT_A);
            out.speaker_ids.push(0);
            out.padding.push(true);
            out.tokens.push(PAD.to_string());
        }
        out
    }

    /// Inserts `n` padding positions at the front, shifting the layout.
    pub fn left_padded(&self, n: usize) -> Self {
        let mut out = self.clone();
        let prefix = |v: &mut Vec<usize>, x: usize| {
            v.splice(0..0, std::iter::repeat_n(x, n));
        };
        prefix(&mut out.token_ids, PAD_ID);
        prefix(&mut out.segment_ids, SEGMENT_A);
        prefix(&mut out.speaker_ids, 0);
        out.padding.splice(0..0, std::iter::repeat_n(true, n));
        out.tokens.splice(0..0, std::iter::repeat_n(PAD.to_string(), n));
        out.sep_positions = [self.sep_positions[0] + n, self.sep_positions[1] + n];
        out.cls_position += n;
        out
    }
}

#[derive(Debug, Clone)]
pub struct Encoder {
    pub vocab: Vocab,
    pub speakers: SpeakerSet,
    pub speaker_tokens: SpeakerTokens,
    pub max_seq_len: usize,
}

impl Encoder {
    fn utterance_tokens(&self, u: &Utterance, with_symbol: bool) -> Vec<String> {
        let mut out = Vec::with_capacity(u.content.len() + 1);
        if with_symbol {
            out.push(self.speakers.symbol(u.speaker).to_string());
        }
        out.extend(u.content.iter().cloned());
        out
    }

    /// Lays out `window`, dropping whole oldest history utterances until the
    /// sequence fits `max_seq_len`.
    pub fn encode_window(&self, window: &Window) -> Result<EncodedInput> {
        let history_symbols = self.speaker_tokens == SpeakerTokens::All;
        let current_symbol = self.speaker_tokens != SpeakerTokens::Off;
        let history: Vec<(usize, Vec<String>)> = window
            .history
            .iter()
            .map(|u| (u.speaker, self.utterance_tokens(u, history_symbols)))
            .collect();
        let current = self.utterance_tokens(&window.current, current_symbol);
        let fixed = current.len() + 3;
        if fixed > self.max_seq_len {
            return Err(Error::Overlength {
                len: fixed,
                max: self.max_seq_len,
            });
        }
        let mut start = 0;
        let mut history_len: usize = history.iter().map(|(_, t)| t.len()).sum();
        while fixed + history_len > self.max_seq_len {
            history_len -= history[start].1.len();
            start += 1;
        }
        let kept = &history[start..];

        let cur_spk = window.current.speaker;
        let mut tokens = Vec::with_capacity(fixed + history_len);
        let mut segment_ids = Vec::with_capacity(fixed + history_len);
        let mut speaker_ids = Vec::with_capacity(fixed + history_len);
        for (spk, toks) in kept {
            for t in toks {
                tokens.push(t.clone());
                segment_ids.push(SEGMENT_A);
                speaker_ids.push(*spk);
            }
        }
        let first_sep = tokens.len();
        tokens.push(SEP.to_string());
        segment_ids.push(SEGMENT_A);
        speaker_ids.push(kept.last().map_or(cur_spk, |(spk, _)| *spk));
        for t in &current {
            tokens.push(t.clone());
            segment_ids.push(SEGMENT_B);
            speaker_ids.push(cur_spk);
        }
        let second_sep = tokens.len();
        tokens.push(SEP.to_string());
        segment_ids.push(SEGMENT_B);
        speaker_ids.push(cur_spk);
        let cls_position = tokens.len();
        tokens.push(CLS.to_string());
        segment_ids.push(SEGMENT_CLS);
        speaker_ids.push(SPEAKER_CLS);

        let token_ids = tokens.iter().map(|t| self.vocab.id(t)).collect();
        let gold = window
            .gold
            .iter()
            .map(|l| self.vocab.label_id(l))
            .collect::<Result<Vec<_>>>()?;
        let len = tokens.len();
        Ok(EncodedInput {
            token_ids,
            segment_ids,
            speaker_ids,
            padding: vec![false; len],
            gold,
            tokens,
            sep_positions: [first_sep, second_sep],
            cls_position,
        })
    }
}

/// `m[i][j] = 1` iff positions `i` and `j` carry the same speaker id.
pub fn relative_speaker_matrix(speaker_ids: &[usize]) -> Vec<Vec<usize>> {
    speaker_ids
        .iter()
        .map(|&a| {
            speaker_ids
                .iter()
                .map(|&b| crate::attention::relative_index(a, b))
                .collect()
        })
        .collect()
}

/// Checks the layout invariants of an encoded input.
pub fn validate_encoded(input: &EncodedInput) -> Result<()> {
    let bad = |msg: String| Err(Error::Config(format!("invalid encoded input: {msg}")));
    let n = input.token_ids.len();
    if [
        input.segment_ids.len(),
        input.speaker_ids.len(),
        input.padding.len(),
        input.tokens.len(),
    ]
    .iter()
    .any(|&l| l != n)
    {
        return bad("field lengths differ".into());
    }
    let real: Vec<usize> = (0..n).filter(|&i| !input.padding[i]).collect();
    let Some(&last) = real.last() else {
        return bad("no real tokens".into());
    };
    if last != input.cls_position || input.token_ids[last] != CLS_ID {
        return bad("[CLS] is not the final real token".into());
    }
    let seps: Vec<usize> = real.iter().copied().filter(|&i| input.token_ids[i] == SEP_ID).collect();
    if seps != input.sep_positions {
        return bad(format!(
            "expected two [SEP]s at {:?}, found {seps:?}",
            input.sep_positions
        ));
    }
    let [s1, s2] = input.sep_positions;
    let current_speaker = input.speaker_ids[s2];
    for &i in &real {
        let expected_segment = if i <= s1 {
            SEGMENT_A
        } else if i < input.cls_position {
            SEGMENT_B
        } else {
            SEGMENT_CLS
        };
        if input.segment_ids[i] != expected_segment {
            return bad(format!("position {i} has segment {}", input.segment_ids[i]));
        }
        if s1 < i && i <= s2 && input.speaker_ids[i] != current_speaker {
            return bad(format!("position {i} is not the current speaker"));
        }
    }
    if input.speaker_ids[input.cls_position] != SPEAKER_CLS {
        return bad("[CLS] does not carry the sentinel speaker".into());
    }
    let history_real: Vec<usize> = real.iter().copied().filter(|&i| i < s1).collect();
    let first_sep_speaker = history_real.last().map_or(current_speaker, |&i| input.speaker_ids[i]);
    if input.speaker_ids[s1] != first_sep_speaker {
        return bad("first [SEP] does not carry the last history speaker".into());
    }
    Ok(())
}

/// Configuration for turning dialogues into training examples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct WindowConfig {
    pub per_speaker: usize,
    pub history_mode: HistoryMode,
    /// Turns before this index only serve as history.
    pub min_turn: usize,
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self {
            per_speaker: 7,
            history_mode: HistoryMode::Labels,
            min_turn: 0,
        }
    }
}

/// Provenance of an encoded example.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExampleRef {
    pub dialogue_id: String,
    pub turn: usize,
}

/// Encodes every eligible turn of every dialogue.
pub fn encode_corpus(
    dialogues: &[Dialogue],
    encoder: &Encoder,
    window: WindowConfig,
) -> Result<Vec<(ExampleRef, EncodedInput)>> {
    let mut out = Vec::new();
    for d in dialogues {
        for t in window.min_turn..d.turns.len() {
            let w = build_window(d, t, window.per_speaker, window.history_mode, &encoder.speakers)?;
            out.push((
                ExampleRef {
                    dialogue_id: d.dialogue_id.clone(),
                    turn: t,
                },
                encoder.encode_window(&w)?,
            ));
        }
    }
    Ok(out)
}

/// One line of the `encode` dump.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodedRecord {
    pub dialogue_id: String,
    pub turn: usize,
    pub token_ids: Vec<usize>,
    pub segment_ids: Vec<usize>,
    pub speaker_ids: Vec<usize>,
    pub tokens: Vec<String>,
    pub gold: Vec<String>,
}

impl EncodedRecord {
    pub fn new(r: &ExampleRef, input: &EncodedInput, vocab: &Vocab) -> Self {
        Self {
            dialogue_id: r.dialogue_id.clone(),
            turn: r.turn,
            token_ids: input.token_ids.clone(),
            segment_ids: input.segment_ids.clone(),
            speaker_ids: input.speaker_ids.clone(),
            tokens: input.tokens.clone(),
            gold: input.gold.iter().map(|&g| vocab.label(g).to_string()).collect(),
        }
    }
}
