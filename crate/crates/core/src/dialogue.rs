//! Dialogue corpora stored as JSON Lines, one dialogue per line:
//!
//! ```json
//! {"dialogue_id": "d1", "turns": [{"speaker": "t", "text": "...", "labels": ["..."]}]}
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub speaker: String,
    pub text: String,
    pub labels: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dialogue {
    pub dialogue_id: String,
    pub turns: Vec<Turn>,
}

/// The two speaker tags of a corpus and the symbol token announcing each.
/// Tag order fixes speaker ids: the first tag is speaker 0.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpeakerSet {
    pub tags: [String; 2],
    pub symbols: [String; 2],
}

impl Default for SpeakerSet {
    fn default() -> Self {
        Self::from_tags("t", "g")
    }
}

impl SpeakerSet {
    /// Symbols default to the tag followed by a colon (`"t"` → `"t:"`).
    pub fn from_tags(first: &str, second: &str) -> Self {
        Self {
            tags: [first.to_string(), second.to_string()],
            symbols: [format!("{first}:"), format!("{second}:")],
        }
    }

    pub fn index_of(&self, tag: &str) -> Option<usize> {
        self.tags.iter().position(|t| t == tag)
    }

    pub fn symbol(&self, speaker: usize) -> &str {
        &self.symbols[speaker]
    }

    /// The same set with the tag→id assignment swapped.
    pub fn swapped(&self) -> Self {
        Self {
            tags: [self.tags[1].clone(), self.tags[0].clone()],
            symbols: [self.symbols[1].clone(), self.symbols[0].clone()],
        }
    }
}

pub fn parse_corpus(text: &str, speakers: &SpeakerSet) -> Result<Vec<Dialogue>> {
    let mut dialogues = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let dialogue: Dialogue = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        for turn in &dialogue.turns {
            if speakers.index_of(&turn.speaker).is_none() {
                return Err(Error::SpeakerTag {
                    line: line_no,
                    tag: turn.speaker.clone(),
                    allowed: speakers.tags.to_vec(),
                });
            }
            if turn.labels.is_empty() {
                return Err(Error::Parse {
                    line: line_no,
                    message: format!("turn in dialogue `{}` has no labels", dialogue.dialogue_id),
                });
            }
        }
        dialogues.push(dialogue);
    }
    Ok(dialogues)
}

pub fn read_corpus(path: impl AsRef<Path>, speakers: &SpeakerSet) -> Result<Vec<Dialogue>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_corpus(&text, speakers)
}

pub fn write_corpus(path: impl AsRef<Path>, dialogues: &[Dialogue]) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::new();
    for d in dialogues {
        serde_json::to_writer(&mut out, d)?;
        out.push(b'\n');
    }
    fs::File::create(path)
        .and_then(|mut f| f.write_all(&out))
        .map_err(|e| Error::io(path, e))
}

/// Swaps the two speaker tags on every turn.
pub fn relabel_speakers(dialogues: &[Dialogue], speakers: &SpeakerSet) -> Vec<Dialogue> {
    dialogues
        .iter()
        .map(|d| Dialogue {
            dialogue_id: d.dialogue_id.clone(),
            turns: d
                .turns
                .iter()
                .map(|t| Turn {
                    speaker: match speakers.index_of(&t.speaker) {
                        Some(i) => speakers.tags[1 - i].clone(),
                        None => t.speaker.clone(),
                    },
                    ..t.clone()
                })
                .collect(),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_input_is_empty_corpus() {
        assert!(parse_corpus("", &SpeakerSet::default()).unwrap().is_empty());
    }

    #[test]
    fn well_formed_line_round_trips() {
        let line = r#"{"dialogue_id":"d1","turns":[{"speaker":"g","text":"Hello there","labels":["FOL-EXPLAIN"]},{"speaker":"t","text":"is it far","labels":["QST-WHERE","INFO"]}]}"#;
        let ds = parse_corpus(line, &SpeakerSet::default()).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds[0].dialogue_id, "d1");
        assert_eq!(ds[0].turns.len(), 2);
        assert_eq!(ds[0].turns[0].text, "Hello there");
        assert_eq!(ds[0].turns[1].labels, vec!["QST-WHERE", "INFO"]);
    }

    #[test]
    fn foreign_speaker_tag_names_line_and_tag() {
        let text = concat!(
            r#"{"dialogue_id":"a","turns":[{"speaker":"t","text":"x","labels":["l"]}]}"#,
            "\n",
            r#"{"dialogue_id":"b","turns":[{"speaker":"x","text":"y","labels":["l"]}]}"#
        );
        let err = parse_corpus(text, &SpeakerSet::default()).unwrap_err();
        match err {
            Error::SpeakerTag { line, tag, .. } => {
                assert_eq!(line, 2);
                assert_eq!(tag, "x");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn malformed_json_reports_line() {
        let text = "\n{not json}";
        assert!(matches!(
            parse_corpus(text, &SpeakerSet::default()),
            Err(Error::Parse { line: 2, .. })
        ));
    }

    #[test]
    fn relabel_swaps_tags() {
        let speakers = SpeakerSet::default();
        let d = Dialogue {
            dialogue_id: "d".into(),
            turns: vec![Turn {
                speaker: "t".into(),
                text: "x".into(),
                labels: vec!["l".into()],
            }],
        };
        let swapped = relabel_speakers(&[d], &speakers);
        assert_eq!(swapped[0].turns[0].speaker, "g");
    }
}
