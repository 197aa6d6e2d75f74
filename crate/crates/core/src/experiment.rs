//! Ablation variants, the context-length sweep and the median-of-seeds
//! protocol, all on in-memory corpora.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dialogue::{Dialogue, SpeakerSet};
use crate::encoding::{encode_corpus, EncodedInput, Encoder, HistoryMode, SpeakerTokens, Vocab, WindowConfig};
use crate::error::{Error, Result};
use crate::metrics::{median, MetricReport};
use crate::model::{ModelConfig, ModelParams};
use crate::synthetic::{generate_synthetic, split_corpus};
use crate::train::{evaluate_f1, finetune, TrainConfig, TrainRun};

/// Speaker-modelling switches compared in the ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Variant {
    /// No speaker information at all.
    Blind,
    /// Only the current speaker's symbol token.
    Baseline,
    SpkToken,
    RelAtt,
    Both,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Self::Blind, Self::Baseline, Self::SpkToken, Self::RelAtt, Self::Both];
    /// The four rows of the published ablation.
    pub const ABLATION: [Variant; 4] = [Self::Baseline, Self::SpkToken, Self::RelAtt, Self::Both];

    pub fn speaker_tokens(self) -> SpeakerTokens {
        match self {
            Self::Blind => SpeakerTokens::Off,
            Self::Baseline | Self::RelAtt => SpeakerTokens::CurrentOnly,
            Self::SpkToken | Self::Both => SpeakerTokens::All,
        }
    }

    pub fn relative_speaker_attention(self) -> bool {
        matches!(self, Self::RelAtt | Self::Both)
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Blind => "blind",
            Self::Baseline => "baseline",
            Self::SpkToken => "+spk_token",
            Self::RelAtt => "+rel_att",
            Self::Both => "+both",
        }
    }

    /// `config` with this variant's two switches applied.
    pub fn apply(self, config: &ModelConfig) -> ModelConfig {
        ModelConfig {
            speaker_tokens: self.speaker_tokens(),
            relative_speaker_attention: self.relative_speaker_attention(),
            ..config.clone()
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl From<Variant> for String {
    fn from(v: Variant) -> Self {
        v.name().to_string()
    }
}

impl TryFrom<String> for Variant {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim_start_matches('+').replace('_', "-");
        match key.as_str() {
            "blind" => Ok(Self::Blind),
            "baseline" => Ok(Self::Baseline),
            "spk-token" => Ok(Self::SpkToken),
            "rel-att" => Ok(Self::RelAtt),
            "both" => Ok(Self::Both),
            _ => Err(Error::Config(format!(
                "unknown variant `{s}` (expected blind, baseline, +spk_token, +rel_att or +both)"
            ))),
        }
    }
}

/// Size of the generated synthetic corpus.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub n_dialogues: usize,
    pub turns_per_dialogue: usize,
    pub n_topics: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_dialogues: 200,
            turns_per_dialogue: 8,
            n_topics: 4,
            seed: 0,
        }
    }
}

/// Window settings used for the synthetic task: history as tokens, and only
/// turns that have an earlier turn by both speakers.
pub fn synthetic_window() -> WindowConfig {
    WindowConfig {
        per_speaker: 7,
        history_mode: HistoryMode::Tokens,
        min_turn: 2,
    }
}

/// Model settings for the synthetic experiments. A wider initialisation
/// than the default lets attention sharpen within the 500-step budget.
pub fn synthetic_model_config() -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        d_model: 64,
        n_heads: 4,
        d_ff: 256,
        max_seq_len: 64,
        dropout: 0.0,
        init_std: 0.05,
        ..ModelConfig::default()
    }
}

pub fn synthetic_train_config() -> TrainConfig {
    TrainConfig {
        learning_rate: 3e-3,
        batch_size: 16,
        total_steps: 500,
        warmup_steps: 50,
        eval_every: 100,
        ..TrainConfig::default()
    }
}

/// History length used when a single synthetic setting is needed: the latest
/// turn of each speaker.
pub const SYNTHETIC_L: usize = 2;

/// Per-speaker history cap for a total history length `l`.
pub fn per_speaker_cap(l: usize) -> usize {
    l.div_ceil(2)
}

#[derive(Debug, Clone)]
pub struct Corpora {
    pub speakers: SpeakerSet,
    pub vocab: Vocab,
    pub train: Vec<Dialogue>,
    pub valid: Vec<Dialogue>,
    pub test: Vec<Dialogue>,
}

impl Corpora {
    /// The vocabulary covers all three splits so that no label is unseen.
    pub fn new(speakers: SpeakerSet, train: Vec<Dialogue>, valid: Vec<Dialogue>, test: Vec<Dialogue>) -> Self {
        let all: Vec<Dialogue> = train.iter().chain(&valid).chain(&test).cloned().collect();
        let vocab = Vocab::build(&all, &speakers);
        Self {
            speakers,
            vocab,
            train,
            valid,
            test,
        }
    }

    pub fn synthetic(config: &SyntheticConfig) -> Result<Self> {
        let speakers = SpeakerSet::default();
        let dialogues = generate_synthetic(
            config.n_dialogues,
            config.turns_per_dialogue,
            config.n_topics,
            config.seed,
            &speakers,
        )?;
        let (train, valid, test) = split_corpus(&dialogues);
        Ok(Self::new(speakers, train, valid, test))
    }

    pub fn encoder(&self, speaker_tokens: SpeakerTokens, max_seq_len: usize) -> Encoder {
        Encoder {
            vocab: self.vocab.clone(),
            speakers: self.speakers.clone(),
            speaker_tokens,
            max_seq_len,
        }
    }

    /// Model config sized to this corpus.
    pub fn sized(&self, config: &ModelConfig) -> ModelConfig {
        ModelConfig {
            vocab_size: self.vocab.len(),
            n_labels: self.vocab.n_labels(),
            ..config.clone()
        }
    }
}

pub struct EncodedSplits {
    pub train: Vec<EncodedInput>,
    pub valid: Vec<EncodedInput>,
    pub test: Vec<EncodedInput>,
}

pub fn encode_splits(corpora: &Corpora, encoder: &Encoder, window: WindowConfig) -> Result<EncodedSplits> {
    let enc = |d: &[Dialogue]| -> Result<Vec<EncodedInput>> {
        Ok(encode_corpus(d, encoder, window)?.into_iter().map(|(_, e)| e).collect())
    };
    Ok(EncodedSplits {
        train: enc(&corpora.train)?,
        valid: enc(&corpora.valid)?,
        test: enc(&corpora.test)?,
    })
}

pub struct VariantOutcome {
    pub run: TrainRun,
    pub valid: MetricReport,
    pub test: MetricReport,
    pub params: ModelParams,
}

/// Trains one variant from scratch with `seed` driving both the
/// initialisation and the data order.
pub fn run_variant(
    corpora: &Corpora,
    variant: Variant,
    window: WindowConfig,
    model: &ModelConfig,
    train: &TrainConfig,
    seed: u64,
) -> Result<VariantOutcome> {
    let mut cfg = corpora.sized(&variant.apply(model));
    cfg.seed = seed;
    let encoder = corpora.encoder(cfg.speaker_tokens, cfg.max_seq_len);
    let data = encode_splits(corpora, &encoder, window)?;
    let params = ModelParams::init(&cfg)?;
    let tc = TrainConfig { seed, ..train.clone() };
    let labels = corpora.vocab.labels();
    let outcome = finetune(params, &data.train, &data.valid, labels, &tc)?;
    let valid = evaluate_f1(&outcome.best, &data.valid, labels)?;
    let test = evaluate_f1(&outcome.best, &data.test, labels)?;
    Ok(VariantOutcome {
        run: outcome.run,
        valid,
        test,
        params: outcome.best,
    })
}

/// One line of the results table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub variant: String,
    #[serde(rename = "L")]
    pub l: usize,
    pub seed: u64,
    pub split: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

pub const CSV_HEADER: &str = "variant,L,seed,split,precision,recall,f1";

impl ResultRow {
    fn new(variant: Variant, l: usize, seed: u64, split: &str, report: &MetricReport) -> Self {
        Self {
            variant: variant.name().to_string(),
            l,
            seed,
            split: split.to_string(),
            precision: report.precision,
            recall: report.recall,
            f1: report.f1,
        }
    }

    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{:.6},{:.6},{:.6}",
            self.variant, self.l, self.seed, self.split, self.precision, self.recall, self.f1
        )
    }
}

pub fn to_csv(rows: &[ResultRow]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.to_csv());
        out.push('\n');
    }
    out
}

/// Every variant at every history length `L` for every seed; one `valid` and
/// one `test` row each. `L` replaces the per-speaker cap of `window`.
/// `progress` sees each row pair as it is produced.
#[allow(clippy::too_many_arguments)]
pub fn run_matrix(
    corpora: &Corpora,
    variants: &[Variant],
    l_values: &[usize],
    seeds: &[u64],
    window: WindowConfig,
    model: &ModelConfig,
    train: &TrainConfig,
    mut progress: impl FnMut(&[ResultRow]),
) -> Result<Vec<ResultRow>> {
    let mut rows = Vec::with_capacity(variants.len() * l_values.len() * seeds.len() * 2);
    for &variant in variants {
        for &l in l_values {
            let window = WindowConfig {
                per_speaker: per_speaker_cap(l),
                ..window
            };
            for &seed in seeds {
                let out = run_variant(corpora, variant, window, model, train, seed)?;
                let pair = [
                    ResultRow::new(variant, l, seed, "valid", &out.valid),
                    ResultRow::new(variant, l, seed, "test", &out.test),
                ];
                progress(&pair);
                rows.extend(pair);
            }
        }
    }
    Ok(rows)
}

/// Median test F1 per (variant, L) over the seeds present in `rows`.
pub fn median_table(rows: &[ResultRow]) -> Result<Vec<(String, usize, f64)>> {
    let mut keys: Vec<(String, usize)> = Vec::new();
    for r in rows {
        let key = (r.variant.clone(), r.l);
        if !keys.contains(&key) {
            keys.push(key);
        }
    }
    keys.into_iter()
        .map(|(v, l)| {
            let scores: Vec<f64> = rows
                .iter()
                .filter(|r| r.variant == v && r.l == l && r.split == "test")
                .map(|r| r.f1)
                .collect();
            Ok((v, l, median(&scores)?))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_switches() {
        assert_eq!(Variant::Baseline.speaker_tokens(), SpeakerTokens::CurrentOnly);
        assert!(!Variant::Baseline.relative_speaker_attention());
        assert_eq!(Variant::Both.speaker_tokens(), SpeakerTokens::All);
        assert!(Variant::Both.relative_speaker_attention());
        assert_eq!(Variant::Blind.speaker_tokens(), SpeakerTokens::Off);
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
    }

    #[test]
    fn cap_rounds_up() {
        assert_eq!([0, 1, 2, 3, 14].map(per_speaker_cap), [0, 1, 1, 2, 7]);
    }

    #[test]
    fn matrix_cardinality() {
        let corpora = Corpora::synthetic(&SyntheticConfig {
            n_dialogues: 20,
            turns_per_dialogue: 4,
            ..SyntheticConfig::default()
        })
        .unwrap();
        let model = ModelConfig {
            n_layers: 1,
            d_model: 8,
            n_heads: 2,
            d_ff: 8,
            max_seq_len: 32,
            ..ModelConfig::default()
        };
        let train = TrainConfig {
            total_steps: 1,
            warmup_steps: 0,
            batch_size: 1,
            ..TrainConfig::default()
        };
        let rows = run_matrix(
            &corpora,
            &Variant::ABLATION,
            &[0, 2, 4],
            &[0],
            synthetic_window(),
            &model,
            &train,
            |_| {},
        )
        .unwrap();
        let test_rows = rows.iter().filter(|r| r.split == "test").count();
        assert_eq!(test_rows, 12);
        assert!(to_csv(&rows).starts_with(CSV_HEADER));
    }
}
