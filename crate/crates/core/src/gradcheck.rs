//! Central-difference verification of analytic gradients.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autograd::{Tape, Var};
use crate::dialogue::{Dialogue, SpeakerSet, Turn};
use crate::encoding::{build_window, EncodedInput, Encoder, HistoryMode, SpeakerTokens, Vocab};
use crate::error::{Error, Result};
use crate::model::{
    forward_finetune, forward_pretrain, partial_prediction_targets, target_row, Dropout, ModelConfig, ModelParams,
    SequenceInput,
};
use crate::tensor::Tensor;

/// Floor of the relative-error denominator.
pub const REL_ERROR_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub max_rel_error: f64,
    /// `(input index, element index)` of the worst entry.
    pub worst: Option<(usize, usize)>,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

fn evaluate<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: for<'t> Fn(&mut Tape<'t>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t, false)).collect();
    let out = f(&mut tape, &vars)?;
    let value = tape.value(out);
    if !value.is_scalar() {
        return Err(Error::NonScalarLoss(value.shape().to_vec()));
    }
    let v = value.item();
    if !v.is_finite() {
        return Err(Error::NonFinite(format!("function value {v}")));
    }
    Ok(v)
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// How the numeric derivative is formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Difference {
    /// `(f(x+h) − f(x−h)) / 2h`.
    Central,
    /// `(4·D(h/2) − D(h)) / 3` over central differences `D`, cancelling the
    /// `h²` error term so that a larger `h` (and less roundoff) can be used.
    Richardson,
}

/// Compares the tape gradient of scalar `f` at `inputs` with
/// `(f(x+h) − f(x−h)) / 2h`, element by element, and reports the largest
/// relative error.
pub fn finite_diff_gradcheck<F>(f: F, inputs: &[Tensor], h: f64) -> Result<GradcheckReport>
where
    F: for<'t> Fn(&mut Tape<'t>, &[Var]) -> Result<Var>,
{
    finite_diff_gradcheck_with(f, inputs, h, Difference::Central)
}

pub fn finite_diff_gradcheck_with<F>(f: F, inputs: &[Tensor], h: f64, method: Difference) -> Result<GradcheckReport>
where
    F: for<'t> Fn(&mut Tape<'t>, &[Var]) -> Result<Var>,
{
    let analytic: Vec<Option<Tensor>> = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t, true)).collect();
        let out = f(&mut tape, &vars)?;
        let v = tape.value(out);
        if v.is_scalar() && !v.item().is_finite() {
            return Err(Error::NonFinite(format!("function value {}", v.item())));
        }
        let mut grads = tape.backward(out)?;
        vars.iter().map(|&v| grads.take(v)).collect()
    };

    let mut work = inputs.to_vec();
    let mut report = GradcheckReport {
        max_rel_error: 0.0,
        worst: None,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    for (ti, grad) in analytic.iter().enumerate() {
        for ei in 0..work[ti].len() {
            let original = work[ti].data()[ei];
            let mut central = |step: f64| -> Result<f64> {
                work[ti].data_mut()[ei] = original + step;
                let plus = evaluate(&f, &work)?;
                work[ti].data_mut()[ei] = original - step;
                let minus = evaluate(&f, &work)?;
                work[ti].data_mut()[ei] = original;
                Ok((plus - minus) / (2.0 * step))
            };
            let numeric = match method {
                Difference::Central => central(h)?,
                Difference::Richardson => {
                    let coarse = central(h)?;
                    (4.0 * central(h / 2.0)? - coarse) / 3.0
                }
            };
            let a = grad.as_ref().map_or(0.0, |g| g.data()[ei]);
            let err = relative_error(a, numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = err;
                report.worst = Some((ti, ei));
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

/// Full-model audit results for both forward modes.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelAudit {
    pub finetune: GradcheckReport,
    pub pretrain: GradcheckReport,
    /// Names of the worst entries, `None` when nothing was checked.
    pub finetune_worst: Option<String>,
    pub pretrain_worst: Option<String>,
}

impl ModelAudit {
    pub fn max_rel_error(&self) -> f64 {
        self.finetune.max_rel_error.max(self.pretrain.max_rel_error)
    }
}

/// The audit model: one layer, `d_model` 8, speaker attention on, no
/// dropout, and a wide initialisation so every gradient sits well above
/// finite-difference roundoff.
pub fn audit_config(seed: u64) -> ModelConfig {
    ModelConfig {
        n_layers: 1,
        d_model: 8,
        n_heads: 2,
        d_ff: 16,
        vocab_size: 0,
        n_labels: 0,
        max_seq_len: 16,
        dropout: 0.0,
        speaker_tokens: SpeakerTokens::CurrentOnly,
        relative_speaker_attention: true,
        seed,
        init_std: 0.5,
        ..ModelConfig::default()
    }
}

/// A six-position finetuning input: `[a] [SEP] [t: b] [SEP] [CLS]` with the
/// history by the other speaker.
pub fn audit_input() -> Result<(Vocab, EncodedInput)> {
    let speakers = SpeakerSet::default();
    let dialogue = Dialogue {
        dialogue_id: "audit".into(),
        turns: vec![
            Turn {
                speaker: "g".into(),
                text: "a".into(),
                labels: vec!["x".into()],
            },
            Turn {
                speaker: "t".into(),
                text: "b".into(),
                labels: vec!["y".into()],
            },
            Turn {
                speaker: "g".into(),
                text: "c".into(),
                labels: vec!["z".into()],
            },
        ],
    };
    let vocab = Vocab::build(std::slice::from_ref(&dialogue), &speakers);
    let encoder = Encoder {
        vocab: vocab.clone(),
        speakers: speakers.clone(),
        speaker_tokens: SpeakerTokens::CurrentOnly,
        max_seq_len: 16,
    };
    let window = build_window(&dialogue, 1, 7, HistoryMode::Tokens, &speakers)?;
    Ok((vocab, encoder.encode_window(&window)?))
}

fn element_name(params: &ModelParams, worst: Option<(usize, usize)>) -> Option<String> {
    worst.map(|(t, e)| format!("{}[{e}]", params.store.names()[t]))
}

/// Finite-difference audit of every parameter of a tiny model, through the
/// classification loss and through the permutation-LM loss (random order of
/// length 6 drawn from `seed`, two segments and both speakers).
pub fn audit_model(seed: u64) -> Result<ModelAudit> {
    audit_model_with(&audit_config(seed), AUDIT_STEP, Difference::Richardson)
}

/// Step of the extrapolated differences used by [`audit_model`].
pub const AUDIT_STEP: f64 = 8e-3;

/// [`audit_model`] with explicit model settings; vocabulary and label sizes
/// are filled in from the audit input, the sequence seed from `base.seed`.
pub fn audit_model_with(base: &ModelConfig, h: f64, method: Difference) -> Result<ModelAudit> {
    let (vocab, input) = audit_input()?;
    let config = ModelConfig {
        vocab_size: vocab.len(),
        n_labels: vocab.n_labels(),
        ..base.clone()
    };
    let seed = config.seed;
    let params = ModelParams::init(&config)?;
    let ids = params.ids.clone();
    let target = target_row(&input.gold, config.n_labels, config.label_mode)?;

    let finetune = finite_diff_gradcheck_with(
        |tape, vars| {
            let model = ids.map(|i| vars[i]);
            let logits = forward_finetune(tape, &model, &config, &input, &mut Dropout::off())?;
            tape.cross_entropy(logits, &target, config.label_mode)
        },
        params.store.tensors(),
        h,
        method,
    )?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sequence = SequenceInput {
        token_ids: (0..6)
            .map(|i| 5 + (i * 3 + seed as usize) % (vocab.len() - 5))
            .collect(),
        segment_ids: vec![0, 0, 0, 1, 1, 1],
        speaker_ids: vec![1, 1, 0, 0, 1, 0],
    };
    let mut z: Vec<usize> = (0..sequence.len()).collect();
    z.shuffle(&mut rng);
    let predict = partial_prediction_targets(&z);
    let pretrain = finite_diff_gradcheck_with(
        |tape, vars| {
            let model = ids.map(|i| vars[i]);
            forward_pretrain(tape, &model, &config, &sequence, &z, &predict, &mut Dropout::off())
        },
        params.store.tensors(),
        h,
        method,
    )?;
    Ok(ModelAudit {
        finetune_worst: element_name(&params, finetune.worst),
        pretrain_worst: element_name(&params, pretrain.worst),
        finetune,
        pretrain,
    })
}
