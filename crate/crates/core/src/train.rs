//! Adam with linear warmup and decay, finetuning, evaluation and a
//! permutation-LM pretraining loop.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{LabelMode, Tape};
use crate::encoding::EncodedInput;
use crate::error::{Error, Result};
use crate::metrics::MetricReport;
use crate::model::{
    forward_finetune, forward_pretrain, partial_prediction_targets, target_row, Dropout, ModelParams, SequenceInput,
};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub total_steps: usize,
    pub warmup_steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 8,
            total_steps: 500,
            warmup_steps: 50,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
            eval_every: 100,
        }
    }
}

impl TrainConfig {
    /// The full-scale recipe: lr 1e-5, batch 8, 10,000 steps, 1,000 warmup.
    pub fn full_scale() -> Self {
        Self {
            learning_rate: 1e-5,
            total_steps: 10_000,
            warmup_steps: 1_000,
            eval_every: 1_000,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.warmup_steps > self.total_steps {
            return Err(Error::Config(format!(
                "warmup_steps ({}) exceeds total_steps ({})",
                self.warmup_steps, self.total_steps
            )));
        }
        if self.batch_size == 0 || self.total_steps == 0 {
            return Err(Error::Config("batch_size and total_steps must be positive".into()));
        }
        let lr_ok = self.learning_rate.is_finite() && self.learning_rate >= 0.0;
        let eps_ok = self.epsilon.is_finite() && self.epsilon > 0.0;
        if !lr_ok || !eps_ok {
            return Err(Error::Config(
                "learning_rate must be non-negative and epsilon positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("adam betas must lie in [0, 1)".into()));
        }
        Ok(())
    }

    /// `base · min(step / warmup, (total − step) / (total − warmup))`, never
    /// negative.
    pub fn learning_rate_at(&self, step: usize) -> f64 {
        let step = step as f64;
        let warm = if self.warmup_steps == 0 {
            1.0
        } else {
            step / self.warmup_steps as f64
        };
        let decay_span = (self.total_steps - self.warmup_steps) as f64;
        let decay = if decay_span == 0.0 {
            1.0
        } else {
            (self.total_steps as f64 - step) / decay_span
        };
        self.learning_rate * warm.min(decay).max(0.0)
    }
}

/// First and second moment estimates, one buffer per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        Self {
            m: params.iter().map(|t| vec![0.0; t.len()]).collect(),
            v: params.iter().map(|t| vec![0.0; t.len()]).collect(),
        }
    }
}

/// One bias-corrected Adam update at `step` (1-based) with rate `lr`.
///
/// Every gradient is checked before any parameter moves.
#[allow(clippy::too_many_arguments)]
pub fn adam_step(
    params: &mut [Tensor],
    names: &[String],
    grads: &[Vec<f64>],
    state: &mut AdamState,
    step: usize,
    lr: f64,
    config: &TrainConfig,
) -> Result<()> {
    if step == 0 {
        return Err(Error::Config("adam steps are 1-based".into()));
    }
    for (i, g) in grads.iter().enumerate() {
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient(names.get(i).cloned().unwrap_or_default()));
        }
    }
    let (b1, b2) = (config.beta1, config.beta2);
    let c1 = 1.0 - b1.powi(step as i32);
    let c2 = 1.0 - b2.powi(step as i32);
    for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        for (((w, &gv), mv), vv) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mv = b1 * *mv + (1.0 - b1) * gv;
            *vv = b2 * *vv + (1.0 - b2) * gv * gv;
            let m_hat = *mv / c1;
            let v_hat = *vv / c2;
            *w -= lr * m_hat / (v_hat.sqrt() + config.epsilon);
        }
    }
    Ok(())
}

/// Training log line: per-step loss or per-evaluation F1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LogEntry {
    Step { step: usize, loss: f64, lr: f64 },
    Eval { step: usize, split: String, f1: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRun {
    pub config: TrainConfig,
    pub seed: u64,
    pub log: Vec<LogEntry>,
    pub best_step: usize,
    pub best_valid_f1: Option<f64>,
}

impl TrainRun {
    pub fn losses(&self) -> Vec<f64> {
        self.log
            .iter()
            .filter_map(|e| match e {
                LogEntry::Step { loss, .. } => Some(*loss),
                LogEntry::Eval { .. } => None,
            })
            .collect()
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for entry in &self.log {
            out.push_str(&serde_json::to_string(entry)?);
            out.push('\n');
        }
        Ok(out)
    }
}

/// Loss and summed-into-`acc` gradients for one example, scaled by `weight`.
fn example_gradients(
    params: &ModelParams,
    input: &EncodedInput,
    dropout_rng: Option<&mut ChaCha8Rng>,
    weight: f64,
    acc: &mut [Vec<f64>],
) -> Result<f64> {
    let cfg = &params.config;
    let mut tape = Tape::new();
    let (vars, model) = params.bind(&mut tape, true);
    let mut dropout = match dropout_rng {
        Some(rng) if cfg.dropout > 0.0 => Dropout::new(cfg.dropout, rng),
        _ => Dropout::off(),
    };
    let logits = forward_finetune(&mut tape, &model, cfg, input, &mut dropout)?;
    let target = target_row(&input.gold, cfg.n_labels, cfg.label_mode)?;
    let loss = tape.cross_entropy(logits, &target, cfg.label_mode)?;
    let value = tape.value(loss).item();
    let mut grads = tape.backward(loss)?;
    for (slot, var) in acc.iter_mut().zip(vars) {
        if let Some(g) = grads.take(var) {
            for (a, b) in slot.iter_mut().zip(g.data()) {
                *a += weight * b;
            }
        }
    }
    Ok(value)
}

/// Predicted label indices: argmax (single) or every logit ≥ 0, i.e.
/// sigmoid ≥ 0.5 (multi).
pub fn predict_labels(logits: &[f64], mode: LabelMode) -> Vec<usize> {
    match mode {
        LabelMode::Single => {
            let best = logits.iter().enumerate().fold(
                (0, f64::NEG_INFINITY),
                |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc },
            );
            vec![best.0]
        }
        LabelMode::Multi => logits
            .iter()
            .enumerate()
            .filter(|(_, &v)| v >= 0.0)
            .map(|(i, _)| i)
            .collect(),
    }
}

pub fn evaluate_f1(params: &ModelParams, examples: &[EncodedInput], labels: &[String]) -> Result<MetricReport> {
    let mode = params.config.label_mode;
    let mut decisions = Vec::with_capacity(examples.len());
    for ex in examples {
        if let Some(&bad) = ex.gold.iter().find(|&&g| g >= labels.len()) {
            return Err(Error::UnknownLabel(format!("label index {bad}")));
        }
        let logits = params.logits(ex)?;
        decisions.push((predict_labels(&logits, mode), ex.gold.clone()));
    }
    MetricReport::from_decisions(&decisions, labels)
}

pub struct FinetuneOutcome {
    pub run: TrainRun,
    /// Parameters with the best validation F1 (the final ones without a
    /// validation set).
    pub best: ModelParams,
    pub last: ModelParams,
}

/// Mini-batch finetuning with cross-entropy loss.
///
/// Batches are drawn from a seeded reshuffle of `train` each epoch; dropout
/// masks come from a second generator derived from the same seed.
pub fn finetune(
    mut params: ModelParams,
    train: &[EncodedInput],
    valid: &[EncodedInput],
    labels: &[String],
    config: &TrainConfig,
) -> Result<FinetuneOutcome> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let mut order_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_d20f);
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(&mut order_rng);
    let mut cursor = 0;
    let mut state = AdamState::new(params.store.tensors());
    let mut log = Vec::with_capacity(config.total_steps + 8);
    let mut best: Option<(f64, usize, ModelParams)> = None;
    let weight = 1.0 / config.batch_size as f64;

    for step in 1..=config.total_steps {
        let mut grads: Vec<Vec<f64>> = params.store.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        let mut loss = 0.0;
        for _ in 0..config.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut order_rng);
                cursor = 0;
            }
            let ex = &train[order[cursor]];
            cursor += 1;
            loss += weight * example_gradients(&params, ex, Some(&mut dropout_rng), weight, &mut grads)?;
        }
        let lr = config.learning_rate_at(step);
        let names = params.store.names().to_vec();
        adam_step(params.store.tensors_mut(), &names, &grads, &mut state, step, lr, config)?;
        log.push(LogEntry::Step { step, loss, lr });

        let eval_now = (config.eval_every > 0 && step % config.eval_every == 0) || step == config.total_steps;
        if eval_now && !valid.is_empty() {
            let f1 = evaluate_f1(&params, valid, labels)?.f1;
            log.push(LogEntry::Eval {
                step,
                split: "valid".into(),
                f1,
            });
            if best.as_ref().is_none_or(|(b, _, _)| f1 > *b) {
                best = Some((f1, step, params.clone()));
            }
        }
    }
    let (best_valid_f1, best_step, best_params) = match best {
        Some((f1, step, p)) => (Some(f1), step, p),
        None => (None, config.total_steps, params.clone()),
    };
    Ok(FinetuneOutcome {
        run: TrainRun {
            config: config.clone(),
            seed: config.seed,
            log,
            best_step,
            best_valid_f1,
        },
        best: best_params,
        last: params,
    })
}

/// Settings for permutation-LM pretraining on a flat token stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub train: TrainConfig,
    pub seq_len: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig {
                total_steps: 200,
                warmup_steps: 20,
                ..TrainConfig::default()
            },
            seq_len: 16,
        }
    }
}

/// A random two-segment window of `corpus` with a random factorisation
/// order.
pub fn sample_permutation_window(
    corpus: &[usize],
    seq_len: usize,
    rng: &mut impl Rng,
) -> Result<(SequenceInput, Vec<usize>)> {
    if corpus.len() < seq_len || seq_len == 0 {
        return Err(Error::Config(format!(
            "corpus of {} tokens is shorter than seq_len {seq_len}",
            corpus.len()
        )));
    }
    let start = rng.random_range(0..=corpus.len() - seq_len);
    let input = SequenceInput::two_segments(corpus[start..start + seq_len].to_vec());
    let mut z: Vec<usize> = (0..seq_len).collect();
    z.shuffle(rng);
    Ok((input, z))
}

/// Mean pretraining loss over `samples` fixed windows drawn with `seed`.
pub fn pretrain_eval_loss(
    params: &ModelParams,
    corpus: &[usize],
    seq_len: usize,
    samples: usize,
    seed: u64,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for _ in 0..samples {
        let (input, z) = sample_permutation_window(corpus, seq_len, &mut rng)?;
        let mut tape = Tape::new();
        let (_, vars) = params.bind(&mut tape, false);
        let predict = partial_prediction_targets(&z);
        let loss = forward_pretrain(
            &mut tape,
            &vars,
            &params.config,
            &input,
            &z,
            &predict,
            &mut Dropout::off(),
        )?;
        total += tape.value(loss).item();
    }
    Ok(total / samples as f64)
}

/// Trains on sampled windows and returns the per-step mean batch loss.
pub fn pretrain(params: &mut ModelParams, corpus: &[usize], config: &PretrainConfig) -> Result<Vec<f64>> {
    let tc = &config.train;
    tc.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let mut state = AdamState::new(params.store.tensors());
    let weight = 1.0 / tc.batch_size as f64;
    let mut losses = Vec::with_capacity(tc.total_steps);
    for step in 1..=tc.total_steps {
        let mut grads: Vec<Vec<f64>> = params.store.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        let mut loss = 0.0;
        for _ in 0..tc.batch_size {
            let (input, z) = sample_permutation_window(corpus, config.seq_len, &mut rng)?;
            let predict = partial_prediction_targets(&z);
            let mut tape = Tape::new();
            let (vars, model) = params.bind(&mut tape, true);
            let l = forward_pretrain(
                &mut tape,
                &model,
                &params.config,
                &input,
                &z,
                &predict,
                &mut Dropout::off(),
            )?;
            loss += weight * tape.value(l).item();
            let mut g = tape.backward(l)?;
            for (slot, var) in grads.iter_mut().zip(vars) {
                if let Some(t) = g.take(var) {
                    for (a, b) in slot.iter_mut().zip(t.data()) {
                        *a += weight * b;
                    }
                }
            }
        }
        let names = params.store.names().to_vec();
        adam_step(
            params.store.tensors_mut(),
            &names,
            &grads,
            &mut state,
            step,
            tc.learning_rate_at(step),
            tc,
        )?;
        losses.push(loss);
    }
    Ok(losses)
}
