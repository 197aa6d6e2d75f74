//! The stacked network and its two forward modes.
//!
//! Finetuning runs only the content stream with bidirectional attention and
//! classifies from the final hidden state at `[CLS]`. Pretraining runs the
//! query and content streams together under permutation masks and predicts
//! tokens from the query stream through the tied embedding.
//!
//! Every sublayer is `LayerNorm(x + f(x))`: attention, then the position-wise
//! feed-forward block.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};

use crate::attention::{
    attention_layer, attention_scores, build_permutation_masks, project_keys, relative_position_keys, two_stream_layer,
    AttentionConfig, AttentionMaskSet, AttentionParams, AttentionVars, RelativeLayout, ScoreFlags,
};
use crate::autograd::{LabelMode, Tape, Var};
use crate::encoding::{EncodedInput, SpeakerTokens};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub n_labels: usize,
    pub n_segments: usize,
    pub max_seq_len: usize,
    pub dropout: f64,
    pub speaker_tokens: SpeakerTokens,
    pub relative_speaker_attention: bool,
    pub label_mode: LabelMode,
    pub seed: u64,
    pub init_std: f64,
    pub layer_norm_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 2,
            d_model: 64,
            n_heads: 4,
            d_ff: 256,
            vocab_size: 0,
            n_labels: 0,
            n_segments: 3,
            max_seq_len: 128,
            dropout: 0.1,
            speaker_tokens: SpeakerTokens::CurrentOnly,
            relative_speaker_attention: false,
            label_mode: LabelMode::Single,
            seed: 0,
            init_std: 0.02,
            layer_norm_eps: 1e-12,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        AttentionConfig::new(self.n_heads, self.d_model)?;
        let positive = [
            ("n_layers", self.n_layers),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("n_labels", self.n_labels),
            ("n_segments", self.n_segments),
            ("max_seq_len", self.max_seq_len),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout must be in [0, 1), got {}",
                self.dropout
            )));
        }
        if !(self.init_std > 0.0 && self.layer_norm_eps > 0.0) {
            return Err(Error::Config("init_std and layer_norm_eps must be positive".into()));
        }
        Ok(())
    }

    pub fn attention(&self) -> AttentionConfig {
        AttentionConfig {
            n_heads: self.n_heads,
            d_model: self.d_model,
        }
    }

    pub fn score_flags(&self) -> ScoreFlags {
        ScoreFlags {
            segment: true,
            speaker: self.relative_speaker_attention,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeedForwardParams<T> {
    pub w1: T,
    pub b1: T,
    pub w2: T,
    pub b2: T,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerParams<T> {
    pub attention: AttentionParams<T>,
    pub ln1_gamma: T,
    pub ln1_beta: T,
    pub ff: FeedForwardParams<T>,
    pub ln2_gamma: T,
    pub ln2_beta: T,
}

/// Positions of every parameter of the model, either as indices into a
/// [`ParamStore`] or as handles on a tape.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelParts<T> {
    pub embedding: T,
    /// The trainable start vector of the query stream, `[1×d_model]`.
    pub query_start: T,
    pub layers: Vec<LayerParams<T>>,
    pub head_w: T,
    pub head_b: T,
    pub lm_bias: T,
}

impl<T: Copy> ModelParts<T> {
    pub fn map<U: Copy>(&self, f: impl Fn(T) -> U) -> ModelParts<U> {
        ModelParts {
            embedding: f(self.embedding),
            query_start: f(self.query_start),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    attention: l.attention.map(&f),
                    ln1_gamma: f(l.ln1_gamma),
                    ln1_beta: f(l.ln1_beta),
                    ff: FeedForwardParams {
                        w1: f(l.ff.w1),
                        b1: f(l.ff.b1),
                        w2: f(l.ff.w2),
                        b2: f(l.ff.b2),
                    },
                    ln2_gamma: f(l.ln2_gamma),
                    ln2_beta: f(l.ln2_beta),
                })
                .collect(),
            head_w: f(self.head_w),
            head_b: f(self.head_b),
            lm_bias: f(self.lm_bias),
        }
    }
}

pub type ModelVars = ModelParts<Var>;

/// Named parameter tensors in registration order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &mut self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn n_values(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }
}

#[derive(Debug, Clone, Copy)]
enum Init {
    Normal,
    Zeros,
    Ones,
}

struct Spec {
    name: String,
    shape: Vec<usize>,
    init: Init,
}

/// Parameter names, shapes and initialisers, in registration order.
fn param_specs(cfg: &ModelConfig) -> (Vec<Spec>, ModelParts<usize>) {
    let d = cfg.d_model;
    let dh = d / cfg.n_heads;
    let mut specs = Vec::new();
    let mut reg = |name: String, shape: Vec<usize>, init: Init| {
        specs.push(Spec { name, shape, init });
        specs.len() - 1
    };
    let embedding = reg("embedding".into(), vec![cfg.vocab_size, d], Init::Normal);
    let query_start = reg("query_start".into(), vec![1, d], Init::Normal);
    let mut layers = Vec::with_capacity(cfg.n_layers);
    for l in 0..cfg.n_layers {
        let p = |s: &str| format!("layer{l}.{s}");
        let attention = AttentionParams {
            w_q: reg(p("attn.w_q"), vec![d, d], Init::Normal),
            w_k: reg(p("attn.w_k"), vec![d, d], Init::Normal),
            w_v: reg(p("attn.w_v"), vec![d, d], Init::Normal),
            w_o: reg(p("attn.w_o"), vec![d, d], Init::Normal),
            w_pos: reg(p("attn.w_pos"), vec![d, d], Init::Normal),
            w_seg: reg(p("attn.w_seg"), vec![d, d], Init::Normal),
            w_spk: reg(p("attn.w_spk"), vec![d, d], Init::Normal),
            b_cont: reg(p("attn.b_cont"), vec![dh], Init::Zeros),
            b_pos: reg(p("attn.b_pos"), vec![dh], Init::Zeros),
            b_seg: reg(p("attn.b_seg"), vec![dh], Init::Zeros),
            b_spk: reg(p("attn.b_spk"), vec![dh], Init::Zeros),
            segment_table: reg(p("attn.segment_table"), vec![2, d], Init::Normal),
            speaker_table: reg(p("attn.speaker_table"), vec![2, d], Init::Normal),
        };
        let ln1_gamma = reg(p("ln1.gamma"), vec![d], Init::Ones);
        let ln1_beta = reg(p("ln1.beta"), vec![d], Init::Zeros);
        let ff = FeedForwardParams {
            w1: reg(p("ff.w1"), vec![d, cfg.d_ff], Init::Normal),
            b1: reg(p("ff.b1"), vec![cfg.d_ff], Init::Zeros),
            w2: reg(p("ff.w2"), vec![cfg.d_ff, d], Init::Normal),
            b2: reg(p("ff.b2"), vec![d], Init::Zeros),
        };
        let ln2_gamma = reg(p("ln2.gamma"), vec![d], Init::Ones);
        let ln2_beta = reg(p("ln2.beta"), vec![d], Init::Zeros);
        layers.push(LayerParams {
            attention,
            ln1_gamma,
            ln1_beta,
            ff,
            ln2_gamma,
            ln2_beta,
        });
    }
    let head_w = reg("head.w".into(), vec![d, cfg.n_labels], Init::Normal);
    let head_b = reg("head.b".into(), vec![cfg.n_labels], Init::Zeros);
    let lm_bias = reg("lm_bias".into(), vec![cfg.vocab_size], Init::Zeros);
    let ids = ModelParts {
        embedding,
        query_start,
        layers,
        head_w,
        head_b,
        lm_bias,
    };
    (specs, ids)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub ids: ModelParts<usize>,
}

impl ModelParams {
    /// Seeded initialisation: `N(0, init_std)` weights, embeddings and
    /// relative tables; zero biases; unit layer-norm gains.
    pub fn init(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let (specs, ids) = param_specs(config);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let normal = Normal::new(0.0, config.init_std).map_err(|e| Error::Config(format!("init_std: {e}")))?;
        let mut names = Vec::with_capacity(specs.len());
        let mut tensors = Vec::with_capacity(specs.len());
        for spec in specs {
            let len: usize = spec.shape.iter().product();
            let data = match spec.init {
                Init::Normal => (0..len).map(|_| rng.sample(normal)).collect(),
                Init::Zeros => vec![0.0; len],
                Init::Ones => vec![1.0; len],
            };
            names.push(spec.name);
            tensors.push(Tensor::new(spec.shape, data)?);
        }
        Ok(Self {
            config: config.clone(),
            store: ParamStore { names, tensors },
            ids,
        })
    }

    /// Reassembles parameters from named tensors, checking every expected
    /// name and shape.
    pub fn from_named(config: &ModelConfig, named: Vec<(String, Tensor)>) -> Result<Self> {
        config.validate()?;
        let (specs, ids) = param_specs(config);
        let mut by_name: std::collections::HashMap<String, Tensor> = named.into_iter().collect();
        let mut names = Vec::with_capacity(specs.len());
        let mut tensors = Vec::with_capacity(specs.len());
        for spec in specs {
            let t = by_name
                .remove(&spec.name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{}`", spec.name)))?;
            if t.shape() != spec.shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{}` has shape {:?}, expected {:?}",
                    spec.name,
                    t.shape(),
                    spec.shape
                )));
            }
            names.push(spec.name);
            tensors.push(t);
        }
        if let Some(extra) = by_name.keys().next() {
            return Err(Error::Checkpoint(format!("unexpected tensor `{extra}`")));
        }
        Ok(Self {
            config: config.clone(),
            store: ParamStore { names, tensors },
            ids,
        })
    }

    /// Puts every parameter on `tape` as a borrowed leaf.
    pub fn bind<'a>(&'a self, tape: &mut Tape<'a>, requires_grad: bool) -> (Vec<Var>, ModelVars) {
        let vars: Vec<Var> = self.store.tensors.iter().map(|t| tape.leaf(t, requires_grad)).collect();
        let model = self.ids.map(|i| vars[i]);
        (vars, model)
    }

    /// Finetuning logits for one input, without dropout.
    pub fn logits(&self, input: &EncodedInput) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let (_, vars) = self.bind(&mut tape, false);
        let out = forward_finetune(&mut tape, &vars, &self.config, input, &mut Dropout::off())?;
        Ok(tape.value(out).data().to_vec())
    }
}

/// Inverted dropout driven by an explicit generator; [`Dropout::off`] is the
/// identity.
pub struct Dropout<'r> {
    rate: f64,
    rng: Option<&'r mut ChaCha8Rng>,
}

impl<'r> Dropout<'r> {
    pub fn off() -> Self {
        Self { rate: 0.0, rng: None }
    }

    pub fn new(rate: f64, rng: &'r mut ChaCha8Rng) -> Self {
        Self { rate, rng: Some(rng) }
    }

    pub fn apply(&mut self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let Some(rng) = self.rng.as_deref_mut() else {
            return Ok(x);
        };
        if self.rate <= 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - self.rate;
        let factors = (0..tape.value(x).len())
            .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        tape.mul_const(x, factors)
    }
}

/// `x + W2·GELU(W1·x + b1) + b2`, row by row.
pub fn posff(tape: &mut Tape<'_>, x: Var, ff: &FeedForwardParams<Var>, dropout: &mut Dropout<'_>) -> Result<Var> {
    let inner = tape.matmul(x, ff.w1)?;
    let inner = tape.add_row(inner, ff.b1)?;
    let act = tape.gelu(inner);
    let out = tape.matmul(act, ff.w2)?;
    let out = tape.add_row(out, ff.b2)?;
    let out = dropout.apply(tape, out)?;
    tape.add(x, out)
}

/// Residual, normalisation and feed-forward treatment of an attention output.
fn finish_sublayers(
    tape: &mut Tape<'_>,
    residual: Var,
    attended: Var,
    layer: &LayerParams<Var>,
    eps: f64,
    dropout: &mut Dropout<'_>,
) -> Result<Var> {
    let attended = dropout.apply(tape, attended)?;
    let x = tape.add(residual, attended)?;
    let x = tape.layer_norm(x, layer.ln1_gamma, layer.ln1_beta, eps)?;
    let y = posff(tape, x, &layer.ff, dropout)?;
    tape.layer_norm(y, layer.ln2_gamma, layer.ln2_beta, eps)
}

/// Content-stream layer under `mask`; returns the new hidden states.
#[allow(clippy::too_many_arguments)]
pub fn content_layer(
    tape: &mut Tape<'_>,
    h: Var,
    mask: &[bool],
    layout: &RelativeLayout,
    position_table: Var,
    layer: &LayerParams<Var>,
    config: &ModelConfig,
    dropout: &mut Dropout<'_>,
) -> Result<Var> {
    let att: &AttentionVars = &layer.attention;
    let keys = project_keys(tape, h, position_table, att)?;
    let scores = attention_scores(tape, h, &keys, layout, att, config.attention(), config.score_flags())?;
    let attended = attention_layer(tape, &scores, &keys, mask, att, config.attention(), false)?;
    finish_sublayers(tape, h, attended, layer, config.layer_norm_eps, dropout)
}

/// Final content-stream hidden states `[T×d_model]` for an encoded input.
pub fn encode_hidden(
    tape: &mut Tape<'_>,
    vars: &ModelVars,
    config: &ModelConfig,
    input: &EncodedInput,
    dropout: &mut Dropout<'_>,
) -> Result<Var> {
    let len = input.len();
    if len > config.max_seq_len {
        return Err(Error::Overlength {
            len,
            max: config.max_seq_len,
        });
    }
    if let Some(&bad) = input.segment_ids.iter().find(|&&s| s >= config.n_segments) {
        return Err(Error::IndexOutOfRange {
            id: bad,
            size: config.n_segments,
        });
    }
    let layout = RelativeLayout::new(&input.segment_ids, &input.speaker_ids)?;
    let masks = AttentionMaskSet::finetune(&input.padding);
    let position_table = tape.constant(relative_position_keys(len, config.d_model));
    let mut h = tape.embedding_lookup(vars.embedding, &input.token_ids)?;
    h = dropout.apply(tape, h)?;
    for layer in &vars.layers {
        h = content_layer(tape, h, &masks.content, &layout, position_table, layer, config, dropout)?;
    }
    Ok(h)
}

/// Classification logits `[1×K]` read from the `[CLS]` position.
pub fn forward_finetune(
    tape: &mut Tape<'_>,
    vars: &ModelVars,
    config: &ModelConfig,
    input: &EncodedInput,
    dropout: &mut Dropout<'_>,
) -> Result<Var> {
    let h = encode_hidden(tape, vars, config, input, dropout)?;
    let cls = tape.select_rows(h, &[input.cls_position])?;
    let logits = tape.matmul(cls, vars.head_w)?;
    tape.add_row(logits, vars.head_b)
}

/// Targets for a batch of one: one-hot (single) or multi-hot (multi).
pub fn target_row(gold: &[usize], n_labels: usize, mode: LabelMode) -> Result<Tensor> {
    let mut row = vec![0.0; n_labels];
    for &g in gold {
        if g >= n_labels {
            return Err(Error::IndexOutOfRange { id: g, size: n_labels });
        }
        row[g] = 1.0;
    }
    if mode == LabelMode::Single && gold.len() != 1 {
        return Err(Error::InvalidTarget {
            row: 0,
            reason: format!("single-label mode needs exactly one gold label, got {}", gold.len()),
        });
    }
    Tensor::new(vec![1, n_labels], row)
}

/// Outputs of the two-stream stack.
#[derive(Debug, Clone)]
pub struct StreamOutputs {
    /// Token embeddings `e(x)`, the content stream input.
    pub embedded: Var,
    /// Query stream after each layer.
    pub query: Vec<Var>,
    /// Content stream after each layer.
    pub content: Vec<Var>,
}

/// A plain token sequence for the two-stream path, with per-position
/// segment and speaker ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SequenceInput {
    pub token_ids: Vec<usize>,
    pub segment_ids: Vec<usize>,
    pub speaker_ids: Vec<usize>,
}

impl SequenceInput {
    /// The first half is segment A and the second half segment B, as two
    /// consecutive spans of text; all positions share speaker 0.
    pub fn two_segments(token_ids: Vec<usize>) -> Self {
        let len = token_ids.len();
        Self {
            segment_ids: (0..len).map(|i| usize::from(2 * i >= len)).collect(),
            speaker_ids: vec![0; len],
            token_ids,
        }
    }

    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }
}

/// Runs both streams over `input` under the masks of order `z`.
pub fn two_stream_forward(
    tape: &mut Tape<'_>,
    vars: &ModelVars,
    config: &ModelConfig,
    input: &SequenceInput,
    z: &[usize],
    dropout: &mut Dropout<'_>,
) -> Result<StreamOutputs> {
    let len = input.len();
    if input.segment_ids.len() != len || input.speaker_ids.len() != len {
        return Err(Error::ShapeMismatch {
            op: "two_stream_forward",
            left: vec![len],
            right: vec![input.segment_ids.len(), input.speaker_ids.len()],
        });
    }
    if len != z.len() {
        return Err(Error::InvalidPermutation(format!(
            "order has {} entries for {len} tokens",
            z.len()
        )));
    }
    if len > config.max_seq_len {
        return Err(Error::Overlength {
            len,
            max: config.max_seq_len,
        });
    }
    let masks = build_permutation_masks(z)?;
    let layout = RelativeLayout::new(&input.segment_ids, &input.speaker_ids)?;
    let position_table = tape.constant(relative_position_keys(len, config.d_model));
    let embedded = tape.embedding_lookup(vars.embedding, &input.token_ids)?;
    let mut h = dropout.apply(tape, embedded)?;
    let mut g = tape.select_rows(vars.query_start, &vec![0; len])?;
    let mut query = Vec::with_capacity(vars.layers.len());
    let mut content = Vec::with_capacity(vars.layers.len());
    for layer in &vars.layers {
        let (g_att, h_att) = two_stream_layer(
            tape,
            g,
            h,
            &masks,
            &layout,
            position_table,
            &layer.attention,
            config.attention(),
            config.score_flags(),
        )?;
        g = finish_sublayers(tape, g, g_att, layer, config.layer_norm_eps, dropout)?;
        h = finish_sublayers(tape, h, h_att, layer, config.layer_norm_eps, dropout)?;
        query.push(g);
        content.push(h);
    }
    Ok(StreamOutputs {
        embedded,
        query,
        content,
    })
}

/// The last `⌈T/6⌉` positions of order `z`.
pub fn partial_prediction_targets(z: &[usize]) -> Vec<usize> {
    let k = z.len().div_ceil(6);
    z[z.len() - k..].to_vec()
}

/// Mean negative log-likelihood of `input.token_ids[p]` for every `p` in
/// `predict`, each predicted from the final query stream at `p` through the
/// tied embedding.
pub fn forward_pretrain(
    tape: &mut Tape<'_>,
    vars: &ModelVars,
    config: &ModelConfig,
    input: &SequenceInput,
    z: &[usize],
    predict: &[usize],
    dropout: &mut Dropout<'_>,
) -> Result<Var> {
    if predict.is_empty() {
        return Err(Error::Config(
            "pretraining needs at least one predicted position".into(),
        ));
    }
    let streams = two_stream_forward(tape, vars, config, input, z, dropout)?;
    let g = *streams
        .query
        .last()
        .ok_or_else(|| Error::Config("model has no layers".into()))?;
    let picked = tape.select_rows(g, predict)?;
    let emb_t = tape.transpose(vars.embedding)?;
    let logits = tape.matmul(picked, emb_t)?;
    let logits = tape.add_row(logits, vars.lm_bias)?;
    let v = config.vocab_size;
    let mut targets = vec![0.0; predict.len() * v];
    for (r, &p) in predict.iter().enumerate() {
        targets[r * v + input.token_ids[p]] = 1.0;
    }
    let targets = Tensor::new(vec![predict.len(), v], targets)?;
    tape.cross_entropy(logits, &targets, LabelMode::Single)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            n_layers: 1,
            d_model: 8,
            n_heads: 2,
            d_ff: 16,
            vocab_size: 12,
            n_labels: 3,
            dropout: 0.0,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn init_is_deterministic() {
        let a = ModelParams::init(&tiny()).unwrap();
        let b = ModelParams::init(&tiny()).unwrap();
        assert_eq!(a, b);
        let c = ModelParams::init(&ModelConfig { seed: 1, ..tiny() }).unwrap();
        assert_ne!(a.store, c.store);
    }

    #[test]
    fn embedding_shape_follows_config() {
        let cfg = ModelConfig {
            vocab_size: 100,
            n_labels: 4,
            ..ModelConfig::default()
        };
        let p = ModelParams::init(&cfg).unwrap();
        assert_eq!(p.store.get("embedding").unwrap().shape(), &[100, 64]);
        assert_eq!(p.store.get("layer1.attn.b_spk").unwrap().shape(), &[16]);
        assert_eq!(p.store.get("head.w").unwrap().shape(), &[64, 4]);
    }

    #[test]
    fn invalid_config_is_rejected() {
        assert!(ModelParams::init(&ModelConfig { n_heads: 3, ..tiny() }).is_err());
        assert!(ModelParams::init(&ModelConfig {
            vocab_size: 0,
            ..tiny()
        })
        .is_err());
    }

    #[test]
    fn posff_with_zero_weights_is_identity() {
        let x = Tensor::new(vec![3, 4], (0..12).map(|v| v as f64 * 0.3 - 1.0).collect()).unwrap();
        let (w1, b1) = (Tensor::zeros(&[4, 6]), Tensor::zeros(&[6]));
        let (w2, b2) = (Tensor::zeros(&[6, 4]), Tensor::zeros(&[4]));
        let mut tape = Tape::new();
        let xv = tape.leaf(&x, false);
        let ff = FeedForwardParams {
            w1: tape.leaf(&w1, false),
            b1: tape.leaf(&b1, false),
            w2: tape.leaf(&w2, false),
            b2: tape.leaf(&b2, false),
        };
        let out = posff(&mut tape, xv, &ff, &mut Dropout::off()).unwrap();
        assert_eq!(tape.value(out), &x);
    }

    #[test]
    fn partial_prediction_takes_last_sixth() {
        assert_eq!(partial_prediction_targets(&[3, 1, 0, 2]), vec![2]);
        assert_eq!(partial_prediction_targets(&[0, 1, 2, 3, 4, 5, 6]), vec![5, 6]);
    }

    #[test]
    fn target_row_modes() {
        assert_eq!(target_row(&[1], 3, LabelMode::Single).unwrap().data(), &[0.0, 1.0, 0.0]);
        assert!(target_row(&[0, 2], 3, LabelMode::Single).is_err());
        assert_eq!(
            target_row(&[0, 2], 3, LabelMode::Multi).unwrap().data(),
            &[1.0, 0.0, 1.0]
        );
        assert!(target_row(&[3], 3, LabelMode::Multi).is_err());
    }

    #[test]
    fn overlength_input_is_rejected() {
        let cfg = ModelConfig {
            max_seq_len: 3,
            ..tiny()
        };
        let p = ModelParams::init(&cfg).unwrap();
        let input = EncodedInput {
            token_ids: vec![5, 1, 6, 1, 2],
            segment_ids: vec![0, 0, 1, 1, 2],
            speaker_ids: vec![0, 0, 1, 1, 2],
            padding: vec![false; 5],
            gold: vec![0],
            tokens: vec![String::new(); 5],
            sep_positions: [1, 3],
            cls_position: 4,
        };
        assert!(matches!(p.logits(&input), Err(Error::Overlength { len: 5, max: 3 })));
    }
}
