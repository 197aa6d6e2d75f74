//! Relative multi-head attention.
//!
//! The aggregate score between query position `i` and key position `j` is the
//! sum of up to four terms, each of the form `(q_i + b)ᵀ k / √d_head`:
//!
//! * content: `k_j = h_j W_k`
//! * position: `k = R[i − j] W_pos`, `R` a fixed sinusoidal table
//! * segment: `k = S[same_segment(i, j)] W_seg`
//! * speaker: `k = P[same_speaker(i, j)] W_spk`
//!
//! They are added in that order, so turning the speaker term on adds exactly
//! one summand to the three-term total.
//!
//! Biases and the segment/speaker tables are shared by all heads; each head
//! uses its own column slice of every projection matrix.

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionConfig {
    pub n_heads: usize,
    pub d_model: usize,
}

impl AttentionConfig {
    pub fn new(n_heads: usize, d_model: usize) -> Result<Self> {
        if n_heads == 0 || d_model == 0 || !d_model.is_multiple_of(n_heads) {
            return Err(Error::Config(format!(
                "d_model ({d_model}) must be a positive multiple of n_heads ({n_heads})"
            )));
        }
        Ok(Self { n_heads, d_model })
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn score_scale(&self) -> f64 {
        1.0 / (self.d_head() as f64).sqrt()
    }
}

/// Which optional score components are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScoreFlags {
    pub segment: bool,
    pub speaker: bool,
}

impl Default for ScoreFlags {
    fn default() -> Self {
        Self {
            segment: true,
            speaker: false,
        }
    }
}

/// 1 when both ids are equal, else 0.
pub fn relative_index(a: usize, b: usize) -> usize {
    usize::from(a == b)
}

/// Sinusoidal encodings for offsets `−(T−1)..=(T−1)`; row `r` holds offset
/// `r − (T−1)`. Dimension `2c` is `sin(offset / 10000^(2c/d))`, dimension
/// `2c + 1` the matching cosine.
pub fn relative_position_keys(len: usize, d_model: usize) -> Tensor {
    assert!(len >= 1 && d_model >= 1);
    let rows = 2 * len - 1;
    let mut data = Vec::with_capacity(rows * d_model);
    for r in 0..rows {
        let offset = r as f64 - (len - 1) as f64;
        for dim in 0..d_model {
            let pair = (dim / 2) as f64;
            let angle = offset / 10000f64.powf(2.0 * pair / d_model as f64);
            data.push(if dim % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    Tensor::new(vec![rows, d_model], data).expect("position table shape")
}

/// Index tables mapping each `(i, j)` pair to a row of the relative keys.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RelativeLayout {
    len: usize,
    position: Vec<usize>,
    segment: Vec<usize>,
    speaker: Vec<usize>,
}

impl RelativeLayout {
    pub fn new(segment_ids: &[usize], speaker_ids: &[usize]) -> Result<Self> {
        let len = segment_ids.len();
        if len == 0 || speaker_ids.len() != len {
            return Err(Error::ShapeMismatch {
                op: "relative_layout",
                left: vec![segment_ids.len()],
                right: vec![speaker_ids.len()],
            });
        }
        let mut position = Vec::with_capacity(len * len);
        let mut segment = Vec::with_capacity(len * len);
        let mut speaker = Vec::with_capacity(len * len);
        for i in 0..len {
            for j in 0..len {
                position.push(i + len - 1 - j);
                segment.push(relative_index(segment_ids[i], segment_ids[j]));
                speaker.push(relative_index(speaker_ids[i], speaker_ids[j]));
            }
        }
        Ok(Self {
            len,
            position,
            segment,
            speaker,
        })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Row of the position table used by pair `(i, j)`: `i − j + T − 1`.
    pub fn position_index(&self) -> &[usize] {
        &self.position
    }

    pub fn segment_index(&self) -> &[usize] {
        &self.segment
    }

    pub fn speaker_index(&self) -> &[usize] {
        &self.speaker
    }
}

/// Content, query and padding masks; `true` means "may attend".
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMaskSet {
    pub len: usize,
    pub content: Vec<bool>,
    pub query: Option<Vec<bool>>,
    /// `true` marks a padding position.
    pub padding: Vec<bool>,
}

impl AttentionMaskSet {
    /// Bidirectional mask that only blocks padded keys.
    pub fn finetune(padding: &[bool]) -> Self {
        let len = padding.len();
        let content = (0..len * len).map(|ij| !padding[ij % len]).collect();
        Self {
            len,
            content,
            query: None,
            padding: padding.to_vec(),
        }
    }

    pub fn allows(mask: &[bool], len: usize, i: usize, j: usize) -> bool {
        mask[i * len + j]
    }
}

/// Masks realising factorisation order `z` (0-based positions): the query
/// stream at step `t` sees `z_<t`, the content stream sees `z_≤t`.
pub fn build_permutation_masks(z: &[usize]) -> Result<AttentionMaskSet> {
    let len = z.len();
    if len == 0 {
        return Err(Error::InvalidPermutation("empty order".into()));
    }
    let mut rank = vec![usize::MAX; len];
    for (t, &pos) in z.iter().enumerate() {
        if pos >= len {
            return Err(Error::InvalidPermutation(format!(
                "position {pos} out of range for length {len}"
            )));
        }
        if rank[pos] != usize::MAX {
            return Err(Error::InvalidPermutation(format!("position {pos} repeated")));
        }
        rank[pos] = t;
    }
    let mut content = Vec::with_capacity(len * len);
    let mut query = Vec::with_capacity(len * len);
    for i in 0..len {
        for j in 0..len {
            query.push(rank[j] < rank[i]);
            content.push(rank[j] <= rank[i]);
        }
    }
    Ok(AttentionMaskSet {
        len,
        content,
        query: Some(query),
        padding: vec![false; len],
    })
}

/// One layer's attention parameters, as store indices or tape handles.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionParams<T> {
    pub w_q: T,
    pub w_k: T,
    pub w_v: T,
    pub w_o: T,
    pub w_pos: T,
    pub w_seg: T,
    pub w_spk: T,
    pub b_cont: T,
    pub b_pos: T,
    pub b_seg: T,
    pub b_spk: T,
    pub segment_table: T,
    pub speaker_table: T,
}

impl<T: Copy> AttentionParams<T> {
    pub fn map<U>(&self, f: impl Fn(T) -> U) -> AttentionParams<U> {
        AttentionParams {
            w_q: f(self.w_q),
            w_k: f(self.w_k),
            w_v: f(self.w_v),
            w_o: f(self.w_o),
            w_pos: f(self.w_pos),
            w_seg: f(self.w_seg),
            w_spk: f(self.w_spk),
            b_cont: f(self.b_cont),
            b_pos: f(self.b_pos),
            b_seg: f(self.b_seg),
            b_spk: f(self.b_spk),
            segment_table: f(self.segment_table),
            speaker_table: f(self.speaker_table),
        }
    }
}

pub type AttentionVars = AttentionParams<Var>;

/// Key-side projections shared by every query stream of a layer.
#[derive(Debug, Clone, Copy)]
pub struct KeyProjections {
    pub content: Var,
    pub value: Var,
    pub position: Var,
    pub segment: Var,
    pub speaker: Var,
}

pub fn project_keys(
    tape: &mut Tape<'_>,
    key_input: Var,
    position_table: Var,
    vars: &AttentionVars,
) -> Result<KeyProjections> {
    Ok(KeyProjections {
        content: tape.matmul(key_input, vars.w_k)?,
        value: tape.matmul(key_input, vars.w_v)?,
        position: tape.matmul(position_table, vars.w_pos)?,
        segment: tape.matmul(vars.segment_table, vars.w_seg)?,
        speaker: tape.matmul(vars.speaker_table, vars.w_spk)?,
    })
}

/// Per-head score components, each `[T×T]` and already scaled.
#[derive(Debug, Clone)]
pub struct AttentionScores {
    pub content: Vec<Var>,
    pub position: Vec<Var>,
    pub segment: Option<Vec<Var>>,
    pub speaker: Option<Vec<Var>>,
    pub total: Vec<Var>,
}

#[allow(clippy::too_many_arguments)]
fn relative_term(
    tape: &mut Tape<'_>,
    query_head: Var,
    bias: Var,
    keys: Var,
    head: usize,
    d_head: usize,
    index: &[usize],
    len: usize,
    scale: f64,
) -> Result<Var> {
    let q = tape.add_row(query_head, bias)?;
    let k = tape.slice_cols(keys, head * d_head, d_head)?;
    let kt = tape.transpose(k)?;
    let raw = tape.matmul(q, kt)?;
    let gathered = tape.gather_cols(raw, index.to_vec(), len)?;
    Ok(tape.scale(gathered, scale))
}

/// Aggregate attention scores of `query_input` rows against the keys.
#[allow(clippy::too_many_arguments)]
pub fn attention_scores(
    tape: &mut Tape<'_>,
    query_input: Var,
    keys: &KeyProjections,
    layout: &RelativeLayout,
    vars: &AttentionVars,
    config: AttentionConfig,
    flags: ScoreFlags,
) -> Result<AttentionScores> {
    let len = layout.len();
    let qv = tape.value(query_input);
    if qv.shape() != [len, config.d_model] {
        return Err(Error::ShapeMismatch {
            op: "attention_scores",
            left: qv.shape().to_vec(),
            right: vec![len, config.d_model],
        });
    }
    let dh = config.d_head();
    let scale = config.score_scale();
    let q = tape.matmul(query_input, vars.w_q)?;

    let mut scores = AttentionScores {
        content: Vec::with_capacity(config.n_heads),
        position: Vec::with_capacity(config.n_heads),
        segment: flags.segment.then(Vec::new),
        speaker: flags.speaker.then(Vec::new),
        total: Vec::with_capacity(config.n_heads),
    };
    for head in 0..config.n_heads {
        let qh = tape.slice_cols(q, head * dh, dh)?;

        let qc = tape.add_row(qh, vars.b_cont)?;
        let kc = tape.slice_cols(keys.content, head * dh, dh)?;
        let kct = tape.transpose(kc)?;
        let raw = tape.matmul(qc, kct)?;
        let content = tape.scale(raw, scale);

        let position = relative_term(
            tape,
            qh,
            vars.b_pos,
            keys.position,
            head,
            dh,
            layout.position_index(),
            len,
            scale,
        )?;
        let mut total = tape.add(content, position)?;
        if let Some(seg) = scores.segment.as_mut() {
            let term = relative_term(
                tape,
                qh,
                vars.b_seg,
                keys.segment,
                head,
                dh,
                layout.segment_index(),
                len,
                scale,
            )?;
            total = tape.add(total, term)?;
            seg.push(term);
        }
        if let Some(spk) = scores.speaker.as_mut() {
            let term = relative_term(
                tape,
                qh,
                vars.b_spk,
                keys.speaker,
                head,
                dh,
                layout.speaker_index(),
                len,
                scale,
            )?;
            total = tape.add(total, term)?;
            spk.push(term);
        }
        scores.content.push(content);
        scores.position.push(position);
        scores.total.push(total);
    }
    Ok(scores)
}

/// Softmax over each head's total scores, weighted sum of values, head
/// concatenation and output projection.
///
/// With `allow_empty_rows`, a query row with no visible key produces a zero
/// attention output instead of an error.
pub fn attention_layer(
    tape: &mut Tape<'_>,
    scores: &AttentionScores,
    keys: &KeyProjections,
    mask: &[bool],
    vars: &AttentionVars,
    config: AttentionConfig,
    allow_empty_rows: bool,
) -> Result<Var> {
    let dh = config.d_head();
    let mut heads = Vec::with_capacity(config.n_heads);
    for (head, &total) in scores.total.iter().enumerate() {
        let p = if allow_empty_rows {
            tape.masked_softmax_or_zero(total, mask)?
        } else {
            tape.masked_softmax(total, mask)?
        };
        let v = tape.slice_cols(keys.value, head * dh, dh)?;
        heads.push(tape.matmul(p, v)?);
    }
    let joined = tape.concat_cols(&heads)?;
    tape.matmul(joined, vars.w_o)
}

/// One two-stream layer: query stream `g` under `query_mask`, content stream
/// `h` under `content_mask`, both keyed on `h`. Returns the attention outputs
/// `(ĝ, ĥ)` before residual and feed-forward treatment.
#[allow(clippy::too_many_arguments)]
pub fn two_stream_layer(
    tape: &mut Tape<'_>,
    g_prev: Var,
    h_prev: Var,
    masks: &AttentionMaskSet,
    layout: &RelativeLayout,
    position_table: Var,
    vars: &AttentionVars,
    config: AttentionConfig,
    flags: ScoreFlags,
) -> Result<(Var, Var)> {
    let (gs, hs) = (tape.value(g_prev).shape().to_vec(), tape.value(h_prev).shape().to_vec());
    if gs != hs {
        return Err(Error::ShapeMismatch {
            op: "two_stream_layer",
            left: gs,
            right: hs,
        });
    }
    let query_mask = masks
        .query
        .as_ref()
        .ok_or_else(|| Error::Config("two-stream attention needs a query mask".into()))?;
    let keys = project_keys(tape, h_prev, position_table, vars)?;
    let g_scores = attention_scores(tape, g_prev, &keys, layout, vars, config, flags)?;
    let g = attention_layer(tape, &g_scores, &keys, query_mask, vars, config, true)?;
    let h_scores = attention_scores(tape, h_prev, &keys, layout, vars, config, flags)?;
    let h = attention_layer(tape, &h_scores, &keys, &masks.content, vars, config, false)?;
    Ok((g, h))
}
