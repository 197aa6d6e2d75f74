//! Plain scalar-loop reference implementation of the network, written
//! independently of the tape so it can serve as an oracle.

#![allow(dead_code)]

use spkxl::model::ModelParams;

pub type Mat = Vec<Vec<f64>>;

pub struct Ref<'a> {
    p: &'a ModelParams,
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x * x * x)).tanh())
}

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        for j in 0..m {
            let mut s = 0.0;
            for t in 0..k {
                s += a[i][t] * b[t][j];
            }
            out[i][j] = s;
        }
    }
    out
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Score terms of one head, indexed `[i][j]`, each already scaled.
pub struct HeadScores {
    pub content: Mat,
    pub position: Mat,
    pub segment: Mat,
    pub speaker: Mat,
}

impl HeadScores {
    pub fn total(&self, use_speaker: bool) -> Mat {
        let n = self.content.len();
        (0..n)
            .map(|i| {
                (0..n)
                    .map(|j| {
                        let s = self.content[i][j] + self.position[i][j] + self.segment[i][j];
                        if use_speaker {
                            s + self.speaker[i][j]
                        } else {
                            s
                        }
                    })
                    .collect()
            })
            .collect()
    }
}

impl<'a> Ref<'a> {
    pub fn new(p: &'a ModelParams) -> Self {
        Self { p }
    }

    pub fn mat(&self, name: &str) -> Mat {
        self.p
            .store
            .get(name)
            .unwrap_or_else(|| panic!("no parameter {name}"))
            .to_rows()
    }

    pub fn vec(&self, name: &str) -> Vec<f64> {
        self.p
            .store
            .get(name)
            .unwrap_or_else(|| panic!("no parameter {name}"))
            .data()
            .to_vec()
    }

    fn d(&self) -> usize {
        self.p.config.d_model
    }

    fn heads(&self) -> usize {
        self.p.config.n_heads
    }

    /// Sinusoid for offset `i − j`.
    pub fn position_row(&self, offset: i64) -> Vec<f64> {
        let d = self.d();
        (0..d)
            .map(|k| {
                let freq = 10000f64.powf((2 * (k / 2)) as f64 / d as f64);
                let a = offset as f64 / freq;
                if k % 2 == 0 {
                    a.sin()
                } else {
                    a.cos()
                }
            })
            .collect()
    }

    /// All four score terms of every head for queries `q_in` against keys
    /// `h_in` in layer `l`.
    pub fn scores(&self, l: usize, q_in: &Mat, h_in: &Mat, segments: &[usize], speakers: &[usize]) -> Vec<HeadScores> {
        let p = |s: &str| format!("layer{l}.attn.{s}");
        let (d, nh) = (self.d(), self.heads());
        let dh = d / nh;
        let scale = 1.0 / (dh as f64).sqrt();
        let n = q_in.len();
        let q = matmul(q_in, &self.mat(&p("w_q")));
        let k = matmul(h_in, &self.mat(&p("w_k")));
        let (w_pos, w_seg, w_spk) = (self.mat(&p("w_pos")), self.mat(&p("w_seg")), self.mat(&p("w_spk")));
        let seg_keys = matmul(&self.mat(&p("segment_table")), &w_seg);
        let spk_keys = matmul(&self.mat(&p("speaker_table")), &w_spk);
        let (b_cont, b_pos, b_seg, b_spk) = (
            self.vec(&p("b_cont")),
            self.vec(&p("b_pos")),
            self.vec(&p("b_seg")),
            self.vec(&p("b_spk")),
        );
        (0..nh)
            .map(|h| {
                let cols = h * dh..(h + 1) * dh;
                let qh =
                    |i: usize, b: &[f64]| -> Vec<f64> { cols.clone().zip(b).map(|(c, bb)| q[i][c] + bb).collect() };
                let mut out = HeadScores {
                    content: vec![vec![0.0; n]; n],
                    position: vec![vec![0.0; n]; n],
                    segment: vec![vec![0.0; n]; n],
                    speaker: vec![vec![0.0; n]; n],
                };
                for i in 0..n {
                    for j in 0..n {
                        out.content[i][j] = dot(&qh(i, &b_cont), &k[j][cols.clone()]) * scale;
                        let r = self.position_row(i as i64 - j as i64);
                        let rk = matmul(&vec![r], &w_pos);
                        out.position[i][j] = dot(&qh(i, &b_pos), &rk[0][cols.clone()]) * scale;
                        let s = usize::from(segments[i] == segments[j]);
                        out.segment[i][j] = dot(&qh(i, &b_seg), &seg_keys[s][cols.clone()]) * scale;
                        let s = usize::from(speakers[i] == speakers[j]);
                        out.speaker[i][j] = dot(&qh(i, &b_spk), &spk_keys[s][cols.clone()]) * scale;
                    }
                }
                out
            })
            .collect()
    }

    /// Attention output (after `W_o`) for queries `q_in` over keys `h_in`,
    /// where `visible(i, j)` says whether query `i` may see key `j`. Rows with
    /// nothing visible give zeros.
    pub fn attend(
        &self,
        l: usize,
        q_in: &Mat,
        h_in: &Mat,
        segments: &[usize],
        speakers: &[usize],
        visible: &dyn Fn(usize, usize) -> bool,
    ) -> Mat {
        let (d, nh) = (self.d(), self.heads());
        let dh = d / nh;
        let n = q_in.len();
        let use_speaker = self.p.config.relative_speaker_attention;
        let v = matmul(h_in, &self.mat(&format!("layer{l}.attn.w_v")));
        let mut joined = vec![vec![0.0; d]; n];
        for (h, hs) in self.scores(l, q_in, h_in, segments, speakers).iter().enumerate() {
            let total = hs.total(use_speaker);
            for i in 0..n {
                let allowed: Vec<usize> = (0..n).filter(|&j| visible(i, j)).collect();
                if allowed.is_empty() {
                    continue;
                }
                let max = allowed.iter().map(|&j| total[i][j]).fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = allowed.iter().map(|&j| (total[i][j] - max).exp()).sum();
                for &j in &allowed {
                    let w = (total[i][j] - max).exp() / z;
                    for c in 0..dh {
                        joined[i][h * dh + c] += w * v[j][h * dh + c];
                    }
                }
            }
        }
        matmul(&joined, &self.mat(&format!("layer{l}.attn.w_o")))
    }

    fn layer_norm(&self, x: &Mat, gamma: &[f64], beta: &[f64]) -> Mat {
        let eps = self.p.config.layer_norm_eps;
        x.iter()
            .map(|row| {
                let n = row.len() as f64;
                let mean = row.iter().sum::<f64>() / n;
                let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                let sd = (var + eps).sqrt();
                row.iter()
                    .zip(gamma)
                    .zip(beta)
                    .map(|((v, g), b)| g * (v - mean) / sd + b)
                    .collect()
            })
            .collect()
    }

    /// `LN2(y + FF(y))` with `y = LN1(residual + attended)`.
    pub fn finish(&self, l: usize, residual: &Mat, attended: &Mat) -> Mat {
        let p = |s: &str| format!("layer{l}.{s}");
        let sum: Mat = residual
            .iter()
            .zip(attended)
            .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x + y).collect())
            .collect();
        let y = self.layer_norm(&sum, &self.vec(&p("ln1.gamma")), &self.vec(&p("ln1.beta")));
        let (w1, b1, w2, b2) = (
            self.mat(&p("ff.w1")),
            self.vec(&p("ff.b1")),
            self.mat(&p("ff.w2")),
            self.vec(&p("ff.b2")),
        );
        let inner = matmul(&y, &w1);
        let act: Mat = inner
            .iter()
            .map(|r| r.iter().zip(&b1).map(|(x, b)| gelu(x + b)).collect())
            .collect();
        let out = matmul(&act, &w2);
        let z: Mat = y
            .iter()
            .zip(&out)
            .map(|(a, o)| a.iter().zip(o).zip(&b2).map(|((x, f), b)| x + f + b).collect())
            .collect();
        self.layer_norm(&z, &self.vec(&p("ln2.gamma")), &self.vec(&p("ln2.beta")))
    }

    fn embed(&self, tokens: &[usize]) -> Mat {
        let e = self.mat("embedding");
        tokens.iter().map(|&t| e[t].clone()).collect()
    }

    /// Classification logits at `cls`; padded keys are invisible.
    pub fn logits(
        &self,
        tokens: &[usize],
        segments: &[usize],
        speakers: &[usize],
        padding: &[bool],
        cls: usize,
    ) -> Vec<f64> {
        let mut h = self.embed(tokens);
        for l in 0..self.p.config.n_layers {
            let a = self.attend(l, &h, &h, segments, speakers, &|_, j| !padding[j]);
            h = self.finish(l, &h, &a);
        }
        let w = self.mat("head.w");
        let b = self.vec("head.b");
        (0..b.len())
            .map(|k| (0..h[cls].len()).map(|c| h[cls][c] * w[c][k]).sum::<f64>() + b[k])
            .collect()
    }

    /// Left-to-right two-stream pass: the query stream at `i` sees content at
    /// `j < i`, the content stream at `j ≤ i`. Returns the mean negative
    /// log-likelihood of `tokens[p]` for each `p` in `predict`.
    pub fn causal_loss(&self, tokens: &[usize], segments: &[usize], speakers: &[usize], predict: &[usize]) -> f64 {
        let n = tokens.len();
        let mut h = self.embed(tokens);
        let start = self.mat("query_start")[0].clone();
        let mut g: Mat = vec![start; n];
        for l in 0..self.p.config.n_layers {
            let ga = self.attend(l, &g, &h, segments, speakers, &|i, j| j < i);
            let ha = self.attend(l, &h, &h, segments, speakers, &|i, j| j <= i);
            g = self.finish(l, &g, &ga);
            h = self.finish(l, &h, &ha);
        }
        let e = self.mat("embedding");
        let bias = self.vec("lm_bias");
        let mut loss = 0.0;
        for &p in predict {
            let logits: Vec<f64> = e.iter().zip(&bias).map(|(row, b)| dot(&g[p], row) + b).collect();
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - logits[tokens[p]];
        }
        loss / predict.len() as f64
    }
}

/// A small randomly initialised model.
pub fn small_model(
    seed: u64,
    d_model: usize,
    n_heads: usize,
    n_layers: usize,
    vocab: usize,
    labels: usize,
    rel_att: bool,
) -> ModelParams {
    let config = spkxl::ModelConfig {
        n_layers,
        d_model,
        n_heads,
        d_ff: 2 * d_model,
        vocab_size: vocab,
        n_labels: labels,
        max_seq_len: 32,
        dropout: 0.0,
        relative_speaker_attention: rel_att,
        init_std: 0.5,
        seed,
        ..spkxl::ModelConfig::default()
    };
    ModelParams::init(&config).unwrap()
}

/// An unpadded input that reads out at its last position.
pub fn raw_input(
    token_ids: Vec<usize>,
    segment_ids: Vec<usize>,
    speaker_ids: Vec<usize>,
) -> spkxl::encoding::EncodedInput {
    let len = token_ids.len();
    spkxl::encoding::EncodedInput {
        token_ids,
        segment_ids,
        speaker_ids,
        padding: vec![false; len],
        gold: vec![0],
        tokens: vec![String::new(); len],
        sep_positions: [0, 0],
        cls_position: len - 1,
    }
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn flatten(m: &Mat) -> Vec<f64> {
    m.iter().flatten().copied().collect()
}
