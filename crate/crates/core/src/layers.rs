//! Neural building blocks: linear maps, LSTM cell, Bi-LSTM, sinusoidal
//! positional encoding, multi-head self-attention, the transformer encoder
//! block and an additive temporal-attention layer.
//!
//! Parameter containers are generic over their storage `P` so the same struct
//! describes host tensors (`Params<Tensor>`) and their registrations on a
//! tape (`Params<NodeId>`). `map`, `build` and `visit` all traverse fields in
//! one canonical order.

use crate::tensor::{NodeId, Tape, Tensor, TensorError};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Uniform init in [-1/sqrt(fan_in), +1/sqrt(fan_in)].
fn uniform_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(vec![rows, cols], data).expect("uniform_matrix shape")
}

// ── Linear ──────────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct LinearParams<P> {
    /// `[in, out]`
    pub weight: P,
    /// `[out]`
    pub bias: P,
}

impl LinearParams<Tensor> {
    pub fn init(rng: &mut ChaCha8Rng, in_dim: usize, out_dim: usize) -> Self {
        LinearParams {
            weight: uniform_matrix(rng, in_dim, out_dim, in_dim),
            bias: Tensor::zeros(vec![out_dim]),
        }
    }
}

impl<P> LinearParams<P> {
    pub fn map<Q>(&self, f: &mut impl FnMut(&P) -> Q) -> LinearParams<Q> {
        LinearParams {
            weight: f(&self.weight),
            bias: f(&self.bias),
        }
    }

    pub fn build(f: &mut impl FnMut() -> P) -> LinearParams<P> {
        LinearParams {
            weight: f(),
            bias: f(),
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a P)) {
        f(format!("{prefix}.weight"), &self.weight);
        f(format!("{prefix}.bias"), &self.bias);
    }
}

/// `x · W + b` with the bias broadcast over rows.
pub fn linear(tape: &mut Tape, x: NodeId, p: &LinearParams<NodeId>) -> Result<NodeId, TensorError> {
    let prod = tape.matmul(x, p.weight)?;
    tape.add(prod, p.bias)
}

// ── Positional encoding ─────────────────────────────────────────────────

/// Sinusoidal positional encoding of shape `[len, width]`:
/// column `2m` holds `sin(p / 10000^(2m/width))` and column `2m + 1` holds
/// `cos(p / 10000^(2m/width))` for position `p`. A pure function of its
/// arguments; not trainable.
pub fn positional_encoding(len: usize, width: usize) -> Tensor {
    assert!(len >= 1 && width >= 1);
    let mut data = vec![0.0; len * width];
    for p in 0..len {
        for c in 0..width {
            let m = (c / 2) as f64;
            let angle = p as f64 / 10000f64.powf(2.0 * m / width as f64);
            data[p * width + c] = if c % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::new(vec![len, width], data).expect("positional_encoding shape")
}

// ── LSTM cell and Bi-LSTM ───────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct GateParams<P> {
    /// Input weights `[in, hidden]`.
    pub w: P,
    /// Recurrent weights `[hidden, hidden]`.
    pub u: P,
    /// Bias `[hidden]`.
    pub b: P,
}

impl<P> GateParams<P> {
    fn map<Q>(&self, f: &mut impl FnMut(&P) -> Q) -> GateParams<Q> {
        GateParams {
            w: f(&self.w),
            u: f(&self.u),
            b: f(&self.b),
        }
    }

    fn build(f: &mut impl FnMut() -> P) -> GateParams<P> {
        GateParams {
            w: f(),
            u: f(),
            b: f(),
        }
    }

    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a P)) {
        f(format!("{prefix}.w"), &self.w);
        f(format!("{prefix}.u"), &self.u);
        f(format!("{prefix}.b"), &self.b);
    }
}

/// One LSTM cell: input, forget, cell-candidate and output gates.
#[derive(Debug, Clone)]
pub struct LstmCellParams<P> {
    pub input_gate: GateParams<P>,
    pub forget_gate: GateParams<P>,
    pub cell_gate: GateParams<P>,
    pub output_gate: GateParams<P>,
}

impl LstmCellParams<Tensor> {
    /// Weights uniform in ±1/sqrt(fan_in); biases zero except the forget-gate
    /// bias, which starts at 1 to keep early gradients flowing.
    pub fn init(rng: &mut ChaCha8Rng, in_dim: usize, hidden: usize) -> Self {
        let gate = |rng: &mut ChaCha8Rng, forget: bool| GateParams {
            w: uniform_matrix(rng, in_dim, hidden, in_dim),
            u: uniform_matrix(rng, hidden, hidden, hidden),
            b: if forget {
                Tensor::full(vec![hidden], 1.0)
            } else {
                Tensor::zeros(vec![hidden])
            },
        };
        LstmCellParams {
            input_gate: gate(rng, false),
            forget_gate: gate(rng, true),
            cell_gate: gate(rng, false),
            output_gate: gate(rng, false),
        }
    }

    pub fn hidden_size(&self) -> usize {
        self.input_gate.b.shape()[0]
    }
}

impl<P> LstmCellParams<P> {
    pub fn map<Q>(&self, f: &mut impl FnMut(&P) -> Q) -> LstmCellParams<Q> {
        LstmCellParams {
            input_gate: self.input_gate.map(f),
            forget_gate: self.forget_gate.map(f),
            cell_gate: self.cell_gate.map(f),
            output_gate: self.output_gate.map(f),
        }
    }

    pub fn build(f: &mut impl FnMut() -> P) -> LstmCellParams<P> {
        LstmCellParams {
            input_gate: GateParams::build(f),
            forget_gate: GateParams::build(f),
            cell_gate: GateParams::build(f),
            output_gate: GateParams::build(f),
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a P)) {
        self.input_gate.visit(&format!("{prefix}.i"), f);
        self.forget_gate.visit(&format!("{prefix}.f"), f);
        self.cell_gate.visit(&format!("{prefix}.g"), f);
        self.output_gate.visit(&format!("{prefix}.o"), f);
    }
}

/// One LSTM step on a single timestep row.
///
/// `x_t` is `[1, in]`, `h_prev` and `c_prev` are `[1, hidden]`. Gates follow
/// the standard forget-gate formulation:
/// `i,f,o = sigmoid(x W + h U + b)`, `g = tanh(x W + h U + b)`,
/// `c_t = f * c_prev + i * g`, `h_t = o * tanh(c_t)`.
pub fn lstm_cell_step(
    tape: &mut Tape,
    x_t: NodeId,
    h_prev: NodeId,
    c_prev: NodeId,
    p: &LstmCellParams<NodeId>,
) -> Result<(NodeId, NodeId), TensorError> {
    let gate = |tape: &mut Tape, g: &GateParams<NodeId>| -> Result<NodeId, TensorError> {
        let xw = tape.matmul(x_t, g.w)?;
        let hu = tape.matmul(h_prev, g.u)?;
        let sum = tape.add(xw, hu)?;
        tape.add(sum, g.b)
    };
    let i_pre = gate(tape, &p.input_gate)?;
    let f_pre = gate(tape, &p.forget_gate)?;
    let g_pre = gate(tape, &p.cell_gate)?;
    let o_pre = gate(tape, &p.output_gate)?;
    let i = tape.sigmoid(i_pre);
    let f = tape.sigmoid(f_pre);
    let g = tape.tanh(g_pre);
    let o = tape.sigmoid(o_pre);
    let keep = tape.mul(f, c_prev)?;
    let write = tape.mul(i, g)?;
    let c_t = tape.add(keep, write)?;
    let c_act = tape.tanh(c_t);
    let h_t = tape.mul(o, c_act)?;
    Ok((h_t, c_t))
}

#[derive(Debug, Clone)]
pub struct BiLstmParams<P> {
    pub fwd: LstmCellParams<P>,
    pub bwd: LstmCellParams<P>,
}

impl BiLstmParams<Tensor> {
    pub fn init(rng: &mut ChaCha8Rng, in_dim: usize, hidden: usize) -> Self {
        BiLstmParams {
            fwd: LstmCellParams::init(rng, in_dim, hidden),
            bwd: LstmCellParams::init(rng, in_dim, hidden),
        }
    }
}

impl<P> BiLstmParams<P> {
    pub fn map<Q>(&self, f: &mut impl FnMut(&P) -> Q) -> BiLstmParams<Q> {
        BiLstmParams {
            fwd: self.fwd.map(f),
            bwd: self.bwd.map(f),
        }
    }

    pub fn build(f: &mut impl FnMut() -> P) -> BiLstmParams<P> {
        BiLstmParams {
            fwd: LstmCellParams::build(f),
            bwd: LstmCellParams::build(f),
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a P)) {
        self.fwd.visit(&format!("{prefix}.fwd"), f);
        self.bwd.visit(&format!("{prefix}.bwd"), f);
    }
}

/// Bidirectional LSTM over `x: [T, in]`, producing `[T, 2*hidden]`.
///
/// Row `t` concatenates the forward hidden state after scanning `1..=t` with
/// the backward hidden state after scanning `T..=t`. Both directions start
/// from zero states.
pub fn bilstm_forward(
    tape: &mut Tape,
    x: NodeId,
    hidden: usize,
    p: &BiLstmParams<NodeId>,
) -> Result<NodeId, TensorError> {
    let t_len = tape.value(x).shape()[0];
    let zero = || Tensor::zeros(vec![1, hidden]);

    let mut h = tape.leaf(zero(), false);
    let mut c = tape.leaf(zero(), false);
    let mut fwd_states = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let x_t = tape.slice_rows(x, t, 1)?;
        let (h_t, c_t) = lstm_cell_step(tape, x_t, h, c, &p.fwd)?;
        fwd_states.push(h_t);
        h = h_t;
        c = c_t;
    }

    let mut h = tape.leaf(zero(), false);
    let mut c = tape.leaf(zero(), false);
    let mut bwd_states = vec![h; t_len];
    for t in (0..t_len).rev() {
        let x_t = tape.slice_rows(x, t, 1)?;
        let (h_t, c_t) = lstm_cell_step(tape, x_t, h, c, &p.bwd)?;
        bwd_states[t] = h_t;
        h = h_t;
        c = c_t;
    }

    let rows: Vec<NodeId> = fwd_states
        .iter()
        .zip(&bwd_states)
        .map(|(&f, &b)| tape.concat_last(&[f, b]))
        .collect::<Result<_, _>>()?;
    tape.concat_rows(&rows)
}

// ── Multi-head self-attention and encoder block ─────────────────────────

#[derive(Debug, Clone)]
pub struct AttentionHeadParams<P> {
    /// Each `[width, head_dim]`.
    pub query: P,
    pub key: P,
    pub value: P,
}

impl<P> AttentionHeadParams<P> {
    fn map<Q>(&self, f: &mut impl FnMut(&P) -> Q) -> AttentionHeadParams<Q> {
        AttentionHeadParams {
            query: f(&self.query),
            key: f(&self.key),
            value: f(&self.value),
        }
    }

    fn build(f: &mut impl FnMut() -> P) -> AttentionHeadParams<P> {
        AttentionHeadParams {
            query: f(),
            key: f(),
            value: f(),
        }
    }

    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a P)) {
        f(format!("{prefix}.q"), &self.query);
        f(format!("{prefix}.k"), &self.key);
        f(format!("{prefix}.v"), &self.value);
    }
}

/// Parameters of one encoder block: the attention heads, the multi-head
/// output projection, the position-wise feed-forward net, and two layer-norm
/// pairs for the residual sublayers.
#[derive(Debug, Clone)]
pub struct EncoderBlockParams<P> {
    pub heads: Vec<AttentionHeadParams<P>>,
    /// `[heads * head_dim, width]`
    pub output_proj: P,
    /// `[width, ffn_width]`
    pub ffn_w1: P,
    pub ffn_b1: P,
    /// `[ffn_width, width]`
    pub ffn_w2: P,
    pub ffn_b2: P,
    pub norm1_gamma: P,
    pub norm1_beta: P,
    pub norm2_gamma: P,
    pub norm2_beta: P,
}

impl EncoderBlockParams<Tensor> {
    pub fn init(
        rng: &mut ChaCha8Rng,
        width: usize,
        heads: usize,
        head_dim: usize,
        ffn_width: usize,
    ) -> Self {
        let heads = (0..heads)
            .map(|_| AttentionHeadParams {
                query: uniform_matrix(rng, width, head_dim, width),
                key: uniform_matrix(rng, width, head_dim, width),
                value: uniform_matrix(rng, width, head_dim, width),
            })
            .collect::<Vec<_>>();
        let concat_dim = heads.len() * head_dim;
        EncoderBlockParams {
            output_proj: uniform_matrix(rng, concat_dim, width, concat_dim),
            ffn_w1: uniform_matrix(rng, width, ffn_width, width),
            ffn_b1: Tensor::zeros(vec![ffn_width]),
            ffn_w2: uniform_matrix(rng, ffn_width, width, ffn_width),
            ffn_b2: Tensor::zeros(vec![width]),
            norm1_gamma: Tensor::full(vec![width], 1.0),
            norm1_beta: Tensor::zeros(vec![width]),
            norm2_gamma: Tensor::full(vec![width], 1.0),
            norm2_beta: Tensor::zeros(vec![width]),
            heads,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.heads[0].query.shape()[1]
    }
}

impl<P> EncoderBlockParams<P> {
    pub fn map<Q>(&self, f: &mut impl FnMut(&P) -> Q) -> EncoderBlockParams<Q> {
        EncoderBlockParams {
            heads: self.heads.iter().map(|h| h.map(f)).collect(),
            output_proj: f(&self.output_proj),
            ffn_w1: f(&self.ffn_w1),
            ffn_b1: f(&self.ffn_b1),
            ffn_w2: f(&self.ffn_w2),
            ffn_b2: f(&self.ffn_b2),
            norm1_gamma: f(&self.norm1_gamma),
            norm1_beta: f(&self.norm1_beta),
            norm2_gamma: f(&self.norm2_gamma),
            norm2_beta: f(&self.norm2_beta),
        }
    }

    pub fn build(heads: usize, f: &mut impl FnMut() -> P) -> EncoderBlockParams<P> {
        EncoderBlockParams {
            heads: (0..heads).map(|_| AttentionHeadParams::build(f)).collect(),
            output_proj: f(),
            ffn_w1: f(),
            ffn_b1: f(),
            ffn_w2: f(),
            ffn_b2: f(),
            norm1_gamma: f(),
            norm1_beta: f(),
            norm2_gamma: f(),
            norm2_beta: f(),
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a P)) {
        for (u, head) in self.heads.iter().enumerate() {
            head.visit(&format!("{prefix}.head{u}"), f);
        }
        f(format!("{prefix}.wo"), &self.output_proj);
        f(format!("{prefix}.ffn.w1"), &self.ffn_w1);
        f(format!("{prefix}.ffn.b1"), &self.ffn_b1);
        f(format!("{prefix}.ffn.w2"), &self.ffn_w2);
        f(format!("{prefix}.ffn.b2"), &self.ffn_b2);
        f(format!("{prefix}.norm1.gamma"), &self.norm1_gamma);
        f(format!("{prefix}.norm1.beta"), &self.norm1_beta);
        f(format!("{prefix}.norm2.gamma"), &self.norm2_gamma);
        f(format!("{prefix}.norm2.beta"), &self.norm2_beta);
    }
}

/// Multi-head output plus the per-head `[T, T]` attention weight matrices.
pub struct AttentionDetail {
    pub output: NodeId,
    pub weights: Vec<NodeId>,
}

/// Scaled dot-product self-attention over the full sequence (no causal mask:
/// the detector sees the whole day, matching the bidirectional recurrence).
///
/// Per head: `softmax(Q Kᵀ / sqrt(d_k)) V` with `Q = X W_q`, `K = X W_k`,
/// `V = X W_v`; head outputs are concatenated and projected back to `width`.
pub fn multi_head_self_attention_detailed(
    tape: &mut Tape,
    x: NodeId,
    p: &EncoderBlockParams<NodeId>,
) -> Result<AttentionDetail, TensorError> {
    let head_dim = tape.value(p.heads[0].query).shape()[1];
    let scale = 1.0 / (head_dim as f64).sqrt();
    let mut outputs = Vec::with_capacity(p.heads.len());
    let mut weights = Vec::with_capacity(p.heads.len());
    for head in &p.heads {
        let q = tape.matmul(x, head.query)?;
        let k = tape.matmul(x, head.key)?;
        let v = tape.matmul(x, head.value)?;
        let kt = tape.transpose(k)?;
        let scores = tape.matmul(q, kt)?;
        let scaled = tape.scale(scores, scale);
        let attn = tape.softmax_last(scaled);
        let out = tape.matmul(attn, v)?;
        outputs.push(out);
        weights.push(attn);
    }
    let concat = tape.concat_last(&outputs)?;
    let output = tape.matmul(concat, p.output_proj)?;
    Ok(AttentionDetail { output, weights })
}

pub fn multi_head_self_attention(
    tape: &mut Tape,
    x: NodeId,
    p: &EncoderBlockParams<NodeId>,
) -> Result<NodeId, TensorError> {
    Ok(multi_head_self_attention_detailed(tape, x, p)?.output)
}

/// Post-norm encoder block:
/// `X'' = LayerNorm(X' + MultiHead(X'))`, then
/// `out = LayerNorm(X'' + FFN(X''))` with `FFN(z) = ReLU(z W1 + b1) W2 + b2`.
pub fn encoder_block(
    tape: &mut Tape,
    x: NodeId,
    p: &EncoderBlockParams<NodeId>,
) -> Result<NodeId, TensorError> {
    let attn = multi_head_self_attention(tape, x, p)?;
    let res1 = tape.add(x, attn)?;
    let x2 = tape.layer_norm(res1, p.norm1_gamma, p.norm1_beta, LAYER_NORM_EPS)?;

    let pre1 = tape.matmul(x2, p.ffn_w1)?;
    let pre1b = tape.add(pre1, p.ffn_b1)?;
    let hidden = tape.relu(pre1b);
    let pre2 = tape.matmul(hidden, p.ffn_w2)?;
    let ffn = tape.add(pre2, p.ffn_b2)?;

    let res2 = tape.add(x2, ffn)?;
    tape.layer_norm(res2, p.norm2_gamma, p.norm2_beta, LAYER_NORM_EPS)
}

// ── Temporal attention (attention-over-timesteps baseline) ──────────────

/// Additive temporal attention: a learned projection scores each timestep,
/// softmax over time yields weights, and the weighted sum of rows forms a
/// context vector appended to every row.
#[derive(Debug, Clone)]
pub struct TemporalAttentionParams<P> {
    /// `[dim, dim]`
    pub proj_weight: P,
    /// `[dim]`
    pub proj_bias: P,
    /// `[dim, 1]`
    pub score: P,
}

impl TemporalAttentionParams<Tensor> {
    pub fn init(rng: &mut ChaCha8Rng, dim: usize) -> Self {
        TemporalAttentionParams {
            proj_weight: uniform_matrix(rng, dim, dim, dim),
            proj_bias: Tensor::zeros(vec![dim]),
            score: uniform_matrix(rng, dim, 1, dim),
        }
    }
}

impl<P> TemporalAttentionParams<P> {
    pub fn map<Q>(&self, f: &mut impl FnMut(&P) -> Q) -> TemporalAttentionParams<Q> {
        TemporalAttentionParams {
            proj_weight: f(&self.proj_weight),
            proj_bias: f(&self.proj_bias),
            score: f(&self.score),
        }
    }

    pub fn build(f: &mut impl FnMut() -> P) -> TemporalAttentionParams<P> {
        TemporalAttentionParams {
            proj_weight: f(),
            proj_bias: f(),
            score: f(),
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a P)) {
        f(format!("{prefix}.proj.weight"), &self.proj_weight);
        f(format!("{prefix}.proj.bias"), &self.proj_bias);
        f(format!("{prefix}.score"), &self.score);
    }
}

/// Output of [`temporal_attention`] plus the `[1, T]` weight row.
pub struct TemporalAttentionDetail {
    pub output: NodeId,
    pub weights: NodeId,
}

/// Scores `e_t = vᵀ tanh(H_t W + b)`, weights `alpha = softmax(e)`, context
/// `c = sum_t alpha_t H_t`; returns `[T, 2*dim]` rows `concat(H_t, c)`.
pub fn temporal_attention_detailed(
    tape: &mut Tape,
    h: NodeId,
    p: &TemporalAttentionParams<NodeId>,
) -> Result<TemporalAttentionDetail, TensorError> {
    let t_len = tape.value(h).shape()[0];
    let proj = tape.matmul(h, p.proj_weight)?;
    let proj_b = tape.add(proj, p.proj_bias)?;
    let act = tape.tanh(proj_b);
    let scores = tape.matmul(act, p.score)?;
    let scores_row = tape.transpose(scores)?;
    let weights = tape.softmax_last(scores_row);
    let context = tape.matmul(weights, h)?;
    let context_rows = tape.repeat_rows(context, t_len)?;
    let output = tape.concat_last(&[h, context_rows])?;
    Ok(TemporalAttentionDetail { output, weights })
}

pub fn temporal_attention(
    tape: &mut Tape,
    h: NodeId,
    p: &TemporalAttentionParams<NodeId>,
) -> Result<NodeId, TensorError> {
    Ok(temporal_attention_detailed(tape, h, p)?.output)
}
