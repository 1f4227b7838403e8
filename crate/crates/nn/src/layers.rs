//! Parameterized building blocks on top of [`Graph`].

use rand::Rng;

use crate::graph::{Graph, Var};
use crate::param::{ParamId, ParamSet};

/// Affine map `x·W + b` with `W: in × out`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    /// Weights and bias drawn from `U(-1/√in, 1/√in)`.
    pub fn new(
        ps: &mut ParamSet,
        name: &str,
        input: usize,
        output: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let bound = 1.0 / (input as f64).sqrt();
        let weight = ps.add_uniform(format!("{name}.weight"), input, output, bound, rng);
        let bias = ps.add_uniform(format!("{name}.bias"), 1, output, bound, rng);
        Self { weight, bias }
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamSet, x: Var) -> Var {
        let w = g.param(ps, self.weight);
        let b = g.param(ps, self.bias);
        let y = g.matmul(x, w);
        g.add_row(y, b)
    }

    pub fn param_ids(&self) -> [ParamId; 2] {
        [self.weight, self.bias]
    }
}

/// One LSTM direction. Gate order: input, forget, cell, output; a single
/// bias row stands for the usual pair of input/recurrent biases.
#[derive(Debug, Clone)]
pub struct Lstm {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub bias: ParamId,
    pub hidden: usize,
}

impl Lstm {
    pub fn new(
        ps: &mut ParamSet,
        name: &str,
        input: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        let w_ih = ps.add_uniform(format!("{name}.w_ih"), input, 4 * hidden, bound, rng);
        let w_hh = ps.add_uniform(format!("{name}.w_hh"), hidden, 4 * hidden, bound, rng);
        let bias = ps.add_uniform(format!("{name}.bias"), 1, 4 * hidden, bound, rng);
        // Forget-gate bias starts at 1 so early training keeps long-range state.
        ps.get_mut(bias)
            .slice_mut(ndarray::s![.., hidden..2 * hidden])
            .fill(1.0);
        Self {
            w_ih,
            w_hh,
            bias,
            hidden,
        }
    }

    /// Chrono initialization for sequences up to `t_max` steps: forget bias
    /// `log u` with `u ~ U(1, t_max − 1)` and input bias its negative, so
    /// gate time constants spread over the whole sequence.
    pub fn chrono(
        ps: &mut ParamSet,
        name: &str,
        input: usize,
        hidden: usize,
        t_max: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let lstm = Self::new(ps, name, input, hidden, rng);
        let hi = (t_max as f64 - 1.0).max(1.0 + f64::EPSILON);
        let b = ps.get_mut(lstm.bias);
        for j in 0..hidden {
            let f = rng.random_range(1.0..=hi).ln();
            b[[0, hidden + j]] = f;
            b[[0, j]] = -f;
        }
        lstm
    }

    /// Final hidden state after consuming the time-major input `x`.
    pub fn forward(
        &self,
        g: &mut Graph,
        ps: &ParamSet,
        x: Var,
        batch: usize,
        reverse: bool,
    ) -> Var {
        let w_ih = g.param(ps, self.w_ih);
        let w_hh = g.param(ps, self.w_hh);
        let bias = g.param(ps, self.bias);
        g.lstm(x, w_ih, w_hh, bias, batch, reverse)
    }
}

/// Bidirectional LSTM that returns `[h_forward_final, h_backward_final]`,
/// `batch × 2H`.
#[derive(Debug, Clone)]
pub struct BiLstm {
    pub forward: Lstm,
    pub backward: Lstm,
}

impl BiLstm {
    pub fn new(
        ps: &mut ParamSet,
        name: &str,
        input: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            forward: Lstm::new(ps, &format!("{name}.fwd"), input, hidden, rng),
            backward: Lstm::new(ps, &format!("{name}.bwd"), input, hidden, rng),
        }
    }

    /// Both directions with [`Lstm::chrono`] biases.
    pub fn chrono(
        ps: &mut ParamSet,
        name: &str,
        input: usize,
        hidden: usize,
        t_max: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            forward: Lstm::chrono(ps, &format!("{name}.fwd"), input, hidden, t_max, rng),
            backward: Lstm::chrono(ps, &format!("{name}.bwd"), input, hidden, t_max, rng),
        }
    }

    pub fn output_width(&self) -> usize {
        2 * self.forward.hidden
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamSet, x: Var, batch: usize) -> Var {
        let f = self.forward.forward(g, ps, x, batch, false);
        let b = self.backward.forward(g, ps, x, batch, true);
        g.concat_cols(&[f, b])
    }
}

/// Per-row layer normalization with learned gain and shift.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub shift: ParamId,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new(ps: &mut ParamSet, name: &str, width: usize) -> Self {
        let gain = ps.add(format!("{name}.gain"), crate::Matrix::ones((1, width)));
        let shift = ps.add(format!("{name}.shift"), crate::Matrix::zeros((1, width)));
        Self { gain, shift }
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamSet, x: Var) -> Var {
        let n = g.layer_norm(x, Self::EPS);
        let gain = g.param(ps, self.gain);
        let shift = g.param(ps, self.shift);
        let y = g.mul_row(n, gain);
        g.add_row(y, shift)
    }
}

/// Multi-head self-attention over blocks of `block` rows (one block per
/// sequence in the batch).
#[derive(Debug, Clone)]
pub struct SelfAttention {
    pub qkv: Linear,
    pub out: Linear,
    pub heads: usize,
    pub width: usize,
}

impl SelfAttention {
    pub fn new(
        ps: &mut ParamSet,
        name: &str,
        width: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Self {
        assert_eq!(
            width % heads,
            0,
            "width {width} not divisible by {heads} heads"
        );
        Self {
            qkv: Linear::new(ps, &format!("{name}.qkv"), width, 3 * width, rng),
            out: Linear::new(ps, &format!("{name}.out"), width, width, rng),
            heads,
            width,
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        ps: &ParamSet,
        x: Var,
        block: usize,
        uniform: bool,
    ) -> Var {
        let qkv = self.qkv.forward(g, ps, x);
        let q = g.slice_cols(qkv, 0, self.width);
        let k = g.slice_cols(qkv, self.width, self.width);
        let v = g.slice_cols(qkv, 2 * self.width, self.width);
        let a = g.attention(q, k, v, self.heads, block, uniform);
        self.out.forward(g, ps, a)
    }
}

/// Pre-norm transformer encoder block:
/// `x + attn(ln(x))`, then `x + ff(ln(x))` with a GELU feed-forward.
#[derive(Debug, Clone)]
pub struct EncoderLayer {
    pub norm_attn: LayerNorm,
    pub attn: SelfAttention,
    pub norm_ff: LayerNorm,
    pub ff_in: Linear,
    pub ff_out: Linear,
    pub dropout: f64,
}

impl EncoderLayer {
    pub fn new(
        ps: &mut ParamSet,
        name: &str,
        width: usize,
        heads: usize,
        ff_width: usize,
        dropout: f64,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            norm_attn: LayerNorm::new(ps, &format!("{name}.norm_attn"), width),
            attn: SelfAttention::new(ps, &format!("{name}.attn"), width, heads, rng),
            norm_ff: LayerNorm::new(ps, &format!("{name}.norm_ff"), width),
            ff_in: Linear::new(ps, &format!("{name}.ff_in"), width, ff_width, rng),
            ff_out: Linear::new(ps, &format!("{name}.ff_out"), ff_width, width, rng),
            dropout,
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        ps: &ParamSet,
        x: Var,
        block: usize,
        uniform_attention: bool,
    ) -> Var {
        let n = self.norm_attn.forward(g, ps, x);
        let a = self.attn.forward(g, ps, n, block, uniform_attention);
        let a = g.dropout(a, self.dropout);
        let x = g.add(x, a);
        let n = self.norm_ff.forward(g, ps, x);
        let h = self.ff_in.forward(g, ps, n);
        let h = g.gelu(h);
        let h = g.dropout(h, self.dropout);
        let h = self.ff_out.forward(g, ps, h);
        let h = g.dropout(h, self.dropout);
        g.add(x, h)
    }
}

/// Stack of [`EncoderLayer`]s followed by a final layer norm.
#[derive(Debug, Clone)]
pub struct Encoder {
    pub layers: Vec<EncoderLayer>,
    pub norm: LayerNorm,
}

impl Encoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        ps: &mut ParamSet,
        name: &str,
        width: usize,
        heads: usize,
        depth: usize,
        ff_width: usize,
        dropout: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let layers = (0..depth)
            .map(|i| {
                EncoderLayer::new(
                    ps,
                    &format!("{name}.layer{i}"),
                    width,
                    heads,
                    ff_width,
                    dropout,
                    rng,
                )
            })
            .collect();
        Self {
            layers,
            norm: LayerNorm::new(ps, &format!("{name}.norm"), width),
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        ps: &ParamSet,
        mut x: Var,
        block: usize,
        uniform_attention: bool,
    ) -> Var {
        for layer in &self.layers {
            x = layer.forward(g, ps, x, block, uniform_attention);
        }
        self.norm.forward(g, ps, x)
    }
}
