//! Transformer building blocks: positional embedding, scaled dot-product and
//! multi-head attention, and the post-norm encoder layer used for every
//! temporal, cross-modality and symbiotic attention unit of the model.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::real::Real;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const DEFAULT_HEADS: usize = 4;
pub const DEFAULT_LAYER_NORM_EPS: f64 = 1e-5;

/// `PE[pos, 2i] = sin(pos / 10000^(2i/d))`, `PE[pos, 2i+1] = cos(...)`.
pub fn sinusoidal_pe<S: Real>(n_positions: usize, d_model: usize) -> Result<Tensor<S>> {
    if !d_model.is_multiple_of(2) || d_model == 0 {
        return Err(Error::OddModelWidth(d_model));
    }
    let mut data = Vec::with_capacity(n_positions * d_model);
    for pos in 0..n_positions {
        for i in 0..d_model / 2 {
            let rate = libm::pow(10000.0, (2 * i) as f64 / d_model as f64);
            let angle = pos as f64 / rate;
            data.push(S::from_f64(libm::sin(angle)));
            data.push(S::from_f64(libm::cos(angle)));
        }
    }
    Tensor::from_vec(&[n_positions, d_model], data)
}

/// Query/key/value projections plus the head-recombining output projection.
///
/// `w_q`, `w_k`, `w_v` are `d_model × d_k` with the `d_k` columns split
/// evenly across `heads`; `w_o` is `d_k × d_model`. Values share the key
/// width.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub w_o: ParamId,
    pub d_model: usize,
    pub d_k: usize,
    pub heads: usize,
}

impl AttentionParams {
    pub fn init<S: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        prefix: &str,
        d_model: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let d_k = d_model;
        if heads == 0 || !d_k.is_multiple_of(heads) {
            return Err(Error::HeadSplit { dim: d_k, heads });
        }
        Ok(AttentionParams {
            w_q: store.add_uniform(format!("{prefix}.w_q"), &[d_model, d_k], rng),
            w_k: store.add_uniform(format!("{prefix}.w_k"), &[d_model, d_k], rng),
            w_v: store.add_uniform(format!("{prefix}.w_v"), &[d_model, d_k], rng),
            w_o: store.add_uniform(format!("{prefix}.w_o"), &[d_k, d_model], rng),
            d_model,
            d_k,
            heads,
        })
    }

    pub fn head_width(&self) -> usize {
        self.d_k / self.heads
    }

    pub fn ids(&self) -> [ParamId; 4] {
        [self.w_q, self.w_k, self.w_v, self.w_o]
    }
}

/// One encoder layer: attention, add & norm, two-layer ReLU MLP, add & norm.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayerParams {
    pub attention: AttentionParams,
    pub mlp_w1: ParamId,
    pub mlp_b1: ParamId,
    pub mlp_w2: ParamId,
    pub mlp_b2: ParamId,
    pub norm1_gain: ParamId,
    pub norm1_bias: ParamId,
    pub norm2_gain: ParamId,
    pub norm2_bias: ParamId,
    pub d_ff: usize,
    pub eps: f64,
}

impl EncoderLayerParams {
    pub fn init<S: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        prefix: &str,
        d_model: usize,
        heads: usize,
        d_ff: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if d_ff == 0 {
            return Err(Error::Config(format!("{prefix}: feedforward width must be >= 1")));
        }
        let attention = AttentionParams::init(store, &format!("{prefix}.attn"), d_model, heads, rng)?;
        Ok(EncoderLayerParams {
            attention,
            mlp_w1: store.add_uniform(format!("{prefix}.mlp.w1"), &[d_model, d_ff], rng),
            mlp_b1: store.add_full(format!("{prefix}.mlp.b1"), &[d_ff], 0.0),
            mlp_w2: store.add_uniform(format!("{prefix}.mlp.w2"), &[d_ff, d_model], rng),
            mlp_b2: store.add_full(format!("{prefix}.mlp.b2"), &[d_model], 0.0),
            norm1_gain: store.add_full(format!("{prefix}.norm1.gain"), &[d_model], 1.0),
            norm1_bias: store.add_full(format!("{prefix}.norm1.bias"), &[d_model], 0.0),
            norm2_gain: store.add_full(format!("{prefix}.norm2.gain"), &[d_model], 1.0),
            norm2_bias: store.add_full(format!("{prefix}.norm2.bias"), &[d_model], 0.0),
            d_ff,
            eps: DEFAULT_LAYER_NORM_EPS,
        })
    }

    pub fn d_model(&self) -> usize {
        self.attention.d_model
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut ids = self.attention.ids().to_vec();
        ids.extend([
            self.mlp_w1,
            self.mlp_b1,
            self.mlp_w2,
            self.mlp_b2,
            self.norm1_gain,
            self.norm1_bias,
            self.norm2_gain,
            self.norm2_bias,
        ]);
        ids
    }

    /// Scalar count of one layer:
    /// `4·d·d_k` (three projections and the output map) `+ 2·d·d_ff + d_ff + d`
    /// (MLP weights and biases) `+ 4·d` (two gain/bias pairs).
    /// The head count splits columns and adds nothing.
    pub fn param_count(d_model: usize, d_k: usize, _heads: usize, d_ff: usize) -> usize {
        4 * d_model * d_k + 2 * d_model * d_ff + d_ff + d_model + 4 * d_model
    }
}

/// Row-stochastic weights `softmax(q·kᵀ / sqrt(d_k))`.
pub fn attention_weights<S: Real>(tape: &mut Tape<S>, q: Var, k: Var) -> Result<Var> {
    let (sq, sk) = (tape.shape(q).to_vec(), tape.shape(k).to_vec());
    if sq.len() != 2 || sk.len() != 2 || sq[1] != sk[1] {
        return Err(Error::Shape {
            op: "scaled_attention",
            lhs: sq,
            rhs: sk,
        });
    }
    let kt = tape.transpose_last_two(k)?;
    let scores = tape.matmul(q, kt)?;
    let scaled = tape.scale(scores, S::one() / S::from_usize(sq[1]).sqrt());
    Ok(tape.softmax_rows(scaled))
}

/// `softmax(q·kᵀ / sqrt(d_k)) · v`.
pub fn scaled_attention<S: Real>(tape: &mut Tape<S>, q: Var, k: Var, v: Var) -> Result<Var> {
    if tape.shape(v).len() != 2 || tape.shape(v)[0] != tape.shape(k)[0] {
        return Err(Error::Shape {
            op: "scaled_attention",
            lhs: tape.shape(k).to_vec(),
            rhs: tape.shape(v).to_vec(),
        });
    }
    let w = attention_weights(tape, q, k)?;
    tape.matmul(w, v)
}

pub fn multi_head_attention<S: Real>(
    tape: &mut Tape<S>,
    store: &ParamStore<S>,
    x_q: Var,
    x_kv: Var,
    p: &AttentionParams,
) -> Result<Var> {
    if p.heads == 0 || !p.d_k.is_multiple_of(p.heads) {
        return Err(Error::HeadSplit {
            dim: p.d_k,
            heads: p.heads,
        });
    }
    let w_q = tape.param(store, p.w_q);
    let w_k = tape.param(store, p.w_k);
    let w_v = tape.param(store, p.w_v);
    let w_o = tape.param(store, p.w_o);
    let q = tape.matmul(x_q, w_q)?;
    let k = tape.matmul(x_kv, w_k)?;
    let v = tape.matmul(x_kv, w_v)?;
    let heads = if p.heads == 1 {
        scaled_attention(tape, q, k, v)?
    } else {
        let sizes = alloc::vec![p.head_width(); p.heads];
        let qs = tape.split(q, &sizes, 1)?;
        let ks = tape.split(k, &sizes, 1)?;
        let vs = tape.split(v, &sizes, 1)?;
        let mut outs = Vec::with_capacity(p.heads);
        for h in 0..p.heads {
            outs.push(scaled_attention(tape, qs[h], ks[h], vs[h])?);
        }
        tape.concat(&outs, 1)?
    };
    tape.matmul(heads, w_o)
}

/// Post-norm encoder layer over the rows of `x` (`N × d_model`).
///
/// With `add_pe` the sinusoidal table is added first and the sum is the
/// residual input of the first add & norm.
pub fn encoder_layer<S: Real>(
    tape: &mut Tape<S>,
    store: &ParamStore<S>,
    x: Var,
    p: &EncoderLayerParams,
    add_pe: bool,
) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    if shape.len() != 2 || shape[1] != p.d_model() {
        return Err(Error::Shape {
            op: "encoder_layer",
            lhs: shape,
            rhs: alloc::vec![p.d_model()],
        });
    }
    let x_in = if add_pe {
        let pe = tape.constant(sinusoidal_pe(shape[0], shape[1])?);
        tape.add(x, pe)?
    } else {
        x
    };
    let eps = S::from_f64(p.eps);
    let attn = multi_head_attention(tape, store, x_in, x_in, &p.attention)?;
    let res1 = tape.add(attn, x_in)?;
    let (g1, b1) = (tape.param(store, p.norm1_gain), tape.param(store, p.norm1_bias));
    let f_prime = tape.layer_norm(res1, g1, b1, eps)?;

    let w1 = tape.param(store, p.mlp_w1);
    let bias1 = tape.param(store, p.mlp_b1);
    let w2 = tape.param(store, p.mlp_w2);
    let bias2 = tape.param(store, p.mlp_b2);
    let h = tape.matmul(f_prime, w1)?;
    let h = tape.add_bias(h, bias1)?;
    let h = tape.relu(h);
    let h = tape.matmul(h, w2)?;
    let h = tape.add_bias(h, bias2)?;

    let res2 = tape.add(h, f_prime)?;
    let (g2, b2) = (tape.param(store, p.norm2_gain), tape.param(store, p.norm2_bias));
    tape.layer_norm(res2, g2, b2, eps)
}
