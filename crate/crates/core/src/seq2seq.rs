//! Baseline attention encoder-decoder.
//!
//! Bidirectional GRU encoder, additive attention, GRU decoder fed with the
//! previous target embedding and the attention context, and a tanh readout
//! with dropout before the output projection.
//!
//! Cell convention: `h = (1 - z) (.) h_prev + z (.) candidate`, with the
//! update gate mixing the candidate. Weights start Uniform(-0.08, 0.08),
//! biases at zero.

use rand::Rng;

use crate::error::Result;
use crate::graph::{Graph, NodeId};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

pub const INIT_RANGE: f64 = 0.08;

pub fn init_weight<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, rows: usize, cols: usize) -> ParamId {
    store.add(name, Tensor::uniform(rows, cols, -INIT_RANGE, INIT_RANGE, rng))
}

pub fn init_bias(store: &mut ParamStore, name: &str, cols: usize) -> ParamId {
    store.add(name, Tensor::zeros(1, cols))
}

// ── Gated recurrent cell ────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct GruCell {
    pub wz: ParamId,
    pub wr: ParamId,
    pub wn: ParamId,
    pub uz: ParamId,
    pub ur: ParamId,
    pub un: ParamId,
    pub bz: ParamId,
    pub br: ParamId,
    pub bn: ParamId,
    pub in_dim: usize,
    pub hid_dim: usize,
}

impl GruCell {
    pub fn init<R: Rng>(store: &mut ParamStore, rng: &mut R, prefix: &str, in_dim: usize, hid_dim: usize) -> Self {
        GruCell {
            wz: init_weight(store, rng, &format!("{prefix}.wz"), in_dim, hid_dim),
            wr: init_weight(store, rng, &format!("{prefix}.wr"), in_dim, hid_dim),
            wn: init_weight(store, rng, &format!("{prefix}.wn"), in_dim, hid_dim),
            uz: init_weight(store, rng, &format!("{prefix}.uz"), hid_dim, hid_dim),
            ur: init_weight(store, rng, &format!("{prefix}.ur"), hid_dim, hid_dim),
            un: init_weight(store, rng, &format!("{prefix}.un"), hid_dim, hid_dim),
            bz: init_bias(store, &format!("{prefix}.bz"), hid_dim),
            br: init_bias(store, &format!("{prefix}.br"), hid_dim),
            bn: init_bias(store, &format!("{prefix}.bn"), hid_dim),
            in_dim,
            hid_dim,
        }
    }

    /// Number of scalar parameters: 3 gates of `in*hid + hid*hid + hid`.
    pub fn param_count(in_dim: usize, hid_dim: usize) -> usize {
        3 * (in_dim * hid_dim + hid_dim * hid_dim + hid_dim)
    }

    pub fn zero_state(&self, g: &mut Graph) -> NodeId {
        g.leaf(Tensor::zeros(1, self.hid_dim))
    }

    /// One transition from `h` consuming input `x`.
    pub fn step(&self, g: &mut Graph, ps: &ParamStore, x: NodeId, h: NodeId) -> Result<NodeId> {
        let wz = g.param(ps, self.wz);
        let wr = g.param(ps, self.wr);
        let wn = g.param(ps, self.wn);
        let uz = g.param(ps, self.uz);
        let ur = g.param(ps, self.ur);
        let un = g.param(ps, self.un);
        let bz = g.param(ps, self.bz);
        let br = g.param(ps, self.br);
        let bn = g.param(ps, self.bn);
        g.gru_step(x, h, wz, wr, wn, uz, ur, un, bz, br, bn)
    }

    /// Runs the cell over the rows of `inputs`, in `rev` order if asked,
    /// returning per-position states in original row order.
    pub fn run(&self, g: &mut Graph, ps: &ParamStore, inputs: NodeId, rev: bool) -> Result<Vec<NodeId>> {
        let n = g.value(inputs).rows();
        let mut h = self.zero_state(g);
        let mut states = vec![h; n];
        let order: Vec<usize> = if rev { (0..n).rev().collect() } else { (0..n).collect() };
        for j in order {
            let x = g.row(inputs, j)?;
            h = self.step(g, ps, x, h)?;
            states[j] = h;
        }
        Ok(states)
    }
}

// ── Encoder ─────────────────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct EncoderParams {
    pub embed: ParamId,
    pub fwd: GruCell,
    pub bwd: GruCell,
}

impl EncoderParams {
    pub fn init<R: Rng>(store: &mut ParamStore, rng: &mut R, vocab_size: usize, emb_dim: usize, rnn_dim: usize) -> Self {
        EncoderParams {
            embed: init_weight(store, rng, "enc.embed", vocab_size, emb_dim),
            fwd: GruCell::init(store, rng, "enc.fwd", emb_dim, rnn_dim),
            bwd: GruCell::init(store, rng, "enc.bwd", emb_dim, rnn_dim),
        }
    }
}

/// Per-position source states plus the first backward state (used to
/// initialize the decoder).
pub struct Encoded {
    /// `(J, 2 * rnn_dim)`, forward and backward halves concatenated.
    pub states: NodeId,
    /// `(1, rnn_dim)`: backward state at position 1.
    pub bwd_first: NodeId,
}

pub fn encode(g: &mut Graph, ps: &ParamStore, enc: &EncoderParams, ids: &[u32]) -> Result<Encoded> {
    let table = g.param(ps, enc.embed);
    let idx: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
    let embedded = g.embed(table, &idx)?;
    let fwd = enc.fwd.run(g, ps, embedded, false)?;
    let bwd = enc.bwd.run(g, ps, embedded, true)?;
    let rows: Vec<NodeId> = fwd
        .iter()
        .zip(&bwd)
        .map(|(&f, &b)| g.concat_cols(&[f, b]))
        .collect::<Result<_>>()?;
    let states = g.concat_rows(&rows)?;
    Ok(Encoded {
        states,
        bwd_first: bwd[0],
    })
}

// ── Extra encoder layer (multi-layer baseline) ──────────────────────────

/// One additional unidirectional layer over the bidirectional states, with
/// a residual connection.
#[derive(Clone, Debug)]
pub struct ExtraLayer {
    pub cell: GruCell,
}

impl ExtraLayer {
    pub fn init<R: Rng>(store: &mut ParamStore, rng: &mut R, hidden_dim: usize) -> Self {
        ExtraLayer {
            cell: GruCell::init(store, rng, "enc.layer2", hidden_dim, hidden_dim),
        }
    }

    pub fn apply(&self, g: &mut Graph, ps: &ParamStore, states: NodeId) -> Result<NodeId> {
        let layered = self.cell.run(g, ps, states, false)?;
        let rows: Vec<NodeId> = (0..layered.len())
            .map(|j| {
                let base = g.row(states, j)?;
                g.add(base, layered[j])
            })
            .collect::<Result<_>>()?;
        g.concat_rows(&rows)
    }
}

// ── Attention ───────────────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct AttentionParams {
    pub w: ParamId,
    pub u: ParamId,
    pub v: ParamId,
}

impl AttentionParams {
    pub fn init<R: Rng>(store: &mut ParamStore, rng: &mut R, state_dim: usize, hidden_dim: usize, attn_dim: usize) -> Self {
        AttentionParams {
            w: init_weight(store, rng, "att.w", state_dim, attn_dim),
            u: init_weight(store, rng, "att.u", hidden_dim, attn_dim),
            v: init_weight(store, rng, "att.v", attn_dim, 1),
        }
    }
}

/// Projects source states to attention keys `(J, attn_dim)`. Recomputed
/// only when the states change, which is what makes reusing refined states
/// cheap at inference.
pub fn attn_keys(g: &mut Graph, ps: &ParamStore, att: &AttentionParams, states: NodeId) -> Result<NodeId> {
    let u = g.param(ps, att.u);
    g.matmul(states, u)
}

/// Additive attention: scores `v' tanh(W s_prev + U h_j)`, normalized to a
/// probability vector, and the induced context vector.
pub fn attend(
    g: &mut Graph,
    ps: &ParamStore,
    att: &AttentionParams,
    s_prev: NodeId,
    states: NodeId,
    keys: NodeId,
) -> Result<(NodeId, NodeId)> {
    let w = g.param(ps, att.w);
    let v = g.param(ps, att.v);
    let query = g.matmul(s_prev, w)?;
    let pre = g.add_row(keys, query)?;
    let act = g.tanh(pre)?;
    let scores = g.matmul(act, v)?;
    let scores = g.transpose(scores)?;
    let alpha = g.softmax(scores)?;
    let ctx = g.matmul(alpha, states)?;
    Ok((ctx, alpha))
}

// ── Decoder ─────────────────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct DecoderParams {
    pub embed: ParamId,
    pub cell: GruCell,
    pub init_w: ParamId,
}

impl DecoderParams {
    pub fn init<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        vocab_size: usize,
        emb_dim: usize,
        rnn_dim: usize,
        state_dim: usize,
    ) -> Self {
        DecoderParams {
            embed: init_weight(store, rng, "dec.embed", vocab_size, emb_dim),
            cell: GruCell::init(store, rng, "dec.cell", emb_dim + 2 * rnn_dim, state_dim),
            init_w: init_weight(store, rng, "dec.init_w", rnn_dim, state_dim),
        }
    }

    pub fn embed_token(&self, g: &mut Graph, ps: &ParamStore, id: u32) -> Result<NodeId> {
        let table = g.param(ps, self.embed);
        g.embed(table, &[id as usize])
    }
}

/// `s_0`: tanh projection of the backward encoder state at position 1.
pub fn init_state(g: &mut Graph, ps: &ParamStore, dec: &DecoderParams, bwd_first: NodeId) -> Result<NodeId> {
    let w = g.param(ps, dec.init_w);
    let proj = g.matmul(bwd_first, w)?;
    g.tanh(proj)
}

/// One decoder transition consuming the previous target embedding and the
/// attention context.
pub fn decoder_step(
    g: &mut Graph,
    ps: &ParamStore,
    dec: &DecoderParams,
    y_emb: NodeId,
    s_prev: NodeId,
    ctx: NodeId,
) -> Result<NodeId> {
    let x = g.concat_cols(&[y_emb, ctx])?;
    dec.cell.step(g, ps, x, s_prev)
}

// ── Output layer ────────────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct OutputParams {
    pub w_s: ParamId,
    pub w_y: ParamId,
    pub w_c: ParamId,
    pub b: ParamId,
    pub w_out: ParamId,
    pub b_out: ParamId,
    pub readout_dim: usize,
}

impl OutputParams {
    pub fn init<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        state_dim: usize,
        emb_dim: usize,
        hidden_dim: usize,
        vocab_size: usize,
    ) -> Self {
        let readout_dim = emb_dim;
        OutputParams {
            w_s: init_weight(store, rng, "out.w_s", state_dim, readout_dim),
            w_y: init_weight(store, rng, "out.w_y", emb_dim, readout_dim),
            w_c: init_weight(store, rng, "out.w_c", hidden_dim, readout_dim),
            b: init_bias(store, "out.b", readout_dim),
            w_out: init_weight(store, rng, "out.w_out", readout_dim, vocab_size),
            b_out: init_bias(store, "out.b_out", vocab_size),
            readout_dim,
        }
    }
}

/// Next-token distribution. The dropout mask, when given on a training
/// graph, applies to the readout before the output projection.
pub fn predict(
    g: &mut Graph,
    ps: &ParamStore,
    out: &OutputParams,
    s: NodeId,
    y_emb: NodeId,
    ctx: NodeId,
    dropout_mask: Option<&[f64]>,
) -> Result<NodeId> {
    let (w_s, w_y, w_c) = (g.param(ps, out.w_s), g.param(ps, out.w_y), g.param(ps, out.w_c));
    let (b, w_out, b_out) = (g.param(ps, out.b), g.param(ps, out.w_out), g.param(ps, out.b_out));
    let a = g.matmul(s, w_s)?;
    let bpart = g.matmul(y_emb, w_y)?;
    let c = g.matmul(ctx, w_c)?;
    let sum = g.add(a, bpart)?;
    let sum = g.add(sum, c)?;
    let sum = g.add(sum, b)?;
    let mut readout = g.tanh(sum)?;
    if let Some(mask) = dropout_mask {
        if g.is_training() {
            readout = g.apply_mask(readout, mask)?;
        }
    }
    let logits = g.matmul(readout, w_out)?;
    let logits = g.add(logits, b_out)?;
    g.softmax(logits)
}
