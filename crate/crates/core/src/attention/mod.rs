//! Full, low-rank and partitioned multi-head attention.
//!
//! [`attend`] builds the attention block on a [`Tape`] and is shared by the
//! model and by the tensor-level entry points [`full_mha`],
//! [`linformer_attention`] and [`lpp_mha`].

mod trace;

pub use trace::{write_trace_csv, AttentionTrace};

use std::ops::Range;

use crate::autodiff::{Segment, Tape, Var};
use crate::error::{config_err, dim_err, Result};
use crate::tensor::{Scalar, Tensor};

/// Projection of the key or value sequence onto `p` rows.
#[derive(Clone, Debug)]
pub enum SeqProj<W> {
    /// Dense per-head `[H, p, n]` matrix.
    Dense(W),
    /// Per-head packed rows `[H, W]`, row `i` reading only `segments[i]`.
    Partitioned { rows: W, segments: Vec<Segment> },
}

impl<W> SeqProj<W> {
    fn map<U>(&self, f: impl FnOnce(&W) -> U) -> SeqProj<U> {
        match self {
            SeqProj::Dense(w) => SeqProj::Dense(f(w)),
            SeqProj::Partitioned { rows, segments } => SeqProj::Partitioned {
                rows: f(rows),
                segments: segments.clone(),
            },
        }
    }
}

/// Convolution over attention logits: kernels `[h_i, p]` and one bias each.
#[derive(Clone, Debug)]
pub struct ConvWeights<W> {
    pub kernels: Vec<W>,
    pub bias: W,
}

/// Parameters of one attention block. `W` is a [`Tensor`] for standalone
/// use or a [`Var`] once placed on a tape.
///
/// With both projections absent the block is full softmax attention.
#[derive(Clone, Debug)]
pub struct AttentionWeights<W> {
    pub heads: usize,
    /// `[d, d]` query, key and value projections (no bias).
    pub w_q: W,
    pub w_k: W,
    pub w_v: W,
    /// `[d, d]` output projection and its `[d]` bias.
    pub w_o: W,
    pub b_o: W,
    pub key_proj: Option<SeqProj<W>>,
    pub value_proj: Option<SeqProj<W>>,
    pub conv: Option<ConvWeights<W>>,
}

/// Tape handles produced by [`attend`].
#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    pub out: Var,
    /// Scaled logits `[.., H, n, m]` before convolution.
    pub pre_conv: Var,
    pub post_conv: Var,
    pub weights: Var,
}

fn project<T: Scalar>(tape: &mut Tape<T>, x: Var, proj: &Option<SeqProj<Var>>) -> Result<Var> {
    match proj {
        None => Ok(x),
        Some(SeqProj::Dense(e)) => tape.seq_project(x, *e),
        Some(SeqProj::Partitioned { rows, segments }) => tape.partition_project(x, *rows, segments),
    }
}

/// Multi-head attention on `x[.., n, d]`:
/// `softmax(conv(Q (P_E K)^T / sqrt(d_h))) (P_F V)` per head, then the
/// output projection.
pub fn attend<T: Scalar>(tape: &mut Tape<T>, x: Var, w: &AttentionWeights<Var>) -> Result<AttentionVars> {
    let d = tape.value(x).last_dim();
    if tape.shape(w.w_q).first() != Some(&d) {
        return dim_err(format!("input width {d} does not match query weights {:?}", tape.shape(w.w_q)));
    }
    if w.heads == 0 || !d.is_multiple_of(w.heads) {
        return config_err(format!("model width {d} is not divisible by {} heads", w.heads));
    }
    let dh = d / w.heads;
    let q = tape.matmul(x, w.w_q)?;
    let k = tape.matmul(x, w.w_k)?;
    let v = tape.matmul(x, w.w_v)?;
    let q = tape.split_heads(q, w.heads)?;
    let k = tape.split_heads(k, w.heads)?;
    let v = tape.split_heads(v, w.heads)?;
    let kp = project(tape, k, &w.key_proj)?;
    let vp = project(tape, v, &w.value_proj)?;
    let raw = tape.matmul_nt(q, kp)?;
    let pre_conv = tape.scale(raw, T::one() / T::from_f64(dh as f64).sqrt())?;
    let post_conv = match &w.conv {
        Some(c) => tape.conv_logits(pre_conv, &c.kernels, c.bias)?,
        None => pre_conv,
    };
    let weights = tape.softmax_lastdim(post_conv)?;
    let heads_out = tape.matmul(weights, vp)?;
    let merged = tape.merge_heads(heads_out)?;
    let projected = tape.matmul(merged, w.w_o)?;
    let out = tape.add_bias(projected, w.b_o)?;
    Ok(AttentionVars {
        out,
        pre_conv,
        post_conv,
        weights,
    })
}

impl<T: Scalar> AttentionWeights<Tensor<T>> {
    /// Places every tensor on `tape` as a leaf.
    pub fn to_tape(&self, tape: &mut Tape<T>, requires_grad: bool) -> AttentionWeights<Var> {
        let mut leaf = |t: &Tensor<T>| tape.leaf(t.clone(), requires_grad);
        AttentionWeights {
            heads: self.heads,
            w_q: leaf(&self.w_q),
            w_k: leaf(&self.w_k),
            w_v: leaf(&self.w_v),
            w_o: leaf(&self.w_o),
            b_o: leaf(&self.b_o),
            key_proj: self.key_proj.as_ref().map(|p| p.map(&mut leaf)),
            value_proj: self.value_proj.as_ref().map(|p| p.map(&mut leaf)),
            conv: self.conv.as_ref().map(|c| ConvWeights {
                kernels: c.kernels.iter().map(&mut leaf).collect(),
                bias: leaf(&c.bias),
            }),
        }
    }
}

fn run<T: Scalar>(x: &Tensor<T>, w: &AttentionWeights<Tensor<T>>) -> Result<(Tensor<T>, AttentionTrace<T>)> {
    if x.rank() != 2 {
        return dim_err(format!("attention input must be [n, d], got {:?}", x.shape()));
    }
    let mut tape = Tape::inference();
    let xv = tape.constant(x.clone());
    let vars = w.to_tape(&mut tape, false);
    let a = attend(&mut tape, xv, &vars)?;
    let trace = AttentionTrace {
        pre_conv: tape.value(a.pre_conv).clone(),
        post_conv: tape.value(a.post_conv).clone(),
        weights: tape.value(a.weights).clone(),
    };
    Ok((tape.value(a.out).clone(), trace))
}

/// Full multi-head self-attention; projections and conv in `w` must be absent.
pub fn full_mha<T: Scalar>(x: &Tensor<T>, w: &AttentionWeights<Tensor<T>>) -> Result<Tensor<T>> {
    if w.key_proj.is_some() || w.value_proj.is_some() || w.conv.is_some() {
        return config_err("full attention takes no sequence projections or convolution");
    }
    run(x, w).map(|(out, _)| out)
}

/// Low-rank attention with dense key/value projections `e`, `f` of shape
/// `[p, n]` (shared by every head) or `[H, p, n]`. Projections and conv in
/// `w` are ignored.
pub fn linformer_attention<T: Scalar>(
    x: &Tensor<T>,
    w: &AttentionWeights<Tensor<T>>,
    e: &Tensor<T>,
    f: &Tensor<T>,
) -> Result<Tensor<T>> {
    let per_head = |m: &Tensor<T>| -> Result<Tensor<T>> {
        match m.shape() {
            [_, _, _] => Ok(m.clone()),
            [p, n] => Tensor::stack(&vec![m.clone(); w.heads]).map(|s| {
                s.reshape(vec![w.heads, *p, *n]).expect("stacked heads")
            }),
            s => dim_err(format!("projection must be [p, n] or [H, p, n], got {s:?}")),
        }
    };
    let mut lw = w.clone();
    lw.key_proj = Some(SeqProj::Dense(per_head(e)?));
    lw.value_proj = Some(SeqProj::Dense(per_head(f)?));
    lw.conv = None;
    run(x, &lw).map(|(out, _)| out)
}

/// Partitioned attention with optional logit convolution, returning the
/// per-stage logits and weights alongside the output.
pub fn lpp_mha<T: Scalar>(
    x: &Tensor<T>,
    w: &AttentionWeights<Tensor<T>>,
) -> Result<(Tensor<T>, AttentionTrace<T>)> {
    run(x, w)
}

fn segments_from(bounds: &[Range<usize>], rows: &[Vec<impl Sized>]) -> Result<Vec<Segment>> {
    if bounds.len() != rows.len() {
        return config_err(format!("{} partitions but {} projection rows", bounds.len(), rows.len()));
    }
    let mut offset = 0;
    let mut segs = Vec::with_capacity(bounds.len());
    for (i, (b, r)) in bounds.iter().zip(rows).enumerate() {
        if r.len() != b.len() {
            return config_err(format!(
                "projection row {i} has width {} but its partition holds {} tokens",
                r.len(),
                b.len()
            ));
        }
        segs.push(Segment {
            start: b.start,
            width: b.len(),
            offset,
        });
        offset += b.len();
    }
    Ok(segs)
}

/// Projects `seq[n, d_h]` so that output row `i` is `rows[i] . seq[bounds[i]]`.
pub fn lpp_project<T: Scalar>(seq: &Tensor<T>, bounds: &[Range<usize>], rows: &[Vec<T>]) -> Result<Tensor<T>> {
    let [n, dh] = *seq.shape() else {
        return dim_err(format!("sequence must be [n, d_h], got {:?}", seq.shape()));
    };
    let segments = segments_from(bounds, rows)?;
    let packed: Vec<T> = rows.iter().flatten().copied().collect();
    let width = packed.len();
    let mut tape = Tape::inference();
    let x = tape.constant(seq.clone().reshape(vec![1, n, dh])?);
    let r = tape.constant(Tensor::new(vec![1, width], packed)?);
    let y = tape.partition_project(x, r, &segments)?;
    tape.value(y).clone().reshape(vec![bounds.len(), dh])
}

/// Dense `[p, n]` matrix whose row `i` equals `rows[i]` on `bounds[i]` and is
/// zero elsewhere. Columns at or beyond `n` are dropped.
pub fn build_block_diagonal<T: Scalar>(n: usize, bounds: &[Range<usize>], rows: &[Vec<T>]) -> Result<Tensor<T>> {
    segments_from(bounds, rows)?;
    let p = bounds.len();
    let mut out = Tensor::zeros(vec![p, n]);
    for (i, (b, r)) in bounds.iter().zip(rows).enumerate() {
        for (t, &v) in b.clone().zip(r) {
            if t < n {
                out.set(&[i, t], v);
            }
        }
    }
    Ok(out)
}
