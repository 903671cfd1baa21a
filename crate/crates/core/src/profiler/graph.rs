use crate::error::Result;
use crate::model::{ModelConfig, ProjKind};

/// Operation kinds of the inference graph, with the extents cost models need.
#[derive(Clone, Debug, PartialEq)]
pub enum OpKind {
    Input,
    /// `rows x fan_in` times `fan_in x fan_out`, optional bias.
    Dense { rows: usize, fan_in: usize, fan_out: usize, bias: bool },
    Relu,
    Dyt,
    /// Per-head sequence projection `[p, n] x [n, dh]`.
    SeqProject { heads: usize, rows: usize, n: usize, dh: usize },
    /// `Q K^T` per head: `[n, dh] x [dh, m]`.
    Scores { heads: usize, n: usize, m: usize, dh: usize },
    /// Multiplication of logits by `1/sqrt(dh)`.
    Scale,
    /// Averaged same-padded convolution over `heads` maps of `[n, p]`.
    Conv { heads: usize, n: usize, p: usize, filters: Vec<usize> },
    Softmax { rows: usize, width: usize },
    /// Weights times values per head: `[n, m] x [m, dh]`.
    Weighted { heads: usize, n: usize, m: usize, dh: usize },
    MaxPool { n: usize, d: usize },
    /// Softmax over the output logits.
    ClassSoftmax { classes: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct GraphNode {
    pub name: String,
    pub op: OpKind,
    /// Indices of producer nodes.
    pub inputs: Vec<usize>,
    /// Elements of the output tensor for one jet.
    pub out_elems: usize,
}

/// Single-jet inference graph of `cfg` in execution order; node 0 is the
/// input.
pub fn model_graph(cfg: &ModelConfig) -> Result<Vec<GraphNode>> {
    cfg.validate()?;
    let (n, d, h) = (cfg.n, cfg.d, cfg.heads);
    let dh = d / h;
    let m = cfg.attended();
    let mut g: Vec<GraphNode> = Vec::new();
    let push = |g: &mut Vec<GraphNode>, name: String, op: OpKind, inputs: Vec<usize>, out_elems: usize| {
        g.push(GraphNode {
            name,
            op,
            inputs,
            out_elems,
        });
        g.len() - 1
    };
    let dense = |rows, fan_in, fan_out| OpKind::Dense {
        rows,
        fan_in,
        fan_out,
        bias: true,
    };
    let input = push(&mut g, "input".into(), OpKind::Input, vec![], n * 3);
    let mut x = push(&mut g, "embed".into(), dense(n, 3, d), vec![input], n * d);
    for l in 0..cfg.layers {
        let nm = |s: &str| format!("layer{l}.{s}");
        let qkv = OpKind::Dense {
            rows: n,
            fan_in: d,
            fan_out: d,
            bias: false,
        };
        let q = push(&mut g, nm("q"), qkv.clone(), vec![x], n * d);
        let mut k = push(&mut g, nm("k"), qkv.clone(), vec![x], n * d);
        let mut v = push(&mut g, nm("v"), qkv, vec![x], n * d);
        let proj = |kind: ProjKind| kind != ProjKind::None;
        if proj(cfg.key_proj()) {
            let op = OpKind::SeqProject { heads: h, rows: m, n, dh };
            k = push(&mut g, nm("k_proj"), op, vec![k], h * m * dh);
        }
        if proj(cfg.value_proj()) {
            let op = OpKind::SeqProject { heads: h, rows: m, n, dh };
            v = push(&mut g, nm("v_proj"), op, vec![v], h * m * dh);
        }
        let s = push(&mut g, nm("scores"), OpKind::Scores { heads: h, n, m, dh }, vec![q, k], h * n * m);
        let mut s = push(&mut g, nm("scale"), OpKind::Scale, vec![s], h * n * m);
        if cfg.has_conv() {
            let op = OpKind::Conv {
                heads: h,
                n,
                p: m,
                filters: cfg.filters.clone(),
            };
            s = push(&mut g, nm("conv"), op, vec![s], h * n * m);
        }
        let a = push(&mut g, nm("softmax"), OpKind::Softmax { rows: h * n, width: m }, vec![s], h * n * m);
        let o = push(&mut g, nm("attend"), OpKind::Weighted { heads: h, n, m, dh }, vec![a, v], n * d);
        let o = push(&mut g, nm("out"), dense(n, d, d), vec![o], n * d);
        let o = push(&mut g, nm("norm1"), OpKind::Dyt, vec![o], n * d);
        let f = push(&mut g, nm("ffn1"), dense(n, d, d), vec![o], n * d);
        let f = push(&mut g, nm("relu"), OpKind::Relu, vec![f], n * d);
        let f = push(&mut g, nm("ffn2"), dense(n, d, d), vec![f], n * d);
        x = push(&mut g, nm("norm2"), OpKind::Dyt, vec![f], n * d);
    }
    let p = push(&mut g, "maxpool".into(), OpKind::MaxPool { n, d }, vec![x], d);
    let z = push(&mut g, "head1".into(), dense(1, d, d), vec![p], d);
    let z = push(&mut g, "head_relu".into(), OpKind::Relu, vec![z], d);
    let c = cfg.classes;
    let z = push(&mut g, "head2".into(), dense(1, d, c), vec![z], c);
    push(&mut g, "class_softmax".into(), OpKind::ClassSoftmax { classes: c }, vec![z], c);
    Ok(g)
}
