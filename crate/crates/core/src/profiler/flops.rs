use serde::{Deserialize, Serialize};

use super::graph::{model_graph, GraphNode, OpKind};
use crate::error::Result;
use crate::model::ModelConfig;

/// Cost weights for counting floating-point operations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FlopConvention {
    /// Operations per multiply-accumulate.
    pub mac: u64,
    /// Per output element of a biased dense layer.
    pub bias: u64,
    /// Per softmax input element.
    pub softmax: u64,
    /// Per logit for the `1/sqrt(dh)` scaling.
    pub scale: u64,
    /// Per element of dynamic-tanh normalisation.
    pub dyt: u64,
    pub relu: u64,
    /// Per input element of the sequence max.
    pub maxpool: u64,
    /// Whether the key/value sequence projections are counted.
    pub seq_projection: bool,
    /// Per kernel per output element of the logit convolution.
    pub conv_bias: u64,
    /// Whether averaging `f` responses costs `f` per output element.
    pub conv_average: bool,
    /// Whether a softmax over the class logits is counted (only for `C > 1`).
    pub class_softmax: bool,
}

/// The frozen convention; it reproduces every published reference count.
pub const CALIBRATED: FlopConvention = FlopConvention {
    mac: 2,
    bias: 1,
    softmax: 5,
    scale: 1,
    dyt: 3,
    relu: 0,
    maxpool: 0,
    seq_projection: false,
    conv_bias: 1,
    conv_average: true,
    class_softmax: true,
};

impl Default for FlopConvention {
    fn default() -> Self {
        CALIBRATED
    }
}

fn u(x: usize) -> u64 {
    x as u64
}

/// FLOPs of one node under `conv`.
pub fn node_flops(node: &GraphNode, conv: &FlopConvention) -> u64 {
    let out = u(node.out_elems);
    match &node.op {
        OpKind::Input => 0,
        &OpKind::Dense {
            rows,
            fan_in,
            fan_out,
            bias,
        } => {
            let macs = u(rows * fan_in * fan_out) * conv.mac;
            macs + if bias { u(rows * fan_out) * conv.bias } else { 0 }
        }
        OpKind::Relu => out * conv.relu,
        OpKind::Dyt => out * conv.dyt,
        &OpKind::SeqProject { heads, rows, n, dh } => {
            if conv.seq_projection {
                u(heads * rows * n * dh) * conv.mac
            } else {
                0
            }
        }
        &OpKind::Scores { heads, n, m, dh } | &OpKind::Weighted { heads, n, m, dh } => {
            u(heads * n * m * dh) * conv.mac
        }
        OpKind::Scale => out * conv.scale,
        OpKind::Conv { heads, n, p, filters } => {
            let per_out: u64 = filters.iter().map(|&h| u(h * p) * conv.mac + conv.conv_bias).sum::<u64>()
                + if conv.conv_average { u(filters.len()) } else { 0 };
            u(heads * n * p) * per_out
        }
        &OpKind::Softmax { rows, width } => u(rows * width) * conv.softmax,
        &OpKind::MaxPool { n, d } => u(n * d) * conv.maxpool,
        &OpKind::ClassSoftmax { classes } => {
            if conv.class_softmax && classes > 1 {
                u(classes) * conv.softmax
            } else {
                0
            }
        }
    }
}

pub fn flops_with(cfg: &ModelConfig, conv: &FlopConvention) -> Result<u64> {
    Ok(model_graph(cfg)?.iter().map(|n| node_flops(n, conv)).sum())
}

/// Per-jet inference FLOPs under the frozen convention.
pub fn flops_estimate(cfg: &ModelConfig) -> Result<u64> {
    flops_with(cfg, &CALIBRATED)
}

/// Every convention in a small grid of candidate weights that reproduces
/// all `(config, flops)` reference pairs, in search order.
pub fn calibrate(references: &[(ModelConfig, u64)]) -> Result<Vec<FlopConvention>> {
    let graphs = references
        .iter()
        .map(|(cfg, f)| Ok((model_graph(cfg)?, *f)))
        .collect::<Result<Vec<_>>>()?;
    let bools = [false, true];
    let mut found = Vec::new();
    for mac in [1, 2] {
        for bias in [0, 1] {
            for softmax in 0..=6 {
                for scale in [0, 1] {
                    for dyt in 0..=4 {
                        for relu in [0, 1] {
                            for maxpool in [0, 1] {
                                for seq_projection in bools {
                                    for conv_bias in [0, 1] {
                                        for conv_average in bools {
                                            for class_softmax in bools {
                                                let c = FlopConvention {
                                                    mac,
                                                    bias,
                                                    softmax,
                                                    scale,
                                                    dyt,
                                                    relu,
                                                    maxpool,
                                                    seq_projection,
                                                    conv_bias,
                                                    conv_average,
                                                    class_softmax,
                                                };
                                                let ok = graphs.iter().all(|(g, want)| {
                                                    g.iter().map(|n| node_flops(n, &c)).sum::<u64>() == *want
                                                });
                                                if ok {
                                                    found.push(c);
                                                }
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(found)
}
