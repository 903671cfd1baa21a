//! Whole classifiers assembled from a [`ModelConfig`].
//!
//! Layout: dense embedding `3 -> d`, then per layer an attention block,
//! dynamic-tanh normalisation, a two-layer ReLU feed-forward block and a
//! second normalisation; finally a max over the sequence and a two-layer
//! dense head `d -> d -> C`. There are no residual connections.

mod checkpoint;
mod config;

pub use checkpoint::{load_checkpoint, load_checkpoint_expecting, save_checkpoint};
pub use config::{Ablation, ModelConfig, ProjKind, Variant};

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};

use crate::attention::{attend, AttentionVars, AttentionWeights, ConvWeights, SeqProj};
use crate::autodiff::{Segment, Tape, Var};
use crate::error::{dim_err, Result};
use crate::jet::partition_segments;
use crate::tensor::{Scalar, Tensor};

/// Initial value rule for one parameter.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Uniform on `(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    Uniform { fan_in: usize },
    Constant(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    fn new(name: impl Into<String>, shape: Vec<usize>, init: Init) -> Self {
        Self {
            name: name.into(),
            shape,
            init,
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

fn dense(specs: &mut Vec<ParamSpec>, prefix: &str, fan_in: usize, fan_out: usize, bias: bool) {
    let init = Init::Uniform { fan_in };
    specs.push(ParamSpec::new(format!("{prefix}.w"), vec![fan_in, fan_out], init));
    if bias {
        specs.push(ParamSpec::new(format!("{prefix}.b"), vec![fan_out], init));
    }
}

fn dyt(specs: &mut Vec<ParamSpec>, prefix: &str, d: usize) {
    specs.push(ParamSpec::new(format!("{prefix}.alpha"), vec![d], Init::Constant(0.5)));
    specs.push(ParamSpec::new(format!("{prefix}.gamma"), vec![d], Init::Constant(1.0)));
    specs.push(ParamSpec::new(format!("{prefix}.beta"), vec![d], Init::Constant(0.0)));
}

/// Packed partition plan for `cfg`.
pub fn segments(cfg: &ModelConfig) -> Result<Vec<Segment>> {
    partition_segments(cfg.n, cfg.proj, cfg.partition_layout)
}

fn seq_proj_spec(cfg: &ModelConfig, name: &str, kind: ProjKind) -> Result<Option<ParamSpec>> {
    let (h, p, n) = (cfg.heads, cfg.proj, cfg.n);
    Ok(match kind {
        ProjKind::None => None,
        ProjKind::Dense => Some(ParamSpec::new(name, vec![h, p, n], Init::Uniform { fan_in: n })),
        ProjKind::Partitioned => {
            let segs = segments(cfg)?;
            let width: usize = segs.iter().map(|s| s.width).sum();
            let fan_in = segs[0].width;
            Some(ParamSpec::new(
                format!("{name}_rows"),
                vec![h, width],
                Init::Uniform { fan_in },
            ))
        }
    })
}

/// Ordered parameter list for `cfg`. The order is part of the checkpoint
/// format.
pub fn param_specs(cfg: &ModelConfig) -> Result<Vec<ParamSpec>> {
    cfg.validate()?;
    let d = cfg.d;
    let mut specs = Vec::new();
    dense(&mut specs, "embed", 3, d, true);
    for l in 0..cfg.layers {
        let a = format!("layer{l}.attn");
        for m in ["q", "k", "v"] {
            specs.push(ParamSpec::new(format!("{a}.w_{m}"), vec![d, d], Init::Uniform { fan_in: d }));
        }
        if cfg.share_ef() {
            specs.extend(seq_proj_spec(cfg, &format!("{a}.ef"), cfg.key_proj())?);
        } else {
            specs.extend(seq_proj_spec(cfg, &format!("{a}.e"), cfg.key_proj())?);
            specs.extend(seq_proj_spec(cfg, &format!("{a}.f"), cfg.value_proj())?);
        }
        if cfg.has_conv() {
            let mut fan_total = 0;
            for (i, &h) in cfg.filters.iter().enumerate() {
                let fan_in = h * cfg.proj;
                fan_total += fan_in;
                specs.push(ParamSpec::new(
                    format!("layer{l}.conv.k{i}"),
                    vec![h, cfg.proj],
                    Init::Uniform { fan_in },
                ));
            }
            let fan_in = fan_total / cfg.filters.len();
            specs.push(ParamSpec::new(
                format!("layer{l}.conv.b"),
                vec![cfg.filters.len()],
                Init::Uniform { fan_in },
            ));
        }
        dense(&mut specs, &format!("{a}.out"), d, d, true);
        dyt(&mut specs, &format!("layer{l}.norm1"), d);
        dense(&mut specs, &format!("layer{l}.ffn1"), d, d, true);
        dense(&mut specs, &format!("layer{l}.ffn2"), d, d, true);
        dyt(&mut specs, &format!("layer{l}.norm2"), d);
    }
    dense(&mut specs, "head1", d, d, true);
    dense(&mut specs, "head2", d, cfg.classes, true);
    Ok(specs)
}

/// Parameter count implied by `cfg`, without building the model.
pub fn count_params_for(cfg: &ModelConfig) -> Result<usize> {
    Ok(param_specs(cfg)?.iter().map(ParamSpec::numel).sum())
}

/// A built classifier: configuration plus an ordered parameter registry.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    config: ModelConfig,
    specs: Vec<ParamSpec>,
    params: Vec<Tensor>,
    index: HashMap<String, usize>,
    segments: Vec<Segment>,
}

/// Tape handles for one forward pass.
pub struct ForwardVars {
    pub logits: Var,
    /// One entry per layer.
    pub attention: Vec<AttentionVars>,
}

pub fn build_model(cfg: &ModelConfig) -> Result<Model> {
    let specs = param_specs(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let params = specs
        .iter()
        .map(|s| match s.init {
            Init::Constant(c) => Tensor::full(s.shape.clone(), c),
            Init::Uniform { fan_in } => {
                let bound = 1.0 / (fan_in as f64).sqrt();
                let dist = Uniform::new(-bound, bound).expect("positive bound");
                let data = (0..s.numel()).map(|_| dist.sample(&mut rng)).collect();
                Tensor::new(s.shape.clone(), data).expect("spec shape")
            }
        })
        .collect();
    Model::from_parts(cfg.clone(), specs, params)
}

impl Model {
    fn from_parts(config: ModelConfig, specs: Vec<ParamSpec>, params: Vec<Tensor>) -> Result<Self> {
        let index = specs.iter().enumerate().map(|(i, s)| (s.name.clone(), i)).collect();
        let segments = if config.key_proj() == ProjKind::Partitioned || config.value_proj() == ProjKind::Partitioned {
            segments(&config)?
        } else {
            Vec::new()
        };
        Ok(Self {
            config,
            specs,
            params,
            index,
            segments,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.params[i])
    }

    pub fn named_params(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.specs.iter().map(|s| s.name.as_str()).zip(&self.params)
    }

    pub fn count_params(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Places every parameter on `tape` in registry order.
    pub fn place<T: Scalar>(&self, tape: &mut Tape<T>, requires_grad: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| tape.leaf(p.cast::<T>(), requires_grad))
            .collect()
    }

    fn var(&self, vars: &[Var], name: &str) -> Var {
        vars[self.index[name]]
    }

    fn seq_proj_var(&self, vars: &[Var], name: &str, kind: ProjKind) -> Option<SeqProj<Var>> {
        match kind {
            ProjKind::None => None,
            ProjKind::Dense => Some(SeqProj::Dense(self.var(vars, name))),
            ProjKind::Partitioned => Some(SeqProj::Partitioned {
                rows: self.var(vars, &format!("{name}_rows")),
                segments: self.segments.clone(),
            }),
        }
    }

    /// Attention parameters of layer `l` as tape handles.
    pub fn attention_vars(&self, vars: &[Var], l: usize) -> AttentionWeights<Var> {
        let cfg = &self.config;
        let a = format!("layer{l}.attn");
        let (key_proj, value_proj) = if cfg.share_ef() {
            let shared = self.seq_proj_var(vars, &format!("{a}.ef"), cfg.key_proj());
            (shared.clone(), shared)
        } else {
            (
                self.seq_proj_var(vars, &format!("{a}.e"), cfg.key_proj()),
                self.seq_proj_var(vars, &format!("{a}.f"), cfg.value_proj()),
            )
        };
        let conv = cfg.has_conv().then(|| ConvWeights {
            kernels: (0..cfg.filters.len())
                .map(|i| self.var(vars, &format!("layer{l}.conv.k{i}")))
                .collect(),
            bias: self.var(vars, &format!("layer{l}.conv.b")),
        });
        AttentionWeights {
            heads: cfg.heads,
            w_q: self.var(vars, &format!("{a}.w_q")),
            w_k: self.var(vars, &format!("{a}.w_k")),
            w_v: self.var(vars, &format!("{a}.w_v")),
            w_o: self.var(vars, &format!("{a}.out.w")),
            b_o: self.var(vars, &format!("{a}.out.b")),
            key_proj,
            value_proj,
            conv,
        }
    }

    fn dense<T: Scalar>(&self, tape: &mut Tape<T>, vars: &[Var], x: Var, prefix: &str) -> Result<Var> {
        let y = tape.matmul(x, self.var(vars, &format!("{prefix}.w")))?;
        tape.add_bias(y, self.var(vars, &format!("{prefix}.b")))
    }

    fn norm<T: Scalar>(&self, tape: &mut Tape<T>, vars: &[Var], x: Var, prefix: &str) -> Result<Var> {
        tape.dyt(
            x,
            self.var(vars, &format!("{prefix}.alpha")),
            self.var(vars, &format!("{prefix}.gamma")),
            self.var(vars, &format!("{prefix}.beta")),
        )
    }

    /// Builds the forward graph for `x[B, n, 3]` using parameter handles
    /// from [`Model::place`].
    pub fn forward_tape<T: Scalar>(&self, tape: &mut Tape<T>, vars: &[Var], x: Var) -> Result<ForwardVars> {
        let shape = tape.shape(x).to_vec();
        if shape.len() != 3 || shape[2] != 3 {
            return dim_err(format!("model input must be [B, n, 3], got {shape:?}"));
        }
        if shape[1] != self.config.n {
            return dim_err(format!(
                "model expects n={} tokens per jet, got {}",
                self.config.n, shape[1]
            ));
        }
        let mut h = self.dense(tape, vars, x, "embed")?;
        let mut attention = Vec::with_capacity(self.config.layers);
        for l in 0..self.config.layers {
            let w = self.attention_vars(vars, l);
            let a = attend(tape, h, &w)?;
            attention.push(a);
            h = self.norm(tape, vars, a.out, &format!("layer{l}.norm1"))?;
            let f = self.dense(tape, vars, h, &format!("layer{l}.ffn1"))?;
            let f = tape.relu(f)?;
            let f = self.dense(tape, vars, f, &format!("layer{l}.ffn2"))?;
            h = self.norm(tape, vars, f, &format!("layer{l}.norm2"))?;
        }
        let pooled = tape.max_over_seq(h)?;
        let z = self.dense(tape, vars, pooled, "head1")?;
        let z = tape.relu(z)?;
        let logits = self.dense(tape, vars, z, "head2")?;
        Ok(ForwardVars { logits, attention })
    }

    /// Inference logits `[B, C]` for `batch[B, n, 3]`.
    pub fn forward<T: Scalar>(&self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::inference();
        let vars = self.place(&mut tape, false);
        let x = tape.constant(batch.clone());
        let out = self.forward_tape(&mut tape, &vars, x)?;
        Ok(tape.value(out.logits).clone())
    }

    /// Replaces all parameters; shapes must match the registry.
    pub fn set_params(&mut self, params: Vec<Tensor>) -> Result<()> {
        if params.len() != self.params.len() {
            return dim_err(format!("expected {} parameters, got {}", self.params.len(), params.len()));
        }
        for (s, p) in self.specs.iter().zip(&params) {
            if s.shape != p.shape() {
                return dim_err(format!("{} has shape {:?}, expected {:?}", s.name, p.shape(), s.shape));
            }
        }
        self.params = params;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_counts() {
        let count = |v, a| count_params_for(&ModelConfig::new(v, 150).with_ablation(a)).unwrap();
        let none = Ablation::default();
        assert_eq!(count(Variant::Transformer, none), 2101);
        assert_eq!(count(Variant::Salt, none), 3356);
        assert_eq!(count(Variant::Linformer, none), 6901);
        let no_conv = Ablation { no_conv: true, ..none };
        assert_eq!(count(Variant::Salt, none) - count(Variant::Salt, no_conv), 39);
    }

    #[test]
    fn registry_is_deterministic() {
        let cfg = ModelConfig::new(Variant::Salt, 16);
        assert_eq!(build_model(&cfg).unwrap(), build_model(&cfg).unwrap());
    }

    #[test]
    fn wrong_feature_count() {
        let m = build_model(&ModelConfig::new(Variant::Transformer, 4)).unwrap();
        let x = Tensor::<f64>::zeros(vec![1, 4, 2]);
        assert!(matches!(m.forward(&x), Err(crate::Error::Dimension(_))));
    }
}
