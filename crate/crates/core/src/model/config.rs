use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::jet::{PartitionLayout, SortKey};
use crate::tensor::DType;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    #[default]
    Salt,
    Linformer,
    Transformer,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Salt => "salt",
            Variant::Linformer => "linformer",
            Variant::Transformer => "transformer",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "salt" | "sal-t" => Ok(Variant::Salt),
            "linformer" => Ok(Variant::Linformer),
            "transformer" => Ok(Variant::Transformer),
            other => Err(Error::Config(format!(
                "unknown variant `{other}` (expected salt, linformer or transformer)"
            ))),
        }
    }
}

/// Component switches for the partitioned variant.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default)]
pub struct Ablation {
    pub no_conv: bool,
    pub no_partition: bool,
    pub partition_key_only: bool,
    pub partition_value_only: bool,
    pub share_ef: bool,
}

/// How keys or values are reduced along the sequence axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProjKind {
    None,
    Dense,
    Partitioned,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: Variant,
    /// Sequence capacity.
    pub n: usize,
    /// Embedding width.
    pub d: usize,
    pub heads: usize,
    /// Projection rows (partitions) per head.
    pub proj: usize,
    /// Convolution kernel heights.
    pub filters: Vec<usize>,
    pub layers: usize,
    /// Output logits; 1 selects a single-logit binary head.
    pub classes: usize,
    pub sort_key: SortKey,
    pub dtype: DType,
    pub seed: u64,
    pub partition_layout: PartitionLayout,
    pub ablation: Ablation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Salt,
            n: 150,
            d: 16,
            heads: 4,
            proj: 4,
            filters: vec![1, 3, 5],
            layers: 1,
            classes: 5,
            sort_key: SortKey::Kt,
            dtype: DType::F64,
            seed: 0,
            partition_layout: PartitionLayout::Padded,
            ablation: Ablation::default(),
        }
    }
}

impl ModelConfig {
    pub fn new(variant: Variant, n: usize) -> Self {
        Self {
            variant,
            n,
            ..Self::default()
        }
    }

    pub fn with_ablation(mut self, ablation: Ablation) -> Self {
        self.ablation = ablation;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.d == 0 || self.heads == 0 || self.classes == 0 {
            return config_err("n, d, heads and classes must be positive");
        }
        if !self.d.is_multiple_of(self.heads) {
            return config_err(format!("d={} is not divisible by heads={}", self.d, self.heads));
        }
        if !(1..=2).contains(&self.layers) {
            return config_err(format!("layers must be 1 or 2, got {}", self.layers));
        }
        if self.variant != Variant::Transformer && (self.proj == 0 || self.proj > self.n) {
            return config_err(format!("proj={} must lie in 1..={}", self.proj, self.n));
        }
        if self.has_conv() {
            if self.filters.is_empty() {
                return config_err("convolution needs at least one filter height");
            }
            if let Some(h) = self.filters.iter().find(|&&h| h % 2 == 0) {
                return config_err(format!("filter height {h} is not odd"));
            }
        }
        let a = &self.ablation;
        if self.variant != Variant::Salt && *a != Ablation::default() {
            return config_err(format!("ablation switches apply only to salt, not {}", self.variant));
        }
        if a.partition_key_only && a.partition_value_only {
            return config_err("partition_key_only and partition_value_only are exclusive");
        }
        if a.no_partition && (a.partition_key_only || a.partition_value_only) {
            return config_err("no_partition contradicts partition_key_only/partition_value_only");
        }
        if a.share_ef && self.key_proj() != self.value_proj() {
            return config_err("share_ef needs keys and values projected the same way");
        }
        Ok(())
    }

    pub fn key_proj(&self) -> ProjKind {
        let a = &self.ablation;
        match self.variant {
            Variant::Transformer => ProjKind::None,
            Variant::Linformer => ProjKind::Dense,
            Variant::Salt if a.no_partition || a.partition_value_only => ProjKind::Dense,
            Variant::Salt => ProjKind::Partitioned,
        }
    }

    pub fn value_proj(&self) -> ProjKind {
        let a = &self.ablation;
        match self.variant {
            Variant::Transformer => ProjKind::None,
            Variant::Linformer => ProjKind::Dense,
            Variant::Salt if a.no_partition || a.partition_key_only => ProjKind::Dense,
            Variant::Salt => ProjKind::Partitioned,
        }
    }

    pub fn has_conv(&self) -> bool {
        self.variant == Variant::Salt && !self.ablation.no_conv
    }

    pub fn share_ef(&self) -> bool {
        self.variant == Variant::Salt && self.ablation.share_ef
    }

    /// Keys per query after projection.
    pub fn attended(&self) -> usize {
        match self.key_proj() {
            ProjKind::None => self.n,
            _ => self.proj,
        }
    }

    /// Label classes; a single-logit head still separates two labels.
    pub fn label_classes(&self) -> usize {
        self.classes.max(2)
    }

    /// First field whose value differs from `other`, as `(name, ours, theirs)`.
    pub fn first_difference(&self, other: &Self) -> Option<(String, String, String)> {
        let a = serde_json::to_value(self).expect("config serialises");
        let b = serde_json::to_value(other).expect("config serialises");
        let (a, b) = (a.as_object()?, b.as_object()?);
        a.iter().find_map(|(k, va)| {
            let vb = &b[k];
            (va != vb).then(|| (k.clone(), va.to_string(), vb.to_string()))
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        for v in [Variant::Salt, Variant::Linformer, Variant::Transformer] {
            ModelConfig::new(v, 150).validate().unwrap();
        }
    }

    #[test]
    fn rejects_bad_shapes() {
        let bad = [
            ModelConfig { d: 15, ..Default::default() },
            ModelConfig { layers: 3, ..Default::default() },
            ModelConfig { proj: 151, ..Default::default() },
            ModelConfig { filters: vec![1, 2], ..Default::default() },
        ];
        for cfg in bad {
            assert!(matches!(cfg.validate(), Err(Error::Config(_))), "{cfg:?}");
        }
    }

    #[test]
    fn contradictory_ablations() {
        let both = Ablation {
            partition_key_only: true,
            partition_value_only: true,
            ..Default::default()
        };
        assert!(ModelConfig::default().with_ablation(both).validate().is_err());
        let mixed_share = Ablation {
            partition_key_only: true,
            share_ef: true,
            ..Default::default()
        };
        assert!(ModelConfig::default().with_ablation(mixed_share).validate().is_err());
        let lin = ModelConfig::new(Variant::Linformer, 150).with_ablation(Ablation {
            no_conv: true,
            ..Default::default()
        });
        assert!(lin.validate().is_err());
    }

    #[test]
    fn difference_names_field() {
        let a = ModelConfig::default();
        let b = ModelConfig { n: 32, ..Default::default() };
        assert_eq!(a.first_difference(&b).unwrap().0, "n");
        assert!(a.first_difference(&a).is_none());
    }
}
