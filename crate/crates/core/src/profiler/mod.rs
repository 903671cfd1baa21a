//! Analytic cost model and latency measurement.
//!
//! FLOPs and activation memory are both derived from one inference graph
//! ([`model_graph`]) built from a [`ModelConfig`].

mod bench;
mod flops;
mod graph;
mod memory;

pub use bench::{latency_bench, LatencyReport, MIN_REPS, MIN_WARMUP};
pub use flops::{calibrate, flops_estimate, flops_with, node_flops, FlopConvention, CALIBRATED};
pub use graph::{model_graph, GraphNode, OpKind};
pub use memory::{activation_memory, attention_buffer_elements, peak_live_elements};

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::Serialize;

use crate::error::Result;
use crate::model::{count_params_for, ModelConfig};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CostReport {
    pub flops: u64,
    pub params: usize,
    pub activation_bytes: usize,
    pub batch: usize,
    pub config: ModelConfig,
}

pub fn cost_report(cfg: &ModelConfig, batch: usize) -> Result<CostReport> {
    Ok(CostReport {
        flops: flops_estimate(cfg)?,
        params: count_params_for(cfg)?,
        activation_bytes: activation_memory(cfg, batch)?,
        batch,
        config: cfg.clone(),
    })
}

/// `(n, flops)` for each `n` in `ns`, other fields taken from `base`.
pub fn flops_scaling_table(base: &ModelConfig, ns: &[usize]) -> Result<Vec<(usize, u64)>> {
    ns.iter()
        .map(|&n| {
            let cfg = ModelConfig { n, ..base.clone() };
            Ok((n, flops_estimate(&cfg)?))
        })
        .collect()
}

/// Columns: `name,variant,n,p,filters,layers,classes,flops,params,activation_bytes,batch`.
/// Filter heights are joined with `;`.
pub fn write_cost_csv(path: impl AsRef<Path>, rows: &[(String, CostReport)]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "name,variant,n,p,filters,layers,classes,flops,params,activation_bytes,batch")?;
    for (name, r) in rows {
        let c = &r.config;
        let filters: Vec<String> = c.filters.iter().map(usize::to_string).collect();
        writeln!(
            w,
            "{name},{},{},{},{},{},{},{},{},{},{}",
            c.variant,
            c.n,
            c.proj,
            filters.join(";"),
            c.layers,
            c.classes,
            r.flops,
            r.params,
            r.activation_bytes,
            r.batch
        )?;
    }
    w.flush()?;
    Ok(())
}

/// Columns: `variant,n,flops`.
pub fn write_scaling_csv(path: impl AsRef<Path>, variant: &str, table: &[(usize, u64)]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "variant,n,flops")?;
    for (n, f) in table {
        writeln!(w, "{variant},{n},{f}")?;
    }
    w.flush()?;
    Ok(())
}

/// Formats an integer with thousands separators, e.g. `739,918`.
pub fn with_commas(value: u64) -> String {
    let digits = value.to_string();
    let mut out = String::with_capacity(digits.len() + digits.len() / 3);
    for (i, ch) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i).is_multiple_of(3) {
            out.push(',');
        }
        out.push(ch);
    }
    out
}
