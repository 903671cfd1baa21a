use super::graph::{model_graph, GraphNode};
use crate::error::Result;
use crate::model::ModelConfig;

/// Peak number of simultaneously live activation elements for one jet.
///
/// A node's output is live from its own step through the last step that
/// reads it; the final output stays live to the end. Parameters are not
/// counted.
pub fn peak_live_elements(graph: &[GraphNode]) -> usize {
    let mut last_use: Vec<usize> = (0..graph.len()).collect();
    for (step, node) in graph.iter().enumerate() {
        for &i in &node.inputs {
            last_use[i] = last_use[i].max(step);
        }
    }
    if let Some(last) = last_use.last_mut() {
        *last = graph.len() - 1;
    }
    (0..graph.len())
        .map(|step| {
            graph
                .iter()
                .enumerate()
                .filter(|&(i, _)| i <= step && last_use[i] >= step)
                .map(|(_, n)| n.out_elems)
                .sum()
        })
        .max()
        .unwrap_or(0)
}

/// Analytic peak activation memory in bytes for a batch.
pub fn activation_memory(cfg: &ModelConfig, batch: usize) -> Result<usize> {
    let graph = model_graph(cfg)?;
    Ok(peak_live_elements(&graph) * batch * cfg.dtype.size_bytes())
}

/// Elements of one attention-weight buffer for one jet: `H * n * m`.
pub fn attention_buffer_elements(cfg: &ModelConfig) -> usize {
    cfg.heads * cfg.n * cfg.attended()
}
