use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::error::{dim_err, Result};
use crate::tensor::{Scalar, Tensor};

/// Attention maps of one jet, each `[H, n, m]`.
#[derive(Clone, Debug)]
pub struct AttentionTrace<T: Scalar = f64> {
    pub pre_conv: Tensor<T>,
    pub post_conv: Tensor<T>,
    pub weights: Tensor<T>,
}

impl<T: Scalar> AttentionTrace<T> {
    pub fn stages(&self) -> [(&'static str, &Tensor<T>); 3] {
        [
            ("pre_conv", &self.pre_conv),
            ("post_conv", &self.post_conv),
            ("softmax", &self.weights),
        ]
    }
}

/// Writes `attn_h{head}_{stage}.csv` into `dir` for every head and stage.
///
/// Columns: `head,stage,query,k0,..,k{m-1}`; one row per query token.
pub fn write_trace_csv<T: Scalar>(dir: impl AsRef<Path>, trace: &AttentionTrace<T>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    for (stage, t) in trace.stages() {
        let [heads, n, m] = *t.shape() else {
            return dim_err(format!("trace stage {stage} must be [H, n, m], got {:?}", t.shape()));
        };
        for h in 0..heads {
            let path = dir.join(format!("attn_h{h}_{stage}.csv"));
            let mut w = BufWriter::new(fs::File::create(&path)?);
            write!(w, "head,stage,query")?;
            for j in 0..m {
                write!(w, ",k{j}")?;
            }
            writeln!(w)?;
            for q in 0..n {
                write!(w, "{h},{stage},{q}")?;
                for j in 0..m {
                    write!(w, ",{}", t.get(&[h, q, j]))?;
                }
                writeln!(w)?;
            }
            w.flush()?;
            written.push(path);
        }
    }
    Ok(written)
}
