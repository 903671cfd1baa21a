use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::Serialize;

use crate::error::Result;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    /// 1-based, counted across phases.
    pub epoch: usize,
    /// 0-based phase index.
    pub phase: usize,
    pub batch_size: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_acc: f64,
}

/// Columns: `epoch,phase,batch_size,train_loss,val_loss,val_acc`.
pub fn write_history_csv(path: impl AsRef<Path>, history: &[EpochRecord]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "epoch,phase,batch_size,train_loss,val_loss,val_acc")?;
    for r in history {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            r.epoch, r.phase, r.batch_size, r.train_loss, r.val_loss, r.val_acc
        )?;
    }
    w.flush()?;
    Ok(())
}
