use std::sync::Mutex;
use std::time::Instant;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::{DType, Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LatencyReport {
    /// Mean per-jet forward time in microseconds.
    pub mean_us: f64,
    pub std_us: f64,
    pub reps: usize,
    pub batch: usize,
    pub warmup: usize,
    pub dtype: DType,
}

pub const MIN_REPS: usize = 30;
pub const MIN_WARMUP: usize = 5;

/// Held for the whole timed section so benchmarks in one process never overlap.
static BENCH_LOCK: Mutex<()> = Mutex::new(());

/// Times `reps` forward passes over `batch[B, n, 3]` after `warmup`
/// untimed passes, on the calling thread. Concurrent calls are serialised.
pub fn latency_bench<T: Scalar>(model: &Model, batch: &Tensor<T>, reps: usize, warmup: usize) -> Result<LatencyReport> {
    if reps < MIN_REPS {
        return Err(Error::Contract(format!("latency bench needs at least {MIN_REPS} reps, got {reps}")));
    }
    if warmup < MIN_WARMUP {
        return Err(Error::Contract(format!(
            "latency bench needs at least {MIN_WARMUP} warmup passes, got {warmup}"
        )));
    }
    let jets = batch.shape().first().copied().unwrap_or(0);
    if jets == 0 {
        return Err(Error::Contract("latency bench needs a non-empty batch".into()));
    }
    let _guard = BENCH_LOCK.lock().unwrap_or_else(|e| e.into_inner());
    for _ in 0..warmup {
        std::hint::black_box(model.forward(batch)?);
    }
    let mut samples = Vec::with_capacity(reps);
    for _ in 0..reps {
        let start = Instant::now();
        std::hint::black_box(model.forward(batch)?);
        samples.push(start.elapsed().as_secs_f64() * 1e6 / jets as f64);
    }
    let mean = samples.iter().sum::<f64>() / reps as f64;
    let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (reps - 1) as f64;
    Ok(LatencyReport {
        mean_us: mean,
        std_us: var.sqrt(),
        reps,
        batch: jets,
        warmup,
        dtype: T::DTYPE,
    })
}
