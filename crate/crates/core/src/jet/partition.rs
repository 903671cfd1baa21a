use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::autodiff::Segment;
use crate::error::{config_err, Result};

/// How a length-`n` sequence is split into `p` contiguous partitions.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionLayout {
    /// `p - 1` partitions of `n / p` tokens; the last absorbs the remainder.
    RemainderLast,
    /// `p` partitions of `ceil(n / p)` tokens over a zero-extended sequence,
    /// so trailing partitions may reach past `n`.
    #[default]
    Padded,
}

/// Partition ranges with floor-sized leading partitions and the remainder
/// in the last one.
pub fn partition_bounds(n: usize, p: usize) -> Result<Vec<Range<usize>>> {
    check(n, p)?;
    let w = n / p;
    Ok((0..p)
        .map(|i| {
            let end = if i + 1 == p { n } else { (i + 1) * w };
            i * w..end
        })
        .collect())
}

fn check(n: usize, p: usize) -> Result<()> {
    if p == 0 || p > n {
        return config_err(format!("partition count p={p} must lie in 1..={n}"));
    }
    Ok(())
}

/// Partition plan for `layout`, with each segment's offset into a packed
/// per-head row buffer. The buffer width is the sum of segment widths.
pub fn partition_segments(n: usize, p: usize, layout: PartitionLayout) -> Result<Vec<Segment>> {
    check(n, p)?;
    let ranges: Vec<Range<usize>> = match layout {
        PartitionLayout::RemainderLast => partition_bounds(n, p)?,
        PartitionLayout::Padded => {
            let w = n.div_ceil(p);
            (0..p).map(|i| i * w..(i + 1) * w).collect()
        }
    };
    let mut offset = 0;
    Ok(ranges
        .into_iter()
        .map(|r| {
            let seg = Segment {
                start: r.start,
                width: r.len(),
                offset,
            };
            offset += r.len();
            seg
        })
        .collect())
}
