/// Bits of quantisation per axis.
pub const MORTON_BITS: u32 = 10;

/// Interleaves three 10-bit coordinates; bit `i` of `x` lands at `3i`,
/// of `y` at `3i + 1`, of `z` at `3i + 2`.
pub fn morton_code(x: u32, y: u32, z: u32) -> u64 {
    fn spread(v: u32) -> u64 {
        let mut out = 0u64;
        for i in 0..MORTON_BITS {
            out |= (((v >> i) & 1) as u64) << (3 * i);
        }
        out
    }
    spread(x) | (spread(y) << 1) | (spread(z) << 2)
}

fn quantise(points: &[[f64; 3]]) -> Vec<[u32; 3]> {
    let cells = (1u32 << MORTON_BITS) as f64;
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in points {
        for a in 0..3 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    points
        .iter()
        .map(|p| {
            let mut q = [0u32; 3];
            for a in 0..3 {
                let span = hi[a] - lo[a];
                if span > 0.0 {
                    let cell = ((p[a] - lo[a]) / span * cells).floor();
                    q[a] = cell.clamp(0.0, cells - 1.0) as u32;
                }
            }
            q
        })
        .collect()
}

/// Morton codes of `points` after per-axis min-max scaling onto the grid.
pub fn morton_codes(points: &[[f64; 3]]) -> Vec<u64> {
    quantise(points)
        .into_iter()
        .map(|[x, y, z]| morton_code(x, y, z))
        .collect()
}

/// Permutation that orders `points` by ascending Morton code; stable on ties.
pub fn morton_sort(points: &[[f64; 3]]) -> Vec<usize> {
    let codes = morton_codes(points);
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by_key(|&i| codes[i]);
    order
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_point() {
        assert_eq!(morton_sort(&[[3.0, -1.0, 2.0]]), vec![0]);
    }

    #[test]
    fn interleave_bits() {
        assert_eq!(morton_code(1, 0, 0), 0b001);
        assert_eq!(morton_code(0, 1, 0), 0b010);
        assert_eq!(morton_code(0, 0, 1), 0b100);
        assert_eq!(morton_code(3, 0, 0), 0b001_001);
        assert_eq!(morton_code(1023, 1023, 1023), (1 << 30) - 1);
    }

    #[test]
    fn ties_are_stable() {
        let pts = [[0.0, 0.0, 0.0], [1.0, 1.0, 1.0], [0.0, 0.0, 0.0]];
        assert_eq!(morton_sort(&pts), vec![0, 2, 1]);
    }
}
