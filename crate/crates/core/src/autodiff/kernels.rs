//! Loop kernels shared by the forward and backward passes.
//!
//! Matrices are row-major slices; every `gemm_*` accumulates into `c`.

use crate::tensor::Scalar;

/// `c[m,n] += a[m,k] * b[k,n]`
pub(crate) fn gemm_nn<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv = *cv + av * bv;
            }
        }
    }
}

/// `c[m,n] += a[m,k] * b[n,k]^T`
pub(crate) fn gemm_nt<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let dot = a_row
                .iter()
                .zip(b_row)
                .fold(T::zero(), |acc, (&x, &y)| acc + x * y);
            c[i * n + j] = c[i * n + j] + dot;
        }
    }
}

/// `c[m,n] += a[k,m]^T * b[k,n]`
pub(crate) fn gemm_tn<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for p in 0..k {
        let a_row = &a[p * m..(p + 1) * m];
        let b_row = &b[p * n..(p + 1) * n];
        for (i, &av) in a_row.iter().enumerate() {
            let c_row = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv = *cv + av * bv;
            }
        }
    }
}

/// In-place max-subtracted softmax over consecutive rows of width `width`.
pub(crate) fn softmax_rows<T: Scalar>(data: &mut [T], width: usize) {
    for row in data.chunks_exact_mut(width) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum = sum + *v;
        }
        for v in row.iter_mut() {
            *v = *v / sum;
        }
    }
}

/// Geometry of one same-padded cross-correlation over an `rows x cols` map.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeometry {
    pub rows: usize,
    pub cols: usize,
    pub k_rows: usize,
    pub k_cols: usize,
}

impl ConvGeometry {
    /// Leading zero padding; trailing padding takes any extra for even kernels.
    fn pads(&self) -> (isize, isize) {
        (((self.k_rows - 1) / 2) as isize, ((self.k_cols - 1) / 2) as isize)
    }

    /// `out[r,c] += scale * sum_{a,s} kernel[a,s] * x[r + a - pr, c + s - pc]`
    pub fn forward<T: Scalar>(&self, x: &[T], kernel: &[T], scale: T, out: &mut [T]) {
        let (pr, pc) = self.pads();
        let (rows, cols) = (self.rows as isize, self.cols as isize);
        for r in 0..rows {
            for c in 0..cols {
                let mut acc = T::zero();
                for a in 0..self.k_rows as isize {
                    let xr = r + a - pr;
                    if xr < 0 || xr >= rows {
                        continue;
                    }
                    let x_row = &x[(xr * cols) as usize..((xr + 1) * cols) as usize];
                    let k_row = &kernel[a as usize * self.k_cols..(a as usize + 1) * self.k_cols];
                    for (s, &kv) in k_row.iter().enumerate() {
                        let xc = c + s as isize - pc;
                        if xc < 0 || xc >= cols {
                            continue;
                        }
                        acc = acc + kv * x_row[xc as usize];
                    }
                }
                let o = &mut out[(r * cols + c) as usize];
                *o = *o + scale * acc;
            }
        }
    }

    /// Accumulates input and kernel gradients for `forward` given `d_out`.
    pub fn backward<T: Scalar>(
        &self,
        x: &[T],
        kernel: &[T],
        scale: T,
        d_out: &[T],
        d_x: Option<&mut [T]>,
        d_kernel: Option<&mut [T]>,
    ) {
        let (pr, pc) = self.pads();
        let (rows, cols) = (self.rows as isize, self.cols as isize);
        let mut d_x = d_x;
        let mut d_kernel = d_kernel;
        for r in 0..rows {
            for c in 0..cols {
                let g = d_out[(r * cols + c) as usize] * scale;
                if g == T::zero() {
                    continue;
                }
                for a in 0..self.k_rows as isize {
                    let xr = r + a - pr;
                    if xr < 0 || xr >= rows {
                        continue;
                    }
                    for s in 0..self.k_cols as isize {
                        let xc = c + s - pc;
                        if xc < 0 || xc >= cols {
                            continue;
                        }
                        let xi = (xr * cols + xc) as usize;
                        let ki = (a * self.k_cols as isize + s) as usize;
                        if let Some(dx) = d_x.as_deref_mut() {
                            dx[xi] = dx[xi] + g * kernel[ki];
                        }
                        if let Some(dk) = d_kernel.as_deref_mut() {
                            dk[ki] = dk[ki] + g * x[xi];
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_variants_agree() {
        let a: Vec<f64> = (0..6).map(|i| i as f64 + 1.0).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|i| (i as f64) * 0.5 - 2.0).collect(); // 3x4
        let mut c = vec![0.0; 8];
        gemm_nn(&a, &b, &mut c, 2, 3, 4);
        // b^T as 4x3
        let mut bt = vec![0.0; 12];
        for i in 0..3 {
            for j in 0..4 {
                bt[j * 3 + i] = b[i * 4 + j];
            }
        }
        let mut c2 = vec![0.0; 8];
        gemm_nt(&a, &bt, &mut c2, 2, 3, 4);
        assert_eq!(c, c2);
        // a^T as 3x2
        let mut at = vec![0.0; 6];
        for i in 0..2 {
            for j in 0..3 {
                at[j * 2 + i] = a[i * 3 + j];
            }
        }
        let mut c3 = vec![0.0; 8];
        gemm_tn(&at, &b, &mut c3, 2, 3, 4);
        assert_eq!(c, c3);
    }
}
