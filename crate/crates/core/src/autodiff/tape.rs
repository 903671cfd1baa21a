use super::kernels::{gemm_nn, gemm_nt, gemm_tn, softmax_rows, ConvGeometry};
use crate::error::{dim_err, Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// One partition of a sequence axis: `width` consecutive positions starting
/// at `start`, weighted by `width` entries of a row buffer beginning at
/// `offset`. Positions at or beyond the sequence length read as zeros.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub width: usize,
    pub offset: usize,
}

enum Op<T: Scalar> {
    Leaf,
    MatMul { a: Var, b: Var },
    MatMulNt { a: Var, b: Var },
    AddBias { x: Var, bias: Var },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, factor: T },
    Relu { x: Var },
    Tanh { x: Var },
    Softmax { x: Var },
    Dyt { x: Var, alpha: Var, gamma: Var, beta: Var },
    SplitHeads { x: Var, heads: usize },
    MergeHeads { x: Var },
    SeqProject { x: Var, proj: Var },
    PartitionProject { x: Var, rows: Var, segments: Vec<Segment> },
    ConvLogits { x: Var, kernels: Vec<Var>, bias: Var },
    MaxOverSeq { x: Var, argmax: Vec<usize> },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<T> },
    BinaryCrossEntropy { logits: Var, labels: Vec<usize> },
    Sum { x: Var },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    requires_grad: bool,
    op: Op<T>,
}

/// Gradient tape. Confined to one thread; consumed by [`Tape::backward`].
pub struct Tape<T: Scalar = f64> {
    nodes: Vec<Node<T>>,
    grad_enabled: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of one backward pass, indexed by [`Var`].
pub struct Gradients<T: Scalar = f64> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

/// Splits `shape` into (batch, rows, cols) treating leading axes as batch.
fn matrix_dims(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match shape {
        [] | [_] => dim_err(format!("expected a matrix, got shape {shape:?}")),
        [.., r, c] => Ok((shape[..shape.len() - 2].iter().product(), *r, *c)),
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A tape that never tracks gradients; used for inference.
    pub fn inference() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        let requires_grad = requires_grad && self.grad_enabled;
        self.nodes.push(Node {
            value,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var], name: &'static str) -> Result<Var> {
        value.ensure_finite(name)?;
        let requires_grad = self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// `a[..., m, k] @ b` where `b` is `[k, n]` (shared across the batch) or
    /// `[..., k, n]` with the same leading axes as `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (batch, m, k) = matrix_dims(&sa)?;
        let (b_batch, k2, n) = matrix_dims(&sb)?;
        let shared = sb.len() == 2;
        if k != k2 || !(shared || sa[..sa.len() - 2] == sb[..sb.len() - 2]) {
            return dim_err(format!("matmul shape mismatch: {sa:?} x {sb:?}"));
        }
        let mut out_shape = sa[..sa.len() - 2].to_vec();
        out_shape.extend([m, n]);
        let mut out = vec![T::zero(); batch * m * n];
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        if shared {
            gemm_nn(av, bv, &mut out, batch * m, k, n);
        } else {
            debug_assert_eq!(batch, b_batch);
            for i in 0..batch {
                gemm_nn(
                    &av[i * m * k..(i + 1) * m * k],
                    &bv[i * k * n..(i + 1) * k * n],
                    &mut out[i * m * n..(i + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
        }
        let value = Tensor::new(out_shape, out)?;
        self.push(value, Op::MatMul { a, b }, &[a, b], "matmul")
    }

    /// `a[..., m, k] @ b^T` where `b` is `[n, k]` (shared) or `[..., n, k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (batch, m, k) = matrix_dims(&sa)?;
        let (_, n, k2) = matrix_dims(&sb)?;
        let shared = sb.len() == 2;
        if k != k2 || !(shared || sa[..sa.len() - 2] == sb[..sb.len() - 2]) {
            return dim_err(format!("matmul_nt shape mismatch: {sa:?} x {sb:?}^T"));
        }
        let mut out_shape = sa[..sa.len() - 2].to_vec();
        out_shape.extend([m, n]);
        let mut out = vec![T::zero(); batch * m * n];
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        for i in 0..batch {
            let b_block = if shared { bv } else { &bv[i * n * k..(i + 1) * n * k] };
            gemm_nt(
                &av[i * m * k..(i + 1) * m * k],
                b_block,
                &mut out[i * m * n..(i + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let value = Tensor::new(out_shape, out)?;
        self.push(value, Op::MatMulNt { a, b }, &[a, b], "matmul_nt")
    }

    /// Adds a `[c]` vector to every row of `x[..., c]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let c = self.value(x).last_dim();
        if self.shape(bias) != [c] {
            return dim_err(format!(
                "bias shape {:?} does not match last extent {c} of {:?}",
                self.shape(bias),
                self.shape(x)
            ));
        }
        let b = self.value(bias).data().to_vec();
        let mut value = self.value(x).clone();
        for row in value.data_mut().chunks_exact_mut(c) {
            for (v, &bv) in row.iter_mut().zip(&b) {
                *v = *v + bv;
            }
        }
        self.push(value, Op::AddBias { x, bias }, &[x, bias], "add_bias")
    }

    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return dim_err(format!(
                "{op} shape mismatch: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push(value, Op::Add { a, b }, &[a, b], "add")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push(value, Op::Mul { a, b }, &[a, b], "mul")
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Result<Var> {
        let value = self.value(x).map(|v| v * factor);
        self.push(value, Op::Scale { x, factor }, &[x], "scale")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| v.max(T::zero()));
        self.push(value, Op::Relu { x }, &[x], "relu")
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(T::tanh);
        self.push(value, Op::Tanh { x }, &[x], "tanh")
    }

    /// Max-subtracted softmax over the last axis.
    pub fn softmax_lastdim(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.rank() == 0 || t.last_dim() == 0 {
            return dim_err(format!("softmax over empty last axis of {:?}", t.shape()));
        }
        let width = t.last_dim();
        let mut value = t.clone();
        softmax_rows(value.data_mut(), width);
        self.push(value, Op::Softmax { x }, &[x], "softmax")
    }

    /// Dynamic tanh normalisation `gamma * tanh(alpha * x) + beta`, with
    /// per-channel `alpha`, `gamma` and `beta` over the last axis of `x`.
    pub fn dyt(&mut self, x: Var, alpha: Var, gamma: Var, beta: Var) -> Result<Var> {
        let c = self.value(x).last_dim();
        for (name, p) in [("alpha", alpha), ("gamma", gamma), ("beta", beta)] {
            if self.shape(p) != [c] {
                return dim_err(format!(
                    "dyt {name} has shape {:?}, expected [{c}]",
                    self.shape(p)
                ));
            }
        }
        let (a, g, b) = (
            self.value(alpha).data().to_vec(),
            self.value(gamma).data().to_vec(),
            self.value(beta).data().to_vec(),
        );
        let mut value = self.value(x).clone();
        for row in value.data_mut().chunks_exact_mut(c) {
            for (i, v) in row.iter_mut().enumerate() {
                *v = g[i] * (a[i] * *v).tanh() + b[i];
            }
        }
        self.push(value, Op::Dyt { x, alpha, gamma, beta }, &[x, alpha, gamma, beta], "dyt")
    }

    /// `[..., n, heads * dh] -> [..., heads, n, dh]`
    pub fn split_heads(&mut self, x: Var, heads: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (batch, n, c) = matrix_dims(&shape)?;
        if heads == 0 || c % heads != 0 {
            return dim_err(format!("cannot split {c} channels into {heads} heads"));
        }
        let dh = c / heads;
        let src = self.value(x).data();
        let mut out = vec![T::zero(); src.len()];
        for b in 0..batch {
            for t in 0..n {
                for h in 0..heads {
                    let from = (b * n + t) * c + h * dh;
                    let to = ((b * heads + h) * n + t) * dh;
                    out[to..to + dh].copy_from_slice(&src[from..from + dh]);
                }
            }
        }
        let mut out_shape = shape[..shape.len() - 2].to_vec();
        out_shape.extend([heads, n, dh]);
        let value = Tensor::new(out_shape, out)?;
        self.push(value, Op::SplitHeads { x, heads }, &[x], "split_heads")
    }

    /// `[..., heads, n, dh] -> [..., n, heads * dh]`
    pub fn merge_heads(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 3 {
            return dim_err(format!("merge_heads needs rank >= 3, got {shape:?}"));
        }
        let r = shape.len();
        let (heads, n, dh) = (shape[r - 3], shape[r - 2], shape[r - 1]);
        let batch: usize = shape[..r - 3].iter().product();
        let c = heads * dh;
        let src = self.value(x).data();
        let mut out = vec![T::zero(); src.len()];
        for b in 0..batch {
            for h in 0..heads {
                for t in 0..n {
                    let from = ((b * heads + h) * n + t) * dh;
                    let to = (b * n + t) * c + h * dh;
                    out[to..to + dh].copy_from_slice(&src[from..from + dh]);
                }
            }
        }
        let mut out_shape = shape[..r - 3].to_vec();
        out_shape.extend([n, c]);
        let value = Tensor::new(out_shape, out)?;
        self.push(value, Op::MergeHeads { x }, &[x], "merge_heads")
    }

    /// Per-head dense sequence projection:
    /// `x[..., H, n, dh]`, `proj[H, p, n]` -> `[..., H, p, dh]`.
    pub fn seq_project(&mut self, x: Var, proj: Var) -> Result<Var> {
        let (sx, sp) = (self.shape(x).to_vec(), self.shape(proj).to_vec());
        if sx.len() < 3 || sp.len() != 3 {
            return dim_err(format!("seq_project expects [..,H,n,dh] and [H,p,n], got {sx:?} and {sp:?}"));
        }
        let r = sx.len();
        let (heads, n, dh) = (sx[r - 3], sx[r - 2], sx[r - 1]);
        let (ph, p, pn) = (sp[0], sp[1], sp[2]);
        if ph != heads || pn != n {
            return dim_err(format!(
                "projection width mismatch: projection {sp:?} against keys {sx:?}"
            ));
        }
        let batch: usize = sx[..r - 3].iter().product();
        let (xv, pv) = (self.value(x).data(), self.value(proj).data());
        let mut out = vec![T::zero(); batch * heads * p * dh];
        for b in 0..batch {
            for h in 0..heads {
                let xi = (b * heads + h) * n * dh;
                let oi = (b * heads + h) * p * dh;
                gemm_nn(
                    &pv[h * p * n..(h + 1) * p * n],
                    &xv[xi..xi + n * dh],
                    &mut out[oi..oi + p * dh],
                    p,
                    n,
                    dh,
                );
            }
        }
        let mut out_shape = sx[..r - 3].to_vec();
        out_shape.extend([heads, p, dh]);
        let value = Tensor::new(out_shape, out)?;
        self.push(value, Op::SeqProject { x, proj }, &[x, proj], "seq_project")
    }

    /// Partition-restricted sequence projection. Output row `i` of each head
    /// is a weighted sum of only the positions in `segments[i]`:
    /// `x[..., H, n, dh]`, `rows[H, W]` -> `[..., H, p, dh]`.
    pub fn partition_project(&mut self, x: Var, rows: Var, segments: &[Segment]) -> Result<Var> {
        let (sx, sr) = (self.shape(x).to_vec(), self.shape(rows).to_vec());
        if sx.len() < 3 || sr.len() != 2 {
            return dim_err(format!(
                "partition_project expects [..,H,n,dh] and [H,W], got {sx:?} and {sr:?}"
            ));
        }
        let r = sx.len();
        let (heads, n, dh) = (sx[r - 3], sx[r - 2], sx[r - 1]);
        let width_total = sr[1];
        if sr[0] != heads {
            return dim_err(format!("partition rows {sr:?} do not match {heads} heads"));
        }
        if segments.iter().any(|s| s.offset + s.width > width_total) {
            return Err(Error::Config(format!(
                "partition segments exceed row buffer width {width_total}"
            )));
        }
        let p = segments.len();
        let batch: usize = sx[..r - 3].iter().product();
        let (xv, rv) = (self.value(x).data(), self.value(rows).data());
        let mut out = vec![T::zero(); batch * heads * p * dh];
        for b in 0..batch {
            for h in 0..heads {
                let xb = (b * heads + h) * n * dh;
                let ob = (b * heads + h) * p * dh;
                let rb = h * width_total;
                for (i, seg) in segments.iter().enumerate() {
                    let o = &mut out[ob + i * dh..ob + (i + 1) * dh];
                    for j in 0..seg.width {
                        let t = seg.start + j;
                        if t >= n {
                            break;
                        }
                        let w = rv[rb + seg.offset + j];
                        let xr = &xv[xb + t * dh..xb + (t + 1) * dh];
                        for (ov, &xv) in o.iter_mut().zip(xr) {
                            *ov = *ov + w * xv;
                        }
                    }
                }
            }
        }
        let mut out_shape = sx[..r - 3].to_vec();
        out_shape.extend([heads, p, dh]);
        let value = Tensor::new(out_shape, out)?;
        self.push(
            value,
            Op::PartitionProject {
                x,
                rows,
                segments: segments.to_vec(),
            },
            &[x, rows],
            "partition_project",
        )
    }

    /// Averaged same-padded 2-D cross-correlation over the trailing
    /// `[n, w]` map of `x`. Each kernel is `[h_i, w]` with odd `h_i` and
    /// carries one scalar bias from `bias[f]`; every leading slice of `x`
    /// uses the same kernel set.
    pub fn conv_logits(&mut self, x: Var, kernels: &[Var], bias: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let (batch, n, w) = matrix_dims(&sx)?;
        if kernels.is_empty() {
            return Err(Error::Config("conv needs at least one kernel".into()));
        }
        if self.shape(bias) != [kernels.len()] {
            return dim_err(format!(
                "conv bias shape {:?} does not match {} kernels",
                self.shape(bias),
                kernels.len()
            ));
        }
        let mut geoms = Vec::with_capacity(kernels.len());
        for &k in kernels {
            let sk = self.shape(k);
            let [kh, kw] = sk else {
                return dim_err(format!("conv kernel must be 2-D, got {sk:?}"));
            };
            if kh % 2 == 0 {
                return Err(Error::Config(format!("conv kernel height {kh} is even")));
            }
            if *kw != w {
                return Err(Error::Config(format!(
                    "conv kernel width {kw} does not match projection width {w}"
                )));
            }
            geoms.push(ConvGeometry {
                rows: n,
                cols: w,
                k_rows: *kh,
                k_cols: *kw,
            });
        }
        let f = T::from_f64(kernels.len() as f64);
        let xv = self.value(x).data();
        let bv = self.value(bias).data();
        let mut out = vec![T::zero(); xv.len()];
        for s in 0..batch {
            let xs = &xv[s * n * w..(s + 1) * n * w];
            let os = &mut out[s * n * w..(s + 1) * n * w];
            for (i, (g, &k)) in geoms.iter().zip(kernels).enumerate() {
                g.forward(xs, self.nodes[k.0].value.data(), T::one(), os);
                for o in os.iter_mut() {
                    *o = *o + bv[i];
                }
            }
            for o in os.iter_mut() {
                *o = *o / f;
            }
        }
        let value = Tensor::new(sx, out)?;
        let mut inputs = vec![x, bias];
        inputs.extend_from_slice(kernels);
        self.push(
            value,
            Op::ConvLogits {
                x,
                kernels: kernels.to_vec(),
                bias,
            },
            &inputs,
            "conv_logits",
        )
    }

    /// Column-wise maximum over the sequence axis: `[..., n, d] -> [..., d]`.
    /// Ties resolve to the first maximal row.
    pub fn max_over_seq(&mut self, x: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let (batch, n, d) = matrix_dims(&sx)?;
        if n == 0 {
            return dim_err("max over an empty sequence");
        }
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); batch * d];
        let mut argmax = vec![0usize; batch * d];
        for b in 0..batch {
            for c in 0..d {
                let mut best = xv[b * n * d + c];
                let mut arg = 0;
                for t in 1..n {
                    let v = xv[(b * n + t) * d + c];
                    if v > best {
                        best = v;
                        arg = t;
                    }
                }
                out[b * d + c] = best;
                argmax[b * d + c] = arg;
            }
        }
        let mut out_shape = sx[..sx.len() - 2].to_vec();
        out_shape.push(d);
        let value = Tensor::new(out_shape, out)?;
        self.push(value, Op::MaxOverSeq { x, argmax }, &[x], "max_over_seq")
    }

    /// Mean categorical cross-entropy of `logits[B, C]` against `labels`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let sl = self.shape(logits).to_vec();
        let [b, c] = sl[..] else {
            return dim_err(format!("cross_entropy expects [B, C] logits, got {sl:?}"));
        };
        if labels.len() != b {
            return dim_err(format!("{} labels for a batch of {b}", labels.len()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Data(format!("label {bad} out of range for {c} classes")));
        }
        let mut probs = self.value(logits).data().to_vec();
        softmax_rows(&mut probs, c);
        let lv = self.value(logits).data();
        let mut total = T::zero();
        for (i, &y) in labels.iter().enumerate() {
            let row = &lv[i * c..(i + 1) * c];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().fold(T::zero(), |acc, &v| acc + (v - max).exp()).ln() + max;
            total = total + (lse - row[y]);
        }
        let loss = total / T::from_f64(b as f64);
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
            "cross_entropy",
        )
    }

    /// Mean binary cross-entropy on raw logits `[B]` or `[B, 1]`.
    pub fn binary_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let sl = self.shape(logits).to_vec();
        let b = match sl[..] {
            [b] | [b, 1] => b,
            _ => return dim_err(format!("binary_cross_entropy expects [B] or [B,1], got {sl:?}")),
        };
        if labels.len() != b {
            return dim_err(format!("{} labels for a batch of {b}", labels.len()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l > 1) {
            return Err(Error::Data(format!("binary label {bad} is not 0 or 1")));
        }
        let lv = self.value(logits).data();
        let mut total = T::zero();
        for (&z, &y) in lv.iter().zip(labels) {
            let y = T::from_f64(y as f64);
            total = total + z.max(T::zero()) - z * y + (-z.abs()).exp().ln_1p();
        }
        let loss = total / T::from_f64(b as f64);
        self.push(
            Tensor::scalar(loss),
            Op::BinaryCrossEntropy {
                logits,
                labels: labels.to_vec(),
            },
            &[logits],
            "binary_cross_entropy",
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().fold(T::zero(), |a, &v| a + v);
        self.push(Tensor::scalar(s), Op::Sum { x }, &[x], "sum")
    }

    /// Runs reverse accumulation from the scalar `loss`, consuming the tape.
    /// Every leaf registered with `requires_grad` receives a gradient
    /// (zeros when the loss does not depend on it).
    pub fn backward(self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss).to_vec(), T::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
        }
        for (i, node) in self.nodes.iter().enumerate() {
            match node.op {
                Op::Leaf if node.requires_grad => {
                    if grads[i].is_none() {
                        grads[i] = Some(Tensor::zeros(node.value.shape().to_vec()));
                    }
                }
                _ => grads[i] = None,
            }
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[i];
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b } => {
                let (sa, sb) = (self.shape(a), self.shape(b));
                let (batch, m, k) = matrix_dims(sa).expect("checked in forward");
                let n = sb[sb.len() - 1];
                let shared = sb.len() == 2;
                let (av, bv) = (self.value(a).data(), self.value(b).data());
                if self.wants(a) {
                    let mut da = vec![T::zero(); av.len()];
                    for s in 0..batch {
                        let bb = if shared { bv } else { &bv[s * k * n..(s + 1) * k * n] };
                        gemm_nt(&gd[s * m * n..(s + 1) * m * n], bb, &mut da[s * m * k..(s + 1) * m * k], m, n, k);
                    }
                    accumulate(grads, a, sa, da);
                }
                if self.wants(b) {
                    let mut db = vec![T::zero(); bv.len()];
                    if shared {
                        gemm_tn(av, gd, &mut db, k, batch * m, n);
                    } else {
                        for s in 0..batch {
                            gemm_tn(
                                &av[s * m * k..(s + 1) * m * k],
                                &gd[s * m * n..(s + 1) * m * n],
                                &mut db[s * k * n..(s + 1) * k * n],
                                k,
                                m,
                                n,
                            );
                        }
                    }
                    accumulate(grads, b, sb, db);
                }
            }
            &Op::MatMulNt { a, b } => {
                let (sa, sb) = (self.shape(a), self.shape(b));
                let (batch, m, k) = matrix_dims(sa).expect("checked in forward");
                let n = sb[sb.len() - 2];
                let shared = sb.len() == 2;
                let (av, bv) = (self.value(a).data(), self.value(b).data());
                if self.wants(a) {
                    let mut da = vec![T::zero(); av.len()];
                    for s in 0..batch {
                        let bb = if shared { bv } else { &bv[s * n * k..(s + 1) * n * k] };
                        gemm_nn(&gd[s * m * n..(s + 1) * m * n], bb, &mut da[s * m * k..(s + 1) * m * k], m, n, k);
                    }
                    accumulate(grads, a, sa, da);
                }
                if self.wants(b) {
                    let mut db = vec![T::zero(); bv.len()];
                    for s in 0..batch {
                        let dbb = if shared { &mut db[..] } else { &mut db[s * n * k..(s + 1) * n * k] };
                        gemm_tn(&gd[s * m * n..(s + 1) * m * n], &av[s * m * k..(s + 1) * m * k], dbb, n, m, k);
                    }
                    accumulate(grads, b, sb, db);
                }
            }
            &Op::AddBias { x, bias } => {
                if self.wants(x) {
                    accumulate(grads, x, self.shape(x), gd.to_vec());
                }
                if self.wants(bias) {
                    let c = self.value(bias).len();
                    let mut db = vec![T::zero(); c];
                    for row in gd.chunks_exact(c) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d = *d + v;
                        }
                    }
                    accumulate(grads, bias, &[c], db);
                }
            }
            &Op::Add { a, b } => {
                for v in [a, b] {
                    if self.wants(v) {
                        accumulate(grads, v, self.shape(v), gd.to_vec());
                    }
                }
            }
            &Op::Mul { a, b } => {
                let (av, bv) = (self.value(a).data(), self.value(b).data());
                if self.wants(a) {
                    let da = gd.iter().zip(bv).map(|(&g, &y)| g * y).collect();
                    accumulate(grads, a, self.shape(a), da);
                }
                if self.wants(b) {
                    let db = gd.iter().zip(av).map(|(&g, &x)| g * x).collect();
                    accumulate(grads, b, self.shape(b), db);
                }
            }
            &Op::Scale { x, factor } => {
                if self.wants(x) {
                    accumulate(grads, x, self.shape(x), gd.iter().map(|&g| g * factor).collect());
                }
            }
            &Op::Relu { x } => {
                if self.wants(x) {
                    let xv = self.value(x).data();
                    let dx = gd
                        .iter()
                        .zip(xv)
                        .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
                        .collect();
                    accumulate(grads, x, self.shape(x), dx);
                }
            }
            &Op::Tanh { x } => {
                if self.wants(x) {
                    let yv = node.value.data();
                    let dx = gd.iter().zip(yv).map(|(&g, &y)| g * (T::one() - y * y)).collect();
                    accumulate(grads, x, self.shape(x), dx);
                }
            }
            &Op::Softmax { x } => {
                if self.wants(x) {
                    let yv = node.value.data();
                    let w = node.value.last_dim();
                    let mut dx = vec![T::zero(); yv.len()];
                    for ((dxr, yr), gr) in dx.chunks_exact_mut(w).zip(yv.chunks_exact(w)).zip(gd.chunks_exact(w)) {
                        let dot = yr.iter().zip(gr).fold(T::zero(), |a, (&y, &g)| a + y * g);
                        for ((d, &y), &g) in dxr.iter_mut().zip(yr).zip(gr) {
                            *d = y * (g - dot);
                        }
                    }
                    accumulate(grads, x, self.shape(x), dx);
                }
            }
            &Op::Dyt { x, alpha, gamma, beta } => {
                let c = node.value.last_dim();
                let xv = self.value(x).data();
                let (a, gm) = (self.value(alpha).data(), self.value(gamma).data());
                let mut dx = vec![T::zero(); xv.len()];
                let mut da = vec![T::zero(); c];
                let mut dg = vec![T::zero(); c];
                let mut db = vec![T::zero(); c];
                for (idx, (&xval, &gval)) in xv.iter().zip(gd).enumerate() {
                    let ch = idx % c;
                    let t = (a[ch] * xval).tanh();
                    let sech2 = T::one() - t * t;
                    dx[idx] = gval * gm[ch] * a[ch] * sech2;
                    da[ch] = da[ch] + gval * gm[ch] * xval * sech2;
                    dg[ch] = dg[ch] + gval * t;
                    db[ch] = db[ch] + gval;
                }
                if self.wants(x) {
                    accumulate(grads, x, self.shape(x), dx);
                }
                for (v, d) in [(alpha, da), (gamma, dg), (beta, db)] {
                    if self.wants(v) {
                        accumulate(grads, v, &[c], d);
                    }
                }
            }
            &Op::SplitHeads { x, heads } => {
                if self.wants(x) {
                    let sx = self.shape(x);
                    let (batch, n, c) = matrix_dims(sx).expect("checked in forward");
                    let dh = c / heads;
                    let mut dx = vec![T::zero(); gd.len()];
                    for b in 0..batch {
                        for t in 0..n {
                            for h in 0..heads {
                                let to = (b * n + t) * c + h * dh;
                                let from = ((b * heads + h) * n + t) * dh;
                                dx[to..to + dh].copy_from_slice(&gd[from..from + dh]);
                            }
                        }
                    }
                    accumulate(grads, x, sx, dx);
                }
            }
            &Op::MergeHeads { x } => {
                if self.wants(x) {
                    let sx = self.shape(x);
                    let r = sx.len();
                    let (heads, n, dh) = (sx[r - 3], sx[r - 2], sx[r - 1]);
                    let batch: usize = sx[..r - 3].iter().product();
                    let c = heads * dh;
                    let mut dx = vec![T::zero(); gd.len()];
                    for b in 0..batch {
                        for h in 0..heads {
                            for t in 0..n {
                                let to = ((b * heads + h) * n + t) * dh;
                                let from = (b * n + t) * c + h * dh;
                                dx[to..to + dh].copy_from_slice(&gd[from..from + dh]);
                            }
                        }
                    }
                    accumulate(grads, x, sx, dx);
                }
            }
            &Op::SeqProject { x, proj } => {
                let (sx, sp) = (self.shape(x), self.shape(proj));
                let r = sx.len();
                let (heads, n, dh) = (sx[r - 3], sx[r - 2], sx[r - 1]);
                let p = sp[1];
                let batch: usize = sx[..r - 3].iter().product();
                let (xv, pv) = (self.value(x).data(), self.value(proj).data());
                let mut dx = self.wants(x).then(|| vec![T::zero(); xv.len()]);
                let mut dp = self.wants(proj).then(|| vec![T::zero(); pv.len()]);
                for b in 0..batch {
                    for h in 0..heads {
                        let xi = (b * heads + h) * n * dh;
                        let gi = (b * heads + h) * p * dh;
                        let gblk = &gd[gi..gi + p * dh];
                        if let Some(dx) = dx.as_mut() {
                            gemm_tn(&pv[h * p * n..(h + 1) * p * n], gblk, &mut dx[xi..xi + n * dh], n, p, dh);
                        }
                        if let Some(dp) = dp.as_mut() {
                            gemm_nt(gblk, &xv[xi..xi + n * dh], &mut dp[h * p * n..(h + 1) * p * n], p, dh, n);
                        }
                    }
                }
                if let Some(dx) = dx {
                    accumulate(grads, x, sx, dx);
                }
                if let Some(dp) = dp {
                    accumulate(grads, proj, sp, dp);
                }
            }
            Op::PartitionProject { x, rows, segments } => {
                let (x, rows) = (*x, *rows);
                let (sx, sr) = (self.shape(x), self.shape(rows));
                let r = sx.len();
                let (heads, n, dh) = (sx[r - 3], sx[r - 2], sx[r - 1]);
                let width_total = sr[1];
                let p = segments.len();
                let batch: usize = sx[..r - 3].iter().product();
                let (xv, rv) = (self.value(x).data(), self.value(rows).data());
                let mut dx = self.wants(x).then(|| vec![T::zero(); xv.len()]);
                let mut dr = self.wants(rows).then(|| vec![T::zero(); rv.len()]);
                for b in 0..batch {
                    for h in 0..heads {
                        let xb = (b * heads + h) * n * dh;
                        let gb = (b * heads + h) * p * dh;
                        let rb = h * width_total;
                        for (i, seg) in segments.iter().enumerate() {
                            let gr = &gd[gb + i * dh..gb + (i + 1) * dh];
                            for j in 0..seg.width {
                                let t = seg.start + j;
                                if t >= n {
                                    break;
                                }
                                let w = rv[rb + seg.offset + j];
                                if let Some(dx) = dx.as_mut() {
                                    for (d, &g) in dx[xb + t * dh..xb + (t + 1) * dh].iter_mut().zip(gr) {
                                        *d = *d + w * g;
                                    }
                                }
                                if let Some(dr) = dr.as_mut() {
                                    let xr = &xv[xb + t * dh..xb + (t + 1) * dh];
                                    let dot = xr.iter().zip(gr).fold(T::zero(), |a, (&x, &g)| a + x * g);
                                    dr[rb + seg.offset + j] = dr[rb + seg.offset + j] + dot;
                                }
                            }
                        }
                    }
                }
                if let Some(dx) = dx {
                    accumulate(grads, x, sx, dx);
                }
                if let Some(dr) = dr {
                    accumulate(grads, rows, sr, dr);
                }
            }
            Op::ConvLogits { x, kernels, bias } => {
                let (x, bias) = (*x, *bias);
                let sx = self.shape(x);
                let (batch, n, w) = matrix_dims(sx).expect("checked in forward");
                let inv_f = T::one() / T::from_f64(kernels.len() as f64);
                let xv = self.value(x).data();
                let mut dx = self.wants(x).then(|| vec![T::zero(); xv.len()]);
                let mut dks: Vec<Option<Vec<T>>> = kernels
                    .iter()
                    .map(|&k| self.wants(k).then(|| vec![T::zero(); self.value(k).len()]))
                    .collect();
                for s in 0..batch {
                    let xs = &xv[s * n * w..(s + 1) * n * w];
                    let gs = &gd[s * n * w..(s + 1) * n * w];
                    for (ki, &k) in kernels.iter().enumerate() {
                        let kshape = self.shape(k);
                        let geom = ConvGeometry {
                            rows: n,
                            cols: w,
                            k_rows: kshape[0],
                            k_cols: kshape[1],
                        };
                        geom.backward(
                            xs,
                            self.value(k).data(),
                            inv_f,
                            gs,
                            dx.as_mut().map(|d| &mut d[s * n * w..(s + 1) * n * w]),
                            dks[ki].as_deref_mut(),
                        );
                    }
                }
                if let Some(dx) = dx {
                    accumulate(grads, x, sx, dx);
                }
                for (&k, dk) in kernels.iter().zip(dks) {
                    if let Some(dk) = dk {
                        accumulate(grads, k, self.shape(k), dk);
                    }
                }
                if self.wants(bias) {
                    let total = gd.iter().fold(T::zero(), |a, &g| a + g) * inv_f;
                    accumulate(grads, bias, &[kernels.len()], vec![total; kernels.len()]);
                }
            }
            Op::MaxOverSeq { x, argmax } => {
                let x = *x;
                if self.wants(x) {
                    let sx = self.shape(x);
                    let (batch, n, d) = matrix_dims(sx).expect("checked in forward");
                    let mut dx = vec![T::zero(); batch * n * d];
                    for b in 0..batch {
                        for c in 0..d {
                            let t = argmax[b * d + c];
                            dx[(b * n + t) * d + c] = gd[b * d + c];
                        }
                    }
                    accumulate(grads, x, sx, dx);
                }
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let logits = *logits;
                if self.wants(logits) {
                    let c = self.value(logits).last_dim();
                    let scale = gd[0] / T::from_f64(labels.len() as f64);
                    let mut dl: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                    for (i, &y) in labels.iter().enumerate() {
                        dl[i * c + y] = dl[i * c + y] - scale;
                    }
                    accumulate(grads, logits, self.shape(logits), dl);
                }
            }
            Op::BinaryCrossEntropy { logits, labels } => {
                let logits = *logits;
                if self.wants(logits) {
                    let scale = gd[0] / T::from_f64(labels.len() as f64);
                    let dl = self
                        .value(logits)
                        .data()
                        .iter()
                        .zip(labels)
                        .map(|(&z, &y)| {
                            let sig = T::one() / (T::one() + (-z).exp());
                            (sig - T::from_f64(y as f64)) * scale
                        })
                        .collect();
                    accumulate(grads, logits, self.shape(logits), dl);
                }
            }
            &Op::Sum { x } => {
                if self.wants(x) {
                    accumulate(grads, x, self.shape(x), vec![gd[0]; self.value(x).len()]);
                }
            }
        }
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], v: Var, shape: &[usize], delta: Vec<T>) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, d) in existing.data_mut().iter_mut().zip(delta) {
                *e = *e + d;
            }
        }
        slot @ None => {
            *slot = Some(Tensor::new(shape.to_vec(), delta).expect("gradient shape matches value"));
        }
    }
}
