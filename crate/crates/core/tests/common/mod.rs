//! Independent reference implementations used as test oracles. Nothing
//! here calls into the tape; everything is written with plain loops.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use salt_core::jet::{Jet, Particle};
use salt_core::model::{Model, ProjKind};
use salt_core::Tensor;

pub type Mat = Vec<Vec<f64>>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_vec(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()
}

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let len = shape.iter().product();
    Tensor::new(shape.to_vec(), rand_vec(rng, len)).unwrap()
}

pub fn to_mat(t: &Tensor) -> Mat {
    let [r, c] = *t.shape() else { panic!("not a matrix: {:?}", t.shape()) };
    (0..r).map(|i| t.data()[i * c..(i + 1) * c].to_vec()).collect()
}

pub fn from_mat(m: &Mat) -> Tensor {
    Tensor::from_rows(m).unwrap()
}

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    let mut c = vec![vec![0.0; m]; n];
    for i in 0..n {
        for j in 0..m {
            let mut s = 0.0;
            for t in 0..k {
                s += a[i][t] * b[t][j];
            }
            c[i][j] = s;
        }
    }
    c
}

pub fn transpose(a: &Mat) -> Mat {
    (0..a[0].len()).map(|j| a.iter().map(|r| r[j]).collect()).collect()
}

pub fn softmax_row(x: &[f64]) -> Vec<f64> {
    let e: Vec<f64> = x.iter().map(|v| v.exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

pub fn add_bias(a: &Mat, b: &[f64]) -> Mat {
    a.iter().map(|r| r.iter().zip(b).map(|(x, y)| x + y).collect()).collect()
}

/// Same-padded cross-correlation of `x[n][w]` with `k[h][kw]`: pad
/// `(h-1)/2` rows and `(kw-1)/2` columns before.
pub fn conv_same(x: &Mat, k: &Mat) -> Mat {
    let (n, w) = (x.len(), x[0].len());
    let (h, kw) = (k.len(), k[0].len());
    let (pr, pc) = ((h as isize - 1) / 2, (kw as isize - 1) / 2);
    let mut out = vec![vec![0.0; w]; n];
    for r in 0..n as isize {
        for c in 0..w as isize {
            let mut s = 0.0;
            for a in 0..h as isize {
                for b in 0..kw as isize {
                    let (xr, xc) = (r + a - pr, c + b - pc);
                    if xr >= 0 && xr < n as isize && xc >= 0 && xc < w as isize {
                        s += k[a as usize][b as usize] * x[xr as usize][xc as usize];
                    }
                }
            }
            out[r as usize][c as usize] = s;
        }
    }
    out
}

/// Averaged multi-kernel conv with per-kernel bias.
pub fn conv_avg(x: &Mat, kernels: &[Mat], bias: &[f64]) -> Mat {
    let f = kernels.len() as f64;
    let mut out = vec![vec![0.0; x[0].len()]; x.len()];
    for (k, b) in kernels.iter().zip(bias) {
        let y = conv_same(x, k);
        for (o, yr) in out.iter_mut().zip(&y) {
            for (ov, yv) in o.iter_mut().zip(yr) {
                *ov += yv + b;
            }
        }
    }
    out.iter().map(|r| r.iter().map(|v| v / f).collect()).collect()
}

/// Sequence projection of one head: `proj[p][n] * x[n][dh]`.
pub fn head_cols(x: &Mat, h: usize, dh: usize) -> Mat {
    x.iter().map(|r| r[h * dh..(h + 1) * dh].to_vec()).collect()
}

/// Per-head attention with explicit loops. `kproj`/`vproj` map a head's
/// `[n][dh]` keys/values to the attended rows.
pub struct HeadAttn<'a> {
    pub heads: usize,
    pub kproj: &'a dyn Fn(usize, &Mat) -> Mat,
    pub vproj: &'a dyn Fn(usize, &Mat) -> Mat,
    pub conv: Option<(&'a [Mat], &'a [f64])>,
}

pub struct AttnOut {
    pub out: Mat,
    pub pre: Vec<Mat>,
    pub post: Vec<Mat>,
    pub weights: Vec<Mat>,
}

pub fn attention(
    x: &Mat,
    wq: &Mat,
    wk: &Mat,
    wv: &Mat,
    wo: &Mat,
    bo: &[f64],
    spec: &HeadAttn,
) -> AttnOut {
    let d = wq[0].len();
    let dh = d / spec.heads;
    let (q, k, v) = (matmul(x, wq), matmul(x, wk), matmul(x, wv));
    let n = x.len();
    let mut concat = vec![vec![0.0; d]; n];
    let (mut pre, mut post, mut weights) = (vec![], vec![], vec![]);
    for h in 0..spec.heads {
        let qh = head_cols(&q, h, dh);
        let kh = (spec.kproj)(h, &head_cols(&k, h, dh));
        let vh = (spec.vproj)(h, &head_cols(&v, h, dh));
        let m = kh.len();
        let mut logits = vec![vec![0.0; m]; n];
        for i in 0..n {
            for j in 0..m {
                let mut s = 0.0;
                for t in 0..dh {
                    s += qh[i][t] * kh[j][t];
                }
                logits[i][j] = s / (dh as f64).sqrt();
            }
        }
        let conv = match spec.conv {
            Some((ks, bs)) => conv_avg(&logits, ks, bs),
            None => logits.clone(),
        };
        let w: Mat = conv.iter().map(|r| softmax_row(r)).collect();
        for i in 0..n {
            for t in 0..dh {
                let mut s = 0.0;
                for j in 0..m {
                    s += w[i][j] * vh[j][t];
                }
                concat[i][h * dh + t] = s;
            }
        }
        pre.push(logits);
        post.push(conv);
        weights.push(w);
    }
    AttnOut {
        out: add_bias(&matmul(&concat, wo), bo),
        pre,
        post,
        weights,
    }
}

pub fn identity_proj(_: usize, x: &Mat) -> Mat {
    x.clone()
}

fn dyt(x: &Mat, a: &[f64], g: &[f64], b: &[f64]) -> Mat {
    x.iter()
        .map(|r| r.iter().enumerate().map(|(c, v)| g[c] * (a[c] * v).tanh() + b[c]).collect())
        .collect()
}

fn relu(x: &Mat) -> Mat {
    x.iter().map(|r| r.iter().map(|v| v.max(0.0)).collect()).collect()
}

fn p(model: &Model, name: &str) -> Tensor {
    model.param(name).unwrap_or_else(|| panic!("missing parameter {name}")).clone()
}

fn pm(model: &Model, name: &str) -> Mat {
    to_mat(&p(model, name))
}

fn pv(model: &Model, name: &str) -> Vec<f64> {
    p(model, name).data().to_vec()
}

/// Whole-model forward for one jet written from the parameter registry
/// with plain loops; mirrors the documented layer layout.
pub fn model_forward(model: &Model, jet: &Mat) -> Vec<f64> {
    let cfg = model.config();
    let (n, heads, pcount) = (cfg.n, cfg.heads, cfg.proj);
    let dh = cfg.d / heads;
    let mut h = add_bias(&matmul(jet, &pm(model, "embed.w")), &pv(model, "embed.b"));
    for l in 0..cfg.layers {
        let a = format!("layer{l}.attn");
        let proj_name = |side: &str| if cfg.share_ef() { format!("{a}.ef") } else { format!("{a}.{side}") };
        let make = |kind: ProjKind, name: String| -> Box<dyn Fn(usize, &Mat) -> Mat> {
            match kind {
                ProjKind::None => Box::new(identity_proj),
                ProjKind::Dense => {
                    let e = p(model, &name);
                    Box::new(move |hd: usize, x: &Mat| {
                        let rows: Mat = (0..pcount)
                            .map(|i| (0..n).map(|t| e.get(&[hd, i, t])).collect())
                            .collect();
                        matmul(&rows, x)
                    })
                }
                ProjKind::Partitioned => {
                    let r = p(model, &format!("{name}_rows"));
                    let w = n.div_ceil(pcount);
                    let width = r.shape()[1];
                    let padded = width == w * pcount;
                    Box::new(move |hd: usize, x: &Mat| {
                        let mut out = vec![vec![0.0; dh]; pcount];
                        let mut offset = 0;
                        for (i, row) in out.iter_mut().enumerate() {
                            let (start, len) = if padded {
                                (i * w, w)
                            } else {
                                let fw = n / pcount;
                                (i * fw, if i + 1 == pcount { n - i * fw } else { fw })
                            };
                            for j in 0..len {
                                let t = start + j;
                                if t < n {
                                    for c in 0..dh {
                                        row[c] += r.get(&[hd, offset + j]) * x[t][c];
                                    }
                                }
                            }
                            offset += len;
                        }
                        out
                    })
                }
            }
        };
        let kproj = make(cfg.key_proj(), proj_name("e"));
        let vproj = make(cfg.value_proj(), proj_name("f"));
        let kernels: Vec<Mat> = (0..cfg.filters.len())
            .filter(|_| cfg.has_conv())
            .map(|i| pm(model, &format!("layer{l}.conv.k{i}")))
            .collect();
        let cbias = if cfg.has_conv() { pv(model, &format!("layer{l}.conv.b")) } else { vec![] };
        let spec = HeadAttn {
            heads,
            kproj: &*kproj,
            vproj: &*vproj,
            conv: cfg.has_conv().then_some((&kernels[..], &cbias[..])),
        };
        let att = attention(
            &h,
            &pm(model, &format!("{a}.w_q")),
            &pm(model, &format!("{a}.w_k")),
            &pm(model, &format!("{a}.w_v")),
            &pm(model, &format!("{a}.out.w")),
            &pv(model, &format!("{a}.out.b")),
            &spec,
        );
        let nm = |s: &str| format!("layer{l}.{s}");
        let x = dyt(
            &att.out,
            &pv(model, &nm("norm1.alpha")),
            &pv(model, &nm("norm1.gamma")),
            &pv(model, &nm("norm1.beta")),
        );
        let f = relu(&add_bias(&matmul(&x, &pm(model, &nm("ffn1.w"))), &pv(model, &nm("ffn1.b"))));
        let f = add_bias(&matmul(&f, &pm(model, &nm("ffn2.w"))), &pv(model, &nm("ffn2.b")));
        h = dyt(
            &f,
            &pv(model, &nm("norm2.alpha")),
            &pv(model, &nm("norm2.gamma")),
            &pv(model, &nm("norm2.beta")),
        );
    }
    let pooled: Vec<f64> = (0..cfg.d)
        .map(|c| h.iter().map(|r| r[c]).fold(f64::NEG_INFINITY, f64::max))
        .collect();
    let z = relu(&add_bias(&matmul(&vec![pooled], &pm(model, "head1.w")), &pv(model, "head1.b")));
    add_bias(&matmul(&z, &pm(model, "head2.w")), &pv(model, "head2.b")).remove(0)
}

pub fn jet_mat(jet: &Jet) -> Mat {
    jet.particles.iter().map(|p| p.features().to_vec()).collect()
}

/// Random jet of `real` particles padded to `n`.
pub fn random_jet(rng: &mut ChaCha8Rng, real: usize, n: usize, label: usize) -> Jet {
    let mut parts: Vec<Particle> = (0..real)
        .map(|_| {
            Particle::new(
                rng.random_range(1.0..10.0),
                rng.random_range(-0.5..0.5),
                rng.random_range(-0.5..0.5),
            )
            .unwrap()
        })
        .collect();
    parts.resize(n, Particle::pad());
    Jet::new(parts, label)
}

/// Relative error with a floor on the denominator so that exact zeros
/// compare by absolute difference.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Central finite difference of `f` with respect to `x[i]`.
pub fn central_diff(x: &mut [f64], i: usize, step: f64, f: &mut dyn FnMut(&[f64]) -> f64) -> f64 {
    let orig = x[i];
    x[i] = orig + step;
    let up = f(x);
    x[i] = orig - step;
    let down = f(x);
    x[i] = orig;
    (up - down) / (2.0 * step)
}

/// Brute-force AUC: wins plus half ties over all signal/background pairs.
pub fn pairwise_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] && !labels[j] {
                pairs += 1.0;
                wins += if si > sj { 1.0 } else if si == sj { 0.5 } else { 0.0 };
            }
        }
    }
    wins / pairs
}

/// Lowers the threshold through every signal score and keeps the first
/// one that lets at least `eff` of the signal through.
pub fn sweep_rejection(scores: &[f64], labels: &[bool], eff: f64) -> f64 {
    let mut cuts: Vec<f64> = scores.iter().zip(labels).filter(|(_, &l)| l).map(|(&s, _)| s).collect();
    cuts.sort_by(|a, b| b.total_cmp(a));
    let ns = cuts.len() as f64;
    let nb = labels.iter().filter(|&&l| !l).count() as f64;
    for t in cuts {
        let sig = scores.iter().zip(labels).filter(|(&s, &l)| l && s >= t).count() as f64;
        if sig / ns >= eff - 1e-12 {
            let bkg = scores.iter().zip(labels).filter(|(&s, &l)| !l && s >= t).count() as f64;
            return if bkg == 0.0 { f64::INFINITY } else { nb / bkg };
        }
    }
    unreachable!()
}

/// Least-squares polynomial fit of the given degree; returns the residual
/// sum of squares and R².
pub fn poly_fit(xs: &[f64], ys: &[f64], degree: usize) -> (f64, f64) {
    let k = degree + 1;
    let mut a = vec![vec![0.0; k + 1]; k];
    for (&x, &y) in xs.iter().zip(ys) {
        for i in 0..k {
            for j in 0..k {
                a[i][j] += x.powi((i + j) as i32);
            }
            a[i][k] += y * x.powi(i as i32);
        }
    }
    for col in 0..k {
        let pivot = (col..k).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).unwrap();
        a.swap(col, pivot);
        for row in 0..k {
            if row != col {
                let f = a[row][col] / a[col][col];
                for c in col..=k {
                    a[row][c] -= f * a[col][c];
                }
            }
        }
    }
    let coef: Vec<f64> = (0..k).map(|i| a[i][k] / a[i][i]).collect();
    let mean = ys.iter().sum::<f64>() / ys.len() as f64;
    let (mut rss, mut tss) = (0.0, 0.0);
    for (&x, &y) in xs.iter().zip(ys) {
        let fit: f64 = coef.iter().enumerate().map(|(i, c)| c * x.powi(i as i32)).sum();
        rss += (y - fit).powi(2);
        tss += (y - mean).powi(2);
    }
    (rss, 1.0 - rss / tss)
}
