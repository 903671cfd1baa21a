//! Classification metrics: accuracy, ROC AUC and background rejection.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::jet::{batch_tensor, Jet};
use crate::model::Model;

fn check_binary(scores: &[f64], labels: &[bool]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::Metric(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Metric("both classes must be present".into()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Metric("scores contain NaN".into()));
    }
    Ok((pos, neg))
}

/// Area under the ROC curve as the Mann-Whitney statistic with average
/// ranks for ties.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (pos, neg) = check_binary(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1 share their average
        let avg = (i + j + 2) as f64 / 2.0;
        rank_sum += avg * order[i..=j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j + 1;
    }
    let (pos, neg) = (pos as f64, neg as f64);
    Ok((rank_sum - pos * (pos + 1.0) / 2.0) / (pos * neg))
}

/// Inverse background efficiency at signal efficiency `eff`.
///
/// The threshold is the `ceil(eff * N_s)`-th highest signal score; events
/// with `score >= threshold` pass. Returns `f64::INFINITY` when no
/// background passes.
pub fn rejection_at_efficiency(scores: &[f64], labels: &[bool], eff: f64) -> Result<f64> {
    let (pos, neg) = check_binary(scores, labels)?;
    if !(eff > 0.0 && eff <= 1.0) {
        return Err(Error::Metric(format!("efficiency {eff} must lie in (0, 1]")));
    }
    let mut signal: Vec<f64> = scores.iter().zip(labels).filter(|(_, &l)| l).map(|(&s, _)| s).collect();
    signal.sort_by(|a, b| b.total_cmp(a));
    let k = ((eff * pos as f64 - 1e-9).ceil() as usize).clamp(1, pos);
    let threshold = signal[k - 1];
    let passed = scores
        .iter()
        .zip(labels)
        .filter(|(&s, &l)| !l && s >= threshold)
        .count();
    if passed == 0 {
        return Ok(f64::INFINITY);
    }
    Ok(neg as f64 / passed as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub accuracy: f64,
    /// One-vs-rest AUC per class.
    pub auc: Vec<f64>,
    pub auc_mean: f64,
    /// One-vs-rest 1/FPR at 80% TPR per class; infinite entries are flagged.
    pub rejection: Vec<f64>,
    pub rejection_infinite: Vec<bool>,
    /// Mean over the finite rejections (NaN if none are finite).
    pub rejection_mean: f64,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
}

/// Signal efficiency used for rejection summaries.
pub const REJECTION_EFFICIENCY: f64 = 0.8;

/// Per-class probabilities for each jet. A single-logit model yields
/// `[1 - p, p]`.
pub fn predict_scores(model: &Model, jets: &[Jet]) -> Result<Vec<Vec<f64>>> {
    const CHUNK: usize = 512;
    let mut out = Vec::with_capacity(jets.len());
    for chunk in jets.chunks(CHUNK) {
        let refs: Vec<&Jet> = chunk.iter().collect();
        let logits = model.forward::<f64>(&batch_tensor(&refs)?)?;
        let c = logits.last_dim();
        for row in logits.data().chunks_exact(c) {
            out.push(probabilities(row));
        }
    }
    Ok(out)
}

pub(crate) fn probabilities(logits: &[f64]) -> Vec<f64> {
    if logits.len() == 1 {
        let p = 1.0 / (1.0 + (-logits[0]).exp());
        return vec![1.0 - p, p];
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Index of the largest score; the first wins on ties.
pub fn argmax(scores: &[f64]) -> usize {
    scores
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0
}

/// Metrics from per-class scores and integer labels.
pub fn evaluate_scores(scores: &[Vec<f64>], labels: &[usize]) -> Result<EvalReport> {
    if scores.is_empty() || scores.len() != labels.len() {
        return Err(Error::Metric(format!(
            "need matching non-empty scores and labels, got {} and {}",
            scores.len(),
            labels.len()
        )));
    }
    let c = scores[0].len();
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::Metric(format!("label {bad} out of range for {c} classes")));
    }
    let mut confusion = vec![vec![0usize; c]; c];
    for (s, &y) in scores.iter().zip(labels) {
        confusion[y][argmax(s)] += 1;
    }
    let correct: usize = (0..c).map(|i| confusion[i][i]).sum();
    let accuracy = correct as f64 / labels.len() as f64;
    let mut auc = Vec::with_capacity(c);
    let mut rejection = Vec::with_capacity(c);
    for k in 0..c {
        let col: Vec<f64> = scores.iter().map(|s| s[k]).collect();
        let is_k: Vec<bool> = labels.iter().map(|&l| l == k).collect();
        auc.push(roc_auc(&col, &is_k).map_err(|e| Error::Metric(format!("class {k}: {e}")))?);
        rejection.push(rejection_at_efficiency(&col, &is_k, REJECTION_EFFICIENCY)?);
    }
    let auc_mean = auc.iter().sum::<f64>() / c as f64;
    let rejection_infinite: Vec<bool> = rejection.iter().map(|r| r.is_infinite()).collect();
    let finite: Vec<f64> = rejection.iter().copied().filter(|r| r.is_finite()).collect();
    let rejection_mean = if finite.is_empty() {
        f64::NAN
    } else {
        finite.iter().sum::<f64>() / finite.len() as f64
    };
    Ok(EvalReport {
        accuracy,
        auc,
        auc_mean,
        rejection,
        rejection_infinite,
        rejection_mean,
        confusion,
    })
}

pub fn evaluate(model: &Model, jets: &[Jet]) -> Result<EvalReport> {
    let scores = predict_scores(model, jets)?;
    let labels: Vec<usize> = jets.iter().map(|j| j.label).collect();
    evaluate_scores(&scores, &labels)
}

/// Fraction of correct predictions.
pub fn accuracy(scores: &[Vec<f64>], labels: &[usize]) -> f64 {
    let correct = scores.iter().zip(labels).filter(|(s, &y)| argmax(s) == y).count();
    correct as f64 / labels.len().max(1) as f64
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BinAccuracy {
    /// Inclusive lower multiplicity edge.
    pub lo: usize,
    /// Exclusive upper multiplicity edge.
    pub hi: usize,
    pub count: usize,
    /// `None` when the bin holds no jets.
    pub accuracy: Option<f64>,
}

/// Accuracy per multiplicity bin `[edges[i], edges[i + 1])`, counting
/// non-padding particles.
pub fn binned_accuracy_scores(
    scores: &[Vec<f64>],
    jets: &[Jet],
    edges: &[usize],
) -> Result<Vec<BinAccuracy>> {
    if edges.len() < 2 || edges.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config(format!("bin edges must be strictly ascending, got {edges:?}")));
    }
    Ok(edges
        .windows(2)
        .map(|w| {
            let (lo, hi) = (w[0], w[1]);
            let (mut count, mut correct) = (0, 0);
            for (s, j) in scores.iter().zip(jets) {
                let m = j.multiplicity();
                if (lo..hi).contains(&m) {
                    count += 1;
                    correct += usize::from(argmax(s) == j.label);
                }
            }
            BinAccuracy {
                lo,
                hi,
                count,
                accuracy: (count > 0).then(|| correct as f64 / count as f64),
            }
        })
        .collect())
}

pub fn binned_accuracy(model: &Model, jets: &[Jet], edges: &[usize]) -> Result<Vec<BinAccuracy>> {
    let scores = predict_scores(model, jets)?;
    binned_accuracy_scores(&scores, jets, edges)
}

/// Columns: `jet_id,label,score_0,..,score_{C-1}`.
pub fn write_scores_csv(path: impl AsRef<Path>, scores: &[Vec<f64>], labels: &[usize]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let c = scores.first().map_or(0, Vec::len);
    write!(w, "jet_id,label")?;
    for k in 0..c {
        write!(w, ",score_{k}")?;
    }
    writeln!(w)?;
    for (i, (s, y)) in scores.iter().zip(labels).enumerate() {
        write!(w, "{i},{y}")?;
        for v in s {
            write!(w, ",{v}")?;
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

/// Columns: `lo,hi,count,accuracy` (accuracy empty for empty bins).
pub fn write_bins_csv(path: impl AsRef<Path>, bins: &[BinAccuracy]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "lo,hi,count,accuracy")?;
    for b in bins {
        let acc = b.accuracy.map(|a| a.to_string()).unwrap_or_default();
        writeln!(w, "{},{},{},{acc}", b.lo, b.hi, b.count)?;
    }
    w.flush()?;
    Ok(())
}
