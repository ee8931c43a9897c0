// SPDX-License-Identifier: MIT OR Apache-2.0

//! Evaluation: reconstruction error, loss recovered through a frozen toy
//! readout, dictionary recovery against planted atoms, sparse probing, and
//! both-sign latent coverage.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::linalg::{dot, Matrix, Rng, Vector};
use crate::model::{encode, reconstruct, SaeParams, SaeVariant};

/// Normalized squared reconstruction error `‖x − x̂‖² / ‖x‖²`.
pub fn nmse(x: &Vector, xhat: &Vector) -> Result<f64> {
    check_dim("nmse", x.len(), xhat.len())?;
    nmse_slice(x.as_slice(), xhat.as_slice())
}

pub(crate) fn nmse_slice(x: &[f64], xhat: &[f64]) -> Result<f64> {
    let xx = dot(x, x);
    if xx == 0.0 {
        return Err(Error::UndefinedMetric("nmse of a zero-norm input".into()));
    }
    let err: f64 = x.iter().zip(xhat).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(err / xx)
}

/// Mean of per-sample nMSE ratios.
pub fn batch_nmse(xs: &[Vector], xhats: &[Vector]) -> Result<f64> {
    check_dim("batch_nmse", xs.len(), xhats.len())?;
    if xs.is_empty() {
        return Err(Error::UndefinedMetric("nmse of an empty batch".into()));
    }
    let mut total = 0.0;
    for (x, xh) in xs.iter().zip(xhats) {
        total += nmse(x, xh)?;
    }
    Ok(total / xs.len() as f64)
}

/// Mean per-sample nMSE of an SAE over the rows of `x` (`n × d`).
pub fn model_nmse(x: &Matrix, params: &SaeParams, variant: &SaeVariant) -> Result<f64> {
    check_dim("model_nmse", params.d(), x.cols())?;
    if x.rows() == 0 {
        return Err(Error::UndefinedMetric("nmse of an empty batch".into()));
    }
    let mut total = 0.0;
    for r in 0..x.rows() {
        let xv = Vector::from_vec_unchecked(x.row(r).to_vec());
        let xh = reconstruct(&xv, params, variant)?;
        total += nmse(&xv, &xh)?;
    }
    Ok(total / x.rows() as f64)
}

/// Settings for fitting a [`ToyHead`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadConfig {
    pub steps: usize,
    pub lr: f64,
    /// Per-class sample cap used for fitting; classes are balanced exactly.
    pub per_class: usize,
    pub seed: u64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            lr: 0.05,
            per_class: 128,
            seed: 0,
        }
    }
}

/// Frozen linear softmax readout without bias, fitted on raw activations.
///
/// Without a bias the logits of the zero vector are all equal, so
/// `CE(head(0)) = ln V` for every label.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyHead {
    /// `V × d`.
    readout: Matrix,
}

impl ToyHead {
    pub fn from_readout(readout: Matrix) -> Self {
        Self { readout }
    }

    pub fn readout(&self) -> &Matrix {
        &self.readout
    }

    pub fn classes(&self) -> usize {
        self.readout.rows()
    }

    /// Fits the readout by full-batch Adam on mean cross-entropy over a
    /// class-balanced subsample of `x` (`n × d`).
    pub fn fit(x: &Matrix, labels: &[usize], classes: usize, cfg: &HeadConfig) -> Result<Self> {
        check_dim("ToyHead::fit (labels)", x.rows(), labels.len())?;
        if classes < 2 {
            return Err(Error::contract("a toy head needs at least two classes"));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::contract(format!(
                "label {l} out of range for {classes} classes"
            )));
        }
        let rows = balanced_subsample(labels, classes, cfg.per_class, cfg.seed);
        if rows.is_empty() {
            return Err(Error::contract("some class has no samples"));
        }
        let d = x.cols();
        let mut r = vec![0.0; classes * d];
        let (mut m, mut v) = (vec![0.0; r.len()], vec![0.0; r.len()]);
        let (b1, b2, eps) = (0.9_f64, 0.999_f64, 1e-8);
        let mut grad = vec![0.0; r.len()];
        let mut probs = vec![0.0; classes];
        let inv_n = 1.0 / rows.len() as f64;
        for t in 1..=cfg.steps {
            grad.iter_mut().for_each(|g| *g = 0.0);
            for &i in &rows {
                let xi = x.row(i);
                softmax_logits(&r, xi, classes, &mut probs);
                probs[labels[i]] -= 1.0;
                for (c, p) in probs.iter().enumerate() {
                    crate::linalg::axpy(p * inv_n, xi, &mut grad[c * d..(c + 1) * d]);
                }
            }
            let bc1 = 1.0 - b1.powi(t as i32);
            let bc2 = 1.0 - b2.powi(t as i32);
            for j in 0..r.len() {
                m[j] = b1 * m[j] + (1.0 - b1) * grad[j];
                v[j] = b2 * v[j] + (1.0 - b2) * grad[j] * grad[j];
                r[j] -= cfg.lr * (m[j] / bc1) / ((v[j] / bc2).sqrt() + eps);
            }
        }
        Ok(Self {
            readout: Matrix::new(classes, d, r)?,
        })
    }

    /// Cross-entropy of the readout on one sample.
    pub fn cross_entropy(&self, x: &[f64], label: usize) -> f64 {
        let v = self.classes();
        let mut logits = vec![0.0; v];
        for (c, l) in logits.iter_mut().enumerate() {
            *l = dot(self.readout.row(c), x);
        }
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        lse - logits[label]
    }

    /// Mean cross-entropy over the rows of `x`.
    pub fn mean_cross_entropy(&self, x: &Matrix, labels: &[usize]) -> Result<f64> {
        check_dim("cross_entropy (labels)", x.rows(), labels.len())?;
        check_dim("cross_entropy (dim)", self.readout.cols(), x.cols())?;
        if x.rows() == 0 {
            return Err(Error::UndefinedMetric(
                "cross-entropy of an empty batch".into(),
            ));
        }
        let total: f64 = (0..x.rows())
            .map(|r| self.cross_entropy(x.row(r), labels[r]))
            .sum();
        Ok(total / x.rows() as f64)
    }
}

fn softmax_logits(r: &[f64], x: &[f64], classes: usize, out: &mut [f64]) {
    let d = x.len();
    for c in 0..classes {
        out[c] = dot(&r[c * d..(c + 1) * d], x);
    }
    let max = out.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for o in out.iter_mut() {
        *o = (*o - max).exp();
        s += *o;
    }
    out.iter_mut().for_each(|o| *o /= s);
}

/// Row indices with the same number of samples per class (the smallest class
/// count, capped at `per_class`), in a seeded order.
pub fn balanced_subsample(
    labels: &[usize],
    classes: usize,
    per_class: usize,
    seed: u64,
) -> Vec<usize> {
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &l) in labels.iter().enumerate() {
        if l < classes {
            by_class[l].push(i);
        }
    }
    let take = by_class
        .iter()
        .map(Vec::len)
        .min()
        .unwrap_or(0)
        .min(per_class);
    let mut rng = Rng::from_seed(seed);
    let mut rows = Vec::with_capacity(take * classes);
    for members in &by_class {
        for j in rng.sample_distinct(members.len(), take) {
            rows.push(members[j]);
        }
    }
    rows.sort_unstable();
    rows
}

/// Cross-entropy preservation under reconstruction substitution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecoveredReport {
    pub h_orig: f64,
    pub h_star: f64,
    pub h_zero: f64,
    pub score: f64,
}

/// Scores `xhat` against `x` through a frozen head: 1 when `xhat = x`, 0 when
/// `xhat = 0`.
pub fn loss_recovered_from(
    head: &ToyHead,
    x: &Matrix,
    xhat: &Matrix,
    labels: &[usize],
) -> Result<LossRecoveredReport> {
    check_dim("loss_recovered (rows)", x.rows(), xhat.rows())?;
    check_dim("loss_recovered (cols)", x.cols(), xhat.cols())?;
    let h_orig = head.mean_cross_entropy(x, labels)?;
    let h_star = head.mean_cross_entropy(xhat, labels)?;
    let h_zero = head.mean_cross_entropy(&Matrix::zeros(x.rows(), x.cols()), labels)?;
    if h_orig == h_zero {
        return Err(Error::UndefinedMetric(
            "loss recovered undefined: H_orig equals H_zero".into(),
        ));
    }
    Ok(LossRecoveredReport {
        h_orig,
        h_star,
        h_zero,
        score: (h_star - h_zero) / (h_orig - h_zero),
    })
}

/// Loss recovered of an SAE's reconstructions of the rows of `x`.
pub fn loss_recovered(
    x: &Matrix,
    labels: &[usize],
    params: &SaeParams,
    variant: &SaeVariant,
    head: &ToyHead,
) -> Result<LossRecoveredReport> {
    let xhat = reconstruct_rows(x, params, variant)?;
    loss_recovered_from(head, x, &xhat, labels)
}

/// Reconstructions of every row of `x`.
pub fn reconstruct_rows(x: &Matrix, params: &SaeParams, variant: &SaeVariant) -> Result<Matrix> {
    check_dim("reconstruct_rows", params.d(), x.cols())?;
    let mut out = Vec::with_capacity(x.rows() * x.cols());
    for r in 0..x.rows() {
        let xv = Vector::from_vec_unchecked(x.row(r).to_vec());
        out.extend(reconstruct(&xv, params, variant)?.into_vec());
    }
    Matrix::new(x.rows(), x.cols(), out)
}

/// Codes of every row of `x` (`n × P`).
pub fn encode_rows(x: &Matrix, params: &SaeParams, variant: &SaeVariant) -> Result<Matrix> {
    check_dim("encode_rows", params.d(), x.cols())?;
    let mut out = Vec::with_capacity(x.rows() * params.p());
    for r in 0..x.rows() {
        let xv = Vector::from_vec_unchecked(x.row(r).to_vec());
        out.extend(encode(&xv, params, variant)?.into_vec());
    }
    Matrix::new(x.rows(), params.p(), out)
}

/// Best match of one planted atom.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AtomMatch {
    pub true_index: usize,
    pub learned_index: Option<usize>,
    /// Signed cosine with the matched learned atom (0 when unmatched).
    pub cos: f64,
    pub recovered: bool,
}

/// Two learned atoms aligned with opposite ends of one planted axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FragmentationPair {
    pub true_index: usize,
    pub positive_atom: usize,
    pub negative_atom: usize,
    pub cos_positive: f64,
    pub cos_negative: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryReport {
    pub tau_rec: f64,
    pub matches: Vec<AtomMatch>,
    pub recovered: usize,
    pub fragmentation: Vec<FragmentationPair>,
}

/// Signed cosines between every planted column (rows of the result) and every
/// learned column.
fn cosine_table(learned: &Matrix, truth: &Matrix) -> Result<Matrix> {
    check_dim(
        "dictionary_recovery (ambient dim)",
        truth.rows(),
        learned.rows(),
    )?;
    let lt = learned.transpose();
    let tt = truth.transpose();
    let ln = learned.column_norms();
    let tn = truth.column_norms();
    for (c, n) in ln.iter().enumerate() {
        if *n == 0.0 {
            return Err(Error::DegenerateAtom { column: c });
        }
    }
    if let Some(c) = tn.iter().position(|n| *n == 0.0) {
        return Err(Error::DegenerateAtom { column: c });
    }
    let mut cos = Matrix::zeros(truth.cols(), learned.cols());
    for (t, tnorm) in tn.iter().enumerate() {
        for (l, lnorm) in ln.iter().enumerate() {
            cos.set(t, l, dot(tt.row(t), lt.row(l)) / (tnorm * lnorm));
        }
    }
    Ok(cos)
}

/// Greedy injective matching of planted atoms to learned atoms by descending
/// `|cos|`, plus the fragmentation pairs at threshold `tau_rec`.
pub fn dictionary_recovery(
    learned: &Matrix,
    truth: &Matrix,
    tau_rec: f64,
) -> Result<RecoveryReport> {
    let cos = cosine_table(learned, truth)?;
    let (nt, nl) = (truth.cols(), learned.cols());
    let mut cells: Vec<(usize, usize)> =
        (0..nt).flat_map(|t| (0..nl).map(move |l| (t, l))).collect();
    cells.sort_by(|a, b| {
        cos.get(b.0, b.1)
            .abs()
            .total_cmp(&cos.get(a.0, a.1).abs())
            .then(a.cmp(b))
    });
    let mut matches: Vec<AtomMatch> = (0..nt)
        .map(|t| AtomMatch {
            true_index: t,
            learned_index: None,
            cos: 0.0,
            recovered: false,
        })
        .collect();
    let mut used = vec![false; nl];
    let mut assigned = 0;
    for (t, l) in cells {
        if assigned == nt.min(nl) {
            break;
        }
        if matches[t].learned_index.is_some() || used[l] {
            continue;
        }
        let c = cos.get(t, l);
        matches[t] = AtomMatch {
            true_index: t,
            learned_index: Some(l),
            cos: c,
            recovered: c.abs() >= tau_rec,
        };
        used[l] = true;
        assigned += 1;
    }
    let mut fragmentation = Vec::new();
    for t in 0..nt {
        let row = cos.row(t);
        let best_pos = (0..nl)
            .filter(|&l| row[l] >= tau_rec)
            .max_by(|&a, &b| row[a].total_cmp(&row[b]).then(b.cmp(&a)));
        let best_neg = (0..nl)
            .filter(|&l| row[l] <= -tau_rec)
            .min_by(|&a, &b| row[a].total_cmp(&row[b]).then(a.cmp(&b)));
        if let (Some(p), Some(n)) = (best_pos, best_neg) {
            fragmentation.push(FragmentationPair {
                true_index: t,
                positive_atom: p,
                negative_atom: n,
                cos_positive: row[p],
                cos_negative: row[n],
            });
        }
    }
    Ok(RecoveryReport {
        tau_rec,
        recovered: matches.iter().filter(|m| m.recovered).count(),
        matches,
        fragmentation,
    })
}

/// Largest planted-atom count accepted by [`optimal_matching`].
pub const AUDIT_MAX_TRUE: usize = 10;

/// Exhaustive maximum-weight injective assignment on `|cos|` (dynamic program
/// over subsets of planted atoms). Returns the total `|cos|` and the learned
/// index per planted atom.
pub fn optimal_matching(learned: &Matrix, truth: &Matrix) -> Result<(f64, Vec<usize>)> {
    let nt = truth.cols();
    if nt > AUDIT_MAX_TRUE {
        return Err(Error::Capacity {
            what: "exhaustive matching audit (planted atoms)",
            limit: AUDIT_MAX_TRUE,
            got: nt,
        });
    }
    let nl = learned.cols();
    if nl < nt {
        return Err(Error::contract("fewer learned atoms than planted atoms"));
    }
    let cos = cosine_table(learned, truth)?;
    let full = (1usize << nt) - 1;
    // best[l][mask]: best weight using learned atoms < l covering `mask`
    let mut best = vec![vec![f64::NEG_INFINITY; full + 1]; nl + 1];
    let mut choice = vec![vec![usize::MAX; full + 1]; nl + 1];
    best[0][0] = 0.0;
    for l in 0..nl {
        for mask in 0..=full {
            let cur = best[l][mask];
            if cur == f64::NEG_INFINITY {
                continue;
            }
            if cur > best[l + 1][mask] {
                best[l + 1][mask] = cur;
                choice[l + 1][mask] = usize::MAX;
            }
            for t in 0..nt {
                if mask & (1 << t) == 0 {
                    let next = mask | (1 << t);
                    let w = cur + cos.get(t, l).abs();
                    if w > best[l + 1][next] {
                        best[l + 1][next] = w;
                        choice[l + 1][next] = t;
                    }
                }
            }
        }
    }
    let mut assign = vec![0usize; nt];
    let mut mask = full;
    for l in (1..=nl).rev() {
        let t = choice[l][mask];
        if t != usize::MAX {
            assign[t] = l - 1;
            mask &= !(1 << t);
        }
    }
    Ok((best[nl][full], assign))
}

/// Held-out accuracy of a sparse logistic probe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub accuracy: f64,
    /// Feature indices used, by descending mean difference.
    pub selected: Vec<usize>,
    pub train_size: usize,
    pub test_size: usize,
}

/// Fits a logistic probe on the `top_k` features with the largest class-mean
/// difference (chosen on the training split) and scores it on a held-out 20%.
pub fn probe_accuracy(
    features: &Matrix,
    labels: &[bool],
    top_k: usize,
    seed: u64,
) -> Result<ProbeResult> {
    check_dim("probe_accuracy (labels)", features.rows(), labels.len())?;
    let n_pos = labels.iter().filter(|l| **l).count();
    if n_pos == 0 || n_pos == labels.len() {
        return Err(Error::contract("probe labels contain a single class"));
    }
    let n = labels.len();
    if n < 5 {
        return Err(Error::contract("probe needs at least 5 samples"));
    }
    let mut rng = Rng::from_seed(seed);
    let order = rng.sample_distinct(n, n);
    let n_test = (n / 5).max(1);
    let (test, train) = order.split_at(n_test);

    let f = features.cols();
    let k = top_k.clamp(1, f);
    let (mut mp, mut mn, mut cp, mut cn) = (vec![0.0; f], vec![0.0; f], 0.0_f64, 0.0_f64);
    for &i in train {
        let (m, c) = if labels[i] {
            (&mut mp, &mut cp)
        } else {
            (&mut mn, &mut cn)
        };
        crate::linalg::axpy(1.0, features.row(i), m);
        *c += 1.0;
    }
    let diff: Vec<f64> = (0..f)
        .map(|j| (mp[j] / cp.max(1.0) - mn[j] / cn.max(1.0)).abs())
        .collect();
    let mut selected: Vec<usize> = (0..f).collect();
    selected.sort_by(|&a, &b| diff[b].total_cmp(&diff[a]).then(a.cmp(&b)));
    selected.truncate(k);

    // standardize on the training split
    let mut mu = vec![0.0; k];
    let mut sd = vec![0.0; k];
    for &i in train {
        for (j, &s) in selected.iter().enumerate() {
            mu[j] += features.get(i, s);
        }
    }
    mu.iter_mut().for_each(|m| *m /= train.len() as f64);
    for &i in train {
        for (j, &s) in selected.iter().enumerate() {
            let e = features.get(i, s) - mu[j];
            sd[j] += e * e;
        }
    }
    sd.iter_mut()
        .for_each(|s| *s = (*s / train.len() as f64).sqrt().max(1e-12));
    let feat = |i: usize| -> Vec<f64> {
        selected
            .iter()
            .enumerate()
            .map(|(j, &s)| (features.get(i, s) - mu[j]) / sd[j])
            .collect()
    };
    let xs: Vec<Vec<f64>> = train.iter().map(|&i| feat(i)).collect();
    let ys: Vec<f64> = train
        .iter()
        .map(|&i| f64::from(u8::from(labels[i])))
        .collect();
    let mut w = vec![0.0; k];
    let mut b = 0.0;
    let lr = 0.5;
    let l2 = 1e-4;
    for _ in 0..500 {
        let mut gw = vec![0.0; k];
        let mut gb = 0.0;
        for (x, y) in xs.iter().zip(&ys) {
            let p = sigmoid(dot(&w, x) + b);
            crate::linalg::axpy(p - y, x, &mut gw);
            gb += p - y;
        }
        let inv = 1.0 / xs.len() as f64;
        for j in 0..k {
            w[j] -= lr * (gw[j] * inv + l2 * w[j]);
        }
        b -= lr * gb * inv;
    }
    let correct = test
        .iter()
        .filter(|&&i| (dot(&w, &feat(i)) + b > 0.0) == labels[i])
        .count();
    Ok(ProbeResult {
        accuracy: correct as f64 / test.len() as f64,
        selected,
        train_size: train.len(),
        test_size: test.len(),
    })
}

fn sigmoid(t: f64) -> f64 {
    1.0 / (1.0 + (-t).exp())
}

/// Latent with the best both-sign coverage on contrast pairs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoverageResult {
    pub latent: usize,
    /// Fraction of pairs with opposite-signed, nonzero activations in the
    /// latent's orientation.
    pub coverage: f64,
    /// `true` when the latent is positive on `x⁺` and negative on `x⁻`.
    pub positive_on_plus: bool,
}

/// Exhaustive scan over latents of the fraction of pairs on which a latent is
/// positive on one side and negative on the other, taking the better of the
/// two orientations. Inputs are `n × P` code matrices of matched pairs.
pub fn both_sign_coverage(plus_codes: &Matrix, minus_codes: &Matrix) -> Result<CoverageResult> {
    check_dim(
        "both_sign_coverage (rows)",
        plus_codes.rows(),
        minus_codes.rows(),
    )?;
    check_dim(
        "both_sign_coverage (cols)",
        plus_codes.cols(),
        minus_codes.cols(),
    )?;
    let n = plus_codes.rows();
    if n == 0 || plus_codes.cols() == 0 {
        return Err(Error::UndefinedMetric("coverage over no pairs".into()));
    }
    let mut best = CoverageResult {
        latent: 0,
        coverage: -1.0,
        positive_on_plus: true,
    };
    for i in 0..plus_codes.cols() {
        let (mut fwd, mut rev) = (0usize, 0usize);
        for r in 0..n {
            let (a, b) = (plus_codes.get(r, i), minus_codes.get(r, i));
            fwd += usize::from(a > 0.0 && b < 0.0);
            rev += usize::from(a < 0.0 && b > 0.0);
        }
        for (count, orient) in [(fwd, true), (rev, false)] {
            let c = count as f64 / n as f64;
            if c > best.coverage {
                best = CoverageResult {
                    latent: i,
                    coverage: c,
                    positive_on_plus: orient,
                };
            }
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(x: &[f64]) -> Vector {
        Vector::new(x.to_vec()).unwrap()
    }

    #[test]
    fn nmse_examples() {
        assert_eq!(nmse(&v(&[3.0, 4.0]), &v(&[3.0, 4.0])).unwrap(), 0.0);
        assert_eq!(nmse(&v(&[3.0, 4.0]), &Vector::zeros(2)).unwrap(), 1.0);
        assert!((nmse(&v(&[3.0, 4.0]), &v(&[0.0, 4.0])).unwrap() - 0.36).abs() < 1e-15);
        assert!(matches!(
            nmse(&Vector::zeros(2), &v(&[1.0, 0.0])),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn nmse_scale_invariant_for_power_of_two() {
        let x = v(&[0.3, -1.7, 2.2]);
        let xh = v(&[0.1, -1.5, 2.0]);
        let base = nmse(&x, &xh).unwrap();
        for c in [2.0, -0.5, 8.0] {
            assert_eq!(nmse(&x.scaled(c), &xh.scaled(c)).unwrap(), base);
        }
    }

    #[test]
    fn batch_nmse_is_mean_of_ratios() {
        let xs = vec![v(&[1.0, 0.0]), v(&[10.0, 0.0])];
        let xh = vec![v(&[0.0, 0.0]), v(&[10.0, 0.0])];
        assert_eq!(batch_nmse(&xs, &xh).unwrap(), 0.5);
    }

    fn two_class_data() -> (Matrix, Vec<usize>) {
        let mut rng = Rng::from_seed(1);
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for i in 0..200 {
            let l = i % 2;
            let s = if l == 0 { 1.0 } else { -1.0 };
            rows.push(vec![s + 0.1 * rng.normal(), 0.1 * rng.normal()]);
            labels.push(l);
        }
        (Matrix::from_rows(&rows).unwrap(), labels)
    }

    #[test]
    fn loss_recovered_boundaries() {
        let (x, labels) = two_class_data();
        let head = ToyHead::fit(&x, &labels, 2, &HeadConfig::default()).unwrap();
        let r1 = loss_recovered_from(&head, &x, &x, &labels).unwrap();
        assert_eq!(r1.score, 1.0);
        assert!(r1.h_orig < r1.h_zero);
        assert!((r1.h_zero - 2f64.ln()).abs() < 1e-12);
        let r0 = loss_recovered_from(&head, &x, &Matrix::zeros(200, 2), &labels).unwrap();
        assert_eq!(r0.score, 0.0);
    }

    #[test]
    fn loss_recovered_relabel_invariant() {
        let (x, labels) = two_class_data();
        let head = ToyHead::fit(&x, &labels, 2, &HeadConfig::default()).unwrap();
        let xh = Matrix::new(200, 2, x.as_slice().iter().map(|v| 0.7 * v).collect()).unwrap();
        let a = loss_recovered_from(&head, &x, &xh, &labels).unwrap();
        // swap class rows of the readout and the labels together
        let r = head.readout();
        let swapped = ToyHead::from_readout(
            Matrix::from_rows(&[r.row(1).to_vec(), r.row(0).to_vec()]).unwrap(),
        );
        let relabeled: Vec<usize> = labels.iter().map(|l| 1 - l).collect();
        let b = loss_recovered_from(&swapped, &x, &xh, &relabeled).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn loss_recovered_degenerate_head() {
        let x = Matrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let head = ToyHead::from_readout(Matrix::zeros(2, 2));
        assert!(matches!(
            loss_recovered_from(&head, &x, &x, &[0]),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn balanced_subsample_is_balanced() {
        let labels: Vec<usize> = (0..100).map(|i| usize::from(i % 3 == 0)).collect();
        let rows = balanced_subsample(&labels, 2, 1000, 0);
        let ones = rows.iter().filter(|&&r| labels[r] == 1).count();
        assert_eq!(ones * 2, rows.len());
    }

    fn random_unit_columns(d: usize, p: usize, seed: u64) -> Matrix {
        let mut rng = Rng::from_seed(seed);
        let cols: Vec<Vector> = (0..p).map(|_| rng.unit_vector(d)).collect();
        Matrix::from_columns(&cols).unwrap()
    }

    #[test]
    fn recovery_identity_and_antipodal() {
        let h = random_unit_columns(16, 6, 3);
        let r = dictionary_recovery(&h, &h, 0.9).unwrap();
        assert_eq!(r.recovered, 6);
        assert!(r.fragmentation.is_empty());
        for (t, m) in r.matches.iter().enumerate() {
            assert_eq!(m.learned_index, Some(t));
        }
        let neg: Vec<Vector> = (0..6).map(|c| h.column(c).scaled(-1.0)).collect();
        let mut cols: Vec<Vector> = (0..6).map(|c| h.column(c)).collect();
        cols.extend(neg);
        let anti = Matrix::from_columns(&cols).unwrap();
        let r = dictionary_recovery(&anti, &h, 0.9).unwrap();
        assert_eq!(r.fragmentation.len(), 6);
        assert_eq!(r.recovered, 6);
    }

    #[test]
    fn recovery_permutation_and_sign_invariant() {
        let h = random_unit_columns(16, 5, 4);
        let learned = random_unit_columns(16, 9, 5);
        let base = dictionary_recovery(&learned, &h, 0.2).unwrap();
        let perm = [3usize, 8, 0, 6, 1, 7, 2, 5, 4];
        let cols: Vec<Vector> = perm
            .iter()
            .enumerate()
            .map(|(j, &c)| {
                learned
                    .column(c)
                    .scaled(if j % 2 == 0 { -1.0 } else { 1.0 })
            })
            .collect();
        let moved = dictionary_recovery(&Matrix::from_columns(&cols).unwrap(), &h, 0.2).unwrap();
        assert_eq!(base.recovered, moved.recovered);
        for (a, b) in base.matches.iter().zip(&moved.matches) {
            assert!((a.cos.abs() - b.cos.abs()).abs() < 1e-12);
            let j = perm
                .iter()
                .position(|&c| Some(c) == a.learned_index)
                .unwrap();
            assert_eq!(b.learned_index, Some(j));
            let flip = if j % 2 == 0 { -1.0 } else { 1.0 };
            assert!((a.cos * flip - b.cos).abs() < 1e-12);
        }
    }

    #[test]
    fn greedy_matches_exhaustive_on_near_truth() {
        let h = random_unit_columns(32, 6, 6);
        let mut rng = Rng::from_seed(7);
        let mut cols: Vec<Vector> = (0..6)
            .map(|c| {
                let noisy = h
                    .column(c)
                    .add_scaled(0.05, &Vector::new(rng.gaussian_vec(32)).unwrap())
                    .unwrap();
                noisy.scaled(1.0 / noisy.norm())
            })
            .collect();
        cols.extend((0..4).map(|_| rng.unit_vector(32)));
        let learned = Matrix::from_columns(&cols).unwrap();
        let greedy = dictionary_recovery(&learned, &h, 0.9).unwrap();
        let (_, assign) = optimal_matching(&learned, &h).unwrap();
        for (t, m) in greedy.matches.iter().enumerate() {
            assert_eq!(m.learned_index, Some(assign[t]));
        }
        assert!(optimal_matching(&learned, &random_unit_columns(32, 11, 1)).is_err());
    }

    #[test]
    fn probe_separable_and_null() {
        let mut rng = Rng::from_seed(8);
        let n = 400;
        let labels: Vec<bool> = (0..n).map(|i| i % 2 == 0).collect();
        let sep: Vec<Vec<f64>> = labels
            .iter()
            .map(|&l| {
                vec![
                    if l { 1.0 } else { -1.0 } + 0.1 * rng.normal(),
                    rng.normal(),
                ]
            })
            .collect();
        let r = probe_accuracy(&Matrix::from_rows(&sep).unwrap(), &labels, 1, 0).unwrap();
        assert_eq!(r.accuracy, 1.0);
        assert_eq!(r.selected, vec![0]);

        let null: Vec<Vec<f64>> = (0..n).map(|_| vec![rng.normal(), rng.normal()]).collect();
        let r = probe_accuracy(&Matrix::from_rows(&null).unwrap(), &labels, 2, 0).unwrap();
        let sigma = (0.25 / r.test_size as f64).sqrt();
        assert!((r.accuracy - 0.5).abs() <= 3.0 * sigma, "{}", r.accuracy);

        assert!(probe_accuracy(&Matrix::from_rows(&null).unwrap(), &vec![true; n], 1, 0).is_err());
    }

    #[test]
    fn coverage_scan() {
        let plus = Matrix::from_rows(&[vec![1.0, 0.5], vec![2.0, 0.0]]).unwrap();
        let minus = Matrix::from_rows(&[vec![-1.0, 0.5], vec![-0.5, 0.0]]).unwrap();
        let c = both_sign_coverage(&plus, &minus).unwrap();
        assert_eq!((c.latent, c.coverage, c.positive_on_plus), (0, 1.0, true));
        let c = both_sign_coverage(&minus, &plus).unwrap();
        assert_eq!((c.latent, c.coverage, c.positive_on_plus), (0, 1.0, false));
        let nonneg = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 2.0]]).unwrap();
        assert_eq!(both_sign_coverage(&nonneg, &nonneg).unwrap().coverage, 0.0);
    }
}
