//! Downstream evaluation over frozen sentence vectors: pair features,
//! softmax heads, correlation/classification metrics and k-fold CV.

use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::training::adam::{AdamConfig, AdamState};

/// `[u⊙v ; |u−v|]`.
pub fn pair_features(u: &Tensor, v: &Tensor) -> Result<Tensor> {
    let prod = u.hadamard(v)?;
    let diff = u.sub(v)?.map(f64::abs);
    prod.concat_cols(&diff)
}

/// Stacks `pair_features` of matching rows.
pub fn pair_feature_matrix(us: &Tensor, vs: &Tensor) -> Result<Tensor> {
    if us.shape() != vs.shape() {
        return Err(Error::ShapeMismatch {
            op: "pair_feature_matrix",
            left: us.shape(),
            right: vs.shape(),
        });
    }
    let rows: Vec<Tensor> = (0..us.rows())
        .map(|i| pair_features(&us.row_tensor(i), &vs.row_tensor(i)))
        .collect::<Result<_>>()?;
    Tensor::stack_rows(&rows.iter().collect::<Vec<_>>())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadKind {
    /// Scores in `[1, K]` read out as an expectation over K bins.
    SoftmaxBins(usize),
    /// Labels 0/1; positive when `P(1) ≥ 0.5`.
    Binary,
    /// Labels `0..C`.
    Multiclass(usize),
}

impl HeadKind {
    pub fn outputs(self) -> usize {
        match self {
            HeadKind::SoftmaxBins(k) | HeadKind::Multiclass(k) => k,
            HeadKind::Binary => 2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HeadConfig {
    pub steps: usize,
    pub lr: f64,
    /// Weight on `‖W‖²`; the bias is not penalized.
    pub l2: f64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            steps: 1000,
            lr: 0.01,
            l2: 1e-4,
        }
    }
}

/// Sparse target distribution for a score `y ∈ [1, K]`: the mass is split
/// between the two neighbouring integer bins.
pub fn score_distribution(y: f64, k: usize) -> Result<Vec<f64>> {
    if !(1.0..=k as f64).contains(&y) {
        return Err(Error::Config(format!("score {y} outside [1, {k}]")));
    }
    let mut r = vec![0.0; k];
    let lo = y.floor();
    let hi = y.ceil();
    if lo == hi {
        r[lo as usize - 1] = 1.0;
    } else {
        r[lo as usize - 1] = hi - y;
        r[hi as usize - 1] = y - lo;
    }
    Ok(r)
}

fn target_matrix(targets: &[f64], kind: HeadKind) -> Result<Tensor> {
    let c = kind.outputs();
    let mut out = Tensor::zeros(targets.len(), c);
    for (i, &y) in targets.iter().enumerate() {
        match kind {
            HeadKind::SoftmaxBins(k) => out.row_mut(i).copy_from_slice(&score_distribution(y, k)?),
            HeadKind::Binary | HeadKind::Multiclass(_) => {
                if y.fract() != 0.0 || y < 0.0 || y as usize >= c {
                    return Err(Error::Config(format!("label {y} is not a class in 0..{c}")));
                }
                out.set(i, y as usize, 1.0);
            }
        }
    }
    Ok(out)
}

fn softmax_rows(logits: &Tensor) -> Tensor {
    let mut p = logits.clone();
    for r in 0..p.rows() {
        let row = p.row_mut(r);
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for x in row.iter_mut() {
            *x = (*x - m).exp();
            s += *x;
        }
        for x in row.iter_mut() {
            *x /= s;
        }
    }
    p
}

/// Linear softmax layer over pair or sentence features.
#[derive(Clone, Debug, PartialEq)]
pub struct Head {
    pub kind: HeadKind,
    pub weights: Tensor,
    pub bias: Tensor,
    /// Set when the training targets were degenerate.
    pub warning: Option<String>,
}

impl Head {
    pub fn probabilities(&self, features: &Tensor) -> Result<Tensor> {
        let mut logits = features.matmul(&self.weights)?;
        for r in 0..logits.rows() {
            for (x, b) in logits.row_mut(r).iter_mut().zip(self.bias.data()) {
                *x += b;
            }
        }
        Ok(softmax_rows(&logits))
    }

    /// Most probable class per row; ties go to the lower class.
    pub fn predict_classes(&self, features: &Tensor) -> Result<Vec<usize>> {
        let p = self.probabilities(features)?;
        Ok((0..p.rows())
            .map(|r| {
                let row = p.row(r);
                (1..row.len()).fold(0, |best, k| if row[k] > row[best] { k } else { best })
            })
            .collect())
    }
}

/// Full-batch Adam on mean cross-entropy plus `l2·‖W‖²`, starting from zero
/// weights. Degenerate targets yield a constant predictor and a warning.
pub fn fit_head(
    features: &Tensor,
    targets: &[f64],
    kind: HeadKind,
    cfg: &HeadConfig,
) -> Result<Head> {
    let n = features.rows();
    if n < 2 || targets.len() != n {
        return Err(Error::ShapeMismatch {
            op: "fit_head",
            left: features.shape(),
            right: (targets.len(), 1),
        });
    }
    let c = kind.outputs();
    let r = target_matrix(targets, kind)?;
    let f = features.cols();
    if targets.iter().all(|&t| t == targets[0]) {
        let msg = format!(
            "all {n} training targets equal {}; using a constant predictor",
            targets[0]
        );
        log::warn!("{msg}");
        let bias = Tensor::from_fn(1, c, |_, k| {
            if r.get(0, k) > 0.0 {
                r.get(0, k).ln()
            } else {
                -1e3
            }
        });
        return Ok(Head {
            kind,
            weights: Tensor::zeros(f, c),
            bias,
            warning: Some(msg),
        });
    }
    let mut head = Head {
        kind,
        weights: Tensor::zeros(f, c),
        bias: Tensor::zeros(1, c),
        warning: None,
    };
    let xt = features.transpose();
    let mut adam = AdamState::new(
        AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
        [&head.weights, &head.bias],
    );
    let inv_n = 1.0 / n as f64;
    for _ in 0..cfg.steps {
        let delta = head.probabilities(features)?.sub(&r)?;
        let gw = xt
            .matmul(&delta)?
            .scale(inv_n)
            .add(&head.weights.scale(2.0 * cfg.l2))?;
        let gb = Tensor::from_fn(1, c, |_, k| {
            (0..n).map(|i| delta.get(i, k)).sum::<f64>() * inv_n
        });
        adam.update(&mut [&mut head.weights, &mut head.bias], &[gw, gb])?;
    }
    if !head.weights.is_finite() {
        return Err(Error::NonFinite("head weights".into()));
    }
    Ok(head)
}

/// Expected bin value `Σ k·p_k` per row, always in `[1, K]`.
pub fn predict_relatedness(head: &Head, features: &Tensor) -> Result<Vec<f64>> {
    let p = head.probabilities(features)?;
    Ok((0..p.rows()).map(|r| expected_score(p.row(r))).collect())
}

pub fn expected_score(probs: &[f64]) -> f64 {
    probs
        .iter()
        .enumerate()
        .map(|(k, p)| (k + 1) as f64 * p)
        .sum()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    Relatedness,
    Binary,
    Multiclass,
}

/// Metrics for one task; only the task's own set is filled in.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct MetricsReport {
    pub n: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pearson_r: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub spearman_rho: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mse: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub f1: Option<f64>,
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("plain struct serializes")
    }
}

/// `key=value` lines.
impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "n={}", self.n)?;
        for (k, v) in [
            ("pearson_r", self.pearson_r),
            ("spearman_rho", self.spearman_rho),
            ("mse", self.mse),
            ("accuracy", self.accuracy),
            ("f1", self.f1),
        ] {
            if let Some(v) = v {
                writeln!(f, "{k}={v:.6}")?;
            }
        }
        Ok(())
    }
}

fn check_lengths(pred: &[f64], gold: &[f64]) -> Result<()> {
    if pred.len() != gold.len() || pred.len() < 2 {
        return Err(Error::ShapeMismatch {
            op: "metrics",
            left: (pred.len(), 1),
            right: (gold.len(), 1),
        });
    }
    Ok(())
}

pub fn pearson(pred: &[f64], gold: &[f64]) -> Result<f64> {
    check_lengths(pred, gold)?;
    let n = pred.len() as f64;
    let mp = pred.iter().sum::<f64>() / n;
    let mg = gold.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&p, &g) in pred.iter().zip(gold) {
        sxy += (p - mp) * (g - mg);
        sxx += (p - mp).powi(2);
        syy += (g - mg).powi(2);
    }
    if sxx == 0.0 {
        return Err(Error::UndefinedCorrelation("prediction"));
    }
    if syy == 0.0 {
        return Err(Error::UndefinedCorrelation("gold"));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// 1-based ranks; tied values share their average rank.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

pub fn spearman(pred: &[f64], gold: &[f64]) -> Result<f64> {
    check_lengths(pred, gold)?;
    pearson(&average_ranks(pred), &average_ranks(gold))
}

pub fn mse(pred: &[f64], gold: &[f64]) -> Result<f64> {
    check_lengths(pred, gold)?;
    Ok(pred
        .iter()
        .zip(gold)
        .map(|(p, g)| (p - g).powi(2))
        .sum::<f64>()
        / pred.len() as f64)
}

pub fn accuracy(pred: &[f64], gold: &[f64]) -> Result<f64> {
    check_lengths(pred, gold)?;
    Ok(pred.iter().zip(gold).filter(|(p, g)| p == g).count() as f64 / pred.len() as f64)
}

/// F1 of the positive class (label 1). Zero when there are no true positives.
pub fn f1_score(pred: &[f64], gold: &[f64]) -> Result<f64> {
    check_lengths(pred, gold)?;
    let tp = pred
        .iter()
        .zip(gold)
        .filter(|(p, g)| **p == 1.0 && **g == 1.0)
        .count() as f64;
    let pp = pred.iter().filter(|p| **p == 1.0).count() as f64;
    let ap = gold.iter().filter(|g| **g == 1.0).count() as f64;
    if tp == 0.0 {
        return Ok(0.0);
    }
    let (precision, recall) = (tp / pp, tp / ap);
    Ok(2.0 * precision * recall / (precision + recall))
}

/// Computes the task's metric set. Classification predictions are labels.
pub fn metrics(pred: &[f64], gold: &[f64], task: Task) -> Result<MetricsReport> {
    check_lengths(pred, gold)?;
    let mut report = MetricsReport {
        n: pred.len(),
        ..MetricsReport::default()
    };
    match task {
        Task::Relatedness => {
            report.pearson_r = Some(pearson(pred, gold)?);
            report.spearman_rho = Some(spearman(pred, gold)?);
            report.mse = Some(mse(pred, gold)?);
        }
        Task::Binary => {
            report.accuracy = Some(accuracy(pred, gold)?);
            report.f1 = Some(f1_score(pred, gold)?);
        }
        Task::Multiclass => report.accuracy = Some(accuracy(pred, gold)?),
    }
    Ok(report)
}

/// Seeded permutation cut into `k` contiguous folds whose sizes differ by
/// at most one.
pub fn kfold_indices(n: usize, k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k < 2 || n < k {
        return Err(Error::Config(format!(
            "{k}-fold cross-validation needs k ≥ 2 and at least k examples, got {n}"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (base, extra) = (n / k, n % k);
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for f in 0..k {
        let len = base + usize::from(f < extra);
        folds.push(order[start..start + len].to_vec());
        start += len;
    }
    Ok(folds)
}

fn select_rows(t: &Tensor, rows: &[usize]) -> Tensor {
    Tensor::from_fn(rows.len(), t.cols(), |i, j| t.get(rows[i], j))
}

/// Held-out predictions for every row: relatedness scores for
/// [`HeadKind::SoftmaxBins`], class labels otherwise.
pub fn cross_val_predict(
    features: &Tensor,
    targets: &[f64],
    kind: HeadKind,
    k: usize,
    seed: u64,
    cfg: &HeadConfig,
) -> Result<CvResult> {
    if targets.len() != features.rows() {
        return Err(Error::ShapeMismatch {
            op: "cross_val_predict",
            left: features.shape(),
            right: (targets.len(), 1),
        });
    }
    let folds = kfold_indices(features.rows(), k, seed)?;
    let mut predictions = vec![0.0; targets.len()];
    let mut fold_accuracy = Vec::with_capacity(k);
    let mut warnings = Vec::new();
    for (f, held) in folds.iter().enumerate() {
        let train: Vec<usize> = folds
            .iter()
            .enumerate()
            .filter(|&(g, _)| g != f)
            .flat_map(|(_, v)| v.iter().copied())
            .collect();
        let train_targets: Vec<f64> = train.iter().map(|&i| targets[i]).collect();
        let head = fit_head(&select_rows(features, &train), &train_targets, kind, cfg)?;
        if let Some(w) = &head.warning {
            warnings.push(format!("fold {f}: {w}"));
        }
        let test = select_rows(features, held);
        let preds: Vec<f64> = match kind {
            HeadKind::SoftmaxBins(_) => predict_relatedness(&head, &test)?,
            _ => head
                .predict_classes(&test)?
                .into_iter()
                .map(|c| c as f64)
                .collect(),
        };
        let correct = held
            .iter()
            .zip(&preds)
            .filter(|(&i, &p)| p == targets[i])
            .count();
        fold_accuracy.push(correct as f64 / held.len() as f64);
        for (&i, p) in held.iter().zip(preds) {
            predictions[i] = p;
        }
    }
    Ok(CvResult {
        predictions,
        fold_accuracy,
        warnings,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct CvResult {
    pub predictions: Vec<f64>,
    /// Exact-match rate per fold (meaningful for classification).
    pub fold_accuracy: Vec<f64>,
    pub warnings: Vec<String>,
}

impl CvResult {
    pub fn mean_accuracy(&self) -> f64 {
        self.fold_accuracy.iter().sum::<f64>() / self.fold_accuracy.len() as f64
    }
}

/// Mean held-out accuracy of a classifier over frozen sentence vectors.
pub fn kfold_cv(
    vectors: &Tensor,
    labels: &[usize],
    classes: usize,
    k: usize,
    seed: u64,
    cfg: &HeadConfig,
) -> Result<f64> {
    let kind = if classes == 2 {
        HeadKind::Binary
    } else {
        HeadKind::Multiclass(classes)
    };
    let targets: Vec<f64> = labels.iter().map(|&l| l as f64).collect();
    Ok(cross_val_predict(vectors, &targets, kind, k, seed, cfg)?.mean_accuracy())
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairExample {
    pub sentence_a: String,
    pub sentence_b: String,
    pub label: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassExample {
    pub label: usize,
    pub sentence: String,
}

fn parse_err(origin: &str, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: origin.to_string(),
        line,
        msg: msg.into(),
    }
}

/// `sentence_a<TAB>sentence_b<TAB>label` per non-blank line.
pub fn parse_pair_tsv(text: &str, origin: &str) -> Result<Vec<PairExample>> {
    let mut out = Vec::new();
    for (i, line) in text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
    {
        let fields: Vec<&str> = line.split('\t').collect();
        let [a, b, label] = fields[..] else {
            return Err(parse_err(
                origin,
                i + 1,
                format!("expected 3 tab-separated fields, found {}", fields.len()),
            ));
        };
        if a.trim().is_empty() || b.trim().is_empty() {
            return Err(parse_err(origin, i + 1, "empty sentence"));
        }
        let label = label
            .trim()
            .parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .ok_or_else(|| parse_err(origin, i + 1, format!("bad label {label:?}")))?;
        out.push(PairExample {
            sentence_a: a.trim().to_string(),
            sentence_b: b.trim().to_string(),
            label,
        });
    }
    if out.is_empty() {
        return Err(Error::Empty("pair dataset"));
    }
    Ok(out)
}

/// `label<TAB>sentence` per non-blank line.
pub fn parse_class_tsv(text: &str, origin: &str) -> Result<Vec<ClassExample>> {
    let mut out = Vec::new();
    for (i, line) in text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
    {
        let Some((label, sentence)) = line.split_once('\t') else {
            return Err(parse_err(origin, i + 1, "expected label<TAB>sentence"));
        };
        let label = label
            .trim()
            .parse::<usize>()
            .map_err(|_| parse_err(origin, i + 1, format!("bad class label {label:?}")))?;
        if sentence.trim().is_empty() || sentence.contains('\t') {
            return Err(parse_err(
                origin,
                i + 1,
                "sentence must be non-empty and tab-free",
            ));
        }
        out.push(ClassExample {
            label,
            sentence: sentence.trim().to_string(),
        });
    }
    if out.is_empty() {
        return Err(Error::Empty("class dataset"));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn pair_feature_cases() {
        let u = Tensor::row_vector(vec![1.0, -2.0, 0.5]);
        let same = pair_features(&u, &u).unwrap();
        assert_eq!(same.data(), &[1.0, 4.0, 0.25, 0.0, 0.0, 0.0]);
        let neg = pair_features(&u, &u.scale(-1.0)).unwrap();
        assert_eq!(neg.data(), &[-1.0, -4.0, -0.25, 2.0, 4.0, 1.0]);
        let v = Tensor::row_vector(vec![0.3, 0.1, -7.0]);
        assert_eq!(
            pair_features(&u, &v).unwrap(),
            pair_features(&v, &u).unwrap()
        );
        assert!(pair_features(&u, &Tensor::zeros(1, 2)).is_err());
    }

    #[test]
    fn sparse_score_targets() {
        assert_eq!(
            score_distribution(3.0, 5).unwrap(),
            vec![0.0, 0.0, 1.0, 0.0, 0.0]
        );
        let r = score_distribution(3.6, 5).unwrap();
        assert!(close(r[2], 0.4, 1e-12) && close(r[3], 0.6, 1e-12));
        assert!(close(expected_score(&r), 3.6, 1e-12));
        assert!(score_distribution(5.5, 5).is_err());
    }

    #[test]
    fn relatedness_readout() {
        assert_eq!(expected_score(&[0.0, 0.0, 0.0, 1.0, 0.0]), 4.0);
        assert!(close(expected_score(&[0.2; 5]), 3.0, 1e-12));
        let head = Head {
            kind: HeadKind::SoftmaxBins(5),
            weights: Tensor::from_fn(3, 5, |i, j| (i as f64 - j as f64) * 4.0),
            bias: Tensor::zeros(1, 5),
            warning: None,
        };
        let feats = Tensor::from_fn(20, 3, |i, j| ((i * 7 + j * 3) % 11) as f64 - 5.0);
        for s in predict_relatedness(&head, &feats).unwrap() {
            assert!((1.0..=5.0).contains(&s));
        }
    }

    #[test]
    fn separable_binary_set_is_fit() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 40;
        let x = Tensor::from_fn(n, 3, |_, _| rng.gen_range(-1.0..1.0));
        let labels: Vec<f64> = (0..n)
            .map(|i| f64::from(x.get(i, 0) + 0.5 * x.get(i, 1) > 0.0))
            .collect();
        let head = fit_head(
            &x,
            &labels,
            HeadKind::Binary,
            &HeadConfig {
                steps: 500,
                lr: 0.1,
                l2: 0.0,
            },
        )
        .unwrap();
        let pred: Vec<f64> = head
            .predict_classes(&x)
            .unwrap()
            .into_iter()
            .map(|c| c as f64)
            .collect();
        assert_eq!(accuracy(&pred, &labels).unwrap(), 1.0);
    }

    #[test]
    fn heavy_ridge_gives_uniform_predictions() {
        let x = Tensor::from_rows(&[[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0], [0.0, -1.0]]);
        let labels = [0.0, 1.0, 1.0, 0.0];
        let head = fit_head(
            &x,
            &labels,
            HeadKind::Binary,
            &HeadConfig {
                steps: 2000,
                lr: 0.01,
                l2: 1e6,
            },
        )
        .unwrap();
        assert!(head.weights.max_abs() < 1e-4);
        let p = head.probabilities(&x).unwrap();
        assert!(p.data().iter().all(|v| close(*v, 0.5, 1e-3)));
    }

    #[test]
    fn single_class_is_degenerate() {
        let x = Tensor::from_rows(&[[1.0], [2.0], [3.0]]);
        let head = fit_head(
            &x,
            &[1.0, 1.0, 1.0],
            HeadKind::Binary,
            &HeadConfig::default(),
        )
        .unwrap();
        assert!(head.warning.is_some());
        assert_eq!(
            head.predict_classes(&Tensor::from_rows(&[[-50.0], [7.0]]))
                .unwrap(),
            vec![1, 1]
        );
    }

    #[test]
    fn metric_identities() {
        let gold = [1.0, 2.5, 3.0, 4.2, 5.0];
        let r = metrics(&gold, &gold, Task::Relatedness).unwrap();
        assert!(close(r.pearson_r.unwrap(), 1.0, 1e-12));
        assert!(close(r.spearman_rho.unwrap(), 1.0, 1e-12));
        assert_eq!(r.mse, Some(0.0));
        let mean = gold.iter().sum::<f64>() / 5.0;
        let anti: Vec<f64> = gold.iter().map(|g| 2.0 * mean - g).collect();
        assert!(close(pearson(&anti, &gold).unwrap(), -1.0, 1e-12));
        let cubed: Vec<f64> = gold.iter().map(|g| g * g * g).collect();
        assert!(close(spearman(&cubed, &gold).unwrap(), 1.0, 1e-12));
        assert!(pearson(&cubed, &gold).unwrap() < 1.0);
        assert!(matches!(
            pearson(&[2.0; 5], &gold),
            Err(Error::UndefinedCorrelation(_))
        ));
        assert!(metrics(&[1.0], &[1.0], Task::Binary).is_err());
    }

    #[test]
    fn ranks_average_ties() {
        assert_eq!(
            average_ranks(&[10.0, 20.0, 20.0, 5.0]),
            vec![2.0, 3.5, 3.5, 1.0]
        );
    }

    #[test]
    fn classification_metrics() {
        let gold = [1.0, 1.0, 0.0, 0.0, 1.0];
        let pred = [1.0, 0.0, 1.0, 0.0, 1.0];
        let r = metrics(&pred, &gold, Task::Binary).unwrap();
        assert!(close(r.accuracy.unwrap(), 0.6, 1e-12));
        // precision 2/3, recall 2/3
        assert!(close(r.f1.unwrap(), 2.0 / 3.0, 1e-12));
        assert_eq!(f1_score(&[0.0, 0.0], &[1.0, 0.0]).unwrap(), 0.0);
        let text = r.to_string();
        assert!(
            text.contains("accuracy=0.600000") && text.contains("f1=") && !text.contains("pearson")
        );
        assert!(r.to_json().contains("\"f1\""));
    }

    #[test]
    fn folds_partition() {
        let folds = kfold_indices(23, 5, 1).unwrap();
        let sizes: Vec<usize> = folds.iter().map(Vec::len).collect();
        assert_eq!(sizes.iter().sum::<usize>(), 23);
        assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        let mut all: Vec<usize> = folds.concat();
        all.sort();
        assert_eq!(all, (0..23).collect::<Vec<_>>());
        assert_eq!(kfold_indices(23, 5, 1).unwrap(), folds);
        assert_eq!(kfold_indices(4, 4, 0).unwrap().len(), 4);
        assert!(kfold_indices(3, 4, 0).is_err());
    }

    #[test]
    fn cv_is_deterministic_and_leave_one_out_works() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = Tensor::from_fn(12, 2, |_, _| rng.gen_range(-1.0..1.0));
        let labels: Vec<usize> = (0..12).map(|i| usize::from(x.get(i, 0) > 0.0)).collect();
        let cfg = HeadConfig {
            steps: 200,
            ..HeadConfig::default()
        };
        let a = kfold_cv(&x, &labels, 2, 12, 3, &cfg).unwrap();
        assert_eq!(
            a.to_bits(),
            kfold_cv(&x, &labels, 2, 12, 3, &cfg).unwrap().to_bits()
        );
        assert!((0.0..=1.0).contains(&a));
    }

    #[test]
    fn duplicating_data_keeps_constant_baseline() {
        let x = Tensor::zeros(10, 3);
        let labels = [0, 0, 0, 1, 1, 1, 1, 1, 1, 1];
        let cfg = HeadConfig {
            steps: 300,
            lr: 0.05,
            l2: 0.0,
        };
        let once = kfold_cv(&x, &labels, 2, 5, 0, &cfg).unwrap();
        let x2 = Tensor::zeros(20, 3);
        let labels2: Vec<usize> = labels.iter().chain(labels.iter()).copied().collect();
        let twice = kfold_cv(&x2, &labels2, 2, 5, 0, &cfg).unwrap();
        // zero features: the head predicts the training majority everywhere
        assert!(
            close(once, 0.7, 1e-12) && close(twice, 0.7, 1e-12),
            "{once} {twice}"
        );
    }

    #[test]
    fn synthetic_cosine_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let (n, z) = (300, 8);
        let unit = |rng: &mut ChaCha8Rng| {
            let v = Tensor::from_fn(1, z, |_, _| rng.gen_range(-1.0..1.0));
            v.scale(1.0 / v.data().iter().map(|x| x * x).sum::<f64>().sqrt())
        };
        let mut us = Vec::new();
        let mut vs = Vec::new();
        let mut gold = Vec::new();
        for _ in 0..n {
            let u = unit(&mut rng);
            let w = unit(&mut rng);
            let theta: f64 = rng.gen_range(0.0..std::f64::consts::PI);
            let v = u.scale(theta.cos()).add(&w.scale(theta.sin())).unwrap();
            let cos = u
                .data()
                .iter()
                .zip(v.data())
                .map(|(a, b)| a * b)
                .sum::<f64>()
                / v.data().iter().map(|x| x * x).sum::<f64>().sqrt();
            gold.push(1.0 + 4.0 * (cos + 1.0) / 2.0);
            us.push(u);
            vs.push(v);
        }
        let u = Tensor::stack_rows(&us.iter().collect::<Vec<_>>()).unwrap();
        let v = Tensor::stack_rows(&vs.iter().collect::<Vec<_>>()).unwrap();
        let feats = pair_feature_matrix(&u, &v).unwrap();
        let cv = cross_val_predict(
            &feats,
            &gold,
            HeadKind::SoftmaxBins(5),
            5,
            0,
            &HeadConfig::default(),
        )
        .unwrap();
        let r = metrics(&cv.predictions, &gold, Task::Relatedness).unwrap();
        assert!(
            r.pearson_r.unwrap() >= 0.95 && r.spearman_rho.unwrap() >= 0.95,
            "{r}"
        );
    }

    #[test]
    fn tsv_loaders() {
        let pairs = parse_pair_tsv("a b\tc d\t4.5\n\nx\ty\t1\n", "p.tsv").unwrap();
        assert_eq!(pairs.len(), 2);
        assert_eq!(pairs[0].label, 4.5);
        let err = parse_pair_tsv("a\tb\t1\na\tb\n", "p.tsv").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
        assert!(matches!(
            parse_pair_tsv("a\tb\tzz\n", "p").unwrap_err(),
            Error::Parse { line: 1, .. }
        ));
        let classes = parse_class_tsv("1\tgood movie\n0\tbad one\n", "c.tsv").unwrap();
        assert_eq!(
            classes[1],
            ClassExample {
                label: 0,
                sentence: "bad one".into()
            }
        );
        assert!(matches!(
            parse_class_tsv("1\tok\n-1\tno\n", "c").unwrap_err(),
            Error::Parse { line: 2, .. }
        ));
    }

    mod props {
        use super::*;
        use proptest::prelude::{prop_assert, proptest};

        proptest! {
            #[test]
            fn correlations_are_affine_invariant(
                pairs in proptest::collection::vec((-10f64..10.0, -10f64..10.0), 3..30),
                a in 0.1f64..10.0,
                b in -5f64..5.0,
            ) {
                let (p, g): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
                if let (Ok(r), Ok(rho)) = (pearson(&p, &g), spearman(&p, &g)) {
                    let p2: Vec<f64> = p.iter().map(|x| a * x + b).collect();
                    let g2: Vec<f64> = g.iter().map(|x| a * x + b).collect();
                    prop_assert!((pearson(&p2, &g2).unwrap() - r).abs() < 1e-9);
                    prop_assert!((spearman(&p2, &g2).unwrap() - rho).abs() < 1e-9);
                    prop_assert!((-1.0..=1.0).contains(&r));
                }
            }
        }
    }
}
