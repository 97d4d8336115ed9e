//! Weighted k-NN over frozen embeddings, head evaluation, and classification metrics.

use std::cmp::Ordering;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{contract_err, Error, Result};
use crate::model::{argmax, Model};

const NORM_FLOOR: f64 = 1e-12;

fn normalized(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(NORM_FLOOR);
    v.iter().map(|x| x / n).collect()
}

/// L2-normalized gallery embeddings with their labels.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingIndex {
    dim: usize,
    rows: Vec<f64>,
    labels: Vec<usize>,
    num_classes: usize,
}

impl EmbeddingIndex {
    pub fn new(embeddings: &[Vec<f64>], labels: &[usize]) -> Result<Self> {
        if embeddings.len() != labels.len() {
            return Err(Error::Data(format!("{} embeddings for {} labels", embeddings.len(), labels.len())));
        }
        let dim = embeddings.first().map_or(0, Vec::len);
        if embeddings.iter().any(|e| e.len() != dim) {
            return Err(crate::error::shape_err("gallery embeddings differ in length"));
        }
        let rows = embeddings.iter().flat_map(|e| normalized(e)).collect();
        let num_classes = labels.iter().max().map_or(0, |m| m + 1);
        Ok(EmbeddingIndex { dim, rows, labels: labels.to_vec(), num_classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.rows[i * self.dim..(i + 1) * self.dim]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KnnPrediction {
    pub label: usize,
    /// Per-class vote `Σ exp(sim / τ)` over the neighbors of that class.
    pub scores: Vec<f64>,
}

/// Cosine top-k vote; `k` is clamped to the gallery size. Equal similarities
/// rank by gallery order, equal class scores go to the smallest class id.
pub fn knn_predict(index: &EmbeddingIndex, query: &[f64], k: usize, tau: f64) -> Result<KnnPrediction> {
    if index.is_empty() {
        return Err(contract_err("k-NN over an empty index"));
    }
    if k == 0 {
        return Err(contract_err("k must be at least 1"));
    }
    if query.len() != index.dim {
        return Err(crate::error::shape_err(format!(
            "query of length {} against an index of dimension {}",
            query.len(),
            index.dim
        )));
    }
    if tau.is_nan() || tau <= 0.0 {
        return Err(Error::Domain(format!("k-NN temperature must be positive, got {tau}")));
    }
    let q = normalized(query);
    let mut sims: Vec<(usize, f64)> =
        (0..index.len()).map(|i| (i, index.row(i).iter().zip(&q).map(|(a, b)| a * b).sum())).collect();
    sims.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal).then(a.0.cmp(&b.0)));
    let mut scores = vec![0.0; index.num_classes];
    for &(i, s) in sims.iter().take(k.min(index.len())) {
        scores[index.labels[i]] += (s / tau).exp();
    }
    Ok(KnnPrediction { label: argmax(&scores), scores })
}

/// Rows are true labels, columns predictions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix { classes, counts: vec![0; classes * classes] }
    }

    pub fn from_counts(rows: &[Vec<u64>]) -> Result<Self> {
        let k = rows.len();
        if rows.iter().any(|r| r.len() != k) {
            return Err(crate::error::shape_err("confusion matrix must be square"));
        }
        Ok(ConfusionMatrix { classes: k, counts: rows.concat() })
    }

    pub fn from_predictions(classes: usize, truth: &[usize], predicted: &[usize]) -> Result<Self> {
        let mut cm = ConfusionMatrix::new(classes);
        for (&t, &p) in truth.iter().zip(predicted) {
            cm.add(t, p)?;
        }
        Ok(cm)
    }

    pub fn add(&mut self, truth: usize, predicted: usize) -> Result<()> {
        if truth >= self.classes || predicted >= self.classes {
            return Err(Error::Index(format!("class pair ({truth}, {predicted}) outside {} classes", self.classes)));
        }
        self.counts[truth * self.classes + predicted] += 1;
        Ok(())
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.classes + predicted]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes).map(|i| self.get(i, i)).sum()
    }

    pub fn scaled(&self, factor: u64) -> Self {
        ConfusionMatrix { classes: self.classes, counts: self.counts.iter().map(|c| c * factor).collect() }
    }
}

pub fn accuracy(cm: &ConfusionMatrix) -> Result<f64> {
    if cm.total() == 0 {
        return Err(contract_err("accuracy of an empty confusion matrix"));
    }
    Ok(cm.trace() as f64 / cm.total() as f64)
}

/// Quadratic-weighted agreement, or an explicit undefined outcome.
#[derive(Clone, Debug, PartialEq)]
pub enum Kappa {
    Value(f64),
    Undefined { reason: String },
}

impl Kappa {
    /// The statistic, NaN when undefined.
    pub fn value(&self) -> f64 {
        match self {
            Kappa::Value(v) => *v,
            Kappa::Undefined { .. } => f64::NAN,
        }
    }
}

impl fmt::Display for Kappa {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Kappa::Value(v) => write!(f, "{v}"),
            Kappa::Undefined { reason } => write!(f, "NaN ({reason})"),
        }
    }
}

/// `1 − Σ w·O / Σ w·E` with `w_ij = (i−j)²/(K−1)²`.
pub fn quadratic_kappa(cm: &ConfusionMatrix) -> Result<Kappa> {
    let k = cm.classes();
    if k < 2 {
        return Err(contract_err(format!("kappa needs at least 2 classes, got {k}")));
    }
    let total = cm.total();
    if total == 0 {
        return Err(contract_err("kappa of an empty confusion matrix"));
    }
    let n = total as f64;
    let rows: Vec<f64> = (0..k).map(|i| (0..k).map(|j| cm.get(i, j)).sum::<u64>() as f64 / n).collect();
    let cols: Vec<f64> = (0..k).map(|j| (0..k).map(|i| cm.get(i, j)).sum::<u64>() as f64 / n).collect();
    let denom_w = ((k - 1) * (k - 1)) as f64;
    let (mut observed, mut expected) = (0.0, 0.0);
    for (i, row) in rows.iter().enumerate() {
        for (j, col) in cols.iter().enumerate() {
            let w = ((i as f64 - j as f64).powi(2)) / denom_w;
            observed += w * cm.get(i, j) as f64 / n;
            expected += w * row * col;
        }
    }
    if expected == 0.0 {
        return Ok(Kappa::Undefined {
            reason: "expected disagreement is zero: all mass in one class in both margins".into(),
        });
    }
    Ok(Kappa::Value(1.0 - observed / expected))
}

/// Rank-statistic ROC-AUC; tied scores contribute one half.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Data(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(contract_err("ROC-AUC needs both classes present"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap_or(Ordering::Equal));
    // Twice the midrank of each tie group keeps the sum in integers.
    let mut twice_rank_sum_pos: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let twice_mid = (i + 1 + j + 1) as u128;
        let pos_in_group = order[i..=j].iter().filter(|&&o| labels[o]).count() as u128;
        twice_rank_sum_pos += twice_mid * pos_in_group;
        i = j + 1;
    }
    let (p, q) = (pos as u128, neg as u128);
    let twice_u = twice_rank_sum_pos - p * (p + 1);
    Ok(twice_u as f64 / (2 * p * q) as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Accuracy,
    Kappa,
    Auc,
}

impl Metric {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "accuracy" => Ok(Metric::Accuracy),
            "kappa" => Ok(Metric::Kappa),
            "auc" => Ok(Metric::Auc),
            other => Err(Error::Config(format!("unknown metric `{other}` (expected accuracy, kappa or auc)"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Metric::Accuracy => "accuracy",
            Metric::Kappa => "kappa",
            Metric::Auc => "auc",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub metric: Metric,
    pub value: f64,
    pub confusion: ConfusionMatrix,
    pub note: Option<String>,
}

/// Metric over per-sample predictions; `positive_scores` feed ROC-AUC.
pub fn score(metric: Metric, classes: usize, truth: &[usize], predicted: &[usize], positive_scores: &[f64]) -> Result<EvalReport> {
    let confusion = ConfusionMatrix::from_predictions(classes, truth, predicted)?;
    let (value, note) = match metric {
        Metric::Accuracy => (accuracy(&confusion)?, None),
        Metric::Kappa => match quadratic_kappa(&confusion)? {
            Kappa::Value(v) => (v, None),
            Kappa::Undefined { reason } => (f64::NAN, Some(reason)),
        },
        Metric::Auc => {
            if classes != 2 {
                return Err(Error::Config(format!("ROC-AUC needs a binary task, got {classes} classes")));
            }
            let labels: Vec<bool> = truth.iter().map(|&t| t == 1).collect();
            (roc_auc(positive_scores, &labels)?, None)
        }
    };
    Ok(EvalReport { metric, value, confusion, note })
}

/// Class-token embeddings of every image in `data`.
pub fn embed_dataset(model: &Model, data: &Dataset) -> Result<Vec<Vec<f64>>> {
    (0..data.len()).map(|i| model.embed(&data.image(i))).collect()
}

fn labels_of(data: &Dataset) -> Result<Vec<usize>> {
    Ok(data.require_labels()?.iter().map(|&l| l as usize).collect())
}

/// Weighted k-NN with `train` as gallery and `test` as queries.
pub fn evaluate_knn_protocol(
    model: &Model,
    train: &Dataset,
    test: &Dataset,
    k: usize,
    tau: f64,
    metric: Metric,
) -> Result<EvalReport> {
    let gallery = embed_dataset(model, train)?;
    let queries = embed_dataset(model, test)?;
    knn_report(&gallery, &labels_of(train)?, &queries, &labels_of(test)?, k, tau, metric)
}

/// k-NN metric over precomputed embeddings.
pub fn knn_report(
    gallery: &[Vec<f64>],
    gallery_labels: &[usize],
    queries: &[Vec<f64>],
    truth: &[usize],
    k: usize,
    tau: f64,
    metric: Metric,
) -> Result<EvalReport> {
    let index = EmbeddingIndex::new(gallery, gallery_labels)?;
    let classes = index.num_classes().max(truth.iter().max().map_or(0, |m| m + 1));
    let mut predicted = Vec::with_capacity(queries.len());
    let mut positive = Vec::with_capacity(queries.len());
    for q in queries {
        let p = knn_predict(&index, q, k, tau)?;
        let total: f64 = p.scores.iter().sum();
        positive.push(p.scores.get(1).copied().unwrap_or(0.0) / total);
        predicted.push(p.label);
    }
    score(metric, classes, truth, &predicted, &positive)
}

/// Prediction-head evaluation.
pub fn evaluate_head(model: &Model, test: &Dataset, metric: Metric) -> Result<EvalReport> {
    let classes = model.num_classes().ok_or_else(|| contract_err("head protocol needs a trained prediction head"))?;
    let truth = labels_of(test)?;
    let mut predicted = Vec::with_capacity(test.len());
    let mut positive = Vec::with_capacity(test.len());
    for i in 0..test.len() {
        let logits = model.head_logits(&test.image(i))?;
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|l| (l - max).exp()).sum();
        positive.push(logits.get(1).map_or(0.0, |l| (l - max).exp() / z));
        predicted.push(argmax(&logits));
    }
    score(metric, classes, &truth, &predicted, &positive)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn knn_basics() {
        let g = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, 0.1]];
        let idx = EmbeddingIndex::new(&g, &[0, 1, 2]).unwrap();
        let p = knn_predict(&idx, &[0.1, 2.0], 1, 0.07).unwrap();
        assert_eq!(p.label, 1);
        let dup = knn_predict(&idx, &[1.0, 0.0], 1, 123.0).unwrap();
        assert_eq!(dup.label, 0);
        assert!((dup.scores[0] - (1.0f64 / 123.0).exp()).abs() < 1e-15);
        let empty = EmbeddingIndex::new(&[], &[]).unwrap();
        assert!(matches!(knn_predict(&empty, &[], 1, 0.1), Err(Error::Contract(_))));
        // k beyond the gallery is clamped.
        assert!(knn_predict(&idx, &[1.0, 0.0], 50, 0.07).is_ok());
    }

    #[test]
    fn kappa_examples() {
        let diag = ConfusionMatrix::from_counts(&[vec![3, 0, 0], vec![0, 4, 0], vec![0, 0, 2]]).unwrap();
        assert_eq!(quadratic_kappa(&diag).unwrap(), Kappa::Value(1.0));
        let anti = ConfusionMatrix::from_counts(&[vec![0, 5], vec![5, 0]]).unwrap();
        assert_eq!(quadratic_kappa(&anti).unwrap(), Kappa::Value(-1.0));
        let one = ConfusionMatrix::from_counts(&[vec![7, 0], vec![0, 0]]).unwrap();
        let k = quadratic_kappa(&one).unwrap();
        assert!(matches!(k, Kappa::Undefined { .. }) && k.value().is_nan());
        assert!(matches!(quadratic_kappa(&ConfusionMatrix::new(2)), Err(Error::Contract(_))));
    }

    #[test]
    fn auc_examples() {
        assert_eq!(roc_auc(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]).unwrap(), 1.0);
        assert_eq!(roc_auc(&[0.5; 6], &[true, false, true, false, false, true]).unwrap(), 0.5);
        assert!(matches!(roc_auc(&[0.1, 0.2], &[true, true]), Err(Error::Contract(_))));
    }

    #[test]
    fn accuracy_and_metric_names() {
        let cm = ConfusionMatrix::from_counts(&[vec![3, 1], vec![2, 4]]).unwrap();
        assert_eq!(accuracy(&cm).unwrap(), 0.7);
        assert_eq!(Metric::parse("kappa").unwrap(), Metric::Kappa);
        assert!(matches!(Metric::parse("iou"), Err(Error::Config(_))));
    }
}
