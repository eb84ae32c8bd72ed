//! Classification and clustering metrics.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::adcore::Tensor;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("{0} predictions for {1} labels")]
    LengthMismatch(usize, usize),
    #[error("metric over an empty set")]
    Empty,
    #[error("clustering metrics need at least two classes")]
    SingleClass,
    #[error("classes {0} and {1} have coincident centroids")]
    CoincidentCentroids(usize, usize),
}

pub fn accuracy(preds: &[usize], labels: &[usize]) -> Result<f64, MetricError> {
    if preds.len() != labels.len() {
        return Err(MetricError::LengthMismatch(preds.len(), labels.len()));
    }
    if preds.is_empty() {
        return Err(MetricError::Empty);
    }
    let hits = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / preds.len() as f64)
}

/// Unweighted mean of per-class F1 over `classes`. Undefined precision or
/// recall counts as 0, so a class that is never predicted and never true scores 0.
pub fn macro_f1(preds: &[usize], labels: &[usize], classes: &[usize]) -> Result<f64, MetricError> {
    if preds.len() != labels.len() {
        return Err(MetricError::LengthMismatch(preds.len(), labels.len()));
    }
    if classes.is_empty() {
        return Err(MetricError::Empty);
    }
    let mut total = 0.0;
    for &c in classes {
        let tp = preds.iter().zip(labels).filter(|&(&p, &l)| p == c && l == c).count() as f64;
        let fp = preds.iter().zip(labels).filter(|&(&p, &l)| p == c && l != c).count() as f64;
        let fn_ = preds.iter().zip(labels).filter(|&(&p, &l)| p != c && l == c).count() as f64;
        let precision = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
        let recall = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
        if precision + recall > 0.0 {
            total += 2.0 * precision * recall / (precision + recall);
        }
    }
    Ok(total / classes.len() as f64)
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

fn clusters(labels: &[usize]) -> BTreeMap<usize, Vec<usize>> {
    let mut out: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        out.entry(l).or_default().push(i);
    }
    out
}

fn check_rows(emb: &Tensor, labels: &[usize]) -> Result<BTreeMap<usize, Vec<usize>>, MetricError> {
    if emb.rows() != labels.len() {
        return Err(MetricError::LengthMismatch(emb.rows(), labels.len()));
    }
    let groups = clusters(labels);
    if groups.len() < 2 {
        return Err(MetricError::SingleClass);
    }
    Ok(groups)
}

/// Mean silhouette `(b − a) / max(a, b)` with Euclidean distances. Points in
/// singleton classes score 0.
pub fn silhouette(emb: &Tensor, labels: &[usize]) -> Result<f64, MetricError> {
    let groups = check_rows(emb, labels)?;
    let n = labels.len();
    let mut total = 0.0;
    for i in 0..n {
        let own = &groups[&labels[i]];
        if own.len() == 1 {
            continue;
        }
        let mean_to = |members: &[usize]| -> f64 {
            members.iter().filter(|&&j| j != i).map(|&j| distance(emb.row(i), emb.row(j))).sum::<f64>()
        };
        let a = mean_to(own) / (own.len() - 1) as f64;
        let b = groups
            .iter()
            .filter(|(&c, _)| c != labels[i])
            .map(|(_, m)| mean_to(m) / m.len() as f64)
            .fold(f64::INFINITY, f64::min);
        let denom = a.max(b);
        if denom > 0.0 {
            total += (b - a) / denom;
        }
    }
    Ok(total / n as f64)
}

/// `(1/M) Σ_i max_{j≠i} (s_i + s_j) / d_ij` over the M classes, where `s_i`
/// is the mean distance to the class centroid and `d_ij` the centroid distance.
pub fn davies_bouldin(emb: &Tensor, labels: &[usize]) -> Result<f64, MetricError> {
    let groups = check_rows(emb, labels)?;
    let d = emb.cols();
    let mut centroids = Vec::new();
    let mut scatter = Vec::new();
    let mut ids = Vec::new();
    for (&c, members) in &groups {
        let mut centroid = vec![0.0; d];
        for &i in members {
            for (k, v) in emb.row(i).iter().enumerate() {
                centroid[k] += v;
            }
        }
        centroid.iter_mut().for_each(|v| *v /= members.len() as f64);
        let s = members.iter().map(|&i| distance(emb.row(i), &centroid)).sum::<f64>() / members.len() as f64;
        centroids.push(centroid);
        scatter.push(s);
        ids.push(c);
    }
    let m = ids.len();
    let mut total = 0.0;
    for i in 0..m {
        let mut worst = 0.0f64;
        for j in 0..m {
            if i == j {
                continue;
            }
            let dij = distance(&centroids[i], &centroids[j]);
            if dij == 0.0 {
                return Err(MetricError::CoincidentCentroids(ids[i].min(ids[j]), ids[i].max(ids[j])));
            }
            worst = worst.max((scatter[i] + scatter[j]) / dij);
        }
        total += worst;
    }
    Ok(total / m as f64)
}

/// Mean and sample standard deviation (0 for fewer than two values).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn f1_hand_cases() {
        assert_eq!(macro_f1(&[0, 1, 2], &[0, 1, 2], &[0, 1, 2]).unwrap(), 1.0);
        // Class 0: TP 1, FP 1, FN 1; class 1 the same.
        let f = macro_f1(&[0, 1, 0, 1], &[0, 1, 1, 0], &[0, 1]).unwrap();
        assert!((f - 0.5).abs() < 1e-15);
        let f = macro_f1(&[0, 1], &[0, 1], &[0, 1, 2]).unwrap();
        assert!((f - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn line_silhouette() {
        let emb = Tensor::from_rows(&[vec![0.0], vec![1.0], vec![10.0], vec![11.0]]);
        let sc = silhouette(&emb, &[0, 0, 1, 1]).unwrap();
        // Outer points: a=1, b=10.5; inner points: a=1, b=9.5.
        let expect = ((9.5 / 10.5) * 2.0 + (8.5 / 9.5) * 2.0) / 4.0;
        assert!((sc - expect).abs() < 1e-15, "{sc}");
        assert_eq!(silhouette(&emb, &[0, 0, 0, 0]).unwrap_err(), MetricError::SingleClass);
    }

    #[test]
    fn db_hand_cases() {
        let emb = Tensor::from_rows(&[vec![0.0], vec![2.0], vec![10.0], vec![12.0]]);
        assert!((davies_bouldin(&emb, &[0, 0, 1, 1]).unwrap() - 0.2).abs() < 1e-15);
        let points = Tensor::from_rows(&[vec![1.0, 1.0], vec![1.0, 1.0], vec![4.0, 5.0]]);
        assert_eq!(davies_bouldin(&points, &[0, 0, 1]).unwrap(), 0.0);
        let same = Tensor::from_rows(&[vec![0.0], vec![2.0], vec![1.0]]);
        assert!(davies_bouldin(&same, &[0, 0, 1]).is_err());
    }

    #[test]
    fn mean_std_values() {
        assert_eq!(mean_std(&[0.5]), (0.5, 0.0));
        let (m, s) = mean_std(&[1.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 2f64.sqrt()).abs() < 1e-15);
    }
}
