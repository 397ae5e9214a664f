use serde::{Deserialize, Serialize};

use crate::error::{contract_err, dim_err, Result};

/// Indices ordered by descending score, ties by ascending index.
pub fn rank_order(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

/// Mean of precision@r over the ranks r of the positives; `None` without positives.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Result<Option<f64>> {
    if scores.len() != labels.len() {
        return dim_err(format!("{} scores vs {} labels", scores.len(), labels.len()));
    }
    let positives = labels.iter().filter(|&&l| l).count();
    if positives == 0 {
        return Ok(None);
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in rank_order(scores).iter().enumerate() {
        if labels[i] {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(Some(sum / positives as f64))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanAp {
    /// AP per class; `None` for classes without positives.
    pub per_class: Vec<Option<f64>>,
    /// Classes left out of the mean for having no positives.
    pub excluded: Vec<usize>,
    pub map: f64,
}

/// Macro mean of one-vs-rest AP over classes, scoring item `i` for class
/// `c` by `scores[i][c]`.
pub fn mean_ap(scores: &[Vec<f64>], labels: &[usize], classes: usize) -> Result<MeanAp> {
    if scores.len() != labels.len() {
        return dim_err(format!("{} score rows vs {} labels", scores.len(), labels.len()));
    }
    if let Some(row) = scores.iter().find(|r| r.len() != classes) {
        return dim_err(format!("score row of width {} for {classes} classes", row.len()));
    }
    let mut per_class = Vec::with_capacity(classes);
    let mut excluded = Vec::new();
    for c in 0..classes {
        let col: Vec<f64> = scores.iter().map(|r| r[c]).collect();
        let bin: Vec<bool> = labels.iter().map(|&l| l == c).collect();
        let ap = average_precision(&col, &bin)?;
        if ap.is_none() {
            excluded.push(c);
        }
        per_class.push(ap);
    }
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    if present.is_empty() {
        return contract_err("no class has a positive example");
    }
    let map = present.iter().sum::<f64>() / present.len() as f64;
    Ok(MeanAp {
        per_class,
        excluded,
        map,
    })
}

/// First index of the maximum.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Fraction of rows whose argmax equals the label; 0 for no rows.
pub fn top1(logits: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if logits.len() != labels.len() {
        return dim_err(format!("{} logit rows vs {} labels", logits.len(), labels.len()));
    }
    if logits.is_empty() {
        return Ok(0.0);
    }
    let hits = logits.iter().zip(labels).filter(|(r, &l)| argmax(r) == l).count();
    Ok(hits as f64 / logits.len() as f64)
}

/// Row-wise softmax.
pub fn softmax_rows(logits: &[Vec<f64>]) -> Vec<Vec<f64>> {
    logits
        .iter()
        .map(|row| {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
            let s: f64 = e.iter().sum();
            e.into_iter().map(|v| v / s).collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn worked_example() {
        let ap = average_precision(&[0.9, 0.8, 0.7], &[true, false, true]).unwrap().unwrap();
        assert!((ap - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn perfect_and_anti_ranking() {
        let ap = average_precision(&[0.9, 0.8, 0.1, 0.0], &[true, true, false, false]).unwrap();
        assert_eq!(ap, Some(1.0));
        let ap = average_precision(&[0.9, 0.8, 0.7, 0.1], &[false, false, false, true]).unwrap();
        assert_eq!(ap, Some(0.25));
        assert_eq!(average_precision(&[0.1], &[false]).unwrap(), None);
    }

    #[test]
    fn ties_rank_by_index() {
        let ap = average_precision(&[0.5, 0.5], &[false, true]).unwrap().unwrap();
        assert_eq!(ap, 0.5);
        let ap = average_precision(&[0.5, 0.5], &[true, false]).unwrap().unwrap();
        assert_eq!(ap, 1.0);
    }

    #[test]
    fn top1_examples() {
        assert_eq!(top1(&[vec![2.0, 1.0], vec![0.0, 3.0]], &[0, 1]).unwrap(), 1.0);
        let uniform = vec![vec![1.0; 3]; 4];
        assert_eq!(top1(&uniform, &[0, 1, 0, 2]).unwrap(), 0.5);
    }

    #[test]
    fn map_excludes_empty_classes() {
        let scores = vec![vec![0.9, 0.1, 0.0], vec![0.2, 0.8, 0.0]];
        let m = mean_ap(&scores, &[0, 1], 3).unwrap();
        assert_eq!(m.excluded, vec![2]);
        assert_eq!(m.per_class[2], None);
        assert_eq!(m.map, 1.0);
    }
}
