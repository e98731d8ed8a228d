use std::path::Path;

use serde::Serialize;

use crate::cochlea::write_pgm;
use crate::{CoreError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Accuracies {
    /// Support-weighted mean of per-class recall (equal to plain accuracy).
    pub weighted: f64,
    /// Unweighted mean of per-class recall over classes present in `labels`.
    pub balanced: f64,
    pub plain: f64,
}

fn check(preds: &[usize], labels: &[usize]) -> Result<()> {
    if preds.len() != labels.len() {
        return Err(CoreError::Invalid(format!("{} predictions for {} labels", preds.len(), labels.len())));
    }
    if labels.is_empty() {
        return Err(CoreError::Empty("no predictions".into()));
    }
    Ok(())
}

fn per_class(preds: &[usize], labels: &[usize]) -> Vec<(u64, u64)> {
    let k = labels.iter().chain(preds).max().map_or(0, |m| m + 1);
    let mut stats = vec![(0u64, 0u64); k];
    for (&p, &y) in preds.iter().zip(labels) {
        stats[y].1 += 1;
        if p == y {
            stats[y].0 += 1;
        }
    }
    stats
}

pub fn weighted_accuracy(preds: &[usize], labels: &[usize]) -> Result<f64> {
    check(preds, labels)?;
    let n = labels.len() as f64;
    Ok(per_class(preds, labels)
        .iter()
        .filter(|(_, support)| *support > 0)
        .map(|&(hit, support)| (support as f64 / n) * (hit as f64 / support as f64))
        .sum())
}

pub fn balanced_accuracy(preds: &[usize], labels: &[usize]) -> Result<f64> {
    check(preds, labels)?;
    let recalls: Vec<f64> = per_class(preds, labels)
        .iter()
        .filter(|(_, support)| *support > 0)
        .map(|&(hit, support)| hit as f64 / support as f64)
        .collect();
    Ok(recalls.iter().sum::<f64>() / recalls.len() as f64)
}

pub fn accuracy(preds: &[usize], labels: &[usize]) -> Result<f64> {
    check(preds, labels)?;
    Ok(preds.iter().zip(labels).filter(|(p, y)| p == y).count() as f64 / labels.len() as f64)
}

pub fn accuracies(preds: &[usize], labels: &[usize]) -> Result<Accuracies> {
    Ok(Accuracies {
        weighted: weighted_accuracy(preds, labels)?,
        balanced: balanced_accuracy(preds, labels)?,
        plain: accuracy(preds, labels)?,
    })
}

/// `k x k` counts, rows = true class, columns = predicted class.
pub fn confusion_matrix(preds: &[usize], labels: &[usize], k: usize) -> Result<Vec<Vec<u64>>> {
    check(preds, labels)?;
    let mut m = vec![vec![0u64; k]; k];
    for (&p, &y) in preds.iter().zip(labels) {
        if p >= k || y >= k {
            return Err(CoreError::Invalid(format!("class index {} outside {k} classes", p.max(y))));
        }
        m[y][p] += 1;
    }
    Ok(m)
}

/// Confusion matrix as a PGM with a `log(1 + count)` grey scale; true classes
/// run top to bottom.
pub fn render_confusion_pgm(m: &[Vec<u64>], path: &Path) -> Result<()> {
    let k = m.len();
    if k == 0 {
        return Err(CoreError::Empty("confusion matrix".into()));
    }
    let max = m.iter().flatten().map(|&c| (c as f64).ln_1p()).fold(0.0, f64::max);
    let pixels: Vec<u8> = m
        .iter()
        .flatten()
        .map(|&c| if max > 0.0 { ((c as f64).ln_1p() / max * 255.0).round() as u8 } else { 0 })
        .collect();
    write_pgm(path, k, k, &pixels)
}

pub fn write_confusion_csv(m: &[Vec<u64>], classes: &[String], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["true\\pred".to_string()];
    header.extend(classes.iter().cloned());
    w.write_record(&header)?;
    for (row, name) in m.iter().zip(classes) {
        let mut rec = vec![name.clone()];
        rec.extend(row.iter().map(u64::to_string));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| CoreError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accuracy_examples() {
        let labels = [0, 0, 0, 1];
        let preds = [0, 0, 0, 0];
        assert!((weighted_accuracy(&preds, &labels).unwrap() - 0.75).abs() < 1e-12);
        assert!((balanced_accuracy(&preds, &labels).unwrap() - 0.5).abs() < 1e-12);
        assert_eq!(balanced_accuracy(&[2, 2], &[2, 2]).unwrap(), 1.0);
        assert_eq!(weighted_accuracy(&[1, 0], &[1, 0]).unwrap(), 1.0);
    }

    #[test]
    fn confusion_examples() {
        let m = confusion_matrix(&[1, 1], &[0, 1], 2).unwrap();
        assert_eq!(m, vec![vec![0, 1], vec![0, 1]]);
        let d = confusion_matrix(&[0, 1, 2], &[0, 1, 2], 3).unwrap();
        assert!((0..3).all(|i| (0..3).all(|j| (d[i][j] == 1) == (i == j))));
        assert!(confusion_matrix(&[3], &[0], 2).is_err());
    }
}
