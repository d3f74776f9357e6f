//! Accuracy and intersection-over-union metrics.

use crate::error::{Error, Result};

fn check(predictions: &[usize], labels: &[usize]) -> Result<()> {
    if predictions.is_empty() {
        return Err(Error::invalid("metrics need at least one prediction"));
    }
    if predictions.len() != labels.len() {
        return Err(Error::invalid(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    Ok(())
}

/// Fraction of correct predictions.
pub fn overall_accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    check(predictions, labels)?;
    let correct = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(correct as f64 / labels.len() as f64)
}

/// Mean of per-class accuracies over the classes present in `labels`.
pub fn mean_class_accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    check(predictions, labels)?;
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut hit = vec![0usize; classes];
    let mut seen = vec![0usize; classes];
    for (&p, &l) in predictions.iter().zip(labels) {
        seen[l] += 1;
        if p == l {
            hit[l] += 1;
        }
    }
    let accs: Vec<f64> = hit
        .iter()
        .zip(&seen)
        .filter(|(_, &s)| s > 0)
        .map(|(&h, &s)| h as f64 / s as f64)
        .collect();
    Ok(accs.iter().sum::<f64>() / accs.len() as f64)
}

/// Mean IoU over `parts` of one shape; a part absent from both prediction
/// and ground truth scores 1.
pub fn shape_iou(predictions: &[usize], labels: &[usize], parts: &[usize]) -> Result<f64> {
    check(predictions, labels)?;
    if parts.is_empty() {
        return Err(Error::invalid("shape IoU needs at least one part"));
    }
    let total: f64 = parts
        .iter()
        .map(|&q| {
            let mut inter = 0usize;
            let mut union = 0usize;
            for (&p, &l) in predictions.iter().zip(labels) {
                let (a, b) = (p == q, l == q);
                inter += (a && b) as usize;
                union += (a || b) as usize;
            }
            if union == 0 {
                1.0
            } else {
                inter as f64 / union as f64
            }
        })
        .sum();
    Ok(total / parts.len() as f64)
}

/// Mean of [`shape_iou`] over shapes, each `(predictions, labels, parts of its category)`.
pub fn mean_iou(shapes: &[(Vec<usize>, Vec<usize>, Vec<usize>)]) -> Result<f64> {
    if shapes.is_empty() {
        return Err(Error::invalid("mIoU needs at least one shape"));
    }
    let mut total = 0.0;
    for (p, l, parts) in shapes {
        total += shape_iou(p, l, parts)?;
    }
    Ok(total / shapes.len() as f64)
}
