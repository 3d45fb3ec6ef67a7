use crate::error::{invalid, Result};

/// Percentage of keypoints whose Euclidean error is strictly below `alpha · head_len`.
pub fn pckh(pred: &[(f64, f64)], truth: &[(f64, f64)], head_len: f64, alpha: f64) -> Result<f64> {
    if pred.len() != truth.len() {
        return invalid("pckh", format!("{} predictions for {} keypoints", pred.len(), truth.len()));
    }
    if pred.is_empty() {
        return invalid("pckh", "no keypoints");
    }
    if !(head_len > 0.0) {
        return invalid("pckh", format!("head length {head_len} must be positive"));
    }
    let thr = alpha * head_len;
    let hits = pred
        .iter()
        .zip(truth)
        .filter(|(p, t)| ((p.0 - t.0).powi(2) + (p.1 - t.1).powi(2)).sqrt() < thr)
        .count();
    Ok(100.0 * hits as f64 / pred.len() as f64)
}

/// The α grid 0.01, 0.02, …, 0.50.
pub fn auc_alphas() -> Vec<f64> {
    (1..=50).map(|i| i as f64 / 100.0).collect()
}

/// Mean PCKh over [`auc_alphas`].
pub fn pckh_auc(pred: &[(f64, f64)], truth: &[(f64, f64)], head_len: f64) -> Result<f64> {
    let alphas = auc_alphas();
    let mut acc = 0.0;
    for &a in &alphas {
        acc += pckh(pred, truth, head_len, a)?;
    }
    Ok(acc / alphas.len() as f64)
}

/// `classes × classes` counts, rows = truth, columns = prediction.
pub fn confusion_matrix(pred: &[u32], truth: &[u32], classes: usize) -> Result<Vec<Vec<u64>>> {
    if classes == 0 {
        return invalid("confusion_matrix", "class count must be positive");
    }
    if pred.len() != truth.len() {
        return invalid("confusion_matrix", format!("{} predictions for {} labels", pred.len(), truth.len()));
    }
    if pred.is_empty() {
        return invalid("confusion_matrix", "no labels");
    }
    let mut m = vec![vec![0u64; classes]; classes];
    for (&p, &t) in pred.iter().zip(truth) {
        if p as usize >= classes || t as usize >= classes {
            return invalid("confusion_matrix", format!("label {} out of range for {classes} classes", p.max(t)));
        }
        m[t as usize][p as usize] += 1;
    }
    Ok(m)
}

/// Mean over classes present in prediction or truth of intersection / union.
pub fn miou(pred: &[u32], truth: &[u32], classes: usize) -> Result<f64> {
    let m = confusion_matrix(pred, truth, classes)?;
    let mut sum = 0.0;
    let mut seen = 0;
    for c in 0..classes {
        let tp = m[c][c];
        let row: u64 = m[c].iter().sum();
        let col: u64 = m.iter().map(|r| r[c]).sum();
        let union = row + col - tp;
        if union > 0 {
            sum += tp as f64 / union as f64;
            seen += 1;
        }
    }
    Ok(sum / seen as f64)
}
