use crate::error::{NetError, Result};
use crate::layers::sigmoid;

/// Probabilities are clamped to this value before taking logarithms.
pub const LOG_FLOOR: f64 = 1e-12;

/// Cross-entropy `-Σ t·log p` of a softmax output `predicted` against `target`.
///
/// Returns the loss together with its gradient with respect to the softmax
/// logits, which is `p - t` for any target distribution.
pub fn cross_entropy(predicted: &[f64], target: &[f64]) -> Result<(f64, Vec<f64>)> {
    if predicted.len() != target.len() {
        return Err(NetError::InvalidTarget(format!(
            "target has {} entries, prediction has {}",
            target.len(),
            predicted.len()
        )));
    }
    if let Some(bad) = target.iter().find(|t| !(t.is_finite() && **t >= 0.0)) {
        return Err(NetError::InvalidTarget(format!(
            "entry {bad} is not a probability"
        )));
    }
    let total: f64 = target.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(NetError::InvalidTarget(format!(
            "entries sum to {total}, not 1"
        )));
    }
    let loss = -predicted
        .iter()
        .zip(target)
        .filter(|(_, &t)| t > 0.0)
        .map(|(&p, &t)| t * p.max(LOG_FLOOR).ln())
        .sum::<f64>();
    let grad = predicted.iter().zip(target).map(|(p, t)| p - t).collect();
    Ok((loss, grad))
}

/// Mean binary cross-entropy of `sigmoid(logits)` against 0/1 `labels`.
///
/// Returns the loss and its gradient with respect to the logits.
pub fn binary_cross_entropy_with_logits(logits: &[f64], labels: &[f64]) -> Result<(f64, Vec<f64>)> {
    if logits.len() != labels.len() || logits.is_empty() {
        return Err(NetError::InvalidTarget(format!(
            "{} labels for {} logits",
            labels.len(),
            logits.len()
        )));
    }
    let n = logits.len() as f64;
    // log(1 + e^z) - y z, written to stay finite for large |z|
    let loss = logits
        .iter()
        .zip(labels)
        .map(|(&z, &y)| z.max(0.0) - z * y + (-z.abs()).exp().ln_1p())
        .sum::<f64>()
        / n;
    let grad = sigmoid(logits)
        .iter()
        .zip(labels)
        .map(|(s, y)| (s - y) / n)
        .collect();
    Ok((loss, grad))
}

/// Sum of squared differences and its gradient with respect to `predicted`.
pub fn squared_error(predicted: &[f64], target: &[f64]) -> (f64, Vec<f64>) {
    assert_eq!(predicted.len(), target.len());
    let mut loss = 0.0;
    let grad = predicted
        .iter()
        .zip(target)
        .map(|(p, t)| {
            let d = p - t;
            loss += d * d;
            2.0 * d
        })
        .collect();
    (loss, grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_hot_match_has_zero_loss() {
        let (loss, grad) = cross_entropy(&[0.0, 1.0, 0.0], &[0.0, 1.0, 0.0]).unwrap();
        assert!(loss.abs() < 1e-12);
        assert!(grad.iter().all(|g| g.abs() < 1e-12));
    }

    #[test]
    fn uniform_prediction_against_one_hot_is_ln4() {
        let (loss, _) = cross_entropy(&[0.25; 4], &[0.0, 0.0, 1.0, 0.0]).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn uniform_against_uniform_is_ln2() {
        let (loss, grad) = cross_entropy(&[0.5, 0.5], &[0.5, 0.5]).unwrap();
        assert!((loss - 2f64.ln()).abs() < 1e-12);
        assert_eq!(grad, vec![0.0, 0.0]);
    }

    #[test]
    fn zero_probability_is_clamped() {
        let (loss, _) = cross_entropy(&[1.0, 0.0], &[0.0, 1.0]).unwrap();
        assert!((loss + LOG_FLOOR.ln()).abs() < 1e-9);
    }

    #[test]
    fn rejects_non_distributions() {
        assert!(cross_entropy(&[0.5, 0.5], &[0.5, 0.6]).is_err());
        assert!(cross_entropy(&[0.5, 0.5], &[1.5, -0.5]).is_err());
        assert!(cross_entropy(&[0.5, 0.5], &[1.0]).is_err());
    }

    #[test]
    fn bce_matches_direct_formula() {
        let z = [0.3, -2.0, 5.0];
        let y = [1.0, 0.0, 0.0];
        let (loss, _) = binary_cross_entropy_with_logits(&z, &y).unwrap();
        let s = sigmoid(&z);
        let direct = -((s[0]).ln() + (1.0 - s[1]).ln() + (1.0 - s[2]).ln()) / 3.0;
        assert!((loss - direct).abs() < 1e-12);
    }
}
