//! Softmax cross-entropy with mean reduction.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub loss: f64,
    /// Gradient of the mean loss with respect to the logits, row-major `n x k`.
    pub d_logits: Vec<f64>,
    /// Samples whose first maximal logit is the label.
    pub correct: usize,
}

/// Index of the first maximal entry.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Mean cross-entropy of `logits` (`n` rows of `k`) against `labels`.
pub fn softmax_cross_entropy(logits: &[f64], labels: &[usize], k: usize) -> Result<LossOutput> {
    let n = labels.len();
    if n == 0 || k == 0 || logits.len() != n * k {
        return Err(Error::Dimension(format!(
            "{} logits for {n} labels over {k} classes",
            logits.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::Dimension(format!(
            "label {bad} with only {k} classes"
        )));
    }
    let mut loss = 0.0;
    let mut correct = 0;
    let mut d_logits = vec![0.0; n * k];
    for (i, (row, &y)) in logits.chunks_exact(k).zip(labels).enumerate() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let log_z = max + sum.ln();
        loss += log_z - row[y];
        if argmax(row) == y {
            correct += 1;
        }
        let d = &mut d_logits[i * k..(i + 1) * k];
        for (j, v) in row.iter().enumerate() {
            d[j] = (v - log_z).exp() / n as f64;
        }
        d[y] -= 1.0 / n as f64;
    }
    Ok(LossOutput {
        loss: loss / n as f64,
        d_logits,
        correct,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn uniform_logits_hit_label_zero_only() {
        let labels: Vec<usize> = (0..12).map(|i| i % 4).collect();
        let out = softmax_cross_entropy(&vec![0.5; 48], &labels, 4).unwrap();
        assert_eq!(out.correct, 3);
        assert!((out.loss - 4f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn saturated_one_hot_has_vanishing_loss() {
        let logits = [1e3, 0.0, 0.0, 1e3];
        let out = softmax_cross_entropy(&logits, &[0, 1], 2).unwrap();
        assert!(out.loss < 1e-300);
        assert_eq!(out.correct, 2);
    }

    #[test]
    fn random_logits_match_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (n, k) = (7, 5);
        let logits: Vec<f64> = (0..n * k).map(|_| rng.random_range(-4.0..4.0)).collect();
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let out = softmax_cross_entropy(&logits, &labels, k).unwrap();
        let mut want = 0.0;
        for i in 0..n {
            let row = &logits[i * k..(i + 1) * k];
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            want += -(row[labels[i]].exp() / z).ln();
        }
        assert!((out.loss - want / n as f64).abs() < 1e-12);
        let rows: Vec<f64> = out.d_logits.chunks(k).map(|r| r.iter().sum()).collect();
        assert!(rows.iter().all(|s| s.abs() < 1e-15));
    }

    #[test]
    fn bad_inputs_are_rejected() {
        assert!(softmax_cross_entropy(&[], &[], 3).is_err());
        assert!(softmax_cross_entropy(&[0.0, 0.0], &[2], 2).is_err());
    }
}
