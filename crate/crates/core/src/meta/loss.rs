//! Softmax classifier and the episodic negative log-likelihood.

use ndarray::{Array1, ArrayView1};

/// Log-probabilities below this floor are clamped.
pub const PROB_FLOOR: f64 = 1e-12;

/// Softmax with max subtraction.
pub fn predict_proba(scores: ArrayView1<'_, f64>) -> Array1<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut p = scores.mapv(|s| (s - max).exp());
    let sum = p.sum();
    p /= sum;
    p
}

/// `-log p[target]` with the probability floored at [`PROB_FLOOR`]. The flag
/// reports whether the floor was hit.
pub fn nll(scores: ArrayView1<'_, f64>, target: usize) -> (f64, bool) {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + scores.iter().map(|s| (s - max).exp()).sum::<f64>().ln();
    let log_p = scores[target] - lse;
    let floor = PROB_FLOOR.ln();
    if log_p < floor {
        (-floor, true)
    } else {
        (-log_p, false)
    }
}

/// Gradient of [`nll`] w.r.t. the scores: `p - onehot(target)`, or zero
/// when the floor is active.
pub fn nll_grad(scores: ArrayView1<'_, f64>, target: usize) -> Array1<f64> {
    if nll(scores, target).1 {
        return Array1::zeros(scores.len());
    }
    let mut g = predict_proba(scores);
    g[target] -= 1.0;
    g
}

/// Mean negative log-likelihood over the query set, from probability
/// vectors. Returns the loss and how many queries were clamped.
pub fn episode_loss(predictions: &[(Array1<f64>, usize)]) -> (f64, usize) {
    assert!(!predictions.is_empty(), "episode has no queries");
    let mut clamped = 0;
    let total: f64 = predictions
        .iter()
        .map(|(p, y)| {
            let prob = p[*y];
            if prob < PROB_FLOOR {
                clamped += 1;
                -PROB_FLOOR.ln()
            } else {
                -prob.ln()
            }
        })
        .sum();
    (total / predictions.len() as f64, clamped)
}

/// Mean of per-episode losses.
pub fn batch_loss(episode_losses: &[f64]) -> f64 {
    assert!(!episode_losses.is_empty(), "empty batch");
    episode_losses.iter().sum::<f64>() / episode_losses.len() as f64
}

/// Index of the largest score; ties go to the lowest index.
pub fn argmax(scores: ArrayView1<'_, f64>) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn uniform_scores() {
        let p = predict_proba(Array1::zeros(5).view());
        assert!(p.iter().all(|&x| (x - 0.2).abs() < 1e-15));
        let preds: Vec<_> = (0..5).map(|y| (p.clone(), y)).collect();
        let (loss, clamped) = episode_loss(&preds);
        assert!((loss - 5f64.ln()).abs() < 1e-9);
        assert_eq!(clamped, 0);
    }

    #[test]
    fn dominant_score() {
        let s = array![10.0, 0.0, 0.0];
        let p = predict_proba(s.view());
        assert_eq!(argmax(p.view()), 0);
        assert!(p[0] > 0.9999);
    }

    #[test]
    fn shift_invariance() {
        let s = array![0.3, -1.2, 2.0, 0.0];
        let a = predict_proba(s.view());
        let b = predict_proba((&s + 100.0).view());
        assert!((&a - &b).iter().all(|x| x.abs() < 1e-12));
        assert!((a.sum() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn perfect_and_zero_probability() {
        let (loss, _) = episode_loss(&[(array![1.0, 0.0], 0)]);
        assert!(loss <= 1e-6);
        let (loss, clamped) = episode_loss(&[(array![1.0, 0.0], 1)]);
        assert_eq!(clamped, 1);
        assert!((loss + PROB_FLOOR.ln()).abs() < 1e-12);
        let (l, flag) = nll(array![1000.0, 0.0].view(), 1);
        assert!(flag);
        assert!(l.is_finite());
        assert!(nll_grad(array![1000.0, 0.0].view(), 1)
            .iter()
            .all(|&g| g == 0.0));
    }

    #[test]
    fn batch_is_mean_of_episodes() {
        assert_eq!(batch_loss(&[1.0, 2.0]), 1.5);
    }

    #[test]
    fn nll_matches_probabilities() {
        let s = array![0.5, 1.5, -0.25];
        let p = predict_proba(s.view());
        assert!((nll(s.view(), 2).0 + p[2].ln()).abs() < 1e-12);
        let g = nll_grad(s.view(), 1);
        assert!((g[1] - (p[1] - 1.0)).abs() < 1e-15);
        assert!(g.sum().abs() < 1e-12);
    }
}
