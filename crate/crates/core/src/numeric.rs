//! Small shared numeric helpers: stable softmax / log-sum-exp and
//! deterministic argmax.
//!
//! Logit vectors in this crate may contain `-inf` entries (zero-probability
//! categories from an exact posterior); these helpers treat `-inf` as "no
//! mass" and stay finite as long as at least one entry is finite.

/// Log of the sum of exponentials, computed with a max shift.
///
/// Returns `-inf` for an empty slice or when every entry is `-inf`.
pub(crate) fn logsumexp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        // Either empty or all -inf (max = -inf); +inf/NaN are rejected upstream.
        return f64::NEG_INFINITY;
    }
    let sum: f64 = values.iter().map(|v| (v - max).exp()).sum();
    max + sum.ln()
}

/// Softmax via max shift. `-inf` entries map to exactly 0.
///
/// Requires at least one finite entry; callers validate that precondition.
pub(crate) fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    debug_assert!(max.is_finite(), "softmax needs one finite logit");
    let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Index of the maximum entry, ties broken by lowest index.
///
/// Returns `None` for an empty slice. NaN entries never win.
pub(crate) fn argmax(values: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &v) in values.iter().enumerate() {
        match best {
            Some((_, b)) if v <= b => {}
            _ if v.is_nan() => {}
            _ => best = Some((i, v)),
        }
    }
    best.map(|(i, _)| i)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn logsumexp_matches_direct_sum_on_small_values() {
        let vals = [0.1f64, -0.3, 0.7];
        let direct: f64 = vals.iter().map(|v| v.exp()).sum::<f64>().ln();
        assert!((logsumexp(&vals) - direct).abs() < 1e-12);
    }

    #[test]
    fn logsumexp_survives_large_magnitudes() {
        let vals = [-1000.0f64, 0.0];
        let out = logsumexp(&vals);
        assert!(out.is_finite());
        assert!((out - 0.0).abs() < 1e-12);
    }

    #[test]
    fn logsumexp_of_all_neg_inf_is_neg_inf() {
        assert_eq!(logsumexp(&[f64::NEG_INFINITY; 3]), f64::NEG_INFINITY);
        assert_eq!(logsumexp(&[]), f64::NEG_INFINITY);
    }

    #[test]
    fn softmax_handles_neg_inf_entries() {
        let probs = softmax(&[0.0, f64::NEG_INFINITY, 0.0]);
        assert_eq!(probs[1], 0.0);
        assert!((probs[0] - 0.5).abs() < 1e-12);
        assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0, 2.0]), Some(1));
        assert_eq!(argmax(&[]), None);
        assert_eq!(argmax(&[f64::NEG_INFINITY, 0.5]), Some(1));
    }
}
