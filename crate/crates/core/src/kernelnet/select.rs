use super::KernelError;
use crate::numeric::softmax;
use crate::Scalar;

/// Softmax-normalized relevance of every instance in a frame.
#[derive(Clone, Debug, PartialEq)]
pub struct SelectOutResult<T = f64> {
    /// `gᵢ`, summing to one.
    pub weights: Vec<T>,
    /// Indices of the `p` heaviest instances, heaviest first.
    pub top: Vec<usize>,
    /// Residual sum of weights outside `top`.
    pub rsw: T,
}

/// Normalizes instance scores and extracts the top `p`. Equal weights are
/// ordered by lower instance index.
pub fn select_out<T: Scalar>(scores: &[T], p: usize) -> Result<SelectOutResult<T>, KernelError> {
    if scores.is_empty() {
        return Err(KernelError::NoInstances);
    }
    let weights = softmax(scores);
    let top = top_indices(&weights, p);
    let rsw = residual(&weights, &top);
    Ok(SelectOutResult { weights, top, rsw })
}

pub(crate) fn top_indices<T: Scalar>(weights: &[T], p: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        weights[b]
            .partial_cmp(&weights[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    order.truncate(p.min(weights.len()));
    order
}

pub(crate) fn residual<T: Scalar>(weights: &[T], top: &[usize]) -> T {
    let kept: T = top.iter().map(|&i| weights[i]).sum();
    (T::one() - kept).max(T::zero()).min(T::one())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn single_instance_takes_all_weight() {
        let r = select_out(&[0.3], 10).unwrap();
        assert_eq!(r.weights, vec![1.0]);
        assert_eq!(r.top, vec![0]);
        assert_eq!(r.rsw, 0.0);
    }

    #[test]
    fn ties_break_to_lower_index() {
        let r = select_out(&[0.5, 0.5], 1).unwrap();
        assert_eq!(r.weights, vec![0.5, 0.5]);
        assert_eq!(r.top, vec![0]);
        assert_eq!(r.rsw, 0.5);
    }

    #[test]
    fn two_level_softmax() {
        let r = select_out(&[1.0, 0.0], 2).unwrap();
        let e = std::f64::consts::E;
        assert!((r.weights[0] - e / (e + 1.0)).abs() < 1e-15);
        assert!((r.weights[0] - 0.731).abs() < 1e-3);
        assert!((r.weights[1] - 0.269).abs() < 1e-3);
        assert_eq!(r.rsw, 0.0);
    }

    #[test]
    fn empty_is_an_error() {
        assert!(matches!(select_out::<f64>(&[], 3), Err(KernelError::NoInstances)));
    }

    #[test]
    fn bounded_scores_cap_the_top_weight() {
        // With scores confined to (0, 1), the top weight is at most e/(e + m − 1).
        let mut scores = vec![0.0; 66];
        scores[0] = 1.0;
        let r = select_out(&scores, 10).unwrap();
        let e = std::f64::consts::E;
        assert!((r.weights[0] - e / (e + 65.0)).abs() < 1e-15);
        assert!(r.rsw > 0.6);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn weights_normalized_and_top_sorted(
            scores in prop::collection::vec(-30.0f64..30.0, 1..80),
            p in 1usize..12,
        ) {
            let r = select_out(&scores, p).unwrap();
            let total: f64 = r.weights.iter().sum();
            prop_assert!((total - 1.0).abs() <= 1e-9);
            prop_assert!(r.rsw >= 0.0 && r.rsw <= 1.0);
            prop_assert_eq!(r.top.len(), p.min(scores.len()));
            for w in r.top.windows(2) {
                prop_assert!(r.weights[w[0]] >= r.weights[w[1]]);
            }
        }

        #[test]
        fn shift_invariant(
            scores in prop::collection::vec(-10.0f64..10.0, 1..40),
            shift in -50.0f64..50.0,
        ) {
            let a = select_out(&scores, 3).unwrap();
            let shifted: Vec<f64> = scores.iter().map(|s| s + shift).collect();
            let b = select_out(&shifted, 3).unwrap();
            for (x, y) in a.weights.iter().zip(&b.weights) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
        }
    }
}
