/// Reward of one state change, `2/(1+exp(βΔ)) − 1`, where `Δ` is the change
/// in control-error norm. Written as `−tanh(βΔ/2)` so it stays exactly odd
/// and never overflows.
pub fn reward(delta: f64, beta: f64) -> f64 {
    -(0.5 * beta * delta).tanh()
}

/// `dr/dΔ`.
pub fn reward_slope(delta: f64, beta: f64) -> f64 {
    let r = reward(delta, beta);
    -0.5 * beta * (1.0 - r * r)
}

/// Reward minus the mean residual weight of both frames, clamped to the
/// expert model's domain.
pub fn regularized_reward(r: f64, rsw_t: f64, rsw_next: f64, lambda: f64) -> f64 {
    (r - lambda * 0.5 * (rsw_t + rsw_next)).clamp(-1.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn reference_values() {
        let ln3 = 3f64.ln();
        assert_eq!(reward(0.0, 1.0), 0.0);
        assert!((reward(-ln3, 1.0) - 0.5).abs() < 1e-15);
        assert!((reward(ln3, 1.0) + 0.5).abs() < 1e-15);
        // Against the logistic form directly.
        for &(d, b) in &[(0.3, 2.0), (-1.7, 0.4), (5.0, 3.0)] {
            let direct = 2.0 / (1.0 + f64::exp(b * d)) - 1.0;
            assert!((reward(d, b) - direct).abs() < 1e-14);
        }
    }

    #[test]
    fn regularized_values() {
        assert_eq!(regularized_reward(0.5, 0.0, 0.0, 0.1), 0.5);
        assert!((regularized_reward(0.5, 1.0, 1.0, 0.1) - 0.4).abs() < 1e-15);
        assert_eq!(regularized_reward(-0.99, 1.0, 1.0, 0.1), -1.0);
    }

    #[test]
    fn slope_matches_finite_difference() {
        for &(d, b) in &[(0.0, 1.0), (0.4, 2.5), (-2.0, 0.7)] {
            let h = 1e-6;
            let num = (reward(d + h, b) - reward(d - h, b)) / (2.0 * h);
            assert!((reward_slope(d, b) - num).abs() < 1e-8);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn odd_and_bounded(d in -1e6f64..1e6, b in 1e-3f64..100.0) {
            prop_assert_eq!(reward(-d, b), -reward(d, b));
            let r = reward(d, b);
            prop_assert!((-1.0..=1.0).contains(&r));
            if (0.5 * b * d).abs() < 15.0 {
                prop_assert!(r.abs() < 1.0);
            }
        }

        #[test]
        fn strictly_decreasing(d in -5.0f64..5.0, gap in 1e-6f64..5.0, b in 0.01f64..2.0) {
            prop_assert!(reward(d, b) > reward(d + gap, b));
        }
    }
}
