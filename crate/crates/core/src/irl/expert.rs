use rand::Rng;
use serde::{Deserialize, Serialize};

use super::truncnorm::{grad_log_truncnorm, stratified_uniforms, TruncatedNormal};
use super::IrlError;

/// Signature of the score function `∂/∂μ ln p(r; μ, σ0)`, pluggable so the
/// diagnostics can be pointed at a deliberately broken variant.
pub type ScoreFn = fn(f64, f64, f64) -> Result<f64, IrlError>;

/// Truncated-normal model of the demonstrator around the observed reward.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpertModel {
    pub sigma0: f64,
    pub beta: f64,
    pub lambda: f64,
    /// Draws for the partition estimate.
    pub s1: usize,
    /// Draws for its gradient; equal counts share one draw set.
    pub s2: usize,
    pub seed: u64,
}

impl ExpertModel {
    pub fn validate(&self) -> Result<(), IrlError> {
        if !(self.sigma0 > 0.0 && self.sigma0.is_finite()) {
            return Err(IrlError::Config(format!("sigma0 must be positive, got {}", self.sigma0)));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(IrlError::Config(format!("beta must be positive, got {}", self.beta)));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(IrlError::Config(format!("lambda must be non-negative, got {}", self.lambda)));
        }
        if self.s1 == 0 || self.s2 == 0 {
            return Err(IrlError::Config("s1 and s2 must be at least 1".into()));
        }
        Ok(())
    }
}

/// Reward draws around one observed reward.
#[derive(Clone, Debug, PartialEq)]
pub struct Draws {
    pub partition: Vec<f64>,
    /// Separate draws for the gradient estimate, or `None` when shared.
    pub gradient: Option<Vec<f64>>,
}

impl Draws {
    pub fn for_gradient(&self) -> &[f64] {
        self.gradient.as_deref().unwrap_or(&self.partition)
    }
}

fn draw<R: Rng + ?Sized>(tn: &TruncatedNormal, s: usize, rng: &mut R) -> Vec<f64> {
    stratified_uniforms(s, rng)
        .into_iter()
        .map(|u| tn.quantile(u))
        .collect()
}

/// `Ẑ = mean(exp r_j)` over `s1` draws from the expert model centred on
/// `r_star`. Draws are stratified and antithetic, so each is still marginally
/// truncated normal.
pub fn partition_estimate<R: Rng + ?Sized>(
    r_star: f64,
    model: &ExpertModel,
    rng: &mut R,
) -> Result<(f64, Draws), IrlError> {
    if !(-1.0..=1.0).contains(&r_star) {
        return Err(IrlError::OutOfDomain(r_star));
    }
    let tn = TruncatedNormal::new(r_star, model.sigma0)?;
    let partition = draw(&tn, model.s1, rng);
    let gradient = (model.s2 != model.s1).then(|| draw(&tn, model.s2, rng));
    let z = partition.iter().map(|r| r.exp()).sum::<f64>() / partition.len() as f64;
    Ok((z, Draws { partition, gradient }))
}

/// `∇Ẑ = mean(exp r_j · ∂μ ln p(r_j))`.
pub fn grad_partition(r_star: f64, model: &ExpertModel, draws: &Draws) -> Result<f64, IrlError> {
    grad_partition_with(r_star, model.sigma0, draws.for_gradient(), grad_log_truncnorm)
}

pub fn grad_partition_with(
    r_star: f64,
    sigma0: f64,
    samples: &[f64],
    score: ScoreFn,
) -> Result<f64, IrlError> {
    let mut acc = 0.0;
    for &r in samples {
        acc += r.exp() * score(r, r_star, sigma0)?;
    }
    Ok(acc / samples.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model(sigma0: f64, s: usize) -> ExpertModel {
        ExpertModel {
            sigma0,
            beta: 1.0,
            lambda: 0.1,
            s1: s,
            s2: s,
            seed: 0,
        }
    }

    /// `E[exp r]` under the truncated normal, by Simpson quadrature.
    fn quadrature_z(mu: f64, sigma0: f64) -> f64 {
        let tn = TruncatedNormal::new(mu, sigma0).unwrap();
        let n = 20_000;
        let h = 2.0 / n as f64;
        let f = |x: f64| (x + tn.ln_pdf(x)).exp();
        let mut acc = f(-1.0) + f(1.0);
        for i in 1..n {
            acc += if i % 2 == 1 { 4.0 } else { 2.0 } * f(-1.0 + i as f64 * h);
        }
        acc * h / 3.0
    }

    #[test]
    fn partition_matches_quadrature() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (z, _) = partition_estimate(0.0, &model(0.55, 100_000), &mut rng).unwrap();
        let q = quadrature_z(0.0, 0.55);
        assert!((z - q).abs() / q < 0.005, "{z} vs {q}");
    }

    #[test]
    fn partition_in_domain_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for &mu in &[-1.0, -0.3, 0.0, 0.8, 1.0] {
            let (z, _) = partition_estimate(mu, &model(0.55, 64), &mut rng).unwrap();
            assert!(z >= (-1f64).exp() && z <= 1f64.exp());
        }
    }

    #[test]
    fn degenerate_expert_limits() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = model(1e-6, 100_000);
        let (z, draws) = partition_estimate(0.4, &m, &mut rng).unwrap();
        assert!((z - 0.4f64.exp()).abs() < 1e-5);
        let g = grad_partition(0.4, &m, &draws).unwrap();
        assert!((g - 0.4f64.exp()).abs() < 1e-3, "{g}");
    }

    #[test]
    fn gradient_matches_quadrature_derivative() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = model(0.55, 100_000);
        let (_, draws) = partition_estimate(0.0, &m, &mut rng).unwrap();
        let g = grad_partition(0.0, &m, &draws).unwrap();
        let h = 1e-4;
        let fd = (quadrature_z(h, 0.55) - quadrature_z(-h, 0.55)) / (2.0 * h);
        assert!((g - fd).abs() / fd.abs() < 0.01, "{g} vs {fd}");
    }

    #[test]
    fn gradient_variance_shrinks_with_draws() {
        // Plain i.i.d. draws show the 1/s law; stratification only lowers it.
        let var_at = |s: usize| {
            let vals: Vec<f64> = (0..100)
                .map(|seed| {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    let tn = TruncatedNormal::new(0.2, 0.55).unwrap();
                    let draws: Vec<f64> = (0..s).map(|_| tn.sample(&mut rng)).collect();
                    grad_partition_with(0.2, 0.55, &draws, grad_log_truncnorm).unwrap()
                })
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (vals.len() - 1) as f64
        };
        let ratio = var_at(100) / var_at(10_000);
        assert!(ratio > 50.0 && ratio < 200.0, "{ratio}");
    }

    #[test]
    fn separate_gradient_draws_when_counts_differ() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = ExpertModel { s2: 10, ..model(0.55, 6) };
        let (_, draws) = partition_estimate(0.1, &m, &mut rng).unwrap();
        assert_eq!(draws.partition.len(), 6);
        assert_eq!(draws.for_gradient().len(), 10);
        let shared = partition_estimate(0.1, &model(0.55, 6), &mut rng).unwrap().1;
        assert!(shared.gradient.is_none());
    }

    #[test]
    fn rejects_bad_models() {
        assert!(model(0.0, 4).validate().is_err());
        assert!(ExpertModel { beta: -1.0, ..model(0.5, 4) }.validate().is_err());
        assert!(ExpertModel { s1: 0, ..model(0.5, 4) }.validate().is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(partition_estimate(1.5, &model(0.5, 4), &mut rng).is_err());
    }
}
