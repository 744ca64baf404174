use rand::distr::Open01;
use rand::Rng;
use statrs::function::erf::{erfc, erfc_inv};

use super::IrlError;

const LOWER: f64 = -1.0;
const UPPER: f64 = 1.0;
const MIN_MASS: f64 = 1e-300;

/// `Φ(x)`.
pub fn std_normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// `1 − Φ(x)` without cancellation in the upper tail.
fn std_normal_sf(x: f64) -> f64 {
    0.5 * erfc(x / std::f64::consts::SQRT_2)
}

fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Normal `N(μ, σ²)` restricted to `[−1, 1]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TruncatedNormal {
    pub mu: f64,
    pub sigma: f64,
}

impl TruncatedNormal {
    pub fn new(mu: f64, sigma: f64) -> Result<Self, IrlError> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(IrlError::Config(format!("sigma0 must be positive, got {sigma}")));
        }
        if !mu.is_finite() {
            return Err(IrlError::NonFinite("truncated-normal mean"));
        }
        Ok(TruncatedNormal { mu, sigma })
    }

    fn bounds(&self) -> (f64, f64) {
        ((LOWER - self.mu) / self.sigma, (UPPER - self.mu) / self.sigma)
    }

    /// Probability mass of the untruncated normal inside the domain.
    pub fn mass(&self) -> f64 {
        let (a, b) = self.bounds();
        if a > 0.0 {
            std_normal_sf(a) - std_normal_sf(b)
        } else if b < 0.0 {
            std_normal_cdf(b) - std_normal_cdf(a)
        } else {
            1.0 - std_normal_cdf(a) - std_normal_sf(b)
        }
    }

    pub fn cdf(&self, x: f64) -> f64 {
        if x <= LOWER {
            return 0.0;
        }
        if x >= UPPER {
            return 1.0;
        }
        let (a, b) = self.bounds();
        let z = (x - self.mu) / self.sigma;
        let below = if z > 0.0 {
            // Mass in [x, 1] is better conditioned here.
            1.0 - (std_normal_sf(z) - std_normal_sf(b)) / self.mass()
        } else {
            (std_normal_cdf(z) - std_normal_cdf(a)) / self.mass()
        };
        below.clamp(0.0, 1.0)
    }

    pub fn ln_pdf(&self, x: f64) -> f64 {
        if !(LOWER..=UPPER).contains(&x) {
            return f64::NEG_INFINITY;
        }
        let z = (x - self.mu) / self.sigma;
        -0.5 * z * z - (self.sigma * (2.0 * std::f64::consts::PI).sqrt()).ln() - self.mass().ln()
    }

    /// Inverse CDF.
    pub fn quantile(&self, u: f64) -> f64 {
        let (a, b) = self.bounds();
        let mass = self.mass();
        let lower = std_normal_cdf(a) + u * mass;
        let z = if lower <= 0.5 {
            -std::f64::consts::SQRT_2 * erfc_inv(2.0 * lower)
        } else {
            let upper = std_normal_sf(b) + (1.0 - u) * mass;
            std::f64::consts::SQRT_2 * erfc_inv(2.0 * upper)
        };
        (self.mu + self.sigma * z).clamp(LOWER, UPPER)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        self.quantile(rng.sample(Open01))
    }

    pub fn mean(&self) -> f64 {
        let (a, b) = self.bounds();
        self.mu + self.sigma * (std_normal_pdf(a) - std_normal_pdf(b)) / self.mass()
    }
}

/// Derivative of the truncated log-density `ln p(r; μ, σ0)` with respect to
/// the mean `μ`.
pub fn grad_log_truncnorm(r: f64, mu: f64, sigma0: f64) -> Result<f64, IrlError> {
    let tn = TruncatedNormal::new(mu, sigma0)?;
    let mass = tn.mass();
    if !(mass >= MIN_MASS) {
        return Err(IrlError::DegenerateTruncation { mu, sigma0 });
    }
    let (a, b) = tn.bounds();
    let x = (r - mu) / sigma0;
    let correction = ((-0.5 * b * b).exp() - (-0.5 * a * a).exp())
        / ((2.0 * std::f64::consts::PI).sqrt() * sigma0 * mass);
    Ok(x / sigma0 + correction)
}

/// `s` uniforms on `(0, 1)`: stratified into `s/2` equal cells, each drawn
/// point paired with its reflection `1 − u`. An odd count adds one free draw.
pub fn stratified_uniforms<R: Rng + ?Sized>(s: usize, rng: &mut R) -> Vec<f64> {
    let half = s / 2;
    let mut out = Vec::with_capacity(s);
    for k in 0..half {
        let v: f64 = rng.sample(Open01);
        let u = (k as f64 + v) / half as f64;
        out.push(u);
        out.push(1.0 - u);
    }
    if s % 2 == 1 {
        out.push(rng.sample(Open01));
    }
    out
}
