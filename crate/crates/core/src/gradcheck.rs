//! Finite-difference checks of every analytic gradient in the crate: the
//! tape ops, the truncated-normal score, and the full per-sample training
//! gradient with Monte-Carlo draws held fixed.

use std::fmt;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::irl::{
    beta_from_deltas, grad_log_truncnorm, reward_terms, sample_loss_grad_with, state_change_samples, IrlError,
    ScoreFn, StateChangeSample, TrainConfig, TruncatedNormal,
};
use crate::kernelnet::KernelParameters;
use crate::numeric::{NumericError, OpKind, ParamId, Tape, Tensor};
use crate::rng;
use crate::simgen::{generate, Preset, SceneSpec, SimError};

#[derive(Debug, Error)]
pub enum GradcheckError {
    #[error("gradient check config: {0}")]
    Config(String),
    #[error("state change {0} has a frame without instances")]
    EmptySample(usize),
    #[error(transparent)]
    Irl(#[from] IrlError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Numeric(#[from] NumericError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckConfig {
    /// Relative error bound for the tape and training suites.
    pub tolerance: f64,
    /// Relative error bound for the score suite.
    pub score_tolerance: f64,
    /// Random parameter draws for the training suite.
    pub settings: usize,
    /// State changes checked per parameter draw.
    pub samples: usize,
    pub hidden_dim: usize,
    pub layers: usize,
    pub top_p: usize,
    pub lambda: f64,
    pub sigma0: f64,
    /// Monte-Carlo draws, shared by the partition and its gradient.
    pub draws: usize,
    /// Step along the unit direction; Richardson also evaluates half of it.
    pub step: f64,
    pub seed: u64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        let train = TrainConfig::default();
        GradcheckConfig {
            tolerance: 1e-4,
            score_tolerance: 1e-6,
            settings: 20,
            samples: 5,
            hidden_dim: train.hidden_dim,
            layers: train.layers,
            top_p: train.top_p,
            lambda: train.lambda,
            sigma0: train.sigma0,
            draws: train.s1,
            step: 1e-3,
            seed: 0,
        }
    }
}

impl GradcheckConfig {
    fn validate(&self) -> Result<(), GradcheckError> {
        let bad = |m: &str| Err(GradcheckError::Config(m.into()));
        if !(self.tolerance > 0.0 && self.score_tolerance > 0.0) {
            return bad("tolerances must be positive");
        }
        if self.settings == 0 || self.samples == 0 || self.draws == 0 {
            return bad("settings, samples and draws must be at least 1");
        }
        if !(self.step > 0.0 && self.step.is_finite()) {
            return bad("step must be positive");
        }
        Ok(())
    }
}

/// Outcome of one suite.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub name: String,
    pub tolerance: f64,
    pub checks: usize,
    pub max_rel_err: f64,
    /// Worst relative error per op or case group.
    pub breakdown: Vec<(String, f64)>,
    pub passed: bool,
}

impl SuiteReport {
    fn new(name: &str, tolerance: f64, checks: usize, breakdown: Vec<(String, f64)>) -> Self {
        let max_rel_err = breakdown.iter().map(|b| b.1).fold(0.0, f64::max);
        let all_finite = breakdown.iter().all(|b| b.1.is_finite());
        SuiteReport {
            name: name.into(),
            tolerance,
            checks,
            max_rel_err,
            breakdown,
            passed: all_finite && max_rel_err < tolerance,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub suites: Vec<SuiteReport>,
    pub passed: bool,
}

impl fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for s in &self.suites {
            writeln!(
                f,
                "{} {:<18} max rel err {:.3e} (tol {:.0e}, {} checks)",
                if s.passed { "PASS" } else { "FAIL" },
                s.name,
                s.max_rel_err,
                s.tolerance,
                s.checks
            )?;
            for (op, err) in &s.breakdown {
                writeln!(f, "       {op:<16} {err:.3e}")?;
            }
        }
        write!(f, "{}", if self.passed { "all suites passed" } else { "some suites failed" })
    }
}

fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor);
    if err.is_nan() {
        f64::INFINITY
    } else {
        err
    }
}

/// Fourth-order central difference: Richardson extrapolation of the steps
/// `h` and `h/2`.
fn richardson(f: impl Fn(f64) -> Result<f64, GradcheckError>, h: f64) -> Result<f64, GradcheckError> {
    let central = |h: f64| -> Result<f64, GradcheckError> { Ok((f(h)? - f(-h)?) / (2.0 * h)) };
    let coarse = central(h)?;
    let fine = central(0.5 * h)?;
    Ok((4.0 * fine - coarse) / 3.0)
}

/// Runs every suite with the crate's own score function.
pub fn run(cfg: &GradcheckConfig) -> Result<GradcheckReport, GradcheckError> {
    run_with(cfg, grad_log_truncnorm)
}

/// Runs every suite with `score` standing in for the truncated-normal score.
pub fn run_with(cfg: &GradcheckConfig, score: ScoreFn) -> Result<GradcheckReport, GradcheckError> {
    cfg.validate()?;
    let suites = vec![tape_suite(cfg)?, score_suite(cfg, score)?, training_suite(cfg, score)?];
    let passed = suites.iter().all(|s| s.passed);
    Ok(GradcheckReport { suites, passed })
}

/// Every tape op against finite differences of `Σ w ⊙ op(x, y)`.
pub fn tape_suite(cfg: &GradcheckConfig) -> Result<SuiteReport, GradcheckError> {
    let ops: Vec<(OpKind<f64>, [usize; 2], Option<[usize; 2]>)> = vec![
        (OpKind::MatMul, [3, 4], Some([4, 2])),
        (OpKind::Add, [3, 4], Some([3, 4])),
        (OpKind::AddRow, [3, 4], Some([1, 4])),
        (OpKind::Sub, [3, 4], Some([3, 4])),
        (OpKind::Mul, [3, 4], Some([3, 4])),
        (OpKind::Affine { scale: 1.7, shift: -0.3 }, [3, 4], None),
        (OpKind::Sigmoid, [3, 4], None),
        (OpKind::Tanh, [3, 4], None),
        (OpKind::Softmax, [5, 1], None),
        (OpKind::Sum, [3, 4], None),
        (OpKind::Concat, [3, 4], Some([3, 2])),
        (OpKind::L2Norm, [3, 4], None),
        (OpKind::Transpose, [3, 4], None),
    ];
    let mut rng = rng::stream(&[cfg.seed, 0x7a9e]);
    let mut random = |shape: [usize; 2]| -> Tensor {
        let data = (0..shape[0] * shape[1]).map(|_| rng.random_range(-1.5..1.5)).collect();
        Tensor::matrix(shape[0], shape[1], data).expect("shape matches data")
    };

    let mut breakdown = Vec::new();
    let mut checks = 0;
    for (kind, a_shape, b_shape) in ops {
        let mut inputs = vec![random(a_shape)];
        if let Some(s) = b_shape {
            inputs.push(random(s));
        }
        let probe = {
            let mut tape = Tape::new();
            let vars: Vec<_> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
            let out = tape.apply(kind, &vars)?;
            tape.value(out).shape().to_vec()
        };
        let weights = random([probe[0], probe[1]]);

        let objective = |inputs: &[Tensor]| -> Result<f64, GradcheckError> {
            let mut tape = Tape::new();
            let vars: Vec<_> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
            let out = tape.apply(kind, &vars)?;
            Ok(tape.value(out).dot(&weights))
        };
        let mut tape = Tape::new();
        let vars: Vec<_> = inputs.iter().map(|t| tape.param(t.clone())).collect();
        let out = tape.apply(kind, &vars)?;
        let w = tape.constant(weights.clone());
        let weighted = tape.mul(out, w)?;
        let total = tape.sum(weighted)?;
        let grads = tape.backward(total, 1.0)?;

        let mut worst: f64 = 0.0;
        for (which, input) in inputs.iter().enumerate() {
            for k in 0..input.len() {
                let analytic = grads.param(ParamId(which)).data()[k];
                let numeric = richardson(
                    |h| {
                        let mut shifted = inputs.clone();
                        shifted[which].data_mut()[k] += h;
                        objective(&shifted)
                    },
                    1e-3,
                )?;
                worst = worst.max(rel_err(analytic, numeric, 1e-6));
                checks += 1;
            }
        }
        breakdown.push((kind.name().to_string(), worst));
    }
    Ok(SuiteReport::new("tape_ops", cfg.tolerance, checks, breakdown))
}

/// `score(r, μ, σ0)` against finite differences in `μ` of the closed-form
/// truncated log-density, over a grid of means, widths and points.
pub fn score_suite(cfg: &GradcheckConfig, score: ScoreFn) -> Result<SuiteReport, GradcheckError> {
    let mut breakdown = Vec::new();
    let mut checks = 0;
    for sigma in [0.1, 0.3, 0.55, 1.0, 2.0] {
        let mut worst: f64 = 0.0;
        for i in 0..19 {
            let mu = -0.9 + 0.1 * i as f64;
            for r in [-0.95, -0.5, 0.0, 0.4, 0.9] {
                let analytic = score(r, mu, sigma)?;
                let numeric = richardson(|h| Ok(TruncatedNormal::new(mu + h, sigma)?.ln_pdf(r)), 1e-3)?;
                worst = worst.max(rel_err(analytic, numeric, 1.0));
                checks += 1;
            }
        }
        breakdown.push((format!("sigma0={sigma}"), worst));
    }
    Ok(SuiteReport::new("truncnorm_score", cfg.score_tolerance, checks, breakdown))
}

/// Frozen-draw objective `r*(θ) − ln Ẑ(θ)`. The draws came from the expert
/// model centred on `mu0`; moving the centre reweights them by the density
/// ratio, so `Ẑ` stays a smooth function of `θ`.
fn frozen_loss(
    sample: &StateChangeSample<'_>,
    params: &KernelParameters,
    ctx: &crate::irl::SampleContext,
    draws: &[f64],
    mu0: f64,
) -> Result<f64, GradcheckError> {
    let terms = reward_terms(sample, params, ctx)?.ok_or(GradcheckError::EmptySample(sample.step))?;
    let sigma0 = ctx.model.sigma0;
    let base = TruncatedNormal::new(mu0, sigma0)?;
    let moved = TruncatedNormal::new(terms.r_star, sigma0)?;
    let z = draws
        .iter()
        .map(|&r| (r + moved.ln_pdf(r) - base.ln_pdf(r)).exp())
        .sum::<f64>()
        / draws.len() as f64;
    Ok(terms.r_star - z.ln())
}

fn shifted(params: &KernelParameters, direction: &[Tensor], h: f64) -> KernelParameters {
    let mut out = params.clone();
    for (t, d) in out.tensors_mut().into_iter().zip(direction) {
        for (x, dx) in t.data_mut().iter_mut().zip(d.data()) {
            *x += h * dx;
        }
    }
    out
}

/// The per-sample ascent gradient against directional finite differences of
/// the frozen-draw objective, over random parameters and state changes of a
/// generated demonstration.
pub fn training_suite(cfg: &GradcheckConfig, score: ScoreFn) -> Result<SuiteReport, GradcheckError> {
    let trace = generate(&SceneSpec::preset(Preset::Sorting, cfg.seed))?.trace;
    let traces = std::slice::from_ref(&trace);
    let all = state_change_samples(traces);
    let n = cfg.samples.min(all.len());
    let picked: Vec<_> = (0..n).map(|i| all[i * (all.len() - 1) / (n - 1).max(1)]).collect();

    let train = TrainConfig {
        hidden_dim: cfg.hidden_dim,
        layers: cfg.layers,
        top_p: cfg.top_p,
        lambda: cfg.lambda,
        sigma0: cfg.sigma0,
        s1: cfg.draws,
        s2: cfg.draws,
        seed: cfg.seed,
        ..TrainConfig::default()
    };
    train.validate()?;
    let descriptor_dim = trace.frames[0][0].descriptor.len();

    let mut breakdown = Vec::new();
    let mut checks = 0;
    for setting in 0..cfg.settings {
        let params = KernelParameters::init(
            train.kernel_config(descriptor_dim),
            rng::stream_seed(&[cfg.seed, 0x9c, setting as u64]),
        )
        .map_err(IrlError::from)?;
        let probe_ctx = train.context(1.0, 0);
        let mut deltas = Vec::new();
        for s in &picked {
            deltas.push(reward_terms(s, &params, &probe_ctx)?.ok_or(GradcheckError::EmptySample(s.step))?.delta);
        }
        let ctx = train.context(beta_from_deltas(&deltas), 0);

        let mut worst: f64 = 0.0;
        for sample in &picked {
            let outcome =
                sample_loss_grad_with(sample, &params, &ctx, score)?.ok_or(GradcheckError::EmptySample(sample.step))?;
            let mut dir_rng = rng::stream(&[cfg.seed, 0xd1, setting as u64, sample.step as u64]);
            let mut direction: Vec<Tensor> = params
                .tensors()
                .iter()
                .map(|t| {
                    let data = (0..t.len()).map(|_| dir_rng.sample::<f64, _>(StandardNormal)).collect();
                    Tensor::new(t.shape().to_vec(), data).expect("shape matches data")
                })
                .collect();
            let norm = direction.iter().map(|d| d.dot(d)).sum::<f64>().sqrt();
            direction.iter_mut().for_each(|d| d.scale_assign(1.0 / norm));

            let analytic: f64 = outcome.gradients.iter().zip(&direction).map(|(g, d)| g.dot(d)).sum();
            let draws = outcome.draws.partition.clone();
            let mu0 = outcome.terms.r_star;
            let numeric = richardson(
                |h| frozen_loss(sample, &shifted(&params, &direction, h), &ctx, &draws, mu0),
                cfg.step,
            )?;
            worst = worst.max(rel_err(analytic, numeric, 1e-8));
            checks += 1;
        }
        breakdown.push((format!("setting {setting}"), worst));
    }
    Ok(SuiteReport::new("training_gradient", cfg.tolerance, checks, breakdown))
}
