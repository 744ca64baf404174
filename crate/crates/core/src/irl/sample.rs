use super::expert::{grad_partition_with, partition_estimate, Draws, ExpertModel, ScoreFn};
use super::reward::{regularized_reward, reward, reward_slope};
use super::truncnorm::grad_log_truncnorm;
use super::IrlError;
use crate::geometry::GeometricFeature;
use crate::kernelnet::{build_frame_graph, enumerate_instances, FrameGraph, KernelError, KernelParameters};
use crate::numeric::{Gradients, Tape, Tensor};
use crate::rng;

const ENUM_STREAM: u64 = 0x656e_756d;
const DRAW_STREAM: u64 = 0x6472_6177;

pub type Frame = Vec<GeometricFeature>;

/// One demonstration: a time-ordered sequence of observed frames.
#[derive(Clone, Debug, PartialEq)]
pub struct DemonstrationTrace {
    pub id: u32,
    pub frames: Vec<Frame>,
}

/// Two consecutive frames of one trace.
#[derive(Clone, Copy, Debug)]
pub struct StateChangeSample<'a> {
    pub before: &'a [GeometricFeature],
    pub after: &'a [GeometricFeature],
    pub trace_id: u32,
    pub step: usize,
}

pub fn state_change_samples(traces: &[DemonstrationTrace]) -> Vec<StateChangeSample<'_>> {
    traces
        .iter()
        .flat_map(|t| {
            t.frames.windows(2).enumerate().map(move |(step, w)| StateChangeSample {
                before: &w[0],
                after: &w[1],
                trace_id: t.id,
                step,
            })
        })
        .collect()
}

/// Everything besides the parameters that a sample evaluation depends on.
#[derive(Clone, Debug)]
pub struct SampleContext {
    pub model: ExpertModel,
    pub top_p: usize,
    pub cap: usize,
    pub epoch: u64,
}

impl SampleContext {
    fn enumeration_seed(&self, trace_id: u32, frame: usize) -> u64 {
        rng::stream_seed(&[self.model.seed, ENUM_STREAM, trace_id as u64, frame as u64])
    }
}

/// Forward quantities of one state change.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RewardTerms {
    /// `‖Ec_{t+1}‖ − ‖Ec_t‖`.
    pub delta: f64,
    pub reward: f64,
    pub rsw: [f64; 2],
    /// Regularized, clamped reward.
    pub r_star: f64,
    /// Whether the clamp was inactive, so `r*` depends on the parameters.
    pub active: bool,
}

#[derive(Clone, Debug)]
pub struct SampleOutcome {
    pub terms: RewardTerms,
    /// `r* − ln Ẑ`.
    pub loss: f64,
    pub z: f64,
    pub grad_z: f64,
    /// `1 − ∇Ẑ/Ẑ`.
    pub multiplier: f64,
    pub draws: Draws,
    /// Ascent direction `multiplier · ∇θ r*`.
    pub gradients: Gradients,
}

struct FramePass {
    tape: Tape,
    graph: FrameGraph,
}

fn frame_pass(
    frame: &[GeometricFeature],
    params: &KernelParameters,
    ctx: &SampleContext,
    seed: u64,
) -> Result<Option<FramePass>, KernelError> {
    let template = params.config.kind.template();
    let en = enumerate_instances(frame, &template, ctx.cap, seed)?;
    if en.instances.is_empty() {
        return Ok(None);
    }
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let graph = build_frame_graph(&mut tape, params, &bound, frame, &en.instances, ctx.top_p)?;
    Ok(Some(FramePass { tape, graph }))
}

fn both_frames(
    sample: &StateChangeSample<'_>,
    params: &KernelParameters,
    ctx: &SampleContext,
) -> Result<Option<(FramePass, FramePass)>, IrlError> {
    let (a, b) = rayon::join(
        || frame_pass(sample.before, params, ctx, ctx.enumeration_seed(sample.trace_id, sample.step)),
        || frame_pass(sample.after, params, ctx, ctx.enumeration_seed(sample.trace_id, sample.step + 1)),
    );
    match (a?, b?) {
        (Some(a), Some(b)) => Ok(Some((a, b))),
        _ => {
            log::warn!(
                "trace {} step {}: frame without instances, sample skipped",
                sample.trace_id,
                sample.step
            );
            Ok(None)
        }
    }
}

fn terms_of(before: &FramePass, after: &FramePass, model: &ExpertModel) -> RewardTerms {
    let n0 = before.tape.value(before.graph.ec_norm).item();
    let n1 = after.tape.value(after.graph.ec_norm).item();
    let delta = n1 - n0;
    let r = reward(delta, model.beta);
    let rsw = [
        before.tape.value(before.graph.rsw).item(),
        after.tape.value(after.graph.rsw).item(),
    ];
    let raw = r - model.lambda * 0.5 * (rsw[0] + rsw[1]);
    RewardTerms {
        delta,
        reward: r,
        rsw,
        r_star: regularized_reward(r, rsw[0], rsw[1], model.lambda),
        active: raw.abs() <= 1.0,
    }
}

/// Forward pass only: the regularized reward of one state change.
pub fn reward_terms(
    sample: &StateChangeSample<'_>,
    params: &KernelParameters,
    ctx: &SampleContext,
) -> Result<Option<RewardTerms>, IrlError> {
    Ok(both_frames(sample, params, ctx)?.map(|(a, b)| terms_of(&a, &b, &ctx.model)))
}

/// Loss term and ascent gradient of one state change. `None` when either
/// frame has no instance.
pub fn sample_loss_grad(
    sample: &StateChangeSample<'_>,
    params: &KernelParameters,
    ctx: &SampleContext,
) -> Result<Option<SampleOutcome>, IrlError> {
    sample_loss_grad_with(sample, params, ctx, grad_log_truncnorm)
}

pub fn sample_loss_grad_with(
    sample: &StateChangeSample<'_>,
    params: &KernelParameters,
    ctx: &SampleContext,
    score: ScoreFn,
) -> Result<Option<SampleOutcome>, IrlError> {
    let Some((before, after)) = both_frames(sample, params, ctx)? else {
        return Ok(None);
    };
    let model = &ctx.model;
    let terms = terms_of(&before, &after, model);

    let mut draw_rng = rng::stream(&[
        model.seed,
        DRAW_STREAM,
        sample.trace_id as u64,
        sample.step as u64,
        ctx.epoch,
    ]);
    let (z, draws) = partition_estimate(terms.r_star, model, &mut draw_rng)?;
    let grad_z = grad_partition_with(terms.r_star, model.sigma0, draws.for_gradient(), score)?;
    let multiplier = 1.0 - grad_z / z;
    let loss = terms.r_star - z.ln();

    let shapes: Vec<Vec<usize>> = params.tensors().iter().map(|t| t.shape().to_vec()).collect();
    let mut gradients = Gradients::zeros_like(&shapes.iter().map(Vec::as_slice).collect::<Vec<_>>());
    if terms.active {
        let slope = multiplier * reward_slope(terms.delta, model.beta);
        let rsw_seed = Tensor::scalar(-multiplier * model.lambda * 0.5);
        let seeds = |pass: &FramePass, norm_seed: f64| {
            pass.tape.backward_from(&[
                (pass.graph.ec_norm, Tensor::scalar(norm_seed)),
                (pass.graph.rsw, rsw_seed.clone()),
            ])
        };
        let (g0, g1) = rayon::join(|| seeds(&before, -slope), || seeds(&after, slope));
        gradients.accumulate(&g0?);
        gradients.accumulate(&g1?);
    }
    Ok(Some(SampleOutcome {
        terms,
        loss,
        z,
        grad_z,
        multiplier,
        draws,
        gradients,
    }))
}

/// Median-based reward scale: the median `|Δ‖Ec‖|` over all state changes
/// maps to a reward of ±0.5.
pub fn beta_from_deltas(deltas: &[f64]) -> f64 {
    let mut abs: Vec<f64> = deltas.iter().map(|d| d.abs()).filter(|d| d.is_finite()).collect();
    if abs.is_empty() {
        return 1.0;
    }
    abs.sort_by(f64::total_cmp);
    let n = abs.len();
    let median = if n % 2 == 1 {
        abs[n / 2]
    } else {
        0.5 * (abs[n / 2 - 1] + abs[n / 2])
    };
    if median > 0.0 {
        3f64.ln() / median
    } else {
        1.0
    }
}

/// `β` for `params` over every state change of `traces`.
pub fn compute_beta(
    traces: &[DemonstrationTrace],
    params: &KernelParameters,
    ctx: &SampleContext,
) -> Result<f64, IrlError> {
    if traces.iter().all(|t| t.frames.is_empty()) {
        return Err(IrlError::NoSamples);
    }
    let mut deltas = Vec::new();
    for sample in state_change_samples(traces) {
        if let Some(t) = reward_terms(&sample, params, ctx)? {
            deltas.push(t.delta);
        }
    }
    Ok(beta_from_deltas(&deltas))
}
