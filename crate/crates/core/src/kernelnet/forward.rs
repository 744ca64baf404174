//! Message passing over a frame's instances, batched: row `i` of every node
//! matrix belongs to instance `i`.

use super::params::{BoundParams, KernelParameters, ScoreInput};
use super::select::{residual, top_indices, SelectOutResult};
use super::{enumerate_instances, GraphInstance, KernelError, Stage};
use crate::geometry::GeometricFeature;
use crate::numeric::{NumericError, Tape, Tensor, Var};
use crate::Scalar;

/// Tape handles of one frame's select-out pipeline.
#[derive(Clone, Debug)]
pub struct FrameGraph {
    /// Readout logits, `[m×1]`.
    pub logits: Var,
    /// `σ(logit)`, `[m×1]`.
    pub relevance: Var,
    /// Select-out weights `g`, `[m×1]`.
    pub weights: Var,
    /// Aggregate control error, `[1×d]`.
    pub ec: Var,
    /// `‖Ec‖`, `[1×1]`.
    pub ec_norm: Var,
    /// Residual sum of weights outside the top `p`, `[1×1]`.
    pub rsw: Var,
    pub top: Vec<usize>,
}

fn at<T>(stage: Stage) -> impl FnOnce(NumericError) -> KernelError {
    move |source| KernelError::Numeric { stage, source }
}

/// Node-state matrices after `T` rounds of message passing, one `[m×h]`
/// matrix per template node.
fn propagate<T: Scalar>(
    tape: &mut Tape<T>,
    params: &KernelParameters<T>,
    bound: &BoundParams,
    frame: &[GeometricFeature<T>],
    instances: &[GraphInstance<T>],
) -> Result<Vec<Var>, KernelError> {
    let cfg = &params.config;
    let template = cfg.kind.template();
    let m = instances.len();
    let d = cfg.descriptor_dim;

    let mut states = Vec::with_capacity(template.arity());
    for role in 0..template.arity() {
        let mut data = Vec::with_capacity(m * d);
        for inst in instances {
            let desc = &frame[inst.nodes[role]].descriptor;
            if desc.len() != d {
                return Err(KernelError::DescriptorDim {
                    expected: d,
                    got: desc.len(),
                });
            }
            data.extend_from_slice(desc);
        }
        let x = tape.constant(Tensor::matrix(m, d, data).expect("row-major descriptors"));
        let pre = tape
            .linear(x, bound.embed.0, bound.embed.1)
            .map_err(at::<T>(Stage::Embedding))?;
        states.push(tape.tanh(pre).map_err(at::<T>(Stage::Embedding))?);
    }

    let neighbours: Vec<Vec<usize>> = (0..template.arity()).map(|j| template.neighbours(j)).collect();
    let [[zx, zh, zb], [rx, rh, rb], [nx, nh, nb]] = bound.gru;
    for layer in 0..cfg.layers {
        let err = |e| KernelError::Numeric {
            stage: Stage::Layer(layer),
            source: e,
        };
        let mut next = Vec::with_capacity(states.len());
        for (j, senders) in neighbours.iter().enumerate() {
            let hj = states[j];
            // m_j = Σ_i M(h_i, h_j); isolated nodes receive a zero message.
            let mut incoming: Option<Var> = None;
            for &i in senders {
                let pair = tape.concat(states[i], hj).map_err(err)?;
                let pre = tape.linear(pair, bound.message.0, bound.message.1).map_err(err)?;
                let msg = tape.tanh(pre).map_err(err)?;
                incoming = Some(match incoming {
                    Some(acc) => tape.add(acc, msg).map_err(err)?,
                    None => msg,
                });
            }
            let mj = match incoming {
                Some(v) => v,
                None => tape.constant(Tensor::zeros(&[m, cfg.hidden_dim])),
            };

            let gate = |tape: &mut Tape<T>, wx: Var, wh: Var, b: Var, h: Var| -> Result<Var, NumericError> {
                let a = tape.matmul(mj, wx)?;
                let c = tape.matmul(h, wh)?;
                let s = tape.add(a, c)?;
                tape.add_row(s, b)
            };
            let z = gate(tape, zx, zh, zb, hj).map_err(err)?;
            let z = tape.sigmoid(z).map_err(err)?;
            let r = gate(tape, rx, rh, rb, hj).map_err(err)?;
            let r = tape.sigmoid(r).map_err(err)?;
            let rh_state = tape.mul(r, hj).map_err(err)?;
            let n = gate(tape, nx, nh, nb, rh_state).map_err(err)?;
            let n = tape.tanh(n).map_err(err)?;
            // h' = n + z ⊙ (h − n)
            let diff = tape.sub(hj, n).map_err(err)?;
            let gated = tape.mul(z, diff).map_err(err)?;
            next.push(tape.add(n, gated).map_err(err)?);
        }
        states = next;
    }
    Ok(states)
}

/// Readout logits `[m×1]` from final node states.
fn readout<T: Scalar>(
    tape: &mut Tape<T>,
    params: &KernelParameters<T>,
    bound: &BoundParams,
    states: &[Var],
) -> Result<Var, KernelError> {
    let err = at::<T>(Stage::Readout);
    let symmetric = params.config.kind.template().symmetric;
    let run = |tape: &mut Tape<T>| -> Result<Var, NumericError> {
        let mut x = states[0];
        for &s in &states[1..] {
            x = if symmetric { tape.add(x, s)? } else { tape.concat(x, s)? };
        }
        for &(w, b) in &bound.readout_hidden {
            let pre = tape.linear(x, w, b)?;
            x = tape.tanh(pre)?;
        }
        tape.linear(x, bound.readout.0, bound.readout.1)
    };
    run(tape).map_err(err)
}

/// Builds the full select-out pipeline of one frame on `tape`.
pub fn build_frame_graph<T: Scalar>(
    tape: &mut Tape<T>,
    params: &KernelParameters<T>,
    bound: &BoundParams,
    frame: &[GeometricFeature<T>],
    instances: &[GraphInstance<T>],
    top_p: usize,
) -> Result<FrameGraph, KernelError> {
    if instances.is_empty() {
        return Err(KernelError::NoInstances);
    }
    let d_err = params.config.kind.template().error_dim;
    let states = propagate(tape, params, bound, frame, instances)?;
    let logits = readout(tape, params, bound, &states)?;

    let err = at::<T>(Stage::SelectOut);
    let run = |tape: &mut Tape<T>| -> Result<FrameGraph, NumericError> {
        let relevance = tape.sigmoid(logits)?;
        let scores = match params.config.score_input {
            ScoreInput::Logit => logits,
            ScoreInput::Relevance => relevance,
        };
        let weights = tape.softmax(scores)?;
        let m = instances.len();
        let mut errors = Vec::with_capacity(m * d_err);
        for inst in instances {
            errors.extend_from_slice(&inst.error);
        }
        let e = tape.constant(Tensor::matrix(m, d_err, errors)?);
        let gt = tape.transpose(weights)?;
        let ec = tape.matmul(gt, e)?;
        let ec_norm = tape.l2_norm(ec)?;

        let top = top_indices(tape.value(weights).data(), top_p);
        let mut mask = vec![T::zero(); m];
        for &i in &top {
            mask[i] = T::one();
        }
        let mask = tape.constant(Tensor::column(mask));
        let kept = tape.mul(weights, mask)?;
        let kept = tape.sum(kept)?;
        let rsw = tape.affine(kept, -T::one(), T::one())?;
        Ok(FrameGraph {
            logits,
            relevance,
            weights,
            ec,
            ec_norm,
            rsw,
            top,
        })
    };
    run(tape).map_err(err)
}

/// Relevance `b` of a single instance.
pub fn message_pass<T: Scalar>(
    instance: &GraphInstance<T>,
    frame: &[GeometricFeature<T>],
    params: &KernelParameters<T>,
) -> Result<T, KernelError> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let states = propagate(&mut tape, params, &bound, frame, std::slice::from_ref(instance))?;
    let logit = readout(&mut tape, params, &bound, &states)?;
    let b = tape.sigmoid(logit).map_err(at::<T>(Stage::Readout))?;
    Ok(tape.value(b).item())
}

/// Forward result of one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameOutput<T = f64> {
    /// Aggregate control error `Ec`.
    pub ec: Vec<T>,
    pub select: SelectOutResult<T>,
    /// Instances with their relevance filled in.
    pub instances: Vec<GraphInstance<T>>,
    /// Whether enumeration hit the cap.
    pub capped: bool,
}

impl<T: Scalar> FrameOutput<T> {
    pub fn ec_norm(&self) -> T {
        crate::geometry::error_norm(&self.ec)
    }
}

/// Forward pass of the already enumerated `instances`.
pub fn evaluate_instances<T: Scalar>(
    frame: &[GeometricFeature<T>],
    mut instances: Vec<GraphInstance<T>>,
    params: &KernelParameters<T>,
    top_p: usize,
) -> Result<FrameOutput<T>, KernelError> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let graph = build_frame_graph(&mut tape, params, &bound, frame, &instances, top_p)?;
    let weights = tape.value(graph.weights).data().to_vec();
    let rsw = residual(&weights, &graph.top);
    for (inst, &b) in instances.iter_mut().zip(tape.value(graph.relevance).data()) {
        inst.relevance = Some(b);
    }
    Ok(FrameOutput {
        ec: tape.value(graph.ec).data().to_vec(),
        select: SelectOutResult {
            weights,
            top: graph.top,
            rsw,
        },
        instances,
        capped: false,
    })
}

/// Enumerate, score, normalize and aggregate one frame.
pub fn frame_control_error<T: Scalar>(
    frame: &[GeometricFeature<T>],
    params: &KernelParameters<T>,
    cap: usize,
    top_p: usize,
    seed: u64,
) -> Result<FrameOutput<T>, KernelError> {
    let template = params.config.kind.template();
    let en = enumerate_instances(frame, &template, cap, seed)?;
    let mut out = evaluate_instances(frame, en.instances, params, top_p)?;
    out.capped = en.capped;
    Ok(out)
}
