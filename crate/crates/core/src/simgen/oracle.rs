use serde::{Deserialize, Serialize};

use super::generate::LabeledTrace;
use super::SimError;
use crate::geometry::FeatureId;
use crate::kernelnet::{frame_control_error, KernelError, KernelParameters};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameVerdict {
    pub frame_index: usize,
    /// Ids of the heaviest instance, if the frame had any.
    pub top1: Option<Vec<FeatureId>>,
    pub top1_correct: bool,
    /// Some planted tuple is among the top `p`.
    pub topp_hit: bool,
    /// The frame had features hidden by occlusion or clipping.
    pub dropped: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleMetrics {
    pub frames: usize,
    pub top1_accuracy: f64,
    pub topp_hit_rate: f64,
    /// Share of frames with hidden features whose top instance is a visible
    /// planted tuple; `None` when no frame had hidden features.
    pub dropped_frame_accuracy: Option<f64>,
    pub per_frame: Vec<FrameVerdict>,
}

/// Scores per-frame instance rankings (heaviest first) against the labels.
/// Frames without instances or without a visible planted tuple count as
/// misses.
pub fn score_rankings(trace: &LabeledTrace, rankings: &[Vec<Vec<FeatureId>>], p: usize) -> OracleMetrics {
    let mut per_frame = Vec::with_capacity(rankings.len());
    for (i, ranked) in rankings.iter().enumerate() {
        let labels = trace.labels.get(i).map(Vec::as_slice).unwrap_or(&[]);
        let is_planted = |ids: &Vec<FeatureId>| labels.contains(ids);
        let top1 = ranked.first().cloned();
        per_frame.push(FrameVerdict {
            frame_index: i,
            top1_correct: top1.as_ref().is_some_and(is_planted),
            topp_hit: ranked.iter().take(p).any(is_planted),
            top1,
            dropped: trace.dropped.get(i).is_some_and(|d| !d.is_empty()),
        });
    }
    let frames = per_frame.len();
    let share = |n: usize, d: usize| if d == 0 { 0.0 } else { n as f64 / d as f64 };
    let dropped: Vec<&FrameVerdict> = per_frame.iter().filter(|v| v.dropped).collect();
    OracleMetrics {
        frames,
        top1_accuracy: share(per_frame.iter().filter(|v| v.top1_correct).count(), frames),
        topp_hit_rate: share(per_frame.iter().filter(|v| v.topp_hit).count(), frames),
        dropped_frame_accuracy: (!dropped.is_empty())
            .then(|| share(dropped.iter().filter(|v| v.top1_correct).count(), dropped.len())),
        per_frame,
    }
}

/// Top-`p` instance ids of every frame under `params`.
pub fn rank_frames(
    trace: &LabeledTrace,
    params: &KernelParameters,
    p: usize,
    cap: usize,
    seed: u64,
) -> Result<Vec<Vec<Vec<FeatureId>>>, SimError> {
    trace
        .trace
        .frames
        .iter()
        .map(|frame| match frame_control_error(frame, params, cap, p, seed) {
            Ok(out) => Ok(out
                .select
                .top
                .iter()
                .map(|&k| out.instances[k].ids.clone())
                .collect()),
            Err(KernelError::NoInstances) => Ok(Vec::new()),
            Err(e) => Err(SimError::Kernel(e)),
        })
        .collect()
}

/// Per-frame top-1 and top-`p` accuracy of a kernel on a labeled trace.
pub fn oracle_eval(
    params: &KernelParameters,
    trace: &LabeledTrace,
    p: usize,
    cap: usize,
    seed: u64,
) -> Result<OracleMetrics, SimError> {
    let rankings = rank_frames(trace, params, p, cap, seed)?;
    Ok(score_rankings(trace, &rankings, p))
}

/// Frame-weighted accuracy over several traces.
pub fn pooled_accuracy(metrics: &[OracleMetrics]) -> f64 {
    let frames: usize = metrics.iter().map(|m| m.frames).sum();
    let correct: usize = metrics
        .iter()
        .flat_map(|m| &m.per_frame)
        .filter(|v| v.top1_correct)
        .count();
    if frames == 0 {
        0.0
    } else {
        correct as f64 / frames as f64
    }
}
