//! JSON-lines trace files, one frame per line:
//! `{"trace_id", "frame_index", "features": [{id, kind, descriptor, coords}], "labels", "dropped"}`.
//! Consecutive lines with the same `trace_id` form one trace.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use super::generate::LabeledTrace;
use super::SimError;
use crate::geometry::{Coords, FeatureId, GeometricFeature, PrimitiveKind};
use crate::irl::DemonstrationTrace;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FeatureRecord {
    id: FeatureId,
    kind: PrimitiveKind,
    descriptor: Vec<f64>,
    coords: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FrameRecord {
    #[serde(default)]
    trace_id: u32,
    frame_index: usize,
    features: Vec<FeatureRecord>,
    #[serde(default)]
    labels: Vec<Vec<FeatureId>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    dropped: Vec<FeatureId>,
}

pub fn write_traces<W: Write>(traces: &[LabeledTrace], mut out: W) -> Result<(), SimError> {
    for lt in traces {
        for (i, frame) in lt.trace.frames.iter().enumerate() {
            let record = FrameRecord {
                trace_id: lt.trace.id,
                frame_index: i,
                features: frame
                    .iter()
                    .map(|f| FeatureRecord {
                        id: f.id,
                        kind: f.kind(),
                        descriptor: f.descriptor.clone(),
                        coords: f.coords.to_flat(),
                    })
                    .collect(),
                labels: lt.labels.get(i).cloned().unwrap_or_default(),
                dropped: lt.dropped.get(i).cloned().unwrap_or_default(),
            };
            serde_json::to_writer(&mut out, &record).map_err(|e| SimError::Io(e.to_string()))?;
            out.write_all(b"\n").map_err(|e| SimError::Io(e.to_string()))?;
        }
    }
    out.flush().map_err(|e| SimError::Io(e.to_string()))
}

pub fn read_traces<R: BufRead>(input: R) -> Result<Vec<LabeledTrace>, SimError> {
    let mut traces: Vec<LabeledTrace> = Vec::new();
    for (n, line) in input.lines().enumerate() {
        let line_no = n + 1;
        let line = line.map_err(|e| SimError::Io(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse = |msg: String| SimError::Parse { line: line_no, msg };
        let record: FrameRecord = serde_json::from_str(&line).map_err(|e| parse(e.to_string()))?;

        let mut frame = Vec::with_capacity(record.features.len());
        for f in record.features {
            let coords = Coords::from_flat(f.kind, &f.coords).ok_or_else(|| {
                parse(format!("feature {}: {} coords do not fit kind {}", f.id, f.coords.len(), f.kind))
            })?;
            frame.push(GeometricFeature {
                id: f.id,
                descriptor: f.descriptor,
                coords,
            });
        }
        for label in &record.labels {
            if let Some(id) = label.iter().find(|id| !frame.iter().any(|f| f.id == **id)) {
                return Err(parse(format!("label references id {id} absent from the frame")));
            }
        }

        let same_trace = traces.last().is_some_and(|t| t.trace.id == record.trace_id);
        if !same_trace {
            traces.push(LabeledTrace {
                trace: DemonstrationTrace {
                    id: record.trace_id,
                    frames: Vec::new(),
                },
                labels: Vec::new(),
                dropped: Vec::new(),
            });
        }
        let current = traces.last_mut().expect("just pushed");
        if record.frame_index != current.frames() {
            return Err(parse(format!(
                "expected frame_index {}, found {}",
                current.frames(),
                record.frame_index
            )));
        }
        current.trace.frames.push(frame);
        current.labels.push(record.labels);
        current.dropped.push(record.dropped);
    }
    Ok(traces)
}

pub fn write_traces_to_string(traces: &[LabeledTrace]) -> String {
    let mut buf = Vec::new();
    write_traces(traces, &mut buf).expect("in-memory write");
    String::from_utf8(buf).expect("JSON is UTF-8")
}
