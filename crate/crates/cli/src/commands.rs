use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use geokernel::gradcheck::{self, GradcheckConfig};
use geokernel::irl::{init_state, train_from, BetaSetting, IrlError, TrainCheckpoint, TrainConfig, TrainState};
use geokernel::kernelnet::{KernelCheckpoint, KernelEnsemble, KernelParameters};
use geokernel::simgen::{
    generate_batch, oracle_eval, pooled_accuracy, read_traces, write_traces, LabeledTrace, OracleMetrics, SceneSpec,
};
use serde::Serialize;
use serde_json::json;

use crate::error::CliError;
use crate::manifest::{self, InputFile, RunManifest};
use crate::svg::{self, Shown};
use crate::{EvalArgs, GenArgs, GradcheckArgs, InferArgs, Overrides, TrainArgs};

/// Prints to stdout; a closed pipe is not an error.
fn emit(text: &str) -> Result<(), CliError> {
    use std::io::Write;
    let mut out = std::io::stdout().lock();
    match writeln!(out, "{text}").and_then(|()| out.flush()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(CliError::Runtime(format!("stdout: {e}"))),
        _ => Ok(()),
    }
}

fn read_text(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

fn parse_json<T: serde::de::DeserializeOwned>(path: &Path, text: &str) -> Result<T, CliError> {
    serde_json::from_str(text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

fn write_file(path: &Path, contents: &[u8]) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    std::fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

fn traces_from_bytes(path: &Path, bytes: &[u8]) -> Result<Vec<LabeledTrace>, CliError> {
    read_traces(bytes).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

fn load_traces(path: &Path) -> Result<Vec<LabeledTrace>, CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    traces_from_bytes(path, &bytes)
}

/// A kernel checkpoint, or the kernel inside a training checkpoint along
/// with the config it was trained under.
fn load_kernel(path: &Path) -> Result<(KernelParameters, Option<TrainConfig>), CliError> {
    let text = read_text(path)?;
    if let Ok(ck) = KernelCheckpoint::from_json(&text) {
        return Ok((ck.to_params()?, None));
    }
    match TrainCheckpoint::from_json(&text) {
        Ok(ck) => Ok((ck.kernel.to_params()?, Some(ck.config))),
        Err(e) => Err(CliError::Usage(format!("{}: not a checkpoint ({e})", path.display()))),
    }
}

fn apply_overrides(cfg: &mut TrainConfig, ov: &Overrides) -> Result<(), CliError> {
    if let Some(v) = ov.seed {
        cfg.seed = v;
    }
    if let Some(v) = ov.lambda {
        cfg.lambda = v;
    }
    if let Some(v) = ov.sigma0 {
        cfg.sigma0 = v;
    }
    if let Some(v) = &ov.beta {
        cfg.beta = v.parse::<BetaSetting>().map_err(CliError::Usage)?;
    }
    if let Some(v) = ov.hidden_dim {
        cfg.hidden_dim = v;
    }
    if let Some(v) = ov.layers {
        cfg.layers = v;
    }
    if let Some(v) = ov.top_p {
        cfg.top_p = v;
    }
    if let Some(v) = ov.cap {
        cfg.cap = v;
    }
    if let Some(v) = ov.epochs {
        cfg.epochs = v;
    }
    cfg.validate()?;
    Ok(())
}

pub fn gen(args: GenArgs) -> Result<(), CliError> {
    let mut specs = match (&args.spec, &args.preset) {
        (Some(path), _) => {
            let text = read_text(path)?;
            let value: serde_json::Value = parse_json(path, &text)?;
            let docs = match value {
                serde_json::Value::Array(items) => items,
                other => vec![other],
            };
            docs.iter()
                .map(|d| SceneSpec::from_json(&d.to_string()))
                .collect::<Result<Vec<_>, _>>()?
        }
        (None, Some(preset)) => vec![SceneSpec::from_json(&json!({ "preset": preset }).to_string())?],
        (None, None) => return Err(CliError::Usage("either --spec or --preset is required".into())),
    };
    if args.count == 0 {
        return Err(CliError::Usage("--count must be at least 1".into()));
    }
    if let Some(seed) = args.seed {
        specs.iter_mut().for_each(|s| s.seed = seed);
    }
    let mut all = Vec::new();
    for spec in &specs {
        for k in 0..args.count {
            let mut s = spec.clone();
            s.seed = spec.seed.wrapping_add(k as u64);
            s.trace_id = all.len() as u32;
            all.push(s);
        }
    }
    let traces = generate_batch(&all)?;
    let mut buf = Vec::new();
    write_traces(&traces, &mut buf)?;
    write_file(&args.out, &buf)?;
    let frames: usize = traces.iter().map(LabeledTrace::frames).sum();
    eprintln!("wrote {} trace(s), {frames} frames, to {}", traces.len(), args.out.display());
    Ok(())
}

fn has_labels(traces: &[LabeledTrace]) -> bool {
    traces.iter().any(|t| t.labels.iter().any(|l| !l.is_empty()))
}

fn metrics_csv(state: &TrainState) -> String {
    let mut s = String::from("epoch,loss,mean_RSW,top1_accuracy\n");
    for m in &state.history {
        let acc = m.top1_accuracy.map(|a| a.to_string()).unwrap_or_default();
        let _ = writeln!(s, "{},{},{},{acc}", m.epoch, m.loss, m.mean_rsw);
    }
    s
}

fn save_run(out: &Path, state: &TrainState, cfg: &TrainConfig, manifest: &RunManifest) -> Result<(), CliError> {
    let hash = manifest::config_hash(cfg);
    let ck = TrainCheckpoint::new(state, cfg, &hash);
    write_file(&out.join(manifest::CHECKPOINT_FILE), ck.to_json().as_bytes())?;
    write_file(&out.join(manifest::KERNEL_FILE), ck.kernel.to_json().as_bytes())?;
    write_file(&out.join(manifest::METRICS_FILE), metrics_csv(state).as_bytes())?;
    write_file(&out.join(manifest::MANIFEST_FILE), manifest.to_json().as_bytes())
}

pub fn train(args: TrainArgs) -> Result<(), CliError> {
    let mut trace_inputs = Vec::new();
    let mut traces = Vec::new();
    let (cfg, resume) = if let Some(path) = &args.from_manifest {
        let m = RunManifest::load(path)?;
        for input in &m.traces {
            let bytes = input.verify()?;
            traces.extend(traces_from_bytes(&input.path, &bytes)?);
            trace_inputs.push(input.clone());
        }
        let resume = match &m.resume {
            Some(r) => {
                let bytes = r.verify()?;
                Some((r.clone(), String::from_utf8_lossy(&bytes).into_owned()))
            }
            None => None,
        };
        let mut cfg = m.config.clone();
        apply_overrides(&mut cfg, &args.overrides)?;
        (cfg, resume)
    } else {
        for path in &args.traces {
            let (input, bytes) = InputFile::read(path)?;
            traces.extend(traces_from_bytes(path, &bytes)?);
            trace_inputs.push(input);
        }
        let resume = match &args.resume {
            Some(path) => {
                let (input, bytes) = InputFile::read(path)?;
                Some((input, String::from_utf8_lossy(&bytes).into_owned()))
            }
            None => None,
        };
        let mut cfg = match (&args.config, &resume) {
            (Some(path), _) => parse_json(path, &read_text(path)?)?,
            (None, Some((_, text))) => TrainCheckpoint::from_json(text)?.config,
            (None, None) => TrainConfig::default(),
        };
        apply_overrides(&mut cfg, &args.overrides)?;
        (cfg, resume)
    };

    let plain: Vec<_> = traces.iter().map(|t| t.trace.clone()).collect();
    let state = match &resume {
        Some((_, text)) => TrainCheckpoint::from_json(text)?.to_state()?,
        None => init_state(&plain, &cfg)?,
    };
    let manifest = RunManifest::new(cfg.clone(), trace_inputs, resume.map(|r| r.0));

    let labeled = has_labels(&traces);
    let observe = |s: &TrainState| -> Option<f64> {
        let acc = labeled.then(|| {
            let metrics: Vec<OracleMetrics> = traces
                .iter()
                .filter_map(|t| oracle_eval(&s.params, t, cfg.top_p, cfg.cap, cfg.seed).ok())
                .collect();
            pooled_accuracy(&metrics)
        });
        if let Some(m) = s.history.last() {
            eprintln!(
                "epoch {:>3}  loss {:.6}  mean_RSW {:.5}{}",
                m.epoch,
                m.loss,
                m.mean_rsw,
                acc.map(|a| format!("  top1 {a:.3}")).unwrap_or_default()
            );
        }
        acc
    };
    match train_from(state, &plain, &cfg, observe) {
        Ok(state) => {
            save_run(&args.out, &state, &cfg, &manifest)?;
            eprintln!("run written to {}", args.out.display());
            Ok(())
        }
        Err(IrlError::Diverged { epoch, state }) => {
            save_run(&args.out, &state, &cfg, &manifest)?;
            Err(CliError::Runtime(format!(
                "training diverged in epoch {epoch}; last finite state saved to {}",
                args.out.display()
            )))
        }
        Err(e) => Err(e.into()),
    }
}

#[derive(Serialize)]
struct TraceReport {
    file: PathBuf,
    trace_id: u32,
    frames: usize,
    top1_accuracy: f64,
    topp_hit_rate: f64,
    dropped_frame_accuracy: Option<f64>,
}

pub fn eval(args: EvalArgs) -> Result<(), CliError> {
    let (params, trained) = load_kernel(&args.checkpoint)?;
    let base = trained.unwrap_or_default();
    let top_p = args.overrides.top_p.unwrap_or(base.top_p);
    let cap = args.overrides.cap.unwrap_or(base.cap);
    let seed = args.overrides.seed.unwrap_or(base.seed);
    if top_p == 0 || cap == 0 {
        return Err(CliError::Usage("--top-p and --cap must be at least 1".into()));
    }

    let mut reports = Vec::new();
    let mut all = Vec::new();
    for path in &args.traces {
        for t in load_traces(path)? {
            if !has_labels(std::slice::from_ref(&t)) {
                return Err(CliError::Usage(format!(
                    "{}: trace {} has no labels to evaluate against",
                    path.display(),
                    t.trace.id
                )));
            }
            let m = oracle_eval(&params, &t, top_p, cap, seed)?;
            reports.push(TraceReport {
                file: path.clone(),
                trace_id: t.trace.id,
                frames: m.frames,
                top1_accuracy: m.top1_accuracy,
                topp_hit_rate: m.topp_hit_rate,
                dropped_frame_accuracy: m.dropped_frame_accuracy,
            });
            all.push(m);
        }
    }
    let frames: usize = all.iter().map(|m| m.frames).sum();
    let hits = all.iter().flat_map(|m| &m.per_frame).filter(|v| v.topp_hit).count();
    let dropped: Vec<_> = all.iter().flat_map(|m| &m.per_frame).filter(|v| v.dropped).collect();
    let report = json!({
        "checkpoint": args.checkpoint,
        "top_p": top_p,
        "frames": frames,
        "top1_accuracy": pooled_accuracy(&all),
        "topp_hit_rate": if frames == 0 { 0.0 } else { hits as f64 / frames as f64 },
        "dropped_frames": dropped.len(),
        "dropped_frame_accuracy": (!dropped.is_empty())
            .then(|| dropped.iter().filter(|v| v.top1_correct).count() as f64 / dropped.len() as f64),
        "traces": reports,
    });
    let text = serde_json::to_string_pretty(&report).expect("report serializes");
    if let Some(out) = &args.out {
        write_file(out, text.as_bytes())?;
    }
    emit(&text)
}

pub fn infer(args: InferArgs) -> Result<(), CliError> {
    let mut members = Vec::new();
    let mut base = TrainConfig::default();
    for (i, path) in args.checkpoints.iter().enumerate() {
        let (params, trained) = load_kernel(path)?;
        if let (0, Some(cfg)) = (i, trained) {
            base = cfg;
        }
        members.push(params);
    }
    let top_p = args.overrides.top_p.unwrap_or(base.top_p);
    let cap = args.overrides.cap.unwrap_or(base.cap);
    let seed = args.overrides.seed.unwrap_or(base.seed);
    if top_p == 0 || cap == 0 {
        return Err(CliError::Usage("--top-p and --cap must be at least 1".into()));
    }

    let traces = load_traces(&args.traces)?;
    let trace = traces
        .iter()
        .find(|t| t.trace.id == args.trace_id)
        .ok_or_else(|| CliError::Usage(format!("no trace {} in {}", args.trace_id, args.traces.display())))?;
    let frame = trace.trace.frames.get(args.frame).ok_or_else(|| {
        CliError::Usage(format!(
            "trace {} has {} frames, no frame {}",
            args.trace_id,
            trace.frames(),
            args.frame
        ))
    })?;

    let ensemble = KernelEnsemble::new(members);
    let out = ensemble.infer(frame, cap, top_p, seed)?;
    let mut kernels = Vec::new();
    let mut shown = Vec::new();
    for (kind, member) in &out.members {
        let Some(fo) = member else {
            kernels.push(json!({
                "kind": kind, "ec": vec![0.0; kind.template().error_dim],
                "associations": [], "instances": [],
            }));
            continue;
        };
        let associations: Vec<_> = fo
            .select
            .top
            .iter()
            .enumerate()
            .map(|(rank, &k)| {
                let inst = &fo.instances[k];
                json!({
                    "rank": rank, "ids": inst.ids, "g": fo.select.weights[k],
                    "relevance": inst.relevance, "error": inst.error,
                })
            })
            .collect();
        let instances: Vec<_> = fo
            .instances
            .iter()
            .zip(&fo.select.weights)
            .map(|(inst, g)| json!({ "ids": inst.ids, "g": g }))
            .collect();
        for &k in &fo.select.top {
            shown.push(Shown {
                kind: kind.as_str(),
                nodes: &fo.instances[k].nodes,
                weight: fo.select.weights[k],
            });
        }
        kernels.push(json!({
            "kind": kind, "ec": fo.ec, "rsw": fo.select.rsw, "capped": fo.capped,
            "associations": associations, "instances": instances,
        }));
    }
    let report = json!({
        "trace_id": args.trace_id,
        "frame_index": args.frame,
        "control_error": out.control_error,
        "kernels": kernels,
    });
    let text = serde_json::to_string_pretty(&report).expect("report serializes");
    if let Some(path) = &args.svg {
        write_file(path, svg::render(frame, &shown).as_bytes())?;
    }
    if let Some(path) = &args.out {
        write_file(path, text.as_bytes())?;
    }
    emit(&text)
}

pub fn gradcheck(args: GradcheckArgs) -> Result<(), CliError> {
    let mut cfg: GradcheckConfig = match &args.config {
        Some(path) => parse_json(path, &read_text(path)?)?,
        None => GradcheckConfig::default(),
    };
    let ov = &args.overrides;
    if ov.beta.is_some() || ov.cap.is_some() || ov.epochs.is_some() {
        return Err(CliError::Usage("gradcheck does not take --beta, --cap or --epochs".into()));
    }
    if let Some(v) = ov.seed {
        cfg.seed = v;
    }
    if let Some(v) = ov.lambda {
        cfg.lambda = v;
    }
    if let Some(v) = ov.sigma0 {
        cfg.sigma0 = v;
    }
    if let Some(v) = ov.hidden_dim {
        cfg.hidden_dim = v;
    }
    if let Some(v) = ov.layers {
        cfg.layers = v;
    }
    if let Some(v) = ov.top_p {
        cfg.top_p = v;
    }
    let report = gradcheck::run(&cfg)?;
    if let Some(path) = &args.out {
        write_file(path, serde_json::to_string_pretty(&report).expect("report serializes").as_bytes())?;
    }
    emit(&report.to_string())?;
    if report.passed {
        Ok(())
    } else {
        Err(CliError::Runtime("gradient check failed".into()))
    }
}
