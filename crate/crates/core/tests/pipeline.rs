use geokernel::geometry::{Coords, GeometricFeature, KernelKind};
use geokernel::irl::{init_state, train, train_from, TrainCheckpoint, TrainConfig};
use geokernel::kernelnet::{frame_control_error, KernelCheckpoint, KernelConfig, KernelEnsemble, KernelParameters};
use geokernel::simgen::{generate, oracle_eval, read_traces, write_traces_to_string, LabeledTrace, Preset, SceneSpec};
use geokernel::{Feature32, KernelParams32, KernelParams64};

fn short(preset: Preset, frames: usize) -> LabeledTrace {
    let mut spec = SceneSpec::preset(preset, 0);
    spec.frames = frames;
    generate(&spec).unwrap()
}

fn small_config(epochs: usize) -> TrainConfig {
    TrainConfig {
        hidden_dim: 12,
        layers: 3,
        s1: 16,
        s2: 16,
        epochs,
        plateau_tol: 0.0,
        lr: 0.01,
        ..TrainConfig::default()
    }
}

fn to_f32(frame: &[GeometricFeature]) -> Vec<Feature32> {
    frame
        .iter()
        .map(|f| {
            let desc = f.descriptor.iter().map(|&v| v as f32).collect();
            match f.coords {
                Coords::Point2d([x, y]) => GeometricFeature::point2d(f.id, desc, [x as f32, y as f32]),
                _ => panic!("only points expected"),
            }
        })
        .collect()
}

#[test]
fn traces_survive_a_file_round_trip_and_train_identically() {
    let trace = short(Preset::Sorting, 10);
    let text = write_traces_to_string(std::slice::from_ref(&trace));
    let back = read_traces(text.as_bytes()).unwrap();
    assert_eq!(back.len(), 1);
    let cfg = small_config(2);
    let a = train(std::slice::from_ref(&trace.trace), &cfg).unwrap();
    let b = train(std::slice::from_ref(&back[0].trace), &cfg).unwrap();
    assert_eq!(a.history, b.history);
    assert_eq!(a.params, b.params);
}

#[test]
fn checkpointed_training_resumes_where_it_stopped() {
    let trace = short(Preset::Sorting, 10).trace;
    let traces = std::slice::from_ref(&trace);
    let full = train(traces, &small_config(4)).unwrap();

    let half = train(traces, &small_config(2)).unwrap();
    let json = TrainCheckpoint::new(&half, &small_config(2), "cfg").to_json();
    let restored = TrainCheckpoint::from_json(&json).unwrap().to_state().unwrap();
    let resumed = train_from(restored, traces, &small_config(4), |_| None).unwrap();

    assert_eq!(resumed.history.len(), 4);
    for (x, y) in full.history.iter().zip(&resumed.history) {
        assert!((x.loss - y.loss).abs() <= 1e-9, "{} vs {}", x.loss, y.loss);
        assert!((x.mean_rsw - y.mean_rsw).abs() <= 1e-9);
    }
}

#[test]
fn kernel_checkpoint_reproduces_the_forward_pass() {
    let trace = short(Preset::Sorting, 8);
    let cfg = small_config(1);
    let state = train(std::slice::from_ref(&trace.trace), &cfg).unwrap();
    let json = KernelCheckpoint::from_params(&state.params, "cfg").to_json();
    let loaded: KernelParams64 = KernelCheckpoint::from_json(&json).unwrap().to_params().unwrap();
    for frame in &trace.trace.frames {
        let a = frame_control_error(frame, &state.params, cfg.cap, cfg.top_p, 3).unwrap();
        let b = frame_control_error(frame, &loaded, cfg.cap, cfg.top_p, 3).unwrap();
        assert_eq!(a, b);
    }
    let before = oracle_eval(&state.params, &trace, cfg.top_p, cfg.cap, 0).unwrap();
    let after = oracle_eval(&loaded, &trace, cfg.top_p, cfg.cap, 0).unwrap();
    assert_eq!(before, after);
}

#[test]
fn single_precision_inference_tracks_double() {
    let trace = short(Preset::Sorting, 8);
    let cfg = small_config(2);
    let state = train(std::slice::from_ref(&trace.trace), &cfg).unwrap();
    let p32: KernelParams32 = state.params.cast();
    for frame in &trace.trace.frames {
        let a = frame_control_error(frame, &state.params, cfg.cap, cfg.top_p, 0).unwrap();
        let b = frame_control_error(&to_f32(frame), &p32, cfg.cap, cfg.top_p, 0).unwrap();
        assert_eq!(a.instances.len(), b.instances.len());
        for (x, y) in a.select.weights.iter().zip(&b.select.weights) {
            assert!((x - *y as f64).abs() < 1e-4, "{x} vs {y}");
        }
        for (x, y) in a.ec.iter().zip(&b.ec) {
            assert!((x - *y as f64).abs() <= 1e-3 * (1.0 + x.abs()), "{x} vs {y}");
        }
    }
}

#[test]
fn ensemble_stacks_member_errors_in_order() {
    let trace = short(Preset::Insertion, 4);
    let frame = &trace.trace.frames[0];
    let member = |kind: KernelKind, seed: u64| {
        KernelParameters::init(
            KernelConfig {
                hidden_dim: 6,
                layers: 2,
                ..KernelConfig::new(kind, frame[0].descriptor.len())
            },
            seed,
        )
        .unwrap()
    };
    let (p2p, l2l) = (member(KernelKind::P2p, 1), member(KernelKind::L2l, 2));
    let ensemble = KernelEnsemble::new(vec![p2p.clone(), l2l.clone()]);
    let out = ensemble.infer(frame, 2000, 3, 0).unwrap();
    let a = frame_control_error(frame, &p2p, 2000, 3, 0).unwrap();
    let b = frame_control_error(frame, &l2l, 2000, 3, 0).unwrap();
    assert_eq!(ensemble.error_dim(), 4);
    assert_eq!(out.control_error, [a.ec, b.ec].concat());
}

#[test]
fn initial_state_picks_a_finite_positive_beta() {
    let trace = short(Preset::Sorting, 10).trace;
    let state = init_state(std::slice::from_ref(&trace), &small_config(1)).unwrap();
    assert!(state.beta.is_finite() && state.beta > 0.0);
    assert!(state.history.is_empty());
}
