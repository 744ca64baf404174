//! Acceptance criteria, each checked end to end and reported as a verdict.

use std::path::Path;
use std::time::{Duration, Instant};

use geokernel::geometry::{GeometricFeature, KernelKind, Line2};
use geokernel::gradcheck::{score_suite, training_suite, GradcheckConfig};
use geokernel::irl::{
    grad_log_truncnorm, init_state, partition_estimate, reward, sample_loss_grad, state_change_samples, train,
    ExpertModel, TrainConfig, TrainState, TruncatedNormal,
};
use geokernel::kernelnet::{
    enumerate_instances, evaluate_instances, message_pass, select_out, GraphInstance, KernelConfig, KernelParameters,
};
use geokernel::simgen::{generate, oracle_eval, pooled_accuracy, write_traces, LabeledTrace, OracleMetrics, Preset, SceneSpec};
use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

const EVAL_SEEDS: std::ops::RangeInclusive<u64> = 101..=105;

pub struct Verdict {
    pub passed: bool,
    pub detail: String,
}

pub fn verdict(passed: bool, detail: String) -> Verdict {
    Verdict { passed, detail }
}

fn secs(d: Duration) -> f64 {
    d.as_secs_f64()
}

fn sorting_trace() -> LabeledTrace {
    generate(&SceneSpec::preset(Preset::Sorting, 0)).expect("sorting preset generates")
}

fn eval_traces(preset: Preset) -> Vec<LabeledTrace> {
    EVAL_SEEDS
        .enumerate()
        .map(|(i, seed)| {
            let mut spec = SceneSpec::preset(preset, seed);
            spec.trace_id = i as u32;
            generate(&spec).expect("eval preset generates")
        })
        .collect()
}

/// One training run on the sorting demonstration.
pub struct Run {
    pub config: TrainConfig,
    pub state: TrainState,
    pub elapsed: Duration,
}

pub fn train_sorting(lambda: f64) -> Result<Run, String> {
    let trace = sorting_trace().trace;
    let config = TrainConfig {
        lambda,
        ..TrainConfig::default()
    };
    let start = Instant::now();
    let state = train(std::slice::from_ref(&trace), &config).map_err(|e| e.to_string())?;
    Ok(Run {
        config,
        state,
        elapsed: start.elapsed(),
    })
}

fn evaluate(run: &Run, preset: Preset) -> Result<Vec<OracleMetrics>, String> {
    eval_traces(preset)
        .iter()
        .map(|t| oracle_eval(&run.state.params, t, run.config.top_p, run.config.cap, run.config.seed))
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())
}

pub fn gradient_fidelity() -> Verdict {
    let cfg = GradcheckConfig::default();
    let start = Instant::now();
    match training_suite(&cfg, grad_log_truncnorm) {
        Ok(r) => {
            let t = start.elapsed();
            let expected = cfg.settings * cfg.samples;
            verdict(
                r.passed && r.checks >= expected && t < Duration::from_secs(120),
                format!(
                    "max rel err {:.2e} (< {:.0e}) over {} checks, {} settings x {} samples, {:.1} s (< 120 s)",
                    r.max_rel_err,
                    cfg.tolerance,
                    r.checks,
                    cfg.settings,
                    cfg.samples,
                    secs(t)
                ),
            )
        }
        Err(e) => verdict(false, e.to_string()),
    }
}

pub fn score_grid() -> Verdict {
    let cfg = GradcheckConfig::default();
    let start = Instant::now();
    match score_suite(&cfg, grad_log_truncnorm) {
        Ok(r) => {
            let t = start.elapsed();
            verdict(
                r.passed && t < Duration::from_secs(1),
                format!(
                    "max rel err {:.2e} (< {:.0e}) over {} grid points, {:.3} s (< 1 s)",
                    r.max_rel_err,
                    cfg.score_tolerance,
                    r.checks,
                    secs(t)
                ),
            )
        }
        Err(e) => verdict(false, e.to_string()),
    }
}

pub fn degenerate_expert() -> Verdict {
    let trace = sorting_trace().trace;
    let base = TrainConfig {
        sigma0: 1e-4,
        s1: 100_000,
        s2: 100_000,
        ..TrainConfig::default()
    };
    let traces = std::slice::from_ref(&trace);
    let state = match init_state(traces, &base) {
        Ok(s) => s,
        Err(e) => return verdict(false, e.to_string()),
    };
    let ctx = base.context(state.beta, 0);
    let samples = state_change_samples(traces);
    let picks: Vec<usize> = (0..5).map(|i| i * (samples.len() - 1) / 4).collect();
    let mut worst: f64 = 0.0;
    let mut evaluated = 0;
    for &i in &picks {
        match sample_loss_grad(&samples[i], &state.params, &ctx) {
            Ok(Some(out)) => {
                worst = worst.max(out.multiplier.abs());
                evaluated += 1;
            }
            Ok(None) => {}
            Err(e) => return verdict(false, format!("sample {i}: {e}")),
        }
    }
    verdict(
        evaluated == picks.len() && worst < 1e-3,
        format!(
            "max |1 - grad Z / Z| {worst:.2e} (< 1e-3) at sigma0 = 1e-4, s = 1e5, over {evaluated} of {} samples",
            picks.len()
        ),
    )
}

pub fn random_target(run: &Run) -> Verdict {
    match evaluate(run, Preset::RandomTarget) {
        Ok(m) => {
            let acc = pooled_accuracy(&m);
            verdict(
                acc >= 0.90 && run.elapsed <= Duration::from_secs(600),
                format!(
                    "top-1 {acc:.3} (>= 0.90) on {} random-target traces, trained in {:.1} s (<= 600 s)",
                    m.len(),
                    secs(run.elapsed)
                ),
            )
        }
        Err(e) => verdict(false, e),
    }
}

pub fn occlusion(run: &Run) -> Verdict {
    match evaluate(run, Preset::Occlusion) {
        Ok(m) => {
            let acc = pooled_accuracy(&m);
            let dropped: Vec<_> = m.iter().flat_map(|x| &x.per_frame).filter(|v| v.dropped).collect();
            let dropped_acc = if dropped.is_empty() {
                f64::NAN
            } else {
                dropped.iter().filter(|v| v.top1_correct).count() as f64 / dropped.len() as f64
            };
            verdict(
                acc >= 0.80 && dropped_acc >= 0.90,
                format!(
                    "top-1 {acc:.3} (>= 0.80), occluded-frame top-1 {dropped_acc:.3} (>= 0.90) over {} occluded frames",
                    dropped.len()
                ),
            )
        }
        Err(e) => verdict(false, e),
    }
}

pub fn out_of_view(run: &Run) -> Verdict {
    match evaluate(run, Preset::OutOfFov) {
        Ok(m) => {
            let acc = pooled_accuracy(&m);
            let dropped = m.iter().flat_map(|x| &x.per_frame).filter(|v| v.dropped).count();
            verdict(
                acc >= 0.70,
                format!("top-1 {acc:.3} (>= 0.70), {dropped} frames with features out of view"),
            )
        }
        Err(e) => verdict(false, e),
    }
}

pub fn sparsity(with: &Run, without: &Result<Run, String>) -> Verdict {
    let last = |r: &Run| r.state.history.last().map(|m| (m.epoch, m.mean_rsw));
    let (Some((e1, rsw1)), Ok(without)) = (last(with), without) else {
        return verdict(false, "missing training history".into());
    };
    let Some((e0, rsw0)) = last(without) else {
        return verdict(false, "missing training history".into());
    };
    verdict(
        rsw1 < 0.01 && rsw0 > 0.3,
        format!(
            "final mean RSW {rsw1:.4} at lambda = 0.1 (< 0.01, epoch {e1}), {rsw0:.4} at lambda = 0 (> 0.3, epoch {e0})"
        ),
    )
}

/// Truncated-normal CDF on `[-1, 1]` from the untruncated normal.
fn oracle_cdf(n: &Normal, x: f64) -> f64 {
    let (lo, hi) = (n.cdf(-1.0), n.cdf(1.0));
    ((n.cdf(x.clamp(-1.0, 1.0)) - lo) / (hi - lo)).clamp(0.0, 1.0)
}

/// `E[exp r]` under the truncated normal by composite Simpson.
fn oracle_partition(n: &Normal) -> f64 {
    let mass = n.cdf(1.0) - n.cdf(-1.0);
    let steps = 200_000;
    let h = 2.0 / steps as f64;
    let f = |x: f64| x.exp() * n.pdf(x) / mass;
    let mut acc = f(-1.0) + f(1.0);
    for i in 1..steps {
        acc += if i % 2 == 1 { 4.0 } else { 2.0 } * f(-1.0 + i as f64 * h);
    }
    acc * h / 3.0
}

pub fn sampler_accuracy() -> Verdict {
    let cases = [(0.0, 0.55), (0.7, 0.3), (-0.95, 0.1), (0.4, 1.0), (0.99, 2.0)];
    let draws = 100_000;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst_ks: f64 = 0.0;
    let mut worst_z: f64 = 0.0;
    for &(mu, sigma) in &cases {
        let tn = TruncatedNormal::new(mu, sigma).expect("valid truncation");
        let normal = Normal::new(mu, sigma).expect("valid normal");
        let mut xs: Vec<f64> = (0..draws).map(|_| tn.sample(&mut rng)).collect();
        xs.sort_by(f64::total_cmp);
        let n = xs.len() as f64;
        let ks = xs
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let f = oracle_cdf(&normal, x);
                (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
            })
            .fold(0.0, f64::max);
        worst_ks = worst_ks.max(ks);

        let model = ExpertModel {
            sigma0: sigma,
            beta: 1.0,
            lambda: 0.0,
            s1: draws,
            s2: draws,
            seed: 0,
        };
        let z = match partition_estimate(mu, &model, &mut rng) {
            Ok((z, _)) => z,
            Err(e) => return verdict(false, e.to_string()),
        };
        let exact = oracle_partition(&normal);
        worst_z = worst_z.max((z - exact).abs() / exact);
    }
    verdict(
        worst_ks < 0.01 && worst_z < 0.005,
        format!(
            "max KS {worst_ks:.4} (< 0.01) at 1e5 draws, max partition error {:.4}% (< 0.5%) at s1 = 1e5, {} (mu, sigma) cases",
            100.0 * worst_z,
            cases.len()
        ),
    )
}

fn kernel_config(kind: KernelKind, d: usize) -> KernelConfig {
    KernelConfig {
        hidden_dim: 5,
        layers: 3,
        ..KernelConfig::new(kind, d)
    }
}

fn random_descriptor(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn random_feature(rng: &mut ChaCha8Rng, id: u32, role: geokernel::geometry::PrimitiveKind, d: usize) -> GeometricFeature {
    use geokernel::geometry::PrimitiveKind::*;
    let desc = random_descriptor(rng, d);
    match role {
        Point2d => GeometricFeature::point2d(id, desc, [rng.random_range(0.0..100.0), rng.random_range(0.0..100.0)]),
        Point3d => GeometricFeature::point3d(
            id,
            desc,
            [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)],
        ),
        Line2d => {
            let t: f64 = rng.random_range(0.0..std::f64::consts::PI);
            let line = Line2::normalized(t.cos(), t.sin(), rng.random_range(-100.0..0.0));
            GeometricFeature::line2d(id, desc, line)
        }
    }
}

fn shuffle(rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        perm.swap(i, rng.random_range(0..=i));
    }
    perm
}

pub fn structural_properties() -> Verdict {
    const CASES: u32 = 1000;
    let mut runner = TestRunner::new(Config {
        cases: CASES,
        failure_persistence: None,
        ..Config::default()
    });
    let mut failures = Vec::new();

    let softmax = runner.run(&(prop::collection::vec(-60.0f64..60.0, 1..60), 1usize..8), |(scores, p)| {
        let out = select_out(&scores, p).map_err(|e| TestCaseError::fail(e.to_string()))?;
        let total: f64 = out.weights.iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-12, "sum {total}");
        prop_assert!(out.weights.iter().all(|&g| (0.0..=1.0).contains(&g)));
        prop_assert!((0.0..=1.0).contains(&out.rsw));
        Ok(())
    });
    if let Err(e) = softmax {
        failures.push(format!("softmax normalization: {e}"));
    }

    let equivariance = runner.run(&any::<u64>(), |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let frame: Vec<_> = (0..5)
            .map(|id| random_feature(&mut rng, id, geokernel::geometry::PrimitiveKind::Point2d, 3))
            .collect();
        let params = KernelParameters::init(kernel_config(KernelKind::P2p, 3), seed).unwrap();
        let e = enumerate_instances(&frame, &KernelKind::P2p.template(), 1000, 0).unwrap();
        let perm = shuffle(&mut rng, e.instances.len());
        let base = evaluate_instances(&frame, e.instances.clone(), &params, 3).unwrap();
        let moved_in: Vec<GraphInstance> = perm.iter().map(|&i| e.instances[i].clone()).collect();
        let moved = evaluate_instances(&frame, moved_in, &params, 3).unwrap();
        for (k, &i) in perm.iter().enumerate() {
            prop_assert!((moved.select.weights[k] - base.select.weights[i]).abs() < 1e-12);
        }
        for (a, b) in moved.ec.iter().zip(&base.ec) {
            prop_assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()), "{a} vs {b}");
        }
        Ok(())
    });
    if let Err(e) = equivariance {
        failures.push(format!("permutation equivariance: {e}"));
    }

    let symmetric: Vec<KernelKind> = KernelKind::ALL.into_iter().filter(|k| k.template().symmetric).collect();
    let node_order = runner.run(&(any::<u64>(), 0..symmetric.len()), |(seed, which)| {
        let kind = symmetric[which];
        let template = kind.template();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let frame: Vec<_> = template
            .roles
            .iter()
            .enumerate()
            .map(|(id, &role)| random_feature(&mut rng, id as u32, role, 3))
            .collect();
        let params = KernelParameters::init(kernel_config(kind, 3), seed).unwrap();
        let inst = |nodes: Vec<usize>| GraphInstance {
            kind,
            ids: nodes.iter().map(|&i| i as u32).collect(),
            nodes,
            error: vec![0.0; template.error_dim],
            relevance: None,
        };
        let a = message_pass(&inst((0..template.arity()).collect()), &frame, &params).unwrap();
        let b = message_pass(&inst(shuffle(&mut rng, template.arity())), &frame, &params).unwrap();
        prop_assert!((a - b).abs() < 1e-12, "{kind}: {a} vs {b}");
        Ok(())
    });
    if let Err(e) = node_order {
        failures.push(format!("node-order invariance: {e}"));
    }

    let rewards = runner.run(&(-1e3f64..1e3, 0.0f64..50.0, 1e-3f64..20.0), |(delta, step, beta)| {
        let r = reward(delta, beta);
        prop_assert!((-1.0..=1.0).contains(&r));
        prop_assert_eq!(reward(-delta, beta), -r);
        prop_assert!(reward(delta + step, beta) <= r);
        Ok(())
    });
    if let Err(e) = rewards {
        failures.push(format!("reward oddness and monotonicity: {e}"));
    }

    let detail = if failures.is_empty() {
        format!("softmax normalization, permutation equivariance, node-order invariance and reward shape hold on {CASES} cases each")
    } else {
        failures.join("; ")
    };
    verdict(failures.is_empty(), detail)
}

fn cli(args: &[&str]) -> Result<(), String> {
    let argv = std::iter::once("geokernel").chain(args.iter().copied());
    match geokernel_cli::run(argv) {
        0 => Ok(()),
        code => Err(format!("{args:?} exited with {code}")),
    }
}

pub fn reproducibility() -> Verdict {
    let attempt = || -> Result<(bool, usize), String> {
        let dir = tempfile::TempDir::new().map_err(|e| e.to_string())?;
        let d = dir.path();
        let trace = d.join("sorting.jsonl");
        let mut buf = Vec::new();
        write_traces(&[sorting_trace()], &mut buf).map_err(|e| e.to_string())?;
        std::fs::write(&trace, buf).map_err(|e| e.to_string())?;
        let s = |p: &Path| p.to_str().unwrap().to_string();
        let first = d.join("first");
        cli(&["train", "--traces", &s(&trace), "--epochs", "5", "--out", &s(&first)])?;
        let manifest = s(&first.join("manifest.json"));
        let (a, b) = (d.join("rerun_a"), d.join("rerun_b"));
        cli(&["train", "--from-manifest", &manifest, "--out", &s(&a)])?;
        cli(&["train", "--from-manifest", &manifest, "--out", &s(&b)])?;
        let read = |p: &Path| std::fs::read(p.join("metrics.csv")).map_err(|e| e.to_string());
        let (m0, ma, mb) = (read(&first)?, read(&a)?, read(&b)?);
        let rows = String::from_utf8_lossy(&ma).lines().count().saturating_sub(1);
        Ok((ma == mb && m0 == ma, rows))
    };
    match attempt() {
        Ok((same, rows)) => verdict(
            same && rows > 0,
            format!(
                "metrics.csv of two reruns from one manifest {} ({rows} epochs)",
                if same { "bit-identical" } else { "differ" }
            ),
        ),
        Err(e) => verdict(false, e),
    }
}
