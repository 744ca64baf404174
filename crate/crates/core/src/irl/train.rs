use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::expert::ExpertModel;
use super::optim::Adam;
use super::sample::{compute_beta, sample_loss_grad, state_change_samples, DemonstrationTrace, SampleContext};
use super::IrlError;
use crate::geometry::KernelKind;
use crate::kernelnet::{KernelCheckpoint, KernelConfig, KernelError, KernelParameters, ScoreInput, DEFAULT_CAP};
use crate::numeric::NumericError;
use crate::rng;

const SHUFFLE_STREAM: u64 = 0x7368_7566;

/// Reward scale: fixed, or derived from the traces at training start.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "BetaRepr", into = "BetaRepr")]
pub enum BetaSetting {
    #[default]
    Auto,
    Fixed(f64),
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum BetaRepr {
    Number(f64),
    Word(String),
}

impl TryFrom<BetaRepr> for BetaSetting {
    type Error = String;

    fn try_from(r: BetaRepr) -> Result<Self, String> {
        match r {
            BetaRepr::Number(b) => Ok(BetaSetting::Fixed(b)),
            BetaRepr::Word(w) if w == "auto" => Ok(BetaSetting::Auto),
            BetaRepr::Word(w) => Err(format!("beta must be a number or \"auto\", got \"{w}\"")),
        }
    }
}

impl From<BetaSetting> for BetaRepr {
    fn from(b: BetaSetting) -> Self {
        match b {
            BetaSetting::Auto => BetaRepr::Word("auto".into()),
            BetaSetting::Fixed(v) => BetaRepr::Number(v),
        }
    }
}

impl std::str::FromStr for BetaSetting {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        if s == "auto" {
            return Ok(BetaSetting::Auto);
        }
        s.parse::<f64>()
            .map(BetaSetting::Fixed)
            .map_err(|_| format!("beta must be a number or \"auto\", got \"{s}\""))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub kind: KernelKind,
    pub hidden_dim: usize,
    pub layers: usize,
    pub readout_depth: usize,
    pub score_input: ScoreInput,
    #[serde(alias = "p")]
    pub top_p: usize,
    pub lambda: f64,
    pub sigma0: f64,
    /// Confidence label of the demonstrator; recorded, not interpreted.
    pub alpha: Option<String>,
    pub beta: BetaSetting,
    pub s1: usize,
    pub s2: usize,
    pub cap: usize,
    pub lr: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Stop once the epoch loss changes by at most this much for
    /// `plateau_patience` consecutive epochs. Zero disables the check.
    pub plateau_tol: f64,
    pub plateau_patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            kind: KernelKind::P2p,
            hidden_dim: 64,
            layers: 5,
            readout_depth: 0,
            score_input: ScoreInput::Logit,
            top_p: 10,
            lambda: 0.1,
            sigma0: 0.55,
            alpha: None,
            beta: BetaSetting::Auto,
            s1: 64,
            s2: 64,
            cap: DEFAULT_CAP,
            lr: 1e-3,
            epochs: 60,
            seed: 0,
            plateau_tol: 1e-3,
            plateau_patience: 5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), IrlError> {
        let bad = |m: String| Err(IrlError::Config(m));
        if self.top_p == 0 {
            return bad("p must be at least 1".into());
        }
        if self.cap == 0 {
            return bad("cap must be at least 1".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.plateau_tol >= 0.0) {
            return bad(format!("plateau_tol must be non-negative, got {}", self.plateau_tol));
        }
        if let BetaSetting::Fixed(b) = self.beta {
            if !(b > 0.0 && b.is_finite()) {
                return bad(format!("beta must be positive, got {b}"));
            }
        }
        self.expert(1.0).validate()?;
        self.kernel_config(1).validate()?;
        Ok(())
    }

    pub fn kernel_config(&self, descriptor_dim: usize) -> KernelConfig {
        KernelConfig {
            kind: self.kind,
            hidden_dim: self.hidden_dim,
            layers: self.layers,
            descriptor_dim,
            readout_depth: self.readout_depth,
            score_input: self.score_input,
        }
    }

    pub fn expert(&self, beta: f64) -> ExpertModel {
        ExpertModel {
            sigma0: self.sigma0,
            beta,
            lambda: self.lambda,
            s1: self.s1,
            s2: self.s2,
            seed: self.seed,
        }
    }

    pub fn context(&self, beta: f64, epoch: u64) -> SampleContext {
        SampleContext {
            model: self.expert(beta),
            top_p: self.top_p,
            cap: self.cap,
            epoch,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Mean of `r* − ln Ẑ` over the epoch's samples (maximized).
    pub loss: f64,
    pub mean_rsw: f64,
    pub samples: usize,
    pub skipped: usize,
    pub top1_accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub params: KernelParameters,
    pub optimizer: Adam,
    /// Completed epochs.
    pub epoch: usize,
    pub iteration: u64,
    pub beta: f64,
    /// Cumulative mean loss over all updates so far.
    pub running_loss: f64,
    pub history: Vec<EpochMetrics>,
    pub plateau_run: usize,
}

impl TrainState {
    pub fn new(params: KernelParameters, lr: f64, beta: f64) -> Self {
        let shapes: Vec<Vec<usize>> = params.tensors().iter().map(|t| t.shape().to_vec()).collect();
        let shapes: Vec<&[usize]> = shapes.iter().map(Vec::as_slice).collect();
        TrainState {
            optimizer: Adam::new(lr, &shapes),
            params,
            epoch: 0,
            iteration: 0,
            beta,
            running_loss: 0.0,
            history: Vec::new(),
            plateau_run: 0,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.params.is_finite() && self.running_loss.is_finite()
    }
}

fn descriptor_dim(traces: &[DemonstrationTrace]) -> Option<usize> {
    traces
        .iter()
        .flat_map(|t| t.frames.iter())
        .flat_map(|f| f.iter())
        .map(|feat| feat.descriptor.len())
        .next()
}

/// Fresh parameters and optimizer, with `β` resolved.
pub fn init_state(traces: &[DemonstrationTrace], config: &TrainConfig) -> Result<TrainState, IrlError> {
    config.validate()?;
    if state_change_samples(traces).is_empty() {
        return Err(IrlError::NoSamples);
    }
    let d = descriptor_dim(traces).ok_or(IrlError::NoSamples)?;
    let params = KernelParameters::init(config.kernel_config(d), config.seed)?;
    let beta = match config.beta {
        BetaSetting::Fixed(b) => b,
        BetaSetting::Auto => compute_beta(traces, &params, &config.context(1.0, 0))?,
    };
    log::info!("beta = {beta}");
    Ok(TrainState::new(params, config.lr, beta))
}

fn diverged(err: IrlError, state: &TrainState) -> IrlError {
    match err {
        IrlError::Kernel(KernelError::Numeric {
            source: NumericError::NonFinite { .. },
            ..
        })
        | IrlError::Numeric(NumericError::NonFinite { .. })
        | IrlError::NonFinite(_) => IrlError::Diverged {
            epoch: state.epoch,
            state: Box::new(state.clone()),
        },
        other => other,
    }
}

/// One shuffled pass with a parameter update after every sample.
pub fn run_epoch(
    state: &mut TrainState,
    traces: &[DemonstrationTrace],
    config: &TrainConfig,
) -> Result<EpochMetrics, IrlError> {
    let mut samples = state_change_samples(traces);
    if samples.is_empty() {
        return Err(IrlError::NoSamples);
    }
    let epoch = state.epoch as u64;
    samples.shuffle(&mut rng::stream(&[config.seed, SHUFFLE_STREAM, epoch]));
    let ctx = config.context(state.beta, epoch);

    let (mut loss, mut rsw, mut used, mut skipped) = (0.0, 0.0, 0usize, 0usize);
    for sample in &samples {
        let outcome = match sample_loss_grad(sample, &state.params, &ctx) {
            Ok(Some(o)) => o,
            Ok(None) => {
                skipped += 1;
                continue;
            }
            Err(e) => return Err(diverged(e, state)),
        };
        let grads_finite = outcome.gradients.iter().all(|g| g.is_finite());
        if !outcome.loss.is_finite() || !grads_finite {
            return Err(diverged(IrlError::NonFinite("sample loss"), state));
        }
        let grads = outcome.gradients.into_tensors();
        state.optimizer.ascend(state.params.tensors_mut(), &grads);
        state.iteration += 1;
        state.running_loss += (outcome.loss - state.running_loss) / state.iteration as f64;
        loss += outcome.loss;
        rsw += 0.5 * (outcome.terms.rsw[0] + outcome.terms.rsw[1]);
        used += 1;
    }
    if used == 0 {
        return Err(IrlError::NoSamples);
    }
    let metrics = EpochMetrics {
        epoch: state.epoch,
        loss: loss / used as f64,
        mean_rsw: rsw / used as f64,
        samples: used,
        skipped,
        top1_accuracy: None,
    };
    if let Some(prev) = state.history.last() {
        if config.plateau_tol > 0.0 && (metrics.loss - prev.loss).abs() <= config.plateau_tol {
            state.plateau_run += 1;
        } else {
            state.plateau_run = 0;
        }
    }
    state.epoch += 1;
    state.history.push(metrics.clone());
    Ok(metrics)
}

pub fn plateaued(state: &TrainState, config: &TrainConfig) -> bool {
    config.plateau_tol > 0.0 && config.plateau_patience > 0 && state.plateau_run >= config.plateau_patience
}

/// Runs epochs until `config.epochs` are complete or the loss plateaus.
/// `observe` is called after each epoch and may supply its accuracy.
pub fn train_from(
    mut state: TrainState,
    traces: &[DemonstrationTrace],
    config: &TrainConfig,
    mut observe: impl FnMut(&TrainState) -> Option<f64>,
) -> Result<TrainState, IrlError> {
    while state.epoch < config.epochs && !plateaued(&state, config) {
        let m = run_epoch(&mut state, traces, config)?;
        let acc = observe(&state);
        if let Some(last) = state.history.last_mut() {
            last.top1_accuracy = acc;
        }
        log::info!(
            "epoch {}: loss {:.6} rsw {:.4}{}",
            m.epoch,
            m.loss,
            m.mean_rsw,
            acc.map(|a| format!(" top1 {a:.3}")).unwrap_or_default()
        );
    }
    Ok(state)
}

pub fn train(traces: &[DemonstrationTrace], config: &TrainConfig) -> Result<TrainState, IrlError> {
    let state = init_state(traces, config)?;
    train_from(state, traces, config, |_| None)
}

pub const TRAIN_CHECKPOINT_VERSION: u32 = 1;

/// Everything needed to resume training exactly where it stopped.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainCheckpoint {
    pub format_version: u32,
    pub config: TrainConfig,
    pub kernel: KernelCheckpoint,
    pub optimizer: Adam,
    pub epoch: usize,
    pub iteration: u64,
    pub beta: f64,
    pub running_loss: f64,
    pub history: Vec<EpochMetrics>,
    pub plateau_run: usize,
}

impl TrainCheckpoint {
    pub fn new(state: &TrainState, config: &TrainConfig, config_hash: &str) -> Self {
        TrainCheckpoint {
            format_version: TRAIN_CHECKPOINT_VERSION,
            config: config.clone(),
            kernel: KernelCheckpoint::from_params(&state.params, config_hash),
            optimizer: state.optimizer.clone(),
            epoch: state.epoch,
            iteration: state.iteration,
            beta: state.beta,
            running_loss: state.running_loss,
            history: state.history.clone(),
            plateau_run: state.plateau_run,
        }
    }

    pub fn to_state(&self) -> Result<TrainState, IrlError> {
        if self.format_version != TRAIN_CHECKPOINT_VERSION {
            return Err(IrlError::Checkpoint(format!(
                "unsupported format version {}",
                self.format_version
            )));
        }
        let params = self.kernel.to_params()?;
        let shapes_match = params.tensors().len() == self.optimizer.m.len()
            && params
                .tensors()
                .iter()
                .zip(self.optimizer.m.iter().zip(&self.optimizer.v))
                .all(|(p, (m, v))| p.shape() == m.shape() && p.shape() == v.shape());
        if !shapes_match {
            return Err(IrlError::Checkpoint("optimizer moments do not match parameters".into()));
        }
        Ok(TrainState {
            params,
            optimizer: self.optimizer.clone(),
            epoch: self.epoch,
            iteration: self.iteration,
            beta: self.beta,
            running_loss: self.running_loss,
            history: self.history.clone(),
            plateau_run: self.plateau_run,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, IrlError> {
        serde_json::from_str(s).map_err(|e| IrlError::Checkpoint(e.to_string()))
    }
}
