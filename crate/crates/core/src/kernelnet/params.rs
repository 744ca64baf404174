use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::KernelError;
use crate::geometry::KernelKind;
use crate::numeric::{Tape, Tensor, Var};
use crate::Scalar;

/// What the select-out softmax normalizes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreInput {
    /// The readout logit, i.e. the relevance before its sigmoid.
    #[default]
    Logit,
    /// The relevance `b ∈ (0, 1)` itself. The softmax can then never put
    /// more than `e/(e + m − 1)` on a single instance.
    Relevance,
}

/// Shape hyper-parameters of one skill kernel network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelConfig {
    pub kind: KernelKind,
    pub hidden_dim: usize,
    pub layers: usize,
    pub descriptor_dim: usize,
    /// Hidden tanh layers in the readout before the final affine map.
    #[serde(default)]
    pub readout_depth: usize,
    #[serde(default)]
    pub score_input: ScoreInput,
}

impl KernelConfig {
    pub fn new(kind: KernelKind, descriptor_dim: usize) -> Self {
        KernelConfig {
            kind,
            hidden_dim: 64,
            layers: 5,
            descriptor_dim,
            readout_depth: 0,
            score_input: ScoreInput::Logit,
        }
    }

    pub fn validate(&self) -> Result<(), KernelError> {
        if self.hidden_dim == 0 || self.layers == 0 || self.descriptor_dim == 0 {
            return Err(KernelError::Config(format!(
                "hidden_dim, layers and descriptor_dim must be positive (got {}, {}, {})",
                self.hidden_dim, self.layers, self.descriptor_dim
            )));
        }
        Ok(())
    }

    /// Width of the readout input: summed node states for symmetric
    /// templates, role-ordered concatenation otherwise.
    pub fn readout_width(&self) -> usize {
        let template = self.kind.template();
        if template.symmetric {
            self.hidden_dim
        } else {
            self.hidden_dim * template.arity()
        }
    }

    /// `(name, shape)` of every tensor in canonical order.
    pub fn layout(&self) -> Vec<(String, [usize; 2])> {
        let (h, d) = (self.hidden_dim, self.descriptor_dim);
        let mut out = vec![
            ("embed.weight".to_string(), [d, h]),
            ("embed.bias".to_string(), [1, h]),
            ("message.weight".to_string(), [2 * h, h]),
            ("message.bias".to_string(), [1, h]),
        ];
        for gate in ["update", "reset", "candidate"] {
            out.push((format!("gru.{gate}.input"), [h, h]));
            out.push((format!("gru.{gate}.hidden"), [h, h]));
            out.push((format!("gru.{gate}.bias"), [1, h]));
        }
        let mut width = self.readout_width();
        for i in 0..self.readout_depth {
            out.push((format!("readout.hidden{i}.weight"), [width, h]));
            out.push((format!("readout.hidden{i}.bias"), [1, h]));
            width = h;
        }
        out.push(("readout.weight".to_string(), [width, 1]));
        out.push(("readout.bias".to_string(), [1, 1]));
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Affine<T = f64> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

/// Gated recurrent update `h' = (1 − z)⊙n + z⊙h`.
#[derive(Clone, Debug, PartialEq)]
pub struct GruWeights<T = f64> {
    pub update: GateWeights<T>,
    pub reset: GateWeights<T>,
    pub candidate: GateWeights<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GateWeights<T = f64> {
    pub input: Tensor<T>,
    pub hidden: Tensor<T>,
    pub bias: Tensor<T>,
}

/// All learnable weights of one skill kernel.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelParameters<T = f64> {
    pub config: KernelConfig,
    /// Descriptor embedding `D → h` (tanh).
    pub embed: Affine<T>,
    /// Pairwise message map `2h → h` (tanh), shared by all edges and layers.
    pub message: Affine<T>,
    pub update: GruWeights<T>,
    pub readout_hidden: Vec<Affine<T>>,
    pub readout: Affine<T>,
}

impl<T: Scalar> KernelParameters<T> {
    /// Every weight uniform in `±1/√fan_in`.
    pub fn init(config: KernelConfig, seed: u64) -> Result<Self, KernelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors = config
            .layout()
            .into_iter()
            .map(|(name, shape)| {
                // Biases share the fan-in of the weight they follow.
                let fan_in = if name.ends_with("bias") {
                    fan_in_of(&config, &name)
                } else {
                    shape[0]
                };
                let bound = 1.0 / (fan_in as f64).sqrt();
                let data = (0..shape[0] * shape[1])
                    .map(|_| T::of(rng.random_range(-bound..=bound)))
                    .collect();
                Tensor::matrix(shape[0], shape[1], data).expect("layout shape")
            })
            .collect();
        Self::from_tensors(config, tensors)
    }

    pub fn zeros(config: KernelConfig) -> Result<Self, KernelError> {
        config.validate()?;
        let tensors = config
            .layout()
            .into_iter()
            .map(|(_, s)| Tensor::zeros(&s))
            .collect();
        Self::from_tensors(config, tensors)
    }

    /// Rebuilds from tensors in [`KernelConfig::layout`] order.
    pub fn from_tensors(config: KernelConfig, tensors: Vec<Tensor<T>>) -> Result<Self, KernelError> {
        let layout = config.layout();
        if layout.len() != tensors.len() {
            return Err(KernelError::Config(format!(
                "expected {} tensors, got {}",
                layout.len(),
                tensors.len()
            )));
        }
        for ((name, shape), t) in layout.iter().zip(&tensors) {
            if t.shape() != shape {
                return Err(KernelError::Config(format!(
                    "{name}: expected shape {shape:?}, got {:?}",
                    t.shape()
                )));
            }
            if !t.is_finite() {
                return Err(KernelError::Config(format!("{name}: non-finite weights")));
            }
        }
        let mut it = tensors.into_iter();
        let mut next = || it.next().expect("length checked");
        let mut affine = || Affine {
            weight: next(),
            bias: next(),
        };
        let embed = affine();
        let message = affine();
        let mut gate = || GateWeights {
            input: next(),
            hidden: next(),
            bias: next(),
        };
        let update = GruWeights {
            update: gate(),
            reset: gate(),
            candidate: gate(),
        };
        let mut affine = || Affine {
            weight: next(),
            bias: next(),
        };
        let readout_hidden = (0..config.readout_depth).map(|_| affine()).collect();
        let readout = affine();
        Ok(KernelParameters {
            config,
            embed,
            message,
            update,
            readout_hidden,
            readout,
        })
    }

    /// Tensors in canonical order; `ParamId(i)` on a bound tape is entry `i`.
    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        let mut out = vec![
            &self.embed.weight,
            &self.embed.bias,
            &self.message.weight,
            &self.message.bias,
        ];
        for g in [&self.update.update, &self.update.reset, &self.update.candidate] {
            out.extend([&g.input, &g.hidden, &g.bias]);
        }
        for a in &self.readout_hidden {
            out.extend([&a.weight, &a.bias]);
        }
        out.extend([&self.readout.weight, &self.readout.bias]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = vec![
            &mut self.embed.weight,
            &mut self.embed.bias,
            &mut self.message.weight,
            &mut self.message.bias,
        ];
        let GruWeights {
            update,
            reset,
            candidate,
        } = &mut self.update;
        for g in [update, reset, candidate] {
            out.extend([&mut g.input, &mut g.hidden, &mut g.bias]);
        }
        for a in &mut self.readout_hidden {
            out.extend([&mut a.weight, &mut a.bias]);
        }
        out.extend([&mut self.readout.weight, &mut self.readout.bias]);
        out
    }

    pub fn names(&self) -> Vec<String> {
        self.config.layout().into_iter().map(|(n, _)| n).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> KernelParameters<U> {
        let tensors = self.tensors().into_iter().map(|t| t.cast()).collect();
        KernelParameters::from_tensors(self.config.clone(), tensors).expect("same layout")
    }

    /// Registers every tensor as a parameter leaf, in canonical order.
    pub fn bind(&self, tape: &mut Tape<T>) -> BoundParams {
        let mut vars = self
            .tensors()
            .into_iter()
            .map(|t| tape.param(t.clone()))
            .collect::<Vec<_>>()
            .into_iter();
        let mut next = || vars.next().expect("layout");
        let embed = (next(), next());
        let message = (next(), next());
        let mut gate = || [next(), next(), next()];
        let gru = [gate(), gate(), gate()];
        let readout_hidden = (0..self.config.readout_depth)
            .map(|_| (next(), next()))
            .collect();
        let readout = (next(), next());
        BoundParams {
            embed,
            message,
            gru,
            readout_hidden,
            readout,
        }
    }
}

fn fan_in_of(config: &KernelConfig, bias_name: &str) -> usize {
    let weight_name = bias_name
        .trim_end_matches("bias")
        .to_string();
    let layout = config.layout();
    // Gate biases follow `input`; affine biases follow `weight`.
    for (name, shape) in &layout {
        if *name == format!("{weight_name}weight") || *name == format!("{weight_name}input") {
            return shape[0];
        }
    }
    config.hidden_dim
}

/// Tape handles for one [`KernelParameters`] binding.
#[derive(Clone, Debug)]
pub struct BoundParams {
    pub embed: (Var, Var),
    pub message: (Var, Var),
    /// `[update, reset, candidate]`, each `[input, hidden, bias]`.
    pub gru: [[Var; 3]; 3],
    pub readout_hidden: Vec<(Var, Var)>,
    pub readout: (Var, Var),
}
