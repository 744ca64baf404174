use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::SimError;
use crate::geometry::{FeatureId, KernelKind};

/// Named scenario shapes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    Sorting,
    Insertion,
    RandomTarget,
    MovingCamera,
    Occlusion,
    OutOfFov,
    Illumination,
}

impl Preset {
    pub const ALL: [Preset; 7] = [
        Preset::Sorting,
        Preset::Insertion,
        Preset::RandomTarget,
        Preset::MovingCamera,
        Preset::Occlusion,
        Preset::OutOfFov,
        Preset::Illumination,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Preset::Sorting => "sorting",
            Preset::Insertion => "insertion",
            Preset::RandomTarget => "random-target",
            Preset::MovingCamera => "moving-camera",
            Preset::Occlusion => "occlusion",
            Preset::OutOfFov => "out-of-fov",
            Preset::Illumination => "illumination",
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Preset {
    type Err = SimError;

    fn from_str(s: &str) -> Result<Self, SimError> {
        Preset::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| SimError::InvalidSpec(format!("unknown preset `{s}`")))
    }
}

/// Global image-plane motion applied to every feature.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum Camera {
    Static,
    /// Smoothly varying homography; `strength` scales its magnitude.
    Projective { strength: f64 },
    /// Sinusoidal pan with the given peak offset in pixels.
    Pan { amplitude: [f64; 2] },
}

/// Features hidden during `frames[0]..frames[1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Occlusion {
    pub frames: [usize; 2],
    pub ids: Vec<FeatureId>,
}

/// One generated association ground truth.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlantedTuple {
    pub kind: KernelKind,
    pub ids: Vec<FeatureId>,
}

/// Parameters of one synthetic demonstration.
///
/// A rigid object with `object_points` points and `object_lines` edges moves
/// onto a target pose, where an identical set of target features waits.
/// Object feature `i` and target feature `i` form a planted pair. Static
/// background features and random-walk distractors fill the rest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub preset: Preset,
    pub trace_id: u32,
    /// Geometry and noise of this trace.
    pub seed: u64,
    /// Descriptors and object shape, shared by every trace of a scene.
    pub scene_seed: u64,
    pub frames: usize,
    pub descriptor_dim: usize,
    /// Kernel kinds whose planted tuples are labeled.
    pub kernels: Vec<KernelKind>,
    pub object_points: usize,
    pub object_lines: usize,
    pub background_points: usize,
    pub background_lines: usize,
    pub distractors: usize,
    /// Bound on the final planted-pair distance, and the per-frame point noise.
    pub epsilon: f64,
    /// Pose jitter (pixels), fading out as the object arrives.
    pub wobble: f64,
    pub distractor_std: f64,
    /// Per-component Gaussian noise added to unit descriptors each frame.
    pub descriptor_noise: f64,
    /// Target pose anywhere in the image with any rotation, rather than in
    /// the right-hand half with a modest rotation.
    pub random_target: bool,
    pub camera: Camera,
    /// Drop features whose coordinates leave the image.
    pub clip_to_view: bool,
    pub occlusions: Vec<Occlusion>,
    pub image_size: [f64; 2],
}

impl SceneSpec {
    pub fn preset(preset: Preset, seed: u64) -> Self {
        Self::sized(preset, seed, 40, None)
    }

    /// Preset with a given length; fields the preset derives from the frame
    /// count or object size (the occlusion window) follow them.
    fn sized(preset: Preset, seed: u64, frames: usize, object_points: Option<usize>) -> Self {
        let mut s = SceneSpec {
            preset,
            trace_id: 0,
            seed,
            scene_seed: 0,
            frames,
            descriptor_dim: 32,
            kernels: vec![KernelKind::P2p],
            object_points: 3,
            object_lines: 0,
            background_points: 3,
            background_lines: 0,
            distractors: 3,
            epsilon: 2.0,
            wobble: 6.0,
            distractor_std: 6.0,
            descriptor_noise: 0.02,
            random_target: false,
            camera: Camera::Static,
            clip_to_view: false,
            occlusions: Vec::new(),
            image_size: [640.0, 480.0],
        };
        match preset {
            Preset::Sorting => {}
            Preset::Insertion => {
                s.kernels = vec![KernelKind::P2p, KernelKind::L2l];
                s.object_points = 2;
                s.object_lines = 2;
                s.background_points = 2;
                s.background_lines = 2;
                s.distractors = 2;
            }
            Preset::RandomTarget => s.random_target = true,
            Preset::MovingCamera => s.camera = Camera::Projective { strength: 1.0 },
            Preset::Occlusion => {
                let k = s.object_points as FeatureId;
                let f = s.frames;
                s.occlusions = vec![Occlusion {
                    frames: [f / 4, 3 * f / 4],
                    ids: vec![0, k],
                }];
            }
            Preset::OutOfFov => {
                s.camera = Camera::Pan {
                    amplitude: [170.0, 60.0],
                };
                s.clip_to_view = true;
            }
            Preset::Illumination => s.descriptor_noise = 0.5,
        }
        if let Some(k) = object_points {
            s.object_points = k;
            for occ in &mut s.occlusions {
                occ.ids = vec![0, k as FeatureId];
            }
        }
        s
    }

    pub fn feature_count(&self) -> usize {
        2 * self.object_points
            + 2 * self.object_lines
            + self.background_points
            + self.background_lines
            + self.distractors
    }

    /// Id ranges of each feature group, in id order.
    pub(crate) fn layout(&self) -> Layout {
        let mut next = 0;
        let mut take = |n: usize| {
            let r = next..next + n as FeatureId;
            next += n as FeatureId;
            r
        };
        Layout {
            object_points: take(self.object_points),
            target_points: take(self.object_points),
            object_lines: take(self.object_lines),
            target_lines: take(self.object_lines),
            background_points: take(self.background_points),
            background_lines: take(self.background_lines),
            distractors: take(self.distractors),
        }
    }

    /// Every planted tuple of the labeled kernel kinds.
    pub fn planted(&self) -> Vec<PlantedTuple> {
        let l = self.layout();
        let mut out = Vec::new();
        if self.kernels.contains(&KernelKind::P2p) {
            for (o, t) in l.object_points.clone().zip(l.target_points.clone()) {
                out.push(PlantedTuple {
                    kind: KernelKind::P2p,
                    ids: vec![o, t],
                });
            }
        }
        if self.kernels.contains(&KernelKind::L2l) {
            for (o, t) in l.object_lines.clone().zip(l.target_lines.clone()) {
                out.push(PlantedTuple {
                    kind: KernelKind::L2l,
                    ids: vec![o, t],
                });
            }
        }
        out
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::InvalidSpec(m));
        if self.frames < 2 {
            return bad(format!("need at least 2 frames, got {}", self.frames));
        }
        if self.descriptor_dim == 0 {
            return bad("descriptor_dim must be positive".into());
        }
        for (name, v) in [
            ("epsilon", self.epsilon),
            ("wobble", self.wobble),
            ("distractor_std", self.distractor_std),
            ("descriptor_noise", self.descriptor_noise),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be finite and non-negative, got {v}"));
            }
        }
        if !(self.image_size[0] > 0.0 && self.image_size[1] > 0.0) {
            return bad("image_size must be positive".into());
        }
        if self.kernels.is_empty() {
            return bad("at least one kernel kind must be labeled".into());
        }
        for kind in &self.kernels {
            let pairs = match kind {
                KernelKind::P2p => self.object_points,
                KernelKind::L2l => self.object_lines,
                other => return bad(format!("kernel `{other}` has no planted generator")),
            };
            if pairs < 2 {
                return bad(format!("kernel `{kind}` needs at least two planted pairs, got {pairs}"));
            }
        }
        match self.camera {
            Camera::Projective { strength } if !(strength >= 0.0 && strength.is_finite()) => {
                return bad(format!("camera strength must be non-negative, got {strength}"));
            }
            Camera::Pan { amplitude } if !amplitude.iter().all(|a| a.is_finite()) => {
                return bad("camera amplitude must be finite".into());
            }
            _ => {}
        }
        let n = self.feature_count() as FeatureId;
        for occ in &self.occlusions {
            if occ.frames[0] > occ.frames[1] || occ.frames[1] > self.frames {
                return bad(format!("occlusion frames {:?} outside 0..{}", occ.frames, self.frames));
            }
            if let Some(id) = occ.ids.iter().find(|&&id| id >= n) {
                return bad(format!("occluded id {id} does not exist (scene has {n} features)"));
            }
        }
        Ok(())
    }

    /// Parses a spec document: a JSON object naming a `preset`, with any
    /// other field overriding the preset's value.
    pub fn from_json(s: &str) -> Result<Self, SimError> {
        let value: serde_json::Value =
            serde_json::from_str(s).map_err(|e| SimError::InvalidSpec(e.to_string()))?;
        let serde_json::Value::Object(overrides) = value else {
            return Err(SimError::InvalidSpec("spec must be a JSON object".into()));
        };
        let preset = match overrides.get("preset") {
            None => Preset::Sorting,
            Some(serde_json::Value::String(p)) => p.parse()?,
            Some(other) => return Err(SimError::InvalidSpec(format!("preset must be a string, got {other}"))),
        };
        let count = |key: &str| -> Result<Option<u64>, SimError> {
            overrides
                .get(key)
                .map(|v| {
                    v.as_u64().ok_or_else(|| {
                        SimError::InvalidSpec(format!("{key} must be a non-negative integer, got {v}"))
                    })
                })
                .transpose()
        };
        let seed = count("seed")?.unwrap_or(0);
        let frames = count("frames")?.unwrap_or(40) as usize;
        let object_points = count("object_points")?.map(|k| k as usize);
        let base = serde_json::to_value(SceneSpec::sized(preset, seed, frames, object_points)).expect("spec serializes");
        let serde_json::Value::Object(mut merged) = base else {
            unreachable!("spec serializes to an object")
        };
        merged.extend(overrides);
        let spec: SceneSpec = serde_json::from_value(serde_json::Value::Object(merged))
            .map_err(|e| SimError::InvalidSpec(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }
}

pub(crate) struct Layout {
    pub object_points: std::ops::Range<FeatureId>,
    pub target_points: std::ops::Range<FeatureId>,
    pub object_lines: std::ops::Range<FeatureId>,
    pub target_lines: std::ops::Range<FeatureId>,
    pub background_points: std::ops::Range<FeatureId>,
    pub background_lines: std::ops::Range<FeatureId>,
    pub distractors: std::ops::Range<FeatureId>,
}
