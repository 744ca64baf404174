use std::f64::consts::PI;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use super::spec::{Camera, SceneSpec};
use super::SimError;
use crate::geometry::{FeatureId, GeometricFeature, Line2};
use crate::irl::DemonstrationTrace;
use crate::rng;

const DESCRIPTOR_STREAM: u64 = 0x6465_7363;
const SHAPE_STREAM: u64 = 0x7368_6170;
const TRACE_STREAM: u64 = 0x7472_6163;

/// A demonstration plus per-frame ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledTrace {
    pub trace: DemonstrationTrace,
    /// Planted tuples fully visible in each frame, ids in node order.
    pub labels: Vec<Vec<Vec<FeatureId>>>,
    /// Ids hidden in each frame by occlusion or clipping.
    pub dropped: Vec<Vec<FeatureId>>,
}

impl LabeledTrace {
    pub fn frames(&self) -> usize {
        self.trace.frames.len()
    }
}

#[derive(Clone, Copy, Debug)]
struct Pose {
    x: f64,
    y: f64,
    theta: f64,
}

impl Pose {
    fn apply(&self, p: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.theta.sin_cos();
        [self.x + c * p[0] - s * p[1], self.y + s * p[0] + c * p[1]]
    }

    fn lerp(a: &Pose, b: &Pose, s: f64) -> Pose {
        let mut dtheta = (b.theta - a.theta) % (2.0 * PI);
        if dtheta > PI {
            dtheta -= 2.0 * PI;
        } else if dtheta < -PI {
            dtheta += 2.0 * PI;
        }
        Pose {
            x: a.x + s * (b.x - a.x),
            y: a.y + s * (b.y - a.y),
            theta: a.theta + s * dtheta,
        }
    }
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    rng.random_range(lo..hi)
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn unit_vector(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| gauss(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Uniform point in a disc of radius `r`.
fn disc(rng: &mut ChaCha8Rng, r: f64) -> [f64; 2] {
    if r == 0.0 {
        return [0.0, 0.0];
    }
    let rad = r * uniform(rng, 0.0, 1.0).sqrt();
    let ang = uniform(rng, -PI, PI);
    [rad * ang.cos(), rad * ang.sin()]
}

/// Per-frame image-plane map.
struct Warp {
    camera: Camera,
    phases: [f64; 6],
    centre: [f64; 2],
    frames: usize,
}

impl Warp {
    fn apply(&self, t: usize, p: [f64; 2]) -> [f64; 2] {
        let tau = t as f64 / (self.frames - 1) as f64;
        match self.camera {
            Camera::Static => p,
            Camera::Pan { amplitude } => [
                p[0] + amplitude[0] * (2.0 * PI * tau).sin(),
                p[1] + amplitude[1] * (PI * tau).sin(),
            ],
            Camera::Projective { strength: k } => {
                let w = |i: usize| (2.0 * PI * tau + self.phases[i]).sin();
                let tx = k * 30.0 * w(0);
                let ty = k * 25.0 * w(1);
                let rot = k * 0.06 * w(2);
                let scale = 1.0 + k * 0.06 * w(3);
                let g = k * 2e-4 * w(4);
                let h = k * 2e-4 * w(5);
                let x = p[0] - self.centre[0];
                let y = p[1] - self.centre[1];
                let (s, c) = rot.sin_cos();
                let xn = scale * (c * x - s * y) + tx;
                let yn = scale * (s * x + c * y) + ty;
                let wn = g * x + h * y + 1.0;
                [xn / wn + self.centre[0], yn / wn + self.centre[1]]
            }
        }
    }
}

struct Shape {
    points: Vec<[f64; 2]>,
    lines: Vec<[[f64; 2]; 2]>,
}

fn object_shape(spec: &SceneSpec) -> Shape {
    let mut rng = rng::stream(&[spec.scene_seed, SHAPE_STREAM]);
    let k = spec.object_points;
    let points = (0..k)
        .map(|i| {
            let ang = 2.0 * PI * i as f64 / k as f64 + uniform(&mut rng, -0.3, 0.3);
            let r = uniform(&mut rng, 45.0, 85.0);
            [r * ang.cos(), r * ang.sin()]
        })
        .collect();
    let l = spec.object_lines;
    let lines = (0..l)
        .map(|j| {
            let ang = 2.0 * PI * (j as f64 + 0.5) / l as f64;
            let centre = [30.0 * ang.cos(), 30.0 * ang.sin()];
            let dir = ang + PI / 2.0 + uniform(&mut rng, -0.4, 0.4);
            let half = 0.5 * uniform(&mut rng, 50.0, 80.0);
            let d = [half * dir.cos(), half * dir.sin()];
            [[centre[0] - d[0], centre[1] - d[1]], [centre[0] + d[0], centre[1] + d[1]]]
        })
        .collect();
    Shape { points, lines }
}

fn base_descriptors(spec: &SceneSpec) -> Vec<Vec<f64>> {
    let mut rng = rng::stream(&[spec.scene_seed, DESCRIPTOR_STREAM]);
    (0..spec.feature_count())
        .map(|_| unit_vector(&mut rng, spec.descriptor_dim))
        .collect()
}

fn perturb(base: &[f64], std: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    if std == 0.0 {
        return base.to_vec();
    }
    let v: Vec<f64> = base.iter().map(|b| b + std * gauss(rng)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

enum Shape2 {
    Point([f64; 2]),
    Segment([[f64; 2]; 2]),
}

/// Generates one labeled trace. Identical specs give bit-identical traces.
pub fn generate(spec: &SceneSpec) -> Result<LabeledTrace, SimError> {
    spec.validate()?;
    let [w, h] = spec.image_size;
    let sx = w / 640.0;
    let sy = h / 480.0;
    let layout = spec.layout();
    let shape = object_shape(spec);
    let descriptors = base_descriptors(spec);
    let mut rng = rng::stream(&[spec.seed, TRACE_STREAM, spec.trace_id as u64]);

    let start = Pose {
        x: sx * uniform(&mut rng, 110.0, 230.0),
        y: sy * uniform(&mut rng, 110.0, 370.0),
        theta: uniform(&mut rng, -PI, PI),
    };
    let target = if spec.random_target {
        loop {
            let x = sx * uniform(&mut rng, 100.0, 540.0);
            let y = sy * uniform(&mut rng, 100.0, 380.0);
            let theta = uniform(&mut rng, -PI, PI);
            if ((x - start.x) / sx).hypot((y - start.y) / sy) >= 220.0 {
                break Pose { x, y, theta };
            }
        }
    } else {
        Pose {
            x: sx * uniform(&mut rng, 410.0, 530.0),
            y: sy * uniform(&mut rng, 110.0, 370.0),
            theta: uniform(&mut rng, -0.6, 0.6),
        }
    };
    let random_point = |rng: &mut ChaCha8Rng| [uniform(rng, 20.0, w - 20.0), uniform(rng, 20.0, h - 20.0)];
    let background_points: Vec<[f64; 2]> =
        (0..spec.background_points).map(|_| random_point(&mut rng)).collect();
    let background_lines: Vec<[[f64; 2]; 2]> = (0..spec.background_lines)
        .map(|_| {
            let c = random_point(&mut rng);
            let ang = uniform(&mut rng, -PI, PI);
            let half = 0.5 * uniform(&mut rng, 60.0, 120.0);
            [
                [c[0] - half * ang.cos(), c[1] - half * ang.sin()],
                [c[0] + half * ang.cos(), c[1] + half * ang.sin()],
            ]
        })
        .collect();
    let mut walkers: Vec<[f64; 2]> = (0..spec.distractors).map(|_| random_point(&mut rng)).collect();
    let warp = Warp {
        camera: spec.camera,
        phases: std::array::from_fn(|_| uniform(&mut rng, -PI, PI)),
        centre: [0.5 * w, 0.5 * h],
        frames: spec.frames,
    };

    let target_points: Vec<[f64; 2]> = shape.points.iter().map(|&p| target.apply(p)).collect();
    let target_lines: Vec<[[f64; 2]; 2]> = shape
        .lines
        .iter()
        .map(|s| [target.apply(s[0]), target.apply(s[1])])
        .collect();

    let planted = spec.planted();
    let mut frames = Vec::with_capacity(spec.frames);
    let mut labels = Vec::with_capacity(spec.frames);
    let mut dropped_all = Vec::with_capacity(spec.frames);
    for t in 0..spec.frames {
        let s = t as f64 / (spec.frames - 1) as f64;
        let mut pose = Pose::lerp(&start, &target, s);
        let fade = 1.0 - s;
        pose.x += spec.wobble * fade * gauss(&mut rng);
        pose.y += spec.wobble * fade * gauss(&mut rng);
        pose.theta += spec.wobble * 0.01 * fade * gauss(&mut rng);
        let noisy = |p: [f64; 2], rng: &mut ChaCha8Rng| {
            let n = disc(rng, 0.5 * spec.epsilon);
            [p[0] + n[0], p[1] + n[1]]
        };

        let mut shapes: Vec<(FeatureId, Shape2)> = Vec::with_capacity(spec.feature_count());
        for (id, &p) in layout.object_points.clone().zip(&shape.points) {
            shapes.push((id, Shape2::Point(noisy(pose.apply(p), &mut rng))));
        }
        for (id, &p) in layout.target_points.clone().zip(&target_points) {
            shapes.push((id, Shape2::Point(p)));
        }
        for (id, seg) in layout.object_lines.clone().zip(&shape.lines) {
            let a = noisy(pose.apply(seg[0]), &mut rng);
            let b = noisy(pose.apply(seg[1]), &mut rng);
            shapes.push((id, Shape2::Segment([a, b])));
        }
        for (id, &seg) in layout.target_lines.clone().zip(&target_lines) {
            shapes.push((id, Shape2::Segment(seg)));
        }
        for (id, &p) in layout.background_points.clone().zip(&background_points) {
            shapes.push((id, Shape2::Point(p)));
        }
        for (id, &seg) in layout.background_lines.clone().zip(&background_lines) {
            shapes.push((id, Shape2::Segment(seg)));
        }
        if t > 0 {
            for p in &mut walkers {
                for (c, lim) in p.iter_mut().zip([w, h]) {
                    *c += spec.distractor_std * gauss(&mut rng);
                    if *c < 0.0 {
                        *c = -*c;
                    }
                    if *c > lim {
                        *c = 2.0 * lim - *c;
                    }
                    *c = c.clamp(0.0, lim);
                }
            }
        }
        for (id, &p) in layout.distractors.clone().zip(&walkers) {
            shapes.push((id, Shape2::Point(p)));
        }

        let in_view = |p: [f64; 2]| p[0] >= 0.0 && p[0] <= w && p[1] >= 0.0 && p[1] <= h;
        let mut features = Vec::with_capacity(shapes.len());
        let mut dropped = Vec::new();
        for (id, sh) in shapes {
            let descriptor = perturb(&descriptors[id as usize], spec.descriptor_noise, &mut rng);
            let occluded = spec
                .occlusions
                .iter()
                .any(|o| (o.frames[0]..o.frames[1]).contains(&t) && o.ids.contains(&id));
            let (feature, visible) = match sh {
                Shape2::Point(p) => {
                    let p = warp.apply(t, p);
                    (GeometricFeature::point2d(id, descriptor, p), in_view(p))
                }
                Shape2::Segment([a, b]) => {
                    let (a, b) = (warp.apply(t, a), warp.apply(t, b));
                    let line = Line2::through(a, b)?;
                    (GeometricFeature::line2d(id, descriptor, line), in_view(a) && in_view(b))
                }
            };
            if occluded || (spec.clip_to_view && !visible) {
                dropped.push(id);
            } else {
                features.push(feature);
            }
        }
        if features.is_empty() {
            return Err(SimError::Infeasible { frame: t });
        }
        let frame_labels = planted
            .iter()
            .filter(|p| p.ids.iter().all(|id| !dropped.contains(id)))
            .map(|p| p.ids.clone())
            .collect();
        frames.push(features);
        labels.push(frame_labels);
        dropped_all.push(dropped);
    }
    Ok(LabeledTrace {
        trace: DemonstrationTrace {
            id: spec.trace_id,
            frames,
        },
        labels,
        dropped: dropped_all,
    })
}

/// Generates several traces in parallel; output order follows `specs`.
pub fn generate_batch(specs: &[SceneSpec]) -> Result<Vec<LabeledTrace>, SimError> {
    specs.par_iter().map(generate).collect()
}
