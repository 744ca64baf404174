//! Synthetic demonstrations with planted ground-truth associations, and the
//! oracle that scores a kernel against them.

mod generate;
mod oracle;
mod spec;
mod trace_io;

pub use generate::{generate, generate_batch, LabeledTrace};
pub use oracle::{oracle_eval, pooled_accuracy, rank_frames, score_rankings, FrameVerdict, OracleMetrics};
pub use spec::{Camera, Occlusion, PlantedTuple, Preset, SceneSpec};
pub use trace_io::{read_traces, write_traces, write_traces_to_string};

use thiserror::Error;

use crate::geometry::GeometryError;
use crate::kernelnet::KernelError;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid scene spec: {0}")]
    InvalidSpec(String),
    #[error("every feature is hidden in frame {frame}")]
    Infeasible { frame: usize },
    #[error("trace i/o: {0}")]
    Io(String),
    #[error("trace line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Kernel(#[from] KernelError),
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{error_l2l, Coords, FeatureId, GeometricFeature, KernelKind};
    use crate::kernelnet::{enumerate_instances, KernelConfig, KernelParameters};
    use proptest::prelude::*;

    fn point(f: &GeometricFeature) -> [f64; 2] {
        match f.coords {
            Coords::Point2d(p) => p,
            _ => panic!("not a point"),
        }
    }

    fn find(frame: &[GeometricFeature], id: FeatureId) -> Option<&GeometricFeature> {
        frame.iter().find(|f| f.id == id)
    }

    fn pair_distance(frame: &[GeometricFeature], a: FeatureId, b: FeatureId) -> f64 {
        let (p, q) = (point(find(frame, a).unwrap()), point(find(frame, b).unwrap()));
        (p[0] - q[0]).hypot(p[1] - q[1])
    }

    #[test]
    fn noiseless_planted_pairs_coincide_at_the_end() {
        let spec = SceneSpec {
            epsilon: 0.0,
            wobble: 0.0,
            distractor_std: 0.0,
            descriptor_noise: 0.0,
            ..SceneSpec::preset(Preset::Sorting, 4)
        };
        let lt = generate(&spec).unwrap();
        let last = lt.trace.frames.last().unwrap();
        for p in spec.planted() {
            assert_eq!(point(find(last, p.ids[0]).unwrap()), point(find(last, p.ids[1]).unwrap()));
        }
    }

    #[test]
    fn fixed_seed_is_bitwise_reproducible() {
        for preset in Preset::ALL {
            let spec = SceneSpec::preset(preset, 17);
            let a = write_traces_to_string(&[generate(&spec).unwrap()]);
            let b = write_traces_to_string(&[generate(&spec).unwrap()]);
            assert_eq!(a, b, "{preset}");
        }
    }

    #[test]
    fn sorting_preset_shape() {
        let lt = generate(&SceneSpec::preset(Preset::Sorting, 1)).unwrap();
        assert_eq!(lt.frames(), 40);
        assert!(lt.trace.frames.iter().all(|f| f.len() == 12));
        assert!(lt.labels.iter().all(|l| l.len() == 3));
    }

    #[test]
    fn insertion_emits_points_and_lines() {
        let spec = SceneSpec::preset(Preset::Insertion, 2);
        let lt = generate(&spec).unwrap();
        let first = &lt.trace.frames[0];
        assert!(first.iter().any(|f| matches!(f.coords, Coords::Point2d(_))));
        assert!(first.iter().any(|f| matches!(f.coords, Coords::Line2d(_))));
        let l2l: Vec<_> = spec.planted().into_iter().filter(|p| p.kind == KernelKind::L2l).collect();
        assert_eq!(l2l.len(), 2);
        let last = lt.trace.frames.last().unwrap();
        for p in l2l {
            let line = |id| match &find(last, id).unwrap().coords {
                Coords::Line2d(l) => l.clone(),
                _ => unreachable!(),
            };
            let e = error_l2l(&line(p.ids[0]), &line(p.ids[1])).unwrap();
            assert!(e[0].abs() <= spec.epsilon && e[1].abs() <= spec.epsilon, "{e:?}");
        }
    }

    #[test]
    fn occlusion_keeps_a_secondary_pair() {
        let spec = SceneSpec::preset(Preset::Occlusion, 3);
        let lt = generate(&spec).unwrap();
        let occ = &spec.occlusions[0];
        let template = KernelKind::P2p.template();
        for t in occ.frames[0]..occ.frames[1] {
            let frame = &lt.trace.frames[t];
            assert!(occ.ids.iter().all(|id| find(frame, *id).is_none()));
            assert!(!lt.labels[t].is_empty());
            assert!(!lt.labels[t].contains(&vec![0, 3]));
            let inst = enumerate_instances(frame, &template, 1000, 0).unwrap();
            assert!(lt.labels[t].iter().all(|l| inst.instances.iter().any(|i| &i.ids == l)));
        }
        assert_eq!(lt.labels[0].len(), 3);
    }

    #[test]
    fn out_of_view_features_are_dropped() {
        let spec = SceneSpec::preset(Preset::OutOfFov, 5);
        let lt = generate(&spec).unwrap();
        let [w, h] = spec.image_size;
        assert!(lt.dropped.iter().any(|d| !d.is_empty()));
        for frame in &lt.trace.frames {
            for f in frame {
                let p = point(f);
                assert!(p[0] >= 0.0 && p[0] <= w && p[1] >= 0.0 && p[1] <= h);
            }
        }
    }

    #[test]
    fn all_hidden_frame_is_infeasible() {
        let mut spec = SceneSpec::preset(Preset::Sorting, 0);
        spec.occlusions = vec![Occlusion {
            frames: [5, 6],
            ids: (0..spec.feature_count() as FeatureId).collect(),
        }];
        assert!(matches!(generate(&spec), Err(SimError::Infeasible { frame: 5 })));
    }

    #[test]
    fn invalid_specs_are_rejected() {
        assert!(SceneSpec::from_json(r#"{"preset": "sorting", "kernels": ["p2x"]}"#).is_err());
        assert!(SceneSpec::from_json(r#"{"preset": "juggling"}"#).is_err());
        assert!(SceneSpec::from_json(r#"{"frames": 1}"#).is_err());
        assert!(SceneSpec::from_json(r#"{"unknown_field": 3}"#).is_err());
        assert!(SceneSpec::from_json(r#"{"object_points": 1}"#).is_err());
        let spec = SceneSpec::from_json(r#"{"preset": "occlusion", "seed": 8, "frames": 12}"#).unwrap();
        assert_eq!(spec.seed, 8);
        assert_eq!(spec.frames, 12);
        assert_eq!(spec.preset, Preset::Occlusion);
    }

    #[test]
    fn jsonl_round_trip_is_bit_exact() {
        let traces: Vec<LabeledTrace> = [Preset::Insertion, Preset::OutOfFov]
            .iter()
            .enumerate()
            .map(|(i, &p)| {
                let mut s = SceneSpec::preset(p, 31);
                s.trace_id = i as u32;
                generate(&s).unwrap()
            })
            .collect();
        let text = write_traces_to_string(&traces);
        let back = read_traces(text.as_bytes()).unwrap();
        assert_eq!(back, traces);
        assert_eq!(write_traces_to_string(&back), text);
    }

    #[test]
    fn malformed_lines_are_reported() {
        let bad_coords = r#"{"frame_index":0,"features":[{"id":1,"kind":"point2d","descriptor":[1.0],"coords":[1.0]}],"labels":[]}"#;
        assert!(matches!(read_traces(bad_coords.as_bytes()), Err(SimError::Parse { line: 1, .. })));
        let bad_label = r#"{"frame_index":0,"features":[],"labels":[[1,2]]}"#;
        assert!(read_traces(bad_label.as_bytes()).is_err());
        let gap = "{\"frame_index\":0,\"features\":[]}\n{\"frame_index\":2,\"features\":[]}\n";
        assert!(matches!(read_traces(gap.as_bytes()), Err(SimError::Parse { line: 2, .. })));
    }

    #[test]
    fn always_planted_ranking_scores_full_marks() {
        let lt = generate(&SceneSpec::preset(Preset::Occlusion, 6)).unwrap();
        let rankings: Vec<Vec<Vec<FeatureId>>> = lt.labels.iter().map(|l| vec![l[0].clone()]).collect();
        let m = score_rankings(&lt, &rankings, 10);
        assert_eq!(m.top1_accuracy, 1.0);
        assert_eq!(m.topp_hit_rate, 1.0);
        assert_eq!(m.dropped_frame_accuracy, Some(1.0));
    }

    #[test]
    fn occluded_pair_no_longer_counts() {
        let lt = generate(&SceneSpec::preset(Preset::Occlusion, 6)).unwrap();
        let rankings: Vec<Vec<Vec<FeatureId>>> = (0..lt.frames()).map(|_| vec![vec![0, 3]]).collect();
        let m = score_rankings(&lt, &rankings, 1);
        let visible = lt.labels.iter().filter(|l| l.contains(&vec![0, 3])).count();
        assert_eq!(m.top1_accuracy, visible as f64 / lt.frames() as f64);
        assert_eq!(m.dropped_frame_accuracy, Some(0.0));
    }

    #[test]
    fn untrained_uniform_kernel_hits_k_over_m() {
        // Uniform weights tie everywhere, so the first enumerated pair is
        // always selected. Averaging over every placement of k planted pairs
        // among the m pairs of 4 points gives exactly k/m.
        let frame: Vec<GeometricFeature> = (0..4)
            .map(|i| GeometricFeature::point2d(i, vec![1.0, 0.0], [i as f64 * 10.0, 5.0]))
            .collect();
        let params = KernelParameters::zeros(KernelConfig {
            hidden_dim: 3,
            layers: 1,
            ..KernelConfig::new(KernelKind::P2p, 2)
        })
        .unwrap();
        let pairs: Vec<Vec<FeatureId>> = enumerate_instances(&frame, &KernelKind::P2p.template(), 10, 0)
            .unwrap()
            .instances
            .into_iter()
            .map(|i| i.ids)
            .collect();
        let m = pairs.len();
        for k in 1..=3usize {
            let mut hits = 0.0;
            let mut placements = 0.0;
            for mask in 0u32..(1 << m) {
                if mask.count_ones() as usize != k {
                    continue;
                }
                let labels: Vec<Vec<FeatureId>> =
                    (0..m).filter(|b| mask & (1 << b) != 0).map(|b| pairs[b].clone()).collect();
                let lt = LabeledTrace {
                    trace: crate::irl::DemonstrationTrace {
                        id: 0,
                        frames: vec![frame.clone()],
                    },
                    labels: vec![labels],
                    dropped: vec![vec![]],
                };
                hits += oracle_eval(&params, &lt, 1, 100, 0).unwrap().top1_accuracy;
                placements += 1.0;
            }
            assert!((hits / placements - k as f64 / m as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn descriptor_similarity_falls_with_noise() {
        let mean_cos = |noise: f64| {
            let spec = SceneSpec {
                descriptor_noise: noise,
                ..SceneSpec::preset(Preset::Sorting, 9)
            };
            let lt = generate(&spec).unwrap();
            let first = &lt.trace.frames[0];
            let mut acc = 0.0;
            let mut n = 0.0;
            for frame in &lt.trace.frames[1..] {
                for (a, b) in first.iter().zip(frame) {
                    acc += a.descriptor.iter().zip(&b.descriptor).map(|(x, y)| x * y).sum::<f64>();
                    n += 1.0;
                }
            }
            acc / n
        };
        let levels = [0.0, 0.02, 0.1, 0.5];
        let cos: Vec<f64> = levels.iter().map(|&n| mean_cos(n)).collect();
        assert!((cos[0] - 1.0).abs() < 1e-12);
        assert!(cos[1] > 0.97);
        for w in cos.windows(2) {
            assert!(w[1] < w[0]);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn planted_distance_shrinks(seed in 0u64..10_000, preset_idx in 0usize..3) {
            let preset = [Preset::Sorting, Preset::RandomTarget, Preset::MovingCamera][preset_idx];
            let spec = SceneSpec::preset(preset, seed);
            let lt = generate(&spec).unwrap();
            let (first, last) = (&lt.trace.frames[0], lt.trace.frames.last().unwrap());
            for p in spec.planted() {
                let d0 = pair_distance(first, p.ids[0], p.ids[1]);
                let d1 = pair_distance(last, p.ids[0], p.ids[1]);
                prop_assert!(d1 < d0);
                if preset != Preset::MovingCamera {
                    prop_assert!(d1 <= spec.epsilon);
                }
            }
        }
    }
}
