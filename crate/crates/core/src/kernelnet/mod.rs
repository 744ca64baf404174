//! Graph-instance enumeration and the learnable relevance function: message
//! passing with a gated recurrent update, readout, and select-out softmax.

mod checkpoint;
mod ensemble;
mod enumerate;
mod forward;
mod params;
mod select;

pub use checkpoint::{KernelCheckpoint, NamedTensor, CHECKPOINT_VERSION};
pub use ensemble::{EnsembleOutput, KernelEnsemble};
pub use enumerate::{enumerate_instances, Enumeration, GraphInstance, DEFAULT_CAP};
pub use forward::{
    build_frame_graph, evaluate_instances, frame_control_error, message_pass, FrameGraph,
    FrameOutput,
};
pub use params::{
    Affine, BoundParams, GateWeights, GruWeights, KernelConfig, KernelParameters, ScoreInput,
};
pub use select::{select_out, SelectOutResult};

use std::fmt;

use thiserror::Error;

use crate::numeric::NumericError;

/// Where in the network a numeric failure happened.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Embedding,
    /// Message-passing layer, zero based.
    Layer(usize),
    Readout,
    SelectOut,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Stage::Embedding => f.write_str("embedding"),
            Stage::Layer(t) => write!(f, "layer {t}"),
            Stage::Readout => f.write_str("readout"),
            Stage::SelectOut => f.write_str("select-out"),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KernelError {
    #[error("no instances")]
    NoInstances,
    #[error("{stage}: {source}")]
    Numeric {
        stage: Stage,
        #[source]
        source: NumericError,
    },
    #[error("descriptor has dimension {got}, kernel expects {expected}")]
    DescriptorDim { expected: usize, got: usize },
    #[error("invalid kernel configuration: {0}")]
    Config(String),
    #[error("invalid checkpoint: {0}")]
    Checkpoint(String),
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{GeometricFeature, KernelKind, Line2};
    use crate::numeric::{Tape, Tensor};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_config(kind: KernelKind, d: usize) -> KernelConfig {
        KernelConfig {
            hidden_dim: 5,
            layers: 3,
            ..KernelConfig::new(kind, d)
        }
    }

    fn random_points(rng: &mut ChaCha8Rng, n: u32, d: usize) -> Vec<GeometricFeature> {
        (0..n)
            .map(|id| {
                let desc = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
                let xy = [rng.random_range(0.0..100.0), rng.random_range(0.0..100.0)];
                GeometricFeature::point2d(id, desc, xy)
            })
            .collect()
    }

    #[test]
    fn zero_weights_give_half_relevance() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let frame = random_points(&mut rng, 3, 4);
        let params = KernelParameters::zeros(small_config(KernelKind::P2p, 4)).unwrap();
        let e = enumerate_instances(&frame, &KernelKind::P2p.template(), 10, 0).unwrap();
        for inst in &e.instances {
            assert_eq!(message_pass(inst, &frame, &params).unwrap(), 0.5);
        }
    }

    #[test]
    fn untrained_zero_params_average_all_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let frame = random_points(&mut rng, 5, 4);
        let params = KernelParameters::zeros(small_config(KernelKind::P2p, 4)).unwrap();
        let out = frame_control_error(&frame, &params, 100, 3, 0).unwrap();
        let m = out.instances.len() as f64;
        for &g in &out.select.weights {
            assert!((g - 1.0 / m).abs() < 1e-15);
        }
        let mut mean = [0.0; 2];
        for inst in &out.instances {
            mean[0] += inst.error[0] / m;
            mean[1] += inst.error[1] / m;
        }
        assert!((out.ec[0] - mean[0]).abs() < 1e-12 && (out.ec[1] - mean[1]).abs() < 1e-12);
    }

    #[test]
    fn swapped_nodes_keep_symmetric_relevance() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let frame = random_points(&mut rng, 2, 4);
        let params = KernelParameters::init(small_config(KernelKind::P2p, 4), 5).unwrap();
        let fwd = GraphInstance {
            kind: KernelKind::P2p,
            nodes: vec![0, 1],
            ids: vec![0, 1],
            error: vec![0.0, 0.0],
            relevance: None,
        };
        let rev = GraphInstance {
            nodes: vec![1, 0],
            ids: vec![1, 0],
            ..fwd.clone()
        };
        let a = message_pass(&fwd, &frame, &params).unwrap();
        let b = message_pass(&rev, &frame, &params).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn relevance_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let frame = random_points(&mut rng, 4, 4);
        let run = || {
            let params = KernelParameters::init(small_config(KernelKind::P2p, 4), 77).unwrap();
            frame_control_error(&frame, &params, 100, 2, 0).unwrap()
        };
        let (a, b) = (run(), run());
        for (x, y) in a.instances.iter().zip(&b.instances) {
            assert_eq!(x.relevance.unwrap().to_bits(), y.relevance.unwrap().to_bits());
        }
    }

    #[test]
    fn coincident_pair_dominating_drives_error_to_zero() {
        // Strong readout bias on node-sum lets one descriptor pair dominate.
        let d = 3;
        let mut frame = vec![
            GeometricFeature::point2d(0, vec![1.0, 0.0, 0.0], [10.0, 10.0]),
            GeometricFeature::point2d(1, vec![1.0, 0.0, 0.0], [10.0, 10.0]),
        ];
        frame.push(GeometricFeature::point2d(2, vec![-1.0, 0.0, 0.0], [50.0, 80.0]));
        let mut params = KernelParameters::zeros(KernelConfig {
            hidden_dim: 1,
            layers: 1,
            ..KernelConfig::new(KernelKind::P2p, d)
        })
        .unwrap();
        params.embed.weight = Tensor::matrix(3, 1, vec![3.0, 0.0, 0.0]).unwrap();
        params.readout.weight = Tensor::matrix(1, 1, vec![30.0]).unwrap();
        let out = frame_control_error(&frame, &params, 10, 1, 0).unwrap();
        assert_eq!(out.instances[out.select.top[0]].ids, vec![0, 1]);
        assert!(out.select.weights[out.select.top[0]] > 1.0 - 1e-9);
        assert!(out.ec_norm() < 1e-6);
    }

    #[test]
    fn descriptor_dimension_is_checked() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let frame = random_points(&mut rng, 3, 4);
        let params = KernelParameters::init(small_config(KernelKind::P2p, 6), 0).unwrap();
        assert!(matches!(
            frame_control_error(&frame, &params, 10, 1, 0),
            Err(KernelError::DescriptorDim { expected: 6, got: 4 })
        ));
    }

    #[test]
    fn non_finite_weights_report_the_stage() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let frame = random_points(&mut rng, 2, 2);
        let mut params = KernelParameters::zeros(small_config(KernelKind::P2p, 2)).unwrap();
        params.update.candidate.bias = Tensor::full(&[1, 5], f64::MAX);
        params.update.candidate.input = Tensor::full(&[5, 5], f64::MAX);
        params.message.bias = Tensor::full(&[1, 5], 1.0);
        let e = enumerate_instances(&frame, &KernelKind::P2p.template(), 10, 0).unwrap();
        let err = message_pass(&e.instances[0], &frame, &params).unwrap_err();
        assert!(matches!(err, KernelError::Numeric { stage: Stage::Layer(0), .. }), "{err}");
    }

    #[test]
    fn empty_frame_has_no_instances() {
        let params = KernelParameters::<f64>::zeros(small_config(KernelKind::P2p, 2)).unwrap();
        assert_eq!(
            frame_control_error(&[], &params, 10, 1, 0).unwrap_err(),
            KernelError::NoInstances
        );
    }

    #[test]
    fn p2l_uses_ordered_readout() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut frame = random_points(&mut rng, 2, 3);
        frame.push(GeometricFeature::line2d(9, vec![0.2, -0.4, 0.1], Line2::normalized(1.0, 1.0, -60.0)));
        let params = KernelParameters::init(small_config(KernelKind::P2l, 3), 3).unwrap();
        assert_eq!(params.readout.weight.shape(), &[10, 1]);
        let out = frame_control_error(&frame, &params, 10, 1, 0).unwrap();
        assert_eq!(out.instances.len(), 2);
        assert_eq!(out.ec.len(), 1);
    }

    #[test]
    fn f32_network_tracks_f64() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let frame = random_points(&mut rng, 4, 3);
        let params = KernelParameters::<f64>::init(small_config(KernelKind::P2p, 3), 4).unwrap();
        let p32: KernelParameters<f32> = params.cast();
        let frame32: Vec<GeometricFeature<f32>> = frame
            .iter()
            .map(|f| {
                let crate::geometry::Coords::Point2d([x, y]) = f.coords else { unreachable!() };
                GeometricFeature::point2d(
                    f.id,
                    f.descriptor.iter().map(|&v| v as f32).collect(),
                    [x as f32, y as f32],
                )
            })
            .collect();
        let a = frame_control_error(&frame, &params, 100, 2, 0).unwrap();
        let b = frame_control_error(&frame32, &p32, 100, 2, 0).unwrap();
        for (x, y) in a.select.weights.iter().zip(&b.select.weights) {
            assert!((x - *y as f64).abs() < 1e-5);
        }
    }

    /// Instance-level permutation of the enumerated list.
    fn permuted_output(
        frame: &[GeometricFeature],
        params: &KernelParameters,
        perm: &[usize],
    ) -> (FrameOutput, FrameOutput) {
        let e = enumerate_instances(frame, &params.config.kind.template(), 1000, 0).unwrap();
        let base = evaluate_instances(frame, e.instances.clone(), params, 3).unwrap();
        let shuffled: Vec<GraphInstance> = perm.iter().map(|&i| e.instances[i].clone()).collect();
        let moved = evaluate_instances(frame, shuffled, params, 3).unwrap();
        (base, moved)
    }

    #[test]
    fn gradient_of_ec_norm_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let frame = random_points(&mut rng, 4, 3);
        let cfg = KernelConfig {
            readout_depth: 1,
            ..small_config(KernelKind::P2p, 3)
        };
        let params = KernelParameters::init(cfg, 21).unwrap();
        let instances = enumerate_instances(&frame, &KernelKind::P2p.template(), 100, 0)
            .unwrap()
            .instances;
        let norm_of = |p: &KernelParameters| {
            let mut tape = Tape::new();
            let bound = p.bind(&mut tape);
            let g = build_frame_graph(&mut tape, p, &bound, &frame, &instances, 2).unwrap();
            (tape.value(g.ec_norm).item(), tape.backward(g.ec_norm, 1.0).unwrap())
        };
        let (_, grads) = norm_of(&params);
        let eps = 1e-5;
        for (ti, g) in grads.iter().enumerate() {
            for k in 0..g.len() {
                let mut hi = params.clone();
                hi.tensors_mut()[ti].data_mut()[k] += eps;
                let mut lo = params.clone();
                lo.tensors_mut()[ti].data_mut()[k] -= eps;
                let num = (norm_of(&hi).0 - norm_of(&lo).0) / (2.0 * eps);
                let ana = g.data()[k];
                // Rounding in the central difference is about 1e-10 absolute at this scale.
                let rel = (ana - num).abs() / ana.abs().max(num.abs()).max(1e-2);
                assert!(rel < 1e-5, "tensor {ti}[{k}]: {ana} vs {num}");
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn permuting_instances_permutes_weights(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let frame = random_points(&mut rng, 5, 3);
            let params = KernelParameters::init(small_config(KernelKind::P2p, 3), seed).unwrap();
            let mut perm: Vec<usize> = (0..10).collect();
            for i in (1..perm.len()).rev() {
                perm.swap(i, rng.random_range(0..=i));
            }
            let (base, moved) = permuted_output(&frame, &params, &perm);
            for (k, &i) in perm.iter().enumerate() {
                prop_assert!((moved.select.weights[k] - base.select.weights[i]).abs() < 1e-12);
            }
            for d in 0..2 {
                prop_assert!((moved.ec[d] - base.ec[d]).abs() < 1e-12);
            }
        }

        #[test]
        fn coplanarity_relevance_ignores_node_order(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let frame: Vec<GeometricFeature> = (0..4)
                .map(|id| {
                    let desc = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
                    let p = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
                    GeometricFeature::point3d(id, desc, p)
                })
                .collect();
            let params = KernelParameters::init(small_config(KernelKind::Copl, 3), seed).unwrap();
            let inst = |nodes: Vec<usize>| GraphInstance {
                kind: KernelKind::Copl,
                ids: nodes.iter().map(|&i| i as u32).collect(),
                nodes,
                error: vec![0.0],
                relevance: None,
            };
            let a = message_pass(&inst(vec![0, 1, 2, 3]), &frame, &params).unwrap();
            let b = message_pass(&inst(vec![2, 0, 3, 1]), &frame, &params).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}
