//! Dense tensors and the reverse-mode tape used by every learnable operation.

mod kernels;
mod tape;
mod tensor;

pub use kernels::{sigmoid, softmax};
pub use tape::{Gradients, OpKind, ParamId, Tape, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("shape {shape:?} does not hold {len} elements")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("{op}: expected {expected} inputs, got {got}")]
    Arity {
        op: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("backward called on an empty tape")]
    EmptyTape,
    #[error("node {0} is not on this tape")]
    UnknownVar(usize),
    #[error("scalar seed needs a one-element output, got shape {shape:?}")]
    NonScalarSeed { shape: Vec<usize> },
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
        let data = (0..rows * cols).map(|_| rng.random_range(-2.0..2.0)).collect();
        Tensor::matrix(rows, cols, data).unwrap()
    }

    /// Central difference of a scalar function of one input tensor.
    fn numeric_grad(f: &dyn Fn(&Tensor) -> f64, x: &Tensor, eps: f64) -> Vec<f64> {
        (0..x.len())
            .map(|i| {
                let mut hi = x.clone();
                hi.data_mut()[i] += eps;
                let mut lo = x.clone();
                lo.data_mut()[i] -= eps;
                (f(&hi) - f(&lo)) / (2.0 * eps)
            })
            .collect()
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
    }

    #[test]
    fn matmul_shape_algebra() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let b = tape.constant(Tensor::column(vec![1.0, 0.0, -1.0]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).shape(), &[2, 1]);
        assert_eq!(tape.value(c).data(), &[-2.0, -2.0]);
    }

    #[test]
    fn matmul_mismatch_names_op_and_shapes() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 1]));
        let err = tape.matmul(a, b).unwrap_err();
        assert_eq!(
            err,
            NumericError::ShapeMismatch {
                op: "matmul",
                lhs: vec![2, 3],
                rhs: vec![2, 1]
            }
        );
        assert!(err.to_string().contains("matmul"));
    }

    #[test]
    fn sigmoid_and_softmax_values() {
        let mut tape = Tape::<f64>::new();
        let z = tape.constant(Tensor::scalar(0.0));
        let s = tape.sigmoid(z).unwrap();
        assert_eq!(tape.value(s).item(), 0.5);

        let c = tape.constant(Tensor::column(vec![0.7, 0.7, 0.7]));
        let sm = tape.softmax(c).unwrap();
        for &g in tape.value(sm).data() {
            assert!((g - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn square_and_sigmoid_gradients() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(3.0));
        let sq = tape.mul(x, x).unwrap();
        let g = tape.backward(sq, 1.0).unwrap();
        assert_eq!(g.param(ParamId(0)).item(), 6.0);

        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(0.0));
        let s = tape.sigmoid(x).unwrap();
        let g = tape.backward(s, 1.0).unwrap();
        assert_eq!(g.param(ParamId(0)).item(), 0.25);
    }

    #[test]
    fn backward_on_empty_tape_is_an_error() {
        let tape = Tape::<f64>::new();
        assert_eq!(
            tape.backward_from(&[]).unwrap_err(),
            NumericError::EmptyTape
        );
        let mut other = Tape::<f64>::new();
        let v = other.constant(Tensor::scalar(1.0));
        assert_eq!(tape.backward(v, 1.0).unwrap_err(), NumericError::UnknownVar(0));
    }

    #[test]
    fn constants_get_no_gradient_and_reuse_accumulates() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::scalar(2.0));
        let c = tape.constant(Tensor::scalar(5.0));
        // f = w*c + w*w  => df/dw = c + 2w = 9
        let wc = tape.mul(w, c).unwrap();
        let ww = tape.mul(w, w).unwrap();
        let f = tape.add(wc, ww).unwrap();
        let g = tape.backward(f, 1.0).unwrap();
        assert_eq!(g.len(), 1);
        assert_eq!(g.param(ParamId(0)).item(), 9.0);
    }

    #[test]
    fn non_finite_forward_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::scalar(f64::MAX));
        let err = tape.affine(x, 10.0, 0.0).unwrap_err();
        assert_eq!(err, NumericError::NonFinite { op: "affine" });
    }

    /// Three dense layers with every op kind on the path.
    fn composite(tape: &mut Tape, x: Var, w1: Var, b1: Var, w2: Var, w3: Var) -> Var {
        let h1 = tape.linear(x, w1, b1).unwrap();
        let a1 = tape.tanh(h1).unwrap();
        let cat = tape.concat(a1, x).unwrap();
        let h2 = tape.matmul(cat, w2).unwrap();
        let a2 = tape.sigmoid(h2).unwrap();
        let gated = tape.mul(a2, a2).unwrap();
        let shifted = tape.affine(gated, -1.5, 0.25).unwrap();
        let h3 = tape.matmul(shifted, w3).unwrap();
        let t = tape.transpose(h3).unwrap();
        let sm = tape.softmax(t).unwrap();
        let d = tape.sub(sm, t).unwrap();
        let n = tape.l2_norm(d).unwrap();
        let s = tape.sum(sm).unwrap();
        tape.add(n, s).unwrap()
    }

    #[test]
    fn three_layer_composite_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = rand_tensor(&mut rng, 4, 3);
        let params = vec![
            rand_tensor(&mut rng, 3, 5),
            rand_tensor(&mut rng, 1, 5),
            rand_tensor(&mut rng, 8, 2),
            rand_tensor(&mut rng, 2, 1),
        ];
        let eval = |ps: &[Tensor]| -> (f64, Gradients) {
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let vs: Vec<Var> = ps.iter().map(|p| tape.param(p.clone())).collect();
            let out = composite(&mut tape, xv, vs[0], vs[1], vs[2], vs[3]);
            let val = tape.value(out).item();
            (val, tape.backward(out, 1.0).unwrap())
        };
        let (_, grads) = eval(&params);
        for (pi, p) in params.iter().enumerate() {
            let f = |t: &Tensor| {
                let mut ps = params.clone();
                ps[pi] = t.clone();
                eval(&ps).0
            };
            let num = numeric_grad(&f, p, 1e-5);
            for (i, &n) in num.iter().enumerate() {
                let a = grads.param(ParamId(pi)).data()[i];
                assert!(rel_err(a, n) < 1e-6, "param {pi}[{i}]: {a} vs {n}");
            }
        }
    }

    #[test]
    fn f32_tape_runs_the_same_ops() {
        let mut tape = Tape::<f32>::new();
        let x = tape.param(Tensor::scalar(0.5f32));
        let t = tape.tanh(x).unwrap();
        let g = tape.backward(t, 1.0).unwrap();
        let expected = 1.0 - 0.5f32.tanh().powi(2);
        assert!((g.param(ParamId(0)).item() - expected).abs() < 1e-6);
    }

    #[test]
    fn forward_is_bitwise_reproducible() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_tensor(&mut rng, 4, 3);
        let ws = [
            rand_tensor(&mut rng, 3, 5),
            rand_tensor(&mut rng, 1, 5),
            rand_tensor(&mut rng, 8, 2),
            rand_tensor(&mut rng, 2, 1),
        ];
        let run = || {
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let vs: Vec<Var> = ws.iter().map(|p| tape.param(p.clone())).collect();
            let out = composite(&mut tape, xv, vs[0], vs[1], vs[2], vs[3]);
            tape.value(out).item().to_bits()
        };
        assert_eq!(run(), run());
    }

    fn unary_strategy() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-2.0f64..2.0, 6)
    }

    /// Checks one op's backward through `Σ cᵢ·opᵢ(x)` with fixed weights `c`.
    fn check_op(kind: OpKind<f64>, x: Vec<f64>, y: Option<Vec<f64>>, shapes: ([usize; 2], [usize; 2])) {
        let xt = Tensor::new(shapes.0.to_vec(), x).unwrap();
        let yt = y.map(|d| Tensor::new(shapes.1.to_vec(), d).unwrap());
        let eval = |xt: &Tensor, yt: Option<&Tensor>| -> (f64, Gradients) {
            let mut tape = Tape::new();
            let xv = tape.param(xt.clone());
            let mut inputs = vec![xv];
            if let Some(y) = yt {
                inputs.push(tape.param(y.clone()));
            }
            let out = tape.apply(kind, &inputs).unwrap();
            let n = tape.value(out).len();
            let weights = Tensor::new(
                tape.value(out).shape().to_vec(),
                (0..n).map(|i| 0.3 + 0.17 * i as f64).collect(),
            )
            .unwrap();
            let w = tape.constant(weights);
            let prod = tape.mul(out, w).unwrap();
            let total = tape.sum(prod).unwrap();
            (tape.value(total).item(), tape.backward(total, 1.0).unwrap())
        };
        let (_, grads) = eval(&xt, yt.as_ref());
        let fx = |t: &Tensor| eval(t, yt.as_ref()).0;
        for (i, n) in numeric_grad(&fx, &xt, 1e-5).into_iter().enumerate() {
            let a = grads.param(ParamId(0)).data()[i];
            assert!(rel_err(a, n) < 1e-6, "{} dx[{i}] {a} vs {n}", kind.name());
        }
        if let Some(y) = &yt {
            let fy = |t: &Tensor| eval(&xt, Some(t)).0;
            for (i, n) in numeric_grad(&fy, y, 1e-5).into_iter().enumerate() {
                let a = grads.param(ParamId(1)).data()[i];
                assert!(rel_err(a, n) < 1e-6, "{} dy[{i}] {a} vs {n}", kind.name());
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn unary_ops_match_finite_differences(x in unary_strategy()) {
            for kind in [
                OpKind::Sigmoid,
                OpKind::Tanh,
                OpKind::Softmax,
                OpKind::Sum,
                OpKind::L2Norm,
                OpKind::Transpose,
                OpKind::Affine { scale: -0.7, shift: 0.2 },
            ] {
                check_op(kind, x.clone(), None, ([2, 3], [0, 0]));
            }
        }

        #[test]
        fn binary_ops_match_finite_differences(x in unary_strategy(), y in unary_strategy()) {
            for kind in [OpKind::Add, OpKind::Sub, OpKind::Mul, OpKind::Concat] {
                check_op(kind, x.clone(), Some(y.clone()), ([2, 3], [2, 3]));
            }
            check_op(OpKind::MatMul, x.clone(), Some(y.clone()), ([2, 3], [3, 2]));
            check_op(OpKind::AddRow, x.clone(), Some(y[..3].to_vec()), ([2, 3], [1, 3]));
        }
    }
}
