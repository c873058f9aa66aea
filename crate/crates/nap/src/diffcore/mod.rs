//! Minimal reverse-mode automatic differentiation over dense real arrays.
//!
//! Computation runs at 64-bit precision. No graph optimization or fusion is
//! performed; tapes are rebuilt per forward pass.

mod array;
mod tape;

pub use array::{matmul, matmul_nt, matmul_tn, Array};
pub use tape::{DiffError, NodeId, Tape};

use std::rc::Rc;

/// Masked scaled dot-product attention: `softmax(q k^T / sqrt(d) + mask) v`.
///
/// `mask[i * keys + j]` states whether query row `i` may attend key row `j`.
/// Masked pairs receive exactly zero attention weight and zero gradient.
pub fn masked_attention(
    tape: &mut Tape,
    q: NodeId,
    k: NodeId,
    v: NodeId,
    mask: Rc<Vec<bool>>,
) -> NodeId {
    let d = tape.value(q).cols();
    let scores = tape.matmul_nt(q, k);
    let scaled = tape.scale(scores, 1.0 / (d as f64).sqrt());
    let weights = tape.masked_softmax_rows(scaled, mask);
    tape.matmul(weights, v)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Central finite differences over leaf inputs, the gradient oracle.
    fn finite_diff(f: impl Fn(&[Array]) -> f64, inputs: &[Array], step: f64) -> Vec<Array> {
        inputs
            .iter()
            .enumerate()
            .map(|(p, arr)| {
                let mut grad = Array::zeros(arr.shape());
                for i in 0..arr.len() {
                    let mut plus = inputs.to_vec();
                    plus[p].data_mut()[i] += step;
                    let mut minus = inputs.to_vec();
                    minus[p].data_mut()[i] -= step;
                    grad.data_mut()[i] = (f(&plus) - f(&minus)) / (2.0 * step);
                }
                grad
            })
            .collect()
    }

    fn assert_close(a: f64, b: f64, tol: f64) {
        let denom = 1.0_f64.max(a.abs()).max(b.abs());
        assert!(
            (a - b).abs() / denom < tol,
            "expected {a} ~ {b} (rel tol {tol})"
        );
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.leaf(Array::matrix(1, 2, vec![0.0, 0.0]));
        let y = tape.softmax_rows(x);
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn log_sum_exp_of_pair() {
        let mut tape = Tape::new();
        let x = tape.leaf(Array::matrix(1, 2, vec![3.0, 3.0]));
        let y = tape.log_sum_exp_rows(x);
        assert_close(tape.value(y).data()[0], 3.0 + 2.0_f64.ln(), 1e-12);
        assert_close(tape.value(y).data()[0], 3.693147, 1e-6);
    }

    #[test]
    fn self_only_attention_returns_value_rows() {
        // Every query attends only itself, so the output is the value
        // projection of that token.
        let mut tape = Tape::new();
        let q = tape.leaf(Array::matrix(3, 2, vec![1.0, 0.0, 0.0, 1.0, 2.0, -1.0]));
        let k = tape.leaf(Array::matrix(3, 2, vec![0.3, 0.7, -1.0, 0.2, 0.5, 0.5]));
        let v = tape.leaf(Array::matrix(3, 2, vec![10.0, 1.0, 20.0, 2.0, 30.0, 3.0]));
        let mask: Vec<bool> = (0..9).map(|i| i % 4 == 0).collect();
        let out = masked_attention(&mut tape, q, k, v, Rc::new(mask));
        assert_eq!(tape.value(out).data(), tape.value(v).data());
    }

    #[test]
    fn square_gradient() {
        let mut tape = Tape::new();
        let w = tape.leaf(Array::scalar(3.0));
        let loss = tape.mul(w, w);
        let (value, grads) = tape.value_and_grad(loss, &[w]).unwrap();
        assert_eq!(value, 9.0);
        assert_eq!(grads[0].data(), &[6.0]);
    }

    #[test]
    fn softmax_cross_entropy_uniform_logits_gradient() {
        // With uniform logits over n buckets and a one-hot target the
        // per-logit gradient of the NLL is 1/n - target.
        let n = 5;
        let target = 2;
        let mut tape = Tape::new();
        let logits = tape.leaf(Array::matrix(1, n, vec![0.0; n]));
        let lse = tape.log_sum_exp_rows(logits);
        let log_probs = tape.sub_col(logits, lse);
        let picked = tape.take_per_row(log_probs, Rc::new(vec![target]));
        let picked = tape.mean_all(picked);
        let loss = tape.neg(picked);
        let (_, grads) = tape.value_and_grad(loss, &[logits]).unwrap();
        for (j, g) in grads[0].data().iter().enumerate() {
            let expected = 1.0 / n as f64 - if j == target { 1.0 } else { 0.0 };
            assert_close(*g, expected, 1e-12);
        }
    }

    #[test]
    fn gradient_accumulates_when_parameter_used_twice() {
        let mut tape = Tape::new();
        let w = tape.leaf(Array::scalar(2.0));
        let a = tape.mul(w, w); // w^2, d/dw = 4
        let sum = tape.add(a, w); // + w, d/dw = 1
        let loss = tape.sum_all(sum);
        let (_, grads) = tape.value_and_grad(loss, &[w]).unwrap();
        assert_eq!(grads[0].data(), &[5.0]);
    }

    #[test]
    fn unreached_parameter_gets_zero_gradient() {
        let mut tape = Tape::new();
        let w = tape.leaf(Array::scalar(2.0));
        let unused = tape.leaf(Array::matrix(2, 2, vec![1.0; 4]));
        let loss = tape.mul(w, w);
        let (_, grads) = tape.value_and_grad(loss, &[w, unused]).unwrap();
        assert_eq!(grads[1].data(), &[0.0; 4]);
    }

    #[test]
    fn masked_attention_blocks_gradient_across_masked_pairs() {
        // Query 0 may only attend key 0; perturbing v row 1 must not change
        // the gradient flowing into it from query 0's output.
        let mut tape = Tape::new();
        let q = tape.leaf(Array::matrix(1, 2, vec![0.4, -0.3]));
        let k = tape.leaf(Array::matrix(2, 2, vec![0.1, 0.2, 0.9, -0.5]));
        let v = tape.leaf(Array::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]));
        let mask = Rc::new(vec![true, false]);
        let out = masked_attention(&mut tape, q, k, v, mask);
        let loss = tape.sum_all(out);
        let (_, grads) = tape.value_and_grad(loss, &[v, k]).unwrap();
        assert_eq!(&grads[0].data()[2..], &[0.0, 0.0], "masked value row");
        assert_eq!(&grads[1].data()[2..], &[0.0, 0.0], "masked key row");
    }

    #[test]
    fn two_layer_network_gradient_matches_finite_differences() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let mut rand_mat = |r: usize, c: usize| {
            Array::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
        };
        let x = rand_mat(4, 3);
        let w1 = rand_mat(3, 5);
        let b1 = rand_mat(1, 5);
        let w2 = rand_mat(5, 2);
        let g = rand_mat(1, 5).map(|v| 1.0 + 0.1 * v);
        let b = rand_mat(1, 5);
        let inputs = vec![w1.clone(), b1.clone(), w2.clone(), g.clone(), b.clone()];

        let run = |p: &[Array]| {
            let mut tape = Tape::new();
            let xn = tape.leaf(x.clone());
            let ids: Vec<_> = p.iter().map(|a| tape.leaf(a.clone())).collect();
            let h = tape.matmul(xn, ids[0]);
            let h = tape.add_row(h, ids[1]);
            let h = tape.layer_norm(h, ids[3], ids[4], 1e-6);
            let h = tape.tanh(h);
            let out = tape.matmul(h, ids[2]);
            let sq = tape.mul(out, out);
            let loss = tape.mean_all(sq);
            (tape, ids, loss)
        };

        let (tape, ids, loss) = run(&inputs);
        let (value, grads) = tape.value_and_grad(loss, &ids).unwrap();

        let oracle = finite_diff(
            |p| {
                let (tape, _, loss) = run(p);
                tape.value(loss).scalar_value()
            },
            &inputs,
            1e-5,
        );
        assert!(value.is_finite());
        for (g, fd) in grads.iter().zip(&oracle) {
            for (a, b) in g.data().iter().zip(fd.data()) {
                let denom = 1e-8_f64.max(a.abs()).max(b.abs());
                assert!((a - b).abs() / denom < 1e-4, "grad {a} vs fd {b}");
            }
        }
    }

    #[test]
    fn non_finite_intermediate_is_reported_with_op_name() {
        let mut tape = Tape::new();
        let x = tape.leaf(Array::scalar(1e308));
        let big = tape.exp(x);
        let loss = tape.sum_all(big);
        let err = tape.value_and_grad(loss, &[x]).unwrap_err();
        assert!(matches!(err, DiffError::NonFinite { op: "exp" }));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(Array::matrix(1, 2, vec![1.0, 2.0]));
        let err = tape.value_and_grad(x, &[x]).unwrap_err();
        assert!(matches!(err, DiffError::NonScalarLoss { .. }));
    }
}
