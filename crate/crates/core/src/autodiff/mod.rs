//! Reverse-mode automatic differentiation over small dense matrices.
//!
//! A [`Tape`] records every operation of one forward pass; `backward`
//! replays it in reverse. The primitive set is exactly what the encoder,
//! attention pooling and the training objectives need.

mod check;
mod gru;
mod matrix;
mod tape;

pub use check::{grad_check, relative_error, GradCheckReport};
pub use gru::{gru_cell, gru_sequence, gru_shapes, GruParams};
pub use matrix::Matrix;
pub use tape::{distance_values, softmax_values, Tape, Var, DISTANCE_EPS, LOG_FLOOR};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
        let data = (0..rows * cols).map(|_| rng.gen_range(-scale..scale)).collect();
        Matrix::from_vec(rows, cols, data).unwrap()
    }

    #[test]
    fn softmax_closed_forms() {
        assert_eq!(softmax_values(&[0.0, 0.0]).unwrap(), vec![0.5, 0.5]);
        let p = softmax_values(&[2f64.ln(), 0.0]).unwrap();
        assert!((p[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((p[1] - 1.0 / 3.0).abs() < 1e-15);
        let p = softmax_values(&[0.3, -1.0, 7.0, 2.5, 0.0, -4.0, 1.0]).unwrap();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        // Large inputs survive via max subtraction.
        let p = softmax_values(&[1000.0, 1000.0]).unwrap();
        assert_eq!(p, vec![0.5, 0.5]);
    }

    #[test]
    fn softmax_rejects_non_finite() {
        assert!(matches!(softmax_values(&[1.0, f64::NAN]), Err(Error::Numeric(_))));
        let mut tape = Tape::new();
        let v = tape.leaf(Matrix::column(vec![f64::INFINITY, 0.0]));
        assert!(matches!(tape.softmax(v), Err(Error::Numeric(_))));
    }

    #[test]
    fn distance_examples() {
        assert_eq!(distance_values(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]), 0.0);
        assert!((distance_values(&[0.0, 0.0], &[3.0, 4.0]) - 5.0).abs() < 1e-6);

        let mut tape = Tape::new();
        let a = tape.leaf(Matrix::column(vec![1.0, 2.0]));
        let b = tape.leaf(Matrix::column(vec![1.0, 2.0, 3.0]));
        assert!(matches!(tape.distance(a, b), Err(Error::Shape(_))));
    }

    #[test]
    fn backward_square_and_fan_out() {
        let mut tape = Tape::new();
        let x = tape.leaf(Matrix::scalar(3.0));
        let y = tape.mul(x, x).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).item(), 6.0);

        let mut tape = Tape::new();
        let a = tape.leaf(Matrix::scalar(1.0));
        let s = tape.add(a, a).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(a).item(), 2.0);
    }

    #[test]
    fn backward_contract() {
        let mut tape = Tape::new();
        let v = tape.leaf(Matrix::column(vec![1.0, 2.0]));
        assert_eq!(tape.grad(v), Matrix::zeros(2, 1));
        assert!(matches!(tape.backward(v), Err(Error::Contract(_))));

        let s = tape.sum(v);
        tape.backward(s).unwrap();
        assert!(matches!(tape.backward(s), Err(Error::Contract(_))));
        tape.reset();
        assert!(tape.is_empty());
    }

    #[test]
    fn nodes_are_topologically_ordered() {
        let mut tape = Tape::new();
        let a = tape.leaf(Matrix::scalar(1.0));
        let b = tape.exp(a);
        let c = tape.add(a, b).unwrap();
        assert!(a.id() < b.id() && b.id() < c.id());
    }

    #[test]
    fn gru_zero_params_give_zero_state() {
        let (input, hidden) = (3, 4);
        let mut tape = Tape::new();
        let params = gru_shapes(input, hidden).map(|&(r, c)| tape.leaf(Matrix::zeros(r, c)));
        let x = tape.leaf(Matrix::column(vec![0.7, -2.0, 5.0]));
        let h = tape.leaf(Matrix::zeros(hidden, 1));
        let out = gru_cell(&mut tape, x, h, &params).unwrap();
        assert_eq!(tape.value(out), &Matrix::zeros(hidden, 1));
    }

    #[test]
    fn gru_shape_mismatch() {
        let mut tape = Tape::new();
        let params = gru_shapes(3, 4).map(|&(r, c)| tape.leaf(Matrix::zeros(r, c)));
        let x = tape.leaf(Matrix::column(vec![0.0; 2]));
        let h = tape.leaf(Matrix::zeros(4, 1));
        assert!(matches!(gru_cell(&mut tape, x, h, &params), Err(Error::Shape(_))));
    }

    #[test]
    fn gru_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (input, hidden) = (3, 5);
        let shapes = gru_shapes(input, hidden);
        let mut params: Vec<Matrix> = shapes
            .named()
            .iter()
            .map(|(_, &(r, c))| random_matrix(&mut rng, r, c, 0.8))
            .collect();
        params.push(random_matrix(&mut rng, input, 1, 1.0));
        params.push(random_matrix(&mut rng, hidden, 1, 0.9));
        let report = grad_check(
            |tape, v| {
                let p = GruParams {
                    w_z: v[0],
                    u_z: v[1],
                    b_z: v[2],
                    w_r: v[3],
                    u_r: v[4],
                    b_r: v[5],
                    w_n: v[6],
                    u_n: v[7],
                    b_n: v[8],
                };
                let out = gru_cell(tape, v[9], v[10], &p)?;
                Ok(tape.sum(out))
            },
            &params,
            1e-4,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn grad_check_quadratic() {
        let p = vec![Matrix::column(vec![0.5, -1.5, 2.0]), Matrix::from_vec(2, 2, vec![1.0, 2.0, 3.0, -4.0]).unwrap()];
        let report = grad_check(
            |tape, v| {
                let a = tape.mul(v[0], v[0])?;
                let b = tape.mul(v[1], v[1])?;
                let (sa, sb) = (tape.sum(a), tape.sum(b));
                tape.add(sa, sb)
            },
            &p,
            1e-4,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-8, "{report:?}");
        assert_eq!(report.checked, 7);
    }

    #[test]
    fn grad_check_softmax_cross_entropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = vec![random_matrix(&mut rng, 5, 4, 1.0), random_matrix(&mut rng, 4, 1, 1.0), random_matrix(&mut rng, 5, 1, 0.5)];
        let report = grad_check(
            |tape, v| {
                let logits = tape.matmul(v[0], v[1])?;
                let logits = tape.add(logits, v[2])?;
                let p = tape.softmax(logits)?;
                tape.neg_log_at(p, 2)
            },
            &params,
            1e-4,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }

    #[test]
    fn grad_check_attention_then_gru() {
        // Attention pooling over a 4 x 6 state matrix feeding a GRU step.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let d = 4;
        let mut params = vec![
            random_matrix(&mut rng, d, 6, 1.0), // states
            random_matrix(&mut rng, d, d, 0.7), // transform
            random_matrix(&mut rng, d, 1, 0.3), // bias
            random_matrix(&mut rng, d, 1, 1.0), // query
        ];
        for (_, &(r, c)) in gru_shapes(d, d).named().iter() {
            params.push(random_matrix(&mut rng, r, c, 0.7));
        }
        let report = grad_check(
            |tape, v| {
                let t = tape.matmul(v[1], v[0])?;
                let t = tape.add_column(t, v[2])?;
                let t = tape.tanh(t);
                let scores = tape.trans_matmul(t, v[3])?;
                let alpha = tape.softmax(scores)?;
                let pooled = tape.matmul(t, alpha)?;
                let p = GruParams {
                    w_z: v[4],
                    u_z: v[5],
                    b_z: v[6],
                    w_r: v[7],
                    u_r: v[8],
                    b_r: v[9],
                    w_n: v[10],
                    u_n: v[11],
                    b_n: v[12],
                };
                let h0 = tape.leaf(Matrix::zeros(d, 1));
                let h1 = gru_cell(tape, pooled, h0, &p)?;
                let h2 = gru_cell(tape, pooled, h1, &p)?;
                let target = tape.leaf(Matrix::column(vec![0.1, -0.2, 0.3, 0.0]));
                tape.distance(h2, target)
            },
            &params,
            1e-4,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn grad_check_structural_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let params = vec![random_matrix(&mut rng, 6, 3, 1.0), random_matrix(&mut rng, 3, 1, 1.0)];
        let report = grad_check(
            |tape, v| {
                let g = tape.gather_rows(v[0], &[4, 1, 4])?;
                let c0 = tape.column(g, 0)?;
                let c2 = tape.column(g, 2)?;
                let stacked = tape.hstack(&[c0, v[1], c2])?;
                let top = tape.slice_rows(stacked, 1, 2)?;
                let e = tape.exp(top);
                let s = tape.scale(e, -0.5);
                let m = tape.mean(&[c0, v[1]])?;
                let sg = tape.sigmoid(m);
                let a = tape.sum(s);
                let b = tape.sum(sg);
                let diff = tape.sub(a, b)?;
                tape.mul(diff, diff)
            },
            &params,
            1e-4,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }

    #[test]
    fn gather_rows_checks_range() {
        let mut tape = Tape::new();
        let t = tape.leaf(Matrix::zeros(3, 2));
        assert!(matches!(tape.gather_rows(t, &[3]), Err(Error::Data(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn random_graphs_match_finite_differences(seed in 0u64..10_000, rows in 1usize..5, cols in 1usize..4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let params = vec![
                random_matrix(&mut rng, rows, cols, 1.0),
                random_matrix(&mut rng, cols, 1, 1.0),
                random_matrix(&mut rng, rows, 1, 1.0),
            ];
            let report = grad_check(
                |tape, v| {
                    let h = tape.matmul(v[0], v[1])?;
                    let h = tape.tanh(h);
                    let p = tape.softmax(h)?;
                    let d = tape.distance(p, v[2])?;
                    let e = tape.scale(d, -1.0);
                    let e = tape.exp(e);
                    let l = tape.neg_log_at(p, 0)?;
                    tape.add(e, l)
                },
                &params,
                1e-5,
            ).unwrap();
            prop_assert!(report.max_rel_error < 1e-3, "{:?}", report);
        }

        #[test]
        fn softmax_sums_to_one(v in proptest::collection::vec(-50.0f64..50.0, 1..12)) {
            let p = softmax_values(&v).unwrap();
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(p.iter().all(|&x| x >= 0.0));
        }

        #[test]
        fn distance_symmetric_nonnegative(
            a in proptest::collection::vec(-10.0f64..10.0, 5),
            b in proptest::collection::vec(-10.0f64..10.0, 5),
        ) {
            let (ab, ba) = (distance_values(&a, &b), distance_values(&b, &a));
            prop_assert_eq!(ab, ba);
            prop_assert!(ab >= 0.0);
        }

        #[test]
        fn gru_output_matches_hidden_shape(input in 1usize..6, hidden in 1usize..6, seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut tape = Tape::new();
            let params = gru_shapes(input, hidden).map(|&(r, c)| tape.leaf(random_matrix(&mut rng, r, c, 1.0)));
            let x = tape.leaf(random_matrix(&mut rng, input, 1, 1.0));
            let h = tape.leaf(random_matrix(&mut rng, hidden, 1, 0.99));
            let out = gru_cell(&mut tape, x, h, &params).unwrap();
            prop_assert_eq!(tape.shape(out), (hidden, 1));
            prop_assert!(tape.value(out).data().iter().all(|v| v.abs() < 1.0));
        }
    }
}
