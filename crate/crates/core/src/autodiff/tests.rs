use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            // keep clear of the relu kink
            let v: f64 = rng.random_range(-2.0..2.0);
            if v.abs() < 1e-2 {
                0.5
            } else {
                v
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

#[test]
fn softmax_examples() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::vector(vec![0.0, 0.0]));
    let y = tape.softmax(x).unwrap();
    assert_eq!(tape.value(y).unwrap().data(), &[0.5, 0.5]);

    let x = tape.constant(Tensor::vector(vec![1.0, 0.0]));
    let y = tape.softmax(x).unwrap();
    let e = 1f64.exp();
    let expected = [e / (e + 1.0), 1.0 / (e + 1.0)];
    let got = tape.value(y).unwrap().data();
    for (g, (w, hand)) in got.iter().zip(expected.iter().zip([0.731059, 0.268941])) {
        assert!((g - w).abs() < 1e-15);
        assert!((g - hand).abs() < 1e-6);
    }
}

#[test]
fn activation_fixed_points() {
    let mut tape = Tape::<f64>::new();
    let z = tape.constant(Tensor::vector(vec![0.0]));
    let t = tape.tanh(z).unwrap();
    let s = tape.sigmoid(z).unwrap();
    assert_eq!(tape.value(t).unwrap().data(), &[0.0]);
    assert_eq!(tape.value(s).unwrap().data(), &[0.5]);
}

#[test]
fn identity_matmul_is_noop() {
    let mut tape = Tape::<f64>::new();
    let i = tape.constant(Tensor::identity(2));
    let m = Tensor::matrix(&[vec![3.0, 1.0], vec![2.0, 4.0]]).unwrap();
    let mv = tape.constant(m.clone());
    let out = tape.matmul(i, mv).unwrap();
    assert_eq!(tape.value(out).unwrap(), &m);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut tape = Tape::<f64>::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[2, 3]));
    match tape.matmul(a, b) {
        Err(Error::ShapeMismatch { op, lhs, rhs }) => {
            assert_eq!(op, "matmul");
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![2, 3]);
        }
        other => panic!("expected shape mismatch, got {other:?}"),
    }
    let v = tape_vec(&mut tape);
    assert!(matches!(tape.add(a, v), Err(Error::ShapeMismatch { op: "add", .. })));
}

fn tape_vec(tape: &mut Tape<f64>) -> Var {
    tape.constant(Tensor::vector(vec![1.0, 2.0]))
}

#[test]
fn bce_rejects_log_of_nonpositive() {
    let mut tape = Tape::<f64>::new();
    let p = tape.constant(Tensor::vector(vec![0.0]));
    assert!(matches!(tape.bce(p, &[1.0]), Err(Error::LogDomain { .. })));
    let p = tape.constant(Tensor::vector(vec![1.0]));
    assert!(matches!(tape.bce(p, &[0.0]), Err(Error::LogDomain { .. })));
}

#[test]
fn backward_square_sum() {
    let mut tape = Tape::<f64>::new();
    let x = tape.param(Tensor::vector(vec![1.0, 2.0, 3.0]));
    let sq = tape.mul(x, x).unwrap();
    let loss = tape.sum(sq).unwrap();
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[2.0, 4.0, 6.0]);
}

#[test]
fn backward_matmul_of_ones() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::full(&[1, 2], 1.0));
    let w = tape.param(Tensor::full(&[2, 2], 1.0));
    let y = tape.matmul(x, w).unwrap();
    let loss = tape.sum(y).unwrap();
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.get(w).unwrap().data(), &[1.0; 4]);
    assert!(g.get(x).is_none());
}

#[test]
fn backward_bce_of_sigmoid_at_zero() {
    let mut tape = Tape::<f64>::new();
    let z = tape.param(Tensor::vector(vec![0.0]));
    let p = tape.sigmoid(z).unwrap();
    let l = tape.bce(p, &[1.0]).unwrap();
    let loss = tape.sum(l).unwrap();
    let g = tape.backward(loss).unwrap();
    assert!((g.get(z).unwrap().data()[0] + 0.5).abs() < 1e-15);
}

#[test]
fn backward_rejects_repeat_nonscalar_and_foreign() {
    let mut tape = Tape::<f64>::new();
    let x = tape.param(Tensor::vector(vec![1.0, 2.0]));
    assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss { .. })));
    let s = tape.sum(x).unwrap();
    tape.backward(s).unwrap();
    assert!(matches!(tape.backward(s), Err(Error::AlreadyBackpropagated)));

    let mut other = Tape::<f64>::new();
    assert!(matches!(other.backward(s), Err(Error::UnknownNode { .. })));
    assert!(other.value(s).is_err());
}

#[test]
fn gradcheck_tanh_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random_tensor(&mut rng, &[10]);
    let err = grad_check(
        |t, v| {
            let y = t.tanh(v)?;
            t.sum(y)
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-6, "err {err}");
}

#[test]
fn gradcheck_softmax_sum_is_zero_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random_tensor(&mut rng, &[7]);
    let mut tape = Tape::new();
    let v = tape.param(x.clone());
    let s = tape.softmax(v).unwrap();
    let l = tape.sum(s).unwrap();
    let g = tape.backward(l).unwrap();
    assert!(g.get(v).unwrap().data().iter().all(|d| d.abs() < 1e-15));
    // The central difference of a constant is pure rounding noise: one ulp of
    // the sum over 2 * eps, about 1e-11. Compare it to zero on that scale.
    for i in 0..x.len() {
        let eval = |delta: f64| {
            let mut p = x.clone();
            p.data_mut()[i] += delta;
            let mut t = Tape::new();
            let v = t.constant(p);
            let s = t.softmax(v).unwrap();
            let l = t.sum(s).unwrap();
            t.value(l).unwrap().data()[0]
        };
        let numeric = (eval(1e-5) - eval(-1e-5)) / 2e-5;
        assert!(numeric.abs() < 1e-10, "numeric {numeric}");
    }
}

#[test]
fn grad_check_rejects_bad_eps_and_nonscalar() {
    let x = Tensor::vector(vec![1.0, 2.0]);
    assert!(grad_check(|t, v| t.sum(v), &x, 0.0).is_err());
    assert!(grad_check(|t, v| t.sum(v), &x, 1e-2).is_err());
    assert!(matches!(
        grad_check(|t, v| t.tanh(v), &x, 1e-5),
        Err(Error::NonScalarLoss { .. })
    ));
}

/// Weighted sum so that every output component carries a distinct gradient.
fn weighted_sum(t: &mut Tape<f64>, y: Var) -> crate::Result<Var> {
    let n = t.value(y)?.len();
    let shape = t.value(y)?.shape().to_vec();
    let w = Tensor::new(shape, (0..n).map(|i| 0.3 + 0.17 * i as f64).collect())?;
    let w = t.constant(w);
    let p = t.mul(y, w)?;
    t.sum(p)
}

#[test]
fn every_primitive_passes_gradcheck() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for trial in 0..20 {
        let m = 1 + trial % 4;
        let k = 1 + (trial / 2) % 4;
        let n = 1 + (trial / 3) % 4;
        let other_mat = random_tensor(&mut rng, &[k, n]);
        let other_vec = random_tensor(&mut rng, &[m * k]);
        let row_vec = random_tensor(&mut rng, &[k]);
        let x = random_tensor(&mut rng, &[m, k]);
        let checks: Vec<(&str, Box<dyn Fn(&mut Tape<f64>, Var) -> crate::Result<Var>>)> = vec![
            ("matmul_lhs", Box::new(|t, v| {
                let b = t.constant(other_mat.clone());
                let y = t.matmul(v, b)?;
                weighted_sum(t, y)
            })),
            ("matmul_rhs", Box::new(|t, v| {
                let a = t.constant(Tensor::new(vec![k, m], other_vec.data().to_vec())?);
                let y = t.matmul(a, v)?;
                weighted_sum(t, y)
            })),
            ("matvec", Box::new(|t, v| {
                let r = t.constant(row_vec.clone());
                let y = t.matmul(v, r)?;
                weighted_sum(t, y)
            })),
            ("vecmat", Box::new(|t, v| {
                let r = t.constant(Tensor::vector(row_vec.data()[..1].repeat(m)));
                let y = t.matmul(r, v)?;
                weighted_sum(t, y)
            })),
            ("mul_add_sub", Box::new(|t, v| {
                let o = t.constant(Tensor::new(vec![m, k], other_vec.data().to_vec())?);
                let a = t.mul(v, o)?;
                let b = t.add(a, v)?;
                let c = t.sub(b, o)?;
                let d = t.mul(c, v)?;
                weighted_sum(t, d)
            })),
            ("scalar_ops", Box::new(|t, v| {
                let a = t.mul_scalar(v, 1.7)?;
                let b = t.add_scalar(a, -0.3)?;
                let c = t.rsub_scalar(2.0, b)?;
                let d = t.mul(c, c)?;
                weighted_sum(t, d)
            })),
            ("softmax_rows", Box::new(|t, v| {
                let y = t.softmax(v)?;
                weighted_sum(t, y)
            })),
            ("tanh_sigmoid_relu", Box::new(|t, v| {
                let a = t.tanh(v)?;
                let b = t.sigmoid(v)?;
                let c = t.relu(v)?;
                let s = t.add(a, b)?;
                let s = t.add(s, c)?;
                weighted_sum(t, s)
            })),
            ("concat_row", Box::new(|t, v| {
                let r = t.row(v, m - 1)?;
                let r0 = t.row(v, 0)?;
                let e = t.row(r0, 0)?;
                let c = t.concat(&[r, e, r0])?;
                weighted_sum(t, c)
            })),
            ("concat_matrix", Box::new(|t, v| {
                let s = t.tanh(v)?;
                let c = t.concat(&[v, s])?;
                weighted_sum(t, c)
            })),
            ("outer", Box::new(|t, v| {
                let r = t.row(v, 0)?;
                let o = t.outer(r, r)?;
                weighted_sum(t, o)
            })),
            ("mean", Box::new(|t, v| {
                let s = t.mul(v, v)?;
                t.mean(s)
            })),
            ("clamp_bce", Box::new(|t, v| {
                let p = t.sigmoid(v)?;
                let p = t.clamp(p, 1e-7, 1.0 - 1e-7)?;
                let n = t.value(p)?.len();
                let y: Vec<f64> = (0..n).map(|i| (i % 2) as f64).collect();
                let l = t.bce(p, &y)?;
                weighted_sum(t, l)
            })),
        ];
        for (name, f) in checks {
            let err = grad_check(f, &x, 1e-5).unwrap();
            assert!(err < 1e-6, "{name} trial {trial}: err {err}");
        }
    }
}

#[test]
fn gradients_of_independent_subgraphs_concatenate() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let a0 = random_tensor(&mut rng, &[5]);
    let b0 = random_tensor(&mut rng, &[3]);
    let separate = |x: &Tensor<f64>, f: fn(&mut Tape<f64>, Var) -> crate::Result<Var>| {
        let mut t = Tape::new();
        let v = t.param(x.clone());
        let l = f(&mut t, v).unwrap();
        t.backward(l).unwrap().take(v).unwrap()
    };
    let fa: fn(&mut Tape<f64>, Var) -> crate::Result<Var> = |t, v| {
        let y = t.tanh(v)?;
        t.sum(y)
    };
    let fb: fn(&mut Tape<f64>, Var) -> crate::Result<Var> = |t, v| {
        let y = t.sigmoid(v)?;
        let y = t.mul(y, v)?;
        t.sum(y)
    };
    let ga = separate(&a0, fa);
    let gb = separate(&b0, fb);

    let mut t = Tape::new();
    let a = t.param(a0.clone());
    let b = t.param(b0.clone());
    let la = fa(&mut t, a).unwrap();
    let lb = fb(&mut t, b).unwrap();
    let joint = t.concat(&[la, lb]).unwrap();
    let total = t.sum(joint).unwrap();
    let g = t.backward(total).unwrap();
    assert_eq!(g.get(a).unwrap(), &ga);
    assert_eq!(g.get(b).unwrap(), &gb);
}

#[test]
fn replay_is_bit_identical() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let w0 = random_tensor(&mut rng, &[4, 3]);
        let x0 = random_tensor(&mut rng, &[3]);
        let mut t = Tape::new();
        let w = t.param(w0);
        let x = t.constant(x0);
        let h = t.matmul(w, x).unwrap();
        let s = t.softmax(h).unwrap();
        let l = t.sum(s).unwrap();
        let z = t.tanh(h).unwrap();
        let l2 = t.sum(z).unwrap();
        let tot = t.add(l, l2).unwrap();
        let value = t.value(tot).unwrap().clone();
        let g = t.backward(tot).unwrap().take(w).unwrap();
        (value, g)
    };
    let (v1, g1) = run();
    let (v2, g2) = run();
    assert_eq!(v1.data()[0].to_bits(), v2.data()[0].to_bits());
    assert!(g1.data().iter().zip(g2.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
}

#[test]
fn generic_over_f32() {
    let mut tape = Tape::<f32>::new();
    let x = tape.param(Tensor::vector(vec![1.0f32, 2.0, 3.0]));
    let sq = tape.mul(x, x).unwrap();
    let loss = tape.sum(sq).unwrap();
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[2.0f32, 4.0, 6.0]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn softmax_rows_normalize(rows in 1usize..5, data in prop::collection::vec(-15.0f64..15.0, 16)) {
        let cols = 16 / rows;
        let x = Tensor::new(vec![rows, cols], data[..rows * cols].to_vec()).unwrap();
        let mut tape = Tape::new();
        let v = tape.constant(x);
        let s = tape.softmax(v).unwrap();
        let out = tape.value(s).unwrap();
        for r in 0..rows {
            let row = out.row(r);
            let total: f64 = row.iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-9);
            // strictly inside (0,1) while the logit spread stays below ~36
            prop_assert!(row.iter().all(|&p| p > 0.0 && p < 1.0));
        }
    }

    #[test]
    fn unary_primitives_gradcheck_random(seed in 0u64..10_000, n in 1usize..=16, which in 0usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_tensor(&mut rng, &[n]);
        let err = grad_check(|t, v| {
            let y = match which {
                0 => t.tanh(v)?,
                1 => t.sigmoid(v)?,
                2 => t.relu(v)?,
                3 => t.softmax(v)?,
                4 => t.mul(v, v)?,
                _ => t.outer(v, v)?,
            };
            weighted_sum(t, y)
        }, &x, 1e-5).unwrap();
        prop_assert!(err < 1e-6, "primitive {} err {}", which, err);
    }
}
