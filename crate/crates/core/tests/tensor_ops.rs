use meant::tensor::{grad_check, NormMode, Tape, Tensor, TensorError, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type OpFn<'a> = Box<dyn Fn(&mut Tape, Var) -> meant::tensor::Result<Var> + 'a>;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Independent triple-loop product of two row-major matrices.
fn triple_loop(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..k {
                s += a[i * k + p] * b[p * n + j];
            }
            out[i * n + j] = s;
        }
    }
    out
}

fn eval(f: impl FnOnce(&mut Tape) -> Var) -> Tensor {
    let mut tape = Tape::new();
    let v = f(&mut tape);
    tape.value(v).clone()
}

#[test]
fn matmul_identity_and_dot() {
    let out = eval(|tp| {
        let a = tp.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let b = tp.constant(t(&[2, 1], &[3.0, 4.0]));
        tp.matmul(a, b).unwrap()
    });
    assert_eq!(out.shape(), &[2, 1]);
    assert_eq!(out.data(), &[3.0, 4.0]);

    let out = eval(|tp| {
        let a = tp.constant(t(&[1, 2], &[1.0, 2.0]));
        let b = tp.constant(t(&[2, 1], &[3.0, 4.0]));
        tp.matmul(a, b).unwrap()
    });
    assert_eq!(out.data(), &[11.0]);
}

#[test]
fn matmul_matches_triple_loop_4x5x3() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let a = random(&[4, 5], &mut rng);
    let b = random(&[5, 3], &mut rng);
    let oracle = triple_loop(a.data(), b.data(), 4, 5, 3);
    let out = eval(|tp| {
        let (va, vb) = (tp.constant(a.clone()), tp.constant(b.clone()));
        tp.matmul(va, vb).unwrap()
    });
    let diff = out
        .data()
        .iter()
        .zip(&oracle)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    assert!(diff < 1e-12);
}

#[test]
fn matmul_broadcasts_batches_and_reports_mismatch() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = random(&[3, 2, 4], &mut rng);
    let w = random(&[4, 5], &mut rng);
    let out = eval(|tp| {
        let (va, vw) = (tp.constant(a.clone()), tp.constant(w.clone()));
        tp.matmul(va, vw).unwrap()
    });
    assert_eq!(out.shape(), &[3, 2, 5]);
    for bi in 0..3 {
        let oracle = triple_loop(&a.data()[bi * 8..(bi + 1) * 8], w.data(), 2, 4, 5);
        for (x, y) in out.data()[bi * 10..(bi + 1) * 10].iter().zip(&oracle) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[4, 2]));
    match tape.matmul(a, b) {
        Err(TensorError::Dimension(msg)) => {
            assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}")
        }
        other => panic!("expected dimension error, got {other:?}"),
    }
}

#[test]
fn softmax_examples() {
    let sm = |x: &[f64]| {
        eval(|tp| {
            let v = tp.constant(t(&[x.len()], x));
            tp.softmax(v).unwrap()
        })
    };
    assert_eq!(sm(&[0.0, 0.0]).data(), &[0.5, 0.5]);
    assert_eq!(sm(&[1000.0, 1000.0]).data(), &[0.5, 0.5]);
    let y = sm(&[0.0, 3f64.ln()]);
    assert!((y.data()[0] - 0.25).abs() < 1e-15);
    assert!((y.data()[1] - 0.75).abs() < 1e-15);

    let mut tape = Tape::new();
    let v = tape.constant(t(&[2], &[0.0, f64::NAN]));
    assert!(matches!(tape.softmax(v), Err(TensorError::Numeric(_))));
}

fn norm(x: &[f64], mode: NormMode) -> Tensor {
    eval(|tp| {
        let d = x.len();
        let v = tp.constant(t(&[d], x));
        let g = tp.constant(Tensor::full(&[d], 1.0));
        let b = tp.constant(Tensor::zeros(&[d]));
        tp.layer_norm(v, g, b, mode).unwrap()
    })
}

#[test]
fn layer_norm_examples() {
    let y = norm(&[1.0, 1.0, 1.0], NormMode::Standard);
    assert!(y.data().iter().all(|v| v.abs() < 1e-12));
    // mean 0, variance 1: only epsilon perturbs the result
    let y = norm(&[1.0, -1.0], NormMode::Standard);
    let k = 1.0 / (1.0f64 + 1e-5).sqrt();
    assert!((y.data()[0] - k).abs() < 1e-15 && (y.data()[1] + k).abs() < 1e-15);
    assert!((y.data()[0] - 1.0).abs() < 1e-5);
    let y = norm(&[3.0, 4.0], NormMode::Rms);
    let r = (12.5f64 + 1e-5).sqrt();
    assert!((y.data()[0] - 3.0 / r).abs() < 1e-15);
    assert!((y.data()[0] - 3.0 / 12.5f64.sqrt()).abs() < 1e-6);
    assert!((y.data()[1] - 4.0 / 12.5f64.sqrt()).abs() < 1e-6);

    let mut tape = Tape::new();
    let v = tape.constant(Tensor::zeros(&[2, 3]));
    let g = tape.constant(Tensor::zeros(&[2]));
    let b = tape.constant(Tensor::zeros(&[2]));
    assert!(matches!(
        tape.layer_norm(v, g, b, NormMode::Standard),
        Err(TensorError::Dimension(_))
    ));
}

#[test]
fn gelu_examples() {
    let y = eval(|tp| {
        let v = tp.constant(t(&[3], &[0.0, 10.0, -10.0]));
        tp.gelu(v)
    });
    assert_eq!(y.data()[0], 0.0);
    assert!((y.data()[1] - 10.0).abs() < 1e-9);
    assert!(y.data()[2].abs() < 1e-9);
}

#[test]
fn backward_examples() {
    let mut tape = Tape::new();
    let x = tape.variable(t(&[2], &[1.0, 2.0]));
    let sq = tape.mul(x, x).unwrap();
    let out = tape.sum(sq);
    tape.backward(out).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[2.0, 4.0]);
    // accumulation without reset
    tape.backward(out).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[4.0, 8.0]);
    tape.zero_grad();
    tape.backward(out).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[2.0, 4.0]);
    // non-scalar output
    assert!(matches!(tape.backward(sq), Err(TensorError::Contract(_))));

    let mut tape = Tape::new();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = tape.variable(random(&[6], &mut rng));
    let s = tape.softmax(x).unwrap();
    let out = tape.sum(s);
    tape.backward(out).unwrap();
    assert!(tape.grad(x).unwrap().iter().all(|g| g.abs() < 1e-15));
}

#[test]
fn backward_is_deterministic_after_reset() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x0 = random(&[3, 4], &mut rng);
    let w0 = random(&[4, 2], &mut rng);
    let mut tape = Tape::new();
    let x = tape.variable(x0);
    let w = tape.variable(w0);
    let h = tape.matmul(x, w).unwrap();
    let h = tape.gelu(h);
    let s = tape.softmax(h).unwrap();
    let out = tape.cross_entropy(s, &[0, 1, 1]).unwrap();
    tape.backward(out).unwrap();
    let first = (tape.grad(x).unwrap().to_vec(), tape.grad(w).unwrap().to_vec());
    tape.zero_grad();
    tape.backward(out).unwrap();
    assert_eq!(first.0, tape.grad(x).unwrap());
    assert_eq!(first.1, tape.grad(w).unwrap());
}

#[test]
fn grad_check_examples() {
    let x = t(&[2], &[1.0, 2.0]);
    let err = grad_check(
        |tp, v| {
            let sq = tp.mul(v, v)?;
            Ok(tp.sum(sq))
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-8, "{err}");

    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = random(&[8], &mut rng);
    let err = grad_check(
        |tp, v| {
            let g = tp.gelu(v);
            Ok(tp.sum(g))
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-6, "{err}");

    // cross_entropy(mlp(x)) with fixed weights, gradient w.r.t. the input
    let w1 = random(&[4, 6], &mut rng);
    let w2 = random(&[6, 2], &mut rng);
    let x = random(&[3, 4], &mut rng);
    let err = grad_check(
        |tp, v| {
            let a = tp.constant(w1.clone());
            let b = tp.constant(w2.clone());
            let h = tp.matmul(v, a)?;
            let h = tp.gelu(h);
            let logits = tp.matmul(h, b)?;
            tp.cross_entropy(logits, &[0, 1, 0])
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

/// Scalar objective that mixes the output with a fixed random projection so
/// every output coordinate contributes a distinct gradient.
fn project(tp: &mut Tape, y: Var, seed: u64) -> meant::tensor::Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = Tensor::from_fn(tp.shape(y), |_| rng.gen_range(-1.0..1.0));
    let w = tp.constant(w);
    let p = tp.mul(y, w)?;
    Ok(tp.sum(p))
}

#[test]
fn elementwise_ops_pass_grad_check_over_seeds() {
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&[2, 5], &mut rng);
        let other = random(&[5], &mut rng);
        let checks: Vec<(&str, OpFn<'_>)> = vec![
            (
                "gelu",
                Box::new(|tp, v| {
                    let y = tp.gelu(v);
                    project(tp, y, 1)
                }),
            ),
            (
                "softmax",
                Box::new(|tp, v| {
                    let y = tp.softmax(v)?;
                    project(tp, y, 2)
                }),
            ),
            (
                "mul_broadcast",
                Box::new(|tp, v| {
                    let o = tp.constant(other.clone());
                    let y = tp.mul(v, o)?;
                    project(tp, y, 3)
                }),
            ),
            (
                "sub",
                Box::new(|tp, v| {
                    let o = tp.constant(other.clone());
                    let y = tp.sub(o, v)?;
                    let y = tp.mul(y, y)?;
                    project(tp, y, 4)
                }),
            ),
            (
                "layer_norm_standard",
                Box::new(|tp, v| {
                    let g = tp.constant(other.clone());
                    let b = tp.constant(Tensor::full(&[5], 0.3));
                    let y = tp.layer_norm(v, g, b, NormMode::Standard)?;
                    project(tp, y, 5)
                }),
            ),
            (
                "layer_norm_rms",
                Box::new(|tp, v| {
                    let g = tp.constant(other.clone());
                    let b = tp.constant(Tensor::zeros(&[5]));
                    let y = tp.layer_norm(v, g, b, NormMode::Rms)?;
                    project(tp, y, 6)
                }),
            ),
        ];
        for (name, f) in &checks {
            let err = grad_check(|tp, v| f(tp, v), &x, 1e-5).unwrap();
            assert!(err < 1e-6, "{name} seed {seed}: {err}");
        }
    }
}

#[test]
fn layout_ops_pass_grad_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random(&[2, 3, 4], &mut rng);
    let cases: Vec<(&str, OpFn<'_>)> = vec![
        (
            "permute",
            Box::new(|tp, v| {
                let y = tp.permute(v, &[2, 0, 1])?;
                project(tp, y, 1)
            }),
        ),
        (
            "concat",
            Box::new(|tp, v| {
                let y = tp.concat(&[v, v], 1)?;
                project(tp, y, 2)
            }),
        ),
        (
            "narrow",
            Box::new(|tp, v| {
                let y = tp.narrow(v, 1, 1, 2)?;
                project(tp, y, 3)
            }),
        ),
        (
            "sum_axis",
            Box::new(|tp, v| {
                let y = tp.sum_axis(v, 1)?;
                let y = tp.mul(y, y)?;
                project(tp, y, 4)
            }),
        ),
        (
            "matmul_batched",
            Box::new(|tp, v| {
                let w = tp.constant(Tensor::from_fn(&[4, 3], |i| (i as f64 * 0.37).sin()));
                let y = tp.matmul(v, w)?;
                let z = tp.transpose_last(y)?;
                let y = tp.matmul(z, v)?;
                project(tp, y, 5)
            }),
        ),
        (
            "rotate",
            Box::new(|tp, v| {
                let cos: Vec<f64> = (0..6).map(|i| (i as f64).cos()).collect();
                let sin: Vec<f64> = (0..6).map(|i| (i as f64).sin()).collect();
                let scale: Vec<f64> = (0..6).map(|i| 0.5 + i as f64 * 0.1).collect();
                let y = tp.pair_rotate(v, &cos, &sin, &scale)?;
                project(tp, y, 6)
            }),
        ),
        (
            "cross_entropy",
            Box::new(|tp, v| {
                let y = tp.reshape(v, &[6, 4])?;
                tp.cross_entropy(y, &[0, 1, 2, 3, 1, 0])
            }),
        ),
    ];
    for (name, f) in &cases {
        let err = grad_check(|tp, v| f(tp, v), &x, 1e-5).unwrap();
        assert!(err < 1e-6, "{name}: {err}");
    }
}

#[test]
fn gather_accumulates_repeated_rows() {
    let mut tape = Tape::new();
    let table = tape.variable(Tensor::from_fn(&[4, 2], |i| i as f64));
    let e = tape.gather(table, &[1, 1, 3], &[3]).unwrap();
    assert_eq!(tape.data(e), &[2.0, 3.0, 2.0, 3.0, 6.0, 7.0]);
    let s = tape.sum(e);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(table).unwrap(), &[0.0, 0.0, 2.0, 2.0, 0.0, 0.0, 1.0, 1.0]);
    assert!(matches!(
        tape.gather(table, &[4], &[1]),
        Err(TensorError::Index { index: 4, extent: 4 })
    ));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_sum_to_one(rows in 1usize..5, cols in 1usize..9, seed in any::<u64>(), spread in 0.1f64..500.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::from_fn(&[rows, cols], |_| rng.gen_range(-spread..spread));
        let y = eval(|tp| { let v = tp.constant(x.clone()); tp.softmax(v).unwrap() });
        for r in y.data().chunks(cols) {
            prop_assert!(r.iter().all(|p| *p >= 0.0));
            prop_assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_matches_oracle(m in 1usize..=16, k in 1usize..=16, n in 1usize..=16, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random(&[m, k], &mut rng);
        let b = random(&[k, n], &mut rng);
        let oracle = triple_loop(a.data(), b.data(), m, k, n);
        let y = eval(|tp| { let (va, vb) = (tp.constant(a.clone()), tp.constant(b.clone())); tp.matmul(va, vb).unwrap() });
        for (x, o) in y.data().iter().zip(&oracle) {
            prop_assert!((x - o).abs() < 1e-12);
        }
    }

    #[test]
    fn standard_norm_is_centered_and_unit(d in 4usize..32, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // epsilon biases the variance by eps/(var+eps); keep var large enough
        // for the 1e-6 tolerance to be meaningful
        let x: Vec<f64> = (0..d).map(|_| rng.gen_range(-100.0..100.0)).collect();
        let mu = x.iter().sum::<f64>() / d as f64;
        let var = x.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
        prop_assume!(var >= 10.0);
        let y = norm(&x, NormMode::Standard);
        let m = y.data().iter().sum::<f64>() / d as f64;
        let v = y.data().iter().map(|a| (a - m) * (a - m)).sum::<f64>() / d as f64;
        prop_assert!(m.abs() < 1e-10);
        prop_assert!((v - 1.0).abs() < 1e-6);
    }
}
