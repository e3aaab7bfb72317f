//! Kernels against naive reference loops, and their tape gradients against
//! a five-point numerical derivative.

use patchfed_core::gradcheck::grad_check;
use patchfed_core::kernels::{self, gelu, LAYER_NORM_EPS};
use patchfed_core::tape::{Tape, Var};
use patchfed_core::{ParameterSet, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tensor(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-3.0f64..3.0, rows * cols)
        .prop_map(move |v| Tensor::new(vec![rows, cols], v).unwrap())
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
}

fn naive_linear(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Vec<f64> {
    let (rows, d_in, d_out) = (x.rows(), x.cols(), w.rows());
    let mut y = vec![0.0; rows * d_out];
    for r in 0..rows {
        for k in 0..d_out {
            let mut s = 0.0;
            for j in 0..d_in {
                s += w.data()[k * d_in + j] * x.data()[r * d_in + j];
            }
            y[r * d_out + k] = s + b.map_or(0.0, |b| b.data()[k]);
        }
    }
    y
}

proptest! {
    #[test]
    fn linear_matches_naive_loops(
        (x, w, b) in (1usize..6, 1usize..11, 1usize..10).prop_flat_map(|(r, i, o)| {
            (tensor(r, i), tensor(o, i), tensor(1, o))
        })
    ) {
        let b = b.reshape(vec![w.rows()]).unwrap();
        let got = kernels::linear(&x, &w, Some(&b)).unwrap();
        let want = naive_linear(&x, &w, Some(&b));
        for (g, e) in got.data().iter().zip(&want) {
            prop_assert!(close(*g, *e, 1e-12), "{g} vs {e}");
        }
    }

    #[test]
    fn linear_backward_matches_naive_adjoints(
        (x, w, dy) in (1usize..5, 1usize..10, 1usize..9).prop_flat_map(|(r, i, o)| {
            (tensor(r, i), tensor(o, i), tensor(r, o))
        })
    ) {
        let (rows, d_in, d_out) = (x.rows(), x.cols(), w.rows());
        let mut dw = vec![0.0; d_out * d_in];
        let mut db = vec![0.0; d_out];
        let dx = kernels::linear_backward(dy.data(), x.data(), w.data(), d_in, d_out, &mut dw, Some(&mut db));
        let dx_only = kernels::linear_backward_input(dy.data(), w.data(), rows, d_in, d_out);
        let mut dw_only = vec![0.0; d_out * d_in];
        kernels::linear_backward_weight(dy.data(), x.data(), d_in, d_out, &mut dw_only);
        for r in 0..rows {
            for j in 0..d_in {
                let want: f64 = (0..d_out).map(|k| dy.data()[r * d_out + k] * w.data()[k * d_in + j]).sum();
                prop_assert!(close(dx[r * d_in + j], want, 1e-12));
                prop_assert!(close(dx_only[r * d_in + j], want, 1e-12));
            }
        }
        for k in 0..d_out {
            let want_b: f64 = (0..rows).map(|r| dy.data()[r * d_out + k]).sum();
            prop_assert!(close(db[k], want_b, 1e-12));
            for j in 0..d_in {
                let want: f64 = (0..rows).map(|r| dy.data()[r * d_out + k] * x.data()[r * d_in + j]).sum();
                prop_assert!(close(dw[k * d_in + j], want, 1e-12));
                prop_assert!(close(dw_only[k * d_in + j], want, 1e-12));
            }
        }
    }

    #[test]
    fn matmul_variants_agree_with_naive_products(
        (a, b) in (1usize..6, 1usize..6, 1usize..7).prop_flat_map(|(m, k, n)| (tensor(m, k), tensor(k, n)))
    ) {
        let (m, k, n) = (a.rows(), a.cols(), b.cols());
        let mut want = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    want[i * n + j] += a.data()[i * k + p] * b.data()[p * n + j];
                }
            }
        }
        // bᵀ laid out row-major, and aᵀ likewise
        let mut bt = vec![0.0; n * k];
        for p in 0..k {
            for j in 0..n {
                bt[j * k + p] = b.data()[p * n + j];
            }
        }
        let mut at = vec![0.0; k * m];
        for i in 0..m {
            for p in 0..k {
                at[p * m + i] = a.data()[i * k + p];
            }
        }
        let plain = kernels::matmul(a.data(), b.data(), m, n, k);
        let nt = kernels::matmul_nt(a.data(), &bt, m, n, k);
        let tn = kernels::matmul_tn(&at, b.data(), m, n, k);
        for i in 0..m * n {
            prop_assert!(close(plain[i], want[i], 1e-12));
            prop_assert!(close(nt[i], want[i], 1e-12));
            prop_assert!(close(tn[i], want[i], 1e-12));
        }
    }

    #[test]
    fn softmax_rows_are_distributions(x in (1usize..5, 1usize..9).prop_flat_map(|(r, c)| tensor(r, c))) {
        let y = kernels::softmax(&x).unwrap();
        let c = x.cols();
        for r in 0..x.rows() {
            let row = &y.data()[r * c..(r + 1) * c];
            let sum: f64 = row.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&p| p > 0.0 && p < 1.0 || c == 1));
            // ratios follow exp differences
            let xr = &x.data()[r * c..(r + 1) * c];
            for j in 1..c {
                let want = (xr[j] - xr[0]).exp();
                prop_assert!(close(row[j] / row[0], want, 1e-10));
            }
        }
    }

    #[test]
    fn layer_norm_matches_population_statistics(
        (x, g, b) in (1usize..5, 2usize..9).prop_flat_map(|(r, c)| (tensor(r, c), tensor(1, c), tensor(1, c)))
    ) {
        let c = x.cols();
        let g = g.reshape(vec![c]).unwrap();
        let b = b.reshape(vec![c]).unwrap();
        let y = kernels::layer_norm(&x, &g, &b).unwrap();
        for r in 0..x.rows() {
            let xr = &x.data()[r * c..(r + 1) * c];
            let mean = xr.iter().sum::<f64>() / c as f64;
            let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            for (j, xj) in xr.iter().enumerate() {
                let want = g.data()[j] * (xj - mean) / (var + LAYER_NORM_EPS).sqrt() + b.data()[j];
                prop_assert!(close(y.data()[r * c + j], want, 1e-10));
            }
        }
    }

    #[test]
    fn kernels_are_pure(x in tensor(3, 4), w in tensor(2, 4)) {
        let a = kernels::linear(&x, &w, None).unwrap();
        let b = kernels::linear(&x, &w, None).unwrap();
        prop_assert_eq!(a.to_le_bytes(), b.to_le_bytes());
        prop_assert_eq!(kernels::activation(&x).to_le_bytes(), kernels::activation(&x).to_le_bytes());
    }
}

#[test]
fn gelu_matches_the_tanh_formula() {
    for i in -40..=40 {
        let x = i as f64 / 8.0;
        let want = 0.5
            * x
            * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh());
        assert!(close(gelu(x), want, 1e-14), "{x}");
    }
    assert_eq!(gelu(0.0), 0.0);
    assert!(close(gelu(1.0), 0.841_191_990_607_477, 1e-12));
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

fn params(rng: &mut ChaCha8Rng, specs: &[(&str, &[usize])]) -> ParameterSet {
    let mut p = ParameterSet::new();
    for (name, shape) in specs {
        p.push(*name, random_tensor(rng, shape), false).unwrap();
    }
    p
}

/// Weighted sum of every entry, so each output position gets a distinct
/// adjoint.
fn weighted_sum(tape: &mut Tape, v: Var, seed: u64) -> Var {
    let value = tape.value(v).clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let weights = random_tensor(&mut rng, &[1, value.len()]);
    let flat = value.len();
    let rows = tape.value(v).rows();
    let cols = flat / rows;
    let mut total = None;
    for r in 0..rows {
        let row = tape.select_row(v, r).unwrap();
        let w = tape.input(
            Tensor::new(
                vec![1, cols],
                weights.data()[r * cols..(r + 1) * cols].to_vec(),
            )
            .unwrap(),
        );
        let s = tape.linear(row, w, None).unwrap();
        total = Some(match total {
            None => s,
            Some(t) => tape.add(t, s).unwrap(),
        });
    }
    total.unwrap()
}

#[test]
fn primitive_gradients_agree_with_numerical_derivatives() {
    for seed in 0..24u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = params(
            &mut rng,
            &[
                ("x", &[3, 4]),
                ("w", &[5, 4]),
                ("b", &[5]),
                ("g", &[5]),
                ("beta", &[5]),
                ("k", &[3, 5]),
            ],
        );
        let err = grad_check(&p, 1e-3, |tape| {
            let (x, w, b, g, beta, k) = (
                tape.param(0),
                tape.param(1),
                tape.param(2),
                tape.param(3),
                tape.param(4),
                tape.param(5),
            );
            let y = tape.linear(x, w, Some(b))?;
            let y = tape.gelu(y);
            let y = tape.layer_norm(y, g, beta)?;
            let s = tape.matmul_nt(y, k)?;
            let s = tape.softmax(s)?;
            let z = tape.matmul(s, k)?;
            let z = tape.scale(z, 0.7);
            let cat = tape.concat_cols(&[z, y])?;
            Ok(weighted_sum(tape, cat, seed + 100))
        })
        .unwrap();
        assert!(err < 1e-4, "seed {seed}: relative error {err}");
    }
}

#[test]
fn gather_gradient_accumulates_repeated_rows() {
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = params(&mut rng, &[("table", &[6, 3])]);
        let ids = [2usize, 4, 2, 0];
        let err = grad_check(&p, 1e-3, |tape| {
            let t = tape.param(0);
            let rows = tape.gather(t, &ids)?;
            let act = tape.gelu(rows);
            Ok(weighted_sum(tape, act, seed))
        })
        .unwrap();
        assert!(err < 1e-4, "seed {seed}: {err}");
    }
}
