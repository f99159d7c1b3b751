use super::*;
use crate::error::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect()).unwrap()
}

/// Scalar probe `sum(y * w)` with a fixed random weighting.
fn probe(g: &mut Graph, y: Var, seed: u64) -> Result<Var, Error> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = random(g.value(y).shape(), &mut rng);
    let w = g.constant(w);
    let p = g.mul(y, w)?;
    g.reduce_sum(p, None)
}

#[test]
fn relu_definition() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::from_vec(vec![-1.0, 0.0, 2.0]));
    let y = g.relu(x).unwrap();
    assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
}

#[test]
fn identity_matmul() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = random(&[3, 3], &mut rng);
    let mut g = Graph::new();
    let i = g.constant(Tensor::eye(3));
    let av = g.constant(a.clone());
    let y = g.matmul(i, av).unwrap();
    assert_eq!(g.value(y), &a);
}

#[test]
fn softmax_hand_values() {
    let mut g = Graph::new();
    let x = g.constant(t(&[1, 2], &[0.0, 3f64.ln()]));
    let y = g.softmax(x, 1.0).unwrap();
    let d = g.value(y).data();
    assert!((d[0] - 0.25).abs() < 1e-15);
    assert!((d[1] - 0.75).abs() < 1e-15);
}

#[test]
fn sum_gradient_is_ones() {
    let mut g = Graph::new();
    let x = g.param(Tensor::from_vec(vec![0.3, -2.0, 5.0]));
    let s = g.reduce_sum(x, None).unwrap();
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);
}

#[test]
fn stop_gradient_blocks_flow() {
    let xv = Tensor::from_vec(vec![1.0, -2.0, 3.0]);
    let mut g = Graph::new();
    let x = g.param(xv.clone());
    let y = g.param(Tensor::from_vec(vec![0.5, 0.25, 4.0]));
    let sx = g.stop_gradient(x).unwrap();
    assert_eq!(g.value(sx), &xv);
    let p = g.mul(sx, y).unwrap();
    let s = g.reduce_sum(p, None).unwrap();
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[0.0, 0.0, 0.0]);
    assert_eq!(grads.get(y).unwrap().data(), xv.data());
}

#[test]
fn sum_of_squares_gradcheck() {
    let err = finite_difference_check(
        |g, v| {
            let sq = g.mul(v[0], v[0])?;
            g.reduce_sum(sq, None)
        },
        &[Tensor::from_vec(vec![1.0, 2.0, 3.0])],
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-6, "err = {err}");
}

#[test]
fn softmax_cross_entropy_gradcheck() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let logits = random(&[4, 6], &mut rng);
    let mut onehot = Tensor::zeros(&[4, 6]);
    for r in 0..4 {
        onehot.data_mut()[r * 6 + rng.gen_range(0..6)] = 1.0;
    }
    let err = finite_difference_check(
        |g, v| {
            let p = g.softmax(v[0], 1.0)?;
            let lp = g.log(p)?;
            let y = g.constant(onehot.clone());
            let m = g.mul(lp, y)?;
            let s = g.reduce_sum(m, None)?;
            g.scale(s, -0.25)
        },
        &[logits],
        1e-6,
    )
    .unwrap();
    assert!(err < 1e-4, "err = {err}");
}

#[test]
fn checker_ignores_stopped_branch() {
    // f = sum(sg(x)^2 * x): the full derivative is 3x^2 but only x^2 flows.
    let err = finite_difference_check(
        |g, v| {
            let s = g.stop_gradient(v[0])?;
            let sq = g.mul(s, s)?;
            let p = g.mul(sq, v[0])?;
            g.reduce_sum(p, None)
        },
        &[Tensor::from_vec(vec![0.7, -1.3, 2.0])],
        1e-6,
    )
    .unwrap();
    assert!(err < 1e-6, "err = {err}");
}

#[test]
fn every_primitive_gradchecks() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for (name, shapes, build) in crate::checks::primitive_cases() {
        for trial in 0..5 {
            let points: Vec<Tensor> = shapes.iter().map(|s| random(s, &mut rng)).collect();
            let err = finite_difference_check(
                |g, v| {
                    let y = build(g, v)?;
                    probe(g, y, 99 + trial)
                },
                &points,
                1e-6,
            )
            .unwrap();
            assert!(err < 1e-4, "{name}: relative error {err}");
        }
    }
}

#[test]
fn shape_mismatch_errors() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2, 2]));
    assert!(matches!(g.matmul(a, b), Err(Error::Shape { .. })));
    assert!(matches!(g.add(a, b), Err(Error::Shape { .. })));
}

#[test]
fn division_by_zero_errors() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::from_vec(vec![1.0, 2.0]));
    let b = g.constant(Tensor::from_vec(vec![1.0, 0.0]));
    assert!(matches!(g.div(a, b), Err(Error::DivisionByZero(_))));
}

#[test]
fn log_of_non_positive_errors() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::from_vec(vec![1.0, 0.0]));
    assert!(matches!(g.log(a), Err(Error::LogDomain(_))));
}

#[test]
fn non_finite_forward_is_an_error() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::from_vec(vec![1000.0]));
    assert!(matches!(g.exp(a), Err(Error::NonFinite(_))));
}

#[test]
fn backward_contract_errors() {
    let mut g = Graph::new();
    let x = g.param(Tensor::from_vec(vec![1.0, 2.0]));
    assert!(matches!(g.backward(x), Err(Error::NonScalarLoss(_))));
    let s = g.reduce_sum(x, None).unwrap();
    g.backward(s).unwrap();
    assert!(matches!(g.backward(s), Err(Error::GraphConsumed)));
}

#[test]
fn conv_preserves_length_at_unit_stride() {
    let geom = ConvGeom { batch: 1, frames: 7, joints: 2, kernel: 9, stride: 1 };
    assert_eq!(geom.out_frames(), 7);
    let geom = ConvGeom { stride: 2, ..geom };
    assert_eq!(geom.out_frames(), 4);
}

#[test]
fn conv_matches_direct_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let geom = ConvGeom { batch: 2, frames: 6, joints: 3, kernel: 3, stride: 1 };
    let (cin, cout) = (2, 2);
    let x = random(&[2 * 6 * 3, cin], &mut rng);
    let w = random(&[3 * cin, cout], &mut rng);
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let wv = g.constant(w.clone());
    let y = g.temporal_conv(xv, wv, None, geom).unwrap();
    let y = g.value(y);
    for b in 0..2 {
        for to in 0..6 {
            for v in 0..3 {
                for co in 0..cout {
                    let mut want = 0.0;
                    for k in 0..3 {
                        let ti = to as isize + k as isize - 1;
                        if !(0..6).contains(&ti) {
                            continue;
                        }
                        for ci in 0..cin {
                            let xr = (b * 6 + ti as usize) * 3 + v;
                            want += x.data()[xr * cin + ci] * w.data()[(k * cin + ci) * cout + co];
                        }
                    }
                    let got = y.data()[((b * 6 + to) * 3 + v) * cout + co];
                    assert!((got - want).abs() < 1e-12);
                }
            }
        }
    }
}

fn rows_strategy() -> impl Strategy<Value = (usize, usize, Vec<f64>)> {
    (2usize..6, 1usize..6).prop_flat_map(|(r, c)| {
        (Just(r), Just(c), proptest::collection::vec(-5.0f64..5.0, r * c))
    })
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions((r, c, data) in rows_strategy(), tau in 0.05f64..2.0) {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![r, c], data).unwrap());
        let y = g.softmax(x, tau).unwrap();
        for row in g.value(y).data().chunks(c) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(row.iter().all(|&p| p > 0.0));
        }
    }

    #[test]
    fn normalized_rows_have_unit_norm((r, c, data) in rows_strategy()) {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![r, c], data.clone()).unwrap());
        let y = g.l2_normalize_rows(x).unwrap();
        for (row, src) in g.value(y).data().chunks(c).zip(data.chunks(c)) {
            let src_norm = src.iter().map(|v| v * v).sum::<f64>().sqrt();
            if src_norm > 1e-9 {
                let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                prop_assert!((n - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn centered_columns_have_zero_mean((r, c, data) in rows_strategy()) {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![r, c], data).unwrap());
        let y = g.mean_center_rows(x).unwrap();
        for m in column_means(g.value(y).data(), r, c) {
            prop_assert!(m.abs() < 1e-9);
        }
    }

    #[test]
    fn backward_is_bitwise_deterministic(seed in 0u64..1000) {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut g = Graph::new();
            let x = g.param(random(&[6, 4], &mut rng));
            let w = g.param(random(&[4, 3], &mut rng));
            let h = g.matmul(x, w).unwrap();
            let h = g.relu(h).unwrap();
            let h = g.mean_center_rows(h).unwrap();
            let h = g.l2_normalize_rows(h).unwrap();
            let s = g.softmax(h, 0.1).unwrap();
            let l = probe(&mut g, s, seed).unwrap();
            let grads = g.backward(l).unwrap();
            (grads.get(x).unwrap().clone(), grads.get(w).unwrap().clone())
        };
        prop_assert_eq!(run(), run());
    }
}
