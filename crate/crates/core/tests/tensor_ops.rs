mod common;

use common::{conv2d, dense, gap, max_abs_diff, rng, std, Map};
use pkcam_core::harness::gradcheck::{gradient_errors, FD_EPS};
use pkcam_core::{Error, Graph, Tensor};
use proptest::prelude::*;
use rand::Rng;

fn rand_tensor(r: &mut rand_chacha::ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| r.random_range(-1.0..1.0))
}

#[test]
fn conv2d_matches_nested_loops() {
    let mut r = rng(11);
    for (stride, pad, k) in [
        (1, 1, 3),
        (2, 1, 3),
        (1, 0, 1),
        (2, 0, 1),
        (2, 3, 7),
        (1, 2, 5),
    ] {
        let x = Map::random(&mut r, 2, 3, 7, 6);
        let w = rand_tensor(&mut r, &[4, 3, k, k]);
        let mut g = Graph::new();
        let xv = g.constant(x.tensor());
        let wv = g.constant(w.clone());
        let y = g.conv2d(xv, wv, stride, pad).unwrap();
        let oracle = conv2d(&x, w.data(), 4, k, stride, pad);
        assert_eq!(g.shape(y), &[2, 4, oracle.h, oracle.w]);
        assert!(
            max_abs_diff(g.value(y).data(), &oracle.d) < 1e-12,
            "stride {stride} pad {pad} k {k}"
        );
    }
}

#[test]
fn conv1d_worked_example() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::new(&[1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let w = g.constant(Tensor::new(&[3], vec![1.0, 1.0, 1.0]).unwrap());
    let y = g.conv1d(x, w, 1).unwrap();
    assert_eq!(g.value(y).data(), &[3.0, 6.0, 9.0, 7.0]);
}

#[test]
fn conv1d_kernel_longer_than_padded_input_is_an_error() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::new(&[1, 2], vec![1.0, 2.0]).unwrap());
    let w = g.constant(Tensor::new(&[5], vec![1.0; 5]).unwrap());
    assert!(g.conv1d(x, w, 1).is_err());
}

#[test]
fn gap_and_std_worked_examples() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::new(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let m = g.gap2d(x).unwrap();
    let s = g.std2d(x, 0.0).unwrap();
    assert_eq!(g.value(m).data(), &[2.5]);
    assert!((g.value(s).data()[0] - 1.25f64.sqrt()).abs() < 1e-15);
    let c = g.constant(Tensor::full(&[1, 1, 3, 3], 5.0));
    let s = g.std2d(c, 0.0).unwrap();
    assert_eq!(g.value(s).data(), &[0.0]);
}

#[test]
fn pooling_and_dense_match_oracles() {
    let mut r = rng(12);
    for _ in 0..20 {
        let x = Map::random(&mut r, 3, 5, 4, 3);
        let mut g = Graph::new();
        let xv = g.constant(x.tensor());
        let m = g.gap2d(xv).unwrap();
        let s = g.std2d(xv, 1e-8).unwrap();
        let flat: Vec<f64> = gap(&x).concat();
        assert!(max_abs_diff(g.value(m).data(), &flat) < 1e-14);
        assert!(max_abs_diff(g.value(s).data(), &std(&x, 1e-8).concat()) < 1e-12);

        let w = rand_tensor(&mut r, &[2, 5]);
        let b = rand_tensor(&mut r, &[2]);
        let (wv, bv) = (g.constant(w.clone()), g.constant(b.clone()));
        let y = g.fc(m, wv, Some(bv)).unwrap();
        let oracle: Vec<f64> = gap(&x)
            .iter()
            .flat_map(|row| dense(row, w.data(), Some(b.data()), 2))
            .collect();
        assert!(max_abs_diff(g.value(y).data(), &oracle) < 1e-13);
    }
}

#[test]
fn max_pool_picks_window_maxima() {
    let mut g = Graph::new();
    let data: Vec<f64> = (0..16).map(f64::from).collect();
    let x = g.constant(Tensor::new(&[1, 1, 4, 4], data).unwrap());
    let y = g.max_pool2d(x, 3, 2, 1).unwrap();
    assert_eq!(g.value(y).data(), &[5.0, 7.0, 13.0, 15.0]);
}

#[test]
fn softmax_rows_sum_to_one() {
    let mut r = rng(13);
    let mut g = Graph::new();
    let x = g.constant(rand_tensor(&mut r, &[3, 7]));
    let y = g.softmax(x, 1).unwrap();
    for row in g.value(y).data().chunks(7) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-14);
    }
}

#[test]
fn repeat_channels_tiles_then_truncates() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::new(&[1, 3, 1, 1], vec![1.0, 2.0, 3.0]).unwrap());
    let y = g.repeat_channels(x, 8).unwrap();
    assert_eq!(g.value(y).data(), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0, 1.0, 2.0]);
    assert!(matches!(g.repeat_channels(x, 2), Err(Error::Contract(_))));
}

#[test]
fn shape_mismatches_are_dimension_errors() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[3, 2]));
    assert!(matches!(g.add(a, b), Err(Error::Dimension { .. })));
    let x = g.constant(Tensor::zeros(&[1, 2, 3, 3]));
    let w = g.constant(Tensor::zeros(&[4, 3, 3, 3]));
    assert!(matches!(g.conv2d(x, w, 1, 1), Err(Error::Dimension { .. })));
}

#[test]
fn backward_contract() {
    let mut g = Graph::new();
    let x = g.param(Tensor::full(&[2], 1.0));
    let unused = g.param(Tensor::full(&[3], 1.0));
    assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    let s = g.sum(x);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[1.0, 1.0]);
    assert_eq!(g.grad(unused).unwrap().data(), &[0.0; 3]);
    assert!(matches!(g.backward(s), Err(Error::Contract(_))));
}

/// Random projection that turns any tensor into a scalar loss.
fn project(g: &mut Graph, y: pkcam_core::Var, seed: u64) -> pkcam_core::Result<pkcam_core::Var> {
    let mut r = rng(seed);
    let shape = g.shape(y).to_vec();
    let c = g.constant(rand_tensor(&mut r, &shape));
    let m = g.mul(y, c)?;
    Ok(g.sum(m))
}

fn assert_grads<F>(inputs: &[Tensor], f: F)
where
    F: Fn(&mut Graph, &[pkcam_core::Var]) -> pkcam_core::Result<pkcam_core::Var>,
{
    let errs = gradient_errors(inputs, FD_EPS, f).unwrap();
    for (i, e) in errs.iter().enumerate() {
        assert!(*e < 1e-6, "input {i}: relative error {e}");
    }
}

#[test]
fn finite_differences_agree_for_every_op() {
    let mut r = rng(14);
    let x4 = rand_tensor(&mut r, &[2, 3, 5, 4]);
    let w4 = rand_tensor(&mut r, &[2, 3, 3, 3]);
    assert_grads(&[x4.clone(), w4.clone()], |g, v| {
        let y = g.conv2d(v[0], v[1], 2, 1)?;
        project(g, y, 1)
    });
    assert_grads(&[x4.clone(), w4], |g, v| {
        let y = g.conv2d(v[0], v[1], 1, 1)?;
        project(g, y, 1)
    });
    let x2 = rand_tensor(&mut r, &[3, 6]);
    let k = rand_tensor(&mut r, &[3]);
    assert_grads(&[x2.clone(), k], |g, v| {
        let y = g.conv1d(v[0], v[1], 1)?;
        project(g, y, 2)
    });
    assert_grads(std::slice::from_ref(&x4), |g, v| {
        let a = g.gap2d(v[0])?;
        let b = g.std2d(v[0], 1e-8)?;
        let s = g.add(a, b)?;
        project(g, s, 3)
    });
    assert_grads(std::slice::from_ref(&x4), |g, v| {
        let y = g.max_pool2d(v[0], 3, 2, 1)?;
        project(g, y, 4)
    });
    let w = rand_tensor(&mut r, &[4, 6]);
    let b = rand_tensor(&mut r, &[4]);
    assert_grads(&[x2.clone(), w, b], |g, v| {
        let y = g.fc(v[0], v[1], Some(v[2]))?;
        let y = g.sigmoid(y);
        project(g, y, 5)
    });
    let sc = rand_tensor(&mut r, &[3]);
    let sh = rand_tensor(&mut r, &[3]);
    assert_grads(&[x4.clone(), sc, sh], |g, v| {
        let y = g.channel_affine(v[0], v[1], v[2])?;
        let y = g.channel_bias(y, v[2])?;
        project(g, y, 6)
    });
    let s = rand_tensor(&mut r, &[2, 3]);
    assert_grads(&[x4.clone(), s], |g, v| {
        let y = g.scale_channels(v[0], v[1])?;
        let y = g.add_channels(y, v[1])?;
        let y = g.repeat_channels(y, 7)?;
        project(g, y, 7)
    });
    let (a, b2, kw, dw) = (
        rand_tensor(&mut r, &[2, 5]),
        rand_tensor(&mut r, &[2, 5]),
        rand_tensor(&mut r, &[2]),
        rand_tensor(&mut r, &[5, 2]),
    );
    assert_grads(&[a, b2, kw, dw], |g, v| {
        let st = g.stack(&[v[0], v[1]])?;
        let y1 = g.row_mix(st, v[2])?;
        let y2 = g.depthwise_mix(st, v[3])?;
        let y = g.mul(y1, y2)?;
        project(g, y, 8)
    });
    let logits = rand_tensor(&mut r, &[2, 20]);
    assert_grads(&[x4, logits], |g, v| {
        let a = g.softmax(v[1], 1)?;
        let y = g.weighted_spatial_sum(v[0], a)?;
        project(g, y, 9)
    });
    let logits = rand_tensor(&mut r, &[3, 4]);
    assert_grads(&[logits], |g, v| {
        let y = g.scale(v[0], 3.0);
        let y = g.reshape(y, &[4, 3])?;
        let y = g.relu(y);
        let y = g.reshape(y, &[3, 4])?;
        let z = g.add(y, v[0])?;
        g.cross_entropy(z, &[0, 3, 1])
    });
}

fn tensor_strategy(shape: &'static [usize]) -> impl Strategy<Value = Tensor> {
    let n: usize = shape.iter().product();
    prop::collection::vec(-3.0f64..3.0, n).prop_map(move |d| Tensor::new(shape, d).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn conv2d_is_linear_in_the_input(a in tensor_strategy(&[1, 2, 4, 4]), b in tensor_strategy(&[1, 2, 4, 4]),
                                     w in tensor_strategy(&[3, 2, 3, 3]), alpha in -2.0f64..2.0) {
        let mut g = Graph::new();
        let (av, bv, wv) = (g.constant(a), g.constant(b), g.constant(w));
        let scaled = g.scale(av, alpha);
        let sum = g.add(scaled, bv).unwrap();
        let lhs = g.conv2d(sum, wv, 1, 1).unwrap();
        let ca = g.conv2d(av, wv, 1, 1).unwrap();
        let cb = g.conv2d(bv, wv, 1, 1).unwrap();
        let ca = g.scale(ca, alpha);
        let rhs = g.add(ca, cb).unwrap();
        prop_assert!(g.value(lhs).max_abs_diff(g.value(rhs)) < 1e-10);
    }

    #[test]
    fn pooling_ignores_spatial_order(x in tensor_strategy(&[2, 3, 3, 3]), seed in 0u64..1000) {
        use rand::seq::SliceRandom;
        let mut perm: Vec<usize> = (0..9).collect();
        perm.shuffle(&mut rng(seed));
        let shuffled = Tensor::from_fn(&[2, 3, 3, 3], |i| {
            let (plane, pos) = (i / 9, i % 9);
            x.data()[plane * 9 + perm[pos]]
        });
        let mut g = Graph::new();
        let (a, b) = (g.constant(x), g.constant(shuffled));
        let (ma, mb) = (g.gap2d(a).unwrap(), g.gap2d(b).unwrap());
        let (sa, sb) = (g.std2d(a, 1e-8).unwrap(), g.std2d(b, 1e-8).unwrap());
        prop_assert!(g.value(ma).max_abs_diff(g.value(mb)) < 1e-14);
        prop_assert!(g.value(sa).max_abs_diff(g.value(sb)) < 1e-12);
    }

    #[test]
    fn sigmoid_gate_never_grows_a_value(x in tensor_strategy(&[2, 4, 2, 2]), s in tensor_strategy(&[2, 4])) {
        let mut g = Graph::new();
        let (xv, sv) = (g.constant(x.clone()), g.constant(s));
        let gate = g.sigmoid(sv);
        let y = g.scale_channels(xv, gate).unwrap();
        for (a, b) in g.value(y).data().iter().zip(x.data()) {
            prop_assert!(a.abs() <= b.abs());
        }
    }
}
