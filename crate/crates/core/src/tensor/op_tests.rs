use super::*;
use crate::testkit::{random_tensor, GradCheck};

fn ones(shape: Shape) -> Tensor {
    Tensor::ones(shape)
}

#[test]
fn conv_sum_of_ones() {
    let t = Tape::new();
    let x = t.constant(ones(Shape::new(1, 1, 3, 3)));
    let w = t.constant(ones(Shape::new(1, 1, 3, 3)));
    let y = t.conv2d(x, w, None, 1, 0).unwrap();
    assert_eq!(t.shape(y), Shape::new(1, 1, 1, 1));
    assert_eq!(t.value(y).item(), 9.0);
}

#[test]
fn conv_identity_kernel() {
    let t = Tape::new();
    let input = random_tensor(Shape::new(1, 1, 3, 3), 1, -1.0, 1.0, 0.0);
    let mut k = vec![0.0; 9];
    k[4] = 1.0;
    let x = t.constant(input.clone());
    let w = t.constant(Tensor::new(Shape::new(1, 1, 3, 3), k).unwrap());
    let y = t.conv2d(x, w, None, 1, 1).unwrap();
    assert_eq!(t.value(y), input);
}

#[test]
fn conv_output_extents() {
    let t = Tape::new();
    let x = t.constant(Tensor::zeros(Shape::new(2, 3, 9, 7)));
    let w = t.constant(Tensor::zeros(Shape::new(5, 3, 4, 4)));
    let y = t.conv2d(x, w, None, 2, 1).unwrap();
    // floor((9 + 2 - 4) / 2) + 1 = 4, floor((7 + 2 - 4) / 2) + 1 = 3
    assert_eq!(t.shape(y), Shape::new(2, 5, 4, 3));
}

#[test]
fn conv_channel_mismatch_names_axis() {
    let t = Tape::new();
    let x = t.constant(Tensor::zeros(Shape::new(1, 2, 4, 4)));
    let w = t.constant(Tensor::zeros(Shape::new(1, 3, 3, 3)));
    let err = t.conv2d(x, w, None, 1, 1).unwrap_err();
    assert!(
        matches!(
            err,
            Error::Dimension {
                axis: "channel",
                ..
            }
        ),
        "{err}"
    );
}

#[test]
fn conv_bias_is_added() {
    let t = Tape::new();
    let x = t.constant(Tensor::zeros(Shape::new(1, 1, 2, 2)));
    let w = t.constant(Tensor::zeros(Shape::new(2, 1, 1, 1)));
    let b = t.constant(Tensor::new(Shape::new(1, 2, 1, 1), vec![1.5, -2.0]).unwrap());
    let y = t.value(t.conv2d(x, w, Some(b), 1, 0).unwrap());
    assert_eq!(y.data(), &[1.5, 1.5, 1.5, 1.5, -2.0, -2.0, -2.0, -2.0]);
}

#[test]
fn conv_gradient_matches_finite_differences() {
    let x = random_tensor(Shape::new(2, 3, 8, 8), 11, -1.0, 1.0, 0.0);
    let w = random_tensor(Shape::new(4, 3, 3, 3), 12, -1.0, 1.0, 0.0);
    let b = random_tensor(Shape::new(1, 4, 1, 1), 13, -1.0, 1.0, 0.0);
    let err = GradCheck::default()
        .coordinates(&[x, w, b], |t, v| t.conv2d(v[0], v[1], Some(v[2]), 1, 1))
        .unwrap();
    assert!(err < 1e-3, "relative error {err}");
}

#[test]
fn strided_conv_gradient_matches_finite_differences() {
    let x = random_tensor(Shape::new(1, 2, 8, 8), 21, -1.0, 1.0, 0.0);
    let w = random_tensor(Shape::new(3, 2, 4, 4), 22, -1.0, 1.0, 0.0);
    let err = GradCheck::default()
        .coordinates(&[x, w], |t, v| t.conv2d(v[0], v[1], None, 2, 1))
        .unwrap();
    assert!(err < 1e-3, "relative error {err}");
}

#[test]
fn elementwise_values() {
    let t = Tape::new();
    let x = t.constant(Tensor::new(Shape::new(1, 1, 1, 3), vec![-1.0, 2.5, 0.0]).unwrap());
    assert_eq!(t.value(t.relu(x)).data(), &[0.0, 2.5, 0.0]);
    assert_eq!(t.value(t.sigmoid(x)).data()[2], 0.5);
    assert_eq!(t.value(t.leaky_relu(x, 0.2)).data(), &[-0.2, 2.5, 0.0]);
    let s = t.value(t.sqrt(t.constant(Tensor::zeros(Shape::SCALAR))));
    assert_eq!(s.item(), 0.0);
}

#[test]
fn tanh_gradient_matches_finite_differences() {
    let x = random_tensor(Shape::new(2, 4, 8, 8), 31, -1.0, 1.0, 0.0);
    let err = GradCheck::default()
        .coordinates(&[x], |t, v| Ok(t.tanh(v[0])))
        .unwrap();
    assert!(err < 1e-4, "relative error {err}");
}

#[test]
fn unary_gradients_match_finite_differences() {
    let x = random_tensor(Shape::new(2, 4, 8, 8), 32, -1.0, 1.0, 0.05);
    let pos = random_tensor(Shape::new(2, 4, 8, 8), 33, 0.2, 1.0, 0.0);
    let check = GradCheck::default();
    let ops: Vec<(&str, UnaryOp, &Tensor)> = vec![
        ("relu", UnaryOp::Relu, &x),
        ("leaky_relu", UnaryOp::LeakyRelu(0.2), &x),
        ("sigmoid", UnaryOp::Sigmoid, &x),
        ("exp", UnaryOp::Exp, &x),
        ("abs", UnaryOp::Abs, &x),
        ("square", UnaryOp::Square, &x),
        ("scale", UnaryOp::Scale(-1.7), &x),
        ("add_scalar", UnaryOp::AddScalar(0.3), &x),
        ("clamp_min", UnaryOp::ClampMin(0.01), &x),
        ("log", UnaryOp::Log, &pos),
        ("sqrt", UnaryOp::Sqrt, &pos),
    ];
    for (name, op, input) in ops {
        let err = check
            .coordinates(std::slice::from_ref(input), |t, v| Ok(t.unary(op, v[0])))
            .unwrap();
        assert!(err < 1e-3, "{name}: relative error {err}");
    }
}

#[test]
fn binary_gradients_with_broadcast() {
    let a = random_tensor(Shape::new(2, 4, 8, 8), 41, -1.0, 1.0, 0.0);
    let chan = random_tensor(Shape::new(1, 4, 1, 1), 42, 0.5, 1.5, 0.0);
    let loc = random_tensor(Shape::new(2, 1, 8, 8), 43, 0.5, 1.5, 0.0);
    let check = GradCheck::default();
    for op in [BinaryOp::Add, BinaryOp::Sub, BinaryOp::Mul, BinaryOp::Div] {
        for b in [&a, &chan, &loc] {
            let b = if std::ptr::eq(b, &a) {
                random_tensor(a.shape(), 44, 0.5, 1.5, 0.0)
            } else {
                b.clone()
            };
            let err = check
                .coordinates(&[a.clone(), b.clone()], |t, v| t.binary(op, v[0], v[1]))
                .unwrap();
            assert!(
                err < 1e-3,
                "{op:?} with {:?}: relative error {err}",
                b.shape()
            );
        }
    }
}

#[test]
fn binary_rejects_non_broadcastable() {
    let t = Tape::new();
    let a = t.constant(Tensor::zeros(Shape::new(1, 4, 2, 2)));
    let b = t.constant(Tensor::zeros(Shape::new(1, 3, 2, 2)));
    assert!(matches!(t.add(a, b), Err(Error::Dimension { .. })));
}

#[test]
fn reductions() {
    let t = Tape::new();
    let x = t.constant(Tensor::new(Shape::new(1, 4, 1, 1), vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    assert_eq!(t.value(t.channel_mean(x).unwrap()).item(), 2.5);
    let c = t.constant(Tensor::full(Shape::new(2, 3, 4, 5), 0.7));
    assert_eq!(t.value(t.mean(c).unwrap()).item(), 0.7);
    let cm = t.channel_mean(c).unwrap();
    assert_eq!(t.shape(cm), Shape::new(2, 1, 4, 5));
    let sm = t.spatial_mean(c).unwrap();
    assert_eq!(t.shape(sm), Shape::new(2, 3, 1, 1));
}

#[test]
fn reduce_rejects_empty_axis() {
    let t = Tape::new();
    let x = t.constant(Tensor::zeros(Shape::new(1, 0, 2, 2)));
    assert!(matches!(t.channel_mean(x), Err(Error::Dimension { .. })));
}

#[test]
fn sum_gradient_is_ones() {
    let t = Tape::new();
    let x = t.param(random_tensor(Shape::new(1, 1, 2, 2), 5, -1.0, 1.0, 0.0));
    let loss = t.sum(x).unwrap();
    let g = t.backward(loss).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[1.0; 4]);
}

#[test]
fn mean_of_squares_gradient() {
    let input = random_tensor(Shape::new(1, 2, 3, 3), 6, -1.0, 1.0, 0.0);
    let t = Tape::new();
    let x = t.param(input.clone());
    let loss = t.mean(t.square(x)).unwrap();
    let g = t.backward(loss).unwrap();
    let n = input.len() as f32;
    for (gv, xv) in g.get(x).unwrap().data().iter().zip(input.data()) {
        assert!((gv - 2.0 * xv / n).abs() < 1e-7);
    }
}

#[test]
fn diamond_graph_accumulates_both_paths() {
    let t = Tape::new();
    let x = t.param(Tensor::new(Shape::new(1, 1, 1, 2), vec![0.3, -0.4]).unwrap());
    let y = t.add(x, x).unwrap();
    let loss = t.sum(y).unwrap();
    let g = t.backward(loss).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[2.0, 2.0]);
}

#[test]
fn backward_contract_and_state_errors() {
    let t = Tape::new();
    let x = t.param(Tensor::zeros(Shape::new(1, 1, 2, 2)));
    assert!(matches!(t.backward(x), Err(Error::Contract(_))));
    let loss = t.sum(x).unwrap();
    t.backward(loss).unwrap();
    assert!(matches!(t.backward(loss), Err(Error::State(_))));
}

#[test]
fn reduction_gradients_match_finite_differences() {
    let x = random_tensor(Shape::new(2, 4, 8, 8), 51, -1.0, 1.0, 0.0);
    let check = GradCheck::default();
    for op in [
        ReduceOp::Sum,
        ReduceOp::Mean,
        ReduceOp::ChannelSum,
        ReduceOp::ChannelMean,
        ReduceOp::SpatialSum,
        ReduceOp::SpatialMean,
    ] {
        let err = check
            .coordinates(std::slice::from_ref(&x), |t, v| t.reduce(op, v[0]))
            .unwrap();
        assert!(err < 1e-3, "{op:?}: relative error {err}");
    }
}

#[test]
fn up2_blocks_and_round_trip() {
    let t = Tape::new();
    let input = Tensor::new(Shape::new(1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let up = t.up2(t.constant(input.clone()));
    assert_eq!(
        t.value(up).data(),
        &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0, 3.0, 3.0, 4.0, 4.0]
    );
    assert_eq!(t.value(t.down2(up).unwrap()), input);
    let odd = t.constant(Tensor::zeros(Shape::new(1, 1, 3, 4)));
    assert!(matches!(
        t.down2(odd),
        Err(Error::Dimension { axis: "height", .. })
    ));
}

#[test]
fn resample_gradients_match_finite_differences() {
    let x = random_tensor(Shape::new(2, 4, 8, 8), 61, -1.0, 1.0, 0.0);
    let check = GradCheck::default();
    let err = check
        .coordinates(std::slice::from_ref(&x), |t, v| Ok(t.up2(v[0])))
        .unwrap();
    assert!(err < 1e-3, "up2: {err}");
    let err = check
        .coordinates(std::slice::from_ref(&x), |t, v| t.down2(v[0]))
        .unwrap();
    assert!(err < 1e-3, "down2: {err}");
}

#[test]
fn up2_gradient_is_block_sum() {
    let t = Tape::new();
    let x = t.param(Tensor::zeros(Shape::new(1, 1, 2, 2)));
    let up = t.up2(x);
    let w = t.constant(Tensor::from_fn(Shape::new(1, 1, 4, 4), |[_, _, y, x]| {
        (y * 4 + x) as f32
    }));
    let loss = t.sum(t.mul(up, w).unwrap()).unwrap();
    let g = t.backward(loss).unwrap();
    // block sums of 0..16 laid out 4x4
    assert_eq!(g.get(x).unwrap().data(), &[10.0, 18.0, 42.0, 50.0]);
}

#[test]
fn instance_norm_statistics_and_gradient() {
    let x = random_tensor(Shape::new(2, 4, 8, 8), 71, -1.0, 1.0, 0.0);
    let t = Tape::new();
    let y = t.value(t.instance_norm(t.constant(x.clone()), 1e-5).unwrap());
    for pl in y.data().chunks(64) {
        let m = pl.iter().map(|&v| v as f64).sum::<f64>() / 64.0;
        let s = (pl.iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>() / 64.0).sqrt();
        assert!(m.abs() < 1e-4);
        assert!((s - 1.0).abs() < 1e-3);
    }
    let err = GradCheck::default()
        .coordinates(&[x], |t, v| t.instance_norm(v[0], 1e-5))
        .unwrap();
    assert!(err < 1e-3, "relative error {err}");
}

#[test]
fn concat_and_gather_gradients() {
    let a = random_tensor(Shape::new(2, 2, 4, 4), 81, -1.0, 1.0, 0.0);
    let b = random_tensor(Shape::new(2, 3, 4, 4), 82, -1.0, 1.0, 0.0);
    let check = GradCheck::default();
    let err = check
        .coordinates(&[a, b], |t, v| t.concat(&[v[0], v[1]]))
        .unwrap();
    assert!(err < 1e-3, "concat: {err}");
    let m = random_tensor(Shape::new(2, 1, 4, 4), 83, -1.0, 1.0, 0.0);
    let idx = vec![vec![0, 5, 5, 15], vec![3, 2, 1, 0]];
    let err = check
        .coordinates(&[m], |t, v| t.gather(v[0], &idx))
        .unwrap();
    assert!(err < 1e-3, "gather: {err}");
}

#[test]
fn filter1d_gradients() {
    let x = random_tensor(Shape::new(1, 2, 8, 8), 91, -1.0, 1.0, 0.0);
    let taps = [0.5, 0.2, 0.05];
    let check = GradCheck::default();
    for axis in [Axis::Height, Axis::Width] {
        for parity in [Parity::Even, Parity::Odd] {
            let err = check
                .coordinates(std::slice::from_ref(&x), |t, v| {
                    t.filter1d(v[0], &taps, axis, parity)
                })
                .unwrap();
            assert!(err < 1e-3, "{axis:?} {parity:?}: {err}");
        }
    }
}

#[test]
fn contrastive_gradients() {
    let pos = random_tensor(Shape::new(2, 1, 1, 5), 101, -3.0, 3.0, 0.0);
    let neg = random_tensor(Shape::new(2, 1, 1, 5), 102, -3.0, 3.0, 0.0);
    let err = GradCheck::default()
        .coordinates(&[pos, neg], |t, v| t.contrastive(v[0], v[1]))
        .unwrap();
    assert!(err < 1e-3, "relative error {err}");
}

#[test]
fn detached_values_receive_no_gradient() {
    let t = Tape::new();
    let x = t.param(Tensor::ones(Shape::new(1, 1, 2, 2)));
    let d = t.detach(x);
    let loss = t.sum(t.mul(x, d).unwrap()).unwrap();
    let g = t.backward(loss).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[1.0; 4]);
    assert!(g.get(d).is_none());
}

mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn down2_inverts_up2(seed in any::<u64>(), h in 1usize..6, w in 1usize..6) {
            let x = random_tensor(Shape::new(1, 2, h, w), seed, -1.0, 1.0, 0.0);
            let t = Tape::new();
            let v = t.constant(x.clone());
            let back = t.value(t.down2(t.up2(v)).unwrap());
            prop_assert_eq!(back, x);
        }

        #[test]
        fn forward_is_deterministic(seed in any::<u64>()) {
            let x = random_tensor(Shape::new(1, 3, 6, 6), seed, -1.0, 1.0, 0.0);
            let w = random_tensor(Shape::new(4, 3, 3, 3), seed ^ 1, -1.0, 1.0, 0.0);
            let run = || {
                let t = Tape::new();
                let y = t.conv2d(t.constant(x.clone()), t.constant(w.clone()), None, 1, 1).unwrap();
                t.value(t.instance_norm(y, 1e-5).unwrap())
            };
            prop_assert_eq!(run(), run());
        }
    }
}
