use proptest::prelude::*;

use super::*;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape, data.to_vec()).unwrap()
}

fn seeded(shape: &[usize], seed: u64) -> Tensor {
    // xorshift; deterministic values in (-1, 1)
    let mut s = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) | 1;
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            s ^= s << 13;
            s ^= s >> 7;
            s ^= s << 17;
            (s >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

#[test]
fn softmax_of_uniform_logits_is_uniform() {
    let mut g = Graph::new();
    let x = g.constant(t(&[3], &[0.0, 0.0, 0.0]));
    let y = g.softmax(x).unwrap();
    for v in g.value(y).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
}

#[test]
fn softmax_two_logits() {
    let mut g = Graph::new();
    let x = g.constant(t(&[1, 2], &[1.0, 2.0]));
    let y = g.softmax(x).unwrap();
    let d = g.value(y).data();
    assert!((d[0] - 0.26894).abs() < 1e-5);
    assert!((d[1] - 0.73106).abs() < 1e-5);
}

#[test]
fn matmul_by_identity_is_identity() {
    let mut g = Graph::new();
    let x = seeded(&[3, 4], 1);
    let i3 = g.constant(Tensor::eye(3));
    let xv = g.constant(x.clone());
    let i3t = g.transpose(i3).unwrap();
    // I @ X computed as (X^T @ I^T)^T to exercise matmul on the right operand
    let xt = g.transpose(xv).unwrap();
    let p = g.matmul(xt, i3t).unwrap();
    let out = g.transpose(p).unwrap();
    assert!(g.value(out).bits_eq(&x));
}

#[test]
fn shape_mismatch_names_both_shapes() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2, 3]));
    let err = g.matmul(a, b).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("matmul"), "{msg}");
    let c = g.constant(Tensor::zeros(&[3, 2]));
    assert!(matches!(g.add(a, c), Err(Error::Shape { .. })));
    assert!(matches!(g.concat(&[a, c], 1), Err(Error::Shape { .. })));
}

#[test]
fn non_finite_output_is_an_error() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::scalar(1e200));
    let err = g.mul(a, a).unwrap_err();
    assert!(matches!(err, Error::NonFinite { op: "mul" }));
}

#[test]
fn sum_gradient_is_ones() {
    let mut g = Graph::new();
    let x = g.param(t(&[3], &[1.0, -2.0, 5.0]));
    let s = g.sum(x).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[1.0, 1.0, 1.0]);
}

#[test]
fn square_gradient_is_twice_x() {
    let mut g = Graph::new();
    let x = g.param(t(&[2], &[1.0, 2.0]));
    let sq = g.mul(x, x).unwrap();
    let s = g.sum(sq).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[2.0, 4.0]);
}

#[test]
fn backward_twice_is_an_error() {
    let mut g = Graph::new();
    let x = g.param(t(&[2], &[1.0, 2.0]));
    let s = g.sum(x).unwrap();
    g.backward(s).unwrap();
    assert!(matches!(g.backward(s), Err(Error::Contract(_))));
}

#[test]
fn backward_needs_scalar() {
    let mut g = Graph::new();
    let x = g.param(t(&[2], &[1.0, 2.0]));
    assert!(matches!(g.backward(x), Err(Error::Contract(_))));
}

#[test]
fn every_participating_param_gets_a_grad() {
    let mut g = Graph::new();
    let a = g.param(seeded(&[2, 3], 3));
    let b = g.param(seeded(&[3, 2], 4));
    let unused = g.param(seeded(&[2], 5));
    let c = g.matmul(a, b).unwrap();
    let r = g.relu(c).unwrap();
    let s = g.sum(r).unwrap();
    g.backward(s).unwrap();
    assert!(g.grad(a).is_some());
    assert!(g.grad(b).is_some());
    assert!(g.grad(unused).is_none());
}

#[test]
fn constant_inputs_record_no_backward_op() {
    let mut g = Graph::new();
    let a = g.constant(seeded(&[2, 2], 6));
    let b = g.relu(a).unwrap();
    assert!(!g.requires_grad(b));
}

#[test]
fn masked_softmax_zeroes_excluded_entries() {
    let mut g = Graph::new();
    let x = g.constant(seeded(&[2, 3, 3], 7));
    let mask = Mask::new(3, 3, vec![true, false, false, false, true, false, false, false, true]).unwrap();
    let y = g.masked_softmax(x, &mask).unwrap();
    let v = g.value(y);
    for b in 0..2 {
        for r in 0..3 {
            for c in 0..3 {
                assert_eq!(v.get(&[b, r, c]), if r == c { 1.0 } else { 0.0 });
            }
        }
    }
    let all = Mask::all(3, 3);
    let y1 = g.masked_softmax(x, &all).unwrap();
    let y2 = g.softmax(x).unwrap();
    assert!(g.value(y1).bits_eq(g.value(y2)));
}

#[test]
fn mask_with_empty_row_is_rejected() {
    let err = Mask::new(2, 2, vec![true, false, false, false]).unwrap_err();
    assert!(matches!(err, Error::Contract(_)));
}

#[test]
fn slice_and_concat_invert() {
    let mut g = Graph::new();
    let x = g.constant(seeded(&[2, 5, 3], 8));
    let a = g.slice(x, 1, 0, 2).unwrap();
    let b = g.slice(x, 1, 2, 3).unwrap();
    let back = g.concat(&[a, b], 1).unwrap();
    assert!(g.value(back).bits_eq(g.value(x)));
}

/// One scalar-valued function per primitive, each checked against central
/// differences at a point away from kinks.
fn primitive_cases() -> Vec<(&'static str, Vec<Tensor>, Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>)> {
    let w = |g: &mut Graph, y: Var, seed: u64| -> Result<Var> {
        // weighted sum so every output entry gets a distinct cotangent
        let weights = g.constant(seeded(g.shape(y), seed));
        let p = g.mul(y, weights)?;
        g.sum(p)
    };
    vec![
        ("matmul", vec![seeded(&[2, 3, 4], 10), seeded(&[4, 2], 11)], Box::new(move |g, v| {
            let y = g.matmul(v[0], v[1])?;
            w(g, y, 12)
        })),
        ("bmm", vec![seeded(&[2, 3, 4], 13), seeded(&[2, 4, 3], 14)], Box::new(move |g, v| {
            let y = g.bmm(v[0], v[1])?;
            w(g, y, 15)
        })),
        ("add_broadcast", vec![seeded(&[3, 4], 16), seeded(&[4], 17)], Box::new(move |g, v| {
            let y = g.add(v[0], v[1])?;
            w(g, y, 18)
        })),
        ("sub_broadcast", vec![seeded(&[3, 1], 19), seeded(&[3, 4], 20)], Box::new(move |g, v| {
            let y = g.sub(v[0], v[1])?;
            w(g, y, 21)
        })),
        ("mul_broadcast", vec![seeded(&[2, 3, 1], 22), seeded(&[2, 3, 4], 23)], Box::new(move |g, v| {
            let y = g.mul(v[0], v[1])?;
            w(g, y, 24)
        })),
        ("affine", vec![seeded(&[5], 25)], Box::new(move |g, v| {
            let y = g.affine(v[0], -1.5, 0.25)?;
            w(g, y, 26)
        })),
        ("relu", vec![Tensor::new(&[4], vec![-0.7, 0.3, 1.1, -0.2]).unwrap()], Box::new(move |g, v| {
            let y = g.relu(v[0])?;
            w(g, y, 27)
        })),
        ("sigmoid", vec![seeded(&[6], 28)], Box::new(move |g, v| {
            let y = g.sigmoid(v[0])?;
            w(g, y, 29)
        })),
        ("abs", vec![Tensor::new(&[3], vec![-0.7, 0.3, 1.1]).unwrap()], Box::new(move |g, v| {
            let y = g.abs(v[0])?;
            w(g, y, 30)
        })),
        ("softmax", vec![seeded(&[3, 4], 31)], Box::new(move |g, v| {
            let y = g.softmax(v[0])?;
            w(g, y, 32)
        })),
        ("masked_softmax", vec![seeded(&[2, 3, 3], 33)], Box::new(move |g, v| {
            let mask = Mask::new(3, 3, vec![true, true, false, false, true, true, true, false, true])?;
            let y = g.masked_softmax(v[0], &mask)?;
            w(g, y, 34)
        })),
        ("concat", vec![seeded(&[2, 3], 35), seeded(&[2, 2], 36)], Box::new(move |g, v| {
            let y = g.concat(&[v[0], v[1]], 1)?;
            w(g, y, 37)
        })),
        ("slice", vec![seeded(&[3, 5, 2], 38)], Box::new(move |g, v| {
            let y = g.slice(v[0], 1, 1, 3)?;
            w(g, y, 39)
        })),
        ("reshape", vec![seeded(&[3, 4], 40)], Box::new(move |g, v| {
            let y = g.reshape(v[0], &[2, 6])?;
            w(g, y, 41)
        })),
        ("permute", vec![seeded(&[2, 3, 4], 42)], Box::new(move |g, v| {
            let y = g.permute(v[0], &[2, 0, 1])?;
            w(g, y, 43)
        })),
        ("broadcast_to", vec![seeded(&[1, 3], 44)], Box::new(move |g, v| {
            let y = g.broadcast_to(v[0], &[4, 2, 3])?;
            w(g, y, 45)
        })),
        ("mean", vec![seeded(&[7], 46)], Box::new(move |g, v| {
            let y = g.mul(v[0], v[0])?;
            g.mean(y)
        })),
    ]
}

#[test]
fn every_primitive_matches_central_differences() {
    for (name, inputs, f) in primitive_cases() {
        let params: Vec<(String, Tensor)> = inputs
            .into_iter()
            .enumerate()
            .map(|(i, t)| (format!("{name}.{i}"), t))
            .collect();
        let report = finite_difference_check(&f, &params, 1e-6).unwrap();
        assert!(
            report.max_relative_error < 1e-6,
            "{name}: relative error {} at {:?}",
            report.max_relative_error,
            report.worst
        );
    }
}

#[test]
fn softmax_mae_composite_matches_finite_differences() {
    let params = vec![
        ("w".to_string(), seeded(&[3, 4], 50)),
        ("x".to_string(), seeded(&[4, 1], 51)),
    ];
    // residual signs must differ or the loss is constant (softmax sums to 1)
    let target = Tensor::new(&[3, 1], vec![0.6, 0.1, 0.3]).unwrap();
    let report = finite_difference_check(
        |g, v| {
            let wx = g.matmul(v[0], v[1])?;
            let col = g.reshape(wx, &[1, 3])?;
            let s = g.softmax(col)?;
            let s = g.reshape(s, &[3, 1])?;
            let tg = g.constant(target.clone());
            let d = g.sub(s, tg)?;
            let a = g.abs(d)?;
            g.mean(a)
        },
        &params,
        1e-6,
    )
    .unwrap();
    assert!(report.max_relative_error < 1e-4, "{report:?}");
}

#[test]
fn one_layer_relu_net_matches_finite_differences() {
    // 3x2 + 2 + 2x1 = 10 parameters
    let params = vec![
        ("w".to_string(), seeded(&[3, 2], 60)),
        ("b".to_string(), seeded(&[2], 61)),
        ("v".to_string(), seeded(&[2, 1], 62)),
    ];
    let x = seeded(&[5, 3], 63);
    let report = finite_difference_check(
        |g, v| {
            let xv = g.constant(x.clone());
            let h = g.matmul(xv, v[0])?;
            let h = g.add(h, v[1])?;
            let h = g.relu(h)?;
            let o = g.matmul(h, v[2])?;
            let sq = g.mul(o, o)?;
            g.mean(sq)
        },
        &params,
        1e-6,
    )
    .unwrap();
    assert_eq!(report.entries_checked, 10);
    assert!(report.max_relative_error < 1e-4, "{report:?}");
}

#[test]
fn forward_is_bitwise_deterministic() {
    let run = || {
        let mut g = Graph::new();
        let a = g.constant(seeded(&[4, 5], 70));
        let b = g.constant(seeded(&[5, 3], 71));
        let c = g.matmul(a, b).unwrap();
        let s = g.softmax(c).unwrap();
        g.value(s).clone()
    };
    assert!(run().bits_eq(&run()));
}

proptest! {
    #[test]
    fn softmax_rows_are_stochastic(data in prop::collection::vec(-30.0f64..30.0, 12)) {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(&[3, 4], data).unwrap());
        let y = g.softmax(x).unwrap();
        for row in g.value(y).data().chunks(4) {
            prop_assert!(row.iter().all(|&v| v >= 0.0));
            let s: f64 = row.iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_distributes_over_addition(
        a in prop::collection::vec(-5.0f64..5.0, 6),
        b in prop::collection::vec(-5.0f64..5.0, 6),
        c in prop::collection::vec(-5.0f64..5.0, 6),
    ) {
        let mut g = Graph::new();
        let a = g.constant(Tensor::new(&[2, 3], a).unwrap());
        let b = g.constant(Tensor::new(&[3, 2], b).unwrap());
        let c = g.constant(Tensor::new(&[3, 2], c).unwrap());
        let bc = g.add(b, c).unwrap();
        let lhs = g.matmul(a, bc).unwrap();
        let ab = g.matmul(a, b).unwrap();
        let ac = g.matmul(a, c).unwrap();
        let rhs = g.add(ab, ac).unwrap();
        prop_assert!(g.value(lhs).max_abs_diff(g.value(rhs)) < 1e-10);
    }

    #[test]
    fn permute_round_trips(data in prop::collection::vec(-1.0f64..1.0, 24)) {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(&[2, 3, 4], data).unwrap());
        let p = g.permute(x, &[1, 2, 0]).unwrap();
        let back = g.permute(p, &[2, 0, 1]).unwrap();
        prop_assert!(g.value(back).bits_eq(g.value(x)));
    }
}

