use proptest::prelude::*;

use super::*;
use crate::error::Error;

fn eval(f: impl FnOnce(&mut Graph) -> crate::Result<Var>) -> crate::Result<Tensor> {
    let mut g = Graph::new();
    let v = f(&mut g)?;
    Ok(g.value(v).clone())
}

#[test]
fn matmul_examples() {
    let b = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
    assert_eq!(Tensor::eye(2).matmul(&b).unwrap(), b);
    let a = Tensor::from_rows(&[vec![1.0, 1.0]]).unwrap();
    let c = Tensor::from_rows(&[vec![2.0], vec![3.0]]).unwrap();
    assert_eq!(a.matmul(&c).unwrap().data(), &[5.0]);
}

#[test]
fn matmul_reports_both_shapes() {
    let err = eval(|g| {
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        g.matmul(a, b)
    })
    .unwrap_err();
    match err {
        Error::Shape { lhs, rhs, .. } => {
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![2, 3]);
        }
        other => panic!("unexpected {other}"),
    }
}

#[test]
fn conv_zero_kernel_gives_bias() {
    let out = eval(|g| {
        let x = g.constant(Tensor::full(&[2, 3, 3], 7.0));
        let k = g.constant(Tensor::zeros(&[2, 2, 3, 3]));
        let b = g.constant(Tensor::new(&[2], vec![0.5, -1.0]).unwrap());
        g.conv2d(x, k, b)
    })
    .unwrap();
    assert!(out.data()[..9].iter().all(|&v| v == 0.5));
    assert!(out.data()[9..].iter().all(|&v| v == -1.0));
}

#[test]
fn conv_identity_kernel_is_identity() {
    let input = Tensor::new(&[1, 4, 5], (0..20).map(|v| f64::from(v) * 0.3).collect()).unwrap();
    let mut k = Tensor::zeros(&[1, 1, 3, 3]);
    k.set(&[0, 0, 1, 1], 1.0);
    let out = eval(|g| {
        let x = g.constant(input.clone());
        let k = g.constant(k);
        let b = g.constant(Tensor::zeros(&[1]));
        g.conv2d(x, k, b)
    })
    .unwrap();
    assert_eq!(out, input);
}

#[test]
fn conv_averaging_kernel_matches_direct_sum() {
    // 1×4×4 ramp; direct 3×3 neighbourhood mean at interior pixels.
    let ramp: Vec<f64> = (0..16).map(f64::from).collect();
    let input = Tensor::new(&[1, 4, 4], ramp.clone()).unwrap();
    let out = eval(|g| {
        let x = g.constant(input);
        let k = g.constant(Tensor::full(&[1, 1, 3, 3], 1.0 / 9.0));
        let b = g.constant(Tensor::zeros(&[1]));
        g.conv2d(x, k, b)
    })
    .unwrap();
    for r in 1..3 {
        for c in 1..3 {
            let mut s = 0.0;
            for dr in -1i32..=1 {
                for dc in -1i32..=1 {
                    s += ramp[((r as i32 + dr) * 4 + c as i32 + dc) as usize];
                }
            }
            assert!((out.at(&[0, r, c]) - s / 9.0).abs() < 1e-12);
        }
    }
}

#[test]
fn conv_rejects_channel_mismatch() {
    let res = eval(|g| {
        let x = g.constant(Tensor::zeros(&[2, 3, 3]));
        let k = g.constant(Tensor::zeros(&[1, 3, 3, 3]));
        let b = g.constant(Tensor::zeros(&[1]));
        g.conv2d(x, k, b)
    });
    assert!(matches!(res, Err(Error::Shape { .. })));
}

#[test]
fn upsample_examples() {
    let single = eval(|g| {
        let x = g.constant(Tensor::full(&[1, 1, 1], 3.5));
        g.upsample_bilinear(x, 2)
    })
    .unwrap();
    assert_eq!(single, Tensor::full(&[1, 2, 2], 3.5));

    // half-pixel centres: src = (dst + 0.5) / 2 - 0.5, clamped to the edges
    let row = eval(|g| {
        let x = g.constant(Tensor::new(&[1, 1, 2], vec![0.0, 1.0]).unwrap());
        g.upsample_bilinear(x, 2)
    })
    .unwrap();
    assert_eq!(row.dims(), &[1, 2, 4]);
    assert_eq!(&row.data()[..4], &[0.0, 0.25, 0.75, 1.0]);
}

#[test]
fn upsample_rejects_unsupported_factor() {
    let res = eval(|g| {
        let x = g.constant(Tensor::zeros(&[1, 2, 2]));
        g.upsample_bilinear(x, 3)
    });
    assert!(matches!(res, Err(Error::InvalidArgument(_))));
}

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-10.0f64..10.0, rows * cols)
        .prop_map(move |d| Tensor::new(&[rows, cols], d).unwrap())
}

proptest! {
    #[test]
    fn matmul_is_associative(
        (a, b, c) in (1usize..6, 1usize..6, 1usize..6, 1usize..6)
            .prop_flat_map(|(m, k, n, p)| (matrix(m, k), matrix(k, n), matrix(n, p)))
    ) {
        let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
        let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
        for (x, y) in left.data().iter().zip(right.data()) {
            prop_assert!((x - y).abs() <= 1e-9, "{x} vs {y}");
        }
    }

    #[test]
    fn upsample_of_constant_is_constant(
        c in 1usize..3, h in 1usize..5, w in 1usize..5,
        value in -100.0f64..100.0, four in any::<bool>(),
    ) {
        let f = if four { 4 } else { 2 };
        let out = eval(|g| {
            let x = g.constant(Tensor::full(&[c, h, w], value));
            g.upsample_bilinear(x, f)
        }).unwrap();
        prop_assert!(out.data().iter().all(|&v| v == value));
    }
}
