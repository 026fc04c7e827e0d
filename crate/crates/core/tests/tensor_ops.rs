mod common;

use common::*;
use edgemix::tensor::{Tape, Tensor};
use edgemix::Error;

fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

#[test]
fn unit_kernel_conv_is_identity() {
    let mut r = rng(1);
    let x = randn(&[1, 4, 5], &mut r);
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let w = tape.constant(t(&[1, 1, 1, 1], &[1.0]));
    let b = tape.constant(t(&[1], &[0.0]));
    let y = tape.conv2d(xv, w, Some(b), 1, 0).unwrap();
    assert_eq!(tape.value(y), &x);
}

#[test]
fn all_ones_kernel_counts_overlap() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::full([1, 3, 3], 1.0));
    let w = tape.constant(Tensor::full([1, 1, 3, 3], 1.0));
    let y = tape.conv2d(x, w, None, 1, 1).unwrap();
    let v = tape.value(y);
    assert_eq!(v.at3(0, 1, 1), 9.0);
    assert_eq!(v.at3(0, 0, 0), 4.0);
    assert_eq!(v.at3(0, 0, 1), 6.0);
}

#[test]
fn conv_matches_quadruple_loop() {
    let mut r = rng(2);
    for (ci, co, h, w, k, stride, pad) in [
        (2, 3, 5, 5, 3, 1, 1),
        (4, 2, 8, 8, 3, 2, 1),
        (3, 4, 7, 6, 1, 1, 0),
        (1, 2, 6, 6, 5, 1, 2),
        (4, 4, 8, 8, 3, 1, 0),
    ] {
        let x = randn(&[ci, h, w], &mut r);
        let wt = randn(&[co, ci, k, k], &mut r);
        let b = randn(&[co], &mut r);
        let mut tape = Tape::new();
        let (xv, wv, bv) = (
            tape.constant(x.clone()),
            tape.constant(wt.clone()),
            tape.constant(b.clone()),
        );
        let y = tape.conv2d(xv, wv, Some(bv), stride, pad).unwrap();
        let want = naive_conv2d(&x, &wt, Some(&b), stride, pad);
        assert_eq!(tape.shape(y), want.shape());
        assert!(rel_err(tape.value(y).data(), want.data()) <= 1e-5);
    }
}

#[test]
fn conv_rejects_bad_geometry() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::zeros([2, 4, 4]));
    let w = tape.constant(Tensor::zeros([1, 3, 3, 3]));
    assert!(matches!(
        tape.conv2d(x, w, None, 1, 1),
        Err(Error::Shape { .. })
    ));
    let w = tape.constant(Tensor::zeros([1, 2, 2, 2]));
    assert!(tape.conv2d(x, w, None, 1, 0).is_err());
}

#[test]
fn shift_by_index_arithmetic() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let same = tape.shift(x, 0, 0).unwrap();
    assert_eq!(tape.value(same), tape.value(x));
    let y = tape.shift(x, 1, 0).unwrap();
    assert_eq!(tape.value(y).data(), &[3.0, 4.0, 0.0, 0.0]);
    assert!(matches!(tape.shift(x, 2, 0), Err(Error::Contract(_))));
}

#[test]
fn shift_conv_top_left_kernel() {
    // One-hot at the top-left tap: output[1,1] reads input[0,0].
    let mut tape = Tape::new();
    let x = tape.constant(t(
        &[1, 3, 3],
        &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0],
    ));
    let y = tape.shift_conv(x, -1, -1).unwrap();
    assert_eq!(tape.value(y).at3(0, 1, 1), 1.0);
    let id = tape.shift_conv(x, 0, 0).unwrap();
    assert_eq!(tape.value(id), tape.value(x));
    assert!(matches!(
        tape.shift_conv(x, 2, 0),
        Err(Error::UnsupportedOffset { dx: 2, dy: 0 })
    ));
}

#[test]
fn shift_conv_equals_shift_exactly() {
    let mut r = rng(3);
    for shape in [[4, 8, 8], [3, 6, 6]] {
        let x: Tensor<f32> = Tensor::randn(shape, 1.0, &mut r);
        for dx in -1..=1 {
            for dy in -1..=1 {
                let mut tape = Tape::new();
                let xv = tape.constant(x.clone());
                let a = tape.shift(xv, dx, dy).unwrap();
                let b = tape.shift_conv(xv, dx, dy).unwrap();
                assert_eq!(tape.value(a), tape.value(b), "offset ({dx}, {dy})");
            }
        }
    }
}

#[test]
fn softmax_closed_forms_and_oracle() {
    let mut tape = Tape::new();
    let c = tape.constant(t(&[3], &[0.7, 0.7, 0.7]));
    let s = tape.softmax(c, 0).unwrap();
    assert!(tape
        .value(s)
        .data()
        .iter()
        .all(|v| (v - 1.0 / 3.0).abs() < 1e-15));
    let l = tape.constant(t(&[2], &[0.0, 2f64.ln()]));
    let s = tape.softmax(l, 0).unwrap();
    assert!((tape.value(s).data()[0] - 1.0 / 3.0).abs() < 1e-12);
    assert!((tape.value(s).data()[1] - 2.0 / 3.0).abs() < 1e-12);

    let mut r = rng(4);
    let x = randn(&[4, 7], &mut r);
    let xv = tape.constant(x.clone());
    let s = tape.softmax(xv, 1).unwrap();
    let shifted = tape.constant(x.map(|v| v + 5.0));
    let s2 = tape.softmax(shifted, 1).unwrap();
    for row in 0..4 {
        let vals = &x.data()[row * 7..row * 7 + 7];
        let z: f64 = vals.iter().map(|v| v.exp()).sum();
        let got = &tape.value(s).data()[row * 7..row * 7 + 7];
        assert!((got.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        for (g, v) in got.iter().zip(vals) {
            assert!((g - v.exp() / z).abs() < 1e-12);
        }
    }
    assert!(tape.value(s).max_abs_diff(tape.value(s2)) < 1e-6);
    // Axis 0 of the same tensor: columns sum to one.
    let s0 = tape.softmax(xv, 0).unwrap();
    for col in 0..7 {
        let sum: f64 = (0..4).map(|row| tape.value(s0).data()[row * 7 + col]).sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }
}

#[test]
fn upsample_cases() {
    let mut r = rng(5);
    let mut tape = Tape::new();
    let x = tape.constant(randn(&[2, 3, 4], &mut r));
    let same = tape.upsample_bilinear(x, 1).unwrap();
    assert_eq!(tape.value(same), tape.value(x));
    let c = tape.constant(t(&[1, 1, 1], &[0.3]));
    let up = tape.upsample_bilinear(c, 4).unwrap();
    assert_eq!(tape.shape(up), [1, 4, 4]);
    assert!(tape
        .value(up)
        .data()
        .iter()
        .all(|&v| (v - 0.3).abs() < 1e-15));

    let small = t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
    let sv = tape.constant(small.clone());
    let up = tape.upsample_bilinear(sv, 2).unwrap();
    // Row 0 of the 4×4 result by hand: x-sources -0.25→0, 0.25, 0.75, 1.25→1.
    let hand = [1.0, 1.25, 1.75, 2.0];
    for (x, &h) in hand.iter().enumerate() {
        assert!((tape.value(up).at3(0, 0, x) - h).abs() < 1e-6);
    }
    assert!(tape.value(up).max_abs_diff(&naive_upsample(&small, 2)) < 1e-6);
    let rand = randn(&[3, 3, 5], &mut r);
    let rv = tape.constant(rand.clone());
    let up = tape.upsample_bilinear(rv, 3).unwrap();
    assert!(tape.value(up).max_abs_diff(&naive_upsample(&rand, 3)) < 1e-12);
}

#[test]
fn elementwise_and_concat() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[2], &[-1.0, 2.0]));
    let r = tape.relu(x);
    assert_eq!(tape.value(r).data(), &[0.0, 2.0]);
    let z = tape.constant(t(&[1], &[0.0]));
    let s = tape.sigmoid(z);
    assert_eq!(tape.value(s).data(), &[0.5]);

    let a = tape.constant(Tensor::from_fn([2, 2, 2], |i| i as f64));
    let b = tape.constant(Tensor::from_fn([3, 2, 2], |i| 100.0 + i as f64));
    let c = tape.concat_channels(&[a, b]).unwrap();
    assert_eq!(tape.shape(c), [5, 2, 2]);
    assert_eq!(&tape.value(c).data()[..8], tape.value(a).data());
    assert_eq!(&tape.value(c).data()[8..], tape.value(b).data());
}

#[test]
fn backward_closed_forms() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::from_fn([2, 3], |i| i as f64 - 2.0));
    let s = tape.sum(x);
    tape.backward(s).unwrap();
    assert!(tape.grad(x).unwrap().data().iter().all(|&g| g == 1.0));

    let mut tape = Tape::new();
    let x = tape.param(t(&[2], &[1.0, 2.0]));
    let sq = tape.mul(x, x).unwrap();
    let s = tape.sum(sq);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 4.0]);
    // A second pass recomputes rather than accumulates.
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 4.0]);
    assert!(matches!(tape.backward(sq), Err(Error::Contract(_))));
}

#[test]
fn finite_inputs_give_finite_outputs() {
    let mut r = rng(6);
    let mut tape = Tape::new();
    let x = tape.param(Tensor::randn([4, 6, 6], 30.0, &mut r));
    let w = tape.param(randn(&[4, 4, 3, 3], &mut r));
    let ops = [
        tape.conv2d(x, w, None, 1, 1).unwrap(),
        tape.softmax(x, 0).unwrap(),
        tape.sigmoid(x),
        tape.upsample_bilinear(x, 2).unwrap(),
        tape.local_attention(x, x, x, 2, 2).unwrap(),
    ];
    for v in ops {
        assert!(tape.value(v).all_finite());
    }
}
