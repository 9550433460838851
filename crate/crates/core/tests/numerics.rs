mod common;

use common::{naive_conv, rng};
use proptest::prelude::*;
use rblb::gradsuite::{case_names_of, run_suite, CaseKind};
use rblb::numerics::{finite_diff_check, sigmoid, MeanOver, Padding, Shape, Tape, Tensor};

#[test]
fn conv_matches_nested_loop_oracle() {
    let mut r = rng(11);
    let cases = [
        (
            Shape::new(1, 2, 4, 4),
            Shape::new(3, 2, 3, 3),
            1,
            Padding::ReflectSame,
        ),
        (
            Shape::new(1, 2, 4, 4),
            Shape::new(3, 2, 3, 3),
            1,
            Padding::ZeroSame,
        ),
        (
            Shape::new(2, 3, 7, 5),
            Shape::new(4, 3, 5, 5),
            1,
            Padding::ReflectSame,
        ),
        (
            Shape::new(2, 3, 8, 8),
            Shape::new(2, 3, 3, 3),
            2,
            Padding::ReflectSame,
        ),
        (
            Shape::new(1, 1, 9, 6),
            Shape::new(2, 1, 3, 3),
            2,
            Padding::ZeroSame,
        ),
        (
            Shape::new(1, 4, 3, 3),
            Shape::new(2, 4, 1, 1),
            1,
            Padding::ReflectSame,
        ),
    ];
    for (sx, sw, stride, pad) in cases {
        let x = Tensor::uniform(sx, -1.0, 1.0, &mut r);
        let w = Tensor::uniform(sw, -1.0, 1.0, &mut r);
        let b = Tensor::uniform(Shape::new(1, sw.n, 1, 1), -1.0, 1.0, &mut r);
        let mut t = Tape::new();
        let (xv, wv, bv) = (
            t.constant(x.clone()),
            t.constant(w.clone()),
            t.constant(b.clone()),
        );
        let y = t.conv2d(xv, wv, Some(bv), stride, pad).unwrap();
        let expected = naive_conv(&x, &w, Some(&b), stride, pad);
        assert_eq!(t.shape(y), expected.shape());
        let err = t.value(y).max_abs_diff(&expected);
        assert!(err <= 1e-5, "{sx} * {sw} stride {stride} {pad:?}: {err}");
    }
}

#[test]
fn delta_and_scaling_kernels() {
    let mut r = rng(2);
    let x = Tensor::uniform(Shape::new(1, 1, 5, 5), 0.0, 1.0, &mut r);
    let mut delta = Tensor::zeros(Shape::new(1, 1, 3, 3));
    delta.data_mut()[4] = 1.0;
    let mut t = Tape::new();
    let (xv, dv) = (t.constant(x.clone()), t.constant(delta));
    let y = t.conv2d(xv, dv, None, 1, Padding::ReflectSame).unwrap();
    assert_eq!(t.value(y), &x);
    let two = t.constant(Tensor::full(Shape::new(1, 1, 1, 1), 2.0));
    let y2 = t.conv2d(xv, two, None, 1, Padding::ZeroSame).unwrap();
    for (a, b) in t.value(y2).data().iter().zip(x.data()) {
        assert_eq!(*a, 2.0 * b);
    }
}

#[test]
fn batch_mean_matches_hand_sum() {
    let logits = [0.3f32, -1.2, 2.5, 0.7];
    let mut t = Tape::new();
    let v = t.constant(Tensor::from_column(&logits));
    let m = t.reduce_mean(v, MeanOver::Batch).unwrap();
    let expected = (0.3f64 - 1.2 + 2.5 + 0.7) / 4.0;
    assert!((t.item(m).unwrap() as f64 - expected).abs() < 1e-6);
}

#[test]
fn pow_matches_scalar_evaluation() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::scalar(0.8));
    let y = t.pow_scalar(x, 2.2).unwrap();
    assert!((t.item(y).unwrap() as f64 - 0.8f64.powf(2.2)).abs() < 1e-6);
}

#[test]
fn noise_concat_gives_seven_channels() {
    let mut t = Tape::new();
    let img = t.constant(Tensor::zeros(Shape::new(1, 3, 8, 8)));
    let noise = t.constant(Tensor::zeros(Shape::new(1, 4, 8, 8)));
    let c = t.concat_channels(img, noise).unwrap();
    assert_eq!(t.shape(c), Shape::new(1, 7, 8, 8));
}

#[test]
fn mean_gradient_is_uniform() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::zeros(Shape::new(2, 3, 2, 2)).with_grad());
    let m = t.mean_all(x).unwrap();
    t.backward(m).unwrap();
    assert!(t
        .grad(x)
        .unwrap()
        .iter()
        .all(|&g| (g - 1.0 / 24.0).abs() < 1e-9));
}

#[test]
fn sigmoid_is_stable_at_extremes() {
    assert_eq!(sigmoid(0.0), 0.5);
    assert!(sigmoid(-200.0) >= 0.0 && sigmoid(-200.0) < 1e-30);
    assert_eq!(sigmoid(200.0), 1.0);
}

#[test]
fn backward_without_recording_fails() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::zeros(Shape::new(1, 1, 2, 2)).with_grad());
    assert!(t.backward(x).is_err());
}

#[test]
fn finite_difference_examples() {
    // sum(x²) has the analytic gradient 2x; the check must agree at eps=1e-3.
    for seed in 0..20 {
        let x = Tensor::uniform(Shape::new(1, 1, 2, 3), -1.0, 1.0, &mut rng(seed));
        let rep = finite_diff_check(
            |t, v| {
                let s = t.square(v);
                let m = t.mean_all(s)?;
                Ok(t.scale(m, 6.0))
            },
            &x,
            1e-3,
        )
        .unwrap();
        assert!(rep.rel_err <= 1e-4, "seed {seed}: {rep:?}");
    }
    let x = Tensor::uniform(Shape::new(1, 2, 3, 3), -1.0, 1.0, &mut rng(1));
    assert!(finite_diff_check(|_, v| Ok(v), &x, 1e-3).is_err());
}

#[test]
fn every_primitive_passes_finite_differences() {
    for name in case_names_of(CaseKind::Primitive) {
        let r = run_suite(20, 42, Some(name)).unwrap().remove(0);
        assert!(r.passed, "{} rel err {:.3e}", r.name, r.worst_rel_err);
        assert_eq!(r.instances, 20);
    }
}

fn tensor(shape: Shape) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-1.0f32..1.0, shape.numel())
        .prop_map(move |d| Tensor::from_vec(shape, d).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn same_padding_preserves_size(k in prop::sample::select(vec![1usize, 3, 5, 7]), h in 4usize..12, w in 4usize..12) {
        let mut t = Tape::new();
        let x = t.constant(Tensor::zeros(Shape::new(1, 2, h, w)));
        let wv = t.constant(Tensor::zeros(Shape::new(3, 2, k, k)));
        for pad in [Padding::ReflectSame, Padding::ZeroSame] {
            let y = t.conv2d(x, wv, None, 1, pad).unwrap();
            prop_assert_eq!(t.shape(y), Shape::new(1, 3, h, w));
        }
    }

    #[test]
    fn conv_is_linear(a in tensor(Shape::new(1, 2, 5, 5)), b in tensor(Shape::new(1, 2, 5, 5)), w in tensor(Shape::new(2, 2, 3, 3))) {
        let mut t = Tape::new();
        let (av, bv, wv) = (t.constant(a), t.constant(b), t.constant(w));
        let sum = t.add(av, bv).unwrap();
        let lhs = t.conv2d(sum, wv, None, 1, Padding::ReflectSame).unwrap();
        let ca = t.conv2d(av, wv, None, 1, Padding::ReflectSame).unwrap();
        let cb = t.conv2d(bv, wv, None, 1, Padding::ReflectSame).unwrap();
        let rhs = t.add(ca, cb).unwrap();
        prop_assert!(t.value(lhs).max_abs_diff(t.value(rhs)) <= 1e-5);
    }

    #[test]
    fn gradients_are_additive(x in tensor(Shape::new(1, 2, 4, 4)), w in tensor(Shape::new(2, 2, 3, 3))) {
        let loss_a = |t: &mut Tape, xv| {
            let wv = t.constant(w.clone());
            let y = t.conv2d(xv, wv, None, 1, Padding::ReflectSame).unwrap();
            let r = t.relu(y);
            t.mean_all(r).unwrap()
        };
        let loss_b = |t: &mut Tape, xv| {
            let s = t.sigmoid(xv);
            let q = t.square(s);
            t.mean_all(q).unwrap()
        };
        let grad_of = |both: bool, which_a: bool| {
            let mut t = Tape::new();
            let xv = t.leaf(x.clone().with_grad());
            let l = if both {
                let a = loss_a(&mut t, xv);
                let b = loss_b(&mut t, xv);
                t.add(a, b).unwrap()
            } else if which_a {
                loss_a(&mut t, xv)
            } else {
                loss_b(&mut t, xv)
            };
            t.backward(l).unwrap();
            t.grad(xv).unwrap().to_vec()
        };
        let joint = grad_of(true, false);
        let (ga, gb) = (grad_of(false, true), grad_of(false, false));
        for i in 0..joint.len() {
            prop_assert!((joint[i] - (ga[i] + gb[i])).abs() <= 1e-5);
        }
    }

    #[test]
    fn replay_is_bit_identical(seed in any::<u64>()) {
        let run = || {
            let mut r = rng(seed);
            let mut t = Tape::new();
            let x = t.leaf(Tensor::randn(Shape::new(1, 2, 5, 5), 1.0, &mut r).with_grad());
            let w = t.leaf(Tensor::randn(Shape::new(3, 2, 3, 3), 0.3, &mut r).with_grad());
            let y = t.conv2d(x, w, None, 1, Padding::ReflectSame).unwrap();
            let s = t.sigmoid(y);
            let l = t.mean_all(s).unwrap();
            t.backward(l).unwrap();
            (t.item(l).unwrap().to_bits(), t.grad(w).unwrap().iter().map(|g| g.to_bits()).collect::<Vec<_>>())
        };
        prop_assert_eq!(run(), run());
    }
}
