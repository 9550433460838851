mod common;

use common::{naive_conv, rng};
use proptest::prelude::*;
use rand::Rng;
use rblb::blur_synth::{
    apply_crf, average_blur, blur_sequences, gen_linear_kernel, invert_crf, kernel_blur,
    make_noise_map, BlurKernelSpec, BlurManifest, CrfParams,
};
use rblb::image_io::{load_png, save_png};
use rblb::numerics::{Padding, Shape, Tensor};

fn constant(v: f32) -> Tensor {
    Tensor::full(Shape::new(1, 3, 4, 5), v)
}

#[test]
fn crf_matches_scalar_power() {
    let crf = CrfParams::new(2.2).unwrap();
    let out = apply_crf(&Tensor::scalar(0.25), crf).unwrap();
    assert!((out.item().unwrap() as f64 - 0.25f64.powf(1.0 / 2.2)).abs() <= 1e-6);
    let back = invert_crf(&out, crf).unwrap();
    assert!((back.item().unwrap() - 0.25).abs() <= 1e-6);
}

#[test]
fn crf_rejects_out_of_range_values_and_gamma() {
    let crf = CrfParams::default();
    assert!(apply_crf(&Tensor::scalar(1.5), crf).is_err());
    assert!(invert_crf(&Tensor::scalar(-0.1), crf).is_err());
    assert!(CrfParams::new(0.5).is_err());
    assert!(CrfParams::new(4.5).is_err());
}

#[test]
fn average_of_two_constant_frames() {
    let linear = average_blur(
        &[constant(0.0), constant(1.0)],
        CrfParams::new(1.0).unwrap(),
    )
    .unwrap();
    assert!(linear.data().iter().all(|&v| (v - 0.5).abs() <= 1e-6));

    let out = average_blur(
        &[constant(0.2), constant(0.8)],
        CrfParams::new(2.2).unwrap(),
    )
    .unwrap();
    let oracle = ((0.2f64.powf(2.2) + 0.8f64.powf(2.2)) / 2.0).powf(1.0 / 2.2);
    assert!(out
        .data()
        .iter()
        .all(|&v| (v as f64 - oracle).abs() <= 1e-6));
}

#[test]
fn average_of_identical_frames_is_the_frame() {
    let mut r = rng(4);
    let f = Tensor::uniform(Shape::new(1, 3, 6, 6), 0.0, 1.0, &mut r);
    let out = average_blur(&vec![f.clone(); 7], CrfParams::default()).unwrap();
    assert!(out.max_abs_diff(&f) <= 1e-6);
}

#[test]
fn average_blur_errors() {
    assert!(average_blur(&[], CrfParams::default()).is_err());
    let a = Tensor::zeros(Shape::new(1, 3, 4, 4));
    let b = Tensor::zeros(Shape::new(1, 3, 4, 5));
    assert!(average_blur(&[a, b], CrfParams::default()).is_err());
}

#[test]
fn box_kernel_on_one_hot_matches_oracle() {
    let mut img = Tensor::zeros(Shape::new(1, 1, 5, 5));
    img.data_mut()[12] = 1.0;
    let third = 1.0 / 3.0;
    let spec = BlurKernelSpec::new(
        3,
        vec![0.0, 0.0, 0.0, third, third, third, 0.0, 0.0, 0.0],
        0.0,
    )
    .unwrap();
    let out = kernel_blur(&img, &spec, 0).unwrap();
    let w = Tensor::from_vec(Shape::new(1, 1, 3, 3), spec.weights().to_vec()).unwrap();
    let oracle = naive_conv(&img, &w, None, 1, Padding::ReflectSame);
    assert!(out.max_abs_diff(&oracle) <= 1e-6);
    assert!((out.at(0, 0, 2, 1) - third).abs() < 1e-6 && out.at(0, 0, 1, 2) == 0.0);
}

#[test]
fn random_kernels_match_naive_convolution() {
    let mut r = rng(5);
    for size in [3usize, 5, 7] {
        let raw: Vec<f32> = (0..size * size).map(|_| r.gen_range(0.0..1.0)).collect();
        let sum: f32 = raw.iter().sum();
        let mut weights: Vec<f32> = raw.iter().map(|v| v / sum).collect();
        let drift: f32 = 1.0 - weights.iter().sum::<f32>();
        weights[0] += drift;
        let spec = BlurKernelSpec::new(size, weights, 0.0).unwrap();
        let img = Tensor::uniform(Shape::new(1, 3, 12, 9), 0.0, 1.0, &mut r);
        let out = kernel_blur(&img, &spec, 0).unwrap();
        let w = Tensor::from_vec(Shape::new(1, 1, size, size), spec.weights().to_vec()).unwrap();
        for c in 0..3 {
            let plane = Tensor::from_vec(
                Shape::new(1, 1, 12, 9),
                img.item_tensor(0).data()[c * 108..(c + 1) * 108].to_vec(),
            )
            .unwrap();
            let oracle = naive_conv(&plane, &w, None, 1, Padding::ReflectSame);
            for (i, v) in oracle.data().iter().enumerate() {
                assert!((out.data()[c * 108 + i] - v).abs() <= 1e-5);
            }
        }
    }
}

#[test]
fn delta_kernel_and_constant_images() {
    let mut r = rng(6);
    let img = Tensor::uniform(Shape::new(1, 3, 8, 8), 0.0, 1.0, &mut r);
    assert_eq!(kernel_blur(&img, &BlurKernelSpec::delta(), 1).unwrap(), img);
    let flat = Tensor::full(Shape::new(1, 3, 8, 8), 0.37);
    for (len, angle) in [(5, 0.0), (7, 45.0), (9, 110.0)] {
        let k = gen_linear_kernel(len, angle).unwrap();
        assert_eq!(kernel_blur(&flat, &k, 0).unwrap(), flat);
    }
}

#[test]
fn noise_is_seeded() {
    let img = Tensor::full(Shape::new(1, 3, 8, 8), 0.5);
    let k = BlurKernelSpec::delta().with_noise(0.05);
    let a = kernel_blur(&img, &k, 3).unwrap();
    assert_eq!(a, kernel_blur(&img, &k, 3).unwrap());
    assert_ne!(a, kernel_blur(&img, &k, 4).unwrap());
    assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn linear_kernel_shapes() {
    assert_eq!(gen_linear_kernel(1, 30.0).unwrap(), BlurKernelSpec::delta());
    let h = gen_linear_kernel(3, 0.0).unwrap();
    assert_eq!(h.weights()[3..6], [1.0 / 3.0; 3]);
    let d = gen_linear_kernel(5, 45.0).unwrap();
    let anti: f64 = (0..5).map(|i| d.at(i, 4 - i) as f64).sum();
    assert!((anti - 1.0).abs() <= 1e-6);
    assert!(gen_linear_kernel(4, 0.0).is_err());
}

#[test]
fn noise_maps() {
    let a = make_noise_map(1, 4, 128, 128).unwrap();
    assert_eq!(a.shape(), Shape::new(1, 4, 128, 128));
    assert_eq!(a, make_noise_map(1, 4, 128, 128).unwrap());
    assert_ne!(
        a.source_vector,
        make_noise_map(2, 4, 128, 128).unwrap().source_vector
    );
}

#[test]
fn sequence_pipeline_pairs_windows_with_centre_frames() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("seq");
    let mut r = rng(7);
    let frames: Vec<Tensor> = (0..15)
        .map(|_| Tensor::uniform(Shape::new(1, 3, 6, 6), 0.0, 1.0, &mut r))
        .collect();
    for (i, f) in frames.iter().enumerate() {
        save_png(&input.join(format!("f{i:03}.png")), f).unwrap();
    }
    let out = dir.path().join("out");
    let m = blur_sequences(&input, &out, 7, CrfParams::default()).unwrap();
    assert_eq!(m.pairs.len(), 2);
    let loaded = BlurManifest::load(&out.join("manifest.json")).unwrap();
    assert_eq!(loaded, m);
    let stored: Vec<Tensor> = (0..7)
        .map(|i| load_png(&input.join(format!("f{i:03}.png"))).unwrap())
        .collect();
    let oracle = average_blur(&stored, CrfParams::default()).unwrap();
    let blurry = load_png(&out.join(&m.pairs[0].blurry)).unwrap();
    assert!(blurry.max_abs_diff(&oracle) <= 0.5 / 255.0 + 1e-6);
    assert_eq!(load_png(&out.join(&m.pairs[0].sharp)).unwrap(), stored[3]);
}

fn unit_tensor(len: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(0.0f32..=1.0, len)
        .prop_map(move |d| Tensor::from_vec(Shape::new(1, 1, 1, len), d).unwrap())
}

proptest! {
    #[test]
    fn crf_round_trip(x in unit_tensor(32), gamma in 1.0f32..4.0) {
        let crf = CrfParams::new(gamma).unwrap();
        let back = invert_crf(&apply_crf(&x, crf).unwrap(), crf).unwrap();
        prop_assert!(back.max_abs_diff(&x) <= 1e-6);
    }

    #[test]
    fn average_blur_ignores_frame_order(frames in prop::collection::vec(unit_tensor(16), 2..8), seed in any::<u64>()) {
        let crf = CrfParams::default();
        let a = average_blur(&frames, crf).unwrap();
        let mut shuffled = frames.clone();
        use rand::seq::SliceRandom;
        shuffled.shuffle(&mut rng(seed));
        prop_assert_eq!(a, average_blur(&shuffled, crf).unwrap());
    }

    #[test]
    fn blur_outputs_stay_in_range(x in unit_tensor(40), len in prop::sample::select(vec![1usize, 3, 5, 7]), angle in 0.0f32..180.0) {
        let img = x.reshape(Shape::new(1, 1, 5, 8)).unwrap();
        let out = kernel_blur(&img, &gen_linear_kernel(len, angle).unwrap(), 0).unwrap();
        prop_assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
