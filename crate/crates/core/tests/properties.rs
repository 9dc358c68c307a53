mod common;

use common::{conv_params, tally, Arr};
use mgfi::data::{augment, split_indices, AugmentConfig, Sample};
use mgfi::loss::{boundary_loss, canny, cross_entropy, dice_loss, hybrid_loss, CannyConfig};
use mgfi::mask::Mask;
use mgfi::metrics::{confusion, report};
use mgfi::mgfi::{mgfi_upper, MgfiUpper};
use mgfi::ops::{self, BatchNormState, ConvParams, Mode};
use mgfi::train::{Adam, EarlyStopping};
use mgfi::{Shape, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tensor(s: Shape, seed: u64, lo: f64, hi: f64) -> Tensor<f32> {
    common::uniform(s, lo, hi, &mut common::rng(seed))
}

fn shape() -> impl Strategy<Value = Shape> {
    (1usize..3, 1usize..4, 2usize..9, 2usize..9).prop_map(|(n, c, h, w)| Shape::new(n, c, h, w))
}

fn mask_pair() -> impl Strategy<Value = (Mask, Mask)> {
    (1usize..6, 1usize..6).prop_flat_map(|(h, w)| {
        let v = proptest::collection::vec(0u8..2, h * w);
        (v.clone(), v).prop_map(move |(a, b)| (Mask::new(1, h, w, a).unwrap(), Mask::new(1, h, w, b).unwrap()))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn softmax_rows_sum_to_one(s in shape(), seed in any::<u64>()) {
        let p = ops::softmax_channels(&tensor(s, seed, -20.0, 20.0));
        let a = Arr::of(&p);
        for n in 0..s.n {
            for i in 0..s.h * s.w {
                let total: f64 = (0..s.c).map(|c| a.at(n, c, i / s.w, i % s.w)).sum();
                prop_assert!((total - 1.0).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn zero_offset_deform_is_conv(s in shape(), cout in 1usize..4, seed in any::<u64>()) {
        let x = tensor(s, seed, -1.0, 1.0);
        let p = ConvParams::new(tensor(Shape::new(cout, s.c, 3, 3), seed ^ 1, -1.0, 1.0), Some(tensor(Shape::new(1, cout, 1, 1), seed ^ 2, -1.0, 1.0)), 1, 1, 1);
        let off = Tensor::zeros(Shape::new(s.n, 18, s.h, s.w));
        let d = ops::deform_conv2d(&x, &p, &off).unwrap();
        prop_assert!(d.max_abs_diff(&ops::conv2d(&x, &p).unwrap()) <= 1e-5);
    }

    #[test]
    fn conv_matches_loop_nest(s in shape(), cout in 1usize..4, stride in 1usize..3, dil in 1usize..3, seed in any::<u64>()) {
        let x = tensor(s, seed, -1.0, 1.0);
        let p = ConvParams::new(tensor(Shape::new(cout, s.c, 3, 3), seed ^ 3, -1.0, 1.0), None, stride, dil, dil);
        let y = ops::conv2d(&x, &p).unwrap();
        prop_assert!(conv_params(&Arr::of(&x), &p).max_abs_diff(&y) <= 1e-5);
    }

    #[test]
    fn depthwise_channels_do_not_mix(s in shape(), seed in any::<u64>(), m in 0usize..3) {
        let m = m % s.c;
        let x = tensor(s, seed, -1.0, 1.0);
        let w = tensor(Shape::new(s.c, 1, 3, 3), seed ^ 4, -1.0, 1.0);
        let noise = tensor(s, seed ^ 5, -1.0, 1.0);
        let plane = s.h * s.w;
        let perturbed: Vec<f32> = x.data().iter().zip(noise.data()).enumerate()
            .map(|(i, (&a, &b))| if (i / plane) % s.c == m { a } else { a + b }).collect();
        let y0 = Arr::of(&ops::depthwise_conv2d(&x, &w, 1, 1).unwrap());
        let y1 = Arr::of(&ops::depthwise_conv2d(&Tensor::new(s, perturbed).unwrap(), &w, 1, 1).unwrap());
        for n in 0..s.n {
            for i in 0..plane {
                prop_assert_eq!(y0.at(n, m, i / s.w, i % s.w), y1.at(n, m, i / s.w, i % s.w));
            }
        }
    }

    #[test]
    fn batchnorm_standardizes(s in shape(), seed in any::<u64>()) {
        let x = tensor(s, seed, -3.0, 5.0);
        let mut st = BatchNormState::<f32>::new(s.c);
        let y = Arr::of(&ops::batchnorm(&x, &mut st, Mode::Train).unwrap());
        let xa = Arr::of(&x);
        let count = (s.n * s.h * s.w) as f64;
        for c in 0..s.c {
            let vals = |a: &Arr| (0..s.n).flat_map(|n| (0..s.h * s.w).map(move |i| (n, i))).map(|(n, i)| a.at(n, c, i / s.w, i % s.w)).collect::<Vec<_>>();
            let (yv, xv) = (vals(&y), vals(&xa));
            let mean = yv.iter().sum::<f64>() / count;
            let var = yv.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / count;
            let xm = xv.iter().sum::<f64>() / count;
            let xvar = xv.iter().map(|v| (v - xm).powi(2)).sum::<f64>() / count;
            prop_assert!(mean.abs() <= 1e-5);
            // ε in the denominator shrinks the variance by var/(var + ε).
            prop_assert!((var - xvar / (xvar + st.eps)).abs() <= 1e-5);
            if xvar > 1e-2 {
                prop_assert!((var - 1.0).abs() <= 1e-3);
            }
            prop_assert!(st.running_var.to_f64()[c] >= 0.0);
        }
    }

    #[test]
    fn flatten_transpose_round_trips(s in shape(), seed in any::<u64>()) {
        let x = tensor(s, seed, -1.0, 1.0);
        let back = ops::unflatten_transpose(&ops::flatten_transpose(&x), s.h, s.w).unwrap();
        prop_assert_eq!(back.bits(), x.bits());
    }

    #[test]
    fn upper_section_halves_with_ceiling(h in 2usize..12, w in 2usize..12, seed in any::<u64>()) {
        let mut p = MgfiUpper::<f32>::init(2, &mut ChaCha8Rng::seed_from_u64(seed));
        let (r, o) = mgfi_upper(&tensor(Shape::new(2, 2, h, w), seed, -1.0, 1.0), &mut p, Mode::Train).unwrap();
        prop_assert_eq!(r.shape(), Shape::new(2, 2, h.div_ceil(2), w.div_ceil(2)));
        prop_assert_eq!(o.shape(), r.shape());
    }

    #[test]
    fn hybrid_total_is_the_sum_of_its_terms(seed in any::<u64>(), lambda in 0.0f64..5.0, classes in 2usize..4) {
        let mut r = common::rng(seed);
        let labels = common::random_mask(2, 4, 5, classes as u8, &mut r);
        let logits = common::uniform(Shape::new(2, classes, 4, 5), -4.0, 4.0, &mut r).cast::<f64>();
        let probs = ops::softmax_channels(&logits);
        let edge = ops::sigmoid(&common::uniform(Shape::new(2, 1, 4, 5), -4.0, 4.0, &mut r).cast::<f64>());
        let gt = common::random_mask(2, 4, 5, 2, &mut r);
        let h = hybrid_loss(&probs, Some(&edge), &labels, &gt, lambda).unwrap();
        prop_assert!((h.total - (h.ce + h.dice + lambda * h.boundary)).abs() <= 1e-12);
        prop_assert!((h.tensor.item() - h.total).abs() <= 1e-12);
        let ce = cross_entropy(&probs, &labels).unwrap().item();
        let dice = dice_loss(&probs, &labels).unwrap().item();
        let b = boundary_loss(&edge, &gt).unwrap().item();
        prop_assert!(ce >= 0.0);
        prop_assert!((0.0..=1.0 + 1e-6).contains(&dice));
        prop_assert!((0.0..=1.0 + 1e-6).contains(&b));
    }

    #[test]
    fn score_identities((pred, gt) in mask_pair()) {
        let c = confusion(&pred, &gt, 1).unwrap();
        prop_assert_eq!(c, tally(&pred, &gt, 1));
        prop_assert_eq!(c.total() as usize, pred.data.len());
        let m = report(&c);
        prop_assert!(m.values().iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert!(m.iou <= m.dice);
        if c.tp + c.fp + c.fn_ > 0 {
            prop_assert!((m.dice - 2.0 * m.iou / (1.0 + m.iou)).abs() <= 1e-12);
        }
        if c.tp > 0 {
            let harmonic = 2.0 * m.precision * m.recall / (m.precision + m.recall);
            prop_assert!((m.dice - harmonic).abs() <= 1e-12);
        }
    }

    #[test]
    fn canny_output_is_binary(seed in any::<u64>(), h in 3usize..14, w in 3usize..14, level in 0.0f64..1.0) {
        let img = tensor(Shape::new(1, 1, h, w), seed, 0.0, 1.0);
        prop_assert!(canny(&img, &CannyConfig::default()).unwrap().data.iter().all(|&v| v <= 1));
        let flat = Tensor::<f64>::full(Shape::new(1, 1, h, w), level);
        prop_assert!(canny(&flat, &CannyConfig::default()).unwrap().data.iter().all(|&v| v == 0));
    }

    #[test]
    fn augmentation_keeps_labels_integral(seed in any::<u64>(), p in 0.0f64..=1.0) {
        let mut r = common::rng(seed);
        let label = common::random_mask(1, 16, 16, 3, &mut r);
        let s = Sample { image: common::uniform(Shape::new(1, 3, 16, 16), 0.0, 1.0, &mut r), label };
        let cfg = AugmentConfig { p, ..AugmentConfig::default() };
        let out = augment(&s, &cfg, &mut r);
        prop_assert_eq!(out.image.shape(), s.image.shape());
        let before: std::collections::BTreeSet<u8> = s.label.data.iter().copied().collect();
        prop_assert!(out.label.data.iter().all(|v| before.contains(v)));
        prop_assert!(out.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn split_partitions_exactly(n in 0usize..300, seed in any::<u64>()) {
        let sp = split_indices(n, seed);
        prop_assert_eq!(sp.test.len(), n / 10);
        prop_assert_eq!(sp.val.len(), n / 10);
        let mut all: Vec<usize> = sp.train.iter().chain(&sp.val).chain(&sp.test).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        prop_assert_eq!(split_indices(n, seed), sp);
    }

    #[test]
    fn adam_keeps_second_moment_nonnegative(grads in proptest::collection::vec(-10.0f64..10.0, 1..20)) {
        let mut p = vec![Tensor::<f64>::scalar(0.0)];
        let mut opt = Adam::new(1e-2, &p);
        for (i, g) in grads.iter().enumerate() {
            opt.step(&mut p, &[Tensor::scalar(*g)]).unwrap();
            prop_assert_eq!(opt.t, i as u64 + 1);
            prop_assert!(opt.v[0][0] >= 0.0 && p[0].item().is_finite());
        }
    }

    #[test]
    fn early_stopping_bound(vals in proptest::collection::vec(0.0f64..1.0, 1..40), patience in 1usize..6) {
        let mut s = EarlyStopping::new(patience);
        let mut epochs = 0;
        for (i, v) in vals.iter().enumerate() {
            s.update(i + 1, *v);
            epochs = i + 1;
            if s.should_stop() {
                break;
            }
        }
        prop_assert!(epochs <= s.best_epoch + patience);
    }

    #[test]
    fn image_files_round_trip(c in prop_oneof![Just(1usize), Just(3usize)], h in 1usize..6, w in 1usize..6, bytes in proptest::collection::vec(any::<u8>(), 75)) {
        let dir = tempfile::tempdir().unwrap();
        let data: Vec<f32> = bytes[..c * h * w].iter().map(|&b| b as f32 / 255.0).collect();
        let t = Tensor::new(Shape::new(1, c, h, w), data).unwrap();
        let path = dir.path().join(if c == 1 { "x.pgm" } else { "x.ppm" });
        mgfi::data::write_image(&path, &t).unwrap();
        prop_assert_eq!(mgfi::data::read_image(&path).unwrap().bits(), t.bits());
    }
}

#[test]
fn adam_zero_gradient_from_rest_is_a_no_op() {
    let mut p = vec![tensor(Shape::new(1, 2, 3, 3), 9, -1.0, 1.0)];
    let before = p[0].bits();
    let mut opt = Adam::new(0.1, &p);
    for _ in 0..3 {
        opt.step(&mut p, &[Tensor::zeros(Shape::new(1, 2, 3, 3))]).unwrap();
    }
    assert_eq!(p[0].bits(), before);
    assert_eq!(opt.t, 3);
}
