mod common;

use pdm_autograd::{Graph, Tensor};
use pdm_core::degrade::{blur_decimate, convolve_kernel, decimate, degrade, BlurKernel, NoiseMap, ScaleFactor};
use pdm_core::ImagePlane;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::oracles::{conv_oracle, max_diff, random_image, random_simplex, slice_oracle};

#[test]
fn convolution_matches_nested_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = random_image(1, 8, 8, &mut rng);
    let taps = random_simplex(3, &mut rng);
    let k = BlurKernel::invariant(3, taps.clone()).unwrap();
    let got = convolve_kernel(&x, &k).unwrap();
    let want = conv_oracle(x.data(), 1, 8, 8, &|_, _| taps.clone(), 3);
    assert!(max_diff(got.data(), &want) <= 1e-6);
}

#[test]
fn variant_field_matches_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let (h, w, k) = (6, 7, 5);
    let x = random_image(3, h, w, &mut rng);
    let fields: Vec<Vec<f64>> = (0..h * w).map(|_| random_simplex(k, &mut rng)).collect();
    let mut weights = vec![0.0; k * k * h * w];
    for (p, f) in fields.iter().enumerate() {
        for (t, v) in f.iter().enumerate() {
            weights[t * h * w + p] = *v;
        }
    }
    let kern = BlurKernel::new(k, h, w, weights).unwrap();
    let got = convolve_kernel(&x, &kern).unwrap();
    let want = conv_oracle(x.data(), 3, h, w, &|i, j| fields[i * w + j].clone(), k);
    assert!(max_diff(got.data(), &want) <= 1e-6);
}

#[test]
fn decimation_matches_slicing_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let x = random_image(1, 16, 16, &mut rng);
    let got = decimate(&x, ScaleFactor::new(4).unwrap()).unwrap();
    assert_eq!(got.shape(), (1, 4, 4));
    assert_eq!(got.data(), slice_oracle(x.data(), 1, 16, 16, 4).as_slice());
    assert_eq!(decimate(&x, ScaleFactor::new(1).unwrap()).unwrap(), x);
}

#[test]
fn degrade_matches_composed_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let x = random_image(1, 8, 8, &mut rng);
    let taps = random_simplex(3, &mut rng);
    let k = BlurKernel::invariant(3, taps.clone()).unwrap();
    let n = NoiseMap::new(random_image(1, 4, 4, &mut rng).map(|v| v - 0.5));
    let (y, clean) = degrade(&x, &k, &n, ScaleFactor::new(2).unwrap()).unwrap();
    let blurred = conv_oracle(x.data(), 1, 8, 8, &|_, _| taps.clone(), 3);
    let want_clean = slice_oracle(&blurred, 1, 8, 8, 2);
    let want: Vec<f64> = want_clean.iter().zip(n.plane().data()).map(|(a, b)| a + b).collect();
    assert!(max_diff(clean.data(), &want_clean) <= 1e-6);
    assert!(max_diff(y.data(), &want) <= 1e-6);
}

#[test]
fn delta_kernel_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let x = random_image(3, 8, 8, &mut rng);
    let delta = BlurKernel::delta(5).unwrap();
    let zero = NoiseMap::zeros(3, 8, 8).unwrap();
    let (y, clean) = degrade(&x, &delta, &zero, ScaleFactor::new(1).unwrap()).unwrap();
    assert_eq!(y, x);
    assert_eq!(clean, x);
    let n = NoiseMap::new(ImagePlane::filled(3, 4, 4, 0.1).unwrap());
    let (y, _) = degrade(&x, &delta, &n, ScaleFactor::new(2).unwrap()).unwrap();
    let d = decimate(&x, ScaleFactor::new(2).unwrap()).unwrap();
    for (a, b) in y.data().iter().zip(d.data()) {
        assert!((a - (b + 0.1)).abs() < 1e-15);
    }
}

/// 200 random small instances: operator output against the oracles.
#[test]
fn random_instances_match_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let s = [1, 2, 3][rng.random_range(0..3)];
        let (h, w) = (s * rng.random_range(1..5), s * rng.random_range(1..5));
        let c = [1, 3][rng.random_range(0..2)];
        let k = [1, 3, 5][rng.random_range(0..3)];
        let x = random_image(c, h, w, &mut rng);
        let taps = random_simplex(k, &mut rng);
        let kern = BlurKernel::invariant(k, taps.clone()).unwrap();
        let n = NoiseMap::new(random_image(c, h / s, w / s, &mut rng));
        let (y, _) = degrade(&x, &kern, &n, ScaleFactor::new(s).unwrap()).unwrap();
        let want: Vec<f64> = slice_oracle(&conv_oracle(x.data(), c, h, w, &|_, _| taps.clone(), k), c, h, w, s)
            .iter()
            .zip(n.plane().data())
            .map(|(a, b)| a + b)
            .collect();
        worst = worst.max(max_diff(y.data(), &want));
    }
    assert!(worst <= 1e-6, "worst error {worst}");
}

fn sum_sq_loss(x: &Tensor, k: &Tensor, size: usize, s: usize) -> (f64, Tensor, Tensor) {
    let mut g = Graph::new();
    let xv = g.variable(x.clone());
    let kv = g.variable(k.clone());
    let y = blur_decimate(&mut g, xv, kv, size, ScaleFactor::new(s).unwrap()).unwrap();
    let sq = g.square(y);
    let loss = g.sum(sq);
    let value = g.value(loss).data()[0];
    let mut grads = g.backward(loss);
    (value, grads.take(xv).unwrap(), grads.take(kv).unwrap())
}

fn check_fd(x: &Tensor, k: &Tensor, size: usize, s: usize) {
    let eps = 1e-4;
    let (_, gx, gk) = sum_sq_loss(x, k, size, s);
    let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1e-6);
    for (which, base, analytic) in [("x", x, &gx), ("k", k, &gk)] {
        for i in 0..base.len() {
            let bump = |d: f64| {
                let mut t = base.clone();
                t.data_mut()[i] += d;
                if which == "x" {
                    sum_sq_loss(&t, k, size, s).0
                } else {
                    sum_sq_loss(x, &t, size, s).0
                }
            };
            let fd = (bump(eps) - bump(-eps)) / (2.0 * eps);
            let e = rel(fd, analytic.data()[i]);
            assert!(e <= 1e-3, "d/d{which}[{i}]: fd {fd} vs analytic {}", analytic.data()[i]);
        }
    }
}

#[test]
fn gradients_match_finite_differences_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let x = Tensor::from_fn(&[1, 2, 6, 6], |_| rng.random::<f64>());
    let k = Tensor::new(&[1, 9, 1, 1], random_simplex(3, &mut rng)).unwrap();
    check_fd(&x, &k, 3, 2);
    check_fd(&x, &k, 3, 1);
}

#[test]
fn gradients_match_finite_differences_variant() {
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let x = Tensor::from_fn(&[1, 1, 6, 6], |_| rng.random::<f64>());
    let k = Tensor::from_fn(&[1, 9, 6, 6], |_| rng.random::<f64>() / 9.0);
    check_fd(&x, &k, 3, 3);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn degrade_is_linear(seed in any::<u64>(), a in -2.0f64..2.0, b in -2.0f64..2.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x1 = random_image(3, 8, 8, &mut rng);
        let x2 = random_image(3, 8, 8, &mut rng);
        let k = BlurKernel::invariant(5, random_simplex(5, &mut rng)).unwrap();
        let s = ScaleFactor::new(2).unwrap();
        let zero = NoiseMap::zeros(3, 4, 4).unwrap();
        let mix = ImagePlane::new(3, 8, 8, x1.data().iter().zip(x2.data()).map(|(p, q)| a * p + b * q).collect()).unwrap();
        let (lhs, _) = degrade(&mix, &k, &zero, s).unwrap();
        let (y1, _) = degrade(&x1, &k, &zero, s).unwrap();
        let (y2, _) = degrade(&x2, &k, &zero, s).unwrap();
        let rhs: Vec<f64> = y1.data().iter().zip(y2.data()).map(|(p, q)| a * p + b * q).collect();
        prop_assert!(max_diff(lhs.data(), &rhs) <= 1e-6);
    }

    #[test]
    fn constants_are_preserved(seed in any::<u64>(), c0 in 0.0f64..1.0, s in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = ImagePlane::filled(3, 4 * s, 4 * s, c0).unwrap();
        let k = BlurKernel::invariant(7, random_simplex(7, &mut rng)).unwrap();
        let zero = NoiseMap::zeros(3, 4, 4).unwrap();
        let (y, _) = degrade(&x, &k, &zero, ScaleFactor::new(s).unwrap()).unwrap();
        prop_assert!(y.data().iter().all(|v| (v - c0).abs() <= 1e-6));
        prop_assert!((y.mean() - c0).abs() <= 1e-6);
    }

    #[test]
    fn output_stays_finite(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_image(1, 9, 9, &mut rng);
        let k = BlurKernel::invariant(3, random_simplex(3, &mut rng)).unwrap();
        let n = NoiseMap::new(random_image(1, 3, 3, &mut rng));
        let (y, c) = degrade(&x, &k, &n, ScaleFactor::new(3).unwrap()).unwrap();
        prop_assert!(y.is_finite() && c.is_finite());
    }
}
