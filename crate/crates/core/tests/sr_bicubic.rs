use pdm_autograd::Graph;
use pdm_core::degrade::ScaleFactor;
use pdm_core::sr::{bicubic_resize, cubic_weight, sr_pixel_loss, sr_pixel_loss_var, Direction, SrConfig, SrNet};
use pdm_core::ImagePlane;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_plane(r: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> ImagePlane {
    ImagePlane::from_fn(c, h, w, |_, _, _| r.random()).unwrap()
}

#[test]
fn l1_flat_loop() {
    let mut r = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..20 {
        let a = random_plane(&mut r, 3, 7, 5);
        let b = random_plane(&mut r, 3, 7, 5);
        let mut want = 0.0;
        for i in 0..a.data().len() {
            want += (a.data()[i] - b.data()[i]).abs();
        }
        want /= a.data().len() as f64;
        assert!((sr_pixel_loss(&a, &b).unwrap() - want).abs() <= 1e-7);
        let mut g = Graph::new();
        let (va, vb) = (g.constant(a.to_tensor()), g.constant(b.to_tensor()));
        let l = sr_pixel_loss_var(&mut g, va, vb);
        assert!((g.value(l).data()[0] - want).abs() <= 1e-7);
    }
}

#[test]
fn cubic_table() {
    for (x, w) in [(0.0, 1.0), (0.5, 0.5625), (1.0, 0.0), (1.5, -0.0625), (2.0, 0.0), (0.25, 0.8671875)] {
        assert!((cubic_weight(x) - w).abs() < 1e-12, "w({x})");
        assert!((cubic_weight(-x) - w).abs() < 1e-12);
    }
}

/// A centred delta upsampled ×2 reproduces the cubic weights at quarter offsets.
#[test]
fn delta_upsample_matches_cubic_table() {
    let mut x = ImagePlane::filled(1, 9, 9, 0.0).unwrap();
    x.set(0, 4, 4, 1.0);
    let up = bicubic_resize(&x, ScaleFactor::new(2).unwrap(), Direction::Up).unwrap();
    assert_eq!(up.shape(), (1, 18, 18));
    // Output sample o sits at input coordinate (o + 0.5) / 2 − 0.5.
    for o in 0..18 {
        for p in 0..18 {
            let cy = (o as f64 + 0.5) / 2.0 - 0.5;
            let cx = (p as f64 + 0.5) / 2.0 - 0.5;
            let want = cubic_weight(cy - 4.0) * cubic_weight(cx - 4.0);
            assert!((up.get(0, o, p) - want).abs() < 1e-12);
        }
    }
}

#[test]
fn up_then_down_on_ramp() {
    let x = ImagePlane::from_fn(3, 16, 16, |c, y, x| (x as f64 + 0.5 * y as f64 + c as f64) / 30.0).unwrap();
    let s = ScaleFactor::new(4).unwrap();
    let up = bicubic_resize(&x, s, Direction::Up).unwrap();
    let back = bicubic_resize(&up, s, Direction::Down).unwrap();
    assert_eq!(back.shape(), x.shape());
    let worst = x.data().iter().zip(back.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(worst <= 0.02, "{worst}");
}

#[test]
fn constant_images_survive_resizing() {
    let x = ImagePlane::filled(3, 8, 12, 0.4).unwrap();
    for s in [2, 3, 4] {
        let s = ScaleFactor::new(s).unwrap();
        let up = bicubic_resize(&x, s, Direction::Up).unwrap();
        assert!(up.data().iter().all(|v| (v - 0.4).abs() < 1e-12));
        let down = bicubic_resize(&up, s, Direction::Down).unwrap();
        assert!(down.data().iter().all(|v| (v - 0.4).abs() < 1e-12));
    }
}

#[test]
fn sr_output_is_s_times_larger() {
    let mut r = ChaCha8Rng::seed_from_u64(3);
    for (scale, skip) in [(4, false), (2, true), (3, false)] {
        let net = SrNet::new(
            SrConfig {
                scale,
                num_blocks: 2,
                width: 8,
                bicubic_skip: skip,
                ..Default::default()
            },
            &mut r,
        )
        .unwrap();
        let y = random_plane(&mut r, 3, 6, 5);
        let out = net.super_resolve(&y).unwrap();
        assert_eq!(out.shape(), (3, 6 * scale, 5 * scale));
        assert!(out.is_finite());
    }
}

proptest! {
    #[test]
    fn l1_is_a_metric(seed in any::<u64>()) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let a = random_plane(&mut r, 3, 4, 4);
        let b = random_plane(&mut r, 3, 4, 4);
        let c = random_plane(&mut r, 3, 4, 4);
        let ab = sr_pixel_loss(&a, &b).unwrap();
        prop_assert_eq!(ab, sr_pixel_loss(&b, &a).unwrap());
        prop_assert!(ab >= 0.0);
        prop_assert_eq!(sr_pixel_loss(&a, &a).unwrap(), 0.0);
        prop_assert!(sr_pixel_loss(&a, &c).unwrap() <= ab + sr_pixel_loss(&b, &c).unwrap() + 1e-12);
    }
}
