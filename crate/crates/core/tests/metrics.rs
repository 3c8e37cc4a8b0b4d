mod common;

use pdm_core::metrics::{psnr, shifted_score, ssim, PSNR_CAP_DB};
use pdm_core::ImagePlane;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::oracles::{ref_psnr, ref_ssim};

fn pair(r: &mut ChaCha8Rng, h: usize, w: usize) -> (ImagePlane, ImagePlane) {
    let a = ImagePlane::from_fn(3, h, w, |_, y, x| 0.5 + 0.3 * ((x + 2 * y) as f64 * 0.3).sin() + 0.1 * r.random::<f64>())
        .unwrap();
    let b = ImagePlane::from_fn(3, h, w, |c, y, x| (a.get(c, y, x) + 0.1 * (r.random::<f64>() - 0.5)).clamp(0.0, 1.0))
        .unwrap();
    (a, b)
}

#[test]
fn psnr_and_ssim_match_scalar_references() {
    let mut r = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..20 {
        let (a, b) = pair(&mut r, 17, 23);
        assert!((psnr(&a, &b, 1.0).unwrap() - ref_psnr(&a, &b)).abs() <= 1e-5);
        assert!((ssim(&a, &b).unwrap() - ref_ssim(&a, &b)).abs() <= 1e-5);
    }
    let (a, _) = pair(&mut r, 12, 12);
    assert_eq!(psnr(&a, &a, 1.0).unwrap(), PSNR_CAP_DB);
}

#[test]
fn shifted_score_equals_brute_force() {
    let mut r = ChaCha8Rng::seed_from_u64(1);
    let (ms, border) = (2usize, 1usize);
    for _ in 0..50 {
        let (sr, gt) = pair(&mut r, 20, 22);
        let got = shifted_score(&sr, &gt, ms, border).unwrap();
        let m = border + ms;
        let (ch, cw) = (20 - 2 * m, 22 - 2 * m);
        let reference = gt.crop(m, m, ch, cw).unwrap();
        let mut best_p = f64::NEG_INFINITY;
        let mut best_s = f64::NEG_INFINITY;
        for dy in 0..=2 * ms {
            for dx in 0..=2 * ms {
                let cand = sr.crop(border + dy, border + dx, ch, cw).unwrap();
                best_p = best_p.max(ref_psnr(&cand, &reference));
                best_s = best_s.max(ref_ssim(&cand, &reference));
            }
        }
        assert!((got.psnr - best_p).abs() <= 1e-9);
        assert!((got.ssim - best_s).abs() <= 1e-9);
        let plain = sr.crop(m, m, ch, cw).unwrap();
        assert!(got.psnr >= psnr(&plain, &reference, 1.0).unwrap());
        assert!(got.ssim >= ssim(&plain, &reference).unwrap());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn shifted_never_below_plain(seed in any::<u64>(), ms in 0usize..3) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let (sr, gt) = pair(&mut r, 20, 20);
        let s = shifted_score(&sr, &gt, ms, 2).unwrap();
        let m = 2 + ms;
        let plain_sr = sr.crop(m, m, 20 - 2 * m, 20 - 2 * m).unwrap();
        let plain_gt = gt.crop(m, m, 20 - 2 * m, 20 - 2 * m).unwrap();
        prop_assert!(s.psnr >= psnr(&plain_sr, &plain_gt, 1.0).unwrap());
        prop_assert!(s.ssim >= ssim(&plain_sr, &plain_gt).unwrap());
    }

    #[test]
    fn metrics_are_symmetric(seed in any::<u64>()) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let (a, b) = pair(&mut r, 14, 14);
        prop_assert_eq!(psnr(&a, &b, 1.0).unwrap(), psnr(&b, &a, 1.0).unwrap());
        prop_assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() <= 1e-12);
        prop_assert!(ssim(&a, &b).unwrap() <= 1.0 + 1e-12);
    }
}
