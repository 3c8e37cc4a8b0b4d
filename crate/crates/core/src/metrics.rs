//! Full-image PSNR / SSIM and shift-tolerant scoring.

use serde::Serialize;

use crate::error::{PdmError, Result};
use crate::image::ImagePlane;

/// Returned by [`psnr`] when the images are identical.
pub const PSNR_CAP_DB: f64 = 100.0;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn same_shape(a: &ImagePlane, b: &ImagePlane) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(PdmError::Shape(format!(
            "cannot compare {:?} with {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// `10 log10(peak² / MSE)` over all channels, capped at 100 dB.
pub fn psnr(a: &ImagePlane, b: &ImagePlane, peak: f64) -> Result<f64> {
    same_shape(a, b)?;
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.data().len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (peak * peak / mse).log10()).min(PSNR_CAP_DB))
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let r = (SSIM_WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - r;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= total);
    w
}

/// Valid-mode separable filtering of one `h × w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, win: &[f64]) -> Vec<f64> {
    let k = win.len();
    let (ho, wo) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * wo];
    for y in 0..h {
        let line = &plane[y * w..(y + 1) * w];
        for x in 0..wo {
            rows[y * wo + x] = win.iter().zip(&line[x..x + k]).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0.0; ho * wo];
    for y in 0..ho {
        for x in 0..wo {
            out[y * wo + x] = (0..k).map(|t| win[t] * rows[(y + t) * wo + x]).sum();
        }
    }
    out
}

/// SSIM with an 11×11 Gaussian window (σ = 1.5), K1 = 0.01, K2 = 0.03 and
/// dynamic range 1, averaged over the valid window positions and channels.
pub fn ssim(a: &ImagePlane, b: &ImagePlane) -> Result<f64> {
    same_shape(a, b)?;
    let (c, h, w) = a.shape();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(PdmError::Shape(format!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {h}x{w}"
        )));
    }
    let win = gaussian_window();
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let mut total = 0.0;
    for ch in 0..c {
        let pa = &a.data()[ch * h * w..(ch + 1) * h * w];
        let pb = &b.data()[ch * h * w..(ch + 1) * h * w];
        let prod = |f: &dyn Fn(f64, f64) -> f64| -> Vec<f64> {
            pa.iter().zip(pb).map(|(&x, &y)| f(x, y)).collect()
        };
        let mu_a = filter_valid(pa, h, w, &win);
        let mu_b = filter_valid(pb, h, w, &win);
        let e_aa = filter_valid(&prod(&|x, _| x * x), h, w, &win);
        let e_bb = filter_valid(&prod(&|_, y| y * y), h, w, &win);
        let e_ab = filter_valid(&prod(&|x, y| x * y), h, w, &win);
        let mut acc = 0.0;
        for i in 0..mu_a.len() {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = e_aa[i] - ma * ma;
            let vb = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            acc += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        }
        total += acc / mu_a.len() as f64;
    }
    Ok(total / c as f64)
}

/// Best scores over integer misalignments.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ShiftedScore {
    pub psnr: f64,
    pub ssim: f64,
    /// `(dx, dy)` at which the PSNR maximum occurred.
    pub psnr_shift: (isize, isize),
    pub ssim_shift: (isize, isize),
}

/// Compares `gt[m.., m..]` against `sr` offset by `(dx, dy)` for every shift
/// in `[−max_shift, max_shift]²`, where `m = border_crop + max_shift`. PSNR
/// and SSIM maxima are searched independently.
pub fn shifted_score(
    sr: &ImagePlane,
    gt: &ImagePlane,
    max_shift: usize,
    border_crop: usize,
) -> Result<ShiftedScore> {
    same_shape(sr, gt)?;
    let (_, h, w) = gt.shape();
    let m = border_crop + max_shift;
    if 2 * m >= h || 2 * m >= w {
        return Err(PdmError::Shape(format!(
            "border {border_crop} plus shift {max_shift} leaves nothing of a {h}x{w} image"
        )));
    }
    let (ch, cw) = (h - 2 * m, w - 2 * m);
    let reference = gt.crop(m, m, ch, cw)?;
    let ms = max_shift as isize;
    let mut best = ShiftedScore {
        psnr: f64::NEG_INFINITY,
        ssim: f64::NEG_INFINITY,
        psnr_shift: (0, 0),
        ssim_shift: (0, 0),
    };
    for dy in -ms..=ms {
        for dx in -ms..=ms {
            let top = (m as isize + dy) as usize;
            let left = (m as isize + dx) as usize;
            let cand = sr.crop(top, left, ch, cw)?;
            let p = psnr(&cand, &reference, 1.0)?;
            let s = ssim(&cand, &reference)?;
            if p > best.psnr {
                best.psnr = p;
                best.psnr_shift = (dx, dy);
            }
            if s > best.ssim {
                best.ssim = s;
                best.ssim_shift = (dx, dy);
            }
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn checker(h: usize, w: usize) -> ImagePlane {
        ImagePlane::from_fn(3, h, w, |c, y, x| ((x / 3 + y / 2 + c) % 2) as f64 * 0.8 + 0.1).unwrap()
    }

    #[test]
    fn psnr_examples() {
        let a = checker(16, 16);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), PSNR_CAP_DB);
        let b = a.map(|v| v + 0.1);
        assert!((psnr(&a, &b, 1.0).unwrap() - 20.0).abs() < 1e-9);
        assert!(psnr(&a, &checker(16, 15), 1.0).is_err());
    }

    #[test]
    fn ssim_of_constants_is_luminance_term() {
        let a = ImagePlane::filled(3, 16, 16, 0.2).unwrap();
        let b = ImagePlane::filled(3, 16, 16, 0.8).unwrap();
        let want = (2.0 * 0.2 * 0.8 + 1e-4) / (0.04 + 0.64 + 1e-4);
        assert!((ssim(&a, &b).unwrap() - want).abs() < 1e-12);
        assert!((want - 0.4707).abs() < 1e-4);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ssim_rejects_small_images() {
        let a = ImagePlane::filled(1, 10, 30, 0.2).unwrap();
        assert!(ssim(&a, &a).is_err());
    }

    #[test]
    fn shift_search_realigns() {
        let sr = checker(40, 40).map(|v| v * 0.9);
        let sr = ImagePlane::from_fn(3, 40, 40, |c, y, x| sr.get(c, y, x) + (y * 40 + x) as f64 * 1e-4).unwrap();
        // gt is sr moved by (+2, +1).
        let gt = ImagePlane::from_fn(3, 40, 40, |c, y, x| {
            sr.get(c, y.saturating_sub(1), x.saturating_sub(2))
        })
        .unwrap();
        let s = shifted_score(&sr, &gt, 4, 4).unwrap();
        assert_eq!(s.psnr, PSNR_CAP_DB);
        assert_eq!(s.psnr_shift, (-2, -1));
        assert!((s.ssim - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_shift_is_plain_cropped_score() {
        let a = checker(30, 30);
        let b = a.map(|v| (v * 1.3).min(1.0));
        let s = shifted_score(&a, &b, 0, 3).unwrap();
        let ca = a.crop(3, 3, 24, 24).unwrap();
        let cb = b.crop(3, 3, 24, 24).unwrap();
        assert_eq!(s.psnr, psnr(&ca, &cb, 1.0).unwrap());
        assert_eq!(s.ssim, ssim(&ca, &cb).unwrap());
    }

    #[test]
    fn oversized_crop_rejected() {
        let a = checker(20, 20);
        assert!(shifted_score(&a, &a, 4, 6).is_err());
    }
}
