//! Brute-force references, written without the library's tap tables or
//! separable filters.

use pdm_core::adversarial::Side;
use pdm_core::ImagePlane;
use rand::Rng;

/// numpy-style reflect (edge sample not repeated).
pub fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let mut i = i;
    loop {
        if i < 0 {
            i = -i;
        } else if i >= n {
            i = 2 * (n - 1) - i;
        } else {
            return i as usize;
        }
    }
}

/// Direct nested-loop cross-correlation with reflect padding, written
/// independently of the library's tap tables.
pub fn conv_oracle(x: &[f64], c: usize, h: usize, w: usize, taps: &dyn Fn(usize, usize) -> Vec<f64>, k: usize) -> Vec<f64> {
    let r = (k / 2) as isize;
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for i in 0..h {
            for j in 0..w {
                let t = taps(i, j);
                let mut acc = 0.0;
                for a in 0..k {
                    for b in 0..k {
                        let yi = reflect(i as isize + a as isize - r, h);
                        let xj = reflect(j as isize + b as isize - r, w);
                        acc += t[a * k + b] * x[(ch * h + yi) * w + xj];
                    }
                }
                out[(ch * h + i) * w + j] = acc;
            }
        }
    }
    out
}

pub fn slice_oracle(x: &[f64], c: usize, h: usize, w: usize, s: usize) -> Vec<f64> {
    let mut out = Vec::new();
    for ch in 0..c {
        for i in (0..h).step_by(s) {
            for j in (0..w).step_by(s) {
                out.push(x[(ch * h + i) * w + j]);
            }
        }
    }
    out
}

pub fn random_simplex(k: usize, rng: &mut impl Rng) -> Vec<f64> {
    let mut t: Vec<f64> = (0..k * k).map(|_| rng.random::<f64>() + 1e-3).collect();
    let s: f64 = t.iter().sum();
    t.iter_mut().for_each(|v| *v /= s);
    t
}

pub fn random_image(c: usize, h: usize, w: usize, rng: &mut impl Rng) -> ImagePlane {
    let data = (0..c * h * w).map(|_| rng.random::<f64>()).collect();
    ImagePlane::new(c, h, w, data).unwrap()
}

pub fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn ref_psnr(a: &ImagePlane, b: &ImagePlane) -> f64 {
    let mut se = 0.0;
    for i in 0..a.data().len() {
        let d = a.data()[i] - b.data()[i];
        se += d * d;
    }
    let mse = se / a.data().len() as f64;
    if mse == 0.0 {
        return 100.0;
    }
    (10.0 * (1.0 / mse).log10()).min(100.0)
}

/// Direct 2-D window sums, no separability.
pub fn ref_ssim(a: &ImagePlane, b: &ImagePlane) -> f64 {
    let (c, h, w) = a.shape();
    let mut win = [[0.0; 11]; 11];
    let mut total = 0.0;
    for (i, row) in win.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (dy, dx) = (i as f64 - 5.0, j as f64 - 5.0);
            *v = (-(dy * dy + dx * dx) / 4.5).exp();
            total += *v;
        }
    }
    let c1 = 0.0001;
    let c2 = 0.0009;
    let mut sum = 0.0;
    let mut count = 0;
    for ch in 0..c {
        for y in 0..=h - 11 {
            for x in 0..=w - 11 {
                let (mut ma, mut mb, mut aa, mut bb, mut ab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for i in 0..11 {
                    for j in 0..11 {
                        let wt = win[i][j] / total;
                        let u = a.get(ch, y + i, x + j);
                        let v = b.get(ch, y + i, x + j);
                        ma += wt * u;
                        mb += wt * v;
                        aa += wt * u * u;
                        bb += wt * v * v;
                        ab += wt * u * v;
                    }
                }
                let va = aa - ma * ma;
                let vb = bb - mb * mb;
                let cov = ab - ma * mb;
                sum += (2.0 * ma * mb + c1) * (2.0 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1;
            }
        }
    }
    sum / count as f64
}

/// Least-squares adversarial loss, one loop over score pairs.
pub fn flat_lsgan(real: &[f64], fake: &[f64], side: Side) -> f64 {
    let mut fake_term = 0.0;
    let mut real_term = 0.0;
    for i in 0..fake.len() {
        match side {
            Side::Generator => fake_term += (fake[i] - 1.0) * (fake[i] - 1.0),
            Side::Discriminator => {
                fake_term += fake[i] * fake[i];
                real_term += (real[i] - 1.0) * (real[i] - 1.0);
            }
        }
    }
    (fake_term + real_term) / fake.len() as f64
}
