//! Ground-truth degradation oracle, procedural HR images and learned-kernel
//! recovery scoring.

use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::degrade::{degrade, BlurKernel, NoiseMap, ScaleFactor};
use crate::error::{PdmError, Result};
use crate::image::{list_images, load_image, save_image, ImagePlane};
use crate::kernel_gen::render_kernel_grid;
use crate::rng::{substream, Consumer, StreamRng};

/// Rotated Gaussian density sampled on the `k × k` grid centred at `k / 2`,
/// normalized to sum 1. `theta` rotates the `sigma_x` axis counter-clockwise.
pub fn make_gaussian_kernel(sigma_x: f64, sigma_y: f64, theta: f64, k: usize) -> Result<BlurKernel> {
    if !(sigma_x > 0.0 && sigma_y > 0.0) {
        return Err(PdmError::Config(format!(
            "kernel widths must be positive, got ({sigma_x}, {sigma_y})"
        )));
    }
    if k % 2 == 0 {
        return Err(PdmError::Shape(format!("kernel size must be odd, got {k}")));
    }
    let r = (k / 2) as f64;
    let (sin, cos) = theta.sin_cos();
    let mut taps = Vec::with_capacity(k * k);
    for i in 0..k {
        for j in 0..k {
            let (x, y) = (j as f64 - r, i as f64 - r);
            let u = cos * x + sin * y;
            let v = -sin * x + cos * y;
            taps.push((-0.5 * (u * u / (sigma_x * sigma_x) + v * v / (sigma_y * sigma_y))).exp());
        }
    }
    let total: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= total);
    BlurKernel::invariant(k, taps)
}

/// Additive noise family of the oracle.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum NoiseFamily {
    None,
    Awgn { sigma: f64 },
    /// Per-pixel variance `sigma_read + sigma_shot · y_clean`.
    Heteroscedastic { sigma_read: f64, sigma_shot: f64 },
}

impl NoiseFamily {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            NoiseFamily::None => true,
            NoiseFamily::Awgn { sigma } => sigma >= 0.0,
            NoiseFamily::Heteroscedastic { sigma_read, sigma_shot } => sigma_read >= 0.0 && sigma_shot >= 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(PdmError::Config(format!("negative noise parameter in {self:?}")))
        }
    }

    /// Draws a noise map for the clean LR image.
    pub fn sample(&self, clean: &ImagePlane, rng: &mut impl Rng) -> Result<NoiseMap> {
        let (c, h, w) = clean.shape();
        let mut out = NoiseMap::zeros(c, h, w)?.into_plane();
        match *self {
            NoiseFamily::None => {}
            NoiseFamily::Awgn { sigma } => {
                for v in out.data_mut() {
                    let z: f64 = StandardNormal.sample(rng);
                    *v = sigma * z;
                }
            }
            NoiseFamily::Heteroscedastic { sigma_read, sigma_shot } => {
                for (v, &y) in out.data_mut().iter_mut().zip(clean.data()) {
                    let z: f64 = StandardNormal.sample(rng);
                    let var = (sigma_read + sigma_shot * y).max(0.0);
                    *v = var.sqrt() * z;
                }
            }
        }
        Ok(NoiseMap::new(out))
    }
}

/// Ground-truth degradation distribution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleDegradation {
    pub sigma_min: f64,
    pub sigma_max: f64,
    /// Draw `sigma_y = sigma_x` and `theta = 0`.
    pub isotropic: bool,
    pub kernel_size: usize,
    pub noise: NoiseFamily,
    pub scale: usize,
    pub seed: u64,
}

impl Default for OracleDegradation {
    fn default() -> Self {
        Self {
            sigma_min: 2.0,
            sigma_max: 2.0,
            isotropic: true,
            kernel_size: 21,
            noise: NoiseFamily::Awgn { sigma: 0.02 },
            scale: 4,
            seed: 0,
        }
    }
}

/// Kernel parameters drawn for one image.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelParams {
    pub sigma_x: f64,
    pub sigma_y: f64,
    pub theta: f64,
}

impl OracleDegradation {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_min > 0.0 && self.sigma_min <= self.sigma_max) {
            return Err(PdmError::Config(format!(
                "oracle sigma range [{}, {}] is invalid",
                self.sigma_min, self.sigma_max
            )));
        }
        ScaleFactor::new(self.scale)?;
        if self.kernel_size % 2 == 0 {
            return Err(PdmError::Config("oracle kernel size must be odd".into()));
        }
        self.noise.validate()
    }

    pub fn sample_params(&self, rng: &mut impl Rng) -> KernelParams {
        let width = |rng: &mut dyn rand::RngCore| {
            if self.sigma_max > self.sigma_min {
                rng.random_range(self.sigma_min..=self.sigma_max)
            } else {
                self.sigma_min
            }
        };
        let sigma_x = width(rng);
        if self.isotropic {
            KernelParams { sigma_x, sigma_y: sigma_x, theta: 0.0 }
        } else {
            let sigma_y = width(rng);
            KernelParams { sigma_x, sigma_y, theta: rng.random_range(0.0..PI) }
        }
    }

    pub fn kernel(&self, p: &KernelParams) -> Result<BlurKernel> {
        make_gaussian_kernel(p.sigma_x, p.sigma_y, p.theta, self.kernel_size)
    }
}

/// Degrades one HR image with explicit kernel parameters and a noise stream.
/// The HR image is first cropped to a multiple of the scale. The result is
/// clamped to `[0, 1]` and quantized to 8 bits.
pub fn apply_oracle(
    hr: &ImagePlane,
    oracle: &OracleDegradation,
    params: &KernelParams,
    rng: &mut impl Rng,
) -> Result<ImagePlane> {
    let s = ScaleFactor::new(oracle.scale)?;
    let (h, w) = (hr.height() / oracle.scale * oracle.scale, hr.width() / oracle.scale * oracle.scale);
    if h == 0 || w == 0 {
        return Err(PdmError::Shape(format!(
            "image {}x{} is smaller than the scale {}",
            hr.height(),
            hr.width(),
            oracle.scale
        )));
    }
    let hr = hr.crop(0, 0, h, w)?;
    let k = oracle.kernel(params)?;
    let zero = NoiseMap::zeros(hr.channels(), h / oracle.scale, w / oracle.scale)?;
    let (_, clean) = degrade(&hr, &k, &zero, s)?;
    let n = oracle.noise.sample(&clean, rng)?;
    let mut y = clean;
    for (v, nv) in y.data_mut().iter_mut().zip(n.plane().data()) {
        *v += nv;
    }
    Ok(y.clamped().quantized())
}

/// One JSON-lines manifest entry: everything needed to regenerate the LR file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub filename: String,
    pub source: String,
    pub kernel: KernelParams,
    pub kernel_size: usize,
    pub scale: usize,
    pub noise: NoiseFamily,
    /// Seed of the noise stream.
    pub seed: u64,
}

impl ManifestRecord {
    pub fn kernel(&self) -> Result<BlurKernel> {
        make_gaussian_kernel(self.kernel.sigma_x, self.kernel.sigma_y, self.kernel.theta, self.kernel_size)
    }

    /// Re-runs the degradation recorded here on its HR source.
    pub fn regenerate(&self, hr: &ImagePlane) -> Result<ImagePlane> {
        let oracle = OracleDegradation {
            kernel_size: self.kernel_size,
            noise: self.noise,
            scale: self.scale,
            ..Default::default()
        };
        let mut rng = StreamRng::seed_from_u64(self.seed);
        apply_oracle(hr, &oracle, &self.kernel, &mut rng)
    }
}

pub const MANIFEST_NAME: &str = "manifest.jsonl";

/// Degrades every PNG in `hr_dir` into `out_dir` and writes `manifest.jsonl`.
pub fn oracle_degrade_corpus(hr_dir: &Path, oracle: &OracleDegradation, out_dir: &Path) -> Result<Vec<ManifestRecord>> {
    oracle.validate()?;
    let sources = list_images(hr_dir)?;
    if sources.is_empty() {
        return Err(PdmError::Empty(format!("no PNG images in {}", hr_dir.display())));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| PdmError::io(out_dir, e))?;
    let mut records = Vec::with_capacity(sources.len());
    for (i, src) in sources.iter().enumerate() {
        let hr = load_image(src)?;
        let mut draw = substream(oracle.seed, i as u64, Consumer::Oracle);
        let seed: u64 = draw.random();
        let params = oracle.sample_params(&mut draw);
        let lr = apply_oracle(&hr, oracle, &params, &mut StreamRng::seed_from_u64(seed))?;
        let name = src.file_name().expect("listed file").to_string_lossy().into_owned();
        save_image(&lr, &out_dir.join(&name))?;
        records.push(ManifestRecord {
            filename: name.clone(),
            source: src.display().to_string(),
            kernel: params,
            kernel_size: oracle.kernel_size,
            scale: oracle.scale,
            noise: oracle.noise,
            seed,
        });
    }
    write_manifest(&out_dir.join(MANIFEST_NAME), &records)?;
    Ok(records)
}

pub fn write_manifest(path: &Path, records: &[ManifestRecord]) -> Result<()> {
    let file = File::create(path).map_err(|e| PdmError::io(path, e))?;
    let mut out = BufWriter::new(file);
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| PdmError::format(path, e.to_string()))?;
        writeln!(out, "{line}").map_err(|e| PdmError::io(path, e))?;
    }
    out.flush().map_err(|e| PdmError::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    let file = File::open(path).map_err(|e| PdmError::io(path, e))?;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| PdmError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(
            serde_json::from_str(&line)
                .map_err(|e| PdmError::format(path, format!("line {}: {e}", i + 1)))?,
        );
    }
    Ok(records)
}

/// Kernel taps as a list of `k × k` planes; a spatially variant field
/// contributes one member per pixel.
fn ensemble_members(kernels: &[BlurKernel]) -> Result<(usize, Vec<Vec<f64>>)> {
    let size = kernels
        .first()
        .ok_or_else(|| PdmError::Empty("kernel ensemble is empty".into()))?
        .size();
    let mut members = Vec::new();
    for k in kernels {
        if k.size() != size {
            return Err(PdmError::Shape(format!(
                "kernel sizes differ within comparison: {} vs {size}",
                k.size()
            )));
        }
        let (_, h, w) = k.shape();
        for i in 0..h {
            for j in 0..w {
                members.push(k.taps_at(i, j));
            }
        }
    }
    Ok((size, members))
}

fn centre_of_mass(taps: &[f64], k: usize) -> (f64, f64, f64) {
    let mut total = 0.0;
    let (mut cy, mut cx) = (0.0, 0.0);
    for i in 0..k {
        for j in 0..k {
            let w = taps[i * k + j];
            total += w;
            cy += w * i as f64;
            cx += w * j as f64;
        }
    }
    (cy / total, cx / total, total)
}

/// Moves the centre of mass to the grid centre by splatting every tap
/// bilinearly at its shifted position. Mass pushed off the grid is dropped
/// and the result renormalized.
pub fn align_centre_of_mass(taps: &[f64], k: usize) -> Vec<f64> {
    let (cy, cx, _) = centre_of_mass(taps, k);
    let r = (k / 2) as f64;
    let (dy, dx) = (r - cy, r - cx);
    let (iy, fy) = (dy.floor(), dy - dy.floor());
    let (ix, fx) = (dx.floor(), dx - dx.floor());
    let mut out = vec![0.0; k * k];
    let k_i = k as isize;
    for i in 0..k {
        for j in 0..k {
            let w = taps[i * k + j];
            if w == 0.0 {
                continue;
            }
            let bi = i as isize + iy as isize;
            let bj = j as isize + ix as isize;
            for (oi, wy) in [(0, 1.0 - fy), (1, fy)] {
                for (oj, wx) in [(0, 1.0 - fx), (1, fx)] {
                    let (ti, tj) = (bi + oi, bj + oj);
                    if wy * wx == 0.0 || ti < 0 || tj < 0 || ti >= k_i || tj >= k_i {
                        continue;
                    }
                    out[ti as usize * k + tj as usize] += w * wy * wx;
                }
            }
        }
    }
    let total: f64 = out.iter().sum();
    if total > 0.0 {
        out.iter_mut().for_each(|v| *v /= total);
    }
    out
}

/// Covariance of kernel mass about its centre: `(σ_yy, σ_xy, σ_xx)`.
pub fn kernel_covariance(taps: &[f64], k: usize) -> [f64; 3] {
    let (cy, cx, total) = centre_of_mass(taps, k);
    let mut m = [0.0; 3];
    for i in 0..k {
        for j in 0..k {
            let w = taps[i * k + j] / total;
            let (y, x) = (i as f64 - cy, j as f64 - cx);
            m[0] += w * y * y;
            m[1] += w * x * y;
            m[2] += w * x * x;
        }
    }
    m
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RecoveryReport {
    /// L2 distance between the centre-aligned ensemble-mean kernels.
    pub mean_kernel_l2: f64,
    /// Frobenius distance between ensemble second moments `E[v vᵀ]` of the
    /// per-kernel covariance vectors `v`.
    pub second_moment_distance: f64,
    /// Euclidean distance between mean covariance vectors.
    pub covariance_distance: f64,
    pub learned_count: usize,
    pub truth_count: usize,
    #[serde(skip)]
    pub learned_mean: BlurKernel,
    #[serde(skip)]
    pub truth_mean: BlurKernel,
}

struct EnsembleStats {
    mean: Vec<f64>,
    cov_mean: [f64; 3],
    second: [[f64; 3]; 3],
    count: usize,
}

fn ensemble_stats(size: usize, members: &[Vec<f64>]) -> EnsembleStats {
    let n = members.len() as f64;
    let mut mean = vec![0.0; size * size];
    let mut cov_mean = [0.0; 3];
    let mut second = [[0.0; 3]; 3];
    for m in members {
        for (a, b) in mean.iter_mut().zip(align_centre_of_mass(m, size)) {
            *a += b / n;
        }
        let v = kernel_covariance(m, size);
        for r in 0..3 {
            cov_mean[r] += v[r] / n;
            for c in 0..3 {
                second[r][c] += v[r] * v[c] / n;
            }
        }
    }
    EnsembleStats { mean, cov_mean, second, count: members.len() }
}

/// Compares a learned kernel ensemble with the ground truth after centre of
/// mass alignment.
pub fn kernel_recovery_score(learned: &[BlurKernel], truth: &[BlurKernel]) -> Result<RecoveryReport> {
    let (ks, lm) = ensemble_members(learned)?;
    let (ts, tm) = ensemble_members(truth)?;
    if ks != ts {
        return Err(PdmError::Shape(format!(
            "learned kernels are {ks}x{ks} but truth kernels are {ts}x{ts}"
        )));
    }
    let l = ensemble_stats(ks, &lm);
    let t = ensemble_stats(ts, &tm);
    let mean_kernel_l2 = l.mean.iter().zip(&t.mean).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let mut second = 0.0;
    for r in 0..3 {
        for c in 0..3 {
            second += (l.second[r][c] - t.second[r][c]).powi(2);
        }
    }
    let cov = (0..3).map(|r| (l.cov_mean[r] - t.cov_mean[r]).powi(2)).sum::<f64>().sqrt();
    Ok(RecoveryReport {
        mean_kernel_l2,
        second_moment_distance: second.sqrt(),
        covariance_distance: cov,
        learned_count: l.count,
        truth_count: t.count,
        learned_mean: BlurKernel::invariant(ks, l.mean)?,
        truth_mean: BlurKernel::invariant(ts, t.mean)?,
    })
}

/// Writes the two mean kernels as grayscale images into `dir`.
pub fn export_mean_kernels(report: &RecoveryReport, dir: &Path, zoom: usize) -> Result<(PathBuf, PathBuf)> {
    std::fs::create_dir_all(dir).map_err(|e| PdmError::io(dir, e))?;
    let learned = dir.join("mean_kernel_learned.png");
    let truth = dir.join("mean_kernel_truth.png");
    save_image(&render_kernel_grid(std::slice::from_ref(&report.learned_mean), zoom)?, &learned)?;
    save_image(&render_kernel_grid(std::slice::from_ref(&report.truth_mean), zoom)?, &truth)?;
    Ok((learned, truth))
}

/// Procedural RGB test image: a smooth background with rectangles, discs,
/// stripes and fine texture, giving edges at many orientations and scales.
pub fn procedural_image(size: usize, rng: &mut impl Rng) -> Result<ImagePlane> {
    let color = |rng: &mut dyn rand::RngCore| -> [f64; 3] {
        [rng.random_range(0.05..0.95), rng.random_range(0.05..0.95), rng.random_range(0.05..0.95)]
    };
    let n = size as f64;
    let c0 = color(rng);
    let c1 = color(rng);
    let angle: f64 = rng.random_range(0.0..2.0 * PI);
    let mut img = ImagePlane::from_fn(3, size, size, |c, y, x| {
        let t = ((x as f64 * angle.cos() + y as f64 * angle.sin()) / n * 0.7 + 0.5).clamp(0.0, 1.0);
        c0[c] * (1.0 - t) + c1[c] * t
    })?;
    let shapes = rng.random_range(10..20);
    for _ in 0..shapes {
        let col = color(rng);
        let cy = rng.random_range(0.0..n);
        let cx = rng.random_range(0.0..n);
        let extent = rng.random_range(n / 20.0..n / 4.0);
        match rng.random_range(0..3) {
            0 => {
                let (hh, hw) = (extent, rng.random_range(n / 20.0..n / 4.0));
                let rot: f64 = rng.random_range(0.0..PI);
                let (s, co) = rot.sin_cos();
                paint(&mut img, &col, |y, x| {
                    let (dy, dx) = (y - cy, x - cx);
                    (co * dx + s * dy).abs() < hw && (-s * dx + co * dy).abs() < hh
                });
            }
            1 => paint(&mut img, &col, |y, x| (y - cy).powi(2) + (x - cx).powi(2) < extent * extent),
            _ => {
                let period = rng.random_range(4.0..16.0);
                let rot: f64 = rng.random_range(0.0..PI);
                let (s, co) = rot.sin_cos();
                paint(&mut img, &col, |y, x| {
                    let inside = (y - cy).powi(2) + (x - cx).powi(2) < (1.5 * extent).powi(2);
                    inside && ((co * x + s * y) / period).rem_euclid(1.0) < 0.5
                });
            }
        }
    }
    let amp = rng.random_range(0.02..0.06);
    let fy = rng.random_range(0.3..1.2);
    let fx = rng.random_range(0.3..1.2);
    let (c, h, w) = img.shape();
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let t = amp * (y as f64 * fy).sin() * (x as f64 * fx + ch as f64).cos();
                let v = img.get(ch, y, x) + t;
                img.set(ch, y, x, v);
            }
        }
    }
    Ok(img.clamped().quantized())
}

fn paint(img: &mut ImagePlane, col: &[f64; 3], inside: impl Fn(f64, f64) -> bool) {
    let (c, h, w) = img.shape();
    for y in 0..h {
        for x in 0..w {
            if inside(y as f64 + 0.5, x as f64 + 0.5) {
                for (ch, &v) in col.iter().enumerate().take(c) {
                    img.set(ch, y, x, v);
                }
            }
        }
    }
}

/// Writes procedural images `first..first + count` of the `seed` family as
/// `img_NNNN.png`.
pub fn write_procedural_range(dir: &Path, first: usize, count: usize, size: usize, seed: u64) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| PdmError::io(dir, e))?;
    (first..first + count)
        .map(|i| {
            let mut rng = substream(seed, i as u64, Consumer::Corpus);
            let img = procedural_image(size, &mut rng)?;
            let path = dir.join(format!("img_{i:04}.png"));
            save_image(&img, &path)?;
            Ok(path)
        })
        .collect()
}
