//! Synthetic recovery benchmark: oracle corpus, joint training, then scoring
//! of the learned kernels, noise and SR output against the hidden truth.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::Serialize;

use crate::adversarial::LossReport;
use crate::config::{Config, NoiseKind};
use crate::data::{DatasetConfig, UnpairedDataset};
use crate::degrade::{BlurKernel, ScaleFactor};
use crate::error::{PdmError, Result};
use crate::image::{list_images, load_image, save_image, ImagePlane};
use crate::kernel_gen::{draw_latent, render_kernel_grid};
use crate::metrics::shifted_score;
use crate::noise_gen::noise_to_image;
use crate::rng::{substream, Consumer};
use crate::sr::{bicubic_resize, Direction};
use crate::synth::{
    export_mean_kernels, kernel_recovery_score, oracle_degrade_corpus, write_procedural_range, NoiseFamily,
    OracleDegradation, RecoveryReport,
};
use crate::trainer::{train, PdmState, TrainConfig};

impl Config {
    pub fn oracle(&self) -> OracleDegradation {
        OracleDegradation {
            sigma_min: self.oracle_sigma_min,
            sigma_max: self.oracle_sigma_max,
            isotropic: self.oracle_isotropic,
            kernel_size: self.kernel_size,
            noise: match self.oracle_noise {
                NoiseKind::None => NoiseFamily::None,
                NoiseKind::Awgn => NoiseFamily::Awgn {
                    sigma: self.oracle_noise_sigma,
                },
                NoiseKind::Heteroscedastic => NoiseFamily::Heteroscedastic {
                    sigma_read: self.oracle_sigma_read,
                    sigma_shot: self.oracle_sigma_shot,
                },
            },
            scale: self.scale,
            seed: self.seed,
        }
    }

    pub fn dataset_config(&self) -> DatasetConfig {
        DatasetConfig {
            scale: self.scale,
            lr_crop: self.lr_crop,
            augment: self.augment,
            cache_bytes: self.cache_bytes,
        }
    }
}

/// Oracle corpus layout under one directory.
#[derive(Clone, Debug)]
pub struct BenchCorpus {
    pub hr_dir: PathBuf,
    pub lr_dir: PathBuf,
    pub holdout_hr_dir: PathBuf,
    pub holdout_lr_dir: PathBuf,
    /// HR images used for training (first half).
    pub train_hr: Vec<PathBuf>,
    /// LR images used for training (second half).
    pub train_lr: Vec<PathBuf>,
    /// Ground-truth kernels behind `train_lr`.
    pub truth_kernels: Vec<BlurKernel>,
}

pub fn build_corpus(cfg: &Config, dir: &Path) -> Result<BenchCorpus> {
    if cfg.bench_images < 2 {
        return Err(PdmError::Config("bench_images must be >= 2".into()));
    }
    let oracle = cfg.oracle();
    let hr_dir = dir.join("hr");
    let lr_dir = dir.join("lr");
    let holdout_hr_dir = dir.join("holdout_hr");
    let holdout_lr_dir = dir.join("holdout_lr");
    write_procedural_range(&hr_dir, 0, cfg.bench_images, cfg.bench_image_size, cfg.seed)?;
    let records = oracle_degrade_corpus(&hr_dir, &oracle, &lr_dir)?;
    if cfg.bench_holdout > 0 {
        write_procedural_range(&holdout_hr_dir, cfg.bench_images, cfg.bench_holdout, cfg.bench_image_size, cfg.seed)?;
        let holdout_oracle = OracleDegradation {
            seed: oracle.seed ^ 0x5eed_0f_401d,
            ..oracle.clone()
        };
        oracle_degrade_corpus(&holdout_hr_dir, &holdout_oracle, &holdout_lr_dir)?;
    }
    let hr = list_images(&hr_dir)?;
    let lr = list_images(&lr_dir)?;
    let half = cfg.bench_images / 2;
    let truth_kernels = records[half..].iter().map(|r| r.kernel()).collect::<Result<_>>()?;
    Ok(BenchCorpus {
        train_hr: hr[..half].to_vec(),
        train_lr: lr[half..].to_vec(),
        hr_dir,
        lr_dir,
        holdout_hr_dir,
        holdout_lr_dir,
        truth_kernels,
    })
}

/// Samples `count` kernels from the trained generator. Image-conditioned
/// generators cycle through `images`.
pub fn sample_learned_kernels(state: &PdmState, count: usize, images: &[ImagePlane]) -> Result<Vec<BlurKernel>> {
    let kc = &state.cfg.kernel;
    let mut rng = substream(state.cfg.seed, 0, Consumer::Gallery);
    (0..count)
        .map(|i| {
            let image = if kc.conditioning.uses_image() {
                Some(images.get(i % images.len().max(1)).ok_or_else(|| {
                    PdmError::Empty("image-conditioned kernels need at least one image".into())
                })?)
            } else {
                None
            };
            let (h, w) = image.map_or((1, 1), |im| (im.height(), im.width()));
            let latent = if kc.conditioning.uses_latent() {
                Some(draw_latent(kc.latent_shape(h, w), kc.latent_source, &mut rng)?)
            } else {
                None
            };
            state.kernel_net.generate(latent.as_ref(), image)
        })
        .collect()
}

#[derive(Clone, Debug, Serialize)]
pub struct SrComparison {
    pub sr_psnr: f64,
    pub sr_ssim: f64,
    pub bicubic_psnr: f64,
    pub bicubic_ssim: f64,
    pub pairs: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct BenchReport {
    pub steps: u64,
    pub recovery: RecoveryReport,
    /// Pooled standard deviation of generated noise on held-out images.
    pub learned_noise_std: f64,
    pub truth_noise: NoiseFamily,
    pub sr: Option<SrComparison>,
    pub final_losses: Option<LossReport>,
}

fn crop_to_multiple(img: &ImagePlane, s: usize) -> Result<ImagePlane> {
    img.crop(0, 0, img.height() / s * s, img.width() / s * s)
}

/// Generated-noise standard deviation over synthetic LR versions of `hr`.
pub fn learned_noise_std(state: &PdmState, hr: &[ImagePlane]) -> Result<f64> {
    let (mut sum, mut sq, mut n) = (0.0, 0.0, 0usize);
    for (i, img) in hr.iter().enumerate() {
        let x = crop_to_multiple(img, state.cfg.scale)?;
        let pair = state.synthesize_pair(&x.to_tensor(), u64::MAX - i as u64)?;
        for &v in pair.n.data() {
            sum += v;
            sq += v * v;
            n += 1;
        }
    }
    if n == 0 {
        return Err(PdmError::Empty("no images to measure noise on".into()));
    }
    let mean = sum / n as f64;
    Ok((sq / n as f64 - mean * mean).max(0.0).sqrt())
}

/// Mean shift-tolerant scores of the SR model and of bicubic upsampling.
pub fn compare_with_bicubic(state: &PdmState, pairs: &[(ImagePlane, ImagePlane)], max_shift: usize, border: usize) -> Result<Option<SrComparison>> {
    let Some(sr_net) = state.sr_net.as_ref() else {
        return Ok(None);
    };
    let s = ScaleFactor::new(state.cfg.scale)?;
    let mut acc = [0.0; 4];
    for (hr, lr) in pairs {
        let hr = crop_to_multiple(hr, s.get())?;
        let sr = sr_net.super_resolve(lr)?.clamped();
        let bic = bicubic_resize(lr, s, Direction::Up)?.clamped();
        let a = shifted_score(&sr, &hr, max_shift, border)?;
        let b = shifted_score(&bic, &hr, max_shift, border)?;
        acc[0] += a.psnr;
        acc[1] += a.ssim;
        acc[2] += b.psnr;
        acc[3] += b.ssim;
    }
    let n = pairs.len().max(1) as f64;
    Ok(Some(SrComparison {
        sr_psnr: acc[0] / n,
        sr_ssim: acc[1] / n,
        bicubic_psnr: acc[2] / n,
        bicubic_ssim: acc[3] / n,
        pairs: pairs.len(),
    }))
}

fn load_all(paths: &[PathBuf]) -> Result<Vec<ImagePlane>> {
    paths.iter().map(|p| load_image(p)).collect()
}

/// Full pipeline: corpus → training → recovery report, all under `out_dir`.
pub fn run_bench(cfg: &Config, out_dir: &Path) -> Result<BenchReport> {
    let corpus = build_corpus(cfg, &out_dir.join("corpus"))?;
    log::info!(
        "bench corpus: {} HR / {} LR training images, {} held out",
        corpus.train_hr.len(),
        corpus.train_lr.len(),
        cfg.bench_holdout
    );
    let dataset = Arc::new(UnpairedDataset::from_paths(
        corpus.train_hr.clone(),
        corpus.train_lr.clone(),
        cfg.dataset_config(),
    )?);
    let state = PdmState::new(TrainConfig::from_config(cfg))?;
    let run_dir = out_dir.join("train");
    let (state, summary) = train(cfg, state, dataset, &run_dir)?;
    score_run(cfg, &state, &corpus, out_dir, summary.last)
}

/// Scores a trained state on a corpus and writes `report.json` plus images.
pub fn score_run(
    cfg: &Config,
    state: &PdmState,
    corpus: &BenchCorpus,
    out_dir: &Path,
    final_losses: Option<LossReport>,
) -> Result<BenchReport> {
    let holdout_hr = load_all(&list_images(&corpus.holdout_hr_dir).unwrap_or_default())?;
    let holdout_lr = load_all(&list_images(&corpus.holdout_lr_dir).unwrap_or_default())?;
    let probe: Vec<ImagePlane> = if holdout_hr.is_empty() {
        load_all(&corpus.train_hr)?
    } else {
        holdout_hr.clone()
    };
    let learned = sample_learned_kernels(state, cfg.gallery_count.max(1), &probe)?;
    let recovery = kernel_recovery_score(&learned, &corpus.truth_kernels)?;
    let noise_std = learned_noise_std(state, &probe)?;
    let pairs: Vec<_> = holdout_hr.into_iter().zip(holdout_lr).collect();
    let sr = compare_with_bicubic(state, &pairs, cfg.max_shift, cfg.border_crop())?;

    let fig = out_dir.join("figures");
    export_mean_kernels(&recovery, &fig, 8)?;
    save_image(&render_kernel_grid(&learned[..learned.len().min(16)], 4)?, &fig.join("kernel_gallery.png"))?;
    if let Some(x) = probe.first() {
        let x = crop_to_multiple(x, state.cfg.scale)?;
        let pair = state.synthesize_pair(&x.to_tensor(), 0)?;
        let n = crate::degrade::NoiseMap::new(ImagePlane::from_batch(&pair.n)?.remove(0));
        save_image(&noise_to_image(&n, 5.0), &fig.join("noise_sample.png"))?;
        save_image(&ImagePlane::from_batch(&pair.y_ref)?.remove(0).clamped(), &fig.join("synthetic_lr.png"))?;
    }
    let report = BenchReport {
        steps: state.step,
        recovery,
        learned_noise_std: noise_std,
        truth_noise: cfg.oracle().noise,
        sr,
        final_losses,
    };
    let path = out_dir.join("report.json");
    let json = serde_json::to_string_pretty(&report).map_err(|e| PdmError::format(&path, e.to_string()))?;
    std::fs::write(&path, json).map_err(|e| PdmError::io(&path, e))?;
    Ok(report)
}
