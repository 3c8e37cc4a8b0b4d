//! Patch discriminator, least-squares adversarial losses and the degradation
//! model's total objective.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;

use pdm_autograd::{BoundParams, Conv2d, ConvSpec, Graph, Init, PadMode, ParamSet, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{PdmError, Result};
use crate::image::ImagePlane;
use crate::macros::named_enum;

/// Weight of the noise regularizer in the degradation objective.
pub const DEFAULT_LAMBDA: f64 = 100.0;

named_enum! {
    pub enum Normalization {
        Instance => "instance",
        None => "none",
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiscriminatorConfig {
    pub input_channels: usize,
    pub base_width: usize,
    pub num_stages: usize,
    pub normalization: Normalization,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            input_channels: 3,
            base_width: 64,
            num_stages: 3,
            normalization: Normalization::None,
        }
    }
}

const STAGE_KERNEL: usize = 4;
const LEAKY_SLOPE: f64 = 0.2;
const INIT_STD: f64 = 0.02;
const MAX_WIDTH_MULT: usize = 8;

impl DiscriminatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_stages == 0 || self.base_width == 0 || self.input_channels == 0 {
            return Err(PdmError::Config(
                "discriminator needs at least one stage, channel and unit of width".into(),
            ));
        }
        Ok(())
    }

    /// Side length of the score map for a square input of side `input`.
    pub fn output_size(&self, input: usize) -> usize {
        let spec = stage_spec();
        (0..self.num_stages).fold(input, |n, _| spec.output_len(n, STAGE_KERNEL))
    }

    /// Receptive field, in input pixels, of one score.
    pub fn receptive_field(&self) -> usize {
        // Stride-2 stages with 4-wide kernels, then a 1×1 head.
        let mut rf = 1;
        let mut jump = 1;
        for _ in 0..self.num_stages {
            rf += (STAGE_KERNEL - 1) * jump;
            jump *= 2;
        }
        rf
    }
}

fn stage_spec() -> ConvSpec {
    ConvSpec {
        stride: 2,
        padding: 1,
        pad_mode: PadMode::Zeros,
    }
}

/// PatchGAN-style discriminator: stride-2 4×4 stages, then a 1×1 scoring head.
#[derive(Clone, Debug, PartialEq)]
pub struct Discriminator {
    cfg: DiscriminatorConfig,
    params: ParamSet,
    stages: Vec<Conv2d>,
    head: Conv2d,
}

impl Discriminator {
    pub fn new(cfg: DiscriminatorConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamSet::new();
        let mut cin = cfg.input_channels;
        let mut stages = Vec::with_capacity(cfg.num_stages);
        for i in 0..cfg.num_stages {
            let cout = cfg.base_width * (1 << i).min(MAX_WIDTH_MULT);
            stages.push(Conv2d::new(
                &mut params,
                &format!("stage{i}"),
                cin,
                cout,
                STAGE_KERNEL,
                stage_spec(),
                Init::Normal(INIT_STD),
                rng,
            ));
            cin = cout;
        }
        let head = Conv2d::new(
            &mut params,
            "head",
            cin,
            1,
            1,
            ConvSpec::same(1, PadMode::Zeros),
            Init::Normal(INIT_STD),
            rng,
        );
        Ok(Self {
            cfg,
            params,
            stages,
            head,
        })
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Score map `(N, 1, h', w')` for patches `(N, C, h, w)`.
    pub fn forward(&self, g: &mut Graph, p: &BoundParams, x: Var) -> Var {
        let mut h = x;
        for (i, stage) in self.stages.iter().enumerate() {
            h = stage.forward(g, p, h);
            if i > 0 && self.cfg.normalization == Normalization::Instance {
                h = g.instance_norm(h, 1e-5);
            }
            h = g.leaky_relu(h, LEAKY_SLOPE);
        }
        self.head.forward(g, p, h)
    }

    /// Score map for one patch, as a single-channel plane.
    pub fn discriminate(&self, patch: &ImagePlane) -> Result<ImagePlane> {
        let mut g = Graph::new();
        let p = self.params.bind_frozen(&mut g);
        let x = g.constant(patch.to_tensor());
        let s = self.forward(&mut g, &p, x);
        Ok(ImagePlane::from_batch(g.value(s))?.remove(0))
    }
}

named_enum! {
    pub enum Side {
        Generator => "generator",
        Discriminator => "discriminator",
    }
}

fn mean_sq_offset(scores: &[f64], target: f64) -> f64 {
    scores.iter().map(|s| (s - target).powi(2)).sum::<f64>() / scores.len() as f64
}

/// Least-squares adversarial loss. Discriminator side:
/// `mean((real − 1)²) + mean(fake²)`; generator side: `mean((fake − 1)²)`.
pub fn adversarial_losses(real: &Tensor, fake: &Tensor, side: Side) -> Result<f64> {
    if real.shape() != fake.shape() {
        return Err(PdmError::Shape(format!(
            "score maps differ: {:?} vs {:?}",
            real.shape(),
            fake.shape()
        )));
    }
    Ok(match side {
        Side::Generator => mean_sq_offset(fake.data(), 1.0),
        Side::Discriminator => mean_sq_offset(real.data(), 1.0) + mean_sq_offset(fake.data(), 0.0),
    })
}

/// Differentiable `mean((scores − target)²)`.
pub fn lsgan_term(g: &mut Graph, scores: Var, target: f64) -> Var {
    let shifted = g.add_scalar(scores, -target);
    let sq = g.square(shifted);
    g.mean(sq)
}

/// `l_adv + λ · l_reg`.
pub fn total_degradation_loss(l_adv_g: f64, l_reg: f64, lambda: f64) -> f64 {
    l_adv_g + lambda * l_reg
}

/// Per-step losses.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: u64,
    pub l_adv_g: f64,
    pub l_adv_d: f64,
    pub l_reg: f64,
    pub l_total: f64,
    pub sr_pixel_loss: Option<f64>,
}

impl LossReport {
    pub const CSV_HEADER: &'static str = "step,l_adv_g,l_adv_d,l_reg,l_total,sr_pixel_loss";

    pub fn is_finite(&self) -> bool {
        [self.l_adv_g, self.l_adv_d, self.l_reg, self.l_total]
            .iter()
            .chain(self.sr_pixel_loss.iter())
            .all(|v| v.is_finite())
    }

    /// Full-precision CSV row (round-trip exact).
    pub fn csv_row(&self) -> String {
        let sr = self.sr_pixel_loss.map_or(String::new(), |v| format!("{v:?}"));
        format!(
            "{},{:?},{:?},{:?},{:?},{}",
            self.step, self.l_adv_g, self.l_adv_d, self.l_reg, self.l_total, sr
        )
    }

    pub fn parse_csv_row(line: &str) -> Result<Self> {
        let bad = || PdmError::format("<loss log>", format!("bad row {line:?}"));
        let f: Vec<&str> = line.trim().split(',').collect();
        if f.len() != 6 {
            return Err(bad());
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
        Ok(Self {
            step: f[0].parse().map_err(|_| bad())?,
            l_adv_g: num(f[1])?,
            l_adv_d: num(f[2])?,
            l_reg: num(f[3])?,
            l_total: num(f[4])?,
            sr_pixel_loss: if f[5].is_empty() { None } else { Some(num(f[5])?) },
        })
    }
}

/// Appends [`LossReport`] rows to a CSV file.
pub struct LossLog {
    out: BufWriter<File>,
    path: std::path::PathBuf,
}

impl LossLog {
    /// Opens `path` for appending, writing the header if the file is new.
    pub fn open(path: &Path) -> Result<Self> {
        let fresh = !path.exists() || std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| PdmError::io(path, e))?;
        let mut log = Self {
            out: BufWriter::new(file),
            path: path.to_path_buf(),
        };
        if fresh {
            writeln!(log.out, "{}", LossReport::CSV_HEADER).map_err(|e| PdmError::io(path, e))?;
        }
        Ok(log)
    }

    pub fn append(&mut self, r: &LossReport) -> Result<()> {
        writeln!(self.out, "{}", r.csv_row()).map_err(|e| PdmError::io(&self.path, e))
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush().map_err(|e| PdmError::io(&self.path, e))
    }
}

pub fn read_loss_log(path: &Path) -> Result<Vec<LossReport>> {
    let text = std::fs::read_to_string(path).map_err(|e| PdmError::io(path, e))?;
    text.lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(LossReport::parse_csv_row)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn loss_targets_are_zero() {
        let ones = Tensor::full(&[1, 1, 4, 4], 1.0);
        let zeros = Tensor::zeros(&[1, 1, 4, 4]);
        assert_eq!(adversarial_losses(&zeros, &ones, Side::Generator).unwrap(), 0.0);
        assert_eq!(adversarial_losses(&ones, &zeros, Side::Discriminator).unwrap(), 0.0);
        assert!(adversarial_losses(&ones, &Tensor::zeros(&[1, 1, 2, 2]), Side::Generator).is_err());
    }

    #[test]
    fn total_loss_arithmetic() {
        assert!((total_degradation_loss(0.5, 0.001, DEFAULT_LAMBDA) - 0.6).abs() < 1e-12);
        assert_eq!(total_degradation_loss(0.37, 0.0, 100.0), 0.37);
        assert_eq!(DEFAULT_LAMBDA, 100.0);
    }

    #[test]
    fn default_score_map_is_4x4() {
        let d = Discriminator::new(
            DiscriminatorConfig::default(),
            &mut rand_chacha::ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap();
        let patch = ImagePlane::filled(3, 32, 32, 0.5).unwrap();
        let s = d.discriminate(&patch).unwrap();
        assert_eq!(s.shape(), (1, 4, 4));
        assert_eq!(d.discriminate(&patch).unwrap(), s);
        assert!(d.config().receptive_field() <= 32);
    }

    #[test]
    fn csv_rows_round_trip() {
        let r = LossReport {
            step: 3,
            l_adv_g: 0.1 + 0.2,
            l_adv_d: 1.0 / 3.0,
            l_reg: 1e-9,
            l_total: 0.30000001,
            sr_pixel_loss: None,
        };
        assert_eq!(LossReport::parse_csv_row(&r.csv_row()).unwrap(), r);
        let with_sr = LossReport { sr_pixel_loss: Some(0.25), ..r };
        assert_eq!(LossReport::parse_csv_row(&with_sr.csv_row()).unwrap(), with_sr);
    }
}
