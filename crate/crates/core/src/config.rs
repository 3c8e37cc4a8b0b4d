//! Flat `key = value` configuration shared by every command.
//!
//! Values resolve in order: defaults, then a config file, then command-line
//! overrides. Unknown keys are rejected.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::adversarial::Normalization;
use crate::degrade::SpatialMode;
use crate::error::{PdmError, Result};
use crate::kernel_gen::{Conditioning, LatentSource, Mixing};
use crate::macros::named_enum;
use crate::sr::SrArch;

named_enum! {
    pub enum NoiseKind {
        None => "none",
        Awgn => "awgn",
        Heteroscedastic => "heteroscedastic",
    }
}

/// An integer that may be left as `auto`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct Auto(pub Option<usize>);

impl Auto {
    pub fn or(self, fallback: usize) -> usize {
        self.0.unwrap_or(fallback)
    }
}

impl FromStr for Auto {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        if s == "auto" {
            return Ok(Auto(None));
        }
        s.parse().map(|v| Auto(Some(v))).map_err(|_| format!("expected `auto` or an integer, got {s:?}"))
    }
}

impl fmt::Display for Auto {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.0 {
            Some(v) => write!(f, "{v}"),
            None => f.write_str("auto"),
        }
    }
}

fn parse_value<T: FromStr>(key: &str, raw: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    raw.parse::<T>()
        .map_err(|e| PdmError::Config(format!("invalid value {raw:?} for `{key}`: {e}")))
}

macro_rules! config_keys {
    ($( $(#[doc = $doc:literal])* $key:ident : $ty:ty = $default:expr, )*) => {
        /// Every tunable of the toolkit.
        #[derive(Clone, Debug, PartialEq)]
        pub struct Config {
            $( $(#[doc = $doc])* pub $key: $ty, )*
        }

        impl Default for Config {
            fn default() -> Self {
                Self { $( $key: $default, )* }
            }
        }

        impl Config {
            pub const KEYS: &'static [&'static str] = &[$( stringify!($key) ),*];

            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $( stringify!($key) => self.$key = parse_value(key, value)?, )*
                    _ => {
                        return Err(PdmError::Config(format!(
                            "unknown key `{key}`; valid keys are: {}",
                            Self::KEYS.join(", ")
                        )))
                    }
                }
                Ok(())
            }

            pub fn get(&self, key: &str) -> Option<String> {
                match key {
                    $( stringify!($key) => Some(self.$key.to_string()), )*
                    _ => None,
                }
            }

            /// `(key, default, description)` for every key.
            pub fn describe() -> Vec<(&'static str, String, &'static str)> {
                let d = Self::default();
                vec![$( (stringify!($key), d.$key.to_string(), concat!($($doc),*).trim()), )*]
            }
        }
    };
}

config_keys! {
    /// Number of training steps.
    total_steps: u64 = 200_000,
    /// Initial learning rate of every optimizer.
    lr: f64 = 2e-4,
    /// The learning rate halves every this many steps.
    lr_halving_interval: u64 = 5000,
    /// Lower clamp of the decayed learning rate.
    lr_floor: f64 = 1e-7,
    batch: usize = 32,
    /// Weight of the noise regularizer.
    lambda: f64 = 100.0,
    seed: u64 = 0,
    adam_beta1: f64 = 0.9,
    adam_beta2: f64 = 0.999,
    adam_eps: f64 = 1e-8,
    /// Train the SR model jointly with the degradation model.
    sr_enabled: bool = true,
    /// Add an HR-side adversarial loss to the SR objective.
    sr_adversarial: bool = false,
    sr_adv_weight: f64 = 5e-3,
    checkpoint_interval: u64 = 5000,
    /// Console progress every this many steps (the CSV gets every step).
    log_interval: u64 = 100,
    /// Prepare the next batch on a background thread.
    prefetch: bool = false,

    /// Directory of HR training images.
    hr_dir: String = String::new(),
    /// Directory of LR training images.
    lr_dir: String = String::new(),
    scale: usize = 4,
    /// LR crop side; HR crops are `lr_crop * scale`.
    lr_crop: usize = 32,
    /// Random flips and 90 degree rotations of crops.
    augment: bool = false,
    /// Byte budget of the decoded-image cache.
    cache_bytes: usize = 1 << 30,

    /// Kernel latent channels.
    kernel_fk: usize = 64,
    kernel_size: usize = 21,
    kernel_spatial: SpatialMode = SpatialMode::Invariant,
    kernel_conditioning: Conditioning = Conditioning::LatentOnly,
    /// 3x3 (correlated) or 1x1 (independent) mixing in variant mode.
    kernel_receptive: Mixing = Mixing::Correlated,
    kernel_latent: LatentSource = LatentSource::StandardNormal,
    kernel_width: usize = 128,
    /// Start near a centred Gaussian of this width (0: flat start).
    kernel_init_sigma: f64 = 0.0,

    noise_enabled: bool = true,
    /// Noise latent channels.
    noise_fn: usize = 3,
    noise_conditioning: Conditioning = Conditioning::ImagePlusLatent,
    noise_mixing: Mixing = Mixing::Correlated,
    noise_width: usize = 64,
    noise_latent: LatentSource = LatentSource::StandardNormal,

    disc_base_width: usize = 64,
    disc_num_stages: usize = 3,
    disc_norm: Normalization = Normalization::None,

    sr_arch: SrArch = SrArch::ResidualBaseline,
    sr_num_blocks: usize = 16,
    sr_width: usize = 64,
    /// Add a bicubic upsample of the input to the SR output.
    sr_bicubic_skip: bool = false,

    /// Largest integer misalignment searched when scoring.
    max_shift: usize = 4,
    /// Pixels ignored at each border when scoring; `auto` is 4 * scale.
    border_crop: Auto = Auto(None),

    out_dir: String = "runs/pdm".to_string(),

    /// Procedural HR images in the synthetic benchmark corpus.
    bench_images: usize = 64,
    bench_image_size: usize = 256,
    /// Extra HR/LR pairs held out for SR evaluation.
    bench_holdout: usize = 8,
    oracle_sigma_min: f64 = 2.0,
    oracle_sigma_max: f64 = 2.0,
    oracle_isotropic: bool = true,
    oracle_noise: NoiseKind = NoiseKind::Awgn,
    oracle_noise_sigma: f64 = 0.02,
    oracle_sigma_read: f64 = 1e-4,
    oracle_sigma_shot: f64 = 1e-2,
    /// Kernels and noise maps sampled for galleries and recovery scoring.
    gallery_count: usize = 64,
}

impl Config {
    /// Applies `key = value` lines. `#` starts a comment.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                PdmError::Config(format!("{origin}:{}: expected `key = value`, got {raw:?}", n + 1))
            })?;
            self.set(key.trim(), value.trim())
                .map_err(|e| PdmError::Config(format!("{origin}:{}: {}", n + 1, strip_prefix(&e))))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| PdmError::io(path, e))?;
        self.apply_text(&text, &path.display().to_string())
    }

    /// Defaults, then `file`, then `overrides`.
    pub fn resolve(file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut cfg = Self::default();
        if let Some(f) = file {
            cfg.apply_file(f)?;
        }
        for (k, v) in overrides {
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    /// Every key with its resolved value, one per line; parses back to `self`.
    pub fn to_text(&self) -> String {
        Self::KEYS
            .iter()
            .map(|k| format!("{k} = {}\n", self.get(k).expect("listed key")))
            .collect()
    }

    pub fn write_snapshot(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| PdmError::io(path, e))
    }

    pub fn border_crop(&self) -> usize {
        self.border_crop.or(4 * self.scale)
    }
}

fn strip_prefix(e: &PdmError) -> String {
    match e {
        PdmError::Config(m) => m.clone(),
        other => other.to_string(),
    }
}
