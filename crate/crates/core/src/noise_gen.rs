//! Stochastic noise generator, unconditional or conditioned on the clean LR
//! image. Latent and image are joined by channel concatenation.

use pdm_autograd::{BoundParams, Conv2d, ConvSpec, Graph, Init, PadMode, ParamSet, Tensor, Var};
use rand::Rng;

use crate::degrade::NoiseMap;
use crate::error::{PdmError, Result};
use crate::image::ImagePlane;
use crate::kernel_gen::{Conditioning, LatentDraw, LatentSource, Mixing};

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseGenConfig {
    pub latent_channels: usize,
    pub conditioning: Conditioning,
    pub mixing: Mixing,
    pub enabled: bool,
    pub latent_source: LatentSource,
    pub hidden_width: usize,
    pub image_channels: usize,
}

impl Default for NoiseGenConfig {
    fn default() -> Self {
        Self {
            latent_channels: 3,
            conditioning: Conditioning::ImagePlusLatent,
            mixing: Mixing::Correlated,
            enabled: true,
            latent_source: LatentSource::StandardNormal,
            hidden_width: 64,
            image_channels: 3,
        }
    }
}

impl NoiseGenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_channels == 0 {
            return Err(PdmError::Config("noise latent channels must be >= 1".into()));
        }
        if self.hidden_width == 0 {
            return Err(PdmError::Config("noise hidden width must be >= 1".into()));
        }
        Ok(())
    }

    fn input_channels(&self) -> usize {
        let mut c = 0;
        if self.conditioning.uses_latent() {
            c += self.latent_channels;
        }
        if self.conditioning.uses_image() {
            c += self.image_channels;
        }
        c
    }
}

const LEAKY_SLOPE: f64 = 0.2;
const INIT_STD: f64 = 0.02;

/// Four mixing stages with no output nonlinearity (noise is signed).
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseNet {
    cfg: NoiseGenConfig,
    params: ParamSet,
    layers: Vec<Conv2d>,
}

impl NoiseNet {
    pub fn new(cfg: NoiseGenConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let hidden = cfg.hidden_width;
        let widths = [cfg.input_channels(), hidden, hidden, hidden, cfg.image_channels];
        let ksz = match cfg.mixing {
            Mixing::Correlated => 3,
            Mixing::Independent => 1,
        };
        let spec = ConvSpec::same(ksz, PadMode::Reflect);
        let mut params = ParamSet::new();
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                Conv2d::new(
                    &mut params,
                    &format!("mix{i}"),
                    w[0],
                    w[1],
                    ksz,
                    spec,
                    Init::Normal(INIT_STD),
                    rng,
                )
            })
            .collect();
        Ok(Self {
            cfg,
            params,
            layers,
        })
    }

    pub fn config(&self) -> &NoiseGenConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Noise `(N, C, h, w)` from latents `(N, f_n, h, w)` and/or clean LR
    /// images `(N, C, h, w)`. A disabled generator yields a zero constant.
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &BoundParams,
        latent: Option<Var>,
        clean: Option<Var>,
    ) -> Result<Var> {
        let cond = self.cfg.conditioning;
        let (n, h, w) = match (latent, clean) {
            (_, Some(y)) => {
                let (n, _, h, w) = g.value(y).dims4();
                (n, h, w)
            }
            (Some(z), None) => {
                let (n, _, h, w) = g.value(z).dims4();
                (n, h, w)
            }
            (None, None) => {
                return Err(PdmError::Config(
                    "noise generator needs a latent or a clean image".into(),
                ))
            }
        };
        if !self.cfg.enabled {
            return Ok(g.constant(Tensor::zeros(&[n, self.cfg.image_channels, h, w])));
        }
        if cond.uses_image() && clean.is_none() {
            return Err(PdmError::Config(format!(
                "noise conditioning {cond} requires the clean LR image"
            )));
        }
        if cond.uses_latent() && latent.is_none() {
            return Err(PdmError::Config(format!(
                "noise conditioning {cond} requires a latent"
            )));
        }
        if let Some(z) = latent.filter(|_| cond.uses_latent()) {
            let (zn, f, zh, zw) = g.value(z).dims4();
            if (zn, zh, zw) != (n, h, w) || f != self.cfg.latent_channels {
                return Err(PdmError::Shape(format!(
                    "noise latent {:?} does not match ({n}, {}, {h}, {w})",
                    g.value(z).shape(),
                    self.cfg.latent_channels
                )));
            }
        }
        let mut x = match cond {
            Conditioning::LatentOnly => latent.expect("checked"),
            Conditioning::ImageOnly => clean.expect("checked"),
            Conditioning::ImagePlusLatent => {
                g.concat_channels(&[latent.expect("checked"), clean.expect("checked")])
            }
        };
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(g, p, x);
            if i < last {
                x = g.leaky_relu(x, LEAKY_SLOPE);
            }
        }
        Ok(x)
    }

    pub fn generate(&self, latent: Option<&LatentDraw>, clean: Option<&ImagePlane>) -> Result<NoiseMap> {
        let mut g = Graph::new();
        let p = self.params.bind_frozen(&mut g);
        let z = latent.map(|z| g.constant(z.to_tensor()));
        let y = clean.map(|y| g.constant(y.to_tensor()));
        let out = self.forward(&mut g, &p, z, y)?;
        Ok(NoiseMap::new(ImagePlane::from_batch(g.value(out))?.remove(0)))
    }
}

/// Free-function form of [`NoiseNet::generate`].
pub fn generate_noise(
    net: &NoiseNet,
    latent: Option<&LatentDraw>,
    clean: Option<&ImagePlane>,
) -> Result<NoiseMap> {
    net.generate(latent, clean)
}

/// Mean of squared entries. The mean (rather than the sum) keeps the
/// regularizer weight independent of crop size.
pub fn noise_energy(n: &NoiseMap) -> f64 {
    let d = n.plane().data();
    d.iter().map(|v| v * v).sum::<f64>() / d.len() as f64
}

/// Differentiable [`noise_energy`].
pub fn noise_energy_var(g: &mut Graph, n: Var) -> Var {
    let sq = g.square(n);
    g.mean(sq)
}

/// Mid-gray centred view of a noise map for inspection.
pub fn noise_to_image(n: &NoiseMap, gain: f64) -> ImagePlane {
    let plane = n.plane();
    let mean = plane.mean();
    plane.map(|v| (0.5 + (v - mean) * gain).clamp(0.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel_gen::sample_latent;
    use rand::SeedableRng;

    fn net(cfg: NoiseGenConfig) -> NoiseNet {
        NoiseNet::new(cfg, &mut rand_chacha::ChaCha8Rng::seed_from_u64(8)).unwrap()
    }

    #[test]
    fn disabled_generator_yields_zeros() {
        let n = net(NoiseGenConfig {
            enabled: false,
            ..Default::default()
        });
        let z = sample_latent((3, 4, 5), LatentSource::StandardNormal, 1).unwrap();
        let y = ImagePlane::filled(3, 4, 5, 0.7).unwrap();
        let out = n.generate(Some(&z), Some(&y)).unwrap();
        assert_eq!(out.plane().shape(), (3, 4, 5));
        assert!(out.plane().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn latent_only_shape() {
        let n = net(NoiseGenConfig {
            conditioning: Conditioning::LatentOnly,
            ..Default::default()
        });
        let z = sample_latent((3, 32, 32), LatentSource::StandardNormal, 1).unwrap();
        let out = n.generate(Some(&z), None).unwrap();
        assert_eq!(out.plane().shape(), (3, 32, 32));
        assert!(out.plane().is_finite());
    }

    #[test]
    fn missing_clean_image_is_config_error() {
        let n = net(NoiseGenConfig::default());
        let z = sample_latent((3, 8, 8), LatentSource::StandardNormal, 1).unwrap();
        assert!(matches!(n.generate(Some(&z), None), Err(PdmError::Config(_))));
    }

    #[test]
    fn generation_is_deterministic() {
        let n = net(NoiseGenConfig::default());
        let z = sample_latent((3, 8, 8), LatentSource::StandardNormal, 2).unwrap();
        let y = ImagePlane::from_fn(3, 8, 8, |c, i, j| (c + i + j) as f64 / 20.0).unwrap();
        let a = n.generate(Some(&z), Some(&y)).unwrap();
        let b = n.generate(Some(&z), Some(&y)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn energy_examples() {
        let zero = NoiseMap::zeros(3, 4, 4).unwrap();
        assert_eq!(noise_energy(&zero), 0.0);
        let half = NoiseMap::new(ImagePlane::filled(3, 4, 4, 0.5).unwrap());
        assert_eq!(noise_energy(&half), 0.25);
    }

    #[test]
    fn export_centres_on_mid_gray() {
        let n = NoiseMap::new(ImagePlane::from_fn(1, 2, 2, |_, i, j| (i * 2 + j) as f64 * 0.01).unwrap());
        let img = noise_to_image(&n, 10.0);
        assert!((img.mean() - 0.5).abs() < 1e-12);
    }
}
