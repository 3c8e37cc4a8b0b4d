//! Stochastic blur-kernel generator: a small convolutional net maps a
//! standard-normal latent to a softmax-normalised kernel (or kernel field).

use std::io::{Read, Write};
use std::path::Path;

use pdm_autograd::{BoundParams, Conv2d, ConvSpec, Graph, Init, PadMode, ParamSet, Tensor, Var};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::degrade::{BlurKernel, SpatialMode};
use crate::error::{PdmError, Result};
use crate::image::ImagePlane;
use crate::macros::named_enum;
use crate::rng::{substream, Consumer};

named_enum! {
    /// What a generator is conditioned on.
    pub enum Conditioning {
        LatentOnly => "latent_only",
        ImageOnly => "image_only",
        ImagePlusLatent => "image_plus_latent",
    }
}

impl Conditioning {
    pub fn uses_image(self) -> bool {
        !matches!(self, Conditioning::LatentOnly)
    }

    pub fn uses_latent(self) -> bool {
        !matches!(self, Conditioning::ImageOnly)
    }
}

named_enum! {
    /// Spatial extent of the internal mixing convolutions.
    pub enum Mixing {
        /// 3×3 mixing: neighbouring outputs are correlated.
        Correlated => "correlated",
        /// 1×1 mixing: every location is generated independently.
        Independent => "independent",
    }
}

named_enum! {
    pub enum LatentSource {
        StandardNormal => "standard_normal",
        /// Fixed all-zero latent; turns the generator deterministic.
        Zeros => "zeros",
    }
}

/// A latent sample of declared shape `(f, h, w)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentDraw {
    shape: (usize, usize, usize),
    source: LatentSource,
    data: Vec<f64>,
}

impl LatentDraw {
    pub fn shape(&self) -> (usize, usize, usize) {
        self.shape
    }

    pub fn source(&self) -> LatentSource {
        self.source
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn to_tensor(&self) -> Tensor {
        let (f, h, w) = self.shape;
        Tensor::new(&[1, f, h, w], self.data.clone()).expect("latent length")
    }

    /// Stacks draws of equal shape into `(N, f, h, w)`.
    pub fn stack(draws: &[LatentDraw]) -> Result<Tensor> {
        let first = draws
            .first()
            .ok_or_else(|| PdmError::Empty("no latent draws".into()))?;
        let (f, h, w) = first.shape;
        let mut data = Vec::with_capacity(first.data.len() * draws.len());
        for d in draws {
            if d.shape != first.shape {
                return Err(PdmError::Shape("latent draws differ in shape".into()));
            }
            data.extend_from_slice(&d.data);
        }
        Ok(Tensor::new(&[draws.len(), f, h, w], data).expect("latent stack"))
    }
}

/// Draws a latent from `rng`. Zeros mode never touches the generator.
pub fn draw_latent(
    shape: (usize, usize, usize),
    source: LatentSource,
    rng: &mut impl Rng,
) -> Result<LatentDraw> {
    let (f, h, w) = shape;
    if f == 0 || h == 0 || w == 0 {
        return Err(PdmError::Shape(format!("latent dims must be positive, got {shape:?}")));
    }
    let n = f * h * w;
    let data = match source {
        LatentSource::Zeros => vec![0.0; n],
        LatentSource::StandardNormal => (0..n).map(|_| rng.sample(StandardNormal)).collect(),
    };
    Ok(LatentDraw {
        shape,
        source,
        data,
    })
}

/// Seeded latent draw; identical seeds give identical draws.
pub fn sample_latent(
    shape: (usize, usize, usize),
    source: LatentSource,
    seed: u64,
) -> Result<LatentDraw> {
    let mut rng = substream(seed, 0, Consumer::KernelLatent);
    draw_latent(shape, source, &mut rng)
}

/// `(N, f, h, w)` batch of draws.
pub fn draw_latent_batch(
    n: usize,
    shape: (usize, usize, usize),
    source: LatentSource,
    rng: &mut impl Rng,
) -> Result<Tensor> {
    let draws = (0..n)
        .map(|_| draw_latent(shape, source, rng))
        .collect::<Result<Vec<_>>>()?;
    LatentDraw::stack(&draws)
}

#[derive(Clone, Debug, PartialEq)]
pub struct KernelGenConfig {
    pub latent_channels: usize,
    pub kernel_size: usize,
    pub spatial_mode: SpatialMode,
    pub conditioning: Conditioning,
    pub receptive: Mixing,
    pub latent_source: LatentSource,
    pub hidden_width: usize,
    pub image_channels: usize,
    /// Width of the centred Gaussian the untrained net starts near; 0 starts
    /// from the flat kernel.
    pub init_sigma: f64,
}

impl Default for KernelGenConfig {
    fn default() -> Self {
        Self {
            latent_channels: 64,
            kernel_size: 21,
            spatial_mode: SpatialMode::Invariant,
            conditioning: Conditioning::LatentOnly,
            receptive: Mixing::Correlated,
            latent_source: LatentSource::StandardNormal,
            hidden_width: 128,
            image_channels: 3,
            init_sigma: 0.0,
        }
    }
}

impl KernelGenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_channels == 0 {
            return Err(PdmError::Config("kernel latent channels must be >= 1".into()));
        }
        if self.kernel_size % 2 == 0 {
            return Err(PdmError::Config(format!(
                "kernel_size must be odd, got {}",
                self.kernel_size
            )));
        }
        if self.hidden_width == 0 {
            return Err(PdmError::Config("kernel hidden width must be >= 1".into()));
        }
        if !(self.init_sigma >= 0.0 && self.init_sigma.is_finite()) {
            return Err(PdmError::Config(format!(
                "kernel init sigma must be finite and >= 0, got {}",
                self.init_sigma
            )));
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

    /// Latent spatial shape for an HR image of `h × w`.
    pub fn latent_shape(&self, h: usize, w: usize) -> (usize, usize, usize) {
        match self.spatial_mode {
            SpatialMode::Invariant => (self.latent_channels, 1, 1),
            SpatialMode::Variant => (self.latent_channels, h, w),
        }
    }

    fn mixing_kernel(&self) -> usize {
        match (self.spatial_mode, self.receptive) {
            (SpatialMode::Variant, Mixing::Correlated) => 3,
            _ => 1,
        }
    }
}

const LEAKY_SLOPE: f64 = 0.2;
const INIT_STD: f64 = 0.02;

/// Kernel generator: five mixing stages ending in a softmax over the `k²` taps.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelNet {
    cfg: KernelGenConfig,
    params: ParamSet,
    layers: Vec<Conv2d>,
}

impl KernelNet {
    pub fn new(cfg: KernelGenConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let kk = cfg.kernel_size * cfg.kernel_size;
        let hidden = cfg.hidden_width;
        let widths = [cfg.input_channels(), hidden, hidden, hidden, hidden, kk];
        let ksz = cfg.mixing_kernel();
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
            .collect::<Vec<Conv2d>>();
        if cfg.init_sigma > 0.0 {
            let bias = layers[layers.len() - 1].bias.expect("conv layers carry a bias");
            let k = cfg.kernel_size;
            let r = (k / 2) as f64;
            let var = cfg.init_sigma * cfg.init_sigma;
            for (t, b) in params.get_mut(bias).data_mut().iter_mut().enumerate() {
                let (y, x) = ((t / k) as f64 - r, (t % k) as f64 - r);
                *b = -(x * x + y * y) / (2.0 * var);
            }
        }
        Ok(Self {
            cfg,
            params,
            layers,
        })
    }

    pub fn config(&self) -> &KernelGenConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Kernel field `(N, k², h, w)` from latents `(N, f_k, h, w)` and/or an
    /// HR batch `(N, C, H, W)`.
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &BoundParams,
        latent: Option<Var>,
        image: Option<Var>,
    ) -> Result<Var> {
        let cond = self.cfg.conditioning;
        if cond.uses_latent() != latent.is_some() {
            return Err(PdmError::Config(format!(
                "kernel generator conditioning {cond} {} a latent",
                if cond.uses_latent() { "requires" } else { "does not take" }
            )));
        }
        if cond.uses_image() != image.is_some() {
            return Err(PdmError::Config(format!(
                "kernel generator conditioning {cond} {} an image",
                if cond.uses_image() { "requires" } else { "does not take" }
            )));
        }
        let (h, w) = match (latent, image) {
            (Some(z), _) => {
                let (_, f, h, w) = g.value(z).dims4();
                if f != self.cfg.latent_channels {
                    return Err(PdmError::Shape(format!(
                        "kernel latent has {f} channels, expected {}",
                        self.cfg.latent_channels
                    )));
                }
                if self.cfg.spatial_mode == SpatialMode::Invariant && (h, w) != (1, 1) {
                    return Err(PdmError::Shape(format!(
                        "invariant kernel latent must be 1x1, got {h}x{w}"
                    )));
                }
                (h, w)
            }
            (None, Some(x)) => {
                let (_, _, h, w) = g.value(x).dims4();
                let (_, lh, lw) = self.cfg.latent_shape(h, w);
                (lh, lw)
            }
            (None, None) => unreachable!("conditioning requires at least one input"),
        };
        let image_feature = image.map(|x| {
            let pooled = g.spatial_mean(x);
            g.broadcast_spatial(pooled, h, w)
        });
        let mut x = match (latent, image_feature) {
            (Some(z), Some(f)) => g.concat_channels(&[z, f]),
            (Some(z), None) => z,
            (None, Some(f)) => f,
            (None, None) => unreachable!(),
        };
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(g, p, x);
            if i < last {
                x = g.leaky_relu(x, LEAKY_SLOPE);
            }
        }
        Ok(g.softmax_channels(x))
    }

    /// Single kernel for one latent (and image, when conditioned).
    pub fn generate(&self, latent: Option<&LatentDraw>, image: Option<&ImagePlane>) -> Result<BlurKernel> {
        let mut g = Graph::new();
        let p = self.params.bind_frozen(&mut g);
        let z = latent.map(|z| g.constant(z.to_tensor()));
        let x = image.map(|x| g.constant(x.to_tensor()));
        let k = self.forward(&mut g, &p, z, x)?;
        Ok(BlurKernel::from_batch(g.value(k), self.cfg.kernel_size)?.remove(0))
    }
}

/// Free-function form of [`KernelNet::generate`].
pub fn generate_kernel(
    net: &KernelNet,
    latent: Option<&LatentDraw>,
    image: Option<&ImagePlane>,
) -> Result<BlurKernel> {
    net.generate(latent, image)
}

/// Sampled kernels plus a viewable grid.
#[derive(Clone, Debug)]
pub struct KernelGallery {
    /// `k × k` kernels (the centre of the field for spatially variant nets).
    pub kernels: Vec<BlurKernel>,
    /// Grayscale tile grid, each kernel scaled to its own maximum.
    pub grid: ImagePlane,
}

/// Draws `count` kernels on 1×1 latent fields.
pub fn kernel_gallery(
    net: &KernelNet,
    count: usize,
    source: LatentSource,
    seed: u64,
    image: Option<&ImagePlane>,
    zoom: usize,
) -> Result<KernelGallery> {
    if count == 0 {
        return Err(PdmError::Empty("gallery needs at least one kernel".into()));
    }
    let cfg = net.config();
    let mut rng = substream(seed, 0, Consumer::Gallery);
    let mut kernels = Vec::with_capacity(count);
    for _ in 0..count {
        let z = if cfg.conditioning.uses_latent() {
            Some(draw_latent((cfg.latent_channels, 1, 1), source, &mut rng)?)
        } else {
            None
        };
        let field = match (cfg.spatial_mode, image) {
            (SpatialMode::Variant, Some(x)) => {
                let z = z
                    .map(|_| draw_latent(cfg.latent_shape(x.height(), x.width()), source, &mut rng))
                    .transpose()?;
                let k = net.generate(z.as_ref(), Some(x))?;
                let taps = k.taps_at(x.height() / 2, x.width() / 2);
                BlurKernel::invariant(cfg.kernel_size, taps)?
            }
            _ => net.generate(z.as_ref(), image)?,
        };
        kernels.push(field);
    }
    let grid = render_kernel_grid(&kernels, zoom)?;
    Ok(KernelGallery { kernels, grid })
}

/// Tiles invariant kernels into a grayscale grid with one-pixel gaps.
pub fn render_kernel_grid(kernels: &[BlurKernel], zoom: usize) -> Result<ImagePlane> {
    let first = kernels
        .first()
        .ok_or_else(|| PdmError::Empty("no kernels to render".into()))?;
    let k = first.size();
    let zoom = zoom.max(1);
    let cols = (kernels.len() as f64).sqrt().ceil() as usize;
    let rows = kernels.len().div_ceil(cols);
    let tile = k * zoom;
    let height = rows * tile + rows - 1;
    let width = cols * tile + cols - 1;
    let mut grid = ImagePlane::filled(1, height, width, 0.0)?;
    for (idx, kernel) in kernels.iter().enumerate() {
        let taps = kernel.taps_at(0, 0);
        let max = taps.iter().cloned().fold(0.0, f64::max);
        let scale = if max > 0.0 { 1.0 / max } else { 0.0 };
        let (ty, tx) = ((idx / cols) * (tile + 1), (idx % cols) * (tile + 1));
        for y in 0..tile {
            for x in 0..tile {
                grid.set(0, ty + y, tx + x, taps[(y / zoom) * k + x / zoom] * scale);
            }
        }
    }
    Ok(grid)
}

const RAW_MAGIC: &[u8; 4] = b"PDMK";

/// Writes `k × k` kernels as `PDMK`, `u32 k`, `u32 count`, then
/// `count · k · k` little-endian `f64` taps.
pub fn write_kernels_raw(path: &Path, kernels: &[BlurKernel]) -> Result<()> {
    let k = kernels.first().map_or(0, BlurKernel::size);
    let mut buf = Vec::with_capacity(12 + kernels.len() * k * k * 8);
    buf.extend_from_slice(RAW_MAGIC);
    buf.extend_from_slice(&(k as u32).to_le_bytes());
    buf.extend_from_slice(&(kernels.len() as u32).to_le_bytes());
    for kernel in kernels {
        if kernel.size() != k {
            return Err(PdmError::Shape("raw export needs equally sized kernels".into()));
        }
        for v in kernel.taps_at(0, 0) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| PdmError::io(path, e))?;
    f.write_all(&buf).map_err(|e| PdmError::io(path, e))
}

pub fn read_kernels_raw(path: &Path) -> Result<Vec<BlurKernel>> {
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| PdmError::io(path, e))?;
    if buf.len() < 12 || &buf[..4] != RAW_MAGIC {
        return Err(PdmError::format(path, "missing PDMK header"));
    }
    let k = u32::from_le_bytes(buf[4..8].try_into().unwrap()) as usize;
    let count = u32::from_le_bytes(buf[8..12].try_into().unwrap()) as usize;
    if buf.len() != 12 + count * k * k * 8 {
        return Err(PdmError::format(path, "payload length does not match header"));
    }
    buf[12..]
        .chunks(k * k * 8)
        .map(|chunk| {
            let taps = chunk
                .chunks(8)
                .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                .collect();
            BlurKernel::invariant(k, taps)
        })
        .collect()
}
