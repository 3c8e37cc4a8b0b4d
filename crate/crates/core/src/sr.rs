//! Super-resolution restorers and bicubic resampling.

use pdm_autograd::{BoundParams, Conv2d, ConvSpec, Graph, Init, PadMode, ParamSet, Tensor, Var};
use rand::Rng;

use crate::degrade::ScaleFactor;
use crate::error::{PdmError, Result};
use crate::image::ImagePlane;
use crate::macros::named_enum;

named_enum! {
    pub enum SrArch {
        /// EDSR-baseline style: plain residual blocks, no normalization,
        /// sub-pixel upsampling.
        ResidualBaseline => "residual_baseline",
        /// RRDB style: residual-in-residual dense blocks.
        DeepResidualDense => "deep_residual_dense",
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SrConfig {
    pub arch: SrArch,
    pub scale: usize,
    pub num_blocks: usize,
    pub width: usize,
    /// Add a bicubic upsampling of the input to the network output.
    pub bicubic_skip: bool,
    pub channels: usize,
}

impl Default for SrConfig {
    fn default() -> Self {
        Self {
            arch: SrArch::ResidualBaseline,
            scale: 4,
            num_blocks: 16,
            width: 64,
            bicubic_skip: false,
            channels: 3,
        }
    }
}

impl SrConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_blocks == 0 || self.width == 0 || self.scale == 0 {
            return Err(PdmError::Config(
                "SR model needs num_blocks, width and scale >= 1".into(),
            ));
        }
        Ok(())
    }
}

const RESIDUAL_SCALE_DENSE: f64 = 0.2;
const DENSE_LAYERS: usize = 5;
const DENSE_PER_BLOCK: usize = 3;

#[derive(Clone, Debug, PartialEq)]
enum Body {
    Residual(Vec<(Conv2d, Conv2d)>),
    /// `[block][dense unit][layer]`.
    Dense(Vec<Vec<Vec<Conv2d>>>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct SrNet {
    cfg: SrConfig,
    params: ParamSet,
    head: Conv2d,
    body: Body,
    body_tail: Conv2d,
    upsample: Vec<(Conv2d, usize)>,
    tail: Conv2d,
}

fn shuffle_factors(s: usize) -> Vec<usize> {
    if s == 1 {
        vec![]
    } else if s.is_power_of_two() {
        vec![2; s.trailing_zeros() as usize]
    } else {
        vec![s]
    }
}

impl SrNet {
    pub fn new(cfg: SrConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let w = cfg.width;
        let same = ConvSpec::same(3, PadMode::Zeros);
        let init = Init::FanInUniform;
        let mut params = ParamSet::new();
        let head = Conv2d::new(&mut params, "head", cfg.channels, w, 3, same, init, rng);
        let body = match cfg.arch {
            SrArch::ResidualBaseline => Body::Residual(
                (0..cfg.num_blocks)
                    .map(|b| {
                        let c1 = Conv2d::new(&mut params, &format!("block{b}.conv1"), w, w, 3, same, init, rng);
                        let c2 = Conv2d::new(&mut params, &format!("block{b}.conv2"), w, w, 3, same, init, rng);
                        (c1, c2)
                    })
                    .collect(),
            ),
            SrArch::DeepResidualDense => {
                let growth = (w / 2).max(1);
                Body::Dense(
                    (0..cfg.num_blocks)
                        .map(|b| {
                            (0..DENSE_PER_BLOCK)
                                .map(|u| {
                                    (0..DENSE_LAYERS)
                                        .map(|l| {
                                            let cin = w + l * growth;
                                            let cout = if l + 1 == DENSE_LAYERS { w } else { growth };
                                            Conv2d::new(
                                                &mut params,
                                                &format!("rrdb{b}.rdb{u}.conv{l}"),
                                                cin,
                                                cout,
                                                3,
                                                same,
                                                init,
                                                rng,
                                            )
                                        })
                                        .collect()
                                })
                                .collect()
                        })
                        .collect(),
                )
            }
        };
        let body_tail = Conv2d::new(&mut params, "body_tail", w, w, 3, same, init, rng);
        let upsample = shuffle_factors(cfg.scale)
            .into_iter()
            .enumerate()
            .map(|(i, r)| {
                let c = Conv2d::new(&mut params, &format!("up{i}"), w, w * r * r, 3, same, init, rng);
                (c, r)
            })
            .collect();
        let tail = Conv2d::new(&mut params, "tail", w, cfg.channels, 3, same, init, rng);
        Ok(Self {
            cfg,
            params,
            head,
            body,
            body_tail,
            upsample,
            tail,
        })
    }

    pub fn config(&self) -> &SrConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// `(N, C, H, W)` → `(N, C, H·s, W·s)`.
    pub fn forward(&self, g: &mut Graph, p: &BoundParams, y: Var) -> Result<Var> {
        let head = self.head.forward(g, p, y);
        let mut h = head;
        match &self.body {
            Body::Residual(blocks) => {
                for (c1, c2) in blocks {
                    let r = c1.forward(g, p, h);
                    let r = g.relu(r);
                    let r = c2.forward(g, p, r);
                    h = g.add(h, r);
                }
            }
            Body::Dense(blocks) => {
                for block in blocks {
                    let block_in = h;
                    for unit in block {
                        h = dense_unit(g, p, unit, h);
                    }
                    let r = g.sub(h, block_in);
                    let r = g.scale(r, RESIDUAL_SCALE_DENSE);
                    h = g.add(block_in, r);
                }
            }
        }
        let h = self.body_tail.forward(g, p, h);
        let mut h = g.add(h, head);
        for (conv, r) in &self.upsample {
            h = conv.forward(g, p, h);
            h = g.pixel_shuffle(h, *r);
        }
        let out = self.tail.forward(g, p, h);
        if !self.cfg.bicubic_skip {
            return Ok(out);
        }
        let planes = ImagePlane::from_batch(g.value(y))?;
        let s = ScaleFactor::new(self.cfg.scale)?;
        let up = planes
            .iter()
            .map(|pl| bicubic_resize(pl, s, Direction::Up))
            .collect::<Result<Vec<_>>>()?;
        let skip = g.constant(ImagePlane::stack(&up)?);
        Ok(g.add(out, skip))
    }

    pub fn super_resolve(&self, y: &ImagePlane) -> Result<ImagePlane> {
        let mut g = Graph::new();
        let p = self.params.bind_frozen(&mut g);
        let x = g.constant(y.to_tensor());
        let out = self.forward(&mut g, &p, x)?;
        Ok(ImagePlane::from_batch(g.value(out))?.remove(0))
    }
}

fn dense_unit(g: &mut Graph, p: &BoundParams, layers: &[Conv2d], x: Var) -> Var {
    let mut feats = vec![x];
    let last = layers.len() - 1;
    let mut out = x;
    for (l, conv) in layers.iter().enumerate() {
        let input = if feats.len() == 1 { x } else { g.concat_channels(&feats) };
        out = conv.forward(g, p, input);
        if l < last {
            out = g.leaky_relu(out, 0.2);
            feats.push(out);
        }
    }
    let r = g.scale(out, RESIDUAL_SCALE_DENSE);
    g.add(x, r)
}

/// Free-function form of [`SrNet::super_resolve`].
pub fn super_resolve(net: &SrNet, y: &ImagePlane) -> Result<ImagePlane> {
    net.super_resolve(y)
}

/// Mean absolute error.
pub fn sr_pixel_loss(prediction: &ImagePlane, target: &ImagePlane) -> Result<f64> {
    if prediction.shape() != target.shape() {
        return Err(PdmError::Shape(format!(
            "prediction {:?} and target {:?} differ",
            prediction.shape(),
            target.shape()
        )));
    }
    let n = prediction.data().len() as f64;
    Ok(prediction
        .data()
        .iter()
        .zip(target.data())
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
        / n)
}

/// Differentiable mean absolute error.
pub fn sr_pixel_loss_var(g: &mut Graph, prediction: Var, target: Var) -> Var {
    let d = g.sub(prediction, target);
    let a = g.abs(d);
    g.mean(a)
}

named_enum! {
    pub enum Direction {
        Up => "up",
        Down => "down",
    }
}

const CUBIC_A: f64 = -0.5;

/// Keys cubic convolution kernel with `a = −0.5`.
pub fn cubic_weight(x: f64) -> f64 {
    let x = x.abs();
    if x <= 1.0 {
        (CUBIC_A + 2.0) * x.powi(3) - (CUBIC_A + 3.0) * x.powi(2) + 1.0
    } else if x < 2.0 {
        CUBIC_A * x.powi(3) - 5.0 * CUBIC_A * x.powi(2) + 8.0 * CUBIC_A * x - 4.0 * CUBIC_A
    } else {
        0.0
    }
}

/// Sparse resampling matrix for one axis: per output index, `(src, weight)`.
fn resample_weights(len: usize, s: usize, direction: Direction) -> Vec<Vec<(usize, f64)>> {
    let sf = s as f64;
    let out_len = match direction {
        Direction::Up => len * s,
        Direction::Down => len / s,
    };
    let clamp = |i: isize| i.clamp(0, len as isize - 1) as usize;
    (0..out_len)
        .map(|o| {
            let mut taps: Vec<(usize, f64)> = Vec::new();
            let mut push = |src: usize, w: f64| match taps.iter_mut().find(|t| t.0 == src) {
                Some(t) => t.1 += w,
                None => taps.push((src, w)),
            };
            match direction {
                Direction::Up => {
                    let center = (o as f64 + 0.5) / sf - 0.5;
                    let base = center.floor() as isize;
                    for t in base - 1..=base + 2 {
                        push(clamp(t), cubic_weight(center - t as f64));
                    }
                }
                Direction::Down => {
                    // Antialiased: kernel stretched by s.
                    let center = (o as f64 + 0.5) * sf - 0.5;
                    let lo = (center - 2.0 * sf).floor() as isize;
                    let hi = (center + 2.0 * sf).ceil() as isize;
                    let mut total = 0.0;
                    let mut raw = Vec::new();
                    for t in lo..=hi {
                        let w = cubic_weight((center - t as f64) / sf);
                        if w != 0.0 {
                            raw.push((clamp(t), w));
                            total += w;
                        }
                    }
                    for (src, w) in raw {
                        push(src, w / total);
                    }
                }
            }
            taps
        })
        .collect()
}

/// Bicubic up- or downscaling by an integer factor.
pub fn bicubic_resize(y: &ImagePlane, s: ScaleFactor, direction: Direction) -> Result<ImagePlane> {
    let s = s.get();
    let (c, h, w) = y.shape();
    if direction == Direction::Down && (h % s != 0 || w % s != 0) {
        return Err(PdmError::Shape(format!(
            "{h}x{w} image is not divisible by {s} for downscaling"
        )));
    }
    let rows = resample_weights(h, s, direction);
    let cols = resample_weights(w, s, direction);
    let (ho, wo) = (rows.len(), cols.len());
    let mut tmp = vec![0.0; c * ho * w];
    for ch in 0..c {
        for (i, taps) in rows.iter().enumerate() {
            for x in 0..w {
                tmp[(ch * ho + i) * w + x] = taps.iter().map(|&(r, wt)| wt * y.get(ch, r, x)).sum();
            }
        }
    }
    ImagePlane::from_fn(c, ho, wo, |ch, i, j| {
        cols[j]
            .iter()
            .map(|&(col, wt)| wt * tmp[(ch * ho + i) * w + col])
            .sum()
    })
}

/// Batch bicubic upsampling of an `(N, C, H, W)` tensor.
pub fn bicubic_upsample_batch(t: &Tensor, s: ScaleFactor) -> Result<Tensor> {
    let planes = ImagePlane::from_batch(t)?
        .iter()
        .map(|p| bicubic_resize(p, s, Direction::Up))
        .collect::<Result<Vec<_>>>()?;
    ImagePlane::stack(&planes)
}
