//! Planar image carrier and 8-bit raster I/O.

use std::path::{Path, PathBuf};

use image::{GrayImage, Luma, Rgb, RgbImage};
use pdm_autograd::Tensor;

use crate::error::{PdmError, Result};

/// `C × H × W` real-valued raster, nominally in `[0, 1]`. Values are not
/// clamped except on export.
#[derive(Clone, Debug, PartialEq)]
pub struct ImagePlane {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl ImagePlane {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if !matches!(channels, 1 | 3) {
            return Err(PdmError::Shape(format!(
                "image must have 1 or 3 channels, got {channels}"
            )));
        }
        if height == 0 || width == 0 {
            return Err(PdmError::Shape(format!(
                "image dims must be positive, got {height}x{width}"
            )));
        }
        if data.len() != channels * height * width {
            return Err(PdmError::Shape(format!(
                "{channels}x{height}x{width} image needs {} values, got {}",
                channels * height * width,
                data.len()
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f64) -> Result<Self> {
        Self::new(channels, height, width, vec![value; channels * height * width])
    }

    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self::new(channels, height, width, data)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..self.clone()
        }
    }

    pub fn clamped(&self) -> Self {
        self.map(|v| v.clamp(0.0, 1.0))
    }

    /// Rounds to the 8-bit grid that export would produce.
    pub fn quantized(&self) -> Self {
        self.map(|v| quantize(v) as f64 / 255.0)
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Self> {
        if top + height > self.height || left + width > self.width || height == 0 || width == 0 {
            return Err(PdmError::Shape(format!(
                "crop {height}x{width} at ({top},{left}) exceeds {}x{} image",
                self.height, self.width
            )));
        }
        Self::from_fn(self.channels, height, width, |c, y, x| {
            self.get(c, top + y, left + x)
        })
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut out = self.clone();
        for c in 0..self.channels {
            for y in 0..self.height {
                for x in 0..self.width {
                    out.set(c, y, x, self.get(c, y, self.width - 1 - x));
                }
            }
        }
        out
    }

    /// Rotates by 90° counter-clockwise.
    pub fn rotate90(&self) -> Self {
        let (h, w) = (self.height, self.width);
        Self::from_fn(self.channels, w, h, |c, y, x| self.get(c, x, w - 1 - y))
            .expect("rotation keeps a valid shape")
    }

    /// `(1, C, H, W)` tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[1, self.channels, self.height, self.width], self.data.clone())
            .expect("plane length matches")
    }

    /// Splits an `(N, C, H, W)` tensor into planes.
    pub fn from_batch(t: &Tensor) -> Result<Vec<Self>> {
        let (n, c, h, w) = t.dims4();
        let per = c * h * w;
        (0..n)
            .map(|i| Self::new(c, h, w, t.data()[i * per..(i + 1) * per].to_vec()))
            .collect()
    }

    /// Stacks equally shaped planes into an `(N, C, H, W)` tensor.
    pub fn stack(planes: &[ImagePlane]) -> Result<Tensor> {
        let first = planes
            .first()
            .ok_or_else(|| PdmError::Empty("cannot stack zero images".into()))?;
        let mut data = Vec::with_capacity(first.data.len() * planes.len());
        for p in planes {
            if p.shape() != first.shape() {
                return Err(PdmError::Shape(format!(
                    "cannot stack {:?} with {:?}",
                    p.shape(),
                    first.shape()
                )));
            }
            data.extend_from_slice(&p.data);
        }
        Ok(Tensor::new(
            &[planes.len(), first.channels, first.height, first.width],
            data,
        )
        .expect("stack length"))
    }
}

pub(crate) fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Loads an 8-bit raster as RGB scaled to `[0, 1]`.
pub fn load_image(path: &Path) -> Result<ImagePlane> {
    let img = image::open(path).map_err(|e| PdmError::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let rgb = img.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut data = vec![0.0; 3 * h * w];
    for (x, y, px) in rgb.enumerate_pixels() {
        for c in 0..3 {
            data[(c * h + y as usize) * w + x as usize] = px.0[c] as f64 / 255.0;
        }
    }
    ImagePlane::new(3, h, w, data)
}

/// Writes an image as 8-bit PNG, clamping to `[0, 1]`. Single-channel planes
/// are written as grayscale.
pub fn save_image(plane: &ImagePlane, path: &Path) -> Result<()> {
    let (c, h, w) = plane.shape();
    let result = if c == 1 {
        let img = GrayImage::from_fn(w as u32, h as u32, |x, y| {
            Luma([quantize(plane.get(0, y as usize, x as usize))])
        });
        img.save(path)
    } else {
        let img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let p = |ch| quantize(plane.get(ch, y as usize, x as usize));
            Rgb([p(0), p(1), p(2)])
        });
        img.save(path)
    };
    result.map_err(|e| PdmError::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Image files in `dir`, sorted lexicographically.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| PdmError::io(dir, e))?;
    let mut paths = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| PdmError::io(dir, e))?.path();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase);
        if matches!(ext.as_deref(), Some("png")) && path.is_file() {
            paths.push(path);
        }
    }
    paths.sort();
    Ok(paths)
}
