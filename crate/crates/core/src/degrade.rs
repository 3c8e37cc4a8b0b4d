//! The linear degradation `y = (x ⊗ k)↓s + n` and its value types.
//!
//! Convolution is the inner product of each reflect-padded `k × k`
//! neighbourhood with the kernel (cross-correlation orientation), applied per
//! channel. Decimation keeps index 0 along each axis. Nothing is clamped here.

use pdm_autograd::{reflect_index, Function, Graph, Tensor, Var};

use crate::error::{PdmError, Result};
use crate::image::ImagePlane;
use crate::macros::named_enum;

/// Integer downsampling factor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ScaleFactor(usize);

impl ScaleFactor {
    pub fn new(s: usize) -> Result<Self> {
        if s == 0 {
            return Err(PdmError::Config("scale factor must be at least 1".into()));
        }
        Ok(Self(s))
    }

    pub fn get(self) -> usize {
        self.0
    }
}

named_enum! {
    pub enum SpatialMode {
        /// One kernel for the whole image.
        Invariant => "invariant",
        /// One kernel per HR pixel.
        Variant => "variant",
    }
}

/// Simplex-constrained blur weights of shape `(k·k, h_k, w_k)`.
#[derive(Clone, Debug, PartialEq)]
pub struct BlurKernel {
    size: usize,
    height: usize,
    width: usize,
    weights: Vec<f64>,
}

impl BlurKernel {
    /// Builds a kernel field from raw weights laid out as `(k·k, h, w)`.
    /// Only shape is validated; see [`BlurKernel::check_simplex`].
    pub fn new(size: usize, height: usize, width: usize, weights: Vec<f64>) -> Result<Self> {
        if size % 2 == 0 {
            return Err(PdmError::Shape(format!("kernel size must be odd, got {size}")));
        }
        if height == 0 || width == 0 {
            return Err(PdmError::Shape("kernel field dims must be positive".into()));
        }
        if weights.len() != size * size * height * width {
            return Err(PdmError::Shape(format!(
                "kernel ({}, {height}, {width}) needs {} weights, got {}",
                size * size,
                size * size * height * width,
                weights.len()
            )));
        }
        Ok(Self {
            size,
            height,
            width,
            weights,
        })
    }

    /// Spatially invariant kernel from `k × k` row-major taps.
    pub fn invariant(size: usize, taps: Vec<f64>) -> Result<Self> {
        Self::new(size, 1, 1, taps)
    }

    /// Centre tap 1, everything else 0.
    pub fn delta(size: usize) -> Result<Self> {
        let mut taps = vec![0.0; size * size];
        taps[size * size / 2] = 1.0;
        Self::invariant(size, taps)
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn mode(&self) -> SpatialMode {
        if self.height == 1 && self.width == 1 {
            SpatialMode::Invariant
        } else {
            SpatialMode::Variant
        }
    }

    /// `(k·k, h_k, w_k)`.
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.size * self.size, self.height, self.width)
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// The `k × k` taps at field location `(i, j)`, row-major.
    pub fn taps_at(&self, i: usize, j: usize) -> Vec<f64> {
        let hw = self.height * self.width;
        (0..self.size * self.size)
            .map(|t| self.weights[t * hw + i * self.width + j])
            .collect()
    }

    /// Largest deviation from the simplex: negative mass or column-sum error.
    pub fn simplex_error(&self) -> f64 {
        let hw = self.height * self.width;
        let mut worst: f64 = 0.0;
        for p in 0..hw {
            let mut sum = 0.0;
            for t in 0..self.size * self.size {
                let v = self.weights[t * hw + p];
                worst = worst.max(-v);
                sum += v;
            }
            worst = worst.max((sum - 1.0).abs());
        }
        worst
    }

    pub fn check_simplex(&self, tol: f64) -> Result<()> {
        let err = self.simplex_error();
        if err > tol {
            return Err(PdmError::Shape(format!(
                "kernel violates simplex constraint by {err:e}"
            )));
        }
        Ok(())
    }

    /// `(1, k·k, h_k, w_k)` tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            &[1, self.size * self.size, self.height, self.width],
            self.weights.clone(),
        )
        .expect("kernel length matches")
    }

    /// Splits an `(N, k·k, h, w)` tensor into kernels.
    pub fn from_batch(t: &Tensor, size: usize) -> Result<Vec<Self>> {
        let (n, kk, h, w) = t.dims4();
        if kk != size * size {
            return Err(PdmError::Shape(format!(
                "tensor has {kk} taps, kernel size {size} needs {}",
                size * size
            )));
        }
        let per = kk * h * w;
        (0..n)
            .map(|i| Self::new(size, h, w, t.data()[i * per..(i + 1) * per].to_vec()))
            .collect()
    }
}

/// Additive noise residual with the LR image's shape.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseMap(ImagePlane);

impl NoiseMap {
    pub fn new(plane: ImagePlane) -> Self {
        Self(plane)
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Result<Self> {
        ImagePlane::filled(channels, height, width, 0.0).map(Self)
    }

    pub fn plane(&self) -> &ImagePlane {
        &self.0
    }

    pub fn into_plane(self) -> ImagePlane {
        self.0
    }
}

fn check_kernel_field(x: (usize, usize), k: (usize, usize, usize)) -> Result<()> {
    let (_, kh, kw) = k;
    if (kh, kw) != (1, 1) && (kh, kw) != x {
        return Err(PdmError::Shape(format!(
            "spatially variant kernel field {kh}x{kw} does not match image {}x{}",
            x.0, x.1
        )));
    }
    Ok(())
}

fn check_divisible(h: usize, w: usize, s: usize) -> Result<()> {
    if h % s != 0 || w % s != 0 {
        return Err(PdmError::Shape(format!(
            "image {h}x{w} is not divisible by scale {s}; crop it to a multiple of {s} first"
        )));
    }
    Ok(())
}

/// Blurs `x` with `k` (same output size, reflect padding).
pub fn convolve_kernel(x: &ImagePlane, k: &BlurKernel) -> Result<ImagePlane> {
    check_kernel_field((x.height(), x.width()), k.shape())?;
    let out = blur_decimate_forward(&x.to_tensor(), &k.to_tensor(), k.size(), 1);
    Ok(ImagePlane::from_batch(&out)?.remove(0))
}

/// Keeps every `s`-th pixel starting at index 0.
pub fn decimate(x: &ImagePlane, s: ScaleFactor) -> Result<ImagePlane> {
    let s = s.get();
    check_divisible(x.height(), x.width(), s)?;
    ImagePlane::from_fn(x.channels(), x.height() / s, x.width() / s, |c, i, j| {
        x.get(c, i * s, j * s)
    })
}

/// Returns `(y, y_clean)` with `y_clean = decimate(convolve(x, k), s)` and
/// `y = y_clean + n`.
pub fn degrade(
    x: &ImagePlane,
    k: &BlurKernel,
    n: &NoiseMap,
    s: ScaleFactor,
) -> Result<(ImagePlane, ImagePlane)> {
    check_kernel_field((x.height(), x.width()), k.shape())?;
    check_divisible(x.height(), x.width(), s.get())?;
    let clean = blur_decimate_forward(&x.to_tensor(), &k.to_tensor(), k.size(), s.get());
    let y_clean = ImagePlane::from_batch(&clean)?.remove(0);
    let noise = n.plane();
    if noise.shape() != y_clean.shape() {
        return Err(PdmError::Shape(format!(
            "noise map {:?} does not match LR image {:?}",
            noise.shape(),
            y_clean.shape()
        )));
    }
    let mut y = y_clean.clone();
    for (v, nv) in y.data_mut().iter_mut().zip(noise.data()) {
        *v += nv;
    }
    Ok((y, y_clean))
}

/// Row (or column) source indices for every output position and tap.
fn tap_table(len: usize, out_len: usize, size: usize, s: usize) -> Vec<usize> {
    let r = (size / 2) as isize;
    let mut table = Vec::with_capacity(out_len * size);
    for o in 0..out_len {
        for a in 0..size {
            table.push(reflect_index((o * s + a) as isize - r, len));
        }
    }
    table
}

/// Fused blur + decimation over batches. `x` is `(N, C, H, W)`; `k` is
/// `(N_k, K², h_k, w_k)` with `N_k ∈ {1, N}` and `(h_k, w_k) ∈ {(1,1), (H,W)}`.
pub(crate) fn blur_decimate_forward(x: &Tensor, k: &Tensor, size: usize, s: usize) -> Tensor {
    let (n, c, h, w) = x.dims4();
    let (nk, kk, kh, kw) = k.dims4();
    debug_assert_eq!(kk, size * size);
    let (ho, wo) = (h / s, w / s);
    let rows = tap_table(h, ho, size, s);
    let cols = tap_table(w, wo, size, s);
    let variant = kh != 1 || kw != 1;
    let tap_stride = kh * kw;
    let mut out = Tensor::zeros(&[n, c, ho, wo]);
    let mut taps = vec![0.0; kk];
    for b in 0..n {
        let kb = if nk == 1 { 0 } else { b };
        let kbase = kb * kk * tap_stride;
        if !variant {
            taps.copy_from_slice(&k.data()[kbase..kbase + kk]);
        }
        for ch in 0..c {
            let plane = &x.data()[(b * c + ch) * h * w..(b * c + ch + 1) * h * w];
            let dst = &mut out.data_mut()[(b * c + ch) * ho * wo..(b * c + ch + 1) * ho * wo];
            for i in 0..ho {
                let ri = &rows[i * size..(i + 1) * size];
                for j in 0..wo {
                    let cj = &cols[j * size..(j + 1) * size];
                    if variant {
                        let p = (i * s) * kw + j * s;
                        for (t, v) in taps.iter_mut().enumerate() {
                            *v = k.data()[kbase + t * tap_stride + p];
                        }
                    }
                    let mut acc = 0.0;
                    for (a, &ry) in ri.iter().enumerate() {
                        let line = &plane[ry * w..(ry + 1) * w];
                        let kt = &taps[a * size..(a + 1) * size];
                        for (kv, &cx) in kt.iter().zip(cj) {
                            acc += kv * line[cx];
                        }
                    }
                    dst[i * wo + j] = acc;
                }
            }
        }
    }
    out
}

struct BlurDecimate {
    size: usize,
    s: usize,
}

impl Function for BlurDecimate {
    fn name(&self) -> &'static str {
        "blur_decimate"
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad: &Tensor,
        needed: &[bool],
    ) -> Vec<Option<Tensor>> {
        let (x, k) = (inputs[0], inputs[1]);
        let (size, s) = (self.size, self.s);
        let (n, c, h, w) = x.dims4();
        let (nk, kk, kh, kw) = k.dims4();
        let (ho, wo) = (h / s, w / s);
        let rows = tap_table(h, ho, size, s);
        let cols = tap_table(w, wo, size, s);
        let tap_stride = kh * kw;
        let variant = tap_stride != 1;
        let mut dx = needed[0].then(|| Tensor::zeros(x.shape()));
        let mut dk = needed[1].then(|| Tensor::zeros(k.shape()));
        for b in 0..n {
            let kbase = if nk == 1 { 0 } else { b * kk * tap_stride };
            for ch in 0..c {
                let off = (b * c + ch) * h * w;
                let g = &grad.data()[(b * c + ch) * ho * wo..(b * c + ch + 1) * ho * wo];
                for i in 0..ho {
                    let ri = &rows[i * size..(i + 1) * size];
                    for j in 0..wo {
                        let gv = g[i * wo + j];
                        if gv == 0.0 {
                            continue;
                        }
                        let cj = &cols[j * size..(j + 1) * size];
                        let p = if variant { (i * s) * kw + j * s } else { 0 };
                        for (a, &ry) in ri.iter().enumerate() {
                            for (bb, &cx) in cj.iter().enumerate() {
                                let t = kbase + (a * size + bb) * tap_stride + p;
                                let xi = off + ry * w + cx;
                                if let Some(dx) = dx.as_mut() {
                                    dx.data_mut()[xi] += gv * k.data()[t];
                                }
                                if let Some(dk) = dk.as_mut() {
                                    dk.data_mut()[t] += gv * x.data()[xi];
                                }
                            }
                        }
                    }
                }
            }
        }
        vec![dx, dk]
    }
}

/// Differentiable `decimate(convolve(x, k), s)` over batches; see
/// [`blur_decimate_forward`] for accepted shapes.
pub fn blur_decimate(g: &mut Graph, x: Var, k: Var, size: usize, s: ScaleFactor) -> Result<Var> {
    let (n, _, h, w) = g.value(x).dims4();
    let (nk, kk, kh, kw) = g.value(k).dims4();
    if size % 2 == 0 {
        return Err(PdmError::Shape(format!("kernel size must be odd, got {size}")));
    }
    if kk != size * size {
        return Err(PdmError::Shape(format!(
            "kernel tensor has {kk} taps, expected {}",
            size * size
        )));
    }
    if nk != 1 && nk != n {
        return Err(PdmError::Shape(format!(
            "kernel batch {nk} must be 1 or match image batch {n}"
        )));
    }
    check_kernel_field((h, w), (kk, kh, kw))?;
    check_divisible(h, w, s.get())?;
    let out = blur_decimate_forward(g.value(x), g.value(k), size, s.get());
    Ok(g.custom(&[x, k], out, Box::new(BlurDecimate { size, s: s.get() })))
}

struct Decimate {
    s: usize,
}

impl Function for Decimate {
    fn name(&self) -> &'static str {
        "decimate"
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad: &Tensor,
        _needed: &[bool],
    ) -> Vec<Option<Tensor>> {
        let (n, c, h, w) = inputs[0].dims4();
        let (ho, wo) = (h / self.s, w / self.s);
        let mut dx = Tensor::zeros(inputs[0].shape());
        for p in 0..n * c {
            for i in 0..ho {
                for j in 0..wo {
                    dx.data_mut()[(p * h + i * self.s) * w + j * self.s] =
                        grad.data()[(p * ho + i) * wo + j];
                }
            }
        }
        vec![Some(dx)]
    }
}

/// Differentiable decimation of an `(N, C, H, W)` tensor.
pub fn decimate_var(g: &mut Graph, x: Var, s: ScaleFactor) -> Result<Var> {
    let (n, c, h, w) = g.value(x).dims4();
    let s = s.get();
    check_divisible(h, w, s)?;
    let (ho, wo) = (h / s, w / s);
    let src = g.value(x);
    let mut out = Tensor::zeros(&[n, c, ho, wo]);
    for p in 0..n * c {
        for i in 0..ho {
            for j in 0..wo {
                out.data_mut()[(p * ho + i) * wo + j] = src.data()[(p * h + i * s) * w + j * s];
            }
        }
    }
    Ok(g.custom(&[x], out, Box::new(Decimate { s })))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(c: usize, h: usize, w: usize) -> ImagePlane {
        ImagePlane::from_fn(c, h, w, |ch, y, x| ((ch * h + y) * w + x) as f64).unwrap()
    }

    #[test]
    fn even_kernel_size_rejected() {
        assert!(BlurKernel::invariant(4, vec![1.0 / 16.0; 16]).is_err());
    }

    #[test]
    fn variant_field_shape_mismatch_rejected() {
        let x = ramp(1, 6, 6);
        let k = BlurKernel::new(3, 5, 6, vec![1.0 / 9.0; 9 * 30]).unwrap();
        let err = convolve_kernel(&x, &k).unwrap_err();
        assert!(matches!(err, PdmError::Shape(_)));
    }

    #[test]
    fn decimate_keeps_top_left_phase() {
        let x = ramp(1, 4, 4);
        let y = decimate(&x, ScaleFactor::new(2).unwrap()).unwrap();
        assert_eq!(y.data(), &[0.0, 2.0, 8.0, 10.0]);
        assert_eq!(decimate(&x, ScaleFactor::new(1).unwrap()).unwrap(), x);
    }

    #[test]
    fn decimate_requires_divisible_dims() {
        let err = decimate(&ramp(1, 5, 4), ScaleFactor::new(2).unwrap()).unwrap_err();
        assert!(err.to_string().contains("crop"));
    }

    #[test]
    fn delta_kernel_is_identity() {
        let x = ramp(3, 5, 7);
        let y = convolve_kernel(&x, &BlurKernel::delta(5).unwrap()).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn noise_shape_must_match() {
        let x = ramp(1, 4, 4);
        let n = NoiseMap::zeros(1, 4, 4).unwrap();
        let s = ScaleFactor::new(2).unwrap();
        assert!(degrade(&x, &BlurKernel::delta(3).unwrap(), &n, s).is_err());
    }

    #[test]
    fn delta_with_constant_noise_adds_offset() {
        let x = ramp(3, 4, 6);
        let s = ScaleFactor::new(2).unwrap();
        let n = NoiseMap::new(ImagePlane::filled(3, 2, 3, 0.1).unwrap());
        let (y, clean) = degrade(&x, &BlurKernel::delta(3).unwrap(), &n, s).unwrap();
        let dec = decimate(&x, s).unwrap();
        assert_eq!(clean, dec);
        for (a, b) in y.data().iter().zip(dec.data()) {
            assert!((a - b - 0.1).abs() < 1e-12);
        }
    }

    #[test]
    fn shared_kernel_accumulates_batch_gradient() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[3, 1, 4, 4], 1.0));
        let mut taps = vec![0.0; 9];
        taps[4] = 1.0;
        let k = g.variable(Tensor::new(&[1, 9, 1, 1], taps).unwrap());
        let y = blur_decimate(&mut g, x, k, 3, ScaleFactor::new(2).unwrap()).unwrap();
        let l = g.sum(y);
        let grads = g.backward(l);
        // 3 samples x 4 outputs, each tap sees an input of 1.
        assert!(grads.get(k).unwrap().data().iter().all(|&v| v == 12.0));
    }
}
