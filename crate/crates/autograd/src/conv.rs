//! 2-D convolution (cross-correlation) via im2col and GEMM.

use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PadMode {
    Zeros,
    /// Mirror without repeating the edge sample (`[2, 1 | 0, 1, 2]`).
    Reflect,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub padding: usize,
    pub pad_mode: PadMode,
}

impl ConvSpec {
    pub fn same(kernel: usize, pad_mode: PadMode) -> Self {
        Self {
            stride: 1,
            padding: kernel / 2,
            pad_mode,
        }
    }

    pub fn output_len(&self, input: usize, kernel: usize) -> usize {
        (input + 2 * self.padding - kernel) / self.stride + 1
    }
}

/// Maps a possibly out-of-range index onto `0..n` by mirror reflection.
/// Handles offsets of any size by folding with period `2 (n - 1)`.
pub fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut m = i.rem_euclid(period);
    if m >= n as isize {
        m = period - m;
    }
    m as usize
}

/// Source index along one axis for every (tap, output) pair; `None` means the
/// tap lands in zero padding.
fn axis_table(
    input: usize,
    output: usize,
    kernel: usize,
    spec: &ConvSpec,
) -> Vec<Option<usize>> {
    let mut table = Vec::with_capacity(kernel * output);
    for a in 0..kernel {
        for o in 0..output {
            let i = (o * spec.stride + a) as isize - spec.padding as isize;
            let src = if i >= 0 && (i as usize) < input {
                Some(i as usize)
            } else {
                match spec.pad_mode {
                    PadMode::Zeros => None,
                    PadMode::Reflect => Some(reflect_index(i, input)),
                }
            };
            table.push(src);
        }
    }
    table
}

struct Geometry {
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    rows: Vec<Option<usize>>,
    cols: Vec<Option<usize>>,
}

impl Geometry {
    fn new(input: &[usize], weight: &[usize], spec: &ConvSpec) -> Self {
        let (cin, h, w) = (input[1], input[2], input[3]);
        let (kh, kw) = (weight[2], weight[3]);
        assert_eq!(weight[1], cin, "conv weight expects {} input channels, got {cin}", weight[1]);
        assert!(
            h + 2 * spec.padding >= kh && w + 2 * spec.padding >= kw,
            "conv input {h}x{w} smaller than kernel {kh}x{kw}"
        );
        let ho = spec.output_len(h, kh);
        let wo = spec.output_len(w, kw);
        Self {
            cin,
            h,
            w,
            kh,
            kw,
            ho,
            wo,
            rows: axis_table(h, ho, kh, spec),
            cols: axis_table(w, wo, kw, spec),
        }
    }

    fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn p(&self) -> usize {
        self.ho * self.wo
    }

    fn is_pointwise(&self, spec: &ConvSpec) -> bool {
        self.kh == 1 && self.kw == 1 && spec.stride == 1 && spec.padding == 0
    }

    fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        let p = self.p();
        for c in 0..self.cin {
            let plane = &x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for a in 0..self.kh {
                for b in 0..self.kw {
                    let row = ((c * self.kh + a) * self.kw + b) * p;
                    let dst = &mut cols[row..row + p];
                    for oy in 0..self.ho {
                        let out = &mut dst[oy * self.wo..(oy + 1) * self.wo];
                        match self.rows[a * self.ho + oy] {
                            None => out.fill(0.0),
                            Some(iy) => {
                                let src = &plane[iy * self.w..(iy + 1) * self.w];
                                let taps = &self.cols[b * self.wo..(b + 1) * self.wo];
                                for (o, t) in out.iter_mut().zip(taps) {
                                    *o = t.map_or(0.0, |ix| src[ix]);
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f64], dx: &mut [f64]) {
        let p = self.p();
        for c in 0..self.cin {
            let plane = &mut dx[c * self.h * self.w..(c + 1) * self.h * self.w];
            for a in 0..self.kh {
                for b in 0..self.kw {
                    let row = ((c * self.kh + a) * self.kw + b) * p;
                    let src = &cols[row..row + p];
                    for oy in 0..self.ho {
                        let Some(iy) = self.rows[a * self.ho + oy] else {
                            continue;
                        };
                        let line = &src[oy * self.wo..(oy + 1) * self.wo];
                        let taps = &self.cols[b * self.wo..(b + 1) * self.wo];
                        let dst = &mut plane[iy * self.w..(iy + 1) * self.w];
                        for (g, t) in line.iter().zip(taps) {
                            if let Some(ix) = t {
                                dst[*ix] += g;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `c = a · b` (or `c += a · b` when `accumulate`), with optional transposes
/// expressed through strides. `a` is `m × k`, `b` is `k × n`, both row-major
/// before transposition.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the slice lengths cover every index reachable with the given
    // dimensions and strides; `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) fn conv2d_forward(
    x: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    spec: &ConvSpec,
) -> Tensor {
    let n = x.shape()[0];
    let cout = weight.shape()[0];
    let geo = Geometry::new(x.shape(), weight.shape(), spec);
    let (k, p) = (geo.k(), geo.p());
    let in_len = geo.cin * geo.h * geo.w;
    let mut out = Tensor::zeros(&[n, cout, geo.ho, geo.wo]);
    let pointwise = geo.is_pointwise(spec);
    let mut cols = if pointwise { Vec::new() } else { vec![0.0; k * p] };
    for s in 0..n {
        let xs = &x.data()[s * in_len..(s + 1) * in_len];
        let os = &mut out.data_mut()[s * cout * p..(s + 1) * cout * p];
        let b_mat: &[f64] = if pointwise {
            xs
        } else {
            geo.im2col(xs, &mut cols);
            &cols
        };
        gemm(cout, k, p, weight.data(), false, b_mat, false, os, false);
        if let Some(bias) = bias {
            for (co, row) in os.chunks_mut(p).enumerate() {
                let bv = bias.data()[co];
                row.iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    out
}

/// Gradients of a convolution with respect to input, weight and bias.
pub(crate) fn conv2d_backward(
    x: &Tensor,
    weight: &Tensor,
    grad_out: &Tensor,
    spec: &ConvSpec,
    need_input: bool,
    need_weight: bool,
    need_bias: bool,
) -> (Option<Tensor>, Option<Tensor>, Option<Tensor>) {
    let n = x.shape()[0];
    let cout = weight.shape()[0];
    let geo = Geometry::new(x.shape(), weight.shape(), spec);
    let (k, p) = (geo.k(), geo.p());
    let in_len = geo.cin * geo.h * geo.w;
    let pointwise = geo.is_pointwise(spec);

    let mut dx = need_input.then(|| Tensor::zeros(x.shape()));
    let mut dw = need_weight.then(|| Tensor::zeros(weight.shape()));
    let mut cols = vec![0.0; if pointwise { 0 } else { k * p }];
    let mut dcols = vec![0.0; if need_input && !pointwise { k * p } else { 0 }];

    for s in 0..n {
        let gs = &grad_out.data()[s * cout * p..(s + 1) * cout * p];
        if let Some(dw) = dw.as_mut() {
            let xs = &x.data()[s * in_len..(s + 1) * in_len];
            let cm: &[f64] = if pointwise {
                xs
            } else {
                geo.im2col(xs, &mut cols);
                &cols
            };
            // dW[cout × k] += dY[cout × p] · colsᵀ[p × k]
            gemm(cout, p, k, gs, false, cm, true, dw.data_mut(), true);
        }
        if let Some(dx) = dx.as_mut() {
            let dxs = &mut dx.data_mut()[s * in_len..(s + 1) * in_len];
            if pointwise {
                gemm(k, cout, p, weight.data(), true, gs, false, dxs, true);
            } else {
                // dcols[k × p] = Wᵀ[k × cout] · dY[cout × p]
                gemm(k, cout, p, weight.data(), true, gs, false, &mut dcols, false);
                geo.col2im(&dcols, dxs);
            }
        }
    }

    let db = need_bias.then(|| {
        let mut db = Tensor::zeros(&[cout]);
        for s in 0..n {
            let gs = &grad_out.data()[s * cout * p..(s + 1) * cout * p];
            for (co, row) in gs.chunks(p).enumerate() {
                db.data_mut()[co] += row.iter().sum::<f64>();
            }
        }
        db
    });
    (dx, dw, db)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct nested-loop convolution used as the reference.
    fn direct(x: &Tensor, w: &Tensor, b: Option<&Tensor>, spec: &ConvSpec) -> Tensor {
        let (n, cin, h, wd) = x.dims4();
        let (cout, _, kh, kw) = w.dims4();
        let ho = spec.output_len(h, kh);
        let wo = spec.output_len(wd, kw);
        let mut out = Tensor::zeros(&[n, cout, ho, wo]);
        for s in 0..n {
            for co in 0..cout {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = b.map_or(0.0, |b| b.data()[co]);
                        for ci in 0..cin {
                            for a in 0..kh {
                                for bb in 0..kw {
                                    let iy = (oy * spec.stride + a) as isize - spec.padding as isize;
                                    let ix = (ox * spec.stride + bb) as isize - spec.padding as isize;
                                    let inside = iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd;
                                    let v = if inside {
                                        x.data()[((s * cin + ci) * h + iy as usize) * wd + ix as usize]
                                    } else if spec.pad_mode == PadMode::Reflect {
                                        let ry = reflect_index(iy, h);
                                        let rx = reflect_index(ix, wd);
                                        x.data()[((s * cin + ci) * h + ry) * wd + rx]
                                    } else {
                                        0.0
                                    };
                                    acc += v * w.data()[((co * cin + ci) * kh + a) * kw + bb];
                                }
                            }
                        }
                        out.data_mut()[((s * cout + co) * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }
        out
    }

    fn pseudo(shape: &[usize], seed: u64) -> Tensor {
        let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        Tensor::from_fn(shape, |_| {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
    }

    #[test]
    fn reflect_index_mirrors_without_edge_repeat() {
        let got: Vec<usize> = (-3..8).map(|i| reflect_index(i, 5)).collect();
        assert_eq!(got, vec![3, 2, 1, 0, 1, 2, 3, 4, 3, 2, 1]);
        assert_eq!(reflect_index(-7, 2), 1);
        assert_eq!(reflect_index(9, 1), 0);
    }

    #[test]
    fn forward_matches_direct_loops() {
        let cases = [
            (ConvSpec { stride: 1, padding: 1, pad_mode: PadMode::Zeros }, 3),
            (ConvSpec { stride: 2, padding: 1, pad_mode: PadMode::Zeros }, 4),
            (ConvSpec { stride: 1, padding: 2, pad_mode: PadMode::Reflect }, 5),
            (ConvSpec { stride: 1, padding: 0, pad_mode: PadMode::Zeros }, 1),
        ];
        for (i, (spec, k)) in cases.iter().enumerate() {
            let x = pseudo(&[2, 3, 7, 6], i as u64);
            let w = pseudo(&[4, 3, *k, *k], 100 + i as u64);
            let b = pseudo(&[4], 200 + i as u64);
            let got = conv2d_forward(&x, &w, Some(&b), spec);
            let want = direct(&x, &w, Some(&b), spec);
            assert!(got.max_abs_diff(&want) < 1e-12, "case {i}");
        }
    }

    #[test]
    fn backward_is_adjoint_of_forward() {
        // <conv(x), g> must equal <x, dX(g)> and <w, dW(g)> since conv is bilinear.
        let spec = ConvSpec { stride: 2, padding: 1, pad_mode: PadMode::Reflect };
        let x = pseudo(&[2, 2, 8, 8], 7);
        let w = pseudo(&[3, 2, 3, 3], 8);
        let y = conv2d_forward(&x, &w, None, &spec);
        let g = pseudo(y.shape(), 9);
        let (dx, dw, _) = conv2d_backward(&x, &w, &g, &spec, true, true, false);
        let lhs: f64 = y.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
        let via_x: f64 = x.data().iter().zip(dx.unwrap().data()).map(|(a, b)| a * b).sum();
        let via_w: f64 = w.data().iter().zip(dw.unwrap().data()).map(|(a, b)| a * b).sum();
        assert!((lhs - via_x).abs() < 1e-10);
        assert!((lhs - via_w).abs() < 1e-10);
    }
}
