use crate::conv::{conv2d_backward, conv2d_forward, ConvSpec};
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A user-defined differentiable operation. The forward value is computed by
/// the caller and handed to [`Graph::custom`]; the graph only asks for the
/// vector-Jacobian product.
pub trait Function: Send + Sync {
    fn name(&self) -> &'static str;

    /// Returns one gradient per input (same order as passed to
    /// [`Graph::custom`]). Entries for inputs in `needed` that are `false`
    /// may be `None`.
    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad: &Tensor,
        needed: &[bool],
    ) -> Vec<Option<Tensor>>;
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Abs(Var),
    LeakyRelu(Var, f64),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        spec: ConvSpec,
    },
    SoftmaxChannels(Var),
    PixelShuffle(Var, usize),
    ConcatChannels(Vec<Var>),
    SpatialMean(Var),
    BroadcastSpatial(Var),
    InstanceNorm(Var, f64),
    Mean(Var),
    Sum(Var),
    Custom(Vec<Var>, Box<dyn Function>),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Tape of operations for one forward/backward pass.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Constant input; gradients never flow into it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf whose gradient is tracked.
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A new constant holding the current value of `v`.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let ng = self.needs(&[a, b]);
        self.push(value, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let ng = self.needs(&[a, b]);
        self.push(value, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let ng = self.needs(&[a, b]);
        self.push(value, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| x * c);
        let ng = self.needs(&[a]);
        self.push(value, Op::Scale(a, c), ng)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| x + c);
        let ng = self.needs(&[a]);
        self.push(value, Op::AddScalar(a), ng)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.mul(a, a)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::abs);
        let ng = self.needs(&[a]);
        self.push(value, Op::Abs(a), ng)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let value = self.value(a).map(|x| if x > 0.0 { x } else { slope * x });
        let ng = self.needs(&[a]);
        self.push(value, Op::LeakyRelu(a, slope), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.leaky_relu(a, 0.0)
    }

    /// Convolution of an `(N, Cin, H, W)` input with `(Cout, Cin, kh, kw)`
    /// weights.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, spec: ConvSpec) -> Var {
        let value = conv2d_forward(
            self.value(input),
            self.value(weight),
            bias.map(|b| self.value(b)),
            &spec,
        );
        let mut deps = vec![input, weight];
        deps.extend(bias);
        let ng = self.needs(&deps);
        self.push(
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                spec,
            },
            ng,
        )
    }

    /// Softmax across axis 1 of an `(N, C, H, W)` tensor.
    pub fn softmax_channels(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let (n, c, h, w) = x.dims4();
        let hw = h * w;
        let mut out = Tensor::zeros(x.shape());
        for s in 0..n {
            let base = s * c * hw;
            for p in 0..hw {
                let mut max = f64::NEG_INFINITY;
                for ch in 0..c {
                    max = max.max(x.data()[base + ch * hw + p]);
                }
                let mut total = 0.0;
                for ch in 0..c {
                    let e = (x.data()[base + ch * hw + p] - max).exp();
                    out.data_mut()[base + ch * hw + p] = e;
                    total += e;
                }
                for ch in 0..c {
                    out.data_mut()[base + ch * hw + p] /= total;
                }
            }
        }
        let ng = self.needs(&[a]);
        self.push(out, Op::SoftmaxChannels(a), ng)
    }

    /// `(N, C·r², H, W)` → `(N, C, H·r, W·r)`.
    pub fn pixel_shuffle(&mut self, a: Var, r: usize) -> Var {
        let x = self.value(a);
        let (n, crr, h, w) = x.dims4();
        assert_eq!(crr % (r * r), 0, "pixel_shuffle channels not divisible by r²");
        let c = crr / (r * r);
        let mut out = Tensor::zeros(&[n, c, h * r, w * r]);
        for_each_shuffle(n, c, h, w, r, |src, dst| out.data_mut()[dst] = x.data()[src]);
        let ng = self.needs(&[a]);
        self.push(out, Op::PixelShuffle(a, r), ng)
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Var {
        let first = self.value(parts[0]).dims4();
        let (n, _, h, w) = first;
        let mut total_c = 0;
        for &p in parts {
            let (pn, pc, ph, pw) = self.value(p).dims4();
            assert_eq!((pn, ph, pw), (n, h, w), "concat_channels shape mismatch");
            total_c += pc;
        }
        let hw = h * w;
        let mut data = Vec::with_capacity(n * total_c * hw);
        for s in 0..n {
            for &p in parts {
                let t = self.value(p);
                let pc = t.shape()[1];
                data.extend_from_slice(&t.data()[s * pc * hw..(s + 1) * pc * hw]);
            }
        }
        let value = Tensor::new(&[n, total_c, h, w], data).expect("concat length");
        let ng = self.needs(parts);
        self.push(value, Op::ConcatChannels(parts.to_vec()), ng)
    }

    /// Global average pool: `(N, C, H, W)` → `(N, C, 1, 1)`.
    pub fn spatial_mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let (n, c, h, w) = x.dims4();
        let hw = h * w;
        let data = x
            .data()
            .chunks(hw)
            .map(|plane| plane.iter().sum::<f64>() / hw as f64)
            .collect();
        let value = Tensor::new(&[n, c, 1, 1], data).expect("pool length");
        let ng = self.needs(&[a]);
        self.push(value, Op::SpatialMean(a), ng)
    }

    /// Repeats an `(N, C, 1, 1)` tensor over an `h × w` grid.
    pub fn broadcast_spatial(&mut self, a: Var, h: usize, w: usize) -> Var {
        let x = self.value(a);
        let (n, c, one_h, one_w) = x.dims4();
        assert_eq!((one_h, one_w), (1, 1), "broadcast_spatial expects 1x1 input");
        let mut data = Vec::with_capacity(n * c * h * w);
        for &v in x.data() {
            data.extend(std::iter::repeat(v).take(h * w));
        }
        let value = Tensor::new(&[n, c, h, w], data).expect("broadcast length");
        let ng = self.needs(&[a]);
        self.push(value, Op::BroadcastSpatial(a), ng)
    }

    /// Per-sample, per-channel normalization over the spatial axes (no affine).
    pub fn instance_norm(&mut self, a: Var, eps: f64) -> Var {
        let x = self.value(a);
        let (_, _, h, w) = x.dims4();
        let hw = h * w;
        let mut out = x.clone();
        for plane in out.data_mut().chunks_mut(hw) {
            let mean = plane.iter().sum::<f64>() / hw as f64;
            let var = plane.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / hw as f64;
            let inv = 1.0 / (var + eps).sqrt();
            plane.iter_mut().for_each(|v| *v = (*v - mean) * inv);
        }
        let ng = self.needs(&[a]);
        self.push(out, Op::InstanceNorm(a, eps), ng)
    }

    /// Mean of all entries, as a one-element tensor.
    pub fn mean(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).mean());
        let ng = self.needs(&[a]);
        self.push(value, Op::Mean(a), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        let ng = self.needs(&[a]);
        self.push(value, Op::Sum(a), ng)
    }

    /// Registers an externally computed value as the output of `f` applied
    /// to `inputs`.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor, f: Box<dyn Function>) -> Var {
        let ng = self.needs(inputs);
        self.push(output, Op::Custom(inputs.to_vec(), f), ng)
    }

    /// Reverse pass from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).len(), 1, "backward expects a scalar loss");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            for (parent, pg) in self.local_grads(node, &g) {
                if !self.nodes[parent.0].needs_grad {
                    continue;
                }
                match &mut grads[parent.0] {
                    Some(acc) => acc.add_assign(&pg),
                    slot @ None => *slot = Some(pg),
                }
            }
            // Keep gradients of leaves only; interior ones were consumed above.
        }
        Gradients { grads }
    }

    fn local_grads(&self, node: &Node, g: &Tensor) -> Vec<(Var, Tensor)> {
        let val = |v: Var| &self.nodes[v.0].value;
        let need = |v: Var| self.nodes[v.0].needs_grad;
        match &node.op {
            Op::Leaf => vec![],
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.map(|x| -x))],
            Op::Mul(a, b) => {
                let mut out = Vec::with_capacity(2);
                if need(*a) {
                    out.push((*a, g.zip_map(val(*b), |gv, bv| gv * bv)));
                }
                if need(*b) {
                    out.push((*b, g.zip_map(val(*a), |gv, av| gv * av)));
                }
                out
            }
            Op::Scale(a, c) => vec![(*a, g.map(|x| x * c))],
            Op::AddScalar(a) => vec![(*a, g.clone())],
            Op::Abs(a) => vec![(*a, g.zip_map(val(*a), |gv, x| gv * sign(x)))],
            Op::LeakyRelu(a, slope) => vec![(
                *a,
                g.zip_map(val(*a), |gv, x| if x > 0.0 { gv } else { gv * slope }),
            )],
            Op::Conv2d {
                input,
                weight,
                bias,
                spec,
            } => {
                let (dx, dw, db) = conv2d_backward(
                    val(*input),
                    val(*weight),
                    g,
                    spec,
                    need(*input),
                    need(*weight),
                    bias.is_some_and(need),
                );
                let mut out = Vec::with_capacity(3);
                if let Some(dx) = dx {
                    out.push((*input, dx));
                }
                if let Some(dw) = dw {
                    out.push((*weight, dw));
                }
                if let (Some(b), Some(db)) = (bias, db) {
                    out.push((*b, db));
                }
                out
            }
            Op::SoftmaxChannels(a) => {
                let y = &node.value;
                let (n, c, h, w) = y.dims4();
                let hw = h * w;
                let mut dx = Tensor::zeros(y.shape());
                for s in 0..n {
                    let base = s * c * hw;
                    for p in 0..hw {
                        let mut dot = 0.0;
                        for ch in 0..c {
                            let idx = base + ch * hw + p;
                            dot += y.data()[idx] * g.data()[idx];
                        }
                        for ch in 0..c {
                            let idx = base + ch * hw + p;
                            dx.data_mut()[idx] = y.data()[idx] * (g.data()[idx] - dot);
                        }
                    }
                }
                vec![(*a, dx)]
            }
            Op::PixelShuffle(a, r) => {
                let (n, crr, h, w) = val(*a).dims4();
                let c = crr / (r * r);
                let mut dx = Tensor::zeros(val(*a).shape());
                for_each_shuffle(n, c, h, w, *r, |src, dst| dx.data_mut()[src] = g.data()[dst]);
                vec![(*a, dx)]
            }
            Op::ConcatChannels(parts) => {
                let (n, total_c, h, w) = g.dims4();
                let hw = h * w;
                let mut out = Vec::with_capacity(parts.len());
                let mut offset = 0;
                for &p in parts {
                    let pc = val(p).shape()[1];
                    if need(p) {
                        let mut d = Vec::with_capacity(n * pc * hw);
                        for s in 0..n {
                            let start = (s * total_c + offset) * hw;
                            d.extend_from_slice(&g.data()[start..start + pc * hw]);
                        }
                        out.push((p, Tensor::new(val(p).shape(), d).expect("concat grad")));
                    }
                    offset += pc;
                }
                out
            }
            Op::SpatialMean(a) => {
                let (_, _, h, w) = val(*a).dims4();
                let hw = h * w;
                let mut dx = Tensor::zeros(val(*a).shape());
                for (plane, gv) in dx.data_mut().chunks_mut(hw).zip(g.data()) {
                    plane.fill(gv / hw as f64);
                }
                vec![(*a, dx)]
            }
            Op::BroadcastSpatial(a) => {
                let (_, _, h, w) = g.dims4();
                let data = g.data().chunks(h * w).map(|p| p.iter().sum()).collect();
                vec![(*a, Tensor::new(val(*a).shape(), data).expect("broadcast grad"))]
            }
            Op::InstanceNorm(a, eps) => {
                let x = val(*a);
                let y = &node.value;
                let (_, _, h, w) = x.dims4();
                let hw = h * w;
                let mut dx = Tensor::zeros(x.shape());
                let planes = x
                    .data()
                    .chunks(hw)
                    .zip(y.data().chunks(hw))
                    .zip(g.data().chunks(hw))
                    .zip(dx.data_mut().chunks_mut(hw));
                for (((xp, yp), gp), dp) in planes {
                    let mean = xp.iter().sum::<f64>() / hw as f64;
                    let var = xp.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / hw as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    let g_mean = gp.iter().sum::<f64>() / hw as f64;
                    let gy_mean = gp.iter().zip(yp).map(|(a, b)| a * b).sum::<f64>() / hw as f64;
                    for ((d, gv), yv) in dp.iter_mut().zip(gp).zip(yp) {
                        *d = inv * (gv - g_mean - yv * gy_mean);
                    }
                }
                vec![(*a, dx)]
            }
            Op::Mean(a) => {
                let n = val(*a).len() as f64;
                vec![(*a, Tensor::full(val(*a).shape(), g.data()[0] / n))]
            }
            Op::Sum(a) => vec![(*a, Tensor::full(val(*a).shape(), g.data()[0]))],
            Op::Custom(inputs, f) => {
                let values: Vec<&Tensor> = inputs.iter().map(|&v| val(v)).collect();
                let needed: Vec<bool> = inputs.iter().map(|&v| need(v)).collect();
                let grads = f.backward(&values, &node.value, g, &needed);
                assert_eq!(grads.len(), inputs.len(), "{} returned wrong arity", f.name());
                inputs
                    .iter()
                    .zip(grads)
                    .filter_map(|(&v, gr)| gr.map(|gr| (v, gr)))
                    .collect()
            }
        }
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Calls `f(src_index, dst_index)` for every element of a pixel shuffle.
fn for_each_shuffle(
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    r: usize,
    mut f: impl FnMut(usize, usize),
) {
    let (ho, wo) = (h * r, w * r);
    for s in 0..n {
        for ch in 0..c {
            for i in 0..r {
                for j in 0..r {
                    let src_c = ch * r * r + i * r + j;
                    for y in 0..h {
                        for x in 0..w {
                            let src = ((s * c * r * r + src_c) * h + y) * w + x;
                            let dst = ((s * c + ch) * ho + y * r + i) * wo + x * r + j;
                            f(src, dst);
                        }
                    }
                }
            }
        }
    }
}
