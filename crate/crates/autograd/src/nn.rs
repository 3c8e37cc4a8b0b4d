use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::conv::ConvSpec;
use crate::graph::{Gradients, Graph, Var};
use crate::tensor::Tensor;

/// Weight initialization scheme.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Zero-mean Gaussian with the given standard deviation.
    Normal(f64),
    /// `U(-1/√fan_in, 1/√fan_in)`.
    FanInUniform,
    Zeros,
}

impl Init {
    fn sample(&self, shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
        match *self {
            Init::Normal(std) => {
                let dist = Normal::new(0.0, std).expect("init std must be finite");
                Tensor::from_fn(shape, |_| dist.sample(rng))
            }
            Init::FanInUniform => {
                let bound = 1.0 / (fan_in as f64).sqrt();
                let dist = Uniform::new_inclusive(-bound, bound).expect("init bound");
                Tensor::from_fn(shape, |_| dist.sample(rng))
            }
            Init::Zeros => Tensor::zeros(shape),
        }
    }
}

/// Ordered, named collection of trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor) -> usize {
        self.names.push(name.into());
        self.values.push(value);
        self.values.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn get(&self, i: usize) -> &Tensor {
        &self.values[i]
    }

    pub fn get_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.values[i]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.values[i])
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Copies every parameter into `g` as a gradient-tracked leaf.
    pub fn bind(&self, g: &mut Graph) -> BoundParams {
        BoundParams {
            vars: self.values.iter().map(|t| g.variable(t.clone())).collect(),
        }
    }

    /// Copies every parameter into `g` as a constant (no gradient).
    pub fn bind_frozen(&self, g: &mut Graph) -> BoundParams {
        BoundParams {
            vars: self.values.iter().map(|t| g.constant(t.clone())).collect(),
        }
    }
}

/// The graph handles of a bound [`ParamSet`], in the same order.
#[derive(Clone, Debug)]
pub struct BoundParams {
    vars: Vec<Var>,
}

impl BoundParams {
    pub fn var(&self, i: usize) -> Var {
        self.vars[i]
    }

    /// One gradient per parameter; parameters that did not influence the
    /// loss get zeros.
    pub fn grads(&self, g: &Graph, grads: &mut Gradients) -> Vec<Tensor> {
        self.vars
            .iter()
            .map(|&v| {
                grads
                    .take(v)
                    .unwrap_or_else(|| Tensor::zeros(g.value(v).shape()))
            })
            .collect()
    }
}

/// Convolution layer whose weights live in a [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Conv2d {
    pub weight: usize,
    pub bias: Option<usize>,
    pub spec: ConvSpec,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        spec: ConvSpec,
        init: Init,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = cin * kernel * kernel;
        let w = init.sample(&[cout, cin, kernel, kernel], fan_in, rng);
        let weight = params.push(format!("{name}.weight"), w);
        let bias_init = match init {
            Init::FanInUniform => Init::FanInUniform,
            _ => Init::Zeros,
        };
        let b = bias_init.sample(&[cout], fan_in, rng);
        let bias = Some(params.push(format!("{name}.bias"), b));
        Self { weight, bias, spec }
    }

    pub fn forward(&self, g: &mut Graph, p: &BoundParams, x: Var) -> Var {
        g.conv2d(x, p.var(self.weight), self.bias.map(|b| p.var(b)), self.spec)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conv::PadMode;
    use rand::SeedableRng;

    #[test]
    fn conv_layer_registers_named_params() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let mut ps = ParamSet::new();
        let c = Conv2d::new(
            &mut ps,
            "head",
            3,
            8,
            3,
            ConvSpec::same(3, PadMode::Zeros),
            Init::Normal(0.02),
            &mut rng,
        );
        assert_eq!(ps.names(), &["head.weight".to_string(), "head.bias".to_string()]);
        assert_eq!(ps.get(c.weight).shape(), &[8, 3, 3, 3]);
        assert_eq!(ps.num_scalars(), 8 * 27 + 8);
        assert!(ps.by_name("head.bias").unwrap().data().iter().all(|&b| b == 0.0));
    }

    #[test]
    fn unused_params_get_zero_grads() {
        let mut ps = ParamSet::new();
        ps.push("used", Tensor::full(&[2], 1.0));
        ps.push("unused", Tensor::full(&[3], 1.0));
        let mut g = Graph::new();
        let bound = ps.bind(&mut g);
        let l = g.sum(bound.var(0));
        let mut grads = g.backward(l);
        let gs = bound.grads(&g, &mut grads);
        assert_eq!(gs[0].data(), &[1.0, 1.0]);
        assert_eq!(gs[1].data(), &[0.0, 0.0, 0.0]);
    }
}
