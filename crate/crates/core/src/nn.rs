//! Parameterized layers recorded onto a [`Graph`].

use rand::Rng;

use crate::numerics::{ConvGeom, Graph, ParamId, Params, Scalar, Tensor, Var};

/// LayerNorm variance epsilon.
pub const LN_EPS: f64 = 1e-5;

/// Registers parameters under a dotted name prefix.
pub struct ParamBuilder<'a, T: Scalar, R: Rng> {
    params: &'a mut Params<T>,
    rng: &'a mut R,
    prefix: String,
}

impl<'a, T: Scalar, R: Rng> ParamBuilder<'a, T, R> {
    pub fn new(params: &'a mut Params<T>, rng: &'a mut R) -> Self {
        Self {
            params,
            rng,
            prefix: String::new(),
        }
    }

    /// Runs `f` with `name` appended to the prefix.
    pub fn scope<O>(&mut self, name: &str, f: impl FnOnce(&mut ParamBuilder<'_, T, R>) -> O) -> O {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        let mut child = ParamBuilder {
            params: &mut *self.params,
            rng: &mut *self.rng,
            prefix,
        };
        f(&mut child)
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn tensor(&mut self, name: &str, value: Tensor<T>) -> ParamId {
        let full = self.full_name(name);
        self.params.insert(full, value)
    }

    pub fn rng(&mut self) -> &mut R {
        self.rng
    }

    /// Xavier-uniform `[fan_in, fan_out]` matrix.
    pub fn xavier(&mut self, name: &str, fan_in: usize, fan_out: usize) -> ParamId {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let t = Tensor::uniform(&[fan_in, fan_out], -bound, bound, self.rng);
        self.tensor(name, t)
    }

    pub fn linear(&mut self, name: &str, in_dim: usize, out_dim: usize, bias: bool) -> Linear {
        self.scope(name, |b| Linear {
            weight: b.xavier("weight", in_dim, out_dim),
            bias: bias.then(|| b.tensor("bias", Tensor::zeros(&[out_dim]))),
            in_dim,
            out_dim,
        })
    }

    pub fn layer_norm(&mut self, name: &str, dim: usize) -> LayerNorm {
        self.scope(name, |b| LayerNorm {
            gamma: b.tensor("gamma", Tensor::ones(&[dim])),
            beta: b.tensor("beta", Tensor::zeros(&[dim])),
            dim,
        })
    }

    /// `k x k` channels-last convolution with bias; He-uniform weights.
    pub fn conv(&mut self, name: &str, cin: usize, cout: usize, geom: ConvGeom) -> Conv2d {
        self.scope(name, |b| {
            let fan_in = geom.kernel * geom.kernel * cin;
            let bound = (6.0 / fan_in as f64).sqrt();
            let w = Tensor::uniform(&[fan_in, cout], -bound, bound, b.rng);
            Conv2d {
                weight: b.tensor("weight", w),
                bias: b.tensor("bias", Tensor::zeros(&[cout])),
                geom,
                cin,
                cout,
            }
        })
    }
}

/// Affine map `x @ W + b` over the last axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn forward<'g, T: Scalar>(&self, g: &'g Graph<T>, p: &Params<T>, x: Var<'g, T>) -> Var<'g, T> {
        let shape = x.shape();
        assert_eq!(
            *shape.last().expect("linear input rank"),
            self.in_dim,
            "linear input width"
        );
        let rows = shape.iter().product::<usize>() / self.in_dim;
        let flat = if shape.len() == 2 {
            x
        } else {
            x.reshape(&[rows, self.in_dim])
        };
        let mut y = flat.matmul(g.param(p, self.weight));
        if let Some(b) = self.bias {
            y = y + g.param(p, b);
        }
        if shape.len() == 2 {
            y
        } else {
            let mut out_shape = shape;
            *out_shape.last_mut().expect("rank") = self.out_dim;
            y.reshape(&out_shape)
        }
    }

    pub fn num_params(&self) -> usize {
        self.in_dim * self.out_dim + if self.bias.is_some() { self.out_dim } else { 0 }
    }
}

/// Last-axis normalization with learned scale and shift.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub dim: usize,
}

impl LayerNorm {
    pub fn forward<'g, T: Scalar>(&self, g: &'g Graph<T>, p: &Params<T>, x: Var<'g, T>) -> Var<'g, T> {
        x.layer_norm(LN_EPS) * g.param(p, self.gamma) + g.param(p, self.beta)
    }

    pub fn num_params(&self) -> usize {
        2 * self.dim
    }
}

/// Channels-last convolution with bias.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub geom: ConvGeom,
    pub cin: usize,
    pub cout: usize,
}

impl Conv2d {
    pub fn forward<'g, T: Scalar>(&self, g: &'g Graph<T>, p: &Params<T>, x: Var<'g, T>) -> Var<'g, T> {
        x.conv2d(g.param(p, self.weight), self.geom) + g.param(p, self.bias)
    }

    pub fn num_params(&self) -> usize {
        self.geom.kernel * self.geom.kernel * self.cin * self.cout + self.cout
    }
}

/// Stack of linear layers with ReLU between them (none after the last).
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn build<T: Scalar, R: Rng>(b: &mut ParamBuilder<'_, T, R>, name: &str, dims: &[usize]) -> Self {
        b.scope(name, |b| Mlp {
            layers: dims
                .windows(2)
                .enumerate()
                .map(|(i, w)| b.linear(&format!("layer{i}"), w[0], w[1], true))
                .collect(),
        })
    }

    pub fn forward<'g, T: Scalar>(&self, g: &'g Graph<T>, p: &Params<T>, x: Var<'g, T>) -> Var<'g, T> {
        let last = self.layers.len() - 1;
        self.layers.iter().enumerate().fold(x, |h, (i, l)| {
            let y = l.forward(g, p, h);
            if i < last {
                y.relu()
            } else {
                y
            }
        })
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(Linear::num_params).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn counts_match_store() {
        let mut params = Params::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut b = ParamBuilder::new(&mut params, &mut rng);
        let l = b.linear("fc", 5, 3, true);
        let n = b.layer_norm("norm", 3);
        let m = Mlp::build(&mut b, "mlp", &[3, 4, 2]);
        assert_eq!(
            params.num_scalars(),
            l.num_params() + n.num_params() + m.num_params()
        );
        assert!(params.find("mlp.layer1.bias").is_some());
    }

    #[test]
    fn linear_rank3_input() {
        let mut params = Params::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let l = ParamBuilder::new(&mut params, &mut rng).linear("fc", 4, 2, true);
        let g = Graph::new();
        let x = g.constant(Tensor::ones(&[3, 5, 4]));
        assert_eq!(l.forward(&g, &params, x).shape(), vec![3, 5, 2]);
    }
}
