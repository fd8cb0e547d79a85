use rand::Rng;

use crate::tensor::{Bindings, Graph, ParamId, ParamSet, Tensor, TensorError, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    /// Uniform in ±1/√fan_in.
    Uniform,
    Zeros,
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        ps: &mut ParamSet,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        init: Init,
        rng: &mut impl Rng,
    ) -> Self {
        let w = match init {
            Init::Zeros => Tensor::zeros(&[in_dim, out_dim]),
            Init::Uniform => {
                let bound = 1.0 / (in_dim as f64).sqrt();
                let data = (0..in_dim * out_dim)
                    .map(|_| rng.random_range(-bound..bound))
                    .collect();
                Tensor::new(vec![in_dim, out_dim], data).expect("consistent shape")
            }
        };
        Self {
            w: ps.add(format!("{name}.w"), w),
            b: ps.add(format!("{name}.b"), Tensor::zeros(&[out_dim])),
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bindings, x: Var) -> Result<Var, TensorError> {
        let y = g.matmul(x, p[self.w])?;
        g.add(y, p[self.b])
    }

    /// `x·W` without the bias.
    pub fn project(&self, g: &mut Graph, p: &Bindings, x: Var) -> Result<Var, TensorError> {
        g.matmul(x, p[self.w])
    }
}

/// Two linear layers with a ReLU between them.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub first: Linear,
    pub second: Linear,
}

impl Mlp {
    pub fn new(
        ps: &mut ParamSet,
        name: &str,
        dims: [usize; 3],
        last: Init,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            first: Linear::new(
                ps,
                &format!("{name}.0"),
                dims[0],
                dims[1],
                Init::Uniform,
                rng,
            ),
            second: Linear::new(ps, &format!("{name}.1"), dims[1], dims[2], last, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bindings, x: Var) -> Result<Var, TensorError> {
        let h = self.first.forward(g, p, x)?;
        let h = g.relu(h)?;
        self.second.forward(g, p, h)
    }
}

/// Layer norm over the last axis of a `[n, d]` input with learned gain and bias.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(ps: &mut ParamSet, name: &str, dim: usize) -> Self {
        Self {
            gain: ps.add(format!("{name}.gain"), Tensor::full(&[dim], 1.0)),
            bias: ps.add(format!("{name}.bias"), Tensor::zeros(&[dim])),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bindings, x: Var) -> Result<Var, TensorError> {
        let n = g.layer_norm(x, 1)?;
        let n = g.mul(n, p[self.gain])?;
        g.add(n, p[self.bias])
    }
}
