//! Small parameterised building blocks shared by the encoder, the fusion
//! stage and the attention stack.

use rand::Rng;

use crate::numerics::{Bound, Graph, NumericsError, ParamId, ParamStore, Tensor, Var};
use crate::scalar::Scalar;

/// Uniform Xavier-style initialisation, `U(-a, a)` with
/// `a = sqrt(6 / (fan_in + fan_out))`.
pub fn xavier<T: Scalar, R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize) -> Tensor<T> {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    uniform(rng, &[fan_in, fan_out], a)
}

pub fn uniform<T: Scalar, R: Rng>(rng: &mut R, shape: &[usize], a: f64) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::lit(rng.random_range(-a..=a))).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

/// `y = x W + b` with `W` stored as `[d_in, d_out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self, NumericsError> {
        let w = store.insert(&format!("{name}.w"), xavier(rng, d_in, d_out), true)?;
        let b = if bias {
            Some(store.insert(&format!("{name}.b"), Tensor::zeros(&[d_out]), true)?)
        } else {
            None
        };
        Ok(Self { w, b })
    }

    pub fn apply<T: Scalar>(&self, g: &mut Graph<T>, b: &Bound, x: Var) -> Result<Var, NumericsError> {
        let y = g.matmul(x, b[self.w])?;
        match self.b {
            Some(bias) => g.add_row(y, b[bias]),
            None => Ok(y),
        }
    }

    pub fn ids(&self) -> Vec<ParamId> {
        self.b.iter().copied().chain([self.w]).collect()
    }
}

/// Two linear layers with a ReLU and dropout between them.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub first: Linear,
    pub second: Linear,
}

impl Mlp {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        d_in: usize,
        d_hidden: usize,
        d_out: usize,
        rng: &mut R,
    ) -> Result<Self, NumericsError> {
        Ok(Self {
            first: Linear::new(store, &format!("{name}.0"), d_in, d_hidden, true, rng)?,
            second: Linear::new(store, &format!("{name}.1"), d_hidden, d_out, true, rng)?,
        })
    }

    pub fn apply<T: Scalar>(&self, g: &mut Graph<T>, b: &Bound, x: Var, dropout: f64) -> Result<Var, NumericsError> {
        let h = self.first.apply(g, b, x)?;
        let h = g.relu(h)?;
        let h = g.dropout(h, dropout)?;
        self.second.apply(g, b, h)
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut v = self.first.ids();
        v.extend(self.second.ids());
        v
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Result<Self, NumericsError> {
        Ok(Self {
            gain: store.insert(&format!("{name}.gain"), Tensor::full(&[dim], T::one()), true)?,
            bias: store.insert(&format!("{name}.bias"), Tensor::zeros(&[dim]), true)?,
        })
    }

    pub fn apply<T: Scalar>(&self, g: &mut Graph<T>, b: &Bound, x: Var) -> Result<Var, NumericsError> {
        g.layer_norm(x, b[self.gain], b[self.bias])
    }
}
